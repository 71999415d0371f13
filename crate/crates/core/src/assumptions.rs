//! Sampled estimates of the structural constants (B1)–(B5).
//!
//! Every constant is the extremal difference quotient over random point pairs
//! drawn from a box. These are sample bounds, not certificates: a "pass"
//! verdict says no sampled pair violated the inequality.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gfunc::g_of;
use crate::problem::ProblemSpec;

/// Sampling region for state, value and `z` arguments. Controls are drawn
/// from the problem's control box.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub state: Vec<(f64, f64)>,
    pub y: (f64, f64),
    pub z: Vec<(f64, f64)>,
}

impl SampleBox {
    /// State box as given, `y ∈ [−10, 10]`, each `z_k ∈ [−10, 10]`.
    pub fn new(state: Vec<(f64, f64)>, d: usize) -> Self {
        Self {
            state,
            y: (-10.0, 10.0),
            z: vec![(-10.0, 10.0); d],
        }
    }

    fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        if self.state.len() != spec.n() || self.z.len() != spec.d() {
            return Err(Error::DimensionMismatch(format!(
                "sample box has {} state and {} z axes, problem has n={} and d={}",
                self.state.len(),
                self.z.len(),
                spec.n(),
                spec.d()
            )));
        }
        let all = self.state.iter().chain(std::iter::once(&self.y)).chain(&self.z);
        for (lo, hi) in all {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidInput(format!(
                    "sample box axis [{lo}, {hi}] is degenerate"
                )));
            }
        }
        Ok(())
    }
}

/// The sample pair attaining an extremal quotient, as full slot vectors
/// `[x, u, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub point: Vec<f64>,
    pub other: Vec<f64>,
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub assumption: String,
    pub pass: bool,
    pub detail: String,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub l: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub mu_hat: f64,
    pub eta_hat: f64,
    pub eta_bar_hat: f64,
    pub sigma_hi2: f64,
    pub n_samples: usize,
    pub verdicts: Vec<Verdict>,
}

impl AssumptionReport {
    pub fn verdict(&self, assumption: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.assumption == assumption)
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

#[derive(Default)]
struct Extremum {
    value: Option<f64>,
    witness: Option<Witness>,
}

impl Extremum {
    fn offer_max(&mut self, q: f64, a: &[f64], b: &[f64]) {
        if q.is_finite() && self.value.is_none_or(|v| q > v) {
            self.value = Some(q);
            self.witness = Some(Witness {
                point: a.to_vec(),
                other: b.to_vec(),
                quotient: q,
            });
        }
    }

    fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }
}

struct Coefficients {
    b: Vec<f64>,
    h: Vec<f64>,
    sigma: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

fn coefficients(spec: &ProblemSpec, slots: &[f64]) -> Result<Coefficients> {
    let (n, d) = (spec.n(), spec.d());
    let mut c = Coefficients {
        b: vec![0.0; n],
        h: vec![0.0; d * d * n],
        sigma: vec![0.0; n * d],
        f: spec.eval_f(slots)?,
        g: vec![0.0; d * d],
    };
    spec.eval_drift(slots, &mut c.b)?;
    spec.eval_h(slots, &mut c.h)?;
    spec.eval_sigma(slots, &mut c.sigma)?;
    spec.eval_g(slots, &mut c.g)?;
    Ok(c)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    norm(a.iter().zip(b).map(|(x, y)| x - y))
}

fn abs_diff_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Estimates `L, α₁, α₂, μ, η, η̄` by sampling `n_samples` point pairs.
pub fn check_assumptions(
    spec: &ProblemSpec,
    sample_box: &SampleBox,
    n_samples: usize,
    rng_seed: u64,
) -> Result<AssumptionReport> {
    if n_samples < 2 {
        return Err(Error::InvalidInput("n_samples must be at least 2".into()));
    }
    sample_box.validate(spec)?;
    let (n, m, d) = (spec.n(), spec.m(), spec.d());
    let gamma = spec.gamma();
    let controls = spec.controls();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();

    let mut l_max = Extremum::default();
    let mut alpha1 = Extremum::default();
    let mut alpha2 = Extremum::default();
    let mut b3 = Extremum::default();
    let mut b4 = Extremum::default();

    for _ in 0..n_samples {
        let x: Vec<f64> = sample_box.state.iter().map(|&(lo, hi)| draw(lo, hi)).collect();
        let x2: Vec<f64> = sample_box.state.iter().map(|&(lo, hi)| draw(lo, hi)).collect();
        let u: Vec<f64> = (0..m).map(|a| draw(controls.lower()[a], controls.upper()[a])).collect();
        let u2: Vec<f64> = (0..m).map(|a| draw(controls.lower()[a], controls.upper()[a])).collect();
        let y = draw(sample_box.y.0, sample_box.y.1);
        let y2 = draw(sample_box.y.0, sample_box.y.1);
        let z: Vec<f64> = sample_box.z.iter().map(|&(lo, hi)| draw(lo, hi)).collect();
        let z2: Vec<f64> = sample_box.z.iter().map(|&(lo, hi)| draw(lo, hi)).collect();

        let dx = diff_norm(&x, &x2);
        let du = diff_norm(&u, &u2);
        let dy = (y - y2).abs();
        let dz = diff_norm(&z, &z2);

        let s_base = spec.slots(&x, &u, y, &z);
        let c_base = coefficients(spec, &s_base)?;

        // Drift and h Lipschitz in (x, u) jointly.
        let s_xu = spec.slots(&x2, &u2, y2, &z);
        let c_xu = coefficients(spec, &s_xu)?;
        if dx + du > 0.0 {
            let q = (diff_norm(&c_base.b, &c_xu.b)
                + (0..d * d)
                    .map(|ij| diff_norm(&c_base.h[ij * n..(ij + 1) * n], &c_xu.h[ij * n..(ij + 1) * n]))
                    .sum::<f64>())
                / (dx + du);
            l_max.offer_max(q, &s_base, &s_xu);
        }
        // f, g Lipschitz in (x, y, u) with the (1 + |x| + |x'|) weight.
        let weight = (1.0 + norm(x.iter().copied()) + norm(x2.iter().copied())) * dx + dy + du;
        if weight > 0.0 {
            let q = ((c_base.f - c_xu.f).abs() + abs_diff_sum(&c_base.g, &c_xu.g)) / weight;
            l_max.offer_max(q, &s_base, &s_xu);
        }

        // σ in x at fixed u, then in u at fixed x.
        let s_x = spec.slots(&x2, &u, y, &z);
        let c_x = coefficients(spec, &s_x)?;
        if dx > 0.0 {
            alpha1.offer_max(diff_norm(&c_base.sigma, &c_x.sigma) / dx, &s_base, &s_x);
        }
        if m > 0 && du > 0.0 {
            let s_u = spec.slots(&x, &u2, y, &z);
            let c_u = coefficients(spec, &s_u)?;
            l_max.offer_max(diff_norm(&c_base.sigma, &c_u.sigma) / du, &s_base, &s_u);
        }

        // f, g in z.
        if dz > 0.0 {
            let s_z = spec.slots(&x, &u, y, &z2);
            let c_z = coefficients(spec, &s_z)?;
            let q = ((c_base.f - c_z.f).abs() + abs_diff_sum(&c_base.g, &c_z.g)) / dz;
            alpha2.offer_max(q, &s_base, &s_z);
        }

        // (B3): one-sided monotonicity in y.
        if dy > 0.0 {
            let s_y = spec.slots(&x, &u, y2, &z);
            let c_y = coefficients(spec, &s_y)?;
            let dg = DMatrix::from_fn(d, d, |i, j| (c_base.g[i * d + j] - c_y.g[i * d + j]) * (y - y2));
            let q = ((c_base.f - c_y.f) * (y - y2) + 2.0 * g_of(gamma, &dg)?) / (dy * dy);
            b3.offer_max(q, &s_base, &s_y);
        }

        // (B4): dissipativity of the state flow at a common control.
        if dx > 0.0 {
            let delta: Vec<f64> = x.iter().zip(&x2).map(|(a, b)| a - b).collect();
            let dsig: Vec<f64> = c_base.sigma.iter().zip(&c_x.sigma).map(|(a, b)| a - b).collect();
            let mut mat = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let quad: f64 = (0..n).map(|r| dsig[r * d + i] * dsig[r * d + j]).sum();
                    let ij = i * d + j;
                    let hdot: f64 = (0..n)
                        .map(|k| delta[k] * (c_base.h[ij * n + k] - c_x.h[ij * n + k]))
                        .sum();
                    mat[(i, j)] = quad + 2.0 * hdot;
                }
            }
            let bdot: f64 = (0..n).map(|k| delta[k] * (c_base.b[k] - c_x.b[k])).sum();
            let q = (bdot + g_of(gamma, &mat)?) / (dx * dx);
            b4.offer_max(q, &s_base, &s_x);
        }
    }

    let l = l_max.get();
    let a1 = alpha1.get();
    let a2 = alpha2.get();
    let mu_hat = -b3.value.unwrap_or(f64::NEG_INFINITY);
    let eta_hat = -b4.value.unwrap_or(f64::NEG_INFINITY);
    let sigma_hi2 = gamma.sigma_hi2();
    let eta_bar_hat = eta_hat - (1.0 + sigma_hi2) * a1 * a2;

    let symmetric = spec.is_structurally_symmetric();
    let verdicts = vec![
        Verdict {
            assumption: "B1".into(),
            pass: symmetric,
            detail: if symmetric {
                "h_ij = h_ji and g_ij = g_ji structurally".into()
            } else {
                "h or g is not symmetric in (i, j)".into()
            },
            witness: None,
        },
        Verdict {
            assumption: "B2".into(),
            pass: l.is_finite() && a1.is_finite() && a2.is_finite(),
            detail: format!("L >= {l:.6e}, alpha1 >= {a1:.6e}, alpha2 >= {a2:.6e}"),
            witness: l_max.witness.clone(),
        },
        Verdict {
            assumption: "B3".into(),
            pass: mu_hat > 0.0,
            detail: format!("mu_hat = {mu_hat:.6e}"),
            witness: b3.witness.clone(),
        },
        Verdict {
            assumption: "B4".into(),
            pass: eta_hat > 0.0,
            detail: format!("eta_hat = {eta_hat:.6e}"),
            witness: b4.witness.clone(),
        },
        Verdict {
            assumption: "B5".into(),
            pass: eta_bar_hat > 0.0,
            detail: format!("eta_bar_hat = eta_hat - (1 + sigma_hi2) alpha1 alpha2 = {eta_bar_hat:.6e}"),
            witness: None,
        },
    ];

    Ok(AssumptionReport {
        l,
        alpha1: a1,
        alpha2: a2,
        mu_hat,
        eta_hat,
        eta_bar_hat,
        sigma_hi2,
        n_samples,
        verdicts,
    })
}
