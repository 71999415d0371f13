use nalgebra::DMatrix;
use rayon::prelude::*;

use super::field::ValueField;
use super::grid::Grid;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Safety factor applied to the reciprocal of the largest stencil rate.
pub const CFL_SAFETY: f64 = 0.9;

/// Upper limit on the number of cached coefficients (8 bytes each).
pub const MAX_CACHED_COEFFICIENTS: usize = 48_000_000;

const LANES: usize = 4;
const PARALLEL_WORK: usize = 1 << 20;
const CHUNK: usize = 64;

/// Explicit monotone finite-difference discretisation of the parabolic HJBI
/// equation on a fixed grid.
///
/// For every node, lattice control `u` and candidate `Q` the integrand is the
/// linear functional `½ Σ D_ab ∂²_ab v + β·∂v + r·v + s` of a local stencil,
/// with `D = σQσᵀ` and the drift `β` collecting `b`, the `h` term and the
/// part of `f`, `g` that is linear in `z = ∂v·σ`. First differences are
/// upwinded by the sign of `β`; a difference that would leave the grid is
/// taken as zero, and second and cross differences vanish on boundary
/// nodes, so every row stays monotone. Mixed derivatives use the seven-point
/// splitting selected by the sign of `D_ab` and require diagonal dominance.
///
/// When `f` and every `g_ij` are affine in `(y, z)` all coefficients are
/// precomputed. Otherwise `f` and `g` are evaluated each step with `z` taken
/// from central differences, which is consistent but not guaranteed monotone.
#[derive(Debug, Clone)]
pub struct Scheme {
    spec: ProblemSpec,
    grid: Grid,
    n: usize,
    pairs: Vec<(usize, usize)>,
    width: usize,
    qs: Vec<Vec<f64>>,
    n_controls: usize,
    lanes: usize,
    shared: Vec<bool>,
    cache: Vec<f64>,
    node_start: Vec<usize>,
    node_rows: Vec<(usize, usize, usize)>,
    row_js: Vec<usize>,
    nonlinear_sigma: Option<Vec<f64>>,
    neighbours: Vec<u8>,
    /// Stride and spacing per axis.
    steps: Vec<(usize, f64)>,
    coords: Vec<f64>,
    dt_max: f64,
    wide: bool,
}

const HAS_LO: u8 = 1;
const HAS_HI: u8 = 2;

struct Offsets {
    fwd: usize,
    bwd: usize,
    splus: usize,
    sminus: usize,
    v: usize,
    one: usize,
}

/// Scratch buffers for one worker.
struct Scratch {
    stencil: Vec<f64>,
    gathered: Vec<f64>,
    acc: Vec<f64>,
    slots: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
}

/// Discrete integrand for every control and candidate. `s` holds the
/// stencil entries of the node's `nc` shared and `nd` candidate rows in
/// cache order. Each value is the shared rows summed first, then the
/// candidate rows, in ascending stencil index. With `fuse` only the maximum
/// over candidates is kept, in `acc[k]`; otherwise candidate `q` fills
/// `acc[q·lanes..]`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn contract(block: &[f64], nc: usize, nd: usize, qn: usize, s: &[f64], acc: &mut [f64], lanes: usize, fuse: bool) {
    if nc + qn * nd == 0 {
        acc.fill(0.0);
    } else if fuse {
        let acc = &mut acc[..lanes];
        match (nc, nd, qn) {
            (0, 0, 1) => fixed::<0, 0, 1>(block, s, acc),
            (0, 1, 1) => fixed::<0, 1, 1>(block, s, acc),
            (0, 2, 1) => fixed::<0, 2, 1>(block, s, acc),
            (0, 3, 1) => fixed::<0, 3, 1>(block, s, acc),
            (1, 0, 1) => fixed::<1, 0, 1>(block, s, acc),
            (1, 1, 1) => fixed::<1, 1, 1>(block, s, acc),
            (1, 2, 1) => fixed::<1, 2, 1>(block, s, acc),
            (1, 3, 1) => fixed::<1, 3, 1>(block, s, acc),
            (2, 0, 1) => fixed::<2, 0, 1>(block, s, acc),
            (2, 1, 1) => fixed::<2, 1, 1>(block, s, acc),
            (2, 2, 1) => fixed::<2, 2, 1>(block, s, acc),
            (2, 3, 1) => fixed::<2, 3, 1>(block, s, acc),
            (3, 0, 1) => fixed::<3, 0, 1>(block, s, acc),
            (3, 1, 1) => fixed::<3, 1, 1>(block, s, acc),
            (3, 2, 1) => fixed::<3, 2, 1>(block, s, acc),
            (3, 3, 1) => fixed::<3, 3, 1>(block, s, acc),
            (4, 0, 1) => fixed::<4, 0, 1>(block, s, acc),
            (4, 1, 1) => fixed::<4, 1, 1>(block, s, acc),
            (4, 2, 1) => fixed::<4, 2, 1>(block, s, acc),
            (4, 3, 1) => fixed::<4, 3, 1>(block, s, acc),
            (5, 0, 1) => fixed::<5, 0, 1>(block, s, acc),
            (5, 1, 1) => fixed::<5, 1, 1>(block, s, acc),
            (5, 2, 1) => fixed::<5, 2, 1>(block, s, acc),
            (5, 3, 1) => fixed::<5, 3, 1>(block, s, acc),
            (0, 0, 2) => fixed::<0, 0, 2>(block, s, acc),
            (0, 1, 2) => fixed::<0, 1, 2>(block, s, acc),
            (0, 2, 2) => fixed::<0, 2, 2>(block, s, acc),
            (0, 3, 2) => fixed::<0, 3, 2>(block, s, acc),
            (1, 0, 2) => fixed::<1, 0, 2>(block, s, acc),
            (1, 1, 2) => fixed::<1, 1, 2>(block, s, acc),
            (1, 2, 2) => fixed::<1, 2, 2>(block, s, acc),
            (1, 3, 2) => fixed::<1, 3, 2>(block, s, acc),
            (2, 0, 2) => fixed::<2, 0, 2>(block, s, acc),
            (2, 1, 2) => fixed::<2, 1, 2>(block, s, acc),
            (2, 2, 2) => fixed::<2, 2, 2>(block, s, acc),
            (2, 3, 2) => fixed::<2, 3, 2>(block, s, acc),
            (3, 0, 2) => fixed::<3, 0, 2>(block, s, acc),
            (3, 1, 2) => fixed::<3, 1, 2>(block, s, acc),
            (3, 2, 2) => fixed::<3, 2, 2>(block, s, acc),
            (3, 3, 2) => fixed::<3, 3, 2>(block, s, acc),
            (4, 0, 2) => fixed::<4, 0, 2>(block, s, acc),
            (4, 1, 2) => fixed::<4, 1, 2>(block, s, acc),
            (4, 2, 2) => fixed::<4, 2, 2>(block, s, acc),
            (4, 3, 2) => fixed::<4, 3, 2>(block, s, acc),
            (5, 0, 2) => fixed::<5, 0, 2>(block, s, acc),
            (5, 1, 2) => fixed::<5, 1, 2>(block, s, acc),
            (5, 2, 2) => fixed::<5, 2, 2>(block, s, acc),
            (5, 3, 2) => fixed::<5, 3, 2>(block, s, acc),
            _ => dynamic(block, nc, nd, qn, s, acc, lanes, true),
        }
    } else {
        dynamic(block, nc, nd, qn, s, acc, lanes, false);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn contract_avx2(
    block: &[f64],
    nc: usize,
    nd: usize,
    qn: usize,
    s: &[f64],
    acc: &mut [f64],
    lanes: usize,
    fuse: bool,
) {
    contract(block, nc, nd, qn, s, acc, lanes, fuse)
}

fn avx2_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Fused kernel with the row counts fixed at compile time.
#[inline(always)]
fn fixed<const NC: usize, const ND: usize, const QN: usize>(block: &[f64], s: &[f64], acc: &mut [f64]) {
    let sc: [f64; NC] = std::array::from_fn(|r| s[r]);
    let sd: [f64; ND] = std::array::from_fn(|r| s[NC + r]);
    let (rows, _) = block.as_chunks::<LANES>();
    let (out, _) = acc.as_chunks_mut::<LANES>();
    for (g, out) in rows.chunks_exact(NC + QN * ND).zip(out) {
        let mut shared = [0.0; LANES];
        for r in 0..NC {
            for l in 0..LANES {
                shared[l] += g[r][l] * sc[r];
            }
        }
        let mut worst = [0.0; LANES];
        for q in 0..QN {
            let mut a = shared;
            for r in 0..ND {
                let c = &g[NC + q * ND + r];
                for l in 0..LANES {
                    a[l] += c[l] * sd[r];
                }
            }
            for l in 0..LANES {
                worst[l] = if q == 0 || a[l] > worst[l] { a[l] } else { worst[l] };
            }
        }
        *out = worst;
    }
}

/// Smallest entry and the lowest index holding it; NaN entries are skipped.
fn first_min(values: &[f64]) -> (f64, usize) {
    let (chunks, tail) = values.as_chunks::<LANES>();
    let mut m = [f64::INFINITY; LANES];
    let mut at = [0usize; LANES];
    for (i, c) in chunks.iter().enumerate() {
        for l in 0..LANES {
            if c[l] < m[l] {
                m[l] = c[l];
                at[l] = i * LANES + l;
            }
        }
    }
    let mut best = (f64::INFINITY, 0);
    let tail_start = chunks.len() * LANES;
    let candidates = (0..LANES)
        .map(|l| (m[l], at[l]))
        .chain(tail.iter().enumerate().map(|(i, &v)| (v, tail_start + i)));
    for (v, k) in candidates {
        if v < best.0 || (v == best.0 && k < best.1) {
            best = (v, k);
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn dynamic(block: &[f64], nc: usize, nd: usize, qn: usize, s: &[f64], acc: &mut [f64], lanes: usize, fuse: bool) {
    let group = (nc + qn * nd) * LANES;
    for (ch, g) in block.chunks_exact(group).enumerate() {
        let mut rows = g.chunks_exact(LANES);
        let mut shared = [0.0; LANES];
        for &sj in &s[..nc] {
            let c = rows.next().expect("shared row");
            for l in 0..LANES {
                shared[l] += c[l] * sj;
            }
        }
        let mut worst = [0.0; LANES];
        for q in 0..qn {
            let mut a = shared;
            for &sj in &s[nc..nc + nd] {
                let c = rows.next().expect("candidate row");
                for l in 0..LANES {
                    a[l] += c[l] * sj;
                }
            }
            let lane = ch * LANES..(ch + 1) * LANES;
            if fuse {
                for l in 0..LANES {
                    worst[l] = if q == 0 || a[l] > worst[l] { a[l] } else { worst[l] };
                }
                if q + 1 == qn {
                    acc[lane].copy_from_slice(&worst);
                }
            } else {
                acc[q * lanes + lane.start..q * lanes + lane.end].copy_from_slice(&a);
            }
        }
    }
}

fn is_value_var(name: &str) -> bool {
    name == "y" || name.starts_with('z')
}

impl Scheme {
    pub fn new(spec: &ProblemSpec, grid: &Grid) -> Result<Self> {
        let n = spec.n();
        if grid.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "grid has dimension {}, problem has n = {n}",
                grid.dim()
            )));
        }
        let d = spec.d();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        let width = 3 * n + 2 * pairs.len() + 2;
        let qs: Vec<Vec<f64>> = spec
            .gamma()
            .candidates()
            .iter()
            .map(|q| q.transpose().as_slice().to_vec())
            .collect();
        let n_controls = spec.controls().len();
        let nodes = grid.len();
        let lanes = n_controls.div_ceil(LANES) * LANES;
        let block = qs.len() * width * lanes;
        if nodes.saturating_mul(block) > MAX_CACHED_COEFFICIENTS {
            return Err(Error::InvalidInput(format!(
                "{nodes} nodes x {n_controls} controls x {} candidates exceed the coefficient cache; \
                 use a coarser grid or control lattice",
                qs.len()
            )));
        }
        let affine = spec.f_expr().degree_in(&is_value_var).is_some_and(|k| k <= 1)
            && (0..d).all(|i| (0..d).all(|j| spec.g_expr(i, j).degree_in(&is_value_var).is_some_and(|k| k <= 1)));

        let mut neighbours = vec![0u8; nodes * n];
        let mut coords = vec![0.0; nodes * n];
        for node in 0..nodes {
            grid.coords_into(node, &mut coords[node * n..(node + 1) * n]);
            for a in 0..n {
                let (lo, hi) = grid.neighbours(node, a);
                neighbours[node * n + a] = ((lo as u8) * HAS_LO) | ((hi as u8) * HAS_HI);
            }
        }

        // Rows that never depend on the candidate Q are contracted once per
        // control and shared by all candidates.
        let qn = qs.len();
        let off_v = 3 * n + 2 * pairs.len();
        let drift_shared = spec.h_is_zero() && spec.g_is_zero();
        let shared: Vec<bool> = (0..width)
            .map(|j| {
                qn == 1
                    || if j < n || (3 * n..off_v).contains(&j) {
                        false
                    } else if j < 3 * n {
                        drift_shared
                    } else {
                        spec.g_is_zero()
                    }
            })
            .collect();

        let mut scheme = Scheme {
            spec: spec.clone(),
            grid: grid.clone(),
            n,
            pairs,
            width,
            qs,
            n_controls,
            lanes,
            shared,
            cache: Vec::new(),
            node_start: Vec::with_capacity(nodes + 1),
            node_rows: Vec::with_capacity(nodes),
            row_js: Vec::new(),
            nonlinear_sigma: if affine {
                None
            } else {
                Some(vec![0.0; nodes * n_controls * n * d])
            },
            neighbours,
            steps: (0..n).map(|a| (grid.stride(a), grid.spacing(a))).collect(),
            coords,
            dt_max: f64::INFINITY,
            wide: avx2_available(),
        };

        let row_len = qn * width;
        let mut rows = vec![0.0; n_controls * row_len];
        let mut sigma = vec![0.0; n * d];
        let mut max_rate = 0.0_f64;
        for node in 0..nodes {
            let x = scheme.coords[node * n..(node + 1) * n].to_vec();
            for k in 0..n_controls {
                let u = spec.controls().point(k).to_vec();
                let out = &mut rows[k * row_len..(k + 1) * row_len];
                let rate = scheme.rows_for(node, &x, &u, out, &mut sigma, affine)?;
                max_rate = max_rate.max(rate);
                if let Some(s) = scheme.nonlinear_sigma.as_mut() {
                    let off = (node * n_controls + k) * n * d;
                    s[off..off + n * d].copy_from_slice(&sigma);
                }
            }
            scheme.pack_node(&rows);
        }
        scheme.node_start.push(scheme.cache.len());
        if !max_rate.is_finite() {
            return Err(Error::Numerical("coefficients overflow on the grid".into()));
        }
        scheme.dt_max = if max_rate > 0.0 {
            CFL_SAFETY / max_rate
        } else {
            f64::INFINITY
        };
        Ok(scheme)
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Largest admissible explicit time step.
    pub fn dt_max(&self) -> f64 {
        self.dt_max
    }

    /// Appends one node's rows (`rows[k][q][j]`) to the cache, dropping rows
    /// that vanish for every control and candidate. Controls are packed in
    /// groups of [`LANES`]; each group holds its shared rows, then each
    /// candidate's remaining rows, `LANES` coefficients per row.
    fn pack_node(&mut self, rows: &[f64]) {
        let (w, qn, kn) = (self.width, self.qs.len(), self.n_controls);
        let at = |k: usize, q: usize, j: usize| if k < kn { rows[(k * qn + q) * w + j] } else { 0.0 };
        let nonzero = |j: usize| (0..kn).any(|k| (0..qn).any(|q| at(k, q, j) != 0.0));
        let common: Vec<usize> = (0..w).filter(|&j| self.shared[j] && nonzero(j)).collect();
        let dep: Vec<usize> = (0..w).filter(|&j| !self.shared[j] && nonzero(j)).collect();
        self.node_start.push(self.cache.len());
        self.node_rows.push((self.row_js.len(), common.len(), dep.len()));
        for group in (0..self.lanes).step_by(LANES) {
            for &j in &common {
                self.cache.extend((group..group + LANES).map(|k| at(k, 0, j)));
            }
            for q in 0..qn {
                for &j in &dep {
                    self.cache.extend((group..group + LANES).map(|k| at(k, q, j)));
                }
            }
        }
        self.row_js.extend(common);
        self.row_js.extend(dep);
    }

    fn offsets(&self) -> Offsets {
        let n = self.n;
        let p = self.pairs.len();
        Offsets {
            fwd: n,
            bwd: 2 * n,
            splus: 3 * n,
            sminus: 3 * n + p,
            v: 3 * n + 2 * p,
            one: 3 * n + 2 * p + 1,
        }
    }

    fn interior_in(&self, node: usize, a: usize) -> bool {
        self.neighbours[node * self.n + a] == HAS_LO | HAS_HI
    }

    /// Coefficient rows (one per candidate, layout matching the stencil) at
    /// `(x, u)`. Returns the node's stability rate for the CFL bound.
    fn rows_for(
        &self,
        node: usize,
        x: &[f64],
        u: &[f64],
        rows: &mut [f64],
        sigma: &mut [f64],
        affine: bool,
    ) -> Result<f64> {
        let spec = &self.spec;
        let (n, d) = (self.n, spec.d());
        let off = self.offsets();
        let mut slots = spec.slots(x, u, 0.0, &vec![0.0; d]);
        let mut b = vec![0.0; n];
        spec.eval_drift(&slots, &mut b)?;
        spec.eval_sigma(&slots, sigma)?;
        let mut h = vec![0.0; d * d * n];
        if !spec.h_is_zero() {
            spec.eval_h(&slots, &mut h)?;
        }

        // Affine parts: f = f0 + fy·y + Σ fz_k z_k, likewise for g_ij.
        let y_slot = n + spec.m();
        let mut f0 = 0.0;
        let fy;
        let mut fz = vec![0.0; d];
        let mut g0 = vec![0.0; d * d];
        let mut gy = vec![0.0; d * d];
        let mut gz = vec![0.0; d * d * d];
        let mut tmp = vec![0.0; d * d];
        let g_zero = spec.g_is_zero();
        if affine {
            f0 = spec.eval_f(&slots)?;
            if !g_zero {
                spec.eval_g(&slots, &mut g0)?;
            }
            slots[y_slot] = 1.0;
            fy = spec.eval_f(&slots)? - f0;
            if !g_zero {
                spec.eval_g(&slots, &mut tmp)?;
                for (o, (t, c)) in gy.iter_mut().zip(tmp.iter().zip(&g0)) {
                    *o = t - c;
                }
            }
            slots[y_slot] = 0.0;
            for k in 0..d {
                slots[y_slot + 1 + k] = 1.0;
                fz[k] = spec.eval_f(&slots)? - f0;
                if !g_zero {
                    spec.eval_g(&slots, &mut tmp)?;
                    for ij in 0..d * d {
                        gz[ij * d + k] = tmp[ij] - g0[ij];
                    }
                }
                slots[y_slot + 1 + k] = 0.0;
            }
        } else {
            // Bound on |∂f/∂y| and |∂g/∂y| from a symmetric difference at z = 0.
            slots[y_slot] = 1.0;
            let fp = spec.eval_f(&slots)?;
            spec.eval_g(&slots, &mut g0)?;
            slots[y_slot] = -1.0;
            let fm = spec.eval_f(&slots)?;
            spec.eval_g(&slots, &mut tmp)?;
            fy = 0.5 * (fp - fm);
            for (o, (p, m)) in gy.iter_mut().zip(g0.iter().zip(&tmp)) {
                *o = 0.5 * (p - m);
            }
            g0.fill(0.0);
        }

        let hs: Vec<f64> = (0..n).map(|a| self.grid.spacing(a)).collect();
        let sig = DMatrix::from_row_slice(n, d, sigma);
        let ss_t = &sig * sig.transpose();
        let diffusion_rate: f64 =
            (0..n).map(|a| ss_t[(a, a)].abs() / (hs[a] * hs[a])).sum::<f64>() * spec.gamma().sigma_hi2() * n as f64;
        let cross_here = self
            .pairs
            .iter()
            .any(|&(a, c)| self.interior_in(node, a) && self.interior_in(node, c));

        let mut rate = 0.0_f64;
        let w = self.width;
        for (qi, q) in self.qs.iter().enumerate() {
            let qm = DMatrix::from_row_slice(d, d, q);
            let dm = &sig * &qm * sig.transpose();
            let row = &mut rows[qi * w..(qi + 1) * w];
            let mut r = fy;
            let mut s = f0;
            let mut zdrift = fz.clone();
            for ij in 0..d * d {
                let qij = q[ij];
                if qij == 0.0 {
                    continue;
                }
                if affine {
                    r += qij * gy[ij];
                    s += qij * g0[ij];
                    for k in 0..d {
                        zdrift[k] += qij * gz[ij * d + k];
                    }
                } else {
                    r += qij.abs() * gy[ij].abs();
                }
            }
            if !affine {
                r = r.abs();
            }
            let mut drift_rate = 0.0;
            for a in 0..n {
                let mut beta = b[a];
                for ij in 0..d * d {
                    beta += q[ij] * h[ij * n + a];
                }
                for k in 0..d {
                    beta += sigma[a * d + k] * zdrift[k];
                }
                row[a] = 0.5 * dm[(a, a)];
                row[off.fwd + a] = beta.max(0.0);
                row[off.bwd + a] = beta.min(0.0);
                drift_rate += beta.abs() / hs[a];
            }
            for (p, &(a, c)) in self.pairs.iter().enumerate() {
                let dac = 0.5 * (dm[(a, c)] + dm[(c, a)]);
                row[off.splus + p] = dac.max(0.0);
                row[off.sminus + p] = dac.min(0.0);
            }
            row[off.v] = if affine { r } else { 0.0 };
            row[off.one] = s;
            if cross_here {
                for a in 0..n {
                    let diag = 0.5 * dm[(a, a)] / (hs[a] * hs[a]);
                    let off_diag: f64 = (0..n)
                        .filter(|&c| c != a)
                        .map(|c| dm[(a, c)].abs() / (2.0 * hs[a] * hs[c]))
                        .sum();
                    if diag - off_diag < -1e-12 * diag.abs().max(f64::MIN_POSITIVE) {
                        return Err(Error::NotDiagonallyDominant { node });
                    }
                }
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
            rate = rate.max(drift_rate + diffusion_rate + r.abs());
        }
        Ok(rate)
    }

    fn scratch(&self) -> Scratch {
        let d = self.spec.d();
        Scratch {
            stencil: vec![0.0; self.width],
            gathered: vec![0.0; self.width],
            acc: vec![0.0; self.qs.len() * self.lanes],
            slots: vec![0.0; self.spec.slot_count()],
            z: vec![0.0; d],
            g: vec![0.0; d * d],
        }
    }

    /// Local difference quotients of `values` at `node`, in row layout.
    fn stencil(&self, node: usize, values: &[f64], s: &mut [f64]) {
        let n = self.n;
        let off = self.offsets();
        let v0 = values[node];
        for (a, &(st, h)) in self.steps.iter().enumerate() {
            let bits = self.neighbours[node * n + a];
            let up = (bits & HAS_HI != 0).then(|| values[node + st]);
            let dn = (bits & HAS_LO != 0).then(|| values[node - st]);
            s[off.fwd + a] = up.map_or(0.0, |vu| (vu - v0) / h);
            s[off.bwd + a] = dn.map_or(0.0, |vd| (v0 - vd) / h);
            s[a] = match (up, dn) {
                (Some(vu), Some(vd)) => (vu - 2.0 * v0 + vd) / (h * h),
                _ => 0.0,
            };
        }
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            if self.interior_in(node, a) && self.interior_in(node, b) {
                let ((sa, ha), (sb, hb)) = (self.steps[a], self.steps[b]);
                let hh = 2.0 * ha * hb;
                let base = 2.0 * v0 - values[node + sa] - values[node - sa] - values[node + sb] - values[node - sb];
                s[off.splus + p] = (base + values[node + sa + sb] + values[node - sa - sb]) / hh;
                s[off.sminus + p] = -(base + values[node + sa - sb] + values[node - sa + sb]) / hh;
            } else {
                s[off.splus + p] = 0.0;
                s[off.sminus + p] = 0.0;
            }
        }
        s[off.v] = v0;
        s[off.one] = 1.0;
    }

    /// `f + Σ Q_ij g_ij` at `(x, u_k, v0, z)` for the non-affine path, added
    /// to every candidate's accumulator.
    fn add_nonlinear(
        &self,
        node: usize,
        u: &[f64],
        sigma: &[f64],
        scratch: &mut Scratch,
        add: &mut dyn FnMut(usize, f64),
    ) -> Result<()> {
        let n = self.n;
        let d = self.spec.d();
        let off = self.offsets();
        let s = &scratch.stencil;
        for kk in 0..d {
            scratch.z[kk] = (0..n)
                .map(|a| {
                    let bits = self.neighbours[node * n + a];
                    let p = match (bits & HAS_LO != 0, bits & HAS_HI != 0) {
                        (true, true) => 0.5 * (s[off.fwd + a] + s[off.bwd + a]),
                        (false, true) => s[off.fwd + a],
                        (true, false) => s[off.bwd + a],
                        (false, false) => 0.0,
                    };
                    p * sigma[a * d + kk]
                })
                .sum();
        }
        let x = &self.coords[node * n..(node + 1) * n];
        self.spec.fill_slots(&mut scratch.slots, x, u, s[off.v], &scratch.z);
        let f = self.spec.eval_f(&scratch.slots)?;
        self.spec.eval_g(&scratch.slots, &mut scratch.g)?;
        for (qi, q) in self.qs.iter().enumerate() {
            let mut extra = f;
            for (qij, gij) in q.iter().zip(&scratch.g) {
                extra += qij * gij;
            }
            add(qi, extra);
        }
        Ok(())
    }

    /// Minimum over lattice controls of the maximum over candidates of the
    /// discrete integrand at `node`, with its lattice index (lowest on ties).
    fn node_minmax(&self, node: usize, values: &[f64], scratch: &mut Scratch) -> Result<(f64, usize)> {
        self.stencil(node, values, &mut scratch.stencil);
        let (kn, qn, lanes) = (self.n_controls, self.qs.len(), self.lanes);
        let (start, nc, nd) = self.node_rows[node];
        let block = &self.cache[self.node_start[node]..self.node_start[node + 1]];
        let common = &self.row_js[start..start + nc];
        let dep = &self.row_js[start + nc..start + nc + nd];
        let fuse = self.nonlinear_sigma.is_none();
        for (g, &j) in scratch.gathered.iter_mut().zip(common.iter().chain(dep)) {
            *g = scratch.stencil[j];
        }
        let s = &scratch.gathered[..nc + nd];
        if self.wide {
            // SAFETY: `wide` is only set when the CPU reports AVX2.
            #[cfg(target_arch = "x86_64")]
            unsafe {
                contract_avx2(block, nc, nd, qn, s, &mut scratch.acc, lanes, fuse)
            };
        } else {
            contract(block, nc, nd, qn, s, &mut scratch.acc, lanes, fuse);
        }
        if let Some(sig) = &self.nonlinear_sigma {
            let nd = self.n * self.spec.d();
            let mut acc = std::mem::take(&mut scratch.acc);
            for k in 0..kn {
                let off = (node * kn + k) * nd;
                let u = self.spec.controls().point(k);
                self.add_nonlinear(node, u, &sig[off..off + nd], scratch, &mut |q, e| {
                    acc[q * lanes + k] += e
                })?;
            }
            for k in 0..kn {
                for q in 1..qn {
                    let v = acc[q * lanes + k];
                    if v > acc[k] {
                        acc[k] = v;
                    }
                }
            }
            scratch.acc = acc;
        }
        let (best, arg) = first_min(&scratch.acc[..kn]);
        if !best.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand at node {node}")));
        }
        Ok((best, arg))
    }

    fn check_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} grid nodes",
                values.len(),
                self.grid.len()
            )));
        }
        Ok(())
    }

    fn for_each_node(
        &self,
        values: &[f64],
        out: &mut [f64],
        policy: &mut [usize],
        apply: &(dyn Fn(usize, f64) -> f64 + Sync),
    ) -> Result<()> {
        let work = self.cache.len();
        let run = |start: usize, out: &mut [f64], policy: &mut [usize]| -> Result<()> {
            let mut scratch = self.scratch();
            for (i, (o, p)) in out.iter_mut().zip(policy.iter_mut()).enumerate() {
                let node = start + i;
                let (val, k) = self.node_minmax(node, values, &mut scratch)?;
                *o = apply(node, val);
                *p = k;
            }
            Ok(())
        };
        if work >= PARALLEL_WORK && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(CHUNK)
                .zip(policy.par_chunks_mut(CHUNK))
                .enumerate()
                .try_for_each(|(c, (o, p))| run(c * CHUNK, o, p))
        } else {
            run(0, out, policy)
        }
    }

    /// Per-node minimum integrand and its lattice index.
    pub fn integrand(&self, values: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        self.check_values(values)?;
        let mut out = vec![0.0; values.len()];
        let mut policy = vec![0; values.len()];
        self.for_each_node(values, &mut out, &mut policy, &|_, v| v)?;
        Ok((out, policy))
    }

    /// Discrete integrand at `node` for a fixed control point `u`, taking the
    /// maximum over candidates. Uses exactly the arithmetic of the stepper, so
    /// a lattice point reproduces the per-node value of [`Scheme::integrand`].
    pub fn integrand_at_control(&self, node: usize, values: &[f64], u: &[f64]) -> Result<f64> {
        self.check_values(values)?;
        if u.len() != self.spec.m() {
            return Err(Error::DimensionMismatch(format!(
                "control has {} components, expected {}",
                u.len(),
                self.spec.m()
            )));
        }
        let n = self.n;
        let d = self.spec.d();
        let affine = self.nonlinear_sigma.is_none();
        let x = self.coords[node * n..(node + 1) * n].to_vec();
        let mut rows = vec![0.0; self.qs.len() * self.width];
        let mut sigma = vec![0.0; n * d];
        self.rows_for(node, &x, u, &mut rows, &mut sigma, affine)?;
        let mut scratch = self.scratch();
        self.stencil(node, values, &mut scratch.stencil);
        let w = self.width;
        let st = &scratch.stencil;
        let mut shared = 0.0;
        for j in (0..w).filter(|&j| self.shared[j]) {
            shared += rows[j] * st[j];
        }
        let mut acc: Vec<f64> = (0..self.qs.len())
            .map(|q| {
                let mut a = shared;
                for j in (0..w).filter(|&j| !self.shared[j]) {
                    a += rows[q * w + j] * st[j];
                }
                a
            })
            .collect();
        if !affine {
            self.add_nonlinear(node, u, &sigma, &mut scratch, &mut |q, e| acc[q] += e)?;
        }
        let mut worst = acc[0];
        for &v in &acc[1..] {
            if v > worst {
                worst = v;
            }
        }
        if !worst.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand at node {node}")));
        }
        Ok(worst)
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt <= self.dt_max * (1.0 + 1e-12)) {
            return Err(Error::Cfl {
                dt,
                admissible: self.dt_max,
            });
        }
        Ok(())
    }

    /// One explicit step `next = prev + dt·integrand(prev)`, writing the
    /// per-node argmin into `policy`.
    pub fn step_into(&self, prev: &[f64], next: &mut [f64], policy: &mut [usize], dt: f64) -> Result<()> {
        self.check_dt(dt)?;
        self.check_values(prev)?;
        self.for_each_node(prev, next, policy, &|node, val| prev[node] + dt * val)?;
        if let Some(k) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("value overflow at node {k}")));
        }
        Ok(())
    }

    pub fn step(&self, field: &ValueField, dt: f64) -> Result<ValueField> {
        self.check_grid(field)?;
        let mut next = vec![0.0; field.values().len()];
        let mut policy = vec![0; next.len()];
        self.step_into(field.values(), &mut next, &mut policy, dt)?;
        Ok(ValueField::from_parts(self.grid.clone(), next, Some(policy)))
    }

    /// `steps` explicit steps of size `dt` starting from `values`.
    pub fn evolve(&self, values: &[f64], dt: f64, steps: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let mut cur = values.to_vec();
        let mut next = vec![0.0; cur.len()];
        let mut policy = vec![0; cur.len()];
        for _ in 0..steps {
            self.step_into(&cur, &mut next, &mut policy, dt)?;
            std::mem::swap(&mut cur, &mut next);
        }
        if steps == 0 {
            policy = self.integrand(values)?.1;
        }
        Ok((cur, policy))
    }

    pub(crate) fn check_grid(&self, field: &ValueField) -> Result<()> {
        if field.grid() != &self.grid {
            return Err(Error::DimensionMismatch(
                "field grid differs from the scheme grid".into(),
            ));
        }
        Ok(())
    }
}

/// One explicit step of the monotone scheme; see [`Scheme`].
pub fn parabolic_step(spec: &ProblemSpec, field: &ValueField, dt: f64) -> Result<ValueField> {
    Scheme::new(spec, field.grid())?.step(field, dt)
}
