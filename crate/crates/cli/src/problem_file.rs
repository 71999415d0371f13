//! Sectioned plain-text problem files.
//!
//! ```text
//! # comments start with '#'
//! [dimensions]
//! n = 1
//! d = 1
//! m = 1
//! [dynamics]
//! b_1 = -x1 + u1
//! sigma_11 = x1 + u1
//! h_11_1 = 0
//! [cost]
//! psi = x1 - u1
//! lambda = 1
//! [uncertainty]
//! sigma_lo2 = 0.25
//! sigma_hi2 = 1
//! [control]
//! lower = 0
//! upper = 1
//! points = 33
//! [solver]
//! bounds = -5 5
//! counts = 401
//! tol = 1e-6
//! [mc]
//! dt = 1e-3
//! t_cut = 15
//! x0 = -2; 0; 3
//! control = 1
//! ```
//!
//! Indices are one-based. Multi-index keys may be written with or without
//! separators (`sigma_12` or `sigma_1_2`); separators are required once an
//! index exceeds 9. Vectors are separated by spaces or commas, matrix rows
//! and lists of points by `;`.

use std::collections::BTreeMap;
use std::path::Path;

use hjbi_core::problem::variable_names;
use hjbi_core::{parse_expression, ControlSet, ProblemSpec, UncertaintySet};
use nalgebra::DMatrix;

/// Name under which the built-in example problem is loaded.
pub const BUILTIN_EXAMPLE: &str = "example57";

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing `{key}` in [{section}]")]
    Missing { key: String, section: &'static str },

    #[error("invalid problem: {0}")]
    Invalid(#[from] hjbi_core::Error),
}

fn parse_err(line: usize, message: impl Into<String>) -> LoadError {
    LoadError::Parse {
        line,
        message: message.into(),
    }
}

/// Grid and stopping settings of the `[solver]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub bounds: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
    pub margin: f64,
    pub tol: f64,
    pub window: f64,
    pub max_horizon: Option<f64>,
}

/// Monte Carlo settings of the `[mc]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct McSettings {
    pub dt: f64,
    /// Truncation time of the discounted cost; `15/λ` when absent.
    pub t_cut: Option<f64>,
    /// Horizon of `simulate`.
    pub horizon: f64,
    /// Paths of `cost`.
    pub n_paths: usize,
    /// Paths of `simulate`.
    pub sim_paths: usize,
    pub seed: u64,
    pub x0: Vec<Vec<f64>>,
    /// Constant control applied by `simulate` and `cost`.
    pub control: Option<Vec<f64>>,
}

/// A validated problem together with the settings stored next to it.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub spec: ProblemSpec,
    pub solver: SolverSettings,
    pub mc: McSettings,
    /// Discount rate of the built-in example, which has closed-form checks.
    pub builtin_lambda: Option<f64>,
}

/// Loads `source`, which is either a file path or [`BUILTIN_EXAMPLE`].
/// `lambda` only applies to the built-in example.
pub fn load_problem(source: &str, lambda: Option<f64>) -> Result<ProblemFile, LoadError> {
    if source == BUILTIN_EXAMPLE {
        return example57(lambda.unwrap_or(1.0));
    }
    if lambda.is_some() {
        return Err(LoadError::Invalid(hjbi_core::Error::InvalidInput(
            "--lambda applies only to the built-in example; set lambda in the [cost] section".into(),
        )));
    }
    let text = std::fs::read_to_string(Path::new(source)).map_err(|source_err| LoadError::Io {
        path: source.to_string(),
        source: source_err,
    })?;
    parse_problem(&text)
}

/// The built-in example with its default grid and simulation settings.
pub fn example57(lambda: f64) -> Result<ProblemFile, LoadError> {
    Ok(ProblemFile {
        spec: ProblemSpec::example57(lambda)?,
        solver: SolverSettings {
            bounds: vec![(-5.0, 5.0)],
            counts: vec![401],
            margin: hjbi_core::hjbi::DEFAULT_MARGIN,
            tol: 1e-6,
            window: 1.0,
            max_horizon: None,
        },
        mc: McSettings {
            dt: 1e-3,
            t_cut: Some(15.0),
            horizon: 1.0,
            n_paths: 100_000,
            sim_paths: 100,
            seed: 0,
            x0: vec![vec![-2.0], vec![0.0], vec![3.0]],
            control: Some(vec![1.0]),
        },
        builtin_lambda: Some(lambda),
    })
}

const SECTIONS: [&str; 7] = [
    "dimensions",
    "dynamics",
    "cost",
    "uncertainty",
    "control",
    "solver",
    "mc",
];

struct Entry {
    line: usize,
    value: String,
}

/// Parses the text of a problem file.
pub fn parse_problem(text: &str) -> Result<ProblemFile, LoadError> {
    let mut sections: BTreeMap<&str, BTreeMap<String, Entry>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "section header must end with ']'"))?
                .trim();
            let known = SECTIONS
                .iter()
                .find(|s| **s == name)
                .ok_or_else(|| parse_err(line, format!("unknown section [{name}]")))?;
            if sections.contains_key(known) {
                return Err(parse_err(line, format!("section [{name}] appears twice")));
            }
            sections.insert(known, BTreeMap::new());
            current = Some(known);
            continue;
        }
        let section = current.ok_or_else(|| parse_err(line, "entry before the first section header"))?;
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, "expected `key = value`"))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(parse_err(line, "empty key or value"));
        }
        let entries = sections.get_mut(section).expect("section was inserted");
        if let Some(prev) = entries.get(&key) {
            return Err(parse_err(line, format!("`{key}` already set on line {}", prev.line)));
        }
        entries.insert(key, Entry { line, value });
    }
    let empty = BTreeMap::new();
    let get = |s: &str| sections.get(s).unwrap_or(&empty);

    let dims = Section::new(get("dimensions"), "dimensions");
    dims.only(&["n", "d", "m"])?;
    let n: usize = dims.required("n")?;
    let d: usize = dims.required("d")?;
    let m: usize = dims.optional("m")?.unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(parse_err(
            dims.line_of("n").max(dims.line_of("d")),
            "n and d must be positive",
        ));
    }
    let names = variable_names(n, m, d);
    let x_u = &names[..n + m];

    let mut builder = ProblemSpec::builder(n, d, m);

    let dynamics = Section::new(get("dynamics"), "dynamics");
    for (key, e) in dynamics.entries {
        let expr_check = |vars: &[String]| {
            parse_expression(&e.value, vars).map_err(|err| parse_err(e.line, format!("{key}: {err}")))
        };
        if let Some(rest) = key.strip_prefix("b_") {
            let [i] = indices::<1>(rest, e.line, key)?;
            check_range(i, n, e.line, key)?;
            expr_check(x_u)?;
            builder = builder.drift(i, &e.value);
        } else if let Some(rest) = key.strip_prefix("sigma_") {
            let [i, k] = indices::<2>(rest, e.line, key)?;
            check_range(i, n, e.line, key)?;
            check_range(k, d, e.line, key)?;
            expr_check(x_u)?;
            builder = builder.sigma(i, k, &e.value);
        } else if let Some(rest) = key.strip_prefix("h_") {
            let [i, j, k] = indices::<3>(rest, e.line, key)?;
            check_range(i, d, e.line, key)?;
            check_range(j, d, e.line, key)?;
            check_range(k, n, e.line, key)?;
            expr_check(x_u)?;
            builder = builder.h(i, j, k, &e.value);
        } else {
            return Err(parse_err(e.line, format!("unknown key `{key}` in [dynamics]")));
        }
    }

    let cost = Section::new(get("cost"), "cost");
    let psi = cost.entries.get("psi");
    let lambda_entry = cost.entries.get("lambda");
    let mut explicit_line = None;
    for (key, e) in cost.entries {
        match key.as_str() {
            "psi" | "lambda" => {}
            "f" => {
                parse_expression(&e.value, &names).map_err(|err| parse_err(e.line, format!("f: {err}")))?;
                explicit_line.get_or_insert(e.line);
                builder = builder.f(&e.value);
            }
            _ => {
                let Some(rest) = key.strip_prefix("g_") else {
                    return Err(parse_err(e.line, format!("unknown key `{key}` in [cost]")));
                };
                let [i, j] = indices::<2>(rest, e.line, key)?;
                check_range(i, d, e.line, key)?;
                check_range(j, d, e.line, key)?;
                parse_expression(&e.value, &names).map_err(|err| parse_err(e.line, format!("{key}: {err}")))?;
                explicit_line.get_or_insert(e.line);
                builder = builder.g(i, j, &e.value);
            }
        }
    }
    match (psi, lambda_entry) {
        (Some(p), Some(l)) => {
            if let Some(line) = explicit_line {
                return Err(parse_err(
                    line.max(p.line),
                    "psi/lambda and an explicit f or g are mutually exclusive",
                ));
            }
            parse_expression(&p.value, x_u).map_err(|err| parse_err(p.line, format!("psi: {err}")))?;
            let lambda: f64 = parse_value(&l.value, l.line, "lambda")?;
            builder = builder.discounted(lambda, &p.value);
        }
        (Some(p), None) => return Err(parse_err(p.line, "psi requires lambda")),
        (None, Some(l)) => return Err(parse_err(l.line, "lambda requires psi")),
        (None, None) => {}
    }

    let unc = Section::new(get("uncertainty"), "uncertainty");
    let lo: f64 = unc.required("sigma_lo2")?;
    let hi: f64 = unc.required("sigma_hi2")?;
    let mut candidates = Vec::new();
    for (key, e) in unc.entries {
        match key.as_str() {
            "sigma_lo2" | "sigma_hi2" => {}
            _ if key == "q" || key.starts_with("q_") => candidates.push(parse_matrix(&e.value, d, e.line)?),
            _ => return Err(parse_err(e.line, format!("unknown key `{key}` in [uncertainty]"))),
        }
    }
    builder = builder.gamma(
        UncertaintySet::new(d, lo, hi, candidates)
            .map_err(|err| parse_err(unc.line_of("sigma_hi2"), err.to_string()))?,
    );

    let ctl = Section::new(get("control"), "control");
    ctl.only(&["lower", "upper", "points"])?;
    if m > 0 {
        let lower = ctl.required_vec("lower", m)?;
        let upper = ctl.required_vec("upper", m)?;
        let points: usize = ctl
            .optional("points")?
            .unwrap_or(hjbi_core::problem::DEFAULT_CONTROL_POINTS);
        builder = builder.controls(
            ControlSet::new(lower, upper, points).map_err(|err| parse_err(ctl.line_of("lower"), err.to_string()))?,
        );
    } else {
        if let Some((key, e)) = ctl.entries.iter().next() {
            return Err(parse_err(
                e.line,
                format!("`{key}` given but the problem has no control (m = 0)"),
            ));
        }
        builder = builder.controls(ControlSet::empty());
    }

    let sol = Section::new(get("solver"), "solver");
    sol.only(&["bounds", "counts", "margin", "tol", "mu", "window", "max_horizon"])?;
    if let Some(mu) = sol.optional::<f64>("mu")? {
        builder = builder.mu(mu);
    }
    let bounds = match sol.entries.get("bounds") {
        None => vec![(-5.0, 5.0); n],
        Some(e) => {
            let rows = split_rows(&e.value);
            let rows: Vec<Vec<f64>> = if rows.len() == 1 && n > 1 {
                vec![parse_vec(&rows[0], 2, e.line, "bounds")?; n]
            } else {
                rows.iter()
                    .map(|r| parse_vec(r, 2, e.line, "bounds"))
                    .collect::<Result<_, _>>()?
            };
            if rows.len() != n {
                return Err(parse_err(
                    e.line,
                    format!("bounds: expected {n} rows, got {}", rows.len()),
                ));
            }
            rows.iter().map(|r| (r[0], r[1])).collect()
        }
    };
    let counts = match sol.entries.get("counts") {
        None => vec![101; n],
        Some(e) => {
            let v: Vec<usize> = e
                .value
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| parse_value(s, e.line, "counts"))
                .collect::<Result<_, _>>()?;
            match v.len() {
                1 => vec![v[0]; n],
                k if k == n => v,
                k => return Err(parse_err(e.line, format!("counts: expected 1 or {n} values, got {k}"))),
            }
        }
    };
    let solver = SolverSettings {
        bounds,
        counts,
        margin: sol.optional("margin")?.unwrap_or(hjbi_core::hjbi::DEFAULT_MARGIN),
        tol: sol.optional("tol")?.unwrap_or(1e-6),
        window: sol.optional("window")?.unwrap_or(1.0),
        max_horizon: sol.optional("max_horizon")?,
    };
    if !(solver.tol > 0.0) {
        return Err(parse_err(sol.line_of("tol"), "tol must be positive"));
    }

    let mcs = Section::new(get("mc"), "mc");
    mcs.only(&[
        "dt",
        "t_cut",
        "horizon",
        "n_paths",
        "sim_paths",
        "seed",
        "x0",
        "control",
    ])?;
    let x0 = match mcs.entries.get("x0") {
        None => vec![vec![0.0; n]],
        Some(e) => split_rows(&e.value)
            .iter()
            .map(|r| parse_vec(r, n, e.line, "x0"))
            .collect::<Result<_, _>>()?,
    };
    let control = match mcs.entries.get("control") {
        None if m == 0 => Some(Vec::new()),
        None => None,
        Some(e) => Some(parse_vec(&e.value, m, e.line, "control")?),
    };
    let mc = McSettings {
        dt: mcs.optional("dt")?.unwrap_or(1e-3),
        t_cut: mcs.optional("t_cut")?,
        horizon: mcs.optional("horizon")?.unwrap_or(1.0),
        n_paths: mcs.optional("n_paths")?.unwrap_or(10_000),
        sim_paths: mcs.optional("sim_paths")?.unwrap_or(100),
        seed: mcs.optional("seed")?.unwrap_or(0),
        x0,
        control,
    };

    Ok(ProblemFile {
        spec: builder.build()?,
        solver,
        mc,
        builtin_lambda: None,
    })
}

struct Section<'a> {
    entries: &'a BTreeMap<String, Entry>,
    name: &'static str,
}

impl<'a> Section<'a> {
    fn new(entries: &'a BTreeMap<String, Entry>, name: &'static str) -> Self {
        Self { entries, name }
    }

    fn only(&self, keys: &[&str]) -> Result<(), LoadError> {
        for (key, e) in self.entries {
            if !keys.contains(&key.as_str()) {
                return Err(parse_err(e.line, format!("unknown key `{key}` in [{}]", self.name)));
            }
        }
        Ok(())
    }

    fn missing(&self, key: &str) -> LoadError {
        LoadError::Missing {
            key: key.to_string(),
            section: self.name,
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, LoadError> {
        self.entries
            .get(key)
            .map(|e| parse_value(&e.value, e.line, key))
            .transpose()
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, LoadError> {
        self.optional(key)?.ok_or_else(|| self.missing(key))
    }

    fn required_vec(&self, key: &str, len: usize) -> Result<Vec<f64>, LoadError> {
        let e = self.entries.get(key).ok_or_else(|| self.missing(key))?;
        parse_vec(&e.value, len, e.line, key)
    }
}

fn parse_value<T: std::str::FromStr>(text: &str, line: usize, key: &str) -> Result<T, LoadError> {
    text.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{key}: cannot parse `{}`", text.trim())))
}

fn split_rows(text: &str) -> Vec<String> {
    text.split(';')
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty())
        .collect()
}

fn parse_vec(text: &str, len: usize, line: usize, key: &str) -> Result<Vec<f64>, LoadError> {
    let v: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(s, line, key))
        .collect::<Result<_, _>>()?;
    if v.len() != len {
        return Err(parse_err(
            line,
            format!("{key}: expected {len} values, got {}", v.len()),
        ));
    }
    Ok(v)
}

fn parse_matrix(text: &str, d: usize, line: usize) -> Result<DMatrix<f64>, LoadError> {
    let rows = split_rows(text);
    if rows.len() != d {
        return Err(parse_err(
            line,
            format!("candidate matrix: expected {d} rows, got {}", rows.len()),
        ));
    }
    let mut flat = Vec::with_capacity(d * d);
    for r in &rows {
        flat.extend(parse_vec(r, d, line, "candidate matrix")?);
    }
    Ok(DMatrix::from_row_slice(d, d, &flat))
}

/// Zero-based indices from the one-based suffix of a key.
fn indices<const K: usize>(rest: &str, line: usize, key: &str) -> Result<[usize; K], LoadError> {
    let parts: Vec<&str> = rest.split('_').collect();
    let digits: Vec<String> = if parts.len() == K {
        parts.iter().map(|s| s.to_string()).collect()
    } else {
        let joined: String = parts.concat();
        if joined.chars().count() != K {
            return Err(parse_err(line, format!("`{key}` needs {K} indices")));
        }
        joined.chars().map(String::from).collect()
    };
    let mut out = [0; K];
    for (o, s) in out.iter_mut().zip(&digits) {
        let v: usize = s
            .parse()
            .map_err(|_| parse_err(line, format!("`{key}`: bad index `{s}`")))?;
        if v == 0 {
            return Err(parse_err(line, format!("`{key}`: indices start at 1")));
        }
        *o = v - 1;
    }
    Ok(out)
}

fn check_range(i: usize, limit: usize, line: usize, key: &str) -> Result<(), LoadError> {
    if i >= limit {
        Err(parse_err(line, format!("`{key}`: index {} exceeds {limit}", i + 1)))
    } else {
        Ok(())
    }
}
