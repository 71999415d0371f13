use std::fmt::Write as _;

use super::grid::Grid;
use crate::error::{Error, Result};
use crate::problem::ControlSet;

/// Grid function with an optional control-lattice index per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Grid,
    values: Vec<f64>,
    policy: Option<Vec<usize>>,
}

impl ValueField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} grid nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("value at node {k} is not finite")));
        }
        Ok(Self {
            grid,
            values,
            policy: None,
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
            policy: None,
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|k| f(&grid.coords(k))).collect();
        Self::new(grid, values)
    }

    pub fn with_policy(mut self, policy: Vec<usize>) -> Result<Self> {
        if policy.len() != self.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} policy entries for {} grid nodes",
                policy.len(),
                self.grid.len()
            )));
        }
        self.policy = Some(policy);
        Ok(self)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn policy(&self) -> Option<&[usize]> {
        self.policy.as_deref()
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub(crate) fn from_parts(grid: Grid, values: Vec<f64>, policy: Option<Vec<usize>>) -> Self {
        Self { grid, values, policy }
    }

    /// Sup-norm distance to `other` over the trusted subgrid.
    pub fn interior_distance(&self, other: &ValueField) -> f64 {
        self.grid
            .interior_nodes()
            .into_iter()
            .map(|k| (self.values[k] - other.values[k]).abs())
            .fold(0.0, f64::max)
    }

    /// `max |V(x)| / (1 + |x|²)` over the trusted subgrid.
    pub fn growth_constant(&self) -> f64 {
        self.grid
            .interior_nodes()
            .into_iter()
            .map(|k| {
                let r2: f64 = self.grid.coords(k).iter().map(|c| c * c).sum();
                self.values[k].abs() / (1.0 + r2)
            })
            .fold(0.0, f64::max)
    }

    /// CSV with header `x1,...,xn,value,policy_u1,...,policy_um`, floats
    /// printed with 17 significant digits. Policy cells are empty when the
    /// field carries no policy.
    pub fn to_csv(&self, controls: &ControlSet) -> String {
        let n = self.grid.dim();
        let m = controls.dim();
        let mut out = String::new();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        header.extend((1..=m).map(|i| format!("policy_u{i}")));
        out.push_str(&header.join(","));
        out.push('\n');
        let mut coords = vec![0.0; n];
        for node in 0..self.grid.len() {
            self.grid.coords_into(node, &mut coords);
            for c in &coords {
                let _ = write!(out, "{},", fmt17(*c));
            }
            out.push_str(&fmt17(self.values[node]));
            match &self.policy {
                Some(p) => {
                    for u in controls.point(p[node]) {
                        let _ = write!(out, ",{}", fmt17(*u));
                    }
                }
                None => out.push_str(&",".repeat(m)),
            }
            out.push('\n');
        }
        out
    }

    /// Parses the [`ValueField::to_csv`] format. Policy values are mapped to
    /// the nearest point of `controls`.
    pub fn from_csv(text: &str, controls: &ControlSet) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let n = header.iter().take_while(|h| h.starts_with('x')).count();
        let m = controls.dim();
        let expected: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain(std::iter::once("value".to_string()))
            .chain((1..=m).map(|i| format!("policy_u{i}")))
            .collect();
        if n == 0 || header != expected {
            return Err(Error::Format(format!(
                "unexpected header `{}`, expected `{}`",
                header.join(","),
                expected.join(",")
            )));
        }

        let mut coords: Vec<Vec<f64>> = Vec::new();
        let mut values = Vec::new();
        let mut policy_pts: Vec<Option<Vec<f64>>> = Vec::new();
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != n + 1 + m {
                return Err(Error::Format(format!(
                    "row {}: expected {} cells, got {}",
                    row + 2,
                    n + 1 + m,
                    cells.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: bad number `{s}`", row + 2)))
            };
            coords.push(cells[..n].iter().map(|c| num(c)).collect::<Result<_>>()?);
            values.push(num(cells[n])?);
            let pol = &cells[n + 1..];
            if pol.iter().all(|c| c.is_empty()) {
                policy_pts.push(None);
            } else {
                policy_pts.push(Some(pol.iter().map(|c| num(c)).collect::<Result<_>>()?));
            }
        }
        if values.is_empty() {
            return Err(Error::Format("CSV has no data rows".into()));
        }

        let mut bounds = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for a in 0..n {
            let mut axis: Vec<f64> = coords.iter().map(|c| c[a]).collect();
            axis.sort_by(f64::total_cmp);
            axis.dedup();
            bounds.push((axis[0], *axis.last().unwrap()));
            counts.push(axis.len());
        }
        let grid = Grid::new(&bounds, &counts)?;
        if grid.len() != values.len() {
            return Err(Error::Format(format!(
                "{} rows do not form a {:?} tensor grid",
                values.len(),
                counts
            )));
        }
        for (node, c) in coords.iter().enumerate() {
            let expect = grid.coords(node);
            let scale = grid.axes().iter().map(|a| a.spacing()).fold(f64::INFINITY, f64::min);
            if c.iter().zip(&expect).any(|(a, b)| (a - b).abs() > 1e-9 * scale) {
                return Err(Error::Format(format!(
                    "row {} is not in row-major grid order",
                    node + 2
                )));
            }
        }
        let policy = if policy_pts.iter().all(Option::is_none) {
            None
        } else {
            Some(
                policy_pts
                    .iter()
                    .enumerate()
                    .map(|(row, p)| {
                        p.as_ref()
                            .map(|u| controls.nearest_index(u))
                            .ok_or_else(|| Error::Format(format!("row {}: missing policy", row + 2)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let field = ValueField::new(grid, values)?;
        match policy {
            Some(p) => field.with_policy(p),
            None => Ok(field),
        }
    }
}

/// 17-significant-digit scientific notation, lossless for `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjbi::grid::build_grid;

    #[test]
    fn csv_round_trip_is_exact() {
        let grid = build_grid(&[(-1.0, 1.0), (0.0, 3.0)], &[5, 7]).unwrap();
        let controls = ControlSet::interval(0.0, 1.0).unwrap();
        let field = ValueField::from_fn(grid.clone(), |x| (x[0] * 1.1).sin() + x[1] / 3.0)
            .unwrap()
            .with_policy((0..grid.len()).map(|k| k % 33).collect())
            .unwrap();
        let text = field.to_csv(&controls);
        assert!(text.starts_with("x1,x2,value,policy_u1\n"));
        let back = ValueField::from_csv(&text, &controls).unwrap();
        assert_eq!(back, field);
    }

    #[test]
    fn csv_without_policy() {
        let grid = build_grid(&[(0.0, 1.0)], &[4]).unwrap();
        let controls = ControlSet::interval(0.0, 1.0).unwrap();
        let field = ValueField::from_fn(grid, |x| x[0] * x[0]).unwrap();
        let back = ValueField::from_csv(&field.to_csv(&controls), &controls).unwrap();
        assert_eq!(back.policy(), None);
        assert_eq!(back.values(), field.values());
    }

    #[test]
    fn csv_rejects_garbage() {
        let controls = ControlSet::interval(0.0, 1.0).unwrap();
        assert!(ValueField::from_csv("", &controls).is_err());
        assert!(ValueField::from_csv("a,b\n1,2\n", &controls).is_err());
        assert!(ValueField::from_csv("x1,value,policy_u1\n0,1,\n1,zz,\n2,3,\n", &controls).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let grid = build_grid(&[(0.0, 1.0)], &[3]).unwrap();
        assert!(ValueField::new(grid, vec![0.0, f64::NAN, 1.0]).is_err());
    }
}
