use crate::error::{Error, Result};

/// Fraction of each axis excluded on both sides from the trusted subgrid.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Largest supported state dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.count - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.upper
        } else {
            self.lower + i as f64 * self.spacing()
        }
    }
}

/// Uniform tensor grid over a box, nodes in row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    margin: f64,
}

/// Uniform grid with `counts[a]` nodes on `bounds[a]`.
pub fn build_grid(bounds: &[(f64, f64)], counts: &[usize]) -> Result<Grid> {
    Grid::new(bounds, counts)
}

impl Grid {
    pub fn new(bounds: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        if bounds.is_empty() || bounds.len() != counts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} bounds for {} counts",
                bounds.len(),
                counts.len()
            )));
        }
        if bounds.len() > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "grids of dimension {} are not supported (max {MAX_DIM})",
                bounds.len()
            )));
        }
        let mut axes = Vec::with_capacity(bounds.len());
        for (a, (&(lower, upper), &count)) in bounds.iter().zip(counts).enumerate() {
            if !(lower.is_finite() && upper.is_finite()) || upper <= lower {
                return Err(Error::InvalidInput(format!(
                    "axis {}: extent [{lower}, {upper}] is not positive",
                    a + 1
                )));
            }
            if count < 3 {
                return Err(Error::InvalidInput(format!(
                    "axis {}: need at least 3 points, got {count}",
                    a + 1
                )));
            }
            axes.push(Axis { lower, upper, count });
        }
        let mut strides = vec![1; axes.len()];
        for a in (0..axes.len() - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].count;
        }
        Ok(Self {
            axes,
            strides,
            margin: DEFAULT_MARGIN,
        })
    }

    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&margin) {
            return Err(Error::InvalidInput(format!(
                "margin must lie in [0, 0.5), got {margin}"
            )));
        }
        self.margin = margin;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Per-axis index of `node`.
    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.strides[axis]) % self.axes[axis].count
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| self.axis_index(node, a)).collect()
    }

    pub fn node_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.axes[a].coord(self.axis_index(node, a));
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.coords_into(node, &mut out);
        out
    }

    /// `(has lower neighbour, has upper neighbour)` along `axis`.
    pub fn neighbours(&self, node: usize, axis: usize) -> (bool, bool) {
        let i = self.axis_index(node, axis);
        (i > 0, i + 1 < self.axes[axis].count)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        (0..self.dim()).any(|a| {
            let (lo, hi) = self.neighbours(node, a);
            !(lo && hi)
        })
    }

    /// True when `node` lies in the trusted subgrid (the central
    /// `1 − 2·margin` fraction of every axis).
    pub fn is_interior(&self, node: usize) -> bool {
        self.axes.iter().enumerate().all(|(a, ax)| {
            let c = ax.coord(self.axis_index(node, a));
            let width = ax.upper - ax.lower;
            let eps = 1e-9 * ax.spacing();
            c >= ax.lower + self.margin * width - eps && c <= ax.upper - self.margin * width + eps
        })
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_interior(k)).collect()
    }

    /// Node closest to `x` (coordinates clamped to the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for (a, ax) in self.axes.iter().enumerate() {
            let t = ((x[a] - ax.lower) / ax.spacing()).round();
            let i = if t.is_nan() {
                0.0
            } else {
                t.clamp(0.0, (ax.count - 1) as f64)
            };
            node += i as usize * self.strides[a];
        }
        node
    }

    /// Bounds of the box as `(lower, upper)` pairs.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.axes.iter().map(|a| (a.lower, a.upper)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_and_counts() {
        let g = build_grid(&[(-5.0, 5.0)], &[201]).unwrap();
        assert!((g.spacing(0) - 0.05).abs() < 1e-15);
        let g2 = build_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[11, 11]).unwrap();
        assert_eq!(g2.len(), 121);
        assert!(build_grid(&[(0.0, 0.0)], &[11]).is_err());
        assert!(build_grid(&[(0.0, 1.0)], &[2]).is_err());
    }

    #[test]
    fn indexing_round_trip() {
        let g = build_grid(&[(0.0, 1.0), (0.0, 2.0), (-1.0, 1.0)], &[3, 4, 5]).unwrap();
        for node in 0..g.len() {
            assert_eq!(g.node_index(&g.multi_index(node)), node);
        }
        assert_eq!(g.stride(2), 1);
        assert_eq!(g.stride(0), 20);
        assert_eq!(g.coords(g.len() - 1), vec![1.0, 2.0, 1.0]);
    }

    #[test]
    fn interior_is_central_sixty_percent() {
        let g = build_grid(&[(-5.0, 5.0)], &[401]).unwrap();
        let inner = g.interior_nodes();
        assert_eq!(inner.len(), 241);
        assert!((g.coords(inner[0])[0] + 3.0).abs() < 1e-12);
        assert!((g.coords(*inner.last().unwrap())[0] - 3.0).abs() < 1e-12);
        assert_eq!(g.nearest_node(&[0.01]), 200);
        assert_eq!(g.nearest_node(&[99.0]), 400);
    }
}
