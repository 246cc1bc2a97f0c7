//! Quadrature grids on box domains and the unit time period.
//!
//! Every nonlocal integral in the crate is a weighted sum over the nodes of a
//! [`SpatialGrid`]; every periodic-in-time quantity is tabulated on a
//! [`TimeGrid`].

use serde::{Deserialize, Serialize};

use crate::error::{NlsError, Result};

/// Composite quadrature rule used on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureRule {
    /// Cell midpoints, equal weights. No node sits on the boundary.
    #[default]
    Midpoint,
    /// Cell vertices, halved weights at the two ends of each axis.
    Trapezoid,
}

/// Axis-aligned box `[a_1, b_1] x ... x [a_dim, b_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn interval(a: f64, b: f64) -> Self {
        Self {
            lower: vec![a],
            upper: vec![b],
        }
    }

    pub fn rect(x: (f64, f64), y: (f64, f64)) -> Self {
        Self {
            lower: vec![x.0, y.0],
            upper: vec![x.1, y.1],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, p: &[f64; 2]) -> bool {
        (0..self.dim()).all(|d| p[d] >= self.lower[d] && p[d] <= self.upper[d])
    }
}

/// Nodes and weights of a tensor-product rule on a 1D or 2D box.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub dim: usize,
    /// Node coordinates; the second entry is unused (zero) in 1D.
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub bounds: BoxDomain,
    pub n: usize,
    /// Nodes per axis. Node `(i, j)` of a 2D grid has flat index `i * shape[1] + j`.
    pub shape: Vec<usize>,
    /// Cell width per axis.
    pub spacing: Vec<f64>,
    pub rule: QuadratureRule,
}

fn axis_rule(a: f64, b: f64, n: usize, rule: QuadratureRule) -> (Vec<f64>, Vec<f64>, f64) {
    match rule {
        QuadratureRule::Midpoint => {
            let h = (b - a) / n as f64;
            let x = (0..n).map(|i| a + (i as f64 + 0.5) * h).collect();
            (x, vec![h; n], h)
        }
        QuadratureRule::Trapezoid => {
            let h = (b - a) / (n - 1) as f64;
            let x = (0..n).map(|i| a + i as f64 * h).collect();
            let mut w = vec![h; n];
            w[0] = 0.5 * h;
            w[n - 1] = 0.5 * h;
            (x, w, h)
        }
    }
}

impl SpatialGrid {
    /// Builds a composite rule with `n_per_axis[d]` nodes along axis `d`.
    pub fn new(bounds: BoxDomain, n_per_axis: &[usize], rule: QuadratureRule) -> Result<Self> {
        let dim = bounds.dim();
        if !(1..=2).contains(&dim) || bounds.upper.len() != dim {
            return Err(NlsError::invalid(format!(
                "only 1D and 2D boxes are supported (got dim {dim})"
            )));
        }
        if n_per_axis.len() != dim {
            return Err(NlsError::ShapeMismatch {
                what: "n_per_axis",
                expected: dim,
                got: n_per_axis.len(),
            });
        }
        if n_per_axis.iter().any(|&n| n < 2) {
            return Err(NlsError::invalid("each axis needs at least 2 nodes"));
        }
        if bounds
            .lower
            .iter()
            .zip(&bounds.upper)
            .any(|(a, b)| !(b - a > 0.0) || !a.is_finite() || !b.is_finite())
        {
            return Err(NlsError::invalid("degenerate box: zero or negative volume"));
        }

        let axes: Vec<_> = (0..dim)
            .map(|d| axis_rule(bounds.lower[d], bounds.upper[d], n_per_axis[d], rule))
            .collect();
        let (nodes, weights) = if dim == 1 {
            let (x, w, _) = &axes[0];
            (x.iter().map(|&v| [v, 0.0]).collect(), w.clone())
        } else {
            let (x, wx, _) = &axes[0];
            let (y, wy, _) = &axes[1];
            let mut nodes = Vec::with_capacity(x.len() * y.len());
            let mut weights = Vec::with_capacity(x.len() * y.len());
            for (xi, wxi) in x.iter().zip(wx) {
                for (yj, wyj) in y.iter().zip(wy) {
                    nodes.push([*xi, *yj]);
                    weights.push(wxi * wyj);
                }
            }
            (nodes, weights)
        };
        Ok(Self {
            dim,
            n: nodes.len(),
            nodes,
            weights,
            shape: n_per_axis.to_vec(),
            spacing: axes.iter().map(|a| a.2).collect(),
            bounds,
            rule,
        })
    }

    /// Midpoint grid on `[a, b]` with `n` cells.
    pub fn interval(a: f64, b: f64, n: usize) -> Result<Self> {
        Self::new(BoxDomain::interval(a, b), &[n], QuadratureRule::Midpoint)
    }

    pub fn measure(&self) -> f64 {
        self.bounds.volume()
    }

    /// Largest cell width over all axes.
    pub fn h(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    /// Indices of grid neighbours (4-neighbourhood in 2D).
    pub fn neighbours(&self, idx: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(4);
        if self.dim == 1 {
            if idx > 0 {
                out.push(idx - 1);
            }
            if idx + 1 < self.n {
                out.push(idx + 1);
            }
        } else {
            let ny = self.shape[1];
            let (i, j) = (idx / ny, idx % ny);
            if i > 0 {
                out.push(idx - ny);
            }
            if i + 1 < self.shape[0] {
                out.push(idx + ny);
            }
            if j > 0 {
                out.push(idx - 1);
            }
            if j + 1 < ny {
                out.push(idx + 1);
            }
        }
        out
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.nodes[a], self.nodes[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }
}

/// Weighted sum `sum_j w_j f(x_j)`.
pub fn quadrature(samples: &[f64], grid: &SpatialGrid) -> Result<f64> {
    if samples.len() != grid.n {
        return Err(NlsError::ShapeMismatch {
            what: "quadrature samples",
            expected: grid.n,
            got: samples.len(),
        });
    }
    Ok(samples.iter().zip(&grid.weights).map(|(f, w)| f * w).sum())
}

/// Uniform partition of the unit period.
///
/// Coefficients are tabulated at half-knots `j / (2 steps)`, so that both the
/// knots and the step midpoints are exact samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 4 {
            return Err(NlsError::invalid("time grid needs at least 4 steps"));
        }
        Ok(Self { steps })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `t_0 = 0, ..., t_steps = 1`.
    pub fn knots(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.knot(k)).collect()
    }

    pub fn knot(&self, k: usize) -> f64 {
        if k == self.steps {
            1.0
        } else {
            k as f64 / self.steps as f64
        }
    }

    /// Number of half-knot samples, `2 steps + 1`.
    pub fn n_samples(&self) -> usize {
        2 * self.steps + 1
    }

    pub fn sample_time(&self, j: usize) -> f64 {
        if j == 2 * self.steps {
            1.0
        } else {
            j as f64 / (2 * self.steps) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_nodes_on_unit_interval() {
        let g = SpatialGrid::interval(0.0, 1.0, 4).unwrap();
        let x: Vec<f64> = g.nodes.iter().map(|p| p[0]).collect();
        assert_eq!(x, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(g.weights.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn weights_sum_to_measure() {
        for n in [2, 3, 17, 200] {
            let g = SpatialGrid::interval(0.0, 1.0, n).unwrap();
            assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let t = SpatialGrid::new(BoxDomain::interval(0.0, 1.0), &[n], QuadratureRule::Trapezoid).unwrap();
            assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let r = SpatialGrid::new(
            BoxDomain::rect((0.0, 2.0), (0.0, 1.0)),
            &[8, 4],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        assert_eq!(r.n, 32);
        assert!((r.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(r.nodes.iter().all(|p| r.bounds.contains(p)));
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(SpatialGrid::interval(1.0, 1.0, 10).is_err());
        assert!(SpatialGrid::interval(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn quadrature_of_low_degree_polynomials() {
        let g = SpatialGrid::interval(0.0, 1.0, 100).unwrap();
        let ones = vec![1.0; g.n];
        assert!((quadrature(&ones, &g).unwrap() - 1.0).abs() < 1e-14);
        let lin: Vec<f64> = g.nodes.iter().map(|p| p[0]).collect();
        assert!((quadrature(&lin, &g).unwrap() - 0.5).abs() < 1e-6);
        assert!(quadrature(&lin[..10], &g).is_err());
    }

    #[test]
    fn midpoint_error_is_second_order() {
        // Exact value 1/3; the midpoint error is exactly h^2/12 for x^2.
        let errs: Vec<f64> = [50, 100, 200]
            .iter()
            .map(|&n| {
                let g = SpatialGrid::interval(0.0, 1.0, n).unwrap();
                let f: Vec<f64> = g.nodes.iter().map(|p| p[0] * p[0]).collect();
                (quadrature(&f, &g).unwrap() - 1.0 / 3.0).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio >= 3.5 && ratio < 4.5, "ratio {ratio}");
        }
    }

    #[test]
    fn time_grid_covers_one_period() {
        let tg = TimeGrid::new(400).unwrap();
        let k = tg.knots();
        assert_eq!(k.len(), 401);
        assert_eq!(k[0], 0.0);
        assert_eq!(k[400], 1.0);
        assert!((tg.dt() * tg.steps as f64 - 1.0).abs() < 1e-15);
        assert_eq!(tg.sample_time(1), 1.0 / 800.0);
    }

    #[test]
    fn neighbours_in_two_dimensions() {
        let g = SpatialGrid::new(
            BoxDomain::rect((0.0, 1.0), (0.0, 1.0)),
            &[3, 3],
            QuadratureRule::Midpoint,
        )
        .unwrap();
        let mut nb = g.neighbours(4);
        nb.sort();
        assert_eq!(nb, vec![1, 3, 5, 7]);
        assert_eq!(g.neighbours(0).len(), 2);
    }
}
