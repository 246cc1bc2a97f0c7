//! Local time-periodic Dirichlet eigenproblem
//! `-tau phi_t + D_r Delta phi + A phi = lambda phi`, the `sigma -> 0`, `m = 2`
//! reference.

use nalgebra::DMatrix;

use crate::error::{NlsError, Result};
use crate::fields::{sample_field, FieldSource, Kernel, MatrixField, StructureReport};
use crate::floquet::{spectral_bound_op, SpectralOptions, SpectralResult};
use crate::grid::{BoxDomain, QuadratureRule, SpatialGrid, TimeGrid};
use crate::operator::DiscreteOperator;

/// `d_r,i = d_ii m_2,i / (2N)` as a diagonal field.
pub fn effective_diffusivity(kernels: &[Kernel], d: &MatrixField, dim: usize) -> Result<MatrixField> {
    let l = d.l;
    if kernels.len() != l {
        return Err(NlsError::ShapeMismatch {
            what: "kernels",
            expected: l,
            got: kernels.len(),
        });
    }
    let m2 = kernels
        .iter()
        .map(|k| k.second_moment(dim))
        .collect::<Result<Vec<_>>>()?;
    let mut out = d.clone();
    for blk in out.values.chunks_mut(l * l) {
        for i in 0..l {
            for j in 0..l {
                blk[i * l + j] = if i == j {
                    blk[i * l + i] * m2[i] / (2.0 * dim as f64)
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}

/// Interior nodes of a uniform grid with `n_per_axis` unknowns per axis;
/// boundary values are eliminated.
pub fn interior_grid(bounds: BoxDomain, n_per_axis: &[usize]) -> Result<SpatialGrid> {
    if n_per_axis.iter().any(|&n| n < 10) {
        return Err(NlsError::Resolution(
            "the local solver needs at least 10 interior nodes per axis".into(),
        ));
    }
    let dim = bounds.dim();
    if n_per_axis.len() != dim {
        return Err(NlsError::ShapeMismatch {
            what: "n_per_axis",
            expected: dim,
            got: n_per_axis.len(),
        });
    }
    let spacing: Vec<f64> = (0..dim)
        .map(|d| (bounds.upper[d] - bounds.lower[d]) / (n_per_axis[d] + 1) as f64)
        .collect();
    let axis = |d: usize| -> Vec<f64> {
        (1..=n_per_axis[d])
            .map(|i| bounds.lower[d] + i as f64 * spacing[d])
            .collect()
    };
    let (nodes, weights): (Vec<[f64; 2]>, Vec<f64>) = if dim == 1 {
        axis(0).into_iter().map(|x| ([x, 0.0], spacing[0])).unzip()
    } else {
        let (xs, ys) = (axis(0), axis(1));
        xs.iter()
            .flat_map(|&x| ys.iter().map(move |&y| ([x, y], 0.0)))
            .map(|(p, _)| (p, spacing[0] * spacing[1]))
            .unzip()
    };
    Ok(SpatialGrid {
        dim,
        n: nodes.len(),
        nodes,
        weights,
        bounds,
        shape: n_per_axis.to_vec(),
        spacing,
        rule: QuadratureRule::Trapezoid,
    })
}

/// Standard 3-point (1D) or 5-point (2D) Dirichlet Laplacian on an interior grid.
pub fn dirichlet_laplacian(grid: &SpatialGrid) -> DMatrix<f64> {
    let n = grid.n;
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        let mut idx = vec![0usize; grid.dim];
        if grid.dim == 1 {
            idx[0] = a;
        } else {
            idx[0] = a / grid.shape[1];
            idx[1] = a % grid.shape[1];
        }
        for d in 0..grid.dim {
            let h2 = grid.spacing[d] * grid.spacing[d];
            m[(a, a)] -= 2.0 / h2;
            let stride = if grid.dim == 1 || d == 1 { 1 } else { grid.shape[1] };
            if idx[d] > 0 {
                m[(a, a - stride)] += 1.0 / h2;
            }
            if idx[d] + 1 < grid.shape[d] {
                m[(a, a + stride)] += 1.0 / h2;
            }
        }
    }
    m
}

/// Local Dirichlet problem data.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub tau: f64,
    /// Diagonal diffusivity `D_r(x, t)`.
    pub dr: FieldSource,
    pub a: FieldSource,
    pub bounds: BoxDomain,
    /// Interior unknowns per axis.
    pub n_per_axis: Vec<usize>,
    pub time: TimeGrid,
}

impl LocalProblem {
    pub fn grid(&self) -> Result<SpatialGrid> {
        interior_grid(self.bounds.clone(), &self.n_per_axis)
    }

    /// Assembles `G(t) = D_r(t) Delta + A(t)` in the common discrete-operator form.
    pub fn discretize(&self) -> Result<DiscreteOperator> {
        if !(self.tau > 0.0) {
            return Err(NlsError::invalid("tau must be positive"));
        }
        let grid = self.grid()?;
        let d = sample_field(&self.dr, &grid, &self.time)?;
        let a = sample_field(&self.a, &grid, &self.time)?;
        let l = a.l;
        if d.l != l {
            return Err(NlsError::ShapeMismatch {
                what: "D_r",
                expected: l,
                got: d.l,
            });
        }
        if !d.is_diagonal() || d.values.chunks(l * l).any(|b| (0..l).any(|i| b[i * l + i] <= 0.0)) {
            return Err(NlsError::invalid("D_r must be diagonal with positive entries"));
        }
        let lap = dirichlet_laplacian(&grid);
        let structure = StructureReport {
            h1: true,
            h2: a.offdiag_nonnegative(),
            h2_tilde: l == 1,
            h3: true,
            h1_tilde: false,
            h3_tilde: false,
            cond_d: false,
            f1: false,
            f2: false,
        };
        Ok(DiscreteOperator {
            l,
            n: grid.n,
            tau: self.tau,
            time: self.time,
            kmats: vec![vec![lap]; l],
            local: a.clone(),
            a,
            d,
            outflow: None,
            structure,
            kernels: Vec::new(),
            grid,
        })
    }
}

/// `lambda^local = tau ln r(V^r(1, 0))`.
pub fn local_principal_eigen(problem: &LocalProblem) -> Result<SpectralResult> {
    let op = problem.discretize()?;
    local_principal_eigen_op(&op)
}

pub fn local_principal_eigen_op(op: &DiscreteOperator) -> Result<SpectralResult> {
    spectral_bound_op(
        op,
        &SpectralOptions {
            adjoint: false,
            ..SpectralOptions::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    fn problem(a: &str, n: usize) -> LocalProblem {
        LocalProblem {
            tau: 1.0,
            dr: FieldSource::constant(&[&[1.0]]),
            a: FieldSource::scalar(Expr::parse(a).unwrap()),
            bounds: BoxDomain::interval(0.0, 1.0),
            n_per_axis: vec![n],
            time: TimeGrid::new(100).unwrap(),
        }
    }

    #[test]
    fn dirichlet_eigenvalue() {
        let pi2 = std::f64::consts::PI.powi(2);
        let r = local_principal_eigen(&problem("0", 100)).unwrap();
        assert!((r.s + pi2).abs() < 0.05, "{}", r.s);
        let r5 = local_principal_eigen(&problem("5", 100)).unwrap();
        assert!((r5.s - r.s - 5.0).abs() < 1e-9);
        let rg = local_principal_eigen(&problem("sin(2*pi*t)", 100)).unwrap();
        assert!((rg.s - r.s).abs() < 1e-9);
    }

    #[test]
    fn diffusivity_from_moments() {
        let g = SpatialGrid::interval(0.0, 1.0, 4).unwrap();
        let tg = TimeGrid::new(4).unwrap();
        let d = sample_field(&FieldSource::constant(&[&[6.0]]), &g, &tg).unwrap();
        let r = effective_diffusivity(&[Kernel::uniform()], &d, 1).unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-6);
        let d = sample_field(&FieldSource::constant(&[&[12.0]]), &g, &tg).unwrap();
        let r = effective_diffusivity(&[Kernel::triangular()], &d, 1).unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn too_coarse_rejected() {
        assert!(matches!(
            local_principal_eigen(&problem("0", 5)),
            Err(NlsError::Resolution(_))
        ));
    }
}
