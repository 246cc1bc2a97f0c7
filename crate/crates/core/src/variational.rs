//! Ratio certificates for the generalized principal eigenvalues
//! `lambda_p = sup inf L_i[phi]/phi_i` and `lambda_p' = inf sup L_i[phi]/phi_i`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximation::{flatten_level, lower_upper_sequences};
use crate::error::{NlsError, Result};
use crate::fields::FieldSource;
use crate::floquet::{spectral_bound_op, SpectralOptions};
use crate::operator::{fd_periodic, DiscreteOperator, OperatorSpec, StateField};

/// Location of an extremal ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub knot: usize,
    pub node: usize,
    pub species: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalCertificate {
    #[serde(skip_serializing)]
    pub test_function: StateField,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub lower_at: Witness,
    pub upper_at: Witness,
    /// `sup tau |D4 phi - D6 phi| / phi`, the time-derivative truncation estimate.
    pub time_truncation: f64,
    pub min_test: f64,
}

/// Inf and sup over knots, nodes and species of `L_i[phi] / phi_i`.
pub fn rayleigh_bounds(op: &DiscreteOperator, phi: &StateField) -> Result<VariationalCertificate> {
    if phi.l != op.l || phi.n != op.n || phi.steps != op.steps() {
        return Err(NlsError::invalid(
            "test function does not match the operator discretization",
        ));
    }
    let min_test = phi.min();
    if !(min_test > 0.0) {
        return Err(NlsError::invalid(format!(
            "test function must be strictly positive (min {min_test:e})"
        )));
    }
    let l = op.l;
    let per_knot: Vec<(f64, Witness, f64, Witness, f64)> = (0..op.steps())
        .into_par_iter()
        .map(|k| {
            let d4 = fd_periodic(phi, k, 4);
            let d6 = fd_periodic(phi, k, 6);
            let mut g = vec![0.0; op.nl()];
            op.apply_spatial_into(phi.knot(k), 2 * k, &mut g);
            let p = phi.knot(k);
            let (mut lo, mut hi, mut trunc) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
            let (mut wl, mut wh) = (
                Witness {
                    knot: k,
                    node: 0,
                    species: 0,
                },
                Witness {
                    knot: k,
                    node: 0,
                    species: 0,
                },
            );
            for j in 0..p.len() {
                let r = (-op.tau * d4[j] + g[j]) / p[j];
                let w = Witness {
                    knot: k,
                    node: j / l,
                    species: j % l,
                };
                if r < lo {
                    lo = r;
                    wl = w;
                }
                if r > hi {
                    hi = r;
                    wh = w;
                }
                trunc = trunc.max(op.tau * (d4[j] - d6[j]).abs() / p[j]);
            }
            (lo, wl, hi, wh, trunc)
        })
        .collect();
    let mut cert = VariationalCertificate {
        test_function: phi.clone(),
        lower_bound: f64::INFINITY,
        upper_bound: f64::NEG_INFINITY,
        lower_at: per_knot[0].1,
        upper_at: per_knot[0].3,
        time_truncation: 0.0,
        min_test,
    };
    for (lo, wl, hi, wh, tr) in per_knot {
        if lo < cert.lower_bound {
            cert.lower_bound = lo;
            cert.lower_at = wl;
        }
        if hi > cert.upper_bound {
            cert.upper_bound = hi;
            cert.upper_at = wh;
        }
        cert.time_truncation = cert.time_truncation.max(tr);
    }
    Ok(cert)
}

/// How the certificate test functions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CertifyMode {
    /// Principal eigenfunction when it exists, approximation levels otherwise.
    #[default]
    Auto,
    Direct,
    Approximation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelTrace {
    pub k: usize,
    pub epsilon: f64,
    pub s_lower: f64,
    pub s_upper: f64,
    /// Lower certificate for `L(A)` from the eigenfunction of the flattened lower level.
    pub lambda_p_cert: f64,
    /// Upper certificate for `L(A)` from the eigenfunction of the upper level.
    pub lambda_p_prime_cert: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EqualityReport {
    pub lambda_p_est: f64,
    pub lambda_p_prime_est: f64,
    pub s: f64,
    pub max_gap: f64,
    pub tol: f64,
    pub certified: bool,
    pub mode: CertifyMode,
    pub time_truncation: f64,
    pub levels: Vec<LevelTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub mode: CertifyMode,
    pub n_levels: usize,
    pub eps0: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            mode: CertifyMode::Auto,
            n_levels: 4,
            eps0: 0.1,
        }
    }
}

/// Checks `s = lambda_p = lambda_p'` on the discretization of `spec`.
pub fn certify_equality(spec: &OperatorSpec, tol: f64, opts: &CertifyOptions) -> Result<EqualityReport> {
    let op = spec.discretize()?;
    let sopts = SpectralOptions {
        adjoint: false,
        ..SpectralOptions::default()
    };
    let base = spectral_bound_op(&op, &sopts)?;
    let direct = match opts.mode {
        CertifyMode::Direct => true,
        CertifyMode::Approximation => false,
        CertifyMode::Auto => base.verdict.is_principal_eigenvalue && base.min_eigenfunction > 0.0,
    };
    let finish = |lp: f64, lpp: f64, trunc: f64, mode: CertifyMode, levels: Vec<LevelTrace>| {
        let max_gap = (lp - base.s).abs().max((lpp - base.s).abs());
        EqualityReport {
            lambda_p_est: lp,
            lambda_p_prime_est: lpp,
            s: base.s,
            max_gap,
            tol,
            certified: max_gap <= tol,
            mode,
            time_truncation: trunc,
            levels,
        }
    };
    if direct {
        let cert = rayleigh_bounds(&op, &base.eigenfunction)?;
        return Ok(finish(
            cert.lower_bound,
            cert.upper_bound,
            cert.time_truncation,
            CertifyMode::Direct,
            Vec::new(),
        ));
    }
    let mut seq = lower_upper_sequences(&spec.a, &spec.grid, &spec.time, opts.n_levels, opts.eps0)?;
    let mut levels = Vec::with_capacity(opts.n_levels);
    let (mut lp, mut lpp, mut trunc) = (f64::NEG_INFINITY, f64::INFINITY, 0.0f64);
    for (k, lev) in seq.levels.iter_mut().enumerate() {
        flatten_level(lev, &spec.grid, spec.tau)?;
        let lo_spec = spec
            .clone()
            .with_a(FieldSource::Table(Arc::new(lev.lower_flat.clone().unwrap())));
        let up_spec = spec.clone().with_a(FieldSource::Table(Arc::new(lev.upper.clone())));
        let lo = spectral_bound_op(&lo_spec.discretize()?, &sopts)?;
        let up = spectral_bound_op(&up_spec.discretize()?, &sopts)?;
        let cl = rayleigh_bounds(&op, &lo.eigenfunction)?;
        let cu = rayleigh_bounds(&op, &up.eigenfunction)?;
        lp = lp.max(cl.lower_bound);
        lpp = lpp.min(cu.upper_bound);
        trunc = trunc.max(cl.time_truncation).max(cu.time_truncation);
        levels.push(LevelTrace {
            k,
            epsilon: lev.epsilon,
            s_lower: lo.s,
            s_upper: up.s,
            lambda_p_cert: cl.lower_bound,
            lambda_p_prime_cert: cu.upper_bound,
        });
    }
    let report = finish(lp, lpp, trunc, CertifyMode::Approximation, levels);
    if !report.certified {
        log::warn!(
            "certification gap {:e} exceeds {tol:e}; level trace: {:?}",
            report.max_gap,
            report.levels
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Kernel;
    use crate::grid::{SpatialGrid, TimeGrid};

    fn scen_a() -> OperatorSpec {
        OperatorSpec::raw(
            FieldSource::constant(&[&[1.0]]),
            FieldSource::constant(&[&[0.0]]),
            vec![Kernel::Constant { value: 1.0 }],
            SpatialGrid::interval(0.0, 1.0, 50).unwrap(),
            TimeGrid::new(40).unwrap(),
        )
    }

    #[test]
    fn constant_test_function() {
        let spec = scen_a();
        let op = spec.discretize().unwrap();
        let phi = StateField::from_fn(1, &spec.grid, &spec.time, |_, _, _| 1.0);
        let c = rayleigh_bounds(&op, &phi).unwrap();
        assert!((c.lower_bound - 1.0).abs() < 1e-12 && (c.upper_bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_rejected() {
        let spec = scen_a();
        let op = spec.discretize().unwrap();
        let phi = StateField::from_fn(1, &spec.grid, &spec.time, |x, _, _| x[0] - 0.5);
        assert!(rayleigh_bounds(&op, &phi).is_err());
    }

    #[test]
    fn scen_a_equality() {
        let r = certify_equality(&scen_a(), 1e-6, &CertifyOptions::default()).unwrap();
        assert_eq!(r.mode, CertifyMode::Direct);
        assert!(r.certified, "{r:?}");
    }
}
