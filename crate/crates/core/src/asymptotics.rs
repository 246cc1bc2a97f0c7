//! Parameter sweeps in dispersal rate, dispersal range and frequency, with
//! the predicted limits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlsError, Result};
use crate::fields::{sample_field, FieldSource, Kernel};
use crate::floquet::{frozen_time_integral, lambda_a_profile, spectral_bound_op, SpectralOptions};
use crate::grid::TimeGrid;
use crate::local_limit::{effective_diffusivity, local_principal_eigen_op, LocalProblem};
use crate::operator::{DiscreteOperator, Dispersal, OperatorSpec};

/// Tolerance for monotonicity violations along a sweep.
pub const MONOTONE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: f64,
    pub s: Option<f64>,
    pub residual: Option<f64>,
    pub iters: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Target {
    pub value: f64,
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
    pub target: Option<Target>,
    /// Extrapolated limit (Richardson on the last three points, else the last point).
    pub extrapolated: Option<f64>,
    /// `|last s - target|`.
    pub gap: Option<f64>,
    /// Count of consecutive pairs moving against the expected direction by more than [`MONOTONE_TOL`].
    pub violations: usize,
    /// Frequency sweeps: the large-`tau` lower-bound constant.
    pub lower_bound: Option<f64>,
}

impl SweepResult {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().filter_map(|p| p.s).collect()
    }

    pub fn last(&self) -> Option<f64> {
        self.points.iter().rev().find_map(|p| p.s)
    }

    /// CSV rows `param,s,residual,iters`.
    pub fn csv(&self) -> String {
        let mut out = String::from("param,s,residual,iters\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                format!("{:.16e}", p.param),
                f(p.s),
                f(p.residual),
                p.iters.map(|i| i.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

fn check_params(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(NlsError::invalid("sweep needs at least one value"));
    }
    let inc = values.windows(2).all(|w| w[1] > w[0]);
    let dec = values.windows(2).all(|w| w[1] < w[0]);
    if !(inc || dec) {
        return Err(NlsError::invalid("sweep values must be strictly monotone"));
    }
    Ok(())
}

fn solve_point(param: f64, spec: Result<OperatorSpec>) -> SweepPoint {
    let run = || -> Result<(f64, f64, usize)> {
        let op = spec?.discretize()?;
        let r = spectral_bound_op(
            &op,
            &SpectralOptions {
                adjoint: false,
                ..SpectralOptions::default()
            },
        )?;
        Ok((r.s, r.residual, r.power_iters))
    };
    match run() {
        Ok((s, res, it)) => SweepPoint {
            param,
            s: Some(s),
            residual: Some(res),
            iters: Some(it),
            error: None,
        },
        Err(e) => {
            log::warn!("sweep point {param}: {e}");
            SweepPoint {
                param,
                s: None,
                residual: None,
                iters: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Richardson extrapolation from the last three successful points, with the
/// order read off the ratio of successive differences; last point otherwise.
pub fn extrapolate(s: &[f64]) -> Option<f64> {
    let n = s.len();
    if n == 0 {
        return None;
    }
    if n >= 3 {
        let (a, b, c) = (s[n - 3], s[n - 2], s[n - 1]);
        let (d1, d2) = (b - a, c - b);
        if d1 != 0.0 && d2 != 0.0 && d1.signum() == d2.signum() {
            let q = d1 / d2;
            if q > 1.0 + 1e-12 {
                return Some(c + d2 / (q - 1.0));
            }
        }
    }
    Some(s[n - 1])
}

fn count_violations(s: &[f64], nonincreasing: bool) -> usize {
    s.windows(2)
        .filter(|w| {
            if nonincreasing {
                w[1] > w[0] + MONOTONE_TOL
            } else {
                w[1] < w[0] - MONOTONE_TOL
            }
        })
        .count()
}

fn max_lambda(field: &FieldSource, spec: &OperatorSpec) -> Result<f64> {
    let a = sample_field(field, &spec.grid, &spec.time)?;
    Ok(lambda_a_profile(&a, spec.tau)?.max())
}

/// `max_x lambda_{A - D0}(x)` for scaled specs, `max_x lambda_A` otherwise.
fn max_lambda_a0(spec: &OperatorSpec) -> Result<f64> {
    let a = sample_field(&spec.a, &spec.grid, &spec.time)?;
    let a0 = match &spec.dispersal {
        Dispersal::Scaled { d0, .. } => {
            let d0 = sample_field(d0, &spec.grid, &spec.time)?;
            let l = a.l;
            let mut diag_only = d0.clone();
            for blk in diag_only.values.chunks_mut(l * l) {
                for i in 0..l {
                    for j in 0..l {
                        if i != j {
                            blk[i * l + j] = 0.0;
                        }
                    }
                }
            }
            a.zip_map(&diag_only, |x, y| x - y)?
        }
        Dispersal::Raw(_) => a,
    };
    Ok(lambda_a_profile(&a0, spec.tau)?.max())
}

/// `s` at each multiple of the dispersal; target `max lambda_A` as the scale
/// goes to zero.
pub fn sweep_dispersal_rate(base: &OperatorSpec, scales: &[f64]) -> Result<SweepResult> {
    check_params(scales)?;
    if scales.iter().any(|&s| !(s >= 0.0)) {
        return Err(NlsError::invalid("dispersal scales must be nonnegative"));
    }
    let points: Vec<SweepPoint> = scales
        .par_iter()
        .map(|&c| solve_point(c, Ok(base.clone().scale_dispersal(c))))
        .collect();
    let target = Target {
        value: max_lambda(&base.a, base)?,
        provenance: "small dispersal rate: max_x lambda_A(x)".into(),
    };
    // s is nonincreasing in the scale for outflow specs; report in parameter order.
    let s: Vec<f64> = points.iter().filter_map(|p| p.s).collect();
    let increasing = scales.len() < 2 || scales[1] > scales[0];
    let violations = if matches!(base.dispersal, Dispersal::Scaled { .. }) {
        count_violations(&s, increasing)
    } else {
        0
    };
    let small_idx = if increasing { 0 } else { points.len() - 1 };
    let gap = points[small_idx].s.map(|v| (v - target.value).abs());
    Ok(SweepResult {
        parameter: "dispersal_scale".into(),
        extrapolated: extrapolate(&s),
        points,
        target: Some(target),
        gap,
        violations,
        lower_bound: None,
    })
}

/// Kernel support radius in units of `sigma = 1`, when known.
pub(crate) fn support_radius(k: &Kernel) -> Option<f64> {
    match k {
        Kernel::Convolution { profile, scale } => Some(profile.radius() * scale),
        _ => None,
    }
}

/// `lambda^local` for a scaled spec with `m = 2`: Dirichlet problem with
/// `d_r,i = c_ii d0_ii m_2,i / (2N)`.
pub fn local_target(spec: &OperatorSpec) -> Result<f64> {
    Ok(local_principal_eigen_op(&local_problem(spec)?.discretize()?)?.s)
}

/// Local Dirichlet problem `D_r Delta + A` matching a scaled-mode spec, with
/// as many interior unknowns per axis as the spec grid has nodes.
pub fn local_problem(spec: &OperatorSpec) -> Result<LocalProblem> {
    let (c, d0) = match &spec.dispersal {
        Dispersal::Scaled { c, d0 } => (c, d0),
        Dispersal::Raw(_) => return Err(NlsError::invalid("the local limit needs a scaled-mode spec")),
    };
    let l = spec.l;
    let cd = c.clone();
    let d0c = d0.clone();
    let d0_ti = sample_field(d0, &spec.grid, &spec.time)?.time_independent;
    let dfield = FieldSource::func(l, d0_ti, move |x, t, out| {
        d0c.eval(x, t, out).expect("point-evaluable D0");
        for i in 0..l {
            for j in 0..l {
                out[i * l + j] = if i == j { cd[(i, i)] * out[i * l + i] } else { 0.0 };
            }
        }
    });
    // D_r through the kernel second moments, evaluated on the spec grid.
    let dsamp = sample_field(&dfield, &spec.grid, &spec.time)?;
    let dr = effective_diffusivity(&spec.kernels, &dsamp, spec.grid.dim)?;
    if !dr.is_constant() {
        return Err(NlsError::invalid("the local target needs spatially constant D0"));
    }
    let vals: Vec<Vec<f64>> = (0..l).map(|i| (0..l).map(|j| dr.values[i * l + j]).collect()).collect();
    let rows: Vec<&[f64]> = vals.iter().map(|r| r.as_slice()).collect();
    Ok(LocalProblem {
        tau: spec.tau,
        dr: FieldSource::constant(&rows),
        a: spec.a.clone(),
        bounds: spec.grid.bounds.clone(),
        n_per_axis: spec.grid.shape.clone(),
        time: spec.time,
    })
}

/// `s` along `sigma_list` with exponent `m`; the target depends on the direction.
pub fn sweep_dispersal_range(base: &OperatorSpec, sigmas: &[f64], m: f64) -> Result<SweepResult> {
    check_params(sigmas)?;
    if !matches!(base.dispersal, Dispersal::Scaled { .. }) {
        return Err(NlsError::invalid("range sweeps need a scaled-mode spec"));
    }
    let to_zero = sigmas.len() < 2 || sigmas[1] < sigmas[0];
    let h = base.grid.h();
    let points: Vec<SweepPoint> = sigmas
        .par_iter()
        .map(|&sig| {
            let mut spec = base.clone().with_sigma(sig);
            spec.m = m;
            let radius = base
                .kernels
                .iter()
                .filter_map(support_radius)
                .fold(f64::INFINITY, f64::min);
            let prepared = if radius.is_finite() && sig * radius < 2.0 * h {
                Err(NlsError::Resolution(format!(
                    "kernel support {:.3e} spans fewer than 2 grid cells (h = {h:.3e}); refine the grid",
                    sig * radius
                )))
            } else {
                Ok(spec)
            };
            solve_point(sig, prepared)
        })
        .collect();
    let target = if to_zero {
        if (m - 2.0).abs() < 1e-12 {
            let mut spec = base.clone();
            spec.m = m;
            Some(Target {
                value: local_target(&spec)?,
                provenance: "sigma -> 0, m = 2: local Dirichlet eigenvalue lambda^local".into(),
            })
        } else if m < 2.0 {
            Some(Target {
                value: max_lambda(&base.a, base)?,
                provenance: "sigma -> 0, m in [0, 2): max_x lambda_A(x)".into(),
            })
        } else {
            None
        }
    } else if m == 0.0 {
        Some(Target {
            value: max_lambda_a0(base)?,
            provenance: "sigma -> infinity, m = 0: max_x lambda_{A - D0}(x)".into(),
        })
    } else {
        Some(Target {
            value: max_lambda(&base.a, base)?,
            provenance: "sigma -> infinity, m > 0: max_x lambda_A(x)".into(),
        })
    };
    let s: Vec<f64> = points.iter().filter_map(|p| p.s).collect();
    let gap = match (&target, points.last().and_then(|p| p.s)) {
        (Some(t), Some(v)) => Some((v - t.value).abs()),
        _ => None,
    };
    // error to the target should shrink along the sweep
    let violations = match &target {
        Some(t) => {
            let errs: Vec<f64> = s.iter().map(|v| (v - t.value).abs()).collect();
            count_violations(&errs, true)
        }
        None => 0,
    };
    Ok(SweepResult {
        parameter: "sigma".into(),
        extrapolated: extrapolate(&s),
        points,
        target,
        gap,
        violations,
        lower_bound: None,
    })
}

/// Steps per period used at frequency `tau`: keeps `h / tau <= 0.05` and the
/// sample count compatible with a 41-point frozen-time rule.
pub fn frequency_steps(base: usize, tau: f64) -> usize {
    let s = base.max((20.0 / tau).ceil() as usize);
    s.div_ceil(20) * 20
}

/// `min_i mean_{x,t} (G(t) 1_i)_i`: the large-`tau` lower-bound constant.
pub fn frequency_lower_bound(op: &DiscreteOperator) -> Result<f64> {
    let (l, n) = (op.l, op.n);
    let samples = if op.time_independent() { 1 } else { op.time.n_samples() };
    let area = op.grid.measure();
    let mut best = f64::INFINITY;
    for i in 0..l {
        let mut u = vec![0.0; n * l];
        for a in 0..n {
            u[a * l + i] = 1.0;
        }
        let mut acc = 0.0;
        for s in 0..samples {
            let g = op.apply_spatial(&u, s)?;
            let sp: f64 = (0..n).map(|a| op.grid.weights[a] * g[a * l + i]).sum::<f64>() / area;
            // trapezoid over the periodic half-knot samples
            let w = if samples == 1 {
                1.0
            } else if s == 0 || s == samples - 1 {
                0.5 / (samples - 1) as f64
            } else {
                1.0 / (samples - 1) as f64
            };
            acc += w * sp;
        }
        best = best.min(acc);
    }
    Ok(best)
}

/// Dispersal multiplier as a function of `tau`.
pub type DOfTau = dyn Fn(f64) -> f64 + Sync;

/// Checks `d' >= 0` and `(d / tau)' <= 0` by sampling on the sweep range.
pub fn check_d_of_tau(f: &DOfTau, taus: &[f64]) -> Result<()> {
    let (lo, hi) = taus
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
    let m = 200;
    let pts: Vec<f64> = (0..=m).map(|k| lo * (hi / lo).powf(k as f64 / m as f64)).collect();
    for w in pts.windows(2) {
        let (d0, d1) = (f(w[0]), f(w[1]));
        if !(d0 > 0.0) || d1 < d0 - 1e-12 * d0.abs() {
            return Err(NlsError::precondition(format!(
                "d(tau) must be positive and nondecreasing (at tau = {})",
                w[1]
            )));
        }
        if d1 / w[1] > d0 / w[0] + 1e-12 * (d0 / w[0]).abs() {
            return Err(NlsError::precondition(format!(
                "d(tau)/tau must be nonincreasing (at tau = {})",
                w[1]
            )));
        }
    }
    Ok(())
}

/// `s(tau)` along `taus`; `d_of_tau` multiplies the dispersal at each point.
pub fn sweep_frequency(base: &OperatorSpec, taus: &[f64], d_of_tau: Option<&DOfTau>) -> Result<SweepResult> {
    check_params(taus)?;
    if taus.iter().any(|&t| !(t > 0.0)) {
        return Err(NlsError::invalid("tau values must be positive"));
    }
    if let Some(f) = d_of_tau {
        check_d_of_tau(f, taus)?;
    }
    let factor = |t: f64| d_of_tau.map(|f| f(t)).unwrap_or(1.0);
    let at = |t: f64| -> Result<OperatorSpec> {
        let steps = frequency_steps(base.time.steps, t);
        Ok(base
            .clone()
            .scale_dispersal(factor(t))
            .with_tau(t)
            .with_time(TimeGrid::new(steps)?))
    };
    let points: Vec<SweepPoint> = taus.par_iter().map(|&t| solve_point(t, at(t))).collect();
    let s: Vec<f64> = points.iter().filter_map(|p| p.s).collect();
    let increasing = taus.len() < 2 || taus[1] > taus[0];
    let violations = count_violations(&s, increasing);
    let (tmin, tmax) = taus
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
    let small = at(tmin)?.discretize()?;
    let target = Target {
        value: frozen_time_integral(&small, 41)?,
        provenance: "tau -> 0: integral over the period of the frozen-time bounds s(N_1(t))".into(),
    };
    let small_s = points.iter().find(|p| p.param == tmin).and_then(|p| p.s);
    let lower_bound = frequency_lower_bound(&at(tmax)?.discretize()?)?;
    Ok(SweepResult {
        parameter: "tau".into(),
        extrapolated: extrapolate(&s),
        gap: small_s.map(|v| (v - target.value).abs()),
        points,
        target: Some(target),
        violations,
        lower_bound: Some(lower_bound),
    })
}
