//! Nonlinear models: a vector-host epidemic system and a multigenotype stem
//! cell system, their threshold quantities, long-time dynamics, and the
//! nonlocal-to-local convergence of initial value problems.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{local_problem, support_radius};
use crate::error::{NlsError, Result};
use crate::expr::{Expr, Vars};
use crate::fields::{is_irreducible, sample_field, FieldSource, Kernel, MatrixField};
use crate::floquet::{spectral_bound_op, SpectralOptions, SpectralResult};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::operator::{interp_periodic, DiscreteOperator, Dispersal, OperatorSpec, StateField};
use crate::propagate::{Propagator, StepperKind};

/// Pointwise reaction `f(node, t, u, out)`; `u` and `out` hold the `l`
/// species at one node.
pub type ReactionFn = Arc<dyn Fn(usize, f64, &[f64], &mut [f64]) + Send + Sync>;

/// Negative values above this size are reported when clipped.
pub const CLIP_REPORT: f64 = 1e-13;
/// Sup-norm at which integration is abandoned.
pub const BLOWUP_NORM: f64 = 1e12;
/// Half-width of the band around zero in which a threshold is not trusted.
pub const NEAR_CRITICAL: f64 = 1e-3;
/// Period-to-period sup distance at which a periodic attractor is accepted.
pub const ATTRACTOR_TOL: f64 = 1e-7;
pub const ATTRACTOR_CAP: usize = 500;

/// `tau u_t = G(t) u + f(x, t, u)` with `G` the linear operator.
#[derive(Clone)]
pub struct SemilinearSystem {
    pub op: DiscreteOperator,
    pub reaction: Option<ReactionFn>,
}

impl std::fmt::Debug for SemilinearSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemilinearSystem")
            .field("l", &self.op.l)
            .field("n", &self.op.n)
            .field("nonlinear", &self.reaction.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    pub stepper: StepperKind,
    /// Snapshot spacing in knots; 0 records period starts only.
    pub record_every: usize,
    /// Stop once the period-to-period distance drops to this value.
    pub stop_residual: Option<f64>,
    /// Relative tolerance of the adaptive reaction substeps.
    pub reaction_rtol: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            stepper: StepperKind::Auto,
            record_every: 0,
            stop_residual: None,
            reaction_rtol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub l: usize,
    pub n: usize,
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    /// Knot states of the last complete period.
    #[serde(skip)]
    pub last_period: Option<StateField>,
    /// `max_k |u(t_k) - u(t_k - 1)|_inf` over the last period.
    pub periodic_residual: f64,
    pub periods: usize,
    /// Largest negative undershoot removed by clipping.
    pub clipped: f64,
    /// Sup norm at every period start.
    pub period_norms: Vec<f64>,
    /// Sup norm over every knot visited.
    pub max_norm: f64,
    /// State at the final time.
    pub final_state: Vec<f64>,
}

impl Trajectory {
    /// Rows `t,node,species,value`, keeping every `thin`-th snapshot.
    pub fn csv(&self, thin: usize) -> String {
        let mut out = String::from("t,node,species,value\n");
        for (t, snap) in self.times.iter().zip(&self.snapshots).step_by(thin.max(1)) {
            for (idx, v) in snap.iter().enumerate() {
                out.push_str(&format!("{t:.16e},{},{},{v:.16e}\n", idx / self.l, idx % self.l));
            }
        }
        out
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

fn sup_diff(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
}

/// Bogacki-Shampine 3(2) steps over `[t0, t0 + dt]`.
fn react_node(f: &ReactionFn, node: usize, t0: f64, dt: f64, tau: f64, rtol: f64, u: &mut [f64]) {
    let l = u.len();
    let mut k = [vec![0.0; l], vec![0.0; l], vec![0.0; l], vec![0.0; l]];
    let (mut y, mut z) = (vec![0.0; l], vec![0.0; l]);
    let atol = rtol * sup(u).max(1e-300) * 1e-3;
    let eval = |t: f64, x: &[f64], out: &mut [f64]| {
        f(node, t, x, out);
        out.iter_mut().for_each(|v| *v /= tau);
    };
    let (mut t, end, mut hs) = (t0, t0 + dt, dt);
    eval(t, u, &mut k[0]);
    let mut guard = 0;
    while t < end - 1e-14 * dt {
        hs = hs.min(end - t);
        for i in 0..l {
            y[i] = u[i] + 0.5 * hs * k[0][i];
        }
        eval(t + 0.5 * hs, &y, &mut k[1]);
        for i in 0..l {
            y[i] = u[i] + 0.75 * hs * k[1][i];
        }
        eval(t + 0.75 * hs, &y, &mut k[2]);
        for i in 0..l {
            y[i] = u[i] + hs * (2.0 / 9.0 * k[0][i] + k[1][i] / 3.0 + 4.0 / 9.0 * k[2][i]);
        }
        eval(t + hs, &y, &mut k[3]);
        let mut err: f64 = 0.0;
        for i in 0..l {
            z[i] = u[i] + hs * (7.0 / 24.0 * k[0][i] + 0.25 * k[1][i] + k[2][i] / 3.0 + 0.125 * k[3][i]);
            err = err.max((y[i] - z[i]).abs() / (atol + rtol * y[i].abs()));
        }
        guard += 1;
        let grow = if err > 0.0 { 0.9 * err.powf(-1.0 / 3.0) } else { 4.0 };
        if err <= 1.0 || guard > 10_000 {
            t += hs;
            u.copy_from_slice(&y);
            k.swap(0, 3);
            hs *= grow.min(4.0);
        } else {
            hs *= grow.max(0.2);
        }
    }
}

fn react_all(sys: &SemilinearSystem, v: &mut [f64], t0: f64, dt: f64, rtol: f64) {
    if let Some(f) = &sys.reaction {
        let tau = sys.op.tau;
        v.par_chunks_mut(sys.op.l)
            .with_min_len(64)
            .enumerate()
            .for_each(|(a, u)| react_node(f, a, t0, dt, tau, rtol, u));
    }
}

/// Integrates from `u0` at `t = 0` to `t_end` (in periods) by symmetric
/// splitting: reaction half-steps around each step of the linear period map.
pub fn integrate_system(sys: &SemilinearSystem, u0: &[f64], t_end: f64, opts: &IntegrateOptions) -> Result<Trajectory> {
    let op = &sys.op;
    let (nl, steps) = (op.nl(), op.steps());
    if u0.len() != nl {
        return Err(NlsError::ShapeMismatch {
            what: "initial state",
            expected: nl,
            got: u0.len(),
        });
    }
    if u0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(NlsError::invalid("initial state must be finite and nonnegative"));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(NlsError::invalid("integration horizon must be finite and nonnegative"));
    }
    let prop = Propagator::new(op, opts.stepper, usize::MAX)?;
    let total = (t_end * steps as f64).round() as usize;
    let h = 1.0 / steps as f64;

    let mut v = u0.to_vec();
    let mut buf = vec![0.0; nl];
    let mut prev: Option<StateField> = None;
    let mut cur = StateField::zeros(op.l, op.n, steps);
    cur.knot_mut(0).copy_from_slice(&v);
    let mut traj = Trajectory {
        l: op.l,
        n: op.n,
        times: vec![0.0],
        snapshots: vec![v.clone()],
        last_period: None,
        periodic_residual: f64::INFINITY,
        periods: 0,
        clipped: 0.0,
        period_norms: vec![sup(&v)],
        max_norm: sup(&v),
        final_state: Vec::new(),
    };
    let mut warned = false;
    for g in 0..total {
        let k = g % steps;
        let t0 = g as f64 * h;
        react_all(sys, &mut v, t0, 0.5 * h, opts.reaction_rtol);
        let ls = prop.step(k, &mut v, &mut buf)?;
        let f = ls.exp();
        v.iter_mut().for_each(|x| *x *= f);
        react_all(sys, &mut v, t0 + 0.5 * h, 0.5 * h, opts.reaction_rtol);
        let mut under: f64 = 0.0;
        for x in v.iter_mut() {
            if *x < 0.0 {
                under = under.max(-*x);
                *x = 0.0;
            }
        }
        if under > CLIP_REPORT && !warned {
            log::warn!("clipped a negative undershoot of {under:e} at t = {:.4}", t0 + h);
            warned = true;
        }
        traj.clipped = traj.clipped.max(under);
        let norm = sup(&v);
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(NlsError::Blowup(format!(
                "sup norm {norm:e} exceeds {BLOWUP_NORM:e} at t = {:.4}",
                t0 + h
            )));
        }
        traj.max_norm = traj.max_norm.max(norm);
        cur.knot_mut(k + 1).copy_from_slice(&v);
        let t1 = (g + 1) as f64 * h;
        if opts.record_every > 0 && (g + 1) % opts.record_every == 0 && (g + 1) % steps != 0 {
            traj.times.push(t1);
            traj.snapshots.push(v.clone());
        }
        if k + 1 == steps {
            traj.periods += 1;
            traj.times.push(t1);
            traj.snapshots.push(v.clone());
            traj.period_norms.push(norm);
            if let Some(p) = &prev {
                traj.periodic_residual = (0..=steps)
                    .map(|j| sup_diff(cur.knot(j), p.knot(j)))
                    .fold(0.0, f64::max);
            }
            let done = opts.stop_residual.is_some_and(|tol| traj.periodic_residual <= tol);
            let mut next = prev.take().unwrap_or_else(|| StateField::zeros(op.l, op.n, steps));
            next.knot_mut(0).copy_from_slice(&v);
            prev = Some(std::mem::replace(&mut cur, next));
            if done {
                break;
            }
        }
    }
    traj.last_period = prev;
    traj.final_state = v;
    Ok(traj)
}

/// Runs whole periods until the Cauchy criterion `tol` holds or `cap` periods pass.
pub fn periodic_attractor(sys: &SemilinearSystem, u0: &[f64], tol: f64, cap: usize) -> Result<Trajectory> {
    let opts = IntegrateOptions {
        stop_residual: Some(tol),
        ..IntegrateOptions::default()
    };
    let tr = integrate_system(sys, u0, cap as f64, &opts)?;
    if tr.periodic_residual > tol {
        log::warn!(
            "periodic attractor not reached within {cap} periods (residual {:e} > {tol:e})",
            tr.periodic_residual
        );
    }
    Ok(tr)
}

/// Sup norm over the knots of a period.
fn field_sup_diff(a: &StateField, b: &StateField) -> f64 {
    (0..=a.steps)
        .map(|k| sup_diff(a.knot(k), b.knot(k)))
        .fold(0.0, f64::max)
}

/// Scalar coefficient tabulated at half-knots, linearly interpolated in time.
#[derive(Debug, Clone)]
struct ScalarTable(MatrixField);

impl ScalarTable {
    fn new(src: &FieldSource, grid: &SpatialGrid, time: &TimeGrid, what: &str) -> Result<Self> {
        if src.l() != 1 {
            return Err(NlsError::invalid(format!("{what} must be a scalar field")));
        }
        let f = sample_field(src, grid, time)?;
        if let Some(v) = f.values.iter().find(|v| !(**v > 0.0)) {
            return Err(NlsError::invalid(format!("{what} must be positive (found {v})")));
        }
        Ok(Self(f))
    }

    fn at(&self, node: usize, t: f64) -> f64 {
        let f = &self.0;
        if f.time_independent {
            return f.values[node];
        }
        let m = 2 * f.steps;
        let u = t.rem_euclid(1.0) * m as f64;
        let j = (u.floor() as usize).min(m - 1);
        let r = u - j as f64;
        (1.0 - r) * f.values[j * f.n + node] + r * f.values[(j + 1) * f.n + node]
    }

    fn sample(&self, s: usize, node: usize) -> f64 {
        self.0.at(s, node)[0]
    }

    fn time_independent(&self) -> bool {
        self.0.time_independent
    }
}

/// `l x l` field assembled blockwise from scalar tables.
fn assemble(
    l: usize,
    grid: &SpatialGrid,
    time: &TimeGrid,
    ti: bool,
    fill: impl Fn(usize, usize, &mut [f64]),
) -> MatrixField {
    let mut f = MatrixField::zeros(l, grid.n, time.steps, ti);
    for s in 0..f.n_samples() {
        for a in 0..grid.n {
            fill(s, a, f.at_mut(s, a));
        }
    }
    f
}

fn table(f: MatrixField) -> FieldSource {
    FieldSource::Table(Arc::new(f))
}

/// Samples `u0(x)` at the grid nodes, node-major.
pub fn sample_initial(u0: &[Expr], grid: &SpatialGrid) -> Result<Vec<f64>> {
    let l = u0.len();
    let mut out = vec![0.0; grid.n * l];
    for (a, x) in grid.nodes.iter().enumerate() {
        let vars = Vars::xyt(x[0], x[1], 0.0);
        for (i, e) in u0.iter().enumerate() {
            out[a * l + i] = e.eval(&vars);
        }
    }
    if out.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(NlsError::invalid("initial data must be finite and nonnegative"));
    }
    Ok(out)
}

fn spectral(op: &DiscreteOperator, adjoint: bool) -> Result<SpectralResult> {
    spectral_bound_op(
        op,
        &SpectralOptions {
            adjoint,
            ..SpectralOptions::default()
        },
    )
}

/// Sign of a threshold, `None` inside the near-critical band.
fn sign(s: f64, band: f64) -> Option<bool> {
    if s > band {
        Some(true)
    } else if s < -band {
        Some(false)
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Vector-host epidemic model

/// Infected hosts `H_i`, uninfected vectors `V_u`, infected vectors `V_i`.
#[derive(Debug, Clone)]
pub struct ZikaParams {
    /// Uninfected host density `H_u(x)`.
    pub h_u: FieldSource,
    pub rho: FieldSource,
    pub sigma1: FieldSource,
    pub sigma2: FieldSource,
    pub beta: FieldSource,
    pub mu: FieldSource,
    pub d1: FieldSource,
    pub d2: FieldSource,
    pub k1: Kernel,
    pub k2: Kernel,
    pub sigma: f64,
    pub m: f64,
    pub tau: f64,
    pub grid: SpatialGrid,
    pub time: TimeGrid,
}

struct ZikaTables {
    h_u: ScalarTable,
    rho: ScalarTable,
    sigma1: ScalarTable,
    sigma2: ScalarTable,
    beta: ScalarTable,
    mu: ScalarTable,
    d1: ScalarTable,
    d2: ScalarTable,
}

impl ZikaParams {
    fn tables(&self) -> Result<ZikaTables> {
        let (g, t) = (&self.grid, &self.time);
        let h_u = ScalarTable::new(&self.h_u, g, t, "H_u")?;
        if !h_u.time_independent() {
            return Err(NlsError::invalid("H_u must not depend on time"));
        }
        for k in [&self.k1, &self.k2] {
            if !k.is_convolution() || !k.is_symmetric(g, 0.0) {
                return Err(NlsError::invalid(
                    "the epidemic model needs symmetric convolution kernels",
                ));
            }
        }
        Ok(ZikaTables {
            h_u,
            rho: ScalarTable::new(&self.rho, g, t, "rho")?,
            sigma1: ScalarTable::new(&self.sigma1, g, t, "sigma1")?,
            sigma2: ScalarTable::new(&self.sigma2, g, t, "sigma2")?,
            beta: ScalarTable::new(&self.beta, g, t, "beta")?,
            mu: ScalarTable::new(&self.mu, g, t, "mu")?,
            d1: ScalarTable::new(&self.d1, g, t, "d1")?,
            d2: ScalarTable::new(&self.d2, g, t, "d2")?,
        })
    }

    /// Scaled-mode operator with `C = I`, `D0 = diag(ds)` and the given `A`.
    fn operator(&self, ds: &[&ScalarTable], kernels: Vec<Kernel>, a: MatrixField) -> Result<DiscreteOperator> {
        let l = ds.len();
        let ti = ds.iter().all(|d| d.time_independent());
        let d0 = assemble(l, &self.grid, &self.time, ti, |s, x, blk| {
            for (i, d) in ds.iter().enumerate() {
                blk[i * l + i] = d.sample(s, x);
            }
        });
        OperatorSpec::scaled(
            DMatrix::identity(l, l),
            table(d0),
            table(a),
            kernels,
            self.sigma,
            self.m,
            self.grid.clone(),
            self.time,
        )
        .with_tau(self.tau)
        .discretize()
    }

    fn ti(list: &[&ScalarTable]) -> bool {
        list.iter().all(|t| t.time_independent())
    }

    /// Linearization of the vector logistic equation: `d2 K + beta`.
    fn l0(&self, t: &ZikaTables) -> Result<DiscreteOperator> {
        let a = assemble(1, &self.grid, &self.time, t.beta.time_independent(), |s, x, blk| {
            blk[0] = t.beta.sample(s, x);
        });
        self.operator(&[&t.d2], vec![self.k2.clone()], a)
    }

    /// Total vector density `V`: `tau V_t = d2 K[V] + beta V - mu V^2`.
    fn vector_system(&self, t: &ZikaTables) -> Result<SemilinearSystem> {
        let mu = t.mu.clone();
        Ok(SemilinearSystem {
            op: self.l0(t)?,
            reaction: Some(Arc::new(move |a, time, u, out| out[0] = -mu.at(a, time) * u[0] * u[0])),
        })
    }

    /// `L1` with `A = [-rho, sigma1 H_u; sigma2 V*, -mu V*]`.
    fn l1(&self, t: &ZikaTables, vstar: &StateField) -> Result<DiscreteOperator> {
        let (n, steps) = (self.grid.n, self.time.steps);
        let mut vs = vec![0.0; (2 * steps + 1) * n];
        for s in 0..=2 * steps {
            interp_periodic(vstar, self.time.sample_time(s), &mut vs[s * n..(s + 1) * n]);
        }
        let a = assemble(2, &self.grid, &self.time, false, |s, x, blk| {
            let v = vs[s * n + x];
            blk[0] = -t.rho.sample(s, x);
            blk[1] = t.sigma1.sample(s, x) * t.h_u.sample(s, x);
            blk[2] = t.sigma2.sample(s, x) * v;
            blk[3] = -t.mu.sample(s, x) * v;
        });
        self.operator(&[&t.d1, &t.d2], vec![self.k1.clone(), self.k2.clone()], a)
    }

    /// Reduced system for `(H_i, V_i)` with total vectors frozen at `V*`.
    fn reduced_system(&self, t: &ZikaTables, vstar: &StateField) -> Result<SemilinearSystem> {
        let op = self.l1(t, vstar)?;
        let sigma2 = t.sigma2.clone();
        Ok(SemilinearSystem {
            op,
            reaction: Some(Arc::new(move |a, time, u, out| {
                out[0] = 0.0;
                out[1] = -sigma2.at(a, time) * u[1] * u[0];
            })),
        })
    }

    /// Full system in the order `(H_i, V_u, V_i)`.
    pub fn system(&self) -> Result<SemilinearSystem> {
        let t = self.tables()?;
        let ti = Self::ti(&[&t.rho, &t.sigma1, &t.beta]);
        let a = assemble(3, &self.grid, &self.time, ti, |s, x, blk| {
            blk[0] = -t.rho.sample(s, x);
            blk[2] = t.sigma1.sample(s, x) * t.h_u.sample(s, x);
            blk[4] = t.beta.sample(s, x);
            blk[5] = t.beta.sample(s, x);
        });
        let op = self.operator(
            &[&t.d1, &t.d2, &t.d2],
            vec![self.k1.clone(), self.k2.clone(), self.k2.clone()],
            a,
        )?;
        let (sigma2, mu) = (t.sigma2.clone(), t.mu.clone());
        Ok(SemilinearSystem {
            op,
            reaction: Some(Arc::new(move |a, time, u, out| {
                let (s2, m) = (sigma2.at(a, time), mu.at(a, time));
                let infect = s2 * u[1] * u[0];
                let total = u[1] + u[2];
                out[0] = 0.0;
                out[1] = -infect - m * total * u[1];
                out[2] = infect - m * total * u[2];
            })),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZikaThresholds {
    pub s_l0: f64,
    /// `None` when `s(L0) <= 0`: no positive vector equilibrium.
    pub s_l1: Option<f64>,
    #[serde(skip)]
    pub v_star: Option<StateField>,
    pub v_star_residual: Option<f64>,
    pub v_star_periods: Option<usize>,
    pub v_star_range: Option<(f64, f64)>,
}

/// `s(L0)`, the periodic vector density `V*` and `s(L1)`.
pub fn zika_thresholds(params: &ZikaParams) -> Result<ZikaThresholds> {
    let t = params.tables()?;
    let s_l0 = spectral(&params.l0(&t)?, false)?.s;
    let mut out = ZikaThresholds {
        s_l0,
        s_l1: None,
        v_star: None,
        v_star_residual: None,
        v_star_periods: None,
        v_star_range: None,
    };
    if s_l0 <= 0.0 {
        return Ok(out);
    }
    let sys = params.vector_system(&t)?;
    let v0 = vec![1.0; params.grid.n];
    let tr = periodic_attractor(&sys, &v0, ATTRACTOR_TOL, 4 * ATTRACTOR_CAP)?;
    let vstar = tr
        .last_period
        .clone()
        .ok_or_else(|| NlsError::precondition("no complete period integrated"))?;
    out.s_l1 = Some(spectral(&params.l1(&t, &vstar)?, false)?.s);
    out.v_star_residual = Some(tr.periodic_residual);
    out.v_star_periods = Some(tr.periods);
    out.v_star_range = Some((vstar.min(), vstar.max_abs()));
    out.v_star = Some(vstar);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZikaVerdict {
    Endemic,
    VectorOnly,
    Extinction,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZikaReport {
    pub verdict: ZikaVerdict,
    pub thresholds: ZikaThresholds,
    pub periods: usize,
    /// Endemic: final-period sup distance to `(H*, V* - V_i*, V_i*)`.
    pub attractor_distance: Option<f64>,
    pub attractor_residual: Option<f64>,
    /// `sup |(H_i, V_i)|` at the final time.
    pub infected_norm: f64,
    /// Final-period sup distance of `V_u` to `V*`.
    pub vu_distance: Option<f64>,
    /// `int (H_i + V_u + V_i)` at the final time.
    pub total_mass: f64,
    /// Evidence meets the verdict's tolerance.
    pub evidence_ok: bool,
    pub clipped: f64,
    /// State at the final time.
    #[serde(skip)]
    pub final_state: Vec<f64>,
}

/// Evidence tolerances: endemic distance, vector-only infected norm, extinction mass.
pub const ZIKA_EVIDENCE: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Verdict from the threshold signs, with long-time evidence from the
/// trajectory of `u0` over `periods` periods.
pub fn classify_zika(params: &ZikaParams, u0: &[f64], periods: usize) -> Result<ZikaReport> {
    let th = zika_thresholds(params)?;
    let verdict = match sign(th.s_l0, NEAR_CRITICAL) {
        None => ZikaVerdict::Inconclusive,
        Some(false) => ZikaVerdict::Extinction,
        Some(true) => match th.s_l1.and_then(|s| sign(s, NEAR_CRITICAL)) {
            Some(true) => ZikaVerdict::Endemic,
            Some(false) => ZikaVerdict::VectorOnly,
            None => ZikaVerdict::Inconclusive,
        },
    };
    let sys = params.system()?;
    let tr = integrate_system(&sys, u0, periods as f64, &IntegrateOptions::default())?;
    let last = tr
        .last_period
        .as_ref()
        .ok_or_else(|| NlsError::invalid("at least one period is needed"))?;
    let fin = &tr.final_state;
    let infected_norm = fin.chunks(3).fold(0.0f64, |m, u| m.max(u[0].abs()).max(u[2].abs()));
    let total_mass: f64 = fin
        .chunks(3)
        .zip(&params.grid.weights)
        .map(|(u, w)| w * (u[0] + u[1] + u[2]))
        .sum();
    let steps = params.time.steps;
    let vu_distance = th.v_star.as_ref().map(|vs| {
        (0..=steps)
            .map(|k| {
                last.knot(k)
                    .chunks(3)
                    .zip(vs.knot(k))
                    .fold(0.0f64, |m, (u, v)| m.max((u[1] - v).abs()))
            })
            .fold(0.0, f64::max)
    });
    let mut report = ZikaReport {
        verdict,
        periods: tr.periods,
        attractor_distance: None,
        attractor_residual: None,
        infected_norm,
        vu_distance,
        total_mass,
        evidence_ok: false,
        clipped: tr.clipped,
        thresholds: th,
        final_state: fin.clone(),
    };
    match verdict {
        ZikaVerdict::Endemic => {
            let t = params.tables()?;
            let vstar = report.thresholds.v_star.as_ref().expect("V* exists when s(L0) > 0");
            let red = params.reduced_system(&t, vstar)?;
            let start: Vec<f64> = fin.chunks(3).flat_map(|u| [u[0].max(1e-3), u[2].max(1e-3)]).collect();
            let att = periodic_attractor(&red, &start, ATTRACTOR_TOL, ATTRACTOR_CAP)?;
            let star = att.last_period.as_ref().expect("attractor period");
            let d = (0..=steps)
                .map(|k| {
                    last.knot(k)
                        .chunks(3)
                        .zip(star.knot(k).chunks(2))
                        .zip(vstar.knot(k))
                        .fold(0.0f64, |m, ((u, hv), v)| {
                            m.max((u[0] - hv[0]).abs())
                                .max((u[1] - (v - hv[1])).abs())
                                .max((u[2] - hv[1]).abs())
                        })
                })
                .fold(0.0, f64::max);
            report.attractor_distance = Some(d);
            report.attractor_residual = Some(att.periodic_residual);
            report.evidence_ok = d <= ZIKA_EVIDENCE[0];
        }
        ZikaVerdict::VectorOnly => report.evidence_ok = infected_norm <= ZIKA_EVIDENCE[1],
        ZikaVerdict::Extinction => report.evidence_ok = total_mass <= ZIKA_EVIDENCE[2],
        ZikaVerdict::Inconclusive => {}
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Stem cell model

/// `tau Q_i' = sum_j c_ij beta_j P_j[Q_j] - Q_i (beta_i + kappa_i Q_i^n)`.
#[derive(Debug, Clone)]
pub struct StemCellParams {
    pub c: DMatrix<f64>,
    pub beta: Vec<FieldSource>,
    pub kappa: Vec<FieldSource>,
    pub kernels: Vec<Kernel>,
    /// Removal exponent: `0` or above `1`.
    pub n: f64,
    pub tau: f64,
    /// Constant added to the linear diagonal.
    pub shift: f64,
    pub grid: SpatialGrid,
    pub time: TimeGrid,
}

impl StemCellParams {
    pub fn l(&self) -> usize {
        self.c.nrows()
    }

    fn check(&self) -> Result<()> {
        let l = self.l();
        if self.c.ncols() != l || self.beta.len() != l || self.kappa.len() != l || self.kernels.len() != l {
            return Err(NlsError::ShapeMismatch {
                what: "stem cell coefficients",
                expected: l,
                got: self.beta.len(),
            });
        }
        if !(self.n == 0.0 || self.n > 1.0) {
            return Err(NlsError::invalid(format!(
                "removal exponent n = {} is outside {{0}} U (1, inf)",
                self.n
            )));
        }
        if self.c.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(NlsError::invalid("coupling matrix entries must be nonnegative"));
        }
        if !is_irreducible(self.c.transpose().as_slice(), l) {
            return Err(NlsError::invalid("D = (c_ij beta_j) must be irreducible"));
        }
        Ok(())
    }

    fn tables(&self) -> Result<(Vec<ScalarTable>, Vec<ScalarTable>)> {
        let b = self
            .beta
            .iter()
            .map(|s| ScalarTable::new(s, &self.grid, &self.time, "beta"))
            .collect::<Result<_>>()?;
        let k = self
            .kappa
            .iter()
            .map(|s| ScalarTable::new(s, &self.grid, &self.time, "kappa"))
            .collect::<Result<_>>()?;
        Ok((b, k))
    }

    /// `L_n = -tau d/dt + D P - alpha`, `alpha = beta + kappa` for `n = 0`
    /// and `beta` otherwise.
    pub fn linear_operator(&self) -> Result<DiscreteOperator> {
        self.check()?;
        let l = self.l();
        let (beta, kappa) = self.tables()?;
        let ti_b = beta.iter().all(|t| t.time_independent());
        let with_kappa = self.n == 0.0;
        let ti_a = ti_b && (!with_kappa || kappa.iter().all(|t| t.time_independent()));
        let c = self.c.clone();
        let d = assemble(l, &self.grid, &self.time, ti_b, |s, x, blk| {
            for i in 0..l {
                for j in 0..l {
                    blk[i * l + j] = c[(i, j)] * beta[j].sample(s, x);
                }
            }
        });
        let a = assemble(l, &self.grid, &self.time, ti_a, |s, x, blk| {
            for i in 0..l {
                let k = if with_kappa { kappa[i].sample(s, x) } else { 0.0 };
                blk[i * l + i] = -beta[i].sample(s, x) - k + self.shift;
            }
        });
        let mut spec = OperatorSpec::raw(table(d), table(a), self.kernels.clone(), self.grid.clone(), self.time);
        spec.tau = self.tau;
        spec.discretize()
    }

    pub fn system(&self) -> Result<SemilinearSystem> {
        let op = self.linear_operator()?;
        let reaction: Option<ReactionFn> = if self.n == 0.0 {
            None
        } else {
            let (_, kappa) = self.tables()?;
            let n = self.n;
            Some(Arc::new(move |a, t, u, out| {
                for (i, (o, q)) in out.iter_mut().zip(u).enumerate() {
                    *o = -kappa[i].at(a, t) * q * q.max(0.0).powf(n);
                }
            }))
        };
        Ok(SemilinearSystem { op, reaction })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemCellVerdict {
    Growth,
    Neutral,
    Decay,
    Persistence,
    Extinction,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemCellReport {
    pub n: f64,
    pub s: f64,
    pub principal: bool,
    pub verdict: StemCellVerdict,
    pub periods: usize,
    /// `tau ln(|Q(T)| / |Q(T - 1)|)`.
    pub observed_rate: Option<f64>,
    /// `<Q0, psi> / <phi0, psi>`.
    pub projection: Option<f64>,
    /// Final-period relative sup distance to `c phi`.
    pub neutral_distance: Option<f64>,
    /// Final-period sup distance between the attractors reached from each initial datum.
    pub attractor_distance: Option<f64>,
    pub attractor_residual: Option<f64>,
    pub final_norm: f64,
    pub blowup: bool,
    pub evidence_ok: bool,
    /// Final state from the first initial datum; empty after blowup.
    #[serde(skip)]
    pub final_state: Vec<f64>,
}

/// Relative tolerance on the observed exponential rate.
pub const RATE_TOL: f64 = 0.05;
pub const NEUTRAL_TOL: f64 = 1e-3;
pub const PERSIST_TOL: f64 = 1e-4;
/// Cauchy tolerance for the persistent attractor.
pub const PERSIST_RESIDUAL: f64 = 1e-6;

fn observed_rate(tr: &Trajectory, tau: f64) -> Option<f64> {
    let k = tr.period_norms.len();
    (k >= 2 && tr.period_norms[k - 2] > 0.0 && tr.period_norms[k - 1] > 0.0)
        .then(|| tau * (tr.period_norms[k - 1] / tr.period_norms[k - 2]).ln())
}

/// Verdict from `s(L_n)` and evidence from the trajectories of `q0s`.
pub fn classify_stemcell(params: &StemCellParams, q0s: &[Vec<f64>], periods: usize) -> Result<StemCellReport> {
    if q0s.is_empty() {
        return Err(NlsError::invalid("at least one initial datum is needed"));
    }
    let sys = params.system()?;
    let op = &sys.op;
    let spec = spectral(op, params.n == 0.0)?;
    let s = spec.s;
    let principal = spec.verdict.is_principal_eigenvalue;
    let mut rep = StemCellReport {
        n: params.n,
        s,
        principal,
        verdict: StemCellVerdict::Inconclusive,
        periods: 0,
        observed_rate: None,
        projection: None,
        neutral_distance: None,
        attractor_distance: None,
        attractor_residual: None,
        final_norm: 0.0,
        blowup: false,
        evidence_ok: false,
        final_state: Vec::new(),
    };
    let opts = IntegrateOptions::default();
    let q0 = &q0s[0];
    if params.n == 0.0 {
        match sign(s, NEAR_CRITICAL) {
            Some(grow) => {
                rep.verdict = if grow {
                    StemCellVerdict::Growth
                } else {
                    StemCellVerdict::Decay
                };
                match integrate_system(&sys, q0, periods as f64, &opts) {
                    Ok(tr) => {
                        rep.periods = tr.periods;
                        rep.final_norm = sup(&tr.final_state);
                        rep.final_state = tr.final_state.clone();
                        rep.observed_rate = observed_rate(&tr, params.tau);
                    }
                    Err(NlsError::Blowup(msg)) if grow => {
                        log::info!("growth confirmed: {msg}");
                        rep.blowup = true;
                    }
                    Err(e) => return Err(e),
                }
                rep.evidence_ok = rep.blowup || rep.observed_rate.is_some_and(|r| (r - s).abs() <= RATE_TOL * s.abs());
            }
            None if principal => {
                rep.verdict = StemCellVerdict::Neutral;
                let phi0 = spec.eigenfunction.knot(0).to_vec();
                let psi = spec.adjoint_eigenfunction.as_ref().expect("adjoint requested");
                let psi0 = psi.knot(0);
                // Left eigenvector of the discrete period map: plain dot pairing.
                let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                let c = dot(q0, psi0) / dot(&phi0, psi0);
                let tr = integrate_system(&sys, q0, periods as f64, &opts)?;
                let phi = integrate_system(&sys, &phi0, 1.0, &opts)?;
                let (lq, lp) = (tr.last_period.as_ref().unwrap(), phi.last_period.as_ref().unwrap());
                let scale = c.abs() * (0..=lp.steps).map(|k| sup(lp.knot(k))).fold(0.0, f64::max);
                let d = (0..=lq.steps)
                    .map(|k| {
                        lq.knot(k)
                            .iter()
                            .zip(lp.knot(k))
                            .fold(0.0f64, |m, (q, p)| m.max((q - c * p).abs()))
                    })
                    .fold(0.0, f64::max)
                    / scale;
                rep.periods = tr.periods;
                rep.final_norm = sup(&tr.final_state);
                rep.final_state = tr.final_state.clone();
                rep.projection = Some(c);
                rep.neutral_distance = Some(d);
                rep.evidence_ok = d <= NEUTRAL_TOL;
            }
            None => {}
        }
        return Ok(rep);
    }
    match sign(s, NEAR_CRITICAL) {
        Some(true) => {
            rep.verdict = StemCellVerdict::Persistence;
            let runs = q0s
                .iter()
                .map(|q| periodic_attractor(&sys, q, PERSIST_RESIDUAL, ATTRACTOR_CAP.max(periods)))
                .collect::<Result<Vec<_>>>()?;
            let first = runs[0].last_period.as_ref().unwrap();
            let d = runs[1..]
                .iter()
                .map(|r| field_sup_diff(first, r.last_period.as_ref().unwrap()))
                .fold(0.0, f64::max);
            let res = runs.iter().map(|r| r.periodic_residual).fold(0.0, f64::max);
            rep.periods = runs.iter().map(|r| r.periods).max().unwrap_or(0);
            rep.final_norm = sup(&runs[0].final_state);
            rep.final_state = runs[0].final_state.clone();
            rep.attractor_distance = Some(d);
            rep.attractor_residual = Some(res);
            rep.evidence_ok = q0s.len() >= 2 && d <= PERSIST_TOL && res <= PERSIST_RESIDUAL && first.min() > 0.0;
        }
        Some(false) => {
            rep.verdict = StemCellVerdict::Extinction;
            let tr = integrate_system(&sys, q0, periods as f64, &opts)?;
            rep.periods = tr.periods;
            rep.final_norm = sup(&tr.final_state);
            rep.final_state = tr.final_state.clone();
            rep.observed_rate = observed_rate(&tr, params.tau);
            rep.evidence_ok = rep.final_norm < 1e-6 * sup(q0).max(f64::MIN_POSITIVE);
        }
        None => {}
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Nonlocal to local convergence of initial value problems

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvpErrorRow {
    pub sigma: f64,
    /// `sup_k |u_sigma(t_k) - u(t_k)|_inf`.
    pub error: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvpErrorTable {
    pub rows: Vec<IvpErrorRow>,
    /// Least-squares slope of `ln error` against `ln sigma`.
    pub exponent: Option<f64>,
    pub strictly_decreasing: bool,
    pub local_sup: f64,
}

impl IvpErrorTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("sigma,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.16e},{}\n",
                r.sigma,
                r.error.map(|e| format!("{e:.16e}")).unwrap_or_default()
            ));
        }
        out
    }
}

/// Multilinear interpolation of interior-grid values (zero on the boundary)
/// at the nodes of `target`.
fn interpolate_dirichlet(values: &[f64], l: usize, interior: &SpatialGrid, target: &SpatialGrid) -> Vec<f64> {
    let dim = interior.dim;
    let coord = |d: usize, x: f64| -> (isize, f64) {
        let u = (x - interior.bounds.lower[d]) / interior.spacing[d] - 1.0;
        let i = u.floor();
        (i as isize, u - i)
    };
    let at = |idx: &[isize], i: usize| -> f64 {
        if (0..dim).any(|d| idx[d] < 0 || idx[d] >= interior.shape[d] as isize) {
            return 0.0;
        }
        let flat = if dim == 1 {
            idx[0] as usize
        } else {
            idx[0] as usize * interior.shape[1] + idx[1] as usize
        };
        values[flat * l + i]
    };
    let mut out = vec![0.0; target.n * l];
    for (a, x) in target.nodes.iter().enumerate() {
        let c: Vec<(isize, f64)> = (0..dim).map(|d| coord(d, x[d])).collect();
        for i in 0..l {
            let v = if dim == 1 {
                (1.0 - c[0].1) * at(&[c[0].0], i) + c[0].1 * at(&[c[0].0 + 1], i)
            } else {
                let mut acc = 0.0;
                for (dx, wx) in [(0, 1.0 - c[0].1), (1, c[0].1)] {
                    for (dy, wy) in [(0, 1.0 - c[1].1), (1, c[1].1)] {
                        acc += wx * wy * at(&[c[0].0 + dx, c[1].0 + dy], i);
                    }
                }
                acc
            };
            out[a * l + i] = v;
        }
    }
    out
}

/// Knot states over `[0, t_end]`, the initial state included.
fn knot_states(sys: &SemilinearSystem, u0: &[f64], t_end: f64) -> Result<Vec<Vec<f64>>> {
    let tr = integrate_system(
        sys,
        u0,
        t_end,
        &IntegrateOptions {
            record_every: 1,
            ..IntegrateOptions::default()
        },
    )?;
    Ok(tr.snapshots)
}

/// Sup-in-time max-norm distance between the nonlocal solution at each
/// `sigma` (exponent `m = 2`) and the local Dirichlet solution, both from `u0`.
pub fn nonlocal_to_local_ivp_error(
    base: &OperatorSpec,
    u0: &[Expr],
    sigmas: &[f64],
    t_end: f64,
) -> Result<IvpErrorTable> {
    let c = match &base.dispersal {
        Dispersal::Scaled { c, .. } => c,
        Dispersal::Raw(_) => return Err(NlsError::invalid("the local limit needs a scaled-mode spec")),
    };
    if (base.m - 2.0).abs() > 1e-12 {
        return Err(NlsError::invalid(format!(
            "the local limit needs m = 2, got {}",
            base.m
        )));
    }
    if (0..c.nrows()).any(|i| (0..c.ncols()).any(|j| i != j && c[(i, j)] != 0.0)) {
        return Err(NlsError::invalid("the local limit needs a diagonal coupling matrix"));
    }
    if base
        .kernels
        .iter()
        .any(|k| !k.is_convolution() || !k.is_symmetric(&base.grid, 0.0))
    {
        return Err(NlsError::invalid("the local limit needs symmetric convolution kernels"));
    }
    if u0.len() != base.l {
        return Err(NlsError::ShapeMismatch {
            what: "initial data",
            expected: base.l,
            got: u0.len(),
        });
    }
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(NlsError::invalid("sigma values must be positive"));
    }
    let v0 = sample_initial(u0, &base.grid)?;
    let lp = local_problem(base)?;
    let interior = lp.grid()?;
    let w0 = sample_initial(u0, &interior)?;
    let local = SemilinearSystem {
        op: lp.discretize()?,
        reaction: None,
    };
    let reference: Vec<Vec<f64>> = knot_states(&local, &w0, t_end)?
        .iter()
        .map(|w| interpolate_dirichlet(w, base.l, &interior, &base.grid))
        .collect();
    let local_sup = reference.iter().map(|r| sup(r)).fold(0.0, f64::max);
    let h = base.grid.h();
    let radius = base
        .kernels
        .iter()
        .filter_map(support_radius)
        .fold(f64::INFINITY, f64::min);
    let rows: Vec<IvpErrorRow> = sigmas
        .par_iter()
        .map(|&sig| {
            let run = || -> Result<f64> {
                if sig * radius < 2.0 * h {
                    return Err(NlsError::Resolution(format!(
                        "kernel support {:.3e} spans fewer than 2 grid cells (h = {h:.3e}); refine the grid",
                        sig * radius
                    )));
                }
                let sys = SemilinearSystem {
                    op: base.clone().with_sigma(sig).discretize()?,
                    reaction: None,
                };
                let states = knot_states(&sys, &v0, t_end)?;
                Ok(states
                    .iter()
                    .zip(&reference)
                    .map(|(u, r)| sup_diff(u, r))
                    .fold(0.0, f64::max))
            };
            match run() {
                Ok(e) => IvpErrorRow {
                    sigma: sig,
                    error: Some(e),
                    failure: None,
                },
                Err(e) => IvpErrorRow {
                    sigma: sig,
                    error: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.error.filter(|e| *e > 0.0).map(|e| (r.sigma.ln(), e.ln())))
        .collect();
    let exponent = (pts.len() >= 2).then(|| {
        let k = pts.len() as f64;
        let (mx, my) = (
            pts.iter().map(|p| p.0).sum::<f64>() / k,
            pts.iter().map(|p| p.1).sum::<f64>() / k,
        );
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    // Order by decreasing sigma before checking the decrease.
    let mut ordered: Vec<(f64, Option<f64>)> = rows.iter().map(|r| (r.sigma, r.error)).collect();
    ordered.sort_by(|a, b| b.0.total_cmp(&a.0));
    let strictly_decreasing =
        ordered.iter().all(|r| r.1.is_some()) && ordered.windows(2).all(|w| w[1].1.unwrap() < w[0].1.unwrap());
    Ok(IvpErrorTable {
        rows,
        exponent,
        strictly_decreasing,
        local_sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{operator_preset, stemcell_preset, zika_initial, zika_preset};

    fn scalar(s: &str) -> FieldSource {
        FieldSource::scalar(Expr::parse(s).unwrap())
    }

    #[test]
    fn zero_stays_zero() {
        let p = zika_preset("Z-(i)", 24, 16).unwrap();
        let sys = p.system().unwrap();
        let tr = integrate_system(&sys, &vec![0.0; 72], 2.0, &IntegrateOptions::default()).unwrap();
        assert!(tr.final_state.iter().all(|v| *v == 0.0));
        assert_eq!(tr.periods, 2);
    }

    #[test]
    fn rejects_negative_initial_data() {
        let p = zika_preset("Z-(i)", 10, 8).unwrap();
        let mut u0 = zika_initial(&p.grid);
        u0[4] = -1e-3;
        assert!(integrate_system(&p.system().unwrap(), &u0, 1.0, &IntegrateOptions::default()).is_err());
    }

    #[test]
    fn linear_decay_closed_form() {
        // Q' = int Q - 3Q with Q0 = 1 gives Q = exp(-2t).
        let (p, _) = stemcell_preset("S-n0-decay", 30, 40).unwrap();
        let sys = p.system().unwrap();
        let opts = IntegrateOptions {
            record_every: 10,
            ..IntegrateOptions::default()
        };
        let tr = integrate_system(&sys, &vec![1.0; 30], 3.0, &opts).unwrap();
        for (t, snap) in tr.times.iter().zip(&tr.snapshots) {
            let exact = (-2.0 * t).exp();
            for v in snap {
                assert!((v - exact).abs() <= 1e-8 * exact, "t = {t}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn zika_positivity() {
        let p = zika_preset("Z-(i)", 30, 40).unwrap();
        let u0 = zika_initial(&p.grid);
        let tr = integrate_system(&p.system().unwrap(), &u0, 5.0, &IntegrateOptions::default()).unwrap();
        assert!(tr.clipped <= 1e-12, "{}", tr.clipped);
        assert!(tr.final_state.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn logistic_vector_density_near_one() {
        let mut p = zika_preset("Z-(i)", 60, 40).unwrap();
        p.beta = scalar("1");
        p.d2 = scalar("0.02");
        let th = zika_thresholds(&p).unwrap();
        let vs = th.v_star.unwrap();
        for k in 0..=vs.steps {
            for (a, x) in p.grid.nodes.iter().enumerate() {
                if (0.25..=0.75).contains(&x[0]) {
                    assert!((vs.knot(k)[a] - 1.0).abs() <= 0.02, "{}", vs.knot(k)[a]);
                }
            }
        }
    }

    #[test]
    fn weak_recruitment_means_extinction() {
        let mut p = zika_preset("Z-(i)", 30, 40).unwrap();
        p.beta = scalar("0.03 + 0.01*sin(2*pi*t)");
        let th = zika_thresholds(&p).unwrap();
        assert!(th.s_l0 < 0.0);
        assert!(th.s_l1.is_none() && th.v_star.is_none());
    }

    #[test]
    fn infection_threshold_crossing() {
        let base = zika_preset("Z-(i)", 30, 40).unwrap();
        let vstar = zika_thresholds(&base).unwrap().v_star.unwrap();
        let s_l1 = |theta: f64| {
            let mut p = base.clone();
            p.sigma1 = scalar(&format!("{}", 2.0 * theta));
            let pt = p.tables().unwrap();
            spectral(&p.l1(&pt, &vstar).unwrap(), false).unwrap().s
        };
        let (mut lo, mut hi) = (0.01, 1.0);
        let (s_lo, s_hi) = (s_l1(lo), s_l1(hi));
        assert!(s_lo < 0.0 && s_hi > 0.0, "{s_lo} {s_hi}");
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let s = s_l1(mid);
            assert!(s >= s_lo - 1e-9 && s <= s_hi + 1e-9);
            if s < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(s_l1(lo) < 0.0 && s_l1(hi) >= 0.0);
        assert!((s_l1(hi) - s_l1(lo)).abs() < 1e-6);
    }

    #[test]
    fn removal_exponent_range() {
        let (mut p, _) = stemcell_preset("S-n2-persist", 10, 8).unwrap();
        for n in [0.5, 1.0, -1.0, f64::NAN] {
            p.n = n;
            assert!(p.system().is_err(), "n = {n}");
        }
        p.n = 1.5;
        assert!(p.system().is_ok());
    }

    #[test]
    fn reducible_coupling_rejected() {
        let (mut p, _) = stemcell_preset("S-n2-persist", 10, 8).unwrap();
        p.c[(0, 1)] = 0.0;
        assert!(p.system().is_err());
    }

    #[test]
    fn order_preserved() {
        let (p, _) = stemcell_preset("S-n2-persist", 30, 40).unwrap();
        let sys = p.system().unwrap();
        let lo: Vec<f64> = (0..60).map(|k| 0.1 + 0.01 * (k % 7) as f64).collect();
        let hi: Vec<f64> = lo.iter().enumerate().map(|(k, v)| v + 0.5 * (k % 3) as f64).collect();
        let opts = IntegrateOptions {
            record_every: 5,
            ..IntegrateOptions::default()
        };
        let a = integrate_system(&sys, &lo, 3.0, &opts).unwrap();
        let b = integrate_system(&sys, &hi, 3.0, &opts).unwrap();
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            assert!(sa.iter().zip(sb).all(|(x, y)| *x <= *y + 1e-12));
        }
    }

    #[test]
    fn attractor_independent_of_start() {
        let (p, q0s) = stemcell_preset("S-n2-persist", 30, 40).unwrap();
        let rep = classify_stemcell(&p, &q0s, 200).unwrap();
        assert_eq!(rep.verdict, StemCellVerdict::Persistence);
        assert!(rep.evidence_ok, "{rep:?}");
        assert_eq!(rep.final_state.len(), 60);
    }

    #[test]
    fn decay_rate_observed() {
        let (p, q0s) = stemcell_preset("S-n0-decay", 30, 40).unwrap();
        let rep = classify_stemcell(&p, &q0s, 10).unwrap();
        assert_eq!(rep.verdict, StemCellVerdict::Decay);
        // The non-constant part of 1 + x decays like exp(-3t).
        assert!((rep.observed_rate.unwrap() + 2.0).abs() < 1e-4, "{rep:?}");
    }

    fn ivp_base(n: usize) -> OperatorSpec {
        let mut spec = operator_preset("SCEN-E", n, 100).unwrap();
        spec.dispersal = Dispersal::Scaled {
            c: nalgebra::DMatrix::from_element(1, 1, 1.0),
            d0: FieldSource::constant(&[&[1.0]]),
        };
        spec.with_a(scalar("1 + 0.5*sin(2*pi*t)"))
    }

    #[test]
    fn zero_data_zero_error() {
        let table = nonlocal_to_local_ivp_error(&ivp_base(100), &[Expr::constant(0.0)], &[0.2, 0.1], 0.5).unwrap();
        assert!(table.rows.iter().all(|r| r.error == Some(0.0)));
    }

    #[test]
    fn ivp_error_grid_stable() {
        let u0 = [Expr::parse("sin(pi*x)").unwrap()];
        let coarse = nonlocal_to_local_ivp_error(&ivp_base(100), &u0, &[0.2, 0.1], 0.5).unwrap();
        let fine = nonlocal_to_local_ivp_error(&ivp_base(200), &u0, &[0.2, 0.1], 0.5).unwrap();
        assert!(coarse.strictly_decreasing && fine.strictly_decreasing);
        for (a, b) in coarse.rows.iter().zip(&fine.rows) {
            let (a, b) = (a.error.unwrap(), b.error.unwrap());
            assert!((a - b).abs() < 0.2 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn ivp_refuses_unresolved_kernel() {
        let u0 = [Expr::parse("sin(pi*x)").unwrap()];
        let table = nonlocal_to_local_ivp_error(&ivp_base(20), &u0, &[0.2, 0.05], 0.2).unwrap();
        assert!(table.rows[0].error.is_some());
        assert!(table.rows[1].failure.is_some());
    }
}
