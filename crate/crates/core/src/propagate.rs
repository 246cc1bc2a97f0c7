//! Period map `V(1, 0)` of `tau u_t = G(t) u` and its adjoint.

use std::borrow::Cow;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlsError, Result};
use crate::linalg::{expm_metzler, expm_small, ScaledMatrix};
use crate::operator::{DiscreteOperator, StateField};

/// Memory budget for cached per-step matrices.
const STEP_CACHE_BYTES: usize = 384 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    /// Exact for autonomous problems; when only the local part depends on
    /// time, fourth-order splitting (Strang if the nonlocal part is stiff);
    /// Crank-Nicolson otherwise.
    #[default]
    Auto,
    /// `exp(G / tau)`; autonomous problems only.
    Exact,
    /// Exponential splitting of the nonlocal and local parts.
    Strang,
    /// Fourth-order triple-jump composition of the splitting.
    Split4,
    CrankNicolson,
    Rk4,
}

enum Plan {
    Exact {
        period: ScaledMatrix,
        g: DMatrix<f64>,
        step: OnceLock<ScaledMatrix>,
    },
    /// Each step is a sequence of substeps `H E_c H`.
    Split {
        mats: Vec<ScaledMatrix>,
        stages: Vec<Stage>,
    },
    /// Dense one-step maps (Crank-Nicolson or RK4), cached when they fit.
    Steps { cache: Option<Vec<DMatrix<f64>>> },
}

struct Stage {
    mat: usize,
    /// `[k][node * l * l]` half-substep local propagators, one set when the
    /// local part is autonomous.
    halves: Vec<Vec<f64>>,
}

/// Largest `h / tau |K|_inf` for which the backward substep of the
/// fourth-order composition is used by `Auto`.
const SPLIT4_STIFFNESS: f64 = 2.0;

const TRIPLE_JUMP: f64 = 1.351_207_191_959_657_6;

/// Periodic cubic interpolation of the local part through the four half-knot
/// samples around piece `j` (between samples `j` and `j + 1`), at offset `r`.
fn local_cubic_piece(op: &DiscreteOperator, node: usize, j: isize, r: f64, out: &mut [f64]) {
    let m = 2 * op.steps() as isize;
    let w = [
        -r * (r - 1.0) * (r - 2.0) / 6.0,
        (r + 1.0) * (r - 1.0) * (r - 2.0) / 2.0,
        -(r + 1.0) * r * (r - 2.0) / 2.0,
        (r + 1.0) * r * (r - 1.0) / 6.0,
    ];
    out.iter_mut().for_each(|v| *v = 0.0);
    for (o, wo) in w.iter().enumerate() {
        let idx = (j - 1 + o as isize).rem_euclid(m) as usize;
        for (v, b) in out.iter_mut().zip(op.local.at(idx, node)) {
            *v += wo * b;
        }
    }
}

/// Mean of the interpolated local part over `[t0, t1]` (either orientation),
/// exact for the piecewise cubic interpolant.
fn local_mean(op: &DiscreteOperator, node: usize, t0: f64, t1: f64, out: &mut [f64]) {
    if op.local.time_independent {
        out.copy_from_slice(op.local.at(0, node));
        return;
    }
    let m = 2.0 * op.steps() as f64;
    let (a, b) = if t0 <= t1 { (t0 * m, t1 * m) } else { (t1 * m, t0 * m) };
    let g = 0.5 / 3f64.sqrt();
    let mut buf = vec![0.0; out.len()];
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut lo = a;
    while lo < b - 1e-12 {
        let j = (lo + 1e-12).floor();
        let hi = (j + 1.0).min(b);
        let len = hi - lo;
        for q in [0.5 - g, 0.5 + g] {
            local_cubic_piece(op, node, j as isize, lo + q * len - j, &mut buf);
            for (o, v) in out.iter_mut().zip(&buf) {
                *o += 0.5 * len * v;
            }
        }
        lo = hi;
    }
    let span = (b - a).max(f64::MIN_POSITIVE);
    out.iter_mut().for_each(|v| *v /= span);
}

/// Half-substep propagators `exp(c h / (2 tau) Bbar)` over `[t0, t0 + c h]`,
/// `Bbar` the mean of the interpolated local part.
fn substep_halves(op: &DiscreteOperator, t0: f64, ch: f64) -> Vec<f64> {
    let (l, ll) = (op.l, op.l * op.l);
    let mut out = vec![0.0; op.n * ll];
    let mut avg = vec![0.0; ll];
    for a in 0..op.n {
        local_mean(op, a, t0, t0 + ch, &mut avg);
        expm_small(&avg, l, 0.5 * ch / op.tau, &mut out[a * ll..(a + 1) * ll]);
    }
    out
}

/// Discrete evolution operator over one period.
pub struct Propagator<'a> {
    op: &'a DiscreteOperator,
    kind: StepperKind,
    plan: Plan,
}

fn inf_normalize(v: &mut [f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m > 0.0 && m.is_finite() {
        v.iter_mut().for_each(|x| *x /= m);
        m.ln()
    } else {
        0.0
    }
}

fn matvec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let r = m * DVector::from_column_slice(v);
    out.copy_from_slice(r.as_slice());
}

fn tr_matvec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let r = m.tr_mul(&DVector::from_column_slice(v));
    out.copy_from_slice(r.as_slice());
}

impl<'a> Propagator<'a> {
    pub fn new(op: &'a DiscreteOperator, kind: StepperKind, cap: usize) -> Result<Self> {
        let kind = match kind {
            StepperKind::Auto if op.time_independent() => StepperKind::Exact,
            StepperKind::Auto if op.nonlocal_time_independent() => {
                let k = op.assemble_nonlocal(0, cap)?;
                let norm = k
                    .row_iter()
                    .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                if norm / (op.steps() as f64 * op.tau) <= SPLIT4_STIFFNESS {
                    StepperKind::Split4
                } else {
                    StepperKind::Strang
                }
            }
            StepperKind::Auto => StepperKind::CrankNicolson,
            k => k,
        };
        let h = 1.0 / op.steps() as f64;
        let tau = op.tau;
        let plan = match kind {
            StepperKind::Exact => {
                if !op.time_independent() {
                    return Err(NlsError::invalid("exact stepping needs an autonomous operator"));
                }
                let g = op.assemble_dense(0, cap)?;
                let period = expm_metzler(&g, 1.0 / tau);
                Plan::Exact {
                    period,
                    g,
                    step: OnceLock::new(),
                }
            }
            StepperKind::Strang => {
                if !op.nonlocal_time_independent() {
                    return Err(NlsError::invalid("splitting needs a time-independent nonlocal part"));
                }
                let k = op.assemble_nonlocal(0, cap)?;
                let e = expm_metzler(&k, h / tau);
                let l = op.l;
                let ll = l * l;
                let nsets = if op.local.time_independent { 1 } else { op.steps() };
                let halves: Vec<Vec<f64>> = (0..nsets)
                    .into_par_iter()
                    .map(|k| {
                        let mut out = vec![0.0; op.n * ll];
                        let mut avg = vec![0.0; ll];
                        for a in 0..op.n {
                            if op.local.time_independent {
                                avg.copy_from_slice(op.local.at(0, a));
                            } else {
                                let (b0, b1, b2) = (
                                    op.local.at(2 * k, a),
                                    op.local.at(2 * k + 1, a),
                                    op.local.at(2 * k + 2, a),
                                );
                                for i in 0..ll {
                                    avg[i] = (b0[i] + 4.0 * b1[i] + b2[i]) / 6.0;
                                }
                            }
                            expm_small(&avg, l, 0.5 * h / tau, &mut out[a * ll..(a + 1) * ll]);
                        }
                        out
                    })
                    .collect();
                Plan::Split {
                    mats: vec![e],
                    stages: vec![Stage { mat: 0, halves }],
                }
            }
            StepperKind::Split4 => {
                if !op.nonlocal_time_independent() {
                    return Err(NlsError::invalid("splitting needs a time-independent nonlocal part"));
                }
                let k = op.assemble_nonlocal(0, cap)?;
                let (w1, w0) = (TRIPLE_JUMP, 1.0 - 2.0 * TRIPLE_JUMP);
                let e1 = expm_metzler(&k, w1 * h / tau);
                let back = expm_metzler(&k, -w0 * h / tau);
                let inv = back
                    .mat
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| NlsError::Stiffness("backward splitting substep is singular".into()))?;
                let e0 = ScaledMatrix {
                    log_scale: -back.log_scale,
                    mat: inv,
                };
                let nsets = if op.local.time_independent { 1 } else { op.steps() };
                let offsets = [(0.0, w1, 0usize), (w1, w0, 1), (w1 + w0, w1, 0)];
                let stages = offsets
                    .iter()
                    .map(|&(off, c, mat)| Stage {
                        mat,
                        halves: (0..nsets)
                            .into_par_iter()
                            .map(|k| substep_halves(op, (k as f64 + off) * h, c * h))
                            .collect(),
                    })
                    .collect();
                Plan::Split {
                    mats: vec![e1, e0],
                    stages,
                }
            }
            StepperKind::CrankNicolson | StepperKind::Rk4 => {
                if op.nl() > cap {
                    return Err(NlsError::CapExceeded { size: op.nl(), cap });
                }
                if kind == StepperKind::Rk4 {
                    let gnorm = (0..op
                        .time
                        .n_samples()
                        .min(if op.time_independent() { 1 } else { usize::MAX }))
                        .map(|s| {
                            op.assemble_dense(s, cap).map(|g| {
                                g.row_iter()
                                    .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                                    .fold(0.0, f64::max)
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .fold(0.0, f64::max);
                    if h / tau * gnorm > 2.5 {
                        return Err(NlsError::Stiffness(format!(
                            "RK4 with h/tau = {:e} and |G| = {gnorm:e} is outside the stability region; use crank_nicolson or more steps",
                            h / tau
                        )));
                    }
                }
                let nmat = if op.time_independent() { 1 } else { op.steps() };
                let bytes = nmat * op.nl() * op.nl() * 8;
                let mut p = Propagator {
                    op,
                    kind,
                    plan: Plan::Steps { cache: None },
                };
                if bytes <= STEP_CACHE_BYTES {
                    let mats = (0..nmat)
                        .into_par_iter()
                        .map(|k| p.build_step_matrix(k))
                        .collect::<Result<Vec<_>>>()?;
                    p.plan = Plan::Steps { cache: Some(mats) };
                }
                return Ok(p);
            }
            StepperKind::Auto => unreachable!(),
        };
        Ok(Self { op, kind, plan })
    }

    pub fn kind(&self) -> StepperKind {
        self.kind
    }

    pub fn op(&self) -> &DiscreteOperator {
        self.op
    }

    fn build_step_matrix(&self, k: usize) -> Result<DMatrix<f64>> {
        let op = self.op;
        let h = 1.0 / op.steps() as f64;
        let c = h / op.tau;
        let nl = op.nl();
        let idx = |s: usize| if op.time_independent() { 0 } else { s };
        match self.kind {
            StepperKind::CrankNicolson => {
                let g = op.assemble_dense(idx(2 * k + 1), usize::MAX)?;
                let eye = DMatrix::<f64>::identity(nl, nl);
                let lhs = &eye - &g * (0.5 * c);
                let rhs = &eye + &g * (0.5 * c);
                lhs.lu()
                    .solve(&rhs)
                    .ok_or_else(|| NlsError::Stiffness("Crank-Nicolson system is singular".into()))
            }
            StepperKind::Rk4 => {
                let g0 = op.assemble_dense(idx(2 * k), usize::MAX)? * c;
                let g1 = op.assemble_dense(idx(2 * k + 1), usize::MAX)? * c;
                let g2 = op.assemble_dense(idx(2 * k + 2), usize::MAX)? * c;
                let eye = DMatrix::<f64>::identity(nl, nl);
                let k1 = g0.clone();
                let k2 = &g1 * (&eye + &k1 * 0.5);
                let k3 = &g1 * (&eye + &k2 * 0.5);
                let k4 = &g2 * (&eye + &k3);
                Ok(eye + (k1 + k2 * 2.0 + k3 * 2.0 + k4) / 6.0)
            }
            _ => unreachable!(),
        }
    }

    fn step_matrix(&self, k: usize) -> Result<Cow<'_, DMatrix<f64>>> {
        match &self.plan {
            Plan::Steps { cache: Some(m) } => Ok(Cow::Borrowed(if m.len() == 1 { &m[0] } else { &m[k] })),
            Plan::Steps { cache: None } => Ok(Cow::Owned(self.build_step_matrix(k)?)),
            _ => unreachable!(),
        }
    }

    fn exact_step(&self) -> &ScaledMatrix {
        match &self.plan {
            Plan::Exact { g, step, .. } => {
                step.get_or_init(|| expm_metzler(g, 1.0 / (self.op.steps() as f64 * self.op.tau)))
            }
            _ => unreachable!(),
        }
    }

    fn apply_halves(&self, halves: &[f64], v: &mut [f64], transpose: bool) {
        let l = self.op.l;
        if l == 1 {
            v.iter_mut().zip(halves).for_each(|(x, h)| *x *= h);
            return;
        }
        let ll = l * l;
        let mut tmp = vec![0.0; l];
        for a in 0..self.op.n {
            let blk = &halves[a * ll..(a + 1) * ll];
            let x = &mut v[a * l..(a + 1) * l];
            for i in 0..l {
                tmp[i] = (0..l)
                    .map(|j| if transpose { blk[j * l + i] } else { blk[i * l + j] } * x[j])
                    .sum();
            }
            x.copy_from_slice(&tmp);
        }
    }

    /// Advances `v` from knot `k` to `k + 1`, normalizing; returns the log of
    /// the factor removed.
    pub fn step(&self, k: usize, v: &mut [f64], buf: &mut [f64]) -> Result<f64> {
        let ls = match &self.plan {
            Plan::Exact { .. } => {
                let e = self.exact_step();
                matvec(&e.mat, v, buf);
                v.copy_from_slice(buf);
                e.log_scale
            }
            Plan::Split { mats, stages } => {
                let mut ls = 0.0;
                for st in stages {
                    let hk = if st.halves.len() == 1 {
                        &st.halves[0]
                    } else {
                        &st.halves[k]
                    };
                    self.apply_halves(hk, v, false);
                    matvec(&mats[st.mat].mat, v, buf);
                    v.copy_from_slice(buf);
                    self.apply_halves(hk, v, false);
                    ls += mats[st.mat].log_scale;
                }
                ls
            }
            Plan::Steps { .. } => {
                let m = self.step_matrix(k)?;
                matvec(&m, v, buf);
                v.copy_from_slice(buf);
                0.0
            }
        };
        Ok(ls + inf_normalize(v))
    }

    /// Transposed step `k` (maps knot `k + 1` data back to knot `k`).
    pub fn step_adjoint(&self, k: usize, v: &mut [f64], buf: &mut [f64]) -> Result<f64> {
        let ls = match &self.plan {
            Plan::Exact { .. } => {
                let e = self.exact_step();
                tr_matvec(&e.mat, v, buf);
                v.copy_from_slice(buf);
                e.log_scale
            }
            Plan::Split { mats, stages } => {
                let mut ls = 0.0;
                for st in stages.iter().rev() {
                    let hk = if st.halves.len() == 1 {
                        &st.halves[0]
                    } else {
                        &st.halves[k]
                    };
                    self.apply_halves(hk, v, true);
                    tr_matvec(&mats[st.mat].mat, v, buf);
                    v.copy_from_slice(buf);
                    self.apply_halves(hk, v, true);
                    ls += mats[st.mat].log_scale;
                }
                ls
            }
            Plan::Steps { .. } => {
                let m = self.step_matrix(k)?;
                tr_matvec(&m, v, buf);
                v.copy_from_slice(buf);
                0.0
            }
        };
        Ok(ls + inf_normalize(v))
    }

    /// `out = exp(-ret) V(1, 0) v`; returns `ret`.
    pub fn period_apply(&self, v: &[f64], out: &mut [f64]) -> Result<f64> {
        out.copy_from_slice(v);
        let mut buf = vec![0.0; v.len()];
        if let Plan::Exact { period, .. } = &self.plan {
            matvec(&period.mat, v, out);
            return Ok(period.log_scale + inf_normalize(out));
        }
        let mut ls = 0.0;
        for k in 0..self.op.steps() {
            ls += self.step(k, out, &mut buf)?;
        }
        Ok(ls)
    }

    /// `out = exp(-ret) V(1, 0)^T v`; returns `ret`.
    pub fn period_apply_adjoint(&self, v: &[f64], out: &mut [f64]) -> Result<f64> {
        out.copy_from_slice(v);
        let mut buf = vec![0.0; v.len()];
        if let Plan::Exact { period, .. } = &self.plan {
            tr_matvec(&period.mat, v, out);
            return Ok(period.log_scale + inf_normalize(out));
        }
        let mut ls = 0.0;
        for k in (0..self.op.steps()).rev() {
            ls += self.step_adjoint(k, out, &mut buf)?;
        }
        Ok(ls)
    }

    /// Solution at every knot from `v0` at `t = 0`. Returns the normalized
    /// states and the cumulative log scales: `u(t_k) = exp(logs[k]) * data_k`.
    pub fn trajectory(&self, v0: &[f64]) -> Result<(StateField, Vec<f64>)> {
        let (n, l, steps) = (self.op.n, self.op.l, self.op.steps());
        let mut f = StateField::zeros(l, n, steps);
        let mut v = v0.to_vec();
        let mut logs = vec![0.0; steps + 1];
        logs[0] = inf_normalize(&mut v);
        f.knot_mut(0).copy_from_slice(&v);
        let mut buf = vec![0.0; v.len()];
        for k in 0..steps {
            logs[k + 1] = logs[k] + self.step(k, &mut v, &mut buf)?;
            f.knot_mut(k + 1).copy_from_slice(&v);
        }
        Ok((f, logs))
    }

    /// Backward adjoint solution from `w1` at `t = 1`; `logs[k]` refers to knot `k`.
    pub fn adjoint_trajectory(&self, w1: &[f64]) -> Result<(StateField, Vec<f64>)> {
        let (n, l, steps) = (self.op.n, self.op.l, self.op.steps());
        let mut f = StateField::zeros(l, n, steps);
        let mut v = w1.to_vec();
        let mut logs = vec![0.0; steps + 1];
        logs[steps] = inf_normalize(&mut v);
        f.knot_mut(steps).copy_from_slice(&v);
        let mut buf = vec![0.0; v.len()];
        for k in (0..steps).rev() {
            logs[k] = logs[k + 1] + self.step_adjoint(k, &mut v, &mut buf)?;
            f.knot_mut(k).copy_from_slice(&v);
        }
        Ok((f, logs))
    }

    /// Dense period map.
    pub fn monodromy(&self) -> Result<ScaledMatrix> {
        let nl = self.op.nl();
        match &self.plan {
            Plan::Exact { period, .. } => Ok(period.clone()),
            Plan::Split { mats, stages } => {
                let mut m = ScaledMatrix::identity(nl);
                let l = self.op.l;
                let scale_rows = |mat: &mut DMatrix<f64>, hk: &[f64]| {
                    if l == 1 {
                        for (i, h) in hk.iter().enumerate() {
                            mat.row_mut(i).scale_mut(*h);
                        }
                    } else {
                        let mut bd = DMatrix::zeros(nl, nl);
                        let ll = l * l;
                        for a in 0..self.op.n {
                            for i in 0..l {
                                for j in 0..l {
                                    bd[(a * l + i, a * l + j)] = hk[a * ll + i * l + j];
                                }
                            }
                        }
                        *mat = &bd * &*mat;
                    }
                };
                for k in 0..self.op.steps() {
                    for st in stages {
                        let hk = if st.halves.len() == 1 {
                            &st.halves[0]
                        } else {
                            &st.halves[k]
                        };
                        scale_rows(&mut m.mat, hk);
                        m = mats[st.mat].mul(&m);
                        scale_rows(&mut m.mat, hk);
                        m.normalize();
                    }
                }
                Ok(m)
            }
            Plan::Steps { .. } => {
                let mut m = ScaledMatrix::identity(nl);
                for k in 0..self.op.steps() {
                    let s = self.step_matrix(k)?;
                    m.mat = &*s * &m.mat;
                    m.normalize();
                }
                Ok(m)
            }
        }
    }
}
