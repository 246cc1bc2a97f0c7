//! Smooth lower and upper approximations of the reaction matrix `A` and the
//! resulting sandwich `s(L(A_-^k)) <= s(L(A)) <= s(L(A_+^k))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NlsError, Result};
use crate::fields::{sample_field, FieldSource, MatrixField};
use crate::floquet::{lambda_a_profile, spectral_bound_op, thm14_proxy, SpectralOptions, Thm14Proxy};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::operator::OperatorSpec;

/// Quadrature points per axis on the mollifier supports.
const MOLLIFIER_POINTS: usize = 24;

fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (1.0 / (r2 - 1.0)).exp()
    } else {
        0.0
    }
}

/// `chi(s) = exp(-1/s)` for `s > 0`.
pub fn chi(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

/// Smooth step: 0 for `s <= 0`, 1 for `s >= 1`.
pub fn zeta(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        chi(s) / (chi(s) + chi(1.0 - s))
    }
}

/// Smooth positive part `Phi(s) = s zeta(s)`.
pub fn smooth_positive_part(s: f64) -> f64 {
    s * zeta(s)
}

/// Space and time mollifiers of width `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub epsilon: f64,
    /// Normalization of the time bump on `(-1, 1)`.
    pub c1: f64,
    /// Normalization of the space bump on the unit ball.
    pub c2: f64,
    pub dim: usize,
}

impl MollifierSpec {
    pub fn new(epsilon: f64, dim: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0 / 3.0) {
            return Err(NlsError::invalid(format!(
                "mollifier width must lie in (0, 1/3), got {epsilon}"
            )));
        }
        let m = 20000;
        let h = 2.0 / m as f64;
        let line: f64 = (0..m).map(|i| bump((-1.0 + (i as f64 + 0.5) * h).powi(2)) * h).sum();
        let c1 = 1.0 / line;
        let c2 = if dim == 1 {
            c1
        } else {
            let hr = 1.0 / m as f64;
            let disk: f64 = (0..m)
                .map(|i| {
                    let r = (i as f64 + 0.5) * hr;
                    2.0 * std::f64::consts::PI * r * bump(r * r) * hr
                })
                .sum();
            1.0 / disk
        };
        Ok(Self { epsilon, c1, c2, dim })
    }

    /// `phi_eps(x)`.
    pub fn phi(&self, x: &[f64; 2]) -> f64 {
        let e = self.epsilon;
        let r2 = (x[0] * x[0] + if self.dim == 2 { x[1] * x[1] } else { 0.0 }) / (e * e);
        self.c2 * bump(r2) / e.powi(self.dim as i32)
    }

    /// `eta_eps(t)`.
    pub fn eta(&self, t: f64) -> f64 {
        let e = self.epsilon;
        self.c1 * bump((t / e).powi(2)) / e
    }

    /// 1-periodic `psi_eps(t) = sum_k eta_eps(t - k)`.
    pub fn psi(&self, t: f64) -> f64 {
        let r = t.rem_euclid(1.0);
        self.eta(r) + self.eta(r - 1.0)
    }

    /// Discrete space offsets and weights (sum one).
    fn space_rule(&self) -> Vec<([f64; 2], f64)> {
        let q = MOLLIFIER_POINTS;
        let zs: Vec<f64> = (0..q).map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / q as f64).collect();
        let mut pts = Vec::new();
        if self.dim == 1 {
            for &z in &zs {
                pts.push(([z * self.epsilon, 0.0], bump(z * z)));
            }
        } else {
            for &z0 in &zs {
                for &z1 in &zs {
                    let w = bump(z0 * z0 + z1 * z1);
                    if w > 0.0 {
                        pts.push(([z0 * self.epsilon, z1 * self.epsilon], w));
                    }
                }
            }
        }
        let total: f64 = pts.iter().map(|p| p.1).sum();
        pts.iter_mut().for_each(|p| p.1 /= total);
        pts
    }

    fn time_rule(&self) -> Vec<(f64, f64)> {
        let q = MOLLIFIER_POINTS;
        let mut pts: Vec<(f64, f64)> = (0..q)
            .map(|i| {
                let z = -1.0 + (i as f64 + 0.5) * 2.0 / q as f64;
                (z * self.epsilon, bump(z * z))
            })
            .collect();
        let total: f64 = pts.iter().map(|p| p.1).sum();
        pts.iter_mut().for_each(|p| p.1 /= total);
        pts
    }
}

/// Point evaluator of an `l x l` field with constant extension outside `Omega`.
pub trait PointField: Sync {
    fn l(&self) -> usize;
    fn time_independent(&self) -> bool;
    fn eval(&self, x: &[f64; 2], t: f64, out: &mut [f64]);
}

/// Analytic source clamped to the closed box.
pub struct ClampedSource<'a> {
    pub source: &'a FieldSource,
    pub grid: &'a SpatialGrid,
    pub time_independent: bool,
}

impl PointField for ClampedSource<'_> {
    fn l(&self) -> usize {
        self.source.l()
    }
    fn time_independent(&self) -> bool {
        self.time_independent
    }
    fn eval(&self, x: &[f64; 2], t: f64, out: &mut [f64]) {
        let b = &self.grid.bounds;
        let mut y = *x;
        for d in 0..self.grid.dim {
            y[d] = y[d].clamp(b.lower[d], b.upper[d]);
        }
        self.source
            .eval(&y, t, out)
            .expect("clamped source must be point-evaluable");
    }
}

/// Piecewise-linear interpolation of a tabulated field (1D grids; 2D uses
/// bilinear interpolation on the tensor grid), periodic in time, constant
/// beyond the outermost nodes.
pub struct Interpolated<'a> {
    pub field: &'a MatrixField,
    pub grid: &'a SpatialGrid,
}

fn axis_bracket(x: f64, first: f64, h: f64, n: usize) -> (usize, usize, f64) {
    let u = (x - first) / h;
    if u <= 0.0 {
        return (0, 0, 0.0);
    }
    if u >= (n - 1) as f64 {
        return (n - 1, n - 1, 0.0);
    }
    let i = u.floor() as usize;
    (i, i + 1, u - i as f64)
}

impl PointField for Interpolated<'_> {
    fn l(&self) -> usize {
        self.field.l
    }
    fn time_independent(&self) -> bool {
        self.field.time_independent
    }
    fn eval(&self, x: &[f64; 2], t: f64, out: &mut [f64]) {
        let g = self.grid;
        let f = self.field;
        let ll = f.l * f.l;
        // spatial stencil
        let mut stencil: Vec<(usize, f64)> = Vec::with_capacity(4);
        let (i0, i1, r0) = axis_bracket(x[0], g.nodes[0][0], g.spacing[0], g.shape[0]);
        if g.dim == 1 {
            stencil.push((i0, 1.0 - r0));
            stencil.push((i1, r0));
        } else {
            let ny = g.shape[1];
            let (j0, j1, r1) = axis_bracket(x[1], g.nodes[0][1], g.spacing[1], ny);
            stencil.push((i0 * ny + j0, (1.0 - r0) * (1.0 - r1)));
            stencil.push((i0 * ny + j1, (1.0 - r0) * r1));
            stencil.push((i1 * ny + j0, r0 * (1.0 - r1)));
            stencil.push((i1 * ny + j1, r0 * r1));
        }
        // temporal stencil over half-knot samples
        let times: Vec<(usize, f64)> = if f.time_independent {
            vec![(0, 1.0)]
        } else {
            let m = 2 * f.steps;
            let u = t.rem_euclid(1.0) * m as f64;
            let k = (u.floor() as usize).min(m - 1);
            let r = u - k as f64;
            vec![(k, 1.0 - r), (k + 1, r)]
        };
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(s, ws) in &times {
            for &(a, wa) in &stencil {
                let blk = f.at(s, a);
                for e in 0..ll {
                    out[e] += ws * wa * blk[e];
                }
            }
        }
    }
}

/// Mollification `b = (phi_eps psi_eps) * a` tabulated on the grid.
pub fn mollify(field: &dyn PointField, grid: &SpatialGrid, time: &TimeGrid, moll: &MollifierSpec) -> MatrixField {
    let l = field.l();
    let ll = l * l;
    let ti = field.time_independent();
    let space = moll.space_rule();
    let trule = if ti { vec![(0.0, 1.0)] } else { moll.time_rule() };
    let mut out = MatrixField::zeros(l, grid.n, time.steps, ti);
    let samples = out.n_samples();
    if grid.dim == 1 && !ti {
        mollify_lattice_1d(field, grid, time, &space, &trule, &mut out);
        return out;
    }
    let blocks: Vec<Vec<f64>> = (0..samples * grid.n)
        .into_par_iter()
        .map(|idx| {
            let (s, a) = (idx / grid.n, idx % grid.n);
            let t = if ti { 0.0 } else { time.sample_time(s) };
            let x = grid.nodes[a];
            let mut acc = vec![0.0; ll];
            let mut buf = vec![0.0; ll];
            for (off, wx) in &space {
                let y = [x[0] - off[0], x[1] - off[1]];
                for (dt, wt) in &trule {
                    field.eval(&y, t - dt, &mut buf);
                    let w = wx * wt;
                    for e in 0..ll {
                        acc[e] += w * buf[e];
                    }
                }
            }
            acc
        })
        .collect();
    for (idx, b) in blocks.into_iter().enumerate() {
        out.at_mut(idx / grid.n, idx % grid.n).copy_from_slice(&b);
    }
    if !ti {
        let block = grid.n * ll;
        let (head, tail) = out.values.split_at_mut((samples - 1) * block);
        tail.copy_from_slice(&head[..block]);
    }
    out
}

/// 1D time-dependent path: exact time mollification on a lattice of spacing
/// `2 eps / q`, then space quadrature by linear interpolation on the lattice.
fn mollify_lattice_1d(
    field: &dyn PointField,
    grid: &SpatialGrid,
    time: &TimeGrid,
    space: &[([f64; 2], f64)],
    trule: &[(f64, f64)],
    out: &mut MatrixField,
) {
    let ll = out.l * out.l;
    let samples = out.n_samples();
    let reach = space.iter().map(|p| p.0[0].abs()).fold(0.0, f64::max);
    let hq = (2.0 * reach / MOLLIFIER_POINTS as f64).max(1e-12);
    let y0 = grid.bounds.lower[0] - reach - hq;
    let m = ((grid.bounds.upper[0] + reach + hq - y0) / hq).ceil() as usize + 1;
    // table[p][s] blocks, row-major over (p, s)
    let table: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|p| {
            let y = [y0 + p as f64 * hq, 0.0];
            let mut row = vec![0.0; samples * ll];
            let mut buf = vec![0.0; ll];
            for s in 0..samples - 1 {
                let t = time.sample_time(s);
                let acc = &mut row[s * ll..(s + 1) * ll];
                for (dt, wt) in trule {
                    field.eval(&y, t - dt, &mut buf);
                    for e in 0..ll {
                        acc[e] += wt * buf[e];
                    }
                }
            }
            let (head, tail) = row.split_at_mut((samples - 1) * ll);
            tail.copy_from_slice(&head[..ll]);
            row
        })
        .collect();
    for s in 0..samples {
        for a in 0..grid.n {
            let x = grid.nodes[a][0];
            let blk = out.at_mut(s, a);
            for (off, w) in space {
                let u = (x - off[0] - y0) / hq;
                let p = (u.floor() as usize).min(m - 2);
                let r = u - p as f64;
                let (lo, hi) = ((p * samples + s) * ll, ((p + 1) * samples + s) * ll);
                for e in 0..ll {
                    blk[e] += w * ((1.0 - r) * table[lo + e] + r * table[hi + e]);
                }
            }
        }
    }
}

/// Per-entry `sup |b_ij - a_ij|` over all sampled points.
pub fn entry_deltas(b: &MatrixField, a: &MatrixField) -> Vec<f64> {
    let l = a.l;
    let mut d = vec![0.0f64; l * l];
    let samples = b.n_samples().max(a.n_samples());
    for s in 0..samples {
        let sb = if b.time_independent { 0 } else { s };
        let sa = if a.time_independent { 0 } else { s };
        for x in 0..a.n {
            let (bb, aa) = (b.at(sb, x), a.at(sa, x));
            for e in 0..l * l {
                d[e] = d[e].max((bb[e] - aa[e]).abs());
            }
        }
    }
    d
}

/// Mollifies a coefficient source on the grid; returns the field and `delta_ij`.
pub fn mollify_periodic(
    source: &FieldSource,
    grid: &SpatialGrid,
    time: &TimeGrid,
    epsilon: f64,
) -> Result<(MatrixField, Vec<f64>)> {
    let moll = MollifierSpec::new(epsilon, grid.dim)?;
    let a = sample_field(source, grid, time)?;
    let b = match source {
        FieldSource::Table(_) => mollify(&Interpolated { field: &a, grid }, grid, time, &moll),
        _ => mollify(
            &ClampedSource {
                source,
                grid,
                time_independent: a.time_independent,
            },
            grid,
            time,
            &moll,
        ),
    };
    let d = entry_deltas(&b, &a);
    Ok((b, d))
}

/// One level of the construction.
#[derive(Debug, Clone)]
pub struct ApproxLevel {
    pub epsilon: f64,
    /// Final re-mollification width used for the off-diagonal lower chain.
    pub gamma: f64,
    pub deltas: Vec<f64>,
    pub lower: MatrixField,
    pub upper: MatrixField,
    /// Flattened lower matrix `A_-^k + beta_k I` (set by [`flatten_level`]).
    pub lower_flat: Option<MatrixField>,
    pub radius: f64,
    pub depth: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ApproxSequence {
    pub levels: Vec<ApproxLevel>,
}

/// Lower and upper smooth approximations at widths `eps0 2^-k`.
pub fn lower_upper_sequences(
    source: &FieldSource,
    grid: &SpatialGrid,
    time: &TimeGrid,
    n_levels: usize,
    eps0: f64,
) -> Result<ApproxSequence> {
    let a = sample_field(source, grid, time)?;
    if !a.offdiag_nonnegative() {
        return Err(NlsError::precondition("A must have nonnegative off-diagonal entries"));
    }
    let l = a.l;
    let mut levels = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let eps = eps0 * 0.5f64.powi(k as i32);
        let (b, delta) = mollify_periodic(source, grid, time, eps)?;
        let dmax = delta.iter().cloned().fold(0.0, f64::max);
        let eta = dmax;
        let ti = b.time_independent;
        let mut lower = b.clone();
        let mut upper = b.clone();
        for blk in upper.values.chunks_mut(l * l) {
            for e in 0..l * l {
                blk[e] += delta[e];
            }
        }
        let mut gamma_used = eps;
        // off-diagonal lower chain
        for i in 0..l {
            for j in 0..l {
                if i == j {
                    continue;
                }
                let e = i * l + j;
                let dij = delta[e];
                // c = max(b - 2 delta, 0)
                let mut c = MatrixField::zeros(1, grid.n, time.steps, ti);
                for (cv, blk) in c.values.iter_mut().zip(b.values.chunks(l * l)) {
                    *cv = (blk[e] - 2.0 * dij).max(0.0);
                }
                // u = gamma-mollified c, halving gamma until |u - c| <= delta
                let mut gamma = eps;
                let mut u;
                let mut tries = 0;
                loop {
                    let moll = MollifierSpec::new(gamma, grid.dim)?;
                    u = mollify(&Interpolated { field: &c, grid }, grid, time, &moll);
                    let err = entry_deltas(&u, &c)[0];
                    tries += 1;
                    if err <= dij || tries >= 20 {
                        if err > dij {
                            log::warn!("re-mollification bound not met after 20 halvings (err {err:e}, delta {dij:e})");
                        }
                        break;
                    }
                    gamma *= 0.5;
                }
                gamma_used = gamma_used.min(gamma);
                let alpha = u
                    .values
                    .iter()
                    .zip(&c.values)
                    .map(|(uv, cv)| (uv - cv).max(0.0))
                    .fold(0.0, f64::max);
                for (blk, uv) in lower.values.chunks_mut(l * l).zip(&u.values) {
                    let v = uv - alpha;
                    blk[e] = if eta > 0.0 {
                        eta * smooth_positive_part(v / eta)
                    } else {
                        v.max(0.0)
                    };
                }
            }
        }
        for blk in lower.values.chunks_mut(l * l) {
            for i in 0..l {
                blk[i * l + i] -= delta[i * l + i];
            }
        }
        levels.push(ApproxLevel {
            epsilon: eps,
            gamma: gamma_used,
            deltas: delta,
            lower,
            upper,
            lower_flat: None,
            radius: 0.0,
            depth: 0.0,
            beta: Vec::new(),
        });
    }
    Ok(ApproxSequence { levels })
}

/// Flattened profile data.
#[derive(Debug, Clone)]
pub struct Flattened {
    pub field: MatrixField,
    pub beta: Vec<f64>,
    pub profile: Vec<f64>,
    pub argmax: usize,
}

/// `A + beta(x) I` whose `lambda` profile is
/// `(max - depth) rho + (lambda - depth)(1 - rho)`, where `rho` is a smooth
/// cutoff equal to one within `r / 2` of the first maximizer and zero beyond `r`.
pub fn flatten_at_max(a: &MatrixField, grid: &SpatialGrid, tau: f64, depth: f64, r: f64) -> Result<Flattened> {
    if !(depth >= 0.0 && r > 0.0) {
        return Err(NlsError::invalid("flattening needs depth >= 0 and r > 0"));
    }
    let prof = lambda_a_profile(a, tau)?;
    let lam = &prof.values;
    let argmax = prof.argmax();
    let max = prof.max();
    let beta: Vec<f64> = (0..grid.n)
        .map(|x| {
            let dist = grid.distance(x, argmax);
            let rho = zeta((r - dist) / (0.5 * r));
            let target = (max - depth) * rho + (lam[x] - depth) * (1.0 - rho);
            target - lam[x]
        })
        .collect();
    let mut field = a.clone();
    for s in 0..field.n_samples() {
        for x in 0..grid.n {
            let blk = field.at_mut(s, x);
            for i in 0..a.l {
                blk[i * a.l + i] += beta[x];
            }
        }
    }
    let profile = lam.iter().zip(&beta).map(|(l, b)| l + b).collect();
    Ok(Flattened {
        field,
        beta,
        profile,
        argmax,
    })
}

/// Flattens level `k`: radius `max(eps_k, 4h)` and depth `eps_k^2` plus the
/// oscillation of `lambda_{A_-^k}` over the ball, so that `beta <= 0`.
pub fn flatten_level(level: &mut ApproxLevel, grid: &SpatialGrid, tau: f64) -> Result<()> {
    let prof = lambda_a_profile(&level.lower, tau)?;
    let argmax = prof.argmax();
    let max = prof.max();
    let r = level.epsilon.max(4.0 * grid.h());
    let osc = (0..grid.n)
        .filter(|&x| grid.distance(x, argmax) < r)
        .map(|x| max - prof.values[x])
        .fold(0.0, f64::max);
    let depth = level.epsilon * level.epsilon + osc;
    let fl = flatten_at_max(&level.lower, grid, tau, depth, r)?;
    level.radius = r;
    level.depth = depth;
    level.beta = fl.beta;
    level.lower_flat = Some(fl.field);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichRow {
    pub k: usize,
    pub epsilon: f64,
    pub delta_max: f64,
    pub depth: f64,
    pub s_lower: f64,
    pub s_mid: f64,
    pub s_upper: f64,
    pub gap: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// Entrywise `A_-~ <= A <= A_+` at every sample.
    pub entrywise_ok: bool,
    pub thm14: Thm14Proxy,
    /// `||A_+ - A_-~||_inf`.
    pub coefficient_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichReport {
    pub rows: Vec<SandwichRow>,
    pub monotone_gaps: bool,
    pub all_ok: bool,
}

pub const SANDWICH_TOL: f64 = 1e-7;

fn with_table(spec: &OperatorSpec, field: MatrixField) -> OperatorSpec {
    spec.clone().with_a(FieldSource::Table(std::sync::Arc::new(field)))
}

/// Builds `n_levels` approximation levels and compares principal spectrum points.
pub fn sandwich_check(spec: &OperatorSpec, n_levels: usize, eps0: f64) -> Result<SandwichReport> {
    let opts = SpectralOptions {
        adjoint: false,
        ..SpectralOptions::default()
    };
    let base = spec.discretize()?;
    let mid = spectral_bound_op(&base, &opts)?;
    let mut seq = lower_upper_sequences(&spec.a, &spec.grid, &spec.time, n_levels, eps0)?;
    let l = spec.l;
    let mut rows = Vec::with_capacity(n_levels);
    for (k, lev) in seq.levels.iter_mut().enumerate() {
        flatten_level(lev, &spec.grid, spec.tau)?;
        let lower = lev.lower_flat.clone().unwrap();
        let entrywise_ok = {
            let samples = base.a.n_samples().max(lower.n_samples()).max(lev.upper.n_samples());
            (0..samples).all(|s| {
                (0..spec.grid.n).all(|x| {
                    let pick = |f: &MatrixField| f.at(if f.time_independent { 0 } else { s }, x).to_vec();
                    let (lo, mid_a, up) = (pick(&lower), pick(&base.a), pick(&lev.upper));
                    (0..l * l).all(|e| lo[e] <= mid_a[e] && mid_a[e] <= up[e])
                        && (0..l).all(|i| (0..l).all(|j| i == j || lo[i * l + j] >= 0.0))
                })
            })
        };
        let coefficient_gap = {
            let up = if lev.upper.time_independent && !lower.time_independent {
                lev.upper.to_time_dependent()
            } else {
                lev.upper.clone()
            };
            let lo = if lower.time_independent && !up.time_independent {
                lower.to_time_dependent()
            } else {
                lower.clone()
            };
            up.max_abs_diff(&lo)?
        };
        let lo_op = with_table(spec, lower).discretize()?;
        let up_op = with_table(spec, lev.upper.clone()).discretize()?;
        let s_lower = spectral_bound_op(&lo_op, &opts)?.s;
        let s_upper = spectral_bound_op(&up_op, &opts)?.s;
        let prof = lambda_a_profile(&lo_op.local, spec.tau)?;
        let thm14 = thm14_proxy(&spec.grid, &prof.values);
        rows.push(SandwichRow {
            k,
            epsilon: lev.epsilon,
            delta_max: lev.deltas.iter().cloned().fold(0.0, f64::max),
            depth: lev.depth,
            s_lower,
            s_mid: mid.s,
            s_upper,
            gap: s_upper - s_lower,
            lower_ok: s_lower <= mid.s + SANDWICH_TOL,
            upper_ok: mid.s <= s_upper + SANDWICH_TOL,
            entrywise_ok,
            thm14,
            coefficient_gap,
        });
    }
    let monotone_gaps = rows.windows(2).all(|w| w[1].gap < w[0].gap);
    let all_ok = rows
        .iter()
        .all(|r| r.lower_ok && r.upper_ok && r.entrywise_ok && r.thm14.flag)
        && monotone_gaps;
    Ok(SandwichReport {
        rows,
        monotone_gaps,
        all_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    #[test]
    fn cutoffs() {
        assert_eq!(zeta(-0.1), 0.0);
        assert_eq!(zeta(1.5), 1.0);
        assert!((zeta(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(smooth_positive_part(-2.0), 0.0);
        assert_eq!(smooth_positive_part(3.0), 3.0);
        assert!(smooth_positive_part(0.4) <= 0.4);
    }

    #[test]
    fn mollifier_mass() {
        let m = MollifierSpec::new(0.1, 1).unwrap();
        let h = 1e-4;
        let mass: f64 = (0..2000).map(|i| m.eta(-0.1 + (i as f64 + 0.5) * h) * h).sum();
        assert!((mass - 1.0).abs() < 1e-8);
        assert!((m.psi(0.03) - m.psi(1.03)).abs() < 1e-14);
        assert!(MollifierSpec::new(0.4, 1).is_err());
    }

    #[test]
    fn constant_field_unchanged() {
        let g = SpatialGrid::interval(0.0, 1.0, 20).unwrap();
        let tg = TimeGrid::new(8).unwrap();
        let (b, d) = mollify_periodic(&FieldSource::constant(&[&[2.5]]), &g, &tg, 0.1).unwrap();
        assert!(d[0] <= 1e-10);
        assert!(b.values.iter().all(|v| (v - 2.5).abs() < 1e-10));
    }

    #[test]
    fn lipschitz_mollification_bound() {
        let g = SpatialGrid::interval(0.0, 1.0, 50).unwrap();
        let tg = TimeGrid::new(8).unwrap();
        let src = FieldSource::scalar(Expr::parse("abs(x - 0.5)").unwrap());
        let (_, d) = mollify_periodic(&src, &g, &tg, 0.1).unwrap();
        assert!(d[0] <= 0.1);
    }

    #[test]
    fn flatten_constant_profile() {
        let g = SpatialGrid::interval(0.0, 1.0, 20).unwrap();
        let tg = TimeGrid::new(8).unwrap();
        let a = sample_field(&FieldSource::constant(&[&[1.0]]), &g, &tg).unwrap();
        let f = flatten_at_max(&a, &g, 1.0, 0.05, 0.2).unwrap();
        assert!(f.beta.iter().all(|b| (b + 0.05).abs() < 1e-14));
    }

    #[test]
    fn flatten_quadratic_profile() {
        let g = SpatialGrid::interval(0.0, 1.0, 200).unwrap();
        let tg = TimeGrid::new(8).unwrap();
        let a = sample_field(&FieldSource::scalar(Expr::parse("-(x - 0.5)^2").unwrap()), &g, &tg).unwrap();
        let (eps, r) = (0.02, 0.1);
        let f = flatten_at_max(&a, &g, 1.0, eps, r).unwrap();
        let top = -(0.5f64 - g.nodes[f.argmax][0]).powi(2) - eps;
        for (x, p) in g.nodes.iter().zip(&f.profile) {
            if (x[0] - g.nodes[f.argmax][0]).abs() <= r / 2.0 {
                assert!((p - top).abs() < 1e-14);
            } else {
                assert!(*p <= top + 1e-14);
            }
            assert!(*p <= -(x[0] - 0.5).powi(2) + 1e-14 || (x[0] - g.nodes[f.argmax][0]).abs() < r);
        }
        assert!(thm14_proxy(&g, &f.profile).flag);
    }
}
