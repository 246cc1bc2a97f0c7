//! Operator specification, dense assembly of the spatial part, the resolvent
//! of the local part, and boundary-condition variants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NlsError, Result};
use crate::fields::{check_structure, sample_field, FieldSource, Kernel, MatrixField, StructureInput, StructureReport};
use crate::grid::{SpatialGrid, TimeGrid};

/// Default cap on `n * l` for dense assembly.
pub const DEFAULT_DENSE_CAP: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BcMode {
    /// Diagonal of `A` used as given.
    #[default]
    Raw,
    /// `a_ii = -d_ii + a~_ii`.
    Dirichlet,
    /// `a_ii = -d_ii int_Omega k_i(y, x, t) dy + a~_ii`.
    Neumann,
}

/// How the dispersal matrix `D` is specified.
#[derive(Debug, Clone)]
pub enum Dispersal {
    /// `D(x, t)` given directly; no outflow term.
    Raw(FieldSource),
    /// `D = sigma^-m C D0(x, t)` with outflow `-sigma^-m D0 u`; `D0` is read
    /// from the diagonal of the field.
    Scaled { c: DMatrix<f64>, d0: FieldSource },
}

/// Full description of `L_{tau, D, sigma, m}` on a grid.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    pub l: usize,
    pub tau: f64,
    pub m: f64,
    pub sigma: f64,
    pub dispersal: Dispersal,
    pub a: FieldSource,
    /// Base kernels; convolution kernels are rescaled by `sigma`.
    pub kernels: Vec<Kernel>,
    pub bc: BcMode,
    pub grid: SpatialGrid,
    pub time: TimeGrid,
}

impl OperatorSpec {
    /// Raw-mode operator `-tau u_t + D P[u] + A u` with `sigma = 1`.
    pub fn raw(d: FieldSource, a: FieldSource, kernels: Vec<Kernel>, grid: SpatialGrid, time: TimeGrid) -> Self {
        Self {
            l: a.l(),
            tau: 1.0,
            m: 0.0,
            sigma: 1.0,
            dispersal: Dispersal::Raw(d),
            a,
            kernels,
            bc: BcMode::Raw,
            grid,
            time,
        }
    }

    /// Scaled operator with `D = sigma^-m C D0`.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled(
        c: DMatrix<f64>,
        d0: FieldSource,
        a: FieldSource,
        kernels: Vec<Kernel>,
        sigma: f64,
        m: f64,
        grid: SpatialGrid,
        time: TimeGrid,
    ) -> Self {
        Self {
            l: a.l(),
            tau: 1.0,
            m,
            sigma,
            dispersal: Dispersal::Scaled { c, d0 },
            a,
            kernels,
            bc: BcMode::Raw,
            grid,
            time,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_grid(mut self, grid: SpatialGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_time(mut self, time: TimeGrid) -> Self {
        self.time = time;
        self
    }

    pub fn with_a(mut self, a: FieldSource) -> Self {
        self.a = a;
        self
    }

    /// Kernels after the `sigma` rescaling.
    pub fn effective_kernels(&self) -> Result<Vec<Kernel>> {
        self.kernels
            .iter()
            .map(|k| {
                if k.is_convolution() {
                    k.rescaled(self.sigma)
                } else if self.sigma == 1.0 {
                    Ok(k.clone())
                } else {
                    Err(NlsError::invalid("sigma != 1 requires convolution kernels"))
                }
            })
            .collect()
    }

    /// Multiplies the dispersal magnitude (`D`, and `D0` in scaled mode) by `factor`.
    pub fn scale_dispersal(mut self, factor: f64) -> Self {
        let scale = move |src: FieldSource| -> FieldSource {
            let l = src.l();
            match src {
                FieldSource::Table(t) => {
                    let mut t2 = (*t).clone();
                    t2.values.iter_mut().for_each(|v| *v *= factor);
                    FieldSource::Table(std::sync::Arc::new(t2))
                }
                other => {
                    let ti = matches!(&other, FieldSource::Exprs(rows) if rows.iter().flatten().all(|e| e.is_time_independent()))
                        || matches!(
                            &other,
                            FieldSource::Func {
                                time_independent: true,
                                ..
                            }
                        );
                    FieldSource::func(l, ti, move |x, t, out| {
                        other.eval(x, t, out).expect("point-evaluable field");
                        out.iter_mut().for_each(|v| *v *= factor);
                    })
                }
            }
        };
        self.dispersal = match self.dispersal {
            Dispersal::Raw(d) => Dispersal::Raw(scale(d)),
            Dispersal::Scaled { c, d0 } => Dispersal::Scaled { c, d0: scale(d0) },
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(NlsError::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(NlsError::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.m >= 0.0) {
            return Err(NlsError::invalid(format!("m must be nonnegative, got {}", self.m)));
        }
        if self.kernels.len() != self.l {
            return Err(NlsError::ShapeMismatch {
                what: "kernels",
                expected: self.l,
                got: self.kernels.len(),
            });
        }
        if self.a.l() != self.l {
            return Err(NlsError::ShapeMismatch {
                what: "A",
                expected: self.l,
                got: self.a.l(),
            });
        }
        match &self.dispersal {
            Dispersal::Raw(d) => {
                if d.l() != self.l {
                    return Err(NlsError::ShapeMismatch {
                        what: "D",
                        expected: self.l,
                        got: d.l(),
                    });
                }
            }
            Dispersal::Scaled { c, d0 } => {
                if c.nrows() != self.l || c.ncols() != self.l || d0.l() != self.l {
                    return Err(NlsError::ShapeMismatch {
                        what: "C / D0",
                        expected: self.l,
                        got: c.nrows(),
                    });
                }
                if self.bc != BcMode::Raw {
                    return Err(NlsError::invalid(
                        "boundary-condition variants apply to raw-mode specs; scaled mode carries its own outflow",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Tabulates coefficients and kernel matrices.
    pub fn discretize(&self) -> Result<DiscreteOperator> {
        DiscreteOperator::new(self)
    }
}

/// Returns the spec with the given boundary-condition mode.
///
/// Requires raw mode with diagonal `D` (weak coupling) and mass-normalized
/// kernels.
pub fn build_bc_variant(spec: &OperatorSpec, mode: BcMode) -> Result<OperatorSpec> {
    let d = match &spec.dispersal {
        Dispersal::Raw(d) => d,
        Dispersal::Scaled { .. } => {
            return Err(NlsError::invalid("boundary-condition variants need raw-mode dispersal"))
        }
    };
    if mode != BcMode::Raw {
        let df = sample_field(d, &spec.grid, &spec.time)?;
        if !df.is_diagonal() {
            return Err(NlsError::invalid(
                "strongly coupled dispersal (non-diagonal D) cannot take a boundary-condition variant",
            ));
        }
        if !spec.effective_kernels()?.iter().all(|k| k.is_mass_normalized()) {
            return Err(NlsError::invalid(
                "boundary-condition variants need mass-normalized kernels",
            ));
        }
    }
    let mut out = spec.clone();
    out.bc = mode;
    Ok(out)
}

/// Tabulated operator: `G(t) u = D(t) P(t) u + B(t) u`, where `B` collects
/// every local (block-diagonal) term.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub l: usize,
    pub n: usize,
    pub tau: f64,
    pub grid: SpatialGrid,
    pub time: TimeGrid,
    /// Per species kernel matrices: one entry, or one per half-knot sample.
    pub kmats: Vec<Vec<DMatrix<f64>>>,
    /// Effective `D` multiplying `P` (includes `sigma^-m`).
    pub d: MatrixField,
    /// Local part `B` (A, outflow, boundary terms).
    pub local: MatrixField,
    /// The `A` field as specified.
    pub a: MatrixField,
    /// Outflow diagonal `sigma^-m D0` in scaled mode.
    pub outflow: Option<MatrixField>,
    pub structure: StructureReport,
    pub kernels: Vec<Kernel>,
}

impl DiscreteOperator {
    pub fn new(spec: &OperatorSpec) -> Result<Self> {
        spec.validate()?;
        let (grid, time, l) = (&spec.grid, &spec.time, spec.l);
        let kernels = spec.effective_kernels()?;
        let a = sample_field(&spec.a, grid, time)?;
        let scale = spec.sigma.powf(-spec.m);

        let (d, outflow, c, d0) = match &spec.dispersal {
            Dispersal::Raw(src) => (sample_field(src, grid, time)?, None, None, None),
            Dispersal::Scaled { c, d0 } => {
                let d0f = sample_field(d0, grid, time)?;
                let mut d = d0f.clone();
                let mut out = d0f.clone();
                for (blk, (dblk, oblk)) in d0f
                    .values
                    .chunks(l * l)
                    .zip(d.values.chunks_mut(l * l).zip(out.values.chunks_mut(l * l)))
                {
                    for i in 0..l {
                        for j in 0..l {
                            dblk[i * l + j] = scale * c[(i, j)] * blk[j * l + j];
                            oblk[i * l + j] = if i == j { scale * blk[i * l + i] } else { 0.0 };
                        }
                    }
                }
                (d, Some(out), Some(c.clone()), Some(d0f))
            }
        };

        let structure = check_structure(&StructureInput {
            d: &d,
            a: &a,
            d0: d0.as_ref(),
            c: c.as_ref(),
            kernels: &kernels,
            grid,
            time,
        });

        let mut kmats = Vec::with_capacity(l);
        for k in &kernels {
            if k.is_time_independent() {
                kmats.push(vec![k.matrix(grid, 0.0)?]);
            } else {
                let mut per = Vec::with_capacity(time.n_samples());
                for s in 0..time.n_samples() {
                    per.push(k.matrix(grid, time.sample_time(s))?);
                }
                // exact periodicity
                per[time.n_samples() - 1] = per[0].clone();
                kmats.push(per);
            }
        }

        // Local part.
        let any_td = !a.time_independent
            || !d.time_independent
            || outflow.as_ref().is_some_and(|o| !o.time_independent)
            || (spec.bc == BcMode::Neumann && kernels.iter().any(|k| !k.is_time_independent()));
        let mut local = if any_td { a.to_time_dependent() } else { a.clone() };
        if let Some(o) = &outflow {
            local = local.zip_map(o, |x, y| x - y)?;
        }
        match spec.bc {
            BcMode::Raw => {}
            BcMode::Dirichlet | BcMode::Neumann => {
                let dd = if any_td { d.to_time_dependent() } else { d.clone() };
                for s in 0..local.n_samples() {
                    let t = if local.time_independent {
                        0.0
                    } else {
                        time.sample_time(s)
                    };
                    let mass: Vec<Vec<f64>> = if spec.bc == BcMode::Neumann {
                        kernels
                            .iter()
                            .map(|k| k.retained_mass(grid, t))
                            .collect::<Result<_>>()?
                    } else {
                        vec![vec![1.0; grid.n]; l]
                    };
                    for x in 0..grid.n {
                        let dii: Vec<f64> = (0..l).map(|i| dd.at(s, x)[i * l + i]).collect();
                        let blk = local.at_mut(s, x);
                        for i in 0..l {
                            blk[i * l + i] -= dii[i] * mass[i][x];
                        }
                    }
                }
            }
        }

        Ok(Self {
            l,
            n: grid.n,
            tau: spec.tau,
            grid: grid.clone(),
            time: *time,
            kmats,
            d,
            local,
            a,
            outflow,
            structure,
            kernels,
        })
    }

    pub fn nl(&self) -> usize {
        self.n * self.l
    }

    pub fn steps(&self) -> usize {
        self.time.steps
    }

    pub fn kernels_time_independent(&self) -> bool {
        self.kmats.iter().all(|k| k.len() == 1)
    }

    /// The nonlocal part `D P` does not depend on time.
    pub fn nonlocal_time_independent(&self) -> bool {
        self.kernels_time_independent() && self.d.time_independent
    }

    pub fn time_independent(&self) -> bool {
        self.nonlocal_time_independent() && self.local.time_independent
    }

    fn kmat(&self, species: usize, sample: usize) -> &DMatrix<f64> {
        let k = &self.kmats[species];
        if k.len() == 1 {
            &k[0]
        } else {
            &k[sample]
        }
    }

    /// `G(t_s) u` at half-knot sample `s`, `t_s = s / (2 steps)`.
    ///
    /// `u` is node-major: component `i` at node `a` is `u[a * l + i]`.
    pub fn apply_spatial(&self, u: &[f64], sample: usize) -> Result<Vec<f64>> {
        let (n, l) = (self.n, self.l);
        if u.len() != n * l {
            return Err(NlsError::ShapeMismatch {
                what: "state vector",
                expected: n * l,
                got: u.len(),
            });
        }
        let mut out = vec![0.0; n * l];
        self.apply_spatial_into(u, sample, &mut out);
        Ok(out)
    }

    pub fn apply_spatial_into(&self, u: &[f64], sample: usize, out: &mut [f64]) {
        self.apply_parts(u, sample, out, true);
    }

    /// `D(t_s) P(t_s) u`, the nonlocal part `M` only.
    pub fn apply_nonlocal_into(&self, u: &[f64], sample: usize, out: &mut [f64]) {
        self.apply_parts(u, sample, out, false);
    }

    fn apply_parts(&self, u: &[f64], sample: usize, out: &mut [f64], with_local: bool) {
        let (n, l) = (self.n, self.l);
        // P_j[u_j] for every species.
        let mut pu = vec![0.0; n * l];
        for j in 0..l {
            let uj = DVector::from_iterator(n, (0..n).map(|b| u[b * l + j]));
            let p = self.kmat(j, sample) * uj;
            for a in 0..n {
                pu[a * l + j] = p[a];
            }
        }
        for a in 0..n {
            let dblk = self.d.at(sample, a);
            let bblk = self.local.at(sample, a);
            for i in 0..l {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += dblk[i * l + j] * pu[a * l + j];
                    if with_local {
                        acc += bblk[i * l + j] * u[a * l + j];
                    }
                }
                out[a * l + i] = acc;
            }
        }
    }

    /// Dense `G(t_s)` with `apply_spatial(u, s) = G u`.
    pub fn assemble_dense(&self, sample: usize, cap: usize) -> Result<DMatrix<f64>> {
        let mut g = self.assemble_nonlocal(sample, cap)?;
        let l = self.l;
        for a in 0..self.n {
            let b = self.local.at(sample, a);
            for i in 0..l {
                for j in 0..l {
                    g[(a * l + i, a * l + j)] += b[i * l + j];
                }
            }
        }
        Ok(g)
    }

    /// Dense nonlocal part `D P` at sample `s`.
    pub fn assemble_nonlocal(&self, sample: usize, cap: usize) -> Result<DMatrix<f64>> {
        let (n, l) = (self.n, self.l);
        if n * l > cap {
            return Err(NlsError::CapExceeded { size: n * l, cap });
        }
        let mut g = DMatrix::zeros(n * l, n * l);
        for a in 0..n {
            let dblk = self.d.at(sample, a);
            for i in 0..l {
                for j in 0..l {
                    let dij = dblk[i * l + j];
                    if dij == 0.0 {
                        continue;
                    }
                    let k = self.kmat(j, sample);
                    for b in 0..n {
                        g[(a * l + i, b * l + j)] += dij * k[(a, b)];
                    }
                }
            }
        }
        Ok(g)
    }

    /// Frozen-time local block `B(x_a, t_s)`, row-major.
    pub fn local_block(&self, sample: usize, node: usize) -> &[f64] {
        self.local.at(sample, node)
    }

    /// Sup norm of the kernel matrices times `D`: the `d k` constant used in
    /// domain-perturbation bounds.
    pub fn max_dk(&self) -> f64 {
        let l = self.l;
        let mut best: f64 = 0.0;
        for s in 0..self.d.n_samples() {
            for a in 0..self.n {
                let blk = self.d.at(s, a);
                for i in 0..l {
                    for j in 0..l {
                        best = best.max(blk[i * l + j]);
                    }
                }
            }
        }
        let kmax = self
            .kernels
            .iter()
            .map(|k| match k {
                Kernel::Constant { value } => *value,
                Kernel::Convolution { profile, scale } => {
                    profile.density(0.0, self.grid.dim) / scale.powi(self.grid.dim as i32)
                }
                Kernel::Table { values } => values.iter().flatten().cloned().fold(0.0, f64::max),
                _ => (0..self.n)
                    .flat_map(|a| (0..self.n).map(move |b| (a, b)))
                    .map(|(a, b)| k.eval(&self.grid.nodes[a], &self.grid.nodes[b], 0.0, self.grid.dim))
                    .fold(0.0, f64::max),
            })
            .fold(0.0, f64::max);
        best * kmax
    }
}

/// Space-time field sampled at the knots `t_0, ..., t_steps` of the period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateField {
    pub l: usize,
    pub n: usize,
    pub steps: usize,
    /// `[knot][node * l + i]`, `steps + 1` knots.
    pub data: Vec<f64>,
}

impl StateField {
    pub fn zeros(l: usize, n: usize, steps: usize) -> Self {
        Self {
            l,
            n,
            steps,
            data: vec![0.0; (steps + 1) * n * l],
        }
    }

    pub fn from_fn(l: usize, grid: &SpatialGrid, time: &TimeGrid, f: impl Fn(&[f64; 2], f64, usize) -> f64) -> Self {
        let mut out = Self::zeros(l, grid.n, time.steps);
        for k in 0..=time.steps {
            let t = time.knot(k);
            for (a, x) in grid.nodes.iter().enumerate() {
                for i in 0..l {
                    out.data[(k * grid.n + a) * l + i] = f(x, t, i);
                }
            }
        }
        out
    }

    pub fn nl(&self) -> usize {
        self.n * self.l
    }

    pub fn knot(&self, k: usize) -> &[f64] {
        let nl = self.nl();
        &self.data[k * nl..(k + 1) * nl]
    }

    pub fn knot_mut(&mut self, k: usize) -> &mut [f64] {
        let nl = self.nl();
        &mut self.data[k * nl..(k + 1) * nl]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a: f64, b| a.max(b.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// Periodic fourth-order central difference `d/dt` at knot `k`.
    pub fn time_derivative(&self, k: usize) -> Vec<f64> {
        fd_periodic(self, k, 4)
    }
}

/// Periodic central difference of order 4 or 6 at knot `k` (knot `steps`
/// coincides with knot 0).
pub fn fd_periodic(f: &StateField, k: usize, order: usize) -> Vec<f64> {
    let s = f.steps as isize;
    let h = 1.0 / f.steps as f64;
    let idx = |off: isize| -> usize { (((k as isize + off) % s + s) % s) as usize };
    let coeffs: &[(isize, f64)] = match order {
        4 => &[(-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)],
        _ => &[
            (-3, -1.0 / 60.0),
            (-2, 9.0 / 60.0),
            (-1, -45.0 / 60.0),
            (1, 45.0 / 60.0),
            (2, -9.0 / 60.0),
            (3, 1.0 / 60.0),
        ],
    };
    let mut out = vec![0.0; f.nl()];
    for &(off, c) in coeffs {
        for (o, v) in out.iter_mut().zip(f.knot(idx(off))) {
            *o += c * v;
        }
    }
    out.iter_mut().for_each(|v| *v /= h);
    out
}

/// Periodic cubic Lagrange interpolation of a knot-sampled field at time `t`.
pub fn interp_periodic(f: &StateField, t: f64, out: &mut [f64]) {
    interp_periodic_range(f, t, 0, out);
}

/// As [`interp_periodic`], restricted to entries `start..start + out.len()`
/// of each knot.
pub fn interp_periodic_range(f: &StateField, t: f64, start: usize, out: &mut [f64]) {
    let s = f.steps;
    let u = t.rem_euclid(1.0) * s as f64;
    let k = (u.floor() as usize).min(s - 1);
    let r = u - k as f64;
    // nodes at -1, 0, 1, 2 relative to k
    let w = [
        -r * (r - 1.0) * (r - 2.0) / 6.0,
        (r + 1.0) * (r - 1.0) * (r - 2.0) / 2.0,
        -(r + 1.0) * r * (r - 2.0) / 2.0,
        (r + 1.0) * r * (r - 1.0) / 6.0,
    ];
    out.iter_mut().for_each(|v| *v = 0.0);
    let len = out.len();
    for (m, wm) in w.iter().enumerate() {
        let kk = ((k + s + m) - 1) % s;
        for (o, v) in out.iter_mut().zip(&f.knot(kk)[start..start + len]) {
            *o += wm * v;
        }
    }
}

/// Local block `B(x_a, t)` at arbitrary `t`, by quadratic interpolation
/// through the half-knot samples of the enclosing step.
pub fn local_block_at(op: &DiscreteOperator, node: usize, t: f64, out: &mut [f64]) {
    if op.local.time_independent {
        out.copy_from_slice(op.local.at(0, node));
        return;
    }
    let steps = op.steps();
    let u = t.rem_euclid(1.0) * steps as f64;
    let k = (u.floor() as usize).min(steps - 1);
    let r = u - k as f64; // in [0, 1]
    let (b0, b1, b2) = (
        op.local.at(2 * k, node),
        op.local.at(2 * k + 1, node),
        op.local.at(2 * k + 2, node),
    );
    // Lagrange at r = 0, 1/2, 1.
    let w0 = 2.0 * (r - 0.5) * (r - 1.0);
    let w1 = -4.0 * r * (r - 1.0);
    let w2 = 2.0 * r * (r - 0.5);
    for i in 0..out.len() {
        out[i] = w0 * b0[i] + w1 * b1[i] + w2 * b2[i];
    }
}

/// `(alpha I - N)^{-1} phi`, where `N = -tau d/dt + B(x, t)` is the local part.
///
/// Solves `tau psi' = (B - alpha) psi + phi` per node with periodic closure
/// `(I - Phi) psi(0) = p`, integrating with RK4 on substeps of each knot
/// interval. `s_n` is `max_x lambda_B(x)`; `alpha` must exceed it by `margin`.
pub fn resolvent_n(op: &DiscreteOperator, alpha: f64, phi: &StateField, s_n: f64, margin: f64) -> Result<StateField> {
    let (n, l, steps, tau) = (op.n, op.l, op.steps(), op.tau);
    if phi.n != n || phi.l != l || phi.steps != steps {
        return Err(NlsError::ShapeMismatch {
            what: "resolvent forcing",
            expected: n * l * (steps + 1),
            got: phi.data.len(),
        });
    }
    if !(alpha > s_n + margin) {
        return Err(NlsError::precondition(format!(
            "resolvent needs alpha > max lambda_A + {margin:e}; got alpha = {alpha}, max lambda_A = {s_n}"
        )));
    }
    let h = 1.0 / steps as f64;
    let bmax = (0..op.local.n_samples())
        .flat_map(|s| (0..n).map(move |a| (s, a)))
        .map(|(s, a)| {
            let b = op.local.at(s, a);
            (0..l)
                .map(|i| {
                    (0..l)
                        .map(|j| (b[i * l + j] - if i == j { alpha } else { 0.0 }).abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let sub = ((h / tau * bmax) / 0.5).ceil().max(1.0) as usize;
    let dt = h / sub as f64;

    let mut out = StateField::zeros(l, n, steps);
    let mut forcing_all = vec![0.0; l];
    let mut blk = vec![0.0; l * l];

    // rhs(t, y, with_forcing) for one node
    let rhs = |node: usize, t: f64, y: &[f64], forced: bool, out_v: &mut [f64], blk: &mut [f64], fbuf: &mut [f64]| {
        local_block_at(op, node, t, blk);
        if forced {
            interp_periodic_range(phi, t, node * l, fbuf);
        }
        for i in 0..l {
            let mut acc = -alpha * y[i];
            for j in 0..l {
                acc += blk[i * l + j] * y[j];
            }
            if forced {
                acc += fbuf[i];
            }
            out_v[i] = acc / tau;
        }
    };

    for node in 0..n {
        // Integrate l homogeneous columns plus one forced particular solution.
        let mut cols: Vec<Vec<f64>> = (0..l)
            .map(|c| (0..l).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut part = vec![0.0; l];
        let mut k1 = vec![0.0; l];
        let mut k2 = vec![0.0; l];
        let mut k3 = vec![0.0; l];
        let mut k4 = vec![0.0; l];
        let mut tmp = vec![0.0; l];
        let rk4 = |y: &mut Vec<f64>,
                   t: f64,
                   forced: bool,
                   k1: &mut Vec<f64>,
                   k2: &mut Vec<f64>,
                   k3: &mut Vec<f64>,
                   k4: &mut Vec<f64>,
                   tmp: &mut Vec<f64>,
                   blk: &mut Vec<f64>,
                   fb: &mut Vec<f64>| {
            rhs(node, t, y, forced, k1, blk, fb);
            for i in 0..l {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            rhs(node, t + 0.5 * dt, tmp, forced, k2, blk, fb);
            for i in 0..l {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            rhs(node, t + 0.5 * dt, tmp, forced, k3, blk, fb);
            for i in 0..l {
                tmp[i] = y[i] + dt * k3[i];
            }
            rhs(node, t + dt, tmp, forced, k4, blk, fb);
            for i in 0..l {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        };
        for k in 0..steps {
            for s in 0..sub {
                let t = k as f64 * h + s as f64 * dt;
                for c in cols.iter_mut() {
                    rk4(
                        c,
                        t,
                        false,
                        &mut k1,
                        &mut k2,
                        &mut k3,
                        &mut k4,
                        &mut tmp,
                        &mut blk,
                        &mut forcing_all,
                    );
                }
                rk4(
                    &mut part,
                    t,
                    true,
                    &mut k1,
                    &mut k2,
                    &mut k3,
                    &mut k4,
                    &mut tmp,
                    &mut blk,
                    &mut forcing_all,
                );
            }
        }
        // (I - Phi) psi0 = p
        let mut m = DMatrix::<f64>::identity(l, l);
        for (c, col) in cols.iter().enumerate() {
            for i in 0..l {
                m[(i, c)] -= col[i];
            }
        }
        let rhs_v = DVector::from_column_slice(&part);
        let psi0 = m
            .lu()
            .solve(&rhs_v)
            .ok_or_else(|| NlsError::precondition("periodic resolvent system is singular"))?;
        let mut y: Vec<f64> = psi0.iter().cloned().collect();
        for i in 0..l {
            out.data[node * l + i] = y[i];
        }
        for k in 0..steps {
            for s in 0..sub {
                let t = k as f64 * h + s as f64 * dt;
                rk4(
                    &mut y,
                    t,
                    true,
                    &mut k1,
                    &mut k2,
                    &mut k3,
                    &mut k4,
                    &mut tmp,
                    &mut blk,
                    &mut forcing_all,
                );
            }
            for i in 0..l {
                out.data[((k + 1) * n + node) * l + i] = y[i];
            }
        }
        // exact periodic closure
        for i in 0..l {
            out.data[(steps * n + node) * l + i] = out.data[node * l + i];
        }
    }
    Ok(out)
}

/// `||(alpha I - N) psi - phi||_inf` at the knots, with a fourth-order
/// periodic time derivative.
pub fn resolvent_residual(op: &DiscreteOperator, alpha: f64, psi: &StateField, phi: &StateField) -> f64 {
    let (n, l, tau) = (op.n, op.l, op.tau);
    let mut worst: f64 = 0.0;
    for k in 0..op.steps() {
        let dpsi = psi.time_derivative(k);
        let y = psi.knot(k);
        let f = phi.knot(k);
        for a in 0..n {
            let b = op.local.at(2 * k, a);
            for i in 0..l {
                let mut bpsi = 0.0;
                for j in 0..l {
                    bpsi += b[i * l + j] * y[a * l + j];
                }
                let r = alpha * y[a * l + i] + tau * dpsi[a * l + i] - bpsi - f[a * l + i];
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    fn scen_a(n: usize) -> OperatorSpec {
        OperatorSpec::raw(
            FieldSource::constant(&[&[1.0]]),
            FieldSource::constant(&[&[0.0]]),
            vec![Kernel::Constant { value: 1.0 }],
            SpatialGrid::interval(0.0, 1.0, n).unwrap(),
            TimeGrid::new(16).unwrap(),
        )
    }

    #[test]
    fn scen_a_apply_and_dense() {
        let op = scen_a(4).discretize().unwrap();
        let r = op.apply_spatial(&[1.0; 4], 0).unwrap();
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let g = op.assemble_dense(0, DEFAULT_DENSE_CAP).unwrap();
        assert!(g.iter().all(|&v| v == 0.25));
        assert!(op.apply_spatial(&[1.0; 3], 0).is_err());
        assert!(matches!(op.assemble_dense(0, 3), Err(NlsError::CapExceeded { .. })));
    }

    #[test]
    fn scen_b_rank_one() {
        let f = Expr::parse("1 + x").unwrap();
        let spec = OperatorSpec::raw(
            FieldSource::constant(&[&[1.0]]),
            FieldSource::constant(&[&[0.0]]),
            vec![Kernel::RankOne { f: f.clone(), g: f }],
            SpatialGrid::interval(0.0, 1.0, 200).unwrap(),
            TimeGrid::new(16).unwrap(),
        );
        let op = spec.discretize().unwrap();
        let u: Vec<f64> = op.grid.nodes.iter().map(|p| 1.0 + p[0]).collect();
        let r = op.apply_spatial(&u, 0).unwrap();
        for (ri, ui) in r.iter().zip(&u) {
            assert!((ri - 7.0 / 3.0 * ui).abs() < 2e-3);
        }
    }

    #[test]
    fn dirichlet_and_neumann_diagonals() {
        let spec = OperatorSpec::raw(
            FieldSource::constant(&[&[1.0]]),
            FieldSource::constant(&[&[0.0]]),
            vec![Kernel::uniform().rescaled(0.1).unwrap()],
            SpatialGrid::interval(0.0, 1.0, 100).unwrap(),
            TimeGrid::new(16).unwrap(),
        );
        let dir = build_bc_variant(&spec, BcMode::Dirichlet)
            .unwrap()
            .discretize()
            .unwrap();
        assert!((0..100).all(|a| dir.local.at(0, a)[0] == -1.0));
        let neu = build_bc_variant(&spec, BcMode::Neumann).unwrap().discretize().unwrap();
        assert!((neu.local.at(0, 50)[0] + 1.0).abs() < 1e-14);
        assert!(neu.local.at(0, 0)[0] > dir.local.at(0, 0)[0]);
    }

    #[test]
    fn strongly_coupled_bc_rejected() {
        let spec = OperatorSpec::raw(
            FieldSource::constant(&[&[1.0, 0.5], &[0.5, 1.0]]),
            FieldSource::constant(&[&[0.0, 0.0], &[0.0, 0.0]]),
            vec![Kernel::uniform(), Kernel::uniform()],
            SpatialGrid::interval(0.0, 1.0, 10).unwrap(),
            TimeGrid::new(8).unwrap(),
        );
        assert!(build_bc_variant(&spec, BcMode::Dirichlet).is_err());
    }

    #[test]
    fn resolvent_of_stationary_problem() {
        let op = scen_a(5).discretize().unwrap();
        let phi = StateField::from_fn(1, &op.grid, &op.time, |_, _, _| 2.5);
        let psi = resolvent_n(&op, 1.0, &phi, 0.0, 1e-6).unwrap();
        assert!(psi.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(resolvent_n(&op, 0.0, &phi, 0.0, 1e-6).is_err());
    }
}
