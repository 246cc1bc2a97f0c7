//! Coefficient fields, dispersal kernels and structural checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{NlsError, Result};
use crate::expr::{Expr, Vars};
use crate::grid::{SpatialGrid, TimeGrid};

/// Closure form of a matrix field: writes the row-major `l x l` value at `(x, t)`.
pub type FieldFn = Arc<dyn Fn(&[f64; 2], f64, &mut [f64]) + Send + Sync>;

/// Where the values of a coefficient field come from.
#[derive(Clone)]
pub enum FieldSource {
    /// Row-major `l x l` expressions in `x`, `y`, `t`.
    Exprs(Vec<Vec<Expr>>),
    Func {
        l: usize,
        f: FieldFn,
        time_independent: bool,
    },
    /// Already tabulated; only usable with the grid it was built on.
    Table(Arc<MatrixField>),
}

impl fmt::Debug for FieldSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSource::Exprs(e) => f.debug_tuple("Exprs").field(e).finish(),
            FieldSource::Func { l, .. } => write!(f, "Func(l={l})"),
            FieldSource::Table(t) => write!(f, "Table(l={}, n={})", t.l, t.n),
        }
    }
}

impl FieldSource {
    pub fn constant(m: &[&[f64]]) -> Self {
        FieldSource::Exprs(
            m.iter()
                .map(|row| row.iter().map(|&v| Expr::constant(v)).collect())
                .collect(),
        )
    }

    pub fn scalar(e: Expr) -> Self {
        FieldSource::Exprs(vec![vec![e]])
    }

    /// Parses a row-major matrix of expression strings.
    pub fn parse(rows: &[&[&str]]) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            out.push(r.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>()?);
        }
        Ok(FieldSource::Exprs(out))
    }

    pub fn func<F>(l: usize, time_independent: bool, f: F) -> Self
    where
        F: Fn(&[f64; 2], f64, &mut [f64]) + Send + Sync + 'static,
    {
        FieldSource::Func {
            l,
            f: Arc::new(f),
            time_independent,
        }
    }

    pub fn l(&self) -> usize {
        match self {
            FieldSource::Exprs(e) => e.len(),
            FieldSource::Func { l, .. } => *l,
            FieldSource::Table(t) => t.l,
        }
    }

    /// Evaluates at an arbitrary point. Tables are not point-evaluable.
    pub fn eval(&self, x: &[f64; 2], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            FieldSource::Exprs(rows) => {
                let v = Vars::xyt(x[0], x[1], t);
                let l = rows.len();
                for (i, r) in rows.iter().enumerate() {
                    for (j, e) in r.iter().enumerate() {
                        out[i * l + j] = e.eval(&v);
                    }
                }
                Ok(())
            }
            FieldSource::Func { f, .. } => {
                f(x, t, out);
                Ok(())
            }
            FieldSource::Table(_) => Err(NlsError::invalid("tabulated fields cannot be evaluated off-grid")),
        }
    }

    fn declared_time_independent(&self) -> bool {
        match self {
            FieldSource::Exprs(rows) => rows.iter().flatten().all(|e| e.is_time_independent()),
            FieldSource::Func { time_independent, .. } => *time_independent,
            FieldSource::Table(t) => t.time_independent,
        }
    }
}

/// Matrix-valued coefficient tabulated at every node and every half-knot
/// `j / (2 steps)` of the period. Time-independent fields keep one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub l: usize,
    pub n: usize,
    pub steps: usize,
    pub time_independent: bool,
    /// `[sample][node][i * l + j]`.
    pub values: Vec<f64>,
}

impl MatrixField {
    pub fn n_samples(&self) -> usize {
        if self.time_independent {
            1
        } else {
            2 * self.steps + 1
        }
    }

    /// Row-major `l x l` block at half-knot sample `j` and node `a`.
    #[inline]
    pub fn at(&self, sample: usize, node: usize) -> &[f64] {
        let s = if self.time_independent { 0 } else { sample };
        let ll = self.l * self.l;
        let off = (s * self.n + node) * ll;
        &self.values[off..off + ll]
    }

    #[inline]
    pub fn at_mut(&mut self, sample: usize, node: usize) -> &mut [f64] {
        let s = if self.time_independent { 0 } else { sample };
        let ll = self.l * self.l;
        let off = (s * self.n + node) * ll;
        &mut self.values[off..off + ll]
    }

    #[inline]
    pub fn entry(&self, sample: usize, node: usize, i: usize, j: usize) -> f64 {
        self.at(sample, node)[i * self.l + j]
    }

    pub fn zeros(l: usize, n: usize, steps: usize, time_independent: bool) -> Self {
        let samples = if time_independent { 1 } else { 2 * steps + 1 };
        Self {
            l,
            n,
            steps,
            time_independent,
            values: vec![0.0; samples * n * l * l],
        }
    }

    /// Expands a time-independent field to the full half-knot tabulation.
    pub fn to_time_dependent(&self) -> Self {
        if !self.time_independent {
            return self.clone();
        }
        let mut out = Self::zeros(self.l, self.n, self.steps, false);
        let block = self.values.len();
        for s in 0..out.n_samples() {
            out.values[s * block..(s + 1) * block].copy_from_slice(&self.values);
        }
        out
    }

    /// Entrywise map with a second field of the same shape.
    pub fn zip_map(&self, other: &MatrixField, f: impl Fn(f64, f64) -> f64) -> Result<MatrixField> {
        if self.l != other.l || self.n != other.n || self.steps != other.steps {
            return Err(NlsError::invalid("field shapes differ"));
        }
        let (a, b) = if self.time_independent == other.time_independent {
            (self.clone(), other.clone())
        } else {
            (self.to_time_dependent(), other.to_time_dependent())
        };
        let values = a.values.iter().zip(&b.values).map(|(x, y)| f(*x, *y)).collect();
        Ok(MatrixField { values, ..a })
    }

    pub fn max_abs_diff(&self, other: &MatrixField) -> Result<f64> {
        let d = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(d.values.iter().cloned().fold(0.0, f64::max))
    }

    /// Adds `shift(node) * I` at every sample.
    pub fn add_diagonal(&mut self, shift: &[f64]) {
        let l = self.l;
        for s in 0..self.n_samples() {
            for a in 0..self.n {
                let blk = self.at_mut(s, a);
                for i in 0..l {
                    blk[i * l + i] += shift[a];
                }
            }
        }
    }

    pub fn is_diagonal(&self) -> bool {
        let l = self.l;
        (0..self.n_samples()).all(|s| {
            (0..self.n).all(|a| {
                let b = self.at(s, a);
                (0..l).all(|i| (0..l).all(|j| i == j || b[i * l + j] == 0.0))
            })
        })
    }

    /// True if every block equals the first one.
    pub fn is_constant(&self) -> bool {
        let first = self.at(0, 0).to_vec();
        (0..self.n_samples()).all(|s| (0..self.n).all(|a| self.at(s, a) == first.as_slice()))
    }

    /// Off-diagonal entries nonnegative: condition (H2).
    pub fn offdiag_nonnegative(&self) -> bool {
        let l = self.l;
        self.values
            .chunks(l * l)
            .all(|b| (0..l).all(|i| (0..l).all(|j| i == j || b[i * l + j] >= 0.0)))
    }
}

/// Tabulates `source` on the grid at every half-knot of the period.
///
/// Fails if the source is not 1-periodic in time (gap above 1e-10).
pub fn sample_field(source: &FieldSource, grid: &SpatialGrid, tg: &TimeGrid) -> Result<MatrixField> {
    if let FieldSource::Table(t) = source {
        if t.n != grid.n {
            return Err(NlsError::ShapeMismatch {
                what: "tabulated field nodes",
                expected: grid.n,
                got: t.n,
            });
        }
        if !t.time_independent && t.steps != tg.steps {
            return Err(NlsError::ShapeMismatch {
                what: "tabulated field time steps",
                expected: tg.steps,
                got: t.steps,
            });
        }
        let mut out = (**t).clone();
        out.steps = tg.steps;
        return Ok(out);
    }
    let l = source.l();
    if let FieldSource::Exprs(rows) = source {
        if rows.iter().any(|r| r.len() != l) {
            return Err(NlsError::invalid("coefficient matrix rows must all have length l"));
        }
    }
    let ll = l * l;
    let mut buf0 = vec![0.0; ll];
    let mut buf1 = vec![0.0; ll];
    for (a, x) in grid.nodes.iter().enumerate() {
        source.eval(x, 0.0, &mut buf0)?;
        source.eval(x, 1.0, &mut buf1)?;
        for k in 0..ll {
            let gap = (buf0[k] - buf1[k]).abs();
            if gap > 1e-10 || !buf0[k].is_finite() {
                return Err(NlsError::NotPeriodic { node: a, gap });
            }
        }
    }
    let ti = source.declared_time_independent();
    let mut field = MatrixField::zeros(l, grid.n, tg.steps, ti);
    let samples = field.n_samples();
    for s in 0..samples {
        let t = if ti { 0.0 } else { tg.sample_time(s) };
        for (a, x) in grid.nodes.iter().enumerate() {
            source.eval(x, t, field.at_mut(s, a))?;
        }
    }
    if !ti {
        // Enforce exact periodicity.
        let block = grid.n * ll;
        let (head, tail) = field.values.split_at_mut((samples - 1) * block);
        tail.copy_from_slice(&head[..block]);
    }
    if field.values.iter().any(|v| !v.is_finite()) {
        return Err(NlsError::invalid("coefficient field has non-finite values"));
    }
    Ok(field)
}

/// Radial base profiles for convolution kernels, each with unit mass on R^N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// `1/2` on `[-1, 1]` (1D), `1/pi` on the unit disc (2D).
    Uniform,
    /// `1 - |z|` on `[-1, 1]` (1D), `(3/pi)(1 - |z|)` on the unit disc (2D).
    Triangular,
    /// Standard Gaussian truncated at `|z| = truncate` and renormalized.
    Gaussian { truncate: f64 },
}

impl Profile {
    pub fn radius(&self) -> f64 {
        match self {
            Profile::Uniform | Profile::Triangular => 1.0,
            Profile::Gaussian { truncate } => *truncate,
        }
    }

    /// Density at radius `r >= 0` in dimension `dim`.
    pub fn density(&self, r: f64, dim: usize) -> f64 {
        let pi = std::f64::consts::PI;
        match (self, dim) {
            (Profile::Uniform, 1) => {
                if r <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            (Profile::Uniform, _) => {
                if r <= 1.0 {
                    1.0 / pi
                } else {
                    0.0
                }
            }
            (Profile::Triangular, 1) => (1.0 - r).max(0.0),
            (Profile::Triangular, _) => 3.0 / pi * (1.0 - r).max(0.0),
            (Profile::Gaussian { truncate }, 1) => {
                if r > *truncate {
                    return 0.0;
                }
                let z = erf(truncate / std::f64::consts::SQRT_2);
                (-0.5 * r * r).exp() / ((2.0 * pi).sqrt() * z)
            }
            (Profile::Gaussian { truncate }, _) => {
                if r > *truncate {
                    return 0.0;
                }
                let z = 1.0 - (-0.5 * truncate * truncate).exp();
                (-0.5 * r * r).exp() / (2.0 * pi * z)
            }
        }
    }

    /// 1D cumulative distribution.
    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            Profile::Uniform => ((z + 1.0) / 2.0).clamp(0.0, 1.0),
            Profile::Triangular => {
                if z <= -1.0 {
                    0.0
                } else if z <= 0.0 {
                    0.5 * (1.0 + z) * (1.0 + z)
                } else if z < 1.0 {
                    1.0 - 0.5 * (1.0 - z) * (1.0 - z)
                } else {
                    1.0
                }
            }
            Profile::Gaussian { truncate } => {
                let t = *truncate;
                let zc = z.clamp(-t, t);
                let s = std::f64::consts::SQRT_2;
                (erf(zc / s) + erf(t / s)) / (2.0 * erf(t / s))
            }
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Dispersal kernel `k(x, y, t)`.
///
/// Convolution kernels are `scale^-N profile(|x - y| / scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Constant {
        value: f64,
    },
    Convolution {
        profile: Profile,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `f(x, t) g(y, t)`, with `g` written in the variable `x` as well.
    RankOne {
        f: Expr,
        g: Expr,
    },
    /// `expr(x, y, t)`; 1D only (`x` target, `y` source).
    General {
        expr: Expr,
    },
    /// Node-pair samples `k(x_a, y_b)` for a fixed grid.
    Table {
        values: Vec<Vec<f64>>,
    },
}

impl Kernel {
    pub fn uniform() -> Self {
        Kernel::Convolution {
            profile: Profile::Uniform,
            scale: 1.0,
        }
    }

    pub fn triangular() -> Self {
        Kernel::Convolution {
            profile: Profile::Triangular,
            scale: 1.0,
        }
    }

    pub fn is_convolution(&self) -> bool {
        matches!(self, Kernel::Convolution { .. })
    }

    pub fn is_time_independent(&self) -> bool {
        match self {
            Kernel::Constant { .. } | Kernel::Convolution { .. } | Kernel::Table { .. } => true,
            Kernel::RankOne { f, g } => f.is_time_independent() && g.is_time_independent(),
            Kernel::General { expr } => expr.is_time_independent(),
        }
    }

    pub fn is_mass_normalized(&self) -> bool {
        self.is_convolution()
    }

    /// `k(x, y, t)`. Table kernels need node indices and return `NaN` here.
    pub fn eval(&self, x: &[f64; 2], y: &[f64; 2], t: f64, dim: usize) -> f64 {
        match self {
            Kernel::Constant { value } => *value,
            Kernel::Convolution { profile, scale } => {
                let r = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt() / scale;
                profile.density(r, dim) / scale.powi(dim as i32)
            }
            Kernel::RankOne { f, g } => f.eval(&Vars::xyt(x[0], x[1], t)) * g.eval(&Vars::xyt(y[0], y[1], t)),
            Kernel::General { expr } => expr.eval(&Vars::xyt(x[0], y[0], t)),
            Kernel::Table { .. } => f64::NAN,
        }
    }

    fn eval_nodes(&self, grid: &SpatialGrid, a: usize, b: usize, t: f64) -> f64 {
        match self {
            Kernel::Table { values } => values[a][b],
            _ => self.eval(&grid.nodes[a], &grid.nodes[b], t, grid.dim),
        }
    }

    /// The sigma-rescaled kernel `sigma^-N k(z / sigma)`.
    pub fn rescaled(&self, sigma: f64) -> Result<Kernel> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(NlsError::invalid(format!("sigma must be positive, got {sigma}")));
        }
        match self {
            Kernel::Convolution { profile, scale } => Ok(Kernel::Convolution {
                profile: *profile,
                scale: scale * sigma,
            }),
            _ => Err(NlsError::invalid("only convolution kernels can be rescaled")),
        }
    }

    /// `(support radius, profile)` for convolution kernels.
    fn conv(&self) -> Option<(f64, Profile)> {
        match self {
            Kernel::Convolution { profile, scale } => Some((profile.radius() * scale, *profile)),
            _ => None,
        }
    }

    fn check_table(&self, grid: &SpatialGrid) -> Result<()> {
        if let Kernel::Table { values } = self {
            if values.len() != grid.n || values.iter().any(|r| r.len() != grid.n) {
                return Err(NlsError::ShapeMismatch {
                    what: "kernel table",
                    expected: grid.n,
                    got: values.len(),
                });
            }
        }
        if let Kernel::General { .. } = self {
            if grid.dim != 1 {
                return Err(NlsError::invalid("general expression kernels are 1D only"));
            }
        }
        Ok(())
    }

    /// Matrix `K` with `P[u](x_a) = sum_b K[a][b] u(y_b)` at time `t`.
    ///
    /// 1D convolution kernels are integrated exactly over each node's dual
    /// cell (product integration); everything else is collocated with the
    /// grid weights.
    pub fn matrix(&self, grid: &SpatialGrid, t: f64) -> Result<DMatrix<f64>> {
        self.check_table(grid)?;
        let n = grid.n;
        let mut k = DMatrix::zeros(n, n);
        match (self, grid.dim) {
            (Kernel::Convolution { profile, scale }, 1) => {
                let edges = dual_edges(grid);
                for a in 0..n {
                    let x = grid.nodes[a][0];
                    let mut prev = profile.cdf((x - edges[0]) / scale);
                    for b in 0..n {
                        let next = profile.cdf((x - edges[b + 1]) / scale);
                        k[(a, b)] = (prev - next).max(0.0);
                        prev = next;
                    }
                }
            }
            _ => {
                for a in 0..n {
                    for b in 0..n {
                        k[(a, b)] = self.eval_nodes(grid, a, b, t) * grid.weights[b];
                    }
                }
            }
        }
        Ok(k)
    }

    /// `int_Omega k(y, x_b, t) dy` for every node `b` (mass retained in Omega).
    pub fn retained_mass(&self, grid: &SpatialGrid, t: f64) -> Result<Vec<f64>> {
        self.check_table(grid)?;
        let n = grid.n;
        match (self, grid.dim) {
            (Kernel::Convolution { profile, scale }, 1) => {
                let (lo, hi) = (grid.bounds.lower[0], grid.bounds.upper[0]);
                Ok(grid
                    .nodes
                    .iter()
                    .map(|p| profile.cdf((hi - p[0]) / scale) - profile.cdf((lo - p[0]) / scale))
                    .collect())
            }
            _ => Ok((0..n)
                .map(|b| (0..n).map(|a| self.eval_nodes(grid, a, b, t) * grid.weights[a]).sum())
                .collect()),
        }
    }

    /// `int_{R^N} k(z) |z|^p dz` for convolution kernels, by 2-point Gauss
    /// quadrature on a box 1.5 times the support.
    pub fn moment(&self, p: i32, dim: usize) -> Result<f64> {
        let (radius, profile) = self
            .conv()
            .ok_or_else(|| NlsError::invalid("moments need a convolution kernel"))?;
        if let Profile::Gaussian { truncate } = profile {
            if !(truncate > 0.0 && truncate.is_finite()) {
                return Err(NlsError::invalid("gaussian truncation must be finite and positive"));
            }
        }
        let scale = match self {
            Kernel::Convolution { scale, .. } => *scale,
            _ => unreachable!(),
        };
        // Cells chosen so the support edges and the origin fall on cell edges.
        let cells = 6000;
        let big = 1.5 * radius;
        let h = big / cells as f64;
        let g = 0.5 / 3f64.sqrt();
        let mut sum = 0.0;
        for c in 0..cells {
            for off in [0.5 - g, 0.5 + g] {
                let r = (c as f64 + off) * h;
                let dens = profile.density(r / scale, dim) / scale.powi(dim as i32);
                let jac = if dim == 1 { 2.0 } else { 2.0 * std::f64::consts::PI * r };
                sum += 0.5 * h * jac * dens * r.powi(p);
            }
        }
        Ok(sum)
    }

    pub fn mass(&self, dim: usize) -> Result<f64> {
        self.moment(0, dim)
    }

    /// `m_2 = int k(z) |z|^2 dz`.
    pub fn second_moment(&self, dim: usize) -> Result<f64> {
        self.moment(2, dim)
    }

    /// `k(x, y) = k(y, x)` at all node pairs.
    pub fn is_symmetric(&self, grid: &SpatialGrid, t: f64) -> bool {
        match self {
            Kernel::Constant { .. } | Kernel::Convolution { .. } => true,
            Kernel::RankOne { f, g } => f == g,
            _ => (0..grid.n).all(|a| {
                (0..a).all(|b| {
                    let (u, v) = (self.eval_nodes(grid, a, b, t), self.eval_nodes(grid, b, a, t));
                    (u - v).abs() <= 1e-12 * (1.0 + u.abs())
                })
            }),
        }
    }
}

/// Edges of the dual cells of a 1D grid: cell `b` is `[e_b, e_{b+1}]`.
pub fn dual_edges(grid: &SpatialGrid) -> Vec<f64> {
    let mut e = Vec::with_capacity(grid.n + 1);
    let mut acc = grid.bounds.lower[0];
    e.push(acc);
    for w in &grid.weights {
        acc += w;
        e.push(acc);
    }
    e[grid.n] = grid.bounds.upper[0];
    e
}

/// Rescales every kernel of a set by `sigma`.
pub fn rescale_kernels(kernels: &[Kernel], sigma: f64) -> Result<Vec<Kernel>> {
    kernels.iter().map(|k| k.rescaled(sigma)).collect()
}

/// Per-species `m_2`.
pub fn kernel_second_moments(kernels: &[Kernel], dim: usize) -> Result<Vec<f64>> {
    kernels.iter().map(|k| k.second_moment(dim)).collect()
}

/// Which of the structural conditions hold on the sampled data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub h1: bool,
    pub h2: bool,
    pub h2_tilde: bool,
    pub h3: bool,
    pub h1_tilde: bool,
    pub h3_tilde: bool,
    pub cond_d: bool,
    pub f1: bool,
    pub f2: bool,
}

const ZERO_TOL: f64 = 1e-14;

/// Strong connectivity of the off-diagonal pattern of a row-major block.
pub fn is_irreducible(block: &[f64], l: usize) -> bool {
    if l == 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; l];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..l {
                let e = if forward { block[i * l + j] } else { block[j * l + i] };
                if i != j && !seen[j] && e.abs() >= ZERO_TOL {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Inputs to [`check_structure`].
pub struct StructureInput<'a> {
    /// Effective dispersal matrix `D` (already `C D0` in scaled mode).
    pub d: &'a MatrixField,
    pub a: &'a MatrixField,
    /// Outflow diagonal `D0` in scaled mode.
    pub d0: Option<&'a MatrixField>,
    pub c: Option<&'a DMatrix<f64>>,
    pub kernels: &'a [Kernel],
    pub grid: &'a SpatialGrid,
    pub time: &'a TimeGrid,
}

pub fn check_structure(inp: &StructureInput<'_>) -> StructureReport {
    let d = inp.d;
    let a = inp.a;
    let l = a.l;
    let grid = inp.grid;
    let samples = if d.time_independent && a.time_independent {
        1
    } else {
        2 * inp.time.steps + 1
    };

    let h1 = d
        .values
        .chunks(l * l)
        .all(|b| (0..l).all(|i| (0..l).all(|j| b[i * l + j] >= 0.0) && b[i * l + i] > 0.0));
    let h2 = a.offdiag_nonnegative();
    let h2_tilde =
        (0..samples).all(|s| (0..grid.n).all(|x| is_irreducible(d.at(s, x), l) || is_irreducible(a.at(s, x), l)));
    let kernel_times: Vec<f64> = (0..samples)
        .map(|s| if samples == 1 { 0.0 } else { inp.time.sample_time(s) })
        .collect();
    let h3 = inp.kernels.iter().all(|k| {
        kernel_times.iter().all(|&t| {
            (0..grid.n).all(|x| match k {
                Kernel::Table { values } => values.get(x).and_then(|r| r.get(x)).is_some_and(|&v| v > 0.0),
                _ => k.eval(&grid.nodes[x], &grid.nodes[x], t, grid.dim) > 0.0,
            })
        })
    });
    let h3_tilde = inp.kernels.iter().all(|k| k.is_convolution());
    let mass_ok = inp.kernels.iter().all(|k| k.is_mass_normalized());

    let h1_tilde = match (inp.c, inp.d0) {
        (Some(_), Some(d0)) => d0.is_diagonal(),
        _ => column_ratio_constant(d),
    };
    let c_identity = match inp.c {
        Some(c) => *c == DMatrix::identity(l, l),
        None => d.is_diagonal(),
    };
    let cond_d = h1_tilde && c_identity && mass_ok;

    let f1 = h1 && d.is_constant() && {
        let b = d.at(0, 0);
        let sym = (0..l).all(|i| (0..l).all(|j| b[i * l + j] == b[j * l + i]));
        let diag_ok = match inp.d0 {
            Some(d0) => d0.is_constant() && (0..l).all(|i| d0.at(0, 0)[i * l + i] == b[i * l + i]),
            None => true,
        };
        sym && diag_ok
    };
    let f2 = inp.kernels.windows(2).all(|w| w[0] == w[1])
        && inp
            .kernels
            .iter()
            .all(|k| kernel_times.iter().all(|&t| k.is_symmetric(grid, t)))
        && a.values
            .chunks(l * l)
            .all(|b| (0..l).all(|i| (0..l).all(|j| b[i * l + j] == b[j * l + i])));

    StructureReport {
        h1,
        h2,
        h2_tilde,
        h3,
        h1_tilde,
        h3_tilde,
        cond_d,
        f1,
        f2,
    }
}

/// `D = C D0` with constant `C` and diagonal `D0` iff `d_ij / d_jj` is
/// constant over all samples.
fn column_ratio_constant(d: &MatrixField) -> bool {
    let l = d.l;
    let first = d.at(0, 0);
    if (0..l).any(|j| first[j * l + j] <= 0.0) {
        return false;
    }
    let ratio = |b: &[f64], i: usize, j: usize| b[i * l + j] / b[j * l + j];
    d.values.chunks(l * l).all(|b| {
        (0..l).all(|i| (0..l).all(|j| b[j * l + j] > 0.0 && (ratio(b, i, j) - ratio(first, i, j)).abs() <= 1e-12))
    })
}
