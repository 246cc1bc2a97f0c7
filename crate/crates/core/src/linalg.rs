//! Dense linear algebra helpers: positivity-preserving matrix exponentials,
//! log-scaled matrices, and Perron power iteration.

use nalgebra::{DMatrix, DVector};

/// `exp(log_scale) * mat`. Keeps huge or tiny period maps representable.
#[derive(Debug, Clone)]
pub struct ScaledMatrix {
    pub log_scale: f64,
    pub mat: DMatrix<f64>,
}

impl ScaledMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            log_scale: 0.0,
            mat: DMatrix::identity(n, n),
        }
    }

    pub fn nrows(&self) -> usize {
        self.mat.nrows()
    }

    /// Rescales `mat` so its largest absolute entry is one.
    pub fn normalize(&mut self) {
        let m = self.mat.amax();
        if m > 0.0 && m.is_finite() {
            self.mat /= m;
            self.log_scale += m.ln();
        }
    }

    /// `self * rhs`.
    pub fn mul(&self, rhs: &ScaledMatrix) -> ScaledMatrix {
        let mut out = ScaledMatrix {
            log_scale: self.log_scale + rhs.log_scale,
            mat: &self.mat * &rhs.mat,
        };
        out.normalize();
        out
    }

    pub fn square(&self) -> ScaledMatrix {
        self.mul(self)
    }

    pub fn transpose(&self) -> ScaledMatrix {
        ScaledMatrix {
            log_scale: self.log_scale,
            mat: self.mat.transpose(),
        }
    }

    /// Unscaled matrix; may overflow for extreme scales.
    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.mat * self.log_scale.exp()
    }
}

/// `exp(h * g)` for a Metzler matrix `g` (nonnegative off-diagonal).
///
/// The diagonal shift `g + cI >= 0` makes every Taylor term nonnegative, so the
/// result is entrywise nonnegative and computed without cancellation.
/// Off-diagonal entries below zero (rounding noise) are treated as zero.
pub fn expm_metzler(g: &DMatrix<f64>, h: f64) -> ScaledMatrix {
    let n = g.nrows();
    assert_eq!(n, g.ncols(), "expm_metzler needs a square matrix");
    if n == 0 {
        return ScaledMatrix::identity(0);
    }
    let c = (0..n).map(|i| -g[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    let mut y = g.clone();
    for j in 0..n {
        for i in 0..n {
            let v = if i == j { g[(i, i)] + c } else { g[(i, j)].max(0.0) };
            y[(i, j)] = (h * v).max(0.0);
        }
    }
    let norm = y.column_iter().map(|c| c.sum()).fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
        y /= 2f64.powi(squarings as i32);
    }
    // Taylor series; all terms nonnegative.
    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..40 {
        term = &term * &y / k as f64;
        sum += &term;
        if term.amax() <= 1e-18 * sum.amax() {
            break;
        }
    }
    let mut out = ScaledMatrix {
        log_scale: 0.0,
        mat: sum,
    };
    out.normalize();
    for _ in 0..squarings {
        out = out.square();
    }
    out.log_scale -= h * c;
    out
}

/// `exp(h * g)` for a small Metzler block stored row-major in `g` (l x l),
/// written row-major into `out`. Scalars take the direct route; backward
/// substeps (`h < 0`) use the general exponential.
pub fn expm_small(g: &[f64], l: usize, h: f64, out: &mut [f64]) {
    if l == 1 {
        out[0] = (h * g[0]).exp();
        return;
    }
    let m = DMatrix::from_row_slice(l, l, g);
    let e = if h >= 0.0 {
        expm_metzler(&m, h).to_dense()
    } else {
        (m * h).exp()
    };
    for i in 0..l {
        for j in 0..l {
            out[i * l + j] = e[(i, j)];
        }
    }
}

/// Largest eigenvalue modulus from a full nonsymmetric eigensolve.
pub fn dense_spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest real part of the eigenvalues.
pub fn dense_spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone)]
pub struct PowerOptions {
    pub max_iter: usize,
    /// Relative tolerance on successive Rayleigh estimates.
    pub tol: f64,
    /// Max-norm tolerance on successive normalized iterates.
    pub vec_tol: f64,
    /// Perturb the iterate once, halfway through the budget.
    pub restart: bool,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-10,
            vec_tol: 1e-9,
            restart: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerOutcome {
    /// Natural log of the dominant eigenvalue estimate.
    pub log_rho: f64,
    /// Eigenvector estimate, max-normalized to 1.
    pub vector: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Estimated |lambda_2| / |lambda_1| from the decay of iterate differences.
    pub gap_ratio: f64,
    /// Collatz-Wielandt bracket (log scale) at the final iterate, if `v > 0`.
    pub cw_log_bracket: Option<(f64, f64)>,
    /// Total magnitude of negative entries clipped to zero.
    pub clipped: f64,
}

fn max_normalize(v: &mut [f64]) -> f64 {
    let m = v.iter().cloned().fold(0.0, |a: f64, b| a.max(b.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
    m
}

/// Power iteration for a nonnegative linear map.
///
/// `apply(v, out)` writes `exp(-ret) * T v` into `out` and returns `ret`, so
/// maps with huge or tiny norms can be represented in log form.
pub fn power_iteration<F>(n: usize, start: Option<&[f64]>, opts: &PowerOptions, mut apply: F) -> PowerOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut v: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => vec![1.0; n],
    };
    max_normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut log_rho = f64::NAN;
    let mut prev_diff = f64::NAN;
    let mut gap_ratio = f64::NAN;
    let mut clipped = 0.0;
    let mut converged = false;
    let mut iters = 0;
    let mut restarted = false;

    while iters < opts.max_iter {
        iters += 1;
        let ls = apply(&v, &mut w);
        for x in w.iter_mut() {
            if *x < 0.0 {
                clipped += -*x;
                *x = 0.0;
            }
        }
        let norm = max_normalize(&mut w);
        if norm == 0.0 || !norm.is_finite() {
            log_rho = if norm == 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
            break;
        }
        let new_log = ls + norm.ln();
        let diff = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if prev_diff.is_finite() && prev_diff > 0.0 && diff > 0.0 {
            gap_ratio = diff / prev_diff;
        }
        prev_diff = diff;
        let dl = (new_log - log_rho).abs();
        std::mem::swap(&mut v, &mut w);
        log_rho = new_log;
        if dl <= opts.tol && diff <= opts.vec_tol {
            converged = true;
            break;
        }
        // Deterministic restart when the iterate has stopped moving but the
        // estimate has not settled.
        if opts.restart && !restarted && iters == opts.max_iter / 2 {
            restarted = true;
            for (j, x) in v.iter_mut().enumerate() {
                *x += 1e-3 * (1.0 + 0.5 * (j as f64).sin());
            }
            max_normalize(&mut v);
        }
    }
    if clipped > 0.0 {
        log::debug!("power iteration clipped negative mass {clipped:e}");
    }

    let cw_log_bracket = if v.iter().all(|&x| x > 0.0) && log_rho.is_finite() {
        let ls = apply(&v, &mut w);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (a, b) in v.iter().zip(&w) {
            let r = b / a;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        if lo > 0.0 {
            Some((ls + lo.ln(), ls + hi.ln()))
        } else {
            Some((f64::NEG_INFINITY, ls + hi.ln()))
        }
    } else {
        None
    };

    PowerOutcome {
        log_rho,
        vector: v,
        iters,
        converged,
        gap_ratio: if gap_ratio.is_finite() { gap_ratio.min(1.0) } else { 0.0 },
        cw_log_bracket,
        clipped,
    }
}

/// Power iteration on a dense nonnegative matrix, squaring the matrix when
/// convergence is slow. The log eigenvalue refers to the original matrix.
pub fn power_dense(m: &ScaledMatrix, start: Option<&[f64]>, opts: &PowerOptions) -> PowerOutcome {
    let n = m.nrows();
    let burst = PowerOptions {
        max_iter: 60,
        restart: false,
        ..opts.clone()
    };
    let mut cur = m.clone();
    let mut power = 1.0f64;
    let mut v: Option<Vec<f64>> = start.map(|s| s.to_vec());
    let mut total_iters = 0;
    let mut gap = f64::NAN;
    for round in 0..48 {
        let out = power_iteration(n, v.as_deref(), &burst, |x, y| {
            let xv = DVector::from_column_slice(x);
            let r = &cur.mat * xv;
            y.copy_from_slice(r.as_slice());
            cur.log_scale
        });
        total_iters += out.iters;
        if round == 0 {
            gap = out.gap_ratio;
        }
        if out.converged || round == 47 || !out.log_rho.is_finite() {
            // Re-evaluate the Rayleigh estimate and bracket against the
            // original matrix for a clean final value.
            let fin = power_iteration(
                n,
                Some(&out.vector),
                &PowerOptions {
                    max_iter: 3,
                    restart: false,
                    ..opts.clone()
                },
                |x, y| {
                    let xv = DVector::from_column_slice(x);
                    let r = &m.mat * xv;
                    y.copy_from_slice(r.as_slice());
                    m.log_scale
                },
            );
            let log_rho = if power > 1.0 { out.log_rho / power } else { fin.log_rho };
            return PowerOutcome {
                log_rho,
                vector: out.vector,
                iters: total_iters + fin.iters,
                converged: out.converged,
                gap_ratio: if gap.is_finite() { gap } else { 0.0 },
                cw_log_bracket: fin.cw_log_bracket,
                clipped: out.clipped + fin.clipped,
            };
        }
        v = Some(out.vector);
        cur = cur.square();
        power *= 2.0;
    }
    unreachable!()
}
