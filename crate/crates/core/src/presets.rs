//! Built-in scenarios.

use nalgebra::DMatrix;

use crate::error::{NlsError, Result};
use crate::expr::Expr;
use crate::fields::{FieldSource, Kernel};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::models::{StemCellParams, ZikaParams};
use crate::operator::OperatorSpec;

pub const OPERATOR_PRESETS: [&str; 6] = ["SCEN-A", "SCEN-B", "SCEN-C", "SCEN-D", "SCEN-E", "SCEN-F"];
pub const ZIKA_PRESETS: [&str; 3] = ["Z-(i)", "Z-(ii)", "Z-(iii)"];
pub const STEMCELL_PRESETS: [&str; 3] = ["S-n0-decay", "S-n0-neutral", "S-n2-persist"];

/// Default `sigma` of the scaled presets.
pub const SCEN_E_SIGMA: f64 = 0.1;

fn expr(s: &str) -> FieldSource {
    FieldSource::scalar(Expr::parse(s).expect("preset expression"))
}

fn grid(n: usize) -> Result<SpatialGrid> {
    SpatialGrid::interval(0.0, 1.0, n)
}

fn unknown(name: &str, family: &[&str]) -> NlsError {
    NlsError::invalid(format!(
        "unknown preset `{name}`; expected one of {}",
        family.join(", ")
    ))
}

/// Operator presets on `[0, 1]` with `n` nodes and `steps` time steps.
pub fn operator_preset(name: &str, n: usize, steps: usize) -> Result<OperatorSpec> {
    let (g, t) = (grid(n)?, TimeGrid::new(steps)?);
    let one = || FieldSource::constant(&[&[1.0]]);
    let constant = Kernel::Constant { value: 1.0 };
    let spec = match name {
        "SCEN-A" => OperatorSpec::raw(one(), FieldSource::constant(&[&[0.0]]), vec![constant], g, t),
        "SCEN-B" => {
            let f = Expr::parse("1 + x")?;
            let k = Kernel::RankOne { f: f.clone(), g: f };
            OperatorSpec::raw(one(), FieldSource::constant(&[&[0.0]]), vec![k], g, t)
        }
        "SCEN-C" => OperatorSpec::raw(one(), expr("sin(2*pi*t)"), vec![constant], g, t),
        "SCEN-D" => OperatorSpec::raw(
            FieldSource::constant(&[&[1.0, 0.0], &[0.0, 1.0]]),
            FieldSource::constant(&[&[0.0, 1.0], &[1.0, 0.0]]),
            vec![constant.clone(), constant],
            g,
            t,
        ),
        "SCEN-E" => OperatorSpec::scaled(
            DMatrix::from_element(1, 1, 1.0),
            FieldSource::constant(&[&[6.0]]),
            FieldSource::constant(&[&[0.0]]),
            vec![Kernel::uniform()],
            SCEN_E_SIGMA,
            2.0,
            g,
            t,
        ),
        "SCEN-F" => OperatorSpec::scaled(
            DMatrix::from_element(1, 1, 1.0),
            one(),
            expr("4 - (x - 0.5)^2"),
            vec![Kernel::uniform()],
            1.0,
            0.0,
            g,
            t,
        ),
        _ => return Err(unknown(name, &OPERATOR_PRESETS)),
    };
    Ok(spec)
}

/// Epidemic presets: endemic, vector-only and extinction regimes.
pub fn zika_preset(name: &str, n: usize, steps: usize) -> Result<ZikaParams> {
    let (beta, rho, sigma1) = match name {
        "Z-(i)" => ("3 + sin(2*pi*t)", "0.5", "2"),
        "Z-(ii)" => ("3 + sin(2*pi*t)", "1.5", "0.2"),
        "Z-(iii)" => ("0.5 + 0.2*sin(2*pi*t)", "0.5", "2"),
        _ => return Err(unknown(name, &ZIKA_PRESETS)),
    };
    Ok(ZikaParams {
        h_u: expr("1 + 0.5*x"),
        rho: expr(rho),
        sigma1: expr(sigma1),
        sigma2: expr("1 + 0.5*cos(2*pi*t)"),
        beta: expr(beta),
        mu: expr("1"),
        d1: expr("0.6"),
        d2: expr("0.6"),
        k1: Kernel::uniform(),
        k2: Kernel::uniform(),
        sigma: 0.1,
        m: 2.0,
        tau: 1.0,
        grid: grid(n)?,
        time: TimeGrid::new(steps)?,
    })
}

/// Initial data `(H_i, V_u, V_i) = (0.5, 1 + x, 0.2)`.
pub fn zika_initial(grid: &SpatialGrid) -> Vec<f64> {
    grid.nodes.iter().flat_map(|x| [0.5, 1.0 + x[0], 0.2]).collect()
}

/// Stem-cell presets with their initial data. The neutral preset carries
/// `shift = 0`; [`neutral_shift`] supplies the value that makes `s = 0`.
pub fn stemcell_preset(name: &str, n: usize, steps: usize) -> Result<(StemCellParams, Vec<Vec<f64>>)> {
    let (g, time) = (grid(n)?, TimeGrid::new(steps)?);
    let two: Vec<Vec<f64>> = vec![
        g.nodes.iter().flat_map(|x| [1.0 + x[0], 2.0 - x[0]]).collect(),
        g.nodes.iter().flat_map(|x| [0.1 + 0.1 * x[0], 0.05]).collect(),
    ];
    let betas = || vec![expr("1 + 0.5*x"), expr("1.5 - 0.5*x")];
    let kappas = || vec![expr("0.5 + 0.2*sin(2*pi*t)"), expr("0.3 + 0.1*cos(2*pi*t)")];
    let p = match name {
        "S-n0-decay" => {
            let q0 = g.nodes.iter().map(|x| 1.0 + x[0]).collect();
            let p = StemCellParams {
                c: DMatrix::from_element(1, 1, 1.0),
                beta: vec![expr("1")],
                kappa: vec![expr("2")],
                kernels: vec![Kernel::Constant { value: 1.0 }],
                n: 0.0,
                tau: 1.0,
                shift: 0.0,
                grid: g,
                time,
            };
            return Ok((p, vec![q0]));
        }
        "S-n0-neutral" => StemCellParams {
            c: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]),
            beta: betas(),
            kappa: kappas(),
            kernels: vec![Kernel::uniform(); 2],
            n: 0.0,
            tau: 1.0,
            shift: 0.0,
            grid: g,
            time,
        },
        "S-n2-persist" => StemCellParams {
            c: DMatrix::from_row_slice(2, 2, &[2.5, 0.3, 0.3, 2.4]),
            beta: betas(),
            kappa: kappas(),
            kernels: vec![Kernel::uniform(); 2],
            n: 2.0,
            tau: 1.0,
            shift: 0.0,
            grid: g,
            time,
        },
        _ => return Err(unknown(name, &STEMCELL_PRESETS)),
    };
    Ok((p, two))
}

/// `-s` for the unshifted parameters, so that the shifted problem is neutral.
pub fn neutral_shift(params: &StemCellParams) -> Result<f64> {
    let mut p = params.clone();
    p.shift = 0.0;
    let op = p.linear_operator()?;
    let r = crate::floquet::spectral_bound_op(
        &op,
        &crate::floquet::SpectralOptions {
            adjoint: false,
            ..Default::default()
        },
    )?;
    Ok(-r.s)
}
