//! Run configuration, command dispatch and result files.
//!
//! A run reads one JSON document, resolves it against the built-in presets,
//! and writes `resolved-config.json`, `results.json` and `results.csv` into
//! the output directory. Floats in `results.json` carry 17 significant
//! digits, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::approximation::sandwich_check;
use crate::asymptotics::{local_problem, sweep_dispersal_range, sweep_dispersal_rate, sweep_frequency, SweepResult};
use crate::error::{NlsError, Result};
use crate::expr::Expr;
use crate::fields::{FieldSource, Kernel};
use crate::floquet::{existence_criteria, spectral_bound, SpectralResult};
use crate::grid::{BoxDomain, QuadratureRule, SpatialGrid, TimeGrid};
use crate::local_limit::local_principal_eigen;
use crate::models::{classify_stemcell, classify_zika, nonlocal_to_local_ivp_error};
use crate::operator::{BcMode, OperatorSpec};
use crate::presets::{
    neutral_shift, operator_preset, stemcell_preset, zika_initial, zika_preset, STEMCELL_PRESETS, ZIKA_PRESETS,
};
use crate::variational::{certify_equality, CertifyMode, CertifyOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Spectrum,
    Existence,
    Approx,
    Certify,
    SweepRate,
    SweepRange,
    SweepFreq,
    LocalEigen,
    Zika,
    Stemcell,
    Convergence,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Existence => "existence",
            Command::Approx => "approx",
            Command::Certify => "certify",
            Command::SweepRate => "sweep-rate",
            Command::SweepRange => "sweep-range",
            Command::SweepFreq => "sweep-freq",
            Command::LocalEigen => "local-eigen",
            Command::Zika => "zika",
            Command::Stemcell => "stemcell",
            Command::Convergence => "convergence",
        }
    }
}

/// Dispersal part of an inline operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InlineDispersal {
    /// `D(x, t)` as a row-major matrix of expressions.
    Raw { d: Vec<Vec<String>> },
    /// `D = sigma^-m C D0` with constant `C` and diagonal `D0`.
    Scaled { c: Vec<Vec<f64>>, d0: Vec<Vec<String>> },
}

/// Operator given in the config file instead of by preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSpec {
    #[serde(default = "unit_interval")]
    pub domain: BoxDomain,
    #[serde(default)]
    pub quadrature: QuadratureRule,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub m: f64,
    pub dispersal: InlineDispersal,
    /// `A(x, t)` as a row-major matrix of expressions.
    pub a: Vec<Vec<String>>,
    /// One kernel per species; required, checked after parsing.
    #[serde(default)]
    pub kernels: Option<Vec<Kernel>>,
    #[serde(default)]
    pub bc: BcMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Keep every `thin`-th row of bulk CSV output.
    #[serde(default = "one_usize")]
    pub thin: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, thin: 1 }
    }
}

/// Parsed run configuration. Exactly one of `scenario` and `spec` is set.
///
/// Defaults: `n = 200` nodes per axis, `steps = 400`, `tolerance = 1e-6`,
/// `periods = 200`, `levels = 4`, `eps0 = 0.1`, `t_end = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub spec: Option<InlineSpec>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    /// Certification gap tolerance.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Sweep values (scales, sigmas or taus); per-command defaults otherwise.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default = "default_periods")]
    pub periods: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(default)]
    pub certify_mode: CertifyMode,
    /// Initial data for `convergence`, one expression per species; `sin(pi*x)` otherwise.
    #[serde(default)]
    pub u0: Option<Vec<String>>,
    #[serde(default = "one")]
    pub t_end: f64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Adds wall-clock timings to `results.json`.
    #[serde(default)]
    pub record_timings: bool,
}

fn unit_interval() -> BoxDomain {
    BoxDomain::interval(0.0, 1.0)
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_n() -> usize {
    200
}
fn default_steps() -> usize {
    400
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_periods() -> usize {
    200
}
fn default_levels() -> usize {
    4
}
fn default_eps0() -> f64 {
    0.1
}

fn config_err(path: &str, msg: impl Into<String>) -> NlsError {
    NlsError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Strict parse with path-qualified errors, followed by validation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(&path, e.into_inner().to_string())
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    match (&cfg.scenario, &cfg.spec) {
        (Some(_), Some(_)) => return Err(config_err(".", "give either `scenario` or `spec`, not both")),
        (None, None) => return Err(config_err(".", "missing field `scenario` (or an inline `spec`)")),
        _ => {}
    }
    if let Some(spec) = &cfg.spec {
        if spec.kernels.is_none() {
            return Err(config_err("spec.kernels", "kernels required"));
        }
    }
    if cfg.n < 2 {
        return Err(config_err("n", "need at least 2 nodes"));
    }
    if cfg.steps < 1 {
        return Err(config_err("steps", "need at least 1 time step"));
    }
    if cfg.output.thin < 1 {
        return Err(config_err("output.thin", "must be at least 1"));
    }
    if cfg.workers == Some(0) {
        return Err(config_err("workers", "must be at least 1"));
    }
    let model = |family: &[&str]| -> Result<()> {
        match &cfg.scenario {
            Some(name) if family.contains(&name.as_str()) => Ok(()),
            _ => Err(config_err(
                "scenario",
                format!(
                    "`{}` needs one of the presets {}",
                    cfg.command.name(),
                    family.join(", ")
                ),
            )),
        }
    };
    match cfg.command {
        Command::Zika => model(&ZIKA_PRESETS),
        Command::Stemcell => model(&STEMCELL_PRESETS),
        _ => Ok(()),
    }
}

/// Serializes a config so that `parse_config(&emit_config(c)) == c`.
pub fn emit_config(cfg: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}

fn matrix(rows: &[Vec<String>], path: &str) -> Result<FieldSource> {
    let l = rows.len();
    if l == 0 || rows.iter().any(|r| r.len() != l) {
        return Err(config_err(path, "expected a nonempty square matrix"));
    }
    let mut out = Vec::with_capacity(l);
    for (i, r) in rows.iter().enumerate() {
        let parsed = r
            .iter()
            .enumerate()
            .map(|(j, s)| Expr::parse(s).map_err(|e| config_err(&format!("{path}[{i}][{j}]"), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.push(parsed);
    }
    Ok(FieldSource::Exprs(out))
}

fn inline_operator(s: &InlineSpec, n: usize, steps: usize) -> Result<OperatorSpec> {
    let dim = s.domain.dim();
    let grid = SpatialGrid::new(s.domain.clone(), &vec![n; dim], s.quadrature)?;
    let time = TimeGrid::new(steps)?;
    let a = matrix(&s.a, "spec.a")?;
    let kernels = s
        .kernels
        .clone()
        .ok_or_else(|| config_err("spec.kernels", "kernels required"))?;
    let mut op = match &s.dispersal {
        InlineDispersal::Raw { d } => OperatorSpec::raw(matrix(d, "spec.dispersal.raw.d")?, a, kernels, grid, time),
        InlineDispersal::Scaled { c, d0 } => {
            let l = c.len();
            if l == 0 || c.iter().any(|r| r.len() != l) {
                return Err(config_err(
                    "spec.dispersal.scaled.c",
                    "expected a nonempty square matrix",
                ));
            }
            let cm = DMatrix::from_row_iterator(l, l, c.iter().flatten().copied());
            let d0 = matrix(d0, "spec.dispersal.scaled.d0")?;
            OperatorSpec::scaled(cm, d0, a, kernels, s.sigma, s.m, grid, time)
        }
    };
    op.tau = s.tau;
    op.bc = s.bc;
    Ok(op)
}

/// Operator for the config, with the `tau`, `sigma` and `m` overrides applied.
pub fn resolve_operator(cfg: &RunConfig) -> Result<OperatorSpec> {
    let mut op = match (&cfg.scenario, &cfg.spec) {
        (Some(name), _) => {
            operator_preset(name, cfg.n, cfg.steps).map_err(|e| config_err("scenario", e.to_string()))?
        }
        (None, Some(s)) => inline_operator(s, cfg.n, cfg.steps)?,
        (None, None) => return Err(config_err(".", "missing field `scenario`")),
    };
    if let Some(tau) = cfg.tau {
        op.tau = tau;
    }
    if let Some(sigma) = cfg.sigma {
        op.sigma = sigma;
    }
    if let Some(m) = cfg.m {
        op.m = m;
    }
    Ok(op)
}

/// Outcome of [`run`]: the process exit status and the file contents written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// 0 on success, 2 when a certification or acceptance check fails.
    pub status: i32,
    pub results_json: String,
    pub results_csv: String,
    pub resolved_config: String,
}

struct Computed {
    ok: bool,
    summary: Value,
    csv: String,
}

/// Runs the configured command and writes the result files into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let output = execute(cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved-config.json"), &output.resolved_config)?;
    std::fs::write(out.join("results.json"), &output.results_json)?;
    std::fs::write(out.join("results.csv"), &output.results_csv)?;
    Ok(output)
}

/// Runs the configured command without touching the file system.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    validate(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| NlsError::invalid(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let computed = pool.install(|| dispatch(cfg))?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut doc = json!({
        "command": cfg.command.name(),
        "scenario": cfg.scenario.clone().unwrap_or_else(|| "inline".into()),
        "status": if computed.ok { "ok" } else { "failed" },
        "summary": computed.summary,
    });
    if cfg.record_timings {
        doc["timings"] = json!({ "wall_seconds": elapsed });
    }
    Ok(RunOutput {
        status: if computed.ok { 0 } else { 2 },
        results_json: format_json(&doc),
        results_csv: computed.csv,
        resolved_config: emit_config(cfg),
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn spectral_summary(r: &SpectralResult) -> Value {
    json!({
        "s": r.s,
        "log_rho": r.log_rho,
        "rho": r.rho,
        "tau": r.tau,
        "residual": r.residual,
        "converged": r.converged,
        "power_iters": r.power_iters,
        "gap_estimate": r.gap_estimate,
        "s_n": r.s_n,
        "s_adjoint": r.s_adjoint,
        "biorthogonality": r.biorthogonality,
        "cw_bracket": r.cw_bracket,
        "min_eigenfunction": r.min_eigenfunction,
        "stepper": r.stepper,
        "verdict": r.verdict,
    })
}

/// Rows `node,x,y,species,value` of a node-major state.
fn state_csv(grid: &SpatialGrid, l: usize, state: &[f64]) -> String {
    let mut out = String::from("node,x,y,species,value\n");
    for (a, x) in grid.nodes.iter().enumerate() {
        for i in 0..l {
            let _ = writeln!(out, "{a},{},{},{i},{}", num(x[0]), num(x[1]), num(state[a * l + i]));
        }
    }
    out
}

fn sweep_csv(r: &SweepResult) -> String {
    let target = opt(r.target.as_ref().map(|t| t.value));
    let mut out = String::from("param,s,residual,iters,target\n");
    for p in &r.points {
        let iters = p.iters.map(|i| i.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{iters},{target}",
            num(p.param),
            opt(p.s),
            opt(p.residual)
        );
    }
    out
}

fn sweep(r: SweepResult) -> Computed {
    Computed {
        ok: r.violations == 0 && r.points.iter().all(|p| p.s.is_some()),
        csv: sweep_csv(&r),
        summary: to_value(&r),
    }
}

fn values_or(cfg: &RunConfig, default: &[f64]) -> Vec<f64> {
    cfg.values.clone().unwrap_or_else(|| default.to_vec())
}

fn dispatch(cfg: &RunConfig) -> Result<Computed> {
    match cfg.command {
        Command::Zika => return run_zika(cfg),
        Command::Stemcell => return run_stemcell(cfg),
        _ => {}
    }
    let spec = resolve_operator(cfg)?;
    let computed = match cfg.command {
        Command::Spectrum => {
            let r = spectral_bound(&spec)?;
            Computed {
                ok: true,
                csv: state_csv(&spec.grid, spec.l, r.eigenfunction.knot(0)),
                summary: spectral_summary(&r),
            }
        }
        Command::Existence => {
            let r = existence_criteria(&spec)?;
            let mut csv = String::from("alpha,r,lower,upper\n");
            for p in &r.probes {
                let _ = writeln!(csv, "{},{},{},{}", num(p.alpha), num(p.r), num(p.lower), num(p.upper));
            }
            Computed {
                ok: true,
                csv,
                summary: to_value(&r),
            }
        }
        Command::Approx => {
            let r = sandwich_check(&spec, cfg.levels, cfg.eps0)?;
            let mut csv = String::from("k,epsilon,s_lower,s_mid,s_upper,gap,lower_ok,upper_ok\n");
            for w in &r.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    w.k,
                    num(w.epsilon),
                    num(w.s_lower),
                    num(w.s_mid),
                    num(w.s_upper),
                    num(w.gap),
                    w.lower_ok,
                    w.upper_ok
                );
            }
            Computed {
                ok: r.all_ok,
                csv,
                summary: to_value(&r),
            }
        }
        Command::Certify => {
            let opts = CertifyOptions {
                mode: cfg.certify_mode,
                n_levels: cfg.levels,
                eps0: cfg.eps0,
            };
            let r = certify_equality(&spec, cfg.tolerance, &opts)?;
            let mut csv = String::from("k,epsilon,s_lower,s_upper,lambda_p_cert,lambda_p_prime_cert\n");
            for w in &r.levels {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    w.k,
                    num(w.epsilon),
                    num(w.s_lower),
                    num(w.s_upper),
                    num(w.lambda_p_cert),
                    num(w.lambda_p_prime_cert)
                );
            }
            Computed {
                ok: r.certified,
                csv,
                summary: to_value(&r),
            }
        }
        Command::SweepRate => sweep(sweep_dispersal_rate(
            &spec,
            &values_or(cfg, &[1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]),
        )?),
        Command::SweepRange => sweep(sweep_dispersal_range(
            &spec,
            &values_or(cfg, &[0.2, 0.1, 0.05]),
            spec.m,
        )?),
        Command::SweepFreq => sweep(sweep_frequency(
            &spec,
            &values_or(cfg, &[1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3]),
            None,
        )?),
        Command::LocalEigen => {
            let problem = local_problem(&spec)?;
            let r = local_principal_eigen(&problem)?;
            Computed {
                ok: true,
                csv: state_csv(&problem.grid()?, spec.l, r.eigenfunction.knot(0)),
                summary: spectral_summary(&r),
            }
        }
        Command::Convergence => {
            let u0 = match &cfg.u0 {
                Some(list) => list
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Expr::parse(s).map_err(|e| config_err(&format!("u0[{i}]"), e.to_string())))
                    .collect::<Result<Vec<_>>>()?,
                None => vec![Expr::parse("sin(pi*x)")?; spec.l],
            };
            let r = nonlocal_to_local_ivp_error(&spec, &u0, &values_or(cfg, &[0.2, 0.1, 0.05]), cfg.t_end)?;
            Computed {
                ok: r.strictly_decreasing,
                csv: r.csv(),
                summary: to_value(&r),
            }
        }
        Command::Zika | Command::Stemcell => unreachable!("handled above"),
    };
    Ok(computed)
}

fn scenario(cfg: &RunConfig) -> &str {
    cfg.scenario.as_deref().unwrap_or_default()
}

fn run_zika(cfg: &RunConfig) -> Result<Computed> {
    let params = zika_preset(scenario(cfg), cfg.n, cfg.steps)?;
    let u0 = zika_initial(&params.grid);
    let r = classify_zika(&params, &u0, cfg.periods)?;
    Ok(Computed {
        ok: r.evidence_ok,
        csv: state_csv(&params.grid, 3, &r.final_state),
        summary: to_value(&r),
    })
}

fn run_stemcell(cfg: &RunConfig) -> Result<Computed> {
    let name = scenario(cfg);
    let (mut params, q0s) = stemcell_preset(name, cfg.n, cfg.steps)?;
    if name == "S-n0-neutral" {
        params.shift = neutral_shift(&params)?;
    }
    let r = classify_stemcell(&params, &q0s, cfg.periods)?;
    let csv = if r.final_state.is_empty() {
        String::from("node,x,y,species,value\n")
    } else {
        state_csv(&params.grid, params.l(), &r.final_state)
    };
    let mut summary = to_value(&r);
    summary["shift"] = json!(params.shift);
    Ok(Computed {
        ok: r.evidence_ok,
        csv,
        summary,
    })
}

/// Pretty JSON with every float written as `{:.16e}` (17 significant digits).
/// Object keys come out sorted.
pub fn format_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&num(n.as_f64().expect("f64")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                write_value(item, depth + 1, out);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&Value::String(key.clone()).to_string());
                out.push_str(": ");
                write_value(item, depth + 1, out);
                out.push_str(if k + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_filled() {
        let c = parse_config(r#"{"command":"spectrum","scenario":"SCEN-A"}"#).unwrap();
        assert_eq!((c.n, c.steps, c.periods, c.levels), (200, 400, 200, 4));
        assert_eq!(c.command, Command::Spectrum);
        assert!(!c.record_timings);
    }

    #[test]
    fn misspelled_key_named() {
        let e = parse_config(r#"{"command":"spectrum","sceneario":"SCEN-A"}"#).unwrap_err();
        assert!(e.to_string().contains("sceneario"), "{e}");
    }

    #[test]
    fn type_mismatch_has_path() {
        let e = parse_config(r#"{"command":"spectrum","scenario":"SCEN-A","output":{"thin":"x"}}"#).unwrap_err();
        assert!(e.to_string().contains("output.thin"), "{e}");
    }

    #[test]
    fn missing_kernels() {
        let text = r#"{"command":"spectrum","spec":{"dispersal":{"raw":{"d":[["1"]]}},"a":[["0"]]}}"#;
        let e = parse_config(text).unwrap_err();
        assert!(e.to_string().contains("kernels required"), "{e}");
    }

    #[test]
    fn scenario_and_spec_exclusive() {
        let text = r#"{"command":"spectrum","scenario":"SCEN-A","spec":{"dispersal":{"raw":{"d":[["1"]]}},"a":[["0"]],"kernels":[{"type":"constant","value":1}]}}"#;
        assert!(parse_config(text).is_err());
        assert!(parse_config(r#"{"command":"spectrum"}"#).is_err());
    }

    #[test]
    fn model_commands_need_model_presets() {
        assert!(parse_config(r#"{"command":"zika","scenario":"SCEN-A"}"#).is_err());
        assert!(parse_config(r#"{"command":"stemcell","scenario":"S-n0-decay"}"#).is_ok());
    }

    #[test]
    fn round_trip() {
        let text = r#"{"command":"sweep-range","spec":{"domain":{"lower":[0],"upper":[2]},"sigma":0.1,"m":2,
            "dispersal":{"scaled":{"c":[[1]],"d0":[["1 + 0.1*x"]]}},"a":[["sin(2*pi*t)"]],
            "kernels":[{"type":"convolution","profile":"uniform","scale":1}],"bc":"dirichlet"},
            "values":[0.3,0.2],"n":40,"steps":16,"output":{"thin":3}}"#;
        let c = parse_config(text).unwrap();
        assert_eq!(parse_config(&emit_config(&c)).unwrap(), c);
    }

    #[test]
    fn inline_matches_preset() {
        let text = r#"{"command":"spectrum","n":30,"steps":8,"spec":{"dispersal":{"raw":{"d":[["1"]]}},"a":[["0"]],
            "kernels":[{"type":"constant","value":1}]}}"#;
        let c = parse_config(text).unwrap();
        let inline = spectral_bound(&resolve_operator(&c).unwrap()).unwrap().s;
        let preset = spectral_bound(&operator_preset("SCEN-A", 30, 8).unwrap()).unwrap().s;
        assert!((inline - preset).abs() < 1e-12);
    }

    #[test]
    fn bad_expression_has_path() {
        let text = r#"{"command":"spectrum","spec":{"dispersal":{"raw":{"d":[["1 +"]]}},"a":[["0"]],
            "kernels":[{"type":"constant","value":1}]}}"#;
        let c = parse_config(text).unwrap();
        let e = resolve_operator(&c).unwrap_err();
        assert!(e.to_string().contains("spec.dispersal.raw.d[0][0]"), "{e}");
    }

    #[test]
    fn json_floats_fixed_width() {
        let s = format_json(&json!({"b": 0.1, "a": [1, 2.5e-300], "c": null, "d": "q\""}));
        assert_eq!(
            s,
            "{\n  \"a\": [\n    1,\n    2.5000000000000000e-300\n  ],\n  \"b\": 1.0000000000000001e-1,\n  \"c\": null,\n  \"d\": \"q\\\"\"\n}\n"
        );
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["b"].as_f64(), Some(0.1));
    }

    #[test]
    fn spectrum_deterministic() {
        let c = parse_config(r#"{"command":"spectrum","scenario":"SCEN-D","n":20,"steps":8}"#).unwrap();
        let a = execute(&c).unwrap();
        let b = execute(&c).unwrap();
        assert_eq!(a.results_json, b.results_json);
        assert_eq!(a.status, 0);
        assert!(!a.results_json.contains("timings"));
    }
}
