use nls_core::asymptotics::local_problem;
use nls_core::cli_io::{emit_config, format_json, parse_config};
use nls_core::expr::Expr;
use nls_core::fields::{FieldSource, Kernel};
use nls_core::floquet::{period_map_apply, spectral_bound, spectral_bound_op, SpectralOptions};
use nls_core::grid::{quadrature, BoxDomain, QuadratureRule, SpatialGrid, TimeGrid};
use nls_core::local_limit::local_principal_eigen;
use nls_core::operator::{OperatorSpec, StateField};
use nls_core::presets::operator_preset;
use nls_core::propagate::StepperKind;
use nls_core::variational::rayleigh_bounds;
use proptest::prelude::*;

/// Random cooperative spec with l <= 2.
#[derive(Debug, Clone)]
struct Case {
    l: usize,
    n: usize,
    diag: Vec<(f64, f64, f64)>,
    off: f64,
    d: Vec<f64>,
    conv: bool,
    scale: f64,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=2, 6usize..=16, 0.0f64..1.0, any::<bool>(), 0.3f64..1.0)
        .prop_flat_map(|(l, n, off, conv, scale)| {
            let diag = prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), l);
            let ds = prop::collection::vec(0.2f64..2.0, l);
            (Just(l), Just(n), diag, Just(off + 0.05), ds, Just(conv), Just(scale))
        })
        .prop_map(|(l, n, diag, off, ds, conv, scale)| Case {
            l,
            n,
            diag,
            off,
            d: ds,
            conv,
            scale,
        })
}

impl Case {
    fn a_strings(&self, extra: &[Vec<f64>]) -> Vec<Vec<String>> {
        (0..self.l)
            .map(|i| {
                (0..self.l)
                    .map(|j| {
                        let base = if i == j {
                            let (c, sx, st) = self.diag[i];
                            format!("{c} + {sx}*x + {st}*sin(2*pi*t)")
                        } else {
                            format!("{} + 0.1*x*x", self.off)
                        };
                        format!("{base} + {}", extra[i][j])
                    })
                    .collect()
            })
            .collect()
    }

    fn spec_with(&self, extra: &[Vec<f64>]) -> OperatorSpec {
        let a = self.a_strings(extra);
        let rows: Vec<Vec<&str>> = a.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = rows.iter().map(Vec::as_slice).collect();
        let d: Vec<Vec<f64>> = (0..self.l)
            .map(|i| (0..self.l).map(|j| if i == j { self.d[i] } else { 0.0 }).collect())
            .collect();
        let drefs: Vec<&[f64]> = d.iter().map(Vec::as_slice).collect();
        let k = if self.conv {
            Kernel::Convolution {
                profile: nls_core::fields::Profile::Uniform,
                scale: self.scale,
            }
        } else {
            Kernel::Constant { value: self.scale }
        };
        OperatorSpec::raw(
            FieldSource::constant(&drefs),
            FieldSource::parse(&refs).unwrap(),
            vec![k; self.l],
            SpatialGrid::interval(0.0, 1.0, self.n).unwrap(),
            TimeGrid::new(12).unwrap(),
        )
    }

    fn spec(&self) -> OperatorSpec {
        self.spec_with(&vec![vec![0.0; self.l]; self.l])
    }
}

fn s_of(spec: &OperatorSpec) -> f64 {
    spectral_bound_op(
        &spec.discretize().unwrap(),
        &SpectralOptions {
            adjoint: false,
            ..SpectralOptions::default()
        },
    )
    .unwrap()
    .s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn midpoint_exact_for_affine(a in -3.0f64..3.0, len in 0.1f64..5.0, c0 in -5.0f64..5.0, c1 in -5.0f64..5.0, n in 2usize..50) {
        let g = SpatialGrid::new(BoxDomain::interval(a, a + len), &[n], QuadratureRule::Midpoint).unwrap();
        let f: Vec<f64> = g.nodes.iter().map(|x| c0 + c1 * x[0]).collect();
        let exact = c0 * len + c1 * ((a + len).powi(2) - a * a) / 2.0;
        prop_assert!((quadrature(&f, &g).unwrap() - exact).abs() <= 1e-10 * (1.0 + exact.abs()));
    }

    #[test]
    fn rescaling_composes(s in 0.05f64..2.0, a in 0.1f64..3.0, b in 0.1f64..3.0, x in -1.0f64..1.0, y in -1.0f64..1.0, tri in any::<bool>()) {
        let k = Kernel::Convolution {
            profile: if tri { nls_core::fields::Profile::Triangular } else { nls_core::fields::Profile::Gaussian { truncate: 3.0 } },
            scale: s,
        };
        let two = k.rescaled(a).unwrap().rescaled(b).unwrap();
        let one = k.rescaled(a * b).unwrap();
        let (p, q) = ([x, 0.0], [y, 0.0]);
        let (u, v) = (two.eval(&p, &q, 0.0, 1), one.eval(&p, &q, 0.0, 1));
        prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
    }

    #[test]
    fn structure_monotone_in_off_diagonal(c in case(), bump in 0.01f64..2.0) {
        prop_assume!(c.l == 2);
        let before = c.spec().discretize().unwrap().structure;
        let after = c.spec_with(&[vec![0.0, bump], vec![bump, 0.0]]).discretize().unwrap().structure;
        prop_assert!(!before.h2_tilde || after.h2_tilde);
    }

    #[test]
    fn spatial_operator_linear(c in case(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let op = c.spec().discretize().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..op.nl()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..op.nl()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let s = rng.gen_range(0..op.steps() * 2);
        let (gu, gv, gw) = (op.apply_spatial(&u, s).unwrap(), op.apply_spatial(&v, s).unwrap(), op.apply_spatial(&w, s).unwrap());
        for k in 0..op.nl() {
            prop_assert!((gw[k] - gu[k] - gv[k]).abs() <= 1e-12 * (1.0 + gw[k].abs()));
        }
    }

    #[test]
    fn dense_generator_is_metzler(c in case(), s in 0usize..24) {
        let op = c.spec().discretize().unwrap();
        let g = op.assemble_dense(s, 4000).unwrap();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                prop_assert!(i == j || g[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn collatz_wielandt_sandwich(c in case(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let spec = c.spec();
        let op = spec.discretize().unwrap();
        let r = spectral_bound_op(&op, &SpectralOptions { adjoint: false, ..SpectralOptions::default() }).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..op.nl()).map(|_| rng.gen_range(0.1..2.0)).collect();
        let (w, log_scale) = period_map_apply(&op, &v, StepperKind::Auto).unwrap();
        let ratios = w.iter().zip(&v).map(|(a, b)| (a / b).ln() + log_scale);
        let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        prop_assert!(lo <= r.log_rho + 1e-9 && r.log_rho <= hi + 1e-9, "{lo} {} {hi}", r.log_rho);
    }

    #[test]
    fn gauge_invariance(c in case(), amp in -3.0f64..3.0, phase in 0.0f64..6.0) {
        let base = s_of(&c.spec());
        let r = format!("{amp}*sin(2*pi*t + {phase})");
        let rows: Vec<Vec<String>> = c.a_strings(&vec![vec![0.0; c.l]; c.l]).into_iter().enumerate()
            .map(|(i, row)| row.into_iter().enumerate().map(|(j, e)| if i == j { format!("{e} + {r}") } else { e }).collect())
            .collect();
        let rr: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = rr.iter().map(Vec::as_slice).collect();
        let g = c.spec().with_a(FieldSource::parse(&refs).unwrap());
        prop_assert!((s_of(&g) - base).abs() <= 1e-8, "{} vs {base}", s_of(&g));
    }

    #[test]
    fn monotone_and_continuous_in_a(c in case(), i in 0usize..2, j in 0usize..2, eps in 0.0f64..0.5) {
        let (i, j) = (i % c.l, j % c.l);
        let mut extra = vec![vec![0.0; c.l]; c.l];
        extra[i][j] = eps;
        let (s0, s1) = (s_of(&c.spec()), s_of(&c.spec_with(&extra)));
        prop_assert!(s1 >= s0 - 1e-9, "{s0} -> {s1}");
        prop_assert!(s1 - s0 <= eps + 1e-7, "{s0} -> {s1}");
    }

    #[test]
    fn test_function_ratios_bracket_s(c in case(), amp in 0.0f64..0.5, ph in 0.0f64..6.0) {
        let spec = c.spec();
        let op = spec.discretize().unwrap();
        let s = s_of(&spec);
        let phi = StateField::from_fn(c.l, &spec.grid, &spec.time, |x, t, i| {
            1.0 + amp * (2.0 * std::f64::consts::PI * t + ph + i as f64).sin() * x[0]
        });
        let cert = rayleigh_bounds(&op, &phi).unwrap();
        let tol = cert.time_truncation + 1e-8;
        prop_assert!(cert.lower_bound <= s + tol && cert.upper_bound >= s - tol,
            "{} <= {s} <= {} ({tol})", cert.lower_bound, cert.upper_bound);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn local_eigenfunction_positive_and_monotone(d in 0.5f64..8.0, a0 in -2.0f64..2.0, bump in 0.0f64..1.0) {
        let mut spec = operator_preset("SCEN-E", 40, 16).unwrap();
        spec = spec.with_a(FieldSource::scalar(Expr::parse(&format!("{a0} + sin(2*pi*t)")).unwrap()));
        if let nls_core::operator::Dispersal::Scaled { d0, .. } = &mut spec.dispersal {
            *d0 = FieldSource::constant(&[&[d]]);
        }
        let r = local_principal_eigen(&local_problem(&spec).unwrap()).unwrap();
        prop_assert!(r.eigenfunction.min() > 0.0);
        let up = spec.clone().with_a(FieldSource::scalar(Expr::parse(&format!("{} + sin(2*pi*t)", a0 + bump)).unwrap()));
        let r2 = local_principal_eigen(&local_problem(&up).unwrap()).unwrap();
        prop_assert!(r2.s >= r.s - 1e-9);
        prop_assert!((r2.s - r.s - bump).abs() <= 1e-7);
    }

    #[test]
    fn config_round_trip(n in 2usize..500, steps in 1usize..800, tol in 1e-12f64..1.0, thin in 1usize..10,
                         values in prop::option::of(prop::collection::vec(1e-3f64..10.0, 1..5)),
                         name in prop::sample::select(vec!["SCEN-A", "SCEN-B", "SCEN-E"]),
                         tau in prop::option::of(0.01f64..100.0), timings in any::<bool>()) {
        let mut doc = serde_json::json!({
            "command": "sweep-freq", "scenario": name, "n": n, "steps": steps, "tolerance": tol,
            "values": values, "output": {"thin": thin}, "record_timings": timings,
        });
        if let Some(t) = tau {
            doc["tau"] = t.into();
        }
        let cfg = parse_config(&doc.to_string()).unwrap();
        prop_assert_eq!(parse_config(&emit_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn json_floats_survive(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
        let s = format_json(&serde_json::json!({ "xs": xs }));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        let ys: Vec<f64> = back["xs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        prop_assert_eq!(ys, xs);
    }
}

#[test]
fn gauge_preset_pair() {
    let a = spectral_bound(&operator_preset("SCEN-A", 50, 40).unwrap()).unwrap().s;
    let c = spectral_bound(&operator_preset("SCEN-C", 50, 40).unwrap()).unwrap().s;
    assert!((a - c).abs() <= 1e-8);
}
