//! Randomized checks of the invariants each module promises.

use std::sync::{Arc, OnceLock};

use geotomo::bundlecalc::{eval_section, hgrad, random_sm_expr, vdiv, vgrad, x_scalar, x_section, ExprFunction, SmPoint, SmRef};
use geotomo::cli::ExperimentConfig;
use geotomo::expr::Expr;
use geotomo::geodesics::{beta_thresholds, exit_time, first_conjugate_times, flow, PhasePoint};
use geotomo::geometry::MetricChart;
use geotomo::tensorfield::{component, degree_decompose, evaluate_on_sphere, random_field, random_polynomial, FieldRef, GridSpec, GridTensorField};
use geotomo::xray::{influx_fan, outward_normal, FanSpec, RayDataSet, RayMetadata, RayOperator, RayRecord};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn charts() -> &'static [MetricChart] {
    static CHARTS: OnceLock<Vec<MetricChart>> = OnceLock::new();
    CHARTS.get_or_init(|| {
        vec![
            MetricChart::euclidean(2, 1.0),
            MetricChart::scaled(2, 1.0, 2.0).unwrap(),
            MetricChart::conformal(2, 1.0, "0.2*x1 - 0.1*x2^2").unwrap(),
            MetricChart::sphere_cap(2, 0.6, 1.0).unwrap(),
            MetricChart::hyperbolic(2, 0.8, 1.0).unwrap(),
            MetricChart::euclidean(3, 1.0),
            MetricChart::conformal(3, 1.0, "0.2*x1 - 0.1*x2*x3").unwrap(),
            MetricChart::sphere_cap(3, 0.6, 1.0).unwrap(),
        ]
    })
}

fn direction(d: usize, a: f64, b: f64) -> Vec<f64> {
    if d == 2 {
        vec![a.cos(), a.sin()]
    } else {
        vec![b.sin() * a.cos(), b.sin() * a.sin(), b.cos()]
    }
}

/// An interior point at fraction `s` of the radius and a g-unit direction.
fn sample(c: &MetricChart, s: f64, a: [f64; 4]) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = direction(c.dim(), a[0], a[1]).iter().map(|u| u * s * c.radius()).collect();
    let v = c.normalize(&x, &direction(c.dim(), a[2], a[3]));
    (x, v)
}

fn angles() -> impl Strategy<Value = [f64; 4]> {
    let t = 0.0..std::f64::consts::TAU;
    let p = 0.0..std::f64::consts::PI;
    (t.clone(), p.clone(), t, p).prop_map(|(a, b, c, d)| [a, b, c, d])
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    (0..d * d).map(|k| (0..d).map(|j| a[k / d * d + j] * b[j * d + k % d]).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_is_spd_with_exact_inverse(ci in 0usize..8, s in 0.0f64..1.0, a in angles()) {
        let c = &charts()[ci];
        let (x, _) = sample(c, s, a);
        let d = c.dim();
        let g = c.metric(&x).unwrap();
        let gi = c.inverse_metric(&x).unwrap();
        let gm = nalgebra::DMatrix::from_row_slice(d, d, &g);
        prop_assert!(gm.clone().symmetric_eigenvalues().iter().all(|&e| e > 0.0));
        prop_assert!((&gm - gm.transpose()).amax() < 1e-14);
        for (k, p) in matmul(&g, &gi, d).iter().enumerate() {
            let id = if k / d == k % d { 1.0 } else { 0.0 };
            prop_assert!((p - id).abs() < 1e-12);
        }
    }

    #[test]
    fn curvature_operator_is_self_adjoint(ci in 0usize..8, s in 0.0f64..0.95, a in angles()) {
        let c = &charts()[ci];
        let (x, v) = sample(c, s, a);
        let op = c.curvature_operator(&x, &v).unwrap();
        prop_assert!(op.asymmetry() < 1e-9, "{}", op.asymmetry());
        if c.name() == "sphere_cap" {
            // K = 1: R(w, v)v = w on {v}^⊥
            let n = op.size();
            for (k, m) in op.matrix.iter().enumerate() {
                let id = if k / n == k % n { 1.0 } else { 0.0 };
                prop_assert!((m - id).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sm_operators_are_fiberwise_homogeneous_and_tangent(ci in 0usize..8, s in 0.0f64..0.95, a in angles(), seed in any::<u64>()) {
        let c = &charts()[ci];
        let d = c.dim();
        let (x, v) = sample(c, s, a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = ExprFunction::new(d, random_sm_expr(&mut rng, d, c.radius(), 2, 3)).unwrap();
        let funcs: Vec<SmRef> = vec![u.clone(), x_scalar(u.clone()), vdiv(vgrad(u.clone())), vdiv(hgrad(u.clone()))];
        let pt = SmPoint::new(c, &x, &v, 3).unwrap();
        for f in &funcs {
            // Euler's identity for a degree-0 extension: y·∂_y U = 0 at |y| = 1
            let j = f.jet(&pt, 1);
            let euler: f64 = (0..d).map(|i| v[i] * j.partial(d + i)).sum();
            prop_assert!(euler.abs() < 1e-10 * (1.0 + j.value().abs()), "{euler}");
        }
        for z in [vgrad(u.clone()), hgrad(u.clone()), x_section(vgrad(u.clone()))] {
            let out = eval_section(c, z.as_ref(), &x, &v).unwrap();
            let scale = 1.0 + c.norm(&x, &out);
            prop_assert!(c.inner(&x, &out, &v).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn odd_orders_flip_sign_with_direction(ci in 0usize..8, s in 0.0f64..1.0, a in angles(), m in 0usize..5, seed in any::<u64>()) {
        let c = &charts()[ci];
        let (x, v) = sample(c, s, a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_field(&mut rng, c.dim(), m, 3, c.radius()).unwrap();
        let plus = evaluate_on_sphere(c, &f, &x, &v).unwrap();
        let minus = evaluate_on_sphere(c, &f, &x, &v.iter().map(|a| -a).collect::<Vec<_>>()).unwrap();
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        prop_assert!((minus - sign * plus).abs() <= 1e-12 * (1.0 + plus.abs()));
    }

    #[test]
    fn components_ignore_index_order(ci in 0usize..8, s in 0.0f64..1.0, a in angles(), idx in proptest::collection::vec(0usize..3, 3), seed in any::<u64>()) {
        let c = &charts()[ci];
        let d = c.dim();
        let idx: Vec<usize> = idx.iter().map(|i| i % d).collect();
        let (x, _) = sample(c, s, a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_field(&mut rng, d, 3, 2, c.radius()).unwrap();
        let base = component(c, &f, &x, &idx).unwrap();
        for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let perm: Vec<usize> = p.iter().map(|&k| idx[k]).collect();
            prop_assert_eq!(component(c, &f, &x, &perm).unwrap().to_bits(), base.to_bits());
        }
    }

    #[test]
    fn degree_pieces_sum_to_the_field(ci in 0usize..8, s in 0.0f64..1.0, a in angles(), m in 0usize..5, seed in any::<u64>()) {
        let c = &charts()[ci];
        let (x, v) = sample(c, s, a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: FieldRef = Arc::new(random_field(&mut rng, c.dim(), m, 2, c.radius()).unwrap());
        let whole = evaluate_on_sphere(c, f.as_ref(), &x, &v).unwrap();
        let sum: f64 = degree_decompose(f).iter().map(|p| evaluate_on_sphere(c, p.as_ref(), &x, &v).unwrap()).sum();
        prop_assert!((whole - sum).abs() < 1e-10 * (1.0 + whole.abs()));
    }

    #[test]
    fn thresholds_are_ordered(d in 2i64..60, m in 1i64..60) {
        let (b1, b2) = beta_thresholds(d, m).unwrap();
        let one = Ratio::from_integer(1);
        prop_assert!(b1 >= b2 && b2 >= one);
        prop_assert_eq!(m == 1, b1 == one && b2 == one);
        prop_assert_eq!(b2, Ratio::new(m * (m + d - 1), 2 * m + d - 2));
    }

    #[test]
    fn expressions_survive_display_and_parse(seed in any::<u64>(), d in 2usize..4, p in proptest::collection::vec(-1.0f64..1.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in [random_polynomial(&mut rng, d, 4, 0.7), random_sm_expr(&mut rng, d, 0.7, 2, 3)] {
            let back = Expr::parse(&e.to_string()).unwrap();
            let (x, v) = (&p[..d], &p[3..3 + d]);
            prop_assert_eq!(back.eval_f64(x, v).to_bits(), e.eval_f64(x, v).to_bits());
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z_]{1,12}") {
        let known = ["metric", "m", "fields", "fan", "quadrature", "seed", "transform", "verify", "conjugate", "invert", "decompose", "tau"];
        prop_assume!(!known.contains(&key.as_str()));
        let src = format!(r#"{{"metric": {{"family": "euclidean", "radius": 1.0, "dim": 2}}, "{key}": 1}}"#);
        prop_assert!(serde_json::from_str::<ExperimentConfig>(&src).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_keeps_unit_speed_and_exits_on_the_boundary(ci in 0usize..8, s in 0.0f64..0.95, a in angles(), frac in 0.0f64..1.0) {
        let c = &charts()[ci];
        let (x, v) = sample(c, s, a);
        let p = PhasePoint::new(x, v);
        let tau = exit_time(c, &p).unwrap();
        let dt = 1e-3 * c.radius();
        for t in [frac * tau, tau] {
            let q = flow(c, &p, t, dt).unwrap();
            prop_assert!((q.speed(c) - 1.0).abs() < 1e-9);
            if t == tau {
                let r = q.x.iter().map(|a| a * a).sum::<f64>().sqrt();
                prop_assert!((r - c.radius()).abs() < 1e-8, "{r}");
            }
        }
    }

    #[test]
    fn euclidean_exit_times_add_up_to_chords(d in 2usize..4, s in 0.0f64..0.95, a in angles()) {
        let c = MetricChart::euclidean(d, 1.0);
        let (x, v) = sample(&c, s, a);
        let p = PhasePoint::new(x.clone(), v.clone());
        let xv: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
        let xx: f64 = x.iter().map(|a| a * a).sum();
        let chord = 2.0 * (1.0 - xx + xv * xv).sqrt();
        let both = exit_time(&c, &p).unwrap() + exit_time(&c, &p.reversed()).unwrap();
        prop_assert!((both - chord).abs() < 1e-8);
    }

    #[test]
    fn fans_point_strictly_inward(ci in 0usize..8, nb in 1usize..10, nd in 1usize..10, margin in 1e-4f64..0.5) {
        let c = &charts()[ci];
        let fan = FanSpec::new(nb, nd, margin);
        let rays = influx_fan(c, &fan).unwrap();
        prop_assert_eq!(rays.len(), fan.len());
        for p in &rays {
            let r = p.x.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((r - c.radius()).abs() < 1e-10);
            prop_assert!((p.speed(c) - 1.0).abs() < 1e-12);
            let nu = outward_normal(c, &p.x).unwrap();
            // ⟨v, ν⟩ ≤ −sin(margin) for a unit v
            prop_assert!(c.inner(&p.x, &p.v, &nu) <= -margin.sin() * (1.0 - 1e-9));
        }
    }

    #[test]
    fn ray_operator_transpose_is_exact(seed in any::<u64>(), m in 0usize..3) {
        static OPS: OnceLock<Vec<RayOperator>> = OnceLock::new();
        let ops = OPS.get_or_init(|| {
            let c = MetricChart::conformal(2, 1.0, "0.2*x1").unwrap();
            let rays = influx_fan(&c, &FanSpec::new(8, 8, 1e-3)).unwrap();
            (0..3).map(|m| RayOperator::new(&c, GridSpec::new(2, 1.0, 8).unwrap(), m, rays.clone(), 1e-2).unwrap()).collect()
        });
        let op = &ops[m];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = GridTensorField::zeros(GridSpec::new(2, 1.0, 8).unwrap(), m);
        f.values.iter_mut().for_each(|a| *a = rng.random_range(-1.0..1.0));
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let af = op.forward(&f).unwrap();
        let atd = op.backproject_values(&data);
        let lhs: f64 = af.iter().zip(&data).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.values.iter().zip(&atd.values).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn ray_data_files_round_trip_bit_exactly(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
        let meta = RayMetadata { metric: "euclidean".into(), dim: 2, radius: 1.0, m: 1, dt: 1e-2, fan: FanSpec::new(1, 1, 1e-3) };
        let records = vals
            .iter()
            .enumerate()
            .map(|(k, &value)| {
                let t = k as f64 * 0.37;
                RayRecord { x: vec![t.cos(), t.sin()], v: vec![-t.cos(), -t.sin()], value }
            })
            .collect();
        let data = RayDataSet { meta, records };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rays.csv");
        data.write(&path).unwrap();
        prop_assert_eq!(RayDataSet::read(&path).unwrap(), data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conjugate_times_do_not_increase_with_beta(t in 0.0f64..std::f64::consts::TAU, alpha in -1.2f64..1.2, b0 in 0.8f64..1.5, db in 0.01f64..1.0) {
        static CAP: OnceLock<MetricChart> = OnceLock::new();
        let cap = CAP.get_or_init(|| MetricChart::sphere_cap_with_max_length(2, 3.5, 1.0).unwrap());
        let r = cap.radius();
        let x = vec![r * t.cos(), r * t.sin()];
        let inward = [-(t + alpha).cos(), -(t + alpha).sin()];
        let p = PhasePoint::new(x.clone(), cap.normalize(&x, &inward));
        let times = first_conjugate_times(cap, &p, &[b0, b0 + db], 1e-3).unwrap();
        if let Some(t0) = times[0] {
            let t1 = times[1];
            prop_assert!(t1.is_some_and(|t1| t1 <= t0 + 1e-3), "{t0} {t1:?}");
        }
    }
}
