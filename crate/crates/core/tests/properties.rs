use proptest::prelude::*;

use diffpool::datagen::{gen_closed_region, gen_multispeaker, load_dataset, save_dataset, MultiSpeakerParams};
use diffpool::network::{build_model, model_from_json, model_to_json, InitSpec, LayerConfig};
use diffpool::numeric::{fd_gradient, softmax};
use diffpool::pooling::{
    gauss_backward, gauss_forward, lhuc_amplitude, lp_forward, GaussPoolParams, LpPoolParams, PoolSpec, LP_EPS,
};
use diffpool::training::{apply_max_norm, newbob_schedule, LrAction, NewbobConfig};
use diffpool::{ActivationKind, Matrix, Rng};

fn pool_input(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, k)
}

fn lp(a: &[f64], rho: f64, normalize: bool) -> f64 {
    let x = Matrix::from_vec(1, a.len(), a.to_vec()).unwrap();
    let spec = PoolSpec::new(a.len(), 1).normalized(normalize);
    lp_forward(&x, spec, &LpPoolParams::constant(1, rho), LP_EPS).unwrap().0.get(0, 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, vals in prop::collection::vec(-800.0f64..800.0, 24)) {
        let cols = vals.len() / rows;
        let a = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let p = softmax(&a);
        for r in p.row_iter() {
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lp_norm_decreases_with_order(k in 2usize..6, seed in any::<u64>(), p in 1.0f64..20.0, dp in 0.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..k).map(|_| rng.normal(0.0, 2.0)).collect();
        let (lo, hi) = (lp(&a, p + dp, false), lp(&a, p, false));
        prop_assert!(lo <= hi * (1.0 + 1e-12));
        // Bounded by the max and the L1 norm.
        let max = a.iter().fold(LP_EPS, |m, v| m.max(v.abs()));
        let l1: f64 = a.iter().map(|v| v.abs().max(LP_EPS)).sum();
        prop_assert!(max * (1.0 - 1e-12) <= lo && hi <= l1 * (1.0 + 1e-12));
    }

    #[test]
    fn power_mean_increases_with_order(a in pool_input(4), p in 1.0f64..20.0, dp in 0.0f64..5.0) {
        prop_assert!(lp(&a, p, true) <= lp(&a, p + dp, true) * (1.0 + 1e-12));
    }

    #[test]
    fn lp_is_sign_invariant_and_homogeneous(a in pool_input(3), rho in 0.0f64..10.0, c in 0.1f64..10.0) {
        prop_assume!(a.iter().all(|v| v.abs() > 1e-3));
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let scaled: Vec<f64> = a.iter().map(|v| c * v).collect();
        let f = lp(&a, rho, false);
        prop_assert_eq!(f, lp(&neg, rho, false));
        prop_assert!((lp(&scaled, rho, false) - c * f).abs() <= 1e-12 * c * f);
    }

    #[test]
    fn gauss_output_is_convex_combination(
        a in pool_input(5),
        mu in -2.0f64..2.0,
        beta in prop::sample::select(vec![0.0, 1e-6, 0.5, 3.0, 100.0, 1e8]),
        eta in 0.1f64..3.0,
    ) {
        let x = Matrix::from_vec(1, 5, a.clone()).unwrap();
        let (out, ws) = gauss_forward(&x, PoolSpec::new(5, 1), &GaussPoolParams::uniform(1, mu, beta, eta)).unwrap();
        let z: Vec<f64> = a.iter().map(|v| eta * v.tanh()).collect();
        let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let f = out.get(0, 0);
        prop_assert!(lo - 1e-12 <= f && f <= hi + 1e-12);
        let u = ws.weights().row(0);
        prop_assert!(u.iter().all(|&w| w >= 0.0));
        prop_assert!((u.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gauss_kernel_is_translation_covariant(a in pool_input(3), mu in -1.0f64..1.0, beta in 0.0f64..5.0) {
        // Shifting mu and every z together leaves the weights unchanged, so
        // the mu gradient mirrors the summed z gradient.
        let x = Matrix::from_vec(1, 3, a).unwrap();
        let params = GaussPoolParams::uniform(1, mu, beta, 1.0);
        let (_, ws) = gauss_forward(&x, PoolSpec::new(3, 1), &params).unwrap();
        let g = gauss_backward(&ws, &Matrix::filled(1, 1, 1.0)).unwrap();
        let dz_sum: f64 = (0..3)
            .map(|i| {
                let t = x.get(0, i).tanh();
                g.input.get(0, i) / (1.0 - t * t)
            })
            .sum();
        // d f / d(shift) = 1 for a convex combination.
        prop_assert!((dz_sum + g.mu[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lhuc_amplitude_in_open_interval(r in -30.0f64..30.0) {
        let a = lhuc_amplitude(r);
        prop_assert!((0.0..=2.0).contains(&a));
        prop_assert!((lhuc_amplitude(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn max_norm_caps_columns_and_keeps_short_ones(seed in any::<u64>(), limit in 0.1f64..3.0) {
        let layers = [
            LayerConfig::Affine { in_dim: 6, out_dim: 4, activation: ActivationKind::Tanh },
            LayerConfig::Affine { in_dim: 4, out_dim: 2, activation: ActivationKind::Softmax },
        ];
        let mut m = build_model(&layers, &mut Rng::new(seed), &InitSpec::default()).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        for v in m.weights_mut(0).as_mut_slice() {
            *v = rng.normal(0.0, 1.5);
        }
        let before = m.layers()[0].weights.clone();
        apply_max_norm(&mut m, 0, limit);
        let w = &m.layers()[0].weights;
        for c in 0..w.cols() {
            prop_assert!(w.col_norm(c) <= limit + 1e-9);
            if before.col_norm(c) <= limit {
                for r in 0..w.rows() {
                    prop_assert_eq!(w.get(r, c).to_bits(), before.get(r, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn newbob_never_restarts_after_stop(errors in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let cfg = NewbobConfig::default();
        let mut stopped = false;
        for n in 2..=errors.len() {
            let action = newbob_schedule(&errors[..n], &cfg);
            if stopped {
                prop_assert_eq!(action, LrAction::Stop);
            }
            stopped |= action == LrAction::Stop;
        }
    }

    #[test]
    fn model_json_round_trip(seed in any::<u64>(), kind in 0usize..3, k in 2usize..4) {
        let hidden = match kind {
            0 => LayerConfig::LpPool { in_dim: 3, units: 2 * k, pool_size: k, normalize: seed % 2 == 0 },
            1 => LayerConfig::GaussPool { in_dim: 3, units: 2 * k, pool_size: k },
            _ => LayerConfig::Affine { in_dim: 3, out_dim: 2, activation: ActivationKind::Relu },
        };
        let layers = [hidden, LayerConfig::Affine { in_dim: 2, out_dim: 3, activation: ActivationKind::Softmax }];
        let m = build_model(&layers, &mut Rng::new(seed), &InitSpec::default()).unwrap();
        let text = model_to_json(&m).unwrap();
        let back = model_from_json(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(model_to_json(&back).unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), noise in 0.0f64..0.5) {
        let tmp = tempfile::tempdir().unwrap();
        let params = MultiSpeakerParams { n_per_speaker: 20, ..Default::default() };
        for (name, ds) in [
            ("cr", gen_closed_region(30, noise, seed)),
            ("ms", gen_multispeaker(&params, seed).unwrap()),
        ] {
            let dir = tmp.path().join(name);
            save_dataset(&ds, &dir).unwrap();
            prop_assert_eq!(load_dataset(&dir).unwrap(), ds);
        }
    }
}

#[test]
fn fd_matches_quadratic_gradient() {
    let theta = [0.3, -1.2, 2.5];
    let f = |t: &[f64]| t[0] * t[0] + 3.0 * t[0] * t[1] - t[2] * t[2] * t[2];
    let g = fd_gradient(f, &theta, 1e-5).unwrap();
    let exact = [2.0 * 0.3 + 3.0 * -1.2, 3.0 * 0.3, -3.0 * 2.5 * 2.5];
    for (a, b) in g.iter().zip(exact) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}
