use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::data::GaussianFlow;
use flowmap_distill::distill::{backward_simulate_at, dmd_loss, DmdForm};
use flowmap_distill::flowmap::meanflow_target;
use flowmap_distill::metrics::{sliced_wasserstein, wasserstein_1d};
use flowmap_distill::nets::Class;
use flowmap_distill::rng::{normal_tensor, RngStreams};
use flowmap_distill::tensor::{Tape, Tensor};
use flowmap_distill::Result;
use proptest::prelude::*;

fn points(seed: u64, n: usize, d: usize) -> Tensor {
    normal_tensor(&mut RngStreams::new(seed).stream("points"), &[n, d])
}

fn shifted_score(shift: f64) -> impl Fn(&Tensor, &[f64], &[Class]) -> Result<Tensor> {
    move |z: &Tensor, t: &[f64], _: &[Class]| {
        let d = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let t = t[j / d];
                -(z - (1.0 - t) * shift) / ((1.0 - t).powi(2) + t * t)
            })
            .collect();
        Ok(Tensor::new(z.shape().to_vec(), data)?)
    }
}

fn budget() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=64).prop_flat_map(|s| (Just(s), 1..=s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rollout_calls_follow_the_grid((s, k) in budget()) {
        let flow = GaussianFlow { mean: vec![0.5, -1.0], std: 0.3 };
        let z = points(0, 3, 2);
        let trace = backward_simulate_at(&mut Tape::new(), &flow, &z, &[Class::Null; 3], s, k).unwrap();
        let expect = 3 - usize::from(k == s) - usize::from(k == 1);
        prop_assert_eq!(trace.calls(), expect);
        prop_assert_eq!(trace.segments.last().unwrap().to, 0.0);
        let mut from = 1.0;
        for seg in &trace.segments {
            prop_assert_eq!(seg.from, from);
            prop_assert!(seg.to < seg.from);
            from = seg.to;
        }
        prop_assert!(trace.state_at(trace.t).is_some());
        prop_assert!(trace.state_at(trace.r).is_some());
    }

    #[test]
    fn gaussian_rollout_lands_on_the_exact_endpoint(
        (s, k) in budget(),
        mx in -3.0f64..3.0,
        my in -3.0f64..3.0,
        std in 0.05f64..2.0,
        seed in 0u64..1000,
    ) {
        let flow = GaussianFlow { mean: vec![mx, my], std };
        let z = points(seed, 5, 2);
        let trace = backward_simulate_at(&mut Tape::new(), &flow, &z, &[Class::Null; 5], s, k).unwrap();
        let exact = flow.flow_map(&z, &[1.0; 5], &[0.0; 5]);
        for (a, b) in trace.z0().data().iter().zip(exact.data()) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn gaussian_flow_maps_compose(
        times in prop::array::uniform3(0.0f64..=1.0),
        std in 0.05f64..2.0,
        seed in 0u64..1000,
    ) {
        let mut times = times;
        times.sort_by(|a, b| b.total_cmp(a));
        let [u, t, r] = times;
        let flow = GaussianFlow { mean: vec![1.0, -0.5], std };
        let z = points(seed, 4, 2);
        let two = flow.flow_map(&flow.flow_map(&z, &[u; 4], &[t; 4]), &[t; 4], &[r; 4]);
        let one = flow.flow_map(&z, &[u; 4], &[r; 4]);
        for (a, b) in two.data().iter().zip(one.data()) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn dmd_gradient_is_scaled_push(
        n in 1usize..24,
        real in -2.0f64..2.0,
        fake in -2.0f64..2.0,
        seed in 0u64..1000,
        denoised in any::<bool>(),
    ) {
        let form = if denoised { DmdForm::Denoised } else { DmdForm::Score };
        let z0 = points(seed, n, 2);
        let mut tape = Tape::new();
        let zw = tape.watch(&z0);
        let mut rng = RngStreams::new(seed).stream("renoise");
        let out = dmd_loss(
            &mut tape,
            &zw,
            &vec![Class::Null; n],
            &shifted_score(real),
            &shifted_score(fake),
            &mut rng,
            (0.02, 0.98),
            form,
        )
        .unwrap();
        let g = tape.backward(&out.loss).unwrap().get_or_zeros(&zw);
        for (j, gj) in g.data().iter().enumerate() {
            let t = out.scores.t_d[j / 2];
            let expect = -(1.0 - t) * out.push.data()[j] / n as f64;
            prop_assert!((gj - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn meanflow_target_is_exact_for_quadratic_fields(
        a in prop::array::uniform2(-2.0f64..2.0),
        b in -2.0f64..2.0,
        c in -2.0f64..2.0,
        t in 0.01f64..1.0,
        frac in 0.0f64..1.0,
        g in 1.0f64..4.0,
        seed in 0u64..1000,
    ) {
        let r = t * frac;
        let z = points(seed, 1, 2);
        let v = points(seed + 1, 1, 2);
        let field = |_: &[usize], z: &Tensor, t: &[f64], r: &[f64]| {
            let data = z
                .data()
                .iter()
                .enumerate()
                .map(|(j, zj)| {
                    let (ti, ri) = (t[j / 2], r[j / 2]);
                    a[j % 2] * zj + b * ti * ti + c * ti * ri
                })
                .collect();
            Ok(Tensor::new(z.shape().to_vec(), data)?)
        };
        let target = meanflow_target(field, &z, &v, &[t], &[r], 5e-3, &[g]).unwrap();
        let moving = 5e-3f64.min(1.0 - t).min(t - r) > 0.0;
        for (j, aj) in a.iter().enumerate() {
            let dudt = aj * v.data()[j] + 2.0 * b * t + c * r;
            let expect = if moving { v.data()[j] - (t - r) * dudt / g } else { v.data()[j] };
            prop_assert!((target.data()[j] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn configs_round_trip_through_toml(
        seed in 0..=i64::MAX as u64,
        steps in 1usize..10_000,
        s_max in 1usize..128,
        nfes in prop::collection::vec(1usize..100, 1..6),
    ) {
        let mut config = ExperimentConfig::tiny();
        config.seed = seed;
        config.stage1.steps = steps;
        config.stage2.s_max = s_max;
        config.eval.nfes = nfes;
        let back = ExperimentConfig::from_toml(&config.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn sliced_wasserstein_is_a_semimetric(sa in 0u64..1000, sb in 0u64..1000, shift in -3.0f64..3.0) {
        let a = points(sa, 64, 2);
        let b = Tensor::new(vec![64, 2], points(sb, 64, 2).data().iter().map(|v| v + shift).collect()).unwrap();
        let proj = |x: &Tensor, y: &Tensor| sliced_wasserstein(x, y, 32, &mut RngStreams::new(3).stream("proj")).unwrap();
        let ab = proj(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - proj(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(proj(&a, &a), 0.0);
    }

    #[test]
    fn wasserstein_1d_of_a_translate_is_the_shift(
        xs in prop::collection::vec(-10.0f64..10.0, 1..50),
        shift in -5.0f64..5.0,
    ) {
        let mut a = xs.clone();
        let mut b: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        prop_assert!((wasserstein_1d(&mut a, &mut b) - shift.abs()).abs() < 1e-9);
    }
}
