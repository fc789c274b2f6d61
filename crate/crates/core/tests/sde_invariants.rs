use proptest::prelude::*;
use rcl_core::sde::{estimate_flow_lipschitz, simulate_paths, ControlPolicy, ControlSet, ControlledSDE, FlowConfig};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn bundle_is_independent_of_worker_count() {
    let sde = ControlledSDE::gbm(0.05, 0.2, 1.0);
    let pol = ControlPolicy::Constant(vec![0.0]);
    let runs: Vec<_> = [1, 2, 5]
        .into_iter()
        .map(|k| in_pool(k, || simulate_paths(&sde, &pol, 0.0, &[1.0], 20, 3000, 42).unwrap()))
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.paths.len(), runs[0].paths.len());
        assert!(r.paths.iter().zip(&runs[0].paths).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(r.increments.iter().zip(&runs[0].increments).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn gbm_mean_has_first_order_weak_error() {
    let (mu, sigma, x0, t) = (0.05, 0.2, 1.0, 1.0);
    let sde = ControlledSDE::gbm(mu, sigma, t);
    let pol = ControlPolicy::Constant(vec![0.0]);
    let exact = x0 * f64::exp(mu * t);
    let c = mu * mu * t * x0 * exact;
    for steps in [250, 1000] {
        let b = simulate_paths(&sde, &pol, 0.0, &[x0], steps, 20_000, 3).unwrap();
        let (m, se) = mean_and_stderr(b.row(steps));
        let bound = 3.0 * (se + c * t / steps as f64);
        assert!((m - exact).abs() <= bound, "N={steps}: mean {m}, exact {exact}, bound {bound}");
    }
}

#[test]
fn coupled_flow_ratio_settles_under_refinement() {
    let sde = ControlledSDE::gbm(0.05, 0.2, 1.0);
    let pol = ControlPolicy::Constant(vec![0.0]);
    let n_paths = 20_000;
    let mut prev: Option<f64> = None;
    for steps in [25, 50, 100, 200] {
        let cfg = FlowConfig { t0: 0.0, steps, n_paths, seed: 9 };
        let ratio = estimate_flow_lipschitz(&sde, (&pol, &pol), (&[1.0], &[1.1]), &cfg).unwrap();
        let b = simulate_paths(&sde, &pol, 0.0, &[1.0], steps, n_paths, 9).unwrap();
        let sq: Vec<f64> = b.row(steps).iter().map(|x| x * x).collect();
        let (_, se) = mean_and_stderr(&sq);
        if let Some(p) = prev {
            assert!(ratio <= p + 2.0 * se + 0.01 * p, "N={steps}: {ratio} after {p}");
        }
        prev = Some(ratio);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_bits(seed in any::<u64>(), x0 in -2.0f64..2.0, drift in -1.0f64..1.0) {
        let set = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let sde = ControlledSDE::arithmetic(drift, 0.3, 1.0, set);
        let pol = ControlPolicy::Constant(vec![0.5]);
        let a = simulate_paths(&sde, &pol, 0.0, &[x0], 10, 1500, seed).unwrap();
        let b = in_pool(3, || simulate_paths(&sde, &pol, 0.0, &[x0], 10, 1500, seed).unwrap());
        prop_assert!(a.paths.iter().zip(&b.paths).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn arithmetic_paths_follow_their_increments(seed in any::<u64>(), drift in -1.0f64..1.0, v in -1.0f64..1.0) {
        let set = ControlSet::new(vec![-1.0], vec![1.0]).unwrap();
        let sigma = 0.4;
        let sde = ControlledSDE::arithmetic(drift, sigma, 1.0, set);
        let pol = ControlPolicy::Constant(vec![v]);
        let b = simulate_paths(&sde, &pol, 0.0, &[0.0], 8, 50, seed).unwrap();
        let dt = b.dt();
        for p in 0..b.n_paths {
            for k in 0..b.steps {
                let step = b.state(p, k + 1)[0] - b.state(p, k)[0];
                let want = (drift + v) * dt + sigma * b.increment(p, k)[0];
                prop_assert!((step - want).abs() <= 1e-12);
            }
        }
    }
}
