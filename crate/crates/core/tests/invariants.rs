use hgp_core::backoff_engine::{confidence_lower_bound, BackoffTable, Bracket};
use hgp_core::gp_core::{GpPosterior, KernelHyperparams};
use hgp_core::num_kernel::sobol::sobol_points_from;
use hgp_core::num_kernel::{betainv, cholesky, reg_inc_beta, sobol_points, Matrix, RngStream};
use proptest::prelude::*;

fn spd(n: usize, seed: u64) -> Matrix<f64> {
    let mut rng = RngStream::new(seed, 0);
    let a = Matrix::from_fn(n, n, |_, _| rng.normal());
    let mut m = a.matmul(&a.transpose()).unwrap();
    for i in 0..n {
        m[(i, i)] += 1e-3 * n as f64;
    }
    m
}

fn posterior(seed: u64, n: usize) -> (GpPosterior<f64>, RngStream) {
    let mut rng = RngStream::new(seed, 1);
    let hyper = KernelHyperparams::new(vec![0.2 + rng.uniform(), 0.2 + rng.uniform()], 0.5 + rng.uniform(), 1e-3 + 0.05 * rng.uniform()).unwrap();
    let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![-2.0 + 4.0 * rng.uniform(), -2.0 + 4.0 * rng.uniform()]).collect();
    let ys = (0..n).map(|_| rng.normal()).collect();
    (GpPosterior::build(xs, ys, vec![true; n], hyper).unwrap(), rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cholesky_reconstructs(n in 1usize..=20, seed in any::<u64>()) {
        let m = spd(n, seed);
        let err = m.add(&cholesky(&m).unwrap().reconstruct().scaled(-1.0)).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn betainv_inverts_the_incomplete_beta(p in 0.01f64..0.99, ai in 0usize..5, bi in 0usize..5) {
        let shapes = [0.5, 1.0, 2.0, 10.0, 1000.0];
        let (a, b) = (shapes[ai], shapes[bi]);
        let x = betainv(p, a, b).unwrap();
        prop_assert!((reg_inc_beta(x, a, b).unwrap() - p).abs() <= 1e-9);
    }

    #[test]
    fn incomplete_beta_is_monotone(x in 0.0f64..1.0, dx in 0.0f64..0.5, a in 0.1f64..50.0, b in 0.1f64..50.0) {
        let y = (x + dx).min(1.0);
        prop_assert!(reg_inc_beta(y, a, b).unwrap() >= reg_inc_beta(x, a, b).unwrap() - 1e-14);
    }

    #[test]
    fn streams_are_independent_of_interleaving(seed in any::<u64>(), order in proptest::collection::vec(0usize..3, 30)) {
        let mut streams: Vec<RngStream> = (0..3).map(|i| RngStream::new(seed, i)).collect();
        let mut seen: Vec<Vec<u64>> = vec![Vec::new(); 3];
        for &i in &order {
            seen[i].push(streams[i].next_u64());
        }
        for (i, got) in seen.iter().enumerate() {
            let mut fresh = RngStream::new(seed, i as u64);
            let want: Vec<u64> = (0..got.len()).map(|_| fresh.next_u64()).collect();
            prop_assert_eq!(got, &want);
        }
    }

    #[test]
    fn sobol_windows_agree_with_the_full_sequence(start in 1usize..200, count in 1usize..50, dims in 1usize..=6) {
        let bounds: Vec<(f64, f64)> = (0..dims).map(|d| (-(d as f64), 1.0 + d as f64)).collect();
        let all = sobol_points(start + count, &bounds).unwrap();
        let window = sobol_points_from(start, count, &bounds).unwrap();
        for i in 0..count {
            prop_assert_eq!(window.row(i), all.row(start - 1 + i));
        }
    }

    #[test]
    fn posterior_variance_never_exceeds_the_prior(seed in any::<u64>(), n in 1usize..12) {
        let (post, mut rng) = posterior(seed, n);
        for _ in 0..20 {
            let z = [-3.0 + 6.0 * rng.uniform(), -3.0 + 6.0 * rng.uniform()];
            let (_, v) = post.predict_with(&z, true);
            prop_assert!(v >= 0.0 && v <= post.hyper.magnitude_sq + post.hyper.noise_var + 1e-12);
        }
    }

    #[test]
    fn mean_is_linear_in_the_targets(seed in any::<u64>(), n in 1usize..10, s in -3.0f64..3.0) {
        let (p, mut rng) = posterior(seed, n);
        let other: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mix: Vec<f64> = p.targets.iter().zip(&other).map(|(a, b)| a + s * b).collect();
        let q = GpPosterior::build(p.inputs.clone(), other, p.noisy.clone(), p.hyper.clone()).unwrap();
        let r = GpPosterior::build(p.inputs.clone(), mix, p.noisy.clone(), p.hyper.clone()).unwrap();
        let z = [rng.uniform(), rng.uniform()];
        prop_assert!((r.mean(&z) - p.mean(&z) - s * q.mean(&z)).abs() <= 1e-9 * (1.0 + r.mean(&z).abs()));
    }

    #[test]
    fn noiseless_conditioning_only_shrinks_variance(seed in any::<u64>(), n in 1usize..10) {
        let (p, mut rng) = posterior(seed, n);
        let z = vec![-2.0 + 4.0 * rng.uniform(), -2.0 + 4.0 * rng.uniform()];
        let c = p.condition_on_noiseless(z, rng.normal()).unwrap();
        for _ in 0..50 {
            let probe = [-3.0 + 6.0 * rng.uniform(), -3.0 + 6.0 * rng.uniform()];
            prop_assert!(c.predict_with(&probe, false).1 <= p.predict_with(&probe, false).1 + 1e-8);
        }
    }

    #[test]
    fn appended_factor_matches_refactorization(n in 2usize..=15, seed in any::<u64>()) {
        let m = spd(n, seed);
        let lead = Matrix::from_fn(n - 1, n - 1, |i, j| m[(i, j)]);
        let cross: Vec<f64> = (0..n - 1).map(|i| m[(n - 1, i)]).collect();
        let (grown, _) = cholesky(&lead).unwrap().append(&cross, m[(n - 1, n - 1)]).unwrap();
        let full = cholesky(&m).unwrap().lower();
        prop_assert!(grown.lower().add(&full.scaled(-1.0)).unwrap().max_abs() <= 1e-8 * full.max_abs());
    }

    #[test]
    fn bound_is_strictly_conservative(s in 1usize..2000, frac in 0.0f64..=1.0, alpha in 0.001f64..0.2) {
        let m = ((frac * s as f64).round() as usize).max(1);
        let beta = m as f64 / s as f64;
        let lb = confidence_lower_bound(beta, s, alpha, false).unwrap();
        prop_assert!(lb < beta && lb >= 0.0);
    }

    #[test]
    fn effective_backoffs_are_exact_multiples(seed in any::<u64>(), gamma in 0.0f64..100.0) {
        let mut rng = RngStream::new(seed, 0);
        let t = BackoffTable::new(Matrix::from_fn(3, 13, |_, _| rng.normal().abs()), gamma);
        for (e, b) in t.effective.data().iter().zip(t.base.data()) {
            prop_assert_eq!(e.to_bits(), (gamma * b).to_bits());
        }
    }

    #[test]
    fn bisection_keeps_opposite_signs(hs in proptest::collection::vec(-1.0f64..1.0, 1..20)) {
        let mut br = Bracket::new(0.0, -0.5, 8.0, 0.5).unwrap();
        let width = br.width();
        for (i, h) in hs.iter().enumerate() {
            br = br.step(br.midpoint(), *h);
            prop_assert!(br.h_a < 0.0 && br.h_b >= 0.0);
            prop_assert!((br.width() - width / 2f64.powi(i as i32 + 1)).abs() < 1e-12);
        }
    }
}
