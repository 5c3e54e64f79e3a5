use super::*;
use crate::gp_core::{GpOutput, InputScaling, KernelHyperparams, LatentScaling};
use crate::hybrid_dynamics::StateSpaceModel;

fn posterior(inputs: Vec<Vec<f64>>, f: impl Fn(&[f64]) -> f64, hyper: KernelHyperparams<f64>) -> GpPosterior<f64> {
    let targets = inputs.iter().map(|z| f(z)).collect();
    let n = inputs.len();
    GpPosterior::build(inputs, targets, vec![true; n], hyper).unwrap()
}

/// x⁺ = q(x, u) with q ≈ 0.8x + 0.1u learned from a handful of points.
fn scalar_gp(points: usize, noise: f64) -> GpModel {
    let inputs: Vec<Vec<f64>> = (0..points).map(|k| vec![-1.0 + 2.0 * k as f64 / (points - 1) as f64, 0.1 * ((k % 3) as f64)]).collect();
    let hyper = KernelHyperparams::new(vec![0.5, 1.0], 1.0, noise).unwrap();
    let post = posterior(inputs, |z| 0.8 * z[0] + 0.1 * z[1], hyper);
    GpModel { outputs: vec![GpOutput { posterior: post, input_scaling: InputScaling::identity(2), latent_scaling: LatentScaling::default() }] }
}

fn direct_spec(x0: f64, x0_var: f64, w_var: f64, horizon: usize) -> SystemSpec<StateSpaceModel> {
    SystemSpec::new(StateSpaceModel { n_x: 1, n_u: 1 }, 1.0, horizon, Matrix::from_diag(&[1e-4]), Matrix::from_diag(&[w_var]), vec![x0], Matrix::from_diag(&[x0_var])).unwrap()
}

struct Below(f64);

impl PathConstraints for Below {
    fn n_g(&self) -> usize {
        2
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        vec![x[0] - S::c(self.0), -x[0] - S::c(10.0)]
    }
    fn applies(&self, j: usize, k: usize) -> bool {
        j == 0 || k > 0
    }
}

#[test]
fn worst_case_is_the_maximum() {
    assert_eq!(worst_case_constraint(&Matrix::from_rows(&[[-1.0, -1.0], [-1.0, -1.0]])), -1.0);
    assert_eq!(worst_case_constraint(&Matrix::from_rows(&[[-1.0, -3.0], [0.5, -2.0]])), 0.5);
    assert_eq!(worst_case_constraint(&Matrix::from_rows(&[[-1.0, f64::NAN]])), -1.0);
    // a sample whose first constraint peaks at 850 against a bound of 800
    let g = Matrix::from_rows(&[[-700.0], [50.0], [-20.0]]);
    assert!(worst_case_constraint(&g) >= 50.0);
}

#[test]
fn matches_hand_rolled_paths() {
    let gp = scalar_gp(6, 1e-3);
    let spec = direct_spec(0.2, 0.01, 4e-4, 3);
    let ens = simulate_closed_loop(&spec, &Scheme::direct(), &gp, &ConstantPolicy(vec![0.1]), &Below(0.5), 3, 77, &SamplerOptions::default()).unwrap();
    assert_eq!(ens.len(), 3);
    for s in 0..3u64 {
        let mut rng = RngStream::new(77, s);
        let mut x = 0.2 + 0.1 * rng.normal();
        let mut post = gp.outputs[0].posterior.clone();
        let mut xs = vec![x];
        for _ in 0..3 {
            let xi = rng.normal();
            let w = 0.02 * rng.normal();
            let z = vec![x, 0.1];
            let (m, v) = post.predict_with(&z, false);
            let q = if v > 1e-9 { m + v.sqrt() * xi } else { m };
            post.push_noiseless(z, q).unwrap();
            x = q + w;
            xs.push(x);
        }
        for (k, want) in xs.iter().enumerate() {
            assert!((ens.states[s as usize][(k, 0)] - want).abs() < 1e-10, "path {s} step {k}");
        }
        let g = &ens.constraint_values[s as usize];
        assert!(g[(0, 1)].is_nan());
        assert!((g[(3, 0)] - (xs[3] - 0.5)).abs() < 1e-10);
        assert_eq!(ens.worst_case[s as usize], worst_case_constraint(g));
    }
}

#[test]
fn ensemble_shapes_and_determinism() {
    let gp = scalar_gp(6, 1e-3);
    let spec = direct_spec(0.2, 0.01, 1e-4, 4);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate_closed_loop(&spec, &Scheme::direct(), &gp, &FnPolicy(|x: &[f64], _| vec![-0.5 * x[0]]), &Below(0.5), 7, 5, &SamplerOptions::default()).unwrap())
    };
    let a = run(1);
    let b = run(3);
    for s in 0..7 {
        assert_eq!((a.states[s].rows(), a.states[s].cols()), (5, 1));
        assert_eq!((a.controls[s].rows(), a.controls[s].cols()), (4, 1));
        assert_eq!((a.constraint_values[s].rows(), a.constraint_values[s].cols()), (5, 2));
        assert_eq!(a.states[s], b.states[s]);
        assert_eq!(a.worst_case[s].to_bits(), b.worst_case[s].to_bits());
    }
    assert_eq!(a.seeds, (0..7).collect::<Vec<u64>>());
}

#[test]
fn revisited_input_reproduces_its_draw() {
    let gp = scalar_gp(4, 1e-2);
    let spec = direct_spec(0.3, 0.0, 0.0, 2);
    let noise = GaussianNoise::new(&spec.disturbance_cov).unwrap();
    let mut path = SampledPathState::start(&spec, &gp, 1, 0).unwrap();
    let opts = SamplerOptions::default();
    path.sample_step(&spec, &Scheme::direct(), &gp, &[0.05], &noise, &opts).unwrap();
    let first = path.state.clone();
    path.state = vec![0.3];
    path.sample_step(&spec, &Scheme::direct(), &gp, &[0.05], &noise, &opts).unwrap();
    assert!((path.state[0] - first[0]).abs() < 1e-12);
    assert_eq!(path.conditioned_points(0), 4 + 2);
}

#[test]
fn certain_model_follows_the_mean() {
    // dense, nearly noiseless data: posterior variance is ~0 on the range
    let inputs: Vec<Vec<f64>> = (0..41).flat_map(|a| (0..5).map(move |b| vec![-1.0 + a as f64 * 0.05, -0.2 + 0.1 * b as f64])).collect();
    let post = posterior(inputs, |z| (0.8 * z[0]).sin() + 0.1 * z[1], KernelHyperparams::new(vec![1.0, 1.0], 1.0, 1e-12).unwrap());
    let gp = GpModel { outputs: vec![GpOutput { posterior: post, input_scaling: InputScaling::identity(2), latent_scaling: LatentScaling::default() }] };
    let spec = direct_spec(0.4, 0.0, 0.0, 3);
    let ens = simulate_closed_loop(&spec, &Scheme::direct(), &gp, &ConstantPolicy(vec![0.1]), &Below(1.0), 4, 9, &SamplerOptions::default()).unwrap();
    let mut x = vec![0.4];
    for k in 1..=3 {
        x = nominal_step(&spec, &Scheme::direct(), &gp, &x, &[0.1], &NewtonOptions::default()).unwrap();
        for s in 0..4 {
            assert!((ens.states[s][(k, 0)] - x[0]).abs() < 1e-6);
        }
    }
}

/// dx/dt = −x + q(x) + u with Radau collocation.
struct Leaky;

impl HybridModel for Leaky {
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_q(&self) -> usize {
        1
    }
    fn q_in_dim(&self, _: usize) -> usize {
        1
    }
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], q: &[S]) -> Vec<S> {
        vec![-x[0] + q[0] + u[0]]
    }
    fn q_in<S: Scalar>(&self, _: usize, x: &[S], _u: &[S]) -> Vec<S> {
        vec![x[0]]
    }
}

#[test]
fn implicit_draws_condition_consistently() {
    let inputs: Vec<Vec<f64>> = (0..5).map(|k| vec![-1.0 + 0.5 * k as f64]).collect();
    let post = posterior(inputs, |z| 0.5 * z[0].sin(), KernelHyperparams::new(vec![0.3], 0.5, 1e-4).unwrap());
    let gp = GpModel { outputs: vec![GpOutput { posterior: post, input_scaling: InputScaling { shift: vec![0.1], scale: vec![1.3] }, latent_scaling: LatentScaling { offset: 0.05, scale: 0.7 } }] };
    let spec = SystemSpec::new(Leaky, 0.5, 4, Matrix::from_diag(&[1e-4]), Matrix::from_diag(&[1e-4]), vec![0.2], Matrix::from_diag(&[1e-3])).unwrap();
    let scheme = Scheme::radau(3).unwrap();
    let noise = GaussianNoise::new(&spec.disturbance_cov).unwrap();
    let mut path = SampledPathState::start(&spec, &gp, 3, 2).unwrap();
    for k in 1..=4 {
        path.sample_step(&spec, &scheme, &gp, &[0.3], &noise, &SamplerOptions::default()).unwrap();
        let p = &path.posteriors[0];
        assert_eq!(p.len(), 5 + k * 3);
        for (z, t) in p.inputs.iter().zip(&p.targets).skip(5) {
            assert!((p.mean(z) - t).abs() < 1e-8, "step {k}: {} vs {t}", p.mean(z));
        }
    }
    // the base model is untouched
    assert_eq!(gp.outputs[0].posterior.len(), 5);
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn probe_draws_match_predictive_distribution() {
    let gp = scalar_gp(5, 1e-2);
    // fixed start, no disturbance: x₁ is exactly the drawn q at (x₀, u)
    let spec = direct_spec(0.35, 0.0, 0.0, 1);
    let ens = simulate_closed_loop(&spec, &Scheme::direct(), &gp, &ConstantPolicy(vec![0.7]), &Below(5.0), 500, 21, &SamplerOptions::default()).unwrap();
    let draws: Vec<f64> = ens.states.iter().map(|s| s[(1, 0)]).collect();
    let (m, v) = mean_var(&draws);
    let (pm, pv) = gp.outputs[0].posterior.predict_with(&[0.35, 0.7], false);
    assert!(pv > 1e-4);
    assert!((m - pm).abs() <= 3.0 * (pv / 500.0).sqrt(), "{m} vs {pm}");
    assert!((v - pv).abs() <= 3.0 * pv * (2.0f64 / 499.0).sqrt(), "{v} vs {pv}");
    // one-step state mean against the mean model
    let nominal = nominal_step(&spec, &Scheme::direct(), &gp, &[0.35], &[0.7], &NewtonOptions::default()).unwrap();
    assert!((m - nominal[0]).abs() <= 3.0 * (v / 500.0).sqrt());
}

#[test]
fn larger_disturbance_does_not_shrink_spread() {
    let gp = scalar_gp(6, 1e-3);
    let run = |w: f64| {
        let spec = direct_spec(0.2, 0.0, w, 4);
        let ens = simulate_closed_loop(&spec, &Scheme::direct(), &gp, &ConstantPolicy(vec![0.1]), &Below(5.0), 500, 4, &SamplerOptions::default()).unwrap();
        mean_var(&ens.states.iter().map(|s| s[(4, 0)]).collect::<Vec<_>>()).1
    };
    assert!(run(4e-3) >= run(1e-3));
}

#[test]
fn failed_policy_counts_as_violation() {
    struct Failing;
    impl Policy for Failing {
        type Memory = usize;
        fn start(&self) -> usize {
            0
        }
        fn act(&self, _: &[f64], k: usize, calls: &mut usize) -> Action {
            *calls += 1;
            Action { u: vec![0.0], failed: k == 1 }
        }
    }
    let gp = scalar_gp(6, 1e-3);
    let spec = direct_spec(0.2, 0.0, 0.0, 3);
    let ens = simulate_closed_loop(&spec, &Scheme::direct(), &gp, &Failing, &Below(5.0), 2, 0, &SamplerOptions::default()).unwrap();
    for s in 0..2 {
        assert_eq!(ens.status[s], PathStatus::PolicyFailed(1));
        assert_eq!(ens.worst_case[s], f64::INFINITY);
        assert!(ens.states[s][(2, 0)].is_nan());
    }
}
