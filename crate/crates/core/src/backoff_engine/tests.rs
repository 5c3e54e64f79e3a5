use super::*;
use crate::gp_core::{GpOutput, GpPosterior, InputScaling, KernelHyperparams, LatentScaling};
use crate::hybrid_dynamics::{Scheme, StateSpaceModel};
use crate::nmpc::{ControlBox, SolverOptions};
use crate::Scalar;

#[test]
fn ecdf_counts_nonpositive() {
    assert_eq!(ecdf_satisfaction(&[-1.0; 5]), 1.0);
    assert_eq!(ecdf_satisfaction(&[-1.0, -1.0, 2.0, -3.0]), 0.75);
    assert_eq!(ecdf_satisfaction(&[0.0, f64::NAN, f64::INFINITY, -2.0]), 0.5);
}

#[test]
fn ecdf_tracks_a_known_probability() {
    // C ~ U(−0.7, 0.3) so P(C ≤ 0) = 0.7
    let mut rng = crate::num_kernel::RngStream::new(3, 0);
    for s in [100usize, 1000, 10000] {
        let c: Vec<f64> = (0..s).map(|_| rng.uniform() - 0.7).collect();
        let p = ecdf_satisfaction(&c);
        assert!((p - 0.7).abs() <= 3.0 / (s as f64).sqrt(), "S = {s}: {p}");
    }
}

#[test]
fn bound_closed_forms_and_order() {
    let p = BackoffRunParams { samples: 10, alpha: 0.05, ..Default::default() };
    assert!((p.lower_bound(1.0).unwrap() - 0.05f64.powf(0.1)).abs() < 1e-6);
    let p = BackoffRunParams::default();
    assert!((p.lower_bound(1.0).unwrap() - 0.995405).abs() < 1e-6);
    assert!(p.lower_bound(0.95).unwrap() > p.lower_bound(0.9).unwrap());
    assert_eq!(p.lower_bound(0.0).unwrap(), 0.0);
}

#[test]
fn quantile_is_ceiling_order_statistic() {
    let s = [2.0, -1.0, 0.5, -5.0, -3.0];
    assert_eq!(upper_quantile(&s, 0.95), 2.0);
    assert_eq!(upper_quantile(&s, 0.2), -5.0);
    assert_eq!(upper_quantile(&s, 0.6), -1.0);
    assert_eq!(upper_quantile(&[1.0, f64::NAN], 0.9), f64::INFINITY);
}

#[test]
fn bracket_halves_towards_the_sign_change() {
    let b = Bracket::new(0.0, -0.2, 4.0, 0.1).unwrap();
    let b = b.step(2.0, -0.05);
    assert_eq!((b.a, b.b), (2.0, 4.0));
    let b = b.step(3.0, 0.0);
    assert_eq!((b.a, b.b), (2.0, 3.0));
    assert!(b.exact);
    let mut b = Bracket::new(0.0, -1.0, 4.0, 1.0).unwrap();
    for n in 1..=10 {
        let c = b.midpoint();
        b = b.step(c, c - 1.3);
        assert!((b.width() - 4.0 / 2f64.powi(n)).abs() < 1e-15);
        assert!(b.h_a < 0.0 && b.h_b >= 0.0);
    }
    assert!(matches!(Bracket::new(0.0, -1.0, 4.0, -0.5), Err(Error::InvalidBracket { .. })));
}

#[test]
fn table_scales_exactly_and_round_trips() {
    let base = Matrix::from_fn(3, 4, |j, k| if k == 0 { 0.0 } else { 0.1 * j as f64 + 1.0 / (k as f64 + 2.0) });
    let t = BackoffTable::new(base.clone(), 0.37);
    for j in 0..3 {
        for k in 0..4 {
            assert_eq!(t.effective[(j, k)], 0.37 * base[(j, k)]);
        }
    }
    assert!(t.with_gamma(0.0).effective.data().iter().all(|&v| v == 0.0));
    let back = BackoffTable::from_csv(&t.to_csv()).unwrap();
    assert_eq!(back, t);
    assert!(BackoffTable::from_csv("a,b\n").is_err());
}

#[derive(Clone)]
struct ReachOne;

impl CostSpec for ReachOne {
    fn stage<S: Scalar>(&self, _: &[S], u: &[S], _: &[S]) -> S {
        S::c(0.1) * u[0] * u[0]
    }
    fn terminal<S: Scalar>(&self, x: &[S]) -> S {
        S::c(10.0) * (x[0] - S::one()) * (x[0] - S::one())
    }
}

#[derive(Clone)]
struct Cap(f64);

impl PathConstraints for Cap {
    fn n_g(&self) -> usize {
        1
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        vec![x[0] - S::c(self.0)]
    }
}

/// x⁺ ≈ x + 0.5 u learnt from a grid with the given spacing.
fn gp(spacing: f64, noise: f64) -> GpModel {
    let mut inputs = Vec::new();
    let n = (3.0 / spacing).round() as usize;
    for i in 0..=n {
        for j in 0..=n {
            inputs.push(vec![-1.0 + spacing * i as f64, -1.5 + spacing * j as f64]);
        }
    }
    let targets = inputs.iter().map(|z| z[0] + 0.5 * z[1]).collect();
    let len = inputs.len();
    let post = GpPosterior::build(inputs, targets, vec![true; len], KernelHyperparams::new(vec![4.0, 4.0], 1.0, noise).unwrap()).unwrap();
    GpModel { outputs: vec![GpOutput { posterior: post, input_scaling: InputScaling::identity(2), latent_scaling: LatentScaling::default() }] }
}

fn setup(w_var: f64, cap: f64) -> (SystemSpec<StateSpaceModel>, OcpConfig<ReachOne, Cap>) {
    let spec = SystemSpec::new(StateSpaceModel { n_x: 1, n_u: 1 }, 1.0, 3, Matrix::from_diag(&[1e-4]), Matrix::from_diag(&[w_var]), vec![0.0], Matrix::from_diag(&[w_var])).unwrap();
    let cfg = OcpConfig {
        horizon: 3,
        scheme: Scheme::direct(),
        costs: ReachOne,
        constraints: Cap(cap),
        control_box: ControlBox::new(vec![-1.0], vec![1.0]).unwrap(),
        backoffs: Matrix::zeros(1, 4),
        solver: SolverOptions::default(),
        initial_control: Some(vec![0.0]),
    };
    (spec, cfg)
}

#[test]
fn tuning_reaches_the_target_with_a_valid_bracket() {
    let (spec, cfg) = setup(4e-3, 0.8);
    let model = gp(1.0, 1e-3);
    let params = BackoffRunParams { samples: 60, n_b: 5, ..Default::default() };
    let problem = BackoffProblem { spec: &spec, gp: &model, config: &cfg, params, master_seed: 17, sampler: SamplerOptions::default() };
    let mut seen = 0;
    let out = problem.run(&mut |_| seen += 1).unwrap();
    assert!(!out.degenerate);
    assert_eq!(seen, out.records.len());
    let target = 1.0 - params.epsilon;
    assert!(out.records[0].h < 0.0, "{:?}", out.records[0]);
    assert!(out.table.base.data()[1..].iter().all(|&b| b > 0.0), "{:?}", out.table.base);
    assert!(out.beta_lb >= target);
    for r in out.records.iter().filter(|r| r.kind == IterationKind::Bisection) {
        let (a, b) = r.bracket.unwrap();
        assert!(a < b);
    }
    let last = out.records.last().unwrap().bracket.unwrap();
    assert_eq!(out.table.gamma, last.1);

    // common random numbers: the same γ gives the same ensemble
    let e1 = problem.evaluate(&out.table).unwrap();
    let e2 = problem.evaluate(&out.table).unwrap();
    assert_eq!(e1.ensemble.worst_case, e2.ensemble.worst_case);
    assert_eq!(e1.beta_lb, out.beta_lb);
}

#[test]
fn certain_system_needs_no_tightening() {
    let (spec, cfg) = setup(0.0, 2.0);
    let model = gp(0.25, 1e-8);
    let params = BackoffRunParams { samples: 50, n_b: 3, ..Default::default() };
    let problem = BackoffProblem { spec: &spec, gp: &model, config: &cfg, params, master_seed: 5, sampler: SamplerOptions::default() };
    let out = problem.run(&mut |_| {}).unwrap();
    assert!(out.degenerate);
    assert_eq!(out.beta_hat, 1.0);
    assert!(out.records[0].h > 0.0);
    assert_eq!(out.table.gamma, 0.0);
    assert!(out.table.effective.data().iter().all(|&v| v == 0.0));
}

#[test]
fn params_are_validated() {
    assert!(BackoffRunParams { epsilon: 0.0, ..Default::default() }.validate().is_err());
    assert!(BackoffRunParams { samples: 1, ..Default::default() }.validate().is_err());
    assert!(BackoffRunParams { n_b: 0, ..Default::default() }.validate().is_err());
    assert!(BackoffRunParams::default().validate().is_ok());
}

fn ensemble_of(values: &[f64]) -> TrajectoryEnsemble {
    let n = values.len();
    TrajectoryEnsemble {
        states: vec![Matrix::zeros(2, 1); n],
        controls: vec![Matrix::zeros(1, 1); n],
        constraint_values: values.iter().map(|&v| Matrix::from_rows(&[[f64::NAN], [v]])).collect(),
        worst_case: values.to_vec(),
        seeds: (0..n as u64).collect(),
        status: vec![PathStatus::Completed; n],
    }
}

#[test]
fn base_backoff_is_quantile_minus_nominal() {
    let nominal = Matrix::from_rows(&[[f64::NAN], [-4.0]]);
    let ens = ensemble_of(&[-5.0, -3.0, -1.0, 0.5, 2.0]);
    let b = initial_backoffs(&ens, &nominal, &Cap(0.0), 0.95).unwrap();
    assert_eq!(b[(0, 0)], 0.0);
    assert_eq!(b[(0, 1)], 6.0);
    // δ at the 1/S limit picks the minimum
    assert_eq!(initial_backoffs(&ens, &nominal, &Cap(0.0), 0.2).unwrap()[(0, 1)], -1.0);
    let flat = ensemble_of(&[-4.0; 5]);
    assert_eq!(initial_backoffs(&flat, &nominal, &Cap(0.0), 0.95).unwrap()[(0, 1)], 0.0);
    // a failed path at the quantile falls back to the largest finite sample
    let failed = ensemble_of(&[-5.0, -3.0, -1.0, 0.5, f64::NAN]);
    assert_eq!(initial_backoffs(&failed, &nominal, &Cap(0.0), 0.95).unwrap()[(0, 1)], 4.5);
}
