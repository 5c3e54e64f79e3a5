use hgp_bioreactor::closed_loop::{plant_closed_loop, terminal_product};
use hgp_bioreactor::scenario::ScenarioConfig;
use hgp_core::gp_path_sampler::{Action, ConstantPolicy, PathStatus, Policy};

fn config() -> ScenarioConfig {
    ScenarioConfig::from_overrides("[scenario]\nhorizon = 3\nbatch_time = 30.0\n").unwrap()
}

#[test]
fn rollouts_do_not_depend_on_thread_count() {
    let cfg = config();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| plant_closed_loop(&cfg, &ConstantPolicy(vec![200.0, 2.0]), &cfg.constraints(), 6, 9).unwrap())
    };
    let (a, b) = (run(1), run(3));
    for s in 0..6 {
        let bits = |m: &hgp_core::num_kernel::Matrix<f64>| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.states[s]), bits(&b.states[s]));
        assert_eq!(bits(&a.constraint_values[s]), bits(&b.constraint_values[s]));
    }
    assert_eq!(a.status, vec![PathStatus::Completed; 6]);
}

#[test]
fn policies_share_initial_states_and_disturbances() {
    let cfg = config();
    let g = cfg.constraints();
    let a = plant_closed_loop(&cfg, &ConstantPolicy(vec![150.0, 1.0]), &g, 4, 2).unwrap();
    let b = plant_closed_loop(&cfg, &ConstantPolicy(vec![250.0, 4.0]), &g, 4, 2).unwrap();
    let c = plant_closed_loop(&cfg, &ConstantPolicy(vec![150.0, 1.0]), &g, 4, 3).unwrap();
    for s in 0..4 {
        assert_eq!(a.states[s].row(0), b.states[s].row(0));
        assert_ne!(a.states[s].row(0), c.states[s].row(0));
    }
    // g3 only applies at the end
    assert!(a.constraint_values[0][(0, 2)].is_nan() && a.constraint_values[0][(3, 2)].is_finite());
    assert!(terminal_product(&a).iter().all(|v| v.is_finite()));
}

struct GivesUp;

impl Policy for GivesUp {
    type Memory = ();
    fn start(&self) {}
    fn act(&self, _: &[f64], k: usize, _: &mut ()) -> Action {
        Action { u: vec![200.0, 2.0], failed: k == 1 }
    }
}

#[test]
fn failed_policy_ends_the_rollout_as_a_violation() {
    let cfg = config();
    let ens = plant_closed_loop(&cfg, &GivesUp, &cfg.constraints(), 2, 0).unwrap();
    for s in 0..2 {
        assert_eq!(ens.status[s], PathStatus::PolicyFailed(1));
        assert_eq!(ens.worst_case[s], f64::INFINITY);
        assert!(ens.states[s].row(1).iter().all(|v| v.is_finite()));
        assert!(ens.states[s].row(2).iter().all(|v| v.is_nan()));
    }
    assert!(terminal_product(&ens).iter().all(|v| v.is_nan()));
}
