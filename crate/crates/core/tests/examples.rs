//! Runs every example's body so the examples stay compilable and truthful.

#[allow(dead_code)]
#[path = "../examples/balance_sim.rs"]
mod balance_sim;
#[allow(dead_code)]
#[path = "../examples/ste_gradcheck.rs"]
mod ste_gradcheck;
#[allow(dead_code)]
#[path = "../examples/rl_loss.rs"]
mod rl_loss;
#[allow(dead_code)]
#[path = "../examples/expert_expansion.rs"]
mod expert_expansion;
#[allow(dead_code)]
#[path = "../examples/precision_sweep.rs"]
mod precision_sweep;
#[allow(dead_code)]
#[path = "../examples/router_replay.rs"]
mod router_replay;
#[allow(dead_code)]
#[path = "../examples/patch_planning.rs"]
mod patch_planning;

#[test]
fn balance_sim_grouped_is_flat() {
    let (plain, grouped) = balance_sim::run_example().unwrap();
    assert_eq!(grouped, 1.0);
    assert!(plain > 1.0);
}

#[test]
fn ste_example_reaches_unselected_experts() {
    let grad = ste_gradcheck::run_example().unwrap();
    assert!(grad.iter().all(|g| *g != 0.0));
}

#[test]
fn rl_example_masks_the_divergent_token() {
    let out = rl_loss::run_example().unwrap();
    assert_eq!(out.coefficients[1][1], 0.0);
    assert!(out.advantages.iter().sum::<f64>().abs() < 1e-15);
}

#[test]
fn expansion_example_prefers_grouped_top() {
    let rates = expert_expansion::run_example().unwrap();
    assert!(rates[0].1 >= rates[1].1);
}

#[test]
fn precision_example_head_ordering() {
    let medians = precision_sweep::run_example().unwrap();
    assert!(medians[0].1 <= medians[1].1);
}

#[test]
fn replay_example_has_no_mismatches() {
    let check = router_replay::run_example().unwrap();
    assert_eq!(check.mismatches, 0);
    assert!(check.live_disagreements > 0);
}

#[test]
fn patch_example_stays_bounded() {
    for plan in patch_planning::run_example().unwrap() {
        assert!(plan.n_frames <= 4096);
    }
}

#[test]
fn every_main_runs() {
    balance_sim::main().unwrap();
    ste_gradcheck::main().unwrap();
    rl_loss::main().unwrap();
    expert_expansion::main().unwrap();
    precision_sweep::main().unwrap();
    router_replay::main().unwrap();
    patch_planning::main().unwrap();
}
