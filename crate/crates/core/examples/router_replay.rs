//! Records a routing trace during "rollout", perturbs every router heavily,
//! and shows that replay keeps expert selection identical while live routing
//! drifts. The trace also survives a round-trip through its binary encoding.

use moelab::experiments;
use moelab::replay::{self, RoutingTrace};
use moelab::{Matrix, MoeLayerSpec, Rng, RoutingMode};

pub fn run_example() -> moelab::Result<experiments::ReplayCheck> {
    let spec = MoeLayerSpec::new(32, 4, 1, 16, 1, 1.0)?;
    let layers = experiments::replay_layers(5, 4, &spec);
    let batch = Matrix::gaussian(64, 16, 1.0, &mut Rng::new(6));
    let trace = replay::record_trace(&batch, &layers, RoutingMode::PlainTopK)?;

    let bytes = trace.to_bytes()?;
    let decoded = RoutingTrace::from_bytes(&bytes)?;
    println!("trace: {} bytes, round-trip equal: {}", bytes.len(), decoded == trace);

    let check = experiments::replay_check(&decoded, &batch, &layers, RoutingMode::PlainTopK, 20, 10.0, 9)?;
    println!(
        "{} perturbations x {} entries: replay mismatches {}, live-routing disagreements {}",
        check.trials, check.entries_per_trial, check.mismatches, check.live_disagreements
    );
    Ok(check)
}

pub fn main() -> moelab::Result<()> {
    run_example().map(|_| ())
}
