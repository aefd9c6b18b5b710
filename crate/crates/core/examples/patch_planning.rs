//! Adaptive patching keeps the frame count bounded for signals ranging from a
//! handful of samples to a million.

use moelab::signal::{self, PatchPlan};

pub fn run_example() -> moelab::Result<Vec<PatchPlan>> {
    let (rate, f_min, f_max) = (1000.0, 16, 4096);
    let mut plans = Vec::new();
    for len in [5, 100, 4096, 10_000, 250_000, 1_000_000] {
        let plan = signal::plan_patches(len, rate, f_min, f_max)?;
        println!("len {len:>9}: patch {:>4}, frames {:>4}", plan.patch_size, plan.n_frames);
        plans.push(plan);
    }
    Ok(plans)
}

pub fn main() -> moelab::Result<()> {
    run_example().map(|_| ())
}
