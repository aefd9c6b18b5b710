//! Divergence between a full-precision "train" engine and rollout engines that
//! round experts, non-expert activations and the output head differently.

use moelab::experiments::{self, ToyShape};
use moelab::precision::PrecisionPolicy;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Median per-trial KL for each policy, in the order of `policies`.
pub fn run_example() -> moelab::Result<Vec<(&'static str, f64)>> {
    let policies = [PrecisionPolicy::MIXED, PrecisionPolicy::BF16_HEAD, PrecisionPolicy::ALL_BF16];
    let shape = ToyShape::default();
    let mut per_policy = vec![Vec::new(); policies.len()];
    for seed in 0..50 {
        let rows = experiments::precision_trial(seed, &shape, &PrecisionPolicy::REFERENCE, &policies)?;
        for (acc, row) in per_policy.iter_mut().zip(rows) {
            acc.push(row.kl_k1);
        }
    }
    let out: Vec<_> = policies.iter().zip(per_policy).map(|(p, v)| (p.tag(), median(v))).collect();
    for (tag, m) in &out {
        println!("{tag:<10} median KL(train || rollout) = {m:.3e}");
    }
    Ok(out)
}

pub fn main() -> moelab::Result<()> {
    run_example().map(|_| ())
}
