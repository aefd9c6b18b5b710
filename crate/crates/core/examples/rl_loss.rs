//! Masked, dual-ratio policy-gradient loss on a small hand-made group of four
//! responses, followed by a gradient check on random toy problems.

use moelab::experiments;
use moelab::rlloss::{self, MaskConfig, Response, RolloutBatch};

fn response(train: &[f64], rollout: &[f64], reward: f64) -> Response {
    let new: Vec<f64> = train.iter().map(|v| v - 0.01).collect();
    Response {
        logp_train: train.to_vec(),
        logp_rollout: rollout.to_vec(),
        logp_old: train.to_vec(),
        logp_new: new,
        reward,
    }
}

pub fn run_example() -> moelab::Result<rlloss::RlLoss> {
    let cfg = MaskConfig::default();
    let batch = RolloutBatch::new(vec![
        response(&[-0.5, -1.0, -0.2], &[-0.5, -1.1, -0.2], 1.0),
        // The second token's train/rollout ratio is e^1.5 > 2, so it is masked out.
        response(&[-0.3, -0.1], &[-0.3, -1.6], 0.0),
        response(&[-2.0, -0.7, -0.4, -0.9], &[-2.1, -0.7, -0.4, -0.8], 1.0),
        response(&[-1.0], &[-1.0], 0.0),
    ])?;
    let out = rlloss::rl_loss(&batch, &cfg)?;
    println!("leave-one-out advantages: {:?}", out.advantages);
    for (i, c) in out.coefficients.iter().enumerate() {
        println!("  response {i} token coefficients: {c:.4?}");
    }
    println!("loss = {:.6}", out.loss);

    let check = experiments::rl_gradcheck(20, 3, 4, 6, 8, &cfg)?;
    println!(
        "gradient check over {} toy problems: worst relative error {:.2e}, {} masked tokens, max masked gradient {}",
        check.trials, check.max_rel_err, check.masked_tokens, check.max_masked_grad
    );
    Ok(out)
}

pub fn main() -> moelab::Result<()> {
    run_example().map(|_| ())
}
