//! Expert-parallel dispatch simulator.
//!
//! Experts are laid out contiguously: with `S` devices and `N` experts, device
//! `s` hosts experts `[s·N/S, (s+1)·N/S)`. Under grouped routing with `G = S`
//! every token sends exactly `K/G` assignments to every device, so per-device
//! load is identical for any input.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numeric::{self, Matrix};
use crate::routing::{self, MoeLayerSpec, RoutingMode};

/// Per-device token-expert assignment counts for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub mode: RoutingMode,
    pub num_tokens: usize,
    pub active_k: usize,
    pub device_counts: Vec<u64>,
}

impl LoadReport {
    pub fn num_devices(&self) -> usize {
        self.device_counts.len()
    }

    pub fn total_assignments(&self) -> u64 {
        self.device_counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceMetrics {
    pub max_over_mean: f64,
    /// Population standard deviation over mean.
    pub coefficient_of_variation: f64,
}

/// Routes every token of `batch` and tallies assignments per hosting device.
pub fn dispatch(
    batch: &Matrix,
    w_r: &Matrix,
    spec: &MoeLayerSpec,
    num_devices: usize,
    mode: RoutingMode,
) -> Result<LoadReport> {
    spec.validate()?;
    if num_devices == 0 || !spec.num_experts.is_multiple_of(num_devices) {
        return Err(Error::InvalidConfig(format!(
            "{num_devices} devices do not evenly host {} experts",
            spec.num_experts
        )));
    }
    if mode == RoutingMode::Grouped && spec.num_groups != num_devices {
        return Err(Error::InvalidConfig(format!(
            "grouped dispatch needs one group per device (G={}, S={num_devices})",
            spec.num_groups
        )));
    }
    if w_r.rows() != spec.num_experts {
        return Err(Error::Shape(format!(
            "router has {} rows for {} experts",
            w_r.rows(),
            spec.num_experts
        )));
    }
    let per_device = spec.num_experts / num_devices;
    let mut device_counts = vec![0u64; num_devices];
    for t in 0..batch.rows() {
        let p = routing::router_probs(batch.row(t), w_r, 1.0)?;
        for e in routing::select(&p, spec, mode)? {
            device_counts[e / per_device] += 1;
        }
    }
    Ok(LoadReport { mode, num_tokens: batch.rows(), active_k: spec.active_k, device_counts })
}

pub fn balance_metrics(report: &LoadReport) -> BalanceMetrics {
    let counts: Vec<f64> = report.device_counts.iter().map(|&c| c as f64).collect();
    let s = counts.len() as f64;
    let mean = numeric::pairwise_sum(&counts) / s;
    if mean == 0.0 {
        return BalanceMetrics { max_over_mean: f64::NAN, coefficient_of_variation: f64::NAN };
    }
    let max = counts.iter().fold(0.0_f64, |m, &c| m.max(c));
    let sq: Vec<f64> = counts.iter().map(|c| (c - mean).powi(2)).collect();
    let std = (numeric::pairwise_sum(&sq) / s).sqrt();
    BalanceMetrics { max_over_mean: max / mean, coefficient_of_variation: std / mean }
}

/// Auxiliary balance loss `N · Σ_i f_i · P_i`, where `f_i` is the share of
/// token-expert assignments landing on expert `i` under `mode` and `P_i` is
/// the batch-mean router probability of expert `i`.
///
/// Equals 1 when both `f` and `P` are uniform and `N` when all assignments and
/// mass sit on one expert. For a single token it is bounded below by 1; for
/// multi-token batches it can dip below 1 when the experts chosen per token
/// disagree with where the batch-averaged mass sits.
pub fn balance_loss(batch: &Matrix, w_r: &Matrix, spec: &MoeLayerSpec, mode: RoutingMode) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    spec.validate()?;
    let n = spec.num_experts;
    let mut assignments = vec![0u64; n];
    let mut mass = vec![Vec::with_capacity(batch.rows()); n];
    for t in 0..batch.rows() {
        let p = routing::router_probs(batch.row(t), w_r, 1.0)?;
        for e in routing::select(&p, spec, mode)? {
            assignments[e] += 1;
        }
        for (m, pi) in mass.iter_mut().zip(p) {
            m.push(pi);
        }
    }
    Ok(balance_loss_from_parts(&assignments, &mass, spec.active_k))
}

/// `N · Σ f_i P_i` from per-expert assignment counts and, for each expert,
/// its routing probability on every token.
pub fn balance_loss_from_parts(assignments: &[u64], per_expert_probs: &[Vec<f64>], k: usize) -> f64 {
    let n = assignments.len();
    let tokens = per_expert_probs.first().map_or(0, Vec::len);
    let total = (tokens * k) as f64;
    let terms: Vec<f64> = assignments
        .iter()
        .zip(per_expert_probs)
        .map(|(&a, probs)| (a as f64 / total) * (numeric::pairwise_sum(probs) / tokens as f64))
        .collect();
    n as f64 * numeric::pairwise_sum(&terms)
}

/// One CSV row of `balance-sim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub mode: RoutingMode,
    pub tokens: usize,
    pub seed: u64,
    pub metrics: BalanceMetrics,
    pub balance_loss: f64,
}

pub const BALANCE_CSV_HEADER: &str = "mode,T,seed,max_over_mean,cv,balance_loss";

impl BalanceRow {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.mode,
            self.tokens,
            self.seed,
            self.metrics.max_over_mean,
            self.metrics.coefficient_of_variation,
            self.balance_loss
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn report(counts: Vec<u64>) -> LoadReport {
        LoadReport { mode: RoutingMode::PlainTopK, num_tokens: 100, active_k: 8, device_counts: counts }
    }

    #[test]
    fn metrics_equal_counts() {
        let m = balance_metrics(&report(vec![100; 8]));
        assert_eq!(m.max_over_mean, 1.0);
        assert_eq!(m.coefficient_of_variation, 0.0);
    }

    #[test]
    fn metrics_all_on_one_device() {
        let mut counts = vec![0; 8];
        counts[0] = 800;
        let m = balance_metrics(&report(counts));
        assert_eq!(m.max_over_mean, 8.0);
        assert!((m.coefficient_of_variation - 7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grouped_dispatch_is_exact() {
        let mut rng = Rng::new(1);
        let spec = MoeLayerSpec::new(64, 8, 8, 16, 1, 1.0).unwrap();
        let w_r = Matrix::gaussian(64, 16, 1.0, &mut rng);
        let batch = Matrix::gaussian(100, 16, 1.0, &mut rng);
        let rep = dispatch(&batch, &w_r, &spec, 8, RoutingMode::Grouped).unwrap();
        assert_eq!(rep.device_counts, vec![100; 8]);
        assert_eq!(balance_metrics(&rep).max_over_mean, 1.0);
    }

    #[test]
    fn adversarial_plain_router() {
        // Device 0 hosts experts 0..8; give them large logits for positive inputs.
        let spec = MoeLayerSpec::new(64, 8, 8, 2, 1, 1.0).unwrap();
        let w_r = Matrix::from_fn(64, 2, |r, _| if r < 8 { 5.0 } else { -5.0 });
        let batch = Matrix::from_fn(100, 2, |_, _| 1.0);
        let rep = dispatch(&batch, &w_r, &spec, 8, RoutingMode::PlainTopK).unwrap();
        let mut expected = vec![0; 8];
        expected[0] = 800;
        assert_eq!(rep.device_counts, expected);
    }

    #[test]
    fn dispatch_rejects_bad_layouts() {
        let spec = MoeLayerSpec::new(64, 8, 8, 2, 1, 1.0).unwrap();
        let w_r = Matrix::zeros(64, 2);
        let batch = Matrix::zeros(4, 2);
        assert!(dispatch(&batch, &w_r, &spec, 7, RoutingMode::PlainTopK).is_err());
        assert!(dispatch(&batch, &w_r, &spec, 4, RoutingMode::Grouped).is_err());
        assert!(dispatch(&batch, &w_r, &spec, 4, RoutingMode::PlainTopK).is_ok());
    }

    #[test]
    fn balance_loss_uniform_and_degenerate() {
        // Uniform: every expert gets the same share and the same mean probability.
        let n = 4;
        let uniform = balance_loss_from_parts(&[1; 4], &vec![vec![0.25; 4]; n], 1);
        assert!((uniform - 1.0).abs() < 1e-15);
        let mut probs = vec![vec![0.0]; n];
        probs[2] = vec![1.0];
        let degenerate = balance_loss_from_parts(&[0, 0, 1, 0], &probs, 1);
        assert_eq!(degenerate, n as f64);
    }

    #[test]
    fn balance_loss_can_dip_below_one_on_batches() {
        // Two tokens prefer expert 0 narrowly, one token strongly prefers expert 1.
        let probs = vec![vec![0.51, 0.51, 1e-9], vec![0.49, 0.49, 1.0 - 1e-9]];
        let loss = balance_loss_from_parts(&[2, 1], &probs, 1);
        assert!(loss < 1.0, "{loss}");
    }
}
