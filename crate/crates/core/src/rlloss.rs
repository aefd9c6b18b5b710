//! Masked dual-importance-sampling REINFORCE loss with a leave-one-out baseline.
//!
//! For a group of `G` responses to one prompt,
//!
//! ```text
//! L = −(1/G) Σ_i (1/|y_i|) Σ_t sg(M(ρ_it; α, β) · r_it) · Â_i · log π_new(y_it)
//! ρ_it = π_train / π_rollout      r_it = π_new / π_old
//! M(ρ) = ρ if α < ρ < β, else 0
//! Â_i  = R_i − mean_{j≠i} R_j
//! ```
//!
//! `sg` freezes the coefficient `c_it = M(ρ_it) · r_it · Â_i`, so the gradient
//! only flows through `log π_new`.

use std::fmt::Write as _;

use crate::error::{Error, FormatError, Result};
use crate::numeric::{self, Rng};

/// Mask bounds `(α, β)`, exclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl MaskConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < beta && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("mask needs 0 < alpha < beta, got ({alpha}, {beta})")));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for MaskConfig {
    /// `(0.5, 2.0)`: demo defaults, not tuned values.
    fn default() -> Self {
        Self { alpha: 0.5, beta: 2.0 }
    }
}

/// Token log-probabilities of one response under the four policy snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub logp_train: Vec<f64>,
    pub logp_rollout: Vec<f64>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
}

impl Response {
    pub fn len(&self) -> usize {
        self.logp_new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_new.is_empty()
    }
}

/// The `G` sampled responses for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub responses: Vec<Response>,
}

impl RolloutBatch {
    pub fn new(responses: Vec<Response>) -> Result<Self> {
        let batch = Self { responses };
        batch.validate()?;
        Ok(batch)
    }

    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.responses.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "leave-one-out baseline needs at least 2 responses, got {}",
                self.responses.len()
            )));
        }
        for (i, r) in self.responses.iter().enumerate() {
            let len = r.logp_new.len();
            if len == 0 {
                return Err(Error::Shape(format!("response {i} is empty")));
            }
            if [&r.logp_train, &r.logp_rollout, &r.logp_old].iter().any(|v| v.len() != len) {
                return Err(Error::Shape(format!("response {i}: snapshots have different lengths")));
            }
            let all = [&r.logp_train, &r.logp_rollout, &r.logp_new, &r.logp_old];
            if all.iter().any(|v| v.iter().any(|&lp| lp > 0.0 || lp.is_nan())) {
                return Err(Error::InvalidConfig(format!("response {i}: log-probabilities must be <= 0")));
            }
            if !r.reward.is_finite() {
                return Err(Error::InvalidConfig(format!("response {i}: non-finite reward")));
            }
        }
        Ok(())
    }

    /// Line-delimited text form, one response per line:
    ///
    /// ```text
    /// reward len train_1..train_len rollout_1..rollout_len new_1..new_len old_1..old_len
    /// ```
    ///
    /// Fields are separated by single spaces and floats use the shortest
    /// representation that parses back to the same bits. Lines starting with
    /// `#` and blank lines are ignored on input.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.responses {
            write!(out, "{} {}", r.reward, r.len()).expect("string write");
            for v in [&r.logp_train, &r.logp_rollout, &r.logp_new, &r.logp_old] {
                for x in v.iter() {
                    write!(out, " {x}").expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut responses = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::from(FormatError::Invalid(format!("line {}: {msg}", lineno + 1)));
            let mut fields = line.split_ascii_whitespace();
            let reward: f64 = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad reward"))?;
            let len: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad length"))?;
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad log-probability"))?;
            if values.len() != 4 * len {
                return Err(bad(&format!("expected {} log-probabilities, found {}", 4 * len, values.len())));
            }
            let mut chunks = values.chunks_exact(len.max(1)).map(<[f64]>::to_vec);
            let mut next = || chunks.next().unwrap_or_default();
            responses.push(Response {
                logp_train: next(),
                logp_rollout: next(),
                logp_new: next(),
                logp_old: next(),
                reward,
            });
        }
        Self::new(responses)
    }
}

/// `Â_i = R_i − (1/(G−1)) Σ_{j≠i} R_j`.
pub fn loo_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidConfig(format!(
            "leave-one-out baseline needs at least 2 rewards, got {g}"
        )));
    }
    let total = numeric::pairwise_sum(rewards);
    let peers = (g - 1) as f64;
    Ok(rewards.iter().map(|&r| r - (total - r) / peers).collect())
}

/// `M(ρ; α, β)`.
#[inline]
pub fn mask_ratio(rho: f64, cfg: &MaskConfig) -> f64 {
    if cfg.alpha < rho && rho < cfg.beta {
        rho
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlLoss {
    pub loss: f64,
    pub advantages: Vec<f64>,
    /// `c_it = M(ρ_it) · r_it · Â_i`, per response and token.
    pub coefficients: Vec<Vec<f64>>,
}

/// Frozen per-token coefficients `c_it`.
pub fn token_coefficients(batch: &RolloutBatch, cfg: &MaskConfig) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    batch.validate()?;
    let advantages = loo_advantage(&batch.rewards())?;
    let mut coefficients = Vec::with_capacity(batch.group_size());
    for (i, (resp, &adv)) in batch.responses.iter().zip(&advantages).enumerate() {
        let mut row = Vec::with_capacity(resp.len());
        for t in 0..resp.len() {
            let rho = (resp.logp_train[t] - resp.logp_rollout[t]).exp();
            let r = (resp.logp_new[t] - resp.logp_old[t]).exp();
            if !rho.is_finite() || !r.is_finite() {
                return Err(Error::NonFiniteRatio { response: i, token: t });
            }
            row.push(mask_ratio(rho, cfg) * r * adv);
        }
        coefficients.push(row);
    }
    Ok((advantages, coefficients))
}

pub fn rl_loss(batch: &RolloutBatch, cfg: &MaskConfig) -> Result<RlLoss> {
    let (advantages, coefficients) = token_coefficients(batch, cfg)?;
    let loss = frozen_loss(&coefficients, batch.responses.iter().map(|r| r.logp_new.as_slice()));
    Ok(RlLoss { loss, advantages, coefficients })
}

/// `−(1/G) Σ_i (1/|y_i|) Σ_t c_it · logp_it` for fixed coefficients.
fn frozen_loss<'a>(coefficients: &[Vec<f64>], logp: impl Iterator<Item = &'a [f64]>) -> f64 {
    let per_response: Vec<f64> = coefficients
        .iter()
        .zip(logp)
        .map(|(c, lp)| {
            let terms: Vec<f64> = c.iter().zip(lp).map(|(c, l)| c * l).collect();
            numeric::pairwise_sum(&terms) / c.len() as f64
        })
        .collect();
    -numeric::pairwise_sum(&per_response) / coefficients.len() as f64
}

/// One response of a toy problem whose "new" policy is an explicit softmax
/// over a small vocabulary at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyResponse {
    pub tokens: Vec<usize>,
    /// Per-position logits of the differentiated policy, each of vocabulary width.
    pub logits: Vec<Vec<f64>>,
    pub logp_train: Vec<f64>,
    pub logp_rollout: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
}

/// Toy policy-gradient problem with analytic `∇ log π`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRlProblem {
    pub vocab: usize,
    pub responses: Vec<ToyResponse>,
}

impl ToyRlProblem {
    /// Random instance. Snapshot logits are the new-policy logits plus Gaussian
    /// jitter of scale `jitter`, so ratios scatter around 1.
    pub fn random(rng: &mut Rng, group_size: usize, max_len: usize, vocab: usize, jitter: f64) -> Self {
        let responses = (0..group_size)
            .map(|_| {
                let len = 1 + rng.below(max_len.max(1));
                let mut resp = ToyResponse {
                    tokens: Vec::with_capacity(len),
                    logits: Vec::with_capacity(len),
                    logp_train: Vec::with_capacity(len),
                    logp_rollout: Vec::with_capacity(len),
                    logp_old: Vec::with_capacity(len),
                    reward: if rng.next_f64() < 0.5 { 1.0 } else { rng.next_f64() },
                };
                for _ in 0..len {
                    let logits = rng.gaussian_vec(vocab);
                    let y = rng.below(vocab);
                    let snapshot = |base: &[f64], rng: &mut Rng| {
                        let jittered: Vec<f64> = base.iter().map(|v| v + jitter * rng.next_gaussian()).collect();
                        numeric::log_softmax(&jittered)[y]
                    };
                    let train_logits: Vec<f64> = logits.iter().map(|v| v + jitter * rng.next_gaussian()).collect();
                    resp.logp_old.push(snapshot(&logits, rng));
                    resp.logp_rollout.push(snapshot(&train_logits, rng));
                    resp.logp_train.push(numeric::log_softmax(&train_logits)[y]);
                    resp.tokens.push(y);
                    resp.logits.push(logits);
                }
                resp
            })
            .collect();
        Self { vocab, responses }
    }

    pub fn param_count(&self) -> usize {
        self.responses.iter().map(|r| r.logits.len() * self.vocab).sum()
    }

    /// Logits flattened in (response, position, vocabulary) order.
    pub fn params(&self) -> Vec<f64> {
        self.responses.iter().flat_map(|r| r.logits.iter().flatten().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a problem with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for resp in &mut self.responses {
            for row in &mut resp.logits {
                for v in row.iter_mut() {
                    *v = it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    /// Offset of `(response, position)` in the flat parameter vector.
    pub fn param_offset(&self, response: usize, position: usize) -> usize {
        let before: usize = self.responses[..response].iter().map(|r| r.logits.len()).sum();
        (before + position) * self.vocab
    }

    /// Current `log π_new(y_it)`.
    pub fn logp_new(&self) -> Vec<Vec<f64>> {
        self.responses
            .iter()
            .map(|r| r.tokens.iter().zip(&r.logits).map(|(&y, z)| numeric::log_softmax(z)[y]).collect())
            .collect()
    }

    pub fn to_batch(&self) -> Result<RolloutBatch> {
        let responses = self
            .responses
            .iter()
            .zip(self.logp_new())
            .map(|(r, logp_new)| Response {
                logp_train: r.logp_train.clone(),
                logp_rollout: r.logp_rollout.clone(),
                logp_new,
                logp_old: r.logp_old.clone(),
                reward: r.reward,
            })
            .collect();
        RolloutBatch::new(responses)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlGradient {
    pub loss: RlLoss,
    /// Gradient w.r.t. [`ToyRlProblem::params`], same layout.
    pub grad: Vec<f64>,
}

/// Analytic gradient of the loss with `c_it` held constant:
/// `−(1/G) Σ_i (1/|y_i|) Σ_t c_it · (e_{y_it} − softmax(θ_it))`.
pub fn rl_loss_grad(problem: &ToyRlProblem, cfg: &MaskConfig) -> Result<RlGradient> {
    let batch = problem.to_batch()?;
    let loss = rl_loss(&batch, cfg)?;
    let g = problem.responses.len() as f64;
    let mut grad = Vec::with_capacity(problem.param_count());
    for (resp, coeffs) in problem.responses.iter().zip(&loss.coefficients) {
        let scale = -1.0 / (g * resp.tokens.len() as f64);
        for ((&y, logits), &c) in resp.tokens.iter().zip(&resp.logits).zip(coeffs) {
            let p = numeric::softmax(logits, 1.0);
            grad.extend(p.iter().enumerate().map(|(v, &pv)| {
                let indicator = if v == y { 1.0 } else { 0.0 };
                scale * c * (indicator - pv)
            }));
        }
    }
    Ok(RlGradient { loss, grad })
}

/// Sampled train/rollout divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineKl {
    /// Mean of `per_token`.
    pub k1_estimate: f64,
    /// `logp_train − logp_rollout` per token.
    pub per_token: Vec<f64>,
}

/// k1 estimator from aligned per-token log-probabilities.
///
/// For tokens drawn from the train distribution the estimate is unbiased for
/// `KL(train ‖ rollout)`; for tokens drawn from the rollout engine its
/// expectation is `−KL(rollout ‖ train)`.
pub fn engine_kl(logp_train: &[f64], logp_rollout: &[f64]) -> Result<EngineKl> {
    if logp_train.len() != logp_rollout.len() {
        return Err(Error::Shape(format!(
            "{} train vs {} rollout log-probabilities",
            logp_train.len(),
            logp_rollout.len()
        )));
    }
    let per_token: Vec<f64> = logp_train.iter().zip(logp_rollout).map(|(a, b)| a - b).collect();
    let k1_estimate = if per_token.is_empty() {
        0.0
    } else {
        numeric::pairwise_sum(&per_token) / per_token.len() as f64
    };
    Ok(EngineKl { k1_estimate, per_token })
}

/// Exact expectation of the k1 estimator at one position, `KL(train ‖ rollout)`,
/// from the two engines' logits over the full vocabulary.
pub fn expected_engine_kl(train_logits: &[f64], rollout_logits: &[f64]) -> Result<f64> {
    if train_logits.len() != rollout_logits.len() {
        return Err(Error::Shape("logit vectors of different width".into()));
    }
    let lp = numeric::log_softmax(train_logits);
    let lq = numeric::log_softmax(rollout_logits);
    let terms: Vec<f64> = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).collect();
    Ok(numeric::pairwise_sum(&terms).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identical_batch(rewards: &[f64], lens: &[usize], rng: &mut Rng) -> RolloutBatch {
        let responses = rewards
            .iter()
            .zip(lens)
            .map(|(&reward, &len)| {
                let lp: Vec<f64> = (0..len).map(|_| -rng.uniform_range(0.01, 5.0)).collect();
                Response { logp_train: lp.clone(), logp_rollout: lp.clone(), logp_new: lp.clone(), logp_old: lp, reward }
            })
            .collect();
        RolloutBatch::new(responses).unwrap()
    }

    #[test]
    fn loo_examples() {
        assert_eq!(loo_advantage(&[0.7; 5]).unwrap(), vec![0.0; 5]);
        let a = loo_advantage(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        for (x, y) in a.iter().zip([2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(loo_advantage(&[1.0]).is_err());
    }

    #[test]
    fn mask_examples() {
        let cfg = MaskConfig::new(0.5, 2.0).unwrap();
        assert_eq!(mask_ratio(1.0, &cfg), 1.0);
        assert_eq!(mask_ratio(5.0, &cfg), 0.0);
        assert_eq!(mask_ratio(2.0, &cfg), 0.0);
        assert_eq!(mask_ratio(0.5, &cfg), 0.0);
        assert!(MaskConfig::new(2.0, 0.5).is_err());
        assert!(MaskConfig::new(0.0, 0.5).is_err());
    }

    #[test]
    fn fully_masked_batch_has_zero_loss() {
        let mut rng = Rng::new(4);
        let mut batch = identical_batch(&[1.0, 0.0, 0.5], &[3, 2, 4], &mut rng);
        for r in &mut batch.responses {
            for lp in &mut r.logp_rollout {
                *lp -= 3.0; // rho = e^3 > beta
            }
        }
        let out = rl_loss(&batch, &MaskConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.coefficients.iter().flatten().all(|&c| c == 0.0));
    }

    #[test]
    fn unit_ratio_reduces_to_reinforce() {
        let mut rng = Rng::new(5);
        let batch = identical_batch(&[1.0, 0.0, 0.25, 1.0], &[3, 5, 1, 2], &mut rng);
        let out = rl_loss(&batch, &MaskConfig::default()).unwrap();
        let adv = loo_advantage(&batch.rewards()).unwrap();
        let vanilla = -batch
            .responses
            .iter()
            .zip(&adv)
            .map(|(r, a)| a * r.logp_new.iter().sum::<f64>() / r.len() as f64)
            .sum::<f64>()
            / 4.0;
        assert!((out.loss - vanilla).abs() <= 1e-12);
    }

    #[test]
    fn non_finite_ratio_is_located() {
        let mut rng = Rng::new(6);
        let mut batch = identical_batch(&[1.0, 0.0], &[2, 3], &mut rng);
        batch.responses[1].logp_rollout[2] = f64::NEG_INFINITY;
        let err = rl_loss(&batch, &MaskConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteRatio { response: 1, token: 2 }));
    }

    #[test]
    fn batch_validation() {
        let mut rng = Rng::new(7);
        let batch = identical_batch(&[1.0, 0.0], &[2, 2], &mut rng);
        let mut one = batch.clone();
        one.responses.truncate(1);
        assert!(one.validate().is_err());
        let mut positive = batch.clone();
        positive.responses[0].logp_new[0] = 0.1;
        assert!(positive.validate().is_err());
        let mut ragged = batch;
        ragged.responses[0].logp_old.pop();
        assert!(ragged.validate().is_err());
    }

    #[test]
    fn line_format_round_trip() {
        let mut rng = Rng::new(8);
        let batch = ToyRlProblem::random(&mut rng, 3, 4, 5, 0.1).to_batch().unwrap();
        let text = batch.to_lines();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(RolloutBatch::from_lines(&format!("# header\n\n{text}")).unwrap(), batch);
        assert!(RolloutBatch::from_lines("1 2 -0.1 -0.2\n0 1 -1 -1 -1 -1\n").is_err());
    }

    #[test]
    fn engine_kl_examples() {
        let lp = [-0.5, -1.0, -2.0];
        let out = engine_kl(&lp, &lp).unwrap();
        assert_eq!(out.k1_estimate, 0.0);
        assert!(out.per_token.iter().all(|&v| v == 0.0));
        let shifted: Vec<f64> = lp.iter().map(|v| v - 0.25).collect();
        let out = engine_kl(&lp, &shifted).unwrap();
        assert!((out.k1_estimate - 0.25).abs() < 1e-15);
        assert!(engine_kl(&lp, &lp[..2]).is_err());
    }

    #[test]
    fn expected_kl_zero_for_identical() {
        assert_eq!(expected_engine_kl(&[0.1, 2.0, -1.0], &[0.1, 2.0, -1.0]).unwrap(), 0.0);
        // Shifting all logits leaves the distribution unchanged.
        let kl = expected_engine_kl(&[0.1, 2.0, -1.0], &[5.1, 7.0, 4.0]).unwrap();
        assert!(kl < 1e-15);
    }
}
