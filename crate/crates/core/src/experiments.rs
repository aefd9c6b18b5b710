//! Seeded end-to-end workflows shared by the CLI and the runnable examples.
//!
//! Every function derives all randomness from its `seed`, so identical
//! arguments give bit-identical results.

use crate::epsim::{self, BalanceRow};
use crate::error::{Error, Result};
use crate::numeric::{self, Matrix, Rng};
use crate::precision::{PrecisionPolicy, PrecisionRow, ToyModel};
use crate::replay::{self, RouterLayer, RoutingTrace};
use crate::rlloss::{self, MaskConfig, ToyRlProblem};
use crate::routing::{self, ExpertBank, MoeLayerSpec, RoutingMode};

/// Random router and token batch for one balance trial.
pub fn balance_batch(seed: u64, spec: &MoeLayerSpec, tokens: usize) -> (Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let w_r = Matrix::gaussian(spec.num_experts, spec.model_dim, 1.0, &mut rng);
    let batch = Matrix::gaussian(tokens, spec.model_dim, 1.0, &mut rng);
    (w_r, batch)
}

pub fn balance_trial(
    seed: u64,
    spec: &MoeLayerSpec,
    devices: usize,
    tokens: usize,
    mode: RoutingMode,
) -> Result<BalanceRow> {
    let (w_r, batch) = balance_batch(seed, spec, tokens);
    let report = epsim::dispatch(&batch, &w_r, spec, devices, mode)?;
    Ok(BalanceRow {
        mode,
        tokens,
        seed,
        metrics: epsim::balance_metrics(&report),
        balance_loss: epsim::balance_loss(&batch, &w_r, spec, mode)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteGradcheck {
    pub trials: usize,
    /// Worst normwise relative error of the analytic backward against finite differences.
    pub max_rel_err: f64,
    /// Worst gap between the straight-through forward value and renormalized top-K gates.
    pub max_forward_err: f64,
    /// Trials in which some unselected expert got a nonzero gradient.
    pub unselected_nonzero: usize,
}

pub const STE_FD_STEP: f64 = 1e-5;

/// Random `(z, S, τ, upstream)` instances with `N = num_experts` and
/// `1 <= K < N`, temperatures cycling through `taus`.
pub fn ste_gradcheck(num_experts: usize, trials: usize, seed: u64, taus: &[f64]) -> Result<SteGradcheck> {
    if num_experts < 2 || taus.is_empty() {
        return Err(Error::InvalidConfig("gradcheck needs N >= 2 and at least one temperature".into()));
    }
    let mut rng = Rng::new(seed);
    let mut out = SteGradcheck { trials, max_rel_err: 0.0, max_forward_err: 0.0, unselected_nonzero: 0 };
    for trial in 0..trials {
        let tau = taus[trial % taus.len()];
        let k = 1 + rng.below(num_experts - 1);
        let z: Vec<f64> = (0..num_experts).map(|_| 2.0 * rng.next_gaussian()).collect();
        let selected = routing::topk_select(&numeric::softmax(&z, 1.0), k)?;
        let upstream = rng.gaussian_vec(k);

        let analytic = routing::ste_backward(&upstream, &z, &selected, tau)?;
        let surrogate = |zz: &[f64]| {
            let p = numeric::softmax(zz, tau);
            selected.iter().zip(&upstream).map(|(&i, u)| u * p[i]).sum::<f64>()
        };
        let fd = numeric::finite_diff_grad(surrogate, &z, STE_FD_STEP)?;
        out.max_rel_err = out.max_rel_err.max(numeric::relative_error(&analytic, &fd));

        let forward = routing::ste_gate_value(&z, &selected, tau)?;
        let reference = routing::gate_weights(&numeric::softmax(&z, 1.0), &selected)?;
        let gap = forward.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.max_forward_err = out.max_forward_err.max(gap);

        if (0..num_experts).any(|j| selected.binary_search(&j).is_err() && analytic[j] != 0.0) {
            out.unselected_nonzero += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlGradcheck {
    pub trials: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient entry belonging to a masked token.
    pub max_masked_grad: f64,
    /// Largest loss change when perturbing masked tokens' logits.
    pub max_masked_loss_change: f64,
    pub masked_tokens: usize,
}

pub const RL_FD_STEP: f64 = 1e-5;

/// The objective with coefficients frozen, evaluated straight from its definition.
pub fn frozen_rl_objective(problem: &ToyRlProblem, coefficients: &[Vec<f64>], params: &[f64]) -> f64 {
    let mut p = problem.clone();
    p.set_params(params).expect("parameter count");
    let g = p.responses.len() as f64;
    let mut total = 0.0;
    for (resp, coeffs) in p.responses.iter().zip(coefficients) {
        let mut sum = 0.0;
        for ((&y, logits), c) in resp.tokens.iter().zip(&resp.logits).zip(coeffs) {
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            sum += c * (logits[y] - lse);
        }
        total += sum / resp.tokens.len() as f64;
    }
    -total / g
}

pub fn rl_gradcheck(
    trials: usize,
    seed: u64,
    group_size: usize,
    max_len: usize,
    vocab: usize,
    cfg: &MaskConfig,
) -> Result<RlGradcheck> {
    let mut rng = Rng::new(seed);
    let mut out = RlGradcheck {
        trials,
        max_rel_err: 0.0,
        max_masked_grad: 0.0,
        max_masked_loss_change: 0.0,
        masked_tokens: 0,
    };
    for _ in 0..trials {
        let problem = ToyRlProblem::random(&mut rng, group_size, max_len, vocab, 0.5);
        let analytic = rlloss::rl_loss_grad(&problem, cfg)?;
        let coeffs = &analytic.loss.coefficients;
        let theta = problem.params();
        let fd = numeric::finite_diff_grad(|p| frozen_rl_objective(&problem, coeffs, p), &theta, RL_FD_STEP)?;
        out.max_rel_err = out.max_rel_err.max(numeric::relative_error(&analytic.grad, &fd));

        let base = frozen_rl_objective(&problem, coeffs, &theta);
        for (i, resp) in problem.responses.iter().enumerate() {
            for t in 0..resp.tokens.len() {
                let rho = (resp.logp_train[t] - resp.logp_rollout[t]).exp();
                if rlloss::mask_ratio(rho, cfg) != 0.0 {
                    continue;
                }
                out.masked_tokens += 1;
                let off = problem.param_offset(i, t);
                let slot = &analytic.grad[off..off + vocab];
                out.max_masked_grad = out.max_masked_grad.max(numeric::max_abs(slot));
                let mut perturbed = theta.clone();
                for v in &mut perturbed[off..off + vocab] {
                    *v += rng.uniform_range(-3.0, 3.0);
                }
                let changed = frozen_rl_objective(&problem, coeffs, &perturbed);
                out.max_masked_loss_change = out.max_masked_loss_change.max((changed - base).abs());
            }
        }
    }
    Ok(out)
}

/// Shape of the toy model used by the precision sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyShape {
    pub num_experts: usize,
    pub active_k: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub vocab: usize,
    pub tokens: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self { num_experts: 8, active_k: 2, model_dim: 16, hidden_dim: 32, vocab: 64, tokens: 16 }
    }
}

pub fn toy_model(shape: &ToyShape, rng: &mut Rng) -> Result<ToyModel> {
    let spec = MoeLayerSpec::new(shape.num_experts, shape.active_k, 1, shape.model_dim, shape.hidden_dim, 1.0)?;
    Ok(ToyModel {
        spec,
        mode: RoutingMode::PlainTopK,
        router: Matrix::gaussian(shape.num_experts, shape.model_dim, 1.0, rng),
        bank: ExpertBank::random(shape.num_experts, shape.model_dim, shape.hidden_dim, rng),
        head: Matrix::gaussian(shape.vocab, shape.model_dim, 1.0, rng),
    })
}

/// Compares `rollout` policies against a `train` policy on one seeded toy model.
///
/// `kl_k1` is the mean over tokens of the exact expectation of the k1
/// estimator, `KL(train ‖ rollout)` per position.
pub fn precision_trial(
    seed: u64,
    shape: &ToyShape,
    train: &PrecisionPolicy,
    rollouts: &[PrecisionPolicy],
) -> Result<Vec<PrecisionRow>> {
    let mut rng = Rng::new(seed);
    let model = toy_model(shape, &mut rng)?;
    let tokens = Matrix::gaussian(shape.tokens, shape.model_dim, 1.0, &mut rng);
    let train_model = model.quantized(train)?;
    let train_logits: Vec<Vec<f64>> =
        (0..tokens.rows()).map(|t| train_model.logits(tokens.row(t))).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(rollouts.len());
    for policy in rollouts {
        let q = model.quantized(policy)?;
        let mut kls = Vec::with_capacity(tokens.rows());
        let mut max_diff = 0.0_f64;
        for (t, reference) in train_logits.iter().enumerate() {
            let logits = q.logits(tokens.row(t))?;
            kls.push(rlloss::expected_engine_kl(reference, &logits)?);
            for (a, b) in reference.iter().zip(&logits) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        rows.push(PrecisionRow {
            policy: policy.tag().to_string(),
            seed,
            kl_k1: numeric::pairwise_sum(&kls) / kls.len() as f64,
            max_abs_logit_diff: max_diff,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub trials: usize,
    /// (trial, token, layer) entries whose replayed set differed from the trace.
    pub mismatches: usize,
    /// Entries where live routing under the perturbed router disagreed with the trace.
    pub live_disagreements: usize,
    pub entries_per_trial: usize,
}

/// Router stack for replay experiments.
pub fn replay_layers(seed: u64, num_layers: usize, spec: &MoeLayerSpec) -> Vec<RouterLayer> {
    let mut rng = Rng::new(seed);
    (0..num_layers)
        .map(|_| RouterLayer { router: Matrix::gaussian(spec.num_experts, spec.model_dim, 1.0, &mut rng), spec: *spec })
        .collect()
}

/// Replays `trace` under `trials` random router perturbations whose Frobenius
/// norm is up to `max_scale` times the router's.
pub fn replay_check(
    trace: &RoutingTrace,
    batch: &Matrix,
    layers: &[RouterLayer],
    mode: RoutingMode,
    trials: usize,
    max_scale: f64,
    seed: u64,
) -> Result<ReplayCheck> {
    if batch.rows() != trace.num_tokens() || layers.len() != trace.num_layers() {
        return Err(Error::Shape("trace does not match batch/layers".into()));
    }
    let mut rng = Rng::new(seed);
    let mut out = ReplayCheck {
        trials,
        mismatches: 0,
        live_disagreements: 0,
        entries_per_trial: trace.num_tokens() * trace.num_layers(),
    };
    for _ in 0..trials {
        let scale = rng.uniform_range(0.0, max_scale);
        let perturbed: Vec<Matrix> = layers
            .iter()
            .map(|l| {
                let norm = numeric::dot(l.router.data(), l.router.data()).sqrt();
                let noise = Matrix::gaussian(l.router.rows(), l.router.cols(), 1.0, &mut rng);
                let noise_norm = numeric::dot(noise.data(), noise.data()).sqrt();
                let k = scale * norm / noise_norm;
                let data = l.router.data().iter().zip(noise.data()).map(|(w, n)| w + k * n).collect();
                l.router.with_data(data)
            })
            .collect::<Result<_>>()?;
        for t in 0..batch.rows() {
            for (l, (layer, router)) in layers.iter().zip(&perturbed).enumerate() {
                let logits = router.matvec(batch.row(t))?;
                let replayed = replay::replay_select(trace, t, l, &logits)?;
                let recorded: Vec<usize> = trace.entry(t, l)?.iter().map(|&e| e as usize).collect();
                if replayed.selected != recorded {
                    out.mismatches += 1;
                }
                let live = routing::decide(logits, &layer.spec, mode)?;
                if live.selected != recorded {
                    out.live_disagreements += 1;
                }
            }
        }
    }
    Ok(out)
}
