//! Command-line front end.
//!
//! Exit codes: `0` success, `1` module error, `2` usage error, `3` a
//! verification ran but exceeded its tolerance, `4` I/O failure.
//!
//! `--config PATH` reads `key = value` lines (`#` starts a comment) and treats
//! each as `--key value` placed before the command-line flags, so explicit
//! flags win.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::LayerCheckpoint;
use crate::epsim::BALANCE_CSV_HEADER;
use crate::error::Error;
use crate::expansion::{self, ExpansionStrategy};
use crate::experiments::{self, ToyShape};
use crate::numeric::{Matrix, Rng};
use crate::precision::{PrecisionPolicy, PRECISION_CSV_HEADER};
use crate::replay::RoutingTrace;
use crate::rlloss::{self, MaskConfig, RolloutBatch};
use crate::routing::{ExpertBank, MoeLayerSpec, RoutingMode};
use crate::signal::{self, PATCH_CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MODULE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Straight-through backward vs finite differences.
pub const STE_GRAD_TOL: f64 = 1e-6;
/// Straight-through forward value vs renormalized gates.
pub const STE_FORWARD_TOL: f64 = 1e-12;
pub const RL_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "MoE routing, balance, RL-loss and precision experiments")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expert-parallel dispatch: per-device load under plain vs grouped routing.
    BalanceSim(BalanceArgs),
    /// Straight-through router backward against finite differences.
    GradcheckSte(SteArgs),
    /// Masked dual-ratio policy-gradient loss against finite differences.
    GradcheckRl(RlArgs),
    /// Expand a layer's experts r-fold and write the new checkpoint.
    Expand(ExpandArgs),
    /// Train/rollout divergence under mixed-precision policies.
    PrecisionSweep(PrecisionArgs),
    /// Record routing traces and verify forced replay under router perturbation.
    ReplayVerify(ReplayArgs),
    /// Adaptive patch size and frame count for a time series.
    PlanPatches(PatchArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct BalanceArgs {
    #[command(flatten)]
    run: RunConfig,
    /// grouped, plain-topk, or both.
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long, default_value_t = 8)]
    devices: usize,
    #[arg(long, default_value_t = 64)]
    experts: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Defaults to one group per device.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    /// Batches to simulate; trial i uses seed + i.
    #[arg(long, default_value_t = 1)]
    trials: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SteArgs {
    #[command(flatten)]
    run: RunConfig,
    /// Number of experts.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Temperatures to cycle through (repeatable). Default 0.5, 1, 2.
    #[arg(long)]
    tau: Vec<f64>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct RlArgs {
    #[command(flatten)]
    run: RunConfig,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 4)]
    group_size: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value_t = 5)]
    vocab: usize,
    /// Lower mask bound. Demo default, not a tuned value.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Upper mask bound. Demo default, not a tuned value.
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Evaluate the loss of a line-delimited rollout batch instead of gradchecking.
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Also write one random rollout batch in line-delimited form.
    #[arg(long)]
    dump_batch: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ExpandArgs {
    #[command(flatten)]
    run: RunConfig,
    /// Layer checkpoint to expand; a random layer is synthesized when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to write the expanded checkpoint.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    /// grouped_top or differentiated.
    #[arg(long, default_value = "grouped_top")]
    strategy: String,
    /// Router-row noise relative to the row norm.
    #[arg(long, default_value_t = expansion::DEFAULT_ROUTER_NOISE)]
    epsilon: f64,
    /// Top-K used to gather calibration statistics.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 1024)]
    calib_tokens: usize,
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct PrecisionArgs {
    #[command(flatten)]
    run: RunConfig,
    #[arg(long, default_value_t = 200)]
    trials: u64,
    /// Comma-separated rollout policies: mixed, bf16-head, all-bf16, fp32.
    #[arg(long, default_value = "mixed,bf16-head,all-bf16")]
    policies: String,
    /// Policy standing in for the training engine.
    #[arg(long, default_value = "fp32")]
    train_policy: String,
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ReplayArgs {
    #[command(flatten)]
    run: RunConfig,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    experts: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value = "grouped")]
    mode: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Largest perturbation norm as a multiple of the router norm.
    #[arg(long, default_value_t = 10.0)]
    perturb: f64,
    /// Write the recorded trace here.
    #[arg(long)]
    record_trace: Option<PathBuf>,
    /// Replay this trace instead of recording one.
    #[arg(long)]
    replay_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct PatchArgs {
    #[command(flatten)]
    run: RunConfig,
    /// Signal length in samples.
    #[arg(long)]
    len: usize,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value_t = 1)]
    fmin: usize,
    #[arg(long, default_value_t = 4096)]
    fmax: usize,
}

#[derive(Debug)]
enum Failure {
    Module(Error),
    Check(String),
    Io(io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(crate::FormatError::Io(io)) => Failure::Io(io),
            other => Failure::Module(other),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

/// Runs the CLI on `argv` (including the program name), writing results to
/// `stdout` unless `--out` is given and diagnostics to `stderr`.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Module(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_MODULE
        }
        Err(Failure::Check(msg)) => {
            let _ = writeln!(stderr, "verification failed: {msg}");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Io(e)) => {
            let _ = writeln!(stderr, "I/O error: {e}");
            EXIT_IO
        }
    }
}

/// Splices `--config` entries in after the subcommand name.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--config" {
            config = Some(it.next().ok_or("--config needs a path")?);
        } else if let Some(path) = arg.strip_prefix("--config=") {
            config = Some(path.to_string());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected `key = value`", n + 1))?;
        injected.push(format!("--{}", key.trim().replace('_', "-")));
        injected.push(value.trim().to_string());
    }
    let at = rest.iter().skip(1).position(|a| !a.starts_with('-')).map_or(rest.len(), |p| p + 2);
    rest.splice(at.min(rest.len())..at.min(rest.len()), injected);
    Ok(rest)
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::BalanceSim(a) => balance_sim(a, stdout),
        Command::GradcheckSte(a) => gradcheck_ste(a, stdout),
        Command::GradcheckRl(a) => gradcheck_rl(a, stdout),
        Command::Expand(a) => expand(a, stdout),
        Command::PrecisionSweep(a) => precision_sweep(a, stdout),
        Command::ReplayVerify(a) => replay_verify(a, stdout),
        Command::PlanPatches(a) => plan_patches(a, stdout),
    }
}

/// Buffers CSV and writes it to `--out` or stdout once the command succeeds.
fn emit(run: &RunConfig, csv: &[u8], stdout: &mut dyn Write) -> Result<(), Failure> {
    match &run.out {
        Some(path) => fs::write(path, csv)?,
        None => stdout.write_all(csv)?,
    }
    Ok(())
}

fn balance_sim(a: BalanceArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let modes = match a.mode.as_str() {
        "both" => vec![RoutingMode::PlainTopK, RoutingMode::Grouped],
        m => vec![m.parse::<RoutingMode>()?],
    };
    let spec = MoeLayerSpec::new(a.experts, a.k, a.groups.unwrap_or(a.devices), a.dim, 1, 1.0)?;
    let mut csv = Vec::new();
    writeln!(csv, "{BALANCE_CSV_HEADER}")?;
    for mode in modes {
        for trial in 0..a.trials {
            let seed = a.run.seed.wrapping_add(trial);
            experiments::balance_trial(seed, &spec, a.devices, a.tokens, mode)?.write_csv(&mut csv)?;
        }
    }
    emit(&a.run, &csv, stdout)
}

fn gradcheck_ste(a: SteArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let taus = if a.tau.is_empty() { vec![0.5, 1.0, 2.0] } else { a.tau };
    let r = experiments::ste_gradcheck(a.n, a.trials, a.run.seed, &taus)?;
    let mut csv = Vec::new();
    writeln!(csv, "trials,max_rel_err,max_forward_err,unselected_nonzero")?;
    writeln!(csv, "{},{},{},{}", r.trials, r.max_rel_err, r.max_forward_err, r.unselected_nonzero)?;
    emit(&a.run, &csv, stdout)?;
    if r.max_rel_err > STE_GRAD_TOL || r.max_forward_err > STE_FORWARD_TOL {
        return Err(Failure::Check(format!(
            "max relative error {:e} (tol {STE_GRAD_TOL:e}), forward gap {:e} (tol {STE_FORWARD_TOL:e})",
            r.max_rel_err, r.max_forward_err
        )));
    }
    Ok(())
}

fn gradcheck_rl(a: RlArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let cfg = MaskConfig::new(a.alpha, a.beta)?;
    let mut csv = Vec::new();
    if let Some(path) = &a.batch {
        let batch = RolloutBatch::from_lines(&fs::read_to_string(path)?)?;
        let out = rlloss::rl_loss(&batch, &cfg)?;
        writeln!(csv, "responses,tokens,loss")?;
        let tokens: usize = batch.responses.iter().map(|r| r.len()).sum();
        writeln!(csv, "{},{},{}", batch.group_size(), tokens, out.loss)?;
        return emit(&a.run, &csv, stdout);
    }
    if let Some(path) = &a.dump_batch {
        let mut rng = Rng::new(a.run.seed);
        let problem = rlloss::ToyRlProblem::random(&mut rng, a.group_size, a.max_len, a.vocab, 0.5);
        fs::write(path, problem.to_batch()?.to_lines())?;
    }
    let r = experiments::rl_gradcheck(a.trials, a.run.seed, a.group_size, a.max_len, a.vocab, &cfg)?;
    writeln!(csv, "trials,max_rel_err,masked_tokens,max_masked_grad,max_masked_loss_change")?;
    writeln!(
        csv,
        "{},{},{},{},{}",
        r.trials, r.max_rel_err, r.masked_tokens, r.max_masked_grad, r.max_masked_loss_change
    )?;
    emit(&a.run, &csv, stdout)?;
    if r.max_rel_err > RL_GRAD_TOL || r.max_masked_grad != 0.0 {
        return Err(Failure::Check(format!(
            "max relative error {:e} (tol {RL_GRAD_TOL:e}), masked gradient {:e}",
            r.max_rel_err, r.max_masked_grad
        )));
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<LayerCheckpoint, Failure> {
    let file = fs::File::open(path)?;
    Ok(LayerCheckpoint::read_from(io::BufReader::new(file))?)
}

fn expand(a: ExpandArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let strategy: ExpansionStrategy = a.strategy.parse()?;
    let mut rng = Rng::new(a.run.seed);
    let layer = match &a.input {
        Some(path) => read_checkpoint(path)?,
        None => LayerCheckpoint {
            router: Matrix::gaussian(a.experts, a.dim, 1.0, &mut rng),
            bank: ExpertBank::random(a.experts, a.dim, a.hidden, &mut rng),
        },
    };
    let calib = Matrix::gaussian(a.calib_tokens, layer.router.cols(), 1.0, &mut rng);
    let stats = expansion::activation_stats(&calib, &layer.router, a.k)?;
    let plan = expansion::plan_expansion(&stats, a.factor, a.groups, strategy)?;
    let (bank, router) = expansion::expand_layer(&layer.bank, &layer.router, &plan, a.epsilon, &mut rng)?;
    let expanded = LayerCheckpoint { router, bank };
    fs::write(&a.output, expanded.to_bytes()?)?;

    let mut csv = Vec::new();
    writeln!(csv, "new_expert,group,source,source_rank1_count")?;
    for (e, &src) in plan.mapping.iter().enumerate() {
        writeln!(csv, "{e},{},{src},{}", e / plan.group_size(), stats.rank1[src])?;
    }
    emit(&a.run, &csv, stdout)
}

fn parse_policy(tag: &str) -> Result<PrecisionPolicy, Failure> {
    Ok(tag.trim().parse::<PrecisionPolicy>()?)
}

fn precision_sweep(a: PrecisionArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let train = parse_policy(&a.train_policy)?;
    let rollouts = a.policies.split(',').map(parse_policy).collect::<Result<Vec<_>, _>>()?;
    let shape = ToyShape {
        num_experts: a.experts,
        active_k: a.k,
        model_dim: a.dim,
        hidden_dim: a.hidden,
        vocab: a.vocab,
        tokens: a.tokens,
    };
    let mut csv = Vec::new();
    writeln!(csv, "{PRECISION_CSV_HEADER}")?;
    for trial in 0..a.trials {
        for row in experiments::precision_trial(a.run.seed.wrapping_add(trial), &shape, &train, &rollouts)? {
            row.write_csv(&mut csv)?;
        }
    }
    emit(&a.run, &csv, stdout)
}

fn replay_verify(a: ReplayArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let mode: RoutingMode = a.mode.parse()?;
    let spec = MoeLayerSpec::new(a.experts, a.k, a.groups, a.dim, 1, 1.0)?;
    let layers = experiments::replay_layers(a.run.seed, a.layers, &spec);
    let batch = Matrix::gaussian(a.tokens, a.dim, 1.0, &mut Rng::new(a.run.seed).fork(1));
    let trace = match &a.replay_trace {
        Some(path) => RoutingTrace::read_from(io::BufReader::new(fs::File::open(path)?))?,
        None => crate::replay::record_trace(&batch, &layers, mode)?,
    };
    if let Some(path) = &a.record_trace {
        fs::write(path, trace.to_bytes()?)?;
    }
    let r = experiments::replay_check(&trace, &batch, &layers, mode, a.trials, a.perturb, a.run.seed.wrapping_add(1))?;
    let mut csv = Vec::new();
    writeln!(csv, "trials,entries_per_trial,mismatches,live_disagreements,trace_bytes")?;
    writeln!(
        csv,
        "{},{},{},{},{}",
        r.trials,
        r.entries_per_trial,
        r.mismatches,
        r.live_disagreements,
        trace.serialized_len()
    )?;
    emit(&a.run, &csv, stdout)?;
    if r.mismatches > 0 {
        return Err(Failure::Check(format!("{} replayed selections differ from the trace", r.mismatches)));
    }
    Ok(())
}

fn plan_patches(a: PatchArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let plan = signal::plan_patches(a.len, a.rate, a.fmin, a.fmax)?;
    let mut csv = Vec::new();
    writeln!(csv, "{PATCH_CSV_HEADER}")?;
    writeln!(csv, "{},{},{},{},{}", plan.len, a.rate, plan.patch_size, plan.stride, plan.n_frames)?;
    emit(&a.run, &csv, stdout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_lines_are_spliced_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# demo\ntokens = 100\nmode=grouped # inline\n").unwrap();
        let out = expand_config(args(&["moelab", "balance-sim", "--config", path.to_str().unwrap(), "--seed", "3"])).unwrap();
        assert_eq!(out, args(&["moelab", "balance-sim", "--tokens", "100", "--mode", "grouped", "--seed", "3"]));
    }

    #[test]
    fn config_without_equals_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "tokens 100\n").unwrap();
        assert!(expand_config(args(&["moelab", "balance-sim", "--config", path.to_str().unwrap()])).is_err());
    }
}
