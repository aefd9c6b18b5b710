use std::fs;
use std::process::Command;

use moelab::checkpoint::LayerCheckpoint;
use moelab::cli;
use moelab::replay::RoutingTrace;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("moelab").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn grouped_balance_row_is_flat() {
    let (code, out, _) = run(&["balance-sim", "--mode", "grouped", "--devices", "8", "--k", "8", "--tokens", "100", "--seed", "1"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("mode,T,seed,max_over_mean,cv,balance_loss\n"));
    assert_eq!(column(&out, "max_over_mean"), vec!["1"]);
}

#[test]
fn ste_gradcheck_passes() {
    let (code, out, err) = run(&["gradcheck-ste", "--n", "8", "--trials", "100", "--seed", "7"]);
    assert_eq!(code, 0, "{err}");
    let rel: f64 = column(&out, "max_rel_err")[0].parse().unwrap();
    assert!(rel <= 1e-6);
}

#[test]
fn million_sample_patch_plan() {
    let (code, out, _) = run(&["plan-patches", "--len", "1000000", "--rate", "100", "--fmax", "4096"]);
    assert_eq!(code, 0);
    let frames: usize = column(&out, "n_frames")[0].parse().unwrap();
    assert!(frames <= 4096);
}

#[test]
fn identical_arguments_give_identical_bytes() {
    for args in [
        &["balance-sim", "--trials", "5", "--seed", "3"][..],
        &["gradcheck-rl", "--trials", "5", "--seed", "3"],
        &["precision-sweep", "--trials", "5", "--seed", "3"],
        &["replay-verify", "--trials", "3", "--tokens", "16", "--seed", "3"],
    ] {
        let a = run(args);
        let b = run(args);
        assert_eq!(a.0, 0, "{args:?}: {}", a.2);
        assert_eq!(a.1.as_bytes(), b.1.as_bytes(), "{args:?}");
    }
    let (_, a, _) = run(&["balance-sim", "--trials", "2", "--seed", "3"]);
    let (_, b, _) = run(&["balance-sim", "--trials", "2", "--seed", "4"]);
    assert_ne!(a, b);
}

#[test]
fn exit_codes_by_failure_class() {
    assert_eq!(run(&["balance-sim", "--no-such-flag"]).0, cli::EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]).0, cli::EXIT_USAGE);
    // K not divisible by G is a module-level configuration error.
    let (code, _, err) = run(&["balance-sim", "--mode", "grouped", "--k", "6", "--groups", "4", "--devices", "4"]);
    assert_eq!(code, cli::EXIT_MODULE);
    assert!(err.starts_with("error:"));
    let (code, _, _) = run(&["replay-verify", "--replay-trace", "/nonexistent/trace.bin"]);
    assert_eq!(code, cli::EXIT_IO);
    assert_eq!(run(&["--help"]).0, cli::EXIT_OK);
}

#[test]
fn binary_reports_the_same_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_moelab");
    let ok = Command::new(bin).args(["plan-patches", "--len", "50"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("len,rate,patch_size,stride,n_frames"));
    let bad = Command::new(bin).args(["plan-patches", "--bogus"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# patch planning\nlen = 1000000\nrate = 100\nfmax = 1024\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let (code, from_file, err) = run(&["plan-patches", "--config", cfg]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(column(&from_file, "patch_size"), vec!["977"]);

    let (code, overridden, _) = run(&["plan-patches", "--config", cfg, "--fmax", "4096"]);
    assert_eq!(code, 0);
    assert_eq!(column(&overridden, "patch_size"), vec!["245"]);
}

#[test]
fn out_flag_writes_the_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("balance.csv");
    let (code, stdout, _) = run(&["balance-sim", "--trials", "2", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    let (_, direct, _) = run(&["balance-sim", "--trials", "2"]);
    assert_eq!(fs::read_to_string(&path).unwrap(), direct);
}

#[test]
fn expand_writes_a_checkpoint_that_can_be_expanded_again() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("x4.moel");
    let second = dir.path().join("x8.moel");
    let (code, _, err) = run(&["expand", "--output", first.to_str().unwrap(), "--experts", "4", "--groups", "4", "--factor", "4"]);
    assert_eq!(code, 0, "{err}");
    let layer = LayerCheckpoint::read_from(fs::File::open(&first).unwrap()).unwrap();
    assert_eq!(layer.bank.len(), 16);
    assert_eq!(layer.router.rows(), 16);

    let (code, _, err) = run(&[
        "expand", "--input", first.to_str().unwrap(), "--output", second.to_str().unwrap(),
        "--factor", "2", "--groups", "8", "--epsilon", "0",
    ]);
    assert_eq!(code, 0, "{err}");
    let bigger = LayerCheckpoint::read_from(fs::File::open(&second).unwrap()).unwrap();
    assert_eq!(bigger.bank.param_count(), 2 * layer.bank.param_count());
}

#[test]
fn replay_trace_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.rtrc");
    let p = path.to_str().unwrap();
    let (code, recorded, err) = run(&["replay-verify", "--tokens", "20", "--trials", "5", "--record-trace", p]);
    assert_eq!(code, 0, "{err}");
    let trace = RoutingTrace::from_bytes(&fs::read(&path).unwrap()).unwrap();
    assert_eq!(trace.num_tokens(), 20);

    let (code, replayed, err) = run(&["replay-verify", "--tokens", "20", "--trials", "5", "--replay-trace", p]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(column(&recorded, "mismatches"), column(&replayed, "mismatches"));
    assert!(column(&replayed, "mismatches").iter().all(|m| m == "0"));
}

#[test]
fn rl_batch_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.txt");
    let p = path.to_str().unwrap();
    let (code, _, err) = run(&["gradcheck-rl", "--trials", "2", "--dump-batch", p]);
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = run(&["gradcheck-rl", "--batch", p]);
    assert_eq!(code, 0, "{err}");
    let batch = moelab::rlloss::RolloutBatch::from_lines(&fs::read_to_string(&path).unwrap()).unwrap();
    let loss = moelab::rlloss::rl_loss(&batch, &Default::default()).unwrap().loss;
    assert!(out.contains(&loss.to_string()), "{out}");
}
