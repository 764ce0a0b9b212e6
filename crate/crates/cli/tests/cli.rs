use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fastcar::accounting::{read_latency_csv, FlopLedger};
use fastcar::drs::{read_report_csv, report_csv, Scenario};
use fastcar::fastcar::{
    read_stats_csv, read_tas_csv, write_stats_csv, CalibrationResult, ReplayPolicy,
};
use fastcar::harness::{Manifest, RunConfig};
use fastcar::theory::VerificationReport;

const SMALL: &str = r#"
seed = 11

[model]
d = 16
d_ff = 40
heads = 2
layers = 3
vocab = 40

[layout]
frames = 4
tokens_per_frame = 8
prefill_len = 4

[verify]
cosine_pairs = 1000
lipschitz_centers = 20
runs = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fastcar"))
            .arg("--config")
            .arg(self.path("small.toml"))
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn read(&self, out: &str, file: &str) -> String {
        std::fs::read_to_string(self.path(out).join(file)).unwrap()
    }

    fn manifest(&self, out: &str) -> Manifest {
        Manifest::from_toml(&self.read(out, "manifest.toml")).unwrap()
    }
}

fn assert_exit_matches_manifest(sb: &Sandbox, out: &str, o: &Output) {
    let m = sb.manifest(out);
    assert_eq!(
        o.status.code(),
        Some(if m.passed { 0 } else { 1 }),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        let read = |d: &Path| std::fs::read_to_string(d.join(n)).unwrap();
        assert_eq!(read(a), read(b), "{n}");
    }
}

#[test]
fn infinite_threshold_trace_is_byte_identical_to_dense() {
    let sb = Sandbox::new();
    assert!(sb.run("dense", &["generate"]).status.success());
    assert!(sb
        .run("never", &["--tau", "inf", "generate"])
        .status
        .success());
    same_files(
        &sb.path("dense"),
        &sb.path("never"),
        &["trace.csv", "tas.csv", "stats.csv", "flops.csv"],
    );
    let p = ReplayPolicy::from_toml(&sb.read("never", "policy.toml")).unwrap();
    assert_eq!(p, ReplayPolicy::never());
}

#[test]
fn repeated_invocations_are_identical() {
    let sb = Sandbox::new();
    let names = [
        "trace.csv",
        "tas.csv",
        "stats.csv",
        "flops.csv",
        "policy.toml",
        "config.toml",
        "manifest.toml",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        assert!(sb.run("a", &["--tau", "0", "generate"]).status.success());
        runs.push(names.map(|n| sb.read("a", n)));
    }
    for (n, (a, b)) in names.iter().zip(runs[0].iter().zip(&runs[1])) {
        assert_eq!(a, b, "{n}");
    }
}

#[test]
fn threshold_sweep_spans_ratios() {
    let sb = Sandbox::new();
    let mut ratios = Vec::new();
    for (out, tau) in [("hi", "inf"), ("mid", "0"), ("lo", "-inf")] {
        assert!(sb.run(out, &["--tau", tau, "generate"]).status.success());
        ratios.push(read_stats_csv(&sb.read(out, "stats.csv")).unwrap().ratio());
    }
    assert_eq!(ratios[0], 0.0);
    assert_eq!(ratios[2], 1.0);
    assert!(ratios[0] <= ratios[1] && ratios[1] <= ratios[2]);
}

#[test]
fn effective_config_round_trips() {
    let sb = Sandbox::new();
    let o = sb.run(
        "cfg",
        &[
            "--set",
            "policy.target_ratio=0.25",
            "--local",
            "4",
            "--sink",
            "8",
            "config",
        ],
    );
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.policy.target_ratio, Some(0.25));
    assert_eq!(cfg.mask.map(|m| (m.sink, m.local)), Some((8, 4)));
    assert_eq!(cfg.model.d, 16);
    std::fs::write(sb.path("again.toml"), &text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fastcar"))
        .arg("--config")
        .arg(sb.path("again.toml"))
        .arg("config")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
}

#[test]
fn reports_reparse_to_identical_values() {
    let sb = Sandbox::new();
    let o = sb.run("gen", &["--tau", "0", "generate"]);
    assert!(o.status.success());
    let trace = sb.read("gen", "trace.csv");
    let (tokens, logits) = fastcar::harness::read_trace_csv(&trace).unwrap();
    assert_eq!(tokens.len(), 32);
    assert!(logits.iter().all(|r| r.len() == 40));
    let stats = read_stats_csv(&sb.read("gen", "stats.csv")).unwrap();
    assert_eq!(write_stats_csv(&stats), sb.read("gen", "stats.csv"));
    let tas = read_tas_csv(&sb.read("gen", "tas.csv")).unwrap();
    assert_eq!(tas.len(), 3 * 3 * 8 * 2);
    let flops = FlopLedger::from_csv(&sb.read("gen", "flops.csv")).unwrap();
    assert_eq!(flops.to_csv(), sb.read("gen", "flops.csv"));
    let m = sb.manifest("gen");
    assert_eq!(Manifest::from_toml(&m.to_toml()).unwrap(), m);
    assert!(m.passed && m.files.iter().any(|f| f == "policy.toml"));

    let o = sb.run("prof", &["--tau", "0", "profile", "--repetitions", "3"]);
    assert!(o.status.success());
    let (modules, totals) = read_latency_csv(&sb.read("prof", "latency.csv")).unwrap();
    assert!(modules.iter().flatten().chain(&totals).all(|v| *v >= 0.0));

    let o = sb.run(
        "drs",
        &[
            "--tau",
            "0",
            "--set",
            "drs.batches=4",
            "--set",
            "drs.aggregation.tokens_per_step=8",
            "drs",
        ],
    );
    assert!(o.status.success());
    let sc = Scenario::from_toml(&sb.read("drs", "scenario.toml")).unwrap();
    assert_eq!(sc.to_toml(), sb.read("drs", "scenario.toml"));
    let rows = read_report_csv(&sb.read("drs", "drs.csv")).unwrap();
    assert!(!rows.is_empty());
    assert_eq!(report_csv(&rows, sc.num_cores), sb.read("drs", "drs.csv"));

    let o = sb.run("ver", &["verify"]);
    assert_exit_matches_manifest(&sb, "ver", &o);
    let rep = VerificationReport::from_toml(&sb.read("ver", "verify.toml")).unwrap();
    assert_eq!(
        VerificationReport::from_toml(&rep.to_toml().unwrap()).unwrap(),
        rep
    );
    assert!(rep.check("never-replay-exactness").unwrap().passed);
    assert!(rep.check("replay-fidelity").unwrap().passed);

    let o = sb.run("cal", &["--target-ratio", "0.5", "calibrate"]);
    assert_exit_matches_manifest(&sb, "cal", &o);
    let res: CalibrationResult = toml::from_str(&sb.read("cal", "calibration.toml")).unwrap();
    assert_eq!(
        toml::to_string(&res).unwrap(),
        sb.read("cal", "calibration.toml")
    );

    let o = sb.run("abl", &["ablate"]);
    assert_exit_matches_manifest(&sb, "abl", &o);
    for file in ["ablation.csv", "replay_by_layer.csv"] {
        let text = sb.read("abl", file);
        for line in text.lines().skip(1) {
            for cell in line.split(',').skip(1) {
                let v: f64 = cell.parse().unwrap();
                assert_eq!(v.to_string(), cell, "{file}");
            }
        }
    }
}

#[test]
fn scenario_file_drives_drs() {
    let sb = Sandbox::new();
    let sc = Scenario {
        registers: vec![0xff, 0x0f, 0xa5, 0x00],
        batches: 8,
        ..Default::default()
    };
    std::fs::write(sb.path("sc.toml"), sc.to_toml()).unwrap();
    let o = sb.run(
        "drs",
        &["drs", "--scenario", sb.path("sc.toml").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0));
    let rows = read_report_csv(&sb.read("drs", "drs.csv")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.register).collect::<Vec<_>>(),
        sc.registers
    );
    assert!(rows.iter().all(|r| r.drs_makespan <= r.static_makespan));
}

#[test]
fn exit_codes() {
    let sb = Sandbox::new();
    let o = sb.run("bad", &["--set", "model.d=15", "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divisible"));
    let o = sb.run(
        "bad",
        &["--tau", "0.1", "--target-ratio", "0.5", "generate"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = sb.run("bad", &["calibrate"]);
    assert_eq!(o.status.code(), Some(2));

    // a calibration that cannot be met is a failed check, not an error
    let o = sb.run(
        "tight",
        &[
            "--target-ratio",
            "0.5",
            "--set",
            "calibration.tolerance=0",
            "--set",
            "calibration.max_iters=1",
            "calibrate",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!sb.manifest("tight").passed);
}

#[test]
fn output_root_from_environment() {
    let sb = Sandbox::new();
    let o = Command::new(env!("CARGO_BIN_EXE_fastcar"))
        .arg("--config")
        .arg(sb.path("small.toml"))
        .args(["--set", "out_dir=\"nested/run\"", "generate"])
        .env("FASTCAR_OUT", sb.path("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sb.path("root/nested/run/trace.csv").exists());
}
