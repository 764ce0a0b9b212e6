//! Run orchestration behind the command-line tool.
//!
//! Each command takes a validated [`RunConfig`] and an output directory, writes its
//! reports atomically, and finishes with a `manifest.toml` naming the config hash,
//! versions, seeds and files. Reruns with the same config produce identical bytes.

mod config;

pub use config::{apply_override, AblateOptions, DrsOptions, MaskSpec, PolicySpec, RunConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{flops_model_counts, profile};
use crate::drs::{self, Scenario};
use crate::error::{Error, Result};
use crate::fastcar::{
    calibrate_threshold, replay_fidelity, write_stats_csv, write_tas_csv, CalibrationResult,
    ReplayPolicy, ThresholdMode,
};
use crate::model::{DecodeOptions, DecodeTrace, Transformer, Weights};
use crate::rng;
use crate::sparse_attn::AttentionMask;
use crate::theory::{verify_all, Check};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Result of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    /// Every requested check passed.
    pub passed: bool,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub weights: u64,
    pub prompt: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the effective config in canonical TOML form.
    pub config_hash: String,
    pub seeds: Seeds,
    pub passed: bool,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    Sha256::digest(cfg.to_toml().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `cfg.out_dir`, placed under `root` when it is relative and a root is given.
pub fn resolve_out_dir(cfg: &RunConfig, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if cfg.out_dir.is_relative() => r.join(&cfg.out_dir),
        _ => cfg.out_dir.clone(),
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            files: Vec::new(),
        }
    }

    fn put(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        self.files.push(p);
        Ok(())
    }

    fn finish(
        mut self,
        cfg: &RunConfig,
        command: &str,
        passed: bool,
        summary: String,
    ) -> Result<Outcome> {
        self.put("config.toml", &cfg.to_toml())?;
        let manifest = Manifest {
            tool: "fastcar".into(),
            version: VERSION.into(),
            command: command.into(),
            config_hash: config_hash(cfg),
            seeds: Seeds {
                run: cfg.seed,
                weights: rng::stream_seed(cfg.seed, "weights"),
                prompt: rng::stream_seed(cfg.seed, "prompt"),
            },
            passed,
            files: self
                .files
                .iter()
                .map(|p| {
                    p.file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned()
                })
                .collect(),
        };
        self.put("manifest.toml", &manifest.to_toml())?;
        Ok(Outcome {
            passed,
            files: self.files,
            summary,
        })
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<Transformer<f64>> {
    cfg.validate()?;
    let mc = cfg.model_config();
    match &cfg.weights {
        Some(path) => {
            let file = std::fs::File::open(path)?;
            let w = Weights::read_from(&mc, std::io::BufReader::new(file))?;
            Transformer::from_weights(mc, w)
        }
        None => Transformer::new(mc),
    }
}

/// CSV of generated tokens and the logits each was picked from.
pub fn trace_csv(trace: &DecodeTrace<f64>) -> String {
    let vocab = trace.logits.first().map_or(0, Vec::len);
    let mut out = String::from("j,t,i,token");
    for v in 0..vocab {
        out.push_str(&format!(",logit_{v}"));
    }
    out.push('\n');
    for (j, (tok, row)) in trace.tokens.iter().zip(&trace.logits).enumerate() {
        let g = trace.layout.grid(j);
        out.push_str(&format!("{j},{},{},{tok}", g.t, g.i));
        for l in row {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
    }
    out
}

/// Tokens and logits back from [`trace_csv`].
pub fn read_trace_csv(text: &str) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut tokens = Vec::new();
    let mut logits = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = || Error::Parse(format!("trace line {}: malformed", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(bad());
        }
        tokens.push(f[3].parse().map_err(|_| bad())?);
        logits.push(
            f[4..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((tokens, logits))
}

fn calibrate_for(
    cfg: &RunConfig,
    model: &Transformer<f64>,
    prompt: &[usize],
    target: f64,
    mode: ThresholdMode,
    mask: Option<&AttentionMask>,
) -> Result<CalibrationResult> {
    calibrate_threshold(
        model,
        &cfg.layout,
        prompt,
        target,
        mode,
        mask,
        &cfg.calibration,
    )
}

/// The policy the config asks for, calibrating first when it gives a target ratio.
pub fn resolve_policy(
    cfg: &RunConfig,
    model: &Transformer<f64>,
    prompt: &[usize],
    mask: Option<&AttentionMask>,
) -> Result<(Option<ReplayPolicy>, Option<CalibrationResult>)> {
    if let Some(p) = cfg.policy.fixed() {
        return Ok((Some(p), None));
    }
    match cfg.policy.target_ratio {
        Some(t) => {
            let res = calibrate_for(cfg, model, prompt, t, cfg.policy.mode, mask)?;
            Ok((Some(res.policy.clone()), Some(res)))
        }
        None => Ok((None, None)),
    }
}

fn calibration_ok(res: &CalibrationResult, tol: f64) -> bool {
    res.saturated || (res.achieved - res.target).abs() <= tol
}

/// Generates one video, writing the trace, temporal scores, per-layer replay
/// statistics and the FLOP ledger.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let mask = cfg.attention_mask()?;
    let prompt = model.random_prompt(cfg.seed, &cfg.layout);
    let (policy, calib) = resolve_policy(cfg, &model, &prompt, mask.as_ref())?;
    let tr = model.decode(
        &cfg.layout,
        &prompt,
        policy.as_ref(),
        mask.as_ref(),
        &DecodeOptions::default(),
    )?;
    let mut w = Writer::new(out);
    w.put("trace.csv", &trace_csv(&tr))?;
    w.put("tas.csv", &write_tas_csv(&tr.tas))?;
    w.put("stats.csv", &write_stats_csv(&tr.stats))?;
    w.put("flops.csv", &tr.flops.to_csv())?;
    if let Some(p) = &policy {
        w.put("policy.toml", &p.to_toml())?;
    }
    if let Some(c) = &calib {
        w.put(
            "calibration.toml",
            &toml::to_string(c).map_err(|e| Error::Internal(e.to_string()))?,
        )?;
    }
    let summary = format!(
        "generated {} tokens; replay ratio {:.4}; {} FLOPs",
        tr.tokens.len(),
        tr.replay_ratio(),
        tr.flops.total()
    );
    w.finish(cfg, "generate", true, summary)
}

/// Finds a threshold for `policy.target_ratio` and writes it as `policy.toml`.
pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let target = cfg
        .policy
        .target_ratio
        .ok_or_else(|| Error::Config("calibrate needs policy.target_ratio".into()))?;
    let model = build_model(cfg)?;
    let mask = cfg.attention_mask()?;
    let prompt = model.random_prompt(cfg.seed, &cfg.layout);
    let res = calibrate_for(cfg, &model, &prompt, target, cfg.policy.mode, mask.as_ref())?;
    let passed = calibration_ok(&res, cfg.calibration.tolerance);
    let mut w = Writer::new(out);
    w.put("policy.toml", &res.policy.to_toml())?;
    w.put(
        "calibration.toml",
        &toml::to_string(&res).map_err(|e| Error::Internal(e.to_string()))?,
    )?;
    let mut summary = format!(
        "target {:.4}, achieved {:.4}{} after {} trials",
        res.target,
        res.achieved,
        if res.saturated { " (saturated)" } else { "" },
        res.trials
    );
    if let Some([below, above]) = res.gap {
        summary.push_str(&format!(
            "; no threshold reaches the target, the ratio jumps from {below:.4} to {above:.4}"
        ));
    }
    w.finish(cfg, "calibrate", passed, summary)
}

/// Core invariants on the configured run, then the similarity bounds.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let mask = cfg.attention_mask()?;
    let lay = &cfg.layout;
    let prompt = model.random_prompt(cfg.seed, lay);
    let opts = DecodeOptions::default();

    let dense = model.decode(lay, &prompt, None, mask.as_ref(), &opts)?;
    let never = model.decode(
        lay,
        &prompt,
        Some(&ReplayPolicy::never()),
        mask.as_ref(),
        &opts,
    )?;
    let exact = dense.tokens == never.tokens
        && dense
            .logits
            .iter()
            .flatten()
            .zip(never.logits.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let policy = match resolve_policy(cfg, &model, &prompt, mask.as_ref())? {
        (Some(p), _) => p,
        (None, _) => ReplayPolicy::consistent(0.0),
    };
    let replay = model.decode(lay, &prompt, Some(&policy), mask.as_ref(), &opts)?;
    let fid = replay_fidelity(&replay);
    let analytic = flops_model_counts(
        &model.config().clone(),
        lay,
        replay.stats.total_replayed(),
        mask.as_ref(),
    );

    let mut report = verify_all(&model, lay, &cfg.verify)?;
    let core = [
        Check {
            name: "never-replay-exactness".into(),
            passed: exact,
            gating: true,
            count: dense.tokens.len(),
            violations: usize::from(!exact),
            max_slack: 0.0,
            detail: "tokens and logit bits of tau = +inf against dense".into(),
        },
        Check {
            name: "replay-fidelity".into(),
            passed: fid.ok(),
            gating: true,
            count: fid.replayed,
            violations: fid.mismatches + fid.first_frame,
            max_slack: 0.0,
            detail: format!("replay ratio {:.4}", replay.replay_ratio()),
        },
        Check {
            name: "ledger-matches-kernels".into(),
            passed: analytic == replay.flops,
            gating: true,
            count: 1,
            violations: usize::from(analytic != replay.flops),
            max_slack: 0.0,
            detail: format!("{} FLOPs counted", replay.flops.total()),
        },
    ];
    report.checks.splice(0..0, core);
    let passed = report.passed();
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed && c.gating)
        .map(|c| c.name.as_str())
        .collect();
    let mut w = Writer::new(out);
    w.put("verify.toml", &report.to_toml()?)?;
    let advisory: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed && !c.gating)
        .map(|c| c.name.as_str())
        .collect();
    let mut summary = if passed {
        format!(
            "{} of {} checks passed",
            report.checks.iter().filter(|c| c.passed).count(),
            report.checks.len()
        )
    } else {
        format!("failed: {}", failed.join(", "))
    };
    if !advisory.is_empty() {
        summary.push_str(&format!(
            "; outside limits (not gating): {}",
            advisory.join(", ")
        ));
    }
    w.finish(cfg, "verify", passed, summary)
}

/// Median per-module wall time of the configured run.
pub fn cmd_profile(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let mask = cfg.attention_mask()?;
    let prompt = model.random_prompt(cfg.seed, &cfg.layout);
    let (policy, _) = resolve_policy(cfg, &model, &prompt, mask.as_ref())?;
    let rep = profile(
        &model,
        &cfg.layout,
        &prompt,
        policy.as_ref(),
        mask.as_ref(),
        &cfg.profile,
    )?;
    let mut w = Writer::new(out);
    w.put("latency.csv", &rep.to_csv())?;
    w.put("flops.csv", &rep.flops.to_csv())?;
    let summary = format!(
        "{} repetitions; prefill {:.3e} s, decode {:.3e} s",
        rep.repetitions,
        rep.total(crate::accounting::Phase::Prefill),
        rep.total(crate::accounting::Phase::Decode)
    );
    // timings differ between runs, so the manifest records no pass/fail beyond success
    w.finish(cfg, "profile", true, summary)
}

/// Scenario from a file, or from seeded decode runs (one per batch) under the
/// configured policy.
pub fn drs_scenario(cfg: &RunConfig) -> Result<Scenario> {
    let o = &cfg.drs;
    if let Some(path) = &o.scenario {
        return Scenario::from_toml(&std::fs::read_to_string(path)?);
    }
    let model = build_model(cfg)?;
    let mask = cfg.attention_mask()?;
    let prompt = model.random_prompt(cfg.seed, &cfg.layout);
    let (policy, _) = resolve_policy(cfg, &model, &prompt, mask.as_ref())?;
    let policy = policy.unwrap_or_else(ReplayPolicy::never);
    let traces = (0..o.batches as u64)
        .map(|b| {
            let p = model.random_prompt(cfg.seed.wrapping_add(b), &cfg.layout);
            model.decode(
                &cfg.layout,
                &p,
                Some(&policy),
                mask.as_ref(),
                &DecodeOptions::default(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let regs = drs::registers_from_traces(&traces, &o.aggregation)?;
    let sc = Scenario {
        num_cores: o.num_cores,
        exec_cycles: o.exec_cycles,
        dispatch_cycles: o.dispatch_cycles,
        instrs_per_batch: o.instrs_per_batch,
        batches: o.batches,
        weights: Vec::new(),
        registers: regs.into_iter().map(|r| r.0).collect(),
    };
    sc.validate()?;
    Ok(sc)
}

pub fn cmd_drs(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let sc = drs_scenario(cfg)?;
    let rows = drs::run_scenario(&sc)?;
    let passed = rows.iter().all(|r| r.drs_makespan <= r.static_makespan);
    let mut w = Writer::new(out);
    w.put("scenario.toml", &sc.to_toml())?;
    w.put("drs.csv", &drs::report_csv(&rows, sc.num_cores))?;
    let (drs_total, static_total): (u64, u64) = rows.iter().fold((0, 0), |(a, b), r| {
        (a + r.drs_makespan, b + r.static_makespan)
    });
    let summary = format!(
        "{} steps; total makespan {drs_total} vs static {static_total} cycles",
        rows.len()
    );
    w.finish(cfg, "drs", passed, summary)
}

/// Consistent versus per-layer thresholds calibrated to the same replay ratio.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = build_model(cfg)?;
    let mask = cfg.attention_mask()?;
    let lay = &cfg.layout;
    let prompt = model.random_prompt(cfg.seed, lay);
    let target = cfg.policy.target_ratio.unwrap_or(cfg.ablate.target_ratio);
    let opts = DecodeOptions::default();
    let dense = model.decode(lay, &prompt, None, mask.as_ref(), &opts)?;

    let mut csv =
        String::from("mode,target,achieved,saturated,token_agreement,mean_abs_logit_error,flops\n");
    let mut by_layer: Vec<Vec<f64>> = Vec::new();
    let mut passed = true;
    let mut w = Writer::new(out);
    for mode in [ThresholdMode::Consistent, ThresholdMode::Inconsistent] {
        let res = calibrate_for(cfg, &model, &prompt, target, mode, mask.as_ref())?;
        passed &= calibration_ok(&res, cfg.calibration.tolerance);
        let tr = model.decode(lay, &prompt, Some(&res.policy), mask.as_ref(), &opts)?;
        let agree = tr
            .tokens
            .iter()
            .zip(&dense.tokens)
            .filter(|(a, b)| a == b)
            .count() as f64
            / tr.tokens.len() as f64;
        let (mut err, mut cnt) = (0.0, 0usize);
        for (a, b) in tr
            .logits
            .iter()
            .flatten()
            .zip(dense.logits.iter().flatten())
        {
            err += (a - b).abs();
            cnt += 1;
        }
        let name = match mode {
            ThresholdMode::Consistent => "consistent",
            ThresholdMode::Inconsistent => "inconsistent",
        };
        csv.push_str(&format!(
            "{name},{target},{},{},{agree},{},{}\n",
            tr.replay_ratio(),
            res.saturated as u8,
            err / cnt.max(1) as f64,
            tr.flops.total()
        ));
        by_layer.push(
            (0..model.config().layers)
                .map(|l| tr.stats.layer_ratio(l))
                .collect(),
        );
        w.put(&format!("policy_{name}.toml"), &res.policy.to_toml())?;
    }
    let mut layers = String::from("layer,consistent,inconsistent\n");
    for l in 0..model.config().layers {
        layers.push_str(&format!("{l},{},{}\n", by_layer[0][l], by_layer[1][l]));
    }
    w.put("ablation.csv", &csv)?;
    w.put("replay_by_layer.csv", &layers)?;
    w.finish(
        cfg,
        "ablate",
        passed,
        format!("matched replay ratio {target}"),
    )
}
