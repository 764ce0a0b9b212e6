use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{FlopLedger, Module, Phase};
use crate::error::{Error, Result};
use crate::fastcar::ReplayPolicy;
use crate::model::{DecodeOptions, FrameLayout, Transformer};
use crate::scalar::Scalar;
use crate::sparse_attn::AttentionMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSettings {
    pub repetitions: usize,
    /// Upper bound when repetitions are raised for a coarse timer.
    pub max_repetitions: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            repetitions: 5,
            max_repetitions: 64,
        }
    }
}

/// Median wall time per phase and module over the repetitions, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub seq_len: usize,
    pub repetitions: usize,
    /// `[phase][module]`, ordered as [`Phase::ALL`] and [`Module::ALL`].
    pub modules: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    pub flops: FlopLedger,
}

impl LatencyReport {
    pub fn module(&self, phase: Phase, module: Module) -> f64 {
        self.modules[phase as usize][module as usize]
    }

    pub fn total(&self, phase: Phase) -> f64 {
        self.totals[phase as usize]
    }

    /// Attention time in a phase: projections plus scores.
    pub fn attention(&self, phase: Phase) -> f64 {
        self.module(phase, Module::AttentionProj) + self.module(phase, Module::AttentionScore)
    }

    pub fn end_to_end(&self) -> f64 {
        self.totals.iter().sum()
    }

    /// CSV with columns `phase,module,seconds`; whole-phase totals use module `total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,module,seconds\n");
        for p in Phase::ALL {
            for m in Module::ALL {
                out.push_str(&format!(
                    "{},{},{}\n",
                    p.name(),
                    m.name(),
                    self.module(p, m)
                ));
            }
            out.push_str(&format!("{},total,{}\n", p.name(), self.total(p)));
        }
        out
    }
}

/// Per-module and total seconds back from [`LatencyReport::to_csv`].
pub fn read_latency_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut modules = vec![vec![f64::NAN; Module::ALL.len()]; Phase::ALL.len()];
    let mut totals = vec![f64::NAN; Phase::ALL.len()];
    for (n, line) in text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = || Error::Parse(format!("latency line {}: malformed", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let p = Phase::ALL
            .iter()
            .position(|p| p.name() == f[0])
            .ok_or_else(bad)?;
        let secs: f64 = f[2].parse().map_err(|_| bad())?;
        match Module::ALL.iter().position(|m| m.name() == f[1]) {
            Some(m) => modules[p][m] = secs,
            None if f[1] == "total" => totals[p] = secs,
            None => return Err(bad()),
        }
    }
    if modules.iter().flatten().chain(&totals).any(|v| v.is_nan()) {
        return Err(Error::Parse("latency table is missing rows".into()));
    }
    Ok((modules, totals))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Smallest nonzero step of the monotonic clock observed over a short probe.
fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times `repetitions` decodes and reports per-module medians.
///
/// When the decode phase lasts fewer than 10⁴ timer ticks the measurement is
/// too coarse; repetitions are doubled (up to `max_repetitions`) with a warning.
pub fn profile<S: Scalar>(
    model: &Transformer<S>,
    layout: &FrameLayout,
    prompt: &[usize],
    policy: Option<&ReplayPolicy>,
    mask: Option<&AttentionMask>,
    settings: &ProfileSettings,
) -> Result<LatencyReport> {
    if settings.repetitions < 3 {
        return Err(Error::Config(
            "profiling needs at least 3 repetitions".into(),
        ));
    }
    let opts = DecodeOptions {
        record_artifacts: false,
        timed: true,
    };
    let resolution = timer_resolution().as_secs_f64();
    let mut reps = settings.repetitions;
    let mut samples = Vec::new();
    let mut flops = FlopLedger::default();
    loop {
        while samples.len() < reps {
            let tr = model.decode(layout, prompt, policy, mask, &opts)?;
            flops = tr.flops;
            samples.push(tr.timings.expect("timed decode"));
        }
        let decode_total = median(
            samples
                .iter()
                .map(|t| t.total(Phase::Decode).as_secs_f64())
                .collect(),
        );
        if decode_total >= 1e4 * resolution || reps >= settings.max_repetitions {
            break;
        }
        log::warn!(
            "decode phase ({decode_total:.3e} s) is within 10^4 ticks of the timer resolution ({resolution:.1e} s); \
             raising repetitions to {}",
            (reps * 2).min(settings.max_repetitions)
        );
        reps = (reps * 2).min(settings.max_repetitions);
    }
    let modules = Phase::ALL
        .iter()
        .map(|&p| {
            Module::ALL
                .iter()
                .map(|&m| median(samples.iter().map(|t| t.get(p, m).as_secs_f64()).collect()))
                .collect()
        })
        .collect();
    let totals = Phase::ALL
        .iter()
        .map(|&p| median(samples.iter().map(|t| t.total(p).as_secs_f64()).collect()))
        .collect();
    Ok(LatencyReport {
        seq_len: layout.total_len(),
        repetitions: samples.len(),
        modules,
        totals,
        flops,
    })
}
