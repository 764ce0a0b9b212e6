//! FLOP ledger and wall-clock accounting.
//!
//! Counting convention: a multiply-add is 2 FLOPs. Each attention score also costs
//! one scale, one `exp` and one divide. Layer normalization costs 5 FLOPs per element.
//! MLP FLOPs are the three projections only (`6·d·d_ff` per token); the elementwise
//! gate is not counted. Embedding lookups are free.

mod profile;

pub use profile::{profile, read_latency_csv, LatencyReport, ProfileSettings};

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{FrameLayout, ModelConfig};
use crate::sparse_attn::{context_len, AttentionMask};

pub const NORM_FLOPS_PER_ELEM: u64 = 5;
pub const SCORE_ELEMWISE_FLOPS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Prefill, Phase::Decode];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    AttentionProj,
    AttentionScore,
    Mlp,
    Head,
    Norm,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::AttentionProj,
        Module::AttentionScore,
        Module::Mlp,
        Module::Head,
        Module::Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::AttentionProj => "attention-proj",
            Module::AttentionScore => "attention-score",
            Module::Mlp => "mlp",
            Module::Head => "head",
            Module::Norm => "norm",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

/// FLOP counts per phase and module, plus the MLP work skipped by replay.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    counts: [[u64; 5]; 2],
    pub replay_savings: u64,
}

impl FlopLedger {
    pub fn add(&mut self, phase: Phase, module: Module, flops: u64) {
        self.counts[phase as usize][module.idx()] += flops;
    }

    pub fn get(&self, phase: Phase, module: Module) -> u64 {
        self.counts[phase as usize][module.idx()]
    }

    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.counts[phase as usize].iter().sum()
    }

    pub fn module_total(&self, module: Module) -> u64 {
        Phase::ALL.iter().map(|p| self.get(*p, module)).sum()
    }

    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|p| self.phase_total(*p)).sum()
    }

    /// CSV with columns `phase,module,flops`, then a `replay_savings` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,module,flops\n");
        for p in Phase::ALL {
            for m in Module::ALL {
                out.push_str(&format!("{},{},{}\n", p.name(), m.name(), self.get(p, m)));
            }
        }
        out.push_str(&format!("all,replay_savings,{}\n", self.replay_savings));
        out
    }

    pub fn from_csv(text: &str) -> crate::Result<Self> {
        let mut ledger = Self::default();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let [phase, module, value] = cols[..] else {
                return Err(crate::Error::Parse(format!("bad ledger row {line:?}")));
            };
            let value: u64 = value
                .parse()
                .map_err(|e| crate::Error::Parse(format!("{e}")))?;
            if module == "replay_savings" {
                ledger.replay_savings = value;
                continue;
            }
            let p = Phase::ALL.into_iter().find(|p| p.name() == phase);
            let m = Module::ALL.into_iter().find(|m| m.name() == module);
            match (p, m) {
                (Some(p), Some(m)) => ledger.counts[p as usize][m.idx()] = value,
                _ => return Err(crate::Error::Parse(format!("bad ledger row {line:?}"))),
            }
        }
        Ok(ledger)
    }
}

/// Wall time per phase and module, plus whole-phase totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timings {
    pub modules: [[Duration; 5]; 2],
    pub totals: [Duration; 2],
}

impl Timings {
    pub fn get(&self, phase: Phase, module: Module) -> Duration {
        self.modules[phase as usize][module.idx()]
    }

    pub fn total(&self, phase: Phase) -> Duration {
        self.totals[phase as usize]
    }
}

/// Instrumentation attached to one decode run: FLOPs always, wall time on request.
#[derive(Clone, Debug, Default)]
pub struct Meter {
    pub flops: FlopLedger,
    pub timings: Option<Timings>,
}

impl Meter {
    pub fn new(timed: bool) -> Self {
        Self {
            flops: FlopLedger::default(),
            timings: timed.then(Timings::default),
        }
    }

    #[inline]
    pub fn count(&mut self, phase: Phase, module: Module, flops: u64) {
        self.flops.add(phase, module, flops);
    }

    #[inline]
    pub fn start(&self) -> Option<Instant> {
        self.timings.as_ref().map(|_| Instant::now())
    }

    #[inline]
    pub fn stop(&mut self, phase: Phase, module: Module, started: Option<Instant>) {
        if let (Some(t), Some(s)) = (self.timings.as_mut(), started) {
            t.modules[phase as usize][module.idx()] += s.elapsed();
        }
    }

    #[inline]
    pub fn stop_phase(&mut self, phase: Phase, started: Option<Instant>) {
        if let (Some(t), Some(s)) = (self.timings.as_mut(), started) {
            t.totals[phase as usize] += s.elapsed();
        }
    }
}

/// MLP FLOPs for one token at one layer.
pub fn mlp_flops_per_token(cfg: &ModelConfig) -> u64 {
    (2 * 3 * cfg.d * cfg.d_ff) as u64
}

/// Closed-form ledger for a run that replays `replayed` token-layer MLP evaluations.
pub fn flops_model_counts(
    cfg: &ModelConfig,
    layout: &FrameLayout,
    replayed: u64,
    mask: Option<&AttentionMask>,
) -> FlopLedger {
    let (d, h, l) = (cfg.d as u64, cfg.heads as u64, cfg.layers as u64);
    let norm = NORM_FLOPS_PER_ELEM * d;
    let proj = 8 * d * d;
    let mlp = mlp_flops_per_token(cfg);
    let mut ledger = FlopLedger::default();
    let n = layout.video_len();
    for pos in 0..layout.total_len() {
        let phase = if pos < layout.prefill_len {
            Phase::Prefill
        } else {
            Phase::Decode
        };
        let ctx = context_len(pos, mask) as u64;
        let mut score = 4 * d * ctx + SCORE_ELEMWISE_FLOPS * h * ctx;
        let hidden_alignment = layout
            .generated_index(pos)
            .and_then(|j| layout.aligned(j))
            .is_some_and(|prev| mask.is_some_and(|m| !m.is_visible(pos, layout.position(prev))));
        if hidden_alignment {
            score += 2 * d + h;
        }
        ledger.add(phase, Module::Norm, l * 2 * norm);
        ledger.add(phase, Module::AttentionProj, l * proj);
        ledger.add(phase, Module::AttentionScore, l * score);
        ledger.add(phase, Module::Mlp, l * mlp);
        let emits_logits =
            pos + 1 == layout.prefill_len || layout.generated_index(pos).is_some_and(|j| j + 1 < n);
        if emits_logits {
            ledger.add(phase, Module::Head, 2 * d * cfg.vocab as u64);
            ledger.add(phase, Module::Norm, norm);
        }
    }
    let savings = replayed * mlp;
    ledger.counts[Phase::Decode as usize][Module::Mlp.idx()] -= savings;
    ledger.replay_savings = savings;
    ledger
}

/// Closed-form ledger at a fractional replay ratio over the eligible evaluations.
pub fn flops_model(
    cfg: &ModelConfig,
    layout: &FrameLayout,
    replay_ratio: f64,
    mask: Option<&AttentionMask>,
) -> FlopLedger {
    let eligible = (layout.eligible_per_layer() * cfg.layers) as u64;
    let replayed = (replay_ratio.clamp(0.0, 1.0) * eligible as f64).round() as u64;
    flops_model_counts(cfg, layout, replayed, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_extremes_differ_by_all_eligible_mlp_work() {
        let cfg = ModelConfig::default();
        let lay = FrameLayout::default();
        let a = flops_model(&cfg, &lay, 0.0, None);
        let b = flops_model(&cfg, &lay, 1.0, None);
        let want = (lay.frames - 1) * lay.tokens_per_frame * cfg.layers * 2 * 3 * cfg.d * cfg.d_ff;
        assert_eq!(a.total() - b.total(), want as u64);
        assert_eq!(b.replay_savings, want as u64);
    }

    #[test]
    fn mask_never_increases_flops() {
        let cfg = ModelConfig::default();
        let lay = FrameLayout::default();
        let dense = flops_model(&cfg, &lay, 0.0, None);
        let wide = AttentionMask {
            sink_size: 0,
            local_size: lay.total_len(),
        };
        assert_eq!(flops_model(&cfg, &lay, 0.0, Some(&wide)), dense);
        let narrow = AttentionMask {
            sink_size: lay.prefill_len + lay.tokens_per_frame,
            local_size: 16,
        };
        let masked = flops_model(&cfg, &lay, 0.0, Some(&narrow));
        assert!(
            masked.module_total(Module::AttentionScore)
                < dense.module_total(Module::AttentionScore)
        );
        assert!(masked.total() < dense.total());
    }

    #[test]
    fn csv_round_trip() {
        let l = flops_model(&ModelConfig::default(), &FrameLayout::default(), 0.3, None);
        assert_eq!(FlopLedger::from_csv(&l.to_csv()).unwrap(), l);
    }
}
