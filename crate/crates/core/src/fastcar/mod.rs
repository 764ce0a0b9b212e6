//! Temporal-attention-score gated replay of cached MLP outputs.
//!
//! For a token in frame `t ≥ 2` the decoder reads the scaled query-key logit against
//! the same spatial slot of the previous frame from each head, averages over heads,
//! and reuses that slot's cached MLP output when the mean reaches the threshold.
//! Frame 1 always computes, which is what seeds the cache.

mod calibrate;
mod export;

pub use calibrate::{calibrate_threshold, CalibrationResult, CalibrationSettings};
pub use export::{read_stats_csv, read_tas_csv, write_stats_csv, write_tas_csv, TasRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeTrace, FrameLayout};
use crate::scalar::Scalar;
use crate::tensor::dot;

/// Per-head temporal scores for one token at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TasRecord<S> {
    pub layer: usize,
    /// 1-based frame index, always ≥ 2.
    pub t: usize,
    pub i: usize,
    pub heads: Vec<S>,
    pub mean: S,
}

impl<S: Scalar> TasRecord<S> {
    pub fn new(layer: usize, t: usize, i: usize, heads: Vec<S>) -> Self {
        let mean = mean_over_heads(&heads);
        Self {
            layer,
            t,
            i,
            heads,
            mean,
        }
    }
}

/// Arithmetic mean of the head scores, summed in head order.
pub fn mean_over_heads<S: Scalar>(heads: &[S]) -> S {
    let mut acc = S::zero();
    for h in heads {
        acc = acc + *h;
    }
    acc / S::of(heads.len() as f64)
}

/// Reads the temporal score off an attention logit row.
///
/// `logits[h]` is head `h`'s scaled pre-softmax score row over `key_positions`
/// (ascending absolute positions). `j` is the generated-token index of the query.
/// Fails with [`Error::NotEligible`] for frame 1 and [`Error::Missing`] when the
/// aligned key is not among `key_positions`.
pub fn tas_from_logits<S: Scalar>(
    layer: usize,
    logits: &[Vec<S>],
    key_positions: &[usize],
    j: usize,
    layout: &FrameLayout,
) -> Result<TasRecord<S>> {
    let g = layout.grid(j);
    let aligned = layout.aligned(j).ok_or(Error::NotEligible { frame: g.t })?;
    let col = key_positions
        .binary_search(&layout.position(aligned))
        .map_err(|_| {
            Error::Missing(format!(
                "aligned key for token {j} is outside the visible set"
            ))
        })?;
    let heads = logits.iter().map(|row| row[col]).collect();
    Ok(TasRecord::new(layer, g.t, g.i, heads))
}

/// Temporal score recomputed from raw per-head query and key slices.
pub fn tas_from_vectors<S: Scalar>(q: &[S], k_aligned: &[S], heads: usize) -> Vec<S> {
    let dh = q.len() / heads;
    let root = S::of(dh as f64).sqrt();
    (0..heads)
        .map(|h| dot(&q[h * dh..(h + 1) * dh], &k_aligned[h * dh..(h + 1) * dh]) / root)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReplayPolicy {
    /// One threshold shared by every layer.
    Consistent { tau: f64 },
    /// One threshold per layer.
    Inconsistent { taus: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Consistent,
    Inconsistent,
}

impl ReplayPolicy {
    pub fn consistent(tau: f64) -> Self {
        ReplayPolicy::Consistent { tau }
    }

    /// A policy that never replays.
    pub fn never() -> Self {
        Self::consistent(f64::INFINITY)
    }

    pub fn mode(&self) -> ThresholdMode {
        match self {
            ReplayPolicy::Consistent { .. } => ThresholdMode::Consistent,
            ReplayPolicy::Inconsistent { .. } => ThresholdMode::Inconsistent,
        }
    }

    pub fn threshold(&self, layer: usize) -> f64 {
        match self {
            ReplayPolicy::Consistent { tau } => *tau,
            ReplayPolicy::Inconsistent { taus } => taus[layer],
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let taus: &[f64] = match self {
            ReplayPolicy::Consistent { tau } => std::slice::from_ref(tau),
            ReplayPolicy::Inconsistent { taus } => {
                if taus.len() != layers {
                    return Err(Error::Config(format!(
                        "inconsistent policy has {} thresholds for {layers} layers",
                        taus.len()
                    )));
                }
                taus
            }
        };
        if taus.iter().any(|t| t.is_nan()) {
            return Err(Error::Config("threshold is NaN".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Replay iff the mean score reaches the layer's threshold. Equality replays.
pub fn replay_decide<S: Scalar>(rec: &TasRecord<S>, policy: &ReplayPolicy) -> bool {
    rec.mean.as_f64() >= policy.threshold(rec.layer)
}

/// Most recent MLP output per `(layer, spatial slot)`.
#[derive(Clone, Debug)]
pub struct MlpCache<S> {
    slots: Vec<Vec<Option<Vec<S>>>>,
}

impl<S: Scalar> MlpCache<S> {
    pub fn new(layers: usize, tokens_per_frame: usize) -> Self {
        Self {
            slots: vec![vec![None; tokens_per_frame]; layers],
        }
    }

    pub fn get(&self, layer: usize, i: usize) -> Option<&[S]> {
        self.slots[layer][i].as_deref()
    }

    pub fn store(&mut self, layer: usize, i: usize, y: Vec<S>) {
        self.slots[layer][i] = Some(y);
    }
}

/// Outcome of one MLP evaluation site.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpOutcome<S> {
    pub output: Vec<S>,
    pub replayed: bool,
}

/// Either replays slot `i` of `layer` or computes `mlp(z)` and caches it.
///
/// Without a record (frame 1 or prompt positions) or without a policy the MLP is
/// always computed. After the call the slot holds this token's output either way.
pub fn replay_or_compute<S: Scalar>(
    z: &[S],
    rec: Option<&TasRecord<S>>,
    cache: &mut MlpCache<S>,
    policy: Option<&ReplayPolicy>,
    layer: usize,
    i: usize,
    mlp: impl FnOnce(&[S]) -> Vec<S>,
) -> Result<MlpOutcome<S>> {
    let replay = matches!((rec, policy), (Some(r), Some(p)) if replay_decide(r, p));
    if replay {
        let cached = cache.get(layer, i).ok_or_else(|| {
            Error::Internal(format!(
                "replay requested for empty cache slot (layer {layer}, slot {i})"
            ))
        })?;
        return Ok(MlpOutcome {
            output: cached.to_vec(),
            replayed: true,
        });
    }
    let y = mlp(z);
    cache.store(layer, i, y.clone());
    Ok(MlpOutcome {
        output: y,
        replayed: false,
    })
}

/// Eligible and replayed MLP evaluations per layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub eligible: Vec<u64>,
    pub replayed: Vec<u64>,
}

impl ReplayStats {
    pub fn new(layers: usize) -> Self {
        Self {
            eligible: vec![0; layers],
            replayed: vec![0; layers],
        }
    }

    pub fn record(&mut self, layer: usize, replayed: bool) {
        self.eligible[layer] += 1;
        if replayed {
            self.replayed[layer] += 1;
        }
    }

    pub fn total_eligible(&self) -> u64 {
        self.eligible.iter().sum()
    }

    pub fn total_replayed(&self) -> u64 {
        self.replayed.iter().sum()
    }

    pub fn ratio(&self) -> f64 {
        ratio(self.total_replayed(), self.total_eligible())
    }

    pub fn layer_ratio(&self, layer: usize) -> f64 {
        ratio(self.replayed[layer], self.eligible[layer])
    }
}

/// Replay decisions of a run checked against its recorded MLP outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub replayed: usize,
    /// Replayed outputs that differ in any bit from the previous frame's output.
    pub mismatches: usize,
    /// Replays attributed to frame 1.
    pub first_frame: usize,
}

impl FidelityReport {
    pub fn ok(&self) -> bool {
        self.mismatches == 0 && self.first_frame == 0
    }
}

/// Checks that every replayed output equals the aligned output of the previous frame.
pub fn replay_fidelity<S: Scalar>(trace: &DecodeTrace<S>) -> FidelityReport {
    let lay = &trace.layout;
    let mut rep = FidelityReport::default();
    for e in trace.tas.iter().filter(|e| e.replayed) {
        rep.replayed += 1;
        let r = &e.record;
        if r.t < 2 {
            rep.first_frame += 1;
            continue;
        }
        let j = lay.flat(crate::model::GridPos { t: r.t, i: r.i });
        let y = &trace.mlp_outputs[r.layer];
        let same = y
            .row(j)
            .iter()
            .zip(y.row(j - lay.tokens_per_frame))
            .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
        if !same {
            rep.mismatches += 1;
        }
    }
    rep
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
