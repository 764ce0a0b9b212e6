//! Threshold search for a target replay ratio.
//!
//! Every trial is a real decode with replay applied, since replaying changes later
//! tokens and therefore later scores. The ratio is not guaranteed to be monotone in
//! the threshold, so bisection keeps the closest trial seen rather than trusting the
//! final bracket.

use serde::{Deserialize, Serialize};

use super::{ReplayPolicy, ThresholdMode};
use crate::error::{Error, Result};
use crate::model::{DecodeOptions, FrameLayout, Transformer};
use crate::scalar::Scalar;
use crate::sparse_attn::AttentionMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Acceptable absolute error in the achieved ratio.
    pub tolerance: f64,
    /// Lowest threshold tried; the ratio here is the ceiling for this run.
    pub tau_floor: f64,
    /// Highest threshold tried.
    pub tau_ceiling: f64,
    /// Bisection steps per search.
    pub max_iters: usize,
    /// Coordinate sweeps over layers in inconsistent mode.
    pub sweeps: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            tau_floor: -16.0,
            tau_ceiling: 16.0,
            max_iters: 40,
            sweeps: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub policy: ReplayPolicy,
    pub target: f64,
    pub achieved: f64,
    pub per_layer: Vec<f64>,
    /// The target lies above the ratio reachable at `tau_floor`.
    pub saturated: bool,
    /// Ratios on either side of a jump that skips over the target (lower, upper),
    /// when bisection closes on one without getting within tolerance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<[f64; 2]>,
    pub trials: usize,
}

struct Bisection {
    tau: f64,
    ratio: f64,
    /// Ratios at the final bracket ends, lower first.
    bracket: [f64; 2],
}

struct Search<'a, S> {
    model: &'a Transformer<S>,
    layout: &'a FrameLayout,
    prompt: &'a [usize],
    mask: Option<&'a AttentionMask>,
    trials: usize,
}

impl<S: Scalar> Search<'_, S> {
    /// Overall and per-layer replay ratio under `policy`.
    fn measure(&mut self, policy: &ReplayPolicy) -> Result<(f64, Vec<f64>)> {
        self.trials += 1;
        let tr = self.model.decode(
            self.layout,
            self.prompt,
            Some(policy),
            self.mask,
            &DecodeOptions::default(),
        )?;
        let per_layer = (0..self.model.config().layers)
            .map(|l| tr.stats.layer_ratio(l))
            .collect();
        Ok((tr.stats.ratio(), per_layer))
    }

    /// Bisects a scalar threshold so that `ratio_of(policy_at(τ))` hits `target`.
    fn bisect(
        &mut self,
        target: f64,
        settings: &CalibrationSettings,
        mut lo: f64,
        mut hi: f64,
        policy_at: impl Fn(f64) -> ReplayPolicy,
        ratio_of: impl Fn(&(f64, Vec<f64>)) -> f64,
    ) -> Result<Bisection> {
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |tau: f64, r: f64| {
            if best.is_none_or(|(_, b)| (r - target).abs() < (b - target).abs()) {
                best = Some((tau, r));
            }
        };
        let mut r_lo = ratio_of(&self.measure(&policy_at(lo))?);
        consider(lo, r_lo);
        let mut r_hi = ratio_of(&self.measure(&policy_at(hi))?);
        consider(hi, r_hi);
        for _ in 0..settings.max_iters {
            let mid = 0.5 * (lo + hi);
            let r = ratio_of(&self.measure(&policy_at(mid))?);
            consider(mid, r);
            if (r - target).abs() <= settings.tolerance / 4.0 {
                break;
            }
            if r > target {
                (lo, r_lo) = (mid, r);
            } else {
                (hi, r_hi) = (mid, r);
            }
        }
        let (tau, ratio) = best.expect("at least one trial");
        Ok(Bisection {
            tau,
            ratio,
            bracket: [r_hi, r_lo],
        })
    }
}

/// Searches for a policy whose measured replay ratio is within tolerance of `target`.
///
/// Consistent mode bisects one shared threshold. Inconsistent mode starts from the
/// consistent solution and bisects each layer's threshold in turn so that every layer
/// reaches the same ratio. When even `tau_floor` replays less than the target the
/// floor policy is returned with `saturated` set.
pub fn calibrate_threshold<S: Scalar>(
    model: &Transformer<S>,
    layout: &FrameLayout,
    prompt: &[usize],
    target: f64,
    mode: ThresholdMode,
    mask: Option<&AttentionMask>,
    settings: &CalibrationSettings,
) -> Result<CalibrationResult> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Input(format!(
            "target ratio {target} outside [0, 1)"
        )));
    }
    if !(settings.tau_floor < settings.tau_ceiling) {
        return Err(Error::Config("tau_floor must be below tau_ceiling".into()));
    }
    let layers = model.config().layers;
    let mut search = Search {
        model,
        layout,
        prompt,
        mask,
        trials: 0,
    };

    let finish =
        |search: &mut Search<S>, policy: ReplayPolicy, saturated: bool, gap: Option<[f64; 2]>| {
            let (achieved, per_layer) = search.measure(&policy)?;
            Ok(CalibrationResult {
                policy,
                target,
                achieved,
                per_layer,
                saturated,
                gap,
                trials: search.trials,
            })
        };

    if target == 0.0 {
        let policy = match mode {
            ThresholdMode::Consistent => ReplayPolicy::never(),
            ThresholdMode::Inconsistent => ReplayPolicy::Inconsistent {
                taus: vec![f64::INFINITY; layers],
            },
        };
        return finish(&mut search, policy, false, None);
    }

    let floor = ReplayPolicy::consistent(settings.tau_floor);
    let (ceiling_ratio, _) = search.measure(&floor)?;
    if ceiling_ratio < target - settings.tolerance {
        let policy = match mode {
            ThresholdMode::Consistent => floor,
            ThresholdMode::Inconsistent => ReplayPolicy::Inconsistent {
                taus: vec![settings.tau_floor; layers],
            },
        };
        return finish(&mut search, policy, true, None);
    }

    let b = search.bisect(
        target,
        settings,
        settings.tau_floor,
        settings.tau_ceiling,
        ReplayPolicy::consistent,
        |m| m.0,
    )?;
    if mode == ThresholdMode::Consistent {
        let jumped = (b.ratio - target).abs() > settings.tolerance;
        return finish(
            &mut search,
            ReplayPolicy::consistent(b.tau),
            false,
            jumped.then_some(b.bracket),
        );
    }

    let mut taus = vec![b.tau; layers];
    for _ in 0..settings.sweeps {
        for layer in 0..layers {
            let base = taus.clone();
            let t = search.bisect(
                target,
                settings,
                settings.tau_floor,
                settings.tau_ceiling,
                |x| {
                    let mut v = base.clone();
                    v[layer] = x;
                    ReplayPolicy::Inconsistent { taus: v }
                },
                |m| m.1[layer],
            )?;
            taus[layer] = t.tau;
        }
    }
    finish(
        &mut search,
        ReplayPolicy::Inconsistent { taus },
        false,
        None,
    )
}
