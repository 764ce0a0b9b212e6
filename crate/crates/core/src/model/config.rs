use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions and initialization of the toy decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    /// MLP intermediate size.
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Correlation between the query and key projections at init.
    ///
    /// `W_K = ρ·W_Q + sqrt(1 − ρ²)·N`. With independent projections the temporal score
    /// carries no information about token similarity, so the default ties them.
    pub qk_tie: f64,
    /// Add sinusoidal position encodings to the token embeddings.
    pub positional: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_ff: 176,
            heads: 4,
            layers: 8,
            vocab: 512,
            seed: 42,
            qk_tie: 0.9,
            positional: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Standard deviation of every initial weight: `0.02 / sqrt(L)`.
    pub fn init_scale(&self) -> f64 {
        0.02 / (self.layers as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("layers", self.layers),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.qk_tie) {
            return Err(Error::Config(format!(
                "qk_tie {} outside [0, 1]",
                self.qk_tie
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Temporal-spatial token grid: `frames` frames of `tokens_per_frame` tokens,
/// generated after a prompt of `prefill_len` tokens.
///
/// Generated tokens are flattened as `j = (t − 1)·N + i` with 1-based frame `t`
/// and 0-based spatial slot `i`; the aligned predecessor is `j − N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameLayout {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub prefill_len: usize,
}

impl Default for FrameLayout {
    fn default() -> Self {
        Self {
            frames: 8,
            tokens_per_frame: 16,
            prefill_len: 16,
        }
    }
}

/// Frame coordinates of a generated token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPos {
    /// 1-based frame index.
    pub t: usize,
    /// 0-based spatial slot.
    pub i: usize,
}

impl FrameLayout {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.tokens_per_frame == 0 {
            return Err(Error::Config(
                "frames and tokens_per_frame must be at least 1".into(),
            ));
        }
        if self.prefill_len == 0 {
            return Err(Error::Config("prefill_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of generated tokens, `T·N`.
    pub fn video_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    /// Prompt plus video.
    pub fn total_len(&self) -> usize {
        self.prefill_len + self.video_len()
    }

    /// Token-layer evaluations per layer that may replay: every slot of frames 2..=T.
    pub fn eligible_per_layer(&self) -> usize {
        (self.frames - 1) * self.tokens_per_frame
    }

    pub fn grid(&self, j: usize) -> GridPos {
        GridPos {
            t: j / self.tokens_per_frame + 1,
            i: j % self.tokens_per_frame,
        }
    }

    pub fn flat(&self, g: GridPos) -> usize {
        (g.t - 1) * self.tokens_per_frame + g.i
    }

    /// Flattened index of the aligned token in the previous frame, if any.
    pub fn aligned(&self, j: usize) -> Option<usize> {
        j.checked_sub(self.tokens_per_frame)
    }

    /// Absolute sequence position of generated token `j`.
    pub fn position(&self, j: usize) -> usize {
        self.prefill_len + j
    }

    /// Generated index of an absolute sequence position, if it lies in the video.
    pub fn generated_index(&self, pos: usize) -> Option<usize> {
        pos.checked_sub(self.prefill_len)
            .filter(|j| *j < self.video_len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_are_valid() {
        ModelConfig::default().validate().unwrap();
        FrameLayout::default().validate().unwrap();
        assert_eq!(ModelConfig::default().head_dim(), 16);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flattened_indexing() {
        let lay = FrameLayout {
            frames: 4,
            tokens_per_frame: 5,
            prefill_len: 3,
        };
        for j in 0..lay.video_len() {
            let g = lay.grid(j);
            assert_eq!(lay.flat(g), j);
            match lay.aligned(j) {
                Some(prev) => {
                    assert!(g.t >= 2);
                    assert_eq!(lay.grid(prev), GridPos { t: g.t - 1, i: g.i });
                }
                None => assert_eq!(g.t, 1),
            }
        }
        assert_eq!(lay.eligible_per_layer(), 15);
        assert_eq!(lay.generated_index(2), None);
        assert_eq!(lay.generated_index(3), Some(0));
        assert_eq!(lay.generated_index(23), None);
    }
}
