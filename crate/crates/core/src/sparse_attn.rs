//! Sink + local-window causal attention mask.
//!
//! Position `j` attends to the first `sink_size` positions and to the most recent
//! `local_size` positions, clipped to the causal prefix `[0, j]`. Keys outside the
//! window stay in the KV cache; only the attention sum is restricted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionMask {
    pub sink_size: usize,
    pub local_size: usize,
}

impl AttentionMask {
    pub fn new(sink_size: usize, local_size: usize) -> Result<Self> {
        let m = Self {
            sink_size,
            local_size,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_size == 0 {
            return Err(Error::Config("local_size must be at least 1".into()));
        }
        Ok(())
    }

    /// First position of the local window for query position `j`.
    fn local_start(&self, j: usize) -> usize {
        (j + 1).saturating_sub(self.local_size)
    }

    /// Number of visible keys for query position `j`.
    pub fn visible_count(&self, j: usize) -> usize {
        let start = self.local_start(j);
        let sink = self.sink_size.min(j + 1);
        if sink >= start {
            j + 1
        } else {
            sink + (j + 1 - start)
        }
    }

    pub fn is_visible(&self, j: usize, key: usize) -> bool {
        key <= j && (key < self.sink_size || key >= self.local_start(j))
    }

    /// True when the mask hides nothing for query position `j`.
    pub fn covers(&self, j: usize) -> bool {
        self.visible_count(j) == j + 1
    }
}

/// Visible key positions for query position `j`, ascending. Always contains `j`.
pub fn allowed_positions(j: usize, mask: Option<&AttentionMask>) -> Vec<usize> {
    match mask {
        None => (0..=j).collect(),
        Some(m) => {
            let start = m.local_start(j);
            let sink_end = m.sink_size.min(j + 1);
            if sink_end >= start {
                (0..=j).collect()
            } else {
                (0..sink_end).chain(start..=j).collect()
            }
        }
    }
}

/// Visible key count for query position `j` (`j + 1` without a mask).
pub fn context_len(j: usize, mask: Option<&AttentionMask>) -> usize {
    mask.map_or(j + 1, |m| m.visible_count(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn local_one_without_sink_is_self() {
        let m = AttentionMask::new(0, 1).unwrap();
        assert_eq!(allowed_positions(7, Some(&m)), vec![7]);
    }

    #[test]
    fn sink_covers_short_prefix() {
        let m = AttentionMask::new(8, 2).unwrap();
        assert_eq!(allowed_positions(5, Some(&m)), (0..=5).collect::<Vec<_>>());
    }

    #[test]
    fn hand_enumerated_case() {
        let m = AttentionMask::new(4, 3).unwrap();
        assert_eq!(allowed_positions(10, Some(&m)), vec![0, 1, 2, 3, 8, 9, 10]);
    }

    #[test]
    fn zero_local_is_rejected() {
        assert!(AttentionMask::new(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn allowed_set_is_causal_and_contains_self(j in 0usize..300, sink in 0usize..40, local in 1usize..60) {
            let m = AttentionMask { sink_size: sink, local_size: local };
            let a = allowed_positions(j, Some(&m));
            prop_assert!(a.contains(&j));
            prop_assert!(a.iter().all(|p| *p <= j));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(a.len(), m.visible_count(j));
            // brute-force membership
            let brute: Vec<usize> = (0..=j).filter(|k| *k < sink || *k + local > j).collect();
            prop_assert_eq!(&a, &brute);
            for k in 0..=j {
                prop_assert_eq!(m.is_visible(j, k), brute.contains(&k));
            }
        }
    }
}
