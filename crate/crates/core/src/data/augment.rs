use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Matrix;

/// Time and feature masking policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub feature_masks: usize,
    pub max_feature_width: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            time_masks: 2,
            max_time_width: 3,
            feature_masks: 1,
            max_feature_width: 2,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            time_masks: 0,
            max_time_width: 0,
            feature_masks: 0,
            max_feature_width: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.time_masks == 0 && self.feature_masks == 0
    }
}

/// Width in `1..=max`, clamped so that at least one position survives.
fn sample_span<R: Rng + ?Sized>(extent: usize, max_width: usize, rng: &mut R) -> Option<(usize, usize)> {
    let cap = max_width.min(extent.saturating_sub(1));
    if cap == 0 {
        return None;
    }
    let width = rng.random_range(1..=cap);
    let start = rng.random_range(0..=extent - width);
    Some((start, width))
}

/// Draws up to `count` spans over `extent` positions, skipping any span that
/// would leave no position unmasked.
fn sample_mask<R: Rng + ?Sized>(extent: usize, count: usize, max_width: usize, rng: &mut R) -> Vec<bool> {
    let mut masked = vec![false; extent];
    let mut total = 0;
    for _ in 0..count {
        let Some((start, width)) = sample_span(extent, max_width, rng) else {
            break;
        };
        let newly = (start..start + width).filter(|&i| !masked[i]).count();
        if total + newly >= extent {
            continue;
        }
        masked[start..start + width].iter_mut().for_each(|m| *m = true);
        total += newly;
    }
    masked
}

/// Returns a masked copy of `features` with zeroed time spans and feature
/// bands. Neither kind of mask ever covers its whole axis.
pub fn spec_augment<R: Rng + ?Sized>(features: &Matrix, policy: &AugmentPolicy, rng: &mut R) -> Matrix {
    let mut out = features.clone();
    let (t, f) = features.shape();
    let time = sample_mask(t, policy.time_masks, policy.max_time_width, rng);
    let band = sample_mask(f, policy.feature_masks, policy.max_feature_width, rng);
    for (i, &tm) in time.iter().enumerate() {
        for (v, &fm) in out.row_mut(i).iter_mut().zip(&band) {
            if tm || fm {
                *v = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn ones(t: usize, f: usize) -> Matrix {
        Matrix::filled(t, f, 1.0)
    }

    #[test]
    fn zero_counts_is_identity() {
        let mut rng = substream(1, "aug");
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(spec_augment(&x, &AugmentPolicy::none(), &mut rng), x);
    }

    #[test]
    fn one_mask_each_gives_one_span_and_one_band() {
        let policy = AugmentPolicy {
            time_masks: 1,
            max_time_width: 3,
            feature_masks: 1,
            max_feature_width: 2,
        };
        for seed in 0..50 {
            let mut rng = substream(seed, "aug");
            let x = ones(10, 6);
            let y = spec_augment(&x, &policy, &mut rng);
            assert_eq!(x, ones(10, 6));
            let zero_rows: Vec<usize> = (0..10).filter(|&i| y.row(i).iter().all(|&v| v == 0.0)).collect();
            let zero_cols: Vec<usize> = (0..6).filter(|&j| (0..10).all(|i| y[(i, j)] == 0.0)).collect();
            assert!(!zero_rows.is_empty() && zero_rows.len() <= 3);
            assert!(zero_rows.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(!zero_cols.is_empty() && zero_cols.len() <= 2);
            assert!(zero_cols.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    #[test]
    fn masked_fraction_respects_bound() {
        let policy = AugmentPolicy {
            time_masks: 2,
            max_time_width: 3,
            feature_masks: 0,
            max_feature_width: 0,
        };
        let t = 12;
        let bound = (policy.max_time_width * policy.time_masks) as f64 / t as f64;
        let mut rng = substream(7, "aug");
        for _ in 0..1000 {
            let y = spec_augment(&ones(t, 4), &policy, &mut rng);
            let masked = (0..t).filter(|&i| y.row(i).iter().all(|&v| v == 0.0)).count();
            assert!(masked as f64 / t as f64 <= bound);
        }
    }

    #[test]
    fn masks_never_cover_all_frames() {
        let policy = AugmentPolicy {
            time_masks: 10,
            max_time_width: 10,
            feature_masks: 10,
            max_feature_width: 10,
        };
        let mut rng = substream(9, "aug");
        for t in 2..8 {
            for _ in 0..200 {
                let y = spec_augment(&ones(t, 3), &policy, &mut rng);
                assert!((0..t).any(|i| y.row(i).iter().any(|&v| v != 0.0)));
            }
        }
    }
}
