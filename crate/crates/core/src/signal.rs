//! Adaptive patch planning for time series of any length.

use crate::error::{Error, Result};

/// Non-overlapping patch layout for a signal of `len` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlan {
    pub len: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// `⌈len / patch_size⌉`; a trailing partial patch is kept.
    pub n_frames: usize,
}

impl PatchPlan {
    /// Half-open sample ranges of each frame.
    pub fn frames(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_frames).map(move |f| {
            let start = f * self.stride;
            (start, (start + self.patch_size).min(self.len))
        })
    }
}

pub const PATCH_CSV_HEADER: &str = "len,rate,patch_size,stride,n_frames";

/// Samples per ~10 ms at `rate` Hz, at least 1.
pub fn patch_granularity(rate: f64) -> usize {
    ((rate / 100.0).round() as usize).max(1)
}

/// Picks a patch size so the frame count stays at or below `f_max`.
///
/// Signals shorter than `f_min` keep one sample per frame. Otherwise the patch
/// is `⌈len / f_max⌉` rounded up to a multiple of [`patch_granularity`].
pub fn plan_patches(len: usize, rate: f64, f_min: usize, f_max: usize) -> Result<PatchPlan> {
    if len == 0 {
        return Err(Error::InvalidConfig("signal length must be at least 1".into()));
    }
    if f_min == 0 || f_min > f_max {
        return Err(Error::InvalidConfig(format!("need 1 <= f_min <= f_max, got {f_min}, {f_max}")));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidConfig(format!("sampling rate must be positive, got {rate}")));
    }
    let patch_size = if len < f_min {
        1
    } else {
        let g = patch_granularity(rate);
        len.div_ceil(f_max).max(1).div_ceil(g) * g
    };
    Ok(PatchPlan { len, patch_size, stride: patch_size, n_frames: len.div_ceil(patch_size) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_signal() {
        let plan = plan_patches(10, 100.0, 16, 4096).unwrap();
        assert_eq!((plan.patch_size, plan.n_frames), (1, 10));
        let plan = plan_patches(10, 100.0, 1, 4096).unwrap();
        assert_eq!((plan.patch_size, plan.n_frames), (1, 10));
    }

    #[test]
    fn long_signal_bounded() {
        let plan = plan_patches(1_000_000, 100.0, 1, 4096).unwrap();
        assert_eq!(plan.patch_size, 245);
        assert_eq!(plan.n_frames, 4082);
        assert!(plan.n_frames <= 4096);
    }

    #[test]
    fn granularity_rounds_up() {
        let plan = plan_patches(1_000_000, 16_000.0, 1, 4096).unwrap();
        assert_eq!(plan.patch_size, 320);
        assert_eq!(plan.n_frames, 3125);
    }

    #[test]
    fn frames_tile() {
        let plan = plan_patches(1001, 100.0, 1, 10).unwrap();
        let frames: Vec<_> = plan.frames().collect();
        assert_eq!(frames.first(), Some(&(0, 101)));
        assert_eq!(frames.last(), Some(&(909, 1001)));
        assert_eq!(frames.len(), plan.n_frames);
    }

    #[test]
    fn invalid_bounds() {
        assert!(plan_patches(0, 100.0, 1, 10).is_err());
        assert!(plan_patches(10, 100.0, 0, 10).is_err());
        assert!(plan_patches(10, 100.0, 11, 10).is_err());
        assert!(plan_patches(10, 0.0, 1, 10).is_err());
    }
}
