use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::Grid;
use crate::rng::Rng;

pub const MIN_MASK_FRACTION: f64 = 0.7;
pub const MAX_MASK_FRACTION: f64 = 1.0;

/// Frame-level generation mask: `true` frames are generated, `false` frames
/// are observed context. Every bin of a frame shares the frame's flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    frames: Vec<bool>,
}

impl BinaryMask {
    pub fn from_frames(frames: Vec<bool>) -> Self {
        BinaryMask { frames }
    }

    pub fn all(frames: usize, masked: bool) -> Self {
        BinaryMask {
            frames: vec![masked; frames],
        }
    }

    pub fn frames(&self) -> &[bool] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.frames.iter().filter(|&&m| m).count()
    }

    /// Expanded `bins × frames` grid of 0/1 values.
    pub fn to_grid(&self, bins: usize) -> Grid {
        let t = self.frames.len();
        Grid::from_fn(&[bins, t], |i| f64::from(u8::from(self.frames[i % t])))
    }

    /// Expanded `frames × bins` grid of 0/1 values.
    pub fn to_frames_major(&self, bins: usize) -> Grid {
        Grid::from_fn(&[self.frames.len(), bins], |i| {
            f64::from(u8::from(self.frames[i / bins]))
        })
    }
}

/// Smallest span allowed for `t` frames: `ceil(0.7 t)`.
fn min_span(t: usize) -> usize {
    (7 * t).div_ceil(10)
}

/// A contiguous span of `round(fraction × t)` frames (clamped to the valid
/// range) starting at `start`.
pub fn mask_from_span(t: usize, fraction: f64, start: usize) -> Result<BinaryMask> {
    if t < 2 {
        return Err(Error::TooShort {
            what: "sample_mask",
            needed: 2,
            got: t,
        });
    }
    if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&fraction) {
        return Err(Error::Domain(alloc::format!(
            "mask fraction {fraction} outside [0.7, 1.0]"
        )));
    }
    let span = (crate::math::round(fraction * t as f64) as usize).clamp(min_span(t), t);
    if start + span > t {
        return Err(Error::Length(alloc::format!(
            "mask span {start}+{span} exceeds {t} frames"
        )));
    }
    let mut frames = vec![false; t];
    frames[start..start + span].iter_mut().for_each(|m| *m = true);
    Ok(BinaryMask { frames })
}

/// One contiguous to-generate span covering a uniform fraction in `[0.7, 1.0]`
/// of the frames, at a uniform valid start.
pub fn sample_mask(t: usize, rng: &mut Rng) -> Result<BinaryMask> {
    if t < 2 {
        return Err(Error::TooShort {
            what: "sample_mask",
            needed: 2,
            got: t,
        });
    }
    let fraction = rng.random_range(MIN_MASK_FRACTION..=MAX_MASK_FRACTION);
    let span = (crate::math::round(fraction * t as f64) as usize).clamp(min_span(t), t);
    let start = rng.random_range(0..=t - span);
    let mut frames = vec![false; t];
    frames[start..start + span].iter_mut().for_each(|m| *m = true);
    Ok(BinaryMask { frames })
}
