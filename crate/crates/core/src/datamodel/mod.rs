//! Mel, visual, and text types; visual-to-mel alignment; training masks; and
//! the seeded synthetic corpus.

mod align;
mod corpus;
mod mask;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use align::{align_visual, AlignedVisual};
pub use corpus::{
    frame_energy_envelope, generate_corpus, is_test_id, reference_for, split, upsample_tokens, CorpusConfig, Split,
    TEST_STRIDE,
};
pub use mask::{mask_from_span, sample_mask, BinaryMask, MAX_MASK_FRACTION, MIN_MASK_FRACTION};

use crate::error::{Error, Result};
use crate::numcore::Grid;

pub const MEL_BINS: usize = 100;
pub const SAMPLE_RATE: u32 = 24_000;
pub const HOP_LENGTH: u32 = 256;
pub const VIDEO_FPS: f64 = 25.0;
pub const FACE_CHANNELS: usize = 8;
pub const LIP_CHANNELS: usize = 8;
pub const VOCAB_SIZE: usize = 32;

/// Mel frames per second (93.75).
pub fn mel_frame_rate() -> f64 {
    SAMPLE_RATE as f64 / HOP_LENGTH as f64
}

/// `floor(seconds × 24000 / 256)`
pub fn mel_frames_for_duration(seconds: f64) -> usize {
    crate::math::floor(seconds * SAMPLE_RATE as f64 / HOP_LENGTH as f64) as usize
}

/// Video frames covering the same span as `mel_frames`.
pub fn video_frames_for_mel(mel_frames: usize) -> usize {
    (crate::math::round(mel_frames as f64 * VIDEO_FPS / mel_frame_rate()) as usize).max(2)
}

/// A `bins × frames` spectrogram-like grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelGrid(Grid);

impl MelGrid {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.shape().len() != 2 {
            return Err(Error::Contract(format!("mel grid must be 2-D, got {:?}", grid.shape())));
        }
        Ok(MelGrid(grid))
    }

    pub fn zeros(bins: usize, frames: usize) -> Self {
        MelGrid(Grid::zeros(&[bins, frames]))
    }

    pub fn bins(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / mel_frame_rate()
    }

    /// Frames `[start, start + len)` as a new grid.
    pub fn frame_range(&self, start: usize, len: usize) -> Result<MelGrid> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::Length(format!(
                "frame range {start}+{len} outside {} frames",
                self.frames()
            )));
        }
        let (d, t) = (self.bins(), self.frames());
        let mut data = Vec::with_capacity(d * len);
        for b in 0..d {
            data.extend_from_slice(&self.0.data()[b * t + start..b * t + start + len]);
        }
        MelGrid::new(Grid::new(alloc::vec![d, len], data)?)
    }

    /// Frames laid out as rows: `[frames × bins]`.
    pub fn frames_major(&self) -> Grid {
        self.0.transpose()
    }
}

/// Per-frame face-action and lip-motion features at 25 fps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTrack {
    face: Grid,
    lip: Grid,
}

impl VisualTrack {
    pub fn new(face: Grid, lip: Grid) -> Result<Self> {
        if face.shape().len() != 2 || lip.shape().len() != 2 {
            return Err(Error::Contract("visual tracks must be [channels, frames]".into()));
        }
        if face.cols() != lip.cols() {
            return Err(crate::error::dim_err("VisualTrack", face.shape(), lip.shape()));
        }
        Ok(VisualTrack { face, lip })
    }

    pub fn face(&self) -> &Grid {
        &self.face
    }

    pub fn lip(&self) -> &Grid {
        &self.lip
    }

    pub fn frames(&self) -> usize {
        self.face.cols()
    }

    pub fn fps(&self) -> f64 {
        VIDEO_FPS
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / VIDEO_FPS
    }

    pub fn with_lip(&self, lip: Grid) -> Result<Self> {
        VisualTrack::new(self.face.clone(), lip)
    }

    pub fn with_face(&self, face: Grid) -> Result<Self> {
        VisualTrack::new(face, self.lip.clone())
    }
}

/// Token ids from the closed toy vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSequence(Vec<u16>);

impl TextSequence {
    pub fn new(tokens: Vec<u16>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("TextSequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Domain(format!(
                "token id {t} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        Ok(TextSequence(tokens))
    }

    pub fn tokens(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub speaker_id: u32,
    pub mel: MelGrid,
    pub visual: VisualTrack,
    pub text: TextSequence,
    /// Generator ground truth, one value per mel frame. Never fed to a model.
    pub latent_prosody: Vec<f64>,
}

impl Sample {
    /// Mel and visual durations must agree within one video frame.
    pub fn check_durations(&self) -> Result<()> {
        durations_agree(self.mel.frames(), self.visual.frames())
    }
}

pub fn durations_agree(mel_frames: usize, video_frames: usize) -> Result<()> {
    let gap = (mel_frames as f64 / mel_frame_rate() - video_frames as f64 / VIDEO_FPS).abs();
    if gap > 1.0 / VIDEO_FPS + 1e-12 {
        return Err(Error::Length(format!(
            "mel ({mel_frames} frames) and video ({video_frames} frames) differ by {gap:.3} s"
        )));
    }
    Ok(())
}
