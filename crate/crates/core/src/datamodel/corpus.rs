//! Seeded synthetic audiovisual corpus.
//!
//! Each sample's mel grid is the sum of a per-token spectral template, a
//! per-speaker spectral signature (tilt plus a pitch-band bump), a frame-energy
//! term driven by a smooth latent prosody contour, and a little noise. Lip
//! channels are derived from the resulting frame-energy envelope and face
//! channels from the prosody contour, so audio-visual synchronization can be
//! measured exactly. All stored values are rounded to f32 so the binary corpus
//! format round-trips bit-exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    mel_frame_rate, mel_frames_for_duration, video_frames_for_mel, MelGrid, Sample, TextSequence, VisualTrack,
    FACE_CHANNELS, LIP_CHANNELS, MEL_BINS, VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::math::{exp, mean, resample_linear, round, sin, sqrt, tanh, PI};
use crate::numcore::Grid;
use crate::rng::{derived_rng, tag};

/// Every seventh sample id is held out.
pub const TEST_STRIDE: u64 = 7;

const ENERGY_GAIN: f64 = 0.7;
const NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub speakers: u32,
    pub samples_per_speaker: u32,
    pub min_duration: f64,
    pub max_duration: f64,
    pub tokens_per_second: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            speakers: 8,
            samples_per_speaker: 28,
            min_duration: 0.8,
            max_duration: 2.0,
            tokens_per_second: 6.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.samples_per_speaker == 0 {
            return Err(Error::Config(
                "corpus needs at least one speaker and one sample per speaker".into(),
            ));
        }
        if !(self.min_duration > 0.0) || !(self.max_duration >= self.min_duration) || !self.max_duration.is_finite() {
            return Err(Error::Config(format!(
                "invalid duration range [{}, {}]",
                self.min_duration, self.max_duration
            )));
        }
        if mel_frames_for_duration(self.min_duration) < 8 {
            return Err(Error::Config(format!(
                "minimum duration {} s gives fewer than 8 mel frames",
                self.min_duration
            )));
        }
        if !(self.tokens_per_second > 0.0) {
            return Err(Error::Config("tokens_per_second must be positive".into()));
        }
        Ok(())
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn zscore(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64;
    let s = sqrt(var);
    if s == 0.0 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|v| (v - m) / s).collect()
}

fn lagged(xs: &[f64], lag: isize) -> Vec<f64> {
    let n = xs.len() as isize;
    (0..n).map(|i| xs[(i - lag).clamp(0, n - 1) as usize]).collect()
}

fn diff(xs: &[f64]) -> Vec<f64> {
    (0..xs.len())
        .map(|i| if i == 0 { 0.0 } else { xs[i] - xs[i - 1] })
        .collect()
}

fn bump(d: usize, center: f64, width: f64) -> f64 {
    let z = (d as f64 - center) / width;
    exp(-0.5 * z * z)
}

/// Per-frame mean over bins of a mel grid.
pub fn frame_energy_envelope(mel: &MelGrid) -> Vec<f64> {
    let (d, t) = (mel.bins(), mel.frames());
    let data = mel.grid().data();
    (0..t)
        .map(|f| (0..d).map(|b| data[b * t + f]).sum::<f64>() / d as f64)
        .collect()
}

/// Token index for each of `frames` frames: every token gets
/// `frames / n` frames and the last token also takes the remainder.
pub fn upsample_tokens(tokens: &[u16], frames: usize) -> Result<Vec<usize>> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Empty("upsample_tokens"));
    }
    if frames < n {
        return Err(Error::Length(format!("{frames} frames cannot hold {n} tokens")));
    }
    let per = frames / n;
    Ok((0..frames).map(|f| tokens[(f / per).min(n - 1)] as usize).collect())
}

fn token_templates(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = derived_rng(seed, tag::CORPUS, 0);
    (0..VOCAB_SIZE)
        .map(|_| {
            let mut shape = vec![0.0; MEL_BINS];
            for _ in 0..3 {
                let amp = rng.random_range(0.6..1.4);
                let center = rng.random_range(0.0..(MEL_BINS - 1) as f64);
                let width = rng.random_range(3.0..9.0);
                for (d, v) in shape.iter_mut().enumerate() {
                    *v += amp * bump(d, center, width);
                }
            }
            let m = mean(&shape);
            let offset: f64 = 0.1 * rng.sample::<f64, _>(StandardNormal);
            shape.iter().map(|v| v - m + offset).collect()
        })
        .collect()
}

fn speaker_signature(seed: u64, speaker: u32) -> Vec<f64> {
    let mut rng = derived_rng(seed, tag::CORPUS, 1000 + u64::from(speaker));
    let tilt = rng.random_range(-1.0..1.0);
    let center = rng.random_range(10.0..90.0);
    let amp = rng.random_range(0.6..1.2);
    (0..MEL_BINS)
        .map(|d| tilt * (2.0 * d as f64 / (MEL_BINS - 1) as f64 - 1.0) + amp * bump(d, center, 6.0))
        .collect()
}

fn prosody_contour(frames: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let components = rng.random_range(2..=3);
    let parts: Vec<(f64, f64, f64)> = (0..components)
        .map(|_| {
            (
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let rate = mel_frame_rate();
    let raw: Vec<f64> = (0..frames)
        .map(|f| {
            let tau = f as f64 / rate;
            parts
                .iter()
                .map(|&(a, hz, phase)| a * sin(2.0 * PI * hz * tau + phase))
                .sum()
        })
        .collect();
    zscore(&raw)
}

fn channels_to_grid(channels: Vec<Vec<f64>>) -> Grid {
    let rows = channels.len();
    let cols = channels[0].len();
    let data: Vec<f64> = channels.into_iter().flatten().map(f32_round).collect();
    Grid::new(vec![rows, cols], data).expect("channel grid")
}

fn lip_channels(envelope: &[f64], video_frames: usize) -> Grid {
    let base = zscore(&resample_linear(envelope, video_frames));
    let d = diff(&base);
    let chans = vec![
        base.clone(),
        lagged(&base, 1),
        lagged(&base, 2),
        lagged(&base, 3),
        lagged(&base, -1),
        d.clone(),
        lagged(&d, 1),
        diff(&d),
    ];
    debug_assert_eq!(chans.len(), LIP_CHANNELS);
    channels_to_grid(chans)
}

fn face_channels(prosody: &[f64], video_frames: usize) -> Grid {
    let base = zscore(&resample_linear(prosody, video_frames));
    let smooth: Vec<f64> = (0..base.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(base.len() - 1);
            mean(&base[lo..=hi])
        })
        .collect();
    let chans = vec![
        base.clone(),
        diff(&base),
        lagged(&base, 1),
        lagged(&base, 2),
        base.iter().map(|&v| tanh(v)).collect(),
        lagged(&base, -1),
        smooth,
        base.iter().map(|v| -0.5 * v).collect(),
    ];
    debug_assert_eq!(chans.len(), FACE_CHANNELS);
    channels_to_grid(chans)
}

/// Deterministic corpus for `(config, seed)`; sample ids run from 0 and each
/// speaker owns a contiguous block of `samples_per_speaker` ids.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    let templates = token_templates(seed);
    let total = u64::from(config.speakers) * u64::from(config.samples_per_speaker);
    let mut samples = Vec::with_capacity(total as usize);
    for id in 0..total {
        let speaker = (id / u64::from(config.samples_per_speaker)) as u32;
        let signature = speaker_signature(seed, speaker);
        let mut rng = derived_rng(seed, tag::CORPUS, 10_000 + id);

        let duration = if config.max_duration > config.min_duration {
            rng.random_range(config.min_duration..config.max_duration)
        } else {
            config.min_duration
        };
        let frames = mel_frames_for_duration(duration);
        let video_frames = video_frames_for_mel(frames);
        let n_tokens = (round(duration * config.tokens_per_second) as usize).clamp(1, frames);
        let tokens: Vec<u16> = (0..n_tokens).map(|_| rng.random_range(0..VOCAB_SIZE as u16)).collect();
        let frame_tokens = upsample_tokens(&tokens, frames)?;
        let prosody: Vec<f64> = prosody_contour(frames, &mut rng).into_iter().map(f32_round).collect();

        let mut mel = vec![0.0; MEL_BINS * frames];
        for f in 0..frames {
            let tmpl = &templates[frame_tokens[f]];
            let energy = ENERGY_GAIN * prosody[f];
            for d in 0..MEL_BINS {
                let noise: f64 = rng.sample(StandardNormal);
                mel[d * frames + f] = f32_round(tmpl[d] + signature[d] + energy + NOISE_STD * noise);
            }
        }
        let mel = MelGrid::new(Grid::new(vec![MEL_BINS, frames], mel)?)?;
        let envelope = frame_energy_envelope(&mel);
        let visual = VisualTrack::new(
            face_channels(&prosody, video_frames),
            lip_channels(&envelope, video_frames),
        )?;
        samples.push(Sample {
            id,
            speaker_id: speaker,
            mel,
            visual,
            text: TextSequence::new(tokens)?,
            latent_prosody: prosody,
        });
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    All,
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?} (train|test|all)"))),
        }
    }
}

pub fn is_test_id(id: u64) -> bool {
    id % TEST_STRIDE == TEST_STRIDE - 1
}

pub fn split(corpus: &[Sample], which: Split) -> Vec<&Sample> {
    corpus
        .iter()
        .filter(|s| match which {
            Split::Train => !is_test_id(s.id),
            Split::Test => is_test_id(s.id),
            Split::All => true,
        })
        .collect()
}

/// A training-split utterance of the same speaker, other than `target`,
/// chosen deterministically from the target id.
pub fn reference_for<'a>(corpus: &'a [Sample], target: &Sample) -> Option<&'a Sample> {
    let candidates: Vec<&Sample> = corpus
        .iter()
        .filter(|s| s.speaker_id == target.speaker_id && s.id != target.id && !is_test_id(s.id))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[(target.id / TEST_STRIDE) as usize % candidates.len()])
}
