//! Masked flow-matching training: path interpolation, the masked loss,
//! stochastic condition masking, the vector field estimator, and the loop.

mod gradsuite;
mod model;
mod train;

use alloc::format;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::fusion::Modalities;
use crate::numcore::{AdamConfig, Grid};
use crate::rng::Rng;

pub use gradsuite::{grad_check_suite, GradCheckRow, FD_STEP, FD_TOLERANCE};
pub use model::{Estimator, EstimatorConfig, EstimatorInputs, ModelConfig, SyncVoiceModel};
pub use train::{batch_gradients, train, PreparedSample, TrainEvent, TrainItem, TrainObserver, TrainReport};

/// How the speaker reaches the estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMode {
    ContextOnly,
    SpkembOnly,
    Both,
    None,
}

impl SpeakerMode {
    pub fn uses_context(self) -> bool {
        matches!(self, SpeakerMode::ContextOnly | SpeakerMode::Both)
    }

    pub fn uses_embedding(self) -> bool {
        matches!(self, SpeakerMode::SpkembOnly | SpeakerMode::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionFlags {
    pub use_text: bool,
    pub use_face: bool,
    pub use_lip: bool,
    pub speaker_mode: SpeakerMode,
}

impl ConditionFlags {
    pub const ALL_WITH_BOTH: ConditionFlags = ConditionFlags {
        use_text: true,
        use_face: true,
        use_lip: true,
        speaker_mode: SpeakerMode::Both,
    };

    pub fn modalities(self) -> Modalities {
        Modalities {
            text: self.use_text,
            face: self.use_face,
            lip: self.use_lip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub p_spk_only: f64,
    pub p_ctx_only: f64,
    pub p_drop_text: f64,
    pub p_drop_face: f64,
    pub p_drop_lip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training window in mel frames; longer utterances are cropped to a
    /// random window of this length. 0 disables cropping.
    pub crop_frames: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            p_spk_only: 0.8,
            p_ctx_only: 0.2,
            p_drop_text: 0.2,
            p_drop_face: 0.6,
            p_drop_lip: 0.6,
            steps: 2000,
            batch_size: 4,
            seed: 7,
            crop_frames: 64,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_spk_only", self.p_spk_only),
            ("p_ctx_only", self.p_ctx_only),
            ("p_drop_text", self.p_drop_text),
            ("p_drop_face", self.p_drop_face),
            ("p_drop_lip", self.p_drop_lip),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if (self.p_spk_only + self.p_ctx_only - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "p_spk_only + p_ctx_only must equal 1, got {}",
                self.p_spk_only + self.p_ctx_only
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.crop_frames != 0 && self.crop_frames < 8 {
            return Err(Error::Config(format!(
                "crop window {} is below 8 frames",
                self.crop_frames
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// `(1 − t)·x0 + t·x1`
pub fn interpolate_path(x0: &Grid, x1: &Grid, t: f64) -> Result<Grid> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("path time {t} outside [0, 1]")));
    }
    if x0.shape() != x1.shape() {
        return Err(dim_err("interpolate_path", x0.shape(), x1.shape()));
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FmLoss {
    pub value: f64,
    pub masked_elements: usize,
}

impl FmLoss {
    /// An empty mask carries no training signal.
    pub fn is_degenerate(&self) -> bool {
        self.masked_elements == 0
    }
}

/// Mean over masked elements of `(pred − (x1 − x0))²`. `mask` is a grid of
/// 0/1 values with the same shape.
pub fn fm_loss(pred: &Grid, x1: &Grid, x0: &Grid, mask: &Grid) -> Result<FmLoss> {
    for g in [x1, x0, mask] {
        if g.shape() != pred.shape() {
            return Err(dim_err("fm_loss", pred.shape(), g.shape()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (((p, a), b), m) in pred.data().iter().zip(x1.data()).zip(x0.data()).zip(mask.data()) {
        if *m != 0.0 {
            let d = p - (a - b);
            sum += d * d;
            count += 1;
        }
    }
    Ok(FmLoss {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        masked_elements: count,
    })
}

/// Four independent draws, in a fixed order: speaker mode, text, face, lip.
pub fn sample_condition_flags(rng: &mut Rng, cfg: &TrainConfig) -> ConditionFlags {
    let speaker_mode = if rng.random::<f64>() < cfg.p_spk_only {
        SpeakerMode::SpkembOnly
    } else {
        SpeakerMode::ContextOnly
    };
    let use_text = rng.random::<f64>() >= cfg.p_drop_text;
    let use_face = rng.random::<f64>() >= cfg.p_drop_face;
    let use_lip = rng.random::<f64>() >= cfg.p_drop_lip;
    ConditionFlags {
        use_text,
        use_face,
        use_lip,
        speaker_mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::nn::normal_grid;
    use crate::rng::rng_from_seed;

    #[test]
    fn path_endpoints_and_midpoint() {
        let x0 = normal_grid(&[3, 4], 1.0, &mut rng_from_seed(1));
        let x1 = normal_grid(&[3, 4], 1.0, &mut rng_from_seed(2));
        assert_eq!(interpolate_path(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate_path(&x0, &x1, 1.0).unwrap(), x1);
        let mid = interpolate_path(&Grid::scalar(0.0), &Grid::scalar(2.0), 0.5).unwrap();
        assert_eq!(mid.data(), &[1.0]);
        assert!(interpolate_path(&x0, &x1, 1.5).is_err());
        assert!(interpolate_path(&x0, &x1, -0.1).is_err());
    }

    #[test]
    fn path_commutes_with_shift() {
        let x0 = normal_grid(&[2, 5], 1.0, &mut rng_from_seed(3));
        let x1 = normal_grid(&[2, 5], 1.0, &mut rng_from_seed(4));
        let a = 0.75;
        let shifted = interpolate_path(&x0.map(|v| v + a), &x1.map(|v| v + a), 0.3).unwrap();
        let base = interpolate_path(&x0, &x1, 0.3).unwrap().map(|v| v + a);
        assert!(shifted.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let one = Grid::scalar(1.0);
        let l = fm_loss(&Grid::scalar(0.0), &Grid::scalar(2.0), &one, &one).unwrap();
        assert_eq!(l.value, 1.0);
        let x0 = normal_grid(&[4, 6], 1.0, &mut rng_from_seed(5));
        let x1 = normal_grid(&[4, 6], 1.0, &mut rng_from_seed(6));
        let exact = x1.zip_map(&x0, |a, b| a - b).unwrap();
        let mask = Grid::filled(&[4, 6], 1.0);
        assert!(fm_loss(&exact, &x1, &x0, &mask).unwrap().value < 1e-24);
        let none = fm_loss(&x0, &x1, &x0, &Grid::zeros(&[4, 6])).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.is_degenerate());
    }

    #[test]
    fn flag_frequencies() {
        let cfg = TrainConfig::default();
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let f = sample_condition_flags(&mut rng, &cfg);
            counts[0] += (f.speaker_mode == SpeakerMode::SpkembOnly) as usize;
            counts[1] += !f.use_text as usize;
            counts[2] += !f.use_face as usize;
            counts[3] += !f.use_lip as usize;
        }
        let expect = [0.8, 0.2, 0.6, 0.6];
        for (c, e) in counts.iter().zip(expect) {
            assert!((*c as f64 / n as f64 - e).abs() < 0.005);
        }
    }

    #[test]
    fn certain_speaker_embedding() {
        let cfg = TrainConfig {
            p_spk_only: 1.0,
            p_ctx_only: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = rng_from_seed(2);
        assert!((0..1000).all(|_| sample_condition_flags(&mut rng, &cfg).speaker_mode == SpeakerMode::SpkembOnly));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            p_ctx_only: 0.3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            p_drop_lip: 1.2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
