use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::datamodel::{align_visual, sample_mask, upsample_tokens, MelGrid, Sample};
use crate::error::{Error, Result};
use crate::fusion::FusionInputs;
use crate::numcore::{Adam, Gradients, Grid, Tape, Var};
use crate::rng::{derive_seed, rng_from_seed, tag, Rng};
use crate::speaker::extract_segment;

use super::{interpolate_path, sample_condition_flags, ConditionFlags, SyncVoiceModel, TrainConfig};

/// A corpus sample converted once to the frames-major layout the model uses.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub mel: MelGrid,
    /// `[T × D]`
    pub x1: Grid,
    pub frame_ids: Vec<usize>,
    /// `[T × F_face]`, on the mel time base
    pub face: Grid,
    /// `[T × F_lip]`, on the mel time base
    pub lip: Grid,
}

impl PreparedSample {
    pub fn new(sample: &Sample) -> Result<Self> {
        let frames = sample.mel.frames();
        let aligned = align_visual(&sample.visual, frames)?;
        Ok(PreparedSample {
            mel: sample.mel.clone(),
            x1: sample.mel.frames_major(),
            frame_ids: upsample_tokens(sample.text.tokens(), frames)?,
            face: aligned.face.transpose(),
            lip: aligned.lip.transpose(),
        })
    }

    pub fn frames(&self) -> usize {
        self.x1.rows()
    }
}

/// One drawn training example, already cropped.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub flags: ConditionFlags,
    pub t: f64,
    pub x0: Grid,
    pub x1: Grid,
    /// 1 on frames to generate, `[T × D]`
    pub mask: Grid,
    pub frame_ids: Vec<usize>,
    pub face: Grid,
    pub lip: Grid,
    /// Speaker-encoder input, present only when the flags use the embedding.
    pub segment: Option<MelGrid>,
}

impl TrainItem {
    /// Draw order: sample, t, flags, speaker segment, crop, mask, noise.
    pub fn draw(rng: &mut Rng, corpus: &[PreparedSample], cfg: &TrainConfig) -> Result<Self> {
        let src = &corpus[rng.random_range(0..corpus.len())];
        let t: f64 = rng.random();
        let flags = sample_condition_flags(rng, cfg);
        let segment = match flags.speaker_mode.uses_embedding() {
            true => Some(extract_segment(&src.mel, rng)?),
            false => None,
        };
        let frames = src.frames();
        let (start, len) = if cfg.crop_frames != 0 && frames > cfg.crop_frames {
            (rng.random_range(0..=frames - cfg.crop_frames), cfg.crop_frames)
        } else {
            (0, frames)
        };
        let bins = src.x1.cols();
        let mask = sample_mask(len, rng)?.to_frames_major(bins);
        let x0 = Grid::from_fn(&[len, bins], |_| rng.sample(StandardNormal));
        Ok(TrainItem {
            flags,
            t,
            x0,
            x1: src.x1.row_range(start, len)?,
            mask,
            frame_ids: src.frame_ids[start..start + len].to_vec(),
            face: src.face.row_range(start, len)?,
            lip: src.lip.row_range(start, len)?,
            segment,
        })
    }

    /// The masked flow-matching loss of this item on `tape`.
    pub fn loss(&self, model: &SyncVoiceModel, tape: &mut Tape<'_>) -> Result<Var> {
        let inputs = FusionInputs {
            frame_ids: &self.frame_ids,
            face: Some(&self.face),
            lip: Some(&self.lip),
        };
        let z = model.fusion.forward(tape, &inputs, self.flags.modalities())?;
        let x_t = tape.input(interpolate_path(&self.x0, &self.x1, self.t)?)?;
        let context = match self.flags.speaker_mode.uses_context() {
            true => self.x1.zip_map(&self.mask, |x, m| (1.0 - m) * x)?,
            false => Grid::zeros(self.x1.shape()),
        };
        let context = tape.input(context)?;
        let e_g = match &self.segment {
            Some(seg) if self.flags.speaker_mode.uses_embedding() => Some(model.speaker.forward(tape, seg)?),
            _ => None,
        };
        let v = model.estimator.forward(tape, x_t, context, z, e_g, self.t)?;
        let target = tape.input(self.x1.zip_map(&self.x0, |a, b| a - b)?)?;
        let mask = tape.input(self.mask.clone())?;
        Ok(tape.masked_mse(v, target, mask)?.0)
    }
}

/// Mean item loss and its gradients.
pub fn batch_gradients(model: &SyncVoiceModel, items: &[TrainItem]) -> Result<(f64, Gradients)> {
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut tape = Tape::new(&model.params);
    let mut total = items[0].loss(model, &mut tape)?;
    for item in &items[1..] {
        let l = item.loss(model, &mut tape)?;
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / items.len() as f64)?;
    let value = tape.value(mean).data()[0];
    Ok((value, tape.backward(mean)?))
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step {
        step: usize,
        loss: f64,
    },
    /// Emitted every `checkpoint_every` steps and after the last step; `step`
    /// counts completed updates.
    Checkpoint {
        step: usize,
        model: &'a SyncVoiceModel,
    },
}

pub trait TrainObserver {
    fn observe(&mut self, event: TrainEvent<'_>) -> Result<()>;
}

impl TrainObserver for () {
    fn observe(&mut self, _: TrainEvent<'_>) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(TrainEvent<'_>) -> Result<()>> TrainObserver for F {
    fn observe(&mut self, event: TrainEvent<'_>) -> Result<()> {
        self(event)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of `losses[range]`, clamped to the trace.
    pub fn mean_loss(&self, start: usize, len: usize) -> f64 {
        let end = (start + len).min(self.losses.len());
        let start = start.min(end);
        let s = &self.losses[start..end];
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    }
}

/// Adam on the mean masked loss of `batch_size` freshly drawn items per step.
/// Each step's draws come from their own derived seed, so the trace does not
/// depend on anything but `cfg` and the model's initial state.
pub fn train(
    model: &mut SyncVoiceModel,
    samples: &[&Sample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let corpus = samples
        .iter()
        .map(|s| PreparedSample::new(s))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&model.params, cfg.adam());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch_seed = derive_seed(cfg.seed, tag::BATCH, step as u64);
        let mut rng = rng_from_seed(batch_seed);
        let items = (0..cfg.batch_size)
            .map(|_| TrainItem::draw(&mut rng, &corpus, cfg))
            .collect::<Result<Vec<_>>>()?;
        let non_finite = Error::NonFiniteLoss {
            step: step as u64,
            batch_seed,
        };
        let (loss, grads) = match batch_gradients(model, &items) {
            Ok(r) => r,
            Err(Error::Domain(_)) => return Err(non_finite),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(non_finite);
        }
        adam.step(&mut model.params, &grads)?;
        losses.push(loss);
        observer.observe(TrainEvent::Step { step, loss })?;
        let done = step + 1;
        if done == cfg.steps || (cfg.checkpoint_every != 0 && done % cfg.checkpoint_every == 0) {
            observer.observe(TrainEvent::Checkpoint { step: done, model })?;
        }
    }
    Ok(TrainReport { losses })
}
