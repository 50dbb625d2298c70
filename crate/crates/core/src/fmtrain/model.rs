use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{MelGrid, FACE_CHANNELS, LIP_CHANNELS, MEL_BINS, VOCAB_SIZE};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{FusionConfig, FusionInputs, FusionModule, Modalities};
use crate::numcore::nn::{run_stack, stack, timestep_features, AttentionBlock, BlockConfig, Init, LayerNorm, Linear};
use crate::numcore::{Grid, ParamEntry, ParamSet, Tape, Var};
use crate::rng::{derived_rng, tag, Rng};
use crate::speaker::{DualSpeakerEncoder, SpeakerConfig};

use super::ConditionFlags;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub fusion: FusionConfig,
    pub speaker: SpeakerConfig,
    pub estimator: EstimatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bins: MEL_BINS,
            fusion: FusionConfig {
                vocab: VOCAB_SIZE,
                text_width: 64,
                text_blocks: 2,
                face_channels: FACE_CHANNELS,
                lip_channels: LIP_CHANNELS,
                bottleneck: 16,
                heads: 4,
                ffn_mult: 2,
            },
            speaker: SpeakerConfig {
                mel_bins: MEL_BINS,
                width: 32,
                blocks: 6,
                kernel: 3,
                embedding_dim: 64,
                heads: 4,
                ffn_mult: 2,
            },
            estimator: EstimatorConfig {
                width: 128,
                blocks: 4,
                heads: 4,
                ffn_mult: 2,
                time_dim: 64,
            },
        }
    }
}

impl ModelConfig {
    /// The gradient-check build: four mel bins and every width at 8.
    pub fn tiny() -> Self {
        ModelConfig {
            mel_bins: 4,
            fusion: FusionConfig {
                vocab: VOCAB_SIZE,
                text_width: 8,
                text_blocks: 1,
                face_channels: FACE_CHANNELS,
                lip_channels: LIP_CHANNELS,
                bottleneck: 4,
                heads: 4,
                ffn_mult: 2,
            },
            speaker: SpeakerConfig {
                mel_bins: 4,
                width: 8,
                blocks: 1,
                kernel: 3,
                embedding_dim: 8,
                heads: 4,
                ffn_mult: 2,
            },
            estimator: EstimatorConfig {
                width: 8,
                blocks: 1,
                heads: 4,
                ffn_mult: 2,
                time_dim: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speaker.mel_bins != self.mel_bins {
            return Err(Error::Config(format!(
                "speaker encoder expects {} mel bins, model has {}",
                self.speaker.mel_bins, self.mel_bins
            )));
        }
        let widths = [
            ("text", self.fusion.text_width, self.fusion.heads),
            ("speaker", self.speaker.width, self.speaker.heads),
            ("estimator", self.estimator.width, self.estimator.heads),
        ];
        for (what, w, h) in widths {
            if h == 0 || w % h != 0 {
                return Err(Error::Config(format!("{what} width {w} is not divisible by {h} heads")));
            }
        }
        if self.estimator.time_dim < 2 || !self.estimator.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time feature size {} must be even",
                self.estimator.time_dim
            )));
        }
        if self.speaker.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "speaker conv kernel must be odd, got {}",
                self.speaker.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Estimator {
    pub input: Linear,
    pub time_hidden: Linear,
    pub time_out: Linear,
    pub speaker: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
    pub output: Linear,
    pub time_dim: usize,
}

impl Estimator {
    fn new(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let e = cfg.estimator;
        let c = e.width;
        let block = BlockConfig {
            width: c,
            heads: e.heads,
            ffn_mult: e.ffn_mult,
            residual_init: Init::Scaled(0.5),
        };
        Ok(Estimator {
            input: Linear::new(
                ps,
                "est.input",
                2 * cfg.mel_bins + cfg.fusion.text_width,
                c,
                Init::Scaled(1.0),
                rng,
            )?,
            time_hidden: Linear::new(ps, "est.time.0", e.time_dim, c, Init::Scaled(1.0), rng)?,
            time_out: Linear::new(ps, "est.time.1", c, c, Init::Scaled(1.0), rng)?,
            speaker: Linear::new(ps, "est.speaker", cfg.speaker.embedding_dim, c, Init::Scaled(1.0), rng)?,
            blocks: stack(ps, "est.block", e.blocks, block, rng)?,
            norm: LayerNorm::new(ps, "est.norm", c)?,
            output: Linear::new(ps, "est.output", c, cfg.mel_bins, Init::Zeros, rng)?,
            time_dim: e.time_dim,
        })
    }

    /// Frames-major forward: `x_t` and `context` are `[T × D]`, `z_tv` is
    /// `[T × C_text]`, `e_g` is `[F]`. Returns `[T × D]`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x_t: Var,
        context: Var,
        z_tv: Var,
        e_g: Option<Var>,
        t: f64,
    ) -> Result<Var> {
        let frames = tape.value(x_t).rows();
        for v in [context, z_tv] {
            if tape.value(v).rows() != frames {
                return Err(dim_err("estimator", tape.value(x_t).shape(), tape.value(v).shape()));
            }
        }
        let x = tape.concat_cols(&[x_t, context, z_tv])?;
        let h = self.input.forward(tape, x)?;
        let tf = tape.input(timestep_features(t, self.time_dim))?;
        let te = self.time_hidden.forward(tape, tf)?;
        let te = tape.gelu(te)?;
        let mut te = self.time_out.forward(tape, te)?;
        if let Some(e) = e_g {
            let s = self.speaker.forward(tape, e)?;
            te = tape.add(te, s)?;
        }
        let h = tape.add_row(h, te)?;
        let h = run_stack(&self.blocks, tape, h)?;
        let h = self.norm.forward(tape, h)?;
        self.output.forward(tape, h)
    }
}

/// Estimator conditions for one inference evaluation, frames-major.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorInputs<'a> {
    pub z_tv: &'a Grid,
    /// `None` is the all-zero context grid.
    pub context: Option<&'a Grid>,
    pub e_g: Option<&'a [f64]>,
}

/// All trainable and frozen parts with their parameter set.
#[derive(Clone, Debug)]
pub struct SyncVoiceModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet,
    pub fusion: FusionModule,
    pub speaker: DualSpeakerEncoder,
    pub estimator: Estimator,
}

impl SyncVoiceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(seed);
        let mut rng = derived_rng(seed, tag::INIT, 0);
        let fusion = FusionModule::new(&mut params, &config.fusion, &mut rng)?;
        let speaker = DualSpeakerEncoder::new(&mut params, &config.speaker, seed, &mut rng)?;
        let estimator = Estimator::new(&mut params, &config, &mut rng)?;
        Ok(SyncVoiceModel {
            config,
            seed,
            params,
            fusion,
            speaker,
            estimator,
        })
    }

    /// Rebuilds the architecture and replaces every value with the stored
    /// one. Names, shapes, and trainable flags must match exactly.
    pub fn with_params(config: ModelConfig, seed: u64, entries: Vec<ParamEntry>) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        if entries.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "parameter count {} does not match the architecture's {}",
                entries.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, entry) in ids.into_iter().zip(entries) {
            let have = model.params.entry(id);
            if have.name != entry.name || have.trainable != entry.trainable {
                return Err(Error::Contract(format!(
                    "parameter {} (trainable {}) found where {} (trainable {}) was expected",
                    entry.name, entry.trainable, have.name, have.trainable
                )));
            }
            model.params.assign(id, entry.value)?;
        }
        Ok(model)
    }

    pub fn mel_bins(&self) -> usize {
        self.config.mel_bins
    }

    /// Fused condition `[T × C_text]`. Visual grids are frames-major.
    pub fn fuse(
        &self,
        frame_ids: &[usize],
        face: Option<&Grid>,
        lip: Option<&Grid>,
        present: Modalities,
    ) -> Result<Grid> {
        let inputs = FusionInputs { frame_ids, face, lip };
        self.fusion.fuse(&self.params, &inputs, present)
    }

    pub fn speaker_embedding(&self, clip: &MelGrid) -> Result<Vec<f64>> {
        Ok(self.speaker.embed(&self.params, clip)?.global)
    }

    /// One estimator evaluation on a frames-major state.
    pub fn predict(&self, x_t: &Grid, t: f64, inputs: EstimatorInputs<'_>) -> Result<Grid> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(x_t.clone())?;
        let context = match inputs.context {
            Some(c) => {
                if c.shape() != x_t.shape() {
                    return Err(dim_err("estimator context", x_t.shape(), c.shape()));
                }
                tape.input(c.clone())?
            }
            None => tape.input(Grid::zeros(x_t.shape()))?,
        };
        let z = tape.input(inputs.z_tv.clone())?;
        let e_g = match inputs.e_g {
            Some(e) => Some(tape.input(Grid::vector(e.to_vec()))?),
            None => None,
        };
        let v = self.estimator.forward(&mut tape, x, context, z, e_g, t)?;
        Ok(tape.value(v).clone())
    }

    /// Estimator on `[D × T]` grids with the flags deciding which speaker
    /// conditions are read.
    pub fn estimator_forward(
        &self,
        x_t: &MelGrid,
        z_tv: &Grid,
        context: &MelGrid,
        e_g: &[f64],
        t: f64,
        flags: ConditionFlags,
    ) -> Result<MelGrid> {
        let x = x_t.frames_major();
        let ctx = flags.speaker_mode.uses_context().then(|| context.frames_major());
        let inputs = EstimatorInputs {
            z_tv,
            context: ctx.as_ref(),
            e_g: flags.speaker_mode.uses_embedding().then_some(e_g),
        };
        MelGrid::new(self.predict(&x, t, inputs)?.transpose())
    }
}
