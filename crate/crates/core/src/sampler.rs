//! Inference: multi-condition guidance, Euler integration from noise, and the
//! five dubbing modes.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{align_visual, durations_agree, upsample_tokens, MelGrid, TextSequence, VisualTrack};
use crate::error::{Error, Result};
use crate::fmtrain::{EstimatorInputs, SyncVoiceModel};
use crate::fusion::Modalities;
use crate::math::floor;
use crate::numcore::Grid;
use crate::rng::{derived_rng, tag};
use crate::speaker::MAX_SEGMENT_FRAMES;

pub const DEFAULT_STEPS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub s_f: f64,
    pub s_l: f64,
    pub s_t: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        GuidanceScales {
            s_f: 0.5,
            s_l: 0.5,
            s_t: 1.0,
        }
    }
}

impl GuidanceScales {
    pub fn new(s_f: f64, s_l: f64, s_t: f64) -> Result<Self> {
        let s = GuidanceScales { s_f, s_l, s_t };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_f", self.s_f), ("s_l", self.s_l), ("s_t", self.s_t)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "guidance scale {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which conditions an inference run supplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceMode {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 5] = [Self::M1, Self::M2, Self::M3, Self::M4, Self::M5];

    pub fn lip(self) -> bool {
        matches!(self, Self::M3 | Self::M4)
    }

    pub fn face(self) -> bool {
        matches!(self, Self::M3 | Self::M4 | Self::M5)
    }

    pub fn context(self) -> bool {
        matches!(self, Self::M1 | Self::M3)
    }

    pub fn embedding(self) -> bool {
        !self.context()
    }

    pub fn needs_visual(self) -> bool {
        self.face() || self.lip()
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            Self::M1 => 1,
            Self::M2 => 2,
            Self::M3 => 3,
            Self::M4 => 4,
            Self::M5 => 5,
        };
        write!(f, "M{n}")
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| format!("{m}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown inference mode {s:?}; expected M1..M5")))
    }
}

/// One estimator evaluation in the guidance combination, named by its active
/// conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Estimate {
    FaceLipText,
    FaceText,
    LipText,
    Text,
    /// Every condition dropped, speaker conditioning included.
    Unconditional,
}

impl Estimate {
    pub fn modalities(self) -> Modalities {
        let (text, face, lip) = match self {
            Estimate::FaceLipText => (true, true, true),
            Estimate::FaceText => (true, true, false),
            Estimate::LipText => (true, false, true),
            Estimate::Text => (true, false, false),
            Estimate::Unconditional => (false, false, false),
        };
        Modalities { text, face, lip }
    }

    fn full(face: bool, lip: bool) -> Self {
        match (face, lip) {
            (true, true) => Estimate::FaceLipText,
            (true, false) => Estimate::FaceText,
            (false, true) => Estimate::LipText,
            (false, false) => Estimate::Text,
        }
    }
}

/// A vector field that can be queried under any subset of conditions.
pub trait ConditionalField {
    fn evaluate(&self, x: &Grid, t: f64, which: Estimate) -> Result<Grid>;
}

/// Visual conditions a run actually has.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Available {
    pub face: bool,
    pub lip: bool,
}

impl Available {
    pub const BOTH: Available = Available { face: true, lip: true };
    pub const NONE: Available = Available {
        face: false,
        lip: false,
    };
}

/// `ε = ε_full + s_f(ε_ft − ε_t) + s_l(ε_lt − ε_t) + s_t(ε_t − ε_∅)`.
///
/// A missing visual forces its scale to zero and `ε_full` shrinks to the
/// conditions present. Terms with a zero scale are skipped, so all-zero
/// scales return the full estimate bit for bit. Each estimate is evaluated at
/// most once.
pub fn cfg_estimate(
    field: &dyn ConditionalField,
    x: &Grid,
    t: f64,
    scales: &GuidanceScales,
    available: Available,
) -> Result<Grid> {
    let s_f = if available.face { scales.s_f } else { 0.0 };
    let s_l = if available.lip { scales.s_l } else { 0.0 };
    let mut cache: Vec<(Estimate, Grid)> = Vec::with_capacity(5);
    let mut get = |which: Estimate| -> Result<Grid> {
        if let Some((_, g)) = cache.iter().find(|(w, _)| *w == which) {
            return Ok(g.clone());
        }
        let g = field.evaluate(x, t, which)?;
        cache.push((which, g.clone()));
        Ok(g)
    };
    let mut out = get(Estimate::full(available.face, available.lip))?;
    let mut residual = |out: &mut Grid, scale: f64, a: Estimate, b: Estimate| -> Result<()> {
        if scale != 0.0 {
            let d = get(a)?.zip_map(&get(b)?, |p, q| p - q)?;
            out.add_scaled(scale, &d)?;
        }
        Ok(())
    };
    residual(&mut out, s_f, Estimate::FaceText, Estimate::Text)?;
    residual(&mut out, s_l, Estimate::LipText, Estimate::Text)?;
    residual(&mut out, scales.s_t, Estimate::Text, Estimate::Unconditional)?;
    Ok(out)
}

/// Standard-normal starting state for `seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Grid {
    let mut rng = derived_rng(seed, tag::SAMPLE_NOISE, 0);
    Grid::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Euler steps `x ← x + (1/n)·ε(x, k/n)` for `k = 0..n` from `x0`.
pub fn euler_from(
    field: &dyn ConditionalField,
    x0: Grid,
    scales: &GuidanceScales,
    available: Available,
    steps: usize,
) -> Result<Grid> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    scales.validate()?;
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * h;
        let v = match cfg_estimate(field, &x, t, scales, available) {
            Ok(v) => v,
            Err(Error::Domain(_)) => return Err(Error::NonFiniteState { step: k }),
            Err(e) => return Err(e),
        };
        x.add_scaled(h, &v)?;
        if !x.all_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
    }
    Ok(x)
}

/// [`euler_from`] starting at [`initial_noise`] of `shape`.
pub fn euler_integrate(
    field: &dyn ConditionalField,
    shape: &[usize],
    scales: &GuidanceScales,
    available: Available,
    steps: usize,
    seed: u64,
) -> Result<Grid> {
    euler_from(field, initial_noise(shape, seed), scales, available, steps)
}

/// The trained model with a fixed set of conditions. Fused conditions are
/// computed once per modality combination the run can use.
pub struct ModelField<'a> {
    model: &'a SyncVoiceModel,
    fused: Vec<(Estimate, Grid)>,
    context: Option<Grid>,
    e_g: Option<Vec<f64>>,
}

impl<'a> ModelField<'a> {
    /// `face`/`lip` are frames-major on the generation time base.
    pub fn new(
        model: &'a SyncVoiceModel,
        frame_ids: &[usize],
        face: Option<&Grid>,
        lip: Option<&Grid>,
        context: Option<Grid>,
        e_g: Option<Vec<f64>>,
    ) -> Result<Self> {
        let candidates = [
            Estimate::FaceLipText,
            Estimate::FaceText,
            Estimate::LipText,
            Estimate::Text,
            Estimate::Unconditional,
        ];
        let mut fused = Vec::new();
        for which in candidates {
            let m = which.modalities();
            if (m.face && face.is_none()) || (m.lip && lip.is_none()) {
                continue;
            }
            fused.push((which, model.fuse(frame_ids, face, lip, m)?));
        }
        Ok(ModelField {
            model,
            fused,
            context,
            e_g,
        })
    }
}

impl ConditionalField for ModelField<'_> {
    fn evaluate(&self, x: &Grid, t: f64, which: Estimate) -> Result<Grid> {
        let z = self
            .fused
            .iter()
            .find(|(w, _)| *w == which)
            .map(|(_, z)| z)
            .ok_or_else(|| Error::Config(format!("estimate {which:?} needs a visual input this run lacks")))?;
        let keep_speaker = which != Estimate::Unconditional;
        let inputs = EstimatorInputs {
            z_tv: z,
            context: self.context.as_ref().filter(|_| keep_speaker),
            e_g: self.e_g.as_deref().filter(|_| keep_speaker),
        };
        self.model.predict(x, t, inputs)
    }
}

/// What is being dubbed. `mel_frames` is the length fixed by the video.
#[derive(Clone, Copy, Debug)]
pub struct DubTarget<'a> {
    pub text: &'a TextSequence,
    pub visual: Option<&'a VisualTrack>,
    pub mel_frames: usize,
}

/// A separate clip of the target speaker.
#[derive(Clone, Copy, Debug)]
pub struct DubReference<'a> {
    pub mel: &'a MelGrid,
    pub text: &'a TextSequence,
    pub visual: Option<&'a VisualTrack>,
}

#[derive(Clone, Copy, Debug)]
pub struct DubSettings {
    pub mode: InferenceMode,
    pub scales: GuidanceScales,
    pub steps: usize,
    pub seed: u64,
}

impl DubSettings {
    pub fn new(mode: InferenceMode, seed: u64) -> Self {
        DubSettings {
            mode,
            scales: GuidanceScales::default(),
            steps: DEFAULT_STEPS,
            seed,
        }
    }
}

/// Reference frames prepended as context: at most 3/7 of the target length,
/// which keeps the generated share of the composite inside the training mask
/// range of 70–100 %.
pub fn context_frames(reference_frames: usize, target_frames: usize) -> usize {
    reference_frames.min(floor(3.0 * target_frames as f64 / 7.0) as usize)
}

fn frames_major_visual(track: &VisualTrack, frames: usize) -> Result<(Grid, Grid)> {
    let a = align_visual(track, frames)?;
    Ok((a.face.transpose(), a.lip.transpose()))
}

fn join_rows(head: Option<Grid>, tail: Grid) -> Result<Grid> {
    match head {
        None => Ok(tail),
        Some(h) => {
            let cols = tail.cols();
            let mut data = h.into_data();
            data.extend_from_slice(tail.data());
            Grid::new(alloc::vec![data.len() / cols, cols], data)
        }
    }
}

/// Generates `[D × T_mel]` for the target under `settings.mode`.
pub fn dub(
    model: &SyncVoiceModel,
    target: DubTarget<'_>,
    reference: DubReference<'_>,
    settings: &DubSettings,
) -> Result<MelGrid> {
    let mode = settings.mode;
    let t_mel = target.mel_frames;
    if t_mel == 0 {
        return Err(Error::Empty("target length"));
    }
    let visual = match (mode.needs_visual(), target.visual) {
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {mode} needs a visual track for the target"
            )))
        }
        (true, Some(v)) => {
            durations_agree(t_mel, v.frames())?;
            Some(v)
        }
        (false, _) => None,
    };
    let d = model.mel_bins();
    if reference.mel.bins() != d {
        return Err(crate::error::dim_err("dub reference", &[d], &[reference.mel.bins()]));
    }
    let target_ids = upsample_tokens(target.text.tokens(), t_mel)?;
    let target_visual = visual.map(|v| frames_major_visual(v, t_mel)).transpose()?;

    let (ids, visual_rows, context, e_g, offset) = if mode.context() {
        let ref_t = reference.mel.frames();
        let n = context_frames(ref_t, t_mel);
        let ref_visual = match (mode.needs_visual(), reference.visual) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "mode {mode} needs a visual track for the reference"
                )))
            }
            (true, Some(v)) if n > 0 => {
                let (f, l) = frames_major_visual(v, ref_t)?;
                Some((f.row_range(0, n)?, l.row_range(0, n)?))
            }
            _ => None,
        };
        let mut ids = Vec::with_capacity(n + t_mel);
        if n > 0 {
            ids.extend_from_slice(&upsample_tokens(reference.text.tokens(), ref_t)?[..n]);
        }
        ids.extend_from_slice(&target_ids);
        let visual_rows = match target_visual {
            Some((f, l)) => {
                let (rf, rl) = ref_visual.unzip();
                Some((join_rows(rf, f)?, join_rows(rl, l)?))
            }
            None => None,
        };
        let head = if n > 0 {
            Some(reference.mel.frames_major().row_range(0, n)?)
        } else {
            None
        };
        let context = join_rows(head, Grid::zeros(&[t_mel, d]))?;
        (ids, visual_rows, Some(context), None, n)
    } else {
        let clip = reference
            .mel
            .frame_range(0, reference.mel.frames().min(MAX_SEGMENT_FRAMES))?;
        let e_g = model.speaker_embedding(&clip)?;
        (target_ids, target_visual, None, Some(e_g), 0)
    };

    let (face, lip) = match &visual_rows {
        Some((f, l)) => (mode.face().then_some(f), mode.lip().then_some(l)),
        None => (None, None),
    };
    let field = ModelField::new(model, &ids, face, lip, context, e_g)?;
    let available = Available {
        face: face.is_some(),
        lip: lip.is_some(),
    };
    let x = euler_integrate(
        &field,
        &[ids.len(), d],
        &settings.scales,
        available,
        settings.steps,
        settings.seed,
    )?;
    MelGrid::new(x.row_range(offset, t_mel)?.transpose())
}
