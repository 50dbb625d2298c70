//! Synthetic-corpus analogs of the dubbing metrics, per-split evaluation, and
//! the guidance-scale ablation.
//!
//! The synchronization score is an envelope correlation, not a lip-sync
//! network score; reports carry the name `sync_corr`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    durations_agree, frame_energy_envelope, reference_for, split, MelGrid, Sample, Split, VisualTrack,
};
use crate::error::{dim_err, Error, Result};
use crate::fmtrain::SyncVoiceModel;
use crate::math::{cosine, pearson, resample_linear};
use crate::numcore::ParamSet;
use crate::rng::{derive_seed, tag};
use crate::sampler::{dub, DubReference, DubSettings, DubTarget, GuidanceScales, InferenceMode};
use crate::speaker::FrozenBranch;

/// A correlation that falls back to 0 when either side has no variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

impl Correlation {
    fn of(a: &[f64], b: &[f64]) -> Self {
        match pearson(a, b) {
            Some(value) => Correlation {
                value,
                degenerate: false,
            },
            None => Correlation {
                value: 0.0,
                degenerate: true,
            },
        }
    }
}

/// Pearson correlation between the mel energy envelope, resampled to the
/// video rate, and lip channel 0.
pub fn sync_correlation(mel: &MelGrid, visual: &VisualTrack) -> Result<Correlation> {
    durations_agree(mel.frames(), visual.frames())?;
    let envelope = resample_linear(&frame_energy_envelope(mel), visual.frames());
    Ok(Correlation::of(&envelope, visual.lip().row(0)))
}

/// Pearson correlation between the mel energy envelope and a prosody contour
/// (resampled to the mel length when they differ).
pub fn prosody_correlation(mel: &MelGrid, prosody: &[f64]) -> Result<Correlation> {
    if prosody.is_empty() {
        return Err(Error::Empty("prosody contour"));
    }
    let envelope = frame_energy_envelope(mel);
    let contour = if prosody.len() == envelope.len() {
        prosody.to_vec()
    } else {
        resample_linear(prosody, envelope.len())
    };
    Ok(Correlation::of(&envelope, &contour))
}

/// Cosine similarity of the frozen-branch embeddings of two clips.
pub fn speaker_similarity(branch: &FrozenBranch, params: &ParamSet, a: &MelGrid, b: &MelGrid) -> Result<f64> {
    Ok(cosine(&branch.embed(params, a)?, &branch.embed(params, b)?))
}

fn centered_frames(mel: &MelGrid) -> Vec<f64> {
    let envelope = frame_energy_envelope(mel);
    let t = mel.frames();
    mel.grid()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - envelope[i % t])
        .collect()
}

/// Mean squared error after removing each frame's mean over bins, so only the
/// spectral shape (the token content) is compared.
pub fn recon_mse(generated: &MelGrid, truth: &MelGrid) -> Result<f64> {
    if generated.grid().shape() != truth.grid().shape() {
        return Err(dim_err("recon_mse", generated.grid().shape(), truth.grid().shape()));
    }
    let (g, t) = (centered_frames(generated), centered_frames(truth));
    Ok(g.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u64,
    pub speaker_id: u32,
    pub reference_id: u64,
    pub sync_corr: f64,
    pub spk_sim: f64,
    pub recon_mse: f64,
    pub prosody_corr: f64,
    /// Metrics that hit a zero-variance input and were set to 0.
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    pub sync_corr: f64,
    pub spk_sim: f64,
    pub recon_mse: f64,
    pub prosody_corr: f64,
}

impl Aggregate {
    pub fn of(rows: &[SampleMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Aggregate {
            samples: rows.len(),
            sync_corr: mean(|r| r.sync_corr),
            spk_sim: mean(|r| r.spk_sim),
            recon_mse: mean(|r| r.recon_mse),
            prosody_corr: mean(|r| r.prosody_corr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub checkpoint: String,
    pub split: Split,
    pub mode: InferenceMode,
    pub scales: GuidanceScales,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    pub aggregate: Aggregate,
    pub samples: Vec<SampleMetrics>,
}

/// Dubs one sample with its deterministic reference and scores the output.
/// The noise seed is derived from `seed` and the sample id.
pub fn evaluate_sample(
    model: &SyncVoiceModel,
    corpus: &[Sample],
    sample: &Sample,
    mode: InferenceMode,
    scales: GuidanceScales,
    steps: usize,
    seed: u64,
) -> Result<(SampleMetrics, MelGrid)> {
    let reference = reference_for(corpus, sample)
        .ok_or_else(|| Error::Config(alloc::format!("sample {} has no same-speaker reference", sample.id)))?;
    let settings = DubSettings {
        mode,
        scales,
        steps,
        seed: derive_seed(seed, tag::SAMPLE_NOISE, sample.id),
    };
    let target = DubTarget {
        text: &sample.text,
        visual: Some(&sample.visual),
        mel_frames: sample.mel.frames(),
    };
    let reference_in = DubReference {
        mel: &reference.mel,
        text: &reference.text,
        visual: Some(&reference.visual),
    };
    let generated = dub(model, target, reference_in, &settings)?;
    let sync = sync_correlation(&generated, &sample.visual)?;
    let prosody = prosody_correlation(&generated, &sample.latent_prosody)?;
    let mut warnings = Vec::new();
    if sync.degenerate {
        warnings.push("sync_corr: zero variance".into());
    }
    if prosody.degenerate {
        warnings.push("prosody_corr: zero variance".into());
    }
    let metrics = SampleMetrics {
        id: sample.id,
        speaker_id: sample.speaker_id,
        reference_id: reference.id,
        sync_corr: sync.value,
        spk_sim: speaker_similarity(&model.speaker.frozen, &model.params, &reference.mel, &generated)?,
        recon_mse: recon_mse(&generated, &sample.mel)?,
        prosody_corr: prosody.value,
        warnings,
    };
    Ok((metrics, generated))
}

/// Evaluates every sample of `which`, in id order.
pub fn evaluate(model: &SyncVoiceModel, corpus: &[Sample], which: Split, metadata: RunMetadata) -> Result<EvalReport> {
    let mut targets = split(corpus, which);
    if targets.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    targets.sort_by_key(|s| s.id);
    let mut samples = Vec::with_capacity(targets.len());
    for s in targets {
        let m = &metadata;
        samples.push(evaluate_sample(model, corpus, s, m.mode, m.scales, m.steps, m.seed)?.0);
    }
    Ok(EvalReport {
        aggregate: Aggregate::of(&samples),
        metadata,
        samples,
    })
}

/// Seed for one ablation row, a function of the root seed and the scale
/// triple only, so rows do not depend on grid order.
pub fn ablation_seed(root: u64, scales: &GuidanceScales) -> u64 {
    let mut h = root;
    for v in [scales.s_f, scales.s_l, scales.s_t] {
        h = derive_seed(h, tag::ABLATION, v.to_bits());
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scales: GuidanceScales,
    pub seed: u64,
    /// 1 for the highest mean sync correlation.
    pub rank: usize,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub checkpoint: String,
    pub split: Split,
    pub mode: InferenceMode,
    pub steps: usize,
    pub root_seed: u64,
    /// In grid order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows sorted by rank.
    pub fn ranked(&self) -> Vec<&AblationRow> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.rank);
        rows
    }
}

/// Runs the split under every scale triple of `grid`.
pub fn ablate_cfg(
    model: &SyncVoiceModel,
    corpus: &[Sample],
    which: Split,
    grid: &[GuidanceScales],
    mode: InferenceMode,
    steps: usize,
    root_seed: u64,
    checkpoint: &str,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Empty("scale grid"));
    }
    if split(corpus, which).is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for scales in grid {
        scales.validate()?;
        let seed = ablation_seed(root_seed, scales);
        let meta = RunMetadata {
            checkpoint: checkpoint.into(),
            split: which,
            mode,
            scales: *scales,
            steps,
            seed,
        };
        let report = evaluate(model, corpus, which, meta)?;
        rows.push(AblationRow {
            scales: *scales,
            seed,
            rank: 0,
            aggregate: report.aggregate,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[b]
            .aggregate
            .sync_corr
            .total_cmp(&rows[a].aggregate.sync_corr)
            .then(a.cmp(&b))
    });
    for (rank, i) in order.into_iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    Ok(AblationTable {
        checkpoint: checkpoint.into(),
        split: which,
        mode,
        steps,
        root_seed,
        rows,
    })
}
