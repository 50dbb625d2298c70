//! Report files: pretty JSON with struct-ordered keys, and the ablation table
//! as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};
use syncvoice_core::datamodel::MelGrid;
use syncvoice_core::metrics::AblationTable;
use syncvoice_core::sampler::{GuidanceScales, InferenceMode};

use crate::error::{io_err, AppError, AppResult};

/// A generated spectrogram with the settings that reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedMel {
    pub checkpoint: String,
    pub sample_id: u64,
    pub mode: InferenceMode,
    pub scales: GuidanceScales,
    pub steps: usize,
    pub seed: u64,
    pub bins: usize,
    pub frames: usize,
    /// Row-major `[bins × frames]`.
    pub data: Vec<f64>,
}

impl GeneratedMel {
    pub fn mel(&self) -> AppResult<MelGrid> {
        let g = syncvoice_core::numcore::Grid::new(vec![self.bins, self.frames], self.data.clone())?;
        Ok(MelGrid::new(g)?)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> AppResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    std::fs::write(path, to_json(value)?).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// One line per row in rank order, with a header.
pub fn ablation_csv(table: &AblationTable) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "s_f",
        "s_l",
        "s_t",
        "seed",
        "samples",
        "sync_corr",
        "spk_sim",
        "recon_mse",
        "prosody_corr",
    ])?;
    for r in table.ranked() {
        let a = &r.aggregate;
        w.write_record([
            r.rank.to_string(),
            r.scales.s_f.to_string(),
            r.scales.s_l.to_string(),
            r.scales.s_t.to_string(),
            r.seed.to_string(),
            a.samples.to_string(),
            a.sync_corr.to_string(),
            a.spk_sim.to_string(),
            a.recon_mse.to_string(),
            a.prosody_corr.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| AppError::Format(format!("csv buffer: {}", e.error())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_ablation(csv_path: &Path, table: &AblationTable) -> AppResult<()> {
    std::fs::write(csv_path, ablation_csv(table)?).map_err(io_err(csv_path))?;
    write_json(&csv_path.with_extension("json"), table)
}
