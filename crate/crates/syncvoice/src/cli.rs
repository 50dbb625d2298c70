use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use syncvoice_core::datamodel::{generate_corpus, split, CorpusConfig, Sample, Split};
use syncvoice_core::fmtrain::{
    grad_check_suite, train, ModelConfig, SyncVoiceModel, TrainConfig, TrainEvent, FD_TOLERANCE,
};
use syncvoice_core::metrics::{ablate_cfg, evaluate, evaluate_sample, RunMetadata};
use syncvoice_core::sampler::{
    dub, DubReference, DubSettings, DubTarget, GuidanceScales, InferenceMode, DEFAULT_STEPS,
};

use crate::checkpoint::{file_sha256, read_checkpoint, sha256_hex, write_checkpoint, CheckpointHeader};
use crate::corpus_file::{encode_corpus, read_corpus};
use crate::error::{io_err, AppError, AppResult};
use crate::report::{write_ablation, write_json, GeneratedMel};

#[derive(Debug, Parser)]
#[command(
    name = "syncvoice",
    version,
    about = "Visual-conditioned flow-matching dubbing on a synthetic corpus"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus file.
    Train(TrainArgs),
    /// Dub one corpus sample.
    Sample(SampleArgs),
    /// Score a split and write a report.
    Eval(EvalArgs),
    /// Sweep guidance scales over a split.
    Ablate(AblateArgs),
    /// Compare backward against finite differences.
    GradCheck,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub speakers: u32,
    #[arg(long, default_value_t = 28)]
    pub samples_per_speaker: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub crop_frames: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Seed for parameter initialization and the frozen speaker projection.
    #[arg(long, default_value_t = 1)]
    pub model_seed: u64,
    /// Write the per-step losses as JSON.
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct ScaleArgs {
    #[arg(long, default_value_t = 0.5)]
    pub sf: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sl: f64,
    #[arg(long, default_value_t = 1.0)]
    pub st: f64,
}

impl ScaleArgs {
    fn scales(&self) -> AppResult<GuidanceScales> {
        Ok(GuidanceScales::new(self.sf, self.sl, self.st)?)
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus id of the utterance to dub.
    #[arg(long)]
    pub id: u64,
    #[arg(long, default_value = "M3")]
    pub mode: InferenceMode,
    #[command(flatten)]
    pub scales: ScaleArgs,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Withhold the target's visual track.
    #[arg(long)]
    pub no_visual: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "M3")]
    pub mode: InferenceMode,
    #[command(flatten)]
    pub scales: ScaleArgs,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Semicolon-separated `s_f,s_l,s_t` triples.
    #[arg(long, default_value = "0,0,0.8;0.5,0.5,0.8;1,1,0.8")]
    pub grid: String,
    #[arg(long, default_value = "M3")]
    pub mode: InferenceMode,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV table; a JSON copy is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_grid(text: &str) -> AppResult<Vec<GuidanceScales>> {
    let bad = |t: &str| {
        AppError::Core(syncvoice_core::Error::Config(format!(
            "bad scale triple {t:?}; expected s_f,s_l,s_t"
        )))
    };
    text.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let v: Vec<f64> = t
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(t))?;
            match v[..] {
                [s_f, s_l, s_t] => Ok(GuidanceScales::new(s_f, s_l, s_t)?),
                _ => Err(bad(t)),
            }
        })
        .collect()
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> AppResult<()> {
    let cfg = CorpusConfig {
        speakers: a.speakers,
        samples_per_speaker: a.samples_per_speaker,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg, a.seed)?;
    let bytes = encode_corpus(&corpus)?;
    std::fs::write(&a.out, &bytes).map_err(io_err(&a.out))?;
    let _ = writeln!(
        out,
        "wrote {} samples to {} (sha256 {})",
        corpus.len(),
        a.out.display(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn step_path(out: &Path, step: usize) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".step{step}"));
    out.with_file_name(name)
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> AppResult<()> {
    let corpus = read_corpus(&a.corpus)?;
    let corpus_sha256 = file_sha256(&a.corpus)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed.unwrap_or(d.seed),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        crop_frames: a.crop_frames.unwrap_or(d.crop_frames),
        checkpoint_every: a.checkpoint_every.unwrap_or(d.checkpoint_every),
        ..d
    };
    let model_cfg = ModelConfig::default();
    let mut model = SyncVoiceModel::new(model_cfg, a.model_seed)?;
    let train_set = split(&corpus, Split::Train);
    let header = |step| CheckpointHeader {
        step,
        model_seed: a.model_seed,
        model: model_cfg,
        train: cfg.clone(),
        corpus_sha256: corpus_sha256.clone(),
    };
    let mut observer = |e: TrainEvent<'_>| -> syncvoice_core::Result<()> {
        match e {
            TrainEvent::Step { step, loss } if step % 100 == 0 => {
                let _ = writeln!(out, "step {step:>6}  loss {loss:.5}");
            }
            TrainEvent::Checkpoint { step, model } if step < cfg.steps => {
                let path = step_path(&a.out, step);
                write_checkpoint(&path, &header(step), model)
                    .map_err(|e| syncvoice_core::Error::Contract(format!("writing {}: {e}", path.display())))?;
            }
            _ => {}
        }
        Ok(())
    };
    let report = train(&mut model, &train_set, &cfg, &mut observer)?;
    write_checkpoint(&a.out, &header(cfg.steps), &model)?;
    if let Some(p) = &a.loss_trace {
        write_json(p, &report.losses)?;
    }
    let n = report.losses.len();
    let _ = writeln!(
        out,
        "trained {n} steps; mean loss first 100 {:.5}, last 100 {:.5}; checkpoint {}",
        report.mean_loss(0, 100),
        report.mean_loss(n.saturating_sub(100), 100),
        a.out.display()
    );
    Ok(())
}

fn find(corpus: &[Sample], id: u64) -> AppResult<&Sample> {
    corpus.iter().find(|s| s.id == id).ok_or_else(|| {
        AppError::Core(syncvoice_core::Error::Config(format!(
            "no sample with id {id} in the corpus"
        )))
    })
}

fn sample_cmd(a: &SampleArgs, out: &mut dyn Write) -> AppResult<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let checkpoint = file_sha256(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let target = find(&corpus, a.id)?;
    let scales = a.scales.scales()?;
    let settings = DubSettings {
        mode: a.mode,
        scales,
        steps: a.steps,
        seed: a.seed,
    };
    let reference = syncvoice_core::datamodel::reference_for(&corpus, target).ok_or_else(|| {
        AppError::Core(syncvoice_core::Error::Config(format!(
            "sample {} has no reference clip",
            a.id
        )))
    })?;
    let mel = dub(
        &ck.model,
        DubTarget {
            text: &target.text,
            visual: (!a.no_visual).then_some(&target.visual),
            mel_frames: target.mel.frames(),
        },
        DubReference {
            mel: &reference.mel,
            text: &reference.text,
            visual: Some(&reference.visual),
        },
        &settings,
    )?;
    let g = GeneratedMel {
        checkpoint,
        sample_id: a.id,
        mode: a.mode,
        scales,
        steps: a.steps,
        seed: a.seed,
        bins: mel.bins(),
        frames: mel.frames(),
        data: mel.grid().data().to_vec(),
    };
    write_json(&a.out, &g)?;
    let _ = writeln!(
        out,
        "dubbed sample {} ({} frames, mode {}) -> {}",
        a.id,
        g.frames,
        a.mode,
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> AppResult<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let meta = RunMetadata {
        checkpoint: file_sha256(&a.checkpoint)?,
        split: a.split,
        mode: a.mode,
        scales: a.scales.scales()?,
        steps: a.steps,
        seed: a.seed,
    };
    let report = evaluate(&ck.model, &corpus, a.split, meta)?;
    write_json(&a.out, &report)?;
    let g = &report.aggregate;
    let _ = writeln!(
        out,
        "{} samples: sync_corr {:.4}  spk_sim {:.4}  recon_mse {:.4}  prosody_corr {:.4}",
        g.samples, g.sync_corr, g.spk_sim, g.recon_mse, g.prosody_corr
    );
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write) -> AppResult<()> {
    let grid = parse_grid(&a.grid)?;
    let ck = read_checkpoint(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let checkpoint = file_sha256(&a.checkpoint)?;
    let table = ablate_cfg(&ck.model, &corpus, a.split, &grid, a.mode, a.steps, a.seed, &checkpoint)?;
    write_ablation(&a.out, &table)?;
    for r in table.ranked() {
        let _ = writeln!(
            out,
            "#{} s_f={} s_l={} s_t={}  sync_corr {:.4}",
            r.rank, r.scales.s_f, r.scales.s_l, r.scales.s_t, r.aggregate.sync_corr
        );
    }
    Ok(())
}

fn grad_check(out: &mut dyn Write) -> AppResult<bool> {
    let rows = grad_check_suite()?;
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<16} {:>6} params  max rel err {:.3e}  {verdict}",
            r.name, r.parameters, r.max_relative_error
        );
    }
    let _ = writeln!(out, "tolerance {FD_TOLERANCE:e}");
    Ok(ok)
}

/// Scores one sample without writing anything; used by tests.
pub fn score_sample(
    model: &SyncVoiceModel,
    corpus: &[Sample],
    id: u64,
    mode: InferenceMode,
    scales: GuidanceScales,
    steps: usize,
    seed: u64,
) -> AppResult<syncvoice_core::metrics::SampleMetrics> {
    let s = find(corpus, id)?;
    Ok(evaluate_sample(model, corpus, s, mode, scales, steps, seed)?.0)
}

/// Runs the command line and returns the process exit status: 0 on success,
/// 1 on a failed command, 2 on a usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Sample(a) => sample_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::GradCheck => match grad_check(out) {
            Ok(true) => Ok(()),
            Ok(false) => {
                let _ = writeln!(err, "error: gradient check failed");
                return 1;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
