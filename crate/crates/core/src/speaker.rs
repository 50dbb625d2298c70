//! Dual speaker encoder.
//!
//! The frozen branch stands in for a pretrained verification model: pooled
//! mel statistics through a fixed random projection, L2-normalized. The
//! learnable branch is conv1d → attention blocks → mean/std pooling → linear.
//! The global embedding is the elementwise sum of the two.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datamodel::MelGrid;
use crate::error::{Error, Result};
use crate::math::{dot, sqrt};
use crate::numcore::nn::{
    normal_grid, run_stack, sinusoidal_positions, stack, AttentionBlock, BlockConfig, Init, Linear,
};
use crate::numcore::{kernels, Grid, ParamId, ParamSet, Tape, Var};
use crate::rng::{derived_rng, tag, Rng};

pub const MIN_SEGMENT_FRAMES: usize = 25;
pub const MAX_SEGMENT_FRAMES: usize = 190;
pub const MIN_CLIP_FRAMES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerConfig {
    pub mel_bins: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub global: Vec<f64>,
    pub pretrained: Vec<f64>,
    pub learnable: Vec<f64>,
}

/// `e_g = e_pre + e_learn`, keeping both parts.
pub fn combine(pretrained: &[f64], learnable: &[f64]) -> Result<SpeakerEmbedding> {
    if pretrained.len() != learnable.len() {
        return Err(crate::error::dim_err(
            "combine",
            &[pretrained.len()],
            &[learnable.len()],
        ));
    }
    Ok(SpeakerEmbedding {
        global: pretrained.iter().zip(learnable).map(|(a, b)| a + b).collect(),
        pretrained: pretrained.to_vec(),
        learnable: learnable.to_vec(),
    })
}

/// A contiguous segment whose length is uniform on
/// `[min(T, 25), min(T, 190)]` frames, at a uniform valid start.
pub fn extract_segment(x1: &MelGrid, rng: &mut Rng) -> Result<MelGrid> {
    let t = x1.frames();
    if t < MIN_CLIP_FRAMES {
        return Err(Error::TooShort {
            what: "extract_segment",
            needed: MIN_CLIP_FRAMES,
            got: t,
        });
    }
    let len = rng.random_range(t.min(MIN_SEGMENT_FRAMES)..=t.min(MAX_SEGMENT_FRAMES));
    let start = rng.random_range(0..=t - len);
    x1.frame_range(start, len)
}

#[derive(Clone, Debug)]
pub struct FrozenBranch {
    pub projection: ParamId,
}

impl FrozenBranch {
    fn new(ps: &mut ParamSet, cfg: &SpeakerConfig, seed: u64) -> Result<Self> {
        let stats = 2 * cfg.mel_bins;
        let mut rng = derived_rng(seed, tag::FROZEN, 0);
        let w = normal_grid(&[stats, cfg.embedding_dim], 1.0 / sqrt(stats as f64), &mut rng);
        Ok(FrozenBranch {
            projection: ps.add("speaker.frozen.projection", w, false)?,
        })
    }

    /// Pooled mean/std statistics → fixed projection → unit length.
    pub fn embed(&self, params: &ParamSet, clip: &MelGrid) -> Result<Vec<f64>> {
        if clip.frames() == 0 || clip.bins() == 0 {
            return Err(Error::Empty("pretrained_embed"));
        }
        let w = params.get(self.projection);
        if w.rows() != 2 * clip.bins() {
            return Err(crate::error::dim_err(
                "pretrained_embed",
                clip.grid().shape(),
                w.shape(),
            ));
        }
        let stats = kernels::mean_std_pool_forward(clip.grid().data(), clip.bins(), clip.frames());
        let mut e = kernels::linear_forward(&stats, 1, stats.len(), w.data(), w.cols(), None);
        let norm = sqrt(dot(&e, &e));
        if norm > 0.0 {
            e.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(e)
    }
}

#[derive(Clone, Debug)]
pub struct LearnableBranch {
    pub conv_kernels: ParamId,
    pub conv_bias: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub output: Linear,
    pub width: usize,
}

impl LearnableBranch {
    fn new(ps: &mut ParamSet, cfg: &SpeakerConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "speaker conv kernel must be odd, got {}",
                cfg.kernel
            )));
        }
        let fan_in = cfg.mel_bins * cfg.kernel;
        let conv_kernels = ps.add(
            "speaker.learn.conv.k",
            normal_grid(&[cfg.width, cfg.mel_bins, cfg.kernel], 1.0 / sqrt(fan_in as f64), rng),
            true,
        )?;
        let conv_bias = ps.add("speaker.learn.conv.b", Grid::zeros(&[cfg.width]), true)?;
        let block = BlockConfig {
            width: cfg.width,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
            residual_init: Init::Scaled(0.5),
        };
        let blocks = stack(ps, "speaker.learn.block", cfg.blocks, block, rng)?;
        let output = Linear::new(
            ps,
            "speaker.learn.out",
            2 * cfg.width,
            cfg.embedding_dim,
            Init::Scaled(0.5),
            rng,
        )?;
        Ok(LearnableBranch {
            conv_kernels,
            conv_bias,
            blocks,
            output,
            width: cfg.width,
        })
    }

    /// `clip` is a `[D × T]` input node; returns an `[F]` node.
    pub fn forward(&self, tape: &mut Tape<'_>, clip: Var) -> Result<Var> {
        let frames = tape.value(clip).cols();
        let (k, b) = (tape.param(self.conv_kernels), tape.param(self.conv_bias));
        let h = tape.conv1d(clip, k, Some(b))?;
        let h = tape.transpose(h)?;
        let pos = tape.input(sinusoidal_positions(frames, self.width))?;
        let h = tape.add(h, pos)?;
        let h = run_stack(&self.blocks, tape, h)?;
        let h = tape.transpose(h)?;
        let pooled = tape.mean_std_pool(h)?;
        self.output.forward(tape, pooled)
    }

    pub fn embed(&self, params: &ParamSet, clip: &MelGrid) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let x = tape.input(clip.grid().clone())?;
        let e = self.forward(&mut tape, x)?;
        Ok(tape.value(e).data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct DualSpeakerEncoder {
    pub frozen: FrozenBranch,
    pub learnable: LearnableBranch,
}

impl DualSpeakerEncoder {
    pub fn new(ps: &mut ParamSet, cfg: &SpeakerConfig, seed: u64, rng: &mut Rng) -> Result<Self> {
        Ok(DualSpeakerEncoder {
            frozen: FrozenBranch::new(ps, cfg, seed)?,
            learnable: LearnableBranch::new(ps, cfg, rng)?,
        })
    }

    /// `e_g` as a tape node; the frozen part enters as a constant.
    pub fn forward(&self, tape: &mut Tape<'_>, clip: &MelGrid) -> Result<Var> {
        let pre = self.frozen.embed(tape.params(), clip)?;
        let x = tape.input(clip.grid().clone())?;
        let learn = self.learnable.forward(tape, x)?;
        let pre = tape.input(Grid::vector(pre))?;
        tape.add(pre, learn)
    }

    pub fn embed(&self, params: &ParamSet, clip: &MelGrid) -> Result<SpeakerEmbedding> {
        combine(&self.frozen.embed(params, clip)?, &self.learnable.embed(params, clip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use crate::rng::rng_from_seed;
    use alloc::string::ToString;
    use alloc::vec;

    fn cfg() -> SpeakerConfig {
        SpeakerConfig {
            mel_bins: 6,
            width: 8,
            blocks: 6,
            kernel: 3,
            embedding_dim: 5,
            heads: 4,
            ffn_mult: 2,
        }
    }

    fn encoder() -> (ParamSet, DualSpeakerEncoder) {
        let mut ps = ParamSet::new(3);
        let enc = DualSpeakerEncoder::new(&mut ps, &cfg(), 3, &mut rng_from_seed(3)).unwrap();
        (ps, enc)
    }

    fn clip(frames: usize, seed: u64) -> MelGrid {
        MelGrid::new(normal_grid(&[6, frames], 1.0, &mut rng_from_seed(seed))).unwrap()
    }

    fn permute_time(m: &MelGrid, perm: &[usize]) -> MelGrid {
        let (d, t) = (m.bins(), m.frames());
        MelGrid::new(Grid::from_fn(&[d, t], |i| m.grid().at(i / t, perm[i % t]))).unwrap()
    }

    #[test]
    fn segment_at_minimum_is_whole_clip() {
        let c = clip(8, 1);
        assert_eq!(extract_segment(&c, &mut rng_from_seed(0)).unwrap(), c);
        assert!(extract_segment(&clip(7, 1), &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn segments_are_contiguous_subranges() {
        let c = clip(60, 2);
        let mut rng = rng_from_seed(9);
        for _ in 0..100 {
            let s = extract_segment(&c, &mut rng).unwrap();
            assert!((25..=60).contains(&s.frames()));
            let first = s.grid().at(0, 0);
            let start = (0..60).find(|&f| c.grid().at(0, f) == first).unwrap();
            assert_eq!(c.frame_range(start, s.frames()).unwrap(), s);
        }
    }

    #[test]
    fn pretrained_is_unit_norm_and_order_invariant() {
        let (ps, enc) = encoder();
        let c = clip(12, 4);
        let e = enc.frozen.embed(&ps, &c).unwrap();
        assert!((sqrt(dot(&e, &e)) - 1.0).abs() < 1e-9);
        let perm: Vec<usize> = (0..12).rev().collect();
        let p = enc.frozen.embed(&ps, &permute_time(&c, &perm)).unwrap();
        for (a, b) in e.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn learnable_is_order_sensitive() {
        let (ps, enc) = encoder();
        let c = clip(12, 5);
        let perm: Vec<usize> = (0..12).rev().collect();
        let a = enc.learnable.embed(&ps, &c).unwrap();
        let b = enc.learnable.embed(&ps, &permute_time(&c, &perm)).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn zero_weights_give_clip_independent_embedding() {
        let (mut ps, enc) = encoder();
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            if id != enc.learnable.conv_bias && ps.is_trainable(id) {
                let shape = ps.get(id).shape().to_vec();
                ps.assign(id, Grid::zeros(&shape)).unwrap();
            }
        }
        ps.assign(enc.learnable.conv_bias, Grid::vector(vec![0.5; 8])).unwrap();
        let a = enc.learnable.embed(&ps, &clip(15, 6)).unwrap();
        let b = enc.learnable.embed(&ps, &clip(15, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_clip_length_invariance() {
        let (ps, enc) = encoder();
        let constant = |t| MelGrid::new(Grid::from_fn(&[6, t], |i| (i / t) as f64 * 0.3)).unwrap();
        // Only the frozen branch (pure pooling) is length-invariant on constant
        // clips; the learnable branch sees positions.
        let a = enc.frozen.embed(&ps, &constant(10)).unwrap();
        let b = enc.frozen.embed(&ps, &constant(31)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_examples() {
        let e = combine(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(e.global, vec![4.0, 6.0]);
        assert_eq!(combine(&[1.5, -2.0], &[0.0, 0.0]).unwrap().global, vec![1.5, -2.0]);
        assert_eq!(combine(&[0.0, 0.0], &[0.25, 7.0]).unwrap().global, vec![0.25, 7.0]);
        assert!(combine(&[1.0], &[2.0, 3.0])
            .unwrap_err()
            .to_string()
            .contains("combine"));
        let a = [0.3, -1.0];
        let b = [2.0, 0.5];
        assert_eq!(combine(&a, &b).unwrap().global, combine(&b, &a).unwrap().global);
    }

    #[test]
    fn learnable_gradient_matches_finite_differences() {
        let (ps, enc) = encoder();
        let c = clip(9, 8);
        let loss = |p: &ParamSet| -> Result<(f64, crate::numcore::Gradients)> {
            let mut tape = Tape::new(p);
            let e = enc.forward(&mut tape, &c)?;
            let s = tape.sum_squares(e)?;
            Ok((tape.value(s).data()[0], tape.backward(s)?))
        };
        let (_, analytic) = loss(&ps).unwrap();
        assert!(analytic.get(enc.frozen.projection).data().iter().all(|&g| g == 0.0));
        let numeric = finite_diff_grad(|p| Ok(loss(p)?.0), &ps, 1e-4).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "speaker rel err {err}");
    }
}
