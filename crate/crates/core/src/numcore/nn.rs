//! Parameterized layers built from tape operations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::ops::LAYER_NORM_EPS;
use super::{Grid, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{cos, exp, log, sin, sqrt};
use crate::rng::Rng;

/// How a weight matrix is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
}

pub fn normal_grid(shape: &[usize], std: f64, rng: &mut Rng) -> Grid {
    Grid::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn init_grid(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Grid {
    match init {
        Init::Scaled(gain) => normal_grid(shape, gain / sqrt(fan_in as f64), rng),
        Init::Zeros => Grid::zeros(shape),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = ps.add(
            format!("{name}.w"),
            init_grid(&[inputs, outputs], inputs, init, rng),
            true,
        )?;
        let b = ps.add(format!("{name}.b"), Grid::zeros(&[outputs]), true)?;
        Ok(Linear { w, b, inputs, outputs })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Result<Self> {
        let gain = ps.add(format!("{name}.gain"), Grid::filled(&[width], 1.0), true)?;
        let shift = ps.add(format!("{name}.shift"), Grid::zeros(&[width]), true)?;
        Ok(LayerNorm { gain, shift })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, s) = (tape.param(self.gain), tape.param(self.shift));
        tape.layer_norm(x, g, s, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Init for the attention output projection and the second feed-forward
    /// layer; `Init::Zeros` makes the block an exact identity.
    pub residual_init: Init,
}

/// Pre-norm transformer block: multi-head self-attention with residual, then a
/// two-layer GELU feed-forward with residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(ps: &mut ParamSet, name: &str, cfg: BlockConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.width;
        if cfg.heads == 0 || !c.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "attention width {c} is not divisible by {} heads",
                cfg.heads
            )));
        }
        Ok(AttentionBlock {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), c)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), c, 3 * c, Init::Scaled(1.0), rng)?,
            out: Linear::new(ps, &format!("{name}.out"), c, c, cfg.residual_init, rng)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), c)?,
            ffn_in: Linear::new(
                ps,
                &format!("{name}.ffn_in"),
                c,
                cfg.ffn_mult * c,
                Init::Scaled(1.0),
                rng,
            )?,
            ffn_out: Linear::new(
                ps,
                &format!("{name}.ffn_out"),
                cfg.ffn_mult * c,
                c,
                cfg.residual_init,
                rng,
            )?,
            heads: cfg.heads,
        })
    }

    /// Returns the block output and the attention node (whose probabilities
    /// can be read back with [`Tape::attention_probs`]).
    pub fn forward_traced(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.ln_attn.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let attn = tape.attention(qkv, self.heads)?;
        let o = self.out.forward(tape, attn)?;
        let x = tape.add(x, o)?;
        let h = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn_in.forward(tape, h)?;
        let f = tape.gelu(f)?;
        let f = self.ffn_out.forward(tape, f)?;
        Ok((tape.add(x, f)?, attn))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, x)?.0)
    }
}

pub fn stack(ps: &mut ParamSet, name: &str, n: usize, cfg: BlockConfig, rng: &mut Rng) -> Result<Vec<AttentionBlock>> {
    (0..n)
        .map(|i| AttentionBlock::new(ps, &format!("{name}.{i}"), cfg, rng))
        .collect()
}

pub fn run_stack(blocks: &[AttentionBlock], tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, x)?;
    }
    Ok(x)
}

/// Evaluate one block on a plain grid.
pub fn attention_block(x: &Grid, block: &AttentionBlock, params: &ParamSet) -> Result<Grid> {
    let mut tape = Tape::new(params);
    let xv = tape.input(x.clone())?;
    let y = block.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Sinusoidal positional table `[T × C]` (sine on even, cosine on odd columns).
pub fn sinusoidal_positions(t: usize, c: usize) -> Grid {
    let mut data = vec![0.0; t * c];
    for pos in 0..t {
        for i in 0..c {
            let pair = (i / 2) as f64;
            let freq = exp(-log(10_000.0) * 2.0 * pair / c as f64);
            let angle = pos as f64 * freq;
            data[pos * c + i] = if i % 2 == 0 { sin(angle) } else { cos(angle) };
        }
    }
    Grid::from_parts(vec![t, c], data)
}

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]`, scaled by 1000 so the
/// lowest frequencies still resolve the unit interval.
pub fn timestep_features(t: f64, dim: usize) -> Grid {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = exp(-log(10_000.0) * i as f64 / half.max(1) as f64);
        let angle = 1000.0 * t * freq;
        data[i] = sin(angle);
        data[half + i] = cos(angle);
    }
    Grid::vector(data)
}
