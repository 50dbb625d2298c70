//! Text-visual fusion: a toy text encoder, one bottleneck adapter per visual
//! modality, and a residual fusion layer producing the fused condition `z_tv`.
//!
//! Dropped modalities are replaced by learned null embeddings broadcast over
//! time, so "condition absent" is itself a trained input.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{upsample_tokens, TextSequence};
use crate::error::{dim_err, Result};
use crate::numcore::nn::{normal_grid, run_stack, stack, BlockConfig, Init, LayerNorm, Linear};
use crate::numcore::{nn::AttentionBlock, Grid, ParamId, ParamSet, Tape, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub vocab: usize,
    pub text_width: usize,
    pub text_blocks: usize,
    pub face_channels: usize,
    pub lip_channels: usize,
    pub bottleneck: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

/// Which conditions reach the fusion layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modalities {
    pub text: bool,
    pub face: bool,
    pub lip: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        text: true,
        face: true,
        lip: true,
    };
    pub const NONE: Modalities = Modalities {
        text: false,
        face: false,
        lip: false,
    };
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub blocks: Vec<AttentionBlock>,
}

impl TextEncoder {
    fn new(ps: &mut ParamSet, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        let table = ps.add(
            "text.embedding",
            normal_grid(&[cfg.vocab, cfg.text_width], 1.0, rng),
            true,
        )?;
        let block = BlockConfig {
            width: cfg.text_width,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
            residual_init: Init::Scaled(0.5),
        };
        let blocks = stack(ps, "text.block", cfg.text_blocks, block, rng)?;
        Ok(TextEncoder { table, blocks })
    }

    /// Embeds per-frame token ids and runs the attention stack: `[T × C_text]`.
    pub fn forward_frames(&self, tape: &mut Tape<'_>, frame_ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.table);
        let x = tape.embed(table, frame_ids)?;
        run_stack(&self.blocks, tape, x)
    }

    /// Tokens upsampled to `frames` by even repetition, then encoded.
    pub fn encode(&self, params: &ParamSet, text: &TextSequence, frames: usize) -> Result<Grid> {
        let ids = upsample_tokens(text.tokens(), frames)?;
        let mut tape = Tape::new(params);
        let y = self.forward_frames(&mut tape, &ids)?;
        Ok(tape.value(y).clone())
    }
}

/// Bottleneck adapter: `h = in(v)`, `out = h + up(gelu(down(ln(h))))`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub in_proj: Linear,
    pub norm: LayerNorm,
    pub down: Linear,
    pub up: Linear,
    pub null: ParamId,
}

impl Adapter {
    fn new(ps: &mut ParamSet, name: &str, channels: usize, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.text_width;
        Ok(Adapter {
            in_proj: Linear::new(ps, &format!("{name}.in"), channels, c, Init::Scaled(1.0), rng)?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c)?,
            down: Linear::new(ps, &format!("{name}.down"), c, cfg.bottleneck, Init::Scaled(1.0), rng)?,
            up: Linear::new(ps, &format!("{name}.up"), cfg.bottleneck, c, Init::Zeros, rng)?,
            null: ps.add(format!("{name}.null"), normal_grid(&[c], 0.1, rng), true)?,
        })
    }

    /// `visual` is `[T × F_v]`; output is `[T × C_text]`.
    pub fn forward(&self, tape: &mut Tape<'_>, visual: Var) -> Result<Var> {
        let channels = self.in_proj.inputs;
        let shape = tape.value(visual).shape().to_vec();
        if shape.len() != 2 || shape[1] != channels {
            return Err(dim_err(
                "adapter",
                &shape,
                &[shape.first().copied().unwrap_or(0), channels],
            ));
        }
        let h = self.in_proj.forward(tape, visual)?;
        let n = self.norm.forward(tape, h)?;
        let d = self.down.forward(tape, n)?;
        let g = tape.gelu(d)?;
        let u = self.up.forward(tape, g)?;
        tape.add(h, u)
    }

    pub fn adapt(&self, params: &ParamSet, visual: &Grid) -> Result<Grid> {
        let mut tape = Tape::new(params);
        let v = tape.input(visual.clone())?;
        let y = self.forward(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }
}

/// `z_tv = text + W·[text, face, lip] + b`.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub linear: Linear,
    pub text_null: ParamId,
}

impl FusionLayer {
    fn new(ps: &mut ParamSet, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.text_width;
        Ok(FusionLayer {
            linear: Linear::new(ps, "fusion.linear", 3 * c, c, Init::Zeros, rng)?,
            text_null: ps.add("fusion.text_null", normal_grid(&[c], 0.1, rng), true)?,
        })
    }

    /// Fuses already-resolved inputs (each `[T × C_text]`).
    pub fn forward(&self, tape: &mut Tape<'_>, text: Var, face: Var, lip: Var) -> Result<Var> {
        let frames = tape.value(text).rows();
        for v in [face, lip] {
            if tape.value(v).rows() != frames {
                return Err(dim_err("fuse", tape.value(text).shape(), tape.value(v).shape()));
            }
        }
        let cat = tape.concat_cols(&[text, face, lip])?;
        let mixed = self.linear.forward(tape, cat)?;
        tape.add(text, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub text: TextEncoder,
    pub face: Adapter,
    pub lip: Adapter,
    pub fusion: FusionLayer,
}

/// Fusion inputs for one utterance on the mel time base.
#[derive(Clone, Debug)]
pub struct FusionInputs<'a> {
    pub frame_ids: &'a [usize],
    /// `[T × F_face]`
    pub face: Option<&'a Grid>,
    /// `[T × F_lip]`
    pub lip: Option<&'a Grid>,
}

impl FusionModule {
    pub fn new(ps: &mut ParamSet, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(FusionModule {
            text: TextEncoder::new(ps, cfg, rng)?,
            face: Adapter::new(ps, "face_adapter", cfg.face_channels, cfg, rng)?,
            lip: Adapter::new(ps, "lip_adapter", cfg.lip_channels, cfg, rng)?,
            fusion: FusionLayer::new(ps, cfg, rng)?,
        })
    }

    /// Resolves each modality to its encoding or its null embedding, then
    /// fuses. A dropped modality's input is never read.
    pub fn forward(&self, tape: &mut Tape<'_>, inputs: &FusionInputs<'_>, present: Modalities) -> Result<Var> {
        let frames = inputs.frame_ids.len();
        let text = if present.text {
            self.text.forward_frames(tape, inputs.frame_ids)?
        } else {
            let null = tape.param(self.fusion.text_null);
            tape.repeat_row(null, frames)?
        };
        let face = self.resolve(tape, &self.face, inputs.face.filter(|_| present.face), frames)?;
        let lip = self.resolve(tape, &self.lip, inputs.lip.filter(|_| present.lip), frames)?;
        self.fusion.forward(tape, text, face, lip)
    }

    fn resolve(&self, tape: &mut Tape<'_>, adapter: &Adapter, visual: Option<&Grid>, frames: usize) -> Result<Var> {
        match visual {
            Some(v) => {
                if v.rows() != frames {
                    return Err(dim_err("fuse", &[frames], v.shape()));
                }
                let x = tape.input(v.clone())?;
                adapter.forward(tape, x)
            }
            None => {
                let null = tape.param(adapter.null);
                tape.repeat_row(null, frames)
            }
        }
    }

    pub fn fuse(&self, params: &ParamSet, inputs: &FusionInputs<'_>, present: Modalities) -> Result<Grid> {
        let mut tape = Tape::new(params);
        let z = self.forward(&mut tape, inputs, present)?;
        Ok(tape.value(z).clone())
    }
}

/// The fusion layer on plain grids, with `None` meaning "dropped" (the null
/// embedding is substituted).
pub fn fuse(
    layer: &FusionLayer,
    face_adapter: &Adapter,
    lip_adapter: &Adapter,
    params: &ParamSet,
    text_emb: &Grid,
    face_adapted: Option<&Grid>,
    lip_adapted: Option<&Grid>,
) -> Result<Grid> {
    let frames = text_emb.rows();
    let mut tape = Tape::new(params);
    let text = tape.input(text_emb.clone())?;
    let pick = |tape: &mut Tape<'_>, g: Option<&Grid>, null: ParamId| -> Result<Var> {
        match g {
            Some(g) => tape.input(g.clone()),
            None => {
                let n = tape.param(null);
                tape.repeat_row(n, frames)
            }
        }
    };
    let face = pick(&mut tape, face_adapted, face_adapter.null)?;
    let lip = pick(&mut tape, lip_adapted, lip_adapter.null)?;
    let z = layer.forward(&mut tape, text, face, lip)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::nn::normal_grid;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use crate::rng::rng_from_seed;
    use alloc::vec;

    fn cfg() -> FusionConfig {
        FusionConfig {
            vocab: 32,
            text_width: 8,
            text_blocks: 2,
            face_channels: 8,
            lip_channels: 8,
            bottleneck: 4,
            heads: 4,
            ffn_mult: 2,
        }
    }

    fn module() -> (ParamSet, FusionModule) {
        let mut ps = ParamSet::new(1);
        let m = FusionModule::new(&mut ps, &cfg(), &mut rng_from_seed(1)).unwrap();
        (ps, m)
    }

    fn randomize(ps: &mut ParamSet, id: ParamId, seed: u64) {
        let shape = ps.get(id).shape().to_vec();
        ps.assign(id, normal_grid(&shape, 0.3, &mut rng_from_seed(seed)))
            .unwrap();
    }

    #[test]
    fn single_token_fills_every_frame() {
        let (ps, m) = module();
        let text = TextSequence::new(vec![5]).unwrap();
        let mut tape = Tape::new(&ps);
        let table = tape.param(m.text.table);
        let x = tape.embed(table, &upsample_tokens(text.tokens(), 4).unwrap()).unwrap();
        let row = ps.get(m.text.table).row(5);
        for r in 0..4 {
            assert_eq!(tape.value(x).row(r), row);
        }
        // Identical frames stay identical through attention without positions.
        let y = m.text.encode(&ps, &text, 4).unwrap();
        for r in 1..4 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn text_length_error() {
        let (ps, m) = module();
        let text = TextSequence::new(vec![1, 2, 3]).unwrap();
        assert!(matches!(m.text.encode(&ps, &text, 2), Err(crate::Error::Length(_))));
    }

    #[test]
    fn relabeling_symmetry() {
        let (ps, m) = module();
        let text = TextSequence::new(vec![3, 9, 3, 17]).unwrap();
        let base = m.text.encode(&ps, &text, 10).unwrap();
        // Swap rows 3 and 9 of the table and relabel the tokens to match.
        let mut swapped = ps.clone();
        let mut table = ps.get(m.text.table).clone();
        let (r3, r9) = (table.row(3).to_vec(), table.row(9).to_vec());
        table.row_mut(3).copy_from_slice(&r9);
        table.row_mut(9).copy_from_slice(&r3);
        swapped.assign(m.text.table, table).unwrap();
        let relabeled = TextSequence::new(vec![9, 3, 9, 17]).unwrap();
        assert_eq!(m.text.encode(&swapped, &relabeled, 10).unwrap(), base);
    }

    #[test]
    fn adapter_is_in_projection_at_init() {
        let (ps, m) = module();
        let v = normal_grid(&[6, 8], 1.0, &mut rng_from_seed(4));
        let got = m.face.adapt(&ps, &v).unwrap();
        let w = ps.get(m.face.in_proj.w);
        let b = ps.get(m.face.in_proj.b);
        assert_eq!(got, crate::numcore::ops::linear(&v, w, b).unwrap());
    }

    #[test]
    fn zero_visual_zero_bias_gives_zero() {
        let (mut ps, m) = module();
        randomize(&mut ps, m.lip.up.w, 5);
        let out = m.lip.adapt(&ps, &Grid::zeros(&[5, 8])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_channel_mismatch() {
        let (ps, m) = module();
        assert!(matches!(
            m.face.adapt(&ps, &Grid::zeros(&[5, 7])),
            Err(crate::Error::Dimension { .. })
        ));
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let (mut ps, m) = module();
        randomize(&mut ps, m.face.up.w, 6);
        randomize(&mut ps, m.face.norm.gain, 7);
        let mut only = ParamSet::new(0);
        // Restrict the check to adapter parameters by freezing everything else.
        for e in ps.entries() {
            let keep = e.name.starts_with("face_adapter") && !e.name.ends_with("null");
            only.add(e.name.clone(), e.value.clone(), keep).unwrap();
        }
        let v = normal_grid(&[5, 8], 1.0, &mut rng_from_seed(8));
        let probe = normal_grid(&[5, 8], 1.0, &mut rng_from_seed(9));
        let loss = |p: &ParamSet| -> Result<(f64, Option<crate::numcore::Gradients>)> {
            let mut tape = Tape::new(p);
            let x = tape.input(v.clone())?;
            let y = m.face.forward(&mut tape, x)?;
            let pr = tape.input(probe.clone())?;
            let l = tape.mul(y, pr)?;
            let l = tape.sum(l)?;
            Ok((tape.value(l).data()[0], Some(tape.backward(l)?)))
        };
        let analytic = loss(&only).unwrap().1.unwrap();
        let numeric = finite_diff_grad(|p| Ok(loss(p)?.0), &only, 1e-4).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "adapter rel err {err}");
    }

    #[test]
    fn identity_at_init() {
        let (ps, m) = module();
        let ids = upsample_tokens(&[1, 4, 7], 9).unwrap();
        let face = normal_grid(&[9, 8], 1.0, &mut rng_from_seed(10));
        let lip = normal_grid(&[9, 8], 1.0, &mut rng_from_seed(11));
        let inputs = FusionInputs {
            frame_ids: &ids,
            face: Some(&face),
            lip: Some(&lip),
        };
        let z = m.fuse(&ps, &inputs, Modalities::ALL).unwrap();
        let mut tape = Tape::new(&ps);
        let t = m.text.forward_frames(&mut tape, &ids).unwrap();
        assert_eq!(&z, tape.value(t));
    }

    #[test]
    fn dropped_inputs_are_not_read() {
        let (mut ps, m) = module();
        randomize(&mut ps, m.fusion.linear.w, 12);
        let ids = upsample_tokens(&[2, 3], 6).unwrap();
        let face = normal_grid(&[6, 8], 1.0, &mut rng_from_seed(13));
        let lip_a = normal_grid(&[6, 8], 1.0, &mut rng_from_seed(14));
        let lip_b = normal_grid(&[6, 8], 1.0, &mut rng_from_seed(15));
        let run = |lip: &Grid, present| {
            let inputs = FusionInputs {
                frame_ids: &ids,
                face: Some(&face),
                lip: Some(lip),
            };
            m.fuse(&ps, &inputs, present).unwrap()
        };
        let no_lip = Modalities {
            lip: false,
            ..Modalities::ALL
        };
        assert_eq!(run(&lip_a, no_lip), run(&lip_b, no_lip));
        assert_ne!(run(&lip_a, Modalities::ALL), run(&lip_b, Modalities::ALL));
        // Face dropped as well: output depends only on text and null embeddings.
        let text_only = Modalities {
            face: false,
            lip: false,
            text: true,
        };
        let other_face = normal_grid(&[6, 8], 1.0, &mut rng_from_seed(16));
        let inputs = FusionInputs {
            frame_ids: &ids,
            face: Some(&other_face),
            lip: Some(&lip_b),
        };
        assert_eq!(m.fuse(&ps, &inputs, text_only).unwrap(), run(&lip_a, text_only));
    }

    #[test]
    fn dropping_equals_passing_null() {
        let (mut ps, m) = module();
        randomize(&mut ps, m.fusion.linear.w, 17);
        let text = normal_grid(&[4, 8], 1.0, &mut rng_from_seed(18));
        let face = normal_grid(&[4, 8], 1.0, &mut rng_from_seed(19));
        let null_lip = {
            let n = ps.get(m.lip.null);
            Grid::from_fn(&[4, 8], |i| n.data()[i % 8])
        };
        let dropped = fuse(&m.fusion, &m.face, &m.lip, &ps, &text, Some(&face), None).unwrap();
        let manual = fuse(&m.fusion, &m.face, &m.lip, &ps, &text, Some(&face), Some(&null_lip)).unwrap();
        assert_eq!(dropped, manual);
    }

    #[test]
    fn fusion_layer_is_affine() {
        let (mut ps, m) = module();
        randomize(&mut ps, m.fusion.linear.w, 20);
        randomize(&mut ps, m.fusion.linear.b, 21);
        let g = |s| normal_grid(&[5, 8], 1.0, &mut rng_from_seed(s));
        let (a, b) = ([g(22), g(23), g(24)], [g(25), g(26), g(27)]);
        let sum: Vec<Grid> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x.zip_map(y, |p, q| p + q).unwrap())
            .collect();
        let zero = Grid::zeros(&[5, 8]);
        let f = |x: &[Grid]| fuse(&m.fusion, &m.face, &m.lip, &ps, &x[0], Some(&x[1]), Some(&x[2])).unwrap();
        let (fab, fa, fb) = (f(&sum), f(&a), f(&b));
        let f0 = f(&[zero.clone(), zero.clone(), zero]);
        for i in 0..fab.len() {
            let r = fab.data()[i] - fa.data()[i] - fb.data()[i] + f0.data()[i];
            assert!(r.abs() < 1e-10, "affinity residual {r}");
        }
    }
}
