//! Backward against central finite differences on every tape operation and on
//! the full tiny model.

use alloc::string::String;
use alloc::vec::Vec;

use crate::datamodel::MelGrid;
use crate::error::Result;
use crate::numcore::nn::{normal_grid, AttentionBlock, BlockConfig, Init};
use crate::numcore::{finite_diff_grad, max_relative_error, ParamId, ParamSet, Tape, Var};
use crate::rng::rng_from_seed;

use super::{ConditionFlags, ModelConfig, SyncVoiceModel, TrainItem};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub parameters: usize,
    pub max_relative_error: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < FD_TOLERANCE
    }
}

type Loss<'a> = dyn Fn(&mut Tape<'_>) -> Result<Var> + 'a;

fn compare(name: &str, ps: &ParamSet, f: &Loss<'_>) -> Result<GradCheckRow> {
    let mut tape = Tape::new(ps);
    let loss = f(&mut tape)?;
    let analytic = tape.backward(loss)?;
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new(p);
            let l = f(&mut t)?;
            Ok(t.value(l).data()[0])
        },
        ps,
        FD_STEP,
    )?;
    Ok(GradCheckRow {
        name: name.into(),
        parameters: ps.entries().iter().filter(|e| e.trainable).map(|e| e.value.len()).sum(),
        max_relative_error: max_relative_error(&analytic, &numeric),
    })
}

/// Weighted sum against a fixed random probe so each output element gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let probe = tape.input(normal_grid(&shape, 1.0, &mut rng_from_seed(seed)))?;
    let p = tape.mul(y, probe)?;
    tape.sum(p)
}

fn leaf(ps: &mut ParamSet, name: &str, shape: &[usize], seed: u64) -> Result<ParamId> {
    ps.add(name, normal_grid(shape, 1.0, &mut rng_from_seed(seed)), true)
}

fn op_rows() -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();

    let mut ps = ParamSet::new(0);
    let (x, w, b) = (
        leaf(&mut ps, "x", &[3, 4], 1)?,
        leaf(&mut ps, "w", &[4, 5], 2)?,
        leaf(&mut ps, "b", &[5], 3)?,
    );
    rows.push(compare("linear", &ps, &|t| {
        let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
        let y = t.linear(xv, wv, Some(bv))?;
        project(t, y, 9)
    })?);

    let mut ps = ParamSet::new(0);
    let x = leaf(&mut ps, "x", &[4, 6], 4)?;
    rows.push(compare("gelu", &ps, &|t| {
        let xv = t.param(x);
        let y = t.gelu(xv)?;
        project(t, y, 10)
    })?);

    let mut ps = ParamSet::new(0);
    let (x, g, s) = (
        leaf(&mut ps, "x", &[3, 6], 5)?,
        leaf(&mut ps, "g", &[6], 6)?,
        leaf(&mut ps, "s", &[6], 7)?,
    );
    rows.push(compare("layer_norm", &ps, &|t| {
        let (xv, gv, sv) = (t.param(x), t.param(g), t.param(s));
        let y = t.layer_norm(xv, gv, sv, 1e-5)?;
        project(t, y, 11)
    })?);

    let mut ps = ParamSet::new(0);
    let (x, k, b) = (
        leaf(&mut ps, "x", &[3, 7], 8)?,
        leaf(&mut ps, "k", &[2, 3, 3], 9)?,
        leaf(&mut ps, "b", &[2], 10)?,
    );
    rows.push(compare("conv1d", &ps, &|t| {
        let (xv, kv, bv) = (t.param(x), t.param(k), t.param(b));
        let y = t.conv1d(xv, kv, Some(bv))?;
        project(t, y, 12)
    })?);

    let mut ps = ParamSet::new(0);
    let x = leaf(&mut ps, "x", &[4, 5], 11)?;
    rows.push(compare("mean_std_pool", &ps, &|t| {
        let xv = t.param(x);
        let y = t.mean_std_pool(xv)?;
        project(t, y, 13)
    })?);

    let mut ps = ParamSet::new(0);
    let cfg = BlockConfig {
        width: 8,
        heads: 4,
        ffn_mult: 2,
        residual_init: Init::Scaled(1.0),
    };
    let block = AttentionBlock::new(&mut ps, "blk", cfg, &mut rng_from_seed(12))?;
    let x = leaf(&mut ps, "x", &[5, 8], 13)?;
    rows.push(compare("attention_block", &ps, &|t| {
        let xv = t.param(x);
        let y = block.forward(t, xv)?;
        project(t, y, 14)
    })?);

    let mut ps = ParamSet::new(0);
    let a = leaf(&mut ps, "a", &[4, 3], 20)?;
    let b = leaf(&mut ps, "b", &[4, 2], 21)?;
    let table = leaf(&mut ps, "table", &[6, 5], 22)?;
    let v = leaf(&mut ps, "v", &[5], 23)?;
    rows.push(compare("structural", &ps, &|t| {
        let (av, bv, tab, vv) = (t.param(a), t.param(b), t.param(table), t.param(v));
        let cat = t.concat_cols(&[av, bv])?;
        let cat = t.add_row(cat, vv)?;
        let tr = t.transpose(cat)?;
        let sl = t.slice_cols(tr, 1, 2)?;
        let emb = t.embed(tab, &[0, 3, 3, 5, 1])?;
        let part = t.slice_rows(emb, 1, 3)?;
        let rep = t.repeat_row(vv, 2)?;
        let stacked = t.concat_rows(&[part, rep])?;
        let mm = t.matmul(stacked, tr)?;
        let gram = t.matmul_nt(sl, sl)?;
        let mm = t.matmul(gram, mm)?;
        let sm = t.softmax_rows(mm)?;
        let sc = t.scale(sm, 3.0)?;
        let d = t.sub(sc, mm)?;
        let r = t.reshape(d, &[20])?;
        project(t, r, 15)
    })?);

    let mut ps = ParamSet::new(0);
    let (p, q) = (
        leaf(&mut ps, "pred", &[3, 4], 24)?,
        leaf(&mut ps, "target", &[3, 4], 25)?,
    );
    let mask = crate::numcore::Grid::from_fn(&[3, 4], |i| (i % 3 != 0) as u8 as f64);
    rows.push(compare("masked_mse", &ps, &|t| {
        let (pv, qv) = (t.param(p), t.param(q));
        let m = t.input(mask.clone())?;
        let sq = t.sum_squares(pv)?;
        let (l, _) = t.masked_mse(pv, qv, m)?;
        t.add(l, sq)
    })?);

    Ok(rows)
}

/// The tiny model (D = 4, T = 6) with every condition switched on, so the
/// fusion module, the learnable speaker branch, and the estimator all carry
/// gradient. Weights are redrawn at unit-ish scale first: the zero-initialized
/// projections of a fresh model would hide most of the chain.
fn model_row() -> Result<GradCheckRow> {
    let mut model = SyncVoiceModel::new(ModelConfig::tiny(), 21)?;
    let mut rng = rng_from_seed(22);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.is_trainable(id) {
            let shape = model.params.get(id).shape().to_vec();
            model.params.assign(id, normal_grid(&shape, 0.5, &mut rng))?;
        }
    }
    let (d, t) = (model.mel_bins(), 6);
    let x1 = normal_grid(&[t, d], 1.0, &mut rng);
    let mut mask = crate::numcore::Grid::zeros(&[t, d]);
    for r in 1..t {
        mask.row_mut(r).iter_mut().for_each(|m| *m = 1.0);
    }
    let item = TrainItem {
        flags: ConditionFlags::ALL_WITH_BOTH,
        t: 0.37,
        x0: normal_grid(&[t, d], 1.0, &mut rng),
        segment: Some(MelGrid::new(x1.transpose())?),
        x1,
        mask,
        frame_ids: alloc::vec![3, 3, 7, 7, 1, 30],
        face: normal_grid(&[t, 8], 1.0, &mut rng),
        lip: normal_grid(&[t, 8], 1.0, &mut rng),
    };
    compare("full_model", &model.params, &|tape| item.loss(&model, tape))
}

/// Every row of the suite; a caller fails if any row's error reaches
/// [`FD_TOLERANCE`].
pub fn grad_check_suite() -> Result<Vec<GradCheckRow>> {
    let mut rows = op_rows()?;
    rows.push(model_row()?);
    Ok(rows)
}
