//! Reverse-mode tape.
//!
//! Each recorded node owns its forward value (parameters are read in place
//! from the bound [`ParamSet`]). [`Tape::backward`] walks the nodes in reverse
//! and only propagates into nodes that depend on a trainable parameter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels as k;
use super::{Gradients, Grid, ParamId, ParamSet};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNT {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        v: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Transpose {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    RepeatRow {
        v: Var,
    },
    Reshape {
        x: Var,
    },
    Conv1d {
        x: Var,
        k: Var,
        b: Option<Var>,
    },
    MeanStdPool {
        x: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    MaskedMse {
        pred: Var,
        target: Var,
        mask: Var,
        count: f64,
    },
}

struct Node {
    value: Option<Grid>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation over a bound parameter set.
pub struct Tape<'p> {
    params: &'p ParamSet,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

fn check_matrix(op: &'static str, g: &Grid) -> Result<()> {
    if g.shape().len() > 2 {
        return Err(Error::Contract(format!(
            "{op} expects a matrix, got shape {:?}",
            g.shape()
        )));
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Grid {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter node holds its value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Grid, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Domain(
                format!("non-finite output from {op:?}").chars().take(120).collect(),
            ));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; gradients never flow into it.
    pub fn input(&mut self, value: Grid) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// The node for a bound parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xg, wg) = (self.value(x), self.value(w));
        check_matrix("linear", xg)?;
        if wg.shape().len() != 2 || wg.shape()[0] != xg.cols() {
            return Err(dim_err("linear", xg.shape(), wg.shape()));
        }
        let (t, a, bc) = (xg.rows(), xg.cols(), wg.cols());
        let bias = match b {
            Some(b) => {
                let bg = self.value(b);
                if bg.len() != bc {
                    return Err(dim_err("linear bias", wg.shape(), bg.shape()));
                }
                Some(bg.data())
            }
            None => None,
        };
        let out = k::linear_forward(xg.data(), t, a, wg.data(), bc, bias);
        let shape = if xg.shape().len() == 1 { vec![bc] } else { vec![t, bc] };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Grid::from_parts(shape, out), Op::Linear { x, w, b }, needs)
    }

    /// `a[T×S] · b[S×d]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ag, bg) = (self.value(a), self.value(b));
        if ag.shape().len() != 2 || bg.shape().len() != 2 || ag.cols() != bg.rows() {
            return Err(dim_err("matmul", ag.shape(), bg.shape()));
        }
        let (t, s, d) = (ag.rows(), ag.cols(), bg.cols());
        let mut out = vec![0.0; t * d];
        k::matmul_acc(ag.data(), t, s, bg.data(), d, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Grid::from_parts(vec![t, d], out), Op::MatMul { a, b }, needs)
    }

    /// `a[T×d] · b[S×d]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ag, bg) = (self.value(a), self.value(b));
        if ag.shape().len() != 2 || bg.shape().len() != 2 || ag.cols() != bg.cols() {
            return Err(dim_err("matmul_nt", ag.shape(), bg.shape()));
        }
        let (t, d, s) = (ag.rows(), ag.cols(), bg.rows());
        let out = k::matmul_nt(ag.data(), t, d, bg.data(), s);
        let needs = self.needs(a) || self.needs(b);
        self.push(Grid::from_parts(vec![t, s], out), Op::MatMulNT { a, b }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        let (ag, bg) = (self.value(a), self.value(b));
        if ag.shape() != bg.shape() {
            return Err(dim_err(name, ag.shape(), bg.shape()));
        }
        ag.zip_map(bg, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, needs)
    }

    /// Adds the vector `v[C]` to every row of `x[T×C]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xg, vg) = (self.value(x), self.value(v));
        if vg.len() != xg.cols() {
            return Err(dim_err("add_row", xg.shape(), vg.shape()));
        }
        let c = xg.cols();
        let mut out = xg.clone();
        for r in 0..xg.rows() {
            for (o, b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(vg.data()) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(out, Op::AddRow { x, v }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, s }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(k::gelu);
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let xg = self.value(x);
        check_matrix("layer_norm", xg)?;
        let (rows, cols) = (xg.rows(), xg.cols());
        let (gg, sg) = (self.value(gain), self.value(shift));
        if gg.len() != cols || sg.len() != cols {
            return Err(dim_err("layer_norm", xg.shape(), gg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Domain(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (y, xhat, rstd) = k::layer_norm_forward(xg.data(), rows, cols, gg.data(), sg.data(), eps);
        let shape = xg.shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            Grid::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xg = self.value(x);
        let mut out = xg.clone();
        k::softmax_rows_inplace(out.data_mut(), xg.rows(), xg.cols());
        let needs = self.needs(x);
        self.push(out, Op::Softmax { x }, needs)
    }

    /// Multi-head self-attention over a packed `[T × 3C]` grid.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let g = self.value(qkv);
        if g.shape().len() != 2 || !g.cols().is_multiple_of(3) {
            return Err(Error::Contract(format!(
                "attention expects [T, 3C], got {:?}",
                g.shape()
            )));
        }
        let (t, c) = (g.rows(), g.cols() / 3);
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("width {c} is not divisible by {heads} heads")));
        }
        let (out, probs) = k::attention_forward(g.data(), t, c, heads);
        let needs = self.needs(qkv);
        self.push(
            Grid::from_parts(vec![t, c], out),
            Op::Attention { qkv, heads, probs },
            needs,
        )
    }

    /// Attention probabilities `[H × T × T]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xg = self.value(x);
        check_matrix("transpose", xg)?;
        let out = xg.transpose();
        let needs = self.needs(x);
        self.push(out, Op::Transpose { x }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xg = self.value(x);
        check_matrix("slice_cols", xg)?;
        if len == 0 || start + len > xg.cols() {
            return Err(dim_err("slice_cols", xg.shape(), &[start, len]));
        }
        let rows = xg.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xg.row(r)[start..start + len]);
        }
        let needs = self.needs(x);
        self.push(
            Grid::from_parts(vec![rows, len], out),
            Op::SliceCols { x, start },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let g = self.value(p);
            check_matrix("concat_cols", g)?;
            if g.rows() != rows {
                return Err(dim_err("concat_cols", self.value(first).shape(), g.shape()));
            }
            total += g.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Grid::from_parts(vec![rows, total], out),
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xg = self.value(x);
        if xg.shape().len() != 2 || len == 0 || start + len > xg.rows() {
            return Err(dim_err("slice_rows", xg.shape(), &[start, len]));
        }
        let c = xg.cols();
        let out = xg.data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        self.push(Grid::from_parts(vec![len, c], out), Op::SliceRows { x, start }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let g = self.value(p);
            if g.shape().len() != 2 || g.cols() != cols {
                return Err(dim_err("concat_rows", self.value(first).shape(), g.shape()));
            }
            rows += g.rows();
            data.extend_from_slice(g.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Grid::from_parts(vec![rows, cols], data),
            Op::ConcatRows { parts: parts.to_vec() },
            needs,
        )
    }

    /// Broadcasts the vector `v[C]` to `[n × C]`.
    pub fn repeat_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let vg = self.value(v);
        if n == 0 {
            return Err(Error::Empty("repeat_row"));
        }
        let c = vg.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(vg.data());
        }
        let needs = self.needs(v);
        self.push(Grid::from_parts(vec![n, c], data), Op::RepeatRow { v }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape { x }, needs)
    }

    /// Same-padded cross-correlation; `x[Cin×T]`, `kernels[Cout×Cin×K]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let (xg, kg) = (self.value(x), self.value(kernels));
        if xg.shape().len() != 2 || kg.shape().len() != 3 || kg.shape()[1] != xg.rows() {
            return Err(dim_err("conv1d", xg.shape(), kg.shape()));
        }
        let (cout, cin, ksize) = (kg.shape()[0], kg.shape()[1], kg.shape()[2]);
        if ksize % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {ksize}")));
        }
        let t = xg.cols();
        let bias_data = match bias {
            Some(b) => {
                let bg = self.value(b);
                if bg.len() != cout {
                    return Err(dim_err("conv1d bias", kg.shape(), bg.shape()));
                }
                Some(bg.data())
            }
            None => None,
        };
        let y = k::conv1d_forward(xg.data(), cin, t, kg.data(), cout, ksize, bias_data);
        let needs = self.needs(x) || self.needs(kernels) || bias.is_some_and(|b| self.needs(b));
        self.push(
            Grid::from_parts(vec![cout, t], y),
            Op::Conv1d { x, k: kernels, b: bias },
            needs,
        )
    }

    /// `[C×T] → [2C]` mean and population standard deviation over time.
    pub fn mean_std_pool(&mut self, x: Var) -> Result<Var> {
        let xg = self.value(x);
        if xg.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "mean_std_pool expects [C, T], got {:?}",
                xg.shape()
            )));
        }
        let out = k::mean_std_pool_forward(xg.data(), xg.rows(), xg.cols());
        let needs = self.needs(x);
        self.push(Grid::vector(out), Op::MeanStdPool { x }, needs)
    }

    /// Gathers rows of `table[V×C]` by index into `[ids.len() × C]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tg = self.value(table);
        if ids.is_empty() {
            return Err(Error::Empty("embed"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tg.rows()) {
            return Err(Error::Domain(format!(
                "token id {bad} outside table of {} rows",
                tg.rows()
            )));
        }
        let c = tg.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tg.row(i));
        }
        let needs = self.needs(table);
        self.push(
            Grid::from_parts(vec![ids.len(), c], data),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Grid::scalar(s), Op::Sum { x }, needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        self.push(Grid::scalar(s), Op::SumSquares { x }, needs)
    }

    /// Mean of `mask ⊙ (pred − target)²` over elements where the mask is set.
    /// Returns the loss node and the number of masked elements; an all-zero
    /// mask yields a loss of exactly 0.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Var) -> Result<(Var, usize)> {
        let (pg, tg, mg) = (self.value(pred), self.value(target), self.value(mask));
        if pg.shape() != tg.shape() || pg.shape() != mg.shape() {
            return Err(dim_err("masked_mse", pg.shape(), tg.shape()));
        }
        let count: f64 = mg.data().iter().sum();
        let loss = if count > 0.0 {
            let mut s = 0.0;
            for ((p, t), m) in pg.data().iter().zip(tg.data()).zip(mg.data()) {
                let d = p - t;
                s += m * d * d;
            }
            s / count
        } else {
            0.0
        };
        let needs = self.needs(pred) || self.needs(target);
        let v = self.push(
            Grid::scalar(loss),
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
            needs,
        )?;
        Ok((v, count as usize))
    }

    /// Exact reverse-mode gradients of the scalar `loss` for every parameter of
    /// the bound set. Frozen parameters receive all-zero grids.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads = Gradients::zeros_like(self.params);
        if !self.needs(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(Var(i), &node.op, g, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, me: Var, op: &Op, g: Vec<f64>, adj: &mut [Option<Vec<f64>>], grads: &mut Gradients) {
        match op {
            Op::Input => {}
            Op::Param(id) => {
                if self.params.is_trainable(*id) {
                    for (d, x) in grads.get_mut(*id).data_mut().iter_mut().zip(&g) {
                        *d += x;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xg, wg) = (self.value(*x), self.value(*w));
                let (t, a, bc) = (xg.rows(), xg.cols(), wg.cols());
                if self.needs(*x) {
                    self.acc(adj, *x, k::matmul_nt(&g, t, bc, wg.data(), a));
                }
                self.acc_with(adj, *w, |dw| k::matmul_tn_acc(xg.data(), t, a, &g, bc, dw));
                if let Some(b) = b {
                    self.acc_with(adj, *b, |db| k::column_sums_acc(&g, t, bc, db));
                }
            }
            Op::MatMul { a, b } => {
                let (ag, bg) = (self.value(*a), self.value(*b));
                let (t, s, d) = (ag.rows(), ag.cols(), bg.cols());
                if self.needs(*a) {
                    self.acc(adj, *a, k::matmul_nt(&g, t, d, bg.data(), s));
                }
                self.acc_with(adj, *b, |db| k::matmul_tn_acc(ag.data(), t, s, &g, d, db));
            }
            Op::MatMulNT { a, b } => {
                let (ag, bg) = (self.value(*a), self.value(*b));
                let (t, d, s) = (ag.rows(), ag.cols(), bg.rows());
                self.acc_with(adj, *a, |da| k::matmul_acc(&g, t, s, bg.data(), d, da));
                self.acc_with(adj, *b, |db| k::matmul_tn_acc(&g, t, s, ag.data(), d, db));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.acc(adj, *a, g.clone());
                }
                self.acc(adj, *b, g);
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.acc(adj, *a, g.clone());
                }
                self.acc(adj, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (ag, bg) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(adj, *a, g.iter().zip(bg.data()).map(|(d, y)| d * y).collect());
                }
                if self.needs(*b) {
                    self.acc(adj, *b, g.iter().zip(ag.data()).map(|(d, x)| d * x).collect());
                }
            }
            Op::AddRow { x, v } => {
                let xg = self.value(*x);
                let (t, c) = (xg.rows(), xg.cols());
                self.acc_with(adj, *v, |dv| k::column_sums_acc(&g, t, c, dv));
                self.acc(adj, *x, g);
            }
            Op::Scale { x, s } => {
                self.acc(adj, *x, g.iter().map(|v| v * s).collect());
            }
            Op::Gelu { x } => {
                let xg = self.value(*x);
                self.acc(
                    adj,
                    *x,
                    g.iter().zip(xg.data()).map(|(d, &v)| d * k::gelu_grad(v)).collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let xg = self.value(*x);
                let (rows, cols) = (xg.rows(), xg.cols());
                let gain_vals = self.value(*gain).data();
                let mut dgain = self.needs(*gain).then(|| vec![0.0; cols]);
                let mut dshift = self.needs(*shift).then(|| vec![0.0; cols]);
                let dx = k::layer_norm_backward(
                    &g,
                    xhat,
                    rstd,
                    rows,
                    cols,
                    gain_vals,
                    dgain.as_deref_mut(),
                    dshift.as_deref_mut(),
                );
                if let Some(dg) = dgain {
                    self.acc(adj, *gain, dg);
                }
                if let Some(ds) = dshift {
                    self.acc(adj, *shift, ds);
                }
                self.acc(adj, *x, dx);
            }
            Op::Softmax { x } => {
                let y = self.value(me);
                self.acc(adj, *x, k::softmax_rows_backward(y.data(), &g, y.rows(), y.cols()));
            }
            Op::Attention { qkv, heads, probs } => {
                let qg = self.value(*qkv);
                let (t, c) = (qg.rows(), qg.cols() / 3);
                self.acc(adj, *qkv, k::attention_backward(qg.data(), probs, &g, t, c, *heads));
            }
            Op::Transpose { x } => {
                let y = self.value(me);
                let gt = Grid::from_parts(y.shape().to_vec(), g).transpose();
                self.acc(adj, *x, gt.into_data());
            }
            Op::SliceCols { x, start } => {
                let xg = self.value(*x);
                let (rows, cols) = (xg.rows(), xg.cols());
                let len = g.len() / rows;
                self.acc_with(adj, *x, |dx| {
                    for r in 0..rows {
                        for j in 0..len {
                            dx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let y = self.value(me);
                let (rows, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(adj, p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                self.acc_with(adj, *x, |dx| {
                    for (d, v) in dx[start * c..start * c + g.len()].iter_mut().zip(&g) {
                        *d += v;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        self.acc(adj, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::RepeatRow { v } => {
                let c = self.value(*v).len();
                let n = g.len() / c;
                self.acc_with(adj, *v, |dv| k::column_sums_acc(&g, n, c, dv));
            }
            Op::Reshape { x } => self.acc(adj, *x, g),
            Op::Conv1d { x, k: kv, b } => {
                let (xg, kg) = (self.value(*x), self.value(*kv));
                let (cout, cin, ksize) = (kg.shape()[0], kg.shape()[1], kg.shape()[2]);
                let t = xg.cols();
                let mut dx = self.needs(*x).then(|| vec![0.0; cin * t]);
                let mut dk = self.needs(*kv).then(|| vec![0.0; kg.len()]);
                let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; cout]);
                k::conv1d_backward(
                    xg.data(),
                    cin,
                    t,
                    kg.data(),
                    cout,
                    ksize,
                    &g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(adj, *x, dx);
                }
                if let Some(dk) = dk {
                    self.acc(adj, *kv, dk);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(adj, *b, db);
                }
            }
            Op::MeanStdPool { x } => {
                let xg = self.value(*x);
                let out = self.value(me);
                let dx = k::mean_std_pool_backward(xg.data(), out.data(), &g, xg.rows(), xg.cols());
                self.acc(adj, *x, dx);
            }
            Op::Embed { table, ids } => {
                let c = self.value(*table).cols();
                self.acc_with(adj, *table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, v) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.acc(adj, *x, vec![g[0]; n]);
            }
            Op::SumSquares { x } => {
                let xg = self.value(*x);
                self.acc(adj, *x, xg.data().iter().map(|v| 2.0 * v * g[0]).collect());
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                if *count <= 0.0 {
                    return;
                }
                let (pg, tg, mg) = (self.value(*pred), self.value(*target), self.value(*mask));
                let s = 2.0 * g[0] / count;
                let dp: Vec<f64> = pg
                    .data()
                    .iter()
                    .zip(tg.data())
                    .zip(mg.data())
                    .map(|((p, t), m)| s * m * (p - t))
                    .collect();
                if self.needs(*target) {
                    self.acc(adj, *target, dp.iter().map(|v| -v).collect());
                }
                self.acc(adj, *pred, dp);
            }
        }
    }
}
