//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are 2-D (`rows × cols`);
//! scalars are `1 × 1`. Parameters are read in place from the borrowed
//! [`ParameterStore`], so recording a pass never copies weights.

use std::collections::HashMap;

use super::kernels::{self, gemm};
use super::tensor::{ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Half-open token range of one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Value {
    Param(ParamId),
    Owned(Vec<f64>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        out_rows: usize,
        in_cols: usize,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    UncertaintyTerm {
        loss: Var,
        log_var: Var,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
}

/// Gradients of every parameter reached by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ParameterStore {
    /// Adds a backward pass's gradients into the parameters' grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            self.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Param(id) => self.store.get(*id).data(),
            Value::Owned(d) => d,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let (rows, cols) = self.store.get(id).dims2()?;
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Non-differentiable input.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "input {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        self.input(r, c, t.data().to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n, self.value(a), k, 1, self.value(b), n, 1, &mut out, n, 1, 0.0,
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `x · w[..out_rows, ..in_cols]ᵀ`, reading only the leading block of `w`.
    ///
    /// With `out_rows`/`in_cols` equal to the full dimensions this is an ordinary
    /// linear map; nested layers use it to run prefix factors without slicing.
    pub fn linear(&mut self, x: Var, w: Var, out_rows: usize, in_cols: usize) -> Result<Var> {
        let (n, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != in_cols || out_rows > wr || in_cols > wc {
            return Err(Error::Dimension(format!(
                "linear of {n}x{xc} input with block {out_rows}x{in_cols} of {wr}x{wc} weight"
            )));
        }
        let mut out = vec![0.0; n * out_rows];
        gemm(
            n,
            in_cols,
            out_rows,
            self.value(x),
            xc,
            1,
            self.value(w),
            1,
            wc,
            &mut out,
            out_rows,
            1,
            0.0,
        );
        Ok(self.push(
            n,
            out_rows,
            out,
            Op::Linear {
                x,
                w,
                out_rows,
                in_cols,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::Dimension(format!(
                "bias {:?} for {r}x{c} input",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        Ok(self.push(r, c, out, Op::AddRow(x, bias)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let (r, c) = self.shape(x);
        self.push(r, c, out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::Dimension(format!(
                "layer norm gain {:?} / bias {:?} for width {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x), c, LAYER_NORM_EPS);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c.max(1)) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` (e.g. token or position embeddings).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} of a {v}-row table")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of {r}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            rows.len(),
            c,
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Causal multi-head attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `tokens × d`; each segment attends only within itself.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) {
            return Err(Error::Dimension("q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads for width {d}")));
        }
        if segments.iter().any(|s| s.start + s.len > n) {
            return Err(Error::Dimension("segment exceeds token count".into()));
        }
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), d, segments, heads);
        Ok(self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = kernels::softmax_rows(self.value(x), c);
        self.push(r, c, out, Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, vocab) = self.shape(logits);
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "{} targets for {b} rows of logits",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {bad} with vocabulary {vocab}")));
        }
        if b == 0 {
            return Err(Error::Argument("cross entropy of an empty batch".into()));
        }
        let probs = kernels::softmax_rows(self.value(logits), vocab);
        let logp = kernels::log_softmax_rows(self.value(logits), vocab);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| logp[i * vocab + t])
            .sum::<f64>()
            / b as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// `exp(-s)·loss + s` for scalar `loss` and `s`.
    pub fn uncertainty_term(&mut self, loss: Var, log_var: Var) -> Result<Var> {
        if self.shape(loss) != (1, 1) || self.shape(log_var) != (1, 1) {
            return Err(Error::Dimension("uncertainty term needs scalars".into()));
        }
        let l = self.scalar(loss);
        let s = self.scalar(log_var);
        Ok(self.push(
            1,
            1,
            vec![(-s).exp() * l + s],
            Op::UncertaintyTerm { loss, log_var },
        ))
    }

    /// Reverse sweep from a scalar. May be called once per recorded pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this pass; record a new forward".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Value::Param(_) = node.value {
                grads[idx] = Some(up);
                continue;
            }
            self.backprop_node(idx, &up, &mut grads);
        }

        let mut entries = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Value::Param(id), Some(g)) = (&node.value, grads[idx].take()) {
                entries.push((*id, g));
            }
        }
        Ok(Gradients { entries })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = G·Bᵀ
                gemm(m, n, k, up, n, 1, bv, 1, n, self.grad_slot(grads, *a), k, 1, 1.0);
                // dB = Aᵀ·G
                gemm(k, m, n, av, 1, k, up, n, 1, self.grad_slot(grads, *b), n, 1, 1.0);
            }
            Op::Linear {
                x,
                w,
                out_rows,
                in_cols,
            } => {
                let (n, xc) = self.shape(*x);
                let (_, wc) = self.shape(*w);
                let (or, ic) = (*out_rows, *in_cols);
                let xv = self.value(*x);
                let wv = self.value(*w);
                gemm(n, or, ic, up, or, 1, wv, wc, 1, self.grad_slot(grads, *x), xc, 1, 1.0);
                gemm(or, n, ic, up, 1, or, xv, xc, 1, self.grad_slot(grads, *w), wc, 1, 1.0);
            }
            Op::Add(a, b) => {
                kernels::axpy(self.grad_slot(grads, *a), up, 1.0);
                kernels::axpy(self.grad_slot(grads, *b), up, 1.0);
            }
            Op::AddRow(x, bias) => {
                kernels::axpy(self.grad_slot(grads, *x), up, 1.0);
                let c = node.cols;
                let gb = self.grad_slot(grads, *bias);
                for row in up.chunks_exact(c.max(1)) {
                    kernels::axpy(gb, row, 1.0);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = self.grad_slot(grads, *x);
                for ((g, &u), &xi) in gx.iter_mut().zip(up).zip(xv) {
                    *g += u * kernels::gelu_grad(xi);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.cols;
                let gv = self.value(*gain);
                {
                    let gg = self.grad_slot(grads, *gain);
                    for (urow, xrow) in up.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((g, u), xh) in gg.iter_mut().zip(urow).zip(xrow) {
                            *g += u * xh;
                        }
                    }
                }
                {
                    let gb = self.grad_slot(grads, *bias);
                    for urow in up.chunks_exact(c) {
                        kernels::axpy(gb, urow, 1.0);
                    }
                }
                let gx = self.grad_slot(grads, *x);
                let mut dxhat = vec![0.0; c];
                for (r, ((urow, xrow), gxrow)) in up
                    .chunks_exact(c)
                    .zip(xhat.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                    .enumerate()
                {
                    for ((d, u), g) in dxhat.iter_mut().zip(urow).zip(gv) {
                        *d = u * g;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx = dxhat.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    for ((o, d), xh) in gxrow.iter_mut().zip(&dxhat).zip(xrow) {
                        *o += rstd[r] * (d - mean_d - xh * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.cols;
                let gt = self.grad_slot(grads, *table);
                for (row, &i) in up.chunks_exact(d.max(1)).zip(ids) {
                    kernels::axpy(&mut gt[i * d..(i + 1) * d], row, 1.0);
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.cols;
                let gx = self.grad_slot(grads, *x);
                for (row, &i) in up.chunks_exact(c.max(1)).zip(rows) {
                    kernels::axpy(&mut gx[i * c..(i + 1) * c], row, 1.0);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let d = node.cols;
                let n = node.rows;
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    up,
                    probs,
                    d,
                    segments,
                    *heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                kernels::axpy(self.grad_slot(grads, *q), &dq, 1.0);
                kernels::axpy(self.grad_slot(grads, *k), &dk, 1.0);
                kernels::axpy(self.grad_slot(grads, *v), &dv, 1.0);
            }
            Op::Softmax(x) => {
                let c = node.cols;
                let y = self.value(Var(idx));
                let gx = self.grad_slot(grads, *x);
                for ((yrow, urow), grow) in y
                    .chunks_exact(c)
                    .zip(up.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let dot: f64 = yrow.iter().zip(urow).map(|(a, b)| a * b).sum();
                    for ((g, yi), ui) in grow.iter_mut().zip(yrow).zip(urow) {
                        *g += yi * (ui - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, vocab) = self.shape(*logits);
                let scale = up[0] / b as f64;
                let gl = self.grad_slot(grads, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut gl[i * vocab..(i + 1) * vocab];
                    for (g, p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *g += scale * p;
                    }
                    row[t] -= scale;
                }
            }
            Op::Sum(x) => {
                let u = up[0];
                self.grad_slot(grads, *x).iter_mut().for_each(|g| *g += u);
            }
            Op::UncertaintyTerm { loss, log_var } => {
                let l = self.scalar(*loss);
                let s = self.scalar(*log_var);
                let w = (-s).exp();
                self.grad_slot(grads, *loss)[0] += up[0] * w;
                self.grad_slot(grads, *log_var)[0] += up[0] * (1.0 - w * l);
            }
        }
    }
}

/// Row-wise softmax of a matrix tensor, outside any tape.
pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    Tensor::new(vec![r, c], kernels::softmax_rows(x.data(), c))
}

/// Layer normalization of each row followed by the affine map, outside any tape.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::Dimension(format!(
            "gain/bias of length {}/{} for width {c}",
            gain.numel(),
            bias.numel()
        )));
    }
    let (mut out, _) = kernels::normalize_rows(x.data(), c, LAYER_NORM_EPS);
    for row in out.chunks_exact_mut(c.max(1)) {
        for ((o, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Plain matrix product of two matrix tensors, outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, n, 1, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Mean cross entropy of `targets` under row-softmax of `logits`, outside any tape.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let store = ParameterStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(logits)?;
    let loss = g.cross_entropy(l, targets)?;
    Ok(g.scalar(loss))
}
