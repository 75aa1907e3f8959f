//! Reverse-mode autodiff over a recorded operation tape.
//!
//! A [`Graph`] records one forward pass: every operation appends a node
//! holding its output values and enough saved state for the backward pass.
//! Nodes are created in topological order by construction, so the backward
//! pass is a single reverse sweep. A tensor consumed by several downstream
//! ops receives the sum of all branch gradients.
//!
//! Parameters enter a graph through [`Graph::param`], which snapshots the
//! current values; repeated leases of the same parameter return the same
//! node so tied weights accumulate gradients correctly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mat;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub type NodeId = usize;

/// GELU tanh approximation coefficients.
const GELU_C0: f64 = 0.7978845608;
const GELU_C1: f64 = 0.044715;
/// Layer-norm variance epsilon.
const LN_EPS: f64 = 1e-5;
/// Additive mask for disallowed attention positions. Large enough that the
/// masked weight underflows to exactly zero after softmax, while keeping
/// every intermediate value finite.
const NEG_MASK: f64 = -1e30;

/// Reduction mode for the masked cross-entropy node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Input,
    Param,
    /// out = a (m×k) · b (k×n)
    Matmul { a: NodeId, b: NodeId },
    /// out = a (m×c) · b (r×c)ᵀ
    MatmulNt { a: NodeId, b: NodeId },
    /// out = a + b; b may be a single row broadcast over a's rows
    Add { a: NodeId, b: NodeId, broadcast: bool },
    /// elementwise product, same shape
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<f64>, inv_std: Vec<f64> },
    /// row-wise softmax; the node value doubles as the saved output
    Softmax { x: NodeId },
    Gelu { x: NodeId },
    /// adds NEG_MASK above the diagonal of a square matrix
    CausalMaskAdd { x: NodeId },
    /// mean or sum of -log softmax(logits)[target] over masked rows;
    /// saves the softmax rows of masked positions for backward
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        reduction: Reduction,
        masked_probs: Vec<f64>,
        masked_rows: Vec<usize>,
    },
    SumAll { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Trainable-parameter gradients keyed by store id, in lease order.
pub type GradMap = Vec<(ParamId, Vec<f64>)>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// first-lease node per parameter, plus lease order for deterministic
    /// gradient landing
    param_nodes: HashMap<ParamId, NodeId>,
    param_order: Vec<(ParamId, NodeId)>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value.values()[0]
    }

    /// Gradient accumulated at a node, available after `backward` for leaves.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        id
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "graph::input", index: 0 });
        }
        Ok(self.push(t.clone(), Op::Input))
    }

    /// Leases a parameter into the graph, snapshotting its current values.
    /// A second lease of the same id returns the existing node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.get(id).tensor.clone(), Op::Param);
        self.param_nodes.insert(id, node);
        self.param_order.push((id, node));
        node
    }

    // ── forward primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        mat::nn_acc(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }))
    }

    /// a (m×c) · b (r×c)ᵀ → m×r
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, c) = dims(self.value(a));
        let (r, c2) = dims(self.value(b));
        if c != c2 {
            return Err(self.shape_err("matmul_nt", &[a, b]));
        }
        let mut out = vec![0.0; m * r];
        mat::nt_acc(self.value(a).values(), self.value(b).values(), &mut out, m, c, r);
        Ok(self.push(Tensor::new(vec![m, r], out)?, Op::MatmulNt { a, b }))
    }

    /// Elementwise add; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(a));
        let (mb, nb) = dims(self.value(b));
        let broadcast = mb == 1 && m != 1;
        if nb != n || (!broadcast && mb != m) {
            return Err(self.shape_err("add", &[a, b]));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = av.to_vec();
        if broadcast {
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bv[j];
                }
            }
        } else {
            for (o, x) in out.iter_mut().zip(bv) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Add { a, b, broadcast }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", &[a, b]));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale", index: 0 });
        }
        let out: Vec<f64> = self.value(a).values().iter().map(|x| c * x).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a, c }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_rows of zero parts".into()));
        }
        let n = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(self.shape_err("concat_rows", parts));
        }
        let m: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).values());
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(a));
        if start + len > m || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice_rows [{start}, {}) out of {} rows",
                start + len,
                m
            )));
        }
        let out = self.value(a).values()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(self.shape_err("concat_cols", parts));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; m * n];
        let mut col = 0;
        for &p in parts {
            let pc = self.value(p).cols();
            let pv = self.value(p).values();
            for i in 0..m {
                out[i * n + col..i * n + col + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            col += pc;
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = dims(self.value(a));
        if start + len > n || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice_cols [{start}, {}) out of {} cols",
                start + len,
                n
            )));
        }
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { a, start }))
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, e) = dims(self.value(table));
        if ids.is_empty() {
            return Err(Error::InvalidArg("embedding_lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidArg(format!(
                "embedding_lookup: id {bad} out of vocabulary {v}"
            )));
        }
        let tv = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], out)?,
            Op::EmbeddingLookup { table, ids: ids.to_vec() },
        ))
    }

    /// Row-wise layer norm with affine gain/bias (each 1×cols).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        if dims(self.value(gain)) != (1, n) || dims(self.value(bias)) != (1, n) {
            return Err(self.shape_err("layer_norm", &[x, gain, bias]));
        }
        let xv = self.value(x).values();
        let gv = self.value(gain).values();
        let bv = self.value(bias).values();
        let mut out = vec![0.0; m * n];
        let mut mean = vec![0.0; m];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            mean[i] = mu;
            inv_std[i] = inv;
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * inv * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gain, bias, mean, inv_std },
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        let xv = self.value(x).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax { x }))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { x }))
    }

    /// Adds NEG_MASK to every entry above the diagonal (j > i).
    pub fn causal_mask_add(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = dims(self.value(x));
        if m != n {
            return Err(self.shape_err("causal_mask_add", &[x]));
        }
        let mut out = self.value(x).values().to_vec();
        for i in 0..m {
            for j in i + 1..n {
                out[i * n + j] += NEG_MASK;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::CausalMaskAdd { x }))
    }

    /// Cross-entropy over the masked rows of a logits matrix.
    ///
    /// `targets[i]` is the expected class at row `i`; it is read only where
    /// `mask[i]` is true. Rejects an all-false mask.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let (m, v) = dims(self.value(logits));
        if targets.len() != m || mask.len() != m {
            return Err(Error::InvalidArg(format!(
                "masked_cross_entropy: {m} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let masked_rows: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        if masked_rows.is_empty() {
            return Err(Error::InvalidArg("masked_cross_entropy: empty mask".into()));
        }
        if let Some(&bad) = masked_rows.iter().find(|&&i| targets[i] >= v) {
            return Err(Error::InvalidArg(format!(
                "masked_cross_entropy: target {} out of {v} classes at row {bad}",
                targets[bad]
            )));
        }
        let lv = self.value(logits).values();
        let mut masked_probs = vec![0.0; masked_rows.len() * v];
        let mut total = 0.0;
        for (mi, &i) in masked_rows.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                masked_probs[mi * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                masked_probs[mi * v + j] /= sum;
            }
            let lse = max + sum.ln();
            total += lse - row[targets[i]];
        }
        if reduction == Reduction::Mean {
            total /= masked_rows.len() as f64;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
                masked_probs,
                masked_rows,
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).values().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::SumAll { a }))
    }

    /// matmul(x, w) + b with b broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss, landing gradients on every
    /// trainable parameter leased by this graph.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward_seeded(loss, 1.0)?;
        for (pid, grad) in &grads {
            store.get_mut(*pid).tensor.accumulate_grad(grad);
        }
        Ok(())
    }

    /// Reverse sweep seeded with `seed` at the loss node. Returns gradients
    /// for trainable parameters without touching the store, so callers can
    /// serialize accumulation across parallel graphs.
    pub fn backward_seeded(&mut self, loss: NodeId, seed: f64) -> Result<GradMap> {
        if self.backward_done {
            return Err(Error::InvalidArg("backward already run on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![seed]);

        for id in (0..self.nodes.len()).rev() {
            let Some(out_grad) = self.grads[id].take() else { continue };
            let keep = matches!(self.nodes[id].op, Op::Input | Op::Param);
            self.apply_vjp(id, &out_grad);
            if keep {
                self.grads[id] = Some(out_grad);
            }
        }

        // Every trainable leased parameter gets a populated gradient, even
        // when zero flow reached it.
        let mut out = Vec::with_capacity(self.param_order.len());
        for &(pid, node) in &self.param_order {
            let numel = self.nodes[node].value.numel();
            let grad = self.grads[node].clone().unwrap_or_else(|| vec![0.0; numel]);
            out.push((pid, grad));
        }
        Ok(out)
    }

    /// Filters a GradMap down to the trainable parameters of a store.
    pub fn land_grads(store: &mut ParamStore, grads: &GradMap) {
        for (pid, grad) in grads {
            let p = store.get_mut(*pid);
            if p.trainable {
                p.tensor.accumulate_grad(grad);
            }
        }
    }

    fn add_grad(&mut self, id: NodeId, delta: Vec<f64>) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            None => self.grads[id] = Some(delta),
        }
    }

    fn add_grad_slice(&mut self, id: NodeId, delta: &[f64]) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => self.grads[id] = Some(delta.to_vec()),
        }
    }

    fn apply_vjp(&mut self, id: NodeId, g: &[f64]) {
        // Ops are immutable once recorded; the enum is matched by shape of
        // the saved state. Gradient buffers are the only mutated storage.
        match &self.nodes[id].op {
            Op::Input | Op::Param => {}
            &Op::Matmul { a, b } => {
                let (m, k) = dims(&self.nodes[a].value);
                let n = self.nodes[b].value.cols();
                let mut da = vec![0.0; m * k];
                mat::nt_acc(g, self.nodes[b].value.values(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                mat::tn_acc(self.nodes[a].value.values(), g, &mut db, m, k, n);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::MatmulNt { a, b } => {
                let (m, c) = dims(&self.nodes[a].value);
                let r = self.nodes[b].value.rows();
                let mut da = vec![0.0; m * c];
                mat::nn_acc(g, self.nodes[b].value.values(), &mut da, m, r, c);
                let mut db = vec![0.0; r * c];
                mat::tn_acc(g, self.nodes[a].value.values(), &mut db, m, r, c);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::Add { a, b, broadcast } => {
                self.add_grad_slice(a, g);
                if broadcast {
                    let (m, n) = dims(&self.nodes[a].value);
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(b, db);
                } else {
                    self.add_grad_slice(b, g);
                }
            }
            &Op::Mul { a, b } => {
                let da: Vec<f64> =
                    g.iter().zip(self.nodes[b].value.values()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> =
                    g.iter().zip(self.nodes[a].value.values()).map(|(x, y)| x * y).collect();
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.add_grad(a, da);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let n = self.nodes[id].value.cols();
                let mut row = 0;
                for p in parts {
                    let pr = self.nodes[p].value.rows();
                    self.add_grad_slice(p, &g[row * n..(row + pr) * n]);
                    row += pr;
                }
            }
            &Op::SliceRows { a, start } => {
                let (m, n) = dims(&self.nodes[a].value);
                let len = self.nodes[id].value.rows();
                let mut da = vec![0.0; m * n];
                da[start * n..(start + len) * n].copy_from_slice(g);
                self.add_grad(a, da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let (m, n) = dims(&self.nodes[id].value);
                let mut col = 0;
                for p in parts {
                    let pc = self.nodes[p].value.cols();
                    let mut dp = vec![0.0; m * pc];
                    for i in 0..m {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * n + col..i * n + col + pc]);
                    }
                    self.add_grad(p, dp);
                    col += pc;
                }
            }
            &Op::SliceCols { a, start } => {
                let (m, n) = dims(&self.nodes[a].value);
                let len = self.nodes[id].value.cols();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add_grad(a, da);
            }
            Op::EmbeddingLookup { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let (v, e) = dims(&self.nodes[table].value);
                let mut dt = vec![0.0; v * e];
                for (i, &tok) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[tok * e + j] += g[i * e + j];
                    }
                }
                self.add_grad(table, dt);
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (m, n) = dims(&self.nodes[x].value);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xv = self.nodes[x].value.values();
                let gv = self.nodes[gain].value.values();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let inv = inv_std[i];
                    let mu = mean[i];
                    // y = normalized input, dy = grad through the affine
                    let mut dy_sum = 0.0;
                    let mut dyy_sum = 0.0;
                    for j in 0..n {
                        let y = (row[j] - mu) * inv;
                        let dy = grow[j] * gv[j];
                        dgain[j] += grow[j] * y;
                        dbias[j] += grow[j];
                        dy_sum += dy;
                        dyy_sum += dy * y;
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let y = (row[j] - mu) * inv;
                        let dy = grow[j] * gv[j];
                        dx[i * n + j] = inv * (dy - dy_sum * inv_n - y * dyy_sum * inv_n);
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(gain, dgain);
                self.add_grad(bias, dbias);
            }
            &Op::Softmax { x } => {
                let (m, n) = dims(&self.nodes[id].value);
                let pv = self.nodes[id].value.values();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let p = &pv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot = mat::dot(grow, p);
                    for j in 0..n {
                        dx[i * n + j] = p[j] * (grow[j] - dot);
                    }
                }
                self.add_grad(x, dx);
            }
            &Op::Gelu { x } => {
                let dx: Vec<f64> = self.nodes[x]
                    .value
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &go)| go * gelu_derivative(v))
                    .collect();
                self.add_grad(x, dx);
            }
            &Op::CausalMaskAdd { x } => {
                self.add_grad_slice(x, g);
            }
            Op::MaskedCrossEntropy { logits, targets, reduction, masked_probs, masked_rows, .. } => {
                let logits = *logits;
                let reduction = *reduction;
                let (m, v) = dims(&self.nodes[logits].value);
                let weight = match reduction {
                    Reduction::Mean => g[0] / masked_rows.len() as f64,
                    Reduction::Sum => g[0],
                };
                let mut dl = vec![0.0; m * v];
                for (mi, &i) in masked_rows.iter().enumerate() {
                    let p = &masked_probs[mi * v..(mi + 1) * v];
                    for j in 0..v {
                        dl[i * v + j] = weight * p[j];
                    }
                    dl[i * v + targets[i]] -= weight;
                }
                self.add_grad(logits, dl);
            }
            &Op::SumAll { a } => {
                let numel = self.nodes[a].value.numel();
                self.add_grad(a, vec![g[0]; numel]);
            }
        }
    }

    fn shape_err(&self, op: &'static str, nodes: &[NodeId]) -> Error {
        Error::ShapeMismatch {
            op,
            shapes: nodes.iter().map(|&n| self.value(n).shape().to_vec()).collect(),
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Anything that owns a parameter store: a bare store, a model, or an
/// attached adapter. Lets [`finite_diff_check`] alternate between mutating
/// coordinates and rebuilding the forward pass on the same subject.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Central finite-difference gradient verification.
///
/// `loss_fn` builds a forward pass over the subject and returns the scalar
/// loss node. The function first checks that two evaluations agree
/// bit-for-bit (a nondeterministic loss is rejected), then compares the
/// analytic gradient against central differences on at least
/// `min_coords` sampled coordinates per trainable parameter (all
/// coordinates when a parameter is smaller than that).
///
/// Returns the maximum over sampled coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<S, F>(
    subject: &mut S,
    loss_fn: F,
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64>
where
    S: HasParams,
    F: Fn(&mut Graph, &S) -> Result<NodeId>,
{
    use rand::seq::index::sample;
    use rand_chacha::rand_core::SeedableRng;

    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("finite_diff_check: eps must be > 0, got {eps}")));
    }

    let eval = |subject: &S| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, subject)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::InvalidArg("finite_diff_check: loss_fn must return a scalar".into()));
        }
        Ok(g.scalar_value(loss))
    };

    let l0 = eval(subject)?;
    let l1 = eval(subject)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::InvalidArg(format!(
            "finite_diff_check: loss_fn is not deterministic ({l0} vs {l1})"
        )));
    }

    subject.params_mut().zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, subject)?;
    let grads = g.backward_seeded(loss, 1.0)?;
    Graph::land_grads(subject.params_mut(), &grads);

    let trainable: Vec<ParamId> =
        subject.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();

    let mut max_rel = 0.0_f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for pid in trainable {
        let numel = subject.params().get(pid).tensor.numel();
        let coords: Vec<usize> = if numel <= min_coords {
            (0..numel).collect()
        } else {
            let mut picked = sample(&mut rng, numel, min_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        let analytic: Vec<f64> = {
            let grad = subject
                .params()
                .get(pid)
                .tensor
                .grad()
                .expect("trainable parameter missing gradient after backward");
            coords.iter().map(|&c| grad[c]).collect()
        };
        for (ci, &coord) in coords.iter().enumerate() {
            let original = subject.params().get(pid).tensor.values()[coord];
            subject.params_mut().get_mut(pid).tensor.values_mut()[coord] = original + eps;
            let plus = eval(subject)?;
            subject.params_mut().get_mut(pid).tensor.values_mut()[coord] = original - eps;
            let minus = eval(subject)?;
            subject.params_mut().get_mut(pid).tensor.values_mut()[coord] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
