//! Per-timestep computation tape with reverse accumulation.
//!
//! A [`StepTape`] records the primitive operations of exactly one network
//! step. Incoming state enters through a per-slot boundary that is either
//! *detached* (the state is a constant, no gradient flows into the previous
//! step) or *flow-through* (linked to the node that produced the state on the
//! previous step's tape). One-step backward over a detached tape is the
//! online gradient; [`chain_tapes`] over linked tapes reproduces the gradient
//! of the fully unrolled sequence.
//!
//! Accumulation order is fixed (reverse topological, deterministic), so runs
//! are bit-reproducible under a fixed seed.

use super::matrix::{gemm_nn, gemm_tn, Matrix};
use super::params::{GradSet, ParamId, ParamSet};
use crate::neuron::{SpikeMode, SurrogateConfig};
use crate::{Error, Result};

pub type NodeId = usize;

/// Gradient boundary for one incoming state slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// State is linked to the previous tape; adjoints propagate across.
    FlowThrough,
    /// State enters as a constant; no gradient flows into the previous step.
    Detached,
}

#[derive(Debug, Clone)]
enum Node {
    /// Constant input (step inputs, loss targets, detached state values).
    Input,
    /// Leaf bound to a trainable parameter; value lives in the `ParamSet`.
    Param(ParamId),
    /// Incoming state for `slot`.
    StateIn { slot: usize },
    /// `x @ w^T` with `x: B x k`, `w: n x k`.
    Linear { x: NodeId, w: NodeId },
    /// Broadcast row-vector add: `x + 1 b` with `b: 1 x n`.
    AddRow { x: NodeId, b: NodeId },
    /// Tile a `1 x n` row to a full batch.
    BroadcastRow { v: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `mul * a + add` elementwise; the shift only affects the recorded
    /// forward value, backward is pure scaling.
    AffineScalar { a: NodeId, mul: f64 },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    /// Threshold crossing of `d = u - theta`; forward is a hard step (or a
    /// steep sigmoid in soft-forward mode), backward uses the surrogate
    /// derivative (or the exact sigmoid derivative).
    Spike { d: NodeId, cfg: SurrogateConfig },
    /// Horizontal concatenation.
    Concat { a: NodeId, b: NodeId },
    /// Column window of `src` starting at `start`.
    SliceCols { src: NodeId, start: usize },
    /// Mean over all entries of `(pred - target)^2`; scalar node.
    MseLoss { pred: NodeId, target: NodeId },
    /// Mean over batch rows of `-log softmax(logits)[class]`; scalar node.
    SoftmaxCe { logits: NodeId, classes: Vec<usize> },
    /// Mean over batch rows of `-sum_c q_c log softmax(logits)_c`; scalar.
    SoftmaxCeDist { logits: NodeId, q: NodeId },
}

#[derive(Debug, Clone)]
struct StateBinding {
    boundary: Boundary,
    /// Node id of the producing state in the previous tape (flow-through).
    link: Option<NodeId>,
}

/// Recorded single-timestep computation.
#[derive(Debug, Clone)]
pub struct StepTape {
    nodes: Vec<Node>,
    vals: Vec<Matrix>,
    state_in: Vec<Option<StateBinding>>,
    state_out: Vec<Option<NodeId>>,
    param_leaves: Vec<(ParamId, NodeId)>,
    param_version: u64,
    consumed: bool,
}

impl StepTape {
    pub fn new(params: &ParamSet) -> Self {
        StepTape {
            nodes: Vec::with_capacity(32),
            vals: Vec::with_capacity(32),
            state_in: Vec::new(),
            state_out: Vec::new(),
            param_leaves: Vec::new(),
            param_version: params.version(),
            consumed: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.vals[id]
    }

    pub fn state_out_nodes(&self) -> Vec<NodeId> {
        self.state_out.iter().map(|s| s.expect("unset state slot")).collect()
    }

    fn slot_count(&self) -> usize {
        self.state_in.len().max(self.state_out.len())
    }

    fn ensure_slot(&mut self, slot: usize) {
        if self.state_in.len() <= slot {
            self.state_in.resize(slot + 1, None);
        }
        if self.state_out.len() <= slot {
            self.state_out.resize(slot + 1, None);
        }
    }

    fn push(&mut self, node: Node, value: Matrix) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.vals.push(value);
        id
    }

    /// Gradient of the scalar node `loss` with respect to all parameters,
    /// accumulated into `grads`. Returns the adjoints of flow-through state
    /// inputs so callers can keep walking backwards across tapes.
    pub fn backward_scalar(
        &mut self,
        params: &ParamSet,
        loss: NodeId,
        grads: &mut GradSet,
    ) -> Result<StateAdjoints> {
        let seed = Matrix::filled(1, 1, 1.0);
        self.backward_seeded(params, &[(loss, seed)], grads)
    }

    /// Backward pass with explicit seed adjoints (shape-matched to the seeded
    /// nodes' outputs).
    pub fn backward_seeded(
        &mut self,
        params: &ParamSet,
        seeds: &[(NodeId, Matrix)],
        grads: &mut GradSet,
    ) -> Result<StateAdjoints> {
        self.backward_with_carry(params, seeds, None, grads)
    }

    fn backward_with_carry(
        &mut self,
        params: &ParamSet,
        seeds: &[(NodeId, Matrix)],
        carry: Option<&mut Vec<Option<Matrix>>>,
        grads: &mut GradSet,
    ) -> Result<StateAdjoints> {
        if self.consumed {
            return Err(Error::usage("backward called twice on the same tape"));
        }
        if params.version() != self.param_version {
            return Err(Error::usage(
                "parameters were mutated after this tape was recorded",
            ));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let want = self.node_value(params, *id).shape();
            if seed.shape() != want {
                return Err(Error::usage(format!(
                    "seed shape {:?} does not match node output {:?}",
                    seed.shape(),
                    want
                )));
            }
            accumulate(&mut adj, *id, seed.clone());
        }
        if let Some(carry) = carry {
            for (slot, m) in carry.iter_mut().enumerate() {
                if let Some(m) = m.take() {
                    let id = self.state_out[slot]
                        .ok_or_else(|| Error::internal("carry into unset state slot"))?;
                    accumulate(&mut adj, id, m);
                }
            }
        }

        let mut out = StateAdjoints {
            slots: vec![None; self.slot_count()],
        };

        for id in (0..self.nodes.len()).rev() {
            let Some(a) = adj[id].take() else { continue };
            match &self.nodes[id] {
                Node::Input => {}
                Node::Param(pid) => grads.get_mut(*pid).add_assign(&a),
                Node::StateIn { slot } => {
                    let binding = self.state_in[*slot]
                        .as_ref()
                        .expect("state node without binding");
                    if binding.boundary == Boundary::FlowThrough {
                        match &mut out.slots[*slot] {
                            Some(m) => m.add_assign(&a),
                            e @ None => *e = Some(a),
                        }
                    }
                }
                Node::Linear { x, w } => {
                    let (x, w) = (*x, *w);
                    let xv = self.node_value(params, x);
                    let wv = self.node_value(params, w);
                    {
                        let dx = adj[x].get_or_insert_with(|| Matrix::zeros(xv.rows(), xv.cols()));
                        gemm_nn(1.0, &a, wv, 1.0, dx);
                    }
                    let dw = adj[w].get_or_insert_with(|| Matrix::zeros(wv.rows(), wv.cols()));
                    gemm_tn(1.0, &a, xv, 1.0, dw);
                }
                Node::AddRow { x, b } => {
                    let (x, b) = (*x, *b);
                    accumulate(&mut adj, b, a.col_sum());
                    accumulate(&mut adj, x, a);
                }
                Node::BroadcastRow { v } => {
                    let v = *v;
                    accumulate(&mut adj, v, a.col_sum());
                }
                Node::Add { a: lhs, b: rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    accumulate(&mut adj, rhs, a.clone());
                    accumulate(&mut adj, lhs, a);
                }
                Node::Sub { a: lhs, b: rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let mut neg = a.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut adj, rhs, neg);
                    accumulate(&mut adj, lhs, a);
                }
                Node::Mul { a: lhs, b: rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let lv = self.node_value(params, lhs).clone();
                    let rv = self.node_value(params, rhs);
                    accumulate(&mut adj, lhs, a.zip_map(rv, |g, v| g * v));
                    accumulate(&mut adj, rhs, a.zip_map(&lv, |g, v| g * v));
                }
                Node::AffineScalar { a: src, mul } => {
                    let (src, mul) = (*src, *mul);
                    let mut d = a;
                    d.scale_assign(mul);
                    accumulate(&mut adj, src, d);
                }
                Node::Sigmoid { a: src } => {
                    let src = *src;
                    let out_v = &self.vals[id];
                    accumulate(&mut adj, src, a.zip_map(out_v, |g, s| g * s * (1.0 - s)));
                }
                Node::Tanh { a: src } => {
                    let src = *src;
                    let out_v = &self.vals[id];
                    accumulate(&mut adj, src, a.zip_map(out_v, |g, t| g * (1.0 - t * t)));
                }
                Node::Spike { d, cfg } => {
                    let (d, cfg) = (*d, *cfg);
                    let grad = match cfg.mode {
                        SpikeMode::HardSpike => {
                            let dv = self.node_value(params, d);
                            a.zip_map(dv, |g, x| g * cfg.multi_gaussian(x))
                        }
                        SpikeMode::SoftForward => {
                            // exact derivative of the soft forward value
                            let out_v = &self.vals[id];
                            a.zip_map(out_v, |g, s| g * s * (1.0 - s) / cfg.soft_temp)
                        }
                    };
                    accumulate(&mut adj, d, grad);
                }
                Node::Concat { a: lhs, b: rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let ca = self.node_value(params, lhs).cols();
                    let cb = self.node_value(params, rhs).cols();
                    let rows = a.rows();
                    let mut da = Matrix::zeros(rows, ca);
                    let mut db = Matrix::zeros(rows, cb);
                    for r in 0..rows {
                        let row = a.row(r);
                        da.as_mut_slice()[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                        db.as_mut_slice()[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                    }
                    accumulate(&mut adj, lhs, da);
                    accumulate(&mut adj, rhs, db);
                }
                Node::SliceCols { src, start, .. } => {
                    let (src, start) = (*src, *start);
                    let sv = self.node_value(params, src);
                    let (rows, cols) = sv.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let row = a.row(r);
                        d.as_mut_slice()[r * cols + start..r * cols + start + row.len()]
                            .copy_from_slice(row);
                    }
                    accumulate(&mut adj, src, d);
                }
                Node::MseLoss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let s = a.get(0, 0);
                    let pv = self.node_value(params, pred);
                    let tv = self.node_value(params, target);
                    let scale = 2.0 * s / pv.len() as f64;
                    accumulate(&mut adj, pred, pv.zip_map(tv, |p, t| scale * (p - t)));
                }
                Node::SoftmaxCe { logits, classes } => {
                    let logits = *logits;
                    let s = a.get(0, 0);
                    let lv = self.node_value(params, logits);
                    let mut d = softmax(lv);
                    let batch = lv.rows() as f64;
                    for (r, &c) in classes.iter().enumerate() {
                        d.set(r, c, d.get(r, c) - 1.0);
                    }
                    d.scale_assign(s / batch);
                    accumulate(&mut adj, logits, d);
                }
                Node::SoftmaxCeDist { logits, q } => {
                    let (logits, q) = (*logits, *q);
                    let s = a.get(0, 0);
                    let lv = self.node_value(params, logits);
                    let qv = self.node_value(params, q);
                    let mut d = softmax(lv);
                    let batch = lv.rows() as f64;
                    // rows of q are normalized, so d(loss)/d(logits) = (p - q)/B
                    for (dv, qv) in d.as_mut_slice().iter_mut().zip(qv.as_slice()) {
                        *dv = (*dv - qv) * s / batch;
                    }
                    accumulate(&mut adj, logits, d);
                }
            }
        }

        Ok(out)
    }

    fn node_value<'a>(&'a self, params: &'a ParamSet, id: NodeId) -> &'a Matrix {
        match &self.nodes[id] {
            Node::Param(pid) => params.value(*pid),
            _ => &self.vals[id],
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, m: Matrix) {
    match &mut adj[id] {
        Some(e) => e.add_assign(&m),
        e @ None => *e = Some(m),
    }
}

/// Adjoints of the incoming state, indexed by slot. Detached slots are `None`.
#[derive(Debug)]
pub struct StateAdjoints {
    pub slots: Vec<Option<Matrix>>,
}

/// Reverse accumulation over a consecutive chain of per-step tapes, seeding
/// adjoint 1 at every listed `(tape_index, loss_node)`. Equivalent to one
/// backward pass over the fully unrolled sequence graph.
pub fn chain_tapes(
    params: &ParamSet,
    tapes: &mut [StepTape],
    losses: &[(usize, NodeId)],
) -> Result<GradSet> {
    let n = tapes.len();
    if n == 0 {
        return Err(Error::usage("chain_tapes over an empty tape list"));
    }
    let slots = tapes[0].slot_count();
    for t in 1..n {
        if tapes[t].slot_count() != slots {
            return Err(Error::internal("state slot count differs between tapes"));
        }
        let prev_out = tapes[t - 1].state_out.clone();
        for (slot, prev) in prev_out.iter().enumerate() {
            let binding = tapes[t].state_in[slot]
                .as_ref()
                .ok_or_else(|| Error::internal(format!("tape {t} missing state slot {slot}")))?;
            if binding.boundary != Boundary::FlowThrough {
                return Err(Error::internal(format!(
                    "tape {t} slot {slot} is detached inside a chain"
                )));
            }
            if binding.link != *prev {
                return Err(Error::internal(format!(
                    "broken state linkage at tape {t} slot {slot}"
                )));
            }
        }
    }

    let mut per_tape_seeds: Vec<Vec<(NodeId, Matrix)>> = vec![Vec::new(); n];
    for &(t, node) in losses {
        if t >= n {
            return Err(Error::usage("loss seed references a tape outside the chain"));
        }
        per_tape_seeds[t].push((node, Matrix::filled(1, 1, 1.0)));
    }

    let mut grads = GradSet::zeros_like(params);
    let mut carry: Vec<Option<Matrix>> = vec![None; slots];
    for t in (0..n).rev() {
        let seeds = std::mem::take(&mut per_tape_seeds[t]);
        let carry_arg = if t + 1 < n { Some(&mut carry) } else { None };
        let adjoints = tapes[t].backward_with_carry(params, &seeds, carry_arg, &mut grads)?;
        carry = adjoints.slots;
    }
    Ok(grads)
}

fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (i, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            out.set(r, i, e);
            z += e;
        }
        for i in 0..logits.cols() {
            out.set(r, i, out.get(r, i) / z);
        }
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
    let lz = z.ln() + max;
    row.iter().map(|&l| l - lz).collect()
}

/// Builder that records operations onto a [`StepTape`] while evaluating them
/// eagerly against the current parameter values.
pub struct TapeBuilder<'a> {
    params: &'a ParamSet,
    tape: &'a mut StepTape,
}

impl<'a> TapeBuilder<'a> {
    pub fn new(params: &'a ParamSet, tape: &'a mut StepTape) -> Self {
        assert_eq!(
            params.version(),
            tape.param_version,
            "tape was created against a different parameter version"
        );
        TapeBuilder { params, tape }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.tape.node_value(self.params, id)
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Record a constant input.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.tape.push(Node::Input, value)
    }

    /// Leaf bound to a trainable parameter (one leaf per parameter per tape).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.tape.param_leaves.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let node = self.tape.push(Node::Param(id), Matrix::zeros(0, 0));
        self.tape.param_leaves.push((id, node));
        node
    }

    /// Incoming state entering as a constant: no gradient crosses into the
    /// previous step.
    pub fn state_detached(&mut self, slot: usize, value: Matrix) -> NodeId {
        self.tape.ensure_slot(slot);
        let node = self.tape.push(Node::StateIn { slot }, value);
        self.tape.state_in[slot] = Some(StateBinding {
            boundary: Boundary::Detached,
            link: None,
        });
        node
    }

    /// Incoming state linked to the node that produced it on the previous
    /// tape; gradients flow through when tapes are chained.
    pub fn state_linked(&mut self, slot: usize, value: Matrix, prev_out: NodeId) -> NodeId {
        self.tape.ensure_slot(slot);
        let node = self.tape.push(Node::StateIn { slot }, value);
        self.tape.state_in[slot] = Some(StateBinding {
            boundary: Boundary::FlowThrough,
            link: Some(prev_out),
        });
        node
    }

    /// Register `node` as the outgoing value of `slot`.
    pub fn mark_state_out(&mut self, slot: usize, node: NodeId) {
        self.tape.ensure_slot(slot);
        self.tape.state_out[slot] = Some(node);
    }

    /// `x @ w^T` with `x: B x k`, `w: n x k`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.cols() != wv.cols() {
            return Err(Error::config(format!(
                "linear: input has {} features, weight expects {}",
                xv.cols(),
                wv.cols()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), wv.rows());
        super::matrix::gemm_nt(1.0, xv, wv, 0.0, &mut out);
        Ok(self.tape.push(Node::Linear { x, w }, out))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::config(format!(
                "add_row: bias is {:?}, expected 1x{}",
                bv.shape(),
                xv.cols()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + bv.get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.tape.push(Node::AddRow { x, b }, out))
    }

    /// Affine map `x @ w^T + b`, the workhorse of every layer.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let z = self.linear(x, w)?;
        self.add_row(z, b)
    }

    pub fn broadcast_row(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.rows() != 1 {
            return Err(Error::config(format!(
                "broadcast_row expects a 1 x n row, got {:?}",
                vv.shape()
            )));
        }
        let cols = vv.cols();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            out.as_mut_slice()[r * cols..(r + 1) * cols].copy_from_slice(vv.row(0));
        }
        Ok(self.tape.push(Node::BroadcastRow { v }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::config(format!(
                "add: shape mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.zip_map(bv, |x, y| x + y);
        Ok(self.tape.push(Node::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::config(format!(
                "sub: shape mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.zip_map(bv, |x, y| x - y);
        Ok(self.tape.push(Node::Sub { a, b }, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::config(format!(
                "mul: shape mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.zip_map(bv, |x, y| x * y);
        Ok(self.tape.push(Node::Mul { a, b }, out))
    }

    pub fn affine_scalar(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let out = self.value(a).map(|v| mul * v + add);
        self.tape.push(Node::AffineScalar { a, mul }, out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid_scalar);
        self.tape.push(Node::Sigmoid { a }, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.tape.push(Node::Tanh { a }, out)
    }

    /// Spike nonlinearity over the already-formed difference `d = u - theta`.
    pub fn spike(&mut self, d: NodeId, cfg: SurrogateConfig) -> NodeId {
        let out = match cfg.mode {
            SpikeMode::HardSpike => self.value(d).map(|x| if x >= 0.0 { 1.0 } else { 0.0 }),
            SpikeMode::SoftForward => self.value(d).map(|x| sigmoid_scalar(x / cfg.soft_temp)),
        };
        self.tape.push(Node::Spike { d, cfg }, out)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rows() != bv.rows() {
            return Err(Error::config(format!(
                "concat: row mismatch {} vs {}",
                av.rows(),
                bv.rows()
            )));
        }
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Matrix::zeros(rows, ca + cb);
        for r in 0..rows {
            out.as_mut_slice()[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(av.row(r));
            out.as_mut_slice()[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(bv.row(r));
        }
        Ok(self.tape.push(Node::Concat { a, b }, out))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sv = self.value(src);
        if start + len > sv.cols() {
            return Err(Error::config(format!(
                "slice [{start}, {}) out of range for {} columns",
                start + len,
                sv.cols()
            )));
        }
        let rows = sv.rows();
        let mut out = Matrix::zeros(rows, len);
        for r in 0..rows {
            out.as_mut_slice()[r * len..(r + 1) * len]
                .copy_from_slice(&sv.row(r)[start..start + len]);
        }
        Ok(self.tape.push(Node::SliceCols { src, start }, out))
    }

    /// Scalar node: mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Matrix) -> Result<NodeId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::config(format!(
                "mse: prediction {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let pv = self.value(pred);
        let v = pv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / pv.len() as f64;
        let tgt = self.input(target.clone());
        Ok(self
            .tape
            .push(Node::MseLoss { pred, target: tgt }, Matrix::filled(1, 1, v)))
    }

    /// Scalar node: batch-mean cross-entropy of softmax(logits) against
    /// integer class labels.
    pub fn softmax_ce(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if classes.len() != lv.rows() {
            return Err(Error::config(format!(
                "softmax_ce: {} labels for batch of {}",
                classes.len(),
                lv.rows()
            )));
        }
        let mut total = 0.0;
        for (r, &c) in classes.iter().enumerate() {
            if c >= lv.cols() {
                return Err(Error::config(format!(
                    "softmax_ce: class {c} out of range for {} logits",
                    lv.cols()
                )));
            }
            total -= log_softmax_row(lv.row(r))[c];
        }
        let v = total / classes.len() as f64;
        Ok(self.tape.push(
            Node::SoftmaxCe {
                logits,
                classes: classes.to_vec(),
            },
            Matrix::filled(1, 1, v),
        ))
    }

    /// Scalar node: batch-mean cross-entropy of softmax(logits) against a
    /// target distribution whose rows must sum to 1.
    pub fn softmax_ce_dist(&mut self, logits: NodeId, q: &Matrix) -> Result<NodeId> {
        let lv = self.value(logits);
        if q.shape() != lv.shape() {
            return Err(Error::config(format!(
                "softmax_ce_dist: target {:?} vs logits {:?}",
                q.shape(),
                lv.shape()
            )));
        }
        for r in 0..q.rows() {
            let s: f64 = q.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::config(format!(
                    "target distribution row {r} sums to {s}, expected 1"
                )));
            }
        }
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let ls = log_softmax_row(lv.row(r));
            total -= q
                .row(r)
                .iter()
                .zip(&ls)
                .map(|(&qc, &l)| qc * l)
                .sum::<f64>();
        }
        let v = total / lv.rows() as f64;
        let qn = self.input(q.clone());
        Ok(self
            .tape
            .push(Node::SoftmaxCeDist { logits, q: qn }, Matrix::filled(1, 1, v)))
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
