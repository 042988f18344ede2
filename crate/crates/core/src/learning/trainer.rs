//! The three trainers over one shared tape engine.
//!
//! FPTT records one detached tape per step and updates after every step;
//! FPTT-K chains K tapes per chunk and updates once per chunk; BPTT chains
//! the whole sequence and updates once. The chunk machinery is literally the
//! same code path everywhere, so FPTT is FPTT-K at K=1 and a K=T chunk with
//! the regularizer disabled reproduces the BPTT update exactly.

use std::ops::Range;
use std::time::Instant;

use super::{dual_update, regularizer, DualParams, LossRecord, LossSpec};
use super::{clip_grad_norm, Optimizer};
use crate::autodiff::{chain_tapes, GradSet, Matrix, NodeId, ParamSet, StepTape, TapeBuilder};
use crate::data::SequenceBatch;
use crate::network::{Network, NetworkState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    Bptt,
    Fptt,
    FpttK,
}

impl TrainerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bptt" => Ok(TrainerKind::Bptt),
            "fptt" => Ok(TrainerKind::Fptt),
            "fptt-k" | "fpttk" => Ok(TrainerKind::FpttK),
            other => Err(Error::config(format!("unknown trainer '{other}'"))),
        }
    }
}

/// FPTT hyperparameters: regularization strength, loss mix, learning rate
/// and the chunked-update window (1 for pure FPTT).
#[derive(Debug, Clone, Copy)]
pub struct FpttConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub k: usize,
    /// Recompute the task gradient at the updated weights for the
    /// running-average update instead of reusing the gradient from the
    /// pre-update weights (one extra forward/backward per chunk).
    pub exact_phi_bar_grad: bool,
    /// Disabling drops the regularizer and the dual update entirely.
    pub regularizer_enabled: bool,
}

impl Default for FpttConfig {
    fn default() -> Self {
        FpttConfig {
            alpha: 0.1,
            beta: 0.5,
            eta: 1e-3,
            k: 1,
            exact_phi_bar_grad: false,
            regularizer_enabled: true,
        }
    }
}

impl FpttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regularizer_enabled && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config(
                "alpha must be positive while the regularizer is enabled",
            ));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta must lie in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainerOptions {
    /// Global L2 gradient-norm clip applied to the update gradient.
    pub grad_clip: Option<f64>,
    /// Data-parallel batch shards with deterministic ordered reduction.
    pub shards: usize,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        TrainerOptions {
            grad_clip: None,
            shards: 1,
        }
    }
}

struct Shard {
    rows: Range<usize>,
    state: NetworkState,
    /// State-out node ids of the last recorded tape (within a chunk).
    links: Option<Vec<NodeId>>,
    /// Entry state of the current chunk, for exact running-average mode.
    chunk_entry: NetworkState,
    tapes: Vec<StepTape>,
    /// `(tape index within chunk, loss node)`
    losses: Vec<(usize, NodeId)>,
    final_pred: Matrix,
}

/// Aggregates of one recorded chunk, before the parameter update.
#[derive(Default, Clone, Copy)]
struct ChunkAccum {
    ce: f64,
    div: f64,
    task: f64,
    attached: usize,
}

/// Summary of one trained sequence.
#[derive(Debug, Clone)]
pub struct SequenceStats {
    /// Per-attached-step mean loss components plus the (last) regularizer
    /// value; `t` is the final step index.
    pub record: LossRecord,
    /// Readout potentials at the final step, batch-row order.
    pub final_pred: Matrix,
    /// Mean spike count over all spiking layers and steps.
    pub firing_rate: f64,
    /// Peak number of retained per-step tapes during the sequence.
    pub peak_retained: usize,
    /// Wall time per `advance` call, milliseconds (when requested).
    pub step_ms: Option<Vec<f64>>,
}

/// A training loop driver owning the dual parameter state and optimizer.
pub struct Trainer {
    kind: TrainerKind,
    net: Network,
    dual: DualParams,
    opt: Optimizer,
    cfg: FpttConfig,
    loss: LossSpec,
    opts: TrainerOptions,
    shards: Vec<Shard>,
    t_len: usize,
    next_t: usize,
    batch_rows: usize,
    peak_retained: usize,
    spike_sum: f64,
    spike_cnt: usize,
    accum: ChunkAccum,
    seq_accum: ChunkAccum,
    last_reg: f64,
}

impl Trainer {
    pub fn new(
        kind: TrainerKind,
        net: Network,
        params: ParamSet,
        cfg: FpttConfig,
        loss: LossSpec,
        opt: Optimizer,
        opts: TrainerOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if opts.shards == 0 {
            return Err(Error::config("at least one shard is required"));
        }
        Ok(Trainer {
            kind,
            net,
            dual: DualParams::new(params),
            opt,
            cfg,
            loss,
            opts,
            shards: Vec::new(),
            t_len: 0,
            next_t: 0,
            batch_rows: 0,
            peak_retained: 0,
            spike_sum: 0.0,
            spike_cnt: 0,
            accum: ChunkAccum::default(),
            seq_accum: ChunkAccum::default(),
            last_reg: 0.0,
        })
    }

    pub fn kind(&self) -> TrainerKind {
        self.kind
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.dual.phi
    }

    pub fn dual(&self) -> &DualParams {
        &self.dual
    }

    pub fn config(&self) -> &FpttConfig {
        &self.cfg
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.opt
    }

    /// Chunk length of the active trainer: 1 for FPTT, K for FPTT-K, and the
    /// whole sequence for BPTT.
    fn chunk_len(&self) -> usize {
        match self.kind {
            TrainerKind::Fptt => 1,
            TrainerKind::FpttK => self.cfg.k,
            TrainerKind::Bptt => self.t_len.max(1),
        }
    }

    /// Number of per-step tape records currently retained for gradient
    /// computation, summed over shards.
    pub fn retained_state_count(&self) -> usize {
        self.shards.iter().map(|s| s.tapes.len()).sum()
    }

    /// Peak retained tape count observed during the current sequence.
    pub fn peak_retained(&self) -> usize {
        self.peak_retained
    }

    /// Reset per-sequence state: fresh neuron states, empty tapes, zeroed
    /// previous-step gradient.
    pub fn begin_sequence(&mut self, batch: &SequenceBatch) -> Result<()> {
        if batch.t_len == 0 {
            return Err(Error::config("cannot train on an empty sequence"));
        }
        self.t_len = batch.t_len;
        self.next_t = 0;
        self.batch_rows = batch.batch;
        self.peak_retained = 0;
        self.spike_sum = 0.0;
        self.spike_cnt = 0;
        self.accum = ChunkAccum::default();
        self.seq_accum = ChunkAccum::default();
        self.last_reg = 0.0;
        self.dual.reset_sequence();

        let n_shards = self.opts.shards.min(batch.batch).max(1);
        let base = batch.batch / n_shards;
        let rem = batch.batch % n_shards;
        let mut start = 0;
        self.shards = (0..n_shards)
            .map(|i| {
                let len = base + usize::from(i < rem);
                let rows = start..start + len;
                start += len;
                Shard {
                    rows: rows.clone(),
                    state: self.net.init_state(len),
                    links: None,
                    chunk_entry: self.net.init_state(len),
                    tapes: Vec::new(),
                    losses: Vec::new(),
                    final_pred: Matrix::zeros(len, self.net.output_dim()),
                }
            })
            .collect();
        Ok(())
    }

    /// Process step `t` of the sequence: record the step on a tape and, when
    /// `t` closes a chunk, run backward and apply the parameter update.
    pub fn advance(&mut self, batch: &SequenceBatch, t: usize) -> Result<()> {
        if t != self.next_t || t >= self.t_len {
            return Err(Error::usage(format!(
                "advance called with step {t}, expected {}",
                self.next_t
            )));
        }
        self.next_t += 1;

        self.record_step(batch, t)?;
        let retained = self.retained_state_count();
        self.peak_retained = self.peak_retained.max(retained);

        let chunk = self.chunk_len();
        let chunk_done = (t + 1) % chunk == 0 || t + 1 == self.t_len;
        if chunk_done {
            self.update_chunk(batch, t)?;
        }
        Ok(())
    }

    /// Record one forward step on every shard.
    fn record_step(&mut self, batch: &SequenceBatch, t: usize) -> Result<()> {
        let x_full = &batch.steps[t];
        let params = &self.dual.phi;
        let net = &self.net;
        let loss_spec = &self.loss;
        let t_len = self.t_len;
        let attaches = self.loss.attach.attaches(t, t_len);

        let mut spike_sum = 0.0;
        let mut spike_cnt = 0usize;
        let mut step_acc = ChunkAccum::default();

        for shard in &mut self.shards {
            let x = x_full.slice_rows(shard.rows.start, shard.rows.len());
            let targets = batch.targets.slice_rows(shard.rows.clone());

            let mut tape = StepTape::new(params);
            let mut tb = TapeBuilder::new(params, &mut tape);
            let out = net.forward_step(&mut tb, &shard.state, shard.links.as_deref(), &x)?;
            let step_loss = loss_spec.build_step_loss(&mut tb, out.pred, &targets, t, t_len)?;

            let new_state: NetworkState = out
                .state_nodes
                .iter()
                .map(|&n| tb.value(n).clone())
                .collect();
            for m in &new_state {
                if !m.is_finite() {
                    return Err(Error::Divergence {
                        step: t,
                        msg: "non-finite neuron state".into(),
                    });
                }
            }
            for &s in &out.spike_nodes {
                let m = tb.value(s);
                spike_sum += m.as_slice().iter().sum::<f64>();
                spike_cnt += m.len();
            }
            shard.final_pred = tb.value(out.pred).clone();

            if let Some(sl) = &step_loss {
                let v = tb.value(sl.node).get(0, 0);
                if !v.is_finite() {
                    return Err(Error::Divergence {
                        step: t,
                        msg: format!("non-finite loss {v}"),
                    });
                }
                let w = shard.rows.len() as f64 / self.batch_rows as f64;
                step_acc.ce += w * sl.ce;
                step_acc.div += w * sl.div;
                step_acc.task += w * v;
            }

            let tape_idx = shard.tapes.len();
            if let Some(sl) = step_loss {
                shard.losses.push((tape_idx, sl.node));
            }
            shard.links = Some(out.state_nodes.clone());
            shard.state = new_state;
            shard.tapes.push(tape);
        }

        step_acc.attached = usize::from(attaches);
        self.accum.ce += step_acc.ce;
        self.accum.div += step_acc.div;
        self.accum.task += step_acc.task;
        self.accum.attached += step_acc.attached;
        self.spike_sum += spike_sum;
        self.spike_cnt += spike_cnt;
        Ok(())
    }

    /// Backward over the retained chunk tapes, reduce across shards and
    /// apply one update.
    fn update_chunk(&mut self, batch: &SequenceBatch, t: usize) -> Result<()> {
        let g_task = self.chunk_gradient()?;

        match self.kind {
            TrainerKind::Bptt => {
                let mut g = g_task;
                if let Some(clip) = self.opts.grad_clip {
                    clip_grad_norm(&mut g, clip);
                }
                self.opt.apply(&mut self.dual.phi, &g);
            }
            TrainerKind::Fptt | TrainerKind::FpttK => {
                let mut g = g_task.clone();
                let mut reg_v = 0.0;
                if self.cfg.regularizer_enabled {
                    let (v, g_reg) = regularizer(&self.dual, self.cfg.alpha);
                    reg_v = v;
                    g.add_assign(&g_reg);
                }
                if let Some(clip) = self.opts.grad_clip {
                    clip_grad_norm(&mut g, clip);
                }
                self.opt.apply(&mut self.dual.phi, &g);
                self.last_reg = reg_v;

                if self.cfg.regularizer_enabled {
                    let g_bar = if self.cfg.exact_phi_bar_grad {
                        self.recompute_chunk_gradient(batch, t)?
                    } else {
                        g_task
                    };
                    dual_update(&mut self.dual, &g_bar, self.cfg.alpha);
                }
            }
        }

        // chunk edges detach: next step starts from constant state
        for shard in &mut self.shards {
            shard.tapes.clear();
            shard.losses.clear();
            shard.links = None;
            shard.chunk_entry = shard.state.clone();
        }
        self.seq_accum.ce += self.accum.ce;
        self.seq_accum.div += self.accum.div;
        self.seq_accum.task += self.accum.task;
        self.seq_accum.attached += self.accum.attached;
        self.accum = ChunkAccum::default();
        Ok(())
    }

    /// Task-loss gradient of the retained chunk: per-shard chained backward,
    /// reduced in shard order with batch-fraction weights.
    fn chunk_gradient(&mut self) -> Result<GradSet> {
        let params = &self.dual.phi;
        let mut total = GradSet::zeros_like(params);
        let batch_rows = self.batch_rows as f64;
        for shard in &mut self.shards {
            if shard.losses.is_empty() {
                continue;
            }
            let g = chain_tapes(params, &mut shard.tapes, &shard.losses)?;
            total.add_scaled_assign(&g, shard.rows.len() as f64 / batch_rows);
        }
        Ok(total)
    }

    /// Re-run the chunk's forward and backward at the *updated* weights from
    /// the stored chunk-entry state (exact running-average mode).
    fn recompute_chunk_gradient(&mut self, batch: &SequenceBatch, t_end: usize) -> Result<GradSet> {
        let chunk = self.chunk_len();
        let t0 = (t_end / chunk) * chunk;
        let params = &self.dual.phi;
        let mut total = GradSet::zeros_like(params);
        let batch_rows = self.batch_rows as f64;

        for shard in &mut self.shards {
            let mut state = shard.chunk_entry.clone();
            let mut tapes: Vec<StepTape> = Vec::with_capacity(t_end + 1 - t0);
            let mut losses: Vec<(usize, NodeId)> = Vec::new();
            let mut links: Option<Vec<NodeId>> = None;
            for t in t0..=t_end {
                let x = batch.steps[t].slice_rows(shard.rows.start, shard.rows.len());
                let targets = batch.targets.slice_rows(shard.rows.clone());
                let mut tape = StepTape::new(params);
                let mut tb = TapeBuilder::new(params, &mut tape);
                let out = self.net.forward_step(&mut tb, &state, links.as_deref(), &x)?;
                if let Some(sl) = self.loss.build_step_loss(&mut tb, out.pred, &targets, t, self.t_len)? {
                    losses.push((tapes.len(), sl.node));
                }
                state = out.state_nodes.iter().map(|&n| tb.value(n).clone()).collect();
                links = Some(out.state_nodes.clone());
                tapes.push(tape);
            }
            if losses.is_empty() {
                continue;
            }
            let g = chain_tapes(params, &mut tapes, &losses)?;
            total.add_scaled_assign(&g, shard.rows.len() as f64 / batch_rows);
        }
        Ok(total)
    }

    /// Collect the sequence summary after the last `advance`.
    pub fn finish_sequence(&mut self, step_ms: Option<Vec<f64>>) -> Result<SequenceStats> {
        if self.next_t != self.t_len {
            return Err(Error::usage("finish_sequence before the sequence ended"));
        }
        let attached = self.seq_accum.attached.max(1) as f64;
        let record = LossRecord {
            t: self.t_len - 1,
            ce: self.seq_accum.ce / attached,
            div: self.seq_accum.div / attached,
            reg: self.last_reg,
            total: self.seq_accum.task / attached + self.last_reg,
        };
        let final_pred = Matrix::vstack(
            &self
                .shards
                .iter()
                .map(|s| s.final_pred.clone())
                .collect::<Vec<_>>(),
        );
        let firing_rate = if self.spike_cnt > 0 {
            self.spike_sum / self.spike_cnt as f64
        } else {
            0.0
        };
        Ok(SequenceStats {
            record,
            final_pred,
            firing_rate,
            peak_retained: self.peak_retained,
            step_ms,
        })
    }

    /// Train on one sequence batch end to end.
    pub fn train_sequence(&mut self, batch: &SequenceBatch) -> Result<SequenceStats> {
        self.train_sequence_timed(batch, false)
    }

    /// Train on one sequence batch, optionally timing each step.
    pub fn train_sequence_timed(
        &mut self,
        batch: &SequenceBatch,
        timing: bool,
    ) -> Result<SequenceStats> {
        self.begin_sequence(batch)?;
        let mut times = timing.then(|| Vec::with_capacity(batch.t_len));
        for t in 0..batch.t_len {
            let start = timing.then(Instant::now);
            self.advance(batch, t)?;
            if let (Some(times), Some(start)) = (&mut times, start) {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        self.finish_sequence(times)
    }

    /// Gradient over all currently retained tapes without consuming them
    /// (clones the chunk). Models the naive IO pattern that re-walks stored
    /// history at every step; cost grows with the retained count.
    pub fn rewalk_gradient(&self) -> Result<GradSet> {
        let params = &self.dual.phi;
        let mut total = GradSet::zeros_like(params);
        let batch_rows = self.batch_rows as f64;
        for shard in &self.shards {
            if shard.losses.is_empty() {
                continue;
            }
            let mut tapes = shard.tapes.clone();
            let g = chain_tapes(params, &mut tapes, &shard.losses)?;
            total.add_scaled_assign(&g, shard.rows.len() as f64 / batch_rows);
        }
        Ok(total)
    }

    /// Forward-only rollout at the current weights; returns final-step
    /// predictions and the firing rate.
    pub fn evaluate(&self, batch: &SequenceBatch) -> Result<(Matrix, f64)> {
        evaluate_sequence(&self.net, &self.dual.phi, batch)
    }

    /// The running-average weights as a standalone parameter set.
    pub fn phi_bar_params(&self) -> ParamSet {
        let mut params = self.dual.phi.clone();
        for id in params.ids().collect::<Vec<_>>() {
            *params.value_mut(id) = self.dual.phi_bar[id.index()].clone();
        }
        params
    }

    /// Consolidate: snap the live weights to the running average. The
    /// average itself, the stored gradient and the optimizer state carry on.
    pub fn snap_to_phi_bar(&mut self) {
        for id in self.dual.phi.ids().collect::<Vec<_>>() {
            *self.dual.phi.value_mut(id) = self.dual.phi_bar[id.index()].clone();
        }
    }
}

/// Forward-only rollout of `net` over a batch, without training.
pub fn evaluate_sequence(
    net: &Network,
    params: &ParamSet,
    batch: &SequenceBatch,
) -> Result<(Matrix, f64)> {
    let mut state = net.init_state(batch.batch);
    let mut spike_sum = 0.0;
    let mut spike_cnt = 0usize;
    let mut pred = Matrix::zeros(batch.batch, net.output_dim());
    for x in &batch.steps {
        let mut tape = StepTape::new(params);
        let mut tb = TapeBuilder::new(params, &mut tape);
        let out = net.forward_step(&mut tb, &state, None, x)?;
        for &s in &out.spike_nodes {
            let m = tb.value(s);
            spike_sum += m.as_slice().iter().sum::<f64>();
            spike_cnt += m.len();
        }
        pred = tb.value(out.pred).clone();
        state = out.state_nodes.iter().map(|&n| tb.value(n).clone()).collect();
    }
    let fr = if spike_cnt > 0 {
        spike_sum / spike_cnt as f64
    } else {
        0.0
    };
    Ok((pred, fr))
}
