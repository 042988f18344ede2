//! Loss functions, the dynamic regularizer with its running-average state,
//! optimizers, and the three trainers (BPTT, FPTT, FPTT-K).

mod optim;
mod trainer;

pub use optim::{clip_grad_norm, OptimMethod, Optimizer};
pub use trainer::{evaluate_sequence, FpttConfig, SequenceStats, Trainer, TrainerKind, TrainerOptions};

use crate::autodiff::{GradSet, Matrix, NodeId, ParamSet, TapeBuilder};
use crate::data::Targets;
use crate::{Error, Result};

/// Cross-entropy of softmax(logits) against an integer class.
pub fn ce_loss(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    -(logits[target] - max - z.ln())
}

/// Cross-entropy of softmax(logits) against a target distribution `q`,
/// which must sum to 1.
pub fn div_loss(logits: &[f64], q: &[f64]) -> Result<f64> {
    if logits.len() != q.len() {
        return Err(Error::config("div_loss: length mismatch"));
    }
    let qs: f64 = q.iter().sum();
    if (qs - 1.0).abs() > 1e-8 {
        return Err(Error::config(format!(
            "div_loss: target distribution sums to {qs}, expected 1"
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lz = z.ln() + max;
    Ok(-logits
        .iter()
        .zip(q)
        .map(|(&l, &qc)| qc * (l - lz))
        .sum::<f64>())
}

/// Schedule of the cross-entropy / divergence mixing weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    Const(f64),
    /// `beta_t = t / T` (0-based step over sequence length).
    Ramp,
}

impl BetaSchedule {
    pub fn at(&self, t: usize, t_len: usize) -> f64 {
        match self {
            BetaSchedule::Const(b) => *b,
            BetaSchedule::Ramp => (t + 1) as f64 / t_len.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BetaSchedule::Const(b) = self {
            if !(0.0..=1.0).contains(b) {
                return Err(Error::config("beta must lie in [0,1]"));
            }
        }
        Ok(())
    }
}

/// Construction of the target label distribution for the divergence term.
/// One-hot makes the divergence coincide with the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QSpec {
    OneHot,
    /// `(1 - eps) * onehot + eps / C`
    Smoothed(f64),
}

impl QSpec {
    fn build(&self, classes: &[usize], n_classes: usize) -> Matrix {
        let mut q = Matrix::zeros(classes.len(), n_classes);
        match self {
            QSpec::OneHot => {
                for (r, &c) in classes.iter().enumerate() {
                    q.set(r, c, 1.0);
                }
            }
            QSpec::Smoothed(eps) => {
                let base = eps / n_classes as f64;
                for (r, &c) in classes.iter().enumerate() {
                    for j in 0..n_classes {
                        q.set(r, j, base);
                    }
                    q.set(r, c, 1.0 - eps + base);
                }
            }
        }
        q
    }
}

/// Which steps of a sequence carry a task loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossAttachment {
    /// Loss at every step. For the add task the per-step target is the
    /// running sum of marked entries seen so far.
    EveryStep,
    /// Loss averaged over the trailing fraction of steps (e.g. 0.2).
    FinalWindow(f64),
    FinalStep,
}

impl LossAttachment {
    pub fn attaches(&self, t: usize, t_len: usize) -> bool {
        match self {
            LossAttachment::EveryStep => true,
            LossAttachment::FinalWindow(frac) => {
                let start = ((1.0 - frac) * t_len as f64).ceil() as usize;
                t >= start.min(t_len.saturating_sub(1))
            }
            LossAttachment::FinalStep => t + 1 == t_len,
        }
    }
}

/// Task-level loss configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// beta-mixed cross-entropy plus divergence against `q`.
    Classification { beta: BetaSchedule, q: QSpec },
    /// Mean squared error on the readout.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub attach: LossAttachment,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::Classification { beta, .. } = &self.kind {
            beta.validate()?;
        }
        if let LossAttachment::FinalWindow(f) = self.attach {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("final window fraction must lie in (0,1]"));
            }
        }
        Ok(())
    }

    /// Record the step-t task loss on the tape, if one attaches here.
    /// Returns the scalar loss node plus the cross-entropy / divergence
    /// component values for bookkeeping.
    pub fn build_step_loss(
        &self,
        tb: &mut TapeBuilder,
        pred: NodeId,
        targets: &Targets,
        t: usize,
        t_len: usize,
    ) -> Result<Option<StepLoss>> {
        if !self.attach.attaches(t, t_len) {
            return Ok(None);
        }
        match (&self.kind, targets) {
            (LossKind::Classification { beta, q }, Targets::Classes(classes)) => {
                let n_classes = tb.value(pred).cols();
                let b = beta.at(t, t_len);
                let ce = tb.softmax_ce(pred, classes)?;
                let qm = q.build(classes, n_classes);
                let div = tb.softmax_ce_dist(pred, &qm)?;
                let ce_v = tb.value(ce).get(0, 0);
                let div_v = tb.value(div).get(0, 0);
                let ce_scaled = tb.affine_scalar(ce, b, 0.0);
                let div_scaled = tb.affine_scalar(div, 1.0 - b, 0.0);
                let total = tb.add(ce_scaled, div_scaled)?;
                Ok(Some(StepLoss {
                    node: total,
                    ce: ce_v,
                    div: div_v,
                    beta: b,
                }))
            }
            (LossKind::Regression, Targets::AddTask { y, running }) => {
                let target = match self.attach {
                    LossAttachment::EveryStep => running[t].clone(),
                    _ => Matrix::from_vec(y.len(), 1, y.clone()),
                };
                let node = tb.mse_loss(pred, &target)?;
                let v = tb.value(node).get(0, 0);
                Ok(Some(StepLoss {
                    node,
                    ce: v,
                    div: 0.0,
                    beta: 1.0,
                }))
            }
            _ => Err(Error::config(
                "loss kind does not match the task's target type",
            )),
        }
    }
}

/// One attached step loss: tape node plus component values.
pub struct StepLoss {
    pub node: NodeId,
    pub ce: f64,
    pub div: f64,
    pub beta: f64,
}

/// Loss components of one training step or sequence.
/// `total = beta * ce + (1 - beta) * div + reg`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossRecord {
    pub t: usize,
    pub ce: f64,
    pub div: f64,
    pub reg: f64,
    pub total: f64,
}

/// The FPTT parameter pair: live weights, their running average, and the
/// previous step's task-loss gradient.
#[derive(Debug, Clone)]
pub struct DualParams {
    pub phi: ParamSet,
    pub phi_bar: Vec<Matrix>,
    pub prev_grad: GradSet,
}

impl DualParams {
    /// Fresh dual state: `phi_bar` starts equal to `phi`, previous gradient
    /// starts at zero.
    pub fn new(phi: ParamSet) -> Self {
        let phi_bar = phi.values_cloned();
        let prev_grad = GradSet::zeros_like(&phi);
        DualParams {
            phi,
            phi_bar,
            prev_grad,
        }
    }

    /// Sequence-start reset: the previous-step gradient is zero.
    pub fn reset_sequence(&mut self) {
        self.prev_grad.zero();
    }
}

/// Value and gradient of the dynamic regularizer
/// `(alpha/2) * || phi - phi_bar - (1/(2 alpha)) prev_grad ||^2`,
/// with gradient `alpha (phi - phi_bar) - prev_grad / 2`.
pub fn regularizer(dual: &DualParams, alpha: f64) -> (f64, GradSet) {
    let mut grad = GradSet::zeros_like(&dual.phi);
    let mut value = 0.0;
    let half_inv_alpha = 0.5 / alpha;
    for id in dual.phi.ids() {
        let phi = dual.phi.value(id);
        let bar = &dual.phi_bar[id.index()];
        let prev = dual.prev_grad.get(id);
        let g = grad.get_mut(id);
        for i in 0..phi.len() {
            let d = phi.as_slice()[i] - bar.as_slice()[i];
            let inner = d - half_inv_alpha * prev.as_slice()[i];
            value += inner * inner;
            g.as_mut_slice()[i] = alpha * d - 0.5 * prev.as_slice()[i];
        }
    }
    (0.5 * alpha * value, grad)
}

/// Running-average update after the live weights moved:
/// `phi_bar <- (phi_bar + phi)/2 - (1/(2 alpha)) g` and `prev_grad <- g`,
/// where `g` is the task-loss gradient.
pub fn dual_update(dual: &mut DualParams, g: &GradSet, alpha: f64) {
    let half_inv_alpha = 0.5 / alpha;
    for id in dual.phi.ids() {
        let phi = dual.phi.value(id);
        let bar = &mut dual.phi_bar[id.index()];
        let gm = g.get(id);
        for i in 0..phi.len() {
            bar.as_mut_slice()[i] = 0.5 * (bar.as_slice()[i] + phi.as_slice()[i])
                - half_inv_alpha * gm.as_slice()[i];
        }
    }
    dual.prev_grad = g.clone();
}
