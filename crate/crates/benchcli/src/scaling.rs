//! Memory- and time-scaling probes: peak retained tape records and
//! per-step wall time as a function of sequence length, with ordinary
//! least-squares fits.

use fptt_core::autodiff::{Matrix, ParamSet};
use fptt_core::data::{SequenceBatch, Targets};
use fptt_core::learning::{
    BetaSchedule, FpttConfig, LossAttachment, LossKind, LossSpec, OptimMethod, Optimizer, QSpec,
    Trainer, TrainerKind, TrainerOptions,
};
use fptt_core::network::{Network, NetworkConfig, NeuronKind};
use fptt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub t_len: usize,
    pub peak_retained: usize,
    pub mean_step_ms: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub trainer: TrainerKind,
    pub k: usize,
    pub rewalk: bool,
    pub per_t: Vec<ProbeResult>,
    /// OLS slope of peak retained records against sequence length.
    pub retained_slope: f64,
    /// Coefficient of determination of that linear fit.
    pub retained_r2: f64,
}

/// Ordinary least squares of y on x: slope, intercept, R^2, and the 95%
/// half-width of the slope's confidence interval (normal approximation).
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let tss: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let dof = (xs.len().max(3) - 2) as f64;
    let se = (rss / dof / sxx).sqrt();
    (slope, intercept, r2, 1.96 * se)
}

fn probe_batch(t_len: usize, input_dim: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (0..t_len)
        .map(|_| Matrix::from_fn(1, input_dim, |_, _| rng.random_range(-1.0..1.5)))
        .collect();
    SequenceBatch::new(steps, Targets::Classes(vec![0])).expect("probe batch")
}

fn probe_trainer(kind: TrainerKind, k: usize, seed: u64) -> Result<Trainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cfg = NetworkConfig::new("16R-2I", 3, NeuronKind::Ltc);
    let net = Network::new(&cfg, &mut params, &mut rng)?;
    let loss = LossSpec {
        kind: LossKind::Classification {
            beta: BetaSchedule::Const(0.5),
            q: QSpec::OneHot,
        },
        attach: LossAttachment::EveryStep,
    };
    let fptt = FpttConfig {
        alpha: 0.5,
        eta: 1e-4,
        k,
        regularizer_enabled: kind != TrainerKind::Bptt,
        ..Default::default()
    };
    Trainer::new(
        kind,
        net,
        params,
        fptt,
        loss,
        Optimizer::new(OptimMethod::Sgd, 1e-4),
        TrainerOptions::default(),
    )
}

/// For each sequence length, run one training sequence and record the peak
/// retained tape count and the mean wall time per step. `rewalk` forces a
/// full backward over all retained tapes at every step (the naive IO
/// pattern whose per-sequence cost grows superlinearly).
pub fn scaling_probe(
    kind: TrainerKind,
    lengths: &[usize],
    k: usize,
    rewalk: bool,
    seed: u64,
) -> Result<ScalingReport> {
    if lengths.len() < 3 {
        return Err(fptt_core::Error::config(
            "scaling probe needs at least three sequence lengths",
        ));
    }
    let mut per_t = Vec::new();
    for &t_len in lengths {
        let mut trainer = probe_trainer(kind, k, seed)?;
        let batch = probe_batch(t_len, 3, seed ^ t_len as u64);
        let start = Instant::now();
        trainer.begin_sequence(&batch)?;
        for t in 0..t_len {
            trainer.advance(&batch, t)?;
            if rewalk && trainer.retained_state_count() > 0 {
                let _ = trainer.rewalk_gradient()?;
            }
        }
        let stats = trainer.finish_sequence(None)?;
        let total = start.elapsed().as_secs_f64();
        per_t.push(ProbeResult {
            t_len,
            peak_retained: stats.peak_retained,
            mean_step_ms: total * 1e3 / t_len as f64,
            total_s: total,
        });
    }
    let xs: Vec<f64> = per_t.iter().map(|p| p.t_len as f64).collect();
    let ys: Vec<f64> = per_t.iter().map(|p| p.peak_retained as f64).collect();
    let (slope, _, r2, _) = ols(&xs, &ys);
    Ok(ScalingReport {
        trainer: kind,
        k,
        rewalk,
        per_t,
        retained_slope: slope,
        retained_r2: r2,
    })
}

/// Fixed floating-point workload used as a timing reference; roughly the
/// cost of one probe-network step.
fn reference_work() -> f64 {
    let mut acc = 0.0f64;
    for i in 0..6_000 {
        acc = acc.mul_add(1.000000001, (i & 0xff) as f64 * 1e-9);
    }
    std::hint::black_box(acc)
}

/// Per-step cost of FPTT over one sequence of length `t_len`, expressed as
/// the ratio of each step's wall time to an interleaved fixed reference
/// workload. Machine-level drift (frequency scaling, contention) hits both
/// measurements equally and cancels in the ratio; genuine t-dependence of
/// the step cost would not. Median over `reps` repetitions per step.
pub fn fptt_step_time_series(t_len: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); t_len];
    for rep in 0..reps {
        let mut trainer = probe_trainer(TrainerKind::Fptt, 1, seed + rep as u64)?;
        let mut batch = probe_batch(t_len, 3, seed ^ 0xABCD);
        let frame = batch.steps[0].clone();
        for s in batch.steps.iter_mut() {
            *s = frame.clone();
        }
        trainer.begin_sequence(&batch)?;
        for (t, sample) in samples.iter_mut().enumerate() {
            let s = Instant::now();
            trainer.advance(&batch, t)?;
            let step = s.elapsed().as_secs_f64();
            let s = Instant::now();
            reference_work();
            let reference = s.elapsed().as_secs_f64().max(1e-9);
            sample.push(step / reference);
        }
        trainer.finish_sequence(None)?;
    }
    Ok(samples
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        })
        .collect())
}

impl ScalingReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "trainer={:?} k={} rewalk={}\n",
            self.trainer, self.k, self.rewalk
        ));
        out.push_str("t_len,peak_retained,mean_step_ms,total_s\n");
        for p in &self.per_t {
            out.push_str(&format!(
                "{},{},{:.4},{:.4}\n",
                p.t_len, p.peak_retained, p.mean_step_ms, p.total_s
            ));
        }
        out.push_str(&format!(
            "retained_slope={:.6} retained_r2={:.6}\n",
            self.retained_slope, self.retained_r2
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_a_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (slope, intercept, r2, half) = ols(&xs, &ys);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(half < 1e-6);
    }

    #[test]
    fn constant_series_has_zero_slope_and_unit_r2() {
        let xs = [100.0, 300.0, 1000.0];
        let ys = [1.0, 1.0, 1.0];
        let (slope, _, r2, _) = ols(&xs, &ys);
        assert_eq!(slope, 0.0);
        assert_eq!(r2, 1.0);
    }
}
