//! Trainer semantics: update equivalences, dual-state behaviour, retained
//! tape accounting, sharding determinism and divergence reporting.

use fptt_core::autodiff::{Matrix, ParamSet};
use fptt_core::data::{gen_add_task, SequenceBatch, Targets};
use fptt_core::learning::{
    BetaSchedule, FpttConfig, LossAttachment, LossKind, LossSpec, OptimMethod, Optimizer, QSpec,
    Trainer, TrainerKind, TrainerOptions,
};
use fptt_core::network::{Network, NetworkConfig, NeuronKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn classification_loss() -> LossSpec {
    LossSpec {
        kind: LossKind::Classification {
            beta: BetaSchedule::Const(0.5),
            q: QSpec::OneHot,
        },
        attach: LossAttachment::EveryStep,
    }
}

fn regression_loss() -> LossSpec {
    LossSpec {
        kind: LossKind::Regression,
        attach: LossAttachment::EveryStep,
    }
}

fn build_net(seed: u64, arch: &str, input_dim: usize) -> (Network, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cfg = NetworkConfig::new(arch, input_dim, NeuronKind::Ltc);
    let net = Network::new(&cfg, &mut params, &mut rng).unwrap();
    (net, params)
}

fn class_batch(seed: u64, batch: usize, t_len: usize, input_dim: usize, classes: usize) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (0..t_len)
        .map(|_| Matrix::from_fn(batch, input_dim, |_, _| rng.random_range(-1.0..1.5)))
        .collect();
    let labels = (0..batch).map(|b| b % classes).collect();
    SequenceBatch::new(steps, Targets::Classes(labels)).unwrap()
}

fn params_equal(a: &ParamSet, b: &ParamSet) -> bool {
    a.ids()
        .zip(b.ids())
        .all(|(x, y)| a.value(x).as_slice() == b.value(y).as_slice())
}

fn max_param_delta(a: &ParamSet, b: &ParamSet) -> f64 {
    a.ids()
        .map(|id| {
            a.value(id)
                .as_slice()
                .iter()
                .zip(b.value(id).as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// With phi_bar = phi and prev_grad = 0, the first FPTT update on a T=1
/// sequence is exactly a one-step BPTT update.
#[test]
fn first_fptt_step_equals_one_step_bptt() {
    let batch = class_batch(100, 3, 1, 2, 2);
    let mut results = Vec::new();
    for kind in [TrainerKind::Fptt, TrainerKind::Bptt] {
        let (net, params) = build_net(7, "6R-2I", 2);
        let cfg = FpttConfig {
            alpha: 0.5,
            eta: 0.05,
            regularizer_enabled: kind == TrainerKind::Fptt,
            ..Default::default()
        };
        let opt = Optimizer::new(OptimMethod::Sgd, 0.05);
        let mut tr = Trainer::new(
            kind,
            net,
            params,
            cfg,
            classification_loss(),
            opt,
            TrainerOptions::default(),
        )
        .unwrap();
        tr.train_sequence(&batch).unwrap();
        results.push(tr);
    }
    assert!(
        params_equal(results[0].params(), results[1].params()),
        "first-step FPTT and BPTT updates differ"
    );
}

/// FPTT-K with K = T and the regularizer disabled reproduces the BPTT
/// parameter delta within 1e-12 elementwise.
#[test]
fn fpttk_at_full_window_collapses_to_bptt() {
    for (seed, t_len) in [(1u64, 1usize), (2, 3), (3, 7)] {
        let batch = class_batch(200 + seed, 4, t_len, 3, 2);
        let mut deltas = Vec::new();
        for kind in [TrainerKind::FpttK, TrainerKind::Bptt] {
            let (net, params) = build_net(900 + seed, "8R-2I", 3);
            let cfg = FpttConfig {
                k: t_len,
                regularizer_enabled: false,
                alpha: 1.0,
                eta: 0.1,
                ..Default::default()
            };
            let opt = Optimizer::new(OptimMethod::Sgd, 0.1);
            let mut tr = Trainer::new(
                kind,
                net,
                params,
                cfg,
                classification_loss(),
                opt,
                TrainerOptions::default(),
            )
            .unwrap();
            tr.train_sequence(&batch).unwrap();
            deltas.push(tr);
        }
        let d = max_param_delta(deltas[0].params(), deltas[1].params());
        assert!(d <= 1e-12, "T={t_len}: max delta {d}");
    }
}

/// K=1 FPTT-K is bitwise the same trainer as FPTT.
#[test]
fn fpttk_with_unit_window_is_fptt() {
    let batch = class_batch(300, 2, 6, 2, 2);
    let mut out = Vec::new();
    for kind in [TrainerKind::Fptt, TrainerKind::FpttK] {
        let (net, params) = build_net(17, "5R-2I", 2);
        let cfg = FpttConfig {
            k: 1,
            alpha: 0.2,
            eta: 0.01,
            ..Default::default()
        };
        let opt = Optimizer::new(OptimMethod::AdaptiveMoment, 0.01);
        let mut tr = Trainer::new(
            kind,
            net,
            params,
            cfg,
            classification_loss(),
            opt,
            TrainerOptions::default(),
        )
        .unwrap();
        tr.train_sequence(&batch).unwrap();
        out.push(tr);
    }
    assert!(params_equal(out[0].params(), out[1].params()));
}

/// eta = 0 freezes the live weights while the running average still moves.
#[test]
fn zero_learning_rate_moves_only_the_running_average() {
    let batch = class_batch(400, 2, 4, 2, 2);
    let (net, params) = build_net(23, "5R-2I", 2);
    let before = params.values_cloned();
    let cfg = FpttConfig {
        alpha: 0.5,
        eta: 0.0,
        ..Default::default()
    };
    let opt = Optimizer::new(OptimMethod::Sgd, 0.0);
    let mut tr = Trainer::new(
        TrainerKind::Fptt,
        net,
        params,
        cfg,
        classification_loss(),
        opt,
        TrainerOptions::default(),
    )
    .unwrap();
    tr.train_sequence(&batch).unwrap();
    for (id, b) in tr.params().ids().zip(&before) {
        assert_eq!(tr.params().value(id).as_slice(), b.as_slice());
    }
    let moved = tr
        .dual()
        .phi_bar
        .iter()
        .zip(&before)
        .any(|(bar, phi)| bar.as_slice() != phi.as_slice());
    assert!(moved, "phi_bar failed to move under the averaging rule");
}

/// Retained tape records: constant for FPTT, affine in t for BPTT, capped
/// at K for FPTT-K.
#[test]
fn retained_tape_counts_by_trainer() {
    let t_len = 12;
    let batch = class_batch(500, 2, t_len, 2, 2);
    let mk = |kind, k| {
        let (net, params) = build_net(31, "4R-2I", 2);
        let cfg = FpttConfig {
            k,
            alpha: 0.5,
            eta: 0.01,
            regularizer_enabled: kind != TrainerKind::Bptt,
            ..Default::default()
        };
        Trainer::new(
            kind,
            net,
            params,
            cfg,
            classification_loss(),
            Optimizer::new(OptimMethod::Sgd, 0.01),
            TrainerOptions::default(),
        )
        .unwrap()
    };

    let mut fptt = mk(TrainerKind::Fptt, 1);
    fptt.begin_sequence(&batch).unwrap();
    for t in 0..t_len {
        fptt.advance(&batch, t).unwrap();
        assert_eq!(fptt.retained_state_count(), 0, "FPTT retains after update");
    }
    assert_eq!(fptt.peak_retained(), 1, "FPTT peak is one tape");

    let mut bptt = mk(TrainerKind::Bptt, 1);
    bptt.begin_sequence(&batch).unwrap();
    for t in 0..t_len {
        bptt.advance(&batch, t).unwrap();
        if t + 1 < t_len {
            assert_eq!(bptt.retained_state_count(), t + 1, "BPTT grows with t");
        }
    }
    assert_eq!(bptt.peak_retained(), t_len);

    let k = 4;
    let mut fk = mk(TrainerKind::FpttK, k);
    fk.begin_sequence(&batch).unwrap();
    for t in 0..t_len {
        fk.advance(&batch, t).unwrap();
        assert!(fk.retained_state_count() <= k);
    }
    assert_eq!(fk.peak_retained(), k);
}

/// Exact running-average mode recomputes the gradient at the updated
/// weights; it must stay finite and differ from the default mode.
#[test]
fn exact_phi_bar_mode_differs_from_default() {
    let batch = class_batch(600, 2, 5, 2, 2);
    let run = |exact: bool| {
        let (net, params) = build_net(37, "5R-2I", 2);
        let cfg = FpttConfig {
            alpha: 0.3,
            eta: 0.05,
            exact_phi_bar_grad: exact,
            ..Default::default()
        };
        let mut tr = Trainer::new(
            TrainerKind::Fptt,
            net,
            params,
            cfg,
            classification_loss(),
            Optimizer::new(OptimMethod::Sgd, 0.05),
            TrainerOptions::default(),
        )
        .unwrap();
        tr.train_sequence(&batch).unwrap();
        tr.dual().phi_bar.clone()
    };
    let default_bar = run(false);
    let exact_bar = run(true);
    let differs = default_bar
        .iter()
        .zip(&exact_bar)
        .any(|(a, b)| a.as_slice() != b.as_slice());
    assert!(differs, "exact mode should change the running average");
    assert!(exact_bar.iter().all(|m| m.is_finite()));
}

/// Two shards with deterministic reduction: reproducible run-to-run, and a
/// single shard matches the unsharded path bitwise.
#[test]
fn sharded_training_is_deterministic() {
    let batch = class_batch(700, 5, 4, 2, 2);
    let run = |shards: usize| {
        let (net, params) = build_net(41, "5R-2I", 2);
        let cfg = FpttConfig {
            alpha: 0.5,
            eta: 0.02,
            ..Default::default()
        };
        let mut tr = Trainer::new(
            TrainerKind::Fptt,
            net,
            params,
            cfg,
            classification_loss(),
            Optimizer::new(OptimMethod::Sgd, 0.02),
            TrainerOptions {
                shards,
                ..Default::default()
            },
        )
        .unwrap();
        let stats = tr.train_sequence(&batch).unwrap();
        (tr, stats)
    };
    let (a1, s1) = run(1);
    let (a2, _) = run(1);
    assert!(params_equal(a1.params(), a2.params()));

    let (b1, sb1) = run(2);
    let (b2, sb2) = run(2);
    assert!(params_equal(b1.params(), b2.params()));
    assert_eq!(sb1.record.total, sb2.record.total);
    // sharded result stays numerically close to the unsharded one
    assert!(max_param_delta(a1.params(), b1.params()) < 1e-12);
    assert!((s1.record.total - sb1.record.total).abs() < 1e-12);
    assert_eq!(s1.final_pred.as_slice().len(), sb1.final_pred.as_slice().len());
}

/// Exploding updates surface as a divergence error carrying the step index.
#[test]
fn divergence_reports_the_failing_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let batch = gen_add_task(4, 30, &mut rng).unwrap();
    let (net, params) = build_net(47, "6R-1I", 2);
    let cfg = FpttConfig {
        alpha: 0.5,
        eta: 1e9,
        ..Default::default()
    };
    let mut tr = Trainer::new(
        TrainerKind::Fptt,
        net,
        params,
        cfg,
        regression_loss(),
        Optimizer::new(OptimMethod::Sgd, 1e9),
        TrainerOptions::default(),
    )
    .unwrap();
    match tr.train_sequence(&batch) {
        Err(fptt_core::Error::Divergence { step, .. }) => assert!(step > 0 && step < 30),
        other => panic!("expected divergence, got {other:?}"),
    }
}

/// The sequence summary reports per-step means and the regression metric
/// hooks up to the add-task targets.
#[test]
fn sequence_stats_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let batch = gen_add_task(6, 20, &mut rng).unwrap();
    let (net, params) = build_net(59, "8R-1I", 2);
    let cfg = FpttConfig {
        alpha: 0.1,
        eta: 1e-3,
        ..Default::default()
    };
    let mut tr = Trainer::new(
        TrainerKind::Fptt,
        net,
        params,
        cfg,
        regression_loss(),
        Optimizer::new(OptimMethod::AdaptiveMoment, 1e-3),
        TrainerOptions::default(),
    )
    .unwrap();
    let stats = tr.train_sequence_timed(&batch, true).unwrap();
    assert_eq!(stats.final_pred.shape(), (6, 1));
    assert!(stats.record.total.is_finite());
    assert!(stats.record.ce >= 0.0);
    assert!((0.0..=1.0).contains(&stats.firing_rate));
    assert_eq!(stats.step_ms.as_ref().unwrap().len(), 20);
    assert_eq!(stats.record.t, 19);
    // regression records: ce carries the mse, div is 0, total = ce + reg
    assert_eq!(stats.record.div, 0.0);
    assert!((stats.record.total - (stats.record.ce + stats.record.reg)).abs() < 1e-12);
}

/// With a constant beta the aggregated record obeys
/// total = beta ce + (1 - beta) div + reg.
#[test]
fn loss_record_mixing_invariant() {
    let batch = class_batch(800, 3, 8, 2, 2);
    let (net, params) = build_net(61, "6R-2I", 2);
    let cfg = FpttConfig {
        alpha: 0.2,
        eta: 1e-3,
        ..Default::default()
    };
    let mut tr = Trainer::new(
        TrainerKind::Fptt,
        net,
        params,
        cfg,
        classification_loss(),
        Optimizer::new(OptimMethod::AdaptiveMoment, 1e-3),
        TrainerOptions::default(),
    )
    .unwrap();
    let stats = tr.train_sequence(&batch).unwrap();
    let beta = 0.5;
    let expect = beta * stats.record.ce + (1.0 - beta) * stats.record.div + stats.record.reg;
    assert!(
        (stats.record.total - expect).abs() < 1e-9,
        "total {} vs mixed {}",
        stats.record.total,
        expect
    );
}
