//! Experiment driver: task assembly, the train/eval loop, metric logging
//! and checkpointing. Runs are deterministic under a fixed seed; divergence
//! is recorded as a flagged final row rather than a crash.

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{ExperimentConfig, TaskId};
use crate::metrics::{CsvWriter, MetricsRow};
use fptt_core::autodiff::{Matrix, ParamSet};
use fptt_core::data::{
    self, downsample, load_idx, make_permutation, normalize_images, rate_encode, repeat_encode,
    sequentialize, SequenceBatch, Targets,
};
use fptt_core::learning::{
    evaluate_sequence, FpttConfig, LossRecord, Optimizer, Trainer, TrainerKind, TrainerOptions,
};
use fptt_core::network::{InitConfig, Network, NetworkConfig, NeuronKind};
use fptt_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};

/// Image set after normalization and optional pooling.
#[derive(Debug, Clone)]
pub struct VisionSet {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub enum Encoding {
    Sequential { perm: Option<Vec<usize>> },
    Rate { t: usize },
    Repeat { t: usize },
}

pub enum TaskData {
    AddTask { t_len: usize },
    Vision {
        train: VisionSet,
        test: VisionSet,
        encoding: Encoding,
    },
}

impl TaskData {
    pub fn input_dim(&self) -> usize {
        match self {
            TaskData::AddTask { .. } => 2,
            TaskData::Vision { train, encoding, .. } => match encoding {
                Encoding::Sequential { .. } => 1,
                _ => train.dim,
            },
        }
    }
}

fn resolve_idx(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::config(format!(
        "dataset file {name}[.gz] not found under {}; set data_dir or SNN_DATA_DIR",
        dir.display()
    )))
}

fn load_vision_split(
    dir: &Path,
    images_name: &str,
    labels_name: &str,
    subset: usize,
    pool: usize,
) -> Result<VisionSet> {
    let set = load_idx(resolve_idx(dir, images_name)?, resolve_idx(dir, labels_name)?)?;
    let n = if subset > 0 { subset.min(set.n) } else { set.n };
    let side = set.rows;
    let raw = normalize_images(&set.images[..n * side * side]);
    let (images, dim) = if pool > 1 {
        let pooled = downsample(&raw, n, side, pool)?;
        let new_side = side / pool;
        (pooled, new_side * new_side)
    } else {
        (raw, side * side)
    };
    let labels = set.labels[..n].iter().map(|&l| l as usize).collect();
    Ok(VisionSet {
        images,
        labels,
        dim,
    })
}

/// Assemble the task's data per config, loading IDX files when needed.
pub fn load_task(cfg: &ExperimentConfig) -> Result<TaskData> {
    match cfg.task {
        TaskId::AddTask => Ok(TaskData::AddTask { t_len: cfg.seq_len }),
        task => {
            let root = cfg.data_dir();
            let dir = match task {
                TaskId::FashionStatic => root.join("fashion-mnist"),
                _ => root.join("mnist"),
            };
            let train = load_vision_split(
                &dir,
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                cfg.train_subset,
                cfg.downsample,
            )?;
            let test = load_vision_split(
                &dir,
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
                cfg.test_subset,
                cfg.downsample,
            )?;
            let encoding = match task {
                TaskId::SMnist => Encoding::Sequential { perm: None },
                TaskId::PsMnist => Encoding::Sequential {
                    perm: Some(make_permutation(train.dim, cfg.permute_seed)),
                },
                TaskId::RMnist => Encoding::Rate { t: cfg.seq_len },
                TaskId::MnistStatic | TaskId::FashionStatic => Encoding::Repeat { t: cfg.seq_len },
                TaskId::AddTask => unreachable!(),
            };
            Ok(TaskData::Vision {
                train,
                test,
                encoding,
            })
        }
    }
}

fn gather(set: &VisionSet, idxs: &[usize], gain: f64) -> (Vec<f64>, Vec<usize>) {
    let mut images = Vec::with_capacity(idxs.len() * set.dim);
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        images.extend(
            set.images[i * set.dim..(i + 1) * set.dim]
                .iter()
                .map(|&v| v * gain),
        );
        labels.push(set.labels[i]);
    }
    (images, labels)
}

fn encode_batch(
    set: &VisionSet,
    encoding: &Encoding,
    idxs: &[usize],
    gain: f64,
    rng: &mut impl Rng,
) -> Result<SequenceBatch> {
    match encoding {
        Encoding::Sequential { perm } => {
            let (images, labels) = gather(set, idxs, gain);
            sequentialize(&images, idxs.len(), set.dim, &labels, perm.as_deref())
        }
        Encoding::Rate { t } => {
            // rate coding interprets intensities as probabilities: no gain
            let (images, labels) = gather(set, idxs, 1.0);
            rate_encode(&images, idxs.len(), set.dim, &labels, *t, rng)
        }
        Encoding::Repeat { t } => {
            let (images, labels) = gather(set, idxs, gain);
            repeat_encode(&images, idxs.len(), set.dim, &labels, *t)
        }
    }
}

fn build_trainer(cfg: &ExperimentConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Trainer> {
    let mut params = ParamSet::new();
    let mut net_cfg = NetworkConfig::new(cfg.arch.clone(), input_dim, cfg.neuron);
    net_cfg.readout_tau_inv = cfg.readout_tau_inv;
    net_cfg.init = InitConfig {
        tau_m_bias: cfg.tau_m_bias,
        tau_adp_bias: cfg.tau_adp_bias,
        ..InitConfig::default()
    };
    let net = Network::new(&net_cfg, &mut params, rng)?;
    let fptt = FpttConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        eta: cfg.lr,
        k: cfg.k,
        exact_phi_bar_grad: cfg.exact_phi_bar,
        regularizer_enabled: cfg.trainer != TrainerKind::Bptt,
    };
    Trainer::new(
        cfg.trainer,
        net,
        params,
        fptt,
        cfg.loss_spec(),
        Optimizer::new(cfg.optimizer, cfg.lr),
        TrainerOptions {
            grad_clip: cfg.grad_clip,
            shards: cfg.shards,
        },
    )
}

/// Task metric from final-step predictions: MSE for the add task,
/// accuracy for classification.
pub fn final_metric(pred: &Matrix, targets: &Targets) -> f64 {
    match targets {
        Targets::AddTask { y, .. } => {
            let mut acc = 0.0;
            for (b, &yv) in y.iter().enumerate() {
                let d = pred.get(b, 0) - yv;
                acc += d * d;
            }
            acc / y.len() as f64
        }
        Targets::Classes(labels) => {
            let mut hits = 0usize;
            for (b, &label) in labels.iter().enumerate() {
                let row = pred.row(b);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                hits += usize::from(argmax == label);
            }
            hits as f64 / labels.len() as f64
        }
    }
}

/// Evaluate classification accuracy (and mean cross-entropy) on a vision
/// split with forward-only rollouts.
pub fn evaluate_vision(
    net: &Network,
    params: &ParamSet,
    set: &VisionSet,
    encoding: &Encoding,
    gain: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
    let n = set.labels.len();
    let mut hits = 0usize;
    let mut ce_sum = 0.0;
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let idxs: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let batch = encode_batch(set, encoding, &idxs, gain, &mut rng)?;
        let (pred, _) = evaluate_sequence(net, params, &batch)?;
        let Targets::Classes(labels) = &batch.targets else {
            unreachable!()
        };
        for (b, &label) in labels.iter().enumerate() {
            let row = pred.row(b);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            hits += usize::from(argmax == label);
            ce_sum += fptt_core::learning::ce_loss(row, label);
        }
        start += chunk;
    }
    Ok((hits as f64 / n as f64, ce_sum / n as f64))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub diverged: Option<usize>,
    pub iterations_run: usize,
    pub final_metric: Option<f64>,
    /// Mean task metric over the final (up to) 100 iterations.
    pub final_window_mean: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub unit_count: usize,
    pub param_count: usize,
    pub csv_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Full train/eval loop with per-epoch shuffling, deterministic under the
/// config seed. Writes `metrics.csv` and `checkpoint.bin` under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let task = load_task(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = build_trainer(cfg, task.input_dim(), &mut rng)?;

    let unit_count: usize = {
        // spiking/LSTM units, excluding the readout
        use fptt_core::network::{parse_arch, ArchItem, LayerKind};
        parse_arch(&cfg.arch, cfg.neuron)?
            .iter()
            .flat_map(|i| match i {
                ArchItem::Layer(l) => vec![*l],
                ArchItem::Group(g) => g.clone(),
                ArchItem::InputChannels(_) => vec![],
            })
            .filter(|l| l.kind != LayerKind::LeakyReadout)
            .map(|l| l.size)
            .sum()
    };
    let param_count = trainer.net().param_scalar_count(trainer.params());

    let csv_path = cfg.out_dir.join("metrics.csv");
    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    let mut csv = CsvWriter::create(&csv_path)?;
    let meta = CheckpointMeta {
        arch: cfg.arch.clone(),
        task: cfg.task.name().into(),
        neuron: format!("{:?}", cfg.neuron).to_lowercase(),
        seed: cfg.seed,
    };
    checkpoint::save(&ckpt_path, &meta, trainer.params())?;

    let iters_per_epoch = match &task {
        TaskData::AddTask { .. } => cfg.iterations,
        TaskData::Vision { train, .. } => train.labels.len().div_ceil(cfg.batch_size),
    };

    let mut summary = RunSummary {
        diverged: None,
        iterations_run: 0,
        final_metric: None,
        final_window_mean: None,
        test_accuracy: None,
        unit_count,
        param_count,
        csv_path: csv_path.clone(),
        checkpoint_path: ckpt_path.clone(),
    };
    let mut window: VecDeque<f64> = VecDeque::with_capacity(100);
    let mut global_step = 0usize;

    'outer: for epoch in 0..cfg.epochs {
        if cfg.lr_milestones.contains(&epoch) {
            let eta = trainer.optimizer_mut().eta() * cfg.lr_decay;
            trainer.optimizer_mut().set_eta(eta);
        }

        let order: Option<Vec<usize>> = match &task {
            TaskData::Vision { train, .. } => {
                let mut idxs: Vec<usize> = (0..train.labels.len()).collect();
                idxs.shuffle(&mut rng);
                Some(idxs)
            }
            TaskData::AddTask { .. } => None,
        };

        for it in 0..iters_per_epoch {
            let batch = match &task {
                TaskData::AddTask { t_len } => data::gen_add_task(cfg.batch_size, *t_len, &mut rng)?,
                TaskData::Vision {
                    train, encoding, ..
                } => {
                    let order = order.as_ref().expect("vision order");
                    let lo = it * cfg.batch_size;
                    let hi = ((it + 1) * cfg.batch_size).min(order.len());
                    encode_batch(train, encoding, &order[lo..hi], cfg.input_gain, &mut rng)?
                }
            };

            match trainer.train_sequence_timed(&batch, cfg.timing) {
                Ok(stats) => {
                    let metric = final_metric(&stats.final_pred, &batch.targets);
                    window.push_back(metric);
                    if window.len() > 100 {
                        window.pop_front();
                    }
                    summary.final_metric = Some(metric);
                    summary.iterations_run += 1;
                    global_step += 1;
                    if global_step % cfg.log_every == 0
                        || (epoch + 1 == cfg.epochs && it + 1 == iters_per_epoch)
                    {
                        let mean_ms = stats.step_ms.as_ref().map(|ts| {
                            ts.iter().sum::<f64>() / ts.len().max(1) as f64
                        });
                        csv.write(&MetricsRow {
                            phase: "train",
                            epoch,
                            step: global_step,
                            loss: stats.record,
                            metric,
                            firing_rate: stats.firing_rate,
                            retained: stats.peak_retained,
                            step_ms: mean_ms,
                            diverged: false,
                        })?;
                    }
                }
                Err(Error::Divergence { step, .. }) => {
                    // reportable outcome: flag the row, keep the last good
                    // checkpoint, end the run gracefully
                    csv.write(&MetricsRow {
                        phase: "train",
                        epoch,
                        step: global_step + 1,
                        loss: LossRecord {
                            t: step,
                            ce: f64::NAN,
                            div: f64::NAN,
                            reg: f64::NAN,
                            total: f64::NAN,
                        },
                        metric: f64::NAN,
                        firing_rate: 0.0,
                        retained: trainer.retained_state_count(),
                        step_ms: None,
                        diverged: true,
                    })?;
                    summary.diverged = Some(step);
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }

        if let TaskData::Vision {
            test, encoding, ..
        } = &task
        {
            let eval_row = |csv: &mut CsvWriter,
                                phase: &'static str,
                                acc: f64,
                                ce: f64|
             -> fptt_core::Result<()> {
                csv.write(&MetricsRow {
                    phase,
                    epoch,
                    step: global_step,
                    loss: LossRecord {
                        t: 0,
                        ce,
                        div: ce,
                        reg: 0.0,
                        total: ce,
                    },
                    metric: acc,
                    firing_rate: 0.0,
                    retained: 0,
                    step_ms: None,
                    diverged: false,
                })
            };

            if cfg.trainer != TrainerKind::Bptt {
                let avg_params = trainer.phi_bar_params();
                let (acc_avg, ce_avg) = evaluate_vision(
                    trainer.net(),
                    &avg_params,
                    test,
                    encoding,
                    cfg.input_gain,
                    cfg.seed,
                )?;
                eval_row(&mut csv, "eval-avg", acc_avg, ce_avg)?;
                if cfg.eval_at_phi_bar {
                    summary.test_accuracy = Some(acc_avg);
                }
                if cfg.phi_bar_snap {
                    trainer.snap_to_phi_bar();
                }
            }
            let (acc, ce) = evaluate_vision(
                trainer.net(),
                trainer.params(),
                test,
                encoding,
                cfg.input_gain,
                cfg.seed,
            )?;
            eval_row(&mut csv, "eval", acc, ce)?;
            if !(cfg.eval_at_phi_bar && cfg.trainer != TrainerKind::Bptt) {
                summary.test_accuracy = Some(acc);
            }
            checkpoint::save(&ckpt_path, &meta, trainer.params())?;
        }
    }

    if summary.diverged.is_none() {
        checkpoint::save(&ckpt_path, &meta, trainer.params())?;
    }
    csv.flush()?;
    if !window.is_empty() {
        summary.final_window_mean = Some(window.iter().sum::<f64>() / window.len() as f64);
    }
    Ok(summary)
}

/// Evaluate a stored checkpoint on a task's test split (or fresh add-task
/// batches) and return the task metric.
pub fn eval_checkpoint(
    ckpt: &Path,
    task_id: TaskId,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let (meta, _) = checkpoint::load(ckpt)?;
    let mut cfg = cfg.clone();
    cfg.task = task_id;
    cfg.arch = meta.arch.clone();
    cfg.neuron = NeuronKind::parse(&meta.neuron)?;
    let task = load_task(&cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let mut net_cfg = NetworkConfig::new(cfg.arch.clone(), task.input_dim(), cfg.neuron);
    net_cfg.readout_tau_inv = cfg.readout_tau_inv;
    let net = Network::new(&net_cfg, &mut params, &mut rng)?;
    checkpoint::load_into(ckpt, &mut params)?;

    match &task {
        TaskData::Vision {
            test, encoding, ..
        } => {
            let (acc, _) = evaluate_vision(&net, &params, test, encoding, cfg.input_gain, cfg.seed)?;
            Ok(acc)
        }
        TaskData::AddTask { t_len } => {
            let mut acc = 0.0;
            let reps = 10;
            for _ in 0..reps {
                let batch = data::gen_add_task(cfg.batch_size, *t_len, &mut rng)?;
                let (pred, _) = evaluate_sequence(&net, &params, &batch)?;
                acc += final_metric(&pred, &batch.targets);
            }
            Ok(acc / reps as f64)
        }
    }
}
