//! Flat key=value experiment configuration, one file per experiment.
//! `[section]` headers are allowed for readability and ignored; `#` starts
//! a comment. Shipped presets are embedded in the binary and resolved by
//! name when no file of that name exists.

use fptt_core::learning::{
    BetaSchedule, LossAttachment, LossKind, LossSpec, OptimMethod, QSpec, TrainerKind,
};
use fptt_core::network::NeuronKind;
use fptt_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const PRESETS: &[(&str, &str)] = &[
    ("addtask-200", include_str!("../presets/addtask-200.cfg")),
    ("addtask-500", include_str!("../presets/addtask-500.cfg")),
    ("addtask-1000", include_str!("../presets/addtask-1000.cfg")),
    ("smnist", include_str!("../presets/smnist.cfg")),
    ("psmnist", include_str!("../presets/psmnist.cfg")),
    ("rmnist", include_str!("../presets/rmnist.cfg")),
    ("mnist-static", include_str!("../presets/mnist-static.cfg")),
    ("fashion-static", include_str!("../presets/fashion-static.cfg")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskId {
    AddTask,
    SMnist,
    PsMnist,
    RMnist,
    MnistStatic,
    FashionStatic,
}

impl TaskId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "addtask" | "add-task" => Ok(TaskId::AddTask),
            "smnist" | "s-mnist" => Ok(TaskId::SMnist),
            "psmnist" | "ps-mnist" => Ok(TaskId::PsMnist),
            "rmnist" | "r-mnist" => Ok(TaskId::RMnist),
            "mnist-static" => Ok(TaskId::MnistStatic),
            "fashion-static" => Ok(TaskId::FashionStatic),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskId::AddTask => "addtask",
            TaskId::SMnist => "smnist",
            TaskId::PsMnist => "psmnist",
            TaskId::RMnist => "rmnist",
            TaskId::MnistStatic => "mnist-static",
            TaskId::FashionStatic => "fashion-static",
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskId::AddTask)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskId,
    pub seq_len: usize,
    pub arch: String,
    pub neuron: NeuronKind,
    pub trainer: TrainerKind,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub beta_schedule: BetaSchedule,
    pub q_smoothing: f64,
    pub lr: f64,
    pub optimizer: OptimMethod,
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch for the generative add task.
    pub iterations: usize,
    pub seed: u64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub loss_mode: LossAttachment,
    pub readout_tau_inv: f64,
    pub tau_m_bias: f64,
    pub tau_adp_bias: f64,
    pub input_gain: f64,
    pub train_subset: usize,
    pub test_subset: usize,
    pub downsample: usize,
    pub permute_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub log_every: usize,
    pub timing: bool,
    pub shards: usize,
    pub exact_phi_bar: bool,
    /// Evaluate/checkpoint at the running average instead of the live
    /// weights (FPTT-family trainers only).
    pub eval_at_phi_bar: bool,
    /// Snap the live weights to the running average at each epoch end.
    pub phi_bar_snap: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskId::AddTask,
            seq_len: 200,
            arch: "128R-1I".into(),
            neuron: NeuronKind::Ltc,
            trainer: TrainerKind::Fptt,
            k: 1,
            alpha: 0.1,
            beta: 0.5,
            beta_schedule: BetaSchedule::Const(0.5),
            q_smoothing: 0.0,
            lr: 1e-3,
            optimizer: OptimMethod::AdaptiveMoment,
            grad_clip: None,
            epochs: 1,
            batch_size: 128,
            iterations: 100,
            seed: 1,
            lr_milestones: Vec::new(),
            lr_decay: 0.5,
            loss_mode: LossAttachment::FinalWindow(0.2),
            readout_tau_inv: 0.5,
            tau_m_bias: 0.0,
            tau_adp_bias: 2.0,
            input_gain: 1.0,
            train_subset: 0,
            test_subset: 0,
            downsample: 1,
            permute_seed: 0x5eed,
            data_dir: None,
            out_dir: PathBuf::from("runs/run"),
            log_every: 10,
            timing: false,
            shards: 1,
            exact_phi_bar: false,
            eval_at_phi_bar: false,
            phi_bar_snap: false,
        }
    }
}

impl ExperimentConfig {
    /// Load from a path, or from an embedded preset when no such file exists.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            return Self::parse(&text);
        }
        for (name, text) in PRESETS {
            if *name == name_or_path {
                return Self::parse(text);
            }
        }
        Err(Error::config(format!(
            "'{name_or_path}' is neither a config file nor a preset; presets: {}",
            PRESETS
                .iter()
                .map(|(n, _)| *n)
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected key = value, got '{raw}'",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            if kv.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("duplicate key '{key}'")));
            }
        }
        Self::from_map(kv)
    }

    fn from_map(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut take = |k: &str| kv.remove(k);

        if let Some(v) = take("task") {
            cfg.task = TaskId::parse(&v)?;
        }
        if let Some(v) = take("seq_len") {
            cfg.seq_len = parse_num(&v, "seq_len")?;
        }
        if let Some(v) = take("arch") {
            cfg.arch = v;
        }
        if let Some(v) = take("neuron") {
            cfg.neuron = NeuronKind::parse(&v)?;
        }
        if let Some(v) = take("trainer") {
            cfg.trainer = TrainerKind::parse(&v)?;
        }
        if let Some(v) = take("k") {
            cfg.k = parse_num(&v, "k")?;
        }
        if let Some(v) = take("alpha") {
            cfg.alpha = parse_num(&v, "alpha")?;
        }
        if let Some(v) = take("beta") {
            cfg.beta = parse_num(&v, "beta")?;
        }
        if let Some(v) = take("beta_schedule") {
            cfg.beta_schedule = match v.as_str() {
                "const" => BetaSchedule::Const(cfg.beta),
                "ramp" => BetaSchedule::Ramp,
                other => return Err(Error::config(format!("bad beta_schedule '{other}'"))),
            };
        } else {
            cfg.beta_schedule = BetaSchedule::Const(cfg.beta);
        }
        if let Some(v) = take("q_smoothing") {
            cfg.q_smoothing = parse_num(&v, "q_smoothing")?;
        }
        if let Some(v) = take("lr") {
            cfg.lr = parse_num(&v, "lr")?;
        }
        if let Some(v) = take("optimizer") {
            cfg.optimizer = OptimMethod::parse(&v)
                .ok_or_else(|| Error::config(format!("bad optimizer '{v}'")))?;
        }
        if let Some(v) = take("grad_clip") {
            cfg.grad_clip = if v == "none" {
                None
            } else {
                Some(parse_num(&v, "grad_clip")?)
            };
        }
        if let Some(v) = take("epochs") {
            cfg.epochs = parse_num(&v, "epochs")?;
        }
        if let Some(v) = take("batch_size") {
            cfg.batch_size = parse_num(&v, "batch_size")?;
        }
        if let Some(v) = take("iterations") {
            cfg.iterations = parse_num(&v, "iterations")?;
        }
        let seed = take("seed");
        if let Some(v) = take("lr_milestones") {
            cfg.lr_milestones = v
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_num(s.trim(), "lr_milestones"))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = take("lr_decay") {
            cfg.lr_decay = parse_num(&v, "lr_decay")?;
        }
        if let Some(v) = take("loss_mode") {
            cfg.loss_mode = match v.as_str() {
                "every-step" => LossAttachment::EveryStep,
                "final-step" => LossAttachment::FinalStep,
                "final-20" => LossAttachment::FinalWindow(0.2),
                other => {
                    let frac: Option<f64> = other
                        .strip_prefix("final-window:")
                        .and_then(|f| f.parse().ok());
                    match frac {
                        Some(f) => LossAttachment::FinalWindow(f),
                        None => return Err(Error::config(format!("bad loss_mode '{other}'"))),
                    }
                }
            };
        }
        if let Some(v) = take("readout_tau_inv") {
            cfg.readout_tau_inv = parse_num(&v, "readout_tau_inv")?;
        }
        if let Some(v) = take("tau_m_bias") {
            cfg.tau_m_bias = parse_num(&v, "tau_m_bias")?;
        }
        if let Some(v) = take("tau_adp_bias") {
            cfg.tau_adp_bias = parse_num(&v, "tau_adp_bias")?;
        }
        if let Some(v) = take("input_gain") {
            cfg.input_gain = parse_num(&v, "input_gain")?;
        }
        if let Some(v) = take("train_subset") {
            cfg.train_subset = parse_num(&v, "train_subset")?;
        }
        if let Some(v) = take("test_subset") {
            cfg.test_subset = parse_num(&v, "test_subset")?;
        }
        if let Some(v) = take("downsample") {
            cfg.downsample = parse_num(&v, "downsample")?;
        }
        if let Some(v) = take("permute_seed") {
            cfg.permute_seed = parse_num(&v, "permute_seed")?;
        }
        if let Some(v) = take("data_dir") {
            cfg.data_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = take("out_dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        if let Some(v) = take("log_every") {
            cfg.log_every = parse_num(&v, "log_every")?;
        }
        if let Some(v) = take("timing") {
            cfg.timing = parse_bool(&v, "timing")?;
        }
        if let Some(v) = take("shards") {
            cfg.shards = parse_num(&v, "shards")?;
        }
        if let Some(v) = take("exact_phi_bar") {
            cfg.exact_phi_bar = parse_bool(&v, "exact_phi_bar")?;
        }
        if let Some(v) = take("eval_at") {
            cfg.eval_at_phi_bar = match v.as_str() {
                "phi" => false,
                "phi-bar" => true,
                other => return Err(Error::config(format!("bad eval_at '{other}'"))),
            };
        }
        if let Some(v) = take("phi_bar_snap") {
            cfg.phi_bar_snap = parse_bool(&v, "phi_bar_snap")?;
        }

        let Some(seed) = seed else {
            return Err(Error::config("seed is mandatory"));
        };
        cfg.seed = parse_num(&seed, "seed")?;

        if let Some(k) = kv.keys().next() {
            return Err(Error::config(format!("unknown config key '{k}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        if !(0.0..=1.0).contains(&self.q_smoothing) {
            return Err(Error::config("q_smoothing must lie in [0,1]"));
        }
        if self.downsample == 0 {
            return Err(Error::config("downsample factor must be positive"));
        }
        Ok(())
    }

    /// Dataset root: explicit config, then `SNN_DATA_DIR`, then `./data`.
    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var("SNN_DATA_DIR") {
            return PathBuf::from(d);
        }
        PathBuf::from("data")
    }

    pub fn loss_spec(&self) -> LossSpec {
        let kind = if self.task.is_classification() {
            LossKind::Classification {
                beta: match self.beta_schedule {
                    BetaSchedule::Ramp => BetaSchedule::Ramp,
                    BetaSchedule::Const(_) => BetaSchedule::Const(self.beta),
                },
                q: if self.q_smoothing > 0.0 {
                    QSpec::Smoothed(self.q_smoothing)
                } else {
                    QSpec::OneHot
                },
            }
        } else {
            LossKind::Regression
        };
        LossSpec {
            kind,
            attach: self.loss_mode,
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value '{v}' for {key}")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean '{v}' for {key}"))),
    }
}
