//! Experiment configuration: flat `key = value` text, one key per line, `#` comments.
//!
//! Resolution order is experiment defaults, then the file, then command-line overrides. The
//! resolved configuration prints back in the same format and parses to the same value.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::engine::{CurriculumSchedule, EpisodeConfig, UnrollConfig};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::nets::PretrainConfig;
use crate::probe::ReadoutConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    /// Two fixed tasks; the new task's training data is halved between meta-train and meta-test.
    SeqTransfer,
    /// New task resampled every episode from a meta-train class pool; tested on held-out classes.
    NewClasses,
    /// As `NewClasses`, with a pool of pretrained checkpoints and an unseen one at test time.
    NewCkpt,
    /// Two new tasks in sequence.
    ThreeTask,
    /// Fast two-task run on synthetic clusters.
    Synthetic,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::SeqTransfer,
        Experiment::NewClasses,
        Experiment::NewCkpt,
        Experiment::ThreeTask,
        Experiment::Synthetic,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Experiment::SeqTransfer => "seq-transfer",
            Experiment::NewClasses => "new-classes",
            Experiment::NewCkpt => "new-ckpt",
            Experiment::ThreeTask => "three-task",
            Experiment::Synthetic => "synthetic",
        }
    }

    /// Whether the new task is drawn from a class pool each episode.
    pub fn episodic(self) -> bool {
        matches!(self, Experiment::NewClasses | Experiment::NewCkpt | Experiment::ThreeTask)
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Update rules that can be compared. The order of [`Method::ALL`] is the report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Teacher,
    Meta,
    Sgd,
    SgdSmall,
    Ewc,
    Lwf,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Teacher,
        Method::Meta,
        Method::Sgd,
        Method::SgdSmall,
        Method::Ewc,
        Method::Lwf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Teacher => "teacher",
            Method::Meta => "meta",
            Method::Sgd => "sgd",
            Method::SgdSmall => "sgd0.1",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "teacher" => Ok(Method::Teacher),
            "meta" => Ok(Method::Meta),
            "sgd" => Ok(Method::Sgd),
            "sgd0.1" | "sgdx0.1" | "sgd*0.1" | "sgd×0.1" => Ok(Method::SgdSmall),
            "ewc" => Ok(Method::Ewc),
            "lwf" => Ok(Method::Lwf),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// `teacher,meta,sgd` in any order, de-duplicated and sorted into report order.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut m: Vec<Method> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    m.sort();
    m.dedup();
    if m.is_empty() {
        return Err(Error::Config("method list is empty".into()));
    }
    Ok(m)
}

/// A single number `n` means seeds `0..n`; a comma list gives the seeds themselves.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    let bad = || Error::Config(format!("bad seed list `{s}`"));
    let seeds: Vec<u64> = if s.contains(',') {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    } else {
        (0..s.parse::<u64>().map_err(|_| bad())?).collect()
    };
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { dir: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchKind {
    Mlp { hidden: Vec<usize> },
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub source: DataSource,
    pub data_seed: u64,
    /// `classes` is ignored; the class universe follows from the experiment.
    pub synthetic: SyntheticSpec,
    pub classes_per_task: usize,
    /// Classes in each of the meta-train and meta-test pools (episodic experiments).
    pub pool_classes: usize,
    pub arch: ArchKind,
    pub pretrain: PretrainConfig,
    /// Pretrained checkpoints in the meta-training pool.
    pub checkpoints: usize,
    pub meta: MetaConfig,
    pub episode: EpisodeConfig,
    pub schedule: CurriculumSchedule,
    pub unroll: UnrollConfig,
    pub readout: ReadoutConfig,
    pub ewc_lambda: f64,
    pub fisher_samples: usize,
    pub fisher_empirical: bool,
    pub lwf_lambda: f64,
    pub lwf_temperature: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `experiment`.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = Self {
            experiment,
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
            out: PathBuf::from("out"),
            source: DataSource::Synthetic,
            data_seed: 7,
            synthetic: SyntheticSpec {
                dim: 32,
                n_train_per_class: 200,
                n_test_per_class: 200,
                classes: 10,
                margin: 3.0,
            },
            classes_per_task: 5,
            pool_classes: 10,
            arch: ArchKind::Mlp { hidden: vec![64, 64] },
            pretrain: PretrainConfig {
                steps: 500,
                lr: 0.1,
                momentum: 0.9,
                batch: 32,
                label_offset: 0,
            },
            checkpoints: 1,
            meta: MetaConfig {
                hidden_kernel: 16,
                hidden_norm: 8,
                cells: 3,
                normalize_inputs: false,
            },
            episode: EpisodeConfig::default(),
            schedule: CurriculumSchedule::two_task(),
            unroll: UnrollConfig::default(),
            readout: ReadoutConfig::default(),
            ewc_lambda: 1.0,
            fisher_samples: 200,
            fisher_empirical: false,
            lwf_lambda: 1.0,
            lwf_temperature: 2.0,
        };
        match experiment {
            Experiment::SeqTransfer | Experiment::Synthetic => {}
            Experiment::NewClasses | Experiment::NewCkpt => {
                c.schedule = CurriculumSchedule::new_classes();
                // The learned rule is only trained on episodes this long; test on the same horizon.
                c.unroll.steps_per_task = c.episode.inner_steps;
                c.unroll.cadence = 10;
                if experiment == Experiment::NewCkpt {
                    c.checkpoints = 3;
                }
            }
            Experiment::ThreeTask => {
                c.schedule = CurriculumSchedule::three_task();
                c.episode.loss_scale = 200.0;
                c.unroll.steps_per_task = 300;
            }
        }
        if experiment == Experiment::Synthetic {
            c.episode.episodes = 100;
            c.unroll.steps_per_task = 300;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        if self.classes_per_task < 2 || self.checkpoints == 0 {
            return Err(Error::Config("need at least 2 classes per task and 1 checkpoint".into()));
        }
        if self.experiment.episodic() && self.pool_classes < self.classes_per_task * (self.tasks() - 1) {
            return Err(Error::Config(format!(
                "a pool of {} classes cannot supply {} new tasks of {}",
                self.pool_classes,
                self.tasks() - 1,
                self.classes_per_task
            )));
        }
        if let DataSource::Cifar10 { dir } = &self.source {
            if !dir.is_dir() {
                return Err(Error::Config(format!("cifar_dir {} does not exist", dir.display())));
            }
            if self.experiment.episodic() {
                return Err(Error::Config(format!(
                    "{} needs more classes than CIFAR-10 provides; use source = synthetic",
                    self.experiment.id()
                )));
            }
        }
        Ok(())
    }

    /// Tasks per stream, the pretraining task included.
    pub fn tasks(&self) -> usize {
        if self.experiment == Experiment::ThreeTask {
            3
        } else {
            2
        }
    }

    /// Parses a configuration file on top of the defaults of its `experiment` key (or of
    /// `fallback` when the file has none and the caller supplies one).
    pub fn parse(text: &str, fallback: Option<Experiment>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let experiment = match pairs.iter().find(|(k, _, _)| k == "experiment") {
            Some((_, v, line)) => v.parse().map_err(|e: Error| Error::ConfigParse {
                line: *line,
                msg: e.to_string(),
            })?,
            None => fallback.ok_or_else(|| Error::MissingKey("experiment".into()))?,
        };
        let mut c = Self::defaults(experiment);
        for (k, v, line) in &pairs {
            c.set(k, v).map_err(|e| Error::ConfigParse {
                line: *line,
                msg: format!("`{k}`: {e}"),
            })?;
        }
        if let DataSource::Cifar10 { dir } = &c.source {
            if dir.as_os_str().is_empty() {
                return Err(Error::MissingKey("cifar_dir".into()));
            }
        }
        Ok(c)
    }

    /// Sets one key. Used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{v}`")))
        }
        fn flag(v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("expected true or false, got `{v}`"))),
            }
        }
        let v = value.trim();
        match key {
            "experiment" => {
                let e: Experiment = v.parse()?;
                if e != self.experiment {
                    let keep = (self.methods.clone(), self.seeds.clone(), self.out.clone());
                    *self = Self::defaults(e);
                    (self.methods, self.seeds, self.out) = keep;
                }
            }
            "methods" => self.methods = parse_methods(v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "out" => self.out = PathBuf::from(v),
            "source" => {
                self.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar10" => match &self.source {
                        DataSource::Cifar10 { dir } => DataSource::Cifar10 { dir: dir.clone() },
                        DataSource::Synthetic => DataSource::Cifar10 { dir: PathBuf::new() },
                    },
                    _ => return Err(Error::Config(format!("unknown source `{v}`"))),
                }
            }
            "cifar_dir" => {
                self.source = DataSource::Cifar10 { dir: PathBuf::from(v) };
            }
            "data_seed" => self.data_seed = num(v)?,
            "input_dim" => self.synthetic.dim = num(v)?,
            "train_per_class" => self.synthetic.n_train_per_class = num(v)?,
            "test_per_class" => self.synthetic.n_test_per_class = num(v)?,
            "margin" => self.synthetic.margin = num(v)?,
            "classes_per_task" => self.classes_per_task = num(v)?,
            "pool_classes" => self.pool_classes = num(v)?,
            "arch" => {
                self.arch = match v {
                    "conv" => ArchKind::Conv,
                    "mlp" => match &self.arch {
                        ArchKind::Mlp { hidden } => ArchKind::Mlp { hidden: hidden.clone() },
                        ArchKind::Conv => ArchKind::Mlp { hidden: vec![64, 64] },
                    },
                    _ => return Err(Error::Config(format!("unknown arch `{v}`"))),
                }
            }
            "hidden" => {
                let hidden = v.split(',').map(num).collect::<Result<Vec<usize>>>()?;
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Config("hidden widths must be positive".into()));
                }
                self.arch = ArchKind::Mlp { hidden };
            }
            "pretrain_steps" => self.pretrain.steps = num(v)?,
            "pretrain_lr" => self.pretrain.lr = num(v)?,
            "pretrain_momentum" => self.pretrain.momentum = num(v)?,
            "pretrain_batch" => self.pretrain.batch = num(v)?,
            "checkpoints" => self.checkpoints = num(v)?,
            "meta_hidden_kernel" => self.meta.hidden_kernel = num(v)?,
            "meta_hidden_norm" => self.meta.hidden_norm = num(v)?,
            "meta_cells" => self.meta.cells = num(v)?,
            "meta_normalize_inputs" => self.meta.normalize_inputs = flag(v)?,
            "episodes" => self.episode.episodes = num(v)?,
            "inner_steps" => self.episode.inner_steps = num(v)?,
            "alpha" => {
                self.episode.alpha = num(v)?;
                self.unroll.alpha = self.episode.alpha;
            }
            "meta_lr" => self.episode.meta_lr = num(v)?,
            "teacher_batch" => {
                self.episode.teacher_batch = num(v)?;
                self.unroll.teacher_batch = self.episode.teacher_batch;
            }
            "student_batch" => {
                self.episode.student_batch = num(v)?;
                self.unroll.student_batch = self.episode.student_batch;
            }
            "huber_delta" => self.episode.huber_delta = num(v)?,
            "loss_scale" => self.episode.loss_scale = num(v)?,
            "match_all_layers" => self.episode.match_all_layers = flag(v)?,
            "deterministic_log" => self.episode.deterministic_log = flag(v)?,
            "threshold0" => self.schedule.threshold0 = num(v)?,
            "threshold_increment" => self.schedule.threshold_increment = num(v)?,
            "threshold_cap" => self.schedule.threshold_cap = num(v)?,
            "tbptt0" => self.schedule.tbptt0 = num(v)?,
            "tbptt_increment" => self.schedule.tbptt_increment = num(v)?,
            "tbptt_cap" => self.schedule.tbptt_cap = num(v)?,
            "schedule_period" => self.schedule.period = num(v)?,
            "task_switch_bump" => self.schedule.task_switch_bump = num(v)?,
            "unroll_steps" => self.unroll.steps_per_task = num(v)?,
            "snapshot_every" => self.unroll.cadence = num(v)?,
            "log_gates" => self.unroll.log_gates = flag(v)?,
            "readout_steps" => self.readout.steps = num(v)?,
            "readout_lr" => self.readout.lr = num(v)?,
            "ewc_lambda" => self.ewc_lambda = num(v)?,
            "fisher_samples" => self.fisher_samples = num(v)?,
            "fisher_empirical" => self.fisher_empirical = flag(v)?,
            "lwf_lambda" => self.lwf_lambda = num(v)?,
            "lwf_temperature" => self.lwf_temperature = num(v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let join = |xs: &[usize]| xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut e = vec![
            ("experiment", self.experiment.id().to_string()),
            (
                "methods",
                self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            ),
            (
                "seeds",
                self.seeds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",") + ",",
            ),
            ("out", self.out.display().to_string()),
        ];
        match &self.source {
            DataSource::Synthetic => e.push(("source", "synthetic".into())),
            DataSource::Cifar10 { dir } => {
                e.push(("source", "cifar10".into()));
                e.push(("cifar_dir", dir.display().to_string()));
            }
        }
        e.extend([
            ("data_seed", self.data_seed.to_string()),
            ("input_dim", self.synthetic.dim.to_string()),
            ("train_per_class", self.synthetic.n_train_per_class.to_string()),
            ("test_per_class", self.synthetic.n_test_per_class.to_string()),
            ("margin", self.synthetic.margin.to_string()),
            ("classes_per_task", self.classes_per_task.to_string()),
            ("pool_classes", self.pool_classes.to_string()),
        ]);
        match &self.arch {
            ArchKind::Conv => e.push(("arch", "conv".into())),
            ArchKind::Mlp { hidden } => {
                e.push(("arch", "mlp".into()));
                e.push(("hidden", join(hidden)));
            }
        }
        e.extend([
            ("pretrain_steps", self.pretrain.steps.to_string()),
            ("pretrain_lr", self.pretrain.lr.to_string()),
            ("pretrain_momentum", self.pretrain.momentum.to_string()),
            ("pretrain_batch", self.pretrain.batch.to_string()),
            ("checkpoints", self.checkpoints.to_string()),
            ("meta_hidden_kernel", self.meta.hidden_kernel.to_string()),
            ("meta_hidden_norm", self.meta.hidden_norm.to_string()),
            ("meta_cells", self.meta.cells.to_string()),
            ("meta_normalize_inputs", self.meta.normalize_inputs.to_string()),
            ("episodes", self.episode.episodes.to_string()),
            ("inner_steps", self.episode.inner_steps.to_string()),
            ("alpha", self.episode.alpha.to_string()),
            ("meta_lr", self.episode.meta_lr.to_string()),
            ("teacher_batch", self.episode.teacher_batch.to_string()),
            ("student_batch", self.episode.student_batch.to_string()),
            ("huber_delta", self.episode.huber_delta.to_string()),
            ("loss_scale", self.episode.loss_scale.to_string()),
            ("match_all_layers", self.episode.match_all_layers.to_string()),
            ("deterministic_log", self.episode.deterministic_log.to_string()),
            ("threshold0", self.schedule.threshold0.to_string()),
            ("threshold_increment", self.schedule.threshold_increment.to_string()),
            ("threshold_cap", self.schedule.threshold_cap.to_string()),
            ("tbptt0", self.schedule.tbptt0.to_string()),
            ("tbptt_increment", self.schedule.tbptt_increment.to_string()),
            ("tbptt_cap", self.schedule.tbptt_cap.to_string()),
            ("schedule_period", self.schedule.period.to_string()),
            ("task_switch_bump", self.schedule.task_switch_bump.to_string()),
            ("unroll_steps", self.unroll.steps_per_task.to_string()),
            ("snapshot_every", self.unroll.cadence.to_string()),
            ("log_gates", self.unroll.log_gates.to_string()),
            ("readout_steps", self.readout.steps.to_string()),
            ("readout_lr", self.readout.lr.to_string()),
            ("ewc_lambda", self.ewc_lambda.to_string()),
            ("fisher_samples", self.fisher_samples.to_string()),
            ("fisher_empirical", self.fisher_empirical.to_string()),
            ("lwf_lambda", self.lwf_lambda.to_string()),
            ("lwf_temperature", self.lwf_temperature.to_string()),
        ]);
        e
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// `(key, value, line)` triples. Duplicate keys are an error.
fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::ConfigParse {
                line,
                msg: "empty key".into(),
            });
        }
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(Error::ConfigParse {
                line,
                msg: format!("`{k}` already set on line {first}"),
            });
        }
        out.push((k.to_string(), v.to_string(), line));
    }
    Ok(out)
}
