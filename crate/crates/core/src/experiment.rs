//! End-to-end runs: data, pretraining, meta-training, unrolls of every method, probing, and
//! the files they produce.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{EwcRule, FisherLabels, LwfRule, SgdRule};
use crate::config::{ArchKind, DataSource, Experiment, ExperimentConfig, Method};
use crate::data::{halve_examples, load_cifar10_binary, split_task, synthetic_tasks, Dataset, SplitTag, Standardizer, SyntheticSpec, TaskData};
use crate::engine::{
    run_meta_training, unroll, EpisodeTasks, EpisodicTasks, GateRecord, MetaRule, MetaTrainer, TaskStream, TeacherRule,
    TrainingLog, UpdateRule,
};
use crate::error::{Error, Result};
use crate::io;
use crate::meta::MetaParams;
use crate::nets::{pretrain, Architecture, NetworkParams, PretrainConfig};
use crate::par::{self, Parallelism};
use crate::probe::{forgetting_curve, probe_csv, ProbeResult, ProbeTask};
use crate::tensor::Tensor;

/// Meta-training tasks: one fixed stream, or a fresh draw per episode.
#[derive(Clone, Debug)]
pub enum TrainTasks {
    Fixed(TaskStream),
    Episodic(EpisodicTasks),
}

impl TrainTasks {
    pub fn as_source(&self) -> &dyn EpisodeTasks {
        match self {
            TrainTasks::Fixed(s) => s,
            TrainTasks::Episodic(e) => e,
        }
    }
}

/// Everything shared by the seeds of one run.
#[derive(Clone, Debug)]
pub struct Setup {
    pub arch: Architecture,
    pub task_a: TaskData,
    pub train_tasks: TrainTasks,
    /// Checkpoints the meta-training episodes start from.
    pub pool: Vec<NetworkParams>,
    /// Checkpoint every method starts from at test time.
    pub test_checkpoint: NetworkParams,
    test: TestTasks,
}

#[derive(Clone, Debug)]
enum TestTasks {
    Fixed(TaskStream),
    Episodic(EpisodicTasks),
}

fn universe(cfg: &ExperimentConfig, classes: usize) -> Result<TaskData> {
    match &cfg.source {
        DataSource::Synthetic => synthetic_tasks(
            cfg.data_seed,
            &SyntheticSpec {
                classes,
                ..cfg.synthetic.clone()
            },
        ),
        DataSource::Cifar10 { dir } => {
            let parts = (1..=5)
                .map(|i| load_cifar10_binary(dir.join(format!("data_batch_{i}.bin")), SplitTag::Train))
                .collect::<Result<Vec<Dataset>>>()?;
            let inputs: Vec<&Tensor> = parts.iter().map(|d| &d.inputs).collect();
            let train = Dataset::new(
                Tensor::cat_rows(&inputs)?,
                parts.iter().flat_map(|d| d.labels.iter().copied()).collect(),
                parts[0].classes.clone(),
                SplitTag::Train,
            )?;
            let test = load_cifar10_binary(dir.join("test_batch.bin"), SplitTag::Test)?;
            Ok(TaskData { train, test })
        }
    }
}

fn shape_for_arch(cfg: &ExperimentConfig, data: TaskData) -> Result<TaskData> {
    match (&cfg.arch, &cfg.source) {
        (ArchKind::Conv, DataSource::Synthetic) => {
            let d = cfg.synthetic.dim;
            let side = (d as f64).sqrt().round() as usize;
            if side * side != d {
                return Err(Error::Config(format!("conv on synthetic data needs a square input_dim, got {d}")));
            }
            Ok(TaskData {
                train: data.train.reshape_examples(&[1, side, side])?,
                test: data.test.reshape_examples(&[1, side, side])?,
            })
        }
        (_, DataSource::Cifar10 { .. }) => Ok(TaskData {
            train: data.train.reshape_examples(&[3, 32, 32])?,
            test: data.test.reshape_examples(&[3, 32, 32])?,
        }),
        (ArchKind::Mlp { .. }, DataSource::Synthetic) => Ok(data),
    }
}

fn architecture(cfg: &ExperimentConfig, example: &[usize], classes: usize) -> Result<Architecture> {
    let arch = match &cfg.arch {
        ArchKind::Mlp { hidden } => {
            let d = example.iter().product();
            Architecture::mlp(d, hidden, classes)
        }
        ArchKind::Conv => {
            if example.len() != 3 || example[1] != example[2] {
                return Err(Error::Config(format!("conv net needs square [c, h, w] inputs, got {example:?}")));
            }
            Architecture::small_conv(example[0], example[1], classes)
        }
    };
    arch.validate()?;
    Ok(arch)
}

fn checkpoint_seed(cfg: &ExperimentConfig, j: usize) -> u64 {
    cfg.data_seed.wrapping_mul(1_000).wrapping_add(j as u64)
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.classes_per_task;
        let new_tasks = cfg.tasks() - 1;
        let episodic = cfg.experiment.episodic();
        let total = if episodic { k + 2 * cfg.pool_classes } else { k * cfg.tasks() };
        let raw = universe(cfg, total)?;
        if raw.train.num_classes() < total {
            return Err(Error::Data(format!(
                "data has {} classes, the experiment needs {total}",
                raw.train.num_classes()
            )));
        }
        let raw = shape_for_arch(cfg, raw)?;

        // Standardization constants come from the first task only.
        let a_classes: Vec<usize> = (0..k).collect();
        let a_raw = split_task(&raw, &[a_classes.clone()])?.remove(0);
        let norm = Standardizer::fit(&a_raw.train);
        let all = TaskData {
            train: norm.apply(&raw.train),
            test: norm.apply(&raw.test),
        };
        let task_a = split_task(&all, &[a_classes])?.remove(0);

        let arch = architecture(cfg, task_a.train.example_shape(), k * cfg.tasks())?;
        let pretrain_cfg = PretrainConfig {
            label_offset: 0,
            ..cfg.pretrain.clone()
        };
        let pool = (0..cfg.checkpoints)
            .map(|j| pretrain(&arch, &task_a.train, &pretrain_cfg, checkpoint_seed(cfg, j)))
            .collect::<Result<Vec<_>>>()?;
        let test_checkpoint = if cfg.experiment == Experiment::NewCkpt {
            pretrain(&arch, &task_a.train, &pretrain_cfg, checkpoint_seed(cfg, cfg.checkpoints))?
        } else {
            pool[0].clone()
        };

        let (train_tasks, test) = if episodic {
            let train_pool: Vec<usize> = (k..k + cfg.pool_classes).collect();
            let test_pool: Vec<usize> = (k + cfg.pool_classes..k + 2 * cfg.pool_classes).collect();
            let make = |pool: Vec<usize>, seed: u64| EpisodicTasks {
                fixed: vec![task_a.clone()],
                source: all.clone(),
                pool,
                k,
                count: new_tasks,
                seed,
            };
            (
                TrainTasks::Episodic(make(train_pool, cfg.data_seed)),
                TestTasks::Episodic(make(test_pool, cfg.data_seed ^ 0x7e57)),
            )
        } else {
            let b = split_task(&all, &[(k..2 * k).collect()])?.remove(0);
            let (b1, b2) = halve_examples(&b.train);
            let train = TaskStream::new(vec![
                task_a.clone(),
                TaskData {
                    train: b1,
                    test: b.test.clone(),
                },
            ])?;
            let test = TaskStream::new(vec![
                task_a.clone(),
                TaskData {
                    train: b2,
                    test: b.test,
                },
            ])?;
            (TrainTasks::Fixed(train), TestTasks::Fixed(test))
        };
        Ok(Self {
            arch,
            task_a,
            train_tasks,
            pool,
            test_checkpoint,
            test,
        })
    }

    /// Meta-test stream for `seed`: fixed, or a fresh held-out draw per seed.
    pub fn test_stream(&self, seed: u64) -> Result<TaskStream> {
        match &self.test {
            TestTasks::Fixed(s) => Ok(s.clone()),
            TestTasks::Episodic(e) => {
                let mut tasks = e.fixed.clone();
                tasks.extend(e.sample(seed as usize)?);
                TaskStream::new(tasks)
            }
        }
    }
}

/// Probe tasks for every task of `stream`, numbered from 1.
pub fn probe_tasks(stream: &TaskStream) -> Vec<ProbeTask> {
    stream
        .tasks
        .iter()
        .zip(&stream.offsets)
        .enumerate()
        .map(|(i, (t, &o))| ProbeTask {
            id: i + 1,
            data: t.clone(),
            offset: o,
        })
        .collect()
}

pub fn build_rule(method: Method, theta: Option<&MetaParams>, cfg: &ExperimentConfig, seed: u64) -> Result<Box<dyn UpdateRule>> {
    Ok(match method {
        Method::Teacher => Box::new(TeacherRule),
        Method::Meta => Box::new(MetaRule::new(
            theta
                .ok_or_else(|| Error::Spec("the meta method needs trained meta-parameters".into()))?
                .clone(),
        )),
        Method::Sgd => Box::new(SgdRule { scale: 1.0 }),
        Method::SgdSmall => Box::new(SgdRule { scale: 0.1 }),
        Method::Ewc => Box::new(EwcRule::new(
            cfg.ewc_lambda,
            cfg.fisher_samples,
            if cfg.fisher_empirical {
                FisherLabels::Empirical
            } else {
                FisherLabels::Model
            },
            seed ^ 0xe3c,
        )),
        Method::Lwf => Box::new(LwfRule::new(cfg.lwf_lambda, cfg.lwf_temperature)),
    })
}

/// Meta-trains a rule for `seed` on the setup's training tasks.
pub fn train_meta(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<(MetaParams, TrainingLog)> {
    let theta = MetaParams::for_network(&setup.pool[0], &cfg.meta, seed)?;
    let mut trainer = MetaTrainer::new(theta, cfg.episode.clone(), cfg.schedule.clone())?;
    let log = run_meta_training(&mut trainer, setup.train_tasks.as_source(), &setup.pool, seed)?;
    Ok((trainer.theta, log))
}

/// Results of one method on one seed.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub curve: Vec<ProbeResult>,
    pub gates: Vec<GateRecord>,
    pub batch_hashes: Vec<(u64, u64)>,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub theta: Option<MetaParams>,
    pub log: Option<TrainingLog>,
    pub methods: Vec<MethodRun>,
}

/// Unrolls and probes one method from the test checkpoint.
pub fn run_method(
    cfg: &ExperimentConfig,
    setup: &Setup,
    method: Method,
    theta: Option<&MetaParams>,
    seed: u64,
) -> Result<MethodRun> {
    let stream = setup.test_stream(seed)?;
    let mut rule = build_rule(method, theta, cfg, seed)?;
    let run = unroll(rule.as_mut(), &stream, &setup.test_checkpoint, &cfg.unroll, seed.wrapping_add(0x0b5e_55ed))?;
    let curve = forgetting_curve(
        method.name(),
        seed,
        &run.snapshots,
        &probe_tasks(&stream),
        &cfg.readout,
        Parallelism::Sequential,
    )?;
    Ok(MethodRun {
        method,
        curve,
        gates: run.gates,
        batch_hashes: run.batch_hashes,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<SeedRun> {
    let (theta, log) = if cfg.methods.contains(&Method::Meta) {
        let (t, l) = train_meta(cfg, setup, seed)?;
        (Some(t), Some(l))
    } else {
        (None, None)
    };
    let methods = cfg
        .methods
        .iter()
        .map(|&m| run_method(cfg, setup, m, theta.as_ref(), seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        theta,
        log,
        methods,
    })
}

#[derive(Clone, Debug)]
pub struct Report {
    pub setup: Setup,
    pub seeds: Vec<SeedRun>,
    pub table: CompareTable,
}

impl Report {
    pub fn results(&self) -> Vec<ProbeResult> {
        self.seeds
            .iter()
            .flat_map(|s| s.methods.iter().flat_map(|m| m.curve.iter().cloned()))
            .collect()
    }
}

/// Runs every seed (in parallel when `mode` allows) and builds the comparison table.
pub fn run(cfg: &ExperimentConfig, mode: Parallelism) -> Result<Report> {
    let setup = Setup::build(cfg)?;
    let seeds = par::map(mode, cfg.seeds.clone(), |s| run_seed(cfg, &setup, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<ProbeResult> = seeds
        .iter()
        .flat_map(|s| s.methods.iter().flat_map(|m| m.curve.iter().cloned()))
        .collect();
    let table = compare_table(&results)?;
    Ok(Report { setup, seeds, table })
}

/// Writes every artifact of `report` under `cfg.out`. Returns the written paths.
pub fn write_outputs(cfg: &ExperimentConfig, report: &Report) -> Result<Vec<PathBuf>> {
    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("config.txt".into(), cfg.to_string().as_bytes())?;
    for (j, ck) in report.setup.pool.iter().enumerate() {
        put(format!("checkpoint_{j}.rmbr"), &io::encode_network(ck)?)?;
    }
    if cfg.experiment == Experiment::NewCkpt {
        put("checkpoint_test.rmbr".into(), &io::encode_network(&report.setup.test_checkpoint)?)?;
    }
    for s in &report.seeds {
        if let Some(log) = &s.log {
            put(format!("train_log_seed{}.csv", s.seed), log.to_csv().as_bytes())?;
        }
        if let Some(theta) = &s.theta {
            put(format!("theta_seed{}.rmbr", s.seed), &io::encode_theta(theta)?)?;
        }
        for m in &s.methods {
            put(format!("probe_{}_seed{}.csv", m.method.name(), s.seed), probe_csv(&m.curve).as_bytes())?;
            if cfg.unroll.log_gates && m.method == Method::Meta {
                let theta = s.theta.as_ref().expect("meta runs carry their parameters");
                let h = emit_gate_histogram(&m.gates, theta, GATE_BINS)?;
                put(format!("gates_seed{}.csv", s.seed), gate_histogram_csv(&h).as_bytes())?;
            }
        }
    }
    put("compare.txt".into(), report.table.to_text().as_bytes())?;
    put("compare.csv".into(), report.table.to_csv().as_bytes())?;
    Ok(written)
}

pub const GATE_BINS: usize = 20;

/// Gate distribution of one gated tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GateHistogram {
    pub slot: usize,
    /// Bins cover `(-bound, bound)`, `bound = |c|` of the tensor's gating network.
    pub bound: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub negative_fraction: f64,
}

/// Per-tensor histograms of logged gates with `bins` equal bins over `(-|c|, |c|)`.
pub fn emit_gate_histogram(records: &[GateRecord], theta: &MetaParams, bins: usize) -> Result<Vec<GateHistogram>> {
    if records.is_empty() {
        return Err(Error::Data("no gate log; rerun with gate logging enabled".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut by_slot: BTreeMap<usize, Vec<&GateRecord>> = BTreeMap::new();
    for r in records {
        by_slot.entry(r.slot).or_default().push(r);
    }
    by_slot
        .into_iter()
        .map(|(slot, recs)| {
            let net = theta
                .nets
                .iter()
                .find(|n| n.slot == slot)
                .ok_or(Error::NoMetaNetwork(slot))?;
            let bound = net.scale.item().abs();
            let width = 2.0 * bound / bins as f64;
            let edges: Vec<f64> = (0..=bins).map(|i| -bound + width * i as f64).collect();
            let mut counts = vec![0u64; bins];
            let mut negative = 0u64;
            let mut total = 0u64;
            for v in recs.iter().flat_map(|r| r.values.iter()) {
                let b = ((v + bound) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
                counts[b] += 1;
                total += 1;
                negative += u64::from(*v < 0.0);
            }
            Ok(GateHistogram {
                slot,
                bound,
                edges,
                counts,
                total,
                negative_fraction: negative as f64 / total.max(1) as f64,
            })
        })
        .collect()
}

pub fn gate_histogram_csv(hists: &[GateHistogram]) -> String {
    let mut s = String::from("slot,bin_low,bin_high,count,negative_fraction\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{:.6}\n",
                h.slot,
                h.edges[i],
                h.edges[i + 1],
                c,
                h.negative_fraction
            ));
        }
    }
    s
}

/// Final-step readout accuracy per method and task, mean and standard deviation over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub tasks: Vec<usize>,
    pub final_step: usize,
    pub rows: Vec<CompareRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    /// `(mean, std, seeds)` per task.
    pub cells: Vec<(f64, f64, usize)>,
}

fn method_rank(name: &str) -> usize {
    Method::ALL
        .iter()
        .position(|m| m.name() == name)
        .unwrap_or(Method::ALL.len())
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn compare_table(results: &[ProbeResult]) -> Result<CompareTable> {
    if results.is_empty() {
        return Err(Error::Data("no results to compare".into()));
    }
    let mut grids: BTreeMap<(String, u64, usize), BTreeSet<usize>> = BTreeMap::new();
    for r in results {
        grids
            .entry((r.method.clone(), r.seed, r.task))
            .or_default()
            .insert(r.step);
    }
    let reference = grids.values().next().unwrap().clone();
    if let Some(((m, s, t), _)) = grids.iter().find(|(_, g)| **g != reference) {
        return Err(Error::Data(format!(
            "mismatched step grids: method {m}, seed {s}, task {t} differs from the others"
        )));
    }
    let final_step = *reference.iter().next_back().unwrap();
    let tasks: Vec<usize> = results.iter().map(|r| r.task).collect::<BTreeSet<_>>().into_iter().collect();
    let mut methods: Vec<String> = results
        .iter()
        .map(|r| r.method.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    methods.sort_by(|a, b| method_rank(a).cmp(&method_rank(b)).then(a.cmp(b)));
    let rows = methods
        .into_iter()
        .map(|m| {
            let cells = tasks
                .iter()
                .map(|&t| {
                    let xs: Vec<f64> = results
                        .iter()
                        .filter(|r| r.method == m && r.task == t && r.step == final_step)
                        .map(|r| r.readout_accuracy)
                        .collect();
                    let (mean, std) = mean_std(&xs);
                    (mean, std, xs.len())
                })
                .collect();
            CompareRow { method: m, cells }
        })
        .collect();
    Ok(CompareTable {
        tasks,
        final_step,
        rows,
    })
}

impl CompareTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("final readout accuracy at step {} (mean ± std over seeds)\n", self.final_step);
        s.push_str(&format!("{:<10}", "method"));
        for t in &self.tasks {
            s.push_str(&format!("{:>20}", format!("task {t}")));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<10}", r.method));
            for (m, sd, _) in &r.cells {
                s.push_str(&format!("{:>20}", format!("{:.4} ± {:.4}", m, sd)));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,task,step,readout_mean,readout_std,seeds\n");
        for r in &self.rows {
            for (t, (m, sd, n)) in self.tasks.iter().zip(&r.cells) {
                s.push_str(&format!("{},{},{},{:.6},{:.6},{}\n", r.method, t, self.final_step, m, sd, n));
            }
        }
        s
    }
}

/// Reads back probe CSVs written by [`write_outputs`] from `dir`.
pub fn read_probe_dir(dir: &Path) -> Result<Vec<ProbeResult>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("probe_") && n.ends_with(".csv"))
        })
        .collect();
    names.sort();
    let mut out = Vec::new();
    for p in names {
        out.extend(crate::probe::parse_probe_csv(&fs::read_to_string(&p)?)?);
    }
    Ok(out)
}
