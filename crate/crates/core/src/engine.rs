//! Meta-training of the gating rule against a multi-task teacher, and the unroll harness used
//! at meta-test time by the learned rule and every baseline.
//!
//! An episode starts teacher and student from a checkpoint. Each inner step the teacher takes
//! an SGD step on old and new data together, the student takes a gated step on new data only,
//! and the rule is trained to make the student's representation of the joint batch match the
//! teacher's. Meta-gradients flow back through at most `tbptt_steps` student updates; a loss
//! above the curriculum threshold ends the episode.

use std::borrow::Cow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape, Var};
use crate::data::{minibatch, Batch, Dataset, TaskData};
use crate::error::{Error, Result};
use crate::meta::{
    apply_gated_update_on_tape, assemble_all, gated_student_step, meta_forward_on_tape, reset_state, theta_on_tape,
    MetaParams, MetaState, StateVars,
};
use crate::nets::{forward, forward_on_tape, loss_and_grads, sgd_step, NetworkParams};
use crate::probe::Snapshot;
use crate::tensor::Tensor;

/// Threshold and truncation length as step functions of the (1-based) episode index.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub threshold0: f64,
    pub threshold_increment: f64,
    pub threshold_cap: f64,
    pub tbptt0: usize,
    pub tbptt_increment: usize,
    pub tbptt_cap: usize,
    /// Episodes between increments.
    pub period: usize,
    /// Added to the threshold for every task after the first new one. When positive, reaching
    /// the threshold on a task that is not the last moves on to the next task instead of
    /// restarting.
    pub task_switch_bump: f64,
}

impl CurriculumSchedule {
    /// 20/5 rising by 5/2 every 300 episodes up to 30/9.
    pub fn two_task() -> Self {
        Self {
            threshold0: 20.0,
            threshold_increment: 5.0,
            threshold_cap: 30.0,
            tbptt0: 5,
            tbptt_increment: 2,
            tbptt_cap: 9,
            period: 300,
            task_switch_bump: 0.0,
        }
    }

    /// Same start and increments, capped at 50/17.
    pub fn new_classes() -> Self {
        Self {
            threshold_cap: 50.0,
            tbptt_cap: 17,
            ..Self::two_task()
        }
    }

    /// New-classes schedule with a truncation of 2 and a +5 threshold bump per task switch.
    pub fn three_task() -> Self {
        Self {
            tbptt0: 2,
            task_switch_bump: 5.0,
            ..Self::new_classes()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.threshold0 > 0.0
            && self.threshold_increment >= 0.0
            && self.threshold_cap >= self.threshold0
            && self.tbptt0 > 0
            && self.tbptt_cap >= self.tbptt0
            && self.period > 0
            && self.task_switch_bump >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid curriculum schedule: {self:?}")))
        }
    }

    fn increments(&self, episode: usize) -> usize {
        episode.saturating_sub(1) / self.period
    }

    pub fn threshold(&self, episode: usize) -> f64 {
        (self.threshold0 + self.threshold_increment * self.increments(episode) as f64).min(self.threshold_cap)
    }

    pub fn tbptt_steps(&self, episode: usize) -> usize {
        (self.tbptt0 + self.tbptt_increment * self.increments(episode)).min(self.tbptt_cap)
    }

    /// Threshold while learning new task `k` (2-based, as in `k = 2..K`).
    pub fn task_threshold(&self, episode: usize, k: usize) -> f64 {
        self.threshold(episode) + self.task_switch_bump * k.saturating_sub(2) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub episodes: usize,
    /// Inner steps per new task.
    pub inner_steps: usize,
    /// Inner learning rate for teacher and student.
    pub alpha: f64,
    /// Adam learning rate for the rule.
    pub meta_lr: f64,
    /// Size of `x_a u x_b`.
    pub teacher_batch: usize,
    /// Size of `x_b`.
    pub student_batch: usize,
    pub huber_delta: f64,
    pub loss_scale: f64,
    /// Match every hidden layer's output rather than only the classifier input.
    pub match_all_layers: bool,
    /// Keep per-step batch hashes, student labels and teacher weight hashes.
    pub record_batches: bool,
    /// Write 0 in the wall-clock column so logs are reproducible byte for byte.
    pub deterministic_log: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            inner_steps: 40,
            alpha: 0.1,
            meta_lr: 1e-3,
            teacher_batch: 32,
            student_batch: 16,
            huber_delta: 1.0,
            loss_scale: 300.0,
            match_all_layers: false,
            record_batches: false,
            deterministic_log: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_batch == 0 || self.teacher_batch <= self.student_batch {
            return Err(Error::Config(format!(
                "teacher batch ({}) must exceed student batch ({}) and both must be positive",
                self.teacher_batch, self.student_batch
            )));
        }
        if self.inner_steps == 0 || !(self.alpha > 0.0) || !(self.meta_lr > 0.0) {
            return Err(Error::Config("inner steps, alpha and meta lr must be positive".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.loss_scale > 0.0) {
            return Err(Error::Config("huber delta and loss scale must be positive".into()));
        }
        Ok(())
    }

    fn old_batch(&self) -> usize {
        self.teacher_batch - self.student_batch
    }
}

/// Tasks `D_1..D_K` in order. Task `j` owns classifier slots `offsets[j]..offsets[j] + classes`.
#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub offsets: Vec<usize>,
    /// `old[j]`: training data of tasks `0..j` with labels already mapped to slots.
    old: Vec<Option<Dataset>>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        if tasks.len() < 2 {
            return Err(Error::Data(format!("a task stream needs at least 2 tasks, got {}", tasks.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            for &c in &t.train.classes {
                if !seen.insert(c) {
                    return Err(Error::Data(format!("class {c} appears in more than one task")));
                }
            }
            if t.train.classes != t.test.classes {
                return Err(Error::Data("train and test splits of a task differ in classes".into()));
            }
        }
        let mut offsets = Vec::with_capacity(tasks.len());
        let mut acc = 0;
        for t in &tasks {
            offsets.push(acc);
            acc += t.train.num_classes();
        }
        let mut old = vec![None];
        for j in 1..tasks.len() {
            let parts: Vec<&Tensor> = tasks[..j].iter().map(|t| &t.train.inputs).collect();
            let inputs = Tensor::cat_rows(&parts)?;
            let labels = tasks[..j]
                .iter()
                .zip(&offsets)
                .flat_map(|(t, &o)| t.train.labels.iter().map(move |l| l + o))
                .collect();
            let classes = tasks[..j].iter().flat_map(|t| t.train.classes.iter().copied()).collect();
            old.push(Some(Dataset::new(inputs, labels, classes, tasks[0].train.split)?));
        }
        Ok(Self { tasks, offsets, old })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Total classifier slots needed.
    pub fn total_classes(&self) -> usize {
        self.offsets.last().unwrap() + self.tasks.last().unwrap().train.num_classes()
    }

    /// `D_A`: the training data of every task before `new_task` (0-based).
    pub fn old_tasks(&self, new_task: usize) -> &Dataset {
        self.old[new_task]
            .as_ref()
            .expect("the first task is never a new task")
    }

    /// `(x_a, x_b)` for new task `new_task` (0-based), labels mapped to classifier slots.
    pub fn sample(&self, new_task: usize, old_size: usize, new_size: usize, rng: &mut impl Rng) -> Result<(Batch, Batch)> {
        let a = minibatch(self.old_tasks(new_task), old_size, rng)?;
        let mut b = minibatch(&self.tasks[new_task].train, new_size, rng)?;
        b.labels.iter_mut().for_each(|l| *l += self.offsets[new_task]);
        Ok((a, b))
    }
}

/// Supplies the task stream of each meta-training episode.
pub trait EpisodeTasks {
    fn stream(&self, episode: usize) -> Result<Cow<'_, TaskStream>>;
}

impl EpisodeTasks for TaskStream {
    fn stream(&self, _episode: usize) -> Result<Cow<'_, TaskStream>> {
        Ok(Cow::Borrowed(self))
    }
}

/// Episodes whose new task is a fresh `k`-class draw from a class pool of `source`.
#[derive(Clone, Debug)]
pub struct EpisodicTasks {
    /// Tasks that precede the sampled one.
    pub fixed: Vec<TaskData>,
    pub source: TaskData,
    pub pool: Vec<usize>,
    /// Classes per sampled task.
    pub k: usize,
    /// Sampled tasks per episode.
    pub count: usize,
    pub seed: u64,
}

impl EpisodicTasks {
    /// The tasks of `episode`: `count * k` distinct classes from the pool, grouped in draw order.
    pub fn sample(&self, episode: usize) -> Result<Vec<TaskData>> {
        let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(episode as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = crate::data::sample_classes(&self.pool, self.k * self.count, &mut rng)?;
        let groups: Vec<Vec<usize>> = classes.chunks(self.k).map(<[usize]>::to_vec).collect();
        crate::data::split_task(&self.source, &groups)
    }
}

impl EpisodeTasks for EpisodicTasks {
    fn stream(&self, episode: usize) -> Result<Cow<'_, TaskStream>> {
        let mut tasks = self.fixed.clone();
        tasks.extend(self.sample(episode)?);
        Ok(Cow::Owned(TaskStream::new(tasks)?))
    }
}

/// Outcome of the curriculum test for one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Curriculum {
    Continue,
    Restart,
}

/// Restart iff `loss > threshold`; a non-finite loss always restarts.
pub fn curriculum_check(loss: f64, threshold: f64) -> Curriculum {
    if !loss.is_finite() || loss > threshold {
        Curriculum::Restart
    } else {
        Curriculum::Continue
    }
}

/// What the episode does after a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Continue,
    /// Move to the next task, keeping the student and the rule's state.
    NextTask,
    /// Loss over threshold: back to the checkpoint, episode over.
    Restart,
    /// Every task ran to its step budget.
    Done,
}

/// Control flow of one episode, independent of any numerics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeControl {
    pub episode: usize,
    pub tasks: usize,
    pub inner_steps: usize,
    pub schedule: CurriculumSchedule,
    /// New task, 2-based.
    pub k: usize,
    /// Steps taken on the current task.
    pub t: usize,
    /// Student updates in the live truncation window.
    pub s: usize,
    pub steps: usize,
}

impl EpisodeControl {
    pub fn new(episode: usize, tasks: usize, inner_steps: usize, schedule: CurriculumSchedule) -> Self {
        Self {
            episode,
            tasks,
            inner_steps,
            schedule,
            k: 2,
            t: 0,
            s: 0,
            steps: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.schedule.task_threshold(self.episode, self.k)
    }

    pub fn tbptt_steps(&self) -> usize {
        self.schedule.tbptt_steps(self.episode)
    }

    /// Counts a step whose loss was `loss`. Returns the transition and whether the truncation
    /// window has to be cut before the next step.
    pub fn record(&mut self, loss: f64) -> (Transition, bool) {
        self.t += 1;
        self.s += 1;
        self.steps += 1;
        let mut truncate = self.s >= self.tbptt_steps();
        let over = curriculum_check(loss, self.threshold()) == Curriculum::Restart;
        let switching = self.schedule.task_switch_bump > 0.0 && loss.is_finite();
        let transition = if over && !(switching && self.k < self.tasks) {
            self.restart();
            truncate = true;
            Transition::Restart
        } else if over || self.t >= self.inner_steps {
            if self.k < self.tasks {
                self.k += 1;
                self.t = 0;
                Transition::NextTask
            } else {
                Transition::Done
            }
        } else {
            Transition::Continue
        };
        if truncate {
            self.s = 0;
        }
        (transition, truncate)
    }

    pub fn restart(&mut self) {
        self.k = 2;
        self.t = 0;
        self.s = 0;
    }
}

/// The live segment of the student's unroll on which meta-gradients are taken.
pub struct TbpttWindow {
    pub tape: Tape,
    student: Vec<Var>,
    state: StateVars,
    theta_copies: Vec<Vec<Var>>,
}

impl TbpttWindow {
    /// A fresh window whose starting values are constants (a gradient barrier).
    pub fn open(student: &NetworkParams, state: &MetaState) -> Self {
        let mut tape = Tape::new();
        let vars = student.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let state = StateVars::constant(&mut tape, state);
        Self {
            tape,
            student: vars,
            state,
            theta_copies: Vec::new(),
        }
    }

    /// Cuts the window: keeps the current values, drops the graph behind them.
    pub fn truncate(&mut self, arch: &crate::nets::Architecture) {
        let student = self.student_values(arch);
        let state = self.state_values();
        *self = Self::open(&student, &state);
    }

    pub fn student_values(&self, arch: &crate::nets::Architecture) -> NetworkParams {
        NetworkParams {
            arch: arch.clone(),
            tensors: self.student.iter().map(|&v| self.tape.value(v).clone()).collect(),
        }
    }

    pub fn state_values(&self) -> MetaState {
        self.state.values(&self.tape)
    }

    /// Student updates whose graph is still live.
    pub fn live_updates(&self) -> usize {
        self.theta_copies.len()
    }
}

/// The rule being trained with its optimizer.
#[derive(Clone, Debug)]
pub struct MetaTrainer {
    pub theta: MetaParams,
    pub adam: AdamState,
    pub cfg: EpisodeConfig,
    pub schedule: CurriculumSchedule,
}

impl MetaTrainer {
    pub fn new(theta: MetaParams, cfg: EpisodeConfig, schedule: CurriculumSchedule) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let adam = AdamState::new(theta.tensors(), cfg.meta_lr);
        Ok(Self {
            theta,
            adam,
            cfg,
            schedule,
        })
    }
}

/// Per-step instrumentation kept when [`EpisodeConfig::record_batches`] is on.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace {
    pub episode: usize,
    pub old_hash: u64,
    pub new_hash: u64,
    /// Labels of every example the student's backward pass saw.
    pub student_labels: Vec<usize>,
    /// Hash of the teacher's weights after its update.
    pub teacher_hash: u64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub episode: usize,
    pub task_k: usize,
    pub step_t: usize,
    pub huber_loss: f64,
    pub threshold: f64,
    pub tbptt_s: usize,
    pub restarted: bool,
    pub wall_ms: u64,
}

pub const TRAINING_LOG_HEADER: &str = "episode,task_k,step_t,huber_loss,threshold,tbptt_s,restarted,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub checkpoint: usize,
    pub steps: usize,
    pub restarted: bool,
    pub mean_loss: f64,
    pub skipped_updates: usize,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    pub episodes: Vec<EpisodeSummary>,
    pub trace: Vec<BatchTrace>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAINING_LOG_HEADER);
        s.push('\n');
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{:.6},{},{},{},{}\n",
                r.episode,
                r.task_k,
                r.step_t,
                r.huber_loss,
                r.threshold,
                r.tbptt_s,
                u8::from(r.restarted),
                r.wall_ms
            ));
        }
        s
    }

    /// Mean steps survived per block of `block` consecutive episodes.
    pub fn block_survival(&self, block: usize) -> Vec<f64> {
        self.episodes
            .chunks(block)
            .map(|c| c.iter().map(|e| e.steps as f64).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Mean Huber loss over the steps of each block of `block` consecutive episodes.
    pub fn block_loss(&self, block: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for chunk in self.episodes.chunks(block) {
            let (lo, hi) = (chunk[0].episode, chunk[chunk.len() - 1].episode);
            let losses: Vec<f64> = self
                .steps
                .iter()
                .filter(|r| r.episode >= lo && r.episode <= hi && r.huber_loss.is_finite())
                .map(|r| r.huber_loss)
                .collect();
            out.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
        }
        out
    }
}

/// What one inner step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub transition: Transition,
    pub truncated: bool,
    /// Live student updates in the window when the loss was taken.
    pub window_updates: usize,
    pub skipped_update: bool,
    pub reason: Option<String>,
    pub trace: Option<BatchTrace>,
}

fn params_hash(p: &NetworkParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in &p.tensors {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// One meta-training episode in progress.
pub struct Episode<'a> {
    pub control: EpisodeControl,
    pub checkpoint: &'a NetworkParams,
    pub stream: &'a TaskStream,
    pub teacher: NetworkParams,
    pub window: TbpttWindow,
}

impl<'a> Episode<'a> {
    pub fn start(
        index: usize,
        checkpoint: &'a NetworkParams,
        stream: &'a TaskStream,
        trainer: &MetaTrainer,
    ) -> Result<Self> {
        if checkpoint.arch.classes() < stream.total_classes() {
            return Err(Error::Spec(format!(
                "network has {} classifier slots, tasks need {}",
                checkpoint.arch.classes(),
                stream.total_classes()
            )));
        }
        Ok(Self {
            control: EpisodeControl::new(index, stream.len(), trainer.cfg.inner_steps, trainer.schedule.clone()),
            checkpoint,
            stream,
            teacher: checkpoint.clone(),
            window: TbpttWindow::open(checkpoint, &reset_state(&trainer.theta)),
        })
    }

    pub fn student(&self) -> NetworkParams {
        self.window.student_values(&self.checkpoint.arch)
    }

    pub fn meta_state(&self) -> MetaState {
        self.window.state_values()
    }

    /// Teacher, student and rule state back to the checkpoint.
    pub fn reset(&mut self, theta: &MetaParams) {
        self.control.restart();
        self.teacher = self.checkpoint.clone();
        self.window = TbpttWindow::open(self.checkpoint, &reset_state(theta));
    }

    /// One inner step: teacher update, gated student update, representation loss, one Adam step
    /// on the rule, then the curriculum and truncation bookkeeping.
    pub fn step(&mut self, trainer: &mut MetaTrainer, rng: &mut impl Rng) -> Result<StepOutcome> {
        let cfg = trainer.cfg.clone();
        let new_task = self.control.k - 1;
        let (a, b) = self.stream.sample(new_task, cfg.old_batch(), cfg.student_batch, rng)?;
        let ab = a.join(&b)?;

        let outcome = self.forward_step(trainer, &ab, &b);
        let (loss, loss_var, reason) = match outcome {
            Ok((l, v)) => (l, Some(v), None),
            Err(Error::NonFinite(what)) => (f64::NAN, None, Some(format!("non-finite {what}"))),
            Err(e) => return Err(e),
        };
        let window_updates = self.window.live_updates();

        let mut skipped = false;
        let mut reason = reason;
        if let Some(lv) = loss_var.filter(|_| loss.is_finite()) {
            match self.meta_gradient(lv, &trainer.theta) {
                Ok(grads) => {
                    let mut params = trainer.theta.tensors_mut();
                    if let Err(e) = trainer.adam.step(&mut params, &grads) {
                        skipped = true;
                        reason = Some(format!("meta-update skipped: {e}"));
                    }
                }
                Err(Error::NonFinite(what)) => {
                    skipped = true;
                    reason = Some(format!("meta-update skipped: non-finite {what}"));
                }
                Err(e) => return Err(e),
            }
        } else if reason.is_none() {
            reason = Some("non-finite representation loss".into());
        }

        let trace = cfg.record_batches.then(|| BatchTrace {
            episode: self.control.episode,
            old_hash: a.hash(),
            new_hash: b.hash(),
            student_labels: b.labels.clone(),
            teacher_hash: params_hash(&self.teacher),
        });

        let (transition, truncated) = self.control.record(loss);
        match transition {
            Transition::Restart => {
                let reason_kept = reason.clone();
                self.reset(&trainer.theta);
                reason = reason_kept.or_else(|| Some("loss above threshold".into()));
            }
            _ if truncated => self.window.truncate(&self.checkpoint.arch),
            _ => {}
        }
        Ok(StepOutcome {
            loss,
            transition,
            truncated,
            window_updates,
            skipped_update: skipped,
            reason,
            trace,
        })
    }

    /// Steps 2 to 6 of the inner loop. Leaves the new student and rule state in the window and
    /// returns the loss value and its tape handle.
    fn forward_step(&mut self, trainer: &mut MetaTrainer, ab: &Batch, b: &Batch) -> Result<(f64, Var)> {
        let cfg = &trainer.cfg;
        let arch = self.checkpoint.arch.clone();

        let (_, tg, _) = loss_and_grads(&self.teacher, &ab.inputs, &ab.labels)?;
        sgd_step(&mut self.teacher, &tg, cfg.alpha)?;

        let student = self.window.student_values(&arch);
        let (_, sg, record) = loss_and_grads(&student, &b.inputs, &b.labels)?;
        let inputs = assemble_all(&trainer.theta, &student, &record, &sg)?;
        trainer.theta.observe_inputs(&inputs);

        let tape = &mut self.window.tape;
        let theta_vars = theta_on_tape(tape, &trainer.theta, true);
        let (deltas, next_state) = meta_forward_on_tape(tape, &trainer.theta, &theta_vars, &self.window.state, &inputs)?;
        let mut next = self.window.student.clone();
        for (net, &d) in trainer.theta.nets.iter().zip(&deltas) {
            next[net.slot] = apply_gated_update_on_tape(tape, next[net.slot], &sg[net.slot], d, cfg.alpha)?;
        }
        for (i, slot) in arch.param_slots().iter().enumerate() {
            if slot.kind.is_classifier() {
                let step = tape.constant(sg[i].map(|g| -cfg.alpha * g));
                next[i] = tape.add(next[i], step)?;
            }
        }

        let teacher_rec = forward(&self.teacher, &ab.inputs)?;
        let x = tape.constant(ab.inputs.clone());
        let fv = forward_on_tape(&arch, tape, &next, x)?;
        let loss = if cfg.match_all_layers {
            let mut total = None;
            for (l, layer) in arch.layers.iter().enumerate() {
                if matches!(layer, crate::nets::LayerSpec::Classifier { .. }) {
                    continue;
                }
                let target = tape.constant(teacher_rec.outputs[l].clone());
                let h = tape.huber(fv.outputs[l], target, cfg.huber_delta, cfg.loss_scale)?;
                total = Some(match total {
                    None => h,
                    Some(acc) => tape.add(acc, h)?,
                });
            }
            total.ok_or_else(|| Error::Spec("no hidden layer to match".into()))?
        } else {
            let target = tape.constant(teacher_rec.representation.clone());
            tape.huber(fv.representation, target, cfg.huber_delta, cfg.loss_scale)?
        };

        self.window.student = next;
        self.window.state = next_state;
        self.window.theta_copies.push(theta_vars.all());
        let value = self.window.tape.value(loss).item();
        Ok((value, loss))
    }

    /// Gradient of `loss` with respect to the rule, summed over every copy in the window.
    fn meta_gradient(&self, loss: Var, theta: &MetaParams) -> Result<Vec<Tensor>> {
        let g = self.window.tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = theta.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut total: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for copy in &self.window.theta_copies {
            for ((acc, &v), shape) in total.iter_mut().zip(copy).zip(&shapes) {
                if let Some(gv) = g.get(v) {
                    debug_assert_eq!(gv.shape(), shape.as_slice());
                    acc.add_assign(gv);
                }
            }
        }
        Ok(total)
    }
}

/// Runs `trainer.cfg.episodes` episodes. Each picks a checkpoint uniformly (with replacement)
/// from `pool` and runs until its tasks are done or a restart ends it.
pub fn run_meta_training(
    trainer: &mut MetaTrainer,
    tasks: &dyn EpisodeTasks,
    pool: &[NetworkParams],
    seed: u64,
) -> Result<TrainingLog> {
    run_meta_training_from(trainer, tasks, pool, seed, 1)
}

/// As [`run_meta_training`], numbering episodes from `first_episode` (for resumed runs).
pub fn run_meta_training_from(
    trainer: &mut MetaTrainer,
    tasks: &dyn EpisodeTasks,
    pool: &[NetworkParams],
    seed: u64,
    first_episode: usize,
) -> Result<TrainingLog> {
    if pool.is_empty() {
        return Err(Error::Config("checkpoint pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = TrainingLog::default();
    let clock = Instant::now();
    for episode in first_episode..first_episode + trainer.cfg.episodes {
        let ck = rng.random_range(0..pool.len());
        let stream = tasks.stream(episode)?;
        let mut ep = Episode::start(episode, &pool[ck], &stream, trainer)?;
        let mut losses = Vec::new();
        let mut skipped = 0;
        let mut reason = None;
        let restarted = loop {
            let (task_k, threshold, step_t) = (ep.control.k, ep.control.threshold(), ep.control.t + 1);
            let out = ep.step(trainer, &mut rng)?;
            debug_assert!(out.window_updates <= ep.control.tbptt_steps());
            skipped += usize::from(out.skipped_update);
            if out.loss.is_finite() {
                losses.push(out.loss);
            }
            let restarted = out.transition == Transition::Restart;
            if out.reason.is_some() {
                reason = out.reason.clone();
            }
            log.steps.push(StepLog {
                episode,
                task_k,
                step_t,
                huber_loss: out.loss,
                threshold,
                tbptt_s: out.window_updates,
                restarted,
                wall_ms: if trainer.cfg.deterministic_log {
                    0
                } else {
                    clock.elapsed().as_millis() as u64
                },
            });
            if let Some(t) = out.trace {
                log.trace.push(t);
            }
            match out.transition {
                Transition::Restart => break true,
                Transition::Done => break false,
                _ => {}
            }
        };
        let steps = log.steps.iter().rev().take_while(|r| r.episode == episode).count();
        log.episodes.push(EpisodeSummary {
            episode,
            checkpoint: ck,
            steps,
            restarted,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            skipped_updates: skipped,
            reason: if restarted { reason } else { None },
        });
    }
    Ok(log)
}

/// An update rule driven by the unroll harness. Every rule sees the same `(x_a, x_b)` pair per
/// step; only the teacher uses `x_a`.
pub trait UpdateRule {
    fn name(&self) -> String;

    /// Called before the first step on new task `new_task` (0-based).
    fn begin_task(&mut self, _params: &NetworkParams, _stream: &TaskStream, _new_task: usize) -> Result<()> {
        Ok(())
    }

    /// Updates `params` in place. Returns the gates when the rule has any.
    fn step(&mut self, params: &mut NetworkParams, a: &Batch, b: &Batch, alpha: f64) -> Result<Option<Vec<Tensor>>>;
}

/// Multi-task SGD on `x_a u x_b`.
#[derive(Clone, Debug, Default)]
pub struct TeacherRule;

impl UpdateRule for TeacherRule {
    fn name(&self) -> String {
        "teacher".into()
    }

    fn step(&mut self, params: &mut NetworkParams, a: &Batch, b: &Batch, alpha: f64) -> Result<Option<Vec<Tensor>>> {
        let ab = a.join(b)?;
        let (_, g, _) = loss_and_grads(params, &ab.inputs, &ab.labels)?;
        sgd_step(params, &g, alpha)?;
        Ok(None)
    }
}

/// The learned rule with frozen parameters.
#[derive(Clone, Debug)]
pub struct MetaRule {
    pub theta: MetaParams,
    pub state: MetaState,
}

impl MetaRule {
    pub fn new(theta: MetaParams) -> Self {
        let state = reset_state(&theta);
        Self { theta, state }
    }
}

impl UpdateRule for MetaRule {
    fn name(&self) -> String {
        "meta".into()
    }

    fn step(&mut self, params: &mut NetworkParams, _a: &Batch, b: &Batch, alpha: f64) -> Result<Option<Vec<Tensor>>> {
        let (_, g, rec) = loss_and_grads(params, &b.inputs, &b.labels)?;
        let (next, gates, state) = gated_student_step(&self.theta, &self.state, params, &rec, &g, alpha)?;
        *params = next;
        self.state = state;
        Ok(Some(gates))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrollConfig {
    pub steps_per_task: usize,
    /// Snapshot every this many steps (and at step 0 and the last step).
    pub cadence: usize,
    pub alpha: f64,
    pub teacher_batch: usize,
    pub student_batch: usize,
    pub log_gates: bool,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            steps_per_task: 500,
            cadence: 50,
            alpha: 0.1,
            teacher_batch: 32,
            student_batch: 16,
            log_gates: false,
        }
    }
}

/// Gates of one gated tensor at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub step: usize,
    /// Index of the gated tensor in the task network.
    pub slot: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Unroll {
    pub method: String,
    pub snapshots: Vec<Snapshot>,
    /// `(x_a, x_b)` hashes per step.
    pub batch_hashes: Vec<(u64, u64)>,
    pub gates: Vec<GateRecord>,
    pub gated_slots: Vec<usize>,
}

/// Unrolls `rule` from `w0` over new tasks `1..K` of `stream` for `steps_per_task` steps each.
/// Batches depend only on `seed`, so every rule sees the same data.
pub fn unroll(
    rule: &mut dyn UpdateRule,
    stream: &TaskStream,
    w0: &NetworkParams,
    cfg: &UnrollConfig,
    seed: u64,
) -> Result<Unroll> {
    if cfg.cadence == 0 || cfg.student_batch == 0 || cfg.teacher_batch <= cfg.student_batch {
        return Err(Error::Config(format!("invalid unroll settings: {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = w0.clone();
    let mut out = Unroll {
        method: rule.name(),
        snapshots: vec![Snapshot {
            step: 0,
            params: params.clone(),
        }],
        batch_hashes: Vec::new(),
        gates: Vec::new(),
        gated_slots: Vec::new(),
    };
    let total = cfg.steps_per_task * (stream.len() - 1);
    let mut step = 0;
    for new_task in 1..stream.len() {
        rule.begin_task(&params, stream, new_task)?;
        for _ in 0..cfg.steps_per_task {
            let (a, b) = stream.sample(new_task, cfg.teacher_batch - cfg.student_batch, cfg.student_batch, &mut rng)?;
            out.batch_hashes.push((a.hash(), b.hash()));
            let gates = rule.step(&mut params, &a, &b, cfg.alpha)?;
            step += 1;
            if let (true, Some(gates)) = (cfg.log_gates, gates) {
                let slots = gated_slots(&params, gates.len());
                for (slot, g) in slots.iter().zip(gates) {
                    out.gates.push(GateRecord {
                        step,
                        slot: *slot,
                        values: g.into_data(),
                    });
                }
                out.gated_slots = slots;
            }
            if step % cfg.cadence == 0 || step == total {
                out.snapshots.push(Snapshot {
                    step,
                    params: params.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn gated_slots(params: &NetworkParams, n: usize) -> Vec<usize> {
    params
        .slots()
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.kind.is_classifier())
        .map(|(i, _)| i)
        .take(n)
        .collect()
}
