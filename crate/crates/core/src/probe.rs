//! Linear-readout measurement of representational forgetting.
//!
//! A readout head is trained from zeros with full-batch Adam on frozen representations of a
//! task's training split, then scored on its test split. The network's own classifier is
//! scored on the same test split over the task's slots ("original" accuracy).

use crate::autodiff::{AdamState, Tape};
use crate::data::{Dataset, TaskData};
use crate::error::{Error, Result};
use crate::nets::{head_accuracy, representation, NetworkParams};
use crate::par::{self, Parallelism};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 1e-1 }
    }
}

/// Linear classifier on representations: `logits = reps . weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutHead {
    /// `[repr_dim, classes]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ReadoutHead {
    pub fn zeros(repr_dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[repr_dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn predict(&self, reps: &Tensor) -> Vec<usize> {
        let c = self.bias.len();
        let logits = crate::autodiff::kernels::matmul(reps.data(), self.weight.data(), reps.rows(), reps.row_len(), c);
        logits
            .chunks(c)
            .map(|row| {
                let z: Vec<f64> = row.iter().zip(self.bias.data()).map(|(a, b)| a + b).collect();
                argmax(&z)
            })
            .collect()
    }

    pub fn accuracy(&self, reps: &Tensor, labels: &[usize]) -> f64 {
        let pred = self.predict(reps);
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len() as f64
    }
}

/// Classifier-input representations of every example, one row each.
pub fn extract_representations(params: &NetworkParams, dataset: &Dataset) -> Result<(Tensor, Vec<usize>)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot probe an empty dataset".into()));
    }
    Ok((representation(params, &dataset.inputs)?, dataset.labels.clone()))
}

/// Full-batch Adam on softmax cross-entropy from a zero head. Never touches the network.
pub fn train_readout(reps: &Tensor, labels: &[usize], classes: usize, cfg: &ReadoutConfig) -> Result<ReadoutHead> {
    for c in 0..classes {
        if !labels.contains(&c) {
            return Err(Error::Data(format!("class {c} has no readout training example")));
        }
    }
    let mut head = ReadoutHead::zeros(reps.row_len(), classes);
    let flat = reps.reshape(&[reps.rows(), reps.row_len()])?;
    let mut adam = AdamState::new([&head.weight, &head.bias], cfg.lr);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(flat.clone());
        let w = tape.leaf(head.weight.clone());
        let b = tape.leaf(head.bias.clone());
        let z = tape.matmul(x, w)?;
        let z = tape.add_bias(z, b)?;
        let loss = tape.softmax_cross_entropy(z, labels)?;
        let g = tape.backward(loss)?;
        let grads = [g.wrt(w, head.weight.shape()), g.wrt(b, head.bias.shape())];
        adam.step(&mut [&mut head.weight, &mut head.bias], &grads)?;
    }
    Ok(head)
}

/// Readout accuracy of `head` on `test` through `params`' representation.
pub fn evaluate(head: &ReadoutHead, params: &NetworkParams, test: &Dataset) -> Result<f64> {
    let (reps, labels) = extract_representations(params, test)?;
    Ok(head.accuracy(&reps, &labels))
}

/// Accuracy of the network's own classifier on the task's slots `offset..offset + classes`.
pub fn evaluate_original(params: &NetworkParams, test: &Dataset, offset: usize) -> Result<f64> {
    head_accuracy(params, test, offset)
}

/// A task to probe: its data and where its classes sit in the network's classifier.
#[derive(Clone, Debug)]
pub struct ProbeTask {
    pub id: usize,
    pub data: TaskData,
    pub offset: usize,
}

/// Network weights at a point of an unroll.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub params: NetworkParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub method: String,
    pub seed: u64,
    pub task: usize,
    pub step: usize,
    pub readout_accuracy: f64,
    pub original_accuracy: f64,
}

/// Readout and original accuracy of one snapshot on one task.
pub fn probe_snapshot(snap: &Snapshot, task: &ProbeTask, cfg: &ReadoutConfig) -> Result<(f64, f64)> {
    let (reps, labels) = extract_representations(&snap.params, &task.data.train)?;
    let head = train_readout(&reps, &labels, task.data.train.num_classes(), cfg)?;
    let readout = evaluate(&head, &snap.params, &task.data.test)?;
    let original = evaluate_original(&snap.params, &task.data.test, task.offset)?;
    Ok((readout, original))
}

/// One [`ProbeResult`] per (snapshot, task), sorted by (task, step).
pub fn forgetting_curve(
    method: &str,
    seed: u64,
    snapshots: &[Snapshot],
    tasks: &[ProbeTask],
    cfg: &ReadoutConfig,
    mode: Parallelism,
) -> Result<Vec<ProbeResult>> {
    let jobs: Vec<(&Snapshot, &ProbeTask)> = tasks
        .iter()
        .flat_map(|t| snapshots.iter().map(move |s| (s, t)))
        .collect();
    let mut out = par::map(mode, jobs, |(s, t)| {
        probe_snapshot(s, t, cfg).map(|(readout, original)| ProbeResult {
            method: method.to_string(),
            seed,
            task: t.id,
            step: s.step,
            readout_accuracy: readout,
            original_accuracy: original,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|r| (r.task, r.step));
    Ok(out)
}

pub const PROBE_CSV_HEADER: &str = "method,seed,task,step,readout_acc,original_acc";

pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut s = String::from(PROBE_CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.method, r.seed, r.task, r.step, r.readout_accuracy, r.original_accuracy
        ));
    }
    s
}

/// Parses [`probe_csv`] output.
pub fn parse_probe_csv(text: &str) -> Result<Vec<ProbeResult>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PROBE_CSV_HEADER) {
        return Err(Error::Format("probe CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("probe CSV row {}: {l}", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(ProbeResult {
                method: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                task: f[2].parse().map_err(|_| bad())?,
                step: f[3].parse().map_err(|_| bad())?,
                readout_accuracy: f[4].parse().map_err(|_| bad())?,
                original_accuracy: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_tasks, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_steps_gives_zero_head() {
        let reps = Tensor::from_fn(&[4, 3], |i| i as f64);
        let head = train_readout(&reps, &[0, 1, 0, 1], 2, &ReadoutConfig { steps: 0, lr: 0.1 }).unwrap();
        assert_eq!(head, ReadoutHead::zeros(3, 2));
        assert_eq!(head.predict(&reps), vec![0; 4]);
    }

    #[test]
    fn missing_class_is_an_error() {
        let reps = Tensor::zeros(&[3, 2]);
        assert!(train_readout(&reps, &[0, 0, 1], 3, &ReadoutConfig::default()).is_err());
    }

    #[test]
    fn separable_clusters_are_learned() {
        let t = synthetic_tasks(
            11,
            &SyntheticSpec {
                dim: 16,
                n_train_per_class: 100,
                n_test_per_class: 100,
                classes: 5,
                margin: 6.0,
            },
        )
        .unwrap();
        let head = train_readout(&t.train.inputs, &t.train.labels, 5, &ReadoutConfig::default()).unwrap();
        assert!(head.accuracy(&t.train.inputs, &t.train.labels) >= 0.99);
        assert!(head.accuracy(&t.test.inputs, &t.test.labels) >= 0.99);
    }

    #[test]
    fn random_features_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut accs = Vec::new();
        for _ in 0..5 {
            let mut gen = |n: usize| {
                let reps = Tensor::from_fn(&[n, 16], |_| rng.random_range(-1.0..1.0));
                let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
                (reps, labels)
            };
            let (tr, ytr) = gen(250);
            let (te, yte) = gen(1000);
            let head = train_readout(&tr, &ytr, 5, &ReadoutConfig::default()).unwrap();
            accs.push(head.accuracy(&te, &yte));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.2).abs() <= 0.05, "{accs:?}");
    }

    #[test]
    fn csv_roundtrip() {
        let r = vec![ProbeResult {
            method: "sgd".into(),
            seed: 3,
            task: 1,
            step: 50,
            readout_accuracy: 0.5,
            original_accuracy: 0.25,
        }];
        assert_eq!(parse_probe_csv(&probe_csv(&r)).unwrap(), r);
        assert!(parse_probe_csv("bad\n").is_err());
    }
}
