//! Comparison update rules: SGD, SGD with a scaled-down step, EWC and LwF.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Tape, Var};
use crate::data::{Batch, Dataset};
use crate::engine::{TaskStream, UpdateRule};
use crate::error::{shape_err, Error, Result};
use crate::nets::{forward, forward_on_tape, loss_and_grads, sgd_step, NetworkParams};
use crate::tensor::Tensor;

/// Plain SGD at `lr * scale` (scale 1.0 for SGD, 0.1 for the reduced-step baseline).
pub fn sgd_baseline(params: &mut NetworkParams, grads: &[Tensor], lr: f64, scale: f64) -> Result<()> {
    sgd_step(params, grads, lr * scale)
}

/// Elastic weight consolidation state, frozen after Task-A training.
#[derive(Clone, Debug)]
pub struct EwcState {
    pub anchor: Vec<Tensor>,
    pub fisher: Vec<Tensor>,
    pub lambda: f64,
}

/// How labels are drawn for the Fisher estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FisherLabels {
    /// Sampled from the model's own predictive distribution.
    #[default]
    Model,
    /// The dataset's labels.
    Empirical,
}

/// Diagonal Fisher: mean over `n_samples` single examples of the squared gradient of
/// `log p(y | x)`. Labels address classifier slots `label_offset + label`.
pub fn estimate_fisher(
    params: &NetworkParams,
    dataset: &Dataset,
    n_samples: usize,
    label_offset: usize,
    labels: FisherLabels,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    if dataset.is_empty() {
        return Err(Error::Data("Fisher estimate on an empty dataset".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("Fisher estimate needs at least one sample".into()));
    }
    let mut fisher: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for _ in 0..n_samples {
        let i = rng.random_range(0..dataset.len());
        let x = dataset.inputs.select_rows(&[i]);
        let y = match labels {
            FisherLabels::Empirical => dataset.labels[i] + label_offset,
            FisherLabels::Model => {
                let logits = forward(params, &x)?.logits;
                let p = kernels::softmax_rows(logits.data(), logits.len());
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            }
        };
        let (_, grads, _) = loss_and_grads(params, &x, &[y])?;
        for (f, g) in fisher.iter_mut().zip(&grads) {
            for (fk, gk) in f.data_mut().iter_mut().zip(g.data()) {
                *fk += gk * gk;
            }
        }
    }
    for f in &mut fisher {
        f.data_mut().iter_mut().for_each(|v| *v /= n_samples as f64);
    }
    Ok(fisher)
}

impl EwcState {
    pub fn new(anchor: &NetworkParams, fisher: Vec<Tensor>, lambda: f64) -> Result<Self> {
        for (a, f) in anchor.tensors.iter().zip(&fisher) {
            if a.shape() != f.shape() {
                return Err(shape_err("ewc fisher", a.shape(), f.shape()));
            }
        }
        Ok(Self {
            anchor: anchor.tensors.clone(),
            fisher,
            lambda,
        })
    }

    fn check(&self, params: &NetworkParams) -> Result<()> {
        if params.tensors.len() != self.anchor.len() {
            return Err(shape_err("ewc anchor", &[params.tensors.len()], &[self.anchor.len()]));
        }
        for (p, a) in params.tensors.iter().zip(&self.anchor) {
            if p.shape() != a.shape() {
                return Err(shape_err("ewc anchor", p.shape(), a.shape()));
            }
        }
        Ok(())
    }

    /// `lambda * sum F (w - w*)^2`.
    pub fn penalty(&self, params: &NetworkParams) -> Result<f64> {
        self.check(params)?;
        let mut s = 0.0;
        for ((p, a), f) in params.tensors.iter().zip(&self.anchor).zip(&self.fisher) {
            for ((w, w0), fk) in p.data().iter().zip(a.data()).zip(f.data()) {
                s += fk * (w - w0) * (w - w0);
            }
        }
        Ok(self.lambda * s)
    }
}

/// SGD on `loss_B + lambda sum F (w - w*)^2`; the penalty gradient `2 lambda F (w - w*)` is
/// added to `grads_b`.
pub fn ewc_step(params: &mut NetworkParams, grads_b: &[Tensor], state: &EwcState, lr: f64) -> Result<()> {
    state.check(params)?;
    let total: Vec<Tensor> = grads_b
        .iter()
        .zip(params.tensors.iter().zip(&state.anchor).zip(&state.fisher))
        .map(|(g, ((p, a), f))| {
            let data = g
                .data()
                .iter()
                .zip(p.data().iter().zip(a.data()).zip(f.data()))
                .map(|(gk, ((w, w0), fk))| gk + 2.0 * state.lambda * fk * (w - w0))
                .collect();
            Tensor::from_raw(g.shape().to_vec(), data)
        })
        .collect();
    sgd_step(params, &total, lr)
}

/// Learning-without-forgetting state: the network as it was before the new task.
#[derive(Clone, Debug)]
pub struct LwfState {
    pub snapshot: NetworkParams,
    /// Classifier slots of the old task(s).
    pub old_slots: Range<usize>,
    pub lambda: f64,
    pub temperature: f64,
}

fn softmax_t(logits: &Tensor, t: f64) -> Tensor {
    let c = logits.shape()[1];
    Tensor::from_raw(
        logits.shape().to_vec(),
        kernels::softmax_rows(&logits.map(|z| z / t).into_data(), c),
    )
}

fn entropy_rows(p: &Tensor) -> f64 {
    let n = p.rows();
    -p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / n as f64
}

/// `KL(softmax(snapshot / T) || softmax(current / T))`, averaged over rows.
pub fn distillation_term(current: &Tensor, snapshot: &Tensor, temperature: f64) -> Result<f64> {
    if current.shape() != snapshot.shape() {
        return Err(shape_err("distillation", current.shape(), snapshot.shape()));
    }
    let target = softmax_t(snapshot, temperature);
    let mut tape = Tape::new();
    let z = tape.constant(current.map(|v| v / temperature));
    let ce = tape.soft_cross_entropy(z, &target)?;
    Ok(tape.value(ce).item() - entropy_rows(&target))
}

fn slice_logits(logits: &Tensor, range: &Range<usize>) -> Tensor {
    let c = logits.shape()[1];
    let n = logits.rows();
    let mut data = Vec::with_capacity(n * range.len());
    for r in 0..n {
        data.extend_from_slice(&logits.data()[r * c + range.start..r * c + range.end]);
    }
    Tensor::from_raw(vec![n, range.len()], data)
}

/// Cross-entropy on the new batch plus `lambda` times the distillation term on the old slots.
/// Returns `(ce, distill, grads)`.
pub fn lwf_loss_and_grads(
    params: &NetworkParams,
    inputs: &Tensor,
    labels: &[usize],
    state: &LwfState,
) -> Result<(f64, f64, Vec<Tensor>)> {
    if state.snapshot.arch != params.arch {
        return Err(Error::Spec("LwF snapshot architecture differs from the network".into()));
    }
    let old_logits = slice_logits(&forward(&state.snapshot, inputs)?.logits, &state.old_slots);
    let target = softmax_t(&old_logits, state.temperature);
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let x = tape.constant(inputs.clone());
    let fv = forward_on_tape(&params.arch, &mut tape, &vars, x)?;
    let ce = tape.softmax_cross_entropy(fv.logits, labels)?;
    let old = tape.slice_cols(fv.logits, state.old_slots.start, state.old_slots.end)?;
    let old = tape.scale(old, 1.0 / state.temperature)?;
    let kd = tape.soft_cross_entropy(old, &target)?;
    let kd_w = tape.scale(kd, state.lambda)?;
    let total = tape.add(ce, kd_w)?;
    let g = tape.backward(total)?;
    let grads = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| g.wrt(v, t.shape()))
        .collect();
    Ok((
        tape.value(ce).item(),
        tape.value(kd).item() - entropy_rows(&target),
        grads,
    ))
}

pub fn lwf_step(params: &mut NetworkParams, inputs: &Tensor, labels: &[usize], state: &LwfState, lr: f64) -> Result<()> {
    let (_, _, grads) = lwf_loss_and_grads(params, inputs, labels, state)?;
    sgd_step(params, &grads, lr)
}

/// Plain SGD on the new task, optionally with a scaled-down step.
#[derive(Clone, Debug)]
pub struct SgdRule {
    pub scale: f64,
}

impl UpdateRule for SgdRule {
    fn name(&self) -> String {
        if self.scale == 1.0 {
            "sgd".into()
        } else {
            format!("sgd{}", self.scale)
        }
    }

    fn step(&mut self, params: &mut NetworkParams, _a: &Batch, b: &Batch, alpha: f64) -> Result<Option<Vec<Tensor>>> {
        let (_, g, _) = loss_and_grads(params, &b.inputs, &b.labels)?;
        sgd_baseline(params, &g, alpha, self.scale)?;
        Ok(None)
    }
}

/// EWC. At each task switch the anchor moves to the current weights and the Fisher is
/// re-estimated on all earlier tasks.
#[derive(Clone, Debug)]
pub struct EwcRule {
    pub lambda: f64,
    pub fisher_samples: usize,
    pub labels: FisherLabels,
    pub state: Option<EwcState>,
    rng: ChaCha8Rng,
}

impl EwcRule {
    pub fn new(lambda: f64, fisher_samples: usize, labels: FisherLabels, seed: u64) -> Self {
        Self {
            lambda,
            fisher_samples,
            labels,
            state: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl UpdateRule for EwcRule {
    fn name(&self) -> String {
        "ewc".into()
    }

    fn begin_task(&mut self, params: &NetworkParams, stream: &TaskStream, new_task: usize) -> Result<()> {
        let fisher = estimate_fisher(
            params,
            stream.old_tasks(new_task),
            self.fisher_samples,
            0,
            self.labels,
            &mut self.rng,
        )?;
        self.state = Some(EwcState::new(params, fisher, self.lambda)?);
        Ok(())
    }

    fn step(&mut self, params: &mut NetworkParams, _a: &Batch, b: &Batch, alpha: f64) -> Result<Option<Vec<Tensor>>> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Spec("EWC stepped before its anchor was set".into()))?;
        let (_, g, _) = loss_and_grads(params, &b.inputs, &b.labels)?;
        ewc_step(params, &g, state, alpha)?;
        Ok(None)
    }
}

/// LwF. At each task switch the network is snapshotted and every earlier task's slots
/// become distillation targets.
#[derive(Clone, Debug)]
pub struct LwfRule {
    pub lambda: f64,
    pub temperature: f64,
    pub state: Option<LwfState>,
}

impl LwfRule {
    pub fn new(lambda: f64, temperature: f64) -> Self {
        Self {
            lambda,
            temperature,
            state: None,
        }
    }
}

impl UpdateRule for LwfRule {
    fn name(&self) -> String {
        "lwf".into()
    }

    fn begin_task(&mut self, params: &NetworkParams, stream: &TaskStream, new_task: usize) -> Result<()> {
        self.state = Some(LwfState {
            snapshot: params.clone(),
            old_slots: 0..stream.offsets[new_task],
            lambda: self.lambda,
            temperature: self.temperature,
        });
        Ok(())
    }

    fn step(&mut self, params: &mut NetworkParams, _a: &Batch, b: &Batch, alpha: f64) -> Result<Option<Vec<Tensor>>> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Spec("LwF stepped without an old-head snapshot".into()))?;
        lwf_step(params, &b.inputs, &b.labels, state, alpha)?;
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_tasks, SyntheticSpec};
    use crate::nets::{build_network, Architecture};

    fn setup() -> (NetworkParams, Dataset) {
        let p = build_network(&Architecture::mlp(6, &[8], 4), 2).unwrap();
        let t = synthetic_tasks(
            1,
            &SyntheticSpec {
                dim: 6,
                n_train_per_class: 20,
                n_test_per_class: 5,
                classes: 2,
                margin: 4.0,
            },
        )
        .unwrap();
        (p, t.train)
    }

    #[test]
    fn fisher_nonnegative_and_zero_when_saturated() {
        let (p, ds) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = estimate_fisher(&p, &ds, 20, 0, FisherLabels::Model, &mut rng).unwrap();
        assert!(f.iter().flat_map(|t| t.data()).all(|&v| v >= 0.0));
        assert!(f.iter().flat_map(|t| t.data()).any(|&v| v > 0.0));

        // Huge bias on slot 0, labels all 0: predictions saturate and gradients vanish.
        let mut sat = p.clone();
        let bias = sat.tensors.len() - 1;
        sat.tensors[bias].data_mut()[0] = 1e3;
        let mut zero_labels = ds.clone();
        zero_labels.labels.iter_mut().for_each(|l| *l = 0);
        let f = estimate_fisher(&sat, &zero_labels, 10, 0, FisherLabels::Model, &mut rng).unwrap();
        assert!(f.iter().flat_map(|t| t.data()).all(|&v| v < 1e-12));
        assert!(estimate_fisher(&p, &ds, 0, 0, FisherLabels::Model, &mut rng).is_err());
    }

    #[test]
    fn ewc_reduces_to_sgd() {
        let (p, ds) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = estimate_fisher(&p, &ds, 10, 0, FisherLabels::Empirical, &mut rng).unwrap();
        let state = EwcState::new(&p, f.clone(), 1.0).unwrap();
        assert_eq!(state.penalty(&p).unwrap(), 0.0);
        let grads: Vec<Tensor> = p.tensors.iter().map(|t| t.map(|v| v * 0.3 + 0.1)).collect();

        let mut a = p.clone();
        ewc_step(&mut a, &grads, &state, 0.1).unwrap();
        let mut b = p.clone();
        sgd_step(&mut b, &grads, 0.1).unwrap();
        assert_eq!(a, b);

        let moved = a.clone();
        let zero = EwcState::new(&p, f, 0.0).unwrap();
        let mut c = moved.clone();
        ewc_step(&mut c, &grads, &zero, 0.1).unwrap();
        let mut d = moved.clone();
        sgd_step(&mut d, &grads, 0.1).unwrap();
        assert_eq!(c, d);
        assert!(state.penalty(&moved).unwrap() > 0.0);
    }

    #[test]
    fn distillation_zero_at_equality_and_shift_invariant() {
        let z = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        assert!(distillation_term(&z, &z, 2.0).unwrap().abs() < 1e-12);
        assert!(distillation_term(&z, &z, 1.0).unwrap().abs() < 1e-12);
        let other = z.map(|v| v * 1.5 - 0.2);
        let d1 = distillation_term(&z, &other, 2.0).unwrap();
        let d2 = distillation_term(&z.map(|v| v + 3.0), &other.map(|v| v + 3.0), 2.0).unwrap();
        assert!(d1 > 0.0);
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn lwf_at_snapshot_has_zero_distillation() {
        let (p, ds) = setup();
        let state = LwfState {
            snapshot: p.clone(),
            old_slots: 0..2,
            lambda: 1.0,
            temperature: 2.0,
        };
        let labels: Vec<usize> = ds.labels.iter().map(|l| l + 2).collect();
        let (_, kd, _) = lwf_loss_and_grads(&p, &ds.inputs, &labels, &state).unwrap();
        assert!(kd.abs() < 1e-12);
        let mut q = p.clone();
        lwf_step(&mut q, &ds.inputs, &labels, &state, 0.1).unwrap();
        let (_, kd2, _) = lwf_loss_and_grads(&q, &ds.inputs, &labels, &state).unwrap();
        assert!(kd2 > 0.0);
    }

    #[test]
    fn scaled_sgd_is_tenth() {
        let (p, _) = setup();
        let grads: Vec<Tensor> = p.tensors.iter().map(|t| t.map(|_| 1.0)).collect();
        let mut a = p.clone();
        sgd_baseline(&mut a, &grads, 0.1, 1.0).unwrap();
        let mut b = p.clone();
        sgd_baseline(&mut b, &grads, 0.1, 0.1).unwrap();
        for ((x, y), z) in a.tensors.iter().zip(&b.tensors).zip(&p.tensors) {
            for ((xa, yb), z0) in x.data().iter().zip(y.data()).zip(z.data()) {
                assert!(((z0 - yb) * 10.0 - (z0 - xa)).abs() < 1e-12);
            }
        }
    }
}
