//! Task networks: layer specs, initialization, forward passes with recorded
//! activations, SGD, and Task-A pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::data::{minibatch, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Bias-free fully connected layer.
    Dense { fan_in: usize, fan_out: usize },
    /// Bias-free stride-1 "same" convolution with a square odd kernel.
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
    GroupNorm { channels: usize, groups: usize },
    Relu,
    GlobalAvgPool,
    /// Final dense layer with bias. Must be last and unique.
    Classifier { fan_in: usize, classes: usize },
}

/// What a parameter tensor is, for gating, checkpoints and optimizer bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    DenseWeight,
    ConvWeight,
    GroupNormGamma,
    GroupNormBeta,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::DenseWeight => 0,
            ParamKind::ConvWeight => 1,
            ParamKind::GroupNormGamma => 2,
            ParamKind::GroupNormBeta => 3,
            ParamKind::ClassifierWeight => 4,
            ParamKind::ClassifierBias => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::DenseWeight,
            1 => ParamKind::ConvWeight,
            2 => ParamKind::GroupNormGamma,
            3 => ParamKind::GroupNormBeta,
            4 => ParamKind::ClassifierWeight,
            5 => ParamKind::ClassifierBias,
            _ => return None,
        })
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, ParamKind::ClassifierWeight | ParamKind::ClassifierBias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub layer: usize,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Shape of one example, e.g. `[d]` or `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// `d -> hidden... -> classes`, relu between dense layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                fan_in: prev,
                fan_out: h,
            });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Classifier {
            fan_in: prev,
            classes,
        });
        Self {
            input_shape: vec![input_dim],
            layers,
        }
    }

    /// conv 3x3x8 -> GN(2) -> relu -> conv 3x3x16 -> GN(4) -> relu -> global pool -> classifier.
    pub fn small_conv(in_ch: usize, side: usize, classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            input_shape: vec![in_ch, side, side],
            layers: vec![
                Conv { in_ch, out_ch: 8, kernel: 3 },
                GroupNorm { channels: 8, groups: 2 },
                Relu,
                Conv { in_ch: 8, out_ch: 16, kernel: 3 },
                GroupNorm { channels: 16, groups: 4 },
                Relu,
                GlobalAvgPool,
                Classifier { fan_in: 16, classes },
            ],
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Classifier { classes, .. }) => *classes,
            _ => 0,
        }
    }

    /// Width of the representation fed to the classifier.
    pub fn representation_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Classifier { fan_in, .. }) => *fan_in,
            _ => 0,
        }
    }

    /// Checks that consecutive layers agree on dimensions and the classifier is last and unique.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input shape {:?}", self.input_shape));
        }
        let n_cls = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Classifier { .. }))
            .count();
        if n_cls != 1 || !matches!(self.layers.last(), Some(LayerSpec::Classifier { .. })) {
            return bad("exactly one classifier, as the last layer".into());
        }
        let mut cur = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = match (l, cur.as_slice()) {
                (LayerSpec::Dense { fan_in, fan_out }, [d]) if d == fan_in && *fan_out > 0 => vec![*fan_out],
                (LayerSpec::Conv { in_ch, out_ch, kernel }, [c, h, w])
                    if c == in_ch && kernel % 2 == 1 && *out_ch > 0 =>
                {
                    vec![*out_ch, *h, *w]
                }
                (LayerSpec::GroupNorm { channels, groups }, s)
                    if !s.is_empty() && s[0] == *channels && *groups > 0 && channels % groups == 0 =>
                {
                    s.to_vec()
                }
                (LayerSpec::Relu, s) => s.to_vec(),
                (LayerSpec::GlobalAvgPool, [c, _, _]) => vec![*c],
                (LayerSpec::Classifier { fan_in, classes }, [d]) if d == fan_in && *classes > 0 => {
                    vec![*classes]
                }
                _ => return bad(format!("layer {i} ({l:?}) does not accept input {cur:?}")),
            };
        }
        Ok(())
    }

    /// Parameter tensors in storage order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            let mut push = |kind, shape: Vec<usize>| out.push(ParamSlot { layer, kind, shape });
            match l {
                LayerSpec::Dense { fan_in, fan_out } => push(ParamKind::DenseWeight, vec![*fan_out, *fan_in]),
                LayerSpec::Conv { in_ch, out_ch, kernel } => {
                    push(ParamKind::ConvWeight, vec![*out_ch, *in_ch, *kernel, *kernel])
                }
                LayerSpec::GroupNorm { channels, .. } => {
                    push(ParamKind::GroupNormGamma, vec![*channels]);
                    push(ParamKind::GroupNormBeta, vec![*channels]);
                }
                LayerSpec::Classifier { fan_in, classes } => {
                    push(ParamKind::ClassifierWeight, vec![*classes, *fan_in]);
                    push(ParamKind::ClassifierBias, vec![*classes]);
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
            }
        }
        out
    }
}

/// Weights of one network. `tensors[i]` has the shape of `arch.param_slots()[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn slots(&self) -> Vec<ParamSlot> {
        self.arch.param_slots()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Deterministic He-style initialization: dense/conv weights `N(0, 2 / fan_in)`, classifier
/// weights `N(0, 1 / fan_in)` with zero bias, GroupNorm `gamma = 1`, `beta = 0`.
pub fn build_network(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .param_slots()
        .into_iter()
        .map(|slot| {
            let fan_in: usize = slot.shape[1..].iter().product();
            let gauss = |std: f64, rng: &mut ChaCha8Rng| {
                Tensor::from_fn(&slot.shape, |_| std * rng.sample::<f64, _>(StandardNormal))
            };
            match slot.kind {
                ParamKind::DenseWeight | ParamKind::ConvWeight => gauss((2.0 / fan_in as f64).sqrt(), &mut rng),
                ParamKind::ClassifierWeight => gauss((1.0 / fan_in as f64).sqrt(), &mut rng),
                ParamKind::GroupNormGamma => Tensor::full(&slot.shape, 1.0),
                ParamKind::GroupNormBeta | ParamKind::ClassifierBias => Tensor::zeros(&slot.shape),
            }
        })
        .collect();
    Ok(NetworkParams {
        arch: arch.clone(),
        tensors,
    })
}

/// Tape handles produced by [`forward_on_tape`]. `inputs[l]`/`outputs[l]` are layer `l`'s
/// input and output.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub inputs: Vec<Var>,
    pub outputs: Vec<Var>,
    pub representation: Var,
    pub logits: Var,
}

/// Runs the network on `x` with parameters already on `tape` (one var per param slot).
pub fn forward_on_tape(arch: &Architecture, tape: &mut Tape, params: &[Var], x: Var) -> Result<ForwardVars> {
    let slots = arch.param_slots();
    if params.len() != slots.len() {
        return Err(shape_err("forward params", &[params.len()], &[slots.len()]));
    }
    let mut expected = vec![tape.shape(x)[0]];
    expected.extend_from_slice(&arch.input_shape);
    if tape.shape(x) != expected.as_slice() {
        return Err(shape_err("forward input", tape.shape(x), &expected));
    }
    let mut p = 0;
    let mut h = x;
    let mut inputs = Vec::with_capacity(arch.layers.len());
    let mut outputs = Vec::with_capacity(arch.layers.len());
    let mut representation = None;
    for l in &arch.layers {
        inputs.push(h);
        h = match l {
            LayerSpec::Dense { .. } => {
                let wt = tape.transpose(params[p])?;
                p += 1;
                tape.matmul(h, wt)?
            }
            LayerSpec::Conv { .. } => {
                p += 1;
                tape.conv2d(h, params[p - 1])?
            }
            LayerSpec::GroupNorm { groups, .. } => {
                p += 2;
                tape.group_norm(h, params[p - 2], params[p - 1], *groups, GROUP_NORM_EPS)?
            }
            LayerSpec::Relu => tape.relu(h)?,
            LayerSpec::GlobalAvgPool => tape.mean_spatial(h)?,
            LayerSpec::Classifier { .. } => {
                representation = Some(h);
                let wt = tape.transpose(params[p])?;
                let z = tape.matmul(h, wt)?;
                p += 2;
                tape.add_bias(z, params[p - 1])?
            }
        };
        outputs.push(h);
    }
    Ok(ForwardVars {
        inputs,
        outputs,
        representation: representation.expect("validated architecture ends in a classifier"),
        logits: h,
    })
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    /// Input of each layer (pre-activations in the synaptic sense).
    pub inputs: Vec<Tensor>,
    /// Output of each layer.
    pub outputs: Vec<Tensor>,
    /// Input to the classifier.
    pub representation: Tensor,
    pub logits: Tensor,
}

impl ForwardRecord {
    fn from_vars(tape: &Tape, v: &ForwardVars) -> Self {
        Self {
            inputs: v.inputs.iter().map(|&x| tape.value(x).clone()).collect(),
            outputs: v.outputs.iter().map(|&x| tape.value(x).clone()).collect(),
            representation: tape.value(v.representation).clone(),
            logits: tape.value(v.logits).clone(),
        }
    }
}

pub fn forward(params: &NetworkParams, batch: &Tensor) -> Result<ForwardRecord> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let x = tape.constant(batch.clone());
    let fv = forward_on_tape(&params.arch, &mut tape, &vars, x)?;
    Ok(ForwardRecord::from_vars(&tape, &fv))
}

/// Only the representation (classifier input), skipping the record.
pub fn representation(params: &NetworkParams, batch: &Tensor) -> Result<Tensor> {
    Ok(forward(params, batch)?.representation)
}

/// Cross-entropy loss, its gradient for every parameter, and the forward record.
pub fn loss_and_grads(
    params: &NetworkParams,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>, ForwardRecord)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let x = tape.constant(inputs.clone());
    let fv = forward_on_tape(&params.arch, &mut tape, &vars, x)?;
    let loss = tape.softmax_cross_entropy(fv.logits, labels)?;
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    let g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| g.wrt(v, t.shape()))
        .collect();
    Ok((lv, grads, ForwardRecord::from_vars(&tape, &fv)))
}

fn check_grads(params: &NetworkParams, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(shape_err("sgd grads", &[grads.len()], &[params.tensors.len()]));
    }
    for (i, (p, g)) in params.tensors.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(shape_err("sgd", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    Ok(())
}

/// Plain SGD, `w <- w - lr g`, on every tensor.
pub fn sgd_step(params: &mut NetworkParams, grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.tensors.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v <- momentum v + g`, `w <- w - lr v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl MomentumSgd {
    pub fn new(params: &NetworkParams, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        for ((p, g), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, d), vk) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vk = self.momentum * *vk + d;
                *w -= self.lr * *vk;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Added to dataset labels to address the task's classifier slots.
    pub label_offset: usize,
}

/// Minibatch momentum SGD on `dataset` from a seeded initialization; returns the checkpoint.
pub fn pretrain(arch: &Architecture, dataset: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<NetworkParams> {
    if dataset.is_empty() {
        return Err(Error::Data("pretraining on an empty dataset".into()));
    }
    let mut params = build_network(arch, seed)?;
    let mut opt = MomentumSgd::new(&params, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let batch = cfg.batch.min(dataset.len());
    for _ in 0..cfg.steps {
        let b = minibatch(dataset, batch, &mut rng)?;
        let labels: Vec<usize> = b.labels.iter().map(|l| l + cfg.label_offset).collect();
        let (_, grads, _) = loss_and_grads(&params, &b.inputs, &labels)?;
        opt.step(&mut params, &grads)?;
    }
    Ok(params)
}

/// Top-1 accuracy of the network's own classifier restricted to slots
/// `offset..offset + classes` (ties to the lowest slot).
pub fn head_accuracy(params: &NetworkParams, dataset: &Dataset, offset: usize) -> Result<f64> {
    let rec = forward(params, &dataset.inputs)?;
    let k = dataset.num_classes();
    let correct = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| crate::tensor::argmax(&rec.logits.row(*i)[offset..offset + k]) == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Architecture {
        Architecture::mlp(4, &[6, 5], 3)
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_network(&mlp(), 7).unwrap();
        assert_eq!(a, build_network(&mlp(), 7).unwrap());
        assert_ne!(a, build_network(&mlp(), 8).unwrap());
        assert_eq!(a.arch.classes(), 3);
        let conv = build_network(&Architecture::small_conv(3, 6, 10), 1).unwrap();
        let gamma = conv.slots().iter().position(|s| s.kind == ParamKind::GroupNormGamma).unwrap();
        assert!(conv.tensors[gamma].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut a = mlp();
        a.layers.swap(0, 4);
        assert!(a.validate().is_err());
        let mut b = mlp();
        b.layers[2] = LayerSpec::Dense { fan_in: 7, fan_out: 5 };
        assert!(b.validate().is_err());
        let mut c = mlp();
        c.layers.insert(0, LayerSpec::Classifier { fan_in: 4, classes: 4 });
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let mut p = build_network(&mlp(), 1).unwrap();
        p.tensors.iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::from_fn(&[2, 4], |i| i as f64 - 3.0);
        let rec = forward(&p, &x).unwrap();
        assert!(rec.representation.data().iter().all(|&v| v == 0.0));
        assert!(rec.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let p = build_network(&Architecture::small_conv(2, 4, 5), 3).unwrap();
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let full = forward(&p, &x).unwrap();
        let one = forward(&p, &x.select_rows(&[1])).unwrap();
        assert!(one.logits.max_abs_diff(&full.logits.select_rows(&[1])) < 1e-12);
        assert_eq!(forward(&p, &x).unwrap(), full);
    }

    #[test]
    fn forward_shape_mismatch() {
        let p = build_network(&mlp(), 1).unwrap();
        assert!(forward(&p, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn sgd_variants() {
        let p0 = build_network(&mlp(), 1).unwrap();
        let grads: Vec<Tensor> = p0.tensors.iter().map(|t| t.map(|_| 0.5)).collect();
        let mut p = p0.clone();
        sgd_step(&mut p, &grads, 0.0).unwrap();
        assert_eq!(p, p0);
        sgd_step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p.tensors[0].data()[0], p0.tensors[0].data()[0] - 0.1 * 0.5);

        let mut q = p0.clone();
        let mut opt = MomentumSgd::new(&q, 0.1, 0.9);
        opt.step(&mut q, &grads).unwrap();
        let after_one = q.tensors[0].data()[0];
        opt.step(&mut q, &grads).unwrap();
        let second = after_one - q.tensors[0].data()[0];
        assert!((second - 0.1 * 0.5 * 1.9).abs() < 1e-15);

        let mut bad = grads.clone();
        bad[0].data_mut()[0] = f64::NAN;
        assert!(sgd_step(&mut p, &bad, 0.1).is_err());
    }

    #[test]
    fn pretrain_zero_steps_is_init() {
        let ds = crate::data::synthetic_tasks(
            0,
            &crate::data::SyntheticSpec {
                dim: 4,
                n_train_per_class: 10,
                n_test_per_class: 5,
                classes: 3,
                margin: 6.0,
            },
        )
        .unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            lr: 0.1,
            momentum: 0.9,
            batch: 8,
            label_offset: 0,
        };
        assert_eq!(pretrain(&mlp(), &ds.train, &cfg, 4).unwrap(), build_network(&mlp(), 4).unwrap());
    }
}
