#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use remembra::autodiff::{finite_difference_gradients, huber_loss, max_relative_error, Tape, Var};
use remembra::config::{Experiment, ExperimentConfig};
use remembra::meta::{
    apply_gated_update_on_tape, assemble_all, gated_student_step, meta_forward_on_tape, theta_on_tape, MetaConfig,
    MetaParams, MetaState, StateVars,
};
use remembra::nets::{build_network, forward_on_tape, loss_and_grads, representation, Architecture};
use remembra::{Result, Tensor};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Builds the op under test from leaf inputs. The output is contracted with a fixed random
/// tensor so every op is checked through a scalar.
type Build = fn(&mut Tape, &[Var], &mut ChaCha8Rng) -> Result<Var>;

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Spread of the random inputs.
    pub spread: f64,
    build: Build,
}

fn p(name: &'static str, shapes: &[&[usize]], spread: f64, build: Build) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        spread,
        build,
    }
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        p("relu", &[&[4, 5]], 1.0, |t, v, _| t.relu(v[0])),
        p("tanh", &[&[4, 5]], 1.0, |t, v, _| t.tanh(v[0])),
        p("sigmoid", &[&[4, 5]], 2.0, |t, v, _| t.sigmoid(v[0])),
        p("scale", &[&[3, 4]], 1.0, |t, v, _| t.scale(v[0], -1.7)),
        p("scale_by", &[&[3, 4], &[1]], 1.0, |t, v, _| t.scale_by(v[0], v[1])),
        p("add", &[&[3, 4], &[3, 4]], 1.0, |t, v, _| t.add(v[0], v[1])),
        p("sub", &[&[3, 4], &[3, 4]], 1.0, |t, v, _| t.sub(v[0], v[1])),
        p("mul", &[&[3, 4], &[3, 4]], 1.0, |t, v, _| t.mul(v[0], v[1])),
        p("add_bias", &[&[4, 5], &[5]], 1.0, |t, v, _| t.add_bias(v[0], v[1])),
        p("matmul", &[&[3, 4], &[4, 5]], 1.0, |t, v, _| t.matmul(v[0], v[1])),
        p("transpose", &[&[3, 4]], 1.0, |t, v, _| t.transpose(v[0])),
        p("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3]], 1.0, |t, v, _| t.conv2d(v[0], v[1])),
        p("mean_spatial", &[&[2, 3, 4, 4]], 1.0, |t, v, _| t.mean_spatial(v[0])),
        p("concat", &[&[3, 2], &[3, 4], &[3, 1]], 1.0, |t, v, _| t.concat(&[v[0], v[1], v[2]])),
        p("slice_cols", &[&[3, 6]], 1.0, |t, v, _| t.slice_cols(v[0], 1, 4)),
        p("reshape", &[&[2, 6]], 1.0, |t, v, _| t.reshape(v[0], &[3, 4])),
        p("mean_all", &[&[3, 4]], 1.0, |t, v, _| t.mean_all(v[0])),
        p("softmax_cross_entropy", &[&[4, 5]], 2.0, |t, v, _| {
            t.softmax_cross_entropy(v[0], &[0, 3, 4, 3])
        }),
        p("soft_cross_entropy", &[&[4, 5]], 2.0, |t, v, rng| {
            let raw = Tensor::from_fn(&[4, 5], |_| rng.random_range(0.1..1.0));
            let targets = Tensor::from_fn(&[4, 5], |i| {
                let row = &raw.data()[(i / 5) * 5..(i / 5) * 5 + 5];
                raw.data()[i] / row.iter().sum::<f64>()
            });
            t.soft_cross_entropy(v[0], &targets)
        }),
        p("huber", &[&[4, 5], &[4, 5]], 1.5, |t, v, _| t.huber(v[0], v[1], 1.0, 3.0)),
        p("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], 1.0, |t, v, _| {
            t.group_norm(v[0], v[1], v[2], 2, 1e-5)
        }),
        p("group_norm_dense", &[&[3, 4], &[4], &[4]], 1.0, |t, v, _| {
            t.group_norm(v[0], v[1], v[2], 4, 1e-5)
        }),
    ]
}

fn primitive_value(case: &Primitive, inputs: &[Tensor], seed: u64, leaves: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| if leaves { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
        .collect();
    // Same stream for every evaluation so the contraction weights and targets stay fixed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let y = (case.build)(&mut tape, &vars, &mut rng)?;
    let w = randn(&mut rng, &tape.shape(y).to_vec(), 1.0);
    let w = tape.constant(w);
    let yw = tape.mul(y, w)?;
    let out = tape.mean_all(yw)?;
    Ok((tape, vars, out))
}

/// Largest relative error between tape and central-difference gradients for one primitive.
pub fn primitive_error(case: &Primitive, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case.shapes.iter().map(|s| randn(&mut rng, s, case.spread)).collect();
    let (tape, vars, out) = primitive_value(case, &inputs, seed, true).unwrap();
    let g = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().zip(&inputs).map(|(&v, x)| g.wrt(v, x.shape())).collect();
    let numeric = finite_difference_gradients(
        |xs| {
            let (tape, _, out) = primitive_value(case, xs, seed, false).unwrap();
            tape.value(out).item()
        },
        &inputs,
        1e-6,
    );
    max_relative_error(&analytic, &numeric, 1e-6)
}

pub fn small_meta_config() -> MetaConfig {
    MetaConfig {
        hidden_kernel: 3,
        hidden_norm: 2,
        cells: 2,
        normalize_inputs: false,
    }
}

fn with_tensors(theta: &MetaParams, ts: &[Tensor]) -> MetaParams {
    let mut out = theta.clone();
    for (dst, src) in out.tensors_mut().into_iter().zip(ts) {
        *dst = src.clone();
    }
    out
}

/// Gradient check of rule parameters through one whole student step:
/// gates, gated update, forward pass of the updated student, Huber against a fixed target.
/// Alternates between a dense and a conv/GroupNorm student.
pub fn full_chain_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (arch, x) = if seed % 2 == 0 {
        (Architecture::mlp(4, &[5, 4], 3), randn(&mut rng, &[6, 4], 1.0))
    } else {
        (Architecture::small_conv(2, 4, 3), randn(&mut rng, &[3, 2, 4, 4], 1.0))
    };
    let labels: Vec<usize> = (0..x.shape()[0]).map(|i| i % 3).collect();
    let student = build_network(&arch, seed).unwrap();
    let mut theta = MetaParams::for_network(&student, &small_meta_config(), seed).unwrap();
    // Move away from the SGD-equivalent start, where most of theta has zero gradient.
    for t in theta.tensors_mut() {
        let noise = randn(&mut rng, t.shape(), 0.3);
        *t = t.zip_map(&noise, |a, b| a + b).unwrap();
    }
    let state = MetaState {
        nets: remembra::meta::reset_state(&theta)
            .nets
            .into_iter()
            .map(|cells| {
                cells
                    .into_iter()
                    .map(|(h, c)| (randn(&mut rng, h.shape(), 0.5), randn(&mut rng, c.shape(), 0.5)))
                    .collect()
            })
            .collect(),
    };
    let (_, grads, rec) = loss_and_grads(&student, &x, &labels).unwrap();
    // A target near the current representation keeps the loss small, which keeps the roundoff
    // of the central differences well below the gradients being checked.
    let rep = representation(&student, &x).unwrap();
    let target = rep.zip_map(&randn(&mut rng, rep.shape(), 0.05), |a, b| a + b).unwrap();
    let alpha = 0.1;
    let (delta, scale) = (1.0, 300.0);

    let mut tape = Tape::new();
    let vars = theta_on_tape(&mut tape, &theta, true);
    let sv = StateVars::constant(&mut tape, &state);
    let inputs = assemble_all(&theta, &student, &rec, &grads).unwrap();
    let (deltas, _) = meta_forward_on_tape(&mut tape, &theta, &vars, &sv, &inputs).unwrap();
    let mut next: Vec<Var> = student.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    for (net, &d) in theta.nets.iter().zip(&deltas) {
        next[net.slot] = apply_gated_update_on_tape(&mut tape, next[net.slot], &grads[net.slot], d, alpha).unwrap();
    }
    for (i, slot) in arch.param_slots().iter().enumerate() {
        if slot.kind.is_classifier() {
            let step = tape.constant(grads[i].map(|g| -alpha * g));
            next[i] = tape.add(next[i], step).unwrap();
        }
    }
    let xv = tape.constant(x.clone());
    let fv = forward_on_tape(&arch, &mut tape, &next, xv).unwrap();
    let tv = tape.constant(target.clone());
    let loss = tape.huber(fv.representation, tv, delta, scale).unwrap();
    let g = tape.backward(loss).unwrap();
    let params: Vec<Tensor> = theta.tensors().into_iter().cloned().collect();
    let analytic: Vec<Tensor> = vars.all().iter().zip(&params).map(|(&v, t)| g.wrt(v, t.shape())).collect();

    let numeric = finite_difference_gradients(
        |ts| {
            let th = with_tensors(&theta, ts);
            let (next, _, _) = gated_student_step(&th, &state, &student, &rec, &grads, alpha).unwrap();
            huber_loss(&representation(&next, &x).unwrap(), &target, delta, scale).unwrap()
        },
        &params,
        3e-5,
    );
    max_relative_error(&analytic, &numeric, 1e-6)
}

/// A scaled-down configuration for fast end-to-end runs.
pub fn tiny_config(experiment: Experiment) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(experiment);
    for (k, v) in [
        ("train_per_class", "40"),
        ("test_per_class", "40"),
        ("input_dim", "8"),
        ("hidden", "16"),
        ("pretrain_steps", "100"),
        ("meta_hidden_kernel", "4"),
        ("meta_hidden_norm", "2"),
        ("meta_cells", "2"),
        ("episodes", "4"),
        ("inner_steps", "6"),
        ("unroll_steps", "10"),
        ("snapshot_every", "5"),
        ("readout_steps", "50"),
        ("fisher_samples", "20"),
        ("deterministic_log", "true"),
        ("seeds", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

