mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use remembra::autodiff::finite_difference_gradients;
use remembra::baselines::{
    distillation_term, estimate_fisher, ewc_step, lwf_loss_and_grads, EwcState, FisherLabels, LwfState,
};
use remembra::data::{Dataset, SplitTag};
use remembra::nets::{build_network, forward, loss_and_grads, sgd_step, Architecture, NetworkParams};
use remembra::Tensor;

fn log_prob(params: &NetworkParams, x: &Tensor, y: usize) -> f64 {
    let z = forward(params, x).unwrap().logits;
    let m = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.data()[y] - lse
}

fn probs(params: &NetworkParams, x: &Tensor) -> Vec<f64> {
    let z = forward(params, x).unwrap().logits;
    let e: Vec<f64> = z.data().iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Squared score of `log p(y | x)` by central differences.
fn score_squared(params: &NetworkParams, x: &Tensor, y: usize) -> Vec<Tensor> {
    let g = finite_difference_gradients(
        |ts| {
            let p = NetworkParams {
                arch: params.arch.clone(),
                tensors: ts.to_vec(),
            };
            log_prob(&p, x, y)
        },
        &params.tensors,
        1e-6,
    );
    g.into_iter().map(|t| t.map(|v| v * v)).collect()
}

fn setup() -> (NetworkParams, Dataset) {
    let arch = Architecture::mlp(3, &[4], 3);
    let params = build_network(&arch, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = common::randn(&mut rng, &[4, 3], 1.5);
    let ds = Dataset::new(inputs, vec![0, 1, 2, 1], vec![0, 1, 2], SplitTag::Train).unwrap();
    (params, ds)
}

fn total(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).sum()
}

#[test]
fn empirical_fisher_of_one_example_is_the_squared_score() {
    let (params, ds) = setup();
    let one = ds.subset(&[2]);
    let x = one.inputs.clone();
    let oracle = score_squared(&params, &x, one.labels[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = estimate_fisher(&params, &one, 7, 0, FisherLabels::Empirical, &mut rng).unwrap();
    for (a, b) in f.iter().zip(&oracle) {
        assert!(a.max_abs_diff(b) < 1e-8, "{a:?} vs {b:?}");
    }
}

#[test]
fn model_fisher_converges_to_the_expected_squared_score() {
    let (params, ds) = setup();
    let n = ds.len();
    let mut oracle: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for i in 0..n {
        let x = ds.inputs.select_rows(&[i]);
        let p = probs(&params, &x);
        for (y, py) in p.iter().enumerate() {
            for (o, s) in oracle.iter_mut().zip(score_squared(&params, &x, y)) {
                *o = o.zip_map(&s, |a, b| a + py * b / n as f64).unwrap();
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = estimate_fisher(&params, &ds, 40_000, 0, FisherLabels::Model, &mut rng).unwrap();
    let rel = (total(&f) - total(&oracle)).abs() / total(&oracle);
    assert!(rel < 0.03, "trace off by {rel}");
    let biggest = oracle.iter().flat_map(|t| t.data()).cloned().fold(0.0, f64::max);
    for (a, b) in f.iter().zip(&oracle) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(*x >= 0.0);
            assert!((x - y).abs() <= 0.05 * biggest, "{x} vs {y}");
        }
    }
}

#[test]
fn ewc_gradient_matches_its_penalty() {
    let (params, ds) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fisher = estimate_fisher(&params, &ds, 50, 0, FisherLabels::Model, &mut rng).unwrap();
    let state = EwcState::new(&params, fisher, 3.0).unwrap();
    assert_eq!(state.penalty(&params).unwrap(), 0.0);

    let mut moved = params.clone();
    for t in &mut moved.tensors {
        *t = t.map(|v| v + 0.1);
    }
    let (_, g, _) = loss_and_grads(&moved, &ds.inputs, &ds.labels).unwrap();
    let zero: Vec<Tensor> = g.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut stepped = moved.clone();
    ewc_step(&mut stepped, &zero, &state, 1.0).unwrap();
    let numeric = finite_difference_gradients(
        |ts| {
            state
                .penalty(&NetworkParams {
                    arch: moved.arch.clone(),
                    tensors: ts.to_vec(),
                })
                .unwrap()
        },
        &moved.tensors,
        1e-6,
    );
    for ((after, before), n) in stepped.tensors.iter().zip(&moved.tensors).zip(&numeric) {
        let applied = before.zip_map(after, |b, a| b - a).unwrap();
        assert!(applied.max_abs_diff(n) < 1e-6);
    }
}

#[test]
fn lwf_matches_an_independent_kl_and_its_own_gradient() {
    let (params, ds) = setup();
    let mut snapshot = params.clone();
    sgd_step(
        &mut snapshot,
        &loss_and_grads(&params, &ds.inputs, &ds.labels).unwrap().1,
        0.5,
    )
    .unwrap();
    let state = LwfState {
        snapshot: snapshot.clone(),
        old_slots: 0..2,
        lambda: 0.7,
        temperature: 2.0,
    };
    let (ce, kd, grads) = lwf_loss_and_grads(&params, &ds.inputs, &ds.labels, &state).unwrap();

    let soft = |z: &[f64]| -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|v| (v / 2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let cur = forward(&params, &ds.inputs).unwrap().logits;
    let old = forward(&snapshot, &ds.inputs).unwrap().logits;
    let mut kl = 0.0;
    for r in 0..ds.len() {
        let p = soft(&old.row(r)[..2]);
        let q = soft(&cur.row(r)[..2]);
        kl += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    kl /= ds.len() as f64;
    assert!((kd - kl).abs() < 1e-12, "{kd} vs {kl}");
    let sliced = |t: &Tensor| Tensor::from_fn(&[t.rows(), 2], |i| t.row(i / 2)[i % 2]);
    assert!((distillation_term(&sliced(&cur), &sliced(&old), 2.0).unwrap() - kl).abs() < 1e-12);

    let numeric = finite_difference_gradients(
        |ts| {
            let p = NetworkParams {
                arch: params.arch.clone(),
                tensors: ts.to_vec(),
            };
            let (ce, kd, _) = lwf_loss_and_grads(&p, &ds.inputs, &ds.labels, &state).unwrap();
            ce + 0.7 * kd
        },
        &params.tensors,
        1e-6,
    );
    for (a, n) in grads.iter().zip(&numeric) {
        assert!(a.max_abs_diff(n) < 1e-7);
    }
    assert!(ce > 0.0);
}
