//! The learned update rule.
//!
//! Every non-classifier parameter tensor of the task network owns one gating network: a
//! three-cell stacked LSTM followed by a linear head, `tanh`, and a learnable scalar scale.
//! Each output neuron of the layer is one row of the gating network's batch, so the same
//! weights serve every neuron of a layer while the recurrent state stays per neuron.
//!
//! For neuron `j` the input row is `[w_j, g_j, mean(h_in), mean(h_out_j)]` and the output
//! row `delta_j` has the length of `w_j`. The student update is `w <- w - alpha (delta * g)`.
//!
//! The head starts at weights 0 and bias 1 and the scale at `1 / tanh(1)`, so a freshly
//! built rule returns `delta = 1` everywhere and reproduces plain SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nets::{ForwardRecord, NetworkParams, ParamKind, ParamSlot};
use crate::tensor::Tensor;

/// Initial value of the output scale: makes `scale * tanh(1) == 1`.
pub fn initial_scale() -> f64 {
    1.0 / 1f64.tanh()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Hidden width for dense and conv kernels.
    pub hidden_kernel: usize,
    /// Hidden width for GroupNorm gamma/beta.
    pub hidden_norm: usize,
    /// Stacked recurrent cells per gating network.
    pub cells: usize,
    /// Standardize each input feature with running statistics.
    pub normalize_inputs: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            hidden_kernel: 64,
            hidden_norm: 32,
            cells: 3,
            normalize_inputs: false,
        }
    }
}

/// Input/output row lengths of the gating network for a parameter slot.
pub fn gate_dims(slot: &ParamSlot) -> Result<(usize, usize)> {
    match slot.kind {
        ParamKind::DenseWeight => {
            let cin = slot.shape[1];
            Ok((3 * cin + 1, cin))
        }
        ParamKind::ConvWeight => {
            let (cin, k) = (slot.shape[1], slot.shape[2] * slot.shape[3]);
            Ok((2 * k * cin + cin + 1, k * cin))
        }
        ParamKind::GroupNormGamma | ParamKind::GroupNormBeta => Ok((4, 1)),
        ParamKind::ClassifierWeight | ParamKind::ClassifierBias => Err(Error::NoMetaNetwork(slot.layer)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    /// `[in, 4h]`, gate order input, forget, candidate, output.
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

/// Welford running mean/variance per input feature.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningStats {
    fn new(n: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    fn observe(&mut self, rows: &Tensor) {
        for r in 0..rows.rows() {
            self.count += 1.0;
            for (k, &x) in rows.row(r).iter().enumerate() {
                let d = x - self.mean[k];
                self.mean[k] += d / self.count;
                self.m2[k] += d * (x - self.mean[k]);
            }
        }
    }

    fn standardize(&self, rows: &Tensor) -> Tensor {
        let n = self.mean.len();
        let data = rows
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let k = i % n;
                let var = if self.count > 1.0 { self.m2[k] / (self.count - 1.0) } else { 1.0 };
                (x - self.mean[k]) / var.sqrt().max(1e-8)
            })
            .collect();
        Tensor::from_raw(rows.shape().to_vec(), data)
    }
}

/// Gating network for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNet {
    /// Index of the gated tensor in the task network's parameter list.
    pub slot: usize,
    pub kind: ParamKind,
    pub input_len: usize,
    pub output_len: usize,
    /// Output neurons of the gated layer (rows per step).
    pub neurons: usize,
    pub hidden: usize,
    pub cells: Vec<LstmCell>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub scale: Tensor,
    pub norm: Option<RunningStats>,
}

impl GateNet {
    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.cells
            .iter()
            .flat_map(|c| [&c.wx, &c.wh, &c.b])
            .chain([&self.head_w, &self.head_b, &self.scale])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.cells
            .iter_mut()
            .flat_map(|c| [&mut c.wx, &mut c.wh, &mut c.b])
            .chain([&mut self.head_w, &mut self.head_b, &mut self.scale])
    }
}

/// Meta-parameters: one [`GateNet`] per gated tensor. The classifier has none.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub config: MetaConfig,
    pub nets: Vec<GateNet>,
}

impl MetaParams {
    pub fn new(slots: &[ParamSlot], config: &MetaConfig, seed: u64) -> Result<Self> {
        if config.cells == 0 || config.hidden_kernel == 0 || config.hidden_norm == 0 {
            return Err(Error::Config(format!("meta-learner sizes must be positive: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets = Vec::new();
        for (i, slot) in slots.iter().enumerate() {
            if slot.kind.is_classifier() {
                continue;
            }
            let (input_len, output_len) = gate_dims(slot)?;
            let hidden = match slot.kind {
                ParamKind::GroupNormGamma | ParamKind::GroupNormBeta => config.hidden_norm,
                _ => config.hidden_kernel,
            };
            let bound = 1.0 / (hidden as f64).sqrt();
            let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
            let cells = (0..config.cells)
                .map(|c| {
                    let fan_in = if c == 0 { input_len } else { hidden };
                    let mut b = Tensor::zeros(&[4 * hidden]);
                    b.data_mut()[hidden..2 * hidden].fill(1.0);
                    LstmCell {
                        wx: uniform(&[fan_in, 4 * hidden]),
                        wh: uniform(&[hidden, 4 * hidden]),
                        b,
                    }
                })
                .collect();
            nets.push(GateNet {
                slot: i,
                kind: slot.kind,
                input_len,
                output_len,
                neurons: slot.shape[0],
                hidden,
                cells,
                head_w: Tensor::zeros(&[hidden, output_len]),
                head_b: Tensor::full(&[output_len], 1.0),
                scale: Tensor::scalar(initial_scale()),
                norm: config.normalize_inputs.then(|| RunningStats::new(input_len)),
            });
        }
        Ok(Self {
            config: config.clone(),
            nets,
        })
    }

    pub fn for_network(params: &NetworkParams, config: &MetaConfig, seed: u64) -> Result<Self> {
        Self::new(&params.slots(), config, seed)
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.nets.iter().flat_map(GateNet::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.iter_mut().flat_map(GateNet::tensors_mut).collect()
    }

    /// Updates running input statistics (no-op unless input normalization is enabled).
    pub fn observe_inputs(&mut self, inputs: &[Tensor]) {
        for (net, x) in self.nets.iter_mut().zip(inputs) {
            if let Some(n) = &mut net.norm {
                n.observe(x);
            }
        }
    }

    fn prepare(&self, net: usize, x: &Tensor) -> Tensor {
        match &self.nets[net].norm {
            Some(n) => n.standardize(x),
            None => x.clone(),
        }
    }
}

/// Recurrent state: for every gating network and cell, `(h, c)` with one row per neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub nets: Vec<Vec<(Tensor, Tensor)>>,
}

/// All-zero state sized for `theta`.
pub fn reset_state(theta: &MetaParams) -> MetaState {
    MetaState {
        nets: theta
            .nets
            .iter()
            .map(|n| {
                (0..n.cells.len())
                    .map(|_| {
                        let z = Tensor::zeros(&[n.neurons, n.hidden]);
                        (z.clone(), z)
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Builds the gating input rows for parameter `slot` from a forward record and the gradients of
/// the same pass. Activations are averaged over the batch (and spatial positions for conv).
pub fn assemble_inputs(
    params: &NetworkParams,
    slot_index: usize,
    record: &ForwardRecord,
    grads: &[Tensor],
) -> Result<Tensor> {
    let slots = params.slots();
    let slot = slots
        .get(slot_index)
        .ok_or_else(|| Error::Spec(format!("no parameter slot {slot_index}")))?;
    let (in_len, _) = gate_dims(slot)?;
    let w = &params.tensors[slot_index];
    let g = &grads[slot_index];
    if g.shape() != w.shape() {
        return Err(shape_err("assemble_inputs grads", g.shape(), w.shape()));
    }
    let pre = channel_means(&record.inputs[slot.layer]);
    let post = channel_means(&record.outputs[slot.layer]);
    let neurons = slot.shape[0];
    let mut data = Vec::with_capacity(neurons * in_len);
    match slot.kind {
        ParamKind::DenseWeight | ParamKind::ConvWeight => {
            for j in 0..neurons {
                data.extend_from_slice(w.row(j));
                data.extend_from_slice(g.row(j));
                data.extend_from_slice(&pre);
                data.push(post[j]);
            }
        }
        ParamKind::GroupNormGamma | ParamKind::GroupNormBeta => {
            for c in 0..neurons {
                data.extend_from_slice(&[w.data()[c], g.data()[c], pre[c], post[c]]);
            }
        }
        _ => unreachable!("gate_dims rejects classifier slots"),
    }
    if data.len() != neurons * in_len {
        return Err(shape_err("assemble_inputs", &[data.len()], &[neurons * in_len]));
    }
    Ok(Tensor::from_raw(vec![neurons, in_len], data))
}

/// Mean per channel of `[n, c, ...]` activations.
fn channel_means(x: &Tensor) -> Vec<f64> {
    let m = x.mean_rows();
    let c = x.shape()[1];
    let per = m.len() / c;
    m.data().chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect()
}

/// Tape handles for one gating network's parameters.
#[derive(Clone, Debug)]
pub struct GateNetVars {
    cells: Vec<(Var, Var, Var)>,
    head_w: Var,
    head_b: Var,
    scale: Var,
}

/// Tape handles for all of theta, in [`MetaParams::tensors`] order via [`ThetaVars::all`].
#[derive(Clone, Debug)]
pub struct ThetaVars {
    pub nets: Vec<GateNetVars>,
}

impl ThetaVars {
    pub fn all(&self) -> Vec<Var> {
        self.nets
            .iter()
            .flat_map(|n| {
                n.cells
                    .iter()
                    .flat_map(|&(a, b, c)| [a, b, c])
                    .chain([n.head_w, n.head_b, n.scale])
            })
            .collect()
    }
}

/// Records theta on `tape`, as leaves when `trainable`, else as constants.
pub fn theta_on_tape(tape: &mut Tape, theta: &MetaParams, trainable: bool) -> ThetaVars {
    let mut put = |t: &Tensor| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    ThetaVars {
        nets: theta
            .nets
            .iter()
            .map(|n| GateNetVars {
                cells: n.cells.iter().map(|c| (put(&c.wx), put(&c.wh), put(&c.b))).collect(),
                head_w: put(&n.head_w),
                head_b: put(&n.head_b),
                scale: put(&n.scale),
            })
            .collect(),
    }
}

/// Recurrent state living on a tape.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub nets: Vec<Vec<(Var, Var)>>,
}

impl StateVars {
    pub fn constant(tape: &mut Tape, state: &MetaState) -> Self {
        Self {
            nets: state
                .nets
                .iter()
                .map(|cells| {
                    cells
                        .iter()
                        .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn values(&self, tape: &Tape) -> MetaState {
        MetaState {
            nets: self
                .nets
                .iter()
                .map(|cells| {
                    cells
                        .iter()
                        .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
                        .collect()
                })
                .collect(),
        }
    }
}

fn lstm_cell(tape: &mut Tape, w: (Var, Var, Var), x: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let zx = tape.matmul(x, w.0)?;
    let zh = tape.matmul(h, w.1)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, w.2)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice_cols(z, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g)?;
    let o = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2)?;
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Gates for every gating network on `tape`. `inputs[k]` is the row batch of net `k`.
/// Returns `delta` per net (`[neurons, output_len]`) and the advanced state.
pub fn meta_forward_on_tape(
    tape: &mut Tape,
    theta: &MetaParams,
    vars: &ThetaVars,
    state: &StateVars,
    inputs: &[Tensor],
) -> Result<(Vec<Var>, StateVars)> {
    if inputs.len() != theta.nets.len() || state.nets.len() != theta.nets.len() {
        return Err(shape_err(
            "meta_forward",
            &[inputs.len(), state.nets.len()],
            &[theta.nets.len()],
        ));
    }
    let mut deltas = Vec::with_capacity(inputs.len());
    let mut next = Vec::with_capacity(inputs.len());
    for (k, net) in theta.nets.iter().enumerate() {
        let x = &inputs[k];
        if x.shape() != [net.neurons, net.input_len] {
            return Err(shape_err("meta_forward input", x.shape(), &[net.neurons, net.input_len]));
        }
        let nv = &vars.nets[k];
        let mut h_in = tape.constant(theta.prepare(k, x));
        let mut cells = Vec::with_capacity(net.cells.len());
        for (c, &w) in nv.cells.iter().enumerate() {
            let (h_prev, c_prev) = state.nets[k][c];
            if tape.shape(h_prev) != [net.neurons, net.hidden] {
                return Err(shape_err("meta_forward state", tape.shape(h_prev), &[net.neurons, net.hidden]));
            }
            let (h2, c2) = lstm_cell(tape, w, h_in, h_prev, c_prev, net.hidden)?;
            cells.push((h2, c2));
            h_in = tape.relu(h2)?;
        }
        let z = tape.matmul(h_in, nv.head_w)?;
        let z = tape.add_bias(z, nv.head_b)?;
        let t = tape.tanh(z)?;
        deltas.push(tape.scale_by(t, nv.scale)?);
        next.push(cells);
    }
    Ok((deltas, StateVars { nets: next }))
}

/// Value-only [`meta_forward_on_tape`].
pub fn meta_forward(theta: &MetaParams, state: &MetaState, inputs: &[Tensor]) -> Result<(Vec<Tensor>, MetaState)> {
    let mut tape = Tape::new();
    let vars = theta_on_tape(&mut tape, theta, false);
    let sv = StateVars::constant(&mut tape, state);
    let (d, s) = meta_forward_on_tape(&mut tape, theta, &vars, &sv, inputs)?;
    Ok((d.iter().map(|&v| tape.value(v).clone()).collect(), s.values(&tape)))
}

/// `w - alpha (delta * g)` on a tape; `delta` rows are reshaped to the weight's shape.
pub fn apply_gated_update_on_tape(tape: &mut Tape, w: Var, g: &Tensor, delta: Var, alpha: f64) -> Result<Var> {
    let shape = tape.shape(w).to_vec();
    if g.shape() != shape.as_slice() {
        return Err(shape_err("apply_gated_update", &shape, g.shape()));
    }
    let d = tape.reshape(delta, &shape)?;
    let gv = tape.constant(g.clone());
    let step = tape.mul(d, gv)?;
    let step = tape.scale(step, -alpha)?;
    tape.add(w, step)
}

/// `w - alpha (delta * g)`, with `delta` reshaped to `w`'s shape.
pub fn apply_gated_update(w: &Tensor, g: &Tensor, delta: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {alpha}")));
    }
    if w.shape() != g.shape() || delta.len() != w.len() {
        return Err(shape_err("apply_gated_update", w.shape(), delta.shape()));
    }
    if !w.is_finite() || !g.is_finite() || !delta.is_finite() {
        return Err(Error::NonFinite("gated update input".into()));
    }
    let data = w
        .data()
        .iter()
        .zip(g.data())
        .zip(delta.data())
        .map(|((w, g), d)| w - alpha * (d * g))
        .collect();
    Ok(Tensor::from_raw(w.shape().to_vec(), data))
}

/// Gating inputs for every gated tensor, in [`MetaParams::nets`] order.
pub fn assemble_all(
    theta: &MetaParams,
    params: &NetworkParams,
    record: &ForwardRecord,
    grads: &[Tensor],
) -> Result<Vec<Tensor>> {
    theta
        .nets
        .iter()
        .map(|n| assemble_inputs(params, n.slot, record, grads))
        .collect()
}

/// One full student update by the learned rule (values only). Classifier tensors take plain
/// SGD. Returns the new parameters, the gates and the advanced state.
pub fn gated_student_step(
    theta: &MetaParams,
    state: &MetaState,
    params: &NetworkParams,
    record: &ForwardRecord,
    grads: &[Tensor],
    alpha: f64,
) -> Result<(NetworkParams, Vec<Tensor>, MetaState)> {
    let inputs = assemble_all(theta, params, record, grads)?;
    let (deltas, next) = meta_forward(theta, state, &inputs)?;
    let mut out = params.clone();
    for (net, d) in theta.nets.iter().zip(&deltas) {
        out.tensors[net.slot] = apply_gated_update(&params.tensors[net.slot], &grads[net.slot], d, alpha)?;
    }
    for (i, slot) in params.slots().iter().enumerate() {
        if slot.kind.is_classifier() {
            out.tensors[i] = params.tensors[i].zip_map(&grads[i], |w, g| w - alpha * g)?;
        }
    }
    Ok((out, deltas, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_network, loss_and_grads, Architecture};

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            hidden_kernel: 6,
            hidden_norm: 3,
            cells: 3,
            normalize_inputs: false,
        }
    }

    #[test]
    fn paper_conv_dimensioning() {
        let slot = ParamSlot {
            layer: 0,
            kind: ParamKind::ConvWeight,
            shape: vec![16, 10, 3, 3],
        };
        assert_eq!(gate_dims(&slot).unwrap(), (191, 90));
        for cin in [1, 4, 64] {
            let slot = ParamSlot {
                layer: 0,
                kind: ParamKind::DenseWeight,
                shape: vec![8, cin],
            };
            assert_eq!(gate_dims(&slot).unwrap(), (3 * cin + 1, cin));
        }
        let gn = ParamSlot {
            layer: 1,
            kind: ParamKind::GroupNormGamma,
            shape: vec![8],
        };
        assert_eq!(gate_dims(&gn).unwrap(), (4, 1));
        let cls = ParamSlot {
            layer: 2,
            kind: ParamKind::ClassifierWeight,
            shape: vec![3, 8],
        };
        assert!(matches!(gate_dims(&cls), Err(Error::NoMetaNetwork(2))));
    }

    #[test]
    fn one_net_per_gated_tensor_and_none_for_classifier() {
        let p = build_network(&Architecture::small_conv(3, 5, 4), 0).unwrap();
        let theta = MetaParams::for_network(&p, &small_cfg(), 0).unwrap();
        let kinds: Vec<_> = theta.nets.iter().map(|n| n.kind).collect();
        use ParamKind::*;
        assert_eq!(
            kinds,
            [ConvWeight, GroupNormGamma, GroupNormBeta, ConvWeight, GroupNormGamma, GroupNormBeta]
        );
        assert_eq!(theta.nets[1].hidden, 3);
        assert_eq!(theta.nets[0].hidden, 6);
        assert!(theta.nets.iter().all(|n| n.head_w.data().iter().all(|&v| v == 0.0)));
        assert!(theta.nets.iter().all(|n| n.head_b.data().iter().all(|&v| v == 1.0)));
    }

    fn fixture() -> (NetworkParams, MetaParams, ForwardRecord, Vec<Tensor>) {
        let p = build_network(&Architecture::small_conv(2, 4, 3), 1).unwrap();
        let theta = MetaParams::for_network(&p, &small_cfg(), 2).unwrap();
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 13) % 7) as f64 - 3.0);
        let (_, grads, rec) = loss_and_grads(&p, &x, &[0, 1, 2]).unwrap();
        (p, theta, rec, grads)
    }

    #[test]
    fn assembled_shapes_match_gates() {
        let (p, theta, rec, grads) = fixture();
        let inputs = assemble_all(&theta, &p, &rec, &grads).unwrap();
        for (net, x) in theta.nets.iter().zip(&inputs) {
            assert_eq!(x.shape(), [net.neurons, net.input_len]);
        }
        let (deltas, _) = meta_forward(&theta, &reset_state(&theta), &inputs).unwrap();
        for (net, d) in theta.nets.iter().zip(&deltas) {
            assert_eq!(d.len(), p.tensors[net.slot].len());
        }
        let cls = p.slots().iter().position(|s| s.kind.is_classifier()).unwrap();
        assert!(assemble_inputs(&p, cls, &rec, &grads).is_err());
    }

    #[test]
    fn fresh_rule_gates_are_one() {
        let (p, theta, rec, grads) = fixture();
        let inputs = assemble_all(&theta, &p, &rec, &grads).unwrap();
        let (deltas, _) = meta_forward(&theta, &reset_state(&theta), &inputs).unwrap();
        for d in deltas {
            assert!(d.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn gates_bounded_by_scale() {
        let (p, mut theta, rec, grads) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in &mut theta.nets {
            n.head_w = Tensor::from_fn(n.head_w.shape(), |_| rng.random_range(-3.0..3.0));
            n.scale = Tensor::scalar(-2.0);
        }
        let inputs = assemble_all(&theta, &p, &rec, &grads).unwrap();
        let (deltas, s1) = meta_forward(&theta, &reset_state(&theta), &inputs).unwrap();
        assert!(deltas.iter().flat_map(|d| d.data()).all(|v| v.abs() < 2.0));
        let (again, s2) = meta_forward(&theta, &reset_state(&theta), &inputs).unwrap();
        assert_eq!(deltas, again);
        assert_eq!(s1, s2);
        assert_ne!(s1, reset_state(&theta));
    }

    #[test]
    fn reset_state_is_zero_and_sized() {
        let (_, theta, _, _) = fixture();
        let s = reset_state(&theta);
        for (net, cells) in theta.nets.iter().zip(&s.nets) {
            assert_eq!(cells.len(), 3);
            for (h, c) in cells {
                assert_eq!(h.shape(), [net.neurons, net.hidden]);
                assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn gated_update_cases() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let ones = Tensor::full(&[2, 2], 1.0);
        let sgd = w.zip_map(&g, |a, b| a - 0.1 * b).unwrap();
        assert_eq!(apply_gated_update(&w, &g, &ones, 0.1).unwrap(), sgd);
        assert_eq!(apply_gated_update(&w, &g, &Tensor::zeros(&[2, 2]), 0.1).unwrap(), w);
        let flip = Tensor::new(vec![2, 2], vec![-1.0, 1.0, 1.0, 1.0]).unwrap();
        let up = apply_gated_update(&w, &g, &flip, 0.1).unwrap();
        assert_eq!(up.data()[0], 1.0 + 0.1 * 0.5);
        assert!(apply_gated_update(&w, &g, &ones, 0.0).is_err());
    }

    #[test]
    fn normalization_keeps_fresh_rule_at_sgd() {
        let (p, _, rec, grads) = fixture();
        let mut theta = MetaParams::new(
            &p.slots(),
            &MetaConfig {
                normalize_inputs: true,
                ..small_cfg()
            },
            2,
        )
        .unwrap();
        let inputs = assemble_all(&theta, &p, &rec, &grads).unwrap();
        theta.observe_inputs(&inputs);
        let (deltas, _) = meta_forward(&theta, &reset_state(&theta), &inputs).unwrap();
        assert!(deltas.iter().flat_map(|d| d.data()).all(|v| (v - 1.0).abs() < 1e-15));
    }
}
