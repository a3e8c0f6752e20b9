//! Model architectures: construction, forward graphs, and local training.
//!
//! Each architecture maps a (channels × seq_len) segment to class logits:
//! a body (flatten, LSTM, GRU, or two 1-D conv layers) followed by the
//! shared head of two ReLU hidden layers and a K-way linear output.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::FeatureSegment;

use super::adam::AdamState;
use super::params::ParamSet;
use super::tape::{argmax_rows, cross_entropy_from_probs, softmax_rows, NodeId, Tape};
use super::tensor::Tensor;
use super::NnError;

/// Kernel width of both convolution layers.
pub const CONV_KERNEL: usize = 3;
/// Stride of both convolution layers.
pub const CONV_STRIDE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Gru,
    Cnn1d,
    Mlp,
}

impl Architecture {
    /// The three federated base learners, in the fixed order used for
    /// aggregation, metrics, and stacking.
    pub const BASE: [Architecture; 3] =
        [Architecture::Lstm, Architecture::Gru, Architecture::Cnn1d];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm => "lstm",
            Architecture::Gru => "gru",
            Architecture::Cnn1d => "cnn1d",
            Architecture::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to build and run one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_channels: usize,
    pub seq_len: usize,
    /// Width of recurrent state and of both head hidden layers.
    pub hidden: usize,
    pub n_classes: usize,
    /// Filters per convolution layer (CNN1D only).
    pub cnn_filters: usize,
    /// Dropout rate applied after each head hidden layer during training.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(
        architecture: Architecture,
        input_channels: usize,
        seq_len: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            architecture,
            input_channels,
            seq_len,
            hidden: 64,
            n_classes,
            cnn_filters: 32,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_channels == 0 || self.seq_len == 0 || self.hidden == 0 {
            return Err(NnError::InvalidSpec("channels, seq_len, hidden must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(NnError::InvalidSpec("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidSpec(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.architecture == Architecture::Cnn1d {
            if self.cnn_filters == 0 {
                return Err(NnError::InvalidSpec("cnn_filters must be >= 1".into()));
            }
            // Two valid convolutions must leave at least one output column.
            if self.seq_len < 2 * (CONV_KERNEL - 1) + 1 {
                return Err(NnError::InvalidSpec(format!(
                    "seq_len {} too short for two kernel-{CONV_KERNEL} convolutions",
                    self.seq_len
                )));
            }
        }
        Ok(())
    }

    fn conv_out(l: usize) -> usize {
        (l - CONV_KERNEL) / CONV_STRIDE + 1
    }

    /// Width of the body output feeding the shared head. The conv body mean-
    /// pools over time and appends the per-channel input means, so its width
    /// is filters + channels: position-free features keep parameter averaging
    /// across workers meaningful (a flattened conv output drifts apart per
    /// worker and degrades under aggregation), and the raw channel means give
    /// the head a filter-independent path that survives aggregation even
    /// while the conv stack is still converging.
    pub fn body_width(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => self.input_channels * self.seq_len,
            Architecture::Lstm | Architecture::Gru => self.hidden,
            Architecture::Cnn1d => self.cnn_filters + self.input_channels,
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Builds a freshly initialized parameter set: Glorot-uniform weights,
/// zero biases, LSTM forget-gate bias 1.0. Deterministic given the seed;
/// the entry order doubles as the checkpoint and aggregation layout.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (c, h, k) = (spec.input_channels, spec.hidden, spec.n_classes);

    match spec.architecture {
        Architecture::Mlp => {}
        Architecture::Lstm => {
            for gate in ["i", "f", "o", "g"] {
                p.push(format!("lstm.w_{gate}"), glorot(&mut rng, c, h, c, h));
                p.push(format!("lstm.u_{gate}"), glorot(&mut rng, h, h, h, h));
                let bias = if gate == "f" { 1.0 } else { 0.0 };
                p.push(format!("lstm.b_{gate}"), Tensor::filled(1, h, bias));
            }
        }
        Architecture::Gru => {
            for gate in ["z", "r", "h"] {
                p.push(format!("gru.w_{gate}"), glorot(&mut rng, c, h, c, h));
                p.push(format!("gru.u_{gate}"), glorot(&mut rng, h, h, h, h));
                p.push(format!("gru.b_{gate}"), Tensor::zeros(1, h));
            }
        }
        Architecture::Cnn1d => {
            let f = spec.cnn_filters;
            p.push("conv1.w", glorot(&mut rng, f, c * CONV_KERNEL, c * CONV_KERNEL, f));
            p.push("conv1.b", Tensor::zeros(1, f));
            p.push("conv2.w", glorot(&mut rng, f, f * CONV_KERNEL, f * CONV_KERNEL, f));
            p.push("conv2.b", Tensor::zeros(1, f));
        }
    }

    let body = spec.body_width();
    p.push("head.fc1.w", glorot(&mut rng, body, h, body, h));
    p.push("head.fc1.b", Tensor::zeros(1, h));
    p.push("head.fc2.w", glorot(&mut rng, h, h, h, h));
    p.push("head.fc2.b", Tensor::zeros(1, h));
    p.push("head.out.w", glorot(&mut rng, h, k, h, k));
    p.push("head.out.b", Tensor::zeros(1, k));
    Ok(p)
}

/// Parameter leaves on a tape, aligned with the ParamSet entry order.
pub(crate) struct ParamNodes {
    ids: Vec<NodeId>,
    names: Vec<String>,
}

impl ParamNodes {
    pub(crate) fn insert(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            ids.push(tape.leaf(t.clone()));
            names.push(name.to_string());
        }
        Self { ids, names }
    }

    fn node(&self, name: &str) -> NodeId {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from model"));
        self.ids[idx]
    }

    pub(crate) fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

fn dense(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Mean over time of a (batch × channels·len) channel-major node, giving
/// (batch × channels).
fn mean_over_time(
    tape: &mut Tape,
    x: NodeId,
    channels: usize,
    len: usize,
    batch: usize,
) -> Result<NodeId, NnError> {
    let mut sum = tape.col_select(x, (0..channels).map(|ch| ch * len).collect())?;
    for t in 1..len {
        let slice = tape.col_select(x, (0..channels).map(|ch| ch * len + t).collect())?;
        sum = tape.add(sum, slice)?;
    }
    let inv = 1.0 / len as f64;
    // Constant elementwise mask: reuses the masking op as a fixed scale.
    let scale = Tensor::from_vec(batch, channels, vec![inv; batch * channels]);
    tape.dropout(sum, scale)
}

/// One gate preactivation: x·W + h·U + b.
fn gate_pre(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    w: NodeId,
    u: NodeId,
    b: NodeId,
) -> Result<NodeId, NnError> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_bias(s, b)
}

/// Builds the logits graph for a batch input node of shape
/// (batch × channels·seq_len). When `dropout_rng` is given and the spec's
/// rate is positive, inverted-dropout masks are applied after each head
/// hidden layer (training mode).
pub(crate) fn forward_logits(
    tape: &mut Tape,
    spec: &ModelSpec,
    pn: &ParamNodes,
    x: NodeId,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, NnError> {
    let (c, l, h) = (spec.input_channels, spec.seq_len, spec.hidden);
    let batch = tape.value(x).rows();
    if tape.value(x).cols() != c * l {
        return Err(NnError::ShapeMismatch(format!(
            "input {:?} for spec with {c} channels x {l} steps",
            tape.value(x).shape()
        )));
    }

    let body = match spec.architecture {
        Architecture::Mlp => x,
        Architecture::Lstm => {
            let mut h_t = tape.leaf(Tensor::zeros(batch, h));
            let mut c_t = tape.leaf(Tensor::zeros(batch, h));
            for t in 0..l {
                let cols: Vec<usize> = (0..c).map(|ch| ch * l + t).collect();
                let x_t = tape.col_select(x, cols)?;
                let i_pre = gate_pre(
                    tape,
                    x_t,
                    h_t,
                    pn.node("lstm.w_i"),
                    pn.node("lstm.u_i"),
                    pn.node("lstm.b_i"),
                )?;
                let f_pre = gate_pre(
                    tape,
                    x_t,
                    h_t,
                    pn.node("lstm.w_f"),
                    pn.node("lstm.u_f"),
                    pn.node("lstm.b_f"),
                )?;
                let o_pre = gate_pre(
                    tape,
                    x_t,
                    h_t,
                    pn.node("lstm.w_o"),
                    pn.node("lstm.u_o"),
                    pn.node("lstm.b_o"),
                )?;
                let g_pre = gate_pre(
                    tape,
                    x_t,
                    h_t,
                    pn.node("lstm.w_g"),
                    pn.node("lstm.u_g"),
                    pn.node("lstm.b_g"),
                )?;
                let i = tape.sigmoid(i_pre);
                let f = tape.sigmoid(f_pre);
                let o = tape.sigmoid(o_pre);
                let g = tape.tanh(g_pre);
                let fc = tape.mul(f, c_t)?;
                let ig = tape.mul(i, g)?;
                c_t = tape.add(fc, ig)?;
                let c_act = tape.tanh(c_t);
                h_t = tape.mul(o, c_act)?;
            }
            h_t
        }
        Architecture::Gru => {
            let mut h_t = tape.leaf(Tensor::zeros(batch, h));
            for t in 0..l {
                let cols: Vec<usize> = (0..c).map(|ch| ch * l + t).collect();
                let x_t = tape.col_select(x, cols)?;
                let z_pre = gate_pre(
                    tape,
                    x_t,
                    h_t,
                    pn.node("gru.w_z"),
                    pn.node("gru.u_z"),
                    pn.node("gru.b_z"),
                )?;
                let r_pre = gate_pre(
                    tape,
                    x_t,
                    h_t,
                    pn.node("gru.w_r"),
                    pn.node("gru.u_r"),
                    pn.node("gru.b_r"),
                )?;
                let z = tape.sigmoid(z_pre);
                let r = tape.sigmoid(r_pre);
                let rh = tape.mul(r, h_t)?;
                let cand_pre = gate_pre(
                    tape,
                    x_t,
                    rh,
                    pn.node("gru.w_h"),
                    pn.node("gru.u_h"),
                    pn.node("gru.b_h"),
                )?;
                let cand = tape.tanh(cand_pre);
                // h_t = (1 - z) ⊙ h_prev + z ⊙ cand, written h + z ⊙ (cand - h).
                let diff = tape.sub(cand, h_t)?;
                let step = tape.mul(z, diff)?;
                h_t = tape.add(h_t, step)?;
            }
            h_t
        }
        Architecture::Cnn1d => {
            let l1 = ModelSpec::conv_out(l);
            let y1 = tape.conv1d(
                x,
                pn.node("conv1.w"),
                pn.node("conv1.b"),
                c,
                l,
                CONV_KERNEL,
                CONV_STRIDE,
            )?;
            let y1 = tape.tanh(y1);
            let y2 = tape.conv1d(
                y1,
                pn.node("conv2.w"),
                pn.node("conv2.b"),
                spec.cnn_filters,
                l1,
                CONV_KERNEL,
                CONV_STRIDE,
            )?;
            let y2 = tape.tanh(y2);
            // Mean-pool each filter over its output positions, then append
            // the per-channel input means (see body_width).
            let l2 = ModelSpec::conv_out(l1);
            let pooled = mean_over_time(tape, y2, spec.cnn_filters, l2, batch)?;
            let channel_means = mean_over_time(tape, x, c, l, batch)?;
            tape.concat_cols(pooled, channel_means)?
        }
    };

    let apply_dropout = |tape: &mut Tape, node: NodeId, rng: &mut Option<&mut ChaCha8Rng>| match rng
    {
        Some(rng) if spec.dropout > 0.0 => {
            let keep = 1.0 - spec.dropout;
            let shape = tape.value(node).shape();
            let mask_data: Vec<f64> = (0..shape.0 * shape.1)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.dropout(node, Tensor::from_vec(shape.0, shape.1, mask_data))
        }
        _ => Ok(node),
    };

    let h1 = dense(tape, body, pn.node("head.fc1.w"), pn.node("head.fc1.b"))?;
    let h1 = tape.relu(h1);
    let h1 = apply_dropout(tape, h1, &mut dropout_rng)?;
    let h2 = dense(tape, h1, pn.node("head.fc2.w"), pn.node("head.fc2.b"))?;
    let h2 = tape.relu(h2);
    let h2 = apply_dropout(tape, h2, &mut dropout_rng)?;
    dense(tape, h2, pn.node("head.out.w"), pn.node("head.out.b"))
}

/// Packs segments into a (batch × channels·seq_len) input tensor plus the
/// aligned class indices.
pub(crate) fn batch_tensor(
    segments: &[FeatureSegment],
    idx: &[usize],
    spec: &ModelSpec,
) -> Result<(Tensor, Vec<usize>), NnError> {
    let (c, l) = (spec.input_channels, spec.seq_len);
    let mut data = Vec::with_capacity(idx.len() * c * l);
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        let seg = &segments[i];
        if seg.n_channels() != c || seg.seq_len() != l {
            return Err(NnError::ShapeMismatch(format!(
                "segment {}x{} for spec {c}x{l}",
                seg.n_channels(),
                seg.seq_len()
            )));
        }
        if seg.label().index >= spec.n_classes {
            return Err(NnError::ShapeMismatch(format!(
                "label index {} out of range for {} classes",
                seg.label().index,
                spec.n_classes
            )));
        }
        data.extend_from_slice(seg.data());
        targets.push(seg.label().index);
    }
    Ok((Tensor::from_vec(idx.len(), c * l, data), targets))
}

/// Class-probability rows for a batch of segments (inference mode: no
/// dropout). Rows sum to 1.
pub fn forward_model(
    params: &ParamSet,
    spec: &ModelSpec,
    segments: &[FeatureSegment],
) -> Result<Tensor, NnError> {
    let idx: Vec<usize> = (0..segments.len()).collect();
    let (x, _) = batch_tensor(segments, &idx, spec)?;
    let mut tape = Tape::new();
    let xi = tape.leaf(x);
    let pn = ParamNodes::insert(&mut tape, params);
    let logits = forward_logits(&mut tape, spec, &pn, xi, None)?;
    let probs = softmax_rows(tape.value(logits));
    if !probs.all_finite() {
        return Err(NnError::NumericalError("non-finite class probabilities".into()));
    }
    Ok(probs)
}

/// Mini-batch Adam for `epochs` passes over `data` with per-epoch seeded
/// reshuffling; the final partial batch is included. Returns the updated
/// parameters and the sample count used for federated weighting.
pub fn train_local(
    params: &ParamSet,
    spec: &ModelSpec,
    data: &[FeatureSegment],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(ParamSet, usize), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(NnError::InvalidSpec("batch_size must be >= 1".into()));
    }
    let n = data.len();
    let mut p = params.clone();
    let mut adam = AdamState::new(&p, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let (x, targets) = batch_tensor(data, chunk, spec)?;
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let pn = ParamNodes::insert(&mut tape, &p);
            let logits = forward_logits(&mut tape, spec, &pn, xi, Some(&mut rng))?;
            let loss = tape.softmax_xent(logits, targets)?;
            let loss_val = tape.value(loss).get(0, 0);
            if !loss_val.is_finite() {
                return Err(NnError::NumericalError(format!("loss diverged to {loss_val}")));
            }
            let grads = tape.backward(loss);
            let grad_vec: Vec<Tensor> = pn
                .ids()
                .iter()
                .zip(p.tensors())
                .map(|(&id, t)| {
                    grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
                })
                .collect();
            adam.step(&mut p, &grad_vec)?;
        }
    }
    Ok((p, n))
}

/// Accuracy and mean cross-entropy of a model over segments, evaluated in
/// bounded-size batches.
pub fn evaluate(
    params: &ParamSet,
    spec: &ModelSpec,
    segments: &[FeatureSegment],
) -> Result<(f64, f64), NnError> {
    if segments.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in segments.chunks(512) {
        let probs = forward_model(params, spec, chunk)?;
        let preds = argmax_rows(&probs);
        let targets: Vec<usize> = chunk.iter().map(|s| s.label().index).collect();
        correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
        loss_sum += cross_entropy_from_probs(&probs, &targets)? * chunk.len() as f64;
    }
    let n = segments.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}
