//! Windowed conv encoder, bidirectional LSTM, additive attention and a
//! two-layer softmax classifier.
//!
//! Every window (`components × window_len`) passes through three valid
//! convolutions and a dense projection to a latent vector. The latent
//! sequence runs through a biLSTM; attention pools the per-step outputs into
//! one context vector that the classifier maps to class probabilities.
//!
//! Dense weights are stored `in × out` so a row vector multiplies on the left.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Parameters of the output layer, reinitialized when fine-tuning.
pub const HEAD_OUTPUT_PARAMS: [&str; 2] = ["head2.bias", "head2.weight"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub components: usize,
    pub window_len: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub encoder_dim: usize,
    pub lstm_hidden: usize,
    pub attention_dim: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            components: 53,
            window_len: 20,
            conv_channels: [64, 128, 200],
            conv_kernels: [4, 4, 3],
            encoder_dim: 256,
            lstm_hidden: 200,
            attention_dim: 128,
            head_hidden: 200,
            n_classes: 2,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    /// Time steps left after each convolution.
    pub fn conv_lengths(&self) -> [usize; 3] {
        let mut len = self.window_len;
        let mut out = [0; 3];
        for (i, &k) in self.conv_kernels.iter().enumerate() {
            len = len.saturating_sub(k.saturating_sub(1));
            out[i] = len;
        }
        out
    }

    /// Length of the flattened conv output fed to the encoder projection.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels[2] * self.conv_lengths()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.components,
            self.window_len,
            self.encoder_dim,
            self.lstm_hidden,
            self.attention_dim,
            self.head_hidden,
        ];
        if dims.contains(&0)
            || self.conv_channels.contains(&0)
            || self.conv_kernels.contains(&0)
        {
            return Err(Error::InvalidConfig("all model dimensions must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        let shrink: usize = self.conv_kernels.iter().map(|k| k - 1).sum();
        if self.window_len <= shrink {
            return Err(Error::InvalidConfig(format!(
                "window_len {} leaves no time steps after kernels {:?}",
                self.window_len, self.conv_kernels
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor, in canonical name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = BTreeMap::new();
        let mut c_in = self.components;
        for i in 0..3 {
            let c_out = self.conv_channels[i];
            shapes.insert(format!("conv{}.weight", i + 1), vec![c_out, c_in, self.conv_kernels[i]]);
            shapes.insert(format!("conv{}.bias", i + 1), vec![c_out]);
            c_in = c_out;
        }
        shapes.insert("encoder.weight".into(), vec![self.flat_dim(), self.encoder_dim]);
        shapes.insert("encoder.bias".into(), vec![self.encoder_dim]);
        let h = self.lstm_hidden;
        for dir in ["lstm_fwd", "lstm_bwd"] {
            shapes.insert(format!("{dir}.w_ih"), vec![self.encoder_dim, 4 * h]);
            shapes.insert(format!("{dir}.w_hh"), vec![h, 4 * h]);
            shapes.insert(format!("{dir}.bias"), vec![4 * h]);
        }
        shapes.insert("attention.w".into(), vec![2 * h, self.attention_dim]);
        shapes.insert("attention.v".into(), vec![self.attention_dim]);
        shapes.insert("head1.weight".into(), vec![2 * h, self.head_hidden]);
        shapes.insert("head1.bias".into(), vec![self.head_hidden]);
        shapes.insert("head2.weight".into(), vec![self.head_hidden, self.n_classes]);
        shapes.insert("head2.bias".into(), vec![self.n_classes]);
        shapes.into_iter().collect()
    }

    /// Canonical `key=value` text form, one key per line.
    pub fn to_canonical_text(&self) -> String {
        let join = |a: &[usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let mut s = String::new();
        let _ = writeln!(s, "components={}", self.components);
        let _ = writeln!(s, "window_len={}", self.window_len);
        let _ = writeln!(s, "conv_channels={}", join(&self.conv_channels));
        let _ = writeln!(s, "conv_kernels={}", join(&self.conv_kernels));
        let _ = writeln!(s, "encoder_dim={}", self.encoder_dim);
        let _ = writeln!(s, "lstm_hidden={}", self.lstm_hidden);
        let _ = writeln!(s, "attention_dim={}", self.attention_dim);
        let _ = writeln!(s, "head_hidden={}", self.head_hidden);
        let _ = writeln!(s, "n_classes={}", self.n_classes);
        let _ = writeln!(s, "leaky_slope={}", self.leaky_slope);
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(format!("model config: {m}"));
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("key {k} is not an integer")))
        };
        let triple = |k: &str| -> Result<[usize; 3]> {
            let parts: Vec<usize> = get(k)?
                .split(',')
                .map(|p| p.parse().map_err(|_| bad(format!("key {k} has a bad entry"))))
                .collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| bad(format!("key {k} needs three entries")))
        };
        let cfg = ModelConfig {
            components: num("components")?,
            window_len: num("window_len")?,
            conv_channels: triple("conv_channels")?,
            conv_kernels: triple("conv_kernels")?,
            encoder_dim: num("encoder_dim")?,
            lstm_hidden: num("lstm_hidden")?,
            attention_dim: num("attention_dim")?,
            head_hidden: num("head_hidden")?,
            n_classes: num("n_classes")?,
            leaky_slope: get("leaky_slope")?
                .parse()
                .map_err(|_| bad("leaky_slope is not a float".into()))?,
        };
        if kv.len() != 10 {
            return Err(bad(format!("expected 10 keys, found {}", kv.len())));
        }
        Ok(cfg)
    }
}

/// Total scalar parameter count implied by `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .param_shapes()
        .iter()
        .map(|(_, d)| d.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        ModelParams {
            tensors: config
                .param_shapes()
                .into_iter()
                .map(|(n, d)| (n, Tensor::zeros(&d)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Checks names and shapes against `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let shapes = config.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, dims) in shapes {
            match self.tensors.get(&name) {
                Some(t) if t.dims() == dims.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has dims {:?}, expected {dims:?}",
                        t.dims()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v)))
                .collect(),
        }
    }

    /// Adds the gradients collected on `tape` into each tensor's buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) {
        for (name, var) in &bound.vars {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), tape.grad(*var)) {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Parameter handles on a tape, by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        BoundParams {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn xavier_bound(name: &str, dims: &[usize]) -> f64 {
    let (fan_in, fan_out) = match dims {
        [c_out, c_in, k] => (c_in * k, c_out * k),
        [i, o] => (*i, *o),
        // attention score vector, a column of height `n`
        [n] if name == "attention.v" => (*n, 1),
        _ => (1, 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

fn init_tensor<T: Scalar>(name: &str, dims: &[usize], hidden: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(dims);
    if is_bias(name) {
        if name.starts_with("lstm_") {
            // gate order i, f, g, o
            t.values_mut()[hidden..2 * hidden]
                .iter_mut()
                .for_each(|v| *v = T::one());
        }
    } else {
        let a = xavier_bound(name, dims);
        for v in t.values_mut() {
            *v = T::lit(rng.gen_range(-a..a));
        }
    }
    t
}

/// Xavier-uniform weights, zero biases, LSTM forget-gate bias 1.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|(name, dims)| {
            let t = init_tensor(&name, &dims, config.lstm_hidden, &mut rng);
            (name, t)
        })
        .collect();
    Ok(ModelParams { tensors })
}

/// Redraws only the output layer from a stream derived from `seed`.
pub fn reinit_output_layer<T: Scalar>(params: &mut ModelParams<T>, config: &ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &[0x4845_4144]));
    for name in HEAD_OUTPUT_PARAMS {
        if let Some(t) = params.tensors.get_mut(name) {
            let dims = t.dims().to_vec();
            *t = init_tensor(name, &dims, config.lstm_hidden, &mut rng);
        }
    }
}

// ---------------------------------------------------------------------------
// graph builders

/// One window through the conv stack and the dense projection: `[encoder_dim]`.
pub fn encoder_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    window: Var,
) -> Result<Var> {
    let flat = conv_stack(tape, p, config, window)?;
    let row = tape.reshape(flat, vec![1, config.flat_dim()])?;
    let z = project_rows(tape, p, config, row)?;
    tape.reshape(z, vec![config.encoder_dim])
}

fn conv_stack<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    window: Var,
) -> Result<Var> {
    let expect = [config.components, config.window_len];
    if tape.dims(window) != expect {
        return Err(Error::shape(
            "encoder",
            format!("window dims {:?}, expected {expect:?}", tape.dims(window)),
        ));
    }
    let slope = T::lit(config.leaky_slope);
    let mut h = window;
    for i in 1..=3 {
        let w = p.var(&format!("conv{i}.weight"))?;
        let b = p.var(&format!("conv{i}.bias"))?;
        h = tape.conv1d(h, w, b, 1)?;
        h = tape.leaky_relu(h, slope);
    }
    tape.reshape(h, vec![config.flat_dim()])
}

fn project_rows<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    rows: Var,
) -> Result<Var> {
    let z = tape.matmul(rows, p.var("encoder.weight")?)?;
    let z = tape.add_row(z, p.var("encoder.bias")?)?;
    Ok(tape.leaky_relu(z, T::lit(config.leaky_slope)))
}

/// All windows of a sample: `[T_w × encoder_dim]`. Row `t` is bit-identical
/// to [`encoder_graph`] on window `t`.
pub fn encode_windows_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    windows: &[Var],
) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::shape("encoder", "sample has no windows"));
    }
    let flats = windows
        .iter()
        .map(|&w| conv_stack(tape, p, config, w))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&flats)?;
    let rows = tape.reshape(stacked, vec![windows.len(), config.flat_dim()])?;
    project_rows(tape, p, config, rows)
}

// Latent rows are time-major: row `t·batch + b` is step `t` of sample `b`.
// Returns one `[batch × hidden]` state per step, indexed by time.
fn lstm_direction<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    hidden: usize,
    prefix: &str,
    latents: Var,
    batch: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let steps = tape.dims(latents)[0] / batch;
    let xw = tape.matmul(latents, p.var(&format!("{prefix}.w_ih"))?)?;
    let xw = tape.add_row(xw, p.var(&format!("{prefix}.bias"))?)?;
    let w_hh = p.var(&format!("{prefix}.w_hh"))?;
    let mut out: Vec<Option<Var>> = vec![None; steps];
    let mut state: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let mut gates = tape.slice(xw, t * batch * 4 * hidden, vec![batch, 4 * hidden])?;
        if let Some((h, _)) = state {
            let rec = tape.matmul(h, w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let gi = tape.slice_cols(gates, 0, hidden)?;
        let gf = tape.slice_cols(gates, hidden, hidden)?;
        let gg = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let go = tape.slice_cols(gates, 3 * hidden, hidden)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let ig = tape.mul(i, g)?;
        // zero initial cell state: c_1 = i ⊙ g
        let c = match state {
            Some((_, c_prev)) => {
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        out[t] = Some(h);
        state = Some((h, c));
    }
    Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
}

// Both directions over time-major rows; `[(T·batch) × 2·hidden]`, same row order.
fn bilstm_rows<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    latents: Var,
    batch: usize,
) -> Result<Var> {
    let dims = tape.dims(latents).to_vec();
    if dims.len() != 2 || dims[1] != config.encoder_dim || dims[0] == 0 || !dims[0].is_multiple_of(batch) {
        return Err(Error::shape(
            "bilstm",
            format!("latents {dims:?}, expected [T·{batch}, {}]", config.encoder_dim),
        ));
    }
    let h = config.lstm_hidden;
    let mut halves = Vec::with_capacity(2);
    for (prefix, reverse) in [("lstm_fwd", false), ("lstm_bwd", true)] {
        let states = lstm_direction(tape, p, h, prefix, latents, batch, reverse)?;
        let flat = tape.concat(&states)?;
        halves.push(tape.reshape(flat, vec![dims[0], h])?);
    }
    tape.concat_cols(&halves)
}

/// Bidirectional LSTM over `[T_w × encoder_dim]`, returning
/// `[T_w × 2·hidden]` rows of `[forward_h ; backward_h]`.
pub fn bilstm_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    latents: Var,
) -> Result<Var> {
    bilstm_rows(tape, p, config, latents, 1)
}

/// Additive attention pooling; returns `(context [2·hidden], weights [T_w])`.
pub fn attention_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    h_seq: Var,
) -> Result<(Var, Var)> {
    let dims = tape.dims(h_seq).to_vec();
    let width = 2 * config.lstm_hidden;
    if dims.len() != 2 || dims[1] != width {
        return Err(Error::shape(
            "attention",
            format!("sequence {dims:?}, expected [T, {width}]"),
        ));
    }
    let steps = dims[0];
    let u = tape.matmul(h_seq, p.var("attention.w")?)?;
    let u = tape.tanh(u);
    let v = tape.reshape(p.var("attention.v")?, vec![config.attention_dim, 1])?;
    let scores = tape.matmul(u, v)?;
    let scores = tape.reshape(scores, vec![steps])?;
    let alpha = tape.softmax(scores);
    let alpha_row = tape.reshape(alpha, vec![1, steps])?;
    let c = tape.matmul(alpha_row, h_seq)?;
    let c = tape.reshape(c, vec![width])?;
    Ok((c, alpha))
}

/// Two dense layers on the context vector; returns unnormalized scores.
pub fn classifier_logits_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    context: Var,
) -> Result<Var> {
    let width = 2 * config.lstm_hidden;
    if tape.value(context).len() != width {
        return Err(Error::shape(
            "classifier",
            format!("context has {} entries, expected {width}", tape.value(context).len()),
        ));
    }
    let x = tape.reshape(context, vec![1, width])?;
    let x = tape.matmul(x, p.var("head1.weight")?)?;
    let x = tape.add_row(x, p.var("head1.bias")?)?;
    let x = tape.leaky_relu(x, T::lit(config.leaky_slope));
    let x = tape.matmul(x, p.var("head2.weight")?)?;
    let x = tape.add_row(x, p.var("head2.bias")?)?;
    tape.reshape(x, vec![config.n_classes])
}

/// Full pipeline up to the logits.
pub fn model_logits_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    windows: &[Tensor<T>],
) -> Result<Var> {
    Ok(batch_logits_graph(tape, p, config, &[windows])?[0])
}

/// Logits for several samples with equal window counts in one graph, so
/// the recurrent and dense layers run as matrix products over the batch.
/// Each sample's logits are bit-identical to [`model_logits_graph`] on it alone.
pub fn batch_logits_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    samples: &[&[Tensor<T>]],
) -> Result<Vec<Var>> {
    let batch = samples.len();
    let Some(first) = samples.first() else {
        return Err(Error::shape("model", "empty batch"));
    };
    let steps = first.len();
    if steps == 0 {
        return Err(Error::shape("encoder", "sample has no windows"));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != steps) {
        return Err(Error::shape(
            "model",
            format!("batch mixes {steps} and {} windows per sample", bad.len()),
        ));
    }
    let mut vars = Vec::with_capacity(batch * steps);
    for t in 0..steps {
        for s in samples {
            vars.push(tape.constant(&s[t]));
        }
    }
    let z = encode_windows_graph(tape, p, config, &vars)?;
    let h = bilstm_rows(tape, p, config, z, batch)?;
    let mut logits = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows: Vec<usize> = (0..steps).map(|t| t * batch + b).collect();
        let seq = if batch == 1 { h } else { tape.gather_rows(h, &rows)? };
        let (c, _) = attention_graph(tape, p, config, seq)?;
        logits.push(classifier_logits_graph(tape, p, config, c)?);
    }
    Ok(logits)
}

/// Mean cross-entropy over `(windows, label)` pairs; also returns each
/// sample's logits.
pub fn batch_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    config: &ModelConfig,
    samples: &[(&[Tensor<T>], usize)],
) -> Result<(Var, Vec<Var>)> {
    let windows: Vec<&[Tensor<T>]> = samples.iter().map(|s| s.0).collect();
    let logits = batch_logits_graph(tape, p, config, &windows)?;
    let losses = logits
        .iter()
        .zip(samples)
        .map(|(&l, &(_, label))| tape.softmax_cross_entropy(l, label))
        .collect::<Result<Vec<_>>>()?;
    let n = losses.len();
    let all = tape.concat(&losses)?;
    let scale = tape.constant_from(vec![n], vec![T::one() / T::lit(n as f64); n])?;
    let weighted = tape.mul(all, scale)?;
    Ok((tape.sum(weighted), logits))
}

// ---------------------------------------------------------------------------
// eager wrappers

pub fn encoder_forward<T: Scalar>(
    window: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let w = tape.constant(window);
    let z = encoder_graph(&mut tape, &p, config, w)?;
    Ok(tape.tensor(z))
}

pub fn bilstm_forward<T: Scalar>(
    latents: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let z = tape.constant(latents);
    let h = bilstm_graph(&mut tape, &p, config, z)?;
    Ok(tape.tensor(h))
}

/// Returns the context vector and the attention weights.
pub fn attention_forward<T: Scalar>(
    h_seq: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let h = tape.constant(h_seq);
    let (c, a) = attention_graph(&mut tape, &p, config, h)?;
    Ok((tape.tensor(c), tape.tensor(a)))
}

pub fn classifier_forward<T: Scalar>(
    context: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let c = tape.constant(context);
    let logits = classifier_logits_graph(&mut tape, &p, config, c)?;
    let probs = tape.softmax(logits);
    Ok(tape.tensor(probs))
}

/// Class probabilities for one windowed sample.
pub fn model_forward<T: Scalar>(
    windows: &[Tensor<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let logits = model_logits_graph(&mut tape, &p, config, windows)?;
    let probs = tape.softmax(logits);
    Ok(tape.tensor(probs))
}

/// Loss and parameter gradients for one labelled sample.
pub fn loss_and_grads<T: Scalar>(
    windows: &[Tensor<T>],
    label: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(T, BTreeMap<String, Vec<T>>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let logits = model_logits_graph(&mut tape, &p, config, windows)?;
    let loss = tape.softmax_cross_entropy(logits, label)?;
    tape.backward(loss)?;
    let grads = p
        .iter()
        .map(|(name, v)| {
            let g = tape.grad(*v).expect("bound params are trainable").to_vec();
            (name.clone(), g)
        })
        .collect();
    Ok((tape.value(loss)[0], grads))
}

/// Finite-difference check of every parameter tensor of the full model on
/// one random sample, at `f64`. Returns the maximum relative error.
pub fn model_gradient_check(
    config: &ModelConfig,
    n_windows: usize,
    opts: &crate::tensor::gradcheck::FdOptions,
) -> Result<f64> {
    use crate::tensor::gradcheck::finite_difference_check;
    let params = init_params::<f64>(config, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(opts.seed, &[1]));
    let windows: Vec<Tensor<f64>> = (0..n_windows)
        .map(|_| {
            let n = config.components * config.window_len;
            let v = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::new(vec![config.components, config.window_len], v).expect("valid dims")
        })
        .collect();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor<f64>> = params.into_map().into_values().collect();
    finite_difference_check(
        |tape, vars| {
            let bound = BoundParams::from_vars(names.iter().cloned(), vars);
            let logits = model_logits_graph(tape, &bound, config, &windows)?;
            tape.softmax_cross_entropy(logits, 1)
        },
        &tensors,
        opts,
    )
}
