//! Minimal neural-network substrate: a configurable MLP classifier,
//! cross-entropy loss with exact analytic gradients, and mini-batch SGD
//! with momentum. Everything is `f64` and deterministic given its RNG
//! stream.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::params::{Layout, ParamVector, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of the MLP classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct LayerDims {
    inp: usize,
    out: usize,
    w_off: usize,
    b_off: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_layers,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(SimError::config("model.input_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(SimError::config("model.num_classes", "must be at least 2"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(SimError::config("model.hidden_layers", "must be positive"));
        }
        Ok(())
    }

    /// Layer widths including input and output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.num_classes);
        dims
    }

    /// Packed layout: per layer a `(out x in)` weight block then an `out`
    /// bias block.
    pub fn layout(&self) -> Layout {
        let dims = self.dims();
        let mut shapes = Vec::new();
        for win in dims.windows(2) {
            shapes.push(TensorShape {
                rows: win[1],
                cols: win[0],
            });
            shapes.push(TensorShape {
                rows: win[1],
                cols: 1,
            });
        }
        Layout::new(shapes)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total_len()
    }

    fn layer_dims(&self) -> Vec<LayerDims> {
        let dims = self.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for win in dims.windows(2) {
            let (inp, out) = (win[0], win[1]);
            layers.push(LayerDims {
                inp,
                out,
                w_off: offset,
                b_off: offset + inp * out,
            });
            offset += inp * out + out;
        }
        layers
    }

    fn check_model(&self, model: &ParamVector) -> Result<()> {
        if *model.layout() != self.layout() {
            return Err(SimError::config(
                "model",
                "parameter layout does not match the model spec",
            ));
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`+/- sqrt(6/(fan_in+fan_out))`), zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut model = ParamVector::zeros(spec.layout());
    for layer in spec.layer_dims() {
        let bound = (6.0 / (layer.inp + layer.out) as f64).sqrt();
        let values = model.values_mut();
        for i in 0..layer.inp * layer.out {
            let u: f64 = rng.random();
            values[layer.w_off + i] = bound * (2.0 * u - 1.0);
        }
    }
    model
}

// z = x * W^T + b for a batch of rows.
fn affine(
    x: &[f64],
    rows: usize,
    layer: &LayerDims,
    params: &[f64],
    z: &mut Vec<f64>,
) {
    z.clear();
    z.resize(rows * layer.out, 0.0);
    for r in 0..rows {
        let xr = &x[r * layer.inp..(r + 1) * layer.inp];
        let zr = &mut z[r * layer.out..(r + 1) * layer.out];
        for (o, zv) in zr.iter_mut().enumerate() {
            let w = &params[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
            let mut acc = params[layer.b_off + o];
            for (xi, wi) in xr.iter().zip(w) {
                acc += xi * wi;
            }
            *zv = acc;
        }
    }
}

struct ForwardPass {
    // Post-activation outputs per hidden layer, batch-major.
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward_pass(model: &ParamVector, spec: &ModelSpec, x: &[f64], rows: usize) -> ForwardPass {
    let layers = spec.layer_dims();
    let params = model.values();
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(layers.len().saturating_sub(1));
    let mut current: &[f64] = x;
    let mut z = Vec::new();
    for (idx, layer) in layers.iter().enumerate() {
        affine(current, rows, layer, params, &mut z);
        if idx + 1 < layers.len() {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            hidden.push(std::mem::take(&mut z));
            current = hidden.last().unwrap();
        }
    }
    ForwardPass { hidden, logits: z }
}

// Row-wise stable log-sum-exp.
fn log_sum_exp_rows(logits: &[f64], rows: usize, classes: usize) -> Vec<f64> {
    let mut lse = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        lse.push(max + sum.ln());
    }
    lse
}

// Convert logits to probabilities in place given their log-sum-exp.
fn to_probs(logits: &mut [f64], lse: &[f64], rows: usize, classes: usize) {
    for r in 0..rows {
        let row = &mut logits[r * classes..(r + 1) * classes];
        for z in row.iter_mut() {
            *z = (*z - lse[r]).exp();
        }
    }
}

/// Class probabilities for a batch (row-major, one row per sample).
pub fn forward(model: &ParamVector, spec: &ModelSpec, batch_x: &[f64]) -> Result<Vec<f64>> {
    spec.check_model(model)?;
    if batch_x.is_empty() || !batch_x.len().is_multiple_of(spec.input_dim) {
        return Err(SimError::config(
            "batch",
            format!(
                "feature length {} is not a multiple of input_dim {}",
                batch_x.len(),
                spec.input_dim
            ),
        ));
    }
    let rows = batch_x.len() / spec.input_dim;
    let mut pass = forward_pass(model, spec, batch_x, rows);
    let lse = log_sum_exp_rows(&pass.logits, rows, spec.num_classes);
    to_probs(&mut pass.logits, &lse, rows, spec.num_classes);
    Ok(pass.logits)
}

/// Mean cross-entropy over the batch and its exact analytic gradient.
pub fn loss_and_grad(
    model: &ParamVector,
    spec: &ModelSpec,
    batch_x: &[f64],
    batch_y: &[u8],
) -> Result<(f64, ParamVector)> {
    spec.check_model(model)?;
    if batch_y.is_empty() {
        return Err(SimError::Data("empty batch".into()));
    }
    if batch_x.len() != batch_y.len() * spec.input_dim {
        return Err(SimError::config(
            "batch",
            "feature rows do not match label count",
        ));
    }
    if let Some(&bad) = batch_y.iter().find(|&&y| y as usize >= spec.num_classes) {
        return Err(SimError::Data(format!(
            "label {bad} out of range 0..{}",
            spec.num_classes
        )));
    }

    let rows = batch_y.len();
    let classes = spec.num_classes;
    let layers = spec.layer_dims();
    let params = model.values();

    let mut pass = forward_pass(model, spec, batch_x, rows);
    let lse = log_sum_exp_rows(&pass.logits, rows, classes);

    // loss_i = lse_i - z_{y_i}, straight from the logits.
    let mut loss = 0.0;
    for (r, (&y, &row_lse)) in batch_y.iter().zip(&lse).enumerate() {
        loss += row_lse - pass.logits[r * classes + y as usize];
    }
    loss /= rows as f64;

    to_probs(&mut pass.logits, &lse, rows, classes);

    // dz at the output: (probs - onehot) / rows.
    let mut dz = pass.logits;
    for (r, &y) in batch_y.iter().enumerate() {
        dz[r * classes + y as usize] -= 1.0;
    }
    let inv = 1.0 / rows as f64;
    for v in &mut dz {
        *v *= inv;
    }

    let mut grad = ParamVector::zeros(spec.layout());
    let gvals = grad.values_mut();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let below: &[f64] = if idx == 0 { batch_x } else { &pass.hidden[idx - 1] };
        for r in 0..rows {
            let dzr = &dz[r * layer.out..(r + 1) * layer.out];
            let ar = &below[r * layer.inp..(r + 1) * layer.inp];
            for (o, &d) in dzr.iter().enumerate() {
                gvals[layer.b_off + o] += d;
                let gw = &mut gvals[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                for (g, &a) in gw.iter_mut().zip(ar) {
                    *g += d * a;
                }
            }
        }
        if idx > 0 {
            // da_below = dz * W, masked by relu'.
            let mut da = vec![0.0; rows * layer.inp];
            for r in 0..rows {
                let dzr = &dz[r * layer.out..(r + 1) * layer.out];
                let dar = &mut da[r * layer.inp..(r + 1) * layer.inp];
                for (o, &d) in dzr.iter().enumerate() {
                    let w = &params[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
                    for (dv, &wv) in dar.iter_mut().zip(w) {
                        *dv += d * wv;
                    }
                }
                let act = &below[r * layer.inp..(r + 1) * layer.inp];
                for (dv, &a) in dar.iter_mut().zip(act) {
                    if a <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            dz = da;
        }
    }

    Ok((loss, grad))
}

/// SGD-with-momentum optimizer state. Velocity starts at zero and has the
/// model's layout.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ParamVector,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, layout: Layout) -> Self {
        SgdState {
            learning_rate,
            momentum,
            velocity: ParamVector::zeros(layout),
        }
    }

    /// velocity <- momentum * velocity + grad; model <- model - lr * velocity.
    pub fn step(&mut self, model: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        grad.ensure_finite("gradient")?;
        self.velocity.scale(self.momentum);
        self.velocity.add_assign(grad);
        model.axpy(-self.learning_rate, &self.velocity);
        model.ensure_finite("model after sgd step")
    }
}

/// Hyperparameters of one local training session.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Result of a local session: the parameter delta over the whole session,
/// plus diagnostics.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub delta: ParamVector,
    pub n_samples: usize,
    pub steps: usize,
    pub mean_batch_loss: f64,
}

/// Shared epoch/mini-batch loop. `adjust_grad` sees the current model and
/// may rewrite the gradient before the optimizer step; the plain path
/// passes a no-op.
pub(crate) fn train_session<F>(
    model: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    indices: &[u32],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
    mut adjust_grad: F,
) -> Result<TrainReport>
where
    F: FnMut(&ParamVector, &mut ParamVector),
{
    if indices.is_empty() {
        return Err(SimError::Protocol(
            "local training on an empty device dataset".into(),
        ));
    }
    if opts.epochs == 0 {
        return Err(SimError::config("local_epochs", "must be at least 1"));
    }
    if opts.batch_size == 0 {
        return Err(SimError::config("batch_size", "must be at least 1"));
    }

    let mut current = model.clone();
    let mut sgd = SgdState::new(opts.learning_rate, opts.momentum, spec.layout());
    let mut order = indices.to_vec();
    let mut batch_x = Vec::with_capacity(opts.batch_size * spec.input_dim);
    let mut batch_y = Vec::with_capacity(opts.batch_size);
    let mut steps = 0usize;
    let mut loss_sum = 0.0;

    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(data.row(i as usize));
                batch_y.push(data.labels()[i as usize]);
            }
            let (loss, mut grad) = loss_and_grad(&current, spec, &batch_x, &batch_y)?;
            adjust_grad(&current, &mut grad);
            sgd.step(&mut current, &grad)?;
            steps += 1;
            loss_sum += loss;
        }
    }

    Ok(TrainReport {
        delta: current.sub(model),
        n_samples: indices.len(),
        steps,
        mean_batch_loss: loss_sum / steps as f64,
    })
}

/// Shuffled mini-batch SGD over the device's samples; the last partial
/// batch is trained, not dropped. Returns the session delta.
pub fn local_train(
    model: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    indices: &[u32],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    train_session(model, spec, data, indices, opts, rng, |_, _| {})
}

/// Accuracy and mean loss on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Deterministic evaluation: chunked in fixed order so the reduction is
/// identical under any thread count. Prediction argmax ties break to the
/// lowest class index.
pub fn evaluate(model: &ParamVector, spec: &ModelSpec, data: &Dataset) -> Result<EvalReport> {
    spec.check_model(model)?;
    if data.is_empty() {
        return Err(SimError::Data("empty evaluation set".into()));
    }
    let n = data.len();
    let classes = spec.num_classes;
    let chunk_stats: Vec<(u64, f64)> = (0..n.div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * EVAL_CHUNK;
            let end = (start + EVAL_CHUNK).min(n);
            let rows = end - start;
            let pass = forward_pass(model, spec, data.rows(start, end), rows);
            let lse = log_sum_exp_rows(&pass.logits, rows, classes);
            let mut correct = 0u64;
            let mut loss = 0.0;
            for (r, &row_lse) in lse.iter().enumerate() {
                let logits = &pass.logits[r * classes..(r + 1) * classes];
                let mut best = 0;
                for (k, &z) in logits.iter().enumerate() {
                    if z > logits[best] {
                        best = k;
                    }
                }
                let y = data.labels()[start + r] as usize;
                if best == y {
                    correct += 1;
                }
                loss += row_lse - logits[y];
            }
            (correct, loss)
        })
        .collect();

    let mut correct = 0u64;
    let mut loss = 0.0;
    for (c, l) in chunk_stats {
        correct += c;
        loss += l;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
    })
}
