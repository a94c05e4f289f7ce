//! Reference gradient-trained classifier: a softmax MLP with plain
//! mini-batch gradient descent.
//!
//! Training is deterministic given the config seed: weight initialization,
//! the validation carve-out and the per-epoch shuffle orders all derive from
//! it, and batch gradients are accumulated in a fixed order. Features are
//! standardized per dimension with statistics from the training subset; the
//! parameters are stored in the model so prediction applies the same map.

use std::path::Path;

use crate::error::{HsdrError, Result};
use crate::mat::{dot, Mat};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(HsdrError::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }

    fn apply<F: Scalar>(&self, z: F) -> F {
        match self {
            Activation::Relu => z.max(F::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output<F: Scalar>(&self, a: F) -> F {
        match self {
            Activation::Relu => {
                if a > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig<F> {
    /// `[input, hidden..., output]`; input must match the feature count and
    /// output the class count.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: F,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training samples carved out (stratified) for the
    /// per-epoch validation curve; 0 disables validation.
    pub validation_fraction: f64,
}

impl<F: Scalar> MlpConfig<F> {
    /// The default architecture: `[input, 64, 32, classes]`, relu,
    /// learning rate 0.01, batch 64, 90 epochs, 10% validation.
    pub fn default_for(input: usize, classes: usize, seed: u64) -> Self {
        MlpConfig {
            layer_sizes: vec![input, 64, 32, classes],
            activation: Activation::Relu,
            learning_rate: F::of(0.01),
            epochs: 90,
            batch_size: 64,
            seed,
            validation_fraction: 0.1,
        }
    }

    pub fn validate(&self, input: usize, classes: usize) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(HsdrError::InvalidConfig(
                "layer_sizes needs at least input and output".into(),
            ));
        }
        if self.layer_sizes[0] != input {
            return Err(HsdrError::InvalidConfig(format!(
                "first layer size {} != feature count {input}",
                self.layer_sizes[0]
            )));
        }
        if *self.layer_sizes.last().unwrap() != classes {
            return Err(HsdrError::InvalidConfig(format!(
                "last layer size {} != class count {classes}",
                self.layer_sizes.last().unwrap()
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(HsdrError::InvalidConfig("zero-sized layer".into()));
        }
        if self.epochs == 0 {
            return Err(HsdrError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HsdrError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > F::zero()) || !self.learning_rate.is_finite() {
            return Err(HsdrError::InvalidConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(HsdrError::InvalidConfig(
                "validation_fraction must be in [0,1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    /// `out x in`
    pub weights: Mat<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> MlpParams<F> {
    fn glorot_init(layer_sizes: &[usize], rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weights = Mat::zeros(fan_out, fan_in);
            for i in 0..fan_out {
                for j in 0..fan_in {
                    weights[(i, j)] = F::of(rng.uniform_in(-limit, limit));
                }
            }
            layers.push(Layer {
                weights,
                bias: vec![F::zero(); fan_out],
            });
        }
        MlpParams { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Per-layer activations of a forward pass; `stages[0]` is the input batch
/// and the last stage holds raw logits.
struct Forward<F> {
    stages: Vec<Mat<F>>,
}

fn forward<F: Scalar>(params: &MlpParams<F>, activation: Activation, x: &Mat<F>) -> Forward<F> {
    let mut stages = Vec::with_capacity(params.layers.len() + 1);
    stages.push(x.clone());
    for (idx, layer) in params.layers.iter().enumerate() {
        let prev = stages.last().unwrap();
        let mut out = Mat::zeros(prev.rows(), layer.weights.rows());
        let last = idx + 1 == params.layers.len();
        for r in 0..prev.rows() {
            let input = prev.row(r);
            for (o, slot) in out.row_mut(r).iter_mut().enumerate() {
                let z = dot(layer.weights.row(o), input) + layer.bias[o];
                *slot = if last { z } else { activation.apply(z) };
            }
        }
        stages.push(out);
    }
    Forward { stages }
}

fn log_sum_exp<F: Scalar>(logits: &[F]) -> F {
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let sum: F = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

fn softmax_row<F: Scalar>(logits: &[F], out: &mut [F]) {
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut sum = F::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean softmax cross-entropy of a batch. `labels` are 1-based class ids.
pub fn cross_entropy_loss<F: Scalar>(
    params: &MlpParams<F>,
    activation: Activation,
    x: &Mat<F>,
    labels: &[u16],
) -> Result<F> {
    if labels.len() != x.rows() {
        return Err(HsdrError::LengthMismatch {
            left: x.rows(),
            right: labels.len(),
        });
    }
    if x.rows() == 0 {
        return Err(HsdrError::EmptyInput("loss batch"));
    }
    let n_classes = params.output_size();
    let fwd = forward(params, activation, x);
    let logits = fwd.stages.last().unwrap();
    let mut total = F::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label == 0 || label as usize > n_classes {
            return Err(HsdrError::LabelOutOfRange { label, n_classes });
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[label as usize - 1];
    }
    Ok(total / F::from_usize(x.rows()).unwrap())
}

/// Batch loss and its gradient with respect to every weight and bias,
/// computed by backpropagation. The gradient has the same shape as the
/// parameters.
pub fn loss_and_gradient<F: Scalar>(
    params: &MlpParams<F>,
    activation: Activation,
    x: &Mat<F>,
    labels: &[u16],
) -> Result<(F, MlpParams<F>)> {
    if labels.len() != x.rows() {
        return Err(HsdrError::LengthMismatch {
            left: x.rows(),
            right: labels.len(),
        });
    }
    if x.rows() == 0 {
        return Err(HsdrError::EmptyInput("gradient batch"));
    }
    if !x.all_finite() {
        return Err(HsdrError::NonFinite("gradient batch features".into()));
    }
    let batch = x.rows();
    let n_classes = params.output_size();
    let fwd = forward(params, activation, x);
    let logits = fwd.stages.last().unwrap();

    let inv_batch = F::one() / F::from_usize(batch).unwrap();
    let mut loss = F::zero();
    // delta at the logits: (softmax - onehot) / batch
    let mut delta = Mat::zeros(batch, n_classes);
    for (r, &label) in labels.iter().enumerate() {
        if label == 0 || label as usize > n_classes {
            return Err(HsdrError::LabelOutOfRange { label, n_classes });
        }
        let row = logits.row(r);
        loss += log_sum_exp(row) - row[label as usize - 1];
        softmax_row(row, delta.row_mut(r));
        delta[(r, label as usize - 1)] -= F::one();
        for v in delta.row_mut(r) {
            *v *= inv_batch;
        }
    }
    loss *= inv_batch;

    let mut grads: Vec<Layer<F>> = Vec::with_capacity(params.layers.len());
    for layer_idx in (0..params.layers.len()).rev() {
        let inputs = &fwd.stages[layer_idx];
        let layer = &params.layers[layer_idx];
        let out_size = layer.weights.rows();
        let in_size = layer.weights.cols();

        let mut grad_w = Mat::zeros(out_size, in_size);
        let mut grad_b = vec![F::zero(); out_size];
        for r in 0..batch {
            let d_row = delta.row(r);
            let in_row = inputs.row(r);
            for o in 0..out_size {
                let d = d_row[o];
                if d == F::zero() {
                    continue;
                }
                grad_b[o] += d;
                let dst = grad_w.row_mut(o);
                for (g, v) in dst.iter_mut().zip(in_row) {
                    *g += d * *v;
                }
            }
        }

        if layer_idx > 0 {
            let mut next_delta = Mat::zeros(batch, in_size);
            for r in 0..batch {
                let d_row = delta.row(r);
                let a_row = inputs.row(r);
                let dst = next_delta.row_mut(r);
                for o in 0..out_size {
                    let d = d_row[o];
                    if d == F::zero() {
                        continue;
                    }
                    let w_row = layer.weights.row(o);
                    for (slot, w) in dst.iter_mut().zip(w_row) {
                        *slot += d * *w;
                    }
                }
                for (slot, &a) in dst.iter_mut().zip(a_row) {
                    *slot *= activation.derivative_from_output(a);
                }
            }
            delta = next_delta;
        }
        grads.push(Layer {
            weights: grad_w,
            bias: grad_b,
        });
    }
    grads.reverse();
    Ok((loss, MlpParams { layers: grads }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<F> {
    pub epoch: usize,
    pub train_loss: F,
    pub train_acc: F,
    pub val_loss: Option<F>,
    pub val_acc: Option<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<F> {
    pub config: MlpConfig<F>,
    pub params: MlpParams<F>,
    pub feature_mean: Vec<F>,
    pub feature_std: Vec<F>,
    pub history: Vec<EpochRecord<F>>,
}

fn standardize_rows<F: Scalar>(
    features: &Mat<F>,
    mean: &[F],
    std: &[F],
    rows: &[usize],
) -> Mat<F> {
    let mut out = Mat::zeros(rows.len(), features.cols());
    for (dst, &src) in rows.iter().enumerate() {
        let row = features.row(src);
        let target = out.row_mut(dst);
        for ((t, v), (mu, sd)) in target.iter_mut().zip(row).zip(mean.iter().zip(std)) {
            *t = (*v - *mu) / *sd;
        }
    }
    out
}

fn accuracy<F: Scalar>(
    params: &MlpParams<F>,
    activation: Activation,
    x: &Mat<F>,
    labels: &[u16],
) -> F {
    let fwd = forward(params, activation, x);
    let logits = fwd.stages.last().unwrap();
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if argmax(logits.row(r)) + 1 == label as usize {
            correct += 1;
        }
    }
    F::from_usize(correct).unwrap() / F::from_usize(labels.len().max(1)).unwrap()
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Train the MLP on labeled feature vectors.
///
/// `n_classes` fixes the output layer semantics; labels must lie in
/// `1..=n_classes`.
pub fn train<F: Scalar>(
    features: &Mat<F>,
    labels: &[u16],
    n_classes: usize,
    cfg: &MlpConfig<F>,
) -> Result<TrainedModel<F>> {
    cfg.validate(features.cols(), n_classes)?;
    if labels.len() != features.rows() {
        return Err(HsdrError::LengthMismatch {
            left: features.rows(),
            right: labels.len(),
        });
    }
    if !features.all_finite() {
        return Err(HsdrError::NonFinite("training features".into()));
    }
    for &label in labels {
        if label == 0 || label as usize > n_classes {
            return Err(HsdrError::LabelOutOfRange { label, n_classes });
        }
    }
    if features.rows() < cfg.batch_size {
        return Err(HsdrError::InsufficientSamples {
            have: features.rows(),
            need: cfg.batch_size,
        });
    }

    // stratified validation carve-out
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label as usize - 1].push(i);
    }
    let mut carve_rng = SeededRng::stream(cfg.seed, 1);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for indices in &mut by_class {
        carve_rng.shuffle(indices);
        let mut n_val = (cfg.validation_fraction * indices.len() as f64).round() as usize;
        n_val = n_val.min(indices.len().saturating_sub(1));
        val_idx.extend_from_slice(&indices[..n_val]);
        train_idx.extend_from_slice(&indices[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    // standardization statistics from the training subset
    let k = features.cols();
    let inv_n = F::one() / F::from_usize(train_idx.len()).unwrap();
    let mut feature_mean = vec![F::zero(); k];
    for &i in &train_idx {
        for (m, v) in feature_mean.iter_mut().zip(features.row(i)) {
            *m += *v;
        }
    }
    for m in &mut feature_mean {
        *m *= inv_n;
    }
    let mut feature_std = vec![F::zero(); k];
    for &i in &train_idx {
        for ((s, v), m) in feature_std.iter_mut().zip(features.row(i)).zip(&feature_mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    for s in &mut feature_std {
        *s = (*s * inv_n).sqrt();
        if *s == F::zero() {
            *s = F::one();
        }
    }

    let x_train = standardize_rows(features, &feature_mean, &feature_std, &train_idx);
    let y_train: Vec<u16> = train_idx.iter().map(|&i| labels[i]).collect();
    let x_val = standardize_rows(features, &feature_mean, &feature_std, &val_idx);
    let y_val: Vec<u16> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut init_rng = SeededRng::stream(cfg.seed, 0);
    let mut params = MlpParams::glorot_init(&cfg.layer_sizes, &mut init_rng);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    for epoch in 1..=cfg.epochs {
        let mut epoch_rng = SeededRng::stream(cfg.seed, 1 + epoch as u64);
        epoch_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x_batch = gather_rows(&x_train, batch);
            let y_batch: Vec<u16> = batch.iter().map(|&i| y_train[i]).collect();
            let (loss, grads) = loss_and_gradient(&params, cfg.activation, &x_batch, &y_batch)?;
            if !loss.is_finite() || !params.all_finite() {
                return Err(HsdrError::NonFinite(format!(
                    "training loss at epoch {epoch}"
                )));
            }
            for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
                for (w, g) in layer
                    .weights
                    .as_mut_slice()
                    .iter_mut()
                    .zip(grad.weights.as_slice())
                {
                    *w -= cfg.learning_rate * *g;
                }
                for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                    *b -= cfg.learning_rate * *g;
                }
            }
        }

        let train_loss = cross_entropy_loss(&params, cfg.activation, &x_train, &y_train)?;
        if !train_loss.is_finite() {
            return Err(HsdrError::NonFinite(format!(
                "training loss at epoch {epoch}"
            )));
        }
        let train_acc = accuracy(&params, cfg.activation, &x_train, &y_train);
        let (val_loss, val_acc) = if y_val.is_empty() {
            (None, None)
        } else {
            (
                Some(cross_entropy_loss(&params, cfg.activation, &x_val, &y_val)?),
                Some(accuracy(&params, cfg.activation, &x_val, &y_val)),
            )
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
    }

    Ok(TrainedModel {
        config: cfg.clone(),
        params,
        feature_mean,
        feature_std,
        history,
    })
}

fn gather_rows<F: Scalar>(src: &Mat<F>, rows: &[usize]) -> Mat<F> {
    let mut out = Mat::zeros(rows.len(), src.cols());
    for (dst, &i) in rows.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(src.row(i));
    }
    out
}

/// Predicted labels (1-based, argmax) and per-class probabilities.
pub fn predict<F: Scalar>(
    model: &TrainedModel<F>,
    features: &Mat<F>,
) -> Result<(Vec<u16>, Mat<F>)> {
    if features.cols() != model.params.input_size() {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{} features", model.params.input_size()),
            actual: format!("{}", features.cols()),
        });
    }
    let rows: Vec<usize> = (0..features.rows()).collect();
    let x = standardize_rows(features, &model.feature_mean, &model.feature_std, &rows);
    let fwd = forward(&model.params, model.config.activation, &x);
    let logits = fwd.stages.last().unwrap();
    let n_classes = model.params.output_size();
    let mut probabilities = Mat::zeros(features.rows(), n_classes);
    let mut labels = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        softmax_row(logits.row(r), probabilities.row_mut(r));
        labels.push((argmax(probabilities.row(r)) + 1) as u16);
    }
    Ok((labels, probabilities))
}

/// History CSV: `epoch,train_loss,train_acc,val_loss,val_acc` with empty
/// validation cells when no validation split was configured.
pub fn history_csv<F: Scalar>(model: &TrainedModel<F>) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for rec in &model.history {
        let val_loss = rec.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let val_acc = rec.val_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.epoch, rec.train_loss, rec.train_acc, val_loss, val_acc
        ));
    }
    out
}

const MODEL_MAGIC: &str = "HSDM 1";

/// Persist a trained model: ASCII header plus little-endian arrays;
/// round-trips bit-for-bit.
pub fn save_model<F: Scalar>(model: &TrainedModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let cfg = &model.config;
    let mut header = String::new();
    header.push_str(MODEL_MAGIC);
    header.push('\n');
    header.push_str(&format!("scalar {}\n", F::NAME));
    let sizes: Vec<String> = cfg.layer_sizes.iter().map(|s| s.to_string()).collect();
    header.push_str(&format!("layer_sizes {}\n", sizes.join(",")));
    header.push_str(&format!("activation {}\n", cfg.activation.as_str()));
    header.push_str(&format!("learning_rate {}\n", cfg.learning_rate));
    header.push_str(&format!("epochs {}\n", cfg.epochs));
    header.push_str(&format!("batch_size {}\n", cfg.batch_size));
    header.push_str(&format!("seed {}\n", cfg.seed));
    header.push_str(&format!("validation_fraction {}\n", cfg.validation_fraction));
    let has_validation = model.history.first().is_some_and(|r| r.val_loss.is_some());
    header.push_str(&format!("has_validation {has_validation}\n"));

    let mut arrays: Vec<(String, Vec<F>)> = vec![
        ("feature_mean".into(), model.feature_mean.clone()),
        ("feature_std".into(), model.feature_std.clone()),
    ];
    for (i, layer) in model.params.layers.iter().enumerate() {
        arrays.push((format!("layer{i}_weights"), layer.weights.as_slice().to_vec()));
        arrays.push((format!("layer{i}_bias"), layer.bias.clone()));
    }
    arrays.push((
        "history_train_loss".into(),
        model.history.iter().map(|r| r.train_loss).collect(),
    ));
    arrays.push((
        "history_train_acc".into(),
        model.history.iter().map(|r| r.train_acc).collect(),
    ));
    if has_validation {
        arrays.push((
            "history_val_loss".into(),
            model.history.iter().map(|r| r.val_loss.unwrap()).collect(),
        ));
        arrays.push((
            "history_val_acc".into(),
            model.history.iter().map(|r| r.val_acc.unwrap()).collect(),
        ));
    }
    for (name, values) in &arrays {
        header.push_str(&format!("array {name} {}\n", values.len()));
    }
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    for (_, values) in &arrays {
        for v in values {
            v.write_le(&mut bytes);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<TrainedModel<F>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| HsdrError::FormatError(format!("{}: {msg}", path.display()));

    let end_marker = b"\nend\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| fail("missing end-of-header marker"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fail("non-utf8 header"))?;
    let payload = &bytes[end + end_marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(fail("not an HSDM model file"));
    }
    let mut layer_sizes: Option<Vec<usize>> = None;
    let mut activation = None;
    let mut learning_rate = None;
    let mut epochs = None;
    let mut batch_size = None;
    let mut seed = None;
    let mut validation_fraction = None;
    let mut has_validation = None;
    let mut array_spec: Vec<(String, usize)> = Vec::new();
    let mut scalar = None;
    for line in lines {
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| fail(&format!("malformed header line {line:?}")))?;
        match key {
            "scalar" => scalar = Some(value.to_string()),
            "layer_sizes" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.parse()).collect();
                layer_sizes = parsed.ok();
            }
            "activation" => activation = Some(Activation::parse(value)?),
            "learning_rate" => learning_rate = value.parse::<f64>().ok(),
            "epochs" => epochs = value.parse::<usize>().ok(),
            "batch_size" => batch_size = value.parse::<usize>().ok(),
            "seed" => seed = value.parse::<u64>().ok(),
            "validation_fraction" => validation_fraction = value.parse::<f64>().ok(),
            "has_validation" => has_validation = value.parse::<bool>().ok(),
            "array" => {
                let (name, len) = value
                    .split_once(' ')
                    .ok_or_else(|| fail("malformed array line"))?;
                array_spec.push((
                    name.to_string(),
                    len.parse().map_err(|_| fail("bad array length"))?,
                ));
            }
            _ => return Err(fail(&format!("unknown header key {key:?}"))),
        }
    }
    if scalar.as_deref() != Some(F::NAME) {
        return Err(fail(&format!("scalar mismatch, expected {}", F::NAME)));
    }
    let layer_sizes = layer_sizes.ok_or_else(|| fail("missing layer_sizes"))?;
    let config = MlpConfig {
        layer_sizes: layer_sizes.clone(),
        activation: activation.ok_or_else(|| fail("missing activation"))?,
        learning_rate: F::of(learning_rate.ok_or_else(|| fail("missing learning_rate"))?),
        epochs: epochs.ok_or_else(|| fail("missing epochs"))?,
        batch_size: batch_size.ok_or_else(|| fail("missing batch_size"))?,
        seed: seed.ok_or_else(|| fail("missing seed"))?,
        validation_fraction: validation_fraction
            .ok_or_else(|| fail("missing validation_fraction"))?,
    };
    let has_validation = has_validation.ok_or_else(|| fail("missing has_validation"))?;

    let expected_bytes: usize = array_spec.iter().map(|(_, len)| len * F::BYTE_WIDTH).sum();
    if payload.len() != expected_bytes {
        return Err(HsdrError::DimensionMismatch {
            expected: format!("{expected_bytes} payload bytes"),
            actual: format!("{}", payload.len()),
        });
    }
    let mut arrays = std::collections::HashMap::new();
    let mut cursor = 0usize;
    for (name, len) in &array_spec {
        let take = len * F::BYTE_WIDTH;
        let values: Vec<F> = payload[cursor..cursor + take]
            .chunks_exact(F::BYTE_WIDTH)
            .map(F::read_le)
            .collect();
        cursor += take;
        arrays.insert(name.clone(), values);
    }
    let mut take_array = |name: &str| {
        arrays
            .remove(name)
            .ok_or_else(|| fail(&format!("missing array {name:?}")))
    };

    let feature_mean = take_array("feature_mean")?;
    let feature_std = take_array("feature_std")?;
    let mut layers = Vec::new();
    for (i, w) in layer_sizes.windows(2).enumerate() {
        let weights = Mat::from_vec(w[1], w[0], take_array(&format!("layer{i}_weights"))?)?;
        let bias = take_array(&format!("layer{i}_bias"))?;
        if bias.len() != w[1] {
            return Err(fail("bias length mismatch"));
        }
        layers.push(Layer { weights, bias });
    }
    let train_loss = take_array("history_train_loss")?;
    let train_acc = take_array("history_train_acc")?;
    let (val_loss, val_acc) = if has_validation {
        (
            Some(take_array("history_val_loss")?),
            Some(take_array("history_val_acc")?),
        )
    } else {
        (None, None)
    };
    if train_loss.len() != train_acc.len() {
        return Err(fail("history arrays disagree in length"));
    }
    let history = train_loss
        .iter()
        .enumerate()
        .map(|(i, &loss)| EpochRecord {
            epoch: i + 1,
            train_loss: loss,
            train_acc: train_acc[i],
            val_loss: val_loss.as_ref().map(|v| v[i]),
            val_acc: val_acc.as_ref().map(|v| v[i]),
        })
        .collect();

    Ok(TrainedModel {
        config,
        params: MlpParams { layers },
        feature_mean,
        feature_std,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, n_per_class: usize) -> (Mat<f64>, Vec<u16>) {
        let mut rng = SeededRng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n_per_class {
            rows.push(vec![
                3.0 + 0.3 * rng.standard_normal(),
                3.0 + 0.3 * rng.standard_normal(),
            ]);
            labels.push(1u16);
        }
        for _ in 0..n_per_class {
            rows.push(vec![
                -3.0 + 0.3 * rng.standard_normal(),
                -3.0 + 0.3 * rng.standard_normal(),
            ]);
            labels.push(2u16);
        }
        (Mat::from_rows(&rows).unwrap(), labels)
    }

    /// Plain perceptron; independent check that the blobs are separable.
    fn perceptron_accuracy(features: &Mat<f64>, labels: &[u16]) -> f64 {
        let mut w = vec![0.0f64; features.cols() + 1];
        for _ in 0..100 {
            let mut mistakes = 0;
            for (row, &label) in features.iter_rows().zip(labels) {
                let target = if label == 1 { 1.0 } else { -1.0 };
                let score = w[0] + dot(&w[1..], row);
                if score * target <= 0.0 {
                    mistakes += 1;
                    w[0] += target;
                    for (wi, v) in w[1..].iter_mut().zip(row) {
                        *wi += target * v;
                    }
                }
            }
            if mistakes == 0 {
                break;
            }
        }
        let mut correct = 0;
        for (row, &label) in features.iter_rows().zip(labels) {
            let target = if label == 1 { 1.0 } else { -1.0 };
            if (w[0] + dot(&w[1..], row)) * target > 0.0 {
                correct += 1;
            }
        }
        correct as f64 / labels.len() as f64
    }

    fn small_config(epochs: usize, seed: u64) -> MlpConfig<f64> {
        MlpConfig {
            layer_sizes: vec![2, 8, 2],
            activation: Activation::Relu,
            learning_rate: 0.05,
            epochs,
            batch_size: 16,
            seed,
            validation_fraction: 0.1,
        }
    }

    #[test]
    fn separable_blobs_reach_full_training_accuracy() {
        let (features, labels) = blobs(1, 60);
        assert_eq!(
            perceptron_accuracy(&features, &labels),
            1.0,
            "oracle: blobs must be linearly separable"
        );
        let model = train(&features, &labels, 2, &small_config(50, 3)).unwrap();
        let last = model.history.last().unwrap();
        assert_eq!(last.train_acc, 1.0, "final train accuracy");
        assert_eq!(model.history.len(), 50);
    }

    #[test]
    fn zero_epochs_rejected() {
        let (features, labels) = blobs(2, 20);
        let cfg = small_config(0, 1);
        assert!(matches!(
            train(&features, &labels, 2, &cfg),
            Err(HsdrError::InvalidConfig(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let (features, labels) = blobs(4, 40);
        let cfg = small_config(10, 9);
        let a = train(&features, &labels, 2, &cfg).unwrap();
        let b = train(&features, &labels, 2, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let mut cfg2 = cfg;
        cfg2.seed = 10;
        let c = train(&features, &labels, 2, &cfg2).unwrap();
        assert_ne!(c.params, a.params);
    }

    #[test]
    fn training_loss_decreases_endpoint() {
        let (features, labels) = blobs(5, 60);
        let model = train(&features, &labels, 2, &small_config(30, 2)).unwrap();
        let first = model.history.first().unwrap().train_loss;
        let last = model.history.last().unwrap().train_loss;
        assert!(last <= first, "loss end {last} vs start {first}");
    }

    #[test]
    fn predict_probabilities_normalized_and_argmax_consistent() {
        let (features, labels) = blobs(6, 40);
        let model = train(&features, &labels, 2, &small_config(20, 5)).unwrap();
        let (pred, probs) = predict(&model, &features).unwrap();
        for r in 0..probs.rows() {
            let sum: f64 = probs.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let best = argmax(probs.row(r)) + 1;
            assert_eq!(pred[r] as usize, best);
        }
    }

    #[test]
    fn fresh_draws_generalize() {
        let (features, labels) = blobs(7, 60);
        let model = train(&features, &labels, 2, &small_config(40, 8)).unwrap();
        let (fresh, fresh_labels) = blobs(70, 50);
        let (pred, _) = predict(&model, &fresh).unwrap();
        let correct = pred
            .iter()
            .zip(&fresh_labels)
            .filter(|(a, b)| a == b)
            .count();
        assert!(correct as f64 / fresh_labels.len() as f64 >= 0.95);
    }

    #[test]
    fn prediction_label_multiset_invariant_under_shuffle() {
        let (features, labels) = blobs(8, 30);
        let model = train(&features, &labels, 2, &small_config(15, 4)).unwrap();
        let (pred, _) = predict(&model, &features).unwrap();
        let mut rng = SeededRng::new(99);
        let mut order: Vec<usize> = (0..features.rows()).collect();
        rng.shuffle(&mut order);
        let shuffled = gather_rows(&features, &order);
        let (pred_shuffled, _) = predict(&model, &shuffled).unwrap();
        let mut a = pred.clone();
        let mut b = pred_shuffled.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_loss_is_negative_log_probability() {
        let mut rng = SeededRng::new(11);
        let mut params = MlpParams::glorot_init(&[3, 4, 3], &mut rng);
        params.layers[1].bias = vec![0.1, -0.2, 0.3];
        let x = Mat::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let labels = vec![2u16];
        let loss = cross_entropy_loss(&params, Activation::Tanh, &x, &labels).unwrap();
        let fwd = forward(&params, Activation::Tanh, &x);
        let mut probs = vec![0.0f64; 3];
        softmax_row(fwd.stages.last().unwrap().row(0), &mut probs);
        assert!((loss - (-probs[1].ln())).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_loss_is_ln_n() {
        let params = MlpParams {
            layers: vec![Layer {
                weights: Mat::<f64>::zeros(5, 3),
                bias: vec![0.0; 5],
            }],
        };
        let x = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let loss = cross_entropy_loss(&params, Activation::Relu, &x, &[1, 4]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    fn finite_difference_check(activation: Activation, layer_sizes: &[usize], seed: u64) {
        let mut rng = SeededRng::new(seed);
        let params = MlpParams::<f64>::glorot_init(layer_sizes, &mut rng);
        let batch = 5;
        let rows: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..layer_sizes[0]).map(|_| rng.standard_normal()).collect())
            .collect();
        let x = Mat::from_rows(&rows).unwrap();
        let n_classes = *layer_sizes.last().unwrap();
        let labels: Vec<u16> = (0..batch)
            .map(|i| (i % n_classes + 1) as u16)
            .collect();

        let (_, grads) = loss_and_gradient(&params, activation, &x, &labels).unwrap();
        let h = 1e-5;
        for l in 0..params.layers.len() {
            let (rows_w, cols_w) = (
                params.layers[l].weights.rows(),
                params.layers[l].weights.cols(),
            );
            for i in 0..rows_w {
                for j in 0..cols_w {
                    let mut plus = params.clone();
                    plus.layers[l].weights[(i, j)] += h;
                    let mut minus = params.clone();
                    minus.layers[l].weights[(i, j)] -= h;
                    let fd = (cross_entropy_loss(&plus, activation, &x, &labels).unwrap()
                        - cross_entropy_loss(&minus, activation, &x, &labels).unwrap())
                        / (2.0 * h);
                    let g = grads.layers[l].weights[(i, j)];
                    let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
                    assert!(rel <= 1e-4, "layer {l} w({i},{j}): {g} vs {fd} rel {rel}");
                }
            }
            for i in 0..params.layers[l].bias.len() {
                let mut plus = params.clone();
                plus.layers[l].bias[i] += h;
                let mut minus = params.clone();
                minus.layers[l].bias[i] -= h;
                let fd = (cross_entropy_loss(&plus, activation, &x, &labels).unwrap()
                    - cross_entropy_loss(&minus, activation, &x, &labels).unwrap())
                    / (2.0 * h);
                let g = grads.layers[l].bias[i];
                let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "layer {l} b({i}): {g} vs {fd} rel {rel}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_three_layer() {
        finite_difference_check(Activation::Tanh, &[4, 6, 5, 3], 21);
        finite_difference_check(Activation::Relu, &[4, 6, 5, 3], 22);
    }

    #[test]
    fn model_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (features, labels) = blobs(12, 30);
        let model = train(&features, &labels, 2, &small_config(5, 6)).unwrap();
        let path = dir.path().join("model.hsm");
        save_model(&model, &path).unwrap();
        let back: TrainedModel<f64> = load_model(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn history_csv_layout() {
        let (features, labels) = blobs(13, 20);
        let model = train(&features, &labels, 2, &small_config(3, 2)).unwrap();
        let csv = history_csv(&model);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,train_acc,val_loss,val_acc");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,"));
    }
}
