//! Dense rectifier classifier with softmax cross-entropy and hand-written
//! reverse-mode gradients.
//!
//! Every model in the pipeline (the two auxiliary biased models and the
//! debiased model) is a [`ModelParams`]. Batches are row-major
//! `(batch, features)` matrices. Per-sample loss weights are applied to the
//! mean batch objective `(1/B) Σ wⱼ ℓⱼ`; a negative weight turns the
//! corresponding term into gradient ascent.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{Optimizer, OptimizerKind};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hidden-layer nonlinearity. Only the rectifier is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// One affine layer. `weights` has shape `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Parameters of a feed-forward classifier: rectifier hidden layers and a
/// linear output layer producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Raw network outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

/// Softmax of [`Logits`]; strictly positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }
}

/// Per-sample objective used for a gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    /// Generalized cross-entropy `(1 - p^q) / q`.
    Generalized { q: f64 },
}

impl Loss {
    fn validate(&self) -> Result<()> {
        match *self {
            Loss::CrossEntropy => Ok(()),
            Loss::Generalized { q } if q > 0.0 && q <= 1.0 => Ok(()),
            Loss::Generalized { q } => Err(Error::config(format!("gce q must lie in (0,1], got {q}"))),
        }
    }
}

/// Loss bookkeeping returned by a weighted step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatchLoss {
    pub per_sample_weights: Vec<f64>,
    pub per_sample_losses: Vec<f64>,
    /// `(1/B) Σ wⱼ ℓⱼ`, summed in sample order.
    pub mean_loss: f64,
}

/// Parameter gradients, one `(dW, db)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|((wa, ba), (wb, bb))| {
                wa.iter()
                    .zip(wb.iter())
                    .chain(ba.iter().zip(bb.iter()))
                    .map(|(a, b)| (a - b).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Cached activations of one batch forward pass, reusable for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    logits: Array2<f64>,
    probs: Array2<f64>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }

    /// `p(yⱼ | xⱼ)` for every row.
    pub fn target_probs(&self, targets: &[usize]) -> Vec<f64> {
        targets
            .iter()
            .enumerate()
            .map(|(j, &y)| self.probs[[j, y]])
            .collect()
    }
}

impl ModelParams {
    /// Glorot-uniform weights (`bound = sqrt(6 / (fan_in + fan_out))`) drawn
    /// in row-major order from a ChaCha8 stream seeded with `seed`; zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config(format!("layer sizes must be positive: {layer_sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("finite positive bound");
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::shape(format!(
                    "layer {k}: bias length {} vs fan_out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if layer.fan_in() == 0 || layer.fan_out() == 0 {
                return Err(Error::shape(format!("layer {k} has an empty dimension")));
            }
            if !layer.weights.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("layer {k} has non-finite parameters"), None));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(format!(
                    "layer {k} fan_out {} does not feed layer {} fan_in {}",
                    pair[0].fan_out(),
                    k + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Direct parameter access; callers are responsible for keeping shapes intact.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].fan_in())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Logits and softmax probabilities for a single feature vector.
    pub fn forward_probs(&self, features: &[f64]) -> Result<(Logits, ProbVector)> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::shape(e.to_string()))?;
        let pass = self.forward(x)?;
        Ok((
            Logits(pass.logits.row(0).to_vec()),
            ProbVector(pass.probs.row(0).to_vec()),
        ))
    }

    /// Batched forward pass keeping every intermediate activation.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "feature length {} does not match input dim {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite input features", None));
        }
        let input = x.to_owned();
        let last = self.layers.len() - 1;
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(last);
        let mut logits = Array2::zeros((0, 0));
        for (k, layer) in self.layers.iter().enumerate() {
            let prev = if k == 0 { &input } else { &hidden[k - 1] };
            let mut z = prev.dot(&layer.weights);
            z += &layer.bias;
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
                hidden.push(z);
            } else {
                logits = z;
            }
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite logits", None));
        }
        let probs = softmax_rows(&logits);
        Ok(ForwardPass {
            input,
            hidden,
            logits,
            probs,
        })
    }

    /// Softmax probabilities for every row of `x`.
    pub fn probs_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.probs)
    }

    /// `p(yᵢ | xᵢ)` for every row, evaluated in fixed-size chunks.
    pub fn target_probs(&self, x: ArrayView2<'_, f64>, targets: &[usize]) -> Result<Vec<f64>> {
        if x.nrows() != targets.len() {
            return Err(Error::shape(format!(
                "{} rows but {} targets",
                x.nrows(),
                targets.len()
            )));
        }
        let mut out = Vec::with_capacity(targets.len());
        for (chunk, ys) in x
            .axis_chunks_iter(Axis(0), EVAL_CHUNK)
            .zip(targets.chunks(EVAL_CHUNK))
        {
            out.extend(self.forward(chunk)?.target_probs(ys));
        }
        Ok(out)
    }

    /// Arg-max class for every row; ties resolve to the lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let pass = self.forward(chunk)?;
            out.extend(pass.logits.rows().into_iter().map(|row| argmax(row.iter().copied())));
        }
        Ok(out)
    }

    /// Gradients of `(1/B) Σ wⱼ ℓⱼ` with respect to every parameter.
    pub fn gradients(
        &self,
        pass: &ForwardPass,
        targets: &[usize],
        weights: &[f64],
        loss: Loss,
    ) -> Result<(Gradients, WeightedBatchLoss)> {
        loss.validate()?;
        let b = pass.batch_size();
        if targets.len() != b || weights.len() != b {
            return Err(Error::shape(format!(
                "batch of {b} with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let classes = self.num_classes();
        if let Some(&y) = targets.iter().find(|&&y| y >= classes) {
            return Err(Error::shape(format!("target {y} out of range for {classes} classes")));
        }
        let inv_b = 1.0 / b as f64;

        let mut losses = Vec::with_capacity(b);
        let mut delta = pass.probs.clone();
        for (j, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            let p_y = pass.probs[[j, y]];
            let (value, scale) = match loss {
                Loss::CrossEntropy => (cross_entropy(pass.logits.row(j).iter().copied(), y), 1.0),
                Loss::Generalized { q } => {
                    let pq = p_y.powf(q);
                    ((1.0 - pq) / q, pq)
                }
            };
            losses.push(value);
            let mut row = delta.row_mut(j);
            row[y] -= 1.0;
            let factor = w * scale * inv_b;
            row.mapv_inplace(|v| v * factor);
        }
        let mean_loss = weights.iter().zip(&losses).map(|(w, l)| w * l).sum::<f64>() * inv_b;
        if !mean_loss.is_finite() {
            return Err(Error::numeric(format!("batch loss is {mean_loss}"), None));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = if k == 0 { &pass.input } else { &pass.hidden[k - 1] };
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut next = delta.dot(&self.layers[k].weights.t());
                Zip::from(&mut next).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((
            Gradients { layers: grads },
            WeightedBatchLoss {
                per_sample_weights: weights.to_vec(),
                per_sample_losses: losses,
                mean_loss,
            },
        ))
    }

    /// Plain SGD update `θ ← θ - lr·∇`.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        for (layer, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, dw);
            layer.bias.scaled_add(-lr, db);
        }
    }

    /// One SGD step on the weighted mean cross-entropy of a batch.
    ///
    /// Parameters are left untouched when the loss is not finite.
    pub fn weighted_ce_grad_step(
        &mut self,
        x: ArrayView2<'_, f64>,
        targets: &[usize],
        weights: &[f64],
        lr: f64,
    ) -> Result<WeightedBatchLoss> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let pass = self.forward(x)?;
        let (grads, loss) = self.gradients(&pass, targets, weights, Loss::CrossEntropy)?;
        self.apply_sgd(&grads, lr);
        Ok(loss)
    }

    /// Unweighted SGD step; identical to [`Self::weighted_ce_grad_step`] with unit weights.
    pub fn ce_grad_step(
        &mut self,
        x: ArrayView2<'_, f64>,
        targets: &[usize],
        lr: f64,
    ) -> Result<WeightedBatchLoss> {
        let ones = vec![1.0; targets.len()];
        self.weighted_ce_grad_step(x, targets, &ones, lr)
    }
}

const EVAL_CHUNK: usize = 1024;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy from log-softmax: `logsumexp(z) - z[y]`.
pub fn cross_entropy(logits: impl Iterator<Item = f64> + Clone, target: usize) -> f64 {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.clone().map(|v| (v - max).exp()).sum::<f64>().ln();
    let z_y = logits.clone().nth(target).expect("target within logits");
    lse - z_y
}

/// Exact gradient of the cross-entropy with respect to the logits, `p - e_y`.
pub fn ce_logit_gradient(logits: &[f64], target: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    g
}

/// L1 norm of the cross-entropy logit gradient, `2 - 2·p(y)`.
pub fn logit_grad_l1(prob_on_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob_on_target) {
        return Err(Error::Domain(format!(
            "target probability must lie in [0,1], got {prob_on_target}"
        )));
    }
    Ok(2.0 - 2.0 * prob_on_target)
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
