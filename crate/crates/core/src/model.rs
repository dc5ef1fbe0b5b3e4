//! Small differentiable classifiers over flat parameter vectors.
//!
//! Two architectures are supported: multinomial logistic regression and a
//! one-hidden-layer perceptron. Parameters are laid out row-major, layer by
//! layer, weights before biases:
//!
//! ```text
//! logistic: W[input_dim x classes] | b[classes]
//! mlp:      W1[input_dim x hidden] | b1[hidden] | W2[hidden x classes] | b2[classes]
//! ```
//!
//! Gradients are computed by hand-written backpropagation and checked against
//! central finite differences in the test suite.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through pre-activation `a` and output `h`.
    /// ReLU uses sub-gradient 0 at the kink.
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Supervision attached to a batch of inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// Row-stochastic soft targets, one row per input.
    Probs(Array2<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn labeled(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        check_finite(inputs.view())?;
        Ok(Batch {
            inputs,
            targets: Targets::Labels(labels),
        })
    }

    pub fn soft(inputs: Array2<f64>, probs: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != probs.nrows() {
            return Err(Error::invalid(format!(
                "{} inputs but {} target rows",
                inputs.nrows(),
                probs.nrows()
            )));
        }
        check_finite(inputs.view())?;
        for (i, row) in probs.outer_iter().enumerate() {
            let s: f64 = row.sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "target row {i} is not a probability distribution (sum {s})"
                )));
            }
        }
        Ok(Batch {
            inputs,
            targets: Targets::Probs(probs),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

fn check_finite(x: ArrayView2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("batch inputs contain non-finite values"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Borrowed views of the layers inside a flat parameter vector.
struct Layers<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    second: Option<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>,
}

/// Forward-pass intermediates kept for backpropagation.
struct Trace {
    pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
    logits: Array2<f64>,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        match self.kind {
            ModelKind::Logistic if self.hidden_dim != 0 => {
                Err(Error::config("logistic model must have hidden_dim = 0"))
            }
            ModelKind::Mlp if self.hidden_dim == 0 => Err(Error::config("mlp model needs hidden_dim > 0")),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        let (i, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::Logistic => i * c + c,
            ModelKind::Mlp => i * h + h + h * c + c,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        let mut fill = |fan_in: usize, fan_out: usize, out: &mut Vec<f64>| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            out.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        };
        match self.kind {
            ModelKind::Logistic => fill(self.input_dim, self.num_classes, &mut out),
            ModelKind::Mlp => {
                fill(self.input_dim, self.hidden_dim, &mut out);
                fill(self.hidden_dim, self.num_classes, &mut out);
            }
        }
        ParamVector::new(out)
    }

    fn layers<'a>(&self, params: &'a [f64]) -> Result<Layers<'a>> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, model expects {}",
                params.len(),
                self.param_count()
            )));
        }
        let view2 = |s: &'a [f64], r: usize, c: usize| ArrayView2::from_shape((r, c), s).expect("length checked");
        let (i, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        Ok(match self.kind {
            ModelKind::Logistic => {
                let (w, b) = params.split_at(i * c);
                Layers {
                    w1: view2(w, i, c),
                    b1: ArrayView1::from(b),
                    second: None,
                }
            }
            ModelKind::Mlp => {
                let (w1, rest) = params.split_at(i * h);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h * c);
                Layers {
                    w1: view2(w1, i, h),
                    b1: ArrayView1::from(b1),
                    second: Some((view2(w2, h, c), ArrayView1::from(b2))),
                }
            }
        })
    }

    fn trace(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<Trace> {
        if inputs.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "inputs have {} features, model expects {}",
                inputs.ncols(),
                self.input_dim
            )));
        }
        let l = self.layers(params)?;
        let first = inputs.dot(&l.w1) + &l.b1;
        Ok(match l.second {
            None => Trace {
                pre: None,
                hidden: None,
                logits: first,
            },
            Some((w2, b2)) => {
                let act = self.activation;
                let hidden = first.mapv(|a| act.apply(a));
                let logits = hidden.dot(&w2) + &b2;
                Trace {
                    pre: Some(first),
                    hidden: Some(hidden),
                    logits,
                }
            }
        })
    }

    /// Logits, one row per input.
    pub fn forward(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(params, inputs)?.logits)
    }

    /// Row-wise softmax of the logits.
    pub fn predict_proba(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.forward(params, inputs)?;
        softmax_rows(&mut z);
        Ok(z)
    }

    /// Backpropagates `dlogits` (already divided by the batch size).
    fn backward(&self, params: &[f64], inputs: ArrayView2<f64>, tr: &Trace, dlogits: &Array2<f64>) -> ParamVector {
        let l = self.layers(params).expect("validated by trace");
        let mut grad = Vec::with_capacity(params.len());
        match (l.second, &tr.pre, &tr.hidden) {
            (None, _, _) => {
                let dw = inputs.t().dot(dlogits);
                grad.extend(dw.iter());
                grad.extend(dlogits.sum_axis(Axis(0)).iter());
            }
            (Some((w2, _)), Some(pre), Some(hidden)) => {
                let dw2 = hidden.t().dot(dlogits);
                let db2 = dlogits.sum_axis(Axis(0));
                let dh = dlogits.dot(&w2.t());
                let act = self.activation;
                let mut da = dh;
                for ((d, &a), &h) in da.iter_mut().zip(pre.iter()).zip(hidden.iter()) {
                    *d *= act.derivative(a, h);
                }
                let dw1 = inputs.t().dot(&da);
                let db1 = da.sum_axis(Axis(0));
                grad.extend(dw1.iter());
                grad.extend(db1.iter());
                grad.extend(dw2.iter());
                grad.extend(db2.iter());
            }
            _ => unreachable!("mlp trace carries hidden activations"),
        }
        ParamVector::new(grad)
    }

    /// Mean softmax cross-entropy over a labeled batch, without gradient.
    pub fn ce_loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        let labels = labels_of(batch)?;
        let z = self.forward(params, batch.inputs.view())?;
        Ok(mean_ce(&z, labels))
    }

    /// Mean softmax cross-entropy and its gradient.
    pub fn ce_loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, ParamVector)> {
        let labels = labels_of(batch)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let tr = self.trace(params, batch.inputs.view())?;
        let loss = mean_ce(&tr.logits, labels);
        let n = batch.len() as f64;
        let mut d = tr.logits.clone();
        softmax_rows(&mut d);
        for (mut row, &y) in d.outer_iter_mut().zip(labels) {
            row[y] -= 1.0;
            row.mapv_inplace(|v| v / n);
        }
        let grad = self.backward(params, batch.inputs.view(), &tr, &d);
        Ok((loss, grad))
    }

    /// Mean `KL(target || softmax(logits / temperature))`.
    pub fn kl_loss(&self, params: &[f64], batch: &Batch, temperature: f64) -> Result<f64> {
        let (probs, temperature) = probs_of(batch, temperature)?;
        let mut z = self.forward(params, batch.inputs.view())?;
        z.mapv_inplace(|v| v / temperature);
        Ok(mean_kl(probs, &z))
    }

    /// Mean `KL(target || softmax(logits / temperature))` and its gradient.
    pub fn kl_loss_and_grad(&self, params: &[f64], batch: &Batch, temperature: f64) -> Result<(f64, ParamVector)> {
        let (probs, temperature) = probs_of(batch, temperature)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let tr = self.trace(params, batch.inputs.view())?;
        let mut q = tr.logits.mapv(|v| v / temperature);
        let loss = mean_kl(probs, &q);
        softmax_rows(&mut q);
        let scale = 1.0 / (temperature * batch.len() as f64);
        let d = (q - probs) * scale;
        let grad = self.backward(params, batch.inputs.view(), &tr, &d);
        Ok((loss, grad))
    }

    /// Exact accuracy (argmax, lowest index on ties) and mean cross-entropy.
    pub fn evaluate(&self, params: &[f64], data: &Dataset) -> Result<EvalReport> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let z = self.forward(params, data.inputs().view())?;
        let correct = z
            .outer_iter()
            .zip(data.labels())
            .filter(|(row, &y)| argmax(row.view()) == y)
            .count();
        Ok(EvalReport {
            accuracy: correct as f64 / data.len() as f64,
            mean_loss: mean_ce(&z, data.labels()),
        })
    }
}

fn labels_of(batch: &Batch) -> Result<&[usize]> {
    match &batch.targets {
        Targets::Labels(l) => Ok(l),
        Targets::Probs(_) => Err(Error::invalid("cross-entropy needs a labeled batch")),
    }
}

fn probs_of(batch: &Batch, temperature: f64) -> Result<(&Array2<f64>, f64)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    match &batch.targets {
        Targets::Probs(p) => Ok((p, temperature)),
        Targets::Labels(_) => Err(Error::invalid("KL loss needs soft targets")),
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn mean_ce(z: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = z
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    total / labels.len() as f64
}

fn mean_kl(targets: &Array2<f64>, scaled_logits: &Array2<f64>) -> f64 {
    let total: f64 = targets
        .outer_iter()
        .zip(scaled_logits.outer_iter())
        .map(|(t, z)| {
            let lse = log_sum_exp(z);
            t.iter()
                .zip(z.iter())
                .filter(|(&ti, _)| ti > 0.0)
                .map(|(&ti, &zi)| ti * (ti.ln() - (zi - lse)))
                .sum::<f64>()
        })
        .sum();
    (total / targets.nrows() as f64).max(0.0)
}

/// Convenience: a labeled batch holding the full dataset.
pub fn full_batch(data: &Dataset) -> Batch {
    Batch {
        inputs: data.inputs().clone(),
        targets: Targets::Labels(data.labels().to_vec()),
    }
}

/// Element-wise mean of equally shaped matrices.
pub(crate) fn row_mean(rows: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = rows[0].clone();
    for r in &rows[1..] {
        acc += r;
    }
    acc / rows.len() as f64
}
