//! Small fully connected softmax classifiers with analytic backprop.
//!
//! Parameters are laid out as `[W_0, b_0, W_1, b_1, ...]`: each weight layer
//! holds one filter per output unit (a row of length `input`), each bias layer a
//! single filter of length `output`. The forward/backward pass is generic over
//! [`Scalar`] so that the attack code can push dual numbers through it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::params::{LayerKind, LayeredParams, Shape};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    #[default]
    Relu,
    /// Leaky ReLU with negative slope 0.01.
    LeakyRelu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Sigmoid => S::cst(1.0) / (S::cst(1.0) + (-z).exp()),
            Activation::Relu => {
                if z.value() > 0.0 {
                    z
                } else {
                    S::cst(0.0)
                }
            }
            Activation::LeakyRelu => {
                if z.value() > 0.0 {
                    z
                } else {
                    S::cst(0.01) * z
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative<S: Scalar>(self, z: S, a: S) -> S {
        match self {
            Activation::Sigmoid => a * (S::cst(1.0) - a),
            Activation::Relu => S::cst(if z.value() > 0.0 { 1.0 } else { 0.0 }),
            Activation::LeakyRelu => S::cst(if z.value() > 0.0 { 1.0 } else { 0.01 }),
            Activation::Linear => S::cst(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DenseSpec>", into = "Vec<DenseSpec>")]
pub struct Architecture {
    layers: Vec<DenseSpec>,
}

impl TryFrom<Vec<DenseSpec>> for Architecture {
    type Error = Error;
    fn try_from(layers: Vec<DenseSpec>) -> Result<Self> {
        Architecture::new(layers)
    }
}

impl From<Architecture> for Vec<DenseSpec> {
    fn from(a: Architecture) -> Self {
        a.layers
    }
}

impl Architecture {
    pub fn new(layers: Vec<DenseSpec>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidParams("architecture has no layers".into()));
        };
        if last.activation != Activation::Linear {
            return Err(Error::InvalidParams("final layer must be linear".into()));
        }
        if last.output < 2 {
            return Err(Error::InvalidParams("need at least two classes".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.input == 0 || l.output == 0 {
                return Err(Error::InvalidParams(format!(
                    "layer {i} has a zero dimension"
                )));
            }
        }
        if let Some(i) = layers.windows(2).position(|w| w[0].output != w[1].input) {
            return Err(Error::InvalidParams(format!(
                "layer {i} output {} does not feed layer {} input {}",
                layers[i].output,
                i + 1,
                layers[i + 1].input
            )));
        }
        Ok(Architecture { layers })
    }

    /// A single linear softmax layer.
    pub fn linear(input: usize, classes: usize) -> Result<Self> {
        Architecture::new(vec![DenseSpec {
            input,
            output: classes,
            activation: Activation::Linear,
        }])
    }

    /// `input -> hidden (act) -> classes`.
    pub fn mlp(input: usize, hidden: usize, classes: usize, act: Activation) -> Result<Self> {
        Architecture::new(vec![
            DenseSpec {
                input,
                output: hidden,
                activation: act,
            },
            DenseSpec {
                input: hidden,
                output: classes,
                activation: Activation::Linear,
            },
        ])
    }

    pub fn layers(&self) -> &[DenseSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("non-empty").output
    }

    pub fn shape(&self) -> Shape {
        Shape {
            layers: self
                .layers
                .iter()
                .flat_map(|l| {
                    [
                        (LayerKind::Weight, vec![l.input; l.output]),
                        (LayerKind::Bias, vec![l.output]),
                    ]
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.shape().num_scalars()
    }

    /// Glorot-uniform weights scaled by `gain`, zero biases.
    pub fn init(&self, gain: f64, stream: Stream) -> LayeredParams {
        let mut rng = stream.rng();
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            let bound = gain * (6.0 / (l.input + l.output) as f64).sqrt();
            for _ in 0..l.input * l.output {
                flat.push(rng.random_range(-bound..=bound));
            }
            flat.extend(std::iter::repeat_n(0.0, l.output));
        }
        LayeredParams::from_flat(&self.shape(), &flat).expect("shape from architecture")
    }

    fn check(&self, w: &LayeredParams) -> Result<()> {
        let expected = self.shape();
        let got = w.shape();
        if expected != got {
            let layer = expected
                .layers
                .iter()
                .zip(&got.layers)
                .position(|(a, b)| a != b)
                .unwrap_or(expected.layers.len().min(got.layers.len()));
            return Err(Error::ShapeMismatch {
                layer,
                filter: None,
                detail: "parameters do not match the classifier architecture".into(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x_len: usize) -> Result<()> {
        if x_len != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x_len,
            });
        }
        Ok(())
    }

    /// Logits for one input.
    pub fn logits<S: Scalar>(&self, w: &LayeredParams, x: &[S]) -> Vec<S> {
        self.forward(w, x).0.pop().expect("at least one layer")
    }

    /// Softmax probabilities for one input.
    pub fn predict<S: Scalar>(&self, w: &LayeredParams, x: &[S]) -> Vec<S> {
        softmax(&self.logits(w, x))
    }

    pub fn predict_checked(&self, w: &LayeredParams, x: &[f64]) -> Result<Vec<f64>> {
        self.check(w)?;
        self.check_input(x.len())?;
        Ok(self.predict(w, x))
    }

    /// Returns per-layer pre-activations and post-activations (the input is
    /// `acts[0]`). The last pre-activation is the logit vector.
    fn forward<S: Scalar>(&self, w: &LayeredParams, x: &[S]) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (l, spec) in self.layers.iter().enumerate() {
            let weights = &w.layers()[2 * l];
            let bias = w.layers()[2 * l + 1].filters()[0].values();
            let input = acts.last().expect("input present");
            let z: Vec<S> = weights
                .filters()
                .iter()
                .zip(bias)
                .map(|(row, &b)| {
                    row.values()
                        .iter()
                        .zip(input)
                        .fold(S::cst(b), |acc, (&wij, &xj)| acc + S::cst(wij) * xj)
                })
                .collect();
            let a: Vec<S> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Cross-entropy loss and its gradient wrt all parameters (flat, in
    /// parameter order) for a single labelled input.
    pub fn sample_loss_grad<S: Scalar>(
        &self,
        w: &LayeredParams,
        x: &[S],
        label: usize,
    ) -> (S, Vec<S>) {
        let (pre, acts) = self.forward(w, x);
        let logits = pre.last().expect("non-empty");
        let (loss, probs) = cross_entropy(logits, label);
        // d loss / d logits = p - y
        let mut delta: Vec<S> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| if j == label { p - S::cst(1.0) } else { p })
            .collect();

        let mut grads: Vec<Vec<S>> = vec![Vec::new(); 2 * self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let input = &acts[l];
            let mut gw = Vec::with_capacity(input.len() * delta.len());
            for &d in &delta {
                gw.extend(input.iter().map(|&a| d * a));
            }
            grads[2 * l] = gw;
            grads[2 * l + 1] = delta.clone();
            if l > 0 {
                let weights = &w.layers()[2 * l];
                let prev = &self.layers[l - 1];
                delta = (0..input.len())
                    .map(|i| {
                        let back = weights
                            .filters()
                            .iter()
                            .zip(&delta)
                            .fold(S::cst(0.0), |acc, (row, &d)| {
                                acc + S::cst(row.values()[i]) * d
                            });
                        back * prev.activation.derivative(pre[l - 1][i], acts[l][i])
                    })
                    .collect();
            }
        }
        (loss, grads.into_iter().flatten().collect())
    }
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(z: &[S]) -> Vec<S> {
    let m = z
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = z.iter().map(|&v| (v - S::cst(m)).exp()).collect();
    let sum = e.iter().fold(S::cst(0.0), |a, &b| a + b);
    e.into_iter().map(|v| v / sum).collect()
}

/// `(-log softmax(z)[label], softmax(z))`.
pub fn cross_entropy<S: Scalar>(z: &[S], label: usize) -> (S, Vec<S>) {
    let m = z
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = z.iter().map(|&v| (v - S::cst(m)).exp()).collect();
    let sum = e.iter().fold(S::cst(0.0), |a, &b| a + b);
    let loss = sum.ln() - (z[label] - S::cst(m));
    (loss, e.into_iter().map(|v| v / sum).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Labelling rule for synthetic data: `argmax_j (T (x - 1/2))_j` with a random
/// Gaussian teacher matrix, optionally with uniform label noise.
#[derive(Debug, Clone)]
pub struct Teacher {
    rows: Vec<Vec<f64>>,
}

impl Teacher {
    pub fn new(dim: usize, classes: usize, stream: Stream) -> Self {
        let mut rng = stream.rng();
        Teacher {
            rows: (0..classes)
                .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
        }
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let scores = self
            .rows
            .iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| a * (b - 0.5)).sum::<f64>());
        scores
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, s)| {
                if s > best.1 {
                    (j, s)
                } else {
                    best
                }
            })
            .0
    }

    /// `n` inputs uniform on the unit hypercube. With probability
    /// `label_noise` a label is replaced by a uniformly random class.
    pub fn sample(&self, n: usize, label_noise: f64, stream: Stream) -> Vec<Sample> {
        let dim = self.rows[0].len();
        let classes = self.rows.len();
        let mut rng = stream.rng();
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
                let mut label = self.label(&x);
                if rng.random::<f64>() < label_noise {
                    label = rng.random_range(0..classes);
                }
                Sample { x, label }
            })
            .collect()
    }
}

/// A client's classification loss over its local dataset.
#[derive(Debug, Clone)]
pub struct ClassifierObjective {
    arch: Architecture,
    data: Vec<Sample>,
}

impl ClassifierObjective {
    pub fn new(arch: Architecture, data: Vec<Sample>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for (i, s) in data.iter().enumerate() {
            arch.check_input(s.x.len())?;
            if s.label >= arch.n_classes() {
                return Err(Error::InvalidParams(format!(
                    "sample {i} has label {} but there are {} classes",
                    s.label,
                    arch.n_classes()
                )));
            }
        }
        Ok(ClassifierObjective { arch, data })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn data(&self) -> &[Sample] {
        &self.data
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, w: &LayeredParams, batch: &[Sample]) -> Result<f64> {
        self.loss_grad(w, batch).map(|(l, _)| l)
    }

    /// Mean gradient over `batch`.
    pub fn grad(&self, w: &LayeredParams, batch: &[Sample]) -> Result<LayeredParams> {
        self.loss_grad(w, batch).map(|(_, g)| g)
    }

    pub fn loss_grad(&self, w: &LayeredParams, batch: &[Sample]) -> Result<(f64, LayeredParams)> {
        batch_loss_grad(&self.arch, w, batch)
    }

    pub fn full_loss(&self, w: &LayeredParams) -> Result<f64> {
        self.loss(w, &self.data)
    }

    /// Gradient on a batch drawn uniformly with replacement.
    pub fn stochastic_grad<R: Rng + ?Sized>(
        &self,
        w: &LayeredParams,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<LayeredParams> {
        let batch: Vec<Sample> = (0..batch_size.max(1))
            .map(|_| self.data[rng.random_range(0..self.data.len())].clone())
            .collect();
        self.grad(w, &batch)
    }
}

/// Mean loss and mean gradient of `arch` at `w` over `batch`.
pub fn batch_loss_grad(
    arch: &Architecture,
    w: &LayeredParams,
    batch: &[Sample],
) -> Result<(f64, LayeredParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    arch.check(w)?;
    let mut total = 0.0;
    let mut acc = vec![0.0; arch.num_params()];
    for s in batch {
        arch.check_input(s.x.len())?;
        if s.label >= arch.n_classes() {
            return Err(Error::InvalidParams(format!(
                "label {} out of range",
                s.label
            )));
        }
        let (l, g) = arch.sample_loss_grad::<f64>(w, &s.x, s.label);
        total += l;
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    let g = LayeredParams::from_flat(&arch.shape(), &acc)?;
    Ok((total / n, g))
}
