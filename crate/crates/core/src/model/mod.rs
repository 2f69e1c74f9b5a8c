//! Differentiable models with exact loss, gradient, Hessian-vector product
//! and dense Hessian.
//!
//! Every model is a fully connected network: linear and logistic regression
//! are the zero-hidden-layer cases. Batch quantities are means over samples.
//! Hessian-vector products use the forward-over-reverse R-operator, so they
//! are exact up to floating point and never form the Hessian.

mod mlp;
mod param;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use param::{DenseMatrix, ParamVector};

/// Largest parameter count for which [`ModelSpec::dense_hessian`] will run.
pub const DEFAULT_HESSIAN_CAP: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label:?} is not usable with this model: {reason}")]
    Label { label: Label, reason: &'static str },
    #[error("dense Hessian of {d} parameters exceeds the cap of {cap}; use hvp instead")]
    HessianCap { d: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// A training or evaluation label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Class(usize),
    Target(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Target(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: Label) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRecord", into = "ModelSpecRecord")]
pub struct ModelSpec {
    kind: ModelKind,
    layer_sizes: Vec<usize>,
    activation: Activation,
    loss: LossKind,
    layers: Vec<mlp::Layer>,
    d: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSpecRecord {
    kind: ModelKind,
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
    loss: LossKind,
}

impl From<ModelSpec> for ModelSpecRecord {
    fn from(m: ModelSpec) -> Self {
        Self {
            kind: m.kind,
            layer_sizes: m.layer_sizes,
            activation: m.activation,
            loss: m.loss,
        }
    }
}

impl TryFrom<ModelSpecRecord> for ModelSpec {
    type Error = ModelError;

    fn try_from(r: ModelSpecRecord) -> Result<Self, ModelError> {
        ModelSpec::new(r.kind, r.layer_sizes, r.activation, r.loss)
    }
}

impl ModelSpec {
    pub fn new(
        kind: ModelKind,
        layer_sizes: Vec<usize>,
        activation: Activation,
        loss: LossKind,
    ) -> Result<Self, ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        match kind {
            ModelKind::LinearRegression if layer_sizes.len() != 2 || loss != LossKind::SquaredError => {
                return bad("linear regression takes [inputs, outputs] and squared error");
            }
            ModelKind::LogisticRegression if layer_sizes.len() != 2 || loss != LossKind::CrossEntropy => {
                return bad("logistic regression takes [inputs, classes] and cross-entropy");
            }
            ModelKind::Mlp if layer_sizes.len() < 3 => {
                return bad("an mlp needs at least one hidden layer");
            }
            _ => {}
        }
        if layer_sizes.iter().skip(1).any(|&w| w == 0) {
            return bad("hidden and output widths must be positive");
        }
        if loss == LossKind::CrossEntropy && *layer_sizes.last().unwrap_or(&0) < 2 {
            return bad("cross-entropy needs at least two outputs");
        }
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        let mut offset = 0;
        for pair in layer_sizes.windows(2) {
            let layer = mlp::Layer::new(pair[0], pair[1], offset);
            offset = layer.end();
            layers.push(layer);
        }
        Ok(Self {
            kind,
            layer_sizes,
            activation,
            loss,
            layers,
            d: offset,
        })
    }

    /// Squared-error linear regression `inputs -> outputs`.
    pub fn linear_regression(inputs: usize, outputs: usize) -> Self {
        Self::new(
            ModelKind::LinearRegression,
            vec![inputs, outputs],
            Activation::Tanh,
            LossKind::SquaredError,
        )
        .expect("valid linear spec")
    }

    /// Softmax regression over `classes` outputs.
    pub fn logistic_regression(inputs: usize, classes: usize) -> Result<Self, ModelError> {
        Self::new(
            ModelKind::LogisticRegression,
            vec![inputs, classes],
            Activation::Tanh,
            LossKind::CrossEntropy,
        )
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self, ModelError> {
        Self::new(ModelKind::Mlp, layer_sizes, activation, loss)
    }

    /// The scalar model `L(θ; z) = ½(θ − z)²`: a bias-only linear regression.
    pub fn scalar_quadratic() -> Self {
        Self::linear_regression(0, 1)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    /// Parameter count.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut theta = ParamVector::zeros(self.d);
        for layer in &self.layers {
            if layer.inp == 0 {
                continue;
            }
            let bound = (6.0 / (layer.inp + layer.out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut theta.0[layer.w_off..layer.b_off] {
                *w = dist.sample(rng);
            }
        }
        theta
    }

    fn check(&self, theta: &ParamVector, batch: &[&Sample]) -> Result<(), ModelError> {
        if theta.len() != self.d {
            return Err(ModelError::Shape {
                what: "parameters",
                expected: self.d,
                got: theta.len(),
            });
        }
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for s in batch {
            if s.features.len() != self.input_dim() {
                return Err(ModelError::Shape {
                    what: "features",
                    expected: self.input_dim(),
                    got: s.features.len(),
                });
            }
            self.check_label(s.label)?;
        }
        Ok(())
    }

    fn check_label(&self, label: Label) -> Result<(), ModelError> {
        let out = self.output_dim();
        match (self.loss, label) {
            (LossKind::CrossEntropy, Label::Target(_)) => Err(ModelError::Label {
                label,
                reason: "cross-entropy needs a class label",
            }),
            (_, Label::Class(c)) if c >= out => Err(ModelError::Label {
                label,
                reason: "class index exceeds the output width",
            }),
            (LossKind::SquaredError, Label::Target(_)) if out != 1 => Err(ModelError::Label {
                label,
                reason: "a scalar target needs a single output",
            }),
            _ => Ok(()),
        }
    }

    /// Mean per-sample loss over the batch.
    pub fn loss(&self, theta: &ParamVector, batch: &[&Sample]) -> Result<f64, ModelError> {
        self.check(theta, batch)?;
        let mut ws = mlp::Workspace::new(self);
        let total: f64 = batch.iter().map(|s| mlp::sample_loss(self, theta, s, &mut ws)).sum();
        Ok(total / batch.len() as f64)
    }

    /// Gradient of the mean batch loss.
    pub fn gradient(&self, theta: &ParamVector, batch: &[&Sample]) -> Result<ParamVector, ModelError> {
        self.check(theta, batch)?;
        let mut ws = mlp::Workspace::new(self);
        let mut g = ParamVector::zeros(self.d);
        for s in batch {
            mlp::accumulate_gradient(self, theta, s, &mut ws, &mut g);
        }
        let inv = 1.0 / batch.len() as f64;
        g.0.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }

    /// Gradient of each sample's own loss, in batch order.
    pub fn per_sample_gradients(
        &self,
        theta: &ParamVector,
        batch: &[&Sample],
    ) -> Result<Vec<ParamVector>, ModelError> {
        self.check(theta, batch)?;
        let mut ws = mlp::Workspace::new(self);
        Ok(batch
            .iter()
            .map(|s| {
                let mut g = ParamVector::zeros(self.d);
                mlp::accumulate_gradient(self, theta, s, &mut ws, &mut g);
                g
            })
            .collect())
    }

    /// Hessian of the mean batch loss applied to `v`.
    pub fn hvp(&self, theta: &ParamVector, batch: &[&Sample], v: &ParamVector) -> Result<ParamVector, ModelError> {
        self.check(theta, batch)?;
        if v.len() != self.d {
            return Err(ModelError::Shape {
                what: "direction",
                expected: self.d,
                got: v.len(),
            });
        }
        let mut ws = mlp::Workspace::new(self);
        let mut hv = ParamVector::zeros(self.d);
        for s in batch {
            mlp::accumulate_hvp(self, theta, s, v, &mut ws, &mut hv);
        }
        let inv = 1.0 / batch.len() as f64;
        hv.0.iter_mut().for_each(|x| *x *= inv);
        Ok(hv)
    }

    pub fn dense_hessian(&self, theta: &ParamVector, batch: &[&Sample]) -> Result<DenseMatrix, ModelError> {
        self.dense_hessian_capped(theta, batch, DEFAULT_HESSIAN_CAP)
    }

    /// Column `i` is `hvp(e_i)`.
    pub fn dense_hessian_capped(
        &self,
        theta: &ParamVector,
        batch: &[&Sample],
        cap: usize,
    ) -> Result<DenseMatrix, ModelError> {
        if self.d > cap {
            return Err(ModelError::HessianCap { d: self.d, cap });
        }
        let mut h = DenseMatrix::zeros(self.d, self.d);
        for c in 0..self.d {
            let col = self.hvp(theta, batch, &ParamVector::basis(self.d, c))?;
            for r in 0..self.d {
                h.set(r, c, col[r]);
            }
        }
        Ok(h)
    }

    /// The SGD optimizer displacement `O(θ, z) − θ = −η ∇L(θ; z)`.
    pub fn sgd_displacement(&self, theta: &ParamVector, batch: &[&Sample], lr: f64) -> Result<ParamVector, ModelError> {
        if !(lr > 0.0) {
            return Err(ModelError::InvalidSpec(format!("step size must be positive, got {lr}")));
        }
        Ok(self.gradient(theta, batch)?.scaled(-lr))
    }

    /// Index of the largest output.
    pub fn predict_class(&self, theta: &ParamVector, features: &[f64]) -> usize {
        let mut ws = mlp::Workspace::new(self);
        let out = mlp::forward(self, theta, features, &mut ws);
        out.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// Smallest absolute hidden pre-activation over the batch; relu kinks sit at zero.
    pub fn min_abs_preactivation(&self, theta: &ParamVector, batch: &[&Sample]) -> f64 {
        let mut ws = mlp::Workspace::new(self);
        batch
            .iter()
            .map(|s| {
                mlp::forward(self, theta, &s.features, &mut ws);
                ws.min_abs_hidden_pre()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Borrow every sample of a slice, for APIs taking `&[&Sample]`.
pub fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}
