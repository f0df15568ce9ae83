//! Client objectives, the SGD step and the decaying learning-rate schedule.

pub mod classifier;
pub mod quadratic;
pub mod scalar;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use classifier::{
    batch_loss_grad, softmax, Activation, Architecture, ClassifierObjective, DenseSpec, Sample,
    Teacher,
};
pub use quadratic::QuadraticObjective;

use crate::error::{Error, Result};
use crate::params::{check_same_shape, LayeredParams, Shape};

/// A client's loss function.
#[derive(Debug, Clone)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Classifier(ClassifierObjective),
}

impl Objective {
    pub fn shape(&self) -> Shape {
        match self {
            Objective::Quadratic(q) => q.shape().clone(),
            Objective::Classifier(c) => c.architecture().shape(),
        }
    }

    /// Mean per-sample loss on `batch`. Quadratics ignore the batch.
    pub fn loss(&self, w: &LayeredParams, batch: &[Sample]) -> Result<f64> {
        match self {
            Objective::Quadratic(q) => q.loss(w),
            Objective::Classifier(c) => c.loss(w, batch),
        }
    }

    pub fn grad(&self, w: &LayeredParams, batch: &[Sample]) -> Result<LayeredParams> {
        match self {
            Objective::Quadratic(q) => q.grad(w),
            Objective::Classifier(c) => c.grad(w, batch),
        }
    }

    /// Loss over the client's whole local data.
    pub fn full_loss(&self, w: &LayeredParams) -> Result<f64> {
        match self {
            Objective::Quadratic(q) => q.loss(w),
            Objective::Classifier(c) => c.full_loss(w),
        }
    }

    /// One stochastic gradient: sphere noise for quadratics, a fresh batch
    /// drawn with replacement for classifiers.
    pub fn stochastic_grad<R: Rng + ?Sized>(
        &self,
        w: &LayeredParams,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<LayeredParams> {
        match self {
            Objective::Quadratic(q) => q.stochastic_grad(w, rng),
            Objective::Classifier(c) => c.stochastic_grad(w, batch_size, rng),
        }
    }

    /// Projection ball `(center, radius)` for constrained objectives.
    pub fn ball(&self) -> Option<(LayeredParams, f64)> {
        match self {
            Objective::Quadratic(q) => Some((q.center(), q.radius())),
            Objective::Classifier(_) => None,
        }
    }
}

/// `eta_t = 2 / (mu (t + gamma))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub mu: f64,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(mu: f64, gamma: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite() && gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "schedule needs mu > 0 and gamma > 0 (got mu = {mu}, gamma = {gamma})"
            )));
        }
        Ok(LrSchedule { mu, gamma })
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        lr_at(self, t)
    }
}

pub fn lr_at(s: &LrSchedule, t: u64) -> f64 {
    2.0 / (s.mu * (t as f64 + s.gamma))
}

/// Step size used by local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Decaying(LrSchedule),
    Fixed(f64),
}

impl StepSize {
    pub fn at(&self, t: u64) -> f64 {
        match self {
            StepSize::Decaying(s) => s.lr_at(t),
            StepSize::Fixed(eta) => *eta,
        }
    }
}

/// Constants under which the convergence bound is stated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    /// Smoothness L.
    pub l: f64,
    /// Strong convexity mu.
    pub mu: f64,
    /// Per-client stochastic-gradient noise bound.
    pub sigma: Vec<f64>,
    /// Gradient-norm bound on the constrained domain.
    pub g: f64,
    pub kappa: f64,
    pub gamma: f64,
}

/// `L = max lambda_max`, `mu = min lambda_min`, `G = L R + max sigma`,
/// `kappa = L / mu`, `gamma = max(8 kappa, E)`.
pub fn constants_for(
    objs: &[QuadraticObjective],
    e: usize,
    radius: f64,
) -> Result<AssumptionConstants> {
    let Some(first) = objs.first() else {
        return Err(Error::InvalidParams("no objectives".into()));
    };
    if let Some(k) = objs.iter().position(|o| o.shape() != first.shape()) {
        return Err(Error::ShapeMismatch {
            layer: 0,
            filter: None,
            detail: format!("objective {k} has a different parameter shape"),
        });
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidParams(format!("radius {radius} must be > 0")));
    }
    let l = objs
        .iter()
        .map(|o| o.lambda_max())
        .fold(f64::NEG_INFINITY, f64::max);
    let mu = objs
        .iter()
        .map(|o| o.lambda_min())
        .fold(f64::INFINITY, f64::min);
    if mu <= 0.0 {
        return Err(Error::NotSpd(format!("mu = {mu}")));
    }
    let sigma: Vec<f64> = objs.iter().map(|o| o.noise_sigma()).collect();
    let max_sigma = sigma.iter().copied().fold(0.0, f64::max);
    let kappa = l / mu;
    Ok(AssumptionConstants {
        l,
        mu,
        g: l * radius + max_sigma,
        kappa,
        gamma: (8.0 * kappa).max(e as f64),
        sigma,
    })
}

/// `w - eta g`, then Euclidean projection onto the ball when one is given.
pub fn sgd_step(
    w: &LayeredParams,
    g: &LayeredParams,
    eta: f64,
    ball: Option<(&LayeredParams, f64)>,
) -> Result<LayeredParams> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidParams(format!("step size {eta} must be > 0")));
    }
    let stepped = w.zip_map(g, |a, b| a - eta * b)?;
    match ball {
        None => Ok(stepped),
        Some((center, radius)) => project(&stepped, center, radius),
    }
}

/// Projection onto `{x : |x - center| <= radius}`.
pub fn project(w: &LayeredParams, center: &LayeredParams, radius: f64) -> Result<LayeredParams> {
    check_same_shape(w, center)?;
    let offset = w.zip_map(center, |a, c| a - c)?;
    let dist = offset.norm();
    if dist <= radius {
        return Ok(w.clone());
    }
    let s = radius / dist;
    center.zip_map(&offset, |c, o| c + s * o)
}
