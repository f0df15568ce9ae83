//! Input reconstruction: find `x` whose parameter gradient matches a shared
//! gradient, by gradient descent on the squared gradient difference.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::scalar::Dual;
use crate::objectives::Architecture;
use crate::params::LayeredParams;
use crate::rng::Stream;
use crate::sbpu::{sbpu_mutate, DiversityRates};

use super::{psnr, AttackKind, AttackOutcome, AttackReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrConfig {
    pub iters: usize,
    pub step: f64,
}

impl Default for IrConfig {
    fn default() -> Self {
        IrConfig {
            iters: 2000,
            step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrResult {
    /// Best iterate found.
    pub x: Vec<f64>,
    pub objective: f64,
    pub best_iteration: usize,
    /// Best objective seen after each iteration.
    pub trace: Vec<f64>,
}

/// `|dL(x, label; w)/dw - target|^2` and its gradient wrt `x`, using one
/// forward-mode pass per input coordinate.
pub fn gradient_match(
    arch: &Architecture,
    w: &LayeredParams,
    target: &[f64],
    x: &[f64],
    label: usize,
) -> (f64, Vec<f64>) {
    let mut objective = 0.0;
    let mut grad = vec![0.0; x.len()];
    let mut xd: Vec<Dual> = x.iter().map(|&v| Dual::new(v, 0.0)).collect();
    for i in 0..x.len() {
        xd[i].du = 1.0;
        let (_, g) = arch.sample_loss_grad(w, &xd, label);
        xd[i].du = 0.0;
        let mut d = 0.0;
        let mut obj = 0.0;
        for (gj, tj) in g.iter().zip(target) {
            let r = gj.re - tj;
            obj += r * r;
            d += 2.0 * r * gj.du;
        }
        objective = obj;
        grad[i] = d;
    }
    if x.is_empty() {
        let (_, g) = arch.sample_loss_grad::<f64>(w, &[], label);
        objective = g.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    }
    (objective, grad)
}

/// Plain gradient descent from `x_init` (uniform on the unit hypercube when
/// not given); returns the best iterate.
pub fn ir_reconstruct(
    arch: &Architecture,
    target_grad: &LayeredParams,
    model_w: &LayeredParams,
    y_dummy: usize,
    x_init: Option<&[f64]>,
    cfg: &IrConfig,
    stream: Stream,
) -> Result<IrResult> {
    if cfg.iters == 0 {
        return Err(Error::InvalidParams("iters must be >= 1".into()));
    }
    if target_grad.shape() != arch.shape() || model_w.shape() != arch.shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            filter: None,
            detail: "target gradient and model must match the architecture".into(),
        });
    }
    if y_dummy >= arch.n_classes() {
        return Err(Error::InvalidParams(format!(
            "label {y_dummy} out of range"
        )));
    }
    let mut x: Vec<f64> = match x_init {
        Some(x0) if x0.len() != arch.input_dim() => {
            return Err(Error::Dimension {
                expected: arch.input_dim(),
                got: x0.len(),
            })
        }
        Some(x0) => x0.to_vec(),
        None => {
            let mut rng = stream.rng();
            (0..arch.input_dim()).map(|_| rng.random::<f64>()).collect()
        }
    };
    let target = target_grad.to_flat();
    let mut best = (x.clone(), f64::INFINITY, 0);
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let (obj, g) = gradient_match(arch, model_w, &target, &x, y_dummy);
        if !obj.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: it });
        }
        if obj < best.1 {
            best = (x.clone(), obj, it);
        }
        trace.push(best.1);
        if obj == 0.0 {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= cfg.step * gi;
        }
    }
    Ok(IrResult {
        x: best.0,
        objective: best.1,
        best_iteration: best.2,
        trace,
    })
}

/// Single-sample reconstruction on a linear softmax model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrExperiment {
    pub input_dim: usize,
    pub classes: usize,
    pub ir: IrConfig,
    /// Diversity rate of the mutation applied in the mismatched setting.
    pub beta: f64,
    /// Scale of the previous global steps used by that mutation.
    pub lag_scale: f64,
}

impl Default for IrExperiment {
    fn default() -> Self {
        IrExperiment {
            input_dim: 64,
            classes: 10,
            ir: IrConfig::default(),
            beta: 0.25,
            lag_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrOutcome {
    pub report: AttackReport,
    pub x_true: Vec<f64>,
    pub result: IrResult,
}

impl IrExperiment {
    /// `mutated = false`: the shared gradient comes from the model the attacker
    /// holds. `mutated = true`: the client trained on its own diverse copy of
    /// that model, so the attacker's model no longer matches.
    pub fn run(&self, mutated: bool, stream: Stream) -> Result<IrOutcome> {
        let arch = Architecture::linear(self.input_dim, self.classes)?;
        let w = arch.init(1.0, stream.child(0));
        let mut rng = stream.child(1).rng();
        let x_true: Vec<f64> = (0..self.input_dim).map(|_| rng.random::<f64>()).collect();
        let label = rng.random_range(0..self.classes);
        let client_w = if mutated {
            let lag = |tag: u64| {
                let mut r = stream.child(tag).rng();
                w.map(|_| self.lag_scale * r.sample::<f64, _>(StandardNormal))
            };
            sbpu_mutate(
                &w,
                &lag(2),
                &lag(3),
                DiversityRates::from_beta(self.beta)?,
                stream.child(4),
            )?
        } else {
            w.clone()
        };
        let (_, g) = arch.sample_loss_grad::<f64>(&client_w, &x_true, label);
        let target = LayeredParams::from_flat(&arch.shape(), &g)?;
        let result = ir_reconstruct(&arch, &target, &w, label, None, &self.ir, stream.child(5))?;
        let clamped: Vec<f64> = result.x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let max_error = result
            .x
            .iter()
            .zip(&x_true)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let report = AttackReport {
            attack: AttackKind::Ir,
            setting: if mutated {
                "sbpu_mismatched"
            } else {
                "shared_classifier"
            }
            .into(),
            outcome: AttackOutcome::Reconstruction {
                psnr: psnr(&clamped, &x_true)?,
                objective: result.objective,
                max_error,
            },
        };
        Ok(IrOutcome {
            report,
            x_true,
            result,
        })
    }
}
