//! Label inference from the final-layer bias gradient.
//!
//! For softmax cross-entropy the bias gradient averaged over a batch is
//! `mean(y') - counts / bs`, so an attacker who can estimate `mean(y')`
//! recovers the per-class counts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{batch_loss_grad, Architecture, Sample};
use crate::params::LayeredParams;
use crate::rng::Stream;

use super::{AttackKind, AttackOutcome, AttackReport};

/// `y_pred - y_true`: gradient of cross-entropy wrt the logits.
pub fn logit_grad_identity(y_pred: &[f64], y_true: &[f64]) -> Result<Vec<f64>> {
    if y_pred.len() != y_true.len() {
        return Err(Error::Dimension {
            expected: y_pred.len(),
            got: y_true.len(),
        });
    }
    Ok(y_pred.iter().zip(y_true).map(|(p, y)| p - y).collect())
}

/// `round(bs (mean_pred_j - bias_grad_j))` clamped to `[0, bs]`.
pub fn lia_infer_counts(bias_grad: &[f64], mean_pred: &[f64], bs: usize) -> Result<Vec<u64>> {
    if bias_grad.len() != mean_pred.len() {
        return Err(Error::Dimension {
            expected: mean_pred.len(),
            got: bias_grad.len(),
        });
    }
    if bs == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(bias_grad
        .iter()
        .zip(mean_pred)
        .map(|(g, p)| (bs as f64 * (p - g)).round().clamp(0.0, bs as f64) as u64)
        .collect())
}

/// Mean softmax output over `n_probes` inputs uniform on the unit hypercube.
pub fn estimate_mean_predictions<R: Rng + ?Sized>(
    arch: &Architecture,
    w: &LayeredParams,
    n_probes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_probes == 0 {
        return Err(Error::InvalidParams("n_probes must be >= 1".into()));
    }
    let mut acc = vec![0.0; arch.n_classes()];
    let mut x = vec![0.0; arch.input_dim()];
    for _ in 0..n_probes {
        x.iter_mut().for_each(|v| *v = rng.random::<f64>());
        for (a, p) in acc.iter_mut().zip(arch.predict_checked(w, &x)?) {
            *a += p;
        }
    }
    Ok(acc.into_iter().map(|a| a / n_probes as f64).collect())
}

/// Gradient of the batch-mean loss wrt the last layer's bias.
pub fn final_bias_grad(
    arch: &Architecture,
    w: &LayeredParams,
    batch: &[Sample],
) -> Result<Vec<f64>> {
    let (_, g) = batch_loss_grad(arch, w, batch)?;
    let last = g.layers().last().expect("architectures have layers");
    Ok(last.filters()[0].values().to_vec())
}

pub fn label_histogram(batch: &[Sample], classes: usize) -> Vec<u64> {
    let mut h = vec![0; classes];
    for s in batch {
        h[s.label] += 1;
    }
    h
}

pub fn l1_distance(a: &[u64], b: &[u64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).sum()
}

/// Settings of a label-inference trial on an untrained classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiaConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub probes: usize,
    pub trials: usize,
}

impl Default for LiaConfig {
    fn default() -> Self {
        LiaConfig {
            input_dim: 64,
            hidden: 32,
            classes: 10,
            batch_size: 10,
            probes: 1000,
            trials: 100,
        }
    }
}

/// Runs `cfg.trials` independent trials and reports the summed L1 count
/// error. With `shared = false` the attacker sees no classifier gradient and
/// can only guess an even split.
pub fn lia_experiment(cfg: &LiaConfig, shared: bool, stream: Stream) -> Result<AttackReport> {
    let arch = Architecture::mlp(
        cfg.input_dim,
        cfg.hidden,
        cfg.classes,
        crate::objectives::Activation::Sigmoid,
    )?;
    let mut total = 0;
    for trial in 0..cfg.trials {
        let s = stream.child(trial as u64);
        let w = arch.init(1.0, s.child(0));
        let mut rng = s.child(1).rng();
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| Sample {
                x: (0..cfg.input_dim).map(|_| rng.random::<f64>()).collect(),
                label: rng.random_range(0..cfg.classes),
            })
            .collect();
        let truth = label_histogram(&batch, cfg.classes);
        let guess = if shared {
            let grad = final_bias_grad(&arch, &w, &batch)?;
            let mean = estimate_mean_predictions(&arch, &w, cfg.probes, &mut s.child(2).rng())?;
            lia_infer_counts(&grad, &mean, cfg.batch_size)?
        } else {
            let base = (cfg.batch_size / cfg.classes) as u64;
            let extra = cfg.batch_size % cfg.classes;
            (0..cfg.classes)
                .map(|j| base + u64::from(j < extra))
                .collect()
        };
        total += l1_distance(&guess, &truth);
    }
    Ok(AttackReport {
        attack: AttackKind::Lia,
        setting: if shared {
            "shared_classifier"
        } else {
            "no_classifier_sharing"
        }
        .into(),
        outcome: AttackOutcome::LabelCounts {
            l1_error: total,
            labels: cfg.batch_size * cfg.trials,
        },
    })
}
