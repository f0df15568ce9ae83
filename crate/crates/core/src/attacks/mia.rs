//! Shadow-model membership inference.
//!
//! The attacker rebuilds a copy of the victim model on its own shadow data
//! `D*_victim` (labelled "in"), runs `D*_others` through the model of the
//! remaining clients (labelled "out"), and trains a small classifier on the
//! resulting prediction vectors. Suspect samples are then scored through the
//! victim model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{batch_loss_grad, Activation, Architecture, Sample, Teacher};
use crate::params::LayeredParams;
use crate::rng::Stream;

use super::{AttackKind, AttackOutcome, AttackReport, Confusion};

/// Adam with the usual defaults for the moment decay rates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.005,
            batch_size: 20,
        }
    }
}

/// Mini-batch Adam on the mean cross-entropy, reshuffling every epoch.
pub fn train_adam(
    arch: &Architecture,
    w0: &LayeredParams,
    data: &[Sample],
    cfg: &TrainConfig,
    stream: Stream,
) -> Result<LayeredParams> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shape = arch.shape();
    let mut flat = w0.to_flat();
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream.rng();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let w = LayeredParams::from_flat(&shape, &flat)
                .map_err(|_| Error::Divergence { iteration: epoch })?;
            let (_, g) = batch_loss_grad(arch, &w, &batch)?;
            opt.step(&mut flat, &g.to_flat());
        }
    }
    LayeredParams::from_flat(&shape, &flat).map_err(|_| Error::Divergence {
        iteration: cfg.epochs,
    })
}

/// Attack-classifier training; defaults follow the usual shadow-model recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for MiaTrainConfig {
    fn default() -> Self {
        MiaTrainConfig {
            epochs: 100,
            lr: 0.005,
            batch_size: 32,
            hidden: 128,
        }
    }
}

/// A frozen model: architecture plus weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub w: LayeredParams,
}

impl Model {
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.arch.predict_checked(&self.w, x)
    }
}

#[derive(Debug, Clone)]
pub struct ShadowSetup {
    /// Attacker's rebuilt copy of the victim model.
    pub victim_copy: Model,
    /// Model the suspect samples are scored through.
    pub victim: Model,
    /// Aggregate of the non-victim clients.
    pub others: Model,
    pub shadow_victim: Vec<Sample>,
    pub shadow_others: Vec<Sample>,
}

impl ShadowSetup {
    pub fn validate(&self) -> Result<()> {
        if self.shadow_victim.is_empty() || self.shadow_others.is_empty() {
            return Err(Error::DegenerateSplit(format!(
                "shadow split has {} victim and {} other samples",
                self.shadow_victim.len(),
                self.shadow_others.len()
            )));
        }
        if self
            .shadow_victim
            .iter()
            .any(|s| self.shadow_others.contains(s))
        {
            return Err(Error::DegenerateSplit("shadow halves overlap".into()));
        }
        Ok(())
    }
}

/// Trains the attack classifier and scores `suspects` (`(sample, is_member)`);
/// the member flags are only used for scoring.
pub fn mia_run(
    setup: &ShadowSetup,
    suspects: &[(Sample, bool)],
    cfg: &MiaTrainConfig,
    setting: &str,
    stream: Stream,
) -> Result<AttackReport> {
    setup.validate()?;
    let n_c = setup.victim.arch.n_classes();
    let mut train = Vec::with_capacity(setup.shadow_victim.len() + setup.shadow_others.len());
    for s in &setup.shadow_victim {
        train.push(Sample {
            x: setup.victim_copy.predict(&s.x)?,
            label: 1,
        });
    }
    for s in &setup.shadow_others {
        train.push(Sample {
            x: setup.others.predict(&s.x)?,
            label: 0,
        });
    }
    let attack = Architecture::mlp(n_c, cfg.hidden, 2, Activation::Relu)?;
    let w0 = attack.init(1.0, stream.child(0));
    let tc = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
    };
    let w = train_adam(&attack, &w0, &train, &tc, stream.child(1))?;
    let mut truth = Vec::with_capacity(suspects.len());
    let mut pred = Vec::with_capacity(suspects.len());
    for (s, member) in suspects {
        let p = attack.predict_checked(&w, &setup.victim.predict(&s.x)?)?;
        truth.push(*member);
        pred.push(p[1] > p[0]);
    }
    let c = Confusion::from_labels(&truth, &pred)?;
    Ok(AttackReport {
        attack: AttackKind::Mia,
        setting: setting.into(),
        outcome: AttackOutcome::Membership {
            member: c.member(),
            nonmember: c.nonmember(),
            accuracy: c.accuracy(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaSetting {
    /// The attacker holds the victim's classifier parameters.
    SharedClassifier,
    /// Classifier parameters are never shared; the attacker only has a
    /// randomly initialised surrogate.
    NoClassifierSharing,
    /// Victim and others are the same model and see identically
    /// distributed data.
    ChanceControl,
}

impl MiaSetting {
    pub fn tag(self) -> &'static str {
        match self {
            MiaSetting::SharedClassifier => "shared_classifier",
            MiaSetting::NoClassifierSharing => "no_classifier_sharing",
            MiaSetting::ChanceControl => "chance_control",
        }
    }
}

/// Synthetic testbed where the victim memorises a small, noisily labelled
/// member set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiaTestbed {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub members: usize,
    pub others_size: usize,
    pub shadow_size: usize,
    pub label_noise: f64,
    pub victim_train: TrainConfig,
    pub attack: MiaTrainConfig,
    /// Fraction of the suspect set drawn from members.
    pub member_fraction: f64,
    pub suspects: usize,
}

impl Default for MiaTestbed {
    fn default() -> Self {
        MiaTestbed {
            input_dim: 16,
            hidden: 64,
            classes: 10,
            members: 100,
            others_size: 100,
            shadow_size: 100,
            label_noise: 0.3,
            victim_train: TrainConfig::default(),
            attack: MiaTrainConfig::default(),
            member_fraction: 0.5,
            suspects: 100,
        }
    }
}

impl MiaTestbed {
    pub fn run(&self, setting: MiaSetting, stream: Stream) -> Result<AttackReport> {
        let arch = Architecture::mlp(self.input_dim, self.hidden, self.classes, Activation::Relu)?;
        let teacher = Teacher::new(self.input_dim, self.classes, stream.child(0));
        let draw = |n: usize, tag: u64| teacher.sample(n, self.label_noise, stream.child(tag));
        let members = draw(self.members, 1);
        let others_data = draw(self.others_size, 2);
        let shadow_victim = draw(self.shadow_size, 3);
        let shadow_others = draw(self.shadow_size, 4);
        let n_members =
            ((self.suspects as f64 * self.member_fraction).round() as usize).min(self.members);
        let fresh = draw(self.suspects - n_members, 5);
        let suspects: Vec<(Sample, bool)> = members[..n_members]
            .iter()
            .cloned()
            .map(|s| (s, true))
            .chain(fresh.into_iter().map(|s| (s, false)))
            .collect();

        let init = arch.init(1.0, stream.child(6));
        let fit = |data: &[Sample], tag: u64| {
            train_adam(&arch, &init, data, &self.victim_train, stream.child(tag))
        };
        let model = |w: LayeredParams| Model {
            arch: arch.clone(),
            w,
        };
        let setup = match setting {
            MiaSetting::SharedClassifier => {
                let victim = fit(&members, 7)?;
                let others = fit(&others_data, 8)?;
                let copy = train_adam(
                    &arch,
                    &victim,
                    &shadow_victim,
                    &self.victim_train,
                    stream.child(9),
                )?;
                ShadowSetup {
                    victim_copy: model(copy),
                    victim: model(victim),
                    others: model(others),
                    shadow_victim,
                    shadow_others,
                }
            }
            MiaSetting::NoClassifierSharing => {
                let surrogate = arch.init(1.0, stream.child(10));
                let copy = train_adam(
                    &arch,
                    &surrogate,
                    &shadow_victim,
                    &self.victim_train,
                    stream.child(9),
                )?;
                ShadowSetup {
                    victim_copy: model(copy),
                    victim: model(surrogate.clone()),
                    others: model(surrogate),
                    shadow_victim,
                    shadow_others,
                }
            }
            MiaSetting::ChanceControl => {
                let pooled: Vec<Sample> = members.iter().chain(&others_data).cloned().collect();
                let both = fit(&pooled, 11)?;
                // the suspect members must not have been seen either
                let suspects_fresh: Vec<(Sample, bool)> = suspects
                    .iter()
                    .zip(draw(suspects.len(), 12))
                    .map(|((_, m), s)| (s, *m))
                    .collect();
                let setup = ShadowSetup {
                    victim_copy: model(both.clone()),
                    victim: model(both.clone()),
                    others: model(both),
                    shadow_victim,
                    shadow_others,
                };
                return mia_run(
                    &setup,
                    &suspects_fresh,
                    &self.attack,
                    setting.tag(),
                    stream.child(13),
                );
            }
        };
        mia_run(
            &setup,
            &suspects,
            &self.attack,
            setting.tag(),
            stream.child(13),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut x = vec![1.0, 1.0];
        let mut opt = Adam::new(2, 0.01);
        opt.step(&mut x, &[4.0, -0.5]);
        assert!((x[0] - 0.99).abs() < 1e-9 && (x[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn training_memorises_a_small_set() {
        let arch = Architecture::mlp(4, 32, 3, Activation::Relu).unwrap();
        let data = Teacher::new(4, 3, Stream::new(1)).sample(20, 0.3, Stream::new(2));
        let w0 = arch.init(1.0, Stream::new(3));
        let cfg = TrainConfig {
            epochs: 300,
            lr: 0.01,
            batch_size: 10,
        };
        let w = train_adam(&arch, &w0, &data, &cfg, Stream::new(4)).unwrap();
        let (loss, _) = batch_loss_grad(&arch, &w, &data).unwrap();
        assert!(loss < 0.05, "{loss}");
    }

    #[test]
    fn degenerate_split_is_rejected() {
        let arch = Architecture::linear(2, 2).unwrap();
        let w = arch.init(1.0, Stream::new(0));
        let m = Model { arch, w };
        let s = Sample {
            x: vec![0.1, 0.2],
            label: 0,
        };
        let setup = ShadowSetup {
            victim_copy: m.clone(),
            victim: m.clone(),
            others: m,
            shadow_victim: vec![s.clone()],
            shadow_others: vec![],
        };
        let err = mia_run(
            &setup,
            &[(s, true)],
            &MiaTrainConfig::default(),
            "x",
            Stream::new(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateSplit(_)));
    }
}
