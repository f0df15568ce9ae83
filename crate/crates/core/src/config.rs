//! JSON experiment configuration, validation and construction of the
//! simulated federation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::ir::IrExperiment;
use crate::attacks::lia::LiaConfig;
use crate::attacks::MiaTestbed;
use crate::convergence::ConvergenceSetup;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{ClientState, DefensePolicy, Federation, RoundSettings};
use crate::objectives::{
    constants_for, Activation, Architecture, AssumptionConstants, ClassifierObjective, LrSchedule,
    Objective, QuadraticObjective, StepSize, Teacher,
};
use crate::params::{LayeredParams, Shape};
use crate::rng::{domain, Stream};
use crate::sbpu::{DiversityRates, GlobalHistory, LagMode};

/// Named diversity-rate presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mnist,
    Fmnist,
    Cifar10,
    Svhn,
}

impl Preset {
    pub fn beta(self) -> f64 {
        match self {
            Preset::Mnist => 0.025,
            Preset::Fmnist => 0.25,
            Preset::Cifar10 => 0.15,
            Preset::Svhn => 1.1,
        }
    }
}

fn default_filters() -> usize {
    4
}
fn default_filter_len() -> usize {
    4
}
fn default_min_eig() -> f64 {
    1.0
}
fn default_max_eig() -> f64 {
    4.0
}
fn default_one() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    10.0
}
fn default_hidden() -> usize {
    32
}
fn default_label_noise() -> f64 {
    0.0
}

/// Client objective family. Quadratic parameters form `filters` dense filters
/// of `filter_len` scalars each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic {
        #[serde(default = "default_filters")]
        filters: usize,
        #[serde(default = "default_filter_len")]
        filter_len: usize,
        #[serde(default = "default_min_eig")]
        min_eig: f64,
        #[serde(default = "default_max_eig")]
        max_eig: f64,
        /// Standard deviation of the client optima around the origin.
        #[serde(default = "default_one")]
        center_scale: f64,
        /// Stochastic-gradient noise radius.
        #[serde(default)]
        sigma: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        /// Standard deviation of the initial model's entries.
        #[serde(default = "default_one")]
        init_scale: f64,
    },
    Classifier {
        input: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        classes: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        #[serde(default = "default_one")]
        init_gain: f64,
    },
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::Quadratic {
            filters: default_filters(),
            filter_len: default_filter_len(),
            min_eig: default_min_eig(),
            max_eig: default_max_eig(),
            center_scale: 1.0,
            sigma: 0.0,
            radius: default_radius(),
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub lia: LiaConfig,
    pub mia: MiaTestbed,
    pub ir: IrExperiment,
    /// Independent repetitions per attack setting.
    pub repeats: u64,
}

/// Everything needed to reproduce a run. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub experiment: String,
    pub preset: Option<Preset>,
    pub clients: usize,
    /// Per-client sample counts; aggregation weights are `n_k / N`. For
    /// classifiers this is also the local dataset size.
    pub n_k: Option<Vec<u64>>,
    pub objective: ObjectiveSpec,
    #[serde(rename = "E", alias = "e")]
    pub e: usize,
    pub batch_size: usize,
    /// Expands to `beta1 = beta`, `beta2 = beta^2`.
    pub beta: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    /// Neighbourhood coefficient used by the bound checks.
    pub alpha: Option<f64>,
    pub lag: LagMode,
    pub mu: Option<f64>,
    pub gamma_override: Option<f64>,
    /// Fixed learning rate; replaces the decaying schedule when set.
    pub lr: Option<f64>,
    pub defense: DefensePolicy,
    pub rounds: u64,
    pub seed: u64,
    /// Write a history checkpoint every this many rounds (0 = never).
    pub checkpoint_every: u64,
    /// Replicas averaged by the convergence experiment.
    pub seeds: u64,
    pub execution: Execution,
    pub attack: AttackSettings,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            experiment: "run".into(),
            preset: None,
            clients: 4,
            n_k: None,
            objective: ObjectiveSpec::default(),
            e: 5,
            batch_size: 1,
            beta: None,
            beta1: None,
            beta2: None,
            alpha: None,
            lag: LagMode::Dual,
            mu: None,
            gamma_override: None,
            lr: None,
            defense: DefensePolicy::None,
            rounds: 10,
            seed: 0,
            checkpoint_every: 0,
            seeds: 32,
            execution: Execution::default(),
            attack: AttackSettings {
                repeats: 1,
                ..AttackSettings::default()
            },
        }
    }
}

/// Config echo plus what is needed to reproduce a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: FederationConfig,
}

impl FederationConfig {
    /// Parses either a plain config or a run manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let cfg = if value.get("config").is_some() && value.get("version").is_some() {
            serde_json::from_value::<Manifest>(value)?.config
        } else {
            serde_json::from_value(value)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolved `(beta1, beta2)`.
    pub fn rates(&self) -> Result<DiversityRates> {
        match (self.beta1, self.beta2) {
            (Some(b1), Some(b2)) => DiversityRates::new(b1, b2),
            (None, None) => DiversityRates::from_beta(
                self.beta.or(self.preset.map(Preset::beta)).unwrap_or(0.0),
            ),
            _ => Err(Error::Config(vec![
                "beta1 and beta2 must be given together".into(),
            ])),
        }
    }

    /// Copy with presets expanded and every diversity rate written out.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let r = self.rates()?;
        if c.beta1.is_none() {
            c.beta = Some(r.beta1);
        }
        c.beta1 = Some(r.beta1);
        c.beta2 = Some(r.beta2);
        c.n_k = Some(self.sizes());
        Ok(c)
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.n_k.clone().unwrap_or_else(|| vec![100; self.clients])
    }

    /// `alpha` if set, otherwise `beta1`.
    pub fn alpha_or_beta1(&self) -> Result<f64> {
        Ok(self.alpha.unwrap_or(self.rates()?.beta1))
    }

    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.clients == 0 {
            errs.push("clients must be >= 1".to_string());
        }
        if let Some(n) = &self.n_k {
            if n.len() != self.clients {
                errs.push(format!(
                    "n_k has {} entries but clients = {}",
                    n.len(),
                    self.clients
                ));
            }
            if n.contains(&0) {
                errs.push("every n_k must be >= 1".into());
            }
        }
        if self.e == 0 {
            errs.push("E must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("beta", self.beta),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    errs.push(format!("{name} = {v} must be finite and >= 0"));
                }
            }
        }
        if self.beta1.is_some() != self.beta2.is_some() {
            errs.push("beta1 and beta2 must be given together".into());
        }
        if let Some(a) = self.alpha {
            if a.is_nan() || a < 0.0 {
                errs.push(format!("alpha = {a} must be >= 0"));
            } else if 1.0 - 4.0 * a * a <= 0.0 {
                errs.push(format!(
                    "alpha = {a} violates 1 - 4*alpha^2 > 0 (requires alpha < 0.5)"
                ));
            }
        }
        for (name, v) in [
            ("mu", self.mu),
            ("gamma_override", self.gamma_override),
            ("lr", self.lr),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    errs.push(format!("{name} = {v} must be finite and > 0"));
                }
            }
        }
        if let Err(e) = self.defense.validate() {
            errs.push(e.to_string());
        }
        if self.seeds == 0 {
            errs.push("seeds must be >= 1".into());
        }
        match &self.objective {
            ObjectiveSpec::Quadratic {
                filters,
                filter_len,
                min_eig,
                max_eig,
                center_scale,
                sigma,
                radius,
                init_scale,
            } => {
                if *filters == 0 || *filter_len == 0 {
                    errs.push("objective.filters and objective.filter_len must be >= 1".into());
                }
                if !(*min_eig > 0.0 && max_eig >= min_eig && max_eig.is_finite()) {
                    errs.push(format!("objective eigenvalues need 0 < min_eig <= max_eig (got {min_eig}, {max_eig})"));
                }
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    errs.push(format!("objective.sigma = {sigma} must be >= 0"));
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    errs.push(format!("objective.radius = {radius} must be > 0"));
                }
                if !(*center_scale >= 0.0 && *init_scale >= 0.0) {
                    errs.push(
                        "objective.center_scale and objective.init_scale must be >= 0".into(),
                    );
                }
            }
            ObjectiveSpec::Classifier {
                input,
                classes,
                hidden,
                label_noise,
                ..
            } => {
                if *input == 0 || *hidden == 0 {
                    errs.push("objective.input and objective.hidden must be >= 1".into());
                }
                if *classes < 2 {
                    errs.push("objective.classes must be >= 2".into());
                }
                if !(0.0..=1.0).contains(label_noise) {
                    errs.push(format!(
                        "objective.label_noise = {label_noise} must be in [0, 1]"
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn master_stream(&self) -> Stream {
        Stream::new(self.seed)
    }

    /// The per-client quadratics, or `None` for classifier configs.
    pub fn quadratics(&self) -> Result<Option<Vec<QuadraticObjective>>> {
        let ObjectiveSpec::Quadratic {
            filters,
            filter_len,
            min_eig,
            max_eig,
            center_scale,
            sigma,
            radius,
            ..
        } = self.objective
        else {
            return Ok(None);
        };
        let shape = Shape::dense(filters, filter_len);
        let master = self.master_stream();
        (0..self.clients)
            .map(|k| {
                QuadraticObjective::random(
                    shape.clone(),
                    min_eig,
                    max_eig,
                    center_scale,
                    sigma,
                    radius,
                    master.derive(&[domain::DATA, k as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Assumption constants of a quadratic federation.
    pub fn constants(&self) -> Result<Option<AssumptionConstants>> {
        let Some(objs) = self.quadratics()? else {
            return Ok(None);
        };
        let radius = objs.iter().map(|o| o.radius()).fold(0.0, f64::max);
        let mut c = constants_for(&objs, self.e, radius)?;
        if let Some(mu) = self.mu {
            c.mu = mu;
            c.kappa = c.l / mu;
            c.gamma = (8.0 * c.kappa).max(self.e as f64);
        }
        if let Some(g) = self.gamma_override {
            c.gamma = g;
        }
        Ok(Some(c))
    }

    pub fn step_size(&self) -> Result<StepSize> {
        if let Some(lr) = self.lr {
            return Ok(StepSize::Fixed(lr));
        }
        match self.constants()? {
            Some(c) => Ok(StepSize::Decaying(LrSchedule::new(c.mu, c.gamma)?)),
            None => {
                let mu = self.mu.unwrap_or(1.0);
                let gamma = self.gamma_override.unwrap_or((8.0f64).max(self.e as f64));
                Ok(StepSize::Decaying(LrSchedule::new(mu, gamma)?))
            }
        }
    }

    fn initial_model(&self, shape: &Shape) -> Result<LayeredParams> {
        let stream = self.master_stream().child(domain::INIT);
        match &self.objective {
            ObjectiveSpec::Quadratic { init_scale, .. } => {
                let mut rng = stream.rng();
                let flat: Vec<f64> = (0..shape.num_scalars())
                    .map(|_| init_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                LayeredParams::from_flat(shape, &flat)
            }
            ObjectiveSpec::Classifier {
                input,
                hidden,
                classes,
                activation,
                init_gain,
                ..
            } => {
                Ok(Architecture::mlp(*input, *hidden, *classes, *activation)?
                    .init(*init_gain, stream))
            }
        }
    }

    fn objectives(&self) -> Result<Vec<Objective>> {
        if let Some(q) = self.quadratics()? {
            return Ok(q.into_iter().map(Objective::Quadratic).collect());
        }
        let ObjectiveSpec::Classifier {
            input,
            hidden,
            classes,
            activation,
            label_noise,
            ..
        } = self.objective
        else {
            unreachable!("quadratic handled above");
        };
        let arch = Architecture::mlp(input, hidden, classes, activation)?;
        let master = self.master_stream();
        let teacher = Teacher::new(input, classes, master.derive(&[domain::DATA, u64::MAX]));
        self.sizes()
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let data = teacher.sample(
                    n as usize,
                    label_noise,
                    master.derive(&[domain::DATA, k as u64]),
                );
                Ok(Objective::Classifier(ClassifierObjective::new(
                    arch.clone(),
                    data,
                )?))
            })
            .collect()
    }

    pub fn build(&self) -> Result<Federation> {
        self.validate()?;
        let master = self.master_stream();
        let objectives = self.objectives()?;
        let shape = objectives[0].shape();
        let sizes = self.sizes();
        let clients = objectives
            .into_iter()
            .zip(&sizes)
            .enumerate()
            .map(|(k, (o, &n))| {
                ClientState::new(
                    k,
                    n,
                    o,
                    self.e,
                    self.batch_size,
                    master.derive(&[domain::LOCAL_TRAIN, k as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let settings = RoundSettings {
            rates: self.rates()?,
            lag: self.lag,
            step: self.step_size()?,
            policy: self.defense,
            alpha: self.alpha,
            stream: master.child(domain::SBPU),
            exec: self.execution,
        };
        Ok(Federation {
            clients,
            history: GlobalHistory::bootstrap(self.initial_model(&shape)?),
            settings,
        })
    }

    pub fn convergence_setup(&self) -> Result<ConvergenceSetup> {
        self.validate()?;
        let Some(objectives) = self.quadratics()? else {
            return Err(Error::Config(vec![
                "convergence experiments need a quadratic objective".into(),
            ]));
        };
        let mut errs = Vec::new();
        if self.lr.is_some() {
            errs.push("convergence experiments use the decaying schedule; remove lr".to_string());
        }
        if self.defense != DefensePolicy::None {
            errs.push("convergence experiments run without a defense".to_string());
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let alpha = self.alpha_or_beta1()?;
        if 1.0 - 4.0 * alpha * alpha <= 0.0 {
            return Err(Error::AlphaDomain { alpha });
        }
        let shape = objectives[0].shape().clone();
        let c = self.constants()?.expect("quadratic");
        Ok(ConvergenceSetup {
            w_init: self.initial_model(&shape)?,
            n_k: self.sizes(),
            e: self.e,
            rounds: self.rounds,
            alpha,
            rates: self.rates()?,
            lag: self.lag,
            seeds: self.seeds,
            stream: self.master_stream().child(domain::REPLICA),
            gamma_override: Some(c.gamma),
            radius: None,
            exec: self.execution,
            objectives,
        })
    }
}
