//! Empirical check of the SBPU convergence rate and the client-divergence
//! bound on strongly convex quadratic federations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{run_round_detailed, ClientState, DefensePolicy, RoundSettings};
use crate::objectives::{
    constants_for, AssumptionConstants, LrSchedule, Objective, QuadraticObjective, StepSize,
};
use crate::params::{compensated_sum, sq_distance, LayeredParams};
use crate::rng::{domain, Stream};
use crate::sbpu::{DiversityRates, GlobalHistory, LagMode};

/// Minimiser and minimum of `sum_k p_k f_k`.
pub fn optimum_of(objs: &[QuadraticObjective], weights: &[f64]) -> Result<(LayeredParams, f64)> {
    let Some(first) = objs.first() else {
        return Err(Error::InvalidParams("no objectives".into()));
    };
    if objs.len() != weights.len() {
        return Err(Error::Dimension {
            expected: objs.len(),
            got: weights.len(),
        });
    }
    let d = first.dim();
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for (o, &p) in objs.iter().zip(weights) {
        if o.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                filter: None,
                detail: "objectives disagree on parameter shape".into(),
            });
        }
        a += o.matrix() * p;
        b += o.matrix() * o.center_vec() * p;
    }
    let x = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&b))
        .or_else(|| a.lu().solve(&b))
        .ok_or_else(|| Error::NotSpd("combined matrix is singular".into()))?;
    let w = LayeredParams::from_flat(first.shape(), x.as_slice())?;
    let f = compensated_sum(
        objs.iter()
            .zip(weights)
            .map(|(o, &p)| o.loss(&w).map(|l| p * l))
            .collect::<Result<Vec<_>>>()?,
    );
    Ok((w, f))
}

fn alpha_factor(alpha: f64) -> Result<f64> {
    let denom = 1.0 - 4.0 * alpha * alpha;
    if alpha.is_nan() || alpha < 0.0 || denom <= 0.0 {
        return Err(Error::AlphaDomain { alpha });
    }
    Ok(alpha * alpha / denom)
}

/// `B = (1/K^2) sum sigma_i^2 + 32 alpha^2 / (1 - 4 alpha^2) (E-1)^2 G^2`.
pub fn bound_b(c: &AssumptionConstants, alpha: f64, e: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParams("K must be >= 1".into()));
    }
    let f = alpha_factor(alpha)?;
    let noise = c.sigma.iter().map(|s| s * s).sum::<f64>() / (k * k) as f64;
    let em1 = e.saturating_sub(1) as f64;
    Ok(noise + 32.0 * f * em1 * em1 * c.g * c.g)
}

/// `4 kappa / (gamma + T) * (B / (2 mu) + L D0)`.
pub fn gap_bound(
    c: &AssumptionConstants,
    alpha: f64,
    e: usize,
    k: usize,
    d0: f64,
    t: u64,
) -> Result<f64> {
    let b = bound_b(c, alpha, e, k)?;
    Ok(4.0 * c.kappa / (c.gamma + t as f64) * (b / (2.0 * c.mu) + c.l * d0))
}

/// `sum_k p_k |w_bar - w_k|^2` with `w_bar` the weighted aggregate.
pub fn measure_divergence(ws: &[LayeredParams], sizes: &[u64]) -> Result<f64> {
    let mean = crate::federation::aggregate(ws, sizes)?;
    let total: u64 = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let terms = ws
        .iter()
        .zip(&weights)
        .map(|(w, p)| sq_distance(&mean, w).map(|d| p * d))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(terms))
}

/// `16 alpha^2 eta^2 (E-1)^2 G^2 / (1 - 4 alpha^2)`.
pub fn divergence_bound(alpha: f64, eta: f64, e: usize, g: f64) -> Result<f64> {
    let f = alpha_factor(alpha)?;
    let em1 = e.saturating_sub(1) as f64;
    Ok(16.0 * f * eta * eta * em1 * em1 * g * g)
}

/// Inputs of a convergence experiment.
#[derive(Debug, Clone)]
pub struct ConvergenceSetup {
    pub objectives: Vec<QuadraticObjective>,
    pub n_k: Vec<u64>,
    pub e: usize,
    pub rounds: u64,
    pub alpha: f64,
    pub rates: DiversityRates,
    pub lag: LagMode,
    pub w_init: LayeredParams,
    /// Independent replicas averaged to estimate the expectation.
    pub seeds: u64,
    pub stream: Stream,
    /// Overrides `gamma = max(8 kappa, E)` when set.
    pub gamma_override: Option<f64>,
    /// Radius used for `G`; defaults to the largest objective radius.
    pub radius: Option<f64>,
    pub exec: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub t: u64,
    pub gap: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub t: u64,
    /// Largest value over replicas.
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub label: String,
    pub seeds: u64,
    pub constants: AssumptionConstants,
    pub alpha: f64,
    pub b: f64,
    pub d0: f64,
    pub f_star: f64,
    pub gap_series: Vec<GapPoint>,
    pub divergence_series: Vec<DivergencePoint>,
}

impl ConvergenceReport {
    pub fn gap_within_bound(&self) -> bool {
        self.gap_series.iter().all(|p| p.gap <= p.bound)
    }

    /// Worst `measured / bound` ratio, ignoring points where both are zero.
    pub fn worst_divergence_ratio(&self) -> f64 {
        self.divergence_series
            .iter()
            .filter(|p| p.measured > 0.0 || p.bound > 0.0)
            .map(|p| p.measured / p.bound)
            .fold(0.0, f64::max)
    }

    pub fn divergence_within_bound(&self, rel_slack: f64) -> bool {
        self.divergence_series
            .iter()
            .all(|p| p.measured <= p.bound * (1.0 + rel_slack))
    }

    /// Least-squares slope of `ln gap` against `ln T` over `T in [t_max/10, t_max]`.
    pub fn final_decade_slope(&self) -> Option<f64> {
        let t_max = self.gap_series.last()?.t as f64;
        let pts: Vec<(f64, f64)> = self
            .gap_series
            .iter()
            .filter(|p| p.t as f64 >= t_max / 10.0 && p.gap > 0.0)
            .map(|p| ((p.t as f64).ln(), p.gap.ln()))
            .collect();
        loglog_slope(&pts)
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn loglog_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

struct Replica {
    gaps: Vec<f64>,
    divergence: Vec<f64>,
}

pub fn run_convergence_experiment(s: &ConvergenceSetup) -> Result<ConvergenceReport> {
    let k = s.objectives.len();
    if k == 0 || s.n_k.len() != k {
        return Err(Error::InvalidParams(format!(
            "need one n_k per objective ({k} objectives, {} sizes)",
            s.n_k.len()
        )));
    }
    if s.seeds == 0 {
        return Err(Error::InvalidParams("seeds must be >= 1".into()));
    }
    if s.e == 0 {
        return Err(Error::InvalidParams("E must be >= 1".into()));
    }
    let radius = s
        .radius
        .unwrap_or_else(|| s.objectives.iter().map(|o| o.radius()).fold(0.0, f64::max));
    let mut constants = constants_for(&s.objectives, s.e, radius)?;
    if let Some(g) = s.gamma_override {
        constants.gamma = g;
    }
    let b = bound_b(&constants, s.alpha, s.e, k)?;
    let total: u64 = s.n_k.iter().sum();
    let p: Vec<f64> = s.n_k.iter().map(|&n| n as f64 / total as f64).collect();
    let (w_star, f_star) = optimum_of(&s.objectives, &p)?;
    let d0 = sq_distance(&s.w_init, &w_star)?;
    let schedule = LrSchedule::new(constants.mu, constants.gamma)?;

    let replicas = s.exec.try_map(s.seeds as usize, |r| {
        let stream = s.stream.derive(&[domain::REPLICA, r as u64]);
        let clients = s
            .objectives
            .iter()
            .zip(&s.n_k)
            .enumerate()
            .map(|(i, (o, &n))| {
                ClientState::new(
                    i,
                    n,
                    Objective::Quadratic(o.clone()),
                    s.e,
                    1,
                    stream.derive(&[domain::DATA, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let settings = RoundSettings {
            rates: s.rates,
            lag: s.lag,
            step: StepSize::Decaying(schedule),
            policy: DefensePolicy::None,
            alpha: None,
            stream,
            // replicas already run in parallel
            exec: Execution::Sequential,
        };
        let mut h = GlobalHistory::bootstrap(s.w_init.clone());
        let mut gaps = Vec::with_capacity(s.rounds as usize);
        let mut divergence = Vec::with_capacity(s.rounds as usize * (s.e + 1));
        for _ in 0..s.rounds {
            let (next, rec, _) = run_round_detailed(h, &clients, &settings)?;
            h = next;
            let f = compensated_sum(
                s.objectives
                    .iter()
                    .zip(&p)
                    .map(|(o, &pk)| o.loss(&h.w_glb).map(|l| pk * l))
                    .collect::<Result<Vec<_>>>()?,
            );
            gaps.push(f - f_star);
            divergence.extend(rec.divergence_trace);
        }
        Ok::<_, Error>(Replica { gaps, divergence })
    })?;

    let gap_series = (0..s.rounds as usize)
        .map(|i| {
            let t = (i as u64 + 1) * s.e as u64;
            let mean = compensated_sum(replicas.iter().map(|r| r.gaps[i])) / s.seeds as f64;
            Ok(GapPoint {
                t,
                gap: mean,
                bound: gap_bound(&constants, s.alpha, s.e, k, d0, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_round = s.e + 1;
    let divergence_series = (0..s.rounds as usize * per_round)
        .map(|i| {
            let t = (i / per_round * s.e + i % per_round) as u64;
            let measured = replicas.iter().map(|r| r.divergence[i]).fold(0.0, f64::max);
            Ok(DivergencePoint {
                t,
                measured,
                bound: divergence_bound(s.alpha, schedule.lr_at(t), s.e, constants.g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let label = if s.seeds == 1 {
        "single-seed (not an expectation)".to_string()
    } else {
        format!("mean over {} seeds", s.seeds)
    };
    Ok(ConvergenceReport {
        label,
        seeds: s.seeds,
        constants,
        alpha: s.alpha,
        b,
        d0,
        f_star,
        gap_series,
        divergence_series,
    })
}
