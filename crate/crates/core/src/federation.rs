//! Round orchestration: dispatch diverse models, train locally, defend,
//! aggregate, rotate history.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::convergence::measure_divergence;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::objectives::{project, sgd_step, Objective, StepSize};
use crate::params::{check_same_shape, compensated_sum, diff, LayeredParams};
use crate::rng::{domain, Stream};
use crate::sbpu::{
    check_neighborhood_bound, generate_diverse_models, BoundReport, DiversityRates, GlobalHistory,
    LagMode,
};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub n_k: u64,
    pub objective: Objective,
    /// Local SGD iterations per round.
    pub e: usize,
    pub batch_size: usize,
    pub stream: Stream,
}

impl ClientState {
    pub fn new(
        id: usize,
        n_k: u64,
        objective: Objective,
        e: usize,
        batch_size: usize,
        stream: Stream,
    ) -> Result<Self> {
        if n_k == 0 {
            return Err(Error::InvalidParams(format!(
                "client {id}: n_k must be >= 1"
            )));
        }
        if e == 0 {
            return Err(Error::InvalidParams(format!("client {id}: E must be >= 1")));
        }
        Ok(ClientState {
            id,
            n_k,
            objective,
            e,
            batch_size: batch_size.max(1),
            stream,
        })
    }
}

/// Defense applied to each uploaded delta `w_trained - w_dispatched`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefensePolicy {
    #[default]
    None,
    /// Clip to L2 norm `clip`, then add Gaussian noise with per-coordinate
    /// standard deviation `clip * sqrt(2 ln(1.25 / delta)) / epsilon`.
    Dp {
        epsilon: f64,
        clip: f64,
        #[serde(default = "default_dp_delta")]
        delta: f64,
    },
    /// Zero the smallest-magnitude fraction `prune` of all coordinates.
    Gc { prune: f64 },
}

fn default_dp_delta() -> f64 {
    1e-5
}

impl DefensePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefensePolicy::None => Ok(()),
            DefensePolicy::Dp {
                epsilon,
                clip,
                delta,
            } => {
                if !(epsilon > 0.0 && clip > 0.0 && delta > 0.0 && delta < 1.0) {
                    return Err(Error::InvalidParams(format!(
                        "dp defense needs epsilon > 0, clip > 0, 0 < delta < 1 (got {epsilon}, {clip}, {delta})"
                    )));
                }
                Ok(())
            }
            DefensePolicy::Gc { prune } => {
                if !(0.0..1.0).contains(&prune) {
                    return Err(Error::InvalidParams(format!(
                        "gc prune fraction {prune} must be in [0, 1)"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Gaussian-mechanism standard deviation for one round.
pub fn dp_noise_std(epsilon: f64, clip: f64, delta: f64) -> f64 {
    clip * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Scale `g` down to norm `clip` (if larger), then add i.i.d. N(0, std^2).
pub fn clip_and_noise<R: Rng + ?Sized>(
    g: &LayeredParams,
    clip: f64,
    std: f64,
    rng: &mut R,
) -> LayeredParams {
    let norm = g.norm();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let clipped = g.scale(scale);
    if std == 0.0 {
        return clipped;
    }
    clipped.map(|v| v + std * rng.sample::<f64, _>(StandardNormal))
}

/// Zeroes the `d - ceil((1 - p) d)` smallest-magnitude coordinates; ties go to
/// the lower flat index first.
pub fn prune_smallest(g: &LayeredParams, prune: f64) -> LayeredParams {
    let flat = g.to_flat();
    let d = flat.len();
    let keep = ((1.0 - prune) * d as f64 - 1e-9).ceil().max(0.0) as usize;
    let drop = d - keep.min(d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs()).then(a.cmp(&b)));
    let mut out = flat;
    for &i in &order[..drop] {
        out[i] = 0.0;
    }
    LayeredParams::from_flat(&g.shape(), &out)
        .expect("same shape")
        .with_kinds_of(g)
        .expect("same shape")
}

pub fn apply_defense<R: Rng + ?Sized>(
    g: &LayeredParams,
    policy: &DefensePolicy,
    rng: &mut R,
) -> Result<LayeredParams> {
    policy.validate()?;
    Ok(match *policy {
        DefensePolicy::None => g.clone(),
        DefensePolicy::Dp {
            epsilon,
            clip,
            delta,
        } => clip_and_noise(g, clip, dp_noise_std(epsilon, clip, delta), rng),
        DefensePolicy::Gc { prune } => prune_smallest(g, prune),
    })
}

/// `sum_k (n_k / N) update_k`, evaluated as `u_0 + sum_k (n_k/N)(u_k - u_0)`
/// with compensated summation so identical inputs come back bit-for-bit.
pub fn aggregate(updates: &[LayeredParams], sizes: &[u64]) -> Result<LayeredParams> {
    if updates.is_empty() {
        return Err(Error::InvalidParams("nothing to aggregate".into()));
    }
    if updates.len() != sizes.len() {
        return Err(Error::Dimension {
            expected: updates.len(),
            got: sizes.len(),
        });
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidParams("client sizes must be positive".into()));
    }
    for u in &updates[1..] {
        check_same_shape(&updates[0], u)?;
    }
    let total: u64 = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let base = updates[0].to_flat();
    let flats: Vec<Vec<f64>> = updates.iter().map(LayeredParams::to_flat).collect();
    let out: Vec<f64> = (0..base.len())
        .map(|i| {
            base[i]
                + compensated_sum(
                    flats
                        .iter()
                        .zip(&weights)
                        .map(|(u, w)| w * (u[i] - base[i])),
                )
        })
        .collect();
    LayeredParams::from_flat(&updates[0].shape(), &out)?.with_kinds_of(&updates[0])
}

/// Runs `E` SGD iterations from `w_init`, using step `t` of the global
/// schedule for local iteration `t - global_step_offset`. Randomness comes
/// from `stream`.
pub fn local_train(
    c: &ClientState,
    w_init: &LayeredParams,
    step: &StepSize,
    global_step_offset: u64,
    stream: Stream,
) -> Result<LayeredParams> {
    local_train_traced(c, w_init, step, global_step_offset, stream)
        .map(|mut v| v.pop().expect("E + 1 iterates"))
}

/// Like [`local_train`] but returns all `E + 1` iterates (the start point
/// after projection, then one per SGD step).
pub fn local_train_traced(
    c: &ClientState,
    w_init: &LayeredParams,
    step: &StepSize,
    global_step_offset: u64,
    stream: Stream,
) -> Result<Vec<LayeredParams>> {
    let shape = c.objective.shape();
    if w_init.shape() != shape {
        return Err(Error::ShapeMismatch {
            layer: 0,
            filter: None,
            detail: format!("client {} received a model of the wrong shape", c.id),
        });
    }
    let ball = c.objective.ball();
    let ball_ref = ball.as_ref().map(|(center, r)| (center, *r));
    let mut rng = stream.rng();
    let mut w = match ball_ref {
        Some((center, r)) => project(w_init, center, r)?,
        None => w_init.clone(),
    };
    let mut trace = Vec::with_capacity(c.e + 1);
    trace.push(w.clone());
    for t in 0..c.e {
        let g = match c.objective.stochastic_grad(&w, c.batch_size, &mut rng) {
            Ok(g) => g,
            Err(Error::InvalidParams(_)) => return Err(Error::Divergence { iteration: t }),
            Err(e) => return Err(e),
        };
        let eta = step.at(global_step_offset + t as u64);
        w = sgd_step(&w, &g, eta, ball_ref)?;
        if !w.is_finite() {
            return Err(Error::Divergence { iteration: t });
        }
        trace.push(w.clone());
    }
    Ok(trace)
}

/// Everything a round needs besides the history and the clients.
#[derive(Debug, Clone)]
pub struct RoundSettings {
    pub rates: DiversityRates,
    pub lag: LagMode,
    pub step: StepSize,
    pub policy: DefensePolicy,
    /// When set, every dispatched model is checked against the neighbourhood bound.
    pub alpha: Option<f64>,
    /// Master stream of the run; per-round streams are derived from it.
    pub stream: Stream,
    pub exec: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    /// Weighted loss of the new aggregate over all clients.
    pub global_loss: f64,
    /// Each client's loss on its own data after local training.
    pub client_losses: Vec<f64>,
    /// `sum_k p_k |w_bar - w_k|^2` just before aggregation.
    pub divergence: f64,
    /// The same statistic at each of the `E + 1` local iterates.
    pub divergence_trace: Vec<f64>,
    pub bound_reports: Vec<BoundReport>,
    /// Not part of any deterministic output.
    pub wall_clock_ms: f64,
}

/// Intermediate products of a round, exposed for measurement harnesses.
#[derive(Debug, Clone)]
pub struct RoundDetail {
    pub dispatched: Vec<LayeredParams>,
    pub traces: Vec<Vec<LayeredParams>>,
    pub uploads: Vec<LayeredParams>,
}

pub fn run_round(
    h: GlobalHistory,
    clients: &[ClientState],
    s: &RoundSettings,
) -> Result<(GlobalHistory, RoundRecord)> {
    run_round_detailed(h, clients, s).map(|(h, r, _)| (h, r))
}

pub fn run_round_detailed(
    h: GlobalHistory,
    clients: &[ClientState],
    s: &RoundSettings,
) -> Result<(GlobalHistory, RoundRecord, RoundDetail)> {
    let started = Instant::now();
    if clients.is_empty() {
        return Err(Error::InvalidParams("no clients".into()));
    }
    let e = clients[0].e;
    if let Some(c) = clients.iter().find(|c| c.e != e) {
        return Err(Error::InvalidParams(format!(
            "client {} has E = {} but client 0 has E = {e}",
            c.id, c.e
        )));
    }
    let round = h.round;
    let round_stream = s.stream.child(round);

    // (1) diverse models
    let dispatched = generate_diverse_models(
        &h,
        clients.len(),
        s.rates,
        s.lag,
        round_stream.child(domain::SBPU),
        s.exec,
    )?;
    let bound_reports = match s.alpha {
        Some(alpha) => dispatched
            .iter()
            .map(|m| check_neighborhood_bound(m, &h, alpha))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };

    // (2) local training, t = round * E + local step
    let offset = round * e as u64;
    let traces = s.exec.try_map(clients.len(), |k| {
        let c = &clients[k];
        local_train_traced(
            c,
            &dispatched[k],
            &s.step,
            offset,
            c.stream.derive(&[domain::LOCAL_TRAIN, round]),
        )
    })?;

    // (3) defend the uploaded deltas, then aggregate
    let uploads = s.exec.try_map(clients.len(), |k| {
        let c = &clients[k];
        let trained = traces[k].last().expect("non-empty trace");
        if s.policy == DefensePolicy::None {
            return Ok(trained.clone());
        }
        let delta = diff(trained, &dispatched[k])?;
        let mut rng = c.stream.derive(&[domain::DEFENSE, round]).rng();
        let defended = apply_defense(&delta, &s.policy, &mut rng)?;
        dispatched[k].zip_map(&defended, |a, b| a + b)
    })?;
    let sizes: Vec<u64> = clients.iter().map(|c| c.n_k).collect();
    let next = aggregate(&uploads, &sizes)?;

    let divergence_trace = (0..=e)
        .map(|j| {
            let iterates: Vec<LayeredParams> = traces.iter().map(|t| t[j].clone()).collect();
            measure_divergence(&iterates, &sizes)
        })
        .collect::<Result<Vec<_>>>()?;
    let client_losses = clients
        .iter()
        .zip(&traces)
        .map(|(c, t)| c.objective.full_loss(t.last().expect("non-empty")))
        .collect::<Result<Vec<_>>>()?;
    let global_loss = weighted_loss(clients, &next)?;

    let violations = bound_reports.iter().filter(|b| !b.holds).count();
    if violations > 0 {
        log::warn!("round {round}: {violations} dispatched models outside the neighbourhood bound");
    }
    log::debug!(
        "round {round}: global loss {global_loss:.6e}, divergence {:.6e}",
        divergence_trace.last().copied().unwrap_or_default()
    );

    // (4) rotate
    let next_h = h.rotate(next)?;
    let record = RoundRecord {
        round,
        global_loss,
        client_losses,
        divergence: *divergence_trace.last().expect("E >= 1"),
        divergence_trace,
        bound_reports,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((
        next_h,
        record,
        RoundDetail {
            dispatched,
            traces,
            uploads,
        },
    ))
}

/// `sum_k (n_k / N) f_k(w)`.
pub fn weighted_loss(clients: &[ClientState], w: &LayeredParams) -> Result<f64> {
    let total: u64 = clients.iter().map(|c| c.n_k).sum();
    let terms = clients
        .iter()
        .map(|c| Ok(c.n_k as f64 / total as f64 * c.objective.full_loss(w)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(terms))
}

/// A complete simulated federation.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub history: GlobalHistory,
    pub settings: RoundSettings,
}

impl Federation {
    pub fn run_rounds(&mut self, n: u64) -> Result<Vec<RoundRecord>> {
        self.run_rounds_with(n, |_, _| Ok(()))
    }

    /// Runs `n` rounds, calling `after(history, record)` after each.
    pub fn run_rounds_with(
        &mut self,
        n: u64,
        mut after: impl FnMut(&GlobalHistory, &RoundRecord) -> Result<()>,
    ) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let h = self.history.clone();
            let (next, rec) = run_round(h, &self.clients, &self.settings)?;
            self.history = next;
            after(&self.history, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Builds the federation described by `cfg` and runs all of its rounds.
pub fn run_federation(cfg: &crate::config::FederationConfig) -> Result<Vec<RoundRecord>> {
    let mut fed = cfg.build()?;
    fed.run_rounds(cfg.rounds)
}
