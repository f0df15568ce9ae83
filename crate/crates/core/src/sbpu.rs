//! Stochastic bidirectional parameter updates.
//!
//! Every filter `j` of layer `i` of the global model is moved along one of the
//! two lagged global gradients, `g = w_glb - w_prev` or `g' = w_glb - w_prev2`:
//!
//! ```text
//! s = list_i[j]            s in {-1, +1, -2, +2}
//! s = +-1:  w_loc[i][j] = w_glb[i][j] + beta1 * s * g[i][j]
//! s = +-2:  w_loc[i][j] = w_glb[i][j] + beta2 * s * g'[i][j]
//! ```
//!
//! `list_i` is a shuffled multiset holding `floor(f/4)` copies of each sign
//! entry, padded to `f` entries with the leading elements of the cycle
//! `[-1, +1, -2, +2]`. Each client gets its own shuffle, so the K dispatched
//! models are distinct but stay in a neighbourhood of `w_glb`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::params::{check_same_shape, diff, sq_distance, LayeredParams};
use crate::rng::Stream;

/// Relative slack used when comparing against the neighbourhood bounds.
pub const BOUND_SLACK: f64 = 1e-9;

const CYCLE: [i8; 4] = [-1, 1, -2, 2];

/// Current global model and the two before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalHistory {
    pub w_glb: LayeredParams,
    pub w_prev: LayeredParams,
    pub w_prev2: LayeredParams,
    pub round: u64,
}

impl GlobalHistory {
    /// History at round 0: all three slots hold the initial model.
    pub fn bootstrap(w: LayeredParams) -> Self {
        GlobalHistory {
            w_prev: w.clone(),
            w_prev2: w.clone(),
            w_glb: w,
            round: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_same_shape(&self.w_glb, &self.w_prev)?;
        check_same_shape(&self.w_glb, &self.w_prev2)
    }

    /// Shifts in a new aggregate: `w_prev2 <- w_prev`, `w_prev <- w_glb`,
    /// `w_glb <- next`, and advances the round counter.
    pub fn rotate(self, next: LayeredParams) -> Result<Self> {
        check_same_shape(&self.w_glb, &next)?;
        Ok(GlobalHistory {
            w_prev2: self.w_prev,
            w_prev: self.w_glb,
            w_glb: next,
            round: self.round + 1,
        })
    }

    /// The lagged models SBPU mutates against. During the first two rounds
    /// both lags are replaced by `w_glb` itself, so no perturbation happens.
    pub fn lagged(&self) -> (&LayeredParams, &LayeredParams) {
        if self.round < 2 {
            (&self.w_glb, &self.w_glb)
        } else {
            (&self.w_prev, &self.w_prev2)
        }
    }

    /// `(g, g')` as seen by SBPU in the current round.
    pub fn lag_gradients(&self) -> Result<(LayeredParams, LayeredParams)> {
        let (prev, prev2) = self.lagged();
        Ok((diff(&self.w_glb, prev)?, diff(&self.w_glb, prev2)?))
    }
}

/// Which lagged gradient feeds the `+-2` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagMode {
    /// `g' = w_glb - w_prev2` (two distinct lags).
    #[default]
    Dual,
    /// `g' = g`; the regime in which the neighbourhood bound is guaranteed.
    Tied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityRates {
    pub beta1: f64,
    pub beta2: f64,
}

impl DiversityRates {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        if !(beta1 >= 0.0 && beta2 >= 0.0 && beta1.is_finite() && beta2.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "diversity rates must be finite and >= 0 (got {beta1}, {beta2})"
            )));
        }
        Ok(DiversityRates { beta1, beta2 })
    }

    /// `beta1 = beta`, `beta2 = beta^2`.
    pub fn from_beta(beta: f64) -> Result<Self> {
        DiversityRates::new(beta, beta * beta)
    }

    pub fn zero() -> Self {
        DiversityRates {
            beta1: 0.0,
            beta2: 0.0,
        }
    }
}

/// Per-layer sequence of mutation selectors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StochasticList(Vec<i8>);

impl StochasticList {
    /// Wraps an explicit sequence; every entry must be one of -2, -1, 1, 2.
    pub fn from_entries(entries: Vec<i8>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| !CYCLE.contains(e)) {
            return Err(Error::InvalidParams(format!(
                "invalid stochastic entry {bad}"
            )));
        }
        Ok(StochasticList(entries))
    }

    /// Unshuffled multiset for a layer of `f` filters.
    pub fn canonical(f: usize) -> Self {
        let base = f / 4;
        let mut entries = Vec::with_capacity(f.max(4 * base));
        for e in CYCLE {
            entries.extend(std::iter::repeat_n(e, base));
        }
        entries.extend(CYCLE.iter().take(f - 4 * base));
        StochasticList(entries)
    }

    pub fn entries(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sorted copy, for multiset comparisons.
    pub fn sorted(&self) -> Vec<i8> {
        let mut v = self.0.clone();
        v.sort_unstable();
        v
    }
}

/// Canonical multiset for `f` filters, Fisher-Yates shuffled with `rng`.
pub fn build_stochastic_list<R: Rng + ?Sized>(f: usize, rng: &mut R) -> Result<StochasticList> {
    if f == 0 {
        return Err(Error::InvalidParams("layer has no filters".into()));
    }
    let mut list = StochasticList::canonical(f);
    list.0.shuffle(rng);
    Ok(list)
}

/// Every distinct ordering of `list` (multiset permutations) in lexicographic
/// order. Intended for exhaustive checks on small layers.
pub fn distinct_permutations(list: &StochasticList) -> Vec<StochasticList> {
    let mut cur = list.sorted();
    let mut out = vec![StochasticList(cur.clone())];
    // next-permutation over a sorted multiset enumerates each distinct order once
    loop {
        let n = cur.len();
        let Some(i) = (0..n.saturating_sub(1))
            .rev()
            .find(|&i| cur[i] < cur[i + 1])
        else {
            return out;
        };
        let j = (i + 1..n)
            .rev()
            .find(|&j| cur[j] > cur[i])
            .expect("pivot has successor");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(StochasticList(cur.clone()));
    }
}

/// Applies the per-filter update with explicit lists (one per layer).
pub fn mutate_with_lists(
    w_glb: &LayeredParams,
    g_glb: &LayeredParams,
    g_prev: &LayeredParams,
    rates: DiversityRates,
    lists: &[StochasticList],
) -> Result<LayeredParams> {
    check_same_shape(w_glb, g_glb)?;
    check_same_shape(w_glb, g_prev)?;
    if lists.len() != w_glb.layers().len() {
        return Err(Error::Dimension {
            expected: w_glb.layers().len(),
            got: lists.len(),
        });
    }
    let mut w_loc = w_glb.clone();
    for (i, layer) in w_loc.layers_mut().iter_mut().enumerate() {
        let list = &lists[i];
        if list.len() < layer.num_filters() {
            return Err(Error::ShapeMismatch {
                layer: i,
                filter: Some(list.len()),
                detail: format!(
                    "stochastic list has {} entries for {} filters",
                    list.len(),
                    layer.num_filters()
                ),
            });
        }
        for (j, filter) in layer.filters_mut().iter_mut().enumerate() {
            let s = list.0[j];
            let (coef, grad) = if s == 1 || s == -1 {
                (rates.beta1 * f64::from(s), &g_glb.layers()[i].filters()[j])
            } else {
                (rates.beta2 * f64::from(s), &g_prev.layers()[i].filters()[j])
            };
            if coef == 0.0 {
                continue;
            }
            for (w, g) in filter.values_mut().iter_mut().zip(grad.values()) {
                *w += coef * g;
            }
        }
    }
    Ok(w_loc)
}

/// One mutated model. Layer `i` draws its shuffle from `stream.child(i)`.
pub fn sbpu_mutate(
    w_glb: &LayeredParams,
    g_glb: &LayeredParams,
    g_prev: &LayeredParams,
    rates: DiversityRates,
    stream: Stream,
) -> Result<LayeredParams> {
    let lists = layer_lists(w_glb, stream)?;
    mutate_with_lists(w_glb, g_glb, g_prev, rates, &lists)
}

/// The lists `sbpu_mutate` would draw for `w` under `stream`.
pub fn layer_lists(w: &LayeredParams, stream: Stream) -> Result<Vec<StochasticList>> {
    w.layers()
        .iter()
        .enumerate()
        .map(|(i, l)| build_stochastic_list(l.num_filters(), &mut stream.child(i as u64).rng()))
        .collect()
}

/// Dispatch models for `k` clients; client `c` uses `stream.child(c)`.
pub fn generate_diverse_models(
    h: &GlobalHistory,
    k: usize,
    rates: DiversityRates,
    lag: LagMode,
    stream: Stream,
    exec: Execution,
) -> Result<Vec<LayeredParams>> {
    h.validate()?;
    let (g, g_dual) = h.lag_gradients()?;
    let g_prev = match lag {
        LagMode::Dual => g_dual,
        LagMode::Tied => g.clone(),
    };
    exec.try_map(k, |c| {
        sbpu_mutate(&h.w_glb, &g, &g_prev, rates, stream.child(c as u64))
    })
}

/// Measured distance of a dispatched model against the neighbourhood bounds
/// `alpha^2 |delta|^2 <= |w_loc - w_glb|^2 <= 4 alpha^2 |delta|^2`,
/// with `delta = w_glb - w_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub dist_sq: f64,
    pub delta_sq: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

pub fn check_neighborhood_bound(
    w_loc: &LayeredParams,
    h: &GlobalHistory,
    alpha: f64,
) -> Result<BoundReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParams(format!("alpha {alpha} must be > 0")));
    }
    let (prev, _) = h.lagged();
    let dist_sq = sq_distance(w_loc, &h.w_glb)?;
    let delta_sq = sq_distance(&h.w_glb, prev)?;
    let a2 = alpha * alpha;
    let lower = a2 * delta_sq;
    let upper = 4.0 * a2 * delta_sq;
    let holds = lower * (1.0 - BOUND_SLACK) <= dist_sq && dist_sq <= upper * (1.0 + BOUND_SLACK);
    Ok(BoundReport {
        dist_sq,
        delta_sq,
        lower,
        upper,
        holds,
    })
}

/// Whether `(rates, lag, alpha)` is in the regime where the bound provably
/// holds: tied lags, `beta1 = alpha`, `beta2 in [alpha/2, alpha]`, `alpha < 1/2`.
pub fn is_compliant(rates: DiversityRates, lag: LagMode, alpha: f64) -> bool {
    let tol = 1e-12 * alpha.abs().max(1.0);
    lag == LagMode::Tied
        && alpha > 0.0
        && alpha < 0.5
        && (rates.beta1 - alpha).abs() <= tol
        && rates.beta2 >= alpha / 2.0 - tol
        && rates.beta2 <= alpha + tol
}
