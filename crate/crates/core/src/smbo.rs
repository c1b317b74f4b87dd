//! Trial bookkeeping and integer-parameter suggestion (uniform and TPE).

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Widest integer range the discretized densities are built over.
pub const MAX_GRID: i64 = 1 << 20;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SmboError {
    #[error("empty range: low {low} > high {high}")]
    EmptyRange { low: i64, high: i64 },
    #[error("range [{low}, {high}] is wider than {MAX_GRID} values")]
    RangeTooWide { low: i64, high: i64 },
    #[error("trial score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("trial id {got} out of sequence, expected {expected}")]
    TrialIdOutOfSequence { got: usize, expected: usize },
    #[error("malformed study JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub params: BTreeMap<String, i64>,
    pub score: f64,
    /// Opaque reference to whatever was evaluated.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 5,
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Random,
    Tpe(TpeConfig),
}

impl Default for Sampler {
    fn default() -> Self {
        Self::Tpe(TpeConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub direction: Direction,
    pub sampler: Sampler,
    pub trials: Vec<Trial>,
    /// Earliest trial attaining the maximum score.
    pub best: Option<Trial>,
}

impl Default for Study {
    fn default() -> Self {
        Self::new(Sampler::default())
    }
}

impl Study {
    pub fn new(sampler: Sampler) -> Self {
        Self {
            direction: Direction::Maximize,
            sampler,
            trials: Vec::new(),
            best: None,
        }
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|t| t.score)
    }

    /// Appends `trial`; the best trial changes only on strict improvement.
    pub fn record(&mut self, trial: Trial) -> Result<&Trial, SmboError> {
        if !trial.score.is_finite() {
            return Err(SmboError::NonFiniteScore(trial.score));
        }
        if trial.trial_id != self.trials.len() {
            return Err(SmboError::TrialIdOutOfSequence {
                got: trial.trial_id,
                expected: self.trials.len(),
            });
        }
        if self.best.as_ref().is_none_or(|b| trial.score > b.score) {
            self.best = Some(trial.clone());
        }
        self.trials.push(trial);
        Ok(self.trials.last().expect("just pushed"))
    }

    /// Records the next trial with a dense id.
    pub fn add(
        &mut self,
        params: BTreeMap<String, i64>,
        score: f64,
        payload: serde_json::Value,
    ) -> Result<&Trial, SmboError> {
        let trial_id = self.trials.len();
        self.record(Trial {
            trial_id,
            params,
            score,
            payload,
        })
    }

    pub fn suggest_int(
        &self,
        name: &str,
        low: i64,
        high: i64,
        rng: &mut Rng,
    ) -> Result<i64, SmboError> {
        if low > high {
            return Err(SmboError::EmptyRange { low, high });
        }
        if high - low >= MAX_GRID {
            return Err(SmboError::RangeTooWide { low, high });
        }
        if low == high {
            return Ok(low);
        }
        let observed: Vec<(usize, i64, f64)> = self
            .trials
            .iter()
            .filter_map(|t| {
                let v = *t.params.get(name)?;
                (low..=high)
                    .contains(&v)
                    .then_some((t.trial_id, v, t.score))
            })
            .collect();
        match self.sampler {
            Sampler::Tpe(cfg) if observed.len() >= cfg.n_startup.max(1) => {
                Ok(tpe_suggest(&observed, low, high, &cfg, rng))
            }
            _ => Ok(rng.gen_range(low..=high)),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("study serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SmboError> {
        serde_json::from_str(text).map_err(|e| SmboError::Json(e.to_string()))
    }
}

/// Splits observations into (good, bad) values. Observations are ranked by
/// score, newer first among equal scores.
pub fn split_good_bad(observed: &[(usize, i64, f64)], gamma: f64) -> (Vec<i64>, Vec<i64>) {
    let mut ranked: Vec<&(usize, i64, f64)> = observed.iter().collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(b.0.cmp(&a.0)));
    let n_good = ((gamma * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());
    let good = ranked[..n_good].iter().map(|o| o.1).collect();
    let bad = ranked[n_good..].iter().map(|o| o.1).collect();
    (good, bad)
}

/// Discretized Parzen density over `low..=high`: a Gaussian kernel per
/// observation plus a uniform prior weighted `1/(n+1)`. No observations
/// yields the uniform distribution.
pub fn parzen_grid(obs: &[i64], low: i64, high: i64) -> Vec<f64> {
    let size = (high - low + 1) as usize;
    let uniform = 1.0 / size as f64;
    let prior_w = 1.0 / (obs.len() as f64 + 1.0);
    let mut density = vec![prior_w * uniform; size];
    if obs.is_empty() {
        return density;
    }
    let bw = ((high - low) as f64 / 10.0).max(1.0);
    let kernel_w = (1.0 - prior_w) / obs.len() as f64;
    let mut kernel = vec![0.0; size];
    for &o in obs {
        let mut z = 0.0;
        for (i, k) in kernel.iter_mut().enumerate() {
            let d = (low + i as i64 - o) as f64 / bw;
            *k = (-0.5 * d * d).exp();
            z += *k;
        }
        for (p, k) in density.iter_mut().zip(&kernel) {
            *p += kernel_w * k / z;
        }
    }
    density
}

fn draw(density: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = density.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in density.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    density.len() - 1
}

fn tpe_suggest(
    observed: &[(usize, i64, f64)],
    low: i64,
    high: i64,
    cfg: &TpeConfig,
    rng: &mut Rng,
) -> i64 {
    let (good, bad) = split_good_bad(observed, cfg.gamma);
    let l = parzen_grid(&good, low, high);
    let g = parzen_grid(&bad, low, high);
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..cfg.n_candidates.max(1) {
        let i = draw(&l, rng);
        let ratio = l[i] / g[i];
        if best.is_none_or(|(_, r)| ratio > r) {
            best = Some((i, ratio));
        }
    }
    low + best.expect("at least one candidate").0 as i64
}
