//! Per-series discrete model sets and their sequentially updated,
//! power-discounted posterior probabilities.

use serde::{Deserialize, Serialize};

use crate::dlm::DiscountPair;
use crate::error::{DdnmError, Result};
use crate::graph::RegressorSpec;

/// Upper bound on the number of univariate models held at once.
pub const MAX_TOTAL_MODELS: u128 = 4_000_000;

/// One candidate model for one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub series: usize,
    pub parents: Vec<usize>,
    pub lag: usize,
    pub discount: DiscountPair,
    /// Position of `discount` in the discount grid.
    pub grid_index: usize,
}

impl ModelSpec {
    pub fn regressor(&self) -> RegressorSpec {
        RegressorSpec {
            lag: self.lag,
            parents: self.parents.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        1 + self.lag + self.parents.len()
    }

    /// Compact label such as `pa={2,5};lag=1;delta=0.98;beta=0.99`.
    pub fn label(&self, names: Option<&[String]>) -> String {
        let pa: Vec<String> = self
            .parents
            .iter()
            .map(|&h| match names {
                Some(n) => n[h].clone(),
                None => h.to_string(),
            })
            .collect();
        format!(
            "pa={{{}}};lag={};delta={};beta={}",
            pa.join(","),
            self.lag,
            self.discount.delta,
            self.discount.beta
        )
    }
}

/// Cartesian product of δ and β grids, δ varying slowest.
pub fn discount_grid(deltas: &[f64], betas: &[f64]) -> Result<Vec<DiscountPair>> {
    let mut out = Vec::with_capacity(deltas.len() * betas.len());
    for &d in deltas {
        for &b in betas {
            out.push(DiscountPair::new(d, b)?);
        }
    }
    if out.is_empty() {
        return Err(DdnmError::Config("discount grid is empty".into()));
    }
    Ok(out)
}

/// Optional limits on which parental sets are enumerated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParentRestriction {
    /// Cap on |pa(j)|.
    pub max_parents: Option<usize>,
    /// Explicit candidate parental sets per series; `None` means all subsets.
    pub candidates: Vec<Option<Vec<Vec<usize>>>>,
}

impl ParentRestriction {
    pub fn unrestricted() -> Self {
        Self::default()
    }

    /// Candidate parental sets of series `j` in enumeration order.
    pub fn parent_sets(&self, j: usize, m: usize) -> Result<Vec<Vec<usize>>> {
        if let Some(Some(list)) = self.candidates.get(j) {
            let mut sets = Vec::with_capacity(list.len());
            for set in list {
                let mut s = set.clone();
                s.sort_unstable();
                s.dedup();
                if s.iter().any(|&h| h <= j || h >= m) {
                    return Err(DdnmError::Config(format!(
                        "candidate parent set {:?} for series {j} must lie in {}..{m}",
                        set,
                        j + 1
                    )));
                }
                if !sets.contains(&s) {
                    sets.push(s);
                }
            }
            if sets.is_empty() {
                return Err(DdnmError::Config(format!("series {j} has no candidate parent sets")));
            }
            return Ok(sets);
        }
        let avail = m - j - 1;
        if avail >= 63 {
            return Err(DdnmError::Capacity(format!(
                "series {j} has {avail} potential parents; restrict with max_parents or explicit parent lists"
            )));
        }
        let cap = self.max_parents.unwrap_or(avail);
        if let Some(max) = self.max_parents {
            // bail out before materializing an impossible subset list
            let count: u128 = (0..=max.min(avail)).map(|c| binomial(avail, c)).sum();
            if count > MAX_TOTAL_MODELS {
                return Err(DdnmError::Capacity(format!(
                    "series {j} would have {count} parental sets; lower max_parents"
                )));
            }
        } else if (1u128 << avail) > MAX_TOTAL_MODELS {
            return Err(DdnmError::Capacity(format!(
                "series {j} would have 2^{avail} parental sets; restrict with max_parents or explicit parent lists"
            )));
        }
        let mut sets: Vec<Vec<usize>> = (0u64..(1u64 << avail))
            .map(|mask| {
                (0..avail)
                    .filter(|b| mask & (1 << b) != 0)
                    .map(|b| j + 1 + b)
                    .collect::<Vec<_>>()
            })
            .filter(|s: &Vec<usize>| s.len() <= cap)
            .collect();
        // smaller sets first, then lexicographic
        sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        Ok(sets)
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Unrestricted count of univariate models, Σ_j 2^{m−j}(d+1)k = (2^m − 1)(d+1)k.
pub fn model_count(m: usize, d: usize, k: usize) -> u128 {
    ((1u128 << m) - 1) * (d as u128 + 1) * k as u128
}

/// Size of the joint model space, 2^{m(m−1)/2}(d+1)^m k^m, as a float.
pub fn joint_model_count(m: usize, d: usize, k: usize) -> f64 {
    let mf = m as f64;
    2f64.powf(mf * (mf - 1.0) / 2.0) * ((d + 1) as f64).powf(mf) * (k as f64).powf(mf)
}

/// Enumerates every series' candidate models: parental set (outer), lag,
/// then discount pair (inner).
pub fn enumerate_models(
    m: usize,
    d: usize,
    grid: &[DiscountPair],
    restriction: &ParentRestriction,
) -> Result<Vec<Vec<ModelSpec>>> {
    if grid.is_empty() {
        return Err(DdnmError::Config("discount grid is empty".into()));
    }
    if m == 0 {
        return Err(DdnmError::Config("need at least one series".into()));
    }
    let mut parent_sets = Vec::with_capacity(m);
    let mut total: u128 = 0;
    for j in 0..m {
        let sets = parent_sets_for(restriction, j, m)?;
        total += sets.len() as u128 * (d as u128 + 1) * grid.len() as u128;
        if total > MAX_TOTAL_MODELS {
            return Err(DdnmError::Capacity(format!(
                "more than {MAX_TOTAL_MODELS} univariate models; restrict parental sets (max_parents or explicit lists)"
            )));
        }
        parent_sets.push(sets);
    }
    Ok(parent_sets
        .into_iter()
        .enumerate()
        .map(|(j, sets)| {
            let mut specs = Vec::new();
            for pa in sets {
                for lag in 0..=d {
                    for (g, &disc) in grid.iter().enumerate() {
                        specs.push(ModelSpec {
                            series: j,
                            parents: pa.clone(),
                            lag,
                            discount: disc,
                            grid_index: g,
                        });
                    }
                }
            }
            specs
        })
        .collect())
}

fn parent_sets_for(r: &ParentRestriction, j: usize, m: usize) -> Result<Vec<Vec<usize>>> {
    if j == m - 1 {
        return Ok(vec![Vec::new()]);
    }
    r.parent_sets(j, m)
}

/// Prior probability of a model: independent Bernoulli(ρ) parent inclusion
/// over the `m − j − 1` later series, uniform over lags `0..=d` and over the
/// `k` discount pairs.
pub fn model_prior(spec: &ModelSpec, m: usize, rho: f64, k: usize, d: usize) -> f64 {
    model_log_prior(spec, m, rho, k, d).exp()
}

pub fn model_log_prior(spec: &ModelSpec, m: usize, rho: f64, k: usize, d: usize) -> f64 {
    let avail = (m - spec.series - 1) as f64;
    let c = spec.parents.len() as f64;
    let mut lp = -(k as f64).ln() - ((d + 1) as f64).ln();
    if c > 0.0 {
        lp += c * rho.ln();
    }
    if avail - c > 0.0 {
        lp += (avail - c) * (1.0 - rho).ln();
    }
    lp
}

/// Posterior over the surviving models of one series, in log space.
///
/// `models[i]` indexes the series' model list (and its filter state);
/// `log_probs[i]` is its normalized log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProbabilityTable {
    pub series: usize,
    pub models: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl ModelProbabilityTable {
    /// Table over the given model indices with (unnormalized) log prior weights.
    pub fn from_log_weights(series: usize, models: Vec<usize>, log_weights: Vec<f64>) -> Result<Self> {
        assert_eq!(models.len(), log_weights.len());
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(DdnmError::Underflow { series });
        }
        Ok(ModelProbabilityTable {
            series,
            models,
            log_probs: log_weights.iter().map(|w| w - lse).collect(),
        })
    }

    pub fn uniform(series: usize, models: Vec<usize>) -> Self {
        let n = models.len() as f64;
        ModelProbabilityTable {
            series,
            log_probs: vec![-n.ln(); models.len()],
            models,
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Probabilities after the power discount, i.e. the weights used to
    /// forecast the next observation: normalize(p^α).
    pub fn discounted_probs(&self, alpha: f64) -> Vec<f64> {
        let scaled: Vec<f64> = self.log_probs.iter().map(|l| alpha * l).collect();
        let lse = log_sum_exp(&scaled);
        scaled.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.log_probs
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| -l.exp() * l)
            .sum()
    }

    /// Index (within the table) of the most probable model; lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.log_probs.len() {
            if self.log_probs[i] > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Power-discounted Bayes update `p_new ∝ p_old^α · p(y | model)` for one
/// series. `log_liks` is aligned with `table.models`.
///
/// Returns the log predictive density of the observation under the
/// discounted mixture, `log Σ_μ normalize(p^α)_μ p(y|μ)`.
pub fn update_model_probs(table: &mut ModelProbabilityTable, log_liks: &[f64], alpha: f64) -> Result<f64> {
    if log_liks.len() != table.len() {
        return Err(DdnmError::Dimension(format!(
            "{} likelihoods for {} models",
            log_liks.len(),
            table.len()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DdnmError::Config(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    let prior: Vec<f64> = table.log_probs.iter().map(|l| alpha * l).collect();
    let post: Vec<f64> = prior.iter().zip(log_liks).map(|(p, l)| p + l).collect();
    let lse_prior = log_sum_exp(&prior);
    let lse_post = log_sum_exp(&post);
    if !lse_post.is_finite() || log_liks.iter().any(|l| l.is_nan()) {
        return Err(DdnmError::Underflow { series: table.series });
    }
    // shift before normalizing so large offsets do not cost precision
    let top = post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = post.iter().map(|v| v - top).collect();
    let lse_shifted = log_sum_exp(&shifted);
    for (lp, v) in table.log_probs.iter_mut().zip(&shifted) {
        *lp = v - lse_shifted;
    }
    Ok(lse_post - lse_prior)
}

/// Removes models with probability strictly below `threshold` and
/// renormalizes. The most probable model always survives.
pub fn prune(table: &mut ModelProbabilityTable, threshold: f64) {
    if threshold <= 0.0 || table.is_empty() {
        return;
    }
    let best = table.argmax();
    let log_th = threshold.ln();
    let keep: Vec<usize> = (0..table.len())
        .filter(|&i| i == best || table.log_probs[i] >= log_th)
        .collect();
    let models: Vec<usize> = keep.iter().map(|&i| table.models[i]).collect();
    let lps: Vec<f64> = keep.iter().map(|&i| table.log_probs[i]).collect();
    let lse = log_sum_exp(&lps);
    table.models = models;
    table.log_probs = lps.iter().map(|l| l - lse).collect();
}

/// A structural feature to marginalize over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Delta,
    Beta,
    Lag,
    /// Inclusion of the given series index in the parental set.
    ParentInclusion(usize),
}

impl std::str::FromStr for Feature {
    type Err = DdnmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(Feature::Delta),
            "beta" => Ok(Feature::Beta),
            "lag" => Ok(Feature::Lag),
            other => other
                .strip_prefix("parent:")
                .and_then(|v| v.parse().ok())
                .map(Feature::ParentInclusion)
                .ok_or_else(|| DdnmError::Feature(other.to_string())),
        }
    }
}

/// Marginal posterior of a feature: (value, probability) pairs sorted by value.
/// Parent inclusion yields values 0 (absent) and 1 (present).
pub fn marginal_posterior(
    table: &ModelProbabilityTable,
    specs: &[ModelSpec],
    feature: Feature,
) -> Result<Vec<(f64, f64)>> {
    if let Feature::ParentInclusion(h) = feature {
        if h <= table.series {
            return Err(DdnmError::Feature(format!(
                "series {h} cannot be a parent of series {}",
                table.series
            )));
        }
    }
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (&mi, &lp) in table.models.iter().zip(&table.log_probs) {
        let spec = &specs[mi];
        let v = match feature {
            Feature::Delta => spec.discount.delta,
            Feature::Beta => spec.discount.beta,
            Feature::Lag => spec.lag as f64,
            Feature::ParentInclusion(h) => {
                if spec.parents.contains(&h) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        match out.iter_mut().find(|(x, _)| *x == v) {
            Some(e) => e.1 += lp.exp(),
            None => out.push((v, lp.exp())),
        }
    }
    if matches!(feature, Feature::ParentInclusion(_)) {
        for v in [0.0, 1.0] {
            if !out.iter().any(|(x, _)| *x == v) {
                out.push((v, 0.0));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Posterior expectation of a feature.
pub fn marginal_mean(table: &ModelProbabilityTable, specs: &[ModelSpec], feature: Feature) -> Result<f64> {
    Ok(marginal_posterior(table, specs, feature)?
        .iter()
        .map(|(v, p)| v * p)
        .sum())
}

/// p(α | D) from per-replica cumulative log predictive densities and a
/// uniform prior over the α grid.
pub fn alpha_posterior(cumulative_log_lik: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(cumulative_log_lik);
    cumulative_log_lik.iter().map(|l| (l - lse).exp()).collect()
}

/// Fixed-order log-sum-exp with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}
