//! Sequential filtering over the full model space.
//!
//! Every series keeps a bank of candidate models with their normal/gamma
//! filter states. Filter states do not depend on the model-probability
//! discount α, so banks are shared; each α value gets a replica holding its
//! own per-series probability tables and a running marginal likelihood.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dlm::{evolve_prior, initial_variance, log_predictive_density, update_with_forecast, DiscountPair, NormalGammaState};
use crate::error::{DdnmError, Result};
use crate::forecast::{bma_one_step_moments, MixtureComponent, SimModel, SimulationInput};
use crate::graph::{assemble_regressor, JointMoments, RegressorSpec, SeriesPredictor};
use crate::io::EngineConfig;
use crate::model_space::{
    alpha_posterior, enumerate_models, marginal_mean, model_log_prior, prune, update_model_probs, Feature,
    ModelProbabilityTable, ModelSpec, ParentRestriction,
};
use crate::par::{map_slice_mut, Execution};

const SNAPSHOT_VERSION: u32 = 1;

/// Model-space settings fixed for the life of an engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    /// Modeled series in model order.
    pub names: Vec<String>,
    pub d: usize,
    pub grid: Vec<DiscountPair>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub th: f64,
    pub c0: f64,
    pub n0: f64,
    pub s0_floor: f64,
    pub restriction: ParentRestriction,
}

impl EngineSettings {
    pub fn from_config(cfg: &EngineConfig, names: &[String]) -> Result<Self> {
        cfg.validate()?;
        Ok(EngineSettings {
            names: names.to_vec(),
            d: cfg.d,
            grid: cfg.discount_grid()?,
            alphas: cfg.alpha.clone(),
            rho: cfg.rho,
            th: cfg.th,
            c0: cfg.c0,
            n0: cfg.n0,
            s0_floor: cfg.s0_floor,
            restriction: cfg.restriction(names)?,
        })
    }

    pub fn m(&self) -> usize {
        self.names.len()
    }
}

/// Candidate models of one series and their current filter states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesBank {
    pub specs: Vec<ModelSpec>,
    pub states: Vec<NormalGammaState>,
}

impl SeriesBank {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Model probabilities under one value of α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replica {
    pub alpha: f64,
    /// One table per series; entries index that series' bank.
    pub tables: Vec<ModelProbabilityTable>,
    /// Σ_t log p(y_t | D_{t−1}, α).
    pub cum_log_lik: f64,
}

/// What one filtering step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Joint 1-step log predictive density of the observation, per replica.
    pub log_pred: Vec<f64>,
}

/// Posterior feature means and leading models of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub delta: f64,
    pub beta: f64,
    pub lag: f64,
    /// `inclusion[l]` is the probability that series `j+1+l` is a parent.
    pub inclusion: Vec<f64>,
    pub top: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Engine {
    version: u32,
    pub settings: EngineSettings,
    pub banks: Vec<SeriesBank>,
    pub replicas: Vec<Replica>,
    /// Most recent observations per series, oldest first, at most max(d, 1) long.
    pub recent: Vec<Vec<f64>>,
    /// Observations consumed, including warm-up.
    pub seen: usize,
    pub pruned: bool,
}

impl Engine {
    /// Fresh engine. `prefix` holds the start of each series (log scale) and
    /// sets the initial residual variance estimate.
    pub fn new(settings: EngineSettings, prefix: &[Vec<f64>]) -> Result<Self> {
        let m = settings.m();
        if prefix.len() != m {
            return Err(DdnmError::Dimension(format!("{} prefixes for {m} series", prefix.len())));
        }
        if settings.alphas.is_empty() {
            return Err(DdnmError::Config("alpha grid is empty".into()));
        }
        let specs = enumerate_models(m, settings.d, &settings.grid, &settings.restriction)?;
        let k = settings.grid.len();
        let banks: Vec<SeriesBank> = specs
            .into_iter()
            .enumerate()
            .map(|(j, specs)| {
                let s0 = initial_variance(&prefix[j], settings.s0_floor);
                let states = specs
                    .iter()
                    .map(|s| NormalGammaState::initial(s.state_dim(), settings.c0, settings.n0, s0))
                    .collect();
                SeriesBank { specs, states }
            })
            .collect();
        let tables: Vec<ModelProbabilityTable> = banks
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let lw = b.specs.iter().map(|s| model_log_prior(s, m, settings.rho, k, settings.d)).collect();
                ModelProbabilityTable::from_log_weights(j, (0..b.len()).collect(), lw)
            })
            .collect::<Result<_>>()?;
        let replicas = settings
            .alphas
            .iter()
            .map(|&alpha| Replica {
                alpha,
                tables: tables.clone(),
                cum_log_lik: 0.0,
            })
            .collect();
        Ok(Engine {
            version: SNAPSHOT_VERSION,
            recent: vec![Vec::new(); m],
            settings,
            banks,
            replicas,
            seen: 0,
            pruned: false,
        })
    }

    pub fn m(&self) -> usize {
        self.settings.m()
    }

    /// True once enough history exists to filter every lag.
    pub fn is_warm(&self) -> bool {
        self.seen >= self.settings.d
    }

    pub fn model_counts(&self) -> Vec<usize> {
        self.banks.iter().map(SeriesBank::len).collect()
    }

    /// Latest observation of every series.
    pub fn current(&self) -> Result<Vec<f64>> {
        self.recent
            .iter()
            .map(|r| r.last().copied().ok_or_else(|| DdnmError::Data("no observations yet".into())))
            .collect()
    }

    fn window(&self) -> usize {
        self.settings.d.max(1)
    }

    /// Consumes the observation vector of the next time point.
    ///
    /// During the first `d` observations only the history is recorded and
    /// `None` is returned.
    pub fn observe(&mut self, y: &[f64], exec: Execution) -> Result<Option<StepOutcome>> {
        let m = self.m();
        if y.len() != m {
            return Err(DdnmError::Dimension(format!("observation has {} values for {m} series", y.len())));
        }
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(DdnmError::Data(format!("observation of series {} is not finite", self.settings.names[j])));
        }
        let outcome = if self.is_warm() {
            let mut log_liks = Vec::with_capacity(m);
            for j in 0..m {
                log_liks.push(self.filter_series(j, y, exec)?);
            }
            let mut log_pred = Vec::with_capacity(self.replicas.len());
            for rep in &mut self.replicas {
                let mut total = 0.0;
                for (j, table) in rep.tables.iter_mut().enumerate() {
                    let ll: Vec<f64> = table.models.iter().map(|&i| log_liks[j][i]).collect();
                    total += update_model_probs(table, &ll, rep.alpha)
                        .map_err(|e| e.context(format!("series {}", self.settings.names[j])))?;
                }
                rep.cum_log_lik += total;
                log_pred.push(total);
            }
            Some(StepOutcome { log_pred })
        } else {
            None
        };
        let w = self.window();
        for (r, &v) in self.recent.iter_mut().zip(y) {
            r.push(v);
            if r.len() > w {
                r.remove(0);
            }
        }
        self.seen += 1;
        Ok(outcome)
    }

    /// Updates every model of series `j` and returns their log predictive densities.
    fn filter_series(&mut self, j: usize, y: &[f64], exec: Execution) -> Result<Vec<f64>> {
        let bank = &mut self.banks[j];
        let specs = &bank.specs;
        let recent = &self.recent[j];
        let names = &self.settings.names;
        let results = map_slice_mut(exec, &mut bank.states, |i, state| -> Result<f64> {
            let spec = &specs[i];
            let (x, y_pa) = assemble_regressor(j, &spec.regressor(), recent, y)?;
            let f_vec = DVector::from_iterator(x.len() + y_pa.len(), x.iter().chain(y_pa.iter()).copied());
            let prior = evolve_prior(state, spec.discount);
            let (fc, post) = update_with_forecast(&prior, &f_vec, y[j])
                .map_err(|e| e.context(format!("model {}", spec.label(Some(names)))))?;
            *state = post;
            Ok(log_predictive_density(&fc, y[j]))
        });
        results.into_iter().collect()
    }

    /// Prunes every replica's tables at the configured threshold and drops
    /// models no replica keeps.
    pub fn prune(&mut self) {
        let th = self.settings.th;
        for rep in &mut self.replicas {
            for t in &mut rep.tables {
                prune(t, th);
            }
        }
        for j in 0..self.m() {
            let n = self.banks[j].len();
            let mut keep = vec![false; n];
            for rep in &self.replicas {
                for &i in &rep.tables[j].models {
                    keep[i] = true;
                }
            }
            let mut remap = vec![usize::MAX; n];
            let mut next = 0;
            for i in 0..n {
                if keep[i] {
                    remap[i] = next;
                    next += 1;
                }
            }
            let bank = &mut self.banks[j];
            let mut i = 0;
            bank.specs.retain(|_| {
                i += 1;
                keep[i - 1]
            });
            let mut i = 0;
            bank.states.retain(|_| {
                i += 1;
                keep[i - 1]
            });
            for rep in &mut self.replicas {
                for mi in &mut rep.tables[j].models {
                    *mi = remap[*mi];
                }
            }
        }
        self.pruned = true;
    }

    /// p(α | D) over the replicas.
    pub fn alpha_posterior(&self) -> Vec<f64> {
        let ll: Vec<f64> = self.replicas.iter().map(|r| r.cum_log_lik).collect();
        alpha_posterior(&ll)
    }

    /// Replica with the highest α posterior (lowest index on ties).
    pub fn map_replica(&self) -> usize {
        let p = self.alpha_posterior();
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        best
    }

    /// Posterior mean of a feature of series `j` under one replica.
    pub fn feature_mean(&self, replica: usize, j: usize, feature: Feature) -> Result<f64> {
        marginal_mean(&self.replicas[replica].tables[j], &self.banks[j].specs, feature)
    }

    /// Posterior mean of a feature averaged over p(α | D).
    pub fn feature_mean_over_alpha(&self, j: usize, feature: Feature) -> Result<f64> {
        let pa = self.alpha_posterior();
        let mut acc = 0.0;
        for (r, p) in pa.iter().enumerate() {
            acc += p * self.feature_mean(r, j, feature)?;
        }
        Ok(acc)
    }

    /// The `k` most probable models of series `j` under a replica, as
    /// (bank index, probability), most probable first.
    pub fn top_models(&self, replica: usize, j: usize, k: usize) -> Vec<(usize, f64)> {
        let t = &self.replicas[replica].tables[j];
        let mut v: Vec<(usize, f64)> = t.models.iter().zip(&t.log_probs).map(|(&i, &lp)| (i, lp.exp())).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    /// One pass over a series' table: posterior means of δ, β and the lag,
    /// inclusion probabilities of series `j+1..m`, and the `k` most probable
    /// models (bank index, probability), most probable first.
    pub fn summarize(&self, replica: usize, j: usize, k: usize) -> SeriesSummary {
        let t = &self.replicas[replica].tables[j];
        let specs = &self.banks[j].specs;
        let m = self.m();
        let mut out = SeriesSummary {
            delta: 0.0,
            beta: 0.0,
            lag: 0.0,
            inclusion: vec![0.0; m - j - 1],
            top: Vec::with_capacity(k + 1),
        };
        for (&i, &lp) in t.models.iter().zip(&t.log_probs) {
            let p = lp.exp();
            let s = &specs[i];
            out.delta += p * s.discount.delta;
            out.beta += p * s.discount.beta;
            out.lag += p * s.lag as f64;
            for &h in &s.parents {
                out.inclusion[h - j - 1] += p;
            }
            if k > 0 && (out.top.len() < k || p > out.top[out.top.len() - 1].1) {
                let pos = out.top.partition_point(|e| e.1 > p || (e.1 == p && e.0 < i));
                out.top.insert(pos, (i, p));
                out.top.truncate(k);
            }
        }
        out
    }

    fn own_lags(&self, j: usize, lag: usize) -> Result<DVector<f64>> {
        let spec = RegressorSpec {
            lag,
            parents: Vec::new(),
        };
        Ok(assemble_regressor(j, &spec, &self.recent[j], &[])?.0)
    }

    /// Analytic 1-step model-averaged joint forecast moments under a replica.
    pub fn one_step_moments(&self, replica: usize) -> Result<JointMoments> {
        let rep = &self.replicas[replica];
        let mut mixtures = Vec::with_capacity(self.m());
        for (j, table) in rep.tables.iter().enumerate() {
            let bank = &self.banks[j];
            let mut comps = Vec::with_capacity(table.len());
            for (&i, &lp) in table.models.iter().zip(&table.log_probs) {
                let spec = &bank.specs[i];
                comps.push(MixtureComponent {
                    prob: lp.exp(),
                    predictor: SeriesPredictor {
                        prior: evolve_prior(&bank.states[i], spec.discount),
                        x: self.own_lags(j, spec.lag)?,
                        parents: spec.parents.clone(),
                    },
                });
            }
            mixtures.push(comps);
        }
        bma_one_step_moments(&mixtures).map_err(|e| e.context(format!("replica alpha = {}", rep.alpha)))
    }

    /// Frozen inputs for path simulation under a replica.
    pub fn simulation_input(&self, replica: usize) -> SimulationInput {
        let rep = &self.replicas[replica];
        let models = rep
            .tables
            .iter()
            .enumerate()
            .map(|(j, table)| {
                table
                    .models
                    .iter()
                    .zip(&table.log_probs)
                    .map(|(&i, &lp)| {
                        let spec = &self.banks[j].specs[i];
                        SimModel {
                            prob: lp.exp(),
                            lag: spec.lag,
                            parents: spec.parents.clone(),
                            state: self.banks[j].states[i].clone(),
                            discount: spec.discount,
                        }
                    })
                    .collect()
            })
            .collect();
        SimulationInput {
            models,
            history: self.recent.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| DdnmError::Snapshot(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let e: Engine = bincode::deserialize(bytes).map_err(|e| DdnmError::Snapshot(e.to_string()))?;
        if e.version != SNAPSHOT_VERSION {
            return Err(DdnmError::Snapshot(format!(
                "snapshot version {} is not supported (expected {SNAPSHOT_VERSION})",
                e.version
            )));
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| DdnmError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DdnmError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
