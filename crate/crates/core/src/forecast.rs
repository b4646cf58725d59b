//! Forecasting under model uncertainty: analytic 1-step moments of the
//! model-averaged joint forecast, Monte Carlo k-step trajectories, and the
//! map from simulated log prices to return-scale moments.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StudentT;

use crate::dlm::{k_step_prior, DiscountPair, DlmPrior, NormalGammaState};
use crate::error::{DdnmError, Result};
use crate::graph::{conditional_moments, joint_precision, JointMoments, SeriesPredictor};
use crate::par::{map_range, Execution};

/// One weighted component of a series' model mixture.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub prob: f64,
    pub predictor: SeriesPredictor,
}

/// Analytic 1-step joint forecast moments averaged over the per-series model
/// posteriors, with the precision matrix from the block recursion.
///
/// `mixtures[j]` lists the surviving models of series `j` with their
/// probabilities; each predictor's parents may differ by model.
pub fn bma_one_step_moments(mixtures: &[Vec<MixtureComponent>]) -> Result<JointMoments> {
    let m = mixtures.len();
    let mut f = DVector::zeros(m);
    let mut q = DMatrix::zeros(m, m);
    for j in (0..m).rev() {
        let comps = &mixtures[j];
        if comps.is_empty() {
            return Err(DdnmError::Config(format!("series {j} has no models")));
        }
        let total: f64 = comps.iter().map(|c| c.prob).sum();
        let mut per_model = Vec::with_capacity(comps.len());
        for c in comps {
            if c.predictor.parents.iter().any(|&h| h <= j || h >= m) {
                return Err(DdnmError::Config(format!("series {j} has an invalid parent set")));
            }
            per_model.push(conditional_moments(j, &c.predictor, &f, &q)?);
        }
        let mean: f64 = comps.iter().zip(&per_model).map(|(c, pm)| c.prob / total * pm.0).sum();
        let var: f64 = comps
            .iter()
            .zip(&per_model)
            .map(|(c, pm)| c.prob / total * ((pm.0 - mean).powi(2) + pm.1))
            .sum();
        f[j] = mean;
        q[(j, j)] = var;
        for l in 0..(m - j - 1) {
            let cov: f64 = comps.iter().zip(&per_model).map(|(c, pm)| c.prob / total * pm.2[l]).sum();
            q[(j, j + 1 + l)] = cov;
            q[(j + 1 + l, j)] = cov;
        }
    }
    let k = joint_precision(&q)?;
    Ok(JointMoments {
        mean: f,
        variance: q,
        precision: Some(k),
    })
}

/// A surviving model of one series, as needed for path simulation.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub prob: f64,
    pub lag: usize,
    pub parents: Vec<usize>,
    pub state: NormalGammaState,
    pub discount: DiscountPair,
}

/// Frozen time-t inputs for simulation: per-series model mixtures and each
/// series' observed history (oldest first, ending at time t).
#[derive(Debug, Clone)]
pub struct SimulationInput {
    pub models: Vec<Vec<SimModel>>,
    pub history: Vec<Vec<f64>>,
}

/// Simulated future log prices indexed (path, horizon, series), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTensor {
    pub nmc: usize,
    pub horizon: usize,
    pub m: usize,
    pub seed: u64,
    pub data: Vec<f64>,
}

impl PathTensor {
    /// Value on path `i` at step `r` (1-based horizon) for series `j`.
    pub fn get(&self, i: usize, r: usize, j: usize) -> f64 {
        self.data[(i * self.horizon + (r - 1)) * self.m + j]
    }

    /// Sample mean and unbiased sample covariance of the log prices at step `r`.
    pub fn moments(&self, r: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        sample_moments(self.nmc, self.m, |i, j| self.get(i, r, j))
    }

    /// Empirical quantile (linear interpolation) of series `j` at step `r`.
    pub fn quantile(&self, r: usize, j: usize, p: f64) -> f64 {
        let mut v: Vec<f64> = (0..self.nmc).map(|i| self.get(i, r, j)).collect();
        v.sort_by(f64::total_cmp);
        let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        let io = |e| DdnmError::io("path tensor", e);
        writeln!(w, "# nmc={},horizon={},m={},seed={}", self.nmc, self.horizon, self.m, self.seed).map_err(io)?;
        let cols: Vec<String> = (0..self.m).map(|j| format!("y{j}")).collect();
        writeln!(w, "path,horizon,{}", cols.join(",")).map_err(io)?;
        for i in 0..self.nmc {
            for r in 1..=self.horizon {
                let vals: Vec<String> = (0..self.m).map(|j| format!("{:e}", self.get(i, r, j))).collect();
                writeln!(w, "{},{},{}", i, r, vals.join(",")).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    const MAGIC: &'static [u8; 8] = b"DDNMPATH";

    /// Little-endian binary dump: magic, nmc, horizon, m, seed (u64), then values.
    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        let io = |e| DdnmError::io("path tensor", e);
        w.write_all(Self::MAGIC).map_err(io)?;
        for v in [self.nmc as u64, self.horizon as u64, self.m as u64, self.seed] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| DdnmError::io("path tensor", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != Self::MAGIC {
            return Err(DdnmError::Data("not a path tensor file".into()));
        }
        let mut head = [0u64; 4];
        for h in head.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            *h = u64::from_le_bytes(b);
        }
        let n = (head[0] * head[1] * head[2]) as usize;
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(io)?;
            data.push(f64::from_le_bytes(b));
        }
        Ok(PathTensor {
            nmc: head[0] as usize,
            horizon: head[1] as usize,
            m: head[2] as usize,
            seed: head[3],
            data,
        })
    }
}

struct PreparedModel {
    lag: usize,
    parents: Vec<usize>,
    /// k-step priors for steps 1..=horizon.
    priors: Vec<DlmPrior>,
    t_dist: StudentT<f64>,
}

/// Independent RNG stream for one (path, series) pair.
fn stream_rng(seed: u64, path: usize, series: usize, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((path as u64) * (m as u64) + series as u64);
    rng
}

/// Draws `nmc` joint trajectories over steps 1..=horizon.
///
/// On each path every series draws one model from its posterior, then
/// simulates steps in order from the k-step conditional T forecasts, feeding
/// back simulated own lags and simulated parent values. Series run from the
/// last to the first so parents are always available.
pub fn simulate_paths(
    input: &SimulationInput,
    horizon: usize,
    nmc: usize,
    seed: u64,
    exec: Execution,
) -> Result<PathTensor> {
    let m = input.models.len();
    if nmc < 2 {
        return Err(DdnmError::InsufficientSamples(nmc));
    }
    if horizon == 0 {
        return Err(DdnmError::Config("horizon must be at least 1".into()));
    }
    if input.history.len() != m {
        return Err(DdnmError::Dimension(format!("{} histories for {m} series", input.history.len())));
    }
    let mut prepared: Vec<Vec<PreparedModel>> = Vec::with_capacity(m);
    let mut pickers = Vec::with_capacity(m);
    for (j, models) in input.models.iter().enumerate() {
        if models.is_empty() {
            return Err(DdnmError::Config(format!("series {j} has no models")));
        }
        let mut list = Vec::with_capacity(models.len());
        for sm in models {
            if input.history[j].len() < sm.lag {
                return Err(DdnmError::WarmUp {
                    series: j,
                    needed: sm.lag,
                    available: input.history[j].len(),
                });
            }
            if sm.parents.iter().any(|&h| h <= j || h >= m) {
                return Err(DdnmError::Config(format!("series {j} has an invalid parent set")));
            }
            let priors: Vec<DlmPrior> = (1..=horizon).map(|r| k_step_prior(&sm.state, r, sm.discount)).collect();
            let t_dist = StudentT::new(priors[0].dof)
                .map_err(|e| DdnmError::Data(format!("series {j}: invalid degrees of freedom: {e}")))?;
            list.push(PreparedModel {
                lag: sm.lag,
                parents: sm.parents.clone(),
                priors,
                t_dist,
            });
        }
        let picker = WeightedIndex::new(models.iter().map(|s| s.prob))
            .map_err(|e| DdnmError::Data(format!("series {j}: invalid model probabilities: {e}")))?;
        prepared.push(list);
        pickers.push(picker);
    }

    let per_path = map_range(exec, nmc, |i| simulate_one(i, &prepared, &pickers, &input.history, horizon, seed));
    let mut data = Vec::with_capacity(nmc * horizon * m);
    for p in per_path {
        data.extend(p?);
    }
    Ok(PathTensor {
        nmc,
        horizon,
        m,
        seed,
        data,
    })
}

fn simulate_one(
    path: usize,
    prepared: &[Vec<PreparedModel>],
    pickers: &[WeightedIndex<f64>],
    history: &[Vec<f64>],
    horizon: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let m = prepared.len();
    let mut out = vec![0.0; horizon * m];
    for j in (0..m).rev() {
        let mut rng = stream_rng(seed, path, j, m);
        let model = &prepared[j][pickers[j].sample(&mut rng)];
        let hist = &history[j];
        let p_phi = 1 + model.lag;
        let dim = p_phi + model.parents.len();
        let mut f_vec = DVector::zeros(dim);
        for r in 1..=horizon {
            f_vec[0] = 1.0;
            for lag in 1..=model.lag {
                // y_{t+r-lag}: simulated when r > lag, observed otherwise
                f_vec[lag] = if r > lag {
                    out[(r - lag - 1) * m + j]
                } else {
                    hist[hist.len() - (lag - r + 1)]
                };
            }
            for (h, &ph) in model.parents.iter().enumerate() {
                f_vec[p_phi + h] = out[(r - 1) * m + ph];
            }
            let prior = &model.priors[r - 1];
            let loc = prior.mean.dot(&f_vec);
            let scale = prior.variance + crate::linalg::bilinear(&f_vec, &prior.scale, &f_vec);
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(DdnmError::DegenerateScale { q: scale, s: prior.variance });
            }
            let t: f64 = model.t_dist.sample(&mut rng);
            out[(r - 1) * m + j] = loc + scale.sqrt() * t;
        }
    }
    Ok(out)
}

/// Forecast moments on the simple-returns scale over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsMoments {
    pub mean: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub horizon: usize,
}

/// Cumulative simple returns `exp(y_{t+r} − y_t) − 1` on every path,
/// summarized by sample mean and unbiased covariance.
pub fn returns_moments(paths: &PathTensor, horizon: usize, current: &[f64]) -> Result<ReturnsMoments> {
    if paths.nmc < 2 {
        return Err(DdnmError::InsufficientSamples(paths.nmc));
    }
    if horizon == 0 || horizon > paths.horizon {
        return Err(DdnmError::Config(format!(
            "horizon {horizon} outside simulated range 1..={}",
            paths.horizon
        )));
    }
    if current.len() != paths.m {
        return Err(DdnmError::Dimension(format!("{} current prices for {} series", current.len(), paths.m)));
    }
    let (mean, variance) = sample_moments(paths.nmc, paths.m, |i, j| (paths.get(i, horizon, j) - current[j]).exp() - 1.0)?;
    Ok(ReturnsMoments {
        mean,
        variance,
        horizon,
    })
}

/// Two-pass fixed-order sample mean and covariance with the n−1 divisor.
pub fn sample_moments<F>(n: usize, m: usize, value: F) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(usize, usize) -> f64,
{
    if n < 2 {
        return Err(DdnmError::InsufficientSamples(n));
    }
    let mut mean = DVector::zeros(m);
    for i in 0..n {
        for j in 0..m {
            mean[j] += value(i, j);
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(m, m);
    let mut dev = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            dev[j] = value(i, j) - mean[j];
        }
        for a in 0..m {
            for b in a..m {
                cov[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok((mean, cov))
}
