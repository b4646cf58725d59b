//! Synthetic log-price panels drawn from a known sparse DDNM, for tests,
//! demos and model-recovery checks.

use std::fmt::Write as _;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};

use crate::error::{DdnmError, Result};

/// A data-generating DDNM with one autoregressive lag per series.
///
/// Series `j` follows
/// `y_j,t = c_j + φ_j,t y_j,t−1 + Σ_h γ_jh,t y_h,t + ε_j,t` with
/// `c_j` chosen so the level stays near `level[j]`. Coefficients drift as
/// random walks with standard deviation `drift`; when `beta` is set the
/// observation precisions follow the discounted beta/gamma evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub t: usize,
    pub ar: Vec<f64>,
    /// `(parent, coefficient)` pairs per series; parents must be later series.
    pub parents: Vec<Vec<(usize, f64)>>,
    pub level: Vec<f64>,
    pub sigma: Vec<f64>,
    pub drift: f64,
    pub beta: Option<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn m(&self) -> usize {
        self.ar.len()
    }

    /// Random sparse structure: every series but the last gets one parent
    /// drawn uniformly from the later series.
    pub fn sparse(m: usize, t: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let parents = (0..m)
            .map(|j| {
                if j + 1 < m {
                    let h = rng.random_range(j + 1..m);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    vec![(h, sign * rng.random_range(0.5..0.9))]
                } else {
                    Vec::new()
                }
            })
            .collect();
        SyntheticSpec {
            t,
            ar: (0..m).map(|_| rng.random_range(0.6..0.9)).collect(),
            parents,
            level: (0..m).map(|_| rng.random_range(3.0..6.0)).collect(),
            sigma: (0..m).map(|_| rng.random_range(0.005..0.015)).collect(),
            drift: 0.0,
            beta: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 || self.t == 0 {
            return Err(DdnmError::Config("synthetic panel needs at least one series and one date".into()));
        }
        if self.parents.len() != m || self.level.len() != m || self.sigma.len() != m {
            return Err(DdnmError::Dimension("synthetic spec vectors differ in length".into()));
        }
        for (j, pa) in self.parents.iter().enumerate() {
            if pa.iter().any(|&(h, _)| h <= j || h >= m) {
                return Err(DdnmError::Config(format!("series {j} has a parent outside {}..{m}", j + 1)));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(DdnmError::Config(format!("beta = {b} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Log-price rows `y[t][j]`.
    pub fn simulate(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let m = self.m();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut ar = self.ar.clone();
        let mut gam: Vec<Vec<f64>> = self.parents.iter().map(|p| p.iter().map(|x| x.1).collect()).collect();
        let mut prec: Vec<f64> = self.sigma.iter().map(|s| 1.0 / (s * s)).collect();
        let vol_draw = match self.beta {
            Some(b) => {
                let n = 1.0 / (1.0 - b);
                Some((b, Beta::new(b * n / 2.0, (1.0 - b) * n / 2.0).map_err(|e| DdnmError::Config(e.to_string()))?))
            }
            None => None,
        };
        let drift = Normal::new(0.0, self.drift.max(0.0)).map_err(|e| DdnmError::Config(e.to_string()))?;
        let mut rows = Vec::with_capacity(self.t);
        let mut prev = self.level.clone();
        for _ in 0..self.t {
            let mut y = vec![0.0; m];
            for j in (0..m).rev() {
                if self.drift > 0.0 {
                    ar[j] = (ar[j] + drift.sample(&mut rng)).clamp(-0.99, 0.99);
                    for g in gam[j].iter_mut() {
                        *g += drift.sample(&mut rng);
                    }
                }
                if let Some((b, dist)) = &vol_draw {
                    prec[j] *= dist.sample(&mut rng) / b;
                    // keep the volatility within a decade of its start
                    let base = 1.0 / (self.sigma[j] * self.sigma[j]);
                    prec[j] = prec[j].clamp(base / 10.0, base * 10.0);
                }
                let mut mean = self.level[j] * (1.0 - ar[j]) + ar[j] * prev[j];
                for (&(h, _), g) in self.parents[j].iter().zip(&gam[j]) {
                    mean += g * (y[h] - self.level[h]);
                }
                let e: f64 = StandardNormal.sample(&mut rng);
                y[j] = mean + e / prec[j].sqrt();
            }
            prev = y.clone();
            rows.push(y);
        }
        Ok(rows)
    }
}

/// `n` consecutive business days from `start` (inclusive if a weekday).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Price CSV text (`date,NAME...`) from log-price rows.
pub fn price_csv(rows: &[Vec<f64>], names: &[String], start: NaiveDate) -> String {
    let dates = business_days(start, rows.len());
    let mut s = format!("date,{}\n", names.join(","));
    for (d, r) in dates.iter().zip(rows) {
        let vals: Vec<String> = r.iter().map(|v| v.exp().to_string()).collect();
        let _ = writeln!(s, "{d},{}", vals.join(","));
    }
    s
}
