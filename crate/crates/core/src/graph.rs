//! Triangular parental structure and the recoupling of the decoupled
//! univariate analyses into joint 1-step forecast moments.
//!
//! Series are indexed `0..m` in the chosen order; the parents of series `j`
//! are a subset of `j+1..m`, so the last series never has parents.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dlm::DlmPrior;
use crate::error::{DdnmError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentalStructure {
    parents: Vec<Vec<usize>>,
}

impl ParentalStructure {
    /// Validates and normalizes (sorts) the parent sets.
    pub fn new(mut parents: Vec<Vec<usize>>) -> Result<Self> {
        let m = parents.len();
        for (j, pa) in parents.iter_mut().enumerate() {
            pa.sort_unstable();
            if pa.windows(2).any(|w| w[0] == w[1]) {
                return Err(DdnmError::Config(format!("duplicate parent in set of series {j}")));
            }
            if let Some(&bad) = pa.iter().find(|&&h| h <= j || h >= m) {
                return Err(DdnmError::Config(format!(
                    "series {j} cannot have parent {bad}: parents must lie in {}..{m}",
                    j + 1
                )));
            }
        }
        Ok(ParentalStructure { parents })
    }

    pub fn empty(m: usize) -> Self {
        ParentalStructure {
            parents: vec![Vec::new(); m],
        }
    }

    pub fn m(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self, j: usize) -> &[usize] {
        &self.parents[j]
    }

    /// Edges parent → child as (parent, child).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .flat_map(|(j, pa)| pa.iter().map(move |&h| (h, j)))
            .collect()
    }
}

/// Regression layout of one series model: own-lag order and parents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub lag: usize,
    pub parents: Vec<usize>,
}

impl RegressorSpec {
    /// Length of the predictor block `x = (1, lags...)`.
    pub fn predictor_dim(&self) -> usize {
        1 + self.lag
    }

    pub fn state_dim(&self) -> usize {
        1 + self.lag + self.parents.len()
    }
}

/// Builds `x = (1, y_{t-1}, ..., y_{t-lag})` and the parent vector.
///
/// `own_history` holds past values of the series oldest first, so the most
/// recent lag is its last element. `current` holds the time-t values of all
/// series (only the parent entries are read).
pub fn assemble_regressor(
    series: usize,
    spec: &RegressorSpec,
    own_history: &[f64],
    current: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if own_history.len() < spec.lag {
        return Err(DdnmError::WarmUp {
            series,
            needed: spec.lag,
            available: own_history.len(),
        });
    }
    let n = own_history.len();
    let x = DVector::from_fn(spec.predictor_dim(), |i, _| {
        if i == 0 {
            1.0
        } else {
            own_history[n - i]
        }
    });
    let mut y_pa = DVector::zeros(spec.parents.len());
    for (k, &h) in spec.parents.iter().enumerate() {
        y_pa[k] = *current.get(h).ok_or_else(|| {
            DdnmError::Dimension(format!("parent {h} of series {series} missing from current values"))
        })?;
    }
    Ok((x, y_pa))
}

/// Everything needed to forecast one series under one model.
#[derive(Debug, Clone)]
pub struct SeriesPredictor {
    pub prior: DlmPrior,
    pub x: DVector<f64>,
    pub parents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointMoments {
    pub mean: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub precision: Option<DMatrix<f64>>,
}

/// Marginal mean and variance of series `j` under one model, plus its
/// covariance with every later series, given the already-filled moments of
/// series `j+1..m` in `f` and `q`.
///
/// Returns `(f_j, q_j, cov)` where `cov[l]` is the covariance with series `j+1+l`.
pub fn conditional_moments(
    j: usize,
    pred: &SeriesPredictor,
    f: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<(f64, f64, DVector<f64>)> {
    let m = f.len();
    let prior = &pred.prior;
    let p_phi = pred.x.len();
    let p_gamma = pred.parents.len();
    if p_phi + p_gamma != prior.mean.len() {
        return Err(DdnmError::Dimension(format!(
            "series {j}: {} predictors + {} parents but state has {} entries",
            p_phi,
            p_gamma,
            prior.mean.len()
        )));
    }
    let r = prior.dof;
    if !(r > 2.0) {
        return Err(DdnmError::MomentExistence { series: j, dof: r });
    }
    let a = &prior.mean;
    let rs = &prior.scale;
    let x = &pred.x;
    let pa = &pred.parents;

    let mut mean = 0.0;
    for i in 0..p_phi {
        mean += x[i] * a[i];
    }
    for (h, &ph) in pa.iter().enumerate() {
        mean += f[ph] * a[p_phi + h];
    }

    let mut u = 0.0;
    for (h, &ph) in pa.iter().enumerate() {
        for (l, &pl) in pa.iter().enumerate() {
            let r_hl = rs[(p_phi + h, p_phi + l)];
            // f_pa' R_γ f_pa + tr(R_γ Q_pa)
            u += r_hl * (f[ph] * f[pl] + q[(pl, ph)]);
        }
    }
    for i in 0..p_phi {
        for (h, &ph) in pa.iter().enumerate() {
            u += 2.0 * x[i] * rs[(i, p_phi + h)] * f[ph];
        }
        for l in 0..p_phi {
            u += x[i] * rs[(i, l)] * x[l];
        }
    }

    let mut spread = 0.0;
    for (h, &ph) in pa.iter().enumerate() {
        for (l, &pl) in pa.iter().enumerate() {
            spread += a[p_phi + h] * q[(ph, pl)] * a[p_phi + l];
        }
    }
    let var = (prior.variance + u) * r / (r - 2.0) + spread;

    // Q_{j+1:m} times the zero-padded γ mean vector
    let mut cov = DVector::zeros(m - j - 1);
    for l in (j + 1)..m {
        let mut c = 0.0;
        for (h, &ph) in pa.iter().enumerate() {
            c += q[(l, ph)] * a[p_phi + h];
        }
        cov[l - j - 1] = c;
    }
    Ok((mean, var, cov))
}

/// Joint 1-step forecast mean and variance by a backward pass over series.
pub fn joint_one_step_moments(preds: &[SeriesPredictor]) -> Result<JointMoments> {
    let m = preds.len();
    let mut f = DVector::zeros(m);
    let mut q = DMatrix::zeros(m, m);
    for j in (0..m).rev() {
        if preds[j].parents.iter().any(|&h| h <= j || h >= m) {
            return Err(DdnmError::Config(format!("series {j} has an invalid parent set")));
        }
        let (fj, qj, cov) = conditional_moments(j, &preds[j], &f, &q)?;
        f[j] = fj;
        q[(j, j)] = qj;
        for (l, c) in cov.iter().enumerate() {
            q[(j, j + 1 + l)] = *c;
            q[(j + 1 + l, j)] = *c;
        }
    }
    Ok(JointMoments {
        mean: f,
        variance: q,
        precision: None,
    })
}

/// Precision matrix of a recoupled variance matrix by backward block
/// recursion, reusing the covariance rows `Q[j, j+1..m]` instead of inverting.
pub fn joint_precision(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = q.nrows();
    if q.ncols() != m {
        return Err(DdnmError::Dimension(format!("variance matrix is {}x{}", m, q.ncols())));
    }
    let mut k = DMatrix::zeros(m, m);
    if m == 0 {
        return Ok(k);
    }
    let last = m - 1;
    if !(q[(last, last)] > 0.0) {
        return Err(DdnmError::Conditioning {
            series: last,
            value: q[(last, last)],
        });
    }
    k[(last, last)] = 1.0 / q[(last, last)];
    for j in (0..last).rev() {
        let n = m - j - 1;
        let c = q.view((j, j + 1), (1, n)).transpose();
        let k_sub = k.view((j + 1, j + 1), (n, n)).into_owned();
        let kc = &k_sub * &c;
        let k_inv = q[(j, j)] - c.dot(&kc);
        if !(k_inv > 0.0) || !k_inv.is_finite() {
            return Err(DdnmError::Conditioning {
                series: j,
                value: k_inv,
            });
        }
        let kj = 1.0 / k_inv;
        let h = -kj * kc;
        let big_h = &k_sub + &h * h.transpose() * k_inv;
        k[(j, j)] = kj;
        for l in 0..n {
            k[(j, j + 1 + l)] = h[l];
            k[(j + 1 + l, j)] = h[l];
        }
        k.view_mut((j + 1, j + 1), (n, n)).copy_from(&big_h);
    }
    Ok(k)
}

/// Contemporaneous coefficient matrix Γ: row `j` holds the γ coefficients
/// of series `j` in its parents' columns, zeros elsewhere.
pub fn gamma_matrix(structure: &ParentalStructure, gammas: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let m = structure.m();
    if gammas.len() != m {
        return Err(DdnmError::Dimension(format!("{} coefficient vectors for {m} series", gammas.len())));
    }
    let mut g = DMatrix::zeros(m, m);
    for j in 0..m {
        let pa = structure.parents(j);
        if gammas[j].len() != pa.len() {
            return Err(DdnmError::Dimension(format!(
                "series {j} has {} parents but {} coefficients",
                pa.len(),
                gammas[j].len()
            )));
        }
        for (h, &ph) in pa.iter().enumerate() {
            g[(j, ph)] = gammas[j][h];
        }
    }
    Ok(g)
}

/// Ω = (I − Γ)' Λ (I − Γ), the implied precision of the observation errors
/// mapped to the joint scale. `precisions` is the diagonal of Λ.
pub fn implied_omega(gamma: &DMatrix<f64>, precisions: &DVector<f64>) -> DMatrix<f64> {
    let m = gamma.nrows();
    let l = DMatrix::identity(m, m) - gamma;
    let lambda = DMatrix::from_diagonal(precisions);
    l.transpose() * lambda * l
}
