//! Mean-variance portfolio rules on forecast return moments and the
//! running performance measures of a backtest.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{DdnmError, Result};
use crate::linalg::{column_rank, null_space, rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    /// Minimum variance at a target expected return.
    Target,
    /// Target rule with nonnegative weights.
    Constrained,
    /// Target over the benchmark with zero covariance to it.
    Neutral,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::Target, Rule::Constrained, Rule::Neutral];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Target => "target",
            Rule::Constrained => "constrained",
            Rule::Neutral => "neutral",
        }
    }
}

impl std::str::FromStr for Rule {
    type Err = DdnmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Rule::Target),
            "constrained" => Ok(Rule::Constrained),
            "neutral" => Ok(Rule::Neutral),
            other => Err(DdnmError::Config(format!("unknown portfolio rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub weights: DVector<f64>,
    pub rule: Rule,
    pub target: f64,
    /// Set when the variance matrix needed a diagonal jitter to factor.
    pub regularized: bool,
}

/// Cholesky factor of `q`, adding `1e-10·tr(q)/m` to the diagonal if the
/// plain factorization fails.
fn factor(q: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    let m = q.nrows();
    if q.ncols() != m || m == 0 {
        return Err(DdnmError::Dimension(format!("variance matrix is {}x{}", m, q.ncols())));
    }
    if let Some(c) = q.clone().cholesky() {
        return Ok((c, false));
    }
    let jitter = 1e-10 * q.trace() / m as f64;
    let mut reg = q.clone();
    for i in 0..m {
        reg[(i, i)] += jitter;
    }
    reg.cholesky()
        .map(|c| (c, true))
        .ok_or_else(|| DdnmError::NotPositiveDefinite("forecast variance matrix".into()))
}

/// Minimizes `w'Qw` subject to `A'w = b` (columns of `a` are constraints).
fn equality_qp(chol: &Cholesky<f64, Dyn>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let ka = chol.solve(a);
    let gram = a.transpose() * &ka;
    let d: Vec<f64> = gram.diagonal().iter().map(|v| v.abs().sqrt().max(f64::MIN_POSITIVE)).collect();
    let scaled = DMatrix::from_fn(gram.nrows(), gram.ncols(), |i, j| gram[(i, j)] / (d[i] * d[j]));
    if rank(&scaled, 1e-12) < gram.nrows() {
        return None;
    }
    let lambda = gram.lu().solve(b)?;
    Some(ka * lambda)
}

fn check_dims(f: &DVector<f64>, q: &DMatrix<f64>) -> Result<()> {
    if f.len() != q.nrows() {
        return Err(DdnmError::Dimension(format!("{} means for a {}x{} variance", f.len(), q.nrows(), q.ncols())));
    }
    Ok(())
}

/// Rule 1: minimize `w'Qw` s.t. `w'f = r`, `w'1 = 1`, via the two-constraint
/// Lagrange system on `K = Q⁻¹`.
pub fn target_portfolio(f: &DVector<f64>, q: &DMatrix<f64>, r: f64) -> Result<PortfolioWeights> {
    check_dims(f, q)?;
    let m = f.len();
    let (chol, regularized) = factor(q)?;
    let a = DMatrix::from_columns(&[f.clone(), DVector::from_element(m, 1.0)]);
    let b = DVector::from_vec(vec![r, 1.0]);
    let weights = equality_qp(&chol, &a, &b).ok_or(DdnmError::DegenerateTarget { target: r })?;
    Ok(PortfolioWeights {
        weights,
        rule: Rule::Target,
        target: r,
        regularized,
    })
}

/// Rule 2: the target rule with `w ≥ 0`, solved by a primal active-set
/// method. The rule-1 solution is returned directly when already feasible.
pub fn constrained_target_portfolio(f: &DVector<f64>, q: &DMatrix<f64>, r: f64) -> Result<PortfolioWeights> {
    check_dims(f, q)?;
    let m = f.len();
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    if r < lo - tol || r > hi + tol {
        return Err(DdnmError::Infeasible { target: r, lo, hi });
    }
    let (chol, regularized) = factor(q)?;
    let a = DMatrix::from_columns(&[f.clone(), DVector::from_element(m, 1.0)]);
    let b = DVector::from_vec(vec![r, 1.0]);
    if let Some(w1) = equality_qp(&chol, &a, &b) {
        if w1.iter().all(|&v| v >= -1e-12) {
            return Ok(PortfolioWeights {
                weights: w1,
                rule: Rule::Constrained,
                target: r,
                regularized,
            });
        }
    }
    let qr = if regularized { chol.l() * chol.l().transpose() } else { q.clone() };
    let weights = active_set(&qr, f, r)?;
    Ok(PortfolioWeights {
        weights,
        rule: Rule::Constrained,
        target: r,
        regularized,
    })
}

/// Feasible start: a two-asset mix of the lowest- and highest-return assets.
fn feasible_start(f: &DVector<f64>, r: f64) -> DVector<f64> {
    let m = f.len();
    let (mut lo_i, mut hi_i) = (0, 0);
    for i in 1..m {
        if f[i] < f[lo_i] {
            lo_i = i;
        }
        if f[i] > f[hi_i] {
            hi_i = i;
        }
    }
    let mut w = DVector::zeros(m);
    if f[hi_i] - f[lo_i] <= 0.0 {
        w[lo_i] = 1.0;
        return w;
    }
    let theta = ((f[hi_i] - r) / (f[hi_i] - f[lo_i])).clamp(0.0, 1.0);
    w[lo_i] += theta;
    w[hi_i] += 1.0 - theta;
    w
}

fn active_set(q: &DMatrix<f64>, f: &DVector<f64>, r: f64) -> Result<DVector<f64>> {
    let m = f.len();
    let g_mat = q * 2.0;
    let mut w = feasible_start(f, r);
    let mut active: Vec<bool> = w.iter().map(|&v| v == 0.0).collect();
    let scale = g_mat.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    for _ in 0..(50 * m + 100) {
        let free: Vec<usize> = (0..m).filter(|&i| !active[i]).collect();
        let grad = &g_mat * &w;
        let a_free = DMatrix::from_fn(2, free.len(), |row, c| if row == 0 { f[free[c]] } else { 1.0 });
        let z = null_space(&a_free, 1e-12);
        let mut step = DVector::zeros(m);
        if z.ncols() > 0 {
            let g_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| g_mat[(free[a], free[b])]);
            let g_f = DVector::from_fn(free.len(), |a, _| grad[free[a]]);
            let reduced = z.transpose() * &g_ff * &z;
            let rhs = -(z.transpose() * g_f);
            let pz = reduced
                .cholesky()
                .map(|c| c.solve(&rhs))
                .ok_or_else(|| DdnmError::NotPositiveDefinite("reduced Hessian".into()))?;
            let p_free = &z * pz;
            for (c, &i) in free.iter().enumerate() {
                step[i] = p_free[c];
            }
        }
        let w_scale = w.amax().max(1.0);
        if step.amax() <= 1e-13 * w_scale {
            // multipliers of the equality constraints by least squares on the free set
            let nu = if free.is_empty() {
                DVector::zeros(2)
            } else {
                let at = a_free.transpose();
                let g_f = DVector::from_fn(free.len(), |a, _| grad[free[a]]);
                at.svd(true, true).solve(&g_f, 1e-12).unwrap_or_else(|_| DVector::zeros(2))
            };
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..m {
                if !active[i] {
                    continue;
                }
                let mu = grad[i] - nu[0] * f[i] - nu[1];
                if mu < -1e-12 * scale && worst.is_none_or(|(_, v)| mu < v) {
                    worst = Some((i, mu));
                }
            }
            match worst {
                None => return Ok(w),
                Some((i, _)) => active[i] = false,
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for &i in &free {
                if step[i] < 0.0 {
                    let ratio = -w[i] / step[i];
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
            w += step * alpha;
            if let Some(i) = blocking {
                w[i] = 0.0;
                active[i] = true;
            }
        }
    }
    Err(DdnmError::Conditioning {
        series: 0,
        value: f64::NAN,
    }
    .context("active-set iteration limit reached"))
}

/// Rule 3: minimize `w'Qw` s.t. `w'f = r + s_bench`, `w'1 = 1` and
/// `w'q_bench = 0`. A zero covariance vector makes the last constraint vacuous.
pub fn benchmark_neutral_portfolio(
    f: &DVector<f64>,
    q: &DMatrix<f64>,
    q_bench: &DVector<f64>,
    s_bench: f64,
    r: f64,
) -> Result<PortfolioWeights> {
    check_dims(f, q)?;
    let m = f.len();
    if q_bench.len() != m {
        return Err(DdnmError::Dimension(format!("benchmark covariance has {} entries for {m} assets", q_bench.len())));
    }
    let (chol, regularized) = factor(q)?;
    let target = r + s_bench;
    let vacuous = q_bench.amax() == 0.0;
    let (a, b) = if vacuous {
        (
            DMatrix::from_columns(&[f.clone(), DVector::from_element(m, 1.0)]),
            DVector::from_vec(vec![target, 1.0]),
        )
    } else {
        (
            DMatrix::from_columns(&[f.clone(), DVector::from_element(m, 1.0), q_bench.clone()]),
            DVector::from_vec(vec![target, 1.0, 0.0]),
        )
    };
    if column_rank(&a, 1e-10) < a.ncols() {
        return Err(DdnmError::RankDeficient(
            "expected returns, unit vector and benchmark covariances are linearly dependent".into(),
        ));
    }
    let weights =
        equality_qp(&chol, &a, &b).ok_or_else(|| DdnmError::RankDeficient("benchmark-neutral constraint system".into()))?;
    Ok(PortfolioWeights {
        weights,
        rule: Rule::Neutral,
        target: r,
        regularized,
    })
}

/// One backtest period's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceEntry {
    /// Realized return RR.
    pub realized: f64,
    /// Cumulative return CR = Π(1 + RR).
    pub cumulative: f64,
    /// Mean realized return MRR.
    pub mean_realized: f64,
    /// Realized risk R, the sample standard deviation of RR so far.
    pub risk: f64,
    /// Annualized realized Sharpe ratio; `+∞` when `risk` is zero.
    pub sharpe: f64,
    pub sharpe_defined: bool,
    /// Projected risk PR = √(w'Qw).
    pub projected_risk: f64,
    /// Projected Sharpe ratio PSR = w'f / PR.
    pub projected_sharpe: f64,
}

/// Running CR/MRR/R/SR over consecutive periods of a fixed length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerformanceTracker {
    realized: Vec<f64>,
    cumulative: f64,
    annualization: f64,
}

impl PerformanceTracker {
    /// `period_days` trading days per period; Sharpe ratios are scaled by √(252/period_days).
    pub fn new(period_days: usize) -> Self {
        PerformanceTracker {
            realized: Vec::new(),
            cumulative: 1.0,
            annualization: (252.0 / period_days.max(1) as f64).sqrt(),
        }
    }

    pub fn realized(&self) -> &[f64] {
        &self.realized
    }

    pub fn push(&mut self, rr: f64) -> (f64, f64, f64, f64, bool) {
        self.realized.push(rr);
        self.cumulative *= 1.0 + rr;
        let n = self.realized.len() as f64;
        let mean = self.realized.iter().sum::<f64>() / n;
        let all_equal = self.realized.iter().all(|&v| v == self.realized[0]);
        let risk = if self.realized.len() < 2 || all_equal {
            0.0
        } else {
            (self.realized.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let (sharpe, defined) = if risk > 0.0 {
            (mean / risk * self.annualization, true)
        } else {
            (f64::INFINITY, false)
        };
        (self.cumulative, mean, risk, sharpe, defined)
    }
}

/// Records one period: realized return `w'y_ret`, projected risk and Sharpe
/// from the forecast moments, and the running aggregates.
pub fn evaluate_period(
    tracker: &mut PerformanceTracker,
    weights: &PortfolioWeights,
    f: &DVector<f64>,
    q: &DMatrix<f64>,
    realized_returns: &DVector<f64>,
) -> Result<PerformanceEntry> {
    let w = &weights.weights;
    if w.len() != f.len() || w.len() != realized_returns.len() || q.nrows() != w.len() {
        return Err(DdnmError::Dimension(format!(
            "weights {}, means {}, variance {}x{}, realized {}",
            w.len(),
            f.len(),
            q.nrows(),
            q.ncols(),
            realized_returns.len()
        )));
    }
    let pr = (w.transpose() * q * w)[(0, 0)].max(0.0).sqrt();
    let expected = w.dot(f);
    if pr == 0.0 && weights.target != 0.0 {
        return Err(DdnmError::DegenerateRisk);
    }
    let psr = if pr > 0.0 { expected / pr } else { 0.0 };
    let rr = w.dot(realized_returns);
    let (cumulative, mean_realized, risk, sharpe, sharpe_defined) = tracker.push(rr);
    Ok(PerformanceEntry {
        realized: rr,
        cumulative,
        mean_realized,
        risk,
        sharpe,
        sharpe_defined,
        projected_risk: pr,
        projected_sharpe: psr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn two_asset_target() {
        let w = target_portfolio(&vec(&[0.1, 0.2]), &DMatrix::identity(2, 2), 0.15).unwrap();
        assert_relative_eq!(w.weights, vec(&[0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn symmetric_moments_degenerate() {
        let f = DVector::from_element(4, 0.01);
        let err = target_portfolio(&f, &DMatrix::identity(4, 4), 0.01).unwrap_err();
        assert!(matches!(err, DdnmError::DegenerateTarget { .. }));
        // without the degenerate return constraint the minimum variance portfolio is equal weights
        let w = constrained_target_portfolio(&f, &DMatrix::identity(4, 4), 0.01).unwrap();
        assert_relative_eq!(w.weights, DVector::from_element(4, 0.25), epsilon = 1e-10);
    }

    #[test]
    fn corner_target() {
        let w = constrained_target_portfolio(&vec(&[0.1, 0.2]), &DMatrix::identity(2, 2), 0.2).unwrap();
        assert_relative_eq!(w.weights, vec(&[0.0, 1.0]), epsilon = 1e-12);
        let err = constrained_target_portfolio(&vec(&[0.1, 0.2]), &DMatrix::identity(2, 2), 0.3).unwrap_err();
        assert!(matches!(err, DdnmError::Infeasible { lo, hi, .. } if lo == 0.1 && hi == 0.2));
    }

    #[test]
    fn inactive_constraints_reproduce_rule_one() {
        let f = vec(&[0.01, 0.02, 0.015]);
        let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 1.5, 0.3, 0.1, 0.3, 1.2]) * 1e-4;
        let w1 = target_portfolio(&f, &q, 0.015).unwrap();
        assert!(w1.weights.iter().all(|&v| v >= 0.0));
        let w2 = constrained_target_portfolio(&f, &q, 0.015).unwrap();
        assert_eq!(w1.weights, w2.weights);
    }

    #[test]
    fn vacuous_benchmark_constraint() {
        let f = vec(&[0.01, 0.03, 0.02]);
        let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 1.5, 0.3, 0.1, 0.3, 1.2]);
        let w3 = benchmark_neutral_portfolio(&f, &q, &DVector::zeros(3), 0.0, 0.02).unwrap();
        let w1 = target_portfolio(&f, &q, 0.02).unwrap();
        assert_relative_eq!(w3.weights, w1.weights, epsilon = 1e-14);
        let dependent = benchmark_neutral_portfolio(&f, &q, &(&f * 2.0), 0.0, 0.02).unwrap_err();
        assert!(matches!(dependent, DdnmError::RankDeficient(_)));
    }

    #[test]
    fn singular_variance_is_regularized() {
        let f = vec(&[0.01, 0.02, 0.03]);
        let mut q = DMatrix::from_element(3, 3, 1.0);
        q[(2, 2)] = 2.0;
        let w = target_portfolio(&f, &q, 0.02).unwrap();
        assert!(w.regularized);
        assert_relative_eq!(w.weights.sum(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn performance_measures() {
        let mut t = PerformanceTracker::new(1);
        t.push(0.1);
        let (cr, ..) = t.push(-0.1);
        assert_relative_eq!(cr, 0.99, epsilon = 1e-15);

        let mut t = PerformanceTracker::new(5);
        let mut last = None;
        for _ in 0..4 {
            last = Some(t.push(0.003));
        }
        let (_, mrr, risk, sharpe, defined) = last.unwrap();
        assert_eq!(risk, 0.0);
        assert!(!defined && sharpe == f64::INFINITY);
        assert_relative_eq!(mrr, 0.003, epsilon = 1e-15);
    }

    #[test]
    fn single_asset_period() {
        let q = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let f = vec(&[0.01, 0.02]);
        let w = PortfolioWeights { weights: vec(&[0.0, 1.0]), rule: Rule::Target, target: 0.02, regularized: false };
        let mut t = PerformanceTracker::new(1);
        let e = evaluate_period(&mut t, &w, &f, &q, &vec(&[0.05, -0.02])).unwrap();
        assert_relative_eq!(e.projected_risk, 0.3);
        assert_eq!(e.realized, -0.02);
        assert_relative_eq!(e.projected_sharpe, 0.02 / 0.3);
        let zero = DMatrix::zeros(2, 2);
        assert!(matches!(evaluate_period(&mut t, &w, &f, &zero, &vec(&[0.0, 0.0])), Err(DdnmError::DegenerateRisk)));
    }

    #[test]
    fn sharpe_annualization() {
        let mut daily = PerformanceTracker::new(1);
        daily.push(0.01);
        let (_, mrr, risk, sharpe, _) = daily.push(0.03);
        assert_relative_eq!(sharpe, mrr / risk * 252f64.sqrt());
    }

    fn pd_matrix(vals: &[f64], m: usize) -> DMatrix<f64> {
        let b = DMatrix::from_row_slice(m, m, &vals[..m * m]);
        b.transpose() * &b + DMatrix::identity(m, m) * 0.1
    }

    proptest! {
        #[test]
        fn rules_are_scale_equivariant(
            vals in prop::collection::vec(-1.0f64..1.0, 16),
            fs in prop::collection::vec(-0.05f64..0.05, 4),
            c in 0.1f64..50.0,
        ) {
            let q = pd_matrix(&vals, 4);
            let f = DVector::from_vec(fs);
            prop_assume!(f.max() - f.min() > 1e-3);
            let r = 0.5 * (f.max() + f.min());
            let qc = &q * c;
            let w1 = target_portfolio(&f, &q, r).unwrap();
            let w1c = target_portfolio(&f, &qc, r).unwrap();
            prop_assert!((&w1.weights - &w1c.weights).amax() < 1e-8);
            let w2 = constrained_target_portfolio(&f, &q, r).unwrap();
            let w2c = constrained_target_portfolio(&f, &qc, r).unwrap();
            prop_assert!((&w2.weights - &w2c.weights).amax() < 1e-7);
            let qb = q.column(0).into_owned();
            let w3 = benchmark_neutral_portfolio(&f, &q, &qb, 0.001, r);
            let w3c = benchmark_neutral_portfolio(&f, &qc, &(&qb * c), 0.001, r);
            if let (Ok(a), Ok(b)) = (w3, w3c) {
                prop_assert!((&a.weights - &b.weights).amax() < 1e-7);
            }
            let pr = (w1.weights.transpose() * &q * &w1.weights)[(0, 0)].sqrt();
            let prc = (w1c.weights.transpose() * &qc * &w1c.weights)[(0, 0)].sqrt();
            prop_assert!((prc - pr * c.sqrt()).abs() < 1e-8 * (1.0 + prc));
        }

        #[test]
        fn rule_one_is_locally_optimal(
            vals in prop::collection::vec(-1.0f64..1.0, 25),
            fs in prop::collection::vec(-0.05f64..0.05, 5),
            ds in prop::collection::vec(-1.0f64..1.0, 5),
        ) {
            let q = pd_matrix(&vals, 5);
            let f = DVector::from_vec(fs);
            prop_assume!(f.max() - f.min() > 1e-3);
            let w = target_portfolio(&f, &q, f.mean()).unwrap().weights;
            // project a random direction onto {d : d'1 = 0, d'f = 0}
            let a = DMatrix::from_columns(&[DVector::from_element(5, 1.0), f.clone()]);
            let z = null_space(&a.transpose(), 1e-12);
            let d = &z * (z.transpose() * DVector::from_vec(ds));
            let base = (w.transpose() * &q * &w)[(0, 0)];
            for eps in [1e-4, -1e-4] {
                let v = &w + &d * eps;
                prop_assert!((v.transpose() * &q * &v)[(0, 0)] >= base - 1e-15);
            }
        }

        #[test]
        fn cumulative_return_telescopes(rrs in prop::collection::vec(-0.05f64..0.05, 2..40), split in 0usize..40) {
            let u = split.min(rrs.len());
            let cr = |s: &[f64]| s.iter().fold(1.0, |a, r| a * (1.0 + r));
            let mut t = PerformanceTracker::new(1);
            let mut last = 1.0;
            for &r in &rrs {
                last = t.push(r).0;
            }
            prop_assert!((last - cr(&rrs[..u]) * cr(&rrs[u..])).abs() < 1e-12);
        }
    }
}
