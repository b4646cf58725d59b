//! Independent oracles shared by the integration tests: random instances,
//! compositional samplers and dense reference solvers.
#![allow(dead_code)]

use ddnm::dlm::{k_step_prior, DiscountPair, DlmPrior, NormalGammaState};
use ddnm::forecast::{MixtureComponent, SimModel, SimulationInput};
use ddnm::graph::SeriesPredictor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_spd(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(p, p) * 0.2) * scale
}

pub fn random_prior(rng: &mut ChaCha8Rng, p: usize, dof: f64) -> DlmPrior {
    let mean = DVector::from_fn(p, |_, _| rng.random_range(-0.8..0.8));
    let level = rng.random_range(0.005..0.05);
    DlmPrior {
        mean,
        scale: random_spd(rng, p, level),
        dof,
        variance: rng.random_range(0.2..1.5),
    }
}

/// Random parent subset of `j+1..m`, each later series included with probability 1/2.
pub fn random_parents(rng: &mut ChaCha8Rng, j: usize, m: usize) -> Vec<usize> {
    (j + 1..m).filter(|_| rng.random::<bool>()).collect()
}

/// Random DDNM predictor for series `j`: intercept plus up to two lag values.
pub fn random_predictor(rng: &mut ChaCha8Rng, j: usize, m: usize, dof: f64) -> SeriesPredictor {
    let lag = rng.random_range(0..3usize);
    let mut x = vec![1.0];
    for _ in 0..lag {
        x.push(rng.random_range(-1.5..1.5));
    }
    let parents = random_parents(rng, j, m);
    let prior = random_prior(rng, x.len() + parents.len(), dof);
    SeriesPredictor {
        prior,
        x: DVector::from_vec(x),
        parents,
    }
}

pub fn random_ddnm(rng: &mut ChaCha8Rng, m: usize, dof: f64) -> Vec<SeriesPredictor> {
    (0..m).map(|j| random_predictor(rng, j, m, dof)).collect()
}

/// One draw of (θ, v) from the normal/gamma prior: 1/v ~ G(r/2, rs/2),
/// θ | v ~ N(a, R v / s).
pub fn sample_ng(prior: &DlmPrior, chol: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> (DVector<f64>, f64) {
    let r = prior.dof;
    let lambda: f64 = Gamma::new(r / 2.0, 2.0 / (r * prior.variance)).unwrap().sample(rng);
    let v = 1.0 / lambda;
    let z = DVector::from_fn(prior.mean.len(), |_, _| StandardNormal.sample(rng));
    let theta = &prior.mean + chol * z * (v / prior.variance).sqrt();
    (theta, v)
}

pub fn cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().cholesky().expect("positive definite").l()
}

/// Draws y from a DDNM by sampling parameters and observations series by
/// series, last series first. `pick(j)` selects the predictor for series `j`.
pub fn sample_joint<'a>(
    m: usize,
    rng: &mut ChaCha8Rng,
    mut pick: impl FnMut(usize, &mut ChaCha8Rng) -> (&'a SeriesPredictor, &'a DMatrix<f64>),
) -> DVector<f64> {
    let mut y = DVector::zeros(m);
    for j in (0..m).rev() {
        let (pred, chol) = pick(j, rng);
        let (theta, v) = sample_ng(&pred.prior, chol, rng);
        let p = pred.x.len();
        let mut mean = 0.0;
        for i in 0..p {
            mean += pred.x[i] * theta[i];
        }
        for (h, &ph) in pred.parents.iter().enumerate() {
            mean += y[ph] * theta[p + h];
        }
        let e: f64 = StandardNormal.sample(rng);
        y[j] = mean + e * v.sqrt();
    }
    y
}

/// Sample means and covariances with standard errors, for z-score checks.
pub struct SampleStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_se: DVector<f64>,
    pub cov_se: DMatrix<f64>,
}

pub fn sample_stats(draws: &[DVector<f64>]) -> SampleStats {
    let n = draws.len();
    let m = draws[0].len();
    let nf = n as f64;
    let mut mean = DVector::zeros(m);
    for d in draws {
        mean += d;
    }
    mean /= nf;
    let mut cov = DMatrix::<f64>::zeros(m, m);
    let mut sq = DMatrix::<f64>::zeros(m, m);
    for d in draws {
        let c = d - &mean;
        for i in 0..m {
            for l in 0..m {
                let p = c[i] * c[l];
                cov[(i, l)] += p;
                sq[(i, l)] += p * p;
            }
        }
    }
    let raw = &cov / nf;
    let mut cov_se = DMatrix::zeros(m, m);
    for i in 0..m {
        for l in 0..m {
            let var_p = (sq[(i, l)] / nf - raw[(i, l)].powi(2)).max(0.0);
            cov_se[(i, l)] = (var_p / nf).sqrt();
        }
    }
    let cov = cov / (nf - 1.0);
    let mean_se = DVector::from_fn(m, |i, _| (cov[(i, i)] / nf).sqrt());
    SampleStats {
        n,
        mean,
        cov,
        mean_se,
        cov_se,
    }
}

/// Largest |z| of analytic moments against sample statistics.
pub fn max_z(stats: &SampleStats, f: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    let m = f.len();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        worst = worst.max((stats.mean[i] - f[i]).abs() / stats.mean_se[i]);
        for l in i..m {
            worst = worst.max((stats.cov[(i, l)] - q[(i, l)]).abs() / stats.cov_se[(i, l)]);
        }
    }
    worst
}

/// Closed-form conjugate normal/gamma regression on all data at once.
pub fn batch_posterior(
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    n0: f64,
    s0: f64,
    xs: &[DVector<f64>],
    ys: &[f64],
) -> NormalGammaState {
    let v0_inv = (c0 / s0).try_inverse().unwrap();
    let p = m0.len();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut yty = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        xtx += x * x.transpose();
        xty += x * y;
        yty += y * y;
    }
    let vn_inv = &v0_inv + xtx;
    let vn = vn_inv.clone().try_inverse().unwrap();
    let mn = &vn * (&v0_inv * m0 + xty);
    let nn = n0 + ys.len() as f64;
    let quad0 = (m0.transpose() * &v0_inv * m0)[(0, 0)];
    let quadn = (mn.transpose() * &vn_inv * &mn)[(0, 0)];
    let sn = (n0 * s0 + yty + quad0 - quadn) / nn;
    NormalGammaState {
        mean: mn,
        scale: vn * sn,
        dof: nn,
        variance: sn,
    }
}

/// log p(y_1..T) of a static normal/gamma regression: a multivariate T with
/// n0 degrees of freedom, location Xm0 and scale s0 I + X C0 X'.
pub fn batch_log_evidence(
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    n0: f64,
    s0: f64,
    xs: &[DVector<f64>],
    ys: &[f64],
) -> f64 {
    let t = ys.len();
    let p = m0.len();
    let x = DMatrix::from_fn(t, p, |i, l| xs[i][l]);
    let s = DMatrix::identity(t, t) * s0 + &x * c0 * x.transpose();
    let e = DVector::from_column_slice(ys) - &x * m0;
    let chol = s.clone().cholesky().unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = e.dot(&chol.solve(&e));
    let tf = t as f64;
    statrs::function::gamma::ln_gamma((n0 + tf) / 2.0)
        - statrs::function::gamma::ln_gamma(n0 / 2.0)
        - 0.5 * tf * (n0 * std::f64::consts::PI).ln()
        - 0.5 * log_det
        - 0.5 * (n0 + tf) * (quad / n0).ln_1p()
}

/// Dense KKT solve of min w'Qw subject to A'w = b.
pub fn kkt_equality(q: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = q.nrows();
    let c = a.ncols();
    let mut k = DMatrix::zeros(m + c, m + c);
    k.view_mut((0, 0), (m, m)).copy_from(&(q * 2.0));
    k.view_mut((0, m), (m, c)).copy_from(a);
    k.view_mut((m, 0), (c, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(m + c);
    rhs.rows_mut(m, c).copy_from(b);
    let sol = k.full_piv_lu().solve(&rhs).expect("nonsingular KKT system");
    sol.rows(0, m).into_owned()
}

/// Enumerates every zero pattern of w and keeps the best KKT point with
/// w ≥ 0, for min w'Qw subject to f'w = r, 1'w = 1.
pub fn exhaustive_nonnegative(f: &DVector<f64>, q: &DMatrix<f64>, r: f64) -> Option<DVector<f64>> {
    let m = f.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let free: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let k = free.len();
        let qs = DMatrix::from_fn(k, k, |a, b| q[(free[a], free[b])]);
        let a = DMatrix::from_fn(k, 2, |i, c| if c == 0 { f[free[i]] } else { 1.0 });
        if a.clone().svd(false, false).singular_values.iter().filter(|s| **s > 1e-10).count() < 2 {
            // one free asset can still be feasible on its own
            if k == 1 && (f[free[0]] - r).abs() < 1e-12 {
                let mut w = DVector::zeros(m);
                w[free[0]] = 1.0;
                let v = w.dot(&(q * &w));
                if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, w));
                }
            }
            continue;
        }
        let ws = kkt_equality(&qs, &a, &DVector::from_vec(vec![r, 1.0]));
        if ws.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = DVector::zeros(m);
        for (i, &idx) in free.iter().enumerate() {
            w[idx] = ws[i].max(0.0);
        }
        let v = w.dot(&(q * &w));
        if best.as_ref().is_none_or(|(bv, _)| v < *bv - 1e-15) {
            best = Some((v, w));
        }
    }
    best.map(|b| b.1)
}

/// Projected gradient on the affine set {A'w = b} for min w'Qw.
pub fn projected_gradient(q: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>, iters: usize) -> DVector<f64> {
    let ata = a.transpose() * a;
    let ata_inv = ata.try_inverse().unwrap();
    let proj = DMatrix::identity(q.nrows(), q.nrows()) - a * &ata_inv * a.transpose();
    let mut w = a * (&ata_inv * b);
    let step = 0.5 / q.symmetric_eigenvalues().max();
    for _ in 0..iters {
        let g = q * &w * 2.0;
        w -= &proj * g * step;
    }
    let resid = a.transpose() * &w - b;
    w - a * (ata_inv * resid)
}

/// Augmented Lagrangian iterations for min w'Qw subject to A'w = b, with
/// increasing penalty weights solved in closed form.
pub fn augmented_lagrangian(q: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    // constraints and objective rescaled to unit size
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let a = DMatrix::from_fn(a.nrows(), a.ncols(), |i, c| a[(i, c)] / norms[c]);
    let b = DVector::from_fn(b.len(), |c, _| b[c] / norms[c]);
    let q = q / q.amax();
    let mut w = DVector::zeros(q.nrows());
    let mut mu = 1.0;
    let mut lam = DVector::zeros(a.ncols());
    for _ in 0..200 {
        // min w'Qw + lam'(A'w − b) + mu/2 |A'w − b|²
        let h = &q * 2.0 + &a * a.transpose() * mu;
        let rhs = &a * (&b * mu - &lam);
        w = h.lu().solve(&rhs).unwrap();
        lam += (a.transpose() * &w - &b) * mu;
        mu = (mu * 2.0).min(1e6);
    }
    w
}

/// One-step mixtures built from a simulation input, as the filter would see them.
pub fn one_step_mixtures(input: &SimulationInput) -> Vec<Vec<MixtureComponent>> {
    input
        .models
        .iter()
        .enumerate()
        .map(|(j, models)| {
            models
                .iter()
                .map(|sm| {
                    let hist = &input.history[j];
                    let mut x = vec![1.0];
                    for l in 1..=sm.lag {
                        x.push(hist[hist.len() - l]);
                    }
                    MixtureComponent {
                        prob: sm.prob,
                        predictor: SeriesPredictor {
                            prior: k_step_prior(&sm.state, 1, sm.discount),
                            x: DVector::from_vec(x),
                            parents: sm.parents.clone(),
                        },
                    }
                })
                .collect()
        })
        .collect()
}

/// Random multi-model simulation input with `per_series` models each.
pub fn random_simulation_input(rng: &mut ChaCha8Rng, m: usize, per_series: usize, dof: f64) -> SimulationInput {
    let history: Vec<Vec<f64>> = (0..m).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let models = (0..m)
        .map(|j| {
            let raw: Vec<f64> = (0..per_series).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter()
                .map(|w| {
                    let lag = rng.random_range(0..3usize);
                    let parents = random_parents(rng, j, m);
                    let p = 1 + lag + parents.len();
                    let prior = random_prior(rng, p, dof);
                    SimModel {
                        prob: w / total,
                        lag,
                        parents,
                        state: NormalGammaState {
                            mean: prior.mean,
                            scale: prior.scale,
                            dof: prior.dof,
                            variance: prior.variance,
                        },
                        discount: DiscountPair::new(rng.random_range(0.95..1.0), rng.random_range(0.95..1.0)).unwrap(),
                    }
                })
                .collect()
        })
        .collect();
    SimulationInput { models, history }
}

pub struct PortfolioInstance {
    pub f: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: f64,
}

/// Random PD return moments with a target strictly inside the range of means.
pub fn portfolio_instance(rng: &mut ChaCha8Rng, m: usize) -> PortfolioInstance {
    let f = DVector::from_fn(m, |_, _| rng.random_range(-0.01..0.02));
    let q = random_spd(rng, m, 1e-4);
    let (lo, hi) = (f.min(), f.max());
    let r = lo + (hi - lo) * rng.random_range(0.05..0.95);
    PortfolioInstance { f, q, r }
}

pub fn var(w: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    w.dot(&(q * w))
}

pub fn budget(f: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_columns(&[f.clone(), DVector::from_element(f.len(), 1.0)])
}

/// Stationarity and dual feasibility for min w'Qw s.t. f'w = r, 1'w = 1,
/// w ≥ 0, with multipliers fitted on the active set by least squares.
pub fn nonnegative_kkt_residual(inst: &PortfolioInstance, w: &DVector<f64>) -> f64 {
    let m = w.len();
    let active: Vec<usize> = (0..m).filter(|&i| w[i] <= 1e-12).collect();
    let mut cols = vec![inst.f.clone(), DVector::from_element(m, 1.0)];
    for &i in &active {
        let mut e = DVector::zeros(m);
        e[i] = 1.0;
        cols.push(e);
    }
    let g = &inst.q * w * 2.0;
    let a = DMatrix::from_columns(&cols);
    let lam = a.clone().svd(true, true).solve(&g, 1e-14).unwrap();
    let scale = g.amax().max(1e-300);
    let resid = (&a * &lam - &g).amax() / scale;
    // bound multipliers enter as g = ... + μ e_i with μ ≥ 0
    let dual = lam.rows(2, active.len()).iter().fold(0.0f64, |acc, &mu| acc.max(-mu)) / scale;
    resid.max(dual)
}
