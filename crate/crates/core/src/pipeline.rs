//! Command implementations: model counting, training, backtesting and
//! forecasting, with their CSV artifacts and run manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::{Engine, EngineSettings};
use crate::error::{DdnmError, Result};
use crate::forecast::{returns_moments, simulate_paths, PathTensor};
use crate::io::{split, to_log_prices, EngineConfig, LoadOptions, PriceFrame};
use crate::model_space::{joint_model_count, model_count};
use crate::par::Execution;
use crate::portfolio::{
    benchmark_neutral_portfolio, constrained_target_portfolio, evaluate_period, target_portfolio, PerformanceTracker,
    PortfolioWeights, Rule,
};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STATE_FILE: &str = "state.bin";

/// Loaded price data with everything derived from it.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub frame: PriceFrame,
    /// Modeled series names in model order.
    pub names: Vec<String>,
    /// `rows[t][j]`: log price of modeled series `j` at date `t`.
    pub rows: Vec<Vec<f64>>,
    /// sha256 of the raw input file.
    pub digest: String,
}

impl Inputs {
    /// Investable series count; the benchmark, if any, is the last modeled series.
    pub fn investable(&self) -> usize {
        self.frame.names.len()
    }

    pub fn from_frame(frame: PriceFrame, digest: String) -> Self {
        let cols = to_log_prices(&frame);
        let t = frame.len();
        let rows = (0..t).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        Inputs {
            names: frame.modeled_names(),
            frame,
            rows,
            digest,
        }
    }

    fn column_prefix(&self, end: usize) -> Vec<Vec<f64>> {
        (0..self.names.len())
            .map(|j| self.rows[..end].iter().map(|r| r[j]).collect())
            .collect()
    }

    fn index_of(&self, date: NaiveDate) -> Result<usize> {
        self.frame
            .dates
            .binary_search(&date)
            .map_err(|_| DdnmError::Config(format!("date {date} is not in the data")))
    }
}

pub fn load_inputs(path: &Path, cfg: &EngineConfig, ffill: bool) -> Result<Inputs> {
    let bytes = std::fs::read(path).map_err(|e| DdnmError::io(path.display().to_string(), e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let text = String::from_utf8(bytes).map_err(|_| DdnmError::Data(format!("{} is not UTF-8 text", path.display())))?;
    let opts = LoadOptions {
        ffill,
        benchmark: cfg.benchmark.clone(),
    };
    let mut frame = crate::io::parse_prices(&text, &opts)?;
    if !cfg.series.is_empty() {
        frame = frame.select(&cfg.series)?;
    }
    Ok(Inputs::from_frame(frame, digest))
}

/// Identity of a run. Its sha256 is stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub command: String,
    pub config: String,
    pub input_digest: String,
    pub seed: u64,
    pub series: Vec<String>,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &EngineConfig, input_digest: &str, series: &[String]) -> Self {
        RunManifest {
            engine_version: ENGINE_VERSION.to_string(),
            command: command.to_string(),
            config: cfg.to_config_string(),
            input_digest: input_digest.to_string(),
            seed: cfg.seed,
            series: series.to_vec(),
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// sha256 of the manifest.json bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.to_json()).map_err(|e| DdnmError::io(path.display().to_string(), e))
    }
}

/// Wall-clock phase timings, written only on request to keep artifacts reproducible.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
}

impl Timings {
    pub fn record(&mut self, name: &str, start: Instant) {
        self.phases.push((name.to_string(), start.elapsed().as_secs_f64()));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("timings.json");
        let text = serde_json::to_string_pretty(self).expect("timings serialize");
        std::fs::write(&path, text + "\n").map_err(|e| DdnmError::io(path.display().to_string(), e))
    }
}

/// A CSV file whose first line is `# manifest=<digest>`.
pub struct Artifact {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    rows: usize,
}

impl Artifact {
    pub fn create(dir: &Path, name: &str, digest: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| DdnmError::io(path.display().to_string(), e))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "# manifest={digest}").map_err(|e| DdnmError::io(path.display().to_string(), e))?;
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header).map_err(|e| csv_error(&path, e))?;
        Ok(Artifact { path, writer, rows: 0 })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.rows += 1;
        self.writer.write_record(fields).map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<usize> {
        self.writer.flush().map_err(|e| DdnmError::io(self.path.display().to_string(), e))?;
        Ok(self.rows)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> DdnmError {
    DdnmError::Data(format!("writing {}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DdnmError::io(dir.display().to_string(), e))
}

fn num(v: f64) -> String {
    v.to_string()
}

/// Per-stream seed for a Monte Carlo run keyed by date index and replica.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- enumerate

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerateReport {
    pub names: Vec<String>,
    pub d: usize,
    pub k: usize,
    pub per_series: Vec<u128>,
    pub total: u128,
    /// (2^m − 1)(d+1)k, the unrestricted count.
    pub formula_total: u128,
    pub joint: f64,
    pub restricted: bool,
    pub bytes: u128,
}

/// Counts models without building filter states.
pub fn cmd_enumerate(cfg: &EngineConfig, names: &[String]) -> Result<EnumerateReport> {
    cfg.validate()?;
    let m = names.len();
    if m == 0 {
        return Err(DdnmError::Config("no series to enumerate; pass --data or set 'series'".into()));
    }
    let k = cfg.discount_grid()?.len();
    let restriction = cfg.restriction(names)?;
    let restricted = restriction.max_parents.is_some() || restriction.candidates.iter().any(Option::is_some);
    let mut per_series = Vec::with_capacity(m);
    let mut bytes: u128 = 0;
    for j in 0..m {
        let sets = if j == m - 1 { vec![Vec::new()] } else { restriction.parent_sets(j, m)? };
        let n = sets.len() as u128 * (cfg.d as u128 + 1) * k as u128;
        per_series.push(n);
        for s in &sets {
            for lag in 0..=cfg.d {
                let dim = (1 + lag + s.len()) as u128;
                // mean, scale matrix, dof, variance, spec and table entry
                bytes += k as u128 * (8 * (dim + dim * dim + 2) + 96 + 8 * s.len() as u128);
            }
        }
    }
    let total = per_series.iter().sum();
    Ok(EnumerateReport {
        names: names.to_vec(),
        d: cfg.d,
        k,
        per_series,
        total,
        formula_total: model_count(m, cfg.d, k),
        joint: joint_model_count(m, cfg.d, k),
        restricted,
        bytes,
    })
}

impl EnumerateReport {
    pub fn render(&self) -> String {
        let m = self.names.len();
        let mut s = String::new();
        s.push_str("series,models\n");
        for (n, c) in self.names.iter().zip(&self.per_series) {
            s.push_str(&format!("{n},{c}\n"));
        }
        s.push_str(&format!("total models: {}\n", self.total));
        s.push_str(&format!(
            "formula (2^m - 1)(d + 1)k with m={m}, d={}, k={}: {}\n",
            self.d, self.k, self.formula_total
        ));
        if self.restricted {
            s.push_str("parental sets are restricted; total = sum over series of |candidate sets| x (d + 1) x k\n");
        }
        let lags_from_one = ((1u128 << m) - 1) * self.d as u128 * self.k as u128;
        s.push_str(&format!(
            "note: lags range over 0..d; with lags 1..d the formula gives {lags_from_one}.\n"
        ));
        s.push_str(&format!("joint models 2^(m(m-1)/2)(d+1)^m k^m: {:e}\n", self.joint));
        s.push_str(&format!("estimated filter memory: {:.1} MiB\n", self.bytes as f64 / (1024.0 * 1024.0)));
        s
    }
}

// ---------------------------------------------------------------------- fit

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Stop after this date and save an unpruned state.
    pub stop_after: Option<NaiveDate>,
    /// Continue from a saved state.
    pub resume: Option<Engine>,
    pub exec: Execution,
    pub timings: bool,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub engine: Engine,
    pub manifest_digest: String,
    pub dates_processed: usize,
    pub filtered: usize,
    pub pruned: bool,
}

/// Index one past the last training date.
pub fn training_end(inputs: &Inputs, cfg: &EngineConfig) -> Result<usize> {
    match cfg.split_date {
        Some(d) => Ok(split(&inputs.frame, d)?.0.end),
        None => Ok(inputs.frame.len()),
    }
}

pub fn cmd_fit(inputs: &Inputs, cfg: &EngineConfig, out: &Path, opts: FitOptions) -> Result<FitSummary> {
    ensure_dir(out)?;
    let mut timings = Timings::default();
    let started = Instant::now();
    let train_end = training_end(inputs, cfg)?;
    let stop = match opts.stop_after {
        Some(d) => {
            let i = inputs.index_of(d)? + 1;
            if i > train_end {
                return Err(DdnmError::Config(format!("--stop-after {d} lies beyond the training period")));
            }
            i
        }
        None => train_end,
    };
    let settings = EngineSettings::from_config(cfg, &inputs.names)?;
    let mut engine = match opts.resume {
        Some(e) => {
            if e.settings != settings {
                return Err(DdnmError::Config("state was fitted with a different model space or series order".into()));
            }
            if e.pruned {
                return Err(DdnmError::Config("state has already completed training".into()));
            }
            if e.seen > stop {
                return Err(DdnmError::Config(format!(
                    "state already covers {} dates, beyond the requested stop",
                    e.seen
                )));
            }
            e
        }
        None => Engine::new(settings, &inputs.column_prefix(train_end))?,
    };
    let start = engine.seen;

    let manifest = RunManifest::new("fit", cfg, &inputs.digest, &inputs.names)
        .with("start_date", inputs.frame.dates[start])
        .with("end_date", inputs.frame.dates[stop - 1]);
    let digest = manifest.digest();
    manifest.write(out)?;

    let alpha_header = ["date", "alpha", "prob", "log_pred"];
    let mut alpha_csv = Artifact::create(out, "alpha_posterior.csv", &digest, &alpha_header)?;
    let mut models_csv = Artifact::create(
        out,
        "model_probs.csv",
        &digest,
        &["date", "alpha", "series", "rank", "model", "prob"],
    )?;
    let mut marg_csv = Artifact::create(out, "marginals.csv", &digest, &["date", "series", "feature", "value"])?;

    let m = inputs.names.len();
    let mut filtered = 0;
    for t in start..stop {
        let outcome = engine
            .observe(&inputs.rows[t], opts.exec)
            .map_err(|e| e.context(format!("date {}", inputs.frame.dates[t])))?;
        let Some(outcome) = outcome else { continue };
        filtered += 1;
        let date = inputs.frame.dates[t].to_string();
        let pa = engine.alpha_posterior();
        for (r, rep) in engine.replicas.iter().enumerate() {
            alpha_csv.row([date.clone(), num(rep.alpha), num(pa[r]), num(outcome.log_pred[r])])?;
        }
        let mut avg_delta = vec![0.0; m];
        let mut avg_beta = vec![0.0; m];
        let mut avg_lag = vec![0.0; m];
        let mut avg_inc: Vec<Vec<f64>> = (0..m).map(|j| vec![0.0; m - j - 1]).collect();
        for (r, rep) in engine.replicas.iter().enumerate() {
            for j in 0..m {
                let s = engine.summarize(r, j, cfg.top_models);
                for (rank, (i, p)) in s.top.iter().enumerate() {
                    models_csv.row([
                        date.clone(),
                        num(rep.alpha),
                        inputs.names[j].clone(),
                        (rank + 1).to_string(),
                        engine.banks[j].specs[*i].label(Some(&inputs.names)),
                        num(*p),
                    ])?;
                }
                avg_delta[j] += pa[r] * s.delta;
                avg_beta[j] += pa[r] * s.beta;
                avg_lag[j] += pa[r] * s.lag;
                for (l, v) in s.inclusion.iter().enumerate() {
                    avg_inc[j][l] += pa[r] * v;
                }
            }
        }
        for j in 0..m {
            let name = &inputs.names[j];
            marg_csv.row([date.as_str(), name, "delta", &num(avg_delta[j])])?;
            marg_csv.row([date.as_str(), name, "beta", &num(avg_beta[j])])?;
            marg_csv.row([date.as_str(), name, "lag", &num(avg_lag[j])])?;
            for (l, v) in avg_inc[j].iter().enumerate() {
                let feature = format!("parent:{}", inputs.names[j + 1 + l]);
                marg_csv.row([date.as_str(), name, &feature, &num(*v)])?;
            }
        }
    }
    alpha_csv.finish()?;
    models_csv.finish()?;
    marg_csv.finish()?;
    timings.record("filter", started);

    let completed = stop == train_end;
    if completed {
        engine.prune();
        let mut counts = Artifact::create(out, "pruned_counts.csv", &digest, &["series", "models"])?;
        for (j, n) in engine.model_counts().iter().enumerate() {
            counts.row([inputs.names[j].clone(), n.to_string()])?;
        }
        counts.finish()?;
    }
    engine.save(&out.join(STATE_FILE))?;
    if opts.timings {
        timings.record("total", started);
        timings.write(out)?;
    }
    Ok(FitSummary {
        engine,
        manifest_digest: digest,
        dates_processed: stop - start,
        filtered,
        pruned: completed,
    })
}

// ----------------------------------------------------------------- backtest

#[derive(Debug, Clone)]
pub struct BacktestOptions {
    pub horizon: usize,
    pub rules: Vec<Rule>,
    pub exec: Execution,
    pub timings: bool,
}

/// Table-style performance summary of one rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSummary {
    pub name: String,
    pub mean_return: f64,
    pub risk: f64,
    pub sharpe: f64,
    pub cumulative: f64,
    pub periods: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub alpha: f64,
    pub horizon: usize,
    pub method: &'static str,
    pub rmse: f64,
    pub mad: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct BacktestSummary {
    pub rules: Vec<RuleSummary>,
    pub accuracy: Vec<AccuracyRow>,
    pub rebalances: usize,
    pub manifest_digest: String,
    pub engine: Engine,
}

impl BacktestSummary {
    pub fn render(&self) -> String {
        let mut s = format!("{:<14}{:>14}{:>14}{:>14}{:>10}\n", "rule", "MRR", "Risk", "Sharpe", "failed");
        for r in &self.rules {
            s.push_str(&format!(
                "{:<14}{:>14.6}{:>14.6}{:>14.4}{:>10}\n",
                r.name, r.mean_return, r.risk, r.sharpe, r.failed
            ));
        }
        s
    }
}

#[derive(Default)]
struct ErrorAccumulator {
    sq: f64,
    abs: f64,
    n: usize,
}

impl ErrorAccumulator {
    fn add(&mut self, e: f64) {
        self.sq += e * e;
        self.abs += e.abs();
        self.n += 1;
    }
}

struct RuleState {
    rule: Rule,
    tracker: PerformanceTracker,
    last: (f64, f64, f64, f64),
    failed: usize,
}

pub fn cmd_backtest(
    inputs: &Inputs,
    cfg: &EngineConfig,
    mut engine: Engine,
    out: &Path,
    opts: &BacktestOptions,
) -> Result<BacktestSummary> {
    ensure_dir(out)?;
    let h = opts.horizon;
    if h == 0 {
        return Err(DdnmError::Config("horizon must be at least 1".into()));
    }
    let settings = EngineSettings::from_config(cfg, &inputs.names)?;
    if engine.settings != settings {
        return Err(DdnmError::Config("state was fitted with a different model space or series order".into()));
    }
    let train_end = training_end(inputs, cfg)?;
    if cfg.split_date.is_none() {
        return Err(DdnmError::Config("backtesting needs split_date".into()));
    }
    if engine.seen != train_end || !engine.pruned {
        return Err(DdnmError::Config(format!(
            "state covers {} dates but training ends after {}; run fit to completion first",
            engine.seen, train_end
        )));
    }
    let total = inputs.frame.len();
    let n_inv = inputs.investable();
    let has_bench = inputs.names.len() > n_inv;
    let target = cfg.target(h);
    let started = Instant::now();
    let mut timings = Timings::default();

    let manifest = RunManifest::new("backtest", cfg, &inputs.digest, &inputs.names)
        .with("horizon", h)
        .with("rules", opts.rules.iter().map(|r| r.name()).collect::<Vec<_>>().join(","));
    let digest = manifest.digest();
    manifest.write(out)?;

    let mut rules: Vec<RuleState> = opts
        .rules
        .iter()
        .filter(|r| has_bench || **r != Rule::Neutral)
        .map(|&rule| RuleState {
            rule,
            tracker: PerformanceTracker::new(h),
            last: (1.0, 0.0, 0.0, f64::INFINITY),
            failed: 0,
        })
        .collect();
    let mut perf_csv = Artifact::create(
        out,
        "performance.csv",
        &digest,
        &["date", "rule", "RR", "CR", "MRR", "R", "PR", "SR", "PSR", "status"],
    )?;
    let mut weights_csv = Artifact::create(out, "weights.csv", &digest, &["date", "rule", "series", "weight"])?;
    let mut z_csv = Artifact::create(
        out,
        "standardized_errors.csv",
        &digest,
        &["date", "series", "horizon", "method", "z"],
    )?;
    let mut cta_tracker = inputs.frame.cta.as_ref().map(|_| PerformanceTracker::new(h));
    let mut cta_last = (1.0, 0.0, 0.0, f64::INFINITY);
    let n_rep = engine.replicas.len();
    let mut acc_one: Vec<ErrorAccumulator> = (0..n_rep).map(|_| ErrorAccumulator::default()).collect();
    let mut acc_k: Vec<ErrorAccumulator> = (0..n_rep).map(|_| ErrorAccumulator::default()).collect();
    let mut rebalances = 0;

    let mut t = train_end;
    while t < total {
        let origin = t - 1;
        if origin + h < total {
            rebalances += 1;
            let end = origin + h;
            let end_date = inputs.frame.dates[end].to_string();
            let current = engine.current()?;
            let map = engine.map_replica();
            let mut map_returns = None;
            for r in 0..n_rep {
                let seed = derive_seed(cfg.seed, origin as u64, r as u64);
                let paths = simulate_paths(&engine.simulation_input(r), h, cfg.nmc, seed, opts.exec)
                    .map_err(|e| e.context(format!("simulating from {}", inputs.frame.dates[origin])))?;
                let (mean, var) = paths.moments(h)?;
                for j in 0..inputs.names.len() {
                    let e = inputs.rows[end][j] - mean[j];
                    acc_k[r].add(e);
                    if r == map {
                        z_csv.row([
                            end_date.clone(),
                            inputs.names[j].clone(),
                            h.to_string(),
                            "mc".to_string(),
                            num(e / var[(j, j)].sqrt()),
                        ])?;
                    }
                }
                if r == map {
                    map_returns = Some(returns_moments(&paths, h, &current)?);
                }
            }
            let ret = map_returns.expect("map replica simulated");
            let realized = DVector::from_fn(n_inv, |j, _| (inputs.rows[end][j] - inputs.rows[origin][j]).exp() - 1.0);
            let f = ret.mean.rows(0, n_inv).into_owned();
            let q = ret.variance.view((0, 0), (n_inv, n_inv)).into_owned();
            for rs in &mut rules {
                let solved = solve_rule(rs.rule, &f, &q, &ret.mean, &ret.variance, n_inv, target);
                let result = solved.and_then(|w| {
                    let entry = evaluate_period(&mut rs.tracker, &w, &f, &q, &realized)?;
                    Ok((w, entry))
                });
                match result {
                    Ok((w, e)) => {
                        rs.last = (e.cumulative, e.mean_realized, e.risk, e.sharpe);
                        perf_csv.row([
                            end_date.clone(),
                            rs.rule.name().to_string(),
                            num(e.realized),
                            num(e.cumulative),
                            num(e.mean_realized),
                            num(e.risk),
                            num(e.projected_risk),
                            num(e.sharpe),
                            num(e.projected_sharpe),
                            if w.regularized { "regularized".into() } else { "ok".to_string() },
                        ])?;
                        for j in 0..n_inv {
                            weights_csv.row([
                                end_date.clone(),
                                rs.rule.name().to_string(),
                                inputs.names[j].clone(),
                                num(w.weights[j]),
                            ])?;
                        }
                    }
                    Err(err) => {
                        rs.failed += 1;
                        let (cr, mrr, risk, sr) = rs.last;
                        perf_csv.row([
                            end_date.clone(),
                            rs.rule.name().to_string(),
                            num(0.0),
                            num(cr),
                            num(mrr),
                            num(risk),
                            num(f64::NAN),
                            num(sr),
                            num(f64::NAN),
                            format!("failed: {err}"),
                        ])?;
                    }
                }
            }
            if let (Some(tr), Some(cta)) = (cta_tracker.as_mut(), inputs.frame.cta.as_ref()) {
                let rr = if cta[origin] != 0.0 { cta[end] / cta[origin] - 1.0 } else { 0.0 };
                let (cr, mrr, risk, sr, _) = tr.push(rr);
                cta_last = (cr, mrr, risk, sr);
                perf_csv.row([
                    end_date.clone(),
                    "cta".to_string(),
                    num(rr),
                    num(cr),
                    num(mrr),
                    num(risk),
                    num(f64::NAN),
                    num(sr),
                    num(f64::NAN),
                    "comparison".to_string(),
                ])?;
            }
        }
        // advance through the period (or the remaining tail) one date at a time
        let stop = if origin + h < total { origin + h + 1 } else { total };
        while t < stop {
            let date = inputs.frame.dates[t].to_string();
            let map = engine.map_replica();
            for r in 0..n_rep {
                let mom = engine.one_step_moments(r).map_err(|e| e.context(format!("date {date}")))?;
                for j in 0..inputs.names.len() {
                    let e = inputs.rows[t][j] - mom.mean[j];
                    acc_one[r].add(e);
                    if r == map {
                        z_csv.row([
                            date.clone(),
                            inputs.names[j].clone(),
                            "1".to_string(),
                            "analytic".to_string(),
                            num(e / mom.variance[(j, j)].sqrt()),
                        ])?;
                    }
                }
            }
            engine
                .observe(&inputs.rows[t], opts.exec)
                .map_err(|e| e.context(format!("date {date}")))?;
            t += 1;
        }
    }
    perf_csv.finish()?;
    weights_csv.finish()?;
    z_csv.finish()?;
    timings.record("backtest", started);

    let mut accuracy = Vec::with_capacity(2 * n_rep);
    let mut acc_csv = Artifact::create(
        out,
        "accuracy.csv",
        &digest,
        &["alpha", "horizon", "method", "rmse", "mad", "n"],
    )?;
    for r in 0..n_rep {
        let alpha = engine.replicas[r].alpha;
        for (horizon, method, a) in [(1, "analytic", &acc_one[r]), (h, "mc", &acc_k[r])] {
            let n = a.n.max(1) as f64;
            let row = AccuracyRow {
                alpha,
                horizon,
                method,
                rmse: (a.sq / n).sqrt(),
                mad: a.abs / n,
                n: a.n,
            };
            acc_csv.row([
                num(alpha),
                horizon.to_string(),
                method.to_string(),
                num(row.rmse),
                num(row.mad),
                a.n.to_string(),
            ])?;
            accuracy.push(row);
        }
    }
    acc_csv.finish()?;

    let mut summary = Vec::new();
    for rs in &rules {
        summary.push(RuleSummary {
            name: rs.rule.name().to_string(),
            cumulative: rs.last.0,
            mean_return: rs.last.1,
            risk: rs.last.2,
            sharpe: rs.last.3,
            periods: rs.tracker.realized().len(),
            failed: rs.failed,
        });
    }
    if let Some(tr) = &cta_tracker {
        summary.push(RuleSummary {
            name: "cta".into(),
            cumulative: cta_last.0,
            mean_return: cta_last.1,
            risk: cta_last.2,
            sharpe: cta_last.3,
            periods: tr.realized().len(),
            failed: 0,
        });
    }
    let mut sum_csv = Artifact::create(
        out,
        "summary.csv",
        &digest,
        &["rule", "MRR", "Risk", "Sharpe", "CR", "periods", "failed"],
    )?;
    for s in &summary {
        sum_csv.row([
            s.name.clone(),
            num(s.mean_return),
            num(s.risk),
            num(s.sharpe),
            num(s.cumulative),
            s.periods.to_string(),
            s.failed.to_string(),
        ])?;
    }
    sum_csv.finish()?;
    if opts.timings {
        timings.write(out)?;
    }
    Ok(BacktestSummary {
        rules: summary,
        accuracy,
        rebalances,
        manifest_digest: digest,
        engine,
    })
}

fn solve_rule(
    rule: Rule,
    f: &DVector<f64>,
    q: &DMatrix<f64>,
    full_mean: &DVector<f64>,
    full_var: &DMatrix<f64>,
    n_inv: usize,
    target: f64,
) -> Result<PortfolioWeights> {
    match rule {
        Rule::Target => target_portfolio(f, q, target),
        Rule::Constrained => constrained_target_portfolio(f, q, target),
        Rule::Neutral => {
            let q_bench = full_var.view((0, n_inv), (n_inv, 1)).column(0).into_owned();
            benchmark_neutral_portfolio(f, q, &q_bench, full_mean[n_inv], target)
        }
    }
}

// ----------------------------------------------------------------- forecast

#[derive(Debug, Clone)]
pub struct ForecastOptions {
    pub horizon: usize,
    /// Replica to forecast with; the highest-posterior α when `None`.
    pub replica: Option<usize>,
    pub dump_paths: bool,
    pub exec: Execution,
}

#[derive(Debug, Clone)]
pub struct ForecastSummary {
    pub alpha: f64,
    pub origin: NaiveDate,
    pub analytic_mean: DVector<f64>,
    pub analytic_variance: DMatrix<f64>,
    pub paths: PathTensor,
    /// Largest |MC − analytic| / SE over the 1-step means.
    pub max_mean_z: f64,
    /// Largest |MC − analytic| / SE over the 1-step variances.
    pub max_var_z: f64,
    pub manifest_digest: String,
}

/// Forecasts from the end of the data. A state fitted on a prefix of the
/// data is first filtered forward over the remaining dates.
pub fn cmd_forecast(
    inputs: &Inputs,
    cfg: &EngineConfig,
    mut engine: Engine,
    out: &Path,
    opts: &ForecastOptions,
) -> Result<ForecastSummary> {
    ensure_dir(out)?;
    if opts.horizon == 0 {
        return Err(DdnmError::Config("forecast horizon must be at least 1".into()));
    }
    let settings = EngineSettings::from_config(cfg, &inputs.names)?;
    if engine.settings != settings {
        return Err(DdnmError::Config("state was fitted with a different model space or series order".into()));
    }
    if engine.seen > inputs.frame.len() {
        return Err(DdnmError::Data("state covers more dates than the data".into()));
    }
    for t in engine.seen..inputs.frame.len() {
        engine
            .observe(&inputs.rows[t], opts.exec)
            .map_err(|e| e.context(format!("date {}", inputs.frame.dates[t])))?;
    }
    if !engine.is_warm() || engine.seen == 0 {
        return Err(DdnmError::Data("not enough observations to forecast".into()));
    }
    let replica = opts.replica.unwrap_or_else(|| engine.map_replica());
    if replica >= engine.replicas.len() {
        return Err(DdnmError::Config(format!("replica {replica} out of range")));
    }
    let alpha = engine.replicas[replica].alpha;
    let origin = inputs.frame.dates[engine.seen - 1];
    let names = &inputs.names;
    let m = names.len();

    // the analytic block does not depend on the seed; its file carries its own digest
    let neutral = EngineConfig {
        seed: 0,
        nmc: EngineConfig::default().nmc,
        ..cfg.clone()
    };
    let analytic_manifest = RunManifest::new("forecast-analytic", &neutral, &inputs.digest, names)
    .with("origin", origin)
    .with("alpha", alpha);
    let analytic_digest = analytic_manifest.digest();
    let manifest = RunManifest::new("forecast", cfg, &inputs.digest, names)
        .with("origin", origin)
        .with("alpha", alpha)
        .with("horizon", opts.horizon)
        .with("analytic_manifest", &analytic_digest);
    let digest = manifest.digest();
    manifest.write(out)?;

    let mom = engine.one_step_moments(replica)?;
    let precision = mom.precision.clone().expect("bma moments include the precision");
    let mut an = Artifact::create(
        out,
        "forecast_analytic.csv",
        &analytic_digest,
        &["quantity", "row", "col", "value"],
    )?;
    for i in 0..m {
        an.row(["f", &names[i], "", &num(mom.mean[i])])?;
    }
    for (label, mat) in [("Q", &mom.variance), ("K", &precision)] {
        for i in 0..m {
            for j in 0..m {
                an.row([label, &names[i], &names[j], &num(mat[(i, j)])])?;
            }
        }
    }
    an.finish()?;

    let seed = derive_seed(cfg.seed, engine.seen as u64, replica as u64);
    let paths = simulate_paths(&engine.simulation_input(replica), opts.horizon, cfg.nmc, seed, opts.exec)?;
    let mut mc = Artifact::create(
        out,
        "forecast_mc.csv",
        &digest,
        &["horizon", "quantity", "row", "col", "value"],
    )?;
    let mut iv = Artifact::create(
        out,
        "forecast_intervals.csv",
        &digest,
        &["horizon", "series", "q05", "median", "q95"],
    )?;
    for r in 1..=opts.horizon {
        let (mean, var) = paths.moments(r)?;
        let hr = r.to_string();
        for i in 0..m {
            mc.row([hr.as_str(), "f", &names[i], "", &num(mean[i])])?;
        }
        for i in 0..m {
            for j in 0..m {
                mc.row([hr.as_str(), "Q", &names[i], &names[j], &num(var[(i, j)])])?;
            }
        }
        for (i, name) in names.iter().enumerate() {
            iv.row([
                hr.clone(),
                name.clone(),
                num(paths.quantile(r, i, 0.05)),
                num(paths.quantile(r, i, 0.5)),
                num(paths.quantile(r, i, 0.95)),
            ])?;
        }
    }
    mc.finish()?;
    iv.finish()?;

    // 1-step self-check: MC against the analytic moments
    let n = paths.nmc as f64;
    let (mc_mean, mc_var) = paths.moments(1)?;
    let mut check = Artifact::create(
        out,
        "forecast_check.csv",
        &digest,
        &["series", "quantity", "analytic", "mc", "se", "z", "within_4se"],
    )?;
    let mut max_mean_z: f64 = 0.0;
    let mut max_var_z: f64 = 0.0;
    for i in 0..m {
        let se_mean = (mc_var[(i, i)] / n).sqrt();
        let z_mean = (mc_mean[i] - mom.mean[i]) / se_mean;
        let m4 = (0..paths.nmc).map(|p| (paths.get(p, 1, i) - mc_mean[i]).powi(4)).sum::<f64>() / n;
        let se_var = ((m4 - mc_var[(i, i)].powi(2)).max(0.0) / n).sqrt();
        let z_var = (mc_var[(i, i)] - mom.variance[(i, i)]) / se_var;
        max_mean_z = max_mean_z.max(z_mean.abs());
        max_var_z = max_var_z.max(z_var.abs());
        for (q, a, b, se, z) in [
            ("mean", mom.mean[i], mc_mean[i], se_mean, z_mean),
            ("variance", mom.variance[(i, i)], mc_var[(i, i)], se_var, z_var),
        ] {
            check.row([
                names[i].clone(),
                q.to_string(),
                num(a),
                num(b),
                num(se),
                num(z),
                (z.abs() <= 4.0).to_string(),
            ])?;
        }
    }
    check.finish()?;

    if opts.dump_paths {
        let path = out.join("paths.bin");
        let file = File::create(&path).map_err(|e| DdnmError::io(path.display().to_string(), e))?;
        paths.write_binary(BufWriter::new(file))?;
    }
    Ok(ForecastSummary {
        alpha,
        origin,
        analytic_mean: mom.mean,
        analytic_variance: mom.variance,
        paths,
        max_mean_z,
        max_var_z,
        manifest_digest: digest,
    })
}
