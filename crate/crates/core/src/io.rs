//! Price panels, training/test splits and the engine configuration file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::dlm::DiscountPair;
use crate::error::{DdnmError, Result};
use crate::model_space::{discount_grid, ParentRestriction};

pub const BENCH_COLUMN: &str = "BENCH";
pub const CTA_COLUMN: &str = "CTA";

/// Longest run of consecutive missing business days `--ffill` will fill.
pub const MAX_FILL_GAP: usize = 3;

/// A validated daily price panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceFrame {
    pub dates: Vec<NaiveDate>,
    /// Investable series names in column order.
    pub names: Vec<String>,
    /// `prices[j][t]` for investable series `j`.
    pub prices: Vec<Vec<f64>>,
    /// Benchmark name and prices, modeled but never invested in.
    pub benchmark: Option<(String, Vec<f64>)>,
    /// Comparison index levels, carried through untouched.
    pub cta: Option<Vec<f64>>,
}

impl PriceFrame {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Names of the modeled series: investable series then the benchmark.
    pub fn modeled_names(&self) -> Vec<String> {
        let mut v = self.names.clone();
        if let Some((b, _)) = &self.benchmark {
            v.push(b.clone());
        }
        v
    }

    /// Prices of the modeled series, one vector per series.
    pub fn modeled_prices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.prices.iter().map(|p| p.as_slice()).collect();
        if let Some((_, b)) = &self.benchmark {
            v.push(b);
        }
        v
    }

    /// Keeps the named investable series in the given order.
    pub fn select(&self, order: &[String]) -> Result<PriceFrame> {
        let mut names = Vec::with_capacity(order.len());
        let mut prices = Vec::with_capacity(order.len());
        for name in order {
            let j = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| DdnmError::Config(format!("series '{name}' not found in the data")))?;
            names.push(name.clone());
            prices.push(self.prices[j].clone());
        }
        Ok(PriceFrame {
            dates: self.dates.clone(),
            names,
            prices,
            benchmark: self.benchmark.clone(),
            cta: self.cta.clone(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Forward-fill missing cells and missing business days, up to three in a row.
    pub ffill: bool,
    /// Column to treat as the benchmark; `BENCH` is recognized without it.
    pub benchmark: Option<String>,
}

pub fn load_prices(path: &Path, opts: &LoadOptions) -> Result<PriceFrame> {
    let text = std::fs::read_to_string(path).map_err(|e| DdnmError::io(path.display().to_string(), e))?;
    parse_prices(&text, opts)
}

/// Parses `date,NAME1,...,NAMEm[,BENCH][,CTA]` text.
pub fn parse_prices(text: &str, opts: &LoadOptions) -> Result<PriceFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DdnmError::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("date") {
        return Err(DdnmError::Data("header must be 'date' followed by at least one series".into()));
    }
    let cols = &header[1..];
    for (i, c) in cols.iter().enumerate() {
        if c.is_empty() {
            return Err(DdnmError::Data(format!("column {} has an empty name", i + 2)));
        }
        if cols[..i].contains(c) {
            return Err(DdnmError::Data(format!("duplicate column '{c}'")));
        }
    }
    let bench_name = opts.benchmark.clone().or_else(|| cols.iter().find(|c| *c == BENCH_COLUMN).cloned());
    if let Some(b) = &bench_name {
        if !cols.contains(b) {
            return Err(DdnmError::Config(format!("benchmark column '{b}' not in the data")));
        }
    }

    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut raw: Vec<Vec<Option<f64>>> = vec![Vec::new(); cols.len()];
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| DdnmError::Data(format!("row {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(DdnmError::Data(format!("row {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| DdnmError::Data(format!("row {line}: cannot parse date '{}' (expected YYYY-MM-DD)", &rec[0])))?;
        if let Some(&prev) = dates.last() {
            if date == prev {
                return Err(DdnmError::Data(format!("row {line}: duplicate date {date}")));
            }
            if date < prev {
                return Err(DdnmError::Data(format!("row {line}: date {date} precedes {prev}; dates must increase")));
            }
        }
        dates.push(date);
        for (c, name) in cols.iter().enumerate() {
            let cell = &rec[c + 1];
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| DdnmError::Data(format!("row {line}, column {name}: cannot parse '{cell}'")))?;
                if !v.is_finite() {
                    return Err(DdnmError::Data(format!("row {line}, column {name}: value is not finite")));
                }
                if name != CTA_COLUMN && v <= 0.0 {
                    return Err(DdnmError::Data(format!("row {line}, column {name}: price {v} must be positive")));
                }
                Some(v)
            };
            raw[c].push(v);
        }
    }
    if dates.is_empty() {
        return Err(DdnmError::Data("no data rows".into()));
    }

    let (dates, raw) = if opts.ffill { fill_gaps(dates, raw, cols)? } else { (dates, raw) };

    let mut names = Vec::new();
    let mut prices = Vec::new();
    let mut benchmark = None;
    let mut cta = None;
    for (c, name) in cols.iter().enumerate() {
        let mut vals = Vec::with_capacity(dates.len());
        for (t, v) in raw[c].iter().enumerate() {
            match v {
                Some(v) => vals.push(*v),
                None => {
                    return Err(DdnmError::Data(format!(
                        "column {name}: missing value on {} (use --ffill for short gaps)",
                        dates[t]
                    )))
                }
            }
        }
        if Some(name) == bench_name.as_ref() {
            benchmark = Some((name.clone(), vals));
        } else if name == CTA_COLUMN {
            cta = Some(vals);
        } else {
            names.push(name.clone());
            prices.push(vals);
        }
    }
    if names.is_empty() {
        return Err(DdnmError::Data("no investable series".into()));
    }
    Ok(PriceFrame {
        dates,
        names,
        prices,
        benchmark,
        cta,
    })
}

fn business_days_between(a: NaiveDate, b: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = a + Duration::days(1);
    while d < b {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

type Panel = (Vec<NaiveDate>, Vec<Vec<Option<f64>>>);

fn fill_gaps(dates: Vec<NaiveDate>, raw: Vec<Vec<Option<f64>>>, cols: &[String]) -> Result<Panel> {
    let mut out_dates = Vec::with_capacity(dates.len());
    let mut out: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(dates.len()); cols.len()];
    for t in 0..dates.len() {
        if t > 0 {
            let missing = business_days_between(dates[t - 1], dates[t]);
            if missing.len() > MAX_FILL_GAP {
                return Err(DdnmError::Data(format!(
                    "{} missing business days between {} and {}; at most {MAX_FILL_GAP} can be filled",
                    missing.len(),
                    dates[t - 1],
                    dates[t]
                )));
            }
            for d in missing {
                out_dates.push(d);
                for col in out.iter_mut() {
                    col.push(None);
                }
            }
        }
        out_dates.push(dates[t]);
        for (c, col) in out.iter_mut().enumerate() {
            col.push(raw[c][t]);
        }
    }
    for (c, col) in out.iter_mut().enumerate() {
        let mut run = 0;
        let mut last: Option<f64> = None;
        for t in 0..col.len() {
            match col[t] {
                Some(v) => {
                    last = Some(v);
                    run = 0;
                }
                None => {
                    run += 1;
                    let prev = last.ok_or_else(|| {
                        DdnmError::Data(format!("column {}: no earlier value to fill {}", cols[c], out_dates[t]))
                    })?;
                    if run > MAX_FILL_GAP {
                        return Err(DdnmError::Data(format!(
                            "column {}: gap longer than {MAX_FILL_GAP} days ending {}",
                            cols[c], out_dates[t]
                        )));
                    }
                    col[t] = Some(prev);
                }
            }
        }
    }
    Ok((out_dates, out))
}

/// Natural log of every modeled series, one vector per series.
pub fn to_log_prices(frame: &PriceFrame) -> Vec<Vec<f64>> {
    frame.modeled_prices().iter().map(|p| p.iter().map(|v| v.ln()).collect()).collect()
}

/// Index ranges of dates on or before `split_date` and after it.
pub fn split(frame: &PriceFrame, split_date: NaiveDate) -> Result<(Range<usize>, Range<usize>)> {
    let u = frame.dates.partition_point(|d| *d <= split_date);
    if u == 0 {
        return Err(DdnmError::Config(format!("split date {split_date} leaves no training data")));
    }
    if u == frame.len() {
        return Err(DdnmError::Config(format!("split date {split_date} leaves no test data")));
    }
    Ok((0..u, u..frame.len()))
}

/// Engine hyper-parameters and run controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Maximum own lag.
    pub d: usize,
    /// Prior parent inclusion probability.
    pub rho: f64,
    /// Pruning threshold applied after training.
    pub th: f64,
    pub nmc: usize,
    pub target_daily: f64,
    pub target_5day: f64,
    pub split_date: Option<NaiveDate>,
    pub seed: u64,
    pub c0: f64,
    pub n0: f64,
    pub s0_floor: f64,
    pub max_parents: Option<usize>,
    /// Explicit candidate parental sets by series name.
    pub parents: BTreeMap<String, Vec<Vec<String>>>,
    pub benchmark: Option<String>,
    /// Investable series to model, in model order; all columns when empty.
    pub series: Vec<String>,
    /// Models per series listed in the probability trajectories.
    pub top_models: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            delta: grid(0.975, 0.005, 0.995).unwrap(),
            beta: grid(0.975, 0.005, 0.995).unwrap(),
            alpha: grid(0.95, 0.005, 1.0).unwrap(),
            d: 2,
            rho: 0.3,
            th: 0.001,
            nmc: 10_000,
            target_daily: 0.001,
            target_5day: 0.005,
            split_date: None,
            seed: 0,
            c0: 1.0,
            n0: 5.0,
            s0_floor: 1e-4,
            max_parents: None,
            parents: BTreeMap::new(),
            benchmark: None,
            series: Vec::new(),
            top_models: 5,
        }
    }
}

/// `a:s:b` grid: a, a+s, ... up to b (with 1e-9 slack on the count), each
/// value rounded to 12 decimals.
pub fn grid(a: f64, s: f64, b: f64) -> Result<Vec<f64>> {
    if !(s > 0.0) || b < a || !a.is_finite() || !b.is_finite() {
        return Err(DdnmError::Config(format!("invalid grid {a}:{s}:{b}")));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize + 1;
    if n > 100_000 {
        return Err(DdnmError::Config(format!("grid {a}:{s}:{b} has too many points")));
    }
    Ok((0..n).map(|i| round12(a + i as f64 * s)).collect())
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Grid value: `a:s:b` or a comma list.
pub fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>> {
    let bad = || DdnmError::Config(format!("{key}: cannot parse grid '{value}'"));
    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
    match parts.len() {
        1 => value
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect(),
        3 => {
            let nums: Vec<f64> = parts.iter().map(|p| p.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
            grid(nums[0], nums[1], nums[2]).map_err(|e| DdnmError::Config(format!("{key}: {e}")))
        }
        _ => Err(bad()),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DdnmError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_names(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// `{};{A};{A,B}` candidate parental sets.
fn parse_parent_sets(key: &str, value: &str) -> Result<Vec<Vec<String>>> {
    value
        .split(';')
        .map(|s| {
            let s = s.trim();
            let inner = s
                .strip_prefix('{')
                .and_then(|s| s.strip_suffix('}'))
                .ok_or_else(|| DdnmError::Config(format!("{key}: parent set '{s}' must be written {{A,B}}")))?;
            Ok(parse_names(inner))
        })
        .collect()
}

/// ISO `YYYY-MM-DD` date.
pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| DdnmError::Config(format!("cannot parse date '{s}' (expected YYYY-MM-DD)")))
}

pub fn parse_config(path: &Path) -> Result<EngineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DdnmError::io(path.display().to_string(), e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<EngineConfig> {
    let mut cfg = EngineConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DdnmError::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(DdnmError::Config(format!("line {}: duplicate key '{key}'", i + 1)));
        }
        match key {
            "delta" => cfg.delta = parse_grid(key, value)?,
            "beta" => cfg.beta = parse_grid(key, value)?,
            "alpha" => cfg.alpha = parse_grid(key, value)?,
            "d" => cfg.d = parse_num(key, value)?,
            "rho" => cfg.rho = parse_num(key, value)?,
            "th" => cfg.th = parse_num(key, value)?,
            "nmc" => cfg.nmc = parse_num(key, value)?,
            "target_daily" => cfg.target_daily = parse_num(key, value)?,
            "target_5day" => cfg.target_5day = parse_num(key, value)?,
            "split_date" => cfg.split_date = Some(parse_date(value)?),
            "seed" => cfg.seed = parse_num(key, value)?,
            "c0" => cfg.c0 = parse_num(key, value)?,
            "n0" => cfg.n0 = parse_num(key, value)?,
            "s0_floor" => cfg.s0_floor = parse_num(key, value)?,
            "max_parents" => cfg.max_parents = Some(parse_num(key, value)?),
            "benchmark" => cfg.benchmark = Some(value.to_string()),
            "series" => cfg.series = parse_names(value),
            "top_models" => cfg.top_models = parse_num(key, value)?,
            _ => match key.strip_prefix("parents.") {
                Some(name) if !name.is_empty() => {
                    cfg.parents.insert(name.to_string(), parse_parent_sets(key, value)?);
                }
                _ => return Err(DdnmError::Config(format!("line {}: unknown key '{key}'", i + 1))),
            },
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, g) in [("delta", &self.delta), ("beta", &self.beta), ("alpha", &self.alpha)] {
            if g.is_empty() {
                return Err(DdnmError::Config(format!("{key}: grid is empty")));
            }
            if let Some(v) = g.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                return Err(DdnmError::Config(format!("{key}: value {v} outside (0, 1]")));
            }
        }
        let checks: [(&str, bool, &str); 7] = [
            ("rho", self.rho > 0.0 && self.rho < 1.0, "must lie in (0, 1)"),
            ("th", self.th >= 0.0 && self.th < 1.0, "must lie in [0, 1)"),
            ("nmc", self.nmc >= 2, "must be at least 2"),
            ("c0", self.c0 > 0.0 && self.c0.is_finite(), "must be positive"),
            ("n0", self.n0 > 0.0 && self.n0.is_finite(), "must be positive"),
            ("s0_floor", self.s0_floor > 0.0 && self.s0_floor.is_finite(), "must be positive"),
            ("top_models", self.top_models >= 1, "must be at least 1"),
        ];
        for (key, ok, bound) in checks {
            if !ok {
                return Err(DdnmError::Config(format!("{key} {bound}")));
            }
        }
        Ok(())
    }

    pub fn discount_grid(&self) -> Result<Vec<DiscountPair>> {
        discount_grid(&self.delta, &self.beta)
    }

    /// Target return for a rebalancing horizon of `h` days.
    pub fn target(&self, h: usize) -> f64 {
        match h {
            5 => self.target_5day,
            _ => self.target_daily * h as f64,
        }
    }

    /// Resolves named parental restrictions against the modeled series order.
    pub fn restriction(&self, names: &[String]) -> Result<ParentRestriction> {
        let mut candidates = vec![None; names.len()];
        for (child, sets) in &self.parents {
            let j = names
                .iter()
                .position(|n| n == child)
                .ok_or_else(|| DdnmError::Config(format!("parents.{child}: unknown series")))?;
            let mut resolved = Vec::with_capacity(sets.len());
            for set in sets {
                let mut idx = Vec::with_capacity(set.len());
                for p in set {
                    let h = names
                        .iter()
                        .position(|n| n == p)
                        .ok_or_else(|| DdnmError::Config(format!("parents.{child}: unknown series '{p}'")))?;
                    idx.push(h);
                }
                resolved.push(idx);
            }
            candidates[j] = Some(resolved);
        }
        Ok(ParentRestriction {
            max_parents: self.max_parents,
            candidates,
        })
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_config_string(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "delta = {}", list(&self.delta));
        let _ = writeln!(s, "beta = {}", list(&self.beta));
        let _ = writeln!(s, "alpha = {}", list(&self.alpha));
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "th = {}", self.th);
        let _ = writeln!(s, "nmc = {}", self.nmc);
        let _ = writeln!(s, "target_daily = {}", self.target_daily);
        let _ = writeln!(s, "target_5day = {}", self.target_5day);
        if let Some(d) = self.split_date {
            let _ = writeln!(s, "split_date = {d}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "c0 = {}", self.c0);
        let _ = writeln!(s, "n0 = {}", self.n0);
        let _ = writeln!(s, "s0_floor = {}", self.s0_floor);
        if let Some(p) = self.max_parents {
            let _ = writeln!(s, "max_parents = {p}");
        }
        for (child, sets) in &self.parents {
            let body: Vec<String> = sets.iter().map(|set| format!("{{{}}}", set.join(","))).collect();
            let _ = writeln!(s, "parents.{child} = {}", body.join(";"));
        }
        if let Some(b) = &self.benchmark {
            let _ = writeln!(s, "benchmark = {b}");
        }
        if !self.series.is_empty() {
            let _ = writeln!(s, "series = {}", self.series.join(","));
        }
        let _ = writeln!(s, "top_models = {}", self.top_models);
        s
    }
}
