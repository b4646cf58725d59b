use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddnm::engine::Engine;
use ddnm::io::{parse_config, parse_date, parse_grid, EngineConfig};
use ddnm::par::execution_for_threads;
use ddnm::pipeline::{
    cmd_backtest, cmd_enumerate, cmd_fit, cmd_forecast, load_inputs, BacktestOptions, FitOptions,
    ForecastOptions, STATE_FILE,
};
use ddnm::portfolio::Rule;
use ddnm::synthetic::{price_csv, SyntheticSpec};
use ddnm::{DdnmError, Result};

/// Dynamic dependence network models: sequential model averaging,
/// multi-step forecasting and portfolio backtests on daily price panels.
#[derive(Parser)]
#[command(name = "ddnm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count the candidate models implied by a configuration.
    Enumerate(EnumerateArgs),
    /// Filter the training period, prune, and save the model state.
    Fit(FitArgs),
    /// Run the test period with rebalancing and write performance artifacts.
    Backtest(BacktestArgs),
    /// Write analytic and simulated forecasts from a saved state.
    Forecast(ForecastArgs),
    /// Fit then backtest in one go.
    Run(BacktestArgs),
    /// Write a synthetic price panel drawn from a random sparse network.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of series.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Number of business days.
    #[arg(long, default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Discount for the stochastic volatility; constant volatility when omitted.
    #[arg(long)]
    beta: Option<f64>,
    /// First date.
    #[arg(long, default_value = "2010-01-04")]
    start: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the α grid, as `a:s:b` or a comma list.
    #[arg(long = "alpha-grid")]
    alpha_grid: Option<String>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long)]
    threads: Option<usize>,
    /// Also write wall-clock timings (timings.json).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Price panel: `date,NAME1,...,NAMEm[,BENCH][,CTA]`.
    #[arg(long)]
    data: PathBuf,
    /// Forward-fill gaps of up to three business days.
    #[arg(long)]
    ffill: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnumerateArgs {
    #[command(flatten)]
    common: Common,
    /// Take the series from this price file's header.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated series names (when no data file is given).
    #[arg(long)]
    series: Option<String>,
    #[arg(long)]
    ffill: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Stop after this date (YYYY-MM-DD) and save an unpruned state.
    #[arg(long = "stop-after")]
    stop_after: Option<String>,
    /// Resume from a saved unpruned state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct BacktestArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Fitted state; defaults to state.bin in the output directory.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Rebalancing horizon in trading days.
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    /// target, constrained, neutral or all.
    #[arg(long, default_value = "all")]
    rule: String,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    state: Option<PathBuf>,
    /// Forecast horizon.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Forecast under this α instead of the most probable one.
    #[arg(long)]
    alpha: Option<f64>,
    /// Dump the simulated paths to paths.bin.
    #[arg(long)]
    paths: bool,
}

fn load_config(common: &Common) -> Result<EngineConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => EngineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = &common.alpha_grid {
        cfg.alpha = parse_grid("alpha-grid", g)?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn parse_rules(s: &str) -> Result<Vec<Rule>> {
    if s == "all" {
        return Ok(Rule::ALL.to_vec());
    }
    s.split(',').map(|r| r.trim().parse()).collect()
}

fn state_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join(STATE_FILE))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Enumerate(a) => {
            let cfg = load_config(&a.common)?;
            let names: Vec<String> = match (&a.data, &a.series) {
                (Some(p), _) => load_inputs(p, &cfg, a.ffill)?.names,
                (None, Some(s)) => s.split(',').map(|x| x.trim().to_string()).collect(),
                (None, None) => cfg.series.clone(),
            };
            let report = cmd_enumerate(&cfg, &names)?;
            print!("{}", report.render());
        }
        Command::Fit(a) => {
            let cfg = load_config(&a.common)?;
            let exec = execution_for_threads(a.common.threads);
            let inputs = load_inputs(&a.data.data, &cfg, a.data.ffill)?;
            let resume = a.resume.as_deref().map(Engine::load).transpose()?;
            let stop_after = a.stop_after.as_deref().map(parse_date).transpose()?;
            let s = cmd_fit(
                &inputs,
                &cfg,
                &a.data.out,
                FitOptions {
                    stop_after,
                    resume,
                    exec,
                    timings: a.common.timings,
                },
            )?;
            println!(
                "fitted {} dates ({} filtered); models per series after {}: {:?}",
                s.dates_processed,
                s.filtered,
                if s.pruned { "pruning" } else { "this segment" },
                s.engine.model_counts()
            );
            println!("manifest {}", s.manifest_digest);
        }
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                beta: a.beta,
                ..SyntheticSpec::sparse(a.m, a.t, a.seed)
            };
            let rows = spec.simulate()?;
            let names: Vec<String> = (1..=a.m).map(|j| format!("S{j}")).collect();
            let text = price_csv(&rows, &names, parse_date(&a.start)?);
            std::fs::write(&a.out, text).map_err(|e| DdnmError::io(a.out.display().to_string(), e))?;
            for (j, pa) in spec.parents.iter().enumerate() {
                let list: Vec<String> = pa.iter().map(|(h, g)| format!("{} ({g:.3})", names[*h])).collect();
                println!("{}: parents [{}]", names[j], list.join(", "));
            }
        }
        Command::Backtest(a) => backtest(a, false)?,
        Command::Run(a) => backtest(a, true)?,
        Command::Forecast(a) => {
            let cfg = load_config(&a.common)?;
            let exec = execution_for_threads(a.common.threads);
            let inputs = load_inputs(&a.data.data, &cfg, a.data.ffill)?;
            let engine = Engine::load(&state_path(&a.state, &a.data.out))?;
            let replica = match a.alpha {
                Some(al) => Some(
                    engine
                        .replicas
                        .iter()
                        .position(|r| (r.alpha - al).abs() < 1e-12)
                        .ok_or_else(|| DdnmError::Config(format!("alpha {al} is not in the fitted grid")))?,
                ),
                None => None,
            };
            let s = cmd_forecast(
                &inputs,
                &cfg,
                engine,
                &a.data.out,
                &ForecastOptions {
                    horizon: a.k,
                    replica,
                    dump_paths: a.paths,
                    exec,
                },
            )?;
            println!(
                "forecast from {} under alpha = {}; 1-step MC check max |z|: mean {:.2}, variance {:.2}",
                s.origin, s.alpha, s.max_mean_z, s.max_var_z
            );
        }
    }
    Ok(())
}

fn backtest(a: BacktestArgs, fit_first: bool) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let exec = execution_for_threads(a.common.threads);
    let inputs = load_inputs(&a.data.data, &cfg, a.data.ffill)?;
    let engine = if fit_first {
        let fit_dir = a.data.out.join("fit");
        cmd_fit(
            &inputs,
            &cfg,
            &fit_dir,
            FitOptions {
                exec,
                timings: a.common.timings,
                ..FitOptions::default()
            },
        )?
        .engine
    } else {
        Engine::load(&state_path(&a.state, &a.data.out))?
    };
    let out = if fit_first { a.data.out.join("backtest") } else { a.data.out.clone() };
    let s = cmd_backtest(
        &inputs,
        &cfg,
        engine,
        &out,
        &BacktestOptions {
            horizon: a.horizon,
            rules: parse_rules(&a.rule)?,
            exec,
            timings: a.common.timings,
        },
    )?;
    println!("{} rebalances at horizon {}", s.rebalances, a.horizon);
    print!("{}", s.render());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
