use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use blocksdn::config::{parse_config, preset, PRESET_NAMES};
use blocksdn::harness::{self, Report};
use blocksdn::{Error, ScenarioConfig};
use clap::{Parser, Subcommand};
use log::info;

/// Output root when `--out` is not given.
const OUT_ENV: &str = "BLOCKSDN_OUT";
const DEFAULT_OUT: &str = "out";

#[derive(Parser, Debug)]
#[command(name = "blocksdn", version, about = "Deterministic transaction-broadcast simulator")]
struct Cli {
    /// Output root; defaults to $BLOCKSDN_OUT, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_effective_config: bool,
    /// Override a config value, e.g. `--set seeds.count=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run every scheme of a scenario on every seed.
    Run { config: PathBuf },
    /// Re-run a scenario for each value of one config parameter.
    Sweep {
        config: PathBuf,
        /// Dotted config path, e.g. controller.d_near.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run a checked-in preset and write the comparison report.
    Compare {
        #[arg(long)]
        preset: String,
    },
    /// Parse and validate a scenario without running it.
    Validate { config: PathBuf },
}

enum Failure {
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::UnknownPreset(_) | Error::Adversary(_) => Failure::Config(e.into()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load(path: &Path, overrides: &[String]) -> Result<ScenarioConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let cfg = parse_config(&text).map_err(|e| Failure::Config(anyhow::Error::new(e).context(path.display().to_string())))?;
    apply(cfg, overrides)
}

fn apply(mut cfg: ScenarioConfig, overrides: &[String]) -> Result<ScenarioConfig, Failure> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(anyhow::anyhow!("override `{o}` is not PATH=VALUE")))?;
        cfg.set_path(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn scenario_dir(root: &Path, cfg: &ScenarioConfig) -> PathBuf {
    root.join(cfg.output_dir.as_deref().unwrap_or(&cfg.name))
}

fn report(dir: &Path, cfg: &ScenarioConfig, runs: &[blocksdn::RunMetrics]) -> Result<Report, Failure> {
    let r = harness::write_report(dir, cfg, runs)?;
    print!("{}", harness::summary_table(&r.rows));
    println!("wrote {} files to {}", r.files.len(), dir.display());
    Ok(r)
}

/// Returns the number of partial runs.
fn execute(cli: &Cli) -> Result<usize, Failure> {
    let cfg = match &cli.cmd {
        Cmd::Run { config } | Cmd::Sweep { config, .. } | Cmd::Validate { config } => load(config, &cli.overrides)?,
        Cmd::Compare { preset: name } => {
            let cfg = preset(name).map_err(|e| match e {
                Error::UnknownPreset(_) => Failure::Config(anyhow::anyhow!("{e}; known presets: {}", PRESET_NAMES.join(", "))),
                other => other.into(),
            })?;
            apply(cfg, &cli.overrides)?
        }
    };
    if cli.print_effective_config {
        print!("{}", cfg.to_toml());
        return Ok(0);
    }
    let root = out_root(cli);
    match &cli.cmd {
        Cmd::Validate { config } => {
            let runs = cfg.scheme.ids.len() * cfg.seeds.to_vec().len();
            println!("{}: ok ({} schemes x {} seeds = {runs} runs)", config.display(), cfg.scheme.ids.len(), cfg.seeds.to_vec().len());
            Ok(0)
        }
        Cmd::Run { .. } => {
            info!("running {} ({} schemes)", cfg.name, cfg.scheme.ids.len());
            let runs = harness::run_matrix(&cfg)?;
            Ok(report(&scenario_dir(&root, &cfg), &cfg, &runs)?.partial_runs)
        }
        Cmd::Sweep { axis, values, .. } => {
            info!("sweeping {axis} over {} values", values.len());
            let rows = harness::run_sweep(&cfg, axis, values)?;
            let dir = scenario_dir(&root, &cfg);
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            std::fs::write(dir.join("effective_config.toml"), cfg.to_toml()).map_err(Error::from)?;
            let file = dir.join(format!("sweep_{}.csv", axis.replace('.', "_")));
            std::fs::write(&file, harness::sweep_csv(&rows)).map_err(Error::from)?;
            println!("{:<12} {:>12} {:>12} {:>12}", "value", "median_ms", "p90_ms", "control_frac");
            let med = harness::sweep_curve(&rows, |r| r.median_ms);
            let p90 = harness::sweep_curve(&rows, |r| r.p90_ms);
            let ctl = harness::sweep_curve(&rows, |r| Some(r.control_frac));
            for (((v, m), (_, p)), (_, c)) in med.iter().zip(&p90).zip(&ctl) {
                println!("{v:<12} {m:>12.1} {p:>12.1} {c:>12.5}");
            }
            println!("wrote {}", file.display());
            Ok(rows.iter().filter(|r| r.partial).count())
        }
        Cmd::Compare { .. } => {
            let dir = scenario_dir(&root, &cfg);
            let runs = harness::run_matrix(&cfg)?;
            let mut partial = report(&dir, &cfg, &runs)?.partial_runs;
            if cfg.adversary.is_active() {
                let base_cfg = harness::attack_free(&cfg);
                let base = harness::run_matrix(&base_cfg)?;
                partial += report(&dir.join("attack_free"), &base_cfg, &base)?.partial_runs;
                let rows = harness::slowdowns(&base, &runs);
                std::fs::write(dir.join("slowdown.csv"), harness::slowdown_csv(&rows)).map_err(Error::from)?;
                for r in &rows {
                    if let Some(s) = r.slowdown {
                        println!("{:<22} slowdown under attack {:+.1}%", r.scheme.name(), 100.0 * s);
                    }
                }
            }
            Ok(partial)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        blocksdn::par::set_threads(cli.jobs);
    }
    match execute(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(p) => {
            eprintln!("warning: {p} run(s) left honest nodes uncovered; see the report");
            ExitCode::from(2)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
