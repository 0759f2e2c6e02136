//! `crpred`: simulate event logs, run longitudinal backtests and sweeps,
//! and format reports.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crpred::backtest::{
    condition_study, run_backtest, sweep_alpha, sweep_half_life, write_report_csv,
    write_sweep_csv, write_sweep_plot_csv, BacktestConfig, BacktestReport, SweepCurve,
};
use crpred::events::{parse_event_log, write_tsv, EventLog, LogSidecar};
use crpred::models::{train_model, ModelDescriptor, write_model};
use crpred::synthgen::{generate_log, table1_preset, SimConfig};
use crpred::variation::{nvi_series, write_nvi_csv, NviConfig};

mod summarize;

#[derive(Parser)]
#[command(name = "crpred", version, about = "Demand-shift-robust conversion rate prediction")]
struct Cli {
    /// Override the seed in the loaded configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v: info, -vv: debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log (TSV + JSON sidecar).
    Simulate {
        /// SimConfig JSON; defaults to the built-in five-advertiser preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Longitudinal backtest: train daily, score daily, aggregate metrics.
    Backtest {
        #[arg(long)]
        log: PathBuf,
        /// BacktestConfig JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-day model artifacts into this directory.
        #[arg(long)]
        models_dir: Option<PathBuf>,
    },
    /// TDWM uplift as a function of the decay half-life.
    SweepHalfLife {
        #[arg(long)]
        log: PathBuf,
        /// JSON: {"backtest": BacktestConfig, "half_lives": [..]}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also emit a long-format CSV next to --out for plotting.
        #[arg(long)]
        plot_data: bool,
    },
    /// MLTSTM uplift as a function of the mixing factor alpha.
    SweepAlpha {
        #[arg(long)]
        log: PathBuf,
        /// JSON: {"backtest": BacktestConfig, "alphas": [..]}.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot_data: bool,
    },
    /// Per-advertiser uplift across extreme / average / moderate periods.
    ConditionStudy {
        #[arg(long)]
        log: PathBuf,
        /// BacktestConfig JSON with per_advertiser = true.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also emit (advertiser, extremeness, model, uplift) rows for plotting.
        #[arg(long)]
        plot_data: bool,
    },
    /// Export the NVI time series for one or all advertisers.
    Nvi {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        advertiser: Option<String>,
        /// NviConfig JSON; defaults to 7/30-day windows and printed boundaries.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a report CSV with percent formatting.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("crpred: could not size the worker pool: {e}");
            std::process::exit(1);
        }
    }

    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("crpred: {e}");
            exit_code(&e)
        }
    });
}

fn exit_code(e: &crpred::Error) -> i32 {
    match e {
        crpred::Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Everything a run needs to be reproduced, written next to each output.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    /// SHA-256 of the resolved configuration JSON.
    config_sha256: String,
    seed_override: Option<u64>,
    inputs: Vec<FileStamp>,
    outputs: Vec<FileStamp>,
    wall_time_ms: u128,
}

#[derive(Serialize)]
struct FileStamp {
    path: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn stamp(path: &Path) -> crpred::Result<FileStamp> {
    let bytes = fs::read(path)?;
    Ok(FileStamp { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

/// Writes via a temp file in the target directory plus an atomic rename, so
/// interrupted runs never leave truncated outputs.
fn write_atomic(path: &Path, bytes: &[u8]) -> crpred::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| crpred::Error::Io(e.error))?;
    Ok(())
}

struct ManifestBuilder {
    subcommand: String,
    config_sha256: String,
    seed_override: Option<u64>,
    inputs: Vec<FileStamp>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    fn new(subcommand: &str, config_json: &[u8], seed_override: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config_sha256: sha256_hex(config_json),
            seed_override,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) -> crpred::Result<()> {
        self.inputs.push(stamp(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Stamps every output and writes `<primary>.manifest.json`.
    fn finish(self, primary: &Path) -> crpred::Result<()> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| stamp(p))
            .collect::<crpred::Result<Vec<_>>>()?;
        let manifest = RunManifest {
            tool: "crpred",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            config_sha256: self.config_sha256,
            seed_override: self.seed_override,
            inputs: self.inputs,
            outputs,
            wall_time_ms: self.started.elapsed().as_millis(),
        };
        let mut manifest_path = primary.as_os_str().to_owned();
        manifest_path.push(".manifest.json");
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(Path::new(&manifest_path), &json)
    }
}

fn load_log(path: &Path) -> crpred::Result<EventLog> {
    let file = fs::File::open(path)?;
    parse_event_log(BufReader::new(file), None)
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> crpred::Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Deserialize, Serialize)]
struct HalfLifeSweepConfig {
    backtest: BacktestConfig,
    half_lives: Vec<f64>,
}

#[derive(Deserialize, Serialize)]
struct AlphaSweepConfig {
    backtest: BacktestConfig,
    alphas: Vec<f64>,
}

fn override_backtest_seed(config: &mut BacktestConfig, seed: Option<u64>) {
    if let Some(seed) = seed {
        for named in &mut config.model_specs {
            named.spec.optim.seed = seed;
        }
    }
}

fn run(cli: Cli) -> crpred::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let mut sim: SimConfig = match &config {
                Some(path) => load_json(path)?,
                None => table1_preset(),
            };
            if let Some(seed) = cli.seed {
                sim.seed = seed;
            }
            let resolved = serde_json::to_vec(&sim)?;
            let mut manifest = ManifestBuilder::new("simulate", &resolved, cli.seed);
            if let Some(path) = &config {
                manifest.input(path)?;
            }

            let log = generate_log(&sim)?;
            let mut tsv = Vec::new();
            write_tsv(&log, &mut tsv)?;
            write_atomic(&out, &tsv)?;
            manifest.output(&out);

            let sidecar_path = out.with_extension("meta.json");
            let sidecar = serde_json::to_vec_pretty(&LogSidecar::for_log(&log))?;
            write_atomic(&sidecar_path, &sidecar)?;
            manifest.output(&sidecar_path);

            manifest.finish(&out)?;
            eprintln!(
                "simulated {} events across {} advertisers -> {}",
                log.len(),
                sim.profiles.len(),
                out.display()
            );
            Ok(())
        }

        Command::Backtest { log: log_path, config, out, models_dir } => {
            let mut bt: BacktestConfig = load_json(&config)?;
            override_backtest_seed(&mut bt, cli.seed);
            let resolved = serde_json::to_vec(&bt)?;
            let mut manifest = ManifestBuilder::new("backtest", &resolved, cli.seed);
            manifest.input(&config)?;
            manifest.input(&log_path)?;
            let log = load_log(&log_path)?;

            if let Some(dir) = &models_dir {
                write_model_artifacts(&log, &bt, dir, &mut manifest)?;
            }

            let report = run_backtest(&log, &bt)?;
            let mut csv = Vec::new();
            write_report_csv(&report, &mut csv)?;
            write_atomic(&out, &csv)?;
            manifest.output(&out);
            manifest.finish(&out)?;
            eprintln!(
                "backtest over days {}..={}: {} rows, {} trainings, {} skipped days -> {}",
                bt.test_days.0,
                bt.test_days.1,
                report.rows.len(),
                report.trainings_run,
                report.skipped_days.len(),
                out.display()
            );
            Ok(())
        }

        Command::SweepHalfLife { log: log_path, config, out, plot_data } => {
            let mut cfg: HalfLifeSweepConfig = load_json(&config)?;
            override_backtest_seed(&mut cfg.backtest, cli.seed);
            let resolved = serde_json::to_vec(&cfg)?;
            let mut manifest = ManifestBuilder::new("sweep-half-life", &resolved, cli.seed);
            manifest.input(&config)?;
            manifest.input(&log_path)?;
            let log = load_log(&log_path)?;
            let curve = sweep_half_life(&log, &cfg.backtest, &cfg.half_lives)?;
            write_curve(&curve, &out, plot_data, &mut manifest)?;
            manifest.finish(&out)?;
            print_curve("half-life", &curve);
            Ok(())
        }

        Command::SweepAlpha { log: log_path, config, out, plot_data } => {
            let mut cfg: AlphaSweepConfig = load_json(&config)?;
            override_backtest_seed(&mut cfg.backtest, cli.seed);
            let resolved = serde_json::to_vec(&cfg)?;
            let mut manifest = ManifestBuilder::new("sweep-alpha", &resolved, cli.seed);
            manifest.input(&config)?;
            manifest.input(&log_path)?;
            let log = load_log(&log_path)?;
            let curve = sweep_alpha(&log, &cfg.backtest, &cfg.alphas)?;
            write_curve(&curve, &out, plot_data, &mut manifest)?;
            manifest.finish(&out)?;
            print_curve("alpha", &curve);
            Ok(())
        }

        Command::ConditionStudy { log: log_path, config, out, plot_data } => {
            let mut bt: BacktestConfig = load_json(&config)?;
            override_backtest_seed(&mut bt, cli.seed);
            let resolved = serde_json::to_vec(&bt)?;
            let mut manifest = ManifestBuilder::new("condition-study", &resolved, cli.seed);
            manifest.input(&config)?;
            manifest.input(&log_path)?;
            let log = load_log(&log_path)?;
            let report = condition_study(&log, &bt)?;
            let mut csv = Vec::new();
            write_report_csv(&report, &mut csv)?;
            write_atomic(&out, &csv)?;
            manifest.output(&out);
            if plot_data {
                let plot_path = plot_path_for(&out);
                let mut plot = Vec::new();
                write_condition_plot_csv(&report, &mut plot)?;
                write_atomic(&plot_path, &plot)?;
                manifest.output(&plot_path);
            }
            manifest.finish(&out)?;
            for (adv, level) in &report.missing_cells {
                eprintln!("note: advertiser {adv} has no {level} period; cell unavailable");
            }
            eprintln!(
                "condition study: {} rows, {} trainings -> {}",
                report.rows.len(),
                report.trainings_run,
                out.display()
            );
            Ok(())
        }

        Command::Nvi { log: log_path, advertiser, config, out } => {
            let nvi_cfg: NviConfig = match &config {
                Some(path) => load_json(path)?,
                None => NviConfig::default(),
            };
            nvi_cfg.validate()?;
            let resolved = serde_json::to_vec(&nvi_cfg)?;
            let mut manifest = ManifestBuilder::new("nvi", &resolved, cli.seed);
            if let Some(path) = &config {
                manifest.input(path)?;
            }
            manifest.input(&log_path)?;
            let log = load_log(&log_path)?;
            let stats = crpred::events::daily_advertiser_stats(&log);
            let points = nvi_series(&stats, advertiser.as_deref(), &nvi_cfg);
            if let Some(adv) = &advertiser {
                if points.is_empty() {
                    return Err(crpred::Error::InsufficientData(format!(
                        "no evaluable NVI days for advertiser '{adv}'"
                    )));
                }
            }
            let mut csv = Vec::new();
            write_nvi_csv(&points, &mut csv)?;
            write_atomic(&out, &csv)?;
            manifest.output(&out);
            manifest.finish(&out)?;
            eprintln!("{} NVI points -> {}", points.len(), out.display());
            Ok(())
        }

        Command::Report { report, out } => {
            let text = summarize::summarize_report(&fs::read_to_string(&report)?)?;
            match out {
                Some(path) => write_atomic(&path, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn plot_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".plot.csv");
    PathBuf::from(s)
}

fn write_curve(
    curve: &SweepCurve,
    out: &Path,
    plot_data: bool,
    manifest: &mut ManifestBuilder,
) -> crpred::Result<()> {
    let mut csv = Vec::new();
    write_sweep_csv(curve, &mut csv)?;
    write_atomic(out, &csv)?;
    manifest.output(out);
    if plot_data {
        let plot_path = plot_path_for(out);
        let mut plot = Vec::new();
        write_sweep_plot_csv(curve, &mut plot)?;
        write_atomic(&plot_path, &plot)?;
        manifest.output(&plot_path);
    }
    Ok(())
}

fn print_curve(param_name: &str, curve: &SweepCurve) {
    for p in &curve.points {
        match p.mean_uplift {
            Some(u) => eprintln!("{param_name} {:>10}: mean uplift {:+.3}%", p.param, u * 100.0),
            None => eprintln!("{param_name} {:>10}: undefined", p.param),
        }
    }
}

/// Per-day artifacts: `<dir>/<model>_day<d>.crmd` plus a JSON descriptor.
fn write_model_artifacts(
    log: &EventLog,
    config: &BacktestConfig,
    dir: &Path,
    manifest: &mut ManifestBuilder,
) -> crpred::Result<()> {
    fs::create_dir_all(dir)?;
    for day in config.test_days.0..=config.test_days.1 {
        if log.day_events(day).is_empty() {
            continue;
        }
        for named in &config.model_specs {
            let model = train_model(log, &named.spec, day)?;
            let mut bytes = Vec::new();
            write_model(&model, &mut bytes)?;
            let path = dir.join(format!("{}_day{day}.crmd", named.name));
            write_atomic(&path, &bytes)?;
            manifest.output(&path);

            let descriptor = ModelDescriptor::for_model(&model);
            let descriptor_path = dir.join(format!("{}_day{day}.json", named.name));
            write_atomic(&descriptor_path, &serde_json::to_vec_pretty(&descriptor)?)?;
            manifest.output(&descriptor_path);
        }
    }
    Ok(())
}

/// Fig. 5 analogue: one row per (advertiser, model) with extremeness and uplift.
fn write_condition_plot_csv<W: Write>(
    report: &BacktestReport,
    mut out: W,
) -> crpred::Result<()> {
    writeln!(out, "advertiser,level,extremeness,model,uplift")?;
    for r in &report.rows {
        let (Some(v), Some(level)) = (r.nvi, r.level) else { continue };
        let Some(uplift) = r.llhn_uplift else { continue };
        writeln!(
            out,
            "{},{},{},{},{}",
            r.scope,
            level,
            (1.0 - v).abs(),
            r.model,
            uplift
        )?;
    }
    Ok(())
}
