//! Command-line surface: dataset generation, NWIS retrieval, training,
//! discovery, forecasting, evaluation, and the full pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hydrodag::data::{atomic_write, write_dataset, write_truth};
use hydrodag::error::Error;
use hydrodag::forecast::{ForcingConditioning, WindowConfig};
use hydrodag::nwis::{fetch_nwis, NwisConfig};
use hydrodag::pipeline::{
    discover, evaluate_forecast_csv, export_graphs, forecast_test_windows, prepare, run_experiment,
    FileConfig, PipelineConfig,
};
use hydrodag::scm::{generate_dataset, ForcingGraphSpec, GeneratorConfig, MaskKind, Topology};
use hydrodag::train::{checkpoint, restore, train};

#[derive(Parser)]
#[command(name = "hydrodag", version, about = "Causal graph discovery and streamflow forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOverrides {
    /// Flat key-value config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregation threshold for graph binarization.
    #[arg(long)]
    tau: Option<f64>,
    /// Separate threshold for the routing graph.
    #[arg(long)]
    tau_routing: Option<f64>,
    /// Window preset: short (7/1), medium (14/3), long (28/7).
    #[arg(long)]
    window: Option<String>,
    /// Ablation variant: full, no_causal_losses, no_forcing_vae,
    /// shared_runoff, local_runoff.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (with hidden ground truth).
    Generate {
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        stations: usize,
        #[arg(long, default_value_t = 4)]
        forcings: usize,
        #[arg(long, default_value_t = 5000)]
        timesteps: usize,
        #[arg(long, default_value_t = 1)]
        max_lag: usize,
        #[arg(long, default_value = "line")]
        topology: String,
        #[arg(long, default_value = "reachable")]
        mask: String,
        #[arg(long, default_value = "laplace")]
        noise_family: String,
        #[arg(long, default_value_t = 0.1)]
        noise_scale: f64,
        #[arg(long)]
        noise_scale_streamflow: Option<f64>,
        #[arg(long, default_value_t = false)]
        heterogeneous_runoff: bool,
        #[arg(long, default_value_t = false)]
        instantaneous_routing: bool,
        /// Random forcing DAG with this many edges instead of a chain.
        #[arg(long)]
        forcing_edges: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fetch daily discharge from the NWIS daily-values service.
    FetchNwis {
        /// Comma-separated site identifiers.
        #[arg(long, value_delimiter = ',')]
        sites: Vec<String>,
        #[arg(long)]
        start: String,
        #[arg(long)]
        end: String,
        #[arg(long, default_value = "streamflow.csv")]
        out: PathBuf,
        /// Endpoint override (also HYDRODAG_NWIS_URL).
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Export discovered graphs from a checkpoint.
    Discover {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also emit DOT files.
        #[arg(long, default_value_t = false)]
        dot: bool,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Forecast the test windows from a checkpoint.
    Forecast {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// past_only or forecast_forcings.
        #[arg(long, default_value = "past_only")]
        conditioning: String,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Evaluate a forecasts CSV against observations.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Full pipeline: generate/load, train, discover, forecast, evaluate.
    Run {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
}

fn parse_conditioning(s: &str) -> Result<ForcingConditioning, Error> {
    match s {
        "past_only" | "past-only" => Ok(ForcingConditioning::PastOnly),
        "forecast_forcings" | "forecast-forcings" => Ok(ForcingConditioning::ForecastForcings),
        other => Err(Error::Argument(format!("unknown conditioning '{other}'"))),
    }
}

fn apply_common(cfg: &mut PipelineConfig, common: &CommonOverrides) -> Result<(), Error> {
    if let Some(path) = &common.config {
        FileConfig::load(path)?.apply(cfg)?;
    }
    if let Some(s) = common.seed {
        cfg.training.seed = s;
        if let Some(g) = cfg.generator.as_mut() {
            g.seed = s;
        }
    }
    if let Some(t) = common.tau {
        cfg.tau = t;
    }
    if common.tau_routing.is_some() {
        cfg.tau_routing = common.tau_routing;
    }
    if let Some(w) = &common.window {
        cfg.window = WindowConfig::from_preset(w.parse()?);
    }
    if let Some(a) = &common.ablation {
        cfg.training.ablation = a.parse()?;
    }
    if let Some(e) = common.epochs {
        cfg.training.epochs = e;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            out,
            stations,
            forcings,
            timesteps,
            max_lag,
            topology,
            mask,
            noise_family,
            noise_scale,
            noise_scale_streamflow,
            heterogeneous_runoff,
            instantaneous_routing,
            forcing_edges,
            seed,
        } => {
            let config = GeneratorConfig {
                n_stations: stations,
                n_forcings: forcings,
                n_timesteps: timesteps,
                max_lag,
                topology: match topology.as_str() {
                    "line" => Topology::Line,
                    "tree" => Topology::Tree,
                    other => return Err(Error::Argument(format!("unknown topology '{other}'"))),
                },
                forcing_graph: match forcing_edges {
                    Some(n) => ForcingGraphSpec::Random { n_edges: n },
                    None => ForcingGraphSpec::Chain,
                },
                mask_kind: match mask.as_str() {
                    "direct" => MaskKind::Direct,
                    "reachable" => MaskKind::Reachable,
                    other => return Err(Error::Argument(format!("unknown mask kind '{other}'"))),
                },
                noise_family: noise_family.parse()?,
                noise_scale,
                noise_scale_streamflow,
                heterogeneous_runoff,
                instantaneous_routing,
                seed,
                ..GeneratorConfig::default()
            };
            let (dataset, scm, runoff) = generate_dataset(&config)?;
            write_dataset(&dataset, &out)?;
            write_truth(&scm, &runoff, &dataset, &out)?;
            println!(
                "generated {} stations x {} steps into {}",
                stations,
                timesteps,
                out.display()
            );
            Ok(())
        }
        Command::FetchNwis { sites, start, end, out, endpoint } => {
            let start = start
                .parse()
                .map_err(|e| Error::Argument(format!("bad start date: {e}")))?;
            let end = end
                .parse()
                .map_err(|e| Error::Argument(format!("bad end date: {e}")))?;
            let mut config = NwisConfig::default();
            if let Some(ep) = endpoint {
                config.endpoint = ep;
            }
            let report = fetch_nwis(&sites, start, end, &config, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for (site, err) in &report.per_site_errors {
                eprintln!("site {site}: {err}");
            }
            println!(
                "wrote {} rows for {} site(s) to {}",
                report.rows,
                report.sites_ok.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { dataset, out, common } => {
            let mut cfg = PipelineConfig {
                dataset_path: Some(dataset),
                generator: None,
                output_dir: out.clone(),
                ..PipelineConfig::default()
            };
            apply_common(&mut cfg, &common)?;
            std::fs::create_dir_all(&out)?;
            let prepared = prepare(&cfg)?;
            let outcome =
                train(&prepared.dataset.schema, &cfg.window, &prepared.splits, &cfg.training)?;
            atomic_write(&out.join("train_log.jsonl"), outcome.log.to_jsonl().as_bytes())?;
            checkpoint(&outcome.bundle, &out.join("checkpoint.bin"))?;
            if let Some(msg) = &outcome.log.diverged {
                return Err(Error::Training(format!(
                    "diverged ({msg}); best checkpoint kept at {}",
                    out.join("checkpoint.bin").display()
                )));
            }
            println!(
                "trained: best validation NSE {:.4} (epoch {}), checkpoint at {}",
                outcome.log.best_val_nse,
                outcome.log.best_epoch,
                out.join("checkpoint.bin").display()
            );
            Ok(())
        }
        Command::Discover { dataset, checkpoint: ckpt, out, dot, common } => {
            let mut cfg = PipelineConfig {
                dataset_path: Some(dataset),
                generator: None,
                output_dir: out.clone(),
                ..PipelineConfig::default()
            };
            apply_common(&mut cfg, &common)?;
            let bundle = restore(&ckpt)?;
            cfg.window = bundle.spec.window;
            let prepared = prepare(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let tau_r = cfg.tau_routing.unwrap_or(cfg.tau);
            let discovery = discover(&bundle, &prepared.splits, cfg.tau, tau_r)?;
            let path = export_graphs(&discovery, cfg.tau, tau_r, dot || cfg.emit_dot, &out)?;
            println!("graphs exported to {}", path.display());
            Ok(())
        }
        Command::Forecast { dataset, checkpoint: ckpt, out, conditioning, common } => {
            let mut cfg = PipelineConfig {
                dataset_path: Some(dataset),
                generator: None,
                output_dir: out.clone(),
                ..PipelineConfig::default()
            };
            apply_common(&mut cfg, &common)?;
            let bundle = restore(&ckpt)?;
            cfg.window = bundle.spec.window;
            let prepared = prepare(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let cond = parse_conditioning(&conditioning)?;
            let forecasts = forecast_test_windows(&bundle, &prepared, cond)?;
            atomic_write(&out.join("forecasts.csv"), forecasts.csv.as_bytes())?;
            let manifest = serde_json::json!({
                "window": { "preset": bundle.spec.window.preset_name(),
                             "history_len": bundle.spec.window.history_len,
                             "horizon": bundle.spec.window.horizon },
                "conditioning": cond,
                "checkpoint": ckpt.display().to_string(),
            });
            atomic_write(
                &out.join("forecast_manifest.json"),
                serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
            )?;
            println!("forecasts written to {}", out.join("forecasts.csv").display());
            Ok(())
        }
        Command::Evaluate { dataset, forecasts, out, common } => {
            let mut cfg = PipelineConfig::default();
            apply_common(&mut cfg, &common)?;
            let report = evaluate_forecast_csv(&dataset, &forecasts, &cfg.window)?;
            std::fs::create_dir_all(&out)?;
            atomic_write(
                &out.join("evaluation.json"),
                serde_json::to_string_pretty(&report).unwrap().as_bytes(),
            )?;
            atomic_write(&out.join("evaluation.csv"), report.to_csv().as_bytes())?;
            println!(
                "aggregate: NSE {:.4} KGE {:.4} VE {:.4} rho {:.4}",
                report.aggregate.nse,
                report.aggregate.kge,
                report.aggregate.ve,
                report.aggregate.rho
            );
            Ok(())
        }
        Command::Run { dataset, out, common } => {
            let mut cfg = PipelineConfig { output_dir: out, ..PipelineConfig::default() };
            if let Some(d) = dataset {
                cfg.dataset_path = Some(d);
                cfg.generator = None;
            }
            apply_common(&mut cfg, &common)?;
            let summary = run_experiment(&cfg)?;
            println!(
                "run complete: test NSE {:.4}, forcing F1 {:?}, routing F1 {:?}",
                summary.test_nse, summary.forcing_f1, summary.routing_f1
            );
            println!("artifacts in {}", summary.output_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
