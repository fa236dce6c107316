//! Experiment orchestration: dataset preparation, training, graph
//! discovery, forecasting, evaluation, and plot emission, plus the flat
//! key-value configuration the CLI accepts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{
    atomic_write, load_dataset, load_truth_graphs, load_truth_runoff, write_dataset, write_truth,
    GapLog, Standardization,
};
use crate::error::{Error, Result};
use crate::eval::{
    graph_recovery, mcc_alignment, r2_alignment, station_metrics, AlignmentScores,
    EvaluationReport, GraphScores, KernelRidgeConfig, StationMetrics, WindowEcho,
};
use crate::forecast::{ForcingConditioning, Preset, WindowBatchData, WindowConfig};
use crate::graph::{aggregate_dags, aggregate_single, routing_jacobian_steps, GraphExport, to_dot};
use crate::linalg::{condition_1norm, mat_inv};
use crate::repr::reparam_draws;
use crate::scm::{GeneratorConfig, Topology};
use crate::train::{
    checkpoint, train, Ablation, DataSplits, ModelBundle, TrainLog, TrainingConfig,
};
use crate::types::{BinaryDag, SpatioTemporalDataset, WeightedDag};

/// Aggregation threshold defaults.
pub const DEFAULT_TAU: f64 = 0.5;

/// Full experiment configuration assembled from a config file and CLI
/// overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Existing dataset directory; when absent a synthetic dataset is
    /// generated from `generator`.
    pub dataset_path: Option<PathBuf>,
    pub generator: Option<GeneratorConfig>,
    pub window: WindowConfig,
    pub training: TrainingConfig,
    /// Forcing-graph consistency threshold.
    pub tau: f64,
    /// Routing override; defaults to `tau`.
    pub tau_routing: Option<f64>,
    pub output_dir: PathBuf,
    pub emit_dot: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            generator: Some(GeneratorConfig::default()),
            window: WindowConfig::from_preset(Preset::Short),
            training: TrainingConfig::default(),
            tau: DEFAULT_TAU,
            tau_routing: None,
            output_dir: PathBuf::from("out"),
            emit_dot: false,
        }
    }
}

/// Flat key-value config file (TOML). Every key is optional; CLI flags
/// override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub output: Option<String>,
    pub window: Option<String>,
    pub history_len: Option<usize>,
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub tau_routing: Option<f64>,
    pub ablation: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_norm: Option<f64>,
    pub lambda_elbo: Option<f64>,
    pub lambda_sparse: Option<f64>,
    pub lambda_dag: Option<f64>,
    pub steps_per_epoch: Option<usize>,
    pub vae_batch: Option<usize>,
    pub jacobian_batch: Option<usize>,
    pub channels: Option<usize>,
    pub codec_hidden: Option<usize>,
    pub core_hidden: Option<usize>,
    pub conditioning: Option<String>,
    pub teacher_forcing: Option<bool>,
    pub emit_dot: Option<bool>,
    // synthetic generator keys
    pub n_stations: Option<usize>,
    pub n_forcings: Option<usize>,
    pub runoff_dim: Option<usize>,
    pub max_lag: Option<usize>,
    pub n_timesteps: Option<usize>,
    pub topology: Option<String>,
    pub forcing_edges: Option<usize>,
    pub mask: Option<String>,
    pub heterogeneous_runoff: Option<bool>,
    pub instantaneous_routing: Option<bool>,
    pub noise_family: Option<String>,
    pub noise_scale: Option<f64>,
    pub noise_scale_runoff: Option<f64>,
    pub noise_scale_streamflow: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("config {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| Error::Argument(format!("config {}: {e}", path.display())))
    }

    /// Fold file values into a pipeline config.
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(d) = &self.dataset {
            cfg.dataset_path = Some(PathBuf::from(d));
            cfg.generator = None;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = PathBuf::from(o);
        }
        if let Some(w) = &self.window {
            cfg.window = WindowConfig::from_preset(w.parse()?);
        }
        if let (Some(l), Some(h)) = (self.history_len, self.horizon) {
            cfg.window = WindowConfig::custom(l, h)?;
        }
        if let Some(s) = self.seed {
            cfg.training.seed = s;
            if let Some(g) = cfg.generator.as_mut() {
                g.seed = s;
            }
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg.tau_routing = self.tau_routing.or(cfg.tau_routing);
        if let Some(a) = &self.ablation {
            cfg.training.ablation = a.parse()?;
        }
        macro_rules! set {
            ($field:ident, $target:expr) => {
                if let Some(v) = self.$field {
                    $target = v;
                }
            };
        }
        set!(epochs, cfg.training.epochs);
        set!(batch_size, cfg.training.batch_size);
        set!(learning_rate, cfg.training.learning_rate);
        set!(clip_norm, cfg.training.clip_norm);
        set!(lambda_elbo, cfg.training.lambda_elbo);
        set!(lambda_sparse, cfg.training.lambda_sparse);
        set!(lambda_dag, cfg.training.lambda_dag);
        set!(steps_per_epoch, cfg.training.steps_per_epoch);
        set!(vae_batch, cfg.training.vae_batch);
        set!(jacobian_batch, cfg.training.jacobian_batch);
        set!(channels, cfg.training.channels);
        set!(codec_hidden, cfg.training.codec_hidden);
        set!(core_hidden, cfg.training.core_hidden);
        set!(teacher_forcing, cfg.training.teacher_forcing);
        set!(emit_dot, cfg.emit_dot);
        if let Some(c) = &self.conditioning {
            cfg.training.conditioning = match c.as_str() {
                "past_only" | "past-only" => ForcingConditioning::PastOnly,
                "forecast_forcings" | "forecast-forcings" => ForcingConditioning::ForecastForcings,
                other => return Err(Error::Argument(format!("unknown conditioning '{other}'"))),
            };
        }
        if cfg.dataset_path.is_none() {
            let g = cfg.generator.get_or_insert_with(GeneratorConfig::default);
            set!(n_stations, g.n_stations);
            set!(n_forcings, g.n_forcings);
            set!(runoff_dim, g.runoff_dim);
            set!(max_lag, g.max_lag);
            set!(n_timesteps, g.n_timesteps);
            set!(heterogeneous_runoff, g.heterogeneous_runoff);
            set!(instantaneous_routing, g.instantaneous_routing);
            set!(noise_scale, g.noise_scale);
            if let Some(v) = self.noise_scale_runoff {
                g.noise_scale_runoff = Some(v);
            }
            if let Some(v) = self.noise_scale_streamflow {
                g.noise_scale_streamflow = Some(v);
            }
            if let Some(t) = &self.topology {
                g.topology = match t.as_str() {
                    "line" => Topology::Line,
                    "tree" => Topology::Tree,
                    other => return Err(Error::Argument(format!("unknown topology '{other}'"))),
                };
            }
            if let Some(e) = self.forcing_edges {
                g.forcing_graph = crate::scm::ForcingGraphSpec::Random { n_edges: e };
            }
            if let Some(m) = &self.mask {
                g.mask_kind = match m.as_str() {
                    "direct" => crate::scm::MaskKind::Direct,
                    "reachable" => crate::scm::MaskKind::Reachable,
                    other => return Err(Error::Argument(format!("unknown mask kind '{other}'"))),
                };
            }
            if let Some(f) = &self.noise_family {
                g.noise_family = f.parse()?;
            }
        }
        Ok(())
    }
}

/// Ground truth carried alongside a synthetic dataset.
pub struct TruthBundle {
    pub forcing: BinaryDag,
    pub routing: BinaryDag,
    pub runoff: Array3<f64>,
}

/// Prepared panels: standardized splits plus the fitted statistics.
pub struct Prepared {
    pub dataset: SpatioTemporalDataset,
    pub splits: DataSplits,
    pub standardization: Standardization,
    pub gap_log: GapLog,
    pub truth: Option<TruthBundle>,
}

/// Load-or-generate, split chronologically (70/15/15), and standardize on
/// the training period only.
pub fn prepare(config: &PipelineConfig) -> Result<Prepared> {
    let (dataset, gap_log, truth) = match (&config.dataset_path, &config.generator) {
        (Some(path), _) => {
            let (dataset, gap_log) = load_dataset(path)?;
            let truth = match load_truth_graphs(path) {
                Ok((forcing, routing)) => {
                    let runoff =
                        load_truth_runoff(path, &dataset.schema, &dataset.timestamps)?;
                    Some(TruthBundle { forcing, routing, runoff })
                }
                Err(_) => None,
            };
            (dataset, gap_log, truth)
        }
        (None, Some(gen)) => {
            let (dataset, scm, runoff) = crate::scm::generate_dataset(gen)?;
            let truth = TruthBundle {
                forcing: scm.forcing_dag.clone(),
                routing: scm.routing_dag.clone(),
                runoff,
            };
            (dataset, GapLog::default(), Some(truth))
        }
        (None, None) => {
            return Err(Error::Argument(
                "either a dataset path or generator settings are required".into(),
            ))
        }
    };

    // indices first (value-independent), then leak-free statistics
    let splits_raw = DataSplits::chronological(
        &dataset.forcings,
        &dataset.streamflow,
        &dataset.river_mask,
        &config.window,
        dataset.schema.max_lag,
        &gap_log.excluded_timesteps,
        (0.7, 0.15),
    )?;
    let boundary = splits_raw.train_ends.last().unwrap() + config.window.horizon + 1;
    let standardization = Standardization::fit(&dataset.forcings, &dataset.streamflow, boundary);
    let (f_std, q_std) = standardization.apply(&dataset.forcings, &dataset.streamflow);
    let splits = DataSplits {
        forcings: f_std,
        streamflow: q_std,
        mask: dataset.river_mask.clone(),
        train_ends: splits_raw.train_ends,
        val_ends: splits_raw.val_ends,
        test_ends: splits_raw.test_ends,
    };
    Ok(Prepared { dataset, splits, standardization, gap_log, truth })
}

/// Discovered graphs ready for export and scoring.
pub struct DiscoveryOutput {
    pub forcing_pooled: (BinaryDag, Array2<f64>, WeightedDag),
    pub forcing_per_station: Vec<(String, BinaryDag)>,
    pub routing: (BinaryDag, Vec<Array2<f64>>, WeightedDag),
}

/// Windows used for discovery are stride-sampled down to this many.
const DISCOVERY_MAX_STEPS: usize = 1200;

fn stride_sample(items: &[usize], cap: usize) -> Vec<usize> {
    if items.len() <= cap {
        items.to_vec()
    } else {
        (0..cap).map(|i| items[i * items.len() / cap]).collect()
    }
}

/// Extract per-step graphs on the training period and aggregate them at the
/// configured thresholds.
pub fn discover(
    bundle: &ModelBundle,
    splits: &DataSplits,
    tau_forcing: f64,
    tau_routing: f64,
) -> Result<DiscoveryOutput> {
    let schema = &bundle.spec.schema;
    let n = schema.n_stations;
    let df = schema.n_forcings;

    // forcing: per-(t, station) causal Jacobians of the decoder at the
    // posterior location (u = 0 keeps extraction deterministic)
    let t_max = *splits.train_ends.last().unwrap();
    let step_ts: Vec<usize> = stride_sample(&(0..=t_max).collect::<Vec<_>>(), DISCOVERY_MAX_STEPS);
    let mut per_station_steps: Vec<Vec<Array2<f64>>> = vec![Vec::new(); n];
    let mut skipped = 0usize;
    for chunk in step_ts.chunks(256) {
        let rows = chunk.len() * n;
        let mut x = Array2::zeros((rows, df));
        for (i, &t) in chunk.iter().enumerate() {
            for k in 0..n {
                for c in 0..df {
                    x[[i * n + k, c]] = splits.forcings[[t, k, c]];
                }
            }
        }
        let mut tape = crate::autodiff::Tape::new();
        let cbound = bundle.codec.bind(&mut tape);
        let xv = tape.leaf(x);
        let u = Array2::zeros((rows, df));
        let lat = bundle.codec.encode_vars(&mut tape, &cbound, xv, &u);
        let trace = bundle.codec.decode_traced(&mut tape, &cbound, lat.sample);
        let jacs = bundle
            .codec
            .decoder
            .input_jacobians(&mut tape, &cbound.decoder, &trace);
        for (i, _) in chunk.iter().enumerate() {
            for k in 0..n {
                let jm = tape.value(jacs[i * n + k]).clone();
                let ok = (0..df).all(|d| jm[[d, d]].abs() > 1e-9);
                let inv = if ok { mat_inv(&jm).ok() } else { None };
                let inv = match inv {
                    Some(inv) if condition_1norm(&jm, &inv) < 1e8 => inv,
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                let mut jg = Array2::<f64>::zeros((df, df));
                for a in 0..df {
                    let dm = jm[[a, a]];
                    for b in 0..df {
                        let eye = if a == b { 1.0 } else { 0.0 };
                        jg[[a, b]] = (eye - dm * inv[[a, b]]).abs();
                    }
                    jg[[a, a]] = 0.0;
                }
                per_station_steps[k].push(jg);
            }
        }
    }
    if per_station_steps.iter().any(|s| s.is_empty()) {
        return Err(Error::Numerical(format!(
            "forcing discovery skipped every sample for some station ({skipped} ill-conditioned)"
        )));
    }
    let labels = schema.forcing_names.clone();
    let mut forcing_per_station = Vec::with_capacity(n);
    let mut pooled: Vec<Array2<f64>> = Vec::new();
    for (k, steps) in per_station_steps.iter().enumerate() {
        let (dag, _) = aggregate_single(steps, tau_forcing, labels.clone())?;
        forcing_per_station.push((schema.station_ids[k].clone(), dag));
        pooled.extend(steps.iter().cloned());
    }
    let (forcing_dag, forcing_consistency) = aggregate_single(&pooled, tau_forcing, labels.clone())?;
    let mut forcing_weighted = Array2::<f64>::zeros((df, df));
    for s in &pooled {
        forcing_weighted += s;
    }
    forcing_weighted /= pooled.len() as f64;
    let forcing_weighted = WeightedDag::from_matrix(&forcing_weighted, labels)?;

    // routing: per-window sensitivity stacks over the training period
    let ends = stride_sample(&splits.train_ends, DISCOVERY_MAX_STEPS);
    let mut per_step: Vec<Vec<Array2<f64>>> = Vec::new();
    for chunk in ends.chunks(64) {
        let data = WindowBatchData::from_panels(
            &splits.forcings,
            &splits.streamflow,
            bundle.spec.window.history_len,
            1,
            chunk,
        )?;
        let steps = routing_jacobian_steps(
            &bundle.forecaster,
            &data,
            Some(&bundle.runoff),
            &bundle.routing_adj,
            &splits.mask,
        )?;
        per_step.extend(steps);
    }
    let (routing_dag, routing_consistency) = aggregate_dags(
        &per_step,
        tau_routing,
        schema.station_ids.clone(),
        true,
    )?;
    let lag_count = routing_dag.n_lags();
    let mut routing_weighted = vec![Array2::<f64>::zeros((n, n)); lag_count];
    for stack in &per_step {
        for (acc, s) in routing_weighted.iter_mut().zip(stack) {
            *acc += s;
        }
    }
    for acc in routing_weighted.iter_mut() {
        *acc /= per_step.len() as f64;
    }
    let routing_weighted = WeightedDag::from_lagged(&routing_weighted, schema.station_ids.clone())?;

    Ok(DiscoveryOutput {
        forcing_pooled: (forcing_dag, forcing_consistency, forcing_weighted),
        forcing_per_station,
        routing: (routing_dag, routing_consistency, routing_weighted),
    })
}

#[derive(Serialize)]
struct GraphsJson {
    tau_forcing: f64,
    tau_routing: f64,
    forcing: GraphExport,
    forcing_per_station: BTreeMap<String, Vec<Vec<Vec<u8>>>>,
    routing: GraphExport,
}

/// Write graphs.json (+ optional DOT files); byte-stable across reruns.
pub fn export_graphs(
    discovery: &DiscoveryOutput,
    tau_forcing: f64,
    tau_routing: f64,
    emit_dot: bool,
    dir: &Path,
) -> Result<PathBuf> {
    let (fdag, fcons, fweighted) = &discovery.forcing_pooled;
    let (rdag, rcons, rweighted) = &discovery.routing;
    let graphs = GraphsJson {
        tau_forcing,
        tau_routing,
        forcing: GraphExport::new(fdag, std::slice::from_ref(fcons), fweighted, tau_forcing),
        forcing_per_station: discovery
            .forcing_per_station
            .iter()
            .map(|(sid, dag)| (sid.clone(), dag.slices.clone()))
            .collect(),
        routing: GraphExport::new(rdag, rcons, rweighted, tau_routing),
    };
    let path = dir.join("graphs.json");
    atomic_write(&path, serde_json::to_string_pretty(&graphs).unwrap().as_bytes())?;
    if emit_dot {
        atomic_write(&dir.join("forcing.dot"), to_dot(fdag, "forcing").as_bytes())?;
        atomic_write(&dir.join("routing.dot"), to_dot(rdag, "routing").as_bytes())?;
    }
    Ok(path)
}

/// Per-window forecasts over the test split, de-standardized.
pub struct ForecastArtifacts {
    /// (window end t, horizon step h>=1, station) -> prediction.
    pub rows: Vec<(usize, usize, usize, f64)>,
    pub csv: String,
}

pub fn forecast_test_windows(
    bundle: &ModelBundle,
    prepared: &Prepared,
    conditioning: ForcingConditioning,
) -> Result<ForecastArtifacts> {
    let splits = &prepared.splits;
    let h = bundle.spec.window.horizon;
    let n = bundle.spec.schema.n_stations;
    let mut rows = Vec::new();
    for chunk in splits.test_ends.chunks(256) {
        let preds = crate::train::predict_batch(bundle, splits, chunk, h, conditioning)?;
        for (hstep, p) in preds.iter().enumerate() {
            for (bi, &t) in chunk.iter().enumerate() {
                for k in 0..n {
                    let phys = prepared.standardization.destandardize_q(p[[k, bi]], k);
                    rows.push((t, hstep + 1, k, phys));
                }
            }
        }
    }
    rows.sort_by_key(|&(t, h, k, _)| (t, h, k));
    let mut csv = String::from("date,station_id,horizon_step,prediction\n");
    for &(t, hstep, k, v) in &rows {
        let date = prepared.dataset.timestamps[t + hstep];
        csv.push_str(&format!(
            "{date},{},{hstep},{v}\n",
            prepared.dataset.schema.station_ids[k]
        ));
    }
    Ok(ForecastArtifacts { rows, csv })
}

/// Assemble the evaluation report: per-station skill on the test split,
/// graph recovery and runoff alignment when ground truth is available.
pub fn evaluate(
    bundle: &ModelBundle,
    prepared: &Prepared,
    forecasts: &ForecastArtifacts,
    discovery: Option<&DiscoveryOutput>,
) -> Result<EvaluationReport> {
    let schema = &bundle.spec.schema;
    let n = schema.n_stations;
    let mut obs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &(t, h, k, v) in &forecasts.rows {
        obs[k].push(prepared.dataset.streamflow[[t + h, k]]);
        pred[k].push(v);
    }
    let mut per_station = BTreeMap::new();
    let mut nse_acc = 0.0;
    let mut kge_acc = 0.0;
    let mut ve_acc = 0.0;
    let mut rho_acc = 0.0;
    for k in 0..n {
        let m = station_metrics(&obs[k], &pred[k])?;
        nse_acc += m.nse;
        kge_acc += m.kge;
        ve_acc += m.ve;
        rho_acc += m.rho;
        per_station.insert(schema.station_ids[k].clone(), m);
    }
    let aggregate = StationMetrics {
        nse: nse_acc / n as f64,
        kge: kge_acc / n as f64,
        ve: ve_acc / n as f64,
        rho: rho_acc / n as f64,
    };

    let mut graph_scores = BTreeMap::new();
    let mut alignment = None;
    if let Some(truth) = &prepared.truth {
        if let Some(d) = discovery {
            graph_scores.insert(
                "forcing".to_string(),
                graph_recovery(&d.forcing_pooled.0, &truth.forcing)?,
            );
            graph_scores.insert("routing".to_string(), graph_recovery(&d.routing.0, &truth.routing)?);
            let mut f1_sum = 0.0;
            for (_, dag) in &d.forcing_per_station {
                f1_sum += graph_recovery(dag, &truth.forcing)?.f1;
            }
            graph_scores.insert(
                "forcing_station_mean".to_string(),
                GraphScores {
                    precision: f64::NAN,
                    recall: f64::NAN,
                    f1: f1_sum / d.forcing_per_station.len() as f64,
                    shd: 0,
                },
            );
        }
        // alignment on the test period
        let test_t0 = *prepared.splits.test_ends.first().unwrap();
        let test_t1 = *prepared.splits.test_ends.last().unwrap();
        let span = test_t0..=test_t1;
        let emb_f = prepared
            .splits
            .forcings
            .slice(ndarray::s![*span.start()..=*span.end(), .., ..])
            .to_owned();
        let emb = bundle.runoff.generate(&emb_f)?;
        let steps = emb.dim().0;
        let mut embs = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for k in 0..n {
            embs.push(Array2::from_shape_fn((steps, schema.runoff_dim), |(t, c)| emb[[t, k, c]]));
            truths.push(Array2::from_shape_fn(
                (steps, truth.runoff.dim().2),
                |(t, c)| truth.runoff[[test_t0 + t, k, c]],
            ));
        }
        let mut mcc_acc = 0.0;
        for k in 0..n {
            mcc_acc += mcc_alignment(&embs[k], &truths[k])?;
        }
        let r2 = r2_alignment(&embs, &truths, &KernelRidgeConfig::default())?;
        alignment = Some(AlignmentScores { mcc: mcc_acc / n as f64, r2: r2.mean });
    }

    Ok(EvaluationReport {
        per_station,
        aggregate,
        graph_scores,
        alignment,
        window: WindowEcho {
            preset: bundle.spec.window.preset_name(),
            history_len: bundle.spec.window.history_len,
            horizon: bundle.spec.window.horizon,
        },
    })
}

/// Key results of a full pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub best_val_nse: f64,
    pub test_nse: f64,
    pub forcing_f1: Option<f64>,
    pub forcing_station_mean_f1: Option<f64>,
    pub routing_f1: Option<f64>,
    pub routing_edges_outside_mask: usize,
    pub alignment_mcc: Option<f64>,
    pub alignment_r2: Option<f64>,
    pub diverged: Option<String>,
    pub artifacts: Vec<String>,
}

/// Execute generate/load -> train -> discover -> forecast -> evaluate,
/// emitting every artifact kind into the output directory.
pub fn run_experiment(config: &PipelineConfig) -> Result<ExperimentSummary> {
    std::fs::create_dir_all(&config.output_dir)?;
    let out = &config.output_dir;
    let mut artifacts: Vec<String> = Vec::new();

    // stage: generate or load
    let prepared = prepare(config)?;
    if config.dataset_path.is_none() {
        let ds_dir = out.join("dataset");
        write_dataset(&prepared.dataset, &ds_dir)
            .map_err(|e| stage_error("generate", e))?;
        if let Some(truth) = &prepared.truth {
            // rebuild the SCM export from the truth bundle
            write_truth_from_bundle(truth, &prepared.dataset, &ds_dir)?;
        }
        artifacts.push("dataset".into());
    }
    atomic_write(
        &out.join("gaps.json"),
        serde_json::to_string_pretty(&prepared.gap_log).unwrap().as_bytes(),
    )?;

    // stage: train
    let outcome = train(
        &prepared.dataset.schema,
        &config.window,
        &prepared.splits,
        &config.training,
    )
    .map_err(|e| stage_error("train", e))?;
    let bundle = outcome.bundle;
    let log: &TrainLog = &outcome.log;
    atomic_write(&out.join("train_log.jsonl"), log.to_jsonl().as_bytes())?;
    artifacts.push("train_log.jsonl".into());
    checkpoint(&bundle, &out.join("checkpoint.bin")).map_err(|e| stage_error("train", e))?;
    artifacts.push("checkpoint.bin".into());

    // stage: discover
    let tau_r = config.tau_routing.unwrap_or(config.tau);
    let discovery = discover(&bundle, &prepared.splits, config.tau, tau_r)
        .map_err(|e| stage_error("discover", e))?;
    export_graphs(&discovery, config.tau, tau_r, config.emit_dot, out)?;
    artifacts.push("graphs.json".into());

    // stage: forecast
    let forecasts = forecast_test_windows(&bundle, &prepared, config.training.conditioning)
        .map_err(|e| stage_error("forecast", e))?;
    atomic_write(&out.join("forecasts.csv"), forecasts.csv.as_bytes())?;
    artifacts.push("forecasts.csv".into());
    let forecast_manifest = serde_json::json!({
        "window": { "preset": config.window.preset_name(),
                     "history_len": config.window.history_len,
                     "horizon": config.window.horizon },
        "conditioning": config.training.conditioning,
        "checkpoint": "checkpoint.bin",
        "seed": config.training.seed,
    });
    atomic_write(
        &out.join("forecast_manifest.json"),
        serde_json::to_string_pretty(&forecast_manifest).unwrap().as_bytes(),
    )?;

    // stage: evaluate
    let report = evaluate(&bundle, &prepared, &forecasts, Some(&discovery))
        .map_err(|e| stage_error("evaluate", e))?;
    atomic_write(
        &out.join("evaluation.json"),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    atomic_write(&out.join("evaluation.csv"), report.to_csv().as_bytes())?;
    artifacts.push("evaluation.json".into());

    // stage: plots
    let plots = out.join("plots");
    std::fs::create_dir_all(&plots)?;
    emit_plots(&bundle, &prepared, &forecasts, &discovery, &plots)?;
    artifacts.push("plots".into());

    // mask violations in the discovered routing graph
    let mut outside = 0usize;
    let rdag = &discovery.routing.0;
    for lag in 0..rdag.n_lags() {
        for k in 0..rdag.n_nodes() {
            for j in 0..rdag.n_nodes() {
                if rdag.edge(lag, k, j) && prepared.dataset.river_mask[[k, j]] == 0.0 {
                    outside += 1;
                }
            }
        }
    }

    let summary = ExperimentSummary {
        output_dir: out.clone(),
        best_val_nse: log.best_val_nse,
        test_nse: report.aggregate.nse,
        forcing_f1: report.graph_scores.get("forcing").map(|g| g.f1),
        forcing_station_mean_f1: report.graph_scores.get("forcing_station_mean").map(|g| g.f1),
        routing_f1: report.graph_scores.get("routing").map(|g| g.f1),
        routing_edges_outside_mask: outside,
        alignment_mcc: report.alignment.as_ref().map(|a| a.mcc),
        alignment_r2: report.alignment.as_ref().map(|a| a.r2),
        diverged: log.diverged.clone(),
        artifacts: artifacts.clone(),
    };
    let manifest = serde_json::json!({
        "artifacts": artifacts,
        "summary": &summary,
    });
    atomic_write(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
    )?;
    if let Some(msg) = &log.diverged {
        return Err(Error::Training(format!(
            "training diverged ({msg}); best checkpoint and partial artifacts kept in {}",
            out.display()
        )));
    }
    Ok(summary)
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("stage '{stage}': {msg}")),
        Error::Network(msg) => Error::Network(format!("stage '{stage}': {msg}")),
        Error::Argument(msg) => Error::Argument(format!("stage '{stage}': {msg}")),
        other => Error::Load(format!("stage '{stage}': {other}")),
    }
}

fn write_truth_from_bundle(
    truth: &TruthBundle,
    dataset: &SpatioTemporalDataset,
    dir: &Path,
) -> Result<()> {
    // reuse the SCM exporter by reconstructing a minimal SCM shell
    use crate::scm::{GroundTruthScm, RunoffTruth, ScalarFn, VectorFn};
    let shell = GroundTruthScm {
        forcing_dag: truth.forcing.clone(),
        routing_dag: truth.routing.clone(),
        forcing_fns: vec![ScalarFn::Zero; truth.forcing.n_nodes()],
        runoff_fn: RunoffTruth::Shared(VectorFn::SelectFirst { out_dim: truth.runoff.dim().2 }),
        runoff_lags: 0,
        streamflow_fns: vec![ScalarFn::Sum; truth.routing.n_nodes()],
        noise: crate::types::NoiseSpec {
            family: crate::types::NoiseFamily::Laplace,
            forcing_scales: vec![0.0; truth.forcing.n_nodes()],
            runoff_scales: vec![0.0; truth.runoff.dim().2],
            streamflow_scales: vec![0.0; truth.routing.n_nodes()],
            warmup_scale: 0.0,
            warmup_loc: 0.0,
            seed: 0,
        },
    };
    write_truth(&shell, &truth.runoff, dataset, dir)
}

fn emit_plots(
    bundle: &ModelBundle,
    prepared: &Prepared,
    forecasts: &ForecastArtifacts,
    discovery: &DiscoveryOutput,
    dir: &Path,
) -> Result<()> {
    let schema = &bundle.spec.schema;
    let n = schema.n_stations;
    // hydrographs: first-horizon-step predictions over the test period
    for k in 0..n {
        let mut obs = Vec::new();
        let mut pred = Vec::new();
        for &(t, h, kk, v) in &forecasts.rows {
            if kk == k && h == 1 {
                obs.push(prepared.dataset.streamflow[[t + 1, k]]);
                pred.push(v);
            }
        }
        if obs.len() < 2 {
            continue;
        }
        let svg = crate::plot::hydrograph_svg(
            &format!("{} test hydrograph (h=1)", schema.station_ids[k]),
            &obs,
            &pred,
        );
        atomic_write(&dir.join(format!("hydrograph_{}.svg", schema.station_ids[k])), svg.as_bytes())?;
    }
    // adjacency heatmaps
    let fsvg = crate::plot::heatmap_svg(
        "forcing graph consistency",
        &discovery.forcing_pooled.1,
        &schema.forcing_names,
    );
    atomic_write(&dir.join("forcing_consistency.svg"), fsvg.as_bytes())?;
    for (l, slice) in discovery.routing.1.iter().enumerate() {
        let svg = crate::plot::heatmap_svg(
            &format!("routing consistency lag {l}"),
            slice,
            &schema.station_ids,
        );
        atomic_write(&dir.join(format!("routing_consistency_lag{l}.svg")), svg.as_bytes())?;
    }
    Ok(())
}

/// Evaluate a forecasts CSV against a dataset directory (CLI `evaluate`).
pub fn evaluate_forecast_csv(
    dataset_dir: &Path,
    forecasts_csv: &Path,
    window: &WindowConfig,
) -> Result<EvaluationReport> {
    let (dataset, _) = load_dataset(dataset_dir)?;
    let schema = &dataset.schema;
    let sidx: BTreeMap<&str, usize> =
        schema.station_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let tidx: BTreeMap<chrono::NaiveDate, usize> =
        dataset.timestamps.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut rdr = csv::Reader::from_path(forecasts_csv)
        .map_err(|e| Error::Load(format!("{}: {e}", forecasts_csv.display())))?;
    let n = schema.n_stations;
    let mut obs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); n];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Load(e.to_string()))?;
        let date: chrono::NaiveDate =
            rec[0].parse().map_err(|e| Error::Load(format!("bad date: {e}")))?;
        let k = *sidx
            .get(&rec[1])
            .ok_or_else(|| Error::Schema(format!("unknown station '{}' in forecasts", &rec[1])))?;
        let t = *tidx
            .get(&date)
            .ok_or_else(|| Error::Load(format!("forecast date {date} outside the dataset")))?;
        let v: f64 = rec[3].parse().map_err(|e| Error::Load(format!("bad prediction: {e}")))?;
        obs[k].push(dataset.streamflow[[t, k]]);
        pred[k].push(v);
    }
    let mut per_station = BTreeMap::new();
    let mut agg = [0.0; 4];
    for k in 0..n {
        let m = station_metrics(&obs[k], &pred[k])?;
        agg[0] += m.nse;
        agg[1] += m.kge;
        agg[2] += m.ve;
        agg[3] += m.rho;
        per_station.insert(schema.station_ids[k].clone(), m);
    }
    Ok(EvaluationReport {
        per_station,
        aggregate: StationMetrics {
            nse: agg[0] / n as f64,
            kge: agg[1] / n as f64,
            ve: agg[2] / n as f64,
            rho: agg[3] / n as f64,
        },
        graph_scores: BTreeMap::new(),
        alignment: None,
        window: WindowEcho {
            preset: window.preset_name(),
            history_len: window.history_len,
            horizon: window.horizon,
        },
    })
}

/// Posterior draws helper re-exported for deterministic CLI subcommands.
pub fn deterministic_draws(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Posterior);
    reparam_draws(&mut rng, rows, cols)
}

/// Ablation echo for experiment directories.
pub fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::Full => "full",
        Ablation::NoCausalLosses => "no_causal_losses",
        Ablation::NoForcingVae => "no_forcing_vae",
        Ablation::SharedRunoff => "shared_runoff",
        Ablation::LocalRunoff => "local_runoff",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_config_parses_and_applies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(
            &path,
            "window = \"medium\"\nseed = 9\ntau = 0.4\nepochs = 2\nn_stations = 3\n\
             noise_family = \"gumbel\"\nablation = \"shared_runoff\"\n",
        )
        .unwrap();
        let fc = FileConfig::load(&path).unwrap();
        let mut cfg = PipelineConfig::default();
        fc.apply(&mut cfg).unwrap();
        assert_eq!(cfg.window.history_len, 14);
        assert_eq!(cfg.window.horizon, 3);
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.tau, 0.4);
        assert_eq!(cfg.training.epochs, 2);
        assert_eq!(cfg.training.ablation, Ablation::SharedRunoff);
        let g = cfg.generator.as_ref().unwrap();
        assert_eq!(g.n_stations, 3);
        assert_eq!(g.noise_family, crate::types::NoiseFamily::Gumbel);
        assert_eq!(g.seed, 9);
    }

    #[test]
    fn gaussian_noise_in_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "noise_family = \"gaussian\"\n").unwrap();
        let fc = FileConfig::load(&path).unwrap();
        let mut cfg = PipelineConfig::default();
        let err = fc.apply(&mut cfg).unwrap_err();
        assert!(err.to_string().contains("non-Gaussianity"));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "learnig_rate = 0.1\n").unwrap();
        assert!(FileConfig::load(&path).is_err());
    }
}
