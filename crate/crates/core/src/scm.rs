//! Ground-truth structural causal models and the synthetic data they generate.
//!
//! The generator builds a two-stage water system: an instantaneous DAG among
//! forcing variables feeds a runoff map, and a lag-windowed routing DAG
//! propagates runoff and upstream flow to each station. Structural functions
//! are random single-hidden-layer perceptrons with tanh activations whose
//! weights are sampled outside a dead zone (|w| >= 0.3), so every edge has a
//! partial derivative that is not identically zero. Noise is non-Gaussian by
//! construction.

use chrono::NaiveDate;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::toposort_support;
use crate::rng::{draw_noise, stream_rng, Stream};
use crate::types::{BinaryDag, DatasetSchema, NoiseFamily, NoiseSpec, SpatioTemporalDataset};

/// Base flow added to generated streamflow functions so synthetic
/// discharge stays positive (volume metrics need positive observed flow).
pub const FLOW_OFFSET: f64 = 3.0;

/// Scalar structural function of a node's parents.
#[derive(Debug, Clone)]
pub enum ScalarFn {
    /// Root node: value is pure noise.
    Zero,
    Linear { weights: Vec<f64>, bias: f64 },
    /// Sum of all inputs.
    Sum,
    Mlp(MlpFn),
}

/// Single-hidden-layer perceptron with tanh activation, scalar output,
/// plus an optional linear skip term (mass-balance-like passthrough).
#[derive(Debug, Clone)]
pub struct MlpFn {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub w_skip: Array1<f64>,
}

impl ScalarFn {
    pub fn arity(&self) -> Option<usize> {
        match self {
            ScalarFn::Zero => Some(0),
            ScalarFn::Linear { weights, .. } => Some(weights.len()),
            ScalarFn::Sum => None,
            ScalarFn::Mlp(m) => Some(m.w1.ncols()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Linear { weights, bias } => {
                weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias
            }
            ScalarFn::Sum => x.iter().sum(),
            ScalarFn::Mlp(m) => {
                let mut out = m.b2;
                for (p, v) in x.iter().enumerate() {
                    out += m.w_skip[p] * v;
                }
                for u in 0..m.w1.nrows() {
                    let mut z = m.b1[u];
                    for (p, v) in x.iter().enumerate() {
                        z += m.w1[[u, p]] * v;
                    }
                    out += m.w2[u] * z.tanh();
                }
                out
            }
        }
    }
}

/// Vector-valued structural function (runoff generation).
#[derive(Debug, Clone)]
pub enum VectorFn {
    /// Pass through the first `out_dim` inputs unchanged.
    SelectFirst { out_dim: usize },
    Linear { w: Array2<f64>, b: Array1<f64> },
    Mlp { w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64> },
}

impl VectorFn {
    pub fn out_dim(&self) -> usize {
        match self {
            VectorFn::SelectFirst { out_dim } => *out_dim,
            VectorFn::Linear { w, .. } => w.nrows(),
            VectorFn::Mlp { w2, .. } => w2.nrows(),
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            VectorFn::SelectFirst { out_dim } => {
                for (o, v) in out.iter_mut().zip(x.iter().take(*out_dim)) {
                    *o = *v;
                }
            }
            VectorFn::Linear { w, b } => {
                for i in 0..w.nrows() {
                    let mut s = b[i];
                    for (j, v) in x.iter().enumerate() {
                        s += w[[i, j]] * v;
                    }
                    out[i] = s;
                }
            }
            VectorFn::Mlp { w1, b1, w2, b2 } => {
                let h = w1.nrows();
                let mut hid = vec![0.0; h];
                for u in 0..h {
                    let mut z = b1[u];
                    for (p, v) in x.iter().enumerate() {
                        z += w1[[u, p]] * v;
                    }
                    hid[u] = z.tanh();
                }
                for i in 0..w2.nrows() {
                    let mut s = b2[i];
                    for (u, hv) in hid.iter().enumerate() {
                        s += w2[[i, u]] * hv;
                    }
                    out[i] = s;
                }
            }
        }
    }
}

/// Runoff truth: one shared map, or one map per station for heterogeneous basins.
#[derive(Debug, Clone)]
pub enum RunoffTruth {
    Shared(VectorFn),
    PerStation(Vec<VectorFn>),
}

impl RunoffTruth {
    pub fn for_station(&self, k: usize) -> &VectorFn {
        match self {
            RunoffTruth::Shared(f) => f,
            RunoffTruth::PerStation(fs) => &fs[k],
        }
    }
}

/// Complete hidden data-generating process.
#[derive(Debug, Clone)]
pub struct GroundTruthScm {
    /// Instantaneous forcing DAG (single slice, d_f x d_f).
    pub forcing_dag: BinaryDag,
    /// Lag-indexed routing DAG, (L+1) slices of N x N.
    pub routing_dag: BinaryDag,
    /// Per forcing node; input is its parents in ascending index order.
    pub forcing_fns: Vec<ScalarFn>,
    pub runoff_fn: RunoffTruth,
    /// How many past runoff steps feed each station's flow (0 = current
    /// runoff only). Physical delays live in the runoff dynamics.
    pub runoff_lags: usize,
    /// Per station; input layout is [runoff at lag 0..=runoff_lags,
    /// instantaneous parents asc, lag-1 parents asc, ..., lag-L parents asc].
    pub streamflow_fns: Vec<ScalarFn>,
    pub noise: NoiseSpec,
}

impl GroundTruthScm {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !self.forcing_dag.lag0_is_acyclic() {
            return Err(Error::Structural("forcing DAG contains a cycle".into()));
        }
        if !self.routing_dag.lag0_is_acyclic() {
            return Err(Error::Structural(
                "instantaneous routing slice contains a cycle".into(),
            ));
        }
        let df = self.forcing_dag.n_nodes();
        if self.forcing_fns.len() != df {
            return Err(Error::Schema("one structural function per forcing node required".into()));
        }
        for (i, f) in self.forcing_fns.iter().enumerate() {
            let parents = forcing_parents(&self.forcing_dag, i).len();
            if let Some(a) = f.arity() {
                if a != parents {
                    return Err(Error::Schema(format!(
                        "forcing node {i} has {parents} parents but its function takes {a} inputs"
                    )));
                }
            }
        }
        let n = self.routing_dag.n_nodes();
        if self.streamflow_fns.len() != n {
            return Err(Error::Schema("one streamflow function per station required".into()));
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.routing_dag.n_lags() - 1
    }
}

pub(crate) fn forcing_parents(dag: &BinaryDag, node: usize) -> Vec<usize> {
    (0..dag.n_nodes()).filter(|&j| dag.edge(0, node, j)).collect()
}

fn routing_parents(dag: &BinaryDag, lag: usize, station: usize) -> Vec<usize> {
    (0..dag.n_nodes())
        .filter(|&j| dag.edge(lag, station, j) && (lag > 0 || j != station))
        .collect()
}

/// Generate the forcing panel in topological order of the forcing DAG.
pub fn sample_forcing_panel(
    scm: &GroundTruthScm,
    schema: &DatasetSchema,
    seed: u64,
) -> Result<Array3<f64>> {
    let order = toposort_support(&scm.forcing_dag.slice(0))
        .ok_or_else(|| Error::Structural("forcing DAG contains a cycle".into()))?;
    let (t_len, n, df) = (schema.n_timesteps, schema.n_stations, schema.n_forcings);
    if df != scm.forcing_dag.n_nodes() {
        return Err(Error::Schema("schema forcing count does not match SCM".into()));
    }
    let mut rng = stream_rng(seed, Stream::ForcingNoise);
    let mut out = Array3::<f64>::zeros((t_len, n, df));
    let mut parent_buf = Vec::with_capacity(df);
    for t in 0..t_len {
        for k in 0..n {
            for &i in &order {
                parent_buf.clear();
                for j in forcing_parents(&scm.forcing_dag, i) {
                    parent_buf.push(out[[t, k, j]]);
                }
                let signal = scm.forcing_fns[i].eval(&parent_buf);
                let eps = draw_noise(&mut rng, scm.noise.family, scm.noise.forcing_scales[i]);
                let v = signal + eps;
                if !v.is_finite() {
                    return Err(Error::Generation(format!(
                        "non-finite forcing value at node {i}, station {k}, timestep {t}"
                    )));
                }
                out[[t, k, i]] = v;
            }
        }
    }
    Ok(out)
}

/// Runoff panel r[t,k] = f_r(F[t,k]) + noise.
pub fn sample_runoff(forcings: &Array3<f64>, scm: &GroundTruthScm, seed: u64) -> Result<Array3<f64>> {
    let (t_len, n, df) = forcings.dim();
    let dr = scm.runoff_fn.for_station(0).out_dim();
    if forcings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("forcings contain non-finite values".into()));
    }
    if let RunoffTruth::PerStation(fs) = &scm.runoff_fn {
        if fs.len() != n {
            return Err(Error::Schema(format!(
                "per-station runoff truth has {} entries for {} stations",
                fs.len(),
                n
            )));
        }
    }
    let mut rng = stream_rng(seed, Stream::RunoffNoise);
    let mut out = Array3::<f64>::zeros((t_len, n, dr));
    let mut x = vec![0.0; df];
    let mut r = vec![0.0; dr];
    for t in 0..t_len {
        for k in 0..n {
            for (j, v) in x.iter_mut().enumerate() {
                *v = forcings[[t, k, j]];
            }
            scm.runoff_fn.for_station(k).eval(&x, &mut r);
            for (c, rv) in r.iter().enumerate() {
                let eps = draw_noise(&mut rng, scm.noise.family, scm.noise.runoff_scales[c]);
                out[[t, k, c]] = rv + eps;
            }
        }
    }
    Ok(out)
}

/// Route runoff through the station network. The first L timesteps are pure
/// warm-up noise draws and are excluded from training windows downstream.
pub fn route_streamflow(runoff: &Array3<f64>, scm: &GroundTruthScm, seed: u64) -> Result<Array2<f64>> {
    let (t_len, n, dr) = runoff.dim();
    if n != scm.routing_dag.n_nodes() {
        return Err(Error::Schema("runoff station count does not match routing DAG".into()));
    }
    let lag = scm.max_lag();
    let warm = lag.max(scm.runoff_lags);
    let order = toposort_support(&scm.routing_dag.slice(0))
        .ok_or_else(|| Error::Structural("instantaneous routing slice contains a cycle".into()))?;
    let mut rng = stream_rng(seed, Stream::StreamflowNoise);
    let mut q = Array2::<f64>::zeros((t_len, n));
    let mut input = Vec::new();
    for t in 0..t_len {
        if t < warm {
            for k in 0..n {
                q[[t, k]] = scm.noise.warmup_loc
                    + draw_noise(&mut rng, scm.noise.family, scm.noise.warmup_scale);
            }
            continue;
        }
        for &k in &order {
            input.clear();
            for rl in 0..=scm.runoff_lags {
                for c in 0..dr {
                    input.push(runoff[[t - rl, k, c]]);
                }
            }
            for j in routing_parents(&scm.routing_dag, 0, k) {
                input.push(q[[t, j]]);
            }
            for l in 1..=lag {
                for j in routing_parents(&scm.routing_dag, l, k) {
                    input.push(q[[t - l, j]]);
                }
            }
            let signal = scm.streamflow_fns[k].eval(&input);
            let eps = draw_noise(&mut rng, scm.noise.family, scm.noise.streamflow_scales[k]);
            let v = signal + eps;
            if !v.is_finite() {
                return Err(Error::Generation(format!(
                    "non-finite streamflow at station {k}, timestep {t}"
                )));
            }
            q[[t, k]] = v;
        }
    }
    Ok(q)
}

/// Closed-form check instrument for the adjacency-recovery formula on linear
/// SCMs x = A x + eps with strictly lower-triangular A.
///
/// Returns (J_m, J_g) where J_m = (I - A)^-1 and J_g = I - D_m J_m^-1 with
/// D_m = diag(J_m); algebra gives J_g = A exactly.
pub fn linear_scm_oracle(a: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Contract("adjacency must be square".into()));
    }
    for i in 0..d {
        for j in i..d {
            if a[[i, j]] != 0.0 {
                return Err(Error::Contract(format!(
                    "adjacency must be strictly lower triangular; entry ({i},{j}) is nonzero"
                )));
            }
        }
    }
    // (I - A) is unit lower triangular; invert by forward substitution.
    let mut jm = Array2::<f64>::zeros((d, d));
    for col in 0..d {
        jm[[col, col]] = 1.0;
        for row in (col + 1)..d {
            let mut s = 0.0;
            for p in col..row {
                s += a[[row, p]] * jm[[p, col]];
            }
            jm[[row, col]] = s;
        }
    }
    // J_m^-1 = I - A analytically; D_m read off J_m.
    let mut jg = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let dm = jm[[i, i]];
        for j in 0..d {
            let eye = if i == j { 1.0 } else { 0.0 };
            let inv_ij = eye - a[[i, j]];
            jg[[i, j]] = eye - dm * inv_ij;
        }
    }
    Ok((jm, jg))
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// River network layout for the synthetic basin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Chain 0 -> 1 -> ... -> N-1.
    Line,
    /// Binary tree draining toward station 0 (edge i -> (i-1)/2).
    Tree,
}

/// Forcing-graph layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForcingGraphSpec {
    /// Chain f0 -> f1 -> ... in index order.
    Chain,
    /// `n_edges` random parent<child pairs in index order.
    Random { n_edges: usize },
}

/// Which station pairs the river mask admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Only the direct network edges (plus the diagonal).
    Direct,
    /// Full downstream reachability (plus the diagonal); leaves room for
    /// spurious-but-admissible edges the learner must reject.
    Reachable,
}

/// Configuration of the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_stations: usize,
    pub n_forcings: usize,
    pub runoff_dim: usize,
    pub max_lag: usize,
    pub n_timesteps: usize,
    pub topology: Topology,
    pub forcing_graph: ForcingGraphSpec,
    /// Route odd-indexed network edges instantaneously instead of at lag 1.
    pub instantaneous_routing: bool,
    pub mask_kind: MaskKind,
    /// Per-station runoff functions instead of one shared map.
    pub heterogeneous_runoff: bool,
    pub noise_family: NoiseFamily,
    /// Noise scale relative to each node's signal standard deviation.
    pub noise_scale: f64,
    /// Optional relative override for runoff noise.
    pub noise_scale_runoff: Option<f64>,
    /// Optional relative override for streamflow noise (0 = noise-free
    /// observations).
    pub noise_scale_streamflow: Option<f64>,
    /// Signal-variance share of same-day runoff in each flow (the
    /// unpredictable part under past-only forecasting).
    pub runoff_weight_current: f64,
    /// Signal-variance share of previous-day runoff (predictable from
    /// observed forcings); the rest comes from parent flows.
    pub runoff_weight_lagged: f64,
    pub seed: u64,
    pub start_date: NaiveDate,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_stations: 5,
            n_forcings: 4,
            runoff_dim: 2,
            max_lag: 1,
            n_timesteps: 5000,
            topology: Topology::Line,
            forcing_graph: ForcingGraphSpec::Chain,
            instantaneous_routing: false,
            mask_kind: MaskKind::Reachable,
            heterogeneous_runoff: false,
            noise_family: NoiseFamily::Laplace,
            noise_scale: 0.1,
            noise_scale_runoff: None,
            noise_scale_streamflow: None,
            runoff_weight_current: 0.08,
            runoff_weight_lagged: 0.35,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(1973, 10, 1).unwrap(),
        }
    }
}

impl GeneratorConfig {
    pub fn schema(&self) -> DatasetSchema {
        let forcing_roster = ["precip", "temp_min", "temp_max", "wind"];
        let forcing_names = (0..self.n_forcings)
            .map(|i| {
                forcing_roster
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("forcing_{}", i + 1))
            })
            .collect();
        DatasetSchema {
            n_stations: self.n_stations,
            n_forcings: self.n_forcings,
            runoff_dim: self.runoff_dim,
            max_lag: self.max_lag,
            n_timesteps: self.n_timesteps,
            station_ids: (0..self.n_stations).map(|k| format!("st{:02}", k + 1)).collect(),
            forcing_names,
        }
    }

    /// Direct river-network edges as (upstream, downstream) pairs.
    pub fn network_edges(&self) -> Vec<(usize, usize)> {
        match self.topology {
            Topology::Line => (0..self.n_stations.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
            Topology::Tree => (1..self.n_stations).map(|i| (i, (i - 1) / 2)).collect(),
        }
    }

    pub fn river_mask(&self) -> Array2<f64> {
        let n = self.n_stations;
        let mut mask = Array2::<f64>::eye(n);
        let edges = self.network_edges();
        for &(u, v) in &edges {
            mask[[v, u]] = 1.0;
        }
        if self.mask_kind == MaskKind::Reachable {
            // transitive closure over downstream hops
            loop {
                let mut changed = false;
                for k in 0..n {
                    for j in 0..n {
                        if mask[[k, j]] == 1.0 {
                            continue;
                        }
                        // j reaches k through any intermediate m
                        let reach = (0..n).any(|m| mask[[m, j]] == 1.0 && mask[[k, m]] == 1.0 && m != j && m != k);
                        if reach {
                            mask[[k, j]] = 1.0;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
        }
        mask
    }
}

fn deadzone_weight(rng: &mut ChaCha8Rng) -> f64 {
    let mag = 0.3 + 0.7 * rng.random::<f64>();
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn random_scalar_mlp(rng: &mut ChaCha8Rng, arity: usize, hidden: usize) -> ScalarFn {
    let w1 = Array2::from_shape_fn((hidden, arity), |_| deadzone_weight(rng));
    let b1 = Array1::from_shape_fn(hidden, |_| rng.random::<f64>() - 0.5);
    let scale = 1.0 / (hidden as f64).sqrt();
    let w2 = Array1::from_shape_fn(hidden, |_| deadzone_weight(rng) * scale);
    ScalarFn::Mlp(MlpFn { w1, b1, w2, b2: 0.0, w_skip: Array1::zeros(arity) })
}

fn random_vector_mlp(rng: &mut ChaCha8Rng, arity: usize, out_dim: usize, hidden: usize) -> VectorFn {
    let w1 = Array2::from_shape_fn((hidden, arity), |_| deadzone_weight(rng));
    let b1 = Array1::from_shape_fn(hidden, |_| rng.random::<f64>() - 0.5);
    let scale = 1.0 / (hidden as f64).sqrt();
    let w2 = Array2::from_shape_fn((out_dim, hidden), |_| deadzone_weight(rng) * scale);
    let b2 = Array1::zeros(out_dim);
    VectorFn::Mlp { w1, b1, w2, b2 }
}

fn std_of(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Build a ground-truth SCM from the generator configuration. Noise scales
/// are calibrated against each node's signal spread on a dry-run sample so
/// the relative `noise_scale` means the same thing at every node.
pub fn build_scm(config: &GeneratorConfig) -> Result<GroundTruthScm> {
    let schema = config.schema();
    schema.validate()?;
    let df = config.n_forcings;
    let n = config.n_stations;
    let dr = config.runoff_dim;
    let lag = config.max_lag;
    let mut rng = stream_rng(config.seed, Stream::ScmWeights);

    // forcing DAG
    let mut forcing_edges: Vec<(usize, usize)> = Vec::new(); // (parent, child)
    match config.forcing_graph {
        ForcingGraphSpec::Chain => {
            for i in 0..df.saturating_sub(1) {
                forcing_edges.push((i, i + 1));
            }
        }
        ForcingGraphSpec::Random { n_edges } => {
            let mut candidates: Vec<(usize, usize)> = Vec::new();
            for p in 0..df {
                for c in (p + 1)..df {
                    candidates.push((p, c));
                }
            }
            if n_edges > candidates.len() {
                return Err(Error::Config(format!(
                    "requested {n_edges} forcing edges but only {} pairs exist",
                    candidates.len()
                )));
            }
            for _ in 0..n_edges {
                let idx = rng.random_range(0..candidates.len());
                forcing_edges.push(candidates.swap_remove(idx));
            }
            forcing_edges.sort_unstable();
        }
    }
    let mut fslice = Array2::<u8>::zeros((df, df));
    for &(p, c) in &forcing_edges {
        fslice[[c, p]] = 1;
    }
    let forcing_dag = BinaryDag::new(vec![fslice], schema.forcing_names.clone(), false, 1.0)?;

    // routing DAG over (L+1) slices; lag-1 carries self persistence
    let mut slices = vec![Array2::<u8>::zeros((n, n)); lag + 1];
    let net = config.network_edges();
    for (idx, &(u, v)) in net.iter().enumerate() {
        let use_lag0 = config.instantaneous_routing && idx % 2 == 1;
        if use_lag0 {
            slices[0][[v, u]] = 1;
        } else if lag >= 1 {
            slices[1][[v, u]] = 1;
        } else {
            slices[0][[v, u]] = 1;
        }
    }
    if lag >= 1 {
        for k in 0..n {
            slices[1][[k, k]] = 1;
        }
    }
    let routing_dag = BinaryDag::new(slices, schema.station_ids.clone(), true, 1.0)?;

    // structural functions
    let forcing_fns: Vec<ScalarFn> = (0..df)
        .map(|i| {
            let parents = forcing_parents(&forcing_dag, i).len();
            if parents == 0 {
                ScalarFn::Zero
            } else {
                random_scalar_mlp(&mut rng, parents, 8)
            }
        })
        .collect();

    let runoff_fn = if config.heterogeneous_runoff {
        RunoffTruth::PerStation((0..n).map(|_| random_vector_mlp(&mut rng, df, dr, 8)).collect())
    } else {
        RunoffTruth::Shared(random_vector_mlp(&mut rng, df, dr, 8))
    };

    let runoff_lags = lag.min(1);
    let streamflow_fns: Vec<ScalarFn> = (0..n)
        .map(|k| {
            let arity = dr * (1 + runoff_lags)
                + routing_parents(&routing_dag, 0, k).len()
                + (1..=lag).map(|l| routing_parents(&routing_dag, l, k).len()).sum::<usize>();
            let mut f = random_scalar_mlp(&mut rng, arity, 8);
            if let ScalarFn::Mlp(m) = &mut f {
                m.b2 = FLOW_OFFSET;
            }
            f
        })
        .collect();

    // calibrate noise scales on a dry run
    let rel = config.noise_scale;
    let rel_r = config.noise_scale_runoff.unwrap_or(rel);
    let rel_q = config.noise_scale_streamflow.unwrap_or(rel);
    let mut scm = GroundTruthScm {
        forcing_dag,
        routing_dag,
        forcing_fns,
        runoff_fn,
        runoff_lags,
        streamflow_fns,
        noise: NoiseSpec {
            family: config.noise_family,
            forcing_scales: vec![0.0; df],
            runoff_scales: vec![0.0; dr],
            streamflow_scales: vec![0.0; n],
            warmup_scale: 0.0,
            warmup_loc: 0.0,
            seed: config.seed,
        },
    };

    let cal = 512usize;
    let order = toposort_support(&scm.forcing_dag.slice(0))
        .ok_or_else(|| Error::Structural("forcing DAG contains a cycle".into()))?;
    let mut cal_rng = stream_rng(config.seed ^ 0xCA11B, Stream::ForcingNoise);
    let mut samples = Array2::<f64>::zeros((cal, df));
    for &i in &order {
        let parents = forcing_parents(&scm.forcing_dag, i);
        if parents.is_empty() {
            scm.noise.forcing_scales[i] = 1.0;
            for s in 0..cal {
                samples[[s, i]] = draw_noise(&mut cal_rng, config.noise_family, 1.0);
            }
        } else {
            let signals: Vec<f64> = (0..cal)
                .map(|s| {
                    let x: Vec<f64> = parents.iter().map(|&j| samples[[s, j]]).collect();
                    scm.forcing_fns[i].eval(&x)
                })
                .collect();
            let scale = rel * std_of(&signals).max(1e-3);
            scm.noise.forcing_scales[i] = scale;
            for s in 0..cal {
                samples[[s, i]] = signals[s] + draw_noise(&mut cal_rng, config.noise_family, scale);
            }
        }
    }

    // runoff scales from the shared (or first-station) map on the same sample
    let mut r_out = vec![0.0; dr];
    let mut r_signals = vec![Vec::with_capacity(cal); dr];
    for s in 0..cal {
        let x: Vec<f64> = (0..df).map(|j| samples[[s, j]]).collect();
        let k = s % n;
        scm.runoff_fn.for_station(k).eval(&x, &mut r_out);
        for (c, v) in r_out.iter().enumerate() {
            r_signals[c].push(*v);
        }
    }
    for c in 0..dr {
        scm.noise.runoff_scales[c] = rel_r * std_of(&r_signals[c]).max(1e-3);
    }

    // flow-function calibration: scale input columns so same-day runoff,
    // previous-day runoff, and parent flows carry configured variance
    // shares, then set noise scales from a second rollout
    let cal_t = 256.max(4 * (lag + 2));
    let mini = GeneratorConfig { n_timesteps: cal_t, ..config.clone() };
    let mini_schema = mini.schema();
    let f_cal = sample_forcing_panel(&scm, &mini_schema, config.seed ^ 0xD1CE)?;
    let r_cal = sample_runoff(&f_cal, &scm, config.seed ^ 0xD1CE)?;
    let warm = lag.max(scm.runoff_lags);
    let q0_cal = route_streamflow(&r_cal, &scm, config.seed ^ 0xD1CE)?;
    let flows0: Vec<f64> = q0_cal.iter().skip(warm * n).copied().collect();
    let sigma_q0 = std_of(&flows0).max(1e-3);
    let mu_q0 = flows0.iter().sum::<f64>() / flows0.len() as f64;
    let mut r_mean = vec![0.0; dr];
    let mut r_std = vec![0.0; dr];
    for c in 0..dr {
        let xs: Vec<f64> = r_cal.iter().skip(c).step_by(dr).copied().collect();
        r_mean[c] = xs.iter().sum::<f64>() / xs.len() as f64;
        r_std[c] = std_of(&xs).max(1e-6);
    }
    let w_cur = config.runoff_weight_current.clamp(0.0, 1.0);
    let w_lagged = if scm.runoff_lags > 0 {
        config.runoff_weight_lagged.clamp(0.0, 1.0 - w_cur)
    } else {
        0.0
    };
    // explicit stable filter: linear feedback through parent flows stays
    // below 1 while the tanh part adds a bounded nonlinear perturbation
    for k in 0..n {
        let inst: Vec<usize> = routing_parents(&scm.routing_dag, 0, k);
        let mut lagged_flows: Vec<(usize, usize)> = Vec::new();
        for l in 1..=lag {
            for j in routing_parents(&scm.routing_dag, l, k) {
                lagged_flows.push((l, j));
            }
        }
        let n_cross = inst.len()
            + lagged_flows.iter().filter(|(_, j)| *j != k).count();
        let has_self = lagged_flows.iter().any(|(_, j)| *j == k);
        if let ScalarFn::Mlp(m) = &mut scm.streamflow_fns[k] {
            // (sigma, mu, skip coefficient in normalized units) per input
            let mut sigma = Vec::new();
            let mut mu = Vec::new();
            let mut coef = Vec::new();
            for rl in 0..=scm.runoff_lags {
                let share = if rl == 0 { w_cur } else { w_lagged };
                for c in 0..dr {
                    sigma.push(r_std[c]);
                    mu.push(r_mean[c]);
                    coef.push(0.9 * (share / dr as f64).sqrt());
                }
            }
            let self_coef = if has_self { 0.45 } else { 0.0 };
            let cross_coef = if n_cross > 0 {
                (0.75f64 - self_coef).max(0.0) / n_cross as f64
            } else {
                0.0
            };
            for _ in &inst {
                sigma.push(sigma_q0);
                mu.push(mu_q0);
                coef.push(cross_coef);
            }
            for (_, j) in &lagged_flows {
                sigma.push(sigma_q0);
                mu.push(mu_q0);
                coef.push(if *j == k { self_coef } else { cross_coef });
            }
            for u in 0..m.w1.nrows() {
                let mut shift = 0.0;
                for i in 0..coef.len() {
                    let mlp_scale = (0.5 * coef[i] + 0.08) / sigma[i];
                    m.w1[[u, i]] *= mlp_scale;
                    shift += m.w1[[u, i]] * mu[i];
                }
                m.b1[u] -= shift;
            }
            let mut base_shift = 0.0;
            for i in 0..coef.len() {
                m.w_skip[i] = coef[i] / sigma[i];
                base_shift += m.w_skip[i] * mu[i];
            }
            m.b2 -= base_shift;
        }
    }
    let q_cal = route_streamflow(&r_cal, &scm, config.seed ^ 0xD1CE)?;
    let flows: Vec<f64> = q_cal.iter().skip(warm * n).copied().collect();
    let q_std = std_of(&flows).max(1e-3);
    let q_mean = flows.iter().sum::<f64>() / flows.len() as f64;
    for k in 0..n {
        scm.noise.streamflow_scales[k] = rel_q * q_std;
    }
    scm.noise.warmup_scale = q_std;
    scm.noise.warmup_loc = q_mean;

    scm.validate()?;
    Ok(scm)
}

/// Generate a complete synthetic dataset plus its hidden ground truth.
///
/// Returns the dataset, the SCM that produced it, and the realized runoff
/// panel (the alignment target for learned embeddings).
pub fn generate_dataset(
    config: &GeneratorConfig,
) -> Result<(SpatioTemporalDataset, GroundTruthScm, Array3<f64>)> {
    let scm = build_scm(config)?;
    let schema = config.schema();
    let forcings = sample_forcing_panel(&scm, &schema, config.seed)?;
    let runoff = sample_runoff(&forcings, &scm, config.seed)?;
    let streamflow = route_streamflow(&runoff, &scm, config.seed)?;
    let mask = config.river_mask();

    // routing support must stay inside the mask
    for l in 0..scm.routing_dag.n_lags() {
        let s = scm.routing_dag.slice(l);
        for k in 0..config.n_stations {
            for j in 0..config.n_stations {
                if s[[k, j]] != 0.0 && mask[[k, j]] == 0.0 {
                    return Err(Error::Structural(format!(
                        "routing edge {j}->{k} at lag {l} falls outside the river mask"
                    )));
                }
            }
        }
    }

    let timestamps: Vec<NaiveDate> = (0..config.n_timesteps as i64)
        .map(|d| config.start_date + chrono::Duration::days(d))
        .collect();
    let dataset = SpatioTemporalDataset {
        schema,
        forcings,
        streamflow,
        river_mask: mask,
        timestamps,
    };
    dataset.validate()?;
    Ok((dataset, scm, runoff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::spearman;
    use ndarray::array;

    fn tiny_schema(n: usize, df: usize, t: usize, lag: usize) -> DatasetSchema {
        DatasetSchema {
            n_stations: n,
            n_forcings: df,
            runoff_dim: 2,
            max_lag: lag,
            n_timesteps: t,
            station_ids: (0..n).map(|k| format!("s{k}")).collect(),
            forcing_names: (0..df).map(|i| format!("f{i}")).collect(),
        }
    }

    fn noise(family: NoiseFamily, df: usize, dr: usize, n: usize, scale: f64) -> NoiseSpec {
        NoiseSpec {
            family,
            forcing_scales: vec![scale; df],
            runoff_scales: vec![scale; dr],
            streamflow_scales: vec![scale; n],
            warmup_scale: scale,
            warmup_loc: 0.0,
            seed: 0,
        }
    }

    fn two_node_scm(weight: f64, noise_scale: f64) -> GroundTruthScm {
        // f0 (root) -> f1 with a linear weight
        let fdag = BinaryDag::new(
            vec![array![[0u8, 0], [1, 0]]],
            vec!["precip".into(), "temp".into()],
            false,
            1.0,
        )
        .unwrap();
        let rdag = BinaryDag::new(
            vec![Array2::<u8>::zeros((1, 1)), Array2::<u8>::eye(1)],
            vec!["s0".into()],
            true,
            1.0,
        )
        .unwrap();
        let mut spec = noise(NoiseFamily::Laplace, 2, 2, 1, noise_scale);
        spec.forcing_scales = vec![1.0, noise_scale];
        GroundTruthScm {
            forcing_dag: fdag,
            routing_dag: rdag,
            forcing_fns: vec![
                ScalarFn::Zero,
                ScalarFn::Linear { weights: vec![weight], bias: 0.0 },
            ],
            runoff_fn: RunoffTruth::Shared(VectorFn::SelectFirst { out_dim: 2 }),
            runoff_lags: 0,
            streamflow_fns: vec![ScalarFn::Sum],
            noise: spec,
        }
    }

    #[test]
    fn zero_edge_forcings_are_independent_noise() {
        let df = 3;
        let fdag =
            BinaryDag::new(vec![Array2::<u8>::zeros((df, df))], vec!["a".into(), "b".into(), "c".into()], false, 1.0)
                .unwrap();
        let rdag = BinaryDag::new(
            vec![Array2::<u8>::zeros((1, 1)), Array2::from_shape_fn((1, 1), |_| 1u8)],
            vec!["s0".into()],
            true,
            1.0,
        )
        .unwrap();
        let scm = GroundTruthScm {
            forcing_dag: fdag,
            routing_dag: rdag,
            forcing_fns: vec![ScalarFn::Zero; df],
            runoff_fn: RunoffTruth::Shared(VectorFn::SelectFirst { out_dim: 2 }),
            runoff_lags: 0,
            streamflow_fns: vec![ScalarFn::Sum],
            noise: noise(NoiseFamily::Laplace, df, 2, 1, 1.0),
        };
        let schema = tiny_schema(1, df, 6000, 1);
        let panel = sample_forcing_panel(&scm, &schema, 3).unwrap();
        // empirical off-diagonal covariance shrinks toward zero
        let t = schema.n_timesteps as f64;
        for a in 0..df {
            for b in (a + 1)..df {
                let ma: f64 = (0..schema.n_timesteps).map(|i| panel[[i, 0, a]]).sum::<f64>() / t;
                let mb: f64 = (0..schema.n_timesteps).map(|i| panel[[i, 0, b]]).sum::<f64>() / t;
                let cov: f64 = (0..schema.n_timesteps)
                    .map(|i| (panel[[i, 0, a]] - ma) * (panel[[i, 0, b]] - mb))
                    .sum::<f64>()
                    / t;
                assert!(cov.abs() < 0.1, "cov({a},{b}) = {cov}");
            }
        }
    }

    #[test]
    fn zero_noise_linear_edge_propagates_exactly() {
        let scm = two_node_scm(-0.5, 0.0);
        let schema = tiny_schema(1, 2, 50, 1);
        let panel = sample_forcing_panel(&scm, &schema, 11).unwrap();
        for t in 0..50 {
            let precip = panel[[t, 0, 0]];
            let temp = panel[[t, 0, 1]];
            assert_eq!(temp, -0.5 * precip);
        }
    }

    #[test]
    fn chain_dag_parents_and_children_are_rank_correlated() {
        let config = GeneratorConfig {
            n_stations: 1,
            n_timesteps: 2000,
            mask_kind: MaskKind::Direct,
            ..GeneratorConfig::default()
        };
        let scm = build_scm(&config).unwrap();
        let schema = config.schema();
        let panel = sample_forcing_panel(&scm, &schema, 5).unwrap();
        for edge in 0..3 {
            let xs: Vec<f64> = (0..2000).map(|t| panel[[t, 0, edge]]).collect();
            let ys: Vec<f64> = (0..2000).map(|t| panel[[t, 0, edge + 1]]).collect();
            let rho = spearman(&xs, &ys).unwrap();
            assert!(rho.abs() > 0.2, "edge {edge}: spearman {rho}");
        }
    }

    #[test]
    fn runoff_identity_zero_noise_matches_forcings() {
        let mut scm = two_node_scm(0.5, 0.0);
        scm.noise.runoff_scales = vec![0.0, 0.0];
        let schema = tiny_schema(1, 2, 30, 1);
        let f = sample_forcing_panel(&scm, &schema, 2).unwrap();
        let r = sample_runoff(&f, &scm, 2).unwrap();
        for t in 0..30 {
            assert_eq!(r[[t, 0, 0]], f[[t, 0, 0]]);
            assert_eq!(r[[t, 0, 1]], f[[t, 0, 1]]);
        }
    }

    #[test]
    fn runoff_noise_median_is_centred() {
        let mut scm = two_node_scm(0.5, 0.0);
        scm.noise.runoff_scales = vec![1.0, 1.0];
        let forcings = Array3::<f64>::zeros((12_000, 1, 2));
        let r = sample_runoff(&forcings, &scm, 9).unwrap();
        for c in 0..2 {
            let mut xs: Vec<f64> = (0..12_000).map(|t| r[[t, 0, c]]).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = xs[xs.len() / 2];
            assert!(median.abs() < 0.1, "median {median}");
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let config = GeneratorConfig { n_timesteps: 200, ..GeneratorConfig::default() };
        let (d1, _, r1) = generate_dataset(&config).unwrap();
        let (d2, _, r2) = generate_dataset(&config).unwrap();
        assert_eq!(d1.forcings, d2.forcings);
        assert_eq!(d1.streamflow, d2.streamflow);
        assert_eq!(r1, r2);
    }

    #[test]
    fn single_station_streamflow_sums_runoff() {
        let mut scm = two_node_scm(0.5, 0.0);
        scm.routing_dag.slices[1][0][0] = 0; // no persistence: runoff only
        scm.noise.runoff_scales = vec![0.0, 0.0];
        scm.noise.streamflow_scales = vec![0.0];
        scm.noise.warmup_scale = 0.0;
        scm.streamflow_fns = vec![ScalarFn::Sum];
        let schema = tiny_schema(1, 2, 40, 1);
        let f = sample_forcing_panel(&scm, &schema, 4).unwrap();
        let r = sample_runoff(&f, &scm, 4).unwrap();
        let q = route_streamflow(&r, &scm, 4).unwrap();
        for t in 1..40 {
            let want = r[[t, 0, 0]] + r[[t, 0, 1]];
            assert!((q[[t, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lag1_edge_delays_impulse_by_one_step() {
        // two stations, lag-1 edge 0 -> 1, station 1 = pure relay
        let rdag = BinaryDag::new(
            vec![Array2::<u8>::zeros((2, 2)), array![[0u8, 0], [1, 0]]],
            vec!["s0".into(), "s1".into()],
            true,
            1.0,
        )
        .unwrap();
        let fdag = BinaryDag::new(vec![Array2::<u8>::zeros((1, 1))], vec!["f0".into()], false, 1.0).unwrap();
        let scm = GroundTruthScm {
            forcing_dag: fdag,
            routing_dag: rdag,
            forcing_fns: vec![ScalarFn::Zero],
            runoff_fn: RunoffTruth::Shared(VectorFn::SelectFirst { out_dim: 1 }),
            runoff_lags: 0,
            streamflow_fns: vec![
                // station 0: its own runoff
                ScalarFn::Linear { weights: vec![1.0, 0.0], bias: 0.0 },
                // station 1: upstream flow at lag 1 only (inputs: runoff, q0[t-1], q1[t-1])
                ScalarFn::Linear { weights: vec![0.0, 1.0, 0.0], bias: 0.0 },
            ],
            noise: noise(NoiseFamily::Laplace, 1, 1, 2, 0.0),
        };
        // impulse in station 0's runoff at t = 5
        let mut runoff = Array3::<f64>::zeros((12, 2, 1));
        runoff[[5, 0, 0]] = 1.0;
        let q = route_streamflow(&runoff, &scm, 0).unwrap();
        for t in 1..12 {
            let expect = if t == 6 { 1.0 } else { 0.0 };
            assert_eq!(q[[t, 1]], expect, "station 1 at t={t}");
        }
        assert_eq!(q[[5, 0]], 1.0);
    }

    #[test]
    fn line_network_peak_cross_correlation_at_lag_one() {
        let config = GeneratorConfig {
            n_timesteps: 3000,
            noise_scale: 0.05,
            runoff_weight_current: 0.05,
            runoff_weight_lagged: 0.1,
            ..GeneratorConfig::default()
        };
        let (data, _, _) = generate_dataset(&config).unwrap();
        // adjacent stations: correlation of q[k] at t with q[k+1] at t+lag
        for k in 0..2 {
            let a: Vec<f64> = (1..2990).map(|t| data.streamflow[[t, k]]).collect();
            let mut best_lag = 0usize;
            let mut best = f64::MIN;
            for lag in 0..4usize {
                let b: Vec<f64> = (1..2990).map(|t| data.streamflow[[t + lag, k + 1]]).collect();
                let c = crate::eval::pearson(&a, &b).unwrap().abs();
                eprintln!("pair {k}->{} lag {lag}: {c:.4}", k + 1);
                if c > best {
                    best = c;
                    best_lag = lag;
                }
            }
            assert_eq!(best_lag, 1, "station pair {k}->{}", k + 1);
        }
    }

    #[test]
    fn default_config_generates_valid_dataset() {
        let config = GeneratorConfig { n_timesteps: 400, ..GeneratorConfig::default() };
        let (data, scm, runoff) = generate_dataset(&config).unwrap();
        data.validate().unwrap();
        assert!(scm.forcing_dag.lag0_is_acyclic());
        assert!(scm.routing_dag.lag0_is_acyclic());
        assert_eq!(runoff.dim(), (400, 5, 2));
        // routing support inside mask
        for l in 0..scm.routing_dag.n_lags() {
            let s = scm.routing_dag.slice(l);
            for k in 0..5 {
                for j in 0..5 {
                    assert!(s[[k, j]] <= data.river_mask[[k, j]]);
                }
            }
        }
    }

    #[test]
    fn oracle_identity_on_trivial_and_weighted_cases() {
        let zero = Array2::<f64>::zeros((2, 2));
        let (jm, jg) = linear_scm_oracle(&zero).unwrap();
        assert_eq!(jm, Array2::<f64>::eye(2));
        assert_eq!(jg, zero);

        let a = array![[0.0, 0.0], [0.5, 0.0]];
        let (jm, jg) = linear_scm_oracle(&a).unwrap();
        assert_eq!(jm, array![[1.0, 0.0], [0.5, 1.0]]);
        assert_eq!(jg, a);
    }

    #[test]
    fn oracle_recovers_adjacency_for_random_lower_triangular() {
        let mut rng = stream_rng(77, Stream::ScmWeights);
        for _ in 0..100 {
            let d = 2 + rng.random_range(0..5);
            let mut a = Array2::<f64>::zeros((d, d));
            for i in 0..d {
                for j in 0..i {
                    if rng.random::<f64>() < 0.5 {
                        a[[i, j]] = deadzone_weight(&mut rng);
                    }
                }
            }
            let (_, jg) = linear_scm_oracle(&a).unwrap();
            let err = (&jg - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "max error {err}");
        }
    }

    #[test]
    fn oracle_rejects_non_triangular() {
        let a = array![[0.0, 0.3], [0.5, 0.0]];
        assert!(matches!(linear_scm_oracle(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn cycle_in_forcing_dag_is_a_structural_error() {
        let mut scm = two_node_scm(0.5, 0.1);
        // force a cycle by hand
        scm.forcing_dag.slices[0][0][1] = 1;
        scm.forcing_dag.slices[0][1][0] = 1;
        let schema = tiny_schema(1, 2, 10, 1);
        assert!(matches!(
            sample_forcing_panel(&scm, &schema, 0),
            Err(Error::Structural(_))
        ));
    }
}
