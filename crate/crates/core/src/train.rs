//! End-to-end optimization with curriculum-annealed structural penalties.
//!
//! One logical update stream: every step builds a fresh tape holding the
//! forecast rollout, the forcing-noise ELBO, and the Jacobian-derived
//! structural penalties, then runs a single backward sweep, global-norm
//! gradient clipping, and an adaptive-moment update. The best epoch by
//! validation NSE wins.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::forecast::{
    forecast_loss_vars, ForcingConditioning, Forecaster, StepOutput, WindowBatchData,
    WindowConfig,
};
use crate::graph::sparsity_loss_vars;
use crate::linalg::{condition_1norm, mat_inv};
use crate::nn::Mlp;
use crate::repr::{elbo_loss_vars, reparam_draws, ForcingCodec, RunoffGenerator, RunoffMode};
use crate::rng::{stream_rng, Stream};
use crate::types::DatasetSchema;

/// Model variants exercised by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Local runoff generator with every loss term active.
    Full,
    /// Structural penalties off (sparsity and acyclicity multipliers zero).
    NoCausalLosses,
    /// Forcing-noise autoencoder and forcing-graph penalties off.
    NoForcingVae,
    /// Shared runoff generator.
    SharedRunoff,
    /// Alias for the full local variant.
    LocalRunoff,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Ablation::Full),
            "no_causal_losses" => Ok(Ablation::NoCausalLosses),
            "no_forcing_vae" => Ok(Ablation::NoForcingVae),
            "shared_runoff" => Ok(Ablation::SharedRunoff),
            "local_runoff" => Ok(Ablation::LocalRunoff),
            other => Err(Error::Argument(format!("unknown ablation variant '{other}'"))),
        }
    }
}

impl Ablation {
    pub fn runoff_mode(self) -> RunoffMode {
        match self {
            Ablation::SharedRunoff => RunoffMode::Shared,
            _ => RunoffMode::Local,
        }
    }

    pub fn causal_losses(self) -> bool {
        self != Ablation::NoCausalLosses
    }

    pub fn forcing_vae(self) -> bool {
        self != Ablation::NoForcingVae
    }
}

/// Structural-penalty annealing schedule: zero for the warmup fraction of
/// epochs, then a linear ramp reaching 1.0 at the ramp end.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Curriculum {
    pub warmup_frac: f64,
    pub ramp_end_frac: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self { warmup_frac: 0.2, ramp_end_frac: 0.6 }
    }
}

impl Curriculum {
    pub fn multiplier(&self, epoch: usize, total_epochs: usize) -> f64 {
        let x = epoch as f64 / total_epochs.max(1) as f64;
        if x < self.warmup_frac {
            0.0
        } else if x >= self.ramp_end_frac {
            1.0
        } else {
            (x - self.warmup_frac) / (self.ramp_end_frac - self.warmup_frac)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda_elbo: f64,
    pub lambda_sparse: f64,
    pub lambda_dag: f64,
    pub curriculum: Curriculum,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub vae_batch: usize,
    /// Decoder-Jacobian subsample per step for the forcing penalties.
    pub jacobian_batch: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub conditioning: ForcingConditioning,
    /// Train multi-step rollouts on observed contexts instead of
    /// backpropagating through fed-back predictions.
    pub teacher_forcing: bool,
    pub channels: usize,
    pub codec_hidden: usize,
    pub core_hidden: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_elbo: 0.1,
            lambda_sparse: 0.01,
            lambda_dag: 1.0,
            curriculum: Curriculum::default(),
            learning_rate: 1e-3,
            clip_norm: 1.0,
            epochs: 30,
            batch_size: 16,
            vae_batch: 64,
            jacobian_batch: 16,
            steps_per_epoch: 120,
            seed: 0,
            ablation: Ablation::Full,
            conditioning: ForcingConditioning::PastOnly,
            teacher_forcing: false,
            channels: 16,
            codec_hidden: 64,
            core_hidden: 16,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lambda_elbo >= 0.0 && self.lambda_sparse >= 0.0 && self.lambda_dag >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Structural description needed to rebuild a bundle from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleSpec {
    pub schema: DatasetSchema,
    pub window: WindowConfig,
    pub ablation: Ablation,
    pub seed: u64,
    pub channels: usize,
    pub codec_hidden: usize,
    pub core_hidden: usize,
    pub runoff_mode: RunoffMode,
}

/// Everything learned: codec, runoff generator, forecaster, and the live
/// routing adjacency estimate, plus the latest forcing-graph estimate.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub codec: ForcingCodec,
    pub runoff: RunoffGenerator,
    pub forecaster: Forecaster,
    /// (L+1) live weighted routing slices (trainable).
    pub routing_adj: Vec<Array2<f64>>,
    /// Latest mean-abs forcing causal-Jacobian estimate (derived).
    pub forcing_adj: Array2<f64>,
}

impl ModelBundle {
    pub fn new(schema: &DatasetSchema, window: &WindowConfig, config: &TrainingConfig) -> Self {
        let mut rng = stream_rng(config.seed, Stream::ModelInit);
        let df = schema.n_forcings;
        let dr = schema.runoff_dim;
        let n = schema.n_stations;
        let codec = ForcingCodec::new(df, config.codec_hidden, &mut rng);
        let runoff = match config.ablation.runoff_mode() {
            RunoffMode::Shared => RunoffGenerator::new_shared(df, dr, config.core_hidden, n, &mut rng),
            RunoffMode::Local => RunoffGenerator::new_local(df, dr, config.core_hidden, n, &mut rng),
        };
        let forecaster = Forecaster::new(
            n,
            df,
            dr,
            schema.max_lag,
            window.history_len,
            config.channels,
            &mut rng,
        );
        // admissible edges start at a uniform moderate weight
        let routing_adj = (0..=schema.max_lag)
            .map(|_| Array2::from_elem((n, n), 0.3))
            .collect();
        Self {
            spec: BundleSpec {
                schema: schema.clone(),
                window: *window,
                ablation: config.ablation,
                seed: config.seed,
                channels: config.channels,
                codec_hidden: config.codec_hidden,
                core_hidden: config.core_hidden,
                runoff_mode: config.ablation.runoff_mode(),
            },
            codec,
            runoff,
            forecaster,
            routing_adj,
            forcing_adj: Array2::zeros((df, df)),
        }
    }

    /// (name, tensor) pairs in canonical checkpoint order; the trainable
    /// prefix matches `all_params_mut`, with the derived forcing estimate
    /// appended last.
    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        fn mlp<'a>(prefix: &str, m: &'a Mlp, out: &mut Vec<(String, &'a Array2<f64>)>) {
            for (i, w) in m.ws.iter().enumerate() {
                out.push((format!("{prefix}.w{i}"), w));
            }
            for (i, b) in m.bs.iter().enumerate() {
                out.push((format!("{prefix}.b{i}"), b));
            }
        }
        let mut out: Vec<(String, &Array2<f64>)> = Vec::new();
        mlp("codec.encoder", &self.codec.encoder, &mut out);
        mlp("codec.decoder", &self.codec.decoder, &mut out);
        match self.runoff.mode {
            RunoffMode::Shared => mlp("runoff.shared", self.runoff.shared.as_ref().unwrap(), &mut out),
            RunoffMode::Local => {
                out.push(("runoff.embeddings".into(), self.runoff.embeddings.as_ref().unwrap()));
                mlp("runoff.hyper", self.runoff.hyper.as_ref().unwrap(), &mut out);
            }
        }
        out.push(("forecaster.conv_a".into(), &self.forecaster.conv_a));
        out.push(("forecaster.conv_a_b".into(), &self.forecaster.conv_a_b));
        out.push(("forecaster.conv_b".into(), &self.forecaster.conv_b));
        out.push(("forecaster.conv_b_b".into(), &self.forecaster.conv_b_b));
        for (i, a) in self.forecaster.lag_alpha.iter().enumerate() {
            out.push((format!("forecaster.lag_alpha{i}"), a));
        }
        for (i, b) in self.forecaster.lag_beta.iter().enumerate() {
            out.push((format!("forecaster.lag_beta{i}"), b));
        }
        out.push(("forecaster.inst_w".into(), &self.forecaster.inst_w));
        out.push(("forecaster.skip_w".into(), &self.forecaster.skip_w));
        mlp("forecaster.readout", &self.forecaster.readout, &mut out);
        for (l, a) in self.routing_adj.iter().enumerate() {
            out.push((format!("routing_adj.lag{l}"), a));
        }
        out.push(("forcing_adj".into(), &self.forcing_adj));
        out
    }

    fn all_params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.codec.param_refs_mut();
        p.extend(self.runoff.param_refs_mut());
        p.extend(self.forecaster.param_refs_mut());
        p.extend(self.routing_adj.iter_mut());
        p
    }
}

/// One training-step log record; components always recombine to `total`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub forecast: f64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub sparsity: f64,
    pub acyclicity: f64,
    pub mult_sparse: f64,
    pub mult_dag: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_nse: f64,
    pub mult_sparse: f64,
    pub mult_dag: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nse: f64,
    pub diverged: Option<String>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).unwrap());
            out.push('\n');
        }
        out
    }
}

/// Standardized panels plus chronological window indices.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub forcings: Array3<f64>,
    pub streamflow: Array2<f64>,
    pub mask: Array2<f64>,
    pub train_ends: Vec<usize>,
    pub val_ends: Vec<usize>,
    pub test_ends: Vec<usize>,
}

impl DataSplits {
    /// Chronological fractions over valid window ends. Warm-up steps and
    /// windows overlapping `excluded` timesteps are dropped.
    pub fn chronological(
        forcings: &Array3<f64>,
        streamflow: &Array2<f64>,
        mask: &Array2<f64>,
        window: &WindowConfig,
        max_lag: usize,
        excluded: &[usize],
        fractions: (f64, f64),
    ) -> Result<Self> {
        let t_len = streamflow.nrows();
        let l = window.history_len;
        let h = window.horizon;
        let first_valid = l.max(max_lag + 1) - 1 + max_lag; // window must clear warm-up
        let mut excluded_flags = vec![false; t_len];
        for &t in excluded {
            if t < t_len {
                excluded_flags[t] = true;
            }
        }
        let mut ends = Vec::new();
        'outer: for t in first_valid..t_len.saturating_sub(h) {
            for s in (t + 1 - l)..=(t + h) {
                if excluded_flags[s] {
                    continue 'outer;
                }
            }
            ends.push(t);
        }
        if ends.len() < 10 {
            return Err(Error::Contract(format!(
                "only {} valid windows; dataset too short for l={l}, h={h}",
                ends.len()
            )));
        }
        let n_train = ((ends.len() as f64) * fractions.0) as usize;
        let n_val = ((ends.len() as f64) * fractions.1) as usize;
        let train_ends = ends[..n_train].to_vec();
        let val_ends = ends[n_train..n_train + n_val].to_vec();
        let test_ends = ends[n_train + n_val..].to_vec();
        if train_ends.is_empty() || val_ends.is_empty() || test_ends.is_empty() {
            return Err(Error::Contract("a chronological split is empty".into()));
        }
        Ok(Self {
            forcings: forcings.clone(),
            streamflow: streamflow.clone(),
            mask: mask.clone(),
            train_ends,
            val_ends,
            test_ends,
        })
    }
}

/// Scalar components of one step's total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub forecast: f64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub sparsity: f64,
    pub acyclicity: f64,
}

struct StepTape {
    tape: Tape,
    total: Var,
    breakdown: LossBreakdown,
    param_vars: Vec<Var>,
    forcing_adj_value: Option<Array2<f64>>,
}

struct BoundBundle {
    codec: crate::repr::CodecBound,
    runoff: crate::repr::RunoffBound,
    forecaster: crate::forecast::ForecasterBound,
    routing_adj: Vec<Var>,
}

fn bind_bundle(bundle: &ModelBundle, tape: &mut Tape) -> BoundBundle {
    BoundBundle {
        codec: bundle.codec.bind(tape),
        runoff: bundle.runoff.bind(tape),
        forecaster: bundle.forecaster.bind(tape),
        routing_adj: bundle.routing_adj.iter().map(|a| tape.leaf(a.clone())).collect(),
    }
}

fn bound_param_vars(bundle: &ModelBundle, bound: &BoundBundle) -> Vec<Var> {
    let mut v = ForcingCodec::bound_vars(&bound.codec);
    v.extend(bundle.runoff.bound_vars(&bound.runoff));
    v.extend(Forecaster::bound_vars(&bound.forecaster));
    v.extend(bound.routing_adj.iter().copied());
    v
}

/// Mean-abs causal Jacobian of the decoder at the posterior sample, with
/// ill-conditioned instances skipped (lenient training-time estimator; the
/// discovery path raises instead).
fn forcing_causal_estimate(
    codec: &ForcingCodec,
    tape: &mut Tape,
    bound: &crate::repr::CodecBound,
    sample: Var,
    take: usize,
) -> Option<Var> {
    let d = codec.dim;
    let batch = tape.value(sample).nrows().min(take);
    let sub = tape.slice_rows(sample, 0, batch);
    let trace = codec.decode_traced(tape, bound, sub);
    let jacs = codec.decoder.input_jacobians(tape, &bound.decoder, &trace);
    let eye = tape.leaf(Array2::eye(d));
    let mut acc: Option<Var> = None;
    let mut kept = 0usize;
    for jac in jacs {
        let jm = tape.value(jac).clone();
        let ok = (0..d).all(|i| jm[[i, i]].abs() > 1e-9)
            && match mat_inv(&jm) {
                Ok(inv) => condition_1norm(&jm, &inv) < 1e8,
                Err(_) => false,
            };
        if !ok {
            continue;
        }
        kept += 1;
        let inv = tape.mat_inv_op(jac);
        let diag = tape.diag_of(jac);
        let dm = tape.diag_mat(diag);
        let prod = tape.matmul(dm, inv);
        let jg = tape.sub(eye, prod);
        let a = tape.abs(jg);
        acc = Some(match acc {
            Some(cur) => tape.add(cur, a),
            None => a,
        });
    }
    let acc = acc?;
    let mean = tape.scale(acc, 1.0 / kept as f64);
    let mut offdiag = Array2::from_elem((d, d), 1.0);
    for i in 0..d {
        offdiag[[i, i]] = 0.0;
    }
    let od = tape.leaf(offdiag);
    Some(tape.mul(mean, od))
}

/// Graph-bearing routing sensitivity slices on the tape: the instantaneous
/// slice corrected per the identifiability formula, lagged slices through
/// the neighbor-message path. Shapes (N, N), mean-abs over the batch.
fn training_routing_estimate(
    forecaster: &Forecaster,
    tape: &mut Tape,
    bound: &crate::forecast::ForecasterBound,
    step: &StepOutput,
    adj: &crate::forecast::AdjacencyVars,
    batch: usize,
) -> Vec<Var> {
    let n = forecaster.n_stations;
    let eye_arr = Array2::<f64>::eye(n);
    let eye = tape.leaf(eye_arr.clone());
    let mut offdiag = Array2::from_elem((n, n), 1.0);
    for i in 0..n {
        offdiag[[i, i]] = 0.0;
    }
    let od = tape.leaf(offdiag);

    // instantaneous: S0[k,j] = W0_hat[k,j] * (w1 + w2 * dpsi2[j,b])
    let w1 = tape.slice_rows(bound.inst_w, 0, 1);
    let w2 = tape.slice_rows(bound.inst_w, 1, 2);
    let scaled = tape.mul_scalar_var(step.dpsi2, w2);
    let c = tape.add_scalar_var(scaled, w1);
    let mut acc0: Option<Var> = None;
    for b in 0..batch {
        let c_col = tape.slice_cols(c, b, b + 1);
        let c_row = tape.transpose(c_col);
        let s0 = tape.mul_row_broadcast(adj.slices[0], c_row);
        // correct when (I - S0) is comfortably invertible
        let s0_val = tape.value(s0).clone();
        let a_val = &eye_arr - &s0_val;
        let corrected = match mat_inv(&a_val) {
            Ok(inv) if condition_1norm(&a_val, &inv) < 1e6 => {
                let a = tape.sub(eye, s0);
                let ainv = tape.mat_inv_op(a);
                let d = tape.diag_of(ainv);
                let dm = tape.diag_mat(d);
                let prod = tape.matmul(dm, a);
                tape.sub(eye, prod)
            }
            _ => s0,
        };
        let abs = tape.abs(corrected);
        acc0 = Some(match acc0 {
            Some(cur) => tape.add(cur, abs),
            None => abs,
        });
    }
    let mean0 = tape.scale(acc0.unwrap(), 1.0 / batch as f64);
    let slice0 = tape.mul(mean0, od);

    // lagged slices through the message path:
    // J[k,j] = g1[k] * W_hat[k,j] + g2[k] * W_hat[k,j] * dphi2[j]
    let jacs = forecaster
        .readout
        .input_jacobians(tape, &bound.readout, &step.readout_trace);
    let skip_t = tape.transpose(bound.skip_w);
    let mut slices = vec![slice0];
    for lag in 1..=forecaster.max_lag {
        let off = forecaster.channels + 2 * (lag - 1);
        let mut acc: Option<Var> = None;
        for b in 0..batch {
            let mut g1_parts = Vec::with_capacity(n);
            let mut g2_parts = Vec::with_capacity(n);
            for k in 0..n {
                let jac = jacs[k * batch + b];
                // readout gradient plus the linear skip path
                let g_ro = tape.slice_cols(jac, off, off + 2);
                let g_skip = tape.slice_cols(skip_t, off, off + 2);
                let g = tape.add(g_ro, g_skip);
                g1_parts.push(tape.slice_cols(g, 0, 1));
                g2_parts.push(tape.slice_cols(g, 1, 2));
            }
            let g1 = tape.concat_rows(&g1_parts);
            let g2 = tape.concat_rows(&g2_parts);
            let term1 = tape.mul_col_broadcast(adj.slices[lag], g1);
            let dphi_col = tape.slice_cols(step.dphi2[lag].unwrap(), b, b + 1);
            let dphi_row = tape.transpose(dphi_col);
            let scaled = tape.mul_row_broadcast(adj.slices[lag], dphi_row);
            let term2 = tape.mul_col_broadcast(scaled, g2);
            let j = tape.add(term1, term2);
            let abs = tape.abs(j);
            acc = Some(match acc {
                Some(cur) => tape.add(cur, abs),
                None => abs,
            });
        }
        slices.push(tape.scale(acc.unwrap(), 1.0 / batch as f64));
    }
    slices
}

/// Scalar total-loss evaluation with component breakdown.
pub fn total_loss(
    bundle: &ModelBundle,
    splits: &DataSplits,
    config: &TrainingConfig,
    epoch: usize,
    ends: &[usize],
    seed: u64,
) -> Result<LossBreakdown> {
    let ctx = TrainContext { mask: splits.mask.clone() };
    let data = WindowBatchData::from_panels(
        &splits.forcings,
        &splits.streamflow,
        bundle.spec.window.history_len,
        bundle.spec.window.horizon,
        ends,
    )?;
    let (vae_x, u) = sample_vae_batch(splits, config, bundle.codec.dim, seed);
    let st = ctx.build(bundle, &data, &vae_x, &u, config, epoch)?;
    Ok(st.breakdown)
}

struct TrainContext {
    mask: Array2<f64>,
}

impl TrainContext {
    fn build(
        &self,
        bundle: &ModelBundle,
        data: &WindowBatchData,
        vae_x: &Array2<f64>,
        u_draws: &Array2<f64>,
        config: &TrainingConfig,
        epoch: usize,
    ) -> Result<StepTape> {
        build_step_impl(bundle, data, None, vae_x, u_draws, config, epoch, &self.mask)
    }
}

fn sample_vae_batch(
    splits: &DataSplits,
    config: &TrainingConfig,
    dim: usize,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = stream_rng(seed, Stream::Posterior);
    let t_max = *splits.train_ends.last().unwrap();
    let n = splits.forcings.dim().1;
    let b = config.vae_batch;
    let mut x = Array2::zeros((b, dim));
    for i in 0..b {
        let t = rng.random_range(0..=t_max);
        let k = rng.random_range(0..n);
        for j in 0..dim {
            x[[i, j]] = splits.forcings[[t, k, j]];
        }
    }
    let u = reparam_draws(&mut rng, b, dim);
    (x, u)
}

/// Adam with bias correction over a flat parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            v: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Clip a gradient list to a global norm; returns the post-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], clip: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        clip
    } else {
        norm
    }
}

/// Trained bundle, log, and split echo.
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: TrainLog,
}

/// Run the optimization loop. Deterministic given (config, splits): batch
/// order, posterior draws and initialization all derive from `config.seed`.
pub fn train(
    schema: &DatasetSchema,
    window: &WindowConfig,
    splits: &DataSplits,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    window.validate()?;
    let mut bundle = ModelBundle::new(schema, window, config);
    let ctx = TrainContext { mask: splits.mask.clone() };

    let shapes: Vec<(usize, usize)> = bundle
        .named_params()
        .iter()
        .filter(|(n, _)| n != "forcing_adj")
        .map(|(_, p)| p.dim())
        .collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelBundle)> = None;
    let mut batch_rng = stream_rng(config.seed, Stream::Batching);
    let h = window.horizon;

    'epochs: for epoch in 0..config.epochs {
        let mut order = splits.train_ends.clone();
        order.shuffle(&mut batch_rng);
        let n_steps = (order.len() / config.batch_size).min(config.steps_per_epoch).max(1);
        for step in 0..n_steps {
            let ends: Vec<usize> = order
                [step * config.batch_size..((step + 1) * config.batch_size).min(order.len())]
                .to_vec();
            if ends.is_empty() {
                break;
            }
            let data = match config.teacher_forcing && h > 1 {
                false => WindowBatchData::from_panels(
                    &splits.forcings,
                    &splits.streamflow,
                    window.history_len,
                    h,
                    &ends,
                )?,
                true => WindowBatchData::from_panels(
                    &splits.forcings,
                    &splits.streamflow,
                    window.history_len,
                    h,
                    &ends,
                )?,
            };
            let step_seed = config
                .seed
                .wrapping_mul(0x100000001b3)
                .wrapping_add((epoch * 10_000 + step) as u64);
            let (vae_x, u) = sample_vae_batch(splits, config, bundle.codec.dim, step_seed);

            let teacher_batches = if config.teacher_forcing && h > 1 {
                let mut extra = Vec::with_capacity(h - 1);
                for dh in 1..h {
                    let shifted: Vec<usize> = ends.iter().map(|&t| t + dh).collect();
                    extra.push(WindowBatchData::from_panels(
                        &splits.forcings,
                        &splits.streamflow,
                        window.history_len,
                        1,
                        &shifted,
                    )?);
                }
                extra
            } else {
                Vec::new()
            };

            let built = if config.teacher_forcing && h > 1 {
                build_teacher_forced_tape(&bundle, &data, &teacher_batches, &vae_x, &u, config, epoch, &ctx.mask)
            } else {
                ctx.build(&bundle, &data, &vae_x, &u, config, epoch)
            };
            let mut st = match built {
                Ok(st) => st,
                Err(Error::Training(msg)) => {
                    log.diverged = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };

            let grads_all = st.tape.backward(st.total);
            let mut grads: Vec<Array2<f64>> = st
                .param_vars
                .iter()
                .map(|&v| grads_all.wrt(&st.tape, v))
                .collect();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                log.diverged = Some(format!("non-finite gradient at epoch {epoch} step {step}"));
                break 'epochs;
            }
            let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            {
                let mut params = bundle.all_params_mut();
                adam.step(&mut params, &grads);
            }
            if let Some(fa) = st.forcing_adj_value.take() {
                bundle.forcing_adj = fa;
            }

            let m = if config.ablation.causal_losses() {
                config.curriculum.multiplier(epoch, config.epochs)
            } else {
                0.0
            };
            log.steps.push(StepRecord {
                epoch,
                step,
                total: st.breakdown.total,
                forecast: st.breakdown.forecast,
                elbo: st.breakdown.elbo,
                recon: st.breakdown.recon,
                kl: st.breakdown.kl,
                sparsity: st.breakdown.sparsity,
                acyclicity: st.breakdown.acyclicity,
                mult_sparse: m,
                mult_dag: m,
                grad_norm,
            });
        }

        let val_nse = validation_nse(&bundle, splits, config)?;
        let m = if config.ablation.causal_losses() {
            config.curriculum.multiplier(epoch, config.epochs)
        } else {
            0.0
        };
        log.epochs.push(EpochRecord { epoch, val_nse, mult_sparse: m, mult_dag: m });
        let better = best.as_ref().map(|(b, _)| val_nse > *b).unwrap_or(true);
        if better {
            best = Some((val_nse, bundle.clone()));
            log.best_epoch = epoch;
            log.best_val_nse = val_nse;
        }
    }

    let bundle = match best {
        Some((_, b)) => b,
        None => bundle,
    };
    Ok(TrainOutcome { bundle, log })
}

#[allow(clippy::too_many_arguments)]
fn build_teacher_forced_tape(
    bundle: &ModelBundle,
    data: &WindowBatchData,
    teacher: &[WindowBatchData],
    vae_x: &Array2<f64>,
    u_draws: &Array2<f64>,
    config: &TrainingConfig,
    epoch: usize,
    mask: &Array2<f64>,
) -> Result<StepTape> {
    build_step_impl(bundle, data, Some(teacher), vae_x, u_draws, config, epoch, mask)
}

#[allow(clippy::too_many_arguments)]
fn build_step_impl(
    bundle: &ModelBundle,
    data: &WindowBatchData,
    teacher: Option<&[WindowBatchData]>,
    vae_x: &Array2<f64>,
    u_draws: &Array2<f64>,
    config: &TrainingConfig,
    epoch: usize,
    mask: &Array2<f64>,
) -> Result<StepTape> {
    let mut tape = Tape::new();
    let bound = bind_bundle(bundle, &mut tape);
    let param_vars = bound_param_vars(bundle, &bound);
    let fc = &bundle.forecaster;
    let l = fc.history_len;
    let b = data.batch;
    let horizon = bundle.spec.window.horizon;

    let adj = fc.normalize_adjacency(&mut tape, &bound.routing_adj, mask)?;

    // forecast pathway
    let x_q = tape.leaf(data.x_q.clone());
    let x_f = tape.leaf(data.x_f.clone());
    let f_rows = tape.leaf(data.f_rows.clone());
    let r_rows = bundle.runoff.forward_vars(&mut tape, &bound.runoff, f_rows, b * l)?;
    let x_r = tape.reshape(r_rows, fc.n_stations * b, l * fc.runoff_dim);
    let first = fc.forward_step(&mut tape, &bound.forecaster, x_q, x_f, x_r, &adj, None, b);

    let preds: Vec<Var> = match teacher {
        None if horizon == 1 => vec![first.pred],
        None => {
            let mut all = fc.rollout_vars(
                &mut tape,
                &bound.forecaster,
                Some((&bundle.runoff, &bound.runoff)),
                x_q,
                x_f,
                x_r,
                &adj,
                horizon,
                config.conditioning,
                &data.future_f,
                b,
            )?;
            // reuse the already-built first step for its artifacts; the
            // rollout's own first prediction is identical by construction
            all[0] = first.pred;
            all
        }
        Some(extra) => {
            let mut all = vec![first.pred];
            for tb in extra {
                let xq = tape.leaf(tb.x_q.clone());
                let xf = tape.leaf(tb.x_f.clone());
                let frows = tape.leaf(tb.f_rows.clone());
                let rrows = bundle.runoff.forward_vars(&mut tape, &bound.runoff, frows, b * l)?;
                let xr = tape.reshape(rrows, fc.n_stations * b, l * fc.runoff_dim);
                let s = fc.forward_step(&mut tape, &bound.forecaster, xq, xf, xr, &adj, None, b);
                all.push(s.pred);
            }
            all
        }
    };
    let targets: Vec<Array2<f64>> = match teacher {
        None => data.targets.clone(),
        Some(extra) => {
            let mut t = vec![data.targets[0].clone()];
            for tb in extra {
                t.push(tb.targets[0].clone());
            }
            t
        }
    };
    let forecast = forecast_loss_vars(&mut tape, &preds, &targets);

    let m_s = if config.ablation.causal_losses() {
        config.curriculum.multiplier(epoch, config.epochs)
    } else {
        0.0
    };
    let m_d = m_s;

    let mut parts = vec![forecast];
    let (elbo_terms, forcing_sample) = if config.ablation.forcing_vae() {
        let x = tape.leaf(vae_x.clone());
        let elbo = elbo_loss_vars(&bundle.codec, &mut tape, &bound.codec, x, u_draws);
        let scaled = tape.scale(elbo.total, config.lambda_elbo);
        parts.push(scaled);
        (Some((elbo.total, elbo.recon, elbo.kl)), Some(elbo.latents.sample))
    } else {
        (None, None)
    };

    let mut sparsity_v = None;
    let mut acyclicity_v = None;
    let mut forcing_adj_value = None;
    if m_s > 0.0 || m_d > 0.0 {
        let forcing_est = forcing_sample.and_then(|sample| {
            forcing_causal_estimate(&bundle.codec, &mut tape, &bound.codec, sample, config.jacobian_batch)
        });
        if let Some(f) = forcing_est {
            forcing_adj_value = Some(tape.value(f).clone());
        }
        let routing_est =
            training_routing_estimate(fc, &mut tape, &bound.forecaster, &first, &adj, b);
        let sp = sparsity_loss_vars(&mut tape, forcing_est, &routing_est, mask);
        let mut acyc_parts = Vec::new();
        if let Some(f) = forcing_est {
            acyc_parts.push(tape.acyclicity(f));
        }
        acyc_parts.push(tape.acyclicity(routing_est[0]));
        let ac = tape.add_many(&acyc_parts);
        let sp_scaled = tape.scale(sp, m_s * config.lambda_sparse);
        let ac_scaled = tape.scale(ac, m_d * config.lambda_dag);
        parts.push(sp_scaled);
        parts.push(ac_scaled);
        sparsity_v = Some(sp);
        acyclicity_v = Some(ac);
    }

    let total = tape.add_many(&parts);
    let read = |v: Option<Var>, tape: &Tape| v.map(|x| tape.scalar_value(x)).unwrap_or(0.0);
    let (elbo_s, recon_s, kl_s) = match elbo_terms {
        Some((e, r, k)) => (
            tape.scalar_value(e),
            tape.scalar_value(r),
            tape.scalar_value(k),
        ),
        None => (0.0, 0.0, 0.0),
    };
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total),
        forecast: tape.scalar_value(forecast),
        elbo: elbo_s,
        recon: recon_s,
        kl: kl_s,
        sparsity: read(sparsity_v, &tape),
        acyclicity: read(acyclicity_v, &tape),
    };
    for (name, v) in [
        ("forecast", breakdown.forecast),
        ("elbo", breakdown.elbo),
        ("sparsity", breakdown.sparsity),
        ("acyclicity", breakdown.acyclicity),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Training(format!("non-finite loss component '{name}'")));
        }
    }
    Ok(StepTape { tape, total, breakdown, param_vars, forcing_adj_value })
}

/// Batched forecast over the given window ends on frozen parameters;
/// returns per-step (N, B) predictions.
pub fn predict_batch(
    bundle: &ModelBundle,
    splits: &DataSplits,
    ends: &[usize],
    horizon: usize,
    conditioning: ForcingConditioning,
) -> Result<Vec<Array2<f64>>> {
    let fc = &bundle.forecaster;
    let l = fc.history_len;
    let data = WindowBatchData::from_panels(&splits.forcings, &splits.streamflow, l, horizon, ends)?;
    let mut tape = Tape::new();
    let bound = bind_bundle(bundle, &mut tape);
    let adj = fc.normalize_adjacency(&mut tape, &bound.routing_adj, &splits.mask)?;
    let x_q = tape.leaf(data.x_q.clone());
    let x_f = tape.leaf(data.x_f.clone());
    let f_rows = tape.leaf(data.f_rows.clone());
    let r_rows = bundle
        .runoff
        .forward_vars(&mut tape, &bound.runoff, f_rows, data.batch * l)?;
    let x_r = tape.reshape(r_rows, fc.n_stations * data.batch, l * fc.runoff_dim);
    let preds = fc.rollout_vars(
        &mut tape,
        &bound.forecaster,
        Some((&bundle.runoff, &bound.runoff)),
        x_q,
        x_f,
        x_r,
        &adj,
        horizon,
        conditioning,
        &data.future_f,
        data.batch,
    )?;
    Ok(preds.iter().map(|&p| tape.value(p).clone()).collect())
}

/// Station-mean NSE on the validation windows (pooled over windows and
/// horizon steps; per-station z-scores make this identical in standardized
/// and physical units).
pub fn validation_nse(
    bundle: &ModelBundle,
    splits: &DataSplits,
    config: &TrainingConfig,
) -> Result<f64> {
    nse_over_ends(bundle, splits, &splits.val_ends, config.conditioning)
}

pub fn nse_over_ends(
    bundle: &ModelBundle,
    splits: &DataSplits,
    ends: &[usize],
    conditioning: ForcingConditioning,
) -> Result<f64> {
    let n = bundle.spec.schema.n_stations;
    let h = bundle.spec.window.horizon;
    let mut obs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); n];
    for chunk in ends.chunks(256) {
        let preds = predict_batch(bundle, splits, chunk, h, conditioning)?;
        let data = WindowBatchData::from_panels(
            &splits.forcings,
            &splits.streamflow,
            bundle.spec.window.history_len,
            h,
            chunk,
        )?;
        for (hstep, p) in preds.iter().enumerate() {
            for k in 0..n {
                for (bi, _) in chunk.iter().enumerate() {
                    obs[k].push(data.targets[hstep][[k, bi]]);
                    pred[k].push(p[[k, bi]]);
                }
            }
        }
    }
    let mut acc = 0.0;
    for k in 0..n {
        acc += crate::eval::nse(&obs[k], &pred[k])?;
    }
    Ok(acc / n as f64)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"HYDRODG1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    spec: BundleSpec,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Serialize a bundle to a single archive: magic, JSON manifest, and a raw
/// little-endian f64 payload whose hash the manifest pins.
pub fn checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let named = bundle.named_params();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, arr) in &named {
        tensors.push(TensorEntry { name: name.clone(), rows: arr.nrows(), cols: arr.ncols() });
        for v in arr.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&payload);
    let manifest = CheckpointManifest {
        spec: bundle.spec.clone(),
        tensors,
        payload_sha256: hex_string(&digest),
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Integrity(format!("manifest serialization failed: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Restore a bundle; the payload hash and schema are verified before any
/// tensor is accepted.
pub fn restore(path: &Path) -> Result<ModelBundle> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint archive (bad magic)".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; mlen];
    f.read_exact(&mut manifest_json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| Error::Integrity(format!("manifest parse failed: {e}")))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let digest = hex_string(&Sha256::digest(&payload));
    if digest != manifest.payload_sha256 {
        return Err(Error::Integrity(format!(
            "payload hash mismatch: manifest {}, actual {digest}",
            manifest.payload_sha256
        )));
    }

    let spec = manifest.spec;
    let config = TrainingConfig {
        seed: spec.seed,
        ablation: spec.ablation,
        channels: spec.channels,
        codec_hidden: spec.codec_hidden,
        core_hidden: spec.core_hidden,
        ..TrainingConfig::default()
    };
    let mut bundle = ModelBundle::new(&spec.schema, &spec.window, &config);
    bundle.spec = spec;

    // read tensors by name into the freshly built structure
    let mut offset = 0usize;
    let mut loaded: std::collections::BTreeMap<String, Array2<f64>> = Default::default();
    for t in &manifest.tensors {
        let count = t.rows * t.cols;
        let need = count * 8;
        if offset + need > payload.len() {
            return Err(Error::Integrity(format!("payload truncated at tensor '{}'", t.name)));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 8;
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&payload[at..at + 8]);
            data.push(f64::from_le_bytes(bytes));
        }
        offset += need;
        let arr = Array2::from_shape_vec((t.rows, t.cols), data)
            .map_err(|e| Error::Integrity(format!("tensor '{}' shape error: {e}", t.name)))?;
        loaded.insert(t.name.clone(), arr);
    }

    {
        let names: Vec<String> = bundle.named_params().iter().map(|(n, _)| n.clone()).collect();
        let expected: Vec<(String, (usize, usize))> = bundle
            .named_params()
            .iter()
            .map(|(n, p)| (n.clone(), p.dim()))
            .collect();
        for (name, dim) in &expected {
            let arr = loaded.get(name).ok_or_else(|| {
                Error::Integrity(format!("checkpoint missing tensor '{name}'"))
            })?;
            if arr.dim() != *dim {
                return Err(Error::Integrity(format!(
                    "tensor '{name}' has shape {:?}, expected {:?} (schema mismatch)",
                    arr.dim(),
                    dim
                )));
            }
        }
        let _ = names;
    }

    // write into the bundle in canonical order
    let mut values: Vec<Array2<f64>> = Vec::new();
    for (name, _) in bundle.named_params() {
        values.push(loaded.remove(&name).unwrap());
    }
    {
        let mut targets = bundle.all_params_mut();
        // named order is [params..., forcing_adj]; all_params_mut covers the
        // trainable list, forcing_adj is assigned after
        for (t, v) in targets.iter_mut().zip(values.iter()) {
            **t = v.clone();
        }
    }
    bundle.forcing_adj = values.pop().unwrap();
    Ok(bundle)
}
