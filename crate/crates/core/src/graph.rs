//! Causal adjacency estimation from Jacobians, structural penalties, and
//! temporal aggregation of per-step graphs.
//!
//! The forcing graph comes from decoder Jacobians through
//! J_g = I - D_m J_m^-1; the routing graph comes from the forecaster's
//! input sensitivities with that same correction applied to the
//! instantaneous slice and raw sensitivities on lagged slices, everything
//! filtered by the river mask.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::forecast::{instantaneous_correction, q_sensitivities, Forecaster, WindowBatchData};
use crate::linalg::{condition_1norm, mat_inv};
use crate::repr::RunoffGenerator;
use crate::types::{BinaryDag, WeightedDag};

/// Condition-number gate for mixing-Jacobian inversion.
pub const COND_LIMIT: f64 = 1e8;

/// Which Jacobian a matrix estimate represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianKind {
    Mixing,
    Causal,
}

/// How per-instance matrices are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchAggregation {
    MeanAbs,
    MedianAbs,
}

/// An aggregated Jacobian estimate.
#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    pub matrix: Array2<f64>,
    pub kind: JacobianKind,
    pub batch_aggregation: BatchAggregation,
}

/// Row-independent differentiable batch map for Jacobian extraction.
pub trait DifferentiableMap {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    /// Forward over a (B, in) batch; each output row must depend only on
    /// the matching input row.
    fn forward(&self, tape: &mut Tape, x: Var) -> Var;
}

impl DifferentiableMap for crate::nn::Mlp {
    fn dim_in(&self) -> usize {
        self.in_dim()
    }

    fn dim_out(&self) -> usize {
        self.out_dim()
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let bound = self.bind(tape);
        crate::nn::Mlp::forward(self, tape, &bound, x)
    }
}

/// Per-instance Jacobians of a batch map by reverse-mode differentiation,
/// one backward sweep per output dimension.
pub fn mixing_jacobian(map: &dyn DifferentiableMap, inputs: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    let (b, d_in) = inputs.dim();
    if d_in != map.dim_in() {
        return Err(Error::Schema(format!(
            "map expects {} inputs, batch has {d_in}",
            map.dim_in()
        )));
    }
    let d_out = map.dim_out();
    let mut tape = Tape::new();
    let x = tape.leaf(inputs.clone());
    let y = map.forward(&mut tape, x);
    let mut jacs = vec![Array2::<f64>::zeros((d_out, d_in)); b];
    for i in 0..d_out {
        let col = tape.slice_cols(y, i, i + 1);
        let s = tape.sum_all(col);
        let grads = tape.backward(s);
        let g = grads.wrt(&tape, x);
        for bi in 0..b {
            for j in 0..d_in {
                let v = g[[bi, j]];
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite derivative at input index {bi}"
                    )));
                }
                jacs[bi][[i, j]] = v;
            }
        }
    }
    Ok(jacs)
}

/// Causal adjacency estimate from a batch of mixing Jacobians:
/// per instance I - D_m J_m^-1, then aggregated absolute values with the
/// diagonal zeroed.
pub fn causal_adjacency(jms: &[Array2<f64>], agg: BatchAggregation) -> Result<JacobianEstimate> {
    if jms.is_empty() {
        return Err(Error::Contract("causal_adjacency needs a non-empty batch".into()));
    }
    let d = jms[0].nrows();
    let mut per_instance = Vec::with_capacity(jms.len());
    let mut worst_cond = 0.0f64;
    for (idx, jm) in jms.iter().enumerate() {
        if jm.dim() != (d, d) {
            return Err(Error::Contract(format!("instance {idx} has shape {:?}", jm.dim())));
        }
        for i in 0..d {
            if jm[[i, i]].abs() < 1e-12 {
                return Err(Error::Conditioning(
                    format!("mixing Jacobian {idx} has a zero diagonal entry {i}"),
                    f64::INFINITY,
                ));
            }
        }
        let inv = mat_inv(jm).map_err(|_| {
            Error::Conditioning(format!("mixing Jacobian {idx} is singular"), f64::INFINITY)
        })?;
        worst_cond = worst_cond.max(condition_1norm(jm, &inv));
        let mut jg = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            let dm = jm[[i, i]];
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                jg[[i, j]] = eye - dm * inv[[i, j]];
            }
        }
        per_instance.push(jg);
    }
    if worst_cond > COND_LIMIT {
        return Err(Error::Conditioning(
            "near-singular mixing Jacobian in batch".into(),
            worst_cond,
        ));
    }
    let mut out = Array2::<f64>::zeros((d, d));
    match agg {
        BatchAggregation::MeanAbs => {
            for jg in &per_instance {
                out += &jg.mapv(f64::abs);
            }
            out /= per_instance.len() as f64;
        }
        BatchAggregation::MedianAbs => {
            let mut buf = vec![0.0; per_instance.len()];
            for i in 0..d {
                for j in 0..d {
                    for (s, jg) in buf.iter_mut().zip(&per_instance) {
                        *s = jg[[i, j]].abs();
                    }
                    buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out[[i, j]] = buf[buf.len() / 2];
                }
            }
        }
    }
    for i in 0..d {
        out[[i, i]] = 0.0;
    }
    Ok(JacobianEstimate { matrix: out, kind: JacobianKind::Causal, batch_aggregation: agg })
}

/// Lag-indexed routing adjacency estimate from forecaster sensitivities.
///
/// Instantaneous slice: Corollary-style correction of the per-instance
/// q0-sensitivity, aggregated mean-abs, diagonal zeroed. Lagged slices: raw
/// mean-abs sensitivities. Every slice is mask-filtered.
pub fn routing_jacobian(
    forecaster: &Forecaster,
    data: &WindowBatchData,
    runoff_gen: Option<&RunoffGenerator>,
    adjacency: &[Array2<f64>],
    mask: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let n = forecaster.n_stations;
    if mask.dim() != (n, n) {
        return Err(Error::Schema(format!(
            "mask shape {:?} does not match {n} stations",
            mask.dim()
        )));
    }
    let sens = q_sensitivities(forecaster, data, runoff_gen, adjacency, mask)?;
    let b = sens.inst_per_instance.len() as f64;
    let mut slice0 = Array2::<f64>::zeros((n, n));
    for s0 in &sens.inst_per_instance {
        slice0 += &instantaneous_correction(s0).mapv(f64::abs);
    }
    slice0 /= b;
    for k in 0..n {
        slice0[[k, k]] = 0.0;
    }
    let mut out = Vec::with_capacity(forecaster.max_lag + 1);
    out.push(&slice0 * mask);
    for lag in sens.lag_slices {
        out.push(&lag * mask);
    }
    Ok(out)
}

/// Per-window routing stacks for temporal aggregation: each window yields
/// (L+1) slices — corrected instantaneous plus raw lagged sensitivities —
/// mask-filtered, absolute values.
pub fn routing_jacobian_steps(
    forecaster: &Forecaster,
    data: &WindowBatchData,
    runoff_gen: Option<&RunoffGenerator>,
    adjacency: &[Array2<f64>],
    mask: &Array2<f64>,
) -> Result<Vec<Vec<Array2<f64>>>> {
    let n = forecaster.n_stations;
    let sens = q_sensitivities(forecaster, data, runoff_gen, adjacency, mask)?;
    let mut out = Vec::with_capacity(sens.inst_per_instance.len());
    for (s0, lags) in sens.inst_per_instance.iter().zip(&sens.lag_per_instance) {
        let mut corrected = instantaneous_correction(s0).mapv(f64::abs);
        for k in 0..n {
            corrected[[k, k]] = 0.0;
        }
        let mut stack = vec![&corrected * mask];
        for lag in lags {
            stack.push(&lag.mapv(f64::abs) * mask);
        }
        out.push(stack);
    }
    Ok(out)
}

/// L1 penalty on the masked causal Jacobians.
pub fn sparsity_loss(jg_forcing: &Array2<f64>, jg_routing: &[Array2<f64>], mask: &Array2<f64>) -> f64 {
    let forcing: f64 = jg_forcing.iter().map(|v| v.abs()).sum();
    let routing: f64 = jg_routing
        .iter()
        .map(|s| (s * mask).iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    forcing + routing
}

/// Tape version of [`sparsity_loss`].
pub fn sparsity_loss_vars(
    tape: &mut Tape,
    jg_forcing: Option<Var>,
    jg_routing: &[Var],
    mask: &Array2<f64>,
) -> Var {
    let mut parts = Vec::new();
    if let Some(f) = jg_forcing {
        let a = tape.abs(f);
        parts.push(tape.sum_all(a));
    }
    if !jg_routing.is_empty() {
        let m = tape.leaf(mask.clone());
        for &s in jg_routing {
            let filtered = tape.mul(s, m);
            let a = tape.abs(filtered);
            parts.push(tape.sum_all(a));
        }
    }
    if parts.is_empty() {
        return tape.scalar(0.0);
    }
    tape.add_many(&parts)
}

/// Smooth acyclicity penalty tr(exp(A .* A)) - d; zero exactly when the
/// support is acyclic. Applied to the forcing graph and the instantaneous
/// routing slice only (lagged edges point forward in time).
pub fn acyclicity_penalty(a: &Array2<f64>) -> Result<f64> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Contract(format!(
            "acyclicity penalty needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let h = tape.acyclicity(av);
    Ok(tape.scalar_value(h))
}

/// Aggregation of per-step weighted adjacencies into a consistency-
/// thresholded binary graph.
///
/// Each step's slice stack is normalized by its max absolute entry
/// (guard 1e-12), the normalized stacks are averaged element-wise over
/// time, and the average is binarized at `tau`.
pub fn aggregate_dags(
    per_step: &[Vec<Array2<f64>>],
    tau: f64,
    labels: Vec<String>,
    lag_indexed: bool,
) -> Result<(BinaryDag, Vec<Array2<f64>>)> {
    if per_step.is_empty() {
        return Err(Error::Contract("aggregate_dags needs at least one step".into()));
    }
    if tau < 0.0 {
        return Err(Error::Contract("tau must be non-negative".into()));
    }
    let n_slices = per_step[0].len();
    let d = labels.len();
    for (t, step) in per_step.iter().enumerate() {
        if step.len() != n_slices {
            return Err(Error::Contract(format!(
                "step {t} has {} slices, expected {n_slices}",
                step.len()
            )));
        }
        for (l, s) in step.iter().enumerate() {
            if s.dim() != (d, d) {
                return Err(Error::Contract(format!(
                    "step {t} slice {l} has shape {:?}, expected ({d},{d})",
                    s.dim()
                )));
            }
        }
    }
    let mut consistency = vec![Array2::<f64>::zeros((d, d)); n_slices];
    for step in per_step {
        let max = step
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        for (c, s) in consistency.iter_mut().zip(step) {
            *c += &s.mapv(|v| v.abs() / max);
        }
    }
    for c in consistency.iter_mut() {
        *c /= per_step.len() as f64;
    }
    let mut slices = Vec::with_capacity(n_slices);
    for (l, c) in consistency.iter().enumerate() {
        let mut b = Array2::<u8>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                if c[[i, j]] >= tau && !(l == 0 && i == j) {
                    b[[i, j]] = 1;
                }
            }
        }
        slices.push(b);
    }
    let dag = BinaryDag::new(slices, labels, lag_indexed, tau)?;
    Ok((dag, consistency))
}

/// Single-graph convenience for the forcing DAG.
pub fn aggregate_single(
    per_step: &[Array2<f64>],
    tau: f64,
    labels: Vec<String>,
) -> Result<(BinaryDag, Array2<f64>)> {
    let steps: Vec<Vec<Array2<f64>>> = per_step.iter().map(|s| vec![s.clone()]).collect();
    let (dag, mut consistency) = aggregate_dags(&steps, tau, labels, false)?;
    Ok((dag, consistency.remove(0)))
}

/// JSON export of a discovered graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphExport {
    pub node_labels: Vec<String>,
    pub lag_indexed: bool,
    pub tau: f64,
    pub aggregation: String,
    /// Time-averaged normalized consistency per slice.
    pub consistency: Vec<Vec<Vec<f64>>>,
    /// Mean absolute weighted estimate per slice (pre-normalization).
    pub weighted: Vec<Vec<Vec<f64>>>,
    pub binary: Vec<Vec<Vec<u8>>>,
    pub lag0_acyclic: bool,
}

impl GraphExport {
    pub fn new(
        dag: &BinaryDag,
        consistency: &[Array2<f64>],
        weighted: &WeightedDag,
        tau: f64,
    ) -> Self {
        Self {
            node_labels: dag.node_labels.clone(),
            lag_indexed: dag.lag_indexed,
            tau,
            aggregation: "mean of per-step max-normalized |J|".into(),
            consistency: consistency
                .iter()
                .map(|s| s.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            weighted: weighted.slices.clone(),
            binary: dag.slices.clone(),
            lag0_acyclic: dag.lag0_is_acyclic(),
        }
    }
}

/// DOT rendering of a binary graph (lag-annotated edges).
pub fn to_dot(dag: &BinaryDag, name: &str) -> String {
    let mut out = format!("digraph {name} {{\n  rankdir=LR;\n");
    for label in &dag.node_labels {
        out.push_str(&format!("  \"{label}\";\n"));
    }
    for lag in 0..dag.n_lags() {
        for child in 0..dag.n_nodes() {
            for parent in 0..dag.n_nodes() {
                if dag.edge(lag, child, parent) {
                    let style = if lag == 0 { "solid" } else { "dashed" };
                    out.push_str(&format!(
                        "  \"{}\" -> \"{}\" [label=\"lag {lag}\", style={style}];\n",
                        dag.node_labels[parent], dag.node_labels[child]
                    ));
                }
            }
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::support_is_acyclic;
    use crate::nn::{Act, Mlp};
    use crate::rng::{stream_rng, Stream};
    use crate::scm::linear_scm_oracle;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    struct FnMap {
        d_in: usize,
        d_out: usize,
        f: Box<dyn Fn(&mut Tape, Var) -> Var>,
    }

    impl DifferentiableMap for FnMap {
        fn dim_in(&self) -> usize {
            self.d_in
        }
        fn dim_out(&self) -> usize {
            self.d_out
        }
        fn forward(&self, tape: &mut Tape, x: Var) -> Var {
            (self.f)(tape, x)
        }
    }

    #[test]
    fn mixing_jacobian_identity_and_linear() {
        let id = FnMap { d_in: 3, d_out: 3, f: Box::new(|_t, x| x) };
        let inputs = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64 * 0.1);
        for j in mixing_jacobian(&id, &inputs).unwrap() {
            assert_eq!(j, Array2::<f64>::eye(3));
        }

        // f(x) = (x1, x1 + x2)
        let lin = FnMap {
            d_in: 2,
            d_out: 2,
            f: Box::new(|t, x| {
                let w = t.leaf(array![[1.0, 1.0], [0.0, 1.0]]);
                t.matmul(x, w)
            }),
        };
        let inputs = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64);
        for j in mixing_jacobian(&lin, &inputs).unwrap() {
            assert_eq!(j, array![[1.0, 0.0], [1.0, 1.0]]);
        }
    }

    #[test]
    fn mixing_jacobian_matches_finite_differences_on_tanh_net() {
        let mut rng = stream_rng(21, Stream::ModelInit);
        let mlp = Mlp::new(vec![3, 10, 3], Act::Tanh, false, &mut rng);
        let inputs = Array2::from_shape_fn((10, 3), |_| rng.random::<f64>() - 0.5);
        let jacs = mixing_jacobian(&mlp, &inputs).unwrap();
        let h = 1e-5;
        for b in 0..10 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut xp = inputs.clone();
                    xp[[b, j]] += h;
                    let mut xm = inputs.clone();
                    xm[[b, j]] -= h;
                    let eval = |x: &Array2<f64>| {
                        let mut tape = Tape::new();
                        let bound = mlp.bind(&mut tape);
                        let xv = tape.leaf(x.clone());
                        let y = mlp.forward(&mut tape, &bound, xv);
                        tape.value(y)[[b, i]]
                    };
                    let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                    let a = jacs[b][[i, j]];
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!((fd - a).abs() / denom < 1e-4, "J[{b}][{i},{j}]");
                }
            }
        }
    }

    #[test]
    fn causal_adjacency_identity_batch_gives_zero_graph() {
        let jms = vec![Array2::eye(3); 8];
        let est = causal_adjacency(&jms, BatchAggregation::MeanAbs).unwrap();
        assert_eq!(est.matrix, Array2::<f64>::zeros((3, 3)));
        assert_eq!(est.kind, JacobianKind::Causal);
    }

    #[test]
    fn causal_adjacency_recovers_linear_scm() {
        let a = array![[0.0, 0.0], [0.5, 0.0]];
        let (jm, _) = linear_scm_oracle(&a).unwrap();
        let est = causal_adjacency(&[jm], BatchAggregation::MeanAbs).unwrap();
        let err = (&est.matrix - &a.mapv(f64::abs))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn causal_adjacency_is_invariant_to_source_scaling() {
        let a = array![[0.0, 0.0, 0.0], [0.8, 0.0, 0.0], [0.4, -0.6, 0.0]];
        let (jm, _) = linear_scm_oracle(&a).unwrap();
        let base = causal_adjacency(&[jm.clone()], BatchAggregation::MeanAbs).unwrap();
        for scale in [0.5, 1.0, 2.0] {
            let mut scaled = jm.clone();
            for j in 0..3 {
                for i in 0..3 {
                    scaled[[i, j]] *= scale;
                }
            }
            let est = causal_adjacency(&[scaled], BatchAggregation::MeanAbs).unwrap();
            let err = (&est.matrix - &base.matrix)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "scale {scale}: err {err}");
        }
    }

    #[test]
    fn causal_adjacency_rejects_near_singular_instances() {
        let good = Array2::eye(2);
        // determinant 1e-12: condition number ~ 4e12
        let bad = array![[1.0, 1.0], [1.0, 1.0 + 1e-12]];
        let err = causal_adjacency(&[good, bad], BatchAggregation::MeanAbs).unwrap_err();
        match err {
            Error::Conditioning(_, cond) => assert!(cond > COND_LIMIT || cond.is_infinite()),
            other => panic!("expected conditioning error, got {other}"),
        }
    }

    #[test]
    fn sparsity_loss_hand_cases() {
        let zero = Array2::zeros((2, 2));
        let mask = Array2::from_elem((2, 2), 1.0);
        assert_eq!(sparsity_loss(&zero, &[zero.clone(), zero.clone()], &mask), 0.0);

        let jf = array![[0.0, 2.0], [-1.0, 0.0]];
        assert_eq!(sparsity_loss(&jf, &[zero.clone(), zero.clone()], &mask), 3.0);

        // masked-out entry contributes nothing
        let mut routing = Array2::zeros((2, 2));
        routing[[1, 0]] = 5.0;
        let mut mask2 = Array2::from_elem((2, 2), 1.0);
        mask2[[1, 0]] = 0.0;
        assert_eq!(sparsity_loss(&zero, &[routing], &mask2), 0.0);
    }

    #[test]
    fn sparsity_gradients_match_finite_differences() {
        let mut rng = stream_rng(31, Stream::ModelInit);
        let jf0 = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let jr0 = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
        let mask =
            Array2::from_shape_fn((4, 4), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });

        let mut tape = Tape::new();
        let jf = tape.leaf(jf0.clone());
        let jr = tape.leaf(jr0.clone());
        let loss = sparsity_loss_vars(&mut tape, Some(jf), &[jr], &mask);
        let grads = tape.backward(loss);
        let gf = grads.wrt(&tape, jf);
        let gr = grads.wrt(&tape, jr);

        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut p = jf0.clone();
                p[[i, j]] += h;
                let mut m = jf0.clone();
                m[[i, j]] -= h;
                let fd = (sparsity_loss(&p, &[jr0.clone()], &mask)
                    - sparsity_loss(&m, &[jr0.clone()], &mask))
                    / (2.0 * h);
                assert!((fd - gf[[i, j]]).abs() < 1e-6, "forcing grad ({i},{j})");

                let mut p = jr0.clone();
                p[[i, j]] += h;
                let mut m = jr0.clone();
                m[[i, j]] -= h;
                let fd = (sparsity_loss(&jf0, &[p], &mask) - sparsity_loss(&jf0, &[m], &mask))
                    / (2.0 * h);
                assert!((fd - gr[[i, j]]).abs() < 1e-6, "routing grad ({i},{j})");
            }
        }
    }

    #[test]
    fn acyclicity_hand_cases() {
        assert_eq!(acyclicity_penalty(&Array2::zeros((4, 4))).unwrap(), 0.0);
        // nilpotent support: series truncates to exactly zero
        assert_eq!(acyclicity_penalty(&array![[0.0, 1.0], [0.0, 0.0]]).unwrap(), 0.0);
        let two_cycle = acyclicity_penalty(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let expect = 2.0 * 1.0f64.cosh() - 2.0;
        assert!((two_cycle - expect).abs() < 1e-9);
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(matches!(acyclicity_penalty(&rect), Err(Error::Contract(_))));
    }

    #[test]
    fn acyclicity_matches_toposort_oracle() {
        let mut rng = stream_rng(41, Stream::ScmWeights);
        for _ in 0..200 {
            let d = 2 + rng.random_range(0..5);
            let mut a = Array2::<f64>::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    if i != j && rng.random::<f64>() < 0.35 {
                        let mag = 0.2 + 0.8 * rng.random::<f64>();
                        a[[i, j]] = if rng.random::<bool>() { mag } else { -mag };
                    }
                }
            }
            let penalty = acyclicity_penalty(&a).unwrap();
            if support_is_acyclic(&a) {
                assert_eq!(penalty, 0.0, "acyclic support must give exactly zero");
            } else {
                assert!(penalty > 0.0, "cyclic support must be positive");
            }
        }
    }

    #[test]
    fn aggregate_hand_cases() {
        let labels = vec!["a".to_string(), "b".to_string()];
        // entry constant 1 across steps -> edge at tau 0.5
        let ones = array![[0.0, 0.0], [1.0, 0.0]];
        let steps: Vec<Array2<f64>> = vec![ones.clone(); 10];
        let (dag, consistency) = aggregate_single(&steps, 0.5, labels.clone()).unwrap();
        assert!(dag.edge(0, 1, 0));
        assert!((consistency[[1, 0]] - 1.0).abs() < 1e-12);

        // present in 40% of steps -> absent at tau 0.5
        let mut steps = Vec::new();
        for t in 0..10 {
            let mut s = Array2::<f64>::zeros((2, 2));
            // keep a reference entry so normalization is stable
            s[[0, 1]] = 1.0;
            if t < 4 {
                s[[1, 0]] = 1.0;
            }
            steps.push(s);
        }
        let (dag, consistency) = aggregate_single(&steps, 0.5, labels.clone()).unwrap();
        assert!(!dag.edge(0, 1, 0));
        assert!((consistency[[1, 0]] - 0.4).abs() < 1e-12);
        assert!(dag.edge(0, 0, 1));

        // tau endpoints
        let (dag, _) = aggregate_single(&steps, 0.0, labels.clone()).unwrap();
        assert!(dag.edge(0, 1, 0) && dag.edge(0, 0, 1));
        let (dag, _) = aggregate_single(&steps, 1.0 + 1e-9, labels.clone()).unwrap();
        assert_eq!(dag.count_edges(), 0);

        let empty: Vec<Array2<f64>> = Vec::new();
        assert!(aggregate_single(&empty, 0.5, labels).is_err());
    }

    proptest! {
        #[test]
        fn aggregation_is_monotone_in_tau(
            seed in 0u64..500,
            tau1 in 0.0f64..1.0,
            tau2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if tau1 <= tau2 { (tau1, tau2) } else { (tau2, tau1) };
            let mut rng = stream_rng(seed, Stream::Batching);
            let steps: Vec<Vec<Array2<f64>>> = (0..6)
                .map(|_| {
                    (0..2)
                        .map(|_| Array2::from_shape_fn((3, 3), |_| rng.random::<f64>()))
                        .collect()
                })
                .collect();
            let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
            let (dag_lo, _) = aggregate_dags(&steps, lo, labels.clone(), true).unwrap();
            let (dag_hi, _) = aggregate_dags(&steps, hi, labels, true).unwrap();
            for l in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        // every edge at the higher threshold exists at the lower
                        prop_assert!(!dag_hi.edge(l, i, j) || dag_lo.edge(l, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn routing_jacobian_of_persistence_model_is_lag1_identity() {
        use crate::forecast::WindowBatchData;
        let n = 3;
        let l = 4;
        let mut rng = stream_rng(11, Stream::ModelInit);
        let mut fc = Forecaster::new(n, 2, 2, 1, l, 8, &mut rng);
        for p in fc.param_refs_mut() {
            p.fill(0.0);
        }
        let mask = Array2::<f64>::eye(n);
        let mut adj1 = Array2::<f64>::zeros((n, n));
        for k in 0..n {
            adj1[[k, k]] = mask.row(k).sum();
        }
        fc.skip_w[[fc.channels, 0]] = 1.0;
        let adj = vec![Array2::zeros((n, n)), adj1];

        let mut rng2 = stream_rng(5, Stream::Batching);
        let forcings = ndarray::Array3::from_shape_fn((10, n, 2), |_| rng2.random::<f64>());
        let stream = Array2::from_shape_fn((10, n), |_| rng2.random::<f64>());
        let data = WindowBatchData::from_panels(&forcings, &stream, l, 1, &[4, 5, 6]).unwrap();
        let slices = routing_jacobian(&fc, &data, None, &adj, &mask).unwrap();
        assert_eq!(slices.len(), 2);
        for k in 0..n {
            for j in 0..n {
                let want = if k == j { 1.0 } else { 0.0 };
                assert!((slices[1][[k, j]] - want).abs() < 1e-12, "lag1 [{k},{j}]");
                assert_eq!(slices[0][[k, j]], 0.0, "lag0 [{k},{j}]");
            }
        }
    }

    #[test]
    fn masked_out_routing_entries_are_exact_zeros() {
        let n = 3;
        let mut rng = stream_rng(12, Stream::ModelInit);
        let fc = Forecaster::new(n, 2, 2, 1, 4, 8, &mut rng);
        let mut mask = Array2::<f64>::eye(n);
        mask[[1, 0]] = 1.0; // only edge 0 -> 1 admissible
        let adj: Vec<Array2<f64>> =
            (0..2).map(|_| Array2::from_shape_fn((n, n), |_| rng.random::<f64>())).collect();
        let mut rng2 = stream_rng(6, Stream::Batching);
        let forcings = ndarray::Array3::from_shape_fn((12, n, 2), |_| rng2.random::<f64>());
        let stream = Array2::from_shape_fn((12, n), |_| rng2.random::<f64>());
        let data =
            crate::forecast::WindowBatchData::from_panels(&forcings, &stream, 4, 1, &[5, 7])
                .unwrap();
        let slices = routing_jacobian(&fc, &data, None, &adj, &mask).unwrap();
        for s in &slices {
            assert_eq!(s[[2, 0]], 0.0);
            assert_eq!(s[[0, 1]], 0.0);
            assert_eq!(s[[2, 1]], 0.0);
        }
        // admissible entry does carry weight
        assert!(slices[1][[1, 0]] > 0.0);
    }
}
