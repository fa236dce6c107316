//! Forecast skill metrics, runoff-alignment scores, and graph-recovery
//! scores against ground truth.
//!
//! Undefined metrics raise instead of returning sentinel numbers; silent
//! NaN propagation would corrupt basin averages.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::types::BinaryDag;

fn check_pair(observed: &[f64], predicted: &[f64], min_len: usize) -> Result<()> {
    if observed.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "series length mismatch: {} vs {}",
            observed.len(),
            predicted.len()
        )));
    }
    if observed.len() < min_len {
        return Err(Error::Contract(format!(
            "need at least {min_len} points, got {}",
            observed.len()
        )));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_pop(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Nash-Sutcliffe efficiency: 1 - SSE/SST. 1 is a perfect match, 0 matches
/// the observed mean.
pub fn nse(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(observed, predicted, 2)?;
    let m = mean(observed);
    let sst: f64 = observed.iter().map(|y| (y - m).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedMetric(
            "NSE undefined for a constant observed series".into(),
        ));
    }
    let sse: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Ok(1.0 - sse / sst)
}

/// Which variability ratio the Kling-Gupta efficiency uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgeVariability {
    /// gamma = CV(pred)/CV(obs) with CV = std/mean (2012 convention).
    CvRatio,
    /// gamma = std(pred)/std(obs) (2009 convention).
    StdRatio,
}

/// Kling-Gupta efficiency, CV-ratio variability by default.
pub fn kge(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    kge_with(observed, predicted, KgeVariability::CvRatio)
}

pub fn kge_with(observed: &[f64], predicted: &[f64], variability: KgeVariability) -> Result<f64> {
    check_pair(observed, predicted, 2)?;
    let mo = mean(observed);
    let mp = mean(predicted);
    let so = std_pop(observed, mo);
    let sp = std_pop(predicted, mp);
    if mo == 0.0 || so == 0.0 {
        return Err(Error::UndefinedMetric(
            "KGE undefined for zero observed mean or variance".into(),
        ));
    }
    let r = pearson(observed, predicted)?;
    let beta = mp / mo;
    let gamma = match variability {
        KgeVariability::CvRatio => {
            if mp == 0.0 {
                return Err(Error::UndefinedMetric(
                    "KGE CV ratio undefined for zero predicted mean".into(),
                ));
            }
            (sp / mp) / (so / mo)
        }
        KgeVariability::StdRatio => sp / so,
    };
    Ok(1.0 - ((r - 1.0).powi(2) + (beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt())
}

/// Volumetric efficiency: 1 - sum|pred - obs| / sum obs.
pub fn ve(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(observed, predicted, 1)?;
    let volume: f64 = observed.iter().sum();
    if volume <= 0.0 {
        return Err(Error::UndefinedMetric(
            "VE undefined for non-positive observed volume".into(),
        ));
    }
    let abs_err: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (p - y).abs())
        .sum();
    Ok(1.0 - abs_err / volume)
}

/// Pearson product-moment correlation.
pub fn pearson(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(observed, predicted, 2)?;
    let mo = mean(observed);
    let mp = mean(predicted);
    let so = std_pop(observed, mo);
    let sp = std_pop(predicted, mp);
    if so == 0.0 || sp == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation undefined for a constant series".into(),
        ));
    }
    let cov: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - mo) * (p - mp))
        .sum::<f64>()
        / observed.len() as f64;
    Ok(cov / (so * sp))
}

/// Ranks with ties sharing the average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 3)?;
    pearson(&ranks(a), &ranks(b))
}

/// Mean best-match absolute Spearman correlation between embedding
/// dimensions and reference runoff series. Constant embedding columns are
/// excluded from the average with a warning entry in the returned report.
pub fn mcc_alignment(embedding: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    let (t, dr) = embedding.dim();
    let (tt, dtruth) = truth.dim();
    if t != tt {
        return Err(Error::Contract("embedding and truth lengths differ".into()));
    }
    if t < 3 {
        return Err(Error::Contract("MCC needs at least 3 timesteps".into()));
    }
    let mut per_dim = Vec::new();
    for i in 0..dr {
        let col: Vec<f64> = embedding.column(i).to_vec();
        if std_pop(&col, mean(&col)) == 0.0 {
            continue; // undefined-correlation guard
        }
        let mut best = 0.0f64;
        let mut any = false;
        for j in 0..dtruth {
            let tcol: Vec<f64> = truth.column(j).to_vec();
            if std_pop(&tcol, mean(&tcol)) == 0.0 {
                continue;
            }
            best = best.max(spearman(&col, &tcol)?.abs());
            any = true;
        }
        if any {
            per_dim.push(best);
        }
    }
    if per_dim.is_empty() {
        return Err(Error::UndefinedMetric(
            "MCC undefined: every embedding/truth column is constant".into(),
        ));
    }
    Ok(per_dim.iter().sum::<f64>() / per_dim.len() as f64)
}

/// Kernel ridge settings for the alignment regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelRidgeConfig {
    pub ridge: f64,
    /// Chronological train fraction per station.
    pub train_frac: f64,
    /// Cap on training points (stride subsampled) to bound the solve.
    pub max_train: usize,
    pub max_test: usize,
    /// Minimum points per station before it is skipped with a warning.
    pub min_points: usize,
}

impl Default for KernelRidgeConfig {
    fn default() -> Self {
        Self { ridge: 1e-3, train_frac: 0.8, max_train: 512, max_test: 1024, min_points: 50 }
    }
}

/// Outcome of the per-station kernel-ridge alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct R2Summary {
    pub mean: f64,
    pub per_station: Vec<Option<f64>>,
    /// Fraction of stations that had enough data to score.
    pub coverage: f64,
    pub warnings: Vec<String>,
}

fn stride_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

fn rbf_kernel_row(x: &Array2<f64>, row: &[f64], gamma: f64, out: &mut Array1<f64>) {
    for (i, xr) in x.rows().into_iter().enumerate() {
        let d2: f64 = xr.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
        out[i] = (-gamma * d2).exp();
    }
}

fn median_sq_distance(x: &Array2<f64>) -> f64 {
    let n = x.nrows().min(128);
    let mut d2s = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d2s.push(d2);
        }
    }
    if d2s.is_empty() {
        return 1.0;
    }
    d2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d2s[d2s.len() / 2].max(1e-12)
}

/// Fit an RBF kernel ridge map embedding -> truth per station on the
/// chronological train split and report held-out R^2 averaged over stations.
pub fn r2_alignment(
    embeddings: &[Array2<f64>],
    truths: &[Array2<f64>],
    cfg: &KernelRidgeConfig,
) -> Result<R2Summary> {
    if embeddings.len() != truths.len() {
        return Err(Error::Contract("one embedding and truth panel per station".into()));
    }
    let mut per_station = Vec::with_capacity(embeddings.len());
    let mut warnings = Vec::new();
    for (k, (emb, tru)) in embeddings.iter().zip(truths).enumerate() {
        let t = emb.nrows();
        if tru.nrows() != t {
            return Err(Error::Contract(format!("station {k}: length mismatch")));
        }
        if t < cfg.min_points {
            warnings.push(format!("station {k}: only {t} points, skipped"));
            per_station.push(None);
            continue;
        }
        let split = ((t as f64) * cfg.train_frac) as usize;
        let train_idx = stride_indices(split, cfg.max_train);
        let test_idx: Vec<usize> = stride_indices(t - split, cfg.max_test)
            .into_iter()
            .map(|i| split + i)
            .collect();

        let d_in = emb.ncols();
        let x_train = Array2::from_shape_fn((train_idx.len(), d_in), |(i, j)| emb[[train_idx[i], j]]);
        let gamma = 1.0 / (2.0 * median_sq_distance(&x_train));
        let m = x_train.nrows();
        let mut kmat = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            let row: Vec<f64> = x_train.row(i).to_vec();
            let mut col = Array1::zeros(m);
            rbf_kernel_row(&x_train, &row, gamma, &mut col);
            kmat.row_mut(i).assign(&col);
        }

        let d_out = tru.ncols();
        let mut sse = 0.0;
        let mut sst = 0.0;
        let mut undefined = false;
        for c in 0..d_out {
            let y_train = Array1::from_shape_fn(m, |i| tru[[train_idx[i], c]]);
            let alpha = cholesky_solve(&kmat, cfg.ridge, &y_train)?;
            let y_test: Vec<f64> = test_idx.iter().map(|&i| tru[[i, c]]).collect();
            let y_mean = mean(&y_test);
            let mut krow = Array1::zeros(m);
            for (&i, yt) in test_idx.iter().zip(&y_test) {
                let row: Vec<f64> = emb.row(i).to_vec();
                rbf_kernel_row(&x_train, &row, gamma, &mut krow);
                let pred = krow.dot(&alpha);
                sse += (yt - pred).powi(2);
                sst += (yt - y_mean).powi(2);
            }
            if sst == 0.0 {
                undefined = true;
            }
        }
        if undefined {
            warnings.push(format!("station {k}: constant truth on the test split, skipped"));
            per_station.push(None);
            continue;
        }
        per_station.push(Some(1.0 - sse / sst));
    }
    let scored: Vec<f64> = per_station.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no station had enough data for R^2".into()));
    }
    Ok(R2Summary {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        coverage: scored.len() as f64 / per_station.len() as f64,
        per_station,
        warnings,
    })
}

/// Edge-level recovery scores over all lag slices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Structural Hamming distance: number of differing edge slots.
    pub shd: usize,
}

pub fn graph_recovery(estimated: &BinaryDag, truth: &BinaryDag) -> Result<GraphScores> {
    if estimated.n_nodes() != truth.n_nodes() || estimated.n_lags() != truth.n_lags() {
        return Err(Error::Contract(format!(
            "graph shapes differ: {}x{} lags {} vs {}x{} lags {}",
            estimated.n_nodes(),
            estimated.n_nodes(),
            estimated.n_lags(),
            truth.n_nodes(),
            truth.n_nodes(),
            truth.n_lags()
        )));
    }
    let d = truth.n_nodes();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for lag in 0..truth.n_lags() {
        for child in 0..d {
            for parent in 0..d {
                if lag == 0 && child == parent {
                    continue; // structurally zero
                }
                let e = estimated.edge(lag, child, parent);
                let t = truth.edge(lag, child, parent);
                match (e, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(GraphScores { precision, recall, f1, shd: fp + fn_ })
}

/// Skill metrics for one station or one pooled series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationMetrics {
    pub nse: f64,
    pub kge: f64,
    pub ve: f64,
    pub rho: f64,
}

pub fn station_metrics(observed: &[f64], predicted: &[f64]) -> Result<StationMetrics> {
    Ok(StationMetrics {
        nse: nse(observed, predicted)?,
        kge: kge(observed, predicted)?,
        ve: ve(observed, predicted)?,
        rho: pearson(observed, predicted)?,
    })
}

/// Alignment scores between learned embeddings and reference runoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub mcc: f64,
    pub r2: f64,
}

/// Window echo stored alongside every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowEcho {
    pub preset: String,
    pub history_len: usize,
    pub horizon: usize,
}

/// Full evaluation artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_station: BTreeMap<String, StationMetrics>,
    pub aggregate: StationMetrics,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub graph_scores: BTreeMap<String, GraphScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentScores>,
    pub window: WindowEcho,
}

impl EvaluationReport {
    /// Flat station x metric table for spreadsheet use.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("station,nse,kge,ve,rho\n");
        for (sid, m) in &self.per_station {
            out.push_str(&format!("{},{},{},{},{}\n", sid, m.nse, m.kge, m.ve, m.rho));
        }
        out.push_str(&format!(
            "aggregate,{},{},{},{}\n",
            self.aggregate.nse, self.aggregate.kge, self.aggregate.ve, self.aggregate.rho
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn nse_hand_cases() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(nse(&obs, &obs).unwrap(), 1.0);
        let at_mean = [2.0, 2.0, 2.0];
        assert_eq!(nse(&obs, &at_mean).unwrap(), 0.0);
        assert_eq!(nse(&obs, &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert!(matches!(
            nse(&[5.0, 5.0, 5.0], &obs),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn kge_hand_cases() {
        let obs = [1.0, 2.0, 3.0, 4.0];
        assert!((kge(&obs, &obs).unwrap() - 1.0).abs() < 1e-12);
        // pure doubling: r = 1, beta = 2, gamma = 1 (CV invariant) => 0
        let doubled: Vec<f64> = obs.iter().map(|x| 2.0 * x).collect();
        assert!((kge(&obs, &doubled).unwrap() - 0.0).abs() < 1e-12);
        // constant shift keeps r = 1; check against the direct formula
        let shifted: Vec<f64> = obs.iter().map(|x| x + 1.0).collect();
        let mo = 2.5;
        let beta: f64 = 3.5 / mo;
        let so = std_pop(&obs, mo);
        let gamma: f64 = (so / 3.5) / (so / mo);
        let want = 1.0 - ((beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt();
        assert!((kge(&obs, &shifted).unwrap() - want).abs() < 1e-12);
        // sigma-ratio variant: gamma = 1 under a shift
        let got = kge_with(&obs, &shifted, KgeVariability::StdRatio).unwrap();
        let want = 1.0 - ((beta - 1.0).powi(2)).sqrt();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ve_hand_cases() {
        let obs = [2.0, 2.0];
        assert_eq!(ve(&obs, &obs).unwrap(), 1.0);
        assert_eq!(ve(&obs, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(ve(&obs, &[1.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(ve(&[0.0, 0.0], &obs), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pearson_hand_cases() {
        let obs = [1.0, 2.0, 3.0];
        assert!((pearson(&obs, &obs).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = obs.iter().map(|x| -x).collect();
        assert!((pearson(&obs, &neg).unwrap() + 1.0).abs() < 1e-12);
        let rho = pearson(&obs, &[1.0, 2.0, 2.0]).unwrap();
        assert!((rho - 0.866).abs() < 1e-3);
    }

    #[test]
    fn affine_invariance_of_nse_and_pearson() {
        let mut rng = stream_rng(3, Stream::Batching);
        let obs: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let pred: Vec<f64> = obs.iter().map(|x| x + 0.1 * rng.random::<f64>()).collect();
        let a = 2.5;
        let b = -1.0;
        let obs2: Vec<f64> = obs.iter().map(|x| a * x + b).collect();
        let pred2: Vec<f64> = pred.iter().map(|x| a * x + b).collect();
        assert!((nse(&obs, &pred).unwrap() - nse(&obs2, &pred2).unwrap()).abs() < 1e-10);
        assert!((pearson(&obs, &pred).unwrap() - pearson(&obs2, &pred2).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn spearman_is_monotone_invariant() {
        let a: [f64; 5] = [0.1, 0.5, 0.3, 0.9, 0.7];
        let b: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_identity_and_monotone_cases() {
        let truth = Array2::from_shape_fn((200, 2), |(t, j)| ((t * (j + 2)) as f64 * 0.37).sin());
        assert!((mcc_alignment(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        let exp = truth.mapv(f64::exp);
        assert!((mcc_alignment(&exp, &truth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_null_distribution_is_small() {
        let mut rng = stream_rng(17, Stream::Batching);
        let emb = Array2::from_shape_fn((1000, 2), |_| rng.random::<f64>() - 0.5);
        let tru = Array2::from_shape_fn((1000, 2), |_| rng.random::<f64>() - 0.5);
        let mcc = mcc_alignment(&emb, &tru).unwrap();
        assert!(mcc < 0.15, "null MCC unexpectedly high: {mcc}");
    }

    #[test]
    fn mcc_skips_constant_columns() {
        let mut emb = Array2::from_shape_fn((100, 2), |(t, _)| (t as f64 * 0.21).sin());
        for t in 0..100 {
            emb[[t, 1]] = 5.0;
        }
        let truth = emb.clone();
        // constant column dropped on both sides; remaining matches perfectly
        assert!((mcc_alignment(&emb, &truth).unwrap() - 1.0).abs() < 1e-12);
        let all_const = Array2::from_elem((100, 2), 1.0);
        assert!(matches!(
            mcc_alignment(&all_const, &truth),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn kernel_ridge_recovers_realizable_maps() {
        let mut rng = stream_rng(5, Stream::Batching);
        let t = 400;
        let emb = Array2::from_shape_fn((t, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        // linear target
        let lin = Array2::from_shape_fn((t, 1), |(i, _)| 0.8 * emb[[i, 0]] - 0.3 * emb[[i, 1]]);
        let cfg = KernelRidgeConfig::default();
        let r2 = r2_alignment(&[emb.clone()], &[lin], &cfg).unwrap();
        assert!(r2.mean >= 0.999, "linear R2 {}", r2.mean);
        // sin of a projection
        let sin = Array2::from_shape_fn((t, 1), |(i, _)| (1.7 * emb[[i, 0]] + 0.9 * emb[[i, 1]]).sin());
        let r2 = r2_alignment(&[emb], &[sin], &cfg).unwrap();
        assert!(r2.mean >= 0.95, "sin R2 {}", r2.mean);
    }

    #[test]
    fn kernel_ridge_null_target_has_no_skill() {
        let cfg = KernelRidgeConfig::default();
        let mut scores = Vec::new();
        for seed in 0..10 {
            let mut rng = stream_rng(100 + seed, Stream::Batching);
            let t = 300;
            let emb = Array2::from_shape_fn((t, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
            let tru = Array2::from_shape_fn((t, 1), |_| rng.random::<f64>() * 2.0 - 1.0);
            scores.push(r2_alignment(&[emb], &[tru], &cfg).unwrap().mean);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(mean <= 0.05, "null R2 mean {mean}");
    }

    #[test]
    fn kernel_ridge_skips_short_stations() {
        let cfg = KernelRidgeConfig::default();
        let emb = Array2::from_shape_fn((10, 2), |(i, j)| (i + j) as f64);
        let tru = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let long_emb = Array2::from_shape_fn((200, 2), |(i, j)| ((i * (j + 1)) as f64 * 0.1).sin());
        let long_tru = Array2::from_shape_fn((200, 1), |(i, _)| (i as f64 * 0.1).sin());
        let out = r2_alignment(&[emb, long_emb], &[tru, long_tru], &cfg).unwrap();
        assert_eq!(out.per_station[0], None);
        assert!(out.per_station[1].is_some());
        assert!((out.coverage - 0.5).abs() < 1e-12);
        assert_eq!(out.warnings.len(), 1);
    }

    fn dag_from(slices: Vec<Array2<u8>>, n: usize) -> BinaryDag {
        BinaryDag::new(slices, (0..n).map(|i| format!("n{i}")).collect(), true, 0.5).unwrap()
    }

    #[test]
    fn graph_recovery_hand_cases() {
        let truth = dag_from(vec![array![[0u8, 0], [1, 0]], array![[1u8, 0], [1, 1]]], 2);
        let perfect = graph_recovery(&truth, &truth).unwrap();
        assert_eq!(perfect.f1, 1.0);
        assert_eq!(perfect.shd, 0);

        let empty = dag_from(vec![Array2::zeros((2, 2)), Array2::zeros((2, 2))], 2);
        let none = graph_recovery(&empty, &truth).unwrap();
        assert_eq!(none.f1, 0.0);
        assert_eq!(none.shd, truth.count_edges());

        // truth 5 edges; estimate keeps 4 and adds 1 spurious
        let truth5 = dag_from(
            vec![array![[0u8, 0, 0], [1, 0, 0], [1, 1, 0]], array![[1u8, 0, 0], [0, 1, 0], [0, 0, 0]]],
            3,
        );
        let est = dag_from(
            vec![array![[0u8, 0, 0], [1, 0, 0], [1, 1, 0]], array![[0u8, 0, 0], [0, 1, 0], [0, 1, 0]]],
            3,
        );
        let s = graph_recovery(&est, &truth5).unwrap();
        assert!((s.precision - 0.8).abs() < 1e-12);
        assert!((s.recall - 0.8).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        assert_eq!(s.shd, 2);
    }

    #[test]
    fn graph_recovery_rejects_shape_mismatch() {
        let a = dag_from(vec![Array2::zeros((2, 2))], 2);
        let b = dag_from(vec![Array2::zeros((3, 3))], 3);
        assert!(graph_recovery(&a, &b).is_err());
    }
}
