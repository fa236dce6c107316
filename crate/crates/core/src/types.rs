//! Domain types shared by every subsystem: dataset schemas, panels, and the
//! two adjacency representations (weighted and binarized).

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::support_is_acyclic;

/// Sizes and identifiers of a spatiotemporal panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Number of stations N.
    pub n_stations: usize,
    /// Number of forcing variables d_f.
    pub n_forcings: usize,
    /// Runoff embedding dimension d_r.
    pub runoff_dim: usize,
    /// Maximum routing lag L.
    pub max_lag: usize,
    /// Number of timesteps T.
    pub n_timesteps: usize,
    pub station_ids: Vec<String>,
    pub forcing_names: Vec<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.n_forcings == 0 || self.runoff_dim == 0 {
            return Err(Error::Schema(
                "station, forcing and runoff dimensions must be positive".into(),
            ));
        }
        if self.n_timesteps == 0 {
            return Err(Error::Schema("n_timesteps must be positive".into()));
        }
        if self.max_lag >= self.n_timesteps {
            return Err(Error::Schema(format!(
                "max_lag {} must be smaller than n_timesteps {}",
                self.max_lag, self.n_timesteps
            )));
        }
        if self.station_ids.len() != self.n_stations {
            return Err(Error::Schema(format!(
                "expected {} station ids, got {}",
                self.n_stations,
                self.station_ids.len()
            )));
        }
        if self.forcing_names.len() != self.n_forcings {
            return Err(Error::Schema(format!(
                "expected {} forcing names, got {}",
                self.n_forcings,
                self.forcing_names.len()
            )));
        }
        if !all_unique(&self.station_ids) {
            return Err(Error::Schema("station_ids must be unique".into()));
        }
        if !all_unique(&self.forcing_names) {
            return Err(Error::Schema("forcing_names must be unique".into()));
        }
        Ok(())
    }
}

fn all_unique(items: &[String]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    items.iter().all(|s| seen.insert(s))
}

/// Aligned forcing and streamflow panels plus the river-connectivity mask.
#[derive(Debug, Clone)]
pub struct SpatioTemporalDataset {
    pub schema: DatasetSchema,
    /// T x N x d_f forcings in physical units.
    pub forcings: Array3<f64>,
    /// T x N streamflow.
    pub streamflow: Array2<f64>,
    /// N x N binary mask; entry [k, j] = 1 iff station j may influence k.
    pub river_mask: Array2<f64>,
    /// Strictly increasing daily timestamps, length T.
    pub timestamps: Vec<NaiveDate>,
}

impl SpatioTemporalDataset {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let (t, n, df) = self.forcings.dim();
        if t != self.schema.n_timesteps || n != self.schema.n_stations || df != self.schema.n_forcings
        {
            return Err(Error::Schema(format!(
                "forcings shape ({t},{n},{df}) does not match schema"
            )));
        }
        if self.streamflow.dim() != (t, n) {
            return Err(Error::Schema("streamflow shape does not match schema".into()));
        }
        if self.river_mask.dim() != (n, n) {
            return Err(Error::Schema("river_mask must be N x N".into()));
        }
        for k in 0..n {
            if self.river_mask[[k, k]] != 1.0 {
                return Err(Error::Schema(format!(
                    "river_mask diagonal entry for station {} must be 1",
                    self.schema.station_ids[k]
                )));
            }
            for j in 0..n {
                let v = self.river_mask[[k, j]];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Schema("river_mask entries must be 0 or 1".into()));
                }
            }
        }
        if !support_is_acyclic(&self.river_mask) {
            return Err(Error::Structural(
                "river_mask off-diagonal support contains a cycle".into(),
            ));
        }
        if self.timestamps.len() != t {
            return Err(Error::Schema("timestamp count does not match T".into()));
        }
        for w in self.timestamps.windows(2) {
            if (w[1] - w[0]).num_days() != 1 {
                return Err(Error::Schema(format!(
                    "timestamps must be consecutive daily dates; gap between {} and {}",
                    w[0], w[1]
                )));
            }
        }
        if self.forcings.iter().any(|v| !v.is_finite())
            || self.streamflow.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Schema("dataset contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Weighted adjacency, either a single d x d forcing graph or a lag-indexed
/// stack of (L+1) routing slices. Entry [child, parent] carries the weight
/// of edge parent -> child; slice 0 is instantaneous.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedDag {
    pub slices: Vec<Vec<Vec<f64>>>,
    pub node_labels: Vec<String>,
    pub lag_indexed: bool,
}

impl WeightedDag {
    pub fn from_matrix(m: &Array2<f64>, labels: Vec<String>) -> Result<Self> {
        Self::from_slices(std::slice::from_ref(m), labels, false)
    }

    pub fn from_lagged(slices: &[Array2<f64>], labels: Vec<String>) -> Result<Self> {
        Self::from_slices(slices, labels, true)
    }

    fn from_slices(slices: &[Array2<f64>], labels: Vec<String>, lag_indexed: bool) -> Result<Self> {
        let d = labels.len();
        for (l, s) in slices.iter().enumerate() {
            if s.dim() != (d, d) {
                return Err(Error::Schema(format!(
                    "slice {l} has shape {:?}, expected ({d},{d})",
                    s.dim()
                )));
            }
        }
        let first = &slices[0];
        for i in 0..d {
            if first[[i, i]] != 0.0 {
                return Err(Error::Schema(
                    "lag-0 slice must have a zero diagonal (no instantaneous self-loops)".into(),
                ));
            }
        }
        Ok(Self {
            slices: slices
                .iter()
                .map(|s| s.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            node_labels: labels,
            lag_indexed,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_labels.len()
    }

    pub fn n_lags(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, lag: usize) -> Array2<f64> {
        let d = self.n_nodes();
        Array2::from_shape_fn((d, d), |(i, j)| self.slices[lag][i][j])
    }
}

/// Binarized adjacency with the threshold that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinaryDag {
    pub slices: Vec<Vec<Vec<u8>>>,
    pub node_labels: Vec<String>,
    pub lag_indexed: bool,
    /// Consistency threshold used for binarization ([0,1]); 1.0 for
    /// ground-truth graphs constructed directly from edge lists.
    pub threshold_used: f64,
}

impl BinaryDag {
    pub fn new(
        slices: Vec<Array2<u8>>,
        node_labels: Vec<String>,
        lag_indexed: bool,
        threshold_used: f64,
    ) -> Result<Self> {
        let d = node_labels.len();
        for (l, s) in slices.iter().enumerate() {
            if s.dim() != (d, d) {
                return Err(Error::Schema(format!("binary slice {l} shape mismatch")));
            }
        }
        Ok(Self {
            slices: slices
                .iter()
                .map(|s| s.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            node_labels,
            lag_indexed,
            threshold_used,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_labels.len()
    }

    pub fn n_lags(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, lag: usize) -> Array2<f64> {
        let d = self.n_nodes();
        Array2::from_shape_fn((d, d), |(i, j)| f64::from(self.slices[lag][i][j]))
    }

    pub fn edge(&self, lag: usize, child: usize, parent: usize) -> bool {
        self.slices[lag][child][parent] != 0
    }

    pub fn count_edges(&self) -> usize {
        self.slices
            .iter()
            .flat_map(|s| s.iter().flatten())
            .filter(|&&e| e != 0)
            .count()
    }

    /// Whether the instantaneous slice is acyclic (lagged slices point
    /// strictly forward in time and cannot close cycles).
    pub fn lag0_is_acyclic(&self) -> bool {
        support_is_acyclic(&self.slice(0))
    }
}

/// Exogenous noise family; Gaussian draws are excluded because the
/// identifiability theory requires non-Gaussian sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Laplace,
    Uniform,
    Gumbel,
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(NoiseFamily::Laplace),
            "uniform" => Ok(NoiseFamily::Uniform),
            "gumbel" => Ok(NoiseFamily::Gumbel),
            "gaussian" | "normal" => Err(Error::Config(
                "gaussian noise violates the non-Gaussianity assumption; \
                 use laplace, uniform or gumbel"
                    .into(),
            )),
            other => Err(Error::Config(format!("unknown noise family '{other}'"))),
        }
    }
}

/// Noise specification with explicit per-variable scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    /// Per-forcing-node absolute scales (length d_f).
    pub forcing_scales: Vec<f64>,
    /// Per-runoff-component absolute scales (length d_r).
    pub runoff_scales: Vec<f64>,
    /// Per-station streamflow noise scales (length N).
    pub streamflow_scales: Vec<f64>,
    /// Scale of the pure-noise warm-up draws for the first L steps.
    pub warmup_scale: f64,
    /// Centre of the warm-up draws (typical base flow).
    #[serde(default)]
    pub warmup_loc: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .forcing_scales
            .iter()
            .chain(&self.runoff_scales)
            .chain(&self.streamflow_scales)
            .chain(std::iter::once(&self.warmup_scale));
        for s in all {
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::Config("noise scales must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> DatasetSchema {
        DatasetSchema {
            n_stations: 2,
            n_forcings: 3,
            runoff_dim: 2,
            max_lag: 1,
            n_timesteps: 10,
            station_ids: vec!["a".into(), "b".into()],
            forcing_names: vec!["p".into(), "t".into(), "w".into()],
        }
    }

    #[test]
    fn schema_validation() {
        assert!(schema().validate().is_ok());

        let mut bad = schema();
        bad.station_ids = vec!["a".into(), "a".into()];
        assert!(bad.validate().is_err());

        let mut bad = schema();
        bad.max_lag = 10;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weighted_dag_rejects_instantaneous_self_loop() {
        let mut m = Array2::<f64>::zeros((2, 2));
        m[[0, 0]] = 0.5;
        assert!(WeightedDag::from_matrix(&m, vec!["x".into(), "y".into()]).is_err());
    }

    #[test]
    fn gaussian_family_rejected() {
        let err = "gaussian".parse::<NoiseFamily>().unwrap_err();
        assert!(err.to_string().contains("non-Gaussianity"));
        assert_eq!("laplace".parse::<NoiseFamily>().unwrap(), NoiseFamily::Laplace);
    }
}
