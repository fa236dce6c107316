//! Dataset directory IO, missing-data policy, and standardization.
//!
//! A dataset directory holds forcings.csv (date, station_id, one column per
//! forcing), streamflow.csv (date, station_id, q), mask.json (adjacency list
//! station -> downstream stations), and schema.json. Synthetic datasets add
//! truth_graphs.json and truth_runoff.csv.
//!
//! Missing-data policy: value gaps of up to 3 days are linearly
//! interpolated; longer gaps are filled for tensor finiteness but their
//! timesteps are excluded from every training/evaluation window. Calendar
//! gaps longer than 3 days are a load error.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::GroundTruthScm;
use crate::types::{BinaryDag, DatasetSchema, SpatioTemporalDataset};

/// Maximum gap length (days) repaired by linear interpolation.
pub const MAX_INTERP_GAP: usize = 3;

/// Write bytes through a temp file and an atomic rename; an interrupted
/// writer never leaves a truncated artifact at the final path.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskJson {
    stations: Vec<String>,
    /// station -> list of downstream stations it feeds.
    downstream: BTreeMap<String, Vec<String>>,
}

/// Repairs and exclusions applied while loading.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GapLog {
    /// (series, start date, length) of interpolated gaps.
    pub interpolated: Vec<(String, String, usize)>,
    /// Timestep indices excluded from windows (long gaps).
    pub excluded_timesteps: Vec<usize>,
}

/// Serialize a dataset into a directory (atomically, file by file).
pub fn write_dataset(data: &SpatioTemporalDataset, dir: &Path) -> Result<()> {
    data.validate()?;
    std::fs::create_dir_all(dir)?;
    let schema = &data.schema;

    let mut forcings = String::from("date,station_id");
    for name in &schema.forcing_names {
        forcings.push(',');
        forcings.push_str(name);
    }
    forcings.push('\n');
    for (t, date) in data.timestamps.iter().enumerate() {
        for (k, sid) in schema.station_ids.iter().enumerate() {
            forcings.push_str(&format!("{date},{sid}"));
            for c in 0..schema.n_forcings {
                forcings.push_str(&format!(",{}", data.forcings[[t, k, c]]));
            }
            forcings.push('\n');
        }
    }
    atomic_write(&dir.join("forcings.csv"), forcings.as_bytes())?;

    let mut streamflow = String::from("date,station_id,q\n");
    for (t, date) in data.timestamps.iter().enumerate() {
        for (k, sid) in schema.station_ids.iter().enumerate() {
            streamflow.push_str(&format!("{date},{sid},{}\n", data.streamflow[[t, k]]));
        }
    }
    atomic_write(&dir.join("streamflow.csv"), streamflow.as_bytes())?;

    let mut downstream: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for j in 0..schema.n_stations {
        let mut outs = Vec::new();
        for k in 0..schema.n_stations {
            if k != j && data.river_mask[[k, j]] == 1.0 {
                outs.push(schema.station_ids[k].clone());
            }
        }
        downstream.insert(schema.station_ids[j].clone(), outs);
    }
    let mask = MaskJson { stations: schema.station_ids.clone(), downstream };
    atomic_write(
        &dir.join("mask.json"),
        serde_json::to_string_pretty(&mask).unwrap().as_bytes(),
    )?;
    atomic_write(
        &dir.join("schema.json"),
        serde_json::to_string_pretty(schema).unwrap().as_bytes(),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthEdge {
    lag: usize,
    from: String,
    to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthForcingEdge {
    parent: String,
    child: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthGraphsJson {
    forcing_nodes: Vec<String>,
    forcing_edges: Vec<TruthForcingEdge>,
    stations: Vec<String>,
    max_lag: usize,
    routing_edges: Vec<TruthEdge>,
}

/// Export hidden ground truth (graphs + realized runoff) for evaluation.
pub fn write_truth(
    scm: &GroundTruthScm,
    runoff: &Array3<f64>,
    data: &SpatioTemporalDataset,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let schema = &data.schema;
    let mut forcing_edges = Vec::new();
    for child in 0..scm.forcing_dag.n_nodes() {
        for parent in 0..scm.forcing_dag.n_nodes() {
            if scm.forcing_dag.edge(0, child, parent) {
                forcing_edges.push(TruthForcingEdge {
                    parent: schema.forcing_names[parent].clone(),
                    child: schema.forcing_names[child].clone(),
                });
            }
        }
    }
    let mut routing_edges = Vec::new();
    for lag in 0..scm.routing_dag.n_lags() {
        for child in 0..scm.routing_dag.n_nodes() {
            for parent in 0..scm.routing_dag.n_nodes() {
                if scm.routing_dag.edge(lag, child, parent) {
                    routing_edges.push(TruthEdge {
                        lag,
                        from: schema.station_ids[parent].clone(),
                        to: schema.station_ids[child].clone(),
                    });
                }
            }
        }
    }
    let truth = TruthGraphsJson {
        forcing_nodes: schema.forcing_names.clone(),
        forcing_edges,
        stations: schema.station_ids.clone(),
        max_lag: scm.routing_dag.n_lags() - 1,
        routing_edges,
    };
    atomic_write(
        &dir.join("truth_graphs.json"),
        serde_json::to_string_pretty(&truth).unwrap().as_bytes(),
    )?;

    let (t_len, n, dr) = runoff.dim();
    let mut csv = String::from("date,station_id");
    for c in 0..dr {
        csv.push_str(&format!(",r{}", c + 1));
    }
    csv.push('\n');
    for t in 0..t_len {
        for k in 0..n {
            csv.push_str(&format!("{},{}", data.timestamps[t], schema.station_ids[k]));
            for c in 0..dr {
                csv.push_str(&format!(",{}", runoff[[t, k, c]]));
            }
            csv.push('\n');
        }
    }
    atomic_write(&dir.join("truth_runoff.csv"), csv.as_bytes())?;
    Ok(())
}

/// Load ground-truth graphs written by [`write_truth`].
pub fn load_truth_graphs(dir: &Path) -> Result<(BinaryDag, BinaryDag)> {
    let raw = std::fs::read_to_string(dir.join("truth_graphs.json"))
        .map_err(|e| Error::Load(format!("truth_graphs.json: {e}")))?;
    let truth: TruthGraphsJson =
        serde_json::from_str(&raw).map_err(|e| Error::Load(format!("truth_graphs.json: {e}")))?;
    let df = truth.forcing_nodes.len();
    let mut fslice = Array2::<u8>::zeros((df, df));
    let fidx: BTreeMap<&str, usize> = truth
        .forcing_nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    for e in &truth.forcing_edges {
        let p = *fidx
            .get(e.parent.as_str())
            .ok_or_else(|| Error::Schema(format!("unknown forcing node '{}'", e.parent)))?;
        let c = *fidx
            .get(e.child.as_str())
            .ok_or_else(|| Error::Schema(format!("unknown forcing node '{}'", e.child)))?;
        fslice[[c, p]] = 1;
    }
    let forcing = BinaryDag::new(vec![fslice], truth.forcing_nodes.clone(), false, 1.0)?;

    let n = truth.stations.len();
    let sidx: BTreeMap<&str, usize> = truth
        .stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut slices = vec![Array2::<u8>::zeros((n, n)); truth.max_lag + 1];
    for e in &truth.routing_edges {
        if e.lag > truth.max_lag {
            return Err(Error::Schema(format!("routing edge lag {} exceeds max {}", e.lag, truth.max_lag)));
        }
        let p = *sidx
            .get(e.from.as_str())
            .ok_or_else(|| Error::Schema(format!("unknown station '{}'", e.from)))?;
        let c = *sidx
            .get(e.to.as_str())
            .ok_or_else(|| Error::Schema(format!("unknown station '{}'", e.to)))?;
        slices[e.lag][[c, p]] = 1;
    }
    let routing = BinaryDag::new(slices, truth.stations.clone(), true, 1.0)?;
    Ok((forcing, routing))
}

/// Load the realized runoff panel written by [`write_truth`].
pub fn load_truth_runoff(dir: &Path, schema: &DatasetSchema, timestamps: &[NaiveDate]) -> Result<Array3<f64>> {
    let path = dir.join("truth_runoff.csv");
    let mut rdr = csv::Reader::from_path(&path)
        .map_err(|e| Error::Load(format!("truth_runoff.csv: {e}")))?;
    let dr = rdr.headers().map_err(|e| Error::Load(e.to_string()))?.len() - 2;
    let sidx: BTreeMap<&str, usize> = schema
        .station_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let tidx: BTreeMap<NaiveDate, usize> =
        timestamps.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut out = Array3::<f64>::zeros((timestamps.len(), schema.n_stations, dr));
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Load(e.to_string()))?;
        let date: NaiveDate = rec[0].parse().map_err(|e| Error::Load(format!("bad date: {e}")))?;
        let t = match tidx.get(&date) {
            Some(t) => *t,
            None => continue,
        };
        let k = *sidx
            .get(&rec[1])
            .ok_or_else(|| Error::Schema(format!("unknown station '{}' in truth runoff", &rec[1])))?;
        for c in 0..dr {
            out[[t, k, c]] = rec[c + 2]
                .parse()
                .map_err(|e| Error::Load(format!("bad runoff value: {e}")))?;
        }
    }
    Ok(out)
}

struct SeriesTable {
    /// (station, column) -> per-timestep optional values.
    values: Vec<Vec<Option<f64>>>,
    dates: Vec<NaiveDate>,
}

fn read_panel_csv(
    path: &Path,
    station_ids: &[String],
    n_cols: usize,
) -> Result<SeriesTable> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let sidx: BTreeMap<&str, usize> =
        station_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut cells: BTreeMap<(NaiveDate, usize), Vec<Option<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Load(e.to_string()))?;
        if rec.len() != n_cols + 2 {
            return Err(Error::Load(format!(
                "{}: expected {} columns, found {}",
                path.display(),
                n_cols + 2,
                rec.len()
            )));
        }
        let date: NaiveDate = rec[0]
            .parse()
            .map_err(|e| Error::Load(format!("{}: bad date '{}': {e}", path.display(), &rec[0])))?;
        let k = *sidx.get(&rec[1]).ok_or_else(|| {
            Error::Schema(format!("{}: unknown station '{}'", path.display(), &rec[1]))
        })?;
        let mut vals = Vec::with_capacity(n_cols);
        for c in 0..n_cols {
            let cell = rec[c + 2].trim();
            if cell.is_empty() || cell == "NaN" || cell == "nan" {
                vals.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|e| Error::Load(format!("{}: bad value '{cell}': {e}", path.display())))?;
                vals.push(if v.is_finite() { Some(v) } else { None });
            }
        }
        cells.insert((date, k), vals);
    }
    if cells.is_empty() {
        return Err(Error::Load(format!("{}: no data rows", path.display())));
    }
    let min_date = cells.keys().map(|(d, _)| *d).min().unwrap();
    let max_date = cells.keys().map(|(d, _)| *d).max().unwrap();

    // calendar gaps: dates with no rows at all
    let mut dates = Vec::new();
    let mut missing_dates = Vec::new();
    let mut d = min_date;
    while d <= max_date {
        dates.push(d);
        if !(0..station_ids.len()).any(|k| cells.contains_key(&(d, k))) {
            missing_dates.push(d);
        }
        d += chrono::Duration::days(1);
    }
    let mut run = 0usize;
    let mut worst_run_dates: Vec<NaiveDate> = Vec::new();
    let mut cur: Vec<NaiveDate> = Vec::new();
    for d in &dates {
        if missing_dates.contains(d) {
            run += 1;
            cur.push(*d);
            if run > MAX_INTERP_GAP {
                worst_run_dates = cur.clone();
            }
        } else {
            run = 0;
            cur.clear();
        }
    }
    if !worst_run_dates.is_empty() {
        return Err(Error::Load(format!(
            "calendar gap beyond policy ({} > {MAX_INTERP_GAP} days): {}",
            worst_run_dates.len(),
            worst_run_dates
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }

    let t_len = dates.len();
    let mut values = vec![vec![None; t_len]; station_ids.len() * n_cols];
    for (t, date) in dates.iter().enumerate() {
        for k in 0..station_ids.len() {
            if let Some(vals) = cells.get(&(*date, k)) {
                for (c, v) in vals.iter().enumerate() {
                    values[k * n_cols + c][t] = *v;
                }
            }
        }
    }
    Ok(SeriesTable { values, dates })
}

/// Repair one series in place per the gap policy. Returns (interpolated
/// runs, excluded timesteps).
fn repair_series(series: &mut [Option<f64>]) -> (Vec<(usize, usize)>, Vec<usize>) {
    let t_len = series.len();
    let mut interpolated = Vec::new();
    let mut excluded = Vec::new();
    let mut t = 0;
    while t < t_len {
        if series[t].is_some() {
            t += 1;
            continue;
        }
        let start = t;
        while t < t_len && series[t].is_none() {
            t += 1;
        }
        let end = t; // exclusive
        let len = end - start;
        let left = if start > 0 { series[start - 1] } else { None };
        let right = if end < t_len { series[end] } else { None };
        match (left, right) {
            (Some(a), Some(b)) if len <= MAX_INTERP_GAP => {
                for (i, slot) in series[start..end].iter_mut().enumerate() {
                    let frac = (i + 1) as f64 / (len + 1) as f64;
                    *slot = Some(a + (b - a) * frac);
                }
                interpolated.push((start, len));
            }
            _ => {
                // long or edge gap: fill with the nearest value for tensor
                // finiteness but exclude these steps from windows
                let fill = left.or(right).unwrap_or(0.0);
                for slot in series[start..end].iter_mut() {
                    *slot = Some(fill);
                }
                excluded.extend(start..end);
            }
        }
    }
    (interpolated, excluded)
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(SpatioTemporalDataset, GapLog)> {
    let schema_raw = std::fs::read_to_string(dir.join("schema.json"))
        .map_err(|e| Error::Load(format!("schema.json: {e}")))?;
    let mut schema: DatasetSchema =
        serde_json::from_str(&schema_raw).map_err(|e| Error::Load(format!("schema.json: {e}")))?;

    let mask_raw = std::fs::read_to_string(dir.join("mask.json"))
        .map_err(|e| Error::Load(format!("mask.json: {e}")))?;
    let mask_json: MaskJson =
        serde_json::from_str(&mask_raw).map_err(|e| Error::Load(format!("mask.json: {e}")))?;
    for s in mask_json.downstream.keys() {
        if !schema.station_ids.contains(s) {
            return Err(Error::Schema(format!("mask.json references unknown station '{s}'")));
        }
    }
    let n = schema.n_stations;
    let sidx: BTreeMap<&str, usize> =
        schema.station_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut mask = Array2::<f64>::eye(n);
    for (j, outs) in &mask_json.downstream {
        let jj = sidx[j.as_str()];
        for k in outs {
            let kk = *sidx.get(k.as_str()).ok_or_else(|| {
                Error::Schema(format!("mask.json references unknown station '{k}'"))
            })?;
            mask[[kk, jj]] = 1.0;
        }
    }

    let forcing_table = read_panel_csv(&dir.join("forcings.csv"), &schema.station_ids, schema.n_forcings)?;
    let stream_table = read_panel_csv(&dir.join("streamflow.csv"), &schema.station_ids, 1)?;
    if forcing_table.dates != stream_table.dates {
        // calendars must align station-for-station
        let missing: Vec<String> = forcing_table
            .dates
            .iter()
            .filter(|d| !stream_table.dates.contains(d))
            .chain(stream_table.dates.iter().filter(|d| !forcing_table.dates.contains(d)))
            .map(|d| d.to_string())
            .collect();
        return Err(Error::Load(format!(
            "forcing and streamflow calendars differ; unmatched dates: {}",
            missing.join(", ")
        )));
    }

    // every station must have at least one streamflow row
    for (k, sid) in schema.station_ids.iter().enumerate() {
        let has_any = stream_table.values[k].iter().any(|v| v.is_some());
        if !has_any {
            return Err(Error::Schema(format!(
                "station '{sid}' present in forcings but has no streamflow rows"
            )));
        }
    }

    let t_len = forcing_table.dates.len();
    let mut gap_log = GapLog::default();
    let mut forcings = Array3::<f64>::zeros((t_len, n, schema.n_forcings));
    let mut streamflow = Array2::<f64>::zeros((t_len, n));
    let mut excluded = std::collections::BTreeSet::new();

    let mut f_table = forcing_table;
    for k in 0..n {
        for c in 0..schema.n_forcings {
            let series = &mut f_table.values[k * schema.n_forcings + c];
            let (interp, excl) = repair_series(series);
            for (start, len) in interp {
                gap_log.interpolated.push((
                    format!("{}/{}", schema.station_ids[k], schema.forcing_names[c]),
                    f_table.dates[start].to_string(),
                    len,
                ));
            }
            excluded.extend(excl);
            for (t, v) in series.iter().enumerate() {
                forcings[[t, k, c]] = v.unwrap();
            }
        }
    }
    let mut q_table = stream_table;
    for k in 0..n {
        let series = &mut q_table.values[k];
        let (interp, excl) = repair_series(series);
        for (start, len) in interp {
            gap_log.interpolated.push((
                format!("{}/q", schema.station_ids[k]),
                q_table.dates[start].to_string(),
                len,
            ));
        }
        excluded.extend(excl);
        for (t, v) in series.iter().enumerate() {
            streamflow[[t, k]] = v.unwrap();
        }
    }
    gap_log.excluded_timesteps = excluded.into_iter().collect();

    schema.n_timesteps = t_len;
    let dataset = SpatioTemporalDataset {
        schema,
        forcings,
        streamflow,
        river_mask: mask,
        timestamps: f_table.dates,
    };
    dataset.validate()?;
    Ok((dataset, gap_log))
}

/// Per-variable forcing and per-station streamflow z-score statistics,
/// computed on training-period rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub forcing_mean: Vec<f64>,
    pub forcing_std: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
    /// Exclusive timestep boundary the statistics were fitted on.
    pub train_boundary: usize,
}

impl Standardization {
    pub fn fit(forcings: &Array3<f64>, streamflow: &Array2<f64>, train_boundary: usize) -> Self {
        let (_, n, df) = forcings.dim();
        let tb = train_boundary.max(1);
        let rows = (tb * n) as f64;
        let mut forcing_mean = vec![0.0; df];
        let mut forcing_std = vec![0.0; df];
        for c in 0..df {
            let mut s = 0.0;
            for t in 0..tb {
                for k in 0..n {
                    s += forcings[[t, k, c]];
                }
            }
            let mean = s / rows;
            let mut v = 0.0;
            for t in 0..tb {
                for k in 0..n {
                    v += (forcings[[t, k, c]] - mean).powi(2);
                }
            }
            forcing_mean[c] = mean;
            forcing_std[c] = (v / rows).sqrt().max(1e-9);
        }
        let mut q_mean = vec![0.0; n];
        let mut q_std = vec![0.0; n];
        for k in 0..n {
            let mut s = 0.0;
            for t in 0..tb {
                s += streamflow[[t, k]];
            }
            let mean = s / tb as f64;
            let mut v = 0.0;
            for t in 0..tb {
                v += (streamflow[[t, k]] - mean).powi(2);
            }
            q_mean[k] = mean;
            q_std[k] = (v / tb as f64).sqrt().max(1e-9);
        }
        Self { forcing_mean, forcing_std, q_mean, q_std, train_boundary: tb }
    }

    pub fn apply(&self, forcings: &Array3<f64>, streamflow: &Array2<f64>) -> (Array3<f64>, Array2<f64>) {
        let f = Array3::from_shape_fn(forcings.dim(), |(t, k, c)| {
            (forcings[[t, k, c]] - self.forcing_mean[c]) / self.forcing_std[c]
        });
        let q = Array2::from_shape_fn(streamflow.dim(), |(t, k)| {
            (streamflow[[t, k]] - self.q_mean[k]) / self.q_std[k]
        });
        (f, q)
    }

    /// Map standardized streamflow back to physical units for station `k`.
    pub fn destandardize_q(&self, value: f64, k: usize) -> f64 {
        value * self.q_std[k] + self.q_mean[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{generate_dataset, GeneratorConfig};

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let config = GeneratorConfig { n_timesteps: 120, ..GeneratorConfig::default() };
        let (data, scm, runoff) = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        write_truth(&scm, &runoff, &data, dir.path()).unwrap();

        let (loaded, gaps) = load_dataset(dir.path()).unwrap();
        assert!(gaps.interpolated.is_empty());
        assert!(gaps.excluded_timesteps.is_empty());
        assert_eq!(loaded.schema, data.schema);
        assert_eq!(loaded.timestamps, data.timestamps);
        assert_eq!(loaded.river_mask, data.river_mask);
        assert_eq!(loaded.forcings, data.forcings);
        assert_eq!(loaded.streamflow, data.streamflow);

        let (ftruth, rtruth) = load_truth_graphs(dir.path()).unwrap();
        assert_eq!(ftruth.slices, scm.forcing_dag.slices);
        assert_eq!(rtruth.slices, scm.routing_dag.slices);
        let r2 = load_truth_runoff(dir.path(), &loaded.schema, &loaded.timestamps).unwrap();
        assert_eq!(r2, runoff);
    }

    #[test]
    fn missing_station_in_streamflow_is_a_schema_error() {
        let config = GeneratorConfig { n_timesteps: 40, ..GeneratorConfig::default() };
        let (data, _, _) = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        // drop every streamflow row of station st03
        let raw = std::fs::read_to_string(dir.path().join("streamflow.csv")).unwrap();
        let filtered: Vec<&str> = raw.lines().filter(|l| !l.contains(",st03,")).collect();
        std::fs::write(dir.path().join("streamflow.csv"), filtered.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("st03"), "got: {err}");
    }

    #[test]
    fn small_gaps_interpolate_and_are_logged() {
        let config = GeneratorConfig { n_timesteps: 60, ..GeneratorConfig::default() };
        let (data, _, _) = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        // blank two consecutive streamflow values for st01
        let raw = std::fs::read_to_string(dir.path().join("streamflow.csv")).unwrap();
        let target_a = format!("{},st01,", data.timestamps[10]);
        let target_b = format!("{},st01,", data.timestamps[11]);
        let edited: Vec<String> = raw
            .lines()
            .map(|l| {
                if l.starts_with(&target_a) || l.starts_with(&target_b) {
                    let mut parts: Vec<&str> = l.split(',').collect();
                    parts[2] = "";
                    parts.join(",")
                } else {
                    l.to_string()
                }
            })
            .collect();
        std::fs::write(dir.path().join("streamflow.csv"), edited.join("\n")).unwrap();

        let (loaded, gaps) = load_dataset(dir.path()).unwrap();
        assert_eq!(gaps.interpolated.len(), 1);
        assert_eq!(gaps.interpolated[0].0, "st01/q");
        assert_eq!(gaps.interpolated[0].2, 2);
        assert!(gaps.excluded_timesteps.is_empty());
        // linear interpolation between the surviving neighbours
        let a = data.streamflow[[9, 0]];
        let b = data.streamflow[[12, 0]];
        let want10 = a + (b - a) / 3.0;
        let want11 = a + 2.0 * (b - a) / 3.0;
        assert!((loaded.streamflow[[10, 0]] - want10).abs() < 1e-12);
        assert!((loaded.streamflow[[11, 0]] - want11).abs() < 1e-12);
    }

    #[test]
    fn long_gaps_exclude_timesteps() {
        let config = GeneratorConfig { n_timesteps: 60, ..GeneratorConfig::default() };
        let (data, _, _) = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let raw = std::fs::read_to_string(dir.path().join("streamflow.csv")).unwrap();
        let blanked: Vec<usize> = (20..26).collect();
        let targets: Vec<String> = blanked
            .iter()
            .map(|&t| format!("{},st02,", data.timestamps[t]))
            .collect();
        let edited: Vec<String> = raw
            .lines()
            .map(|l| {
                if targets.iter().any(|t| l.starts_with(t.as_str())) {
                    let mut parts: Vec<&str> = l.split(',').collect();
                    parts[2] = "";
                    parts.join(",")
                } else {
                    l.to_string()
                }
            })
            .collect();
        std::fs::write(dir.path().join("streamflow.csv"), edited.join("\n")).unwrap();
        let (_, gaps) = load_dataset(dir.path()).unwrap();
        assert_eq!(gaps.excluded_timesteps, blanked);
    }

    #[test]
    fn standardization_is_leak_free_and_invertible() {
        let config = GeneratorConfig { n_timesteps: 200, ..GeneratorConfig::default() };
        let (data, _, _) = generate_dataset(&config).unwrap();
        let boundary = 140;
        let s = Standardization::fit(&data.forcings, &data.streamflow, boundary);
        // recomputing on the training rows alone reproduces the statistics
        let train_f = data.forcings.slice(ndarray::s![..boundary, .., ..]).to_owned();
        let train_q = data.streamflow.slice(ndarray::s![..boundary, ..]).to_owned();
        let s2 = Standardization::fit(&train_f, &train_q, boundary);
        assert_eq!(s, s2);

        let (_, q_std) = s.apply(&data.forcings, &data.streamflow);
        for k in 0..data.schema.n_stations {
            let back = s.destandardize_q(q_std[[5, k]], k);
            assert!((back - data.streamflow[[5, k]]).abs() < 1e-9);
        }
    }

    #[test]
    fn interrupted_write_leaves_no_truncated_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        atomic_write(&path, b"{\"ok\":true}").unwrap();
        // a crashed writer leaves only the temp file; the artifact is intact
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, b"{\"truncat").unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content, "{\"ok\":true}");
    }
}
