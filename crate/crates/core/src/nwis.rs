//! Daily-discharge retrieval from the USGS NWIS daily-values service.
//!
//! Pulls mean daily discharge (parameter 00060, statistic 00003) for a site
//! list and date range, converts the JSON payload to the dataset's
//! streamflow.csv schema, and records provenance. Requests retry with
//! exponential backoff; output is written atomically and ordered by site
//! then date regardless of response order.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::atomic_write;
use crate::error::{Error, Result};

/// Environment variable overriding the service endpoint (fixtures, mirrors).
pub const ENDPOINT_ENV: &str = "HYDRODAG_NWIS_URL";
pub const DEFAULT_ENDPOINT: &str = "https://waterservices.usgs.gov/nwis/dv/";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NwisConfig {
    pub endpoint: String,
    pub parameter_code: String,
    pub stat_code: String,
    pub max_retries: usize,
    pub backoff_base_ms: u64,
    /// Bounded request parallelism over site chunks.
    pub concurrency: usize,
    pub sites_per_request: usize,
}

impl Default for NwisConfig {
    fn default() -> Self {
        Self {
            endpoint: std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.into()),
            parameter_code: "00060".into(),
            stat_code: "00003".into(),
            max_retries: 4,
            backoff_base_ms: 500,
            concurrency: 4,
            sites_per_request: 10,
        }
    }
}

/// Retrieval record written next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub endpoint: String,
    pub parameter_code: String,
    pub stat_code: String,
    pub sites: Vec<String>,
    pub start: String,
    pub end: String,
    pub retrieved_at: String,
}

/// Fetch outcome: row count plus any per-site failures (other sites still
/// complete).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchReport {
    pub rows: usize,
    pub sites_ok: Vec<String>,
    pub per_site_errors: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

// minimal slice of the NWIS JSON layout
#[derive(Deserialize)]
struct NwisResponse {
    value: NwisValue,
}

#[derive(Deserialize)]
struct NwisValue {
    #[serde(rename = "timeSeries")]
    time_series: Vec<NwisSeries>,
}

#[derive(Deserialize)]
struct NwisSeries {
    #[serde(rename = "sourceInfo")]
    source_info: NwisSourceInfo,
    values: Vec<NwisValues>,
}

#[derive(Deserialize)]
struct NwisSourceInfo {
    #[serde(rename = "siteCode")]
    site_code: Vec<NwisSiteCode>,
}

#[derive(Deserialize)]
struct NwisSiteCode {
    value: String,
}

#[derive(Deserialize)]
struct NwisValues {
    value: Vec<NwisPoint>,
}

#[derive(Deserialize)]
struct NwisPoint {
    value: String,
    #[serde(rename = "dateTime")]
    date_time: String,
}

fn build_url(config: &NwisConfig, sites: &[String], start: NaiveDate, end: NaiveDate) -> String {
    format!(
        "{}?format=json&sites={}&startDT={}&endDT={}&parameterCd={}&statCd={}",
        config.endpoint,
        sites.join(","),
        start,
        end,
        config.parameter_code,
        config.stat_code
    )
}

fn get_with_backoff(config: &NwisConfig, url: &str) -> Result<String> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| Error::Network(format!("client build failed: {e}")))?;
    let mut attempt = 0usize;
    loop {
        let outcome = client.get(url).send();
        match outcome {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp
                        .text()
                        .map_err(|e| Error::Network(format!("body read failed: {e}")));
                }
                // retry on rate limits and server errors, fail fast otherwise
                let retryable = status.as_u16() == 429 || status.is_server_error();
                if !retryable || attempt >= config.max_retries {
                    return Err(Error::Network(format!("{url}: HTTP {status}")));
                }
            }
            Err(e) => {
                if attempt >= config.max_retries {
                    return Err(Error::Network(format!("{url}: {e}")));
                }
            }
        }
        let delay = config.backoff_base_ms.saturating_mul(1u64 << attempt.min(10));
        std::thread::sleep(Duration::from_millis(delay));
        attempt += 1;
    }
}

fn parse_payload(
    body: &str,
    requested: &[String],
) -> Result<BTreeMap<String, Vec<(NaiveDate, f64)>>> {
    let parsed: NwisResponse =
        serde_json::from_str(body).map_err(|e| Error::Network(format!("payload parse: {e}")))?;
    let mut by_site: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for series in parsed.value.time_series {
        let site = match series.source_info.site_code.first() {
            Some(s) => s.value.clone(),
            None => continue,
        };
        if !requested.contains(&site) {
            continue;
        }
        let sink = by_site.entry(site).or_default();
        for block in series.values {
            for point in block.value {
                // -999999 is the NWIS missing sentinel
                let v: f64 = match point.value.parse() {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                if v <= -999_990.0 {
                    continue;
                }
                let date_part = point.date_time.split('T').next().unwrap_or("");
                if let Ok(d) = date_part.parse::<NaiveDate>() {
                    sink.push((d, v));
                }
            }
        }
    }
    Ok(by_site)
}

/// Fetch daily discharge for `sites` over [start, end] and write a
/// streamflow CSV in the dataset format plus a provenance sidecar.
pub fn fetch_nwis(
    sites: &[String],
    start: NaiveDate,
    end: NaiveDate,
    config: &NwisConfig,
    out_csv: &Path,
) -> Result<FetchReport> {
    if end < start {
        return Err(Error::Argument(format!(
            "date range end {end} precedes start {start}"
        )));
    }
    let mut report = FetchReport {
        rows: 0,
        sites_ok: Vec::new(),
        per_site_errors: BTreeMap::new(),
        warnings: Vec::new(),
    };
    if sites.is_empty() {
        report.warnings.push("empty site list: writing an empty streamflow CSV".into());
        atomic_write(out_csv, b"date,station_id,q\n")?;
        return Ok(report);
    }

    let chunks: Vec<Vec<String>> = sites
        .chunks(config.sites_per_request.max(1))
        .map(|c| c.to_vec())
        .collect();
    let mut results: Vec<Result<BTreeMap<String, Vec<(NaiveDate, f64)>>>> =
        Vec::with_capacity(chunks.len());
    // bounded-parallel over chunks; outputs are re-sorted afterwards so
    // completion order cannot affect the artifact
    for wave in chunks.chunks(config.concurrency.max(1)) {
        let wave_results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|chunk| {
                    let url = build_url(config, chunk, start, end);
                    let cfg = config.clone();
                    let requested = chunk.clone();
                    scope.spawn(move || -> Result<BTreeMap<String, Vec<(NaiveDate, f64)>>> {
                        let body = get_with_backoff(&cfg, &url)?;
                        parse_payload(&body, &requested)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch thread panicked")).collect()
        });
        results.extend(wave_results);
    }

    let mut by_site: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (chunk, outcome) in chunks.iter().zip(results) {
        match outcome {
            Ok(mut map) => {
                for site in chunk {
                    match map.remove(site) {
                        Some(mut rows) if !rows.is_empty() => {
                            rows.sort_by_key(|(d, _)| *d);
                            rows.dedup_by_key(|(d, _)| *d);
                            by_site.insert(site.clone(), rows);
                        }
                        _ => {
                            report
                                .per_site_errors
                                .insert(site.clone(), "no data returned for site".into());
                        }
                    }
                }
            }
            Err(e) => {
                for site in chunk {
                    report.per_site_errors.insert(site.clone(), e.to_string());
                }
            }
        }
    }
    if by_site.is_empty() {
        return Err(Error::Network(format!(
            "no site returned data ({} failures)",
            report.per_site_errors.len()
        )));
    }

    let mut csv = String::from("date,station_id,q\n");
    for (site, rows) in &by_site {
        for (date, v) in rows {
            csv.push_str(&format!("{date},{site},{v}\n"));
            report.rows += 1;
        }
        report.sites_ok.push(site.clone());
    }
    atomic_write(out_csv, csv.as_bytes())?;

    let provenance = Provenance {
        endpoint: config.endpoint.clone(),
        parameter_code: config.parameter_code.clone(),
        stat_code: config.stat_code.clone(),
        sites: sites.to_vec(),
        start: start.to_string(),
        end: end.to_string(),
        retrieved_at: chrono::Utc::now().to_rfc3339(),
    };
    let sidecar = out_csv.with_extension("provenance.json");
    atomic_write(&sidecar, serde_json::to_string_pretty(&provenance).unwrap().as_bytes())?;
    Ok(report)
}

/// Canned NWIS-style payload for fixtures and tests.
pub fn fixture_payload(sites: &[&str], dates: &[&str], base_value: f64) -> String {
    let mut series = Vec::new();
    for (i, site) in sites.iter().enumerate() {
        let values: Vec<String> = dates
            .iter()
            .enumerate()
            .map(|(j, d)| {
                format!(
                    "{{\"value\":\"{}\",\"dateTime\":\"{d}T00:00:00.000\"}}",
                    base_value + (i * 10 + j) as f64
                )
            })
            .collect();
        series.push(format!(
            "{{\"sourceInfo\":{{\"siteCode\":[{{\"value\":\"{site}\"}}]}},\
             \"values\":[{{\"value\":[{}]}}]}}",
            values.join(",")
        ));
    }
    format!("{{\"value\":{{\"timeSeries\":[{}]}}}}", series.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reversed_date_range_fails_before_any_network_call() {
        let cfg = NwisConfig { endpoint: "http://127.0.0.1:1/unreachable".into(), ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_nwis(
            &["08096500".into()],
            NaiveDate::from_ymd_opt(1974, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(1973, 1, 1).unwrap(),
            &cfg,
            &dir.path().join("q.csv"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn empty_site_list_writes_empty_csv_with_warning() {
        let cfg = NwisConfig { endpoint: "http://127.0.0.1:1/unreachable".into(), ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("q.csv");
        let report = fetch_nwis(
            &[],
            NaiveDate::from_ymd_opt(1973, 10, 1).unwrap(),
            NaiveDate::from_ymd_opt(1973, 10, 2).unwrap(),
            &cfg,
            &out,
        )
        .unwrap();
        assert_eq!(report.rows, 0);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(std::fs::read_to_string(out).unwrap(), "date,station_id,q\n");
    }

    #[test]
    fn payload_parsing_skips_missing_sentinels() {
        let body = format!(
            "{{\"value\":{{\"timeSeries\":[{{\"sourceInfo\":{{\"siteCode\":[{{\"value\":\"x\"}}]}},\
             \"values\":[{{\"value\":[\
             {{\"value\":\"5.0\",\"dateTime\":\"1973-10-01T00:00:00.000\"}},\
             {{\"value\":\"-999999\",\"dateTime\":\"1973-10-02T00:00:00.000\"}}\
             ]}}]}}]}}}}"
        );
        let map = parse_payload(&body, &["x".to_string()]).unwrap();
        assert_eq!(map["x"].len(), 1);
        assert_eq!(map["x"][0].1, 5.0);
    }

    #[test]
    fn fixture_payload_is_valid_json() {
        let body = fixture_payload(&["a", "b"], &["1973-10-01", "1973-10-02"], 1.0);
        let map = parse_payload(&body, &["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map["a"].len(), 2);
        assert_eq!(map["b"].len(), 2);
    }
}
