//! Trend features over irregular clinical time series.
//!
//! Observations arrive as (months since baseline, value) pairs. They are
//! snapped to a monthly grid anchored at the baseline visit, short gaps
//! (under 3 months between observations) are forward-filled, longer
//! interior gaps are linearly interpolated, and leading/trailing gaps stay
//! absent. From the filled grid the agent derives trailing moving
//! averages, least-squares slopes per window, and normalized
//! rate-of-change ratios:
//!
//! ```text
//! roc(t, d) = (x[t] - x[t-d]) / (|x[t-d]| * d)
//! ```
//!
//! absent whenever |x[t-d]| falls below epsilon. The tool payload is CSV
//! with header `time_months,value`.

use std::collections::BTreeMap;

use orchestra_core::engine::{ToolAgent, ToolError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One observation: months since the baseline visit and the measured value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub time_months: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendParams {
    /// Window, in grid points, for moving average and slope.
    pub window: usize,
    /// Lags (in months) for rate-of-change ratios.
    pub roc_deltas: Vec<u32>,
    /// Zero-baseline guard for rate-of-change denominators.
    pub epsilon: f64,
    /// Gaps strictly shorter than this many months forward-fill; gaps of
    /// this length or longer interpolate.
    pub short_gap_months: u32,
}

impl Default for TrendParams {
    fn default() -> Self {
        Self {
            window: 3,
            roc_deltas: vec![1, 3, 6],
            epsilon: 1e-9,
            short_gap_months: 3,
        }
    }
}

/// Derived features on the monthly grid; `None` where a window or lag has
/// too little data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendFeatures {
    pub aligned: Vec<Option<f64>>,
    pub moving_average: Vec<Option<f64>>,
    pub slope: Vec<Option<f64>>,
    pub rate_of_change: BTreeMap<u32, Vec<Option<f64>>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum LongitudinalError {
    #[error("series is empty")]
    EmptySeries,
    #[error("point {index}: {reason}")]
    InvalidPoint { index: usize, reason: String },
    #[error("series is not sorted by time at index {index}")]
    Unsorted { index: usize },
    #[error("csv: {0}")]
    Csv(String),
}

/// Snap a time to the nearest month, ties toward the earlier month.
fn snap_month(time: f64) -> usize {
    if (time - time.floor() - 0.5).abs() < f64::EPSILON {
        time.floor() as usize
    } else {
        time.round() as usize
    }
}

fn validate(series: &[SeriesPoint]) -> Result<(), LongitudinalError> {
    if series.is_empty() {
        return Err(LongitudinalError::EmptySeries);
    }
    for (index, point) in series.iter().enumerate() {
        if !point.time_months.is_finite() || point.time_months < 0.0 {
            return Err(LongitudinalError::InvalidPoint {
                index,
                reason: format!("time {} must be finite and >= 0", point.time_months),
            });
        }
        if !point.value.is_finite() {
            return Err(LongitudinalError::InvalidPoint {
                index,
                reason: "value must be finite".into(),
            });
        }
        if index > 0 && series[index - 1].time_months > point.time_months {
            return Err(LongitudinalError::Unsorted { index });
        }
    }
    Ok(())
}

/// Ordinary least-squares slope of (t, x) pairs; `None` below 2 points.
fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_t = points.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_x = points.iter().map(|(_, x)| x).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, x) in points {
        num += (t - mean_t) * (x - mean_x);
        den += (t - mean_t) * (t - mean_t);
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Compute trend features for a time-sorted series.
pub fn features(
    series: &[SeriesPoint],
    params: &TrendParams,
) -> Result<TrendFeatures, LongitudinalError> {
    validate(series)?;

    // Snap to the monthly grid; when several observations land on one
    // month the latest wins.
    let mut observed: BTreeMap<usize, f64> = BTreeMap::new();
    for point in series {
        observed.insert(snap_month(point.time_months), point.value);
    }
    let last_month = *observed.keys().next_back().expect("non-empty");
    let mut aligned: Vec<Option<f64>> = vec![None; last_month + 1];
    for (&month, &value) in &observed {
        aligned[month] = Some(value);
    }

    // Fill interior gaps between consecutive observations. A gap is the
    // month distance between its bounding observations: distances under
    // `short_gap_months` carry the earlier value forward, anything longer
    // interpolates linearly. Leading/trailing months stay absent.
    let months: Vec<usize> = observed.keys().copied().collect();
    for pair in months.windows(2) {
        let (m1, m2) = (pair[0], pair[1]);
        let gap = m2 - m1;
        if gap <= 1 {
            continue;
        }
        let v1 = observed[&m1];
        let v2 = observed[&m2];
        for month in m1 + 1..m2 {
            aligned[month] = Some(if (gap as u32) < params.short_gap_months {
                v1
            } else {
                v1 + (v2 - v1) * (month - m1) as f64 / gap as f64
            });
        }
    }

    let window = params.window.max(1);
    let mut moving_average = vec![None; aligned.len()];
    let mut slope = vec![None; aligned.len()];
    for month in 0..aligned.len() {
        let start = month.saturating_sub(window - 1);
        let present: Vec<(f64, f64)> = (start..=month)
            .filter_map(|m| aligned[m].map(|v| (m as f64, v)))
            .collect();
        if present.len() >= 2 {
            moving_average[month] =
                Some(present.iter().map(|(_, v)| v).sum::<f64>() / present.len() as f64);
            slope[month] = ols_slope(&present);
        }
    }

    let mut rate_of_change = BTreeMap::new();
    for &delta in &params.roc_deltas {
        let delta_usize = delta as usize;
        let mut column = vec![None; aligned.len()];
        if delta_usize > 0 {
            for month in delta_usize..aligned.len() {
                if let (Some(now), Some(then)) = (aligned[month], aligned[month - delta_usize]) {
                    if then.abs() >= params.epsilon {
                        column[month] = Some((now - then) / (then.abs() * delta as f64));
                    }
                }
            }
        }
        rate_of_change.insert(delta, column);
    }

    Ok(TrendFeatures {
        aligned,
        moving_average,
        slope,
        rate_of_change,
    })
}

/// Parse the CSV tool payload (`time_months,value` header).
pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesPoint>, LongitudinalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| LongitudinalError::Csv(e.to_string()))?
        .clone();
    if headers.len() < 2 || headers[0].trim() != "time_months" || headers[1].trim() != "value" {
        return Err(LongitudinalError::Csv(format!(
            "expected header time_months,value; got {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut series = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LongitudinalError::Csv(e.to_string()))?;
        let parse = |field: usize| -> Result<f64, LongitudinalError> {
            record
                .get(field)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| LongitudinalError::Csv(format!("row {}: {e}", i + 2)))
        };
        series.push(SeriesPoint { time_months: parse(0)?, value: parse(1)? });
    }
    series.sort_by(|a, b| a.time_months.partial_cmp(&b.time_months).expect("finite"));
    Ok(series)
}

fn fmt_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Render features as the compact text block returned to the model.
pub fn render_features(features: &TrendFeatures) -> String {
    let mut out = String::new();
    out.push_str("month  value    ma       slope\n");
    for month in 0..features.aligned.len() {
        out.push_str(&format!(
            "{:<5}  {:<7}  {:<7}  {}\n",
            month,
            fmt_cell(features.aligned[month]),
            fmt_cell(features.moving_average[month]),
            fmt_cell(features.slope[month]),
        ));
    }
    for (delta, column) in &features.rate_of_change {
        let cells: Vec<String> = column
            .iter()
            .enumerate()
            .filter_map(|(m, v)| v.map(|v| format!("m{m}={v:.4}")))
            .collect();
        out.push_str(&format!(
            "rate_of_change[{delta}mo]: {}\n",
            if cells.is_empty() { "-".to_string() } else { cells.join(" ") }
        ));
    }
    out
}

/// Tool agent: CSV payload in, rendered trend features out.
pub struct LongitudinalAgent {
    params: TrendParams,
}

impl LongitudinalAgent {
    pub fn new(params: TrendParams) -> Self {
        Self { params }
    }
}

impl Default for LongitudinalAgent {
    fn default() -> Self {
        Self::new(TrendParams::default())
    }
}

impl ToolAgent for LongitudinalAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        let series = parse_series_csv(payload).map_err(|e| ToolError(e.to_string()))?;
        let features = features(&series, &self.params).map_err(|e| ToolError(e.to_string()))?;
        Ok(render_features(&features))
    }
}
