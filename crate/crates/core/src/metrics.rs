//! Count-error metrics (MAE, MSE, RMSE, MAPE, ACP) and per-density-bin
//! macro reports.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics need at least one prediction")]
    Empty,
    #[error("non-finite count for image {0}")]
    NonFinite(String),
    #[error("density bounds must be ascending, got ({0}, {1})")]
    Bounds(f64, f64),
    #[error("CSV row {row}: {msg}")]
    Csv { row: usize, msg: String },
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Relative tolerance used by ACP.
pub const ACP_TOLERANCE: f64 = 0.05;

/// Ground-truth and predicted count for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPair {
    pub image_id: String,
    pub y: f64,
    pub y_hat: f64,
}

impl CountPair {
    pub fn new(image_id: impl Into<String>, y: f64, y_hat: f64) -> Self {
        Self {
            image_id: image_id.into(),
            y,
            y_hat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Percent; `None` when every ground-truth count is zero.
    pub mape: Option<f64>,
    /// Pairs with `y = 0`, left out of MAPE only.
    pub mape_excluded: usize,
    /// Percent of images with `|ŷ - y| <= 0.05 y`.
    pub acp: f64,
}

/// Computes every metric on raw (unrounded) counts.
pub fn compute_metrics(pairs: &[CountPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(p) = pairs.iter().find(|p| !p.y.is_finite() || !p.y_hat.is_finite()) {
        return Err(MetricsError::NonFinite(p.image_id.clone()));
    }
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    let mut hits = 0usize;
    for p in pairs {
        let err = (p.y - p.y_hat).abs();
        abs += err;
        sq += err * err;
        if p.y > 0.0 {
            pct += err / p.y;
            pct_n += 1;
        }
        if err <= ACP_TOLERANCE * p.y {
            hits += 1;
        }
    }
    let mse = sq / n;
    Ok(MetricsReport {
        n: pairs.len(),
        mae: abs / n,
        mse,
        rmse: mse.sqrt(),
        mape: (pct_n > 0).then(|| 100.0 * pct / pct_n as f64),
        mape_excluded: pairs.len() - pct_n,
        acp: 100.0 * hits as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DensityBin {
    Low,
    Medium,
    High,
}

impl DensityBin {
    pub const ALL: [DensityBin; 3] = [DensityBin::Low, DensityBin::Medium, DensityBin::High];
}

impl fmt::Display for DensityBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityBin::Low => "low",
            DensityBin::Medium => "medium",
            DensityBin::High => "high",
        })
    }
}

/// Upper bounds (inclusive) of the low and medium bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityBounds {
    pub low_max: f64,
    pub medium_max: f64,
}

impl Default for DensityBounds {
    fn default() -> Self {
        Self {
            low_max: 250.0,
            medium_max: 500.0,
        }
    }
}

impl DensityBounds {
    pub fn new(low_max: f64, medium_max: f64) -> Result<Self> {
        if !(low_max < medium_max) {
            return Err(MetricsError::Bounds(low_max, medium_max));
        }
        Ok(Self { low_max, medium_max })
    }

    pub fn classify(&self, y: f64) -> DensityBin {
        if y <= self.low_max {
            DensityBin::Low
        } else if y <= self.medium_max {
            DensityBin::Medium
        } else {
            DensityBin::High
        }
    }
}

/// Partitions pairs by ground-truth count, preserving input order.
pub fn bin_by_density(pairs: &[CountPair], bounds: DensityBounds) -> [(DensityBin, Vec<CountPair>); 3] {
    let mut out = DensityBin::ALL.map(|b| (b, Vec::new()));
    for p in pairs {
        let idx = bounds.classify(p.y) as usize;
        out[idx].1.push(p.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroRow {
    pub bin: DensityBin,
    pub report: MetricsReport,
}

/// Metrics computed independently inside each populated density bin.
/// Empty bins are omitted rather than reported as zeros.
pub fn macro_report(pairs: &[CountPair], bounds: DensityBounds) -> Vec<MacroRow> {
    bin_by_density(pairs, bounds)
        .into_iter()
        .filter_map(|(bin, members)| compute_metrics(&members).ok().map(|report| MacroRow { bin, report }))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"))
}

/// One-row-per-model table with the MAE/MSE/RMSE/MAPE/ACP columns.
pub fn metrics_markdown(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from("| Model | MAE ↓ | MSE ↓ | RMSE ↓ | MAPE ↓ | ACP ↑ |\n|---|---:|---:|---:|---:|---:|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {}% | {:.2}% |\n",
            name,
            r.mae,
            r.mse,
            r.rmse,
            fmt_opt(r.mape),
            r.acp
        ));
    }
    out
}

/// Macro MAE and ACP per density bin; absent bins are shown as `-`.
pub fn macro_markdown(rows: &[(&str, &[MacroRow])], bounds: DensityBounds) -> String {
    let mut out = format!(
        "| Model | Low (≤{0}) MAE ↓ | Low ACP ↑ | Medium ({0}–{1}] MAE ↓ | Medium ACP ↑ | High (>{1}) MAE ↓ | High ACP ↑ |\n\
         |---|---:|---:|---:|---:|---:|---:|\n",
        bounds.low_max, bounds.medium_max
    );
    for (name, bins) in rows {
        out.push_str(&format!("| {name} "));
        for bin in DensityBin::ALL {
            match bins.iter().find(|r| r.bin == bin) {
                Some(r) => out.push_str(&format!("| {:.2} | {:.2}% ", r.report.mae, r.report.acp)),
                None => out.push_str("| - | - "),
            }
        }
        out.push_str("|\n");
    }
    out
}

pub const METRICS_CSV_HEADER: &str = "scope,n,mae,mse,rmse,mape,mape_excluded,acp";

pub fn metrics_csv_row(scope: &str, r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        scope,
        r.n,
        r.mae,
        r.mse,
        r.rmse,
        r.mape.map_or_else(|| "NA".to_string(), |m| m.to_string()),
        r.mape_excluded,
        r.acp
    )
}

/// Overall row followed by one row per populated bin.
pub fn metrics_csv(overall: &MetricsReport, bins: &[MacroRow]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n{}\n", metrics_csv_row("all", overall));
    for b in bins {
        out.push_str(&metrics_csv_row(&b.bin.to_string(), &b.report));
        out.push('\n');
    }
    out
}

impl std::str::FromStr for DensityBin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DensityBin::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| format!("unknown density bin {s:?}"))
    }
}

fn csv_records(text: &str, header: &str) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let found = reader.headers().map_err(|e| MetricsError::Csv {
        row: 1,
        msg: e.to_string(),
    })?;
    let want: Vec<&str> = header.split(',').collect();
    if found.iter().collect::<Vec<_>>() != want {
        return Err(MetricsError::Csv {
            row: 1,
            msg: format!("expected header {header:?}"),
        });
    }
    reader
        .records()
        .enumerate()
        .map(|(i, r)| {
            r.map(|r| (i + 2, r)).map_err(|e| MetricsError::Csv {
                row: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize) -> Result<T> {
    rec[i].parse().map_err(|_| MetricsError::Csv {
        row,
        msg: format!("bad value {:?} in column {}", &rec[i], i + 1),
    })
}

/// Reads the output of [`metrics_csv`] back as `(scope, report)` rows.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    csv_records(text, METRICS_CSV_HEADER)?
        .into_iter()
        .map(|(row, r)| {
            let mape = match &r[5] {
                "NA" => None,
                _ => Some(field(&r, 5, row)?),
            };
            Ok((
                r[0].to_string(),
                MetricsReport {
                    n: field(&r, 1, row)?,
                    mae: field(&r, 2, row)?,
                    mse: field(&r, 3, row)?,
                    rmse: field(&r, 4, row)?,
                    mape,
                    mape_excluded: field(&r, 6, row)?,
                    acp: field(&r, 7, row)?,
                },
            ))
        })
        .collect()
}

pub const PREDICTIONS_CSV_HEADER: &str = "image_id,y,y_hat";

pub fn predictions_csv(pairs: &[CountPair]) -> String {
    let mut out = format!("{PREDICTIONS_CSV_HEADER}\n");
    for p in pairs {
        out.push_str(&format!("{},{},{}\n", p.image_id, p.y, p.y_hat));
    }
    out
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<CountPair>> {
    csv_records(text, PREDICTIONS_CSV_HEADER)?
        .into_iter()
        .map(|(row, r)| Ok(CountPair::new(&r[0], field(&r, 1, row)?, field(&r, 2, row)?)))
        .collect()
}
