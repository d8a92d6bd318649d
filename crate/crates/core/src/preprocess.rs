//! Log transform + z-score standardization of metric tables.

use serde::{Deserialize, Serialize};

use crate::dataset::{MetricKind, MetricTable, Scale};
use crate::error::{invalid, Error, Result};

/// Default max/min span above which a positive column is log-transformed.
pub const DEFAULT_LOG_THRESHOLD: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub enum LogPolicy {
    /// Log every strictly positive, non-fraction column whose max/min
    /// ratio exceeds the threshold.
    Auto { threshold_ratio: f64 },
    /// Log exactly these columns.
    Explicit(Vec<String>),
    None,
}

impl Default for LogPolicy {
    fn default() -> Self {
        LogPolicy::Auto {
            threshold_ratio: DEFAULT_LOG_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub metric: String,
    pub log: bool,
    pub mean: f64,
    pub std: f64,
}

impl ColumnTransform {
    fn apply(&self, row: &str, v: f64) -> Result<f64> {
        let x = if self.log {
            if v <= 0.0 {
                return Err(Error::NonPositiveLog {
                    metric: self.metric.clone(),
                    row: row.to_string(),
                    value: v,
                });
            }
            v.ln()
        } else {
            v
        };
        Ok((x - self.mean) / self.std)
    }
}

/// Fitted per-column parameters, one entry per retained column.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformSpec(pub Vec<ColumnTransform>);

impl TransformSpec {
    pub fn columns(&self) -> &[ColumnTransform] {
        &self.0
    }
}

/// Population mean and standard deviation, two-pass.
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn wants_log(table: &MetricTable, j: usize, values: &[f64], policy: &LogPolicy) -> bool {
    let col = &table.columns()[j];
    match policy {
        LogPolicy::None => false,
        LogPolicy::Explicit(names) => names.contains(&col.name),
        LogPolicy::Auto { threshold_ratio } => {
            if col.kind == MetricKind::Fraction && table.scale() == Scale::Raw {
                return false;
            }
            if values.iter().any(|v| *v <= 0.0) {
                return false;
            }
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max / min > *threshold_ratio
        }
    }
}

/// Fits the log flags and per-column mean/std on `table` and returns the
/// standardized table together with the fitted spec.
///
/// Columns with zero variance are dropped; their names are listed under the
/// `dropped_zero_variance` meta key of the returned table.
pub fn fit_transform(table: &MetricTable, log_policy: &LogPolicy) -> Result<(MetricTable, TransformSpec)> {
    if table.n_rows() == 0 {
        return Err(invalid("cannot standardize an empty table"));
    }
    if let LogPolicy::Explicit(names) = log_policy {
        for n in names {
            if table.column_index(n).is_none() {
                return Err(Error::MissingColumn(n.clone()));
            }
        }
    }
    if let LogPolicy::Auto { threshold_ratio } = log_policy {
        if threshold_ratio.is_nan() || *threshold_ratio < 1.0 {
            return Err(invalid(format!("log threshold ratio must be >= 1, got {threshold_ratio}")));
        }
    }

    let mut spec = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in table.columns().iter().enumerate() {
        let raw = table.column(j);
        let log = wants_log(table, j, &raw, log_policy);
        let xs = if log {
            raw.iter()
                .zip(table.labels())
                .map(|(&v, row)| {
                    if v <= 0.0 {
                        Err(Error::NonPositiveLog {
                            metric: col.name.clone(),
                            row: row.clone(),
                            value: v,
                        })
                    } else {
                        Ok(v.ln())
                    }
                })
                .collect::<Result<Vec<f64>>>()?
        } else {
            raw
        };
        let (mean, std) = mean_std(&xs);
        if std <= 1e-12 * (1.0 + mean.abs()) {
            dropped.push(col.name.clone());
            continue;
        }
        spec.push(ColumnTransform {
            metric: col.name.clone(),
            log,
            mean,
            std,
        });
    }
    if spec.is_empty() {
        return Err(Error::AllZeroVariance);
    }
    let spec = TransformSpec(spec);
    let mut out = apply_transform(table, &spec)?;
    out.set_meta("dropped_zero_variance", dropped.join(","));
    Ok((out, spec))
}

/// Projects a table into a previously fitted space. Nothing is refit.
pub fn apply_transform(table: &MetricTable, spec: &TransformSpec) -> Result<MetricTable> {
    let idx = spec
        .0
        .iter()
        .map(|c| table.column_index(&c.metric).ok_or_else(|| Error::MissingColumn(c.metric.clone())))
        .collect::<Result<Vec<usize>>>()?;
    let mut data = Vec::with_capacity(table.n_rows());
    for (i, label) in table.labels().iter().enumerate() {
        let row = table.row(i);
        data.push(
            spec.0
                .iter()
                .zip(&idx)
                .map(|(c, &j)| c.apply(label, row[j]))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let columns = idx.iter().map(|&j| table.columns()[j].clone()).collect();
    let mut out = MetricTable::new(table.labels().to_vec(), columns, data, Scale::Standardized)?;
    for (k, v) in table.meta() {
        out.set_meta(k.clone(), v.clone());
    }
    let logged: Vec<&str> = spec.0.iter().filter(|c| c.log).map(|c| c.metric.as_str()).collect();
    out.set_meta("log_columns", logged.join(","));
    Ok(out)
}
