//! Minimum problem size from which a kernel's metrics stop moving.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{format_real, RawSample};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_THRESHOLD_PCT: f64 = 5.0;

/// Denominator of the percent difference between adjacent sizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelBase {
    /// Value at the larger size.
    #[default]
    Larger,
    /// Value at the smaller size.
    Smaller,
    /// Mean of the two absolute values.
    Symmetric,
}

impl FromStr for RelBase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "larger" => Ok(RelBase::Larger),
            "smaller" => Ok(RelBase::Smaller),
            "symmetric" => Ok(RelBase::Symmetric),
            other => Err(format!("unknown rel-base `{other}` (larger|smaller|symmetric)")),
        }
    }
}

/// Percent difference between a value at a smaller size and one at the
/// next larger size. Zero when both are zero; infinite when only the
/// denominator vanishes.
pub fn percent_difference(smaller: f64, larger: f64, base: RelBase) -> f64 {
    let num = (smaller - larger).abs();
    if num == 0.0 {
        return 0.0;
    }
    let denom = match base {
        RelBase::Larger => larger.abs(),
        RelBase::Smaller => smaller.abs(),
        RelBase::Symmetric => (smaller.abs() + larger.abs()) / 2.0,
    };
    if denom == 0.0 {
        f64::INFINITY
    } else {
        100.0 * num / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub kernel: String,
    /// Ascending distinct problem sizes in bytes.
    pub sizes: Vec<u64>,
    /// For each adjacent size pair, the largest percent difference over
    /// the metrics.
    #[serde(with = "crate::nonfinite::vec")]
    pub pair_max_pct: Vec<f64>,
    /// Metric responsible for each pair's maximum.
    pub pair_worst_metric: Vec<String>,
    /// Indices of pairs whose difference is infinite (zero denominator).
    pub infinite_pairs: Vec<usize>,
    pub threshold_pct: f64,
    pub rel_base: RelBase,
    /// Smallest size from which every later pair stays under the threshold.
    pub min_stable_size: Option<u64>,
    /// Largest difference from `min_stable_size` on, or the last pair's
    /// difference when the kernel never stabilizes.
    #[serde(with = "crate::nonfinite")]
    pub worst_residual_pct: f64,
}

/// Stability of one kernel across its measured problem sizes.
///
/// Trials at the same size are averaged (in trial order) first, so the
/// report does not depend on trial order or on duplicated samples.
pub fn stability_series<S: AsRef<str>>(
    samples: &[RawSample],
    metrics: &[S],
    threshold_pct: f64,
    rel_base: RelBase,
) -> Result<StabilityReport> {
    let kernel = samples
        .first()
        .map(|s| s.kernel.clone())
        .ok_or_else(|| invalid("no samples"))?;
    if let Some(other) = samples.iter().find(|s| s.kernel != kernel) {
        return Err(invalid(format!(
            "stability series mixes kernels {kernel} and {}",
            other.kernel
        )));
    }
    if metrics.is_empty() {
        return Err(invalid("no metrics given"));
    }
    if threshold_pct.is_nan() || threshold_pct < 0.0 {
        return Err(invalid(format!("threshold must be non-negative, got {threshold_pct}")));
    }

    let mut by_size: BTreeMap<u64, Vec<&RawSample>> = BTreeMap::new();
    for s in samples {
        by_size.entry(s.problem_size_bytes).or_default().push(s);
    }
    if by_size.len() < 2 {
        return Err(invalid(format!(
            "{kernel}: stability needs at least 2 distinct problem sizes, got {}",
            by_size.len()
        )));
    }

    let sizes: Vec<u64> = by_size.keys().copied().collect();
    let mut series: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
    for (&size, group) in by_size.iter_mut() {
        group.sort_by_key(|s| s.trial);
        let row = metrics
            .iter()
            .map(|name| {
                let name = name.as_ref();
                let vals = group
                    .iter()
                    .map(|s| {
                        s.values.get(name).copied().ok_or_else(|| Error::AbsentMetric {
                            metric: name.to_string(),
                            context: format!("{kernel} at {size} bytes"),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        series.push(row);
    }

    let mut pair_max_pct = Vec::with_capacity(sizes.len() - 1);
    let mut pair_worst_metric = Vec::with_capacity(sizes.len() - 1);
    let mut infinite_pairs = Vec::new();
    for (i, w) in series.windows(2).enumerate() {
        let (mut worst, mut which) = (0.0, 0);
        for (j, (a, b)) in w[0].iter().zip(&w[1]).enumerate() {
            let pct = percent_difference(*a, *b, rel_base);
            if pct > worst {
                worst = pct;
                which = j;
            }
        }
        if worst.is_infinite() {
            infinite_pairs.push(i);
        }
        pair_max_pct.push(worst);
        pair_worst_metric.push(metrics[which].as_ref().to_string());
    }

    // walk back from the largest pair while pairs stay under the threshold
    let mut first_stable = pair_max_pct.len();
    while first_stable > 0 && pair_max_pct[first_stable - 1] < threshold_pct {
        first_stable -= 1;
    }
    let (min_stable_size, worst_residual_pct) = if first_stable < pair_max_pct.len() {
        let tail = pair_max_pct[first_stable..].iter().copied().fold(0.0, f64::max);
        (Some(sizes[first_stable]), tail)
    } else {
        (None, *pair_max_pct.last().expect("at least one pair"))
    };

    Ok(StabilityReport {
        kernel,
        sizes,
        pair_max_pct,
        pair_worst_metric,
        infinite_pairs,
        threshold_pct,
        rel_base,
        min_stable_size,
        worst_residual_pct,
    })
}

/// Counts over a set of stability reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub kernels: usize,
    /// Number of kernels per minimum stable size.
    pub histogram: BTreeMap<u64, usize>,
    pub never_stable: Vec<String>,
    /// Reference lines (e.g. cache capacities in MB) passed through as given.
    pub reference_lines: BTreeMap<String, f64>,
}

impl StabilitySummary {
    pub fn never_stable_count(&self) -> usize {
        self.never_stable.len()
    }
}

pub fn stability_summary(
    reports: &[StabilityReport],
    annotations: &BTreeMap<String, f64>,
) -> Result<StabilitySummary> {
    if reports.is_empty() {
        return Err(invalid("no stability reports to summarize"));
    }
    let mut histogram = BTreeMap::new();
    let mut never_stable = Vec::new();
    for r in reports {
        match r.min_stable_size {
            Some(s) => *histogram.entry(s).or_insert(0) += 1,
            None => never_stable.push(r.kernel.clone()),
        }
    }
    Ok(StabilitySummary {
        kernels: reports.len(),
        histogram,
        never_stable,
        reference_lines: annotations.clone(),
    })
}

/// `kernel,min_stable_size_bytes,worst_residual_pct`, one line per report.
/// Never-stable kernels leave the size column empty.
pub fn write_summary_csv<W: Write>(reports: &[StabilityReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kernel", "min_stable_size_bytes", "worst_residual_pct"])?;
    for r in reports {
        w.write_record([
            r.kernel.clone(),
            r.min_stable_size.map(|s| s.to_string()).unwrap_or_default(),
            if r.worst_residual_pct.is_finite() {
                format_real(r.worst_residual_pct)
            } else {
                "inf".to_string()
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}
