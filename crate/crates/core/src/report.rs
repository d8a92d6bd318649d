//! Plot-ready exports: 2D projection, per-cluster box statistics and the
//! versioned JSON bundle that carries every report type.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cluster::{Dendrogram, KMeansModel, Partition};
use crate::dataset::{MetricTable, Scale};
use crate::error::{invalid, Error, Result};
use crate::metricspace::FamilyReport;
use crate::preprocess::TransformSpec;
use crate::quality::{KSelectionReport, QualityReport, RatioReport};
use crate::stability::{StabilityReport, StabilitySummary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub columns: Vec<String>,
    /// Two orthonormal directions in metric space.
    pub components: [Vec<f64>; 2],
    pub explained_variance_ratio: [f64; 2],
    /// Set when the data has rank below 2; the second ratio is then 0.
    pub degenerate: bool,
    pub mean: Vec<f64>,
    pub coords: Vec<ProjectedPoint>,
    /// Projected centroids, indexed by cluster id.
    pub centroid_coords: Vec<[f64; 2]>,
}

impl Projection2D {
    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let dot = |c: &[f64]| centered.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}

/// Flip `v` so its largest-magnitude entry is positive. Near-ties go to the
/// lowest index.
fn orient(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if let Some(lead) = v.iter().position(|x| x.abs() >= max * (1.0 - 1e-9)) {
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Principal-component projection onto the top two directions of the
/// (population) covariance. Centroids, when given, are projected with the
/// basis fitted on the rows alone.
pub fn pca_project(m: &MetricTable, centroids: Option<&[Vec<f64>]>) -> Result<Projection2D> {
    let (n, d) = (m.n_rows(), m.n_cols());
    if n < 2 || d < 2 {
        return Err(invalid(format!("projection needs at least 2 rows and 2 columns, got {n}x{d}")));
    }
    if let Some(cs) = centroids {
        if let Some(bad) = cs.iter().find(|c| c.len() != d) {
            return Err(Error::DimensionMismatch { left: d, right: bad.len() });
        }
    }

    let mut mean = vec![0.0; d];
    for row in m.rows() {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in m.rows() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();

    let mut components: [Vec<f64>; 2] = [0, 1].map(|i| eig.eigenvectors.column(order[i]).iter().copied().collect());
    components.iter_mut().for_each(|c| orient(c));

    let lambda = [0, 1].map(|i| eig.eigenvalues[order[i]].max(0.0));
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let degenerate = lambda[1] <= tol;
    let explained_variance_ratio = if total > 0.0 {
        [lambda[0] / total, if degenerate { 0.0 } else { lambda[1] / total }]
    } else {
        [0.0, 0.0]
    };

    let mut out = Projection2D {
        columns: m.column_names().map(str::to_string).collect(),
        components,
        explained_variance_ratio,
        degenerate,
        mean,
        coords: Vec::with_capacity(n),
        centroid_coords: Vec::new(),
    };
    out.coords = m
        .labels()
        .iter()
        .zip(m.rows())
        .map(|(label, row)| {
            let [x, y] = out.project(row);
            ProjectedPoint { label: label.clone(), x, y }
        })
        .collect();
    out.centroid_coords = centroids
        .unwrap_or_default()
        .iter()
        .map(|c| out.project(c))
        .collect();
    Ok(out)
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub metric: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(metric: impl Into<String>, values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        FiveNumber {
            metric: metric.into(),
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBoxes {
    pub cluster: usize,
    pub size: usize,
    pub metrics: Vec<FiveNumber>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotData {
    /// Scale the statistics were computed on.
    pub source: Scale,
    pub clusters: Vec<ClusterBoxes>,
}

/// Per-cluster, per-metric five-number summaries. When `raw` is given its
/// values (looked up by row label) are summarized instead of `m`'s.
pub fn export_boxplot_data(m: &MetricTable, p: &Partition, raw: Option<&MetricTable>) -> Result<BoxplotData> {
    p.check_covers(m)?;
    let (table, rows): (&MetricTable, Vec<usize>) = match raw {
        Some(r) => {
            let rows = m
                .labels()
                .iter()
                .map(|l| r.row_index(l).ok_or_else(|| Error::UnknownLabel(l.clone())))
                .collect::<Result<_>>()?;
            (r, rows)
        }
        None => (m, (0..m.n_rows()).collect()),
    };
    let clusters = (0..p.k)
        .map(|c| {
            let members = p.members(c);
            let metrics = table
                .column_names()
                .enumerate()
                .map(|(j, name)| {
                    let vals: Vec<f64> = members.iter().map(|&i| table.get(rows[i], j)).collect();
                    FiveNumber::of(name, &vals)
                })
                .collect();
            ClusterBoxes { cluster: c, size: members.len(), metrics }
        })
        .collect();
    Ok(BoxplotData {
        source: if raw.is_some() { Scale::Raw } else { m.scale() },
        clusters,
    })
}

/// A fraction rendered as a percentage with one decimal, e.g. `93.5%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

/// Every report type in one versioned document. Sections appear in field
/// order and absent sections are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportBundle {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dendrogram: Option<Dendrogram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kmeans: Option<KMeansModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<RatioReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<KSelectionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<Vec<StabilityReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_summary: Option<StabilitySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Projection2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxplot: Option<BoxplotData>,
}

impl Default for ReportBundle {
    fn default() -> Self {
        ReportBundle {
            schema_version: SCHEMA_VERSION,
            transform: None,
            partition: None,
            dendrogram: None,
            kmeans: None,
            quality: None,
            ratios: None,
            selection: None,
            family: None,
            stability: None,
            stability_summary: None,
            projection: None,
            boxplot: None,
        }
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn emit_report(bundle: &ReportBundle) -> Result<String> {
    let mut s = serde_json::to_string_pretty(bundle)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report(text: &str) -> Result<ReportBundle> {
    let bundle: ReportBundle = serde_json::from_str(text)?;
    if bundle.schema_version != SCHEMA_VERSION {
        return Err(invalid(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            bundle.schema_version
        )));
    }
    Ok(bundle)
}

#[derive(Serialize)]
struct Versioned<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    inner: &'a T,
}

#[derive(Serialize)]
struct VersionedData<'a, T> {
    schema_version: u32,
    data: &'a T,
}

/// A report written as `{"schema_version": 1, ...its fields}`, or as
/// `{"schema_version": 1, "data": ...}` when it is not a JSON object.
/// Used for single-report output files.
pub fn emit_versioned<T: Serialize>(value: &T) -> Result<String> {
    let mut s = if serde_json::to_value(value)?.is_object() {
        serde_json::to_string_pretty(&Versioned { schema_version: SCHEMA_VERSION, inner: value })?
    } else {
        serde_json::to_string_pretty(&VersionedData { schema_version: SCHEMA_VERSION, data: value })?
    };
    s.push('\n');
    Ok(s)
}
