//! JSON-in, JSON-out operations behind the browser bindings.

use kernelsim::cluster::{agglomerative_ward, cluster_centroids, cut_dendrogram, kmeans_fit, KMeansParams, Partition};
use kernelsim::dataset::{MetricTable, Scale};
use kernelsim::metricspace::{nearest_neighbors, Neighbor};
use kernelsim::preprocess::{fit_transform, LogPolicy};
use kernelsim::quality::{
    calinski_harabasz, davies_bouldin, dunn_index, evaluate, select_k as score_ks, silhouette, ClusterMethod,
    Criterion, KSelectionReport, QualityReport, SelectKParams,
};
use kernelsim::report::{pca_project, Projection2D};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Analysis(#[from] kernelsim::Error),
    #[error("bad request: {0}")]
    Request(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DemoError>;

/// A dozen synthetic kernels in three rough behaviour groups.
pub const SAMPLE_TABLE: &str = "\
row,topdown.core_bound,topdown.memory_bound,topdown.fetch_latency,topdown.fetch_bandwidth
Stream_COPY,0.05,0.82,0.02,0.01
Stream_TRIAD,0.06,0.80,0.02,0.02
Stream_ADD,0.05,0.79,0.03,0.01
Basic_DAXPY,0.08,0.74,0.03,0.02
Apps_LTIMES,0.31,0.42,0.04,0.03
Apps_LTIMES_NOVIEW,0.29,0.44,0.05,0.03
Apps_VOL3D,0.35,0.38,0.04,0.04
Polybench_GEMM,0.52,0.18,0.03,0.02
Polybench_2MM,0.49,0.21,0.03,0.03
Polybench_3MM,0.50,0.20,0.04,0.02
Basic_TRAP_INT,0.12,0.02,0.21,0.14
Basic_PI_REDUCE,0.10,0.03,0.24,0.12
";

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Ward,
    Kmeans,
}

fn default_k() -> usize {
    2
}

fn default_seed() -> u64 {
    kernelsim::cluster::DEFAULT_SEED
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterRequest {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

#[derive(Debug, Serialize)]
pub struct Indices {
    #[serde(with = "kernelsim::nonfinite")]
    pub silhouette: f64,
    #[serde(with = "kernelsim::nonfinite")]
    pub calinski_harabasz: f64,
    #[serde(with = "kernelsim::nonfinite")]
    pub dunn: f64,
    #[serde(with = "kernelsim::nonfinite")]
    pub davies_bouldin: f64,
}

#[derive(Debug, Serialize)]
pub struct ClusterResult {
    pub partition: Partition,
    pub quality: QualityReport,
    pub indices: Indices,
    pub projection: Option<Projection2D>,
}

fn load(table_csv: &str, standardize: bool) -> Result<MetricTable> {
    let raw = MetricTable::read_csv(table_csv.as_bytes(), Scale::Raw)?;
    if !standardize {
        return Ok(raw);
    }
    Ok(fit_transform(&raw, &LogPolicy::default())?.0)
}

fn request<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T> {
    let json = if json.trim().is_empty() { "{}" } else { json };
    Ok(serde_json::from_str(json)?)
}

pub fn cluster_table(table_csv: &str, req: &ClusterRequest) -> Result<ClusterResult> {
    let m = load(table_csv, req.standardize)?;
    if req.k < 2 || req.k >= m.n_rows() {
        return Err(DemoError::Invalid(format!("k must be in 2..{}, got {}", m.n_rows().saturating_sub(1), req.k)));
    }
    let partition = match req.method {
        Method::Ward => cut_dendrogram(&agglomerative_ward(&m)?, req.k)?,
        Method::Kmeans => kmeans_fit(&m, &KMeansParams::new(req.k).seed(req.seed))?.partition,
    };
    let indices = Indices {
        silhouette: silhouette(&m, &partition)?,
        calinski_harabasz: calinski_harabasz(&m, &partition)?,
        dunn: dunn_index(&m, &partition)?,
        davies_bouldin: davies_bouldin(&m, &partition)?,
    };
    let projection = if m.n_cols() >= 2 {
        Some(pca_project(&m, Some(&cluster_centroids(&m, &partition)))?)
    } else {
        None
    };
    Ok(ClusterResult { quality: evaluate(&m, &partition)?, partition, indices, projection })
}

pub fn cluster(table_csv: &str, request_json: &str) -> Result<String> {
    let result = cluster_table(table_csv, &request(request_json)?)?;
    Ok(serde_json::to_string(&result)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRequest {
    #[serde(default)]
    pub method: Method,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub criteria: Option<Vec<String>>,
    pub gap_references: Option<usize>,
}

pub fn select_table(table_csv: &str, req: &SelectRequest) -> Result<KSelectionReport> {
    let m = load(table_csv, true)?;
    let method = match req.method {
        Method::Ward => ClusterMethod::Agglomerative,
        Method::Kmeans => ClusterMethod::kmeans(),
    };
    let k_min = req.k_min.unwrap_or(2);
    let k_max = req.k_max.unwrap_or_else(|| 8.min(m.n_rows().saturating_sub(1)));
    let mut params = SelectKParams::new(method, k_min, k_max);
    params.seed = req.seed;
    params.gap_references = req.gap_references.unwrap_or(20);
    if let Some(names) = &req.criteria {
        params.criteria = names
            .iter()
            .map(|n| n.parse::<Criterion>())
            .collect::<std::result::Result<_, _>>()
            .map_err(DemoError::Invalid)?;
    }
    Ok(score_ks(&m, &params)?)
}

pub fn select_k(table_csv: &str, request_json: &str) -> Result<String> {
    let report = select_table(table_csv, &request(request_json)?)?;
    Ok(serde_json::to_string(&report)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborsRequest {
    pub target: String,
    #[serde(default = "default_neighbors")]
    pub k: usize,
}

fn default_neighbors() -> usize {
    5
}

pub fn neighbors_of(table_csv: &str, req: &NeighborsRequest) -> Result<Vec<Neighbor>> {
    let m = load(table_csv, true)?;
    Ok(nearest_neighbors(&m, &req.target, req.k)?)
}

pub fn neighbors(table_csv: &str, request_json: &str) -> Result<String> {
    let found = neighbors_of(table_csv, &request(request_json)?)?;
    Ok(serde_json::to_string(&found)?)
}
