//! Cluster evaluation and cluster-count selection.
//!
//! Validity indices return `f64::INFINITY` (or `NEG_INFINITY` for BIC) as a
//! sentinel when the index degenerates, e.g. zero within-cluster spread.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    agglomerative_ward, cluster_centroids, cut_dendrogram, kmeans_fit, KMeansParams, Partition,
    DEFAULT_MAX_ITER, DEFAULT_N_INIT,
};
use crate::dataset::{MetricTable, Scale};
use crate::error::{invalid, Result};
use crate::metricspace::{dist, pairwise_distances, sq_dist};

/// Per-cluster mean distance of members to their centroid, by cluster id.
pub fn compactness(m: &MetricTable, p: &Partition) -> Result<Vec<f64>> {
    p.check_covers(m)?;
    let centroids = cluster_centroids(m, p);
    let mut sum = vec![0.0; p.k];
    for (i, &c) in p.assignments.iter().enumerate() {
        sum[c] += dist(m.row(i), &centroids[c]);
    }
    Ok(sum
        .into_iter()
        .zip(p.sizes())
        .map(|(s, n)| s / n as f64)
        .collect())
}

/// Mean distance over all unordered pairs of cluster centroids.
pub fn separation(m: &MetricTable, p: &Partition) -> Result<f64> {
    p.check_covers(m)?;
    if p.k < 2 {
        return Err(invalid("separation needs at least 2 clusters"));
    }
    let c = cluster_centroids(m, p);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..p.k {
        for j in (i + 1)..p.k {
            total += dist(&c[i], &c[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Between-group, within-group and total sums of squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumsOfSquares {
    pub bgss: f64,
    pub wgss: f64,
    pub total: f64,
}

pub fn sums_of_squares(m: &MetricTable, p: &Partition) -> Result<SumsOfSquares> {
    p.check_covers(m)?;
    let n = m.n_rows() as f64;
    let mut grand = vec![0.0; m.n_cols()];
    for row in m.rows() {
        for (g, x) in grand.iter_mut().zip(row) {
            *g += x;
        }
    }
    grand.iter_mut().for_each(|g| *g /= n);
    let centroids = cluster_centroids(m, p);
    let bgss = centroids
        .iter()
        .zip(p.sizes())
        .map(|(c, size)| size as f64 * sq_dist(c, &grand))
        .sum();
    let wgss = p
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(m.row(i), &centroids[c]))
        .sum();
    let total = m.rows().map(|r| sq_dist(r, &grand)).sum();
    Ok(SumsOfSquares { bgss, wgss, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub sizes: Vec<usize>,
    /// Lower is better.
    pub compactness: Vec<f64>,
    /// Higher is better. Absent for a single cluster.
    pub separation: Option<f64>,
    /// `compactness[1] / compactness[0]` for two-cluster partitions.
    pub compactness_ratio: Option<f64>,
    pub bgss: f64,
    pub wgss: f64,
}

pub fn evaluate(m: &MetricTable, p: &Partition) -> Result<QualityReport> {
    let compactness = compactness(m, p)?;
    let separation = if p.k >= 2 { Some(separation(m, p)?) } else { None };
    let compactness_ratio =
        (p.k == 2 && compactness[0] > 0.0).then(|| compactness[1] / compactness[0]);
    let ss = sums_of_squares(m, p)?;
    Ok(QualityReport {
        sizes: p.sizes(),
        compactness,
        separation,
        compactness_ratio,
        bgss: ss.bgss,
        wgss: ss.wgss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRatio {
    pub compactness: [f64; 2],
    /// Cluster 1 compactness over cluster 0 compactness.
    pub compactness_ratio: f64,
    pub separation: f64,
}

/// Side-by-side comparison of two-cluster results from several methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub methods: BTreeMap<String, MethodRatio>,
    /// Largest compactness ratio over the smallest.
    pub compactness_relative: f64,
    /// Largest separation over the smallest.
    pub separation_relative: f64,
}

fn max_over_min(xs: impl Iterator<Item = f64> + Clone) -> Result<f64> {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.fold(f64::INFINITY, f64::min);
    if min.is_nan() || min <= 0.0 {
        return Err(invalid(format!("relative difference needs positive values, min is {min}")));
    }
    Ok(max / min)
}

pub fn ratio_report(reports: &BTreeMap<String, QualityReport>) -> Result<RatioReport> {
    if reports.is_empty() {
        return Err(invalid("no reports to compare"));
    }
    let mut methods = BTreeMap::new();
    for (name, r) in reports {
        if r.compactness.len() != 2 {
            return Err(invalid(format!(
                "{name}: ratio report needs exactly 2 clusters, got {}",
                r.compactness.len()
            )));
        }
        let [c0, c1] = [r.compactness[0], r.compactness[1]];
        if c0 == 0.0 {
            return Err(invalid(format!("{name}: cluster 0 compactness is zero")));
        }
        let separation = r
            .separation
            .ok_or_else(|| invalid(format!("{name}: missing separation")))?;
        methods.insert(
            name.clone(),
            MethodRatio {
                compactness: [c0, c1],
                compactness_ratio: c1 / c0,
                separation,
            },
        );
    }
    Ok(RatioReport {
        compactness_relative: max_over_min(methods.values().map(|m| m.compactness_ratio))?,
        separation_relative: max_over_min(methods.values().map(|m| m.separation))?,
        methods,
    })
}

fn check_k_range(m: &MetricTable, p: &Partition, what: &str) -> Result<()> {
    p.check_covers(m)?;
    let n = m.n_rows();
    if p.k < 2 || p.k + 1 > n {
        return Err(invalid(format!(
            "{what} needs 2 <= k <= n - 1, got k = {} with n = {n}",
            p.k
        )));
    }
    Ok(())
}

/// Mean silhouette width. Members of singleton clusters score 0.
pub fn silhouette(m: &MetricTable, p: &Partition) -> Result<f64> {
    check_k_range(m, p, "silhouette")?;
    let d = pairwise_distances(m);
    let sizes = p.sizes();
    let n = m.n_rows();
    let mut total = 0.0;
    for i in 0..n {
        let own = p.assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; p.k];
        for j in 0..n {
            sums[p.assignments[j]] += d.get(i, j);
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..p.k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Variance ratio criterion `(BGSS / (k − 1)) / (WGSS / (n − k))`.
pub fn calinski_harabasz(m: &MetricTable, p: &Partition) -> Result<f64> {
    check_k_range(m, p, "Calinski-Harabasz")?;
    let ss = sums_of_squares(m, p)?;
    if ss.wgss == 0.0 {
        return Ok(f64::INFINITY);
    }
    let (n, k) = (m.n_rows() as f64, p.k as f64);
    Ok((ss.bgss / (k - 1.0)) / (ss.wgss / (n - k)))
}

/// Smallest inter-cluster point distance over largest cluster diameter.
pub fn dunn_index(m: &MetricTable, p: &Partition) -> Result<f64> {
    p.check_covers(m)?;
    if p.k < 2 {
        return Err(invalid("Dunn index needs at least 2 clusters"));
    }
    let n = m.n_rows();
    let mut min_between = f64::INFINITY;
    let mut max_diameter: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(m.row(i), m.row(j));
            if p.assignments[i] == p.assignments[j] {
                max_diameter = max_diameter.max(v);
            } else {
                min_between = min_between.min(v);
            }
        }
    }
    if max_diameter == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(min_between / max_diameter)
}

/// Davies-Bouldin index (lower is better).
pub fn davies_bouldin(m: &MetricTable, p: &Partition) -> Result<f64> {
    p.check_covers(m)?;
    if p.k < 2 {
        return Err(invalid("Davies-Bouldin index needs at least 2 clusters"));
    }
    let spread = compactness(m, p)?;
    let c = cluster_centroids(m, p);
    let mut total = 0.0;
    for i in 0..p.k {
        let mut worst: f64 = 0.0;
        for j in (0..p.k).filter(|&j| j != i) {
            let sep = dist(&c[i], &c[j]);
            if sep == 0.0 {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((spread[i] + spread[j]) / sep);
        }
        total += worst;
    }
    Ok(total / p.k as f64)
}

/// Bayesian information criterion of a spherical Gaussian mixture with
/// shared variance, as used by x-means (higher is better).
///
/// Variance is `SSE / (n − k)`; the model has `k·(d + 1)` free parameters.
/// Undefined fits (`n <= k` or zero variance) return `NEG_INFINITY`.
pub fn bic_score(m: &MetricTable, p: &Partition) -> Result<f64> {
    p.check_covers(m)?;
    let (n, k, d) = (m.n_rows() as f64, p.k as f64, m.n_cols() as f64);
    if n <= k {
        return Ok(f64::NEG_INFINITY);
    }
    let sse = sums_of_squares(m, p)?.wgss;
    let variance = sse / (n - k);
    if variance <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let two_pi_ln = (2.0 * std::f64::consts::PI).ln();
    let log_likelihood: f64 = p
        .sizes()
        .into_iter()
        .map(|size| {
            let r = size as f64;
            -r / 2.0 * two_pi_ln - r * d / 2.0 * variance.ln() - (r - k) / 2.0 + r * r.ln()
                - r * n.ln()
        })
        .sum();
    let params = k * (d + 1.0);
    Ok(log_likelihood - params / 2.0 * n.ln())
}

/// How partitions are produced for a given k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum ClusterMethod {
    Agglomerative,
    #[serde(rename = "kmeans")]
    KMeans { n_init: usize, max_iter: usize },
}

impl ClusterMethod {
    pub fn kmeans() -> Self {
        ClusterMethod::KMeans {
            n_init: DEFAULT_N_INIT,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::Agglomerative => "agglomerative",
            ClusterMethod::KMeans { .. } => "kmeans",
        })
    }
}

/// Partitions of `m` for each requested k. The dendrogram is built once and
/// cut repeatedly; k-means is refit per k with the same seed.
pub fn partitions(m: &MetricTable, method: ClusterMethod, ks: &[usize], seed: u64) -> Result<Vec<Partition>> {
    match method {
        ClusterMethod::Agglomerative => {
            let d = agglomerative_ward(m)?;
            ks.iter().map(|&k| cut_dendrogram(&d, k)).collect()
        }
        ClusterMethod::KMeans { n_init, max_iter } => ks
            .iter()
            .map(|&k| {
                let params = KMeansParams::new(k).seed(seed).n_init(n_init).max_iter(max_iter);
                kmeans_fit(m, &params).map(|model| model.partition)
            })
            .collect(),
    }
}

/// Within-cluster dispersion `Σ_r (1 / 2n_r) Σ_{i,j ∈ r} ‖xᵢ − xⱼ‖²`.
pub fn within_dispersion(m: &MetricTable, p: &Partition) -> f64 {
    (0..p.k)
        .map(|c| {
            let members = p.members(c);
            let mut s = 0.0;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    s += sq_dist(m.row(i), m.row(j));
                }
            }
            // unordered pairs counted once, hence 1/n_r rather than 1/(2 n_r)
            s / members.len() as f64
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub k: usize,
    #[serde(with = "crate::nonfinite")]
    pub log_w: f64,
    /// Mean of log W over the reference datasets.
    pub ref_log_w: f64,
    #[serde(with = "crate::nonfinite")]
    pub gap: f64,
    /// Reference standard deviation scaled by `sqrt(1 + 1/b)`.
    pub s_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub method: ClusterMethod,
    pub references: usize,
    pub seed: u64,
    pub points: Vec<GapPoint>,
    /// Constant features left out of reference generation.
    pub dropped_features: Vec<String>,
}

/// Seed for the gap reference dataset with index `b`.
fn reference_rng(seed: u64, b: usize) -> ChaCha8Rng {
    // distinct key from the k-means replicate streams
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_705f_7265_6673);
    rng.set_stream(b as u64);
    rng
}

/// Gap statistic for k = 1..=k_max against `b` uniform reference datasets
/// drawn over each feature's observed range.
///
/// `Gap(k) = mean_b(log W*_k) − log W_k` and
/// `s_k = sd_b(log W*_k) · sqrt(1 + 1/b)` with the population standard
/// deviation. Reference datasets are generated and clustered independently,
/// so the curve is identical for any degree of internal parallelism.
pub fn gap_statistic(
    m: &MetricTable,
    method: ClusterMethod,
    k_max: usize,
    b: usize,
    seed: u64,
) -> Result<GapCurve> {
    let n = m.n_rows();
    if k_max == 0 || k_max + 1 > n {
        return Err(invalid(format!("gap statistic needs 1 <= k_max <= n - 1 = {}, got {k_max}", n.saturating_sub(1))));
    }
    if b < 2 {
        return Err(invalid(format!("gap statistic needs at least 2 reference datasets, got {b}")));
    }
    let ks: Vec<usize> = (1..=k_max).collect();

    let ranges: Vec<(f64, f64)> = (0..m.n_cols())
        .map(|j| {
            let col = m.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect();
    let dropped_features: Vec<String> = ranges
        .iter()
        .zip(m.column_names())
        .filter(|((lo, hi), _)| lo == hi)
        .map(|(_, name)| name.to_string())
        .collect();
    let live: Vec<usize> = (0..m.n_cols()).filter(|&j| ranges[j].0 < ranges[j].1).collect();
    if live.is_empty() {
        return Err(invalid("every feature is constant; no reference distribution"));
    }
    let live_names: Vec<String> = live.iter().map(|&j| m.columns()[j].name.clone()).collect();

    let log_w = |table: &MetricTable, seed: u64| -> Result<Vec<f64>> {
        Ok(partitions(table, method, &ks, seed)?
            .iter()
            .map(|p| within_dispersion(table, p).ln())
            .collect())
    };
    let observed = log_w(&m.select_columns(&live), seed)?;

    let reference = |r: usize| -> Result<Vec<f64>> {
        let mut rng = reference_rng(seed, r);
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                live.iter()
                    .map(|&j| {
                        let (lo, hi) = ranges[j];
                        lo + rng.random::<f64>() * (hi - lo)
                    })
                    .collect()
            })
            .collect();
        let table = MetricTable::new(
            m.labels().to_vec(),
            live_names.iter().map(|c| crate::dataset::MetricDescriptor::infer(c)).collect(),
            data,
            Scale::Standardized,
        )?;
        log_w(&table, rng.random::<u64>())
    };

    #[cfg(feature = "parallel")]
    let refs: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..b).into_par_iter().map(reference).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let refs: Vec<Vec<f64>> = (0..b).map(reference).collect::<Result<_>>()?;

    let bf = b as f64;
    let points = ks
        .iter()
        .enumerate()
        .map(|(idx, &k)| {
            let mean = refs.iter().map(|r| r[idx]).sum::<f64>() / bf;
            let var = refs.iter().map(|r| (r[idx] - mean).powi(2)).sum::<f64>() / bf;
            GapPoint {
                k,
                log_w: observed[idx],
                ref_log_w: mean,
                gap: mean - observed[idx],
                s_k: var.sqrt() * (1.0 + 1.0 / bf).sqrt(),
            }
        })
        .collect();
    Ok(GapCurve {
        method,
        references: b,
        seed,
        points,
        dropped_features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub k: usize,
    /// Set when no k satisfied the stopping rule and the largest was taken.
    pub flagged: bool,
}

/// Smallest k with `Gap(k) >= Gap(k+1) − s_{k+1}`; the largest k of the
/// curve, flagged, when none qualifies.
pub fn tibshirani_select(curve: &[GapPoint]) -> Result<Selection> {
    if curve.len() < 2 {
        return Err(invalid("Tibshirani rule needs at least 2 gap values"));
    }
    for w in curve.windows(2) {
        if w[0].gap >= w[1].gap - w[1].s_k {
            return Ok(Selection {
                k: w[0].k,
                flagged: false,
            });
        }
    }
    Ok(Selection {
        k: curve.last().expect("non-empty").k,
        flagged: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Silhouette,
    Gap,
    CalinskiHarabasz,
    Dunn,
    DaviesBouldin,
    Bic,
}

impl Criterion {
    /// Silhouette, gap, Calinski-Harabasz and Dunn.
    pub const DEFAULT: [Criterion; 4] = [
        Criterion::Silhouette,
        Criterion::Gap,
        Criterion::CalinskiHarabasz,
        Criterion::Dunn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Silhouette => "silhouette",
            Criterion::Gap => "gap",
            Criterion::CalinskiHarabasz => "calinski_harabasz",
            Criterion::Dunn => "dunn",
            Criterion::DaviesBouldin => "davies_bouldin",
            Criterion::Bic => "bic",
        }
    }

    fn min_k(self) -> usize {
        match self {
            Criterion::Gap | Criterion::Bic => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "silhouette" => Criterion::Silhouette,
            "gap" => Criterion::Gap,
            "calinski_harabasz" | "ch" | "vrc" => Criterion::CalinskiHarabasz,
            "dunn" => Criterion::Dunn,
            "davies_bouldin" | "db" => Criterion::DaviesBouldin,
            "bic" => Criterion::Bic,
            other => return Err(format!("unknown criterion `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    #[serde(with = "crate::nonfinite::map")]
    pub scores: BTreeMap<usize, f64>,
    pub selected_k: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub method: ClusterMethod,
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub criteria: BTreeMap<Criterion, CriterionResult>,
    /// Gap curve, including the k_max + 1 point when it was computable.
    pub gap: Option<GapCurve>,
    pub consensus_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectKParams {
    pub method: ClusterMethod,
    pub criteria: Vec<Criterion>,
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub gap_references: usize,
}

impl SelectKParams {
    pub fn new(method: ClusterMethod, k_min: usize, k_max: usize) -> Self {
        SelectKParams {
            method,
            criteria: Criterion::DEFAULT.to_vec(),
            k_min,
            k_max,
            seed: crate::cluster::DEFAULT_SEED,
            gap_references: 50,
        }
    }
}

/// Most frequent value; ties go to the smaller k.
pub fn consensus(selections: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in selections {
        *counts.entry(k).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k)
}

fn pick(scores: &BTreeMap<usize, f64>, maximize: bool) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &v) in scores {
        if v.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, bv)) => {
                if maximize {
                    v > bv
                } else {
                    v < bv
                }
            }
        };
        if better {
            best = Some((k, v));
        }
    }
    best.map(|b| b.0).unwrap_or_else(|| *scores.keys().next().expect("non-empty scores"))
}

/// Evaluates each criterion over `k_min..=k_max` and combines the picks.
pub fn select_k(m: &MetricTable, params: &SelectKParams) -> Result<KSelectionReport> {
    let n = m.n_rows();
    let (k_min, k_max) = (params.k_min, params.k_max);
    if k_min == 0 || k_min > k_max || k_max + 1 > n {
        return Err(invalid(format!(
            "k range must satisfy 1 <= k_min <= k_max <= n - 1 = {}, got {k_min}..{k_max}",
            n.saturating_sub(1)
        )));
    }
    if params.criteria.is_empty() {
        return Err(invalid("no selection criteria given"));
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let parts = partitions(m, params.method, &ks, params.seed)?;

    let mut criteria = BTreeMap::new();
    let mut gap = None;
    for &criterion in &params.criteria {
        if criteria.contains_key(&criterion) {
            continue;
        }
        let result = if criterion == Criterion::Gap {
            let gap_k_max = (k_max + 1).min(n - 1);
            let curve = gap_statistic(m, params.method, gap_k_max, params.gap_references, params.seed)?;
            let window: Vec<GapPoint> = curve
                .points
                .iter()
                .filter(|p| p.k >= k_min)
                .cloned()
                .collect();
            let sel = if window.len() >= 2 {
                let s = tibshirani_select(&window)?;
                if s.k > k_max {
                    Selection { k: k_max, flagged: true }
                } else {
                    s
                }
            } else {
                Selection { k: k_max, flagged: true }
            };
            let scores = window
                .iter()
                .filter(|p| p.k <= k_max)
                .map(|p| (p.k, p.gap))
                .collect();
            gap = Some(curve);
            CriterionResult {
                scores,
                selected_k: sel.k,
                flagged: sel.flagged,
            }
        } else {
            let mut scores = BTreeMap::new();
            for (p, &k) in parts.iter().zip(&ks) {
                if k < criterion.min_k() {
                    continue;
                }
                let v = match criterion {
                    Criterion::Silhouette => silhouette(m, p)?,
                    Criterion::CalinskiHarabasz => calinski_harabasz(m, p)?,
                    Criterion::Dunn => dunn_index(m, p)?,
                    Criterion::DaviesBouldin => davies_bouldin(m, p)?,
                    Criterion::Bic => bic_score(m, p)?,
                    Criterion::Gap => unreachable!(),
                };
                scores.insert(k, v);
            }
            if scores.is_empty() {
                return Err(invalid(format!(
                    "{criterion} needs k >= {}, range is {k_min}..={k_max}",
                    criterion.min_k()
                )));
            }
            let maximize = criterion != Criterion::DaviesBouldin;
            CriterionResult {
                selected_k: pick(&scores, maximize),
                scores,
                flagged: false,
            }
        };
        criteria.insert(criterion, result);
    }
    let picks: Vec<usize> = criteria.values().map(|r| r.selected_k).collect();
    Ok(KSelectionReport {
        method: params.method,
        k_min,
        k_max,
        seed: params.seed,
        consensus_k: consensus(&picks).expect("at least one criterion"),
        criteria,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> MetricTable {
        let rows: Vec<String> = (0..xs.len()).map(|i| format!("p{i}")).collect();
        MetricTable::standardized(&rows, &["x".to_string()], xs.iter().map(|x| vec![*x]).collect()).unwrap()
    }

    fn part(groups: &[usize]) -> Partition {
        let labels: Vec<String> = (0..groups.len()).map(|i| format!("p{i}")).collect();
        Partition::new(labels, groups.to_vec()).unwrap()
    }

    fn fixture() -> (MetricTable, Partition) {
        (line(&[0.0, 0.1, 10.0, 10.1]), part(&[0, 0, 1, 1]))
    }

    #[test]
    fn compactness_examples() {
        let t = MetricTable::standardized(&["a", "b"], &["x", "y"], vec![vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(compactness(&t, &part(&[0, 0])).unwrap(), vec![1.0]);
        assert_eq!(compactness(&t, &part(&[0, 1])).unwrap(), vec![0.0, 0.0]);
        let c = compactness(&line(&[0.0, 1.0, 2.0]), &part(&[0, 0, 0])).unwrap();
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn separation_examples() {
        // centroids (1,0) and (4,4)
        let t = MetricTable::standardized(
            &["a", "b", "c", "d"],
            &["x", "y"],
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 3.0], vec![4.0, 5.0]],
        )
        .unwrap();
        assert_eq!(separation(&t, &part(&[0, 0, 1, 1])).unwrap(), 5.0);
        let s = separation(&line(&[0.0, 1.0, 2.0]), &part(&[0, 1, 2])).unwrap();
        assert!((s - 4.0 / 3.0).abs() < 1e-15);
        assert!(separation(&t, &part(&[0, 0, 0, 0])).is_err());
    }

    fn report(c: [f64; 2], sep: f64) -> QualityReport {
        QualityReport {
            sizes: vec![1, 1],
            compactness: c.to_vec(),
            separation: Some(sep),
            compactness_ratio: Some(c[1] / c[0]),
            bgss: 0.0,
            wgss: 0.0,
        }
    }

    #[test]
    fn ratio_examples() {
        let mut m = BTreeMap::new();
        m.insert("agglomerative".to_string(), report([0.34, 1.90], 2.68));
        m.insert("kmeans".to_string(), report([0.45, 1.94], 2.82));
        let r = ratio_report(&m).unwrap();
        assert!((r.methods["agglomerative"].compactness_ratio - 5.59).abs() < 0.01);
        assert!((r.methods["kmeans"].compactness_ratio - 4.31).abs() < 0.01);
        assert!((r.compactness_relative - 1.30).abs() < 0.01);
        assert!((r.separation_relative - 1.05).abs() < 0.01);

        m.insert("zero".into(), report([0.0, 1.0], 1.0));
        assert!(ratio_report(&m).is_err());
    }

    #[test]
    fn index_hand_values() {
        let (t, p) = fixture();
        let sil = silhouette(&t, &p).unwrap();
        let hand = (9.95 / 10.05 + 9.85 / 9.95) / 2.0;
        assert!((sil - hand).abs() < 1e-12);
        assert!((sil - 0.990).abs() < 1e-6);
        assert!((calinski_harabasz(&t, &p).unwrap() - 20000.0).abs() < 1e-6);
        assert!((dunn_index(&t, &p).unwrap() - 99.0).abs() < 1e-6);
        assert!((davies_bouldin(&t, &p).unwrap() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn silhouette_degenerate_and_parametric() {
        let t = line(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(silhouette(&t, &part(&[0, 0, 1, 1])).unwrap(), 0.0);
        let mut last = -1.0;
        for gap in [1.0, 5.0, 25.0, 125.0] {
            let s = silhouette(&line(&[0.0, 0.1, gap, gap + 0.1]), &part(&[0, 0, 1, 1])).unwrap();
            assert!(s > last && s < 1.0);
            last = s;
        }
        assert!(silhouette(&t, &part(&[0, 0, 0, 0])).is_err());
        assert!(silhouette(&t, &part(&[0, 1, 2, 3])).is_err());
    }

    #[test]
    fn sentinels() {
        let t = line(&[0.0, 0.0, 5.0, 5.0]);
        let p = part(&[0, 0, 1, 1]);
        assert_eq!(calinski_harabasz(&t, &p).unwrap(), f64::INFINITY);
        assert_eq!(dunn_index(&t, &p).unwrap(), f64::INFINITY);
        assert_eq!(bic_score(&t, &p).unwrap(), f64::NEG_INFINITY);
        let coincident = line(&[0.0, 2.0, 1.0, 1.0]);
        assert_eq!(davies_bouldin(&coincident, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dunn_collapses_when_merged() {
        let (t, p) = fixture();
        let two = dunn_index(&t, &p).unwrap();
        let merged = dunn_index(&t, &part(&[0, 1, 0, 0])).unwrap();
        assert!(merged < two / 100.0);
    }

    #[test]
    fn db_unchanged_by_duplication() {
        let (t, p) = fixture();
        let dup = line(&[0.0, 0.1, 10.0, 10.1, 0.0, 0.1, 10.0, 10.1]);
        let dp = part(&[0, 0, 1, 1, 0, 0, 1, 1]);
        assert!((davies_bouldin(&t, &p).unwrap() - davies_bouldin(&dup, &dp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dispersion_equals_sse() {
        let t = line(&[0.0, 1.0, 3.0, 7.0, 8.0]);
        let p = part(&[0, 0, 0, 1, 1]);
        let sse = sums_of_squares(&t, &p).unwrap().wgss;
        assert!((within_dispersion(&t, &p) - sse).abs() < 1e-12);
    }

    fn gp(k: usize, gap: f64, s_k: f64) -> GapPoint {
        GapPoint {
            k,
            log_w: 0.0,
            ref_log_w: 0.0,
            gap,
            s_k,
        }
    }

    #[test]
    fn tibshirani_rule() {
        let c = [gp(1, 0.2, 0.05), gp(2, 1.0, 0.05), gp(3, 0.9, 0.05)];
        assert_eq!(tibshirani_select(&c).unwrap(), Selection { k: 2, flagged: false });
        let rising = [gp(1, 0.1, 1e-6), gp(2, 0.2, 1e-6), gp(3, 0.3, 1e-6)];
        assert_eq!(tibshirani_select(&rising).unwrap(), Selection { k: 3, flagged: true });
        let immediate = [gp(1, 0.5, 0.1), gp(2, 0.55, 0.1)];
        assert_eq!(tibshirani_select(&immediate).unwrap().k, 1);
        assert!(tibshirani_select(&c[..1]).is_err());
    }

    #[test]
    fn consensus_mode_with_small_tie_break() {
        assert_eq!(consensus(&[2, 2, 3, 4]), Some(2));
        assert_eq!(consensus(&[3, 3, 2, 2]), Some(2));
        assert_eq!(consensus(&[5]), Some(5));
        assert_eq!(consensus(&[]), None);
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in [
            Criterion::Silhouette,
            Criterion::Gap,
            Criterion::CalinskiHarabasz,
            Criterion::Dunn,
            Criterion::DaviesBouldin,
            Criterion::Bic,
        ] {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
        }
        assert!("elbow".parse::<Criterion>().is_err());
    }
}
