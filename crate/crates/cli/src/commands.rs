use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kernelsim::cluster::{agglomerative_ward, cluster_centroids, cut_dendrogram, kmeans_fit, KMeansParams};
use kernelsim::dataset::{aggregate_trials, MetricKind, Platform, RawSample};
use kernelsim::metricspace::{family_similarity_from_distances, pairwise_distances, DistanceMatrix};
use kernelsim::quality::{
    calinski_harabasz, davies_bouldin, dunn_index, evaluate, select_k as run_select_k, silhouette, ClusterMethod,
    Criterion, QualityReport, SelectKParams,
};
use kernelsim::report::{emit_versioned, export_boxplot_data, format_percent, pca_project};
use kernelsim::stability::{stability_series, stability_summary, write_summary_csv, StabilityReport};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::input::{load_samples, metrics_for, platforms_in, prepare, resolve_platforms};
use crate::{ClusterArgs, CliError, IngestArgs, KMeansArgs, MethodArg, SelectKArgs, SimilarArgs, StabilityArgs};

type CmdResult = Result<(), CliError>;

fn set_threads(n: usize) -> CmdResult {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CmdResult {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Internal(format!("{}: {e}", parent.display())))?;
    }
    fs::write(&path, contents).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CmdResult {
    let text = emit_versioned(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(dir, name, &text)
}

fn method(m: MethodArg, km: &KMeansArgs) -> ClusterMethod {
    match m {
        MethodArg::Ward => ClusterMethod::Agglomerative,
        MethodArg::Kmeans => ClusterMethod::KMeans { n_init: km.n_init, max_iter: km.max_iter },
    }
}

/// Finite reals as numbers, the rest as "inf"/"-inf"/"nan".
fn real(v: f64) -> Value {
    if v.is_finite() {
        v.into()
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Serialize)]
struct ClusterQuality {
    method: String,
    k: usize,
    #[serde(flatten)]
    report: QualityReport,
    indices: BTreeMap<&'static str, Value>,
}

pub fn cluster(a: ClusterArgs) -> CmdResult {
    set_threads(a.run.threads)?;
    let prep = prepare(&a.source, &a.prep)?;
    let m = &prep.table;
    let out = &a.run.out;

    let (partition, centroids) = match a.method {
        MethodArg::Ward => {
            let d = agglomerative_ward(m)?;
            let p = cut_dendrogram(&d, a.k)?;
            write_json(out, "dendrogram.json", &d)?;
            let c = cluster_centroids(m, &p);
            (p, c)
        }
        MethodArg::Kmeans => {
            let params = KMeansParams::new(a.k)
                .seed(a.run.seed)
                .n_init(a.kmeans.n_init)
                .max_iter(a.kmeans.max_iter);
            let model = kmeans_fit(m, &params)?;
            write_json(out, "kmeans.json", &model)?;
            (model.partition.clone(), model.centroids.clone())
        }
    };

    let mut indices = BTreeMap::new();
    if partition.k >= 2 {
        indices.insert("silhouette", real(silhouette(m, &partition)?));
        indices.insert("calinski_harabasz", real(calinski_harabasz(m, &partition)?));
        indices.insert("dunn", real(dunn_index(m, &partition)?));
        indices.insert("davies_bouldin", real(davies_bouldin(m, &partition)?));
    }
    let quality = ClusterQuality {
        method: method(a.method, &a.kmeans).to_string(),
        k: partition.k,
        report: evaluate(m, &partition)?,
        indices,
    };

    write_json(out, "partition.json", &partition)?;
    write_json(out, "quality.json", &quality)?;
    let boxes = export_boxplot_data(m, &partition, Some(&prep.raw))?;
    write_json(out, "boxplot.json", &boxes)?;
    if m.n_cols() >= 2 {
        write_json(out, "projection.json", &pca_project(m, Some(&centroids))?)?;
    }
    if let Some(spec) = &prep.transform {
        write_json(out, "transform.json", spec)?;
    }
    write_file(out, "table.csv", &m.to_csv_string())?;

    let fractions: Vec<&str> = prep
        .raw
        .columns()
        .iter()
        .filter(|c| c.kind == MetricKind::Fraction)
        .map(|c| c.name.as_str())
        .collect();
    for b in &boxes.clusters {
        let medians: Vec<String> = b
            .metrics
            .iter()
            .filter(|f| fractions.contains(&f.metric.as_str()))
            .map(|f| format!("{} {}", f.metric, format_percent(f.median)))
            .collect();
        let members: Vec<&str> = partition.members(b.cluster).iter().map(|&i| partition.labels[i].as_str()).collect();
        println!("cluster {} ({} kernels): {}", b.cluster, b.size, members.join(" "));
        if !medians.is_empty() {
            println!("  median {}", medians.join(", "));
        }
    }
    Ok(())
}

fn parse_k_range(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--k-range must look like `2..10` or `3`, got `{s}`"));
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once("..") {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi.trim_start_matches('='))?)),
        None => {
            let k = parse(s)?;
            Ok((k, k))
        }
    }
}

pub fn select_k(a: SelectKArgs) -> CmdResult {
    set_threads(a.run.threads)?;
    let criteria = a
        .criteria
        .iter()
        .map(|c| c.parse::<Criterion>().map_err(CliError::Usage))
        .collect::<Result<Vec<_>, _>>()?;
    let explicit = a.k_range.as_deref().map(parse_k_range).transpose()?;
    let prep = prepare(&a.source, &a.prep)?;
    let (k_min, k_max) = explicit.unwrap_or((2, 10.min(prep.table.n_rows().saturating_sub(1)).max(2)));
    let mut params = SelectKParams::new(method(a.method, &a.kmeans), k_min, k_max);
    params.criteria = criteria;
    params.seed = a.run.seed;
    params.gap_references = a.gap_refs;
    let report = run_select_k(&prep.table, &params)?;
    write_json(&a.run.out, "selection.json", &report)?;
    for (c, r) in &report.criteria {
        println!("{:<18} k = {}{}", c.name(), r.selected_k, if r.flagged { " (flagged)" } else { "" });
    }
    println!("consensus          k = {}", report.consensus_k);
    Ok(())
}

#[derive(Serialize)]
struct NeighborList<'a> {
    target: &'a str,
    neighbors: Vec<kernelsim::metricspace::Neighbor>,
}

pub fn similar(a: SimilarArgs) -> CmdResult {
    set_threads(a.run.threads)?;
    let dm = match &a.distances {
        Some(path) => {
            let f = fs::File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            DistanceMatrix::read_csv(f)?
        }
        None => pairwise_distances(&prepare(&a.source, &a.prep)?.table),
    };
    let out = &a.run.out;
    let neighbors = dm.neighbors(&a.target, a.neighbors.min(dm.len().saturating_sub(1)).max(1))?;
    for n in &neighbors {
        println!("{:<32} {:.4}", n.label, n.distance);
    }
    write_json(out, "neighbors.json", &NeighborList { target: &a.target, neighbors })?;
    if !a.family.is_empty() {
        let report = family_similarity_from_distances(&dm, &a.target, &a.family)?;
        println!(
            "family avg {:.4}, closest other {} at {:.4}, relative {:.2}",
            report.family_avg, report.closest_other.label, report.closest_other.distance, report.relative
        );
        write_json(out, "family.json", &report)?;
    }
    Ok(())
}

fn file_stem(kernel: &str) -> String {
    kernel
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') { c } else { '_' })
        .collect()
}

pub fn stability(a: StabilityArgs) -> CmdResult {
    let samples = load_samples(&a.input, a.format)?;
    let platforms = resolve_platforms(&samples, a.platform)?;
    let [platform]: [Platform; 1] = platforms.try_into().map_err(|_| {
        CliError::Usage("stability runs on one platform at a time; pass --platform cpu or gpu".into())
    })?;
    let metrics = metrics_for(platform, &a.metrics, false);
    let mut annotations = BTreeMap::new();
    for note in &a.annotate {
        let (name, value) = note
            .split_once('=')
            .and_then(|(n, v)| Some((n.trim().to_string(), v.trim().parse::<f64>().ok()?)))
            .ok_or_else(|| CliError::Usage(format!("--annotate expects NAME=NUMBER, got `{note}`")))?;
        annotations.insert(name, value);
    }

    let mut by_kernel: BTreeMap<&str, Vec<RawSample>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.platform == platform) {
        by_kernel.entry(s.kernel.as_str()).or_default().push(s.clone());
    }
    let groups: Vec<Vec<RawSample>> = by_kernel.into_values().collect();
    let reports = groups
        .par_iter()
        .map(|g| stability_series(g, &metrics, a.threshold_pct, a.rel_base))
        .collect::<kernelsim::Result<Vec<StabilityReport>>>()?;

    for r in &reports {
        write_json(&a.out, &format!("stability/{}.json", file_stem(&r.kernel)), r)?;
        match r.min_stable_size {
            Some(s) => println!("{:<32} stable from {s} bytes", r.kernel),
            None => println!("{:<32} never stable ({:.1}% at the largest pair)", r.kernel, r.worst_residual_pct),
        }
    }
    let summary = stability_summary(&reports, &annotations)?;
    write_json(&a.out, "stability/summary.json", &summary)?;
    let mut csv = Vec::new();
    write_summary_csv(&reports, &mut csv)?;
    write_file(&a.out, "stability/summary.csv", &String::from_utf8(csv).expect("csv is utf-8"))?;
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    samples: usize,
    groups: usize,
    kernels: usize,
    platforms: Vec<Platform>,
    sizes: BTreeMap<Platform, Vec<u64>>,
    metrics: BTreeMap<Platform, Vec<String>>,
    max_trials: usize,
    /// Largest trial-to-trial coefficient of variation seen per metric.
    max_cv: BTreeMap<String, Value>,
}

pub fn ingest_check(a: IngestArgs) -> CmdResult {
    let samples = load_samples(&a.input, a.format)?;
    let aggregated = aggregate_trials(&samples)?;
    let mut sizes: BTreeMap<Platform, Vec<u64>> = BTreeMap::new();
    let mut metrics: BTreeMap<Platform, Vec<String>> = BTreeMap::new();
    let mut max_cv: BTreeMap<String, f64> = BTreeMap::new();
    for g in &aggregated {
        let s = &g.sample;
        sizes.entry(s.platform).or_default().push(s.problem_size_bytes);
        metrics.entry(s.platform).or_default().extend(s.values.keys().cloned());
        for (m, cv) in &g.cv {
            let e = max_cv.entry(m.clone()).or_insert(0.0);
            *e = e.max(*cv);
        }
    }
    for v in sizes.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    for v in metrics.values_mut() {
        v.sort();
        v.dedup();
    }
    let kernels: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.kernel.as_str()).collect();
    let summary = IngestSummary {
        samples: samples.len(),
        groups: aggregated.len(),
        kernels: kernels.len(),
        platforms: platforms_in(&samples).into_iter().collect(),
        sizes,
        metrics,
        max_trials: aggregated.iter().map(|g| g.trials).max().unwrap_or(0),
        max_cv: max_cv.into_iter().map(|(k, v)| (k, real(v))).collect(),
    };
    let text = emit_versioned(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    print!("{text}");
    if let Some(dir) = &a.out {
        write_file(dir, "ingest.json", &text)?;
    }
    Ok(())
}
