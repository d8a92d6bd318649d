use std::collections::BTreeSet;

use kernelsim::cluster::{
    agglomerative_ward, cluster_centroids, cut_dendrogram, kmeans_fit, kmeans_plus_plus, lloyd, replicate_rng,
    KMeansParams, Partition,
};
use kernelsim::dataset::{aggregate_trials, derive_gpu_rates, merge_platforms, MetricTable, Platform, RawSample, Scale};
use kernelsim::metricspace::{distance, family_similarity, nearest_neighbors};
use kernelsim::preprocess::{fit_transform, LogPolicy};
use kernelsim::quality::{
    calinski_harabasz, compactness, davies_bouldin, dunn_index, evaluate, gap_statistic, select_k, silhouette,
    sums_of_squares, ClusterMethod, SelectKParams,
};
use kernelsim::report::{emit_report, export_boxplot_data, parse_report, pca_project, ReportBundle};
use kernelsim::stability::{stability_series, stability_summary, RelBase};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i:02}")).collect()
}

fn make(rows: &[Vec<f64>]) -> MetricTable {
    let cols: Vec<String> = (0..rows[0].len()).map(|j| format!("m{j}")).collect();
    MetricTable::standardized(&labels(rows.len()), &cols, rows.to_vec()).unwrap()
}

fn rows(n: std::ops::Range<usize>, d: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (n, d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), n))
}

/// Table plus a partition into `k` non-empty clusters.
fn partitioned(k_max: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    rows(4..14, 1..5).prop_flat_map(move |r| {
        let n = r.len();
        let k = 2..=k_max.min(n - 1);
        (Just(r), k).prop_flat_map(move |(r, k)| {
            (Just(r), prop::collection::vec(0..k, n)).prop_map(move |(r, mut a)| {
                // make every id appear
                for (c, slot) in a.iter_mut().take(k).enumerate() {
                    *slot = c;
                }
                (r, a)
            })
        })
    })
}

fn orthogonal(d: usize, seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_iterator(d, d, seed.iter().cycle().take(d * d).copied()).qr().q()
}

fn transform(rows: &[Vec<f64>], q: &DMatrix<f64>, shift: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let v = q * nalgebra::DVector::from_column_slice(r);
            v.iter().map(|x| x + shift).collect()
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a.is_infinite() && a == b) || (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn gpu_sample(counts: [f64; 4], time: f64) -> RawSample {
    let names = ["gpu.l1_transactions", "gpu.l2_transactions", "gpu.hbm_transactions", "gpu.warp_instructions"];
    let mut values: std::collections::BTreeMap<String, f64> =
        names.iter().zip(counts).map(|(n, c)| (n.to_string(), c)).collect();
    values.insert("gpu.time_sec".into(), time);
    RawSample { kernel: "k".into(), platform: Platform::Gpu, problem_size_bytes: 1, trial: 0, values }
}

/// Per-cluster mean squared distance to the centroid.
fn mean_sq_spread(m: &MetricTable, p: &Partition) -> Vec<f64> {
    let centroids = cluster_centroids(m, p);
    (0..p.k)
        .map(|c| {
            let members = p.members(c);
            let total: f64 = members
                .iter()
                .map(|&i| m.row(i).iter().zip(&centroids[c]).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                .sum();
            total / members.len() as f64
        })
        .collect()
}

#[test]
fn merged_mean_distance_can_shrink() {
    let t = make(&[vec![0.0], vec![0.0], vec![0.0], vec![10.0], vec![0.0], vec![0.0], vec![0.0], vec![-10.0]]);
    let split = Partition::new(t.labels().to_vec(), vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    let whole = Partition::new(t.labels().to_vec(), vec![0; 8]).unwrap();
    assert_eq!(compactness(&t, &split).unwrap(), [3.75, 3.75]);
    assert_eq!(compactness(&t, &whole).unwrap(), [2.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rates_scale_consistently(
        counts in prop::array::uniform4(0.0..1e12f64),
        time in 1e-3..10.0f64,
        factor in 0.5..4.0f64,
    ) {
        let base = derive_gpu_rates(&gpu_sample(counts, time)).unwrap();
        let both = derive_gpu_rates(&gpu_sample(counts.map(|c| c * factor), time * factor)).unwrap();
        let counts_only = derive_gpu_rates(&gpu_sample(counts.map(|c| c * factor), time)).unwrap();
        for r in ["gpu.l1_rate", "gpu.l2_rate", "gpu.hbm_rate", "gpu.ips"] {
            prop_assert!(close(both.values[r], base.values[r], 1e-12));
            prop_assert!(close(counts_only.values[r], base.values[r] * factor, 1e-12));
        }
    }

    #[test]
    fn trial_order_does_not_matter(vals in prop::collection::vec(0.0..1.0f64, 1..6), rot in 0usize..6) {
        let samples: Vec<RawSample> = vals.iter().enumerate().map(|(t, v)| RawSample {
            kernel: "k".into(), platform: Platform::Cpu, problem_size_bytes: 8, trial: t as u32,
            values: [("topdown.memory_bound".to_string(), *v)].into_iter().collect(),
        }).collect();
        let mut shuffled = samples.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        prop_assert_eq!(aggregate_trials(&samples).unwrap(), aggregate_trials(&shuffled).unwrap());
    }

    #[test]
    fn merge_is_intersection(a in prop::collection::btree_set(0u8..12, 1..10), b in prop::collection::btree_set(0u8..12, 1..10)) {
        let mk = |set: &BTreeSet<u8>, prefix: &str| {
            let rows: Vec<String> = set.iter().map(|i| format!("K{i}")).collect();
            let cols = [format!("{prefix}.a"), format!("{prefix}.b")];
            let data = set.iter().map(|i| vec![*i as f64 / 20.0, 0.5]).collect();
            MetricTable::standardized(&rows, &cols, data).unwrap()
        };
        let merged = merge_platforms(&mk(&a, "topdown"), &mk(&b, "gpu"));
        let common: BTreeSet<String> = a.intersection(&b).map(|i| format!("K{i}")).collect();
        match merged {
            Ok(m) => {
                prop_assert_eq!(m.labels().iter().cloned().collect::<BTreeSet<_>>(), common);
                prop_assert_eq!(m.n_cols(), 4);
            }
            Err(_) => prop_assert!(common.is_empty()),
        }
    }

    #[test]
    fn table_csv_round_trip(r in rows(1..8, 1..5), scale in 1e-20..1e20f64) {
        let scaled: Vec<Vec<f64>> = r.iter().map(|row| row.iter().map(|v| v * scale).collect()).collect();
        let t = make(&scaled);
        let back = MetricTable::read_csv(t.to_csv_string().as_bytes(), Scale::Standardized).unwrap();
        prop_assert_eq!(back.labels(), t.labels());
        for i in 0..t.n_rows() {
            for j in 0..t.n_cols() {
                prop_assert_eq!(back.get(i, j).to_bits(), t.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn standardization_moments_and_ranks(r in rows(2..20, 1..6)) {
        let t = make(&r);
        let Ok((out, spec)) = fit_transform(&t, &LogPolicy::None) else {
            // every column constant
            return Ok(());
        };
        for (j, ct) in spec.0.iter().enumerate() {
            let src = t.column(t.column_index(&ct.metric).unwrap());
            let col = out.column(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
            for a in 0..src.len() {
                for b in 0..src.len() {
                    if src[a] < src[b] {
                        prop_assert!(col[a] < col[b]);
                    }
                }
            }
        }
        let (again, spec2) = fit_transform(&out, &LogPolicy::default()).unwrap();
        prop_assert!(spec2.0.iter().all(|c| !c.log && c.mean.abs() < 1e-9 && (c.std - 1.0).abs() < 1e-9));
        prop_assert_eq!(again.n_cols(), out.n_cols());
    }

    #[test]
    fn standardization_commutes_with_row_order(r in rows(2..12, 1..4), rot in 1usize..12) {
        let mut p = r.clone();
        let len = p.len();
        p.rotate_left(rot % len);
        let (a, sa) = fit_transform(&make(&r), &LogPolicy::None).unwrap_or_else(|_| (make(&r), Default::default()));
        let (b, sb) = fit_transform(&make(&p), &LogPolicy::None).unwrap_or_else(|_| (make(&p), Default::default()));
        prop_assert_eq!(sa.0.len(), sb.0.len());
        for (x, y) in sa.0.iter().zip(&sb.0) {
            prop_assert!(x.metric == y.metric && close(x.mean, y.mean, 1e-12) && close(x.std, y.std, 1e-12));
        }
        for i in 0..len {
            let j = (i + len - rot % len) % len;
            for c in 0..a.n_cols() {
                prop_assert!(close(a.get(i, c), b.get(j, c), 1e-9));
            }
        }
    }

    #[test]
    fn distance_is_a_metric(
        x in prop::collection::vec(-100.0..100.0f64, 4),
        y in prop::collection::vec(-100.0..100.0f64, 4),
        z in prop::collection::vec(-100.0..100.0f64, 4),
    ) {
        let d = |a: &[f64], b: &[f64]| distance(a, b).unwrap();
        prop_assert!(d(&x, &y) >= 0.0);
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!(x == y || d(&x, &y) > 0.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
    }

    #[test]
    fn neighbors_ignore_row_order(r in rows(3..12, 1..4), rot in 1usize..12) {
        let t = make(&r);
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.rotate_left(rot % r.len());
        let p = t.select_rows(&order);
        let k = r.len() - 1;
        prop_assert_eq!(nearest_neighbors(&t, "k00", k).unwrap(), nearest_neighbors(&p, "k00", k).unwrap());
    }

    #[test]
    fn relative_above_one_iff_family_is_tighter(r in rows(4..10, 1..3)) {
        let t = make(&r);
        let rep = family_similarity(&t, "k00", &["k00", "k01"]).unwrap();
        prop_assert_eq!(rep.relative > 1.0, rep.closest_other.distance > rep.family_avg);
    }

    #[test]
    fn ward_heights_monotone_and_cuts_nested(r in rows(2..14, 1..5)) {
        let t = make(&r);
        let d = agglomerative_ward(&t).unwrap();
        let h = d.heights();
        prop_assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        for k in 2..=r.len() {
            let fine = cut_dendrogram(&d, k).unwrap();
            let coarse = cut_dendrogram(&d, k - 1).unwrap();
            prop_assert!(fine.refines(&coarse));
        }
    }

    #[test]
    fn ward_ignores_row_order(r in rows(3..12, 1..4), rot in 1usize..12) {
        let t = make(&r);
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.rotate_left(rot % r.len());
        order.swap(0, r.len() - 1);
        let p = t.select_rows(&order);
        let (da, db) = (agglomerative_ward(&t).unwrap(), agglomerative_ward(&p).unwrap());
        for (a, b) in da.heights().iter().zip(db.heights()) {
            prop_assert!(close(*a, b, 1e-9));
        }
        for k in 1..=r.len() {
            let pa = cut_dendrogram(&da, k).unwrap();
            let pb = cut_dendrogram(&db, k).unwrap();
            prop_assert!(same_groups(&pa, &pb));
        }
    }

    #[test]
    fn lloyd_never_increases_inertia(r in rows(3..15, 1..4), k in 1usize..5, seed in any::<u64>()) {
        let t = make(&r);
        let k = k.min(r.len());
        let init = kmeans_plus_plus(&t, k, &mut replicate_rng(seed, 0));
        let run = lloyd(&t, init, 100);
        prop_assert!(run.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * (1.0 + w[0])));
        let params = KMeansParams::new(k).seed(seed).n_init(4);
        let (a, b) = (kmeans_fit(&t, &params).unwrap(), kmeans_fit(&t, &params).unwrap());
        prop_assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sums_of_squares_decompose((r, a) in partitioned(5)) {
        let t = make(&r);
        let p = Partition::new(t.labels().to_vec(), a).unwrap();
        let ss = sums_of_squares(&t, &p).unwrap();
        prop_assert!((ss.bgss + ss.wgss - ss.total).abs() <= 1e-9 * (1.0 + ss.total));
    }

    #[test]
    fn indices_are_rigid_motion_and_relabel_invariant(
        (r, a) in partitioned(4),
        seed in prop::collection::vec(-1.0..1.0f64, 16),
        shift in -50.0..50.0f64,
    ) {
        let t = make(&r);
        let d = r[0].len();
        let moved = make(&transform(&r, &orthogonal(d, &seed), shift));
        let p = Partition::new(t.labels().to_vec(), a.clone()).unwrap();
        let k = p.k;
        let relabeled = Partition::new(t.labels().to_vec(), a.iter().map(|c| k - 1 - c).collect()).unwrap();

        let s = silhouette(&t, &p).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        type Index = fn(&MetricTable, &Partition) -> kernelsim::Result<f64>;
        let indices: [Index; 4] = [silhouette, calinski_harabasz, dunn_index, davies_bouldin];
        for f in indices {
            let base = f(&t, &p).unwrap();
            prop_assert!(close(base, f(&moved, &p).unwrap(), 1e-7));
            prop_assert!(close(base, f(&t, &relabeled).unwrap(), 1e-12));
        }
    }

    #[test]
    fn compactness_of_parts((r, a) in partitioned(4)) {
        let t = make(&r);
        let p = Partition::new(t.labels().to_vec(), a.clone()).unwrap();
        let c = compactness(&t, &p).unwrap();
        for (id, size) in p.sizes().iter().enumerate() {
            if *size == 1 {
                prop_assert_eq!(c[id], 0.0);
            }
        }
        // merge clusters 0 and 1; the mean squared spread cannot drop below
        // the smaller of the two (mean distance can, see below)
        let merged: Vec<usize> = a.iter().map(|&x| if x == 1 { 0 } else if x > 1 { x - 1 } else { x }).collect();
        let q = Partition::new(t.labels().to_vec(), merged).unwrap();
        prop_assert_eq!(p.k, q.k + 1);
        let sp = mean_sq_spread(&t, &p);
        let sq = mean_sq_spread(&t, &q);
        prop_assert!(sq[0] >= sp[0].min(sp[1]) * (1.0 - 1e-12) - 1e-12);
    }

    #[test]
    fn stability_threshold_monotone(
        series in prop::collection::vec(0.1..10.0f64, 2..7),
        lo in 0.0..50.0f64,
        extra in 0.0..50.0f64,
    ) {
        let samples: Vec<RawSample> = series.iter().enumerate().map(|(i, v)| stab_sample(1 << i, 0, *v)).collect();
        let a = stability_series(&samples, &["m"], lo, RelBase::Larger).unwrap();
        let b = stability_series(&samples, &["m"], lo + extra, RelBase::Larger).unwrap();
        let key = |s: Option<u64>| s.unwrap_or(u64::MAX);
        prop_assert!(key(b.min_stable_size) <= key(a.min_stable_size));
    }

    #[test]
    fn stability_ignores_trial_order_and_duplicates(
        series in prop::collection::vec(prop::collection::vec(0.1..10.0f64, 1..4), 2..6),
        scale in 0.01..100.0f64,
    ) {
        let mut samples = Vec::new();
        for (i, trials) in series.iter().enumerate() {
            for (t, v) in trials.iter().enumerate() {
                samples.push(stab_sample(1 << i, t as u32, *v));
            }
        }
        let base = stability_series(&samples, &["m"], 5.0, RelBase::Larger).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        prop_assert_eq!(&base, &stability_series(&rev, &["m"], 5.0, RelBase::Larger).unwrap());

        // a duplicate of every trial, under fresh trial numbers
        let mut dup = samples.clone();
        dup.extend(samples.iter().map(|s| RawSample { trial: s.trial + 100, ..s.clone() }));
        let d = stability_series(&dup, &["m"], 5.0, RelBase::Larger).unwrap();
        for (x, y) in base.pair_max_pct.iter().zip(&d.pair_max_pct) {
            prop_assert!(close(*x, *y, 1e-9));
        }

        let scaled: Vec<RawSample> = samples.iter().map(|s| {
            let v = s.values["m"] * scale;
            RawSample { values: [("m".to_string(), v)].into_iter().collect(), ..s.clone() }
        }).collect();
        let sc = stability_series(&scaled, &["m"], 5.0, RelBase::Larger).unwrap();
        for (x, y) in base.pair_max_pct.iter().zip(&sc.pair_max_pct) {
            prop_assert!(close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn pca_ignores_row_order(r in rows(3..12, 2..5), rot in 1usize..12) {
        let t = make(&r);
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.rotate_left(rot % r.len());
        let a = pca_project(&t, None).unwrap();
        let b = pca_project(&t.select_rows(&order), None).unwrap();
        // only compare well-separated spectra; otherwise the basis is not unique
        let gap = (a.explained_variance_ratio[0] - a.explained_variance_ratio[1]).abs();
        let rest = 1.0 - a.explained_variance_ratio[0] - a.explained_variance_ratio[1];
        prop_assume!(gap > 1e-3 && (a.explained_variance_ratio[1] - rest).abs() > 1e-3);
        for c in 0..2 {
            for (x, y) in a.components[c].iter().zip(&b.components[c]) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
        for (pos, &i) in order.iter().enumerate() {
            prop_assert!((a.coords[i].x - b.coords[pos].x).abs() < 1e-6);
        }
    }

    #[test]
    fn pca_two_columns_keeps_distances(r in rows(2..15, 2..3)) {
        let t = make(&r);
        let p = pca_project(&t, None).unwrap();
        for i in 0..r.len() {
            for j in 0..r.len() {
                let (a, b) = (&p.coords[i], &p.coords[j]);
                let got = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                prop_assert!((got - distance(&r[i], &r[j]).unwrap()).abs() < 1e-9);
            }
        }
        for c in &p.components {
            let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            prop_assert!(lead > 0.0);
        }
    }

    #[test]
    fn report_bundle_round_trips(r in rows(5..10, 2..4), seed in any::<u64>()) {
        let t = make(&r);
        let d = agglomerative_ward(&t).unwrap();
        let p = cut_dendrogram(&d, 2).unwrap();
        let km = kmeans_fit(&t, &KMeansParams::new(2).seed(seed).n_init(2)).unwrap();
        let (_, spec) = fit_transform(&t, &LogPolicy::None).unwrap();
        let mut sp = SelectKParams::new(ClusterMethod::Agglomerative, 1, 3);
        sp.criteria = vec![
            kernelsim::quality::Criterion::Silhouette,
            kernelsim::quality::Criterion::Gap,
            kernelsim::quality::Criterion::CalinskiHarabasz,
            kernelsim::quality::Criterion::Bic,
        ];
        sp.gap_references = 3;
        sp.seed = seed;
        let stab = stability_series(
            &[stab_sample(1, 0, r[0][0].abs() + 1.0), stab_sample(2, 0, r[1][0].abs() + 1.0)],
            &["m"], 5.0, RelBase::Larger,
        ).unwrap();
        let bundle = ReportBundle {
            transform: Some(spec),
            partition: Some(p.clone()),
            dendrogram: Some(d),
            kmeans: Some(km),
            quality: Some(evaluate(&t, &p).unwrap()),
            selection: Some(select_k(&t, &sp).unwrap()),
            family: Some(family_similarity(&t, "k00", &["k00", "k01"]).unwrap()),
            stability_summary: Some(stability_summary(std::slice::from_ref(&stab), &Default::default()).unwrap()),
            stability: Some(vec![stab]),
            projection: Some(pca_project(&t, None).unwrap()),
            boxplot: Some(export_boxplot_data(&t, &p, None).unwrap()),
            ..Default::default()
        };
        let text = emit_report(&bundle).unwrap();
        let back = parse_report(&text).unwrap();
        prop_assert_eq!(&back, &bundle);
        prop_assert_eq!(emit_report(&back).unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gap_identical_across_thread_pools(r in rows(6..12, 1..4), seed in any::<u64>()) {
        let t = make(&r);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| gap_statistic(&t, ClusterMethod::kmeans(), 3, 8, seed).unwrap())
        };
        let one = run(1);
        prop_assert_eq!(&one, &run(4));
        prop_assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&gap_statistic(&t, ClusterMethod::kmeans(), 3, 8, seed).unwrap()).unwrap()
        );
    }
}

fn stab_sample(size: u64, trial: u32, v: f64) -> RawSample {
    RawSample {
        kernel: "k".into(),
        platform: Platform::Cpu,
        problem_size_bytes: size,
        trial,
        values: [("m".to_string(), v)].into_iter().collect(),
    }
}

fn same_groups(a: &Partition, b: &Partition) -> bool {
    let groups = |p: &Partition| -> BTreeSet<BTreeSet<String>> {
        (0..p.k).map(|c| p.members(c).into_iter().map(|i| p.labels[i].clone()).collect()).collect()
    };
    groups(a) == groups(b)
}
