//! Ward agglomerative clustering and k-means.
//!
//! Randomness: replicate `r` of a k-means fit with seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(s)` switched to stream `r`. Results are a pure
//! function of `(data, k, s, n_init, max_iter)`, whatever the thread count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MetricTable;
use crate::error::{invalid, Result};
use crate::metricspace::{dist, sq_dist};

pub const DEFAULT_SEED: u64 = 20250101;
pub const DEFAULT_N_INIT: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 300;

/// Assignment of every row to one of `k` clusters.
///
/// Cluster ids are contiguous and ordered by descending cluster size, ties
/// broken by the lexicographically smallest label the cluster contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub k: usize,
    pub labels: Vec<String>,
    pub assignments: Vec<usize>,
}

impl Partition {
    /// Canonical partition from arbitrary group ids (any `usize` values).
    pub fn canonical(labels: &[String], groups: &[usize]) -> Partition {
        assert_eq!(labels.len(), groups.len());
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &g) in groups.iter().enumerate() {
            members.entry(g).or_default().push(i);
        }
        let mut order: Vec<(usize, &str, usize)> = members
            .iter()
            .map(|(&g, ix)| {
                let smallest = ix.iter().map(|&i| labels[i].as_str()).min().unwrap_or("");
                (ix.len(), smallest, g)
            })
            .collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let remap: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(new, &(_, _, g))| (g, new)).collect();
        Partition {
            k: order.len(),
            labels: labels.to_vec(),
            assignments: groups.iter().map(|g| remap[g]).collect(),
        }
    }

    /// Validates an explicit assignment: ids in `0..k`, none empty.
    pub fn new(labels: Vec<String>, assignments: Vec<usize>) -> Result<Partition> {
        if labels.len() != assignments.len() {
            return Err(invalid("labels and assignments differ in length"));
        }
        let k = assignments.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; k];
        for &a in &assignments {
            seen[a] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("cluster {empty} has no members")));
        }
        Ok(Partition {
            k,
            labels,
            assignments,
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }

    /// True when every cluster of `self` lies inside one cluster of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        let mut parent = vec![None; self.k];
        for (&fine, &coarse) in self.assignments.iter().zip(&coarser.assignments) {
            match parent[fine] {
                None => parent[fine] = Some(coarse),
                Some(p) if p != coarse => return false,
                _ => {}
            }
        }
        true
    }

    /// Same grouping up to relabeling.
    pub fn same_grouping(&self, other: &Partition) -> bool {
        self.len() == other.len() && self.k == other.k && self.refines(other) && other.refines(self)
    }

    pub(crate) fn check_covers(&self, m: &MetricTable) -> Result<()> {
        if self.len() != m.n_rows() {
            return Err(invalid(format!(
                "partition covers {} rows, table has {}",
                self.len(),
                m.n_rows()
            )));
        }
        Ok(())
    }
}

/// Mean vector of each cluster.
pub fn cluster_centroids(m: &MetricTable, p: &Partition) -> Vec<Vec<f64>> {
    means(m, &p.assignments, p.k)
}

fn means(m: &MetricTable, assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = m.n_cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(m.row(i)) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    sums
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    /// Ward linkage distance (square root of the Lance-Williams squared form).
    pub height: f64,
    pub size: usize,
    /// Euclidean distance between the centroids of the two merged clusters.
    pub centroid_distance: f64,
}

/// Leaves are nodes `0..n`; merge `t` creates node `n + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }
}

/// Ward-linkage agglomerative clustering.
///
/// Squared linkage distances are updated with the Lance-Williams recurrence
///
/// ```text
/// d²(i∪j, k) = ((nᵢ+nₖ)·d²(i,k) + (nⱼ+nₖ)·d²(j,k) − nₖ·d²(i,j)) / (nᵢ+nⱼ+nₖ)
/// ```
///
/// At each step the pair with the smallest linkage distance is merged; exact
/// ties go to the pair with the smallest (lower node id, higher node id).
pub fn agglomerative_ward(m: &MetricTable) -> Result<Dendrogram> {
    let n = m.n_rows();
    if n < 2 {
        return Err(invalid(format!("agglomerative clustering needs at least 2 rows, got {n}")));
    }
    // slot i holds the cluster currently stored at leaf position i
    let mut node = (0..n).collect::<Vec<usize>>();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut centroid: Vec<Vec<f64>> = m.rows().map(<[f64]>::to_vec).collect();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(m.row(i), m.row(j));
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            for b in ((a + 1)..n).filter(|&b| active[b]) {
                let v = d2[a * n + b];
                let (lo, hi) = (node[a].min(node[b]), node[a].max(node[b]));
                let better = match best {
                    None => true,
                    Some((bv, blo, bhi, _, _)) => {
                        v < bv || (v == bv && (lo, hi) < (blo, bhi))
                    }
                };
                if better {
                    best = Some((v, lo, hi, a, b));
                }
            }
        }
        let (v, lo, hi, a, b) = best.expect("at least two active clusters");
        let (na, nb) = (size[a], size[b]);
        merges.push(Merge {
            left: lo,
            right: hi,
            height: v.max(0.0).sqrt(),
            size: na + nb,
            centroid_distance: dist(&centroid[a], &centroid[b]),
        });

        for k in (0..n).filter(|&k| active[k] && k != a && k != b) {
            let nk = size[k] as f64;
            let (fa, fb) = (na as f64, nb as f64);
            let updated = ((fa + nk) * d2[a * n + k] + (fb + nk) * d2[b * n + k] - nk * v)
                / (fa + fb + nk);
            let updated = updated.max(0.0);
            d2[a * n + k] = updated;
            d2[k * n + a] = updated;
        }
        let merged: Vec<f64> = centroid[a]
            .iter()
            .zip(&centroid[b])
            .map(|(x, y)| (x * na as f64 + y * nb as f64) / (na + nb) as f64)
            .collect();
        centroid[a] = merged;
        size[a] = na + nb;
        node[a] = n + step;
        active[b] = false;
    }
    Ok(Dendrogram {
        leaves: m.labels().to_vec(),
        merges,
    })
}

/// Undoes the last `k − 1` merges and returns the resulting components.
pub fn cut_dendrogram(d: &Dendrogram, k: usize) -> Result<Partition> {
    let n = d.leaves.len();
    if k == 0 || k > n {
        return Err(invalid(format!("k must be in 1..={n}, got {k}")));
    }
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    for (t, merge) in d.merges.iter().take(n - k).enumerate() {
        parent[merge.left] = n + t;
        parent[merge.right] = n + t;
    }
    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let groups: Vec<usize> = (0..n).map(root).collect();
    Ok(Partition::canonical(&d.leaves, &groups))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        KMeansParams {
            k,
            seed: DEFAULT_SEED,
            n_init: DEFAULT_N_INIT,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_init(mut self, n_init: usize) -> Self {
        self.n_init = n_init;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub partition: Partition,
    /// Centroid of cluster `c` at index `c`.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared member-to-centroid distances.
    pub inertia: f64,
    pub seed: u64,
    pub n_init: usize,
    /// Lloyd iterations of the winning replicate.
    pub iterations: usize,
    /// Index of the winning replicate.
    pub replicate: usize,
    /// Inertia after each Lloyd iteration of the winning replicate.
    pub inertia_trace: Vec<f64>,
}

/// Outcome of one Lloyd run from fixed starting centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydRun {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inertia_trace: Vec<f64>,
}

/// RNG for k-means replicate `replicate` under `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// k-means++ seeding: the first center is a uniformly chosen row, each
/// further center is drawn with probability proportional to its squared
/// distance to the nearest center chosen so far.
pub fn kmeans_plus_plus<R: Rng>(m: &MetricTable, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = m.n_rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(m.row(rng.random_range(0..n)).to_vec());
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(m.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, w) in nearest.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(i);
                if acc > u {
                    break;
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            // every row coincides with a center
            rng.random_range(0..n)
        };
        let c = m.row(pick).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(m.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia_of(m: &MetricTable, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(m.row(i), &centroids[a]))
        .sum()
}

/// Lloyd iterations from `init` until the assignment stops changing or
/// `max_iter` is reached.
///
/// Points go to the nearest centroid, ties to the lowest cluster id. A
/// cluster left empty by the assignment step takes over the point farthest
/// from its current centroid (among clusters with more than one member).
pub fn lloyd(m: &MetricTable, init: Vec<Vec<f64>>, max_iter: usize) -> LloydRun {
    let k = init.len();
    let n = m.n_rows();
    let mut centroids = init;
    let mut assignments = vec![usize::MAX; n];
    let mut inertia = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iter.max(1) {
        let mut next = Vec::with_capacity(n);
        let mut gap = Vec::with_capacity(n);
        for i in 0..n {
            let (c, d) = nearest_centroid(m.row(i), &centroids);
            next.push(c);
            gap.push(d);
        }
        let mut counts = vec![0usize; k];
        for &c in &next {
            counts[c] += 1;
        }
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| gap[a].total_cmp(&gap[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with spare members");
            counts[next[donor]] -= 1;
            next[donor] = empty;
            counts[empty] = 1;
            gap[donor] = 0.0;
        }
        let changed = next != assignments;
        assignments = next;
        centroids = means(m, &assignments, k);
        inertia = inertia_of(m, &assignments, &centroids);
        trace.push(inertia);
        iterations = it;
        if !changed {
            converged = true;
            break;
        }
    }
    LloydRun {
        assignments,
        centroids,
        inertia,
        iterations,
        converged,
        inertia_trace: trace,
    }
}

fn run_replicate(m: &MetricTable, params: &KMeansParams, r: usize) -> LloydRun {
    let mut rng = replicate_rng(params.seed, r as u64);
    let init = kmeans_plus_plus(m, params.k, &mut rng);
    lloyd(m, init, params.max_iter)
}

/// Best of `n_init` k-means++ / Lloyd replicates by inertia (ties to the
/// lowest replicate index). Cluster ids follow the canonical [`Partition`]
/// order.
pub fn kmeans_fit(m: &MetricTable, params: &KMeansParams) -> Result<KMeansModel> {
    let n = m.n_rows();
    if params.k == 0 || params.k > n {
        return Err(invalid(format!("k must be in 1..={n}, got {}", params.k)));
    }
    if params.n_init == 0 || params.max_iter == 0 {
        return Err(invalid("n_init and max_iter must be positive"));
    }

    #[cfg(feature = "parallel")]
    let runs: Vec<LloydRun> = {
        use rayon::prelude::*;
        (0..params.n_init)
            .into_par_iter()
            .map(|r| run_replicate(m, params, r))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<LloydRun> = (0..params.n_init).map(|r| run_replicate(m, params, r)).collect();

    let (replicate, best) = runs
        .into_iter()
        .enumerate()
        .reduce(|acc, cur| if cur.1.inertia < acc.1.inertia { cur } else { acc })
        .expect("n_init >= 1");

    let partition = Partition::canonical(m.labels(), &best.assignments);
    let mut centroids = vec![Vec::new(); params.k];
    for (old, new) in best.assignments.iter().zip(&partition.assignments) {
        if centroids[*new].is_empty() {
            centroids[*new] = best.centroids[*old].clone();
        }
    }
    Ok(KMeansModel {
        k: params.k,
        partition,
        centroids,
        inertia: best.inertia,
        seed: params.seed,
        n_init: params.n_init,
        iterations: best.iterations,
        replicate,
        inertia_trace: best.inertia_trace,
    })
}
