//! Euclidean distances between kernels and family-matching queries.

use serde::{Deserialize, Serialize};

use crate::dataset::MetricTable;
use crate::error::{invalid, Error, Result};

/// Euclidean distance between two metric vectors.
pub fn distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.is_empty() {
        return Err(invalid("vectors must have at least one dimension"));
    }
    Ok(sq_dist(p, q).sqrt())
}

/// Squared Euclidean distance, summed in index order. Callers guarantee
/// equal lengths.
#[inline]
pub(crate) fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub(crate) fn dist(p: &[f64], q: &[f64]) -> f64 {
    sq_dist(p, q).sqrt()
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// The `k` labels closest to `target`, nearest first, ties by label.
    pub fn neighbors(&self, target: &str, k: usize) -> Result<Vec<Neighbor>> {
        let t = self
            .index(target)
            .ok_or_else(|| Error::UnknownLabel(target.to_string()))?;
        if k == 0 || k + 1 > self.n {
            return Err(invalid(format!("k must be in 1..={}, got {k}", self.n.saturating_sub(1))));
        }
        let mut all: Vec<Neighbor> = (0..self.n)
            .filter(|&i| i != t)
            .map(|i| Neighbor {
                label: self.labels[i].clone(),
                distance: self.get(t, i),
            })
            .collect();
        all.sort_by(by_distance_then_label);
        all.truncate(k);
        Ok(all)
    }

    /// Checks squareness, a zero diagonal, symmetry and finite non-negative
    /// entries.
    pub fn from_nested(labels: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        if rows.len() != n {
            return Err(Error::DimensionMismatch { left: n, right: rows.len() });
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::DuplicateLabel(dup.clone()));
        }
        let mut d = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch { left: n, right: row.len() });
            }
            d.extend(row);
        }
        let m = DistanceMatrix { labels, n, d };
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(invalid(format!("distance diagonal at {} is {}", m.labels[i], m.get(i, i))));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if v < 0.0 || !v.is_finite() {
                    return Err(invalid(format!("distance {}-{} is {v}", m.labels[i], m.labels[j])));
                }
                if (v - m.get(j, i)).abs() > 1e-12 * v.max(1.0) {
                    return Err(invalid(format!("distance matrix not symmetric at {}-{}", m.labels[i], m.labels[j])));
                }
            }
        }
        Ok(m)
    }

    /// Square CSV: header `row,<label>...`, then one line per label in the
    /// same order.
    pub fn read_csv<R: std::io::Read>(source: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let header: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = format!("line {}", i + 2);
            labels.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>().map_err(|_| Error::Malformed {
                        location: line.clone(),
                        message: format!("not a number: `{c}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if header != labels {
            return Err(invalid("distance CSV header labels must match row labels in order"));
        }
        DistanceMatrix::from_nested(labels, rows)
    }
}

pub fn pairwise_distances(m: &MetricTable) -> DistanceMatrix {
    let n = m.n_rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(m.row(i), m.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    DistanceMatrix {
        labels: m.labels().to_vec(),
        n,
        d,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub label: String,
    pub distance: f64,
}

/// Orders by distance, then label.
fn by_distance_then_label(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.label.cmp(&b.label))
}

/// The `k` rows closest to `target`, nearest first. Equal distances are
/// ordered by label.
pub fn nearest_neighbors(m: &MetricTable, target: &str, k: usize) -> Result<Vec<Neighbor>> {
    if m.row_index(target).is_none() {
        return Err(Error::UnknownLabel(target.to_string()));
    }
    pairwise_distances(m).neighbors(target, k)
}

/// Glob match supporting `*` (any run) and `?` (any single character).
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Similarity of a kernel to its own family versus everything else.
///
/// Family rows are those matching any of the supplied patterns. Rows that
/// match a pattern the target itself matches form the self family (e.g.
/// other sizes of the same kernel); rows matching only other patterns form
/// the counterpart set (e.g. the same kernel from another code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub target: String,
    /// Mean distance to the target's own variants, if it has any.
    pub self_family_avg: Option<f64>,
    /// Mean distance to counterpart rows, if any.
    pub counterpart_avg: Option<f64>,
    /// Unweighted mean distance over every family row except the target.
    pub family_avg: f64,
    pub closest_other: Neighbor,
    /// `closest_other.distance / family_avg`. Above 1 means the family is
    /// tighter than the best outside match.
    pub relative: f64,
    pub self_family: Vec<String>,
    pub counterparts: Vec<String>,
    /// How family rows are weighted in `family_avg`.
    pub weighting: String,
}

/// Ratio of the closest outside distance to the family average.
pub fn relative_similarity(closest_other: f64, family_avg: f64) -> Result<f64> {
    if family_avg <= 0.0 || !family_avg.is_finite() {
        return Err(invalid(format!(
            "family average distance must be positive, got {family_avg}"
        )));
    }
    if closest_other <= 0.0 || !closest_other.is_finite() {
        return Err(invalid(format!(
            "closest outside distance must be positive, got {closest_other}"
        )));
    }
    Ok(closest_other / family_avg)
}

pub fn family_similarity<S: AsRef<str>>(
    m: &MetricTable,
    target: &str,
    family_patterns: &[S],
) -> Result<FamilyReport> {
    if m.row_index(target).is_none() {
        return Err(Error::UnknownLabel(target.to_string()));
    }
    family_similarity_from_distances(&pairwise_distances(m), target, family_patterns)
}

/// Same as [`family_similarity`] over precomputed distances.
pub fn family_similarity_from_distances<S: AsRef<str>>(
    dm: &DistanceMatrix,
    target: &str,
    family_patterns: &[S],
) -> Result<FamilyReport> {
    let t = dm
        .index(target)
        .ok_or_else(|| Error::UnknownLabel(target.to_string()))?;
    let own: Vec<&str> = family_patterns
        .iter()
        .map(AsRef::as_ref)
        .filter(|p| glob_match(p, target))
        .collect();
    if own.is_empty() {
        return Err(invalid(format!("target `{target}` matches none of the family patterns")));
    }

    let mut self_family = Vec::new();
    let mut counterparts = Vec::new();
    let mut others = Vec::new();
    for (i, label) in dm.labels.iter().enumerate() {
        if i == t {
            continue;
        }
        if own.iter().any(|p| glob_match(p, label)) {
            self_family.push(i);
        } else if family_patterns.iter().any(|p| glob_match(p.as_ref(), label)) {
            counterparts.push(i);
        } else {
            others.push(i);
        }
    }
    if others.is_empty() {
        return Err(Error::FamilyCoversAll);
    }
    if self_family.is_empty() && counterparts.is_empty() {
        return Err(invalid(format!("family of `{target}` has no other rows")));
    }

    let d = |i: usize| dm.get(t, i);
    let mean = |ix: &[usize]| -> Option<f64> {
        (!ix.is_empty()).then(|| ix.iter().map(|&i| d(i)).sum::<f64>() / ix.len() as f64)
    };
    let family: Vec<usize> = self_family.iter().chain(&counterparts).copied().collect();
    let family_avg = mean(&family).expect("family is non-empty");

    let closest_other = others
        .iter()
        .map(|&i| Neighbor {
            label: dm.labels[i].clone(),
            distance: d(i),
        })
        .min_by(by_distance_then_label)
        .expect("others is non-empty");
    let relative = relative_similarity(closest_other.distance, family_avg)?;

    let names = |ix: &[usize]| ix.iter().map(|&i| dm.labels[i].clone()).collect();
    Ok(FamilyReport {
        target: target.to_string(),
        self_family_avg: mean(&self_family),
        counterpart_avg: mean(&counterparts),
        family_avg,
        closest_other,
        relative,
        self_family: names(&self_family),
        counterparts: names(&counterparts),
        weighting: "per_row".into(),
    })
}

/// `exp(mean(ln x))` over strictly positive inputs.
pub fn geometric_mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(invalid("geometric mean of an empty list"));
    }
    if let Some(bad) = xs.iter().find(|x| **x <= 0.0 || !x.is_finite()) {
        return Err(invalid(format!("geometric mean needs positive finite inputs, got {bad}")));
    }
    Ok((xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp())
}
