use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const BLOB_N: usize = 50;
pub const BLOB_D: usize = 8;

/// Two isotropic unit-variance blobs of 25 rows in 8 dimensions whose
/// centroids are 10 apart. Rows `a..` come first, then `b..`. Values sit
/// around 50 so the table is valid as raw (non-negative) data.
pub fn two_blobs(seed: u64) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let shift = 10.0 / (BLOB_D as f64).sqrt();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (g, (name, centre)) in [("a", 50.0), ("b", 50.0 + shift)].into_iter().enumerate() {
        for i in 0..BLOB_N / 2 {
            labels.push(format!("{name}{i:02}"));
            rows.push((0..BLOB_D).map(|_| centre + noise.sample(&mut rng)).collect());
            truth.push(g);
        }
    }
    (labels, rows, truth)
}

pub fn write_table(dir: &Path, name: &str, labels: &[String], rows: &[Vec<f64>]) -> PathBuf {
    let mut csv = String::from("row");
    for j in 0..rows[0].len() {
        csv += &format!(",m{j}");
    }
    csv.push('\n');
    for (l, r) in labels.iter().zip(rows) {
        csv += l;
        for v in r {
            csv += &format!(",{v}");
        }
        csv.push('\n');
    }
    let path = dir.join(name);
    fs::write(&path, csv).unwrap();
    path
}
