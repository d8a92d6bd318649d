//! Raw per-run samples and the kernel × metric tables built from them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CORE_BOUND: &str = "topdown.core_bound";
pub const MEMORY_BOUND: &str = "topdown.memory_bound";
pub const FETCH_LATENCY: &str = "topdown.fetch_latency";
pub const FETCH_BANDWIDTH: &str = "topdown.fetch_bandwidth";
pub const BAD_SPECULATION: &str = "topdown.bad_speculation";
pub const RETIRING: &str = "topdown.retiring";

pub const GPU_TIME: &str = "gpu.time_sec";
pub const GPU_L1_TRANSACTIONS: &str = "gpu.l1_transactions";
pub const GPU_L2_TRANSACTIONS: &str = "gpu.l2_transactions";
pub const GPU_HBM_TRANSACTIONS: &str = "gpu.hbm_transactions";
pub const GPU_WARP_INSTRUCTIONS: &str = "gpu.warp_instructions";

pub const GPU_L1_RATE: &str = "gpu.l1_rate";
pub const GPU_L2_RATE: &str = "gpu.l2_rate";
pub const GPU_HBM_RATE: &str = "gpu.hbm_rate";
pub const GPU_IPS: &str = "gpu.ips";

/// Top-down subcategories used for CPU similarity. Bad speculation and
/// retiring are accepted on ingest but left out here.
pub const DEFAULT_CPU_METRICS: [&str; 4] = [CORE_BOUND, MEMORY_BOUND, FETCH_LATENCY, FETCH_BANDWIDTH];

/// Derived GPU transaction rates and instruction throughput.
pub const DEFAULT_GPU_METRICS: [&str; 4] = [GPU_L1_RATE, GPU_L2_RATE, GPU_HBM_RATE, GPU_IPS];

const IDENTITY_COLUMNS: [&str; 4] = ["kernel", "platform", "problem_size_bytes", "trial"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Cpu,
    Gpu,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Cpu => "cpu",
            Platform::Gpu => "gpu",
        })
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" => Ok(Platform::Cpu),
            "gpu" => Ok(Platform::Gpu),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Fraction,
    Rate,
    Count,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlatformScope {
    Cpu,
    Gpu,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub name: String,
    pub kind: MetricKind,
    pub platform: PlatformScope,
    pub unit: String,
}

impl MetricDescriptor {
    /// Descriptor for a metric name, using the built-in catalog for the
    /// `topdown.*` and `gpu.*` families. Unknown names are treated as
    /// non-negative platform-neutral rates.
    pub fn infer(name: &str) -> Self {
        let (kind, platform, unit) = match name {
            GPU_TIME => (MetricKind::Time, PlatformScope::Gpu, "seconds"),
            GPU_L1_TRANSACTIONS | GPU_L2_TRANSACTIONS | GPU_HBM_TRANSACTIONS => {
                (MetricKind::Count, PlatformScope::Gpu, "transactions")
            }
            GPU_WARP_INSTRUCTIONS => (MetricKind::Count, PlatformScope::Gpu, "warp instructions"),
            GPU_L1_RATE | GPU_L2_RATE | GPU_HBM_RATE => {
                (MetricKind::Rate, PlatformScope::Gpu, "transactions/second")
            }
            GPU_IPS => (MetricKind::Rate, PlatformScope::Gpu, "instructions/second"),
            n if n.starts_with("topdown.") => {
                (MetricKind::Fraction, PlatformScope::Cpu, "fraction of pipeline slots")
            }
            n if n.starts_with("gpu.") => (MetricKind::Rate, PlatformScope::Gpu, ""),
            _ => (MetricKind::Rate, PlatformScope::Any, ""),
        };
        MetricDescriptor {
            name: name.to_string(),
            kind,
            platform,
            unit: unit.to_string(),
        }
    }

    fn check(&self, row: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                metric: self.name.clone(),
                context: format!("row {row}"),
            });
        }
        let ok = match self.kind {
            MetricKind::Fraction => (0.0..=1.0).contains(&value),
            _ => value >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ColumnInvariant {
                metric: self.name.clone(),
                row: row.to_string(),
                message: match self.kind {
                    MetricKind::Fraction => format!("fraction {value} outside [0, 1]"),
                    _ => format!("negative value {value}"),
                },
            })
        }
    }
}

/// One kernel execution record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub kernel: String,
    pub platform: Platform,
    pub problem_size_bytes: u64,
    pub trial: u32,
    pub values: BTreeMap<String, f64>,
}

impl RawSample {
    fn key(&self) -> (&str, Platform, u64, u32) {
        (&self.kernel, self.platform, self.problem_size_bytes, self.trial)
    }

    fn validate(&self, location: &str) -> Result<()> {
        for (name, v) in &self.values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    metric: name.clone(),
                    context: location.to_string(),
                });
            }
        }
        if let Some(&t) = self.values.get(GPU_TIME) {
            if self.platform == Platform::Gpu && t <= 0.0 {
                return Err(Error::NonPositiveTime {
                    kernel: self.kernel.clone(),
                    value: t,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Json,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "json" => Ok(InputFormat::Json),
            other => Err(format!("unknown input format `{other}`")),
        }
    }
}

/// Parses raw samples from CSV or JSON. Record order is preserved.
///
/// Empty CSV cells and JSON nulls mean "metric not recorded for this run",
/// which lets CPU and GPU rows share one file.
pub fn parse_samples<R: Read>(source: R, format: InputFormat) -> Result<Vec<RawSample>> {
    let samples = match format {
        InputFormat::Csv => parse_csv(source)?,
        InputFormat::Json => parse_json(source)?,
    };
    let mut seen = HashSet::new();
    for s in &samples {
        if !seen.insert(s.key()) {
            return Err(Error::DuplicateKey {
                kernel: s.kernel.clone(),
                platform: s.platform.to_string(),
                problem_size_bytes: s.problem_size_bytes,
                trial: s.trial,
            });
        }
    }
    Ok(samples)
}

fn parse_csv<R: Read>(source: R) -> Result<Vec<RawSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let mut idx = [usize::MAX; 4];
    for (slot, want) in idx.iter_mut().zip(IDENTITY_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == want)
            .ok_or_else(|| Error::Malformed {
                location: "line 1".into(),
                message: format!("missing required column `{want}`"),
            })?;
    }
    let metric_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !idx.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let location = format!("line {line}");
        let malformed = |message: String| Error::Malformed {
            location: location.clone(),
            message,
        };
        let field = |i: usize| record.get(i).unwrap_or("");

        let kernel = field(idx[0]).to_string();
        if kernel.is_empty() {
            return Err(malformed("empty kernel name".into()));
        }
        let platform = field(idx[1])
            .parse::<Platform>()
            .map_err(|token| Error::UnknownPlatform {
                location: location.clone(),
                token,
            })?;
        let problem_size_bytes = parse_size(field(idx[2])).map_err(&malformed)?;
        let trial = field(idx[3])
            .parse::<u32>()
            .map_err(|e| malformed(format!("trial `{}`: {e}", field(idx[3]))))?;

        let mut values = BTreeMap::new();
        for (i, name) in &metric_cols {
            let cell = field(*i);
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(format!("`{name}`: cannot parse `{cell}` as a number")))?;
            values.insert(name.clone(), v);
        }
        let sample = RawSample {
            kernel,
            platform,
            problem_size_bytes,
            trial,
            values,
        };
        sample.validate(&location)?;
        out.push(sample);
    }
    Ok(out)
}

fn parse_size(cell: &str) -> std::result::Result<u64, String> {
    let size = cell
        .parse::<u64>()
        .or_else(|_| {
            // tolerate "6.7108864e7" style sizes as long as they are integral
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && v.fract() == 0.0 && *v >= 0.0 && *v < 1.8e19)
                .map(|v| v as u64)
                .ok_or(())
        })
        .map_err(|_| format!("problem_size_bytes `{cell}` is not a positive integer"))?;
    if size == 0 {
        return Err("problem_size_bytes must be positive".into());
    }
    Ok(size)
}

fn parse_json<R: Read>(source: R) -> Result<Vec<RawSample>> {
    let doc: serde_json::Value = serde_json::from_reader(source)?;
    let records = doc.as_array().ok_or_else(|| Error::Malformed {
        location: "document".into(),
        message: "expected a JSON array of objects".into(),
    })?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let location = format!("record {}", i + 1);
        let malformed = |message: String| Error::Malformed {
            location: location.clone(),
            message,
        };
        let obj = rec
            .as_object()
            .ok_or_else(|| malformed("expected an object".into()))?;
        let get = |k: &str| obj.get(k).ok_or_else(|| malformed(format!("missing `{k}`")));

        let kernel = get("kernel")?
            .as_str()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed("`kernel` must be a non-empty string".into()))?
            .to_string();
        let token = get("platform")?
            .as_str()
            .ok_or_else(|| malformed("`platform` must be a string".into()))?;
        let platform = token.parse::<Platform>().map_err(|token| Error::UnknownPlatform {
            location: location.clone(),
            token,
        })?;
        let size_v = get("problem_size_bytes")?;
        let problem_size_bytes = match size_v {
            serde_json::Value::Number(n) => parse_size(&n.to_string()),
            serde_json::Value::String(s) => parse_size(s),
            _ => Err("problem_size_bytes must be a number".into()),
        }
        .map_err(&malformed)?;
        let trial = get("trial")?
            .as_u64()
            .and_then(|t| u32::try_from(t).ok())
            .ok_or_else(|| malformed("`trial` must be a non-negative integer".into()))?;

        let mut values = BTreeMap::new();
        for (name, v) in obj {
            if IDENTITY_COLUMNS.contains(&name.as_str()) || v.is_null() {
                continue;
            }
            let x = v
                .as_f64()
                .ok_or_else(|| malformed(format!("`{name}` must be a number")))?;
            values.insert(name.clone(), x);
        }
        let sample = RawSample {
            kernel,
            platform,
            problem_size_bytes,
            trial,
            values,
        };
        sample.validate(&location)?;
        out.push(sample);
    }
    Ok(out)
}

/// Adds the four derived GPU metrics: L1/L2/HBM transactions per second and
/// warp instructions per second. Raw counters stay in the sample.
pub fn derive_gpu_rates(sample: &RawSample) -> Result<RawSample> {
    if sample.platform != Platform::Gpu {
        return Err(invalid(format!(
            "sample {} is a {} run; GPU rates need a gpu sample",
            sample.kernel, sample.platform
        )));
    }
    let counter = |name: &str| -> Result<f64> {
        let v = *sample.values.get(name).ok_or_else(|| Error::MissingCounter {
            kernel: sample.kernel.clone(),
            counter: name.to_string(),
        })?;
        if v < 0.0 {
            return Err(invalid(format!(
                "sample {}: counter `{name}` is negative ({v})",
                sample.kernel
            )));
        }
        Ok(v)
    };
    let time = *sample.values.get(GPU_TIME).ok_or_else(|| Error::MissingCounter {
        kernel: sample.kernel.clone(),
        counter: GPU_TIME.to_string(),
    })?;
    if time <= 0.0 || !time.is_finite() {
        return Err(Error::NonPositiveTime {
            kernel: sample.kernel.clone(),
            value: time,
        });
    }
    let mut out = sample.clone();
    for (raw, rate) in [
        (GPU_L1_TRANSACTIONS, GPU_L1_RATE),
        (GPU_L2_TRANSACTIONS, GPU_L2_RATE),
        (GPU_HBM_TRANSACTIONS, GPU_HBM_RATE),
        (GPU_WARP_INSTRUCTIONS, GPU_IPS),
    ] {
        out.values.insert(rate.to_string(), counter(raw)? / time);
    }
    Ok(out)
}

/// Trial-averaged sample plus the spread of the trials behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSample {
    pub sample: RawSample,
    pub trials: usize,
    /// Population coefficient of variation per metric (std / |mean|).
    /// Zero when all trials agree; infinite when the mean is zero but the
    /// trials are not.
    #[serde(with = "cv_map")]
    pub cv: BTreeMap<String, f64>,
}

mod cv_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "crate::nonfinite")] f64);

    pub fn serialize<S: Serializer>(v: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(v.iter().map(|(k, x)| (k, Wrapped(*x))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        Ok(BTreeMap::<String, Wrapped>::deserialize(d)?
            .into_iter()
            .map(|(k, w)| (k, w.0))
            .collect())
    }
}

/// Averages trials of each (kernel, platform, size) group.
///
/// Output is ordered by group key. Within a group, trials are summed in
/// trial-number order so the result does not depend on input order. The
/// aggregated sample carries trial number 0.
pub fn aggregate_trials(samples: &[RawSample]) -> Result<Vec<AggregatedSample>> {
    let mut groups: BTreeMap<(&str, Platform, u64), Vec<&RawSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.kernel.as_str(), s.platform, s.problem_size_bytes))
            .or_default()
            .push(s);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((kernel, platform, size), mut members) in groups {
        members.sort_by_key(|s| s.trial);
        let names: BTreeSet<&String> = members[0].values.keys().collect();
        if members
            .iter()
            .any(|m| m.values.len() != names.len() || m.values.keys().any(|k| !names.contains(k)))
        {
            return Err(Error::InconsistentMetrics {
                kernel: kernel.to_string(),
                problem_size_bytes: size,
            });
        }
        let n = members.len() as f64;
        let mut values = BTreeMap::new();
        let mut cv = BTreeMap::new();
        for name in names {
            let xs: Vec<f64> = members.iter().map(|m| m.values[name]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let c = if std == 0.0 {
                0.0
            } else if mean == 0.0 {
                f64::INFINITY
            } else {
                std / mean.abs()
            };
            values.insert(name.clone(), mean);
            cv.insert(name.clone(), c);
        }
        out.push(AggregatedSample {
            sample: RawSample {
                kernel: kernel.to_string(),
                platform,
                problem_size_bytes: size,
                trial: 0,
                values,
            },
            trials: members.len(),
            cv,
        });
    }
    Ok(out)
}

/// Which problem sizes become table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePolicy {
    /// One row per kernel at exactly this size.
    Single(u64),
    /// One row per kernel at that kernel's largest measured size.
    Largest,
    /// One row per (kernel, size). The largest size keeps the bare kernel
    /// label; smaller sizes are labelled `<kernel>_1`, `<kernel>_2`, ... in
    /// ascending size order.
    AllSizesAsVariants,
}

/// Whether table cells are raw measurements or standardized scores.
/// Kind invariants (fractions in [0, 1], non-negative rates) only apply to
/// raw tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Raw,
    Standardized,
}

/// Rectangular kernels × metrics matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    rows: Vec<String>,
    columns: Vec<MetricDescriptor>,
    data: Vec<f64>,
    scale: Scale,
    meta: BTreeMap<String, String>,
}

impl MetricTable {
    pub fn new(
        rows: Vec<String>,
        columns: Vec<MetricDescriptor>,
        data: Vec<Vec<f64>>,
        scale: Scale,
    ) -> Result<Self> {
        if data.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                left: rows.len(),
                right: data.len(),
            });
        }
        let width = columns.len();
        let mut flat = Vec::with_capacity(rows.len() * width);
        for row in data {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    left: width,
                    right: row.len(),
                });
            }
            flat.extend(row);
        }
        let table = MetricTable {
            rows,
            columns,
            data: flat,
            scale,
            meta: BTreeMap::new(),
        };
        table.validate()?;
        Ok(table)
    }

    /// Convenience constructor for standardized data with inferred
    /// descriptors.
    pub fn standardized<S: AsRef<str>>(rows: &[S], columns: &[S], data: Vec<Vec<f64>>) -> Result<Self> {
        MetricTable::new(
            rows.iter().map(|r| r.as_ref().to_string()).collect(),
            columns.iter().map(|c| MetricDescriptor::infer(c.as_ref())).collect(),
            data,
            Scale::Standardized,
        )
    }

    fn validate(&self) -> Result<()> {
        let mut labels = HashSet::new();
        for r in &self.rows {
            if !labels.insert(r.as_str()) {
                return Err(Error::DuplicateLabel(r.clone()));
            }
        }
        let mut names = HashSet::new();
        for c in &self.columns {
            if !names.insert(c.name.as_str()) {
                return Err(invalid(format!("duplicate column `{}`", c.name)));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            for (j, c) in self.columns.iter().enumerate() {
                let v = self.get(i, j);
                match self.scale {
                    Scale::Raw => c.check(r, v)?,
                    Scale::Standardized if !v.is_finite() => {
                        return Err(Error::NonFinite {
                            metric: c.name.clone(),
                            context: format!("row {r}"),
                        })
                    }
                    Scale::Standardized => {}
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.rows
    }

    pub fn columns(&self) -> &[MetricDescriptor] {
        &self.columns
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set_meta(key, value);
        self
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.columns.len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows.len()).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.columns.len() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows.len()).map(|i| self.get(i, j)).collect()
    }

    pub fn row_index(&self, label: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == label)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Table restricted to the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> MetricTable {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        MetricTable {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            columns: self.columns.clone(),
            data,
            scale: self.scale,
            meta: self.meta.clone(),
        }
    }

    /// Table restricted to the given columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> MetricTable {
        let data = (0..self.rows.len())
            .flat_map(|i| indices.iter().map(move |&j| self.get(i, j)))
            .collect();
        MetricTable {
            rows: self.rows.clone(),
            columns: indices.iter().map(|&j| self.columns[j].clone()).collect(),
            data,
            scale: self.scale,
            meta: self.meta.clone(),
        }
    }

    /// Writes the table as CSV with a leading `row` label column. Values use
    /// the shortest decimal form that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (i, label) in self.rows.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.row(i).iter().map(|v| format_real(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads a table written by [`MetricTable::write_csv`]. Column
    /// descriptors are inferred from the metric names.
    pub fn read_csv<R: Read>(source: R, scale: Scale) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(source);
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("row") {
            return Err(Error::Malformed {
                location: "line 1".into(),
                message: "table CSV must start with a `row` column".into(),
            });
        }
        let columns: Vec<MetricDescriptor> =
            headers.iter().skip(1).map(MetricDescriptor::infer).collect();
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            rows.push(record.get(0).unwrap_or("").to_string());
            let vals = record
                .iter()
                .skip(1)
                .map(|cell| {
                    cell.parse::<f64>().map_err(|_| Error::Malformed {
                        location: format!("line {line}"),
                        message: format!("cannot parse `{cell}` as a number"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            data.push(vals);
        }
        MetricTable::new(rows, columns, data, scale)
    }
}

/// Shortest round-tripping decimal representation, switching to exponent
/// form for very large or very small magnitudes.
pub fn format_real(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Assembles a table from (trial-aggregated) samples of a single platform.
pub fn build_table<S: AsRef<str>>(
    samples: &[RawSample],
    metric_names: &[S],
    size_policy: SizePolicy,
) -> Result<MetricTable> {
    if metric_names.is_empty() {
        return Err(invalid("no metrics requested"));
    }
    // kernel -> size -> sample, kernels in first-appearance order
    let mut order: Vec<&str> = Vec::new();
    let mut by_kernel: HashMap<&str, BTreeMap<u64, &RawSample>> = HashMap::new();
    let mut platforms = BTreeSet::new();
    for s in samples {
        platforms.insert(s.platform);
        let sizes = by_kernel.entry(s.kernel.as_str()).or_insert_with(|| {
            order.push(s.kernel.as_str());
            BTreeMap::new()
        });
        if sizes.insert(s.problem_size_bytes, s).is_some() {
            return Err(invalid(format!(
                "several samples for {} at {} bytes; aggregate trials and select one platform first",
                s.kernel, s.problem_size_bytes
            )));
        }
    }

    let mut selected: Vec<(String, &RawSample)> = Vec::new();
    for kernel in &order {
        let sizes = &by_kernel[kernel];
        match size_policy {
            SizePolicy::Single(bytes) => {
                let s = sizes.get(&bytes).ok_or_else(|| Error::MissingSize {
                    kernel: kernel.to_string(),
                    problem_size_bytes: bytes,
                })?;
                selected.push((kernel.to_string(), s));
            }
            SizePolicy::Largest => {
                let (_, s) = sizes.iter().next_back().expect("kernel has at least one size");
                selected.push((kernel.to_string(), s));
            }
            SizePolicy::AllSizesAsVariants => {
                let (&largest, reference) = sizes.iter().next_back().expect("non-empty");
                selected.push((kernel.to_string(), reference));
                for (i, (_, s)) in sizes.range(..largest).enumerate() {
                    selected.push((format!("{kernel}_{}", i + 1), s));
                }
            }
        }
    }

    let columns: Vec<MetricDescriptor> = metric_names
        .iter()
        .map(|n| MetricDescriptor::infer(n.as_ref()))
        .collect();
    let mut rows = Vec::with_capacity(selected.len());
    let mut data = Vec::with_capacity(selected.len());
    for (label, s) in &selected {
        let vals = columns
            .iter()
            .map(|c| {
                s.values.get(&c.name).copied().ok_or_else(|| Error::AbsentMetric {
                    metric: c.name.clone(),
                    context: format!("{} at {} bytes", s.kernel, s.problem_size_bytes),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(label.clone());
        data.push(vals);
    }

    let mut table = MetricTable::new(rows, columns, data, Scale::Raw)?;
    let platform = platforms.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+");
    table.set_meta("platform", platform);
    table.set_meta(
        "size_policy",
        match size_policy {
            SizePolicy::Single(b) => format!("single:{b}"),
            SizePolicy::Largest => "largest".into(),
            SizePolicy::AllSizesAsVariants => "all_sizes_as_variants".into(),
        },
    );
    let sizes: BTreeSet<u64> = selected.iter().map(|(_, s)| s.problem_size_bytes).collect();
    table.set_meta(
        "sizes",
        sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    table.set_meta("aggregation", "mean");
    Ok(table)
}

/// Inner join of a CPU and a GPU table on row label. Columns are CPU
/// columns followed by GPU columns. Kernels present on only one side are
/// dropped and listed under the `dropped_kernels` meta key.
pub fn merge_platforms(cpu: &MetricTable, gpu: &MetricTable) -> Result<MetricTable> {
    if cpu.scale != gpu.scale {
        return Err(invalid("cannot merge a raw table with a standardized one"));
    }
    for c in &gpu.columns {
        if cpu.column_index(&c.name).is_some() {
            return Err(invalid(format!("column `{}` present in both tables", c.name)));
        }
    }
    let gpu_rows: HashMap<&str, usize> =
        gpu.rows.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let mut rows = Vec::new();
    let mut data = Vec::new();
    let mut dropped = Vec::new();
    for (i, label) in cpu.rows.iter().enumerate() {
        match gpu_rows.get(label.as_str()) {
            Some(&g) => {
                rows.push(label.clone());
                data.push(cpu.row(i).iter().chain(gpu.row(g)).copied().collect());
            }
            None => dropped.push(label.clone()),
        }
    }
    let cpu_rows: HashSet<&str> = cpu.rows.iter().map(String::as_str).collect();
    dropped.extend(gpu.rows.iter().filter(|r| !cpu_rows.contains(r.as_str())).cloned());
    if rows.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    dropped.sort();

    let columns = cpu.columns.iter().chain(&gpu.columns).cloned().collect();
    let mut table = MetricTable::new(rows, columns, data, cpu.scale)?;
    for (k, v) in cpu.meta.iter() {
        table.set_meta(format!("cpu.{k}"), v.clone());
    }
    for (k, v) in gpu.meta.iter() {
        table.set_meta(format!("gpu.{k}"), v.clone());
    }
    table.set_meta("platform", "cpu+gpu");
    table.set_meta("dropped_kernels", dropped.join(","));
    if !dropped.is_empty() {
        table.set_meta(
            "warnings",
            format!("{} kernel(s) missing on one platform were dropped", dropped.len()),
        );
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kernel: &str, platform: Platform, size: u64, trial: u32, kv: &[(&str, f64)]) -> RawSample {
        RawSample {
            kernel: kernel.into(),
            platform,
            problem_size_bytes: size,
            trial,
            values: kv.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn parses_single_csv_row() {
        let src = "kernel,platform,problem_size_bytes,trial,topdown.memory_bound\nStream_ADD,cpu,67108864,0,0.93\n";
        let s = parse_samples(src.as_bytes(), InputFormat::Csv).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].kernel, "Stream_ADD");
        assert_eq!(s[0].platform, Platform::Cpu);
        assert_eq!(s[0].problem_size_bytes, 67108864);
        assert_eq!(s[0].values.len(), 1);
        assert_eq!(s[0].values[MEMORY_BOUND], 0.93);
    }

    #[test]
    fn empty_body_gives_no_samples() {
        let src = "kernel,platform,problem_size_bytes,trial,topdown.memory_bound\n";
        assert!(parse_samples(src.as_bytes(), InputFormat::Csv).unwrap().is_empty());
        assert!(parse_samples("[]".as_bytes(), InputFormat::Json).unwrap().is_empty());
    }

    #[test]
    fn duplicate_key_rejected() {
        let src = "kernel,platform,problem_size_bytes,trial,m\nA,cpu,8,0,1\nA,cpu,8,0,2\n";
        let err = parse_samples(src.as_bytes(), InputFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::DuplicateKey { trial: 0, .. }), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let src = "kernel,platform,problem_size_bytes,trial,m\nA,cpu,8,0,1\nB,cpu,8,0,oops\n";
        let err = parse_samples(src.as_bytes(), InputFormat::Csv).unwrap_err();
        assert!(err.to_string().starts_with("line 3"), "{err}");

        let src = "kernel,platform,problem_size_bytes,trial,m\nA,tpu,8,0,1\n";
        let err = parse_samples(src.as_bytes(), InputFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::UnknownPlatform { ref token, .. } if token == "tpu"));

        let src = "kernel,platform,problem_size_bytes,trial,m\nA,cpu,8,0,inf\n";
        let err = parse_samples(src.as_bytes(), InputFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");

        let src = "kernel,platform,trial,m\nA,cpu,0,1\n";
        assert!(parse_samples(src.as_bytes(), InputFormat::Csv).is_err());
    }

    #[test]
    fn json_matches_csv() {
        let csv = "kernel,platform,problem_size_bytes,trial,gpu.time_sec,topdown.memory_bound\nK,gpu,1024,1,0.5,\nK,cpu,1024,0,,0.25\n";
        let json = r#"[
            {"kernel":"K","platform":"gpu","problem_size_bytes":1024,"trial":1,"gpu.time_sec":0.5},
            {"kernel":"K","platform":"cpu","problem_size_bytes":1024,"trial":0,"topdown.memory_bound":0.25}
        ]"#;
        let a = parse_samples(csv.as_bytes(), InputFormat::Csv).unwrap();
        let b = parse_samples(json.as_bytes(), InputFormat::Json).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gpu_zero_time_rejected_on_ingest() {
        let src = "kernel,platform,problem_size_bytes,trial,gpu.time_sec\nK,gpu,8,0,0\n";
        let err = parse_samples(src.as_bytes(), InputFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::NonPositiveTime { .. }));
    }

    fn gpu_counters(time: f64, l1: f64, l2: f64, hbm: f64, warp: f64) -> RawSample {
        sample(
            "K",
            Platform::Gpu,
            1,
            0,
            &[
                (GPU_TIME, time),
                (GPU_L1_TRANSACTIONS, l1),
                (GPU_L2_TRANSACTIONS, l2),
                (GPU_HBM_TRANSACTIONS, hbm),
                (GPU_WARP_INSTRUCTIONS, warp),
            ],
        )
    }

    #[test]
    fn gpu_rates_divide_by_time() {
        let s = derive_gpu_rates(&gpu_counters(2.0, 1.0e12, 4.0e11, 2.0e11, 8.0e11)).unwrap();
        assert_eq!(s.values[GPU_L1_RATE], 5.0e11);
        assert_eq!(s.values[GPU_L2_RATE], 2.0e11);
        assert_eq!(s.values[GPU_HBM_RATE], 1.0e11);
        assert_eq!(s.values[GPU_IPS], 4.0e11);
        // raw counters kept
        assert_eq!(s.values[GPU_L1_TRANSACTIONS], 1.0e12);

        let z = derive_gpu_rates(&gpu_counters(1.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        for m in DEFAULT_GPU_METRICS {
            assert_eq!(z.values[m], 0.0);
        }
    }

    #[test]
    fn gpu_rates_guards() {
        let mut s = gpu_counters(0.0, 1.0, 1.0, 1.0, 1.0);
        assert!(matches!(derive_gpu_rates(&s), Err(Error::NonPositiveTime { .. })));
        s.values.insert(GPU_TIME.into(), 1.0);
        s.values.remove(GPU_HBM_TRANSACTIONS);
        assert!(matches!(derive_gpu_rates(&s), Err(Error::MissingCounter { .. })));
        let cpu = sample("K", Platform::Cpu, 1, 0, &[]);
        assert!(derive_gpu_rates(&cpu).is_err());
    }

    #[test]
    fn trial_mean_and_cv() {
        let trials: Vec<_> = [0.90, 0.92, 0.94]
            .iter()
            .enumerate()
            .map(|(t, v)| sample("A", Platform::Cpu, 8, t as u32, &[(MEMORY_BOUND, *v)]))
            .collect();
        let agg = aggregate_trials(&trials).unwrap();
        assert_eq!(agg.len(), 1);
        assert!((agg[0].sample.values[MEMORY_BOUND] - 0.92).abs() < 1e-12);
        assert_eq!(agg[0].trials, 3);

        let single = aggregate_trials(&trials[..1]).unwrap();
        assert_eq!(single[0].sample.values[MEMORY_BOUND], 0.90);
        assert_eq!(single[0].cv[MEMORY_BOUND], 0.0);

        let two = [
            sample("B", Platform::Gpu, 8, 0, &[(GPU_IPS, 1.0e11)]),
            sample("B", Platform::Gpu, 8, 1, &[(GPU_IPS, 3.0e11)]),
        ];
        let agg = aggregate_trials(&two).unwrap();
        assert_eq!(agg[0].sample.values[GPU_IPS], 2.0e11);
        assert!((agg[0].cv[GPU_IPS] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_trials_rejected() {
        let s = [
            sample("A", Platform::Cpu, 8, 0, &[(MEMORY_BOUND, 0.5)]),
            sample("A", Platform::Cpu, 8, 1, &[(CORE_BOUND, 0.5)]),
        ];
        assert!(matches!(
            aggregate_trials(&s),
            Err(Error::InconsistentMetrics { .. })
        ));
    }

    fn topdown(kernel: &str, size: u64, v: f64) -> RawSample {
        sample(
            kernel,
            Platform::Cpu,
            size,
            0,
            &[(CORE_BOUND, v), (MEMORY_BOUND, 1.0 - v), (FETCH_LATENCY, 0.01), (FETCH_BANDWIDTH, 0.02)],
        )
    }

    #[test]
    fn single_size_table_shape() {
        let samples: Vec<_> = (0..46)
            .flat_map(|k| {
                let name = format!("K{k:02}");
                vec![topdown(&name, 100, 0.3), topdown(&name, 200, k as f64 / 100.0)]
            })
            .collect();
        let t = build_table(&samples, &DEFAULT_CPU_METRICS, SizePolicy::Single(200)).unwrap();
        assert_eq!((t.n_rows(), t.n_cols()), (46, 4));
        assert_eq!(t.get(7, 0), 0.07);
        let l = build_table(&samples, &DEFAULT_CPU_METRICS, SizePolicy::Largest).unwrap();
        assert_eq!(t, l.with_meta("size_policy", "single:200"));
    }

    #[test]
    fn variants_labelled_by_ascending_size() {
        let samples = [topdown("L", 400, 0.3), topdown("L", 100, 0.1), topdown("L", 200, 0.2)];
        let t = build_table(&samples, &DEFAULT_CPU_METRICS, SizePolicy::AllSizesAsVariants).unwrap();
        assert_eq!(t.labels(), ["L", "L_1", "L_2"]);
        assert_eq!(t.get(0, 0), 0.3);
        assert_eq!(t.get(1, 0), 0.1);
        assert_eq!(t.get(2, 0), 0.2);
    }

    #[test]
    fn table_guards() {
        let samples = [topdown("A", 100, 0.3), topdown("B", 200, 0.3)];
        let err = build_table(&samples, &DEFAULT_CPU_METRICS, SizePolicy::Single(200)).unwrap_err();
        assert!(matches!(err, Error::MissingSize { ref kernel, .. } if kernel == "A"));
        let err = build_table(&samples, &["topdown.memroy_bound"], SizePolicy::Largest).unwrap_err();
        assert!(err.to_string().contains("topdown.memroy_bound"), "{err}");
        let bad = [topdown("A", 100, 1.5)];
        assert!(matches!(
            build_table(&bad, &DEFAULT_CPU_METRICS, SizePolicy::Largest),
            Err(Error::ColumnInvariant { .. })
        ));
    }

    fn table(rows: &[&str], cols: &[&str]) -> MetricTable {
        let data = rows
            .iter()
            .enumerate()
            .map(|(i, _)| cols.iter().enumerate().map(|(j, _)| (i * 10 + j) as f64 / 100.0).collect())
            .collect();
        MetricTable::new(
            rows.iter().map(|s| s.to_string()).collect(),
            cols.iter().map(|c| MetricDescriptor::infer(c)).collect(),
            data,
            Scale::Raw,
        )
        .unwrap()
    }

    #[test]
    fn merge_inner_join() {
        let cpu = table(&["A", "B", "C"], &DEFAULT_CPU_METRICS);
        let gpu = table(&["B", "C", "D"], &DEFAULT_GPU_METRICS);
        let m = merge_platforms(&cpu, &gpu).unwrap();
        assert_eq!(m.labels(), ["B", "C"]);
        assert_eq!(m.n_cols(), 8);
        assert_eq!(m.meta()["dropped_kernels"], "A,D");
        assert_eq!(m.row(0)[..4], *cpu.row(1));
        assert_eq!(m.row(0)[4..], *gpu.row(0));

        let same = merge_platforms(&cpu, &table(&["C", "A", "B"], &DEFAULT_GPU_METRICS)).unwrap();
        assert_eq!((same.n_rows(), same.n_cols()), (3, 8));

        let disjoint = table(&["X"], &DEFAULT_GPU_METRICS);
        assert!(matches!(merge_platforms(&cpu, &disjoint), Err(Error::EmptyIntersection)));
    }

    #[test]
    fn table_rejects_duplicate_rows() {
        let err = MetricTable::standardized(&["a", "a"], &["x"], vec![vec![0.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::DuplicateLabel(_)));
    }
}
