//! Turning input files into analysis-ready tables.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use kernelsim::dataset::{
    aggregate_trials, build_table, derive_gpu_rates, merge_platforms, parse_samples, InputFormat, MetricDescriptor,
    MetricTable, Platform, PlatformScope, RawSample, Scale, SizePolicy, DEFAULT_CPU_METRICS, DEFAULT_GPU_METRICS,
    GPU_HBM_RATE, GPU_IPS, GPU_L1_RATE, GPU_L2_RATE,
};
use kernelsim::preprocess::{fit_transform, LogPolicy, TransformSpec};

use crate::{CliError, FormatArg, LogPolicyArg, PlatformArg, PrepArgs, SourceArgs};

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn format_for(path: &Path, forced: Option<FormatArg>) -> Result<InputFormat, CliError> {
    match forced {
        Some(FormatArg::Csv) => Ok(InputFormat::Csv),
        Some(FormatArg::Json) => Ok(InputFormat::Json),
        None => match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(InputFormat::Csv),
            Some("json") => Ok(InputFormat::Json),
            _ => Err(CliError::Usage(format!(
                "{}: cannot tell the format from the extension; pass --format",
                path.display()
            ))),
        },
    }
}

/// Parses every file and derives GPU rates where the counters are present
/// but the rates are not.
pub fn load_samples(paths: &[std::path::PathBuf], format: Option<FormatArg>) -> Result<Vec<RawSample>, CliError> {
    let mut all = Vec::new();
    for path in paths {
        let parsed = parse_samples(open(path)?, format_for(path, format)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        all.extend(parsed);
    }
    let rates = [GPU_L1_RATE, GPU_L2_RATE, GPU_HBM_RATE, GPU_IPS];
    all.into_iter()
        .map(|s| {
            if s.platform == Platform::Gpu && rates.iter().any(|r| !s.values.contains_key(*r)) {
                derive_gpu_rates(&s).map_err(CliError::from)
            } else {
                Ok(s)
            }
        })
        .collect()
}

pub fn platforms_in(samples: &[RawSample]) -> BTreeSet<Platform> {
    samples.iter().map(|s| s.platform).collect()
}

/// The platform list to analyse: the explicit choice, or whatever is present.
pub fn resolve_platforms(samples: &[RawSample], choice: Option<PlatformArg>) -> Result<Vec<Platform>, CliError> {
    let present = platforms_in(samples);
    let wanted: Vec<Platform> = match choice {
        Some(PlatformArg::Cpu) => vec![Platform::Cpu],
        Some(PlatformArg::Gpu) => vec![Platform::Gpu],
        Some(PlatformArg::Both) => vec![Platform::Cpu, Platform::Gpu],
        None => present.iter().copied().collect(),
    };
    if wanted.is_empty() {
        return Err(CliError::Usage("input contains no samples".into()));
    }
    if let Some(missing) = wanted.iter().find(|p| !present.contains(p)) {
        return Err(CliError::Usage(format!("input has no {missing} samples")));
    }
    Ok(wanted)
}

/// Requested metrics for one platform: the explicit list filtered to the
/// platform, or the platform defaults.
pub fn metrics_for(platform: Platform, explicit: &[String], multi: bool) -> Vec<String> {
    if explicit.is_empty() {
        let defaults: &[&str] = match platform {
            Platform::Cpu => &DEFAULT_CPU_METRICS,
            Platform::Gpu => &DEFAULT_GPU_METRICS,
        };
        return defaults.iter().map(|s| s.to_string()).collect();
    }
    if !multi {
        return explicit.to_vec();
    }
    explicit
        .iter()
        .filter(|m| {
            let scope = MetricDescriptor::infer(m).platform;
            match platform {
                Platform::Gpu => scope == PlatformScope::Gpu,
                Platform::Cpu => scope != PlatformScope::Gpu,
            }
        })
        .cloned()
        .collect()
}

fn size_policy(s: &str) -> Result<SizePolicy, CliError> {
    match s {
        "largest" => Ok(SizePolicy::Largest),
        "all" => Ok(SizePolicy::AllSizesAsVariants),
        n => n
            .parse::<u64>()
            .map(SizePolicy::Single)
            .map_err(|_| CliError::Usage(format!("--size must be bytes, `largest` or `all`, got `{n}`"))),
    }
}

/// Raw metric table from either a prebuilt table or sample files.
pub fn raw_table(src: &SourceArgs) -> Result<MetricTable, CliError> {
    if let Some(path) = &src.table {
        let t = MetricTable::read_csv(open(path)?, Scale::Raw)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if src.metrics.is_empty() {
            return Ok(t);
        }
        let idx = src
            .metrics
            .iter()
            .map(|m| t.column_index(m).ok_or_else(|| CliError::Input(kernelsim::Error::MissingColumn(m.clone()))))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(t.select_columns(&idx));
    }

    if src.input.is_empty() {
        return Err(CliError::Usage("one of --input or --table is required".into()));
    }
    let samples = load_samples(&src.input, src.format)?;
    let platforms = resolve_platforms(&samples, src.platform)?;
    let policy = size_policy(&src.size)?;
    let aggregated: Vec<RawSample> = aggregate_trials(&samples)?.into_iter().map(|a| a.sample).collect();
    let multi = platforms.len() > 1;
    let mut tables = Vec::new();
    for &p in &platforms {
        let metrics = metrics_for(p, &src.metrics, multi);
        if metrics.is_empty() {
            return Err(CliError::Usage(format!("no requested metric applies to {p}")));
        }
        let subset: Vec<RawSample> = aggregated.iter().filter(|s| s.platform == p).cloned().collect();
        tables.push(build_table(&subset, &metrics, policy)?);
    }
    Ok(match tables.len() {
        1 => tables.pop().expect("one table"),
        _ => merge_platforms(&tables[0], &tables[1])?,
    })
}

pub struct Prepared {
    pub raw: MetricTable,
    pub table: MetricTable,
    pub transform: Option<TransformSpec>,
}

pub fn prepare(src: &SourceArgs, prep: &PrepArgs) -> Result<Prepared, CliError> {
    let raw = raw_table(src)?;
    if prep.no_standardize {
        return Ok(Prepared { table: raw.clone(), raw, transform: None });
    }
    let policy = if !prep.log_metrics.is_empty() {
        LogPolicy::Explicit(prep.log_metrics.clone())
    } else {
        match prep.log_policy {
            LogPolicyArg::Auto => LogPolicy::Auto { threshold_ratio: prep.log_threshold },
            LogPolicyArg::None => LogPolicy::None,
        }
    };
    let (table, spec) = fit_transform(&raw, &policy)?;
    Ok(Prepared { raw, table, transform: Some(spec) })
}
