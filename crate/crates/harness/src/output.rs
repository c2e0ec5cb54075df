//! CSV and manifest writers. Column names and order are fixed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use lowrank_rl::engine::MetricsTrace;

use crate::HarnessError;

pub const SEED_COLUMNS: [&str; 9] = [
    "t", "cumulative_samples", "linf_error", "mean_error", "s_size", "a_size", "omega_size", "n_samples", "sigma_r",
];

pub const AGGREGATE_COLUMNS: [&str; 8] = [
    "t", "n", "cumulative_samples_mean", "cumulative_samples_std", "linf_error_mean", "linf_error_std",
    "mean_error_mean", "mean_error_std",
];

pub const TIMING_COLUMNS: [&str; 3] = ["seed", "t", "wall_ms"];

pub const BENCH_COLUMNS: [&str; 9] = [
    "method", "param", "t", "n", "cumulative_samples", "linf_error_mean", "linf_error_std", "mean_error_mean",
    "mean_error_std",
];

pub const BENCH_BEST_COLUMNS: [&str; 4] = ["method", "param", "final_mean_error", "final_linf_error"];

pub const ROLLOUT_COLUMNS: [&str; 6] = ["source", "metric", "mean", "std", "episodes", "horizon"];

pub const EPISODE_COLUMNS: [&str; 3] = ["source", "episode", "value"];

/// 17 significant digits; parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), HarnessError> {
    let io = |e: csv::Error| HarnessError::Runtime(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn write_seed_csv(path: &Path, trace: &MetricsTrace) -> Result<(), HarnessError> {
    let rows = trace.rows.iter().map(|r| {
        vec![
            r.t.to_string(),
            r.cumulative_samples.to_string(),
            fmt_opt(r.linf_error),
            fmt_opt(r.mean_error),
            r.s_size.to_string(),
            r.a_size.to_string(),
            r.omega_size.to_string(),
            r.n_samples.to_string(),
            fmt_opt(r.sigma_r),
        ]
    });
    write_rows(path, &SEED_COLUMNS, rows)
}

/// Per-iteration mean and spread across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub t: usize,
    pub n: usize,
    pub cumulative_samples: (f64, f64),
    pub linf_error: Option<(f64, f64)>,
    pub mean_error: Option<(f64, f64)>,
}

pub fn aggregate(traces: &[MetricsTrace]) -> Vec<AggregateRow> {
    let t_max = traces.iter().map(|tr| tr.rows.len()).min().unwrap_or(0);
    (0..t_max)
        .map(|k| {
            let col = |f: &dyn Fn(&lowrank_rl::engine::IterationStats) -> Option<f64>| -> Option<(f64, f64)> {
                let xs: Option<Vec<f64>> = traces.iter().map(|tr| f(&tr.rows[k])).collect();
                xs.map(|xs| mean_std(&xs))
            };
            AggregateRow {
                t: traces[0].rows[k].t,
                n: traces.len(),
                cumulative_samples: col(&|r| Some(r.cumulative_samples as f64)).expect("always present"),
                linf_error: col(&|r| r.linf_error),
                mean_error: col(&|r| r.mean_error),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<(), HarnessError> {
    let pair = |p: Option<(f64, f64)>| [fmt_opt(p.map(|x| x.0)), fmt_opt(p.map(|x| x.1))];
    let rows = rows.iter().map(|r| {
        let [lm, ls] = pair(r.linf_error);
        let [mm, ms] = pair(r.mean_error);
        vec![
            r.t.to_string(),
            r.n.to_string(),
            fmt_f64(r.cumulative_samples.0),
            fmt_f64(r.cumulative_samples.1),
            lm,
            ls,
            mm,
            ms,
        ]
    });
    write_rows(path, &AGGREGATE_COLUMNS, rows)
}

/// Provenance record written next to every set of outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub env: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub schedule_mode: String,
    pub theory_range_exceeded: bool,
    pub harness_version: String,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestFile {
    pub path: String,
    pub config_hash: String,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| HarnessError::Runtime(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn file_entries(files: &[PathBuf], dir: &Path, hash: &str) -> Vec<ManifestFile> {
    files
        .iter()
        .map(|p| ManifestFile {
            path: p.strip_prefix(dir).unwrap_or(p).display().to_string(),
            config_hash: hash.to_string(),
        })
        .collect()
}

pub fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Runtime(format!("creating {}: {e}", dir.display())))
}

/// Reads a CSV as a header and string records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), HarnessError> {
    let err = |e: csv::Error| HarnessError::Runtime(format!("reading {}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(err)?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Index of each requested column, or an error naming the missing ones.
pub fn column_indices(path: &Path, header: &[String], wanted: &[&str]) -> Result<Vec<usize>, HarnessError> {
    let missing: Vec<&str> = wanted.iter().copied().filter(|w| !header.iter().any(|h| h == w)).collect();
    if !missing.is_empty() {
        return Err(HarnessError::Runtime(format!("{}: missing column(s) {}", path.display(), missing.join(", "))));
    }
    Ok(wanted.iter().map(|w| header.iter().position(|h| h == w).expect("checked")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(1.5), "1.5000000000000000e0");
    }

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
