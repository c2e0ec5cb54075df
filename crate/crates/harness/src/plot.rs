//! SVG figures rendered from the CSVs of `run` and `me-bench`.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::output::{column_indices, read_csv};
use crate::HarnessError;

/// One labelled curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Linear,
    Log,
}

/// Figures written by [`emit_plots`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    /// Number of series per file.
    pub series: Vec<usize>,
}

fn parse(path: &Path, s: &str) -> Result<Option<f64>, HarnessError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| HarnessError::Runtime(format!("{}: `{s}` is not a number", path.display())))
}

fn series_from(path: &Path, x: &str, y: &str, label: &str) -> Result<Series, HarnessError> {
    let (header, rows) = read_csv(path)?;
    let idx = column_indices(path, &header, &[x, y])?;
    let mut points = Vec::new();
    for row in &rows {
        if let (Some(a), Some(b)) = (parse(path, &row[idx[0]])?, parse(path, &row[idx[1]])?) {
            points.push((a, b));
        }
    }
    Ok(Series { label: label.into(), points })
}

fn bench_series(path: &Path, x: &str) -> Result<Vec<Series>, HarnessError> {
    let (header, rows) = read_csv(path)?;
    let idx = column_indices(path, &header, &["method", "param", x, "mean_error_mean"])?;
    let mut out: Vec<Series> = Vec::new();
    for row in &rows {
        let label = format!("{} ({})", row[idx[0]], row[idx[1]].parse::<f64>().map_or(row[idx[1]].clone(), |p| format!("{p}")));
        let (Some(a), Some(b)) = (parse(path, &row[idx[2]])?, parse(path, &row[idx[3]])?) else { continue };
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((a, b)),
            None => out.push(Series { label, points: vec![(a, b)] }),
        }
    }
    Ok(out)
}

fn run_label(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("method").and_then(|m| m.as_str()).map(str::to_string))
        .unwrap_or_else(|| dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()))
}

/// Renders a line chart. Points outside a log axis' domain are dropped.
pub fn render(
    path: &Path,
    title: &str,
    series: &[Series],
    (x_label, x_axis): (&str, Axis),
    (y_label, y_axis): (&str, Axis),
) -> Result<(), HarnessError> {
    let keep = |v: f64, a: Axis| v.is_finite() && (a == Axis::Linear || v > 0.0);
    let series: Vec<Series> = series
        .iter()
        .map(|s| Series {
            label: s.label.clone(),
            points: s.points.iter().copied().filter(|&(x, y)| keep(x, x_axis) && keep(y, y_axis)).collect(),
        })
        .collect();
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(HarnessError::Runtime(format!("{}: nothing to plot", path.display())));
    }
    let range = |vals: Vec<f64>, a: Axis| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match a {
            Axis::Log if hi > lo => (lo / 1.2, hi * 1.2),
            Axis::Log => (lo / 2.0, hi * 2.0),
            Axis::Linear if hi > lo => (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo)),
            Axis::Linear => (lo - 1.0, hi + 1.0),
        }
    };
    let xr = range(all.iter().map(|p| p.0).collect(), x_axis);
    let yr = range(all.iter().map(|p| p.1).collect(), y_axis);
    let err = |e: &dyn std::fmt::Display| HarnessError::Runtime(format!("plotting {}: {e}", path.display()));

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    macro_rules! draw {
        ($chart:expr) => {{
            let mut chart = $chart.map_err(|e| err(&e))?;
            chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| err(&e))?;
            for (k, s) in series.iter().enumerate() {
                let color = Palette99::pick(k).to_rgba();
                chart
                    .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                    .map_err(|e| err(&e))?
                    .label(s.label.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| err(&e))?;
        }};
    }
    let mut builder = ChartBuilder::on(&root);
    builder.caption(title, ("sans-serif", 22)).margin(12).x_label_area_size(40).y_label_area_size(60);
    match (x_axis, y_axis) {
        (Axis::Linear, Axis::Linear) => draw!(builder.build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)),
        (Axis::Log, Axis::Linear) => draw!(builder.build_cartesian_2d((xr.0..xr.1).log_scale(), yr.0..yr.1)),
        (Axis::Linear, Axis::Log) => draw!(builder.build_cartesian_2d(xr.0..xr.1, (yr.0..yr.1).log_scale())),
        (Axis::Log, Axis::Log) => draw!(builder.build_cartesian_2d((xr.0..xr.1).log_scale(), (yr.0..yr.1).log_scale())),
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Collects `aggregate.csv` from `dir` and its immediate subdirectories
/// and `me_bench.csv` from `dir`, then writes:
/// `complexity.svg` (mean error vs cumulative samples, log-log),
/// `iterations.svg` (mean error vs iteration) and `me_bench.svg`.
/// An empty directory is a no-op.
pub fn emit_plots(dir: &Path) -> Result<PlotOutput, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::Runtime(format!("{} is not a directory", dir.display())));
    }
    let mut run_dirs = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::Runtime(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    run_dirs.extend(subdirs);

    let mut complexity = Vec::new();
    let mut iterations = Vec::new();
    for d in &run_dirs {
        let path = d.join("aggregate.csv");
        if path.is_file() {
            let label = run_label(d);
            complexity.push(series_from(&path, "cumulative_samples_mean", "mean_error_mean", &label)?);
            iterations.push(series_from(&path, "t", "mean_error_mean", &label)?);
        }
    }
    let mut out = PlotOutput::default();
    let mut emit = |name: &str, title: &str, series: Vec<Series>, x: (&str, Axis), y: (&str, Axis)| {
        if series.iter().all(|s| s.points.is_empty()) {
            return Ok(());
        }
        let path = dir.join(name);
        render(&path, title, &series, x, y)?;
        out.files.push(path);
        out.series.push(series.len());
        Ok::<(), HarnessError>(())
    };
    emit(
        "complexity.svg",
        "Mean error vs samples",
        complexity,
        ("cumulative samples", Axis::Log),
        ("mean error", Axis::Log),
    )?;
    emit("iterations.svg", "Mean error per iteration", iterations, ("iteration", Axis::Linear), ("mean error", Axis::Log))?;
    let bench = dir.join("me_bench.csv");
    if bench.is_file() {
        emit(
            "me_bench.svg",
            "Estimators at equal budgets",
            bench_series(&bench, "t")?,
            ("iteration", Axis::Linear),
            ("mean error", Axis::Log),
        )?;
    }
    Ok(out)
}
