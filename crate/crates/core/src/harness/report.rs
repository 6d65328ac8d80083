//! Aggregation of seed runs into `mean (std)` tables, and metric plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{RunResult, METRICS_FILE, RESULT_FILE};
use crate::error::{Error, Result};

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean (std)` with two decimals on the mean; the deviation gets a third
/// decimal when it is below 0.01.
pub fn format_mean_std(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    let (mean, std) = mean_std(values);
    if std < 0.01 {
        format!("{mean:.2} ({std:.3})")
    } else {
        format!("{mean:.2} ({std:.2})")
    }
}

/// Every `result.json` below `root`, in path order.
pub fn collect_results(root: &Path) -> Result<Vec<(PathBuf, RunResult)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == RESULT_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    found.into_iter().map(|p| RunResult::read(&p).map(|r| (p, r))).collect()
}

fn group_label(r: &RunResult) -> String {
    match r.objective {
        crate::training::Objective::MocoBaseline => format!("{} moco", r.name),
        crate::training::Objective::Combined => format!("{} alpha={} t_end={}", r.name, r.alpha, r.t_end),
    }
}

/// One row per configuration, one column per metric, seeds aggregated.
pub fn report_table(results: &[RunResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::data("no run results to report"));
    }
    let mut groups: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(group_label(r)).or_default().push(r);
    }
    let mut metrics: Vec<String> = results.iter().flat_map(|r| r.scores.keys().cloned()).collect();
    metrics.sort();
    metrics.dedup();
    let mut out = String::from("config,seeds");
    for m in &metrics {
        write!(out, ",{m}").unwrap();
    }
    out.push_str(",intra\n");
    for (label, runs) in groups {
        write!(out, "{label},{}", runs.len()).unwrap();
        for m in &metrics {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.scores.get(m).copied()).collect();
            write!(out, ",{}", format_mean_std(&values)).unwrap();
        }
        let intra: Vec<f64> = runs.iter().filter_map(|r| r.intra).collect();
        writeln!(out, ",{}", format_mean_std(&intra)).unwrap();
    }
    Ok(out)
}

/// Directories below `root` holding a metric log.
pub fn metric_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(METRICS_FILE).is_file() {
            found.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

#[cfg(feature = "plots")]
mod plots {
    use std::path::{Path, PathBuf};

    use plotters::prelude::*;

    use crate::error::{Error, Result};
    use crate::training::{metrics_from_csv, MetricRow};

    type Series = (&'static str, RGBColor, Vec<(f64, f64)>);

    fn plot_err<E: std::fmt::Display>(e: E) -> Error {
        Error::Io(std::io::Error::other(e.to_string()))
    }

    fn line_chart(path: &Path, title: &str, y_desc: &str, series: &[Series]) -> Result<()> {
        let points = series.iter().flat_map(|s| s.2.iter());
        let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if !y_min.is_finite() {
            return Ok(());
        }
        let pad = ((y_max - y_min) * 0.05).max(1e-3);
        let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(0f64..x_max, (y_min - pad)..(y_max + pad))
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("epoch").y_desc(y_desc).draw().map_err(plot_err)?;
        for (name, color, pts) in series {
            let color = *color;
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color))
                .map_err(plot_err)?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
        Ok(())
    }

    fn pick(rows: &[MetricRow], f: impl Fn(&MetricRow) -> Option<f64>) -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    }

    /// Writes `loss.svg` and, when monitored, `knn.svg` next to the metric log.
    pub fn plot_run(dir: &Path) -> Result<Vec<PathBuf>> {
        let rows = metrics_from_csv(&std::fs::read_to_string(dir.join(super::METRICS_FILE))?)?;
        let mut written = Vec::new();
        if rows.is_empty() {
            return Ok(written);
        }
        let loss = dir.join("loss.svg");
        line_chart(
            &loss,
            "training loss",
            "loss",
            &[
                ("total", RED, pick(&rows, |r| Some(r.loss_total))),
                ("moco", BLUE, pick(&rows, |r| Some(r.loss_moco))),
                ("id", GREEN, pick(&rows, |r| Some(r.loss_id))),
            ],
        )?;
        written.push(loss);
        let knn5 = pick(&rows, |r| r.knn5_val);
        let knn200 = pick(&rows, |r| r.knn200_val);
        if !knn5.is_empty() || !knn200.is_empty() {
            let knn = dir.join("knn.svg");
            line_chart(&knn, "k-NN validation accuracy", "accuracy", &[("5-NN", RED, knn5), ("200-NN", BLUE, knn200)])?;
            written.push(knn);
        }
        Ok(written)
    }
}

#[cfg(feature = "plots")]
pub use plots::plot_run;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_mean_and_deviation() {
        let v = [0.80, 0.81, 0.79, 0.80, 0.80];
        let (m, s) = mean_std(&v);
        assert!((m - 0.80).abs() < 1e-12);
        assert!((s - (0.0002f64 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(format_mean_std(&v), "0.80 (0.007)");
        assert_eq!(format_mean_std(&[0.5, 0.7]), "0.60 (0.14)");
        assert_eq!(format_mean_std(&[0.5]), "0.50 (0.000)");
    }
}
