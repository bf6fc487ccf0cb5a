//! Reporting: parameter-count comparisons and loss-curve stability analytics
//! (dynamic range, interquartile range, outlier counts) with a simple overlay
//! plot.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::font;
use crate::train::{MetricRow, METRIC_HEADER};

// ---------------------------------------------------------------------------
// Metric-log parsing
// ---------------------------------------------------------------------------

/// Parse a metric CSV written by the trainers.
pub fn parse_metric_log(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRIC_HEADER => {}
        _ => {
            return Err(Error::Data(format!(
                "{} is not a metric log (missing header)",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Data(format!(
                "{}: line {} has {} fields, expected 9",
                path.display(),
                ln + 2,
                parts.len()
            )));
        }
        let p = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number '{}'", path.display(), parts[i])))
        };
        rows.push(MetricRow {
            step: p(0)? as u64,
            epoch: p(1)? as usize,
            task_i: p(2)? as usize,
            task_k: p(3)? as usize,
            mcd_loss: p(4)?,
            decoder_adv: p(5)?,
            reconstruction: p(6)?,
            total: p(7)?,
            lr: p(8)?,
        });
    }
    Ok(rows)
}

/// Which loss column to analyze.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossColumn {
    McdLoss,
    DecoderAdv,
    Reconstruction,
    Total,
}

impl LossColumn {
    pub fn name(&self) -> &'static str {
        match self {
            LossColumn::McdLoss => "mcd_loss",
            LossColumn::DecoderAdv => "decoder_adv",
            LossColumn::Reconstruction => "reconstruction",
            LossColumn::Total => "total",
        }
    }

    pub fn extract(&self, rows: &[MetricRow]) -> Vec<f64> {
        rows.iter()
            .map(|r| match self {
                LossColumn::McdLoss => r.mcd_loss,
                LossColumn::DecoderAdv => r.decoder_adv,
                LossColumn::Reconstruction => r.reconstruction,
                LossColumn::Total => r.total,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Stability statistics
// ---------------------------------------------------------------------------

/// Stability statistics of one loss series.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub name: String,
    pub entries: usize,
    /// max - min over the full series.
    pub dynamic_range: f64,
    pub iqr: f64,
    pub outlier_threshold: f64,
    /// Steps with |loss| above the threshold.
    pub outlier_count: usize,
}

/// Tau-th sample quantile with the R-8 interpolation rule
/// (`h = (n + 1/3) tau + 1/3`, linear between order statistics).
pub fn quantile(values: &[f64], tau: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=1.0).contains(&tau));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len() as f64;
    let h = (n + 1.0 / 3.0) * tau + 1.0 / 3.0;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n {
        return sorted[sorted.len() - 1];
    }
    let hf = h.floor();
    let lo = sorted[hf as usize - 1];
    let hi = sorted[hf as usize];
    lo + (h - hf) * (hi - lo)
}

/// Compute stability statistics for one named series.
pub fn analyze_series(name: &str, values: &[f64], outlier_threshold: f64) -> Result<StabilityReport> {
    if values.is_empty() {
        return Err(Error::Data(format!("series '{}' is empty", name)));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("series '{}' contains non-finite values", name)));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(StabilityReport {
        name: name.to_string(),
        entries: values.len(),
        dynamic_range: max - min,
        iqr: quantile(values, 0.75) - quantile(values, 0.25),
        outlier_threshold,
        outlier_count: values.iter().filter(|v| v.abs() > outlier_threshold).count(),
    })
}

/// Analyze one column of several metric logs; writes a machine-readable CSV
/// report and an overlay plot next to `out_stem`.
pub fn analyze_stability(
    logs: &[PathBuf],
    column: LossColumn,
    outlier_threshold: f64,
    out_stem: &Path,
) -> Result<(Vec<StabilityReport>, PathBuf, PathBuf)> {
    if logs.is_empty() {
        return Err(Error::Data("at least one metric log required".into()));
    }
    let mut reports = Vec::new();
    let mut series = Vec::new();
    for log in logs {
        let rows = parse_metric_log(log)?;
        let values = column.extract(&rows);
        let name = log
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or("log")
            .to_string();
        reports.push(analyze_series(&name, &values, outlier_threshold)?);
        series.push((name, values));
    }
    if let Some(parent) = out_stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let csv_path = out_stem.with_extension("csv");
    let mut csv = String::from("name,column,entries,dynamic_range,iqr,outlier_threshold,outlier_count\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, column.name(), r.entries, r.dynamic_range, r.iqr, r.outlier_threshold, r.outlier_count
        ));
    }
    std::fs::write(&csv_path, csv)?;
    let plot_path = out_stem.with_extension("png");
    let plot = plot_series(&series, column.name());
    plot.save(&plot_path)?;
    Ok((reports, csv_path, plot_path))
}

const SERIES_COLORS: [Rgb<u8>; 6] = [
    Rgb([200, 40, 40]),
    Rgb([40, 80, 200]),
    Rgb([30, 150, 60]),
    Rgb([200, 140, 20]),
    Rgb([130, 40, 170]),
    Rgb([20, 150, 160]),
];

/// Overlay line plot of loss series with axes and a legend.
pub fn plot_series(series: &[(String, Vec<f64>)], title: &str) -> RgbImage {
    let (w, h) = (800u32, 420u32);
    let (ml, mr, mt, mb) = (50i64, 10i64, 24i64, 30i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    let mut xmax = 1usize;
    for (_, v) in series {
        for &x in v {
            ymin = ymin.min(x);
            ymax = ymax.max(x);
        }
        xmax = xmax.max(v.len());
    }
    if !ymin.is_finite() || ymin == ymax {
        ymin = ymin.min(0.0) - 1.0;
        ymax = ymax.max(0.0) + 1.0;
    }
    let plot_w = w as i64 - ml - mr;
    let plot_h = h as i64 - mt - mb;
    let to_px = |i: usize, v: f64| -> (i64, i64) {
        let x = ml + (i as f64 / (xmax.max(2) - 1) as f64 * plot_w as f64) as i64;
        let y = mt + ((ymax - v) / (ymax - ymin) * plot_h as f64) as i64;
        (x, y)
    };
    // Axes.
    for x in ml..(w as i64 - mr) {
        img.put_pixel(x as u32, (h as i64 - mb) as u32, Rgb([0, 0, 0]));
    }
    for y in mt..(h as i64 - mb) {
        img.put_pixel(ml as u32, y as u32, Rgb([0, 0, 0]));
    }
    font::draw_text(&mut img, ml, 4, title, 2, Rgb([0, 0, 0]));
    font::draw_text(&mut img, 2, mt, &format!("{:.2}", ymax), 1, Rgb([60, 60, 60]));
    font::draw_text(&mut img, 2, h as i64 - mb - 8, &format!("{:.2}", ymin), 1, Rgb([60, 60, 60]));
    font::draw_text(&mut img, w as i64 - mr - 60, h as i64 - mb + 6, &format!("{} steps", xmax), 1, Rgb([60, 60, 60]));
    for (si, (name, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in values.iter().enumerate() {
            let p = to_px(i, v);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, color);
            }
            prev = Some(p);
        }
        let ly = mt + 4 + si as i64 * 12;
        for dx in 0..14 {
            let x = (w as i64 - mr - 150 + dx).max(0) as u32;
            if x < w {
                img.put_pixel(x, ly as u32 + 3, color);
            }
        }
        font::draw_text(&mut img, w as i64 - mr - 132, ly, name, 1, Rgb([0, 0, 0]));
    }
    img
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter report
// ---------------------------------------------------------------------------

/// One model's parameter breakdown for the comparison table.
#[derive(Debug, Clone)]
pub struct ParamReportEntry {
    pub name: String,
    /// Sub-network name and trainable-scalar count.
    pub parts: Vec<(String, usize)>,
}

impl ParamReportEntry {
    pub fn total(&self) -> usize {
        self.parts.iter().map(|(_, c)| c).sum()
    }
}

/// Render the comparison table with per-model totals, sub-network splits, and
/// pairwise ratio lines. An independent walker (the caller's per-tensor
/// counts) should cross-check the totals.
pub fn report_parameters(entries: &[ParamReportEntry]) -> String {
    let mut out = String::new();
    out.push_str("model,part,parameters\n");
    for e in entries {
        for (part, count) in &e.parts {
            out.push_str(&format!("{},{},{}\n", e.name, part, count));
        }
        out.push_str(&format!("{},total,{}\n", e.name, e.total()));
    }
    out.push('\n');
    for a in entries {
        for b in entries {
            out.push_str(&format!(
                "ratio {}/{}: {:.4}\n",
                a.name,
                b.name,
                a.total() as f64 / b.total() as f64
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::statistics::OrderStatistics;

    #[test]
    fn constant_series_has_zero_range() {
        let r = analyze_series("c", &[0.5; 10], 10.0).unwrap();
        assert_eq!(r.dynamic_range, 0.0);
        assert_eq!(r.iqr, 0.0);
        assert_eq!(r.outlier_count, 0);
    }

    #[test]
    fn outlier_example() {
        let r = analyze_series("s", &[1.0, 2.0, 3.0, 100.0], 10.0).unwrap();
        assert_eq!(r.outlier_count, 1);
        assert_eq!(r.dynamic_range, 99.0);
    }

    #[test]
    fn quantiles_match_reference_library() {
        let fixtures: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0.3, -2.0, 8.5, 0.0, 0.0, 1.25, 7.0, -3.5],
            (0..101).map(|i| (i as f64 * 0.37).sin() * 10.0).collect(),
        ];
        for values in fixtures {
            for tau in [0.25, 0.5, 0.75, 0.1, 0.9] {
                let ours = quantile(&values, tau);
                let mut data = statrs::statistics::Data::new(values.clone());
                let reference = data.quantile(tau);
                assert!(
                    (ours - reference).abs() < 1e-9,
                    "tau={}: {} vs {}",
                    tau,
                    ours,
                    reference
                );
            }
        }
    }

    #[test]
    fn param_report_ratios() {
        let entries = vec![
            ParamReportEntry {
                name: "cerfgan".into(),
                parts: vec![("mcd".into(), 341), ("decoder".into(), 659)],
            },
            ParamReportEntry { name: "stargan".into(), parts: vec![("all".into(), 2000)] },
        ];
        let text = report_parameters(&entries);
        assert!(text.contains("cerfgan,total,1000"));
        assert!(text.contains("ratio cerfgan/cerfgan: 1.0000"));
        assert!(text.contains("ratio cerfgan/stargan: 0.5000"));
    }

    #[test]
    fn metric_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let row = MetricRow {
            step: 3,
            epoch: 1,
            task_i: 0,
            task_k: 1,
            mcd_loss: 1.25,
            decoder_adv: 0.5,
            reconstruction: 0.125,
            total: 13.0,
            lr: 2e-4,
        };
        std::fs::write(&path, format!("{}\n{}\n", METRIC_HEADER, row.to_csv())).unwrap();
        let rows = parse_metric_log(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 3);
        assert_eq!(rows[0].total, 13.0);
        assert!(parse_metric_log(&dir.path().join("missing.csv")).is_err());
        std::fs::write(&path, "bogus\n1,2\n").unwrap();
        assert!(parse_metric_log(&path).is_err());
    }

    #[test]
    fn stability_end_to_end_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["runa", "runb"].iter().enumerate() {
            let d = dir.path().join(name);
            std::fs::create_dir_all(&d).unwrap();
            let mut text = format!("{}\n", METRIC_HEADER);
            for s in 0..20 {
                let row = MetricRow {
                    step: s,
                    epoch: 0,
                    task_i: 0,
                    task_k: 1,
                    mcd_loss: 1.0,
                    decoder_adv: 0.5 + i as f64 * (s as f64 / 10.0),
                    reconstruction: 0.1,
                    total: 10.0,
                    lr: 2e-4,
                };
                text.push_str(&row.to_csv());
                text.push('\n');
            }
            std::fs::write(d.join("metrics.csv"), text).unwrap();
        }
        let logs = vec![
            dir.path().join("runa/metrics.csv"),
            dir.path().join("runb/metrics.csv"),
        ];
        let (reports, csv, png) = analyze_stability(
            &logs,
            LossColumn::DecoderAdv,
            10.0,
            &dir.path().join("report/stability"),
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].dynamic_range, 0.0);
        assert!(reports[1].dynamic_range > 1.8);
        assert!(csv.exists());
        assert!(png.exists());
    }
}
