//! Aggregation of run records into `metrics.csv`, `table.md` and line plots
//! of DC/JI against the labeled fraction. Output bytes depend only on the
//! records, never on their order or on the clock.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::error::{Error, Result};
use crate::record::{MetricRow, RunRecord};
use crate::stats::mean_ci;

/// Mean and optional CI half-width (absent for a single run).
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: Option<f64>,
}

impl Estimate {
    fn of(values: &[f64], confidence: f64) -> Result<Self> {
        if values.len() == 1 {
            return Ok(Self {
                mean: values[0],
                half_width: None,
            });
        }
        let (mean, h) = mean_ci(values, confidence)?;
        Ok(Self {
            mean,
            half_width: Some(h),
        })
    }

    fn cell(&self) -> String {
        match self.half_width {
            Some(h) => format!("{:.2} ± {:.2}", self.mean, h),
            None => format!("{:.2}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub labeled_fraction: f64,
    pub method: String,
    pub runs: usize,
    pub dc: Estimate,
    pub ji: Estimate,
}

fn sorted_rows(records: &[RunRecord]) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = records.iter().flat_map(RunRecord::metric_rows).collect();
    rows.sort_by(|a, b| {
        (&a.dataset, &a.method)
            .cmp(&(&b.dataset, &b.method))
            .then(a.labeled_fraction.total_cmp(&b.labeled_fraction))
            .then(a.seed.cmp(&b.seed))
    });
    rows
}

/// One row per (dataset, fraction, method), ordered by dataset, fraction, method.
pub fn summarize(records: &[RunRecord], confidence: f64) -> Result<Vec<SummaryRow>> {
    let rows = sorted_rows(records);
    if rows.is_empty() {
        return Err(Error::Config("no completed runs to report".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let key = |r: &MetricRow| (r.dataset.clone(), r.method.clone(), r.labeled_fraction.to_bits());
        let k = key(&rows[start]);
        let end = start + rows[start..].iter().take_while(|r| key(r) == k).count();
        let group = &rows[start..end];
        let dc: Vec<f64> = group.iter().map(|r| r.dc).collect();
        let ji: Vec<f64> = group.iter().map(|r| r.ji).collect();
        out.push(SummaryRow {
            dataset: k.0,
            labeled_fraction: group[0].labeled_fraction,
            method: k.1,
            runs: group.len(),
            dc: Estimate::of(&dc, confidence)?,
            ji: Estimate::of(&ji, confidence)?,
        });
        start = end;
    }
    out.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(a.labeled_fraction.total_cmp(&b.labeled_fraction))
            .then(a.method.cmp(&b.method))
    });
    Ok(out)
}

pub fn metrics_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in sorted_rows(records) {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn table_markdown(records: &[RunRecord], confidence: f64) -> Result<String> {
    let summary = summarize(records, confidence)?;
    let pct = confidence * 100.0;
    let mut s = String::new();
    writeln!(s, "| dataset | labeled | method | runs | DC (mean ± {pct:.0}% CI) | JI (mean ± {pct:.0}% CI) |").unwrap();
    writeln!(s, "|---|---|---|---|---|---|").unwrap();
    for r in &summary {
        writeln!(
            s,
            "| {} | {}% | {} | {} | {} | {} |",
            r.dataset,
            r.labeled_fraction * 100.0,
            r.method,
            r.runs,
            r.dc.cell(),
            r.ji.cell()
        )
        .unwrap();
    }
    let mut failed: Vec<&RunRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    failed.sort_by_key(|r| r.file_name());
    if !failed.is_empty() {
        writeln!(s, "\nFailed runs:\n").unwrap();
        for r in failed {
            writeln!(s, "- {}: {}", r.file_name(), r.error.as_deref().unwrap_or_default()).unwrap();
        }
    }
    Ok(s)
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// Line plot of one metric against the labeled fraction. Fractions are
/// placed at evenly spaced x positions in increasing order; one colour per
/// method in alphabetical order (legend swatches top-left, same order);
/// vertical bars show the CI; horizontal grid lines every 10 points.
pub fn plot_metric(rows: &[SummaryRow], ji: bool) -> RgbImage {
    let (w, h) = (640u32, 400u32);
    let (left, right, top, bottom) = (50.0f32, 20.0f32, 40.0f32, 30.0f32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    fn pick(r: &SummaryRow, ji: bool) -> &Estimate {
        if ji {
            &r.ji
        } else {
            &r.dc
        }
    }
    let metric = |r: &SummaryRow| pick(r, ji).clone();
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.labeled_fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort();
    methods.dedup();

    let lo = rows
        .iter()
        .map(|r| metric(r).mean - metric(r).half_width.unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|r| metric(r).mean + metric(r).half_width.unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let y_min = ((lo / 10.0).floor() * 10.0).clamp(0.0, 90.0);
    let y_max = ((hi / 10.0).ceil() * 10.0).clamp(y_min + 10.0, 100.0);
    let plot_w = w as f32 - left - right;
    let plot_h = h as f32 - top - bottom;
    let x_of = |f: f64| {
        let i = fractions.iter().position(|&x| x == f).expect("known fraction");
        left + plot_w * (i as f32 + 0.5) / fractions.len() as f32
    };
    let y_of = |v: f64| top + plot_h * (1.0 - ((v - y_min) / (y_max - y_min)) as f32);

    let grid = Rgb([225, 225, 225]);
    let axis = Rgb([0, 0, 0]);
    let mut g = y_min;
    while g <= y_max + 1e-9 {
        draw_line_segment_mut(&mut img, (left, y_of(g)), (left + plot_w, y_of(g)), grid);
        g += 10.0;
    }
    draw_line_segment_mut(&mut img, (left, top), (left, top + plot_h), axis);
    draw_line_segment_mut(&mut img, (left, top + plot_h), (left + plot_w, top + plot_h), axis);
    for &f in &fractions {
        let x = x_of(f);
        draw_line_segment_mut(&mut img, (x, top + plot_h), (x, top + plot_h + 5.0), axis);
    }

    for (m, method) in methods.iter().enumerate() {
        let color = Rgb(PALETTE[m % PALETTE.len()]);
        draw_filled_rect_mut(&mut img, Rect::at(8 + 16 * m as i32, 8).of_size(12, 12), color);
        let mut pts: Vec<(f32, f32, &Estimate)> = rows
            .iter()
            .filter(|r| r.method == *method)
            .map(|r| (x_of(r.labeled_fraction), y_of(metric(r).mean), pick(r, ji)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in pts.windows(2) {
            draw_line_segment_mut(&mut img, (pair[0].0, pair[0].1), (pair[1].0, pair[1].1), color);
        }
        for &(x, y, e) in &pts {
            if let Some(hw) = e.half_width {
                let (y0, y1) = (y_of(e.mean - hw), y_of(e.mean + hw));
                draw_line_segment_mut(&mut img, (x, y0), (x, y1), color);
                draw_line_segment_mut(&mut img, (x - 4.0, y0), (x + 4.0, y0), color);
                draw_line_segment_mut(&mut img, (x - 4.0, y1), (x + 4.0, y1), color);
            }
            draw_hollow_rect_mut(&mut img, Rect::at(x as i32 - 3, y as i32 - 3).of_size(7, 7), color);
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `metrics.csv`, `table.md` and `plots/<dataset>-{dc,ji}.png` under `dir`.
pub fn write_report(records: &[RunRecord], dir: &Path, confidence: f64) -> Result<ReportFiles> {
    let summary = summarize(records, confidence)?;
    fs::create_dir_all(dir.join("plots")).map_err(Error::io(dir))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(records)?).map_err(Error::io(&metrics))?;
    let table = dir.join("table.md");
    fs::write(&table, table_markdown(records, confidence)?).map_err(Error::io(&table))?;
    let mut datasets: Vec<&str> = summary.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    let mut plots = Vec::new();
    for ds in datasets {
        let rows: Vec<SummaryRow> = summary.iter().filter(|r| r.dataset == ds).cloned().collect();
        for (ji, name) in [(false, "dc"), (true, "ji")] {
            let path = dir.join("plots").join(format!("{ds}-{name}.png"));
            plot_metric(&rows, ji).save(&path).map_err(Error::image(&path))?;
            plots.push(path);
        }
    }
    Ok(ReportFiles { metrics, table, plots })
}
