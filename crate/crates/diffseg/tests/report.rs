use diffseg::record::{load_records, Method, RunRecord};
use diffseg::report::{metrics_csv, summarize, table_markdown, write_report};
use diffseg::stats::mean_ci;
use diffseg::ExperimentConfig;
use diffseg_core::evaluator::EvalResult;

fn eval(dc: f64) -> EvalResult {
    // JI from the DC/JI identity so both columns are consistent
    let ji = 100.0 * dc / (200.0 - dc);
    EvalResult { dice: dc, jaccard: ji, per_sample_dice: vec![dc], per_sample_jaccard: vec![ji] }
}

fn record(method: Method, fraction: f64, seed: u64, student: f64, teacher: Option<f64>) -> RunRecord {
    RunRecord {
        config_hash: "h".into(),
        method,
        dataset: "shapes".into(),
        seed,
        fraction,
        labeled: 1,
        unlabeled: 9,
        pretrain: None,
        train: None,
        student: Some(eval(student)),
        teacher: teacher.map(eval),
        wall_clock_seconds: seed as f64,
        checkpoints: Vec::new(),
        error: None,
        config: ExperimentConfig::default(),
    }
}

fn sample_records() -> Vec<RunRecord> {
    vec![
        record(Method::Cotrain, 0.1, 0, 82.1, Some(80.0)),
        record(Method::Cotrain, 0.1, 1, 83.0, Some(81.0)),
        record(Method::Cotrain, 0.1, 2, 84.2, Some(82.0)),
        record(Method::Supervised, 0.1, 0, 70.0, None),
        record(Method::Supervised, 0.1, 1, 72.0, None),
        record(Method::Supervised, 0.05, 0, 60.0, None),
    ]
}

#[test]
fn two_value_interval_matches_t_table() {
    let (m, h) = mean_ci(&[0.0, 10.0], 0.9).unwrap();
    let s = 50.0f64.sqrt();
    assert_eq!(m, 5.0);
    approx::assert_relative_eq!(h, 6.313751514675043 * s / 2.0f64.sqrt(), max_relative = 1e-9);
}

#[test]
fn interval_shrinks_with_more_confidence_removed() {
    let v = [1.0, 2.0, 4.0, 8.0];
    let (_, h90) = mean_ci(&v, 0.9).unwrap();
    let (_, h95) = mean_ci(&v, 0.95).unwrap();
    assert!(h90 < h95);
    assert!(mean_ci(&v, 1.0).is_err());
}

#[test]
fn table_cell_reports_the_mean() {
    let summary = summarize(&sample_records(), 0.9).unwrap();
    let student = summary.iter().find(|r| r.method == "student").unwrap();
    approx::assert_relative_eq!(student.dc.mean, 83.1, max_relative = 1e-12);
    assert_eq!(student.runs, 3);
    let table = table_markdown(&sample_records(), 0.9).unwrap();
    assert!(table.contains("| shapes | 10% | student | 3 | 83.10 ± "), "{table}");
    // single runs have no interval
    assert!(table.contains("| shapes | 5% | supervised | 1 | 60.00 |"), "{table}");
}

#[test]
fn metrics_csv_has_the_fixed_columns_in_sorted_order() {
    let csv = metrics_csv(&sample_records()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "dataset,method,labeled_fraction,seed,DC,JI");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].starts_with("shapes,student,0.1,0,82.1,"));
    assert!(rows[3].starts_with("shapes,supervised,0.05,0,60"));
    assert!(rows[6].starts_with("shapes,teacher,0.1,0,80"));
}

#[test]
fn report_is_independent_of_record_order_and_stable_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut reversed = sample_records();
    reversed.reverse();
    let fa = write_report(&sample_records(), a.path(), 0.9).unwrap();
    let fb = write_report(&reversed, b.path(), 0.9).unwrap();
    for (x, y) in [(&fa.metrics, &fb.metrics), (&fa.table, &fb.table)].into_iter().chain(fa.plots.iter().zip(&fb.plots)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let names: Vec<String> = fa.plots.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["shapes-dc.png", "shapes-ji.png"]);
    let img = image::open(&fa.plots[0]).unwrap();
    assert_eq!((img.width(), img.height()), (640, 400));
}

#[test]
fn records_round_trip_and_failures_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let mut failed = record(Method::Cotrain, 0.2, 5, 0.0, None);
    failed.student = None;
    failed.error = Some("pretraining failed: diverged".into());
    for r in sample_records().iter().chain([&failed]) {
        r.save(dir.path()).unwrap();
    }
    let loaded = load_records(dir.path()).unwrap();
    assert_eq!(loaded.len(), 7);
    assert!(loaded.contains(&failed));
    let table = table_markdown(&loaded, 0.9).unwrap();
    assert!(table.contains("Failed runs"));
    assert!(table.contains("cotrain-shapes-f0.2000-s5.json: pretraining failed: diverged"));
    assert!(summarize(&[failed], 0.9).is_err());
}
