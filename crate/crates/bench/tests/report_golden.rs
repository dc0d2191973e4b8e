mod common;

use std::fs;

use cnn_bench::report::{parse_json, CSV_HEADER};
use cnn_bench::{emit_report, OutputFormat};
use common::{fake_reports, golden_dir};

/// Compares against the checked-in file, or rewrites it when
/// `UPDATE_GOLDEN` is set.
fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap();
    assert_eq!(actual, expected, "{name} drifted from its golden file");
}

#[test]
fn csv_matches_golden() {
    check_golden(
        "report.csv",
        &emit_report(&fake_reports(), OutputFormat::Csv).unwrap(),
    );
}

#[test]
fn json_matches_golden() {
    check_golden(
        "report.json",
        &emit_report(&fake_reports(), OutputFormat::Json).unwrap(),
    );
}

#[test]
fn golden_json_parses_back() {
    let text = fs::read_to_string(golden_dir().join("report.json")).unwrap();
    assert_eq!(parse_json(&text).unwrap(), fake_reports());
}

#[test]
fn csv_is_machine_parsable() {
    let csv = emit_report(&fake_reports(), OutputFormat::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let cols = CSV_HEADER.split(',').count();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 14);
    for r in &rows {
        assert_eq!(r.len(), cols);
        for field in &r[5..] {
            field.parse::<f64>().unwrap();
        }
        let percent = r[6];
        assert_eq!(percent.split('.').nth(1).map(str::len), Some(2));
    }
    // per-kind percentages of each report add up to 100
    for chunk in rows.chunks(7) {
        let sum: f64 = chunk[..6]
            .iter()
            .map(|r| r[6].parse::<f64>().unwrap())
            .sum();
        assert!((sum - 100.0).abs() <= 0.1, "{sum}");
        assert_eq!(chunk[6][4], "Total");
    }
}

#[test]
fn fake_reports_satisfy_invariants() {
    for r in fake_reports() {
        r.check_invariants().unwrap();
    }
    let multi = &fake_reports()[1];
    assert!(!multi.pinned);
    assert_eq!(multi.max_latency, 0.625);
}
