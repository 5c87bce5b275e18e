//! Perturbation-stability sweep over an SNR grid, one trained student per
//! grid cell per realization.

use std::path::Path;

use citrus_core::analysis::{StabilityConfig, StabilityReport};
use citrus_core::train::{LossKind, TrainConfig};
use citrus_core::Result;
use serde_json::Value;

use crate::config::{Config, Schema};
use crate::report::{fmt_f64, json_num, write_report, Csv};

pub fn schema() -> Schema {
    Schema::new(
        "stability",
        &[
            ("n1", Some("20")),
            ("n2", Some("30")),
            ("edge_prob1", Some("0.1")),
            ("edge_prob2", Some("0.1")),
            ("time1", Some("2")),
            ("time2", Some("3")),
            ("input_channels", Some("6")),
            ("teacher_widths", Some("5,4,2")),
            ("student_hidden", Some("4")),
            ("snr_grid_db", Some("inf,20,10,0,-10")),
            ("realizations", Some("10")),
            ("test_fraction", Some("0.15")),
            ("val_fraction", Some("0.15")),
            ("seed", Some("0")),
            ("loss", Some("mse")),
            ("learning_rate", Some("0.01")),
            ("max_epochs", Some("200")),
            ("patience", Some("30")),
        ],
    )
}

pub fn to_stability_config(cfg: &Config) -> Result<StabilityConfig> {
    Ok(StabilityConfig {
        n1: cfg.usize("n1")?,
        n2: cfg.usize("n2")?,
        edge_prob1: cfg.f64("edge_prob1")?,
        edge_prob2: cfg.f64("edge_prob2")?,
        time1: cfg.f64("time1")?,
        time2: cfg.f64("time2")?,
        input_channels: cfg.usize("input_channels")?,
        teacher_widths: cfg.usize_list("teacher_widths")?,
        student_hidden: cfg.usize("student_hidden")?,
        snr_grid_db: cfg.f64_or_inf_list("snr_grid_db")?,
        realizations: cfg.usize("realizations")?,
        test_fraction: cfg.f64("test_fraction")?,
        val_fraction: cfg.f64("val_fraction")?,
        seed: cfg.u64("seed")?,
        train: TrainConfig {
            loss: cfg.get("loss")?.parse::<LossKind>()?,
            learning_rate: cfg.f64("learning_rate")?,
            max_epochs: cfg.usize("max_epochs")?,
            patience: cfg.usize("patience")?,
            ..TrainConfig::default()
        },
    })
}

/// Adjacent-pair trend violations along rows and columns of the mean MSE
/// grid: degrading either factor's SNR (moving to a later grid index)
/// should not reduce the error. Returns the worst count over rows and over
/// columns.
pub fn trend_violations(mean_mse: &[Vec<f64>]) -> (usize, usize) {
    let rows = mean_mse.len();
    let cols = if rows == 0 { 0 } else { mean_mse[0].len() };
    let mut worst_row = 0;
    for row in mean_mse {
        let v = row.windows(2).filter(|w| w[1] < w[0]).count();
        worst_row = worst_row.max(v);
    }
    let mut worst_col = 0;
    for c in 0..cols {
        let mut v = 0;
        for r in 1..rows {
            if mean_mse[r][c] < mean_mse[r - 1][c] {
                v += 1;
            }
        }
        worst_col = worst_col.max(v);
    }
    (worst_row, worst_col)
}

pub fn run(cfg: &Config, out_dir: &Path) -> Result<Vec<String>> {
    let sc = to_stability_config(cfg)?;
    let report: StabilityReport = citrus_core::analysis::stability_run::<f64>(&sc)?;

    let mut csv = Csv::new(&[
        "snr1_db",
        "snr2_db",
        "mean_test_mse",
        "std_test_mse",
        "mean_epsilon1",
        "mean_epsilon2",
        "mean_teacher_deviation",
    ]);
    for (i, &s1) in report.snr_grid_db.iter().enumerate() {
        for (j, &s2) in report.snr_grid_db.iter().enumerate() {
            csv.row(&[
                fmt_f64(s1),
                fmt_f64(s2),
                fmt_f64(report.mean_test_mse[i][j]),
                fmt_f64(report.std_test_mse[i][j]),
                fmt_f64(report.mean_epsilon1[i][j]),
                fmt_f64(report.mean_epsilon2[i][j]),
                fmt_f64(report.mean_teacher_deviation[i][j]),
            ]);
        }
    }
    csv.write(out_dir, "stability.csv")?;

    let (worst_row, worst_col) = trend_violations(&report.mean_test_mse);
    let mut results = serde_json::Map::new();
    results.insert(
        "snr_grid_db".into(),
        Value::from(report.snr_grid_db.iter().map(|&s| json_num(s)).collect::<Vec<_>>()),
    );
    results.insert("realizations".into(), Value::from(report.realizations));
    let grid: Vec<Value> = report
        .mean_test_mse
        .iter()
        .map(|row| Value::from(row.iter().map(|&v| json_num(v)).collect::<Vec<_>>()))
        .collect();
    results.insert("mean_test_mse".into(), Value::from(grid));
    results.insert("worst_row_trend_violations".into(), Value::from(worst_row));
    results.insert("worst_col_trend_violations".into(), Value::from(worst_col));

    // The sweep itself carries no assertions; trend conformance is judged
    // by the test suite against the summary written here.
    let failures = Vec::new();
    write_report(out_dir, "stability", cfg, Value::Object(results), &failures)?;
    Ok(failures)
}
