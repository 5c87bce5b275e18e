//! Depth-energy study: run the two preset random scenarios, write observed
//! energies next to the worst-case envelope, and sweep the shared diffusion
//! time across its critical value.

use std::path::Path;

use citrus_core::analysis::{EnergyReport, OversmoothingConfig};
use citrus_core::{CitrusError, Result};
use serde_json::Value;

use crate::config::{Config, Schema};
use crate::report::{fmt_f64, json_num, write_report, Csv};

/// Slack for comparisons between measured quantities that are equal in
/// exact arithmetic but pass through logs and eigensolves.
const SLACK: f64 = 1e-9;

pub fn schema() -> Schema {
    Schema::new(
        "oversmoothing",
        &[
            ("n1", Some("10")),
            ("n2", Some("15")),
            ("layers", Some("10")),
            ("input_channels", Some("12")),
            ("time", Some("1")),
            ("seed", Some("0")),
            ("decay_edge_prob1", Some("0.05")),
            ("decay_edge_prob2", Some("0.95")),
            ("decay_weight_scale", Some("0.01")),
            ("loose_edge_prob1", Some("0.1")),
            ("loose_edge_prob2", Some("0.1")),
            ("loose_weight_scale", Some("0.4")),
            ("t_sweep", Some("0.1,1,5,10,20")),
        ],
    )
}

fn scenario_config(cfg: &Config, prefix: &str, time: f64) -> Result<OversmoothingConfig> {
    Ok(OversmoothingConfig {
        n1: cfg.usize("n1")?,
        n2: cfg.usize("n2")?,
        edge_prob1: cfg.f64(&format!("{prefix}_edge_prob1"))?,
        edge_prob2: cfg.f64(&format!("{prefix}_edge_prob2"))?,
        layers: cfg.usize("layers")?,
        input_channels: cfg.usize("input_channels")?,
        weight_scale: cfg.f64(&format!("{prefix}_weight_scale"))?,
        time,
        seed: cfg.u64("seed")?,
    })
}

fn scenario_csv(report: &EnergyReport<f64>) -> Csv {
    let mut csv = Csv::new(&["layer", "energy", "log_ratio", "layer_bound", "sup_bound"]);
    for l in 0..report.energies.len() {
        csv.row(&[
            l.to_string(),
            fmt_f64(report.energies[l]),
            fmt_f64(report.log_ratios[l]),
            fmt_f64(report.bound.per_layer_line[l]),
            fmt_f64(report.bound.sup_line[l]),
        ]);
    }
    csv
}

fn scenario_json(report: &EnergyReport<f64>) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("sup_gain".into(), json_num(report.bound.sup_gain));
    m.insert("lambda_tilde".into(), json_num(report.bound.lambda_tilde));
    m.insert("min_time_gap".into(), json_num(report.bound.min_time_gap));
    m.insert("critical_time".into(), json_num(report.bound.critical_time));
    m.insert("decays".into(), Value::from(report.bound.decays));
    m.insert(
        "final_log_ratio".into(),
        json_num(*report.log_ratios.last().expect("at least the input layer")),
    );
    m.insert(
        "final_sup_bound".into(),
        json_num(*report.bound.sup_line.last().expect("at least the input layer")),
    );
    Value::Object(m)
}

pub struct Outcome {
    pub decay: EnergyReport<f64>,
    pub loose: EnergyReport<f64>,
    /// Per sweep time: the scenario report at that time over the same
    /// graphs and weights.
    pub sweep: Vec<(f64, EnergyReport<f64>)>,
}

pub fn evaluate(cfg: &Config) -> Result<Outcome> {
    let time = cfg.f64("time")?;
    let decay = citrus_core::analysis::oversmoothing_scenario(&scenario_config(cfg, "decay", time)?)?;
    let loose = citrus_core::analysis::oversmoothing_scenario(&scenario_config(cfg, "loose", time)?)?;
    let mut sweep = Vec::new();
    for t in cfg.f64_list("t_sweep")? {
        if t <= 0.0 {
            return Err(CitrusError::InvalidArgument(format!(
                "sweep time {t} must be positive"
            )));
        }
        // Same seed, so graphs and weights are identical across the sweep;
        // only the diffusion time moves.
        let report =
            citrus_core::analysis::oversmoothing_scenario(&scenario_config(cfg, "loose", t)?)?;
        sweep.push((t, report));
    }
    Ok(Outcome { decay, loose, sweep })
}

/// Assertions shipped with the command: the decay scenario must sit below
/// its envelope and lose energy monotonically, and the time sweep must
/// change regime exactly at the critical time while decaying faster for
/// larger times.
pub fn check(outcome: &Outcome) -> Vec<String> {
    let mut failures = Vec::new();
    let d = &outcome.decay;
    if !d.bound.decays {
        failures.push("decay scenario: envelope slope is not negative".into());
    }
    for l in 0..d.log_ratios.len() {
        if d.log_ratios[l] > d.bound.sup_line[l] + SLACK {
            failures.push(format!(
                "decay scenario: layer {l} log-ratio {} above the envelope {}",
                fmt_f64(d.log_ratios[l]),
                fmt_f64(d.bound.sup_line[l])
            ));
        }
    }
    for l in 1..d.energies.len() {
        if d.energies[l] > d.energies[l - 1] * (1.0 + SLACK) {
            failures.push(format!(
                "decay scenario: energy rose from layer {} to {}",
                l - 1,
                l
            ));
        }
    }
    let mut prev_final = f64::INFINITY;
    for (t, report) in &outcome.sweep {
        let above = *t > report.bound.critical_time;
        if report.bound.decays != above {
            failures.push(format!(
                "sweep t={}: envelope decays={} but critical time is {}",
                fmt_f64(*t),
                report.bound.decays,
                fmt_f64(report.bound.critical_time)
            ));
        }
        let fin = *report.log_ratios.last().expect("nonempty");
        if fin > prev_final + SLACK {
            failures.push(format!(
                "sweep t={}: final log-ratio {} above the smaller-time value {}",
                fmt_f64(*t),
                fmt_f64(fin),
                fmt_f64(prev_final)
            ));
        }
        prev_final = fin;
    }
    failures
}

pub fn run(cfg: &Config, out_dir: &Path) -> Result<Vec<String>> {
    let outcome = evaluate(cfg)?;
    scenario_csv(&outcome.decay).write(out_dir, "oversmoothing_decay.csv")?;
    scenario_csv(&outcome.loose).write(out_dir, "oversmoothing_loose.csv")?;

    let mut sweep_csv =
        Csv::new(&["time", "critical_time", "sup_slope", "decays", "final_log_ratio"]);
    for (t, report) in &outcome.sweep {
        let slope = report.bound.sup_line[1];
        sweep_csv.row(&[
            fmt_f64(*t),
            fmt_f64(report.bound.critical_time),
            fmt_f64(slope),
            report.bound.decays.to_string(),
            fmt_f64(*report.log_ratios.last().expect("nonempty")),
        ]);
    }
    sweep_csv.write(out_dir, "t_sweep.csv")?;

    let failures = check(&outcome);
    let mut results = serde_json::Map::new();
    results.insert("decay".into(), scenario_json(&outcome.decay));
    results.insert("loose".into(), scenario_json(&outcome.loose));
    let sweep_json: Vec<Value> = outcome
        .sweep
        .iter()
        .map(|(t, r)| {
            let mut m = serde_json::Map::new();
            m.insert("time".into(), json_num(*t));
            m.insert("report".into(), scenario_json(r));
            Value::Object(m)
        })
        .collect();
    results.insert("sweep".into(), Value::from(sweep_json));
    write_report(out_dir, "oversmoothing", cfg, Value::Object(results), &failures)?;
    Ok(failures)
}
