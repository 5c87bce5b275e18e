//! Eigenpair-truncation sweep on a planted teacher task: validation error
//! and per-epoch wall time as functions of the kept basis size, for both
//! truncation policies, next to the explained-variance curve of the full
//! spectrum.

use std::path::Path;

use citrus_core::analysis::{node_split_masks, planted_stack, standard_normal_tensor, sub_seed};
use citrus_core::graph::erdos_renyi;
use citrus_core::layer::{
    xavier_uniform, Activation, BlockStack, CitrusBlock, FieldMode, ReceptiveField,
};
use citrus_core::spectral::{eigh, truncate, SpectralBasis, TruncationPolicy};
use citrus_core::train::{train_stack, LossKind, TrainConfig};
use citrus_core::{CitrusError, Result, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::{Config, Schema};
use crate::report::{fmt_f64, json_num, write_report, Csv};

pub fn schema() -> Schema {
    Schema::new(
        "truncation",
        &[
            ("n1", Some("24")),
            ("n2", Some("24")),
            ("edge_prob1", Some("0.3")),
            ("edge_prob2", Some("0.3")),
            ("time1", Some("1.5")),
            ("time2", Some("0.8")),
            ("input_channels", Some("6")),
            ("teacher_widths", Some("6,4")),
            ("student_hidden", Some("6")),
            ("k_grid", Some("4,8,12,16,20,24")),
            ("seeds", Some("0,1,2,3,4")),
            ("test_fraction", Some("0.15")),
            ("val_fraction", Some("0.15")),
            ("loss", Some("mae")),
            ("learning_rate", Some("0.01")),
            ("max_epochs", Some("30")),
            ("patience", Some("30")),
        ],
    )
}

/// One (policy, K) cell of the sweep.
pub struct KCell {
    pub policy: TruncationPolicy,
    pub k: usize,
    pub per_seed_val: Vec<f64>,
    pub median_val: f64,
    /// Per seed: mean wall-clock seconds per training epoch.
    pub per_seed_epoch_seconds: Vec<f64>,
    pub median_epoch_seconds: f64,
}

pub struct TruncationOutcome {
    pub cells: Vec<KCell>,
    /// Validation error of the untruncated-basis run, per seed.
    pub full_val: Vec<f64>,
    /// Per policy: whether the K = N cell reproduced the full run bit for
    /// bit in every seed. `None` when the grid has no K = N cell.
    pub full_exact: Vec<(TruncationPolicy, Option<bool>)>,
    /// Per factor: (eigenvalue, explained ratio, cumulative ratio) sorted by
    /// explained ratio, descending.
    pub explained: Vec<Vec<(f64, f64, f64)>>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v[v.len() / 2]
}

struct PlantedTask {
    bases: Vec<SpectralBasis<f64>>,
    x0: Tensor64,
    target: Tensor64,
    train_mask: Tensor64,
    val_mask: Tensor64,
    input_channels: usize,
    out_channels: usize,
    student_hidden: usize,
    student_seed: u64,
}

impl PlantedTask {
    /// Student with the given bases; weights depend only on the seed, so
    /// every (policy, K) cell starts from identical parameters.
    fn student(&self, bases: Vec<SpectralBasis<f64>>) -> Result<BlockStack<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.student_seed);
        let mut blocks = Vec::new();
        let mut width = self.input_channels;
        for _ in 0..2 {
            blocks.push(CitrusBlock {
                receptive: ReceptiveField::new(FieldMode::PerFactor, bases.len(), 1)?,
                mix_weights: xavier_uniform(width, self.student_hidden, &mut rng),
                mlp_weights: Vec::new(),
                activation: Activation::Relu,
                residual: false,
            });
            width = self.student_hidden;
        }
        let readout = xavier_uniform(width, self.out_channels, &mut rng);
        Ok(BlockStack { blocks, readout: Some(readout), bases })
    }
}

fn build_task(cfg: &Config, seed: u64) -> Result<PlantedTask> {
    let n1 = cfg.usize("n1")?;
    let n2 = cfg.usize("n2")?;
    let input_channels = cfg.usize("input_channels")?;
    let teacher_widths = cfg.usize_list("teacher_widths")?;
    let g1 = erdos_renyi::<f64>(n1, cfg.f64("edge_prob1")?, sub_seed(seed, 1000), true)?;
    let g2 = erdos_renyi::<f64>(n2, cfg.f64("edge_prob2")?, sub_seed(seed, 2000), true)?;
    let bases = vec![eigh(g1.normalized_laplacian())?, eigh(g2.normalized_laplacian())?];

    let mut teacher_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
    let teacher = planted_stack(
        bases.clone(),
        input_channels,
        &teacher_widths,
        &[cfg.f64("time1")?, cfg.f64("time2")?],
        &mut teacher_rng,
    )?;
    let x0 = standard_normal_tensor(&[n1, n2, input_channels], sub_seed(seed, 4));
    let target = teacher.forward(&x0)?;
    let out_channels = *teacher_widths.last().expect("validated non-empty");

    let mut split_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 5));
    let (train_mask, val_mask, _test) = node_split_masks(
        &[n1, n2],
        out_channels,
        cfg.f64("test_fraction")?,
        cfg.f64("val_fraction")?,
        &mut split_rng,
    )?;
    Ok(PlantedTask {
        bases,
        x0,
        target,
        train_mask,
        val_mask,
        input_channels,
        out_channels,
        student_hidden: cfg.usize("student_hidden")?,
        student_seed: sub_seed(seed, 6),
    })
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    Ok(TrainConfig {
        loss: cfg.get("loss")?.parse::<LossKind>()?,
        learning_rate: cfg.f64("learning_rate")?,
        max_epochs: cfg.usize("max_epochs")?,
        patience: cfg.usize("patience")?,
        ..TrainConfig::default()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate(cfg: &Config) -> Result<TruncationOutcome> {
    let n1 = cfg.usize("n1")?;
    let n2 = cfg.usize("n2")?;
    let k_grid = cfg.usize_list("k_grid")?;
    let seeds = cfg.u64_list("seeds")?;
    let tc = train_config(cfg)?;
    if seeds.is_empty() || k_grid.is_empty() {
        return Err(CitrusError::InvalidArgument("k_grid and seeds must be nonempty".into()));
    }
    let n_min = n1.min(n2);
    for &k in &k_grid {
        if k == 0 || k > n_min {
            return Err(CitrusError::InvalidArgument(format!(
                "k={k} outside the factor sizes (min {n_min})"
            )));
        }
    }

    let tasks: Vec<PlantedTask> =
        seeds.iter().map(|&s| build_task(cfg, s)).collect::<Result<Vec<_>>>()?;

    let mut full_val = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut student = task.student(task.bases.clone())?;
        let history = train_stack(
            &mut student,
            &task.x0,
            &task.target,
            &task.train_mask,
            &task.val_mask,
            &tc,
        )?;
        full_val.push(history.best_val);
    }

    let mut cells = Vec::new();
    let mut full_exact = Vec::new();
    for policy in [TruncationPolicy::Smallest, TruncationPolicy::Largest] {
        let mut exact_at_full: Option<bool> = None;
        for &k in &k_grid {
            let mut per_seed_val = Vec::with_capacity(tasks.len());
            let mut per_seed_epoch = Vec::with_capacity(tasks.len());
            for task in &tasks {
                let bases_k = task
                    .bases
                    .iter()
                    .map(|b| truncate(b, k, policy))
                    .collect::<Result<Vec<_>>>()?;
                let mut student = task.student(bases_k)?;
                let history = train_stack(
                    &mut student,
                    &task.x0,
                    &task.target,
                    &task.train_mask,
                    &task.val_mask,
                    &tc,
                )?;
                per_seed_val.push(history.best_val);
                per_seed_epoch.push(mean(&history.epoch_seconds));
            }
            if k == n_min && n1 == n2 {
                let bitwise = per_seed_val
                    .iter()
                    .zip(&full_val)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                exact_at_full = Some(bitwise);
            }
            cells.push(KCell {
                policy,
                k,
                median_val: median(&per_seed_val),
                per_seed_val,
                median_epoch_seconds: median(&per_seed_epoch),
                per_seed_epoch_seconds: per_seed_epoch,
            });
        }
        full_exact.push((policy, exact_at_full));
    }

    // Explained-variance curve of the first seed's full spectra.
    let mut explained = Vec::new();
    for basis in &tasks[0].bases {
        let total: f64 = basis.eigenvalues.iter().map(|&l| l * l).sum();
        let mut pairs: Vec<(f64, f64)> =
            basis.eigenvalues.iter().map(|&l| (l, l * l / total)).collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite ratios"));
        let mut cum = 0.0;
        explained.push(
            pairs
                .into_iter()
                .map(|(l, r)| {
                    cum += r;
                    (l, r, cum)
                })
                .collect(),
        );
    }

    Ok(TruncationOutcome { cells, full_val, full_exact, explained })
}

pub fn run(cfg: &Config, out_dir: &Path) -> Result<Vec<String>> {
    let seeds = cfg.u64_list("seeds")?;
    let outcome = evaluate(cfg)?;

    let mut per_run = Csv::new(&["policy", "k", "seed", "val_error"]);
    let mut medians = Csv::new(&["policy", "k", "median_val_error"]);
    // The one file allowed to differ between reruns: wall-clock readings.
    let mut timing = Csv::new(&["policy", "k", "median_epoch_seconds"]);
    for cell in &outcome.cells {
        for (s, &v) in seeds.iter().zip(&cell.per_seed_val) {
            per_run.row(&[
                cell.policy.to_string(),
                cell.k.to_string(),
                s.to_string(),
                fmt_f64(v),
            ]);
        }
        medians.row(&[cell.policy.to_string(), cell.k.to_string(), fmt_f64(cell.median_val)]);
        timing.row(&[
            cell.policy.to_string(),
            cell.k.to_string(),
            fmt_f64(cell.median_epoch_seconds),
        ]);
    }
    for (s, &v) in seeds.iter().zip(&outcome.full_val) {
        per_run.row(&["full".to_string(), "full".to_string(), s.to_string(), fmt_f64(v)]);
    }
    medians.row(&["full".to_string(), "full".to_string(), fmt_f64(median(&outcome.full_val))]);
    per_run.write(out_dir, "truncation.csv")?;
    medians.write(out_dir, "truncation_median.csv")?;
    timing.write(out_dir, "timing.csv")?;

    let mut ev = Csv::new(&["factor", "index", "eigenvalue", "explained", "cumulative"]);
    for (p, rows) in outcome.explained.iter().enumerate() {
        for (i, &(l, r, c)) in rows.iter().enumerate() {
            ev.row(&[
                (p + 1).to_string(),
                i.to_string(),
                fmt_f64(l),
                fmt_f64(r),
                fmt_f64(c),
            ]);
        }
    }
    ev.write(out_dir, "explained_variance.csv")?;

    let mut results = serde_json::Map::new();
    results.insert(
        "median_full_val_error".into(),
        json_num(median(&outcome.full_val)),
    );
    for (policy, exact) in &outcome.full_exact {
        let key = format!("k_equals_full_exact_{policy}");
        results.insert(
            key,
            match exact {
                Some(b) => Value::from(*b),
                None => Value::Null,
            },
        );
    }
    let cells_json: Vec<Value> = outcome
        .cells
        .iter()
        .map(|c| {
            let mut m = serde_json::Map::new();
            m.insert("policy".into(), Value::from(c.policy.to_string()));
            m.insert("k".into(), Value::from(c.k));
            m.insert("median_val_error".into(), json_num(c.median_val));
            Value::Object(m)
        })
        .collect();
    results.insert("cells".into(), Value::from(cells_json));

    // Reported, not asserted here; the test suite judges monotonicity and
    // the exact-equality flag from these outputs.
    let failures = Vec::new();
    write_report(out_dir, "truncation", cfg, Value::Object(results), &failures)?;
    Ok(failures)
}
