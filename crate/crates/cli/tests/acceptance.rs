//! End-to-end acceptance suite: numerical identities, proved-inequality
//! assertions, trend reproduction, and binary determinism.
//!
//! Each test prints one `[PASS]`/`[FAIL]` line (run with `--nocapture` to
//! see them) and the tests share a lock so that runtime budgets are
//! measured one suite at a time.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use citrus_cli::commands::{kernel_check, stability, truncation};
use citrus_cli::config::{Config, RawConfig, Schema};
use citrus_core::analysis::{
    node_split_masks, oversmoothing_scenario, perturbation_scaling, stability_run,
    standard_normal_tensor, sub_seed, EnergyReport, OversmoothingConfig, ScalingConfig,
};
use citrus_core::graph::erdos_renyi;
use citrus_core::layer::{
    xavier_uniform, Activation, BlockStack, CitrusBlock, CitrusModel, FieldMode, ReceptiveField,
};
use citrus_core::scalar::softplus_inv;
use citrus_core::spectral::{eigh, TruncationPolicy};
use citrus_core::train::{fd_check, train_stack, LossKind, TrainConfig};
use citrus_core::Matrix64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Print the one-line verdict, then enforce it.
fn verdict(ok: bool, line: &str) {
    println!("[{}] {line}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{line}");
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Schema defaults, with `configs/` as the base directory for paths.
fn default_config(schema: Schema) -> Config {
    let raw = RawConfig::parse("", &repo_root().join("configs")).expect("empty config parses");
    schema.resolve(&raw).expect("defaults resolve")
}

fn file_config(schema: Schema, name: &str) -> Config {
    let raw = RawConfig::from_file(&repo_root().join("configs").join(name)).expect("config reads");
    schema.resolve(&raw).expect("config resolves")
}

// ---------------------------------------------------------------------------
// Closed-form kernel identities.

#[test]
fn a01_product_heat_kernel_factorizes_over_graph_factors() {
    let _g = serial();
    let cfg = default_config(kernel_check::schema());
    let started = Instant::now();
    let rows = kernel_check::evaluate(&cfg).expect("checks run");
    let elapsed = started.elapsed();
    let row = rows.iter().find(|r| r.name == "separability_max_error").expect("row present");
    verdict(
        row.pass && elapsed < Duration::from_secs(10),
        &format!(
            "product-graph heat kernel equals the Kronecker product of factor kernels: \
             max entrywise error {:.3e} (tolerance {:.0e}) over {} instances, {:.2?} < 10s",
            row.value, row.upper, row.instances, elapsed
        ),
    );
}

#[test]
fn a02_tensor_vectorized_and_spectral_forwards_agree() {
    let _g = serial();
    let cfg = default_config(kernel_check::schema());
    let started = Instant::now();
    let rows = kernel_check::evaluate(&cfg).expect("checks run");
    let elapsed = started.elapsed();
    let row = rows.iter().find(|r| r.name == "equivalence_max_rel_error").expect("row present");
    verdict(
        row.pass && elapsed < Duration::from_secs(10),
        &format!(
            "tensor, vectorized, and spectral layer forwards agree: max relative error \
             {:.3e} (tolerance {:.0e}) over {} instances, {:.2?} < 10s",
            row.value, row.upper, row.instances, elapsed
        ),
    );
}

#[test]
fn a03_integrator_matches_closed_form_at_fourth_order() {
    let _g = serial();
    let cfg = default_config(kernel_check::schema());
    let rows = kernel_check::evaluate(&cfg).expect("checks run");
    let err = rows.iter().find(|r| r.name == "rk4_max_error").expect("row present");
    let ratio =
        rows.iter().find(|r| r.name == "rk4_halving_ratio_median").expect("row present");
    verdict(
        err.pass && ratio.pass,
        &format!(
            "RK4 diffusion matches the closed-form kernel: max error {:.3e} (tolerance \
             {:.0e}); halving the step contracts the error by {:.2} (expected within \
             [{}, {}])",
            err.value, err.upper, ratio.value, ratio.lower, ratio.upper
        ),
    );
}

// ---------------------------------------------------------------------------
// Gradient correctness.

/// One seeded end-to-end model (encoder, diffusion blocks, decoder) with the
/// requested receptive-field mode.
fn fd_instance(i: u64, mode: FieldMode) -> f64 {
    let base = sub_seed(900, i);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(base, 0));
    let n1 = rng.gen_range(4..=6);
    let window = rng.gen_range(3..=5);
    let horizon = rng.gen_range(1..=3);
    let channels = rng.gen_range(2..=3);
    let g1 = erdos_renyi::<f64>(n1, 0.6, sub_seed(base, 1), true).expect("graph");
    let g2 = citrus_core::graph::path_graph::<f64>(window).expect("path");
    let bases = vec![
        eigh(g1.normalized_laplacian()).expect("basis"),
        eigh(g2.normalized_laplacian()).expect("basis"),
    ];
    let blocks = (0..rng.gen_range(1..=2))
        .map(|b| CitrusBlock {
            receptive: ReceptiveField::with_raw(
                mode,
                2,
                channels,
                (0..ReceptiveField::<f64>::raw_len(mode, 2, channels))
                    .map(|_| softplus_inv(rng.gen_range(0.3..2.0)))
                    .collect(),
            )
            .expect("field"),
            mix_weights: xavier_uniform(channels, channels, &mut rng),
            mlp_weights: if b == 0 {
                vec![xavier_uniform(channels, channels, &mut rng)]
            } else {
                vec![]
            },
            activation: if i % 2 == 0 { Activation::Relu } else { Activation::LeakyRelu(0.2) },
            residual: i % 3 == 0,
        })
        .collect();
    let model = CitrusModel {
        encoder: xavier_uniform(1, channels, &mut rng),
        blocks,
        decoder: xavier_uniform(window * (1 + channels), horizon, &mut rng),
        bases,
    };
    let input = standard_normal_tensor::<f64>(&[n1, window, 1], sub_seed(base, 2));
    let target = standard_normal_tensor::<f64>(&[n1, horizon], sub_seed(base, 3));
    fd_check(&model, &input, &target, LossKind::Mse, 1e-4).expect("finite-difference check")
}

#[test]
fn a04_analytic_gradients_match_central_differences() {
    let _g = serial();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mode = match i % 3 {
            0 => FieldMode::Scalar,
            1 => FieldMode::PerFactor,
            _ => FieldMode::PerFactorChannel,
        };
        worst = worst.max(fd_instance(i, mode));
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-5 && elapsed < Duration::from_secs(30),
        &format!(
            "analytic gradients match central finite differences across scalar, \
             per-factor, and per-factor-channel receptive fields: max relative error \
             {worst:.3e} (tolerance 1e-5) over 20 models, {elapsed:.2?} < 30s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Energy envelope.

/// Random nonlinear diffusion stack in the envelope's scope: connected
/// factors, positively homogeneous activations, no residual paths; kernels
/// act on the product-normalized Laplacians.
fn random_stack_trajectory(i: u64) -> EnergyReport<f64> {
    let base = sub_seed(770, i);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(base, 0));
    let factors = 2 + (i % 2) as usize;
    let layers = 1 + (i as usize % 10);
    let channels = rng.gen_range(3..=5usize);
    let mut graphs = Vec::with_capacity(factors);
    for p in 0..factors {
        let n = rng.gen_range(3..=8);
        let prob = rng.gen_range(0.5..0.9);
        graphs.push(erdos_renyi::<f64>(n, prob, sub_seed(base, 1 + p as u64), true).expect("graph"));
    }
    let norm_laps: Vec<Matrix64> =
        graphs.iter().map(|g| g.normalized_laplacian().clone()).collect();
    let scale = 1.0 / factors as f64;
    let bases = norm_laps
        .iter()
        .map(|l| eigh(&l.scale(scale)).expect("basis"))
        .collect();

    let weight_scale = rng.gen_range(0.05..1.5);
    let blocks = (0..layers)
        .map(|l| {
            let mode = match l % 3 {
                0 => FieldMode::Scalar,
                1 => FieldMode::PerFactor,
                _ => FieldMode::PerFactorChannel,
            };
            CitrusBlock {
                receptive: ReceptiveField::with_raw(
                    mode,
                    factors,
                    channels,
                    (0..ReceptiveField::<f64>::raw_len(mode, factors, channels))
                        .map(|_| softplus_inv(rng.gen_range(0.05..3.0)))
                        .collect(),
                )
                .expect("field"),
                mix_weights: Matrix64::from_fn(channels, channels, |_, _| {
                    rng.gen_range(-1.0..1.0) * weight_scale
                }),
                mlp_weights: if l % 3 == 2 {
                    vec![Matrix64::from_fn(channels, channels, |_, _| {
                        rng.gen_range(-1.0..1.0) * weight_scale
                    })]
                } else {
                    vec![]
                },
                activation: if i % 2 == 0 {
                    Activation::Relu
                } else {
                    Activation::LeakyRelu(rng.gen_range(0.01..0.9))
                },
                residual: false,
            }
        })
        .collect();

    let mut shape: Vec<usize> = graphs.iter().map(|g| g.n()).collect();
    shape.push(channels);
    let x0 = standard_normal_tensor::<f64>(&shape, sub_seed(base, 100));
    let stack = BlockStack { blocks, readout: None, bases };
    citrus_core::analysis::energy_trajectory(&stack, &x0, &norm_laps).expect("trajectory")
}

#[test]
fn a05_layer_energy_stays_under_the_spectral_envelope() {
    let _g = serial();
    let started = Instant::now();
    let tol = 1.0 + 1e-8;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut violations = 0usize;
    for i in 0..100u64 {
        let report = random_stack_trajectory(i);
        let e0 = report.energies[0];
        for (l, &e) in report.energies.iter().enumerate() {
            let envelope = e0 * report.bound.sup_line[l].exp();
            worst_excess = worst_excess.max(e / envelope);
            if e > envelope * tol {
                violations += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        violations == 0 && elapsed < Duration::from_secs(60),
        &format!(
            "layer energy of 100 random rectifier stacks stays under the spectral \
             envelope at every depth: worst energy/envelope ratio {worst_excess:.6} \
             (allowed 1+1e-8), {elapsed:.2?} < 60s"
        ),
    );
}

#[test]
fn a06_decaying_and_loose_envelope_scenarios_have_expected_shapes() {
    let _g = serial();
    let started = Instant::now();
    let decay = oversmoothing_scenario::<f64>(&OversmoothingConfig::decay_scenario())
        .expect("decay scenario");
    let loose = oversmoothing_scenario::<f64>(&OversmoothingConfig::loose_scenario())
        .expect("loose scenario");
    let slack = 1e-9;
    let layers = decay.energies.len() - 1;

    let mut ok = decay.bound.decays;
    for l in 1..=layers {
        ok &= decay.log_ratios[l] <= decay.bound.sup_line[l] + slack;
        ok &= decay.energies[l] <= decay.energies[l - 1] * (1.0 + slack);
    }
    ok &= loose.bound.sup_line[1] > 0.0;
    for l in 1..=layers {
        ok &= loose.log_ratios[l] <= loose.bound.sup_line[l] + slack;
    }
    let elapsed = started.elapsed();
    verdict(
        ok && elapsed < Duration::from_secs(60),
        &format!(
            "contractive scenario decays monotonically under its envelope (final log \
             ratio {:.2} <= bound {:.2}); loose scenario's envelope grows (slope {:.2}) \
             while the observed trajectory stays below it (final log ratio {:.2}); \
             {elapsed:.2?} < 60s",
            decay.log_ratios[layers],
            decay.bound.sup_line[layers],
            loose.bound.sup_line[1],
            loose.log_ratios[layers]
        ),
    );
}

// ---------------------------------------------------------------------------
// Trend reproduction.

#[test]
fn a07_test_error_degrades_as_factor_snr_drops() {
    let _g = serial();
    let started = Instant::now();
    let cfg = default_config(stability::schema());
    let scfg = stability::to_stability_config(&cfg).expect("stability config");
    let report = stability_run::<f64>(&scfg).expect("stability run");
    let (worst_row, worst_col) = stability::trend_violations(&report.mean_test_mse);
    let elapsed = started.elapsed();
    verdict(
        worst_row <= 1 && worst_col <= 1 && elapsed < Duration::from_secs(1200),
        &format!(
            "mean test MSE is non-increasing in each factor's SNR on the 5x5 grid \
             (10 realizations): worst adjacent violations per row {worst_row}, per \
             column {worst_col} (allowed 1), {elapsed:.2?} < 20min"
        ),
    );
}

#[test]
fn a08_forward_deviation_scales_linearly_in_the_perturbation() {
    let _g = serial();
    let cfg = ScalingConfig::default();
    let samples = perturbation_scaling::<f64>(&cfg).expect("scaling run");
    let mut ratios: Vec<f64> = samples
        .iter()
        .map(|s| {
            assert!(s.deviation_small > 0.0, "unperturbed deviation must be positive");
            s.deviation_doubled / s.deviation_small
        })
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let median = ratios[ratios.len() / 2];
    verdict(
        median <= 2.5,
        &format!(
            "doubling an adjacency perturbation of {:.0}% spectral norm roughly doubles \
             the forward deviation: median ratio {median:.3} <= 2.5 over {} realizations",
            cfg.eps_fraction * 100.0,
            samples.len()
        ),
    );
}

#[test]
fn a09_truncation_sweep_trades_error_against_cost() {
    let _g = serial();
    let cfg = file_config(truncation::schema(), "truncation.cfg");
    let out = truncation::evaluate(&cfg).expect("truncation sweep");

    let exact = out
        .full_exact
        .iter()
        .find(|(p, _)| *p == TruncationPolicy::Smallest)
        .and_then(|(_, e)| *e)
        == Some(true);

    let cells: Vec<_> =
        out.cells.iter().filter(|c| c.policy == TruncationPolicy::Smallest).collect();
    assert!(cells.windows(2).all(|w| w[0].k < w[1].k), "cells ordered by k");
    let error_monotone =
        cells.windows(2).all(|w| w[1].median_val <= w[0].median_val);
    let time_monotone = cells
        .windows(2)
        .all(|w| w[1].median_epoch_seconds > w[0].median_epoch_seconds);

    let spread = cells.first().map(|c| c.median_val).unwrap_or(0.0)
        - cells.last().map(|c| c.median_val).unwrap_or(0.0);
    verdict(
        exact && error_monotone && time_monotone,
        &format!(
            "kept-eigenpair sweep: full-rank run equals the untruncated model bit for \
             bit; median validation error is non-increasing in k (drops {spread:.4} \
             across the grid, 5 seeds); median epoch time strictly increases with k"
        ),
    );
}

// ---------------------------------------------------------------------------
// Planted-teacher recovery.

/// Calibrated recovery setup: a single linear diffusion block with
/// per-factor times (1.4, 0.7). The zero eigenvalue of each factor pins the
/// kernel scale, so the times are exactly identifiable from input/output
/// pairs; the calibration run recovered them to ~1e-8 relative error.
#[test]
fn a10_student_recovers_planted_diffusion_times() {
    let _g = serial();
    let seed = 42u64;
    let (n1, n2, channels) = (12usize, 15usize, 3usize);
    let (time1, time2) = (1.4f64, 0.7f64);
    let g1 = erdos_renyi::<f64>(n1, 0.3, sub_seed(seed, 1), true).expect("graph");
    let g2 = erdos_renyi::<f64>(n2, 0.25, sub_seed(seed, 2), true).expect("graph");
    let bases = vec![
        eigh(g1.normalized_laplacian()).expect("basis"),
        eigh(g2.normalized_laplacian()).expect("basis"),
    ];
    let mut trng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
    let teacher = BlockStack {
        blocks: vec![CitrusBlock {
            receptive: ReceptiveField::with_raw(
                FieldMode::PerFactor,
                2,
                1,
                vec![softplus_inv(time1), softplus_inv(time2)],
            )
            .expect("field"),
            mix_weights: xavier_uniform(channels, channels, &mut trng),
            mlp_weights: vec![],
            activation: Activation::Identity,
            residual: false,
        }],
        readout: None,
        bases: bases.clone(),
    };
    let x = standard_normal_tensor::<f64>(&[n1, n2, channels], sub_seed(seed, 4));
    let y = teacher.forward(&x).expect("teacher forward");
    let (train_m, val_m, test_m) = node_split_masks::<f64>(
        &[n1, n2],
        channels,
        0.15,
        0.15,
        &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 5)),
    )
    .expect("splits");

    let mut srng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 6));
    let mut student = BlockStack {
        blocks: vec![CitrusBlock {
            receptive: ReceptiveField::new(FieldMode::PerFactor, 2, 1).expect("field"),
            mix_weights: xavier_uniform(channels, channels, &mut srng),
            mlp_weights: vec![],
            activation: Activation::Identity,
            residual: false,
        }],
        readout: None,
        bases,
    };
    let cfg = TrainConfig {
        loss: LossKind::Mse,
        learning_rate: 0.05,
        max_epochs: 400,
        patience: 400,
        seed: 0,
        ..TrainConfig::default()
    };
    train_stack(&mut student, &x, &y, &train_m, &val_m, &cfg).expect("training");

    let grid = student.blocks[0].receptive.effective_grid();
    let (rel1, rel2) = (
        (grid[0][0] - time1).abs() / time1,
        (grid[1][0] - time2).abs() / time2,
    );
    let pred = student.forward(&x).expect("student forward");
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((p, t), m) in pred.as_slice().iter().zip(y.as_slice()).zip(test_m.as_slice()) {
        if *m > 0.0 {
            num += (p - t) * (p - t);
            den += t * t;
        }
    }
    let rnmse = (num / den).sqrt();
    verdict(
        rel1 <= 0.10 && rel2 <= 0.10 && rnmse <= 0.2,
        &format!(
            "student recovers the planted per-factor diffusion times: {:.6} vs {time1} \
             and {:.6} vs {time2} (relative errors {rel1:.2e}, {rel2:.2e}, allowed 10%); \
             held-out rNMSE {rnmse:.2e} <= 0.2",
            grid[0][0], grid[1][0]
        ),
    );
}

// ---------------------------------------------------------------------------
// Binary determinism.

fn run_once(args: &[String]) -> TempDir {
    let dir = TempDir::new().expect("temp dir");
    let out = Command::new(env!("CARGO_BIN_EXE_citrus"))
        .args(args)
        .arg("--out")
        .arg(dir.path())
        .output()
        .expect("binary spawns");
    assert!(
        matches!(out.status.code(), Some(0) | Some(1)),
        "command {args:?} must run to completion, got {:?}",
        out.status
    );
    dir
}

#[test]
fn a11_reruns_produce_byte_identical_outputs() {
    let _g = serial();
    let configs = repo_root().join("configs");
    let cfg = |name: &str| configs.join(name).to_string_lossy().into_owned();
    let set = |kv: &str| vec!["--set".to_string(), kv.to_string()];

    let mut cases: Vec<Vec<String>> = vec![
        vec!["kernel-check".into(), "--config".into(), cfg("kernel_check.cfg")]
            .into_iter()
            .chain(set("instances=4"))
            .chain(set("equivalence_instances=2"))
            .chain(set("rk4_instances=2"))
            .collect(),
        vec!["oversmoothing".into(), "--config".into(), cfg("oversmoothing.cfg")],
        vec!["stability".into(), "--config".into(), cfg("stability_smoke.cfg")],
        vec!["truncation".into(), "--config".into(), cfg("truncation_smoke.cfg")],
        vec!["forecast".into(), "--config".into(), cfg("forecast_planted.cfg")],
        vec!["forecast".into(), "--config".into(), cfg("forecast_constant.cfg")],
    ];
    // The deliberate-failure config must also fail identically.
    cases.push(
        vec!["kernel-check".into(), "--config".into(), cfg("kernel_check_sentinel.cfg")]
            .into_iter()
            .chain(set("instances=4"))
            .chain(set("equivalence_instances=2"))
            .chain(set("rk4_instances=2"))
            .collect(),
    );

    let mut checked_files = 0usize;
    let mut wall_clock_files = 0usize;
    for args in &cases {
        let a = run_once(args);
        let b = run_once(args);
        let mut names: Vec<String> = std::fs::read_dir(a.path())
            .expect("read out dir")
            .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut other: Vec<String> = std::fs::read_dir(b.path())
            .expect("read out dir")
            .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
            .collect();
        other.sort();
        assert_eq!(names, other, "{args:?}: reruns produce the same file set");
        for name in &names {
            // Wall-clock measurements live in exactly one file; everything
            // else must be reproduced byte for byte.
            if name == "timing.csv" {
                wall_clock_files += 1;
                continue;
            }
            let left = std::fs::read(a.path().join(name)).expect("read");
            let right = std::fs::read(b.path().join(name)).expect("read");
            assert_eq!(left, right, "{args:?}: {name} differs between reruns");
            checked_files += 1;
        }
    }
    verdict(
        checked_files > 0,
        &format!(
            "every command rerun is byte-identical across {checked_files} output files \
             ({} commands; {wall_clock_files} wall-clock timing files exempt)",
            cases.len()
        ),
    );
}

// ---------------------------------------------------------------------------

/// The planted forecasting series is predictable by the forecasting path
/// itself: one-step-ahead test rNMSE on the committed series stays under
/// the recovery threshold.
#[test]
fn a10b_forecast_on_planted_series_beats_error_floor() {
    let _g = serial();
    let mut cfg = RawConfig::from_file(&repo_root().join("configs").join("forecast_planted.cfg"))
        .expect("config reads");
    cfg.apply_overrides(&["horizons=1".to_string()]).expect("override");
    let cfg = citrus_cli::commands::forecast::schema().resolve(&cfg).expect("resolves");
    let outcomes = citrus_cli::commands::forecast::evaluate(&cfg).expect("forecast runs");
    let one = &outcomes[0];
    verdict(
        one.rnmse <= 0.2,
        &format!(
            "one-step forecasts on the committed diffusion-generated series reach test \
             rNMSE {:.4} <= 0.2 over {} windows",
            one.rnmse, one.test_windows
        ),
    );
}
