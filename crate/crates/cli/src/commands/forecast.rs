//! Windowed forecasting on a node-by-time series CSV: per-node normalized
//! chronological splits, one trained model per horizon, test metrics on the
//! original scale, and a reloadable checkpoint per model.

use std::path::Path;

use citrus_core::analysis::sub_seed;
use citrus_core::graph::{build_graph, gaussian_kernel_graph};
use citrus_core::io::{load_matrix_csv, save_checkpoint, Checkpoint, CheckpointModel};
use citrus_core::layer::{
    model_forward, xavier_uniform, Activation, CitrusBlock, CitrusModel, FieldMode,
    ReceptiveField,
};
use citrus_core::spectral::{eigh, truncate, SpectralBasis, TruncationPolicy};
use citrus_core::train::{train, LossKind, TrainConfig, TrainHistory};
use citrus_core::{CitrusError, CitrusModel64, FactorGraph64, Result};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde_json::Value;

use crate::config::{Config, Schema};
use crate::dataset::ForecastDataset;
use crate::metrics;
use crate::report::{fmt_f64, json_num, write_report, Csv};

pub fn schema() -> Schema {
    Schema::new(
        "forecast",
        &[
            ("series_csv", None),
            ("adjacency_csv", Some("")),
            ("distances_csv", Some("")),
            ("gaussian_sigma", Some("1")),
            ("gaussian_threshold", Some("0.1")),
            ("window", Some("6")),
            ("horizons", Some("3,6,12")),
            ("train_fraction", Some("0.7")),
            ("val_fraction", Some("0.15")),
            ("embed_width", Some("3")),
            ("blocks", Some("1")),
            ("mlp_depth", Some("0")),
            ("mlp_width", Some("8")),
            ("activation", Some("relu")),
            ("leaky_slope", Some("0.1")),
            // 0 keeps the full spectrum of that factor.
            ("k1", Some("0")),
            ("k2", Some("0")),
            ("policy", Some("smallest")),
            ("loss", Some("mae")),
            ("learning_rate", Some("0.01")),
            ("batch_size", Some("32")),
            ("max_epochs", Some("300")),
            ("patience", Some("25")),
            ("seed", Some("0")),
        ],
    )
}

fn spatial_graph(cfg: &Config) -> Result<FactorGraph64> {
    match (cfg.is_set("adjacency_csv"), cfg.is_set("distances_csv")) {
        (true, false) => build_graph(load_matrix_csv(&cfg.path("adjacency_csv")?)?),
        (false, true) => gaussian_kernel_graph(
            &load_matrix_csv(&cfg.path("distances_csv")?)?,
            cfg.f64("gaussian_sigma")?,
            cfg.f64("gaussian_threshold")?,
        ),
        (true, true) => Err(CitrusError::InvalidArgument(
            "set either adjacency_csv or distances_csv, not both".into(),
        )),
        (false, false) => Err(CitrusError::InvalidArgument(
            "a spatial graph needs adjacency_csv or distances_csv".into(),
        )),
    }
}

fn parse_activation(cfg: &Config) -> Result<Activation<f64>> {
    match cfg.get("activation")? {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        "leaky" => Ok(Activation::LeakyRelu(cfg.f64("leaky_slope")?)),
        other => Err(CitrusError::InvalidArgument(format!(
            "unknown activation {other:?} (expected relu|identity|leaky)"
        ))),
    }
}

fn maybe_truncate(
    basis: SpectralBasis<f64>,
    k: usize,
    policy: TruncationPolicy,
) -> Result<SpectralBasis<f64>> {
    if k == 0 {
        return Ok(basis);
    }
    truncate(&basis, k, policy)
}

/// Fresh model for one horizon; weights depend on the seed and horizon
/// only.
fn build_model(
    cfg: &Config,
    dataset: &ForecastDataset,
    horizon: usize,
) -> Result<CitrusModel64> {
    let embed = cfg.usize("embed_width")?;
    let n_blocks = cfg.usize("blocks")?;
    if embed == 0 || n_blocks == 0 {
        return Err(CitrusError::InvalidArgument(
            "embed_width and blocks must be at least 1".into(),
        ));
    }
    let policy = cfg.get("policy")?.parse::<TruncationPolicy>()?;
    let bases = vec![
        maybe_truncate(
            eigh(dataset.spatial.normalized_laplacian())?,
            cfg.usize("k1")?,
            policy,
        )?,
        maybe_truncate(
            eigh(dataset.temporal.normalized_laplacian())?,
            cfg.usize("k2")?,
            policy,
        )?,
    ];
    let activation = parse_activation(cfg)?;
    let mlp_depth = cfg.usize("mlp_depth")?;
    let mlp_width = cfg.usize("mlp_width")?;

    let mut rng =
        ChaCha8Rng::seed_from_u64(sub_seed(cfg.u64("seed")?, 1000 + horizon as u64));
    let encoder = xavier_uniform(1, embed, &mut rng);
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut mlp_weights = Vec::with_capacity(mlp_depth);
        if mlp_depth > 0 {
            if mlp_width == 0 {
                return Err(CitrusError::InvalidArgument(
                    "mlp_width must be positive when mlp_depth > 0".into(),
                ));
            }
            let mut width = embed;
            for d in 0..mlp_depth {
                let next = if d + 1 == mlp_depth { embed } else { mlp_width };
                mlp_weights.push(xavier_uniform(width, next, &mut rng));
                width = next;
            }
        }
        blocks.push(CitrusBlock {
            receptive: ReceptiveField::new(FieldMode::PerFactor, 2, 1)?,
            mix_weights: xavier_uniform(embed, embed, &mut rng),
            mlp_weights,
            activation,
            residual: false,
        });
    }
    let decoder = xavier_uniform(dataset.window * (1 + embed), horizon, &mut rng);
    Ok(CitrusModel { encoder, blocks, decoder, bases })
}

/// Everything measured for one horizon.
pub struct HorizonOutcome {
    pub horizon: usize,
    pub mae: f64,
    pub mape_percent: f64,
    pub mape_excluded: usize,
    pub rmse: f64,
    pub rnmse: f64,
    pub test_windows: usize,
    pub history: TrainHistory,
    pub model: CitrusModel64,
}

pub fn evaluate(cfg: &Config) -> Result<Vec<HorizonOutcome>> {
    let series = load_matrix_csv::<f64>(&cfg.path("series_csv")?)?;
    let spatial = spatial_graph(cfg)?;
    let window = cfg.usize("window")?;
    let horizons = cfg.usize_list("horizons")?;
    if horizons.is_empty() {
        return Err(CitrusError::InvalidArgument("horizons must be nonempty".into()));
    }
    let train_fraction = cfg.f64("train_fraction")?;
    let val_fraction = cfg.f64("val_fraction")?;
    let seed = cfg.u64("seed")?;

    let mut outcomes = Vec::with_capacity(horizons.len());
    for &horizon in &horizons {
        if horizon == 0 {
            return Err(CitrusError::InvalidArgument("horizon must be at least 1".into()));
        }
        let dataset = ForecastDataset::build(
            series.clone(),
            spatial.clone(),
            window,
            horizon,
            train_fraction,
            val_fraction,
        )?;
        let mut model = build_model(cfg, &dataset, horizon)?;
        let tc = TrainConfig {
            loss: cfg.get("loss")?.parse::<LossKind>()?,
            learning_rate: cfg.f64("learning_rate")?,
            batch_size: cfg.usize("batch_size")?,
            max_epochs: cfg.usize("max_epochs")?,
            patience: cfg.usize("patience")?,
            seed: sub_seed(seed, 2000 + horizon as u64),
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset.data, &tc)?;

        let mut pred = Vec::new();
        for (input, _) in &dataset.data.test {
            pred.extend(dataset.denormalize(&model_forward(input, &model)?)?);
        }
        let target = dataset.raw_test_targets();
        let (mape_percent, mape_excluded) = metrics::mape(&pred, &target)?;
        outcomes.push(HorizonOutcome {
            horizon,
            mae: metrics::mae(&pred, &target)?,
            mape_percent,
            mape_excluded,
            rmse: metrics::rmse(&pred, &target)?,
            rnmse: metrics::rnmse(&pred, &target)?,
            test_windows: dataset.n_test,
            history,
            model,
        });
    }
    Ok(outcomes)
}

pub fn run(cfg: &Config, out_dir: &Path) -> Result<Vec<String>> {
    let outcomes = evaluate(cfg)?;
    let policy = cfg.get("policy")?.parse::<TruncationPolicy>()?;
    let seed = cfg.u64("seed")?;

    let mut table = Csv::new(&[
        "horizon",
        "mae",
        "mape_percent",
        "mape_excluded",
        "rmse",
        "rnmse",
        "test_windows",
    ]);
    let mut horizon_json = Vec::new();
    for o in &outcomes {
        table.row(&[
            o.horizon.to_string(),
            fmt_f64(o.mae),
            fmt_f64(o.mape_percent),
            o.mape_excluded.to_string(),
            fmt_f64(o.rmse),
            fmt_f64(o.rnmse),
            o.test_windows.to_string(),
        ]);

        let mut history = Csv::new(&["epoch", "train_loss", "val_loss"]);
        for e in 0..o.history.train_loss.len() {
            history.row(&[
                e.to_string(),
                fmt_f64(o.history.train_loss[e]),
                fmt_f64(o.history.val_loss[e]),
            ]);
        }
        history.write(out_dir, &format!("history_h{}.csv", o.horizon))?;

        let ck = Checkpoint {
            model: CheckpointModel::Model(o.model.clone()),
            policy,
            seeds: vec![seed],
        };
        save_checkpoint(&out_dir.join(format!("model_h{}.ck", o.horizon)), &ck)?;

        let mut m = serde_json::Map::new();
        m.insert("horizon".into(), Value::from(o.horizon));
        m.insert("mae".into(), json_num(o.mae));
        m.insert("mape_percent".into(), json_num(o.mape_percent));
        m.insert("mape_excluded".into(), Value::from(o.mape_excluded));
        m.insert("rmse".into(), json_num(o.rmse));
        m.insert("rnmse".into(), json_num(o.rnmse));
        m.insert("best_epoch".into(), Value::from(o.history.best_epoch));
        m.insert("best_val_loss".into(), json_num(o.history.best_val));
        let times: Vec<Value> = o.model.blocks[0]
            .receptive
            .effective_grid()
            .into_iter()
            .map(|per_factor| {
                Value::from(per_factor.into_iter().map(json_num).collect::<Vec<_>>())
            })
            .collect();
        m.insert("effective_times_block0".into(), Value::from(times));
        horizon_json.push(Value::Object(m));
    }
    table.write(out_dir, "forecast_metrics.csv")?;

    let mut results = serde_json::Map::new();
    results.insert("horizons".into(), Value::from(horizon_json));
    // Metrics are reported; nothing here is an assertion.
    let failures = Vec::new();
    write_report(out_dir, "forecast", cfg, Value::Object(results), &failures)?;
    Ok(failures)
}
