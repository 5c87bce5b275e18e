//! Series ingestion, sliding windows, per-node normalization, and the
//! deterministic generators behind the committed CSV fixtures in `data/`.

use citrus_core::analysis::sub_seed;
use citrus_core::graph::{build_graph, path_graph};
use citrus_core::layer::{
    model_forward, xavier_uniform, Activation, CitrusBlock, CitrusModel, FieldMode,
    ReceptiveField,
};
use citrus_core::scalar::softplus_inv;
use citrus_core::spectral::eigh;
use citrus_core::train::SplitDataset;
use citrus_core::{CitrusError, CitrusModel64, FactorGraph64, Matrix64, Result, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Node standard deviations below this floor normalize as 1, so a constant
/// series stays representable instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-12;

/// Sliding windows over a node-by-time series: one pair per position with a
/// full history and future, the history as an `[N, window, 1]` tensor and
/// the future as `[N, horizon]`. The series is column-major with nodes
/// fastest, so each window is a contiguous slice.
pub fn make_windows(
    series: &Matrix64,
    window: usize,
    horizon: usize,
) -> Result<Vec<(Tensor64, Tensor64)>> {
    if window == 0 || horizon == 0 {
        return Err(CitrusError::InvalidArgument(
            "window and horizon must be at least 1".into(),
        ));
    }
    let n = series.rows();
    let total = series.cols();
    if total < window + horizon {
        return Err(CitrusError::InvalidArgument(format!(
            "series has {total} steps, a window of {window} plus horizon of {horizon} needs at least {}",
            window + horizon
        )));
    }
    let count = total - window - horizon + 1;
    let data = series.as_slice();
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let input = Tensor64::from_data(&[n, window, 1], data[n * w..n * (w + window)].to_vec())?;
        let target = Tensor64::from_data(
            &[n, horizon],
            data[n * (w + window)..n * (w + window + horizon)].to_vec(),
        )?;
        out.push((input, target));
    }
    Ok(out)
}

/// A windowed forecasting task: chronological train/val/test windows over a
/// per-node z-scored series, plus everything needed to undo the scaling.
///
/// Normalization statistics come only from the columns a training window
/// can see (inputs and targets of the first `n_train` windows); validation
/// and test windows are scaled with those same statistics.
#[derive(Clone, Debug)]
pub struct ForecastDataset {
    /// Raw, unnormalized series (`N x T_total`).
    pub series: Matrix64,
    pub spatial: FactorGraph64,
    /// Path graph over the window positions.
    pub temporal: FactorGraph64,
    pub window: usize,
    pub horizon: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Z-scored window pairs, split chronologically.
    pub data: SplitDataset<f64>,
}

impl ForecastDataset {
    pub fn build(
        series: Matrix64,
        spatial: FactorGraph64,
        window: usize,
        horizon: usize,
        train_fraction: f64,
        val_fraction: f64,
    ) -> Result<Self> {
        if spatial.n() != series.rows() {
            return Err(CitrusError::InvalidArgument(format!(
                "series has {} nodes, spatial graph has {}",
                series.rows(),
                spatial.n()
            )));
        }
        for (name, f) in [("train_fraction", train_fraction), ("val_fraction", val_fraction)] {
            if !(0.0 < f && f < 1.0) {
                return Err(CitrusError::InvalidArgument(format!("{name} {f} outside (0,1)")));
            }
        }
        if train_fraction + val_fraction >= 1.0 {
            return Err(CitrusError::InvalidArgument(
                "train and validation fractions leave no test windows".into(),
            ));
        }
        if window < 2 {
            return Err(CitrusError::InvalidArgument(
                "window must cover at least 2 steps to carry a temporal factor".into(),
            ));
        }
        let n = series.rows();
        let total = series.cols();
        if total < window + horizon {
            return Err(CitrusError::InvalidArgument(format!(
                "series has {total} steps, needs at least {}",
                window + horizon
            )));
        }
        let count = total - window - horizon + 1;
        let n_train = (count as f64 * train_fraction).floor() as usize;
        let n_val = (count as f64 * val_fraction).floor() as usize;
        let n_test = count - n_train - n_val;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(CitrusError::InvalidArgument(format!(
                "{count} windows split into train {n_train}, val {n_val}, test {n_test}; every part must be nonempty"
            )));
        }

        // Columns visible to training: inputs and targets of the first
        // n_train windows.
        let train_cols = n_train + window + horizon - 1;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for r in 0..n {
            let mut sum = 0.0;
            for c in 0..train_cols {
                sum += series.get(r, c);
            }
            let m = sum / train_cols as f64;
            let mut var = 0.0;
            for c in 0..train_cols {
                let d = series.get(r, c) - m;
                var += d * d;
            }
            mean[r] = m;
            let s = (var / train_cols as f64).sqrt();
            std[r] = if s < STD_FLOOR { 1.0 } else { s };
        }

        let z = Matrix64::from_fn(n, total, |r, c| (series.get(r, c) - mean[r]) / std[r]);
        let mut windows = make_windows(&z, window, horizon)?;
        let test = windows.split_off(n_train + n_val);
        let val = windows.split_off(n_train);
        let data = SplitDataset { train: windows, val, test };

        let temporal = path_graph(window)?;
        Ok(ForecastDataset {
            series,
            spatial,
            temporal,
            window,
            horizon,
            mean,
            std,
            n_train,
            n_val,
            n_test,
            data,
        })
    }

    /// Undo the per-node scaling of an `[N, horizon]` prediction; output is
    /// flattened with nodes fastest, matching tensor storage.
    pub fn denormalize(&self, pred: &Tensor64) -> Result<Vec<f64>> {
        let n = self.series.rows();
        if pred.shape() != [n, self.horizon] {
            return Err(CitrusError::InvalidArgument(format!(
                "prediction shape {:?} does not match [{n}, {}]",
                pred.shape(),
                self.horizon
            )));
        }
        Ok(pred
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % n] + self.mean[i % n])
            .collect())
    }

    /// Raw targets of the test windows, concatenated window by window in
    /// the same flattening as [`Self::denormalize`].
    pub fn raw_test_targets(&self) -> Vec<f64> {
        let n = self.series.rows();
        let data = self.series.as_slice();
        let mut out = Vec::with_capacity(self.n_test * n * self.horizon);
        for w in (self.n_train + self.n_val)..(self.n_train + self.n_val + self.n_test) {
            out.extend_from_slice(&data[n * (w + self.window)..n * (w + self.window + self.horizon)]);
        }
        out
    }
}

/// Render a matrix as header-free CSV, rows = matrix rows, shortest
/// round-trip decimals. This is the byte format of the committed fixtures.
pub fn matrix_to_csv(m: &Matrix64) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&crate::report::fmt_f64(m.get(r, c)));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Committed fixtures. The CSVs under `data/` are exactly the bytes these
// generators produce; integration tests regenerate and compare.

pub const PLANTED_NODES: usize = 6;
pub const PLANTED_STEPS: usize = 160;
pub const PLANTED_WINDOW: usize = 6;
/// Teacher embedding width.
pub const PLANTED_EMBED: usize = 3;
/// Teacher diffusion time over the spatial factor.
pub const PLANTED_TIME_SPACE: f64 = 1.4;
/// Teacher diffusion time over the temporal factor.
pub const PLANTED_TIME_TIME: f64 = 0.7;
/// Standard deviation of the per-step innovation noise.
pub const PLANTED_NOISE: f64 = 0.05;
pub const PLANTED_SEED: u64 = 11;
/// Rescaling of the teacher decoder that parks the one-step recursion near
/// the edge of stability, so 160 generated steps neither die out nor blow
/// up. The recursion gain is exactly linear in this constant.
pub const PLANTED_DECODER_SCALE: f64 = 0.813;

/// Ring over the planted spatial nodes: vertex-transitive, so every node
/// sees statistically identical signals and per-node normalization is
/// nearly uniform.
pub fn planted_adjacency() -> Matrix64 {
    let n = PLANTED_NODES;
    let mut a = Matrix64::zeros(n, n);
    for i in 0..n {
        let j = (i + 1) % n;
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    a
}

/// The data-generating teacher: linear encoder, one ReLU diffusion block
/// with per-factor times, and a one-step decoder.
pub fn planted_teacher() -> Result<CitrusModel64> {
    let spatial = build_graph(planted_adjacency())?;
    let temporal = path_graph(PLANTED_WINDOW)?;
    let bases = vec![
        eigh(spatial.normalized_laplacian())?,
        eigh(temporal.normalized_laplacian())?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(PLANTED_SEED, 0));
    let encoder = xavier_uniform(1, PLANTED_EMBED, &mut rng);
    let mix = xavier_uniform(PLANTED_EMBED, PLANTED_EMBED, &mut rng);
    let decoder = xavier_uniform(PLANTED_WINDOW * (1 + PLANTED_EMBED), 1, &mut rng)
        .scale(PLANTED_DECODER_SCALE);
    let block = CitrusBlock {
        receptive: ReceptiveField::with_raw(
            FieldMode::PerFactor,
            2,
            1,
            vec![softplus_inv(PLANTED_TIME_SPACE), softplus_inv(PLANTED_TIME_TIME)],
        )?,
        mix_weights: mix,
        mlp_weights: Vec::new(),
        activation: Activation::Relu,
        residual: false,
    };
    Ok(CitrusModel { encoder, blocks: vec![block], decoder, bases })
}

/// Generate the planted series by closing the loop: seed the first window
/// with standard normal noise, then repeatedly append the teacher's one-step
/// prediction plus a small innovation.
pub fn generate_planted_series() -> Result<Matrix64> {
    let model = planted_teacher()?;
    let n = PLANTED_NODES;
    let t = PLANTED_WINDOW;
    let mut series = Matrix64::zeros(n, PLANTED_STEPS);
    let mut init = ChaCha8Rng::seed_from_u64(sub_seed(PLANTED_SEED, 1));
    for c in 0..t {
        for r in 0..n {
            let z: f64 = StandardNormal.sample(&mut init);
            series.set(r, c, z);
        }
    }
    let mut noise = ChaCha8Rng::seed_from_u64(sub_seed(PLANTED_SEED, 2));
    for step in t..PLANTED_STEPS {
        let w0 = step - t;
        let input =
            Tensor64::from_data(&[n, t, 1], series.as_slice()[n * w0..n * step].to_vec())?;
        let pred = model_forward(&input, &model)?;
        for r in 0..n {
            let eps: f64 = StandardNormal.sample(&mut noise);
            series.set(r, step, pred.as_slice()[r] + PLANTED_NOISE * eps);
        }
    }
    Ok(series)
}

pub const CONSTANT_NODES: usize = 4;
pub const CONSTANT_STEPS: usize = 40;
pub const CONSTANT_VALUE: f64 = 7.5;

/// Flat series: every node holds the same value at every step.
pub fn constant_series() -> Matrix64 {
    Matrix64::from_fn(CONSTANT_NODES, CONSTANT_STEPS, |_, _| CONSTANT_VALUE)
}

/// Pairwise distances between seeded random points in the unit square, for
/// the Gaussian-kernel graph path of the forecast command.
pub fn fixture_distances() -> Matrix64 {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(PLANTED_SEED, 3));
    let coords: Vec<(f64, f64)> =
        (0..CONSTANT_NODES).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    Matrix64::from_fn(CONSTANT_NODES, CONSTANT_NODES, |i, j| {
        let dx = coords[i].0 - coords[j].0;
        let dy = coords[i].1 - coords[j].1;
        (dx * dx + dy * dy).sqrt()
    })
}
