//! Diagnostics for diffusion stacks: tensorial Dirichlet energy, product
//! normalized Laplacians, spectral gaps, worst-case energy-decay envelopes,
//! perturbation-stability sweeps, and product-construction mismatch bounds.
//!
//! Conventions used throughout:
//!
//! * a *gap* is the smallest eigenvalue of a normalized Laplacian above a
//!   zero threshold ([`DEFAULT_ZERO_TOL`]), never a repeated zero;
//! * the energy of an order-`(P+1)` tensor averages the per-factor quadratic
//!   forms, `E(U) = (1/P) sum_p <U, U x_p L_hat_p>`, which equals the
//!   quadratic form of `(1/P) (+)_p L_hat_p` on the channel matrix;
//! * envelope lines live in log space relative to the initial energy, so an
//!   entry `b_l` means `E(X_l) <= exp(b_l) * E(X_0)`.
//!
//! The envelope itself: a block with ReLU-like activation multiplies the
//! energy by at most `s_l * exp(-(2/P) * min_{p,c} t^(p,c) g_p)`, where `s_l`
//! is the product of the squared top singular values of the block's weight
//! matrices, `t^(p,c)` its effective diffusion times, and `g_p` the factor
//! gaps. Chaining blocks gives the per-layer and sup-form lines recorded in
//! [`EnergyBound`]; the sup form is the one that is provably an upper bound
//! at every depth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CitrusError, Result};
use crate::graph::{cartesian_sum, erdos_renyi, perturb};
use crate::layer::{
    spectral_forward, xavier_uniform, Activation, BlockStack, CitrusBlock, FieldMode,
    ReceptiveField,
};
use crate::scalar::{softplus_inv, Scalar};
use crate::spectral::{eigh, symmetric_spectral_norm, SpectralBasis, SYMMETRY_TOL};
use crate::tensor::{mode_product, DenseTensor, Matrix};
use crate::train::{masked_loss_gradient, train_stack, LossKind, TrainConfig};

/// Eigenvalues at or below this count as zero when hunting for a gap.
pub const DEFAULT_ZERO_TOL: f64 = 1e-8;

/// Relative floor below which an initial energy counts as degenerate.
const ENERGY_FLOOR: f64 = 1e-12;

/// Mixing stride for deriving independent sub-seeds from one base seed.
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Derive an independent stream seed from a base seed and a stream index.
pub fn sub_seed(base: u64, idx: u64) -> u64 {
    base.wrapping_add(idx.wrapping_mul(SEED_STRIDE))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Tensorial Dirichlet energy `(1/P) sum_p <U, U x_p L_hat_p>`.
///
/// `norm_laps` are the normalized factor Laplacians, one per non-channel
/// mode. The value is a nonnegative smoothness measure up to roundoff (a
/// signal constant on every connected component, scaled by root degrees, has
/// energy zero).
pub fn tensor_dirichlet_energy<T: Scalar>(
    u: &DenseTensor<T>,
    norm_laps: &[Matrix<T>],
) -> Result<T> {
    let p = norm_laps.len();
    if u.order() != p + 1 {
        return Err(CitrusError::InvalidArgument(format!(
            "tensor of order {} needs {} factor Laplacians, got {p}",
            u.order(),
            u.order() - 1
        )));
    }
    for (i, l) in norm_laps.iter().enumerate() {
        if !l.is_square() || l.rows() != u.shape()[i] {
            return Err(CitrusError::InvalidArgument(format!(
                "mode {i} has size {}, Laplacian is {}x{}",
                u.shape()[i],
                l.rows(),
                l.cols()
            )));
        }
    }
    let mut acc = T::zero();
    for (i, l) in norm_laps.iter().enumerate() {
        let v = mode_product(u, l, i)?;
        acc += dot(u.as_slice(), v.as_slice());
    }
    Ok(acc / T::cast(p as f64))
}

/// Normalized Laplacian of the product graph, `(1/P) (+)_p L_hat_p` with the
/// descending chain (the operator acting on first-index-fastest
/// vectorizations). Its spectrum stays inside `[0, 2]`; with `P = 1` the
/// input comes back unchanged.
pub fn product_normalized_laplacian<T: Scalar>(norm_laps: &[Matrix<T>]) -> Result<Matrix<T>> {
    let sum = cartesian_sum(norm_laps, true)?;
    Ok(sum.scale(T::one() / T::cast(norm_laps.len() as f64)))
}

/// Smallest eigenvalue above `zero_tol` of a symmetric PSD matrix.
///
/// Zero has multiplicity equal to the number of connected components on a
/// normalized Laplacian; every such copy is skipped, not just the first.
/// Errors with a degenerate-spectrum signal when nothing clears the
/// threshold (an edgeless graph, or a tolerance set too high).
pub fn spectral_gap<T: Scalar>(norm_lap: &Matrix<T>, zero_tol: T) -> Result<T> {
    if !(zero_tol >= T::zero() && zero_tol.is_finite()) {
        return Err(CitrusError::InvalidArgument(format!(
            "zero tolerance {zero_tol} must be finite and nonnegative"
        )));
    }
    let basis = eigh(norm_lap)?;
    basis
        .eigenvalues
        .iter()
        .copied()
        .find(|&v| v > zero_tol)
        .ok_or_else(|| {
            CitrusError::DegenerateSpectrum(format!(
                "no eigenvalue above {zero_tol}; the graph has no edges at this tolerance"
            ))
        })
}

/// Largest eigenvalue of `W^T W`: the squared top singular value of `W`.
pub fn squared_top_singular_value<T: Scalar>(w: &Matrix<T>) -> Result<T> {
    symmetric_spectral_norm(&w.matmul_tn(w))
}

/// Energy gain `s_l` of one block: the product of the squared top singular
/// values of its mixing weight and MLP chain.
pub fn block_weight_gain<T: Scalar>(block: &CitrusBlock<T>) -> Result<T> {
    let mut gain = squared_top_singular_value(&block.mix_weights)?;
    for w in &block.mlp_weights {
        gain = gain * squared_top_singular_value(w)?;
    }
    Ok(gain)
}

/// Worst-case log-energy envelope of a block stack; see the module docs for
/// the inequality it encodes.
#[derive(Clone, Debug)]
pub struct EnergyBound<T> {
    /// Weight gain `s_l` per block.
    pub per_layer_gain: Vec<T>,
    /// `s = max_l s_l`.
    pub sup_gain: T,
    /// Diffusion time at the global argmin of `t * gap`.
    pub t_tilde: T,
    /// Spectral gap at the global argmin.
    pub lambda_tilde: T,
    /// Factor index attaining the argmin (first wins on ties).
    pub argmin_factor: usize,
    /// `min` over blocks, factors, and channels of `t * gap`; equals
    /// `t_tilde * lambda_tilde`.
    pub min_time_gap: T,
    /// Line built from each block's own gain and time:
    /// entry `l` is `l * (ln s_l - (2/P) * min_{p,c} t_l^(p,c) g_p)`.
    pub per_layer_line: Vec<T>,
    /// Provably valid line: entry `l` is
    /// `l * (ln s - (2/P) * min_time_gap)`.
    pub sup_line: Vec<T>,
    /// Whether the sup-line slope is negative, forcing the energy to zero
    /// with depth.
    pub decays: bool,
    /// Shared diffusion time at which the slope changes sign,
    /// `P * ln(s) / (2 * min_p g_p)`; negative when `s < 1` (any time
    /// decays).
    pub critical_time: T,
}

/// Compute the [`EnergyBound`] of a block chain against per-factor spectral
/// gaps. Both line vectors have `blocks.len() + 1` entries with a leading 0.
pub fn oversmoothing_bound<T: Scalar>(
    blocks: &[CitrusBlock<T>],
    gaps: &[T],
) -> Result<EnergyBound<T>> {
    if blocks.is_empty() {
        return Err(CitrusError::InvalidArgument("envelope needs at least one block".into()));
    }
    if gaps.is_empty() {
        return Err(CitrusError::InvalidArgument("envelope needs at least one factor gap".into()));
    }
    for (p, &g) in gaps.iter().enumerate() {
        if !(g > T::zero() && g.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "gap {g} of factor {p} must be positive and finite"
            )));
        }
    }
    let factors = gaps.len();
    let two_over_p = T::cast(2.0 / factors as f64);

    let mut per_layer_gain = Vec::with_capacity(blocks.len());
    // Per block: (min t*gap, t, factor index).
    let mut layer_min = Vec::with_capacity(blocks.len());
    for (l, block) in blocks.iter().enumerate() {
        if block.receptive.factors != factors {
            return Err(CitrusError::InvalidArgument(format!(
                "block {l} spans {} factors, {factors} gaps given",
                block.receptive.factors
            )));
        }
        per_layer_gain.push(block_weight_gain(block)?);
        let grid = block.receptive.effective_grid();
        let mut best: Option<(T, T, usize)> = None;
        for (p, row) in grid.iter().enumerate() {
            for &t in row {
                let v = t * gaps[p];
                if best.map_or(true, |(bv, _, _)| v < bv) {
                    best = Some((v, t, p));
                }
            }
        }
        layer_min.push(best.expect("receptive grid is non-empty"));
    }

    let mut sup_gain = per_layer_gain[0];
    for &g in &per_layer_gain[1..] {
        if g > sup_gain {
            sup_gain = g;
        }
    }
    let mut global = layer_min[0];
    for &cand in &layer_min[1..] {
        if cand.0 < global.0 {
            global = cand;
        }
    }
    let (min_time_gap, t_tilde, argmin_factor) = global;
    let lambda_tilde = gaps[argmin_factor];

    let layers = blocks.len();
    let mut per_layer_line = Vec::with_capacity(layers + 1);
    let mut sup_line = Vec::with_capacity(layers + 1);
    per_layer_line.push(T::zero());
    sup_line.push(T::zero());
    let sup_slope = sup_gain.ln() - two_over_p * min_time_gap;
    for l in 1..=layers {
        let depth = T::cast(l as f64);
        let own_slope = per_layer_gain[l - 1].ln() - two_over_p * layer_min[l - 1].0;
        per_layer_line.push(depth * own_slope);
        sup_line.push(depth * sup_slope);
    }

    let mut min_gap = gaps[0];
    for &g in &gaps[1..] {
        if g < min_gap {
            min_gap = g;
        }
    }
    let critical_time = T::cast(factors as f64) * sup_gain.ln() / (T::cast(2.0) * min_gap);

    Ok(EnergyBound {
        per_layer_gain,
        sup_gain,
        t_tilde,
        lambda_tilde,
        argmin_factor,
        min_time_gap,
        per_layer_line,
        sup_line,
        decays: sup_slope < T::zero(),
        critical_time,
    })
}

/// Energies of every intermediate of a stack run, with the matching
/// envelope.
#[derive(Clone, Debug)]
pub struct EnergyReport<T> {
    /// `E(X_l)` for `l = 0 ..= blocks`; index is the number of blocks
    /// applied.
    pub energies: Vec<T>,
    /// `ln(E(X_l) / E(X_0))`; negative infinity where the energy underflowed
    /// to zero (or roundoff-negative).
    pub log_ratios: Vec<T>,
    pub bound: EnergyBound<T>,
}

/// Run `stack` block by block from `x0`, recording the Dirichlet energy of
/// every intermediate next to the worst-case envelope.
///
/// The stack's bases drive the forward passes as-is; `norm_laps` are the
/// unscaled normalized factor Laplacians defining both the energy and the
/// gaps (callers that diffuse with `L_hat_p / P` still pass `L_hat_p` here).
/// A readout, if present, is not part of the trajectory. An initial signal
/// with no energy (zero, or inside the diffusion null space) is rejected,
/// since the log ratios would be meaningless.
pub fn energy_trajectory<T: Scalar>(
    stack: &BlockStack<T>,
    x0: &DenseTensor<T>,
    norm_laps: &[Matrix<T>],
) -> Result<EnergyReport<T>> {
    stack.validate(x0.shape())?;
    if norm_laps.len() != stack.bases.len() {
        return Err(CitrusError::InvalidArgument(format!(
            "stack has {} factors, {} Laplacians given",
            stack.bases.len(),
            norm_laps.len()
        )));
    }
    let e0 = tensor_dirichlet_energy(x0, norm_laps)?;
    let scale = x0.frobenius_norm();
    let floor = T::cast(ENERGY_FLOOR) * (scale * scale).max(T::one());
    if e0 <= floor {
        return Err(CitrusError::DegenerateSpectrum(format!(
            "initial energy {e0} is numerically zero; the signal sits in the diffusion null space"
        )));
    }
    let gaps = norm_laps
        .iter()
        .map(|l| spectral_gap(l, T::cast(DEFAULT_ZERO_TOL)))
        .collect::<Result<Vec<_>>>()?;
    let bound = oversmoothing_bound(&stack.blocks, &gaps)?;

    let mut energies = Vec::with_capacity(stack.blocks.len() + 1);
    energies.push(e0);
    let mut cur = x0.clone();
    for block in &stack.blocks {
        cur = spectral_forward(&cur, &stack.bases, block)?;
        energies.push(tensor_dirichlet_energy(&cur, norm_laps)?);
    }
    let log_ratios = energies
        .iter()
        .map(|&e| if e > T::zero() { (e / e0).ln() } else { T::neg_infinity() })
        .collect();
    Ok(EnergyReport { energies, log_ratios, bound })
}

/// Two-factor random scenario for watching stack energy against its
/// envelope: seeded ER factor graphs, a chain of single-matmul ReLU blocks
/// whose width shrinks by one per layer, standard normal weights times
/// `weight_scale`, and one shared diffusion time.
///
/// Kernels act on `L_hat_p / P` (the product-normalized convention);
/// energies and gaps use the unscaled `L_hat_p`.
#[derive(Clone, Debug)]
pub struct OversmoothingConfig {
    pub n1: usize,
    pub n2: usize,
    pub edge_prob1: f64,
    pub edge_prob2: f64,
    pub layers: usize,
    /// Width of the input signal; layer `l` maps width `C - l + 1` to
    /// `C - l`, so `layers` must stay below `input_channels`.
    pub input_channels: usize,
    /// Multiplier on the standard normal weight draws; small values put the
    /// stack in the decaying regime, large ones in the growing regime.
    pub weight_scale: f64,
    /// Shared diffusion time for both factors and all layers.
    pub time: f64,
    pub seed: u64,
}

impl OversmoothingConfig {
    /// Sparse-plus-dense factors with strongly contracting weights: the
    /// envelope slope is negative and the energy collapses.
    pub fn decay_scenario() -> Self {
        OversmoothingConfig {
            n1: 10,
            n2: 15,
            edge_prob1: 0.05,
            edge_prob2: 0.95,
            layers: 10,
            input_channels: 12,
            weight_scale: 1.0 / 100.0,
            time: 1.0,
            seed: 0,
        }
    }

    /// Two sparse factors with near-unit-norm weights: the envelope slope is
    /// positive (the line grows) while the observed energy stays below it.
    pub fn loose_scenario() -> Self {
        OversmoothingConfig { edge_prob1: 0.1, edge_prob2: 0.1, weight_scale: 1.0 / 2.5, ..Self::decay_scenario() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n2 < 2 {
            return Err(CitrusError::InvalidArgument("factor graphs need at least 2 nodes".into()));
        }
        for (name, p) in [("edge_prob1", self.edge_prob1), ("edge_prob2", self.edge_prob2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CitrusError::InvalidArgument(format!("{name} {p} outside [0,1]")));
            }
        }
        if self.layers == 0 {
            return Err(CitrusError::InvalidArgument("scenario needs at least one layer".into()));
        }
        if self.input_channels <= self.layers {
            return Err(CitrusError::InvalidArgument(format!(
                "width shrinks by one per layer: {} channels cannot cover {} layers",
                self.input_channels, self.layers
            )));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "weight scale {} must be positive",
                self.weight_scale
            )));
        }
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "diffusion time {} must be positive",
                self.time
            )));
        }
        Ok(())
    }
}

/// Build and run one [`OversmoothingConfig`] scenario.
pub fn oversmoothing_scenario<T: Scalar>(cfg: &OversmoothingConfig) -> Result<EnergyReport<T>> {
    cfg.validate()?;
    let g1 = erdos_renyi::<T>(cfg.n1, cfg.edge_prob1, sub_seed(cfg.seed, 1000), false)?;
    let g2 = erdos_renyi::<T>(cfg.n2, cfg.edge_prob2, sub_seed(cfg.seed, 2000), false)?;
    let norm_laps = vec![g1.normalized_laplacian().clone(), g2.normalized_laplacian().clone()];
    let half = T::cast(0.5);
    let bases = vec![eigh(&norm_laps[0].scale(half))?, eigh(&norm_laps[1].scale(half))?];

    let mut wrng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    let raw_time = softplus_inv(T::cast(cfg.time));
    let mut blocks = Vec::with_capacity(cfg.layers);
    let mut width = cfg.input_channels;
    for _ in 0..cfg.layers {
        let next = width - 1;
        let mut w = Matrix::zeros(width, next);
        for c in 0..next {
            for r in 0..width {
                let z: f64 = StandardNormal.sample(&mut wrng);
                w.set(r, c, T::cast(z * cfg.weight_scale));
            }
        }
        blocks.push(CitrusBlock {
            receptive: ReceptiveField::with_raw(FieldMode::Scalar, 2, 1, vec![raw_time])?,
            mix_weights: w,
            mlp_weights: Vec::new(),
            activation: Activation::Relu,
            residual: false,
        });
        width = next;
    }
    let x0 = standard_normal_tensor(&[cfg.n1, cfg.n2, cfg.input_channels], sub_seed(cfg.seed, 4));
    let stack = BlockStack { blocks, readout: None, bases };
    energy_trajectory(&stack, &x0, &norm_laps)
}

/// Fixed-time diffusion stack used as a data-generating teacher: one
/// Xavier-initialized mixing matrix per layer walking through `widths`, ReLU
/// between layers, and a linear (identity-activation) last layer.
pub fn planted_stack<T: Scalar>(
    bases: Vec<SpectralBasis<T>>,
    input_channels: usize,
    widths: &[usize],
    times: &[T],
    rng: &mut impl Rng,
) -> Result<BlockStack<T>> {
    if widths.is_empty() {
        return Err(CitrusError::InvalidArgument("teacher needs at least one layer width".into()));
    }
    if times.len() != bases.len() {
        return Err(CitrusError::InvalidArgument(format!(
            "{} diffusion times for {} factors",
            times.len(),
            bases.len()
        )));
    }
    for &t in times {
        if !(t > T::zero() && t.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "diffusion time {t} must be positive"
            )));
        }
    }
    let raw: Vec<T> = times.iter().map(|&t| softplus_inv(t)).collect();
    let mut blocks = Vec::with_capacity(widths.len());
    let mut width = input_channels;
    for (l, &next) in widths.iter().enumerate() {
        if next == 0 {
            return Err(CitrusError::InvalidArgument("layer widths must be positive".into()));
        }
        let last = l + 1 == widths.len();
        blocks.push(CitrusBlock {
            receptive: ReceptiveField::with_raw(FieldMode::PerFactor, bases.len(), 1, raw.clone())?,
            mix_weights: xavier_uniform(width, next, rng),
            mlp_weights: Vec::new(),
            activation: if last { Activation::Identity } else { Activation::Relu },
            residual: false,
        });
        width = next;
    }
    Ok(BlockStack { blocks, readout: None, bases })
}

/// Perturbation-stability sweep: a fixed random teacher generates node
/// targets on clean two-factor ER graphs; per grid cell, both factor
/// adjacencies are perturbed at the cell's SNR levels and a fresh two-block
/// student is trained on the perturbed graphs against the clean targets.
#[derive(Clone, Debug)]
pub struct StabilityConfig {
    pub n1: usize,
    pub n2: usize,
    pub edge_prob1: f64,
    pub edge_prob2: f64,
    /// Teacher diffusion times per factor.
    pub time1: f64,
    pub time2: f64,
    pub input_channels: usize,
    /// Teacher layer widths; the last width is the target channel count.
    pub teacher_widths: Vec<usize>,
    /// Width of both student blocks (a linear readout maps to the target
    /// width).
    pub student_hidden: usize,
    /// SNR levels in dB applied to both factors; `infinity` means no
    /// perturbation.
    pub snr_grid_db: Vec<f64>,
    pub realizations: usize,
    /// Fraction of product nodes held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining nodes held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            n1: 20,
            n2: 30,
            edge_prob1: 0.1,
            edge_prob2: 0.1,
            time1: 2.0,
            time2: 3.0,
            input_channels: 6,
            teacher_widths: vec![5, 4, 2],
            student_hidden: 4,
            snr_grid_db: vec![f64::INFINITY, 20.0, 10.0, 0.0, -10.0],
            realizations: 10,
            test_fraction: 0.15,
            val_fraction: 0.15,
            seed: 0,
            train: TrainConfig {
                loss: LossKind::Mse,
                learning_rate: 1e-2,
                max_epochs: 200,
                patience: 30,
                ..TrainConfig::default()
            },
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n2 < 2 {
            return Err(CitrusError::InvalidArgument("factor graphs need at least 2 nodes".into()));
        }
        for (name, p) in [("edge_prob1", self.edge_prob1), ("edge_prob2", self.edge_prob2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CitrusError::InvalidArgument(format!("{name} {p} outside [0,1]")));
            }
        }
        for (name, t) in [("time1", self.time1), ("time2", self.time2)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CitrusError::InvalidArgument(format!("{name} {t} must be positive")));
            }
        }
        if self.input_channels == 0 {
            return Err(CitrusError::InvalidArgument("teacher needs at least one input channel".into()));
        }
        if self.teacher_widths.is_empty() || self.teacher_widths.contains(&0) {
            return Err(CitrusError::InvalidArgument("teacher widths must be positive and non-empty".into()));
        }
        if self.student_hidden == 0 {
            return Err(CitrusError::InvalidArgument("student width must be positive".into()));
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| s.is_nan()) {
            return Err(CitrusError::InvalidArgument("SNR grid must be non-empty and NaN-free".into()));
        }
        if self.realizations == 0 {
            return Err(CitrusError::InvalidArgument("need at least one realization".into()));
        }
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(0.0 < f && f < 1.0) {
                return Err(CitrusError::InvalidArgument(format!("{name} {f} outside (0,1)")));
            }
        }
        self.train.validate()
    }
}

/// Grid of per-cell statistics from [`stability_run`]; row index follows the
/// factor-1 SNR, column index the factor-2 SNR.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub snr_grid_db: Vec<f64>,
    pub realizations: usize,
    /// Mean test MSE of the trained student per cell.
    pub mean_test_mse: Vec<Vec<f64>>,
    /// Population standard deviation of the test MSE per cell (zero when
    /// `realizations == 1`).
    pub std_test_mse: Vec<Vec<f64>>,
    /// Mean spectral norm of the applied factor-1 perturbation per cell.
    pub mean_epsilon1: Vec<Vec<f64>>,
    pub mean_epsilon2: Vec<Vec<f64>>,
    /// Mean Frobenius deviation of the *untrained* teacher evaluated on the
    /// perturbed graphs against its clean output.
    pub mean_teacher_deviation: Vec<Vec<f64>>,
}

/// Run the perturbation-stability sweep; fully deterministic for a fixed
/// config. Realizations run sequentially and fold into the report in grid
/// order.
pub fn stability_run<T: Scalar>(cfg: &StabilityConfig) -> Result<StabilityReport> {
    cfg.validate()?;
    let grid = cfg.snr_grid_db.len();
    let out_channels = *cfg.teacher_widths.last().expect("validated non-empty");

    let mut mse = vec![vec![Vec::with_capacity(cfg.realizations); grid]; grid];
    let mut eps1 = vec![vec![0.0f64; grid]; grid];
    let mut eps2 = vec![vec![0.0f64; grid]; grid];
    let mut dev = vec![vec![0.0f64; grid]; grid];

    for r in 0..cfg.realizations {
        let rs = sub_seed(cfg.seed, r as u64);
        let g1 = erdos_renyi::<T>(cfg.n1, cfg.edge_prob1, sub_seed(rs, 1000), true)?;
        let g2 = erdos_renyi::<T>(cfg.n2, cfg.edge_prob2, sub_seed(rs, 2000), true)?;
        let clean_bases =
            vec![eigh(g1.normalized_laplacian())?, eigh(g2.normalized_laplacian())?];

        let mut trng = ChaCha8Rng::seed_from_u64(sub_seed(rs, 3));
        let teacher = planted_stack(
            clean_bases.clone(),
            cfg.input_channels,
            &cfg.teacher_widths,
            &[T::cast(cfg.time1), T::cast(cfg.time2)],
            &mut trng,
        )?;
        let x0 = standard_normal_tensor::<T>(
            &[cfg.n1, cfg.n2, cfg.input_channels],
            sub_seed(rs, 4),
        );
        let y = teacher.forward(&x0)?;

        let mut mrng = ChaCha8Rng::seed_from_u64(sub_seed(rs, 5));
        let (train_mask, val_mask, test_mask) = node_split_masks::<T>(
            &[cfg.n1, cfg.n2],
            out_channels,
            cfg.test_fraction,
            cfg.val_fraction,
            &mut mrng,
        )?;

        let mut srng = ChaCha8Rng::seed_from_u64(sub_seed(rs, 6));
        let h = cfg.student_hidden;
        let student_template = BlockStack {
            blocks: vec![
                CitrusBlock {
                    receptive: ReceptiveField::new(FieldMode::PerFactor, 2, 1)?,
                    mix_weights: xavier_uniform(cfg.input_channels, h, &mut srng),
                    mlp_weights: Vec::new(),
                    activation: Activation::Relu,
                    residual: false,
                },
                CitrusBlock {
                    receptive: ReceptiveField::new(FieldMode::PerFactor, 2, 1)?,
                    mix_weights: xavier_uniform(h, h, &mut srng),
                    mlp_weights: Vec::new(),
                    activation: Activation::Relu,
                    residual: false,
                },
            ],
            readout: Some(xavier_uniform(h, out_channels, &mut srng)),
            bases: clean_bases,
        };

        for (i, &snr1) in cfg.snr_grid_db.iter().enumerate() {
            for (j, &snr2) in cfg.snr_grid_db.iter().enumerate() {
                let cell = (i * grid + j) as u64;
                let (pg1, pert1) = perturb(&g1, snr1, sub_seed(rs, 10 + 2 * cell))?;
                let (pg2, pert2) = perturb(&g2, snr2, sub_seed(rs, 11 + 2 * cell))?;
                let pert_bases =
                    vec![eigh(pg1.normalized_laplacian())?, eigh(pg2.normalized_laplacian())?];

                let mut shifted_teacher = teacher.clone();
                shifted_teacher.bases = pert_bases.clone();
                let deviation =
                    shifted_teacher.forward(&x0)?.sub(&y).frobenius_norm().to_f64_lossy();

                let mut student = student_template.clone();
                student.bases = pert_bases;
                train_stack(&mut student, &x0, &y, &train_mask, &val_mask, &cfg.train)?;
                let test_mse =
                    masked_loss_gradient(&student.forward(&x0)?, &y, Some(&test_mask), LossKind::Mse)?
                        .0
                        .to_f64_lossy();

                mse[i][j].push(test_mse);
                eps1[i][j] += pert1.epsilon.to_f64_lossy();
                eps2[i][j] += pert2.epsilon.to_f64_lossy();
                dev[i][j] += deviation;
            }
        }
    }

    let rf = cfg.realizations as f64;
    let mut mean_test_mse = vec![vec![0.0f64; grid]; grid];
    let mut std_test_mse = vec![vec![0.0f64; grid]; grid];
    for i in 0..grid {
        for j in 0..grid {
            let samples = &mse[i][j];
            let mean = samples.iter().sum::<f64>() / rf;
            let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / rf;
            mean_test_mse[i][j] = mean;
            std_test_mse[i][j] = var.sqrt();
            eps1[i][j] /= rf;
            eps2[i][j] /= rf;
            dev[i][j] /= rf;
        }
    }

    Ok(StabilityReport {
        snr_grid_db: cfg.snr_grid_db.clone(),
        realizations: cfg.realizations,
        mean_test_mse,
        std_test_mse,
        mean_epsilon1: eps1,
        mean_epsilon2: eps2,
        mean_teacher_deviation: dev,
    })
}

/// Forward-map deviation measurement under a perturbation direction applied
/// at one scale and at double that scale.
#[derive(Clone, Copy, Debug)]
pub struct ScalingSample {
    /// Spectral norm of the factor-1 perturbation at the small scale.
    pub epsilon1: f64,
    pub epsilon2: f64,
    /// `||phi - phi_tilde||_F` at the small scale.
    pub deviation_small: f64,
    /// Same deviation with both perturbations doubled.
    pub deviation_doubled: f64,
}

impl ScalingSample {
    /// Deviation growth factor under doubling; near 2 in the linear-response
    /// regime. Meaningless (infinite or NaN) if the small deviation is zero.
    pub fn ratio(&self) -> f64 {
        self.deviation_doubled / self.deviation_small
    }
}

/// Configuration for [`perturbation_scaling`]: how large the factor graphs
/// and the fixed teacher are, and how strong the perturbation is relative to
/// each adjacency's spectral norm.
#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub n1: usize,
    pub n2: usize,
    pub edge_prob1: f64,
    pub edge_prob2: f64,
    pub time1: f64,
    pub time2: f64,
    pub input_channels: usize,
    pub teacher_widths: Vec<usize>,
    /// Perturbation size as a fraction of `||A_p||_2`; keep well below 1 so
    /// the linear-response regime applies and degrees stay positive.
    pub eps_fraction: f64,
    pub realizations: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            n1: 20,
            n2: 30,
            edge_prob1: 0.1,
            edge_prob2: 0.1,
            time1: 2.0,
            time2: 3.0,
            input_channels: 6,
            teacher_widths: vec![5, 4, 2],
            eps_fraction: 0.02,
            realizations: 20,
            seed: 0,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n2 < 2 {
            return Err(CitrusError::InvalidArgument("factor graphs need at least 2 nodes".into()));
        }
        for (name, p) in [("edge_prob1", self.edge_prob1), ("edge_prob2", self.edge_prob2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CitrusError::InvalidArgument(format!("{name} {p} outside [0,1]")));
            }
        }
        for (name, t) in [("time1", self.time1), ("time2", self.time2)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CitrusError::InvalidArgument(format!("{name} {t} must be positive")));
            }
        }
        if self.input_channels == 0 || self.teacher_widths.is_empty() || self.teacher_widths.contains(&0) {
            return Err(CitrusError::InvalidArgument("teacher widths and input channels must be positive".into()));
        }
        if !(self.eps_fraction > 0.0 && self.eps_fraction < 1.0) {
            return Err(CitrusError::InvalidArgument(format!(
                "eps fraction {} outside (0,1)",
                self.eps_fraction
            )));
        }
        if self.realizations == 0 {
            return Err(CitrusError::InvalidArgument("need at least one realization".into()));
        }
        Ok(())
    }
}

/// Measure how the forward-map deviation of an untrained teacher scales when
/// a fixed perturbation direction on each factor adjacency is doubled.
///
/// Per realization: draw clean connected ER factors and a teacher, draw one
/// symmetric zero-diagonal direction per factor scaled to spectral norm
/// `eps_fraction * ||A_p||_2`, then evaluate the teacher on the graphs
/// rebuilt from `A_p + E_p` and `A_p + 2 E_p` (no clamping, so the direction
/// is exactly preserved). Linear response predicts the deviation roughly
/// doubles.
pub fn perturbation_scaling<T: Scalar>(cfg: &ScalingConfig) -> Result<Vec<ScalingSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.realizations);
    for r in 0..cfg.realizations {
        let rs = sub_seed(cfg.seed, r as u64);
        let g1 = erdos_renyi::<T>(cfg.n1, cfg.edge_prob1, sub_seed(rs, 1000), true)?;
        let g2 = erdos_renyi::<T>(cfg.n2, cfg.edge_prob2, sub_seed(rs, 2000), true)?;
        let clean_bases =
            vec![eigh(g1.normalized_laplacian())?, eigh(g2.normalized_laplacian())?];

        let mut trng = ChaCha8Rng::seed_from_u64(sub_seed(rs, 3));
        let teacher = planted_stack(
            clean_bases,
            cfg.input_channels,
            &cfg.teacher_widths,
            &[T::cast(cfg.time1), T::cast(cfg.time2)],
            &mut trng,
        )?;
        let x0 = standard_normal_tensor::<T>(
            &[cfg.n1, cfg.n2, cfg.input_channels],
            sub_seed(rs, 4),
        );
        let y = teacher.forward(&x0)?;

        let frac = T::cast(cfg.eps_fraction);
        let graphs = [&g1, &g2];
        let mut errors = Vec::with_capacity(2);
        let mut epsilons = [0.0f64; 2];
        for (p, g) in graphs.iter().enumerate() {
            let dir = symmetric_direction::<T>(g.n(), sub_seed(rs, 5 + p as u64));
            let dir_norm = symmetric_spectral_norm(&dir)?;
            if !(dir_norm > T::zero()) {
                return Err(CitrusError::Numerical("perturbation direction is zero".into()));
            }
            let target = frac * symmetric_spectral_norm(g.adjacency())?;
            epsilons[p] = target.to_f64_lossy();
            errors.push(dir.scale(target / dir_norm));
        }

        let mut deviations = [0.0f64; 2];
        for (k, scale) in [T::one(), T::cast(2.0)].into_iter().enumerate() {
            let mut bases = Vec::with_capacity(2);
            for (g, e) in graphs.iter().zip(&errors) {
                let mut adj = g.adjacency().clone();
                adj.add_assign_scaled(e, scale);
                bases.push(eigh(&normalized_laplacian_of(&adj)?)?);
            }
            let mut shifted = teacher.clone();
            shifted.bases = bases;
            deviations[k] = shifted.forward(&x0)?.sub(&y).frobenius_norm().to_f64_lossy();
        }

        out.push(ScalingSample {
            epsilon1: epsilons[0],
            epsilon2: epsilons[1],
            deviation_small: deviations[0],
            deviation_doubled: deviations[1],
        });
    }
    Ok(out)
}

/// Which product construction an adjacency mismatch bound refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MismatchKind {
    /// Strong product vs Cartesian product: the difference is exactly
    /// `A_1 (x) A_2`, so the bound `l1 * l2` is an equality.
    Strong,
    /// Kronecker (tensor) product vs Cartesian product: the difference is
    /// `A_1 (x) A_2 - A_1 (x) I - I (x) A_2`, bounded by the triangle
    /// inequality.
    Kronecker,
}

/// Spectral-norm bound on the adjacency difference between a two-factor
/// product construction and the Cartesian product of the same factors, in
/// terms of the factor adjacency spectral norms.
pub fn mismatch_bound<T: Scalar>(kind: MismatchKind, lmax1: T, lmax2: T) -> Result<T> {
    for l in [lmax1, lmax2] {
        if !(l >= T::zero() && l.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "adjacency spectral norm {l} must be finite and nonnegative"
            )));
        }
    }
    Ok(match kind {
        MismatchKind::Strong => lmax1 * lmax2,
        MismatchKind::Kronecker => lmax1 + lmax2 + lmax1 * lmax2,
    })
}

/// iid standard normal tensor with a fixed seed.
pub fn standard_normal_tensor<T: Scalar>(shape: &[usize], seed: u64) -> DenseTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::cast(z)
        })
        .collect();
    DenseTensor::from_data(shape, data).expect("shape and data agree by construction")
}

/// Symmetric zero-diagonal standard normal matrix (upper triangle drawn
/// column by column, mirrored).
fn symmetric_direction<T: Scalar>(n: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, n);
    for j in 1..n {
        for i in 0..j {
            let z: f64 = StandardNormal.sample(&mut rng);
            m.set(i, j, T::cast(z));
            m.set(j, i, T::cast(z));
        }
    }
    m
}

/// Normalized Laplacian of a symmetric zero-diagonal adjacency that may
/// carry (slightly) negative weights, as perturbation studies produce.
/// Rows whose degree is numerically zero are zeroed like in graph
/// construction; a clearly negative degree is a numerical failure.
fn normalized_laplacian_of<T: Scalar>(adjacency: &Matrix<T>) -> Result<Matrix<T>> {
    let n = adjacency.rows();
    let tiny = T::cast(SYMMETRY_TOL) * adjacency.max_abs().max(T::one());
    let mut inv_sqrt = vec![T::zero(); n];
    let mut positive = vec![false; n];
    for r in 0..n {
        let mut deg = T::zero();
        for c in 0..n {
            deg += adjacency.get(r, c);
        }
        if deg < -tiny {
            return Err(CitrusError::Numerical(format!(
                "perturbation drove the degree of node {r} negative ({deg})"
            )));
        }
        if deg > tiny {
            inv_sqrt[r] = deg.sqrt().recip();
            positive[r] = true;
        }
    }
    let mut out = Matrix::zeros(n, n);
    for c in 0..n {
        for r in 0..n {
            if r == c {
                if positive[r] {
                    out.set(r, r, T::one());
                }
            } else {
                out.set(r, c, -adjacency.get(r, c) * inv_sqrt[r] * inv_sqrt[c]);
            }
        }
    }
    Ok(out)
}

/// Random disjoint node masks over the product grid, broadcast across
/// `channels`: test nodes first, then validation from the remainder, the
/// rest training. Fractions apply to the node count, not entries, so the
/// same nodes are held out in every channel.
pub fn node_split_masks<T: Scalar>(
    node_shape: &[usize],
    channels: usize,
    test_fraction: f64,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(DenseTensor<T>, DenseTensor<T>, DenseTensor<T>)> {
    let nodes: usize = node_shape.iter().product();
    let n_test = ((nodes as f64) * test_fraction).floor() as usize;
    let n_val = (((nodes - n_test) as f64) * val_fraction).floor() as usize;
    let n_train = nodes - n_test - n_val;
    if n_test == 0 || n_val == 0 || n_train == 0 {
        return Err(CitrusError::InvalidArgument(format!(
            "splitting {nodes} nodes leaves an empty part (train {n_train}, val {n_val}, test {n_test})"
        )));
    }
    let mut ids: Vec<usize> = (0..nodes).collect();
    ids.shuffle(rng);

    let mut shape = node_shape.to_vec();
    shape.push(channels);
    let make = |picked: &[usize]| {
        let mut m = DenseTensor::zeros(&shape);
        let data = m.as_mut_slice();
        for &id in picked {
            for c in 0..channels {
                data[id + nodes * c] = T::one();
            }
        }
        m
    };
    let test = make(&ids[..n_test]);
    let val = make(&ids[n_test..n_test + n_val]);
    let train = make(&ids[n_test + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, kron_chain, path_graph};
    use crate::tensor::vectorize;

    fn uniform_tensor(shape: &[usize], seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        DenseTensor::from_data(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn two_norm_laps(seed: u64) -> (Vec<Matrix<f64>>, Vec<usize>) {
        let g1 = erdos_renyi::<f64>(4, 0.7, seed, true).unwrap();
        let g2 = erdos_renyi::<f64>(5, 0.6, seed + 17, true).unwrap();
        (
            vec![g1.normalized_laplacian().clone(), g2.normalized_laplacian().clone()],
            vec![4, 5],
        )
    }

    #[test]
    fn energy_of_zero_tensor_is_zero() {
        let (laps, _) = two_norm_laps(1);
        let u = DenseTensor::<f64>::zeros(&[4, 5, 3]);
        assert_eq!(tensor_dirichlet_energy(&u, &laps).unwrap(), 0.0);
    }

    #[test]
    fn energy_vanishes_on_degree_scaled_constant() {
        // sqrt-degree product vectors span the null space of every factor's
        // normalized Laplacian.
        let g1 = path_graph::<f64>(4).unwrap();
        let g2 = erdos_renyi::<f64>(5, 0.7, 3, true).unwrap();
        let laps = vec![g1.normalized_laplacian().clone(), g2.normalized_laplacian().clone()];
        let u = DenseTensor::from_fn(&[4, 5, 2], |idx| {
            g1.degrees()[idx[0]].sqrt() * g2.degrees()[idx[1]].sqrt()
        });
        let e = tensor_dirichlet_energy(&u, &laps).unwrap();
        let scale = 1.0 + u.frobenius_norm().powi(2);
        assert!(e.abs() <= 1e-10 * scale, "energy {e} should vanish");
    }

    #[test]
    fn energy_matches_vectorized_quadratic_form() {
        for seed in 0..5 {
            let (laps, shape) = two_norm_laps(40 + seed);
            let u = uniform_tensor(&[shape[0], shape[1], 2], 90 + seed);
            let e = tensor_dirichlet_energy(&u, &laps).unwrap();

            // Direct evaluation on the vectorized signal with the explicit
            // product operator.
            let big = product_normalized_laplacian(&laps).unwrap();
            let channel = u.to_channel_matrix();
            let q = dot(channel.as_slice(), big.matmul(&channel).as_slice());
            assert!((e - q).abs() <= 1e-10 * q.abs().max(1.0), "seed {seed}: {e} vs {q}");
        }
    }

    #[test]
    fn energy_rejects_mismatched_shapes() {
        let (laps, _) = two_norm_laps(2);
        let u = DenseTensor::<f64>::zeros(&[4, 6, 2]);
        assert!(matches!(
            tensor_dirichlet_energy(&u, &laps),
            Err(CitrusError::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_factor_product_laplacian_is_identity_map() {
        let (laps, _) = two_norm_laps(3);
        let one = product_normalized_laplacian(&laps[..1]).unwrap();
        assert_eq!(one.max_abs_diff(&laps[0]), 0.0);
    }

    #[test]
    fn product_of_two_edges_has_pairwise_mean_spectrum() {
        let edge = path_graph::<f64>(2).unwrap();
        let laps = vec![
            edge.normalized_laplacian().clone(),
            edge.normalized_laplacian().clone(),
        ];
        let prod = product_normalized_laplacian(&laps).unwrap();
        let eigs = eigh(&prod).unwrap().eigenvalues;
        // Factor spectra are {0, 2}; the product carries all pairwise means.
        let want = [0.0, 1.0, 1.0, 2.0];
        for (got, want) in eigs.iter().zip(want) {
            assert!((got - want).abs() <= 1e-8, "{eigs:?}");
        }
    }

    #[test]
    fn product_equals_identity_minus_mean_adjacency() {
        let (laps, shape) = two_norm_laps(4);
        let prod = product_normalized_laplacian(&laps).unwrap();
        let adjs: Vec<Matrix<f64>> = laps
            .iter()
            .map(|l| Matrix::identity(l.rows()).sub(l))
            .collect();
        let mean_adj = cartesian_sum(&adjs, true).unwrap().scale(0.5);
        let want = Matrix::identity(shape[0] * shape[1]).sub(&mean_adj);
        assert!(prod.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn random_three_factor_product_spectrum_stays_in_band() {
        let g3 = erdos_renyi::<f64>(3, 0.9, 7, true).unwrap();
        let (mut laps, _) = two_norm_laps(5);
        laps.push(g3.normalized_laplacian().clone());
        let prod = product_normalized_laplacian(&laps).unwrap();
        for v in eigh(&prod).unwrap().eigenvalues {
            assert!((-1e-8..=2.0 + 1e-8).contains(&v), "eigenvalue {v} escapes [0,2]");
        }
    }

    #[test]
    fn gap_of_single_edge_is_two() {
        let edge = path_graph::<f64>(2).unwrap();
        let gap = spectral_gap(edge.normalized_laplacian(), 1e-8).unwrap();
        assert!((gap - 2.0).abs() <= 1e-10);
    }

    #[test]
    fn gap_of_triangle_is_three_halves() {
        let a = Matrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let g = build_graph(a).unwrap();
        let gap: f64 = spectral_gap(g.normalized_laplacian(), 1e-8).unwrap();
        assert!((gap - 1.5).abs() <= 1e-10);
    }

    #[test]
    fn gap_skips_repeated_zero_eigenvalues() {
        // Two disjoint edges: spectrum {0, 0, 2, 2}; the gap is 2, not the
        // second zero.
        let mut a = Matrix::zeros(4, 4);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(2, 3, 1.0);
        a.set(3, 2, 1.0);
        let g = build_graph(a).unwrap();
        let gap: f64 = spectral_gap(g.normalized_laplacian(), 1e-8).unwrap();
        assert!((gap - 2.0).abs() <= 1e-10);
    }

    #[test]
    fn gap_errors_when_spectrum_is_all_zero() {
        let zero = Matrix::<f64>::zeros(3, 3);
        assert!(matches!(
            spectral_gap(&zero, 1e-8),
            Err(CitrusError::DegenerateSpectrum(_))
        ));
    }

    #[test]
    fn squared_gain_matches_hand_values() {
        // Gram matrix of [[1,2],[3,4]] is [[10,14],[14,20]] with top
        // eigenvalue 15 + sqrt(221).
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let got = squared_top_singular_value(&w).unwrap();
        assert!((got - (15.0 + 221.0f64.sqrt())).abs() <= 1e-10);

        let rect = Matrix::<f64>::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert!((squared_top_singular_value(&rect).unwrap() - 16.0).abs() <= 1e-10);
    }

    #[test]
    fn block_gain_multiplies_chain_gains() {
        let block = CitrusBlock {
            receptive: ReceptiveField::new(FieldMode::Scalar, 2, 1).unwrap(),
            mix_weights: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            mlp_weights: vec![Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap()],
            activation: Activation::Relu,
            residual: false,
        };
        let want = (15.0 + 221.0f64.sqrt()) * 4.0;
        assert!((block_weight_gain(&block).unwrap() - want).abs() <= 1e-9 * want);
    }

    fn identity_block(t: f64, factors: usize, width: usize) -> CitrusBlock<f64> {
        CitrusBlock {
            receptive: ReceptiveField::with_raw(
                FieldMode::PerFactor,
                factors,
                1,
                vec![softplus_inv(t); factors],
            )
            .unwrap(),
            mix_weights: Matrix::identity(width),
            mlp_weights: Vec::new(),
            activation: Activation::Identity,
            residual: false,
        }
    }

    #[test]
    fn bound_arithmetic_matches_direct_formula() {
        // Unit gains, t = 1, gaps (0.5, 0.9): slope is -(2/2) * 0.5 per
        // layer.
        let blocks = vec![identity_block(1.0, 2, 2), identity_block(1.0, 2, 2)];
        let bound = oversmoothing_bound(&blocks, &[0.5, 0.9]).unwrap();
        assert_eq!(bound.argmin_factor, 0);
        assert!((bound.lambda_tilde - 0.5).abs() <= 1e-12);
        assert!((bound.t_tilde - 1.0).abs() <= 1e-9);
        assert!((bound.sup_gain - 1.0).abs() <= 1e-9);
        for (l, &v) in bound.sup_line.iter().enumerate() {
            assert!((v - (-0.5 * l as f64)).abs() <= 1e-9, "line {:?}", bound.sup_line);
        }
        for (a, b) in bound.per_layer_line.iter().zip(&bound.sup_line) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(bound.decays);
        // Unit gain puts the slope sign change at t = 0.
        assert!(bound.critical_time.abs() <= 1e-9);
    }

    #[test]
    fn bound_regime_flag_tracks_slope_sign() {
        let mk = |gain_sqrt: f64| CitrusBlock {
            receptive: ReceptiveField::with_raw(FieldMode::PerFactor, 2, 1, vec![
                softplus_inv(1.0),
                softplus_inv(1.0),
            ])
            .unwrap(),
            mix_weights: Matrix::from_rows(&[vec![gain_sqrt]]).unwrap(),
            mlp_weights: Vec::new(),
            activation: Activation::Relu,
            residual: false,
        };
        // ln(0.004) - 0.06 < 0: collapsing regime.
        let decay = oversmoothing_bound(&[mk(0.004f64.sqrt())], &[0.06, 1.0]).unwrap();
        assert!(decay.decays);
        assert!(decay.sup_line[1] < 0.0);
        // ln(7.691) - 0.07 > 0: growing envelope.
        let loose = oversmoothing_bound(&[mk(7.691f64.sqrt())], &[0.07, 1.0]).unwrap();
        assert!(!loose.decays);
        assert!(loose.sup_line[1] > 0.0);
    }

    /// Stack of pure diffusion blocks (identity weights and activation) over
    /// product-scaled bases, plus the unscaled Laplacians.
    fn diffusion_only_stack(
        times: &[f64],
        layers: usize,
        width: usize,
        seed: u64,
    ) -> (BlockStack<f64>, Vec<Matrix<f64>>) {
        let (laps, _) = two_norm_laps(seed);
        let bases: Vec<_> = laps.iter().map(|l| eigh(&l.scale(0.5)).unwrap()).collect();
        let block = CitrusBlock {
            receptive: ReceptiveField::with_raw(
                FieldMode::PerFactor,
                2,
                1,
                times.iter().map(|&t| softplus_inv(t)).collect(),
            )
            .unwrap(),
            mix_weights: Matrix::identity(width),
            mlp_weights: Vec::new(),
            activation: Activation::Identity,
            residual: false,
        };
        (BlockStack { blocks: vec![block; layers], readout: None, bases }, laps)
    }

    #[test]
    fn near_zero_time_identity_stack_keeps_energy() {
        let (stack, laps) = diffusion_only_stack(&[1e-12, 1e-12], 3, 2, 11);
        let x0 = uniform_tensor(&[4, 5, 2], 12);
        let report = energy_trajectory(&stack, &x0, &laps).unwrap();
        for (l, &r) in report.log_ratios.iter().enumerate() {
            assert!(r.abs() <= 1e-9, "layer {l}: log ratio {r} should vanish");
        }
    }

    #[test]
    fn single_kernel_layer_contracts_energy_by_gap_factor() {
        let (stack, laps) = diffusion_only_stack(&[0.7, 1.3], 1, 2, 13);
        let x0 = uniform_tensor(&[4, 5, 2], 14);
        let report = energy_trajectory(&stack, &x0, &laps).unwrap();
        let g1 = spectral_gap(&laps[0], 1e-8).unwrap();
        let g2 = spectral_gap(&laps[1], 1e-8).unwrap();
        let cap = (-(0.7 * g1).min(1.3 * g2)).exp() * report.energies[0] * (1.0 + 1e-10);
        assert!(
            report.energies[1] <= cap,
            "energy {} above kernel contraction cap {cap}",
            report.energies[1]
        );
    }

    #[test]
    fn pure_diffusion_never_raises_energy() {
        for (i, t) in [0.1, 0.5, 1.0, 5.0].into_iter().enumerate() {
            let (stack, laps) = diffusion_only_stack(&[t, t], 1, 2, 20 + i as u64);
            let x0 = uniform_tensor(&[4, 5, 2], 30 + i as u64);
            let report = energy_trajectory(&stack, &x0, &laps).unwrap();
            assert!(
                report.energies[1] <= report.energies[0] * (1.0 + 1e-10),
                "t={t}: diffusion raised energy {} -> {}",
                report.energies[0],
                report.energies[1]
            );
        }
    }

    #[test]
    fn trajectory_rejects_null_space_input() {
        let (stack, laps) = diffusion_only_stack(&[1.0, 1.0], 1, 1, 15);
        // Reconstruct the factor degree vectors from the Laplacians' source
        // graphs: reuse the same seeds as two_norm_laps.
        let g1 = erdos_renyi::<f64>(4, 0.7, 15, true).unwrap();
        let g2 = erdos_renyi::<f64>(5, 0.6, 32, true).unwrap();
        let x0 = DenseTensor::from_fn(&[4, 5, 1], |idx| {
            g1.degrees()[idx[0]].sqrt() * g2.degrees()[idx[1]].sqrt()
        });
        assert!(matches!(
            energy_trajectory(&stack, &x0, &laps),
            Err(CitrusError::DegenerateSpectrum(_))
        ));
    }

    fn scaled_normal(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
    }

    fn random_envelope_case(seed: u64) -> (BlockStack<f64>, DenseTensor<f64>, Vec<Matrix<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = if rng.gen_bool(0.5) { 2 } else { 3 };
        let mut graphs = Vec::new();
        for p in 0..factors {
            let n = rng.gen_range(3..=6);
            let prob = rng.gen_range(0.5..0.9);
            graphs.push(erdos_renyi::<f64>(n, prob, sub_seed(seed, 100 + p as u64), true).unwrap());
        }
        let norm_laps: Vec<_> = graphs.iter().map(|g| g.normalized_laplacian().clone()).collect();
        let inv_p = 1.0 / factors as f64;
        let bases: Vec<_> = norm_laps.iter().map(|l| eigh(&l.scale(inv_p)).unwrap()).collect();

        let activation = if rng.gen_bool(0.5) {
            Activation::Relu
        } else {
            Activation::LeakyRelu(rng.gen_range(0.01..0.9))
        };
        let layers = rng.gen_range(1..=8);
        let mut width = rng.gen_range(1..=5);
        let shape: Vec<usize> = graphs.iter().map(|g| g.n()).chain([width]).collect();
        let mut blocks = Vec::new();
        for _ in 0..layers {
            let mode = match rng.gen_range(0..3) {
                0 => FieldMode::Scalar,
                1 => FieldMode::PerFactor,
                _ => FieldMode::PerFactorChannel,
            };
            let channels = if mode == FieldMode::PerFactorChannel { width } else { 1 };
            let raw: Vec<f64> = (0..ReceptiveField::<f64>::raw_len(mode, factors, channels))
                .map(|_| softplus_inv(rng.gen_range(0.1..2.5)))
                .collect();
            let scale = 10f64.powf(rng.gen_range(-1.5..0.3));
            let mix = scaled_normal(width, rng.gen_range(1..=5), scale, &mut rng);
            let mut mlp = Vec::new();
            let mut w = mix.cols();
            for _ in 0..rng.gen_range(0..=2) {
                let next = rng.gen_range(1..=5);
                mlp.push(scaled_normal(w, next, scale, &mut rng));
                w = next;
            }
            blocks.push(CitrusBlock {
                receptive: ReceptiveField::with_raw(mode, factors, channels, raw).unwrap(),
                mix_weights: mix,
                mlp_weights: mlp,
                activation,
                residual: false,
            });
            width = w;
        }
        let x0 = standard_normal_tensor(&shape, sub_seed(seed, 200));
        (BlockStack { blocks, readout: None, bases }, x0, norm_laps)
    }

    #[test]
    fn random_relu_stacks_respect_energy_envelope() {
        // Proved inequality: with ReLU-like activations every depth obeys
        // E(X_l) <= exp(sup_line[l]) * E(X_0).
        for seed in 0..40 {
            let (stack, x0, laps) = random_envelope_case(500 + seed);
            let report = energy_trajectory(&stack, &x0, &laps).unwrap();
            let e0 = report.energies[0];
            for (l, &e) in report.energies.iter().enumerate() {
                assert!(e >= -1e-10, "seed {seed} layer {l}: negative energy {e}");
                let cap = report.bound.sup_line[l].exp() * e0 * (1.0 + 1e-8);
                assert!(e <= cap, "seed {seed} layer {l}: energy {e} above envelope {cap}");
            }
            let coherence =
                (report.bound.min_time_gap - report.bound.t_tilde * report.bound.lambda_tilde).abs();
            assert!(coherence <= 1e-12 * report.bound.min_time_gap.max(1.0));
            let max_gain = report
                .bound
                .per_layer_gain
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(report.bound.sup_gain, max_gain);
        }
    }

    #[test]
    fn decay_scenario_hugs_its_envelope() {
        let report = oversmoothing_scenario::<f64>(&OversmoothingConfig::decay_scenario()).unwrap();
        assert_eq!(report.energies.len(), 11);
        assert!(report.bound.decays, "contracting weights must give a negative slope");
        for l in 1..report.log_ratios.len() {
            assert!(
                report.log_ratios[l] < report.log_ratios[l - 1],
                "log ratios should fall monotonically: {:?}",
                report.log_ratios
            );
            assert!(
                report.log_ratios[l] <= report.bound.sup_line[l],
                "observed {} above envelope {} at layer {l}",
                report.log_ratios[l],
                report.bound.sup_line[l]
            );
        }
        for &e in &report.energies {
            assert!(e >= -1e-10);
        }
    }

    #[test]
    fn loose_scenario_reports_growing_envelope() {
        let report = oversmoothing_scenario::<f64>(&OversmoothingConfig::loose_scenario()).unwrap();
        assert!(!report.bound.decays, "near-unit weights should give a positive slope");
        assert!(report.bound.sup_line[10] > 0.0);
        for l in 0..report.log_ratios.len() {
            assert!(
                report.log_ratios[l] <= report.bound.sup_line[l],
                "observed {} above envelope {} at layer {l}",
                report.log_ratios[l],
                report.bound.sup_line[l]
            );
        }
    }

    #[test]
    fn strong_product_mismatch_is_exactly_the_gain_product() {
        for seed in 0..4 {
            let g1 = erdos_renyi::<f64>(4, 0.6, 200 + seed, true).unwrap();
            let g2 = erdos_renyi::<f64>(5, 0.5, 300 + seed, true).unwrap();
            let l1 = symmetric_spectral_norm(g1.adjacency()).unwrap();
            let l2 = symmetric_spectral_norm(g2.adjacency()).unwrap();
            // Strong minus Cartesian adjacency is exactly the Kronecker
            // product of the factors.
            let diff = kron_chain(&[g1.adjacency().clone(), g2.adjacency().clone()], true).unwrap();
            let got = symmetric_spectral_norm(&diff).unwrap();
            let want = mismatch_bound(MismatchKind::Strong, l1, l2).unwrap();
            assert!((got - want).abs() <= 1e-8 * want.max(1.0), "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn kronecker_mismatch_respects_triangle_bound() {
        for seed in 0..4 {
            let g1 = erdos_renyi::<f64>(4, 0.6, 400 + seed, true).unwrap();
            let g2 = erdos_renyi::<f64>(5, 0.5, 500 + seed, true).unwrap();
            let a1 = g1.adjacency().clone();
            let a2 = g2.adjacency().clone();
            let kron = kron_chain(&[a1.clone(), a2.clone()], true).unwrap();
            let cart = cartesian_sum(&[a1.clone(), a2.clone()], true).unwrap();
            let got = symmetric_spectral_norm(&kron.sub(&cart)).unwrap();
            let l1 = symmetric_spectral_norm(&a1).unwrap();
            let l2 = symmetric_spectral_norm(&a2).unwrap();
            let bound = mismatch_bound(MismatchKind::Kronecker, l1, l2).unwrap();
            assert!(got <= bound + 1e-8, "seed {seed}: {got} above {bound}");
        }
    }

    #[test]
    fn mismatch_bound_handles_edge_values() {
        assert_eq!(mismatch_bound(MismatchKind::Strong, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(mismatch_bound(MismatchKind::Kronecker, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(mismatch_bound(MismatchKind::Strong, 2.0, 3.0).unwrap(), 6.0);
        assert!(matches!(
            mismatch_bound(MismatchKind::Strong, -1.0, 2.0),
            Err(CitrusError::InvalidArgument(_))
        ));
    }

    #[test]
    fn planted_stack_wires_widths_and_times() {
        let g1 = path_graph::<f64>(3).unwrap();
        let g2 = path_graph::<f64>(4).unwrap();
        let bases = vec![
            eigh(g1.normalized_laplacian()).unwrap(),
            eigh(g2.normalized_laplacian()).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = planted_stack(bases, 3, &[3, 2], &[1.5, 0.5], &mut rng).unwrap();
        assert_eq!(stack.blocks.len(), 2);
        assert_eq!(stack.blocks[0].activation, Activation::Relu);
        assert_eq!(stack.blocks[1].activation, Activation::Identity);
        let grid = stack.blocks[0].receptive.effective_grid();
        assert!((grid[0][0] - 1.5).abs() <= 1e-9);
        assert!((grid[1][0] - 0.5).abs() <= 1e-9);
        let out = stack.forward(&uniform_tensor(&[3, 4, 3], 10)).unwrap();
        assert_eq!(out.shape(), &[3, 4, 2]);
    }

    #[test]
    fn split_masks_are_disjoint_and_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (train, val, test) =
            node_split_masks::<f64>(&[4, 5], 2, 0.15, 0.15, &mut rng).unwrap();
        // 20 nodes: 3 test, floor(0.15 * 17) = 2 val, 15 train.
        assert_eq!(test.as_slice().iter().sum::<f64>(), 6.0);
        assert_eq!(val.as_slice().iter().sum::<f64>(), 4.0);
        assert_eq!(train.as_slice().iter().sum::<f64>(), 30.0);
        for i in 0..train.numel() {
            let stack = train.as_slice()[i] + val.as_slice()[i] + test.as_slice()[i];
            assert_eq!(stack, 1.0, "masks must partition every entry");
        }
        // Broadcast across channels: both channel slices of a node agree.
        let v = vectorize(&train);
        assert_eq!(&v[..20], &v[20..]);
    }

    fn smoke_stability_config() -> StabilityConfig {
        StabilityConfig {
            n1: 4,
            n2: 5,
            edge_prob1: 0.7,
            edge_prob2: 0.7,
            time1: 1.0,
            time2: 1.2,
            input_channels: 3,
            teacher_widths: vec![3, 2],
            student_hidden: 3,
            snr_grid_db: vec![f64::INFINITY, 0.0],
            realizations: 1,
            test_fraction: 0.15,
            val_fraction: 0.15,
            seed: 7,
            train: TrainConfig {
                loss: LossKind::Mse,
                learning_rate: 1e-2,
                max_epochs: 30,
                patience: 30,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn stability_smoke_grid_is_complete_and_clean_cell_is_exact() {
        let cfg = smoke_stability_config();
        let report = stability_run::<f64>(&cfg).unwrap();
        assert_eq!(report.mean_test_mse.len(), 2);
        assert_eq!(report.mean_test_mse[0].len(), 2);
        // No perturbation: identical bases, so the teacher deviation and
        // epsilons are exactly zero.
        assert_eq!(report.mean_teacher_deviation[0][0], 0.0);
        assert_eq!(report.mean_epsilon1[0][0], 0.0);
        assert_eq!(report.mean_epsilon2[0][0], 0.0);
        assert!(report.mean_epsilon1[1][1] > 0.0);
        assert!(report.mean_teacher_deviation[1][1] > 0.0);
        for row in &report.mean_test_mse {
            for &v in row {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
        // One realization: the spread collapses.
        assert_eq!(report.std_test_mse[0][0], 0.0);
    }

    #[test]
    fn stability_run_is_deterministic() {
        let cfg = smoke_stability_config();
        let a = stability_run::<f64>(&cfg).unwrap();
        let b = stability_run::<f64>(&cfg).unwrap();
        assert_eq!(a.mean_test_mse, b.mean_test_mse);
        assert_eq!(a.std_test_mse, b.std_test_mse);
        assert_eq!(a.mean_teacher_deviation, b.mean_teacher_deviation);
    }

    #[test]
    fn scaling_samples_grow_under_doubling() {
        let cfg = ScalingConfig {
            n1: 8,
            n2: 9,
            edge_prob1: 0.5,
            edge_prob2: 0.5,
            time1: 1.0,
            time2: 1.5,
            input_channels: 3,
            teacher_widths: vec![3, 2],
            eps_fraction: 0.03,
            realizations: 3,
            seed: 5,
        };
        let samples = perturbation_scaling::<f64>(&cfg).unwrap();
        assert_eq!(samples.len(), 3);
        for (i, s) in samples.iter().enumerate() {
            assert!(s.epsilon1 > 0.0 && s.epsilon2 > 0.0);
            assert!(s.deviation_small > 0.0, "sample {i}: perturbation had no effect");
            assert!(
                s.deviation_doubled > s.deviation_small,
                "sample {i}: doubling should grow the deviation ({} vs {})",
                s.deviation_doubled,
                s.deviation_small
            );
            assert!(s.ratio().is_finite());
        }
    }
}
