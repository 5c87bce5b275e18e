//! Diffusion layers on product graphs and the windowed forecasting model.
//!
//! One block applies, in order: the separable spectral heat filter (per-mode
//! transforms into each factor eigenbasis, an elementwise filter, transforms
//! back), a channel-mixing weight, an activation, an optional activation/MLP
//! chain, and an optional residual connection. The product eigenvector matrix
//! is never materialized; every transform is a per-mode product with a factor
//! basis, so the spectral part costs `O(sum_p N_p^2 K_p)` per channel.
//!
//! Three routes compute the same linear diffusion and are tested against each
//! other: [`core_tensor_forward`] (dense per-factor kernels),
//! [`spectral_forward`] with full bases, and [`tpdeg_integrate`] (RK4 on the
//! underlying tensor PDE `dU/dt = -sum_p U x_p L_p`).

use rand::Rng;

use crate::error::{CitrusError, Result};
use crate::scalar::{softplus, softplus_inv, Scalar};
use crate::spectral::{heat_kernel_dense, product_filter, FilterTimes, SpectralBasis};
use crate::tensor::{mode_product, DenseTensor, Matrix};

/// Pointwise nonlinearity applied inside a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation<T> {
    Identity,
    Relu,
    /// Leaky rectifier with the given negative-side slope.
    LeakyRelu(T),
}

impl<T: Scalar> Activation<T> {
    pub fn apply(&self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(a) => {
                if x > T::zero() {
                    x
                } else {
                    *a * x
                }
            }
        }
    }

    /// Pointwise derivative; at the kink, ReLU takes 0 and the leaky variant
    /// takes its negative-side slope.
    pub fn derivative(&self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(a) => {
                if x > T::zero() {
                    T::one()
                } else {
                    *a
                }
            }
        }
    }
}

/// Granularity of the learnable diffusion times.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldMode {
    /// One time shared by all factors and channels.
    Scalar,
    /// One time per factor.
    PerFactor,
    /// One time per (factor, channel) pair.
    PerFactorChannel,
}

/// Learnable diffusion times, stored unconstrained and mapped through
/// softplus so every effective time is positive.
#[derive(Clone, Debug)]
pub struct ReceptiveField<T> {
    pub mode: FieldMode,
    /// Unconstrained parameters; layout for `PerFactorChannel` is
    /// `p * channels + c`.
    pub raw: Vec<T>,
    pub factors: usize,
    /// Channel count the field is tied to (1 unless per-channel).
    pub channels: usize,
}

impl<T: Scalar> ReceptiveField<T> {
    /// Parameter count for a mode: 1, P, or P*C.
    pub fn raw_len(mode: FieldMode, factors: usize, channels: usize) -> usize {
        match mode {
            FieldMode::Scalar => 1,
            FieldMode::PerFactor => factors,
            FieldMode::PerFactorChannel => factors * channels,
        }
    }

    /// Field with every effective time initialized to 1.
    pub fn new(mode: FieldMode, factors: usize, channels: usize) -> Result<Self> {
        let raw = vec![softplus_inv(T::one()); Self::raw_len(mode, factors, channels)];
        Self::with_raw(mode, factors, channels, raw)
    }

    pub fn with_raw(mode: FieldMode, factors: usize, channels: usize, raw: Vec<T>) -> Result<Self> {
        if factors == 0 {
            return Err(CitrusError::InvalidArgument("receptive field needs at least one factor".into()));
        }
        let channels = match mode {
            FieldMode::PerFactorChannel => {
                if channels == 0 {
                    return Err(CitrusError::InvalidArgument(
                        "per-channel receptive field needs at least one channel".into(),
                    ));
                }
                channels
            }
            _ => 1,
        };
        let want = Self::raw_len(mode, factors, channels);
        if raw.len() != want {
            return Err(CitrusError::InvalidArgument(format!(
                "receptive field raw length {} does not match mode (expected {want})",
                raw.len()
            )));
        }
        Ok(ReceptiveField { mode, raw, factors, channels })
    }

    /// Effective positive times in the shape the spectral filter consumes.
    pub fn filter_times(&self) -> FilterTimes<T> {
        match self.mode {
            FieldMode::Scalar => FilterTimes::Scalar(softplus(self.raw[0])),
            FieldMode::PerFactor => FilterTimes::PerFactor(self.raw.iter().map(|&r| softplus(r)).collect()),
            FieldMode::PerFactorChannel => FilterTimes::PerFactorChannel(
                (0..self.factors)
                    .map(|p| {
                        (0..self.channels)
                            .map(|c| softplus(self.raw[p * self.channels + c]))
                            .collect()
                    })
                    .collect(),
            ),
        }
    }

    /// Effective times as a dense P x C table (scalar and per-factor modes
    /// broadcast to one column).
    pub fn effective_grid(&self) -> Vec<Vec<T>> {
        match self.mode {
            FieldMode::Scalar => vec![vec![softplus(self.raw[0])]; self.factors],
            FieldMode::PerFactor => self.raw.iter().map(|&r| vec![softplus(r)]).collect(),
            FieldMode::PerFactorChannel => (0..self.factors)
                .map(|p| {
                    (0..self.channels)
                        .map(|c| softplus(self.raw[p * self.channels + c]))
                        .collect()
                })
                .collect(),
        }
    }
}

/// One diffusion block: filter, channel mix, activation, optional MLP chain,
/// optional residual.
#[derive(Clone, Debug)]
pub struct CitrusBlock<T> {
    pub receptive: ReceptiveField<T>,
    /// `F_in x F_out` channel-mixing weight.
    pub mix_weights: Matrix<T>,
    /// Chain applied after the first activation; each step is matmul then
    /// activation.
    pub mlp_weights: Vec<Matrix<T>>,
    pub activation: Activation<T>,
    pub residual: bool,
}

impl<T: Scalar> CitrusBlock<T> {
    pub fn in_channels(&self) -> usize {
        self.mix_weights.rows()
    }

    pub fn out_channels(&self) -> usize {
        self.mlp_weights.last().map_or(self.mix_weights.cols(), Matrix::cols)
    }

    /// Check internal conformability against a factor count.
    pub fn validate(&self, factors: usize) -> Result<()> {
        if self.receptive.factors != factors {
            return Err(CitrusError::InvalidArgument(format!(
                "receptive field spans {} factors, block sees {factors}",
                self.receptive.factors
            )));
        }
        if self.receptive.mode == FieldMode::PerFactorChannel
            && self.receptive.channels != self.in_channels()
        {
            return Err(CitrusError::InvalidArgument(format!(
                "per-channel receptive field has {} channels, block input has {}",
                self.receptive.channels,
                self.in_channels()
            )));
        }
        let mut width = self.mix_weights.cols();
        for (h, w) in self.mlp_weights.iter().enumerate() {
            if w.rows() != width {
                return Err(CitrusError::InvalidArgument(format!(
                    "MLP weight {h} expects {} input channels, got {width}",
                    w.rows()
                )));
            }
            width = w.cols();
        }
        if self.residual && self.out_channels() != self.in_channels() {
            return Err(CitrusError::InvalidArgument(format!(
                "residual block must preserve width: {} in, {} out",
                self.in_channels(),
                self.out_channels()
            )));
        }
        Ok(())
    }
}

/// Encoder, block chain, and decoder over a fixed set of factor bases.
///
/// The decoder consumes, per factor-1 node, the channel concatenation of the
/// raw input window (first) and the last block output (second), flattened
/// with mode 2 fastest and channels slowest.
#[derive(Clone, Debug)]
pub struct CitrusModel<T> {
    pub encoder: Matrix<T>,
    pub blocks: Vec<CitrusBlock<T>>,
    pub decoder: Matrix<T>,
    pub bases: Vec<SpectralBasis<T>>,
}

impl<T: Scalar> CitrusModel<T> {
    /// Number of output steps per factor-1 node.
    pub fn horizon(&self) -> usize {
        self.decoder.cols()
    }

    /// Validate against an input window shape `[N_1, ..., N_P, F_in]`.
    pub fn validate(&self, window_shape: &[usize]) -> Result<()> {
        if window_shape.len() < 3 {
            return Err(CitrusError::InvalidArgument(format!(
                "model input must have at least two factors plus channels, got shape {window_shape:?}"
            )));
        }
        let p = window_shape.len() - 1;
        if self.bases.len() != p {
            return Err(CitrusError::InvalidArgument(format!(
                "model holds {} bases for a {p}-factor window",
                self.bases.len()
            )));
        }
        for (i, b) in self.bases.iter().enumerate() {
            if b.source_n != window_shape[i] {
                return Err(CitrusError::InvalidArgument(format!(
                    "factor {i} has {} nodes, basis was built for {}",
                    window_shape[i], b.source_n
                )));
            }
        }
        if self.blocks.is_empty() {
            return Err(CitrusError::InvalidArgument("model needs at least one block".into()));
        }
        let f_in = window_shape[p];
        if self.encoder.rows() != f_in {
            return Err(CitrusError::InvalidArgument(format!(
                "encoder expects {} input channels, window has {f_in}",
                self.encoder.rows()
            )));
        }
        let mut width = self.encoder.cols();
        for (i, block) in self.blocks.iter().enumerate() {
            block.validate(p)?;
            if block.in_channels() != width {
                return Err(CitrusError::InvalidArgument(format!(
                    "block {i} expects {} channels, got {width}",
                    block.in_channels()
                )));
            }
            width = block.out_channels();
        }
        let rest: usize = window_shape[1..p].iter().product();
        let want_rows = rest * (f_in + width);
        if self.decoder.rows() != want_rows {
            return Err(CitrusError::InvalidArgument(format!(
                "decoder has {} rows, flattened concatenation needs {want_rows}",
                self.decoder.rows()
            )));
        }
        Ok(())
    }
}

/// Block chain without encoder/decoder, with an optional linear channel
/// readout after the last block. Used by the synthetic experiment tasks.
#[derive(Clone, Debug)]
pub struct BlockStack<T> {
    pub blocks: Vec<CitrusBlock<T>>,
    pub readout: Option<Matrix<T>>,
    pub bases: Vec<SpectralBasis<T>>,
}

/// Intermediates of one stack evaluation, for reverse-mode gradients.
pub struct StackCache<T> {
    /// `inputs[i]` is the input to block `i`; one entry per block.
    pub inputs: Vec<DenseTensor<T>>,
    pub caches: Vec<BlockCache<T>>,
    /// Output of the last block (input to the readout, if any).
    pub pre_readout: DenseTensor<T>,
}

impl<T: Scalar> BlockStack<T> {
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 2 {
            return Err(CitrusError::InvalidArgument("stack input needs factor modes plus channels".into()));
        }
        let p = shape.len() - 1;
        if self.bases.len() != p {
            return Err(CitrusError::InvalidArgument(format!(
                "stack holds {} bases for a {p}-factor tensor",
                self.bases.len()
            )));
        }
        for (i, b) in self.bases.iter().enumerate() {
            if b.source_n != shape[i] {
                return Err(CitrusError::InvalidArgument(format!(
                    "factor {i} has {} nodes, basis was built for {}",
                    shape[i], b.source_n
                )));
            }
        }
        if self.blocks.is_empty() {
            return Err(CitrusError::InvalidArgument("stack needs at least one block".into()));
        }
        let mut width = shape[p];
        for (i, block) in self.blocks.iter().enumerate() {
            block.validate(p)?;
            if block.in_channels() != width {
                return Err(CitrusError::InvalidArgument(format!(
                    "stack block {i} expects {} channels, got {width}",
                    block.in_channels()
                )));
            }
            width = block.out_channels();
        }
        if let Some(r) = &self.readout {
            if r.rows() != width {
                return Err(CitrusError::InvalidArgument(format!(
                    "readout expects {} channels, last block emits {width}",
                    r.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, u: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        Ok(self.forward_cached(u)?.0)
    }

    pub fn forward_cached(&self, u: &DenseTensor<T>) -> Result<(DenseTensor<T>, StackCache<T>)> {
        self.validate(u.shape())?;
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = u.clone();
        for block in &self.blocks {
            let (out, cache) = spectral_forward_cached(&cur, &self.bases, block)?;
            inputs.push(cur);
            caches.push(cache);
            cur = out;
        }
        let pre_readout = cur.clone();
        if let Some(r) = &self.readout {
            cur = channel_matmul(&cur, r)?;
        }
        Ok((cur, StackCache { inputs, caches, pre_readout }))
    }
}

/// Multiply along the channel (last) mode: `out[..., g] = sum_f u[..., f] W[f, g]`.
pub fn channel_matmul<T: Scalar>(u: &DenseTensor<T>, w: &Matrix<T>) -> Result<DenseTensor<T>> {
    let m = u.to_channel_matrix();
    if m.cols() != w.rows() {
        return Err(CitrusError::InvalidArgument(format!(
            "channel mix: tensor has {} channels, weight has {} rows",
            m.cols(),
            w.rows()
        )));
    }
    DenseTensor::from_channel_matrix(&u.shape()[..u.order() - 1], &m.matmul(w))
}

/// Dense reference forward: per-mode heat kernels then channel mixing,
/// `U x_1 exp(-t L_1) ... x_P exp(-t L_P) x_{P+1} W^T`.
pub fn core_tensor_forward<T: Scalar>(
    u: &DenseTensor<T>,
    laplacians: &[Matrix<T>],
    t: T,
    w: &Matrix<T>,
) -> Result<DenseTensor<T>> {
    if u.order() != laplacians.len() + 1 {
        return Err(CitrusError::InvalidArgument(format!(
            "tensor of order {} needs {} factor Laplacians, got {}",
            u.order(),
            u.order() - 1,
            laplacians.len()
        )));
    }
    let mut cur = u.clone();
    for (p, l) in laplacians.iter().enumerate() {
        if l.rows() != u.shape()[p] {
            return Err(CitrusError::InvalidArgument(format!(
                "mode {p} has size {}, Laplacian is {}x{}",
                u.shape()[p],
                l.rows(),
                l.cols()
            )));
        }
        let kernel = heat_kernel_dense(l, t)?;
        cur = mode_product(&cur, &kernel, p)?;
    }
    channel_matmul(&cur, w)
}

/// Intermediates of one block evaluation, for reverse-mode gradients.
pub struct BlockCache<T> {
    /// Spectral coefficients before filtering (`K_1 x ... x K_P x F`).
    pub xhat: DenseTensor<T>,
    /// The filter matrix (`prod K_p` rows; one column, or one per channel).
    pub filter: Matrix<T>,
    /// Whether filter columns are per-channel.
    pub per_channel: bool,
    /// Back-transformed tensor before channel mixing.
    pub z: DenseTensor<T>,
    /// Pre-activation tensors, one per activation site (mix output first,
    /// then each MLP matmul output).
    pub pre_acts: Vec<DenseTensor<T>>,
    /// Post-activation tensors, same indexing.
    pub acts: Vec<DenseTensor<T>>,
}

pub(crate) fn apply_filter<T: Scalar>(xhat: &DenseTensor<T>, filter: &Matrix<T>, per_channel: bool) -> DenseTensor<T> {
    let channels = *xhat.shape().last().expect("non-empty shape");
    let lead = xhat.numel() / channels.max(1);
    let mut out = xhat.clone();
    let data = out.as_mut_slice();
    for c in 0..channels {
        let fc = filter.col(if per_channel { c } else { 0 });
        for (v, &f) in data[c * lead..(c + 1) * lead].iter_mut().zip(fc) {
            *v *= f;
        }
    }
    out
}

/// Spectral block forward; see the module docs for the operation order.
pub fn spectral_forward<T: Scalar>(
    u: &DenseTensor<T>,
    bases: &[SpectralBasis<T>],
    block: &CitrusBlock<T>,
) -> Result<DenseTensor<T>> {
    Ok(spectral_forward_cached(u, bases, block)?.0)
}

/// As [`spectral_forward`], additionally returning every intermediate the
/// backward pass needs.
pub fn spectral_forward_cached<T: Scalar>(
    u: &DenseTensor<T>,
    bases: &[SpectralBasis<T>],
    block: &CitrusBlock<T>,
) -> Result<(DenseTensor<T>, BlockCache<T>)> {
    if u.order() != bases.len() + 1 {
        return Err(CitrusError::InvalidArgument(format!(
            "tensor of order {} needs {} bases, got {}",
            u.order(),
            u.order() - 1,
            bases.len()
        )));
    }
    block.validate(bases.len())?;
    let channels = *u.shape().last().expect("non-empty shape");
    if channels != block.in_channels() {
        return Err(CitrusError::InvalidArgument(format!(
            "block expects {} channels, tensor has {channels}",
            block.in_channels()
        )));
    }

    // Into each factor eigenbasis, one mode at a time.
    let mut xhat = u.clone();
    for (p, b) in bases.iter().enumerate() {
        xhat = mode_product(&xhat, &b.eigenvectors.transpose(), p)?;
    }

    let times = block.receptive.filter_times();
    let per_channel = matches!(times, FilterTimes::PerFactorChannel(_));
    let filter = product_filter(bases, &times)?;
    let filtered = apply_filter(&xhat, &filter, per_channel);

    // Back to the node domain.
    let mut z = filtered;
    for (p, b) in bases.iter().enumerate() {
        z = mode_product(&z, &b.eigenvectors, p)?;
    }

    let mixed = channel_matmul(&z, &block.mix_weights)?;
    let mut pre_acts = vec![mixed];
    let mut acts = vec![pre_acts[0].map(|x| block.activation.apply(x))];
    for w in &block.mlp_weights {
        let pre = channel_matmul(acts.last().expect("non-empty"), w)?;
        acts.push(pre.map(|x| block.activation.apply(x)));
        pre_acts.push(pre);
    }

    let mut out = acts.last().expect("non-empty").clone();
    if block.residual {
        out = out.add(u);
    }
    if !out.all_finite() {
        return Err(CitrusError::Numerical("block forward produced non-finite values".into()));
    }
    Ok((out, BlockCache { xhat, filter, per_channel, z, pre_acts, acts }))
}

/// Full model forward: encode, run blocks, concatenate window and block
/// output along channels, decode per factor-1 node.
pub fn model_forward<T: Scalar>(window: &DenseTensor<T>, model: &CitrusModel<T>) -> Result<DenseTensor<T>> {
    Ok(model_forward_cached(window, model)?.0)
}

/// Intermediates of one model evaluation.
pub struct ModelCache<T> {
    /// `block_io[0]` is the encoder output; `block_io[i]` the output of
    /// block `i-1`.
    pub block_io: Vec<DenseTensor<T>>,
    pub caches: Vec<BlockCache<T>>,
    /// Channel concatenation (window first, block output second).
    pub concat: DenseTensor<T>,
}

/// As [`model_forward`], returning the cache for the backward pass.
pub fn model_forward_cached<T: Scalar>(
    window: &DenseTensor<T>,
    model: &CitrusModel<T>,
) -> Result<(DenseTensor<T>, ModelCache<T>)> {
    model.validate(window.shape())?;
    let encoded = channel_matmul(window, &model.encoder)?;
    let mut block_io = vec![encoded];
    let mut caches = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let (out, cache) = spectral_forward_cached(block_io.last().expect("non-empty"), &model.bases, block)?;
        block_io.push(out);
        caches.push(cache);
    }
    let concat = window.concat_channels(block_io.last().expect("non-empty"))?;

    // Per factor-1 node, the flattened remaining modes form a row of a
    // column-major (N_1 x rest) matrix over the same storage.
    let n1 = window.shape()[0];
    let rest = concat.numel() / n1;
    let m = Matrix::from_col_major(n1, rest, concat.as_slice().to_vec())?;
    let pred = m.matmul(&model.decoder);
    let out = DenseTensor::from_data(&[n1, model.decoder.cols()], pred.into_data())?;
    Ok((out, ModelCache { block_io, caches, concat }))
}

/// Integrate `dU/dt = -sum_p U x_p L_p` with classic fourth-order
/// Runge-Kutta from 0 to `t_end` in steps of (approximately) `dt`.
pub fn tpdeg_integrate<T: Scalar>(
    u0: &DenseTensor<T>,
    laplacians: &[Matrix<T>],
    t_end: T,
    dt: T,
) -> Result<DenseTensor<T>> {
    if u0.order() != laplacians.len() + 1 {
        return Err(CitrusError::InvalidArgument(format!(
            "tensor of order {} needs {} factor Laplacians, got {}",
            u0.order(),
            u0.order() - 1,
            laplacians.len()
        )));
    }
    for (p, l) in laplacians.iter().enumerate() {
        if l.rows() != u0.shape()[p] || !l.is_square() {
            return Err(CitrusError::InvalidArgument(format!(
                "mode {p} has size {}, Laplacian is {}x{}",
                u0.shape()[p],
                l.rows(),
                l.cols()
            )));
        }
    }
    if t_end < T::zero() {
        return Err(CitrusError::InvalidArgument(format!("negative end time {t_end}")));
    }
    if dt <= T::zero() {
        return Err(CitrusError::InvalidArgument(format!("step size {dt} must be positive")));
    }
    if t_end == T::zero() {
        return Ok(u0.clone());
    }

    let deriv = |u: &DenseTensor<T>| -> Result<DenseTensor<T>> {
        let mut acc = DenseTensor::zeros(u.shape());
        for (p, l) in laplacians.iter().enumerate() {
            acc = acc.add(&mode_product(u, l, p)?);
        }
        Ok(acc.scale(-T::one()))
    };

    let steps = (t_end / dt).round().to_f64_lossy().max(1.0) as usize;
    let h = t_end / T::cast(steps as f64);
    let half = h * T::cast(0.5);
    let sixth = h / T::cast(6.0);
    let two = T::cast(2.0);

    let mut u = u0.clone();
    for _ in 0..steps {
        let k1 = deriv(&u)?;
        let k2 = deriv(&u.add(&k1.scale(half)))?;
        let k3 = deriv(&u.add(&k2.scale(half)))?;
        let k4 = deriv(&u.add(&k3.scale(h)))?;
        let incr = k1.add(&k2.scale(two)).add(&k3.scale(two)).add(&k4);
        u = u.add(&incr.scale(sixth));
    }
    if !u.all_finite() {
        return Err(CitrusError::Numerical("RK4 trajectory left the finite range".into()));
    }
    Ok(u)
}

/// Uniform fan-balanced weight initialization on `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`. Samples are drawn in `f64` and cast,
/// so trajectories agree across scalar types.
pub fn xavier_uniform<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::cast(rng.gen_range(-a..a)));
    }
    Matrix::from_col_major(rows, cols, data).expect("length matches by construction")
}
