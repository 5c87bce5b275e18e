//! Losses, exact reverse-mode gradients through the spectral forward pass,
//! finite-difference verification, Adam, and deterministic training loops.
//!
//! The one non-mechanical derivative is the diffusion time: with spectral
//! coefficients `Xhat`, filter `F[r,c] = exp(-sum_p t^(p,c) lambda_p[r_p])`,
//! and upstream spectral gradient `G = d(loss)/d(F . Xhat)`, the time
//! gradient is `d(loss)/dt^(p,c) = -sum_r G[r,c] Xhat[r,c] F[r,c]
//! lambda_p[r_p]`, chained through the softplus reparameterization by a
//! sigmoid factor. Everything else is matrix calculus over the channel
//! unfoldings plus mode-product adjoints (multiply by the transposed basis).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CitrusError, Result};
use crate::layer::{
    apply_filter, model_forward, model_forward_cached, BlockCache, BlockStack, CitrusBlock,
    CitrusModel, FieldMode,
};
use crate::scalar::{sigmoid, Scalar};
use crate::spectral::SpectralBasis;
use crate::tensor::{mode_product, DenseTensor, Matrix};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mae,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = CitrusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            other => Err(CitrusError::InvalidArgument(format!(
                "unknown loss {other:?} (expected mae|mse)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        })
    }
}

/// Mean loss over all entries.
pub fn loss<T: Scalar>(pred: &DenseTensor<T>, target: &DenseTensor<T>, kind: LossKind) -> Result<T> {
    Ok(masked_loss_gradient(pred, target, None, kind)?.0)
}

/// Loss value and gradient with respect to the prediction. With a mask, each
/// entry is weighted and the normalizer is the total mask weight.
///
/// The MAE subgradient at an exactly zero residual is taken as 0.
pub fn masked_loss_gradient<T: Scalar>(
    pred: &DenseTensor<T>,
    target: &DenseTensor<T>,
    mask: Option<&DenseTensor<T>>,
    kind: LossKind,
) -> Result<(T, DenseTensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(CitrusError::InvalidArgument(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != pred.shape() {
            return Err(CitrusError::InvalidArgument(format!(
                "mask shape {:?} does not match prediction {:?}",
                m.shape(),
                pred.shape()
            )));
        }
    }
    let denom = match mask {
        None => T::cast(pred.numel() as f64),
        Some(m) => m.as_slice().iter().copied().sum(),
    };
    if denom <= T::zero() {
        return Err(CitrusError::InvalidArgument("loss normalizer is not positive (empty mask?)".into()));
    }

    let mut value = T::zero();
    let mut grad = DenseTensor::zeros(pred.shape());
    let g = grad.as_mut_slice();
    let two = T::cast(2.0);
    for (i, (&p, &t)) in pred.as_slice().iter().zip(target.as_slice()).enumerate() {
        let w = mask.map_or(T::one(), |m| m.as_slice()[i]);
        if w == T::zero() {
            continue;
        }
        let d = p - t;
        match kind {
            LossKind::Mae => {
                value += w * d.abs();
                g[i] = if d > T::zero() {
                    w / denom
                } else if d < T::zero() {
                    -w / denom
                } else {
                    T::zero()
                };
            }
            LossKind::Mse => {
                value += w * d * d;
                g[i] = two * w * d / denom;
            }
        }
    }
    Ok((value / denom, grad))
}

/// Gradients for one block, shaped like its parameters.
#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub mix: Matrix<T>,
    pub mlp: Vec<Matrix<T>>,
    pub raw: Vec<T>,
}

/// Gradients shaped like a [`CitrusModel`] parameter set.
#[derive(Clone, Debug)]
pub struct GradientSet<T> {
    pub encoder: Matrix<T>,
    pub blocks: Vec<BlockGrads<T>>,
    pub decoder: Matrix<T>,
}

/// Gradients shaped like a [`BlockStack`] parameter set.
#[derive(Clone, Debug)]
pub struct StackGrads<T> {
    pub blocks: Vec<BlockGrads<T>>,
    pub readout: Option<Matrix<T>>,
}

fn check_finite_matrix<T: Scalar>(m: &Matrix<T>, path: &str) -> Result<()> {
    if !m.all_finite() {
        return Err(CitrusError::Numerical(format!("non-finite gradient at {path}")));
    }
    Ok(())
}

fn check_finite_blocks<T: Scalar>(blocks: &[BlockGrads<T>]) -> Result<()> {
    for (i, b) in blocks.iter().enumerate() {
        check_finite_matrix(&b.mix, &format!("block {i} mix weights"))?;
        for (h, w) in b.mlp.iter().enumerate() {
            check_finite_matrix(w, &format!("block {i} mlp weight {h}"))?;
        }
        if b.raw.iter().any(|v| !v.is_finite()) {
            return Err(CitrusError::Numerical(format!(
                "non-finite gradient at block {i} receptive field"
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> GradientSet<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend_from_slice(self.encoder.as_slice());
        for b in &self.blocks {
            out.extend_from_slice(b.mix.as_slice());
            for w in &b.mlp {
                out.extend_from_slice(w.as_slice());
            }
            out.extend_from_slice(&b.raw);
        }
        out.extend_from_slice(self.decoder.as_slice());
        out
    }

    fn validate_finite(&self) -> Result<()> {
        check_finite_matrix(&self.encoder, "encoder")?;
        check_finite_blocks(&self.blocks)?;
        check_finite_matrix(&self.decoder, "decoder")
    }
}

impl<T: Scalar> StackGrads<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(b.mix.as_slice());
            for w in &b.mlp {
                out.extend_from_slice(w.as_slice());
            }
            out.extend_from_slice(&b.raw);
        }
        if let Some(r) = &self.readout {
            out.extend_from_slice(r.as_slice());
        }
        out
    }

    fn validate_finite(&self) -> Result<()> {
        check_finite_blocks(&self.blocks)?;
        if let Some(r) = &self.readout {
            check_finite_matrix(r, "readout")?;
        }
        Ok(())
    }
}

/// Flat parameter vector of a model: encoder, then per block (mix, MLP
/// chain, raw receptive field), then decoder; matrices in column-major order.
pub fn model_params_flat<T: Scalar>(model: &CitrusModel<T>) -> Vec<T> {
    let mut out = Vec::new();
    out.extend_from_slice(model.encoder.as_slice());
    for b in &model.blocks {
        out.extend_from_slice(b.mix_weights.as_slice());
        for w in &b.mlp_weights {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(&b.receptive.raw);
    }
    out.extend_from_slice(model.decoder.as_slice());
    out
}

fn take_matrix<T: Scalar>(flat: &[T], cursor: &mut usize, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let n = rows * cols;
    if *cursor + n > flat.len() {
        return Err(CitrusError::InvalidArgument("flat parameter vector too short".into()));
    }
    let m = Matrix::from_col_major(rows, cols, flat[*cursor..*cursor + n].to_vec())?;
    *cursor += n;
    Ok(m)
}

/// Overwrite model parameters from a flat vector in [`model_params_flat`]
/// order.
pub fn set_model_params<T: Scalar>(model: &mut CitrusModel<T>, flat: &[T]) -> Result<()> {
    let mut cur = 0usize;
    model.encoder = take_matrix(flat, &mut cur, model.encoder.rows(), model.encoder.cols())?;
    for b in &mut model.blocks {
        b.mix_weights = take_matrix(flat, &mut cur, b.mix_weights.rows(), b.mix_weights.cols())?;
        for w in &mut b.mlp_weights {
            *w = take_matrix(flat, &mut cur, w.rows(), w.cols())?;
        }
        let n = b.receptive.raw.len();
        if cur + n > flat.len() {
            return Err(CitrusError::InvalidArgument("flat parameter vector too short".into()));
        }
        b.receptive.raw.copy_from_slice(&flat[cur..cur + n]);
        cur += n;
    }
    model.decoder = take_matrix(flat, &mut cur, model.decoder.rows(), model.decoder.cols())?;
    if cur != flat.len() {
        return Err(CitrusError::InvalidArgument(format!(
            "flat parameter vector has {} entries, model needs {cur}",
            flat.len()
        )));
    }
    Ok(())
}

/// Flat parameter vector of a stack: per block (mix, MLP chain, raw), then
/// the readout if present.
pub fn stack_params_flat<T: Scalar>(stack: &BlockStack<T>) -> Vec<T> {
    let mut out = Vec::new();
    for b in &stack.blocks {
        out.extend_from_slice(b.mix_weights.as_slice());
        for w in &b.mlp_weights {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(&b.receptive.raw);
    }
    if let Some(r) = &stack.readout {
        out.extend_from_slice(r.as_slice());
    }
    out
}

/// Overwrite stack parameters from a flat vector in [`stack_params_flat`]
/// order.
pub fn set_stack_params<T: Scalar>(stack: &mut BlockStack<T>, flat: &[T]) -> Result<()> {
    let mut cur = 0usize;
    for b in &mut stack.blocks {
        b.mix_weights = take_matrix(flat, &mut cur, b.mix_weights.rows(), b.mix_weights.cols())?;
        for w in &mut b.mlp_weights {
            *w = take_matrix(flat, &mut cur, w.rows(), w.cols())?;
        }
        let n = b.receptive.raw.len();
        if cur + n > flat.len() {
            return Err(CitrusError::InvalidArgument("flat parameter vector too short".into()));
        }
        b.receptive.raw.copy_from_slice(&flat[cur..cur + n]);
        cur += n;
    }
    if let Some(r) = &mut stack.readout {
        *r = take_matrix(flat, &mut cur, r.rows(), r.cols())?;
    }
    if cur != flat.len() {
        return Err(CitrusError::InvalidArgument(format!(
            "flat parameter vector has {} entries, stack needs {cur}",
            flat.len()
        )));
    }
    Ok(())
}

fn activation_backward<T: Scalar>(
    d_act: &DenseTensor<T>,
    pre_act: &DenseTensor<T>,
    block: &CitrusBlock<T>,
) -> DenseTensor<T> {
    let mut out = d_act.clone();
    for (o, &x) in out.as_mut_slice().iter_mut().zip(pre_act.as_slice()) {
        *o *= block.activation.derivative(x);
    }
    out
}

/// Time-gradient table (factors x channels) before mode reduction.
fn receptive_time_table<T: Scalar>(
    bases: &[SpectralBasis<T>],
    cache: &BlockCache<T>,
    d_filtered: &DenseTensor<T>,
) -> Vec<Vec<T>> {
    let factors = bases.len();
    let channels = *cache.xhat.shape().last().expect("non-empty");
    let lead = cache.xhat.numel() / channels;
    let xh = cache.xhat.as_slice();
    let df = d_filtered.as_slice();
    let mut table = vec![vec![T::zero(); channels]; factors];
    let mut idx = vec![0usize; factors];
    for r in 0..lead {
        for c in 0..channels {
            let col = if cache.per_channel { c } else { 0 };
            let g = df[c * lead + r] * xh[c * lead + r] * cache.filter.get(r, col);
            for (p, b) in bases.iter().enumerate() {
                table[p][c] -= g * b.eigenvalues[idx[p]];
            }
        }
        for (p, b) in bases.iter().enumerate() {
            idx[p] += 1;
            if idx[p] < b.k {
                break;
            }
            idx[p] = 0;
        }
    }
    table
}

/// Backward pass of one block. `input` and `cache` must come from the
/// matching [`crate::layer::spectral_forward_cached`] call; `d_out` is the
/// upstream gradient at the block output. Returns the gradient at the block
/// input and the parameter gradients.
pub fn block_backward<T: Scalar>(
    block: &CitrusBlock<T>,
    bases: &[SpectralBasis<T>],
    input: &DenseTensor<T>,
    cache: &BlockCache<T>,
    d_out: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, BlockGrads<T>)> {
    let leading = &input.shape()[..input.order() - 1];

    // Through the MLP chain, last layer first.
    let h_count = block.mlp_weights.len();
    let mut d_act = d_out.clone();
    let mut mlp_rev = Vec::with_capacity(h_count);
    for h in (0..h_count).rev() {
        let d_pre = activation_backward(&d_act, &cache.pre_acts[h + 1], block);
        let d_pre_mat = d_pre.to_channel_matrix();
        mlp_rev.push(cache.acts[h].to_channel_matrix().matmul_tn(&d_pre_mat));
        d_act = DenseTensor::from_channel_matrix(leading, &d_pre_mat.matmul_nt(&block.mlp_weights[h]))?;
    }
    mlp_rev.reverse();
    let mlp = mlp_rev;

    // Through the first activation and the channel mix.
    let d_mixed = activation_backward(&d_act, &cache.pre_acts[0], block);
    let d_mixed_mat = d_mixed.to_channel_matrix();
    let mix = cache.z.to_channel_matrix().matmul_tn(&d_mixed_mat);
    let d_z = DenseTensor::from_channel_matrix(leading, &d_mixed_mat.matmul_nt(&block.mix_weights))?;

    // Adjoint of the back-transform: into the spectral domain.
    let mut d_filtered = d_z;
    for (p, b) in bases.iter().enumerate() {
        d_filtered = mode_product(&d_filtered, &b.eigenvectors.transpose(), p)?;
    }

    // Diffusion-time gradients, reduced to the field's granularity and
    // chained through softplus.
    let table = receptive_time_table(bases, cache, &d_filtered);
    let channels = table.first().map_or(0, Vec::len);
    let field = &block.receptive;
    let mut raw = vec![T::zero(); field.raw.len()];
    match field.mode {
        FieldMode::Scalar => {
            for row in &table {
                for &v in row {
                    raw[0] += v;
                }
            }
        }
        FieldMode::PerFactor => {
            for (p, row) in table.iter().enumerate() {
                for &v in row {
                    raw[p] += v;
                }
            }
        }
        FieldMode::PerFactorChannel => {
            for (p, row) in table.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    raw[p * channels + c] = v;
                }
            }
        }
    }
    for (g, &r) in raw.iter_mut().zip(&field.raw) {
        *g *= sigmoid(r);
    }

    // Adjoint of the filter and the forward transform.
    let d_xhat = apply_filter(&d_filtered, &cache.filter, cache.per_channel);
    let mut d_in = d_xhat;
    for (p, b) in bases.iter().enumerate() {
        d_in = mode_product(&d_in, &b.eigenvectors, p)?;
    }
    if block.residual {
        d_in = d_in.add(d_out);
    }

    Ok((d_in, BlockGrads { mix, mlp, raw }))
}

/// Loss and exact parameter gradients of a full model on one window.
pub fn backward<T: Scalar>(
    model: &CitrusModel<T>,
    window: &DenseTensor<T>,
    target: &DenseTensor<T>,
    kind: LossKind,
) -> Result<(T, GradientSet<T>)> {
    let (pred, cache) = model_forward_cached(window, model)?;
    let (value, d_pred) = masked_loss_gradient(&pred, target, None, kind)?;

    // Decoder: prediction = concat-as-(N_1 x rest) times decoder.
    let n1 = window.shape()[0];
    let rest = cache.concat.numel() / n1;
    let concat_mat = Matrix::from_col_major(n1, rest, cache.concat.as_slice().to_vec())?;
    let d_pred_mat = Matrix::from_col_major(n1, model.decoder.cols(), d_pred.as_slice().to_vec())?;
    let decoder = concat_mat.matmul_tn(&d_pred_mat);
    let d_concat_mat = d_pred_mat.matmul_nt(&model.decoder);

    // The window occupies the first channels of the concatenation; only the
    // block-output channels propagate into the chain.
    let f_in = *window.shape().last().expect("non-empty");
    let f_last = *cache.block_io.last().expect("non-empty").shape().last().expect("non-empty");
    let lead: usize = window.shape()[..window.order() - 1].iter().product();
    let d_concat_data = d_concat_mat.into_data();
    let mut block_shape: Vec<usize> = window.shape()[..window.order() - 1].to_vec();
    block_shape.push(f_last);
    let d_block_out =
        DenseTensor::from_data(&block_shape, d_concat_data[f_in * lead..(f_in + f_last) * lead].to_vec())?;

    // Blocks in reverse.
    let mut d = d_block_out;
    let mut blocks_rev = Vec::with_capacity(model.blocks.len());
    for i in (0..model.blocks.len()).rev() {
        let (d_in, g) = block_backward(&model.blocks[i], &model.bases, &cache.block_io[i], &cache.caches[i], &d)?;
        blocks_rev.push(g);
        d = d_in;
    }
    blocks_rev.reverse();

    let encoder = window.to_channel_matrix().matmul_tn(&d.to_channel_matrix());
    let grads = GradientSet { encoder, blocks: blocks_rev, decoder };
    grads.validate_finite()?;
    Ok((value, grads))
}

/// Loss and exact parameter gradients of a stack under an optional mask.
pub fn stack_backward<T: Scalar>(
    stack: &BlockStack<T>,
    input: &DenseTensor<T>,
    target: &DenseTensor<T>,
    mask: Option<&DenseTensor<T>>,
    kind: LossKind,
) -> Result<(T, StackGrads<T>)> {
    let (out, cache) = stack.forward_cached(input)?;
    let (value, d_out) = masked_loss_gradient(&out, target, mask, kind)?;
    let leading = &input.shape()[..input.order() - 1];

    let mut d = d_out;
    let readout = match &stack.readout {
        Some(r) => {
            let d_mat = d.to_channel_matrix();
            let grad = cache.pre_readout.to_channel_matrix().matmul_tn(&d_mat);
            d = DenseTensor::from_channel_matrix(leading, &d_mat.matmul_nt(r))?;
            Some(grad)
        }
        None => None,
    };

    let mut blocks_rev = Vec::with_capacity(stack.blocks.len());
    for i in (0..stack.blocks.len()).rev() {
        let (d_in, g) = block_backward(&stack.blocks[i], &stack.bases, &cache.inputs[i], &cache.caches[i], &d)?;
        blocks_rev.push(g);
        d = d_in;
    }
    blocks_rev.reverse();

    let grads = StackGrads { blocks: blocks_rev, readout };
    grads.validate_finite()?;
    Ok((value, grads))
}

/// Maximum relative discrepancy between analytic and central-difference
/// gradients over every model parameter:
/// `|analytic - central| / max(1e-8, |central|)`.
pub fn fd_check<T: Scalar>(
    model: &CitrusModel<T>,
    window: &DenseTensor<T>,
    target: &DenseTensor<T>,
    kind: LossKind,
    h: T,
) -> Result<T> {
    if h <= T::zero() {
        return Err(CitrusError::InvalidArgument(format!("step {h} must be positive")));
    }
    let (_, grads) = backward(model, window, target, kind)?;
    let analytic = grads.flatten();
    let mut probe = model.clone();
    let mut flat = model_params_flat(model);
    let floor = T::cast(1e-8);
    let mut worst = T::zero();
    for k in 0..flat.len() {
        let orig = flat[k];
        flat[k] = orig + h;
        set_model_params(&mut probe, &flat)?;
        let up = loss(&model_forward(window, &probe)?, target, kind)?;
        flat[k] = orig - h;
        set_model_params(&mut probe, &flat)?;
        let down = loss(&model_forward(window, &probe)?, target, kind)?;
        flat[k] = orig;
        let central = (up - down) / (h + h);
        let rel = (analytic[k] - central).abs() / floor.max(central.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// As [`fd_check`], for a stack under an optional mask.
pub fn fd_check_stack<T: Scalar>(
    stack: &BlockStack<T>,
    input: &DenseTensor<T>,
    target: &DenseTensor<T>,
    mask: Option<&DenseTensor<T>>,
    kind: LossKind,
    h: T,
) -> Result<T> {
    if h <= T::zero() {
        return Err(CitrusError::InvalidArgument(format!("step {h} must be positive")));
    }
    let (_, grads) = stack_backward(stack, input, target, mask, kind)?;
    let analytic = grads.flatten();
    let mut probe = stack.clone();
    let mut flat = stack_params_flat(stack);
    let floor = T::cast(1e-8);
    let mut worst = T::zero();
    for k in 0..flat.len() {
        let orig = flat[k];
        flat[k] = orig + h;
        set_stack_params(&mut probe, &flat)?;
        let up = masked_loss_gradient(&probe.forward(input)?, target, mask, kind)?.0;
        flat[k] = orig - h;
        set_stack_params(&mut probe, &flat)?;
        let down = masked_loss_gradient(&probe.forward(input)?, target, mask, kind)?.0;
        flat[k] = orig;
        let central = (up - down) / (h + h);
        let rel = (analytic[k] - central).abs() / floor.max(central.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Optimizer and loop settings. Scalar hyperparameters are kept in `f64` and
/// cast at use, so configurations round-trip exactly through text.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping;
    /// 0 stops at the first non-improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mae,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 300,
            patience: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CitrusError::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(CitrusError::InvalidArgument(format!("{name} {b} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(CitrusError::InvalidArgument("adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CitrusError::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(CitrusError::InvalidArgument("max epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam, over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CitrusError::InvalidArgument(format!(
            "adam shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(CitrusError::Numerical("non-finite gradient entering adam step".into()));
    }
    state.step += 1;
    let b1 = T::cast(cfg.beta1);
    let b2 = T::cast(cfg.beta2);
    let lr = T::cast(cfg.learning_rate);
    let eps = T::cast(cfg.epsilon);
    let corr1 = T::one() - T::cast(cfg.beta1.powi(state.step as i32));
    let corr2 = T::one() - T::cast(cfg.beta2.powi(state.step as i32));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mhat = state.m[i] / corr1;
        let vhat = state.v[i] / corr2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Supervised pairs, already split.
#[derive(Clone, Debug, Default)]
pub struct SplitDataset<T> {
    pub train: Vec<(DenseTensor<T>, DenseTensor<T>)>,
    pub val: Vec<(DenseTensor<T>, DenseTensor<T>)>,
    pub test: Vec<(DenseTensor<T>, DenseTensor<T>)>,
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epoch_seconds: Vec<f64>,
}

/// Mini-batch training with early stopping; the model is left at the best
/// validation parameters. Fully deterministic for a fixed config.
pub fn train<T: Scalar>(
    model: &mut CitrusModel<T>,
    data: &SplitDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(CitrusError::InvalidArgument("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(CitrusError::InvalidArgument("validation split is empty (needed for model selection)".into()));
    }

    let mut flat = model_params_flat(model);
    let mut adam = AdamState::new(flat.len());
    let mut best_flat = flat.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad = 0usize;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        epoch_seconds: Vec::new(),
    };

    for epoch in 0..cfg.max_epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);

        let mut epoch_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![T::zero(); flat.len()];
            for &i in batch {
                let (value, grads) = backward(model, &data.train[i].0, &data.train[i].1, cfg.loss)?;
                epoch_sum += value.to_f64_lossy();
                for (a, g) in acc.iter_mut().zip(grads.flatten()) {
                    *a += g;
                }
            }
            let inv = T::cast(1.0 / batch.len() as f64);
            for a in &mut acc {
                *a *= inv;
            }
            adam_step(&mut flat, &acc, &mut adam, cfg)?;
            set_model_params(model, &flat)?;
        }
        let train_loss = epoch_sum / data.train.len() as f64;

        let mut val_sum = 0.0f64;
        for (w, target) in &data.val {
            val_sum += loss(&model_forward(w, model)?, target, cfg.loss)?.to_f64_lossy();
        }
        let val_loss = val_sum / data.val.len() as f64;

        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_flat.copy_from_slice(&flat);
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.patience {
                break;
            }
        }
    }

    set_model_params(model, &best_flat)?;
    history.best_epoch = best_epoch;
    history.best_val = best_val;
    Ok(history)
}

/// Full-batch training of a stack on one tensor, with disjoint train and
/// validation masks for supervision and model selection. The stack is left at
/// the best validation parameters.
pub fn train_stack<T: Scalar>(
    stack: &mut BlockStack<T>,
    input: &DenseTensor<T>,
    target: &DenseTensor<T>,
    train_mask: &DenseTensor<T>,
    val_mask: &DenseTensor<T>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut flat = stack_params_flat(stack);
    let mut adam = AdamState::new(flat.len());
    let mut best_flat = flat.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad = 0usize;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        epoch_seconds: Vec::new(),
    };

    for epoch in 0..cfg.max_epochs {
        let started = std::time::Instant::now();
        let (value, grads) = stack_backward(stack, input, target, Some(train_mask), cfg.loss)?;
        adam_step(&mut flat, &grads.flatten(), &mut adam, cfg)?;
        set_stack_params(stack, &flat)?;

        let val = masked_loss_gradient(&stack.forward(input)?, target, Some(val_mask), cfg.loss)?
            .0
            .to_f64_lossy();
        history.train_loss.push(value.to_f64_lossy());
        history.val_loss.push(val);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());

        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_flat.copy_from_slice(&flat);
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.patience {
                break;
            }
        }
    }

    set_stack_params(stack, &best_flat)?;
    history.best_epoch = best_epoch;
    history.best_val = best_val;
    Ok(history)
}
