//! Weighted undirected factor graphs and their product structure.
//!
//! A [`FactorGraph`] owns a validated adjacency matrix together with its
//! degree vector, combinatorial Laplacian `L = D - A`, and symmetric
//! normalized Laplacian. Product operators ([`cartesian_sum`], [`kron_chain`])
//! assemble the matching Kronecker-structured matrices; generators build the
//! standard test families (paths, seeded Erdos-Renyi, Gaussian-kernel
//! similarity graphs); [`perturb`] injects symmetric noise at a prescribed
//! signal-to-noise ratio.
//!
//! Convention: with vectorization taking the first factor's index fastest,
//! the operator acting on `vec(U)` is the REVERSED chain
//! `L_P (+) ... (+) L_1`. Both product helpers take a `descending` flag; pass
//! `true` to match vectorized tensors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CitrusError, Result};
use crate::scalar::Scalar;
use crate::spectral::{symmetric_spectral_norm, SYMMETRY_TOL};
use crate::tensor::Matrix;

/// Maximum rejection-sampling attempts before a connected-graph request fails.
const MAX_CONNECTIVITY_ATTEMPTS: u64 = 1000;

/// A validated weighted undirected graph with its Laplacian family.
#[derive(Clone, Debug)]
pub struct FactorGraph<T> {
    n: usize,
    adjacency: Matrix<T>,
    degrees: Vec<T>,
    laplacian: Matrix<T>,
    normalized_laplacian: Matrix<T>,
}

impl<T: Scalar> FactorGraph<T> {
    /// Number of nodes.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &Matrix<T> {
        &self.adjacency
    }

    /// Weighted degree of each node (row sums of the adjacency).
    pub fn degrees(&self) -> &[T] {
        &self.degrees
    }

    /// Combinatorial Laplacian `D - A`.
    pub fn laplacian(&self) -> &Matrix<T> {
        &self.laplacian
    }

    /// Symmetric normalized Laplacian. Rows and columns of isolated nodes are
    /// zero (not one): the empty graph maps to the zero matrix, whose heat
    /// kernel is the identity, so isolated nodes hold their value.
    pub fn normalized_laplacian(&self) -> &Matrix<T> {
        &self.normalized_laplacian
    }

    /// True when every pair of nodes is joined by a positive-weight path.
    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1usize;
        while let Some(i) = stack.pop() {
            for j in 0..self.n {
                if !seen[j] && self.adjacency.get(i, j) > T::zero() {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.n
    }
}

/// Validate an adjacency matrix and derive the Laplacian family.
///
/// Requirements: square, finite, entrywise nonnegative, zero diagonal, and
/// symmetric within a relative `1e-10`; the stored adjacency is the exact
/// symmetrization of the input.
pub fn build_graph<T: Scalar>(adjacency: Matrix<T>) -> Result<FactorGraph<T>> {
    if !adjacency.is_square() {
        return Err(CitrusError::Validation(format!(
            "adjacency must be square, got {}x{}",
            adjacency.rows(),
            adjacency.cols()
        )));
    }
    let n = adjacency.rows();
    if n == 0 {
        return Err(CitrusError::Validation("adjacency must have at least one node".into()));
    }
    if !adjacency.all_finite() {
        return Err(CitrusError::Validation("adjacency has non-finite entries".into()));
    }
    let scale = adjacency.max_abs().max(T::one());
    if adjacency.asymmetry() > T::cast(SYMMETRY_TOL) * scale {
        return Err(CitrusError::Validation(format!(
            "adjacency asymmetry {} exceeds tolerance",
            adjacency.asymmetry()
        )));
    }
    let tiny = T::cast(SYMMETRY_TOL) * scale;
    let mut sym = Matrix::zeros(n, n);
    for c in 0..n {
        for r in 0..n {
            if r == c {
                let d = adjacency.get(r, r);
                if d.abs() > tiny {
                    return Err(CitrusError::Validation(format!(
                        "self-loop at node {r}: diagonal entry {d}"
                    )));
                }
                continue;
            }
            let v = (adjacency.get(r, c) + adjacency.get(c, r)) * T::cast(0.5);
            if v < T::zero() {
                return Err(CitrusError::Validation(format!(
                    "negative edge weight {v} at ({r},{c})"
                )));
            }
            sym.set(r, c, v);
        }
    }

    let mut degrees = vec![T::zero(); n];
    for (r, deg) in degrees.iter_mut().enumerate() {
        let mut acc = T::zero();
        for c in 0..n {
            acc += sym.get(r, c);
        }
        *deg = acc;
    }

    let mut laplacian = Matrix::zeros(n, n);
    let mut normalized = Matrix::zeros(n, n);
    let inv_sqrt: Vec<T> = degrees
        .iter()
        .map(|&d| if d > T::zero() { d.sqrt().recip() } else { T::zero() })
        .collect();
    for c in 0..n {
        for r in 0..n {
            if r == c {
                laplacian.set(r, r, degrees[r]);
                if degrees[r] > T::zero() {
                    normalized.set(r, r, T::one());
                }
            } else {
                let a = sym.get(r, c);
                laplacian.set(r, c, -a);
                normalized.set(r, c, -a * inv_sqrt[r] * inv_sqrt[c]);
            }
        }
    }

    Ok(FactorGraph { n, adjacency: sym, degrees, laplacian, normalized_laplacian: normalized })
}

fn check_square_chain<T: Scalar>(mats: &[Matrix<T>], what: &str) -> Result<()> {
    if mats.is_empty() {
        return Err(CitrusError::InvalidArgument(format!("{what} needs at least one matrix")));
    }
    for (i, m) in mats.iter().enumerate() {
        if !m.is_square() {
            return Err(CitrusError::InvalidArgument(format!(
                "{what}: matrix {i} is {}x{}, expected square",
                m.rows(),
                m.cols()
            )));
        }
    }
    Ok(())
}

/// Kronecker sum of the chain. With `descending` the fold runs
/// `M_P (+) ... (+) M_1` (the order acting on first-index-fastest
/// vectorizations); otherwise `M_1 (+) ... (+) M_P`.
pub fn cartesian_sum<T: Scalar>(mats: &[Matrix<T>], descending: bool) -> Result<Matrix<T>> {
    check_square_chain(mats, "cartesian_sum")?;
    let fold = |acc: Matrix<T>, m: &Matrix<T>| {
        // A (+) B = A (x) I_B + I_A (x) B
        let mut out = acc.kron(&Matrix::identity(m.rows()));
        out.add_assign_scaled(&Matrix::identity(acc.rows()).kron(m), T::one());
        out
    };
    let mut iter: Box<dyn Iterator<Item = &Matrix<T>>> = if descending {
        Box::new(mats.iter().rev())
    } else {
        Box::new(mats.iter())
    };
    let first = iter.next().expect("non-empty checked").clone();
    Ok(iter.fold(first, fold))
}

/// Kronecker product of the chain, with the same `descending` convention as
/// [`cartesian_sum`].
pub fn kron_chain<T: Scalar>(mats: &[Matrix<T>], descending: bool) -> Result<Matrix<T>> {
    check_square_chain(mats, "kron_chain")?;
    let mut iter: Box<dyn Iterator<Item = &Matrix<T>>> = if descending {
        Box::new(mats.iter().rev())
    } else {
        Box::new(mats.iter())
    };
    let first = iter.next().expect("non-empty checked").clone();
    Ok(iter.fold(first, |acc, m| acc.kron(m)))
}

/// Unweighted path on `n` nodes (`n = 1` gives the single isolated node).
pub fn path_graph<T: Scalar>(n: usize) -> Result<FactorGraph<T>> {
    let mut a = Matrix::zeros(n, n);
    for i in 1..n {
        a.set(i - 1, i, T::one());
        a.set(i, i - 1, T::one());
    }
    build_graph(a)
}

/// Seeded Erdos-Renyi graph: each unordered pair carries an edge with
/// probability `p`, drawn in a fixed order from a counter-based generator.
///
/// With `require_connected`, disconnected draws are rejected and the attempt
/// counter perturbs the stream seed; after 1000 failures the request errors
/// instead of looping.
pub fn erdos_renyi<T: Scalar>(n: usize, p: f64, seed: u64, require_connected: bool) -> Result<FactorGraph<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CitrusError::InvalidArgument(format!("edge probability {p} outside [0,1]")));
    }
    if n == 0 {
        return Err(CitrusError::InvalidArgument("erdos_renyi needs n >= 1".into()));
    }
    for attempt in 0..MAX_CONNECTIVITY_ATTEMPTS {
        let stream = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut a = Matrix::zeros(n, n);
        for j in 1..n {
            for i in 0..j {
                if rng.gen::<f64>() < p {
                    a.set(i, j, T::one());
                    a.set(j, i, T::one());
                }
            }
        }
        let g = build_graph(a)?;
        if !require_connected || g.is_connected() {
            return Ok(g);
        }
    }
    Err(CitrusError::GenerationFailed(format!(
        "no connected draw in {MAX_CONNECTIVITY_ATTEMPTS} attempts (n={n}, p={p}, seed={seed})"
    )))
}

/// Gaussian-kernel similarity graph from a distance matrix:
/// `A_ij = exp(-d_ij^2 / sigma^2)` for `i != j`, zeroed below `threshold`.
pub fn gaussian_kernel_graph<T: Scalar>(dist: &Matrix<T>, sigma: T, threshold: T) -> Result<FactorGraph<T>> {
    if !dist.is_square() {
        return Err(CitrusError::InvalidArgument(format!(
            "distance matrix must be square, got {}x{}",
            dist.rows(),
            dist.cols()
        )));
    }
    if sigma <= T::zero() {
        return Err(CitrusError::InvalidArgument(format!("kernel width sigma={sigma} must be positive")));
    }
    let n = dist.rows();
    let scale = dist.max_abs().max(T::one());
    if dist.asymmetry() > T::cast(SYMMETRY_TOL) * scale {
        return Err(CitrusError::Validation("distance matrix is not symmetric".into()));
    }
    let mut a = Matrix::zeros(n, n);
    for c in 0..n {
        for r in 0..n {
            if r == c {
                continue;
            }
            let d = dist.get(r, c);
            if d < T::zero() {
                return Err(CitrusError::Validation(format!("negative distance {d} at ({r},{c})")));
            }
            let w = (-(d * d) / (sigma * sigma)).exp();
            if w >= threshold {
                a.set(r, c, w);
            }
        }
    }
    build_graph(a)
}

/// Record of one symmetric perturbation draw.
#[derive(Clone, Debug)]
pub struct Perturbation<T> {
    /// The perturbation actually applied after clamping: `A_tilde - A`.
    pub error_matrix: Matrix<T>,
    /// Spectral norm of `error_matrix`.
    pub epsilon: T,
    /// Requested signal-to-noise ratio in dB (`infinity` means none).
    pub snr_db: f64,
}

/// Add symmetric Gaussian noise to a graph's adjacency at a target SNR.
///
/// The raw draw is iid standard normal on the strict upper triangle,
/// mirrored, zero on the diagonal, then rescaled so its Frobenius norm equals
/// `||A||_F * 10^(-snr_db/20)`. Negative perturbed weights are clamped to
/// zero, so the reported [`Perturbation::error_matrix`] is the post-clamp
/// difference and its spectral norm is the `epsilon` entering perturbation
/// bounds. `snr_db = +infinity` returns the graph unchanged with a zero
/// perturbation.
pub fn perturb<T: Scalar>(g: &FactorGraph<T>, snr_db: f64, seed: u64) -> Result<(FactorGraph<T>, Perturbation<T>)> {
    let n = g.n();
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok((
            g.clone(),
            Perturbation { error_matrix: Matrix::zeros(n, n), epsilon: T::zero(), snr_db },
        ));
    }
    if snr_db.is_nan() {
        return Err(CitrusError::InvalidArgument("snr_db is NaN".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Matrix::zeros(n, n);
    // Fixed draw order: upper triangle, column by column.
    for j in 1..n {
        for i in 0..j {
            let z: f64 = StandardNormal.sample(&mut rng);
            let z = T::cast(z);
            raw.set(i, j, z);
            raw.set(j, i, z);
        }
    }

    let target = g.adjacency().frobenius_norm() * T::cast(10f64.powf(-snr_db / 20.0));
    let raw_norm = raw.frobenius_norm();
    let scaled = if raw_norm > T::zero() { raw.scale(target / raw_norm) } else { raw };

    let mut perturbed = g.adjacency().clone();
    perturbed.add_assign_scaled(&scaled, T::one());
    for c in 0..n {
        for r in 0..n {
            if perturbed.get(r, c) < T::zero() {
                perturbed.set(r, c, T::zero());
            }
        }
    }
    let g2 = build_graph(perturbed)?;
    let error_matrix = g2.adjacency().sub(g.adjacency());
    let epsilon = symmetric_spectral_norm(&error_matrix)?;
    Ok((g2, Perturbation { error_matrix, epsilon, snr_db }))
}
