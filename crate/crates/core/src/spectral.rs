//! Dense symmetric eigendecomposition and the spectral side of the separable
//! heat kernel: truncated eigenbases, per-factor filter construction, dense
//! kernels for oracles, and explained-variance ratios.
//!
//! The eigensolver is the classic two-stage dense route — Householder
//! reduction to tridiagonal form followed by the implicitly shifted QL
//! iteration — ported from the JAMA `EigenvalueDecomposition` (itself derived
//! from the EISPACK tred2/tql2 routines). It is fully deterministic: fixed
//! sweep order, eigenvalues sorted ascending, and a fixed eigenvector sign
//! convention (the largest-magnitude entry of each vector is made positive,
//! ties resolved toward the lowest index).

use crate::error::{CitrusError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Symmetry tolerance accepted by [`eigh`] and the graph constructors.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Residual bound enforced at decomposition time:
/// `||L v - lambda v||_2 <= RESIDUAL_TOL * max(1, |lambda|)`.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Eigenpairs of a symmetric matrix, possibly truncated to `k` columns.
#[derive(Clone, Debug)]
pub struct SpectralBasis<T> {
    /// Ascending eigenvalues, one per retained pair.
    pub eigenvalues: Vec<T>,
    /// Column `i` is the eigenvector paired with `eigenvalues[i]`.
    pub eigenvectors: Matrix<T>,
    /// Size of the matrix this basis was computed from.
    pub source_n: usize,
    /// Number of retained pairs (`eigenvectors` is `source_n x k`).
    pub k: usize,
}

/// Which eigenpairs a truncation keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruncationPolicy {
    /// Keep the `k` smallest eigenvalues (low-pass; the default elsewhere).
    Smallest,
    /// Keep the `k` largest eigenvalue magnitudes.
    Largest,
}

impl std::str::FromStr for TruncationPolicy {
    type Err = CitrusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallest" => Ok(TruncationPolicy::Smallest),
            "largest" => Ok(TruncationPolicy::Largest),
            other => Err(CitrusError::InvalidArgument(format!(
                "unknown truncation policy {other:?} (expected smallest|largest)"
            ))),
        }
    }
}

impl std::fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TruncationPolicy::Smallest => "smallest",
            TruncationPolicy::Largest => "largest",
        })
    }
}

/// Full eigendecomposition of a symmetric matrix.
///
/// Deterministic for identical input bytes. Errors on asymmetric input, on QL
/// non-convergence, and when the residual invariant fails against the source
/// matrix.
pub fn eigh<T: Scalar>(m: &Matrix<T>) -> Result<SpectralBasis<T>> {
    if !m.is_square() {
        return Err(CitrusError::InvalidArgument(format!(
            "eigh needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.all_finite() {
        return Err(CitrusError::Validation("eigh input has non-finite entries".into()));
    }
    let scale = m.max_abs().max(T::one());
    if m.asymmetry() > T::cast(SYMMETRY_TOL) * scale {
        return Err(CitrusError::Validation(format!(
            "matrix asymmetry {} exceeds {SYMMETRY_TOL} (relative)",
            m.asymmetry()
        )));
    }

    let n = m.rows();
    // Row-major working copy; v[r*n + c]. Columns become eigenvectors.
    let mut v: Vec<T> = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            // Use the symmetrized value so the 1e-10 slack cannot leak
            // asymmetry into the iteration.
            v.push((m.get(r, c) + m.get(c, r)) * T::cast(0.5));
        }
    }
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(n, &mut v, &mut d, &mut e);
    tql2(n, &mut v, &mut d, &mut e)?;

    // Ascending eigenvalue order, stable for exact ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("finite eigenvalues"));

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(d[src]);
        // Sign convention: largest-magnitude entry positive, first such entry
        // decides.
        let mut arg = 0usize;
        let mut best = T::zero();
        for r in 0..n {
            let a = v[r * n + src].abs();
            if a > best {
                best = a;
                arg = r;
            }
        }
        let flip = v[arg * n + src] < T::zero();
        for r in 0..n {
            let val = v[r * n + src];
            eigenvectors.set(r, dst, if flip { -val } else { val });
        }
    }

    let basis = SpectralBasis { eigenvalues, eigenvectors, source_n: n, k: n };
    check_residual(m, &basis)?;
    Ok(basis)
}

/// `||L v_i - lambda_i v_i||_2 <= RESIDUAL_TOL * max(1, |lambda_i|)` for every
/// retained pair.
fn check_residual<T: Scalar>(m: &Matrix<T>, b: &SpectralBasis<T>) -> Result<()> {
    let mv = m.matmul(&b.eigenvectors);
    let n = m.rows();
    for i in 0..b.k {
        let lam = b.eigenvalues[i];
        let mut res = T::zero();
        for r in 0..n {
            let diff = mv.get(r, i) - lam * b.eigenvectors.get(r, i);
            res += diff * diff;
        }
        let res = res.sqrt();
        let bound = T::cast(RESIDUAL_TOL) * T::one().max(lam.abs());
        if res > bound {
            return Err(CitrusError::Numerical(format!(
                "eigenpair {i} residual {res} exceeds {bound}"
            )));
        }
    }
    Ok(())
}

/// Householder reduction to tridiagonal form (JAMA tred2).
fn tred2<T: Scalar>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) {
    for j in 0..n {
        d[j] = v[(n - 1) * n + j];
    }

    for i in (1..n).rev() {
        // Scale to avoid under/overflow.
        let mut scale = T::zero();
        let mut h = T::zero();
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1) * n + j];
                v[i * n + j] = T::zero();
                v[j * n + i] = T::zero();
            }
        } else {
            // Generate the Householder vector.
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = T::zero();
            }

            // Apply the similarity transformation to the remaining columns.
            for j in 0..i {
                f = d[j];
                v[j * n + i] = f;
                g = e[j] + v[j * n + j] * f;
                for k in (j + 1)..i {
                    g += v[k * n + j] * d[k];
                    e[k] += v[k * n + j] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k * n + j] = v[k * n + j] - (f * e[k] + g * d[k]);
                }
                d[j] = v[(i - 1) * n + j];
                v[i * n + j] = T::zero();
            }
        }
        d[i] = h;
    }

    // Accumulate the transformations.
    for i in 0..n.saturating_sub(1) {
        v[(n - 1) * n + i] = v[i * n + i];
        v[i * n + i] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[k * n + i + 1] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[k * n + i + 1] * v[k * n + j];
                }
                for k in 0..=i {
                    v[k * n + j] = v[k * n + j] - g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k * n + i + 1] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1) * n + j];
        v[(n - 1) * n + j] = T::zero();
    }
    v[(n - 1) * n + (n - 1)] = T::one();
    e[0] = T::zero();
}

/// Implicitly shifted QL iteration on the tridiagonal form (JAMA tql2).
fn tql2<T: Scalar>(n: usize, v: &mut [T], d: &mut [T], e: &mut [T]) -> Result<()> {
    const MAX_ITER: usize = 50;

    for i in 1..n {
        e[i - 1] = e[i];
    }
    if n > 0 {
        e[n - 1] = T::zero();
    }

    let mut f = T::zero();
    let mut tst1 = T::zero();
    let eps = T::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m >= n {
            m = n - 1;
        }

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_ITER {
                    return Err(CitrusError::Numerical(format!(
                        "QL iteration failed to converge at eigenvalue {l} after {MAX_ITER} sweeps"
                    )));
                }

                // Implicit shift.
                let g = d[l];
                let two = T::cast(2.0);
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                // Implicit QL transformation.
                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    // Accumulate the rotation into the eigenvector columns.
                    for k in 0..n {
                        h = v[k * n + i + 1];
                        v[k * n + i + 1] = s * v[k * n + i] + c * h;
                        v[k * n + i] = c * v[k * n + i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;

                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    Ok(())
}

/// Keep `k` eigenpairs per `policy`; the result is re-sorted ascending and
/// stays orthonormal (column subsetting of an orthonormal matrix).
pub fn truncate<T: Scalar>(b: &SpectralBasis<T>, k: usize, policy: TruncationPolicy) -> Result<SpectralBasis<T>> {
    if k == 0 || k > b.k {
        return Err(CitrusError::InvalidArgument(format!(
            "truncation k={k} out of range 1..={}",
            b.k
        )));
    }
    let mut keep: Vec<usize> = match policy {
        TruncationPolicy::Smallest => (0..k).collect(),
        TruncationPolicy::Largest => {
            let mut idx: Vec<usize> = (0..b.k).collect();
            // Largest magnitudes first; ties resolved toward lower index for
            // determinism.
            idx.sort_by(|&a, &c| {
                b.eigenvalues[c]
                    .abs()
                    .partial_cmp(&b.eigenvalues[a].abs())
                    .expect("finite eigenvalues")
                    .then(a.cmp(&c))
            });
            idx.truncate(k);
            idx
        }
    };
    keep.sort_unstable();

    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenvectors = Matrix::zeros(b.source_n, k);
    for (dst, &src) in keep.iter().enumerate() {
        eigenvalues.push(b.eigenvalues[src]);
        for r in 0..b.source_n {
            eigenvectors.set(r, dst, b.eigenvectors.get(r, src));
        }
    }
    Ok(SpectralBasis { eigenvalues, eigenvectors, source_n: b.source_n, k })
}

/// Diffusion times for a per-factor separable filter.
///
/// `Scalar` and `PerFactor` describe one filter column; `PerFactorChannel`
/// holds an independent time per (factor, channel) pair, outer index factor.
#[derive(Clone, Debug)]
pub enum FilterTimes<T> {
    Scalar(T),
    PerFactor(Vec<T>),
    PerFactorChannel(Vec<Vec<T>>),
}

impl<T: Scalar> FilterTimes<T> {
    /// Number of filter columns this spec produces (1 unless per-channel).
    pub fn channels(&self) -> usize {
        match self {
            FilterTimes::Scalar(_) | FilterTimes::PerFactor(_) => 1,
            FilterTimes::PerFactorChannel(t) => t.first().map_or(0, Vec::len),
        }
    }

    /// Time for factor `p`, column `c`.
    fn at(&self, p: usize, c: usize) -> T {
        match self {
            FilterTimes::Scalar(t) => *t,
            FilterTimes::PerFactor(t) => t[p],
            FilterTimes::PerFactorChannel(t) => t[p][c],
        }
    }

    fn validate(&self, factors: usize) -> Result<()> {
        match self {
            FilterTimes::Scalar(_) => Ok(()),
            FilterTimes::PerFactor(t) => {
                if t.len() != factors {
                    return Err(CitrusError::InvalidArgument(format!(
                        "per-factor times: got {} entries for {factors} factors",
                        t.len()
                    )));
                }
                Ok(())
            }
            FilterTimes::PerFactorChannel(t) => {
                if t.len() != factors {
                    return Err(CitrusError::InvalidArgument(format!(
                        "per-factor-channel times: got {} factor rows for {factors} factors",
                        t.len()
                    )));
                }
                let f = t.first().map_or(0, Vec::len);
                if f == 0 || t.iter().any(|row| row.len() != f) {
                    return Err(CitrusError::InvalidArgument(
                        "per-factor-channel times must be a rectangular P x F table".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Separable heat-filter values on the product eigenbasis.
///
/// Returns a `prod K_p x F` matrix whose row `r` linearizes the factor
/// eigenindices with the FIRST factor fastest (same convention as tensor
/// vectorization), and whose entry is `prod_p exp(-t^(p,c) lambda_p[r_p])`.
/// Zero times are legal here; positivity is the caller's (reparameterized)
/// concern.
pub fn product_filter<T: Scalar>(bases: &[SpectralBasis<T>], t: &FilterTimes<T>) -> Result<Matrix<T>> {
    if bases.is_empty() {
        return Err(CitrusError::InvalidArgument("product_filter needs at least one basis".into()));
    }
    t.validate(bases.len())?;
    let channels = t.channels().max(1);
    let rows: usize = bases.iter().map(|b| b.k).product();
    let mut out = Matrix::zeros(rows, channels);
    let mut idx = vec![0usize; bases.len()];
    for r in 0..rows {
        for c in 0..channels {
            let mut acc = T::zero();
            for (p, b) in bases.iter().enumerate() {
                acc += t.at(p, c) * b.eigenvalues[idx[p]];
            }
            out.set(r, c, (-acc).exp());
        }
        // first factor fastest
        for (p, b) in bases.iter().enumerate() {
            idx[p] += 1;
            if idx[p] < b.k {
                break;
            }
            idx[p] = 0;
        }
    }
    Ok(out)
}

/// Dense heat kernel `exp(-t L) = V diag(e^{-t lambda}) V^T`, the oracle route.
pub fn heat_kernel_dense<T: Scalar>(l: &Matrix<T>, t: T) -> Result<Matrix<T>> {
    if t < T::zero() {
        return Err(CitrusError::InvalidArgument(format!("negative diffusion time {t}")));
    }
    heat_kernel_from_basis(&eigh(l)?, t)
}

/// Heat kernel rebuilt from an existing decomposition, so one `eigh` can be
/// reused across many diffusion times. A truncated basis yields the low-rank
/// approximation of the kernel.
pub fn heat_kernel_from_basis<T: Scalar>(b: &SpectralBasis<T>, t: T) -> Result<Matrix<T>> {
    if t < T::zero() {
        return Err(CitrusError::InvalidArgument(format!("negative diffusion time {t}")));
    }
    let n = b.source_n;
    let mut scaled = b.eigenvectors.clone();
    for (i, &lam) in b.eigenvalues.iter().enumerate() {
        let w = (-t * lam).exp();
        for r in 0..n {
            scaled.set(r, i, scaled.get(r, i) * w);
        }
    }
    Ok(scaled.matmul_nt(&b.eigenvectors))
}

/// Spectral norm of a symmetric matrix: the largest eigenvalue magnitude.
pub fn symmetric_spectral_norm<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    let b = eigh(m)?;
    Ok(b.eigenvalues.iter().fold(T::zero(), |acc, &l| acc.max(l.abs())))
}

/// Explained-variance ratios `lambda_i^2 / sum_j lambda_j^2`, descending.
///
/// Requires a full basis; an all-zero spectrum is reported as degenerate
/// rather than silently returning zeros.
pub fn explained_variance<T: Scalar>(b: &SpectralBasis<T>) -> Result<Vec<T>> {
    if b.k != b.source_n {
        return Err(CitrusError::InvalidArgument(
            "explained_variance needs the full (untruncated) basis".into(),
        ));
    }
    let total: T = b.eigenvalues.iter().map(|&l| l * l).sum();
    if total == T::zero() {
        return Err(CitrusError::DegenerateSpectrum(
            "all eigenvalues are zero (empty graph)".into(),
        ));
    }
    let mut ratios: Vec<T> = b.eigenvalues.iter().map(|&l| l * l / total).collect();
    ratios.sort_by(|a, c| c.partial_cmp(a).expect("finite ratios"));
    Ok(ratios)
}
