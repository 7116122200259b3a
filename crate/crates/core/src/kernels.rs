//! BDF2 convolution kernels and their discrete orthogonal convolution (DOC)
//! kernels.
//!
//! A variable-step multistep difference quotient is written as a convolution
//! of backward differences, `D v^n = sum_{k=1}^n B^{(n)}_{n-k} (v^k - v^{k-1})`.
//! The DOC kernels `theta^{(n)}_{n-k}` invert that convolution:
//!
//! ```text
//! sum_{j=k}^{n} theta^{(n)}_{n-j} B^{(j)}_{j-k} = delta_{nk}     for 1 <= k <= n.
//! ```
//!
//! [`ConvolutionKernels`] describes any banded kernel family; the DOC
//! recursion and the identity checks are written against it. [`Bdf2Kernels`]
//! is the two-term instance, for which the DOC kernels also have the closed
//! form `theta^{(n)}_{n-k} = (1 / b_0^{(k)}) prod_{i=k+1}^{n} r_i^2 / (1 + 2 r_i)`.

use std::io::Write;
use std::ops::RangeInclusive;

use serde::Serialize;

use crate::error::{check_index, Error, Result};
use crate::mesh::{grigorieff_bound, RatioProfile, TimeMesh};

/// Past this many factors, single-entry products are accumulated in log space.
const LOG_SPACE_THRESHOLD: usize = 512;

/// A family of banded discrete convolution kernels `B^{(n)}_j`, `1 <= n <= N`.
pub trait ConvolutionKernels {
    /// Number of levels `N`.
    fn n_levels(&self) -> usize;

    /// Number of possibly nonzero kernels per level (`B_0 .. B_{w-1}`).
    fn bandwidth(&self) -> usize;

    /// `B^{(n)}_j` for `1 <= n <= N` and `0 <= j < n`; zero outside the band.
    fn kernel(&self, n: usize, j: usize) -> f64;
}

/// DOC row `theta^{(n)}_{n-k}` for `k = 1..=n` (entry `k - 1`), built by the
/// backward recursion
/// `theta^{(n)}_{n-k} = -(1 / B_0^{(k)}) sum_{j=k+1}^{n} theta^{(n)}_{n-j} B^{(j)}_{j-k}`.
pub fn doc_row<K: ConvolutionKernels + ?Sized>(kernels: &K, n: usize) -> Result<Vec<f64>> {
    check_index(n, 1, kernels.n_levels())?;
    let band = kernels.bandwidth();
    let mut theta = vec![0.0; n];
    theta[n - 1] = 1.0 / kernels.kernel(n, 0);
    for k in (1..n).rev() {
        let upper = n.min(k + band - 1);
        let acc: f64 = (k + 1..=upper)
            .map(|j| theta[j - 1] * kernels.kernel(j, j - k))
            .sum();
        theta[k - 1] = -acc / kernels.kernel(k, 0);
    }
    Ok(theta)
}

/// `max_k |sum_{j=k}^{n} theta_{n-j} B^{(j)}_{j-k} - delta_{nk}|` for a given DOC row.
pub fn orthogonality_defect_of<K: ConvolutionKernels + ?Sized>(
    kernels: &K,
    n: usize,
    theta: &[f64],
) -> Result<f64> {
    check_index(n, 1, kernels.n_levels())?;
    if theta.len() != n {
        return Err(Error::InvalidArgument(format!(
            "DOC row for level {n} must have {n} entries, got {}",
            theta.len()
        )));
    }
    let band = kernels.bandwidth();
    let mut worst: f64 = 0.0;
    for k in 1..=n {
        let upper = n.min(k + band - 1);
        let sum: f64 = (k..=upper)
            .map(|j| theta[j - 1] * kernels.kernel(j, j - k))
            .sum();
        let delta = if k == n { 1.0 } else { 0.0 };
        worst = worst.max((sum - delta).abs());
    }
    Ok(worst)
}

/// Orthogonality defect of the recursively built DOC row at level `n`.
pub fn orthogonality_defect<K: ConvolutionKernels + ?Sized>(kernels: &K, n: usize) -> Result<f64> {
    let theta = doc_row(kernels, n)?;
    orthogonality_defect_of(kernels, n, &theta)
}

/// `sum_k w_k sum_{j<=k} B^{(k)}_{k-j} w_j` over the first `w.len()` levels.
pub fn quadratic_form<K: ConvolutionKernels + ?Sized>(kernels: &K, w: &[f64]) -> Result<f64> {
    let n = w.len();
    if n > kernels.n_levels() {
        return Err(Error::InvalidArgument(format!(
            "vector of length {n} exceeds the {} available levels",
            kernels.n_levels()
        )));
    }
    let band = kernels.bandwidth();
    let mut total = 0.0;
    for k in 1..=n {
        let lower = k.saturating_sub(band - 1).max(1);
        let inner: f64 = (lower..=k).map(|j| kernels.kernel(k, k - j) * w[j - 1]).sum();
        total += w[k - 1] * inner;
    }
    Ok(total)
}

/// Per-level two-term BDF2 kernels on a given mesh.
#[derive(Debug, Clone)]
pub struct Bdf2Kernels {
    b0: Vec<f64>,
    b1: Vec<f64>,
    mesh: TimeMesh,
}

/// `r^2 / (1 + 2r)`, the ratio `-b_1 / b_0` at a level with step ratio `r`.
pub fn theta_factor(r: f64) -> f64 {
    r * r / (1.0 + 2.0 * r)
}

pub fn build_bdf2_kernels(mesh: &TimeMesh) -> Bdf2Kernels {
    let n = mesh.n_steps();
    let mut b0 = Vec::with_capacity(n);
    let mut b1 = Vec::with_capacity(n);
    b0.push(1.0 / mesh.step(1));
    b1.push(0.0);
    for k in 2..=n {
        let (tau, r) = (mesh.step(k), mesh.ratio(k));
        b0.push((1.0 + 2.0 * r) / (tau * (1.0 + r)));
        b1.push(-r * r / (tau * (1.0 + r)));
    }
    Bdf2Kernels { b0, b1, mesh: mesh.clone() }
}

impl Bdf2Kernels {
    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn n_levels(&self) -> usize {
        self.b0.len()
    }

    /// `b_0^{(n)}`, `1 <= n <= N`.
    pub fn b0(&self, n: usize) -> f64 {
        self.b0[n - 1]
    }

    /// `b_1^{(n)}`, `2 <= n <= N`; level 1 has no second kernel and returns 0.
    pub fn b1(&self, n: usize) -> f64 {
        self.b1[n - 1]
    }

    /// `r_i^2 / (1 + 2 r_i)` for `2 <= i <= N`.
    pub fn factor(&self, i: usize) -> f64 {
        theta_factor(self.mesh.ratio(i))
    }
}

impl ConvolutionKernels for Bdf2Kernels {
    fn n_levels(&self) -> usize {
        self.b0.len()
    }

    fn bandwidth(&self) -> usize {
        2
    }

    fn kernel(&self, n: usize, j: usize) -> f64 {
        match j {
            0 => self.b0[n - 1],
            1 if n >= 2 => self.b1[n - 1],
            _ => 0.0,
        }
    }
}

/// One row of DOC kernels together with the normalized kernels
/// `theta_hat^{(n)}_{n-k} = theta^{(n)}_{n-k} b_0^{(k)}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocRow {
    pub n: usize,
    /// `theta^{(n)}_{n-k}` at index `k - 1`.
    pub theta: Vec<f64>,
    /// `theta_hat^{(n)}_{n-k}` at index `k - 1`.
    pub theta_hat: Vec<f64>,
}

/// DOC row at level `n` from the generic backward recursion.
pub fn doc_recursive(kernels: &Bdf2Kernels, n: usize) -> Result<DocRow> {
    let theta = doc_row(kernels, n)?;
    let theta_hat = theta.iter().enumerate().map(|(i, th)| th * kernels.b0(i + 1)).collect();
    Ok(DocRow { n, theta, theta_hat })
}

/// `theta_hat^{(n)}_{n-k} = prod_{i=k+1}^{n} r_i^2 / (1 + 2 r_i)`.
pub fn theta_hat(kernels: &Bdf2Kernels, n: usize, k: usize) -> Result<f64> {
    check_index(n, 1, kernels.n_levels())?;
    check_index(k, 1, n)?;
    if n - k > LOG_SPACE_THRESHOLD {
        let log: f64 = (k + 1..=n).map(|i| kernels.factor(i).ln()).sum();
        return Ok(log.exp());
    }
    Ok((k + 1..=n).rev().fold(1.0, |acc, i| acc * kernels.factor(i)))
}

/// Closed-form DOC kernel `theta^{(n)}_{n-k} = theta_hat^{(n)}_{n-k} / b_0^{(k)}`.
pub fn doc_explicit(kernels: &Bdf2Kernels, n: usize, k: usize) -> Result<f64> {
    Ok(theta_hat(kernels, n, k)? / kernels.b0(k))
}

/// All normalized kernels of row `n` by the running product, `O(n)`.
pub fn theta_hat_row(kernels: &Bdf2Kernels, n: usize) -> Result<Vec<f64>> {
    check_index(n, 1, kernels.n_levels())?;
    let mut row = vec![1.0; n];
    for k in (1..n).rev() {
        row[k - 1] = kernels.factor(k + 1) * row[k];
    }
    Ok(row)
}

/// DOC row at level `n` from the closed form.
pub fn doc_explicit_row(kernels: &Bdf2Kernels, n: usize) -> Result<DocRow> {
    let theta_hat = theta_hat_row(kernels, n)?;
    let theta = theta_hat.iter().enumerate().map(|(i, h)| h / kernels.b0(i + 1)).collect();
    Ok(DocRow { n, theta, theta_hat })
}

/// `sum_{j=1}^{n} theta^{(n)}_{n-j}`, identically `tau_n`.
pub fn doc_row_sum(kernels: &Bdf2Kernels, n: usize) -> Result<f64> {
    Ok(doc_explicit_row(kernels, n)?.theta.iter().sum())
}

/// `sum_{k=j}^{n} theta_hat^{(k)}_{k-j}`.
pub fn doc_tail_sum(kernels: &Bdf2Kernels, j: usize, n: usize) -> Result<f64> {
    check_index(n, 1, kernels.n_levels())?;
    check_index(j, 1, n)?;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in j + 1..=n {
        term *= kernels.factor(k);
        sum += term;
    }
    Ok(sum)
}

/// DOC convolution `S_k = sum_{j=1}^{k} theta^{(k)}_{k-j} a_j` for every
/// `k = 1..=a.len()`, via `S_k = f_k S_{k-1} + a_k / b_0^{(k)}`.
pub fn doc_convolve(kernels: &Bdf2Kernels, a: &[f64]) -> Result<Vec<f64>> {
    if a.len() > kernels.n_levels() {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} exceeds the {} available levels",
            a.len(),
            kernels.n_levels()
        )));
    }
    let mut out = Vec::with_capacity(a.len());
    let mut prev = 0.0;
    for (i, &aj) in a.iter().enumerate() {
        let k = i + 1;
        let carried = if k >= 2 { kernels.factor(k) * prev } else { 0.0 };
        prev = carried + aj / kernels.b0(k);
        out.push(prev);
    }
    Ok(out)
}

/// Counts eigenvalues strictly below `x` of the symmetric tridiagonal matrix
/// with diagonal `diag` and off-diagonal `off` (Sturm sequence / LDLᵀ pivots).
fn sturm_count(diag: &[f64], off: &[f64], x: f64, guard: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    for i in 0..diag.len() {
        if i > 0 {
            let prev = if q.abs() < guard { guard.copysign(q) } else { q };
            q = diag[i] - x - off[i - 1] * off[i - 1] / prev;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest eigenvalue of a symmetric tridiagonal matrix by Sturm bisection,
/// to absolute tolerance `1e-14 * ||A||_inf` or 200 iterations.
pub fn tridiagonal_min_eigenvalue(diag: &[f64], off: &[f64]) -> Result<f64> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::InvalidArgument(format!(
            "tridiagonal shape mismatch: {n} diagonal and {} off-diagonal entries",
            off.len()
        )));
    }
    let radius = |i: usize| {
        let left = if i > 0 { off[i - 1].abs() } else { 0.0 };
        let right = if i + 1 < n { off[i].abs() } else { 0.0 };
        left + right
    };
    let norm_inf = (0..n).map(|i| diag[i].abs() + radius(i)).fold(0.0, f64::max);
    if norm_inf == 0.0 {
        return Ok(0.0);
    }
    let mut lo = (0..n).map(|i| diag[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..n).map(|i| diag[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-14 * norm_inf;
    let guard = f64::MIN_POSITIVE.sqrt() * norm_inf;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if sturm_count(diag, off, mid, guard) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Smallest eigenvalue of the `n x n` matrix `B_2` with diagonal `2 b_0^{(k)}`
/// and off-diagonal `b_1^{(k+1)}`. The kernels are positive semi-definite on
/// the first `n` levels iff this is nonnegative.
pub fn psd_min_eigenvalue(kernels: &Bdf2Kernels, n: usize) -> Result<f64> {
    check_index(n, 1, kernels.n_levels())?;
    let diag: Vec<f64> = (1..=n).map(|k| 2.0 * kernels.b0(k)).collect();
    let off: Vec<f64> = (1..n).map(|k| kernels.b1(k + 1)).collect();
    tridiagonal_min_eigenvalue(&diag, &off)
}

/// `C_r = (r_hat^2 / (1 + 2 r_hat))^{n0} (1 + 2 r_c) / (1 + 2 r_c - r_c^2)`.
pub fn c_r_from_parts(r_c: f64, n0: usize, r_hat_c: f64) -> Result<f64> {
    if r_c >= grigorieff_bound() {
        return Err(Error::Domain(format!(
            "r_c = {r_c} is not below 1 + sqrt(2); the tail-sum bound is vacuous"
        )));
    }
    let geometric = (1.0 + 2.0 * r_c) / (1.0 + 2.0 * r_c - r_c * r_c);
    let amplification = if n0 == 0 {
        1.0
    } else {
        theta_factor(r_hat_c).powi(n0 as i32)
    };
    Ok(amplification * geometric)
}

/// Mesh constant bounding every DOC tail sum under the S2 condition.
pub fn c_r_constant(profile: &RatioProfile) -> Result<f64> {
    c_r_from_parts(profile.r_c, profile.n0_count, profile.r_hat_c)
}

/// Materialized DOC rows for a window of levels.
#[derive(Debug, Clone, Serialize)]
pub struct DocKernels {
    pub rows: Vec<DocRow>,
}

pub fn doc_table(kernels: &Bdf2Kernels, window: RangeInclusive<usize>) -> Result<DocKernels> {
    let (a, b) = (*window.start(), *window.end());
    check_index(b, 1, kernels.n_levels())?;
    check_index(a, 1, b)?;
    let rows = window.map(|n| doc_explicit_row(kernels, n)).collect::<Result<_>>()?;
    Ok(DocKernels { rows })
}

#[derive(Serialize)]
struct KernelRecord {
    n: usize,
    k: usize,
    b0: f64,
    b1: Option<f64>,
    theta: f64,
    theta_hat: f64,
}

/// CSV dump `n,k,b0,b1,theta,theta_hat` of a DOC window; `b0`/`b1` are the
/// level-`k` kernels, with `b1` left empty at `k = 1`.
pub fn write_kernel_csv<W: Write>(kernels: &Bdf2Kernels, table: &DocKernels, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in &table.rows {
        for k in 1..=row.n {
            out.serialize(KernelRecord {
                n: row.n,
                k,
                b0: kernels.b0(k),
                b1: (k >= 2).then(|| kernels.b1(k)),
                theta: row.theta[k - 1],
                theta_hat: row.theta_hat[k - 1],
            })?;
        }
    }
    out.flush()?;
    Ok(())
}
