//! Spatial operators `A = eps * Laplacian + kappa` and their discrete inner
//! products.
//!
//! Three discretizations implement [`SpatialOperator`]:
//!
//! * [`ScalarOperator`] is the scalar test equation `y' = lambda y` with complex
//!   `lambda`, stored as a real 2-vector `(Re y, Im y)`.
//! * [`SpectralOperator`] is Fourier pseudo-spectral on the periodic square
//!   `(0, L)^2` with constant `kappa`.
//! * [`FdDirichletOperator`] is the 5-point finite-difference Laplacian with
//!   homogeneous Dirichlet data and a variable reaction coefficient.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};

/// Side length of the square spatial domain.
pub const DOMAIN_LENGTH: f64 = 2.0;

/// Values on an operator's grid, row-major `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
    shape: (usize, usize),
}

impl Field {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self { values: vec![0.0; shape.0 * shape.1], shape }
    }

    pub fn from_values(shape: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.0 * shape.1 {
            return Err(Error::GridMismatch { expected: shape.0 * shape.1, got: values.len() });
        }
        Ok(Self { values, shape })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Field {
        debug_assert_eq!(self.shape, other.shape);
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Field { values, shape: self.shape }
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field { values: self.values.iter().map(|x| a * x).collect(), shape: self.shape }
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Field) {
        debug_assert_eq!(self.shape, other.shape);
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Snapshot CSV `i,j,value`, row-major.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        #[derive(Serialize)]
        struct Record {
            i: usize,
            j: usize,
            value: f64,
        }
        let mut out = csv::Writer::from_writer(writer);
        for i in 0..self.shape.0 {
            for j in 0..self.shape.1 {
                out.serialize(Record { i, j, value: self.values[i * self.shape.1 + j] })?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Discrete L² norm and H¹ seminorm of a field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub l2: f64,
    pub h1_semi: f64,
}

/// Result of a shifted solve `(sigma I - A) u = rhs`.
#[derive(Debug, Clone)]
pub struct Solved {
    pub field: Field,
    /// Iterations spent by an iterative solver; 0 for direct solves.
    pub iterations: usize,
}

/// A linear spatial operator together with its grid and inner product.
pub trait SpatialOperator: Sync {
    fn shape(&self) -> (usize, usize);

    /// `A u`.
    fn apply(&self, u: &Field) -> Result<Field>;

    /// Solves `(sigma I - A) u = rhs`; requires `sigma > reaction_max()`.
    fn shifted_solve(&self, sigma: f64, rhs: &Field) -> Result<Solved>;

    /// Discrete L² inner product.
    fn inner(&self, u: &Field, v: &Field) -> f64;

    fn norms(&self, u: &Field) -> Result<Norms>;

    /// Upper bound of the zeroth-order (reaction) part of `A`.
    fn reaction_max(&self) -> f64;

    /// Samples `f(t, x, y)` at the grid points.
    fn project(&self, t: f64, f: &dyn Fn(f64, f64, f64) -> f64) -> Field;

    fn zeros(&self) -> Field {
        Field::zeros(self.shape())
    }

    fn check(&self, u: &Field) -> Result<()> {
        let (a, b) = self.shape();
        if u.shape() != (a, b) {
            return Err(Error::GridMismatch { expected: a * b, got: u.len() });
        }
        Ok(())
    }

    /// `<-A u, u>`, the discrete `eps |u|_1^2 + <-kappa u, u>`.
    fn energy_form(&self, u: &Field) -> Result<f64> {
        Ok(-self.inner(&self.apply(u)?, u))
    }

    fn l2_norm(&self, u: &Field) -> f64 {
        self.inner(u, u).max(0.0).sqrt()
    }
}

fn check_shift(sigma: f64, reaction_max: f64) -> Result<()> {
    if !(sigma - reaction_max > 0.0) {
        return Err(Error::Domain(format!(
            "shift {sigma} does not exceed the reaction bound {reaction_max}; \
             the shifted operator is not positive definite"
        )));
    }
    Ok(())
}

/// Scalar test operator `u -> lambda u` with complex `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarOperator {
    pub lambda: Complex<f64>,
}

impl ScalarOperator {
    pub fn new(lambda: Complex<f64>) -> Self {
        Self { lambda }
    }

    pub fn real(lambda: f64) -> Self {
        Self { lambda: Complex::new(lambda, 0.0) }
    }

    pub fn field(value: Complex<f64>) -> Field {
        Field { values: vec![value.re, value.im], shape: (1, 2) }
    }

    pub fn value(u: &Field) -> Complex<f64> {
        Complex::new(u.values[0], u.values[1])
    }
}

impl SpatialOperator for ScalarOperator {
    fn shape(&self) -> (usize, usize) {
        (1, 2)
    }

    fn apply(&self, u: &Field) -> Result<Field> {
        self.check(u)?;
        Ok(Self::field(self.lambda * Self::value(u)))
    }

    fn shifted_solve(&self, sigma: f64, rhs: &Field) -> Result<Solved> {
        self.check(rhs)?;
        check_shift(sigma, self.lambda.re)?;
        let field = Self::field(Self::value(rhs) / (Complex::new(sigma, 0.0) - self.lambda));
        Ok(Solved { field, iterations: 0 })
    }

    fn inner(&self, u: &Field, v: &Field) -> f64 {
        u.values[0] * v.values[0] + u.values[1] * v.values[1]
    }

    fn norms(&self, u: &Field) -> Result<Norms> {
        self.check(u)?;
        Ok(Norms { l2: Self::value(u).norm(), h1_semi: 0.0 })
    }

    fn reaction_max(&self) -> f64 {
        self.lambda.re
    }

    fn project(&self, t: f64, f: &dyn Fn(f64, f64, f64) -> f64) -> Field {
        Self::field(Complex::new(f(t, 0.0, 0.0), 0.0))
    }
}

/// Fourier pseudo-spectral `eps * Laplacian + kappa` on the periodic square.
#[derive(Clone)]
pub struct SpectralOperator {
    modes: usize,
    length: f64,
    epsilon: f64,
    kappa: f64,
    /// `|k|^2` per mode, row-major.
    wavenumber_sq: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralOperator")
            .field("modes", &self.modes)
            .field("length", &self.length)
            .field("epsilon", &self.epsilon)
            .field("kappa", &self.kappa)
            .finish()
    }
}

impl SpectralOperator {
    pub fn new(modes: usize, epsilon: f64, kappa: f64) -> Result<Self> {
        if modes < 4 || modes % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "spectral grid size must be even and at least 4, got {modes}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("diffusivity must be positive, got {epsilon}")));
        }
        let length = DOMAIN_LENGTH;
        let wave = |p: usize| {
            let m = if p < modes / 2 { p as f64 } else { p as f64 - modes as f64 };
            2.0 * PI * m / length
        };
        let mut wavenumber_sq = Vec::with_capacity(modes * modes);
        for p in 0..modes {
            for q in 0..modes {
                wavenumber_sq.push(wave(p).powi(2) + wave(q).powi(2));
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            modes,
            length,
            epsilon,
            kappa,
            wavenumber_sq,
            forward: planner.plan_fft_forward(modes),
            inverse: planner.plan_fft_inverse(modes),
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.modes as f64
    }

    /// Symbol `-eps |k|^2 + kappa` of mode `(p, q)` in FFT ordering.
    pub fn symbol(&self, p: usize, q: usize) -> f64 {
        -self.epsilon * self.wavenumber_sq[p * self.modes + q] + self.kappa
    }

    fn transform(&self, data: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        let m = self.modes;
        let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(data, &mut scratch);
        let mut transposed = vec![Complex::new(0.0, 0.0); m * m];
        for i in 0..m {
            for j in 0..m {
                transposed[j * m + i] = data[i * m + j];
            }
        }
        plan.process_with_scratch(&mut transposed, &mut scratch);
        for i in 0..m {
            for j in 0..m {
                data[i * m + j] = transposed[j * m + i];
            }
        }
    }

    fn to_modes(&self, u: &Field) -> Vec<Complex<f64>> {
        let mut data: Vec<Complex<f64>> = u.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        data
    }

    fn from_modes(&self, mut data: Vec<Complex<f64>>) -> Field {
        self.transform(&mut data, &self.inverse);
        let scale = 1.0 / (self.modes * self.modes) as f64;
        Field {
            values: data.iter().map(|c| c.re * scale).collect(),
            shape: (self.modes, self.modes),
        }
    }

    fn diagonal(&self, u: &Field, weight: impl Fn(f64) -> f64) -> Field {
        let mut data = self.to_modes(u);
        for (c, &k2) in data.iter_mut().zip(&self.wavenumber_sq) {
            *c *= weight(-self.epsilon * k2 + self.kappa);
        }
        self.from_modes(data)
    }
}

impl SpatialOperator for SpectralOperator {
    fn shape(&self) -> (usize, usize) {
        (self.modes, self.modes)
    }

    fn apply(&self, u: &Field) -> Result<Field> {
        self.check(u)?;
        Ok(self.diagonal(u, |s| s))
    }

    fn shifted_solve(&self, sigma: f64, rhs: &Field) -> Result<Solved> {
        self.check(rhs)?;
        check_shift(sigma, self.kappa)?;
        Ok(Solved { field: self.diagonal(rhs, |s| 1.0 / (sigma - s)), iterations: 0 })
    }

    fn inner(&self, u: &Field, v: &Field) -> f64 {
        let h = self.spacing();
        h * h * u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum::<f64>()
    }

    fn norms(&self, u: &Field) -> Result<Norms> {
        self.check(u)?;
        let data = self.to_modes(u);
        let m2 = (self.modes * self.modes) as f64;
        let h = self.spacing();
        let grad: f64 = data.iter().zip(&self.wavenumber_sq).map(|(c, k2)| k2 * c.norm_sqr()).sum();
        Ok(Norms { l2: self.l2_norm(u), h1_semi: (h * h * grad / m2).sqrt() })
    }

    fn reaction_max(&self) -> f64 {
        self.kappa
    }

    fn project(&self, t: f64, f: &dyn Fn(f64, f64, f64) -> f64) -> Field {
        let (m, h) = (self.modes, self.spacing());
        let mut values = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                values.push(f(t, i as f64 * h, j as f64 * h));
            }
        }
        Field { values, shape: (m, m) }
    }
}

/// 5-point `eps * Laplacian + kappa(x)` on the interior of `(0, L)^2` with
/// homogeneous Dirichlet data.
#[derive(Debug, Clone)]
pub struct FdDirichletOperator {
    intervals: usize,
    length: f64,
    epsilon: f64,
    kappa_field: Vec<f64>,
    kappa_star: f64,
}

/// Relative residual target of the conjugate-gradient solve.
pub const CG_TOLERANCE: f64 = 1e-10;

impl FdDirichletOperator {
    /// `intervals` = `M`, giving `(M - 1)^2` interior unknowns with `h = L / M`.
    pub fn new(
        intervals: usize,
        epsilon: f64,
        kappa: impl Fn(f64, f64) -> f64,
        kappa_star: f64,
    ) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 intervals per side, got {intervals}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("diffusivity must be positive, got {epsilon}")));
        }
        let length = DOMAIN_LENGTH;
        let h = length / intervals as f64;
        let n = intervals - 1;
        let mut kappa_field = Vec::with_capacity(n * n);
        for i in 1..=n {
            for j in 1..=n {
                kappa_field.push(kappa(i as f64 * h, j as f64 * h));
            }
        }
        let sup = kappa_field.iter().fold(0.0f64, |m, k| m.max(k.abs()));
        if sup > kappa_star * (1.0 + 1e-14) {
            return Err(Error::InvalidArgument(format!(
                "reaction coefficient reaches {sup}, above the stated bound {kappa_star}"
            )));
        }
        Ok(Self { intervals, length, epsilon, kappa_field, kappa_star })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.intervals as f64
    }

    pub fn kappa_star(&self) -> f64 {
        self.kappa_star
    }

    pub fn kappa_field(&self) -> &[f64] {
        &self.kappa_field
    }

    fn interior(&self) -> usize {
        self.intervals - 1
    }

    /// 5-point Laplacian with zero boundary values.
    fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        let n = self.interior();
        let inv_h2 = 1.0 / (self.spacing() * self.spacing());
        for i in 0..n {
            for j in 0..n {
                let c = u[i * n + j];
                let up = if i > 0 { u[(i - 1) * n + j] } else { 0.0 };
                let down = if i + 1 < n { u[(i + 1) * n + j] } else { 0.0 };
                let left = if j > 0 { u[i * n + j - 1] } else { 0.0 };
                let right = if j + 1 < n { u[i * n + j + 1] } else { 0.0 };
                out[i * n + j] = (up + down + left + right - 4.0 * c) * inv_h2;
            }
        }
    }

    fn apply_shifted(&self, sigma: f64, u: &[f64], out: &mut [f64]) {
        self.laplacian(u, out);
        for ((o, &x), &k) in out.iter_mut().zip(u).zip(&self.kappa_field) {
            *o = sigma * x - self.epsilon * *o - k * x;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SpatialOperator for FdDirichletOperator {
    fn shape(&self) -> (usize, usize) {
        (self.interior(), self.interior())
    }

    fn apply(&self, u: &Field) -> Result<Field> {
        self.check(u)?;
        let mut out = self.zeros();
        self.apply_shifted(0.0, &u.values, &mut out.values);
        for v in out.values.iter_mut() {
            *v = -*v;
        }
        Ok(out)
    }

    fn shifted_solve(&self, sigma: f64, rhs: &Field) -> Result<Solved> {
        self.check(rhs)?;
        check_shift(sigma, self.reaction_max())?;
        let b = &rhs.values;
        let b_norm = dot(b, b).sqrt();
        let mut x = vec![0.0; b.len()];
        if b_norm == 0.0 {
            return Ok(Solved { field: Field { values: x, shape: rhs.shape }, iterations: 0 });
        }
        let mut r = b.clone();
        let mut p = r.clone();
        let mut ap = vec![0.0; b.len()];
        let mut rr = dot(&r, &r);
        let max_iter = 10 * self.intervals * self.intervals;
        let target = CG_TOLERANCE * b_norm;
        for iter in 1..=max_iter {
            self.apply_shifted(sigma, &p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= target {
                // confirm against the true residual, not the recurrence
                self.apply_shifted(sigma, &x, &mut ap);
                let true_res: f64 =
                    b.iter().zip(&ap).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt();
                if true_res <= target {
                    return Ok(Solved {
                        field: Field { values: x, shape: rhs.shape },
                        iterations: iter,
                    });
                }
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
        }
        Err(Error::NumericalFailure(format!(
            "conjugate gradients did not reach relative residual {CG_TOLERANCE} in {max_iter} iterations"
        )))
    }

    fn inner(&self, u: &Field, v: &Field) -> f64 {
        let h = self.spacing();
        h * h * dot(&u.values, &v.values)
    }

    fn norms(&self, u: &Field) -> Result<Norms> {
        self.check(u)?;
        let n = self.interior();
        let at = |i: usize, j: usize| -> f64 {
            if i == 0 || j == 0 || i > n || j > n {
                0.0
            } else {
                u.values[(i - 1) * n + (j - 1)]
            }
        };
        // forward differences over every edge, boundary edges included
        let mut sum = 0.0;
        for i in 0..=n {
            for j in 1..=n {
                sum += (at(i + 1, j) - at(i, j)).powi(2) + (at(j, i + 1) - at(j, i)).powi(2);
            }
        }
        Ok(Norms { l2: self.l2_norm(u), h1_semi: sum.sqrt() })
    }

    fn reaction_max(&self) -> f64 {
        self.kappa_field.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn project(&self, t: f64, f: &dyn Fn(f64, f64, f64) -> f64) -> Field {
        let (n, h) = (self.interior(), self.spacing());
        let mut values = Vec::with_capacity(n * n);
        for i in 1..=n {
            for j in 1..=n {
                values.push(f(t, i as f64 * h, j as f64 * h));
            }
        }
        Field { values, shape: (n, n) }
    }
}

/// Manufactured heat solution `u = exp(-t) sin(2 pi x) cos(2 pi y)` for
/// `u_t = eps Laplacian u + kappa u + f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleModeSolution {
    pub epsilon: f64,
    pub kappa: f64,
}

impl SingleModeSolution {
    pub fn shape_function(x: f64, y: f64) -> f64 {
        (2.0 * PI * x).sin() * (2.0 * PI * y).cos()
    }

    pub fn value(&self, t: f64, x: f64, y: f64) -> f64 {
        (-t).exp() * Self::shape_function(x, y)
    }

    /// `d^order u / dt^order`.
    pub fn time_derivative(&self, order: u32, t: f64, x: f64, y: f64) -> f64 {
        let sign = if order % 2 == 0 { 1.0 } else { -1.0 };
        sign * self.value(t, x, y)
    }

    /// `u_t - eps Laplacian u - kappa u`, using the continuous Laplacian
    /// eigenvalue `-8 pi^2`.
    pub fn forcing(&self, t: f64, x: f64, y: f64) -> f64 {
        (-1.0 + 8.0 * PI * PI * self.epsilon - self.kappa) * self.value(t, x, y)
    }
}
