//! Nonuniform time meshes, step-ratio profiles and the ratio conditions
//! that govern stability of variable-step BDF2.
//!
//! Indices follow the usual numerical-analysis convention: levels `t_0..=t_N`,
//! steps `tau_1..=tau_N`, ratios `r_2..=r_N`. The accessors take these
//! 1-based indices directly.

use std::io::{Read, Write};

use rand::distributions::{Distribution, Open01};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};

/// Relative tolerance for `sum(tau) == T`.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Positive root of `2 + 3r - r^2 = 0`, i.e. `(3 + sqrt(17)) / 2 ≈ 3.561`.
///
/// Every step ratio at or below this value keeps the BDF2 kernels positive
/// semi-definite. The condition is sufficient only.
pub fn s1_ratio_bound() -> f64 {
    (3.0 + 17f64.sqrt()) / 2.0
}

/// `1 + sqrt(2)`, the classical zero-stability bound on step ratios. Ratios
/// strictly below it give `r^2 / (1 + 2r) < 1`.
pub fn grigorieff_bound() -> f64 {
    1.0 + 2f64.sqrt()
}

/// The portable generator used for every random mesh.
pub fn mesh_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMesh {
    t: Vec<f64>,
    tau: Vec<f64>,
}

impl TimeMesh {
    /// Builds a mesh from steps `tau_1..=tau_N`, starting at `t_0 = 0`.
    pub fn from_steps(tau: Vec<f64>) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::InvalidArgument("a mesh needs at least one step".into()));
        }
        if let Some((k, &bad)) = tau
            .iter()
            .enumerate()
            .find(|(_, &s)| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "step tau_{} = {bad} is not a positive finite number",
                k + 1
            )));
        }
        let mut t = Vec::with_capacity(tau.len() + 1);
        t.push(0.0);
        let mut acc = 0.0;
        for &s in &tau {
            acc += s;
            t.push(acc);
        }
        Ok(Self { t, tau })
    }

    /// Builds a mesh from levels `t_0 = 0 < t_1 < ... < t_N`.
    pub fn from_levels(t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(Error::InvalidArgument("a mesh needs at least two levels".into()));
        }
        if t[0] != 0.0 {
            return Err(Error::InvalidArgument(format!("t_0 must be 0, got {}", t[0])));
        }
        let mut tau = Vec::with_capacity(t.len() - 1);
        for k in 1..t.len() {
            let s = t[k] - t[k - 1];
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "levels must be strictly increasing (t_{} = {}, t_{} = {})",
                    k - 1,
                    t[k - 1],
                    k,
                    t[k]
                )));
            }
            tau.push(s);
        }
        Ok(Self { t, tau })
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.tau.len()
    }

    pub fn final_time(&self) -> f64 {
        self.t[self.tau.len()]
    }

    pub fn levels(&self) -> &[f64] {
        &self.t
    }

    pub fn steps(&self) -> &[f64] {
        &self.tau
    }

    /// `t_n` for `0 <= n <= N`.
    pub fn level(&self, n: usize) -> f64 {
        self.t[n]
    }

    /// `tau_k` for `1 <= k <= N`.
    pub fn step(&self, k: usize) -> f64 {
        self.tau[k - 1]
    }

    /// `r_k = tau_k / tau_{k-1}` for `2 <= k <= N`.
    pub fn ratio(&self, k: usize) -> f64 {
        self.tau[k - 1] / self.tau[k - 2]
    }

    /// Largest step `max tau_k`.
    pub fn max_step(&self) -> f64 {
        self.tau.iter().copied().fold(0.0, f64::max)
    }

    /// A copy with every step multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::from_steps(self.tau.iter().map(|s| s * factor).collect())
    }
}

fn check_shape(final_time: f64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("step count must be at least 1".into()));
    }
    if !(final_time > 0.0 && final_time.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "final time must be positive, got {final_time}"
        )));
    }
    Ok(())
}

fn normalize(raw: &mut [f64], final_time: f64) {
    let sum: f64 = raw.iter().sum();
    let scale = final_time / sum;
    for s in raw.iter_mut() {
        *s *= scale;
    }
}

pub fn uniform_mesh(final_time: f64, n: usize) -> Result<TimeMesh> {
    check_shape(final_time, n)?;
    let t = (0..=n)
        .map(|k| if k == n { final_time } else { final_time * k as f64 / n as f64 })
        .collect();
    TimeMesh::from_levels(t)
}

/// Random steps `tau_k = T * e_k / sum(e)` with `e_k` uniform on `(0, 1)`.
pub fn random_mesh(final_time: f64, n: usize, seed: u64) -> Result<TimeMesh> {
    check_shape(final_time, n)?;
    let mut rng = mesh_rng(seed);
    let mut tau: Vec<f64> = (0..n).map(|_| Open01.sample(&mut rng)).collect();
    normalize(&mut tau, final_time);
    TimeMesh::from_steps(tau)
}

/// Random mesh whose step ratios never exceed `r_cap`.
///
/// Raw uniform steps are swept forward with `tau_k <- min(tau_k, cap * tau_{k-1})`
/// and renormalized, at most ten times. A final pass shaves single ulps where
/// renormalization rounding pushed a ratio past the cap.
pub fn capped_random_mesh(final_time: f64, n: usize, seed: u64, r_cap: f64) -> Result<TimeMesh> {
    check_shape(final_time, n)?;
    if !(r_cap >= 1e-3) || !r_cap.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ratio cap must be at least 1e-3, got {r_cap}"
        )));
    }
    let mut rng = mesh_rng(seed);
    let mut tau: Vec<f64> = (0..n).map(|_| Open01.sample(&mut rng)).collect();
    // clip slightly inside the cap so rescaling cannot round across it
    let clip = r_cap * (1.0 - 8.0 * f64::EPSILON);
    for _ in 0..10 {
        let mut clipped = false;
        for k in 1..n {
            let limit = clip * tau[k - 1];
            if tau[k] > limit {
                tau[k] = limit;
                clipped = true;
            }
        }
        normalize(&mut tau, final_time);
        if !clipped {
            break;
        }
    }
    for k in 1..n {
        while tau[k] / tau[k - 1] > r_cap {
            tau[k] = tau[k].next_down();
        }
    }
    if tau.iter().any(|&s| s <= 0.0 || !s.is_normal()) {
        return Err(Error::InvalidArgument(format!(
            "ratio cap {r_cap} is too small for {n} steps in floating point"
        )));
    }
    TimeMesh::from_steps(tau)
}

/// Steps growing (or shrinking) by the constant factor `ratio`.
pub fn geometric_mesh(final_time: f64, n: usize, ratio: f64) -> Result<TimeMesh> {
    check_shape(final_time, n)?;
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("geometric ratio must be positive, got {ratio}")));
    }
    // anchor at the largest step so the tiny end never underflows first
    let anchor = if ratio >= 1.0 { n as i32 - 1 } else { 0 };
    let mut tau: Vec<f64> = (0..n as i32).map(|k| ratio.powi(k - anchor)).collect();
    normalize(&mut tau, final_time);
    TimeMesh::from_steps(tau)
}

/// Step-ratio statistics relative to the S1 bound and the `1 + sqrt(2)` bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioProfile {
    /// `r_2..=r_N`, stored 0-based.
    pub r: Vec<f64>,
    pub r_max: f64,
    /// Ratios in the closed interval `[1 + sqrt(2), (3 + sqrt(17)) / 2]`.
    pub n0_count: usize,
    /// Ratios strictly above `(3 + sqrt(17)) / 2`.
    pub n1_count: usize,
    /// Largest ratio strictly below `1 + sqrt(2)`, 0 if none.
    pub r_c: f64,
    /// Largest ratio inside the `n0` interval, 0 if none.
    pub r_hat_c: f64,
}

impl RatioProfile {
    /// `r_k` for `2 <= k <= N`.
    pub fn ratio(&self, k: usize) -> f64 {
        self.r[k - 2]
    }

    /// Number of steps of the underlying mesh.
    pub fn n_steps(&self) -> usize {
        self.r.len() + 1
    }
}

pub fn ratio_profile(mesh: &TimeMesh) -> RatioProfile {
    let r: Vec<f64> = (2..=mesh.n_steps()).map(|k| mesh.ratio(k)).collect();
    let (low, high) = (grigorieff_bound(), s1_ratio_bound());
    let mut profile = RatioProfile {
        r_max: 0.0,
        n0_count: 0,
        n1_count: 0,
        r_c: 0.0,
        r_hat_c: 0.0,
        r: Vec::new(),
    };
    for &rk in &r {
        profile.r_max = profile.r_max.max(rk);
        if rk < low {
            profile.r_c = profile.r_c.max(rk);
        } else if rk <= high {
            profile.n0_count += 1;
            profile.r_hat_c = profile.r_hat_c.max(rk);
        } else {
            profile.n1_count += 1;
        }
    }
    profile.r = r;
    profile
}

/// True iff every ratio satisfies `r_k <= (3 + sqrt(17)) / 2`.
pub fn check_s1(profile: &RatioProfile) -> bool {
    let bound = s1_ratio_bound();
    profile.r.iter().all(|&rk| rk <= bound)
}

/// `Gamma_n = sum_{k=2}^{n-2} max(0, r_k - r_{k+2})`, zero for `n < 4`.
pub fn gamma_n(profile: &RatioProfile, n: usize) -> Result<f64> {
    check_index(n, 1, profile.n_steps())?;
    Ok((2..n.saturating_sub(1))
        .map(|k| (profile.ratio(k) - profile.ratio(k + 2)).max(0.0))
        .sum())
}

#[derive(Debug, Serialize, Deserialize)]
struct LevelRecord {
    k: usize,
    t_k: f64,
}

/// Writes the `k,t_k` CSV form of a mesh.
pub fn write_mesh_csv<W: Write>(mesh: &TimeMesh, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for (k, &t_k) in mesh.levels().iter().enumerate() {
        out.serialize(LevelRecord { k, t_k })?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the `k,t_k` CSV form; rows must list `k = 0, 1, ..., N` in order.
pub fn read_mesh_csv<R: Read>(reader: R) -> Result<TimeMesh> {
    let mut input = csv::Reader::from_reader(reader);
    let mut t = Vec::new();
    for (expected, row) in input.deserialize::<LevelRecord>().enumerate() {
        let row = row?;
        if row.k != expected {
            return Err(Error::InvalidArgument(format!(
                "mesh file rows out of order: expected k = {expected}, got {}",
                row.k
            )));
        }
        t.push(row.t_k);
    }
    TimeMesh::from_levels(t)
}
