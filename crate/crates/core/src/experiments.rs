//! Convergence tables for the manufactured heat problem and randomized
//! stability suites, with CSV / JSON / markdown emitters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::distributions::{Distribution, Uniform};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{
    energy_series, l2_stability_ratio, march, zero_stability_probe, Bdf2Config, Problem, SineRhs,
    StartingScheme,
};
use crate::kernels::{build_bdf2_kernels, orthogonality_defect, psd_min_eigenvalue, quadratic_form};
use crate::mesh::{
    capped_random_mesh, geometric_mesh, mesh_rng, random_mesh, ratio_profile, s1_ratio_bound,
    uniform_mesh, TimeMesh,
};
use crate::spatial::{SingleModeSolution, SpatialOperator, SpectralOperator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshFamily {
    Random,
    CappedRandom,
    Uniform,
    Geometric,
}

impl FromStr for MeshFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "capped-random" => Ok(Self::CappedRandom),
            "uniform" => Ok(Self::Uniform),
            "geometric" => Ok(Self::Geometric),
            other => Err(Error::InvalidArgument(format!("unknown mesh family '{other}'"))),
        }
    }
}

/// Ratio used by the geometric family.
pub const GEOMETRIC_RATIO: f64 = 1.01;

/// Seed of the mesh with `n` steps inside a run seeded by `seed`.
pub fn mesh_seed(seed: u64, n: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ n as u64
}

pub fn build_mesh(family: MeshFamily, final_time: f64, n: usize, seed: u64) -> Result<TimeMesh> {
    match family {
        MeshFamily::Random => random_mesh(final_time, n, seed),
        MeshFamily::CappedRandom => capped_random_mesh(final_time, n, seed, s1_ratio_bound()),
        MeshFamily::Uniform => uniform_mesh(final_time, n),
        MeshFamily::Geometric => geometric_mesh(final_time, n, GEOMETRIC_RATIO),
    }
}

/// Parses a mesh generator spec:
/// `uniform:T:N`, `random:T:N:seed`, `capped-random:T:N:seed[:cap]`, `geometric:T:N:ratio`.
pub fn parse_mesh_spec(spec: &str) -> Result<TimeMesh> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidArgument(format!("malformed mesh spec '{spec}'"));
    let num = |i: usize| -> Result<f64> { parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
    let int = |i: usize| -> Result<u64> { parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
    let (arity, mesh) = match parts[0] {
        "uniform" => (3, uniform_mesh(num(1)?, int(2)? as usize)?),
        "random" => (4, random_mesh(num(1)?, int(2)? as usize, int(3)?)?),
        "capped-random" => {
            let cap = if parts.len() > 4 { num(4)? } else { s1_ratio_bound() };
            (parts.len().max(4), capped_random_mesh(num(1)?, int(2)? as usize, int(3)?, cap)?)
        }
        "geometric" => (4, geometric_mesh(num(1)?, int(2)? as usize, num(3)?)?),
        _ => return Err(bad()),
    };
    if parts.len() != arity || arity > 5 {
        return Err(bad());
    }
    Ok(mesh)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub epsilon: f64,
    pub final_time: f64,
    pub n_list: Vec<usize>,
    pub seed: u64,
    pub mesh_family: MeshFamily,
    pub starting_scheme: StartingScheme,
    pub modes: usize,
}

impl ExperimentConfig {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            final_time: 1.0,
            n_list: vec![64, 128, 256, 512, 1024],
            seed,
            mesh_family: MeshFamily::Random,
            starting_scheme: StartingScheme::Bdf1,
            modes: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.final_time > 0.0) {
            return Err(Error::InvalidArgument("epsilon and T must be positive".into()));
        }
        if self.n_list.first().is_some_and(|&n| n < 2) {
            return Err(Error::InvalidArgument("step counts must be at least 2".into()));
        }
        if self.n_list.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::InvalidArgument(format!(
                "N list must double at every entry, got {:?}",
                self.n_list
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub e_n: f64,
    pub tau_max: f64,
    /// `log2(e(N/2) / e(N))`; absent on the first row.
    pub order: Option<f64>,
    pub r_max: f64,
    pub n1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn orders(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.order).collect()
    }

    /// Least-squares slope of `-log2 e(N)` against `log2 N`.
    pub fn fitted_order(&self) -> Option<f64> {
        if self.rows.len() < 2 {
            return None;
        }
        let pts: Vec<(f64, f64)> =
            self.rows.iter().map(|r| ((r.n as f64).log2(), -r.e_n.log2())).collect();
        let m = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / m, b + y / m));
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Final-time L² error of one manufactured-problem solve.
pub fn manufactured_error(
    op: &SpectralOperator,
    mesh: &TimeMesh,
    starting_scheme: StartingScheme,
) -> Result<f64> {
    let sol = SingleModeSolution { epsilon: op.epsilon(), kappa: op.kappa() };
    let forcing = |t: f64| op.project(t, &|t, x, y| sol.forcing(t, x, y));
    let reference = |t: f64| op.project(t, &|t, x, y| sol.value(t, x, y));
    let problem = Problem { u0: reference(0.0), forcing: Some(&forcing), reference: Some(&reference) };
    let config = Bdf2Config {
        starting_scheme,
        monitor_energy: false,
        monitor_l2: false,
        ..Bdf2Config::default()
    };
    let (u_n, _) = march(op, mesh, &config, &problem)?;
    let exact = reference(mesh.final_time());
    Ok(op.l2_norm(&u_n.combine(1.0, &exact, -1.0)))
}

pub fn run_convergence(config: &ExperimentConfig) -> Result<ConvergenceTable> {
    config.validate()?;
    let op = SpectralOperator::new(config.modes, config.epsilon, 0.0)?;
    let raw: Vec<ConvergenceRow> = config
        .n_list
        .par_iter()
        .map(|&n| {
            let mesh = build_mesh(config.mesh_family, config.final_time, n, mesh_seed(config.seed, n))?;
            let profile = ratio_profile(&mesh);
            let e_n = manufactured_error(&op, &mesh, config.starting_scheme)?;
            Ok(ConvergenceRow {
                n,
                e_n,
                tau_max: mesh.max_step(),
                order: None,
                r_max: profile.r_max,
                n1: profile.n1_count,
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = raw;
    for i in 1..rows.len() {
        rows[i].order = Some((rows[i - 1].e_n / rows[i].e_n).log2());
    }
    info!("convergence run eps = {}, seed = {}: {} rows", config.epsilon, config.seed, rows.len());
    Ok(ConvergenceTable { rows })
}

/// Size of a randomized stability run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteCounts {
    /// Random meshes per suite.
    pub meshes: usize,
    /// Steps per mesh.
    pub steps: usize,
}

impl Default for SuiteCounts {
    fn default() -> Self {
        Self { meshes: 50, steps: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub suite: String,
    pub checked: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub limit: f64,
    pub passed: bool,
    /// Informational entries never count as failures.
    pub informational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub entries: Vec<SuiteEntry>,
}

impl StabilityReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed || e.informational)
    }
}

/// Largest ratio allowed in the un-gated PSD probe.
pub const UNGATED_CAP: f64 = 10.0;

fn entry_max(suite: &str, values: &[f64], limit: f64) -> SuiteEntry {
    let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    SuiteEntry {
        suite: suite.into(),
        checked: values.len(),
        worst,
        limit,
        passed: worst <= limit,
        informational: false,
    }
}

fn entry_min(suite: &str, values: &[f64], limit: f64) -> SuiteEntry {
    let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
    SuiteEntry {
        suite: suite.into(),
        checked: values.len(),
        worst,
        limit,
        passed: worst >= limit,
        informational: false,
    }
}

struct SuiteSample {
    defect: f64,
    quadratic: f64,
    eigen: f64,
    energy: f64,
    l2: f64,
    amplification: f64,
    zero_stability: f64,
    ungated_eigen: f64,
}

fn suite_sample(seed: u64, index: usize, steps: usize, op: &SpectralOperator) -> Result<SuiteSample> {
    let mesh_id = mesh_seed(seed, index);
    let mesh = capped_random_mesh(1.0, steps, mesh_id, s1_ratio_bound())?;
    let kernels = build_bdf2_kernels(&mesh);
    let defect = orthogonality_defect(&kernels, steps)?;

    let mut rng = mesh_rng(mesh_id ^ 0xA5A5);
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let scale = (1..=steps).map(|k| kernels.b0(k)).fold(0.0, f64::max);
    let mut quadratic = f64::INFINITY;
    for _ in 0..10 {
        let w: Vec<f64> = (0..steps).map(|_| unit.sample(&mut rng)).collect();
        let norm2: f64 = w.iter().map(|x| x * x).sum();
        quadratic = quadratic.min(quadratic_form(&kernels, &w)? / (scale * norm2));
    }
    let eigen = psd_min_eigenvalue(&kernels, steps)? / scale;

    let sol = SingleModeSolution { epsilon: op.epsilon(), kappa: 0.0 };
    let u0 = op.project(0.0, &|t, x, y| sol.value(t, x, y));
    let (_, free) = march(op, &mesh, &Bdf2Config::default(), &Problem::unforced(u0.clone()))?;
    let series = energy_series(&free)?;
    let energy = series.law_residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max) / series.scale();

    let forcing = |t: f64| op.project(t, &|t, x, y| sol.forcing(t, x, y));
    let forced = Problem { u0, forcing: Some(&forcing), reference: None };
    let (_, trace) = march(op, &mesh, &Bdf2Config::default(), &forced)?;
    let l2 = l2_stability_ratio(&trace);

    let mut amplification: f64 = 0.0;
    for lambda in [Complex::new(-1.0, 0.0), Complex::new(-100.0, 0.0), Complex::i(), Complex::new(-1.0, 10.0)] {
        let ys = crate::integrator::dahlquist_march(lambda, &mesh, Complex::new(1.0, 0.0))?;
        amplification = ys.iter().copied().fold(amplification, f64::max);
    }

    let perturbations: Vec<f64> = (0..steps).map(|_| 1e-3 * unit.sample(&mut rng)).collect();
    let y0 = unit.sample(&mut rng);
    let zero_stability =
        zero_stability_probe(&SineRhs, &mesh, y0, y0 + 1e-3 * unit.sample(&mut rng), &perturbations)?;

    let wild = capped_random_mesh(1.0, steps, mesh_id ^ 0x5A5A, UNGATED_CAP)?;
    let wild_kernels = build_bdf2_kernels(&wild);
    let wild_scale = (1..=steps).map(|k| wild_kernels.b0(k)).fold(0.0, f64::max);
    let ungated_eigen = psd_min_eigenvalue(&wild_kernels, steps)? / wild_scale;

    Ok(SuiteSample { defect, quadratic, eigen, energy, l2, amplification, zero_stability, ungated_eigen })
}

/// Runs the S1-gated invariant suites over `counts.meshes` random meshes.
pub fn run_stability_suite(seed: u64, counts: SuiteCounts) -> Result<StabilityReport> {
    if counts.meshes == 0 || counts.steps == 0 {
        return Ok(StabilityReport { entries: Vec::new() });
    }
    if counts.steps < 2 {
        return Err(Error::InvalidArgument("stability suite needs at least 2 steps".into()));
    }
    let op = SpectralOperator::new(8, 1.0, 0.0)?;
    let samples: Vec<SuiteSample> = (0..counts.meshes)
        .into_par_iter()
        .map(|i| suite_sample(seed, i, counts.steps, &op))
        .collect::<Result<_>>()?;
    let col = |f: fn(&SuiteSample) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
    let mut ungated = entry_min("psd-eigenvalue-ungated", &col(|s| s.ungated_eigen), -1e-10);
    ungated.informational = true;
    Ok(StabilityReport {
        entries: vec![
            entry_max("doc-orthogonality", &col(|s| s.defect), 1e-12),
            entry_min("psd-quadratic-form", &col(|s| s.quadratic), -1e-10),
            entry_min("psd-eigenvalue", &col(|s| s.eigen), -1e-10),
            entry_max("energy-law", &col(|s| s.energy), 1e-10),
            entry_max("l2-stability", &col(|s| s.l2), 1.0 + 1e-8),
            entry_max("a-stability", &col(|s| s.amplification), 1.0 + 1e-12),
            entry_max("zero-stability", &col(|s| s.zero_stability), 1.0 + 1e-8),
            ungated,
        ],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::InvalidArgument(format!("unknown format '{other}'"))),
        }
    }
}

/// Scientific notation with a two-digit exponent, e.g. `4.45e-05`.
pub fn sci(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

pub trait Emit {
    fn emit<W: Write>(&self, format: Format, writer: W) -> Result<()>;

    /// Writes to `path`, or stdout when absent.
    fn emit_to(&self, format: Format, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                self.emit(format, &mut w)?;
                w.flush()?;
                Ok(())
            }
            None => self.emit(format, std::io::stdout().lock()),
        }
    }
}

impl Emit for ConvergenceTable {
    fn emit<W: Write>(&self, format: Format, mut writer: W) -> Result<()> {
        match format {
            Format::Csv => {
                let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
                out.write_record(["n", "e_n", "tau_max", "order", "r_max", "n1"])?;
                for r in &self.rows {
                    out.serialize(r)?;
                }
                out.flush()?;
            }
            Format::Json => {
                serde_json::to_writer_pretty(&mut writer, &self.rows)?;
                writeln!(writer)?;
            }
            Format::Markdown => {
                writeln!(writer, "| N | e(N) | τ | Order | max r_k | N₁ |")?;
                writeln!(writer, "|---:|---:|---:|---:|---:|---:|")?;
                for r in &self.rows {
                    let order = r.order.map_or_else(|| "-".to_string(), |o| format!("{o:.2}"));
                    writeln!(
                        writer,
                        "| {} | {} | {} | {} | {:.2} | {} |",
                        r.n,
                        sci(r.e_n),
                        sci(r.tau_max),
                        order,
                        r.r_max,
                        r.n1
                    )?;
                }
            }
        }
        Ok(())
    }
}

impl Emit for StabilityReport {
    fn emit<W: Write>(&self, format: Format, mut writer: W) -> Result<()> {
        match format {
            Format::Csv => {
                let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
                out.write_record(["suite", "checked", "worst", "limit", "passed", "informational"])?;
                for e in &self.entries {
                    out.serialize(e)?;
                }
                out.flush()?;
            }
            Format::Json => {
                serde_json::to_writer_pretty(&mut writer, &self.entries)?;
                writeln!(writer)?;
            }
            Format::Markdown => {
                writeln!(writer, "| suite | checked | worst | limit | status |")?;
                writeln!(writer, "|---|---:|---:|---:|---|")?;
                for e in &self.entries {
                    let status = match (e.passed, e.informational) {
                        (_, true) => "info",
                        (true, false) => "pass",
                        (false, false) => "FAIL",
                    };
                    writeln!(
                        writer,
                        "| {} | {} | {} | {} | {} |",
                        e.suite,
                        e.checked,
                        sci(e.worst),
                        sci(e.limit),
                        status
                    )?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render<E: Emit>(e: &E, format: Format) -> String {
        let mut buf = Vec::new();
        e.emit(format, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn mesh_specs() {
        assert_eq!(parse_mesh_spec("uniform:2:4").unwrap().steps(), &[0.5; 4]);
        assert_eq!(parse_mesh_spec("random:1:10:3").unwrap(), random_mesh(1.0, 10, 3).unwrap());
        let capped = parse_mesh_spec("capped-random:1:50:3:2").unwrap();
        assert!(ratio_profile(&capped).r_max <= 2.0);
        assert_eq!(parse_mesh_spec("geometric:1:5:2").unwrap().n_steps(), 5);
        for bad in ["", "uniform:1", "uniform:1:x", "random:1:10", "spiral:1:2", "uniform:1:4:9"] {
            assert!(parse_mesh_spec(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn scientific_format() {
        assert_eq!(sci(4.45e-5), "4.45e-05");
        assert_eq!(sci(1234.0), "1.23e+03");
        assert_eq!(sci(0.0), "0.00e+00");
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::new(1.0, 1);
        assert!(c.validate().is_ok());
        c.n_list = vec![64, 100];
        assert!(c.validate().is_err());
        c.n_list = vec![];
        assert!(c.validate().is_ok());
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn uniform_convergence_is_second_order() {
        let mut c = ExperimentConfig::new(1.0, 0);
        c.mesh_family = MeshFamily::Uniform;
        c.n_list = vec![32, 64, 128];
        c.modes = 8;
        c.starting_scheme = StartingScheme::ExactFirstStep;
        let table = run_convergence(&c).unwrap();
        assert_eq!(table.rows[0].order, None);
        for o in table.orders() {
            assert!((1.9..=2.1).contains(&o), "order {o}");
        }
        let fit = table.fitted_order().unwrap();
        assert!((1.95..=2.05).contains(&fit), "fit {fit}");
    }

    #[test]
    fn convergence_output_is_deterministic() {
        let mut c = ExperimentConfig::new(0.1, 7);
        c.n_list = vec![16, 32];
        c.modes = 8;
        let a = render(&run_convergence(&c).unwrap(), Format::Csv);
        let b = render(&run_convergence(&c).unwrap(), Format::Csv);
        assert_eq!(a, b);
        assert!(a.starts_with("n,e_n,tau_max,order,r_max,n1\n16,"));
    }

    #[test]
    fn n1_matches_profile() {
        let mut c = ExperimentConfig::new(1.0, 3);
        c.n_list = vec![64, 128];
        c.modes = 4;
        let table = run_convergence(&c).unwrap();
        for row in &table.rows {
            let mesh = build_mesh(MeshFamily::Random, 1.0, row.n, mesh_seed(3, row.n)).unwrap();
            assert_eq!(row.n1, ratio_profile(&mesh).n1_count);
            assert_eq!(row.r_max, ratio_profile(&mesh).r_max);
        }
    }

    #[test]
    fn empty_outputs() {
        let table = ConvergenceTable { rows: vec![] };
        let md = render(&table, Format::Markdown);
        assert_eq!(md.lines().count(), 2);
        assert!(md.starts_with("| N | e(N) | τ | Order | max r_k | N₁ |"));
        assert_eq!(render(&table, Format::Json).trim(), "[]");
        let report = run_stability_suite(1, SuiteCounts { meshes: 0, steps: 16 }).unwrap();
        assert!(report.entries.is_empty());
    }

    #[test]
    fn json_rows_carry_six_fields() {
        let table = ConvergenceTable {
            rows: vec![ConvergenceRow { n: 64, e_n: 1e-3, tau_max: 0.03, order: None, r_max: 2.0, n1: 0 }],
        };
        let v: serde_json::Value = serde_json::from_str(&render(&table, Format::Json)).unwrap();
        assert_eq!(v[0].as_object().unwrap().len(), 6);
        assert!(v[0]["order"].is_null());
    }

    #[test]
    fn small_stability_suite_passes() {
        let report = run_stability_suite(11, SuiteCounts { meshes: 4, steps: 24 }).unwrap();
        assert_eq!(report.entries.len(), 8);
        assert!(report.all_passed(), "{report:?}");
        assert!(report.entries.last().unwrap().informational);
    }
}
