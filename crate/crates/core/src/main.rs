use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::warn;
use rustfft::num_complex::Complex;

use vbdf2::experiments::{
    build_mesh, mesh_seed, parse_mesh_spec, run_convergence, run_stability_suite, Emit,
    ExperimentConfig, Format, MeshFamily, SuiteCounts,
};
use vbdf2::integrator::{dahlquist_march, march, Bdf2Config, Problem, StartingScheme};
use vbdf2::kernels::{build_bdf2_kernels, c_r_constant, doc_table, psd_min_eigenvalue, write_kernel_csv};
use vbdf2::mesh::{check_s1, gamma_n, ratio_profile, read_mesh_csv, TimeMesh};
use vbdf2::spatial::{SingleModeSolution, SpatialOperator, SpectralOperator};
use vbdf2::{Error, Result};

#[derive(Parser)]
#[command(name = "vbdf2", version, about = "Variable-step BDF2 kernels, solver and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump BDF2 and DOC kernels for a window of levels as CSV.
    Kernels {
        /// Mesh CSV file (`k,t_k`) or generator spec such as `random:1:64:7`.
        #[arg(long)]
        mesh: String,
        /// Inclusive level window `a:b`.
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the step-ratio profile of a mesh file.
    CheckMesh { file: PathBuf },
    /// Solve the manufactured heat problem on the periodic square.
    SolveHeat {
        #[arg(long, default_value_t = 1.0)]
        eps: f64,
        #[arg(long = "N")]
        n: usize,
        #[arg(long, default_value = "random")]
        mesh_family: MeshFamily,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bdf1")]
        start: StartingScheme,
        #[arg(long, default_value_t = 32)]
        modes: usize,
        /// Drop the forcing and let the initial mode decay freely.
        #[arg(long)]
        unforced: bool,
        /// Per-level trace CSV.
        #[arg(long, num_args = 0..=1, default_missing_value = "trace.csv")]
        trace: Option<PathBuf>,
        /// Final field CSV.
        #[arg(long, num_args = 0..=1, default_missing_value = "field.csv")]
        dump: Option<PathBuf>,
    },
    /// Run BDF2 on y' = lambda y and print |y^n|.
    Dahlquist {
        /// `re,im`
        #[arg(long, allow_hyphen_values = true)]
        lambda: String,
        #[arg(long = "N", default_value_t = 64)]
        n: usize,
        #[arg(long, default_value = "capped-random")]
        mesh_family: MeshFamily,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "T", default_value_t = 1.0)]
        final_time: f64,
    },
    /// Convergence table for the manufactured problem.
    Converge {
        #[arg(long, default_value_t = 1.0)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
        n_list: Vec<usize>,
        #[arg(long, default_value = "random")]
        mesh_family: MeshFamily,
        #[arg(long, default_value = "bdf1")]
        start: StartingScheme,
        #[arg(long, default_value_t = 32)]
        modes: usize,
        #[arg(long, default_value = "md")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized stability and identity suites.
    StabilitySuite {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        meshes: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value = "md")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_mesh(source: &str) -> Result<TimeMesh> {
    let path = Path::new(source);
    if path.exists() {
        read_mesh_csv(File::open(path)?)
    } else {
        parse_mesh_spec(source)
    }
}

fn parse_window(window: Option<&str>, n: usize) -> Result<(usize, usize)> {
    let Some(w) = window else { return Ok((1, n)) };
    let bad = || Error::InvalidArgument(format!("window must be a:b, got '{w}'"));
    let (a, b) = w.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_complex(text: &str) -> Result<Complex<f64>> {
    let bad = || Error::InvalidArgument(format!("expected re,im, got '{text}'"));
    let (re, im) = text.split_once(',').unwrap_or((text, "0"));
    Ok(Complex::new(re.trim().parse().map_err(|_| bad())?, im.trim().parse().map_err(|_| bad())?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Kernels { mesh, window, out } => {
            let mesh = load_mesh(&mesh)?;
            let kernels = build_bdf2_kernels(&mesh);
            let (a, b) = parse_window(window.as_deref(), mesh.n_steps())?;
            let table = doc_table(&kernels, a..=b)?;
            let mut w = output(out.as_deref())?;
            write_kernel_csv(&kernels, &table, &mut w)?;
            w.flush()?;
        }
        Command::CheckMesh { file } => {
            let mesh = read_mesh_csv(File::open(&file)?)?;
            let profile = ratio_profile(&mesh);
            let n = mesh.n_steps();
            let kernels = build_bdf2_kernels(&mesh);
            let scale = (1..=n).map(|k| kernels.b0(k)).fold(0.0, f64::max);
            println!("N = {n}");
            println!("T = {}", mesh.final_time());
            println!("max tau = {}", mesh.max_step());
            println!("max r_k = {}", profile.r_max);
            println!("N0 = {}", profile.n0_count);
            println!("N1 = {}", profile.n1_count);
            println!("S1 = {}", if check_s1(&profile) { "satisfied" } else { "violated" });
            match c_r_constant(&profile) {
                Ok(c) => println!("C_r = {c}"),
                Err(_) => println!("C_r = undefined (r_c >= 1+sqrt(2))"),
            }
            println!("Gamma_N = {}", gamma_n(&profile, n)?);
            println!("min eig(B2)/max b0 = {}", psd_min_eigenvalue(&kernels, n)? / scale);
        }
        Command::SolveHeat { eps, n, mesh_family, seed, start, modes, unforced, trace, dump } => {
            let mesh = build_mesh(mesh_family, 1.0, n, mesh_seed(seed, n))?;
            let op = SpectralOperator::new(modes, eps, 0.0)?;
            let sol = SingleModeSolution { epsilon: eps, kappa: 0.0 };
            let exact = |t: f64| {
                if unforced {
                    op.project(0.0, &|_, x, y| SingleModeSolution::shape_function(x, y))
                        .scaled((-8.0 * std::f64::consts::PI.powi(2) * eps * t).exp())
                } else {
                    op.project(t, &|t, x, y| sol.value(t, x, y))
                }
            };
            let forcing = |t: f64| op.project(t, &|t, x, y| sol.forcing(t, x, y));
            let problem = Problem {
                u0: exact(0.0),
                forcing: if unforced { None } else { Some(&forcing) },
                reference: Some(&exact),
            };
            let config = Bdf2Config::default().with_start(start);
            let (u_n, solve_trace) = march(&op, &mesh, &config, &problem)?;
            let error = op.l2_norm(&u_n.combine(1.0, &exact(mesh.final_time()), -1.0));
            if let Some(path) = trace {
                let mut w = output(Some(&path))?;
                solve_trace.write_csv(&mut w)?;
                w.flush()?;
            }
            if let Some(path) = dump {
                let mut w = output(Some(&path))?;
                u_n.write_csv(&mut w)?;
                w.flush()?;
            }
            let profile = ratio_profile(&mesh);
            println!("N = {n}, max tau = {:e}, max r_k = {:.3}, N1 = {}", mesh.max_step(), profile.r_max, profile.n1_count);
            println!("e(N) = {error:e}");
            println!("energy nonincreasing: {}", solve_trace.energy_monotone);
            println!("L2 norm nonincreasing: {}", solve_trace.l2_monotone);
            if !check_s1(&profile) {
                warn!("mesh violates the S1 ratio bound; stability monitors are informational");
            }
        }
        Command::Dahlquist { lambda, n, mesh_family, seed, final_time } => {
            let lambda = parse_complex(&lambda)?;
            let mesh = build_mesh(mesh_family, final_time, n, mesh_seed(seed, n))?;
            let ys = dahlquist_march(lambda, &mesh, Complex::new(1.0, 0.0))?;
            println!("n,t_n,abs_y");
            for (k, y) in ys.iter().enumerate() {
                println!("{k},{},{y}", mesh.level(k));
            }
        }
        Command::Converge { eps, seed, n_list, mesh_family, start, modes, format, out } => {
            let config = ExperimentConfig {
                n_list,
                mesh_family,
                starting_scheme: start,
                modes,
                ..ExperimentConfig::new(eps, seed)
            };
            if mesh_family == MeshFamily::Random {
                eprintln!("# random meshes are seeded (seed {seed}); compare orders and magnitudes, not values");
            }
            let table = run_convergence(&config)?;
            table.emit_to(format, out.as_deref())?;
            if let Some(fit) = table.fitted_order() {
                eprintln!("# fitted order {fit:.3}");
            }
        }
        Command::StabilitySuite { seed, meshes, steps, format, out } => {
            let report = run_stability_suite(seed, SuiteCounts { meshes, steps })?;
            report.emit_to(format, out.as_deref())?;
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BDF2_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
