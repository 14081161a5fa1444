//! Command-line front end for the coupled 3D-1D solver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coupled3d1d::app::{self, AppError, GeneratorSpec, RunConfig};
use coupled3d1d::mesh::{build_box_mesh, BoxDomain};

#[derive(Debug, Parser)]
#[command(name = "c3d1d", version, about = "Coupled 3D-1D elliptic solver")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the case described by a TOML config.
    Run {
        config: PathBuf,
        /// CG tolerance on the relative residual.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Seed for the configured segment generator.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, relative to the working directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a seeded random segment file from a generator spec.
    GenSegments {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mesh a box and write it in the native text format.
    MakeMesh {
        /// Edge of a centred cube, or `xmin,ymin,zmin,xmax,ymax,zmax`.
        #[arg(value_name = "BOX", allow_hyphen_values = true)]
        bounds: String,
        h: f64,
        out: PathBuf,
    },
}

fn parse_box(text: &str) -> Result<BoxDomain, String> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("box value {t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match vals.as_slice() {
        [edge] => Ok(BoxDomain::centered_cube(*edge)),
        [x0, y0, z0, x1, y1, z1] => Ok(BoxDomain::new([*x0, *y0, *z0], [*x1, *y1, *z1])),
        _ => Err(format!("box needs 1 or 6 comma-separated values, got {}", vals.len())),
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn execute(command: Command) -> Result<(), String> {
    let app_err = |e: AppError| match e {
        AppError::Stage { .. } => e.to_string(),
        _ => format!("{}: {e}", e.stage()),
    };
    match command {
        Command::Run { config, tol, max_iter, seed, out_dir } => {
            let mut cfg = RunConfig::load(&config).map_err(app_err)?;
            if let Some(tol) = tol {
                cfg.solver.tol = tol;
            }
            if let Some(max_iter) = max_iter {
                cfg.solver.max_iter = max_iter;
            }
            if let Some(seed) = seed {
                match cfg.segments.generator.as_mut() {
                    Some(g) => g.seed = seed,
                    None => return Err("config: --seed given but no segment generator configured".into()),
                }
            }
            if let Some(dir) = out_dir {
                let cwd = std::env::current_dir().map_err(|e| format!("io: {e}"))?;
                cfg.output.dir = cwd.join(dir);
            }
            cfg.validate().map_err(|msg| format!("config {}: {msg}", config.display()))?;
            let report = app::run(&cfg, &base_dir(&config)).map_err(app_err)?;
            print!("{}", report.summary_csv());
        }
        Command::GenSegments { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| format!("io: {}: {e}", spec.display()))?;
            let mut generator: GeneratorSpec =
                toml::from_str(&text).map_err(|e| format!("config {}: {e}", spec.display()))?;
            if let Some(seed) = seed {
                generator.seed = seed;
            }
            let segs = app::generate_segments(&generator).map_err(app_err)?;
            app::write_segments(&out, &segs).map_err(app_err)?;
        }
        Command::MakeMesh { bounds, h, out } => {
            let domain = parse_box(&bounds).map_err(|e| format!("mesh: {e}"))?;
            let mesh = build_box_mesh(&domain, h).map_err(|e| format!("mesh: {e}"))?;
            mesh.export(&out).map_err(|e| format!("mesh: {}: {e}", out.display()))?;
            println!("{} nodes, {} tets, h = {:.4}", mesh.num_nodes(), mesh.num_tets(), mesh.h());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
