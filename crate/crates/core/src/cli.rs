//! Command-line surface. Exit codes: 0 success, 1 invalid input or failed
//! check, 2 file-system error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::extract::{self, MetricsConfig};
use crate::io::{self, IoError, RunConfig};
use crate::persistence::{persistence0_tagged, sample_grid, Domain, Filtration};
use crate::pointcloud::PointCloud;
use crate::synthetic::{generate, Shape, ShapeSpec};
use crate::trainer;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "toposurf", version, about = "Topology-aware neural SDF reconstruction from point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a point cloud; writes checkpoint, history, resolved
    /// config and normalization frame into --out.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the zero level set of a checkpoint as an OBJ mesh.
    Mesh {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0.0)]
        iso: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a mesh with ground-truth points and write a JSON report.
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Normalization frame written by `reconstruct`; without it the
        /// ground truth is normalized by its own bounding box.
        #[arg(long, conflicts_with = "gt_normalized")]
        frame: Option<PathBuf>,
        /// The ground truth is already in the model's frame.
        #[arg(long)]
        gt_normalized: bool,
        #[arg(long, default_value_t = 0.9)]
        extent: f64,
        #[arg(long, default_value_t = 30_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        significant_grid: usize,
    },
    /// Export the 0-dimensional persistence diagram of a checkpoint's grid.
    Diagram {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, value_enum, default_value_t = FiltrationArg::Absolute)]
        filtration: FiltrationArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomized checks of the density and separation results.
    Verify {
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
        theorem: u8,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// ε as a fraction of β (theorem 3).
        #[arg(long, default_value_t = 0.1)]
        eps_ratio: f64,
    },
    /// Write a synthetic point cloud as XYZ.
    Generate {
        #[arg(long, value_enum)]
        shape: ShapeArg,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FiltrationArg {
    Raw,
    Absolute,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ShapeArg {
    Sphere,
    TwoSpheres,
    Torus,
    ThinPlate,
}

impl ShapeArg {
    fn shape(self) -> Shape {
        match self {
            ShapeArg::Sphere => Shape::Sphere { radius: 0.5 },
            ShapeArg::TwoSpheres => Shape::two_spheres(),
            ShapeArg::Torus => Shape::Torus { major: 0.5, minor: 0.15 },
            ShapeArg::ThinPlate => Shape::ThinPlate {
                half_extents: [0.5, 0.4, 0.02],
            },
        }
    }
}

/// Parses `argv` (program name first) and runs one command.
pub fn cli_main<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_INVALID
                }
            };
        }
    };
    match run(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Reconstruct { input, config, out: dir } => reconstruct(&input, config.as_deref(), &dir, out),
        Command::Mesh {
            model,
            resolution,
            iso,
            out: path,
        } => {
            let model = io::load_checkpoint(&model)?;
            let mesh = extract::marching_cubes(&model, resolution, Domain::default(), iso).map_err(invalid)?;
            io::save_obj(&mesh, &path)?;
            let _ = writeln!(out, "{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
            Ok(())
        }
        Command::Eval {
            mesh,
            gt,
            model,
            report,
            frame,
            gt_normalized,
            extent,
            samples,
            seed,
            significant_grid,
        } => {
            let mesh = io::load_obj(&mesh)?;
            let raw = io::load_cloud(&gt)?;
            let gt_points = if gt_normalized {
                raw
            } else if let Some(frame) = frame {
                let text = fs::read_to_string(&frame).map_err(|e| CliError::Io(format!("{}: {e}", frame.display())))?;
                let (scale, translation) = io::parse_frame(&text)?;
                let cloud = PointCloud {
                    points: vec![],
                    scale,
                    translation,
                };
                raw.iter().map(|p| cloud.to_normalized(p)).collect()
            } else {
                PointCloud::normalize(&raw, extent).map_err(invalid)?.points
            };
            let model = model.map(|m| io::load_checkpoint(&m)).transpose()?;
            if significant_grid < 2 || samples == 0 {
                return Err(invalid("--samples must be positive and --significant-grid at least 2"));
            }
            let cfg = MetricsConfig {
                samples,
                seed,
                significant_grid,
            };
            let r = extract::evaluate(&mesh, &gt_points, model.as_ref(), &cfg).map_err(invalid)?;
            io::save_report(&r, &report)?;
            let _ = writeln!(
                out,
                "chamfer {:.6} hausdorff {:.6} components {}",
                r.cd_two_sided, r.hd_two_sided, r.component_count
            );
            Ok(())
        }
        Command::Diagram {
            model,
            resolution,
            filtration,
            out: path,
        } => {
            let model = io::load_checkpoint(&model)?;
            let filtration = match filtration {
                FiltrationArg::Raw => Filtration::Raw,
                FiltrationArg::Absolute => Filtration::Absolute,
            };
            let grid = sample_grid(&model, resolution, Domain::default(), filtration).map_err(invalid)?;
            let diagram = persistence0_tagged(&grid, filtration);
            io::export_diagram(&diagram, &path)?;
            let _ = writeln!(out, "{} pairs", diagram.len());
            Ok(())
        }
        Command::Verify {
            theorem,
            m,
            k,
            trials,
            seed,
            eps_ratio,
        } => {
            if theorem == 2 {
                let r = verify::check_theorem2(m, k, trials, seed).map_err(invalid)?;
                let _ = writeln!(out, "{} counterexamples in {} trials (m = {m}, k = {k})", r.counterexamples, r.trials);
                if r.counterexamples > 0 {
                    return Err(invalid("counterexamples found"));
                }
            } else {
                if !(eps_ratio > 0.0 && eps_ratio.is_finite()) {
                    return Err(invalid("--eps-ratio must be positive"));
                }
                let r = verify::check_theorem3(m, k, |beta| beta * eps_ratio, trials, seed).map_err(invalid)?;
                let _ = writeln!(
                    out,
                    "{} verified ({} vacuous, {} by conclusion), {} undecided, {} violations in {} trials",
                    r.verified(),
                    r.verified_vacuous,
                    r.verified_conclusion,
                    r.undecided,
                    r.violations,
                    r.trials
                );
                if r.violations > 0 {
                    return Err(invalid("violations found"));
                }
            }
            Ok(())
        }
        Command::Generate {
            shape,
            count,
            noise,
            seed,
            out: path,
        } => {
            let spec = ShapeSpec {
                shape: shape.shape(),
                count,
                noise_std: noise,
                seed,
            };
            let points = generate(&spec).map_err(invalid)?;
            io::save_xyz(&points, &path)?;
            let _ = writeln!(out, "{} points", points.len());
            Ok(())
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.stch";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FRAME_FILE: &str = "frame.txt";
pub const DIAGRAM_FILE: &str = "diagram.csv";

fn reconstruct(input: &Path, config: Option<&Path>, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.input = input.display().to_string();
    cfg.out = dir.display().to_string();
    cfg.validate().map_err(CliError::Invalid)?;
    let raw = io::load_cloud(input)?;
    let cloud = PointCloud::normalize(&raw, cfg.normalize_extent).map_err(invalid)?;
    let (model, history) = trainer::train(&cloud, &cfg.train).map_err(invalid)?;
    ensure_dir(dir)?;
    io::save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    io::save_history(&history, &dir.join(HISTORY_FILE))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    };
    write(CONFIG_FILE, cfg.to_text())?;
    write(FRAME_FILE, io::frame_string(&cloud))?;
    if let Some((_, d)) = history.snapshots.last() {
        io::export_diagram(d, &dir.join(DIAGRAM_FILE))?;
    }
    if let Some(r) = history.records.last() {
        let _ = writeln!(
            out,
            "{} iterations, final loss {:.6e} (pull {:.6e})",
            history.records.len(),
            r.total,
            r.pull
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut argv = vec!["toposurf"];
        argv.extend_from_slice(args);
        let code = cli_main(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn verify_theorem2_reports_zero() {
        let (code, out, _) = run_cli(&["verify", "--theorem", "2", "--m", "5", "--k", "3", "--trials", "100", "--seed", "1"]);
        assert_eq!(code, 0);
        assert!(out.starts_with("0 counterexamples"), "{out}");
    }

    #[test]
    fn verify_theorem3_prints_counts() {
        let (code, out, _) = run_cli(&["verify", "--theorem", "3", "--m", "6", "--k", "2", "--trials", "20"]);
        assert_eq!(code, 0);
        assert!(out.contains("0 violations"), "{out}");
    }

    #[test]
    fn unknown_flag_prints_usage() {
        let (code, _, err) = run_cli(&["verify", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"), "{err}");
        let (code, _, _) = run_cli(&["verify", "--theorem", "4", "--m", "5", "--k", "2"]);
        assert_eq!(code, 1);
        let (code, out, _) = run_cli(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("reconstruct"));
    }

    #[test]
    fn invalid_combinatorics_exit_1() {
        let (code, _, err) = run_cli(&["verify", "--theorem", "2", "--m", "9", "--k", "3"]);
        assert_eq!(code, 1);
        assert!(err.contains("error"));
    }

    #[test]
    fn missing_input_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.xyz");
        let (code, _, _) = run_cli(&[
            "reconstruct",
            "--input",
            missing.to_str().unwrap(),
            "--out",
            dir.path().join("run").to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
        assert!(!dir.path().join("run").exists());
    }
}
