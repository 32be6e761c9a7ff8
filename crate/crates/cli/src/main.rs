use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqmodel::data::{sample_training_set, TrainingSet};
use seqmodel::experiment::{
    calibrate, emit_report, parse_grid, run_experiment, write_calibration, ExperimentConfig, ShapeReport,
};
use seqmodel::mps::{overlap, parity_target_mps, sample_many, Mps};
use seqmodel::theory::{predict_curve, DistanceVariant, GapCalibration};
use seqmodel::trainer::{train, TrainError, TruncationPolicy};
use seqmodel::verify;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mps-seqmodel", version, about = "Train and analyse matrix product state models of bitstrings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an even-parity training set
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout when omitted)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model on a training-set file
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        output: PathBuf,
        /// Also write the per-step diagnostics as JSON
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Draw strings from a model
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fix a position to a bit, e.g. `--fix 3=1` (positions start at 1)
        #[arg(long = "fix", value_parser = parse_fix)]
        fix: Vec<(usize, u8)>,
    },
    /// Score a model against a target distribution
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Target::Parity)]
        target: Target,
        #[arg(long, value_enum, default_value_t = Distance::Standard)]
        distance: Distance,
    },
    /// Theoretical overlap and distance over a fraction grid
    Predict {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        fractions: FractionArgs,
        #[arg(long, value_enum, default_value_t = Distance::Standard)]
        distance: Distance,
        /// Gap calibration table (the built-in table when omitted)
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Seeded sweep over fractions, writing rows, aggregate and series CSVs
    Experiment {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[command(flatten)]
        fractions: FractionArgs,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, value_enum, default_value_t = Distance::Standard)]
        distance: Distance,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the cross-checks against the dense references
    OracleCheck {
        /// Also run the N = 16 sweep and write its CSVs here
        #[arg(long)]
        figure_output: Option<PathBuf>,
    },
    /// Measure the gap calibration table c(f)
    Calibrate {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[command(flatten)]
        fractions: FractionArgs,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value_t = 2)]
    max_bond: usize,
    #[arg(long, default_value_t = 1e-10)]
    cutoff: f64,
}

impl PolicyArgs {
    fn policy(&self) -> Result<TruncationPolicy, CliError> {
        TruncationPolicy::new(self.max_bond, self.cutoff).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FractionArgs {
    /// A single training fraction
    #[arg(long)]
    fraction: Option<f64>,
    /// `start:stop:step` or a comma-separated list
    #[arg(long)]
    grid: Option<String>,
}

impl FractionArgs {
    fn grid(&self) -> Result<Vec<f64>, CliError> {
        let text = match (&self.fraction, &self.grid) {
            (Some(f), _) => f.to_string(),
            (None, Some(g)) => g.clone(),
            (None, None) => unreachable!("clap requires one of the two"),
        };
        parse_grid(&text).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Parity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    Standard,
    PaperLiteral,
}

impl From<Distance> for DistanceVariant {
    fn from(d: Distance) -> Self {
        match d {
            Distance::Standard => DistanceVariant::Standard,
            Distance::PaperLiteral => DistanceVariant::PaperLiteral,
        }
    }
}

fn parse_fix(s: &str) -> Result<(usize, u8), String> {
    let (p, b) = s.split_once('=').ok_or_else(|| format!("expected POS=BIT, got {s:?}"))?;
    let p: usize = p.trim().parse().map_err(|_| format!("bad position {p:?}"))?;
    let b: u8 = match b.trim() {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("bit must be 0 or 1, got {other:?}")),
    };
    if p == 0 {
        return Err("positions start at 1".into());
    }
    Ok((p, b))
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
    Other(String),
}

impl CliError {
    fn other(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Other(format!("{context}: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadPolicy(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::other(p.display(), e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_model(path: &Path) -> Result<Mps, CliError> {
    let f = File::open(path).map_err(|e| CliError::other(path.display(), e))?;
    Mps::read_from(BufReader::new(f)).map_err(|e| CliError::other(path.display(), e))
}

fn load_calibration(path: Option<&Path>) -> GapCalibration {
    match path {
        None => GapCalibration::shipped(),
        Some(p) => {
            let (cal, warning) = GapCalibration::load_or_identity(p);
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            cal
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { n, fraction, seed, output } => {
            let set = sample_training_set(n, fraction, seed).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut out = open_output(output.as_deref())?;
            set.write_to(&mut out).map_err(|e| CliError::other("write", e))?;
            out.flush().map_err(|e| CliError::other("write", e))?;
        }
        Command::Train { data, policy, output, diagnostics } => {
            let f = File::open(&data).map_err(|e| CliError::other(data.display(), e))?;
            let set = TrainingSet::read_from(BufReader::new(f)).map_err(|e| CliError::other(data.display(), e))?;
            let (mps, diag) = train(&set, &policy.policy()?)?;
            let mut out = open_output(Some(&output))?;
            mps.write_to(&mut out).map_err(|e| CliError::other(output.display(), e))?;
            out.flush().map_err(|e| CliError::other(output.display(), e))?;
            if let Some(path) = diagnostics {
                std::fs::write(&path, diag.to_json()).map_err(|e| CliError::other(path.display(), e))?;
            }
            for w in &diag.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "trained N={} on {} samples: bonds {:?}, norm^2 {:.12}",
                set.len(),
                set.n_samples(),
                mps.bond_dims(),
                mps.norm_squared()
            );
        }
        Command::Sample { model, count, seed, fix } => {
            let mps = read_model(&model)?;
            let constraints: BTreeMap<usize, u8> = fix.into_iter().collect();
            let draws = sample_many(&mps, seed, count, &constraints).map_err(|e| CliError::Numerical(e.to_string()))?;
            let mut out = open_output(None)?;
            for s in draws {
                writeln!(out, "{s}").map_err(|e| CliError::other("stdout", e))?;
            }
            out.flush().map_err(|e| CliError::other("stdout", e))?;
        }
        Command::Evaluate { model, target: Target::Parity, distance } => {
            let mps = read_model(&model)?;
            let n = mps.n_sites();
            let norm2 = mps.norm_squared();
            if !(norm2 > 0.0) {
                return Err(CliError::Numerical("model has zero norm".into()));
            }
            let raw = overlap(&mps, &parity_target_mps(n)).map_err(|e| CliError::Numerical(e.to_string()))?;
            let ov = raw / norm2.sqrt();
            println!("N {n}");
            println!("norm_squared {norm2:.15}");
            println!("raw_overlap {raw:.15}");
            println!("overlap {ov:.15}");
            println!("distance {:.15}", DistanceVariant::from(distance).distance(ov, n));
        }
        Command::Predict { n, fractions, distance, calibration, output } => {
            let cal = load_calibration(calibration.as_deref());
            let pts = predict_curve(n, &fractions.grid()?, &cal, distance.into())
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let mut out = open_output(output.as_deref())?;
            let io = |e| CliError::other("write", e);
            writeln!(out, "f,N_T,theta,overlap,distance").map_err(io)?;
            for p in pts {
                writeln!(out, "{},{},{},{},{}", p.f, p.n_t, p.theta, p.overlap, p.distance).map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
        Command::Experiment { n, fractions, trials, seed, policy, distance, calibration, output } => {
            let mut cfg = ExperimentConfig::new(n, fractions.grid()?, trials, seed);
            cfg.policy = policy.policy()?;
            cfg.variant = distance.into();
            cfg.calibration = load_calibration(calibration.as_deref());
            let rec = run_experiment(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            for w in &rec.warnings {
                eprintln!("warning: {w}");
            }
            let files = emit_report(&rec, &output).map_err(|e| CliError::Other(e.to_string()))?;
            for a in &rec.aggregates {
                println!(
                    "f {:<6} trials {:<3} mean {:.6e} std {:.6e} theory {:.6e}",
                    a.f, a.trials, a.mean_distance, a.std_distance, a.theory_distance
                );
            }
            let shape = ShapeReport::from_aggregates(&rec.aggregates);
            println!(
                "largest rise: experimental {:.3e}, theory {:.3e} (pooled std {:.3e})",
                shape.max_experimental_rise, shape.max_theory_rise, shape.pooled_std
            );
            for f in files {
                println!("wrote {}", f.display());
            }
            if rec.rows.iter().any(|r| r.error.is_some()) {
                return Err(CliError::Numerical("some trials failed; see warnings".into()));
            }
        }
        Command::OracleCheck { figure_output } => {
            let mut reports = verify::run_checks();
            if let Some(dir) = figure_output {
                reports.push(verify::figure_shape(&dir));
            }
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Numerical(format!("{failed} of {} checks failed", reports.len())));
            }
        }
        Command::Calibrate { n, fractions, runs, seed, policy, output } => {
            let cal = calibrate(n, &fractions.grid()?, runs, seed, &policy.policy()?)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            write_calibration(&cal, &output).map_err(|e| CliError::Other(e.to_string()))?;
            print!("{}", cal.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Usage(m) => (EXIT_USAGE, m),
                CliError::Numerical(m) => (EXIT_NUMERICAL, m),
                CliError::Other(m) => (EXIT_FAILURE, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
