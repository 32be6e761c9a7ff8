//! Seeded sweeps over training fractions.
//!
//! For each fraction `f` and trial the sweep samples an even-parity training
//! set, trains a model, and scores it against the uniform state on `E^N`. The
//! results land in three CSV files: one row per trial, one aggregate per
//! fraction, and a plot-ready series that pairs the experimental mean with
//! the theoretical curve.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{derive_seed, sample_count, sample_training_set};
use crate::mps::{overlap, parity_target_mps};
use crate::theory::{
    expected_g2, predict_curve, DistanceVariant, GapCalibration, PredictionPoint, TheoryError,
};
use crate::trainer::{train, TruncationPolicy};

/// Caps the number of worker threads used by sweeps.
pub const THREADS_ENV: &str = "MPS_SEQMODEL_THREADS";
pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SERIES_FILE: &str = "series.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad grid {text:?}: {reason}")]
    Grid { text: String, reason: String },
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub policy: TruncationPolicy,
    pub variant: DistanceVariant,
    pub calibration: GapCalibration,
}

impl ExperimentConfig {
    pub fn new(n: usize, grid: Vec<f64>, trials: usize, base_seed: u64) -> Self {
        Self {
            n,
            grid,
            trials,
            base_seed,
            policy: TruncationPolicy::default(),
            variant: DistanceVariant::Standard,
            calibration: GapCalibration::shipped(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.trials == 0 {
            return Err(ExperimentError::Config("trials must be at least 1".into()));
        }
        if self.n < 3 {
            return Err(ExperimentError::Config(format!("N = {} is too short (need at least 3)", self.n)));
        }
        if let Some(f) = self.grid.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(ExperimentError::Config(format!("fraction {f} outside (0, 1]")));
        }
        self.policy
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

/// One trained model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub f: f64,
    pub trial: usize,
    pub seed: u64,
    #[serde(rename = "N_T")]
    pub n_t: usize,
    /// Overlap of the normalized model with the uniform state on `E^N`.
    pub overlap: f64,
    pub distance: f64,
    #[serde(skip)]
    pub angle_deviation: Vec<f64>,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    #[serde(rename = "N")]
    pub n: usize,
    pub f: f64,
    pub trials: usize,
    pub mean_distance: f64,
    pub std_distance: f64,
    pub theory_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SeriesRow {
    f: f64,
    experimental_mean: f64,
    experimental_std: f64,
    theory: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub n: usize,
    pub variant: DistanceVariant,
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<Aggregate>,
    pub theory: Vec<PredictionPoint>,
    pub warnings: Vec<String>,
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn pool() -> Result<rayon::ThreadPool, ExperimentError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| ExperimentError::Pool(e.to_string()))
}

fn run_trial(cfg: &ExperimentConfig, f_idx: usize, trial: usize) -> TrialRow {
    let f = cfg.grid[f_idx];
    let seed = derive_seed(cfg.base_seed, f_idx as u64, trial as u64);
    let mut row = TrialRow {
        n: cfg.n,
        f,
        trial,
        seed,
        n_t: sample_count(cfg.n, f),
        overlap: f64::NAN,
        distance: f64::NAN,
        angle_deviation: vec![],
        error: None,
    };
    let outcome = (|| -> Result<(f64, Vec<f64>), String> {
        let set = sample_training_set(cfg.n, f, seed).map_err(|e| e.to_string())?;
        let (mps, diag) = train(&set, &cfg.policy).map_err(|e| e.to_string())?;
        let norm2 = mps.norm_squared();
        if !(norm2 > 0.0) {
            return Err("trained model has zero norm".into());
        }
        let raw = overlap(&mps, &parity_target_mps(cfg.n)).map_err(|e| e.to_string())?;
        let deviation = diag
            .steps
            .iter()
            .map(|s| s.theta.map_or(f64::NAN, |t| (t - std::f64::consts::FRAC_PI_4).abs()))
            .collect();
        Ok((raw / norm2.sqrt(), deviation))
    })();
    match outcome {
        Ok((ov, dev)) => {
            row.overlap = ov;
            row.distance = cfg.variant.distance(ov, cfg.n);
            row.angle_deviation = dev;
        }
        Err(e) => row.error = Some(e),
    }
    row
}

/// Mean and sample standard deviation of the finite values.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN, 0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt(), v.len())
}

pub fn aggregate(n: usize, rows: &[TrialRow], theory: &[PredictionPoint], grid: &[f64]) -> Vec<Aggregate> {
    grid.iter()
        .zip(theory)
        .map(|(&f, t)| {
            let (mean, std, count) = mean_std(rows.iter().filter(|r| r.f == f).map(|r| r.distance));
            Aggregate { n, f, trials: count, mean_distance: mean, std_distance: std, theory_distance: t.distance }
        })
        .collect()
}

/// Runs every (fraction, trial) pair. Trials run concurrently; rows come back
/// ordered by (fraction index, trial index).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord, ExperimentError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.grid.len())
        .flat_map(|fi| (0..cfg.trials).map(move |t| (fi, t)))
        .collect();
    let rows: Vec<TrialRow> = pool()?.install(|| jobs.par_iter().map(|&(fi, t)| run_trial(cfg, fi, t)).collect());
    let theory = predict_curve(cfg.n, &cfg.grid, &cfg.calibration, cfg.variant)?;
    let aggregates = aggregate(cfg.n, &rows, &theory, &cfg.grid);
    let mut warnings: Vec<String> = rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("f = {}, trial {}: {e}", r.f, r.trial)))
        .collect();
    if cfg.calibration.points.is_empty() {
        warnings.push("no gap calibration loaded; using c(f) = 1".into());
    } else if cfg.calibration.n.is_some_and(|m| m != cfg.n) {
        warnings.push(format!(
            "gap calibration was measured at N = {} but the sweep uses N = {}",
            cfg.calibration.n.unwrap(),
            cfg.n
        ));
    }
    Ok(ExperimentRecord { n: cfg.n, variant: cfg.variant, rows, aggregates, theory, warnings })
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], records: &[T]) -> Result<(), ExperimentError> {
    let csv_err = |source| ExperimentError::Csv { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Writes `rows.csv`, `aggregate.csv` and `series.csv` into `dir`.
pub fn emit_report(rec: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    let rows = dir.join(ROWS_FILE);
    let agg = dir.join(AGGREGATE_FILE);
    let series = dir.join(SERIES_FILE);
    write_csv(&rows, &["N", "f", "trial", "seed", "N_T", "overlap", "distance"], &rec.rows)?;
    write_csv(
        &agg,
        &["N", "f", "trials", "mean_distance", "std_distance", "theory_distance"],
        &rec.aggregates,
    )?;
    let s: Vec<SeriesRow> = rec
        .aggregates
        .iter()
        .map(|a| SeriesRow {
            f: a.f,
            experimental_mean: a.mean_distance,
            experimental_std: a.std_distance,
            theory: a.theory_distance,
        })
        .collect();
    write_csv(&series, &["f", "experimental_mean", "experimental_std", "theory"], &s)?;
    Ok(vec![rows, agg, series])
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, ExperimentError> {
    let bad = |reason: &str| ExperimentError::Grid { text: text.to_string(), reason: reason.to_string() };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("{s:?} is not a number")));
    let values = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [a, b, step] = parts.as_slice() else {
            return Err(bad("expected start:stop:step"));
        };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || b < a {
            return Err(bad("need stop >= start and step > 0"));
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| round12(a + i as f64 * step)).collect()
    } else {
        text.split(',').filter(|s| !s.trim().is_empty()).map(num).collect::<Result<Vec<_>, _>>()?
    };
    if let Some(f) = values.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(bad(&format!("fraction {f} outside (0, 1]")));
    }
    Ok(values)
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Fits `c(f)` as the mean measured `|G_e|` over steps `2..N−1` and `runs`
/// seeded trainings, divided by the expected step-2 gap.
pub fn calibrate(
    n: usize,
    grid: &[f64],
    runs: usize,
    base_seed: u64,
    policy: &TruncationPolicy,
) -> Result<GapCalibration, ExperimentError> {
    if runs == 0 {
        return Err(ExperimentError::Config("runs must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|fi| (0..runs).map(move |r| (fi, r))).collect();
    let gaps: Vec<Vec<f64>> = pool()?.install(|| {
        jobs.par_iter()
            .map(|&(fi, r)| {
                let seed = derive_seed(base_seed, fi as u64, r as u64);
                let Ok(set) = sample_training_set(n, grid[fi], seed) else { return vec![] };
                let Ok((_, diag)) = train(&set, policy) else { return vec![] };
                diag.steps
                    .iter()
                    .filter(|s| s.step < n)
                    .filter_map(|s| s.block_stats.map(|b| b.g_e().abs()))
                    .collect()
            })
            .collect()
    });
    let mut points = Vec::with_capacity(grid.len());
    for (fi, &f) in grid.iter().enumerate() {
        let measured: Vec<f64> = gaps[fi * runs..(fi + 1) * runs].iter().flatten().copied().collect();
        let g2 = expected_g2(n, sample_count(n, f))?;
        let c = if measured.is_empty() || g2 <= 0.0 {
            1.0
        } else {
            measured.iter().sum::<f64>() / measured.len() as f64 / g2
        };
        points.push((f, c));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GapCalibration { n: Some(n), points })
}

pub fn write_calibration(cal: &GapCalibration, path: &Path) -> Result<(), ExperimentError> {
    let mut f = File::create(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    f.write_all(cal.to_text().as_bytes())
        .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Shape of a sweep against the expected behaviour of the distance curve.
#[derive(Debug, Clone, Serialize)]
pub struct ShapeReport {
    /// `√(mean of per-fraction variances)` of the experimental distances.
    pub pooled_std: f64,
    /// Largest increase of the experimental mean between consecutive fractions.
    pub max_experimental_rise: f64,
    pub max_theory_rise: f64,
    pub distance_at_half: Option<f64>,
    pub distance_at_one: Option<f64>,
    pub theory_at_half: Option<f64>,
    pub theory_at_one: Option<f64>,
}

impl ShapeReport {
    pub fn from_aggregates(aggs: &[Aggregate]) -> Self {
        let mut sorted: Vec<&Aggregate> = aggs.iter().collect();
        sorted.sort_by(|a, b| a.f.total_cmp(&b.f));
        let vars: Vec<f64> = sorted.iter().map(|a| a.std_distance.powi(2)).filter(|v| v.is_finite()).collect();
        let pooled_std = if vars.is_empty() { 0.0 } else { (vars.iter().sum::<f64>() / vars.len() as f64).sqrt() };
        let rise = |get: fn(&Aggregate) -> f64| {
            sorted.windows(2).map(|w| get(w[1]) - get(w[0])).fold(f64::NEG_INFINITY, f64::max)
        };
        let at = |f: f64, get: fn(&Aggregate) -> f64| sorted.iter().find(|a| (a.f - f).abs() < 1e-12).map(|a| get(a));
        Self {
            pooled_std,
            max_experimental_rise: rise(|a| a.mean_distance),
            max_theory_rise: rise(|a| a.theory_distance),
            distance_at_half: at(0.5, |a| a.mean_distance),
            distance_at_one: at(1.0, |a| a.mean_distance),
            theory_at_half: at(0.5, |a| a.theory_distance),
            theory_at_one: at(1.0, |a| a.theory_distance),
        }
    }

    pub fn non_increasing(&self) -> bool {
        !(self.max_experimental_rise > self.pooled_std) && !(self.max_theory_rise > self.pooled_std)
    }

    pub fn vanishes(&self) -> bool {
        let below = |v: Option<f64>, bound: f64| v.is_some_and(|d| d.abs() < bound);
        below(self.distance_at_half, 0.05)
            && below(self.theory_at_half, 0.05)
            && below(self.distance_at_one, 1e-9)
            && below(self.theory_at_one, 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_learning_row() {
        let cfg = ExperimentConfig::new(8, vec![1.0], 1, 3);
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_abs_diff_eq!(rec.rows[0].distance, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rec.aggregates[0].theory_distance, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.01:0.2:0.01").unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.01);
        assert_eq!(g[19], 0.2);
        assert_eq!(g[6], 0.07);
        assert_eq!(parse_grid("0.1, 0.5,1").unwrap(), vec![0.1, 0.5, 1.0]);
        assert!(parse_grid("0:1:0.5").is_err());
        assert!(parse_grid("0.1:0.2").is_err());
        assert!(parse_grid("abc").is_err());
        assert!(parse_grid("").unwrap().is_empty());
    }

    #[test]
    fn empty_grid_gives_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_experiment(&ExperimentConfig::new(8, vec![], 2, 0)).unwrap();
        emit_report(&rec, dir.path()).unwrap();
        let rows = std::fs::read_to_string(dir.path().join(ROWS_FILE)).unwrap();
        assert_eq!(rows, "N,f,trial,seed,N_T,overlap,distance\n");
        let agg = std::fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
        assert_eq!(agg, "N,f,trials,mean_distance,std_distance,theory_distance\n");
        let series = std::fs::read_to_string(dir.path().join(SERIES_FILE)).unwrap();
        assert_eq!(series, "f,experimental_mean,experimental_std,theory\n");
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let cfg = ExperimentConfig::new(10, vec![0.1, 0.3], 4, 11);
        let rec = run_experiment(&cfg).unwrap();
        assert_eq!(rec.rows.len(), 8);
        for a in &rec.aggregates {
            let d: Vec<f64> = rec.rows.iter().filter(|r| r.f == a.f).map(|r| r.distance).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            assert_abs_diff_eq!(a.mean_distance, mean, epsilon = 1e-14);
            assert_abs_diff_eq!(a.std_distance, var.sqrt(), epsilon = 1e-14);
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = ExperimentConfig::new(10, vec![0.05, 0.2], 3, 42);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&run_experiment(&cfg).unwrap(), a.path()).unwrap();
        emit_report(&run_experiment(&cfg).unwrap(), b.path()).unwrap();
        for name in [ROWS_FILE, AGGREGATE_FILE, SERIES_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(run_experiment(&ExperimentConfig::new(8, vec![0.1], 0, 0)).is_err());
        assert!(run_experiment(&ExperimentConfig::new(8, vec![1.5], 1, 0)).is_err());
    }

    #[test]
    fn calibration_at_full_population_is_one() {
        let cal = calibrate(8, &[1.0], 2, 0, &TruncationPolicy::default()).unwrap();
        assert_eq!(cal.points, vec![(1.0, 1.0)]);
        assert_eq!(cal.n, Some(8));
    }
}
