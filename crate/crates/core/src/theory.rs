//! Analysis of the sweep on even-parity data.
//!
//! Every effective density the trainer meets on an even-parity set is a direct
//! sum of two 2×2 blocks. The leading eigenvector of each block is a rotation
//! of the ideal parity summarizer by an angle (`θ_k` for the even block, `φ_k`
//! for the odd one), and the trained model's overlap with the uniform state on
//! `E^N` is a product of these rotations summed over strings. This module
//! reads the blocks, turns them into angles, predicts overlaps and distances,
//! and replays the sweep symbolically from the training strings alone.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::data::{group_by_suffix, sample_count, Bitstring, TrainingSet};
use crate::trainer::EffectiveDensity;

/// Cross-block entries larger than this (relative) mark a density as not block diagonal.
pub const LEAKAGE_WARNING: f64 = 1e-9;
/// `G` and `s` both below this fraction of the block scale make the angle undefined.
pub const DEGENERACY_TOLERANCE: f64 = 1e-14;
/// A block whose leading eigenvalue is at most this fraction of the other
/// block's is dropped by the default truncation, so replay treats it as empty.
pub const EMPTY_BLOCK_TOLERANCE: f64 = 1e-10;

const SHIPPED_CALIBRATION: &str = include_str!("../data/gap_calibration.csv");

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("degenerate block: gap and off-diagonal both vanish (G = {gap:e}, s = {offdiag:e})")]
    DegenerateBlock { gap: f64, offdiag: f64 },
    #[error("step {step}: {what}")]
    AtStep { step: usize, what: Box<TheoryError> },
    #[error("density has no parity labels on a two-dimensional bond")]
    Unlabelled,
    #[error("negative off-diagonal entry {0:e}")]
    NegativeOffDiagonal(f64),
    #[error("training set contains odd-parity string {0}")]
    NotParity(Bitstring),
    #[error("the {0} block is empty")]
    EmptyBlock(&'static str),
    #[error("strings of length {0} are too short")]
    TooShort(usize),
    #[error("angle {value} at step {step} outside [0, π/2]")]
    AngleRange { step: usize, value: f64 },
    #[error("angle schedule for N = {n} needs {expected} entries, got {got}")]
    ScheduleLength { n: usize, expected: usize, got: usize },
    #[error("{count} samples exceed the even population for N = {n}")]
    TooManySamples { n: usize, count: usize },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("unknown distance variant {0:?} (expected \"standard\" or \"paper-literal\")")]
    UnknownVariant(String),
}

impl TheoryError {
    fn at(self, step: usize) -> Self {
        TheoryError::AtStep { step, what: Box::new(self) }
    }
}

/// Entries of the two parity blocks of an effective density,
/// `[[e0, s_e], [s_e, o1]] ⊕ [[e1, s_o], [s_o, o0]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockStats {
    pub e0: f64,
    pub o1: f64,
    pub e1: f64,
    pub o0: f64,
    pub s_e: f64,
    pub s_o: f64,
    /// Factor the entries were multiplied by (the sample count for count units).
    pub normalizer: f64,
    /// Largest cross-block entry relative to the largest entry.
    pub leakage: f64,
}

impl BlockStats {
    pub fn g_e(&self) -> f64 {
        self.e0 - self.o1
    }

    pub fn g_o(&self) -> f64 {
        self.e1 - self.o0
    }

    /// Trace of the density the stats were read from.
    pub fn trace(&self) -> f64 {
        (self.e0 + self.o1 + self.e1 + self.o0) / self.normalizer
    }

    pub fn is_block_diagonal(&self) -> bool {
        self.leakage <= LEAKAGE_WARNING
    }

    pub fn theta(&self) -> Result<f64, TheoryError> {
        block_angle(self.g_e(), self.s_e, self.e0 + self.o1)
    }

    pub fn phi(&self) -> Result<f64, TheoryError> {
        block_angle(self.g_o(), self.s_o, self.e1 + self.o0)
    }

    /// Largest eigenvalue of the even and odd block.
    pub fn block_tops(&self) -> (f64, f64) {
        let top = |a: f64, b: f64, s: f64| 0.5 * (a + b + (a - b).hypot(2.0 * s));
        (top(self.e0, self.o1, self.s_e), top(self.e1, self.o0, self.s_o))
    }
}

fn clamp_offdiag(s: f64, scale: f64) -> Result<f64, TheoryError> {
    if s >= 0.0 {
        Ok(s)
    } else if -s <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Err(TheoryError::NegativeOffDiagonal(s))
    }
}

/// Reads the parity blocks of `rho` and multiplies every entry by `scale`.
pub fn measure_block_stats(rho: &EffectiveDensity, scale: f64) -> Result<BlockStats, TheoryError> {
    if rho.bond_in() != 2 {
        return Err(TheoryError::Unlabelled);
    }
    let idx = |label, bit| rho.index_of(label, bit).ok_or(TheoryError::Unlabelled);
    let order = [idx(0, 0)?, idx(1, 1)?, idx(0, 1)?, idx(1, 0)?];
    let m = &rho.matrix;
    block_stats_from_ordered(&m.submatrix(&order), scale)
}

/// Block stats of a 4×4 matrix already in the order (E0, O1, E1, O0).
pub fn block_stats_from_ordered(m: &crate::linalg::DenseMatrix, scale: f64) -> Result<BlockStats, TheoryError> {
    assert_eq!((m.rows(), m.cols()), (4, 4));
    let at = |i, j| m[(i, j)] * scale;
    let max = m.max_abs();
    let mut leak = 0.0_f64;
    for i in 0..2 {
        for j in 2..4 {
            leak = leak.max(m[(i, j)].abs()).max(m[(j, i)].abs());
        }
    }
    let diag_scale = (0..4).map(|i| at(i, i).abs()).sum::<f64>();
    Ok(BlockStats {
        e0: at(0, 0),
        o1: at(1, 1),
        e1: at(2, 2),
        o0: at(3, 3),
        s_e: clamp_offdiag(at(0, 1), diag_scale)?,
        s_o: clamp_offdiag(at(2, 3), diag_scale)?,
        normalizer: scale,
        leakage: if max > 0.0 { leak / max } else { 0.0 },
    })
}

/// Rotation angle of the leading eigenvector of `[[a, s], [s, b]]` with
/// `gap = a − b`, measured from the first basis vector.
///
/// `½·atan2(2s, G)`, which equals `arctan(2s / (√(G² + 4s²) + G))` and stays
/// finite when `G < 0, s = 0` (angle π/2). `scale` sets what counts as zero.
pub fn block_angle(gap: f64, offdiag: f64, scale: f64) -> Result<f64, TheoryError> {
    let tol = DEGENERACY_TOLERANCE * scale.abs();
    if gap.abs() <= tol && offdiag.abs() <= tol {
        return Err(TheoryError::DegenerateBlock { gap, offdiag });
    }
    let s = if offdiag < 0.0 && -offdiag <= tol { 0.0 } else { offdiag };
    Ok(0.5 * (2.0 * s).atan2(gap))
}

/// `(θ, φ)` from the two blocks.
pub fn angles_from_stats(b: &BlockStats) -> Result<(f64, f64), TheoryError> {
    Ok((b.theta()?, b.phi()?))
}

/// Angles `θ_k, φ_k` for `k = 2..=N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleSchedule {
    n: usize,
    theta: Vec<f64>,
    phi: Vec<f64>,
}

impl AngleSchedule {
    pub fn new(n: usize, theta: Vec<f64>, phi: Vec<f64>) -> Result<Self, TheoryError> {
        let expected = n.saturating_sub(1);
        for v in [&theta, &phi] {
            if v.len() != expected {
                return Err(TheoryError::ScheduleLength { n, expected, got: v.len() });
            }
        }
        for (i, &a) in theta.iter().chain(&phi).enumerate() {
            if !(-1e-12..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&a) {
                return Err(TheoryError::AngleRange { step: i % expected + 2, value: a });
            }
        }
        Ok(Self { n, theta, phi })
    }

    pub fn uniform(n: usize, angle: f64) -> Self {
        let len = n.saturating_sub(1);
        Self { n, theta: vec![angle; len], phi: vec![angle; len] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn theta(&self, k: usize) -> f64 {
        self.theta[k - 2]
    }

    pub fn phi(&self, k: usize) -> f64 {
        self.phi[k - 2]
    }

    pub fn thetas(&self) -> &[f64] {
        &self.theta
    }

    pub fn phis(&self) -> &[f64] {
        &self.phi
    }

    /// Factor picked up at step `k` by a prefix of parity `parity` followed by `bit`.
    pub fn factor(&self, k: usize, parity: u8, bit: u8) -> f64 {
        match (parity, bit) {
            (0, 0) => self.theta(k).cos(),
            (1, 1) => self.theta(k).sin(),
            (0, _) => self.phi(k).cos(),
            _ => self.phi(k).sin(),
        }
    }
}

/// `w(a)` for a prefix of length `k`: the factors of steps `2..k`, the last
/// bit left unweighted.
pub fn prefix_weight(a: &Bitstring, angles: &AngleSchedule) -> f64 {
    weight_through(a, a.len().saturating_sub(1), angles)
}

/// Product of the step factors `2..=last` of `s`.
pub fn weight_through(s: &Bitstring, last: usize, angles: &AngleSchedule) -> f64 {
    let mut parity = s.bit(1);
    let mut w = 1.0;
    for i in 2..=last {
        let b = s.bit(i);
        w *= angles.factor(i, parity, b);
        parity ^= b;
    }
    w
}

/// Weight of a full string, every step `2..=N` included.
pub fn string_weight(s: &Bitstring, angles: &AngleSchedule) -> f64 {
    weight_through(s, s.len(), angles)
}

/// `(1/√2^{N−1}) Σ_{s∈E^N} w(s)` by the two-state parity recursion.
pub fn predict_overlap(angles: &AngleSchedule, n: usize) -> f64 {
    let (mut even, mut odd) = (1.0_f64, 1.0_f64);
    for k in 2..=n {
        let (ct, st) = (angles.theta(k).cos(), angles.theta(k).sin());
        let (cp, sp) = (angles.phi(k).cos(), angles.phi(k).sin());
        (even, odd) = (even * ct + odd * st, even * cp + odd * sp);
    }
    even * 0.5_f64.powf((n as f64 - 1.0) / 2.0)
}

/// `−ln(overlap)`; infinite when the overlap is not positive.
pub fn bhattacharya_distance(overlap: f64) -> f64 {
    if overlap > 0.0 {
        (-overlap.ln()).max(0.0)
    } else {
        f64::INFINITY
    }
}

/// `−(1/√2^{N−1}) ln Σ w(s)` with `Σ w(s) = √2^{N−1}·overlap`.
pub fn paper_literal_distance(overlap: f64, n: usize) -> f64 {
    if overlap <= 0.0 {
        return f64::INFINITY;
    }
    let root = 2.0_f64.powf((n as f64 - 1.0) / 2.0);
    -(root * overlap).ln() / root
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceVariant {
    #[default]
    Standard,
    PaperLiteral,
}

impl DistanceVariant {
    pub fn distance(self, overlap: f64, n: usize) -> f64 {
        match self {
            DistanceVariant::Standard => bhattacharya_distance(overlap),
            DistanceVariant::PaperLiteral => paper_literal_distance(overlap, n),
        }
    }
}

impl fmt::Display for DistanceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceVariant::Standard => "standard",
            DistanceVariant::PaperLiteral => "paper-literal",
        })
    }
}

impl FromStr for DistanceVariant {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(DistanceVariant::Standard),
            "paper-literal" => Ok(DistanceVariant::PaperLiteral),
            other => Err(TheoryError::UnknownVariant(other.to_string())),
        }
    }
}

/// Expected even-block off-diagonal, in counts.
pub fn expected_se(f: f64, n_t: usize) -> f64 {
    f * n_t as f64 / 4.0
}

/// Samples expected in the even block at step 2: half of `N_T`, rounded half up.
pub fn even_block_draws(n_t: usize) -> usize {
    n_t.div_ceil(2)
}

/// `E|2d₁ − r|` for `d₁ ~ Hypergeometric(2n, n, r)`, `n = 2^{N−3}`, `r = ⌈N_T/2⌉`.
pub fn expected_g2(len: usize, n_t: usize) -> Result<f64, TheoryError> {
    if len < 3 {
        return Err(TheoryError::TooShort(len));
    }
    let n = 1u64 << (len - 3);
    if n_t as u64 > 4 * n {
        return Err(TheoryError::TooManySamples { n: len, count: n_t });
    }
    Ok(hypergeometric_abs_gap(n, even_block_draws(n_t) as u64))
}

/// `Σ_{d} |2d − r|·C(n, d)·C(n, r − d)/C(2n, r)`.
pub fn hypergeometric_abs_gap(n: u64, r: u64) -> f64 {
    assert!(r <= 2 * n);
    let ln_total = ln_binomial(2 * n, r);
    let lo = r.saturating_sub(n);
    let hi = r.min(n);
    (lo..=hi)
        .map(|d| {
            let gap = (2 * d).abs_diff(r) as f64;
            if gap == 0.0 {
                0.0
            } else {
                gap * (ln_binomial(n, d) + ln_binomial(n, r - d) - ln_total).exp()
            }
        })
        .sum()
}

/// `c(f)` in `E|G_k| ≈ c(f)·G₂`, piecewise linear between calibrated fractions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCalibration {
    pub n: Option<usize>,
    pub points: Vec<(f64, f64)>,
}

impl GapCalibration {
    /// `c ≡ 1`.
    pub fn identity() -> Self {
        Self { n: None, points: vec![] }
    }

    /// The table compiled into the library.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_CALIBRATION).expect("shipped calibration parses")
    }

    /// Lines `f,c`; `#` starts a comment and `# N=<n>` records the length.
    pub fn parse(text: &str) -> Result<Self, TheoryError> {
        let mut n = None;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("N=") {
                    n = Some(v.trim().parse().map_err(|_| {
                        TheoryError::Calibration(format!("line {}: bad length {v:?}", lineno + 1))
                    })?);
                }
                continue;
            }
            if line.is_empty() || line.starts_with('f') {
                continue;
            }
            let bad = || TheoryError::Calibration(format!("line {}: expected \"f,c\", got {line:?}", lineno + 1));
            let (f, c) = line.split_once(',').ok_or_else(bad)?;
            let f: f64 = f.trim().parse().map_err(|_| bad())?;
            let c: f64 = c.trim().parse().map_err(|_| bad())?;
            if !(f > 0.0 && f <= 1.0 && c.is_finite() && c >= 0.0) {
                return Err(bad());
            }
            points.push((f, c));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|a, b| a.0 == b.0);
        Ok(Self { n, points })
    }

    pub fn load(path: &Path) -> Result<Self, TheoryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TheoryError::Calibration(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads `path`, falling back to `c ≡ 1` with a warning.
    pub fn load_or_identity(path: &Path) -> (Self, Option<String>) {
        match Self::load(path) {
            Ok(c) if !c.points.is_empty() => (c, None),
            Ok(_) => (Self::identity(), Some(format!("{} holds no calibration points; using c(f) = 1", path.display()))),
            Err(e) => (Self::identity(), Some(format!("{e}; using c(f) = 1"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(n) = self.n {
            out.push_str(&format!("# N={n}\n"));
        }
        out.push_str("f,c\n");
        for (f, c) in &self.points {
            out.push_str(&format!("{f},{c:.6}\n"));
        }
        out
    }

    pub fn c(&self, f: f64) -> f64 {
        let pts = &self.points;
        match pts.len() {
            0 => 1.0,
            _ if f <= pts[0].0 => pts[0].1,
            _ if f >= pts[pts.len() - 1].0 => pts[pts.len() - 1].1,
            _ => {
                let hi = pts.partition_point(|p| p.0 < f);
                let (f0, c0) = pts[hi - 1];
                let (f1, c1) = pts[hi];
                c0 + (c1 - c0) * (f - f0) / (f1 - f0)
            }
        }
    }
}

/// Expected |G_e| at any step `k ≥ 2`: `c(f)·G₂`.
pub fn gap_model(calibration: &GapCalibration, f: f64, g2: f64) -> f64 {
    calibration.c(f) * g2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionPoint {
    pub f: f64,
    pub n_t: usize,
    pub theta: f64,
    pub overlap: f64,
    pub distance: f64,
}

/// Theoretical overlap and distance for each fraction, one shared angle
/// `θ_k = φ_k = θ(E[G], E[s_e])` at every step.
pub fn predict_curve(
    n: usize,
    grid: &[f64],
    calibration: &GapCalibration,
    variant: DistanceVariant,
) -> Result<Vec<PredictionPoint>, TheoryError> {
    grid.iter()
        .map(|&f| {
            let n_t = sample_count(n, f);
            let s = expected_se(f, n_t);
            let g = gap_model(calibration, f, expected_g2(n, n_t)?);
            let theta = if n_t == 0 { 0.0 } else { block_angle(g, s, g + s)? };
            let overlap = predict_overlap(&AngleSchedule::uniform(n, theta), n);
            Ok(PredictionPoint { f, n_t, theta, overlap, distance: variant.distance(overlap, n) })
        })
        .collect()
}

/// Block entries at cut `k` in counts, each prefix weighted by
/// [`prefix_weight`] under `angles`.
pub fn block_stats_at(set: &TrainingSet, k: usize, angles: &AngleSchedule) -> BlockStats {
    let mut e = [0.0_f64; 4];
    let (mut s_e, mut s_o) = (0.0, 0.0);
    for group in group_by_suffix(set, k).iter() {
        let mut sums = [0.0_f64; 4];
        for &(i, bit) in &group.members {
            let a = set.samples()[i].prefix(k);
            let p = a.prefix(k - 1).parity();
            sums[block_slot(p, bit)] += prefix_weight(&a, angles);
        }
        for (acc, s) in e.iter_mut().zip(sums) {
            *acc += s * s;
        }
        s_e += sums[0] * sums[1];
        s_o += sums[2] * sums[3];
    }
    BlockStats {
        e0: e[0],
        o1: e[1],
        e1: e[2],
        o0: e[3],
        s_e,
        s_o,
        normalizer: set.n_samples() as f64,
        leakage: 0.0,
    }
}

/// Position of (prefix parity, bit) in the order E0, O1, E1, O0.
fn block_slot(parity: u8, bit: u8) -> usize {
    match (parity, bit) {
        (0, 0) => 0,
        (1, 1) => 1,
        (0, _) => 2,
        _ => 3,
    }
}

/// Angles and block stats (in counts) obtained by replaying the sweep on
/// even-parity data with prefix weights in place of summary vectors.
#[derive(Debug, Clone)]
pub struct Replay {
    pub angles: AngleSchedule,
    /// Steps `2..=N`.
    pub stats: Vec<BlockStats>,
}

/// Recomputes the block entries at every step as sums of squared prefix
/// weights over shared suffixes, deriving each step's angles from the last.
///
/// At the final step the odd block is empty and `φ_N` is set to π/4; it never
/// enters a weight of an even string.
pub fn exact_replay(set: &TrainingSet) -> Result<Replay, TheoryError> {
    let n = set.len();
    if n < 2 {
        return Err(TheoryError::TooShort(n));
    }
    if let Some(s) = set.samples().iter().find(|s| s.parity() != 0) {
        return Err(TheoryError::NotParity(*s));
    }
    let mut weight = vec![1.0_f64; set.n_samples()];
    let mut parity: Vec<u8> = set.samples().iter().map(|s| s.bit(1)).collect();
    let mut thetas = Vec::with_capacity(n - 1);
    let mut phis = Vec::with_capacity(n - 1);
    let mut stats = Vec::with_capacity(n - 1);

    for k in 2..=n {
        let mut e = [0.0_f64; 4]; // E0, O1, E1, O0
        let (mut s_e, mut s_o) = (0.0, 0.0);
        for group in group_by_suffix(set, k).iter() {
            let mut sums = [0.0_f64; 4];
            for &(i, bit) in &group.members {
                sums[block_slot(parity[i], bit)] += weight[i];
            }
            for (acc, s) in e.iter_mut().zip(sums) {
                *acc += s * s;
            }
            s_e += sums[0] * sums[1];
            s_o += sums[2] * sums[3];
        }
        let b = BlockStats {
            e0: e[0],
            o1: e[1],
            e1: e[2],
            o0: e[3],
            s_e,
            s_o,
            normalizer: set.n_samples() as f64,
            leakage: 0.0,
        };
        let (even_top, odd_top) = b.block_tops();
        let theta = b.theta().map_err(|e| e.at(k))?;
        let phi = if k == n {
            FRAC_PI_4
        } else {
            if even_top <= EMPTY_BLOCK_TOLERANCE * odd_top {
                return Err(TheoryError::EmptyBlock("even").at(k));
            }
            if odd_top <= EMPTY_BLOCK_TOLERANCE * even_top {
                return Err(TheoryError::EmptyBlock("odd").at(k));
            }
            b.phi().map_err(|e| e.at(k))?
        };
        thetas.push(theta);
        phis.push(phi);
        stats.push(b);

        if k < n {
            let (ct, st, cp, sp) = (theta.cos(), theta.sin(), phi.cos(), phi.sin());
            for (i, s) in set.samples().iter().enumerate() {
                let bit = s.bit(k);
                weight[i] *= match (parity[i], bit) {
                    (0, 0) => ct,
                    (1, 1) => st,
                    (0, _) => cp,
                    _ => sp,
                };
                parity[i] ^= bit;
            }
        }
    }
    Ok(Replay { angles: AngleSchedule::new(n, thetas, phis)?, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{even_strings, sample_training_set};
    use crate::linalg::{sym_eig, DenseMatrix};
    use crate::trainer::{effective_density, SummaryVectors};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_8};

    fn brute_overlap(angles: &AngleSchedule, n: usize) -> f64 {
        let total: f64 = even_strings(n).unwrap().iter().map(|s| string_weight(s, angles)).sum();
        total / 2.0_f64.powf((n as f64 - 1.0) / 2.0)
    }

    #[test]
    fn full_population_step_two_stats() {
        let set = sample_training_set(6, 1.0, 0).unwrap();
        let rho = effective_density(&SummaryVectors::initial(&set), &group_by_suffix(&set, 2)).unwrap();
        let b = measure_block_stats(&rho, 1.0).unwrap();
        for v in [b.e0, b.o1, b.e1, b.o0, b.s_e, b.s_o] {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        assert!(b.is_block_diagonal());
        let (t, p) = angles_from_stats(&b).unwrap();
        assert_abs_diff_eq!(t, FRAC_PI_4, epsilon = 1e-15);
        assert_abs_diff_eq!(p, FRAC_PI_4, epsilon = 1e-15);
    }

    #[test]
    fn ordered_layout_reads_upper_and_lower_blocks() {
        let m = DenseMatrix::from_rows(&[
            [3.0, 1.0, 0.0, 0.0],
            [1.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 5.0, 4.0],
            [0.0, 0.0, 4.0, 6.0],
        ]);
        let b = block_stats_from_ordered(&m, 1.0).unwrap();
        assert_eq!((b.e0, b.o1, b.s_e), (3.0, 2.0, 1.0));
        assert_eq!((b.e1, b.o0, b.s_o), (5.0, 6.0, 4.0));
        assert_eq!(b.leakage, 0.0);
    }

    #[test]
    fn leakage_is_recorded() {
        let mut rows = [[1.0, 0.5, 0.0, 0.0], [0.5, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.5], [0.0, 0.0, 0.5, 1.0]];
        rows[0][2] = 1e-3;
        rows[2][0] = 1e-3;
        let b = block_stats_from_ordered(&DenseMatrix::from_rows(&rows), 1.0).unwrap();
        assert!(!b.is_block_diagonal());
    }

    #[test]
    fn angle_examples() {
        assert_abs_diff_eq!(block_angle(0.0, 3.0, 6.0).unwrap(), FRAC_PI_4, epsilon = 1e-15);
        assert_abs_diff_eq!(block_angle(2.0, 1.0, 4.0).unwrap(), FRAC_PI_8, epsilon = 1e-15);
        assert_abs_diff_eq!((1.0 / (1.0 + 2.0_f64.sqrt())).atan(), FRAC_PI_8, epsilon = 1e-15);
        assert_eq!(block_angle(2.0, 0.0, 4.0).unwrap(), 0.0);
        assert_abs_diff_eq!(block_angle(-2.0, 0.0, 4.0).unwrap(), FRAC_PI_2, epsilon = 1e-15);
        assert!(matches!(block_angle(0.0, 0.0, 1.0), Err(TheoryError::DegenerateBlock { .. })));
    }

    #[test]
    fn prefix_weight_examples() {
        let angles = AngleSchedule::new(5, vec![0.1, 0.2, 0.3, 0.4], vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let a: Bitstring = "011".parse().unwrap();
        assert_abs_diff_eq!(prefix_weight(&a, &angles), angles.phi(2).cos(), epsilon = 1e-15);
        let a: Bitstring = "01101".parse().unwrap();
        let want = angles.theta(4).cos() * angles.theta(3).sin() * angles.phi(2).cos();
        assert_abs_diff_eq!(prefix_weight(&a, &angles), want, epsilon = 1e-15);
        for s in ["00", "01", "10", "11"] {
            assert_eq!(prefix_weight(&s.parse().unwrap(), &angles), 1.0);
        }
    }

    #[test]
    fn overlap_limits() {
        for n in [2, 5, 16, 40] {
            assert_abs_diff_eq!(predict_overlap(&AngleSchedule::uniform(n, FRAC_PI_4), n), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(predict_overlap(&AngleSchedule::uniform(4, 0.0), 4), 1.0 / 8.0_f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(brute_overlap(&AngleSchedule::uniform(4, 0.0), 4), 1.0 / 8.0_f64.sqrt(), epsilon = 1e-15);
        let t = 0.3;
        assert_abs_diff_eq!(
            predict_overlap(&AngleSchedule::uniform(9, t), 9),
            (t - FRAC_PI_4).cos().powi(8),
            epsilon = 1e-14
        );
    }

    #[test]
    fn distances() {
        assert_eq!(bhattacharya_distance(1.0), 0.0);
        assert_abs_diff_eq!(bhattacharya_distance(0.5), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(bhattacharya_distance(0.0), f64::INFINITY);
        assert!(paper_literal_distance(1.0, 16) < 0.0);
        assert_eq!("paper-literal".parse::<DistanceVariant>().unwrap(), DistanceVariant::PaperLiteral);
        assert!("other".parse::<DistanceVariant>().is_err());
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(expected_se(0.125, 4096), 128.0);
        assert_eq!(expected_se(1.0, 1 << 15), (1 << 13) as f64);
        assert_abs_diff_eq!(hypergeometric_abs_gap(2, 2), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hypergeometric_abs_gap(16, 32), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_g2(16, 1 << 15).unwrap(), 0.0, epsilon = 1e-15);
        assert!(expected_g2(2, 1).is_err());
    }

    #[test]
    fn g2_matches_exact_enumeration() {
        // enumerate all r-subsets of 2n items, the first n labelled "d1"
        for n in 1..=4u64 {
            for r in 0..=2 * n {
                let mut total = 0.0;
                let mut count = 0.0;
                for mask in 0u32..(1 << (2 * n)) {
                    if mask.count_ones() as u64 != r {
                        continue;
                    }
                    let d1 = (mask & ((1 << n) - 1)).count_ones() as i64;
                    total += (2 * d1 - r as i64).abs() as f64;
                    count += 1.0;
                }
                assert_abs_diff_eq!(hypergeometric_abs_gap(n, r), total / count, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn calibration_parsing_and_interpolation() {
        let c = GapCalibration::parse("# N=16\nf,c\n0.1,2.0\n0.2,4.0\n").unwrap();
        assert_eq!(c.n, Some(16));
        assert_eq!(c.c(0.05), 2.0);
        assert_abs_diff_eq!(c.c(0.15), 3.0, epsilon = 1e-15);
        assert_eq!(c.c(0.9), 4.0);
        assert_eq!(GapCalibration::identity().c(0.3), 1.0);
        assert_eq!(gap_model(&GapCalibration::identity(), 0.3, 7.5), 7.5);
        assert_eq!(gap_model(&c, 1.0, 0.0), 0.0);
        assert!(GapCalibration::parse("0.1;2").is_err());
        let (cal, warning) = GapCalibration::load_or_identity(Path::new("/nonexistent/calibration.csv"));
        assert_eq!(cal, GapCalibration::identity());
        assert!(warning.is_some());
        let round = GapCalibration::parse(&c.to_text()).unwrap();
        assert_eq!(round, c);
        assert!(!GapCalibration::shipped().points.is_empty());
    }

    #[test]
    fn prediction_curve_endpoints() {
        let pts = predict_curve(16, &[1.0], &GapCalibration::shipped(), DistanceVariant::Standard).unwrap();
        assert_abs_diff_eq!(pts[0].distance, 0.0, epsilon = 1e-12);
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.01).collect();
        let pts = predict_curve(16, &grid, &GapCalibration::shipped(), DistanceVariant::Standard).unwrap();
        assert_eq!(pts.len(), 20);
        for w in pts.windows(2) {
            assert!(w[1].distance <= w[0].distance + 1e-12, "{w:?}");
        }
    }

    fn graph_set() -> TrainingSet {
        // prefixes 000, 110 (E0) and 011, 101 (O1) joined to suffixes 000, 110, 101, 011
        TrainingSet::from_strs(&[
            "000000", "000101", "110000", "110101", "110011", "011000", "101110", "101011",
        ])
        .unwrap()
    }

    #[test]
    fn degree_squares_at_perfect_learning() {
        let uniform = AngleSchedule::uniform(6, FRAC_PI_4);
        let b = block_stats_at(&graph_set(), 3, &uniform);
        // every weight is 1/√2, so the degree sums pick up a factor 1/2
        assert_abs_diff_eq!(2.0 * b.e0, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn shared_paths_at_perfect_learning() {
        let uniform = AngleSchedule::uniform(6, FRAC_PI_4);
        let b = block_stats_at(&graph_set(), 3, &uniform);
        assert_abs_diff_eq!(2.0 * b.s_e, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn replay_agrees_with_direct_weights() {
        for seed in 0..20 {
            let set = sample_training_set(8, 0.4, seed).unwrap();
            let Ok(r) = exact_replay(&set) else { continue };
            for k in 2..=8 {
                let direct = block_stats_at(&set, k, &r.angles);
                let got = r.stats[k - 2];
                for (a, b) in [(got.e0, direct.e0), (got.o1, direct.o1), (got.s_e, direct.s_e), (got.s_o, direct.s_o)] {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn replay_rejects_odd_strings() {
        let set = TrainingSet::from_strs(&["001", "011"]).unwrap();
        assert!(matches!(exact_replay(&set), Err(TheoryError::NotParity(_))));
    }

    #[test]
    fn full_population_replay_is_perfect() {
        for n in [3, 6, 10] {
            let r = exact_replay(&sample_training_set(n, 1.0, 0).unwrap()).unwrap();
            assert!(r.angles.thetas().iter().chain(r.angles.phis()).all(|a| (a - FRAC_PI_4).abs() < 1e-12));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn angle_in_range_and_matches_eigenvector(a in 0.0f64..10.0, b in 0.0f64..10.0, s in 0.0f64..10.0) {
            prop_assume!((a - b).abs() > 1e-6 || s > 1e-6);
            let t = block_angle(a - b, s, a + b).unwrap();
            prop_assert!((0.0..=FRAC_PI_2).contains(&t));
            let alt = (2.0 * s / ((a - b).hypot(2.0 * s) + (a - b))).atan();
            if a - b > -1e-3 {
                prop_assert!((t - alt).abs() < 1e-9);
            }
            prop_assert_eq!((t - FRAC_PI_4).abs() < 1e-15, (a - b).abs() < 1e-15 && s > 0.0);
            let eig = sym_eig(&DenseMatrix::from_rows(&[[a, s], [s, b]])).unwrap();
            prop_assume!(eig.eigenvalues[0] - eig.eigenvalues[1] > 1e-6);
            let v = eig.vector(0);
            let measured = v[1].abs().atan2(v[0].abs());
            prop_assert!((measured - t).abs() < 1e-9);
        }

        #[test]
        fn overlap_recursion_matches_enumeration(
            n in 2usize..=10,
            raw in proptest::collection::vec(0.0f64..FRAC_PI_2, 18),
        ) {
            let angles = AngleSchedule::new(n, raw[..n - 1].to_vec(), raw[9..9 + n - 1].to_vec()).unwrap();
            prop_assert!((predict_overlap(&angles, n) - brute_overlap(&angles, n)).abs() <= 1e-12);
        }

        #[test]
        fn distance_decreases_in_overlap(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(bhattacharya_distance(a) > bhattacharya_distance(b));
        }
    }
}
