//! Deterministic inductive training sweep.
//!
//! Site 1 is the identity on the first symbol. At every later cut `k` the
//! sweep forms the effective reduced density on `B_{k-1} ⊗ V_k` directly from
//! the training samples, keeps its leading eigenvectors as the next site
//! tensor, and pushes every sample's prefix summary through that tensor. The
//! last site is the adjoint of the accumulated prefix map, so no density on
//! the full `2^k`-dimensional prefix space is ever formed.
//!
//! Bond indices carry an optional parity label (0 even, 1 odd). Labels start
//! as the value of the first bit and survive as long as every kept eigenvector
//! lives inside one parity class; while they exist the sweep can read off the
//! block statistics and angles that the theory module predicts.

use serde::Serialize;
use thiserror::Error;

use crate::data::{group_by_suffix, SuffixGroups, TrainingSet};
use crate::linalg::{sym_eig, DenseMatrix, LinalgError};
use crate::mps::{Mps, SiteTensor};
use crate::theory::{measure_block_stats, BlockStats};

/// Alphabet size of the bitstring models.
pub const PHYS: usize = 2;
/// Eigenvalues at or below this fraction of the largest count as numerical zeros.
pub const RANK_FLOOR: f64 = 1e-13;
/// Relative size below which cross-parity entries count as absent.
pub const BLOCK_LEAKAGE_TOLERANCE: f64 = 1e-12;
/// Isometry tolerance checked on every produced site tensor.
pub const ISOMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("strings of length {0} are too short to train (need at least 2)")]
    TooShort(usize),
    #[error("invalid truncation policy: {0}")]
    BadPolicy(String),
    #[error("step {step}: every eigenvalue falls below the cutoff")]
    EmptyModel { step: usize },
    #[error("summary vectors and suffix groups disagree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// How many eigenvectors a step may keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationPolicy {
    /// Largest bond dimension χ_max.
    pub max_bond: usize,
    /// Eigenvalues below `cutoff · λ_max` are discarded.
    pub cutoff: f64,
    /// Also discard numerically zero eigenvalues (`≤ RANK_FLOOR · λ_max`).
    /// Turning this off keeps the full eigenbasis, so every site tensor is
    /// square-orthogonal and the bond grows as `d^k`.
    pub drop_null_space: bool,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { max_bond: 2, cutoff: 1e-10, drop_null_space: true }
    }
}

impl TruncationPolicy {
    pub fn new(max_bond: usize, cutoff: f64) -> Result<Self, TrainError> {
        let p = Self { max_bond, cutoff, drop_null_space: true };
        p.validate()?;
        Ok(p)
    }

    /// Unbounded bond, zero cutoff: the factorization is exact.
    pub fn lossless() -> Self {
        Self { max_bond: usize::MAX, cutoff: 0.0, drop_null_space: true }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_bond == 0 {
            return Err(TrainError::BadPolicy("max_bond must be at least 1".into()));
        }
        if !(self.cutoff >= 0.0) || !self.cutoff.is_finite() {
            return Err(TrainError::BadPolicy(format!("cutoff {} must be finite and >= 0", self.cutoff)));
        }
        Ok(())
    }

    fn threshold(&self, lambda_max: f64) -> f64 {
        if self.drop_null_space {
            self.cutoff.max(RANK_FLOOR) * lambda_max
        } else {
            (self.cutoff - RANK_FLOOR) * lambda_max
        }
    }

    fn keeps(&self, lambda: f64, lambda_max: f64) -> bool {
        if self.drop_null_space {
            lambda > self.threshold(lambda_max)
        } else {
            lambda >= self.threshold(lambda_max)
        }
    }
}

/// Per-sample state of the training prefixes after the sites built so far.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryVectors {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<u8>>,
}

impl SummaryVectors {
    /// One-hot on the first bit: the state after the identity site 1.
    pub fn initial(set: &TrainingSet) -> Self {
        let mut data = vec![0.0; set.n_samples() * PHYS];
        for (i, s) in set.samples().iter().enumerate() {
            data[i * PHYS + usize::from(s.bit(1))] = 1.0;
        }
        Self { dim: PHYS, data, labels: Some(vec![0, 1]) }
    }

    pub fn new(dim: usize, data: Vec<f64>, labels: Option<Vec<u8>>) -> Self {
        assert_eq!(data.len() % dim.max(1), 0);
        if let Some(l) = &labels {
            assert_eq!(l.len(), dim);
        }
        Self { dim, data, labels }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_samples(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Σ_i ‖v_i‖²
    pub fn total_norm_squared(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `v_i ← Aᵀ(v_i ⊗ e(x_i))` for the bit `x_i` each sample has at `cut`.
    pub fn advance(
        &self,
        tensor: &SiteTensor,
        set: &TrainingSet,
        cut: usize,
        labels: Option<Vec<u8>>,
    ) -> Self {
        debug_assert_eq!(tensor.bond_in(), self.dim);
        let out = tensor.bond_out();
        let mut data = vec![0.0; self.n_samples() * out];
        for (i, s) in set.samples().iter().enumerate() {
            let x = usize::from(s.bit(cut));
            let dst = &mut data[i * out..(i + 1) * out];
            for (j, &vj) in self.vector(i).iter().enumerate() {
                if vj == 0.0 {
                    continue;
                }
                for (jp, d) in dst.iter_mut().enumerate() {
                    *d += vj * tensor.get(j, x, jp);
                }
            }
        }
        Self { dim: out, data, labels }
    }
}

/// Reduced density of the prefix system in the compressed space
/// `B_{k-1} ⊗ V_k`, basis index `j·d + x`.
#[derive(Debug, Clone)]
pub struct EffectiveDensity {
    pub matrix: DenseMatrix,
    pub trace: f64,
    /// Parity label of each incoming bond index, when known.
    pub bond_labels: Option<Vec<u8>>,
}

impl EffectiveDensity {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn bond_in(&self) -> usize {
        self.dim() / PHYS
    }

    /// Parity class (`label ⊕ bit`) of every basis index.
    pub fn classes(&self) -> Option<Vec<u8>> {
        self.bond_labels
            .as_ref()
            .map(|l| (0..self.dim()).map(|r| l[r / PHYS] ^ (r % PHYS) as u8).collect())
    }

    /// Basis index of `(bond labelled `label`, bit)`.
    pub fn index_of(&self, label: u8, bit: usize) -> Option<usize> {
        let labels = self.bond_labels.as_ref()?;
        labels.iter().position(|&l| l == label).map(|j| j * PHYS + bit)
    }

    /// Largest entry coupling different parity classes, relative to the
    /// largest entry overall.
    pub fn relative_leakage(&self) -> Option<f64> {
        let classes = self.classes()?;
        let n = self.dim();
        let mut leak = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                if classes[i] != classes[j] {
                    leak = leak.max(self.matrix[(i, j)].abs());
                }
            }
        }
        let scale = self.matrix.max_abs();
        Some(if scale > 0.0 { leak / scale } else { 0.0 })
    }
}

/// `ρ = (1/N_T) Σ_b u_b u_bᵀ` with `u_b = Σ_{i ∈ b} v_i ⊗ e(x_i)`, one term per
/// suffix group `b`.
pub fn effective_density(v: &SummaryVectors, groups: &SuffixGroups) -> Result<EffectiveDensity, TrainError> {
    let n_t = v.n_samples();
    if n_t == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    if groups.total_members() != n_t {
        return Err(TrainError::Inconsistent(format!(
            "{} grouped members for {n_t} summaries",
            groups.total_members()
        )));
    }
    let dim = v.dim() * PHYS;
    let mut rho = DenseMatrix::zeros(dim, dim);
    let mut u = vec![0.0; dim];
    let mut support = Vec::with_capacity(dim);
    for group in groups.iter() {
        u.iter_mut().for_each(|x| *x = 0.0);
        for &(i, bit) in &group.members {
            let x = usize::from(bit);
            for (j, &vj) in v.vector(i).iter().enumerate() {
                u[j * PHYS + x] += vj;
            }
        }
        support.clear();
        support.extend((0..dim).filter(|&r| u[r] != 0.0));
        for (a, &r) in support.iter().enumerate() {
            for &c in &support[a..] {
                rho[(r, c)] += u[r] * u[c];
            }
        }
    }
    let scale = 1.0 / n_t as f64;
    for r in 0..dim {
        for c in r..dim {
            let val = rho[(r, c)] * scale;
            rho[(r, c)] = val;
            rho[(c, r)] = val;
        }
    }
    let trace = rho.trace();
    Ok(EffectiveDensity { matrix: rho, trace, bond_labels: v.labels.clone() })
}

/// Outcome of one truncation step.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub tensor: SiteTensor,
    pub kept: Vec<f64>,
    pub discarded: f64,
    /// Parity label of each outgoing bond index, when every kept vector has one.
    pub labels: Option<Vec<u8>>,
    pub block_aware: bool,
    pub warning: Option<String>,
}

/// Keeps the leading eigenvectors of `ρ` as the columns of the next site
/// tensor.
///
/// When parity labels are known, `max_bond == 2`, and `ρ` has no cross-parity
/// entries, the top eigenvector of each parity block is kept (even block
/// first) instead of the global top two.
pub fn truncate_and_extract(rho: &EffectiveDensity, policy: &TruncationPolicy) -> Result<Extraction, TrainError> {
    policy.validate()?;
    let dim = rho.dim();
    if dim % PHYS != 0 {
        return Err(TrainError::Inconsistent(format!("density dimension {dim} not a multiple of {PHYS}")));
    }
    let bond_in = dim / PHYS;
    let block_diagonal = rho
        .relative_leakage()
        .is_some_and(|leak| leak <= BLOCK_LEAKAGE_TOLERANCE);

    let (vectors, kept, labels, warning) = if policy.max_bond == 2 && block_diagonal {
        extract_per_block(rho, policy)?
    } else {
        extract_global(rho, policy)?
    };
    if kept.is_empty() {
        return Err(TrainError::EmptyModel { step: 0 });
    }
    let mut m = DenseMatrix::zeros(dim, kept.len());
    for (c, v) in vectors.iter().enumerate() {
        for (r, &x) in v.iter().enumerate() {
            m[(r, c)] = x;
        }
    }
    let tensor = SiteTensor::from_matrix(bond_in, PHYS, &m).expect("shape follows density");
    let discarded = (rho.trace - kept.iter().sum::<f64>()).max(0.0);
    Ok(Extraction {
        tensor,
        kept,
        discarded,
        labels,
        block_aware: policy.max_bond == 2 && block_diagonal,
        warning,
    })
}

type Selected = (Vec<Vec<f64>>, Vec<f64>, Option<Vec<u8>>, Option<String>);

fn extract_global(rho: &EffectiveDensity, policy: &TruncationPolicy) -> Result<Selected, TrainError> {
    let eig = sym_eig(&rho.matrix)?;
    let lambda_max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Ok((vec![], vec![], None, None));
    }
    let count = eig
        .eigenvalues
        .iter()
        .take_while(|&&l| policy.keeps(l, lambda_max))
        .count()
        .min(policy.max_bond);
    let vectors: Vec<Vec<f64>> = (0..count).map(|i| eig.vector(i)).collect();
    let kept = eig.eigenvalues[..count].to_vec();
    let labels = rho.classes().and_then(|classes| {
        vectors
            .iter()
            .map(|v| single_class(v, &classes))
            .collect::<Option<Vec<u8>>>()
    });
    Ok((vectors, kept, labels, None))
}

/// Class of a vector whose weight lies entirely in one parity class.
fn single_class(v: &[f64], classes: &[u8]) -> Option<u8> {
    let mut mass = [0.0_f64; 2];
    for (x, &c) in v.iter().zip(classes) {
        mass[usize::from(c)] += x * x;
    }
    let total = mass[0] + mass[1];
    if mass[1] <= BLOCK_LEAKAGE_TOLERANCE * total {
        Some(0)
    } else if mass[0] <= BLOCK_LEAKAGE_TOLERANCE * total {
        Some(1)
    } else {
        None
    }
}

fn extract_per_block(rho: &EffectiveDensity, policy: &TruncationPolicy) -> Result<Selected, TrainError> {
    let classes = rho.classes().expect("block path requires labels");
    let dim = rho.dim();
    // (class, spectrum, indices)
    let mut blocks = Vec::new();
    for class in 0..2u8 {
        let idx: Vec<usize> = (0..dim).filter(|&r| classes[r] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let eig = sym_eig(&rho.matrix.submatrix(&idx))?;
        blocks.push((class, eig, idx));
    }
    let lambda_max = blocks
        .iter()
        .map(|(_, e, _)| e.eigenvalues[0])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(lambda_max > 0.0) {
        return Ok((vec![], vec![], None, None));
    }

    let mut vectors = Vec::new();
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for (class, eig, idx) in &blocks {
        let top = eig.eigenvalues[0];
        if !policy.keeps(top, lambda_max) {
            continue;
        }
        let mut v = vec![0.0; dim];
        for (local, &r) in idx.iter().enumerate() {
            v[r] = eig.eigenvectors[(local, 0)];
        }
        vectors.push(v);
        kept.push(top);
        labels.push(*class);
    }

    // would the global top two have come from a single block?
    let mut all: Vec<(f64, u8)> = blocks
        .iter()
        .flat_map(|(c, e, _)| e.eigenvalues.iter().map(move |&l| (l, *c)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let warning = match all.as_slice() {
        [(l1, c1), (l2, c2), ..] if c1 == c2 && *l2 > 0.0 => {
            let other_top = blocks
                .iter()
                .find(|(c, _, _)| c != c1)
                .map_or(0.0, |(_, e, _)| e.eigenvalues[0]);
            let margin = 1e-12 * l1.abs();
            (*l2 > other_top + margin).then(|| {
                format!(
                    "global top-2 eigenvalues ({l1:.6e}, {l2:.6e}) both lie in the {} block; kept the leading vector of each block instead (other block top {other_top:.6e})",
                    if *c1 == 0 { "even" } else { "odd" }
                )
            })
        }
        _ => None,
    };
    Ok((vectors, kept, Some(labels), warning))
}

/// Last site: `A_N[j, x, 0] = (1/√N_T) Σ_{i: x_i = x} v_i[j]`, the adjoint of
/// the accumulated prefix map including its weight.
pub fn final_tensor(v: &SummaryVectors, last_bits: &[u8], n_t: usize) -> SiteTensor {
    assert_eq!(last_bits.len(), v.n_samples());
    let dim = v.dim();
    let mut t = SiteTensor::zeros(dim, PHYS, 1);
    let scale = 1.0 / (n_t as f64).sqrt();
    let mut acc = vec![0.0; dim * PHYS];
    for (i, &bit) in last_bits.iter().enumerate() {
        let x = usize::from(bit);
        for (j, &vj) in v.vector(i).iter().enumerate() {
            acc[j * PHYS + x] += vj;
        }
    }
    for j in 0..dim {
        for x in 0..PHYS {
            t.set(j, x, 0, acc[j * PHYS + x] * scale);
        }
    }
    t
}

/// What one step of the sweep saw and did.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub bond_in: usize,
    pub bond_out: usize,
    pub groups: usize,
    /// Trace of the effective density, 1 until something is discarded.
    pub trace: f64,
    pub kept: Vec<f64>,
    pub discarded: f64,
    pub block_aware: bool,
    pub block_stats: Option<BlockStats>,
    /// Angle of the kept even-block vector: `atan2(O1 component, E0 component)`.
    pub theta: Option<f64>,
    /// Angle of the kept odd-block vector: `atan2(O0 component, E1 component)`.
    pub phi: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainDiagnostics {
    pub n: usize,
    pub n_samples: usize,
    pub policy: TruncationPolicy,
    /// Steps `2..=N`; the last entry describes the final (adjoint) site.
    pub steps: Vec<StepDiagnostics>,
    pub eigensolves: usize,
    pub warnings: Vec<String>,
}

impl TrainDiagnostics {
    pub fn step(&self, k: usize) -> Option<&StepDiagnostics> {
        self.steps.iter().find(|s| s.step == k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics serialize")
    }
}

fn angle_of(v: &[f64], cos_at: Option<usize>, sin_at: Option<usize>) -> Option<f64> {
    let c = cos_at.map_or(0.0, |i| v[i]);
    let s = sin_at.map_or(0.0, |i| v[i]);
    (c != 0.0 || s != 0.0).then(|| s.atan2(c))
}

/// Angles carried by an extracted tensor whose input and output bonds are
/// both parity labelled.
fn measured_angles(rho: &EffectiveDensity, ext: &Extraction) -> (Option<f64>, Option<f64>) {
    let (Some(out_labels), Some(_)) = (&ext.labels, &rho.bond_labels) else {
        return (None, None);
    };
    let m = ext.tensor.as_matrix();
    let column = |label: u8| out_labels.iter().position(|&l| l == label).map(|j| m.column(j));
    let theta = column(0).and_then(|v| angle_of(&v, rho.index_of(0, 0), rho.index_of(1, 1)));
    let phi = column(1).and_then(|v| angle_of(&v, rho.index_of(0, 1), rho.index_of(1, 0)));
    (theta, phi)
}

/// Trains an MPS on `set` with the inductive reduced-density sweep.
pub fn train(set: &TrainingSet, policy: &TruncationPolicy) -> Result<(Mps, TrainDiagnostics), TrainError> {
    policy.validate()?;
    let n = set.len();
    let n_t = set.n_samples();
    if n_t == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    if n < 2 {
        return Err(TrainError::TooShort(n));
    }

    let mut sites = Vec::with_capacity(n);
    let mut first = SiteTensor::zeros(1, PHYS, PHYS);
    for x in 0..PHYS {
        first.set(0, x, x, 1.0);
    }
    sites.push(first);

    let mut v = SummaryVectors::initial(set);
    let mut steps = Vec::with_capacity(n - 1);
    let mut warnings = Vec::new();
    let mut eigensolves = 0;

    for k in 2..n {
        let groups = group_by_suffix(set, k);
        let rho = effective_density(&v, &groups)?;
        let stats = measure_block_stats(&rho, n_t as f64).ok();
        let ext = truncate_and_extract(&rho, policy).map_err(|e| match e {
            TrainError::EmptyModel { .. } => TrainError::EmptyModel { step: k },
            other => other,
        })?;
        eigensolves += if ext.block_aware { 2 } else { 1 };
        let (theta, phi) = measured_angles(&rho, &ext);
        let warning = ext.warning.clone().map(|w| format!("step {k}: {w}"));
        if let Some(w) = &warning {
            warnings.push(w.clone());
        }
        debug_assert!(ext.tensor.is_left_isometric(ISOMETRY_TOLERANCE));
        steps.push(StepDiagnostics {
            step: k,
            bond_in: ext.tensor.bond_in(),
            bond_out: ext.tensor.bond_out(),
            groups: groups.len(),
            trace: rho.trace,
            kept: ext.kept.clone(),
            discarded: ext.discarded,
            block_aware: ext.block_aware,
            block_stats: stats,
            theta,
            phi,
            warning,
        });
        v = v.advance(&ext.tensor, set, k, ext.labels.clone());
        sites.push(ext.tensor);
    }

    let last_bits: Vec<u8> = set.samples().iter().map(|s| s.bit(n)).collect();
    let last = final_tensor(&v, &last_bits, n_t);
    let groups = group_by_suffix(set, n);
    let rho = effective_density(&v, &groups)?;
    let stats = measure_block_stats(&rho, n_t as f64).ok();
    let (theta, phi) = if rho.bond_labels.is_some() {
        let col = last.as_matrix().column(0);
        (
            angle_of(&col, rho.index_of(0, 0), rho.index_of(1, 1)),
            angle_of(&col, rho.index_of(0, 1), rho.index_of(1, 0)),
        )
    } else {
        (None, None)
    };
    steps.push(StepDiagnostics {
        step: n,
        bond_in: last.bond_in(),
        bond_out: 1,
        groups: groups.len(),
        trace: rho.trace,
        kept: vec![],
        discarded: 0.0,
        block_aware: false,
        block_stats: stats,
        theta,
        phi,
        warning: None,
    });
    sites.push(last);

    let mps = Mps::new(sites).expect("bonds chain by construction");
    let diagnostics = TrainDiagnostics {
        n,
        n_samples: n_t,
        policy: *policy,
        steps,
        eigensolves,
        warnings,
    };
    Ok((mps, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_training_set, Bitstring};
    use crate::mps::{overlap, parity_target_mps};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn step2_density(set: &TrainingSet) -> EffectiveDensity {
        let v = SummaryVectors::initial(set);
        effective_density(&v, &group_by_suffix(set, 2)).unwrap()
    }

    #[test]
    fn full_population_step_two_density() {
        let set = sample_training_set(6, 1.0, 0).unwrap();
        let rho = step2_density(&set);
        // basis (bit1, bit2): 00, 01, 10, 11; blocks {00, 11} and {01, 10}
        for (r, c) in [(0, 0), (0, 3), (3, 3), (1, 1), (1, 2), (2, 2)] {
            assert_abs_diff_eq!(rho.matrix[(r, c)], 0.25, epsilon = 1e-15);
        }
        for (r, c) in [(0, 1), (0, 2), (3, 1), (3, 2)] {
            assert_eq!(rho.matrix[(r, c)], 0.0);
        }
        assert_abs_diff_eq!(rho.trace, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_prefix_graph_block() {
        // a1 = 00 → {b1, b4}, a2 = 11 → {b1, b2, b3, b4}
        let set = TrainingSet::from_strs(&["0000", "0011", "1100", "1101", "1110", "1111"]).unwrap();
        let rho = step2_density(&set);
        let block = rho.matrix.submatrix(&[0, 3]);
        let want = DenseMatrix::from_rows(&[[2.0 / 6.0, 2.0 / 6.0], [2.0 / 6.0, 4.0 / 6.0]]);
        assert!(block.max_abs_diff(&want) <= 1e-15);
    }

    #[test]
    fn single_sample_is_rank_one_projector() {
        let set = TrainingSet::from_strs(&["10110"]).unwrap();
        let rho = step2_density(&set);
        assert_abs_diff_eq!(rho.trace, 1.0, epsilon = 1e-15);
        let sq = rho.matrix.matmul(&rho.matrix).unwrap();
        assert!(sq.max_abs_diff(&rho.matrix) <= 1e-15);
    }

    #[test]
    fn perfect_step_two_keeps_parity_summarizers() {
        let set = sample_training_set(6, 1.0, 0).unwrap();
        let ext = truncate_and_extract(&step2_density(&set), &TruncationPolicy::default()).unwrap();
        assert!(ext.block_aware);
        assert_eq!(ext.kept.len(), 2);
        assert_abs_diff_eq!(ext.kept[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ext.kept[1], 0.5, epsilon = 1e-15);
        assert_eq!(ext.labels, Some(vec![0, 1]));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m = ext.tensor.as_matrix();
        let even = m.column(0);
        let odd = m.column(1);
        for (got, want) in even.iter().zip([h, 0.0, 0.0, h]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        for (got, want) in odd.iter().zip([0.0, h, h, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn rank_one_density_collapses_bond() {
        let set = TrainingSet::from_strs(&["0000", "1100"]).unwrap();
        let ext = truncate_and_extract(&step2_density(&set), &TruncationPolicy::default()).unwrap();
        assert_eq!(ext.tensor.bond_out(), 1);
    }

    #[test]
    fn random_psd_is_reconstructed_when_nothing_is_cut() {
        let b = DenseMatrix::from_rows(&[
            [0.3, -0.2, 0.5, 0.1],
            [0.7, 0.1, -0.4, 0.2],
            [-0.1, 0.6, 0.2, 0.3],
            [0.2, 0.2, 0.1, -0.5],
        ]);
        let m = b.matmul(&b.transpose()).unwrap();
        let rho = EffectiveDensity { trace: m.trace(), matrix: m.clone(), bond_labels: None };
        let policy = TruncationPolicy { max_bond: 4, cutoff: 0.0, drop_null_space: true };
        let ext = truncate_and_extract(&rho, &policy).unwrap();
        assert_eq!(ext.kept.len(), 4);
        let u = ext.tensor.as_matrix();
        let recon = DenseMatrix::from_fn(4, 4, |i, j| {
            (0..4).map(|k| u[(i, k)] * ext.kept[k] * u[(j, k)]).sum()
        });
        assert!(recon.max_abs_diff(&m) <= 1e-10);
    }

    #[test]
    fn all_below_cutoff_is_an_error() {
        let rho = EffectiveDensity { matrix: DenseMatrix::zeros(2, 2), trace: 0.0, bond_labels: None };
        assert!(matches!(
            truncate_and_extract(&rho, &TruncationPolicy::default()),
            Err(TrainError::EmptyModel { .. })
        ));
    }

    #[test]
    fn final_tensor_examples() {
        let set = TrainingSet::from_strs(&["0"]).unwrap();
        let v = SummaryVectors::new(1, vec![1.0], None);
        let t = final_tensor(&v, &[0], set.n_samples());
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.get(0, 1, 0), 0.0);

        let v = SummaryVectors::new(2, vec![1.0, 0.0, 0.0, 1.0], None);
        let t = final_tensor(&v, &[0, 1], 2);
        let m = t.as_matrix();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(m[(0, 0)], h, epsilon = 1e-15); // (j=0, x=0)
        assert_abs_diff_eq!(m[(3, 0)], h, epsilon = 1e-15); // (j=1, x=1)
        assert_eq!(m[(1, 0)], 0.0);
        assert_eq!(m[(2, 0)], 0.0);
    }

    #[test]
    fn perfect_learning_recovers_target() {
        for n in [4, 8, 16] {
            let set = sample_training_set(n, 1.0, 0).unwrap();
            let (mps, diag) = train(&set, &TruncationPolicy::default()).unwrap();
            assert_abs_diff_eq!(overlap(&mps, &parity_target_mps(n)).unwrap(), 1.0, epsilon = 1e-10);
            for s in &diag.steps {
                assert_abs_diff_eq!(s.theta.unwrap(), FRAC_PI_4, epsilon = 1e-10);
                if s.step < n {
                    assert_abs_diff_eq!(s.phi.unwrap(), FRAC_PI_4, epsilon = 1e-10);
                }
            }
            assert!(diag.warnings.is_empty());
        }
    }

    #[test]
    fn single_sample_gives_product_state() {
        let s: Bitstring = "0110100".parse().unwrap();
        let set = TrainingSet::new(7, vec![s]).unwrap();
        let (mps, _) = train(&set, &TruncationPolicy::default()).unwrap();
        assert_eq!(mps.bond_dims(), vec![2, 1, 1, 1, 1, 1]);
        assert_abs_diff_eq!(mps.amplitude(&s).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mps.norm_squared(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let set = TrainingSet::from_strs(&["1"]).unwrap();
        assert!(matches!(train(&set, &TruncationPolicy::default()), Err(TrainError::TooShort(1))));
        let set = TrainingSet::from_strs(&["11"]).unwrap();
        assert!(TruncationPolicy::new(0, 0.0).is_err());
        assert!(TruncationPolicy::new(2, -1.0).is_err());
        assert!(train(&set, &TruncationPolicy::default()).is_ok());
    }

    #[test]
    fn keeping_the_null_space_preserves_summary_norms() {
        let set = sample_training_set(7, 0.3, 4).unwrap();
        let policy = TruncationPolicy { max_bond: usize::MAX, cutoff: 0.0, drop_null_space: false };
        let mut v = SummaryVectors::initial(&set);
        for k in 2..set.len() {
            let rho = effective_density(&v, &group_by_suffix(&set, k)).unwrap();
            let ext = truncate_and_extract(&rho, &policy).unwrap();
            assert_eq!(ext.tensor.bond_out(), rho.dim());
            v = v.advance(&ext.tensor, &set, k, None);
            assert_abs_diff_eq!(v.total_norm_squared(), set.n_samples() as f64, epsilon = 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sweep_invariants(len in 3usize..=10, f in 0.05f64..=1.0, seed: u64, chi in 1usize..=4) {
            prop_assume!(crate::data::sample_count(len, f) > 0);
            let set = sample_training_set(len, f, seed).unwrap();
            let policy = TruncationPolicy::new(chi, 1e-10).unwrap();
            let (mps, diag) = train(&set, &policy).unwrap();
            for site in &mps.sites()[..len - 1] {
                prop_assert!(site.is_left_isometric(ISOMETRY_TOLERANCE));
            }
            prop_assert!((diag.steps[0].trace - 1.0).abs() <= 1e-12);
            for w in diag.steps.windows(2) {
                prop_assert!(w[1].trace <= w[0].trace + 1e-12);
            }
            prop_assert!(mps.norm_squared() <= 1.0 + 1e-9);
            prop_assert!(diag.steps.iter().all(|s| s.discarded >= 0.0));
        }
    }
}
