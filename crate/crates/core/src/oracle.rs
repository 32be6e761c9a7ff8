//! Brute-force dense references.
//!
//! Everything here materializes full `2^N` state vectors or `2^k × 2^k`
//! densities and is only meant for small `N`. Size limits are hard errors.

use thiserror::Error;

use crate::data::{Bitstring, TrainingSet};
use crate::linalg::{svd, sym_eig, DenseMatrix, LinalgError};
use crate::mps::{Mps, MpsError, SiteTensor};

pub const MAX_STATE_LEN: usize = 20;
pub const MAX_REDUCED_CUT: usize = 12;
pub const MAX_FACTORIZE_LEN: usize = 14;
/// Singular values at or below this fraction of the largest are treated as zero.
pub const SVD_FLOOR: f64 = 1e-12;
/// Eigenvalues at or below this are left out of the entropy sum.
pub const ENTROPY_FLOOR: f64 = 1e-15;
/// Largest Schmidt rank `reconstruct_from_reduced` will search signs over.
pub const MAX_GLUE_RANK: usize = 16;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{what} = {value} exceeds the dense limit {limit}")]
    TooLarge { what: &'static str, value: usize, limit: usize },
    #[error("cut {k} outside 0..={n}")]
    BadCut { k: usize, n: usize },
    #[error("dimension {0} is not a power of two")]
    NotQubits(usize),
    #[error("spectra differ by {0:e}")]
    SpectrumMismatch(f64),
    #[error("eigenvalue {0:e} is degenerate; the gluing is ambiguous")]
    Degenerate(f64),
    #[error("trace {0} differs from 1")]
    Trace(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Mps(#[from] MpsError),
}

fn guard(what: &'static str, value: usize, limit: usize) -> Result<(), OracleError> {
    if value > limit {
        Err(OracleError::TooLarge { what, value, limit })
    } else {
        Ok(())
    }
}

fn log2_exact(dim: usize) -> Result<usize, OracleError> {
    if dim.is_power_of_two() {
        Ok(dim.trailing_zeros() as usize)
    } else {
        Err(OracleError::NotQubits(dim))
    }
}

/// Real amplitudes over all `2^N` strings, indexed by [`Bitstring::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub n: usize,
    pub amplitudes: Vec<f64>,
}

impl DenseState {
    pub fn new(n: usize, amplitudes: Vec<f64>) -> Result<Self, OracleError> {
        guard("N", n, MAX_STATE_LEN)?;
        assert_eq!(amplitudes.len(), 1 << n);
        Ok(Self { n, amplitudes })
    }

    pub fn amplitude(&self, s: &Bitstring) -> f64 {
        self.amplitudes[s.index()]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &DenseState) -> f64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a * b).sum()
    }

    /// `ψ(a, b)` as a `2^k × 2^{N−k}` matrix, prefix `a` on the rows.
    pub fn as_matrix(&self, k: usize) -> Result<DenseMatrix, OracleError> {
        if k > self.n {
            return Err(OracleError::BadCut { k, n: self.n });
        }
        Ok(DenseMatrix::from_row_major(1 << k, 1 << (self.n - k), self.amplitudes.clone())?)
    }
}

/// `|ψ⟩ = (1/√N_T) Σ_i |s_i⟩`.
pub fn dense_state(set: &TrainingSet) -> Result<DenseState, OracleError> {
    guard("N", set.len(), MAX_STATE_LEN)?;
    let mut amps = vec![0.0; 1 << set.len()];
    let a = 1.0 / (set.n_samples() as f64).sqrt();
    for s in set.samples() {
        amps[s.index()] = a;
    }
    DenseState::new(set.len(), amps)
}

/// Contracts an MPS into its full amplitude vector.
pub fn mps_to_dense(mps: &Mps) -> Result<DenseState, OracleError> {
    let n = mps.n_sites();
    guard("N", n, MAX_STATE_LEN)?;
    let mut cur = vec![1.0];
    let mut bond = 1;
    for site in mps.sites() {
        let (d, out) = (site.phys(), site.bond_out());
        let rows = cur.len() / bond;
        let mut next = vec![0.0; rows * d * out];
        for r in 0..rows {
            for j in 0..bond {
                let c = cur[r * bond + j];
                if c == 0.0 {
                    continue;
                }
                for x in 0..d {
                    for jp in 0..out {
                        next[(r * d + x) * out + jp] += c * site.get(j, x, jp);
                    }
                }
            }
        }
        cur = next;
        bond = out;
    }
    DenseState::new(n, cur)
}

/// `ρ_A = Tr_B |ψ⟩⟨ψ|` for the first `k` sites.
pub fn dense_reduced_density(psi: &DenseState, k: usize) -> Result<DenseMatrix, OracleError> {
    guard("k", k, MAX_REDUCED_CUT)?;
    let m = psi.as_matrix(k)?;
    Ok(m.matmul(&m.transpose())?)
}

/// Density of the last `N − k` sites.
pub fn dense_suffix_density(psi: &DenseState, k: usize) -> Result<DenseMatrix, OracleError> {
    guard("N - k", psi.n.saturating_sub(k), MAX_REDUCED_CUT)?;
    let m = psi.as_matrix(k)?;
    Ok(m.transpose().matmul(&m)?)
}

/// Left-to-right reshape-and-SVD factorization, keeping at most `max_bond`
/// singular values with `σ² > cutoff·σ_max²` (and above [`SVD_FLOOR`]).
pub fn dense_mps_factorize(psi: &DenseState, max_bond: usize, cutoff: f64) -> Result<Mps, OracleError> {
    guard("N", psi.n, MAX_FACTORIZE_LEN)?;
    let n = psi.n;
    let mut rest = psi.amplitudes.clone();
    let mut bond = 1;
    let mut sites = Vec::with_capacity(n);
    for _ in 1..n {
        let cols = rest.len() / (bond * 2);
        let m = DenseMatrix::from_row_major(bond * 2, cols, rest)?;
        let dec = svd(&m)?;
        let smax = dec.singulars.first().copied().unwrap_or(0.0);
        let keep = dec
            .singulars
            .iter()
            .take_while(|&&s| s > SVD_FLOOR * smax && s * s > cutoff * smax * smax)
            .count()
            .clamp(1, max_bond.max(1));
        let u = DenseMatrix::from_fn(bond * 2, keep, |i, j| dec.left[(i, j)]);
        sites.push(SiteTensor::from_matrix(bond, 2, &u)?);
        rest = (0..keep)
            .flat_map(|j| {
                let s = dec.singulars[j];
                let right = &dec.right;
                (0..cols).map(move |c| s * right[(c, j)])
            })
            .collect();
        bond = keep;
    }
    sites.push(SiteTensor::new(bond, 2, 1, rest)?);
    Ok(Mps::new(sites)?)
}

/// Glues the eigenvectors of `ρ_A` and `ρ_B` along their shared eigenvalues,
/// `ψ = Σ_i ±√λ_i e_i ⊗ f_i`.
///
/// Each pair's sign is chosen so the result has as few negative amplitudes as
/// possible; among equally good choices the first whose leading nonzero
/// amplitude is positive wins.
pub fn reconstruct_from_reduced(rho_a: &DenseMatrix, rho_b: &DenseMatrix) -> Result<DenseState, OracleError> {
    Ok(reconstruct_candidates(rho_a, rho_b)?.swap_remove(0))
}

/// Every sign assignment with the fewest negative amplitudes, the preferred
/// one first. More than one entry means the reduced densities alone do not
/// pin down the state.
pub fn reconstruct_candidates(rho_a: &DenseMatrix, rho_b: &DenseMatrix) -> Result<Vec<DenseState>, OracleError> {
    let ka = log2_exact(rho_a.rows())?;
    let kb = log2_exact(rho_b.rows())?;
    guard("N", ka + kb, MAX_STATE_LEN)?;
    let ea = sym_eig(rho_a)?;
    let eb = sym_eig(rho_b)?;
    let scale = ea.eigenvalues[0].abs().max(eb.eigenvalues[0].abs());
    let floor = SVD_FLOOR * scale;
    let rank = ea.eigenvalues.iter().take_while(|&&l| l > floor).count();
    let rank_b = eb.eigenvalues.iter().take_while(|&&l| l > floor).count();
    let common = rank.max(rank_b);
    let mismatch = (0..common)
        .map(|i| {
            let a = ea.eigenvalues.get(i).copied().unwrap_or(0.0);
            let b = eb.eigenvalues.get(i).copied().unwrap_or(0.0);
            (a - b).abs()
        })
        .fold(0.0_f64, f64::max);
    if rank != rank_b || mismatch > 1e-9 {
        return Err(OracleError::SpectrumMismatch(mismatch.max(if rank != rank_b { floor } else { 0.0 })));
    }
    for i in 0..rank.saturating_sub(1) {
        if ea.degenerate_at(i) || eb.degenerate_at(i) {
            return Err(OracleError::Degenerate(ea.eigenvalues[i]));
        }
    }
    guard("Schmidt rank", rank, MAX_GLUE_RANK)?;

    let (da, db) = (rho_a.rows(), rho_b.rows());
    let terms: Vec<Vec<f64>> = (0..rank)
        .map(|i| {
            let w = ea.eigenvalues[i].max(0.0).sqrt();
            let (e, f) = (ea.vector(i), eb.vector(i));
            (0..da * db).map(|idx| w * e[idx / db] * f[idx % db]).collect()
        })
        .collect();
    let tol = 1e-12 * scale.sqrt();
    let mut fewest = usize::MAX;
    let mut found: Vec<(bool, Vec<f64>)> = Vec::new();
    for mask in 0u32..(1u32 << rank) {
        let mut psi = vec![0.0; da * db];
        for (i, t) in terms.iter().enumerate() {
            let sign = if mask >> i & 1 == 1 { -1.0 } else { 1.0 };
            psi.iter_mut().zip(t).for_each(|(p, v)| *p += sign * v);
        }
        let negatives = psi.iter().filter(|&&v| v < -tol).count();
        if negatives > fewest {
            continue;
        }
        if negatives < fewest {
            fewest = negatives;
            found.clear();
        }
        let leading_positive = psi.iter().find(|v| v.abs() > tol).is_some_and(|&v| v > 0.0);
        found.push((leading_positive, psi));
    }
    // stable: leading-positive candidates first, then enumeration order
    found.sort_by_key(|(lp, _)| !lp);
    found
        .into_iter()
        .map(|(_, psi)| DenseState::new(ka + kb, psi))
        .collect()
}

/// `−Σ λ ln λ` over eigenvalues above [`ENTROPY_FLOOR`].
pub fn von_neumann_entropy(rho: &DenseMatrix) -> Result<f64, OracleError> {
    let tr = rho.trace();
    if (tr - 1.0).abs() > 1e-9 {
        return Err(OracleError::Trace(tr));
    }
    let eig = sym_eig(rho)?;
    Ok(eig
        .eigenvalues
        .iter()
        .filter(|&&l| l > ENTROPY_FLOOR)
        .map(|&l| -l * l.ln())
        .sum::<f64>()
        .max(0.0))
}

/// `W[a, j]`: the state of bond index `j` after the first `k` sites, written
/// in the `2^k` prefix basis.
pub fn prefix_map(sites: &[SiteTensor], k: usize) -> Result<DenseMatrix, OracleError> {
    guard("k", k, MAX_REDUCED_CUT)?;
    if k == 0 || k > sites.len() {
        return Err(OracleError::BadCut { k, n: sites.len() });
    }
    let mut w = DenseMatrix::identity(1);
    for site in &sites[..k] {
        let (d, out) = (site.phys(), site.bond_out());
        w = DenseMatrix::from_fn(w.rows() * d, out, |r, jp| {
            let (a, x) = (r / d, r % d);
            (0..site.bond_in()).map(|j| w[(a, j)] * site.get(j, x, jp)).sum()
        });
    }
    Ok(w)
}

/// `(W ⊗ I)ᵀ ρ (W ⊗ I)` for a density on `prefix ⊗ one site`.
pub fn conjugate_density(rho: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix, OracleError> {
    let d = rho.rows() / w.rows();
    if d * w.rows() != rho.rows() {
        return Err(LinalgError::Shape(format!("density {} vs map {}", rho.rows(), w.rows())).into());
    }
    let lift = DenseMatrix::from_fn(rho.rows(), w.cols() * d, |r, c| {
        if r % d == c % d {
            w[(r / d, c / d)]
        } else {
            0.0
        }
    });
    Ok(lift.transpose().matmul(&rho.matmul(&lift)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_training_set;
    use crate::mps::{overlap, parity_target_mps, product_mps};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(strs: &[&str]) -> TrainingSet {
        TrainingSet::from_strs(strs).unwrap()
    }

    #[test]
    fn state_examples() {
        let psi = dense_state(&set(&["00"])).unwrap();
        assert_eq!(psi.amplitudes, vec![1.0, 0.0, 0.0, 0.0]);
        let psi = dense_state(&set(&["00", "11"])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(psi.amplitudes[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.amplitudes[3], h, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.norm(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            DenseState::new(21, vec![]),
            Err(OracleError::TooLarge { .. })
        ));
    }

    #[test]
    fn two_prefix_reduced_density() {
        // prefixes a1 = 0, a2 = 1; a1 shares two of its continuations with a2
        let t = set(&["000", "001", "100", "101", "110", "111"]);
        let rho = dense_reduced_density(&dense_state(&t).unwrap(), 1).unwrap();
        let want = DenseMatrix::from_rows(&[[2.0 / 6.0, 2.0 / 6.0], [2.0 / 6.0, 4.0 / 6.0]]);
        assert!(rho.max_abs_diff(&want) <= 1e-15);
        assert_abs_diff_eq!(von_neumann_entropy(&rho).unwrap(), 0.38127, epsilon = 1e-5);
    }

    #[test]
    fn entropy_examples() {
        let pure = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(von_neumann_entropy(&pure).unwrap(), 0.0);
        let mixed = DenseMatrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]);
        assert_abs_diff_eq!(von_neumann_entropy(&mixed).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(matches!(von_neumann_entropy(&DenseMatrix::identity(2)), Err(OracleError::Trace(_))));
    }

    #[test]
    fn product_state_is_pure_at_every_cut() {
        let psi = dense_state(&set(&["01101"])).unwrap();
        for k in 1..5 {
            let rho = dense_reduced_density(&psi, k).unwrap();
            let sq = rho.matmul(&rho).unwrap();
            assert!(sq.max_abs_diff(&rho) <= 1e-15);
            assert_abs_diff_eq!(rho.trace(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn parity_state_factorizes_with_bond_two() {
        let t = sample_training_set(4, 1.0, 0).unwrap();
        let mps = dense_mps_factorize(&dense_state(&t).unwrap(), usize::MAX, 0.0).unwrap();
        assert_eq!(mps.bond_dims(), vec![2, 2, 2]);
        assert_abs_diff_eq!(overlap(&mps, &parity_target_mps(4)).unwrap().abs(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn product_state_factorizes_with_bond_one() {
        let s: Bitstring = "1011".parse().unwrap();
        let mps = dense_mps_factorize(&dense_state(&TrainingSet::new(4, vec![s]).unwrap()).unwrap(), 8, 0.0).unwrap();
        assert_eq!(mps.bond_dims(), vec![1, 1, 1]);
        assert_abs_diff_eq!(overlap(&mps, &product_mps(&s)).unwrap().abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn glue_two_qubits() {
        let psi = DenseState::new(2, vec![0.8, 0.0, 0.0, 0.6]).unwrap();
        let ra = dense_reduced_density(&psi, 1).unwrap();
        let rb = dense_suffix_density(&psi, 1).unwrap();
        assert!(ra.max_abs_diff(&DenseMatrix::from_rows(&[[0.64, 0.0], [0.0, 0.36]])) <= 1e-15);
        assert!(rb.max_abs_diff(&ra) <= 1e-15);
        let back = reconstruct_from_reduced(&ra, &rb).unwrap();
        assert_abs_diff_eq!(back.dot(&psi).abs(), 1.0, epsilon = 1e-12);
        assert_eq!(reconstruct_candidates(&ra, &rb).unwrap().len(), 1);
    }

    #[test]
    fn glue_product_and_degenerate() {
        let psi = dense_state(&set(&["10"])).unwrap();
        let back = reconstruct_from_reduced(
            &dense_reduced_density(&psi, 1).unwrap(),
            &dense_suffix_density(&psi, 1).unwrap(),
        )
        .unwrap();
        assert!(back.amplitudes.iter().zip(&psi.amplitudes).all(|(a, b)| (a - b).abs() < 1e-12));

        let bell = dense_state(&set(&["00", "11"])).unwrap();
        let err = reconstruct_from_reduced(
            &dense_reduced_density(&bell, 1).unwrap(),
            &dense_suffix_density(&bell, 1).unwrap(),
        );
        assert!(matches!(err, Err(OracleError::Degenerate(_))));
    }

    #[test]
    fn prefix_map_of_target_is_parity_summarizer() {
        let w = prefix_map(parity_target_mps(5).sites(), 3).unwrap();
        assert_eq!((w.rows(), w.cols()), (8, 2));
        for a in 0..8usize {
            let p = a.count_ones() as usize % 2;
            assert_abs_diff_eq!(w[(a, p)], 0.5, epsilon = 1e-15);
            assert_eq!(w[(a, 1 - p)], 0.0);
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, count: usize) -> TrainingSet {
        let mut idx: Vec<usize> = (0..1 << n).collect();
        let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(&mut idx[..], rng, count);
        let samples = chosen.iter().map(|&i| Bitstring::from_index(n, i).unwrap()).collect();
        TrainingSet::new(n, samples).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn marginals_and_shared_spectrum(seed: u64, n in 2usize..=10, frac in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = ((frac * (1u64 << n) as f64) as usize).max(1);
            let t = random_set(&mut rng, n, count);
            let psi = dense_state(&t).unwrap();
            let k = rng.random_range(1..n);
            let ra = dense_reduced_density(&psi, k).unwrap();
            let rb = dense_suffix_density(&psi, k).unwrap();
            prop_assert!((ra.trace() - 1.0).abs() < 1e-12);
            let mut marginal = vec![0.0; 1 << k];
            for s in t.samples() {
                marginal[s.prefix(k).index()] += 1.0 / t.n_samples() as f64;
            }
            for (a, m) in marginal.iter().enumerate() {
                prop_assert!((ra[(a, a)] - m).abs() < 1e-12);
            }
            let la = sym_eig(&ra).unwrap().eigenvalues;
            let lb = sym_eig(&rb).unwrap().eigenvalues;
            for i in 0..la.len().max(lb.len()) {
                let a = la.get(i).copied().unwrap_or(0.0);
                let b = lb.get(i).copied().unwrap_or(0.0);
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn factorization_reproduces_amplitudes(seed: u64, n in 2usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amps: Vec<f64> = (0..1 << n).map(|_| rng.random::<f64>()).collect();
            let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
            let psi = DenseState::new(n, amps.iter().map(|a| a / norm).collect()).unwrap();
            let mps = dense_mps_factorize(&psi, usize::MAX, 0.0).unwrap();
            let back = mps_to_dense(&mps).unwrap();
            for (a, b) in back.amplitudes.iter().zip(&psi.amplitudes) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn reduce_then_glue_is_identity(seed: u64, n in 2usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amps: Vec<f64> = (0..1 << n).map(|_| rng.random::<f64>().powi(4)).collect();
            let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
            let psi = DenseState::new(n, amps.iter().map(|a| a / norm).collect()).unwrap();
            let k = rng.random_range(1..n);
            let ra = dense_reduced_density(&psi, k).unwrap();
            let rb = dense_suffix_density(&psi, k).unwrap();
            let same = |a: &DenseState| a.amplitudes.iter().zip(&psi.amplitudes).all(|(x, y)| (x - y).abs() < 1e-8);
            match reconstruct_candidates(&ra, &rb) {
                Ok(candidates) => {
                    prop_assert!(candidates.iter().any(same));
                    if candidates.len() == 1 {
                        prop_assert!(same(&reconstruct_from_reduced(&ra, &rb).unwrap()));
                    }
                }
                Err(OracleError::Degenerate(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
