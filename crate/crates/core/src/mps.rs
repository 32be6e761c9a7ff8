//! Open-boundary matrix product states over a finite alphabet.
//!
//! A site tensor is stored as `A[bond_in, phys, bond_out]` in row-major order.
//! Contracting left to right with a fixed symbol at every site yields the
//! amplitude of that string; contracting two chains against each other yields
//! their overlap.
//!
//! ```text
//!   1 ── A₁ ── χ₁ ── A₂ ── χ₂ ── ··· ── A_N ── 1
//!        │           │                  │
//!        d           d                  d
//! ```

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::data::Bitstring;
use crate::linalg::DenseMatrix;

pub const FORMAT_NAME: &str = "mps-seqmodel";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("site tensor shape [{0}, {1}, {2}] does not match {3} entries")]
    TensorShape(usize, usize, usize, usize),
    #[error("bond mismatch between site {site} (out {left}) and site {} (in {right})", site + 1)]
    BondMismatch { site: usize, left: usize, right: usize },
    #[error("boundary bond dimensions must be 1")]
    Boundary,
    #[error("an MPS needs at least one site")]
    Empty,
    #[error("string of length {found} does not fit a {expected}-site model")]
    LengthMismatch { expected: usize, found: usize },
    #[error("symbol {symbol} at site {site} exceeds physical dimension {dim}")]
    BadSymbol { site: usize, symbol: usize, dim: usize },
    #[error("models have different shapes: {0}")]
    ShapeMismatch(String),
    #[error("model has zero norm")]
    ZeroNorm,
    #[error("constraints leave no probability mass")]
    InfeasibleConstraint,
    #[error("constraint at position {0} is out of range")]
    BadConstraint(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One tensor of the chain, indexed `[bond_in, phys, bond_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTensor {
    bond_in: usize,
    phys: usize,
    bond_out: usize,
    data: Vec<f64>,
}

impl SiteTensor {
    pub fn new(bond_in: usize, phys: usize, bond_out: usize, data: Vec<f64>) -> Result<Self, MpsError> {
        if bond_in == 0 || phys == 0 || bond_out == 0 || data.len() != bond_in * phys * bond_out {
            return Err(MpsError::TensorShape(bond_in, phys, bond_out, data.len()));
        }
        Ok(Self { bond_in, phys, bond_out, data })
    }

    pub fn zeros(bond_in: usize, phys: usize, bond_out: usize) -> Self {
        Self { bond_in, phys, bond_out, data: vec![0.0; bond_in * phys * bond_out] }
    }

    /// Reshapes the columns of a `(bond_in·phys) × bond_out` matrix.
    pub fn from_matrix(bond_in: usize, phys: usize, m: &DenseMatrix) -> Result<Self, MpsError> {
        if m.rows() != bond_in * phys {
            return Err(MpsError::TensorShape(bond_in, phys, m.cols(), m.rows() * m.cols()));
        }
        Self::new(bond_in, phys, m.cols(), m.as_slice().to_vec())
    }

    pub fn bond_in(&self) -> usize {
        self.bond_in
    }

    pub fn phys(&self) -> usize {
        self.phys
    }

    pub fn bond_out(&self) -> usize {
        self.bond_out
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.bond_in, self.phys, self.bond_out]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, x: usize, j: usize) -> usize {
        (i * self.phys + x) * self.bond_out + j
    }

    #[inline]
    pub fn get(&self, i: usize, x: usize, j: usize) -> f64 {
        self.data[self.offset(i, x, j)]
    }

    pub fn set(&mut self, i: usize, x: usize, j: usize, value: f64) {
        let o = self.offset(i, x, j);
        self.data[o] = value;
    }

    /// Matrix view with rows `(bond_in, phys)` and columns `bond_out`.
    pub fn as_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_row_major(self.bond_in * self.phys, self.bond_out, self.data.clone())
            .expect("shape checked at construction")
    }

    /// Largest deviation of `Σ_{i,x} A[i,x,j]·A[i,x,j']` from `δ_{jj'}`.
    pub fn left_isometry_error(&self) -> f64 {
        let m = self.as_matrix();
        let g = m.transpose().matmul(&m).expect("conformable");
        g.max_abs_diff(&DenseMatrix::identity(self.bond_out))
    }

    pub fn is_left_isometric(&self, tol: f64) -> bool {
        self.left_isometry_error() <= tol
    }

    /// `row · A[:, x, :]`
    fn apply_left(&self, row: &[f64], x: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.bond_out, 0.0);
        for (i, &r) in row.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let start = self.offset(i, x, 0);
            for (o, &a) in out.iter_mut().zip(&self.data[start..start + self.bond_out]) {
                *o += r * a;
            }
        }
    }
}

/// Open-boundary MPS with unit boundary bonds.
#[derive(Debug, Clone, PartialEq)]
pub struct Mps {
    sites: Vec<SiteTensor>,
}

impl Mps {
    pub fn new(sites: Vec<SiteTensor>) -> Result<Self, MpsError> {
        let (first, last) = match (sites.first(), sites.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(MpsError::Empty),
        };
        if first.bond_in != 1 || last.bond_out != 1 {
            return Err(MpsError::Boundary);
        }
        for (site, w) in sites.windows(2).enumerate() {
            if w[0].bond_out != w[1].bond_in {
                return Err(MpsError::BondMismatch {
                    site: site + 1,
                    left: w[0].bond_out,
                    right: w[1].bond_in,
                });
            }
        }
        Ok(Self { sites })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[SiteTensor] {
        &self.sites
    }

    pub fn site(&self, k: usize) -> &SiteTensor {
        &self.sites[k]
    }

    /// Internal bond dimensions χ₁…χ_{N-1}.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites[..self.sites.len() - 1].iter().map(|s| s.bond_out).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Amplitude of a symbol sequence (one symbol index per site).
    pub fn amplitude_of(&self, symbols: &[usize]) -> Result<f64, MpsError> {
        if symbols.len() != self.n_sites() {
            return Err(MpsError::LengthMismatch { expected: self.n_sites(), found: symbols.len() });
        }
        let mut row = vec![1.0];
        let mut next = Vec::new();
        for (site, (t, &x)) in self.sites.iter().zip(symbols).enumerate() {
            if x >= t.phys {
                return Err(MpsError::BadSymbol { site: site + 1, symbol: x, dim: t.phys });
            }
            t.apply_left(&row, x, &mut next);
            std::mem::swap(&mut row, &mut next);
        }
        Ok(row[0])
    }

    /// ⟨s|ψ⟩ for a bitstring.
    pub fn amplitude(&self, s: &Bitstring) -> Result<f64, MpsError> {
        let symbols: Vec<usize> = s.bits().map(usize::from).collect();
        self.amplitude_of(&symbols)
    }

    /// ⟨ψ|ψ⟩
    pub fn norm_squared(&self) -> f64 {
        overlap(self, self).expect("a model always matches itself")
    }

    /// Born probability `amplitude² / ‖ψ‖²`.
    pub fn born_probability(&self, s: &Bitstring) -> Result<f64, MpsError> {
        let norm = self.norm_squared();
        if norm <= 0.0 {
            return Err(MpsError::ZeroNorm);
        }
        let a = self.amplitude(s)?;
        Ok(a * a / norm)
    }

    /// Copy with every entry of the last site scaled so that `‖ψ‖ = 1`.
    pub fn normalized(&self) -> Result<Mps, MpsError> {
        let norm = self.norm_squared();
        if norm <= 0.0 {
            return Err(MpsError::ZeroNorm);
        }
        let mut out = self.clone();
        let scale = norm.sqrt().recip();
        let last = out.sites.last_mut().expect("non-empty");
        last.data.iter_mut().for_each(|v| *v *= scale);
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), MpsError> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    /// Versioned JSON with 17 significant digits per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        let _ = writeln!(out, "  \"format\": \"{FORMAT_NAME}\",");
        let _ = writeln!(out, "  \"version\": {FORMAT_VERSION},");
        let _ = writeln!(out, "  \"n_sites\": {},", self.n_sites());
        out.push_str("  \"sites\": [\n");
        for (k, t) in self.sites.iter().enumerate() {
            let [a, b, c] = t.shape();
            let _ = write!(out, "    {{\"shape\": [{a}, {b}, {c}], \"entries\": [");
            for (i, v) in t.data.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push_str("]}");
            out.push_str(if k + 1 < self.sites.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, MpsError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, MpsError> {
        #[derive(Deserialize)]
        struct Site {
            shape: [usize; 3],
            entries: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct File {
            format: String,
            version: u32,
            n_sites: usize,
            sites: Vec<Site>,
        }
        let file: File =
            serde_json::from_str(text).map_err(|e| MpsError::Format(e.to_string()))?;
        if file.format != FORMAT_NAME {
            return Err(MpsError::Format(format!("unknown format {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(MpsError::Format(format!("unsupported version {}", file.version)));
        }
        if file.n_sites != file.sites.len() {
            return Err(MpsError::Format(format!(
                "header says {} sites, found {}",
                file.n_sites,
                file.sites.len()
            )));
        }
        let sites = file
            .sites
            .into_iter()
            .map(|s| SiteTensor::new(s.shape[0], s.shape[1], s.shape[2], s.entries))
            .collect::<Result<Vec<_>, _>>()?;
        Mps::new(sites)
    }
}

/// ⟨ψ₁|ψ₂⟩ by left-to-right environment contraction, O(N·χ³·d).
pub fn overlap(a: &Mps, b: &Mps) -> Result<f64, MpsError> {
    if a.n_sites() != b.n_sites() {
        return Err(MpsError::ShapeMismatch(format!(
            "{} sites vs {} sites",
            a.n_sites(),
            b.n_sites()
        )));
    }
    // env[i][i'] over (bond of a, bond of b)
    let mut env = DenseMatrix::from_rows(&[[1.0]]);
    for (k, (ta, tb)) in a.sites.iter().zip(&b.sites).enumerate() {
        if ta.phys != tb.phys {
            return Err(MpsError::ShapeMismatch(format!(
                "site {} has physical dimensions {} and {}",
                k + 1,
                ta.phys,
                tb.phys
            )));
        }
        let d = ta.phys;
        // half[i'][x][j] = Σ_i env[i][i'] · A[i][x][j]
        let mut half = vec![0.0; tb.bond_in * d * ta.bond_out];
        for i in 0..ta.bond_in {
            for ip in 0..tb.bond_in {
                let e = env[(i, ip)];
                if e == 0.0 {
                    continue;
                }
                for x in 0..d {
                    let src = ta.offset(i, x, 0);
                    let dst = (ip * d + x) * ta.bond_out;
                    for j in 0..ta.bond_out {
                        half[dst + j] += e * ta.data[src + j];
                    }
                }
            }
        }
        let mut next = DenseMatrix::zeros(ta.bond_out, tb.bond_out);
        for ip in 0..tb.bond_in {
            for x in 0..d {
                let h = &half[(ip * d + x) * ta.bond_out..(ip * d + x + 1) * ta.bond_out];
                let src = tb.offset(ip, x, 0);
                let brow = &tb.data[src..src + tb.bond_out];
                for (j, &hv) in h.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    for (jp, &bv) in brow.iter().enumerate() {
                        next[(j, jp)] += hv * bv;
                    }
                }
            }
        }
        env = next;
    }
    Ok(env[(0, 0)])
}

/// Binary MPS of bond dimension 2 built from per-step angles.
///
/// Bond index 0 carries the even-parity summary and index 1 the odd one:
///
/// ```text
/// E'_k = cos θ_k · E'_{k-1}⊗0 + sin θ_k · O'_{k-1}⊗1
/// O'_k = cos φ_k · E'_{k-1}⊗1 + sin φ_k · O'_{k-1}⊗0
/// ```
///
/// `thetas` and `phis` are indexed from step 2; the last site keeps only the
/// even summary, so `thetas` has `n - 1` entries and `phis` at least `n - 2`.
pub fn angle_mps(n: usize, thetas: &[f64], phis: &[f64]) -> Mps {
    assert!(n >= 2, "need at least two sites");
    assert!(thetas.len() >= n - 1 && phis.len() >= n - 2);
    let mut sites = Vec::with_capacity(n);
    let mut first = SiteTensor::zeros(1, 2, 2);
    first.set(0, 0, 0, 1.0);
    first.set(0, 1, 1, 1.0);
    sites.push(first);
    for k in 2..n {
        let (t, p) = (thetas[k - 2], phis[k - 2]);
        let mut a = SiteTensor::zeros(2, 2, 2);
        a.set(0, 0, 0, t.cos());
        a.set(1, 1, 0, t.sin());
        a.set(0, 1, 1, p.cos());
        a.set(1, 0, 1, p.sin());
        sites.push(a);
    }
    let t = thetas[n - 2];
    let mut last = SiteTensor::zeros(2, 2, 1);
    last.set(0, 0, 0, t.cos());
    last.set(1, 1, 0, t.sin());
    sites.push(last);
    Mps::new(sites).expect("bonds line up by construction")
}

/// Uniform superposition over the even strings of length `n`:
/// amplitude `2^{-(n-1)/2}` on every even string and 0 on every odd one.
pub fn parity_target_mps(n: usize) -> Mps {
    let quarter = std::f64::consts::FRAC_PI_4;
    let mut m = angle_mps(n, &vec![quarter; n - 1], &vec![quarter; n.saturating_sub(2)]);
    // cos(π/4) and sin(π/4) differ in the last ulp; pin them to one value
    for site in &mut m.sites[1..] {
        for v in site.data.iter_mut() {
            if *v != 0.0 {
                *v = FRAC_1_SQRT_2;
            }
        }
    }
    m
}

/// Product state putting all weight on one string.
pub fn product_mps(s: &Bitstring) -> Mps {
    let sites = s
        .bits()
        .map(|b| {
            let mut t = SiteTensor::zeros(1, 2, 1);
            t.set(0, usize::from(b), 0, 1.0);
            t
        })
        .collect();
    Mps::new(sites).expect("unit bonds")
}

/// Exact sequential sampler from the Born distribution of an MPS, optionally
/// conditioned on fixed symbols at some sites.
///
/// Right environments `R_k = Σ_{x_{k+1..N}} r·rᵀ` (restricted to the allowed
/// symbols) are built once; each draw then walks left to right, choosing the
/// symbol at site `k` with probability proportional to `ℓ_xᵀ R_k ℓ_x`.
pub struct Sampler<'a> {
    mps: &'a Mps,
    fixed: Vec<Option<usize>>,
    right: Vec<DenseMatrix>,
}

impl<'a> Sampler<'a> {
    /// `constraints` maps 1-based site positions to symbols.
    pub fn new(mps: &'a Mps, constraints: &BTreeMap<usize, usize>) -> Result<Self, MpsError> {
        let n = mps.n_sites();
        let mut fixed = vec![None; n];
        for (&pos, &sym) in constraints {
            if pos == 0 || pos > n {
                return Err(MpsError::BadConstraint(pos));
            }
            let dim = mps.sites[pos - 1].phys;
            if sym >= dim {
                return Err(MpsError::BadSymbol { site: pos, symbol: sym, dim });
            }
            fixed[pos - 1] = Some(sym);
        }
        // right[k] is the environment to the right of site k (0-based), i.e.
        // on bond_out of site k; right[n-1] = [[1]].
        let mut right = vec![DenseMatrix::zeros(0, 0); n];
        right[n - 1] = DenseMatrix::from_rows(&[[1.0]]);
        for k in (1..n).rev() {
            let t = &mps.sites[k];
            let r = &right[k];
            let mut env = DenseMatrix::zeros(t.bond_in, t.bond_in);
            for x in allowed(fixed[k], t.phys) {
                // tmp[i][j'] = Σ_j A[i,x,j] R[j,j']
                let tmp = DenseMatrix::from_fn(t.bond_in, t.bond_out, |i, jp| {
                    (0..t.bond_out).map(|j| t.get(i, x, j) * r[(j, jp)]).sum()
                });
                for i in 0..t.bond_in {
                    for ip in i..t.bond_in {
                        let v: f64 = (0..t.bond_out).map(|jp| tmp[(i, jp)] * t.get(ip, x, jp)).sum();
                        env[(i, ip)] += v;
                        if ip != i {
                            env[(ip, i)] += v;
                        }
                    }
                }
            }
            right[k - 1] = env;
        }
        let sampler = Self { mps, fixed, right };
        let mass = sampler.constrained_mass();
        if !(mass > 1e-20 * mps.norm_squared()) {
            return Err(MpsError::InfeasibleConstraint);
        }
        Ok(sampler)
    }

    /// Unnormalized probability mass of all strings meeting the constraints.
    pub fn constrained_mass(&self) -> f64 {
        let t = &self.mps.sites[0];
        let r = &self.right[0];
        let mut total = 0.0;
        for x in allowed(self.fixed[0], t.phys) {
            for j in 0..t.bond_out {
                for jp in 0..t.bond_out {
                    total += t.get(0, x, j) * r[(j, jp)] * t.get(0, x, jp);
                }
            }
        }
        total
    }

    /// One draw, as a symbol index per site.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.mps.n_sites();
        let mut out = Vec::with_capacity(n);
        let mut row = vec![1.0];
        let mut candidates: Vec<(usize, Vec<f64>, f64)> = Vec::new();
        for k in 0..n {
            let t = &self.mps.sites[k];
            let r = &self.right[k];
            candidates.clear();
            for x in allowed(self.fixed[k], t.phys) {
                let mut next = Vec::new();
                t.apply_left(&row, x, &mut next);
                let mut w = 0.0;
                for j in 0..next.len() {
                    for jp in 0..next.len() {
                        w += next[j] * r[(j, jp)] * next[jp];
                    }
                }
                candidates.push((x, next, w.max(0.0)));
            }
            let total: f64 = candidates.iter().map(|c| c.2).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = candidates.len() - 1;
            for (i, c) in candidates.iter().enumerate() {
                if c.2 > 0.0 && u < c.2 {
                    pick = i;
                    break;
                }
                u -= c.2;
            }
            // the last positive-weight candidate absorbs rounding leftovers
            if candidates[pick].2 <= 0.0 {
                pick = candidates.iter().rposition(|c| c.2 > 0.0).unwrap_or(pick);
            }
            let (x, next, _) = candidates.swap_remove(pick);
            let scale = next.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            row = if scale > 0.0 { next.into_iter().map(|v| v / scale).collect() } else { next };
            out.push(x);
        }
        out
    }

    /// One binary draw as a [`Bitstring`].
    pub fn draw_bitstring<R: Rng + ?Sized>(&self, rng: &mut R) -> Bitstring {
        let bits: Vec<u8> = self.draw(rng).into_iter().map(|x| x as u8).collect();
        Bitstring::from_bits(&bits).expect("length fits")
    }
}

fn allowed(fixed: Option<usize>, dim: usize) -> std::ops::Range<usize> {
    match fixed {
        Some(x) => x..x + 1,
        None => 0..dim,
    }
}

/// Draws one string with `seed` as the ChaCha8 key, conditioned on
/// `constraints` (1-based position → bit).
pub fn sample(mps: &Mps, seed: u64, constraints: &BTreeMap<usize, u8>) -> Result<Bitstring, MpsError> {
    let fixed = constraints.iter().map(|(&p, &b)| (p, usize::from(b))).collect();
    let sampler = Sampler::new(mps, &fixed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.draw_bitstring(&mut rng))
}

/// `count` independent draws sharing one ChaCha8 stream keyed by `seed`.
pub fn sample_many(
    mps: &Mps,
    seed: u64,
    count: usize,
    constraints: &BTreeMap<usize, u8>,
) -> Result<Vec<Bitstring>, MpsError> {
    let fixed = constraints.iter().map(|(&p, &b)| (p, usize::from(b))).collect();
    let sampler = Sampler::new(mps, &fixed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| sampler.draw_bitstring(&mut rng)).collect())
}
