//! Bitstrings, the even-parity population, training sets and suffix grouping.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Longest string a [`Bitstring`] can hold.
pub const MAX_LEN: usize = 64;
/// Longest length for which the even population is enumerated in memory.
pub const MAX_ENUMERATION_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bitstring length {0} outside 1..={MAX_LEN}")]
    BadLength(usize),
    #[error("invalid bitstring {0:?}: only '0' and '1' allowed")]
    BadCharacter(String),
    #[error("length {len} outside the enumerable range 2..={MAX_ENUMERATION_LEN}")]
    NotEnumerable { len: usize },
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("fraction {fraction} of 2^{} strings rounds to an empty training set", len - 1)]
    EmptySet { len: usize, fraction: f64 },
    #[error("training set is empty")]
    Empty,
    #[error("sample {index} has length {found}, expected {expected}")]
    WrongLength { index: usize, expected: usize, found: usize },
    #[error("duplicate sample {0}")]
    Duplicate(String),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-length binary string packed into one word. Position 1 (the first
/// character) is stored in the least significant bit.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bitstring {
    len: u8,
    bits: u64,
}

fn mask(len: usize) -> u64 {
    if len >= 64 {
        u64::MAX
    } else {
        (1u64 << len) - 1
    }
}

impl Bitstring {
    pub fn new(len: usize, bits: u64) -> Result<Self, DataError> {
        if len == 0 || len > MAX_LEN {
            return Err(DataError::BadLength(len));
        }
        Ok(Self { len: len as u8, bits: bits & mask(len) })
    }

    /// Builds a string from per-position bits (`bits[0]` is position 1).
    pub fn from_bits(bits: &[u8]) -> Result<Self, DataError> {
        let word = bits
            .iter()
            .enumerate()
            .fold(0u64, |w, (i, &b)| w | (u64::from(b & 1) << i));
        Self::new(bits.len(), word)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn word(&self) -> u64 {
        self.bits
    }

    /// Bit at 1-based position `pos`.
    pub fn bit(&self, pos: usize) -> u8 {
        debug_assert!(pos >= 1 && pos <= self.len());
        ((self.bits >> (pos - 1)) & 1) as u8
    }

    pub fn bits(&self) -> impl Iterator<Item = u8> + '_ {
        (1..=self.len()).map(move |p| self.bit(p))
    }

    pub fn parity(&self) -> u8 {
        (self.bits.count_ones() & 1) as u8
    }

    /// Positions `1..=k`.
    pub fn prefix(&self, k: usize) -> Bitstring {
        Bitstring { len: k as u8, bits: self.bits & mask(k) }
    }

    /// Packed positions `k+1..=len`; equal keys mean equal suffixes.
    pub fn suffix_key(&self, k: usize) -> u64 {
        if k >= 64 {
            0
        } else {
            self.bits >> k
        }
    }

    /// Index in the big-endian enumeration of `Σ^len` (position 1 is the
    /// most significant digit).
    pub fn index(&self) -> usize {
        (self.bits.reverse_bits() >> (64 - self.len())) as usize
    }

    pub fn from_index(len: usize, index: usize) -> Result<Self, DataError> {
        if len == 0 || len > MAX_LEN {
            return Err(DataError::BadLength(len));
        }
        Self::new(len, (index as u64).reverse_bits() >> (64 - len))
    }
}

impl Ord for Bitstring {
    fn cmp(&self, other: &Self) -> Ordering {
        self.len.cmp(&other.len).then(self.index().cmp(&other.index()))
    }
}

impl PartialOrd for Bitstring {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Bitstring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Bitstring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bitstring({self})")
    }
}

impl FromStr for Bitstring {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits = s
            .bytes()
            .map(|c| match c {
                b'0' => Ok(0),
                b'1' => Ok(1),
                _ => Err(DataError::BadCharacter(s.to_string())),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Self::from_bits(&bits)
    }
}

/// Sum of bits mod 2.
pub fn parity(s: &Bitstring) -> u8 {
    s.parity()
}

/// All even-parity strings of length `len`, in lexicographic order.
pub fn even_strings(len: usize) -> Result<Vec<Bitstring>, DataError> {
    if !(2..=MAX_ENUMERATION_LEN).contains(&len) {
        return Err(DataError::NotEnumerable { len });
    }
    (0..1usize << len)
        .map(|i| Bitstring::from_index(len, i))
        .filter(|s| s.as_ref().map_or(true, |s| s.parity() == 0))
        .collect()
}

/// Distinct samples of one common length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    len: usize,
    samples: Vec<Bitstring>,
}

impl TrainingSet {
    pub fn new(len: usize, samples: Vec<Bitstring>) -> Result<Self, DataError> {
        if len == 0 || len > MAX_LEN {
            return Err(DataError::BadLength(len));
        }
        if samples.is_empty() {
            return Err(DataError::Empty);
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for (index, s) in samples.iter().enumerate() {
            if s.len() != len {
                return Err(DataError::WrongLength { index, expected: len, found: s.len() });
            }
            if !seen.insert(*s) {
                return Err(DataError::Duplicate(s.to_string()));
            }
        }
        Ok(Self { len, samples })
    }

    /// Parses strings such as `["0011", "1100"]`.
    pub fn from_strs(samples: &[&str]) -> Result<Self, DataError> {
        let parsed = samples
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Bitstring>, _>>()?;
        let len = parsed.first().map_or(0, Bitstring::len);
        Self::new(len, parsed)
    }

    /// String length N.
    pub fn len(&self) -> usize {
        self.len
    }

    /// Number of samples N_T.
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Bitstring] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// N_T / 2^(N-1): the share of the even population this set covers.
    pub fn fraction(&self) -> f64 {
        self.samples.len() as f64 / 2f64.powi(self.len as i32 - 1)
    }

    /// Text form: `N=<len>` then one string per line.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), DataError> {
        writeln!(w, "N={}", self.len)?;
        for s in &self.samples {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, DataError> {
        let mut lines = r.lines().enumerate();
        let len = loop {
            let Some((i, line)) = lines.next() else {
                return Err(DataError::Parse { line: 1, message: "missing N= header".into() });
            };
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value = line.strip_prefix("N=").ok_or_else(|| DataError::Parse {
                line: i + 1,
                message: format!("expected N=<int>, found {line:?}"),
            })?;
            break value.trim().parse::<usize>().map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        };
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let s: Bitstring = line.parse().map_err(|e: DataError| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if s.len() != len {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("length {} differs from N={len}", s.len()),
                });
            }
            if !seen.insert(s) {
                return Err(DataError::Parse { line: i + 1, message: format!("duplicate {s}") });
            }
            samples.push(s);
        }
        Self::new(len, samples)
    }
}

/// `round(f · 2^(N-1))` with ties rounding up.
pub fn sample_count(len: usize, fraction: f64) -> usize {
    (fraction * 2f64.powi(len as i32 - 1) + 0.5).floor() as usize
}

/// Draws `round(f · 2^(N-1))` distinct even strings uniformly without
/// replacement. The draw is a partial Fisher–Yates shuffle of the enumerated
/// population driven by a ChaCha8 stream keyed by `seed`; the result is sorted.
pub fn sample_training_set(len: usize, fraction: f64, seed: u64) -> Result<TrainingSet, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let mut population = even_strings(len)?;
    let count = sample_count(len, fraction);
    if count == 0 {
        return Err(DataError::EmptySet { len, fraction });
    }
    let count = count.min(population.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = population.partial_shuffle(&mut rng, count);
    let mut samples = chosen.to_vec();
    samples.sort();
    TrainingSet::new(len, samples)
}

/// Seed for trial `trial` at grid point `grid_index` of a sweep rooted at
/// `base`. SplitMix64 finalizer over the packed triple.
pub fn derive_seed(base: u64, grid_index: u64, trial: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix((grid_index << 32) ^ trial))
}

/// Members of one suffix class: `(sample index, bit at the cut)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixGroup {
    pub key: u64,
    pub members: Vec<(usize, u8)>,
}

/// Samples partitioned by their bits after a cut position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixGroups {
    pub cut: usize,
    pub groups: Vec<SuffixGroup>,
}

impl SuffixGroups {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_members(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SuffixGroup> {
        self.groups.iter()
    }
}

/// Groups samples sharing bits `k+1..=N`; each member carries its `k`-th bit.
/// Groups are ordered by suffix key and members by sample index.
pub fn group_by_suffix(set: &TrainingSet, k: usize) -> SuffixGroups {
    assert!(k >= 1 && k <= set.len(), "cut {k} outside 1..={}", set.len());
    let mut keyed: Vec<(u64, usize, u8)> = set
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.suffix_key(k), i, s.bit(k)))
        .collect();
    keyed.sort_unstable_by_key(|&(key, i, _)| (key, i));
    let mut groups: Vec<SuffixGroup> = Vec::new();
    for (key, i, bit) in keyed {
        match groups.last_mut() {
            Some(g) if g.key == key => g.members.push((i, bit)),
            _ => groups.push(SuffixGroup { key, members: vec![(i, bit)] }),
        }
    }
    SuffixGroups { cut: k, groups }
}
