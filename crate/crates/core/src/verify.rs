//! End-to-end checks of the trainer, sampler and theory against the dense
//! references and closed forms. Each check returns a [`CriterionReport`]
//! instead of panicking so the command-line tool can print a full table.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{even_strings, group_by_suffix, sample_training_set, Bitstring, TrainingSet};
use crate::experiment::{emit_report, run_experiment, ExperimentConfig, ShapeReport};
use crate::linalg::{sym_eig, two_by_two_eig, DenseMatrix};
use crate::mps::{overlap, parity_target_mps, Mps, Sampler, SiteTensor};
use crate::oracle::{conjugate_density, dense_reduced_density, dense_state, mps_to_dense, prefix_map};
use crate::theory::{
    bhattacharya_distance, exact_replay, expected_g2, hypergeometric_abs_gap, predict_overlap, string_weight,
    AngleSchedule,
};
use crate::trainer::{effective_density, train, truncate_and_extract, SummaryVectors, TruncationPolicy};

/// Significance level of the sampler goodness-of-fit tests.
pub const SIGNIFICANCE: f64 = 0.001;
pub const SAMPLER_DRAWS: usize = 100_000;
pub const MONTE_CARLO_DRAWS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} {}: {} ({}; {:.2} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(id: u8, title: &'static str, body: impl FnOnce() -> (bool, String)) -> CriterionReport {
    let start = Instant::now();
    let (passed, detail) = body();
    CriterionReport { id, title, passed, detail, elapsed: start.elapsed() }
}

/// Tracks the worst deviation seen and whether it stayed within `tol`.
struct Worst {
    tol: f64,
    value: f64,
    failures: Vec<String>,
}

impl Worst {
    fn new(tol: f64) -> Self {
        Self { tol, value: 0.0, failures: vec![] }
    }

    fn check(&mut self, got: f64, want: f64, ctx: impl FnOnce() -> String) {
        let d = (got - want).abs();
        if !(d <= self.tol) {
            if self.failures.len() < 3 {
                self.failures.push(format!("{}: {got} vs {want}", ctx()));
            }
            self.value = self.value.max(if d.is_nan() { f64::INFINITY } else { d });
        } else {
            self.value = self.value.max(d);
        }
    }

    fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn summary(&self) -> String {
        if self.ok() {
            format!("max deviation {:.2e} <= {:.0e}", self.value, self.tol)
        } else {
            format!("max deviation {:.2e} > {:.0e}; {}", self.value, self.tol, self.failures.join("; "))
        }
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, count: usize) -> TrainingSet {
    let mut idx: Vec<usize> = (0..1usize << n).collect();
    let (chosen, _) = idx.partial_shuffle(rng, count);
    let samples = chosen.iter().map(|&i| Bitstring::from_index(n, i).expect("index in range")).collect();
    TrainingSet::new(n, samples).expect("distinct by construction")
}

/// Full population, bond 2: exact recovery of the parity state.
pub fn perfect_learning() -> CriterionReport {
    timed(1, "perfect learning at f = 1", || {
        let mut ov = Worst::new(1e-10);
        let mut dist = Worst::new(1e-10);
        let mut angles = Worst::new(1e-10);
        let start = Instant::now();
        for n in [4, 8, 12, 16] {
            let set = sample_training_set(n, 1.0, 0).expect("full population");
            let (mps, diag) = match train(&set, &TruncationPolicy::default()) {
                Ok(r) => r,
                Err(e) => return (false, format!("N = {n}: {e}")),
            };
            let o = overlap(&mps, &parity_target_mps(n)).unwrap_or(f64::NAN);
            ov.check(o, 1.0, || format!("overlap N={n}"));
            dist.check(bhattacharya_distance(o), 0.0, || format!("distance N={n}"));
            for s in &diag.steps {
                angles.check(s.theta.unwrap_or(f64::NAN), FRAC_PI_4, || format!("theta_{} N={n}", s.step));
                if s.step < n {
                    angles.check(s.phi.unwrap_or(f64::NAN), FRAC_PI_4, || format!("phi_{} N={n}", s.step));
                }
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let fast = secs < 5.0;
        (
            ov.ok() && dist.ok() && angles.ok() && fast,
            format!(
                "overlap {}, distance {}, angles {}, runtime {secs:.2} s{}",
                ov.summary(),
                dist.summary(),
                angles.summary(),
                if fast { "" } else { " exceeds 5 s" }
            ),
        )
    })
}

/// No truncation: every training amplitude is `1/√N_T` and the model equals the empirical state.
pub fn lossless_reconstruction() -> CriterionReport {
    timed(2, "lossless reconstruction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
        let mut amp = Worst::new(1e-9);
        let mut ov = Worst::new(1e-9);
        for case in 0..20 {
            let n = rng.random_range(3..=12usize);
            let count = rng.random_range(1..=64usize.min(1 << n));
            let set = random_set(&mut rng, n, count);
            let (mps, _) = match train(&set, &TruncationPolicy::lossless()) {
                Ok(r) => r,
                Err(e) => return (false, format!("case {case}: {e}")),
            };
            let want = 1.0 / (count as f64).sqrt();
            for s in set.samples() {
                amp.check(mps.amplitude(s).unwrap_or(f64::NAN), want, || format!("case {case} {s}"));
            }
            let dense = mps_to_dense(&mps).expect("N <= 12");
            let psi = dense_state(&set).expect("N <= 12");
            ov.check(dense.dot(&psi), 1.0, || format!("case {case} overlap"));
        }
        (amp.ok() && ov.ok(), format!("20 sets; amplitudes {}, overlap {}", amp.summary(), ov.summary()))
    })
}

/// Replays the sweep by hand and compares each effective density with the
/// dense reduced density conjugated by the prefix map built so far.
fn compare_sweep(set: &TrainingSet, policy: &TruncationPolicy, worst: &mut Worst, label: &str) -> Result<(), String> {
    let n = set.len();
    let psi = dense_state(set).map_err(|e| e.to_string())?;
    let mut identity = SiteTensor::zeros(1, 2, 2);
    for x in 0..2 {
        identity.set(0, x, x, 1.0);
    }
    let mut sites = vec![identity];
    let mut v = SummaryVectors::initial(set);
    for k in 2..=n {
        let rho = effective_density(&v, &group_by_suffix(set, k)).map_err(|e| e.to_string())?;
        let dense = dense_reduced_density(&psi, k).map_err(|e| e.to_string())?;
        let w = prefix_map(&sites, k - 1).map_err(|e| e.to_string())?;
        let want = conjugate_density(&dense, &w).map_err(|e| e.to_string())?;
        worst.check(rho.matrix.max_abs_diff(&want), 0.0, || format!("{label} step {k}"));
        if k == n {
            break;
        }
        let ext = truncate_and_extract(&rho, policy).map_err(|e| e.to_string())?;
        v = v.advance(&ext.tensor, set, k, ext.labels.clone());
        sites.push(ext.tensor);
    }
    Ok(())
}

pub fn oracle_equivalence() -> CriterionReport {
    timed(3, "effective density equals conjugated dense reduced density", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
        let mut worst = Worst::new(1e-10);
        let mut cases = 0;
        for case in 0..30 {
            let n = rng.random_range(3..=10usize);
            let set = if case % 2 == 0 {
                let f = rng.random_range(0.1..=1.0);
                match sample_training_set(n, f, rng.random()) {
                    Ok(s) => s,
                    Err(_) => continue,
                }
            } else {
                let count = rng.random_range(1..=(1usize << n).min(200));
                random_set(&mut rng, n, count)
            };
            let policies = [
                TruncationPolicy::default(),
                TruncationPolicy::new(3, 1e-10).expect("valid"),
                TruncationPolicy::lossless(),
            ];
            for (p, policy) in policies.iter().enumerate() {
                if let Err(e) = compare_sweep(&set, policy, &mut worst, &format!("case {case} policy {p}")) {
                    return (false, format!("case {case}: {e}"));
                }
            }
            cases += 1;
        }
        (worst.ok(), format!("{cases} sets x 3 policies, every step; {}", worst.summary()))
    })
}

pub fn closed_form_eigen() -> CriterionReport {
    timed(4, "closed-form 2x2 eigensystem", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
        let mut vals = Worst::new(1e-12);
        let mut vecs = Worst::new(1e-10);
        let mut done = 0;
        while done < 1000 {
            let d1 = rng.random_range(0..=100) as f64;
            let d2 = rng.random_range(0..=100) as f64;
            let s = rng.random_range(0..=100) as f64;
            if d1 + d2 == 0.0 {
                continue;
            }
            done += 1;
            let closed = two_by_two_eig(d1, d2, s).expect("positive trace");
            let t = d1 + d2;
            let eig = sym_eig(&DenseMatrix::from_rows(&[[d1 / t, s / t], [s / t, d2 / t]])).expect("symmetric");
            vals.check(closed.lambda_plus, eig.eigenvalues[0], || format!("lambda+ ({d1},{d2},{s})"));
            vals.check(closed.lambda_minus, eig.eigenvalues[1], || format!("lambda- ({d1},{d2},{s})"));
            if closed.degenerate {
                continue;
            }
            for (v, col) in [(closed.e_plus, 0), (closed.e_minus, 1)] {
                let e = eig.vector(col);
                let same = (v[0] - e[0]).abs().max((v[1] - e[1]).abs());
                let flipped = (v[0] + e[0]).abs().max((v[1] + e[1]).abs());
                vecs.check(same.min(flipped), 0.0, || format!("vector {col} ({d1},{d2},{s})"));
            }
        }
        let worked = two_by_two_eig(2.0, 4.0, 2.0).expect("worked example").lambda_plus;
        let want = (6.0 + 20.0_f64.sqrt()) / 12.0;
        let worked_ok = (worked - want).abs() <= 1e-12;
        (
            vals.ok() && vecs.ok() && worked_ok,
            format!(
                "1000 triples; eigenvalues {}, eigenvectors {}, worked example lambda+ = {worked:.15} (want {want:.15})",
                vals.summary(),
                vecs.summary()
            ),
        )
    })
}

pub fn replay_identity() -> CriterionReport {
    timed(5, "exact replay reproduces trainer angles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
        let fractions = [0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
        let mut worst = Worst::new(1e-9);
        let (mut compared, mut skipped, mut attempts) = (0, 0, 0);
        while compared < 50 && attempts < 5000 {
            attempts += 1;
            let n = rng.random_range(4..=12usize);
            let f = fractions[rng.random_range(0..fractions.len())];
            let Ok(set) = sample_training_set(n, f, rng.random()) else { continue };
            let replay = match exact_replay(&set) {
                Ok(r) => r,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let (_, diag) = match train(&set, &TruncationPolicy::default()) {
                Ok(r) => r,
                Err(e) => return (false, format!("train failed: {e}")),
            };
            for s in &diag.steps {
                let k = s.step;
                worst.check(s.theta.unwrap_or(f64::NAN), replay.angles.theta(k), || format!("N={n} f={f} theta_{k}"));
                if k < n {
                    worst.check(s.phi.unwrap_or(f64::NAN), replay.angles.phi(k), || format!("N={n} f={f} phi_{k}"));
                }
            }
            compared += 1;
        }
        (
            compared == 50 && worst.ok(),
            format!("{compared} sets compared ({skipped} degenerate sets skipped); {}", worst.summary()),
        )
    })
}

pub fn transfer_matrix() -> CriterionReport {
    timed(6, "transfer recursion equals enumeration over E^N", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
        let mut worst = Worst::new(1e-12);
        let populations: Vec<Vec<Bitstring>> = (0..=10).map(|n| if n >= 2 { even_strings(n).unwrap() } else { vec![] }).collect();
        for case in 0..100 {
            let n = rng.random_range(2..=10usize);
            let draw = |rng: &mut ChaCha8Rng| (0..n - 1).map(|_| rng.random_range(0.0..=std::f64::consts::FRAC_PI_2)).collect();
            let thetas = draw(&mut rng);
            let phis = draw(&mut rng);
            let angles = AngleSchedule::new(n, thetas, phis).expect("in range");
            let brute: f64 = populations[n].iter().map(|s| string_weight(s, &angles)).sum::<f64>()
                / 2.0_f64.powf((n as f64 - 1.0) / 2.0);
            worst.check(predict_overlap(&angles, n), brute, || format!("case {case} N={n}"));
        }
        (worst.ok(), format!("100 schedules; {}", worst.summary()))
    })
}

/// Pearson statistic against `probs`, pooling categories expected below 5.
fn chi_square(counts: &[usize], probs: &[f64], total: usize) -> (f64, usize) {
    let (mut stat, mut bins) = (0.0, 0);
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        let e = p * total as f64;
        if e < 5.0 {
            pooled_obs += c as f64;
            pooled_exp += e;
            continue;
        }
        stat += (c as f64 - e).powi(2) / e;
        bins += 1;
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        bins += 1;
    }
    (stat, bins)
}

fn p_value(stat: f64, bins: usize) -> f64 {
    if bins < 2 {
        return 1.0;
    }
    ChiSquared::new((bins - 1) as f64).expect("positive dof").sf(stat)
}

/// Draws from the model under `fixed` and tests the counts against the
/// enumerated conditional Born distribution.
fn conditional_fit(mps: &Mps, fixed: &[(usize, usize)], seed: u64) -> Result<(f64, usize, usize), String> {
    let n = mps.n_sites();
    let constraints: BTreeMap<usize, usize> = fixed.iter().copied().collect();
    let sampler = Sampler::new(mps, &constraints).map_err(|e| e.to_string())?;
    let support: Vec<Bitstring> = (0..1usize << n)
        .map(|i| Bitstring::from_index(n, i).unwrap())
        .filter(|s| fixed.iter().all(|&(p, b)| usize::from(s.bit(p)) == b))
        .collect();
    let weights: Vec<f64> = support.iter().map(|s| mps.amplitude(s).unwrap().powi(2)).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let position: BTreeMap<Bitstring, usize> = support.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut counts = vec![0usize; support.len()];
    let mut outside = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SAMPLER_DRAWS {
        match position.get(&sampler.draw_bitstring(&mut rng)) {
            Some(&i) => counts[i] += 1,
            None => outside += 1,
        }
    }
    let (stat, bins) = chi_square(&counts, &probs, SAMPLER_DRAWS);
    Ok((p_value(stat, bins), bins, outside))
}

pub fn sampler_exactness() -> CriterionReport {
    timed(7, "sampler reproduces the Born distribution", || {
        let full = sample_training_set(8, 1.0, 0).expect("full population");
        let (model, _) = match train(&full, &TruncationPolicy::default()) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let sampler = Sampler::new(&model, &BTreeMap::new()).expect("unconstrained");
        let evens = even_strings(8).unwrap();
        let index: BTreeMap<Bitstring, usize> = evens.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let mut counts = vec![0usize; evens.len()];
        let mut odd = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
        for _ in 0..SAMPLER_DRAWS {
            let s = sampler.draw_bitstring(&mut rng);
            match index.get(&s) {
                Some(&i) => counts[i] += 1,
                None => odd += 1,
            }
        }
        let uniform = vec![1.0 / evens.len() as f64; evens.len()];
        let (stat, bins) = chi_square(&counts, &uniform, SAMPLER_DRAWS);
        let p_uniform = p_value(stat, bins);
        let mut ok = odd == 0 && p_uniform >= SIGNIFICANCE;
        let mut detail = format!("{odd} odd strings in {SAMPLER_DRAWS} draws; uniform fit p = {p_uniform:.4}");

        let partial = sample_training_set(8, 0.3, 17).expect("nonempty");
        let (skewed, _) = match train(&partial, &TruncationPolicy::default()) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let cases: [(&Mps, &[(usize, usize)]); 4] = [
            (&model, &[(1, 0), (2, 1)]),
            (&model, &[(3, 1), (5, 0), (8, 1)]),
            (&skewed, &[]),
            (&skewed, &[(2, 1), (7, 0)]),
        ];
        for (i, (m, fixed)) in cases.iter().enumerate() {
            match conditional_fit(m, fixed, 0x5eed_0070 + i as u64) {
                Ok((p, bins, outside)) => {
                    ok &= p >= SIGNIFICANCE && outside == 0;
                    detail.push_str(&format!("; conditional {fixed:?} p = {p:.4} over {bins} bins"));
                    if outside > 0 {
                        detail.push_str(&format!(" ({outside} draws violate the constraint)"));
                    }
                }
                Err(e) => {
                    ok = false;
                    detail.push_str(&format!("; conditional {fixed:?} failed: {e}"));
                }
            }
        }
        (ok, detail)
    })
}

/// `|2d − r|` for `d` good items among `r` draws without replacement from
/// `n` good and `n` bad.
fn urn_gap(rng: &mut ChaCha8Rng, n: u64, r: u64) -> f64 {
    let (mut good, mut total, mut d) = (n, 2 * n, 0u64);
    for _ in 0..r {
        if rng.random_range(0..total) < good {
            good -= 1;
            d += 1;
        }
        total -= 1;
    }
    (2 * d).abs_diff(r) as f64
}

pub fn hypergeometric_estimator() -> CriterionReport {
    timed(8, "expected step-2 gap", || {
        let mut exact = Worst::new(1e-12);
        for n in 1..=8u64 {
            for r in 0..=2 * n {
                let (mut total, mut count) = (0.0, 0.0);
                for mask in 0u32..(1 << (2 * n)) {
                    if u64::from(mask.count_ones()) != r {
                        continue;
                    }
                    let d = u64::from((mask & ((1 << n) - 1)).count_ones());
                    total += (2 * d).abs_diff(r) as f64;
                    count += 1.0;
                }
                exact.check(hypergeometric_abs_gap(n, r), total / count, || format!("n={n} r={r}"));
            }
        }
        for len in 3..=6usize {
            for n_t in 0..=(1usize << (len - 1)) {
                let n = 1u64 << (len - 3);
                let r = n_t.div_ceil(2) as u64;
                exact.check(expected_g2(len, n_t).unwrap_or(f64::NAN), hypergeometric_abs_gap(n, r), || {
                    format!("N={len} N_T={n_t}")
                });
            }
        }
        let small = hypergeometric_abs_gap(2, 2);
        let small_ok = (small - 2.0 / 3.0).abs() <= 1e-12;

        let want = expected_g2(16, 4096).unwrap_or(f64::NAN);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
        let draws: Vec<f64> = (0..MONTE_CARLO_DRAWS).map(|_| urn_gap(&mut rng, 1 << 13, 2048)).collect();
        let m = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / m;
        let se = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt();
        let z = (mean - want).abs() / se;
        (
            exact.ok() && small_ok && z <= 3.0,
            format!(
                "enumeration {}; n=2, r=2 gives {small:.15}; N=16, N_T=4096: exact {want:.4}, Monte Carlo {mean:.4} ± {se:.4} ({z:.2} standard errors)",
                exact.summary()
            ),
        )
    })
}

/// Fraction grid used for the shape check: ten points in (0, 0.2] plus 0.5 and 1.
pub fn figure_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..=10).map(|i| i as f64 * 0.02).map(|f| (f * 1e12).round() / 1e12).collect();
    g.extend([0.5, 1.0]);
    g
}

pub fn figure_shape(out_dir: &Path) -> CriterionReport {
    timed(9, "distance curve shape at N = 16", || {
        let start = Instant::now();
        let cfg = ExperimentConfig::new(16, figure_grid(), 10, 2024);
        let rec = match run_experiment(&cfg) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let written = match emit_report(&rec, out_dir) {
            Ok(p) => p,
            Err(e) => return (false, e.to_string()),
        };
        let secs = start.elapsed().as_secs_f64();
        let shape = ShapeReport::from_aggregates(&rec.aggregates);
        let errors = rec.rows.iter().filter(|r| r.error.is_some()).count();
        let files_ok = written.iter().all(|p| p.exists());
        let ok = shape.non_increasing() && shape.vanishes() && files_ok && errors == 0 && secs < 60.0;
        let fmt = |v: Option<f64>| v.map_or("missing".to_string(), |d| format!("{d:.3e}"));
        (
            ok,
            format!(
                "{} rows; largest rise experimental {:.3e}, theory {:.3e}, pooled std {:.3e}; f=0.5 distance {} (theory {}), f=1 distance {} (theory {}); {errors} failed trials; files in {}; runtime {secs:.1} s",
                rec.rows.len(),
                shape.max_experimental_rise,
                shape.max_theory_rise,
                shape.pooled_std,
                fmt(shape.distance_at_half),
                fmt(shape.theory_at_half),
                fmt(shape.distance_at_one),
                fmt(shape.theory_at_one),
                out_dir.display()
            ),
        )
    })
}

/// Criteria 1–8, which need no output directory.
pub fn run_checks() -> Vec<CriterionReport> {
    vec![
        perfect_learning(),
        lossless_reconstruction(),
        oracle_equivalence(),
        closed_form_eigen(),
        replay_identity(),
        transfer_matrix(),
        sampler_exactness(),
        hypergeometric_estimator(),
    ]
}
