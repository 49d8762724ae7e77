//! End-to-end drivers: CPA contrast, TVLA contrast and the pilot that
//! calibrates noise and trace budgets.
//!
//! Every stochastic quantity is derived from a master seed through
//! [`mix_seed`]; repetition `r` uses `mix_seed(master, r)` and its own
//! sub-streams for key, ciphertexts and leakage.

use crate::error::{Error, Result};
use crate::kem::{keygen, Ciphertext, KemParams, KeyPair, SEED_BYTES};
use crate::leakage::{
    CiphertextSource, FixedCiphertext, LeakPoint, LeakageConfig, ScheduleFactory, Synthesizer, UniformCiphertexts,
};
use crate::prng::{fill_bytes, mix_seed};
use crate::sca::{
    prev_index, tvla_from_moments, TVLA_THRESHOLD, CoeffResult, CpaAccumulator, CpaReport, Moments, TvlaReport, CHUNK,
};
use crate::sched::{TapDelays, COEFFS_PER_WORD};
use statrs::distribution::{ContinuousCDF, Normal};

/// Noise level used by the contrast experiments, in HD units. The smallest
/// pilot sigma at which the protected TVLA pass probability reaches 0.95.
pub const DEFAULT_SIGMA: f64 = 85.0;
/// Unprotected disclosure budget at [`DEFAULT_SIGMA`], as measured by
/// [`disclosure_budget`] with master seed 1 and 600000 traces at most.
pub const DEFAULT_BUDGET: usize = 131_072;

pub const CPA_COEFFS: usize = 10;
pub const REPETITIONS: usize = 10;
pub const REQUIRED: usize = 9;
pub const PROTECTED_BUDGET_FACTOR: usize = 25;
pub const PEAK_RATIO_BOUND: f64 = 1.0 / 8.0;
/// Repetitions on which the unprotected peak at the protected budget is
/// measured.
pub const PEAK_REPETITIONS: usize = 1;

pub const TVLA_UNPROTECTED_TRACES: usize = 10_000;
pub const TVLA_PROTECTED_TRACES: usize = 100_000;
pub const NULL_TRIALS: usize = 100;
/// Traces per set in each null trial.
pub const NULL_TRACES: usize = TVLA_UNPROTECTED_TRACES;

fn seed_bytes(seed: u64) -> [u8; SEED_BYTES] {
    let mut b = [0u8; SEED_BYTES];
    fill_bytes(seed, &mut b);
    b
}

/// Key of repetition `rep`.
pub fn experiment_key(params: KemParams, master: u64, rep: usize) -> Result<KeyPair> {
    keygen(params, &seed_bytes(mix_seed(mix_seed(master, rep as u64), 0)))
}

/// `s_hat` flattened as `line * 256 + c`.
pub fn flat_secret(kp: &KeyPair) -> Vec<u16> {
    kp.s_hat.polys().iter().flat_map(|p| p.coeffs().iter().copied()).collect()
}

pub fn factory(protected: bool) -> ScheduleFactory {
    if protected {
        ScheduleFactory::Protected(TapDelays::default())
    } else {
        ScheduleFactory::Unprotected
    }
}

/// Extend-and-prune CPA over freshly synthesized traces, streamed in chunks
/// without materializing the set. Up to `per_pass` coefficients of one word
/// share a pass over the traces; with `stop_on_miss` the attack ends after
/// the first pass containing a wrongly ranked coefficient.
pub fn stream_attack(
    synth: &Synthesizer,
    n_traces: usize,
    point: LeakPoint,
    count: usize,
    truth: &[u16],
    stop_on_miss: bool,
    per_pass: usize,
) -> Result<CpaReport> {
    if n_traces == 0 || n_traces > synth.len() {
        return Err(Error::OutOfRange { what: "trace count", value: n_traces as u64 });
    }
    let mut known: Vec<u16> = Vec::with_capacity(count);
    let mut coeffs: Vec<CoeffResult> = Vec::with_capacity(count);
    let mut f = 0;
    while f < count {
        let end = ((f / COEFFS_PER_WORD + 1) * COEFFS_PER_WORD).min(count).min(f + per_pass.max(1));
        let mut accs = (f..end)
            .map(|c| CpaAccumulator::new(point, c, prev_index(c).map(|p| known[p]), synth.n_samples()))
            .collect::<Result<Vec<_>>>()?;
        for start in (0..n_traces).step_by(CHUNK) {
            for t in synth.traces(start..(start + CHUNK).min(n_traces))? {
                for acc in &mut accs {
                    acc.absorb(&t.u_hat, &t.samples)?;
                }
            }
        }
        let mut miss = false;
        for (c, acc) in (f..end).zip(&accs) {
            let r = acc.finish(truth.get(c).copied())?;
            miss |= r.success() == Some(false);
            known.push(r.best);
            coeffs.push(r);
        }
        f = end;
        if miss && stop_on_miss {
            break;
        }
    }
    Ok(CpaReport { point, n_traces, coeffs })
}

#[derive(Debug, Clone)]
pub struct CpaRepetition {
    pub rep: usize,
    /// Unprotected attack at the budget.
    pub unprotected: CpaReport,
    /// Protected attack at `PROTECTED_BUDGET_FACTOR` times the budget.
    pub protected: CpaReport,
    /// Correct-key peak |rho| of coefficient 0, both at the protected budget.
    /// The unprotected one is only measured when requested.
    pub unprotected_peak: Option<f64>,
    pub protected_peak: f64,
}

#[derive(Debug, Clone)]
pub struct CpaSummary {
    pub sigma: f64,
    pub budget: usize,
    pub reps: Vec<CpaRepetition>,
}

impl CpaSummary {
    pub fn unprotected_successes(&self) -> usize {
        self.reps.iter().filter(|r| r.unprotected.success() == Some(true)).count()
    }

    pub fn protected_failures(&self) -> usize {
        self.reps.iter().filter(|r| r.protected.success() != Some(true) || r.protected.coeffs.len() < CPA_COEFFS).count()
    }

    /// Mean protected peak over mean measured unprotected peak.
    pub fn peak_ratio(&self) -> f64 {
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let p = mean(self.reps.iter().map(|r| r.protected_peak).collect());
        let u = mean(self.reps.iter().filter_map(|r| r.unprotected_peak).collect());
        p / u
    }
}

/// Trace synthesis context of one repetition.
pub struct RepSetup {
    pub key: KeyPair,
    pub truth: Vec<u16>,
    pub cts: UniformCiphertexts,
    rep_seed: u64,
}

impl RepSetup {
    pub fn new(params: KemParams, master: u64, rep: usize, n_traces: usize) -> Result<Self> {
        let key = experiment_key(params, master, rep)?;
        let rep_seed = mix_seed(master, rep as u64);
        let cts = UniformCiphertexts { params, seed: mix_seed(rep_seed, 1), count: n_traces };
        Ok(Self { truth: flat_secret(&key), key, cts, rep_seed })
    }

    pub fn synth(&self, protected: bool, point: LeakPoint, sigma: f64) -> Result<Synthesizer<'_>> {
        let cfg = LeakageConfig::new(point, sigma, mix_seed(self.rep_seed, 2 + protected as u64));
        Synthesizer::new(&self.key, &self.cts, factory(protected), cfg)
    }
}

/// Unprotected extend-and-prune on `coeffs` coefficients with `n` traces.
pub fn unprotected_attack(params: KemParams, sigma: f64, n: usize, master: u64, rep: usize, coeffs: usize) -> Result<CpaReport> {
    let setup = RepSetup::new(params, master, rep, n)?;
    stream_attack(&setup.synth(false, LeakPoint::Point2, sigma)?, n, LeakPoint::Point2, coeffs, &setup.truth, true, COEFFS_PER_WORD)
}

/// One repetition of the CPA contrast. `with_peak` adds the unprotected
/// attack at the protected budget, which costs as much as the protected one.
pub fn cpa_repetition(
    params: KemParams,
    sigma: f64,
    budget: usize,
    master: u64,
    rep: usize,
    with_peak: bool,
) -> Result<CpaRepetition> {
    let big = budget * PROTECTED_BUDGET_FACTOR;
    let setup = RepSetup::new(params, master, rep, big)?;
    let point = LeakPoint::Point2;
    let plain = setup.synth(false, point, sigma)?;
    let unprotected = stream_attack(&plain, budget, point, CPA_COEFFS, &setup.truth, false, COEFFS_PER_WORD)?;
    let protected = stream_attack(&setup.synth(true, point, sigma)?, big, point, CPA_COEFFS, &setup.truth, true, 1)?;
    let peak = |r: &CpaReport| r.coeffs[0].truth_peak.expect("ground truth supplied");
    let unprotected_peak = if with_peak {
        Some(peak(&stream_attack(&plain, big, point, 1, &setup.truth, true, 1)?))
    } else {
        None
    };
    Ok(CpaRepetition {
        rep,
        unprotected_peak,
        protected_peak: peak(&protected),
        unprotected,
        protected,
    })
}

/// CPA contrast over `reps` repetitions; the unprotected peak at the
/// protected budget is measured on the first `peak_reps` of them.
pub fn cpa_experiment(params: KemParams, sigma: f64, budget: usize, master: u64, reps: usize, peak_reps: usize) -> Result<CpaSummary> {
    let reps = (0..reps).map(|r| cpa_repetition(params, sigma, budget, master, r, r < peak_reps)).collect::<Result<_>>()?;
    Ok(CpaSummary { sigma, budget, reps })
}

/// Trace counts probed by [`disclosure_budget`]: 256 times powers of
/// `2^(1/4)`, rounded, ending at `max_traces`.
pub fn budget_grid(max_traces: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (0..)
        .map(|i| (256.0 * 2f64.powf(i as f64 / 4.0)).round() as usize)
        .take_while(|&n| n < max_traces)
        .collect();
    grid.push(max_traces);
    grid
}

/// Whether the unprotected attack of repetition `rep` recovers all `coeffs`
/// coefficients with the first `n` traces, for every `n` in `grid`.
///
/// One pass over the traces serves every grid point: each coefficient past
/// the first word is attacked with the true previous coefficient, which is
/// what extend-and-prune uses whenever all earlier ranks are correct.
pub fn disclosure_flags(params: KemParams, sigma: f64, master: u64, rep: usize, coeffs: usize, grid: &[usize]) -> Result<Vec<bool>> {
    let max = *grid.last().ok_or(Error::Empty("empty trace grid"))?;
    let setup = RepSetup::new(params, master, rep, max)?;
    let point = LeakPoint::Point2;
    let synth = setup.synth(false, point, sigma)?;
    let mut accs = (0..coeffs)
        .map(|c| CpaAccumulator::new(point, c, prev_index(c).map(|p| setup.truth[p]), synth.n_samples()))
        .collect::<Result<Vec<_>>>()?;
    let mut flags = Vec::with_capacity(grid.len());
    let mut done = 0;
    for &n in grid {
        for start in (done..n).step_by(CHUNK) {
            for t in synth.traces(start..(start + CHUNK).min(n))? {
                for acc in &mut accs {
                    acc.absorb(&t.u_hat, &t.samples)?;
                }
            }
        }
        done = n;
        let mut ok = true;
        for (c, acc) in accs.iter().enumerate() {
            if acc.finish(Some(setup.truth[c]))?.success() != Some(true) {
                ok = false;
                break;
            }
        }
        flags.push(ok);
    }
    Ok(flags)
}

/// Pilot budget: the smallest point of [`budget_grid`] at which at least
/// `required` of `reps` unprotected repetitions recover all `coeffs`
/// coefficients, or `None` if `max_traces` does not suffice.
pub fn disclosure_budget(
    params: KemParams,
    sigma: f64,
    master: u64,
    reps: usize,
    required: usize,
    coeffs: usize,
    max_traces: usize,
) -> Result<Option<usize>> {
    let grid = budget_grid(max_traces);
    let mut wins = vec![0usize; grid.len()];
    for r in 0..reps {
        for (w, ok) in wins.iter_mut().zip(disclosure_flags(params, sigma, master, r, coeffs, &grid)?) {
            *w += ok as usize;
        }
    }
    Ok(grid.iter().zip(&wins).find(|(_, &w)| w >= required).map(|(&n, _)| n))
}

// --- TVLA -----------------------------------------------------------------------

/// Per-sample moments of `n` traces, accumulated per chunk and merged in
/// chunk order.
pub fn stream_moments(synth: &Synthesizer, n: usize) -> Result<Moments> {
    let mut total = Moments::new(synth.n_samples());
    for start in (0..n).step_by(CHUNK) {
        let mut m = Moments::new(synth.n_samples());
        for t in synth.traces(start..(start + CHUNK).min(n))? {
            m.push(&t.samples)?;
        }
        total.merge(&m)?;
    }
    Ok(total)
}

/// Fixed-vs-random TVLA over the whole decryption, `n` traces per class.
/// The fixed ciphertext is drawn from the same distribution as the random
/// class.
pub fn tvla_run(params: KemParams, protected: bool, sigma: f64, n: usize, master: u64) -> Result<TvlaReport> {
    let key = experiment_key(params, master, 0)?;
    let seed = mix_seed(master, u64::MAX);
    let random = UniformCiphertexts { params, seed: mix_seed(seed, 1), count: n };
    let fixed_ct: Ciphertext = UniformCiphertexts { params, seed: mix_seed(seed, 2), count: 1 }.get(0)?.0;
    let fixed = FixedCiphertext { ct: fixed_ct, count: n };
    let f = fixed_moments(&key, &fixed, protected, sigma, mix_seed(seed, 3), n)?;
    let r = fixed_moments(&key, &random, protected, sigma, mix_seed(seed, 4), n)?;
    tvla_from_moments(&f, &r)
}

fn fixed_moments(key: &KeyPair, cts: &dyn CiphertextSource, protected: bool, sigma: f64, seed: u64, n: usize) -> Result<Moments> {
    let cfg = LeakageConfig::new(LeakPoint::All, sigma, seed);
    stream_moments(&Synthesizer::new(key, cts, factory(protected), cfg)?, n)
}

/// Random-vs-random TVLA of trial `trial`; should not flag leakage.
pub fn tvla_null(params: KemParams, protected: bool, sigma: f64, n: usize, master: u64, trial: usize) -> Result<TvlaReport> {
    let key = experiment_key(params, master, 0)?;
    let seed = mix_seed(mix_seed(master, u64::MAX - 1), trial as u64);
    let a = UniformCiphertexts { params, seed: mix_seed(seed, 1), count: n };
    let b = UniformCiphertexts { params, seed: mix_seed(seed, 2), count: n };
    let ma = fixed_moments(&key, &a, protected, sigma, mix_seed(seed, 3), n)?;
    let mb = fixed_moments(&key, &b, protected, sigma, mix_seed(seed, 4), n)?;
    tvla_from_moments(&ma, &mb)
}

/// Noiseless fixed-vs-random statistics from which the TVLA t at any noise
/// level and trace count is predicted.
#[derive(Debug, Clone)]
pub struct TvlaBias {
    pub fixed: Moments,
    pub random: Moments,
}

impl TvlaBias {
    pub fn measure(params: KemParams, protected: bool, n: usize, master: u64) -> Result<Self> {
        let key = experiment_key(params, master, 0)?;
        let seed = mix_seed(master, u64::MAX);
        let random = UniformCiphertexts { params, seed: mix_seed(seed, 1), count: n };
        let fixed_ct = UniformCiphertexts { params, seed: mix_seed(seed, 2), count: 1 }.get(0)?.0;
        let fixed = FixedCiphertext { ct: fixed_ct, count: n };
        Ok(Self {
            fixed: fixed_moments(&key, &fixed, protected, 0.0, mix_seed(seed, 3), n)?,
            random: fixed_moments(&key, &random, protected, 0.0, mix_seed(seed, 4), n)?,
        })
    }

    /// Expected |t| per sample with `n` traces per class at noise `sigma`.
    /// Noise adds independently to the clean samples, so only the variances
    /// grow.
    pub fn expected_t(&self, sigma: f64, n: usize) -> Vec<f64> {
        let (vf, vr) = (self.fixed.variance(), self.random.variance());
        let s2 = sigma * sigma;
        let n = n as f64;
        (0..self.fixed.len())
            .map(|i| {
                let d = (self.fixed.mean()[i] - self.random.mean()[i]).abs();
                let se = ((vf[i] + s2) / n + (vr[i] + s2) / n).sqrt();
                if se == 0.0 { 0.0 } else { d / se }
            })
            .collect()
    }

    /// Largest expected |t| with `n` traces per class at noise `sigma`.
    pub fn predicted_max_t(&self, sigma: f64, n: usize) -> f64 {
        self.expected_t(sigma, n).into_iter().fold(0.0, f64::max)
    }

    /// Probability that every sample stays below the TVLA threshold, taking
    /// each t as unit-variance normal around its expectation and samples as
    /// independent.
    pub fn pass_probability(&self, sigma: f64, n: usize) -> f64 {
        let z = Normal::standard();
        self.expected_t(sigma, n)
            .into_iter()
            .map(|mu| z.cdf(TVLA_THRESHOLD - mu) - z.cdf(-TVLA_THRESHOLD - mu))
            .product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotRow {
    pub sigma: f64,
    /// Unprotected disclosure budget, if found below the search cap.
    pub budget: Option<usize>,
    /// Predicted protected TVLA max |t| at the protected trace count.
    pub protected_tvla_t: f64,
    /// Predicted probability that the protected TVLA passes.
    pub protected_tvla_pass: f64,
}

/// Calibration table: for each sigma, the unprotected disclosure budget and
/// the predicted protected TVLA statistic. The budget search, by far the
/// costliest part, is skipped when `budgets` is false.
pub fn pilot(
    params: KemParams,
    sigmas: &[f64],
    master: u64,
    max_traces: usize,
    bias_traces: usize,
    budgets: bool,
) -> Result<Vec<PilotRow>> {
    let bias = TvlaBias::measure(params, true, bias_traces, master)?;
    sigmas
        .iter()
        .map(|&sigma| {
            Ok(PilotRow {
                sigma,
                budget: if budgets {
                    disclosure_budget(params, sigma, master, REPETITIONS, REQUIRED, CPA_COEFFS, max_traces)?
                } else {
                    None
                },
                protected_tvla_t: bias.predicted_max_t(sigma, TVLA_PROTECTED_TRACES),
                protected_tvla_pass: bias.pass_probability(sigma, TVLA_PROTECTED_TRACES),
            })
        })
        .collect()
}
