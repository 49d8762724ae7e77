//! CPA and TVLA engines.
//!
//! All accumulators are single-pass and mergeable, so trace sets can be
//! streamed instead of materialized. Merges happen in a fixed order, which
//! makes every statistic bit-identical regardless of thread count.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::kem::Ciphertext;
use crate::leakage::{LeakPoint, TraceClass, TraceSet};
use crate::ring::{N, Q};
use crate::sched::COEFFS_PER_WORD;

pub const TVLA_THRESHOLD: f64 = 4.5;

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Empty("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

// --- moments and TVLA -------------------------------------------------------

/// Per-sample running mean and second central moment.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(n_samples: usize) -> Self {
        Self { n: 0, mean: vec![0.0; n_samples], m2: vec![0.0; n_samples] }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per sample.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|m| m / d).collect()
    }

    pub fn push(&mut self, x: &[f32]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::LengthMismatch(format!("trace of {} samples, expected {}", x.len(), self.mean.len())));
        }
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v as f64 - *m;
            *m += d * inv;
            *m2 += d * (v as f64 - *m);
        }
        Ok(())
    }

    /// Chan et al. pairwise combination; `self` absorbs `other`.
    pub fn merge(&mut self, other: &Moments) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::LengthMismatch("merging moments of different lengths".into()));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.n += other.n;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvlaReport {
    pub t: Vec<f64>,
    pub max_abs_t: f64,
    pub argmax: usize,
    pub n_fixed: u64,
    pub n_random: u64,
    /// Samples where both groups have zero variance; their t is 0.
    pub degenerate: usize,
}

impl TvlaReport {
    pub const THRESHOLD: f64 = TVLA_THRESHOLD;

    pub fn leaks(&self) -> bool {
        self.max_abs_t > TVLA_THRESHOLD
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "sample,t")?;
        for (i, t) in self.t.iter().enumerate() {
            writeln!(w, "{i},{t}")?;
        }
        Ok(())
    }
}

/// Welch's t per sample between two groups.
pub fn tvla_from_moments(fixed: &Moments, random: &Moments) -> Result<TvlaReport> {
    if fixed.len() != random.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} samples", fixed.len(), random.len())));
    }
    if fixed.count() < 2 || random.count() < 2 {
        return Err(Error::Empty("each TVLA group needs at least two traces"));
    }
    let (vf, vr) = (fixed.variance(), random.variance());
    let (nf, nr) = (fixed.count() as f64, random.count() as f64);
    let mut degenerate = 0;
    let t: Vec<f64> = (0..fixed.len())
        .map(|i| {
            let se = (vf[i] / nf + vr[i] / nr).sqrt();
            if se == 0.0 {
                degenerate += 1;
                0.0
            } else {
                (fixed.mean[i] - random.mean[i]) / se
            }
        })
        .collect();
    let (argmax, max_abs_t) = t
        .iter()
        .map(|x| x.abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, a)| if a > best.1 { (i, a) } else { best });
    Ok(TvlaReport { t, max_abs_t, argmax, n_fixed: fixed.count(), n_random: random.count(), degenerate })
}

/// Traces per independently accumulated chunk; chunks merge in index order.
pub const CHUNK: usize = 1024;

pub fn moments_of(set: &TraceSet, filter: impl Fn(usize) -> bool + Sync) -> Moments {
    let n = set.n_traces();
    let chunks: Vec<Moments> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(set.n_samples());
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                if filter(i) {
                    m.push(set.trace(i)).expect("set traces share one length");
                }
            }
            m
        })
        .collect();
    let mut total = Moments::new(set.n_samples());
    for c in &chunks {
        total.merge(c).expect("same length");
    }
    total
}

pub fn tvla(fixed: &TraceSet, random: &TraceSet) -> Result<TvlaReport> {
    if fixed.param != random.param {
        return Err(Error::ParamMismatch(format!("{} vs {}", fixed.param, random.param)));
    }
    tvla_from_moments(&moments_of(fixed, |_| true), &moments_of(random, |_| true))
}

/// TVLA within one set, splitting traces by their class label.
pub fn tvla_by_class(set: &TraceSet) -> Result<TvlaReport> {
    let class = |i: usize| set.assoc(i).first().copied();
    let fixed = moments_of(set, |i| class(i) == Some(TraceClass::Fixed as u8));
    let random = moments_of(set, |i| class(i) == Some(TraceClass::Random as u8));
    tvla_from_moments(&fixed, &random)
}

// --- CPA ----------------------------------------------------------------------

/// Register value leaked when secret coefficient `s` meets ciphertext
/// coefficient `u` at `point`.
pub fn register_value(point: LeakPoint, s: u16, u: u16) -> u32 {
    let p = s as u32 * u as u32;
    match point {
        LeakPoint::Point2 => p % Q as u32,
        _ => p,
    }
}

/// Flattened NTT-domain `u` of a ciphertext, indexed `line * 256 + c`.
pub fn u_hat(ct: &Ciphertext) -> Result<Vec<u16>> {
    Ok(ct.u.ntt()?.polys().iter().flat_map(|p| p.coeffs().iter().copied()).collect())
}

/// Flattened index of the coefficient whose product shares a lane register
/// with `f` one event earlier.
pub fn prev_index(f: usize) -> Option<usize> {
    f.checked_sub(COEFFS_PER_WORD)
}

const BITS12: usize = 12;
const BIT_PAIRS: usize = BITS12 * (BITS12 - 1) / 2;
const GROUP_ORDER: usize = Q as usize - 1;

/// Discrete-log tables of `Z_q^*` and spectra of each bit plane of `g^k`.
struct CorrTables {
    /// `pow[k] = g^k mod q`.
    pow: Vec<u16>,
    /// `log[x]` for `x != 0`.
    log: Vec<u16>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    bit_spectra: Vec<Vec<Complex64>>,
    /// Spectra of `bit_b * bit_c` of `g^k` for `b < c`, in row-major order.
    pair_spectra: Vec<Vec<Complex64>>,
}

fn corr_tables() -> &'static CorrTables {
    static T: OnceLock<CorrTables> = OnceLock::new();
    T.get_or_init(|| {
        let q = Q as u32;
        let order = |g: u32| {
            let mut x = g;
            let mut k = 1;
            while x != 1 {
                x = x * g % q;
                k += 1;
            }
            k
        };
        let g = (2..q).find(|&g| order(g) == GROUP_ORDER).expect("Z_q^* is cyclic");
        let mut pow = vec![0u16; GROUP_ORDER];
        let mut log = vec![0u16; Q as usize];
        let mut x = 1u32;
        for (k, p) in pow.iter_mut().enumerate() {
            *p = x as u16;
            log[x as usize] = k as u16;
            x = x * g % q;
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(GROUP_ORDER);
        let inv = planner.plan_fft_inverse(GROUP_ORDER);
        let bit_spectra = (0..BITS12)
            .map(|b| {
                let mut v: Vec<Complex64> =
                    pow.iter().map(|&p| Complex64::new(((p >> b) & 1) as f64, 0.0)).collect();
                fwd.process(&mut v);
                v
            })
            .collect();
        let mut pair_spectra = Vec::with_capacity(BIT_PAIRS);
        for b in 0..BITS12 {
            for c in b + 1..BITS12 {
                let mut v: Vec<Complex64> =
                    pow.iter().map(|&p| Complex64::new(((p >> b) & (p >> c) & 1) as f64, 0.0)).collect();
                fwd.process(&mut v);
                pair_spectra.push(v);
            }
        }
        CorrTables { pow, log, fwd, inv, bit_spectra, pair_spectra }
    })
}

/// Single-pass CPA state for one secret coefficient with a known previous
/// register value model.
///
/// The leakage model is `HD(a_t, y_t(h))` where `a_t` is the previous lane
/// register (zero for the first word of the phase, otherwise known from the
/// already recovered coefficient) and `y_t(h)` the register value for `h`.
/// `HW(a_t)` also leaks in the previous coefficient's own sample, so the
/// predictor is the residual of `HD(a_t, y_t(h))` after least-squares
/// regression on `HW(a_t)`. Without this, `h = 0` (predictor `HW(a_t)`)
/// scores as high as the previous coefficient. Writing
/// `HD(a, y) = HW(a) + sum_b y_b (1 - 2 a_b)`, the cross sums with the
/// samples reduce to per-`u` bucket sums; for reduced products they become a
/// cyclic correlation over `Z_q^*` evaluated with FFTs.
#[derive(Debug, Clone)]
pub struct CpaAccumulator {
    point: LeakPoint,
    coeff: usize,
    prev_secret: Option<u16>,
    n_samples: usize,
    n: u64,
    origin: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    /// `sum_t HW(a_t) x_t`.
    shx: Vec<f64>,
    pairs: Vec<(u16, u32)>,
    /// Reduced products: `[u][s]` sums of x, and `[u][b][s]` sums of `a_b x`.
    bucket_x: Vec<f64>,
    bucket_ax: Vec<f64>,
    /// Raw products: `[h][s]` sums of `P_h x`.
    dense: Vec<f64>,
}

impl CpaAccumulator {
    pub fn new(point: LeakPoint, coeff: usize, prev_secret: Option<u16>, n_samples: usize) -> Result<Self> {
        match point {
            LeakPoint::Point1 | LeakPoint::Point2 => {}
            _ => return Err(Error::Unsupported("CPA targets point1 or point2")),
        }
        if prev_index(coeff).is_some() != prev_secret.is_some() {
            return Err(Error::LengthMismatch(format!("coefficient {coeff} needs a previous secret iff it is past the first word")));
        }
        if n_samples == 0 {
            return Err(Error::Empty("traces have no samples"));
        }
        let q = Q as usize;
        let (bucket_x, bucket_ax, dense) = match point {
            LeakPoint::Point2 => (vec![0.0; q * n_samples], vec![0.0; q * BITS12 * n_samples], Vec::new()),
            _ => (Vec::new(), Vec::new(), vec![0.0; q * n_samples]),
        };
        Ok(Self {
            point,
            coeff,
            prev_secret,
            n_samples,
            n: 0,
            origin: Vec::new(),
            sx: vec![0.0; n_samples],
            sxx: vec![0.0; n_samples],
            shx: vec![0.0; n_samples],
            pairs: Vec::new(),
            bucket_x,
            bucket_ax,
            dense,
        })
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn absorb(&mut self, u_hat: &[u16], samples: &[f32]) -> Result<()> {
        let s_len = self.n_samples;
        if samples.len() != s_len {
            return Err(Error::LengthMismatch(format!("trace of {} samples, expected {s_len}", samples.len())));
        }
        let u = *u_hat.get(self.coeff).ok_or(Error::OutOfRange { what: "coefficient", value: self.coeff as u64 })?;
        let a = match (prev_index(self.coeff), self.prev_secret) {
            (Some(p), Some(s)) => register_value(self.point, s, u_hat[p]),
            _ => 0,
        };
        if self.origin.is_empty() {
            self.origin = samples.iter().map(|&x| x as f64).collect();
        }
        let hw = a.count_ones() as f64;
        let x: Vec<f64> = samples.iter().zip(&self.origin).map(|(&v, o)| v as f64 - o).collect();
        for s in 0..s_len {
            self.sx[s] += x[s];
            self.sxx[s] += x[s] * x[s];
            self.shx[s] += hw * x[s];
        }
        self.pairs.push((u, a));
        self.n += 1;
        match self.point {
            LeakPoint::Point2 => {
                let row = &mut self.bucket_x[u as usize * s_len..][..s_len];
                row.iter_mut().zip(&x).for_each(|(r, v)| *r += v);
                let base = u as usize * BITS12 * s_len;
                let mut bits = a;
                while bits != 0 {
                    let b = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let row = &mut self.bucket_ax[base + b * s_len..][..s_len];
                    row.iter_mut().zip(&x).for_each(|(r, v)| *r += v);
                }
            }
            _ => {
                for h in 0..Q as u32 {
                    let p = (a ^ (h * u as u32)).count_ones() as f64;
                    if p != 0.0 {
                        let row = &mut self.dense[h as usize * s_len..][..s_len];
                        row.iter_mut().zip(&x).for_each(|(r, v)| *r += p * v);
                    }
                }
            }
        }
        Ok(())
    }

    /// `sum_t P_h`, `sum_t P_h^2` and `sum_t P_h HW(a_t)` for every
    /// hypothesis, exactly, plus `sum_t HW(a_t)` and `sum_t HW(a_t)^2`.
    fn predictor_sums(&self) -> PredictorSums {
        match self.point {
            LeakPoint::Point2 => self.predictor_sums_fft(),
            _ => self.predictor_sums_direct(),
        }
    }

    /// O(q) work per distinct `(u, a)` pair.
    fn predictor_sums_direct(&self) -> PredictorSums {
        let mut pairs = self.pairs.clone();
        pairs.sort_unstable();
        let mut groups: Vec<(u16, u32, u64)> = Vec::new();
        for (u, a) in pairs {
            match groups.last_mut() {
                Some(g) if g.0 == u && g.1 == a => g.2 += 1,
                _ => groups.push((u, a, 1)),
            }
        }
        let point = self.point;
        let per_h: Vec<[u64; 3]> = (0..Q)
            .into_par_iter()
            .map(|h| {
                let mut acc = [0u64; 3];
                for &(u, a, c) in &groups {
                    let p = (a ^ register_value(point, h, u)).count_ones() as u64;
                    acc[0] += c * p;
                    acc[1] += c * p * p;
                    acc[2] += c * p * a.count_ones() as u64;
                }
                acc
            })
            .collect();
        let (mut w1, mut w2) = (0u64, 0u64);
        for &(_, a, c) in &groups {
            let w = a.count_ones() as u64;
            w1 += c * w;
            w2 += c * w * w;
        }
        PredictorSums { per_h, w1, w2 }
    }

    /// Reduced products. With `s_b = 1 - 2 a_b` and `y = h u mod q`,
    /// `P = HW(a) + sum_b y_b s_b`, so every sum is a combination of
    /// `sum_u F(h u) G[u]` with `F` a bit or a product of two bits of `y` and
    /// `G` a per-`u` statistic of `a`. Those are cyclic correlations over
    /// `Z_q^*`. The true sums are integers, so the FFT results are rounded.
    fn predictor_sums_fft(&self) -> PredictorSums {
        let q = Q as usize;
        let t = corr_tables();
        let mut count = vec![0i64; q];
        let mut sb = vec![[0i64; BITS12]; q];
        let mut sbw = vec![[0i64; BITS12]; q];
        let mut sbb = vec![[0i64; BIT_PAIRS]; q];
        let (mut w1, mut w2) = (0u64, 0u64);
        for &(u, a) in &self.pairs {
            let u = u as usize;
            let w = a.count_ones() as i64;
            w1 += w as u64;
            w2 += (w * w) as u64;
            count[u] += 1;
            let sign = |b: usize| 1 - 2 * ((a >> b) & 1) as i64;
            let mut k = 0;
            for b in 0..BITS12 {
                let sign_b = sign(b);
                sb[u][b] += sign_b;
                sbw[u][b] += sign_b * w;
                for c in b + 1..BITS12 {
                    sbb[u][k] += sign_b * sign(c);
                    k += 1;
                }
            }
        }
        let correlate = |terms: Vec<(&Vec<Complex64>, Vec<f64>)>| -> Vec<i64> {
            let mut total = vec![Complex64::new(0.0, 0.0); GROUP_ORDER];
            for (spec, g) in terms {
                let mut w: Vec<Complex64> = t.pow.iter().map(|&u| Complex64::new(g[u as usize], 0.0)).collect();
                t.fwd.process(&mut w);
                for ((acc, f), wk) in total.iter_mut().zip(spec).zip(&w) {
                    *acc += f * wk.conj();
                }
            }
            t.inv.process(&mut total);
            let mut out = vec![0i64; q];
            for h in 1..q {
                out[h] = (total[t.log[h] as usize].re / GROUP_ORDER as f64).round() as i64;
            }
            out
        };
        let bits = |m: &[[i64; BITS12]]| -> Vec<(&Vec<Complex64>, Vec<f64>)> {
            (0..BITS12).map(|b| (&t.bit_spectra[b], m.iter().map(|r| r[b] as f64).collect())).collect()
        };
        let ys = correlate(bits(&sb));
        let ysw = correlate(bits(&sbw));
        let cnt: Vec<f64> = count.iter().map(|&c| c as f64).collect();
        let yc = correlate((0..BITS12).map(|b| (&t.bit_spectra[b], cnt.clone())).collect());
        let yy = correlate((0..BIT_PAIRS).map(|k| (&t.pair_spectra[k], sbb.iter().map(|r| r[k] as f64).collect())).collect());
        let (w1i, w2i) = (w1 as i64, w2 as i64);
        let per_h = (0..q)
            .map(|h| {
                let s1 = w1i + ys[h];
                let sw = w2i + ysw[h];
                let s2 = w2i + 2 * ysw[h] + yc[h] + 2 * yy[h];
                [s1 as u64, s2 as u64, sw as u64]
            })
            .collect();
        PredictorSums { per_h, w1, w2 }
    }

    /// `sum_t P_h x_t[s]` as a `[h][s]` matrix.
    fn cross_sums(&self) -> Vec<f64> {
        let s_len = self.n_samples;
        let q = Q as usize;
        if self.point != LeakPoint::Point2 {
            return self.dense.clone();
        }
        let t = corr_tables();
        let cols: Vec<Vec<f64>> = (0..s_len)
            .into_par_iter()
            .map(|s| {
                let mut total = vec![Complex64::new(0.0, 0.0); GROUP_ORDER];
                let mut w = vec![Complex64::new(0.0, 0.0); GROUP_ORDER];
                for (b, spec) in t.bit_spectra.iter().enumerate() {
                    for (k, wk) in w.iter_mut().enumerate() {
                        let u = t.pow[k] as usize;
                        let g = self.bucket_x[u * s_len + s] - 2.0 * self.bucket_ax[(u * BITS12 + b) * s_len + s];
                        *wk = Complex64::new(g, 0.0);
                    }
                    t.fwd.process(&mut w);
                    for ((acc, bs), wk) in total.iter_mut().zip(spec).zip(&w) {
                        *acc += bs * wk.conj();
                    }
                }
                t.inv.process(&mut total);
                let scale = 1.0 / GROUP_ORDER as f64;
                let mut col = vec![self.shx[s]; q];
                for h in 1..q {
                    col[h] += total[t.log[h] as usize].re * scale;
                }
                col
            })
            .collect();
        let mut out = vec![0.0; q * s_len];
        for (s, col) in cols.iter().enumerate() {
            for h in 0..q {
                out[h * s_len + s] = col[h];
            }
        }
        out
    }

    /// Correlation matrix `rho[h][s]` of the residual predictors; hypotheses
    /// whose residual is constant get 0.
    pub fn correlations(&self) -> Result<Vec<f64>> {
        if self.n < 2 {
            return Err(Error::Empty("CPA needs at least two traces"));
        }
        let s_len = self.n_samples;
        let n = self.n as f64;
        let sums = self.predictor_sums();
        let spx = self.cross_sums();
        let vx: Vec<f64> = (0..s_len).map(|s| n * self.sxx[s] - self.sx[s] * self.sx[s]).collect();
        // Centered second moments, scaled by n, of HW(a) and each P_h.
        let (w1, w2) = (sums.w1 as f64, sums.w2 as f64);
        let vw = n * w2 - w1 * w1;
        let mut rho = vec![0.0; Q as usize * s_len];
        rho.par_chunks_mut(s_len).enumerate().for_each(|(h, row)| {
            let [p1, p2, pw] = sums.per_h[h].map(|v| v as f64);
            let vp = n * p2 - p1 * p1;
            let cpw = n * pw - p1 * w1;
            // Residual of P_h on HW(a): P - beta HW(a).
            let beta = if vw > 0.0 { cpw / vw } else { 0.0 };
            let vr = vp - beta * cpw;
            for s in 0..s_len {
                let cpx = n * spx[h * s_len + s] - p1 * self.sx[s];
                let cwx = n * self.shx[s] - w1 * self.sx[s];
                let denom = (vr * vx[s]).sqrt();
                // Rounding can leave a tiny positive residual for an exact
                // multiple of HW(a); treat those as constant.
                row[s] = if vr > 1e-9 * vp.max(1.0) && vx[s] > 0.0 {
                    ((cpx - beta * cwx) / denom).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
            }
        });
        Ok(rho)
    }

    pub fn finish(&self, truth: Option<u16>) -> Result<CoeffResult> {
        let s_len = self.n_samples;
        let rho = self.correlations()?;
        let score = |h: usize| rho[h * s_len..][..s_len].iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let mut ranking: Vec<(u16, f64)> = (0..Q as usize).map(|h| (h as u16, score(h))).collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let best = ranking[0].0;
        let curve = |h: u16| rho[h as usize * s_len..][..s_len].to_vec();
        let truth_rank = truth.map(|t| ranking.iter().position(|r| r.0 == t).expect("full hypothesis space") + 1);
        Ok(CoeffResult {
            coeff: self.coeff,
            n_traces: self.n,
            best,
            truth,
            truth_rank,
            truth_peak: truth.map(|t| score(t as usize)),
            curve_best: curve(best),
            curve_truth: truth.map(curve),
            ranking,
        })
    }
}

struct PredictorSums {
    /// Per hypothesis: `sum P`, `sum P^2`, `sum P HW(a)`.
    per_h: Vec<[u64; 3]>,
    /// `sum HW(a)` and `sum HW(a)^2`.
    w1: u64,
    w2: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeffResult {
    /// Flattened index `line * 256 + c`.
    pub coeff: usize,
    pub n_traces: u64,
    /// Hypotheses sorted by descending max |rho|.
    pub ranking: Vec<(u16, f64)>,
    pub best: u16,
    pub truth: Option<u16>,
    /// 1-based.
    pub truth_rank: Option<usize>,
    pub truth_peak: Option<f64>,
    pub curve_best: Vec<f64>,
    pub curve_truth: Option<Vec<f64>>,
}

impl CoeffResult {
    pub fn success(&self) -> Option<bool> {
        self.truth_rank.map(|r| r == 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpaReport {
    pub point: LeakPoint,
    pub n_traces: usize,
    pub coeffs: Vec<CoeffResult>,
}

impl CpaReport {
    /// Recovered values in attack order.
    pub fn recovered(&self) -> Vec<u16> {
        self.coeffs.iter().map(|c| c.best).collect()
    }

    /// All targeted coefficients ranked first; `None` without ground truth.
    pub fn success(&self) -> Option<bool> {
        self.coeffs.iter().map(|c| c.success()).try_fold(true, |acc, s| s.map(|s| acc && s))
    }

    /// `coeff,rank,hypothesis,score` for the top `top` hypotheses of each
    /// coefficient.
    pub fn write_csv(&self, w: &mut impl Write, top: usize) -> Result<()> {
        writeln!(w, "coeff,rank,hypothesis,score")?;
        for c in &self.coeffs {
            for (i, (h, s)) in c.ranking.iter().take(top).enumerate() {
                writeln!(w, "{},{},{},{}", c.coeff, i + 1, h, s)?;
            }
        }
        Ok(())
    }

    /// `sample,rho_best,rho_truth` for coefficient `i` of the report.
    pub fn write_curve_csv(&self, w: &mut impl Write, i: usize) -> Result<()> {
        let c = &self.coeffs[i];
        writeln!(w, "sample,rho_best,rho_truth")?;
        for (s, r) in c.curve_best.iter().enumerate() {
            let t = c.curve_truth.as_ref().map(|v| v[s].to_string()).unwrap_or_default();
            writeln!(w, "{s},{r},{t}")?;
        }
        Ok(())
    }
}

/// Extend-and-prune CPA on coefficients `first..first + count`.
///
/// `prior` holds already recovered coefficients `0..first`; each newly
/// recovered value becomes the previous-register reference for the
/// coefficient one word later. `truth`, when given, is the flattened secret
/// used only to fill in ranks.
pub fn cpa_attack(
    traces: &TraceSet,
    point: LeakPoint,
    first: usize,
    count: usize,
    prior: &[u16],
    truth: Option<&[u16]>,
) -> Result<CpaReport> {
    if !matches!(point, LeakPoint::Point1 | LeakPoint::Point2) {
        return Err(Error::Unsupported("CPA targets point1 or point2"));
    }
    if traces.assoc_len() == 0 {
        return Err(Error::Format("trace set carries no ciphertexts".into()));
    }
    if prior.len() < first {
        return Err(Error::LengthMismatch(format!("prior covers {} coefficients, attack starts at {first}", prior.len())));
    }
    let k = traces.param.params().k;
    if first + count > k * N {
        return Err(Error::OutOfRange { what: "coefficient", value: (first + count) as u64 });
    }
    let us: Vec<Vec<u16>> = (0..traces.n_traces())
        .into_par_iter()
        .map(|i| traces.ciphertext(i).and_then(|(_, ct)| u_hat(&ct)))
        .collect::<Result<_>>()?;
    let mut known = prior[..first].to_vec();
    let mut coeffs = Vec::with_capacity(count);
    for f in first..first + count {
        let prev = prev_index(f).map(|p| known[p]);
        let mut acc = CpaAccumulator::new(point, f, prev, traces.n_samples())?;
        for (i, u) in us.iter().enumerate() {
            acc.absorb(u, traces.trace(i))?;
        }
        let r = acc.finish(truth.and_then(|t| t.get(f).copied()))?;
        known.push(r.best);
        coeffs.push(r);
    }
    Ok(CpaReport { point, n_traces: traces.n_traces(), coeffs })
}

// --- plots --------------------------------------------------------------------

/// Minimal SVG line plot. `guides` are horizontal dashed lines.
pub fn svg_plot(title: &str, x_label: &str, series: &[(&str, &[f64])], guides: &[f64]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let vals = series.iter().flat_map(|s| s.1.iter().copied()).chain(guides.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 1.0, hi + 1.0);
    }
    let px = |i: usize| M + (W - 2.0 * M) * i as f64 / (n - 1) as f64;
    let py = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<polyline points="{M},{M} {M},{} {},{}" fill="none" stroke="black"/>"#, H - M, W - M, H - M);
    for (v, anchor) in [(lo, H - M), (hi, M)] {
        let _ = writeln!(s, r#"<text x="{}" y="{anchor}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3}</text>"#, M - 4.0);
    }
    for &g in guides {
        let y = py(g);
        let _ = writeln!(s, r#"<line x1="{M}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="red" stroke-dasharray="6,4"/>"#, W - M);
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> =
            ys.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#, W - M - 120.0, M + 14.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::{rng_from, Gaussian};
    use rand_core::RngCore;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap();
        assert!((r - 0.9934).abs() < 1e-3, "{r}");
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation)));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn random_moments(seed: u64, n: usize, len: usize, offset: f64) -> Moments {
        let mut g = Gaussian::new(seed);
        let mut m = Moments::new(len);
        for _ in 0..n {
            let x: Vec<f32> = (0..len).map(|_| (offset + g.sample()) as f32).collect();
            m.push(&x).unwrap();
        }
        m
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let mut g = Gaussian::new(4);
        let xs: Vec<Vec<f32>> = (0..500).map(|_| (0..3).map(|_| (g.sample() * 3.0 + 7.0) as f32).collect()).collect();
        let mut all = Moments::new(3);
        let (mut a, mut b) = (Moments::new(3), Moments::new(3));
        for (i, x) in xs.iter().enumerate() {
            all.push(x).unwrap();
            if i < 123 { a.push(x).unwrap() } else { b.push(x).unwrap() }
        }
        a.merge(&b).unwrap();
        for i in 0..3 {
            assert!((a.mean()[i] - all.mean()[i]).abs() < 1e-9);
            assert!((a.variance()[i] - all.variance()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn tvla_offset_matches_closed_form() {
        let f = random_moments(1, 1000, 16, 1.0);
        let r = random_moments(2, 1000, 16, 0.0);
        let rep = tvla_from_moments(&f, &r).unwrap();
        // E[t] = 1 / sqrt(2 / 1000) ~ 22.4
        for t in &rep.t {
            assert!((t - 22.4).abs() < 4.0, "{t}");
        }
        assert!(rep.leaks());
    }

    #[test]
    fn tvla_degenerate_and_errors() {
        let mut a = Moments::new(2);
        a.push(&[1.0, 2.0]).unwrap();
        a.push(&[1.0, 3.0]).unwrap();
        let rep = tvla_from_moments(&a, &a.clone()).unwrap();
        assert_eq!(rep.degenerate, 1);
        assert!(rep.t.iter().all(|&t| t == 0.0));
        let mut one = Moments::new(2);
        one.push(&[0.0, 0.0]).unwrap();
        assert!(tvla_from_moments(&one, &a).is_err());
        assert!(tvla_from_moments(&Moments::new(3), &a).is_err());
    }

    #[test]
    fn group_tables_are_consistent() {
        let t = corr_tables();
        let mut seen = vec![false; Q as usize];
        for (k, &p) in t.pow.iter().enumerate() {
            assert!(!seen[p as usize]);
            seen[p as usize] = true;
            assert_eq!(t.log[p as usize] as usize, k);
        }
        assert!(!seen[0]);
    }

    /// Direct O(q * N * S) reference for the cross sums.
    fn brute_cross(point: LeakPoint, prev: Option<u16>, coeff: usize, us: &[Vec<u16>], xs: &[Vec<f32>]) -> Vec<f64> {
        let s_len = xs[0].len();
        let origin: Vec<f64> = xs[0].iter().map(|&v| v as f64).collect();
        let mut out = vec![0.0; Q as usize * s_len];
        for (u, x) in us.iter().zip(xs) {
            let a = match (prev_index(coeff), prev) {
                (Some(p), Some(s)) => register_value(point, s, u[p]),
                _ => 0,
            };
            for h in 0..Q {
                let p = (a ^ register_value(point, h, u[coeff])).count_ones() as f64;
                for s in 0..s_len {
                    out[h as usize * s_len + s] += p * (x[s] as f64 - origin[s]);
                }
            }
        }
        out
    }

    #[test]
    fn fft_cross_sums_match_brute_force() {
        let mut rng = rng_from(8);
        let (n, s_len, coeff) = (40, 3, 6);
        let us: Vec<Vec<u16>> = (0..n).map(|_| (0..16).map(|_| (rng.next_u32() % Q as u32) as u16).collect()).collect();
        let xs: Vec<Vec<f32>> = (0..n).map(|_| (0..s_len).map(|_| (rng.next_u32() % 50) as f32).collect()).collect();
        for point in [LeakPoint::Point1, LeakPoint::Point2] {
            let mut acc = CpaAccumulator::new(point, coeff, Some(1234), s_len).unwrap();
            for (u, x) in us.iter().zip(&xs) {
                acc.absorb(u, x).unwrap();
            }
            let fast = acc.cross_sums();
            let slow = brute_cross(point, Some(1234), coeff, &us, &xs);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{point:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fft_predictor_sums_match_direct() {
        let mut rng = rng_from(11);
        for (coeff, prev) in [(1, None), (6, Some(3001)), (9, Some(0))] {
            let mut acc = CpaAccumulator::new(LeakPoint::Point2, coeff, prev, 2).unwrap();
            for _ in 0..300 {
                let u: Vec<u16> = (0..16).map(|_| (rng.next_u32() % Q as u32) as u16).collect();
                acc.absorb(&u, &[0.0, 1.0]).unwrap();
            }
            let (fast, slow) = (acc.predictor_sums_fft(), acc.predictor_sums_direct());
            assert_eq!((fast.w1, fast.w2), (slow.w1, slow.w2));
            assert_eq!(fast.per_h, slow.per_h);
        }
    }

    #[test]
    fn accumulator_rejects_bad_setup() {
        assert!(CpaAccumulator::new(LeakPoint::Point3, 0, None, 4).is_err());
        assert!(CpaAccumulator::new(LeakPoint::Point2, 5, None, 4).is_err());
        assert!(CpaAccumulator::new(LeakPoint::Point2, 1, Some(3), 4).is_err());
        let mut acc = CpaAccumulator::new(LeakPoint::Point2, 0, None, 4).unwrap();
        assert!(acc.absorb(&[1, 2, 3, 4], &[0.0; 3]).is_err());
        assert!(acc.finish(None).is_err());
    }

    #[test]
    fn svg_has_guides_and_series() {
        let svg = svg_plot("t", "sample", &[("t", &[0.0, 5.0, -1.0])], &[4.5, -4.5]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
