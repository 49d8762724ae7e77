//! Synthetic side-channel traces.
//!
//! Each datapath event updates a bank of four lane registers (one per
//! coefficient of the word being processed). The event's sample is the
//! Hamming distance between the bank's previous and new contents plus
//! Gaussian noise:
//!
//! `sample = sum_lanes popcount(prev[lane] ^ new[lane]) + sigma * N(0, 1)`
//!
//! Lane widths: 24 bits for the raw product register (point 1), 12 bits for
//! the reduced product (point 2), butterfly outputs and the subtraction
//! result (point 3). Each op kind owns one bank, cleared to zero before its
//! phase starts.

use std::io::{BufReader, BufWriter, Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kem::{decrypt_traced, encrypt, word_products, Ciphertext, KemParams, KeyPair, ParamSet, PublicKey, TracedEvent};
use crate::prng::{mix_seed, rng_from, Gaussian, SeedStream};
use crate::ring::{decompress, Domain, Poly, PolyVec, INTT_STAGES, N};
use crate::sched::{build_protected, build_unprotected, pwm_order, Op, Schedule, TapDelays, COEFFS_PER_WORD, GROUPS_PER_STAGE, WORDS_PER_POLY};

pub const LANES: usize = COEFFS_PER_WORD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeakPoint {
    /// Raw products `s_hat o u_hat`.
    Point1,
    /// Products reduced mod q.
    Point2,
    /// `v - INTT(...)`.
    Point3,
    /// Every event, including INTT butterflies.
    All,
}

impl LeakPoint {
    pub fn includes(self, op: Op) -> bool {
        match self {
            LeakPoint::Point1 => op == Op::Pwm,
            LeakPoint::Point2 => op == Op::Reduce,
            LeakPoint::Point3 => op == Op::Sub,
            LeakPoint::All => true,
        }
    }

    /// Samples per trace for this target.
    pub fn samples(self, params: KemParams) -> usize {
        let words = params.k * WORDS_PER_POLY;
        match self {
            LeakPoint::Point1 | LeakPoint::Point2 => words,
            LeakPoint::Point3 => WORDS_PER_POLY,
            LeakPoint::All => 2 * words + INTT_STAGES * GROUPS_PER_STAGE + WORDS_PER_POLY,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LeakPoint::Point1 => "point1",
            LeakPoint::Point2 => "point2",
            LeakPoint::Point3 => "point3",
            LeakPoint::All => "all",
        }
    }
}

impl std::str::FromStr for LeakPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point1" => Ok(LeakPoint::Point1),
            "point2" => Ok(LeakPoint::Point2),
            "point3" => Ok(LeakPoint::Point3),
            "all" => Ok(LeakPoint::All),
            _ => Err(Error::Format(format!("unknown leakage target {s:?}"))),
        }
    }
}

/// Lane register width in bits for events of kind `op`.
pub fn lane_width(op: Op) -> u32 {
    match op {
        Op::Pwm => 24,
        Op::Reduce | Op::Butterfly | Op::Sub => 12,
    }
}

/// Hamming distance between two register values of `width` bits.
pub fn hd(a: u32, b: u32, width: u32) -> Result<u32> {
    let limit = if width >= 32 { u32::MAX } else { (1u32 << width) - 1 };
    if a > limit || b > limit {
        return Err(Error::OutOfRange { what: "register value", value: a.max(b) as u64 });
    }
    Ok((a ^ b).count_ones())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageConfig {
    pub target: LeakPoint,
    /// Noise standard deviation in Hamming-distance units.
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub samples_per_event: u32,
}

impl LeakageConfig {
    pub const DEFAULT_SIGMA: f64 = 1.0;

    pub fn new(target: LeakPoint, noise_sigma: f64, master_seed: u64) -> Self {
        Self { target, noise_sigma, master_seed, samples_per_event: 1 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Format(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if self.samples_per_event != 1 {
            return Err(Error::Unsupported("samples_per_event other than 1"));
        }
        Ok(())
    }
}

/// Noiseless samples for a traced decryption.
pub fn hd_samples(events: &[TracedEvent], target: LeakPoint) -> Vec<u32> {
    // One bank per op kind, indexed by `Op as usize`.
    let mut banks = [[0u32; LANES]; 4];
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        let bank = &mut banks[ev.event.op as usize];
        if target.includes(ev.event.op) {
            let width = lane_width(ev.event.op);
            let d: u32 = bank
                .iter()
                .zip(&ev.values)
                .map(|(&p, &n)| hd(p, n, width).expect("datapath values fit their registers"))
                .sum();
            out.push(d);
        }
        *bank = ev.values;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceClass {
    Random = 0,
    Fixed = 1,
}

impl TraceClass {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(TraceClass::Random),
            1 => Ok(TraceClass::Fixed),
            _ => Err(Error::Format(format!("bad class label {b}"))),
        }
    }
}

/// Where each trace's ciphertext comes from.
pub trait CiphertextSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(Ciphertext, TraceClass)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The same ciphertext `count` times (TVLA fixed class).
pub struct FixedCiphertext {
    pub ct: Ciphertext,
    pub count: usize,
}

impl CiphertextSource for FixedCiphertext {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, _index: usize) -> Result<(Ciphertext, TraceClass)> {
        Ok((self.ct.clone(), TraceClass::Fixed))
    }
}

/// Honest encryptions of fresh random messages; ciphertext `i` depends only
/// on `(seed, i)`.
pub struct RandomCiphertexts {
    pub params: KemParams,
    pub pk: PublicKey,
    pub seed: u64,
    pub count: usize,
}

impl CiphertextSource for RandomCiphertexts {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<(Ciphertext, TraceClass)> {
        use rand_core::RngCore;
        let mut rng = rng_from(mix_seed(self.seed, index as u64));
        let mut m = [0u8; 32];
        let mut coins = [0u8; 32];
        rng.fill_bytes(&mut m);
        rng.fill_bytes(&mut coins);
        Ok((encrypt(self.params, &self.pk, &m, &coins)?, TraceClass::Random))
    }
}

/// Uniformly random compressed ciphertexts, decompressed. Decryption accepts
/// any such ciphertext, so they are the chosen inputs of a CPA adversary and
/// far cheaper than honest encryptions. Ciphertext `i` depends only on
/// `(seed, i)`.
pub struct UniformCiphertexts {
    pub params: KemParams,
    pub seed: u64,
    pub count: usize,
}

impl UniformCiphertexts {
    fn poly(rng: &mut crate::prng::Rng, d: u8) -> Result<Poly> {
        use rand_core::RngCore;
        let mask = (1u32 << d) - 1;
        let mut c = [0u16; N];
        for x in c.iter_mut() {
            *x = decompress((rng.next_u32() & mask) as u16, d)?;
        }
        Poly::from_coeffs(c, Domain::Time)
    }
}

impl CiphertextSource for UniformCiphertexts {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<(Ciphertext, TraceClass)> {
        let mut rng = rng_from(mix_seed(self.seed, index as u64));
        let p = self.params;
        let u = (0..p.k).map(|_| Self::poly(&mut rng, p.du)).collect::<Result<Vec<_>>>()?;
        let v = Self::poly(&mut rng, p.dv)?;
        Ok((Ciphertext { params: p, u: PolyVec::new(u)?, v }, TraceClass::Random))
    }
}

impl CiphertextSource for [Ciphertext] {
    fn len(&self) -> usize {
        <[Ciphertext]>::len(self)
    }

    fn get(&self, index: usize) -> Result<(Ciphertext, TraceClass)> {
        Ok((self[index].clone(), TraceClass::Random))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFactory {
    Unprotected,
    /// A freshly shuffled schedule for every trace.
    Protected(TapDelays),
}

/// Produces individual traces; the building block of [`synthesize`] and of
/// streaming consumers that never materialize a whole [`TraceSet`].
pub struct Synthesizer<'a> {
    sk: &'a KeyPair,
    cts: &'a dyn CiphertextSource,
    factory: ScheduleFactory,
    cfg: LeakageConfig,
    plain: Schedule,
}

/// One synthesized trace with its inputs.
pub struct Trace {
    pub ct: Ciphertext,
    pub class: TraceClass,
    /// NTT-domain `u`, flattened as `line * 256 + c`.
    pub u_hat: Vec<u16>,
    pub samples: Vec<f32>,
}

impl<'a> Synthesizer<'a> {
    pub fn new(
        sk: &'a KeyPair,
        cts: &'a dyn CiphertextSource,
        factory: ScheduleFactory,
        cfg: LeakageConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cts.is_empty() {
            return Err(Error::Empty("ciphertext stream"));
        }
        Ok(Self { sk, cts, factory, cfg, plain: build_unprotected(sk.params) })
    }

    pub fn len(&self) -> usize {
        self.cts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cts.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.cfg.target.samples(self.sk.params)
    }

    pub fn protected(&self) -> bool {
        matches!(self.factory, ScheduleFactory::Protected(_))
    }

    /// Per-trace seed: `mix_seed(master_seed, index)`. Sub-stream 1 feeds the
    /// RPG seeds, sub-stream 2 the noise.
    pub fn trace_seed(&self, index: usize) -> u64 {
        mix_seed(self.cfg.master_seed, index as u64)
    }

    pub fn schedule(&self, index: usize) -> Result<Schedule> {
        match self.factory {
            ScheduleFactory::Unprotected => Ok(self.plain.clone()),
            ScheduleFactory::Protected(delays) => {
                let mut seeds = SeedStream::new(mix_seed(self.trace_seed(index), 1));
                build_protected(self.sk.params, &mut seeds, delays)
            }
        }
    }

    /// Noiseless samples through the full traced decryption.
    pub fn reference_samples(&self, index: usize) -> Result<Vec<u32>> {
        let (ct, _) = self.cts.get(index)?;
        let (_, events) = decrypt_traced(self.sk, &ct, &self.schedule(index)?)?;
        Ok(hd_samples(&events, self.cfg.target))
    }

    /// Product-register targets only depend on the PWM order, which comes
    /// from the leading seeds of the trace's stream; this skips the rest of
    /// the decryption and yields the same samples as the reference path.
    fn product_samples(&self, index: usize, u_hat: &PolyVec) -> Result<Vec<u32>> {
        let params = self.sk.params;
        let order = match self.factory {
            ScheduleFactory::Unprotected => pwm_order(params, None)?,
            ScheduleFactory::Protected(_) => {
                let mut seeds = SeedStream::new(mix_seed(self.trace_seed(index), 1));
                pwm_order(params, Some(&mut seeds))?
            }
        };
        let reduced = self.cfg.target == LeakPoint::Point2;
        let mut bank = [0u32; LANES];
        Ok(order
            .into_iter()
            .map(|(l, w)| {
                let v = word_products(self.sk, u_hat, l as usize, w as usize, reduced);
                let d = bank.iter().zip(&v).map(|(a, b)| (a ^ b).count_ones()).sum();
                bank = v;
                d
            })
            .collect())
    }

    pub fn trace(&self, index: usize) -> Result<Trace> {
        let (ct, class) = self.cts.get(index)?;
        let u_hat = ct.u.ntt()?;
        let clean = match self.cfg.target {
            LeakPoint::Point1 | LeakPoint::Point2 => self.product_samples(index, &u_hat)?,
            _ => {
                let owned;
                let schedule = match self.factory {
                    ScheduleFactory::Unprotected => &self.plain,
                    ScheduleFactory::Protected(_) => {
                        owned = self.schedule(index)?;
                        &owned
                    }
                };
                hd_samples(&decrypt_traced(self.sk, &ct, schedule)?.1, self.cfg.target)
            }
        };
        let sigma = self.cfg.noise_sigma;
        let samples = if sigma == 0.0 {
            clean.iter().map(|&d| d as f32).collect()
        } else {
            let mut g = Gaussian::new(mix_seed(self.trace_seed(index), 2));
            clean.iter().map(|&d| (d as f64 + sigma * g.sample()) as f32).collect()
        };
        let u_hat = u_hat.polys().iter().flat_map(|p| p.coeffs().iter().copied()).collect();
        Ok(Trace { ct, class, u_hat, samples })
    }

    /// Traces `range`, computed in parallel and returned in index order.
    pub fn traces(&self, range: std::ops::Range<usize>) -> Result<Vec<Trace>> {
        range.into_par_iter().map(|i| self.trace(i)).collect()
    }
}

/// Synthesizes one trace per ciphertext. Output is identical for any thread
/// count.
pub fn synthesize(
    sk: &KeyPair,
    cts: &dyn CiphertextSource,
    factory: ScheduleFactory,
    cfg: LeakageConfig,
) -> Result<TraceSet> {
    let synth = Synthesizer::new(sk, cts, factory, cfg)?;
    let mut set = TraceSet::new(sk.params.set, synth.protected(), synth.n_samples());
    for t in synth.traces(0..synth.len())? {
        set.push(&t)?;
    }
    Ok(set)
}

// --- trace sets and the SKTL file format ------------------------------------

pub const TRACE_MAGIC: &[u8; 4] = b"SKTL";
pub const TRACE_VERSION: u16 = 1;
pub const FLAG_PROTECTED: u8 = 0b01;
pub const FLAG_NON_INTEROPERABLE: u8 = 0b10;
pub const HEADER_LEN: usize = 20;

/// Associated data per trace: class label byte, then the ciphertext
/// coefficients (`u` then `v`, little-endian u16).
pub fn assoc_len(params: KemParams) -> usize {
    1 + Ciphertext::coeff_bytes(params)
}

pub fn encode_assoc(class: TraceClass, ct: &Ciphertext) -> Vec<u8> {
    let mut v = Vec::with_capacity(assoc_len(ct.params));
    v.push(class as u8);
    ct.write_coeffs(&mut v).expect("writing to a Vec");
    v
}

pub fn decode_assoc(params: KemParams, bytes: &[u8]) -> Result<(TraceClass, Ciphertext)> {
    if bytes.len() != assoc_len(params) {
        return Err(Error::Format(format!("associated data is {} bytes, expected {}", bytes.len(), assoc_len(params))));
    }
    let class = TraceClass::from_byte(bytes[0])?;
    Ok((class, Ciphertext::read_coeffs(&mut &bytes[1..], params)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub param: ParamSet,
    pub flags: u8,
    pub n_traces: u32,
    pub n_samples: u32,
    pub assoc_len: u32,
}

impl TraceHeader {
    pub fn protected(&self) -> bool {
        self.flags & FLAG_PROTECTED != 0
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&TRACE_VERSION.to_le_bytes())?;
        w.write_all(&[self.param.id(), self.flags])?;
        w.write_all(&self.n_traces.to_le_bytes())?;
        w.write_all(&self.n_samples.to_le_bytes())?;
        w.write_all(&self.assoc_len.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        if &h[..4] != TRACE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &h[..4])));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported trace file version {version}")));
        }
        let word = |i: usize| u32::from_le_bytes([h[i], h[i + 1], h[i + 2], h[i + 3]]);
        Ok(Self {
            param: ParamSet::from_id(h[6])?,
            flags: h[7],
            n_traces: word(8),
            n_samples: word(12),
            assoc_len: word(16),
        })
    }
}

/// An in-memory set of traces with associated data.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub param: ParamSet,
    pub protected: bool,
    pub non_interoperable: bool,
    assoc_len: usize,
    n_samples: usize,
    assoc: Vec<u8>,
    samples: Vec<f32>,
}

impl TraceSet {
    pub fn new(param: ParamSet, protected: bool, n_samples: usize) -> Self {
        Self {
            param,
            protected,
            non_interoperable: true,
            assoc_len: assoc_len(param.params()),
            n_samples,
            assoc: Vec::new(),
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, t: &Trace) -> Result<()> {
        if t.samples.len() != self.n_samples {
            return Err(Error::LengthMismatch(format!("trace has {} samples, set has {}", t.samples.len(), self.n_samples)));
        }
        if t.ct.params.set != self.param {
            return Err(Error::ParamMismatch(format!("{} trace in a {} set", t.ct.params.set, self.param)));
        }
        self.assoc.extend(encode_assoc(t.class, &t.ct));
        self.samples.extend_from_slice(&t.samples);
        Ok(())
    }

    pub fn n_traces(&self) -> usize {
        if self.n_samples == 0 {
            self.assoc.len() / self.assoc_len.max(1)
        } else {
            self.samples.len() / self.n_samples
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn assoc_len(&self) -> usize {
        self.assoc_len
    }

    pub fn trace(&self, i: usize) -> &[f32] {
        &self.samples[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn assoc(&self, i: usize) -> &[u8] {
        &self.assoc[i * self.assoc_len..(i + 1) * self.assoc_len]
    }

    pub fn ciphertext(&self, i: usize) -> Result<(TraceClass, Ciphertext)> {
        decode_assoc(self.param.params(), self.assoc(i))
    }

    /// Applies `f` to every sample.
    pub fn map_samples(&mut self, f: impl Fn(f32) -> f32) {
        for s in &mut self.samples {
            *s = f(*s);
        }
    }

    pub fn header(&self) -> TraceHeader {
        let mut flags = 0;
        if self.protected {
            flags |= FLAG_PROTECTED;
        }
        if self.non_interoperable {
            flags |= FLAG_NON_INTEROPERABLE;
        }
        TraceHeader {
            param: self.param,
            flags,
            n_traces: self.n_traces() as u32,
            n_samples: self.n_samples as u32,
            assoc_len: self.assoc_len as u32,
        }
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = TraceWriter::new(w, self.header())?;
        for i in 0..self.n_traces() {
            w.write_raw(self.assoc(i), self.trace(i))?;
        }
        w.finish()
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut reader = TraceReader::new(r)?;
        let h = reader.header();
        if h.assoc_len as usize != assoc_len(h.param.params()) {
            return Err(Error::Format(format!("assoc_len {} does not match {}", h.assoc_len, h.param)));
        }
        let mut set = TraceSet::new(h.param, h.protected(), h.n_samples as usize);
        set.non_interoperable = h.flags & FLAG_NON_INTEROPERABLE != 0;
        set.assoc.reserve(h.n_traces as usize * h.assoc_len as usize);
        set.samples.reserve(h.n_traces as usize * h.n_samples as usize);
        while let Some((a, s)) = reader.next_trace()? {
            set.assoc.extend_from_slice(a);
            set.samples.extend_from_slice(s);
        }
        Ok(set)
    }
}

/// Streaming SKTL writer. The trace count is fixed by the header.
pub struct TraceWriter<W: Write> {
    w: BufWriter<W>,
    header: TraceHeader,
    written: u32,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W, header: TraceHeader) -> Result<Self> {
        let mut w = BufWriter::new(w);
        header.write_to(&mut w)?;
        Ok(Self { w, header, written: 0 })
    }

    pub fn write_raw(&mut self, assoc: &[u8], samples: &[f32]) -> Result<()> {
        if assoc.len() != self.header.assoc_len as usize || samples.len() != self.header.n_samples as usize {
            return Err(Error::LengthMismatch("trace does not match header".into()));
        }
        if self.written == self.header.n_traces {
            return Err(Error::LengthMismatch("more traces than the header declares".into()));
        }
        self.w.write_all(assoc)?;
        for s in samples {
            self.w.write_all(&s.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn write(&mut self, t: &Trace) -> Result<()> {
        self.write_raw(&encode_assoc(t.class, &t.ct), &t.samples)
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.n_traces {
            return Err(Error::LengthMismatch(format!("wrote {} of {} traces", self.written, self.header.n_traces)));
        }
        self.w.flush()?;
        Ok(())
    }
}

/// Streaming SKTL reader.
pub struct TraceReader<R: Read> {
    r: BufReader<R>,
    header: TraceHeader,
    read: u32,
    assoc: Vec<u8>,
    raw: Vec<u8>,
    samples: Vec<f32>,
}

impl<R: Read> TraceReader<R> {
    pub fn new(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let header = TraceHeader::read_from(&mut r)?;
        Ok(Self {
            r,
            header,
            read: 0,
            assoc: vec![0; header.assoc_len as usize],
            raw: vec![0; 4 * header.n_samples as usize],
            samples: vec![0.0; header.n_samples as usize],
        })
    }

    pub fn header(&self) -> TraceHeader {
        self.header
    }

    pub fn next_trace(&mut self) -> Result<Option<(&[u8], &[f32])>> {
        if self.read == self.header.n_traces {
            return Ok(None);
        }
        let trunc = |e: std::io::Error| Error::Format(format!("truncated trace file: {e}"));
        self.r.read_exact(&mut self.assoc).map_err(trunc)?;
        self.r.read_exact(&mut self.raw).map_err(trunc)?;
        for (s, b) in self.samples.iter_mut().zip(self.raw.chunks_exact(4)) {
            *s = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        self.read += 1;
        Ok(Some((&self.assoc, &self.samples)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kem::keygen;

    fn setup(set: ParamSet) -> (KeyPair, RandomCiphertexts) {
        let p = set.params();
        let kp = keygen(p, &[7u8; 32]).unwrap();
        let cts = RandomCiphertexts { params: p, pk: kp.public.clone(), seed: 5, count: 6 };
        (kp, cts)
    }

    #[test]
    fn hd_basics() {
        assert_eq!(hd(0, 0, 12).unwrap(), 0);
        assert_eq!(hd(0x0f, 0, 12).unwrap(), 4);
        assert_eq!(hd(0xabc, 0xabc, 12).unwrap(), 0);
        assert!(hd(1 << 12, 0, 12).is_err());
        assert_eq!(hd((1 << 24) - 1, 0, 24).unwrap(), 24);
    }

    #[test]
    fn hd_mean_on_uniform_registers() {
        let mut rng = rng_from(3);
        use rand_core::RngCore;
        let n = 100_000;
        for width in [12u32, 24] {
            let mask = (1u32 << width) - 1;
            let xs: Vec<f64> = (0..n)
                .map(|_| hd(rng.next_u32() & mask, rng.next_u32() & mask, width).unwrap() as f64)
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sd = (width as f64 / 4.0).sqrt();
            assert!((mean - width as f64 / 2.0).abs() < 3.0 * sd / (n as f64).sqrt(), "width {width}: {mean}");
        }
    }

    #[test]
    fn noiseless_point2_samples_follow_register_values() {
        let (kp, cts) = setup(ParamSet::Kyber512);
        let (ct, _) = cts.get(0).unwrap();
        let sched = build_unprotected(kp.params);
        let (_, events) = decrypt_traced(&kp, &ct, &sched).unwrap();
        let reduce: Vec<&TracedEvent> = events.iter().filter(|e| e.event.op == Op::Reduce).collect();
        let samples = hd_samples(&events, LeakPoint::Point2);
        assert_eq!(samples.len(), reduce.len());
        let pop = |a: &[u32; 4], b: &[u32; 4]| a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
        assert_eq!(samples[0], pop(&[0; 4], &reduce[0].values));
        assert_eq!(samples[1], pop(&reduce[0].values, &reduce[1].values));
        for target in [LeakPoint::Point1, LeakPoint::Point2, LeakPoint::Point3, LeakPoint::All] {
            let s = hd_samples(&events, target);
            assert_eq!(s.len(), target.samples(kp.params));
            let max = match target {
                LeakPoint::Point1 | LeakPoint::All => 4 * 24,
                _ => 4 * 12,
            };
            assert!(s.iter().all(|&x| x <= max));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let (kp, cts) = setup(ParamSet::Kyber768);
        for factory in [ScheduleFactory::Unprotected, ScheduleFactory::Protected(TapDelays::default())] {
            let cfg = LeakageConfig::new(LeakPoint::Point2, 0.0, 11);
            let a = synthesize(&kp, &cts, factory, cfg).unwrap();
            let b = synthesize(&kp, &cts, factory, cfg).unwrap();
            assert_eq!(a, b);
            let noisy = LeakageConfig::new(LeakPoint::All, 2.0, 11);
            let a = synthesize(&kp, &cts, factory, noisy).unwrap();
            let b = synthesize(&kp, &cts, factory, noisy).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.n_samples(), LeakPoint::All.samples(kp.params));
        }
    }

    #[test]
    fn product_fast_path_matches_traced_decryption() {
        for set in ParamSet::ALL {
            let (kp, cts) = setup(set);
            for factory in [ScheduleFactory::Unprotected, ScheduleFactory::Protected(TapDelays::default())] {
                for target in [LeakPoint::Point1, LeakPoint::Point2] {
                    let synth = Synthesizer::new(&kp, &cts, factory, LeakageConfig::new(target, 0.0, 3)).unwrap();
                    for i in 0..cts.len() {
                        let fast: Vec<u32> = synth.trace(i).unwrap().samples.iter().map(|&x| x as u32).collect();
                        assert_eq!(fast, synth.reference_samples(i).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn empty_stream_and_bad_sigma() {
        let (kp, mut cts) = setup(ParamSet::Kyber512);
        cts.count = 0;
        let cfg = LeakageConfig::new(LeakPoint::Point2, 1.0, 1);
        assert!(matches!(synthesize(&kp, &cts, ScheduleFactory::Unprotected, cfg), Err(Error::Empty(_))));
        cts.count = 1;
        let bad = LeakageConfig::new(LeakPoint::Point2, -1.0, 1);
        assert!(synthesize(&kp, &cts, ScheduleFactory::Unprotected, bad).is_err());
    }

    #[test]
    fn unprotected_alignment_and_protected_misalignment() {
        let (kp, cts) = setup(ParamSet::Kyber512);
        let cfg = LeakageConfig::new(LeakPoint::Point2, 0.0, 1);
        let synth = Synthesizer::new(&kp, &cts, ScheduleFactory::Unprotected, cfg).unwrap();
        let order = |s: &Schedule| -> Vec<(u8, u8)> {
            s.events().iter().filter(|e| e.op == Op::Reduce).map(|e| (e.line, e.word_addr)).collect()
        };
        assert_eq!(order(&synth.schedule(0).unwrap()), order(&synth.schedule(5).unwrap()));
        let prot = Synthesizer::new(&kp, &cts, ScheduleFactory::Protected(TapDelays::default()), cfg).unwrap();
        assert_ne!(order(&prot.schedule(0).unwrap()), order(&prot.schedule(1).unwrap()));
    }

    #[test]
    fn sktl_roundtrip_and_header() {
        let (kp, cts) = setup(ParamSet::Kyber512);
        let cfg = LeakageConfig::new(LeakPoint::Point3, 1.5, 2);
        let set = synthesize(&kp, &cts, ScheduleFactory::Protected(TapDelays::default()), cfg).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SKTL");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(buf[6], 2);
        assert_eq!(buf[7], FLAG_PROTECTED | FLAG_NON_INTEROPERABLE);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 64);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize, assoc_len(kp.params));
        assert_eq!(buf.len(), HEADER_LEN + 6 * (assoc_len(kp.params) + 4 * 64));
        let back = TraceSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, set);
        let (class, ct) = back.ciphertext(3).unwrap();
        assert_eq!(class, TraceClass::Random);
        assert_eq!(ct, cts.get(3).unwrap().0);

        buf[4] = 9;
        assert!(matches!(TraceSet::read_from(buf.as_slice()), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(matches!(TraceSet::read_from(buf.as_slice()), Err(Error::Format(_))));
    }
}
