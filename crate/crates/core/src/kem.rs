//! Kyber CPA decryption plus just enough key generation and encryption to
//! produce valid `(key, ciphertext, message)` triples.
//!
//! Sampling uses the crate PRNG instead of SHAKE, so keys and ciphertexts are
//! self-consistent but NOT interoperable with FIPS 203 test vectors. Files
//! written from here carry the `non_interoperable` flag.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::prng::Rng;
use crate::ring::{
    self, add, barrett, basemul_pair, compress, decompress, intt_butterfly, Domain, Poly, PolyVec,
    N, N_INV, Q, TABLES,
};
use crate::sched::{Op, Schedule, ScheduleEvent, COEFFS_PER_WORD};

pub const SEED_BYTES: usize = 32;
pub const MESSAGE_BYTES: usize = 32;

pub type Message = [u8; MESSAGE_BYTES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSet {
    Kyber512,
    Kyber768,
    Kyber1024,
}

impl ParamSet {
    pub const ALL: [ParamSet; 3] = [ParamSet::Kyber512, ParamSet::Kyber768, ParamSet::Kyber1024];

    pub fn params(self) -> KemParams {
        match self {
            ParamSet::Kyber512 => KemParams { set: self, k: 2, eta1: 3, eta2: 2, du: 10, dv: 4 },
            ParamSet::Kyber768 => KemParams { set: self, k: 3, eta1: 2, eta2: 2, du: 10, dv: 4 },
            ParamSet::Kyber1024 => KemParams { set: self, k: 4, eta1: 2, eta2: 2, du: 11, dv: 5 },
        }
    }

    /// Identifier used in file headers; equal to `k`.
    pub fn id(self) -> u8 {
        self.params().k as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            2 => Ok(ParamSet::Kyber512),
            3 => Ok(ParamSet::Kyber768),
            4 => Ok(ParamSet::Kyber1024),
            _ => Err(Error::Format(format!("unknown parameter id {id}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamSet::Kyber512 => "kyber512",
            ParamSet::Kyber768 => "kyber768",
            ParamSet::Kyber1024 => "kyber1024",
        }
    }
}

impl fmt::Display for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kyber512" => Ok(ParamSet::Kyber512),
            "kyber768" => Ok(ParamSet::Kyber768),
            "kyber1024" => Ok(ParamSet::Kyber1024),
            _ => Err(Error::Format(format!("unknown parameter set {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KemParams {
    pub set: ParamSet,
    pub k: usize,
    pub eta1: u32,
    pub eta2: u32,
    pub du: u8,
    pub dv: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub t_hat: PolyVec,
    pub rho: [u8; SEED_BYTES],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub params: KemParams,
    /// Unpacked secret key, NTT domain.
    pub s_hat: PolyVec,
    pub public: PublicKey,
}

/// Ciphertext in unpacked (decompressed) form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub params: KemParams,
    pub u: PolyVec,
    pub v: Poly,
}

fn seed_array(seed: &[u8]) -> Result<[u8; SEED_BYTES]> {
    seed.try_into().map_err(|_| Error::SeedLength { expected: SEED_BYTES, found: seed.len() })
}

fn sample_cbd(rng: &mut Rng, eta: u32) -> Poly {
    let mask = (1u32 << eta) - 1;
    let mut c = [0u16; N];
    for x in c.iter_mut() {
        let bits = rng.next_u32();
        let a = (bits & mask).count_ones() as u16;
        let b = ((bits >> eta) & mask).count_ones() as u16;
        *x = (a + Q - b) % Q;
    }
    Poly::from_coeffs(c, Domain::Time).expect("CBD output is reduced")
}

fn sample_cbd_vec(rng: &mut Rng, k: usize, eta: u32) -> PolyVec {
    PolyVec::new((0..k).map(|_| sample_cbd(rng, eta)).collect()).expect("k in 2..=4")
}

/// Entry `(i, j)` of the public matrix, sampled directly in the NTT domain.
fn matrix_entry(rho: &[u8; SEED_BYTES], i: usize, j: usize) -> Poly {
    let mut seed = *rho;
    seed[0] ^= i as u8;
    seed[1] ^= j as u8;
    let mut rng = Rng::from_seed(seed);
    let mut c = [0u16; N];
    let mut filled = 0;
    while filled < N {
        let w = rng.next_u32();
        for cand in [(w & 0xfff) as u16, ((w >> 12) & 0xfff) as u16] {
            if cand < Q && filled < N {
                c[filled] = cand;
                filled += 1;
            }
        }
    }
    Poly::from_coeffs(c, Domain::Ntt).expect("rejection sampled below q")
}

fn matrix_row(rho: &[u8; SEED_BYTES], k: usize, i: usize, transpose: bool) -> PolyVec {
    let row = (0..k)
        .map(|j| if transpose { matrix_entry(rho, j, i) } else { matrix_entry(rho, i, j) })
        .collect();
    PolyVec::new(row).expect("k in 2..=4")
}

pub fn keygen(params: KemParams, seed: &[u8]) -> Result<KeyPair> {
    let mut rng = Rng::from_seed(seed_array(seed)?);
    let mut rho = [0u8; SEED_BYTES];
    rng.fill_bytes(&mut rho);
    let s = sample_cbd_vec(&mut rng, params.k, params.eta1);
    let e = sample_cbd_vec(&mut rng, params.k, params.eta1);
    let s_hat = s.ntt()?;
    let e_hat = e.ntt()?;
    let t = (0..params.k)
        .map(|i| add(&matrix_row(&rho, params.k, i, false).inner_product(&s_hat)?, &e_hat.polys()[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(KeyPair { params, s_hat, public: PublicKey { t_hat: PolyVec::new(t)?, rho } })
}

pub fn message_to_poly(m: &Message) -> Poly {
    let mut c = [0u16; N];
    let one = decompress(1, 1).expect("d=1 supported");
    for (i, x) in c.iter_mut().enumerate() {
        if (m[i / 8] >> (i % 8)) & 1 == 1 {
            *x = one;
        }
    }
    Poly::from_coeffs(c, Domain::Time).expect("reduced")
}

fn roundtrip_compress(p: &Poly, d: u8) -> Result<Poly> {
    let mut c = [0u16; N];
    for (out, &x) in c.iter_mut().zip(p.coeffs()) {
        *out = decompress(compress(x, d)?, d)?;
    }
    Poly::from_coeffs(c, Domain::Time)
}

pub fn encrypt(params: KemParams, pk: &PublicKey, m: &Message, seed: &[u8]) -> Result<Ciphertext> {
    if pk.t_hat.k() != params.k {
        return Err(Error::ParamMismatch(format!("public key has k={}, params k={}", pk.t_hat.k(), params.k)));
    }
    let mut rng = Rng::from_seed(seed_array(seed)?);
    let r = sample_cbd_vec(&mut rng, params.k, params.eta1);
    let e1 = sample_cbd_vec(&mut rng, params.k, params.eta2);
    let e2 = sample_cbd(&mut rng, params.eta2);
    let r_hat = r.ntt()?;

    let mut u = Vec::with_capacity(params.k);
    for i in 0..params.k {
        let at_r = matrix_row(&pk.rho, params.k, i, true).inner_product(&r_hat)?;
        let ui = add(&ring::intt(&at_r)?, &e1.polys()[i])?;
        u.push(roundtrip_compress(&ui, params.du)?);
    }
    let v = ring::intt(&pk.t_hat.inner_product(&r_hat)?)?;
    let v = add(&add(&v, &e2)?, &message_to_poly(m))?;
    Ok(Ciphertext { params, u: PolyVec::new(u)?, v: roundtrip_compress(&v, params.dv)? })
}

fn check_pair(sk: &KeyPair, ct: &Ciphertext) -> Result<()> {
    if sk.params.k != ct.params.k || sk.s_hat.k() != ct.u.k() {
        return Err(Error::ParamMismatch(format!(
            "key is {} but ciphertext is {}",
            sk.params.set, ct.params.set
        )));
    }
    Ok(())
}

fn poly_to_message(p: &Poly) -> Result<Message> {
    let mut m = [0u8; MESSAGE_BYTES];
    for (i, &x) in p.coeffs().iter().enumerate() {
        m[i / 8] |= (compress(x, 1)? as u8) << (i % 8);
    }
    Ok(m)
}

/// `Compress_q(v - INTT(s_hat^T o NTT(u)), 1)`.
pub fn decrypt(sk: &KeyPair, ct: &Ciphertext) -> Result<Message> {
    check_pair(sk, ct)?;
    let w = ring::intt(&sk.s_hat.inner_product(&ct.u.ntt()?)?)?;
    poly_to_message(&ring::sub(&ct.v, &w)?)
}

/// Copy of `sk` with NTT-domain secret coefficient `index` (flattened
/// `line * 256 + c`) moved to another value. Decryption with it fails for
/// almost every ciphertext.
pub fn corrupt_secret(sk: &KeyPair, index: usize) -> Result<KeyPair> {
    let k = sk.params.k;
    if index >= k * N {
        return Err(Error::OutOfRange { what: "secret coefficient", value: index as u64 });
    }
    let mut polys = sk.s_hat.polys().to_vec();
    let mut c = *polys[index / N].coeffs();
    c[index % N] = ring::add_mod(c[index % N], (Q + 1) / 2);
    polys[index / N] = Poly::from_coeffs(c, Domain::Ntt)?;
    Ok(KeyPair { s_hat: PolyVec::new(polys)?, ..sk.clone() })
}

/// Register values produced by one datapath event.
///
/// Each event touches one memory word, i.e. four coefficients, so four
/// register lanes update together:
/// - `Pwm`: raw 24-bit products `s_hat[c] * u_hat[c]` (leakage point 1)
/// - `Reduce`: the same products reduced mod q (leakage point 2)
/// - `Butterfly`: the two outputs of each of the group's two butterflies
/// - `Sub`: `v[c] - (w[c] mod q)` (leakage point 3)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TracedEvent {
    pub event: ScheduleEvent,
    pub values: [u32; COEFFS_PER_WORD],
}

/// Products `s_hat[line] o u_hat[line]` of one memory word, raw or reduced
/// mod q.
#[inline]
pub fn word_products(sk: &KeyPair, u_hat: &PolyVec, line: usize, word: usize, reduced: bool) -> [u32; COEFFS_PER_WORD] {
    let base = word * COEFFS_PER_WORD;
    let sl = &sk.s_hat.polys()[line].coeffs()[base..base + COEFFS_PER_WORD];
    let ul = &u_hat.polys()[line].coeffs()[base..base + COEFFS_PER_WORD];
    std::array::from_fn(|j| {
        let p = sl[j] as u32 * ul[j] as u32;
        if reduced {
            barrett(p) as u32
        } else {
            p
        }
    })
}

/// Runs the decryption datapath in the exact order of `schedule`, exposing
/// the architectural register values at every event.
pub fn decrypt_traced(sk: &KeyPair, ct: &Ciphertext, schedule: &Schedule) -> Result<(Message, Vec<TracedEvent>)> {
    check_pair(sk, ct)?;
    if schedule.params().k != sk.params.k {
        return Err(Error::ScheduleMismatch(format!(
            "schedule built for {}, key is {}",
            schedule.params().set,
            sk.params.set
        )));
    }
    schedule.ensure_valid()?;

    let u_hat = ct.u.ntt()?;
    let s = sk.s_hat.polys();
    let u = u_hat.polys();
    let v = ct.v.coeffs();
    let mut acc = [0u16; N];
    let mut msg = [0u8; MESSAGE_BYTES];
    let mut out = Vec::with_capacity(schedule.len());

    for &event in schedule.events() {
        let base = event.word_addr as usize * COEFFS_PER_WORD;
        let mut values = [0u32; COEFFS_PER_WORD];
        match event.op {
            Op::Pwm => {
                values = word_products(sk, &u_hat, event.line as usize, event.word_addr as usize, false);
            }
            Op::Reduce => {
                values = word_products(sk, &u_hat, event.line as usize, event.word_addr as usize, true);
                let (sl, ul) = (s[event.line as usize].coeffs(), u[event.line as usize].coeffs());
                for pair in 0..COEFFS_PER_WORD / 2 {
                    let c = base + 2 * pair;
                    let (c0, c1) = basemul_pair((sl[c], sl[c + 1]), (ul[c], ul[c + 1]), TABLES.gammas[c / 2]);
                    acc[c] = ring::add_mod(acc[c], c0);
                    acc[c + 1] = ring::add_mod(acc[c + 1], c1);
                }
            }
            Op::Butterfly => {
                let stage = event.stage.expect("validated") as usize;
                let first = 2 * event.word_addr as usize;
                let (a, b) = intt_butterfly(&mut acc, stage, first);
                let (c, d) = intt_butterfly(&mut acc, stage, first + 1);
                values = [a as u32, b as u32, c as u32, d as u32];
            }
            Op::Sub => {
                for (j, val) in values.iter_mut().enumerate() {
                    let c = base + j;
                    let diff = ring::sub_mod(v[c], ring::mul_mod(acc[c], N_INV));
                    *val = diff as u32;
                    msg[c / 8] |= (compress(diff, 1)? as u8) << (c % 8);
                }
            }
        }
        out.push(TracedEvent { event, values });
    }
    Ok((msg, out))
}

// --- file codecs -----------------------------------------------------------

pub const KEY_MAGIC: &[u8; 4] = b"SKKY";
pub const CT_MAGIC: &[u8; 4] = b"SKCT";
pub const CODEC_VERSION: u16 = 1;
pub const FLAG_NON_INTEROPERABLE: u8 = 0b10;

fn write_header(w: &mut impl Write, magic: &[u8; 4], set: ParamSet) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&CODEC_VERSION.to_le_bytes())?;
    w.write_all(&[set.id(), FLAG_NON_INTEROPERABLE])?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<ParamSet> {
    let mut h = [0u8; 8];
    r.read_exact(&mut h)?;
    if &h[..4] != magic {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", &h[..4], magic)));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != CODEC_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    ParamSet::from_id(h[6])
}

pub(crate) fn write_poly(w: &mut impl Write, p: &Poly) -> Result<()> {
    let mut buf = [0u8; 2 * N];
    for (chunk, c) in buf.chunks_exact_mut(2).zip(p.coeffs()) {
        chunk.copy_from_slice(&c.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_poly(r: &mut impl Read, domain: Domain) -> Result<Poly> {
    let mut buf = [0u8; 2 * N];
    r.read_exact(&mut buf)?;
    let mut c = [0u16; N];
    for (x, chunk) in c.iter_mut().zip(buf.chunks_exact(2)) {
        *x = u16::from_le_bytes([chunk[0], chunk[1]]);
    }
    Poly::from_coeffs(c, domain).map_err(|e| Error::Format(e.to_string()))
}

fn read_polyvec(r: &mut impl Read, k: usize, domain: Domain) -> Result<PolyVec> {
    PolyVec::new((0..k).map(|_| read_poly(r, domain)).collect::<Result<Vec<_>>>()?)
}

impl KeyPair {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, KEY_MAGIC, self.params.set)?;
        for p in self.s_hat.polys().iter().chain(self.public.t_hat.polys()) {
            write_poly(w, p)?;
        }
        w.write_all(&self.public.rho)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let params = read_header(r, KEY_MAGIC)?.params();
        let s_hat = read_polyvec(r, params.k, Domain::Ntt)?;
        let t_hat = read_polyvec(r, params.k, Domain::Ntt)?;
        let mut rho = [0u8; SEED_BYTES];
        r.read_exact(&mut rho)?;
        Ok(Self { params, s_hat, public: PublicKey { t_hat, rho } })
    }
}

impl Ciphertext {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, CT_MAGIC, self.params.set)?;
        self.write_coeffs(w)
    }

    /// Body only: `u` then `v` as little-endian u16 coefficients.
    pub fn write_coeffs(&self, w: &mut impl Write) -> Result<()> {
        for p in self.u.polys() {
            write_poly(w, p)?;
        }
        write_poly(w, &self.v)
    }

    pub fn coeff_bytes(params: KemParams) -> usize {
        (params.k + 1) * 2 * N
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let params = read_header(r, CT_MAGIC)?.params();
        Self::read_coeffs(r, params)
    }

    pub fn read_coeffs(r: &mut impl Read, params: KemParams) -> Result<Self> {
        let u = read_polyvec(r, params.k, Domain::Time)?;
        let v = read_poly(r, Domain::Time)?;
        Ok(Self { params, u, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::rng_from;
    use crate::sched::{build_protected, build_unprotected, TapDelays};
    use crate::prng::SeedStream;

    fn seed(b: u8) -> [u8; 32] {
        [b; 32]
    }

    fn random_message(rng: &mut Rng) -> Message {
        let mut m = [0u8; 32];
        rng.fill_bytes(&mut m);
        m
    }

    #[test]
    fn eta1_follows_k() {
        for set in ParamSet::ALL {
            let p = set.params();
            assert_eq!(p.eta1, if p.k == 2 { 3 } else { 2 });
            assert_eq!(ParamSet::from_id(set.id()).unwrap(), set);
            assert_eq!(set.name().parse::<ParamSet>().unwrap(), set);
        }
    }

    #[test]
    fn seed_length_is_checked() {
        let p = ParamSet::Kyber512.params();
        assert!(matches!(keygen(p, &[0u8; 31]), Err(Error::SeedLength { expected: 32, found: 31 })));
        let kp = keygen(p, &seed(1)).unwrap();
        assert!(encrypt(p, &kp.public, &[0; 32], &[0u8; 33]).is_err());
    }

    #[test]
    fn distinct_seeds_give_distinct_secrets() {
        let p = ParamSet::Kyber768.params();
        let a = keygen(p, &seed(1)).unwrap();
        let b = keygen(p, &seed(2)).unwrap();
        assert_ne!(a.s_hat, b.s_hat);
        assert_eq!(a, keygen(p, &seed(1)).unwrap());
    }

    #[test]
    fn roundtrip_all_params() {
        let mut rng = rng_from(11);
        for set in ParamSet::ALL {
            let p = set.params();
            let kp = keygen(p, &seed(set.id())).unwrap();
            for i in 0..200u32 {
                let m = random_message(&mut rng);
                let mut coins = [0u8; 32];
                coins[..4].copy_from_slice(&i.to_le_bytes());
                let ct = encrypt(p, &kp.public, &m, &coins).unwrap();
                assert_eq!(decrypt(&kp, &ct).unwrap(), m);
            }
        }
    }

    #[test]
    fn degenerate_ciphertexts() {
        let p = ParamSet::Kyber512.params();
        let kp = keygen(p, &seed(3)).unwrap();
        let zero_u = PolyVec::new(vec![Poly::zero(Domain::Time); 2]).unwrap();
        let ct = Ciphertext { params: p, u: zero_u.clone(), v: Poly::zero(Domain::Time) };
        assert_eq!(decrypt(&kp, &ct).unwrap(), [0u8; 32]);
        let ct = Ciphertext { params: p, u: zero_u, v: message_to_poly(&[0xff; 32]) };
        assert_eq!(decrypt(&kp, &ct).unwrap(), [0xff; 32]);
    }

    #[test]
    fn k_mismatch_is_rejected() {
        let kp = keygen(ParamSet::Kyber512.params(), &seed(4)).unwrap();
        let other = keygen(ParamSet::Kyber768.params(), &seed(4)).unwrap();
        let ct = encrypt(other.params, &other.public, &[1; 32], &seed(5)).unwrap();
        assert!(matches!(decrypt(&kp, &ct), Err(Error::ParamMismatch(_))));
        let sched = build_unprotected(ParamSet::Kyber768.params());
        assert!(decrypt_traced(&kp, &ct, &sched).is_err());
    }

    #[test]
    fn traced_matches_reference() {
        let p = ParamSet::Kyber768.params();
        let kp = keygen(p, &seed(6)).unwrap();
        let m = [0x5a; 32];
        let ct = encrypt(p, &kp.public, &m, &seed(7)).unwrap();
        let plain = build_unprotected(p);
        let (m0, ev0) = decrypt_traced(&kp, &ct, &plain).unwrap();
        assert_eq!(m0, m);
        assert_eq!(ev0.len(), plain.len());

        let mut seeds = SeedStream::new(99);
        let shuffled = build_protected(p, &mut seeds, TapDelays::default()).unwrap();
        let (m1, ev1) = decrypt_traced(&kp, &ct, &shuffled).unwrap();
        assert_eq!(m1, m);
        assert_ne!(ev0, ev1);

        let key = |e: &TracedEvent| (e.event.op, e.event.line, e.event.word_addr, e.event.stage, e.values);
        let mut a: Vec<_> = ev0.iter().map(key).collect();
        let mut b: Vec<_> = ev1.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn leakage_value_domains() {
        let p = ParamSet::Kyber1024.params();
        let kp = keygen(p, &seed(8)).unwrap();
        let ct = encrypt(p, &kp.public, &[3; 32], &seed(9)).unwrap();
        let (_, events) = decrypt_traced(&kp, &ct, &build_unprotected(p)).unwrap();
        for e in events {
            for v in e.values {
                match e.event.op {
                    Op::Pwm => assert!(v < 1 << 24),
                    _ => assert!(v < Q as u32),
                }
            }
        }
    }

    #[test]
    fn codecs_roundtrip() {
        let p = ParamSet::Kyber1024.params();
        let kp = keygen(p, &seed(10)).unwrap();
        let mut buf = Vec::new();
        kp.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], KEY_MAGIC);
        assert_eq!(buf[6], 4);
        assert_eq!(buf[7] & FLAG_NON_INTEROPERABLE, FLAG_NON_INTEROPERABLE);
        assert_eq!(KeyPair::read_from(&mut buf.as_slice()).unwrap(), kp);

        let ct = encrypt(p, &kp.public, &[9; 32], &seed(11)).unwrap();
        let mut buf = Vec::new();
        ct.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + Ciphertext::coeff_bytes(p));
        assert_eq!(Ciphertext::read_from(&mut buf.as_slice()).unwrap(), ct);

        buf[0] = b'X';
        assert!(matches!(Ciphertext::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
