//! Arithmetic in `Z_q[X]/(X^256 + 1)` with `q = 3329`.
//!
//! Everything stays in plain `[0, q)` representation (no Montgomery form) so
//! that every intermediate is exactly the value a register in the modeled
//! datapath would hold. The NTT is Kyber's 7-layer incomplete transform: the
//! NTT domain holds 128 degree-1 residues `(c[2i], c[2i+1])` modulo
//! `X^2 - gamma_i`, in bit-reversed zeta order.

use crate::error::{Error, Result};

pub const N: usize = 256;
pub const Q: u16 = 3329;
const Q32: u32 = Q as u32;

/// Primitive 256-th root of unity mod q.
pub const ZETA: u16 = 17;

/// `128^-1 mod q`, the INTT output scaling.
pub const N_INV: u16 = 3303;

pub const INTT_STAGES: usize = 7;
pub const BUTTERFLIES_PER_STAGE: usize = N / 2;

/// Barrett constant `floor(2^32 / q)`.
///
/// This is the only reduction in the crate. For `x < 2^26` the quotient
/// estimate `(x * BARRETT_M) >> 32` is low by at most one, so a single
/// masked conditional subtraction finishes the job. The leakage-point-2
/// register holds exactly this function's output.
pub const BARRETT_M: u64 = (1u64 << 32) / Q as u64;
pub const BARRETT_SHIFT: u32 = 32;
/// Exclusive upper bound on [`reduce`] inputs.
pub const REDUCE_BOUND: u32 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Time,
    Ntt,
}

const fn pow_mod(base: u32, mut exp: u32) -> u32 {
    let mut acc = 1u64;
    let mut b = base as u64 % Q as u64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % Q as u64;
        }
        b = b * b % Q as u64;
        exp >>= 1;
    }
    acc as u32
}

const fn bitrev7(x: usize) -> u32 {
    let mut r = 0u32;
    let mut i = 0;
    while i < 7 {
        r |= (((x >> i) & 1) as u32) << (6 - i);
        i += 1;
    }
    r
}

/// Twiddle tables for the NTT and its inverse.
#[derive(Debug)]
pub struct NttTables {
    /// `zetas[i] = ZETA^bitrev7(i)`.
    pub zetas: [u16; 128],
    pub zetas_inv: [u16; 128],
    /// Residue moduli: pair `i` lives in `Z_q[X]/(X^2 - gammas[i])`.
    pub gammas: [u16; 128],
    pub n_inv: u16,
}

impl NttTables {
    const fn compute() -> Self {
        let mut zetas = [0u16; 128];
        let mut zetas_inv = [0u16; 128];
        let mut gammas = [0u16; 128];
        let mut i = 0;
        while i < 128 {
            let z = pow_mod(ZETA as u32, bitrev7(i));
            zetas[i] = z as u16;
            zetas_inv[i] = pow_mod(z, Q as u32 - 2) as u16;
            gammas[i] = pow_mod(ZETA as u32, 2 * bitrev7(i) + 1) as u16;
            i += 1;
        }
        Self { zetas, zetas_inv, gammas, n_inv: N_INV }
    }

    /// Checks the algebraic facts the transforms rely on.
    pub fn verify(&self) -> bool {
        let half_turn = pow_mod(ZETA as u32, 128) == Q32 - 1;
        let full_turn = pow_mod(ZETA as u32, 256) == 1;
        let scaling = (self.n_inv as u32 * 128) % Q32 == 1;
        let inverses = self
            .zetas
            .iter()
            .zip(self.zetas_inv.iter())
            .all(|(&z, &zi)| (z as u32 * zi as u32) % Q32 == 1);
        half_turn && full_turn && scaling && inverses
    }
}

pub static TABLES: NttTables = NttTables::compute();

/// Barrett reduction without the range check. Callers guarantee
/// `x < REDUCE_BOUND`.
#[inline]
pub fn barrett(x: u32) -> u16 {
    debug_assert!(x < REDUCE_BOUND);
    let t = ((x as u64 * BARRETT_M) >> BARRETT_SHIFT) as u32;
    let r = x - t * Q32;
    // r in [0, 2q): subtract q under a mask instead of branching.
    let over = ((r >= Q32) as u32).wrapping_neg();
    (r - (Q32 & over)) as u16
}

/// `x mod q` for `x < 2^26`.
pub fn reduce(x: u32) -> Result<u16> {
    if x >= REDUCE_BOUND {
        return Err(Error::OutOfRange { what: "reduce input", value: x as u64 });
    }
    Ok(barrett(x))
}

#[inline]
pub(crate) fn mul_mod(a: u16, b: u16) -> u16 {
    barrett(a as u32 * b as u32)
}

#[inline]
pub(crate) fn add_mod(a: u16, b: u16) -> u16 {
    let s = a + b;
    if s >= Q {
        s - Q
    } else {
        s
    }
}

#[inline]
pub(crate) fn sub_mod(a: u16, b: u16) -> u16 {
    if a >= b {
        a - b
    } else {
        a + Q - b
    }
}

fn check_bits(d: u8) -> Result<()> {
    match d {
        1 | 4 | 5 | 10 | 11 => Ok(()),
        _ => Err(Error::UnsupportedBits(d)),
    }
}

/// `round(2^d * x / q) mod 2^d`, ties rounded up.
pub fn compress(x: u16, d: u8) -> Result<u16> {
    check_bits(d)?;
    if x >= Q {
        return Err(Error::OutOfRange { what: "compress input", value: x as u64 });
    }
    let num = ((x as u32) << (d + 1)) + Q32;
    Ok(((num / (2 * Q32)) & ((1 << d) - 1)) as u16)
}

/// `round(q * y / 2^d)`, ties rounded up.
pub fn decompress(y: u16, d: u8) -> Result<u16> {
    check_bits(d)?;
    if y as u32 >= 1 << d {
        return Err(Error::OutOfRange { what: "decompress input", value: y as u64 });
    }
    Ok(((y as u32 * Q32 + (1 << (d - 1))) >> d) as u16)
}

#[derive(Clone, PartialEq, Eq)]
pub struct Poly {
    coeffs: [u16; N],
    domain: Domain,
}

impl std::fmt::Debug for Poly {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Poly[{:?}]({:?}..)", self.domain, &self.coeffs[..8])
    }
}

impl Poly {
    pub fn zero(domain: Domain) -> Self {
        Self { coeffs: [0; N], domain }
    }

    pub fn from_coeffs(coeffs: [u16; N], domain: Domain) -> Result<Self> {
        if let Some(&bad) = coeffs.iter().find(|&&c| c >= Q) {
            return Err(Error::OutOfRange { what: "coefficient", value: bad as u64 });
        }
        Ok(Self { coeffs, domain })
    }

    pub fn from_slice(coeffs: &[u16], domain: Domain) -> Result<Self> {
        let arr: [u16; N] = coeffs
            .try_into()
            .map_err(|_| Error::LengthMismatch(format!("polynomial needs {N} coefficients, got {}", coeffs.len())))?;
        Self::from_coeffs(arr, domain)
    }

    pub fn coeffs(&self) -> &[u16; N] {
        &self.coeffs
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    fn expect(&self, domain: Domain) -> Result<()> {
        if self.domain != domain {
            return Err(Error::DomainMismatch { expected: domain, found: self.domain });
        }
        Ok(())
    }
}

pub fn ntt(p: &Poly) -> Result<Poly> {
    p.expect(Domain::Time)?;
    let mut r = p.coeffs;
    let mut k = 1;
    let mut len = 128;
    while len >= 2 {
        for start in (0..N).step_by(2 * len) {
            let zeta = TABLES.zetas[k];
            k += 1;
            for j in start..start + len {
                let t = mul_mod(zeta, r[j + len]);
                r[j + len] = sub_mod(r[j], t);
                r[j] = add_mod(r[j], t);
            }
        }
        len >>= 1;
    }
    Ok(Poly { coeffs: r, domain: Domain::Ntt })
}

/// Coefficient positions touched by butterfly `index` of INTT stage `stage`.
///
/// Stage 0 has span 2, stage 6 has span 128. Butterflies of one stage touch
/// disjoint pairs, so any order within a stage gives the same result.
pub fn intt_butterfly_positions(stage: usize, index: usize) -> (usize, usize, usize) {
    let len = 2usize << stage;
    let block = index / len;
    let j = block * 2 * len + index % len;
    let zeta_idx = N / 2 / len + block;
    (j, j + len, zeta_idx)
}

/// Applies one Gentleman-Sande butterfly of the inverse transform in place and
/// returns the two values written back.
#[inline]
pub fn intt_butterfly(coeffs: &mut [u16; N], stage: usize, index: usize) -> (u16, u16) {
    let (lo, hi, z) = intt_butterfly_positions(stage, index);
    let a = coeffs[lo];
    let b = coeffs[hi];
    let top = add_mod(a, b);
    let bottom = mul_mod(sub_mod(a, b), TABLES.zetas_inv[z]);
    coeffs[lo] = top;
    coeffs[hi] = bottom;
    (top, bottom)
}

pub fn intt(p: &Poly) -> Result<Poly> {
    p.expect(Domain::Ntt)?;
    let mut r = p.coeffs;
    for stage in 0..INTT_STAGES {
        for index in 0..BUTTERFLIES_PER_STAGE {
            intt_butterfly(&mut r, stage, index);
        }
    }
    for c in r.iter_mut() {
        *c = mul_mod(*c, N_INV);
    }
    Ok(Poly { coeffs: r, domain: Domain::Time })
}

/// `(a0 + a1 X)(b0 + b1 X) mod (X^2 - gamma)`.
#[inline]
pub fn basemul_pair(a: (u16, u16), b: (u16, u16), gamma: u16) -> (u16, u16) {
    let c0 = add_mod(mul_mod(a.0, b.0), mul_mod(mul_mod(a.1, b.1), gamma));
    let c1 = add_mod(mul_mod(a.0, b.1), mul_mod(a.1, b.0));
    (c0, c1)
}

pub fn basemul(a: &Poly, b: &Poly) -> Result<Poly> {
    a.expect(Domain::Ntt)?;
    b.expect(Domain::Ntt)?;
    let mut r = [0u16; N];
    for i in 0..N / 2 {
        let (c0, c1) = basemul_pair(
            (a.coeffs[2 * i], a.coeffs[2 * i + 1]),
            (b.coeffs[2 * i], b.coeffs[2 * i + 1]),
            TABLES.gammas[i],
        );
        r[2 * i] = c0;
        r[2 * i + 1] = c1;
    }
    Ok(Poly { coeffs: r, domain: Domain::Ntt })
}

fn zip_with(a: &Poly, b: &Poly, f: impl Fn(u16, u16) -> u16) -> Result<Poly> {
    b.expect(a.domain)?;
    let mut r = [0u16; N];
    for (i, out) in r.iter_mut().enumerate() {
        *out = f(a.coeffs[i], b.coeffs[i]);
    }
    Ok(Poly { coeffs: r, domain: a.domain })
}

pub fn sub(a: &Poly, b: &Poly) -> Result<Poly> {
    zip_with(a, b, sub_mod)
}

pub fn add(a: &Poly, b: &Poly) -> Result<Poly> {
    zip_with(a, b, add_mod)
}

/// A vector of `k` polynomials in a common domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolyVec(Vec<Poly>);

impl PolyVec {
    pub fn new(polys: Vec<Poly>) -> Result<Self> {
        if !(2..=4).contains(&polys.len()) {
            return Err(Error::OutOfRange { what: "vector length k", value: polys.len() as u64 });
        }
        let d = polys[0].domain;
        if let Some(p) = polys.iter().find(|p| p.domain != d) {
            return Err(Error::DomainMismatch { expected: d, found: p.domain });
        }
        Ok(Self(polys))
    }

    pub fn polys(&self) -> &[Poly] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn domain(&self) -> Domain {
        self.0[0].domain
    }

    pub fn ntt(&self) -> Result<Self> {
        self.0.iter().map(ntt).collect::<Result<Vec<_>>>().map(Self)
    }

    pub fn intt(&self) -> Result<Self> {
        self.0.iter().map(intt).collect::<Result<Vec<_>>>().map(Self)
    }

    /// `sum_i a_i o b_i` in the NTT domain.
    pub fn inner_product(&self, other: &Self) -> Result<Poly> {
        if self.k() != other.k() {
            return Err(Error::ParamMismatch(format!("vector lengths {} and {}", self.k(), other.k())));
        }
        let mut acc = Poly::zero(Domain::Ntt);
        for (a, b) in self.0.iter().zip(&other.0) {
            acc = add(&acc, &basemul(a, b)?)?;
        }
        Ok(acc)
    }
}
