//! Cycle-stepped model of the random permutation generator (RPG).
//!
//! The generator produces a permutation of `0x00..=0x3f` in 454 cycles:
//!
//! 1. `Init` (384 cycles): a 32-bit LFSR emits one bit per cycle; every six
//!    bits are packed MSB-first into an index and pushed into the 64-deep
//!    FIFO. `REG` is loaded with [`REG_INIT`] in parallel.
//! 2. `Shuffle12` (12 cycles): pop an index, map it into `[0, 0x28]` with
//!    [`adjust_idx0`], push `REG[idx]` to the FIFO and refill `REG[idx]`
//!    from `REG[rest]`, `rest = 63 - k`.
//! 3. `Shuffle52` (52 cycles): the same with [`adjust_idx1`], which keeps the
//!    index within `[0, rest]`.
//! 4. `Shift6` (6 cycles): rotate the FIFO six places.
//!
//! The FIFO is then read front to back. Stage one only ever selects from the
//! low 41 REG slots, whose contents (and refills) exclude the 11
//! [`RESTRICTED`] addresses, so output positions `0..6` and `58..64` never
//! carry one of them.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};

pub const PERM_LEN: usize = 64;
pub const INIT_CYCLES: u32 = 6 * PERM_LEN as u32;
pub const STAGE_ONE_ROUNDS: u8 = 12;
pub const SHIFT_ROUNDS: u8 = 6;
/// Total latency of one permutation.
pub const RPG_CYCLES: u32 = INIT_CYCLES + PERM_LEN as u32 + SHIFT_ROUNDS as u32;

/// Stage-one index bound (hexadecimal 28).
pub const STAGE_ONE_BOUND: u8 = 0x28;

/// Initial REG contents: `0b..=33` ascending, `3f..=39`, `0a..=00`, `38..=34`.
pub const REG_INIT: [u8; PERM_LEN] = {
    let mut reg = [0u8; PERM_LEN];
    let mut i = 0;
    while i < 41 {
        reg[i] = 0x0b + i as u8;
        i += 1;
    }
    while i < 48 {
        reg[i] = 0x3f - (i - 41) as u8;
        i += 1;
    }
    while i < 59 {
        reg[i] = 0x0a - (i - 48) as u8;
        i += 1;
    }
    while i < 64 {
        reg[i] = 0x38 - (i - 59) as u8;
        i += 1;
    }
    reg
};

/// Addresses that must not appear in the first or last six output slots.
pub const RESTRICTED: [u8; 11] = [0x07, 0x08, 0x09, 0x0a, 0x39, 0x3a, 0x3b, 0x3c, 0x3d, 0x3e, 0x3f];

pub fn is_restricted(v: u8) -> bool {
    RESTRICTED.contains(&v)
}

/// Stage-one index adjustment: `idx` if `idx <= 0x28`, else `idx - 0x28`.
///
/// The ternary in the original processing schedule has its arms swapped
/// relative to this; only this form keeps the result inside `[0, 0x28]`.
#[inline]
pub fn adjust_idx0(idx: u8) -> u8 {
    debug_assert!(idx < 64);
    if idx <= STAGE_ONE_BOUND {
        idx
    } else {
        idx - STAGE_ONE_BOUND
    }
}

/// Stage-two index adjustment: `idx` if `idx <= rest`, else `idx & rest`.
/// The result never exceeds `rest`.
#[inline]
pub fn adjust_idx1(idx: u8, rest: u8) -> u8 {
    debug_assert!(idx < 64);
    if idx <= rest {
        idx
    } else {
        idx & rest
    }
}

/// Feedback taps for `x^32 + x^22 + x^2 + x + 1` in a right-shifting
/// Fibonacci register: `bit0 ^ bit10 ^ bit30 ^ bit31` enters at bit 31.
pub const LFSR_TAPS: [u32; 4] = [0, 10, 30, 31];

/// One LFSR cycle: returns the next state and the output bit (bit 0 of the
/// current state).
#[inline]
pub fn lfsr_step(state: u32) -> (u32, u8) {
    let out = state & 1;
    let fb = (state ^ (state >> 10) ^ (state >> 30) ^ (state >> 31)) & 1;
    ((state >> 1) | (fb << 31), out as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lfsr(u32);

impl Lfsr {
    pub fn new(seed: u32) -> Result<Self> {
        if seed == 0 {
            return Err(Error::ZeroSeed);
        }
        Ok(Self(seed))
    }

    pub fn state(&self) -> u32 {
        self.0
    }

    pub fn step(&mut self) -> u8 {
        let (s, bit) = lfsr_step(self.0);
        self.0 = s;
        bit
    }

    /// Six steps packed MSB-first.
    pub fn next_index(&mut self) -> u8 {
        (0..6).fold(0u8, |acc, _| (acc << 1) | self.step())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Permutation64([u8; PERM_LEN]);

impl Permutation64 {
    pub fn new(entries: [u8; PERM_LEN]) -> Result<Self> {
        let mut seen = 0u64;
        for &e in &entries {
            if e as usize >= PERM_LEN || seen & (1 << e) != 0 {
                return Err(Error::OutOfRange { what: "permutation entry", value: e as u64 });
            }
            seen |= 1 << e;
        }
        Ok(Self(entries))
    }

    pub fn identity() -> Self {
        Self(std::array::from_fn(|i| i as u8))
    }

    pub fn entries(&self) -> &[u8; PERM_LEN] {
        &self.0
    }

    /// Parses 64 whitespace-separated hex bytes.
    pub fn parse_hex(line: &str) -> Result<Self> {
        let vals = line
            .split_whitespace()
            .map(|t| u8::from_str_radix(t, 16).map_err(|e| Error::Format(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let arr: [u8; PERM_LEN] = vals
            .try_into()
            .map_err(|v: Vec<u8>| Error::Format(format!("expected 64 entries, got {}", v.len())))?;
        Self::new(arr)
    }
}

impl fmt::Display for Permutation64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{e:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Permutation64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permutation64[{self}]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Shuffle12,
    Shuffle52,
    Shift6,
    Done,
}

#[derive(Debug, Clone)]
pub struct RpgMachine {
    reg: [u8; PERM_LEN],
    fifo: VecDeque<u8>,
    lfsr: Lfsr,
    buffer: u8,
    buffered: u8,
    k: u8,
    shifts: u8,
    phase: Phase,
    cycle: u32,
}

impl RpgMachine {
    pub fn new(seed: u32) -> Result<Self> {
        Ok(Self::with_lfsr(Lfsr::new(seed)?))
    }

    fn with_lfsr(lfsr: Lfsr) -> Self {
        Self {
            reg: REG_INIT,
            fifo: VecDeque::with_capacity(PERM_LEN),
            lfsr,
            buffer: 0,
            buffered: 0,
            k: 0,
            shifts: 0,
            phase: Phase::Init,
            cycle: 0,
        }
    }

    /// Starts another permutation without reseeding; the LFSR keeps running.
    pub fn rearm(&mut self) {
        *self = Self::with_lfsr(self.lfsr);
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cycle(&self) -> u32 {
        self.cycle
    }

    pub fn reg(&self) -> &[u8; PERM_LEN] {
        &self.reg
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn lfsr_state(&self) -> u32 {
        self.lfsr.state()
    }

    /// Round counter; equals the number of completed selections.
    pub fn round(&self) -> u8 {
        self.k
    }

    /// Highest still-unselected REG slot. Only meaningful while shuffling.
    pub fn rest(&self) -> u8 {
        63 - self.k.min(63)
    }

    fn select(&mut self, slot: u8) {
        let rest = self.rest() as usize;
        let picked = self.reg[slot as usize];
        self.fifo.push_back(picked);
        self.reg[slot as usize] = self.reg[rest];
        self.k += 1;
    }

    /// Advances one clock cycle.
    pub fn step(&mut self) -> Result<()> {
        match self.phase {
            Phase::Done => return Err(Error::MachineDone),
            Phase::Init => {
                self.buffer = (self.buffer << 1 | self.lfsr.step()) & 0x3f;
                self.buffered += 1;
                if self.buffered == 6 {
                    self.fifo.push_back(self.buffer);
                    self.buffer = 0;
                    self.buffered = 0;
                    if self.fifo.len() == PERM_LEN {
                        self.phase = Phase::Shuffle12;
                    }
                }
            }
            Phase::Shuffle12 => {
                let idx = self.fifo.pop_front().expect("FIFO full during shuffle");
                self.select(adjust_idx0(idx));
                if self.k == STAGE_ONE_ROUNDS {
                    self.phase = Phase::Shuffle52;
                }
            }
            Phase::Shuffle52 => {
                let idx = self.fifo.pop_front().expect("FIFO full during shuffle");
                let slot = adjust_idx1(idx, self.rest());
                self.select(slot);
                if self.k as usize == PERM_LEN {
                    self.phase = Phase::Shift6;
                }
            }
            Phase::Shift6 => {
                let v = self.fifo.pop_front().expect("FIFO holds the permutation");
                self.fifo.push_back(v);
                self.shifts += 1;
                if self.shifts == SHIFT_ROUNDS {
                    self.phase = Phase::Done;
                }
            }
        }
        self.cycle += 1;
        debug_assert!(self.fifo.len() <= PERM_LEN);
        Ok(())
    }

    /// Runs to completion and returns the permutation and the cycles spent.
    pub fn run(&mut self) -> Result<(Permutation64, u32)> {
        while self.phase != Phase::Done {
            self.step()?;
        }
        let mut out = [0u8; PERM_LEN];
        for (o, &v) in out.iter_mut().zip(self.fifo.iter()) {
            *o = v;
        }
        Ok((Permutation64::new(out)?, self.cycle))
    }
}

/// One permutation from a fresh LFSR seed.
pub fn generate(seed: u32) -> Result<(Permutation64, u32)> {
    RpgMachine::new(seed)?.run()
}

/// The five address ranges served by the address controller.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddrRange {
    R00_3F,
    R40_7F,
    R00_7F,
    R80_BF,
    RC0_FF,
}

impl AddrRange {
    /// `{line, addr}` range for polynomial `line` (0..=3).
    pub fn for_line(line: usize) -> Self {
        match line {
            0 => AddrRange::R00_3F,
            1 => AddrRange::R40_7F,
            2 => AddrRange::R80_BF,
            3 => AddrRange::RC0_FF,
            _ => panic!("line {line} outside 0..=3"),
        }
    }

    pub fn span(self) -> std::ops::Range<usize> {
        match self {
            AddrRange::R00_3F => 0x00..0x40,
            AddrRange::R40_7F => 0x40..0x80,
            AddrRange::R00_7F => 0x00..0x80,
            AddrRange::R80_BF => 0x80..0xc0,
            AddrRange::RC0_FF => 0xc0..0x100,
        }
    }
}

/// Extends a base permutation to one of the five address ranges.
///
/// The 64-entry ranges prepend the line number (`{line, addr}`); `R00_7F`
/// appends one low bit, emitting `2a, 2a + 1` for each base entry `a`.
pub fn extend(p: &Permutation64, range: AddrRange) -> Vec<u8> {
    match range {
        AddrRange::R00_7F => p.0.iter().flat_map(|&a| [2 * a, 2 * a + 1]).collect(),
        _ => {
            let offset = range.span().start as u8;
            p.0.iter().map(|&a| a | offset).collect()
        }
    }
}
