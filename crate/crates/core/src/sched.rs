//! Operation schedules for the decryption datapath.
//!
//! Memory model: a polynomial is 64 words of four coefficients (two degree-1
//! residue pairs). Every phase therefore walks 64 addresses, which is what a
//! [`Permutation64`] reorders:
//!
//! | phase      | events            | pacing               |
//! |------------|-------------------|----------------------|
//! | PWM        | `k * 64` words    | PWM + REDUCE per two cycles |
//! | INTT       | 7 stages x 64 groups of two butterflies | one group per cycle |
//! | SUB        | 64 words          | one per two cycles   |
//!
//! The protected schedule keeps every cycle slot and only changes which word
//! (or butterfly group) a slot serves, so cycle counts match exactly.

use std::io::Write;

use crate::error::{Error, Result};
use crate::kem::KemParams;
use crate::ring::INTT_STAGES;
use crate::rpg::{self, extend, AddrRange, Permutation64, PERM_LEN};

pub const WORDS_PER_POLY: usize = 64;
pub const COEFFS_PER_WORD: usize = 4;
pub const GROUPS_PER_STAGE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Pwm,
    Reduce,
    Butterfly,
    Sub,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Pwm => "PWM",
            Op::Reduce => "REDUCE",
            Op::Butterfly => "BUTTERFLY",
            Op::Sub => "SUB",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScheduleEvent {
    pub cycle: u64,
    pub op: Op,
    /// Polynomial index for PWM/REDUCE, 0 otherwise.
    pub line: u8,
    /// Word address within the line, or butterfly group for INTT events.
    pub word_addr: u8,
    pub stage: Option<u8>,
}

impl ScheduleEvent {
    /// The event with its timing stripped; equal keys mean equal work.
    pub fn work(&self) -> (Op, u8, u8, Option<u8>) {
        (self.op, self.line, self.word_addr, self.stage)
    }
}

/// Pipeline delays of the delayed permutation taps `addr_r1` / `addr_r12`,
/// in schedule slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapDelays {
    pub r1: usize,
    pub r12: usize,
}

impl Default for TapDelays {
    fn default() -> Self {
        Self { r1: 1, r12: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    params: KemParams,
    events: Vec<ScheduleEvent>,
    protected: bool,
    seeds: Vec<u32>,
    delays: TapDelays,
    total_cycles: u64,
    /// Set by the builders, whose output is valid by construction.
    trusted: bool,
}

impl Schedule {
    pub fn params(&self) -> KemParams {
        self.params
    }

    pub fn events(&self) -> &[ScheduleEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_protected(&self) -> bool {
        self.protected
    }

    /// RPG seeds consumed, in order: PWM lines, INTT stages, SUB.
    pub fn seeds(&self) -> &[u32] {
        &self.seeds
    }

    pub fn delays(&self) -> TapDelays {
        self.delays
    }

    /// Builds a schedule from explicit events, e.g. for negative tests.
    pub fn from_events(params: KemParams, events: Vec<ScheduleEvent>) -> Self {
        let total_cycles = events.last().map_or(0, |e| e.cycle + 1);
        Self { params, events, protected: false, seeds: Vec::new(), delays: TapDelays::default(), total_cycles, trusted: false }
    }

    /// Checks that the events cover exactly the PWM, REDUCE, INTT and SUB
    /// work of the parameter set, in an order that respects data
    /// dependencies.
    pub fn validate(&self) -> Result<()> {
        self.check()
    }

    /// Validates unless the schedule came from a builder.
    pub(crate) fn ensure_valid(&self) -> Result<()> {
        if self.trusted {
            Ok(())
        } else {
            self.check()
        }
    }

    fn check(&self) -> Result<()> {
        let k = self.params.k;
        let bad = |m: String| Err(Error::ScheduleMismatch(m));
        let mut pwm = vec![false; k * WORDS_PER_POLY];
        let mut red = vec![false; k * WORDS_PER_POLY];
        let mut bfly = vec![false; INTT_STAGES * GROUPS_PER_STAGE];
        let mut sub = vec![false; WORDS_PER_POLY];
        let (mut n_red, mut n_bfly) = (0usize, 0usize);
        let mut stage_done = [0usize; INTT_STAGES];
        let mut last_cycle = None;

        for e in &self.events {
            if last_cycle.is_some_and(|c| e.cycle <= c) {
                return bad(format!("cycle {} not after {}", e.cycle, last_cycle.unwrap()));
            }
            last_cycle = Some(e.cycle);
            let w = e.word_addr as usize;
            let l = e.line as usize;
            if w >= WORDS_PER_POLY {
                return bad(format!("word address {w} out of range"));
            }
            match e.op {
                Op::Pwm | Op::Reduce => {
                    if l >= k || e.stage.is_some() {
                        return bad(format!("{} event on line {l} for k={k}", e.op.name()));
                    }
                    if n_bfly > 0 {
                        return bad(format!("{} after INTT started", e.op.name()));
                    }
                    let slot = l * WORDS_PER_POLY + w;
                    if e.op == Op::Pwm {
                        if std::mem::replace(&mut pwm[slot], true) {
                            return bad(format!("duplicate PWM {l}:{w}"));
                        }
                    } else {
                        if !pwm[slot] {
                            return bad(format!("REDUCE {l}:{w} before its PWM"));
                        }
                        if std::mem::replace(&mut red[slot], true) {
                            return bad(format!("duplicate REDUCE {l}:{w}"));
                        }
                        n_red += 1;
                    }
                }
                Op::Butterfly => {
                    let Some(s) = e.stage.map(usize::from).filter(|&s| s < INTT_STAGES) else {
                        return bad("butterfly without a valid stage".into());
                    };
                    if n_red != k * WORDS_PER_POLY {
                        return bad("INTT before all products are accumulated".into());
                    }
                    if s > 0 && stage_done[s - 1] != GROUPS_PER_STAGE {
                        return bad(format!("stage {s} before stage {} finished", s - 1));
                    }
                    if std::mem::replace(&mut bfly[s * GROUPS_PER_STAGE + w], true) {
                        return bad(format!("duplicate butterfly {s}:{w}"));
                    }
                    stage_done[s] += 1;
                    n_bfly += 1;
                }
                Op::Sub => {
                    if n_bfly != INTT_STAGES * GROUPS_PER_STAGE {
                        return bad("SUB before INTT finished".into());
                    }
                    if std::mem::replace(&mut sub[w], true) {
                        return bad(format!("duplicate SUB {w}"));
                    }
                }
            }
        }
        if !sub.iter().all(|&s| s) {
            return bad("missing SUB events".into());
        }
        Ok(())
    }

    /// Debug dump: `cycle,op,line,word_addr,stage`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "cycle,op,line,word_addr,stage")?;
        for e in &self.events {
            let stage = e.stage.map(|s| s.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", e.cycle, e.op.name(), e.line, e.word_addr, stage)?;
        }
        Ok(())
    }
}

struct Orders {
    pwm: Vec<Vec<(u8, u8)>>,
    stages: Vec<Vec<u8>>,
    sub: Vec<u8>,
}

fn assemble(params: KemParams, orders: Orders, protected: bool, seeds: Vec<u32>, delays: TapDelays) -> Schedule {
    let mut events = Vec::with_capacity((2 * params.k + INTT_STAGES + 1) * WORDS_PER_POLY);
    let mut cycle = 0u64;
    for line in &orders.pwm {
        for &(l, w) in line {
            events.push(ScheduleEvent { cycle, op: Op::Pwm, line: l, word_addr: w, stage: None });
            events.push(ScheduleEvent { cycle: cycle + 1, op: Op::Reduce, line: l, word_addr: w, stage: None });
            cycle += 2;
        }
    }
    for (s, order) in orders.stages.iter().enumerate() {
        for &g in order {
            events.push(ScheduleEvent { cycle, op: Op::Butterfly, line: 0, word_addr: g, stage: Some(s as u8) });
            cycle += 1;
        }
    }
    for &w in &orders.sub {
        events.push(ScheduleEvent { cycle, op: Op::Sub, line: 0, word_addr: w, stage: None });
        cycle += 2;
    }
    Schedule { params, events, protected, seeds, delays, total_cycles: cycle, trusted: true }
}

/// Natural-order baseline.
pub fn build_unprotected(params: KemParams) -> Schedule {
    let natural: Vec<u8> = (0..WORDS_PER_POLY as u8).collect();
    let orders = Orders {
        pwm: (0..params.k as u8).map(|l| natural.iter().map(|&w| (l, w)).collect()).collect(),
        stages: vec![natural.clone(); INTT_STAGES],
        sub: natural,
    };
    assemble(params, orders, false, Vec::new(), TapDelays::default())
}

/// Shuffled schedule: one fresh RPG permutation per PWM line, per INTT stage
/// and for the subtraction, drawn in that order from `seeds`.
pub fn build_protected(
    params: KemParams,
    seeds: &mut dyn Iterator<Item = u32>,
    delays: TapDelays,
) -> Result<Schedule> {
    let mut used = Vec::with_capacity(params.k + INTT_STAGES + 1);
    let mut next_perm = || -> Result<Permutation64> {
        let seed = seeds.next().ok_or(Error::SeedStreamExhausted)?;
        used.push(seed);
        Ok(rpg::generate(seed)?.0)
    };

    let mut pwm = Vec::with_capacity(params.k);
    for line in 0..params.k {
        pwm.push(line_order(&next_perm()?, line));
    }
    let stages = (0..INTT_STAGES)
        .map(|_| next_perm().map(|p| p.entries().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let sub = next_perm()?.entries().to_vec();
    Ok(assemble(params, Orders { pwm, stages, sub }, true, used, delays))
}

fn line_order(perm: &Permutation64, line: usize) -> Vec<(u8, u8)> {
    extend(perm, AddrRange::for_line(line)).into_iter().map(|a| (a >> 6, a & 0x3f)).collect()
}

/// `(line, word_addr)` order of the PWM phase alone. Draws the same leading
/// seeds as [`build_protected`], so it matches that schedule's PWM events.
pub fn pwm_order(params: KemParams, seeds: Option<&mut dyn Iterator<Item = u32>>) -> Result<Vec<(u8, u8)>> {
    let Some(seeds) = seeds else {
        return Ok((0..params.k as u8).flat_map(|l| (0..WORDS_PER_POLY as u8).map(move |w| (l, w))).collect());
    };
    let mut order = Vec::with_capacity(params.k * WORDS_PER_POLY);
    for line in 0..params.k {
        let seed = seeds.next().ok_or(Error::SeedStreamExhausted)?;
        order.extend(line_order(&rpg::generate(seed)?.0, line));
    }
    Ok(order)
}

pub fn cycle_count(s: &Schedule) -> u64 {
    s.total_cycles
}

/// Behavioral view of the six replacement addresses driven while a phase is
/// shuffled.
///
/// Port map (slot `i`, base permutation `p`, line `l`, `h` = half-slot bit):
/// - 0: `{l, p[i]}`, full 00..ff space
/// - 1: `p[i]`, 00..3f
/// - 2: `{1, p[i]}`, 40..7f
/// - 3: `addr_r1` = `p[i - r1]`, 00..3f
/// - 4: `{addr_r12, h}`, 00..7f
/// - 5: `{addr_r1, h}`, 00..7f
///
/// Delayed ports are idle (`None`) until their tap fills.
#[derive(Debug, Clone, Copy, Default)]
pub struct AddressController {
    pub delays: TapDelays,
}

pub const PORTS: usize = 6;

impl AddressController {
    pub fn new(delays: TapDelays) -> Self {
        Self { delays }
    }

    fn tap(p: &Permutation64, slot: usize, delay: usize) -> Option<u16> {
        slot.checked_sub(delay).filter(|&i| i < PERM_LEN).map(|i| p.entries()[i] as u16)
    }

    pub fn ports(&self, p: &Permutation64, line: usize, slot: usize, half: u8) -> [Option<u16>; PORTS] {
        let now = Self::tap(p, slot, 0);
        let r1 = Self::tap(p, slot, self.delays.r1);
        let r12 = Self::tap(p, slot, self.delays.r12);
        let base = AddrRange::for_line(line).span().start as u16;
        [
            now.map(|a| base | a),
            now,
            now.map(|a| 0x40 | a),
            r1,
            r12.map(|a| (a << 1) | half as u16),
            r1.map(|a| (a << 1) | half as u16),
        ]
    }

    /// Slots needed to drain the longest tap.
    pub fn phase_slots(&self) -> usize {
        PERM_LEN + self.delays.r1.max(self.delays.r12)
    }
}
