//! Behavioral simulator of a shuffled Kyber decryption datapath, with a
//! synthetic side-channel lab around it.
//!
//! - [`ring`]: arithmetic in `Z_3329[X]/(X^256 + 1)`, NTT, INTT, base multiplication.
//! - [`kem`]: decryption (plain and event-traced) and key/ciphertext plumbing.
//! - [`rpg`]: the cycle-stepped random permutation generator.
//! - [`sched`]: natural and shuffled operation schedules, address controller.
//! - [`leakage`]: Hamming-distance trace synthesis and the trace file format.
//! - [`sca`]: CPA and TVLA engines, reports.
//! - [`experiment`]: end-to-end drivers shared by the CLI and the acceptance suite.

pub mod error;
pub mod experiment;
pub mod kem;
pub mod leakage;
pub mod prng;
pub mod ring;
pub mod rpg;
pub mod sca;
pub mod sched;

pub use error::{Error, Result};
