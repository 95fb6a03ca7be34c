//! Desk-scale model of a frequency-multiplexed time-bin entangled photon-pair
//! source and its analysis chain.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration and the
//! command-line front end live in the `pairsim` crate.
//!
//! - [`optics`]: joint spectral intensity, DWDM filters, rate integrals,
//!   Schmidt decomposition and rate-matrix fitting.
//! - [`rates`]: closed-form rate, visibility and key-rate formulas.
//! - [`sim`]: seeded synthetic time-tag streams.
//! - [`timewalk`]: in-situ time-walk calibration and correction.
//! - [`coincidence`]: bin classification, pairing, visibility, fringe fits
//!   and phase locking.
//! - [`tomography`]: count assembly, maximum-likelihood reconstruction and
//!   entanglement measures.
#![no_std]
// NaN must fail range checks, which `!(x > 0.0)` does and `x <= 0.0` does not
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod coincidence;
pub mod error;
pub mod math;
pub mod optics;
pub mod optimize;
pub mod rates;
pub mod sim;
pub mod timewalk;
pub mod tomography;

pub use error::{Error, Result};

/// A single detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub channel: u8,
    pub time_ps: u64,
}

impl TimeTag {
    pub const fn new(channel: u8, time_ps: u64) -> Self {
        Self { channel, time_ps }
    }
}

/// Time bin within a clock period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bin {
    Early,
    Middle,
    Late,
}

impl Bin {
    pub const ALL: [Bin; 3] = [Bin::Early, Bin::Middle, Bin::Late];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Bin::Early => "E",
            Bin::Middle => "M",
            Bin::Late => "L",
        }
    }
}

/// Nominal bin centers within the clock period, ps. Adjacent bins are one
/// interferometer delay (80 ps) apart.
pub const BIN_CENTERS_PS: [f64; 3] = [40.0, 120.0, 200.0];

/// Clock repetition rate of the mode-locked laser, Hz.
pub const DEFAULT_REP_RATE_HZ: f64 = 4.09e9;

/// Clock period in picoseconds for a repetition rate in Hz.
pub fn period_ps(rep_rate_hz: f64) -> f64 {
    1e12 / rep_rate_hz
}
