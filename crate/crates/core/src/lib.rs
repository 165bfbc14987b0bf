//! Respiratory-sound classification with example-based explanations.
//!
//! Models are trained on log-Mel spectrograms of breathing cycles. Each real
//! sample is then attacked with iterated gradient-sign steps: samples that stay
//! correctly classified for many steps are *prototypes*, samples that a single
//! small step already flips are *criticisms*.

pub mod attack;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod spectrum;
pub mod training;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

pub const N_CLASSES: usize = 4;

/// Annotation class of one respiratory cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Normal,
    Crackle,
    Wheeze,
    Both,
}

impl Class {
    pub const ALL: [Class; N_CLASSES] = [Class::Normal, Class::Crackle, Class::Wheeze, Class::Both];

    /// Label from the crackle/wheeze annotation flags.
    pub fn from_flags(crackle: bool, wheeze: bool) -> Self {
        match (crackle, wheeze) {
            (false, false) => Class::Normal,
            (true, false) => Class::Crackle,
            (false, true) => Class::Wheeze,
            (true, true) => Class::Both,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::Crackle => "crackle",
            Class::Wheeze => "wheeze",
            Class::Both => "both",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self != Class::Normal
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
