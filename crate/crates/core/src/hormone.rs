use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of hormones tracked.
pub const NUM_HORMONES: usize = 5;

/// Length of every simulated series, in days.
pub const SERIES_DAYS: usize = 105;

/// Measurements are only taken on days `1..=OBSERVATION_WINDOW` (two cycles).
pub const OBSERVATION_WINDOW: usize = 70;

/// Hormone identifiers. The discriminant is the row index used by every
/// matrix and file format in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HormoneId {
    E = 0,
    P = 1,
    Ih = 2,
    #[serde(rename = "FSH")]
    Fsh = 3,
    #[serde(rename = "LH")]
    Lh = 4,
}

impl HormoneId {
    pub const ALL: [HormoneId; NUM_HORMONES] = [
        HormoneId::E,
        HormoneId::P,
        HormoneId::Ih,
        HormoneId::Fsh,
        HormoneId::Lh,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<HormoneId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HormoneId::E => "E",
            HormoneId::P => "P",
            HormoneId::Ih => "Ih",
            HormoneId::Fsh => "FSH",
            HormoneId::Lh => "LH",
        }
    }
}

impl fmt::Display for HormoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HormoneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HormoneId::ALL
            .iter()
            .copied()
            .find(|h| h.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown hormone {s:?}")))
    }
}
