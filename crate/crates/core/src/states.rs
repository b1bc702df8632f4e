//! State labels and the display filters used by the figure emitter.
//!
//! States are indexed 1..=51: the 50 states in alphabetical order of their
//! names, then the District of Columbia as 51.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_STATES: usize = 51;
pub const DC: u8 = 51;
pub const ALASKA: u8 = 2;
pub const HAWAII: u8 = 11;

const ABBREVIATIONS: [&str; N_STATES] = [
    "AL", "AK", "AZ", "AR", "CA", "CO", "CT", "DE", "FL", "GA", "HI", "ID", "IL", "IN", "IA",
    "KS", "KY", "LA", "ME", "MD", "MA", "MI", "MN", "MS", "MO", "MT", "NE", "NV", "NH", "NJ",
    "NM", "NY", "NC", "ND", "OH", "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT", "VT",
    "VA", "WA", "WV", "WI", "WY", "DC",
];

/// Postal abbreviation for a 1-based state index.
pub fn abbreviation(state: u8) -> Option<&'static str> {
    (1..=N_STATES as u8)
        .contains(&state)
        .then(|| ABBREVIATIONS[state as usize - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateFilter {
    /// All 50 states plus DC.
    #[default]
    #[serde(rename = "all-51", alias = "all")]
    All51,
    /// The 50 states, DC excluded.
    #[serde(rename = "states-50")]
    States50,
    /// The lower 48: no Alaska, Hawaii or DC.
    #[serde(rename = "contiguous-48")]
    Contiguous48,
}

impl StateFilter {
    pub fn includes(self, state: u8) -> bool {
        match self {
            StateFilter::All51 => true,
            StateFilter::States50 => state != DC,
            StateFilter::Contiguous48 => state != DC && state != ALASKA && state != HAWAII,
        }
    }

    pub fn states(self) -> Vec<u8> {
        (1..=N_STATES as u8).filter(|&s| self.includes(s)).collect()
    }
}

impl std::str::FromStr for StateFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all-51" | "all51" => Ok(StateFilter::All51),
            "states-50" | "states50" | "50" => Ok(StateFilter::States50),
            "contiguous-48" | "contiguous48" | "48" => Ok(StateFilter::Contiguous48),
            other => Err(Error::Config(format!("unknown state filter \"{other}\""))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_sizes() {
        assert_eq!(StateFilter::All51.states().len(), 51);
        assert_eq!(StateFilter::States50.states().len(), 50);
        assert_eq!(StateFilter::Contiguous48.states().len(), 48);
    }

    #[test]
    fn labels() {
        assert_eq!(abbreviation(1), Some("AL"));
        assert_eq!(abbreviation(ALASKA), Some("AK"));
        assert_eq!(abbreviation(HAWAII), Some("HI"));
        assert_eq!(abbreviation(32), Some("NY"));
        assert_eq!(abbreviation(21), Some("MA"));
        assert_eq!(abbreviation(DC), Some("DC"));
        assert_eq!(abbreviation(0), None);
        assert_eq!(abbreviation(52), None);
    }

    #[test]
    fn unknown_filter_rejected() {
        assert!("pacific".parse::<StateFilter>().is_err());
        assert_eq!("contiguous-48".parse::<StateFilter>().unwrap(), StateFilter::Contiguous48);
    }
}
