//! Gesture vocabulary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six gestures performed on the tabletop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gesture {
    SwipeLeft,
    SwipeRight,
    SwipeUp,
    SwipeDown,
    Tap,
    Knock,
}

impl Gesture {
    pub const ALL: [Gesture; 6] = [
        Gesture::SwipeLeft,
        Gesture::SwipeRight,
        Gesture::SwipeUp,
        Gesture::SwipeDown,
        Gesture::Tap,
        Gesture::Knock,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Gesture> {
        Self::ALL.get(i).copied()
    }

    pub fn is_swipe(self) -> bool {
        matches!(
            self,
            Gesture::SwipeLeft | Gesture::SwipeRight | Gesture::SwipeUp | Gesture::SwipeDown
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Gesture::SwipeLeft => "swipe-left",
            Gesture::SwipeRight => "swipe-right",
            Gesture::SwipeUp => "swipe-up",
            Gesture::SwipeDown => "swipe-down",
            Gesture::Tap => "tap",
            Gesture::Knock => "knock",
        }
    }
}

impl fmt::Display for Gesture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Gesture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gesture '{s}'")))
    }
}

/// Which subset of the vocabulary a dataset is restricted to.
///
/// The four-gesture set is the swipe subset; class indices stay
/// `0..4` in both modes because the swipes come first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum GestureSet {
    #[serde(rename = "4")]
    Swipes,
    #[default]
    #[serde(rename = "6")]
    All,
}

impl GestureSet {
    pub fn num_classes(self) -> usize {
        match self {
            GestureSet::Swipes => 4,
            GestureSet::All => 6,
        }
    }

    pub fn contains(self, g: Gesture) -> bool {
        match self {
            GestureSet::Swipes => g.is_swipe(),
            GestureSet::All => true,
        }
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            4 => Ok(GestureSet::Swipes),
            6 => Ok(GestureSet::All),
            _ => Err(Error::InvalidArgument(format!("gesture set must be 4 or 6, got {n}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for g in Gesture::ALL {
            assert_eq!(g.name().parse::<Gesture>().unwrap(), g);
            assert_eq!(Gesture::from_index(g.index()), Some(g));
        }
        assert!("wave".parse::<Gesture>().is_err());
    }

    #[test]
    fn swipe_subset_occupies_first_four_indices() {
        for g in Gesture::ALL {
            assert_eq!(GestureSet::Swipes.contains(g), g.index() < 4);
        }
    }
}
