use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::table::Orientation;

/// The dataset families the pipeline knows how to prompt for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "e2e")]
    E2e,
    #[serde(rename = "wikitabletext")]
    WikiTableText,
    #[serde(rename = "wikibio")]
    WikiBio,
    #[serde(rename = "rotowire-team")]
    RotowireTeam,
    #[serde(rename = "rotowire-player")]
    RotowirePlayer,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 5] = [
        DatasetKind::E2e,
        DatasetKind::WikiTableText,
        DatasetKind::WikiBio,
        DatasetKind::RotowireTeam,
        DatasetKind::RotowirePlayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::E2e => "e2e",
            DatasetKind::WikiTableText => "wikitabletext",
            DatasetKind::WikiBio => "wikibio",
            DatasetKind::RotowireTeam => "rotowire-team",
            DatasetKind::RotowirePlayer => "rotowire-player",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            DatasetKind::RotowireTeam | DatasetKind::RotowirePlayer => Orientation::Matrix,
            _ => Orientation::AttributeValue,
        }
    }

    /// Whether cell answers are counts, which selects the "number of"
    /// question phrasing and numeric answer extraction.
    pub fn numeric_answers(self) -> bool {
        self.orientation() == Orientation::Matrix
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown dataset kind {0:?} (expected one of e2e, wikitabletext, wikibio, rotowire-team, rotowire-player)")]
pub struct UnknownKind(pub String);

impl FromStr for DatasetKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_agree() {
        for kind in DatasetKind::ALL {
            assert_eq!(kind.to_string().parse::<DatasetKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{kind}\""));
        }
        assert!("rotowire".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn only_rotowire_is_numeric_matrix() {
        assert!(DatasetKind::RotowireTeam.numeric_answers());
        assert!(DatasetKind::RotowirePlayer.numeric_answers());
        assert!(!DatasetKind::WikiBio.numeric_answers());
        assert_eq!(DatasetKind::E2e.orientation(), Orientation::AttributeValue);
    }
}
