use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DemoError;

/// One imaging channel of an aligned triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Nir,
    Tir,
}

impl Modality {
    /// Canonical order R, N, T used everywhere.
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Nir, Modality::Tir];

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Nir => 1,
            Modality::Tir => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Rgb => "R",
            Modality::Nir => "N",
            Modality::Tir => "T",
        }
    }

    /// Subdirectory name in the on-disk dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Nir => "NI",
            Modality::Tir => "TI",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Nir => "NIR",
            Modality::Tir => "TIR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Modality {
    type Err = DemoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R" | "RGB" => Ok(Modality::Rgb),
            "N" | "NI" | "NIR" => Ok(Modality::Nir),
            "T" | "TI" | "TIR" => Ok(Modality::Tir),
            other => Err(DemoError::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Parse a missing-modality set such as `"RGB+NIR"`, `"R,T"` or `""`.
pub fn parse_modality_set(s: &str) -> Result<Vec<Modality>, DemoError> {
    let mut out: Vec<Modality> = s
        .split(['+', ','])
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sets() {
        assert_eq!(parse_modality_set("").unwrap(), vec![]);
        assert_eq!(
            parse_modality_set("NIR+RGB").unwrap(),
            vec![Modality::Rgb, Modality::Nir]
        );
        assert_eq!(parse_modality_set("t,T").unwrap(), vec![Modality::Tir]);
        assert!(parse_modality_set("X").is_err());
    }
}
