//! Extended real numbers.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// A value in ℝ ∪ {±∞}.
///
/// Convex function values never take `NegInf`; it only appears as the result
/// of an unbounded minimization or as the concave side of a Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtReal {
    NegInf,
    Finite(f64),
    PosInf,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// Lossy conversion to `f64` (infinities map to `±f64::INFINITY`).
    pub fn to_f64(self) -> f64 {
        match self {
            ExtReal::NegInf => f64::NEG_INFINITY,
            ExtReal::Finite(v) => v,
            ExtReal::PosInf => f64::INFINITY,
        }
    }

    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            ExtReal::PosInf
        } else if v == f64::NEG_INFINITY {
            ExtReal::NegInf
        } else {
            ExtReal::Finite(v)
        }
    }

    /// Sum with the convention `+∞ + (−∞) = +∞` (inf-addition).
    pub fn add(self, other: ExtReal) -> ExtReal {
        match (self, other) {
            (ExtReal::PosInf, _) | (_, ExtReal::PosInf) => ExtReal::PosInf,
            (ExtReal::NegInf, _) | (_, ExtReal::NegInf) => ExtReal::NegInf,
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
        }
    }

    pub fn scale(self, w: f64) -> ExtReal {
        debug_assert!(w >= 0.0);
        match self {
            ExtReal::Finite(v) => ExtReal::Finite(w * v),
            other => other,
        }
    }
}

impl From<f64> for ExtReal {
    fn from(v: f64) -> Self {
        ExtReal::from_f64(v)
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::NegInf => write!(f, "-inf"),
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::PosInf => write!(f, "+inf"),
        }
    }
}

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ExtReal::Finite(v) => s.serialize_f64(*v),
            ExtReal::PosInf => s.serialize_str("+inf"),
            ExtReal::NegInf => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(ExtReal::Finite(v)),
            Raw::Str(s) => match s.as_str() {
                "+inf" | "inf" => Ok(ExtReal::PosInf),
                "-inf" => Ok(ExtReal::NegInf),
                other => Err(serde::de::Error::custom(format!("not an extended real: {other}"))),
            },
        }
    }
}

/// Serde adapter for `Vec<f64>` bounds that may contain ±∞, written as the
/// strings `"+inf"` / `"-inf"` (JSON has no infinity literal).
pub mod bounds_serde {
    use super::ExtReal;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let ext: Vec<ExtReal> = v.iter().map(|&x| ExtReal::from_f64(x)).collect();
        ext.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let ext = Vec::<ExtReal>::deserialize(d)?;
        Ok(ext.into_iter().map(ExtReal::to_f64).collect())
    }
}
