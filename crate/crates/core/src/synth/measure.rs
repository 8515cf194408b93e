//! Bucketing of continuous measurements into vocabulary codes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::CodeVocabulary;
use crate::error::{usage_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementKind {
    SystolicBp,
    DiastolicBp,
    Bmi,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 3] = [
        MeasurementKind::SystolicBp,
        MeasurementKind::DiastolicBp,
        MeasurementKind::Bmi,
    ];

    /// Inclusive valid range; values outside it are excluded.
    pub fn valid_range(self) -> (f64, f64) {
        match self {
            MeasurementKind::SystolicBp => (80.0, 200.0),
            MeasurementKind::DiastolicBp => (50.0, 140.0),
            MeasurementKind::Bmi => (16.0, 50.0),
        }
    }

    pub fn bin_width(self) -> f64 {
        match self {
            MeasurementKind::SystolicBp | MeasurementKind::DiastolicBp => 5.0,
            MeasurementKind::Bmi => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            MeasurementKind::SystolicBp => "SBP",
            MeasurementKind::DiastolicBp => "DBP",
            MeasurementKind::Bmi => "BMI",
        }
    }

    /// Every bucket code of this kind, in ascending order.
    pub fn all_codes(self) -> Vec<String> {
        let (lo, hi) = self.valid_range();
        let w = self.bin_width();
        let mut out = Vec::new();
        let mut b = lo;
        while b <= hi {
            out.push(MeasurementBucket { kind: self, lower: b as i64 }.code());
            b += w;
        }
        out
    }
}

impl FromStr for MeasurementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "systolic-bp" => Ok(MeasurementKind::SystolicBp),
            "diastolic-bp" => Ok(MeasurementKind::DiastolicBp),
            "bmi" => Ok(MeasurementKind::Bmi),
            other => Err(usage_err(format!("unknown measurement kind `{other}`"))),
        }
    }
}

/// Half-open bin `[lower, lower + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MeasurementBucket {
    pub kind: MeasurementKind,
    pub lower: i64,
}

impl MeasurementBucket {
    pub fn upper(&self) -> i64 {
        self.lower + self.kind.bin_width() as i64
    }

    pub fn code(&self) -> String {
        format!("MEAS:{}_{}", self.kind.tag(), self.lower)
    }
}

impl fmt::Display for MeasurementBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.lower, self.upper())
    }
}

/// `None` means the value is excluded as implausible.
pub fn measurement_bucket(value: f64, kind: MeasurementKind) -> Result<Option<MeasurementBucket>> {
    if !value.is_finite() {
        return Err(usage_err(format!("measurement value {value} is not finite")));
    }
    let (lo, hi) = kind.valid_range();
    if value < lo || value > hi {
        return Ok(None);
    }
    let w = kind.bin_width();
    Ok(Some(MeasurementBucket {
        kind,
        lower: ((value / w).floor() * w) as i64,
    }))
}

/// Token id of the measurement's bucket, or `None` when excluded.
pub fn categorize_measurement(
    value: f64,
    kind: MeasurementKind,
    vocab: &CodeVocabulary,
) -> Result<Option<usize>> {
    Ok(measurement_bucket(value, kind)?.map(|b| vocab.id_or_unk(&b.code())))
}
