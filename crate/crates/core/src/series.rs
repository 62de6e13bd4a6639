//! Received-power sample streams.
//!
//! A [`SampleSeries`] is an ordered sequence of received-power values in dB
//! on a fixed sampling grid. Optional per-sample annotations carry sample
//! provenance (real vs synthetic, for augmented datasets) and a stationary
//! regime id when one is known.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Provenance of a single sample in an augmented dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Real => f.write_str("real"),
            Origin::Synthetic => f.write_str("synthetic"),
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Origin::Real),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(Error::invalid(format!("unknown origin tag {other:?}"))),
        }
    }
}

/// An ordered received-power stream sampled every `sample_period_s` seconds.
///
/// All values are finite; construction rejects NaN and infinities. The
/// optional `origins` and `regimes` vectors, when present, run parallel to
/// `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    values: Vec<f64>,
    sample_period_s: f64,
    label: Option<String>,
    origins: Option<Vec<Origin>>,
    regimes: Option<Vec<u32>>,
}

impl SampleSeries {
    pub fn new(values: Vec<f64>, sample_period_s: f64) -> Result<Self> {
        if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
            return Err(Error::invalid(format!(
                "sample period must be finite and positive, got {sample_period_s}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of series")));
        }
        Ok(Self {
            values,
            sample_period_s,
            label: None,
            origins: None,
            regimes: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn set_origins(&mut self, origins: Vec<Origin>) -> Result<()> {
        if origins.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                got: origins.len(),
            });
        }
        self.origins = Some(origins);
        Ok(())
    }

    pub fn set_regimes(&mut self, regimes: Vec<u32>) -> Result<()> {
        if regimes.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                got: regimes.len(),
            });
        }
        self.regimes = Some(regimes);
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_period_s(&self) -> f64 {
        self.sample_period_s
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn origins(&self) -> Option<&[Origin]> {
        self.origins.as_deref()
    }

    pub fn regimes(&self) -> Option<&[u32]> {
        self.regimes.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sub-series over `range`, annotations carried along.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<SampleSeries> {
        if range.end > self.values.len() || range.start > range.end {
            return Err(Error::domain(format!(
                "slice {range:?} out of bounds for series of length {}",
                self.values.len()
            )));
        }
        Ok(SampleSeries {
            values: self.values[range.clone()].to_vec(),
            sample_period_s: self.sample_period_s,
            label: self.label.clone(),
            origins: self.origins.as_ref().map(|o| o[range.clone()].to_vec()),
            regimes: self.regimes.as_ref().map(|r| r[range].to_vec()),
        })
    }
}
