//! Turning a score vector into a hard label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::argmax;

/// Which side of a binary threshold counts as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdConvention {
    /// `score > threshold` is positive.
    #[default]
    HigherIsPositive,
    /// `score < threshold` is positive.
    LowerIsPositive,
}

impl ThresholdConvention {
    pub fn is_positive(self, score: f64, threshold: f64) -> bool {
        match self {
            ThresholdConvention::HigherIsPositive => score > threshold,
            ThresholdConvention::LowerIsPositive => score < threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecisionRule {
    #[default]
    Argmax,
    /// Binary tasks: compare the positive label's score to a threshold.
    Threshold {
        positive: String,
        #[serde(with = "crate::decision::extended_f64")]
        threshold: f64,
        #[serde(default)]
        convention: ThresholdConvention,
    },
}

impl DecisionRule {
    pub fn validate(&self, labels: &[String]) -> Result<()> {
        match self {
            DecisionRule::Argmax => Ok(()),
            DecisionRule::Threshold {
                positive, threshold, ..
            } => {
                if labels.len() != 2 {
                    return Err(Error::Config(format!(
                        "threshold rule needs exactly 2 labels, got {}",
                        labels.len()
                    )));
                }
                if !labels.contains(positive) {
                    return Err(Error::Config(format!("positive label `{positive}` not in label set")));
                }
                if threshold.is_nan() {
                    return Err(Error::Config("threshold is NaN".into()));
                }
                Ok(())
            }
        }
    }

    /// Index into `labels` of the decided class.
    pub fn decide(&self, scores: &[f64], labels: &[String]) -> usize {
        match self {
            DecisionRule::Argmax => argmax(scores),
            DecisionRule::Threshold {
                positive,
                threshold,
                convention,
            } => {
                let p = labels.iter().position(|l| l == positive).unwrap_or(0);
                if convention.is_positive(scores[p], *threshold) {
                    p
                } else {
                    1 - p
                }
            }
        }
    }
}

/// f64 that may be ±infinity; infinities are written as strings since
/// JSON has no literal for them.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("not a number: {s}"))),
        }
    }
}
