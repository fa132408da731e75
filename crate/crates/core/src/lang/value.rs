use crate::bands::InterpretationBand;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// An exact runtime value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PointValue {
    Num(f64),
    Bool(bool),
    /// Enum value: the label plus its position in the declared order.
    Enum { label: String, ord: usize },
}

impl fmt::Display for PointValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointValue::Num(n) => write!(f, "{n}"),
            PointValue::Bool(b) => write!(f, "{b}"),
            PointValue::Enum { label, .. } => write!(f, "\"{label}\""),
        }
    }
}

/// Per-parameter assignment supplied by a caller (or by the agent loop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BindingEntry {
    /// An exact value: number, boolean, or enum label.
    Exact(PointValue),
    /// A numeric interval [lo, hi], both ends inclusive.
    Interval { lo: f64, hi: f64 },
    /// A candidate subset of an enum's labels.
    Candidates(Vec<String>),
    /// Entirely unknown; the declared domain bounds it.
    Unknown,
}

impl BindingEntry {
    pub fn num(x: f64) -> Self {
        BindingEntry::Exact(PointValue::Num(x))
    }

    pub fn flag(b: bool) -> Self {
        BindingEntry::Exact(PointValue::Bool(b))
    }

    /// An enum label; its ordinal is resolved against the declaration at
    /// binding-validation time.
    pub fn label(l: &str) -> Self {
        BindingEntry::Exact(PointValue::Enum {
            label: l.to_string(),
            ord: usize::MAX,
        })
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, BindingEntry::Exact(_))
    }
}

impl fmt::Display for BindingEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BindingEntry::Exact(v) => write!(f, "{v}"),
            BindingEntry::Interval { lo, hi } => write!(f, "[{lo}, {hi}]"),
            BindingEntry::Candidates(ls) => write!(f, "{{{}}}", ls.join(", ")),
            BindingEntry::Unknown => write!(f, "UNKNOWN"),
        }
    }
}

/// A full parameter assignment, keyed by parameter name.
pub type Binding = BTreeMap<String, BindingEntry>;

/// One computed output value: exact, or a best/worst-case range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeValue {
    Number { value: f64 },
    Boolean { value: bool },
    /// Closed numeric interval covering every completion of the binding.
    Range { lo: f64, hi: f64 },
    /// A boolean that is true under some completions and false under others.
    EitherBool,
}

impl OutcomeValue {
    pub fn is_exact(&self) -> bool {
        matches!(self, OutcomeValue::Number { .. } | OutcomeValue::Boolean { .. })
    }

    /// The closed numeric hull, when the value is numeric.
    pub fn numeric_hull(&self) -> Option<(f64, f64)> {
        match self {
            OutcomeValue::Number { value } => Some((*value, *value)),
            OutcomeValue::Range { lo, hi } => Some((*lo, *hi)),
            _ => None,
        }
    }
}

impl fmt::Display for OutcomeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeValue::Number { value } => write!(f, "{value}"),
            OutcomeValue::Boolean { value } => write!(f, "{value}"),
            OutcomeValue::Range { lo, hi } => write!(f, "[{lo}, {hi}]"),
            OutcomeValue::EitherBool => write!(f, "true-or-false"),
        }
    }
}

/// One output with its matched interpretation bands, in band order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputResult {
    pub name: String,
    pub value: OutcomeValue,
    pub bands: Vec<InterpretationBand>,
}

/// Result of evaluating a calculator program under a binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub outputs: Vec<OutputResult>,
    /// True when some (but not all) completions of the binding hit a domain
    /// error; the ranges then cover only the successful completions.
    pub partial: bool,
    /// Descriptions of the errors behind `partial`.
    pub partial_errors: Vec<String>,
}

impl EvalOutcome {
    pub fn output(&self, name: &str) -> Option<&OutputResult> {
        self.outputs.iter().find(|o| o.name == name)
    }

    /// Every numeric value this outcome mentions (exact values and range
    /// endpoints), used by the numeric-faithfulness audit.
    pub fn numeric_values(&self) -> Vec<f64> {
        let mut vs = Vec::new();
        for o in &self.outputs {
            match o.value {
                OutcomeValue::Number { value } => vs.push(value),
                OutcomeValue::Range { lo, hi } => {
                    vs.push(lo);
                    vs.push(hi);
                }
                _ => {}
            }
        }
        vs
    }
}

/// Evaluation failures. Binding problems are detected before any expression
/// is evaluated; domain errors carry the offending operation and operands.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("binding error: parameter `{param}`: {detail}")]
    Binding { param: String, detail: String },
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: String, detail: String },
    #[error("parameter `{param}` is UNKNOWN and has no declared domain to bound it")]
    Unboundable { param: String },
}

impl EvalError {
    pub fn domain(op: impl Into<String>, detail: impl Into<String>) -> Self {
        EvalError::Domain {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn binding(param: impl Into<String>, detail: impl Into<String>) -> Self {
        EvalError::Binding {
            param: param.into(),
            detail: detail.into(),
        }
    }
}
