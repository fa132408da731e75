//! Interpretation bands: value ranges of a calculator output paired with a
//! categorical label and a risk statement.
//!
//! Boundary handling is exact. Band endpoints are lifted into "cut" space —
//! a position immediately before or after a real number — so open/closed
//! bounds, overlap, and coverage checks need no epsilons.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

/// Which endpoints of a band are inclusive. The default is `[lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoundsKind {
    #[default]
    #[serde(rename = "[)")]
    LowerIn,
    #[serde(rename = "[]")]
    BothIn,
    #[serde(rename = "(]")]
    UpperIn,
    #[serde(rename = "()")]
    NeitherIn,
}

impl BoundsKind {
    pub fn lower_inclusive(&self) -> bool {
        matches!(self, BoundsKind::LowerIn | BoundsKind::BothIn)
    }

    pub fn upper_inclusive(&self) -> bool {
        matches!(self, BoundsKind::UpperIn | BoundsKind::BothIn)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BoundsKind::LowerIn => "[)",
            BoundsKind::BothIn => "[]",
            BoundsKind::UpperIn => "(]",
            BoundsKind::NeitherIn => "()",
        }
    }
}

/// One interpretation band: a range of an output value with its label and
/// free-text risk statement. `lower`/`upper` may be -inf/+inf.
///
/// The JSON form uses the document schema names: `output`, `lower` (null
/// means unbounded below), `upper` (null means unbounded above), `bounds`
/// (defaults to "[)"), `label`, `statement`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretationBand {
    pub output_name: String,
    pub lower: f64,
    pub upper: f64,
    pub bounds_kind: BoundsKind,
    pub label: String,
    pub statement: String,
}

#[derive(Serialize, Deserialize)]
struct BandWire {
    output: String,
    lower: Option<f64>,
    upper: Option<f64>,
    #[serde(default)]
    bounds: BoundsKind,
    label: String,
    statement: String,
}

impl Serialize for InterpretationBand {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        BandWire {
            output: self.output_name.clone(),
            lower: if self.lower == f64::NEG_INFINITY {
                None
            } else {
                Some(self.lower)
            },
            upper: if self.upper == f64::INFINITY {
                None
            } else {
                Some(self.upper)
            },
            bounds: self.bounds_kind,
            label: self.label.clone(),
            statement: self.statement.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for InterpretationBand {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = BandWire::deserialize(deserializer)?;
        let lower = wire.lower.unwrap_or(f64::NEG_INFINITY);
        let upper = wire.upper.unwrap_or(f64::INFINITY);
        if lower.is_nan() || upper.is_nan() || lower > upper {
            return Err(serde::de::Error::custom(format!(
                "band `{}`: lower must not exceed upper",
                wire.label
            )));
        }
        Ok(InterpretationBand {
            output_name: wire.output,
            lower,
            upper,
            bounds_kind: wire.bounds,
            label: wire.label,
            statement: wire.statement,
        })
    }
}

impl InterpretationBand {
    pub fn contains(&self, x: f64) -> bool {
        let above = if self.bounds_kind.lower_inclusive() {
            x >= self.lower
        } else {
            x > self.lower
        };
        let below = if self.bounds_kind.upper_inclusive() {
            x <= self.upper
        } else {
            x < self.upper
        };
        above && below
    }

    fn start_cut(&self) -> Cut {
        if self.bounds_kind.lower_inclusive() {
            Cut::before(self.lower)
        } else {
            Cut::after(self.lower)
        }
    }

    fn end_cut(&self) -> Cut {
        if self.bounds_kind.upper_inclusive() {
            Cut::after(self.upper)
        } else {
            Cut::before(self.upper)
        }
    }

    /// True when the band intersects the closed interval [lo, hi].
    pub fn intersects(&self, lo: f64, hi: f64) -> bool {
        let (s, e) = (self.start_cut(), self.end_cut());
        let (ilo, ihi) = (Cut::before(lo), Cut::after(hi));
        s < ihi && ilo < e
    }

    pub fn is_empty(&self) -> bool {
        self.end_cut() <= self.start_cut()
    }
}

impl fmt::Display for InterpretationBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lo = if self.bounds_kind.lower_inclusive() { '[' } else { '(' };
        let hi = if self.bounds_kind.upper_inclusive() { ']' } else { ')' };
        write!(
            f,
            "{}: {lo}{}, {}{hi} {}",
            self.output_name, self.lower, self.upper, self.label
        )
    }
}

/// A position on the real line strictly between representable numbers:
/// just before or just after `at`. Total order: before(x) < after(x) < before(y)
/// for x < y.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cut {
    at: f64,
    after: bool,
}

impl Cut {
    fn before(at: f64) -> Cut {
        Cut { at, after: false }
    }

    fn after(at: f64) -> Cut {
        Cut { at, after: true }
    }
}

impl Eq for Cut {}

impl PartialOrd for Cut {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cut {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at
            .partial_cmp(&other.at)
            .unwrap_or(Ordering::Equal)
            .then(self.after.cmp(&other.after))
    }
}

/// Look up the bands matching an exact value: at most one when bands are
/// non-overlapping, in band order.
pub fn lookup_value<'a>(bands: &'a [InterpretationBand], output: &str, x: f64) -> Vec<&'a InterpretationBand> {
    bands
        .iter()
        .filter(|b| b.output_name == output && b.contains(x))
        .collect()
}

/// Look up all bands intersecting the closed interval [lo, hi], in band order.
pub fn lookup_interval<'a>(
    bands: &'a [InterpretationBand],
    output: &str,
    lo: f64,
    hi: f64,
) -> Vec<&'a InterpretationBand> {
    bands
        .iter()
        .filter(|b| b.output_name == output && b.intersects(lo, hi))
        .collect()
}

/// Pairs of band indices (for one output name) that overlap.
pub fn overlapping_pairs(bands: &[InterpretationBand], output: &str) -> Vec<(usize, usize)> {
    let idx: Vec<usize> = bands
        .iter()
        .enumerate()
        .filter(|(_, b)| b.output_name == output)
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        for &j in &idx[k + 1..] {
            let (a, b) = (&bands[i], &bands[j]);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            if a.start_cut() < b.end_cut() && b.start_cut() < a.end_cut() {
                out.push((i, j));
            }
        }
    }
    out
}

/// Check that the union of an output's bands covers the closed range
/// [range_lo, range_hi] with no gaps. Returns a human-readable description
/// of the first gap, or None when fully covered.
pub fn coverage_gap(
    bands: &[InterpretationBand],
    output: &str,
    range_lo: f64,
    range_hi: f64,
) -> Option<String> {
    let mut spans: Vec<(Cut, Cut)> = bands
        .iter()
        .filter(|b| b.output_name == output && !b.is_empty())
        .map(|b| (b.start_cut(), b.end_cut()))
        .collect();
    if spans.is_empty() {
        return Some(format!(
            "output `{output}` has no bands covering [{range_lo}, {range_hi}]"
        ));
    }
    spans.sort_by(|a, b| a.0.cmp(&b.0));

    // Sweep from the low edge of the declared range. `frontier` is the first
    // position not yet covered.
    let goal = Cut::after(range_hi);
    let mut frontier = Cut::before(range_lo);
    for (start, end) in spans {
        if frontier >= goal {
            break;
        }
        if start > frontier {
            return Some(gap_text(output, frontier, start));
        }
        if end > frontier {
            frontier = end;
        }
    }
    if frontier < goal {
        return Some(format!(
            "output `{output}` is uncovered from {} to {range_hi}",
            cut_value(frontier)
        ));
    }
    None
}

fn cut_value(c: Cut) -> f64 {
    c.at
}

fn gap_text(output: &str, from: Cut, to: Cut) -> String {
    if from.at == to.at {
        format!("output `{output}` is uncovered at {}", from.at)
    } else {
        format!(
            "output `{output}` is uncovered between {} and {}",
            from.at, to.at
        )
    }
}

/// Convenience constructor for the common half-open `[lower, upper)` band.
pub fn band(output: &str, lower: f64, upper: f64, label: &str, statement: &str) -> InterpretationBand {
    InterpretationBand {
        output_name: output.to_string(),
        lower,
        upper,
        bounds_kind: BoundsKind::LowerIn,
        label: label.to_string(),
        statement: statement.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_bands() -> Vec<InterpretationBand> {
        vec![
            band("score", 0.0, 2.0, "low", "low risk"),
            band("score", 2.0, 3.0, "moderate", "moderate risk"),
            band("score", 3.0, 6.0, "high", "high risk"),
        ]
    }

    #[test]
    fn half_open_boundary_goes_to_upper_band() {
        let bands = three_bands();
        let hit = lookup_value(&bands, "score", 2.0);
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].label, "moderate");
    }

    #[test]
    fn interval_intersects_all_three() {
        let bands = three_bands();
        let hits = lookup_interval(&bands, "score", 1.0, 4.0);
        let labels: Vec<_> = hits.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["low", "moderate", "high"]);
    }

    #[test]
    fn value_outside_all_bands_matches_nothing() {
        let bands = three_bands();
        assert!(lookup_value(&bands, "score", 99.0).is_empty());
    }

    #[test]
    fn contiguous_half_open_bands_have_no_gap() {
        let bands = three_bands();
        assert_eq!(coverage_gap(&bands, "score", 0.0, 5.0), None);
    }

    #[test]
    fn gap_is_reported() {
        let bands = vec![
            band("score", 0.0, 1.0, "low", ""),
            band("score", 3.0, 5.0, "high", ""),
        ];
        // [0,1) + [3,5) leaves [1,3) uncovered
        let gap = coverage_gap(&bands, "score", 0.0, 5.0).unwrap();
        assert!(gap.contains("uncovered"), "{gap}");
    }

    #[test]
    fn point_gap_between_open_bounds() {
        let mut a = band("score", 0.0, 2.0, "low", "");
        a.bounds_kind = BoundsKind::NeitherIn; // (0, 2)
        let b = band("score", 2.0, 5.0, "high", "");
        // (0,2) + [2,5): 0 itself is uncovered
        let gap = coverage_gap(&[a, b], "score", 0.0, 5.0).unwrap();
        assert!(gap.contains("at 0"), "{gap}");
    }

    #[test]
    fn closed_upper_then_open_lower_is_contiguous() {
        let mut a = band("score", 0.0, 2.0, "low", "");
        a.bounds_kind = BoundsKind::BothIn; // [0, 2]
        let mut b = band("score", 2.0, 5.0, "high", "");
        b.bounds_kind = BoundsKind::UpperIn; // (2, 5]
        assert_eq!(coverage_gap(&[a, b], "score", 0.0, 5.0), None);
    }

    #[test]
    fn overlap_detected_only_on_shared_interior() {
        let bands = three_bands();
        assert!(overlapping_pairs(&bands, "score").is_empty());
        let mut overlapping = three_bands();
        overlapping[1].upper = 4.0; // [2,4) overlaps [3,6)
        assert_eq!(overlapping_pairs(&overlapping, "score"), vec![(1, 2)]);
    }

    #[test]
    fn closed_touching_endpoints_overlap() {
        let mut a = band("score", 0.0, 2.0, "low", "");
        a.bounds_kind = BoundsKind::BothIn;
        let b = band("score", 2.0, 5.0, "high", "");
        // [0,2] and [2,5) share the point 2
        assert_eq!(overlapping_pairs(&[a, b], "score"), vec![(0, 1)]);
    }

    #[test]
    fn infinite_bounds_cover_everything() {
        let bands = vec![band("score", f64::NEG_INFINITY, f64::INFINITY, "any", "")];
        assert_eq!(coverage_gap(&bands, "score", -1e9, 1e9), None);
        assert_eq!(lookup_value(&bands, "score", 42.0).len(), 1);
    }
}
