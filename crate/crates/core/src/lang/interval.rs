use super::ast::*;
use super::checked::CheckedProgram;
use super::eval::{eval_expr, eval_point, validate_entry};
use super::value::*;
use crate::bands::{lookup_interval, lookup_value, InterpretationBand};
use std::collections::{BTreeMap, BTreeSet};

/// Outward widening applied after each machine operation, in ulps. The libm
/// routines (exp, ln, pow) carry more rounding error than the basic ops.
const WIDEN_ARITH: u32 = 2;
const WIDEN_LIBM: u32 = 4;

/// Largest candidate list a single unknown may contribute to exhaustive
/// enumeration, and the cap on the total number of enumerated completions.
const ENUM_SLOT_CAP: usize = 16;
const ENUM_PRODUCT_CAP: usize = 65536;

/// Evaluate a program against a binding in which some parameters are
/// intervals, candidate sets, or entirely unknown.
///
/// Guarantees:
/// - With every parameter exact, the result equals `eval_point` exactly.
/// - With only discrete unknowns (booleans, enums, finite value sets) and a
///   completion count within the enumeration cap, ranges are the exact
///   min/max over all completions.
/// - Otherwise ranges are a sound over-approximation: every completion that
///   evaluates without error lands inside the reported range.
///
/// Completions that would fail (division by zero, log of a non-positive
/// number, out-of-range output) are excluded from the ranges; when that can
/// happen, `partial` is set and `partial_errors` describes why. If every
/// completion fails, the whole evaluation fails.
pub fn eval_interval(
    prog: &CheckedProgram,
    binding: &Binding,
    bands: &[InterpretationBand],
) -> Result<EvalOutcome, EvalError> {
    let slots = validate_interval_binding(prog, binding)?;
    if slots.iter().all(|s| matches!(s.space, Space::Fixed(_))) {
        let exact: Binding = slots
            .iter()
            .map(|s| {
                let v = match &s.space {
                    Space::Fixed(v) => v.clone(),
                    _ => unreachable!(),
                };
                (s.name.clone(), BindingEntry::Exact(v))
            })
            .collect();
        return eval_point(prog, &exact, bands);
    }
    if let Some(count) = enumeration_size(&slots) {
        return eval_by_enumeration(prog, &slots, count, bands);
    }
    eval_by_propagation(prog, &slots, bands)
}

/// One parameter's completion space after binding validation.
struct Slot {
    name: String,
    space: Space,
}

enum Space {
    Fixed(PointValue),
    /// Finitely many candidate values.
    Choice(Vec<PointValue>),
    /// A continuous numeric interval.
    Span { lo: f64, hi: f64 },
}

fn validate_interval_binding(
    prog: &CheckedProgram,
    binding: &Binding,
) -> Result<Vec<Slot>, EvalError> {
    for name in binding.keys() {
        if prog.program().param(name).is_none() {
            return Err(EvalError::binding(name, "not a declared parameter"));
        }
    }
    let mut slots = Vec::new();
    for p in prog.params() {
        let entry = binding
            .get(&p.name)
            .ok_or_else(|| EvalError::binding(&p.name, "no value bound"))?;
        slots.push(Slot {
            name: p.name.clone(),
            space: validate_space(p, entry)?,
        });
    }
    Ok(slots)
}

fn validate_space(p: &ParamDecl, entry: &BindingEntry) -> Result<Space, EvalError> {
    match entry {
        BindingEntry::Exact(_) => validate_entry(p, entry).map(Space::Fixed),
        BindingEntry::Interval { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(EvalError::binding(
                    &p.name,
                    format!("[{lo}, {hi}] is not a valid interval"),
                ));
            }
            let domain = match &p.kind {
                ParamKind::Number { domain, .. } => domain,
                _ => {
                    return Err(EvalError::binding(
                        &p.name,
                        format!("interval bound for a {} parameter", p.kind.describe()),
                    ))
                }
            };
            match domain {
                None => span_or_fixed(lo, hi),
                Some(NumDomain::Interval { min, max }) => {
                    let (lo, hi) = (lo.max(*min), hi.min(*max));
                    if lo > hi {
                        return Err(EvalError::binding(
                            &p.name,
                            "interval does not intersect the declared domain",
                        ));
                    }
                    span_or_fixed(lo, hi)
                }
                Some(NumDomain::Values(vs)) => {
                    let picks: Vec<PointValue> = vs
                        .iter()
                        .filter(|v| **v >= lo && **v <= hi)
                        .map(|v| PointValue::Num(*v))
                        .collect();
                    if picks.is_empty() {
                        return Err(EvalError::binding(
                            &p.name,
                            "interval contains none of the declared values",
                        ));
                    }
                    Ok(choice_or_fixed(picks))
                }
            }
        }
        BindingEntry::Candidates(labels) => {
            let declared = match &p.kind {
                ParamKind::Enum { labels } => labels,
                _ => {
                    return Err(EvalError::binding(
                        &p.name,
                        format!("candidate labels for a {} parameter", p.kind.describe()),
                    ))
                }
            };
            let mut seen = BTreeSet::new();
            let mut picks = Vec::new();
            for l in labels {
                let ord = declared.iter().position(|d| d == l).ok_or_else(|| {
                    EvalError::binding(&p.name, format!("\"{l}\" is not one of the declared labels"))
                })?;
                if seen.insert(ord) {
                    picks.push((ord, l.clone()));
                }
            }
            if picks.is_empty() {
                return Err(EvalError::binding(&p.name, "empty candidate set"));
            }
            picks.sort_by_key(|(ord, _)| *ord);
            Ok(choice_or_fixed(
                picks
                    .into_iter()
                    .map(|(ord, label)| PointValue::Enum { label, ord })
                    .collect(),
            ))
        }
        BindingEntry::Unknown => match &p.kind {
            ParamKind::Boolean => Ok(Space::Choice(vec![
                PointValue::Bool(false),
                PointValue::Bool(true),
            ])),
            ParamKind::Enum { labels } => Ok(Space::Choice(
                labels
                    .iter()
                    .enumerate()
                    .map(|(ord, l)| PointValue::Enum {
                        label: l.clone(),
                        ord,
                    })
                    .collect(),
            )),
            ParamKind::Number { domain, .. } => match domain {
                None => Err(EvalError::Unboundable {
                    param: p.name.clone(),
                }),
                Some(NumDomain::Interval { min, max }) => span_or_fixed(*min, *max),
                Some(NumDomain::Values(vs)) => Ok(choice_or_fixed(
                    vs.iter().map(|v| PointValue::Num(*v)).collect(),
                )),
            },
        },
    }
}

fn span_or_fixed(lo: f64, hi: f64) -> Result<Space, EvalError> {
    if lo == hi {
        Ok(Space::Fixed(PointValue::Num(lo)))
    } else {
        Ok(Space::Span { lo, hi })
    }
}

fn choice_or_fixed(mut picks: Vec<PointValue>) -> Space {
    if picks.len() == 1 {
        Space::Fixed(picks.pop().unwrap())
    } else {
        Space::Choice(picks)
    }
}

/// The completion count when every unknown is a small finite choice.
fn enumeration_size(slots: &[Slot]) -> Option<usize> {
    let mut total = 1usize;
    for s in slots {
        match &s.space {
            Space::Fixed(_) => {}
            Space::Span { .. } => return None,
            Space::Choice(vs) => {
                if vs.len() > ENUM_SLOT_CAP {
                    return None;
                }
                total = total.checked_mul(vs.len())?;
                if total > ENUM_PRODUCT_CAP {
                    return None;
                }
            }
        }
    }
    Some(total)
}

fn eval_by_enumeration(
    prog: &CheckedProgram,
    slots: &[Slot],
    count: usize,
    bands: &[InterpretationBand],
) -> Result<EvalOutcome, EvalError> {
    let choices: Vec<(usize, &Vec<PointValue>)> = slots
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match &s.space {
            Space::Choice(vs) => Some((i, vs)),
            _ => None,
        })
        .collect();
    let mut base: Binding = slots
        .iter()
        .map(|s| {
            let v = match &s.space {
                Space::Fixed(v) => v.clone(),
                Space::Choice(vs) => vs[0].clone(),
                Space::Span { .. } => unreachable!(),
            };
            (s.name.clone(), BindingEntry::Exact(v))
        })
        .collect();

    let mut hulls: Vec<Option<Hull>> = vec![None; prog.outputs().len()];
    let mut ctx = Ctx::default();
    let mut first_err: Option<EvalError> = None;
    let mut any_ok = false;

    for mut index in 0..count {
        for (slot_idx, vs) in &choices {
            let pick = index % vs.len();
            index /= vs.len();
            base.insert(
                slots[*slot_idx].name.clone(),
                BindingEntry::Exact(vs[pick].clone()),
            );
        }
        match eval_point(prog, &base, &[]) {
            Ok(outcome) => {
                any_ok = true;
                for (i, out) in outcome.outputs.iter().enumerate() {
                    let h = hulls[i].get_or_insert_with(Hull::default);
                    h.absorb(&out.value);
                }
            }
            Err(e) => {
                ctx.note(e.to_string());
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if !any_ok {
        return Err(first_err.expect("at least one completion was tried"));
    }
    let outputs = prog
        .outputs()
        .iter()
        .zip(hulls)
        .map(|(o, h)| finish_output(o, h.expect("every successful run fills all outputs"), bands))
        .collect();
    Ok(EvalOutcome {
        outputs,
        partial: ctx.partial,
        partial_errors: ctx.notes,
    })
}

/// Running min/max (or boolean truth set) across enumerated completions.
#[derive(Default, Clone)]
struct Hull {
    lo: f64,
    hi: f64,
    has_num: bool,
    seen_true: bool,
    seen_false: bool,
}

impl Hull {
    fn absorb(&mut self, v: &OutcomeValue) {
        match v {
            OutcomeValue::Number { value } => {
                if self.has_num {
                    self.lo = self.lo.min(*value);
                    self.hi = self.hi.max(*value);
                } else {
                    self.lo = *value;
                    self.hi = *value;
                    self.has_num = true;
                }
            }
            OutcomeValue::Boolean { value } => {
                if *value {
                    self.seen_true = true;
                } else {
                    self.seen_false = true;
                }
            }
            _ => unreachable!("point evaluation yields exact values"),
        }
    }

    fn into_value(self) -> OutcomeValue {
        if self.has_num {
            if self.lo == self.hi {
                OutcomeValue::Number { value: self.lo }
            } else {
                OutcomeValue::Range {
                    lo: self.lo,
                    hi: self.hi,
                }
            }
        } else {
            match (self.seen_true, self.seen_false) {
                (true, false) => OutcomeValue::Boolean { value: true },
                (false, true) => OutcomeValue::Boolean { value: false },
                _ => OutcomeValue::EitherBool,
            }
        }
    }
}

fn finish_output(decl: &OutputDecl, hull: Hull, bands: &[InterpretationBand]) -> OutputResult {
    let value = hull.into_value();
    let matched: Vec<InterpretationBand> = match &value {
        OutcomeValue::Number { value } => lookup_value(bands, &decl.name, *value)
            .into_iter()
            .cloned()
            .collect(),
        OutcomeValue::Range { lo, hi } => lookup_interval(bands, &decl.name, *lo, *hi)
            .into_iter()
            .cloned()
            .collect(),
        _ => Vec::new(),
    };
    OutputResult {
        name: decl.name.clone(),
        value,
        bands: matched,
    }
}

// ---------------------------------------------------------------------------
// Abstract propagation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
struct NumRange {
    lo: f64,
    hi: f64,
}

impl NumRange {
    fn exact(v: f64) -> Self {
        NumRange { lo: v, hi: v }
    }

    fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    fn contains_zero(&self) -> bool {
        self.lo <= 0.0 && self.hi >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum AbsVal {
    Num(NumRange),
    Bool { can_true: bool, can_false: bool },
    /// Candidate ordinals within one enum's declared label order.
    Enum(BTreeSet<usize>),
}

impl AbsVal {
    fn exact_bool(b: bool) -> Self {
        AbsVal::Bool {
            can_true: b,
            can_false: !b,
        }
    }

    fn num(&self) -> NumRange {
        match self {
            AbsVal::Num(r) => *r,
            _ => unreachable!("checker guarantees a number here"),
        }
    }
}

#[derive(Default)]
struct Ctx {
    partial: bool,
    notes: Vec<String>,
}

impl Ctx {
    fn note(&mut self, msg: impl Into<String>) {
        self.partial = true;
        let msg = msg.into();
        if self.notes.len() < 8 && !self.notes.contains(&msg) {
            self.notes.push(msg);
        }
    }
}

fn step_down(x: f64, ulps: u32) -> f64 {
    let mut x = x;
    for _ in 0..ulps {
        x = x.next_down();
    }
    x
}

fn step_up(x: f64, ulps: u32) -> f64 {
    let mut x = x;
    for _ in 0..ulps {
        x = x.next_up();
    }
    x
}

/// Turn raw bounds into a finite, outward-widened range. Infinite bounds mean
/// overflow: if even the inner bound overflows every completion fails, and a
/// one-sided overflow clamps to the finite limit with a partial note.
fn finish_range(lo: f64, hi: f64, ulps: u32, op: &str, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if lo.is_nan() || hi.is_nan() {
        return Err(EvalError::domain(op, "undefined result"));
    }
    if lo == f64::INFINITY || hi == f64::NEG_INFINITY {
        return Err(EvalError::domain(op, "result overflows for every completion"));
    }
    let mut lo = lo;
    let mut hi = hi;
    if lo == f64::NEG_INFINITY {
        ctx.note(format!("{op}: result can overflow negatively"));
        lo = f64::MIN;
    }
    if hi == f64::INFINITY {
        ctx.note(format!("{op}: result can overflow"));
        hi = f64::MAX;
    }
    lo = step_down(lo, ulps).max(f64::MIN);
    hi = step_up(hi, ulps).min(f64::MAX);
    Ok(NumRange { lo, hi })
}

fn add_range(a: NumRange, b: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    finish_range(a.lo + b.lo, a.hi + b.hi, WIDEN_ARITH, "addition", ctx)
}

fn sub_range(a: NumRange, b: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    finish_range(a.lo - b.hi, a.hi - b.lo, WIDEN_ARITH, "subtraction", ctx)
}

fn mul_range(a: NumRange, b: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    let products = [a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi];
    let lo = products.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = products.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    finish_range(lo, hi, WIDEN_ARITH, "multiplication", ctx)
}

fn div_range(a: NumRange, b: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if b.is_point() && b.lo == 0.0 {
        return Err(EvalError::domain("division", "division by zero"));
    }
    if b.contains_zero() {
        ctx.note("division: divisor range includes zero");
        if b.lo == 0.0 || b.hi == 0.0 {
            // One-sided: divide by the open side, letting the near-zero end
            // overflow into a clamped bound.
            let side = if b.lo == 0.0 {
                NumRange {
                    lo: f64::MIN_POSITIVE,
                    hi: b.hi,
                }
            } else {
                NumRange {
                    lo: b.lo,
                    hi: -f64::MIN_POSITIVE,
                }
            };
            return div_strict(a, side, ctx);
        }
        return Ok(NumRange {
            lo: f64::MIN,
            hi: f64::MAX,
        });
    }
    div_strict(a, b, ctx)
}

fn div_strict(a: NumRange, b: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    let quotients = [a.lo / b.lo, a.lo / b.hi, a.hi / b.lo, a.hi / b.hi];
    let lo = quotients.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = quotients.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    finish_range(lo, hi, WIDEN_ARITH, "division", ctx)
}

fn exp_range(a: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    let r = finish_range(a.lo.exp(), a.hi.exp(), WIDEN_LIBM, "exp", ctx)?;
    Ok(NumRange {
        lo: r.lo.max(0.0),
        hi: r.hi,
    })
}

fn ln_range(a: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if a.hi <= 0.0 {
        return Err(EvalError::domain("ln", "ln requires a positive argument"));
    }
    let mut a = a;
    if a.lo <= 0.0 {
        ctx.note("ln: argument range includes non-positive values");
        a.lo = f64::MIN_POSITIVE;
    }
    finish_range(a.lo.ln(), a.hi.ln(), WIDEN_LIBM, "ln", ctx)
}

fn log10_range(a: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if a.hi <= 0.0 {
        return Err(EvalError::domain("log10", "log10 requires a positive argument"));
    }
    let mut a = a;
    if a.lo <= 0.0 {
        ctx.note("log10: argument range includes non-positive values");
        a.lo = f64::MIN_POSITIVE;
    }
    finish_range(a.lo.log10(), a.hi.log10(), WIDEN_LIBM, "log10", ctx)
}

fn sqrt_range(a: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if a.hi < 0.0 {
        return Err(EvalError::domain("sqrt", "sqrt requires a non-negative argument"));
    }
    let mut a = a;
    if a.lo < 0.0 {
        ctx.note("sqrt: argument range includes negative values");
        a.lo = 0.0;
    }
    let r = finish_range(a.lo.sqrt(), a.hi.sqrt(), WIDEN_LIBM, "sqrt", ctx)?;
    Ok(NumRange {
        lo: r.lo.max(0.0),
        hi: r.hi,
    })
}

fn abs_range(a: NumRange) -> NumRange {
    if a.lo >= 0.0 {
        a
    } else if a.hi <= 0.0 {
        NumRange {
            lo: -a.hi,
            hi: -a.lo,
        }
    } else {
        NumRange {
            lo: 0.0,
            hi: (-a.lo).max(a.hi),
        }
    }
}

fn pow_range(b: NumRange, e: NumRange, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if e.is_point() && e.lo.fract() == 0.0 && e.lo.abs() <= i32::MAX as f64 {
        return pow_int_range(b, e.lo as i32, ctx);
    }
    if b.lo > 0.0 {
        let l = ln_range(b, ctx)?;
        let p = mul_range(e, l, ctx)?;
        return exp_range(p, ctx);
    }
    // The base can be zero or negative while the exponent is uncertain or
    // fractional. Negative bases with non-integer exponents fail, zero with a
    // negative exponent fails; bound the survivors by magnitude.
    ctx.note("pow: base range reaches non-positive values");
    let mag = abs_range(b);
    if mag.hi == 0.0 {
        if e.hi < 0.0 {
            return Err(EvalError::domain("pow", "zero base with a negative exponent"));
        }
        return Ok(NumRange { lo: 0.0, hi: 1.0 });
    }
    if e.lo < 0.0 {
        return Ok(NumRange {
            lo: f64::MIN,
            hi: f64::MAX,
        });
    }
    let pos = NumRange {
        lo: f64::MIN_POSITIVE.min(mag.hi),
        hi: mag.hi,
    };
    let l = ln_range(pos, ctx)?;
    let p = mul_range(e, l, ctx)?;
    let m = exp_range(p, ctx)?;
    let hi = m.hi.max(1.0);
    Ok(NumRange { lo: -hi, hi })
}

fn pow_int_range(b: NumRange, n: i32, ctx: &mut Ctx) -> Result<NumRange, EvalError> {
    if n == 0 {
        return Ok(NumRange::exact(1.0));
    }
    if n < 0 {
        let p = pow_int_range(b, -n, ctx)?;
        return div_range(NumRange::exact(1.0), p, ctx);
    }
    // powf mirrors what point evaluation computes, so its rounding error is
    // what the widening has to cover.
    let (lo, hi) = if n % 2 == 0 {
        let m = abs_range(b);
        (m.lo.powf(n as f64), m.hi.powf(n as f64))
    } else {
        (b.lo.powf(n as f64), b.hi.powf(n as f64))
    };
    finish_range(lo, hi, WIDEN_LIBM, "pow", ctx)
}

fn join(a: AbsVal, b: AbsVal) -> AbsVal {
    match (a, b) {
        (AbsVal::Num(x), AbsVal::Num(y)) => AbsVal::Num(NumRange {
            lo: x.lo.min(y.lo),
            hi: x.hi.max(y.hi),
        }),
        (
            AbsVal::Bool {
                can_true: t1,
                can_false: f1,
            },
            AbsVal::Bool {
                can_true: t2,
                can_false: f2,
            },
        ) => AbsVal::Bool {
            can_true: t1 || t2,
            can_false: f1 || f2,
        },
        (AbsVal::Enum(mut x), AbsVal::Enum(y)) => {
            x.extend(y);
            AbsVal::Enum(x)
        }
        _ => unreachable!("checker guarantees matching arm types"),
    }
}

fn eval_by_propagation(
    prog: &CheckedProgram,
    slots: &[Slot],
    bands: &[InterpretationBand],
) -> Result<EvalOutcome, EvalError> {
    let mut ctx = Ctx::default();
    let mut env: BTreeMap<String, AbsVal> = BTreeMap::new();
    let mut point_env: BTreeMap<String, PointValue> = BTreeMap::new();
    for s in slots {
        let v = match &s.space {
            Space::Fixed(v) => {
                point_env.insert(s.name.clone(), v.clone());
                match v {
                    PointValue::Num(n) => AbsVal::Num(NumRange::exact(*n)),
                    PointValue::Bool(b) => AbsVal::exact_bool(*b),
                    PointValue::Enum { ord, .. } => AbsVal::Enum([*ord].into_iter().collect()),
                }
            }
            Space::Span { lo, hi } => AbsVal::Num(NumRange { lo: *lo, hi: *hi }),
            Space::Choice(vs) => match &vs[0] {
                PointValue::Num(_) => {
                    let lo = vs
                        .iter()
                        .map(|v| match v {
                            PointValue::Num(n) => *n,
                            _ => unreachable!(),
                        })
                        .fold(f64::INFINITY, f64::min);
                    let hi = vs
                        .iter()
                        .map(|v| match v {
                            PointValue::Num(n) => *n,
                            _ => unreachable!(),
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    AbsVal::Num(NumRange { lo, hi })
                }
                PointValue::Bool(_) => AbsVal::Bool {
                    can_true: vs.contains(&PointValue::Bool(true)),
                    can_false: vs.contains(&PointValue::Bool(false)),
                },
                PointValue::Enum { .. } => AbsVal::Enum(
                    vs.iter()
                        .map(|v| match v {
                            PointValue::Enum { ord, .. } => *ord,
                            _ => unreachable!(),
                        })
                        .collect(),
                ),
            },
        };
        env.insert(s.name.clone(), v);
    }

    for l in &prog.program().lets {
        // Keep a parallel exact environment alive for subtrees that only
        // touch exact parameters; those evaluate without widening.
        if free_vars(&l.expr)
            .iter()
            .all(|v| point_env.contains_key(v.as_str()))
        {
            if let Ok(v) = eval_expr(&l.expr, &point_env) {
                point_env.insert(l.name.clone(), v.clone());
                env.insert(
                    l.name.clone(),
                    match v {
                        PointValue::Num(n) => AbsVal::Num(NumRange::exact(n)),
                        PointValue::Bool(b) => AbsVal::exact_bool(b),
                        PointValue::Enum { ord, .. } => {
                            AbsVal::Enum([ord].into_iter().collect())
                        }
                    },
                );
                continue;
            }
        }
        let v = aeval(&l.expr, &env, &mut ctx)?;
        env.insert(l.name.clone(), v);
    }

    let mut outputs = Vec::new();
    for o in prog.outputs() {
        let v = if free_vars(&o.expr)
            .iter()
            .all(|name| point_env.contains_key(name.as_str()))
        {
            match eval_expr(&o.expr, &point_env) {
                Ok(PointValue::Num(n)) => AbsVal::Num(NumRange::exact(n)),
                Ok(PointValue::Bool(b)) => AbsVal::exact_bool(b),
                Ok(PointValue::Enum { .. }) => {
                    return Err(EvalError::domain("output", "enum-valued output"))
                }
                Err(e) => return Err(e),
            }
        } else {
            aeval(&o.expr, &env, &mut ctx)?
        };
        let value = match v {
            AbsVal::Num(mut r) => {
                if let Some((lo, hi)) = o.declared_range {
                    if r.hi < lo || r.lo > hi {
                        return Err(EvalError::domain(
                            "range",
                            format!(
                                "output {} range [{}, {}] lies outside its declared range [{}, {}]",
                                o.name, r.lo, r.hi, lo, hi
                            ),
                        ));
                    }
                    if r.lo < lo || r.hi > hi {
                        ctx.note(format!(
                            "output {}: completions outside the declared range [{}, {}] fail",
                            o.name, lo, hi
                        ));
                        r.lo = r.lo.max(lo);
                        r.hi = r.hi.min(hi);
                    }
                }
                if r.is_point() {
                    OutcomeValue::Number { value: r.lo }
                } else {
                    OutcomeValue::Range { lo: r.lo, hi: r.hi }
                }
            }
            AbsVal::Bool {
                can_true,
                can_false,
            } => match (can_true, can_false) {
                (true, false) => OutcomeValue::Boolean { value: true },
                (false, true) => OutcomeValue::Boolean { value: false },
                _ => OutcomeValue::EitherBool,
            },
            AbsVal::Enum(_) => return Err(EvalError::domain("output", "enum-valued output")),
        };
        let matched: Vec<InterpretationBand> = match &value {
            OutcomeValue::Number { value } => lookup_value(bands, &o.name, *value)
                .into_iter()
                .cloned()
                .collect(),
            OutcomeValue::Range { lo, hi } => lookup_interval(bands, &o.name, *lo, *hi)
                .into_iter()
                .cloned()
                .collect(),
            _ => Vec::new(),
        };
        outputs.push(OutputResult {
            name: o.name.clone(),
            value,
            bands: matched,
        });
    }
    Ok(EvalOutcome {
        outputs,
        partial: ctx.partial,
        partial_errors: ctx.notes,
    })
}

fn free_vars(expr: &Expr) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    collect_vars(expr, &mut out);
    out
}

fn collect_vars(expr: &Expr, out: &mut BTreeSet<String>) {
    match expr {
        Expr::Ident { name, .. } => {
            out.insert(name.clone());
        }
        Expr::Unary { operand, .. } => collect_vars(operand, out),
        Expr::Binary { lhs, rhs, .. } => {
            collect_vars(lhs, out);
            collect_vars(rhs, out);
        }
        Expr::Conditional {
            cond,
            then,
            otherwise,
            ..
        } => {
            collect_vars(cond, out);
            collect_vars(then, out);
            collect_vars(otherwise, out);
        }
        Expr::Call { args, .. } => {
            for a in args {
                collect_vars(a, out);
            }
        }
        _ => {}
    }
}

fn aeval(
    expr: &Expr,
    env: &BTreeMap<String, AbsVal>,
    ctx: &mut Ctx,
) -> Result<AbsVal, EvalError> {
    match expr {
        Expr::NumLit { value, .. } => Ok(AbsVal::Num(NumRange::exact(*value))),
        Expr::BoolLit { value, .. } => Ok(AbsVal::exact_bool(*value)),
        Expr::EnumLit { ord, .. } => Ok(AbsVal::Enum([*ord].into_iter().collect())),
        Expr::LabelLit { label, .. } => Err(EvalError::domain(
            "label",
            format!("unresolved label \"{label}\""),
        )),
        Expr::Ident { name, .. } => Ok(env
            .get(name)
            .unwrap_or_else(|| panic!("checker guarantees {name} is bound"))
            .clone()),
        Expr::Unary { op, operand, .. } => {
            let v = aeval(operand, env, ctx)?;
            match (op, v) {
                (UnOp::Neg, AbsVal::Num(r)) => Ok(AbsVal::Num(NumRange {
                    lo: -r.hi,
                    hi: -r.lo,
                })),
                (
                    UnOp::Not,
                    AbsVal::Bool {
                        can_true,
                        can_false,
                    },
                ) => Ok(AbsVal::Bool {
                    can_true: can_false,
                    can_false: can_true,
                }),
                _ => unreachable!("checker rejects ill-typed unary"),
            }
        }
        Expr::Binary { op, lhs, rhs, .. } => abinary(*op, lhs, rhs, env, ctx),
        Expr::Conditional {
            cond,
            then,
            otherwise,
            ..
        } => {
            let c = aeval(cond, env, ctx)?;
            let (can_true, can_false) = match c {
                AbsVal::Bool {
                    can_true,
                    can_false,
                } => (can_true, can_false),
                _ => unreachable!("checker requires a boolean condition"),
            };
            match (can_true, can_false) {
                (true, false) => aeval(then, env, ctx),
                (false, true) => aeval(otherwise, env, ctx),
                _ => {
                    let t = aeval(then, env, ctx);
                    let f = aeval(otherwise, env, ctx);
                    match (t, f) {
                        (Ok(t), Ok(f)) => Ok(join(t, f)),
                        (Ok(t), Err(e)) => {
                            ctx.note(format!("one conditional branch fails: {e}"));
                            Ok(t)
                        }
                        (Err(e), Ok(f)) => {
                            ctx.note(format!("one conditional branch fails: {e}"));
                            Ok(f)
                        }
                        (Err(e), Err(_)) => Err(e),
                    }
                }
            }
        }
        Expr::Call { func, args, .. } => acall(*func, args, env, ctx),
    }
}

fn abinary(
    op: BinOp,
    lhs: &Expr,
    rhs: &Expr,
    env: &BTreeMap<String, AbsVal>,
    ctx: &mut Ctx,
) -> Result<AbsVal, EvalError> {
    if matches!(op, BinOp::And | BinOp::Or) {
        let (lt, lf) = match aeval(lhs, env, ctx)? {
            AbsVal::Bool {
                can_true,
                can_false,
            } => (can_true, can_false),
            _ => unreachable!(),
        };
        let short = match op {
            BinOp::And => !lt,
            _ => !lf,
        };
        if short {
            return Ok(AbsVal::exact_bool(matches!(op, BinOp::Or)));
        }
        let rhs_val = aeval(rhs, env, ctx);
        let (rt, rf) = match rhs_val {
            Ok(AbsVal::Bool {
                can_true,
                can_false,
            }) => (can_true, can_false),
            Ok(_) => unreachable!(),
            Err(e) => {
                // Completions that short-circuit never reach the failing
                // side; if none can short-circuit, every completion fails.
                let can_short = match op {
                    BinOp::And => lf,
                    _ => lt,
                };
                if !can_short {
                    return Err(e);
                }
                ctx.note(format!("one side of {} fails: {e}", op.symbol()));
                return Ok(AbsVal::exact_bool(matches!(op, BinOp::Or)));
            }
        };
        return Ok(match op {
            BinOp::And => AbsVal::Bool {
                can_true: lt && rt,
                can_false: lf || rf,
            },
            _ => AbsVal::Bool {
                can_true: lt || rt,
                can_false: lf && rf,
            },
        });
    }
    let l = aeval(lhs, env, ctx)?;
    let r = aeval(rhs, env, ctx)?;
    if op.is_arithmetic() {
        let (a, b) = (l.num(), r.num());
        let out = match op {
            BinOp::Add => add_range(a, b, ctx)?,
            BinOp::Sub => sub_range(a, b, ctx)?,
            BinOp::Mul => mul_range(a, b, ctx)?,
            BinOp::Div => div_range(a, b, ctx)?,
            _ => unreachable!(),
        };
        return Ok(AbsVal::Num(out));
    }
    let (can_true, can_false) = match (op, &l, &r) {
        (BinOp::Eq, AbsVal::Enum(x), AbsVal::Enum(y)) => {
            let overlap = x.intersection(y).next().is_some();
            let both_same_single = x.len() == 1 && x == y;
            (overlap, !both_same_single)
        }
        (BinOp::Ne, AbsVal::Enum(x), AbsVal::Enum(y)) => {
            let overlap = x.intersection(y).next().is_some();
            let both_same_single = x.len() == 1 && x == y;
            (!both_same_single, overlap)
        }
        _ => {
            let (a, b) = (l.num(), r.num());
            match op {
                BinOp::Lt => (a.lo < b.hi, a.hi >= b.lo),
                BinOp::Le => (a.lo <= b.hi, a.hi > b.lo),
                BinOp::Gt => (a.hi > b.lo, a.lo <= b.hi),
                BinOp::Ge => (a.hi >= b.lo, a.lo < b.hi),
                BinOp::Eq => {
                    let overlap = a.lo <= b.hi && b.lo <= a.hi;
                    let same_point = a.is_point() && b.is_point() && a.lo == b.lo;
                    (overlap, !same_point)
                }
                BinOp::Ne => {
                    let overlap = a.lo <= b.hi && b.lo <= a.hi;
                    let same_point = a.is_point() && b.is_point() && a.lo == b.lo;
                    (!same_point, overlap)
                }
                _ => unreachable!(),
            }
        }
    };
    Ok(AbsVal::Bool {
        can_true,
        can_false,
    })
}

fn acall(
    func: Func,
    args: &[Expr],
    env: &BTreeMap<String, AbsVal>,
    ctx: &mut Ctx,
) -> Result<AbsVal, EvalError> {
    let mut vals = Vec::with_capacity(args.len());
    for a in args {
        vals.push(aeval(a, env, ctx)?.num());
    }
    let out = match func {
        Func::Exp => exp_range(vals[0], ctx)?,
        Func::Ln => ln_range(vals[0], ctx)?,
        Func::Log10 => log10_range(vals[0], ctx)?,
        Func::Sqrt => sqrt_range(vals[0], ctx)?,
        Func::Pow => pow_range(vals[0], vals[1], ctx)?,
        Func::Abs => abs_range(vals[0]),
        Func::Min => NumRange {
            lo: vals.iter().map(|r| r.lo).fold(f64::INFINITY, f64::min),
            hi: vals.iter().map(|r| r.hi).fold(f64::INFINITY, f64::min),
        },
        Func::Max => NumRange {
            lo: vals.iter().map(|r| r.lo).fold(f64::NEG_INFINITY, f64::max),
            hi: vals.iter().map(|r| r.hi).fold(f64::NEG_INFINITY, f64::max),
        },
        Func::Floor => NumRange {
            lo: vals[0].lo.floor(),
            hi: vals[0].hi.floor(),
        },
        Func::Ceil => NumRange {
            lo: vals[0].lo.ceil(),
            hi: vals[0].hi.ceil(),
        },
        Func::Round => NumRange {
            lo: vals[0].lo.round(),
            hi: vals[0].hi.round(),
        },
    };
    Ok(AbsVal::Num(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::band;
    use crate::lang::checked::compile;
    use crate::lang::fixtures;
    use proptest::prelude::*;

    fn bind(pairs: &[(&str, BindingEntry)]) -> Binding {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn flag_binding(known: &[(&str, bool)]) -> Binding {
        let mut b: Binding = ["flag_a", "flag_b", "flag_c", "flag_d", "flag_e"]
            .iter()
            .map(|f| (f.to_string(), BindingEntry::Unknown))
            .collect();
        for (name, v) in known {
            b.insert(name.to_string(), BindingEntry::flag(*v));
        }
        b
    }

    fn hull_of(outcome: &EvalOutcome, name: &str) -> (f64, f64) {
        outcome
            .output(name)
            .and_then(|o| o.value.numeric_hull())
            .unwrap()
    }

    #[test]
    fn all_exact_matches_point_evaluation() {
        let prog = compile(fixtures::F2_SOURCE).unwrap();
        let b = bind(&[
            ("age", BindingEntry::num(50.0)),
            ("smoker", BindingEntry::flag(true)),
        ]);
        let point = eval_point(&prog, &b, &[]).unwrap();
        let interval = eval_interval(&prog, &b, &[]).unwrap();
        assert_eq!(point, interval);
    }

    #[test]
    fn unknown_flags_enumerate_exactly() {
        let prog = compile(fixtures::F1_SOURCE).unwrap();
        let out = eval_interval(&prog, &flag_binding(&[("flag_a", true), ("flag_b", true)]), &[])
            .unwrap();
        assert_eq!(hull_of(&out, "score"), (2.0, 5.0));
        assert!(!out.partial);

        let out = eval_interval(&prog, &flag_binding(&[]), &[]).unwrap();
        assert_eq!(hull_of(&out, "score"), (0.0, 5.0));
    }

    #[test]
    fn two_true_one_unknown_matches_reference_interval() {
        let prog = compile(fixtures::F1_SOURCE).unwrap();
        let b = bind(&[
            ("flag_a", BindingEntry::flag(true)),
            ("flag_b", BindingEntry::flag(true)),
            ("flag_c", BindingEntry::Unknown),
            ("flag_d", BindingEntry::flag(false)),
            ("flag_e", BindingEntry::flag(false)),
        ]);
        let bands = vec![
            band("score", 0.0, 2.0, "low", "Low risk."),
            band("score", 2.0, 3.0, "moderate", "Moderate risk."),
            band("score", 3.0, 6.0, "high", "High risk."),
        ];
        let out = eval_interval(&prog, &b, &bands).unwrap();
        assert_eq!(hull_of(&out, "score"), (2.0, 3.0));
        let labels: Vec<&str> = out.outputs[0].bands.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, vec!["moderate", "high"]);
    }

    #[test]
    fn continuous_interval_bounds_the_logistic_model() {
        let prog = compile(fixtures::F2_SOURCE).unwrap();
        let b = bind(&[
            ("age", BindingEntry::Interval { lo: 40.0, hi: 60.0 }),
            ("smoker", BindingEntry::flag(true)),
        ]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        let (lo, hi) = hull_of(&out, "risk");
        let at_40 = 0.549833997312; // logistic(-3 + 0.05*40 + 1.2)
        let at_60 = 0.768524783499; // logistic(-3 + 0.05*60 + 1.2)
        // The reference values are 12-digit decimal pins, so allow slack of
        // their truncation error when checking containment.
        assert!(lo <= at_40 + 1e-9 && at_40 <= hi + 1e-9);
        assert!(lo <= at_60 + 1e-9 && at_60 <= hi + 1e-9);
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!(hi - lo < 0.25, "hull [{lo}, {hi}] is unexpectedly wide");
    }

    #[test]
    fn interval_binding_is_clipped_to_the_domain() {
        let prog = compile(fixtures::F2_SOURCE).unwrap();
        let b = bind(&[
            ("age", BindingEntry::Interval { lo: 100.0, hi: 200.0 }),
            ("smoker", BindingEntry::flag(false)),
        ]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        let (lo, hi) = hull_of(&out, "risk");
        let at_100 = 0.880797077978;
        let at_120 = 0.952574126822;
        assert!(lo <= at_100 && hi >= at_120 - 1e-9);

        let b = bind(&[
            ("age", BindingEntry::Interval { lo: 200.0, hi: 300.0 }),
            ("smoker", BindingEntry::flag(false)),
        ]);
        assert!(eval_interval(&prog, &b, &[]).is_err());
    }

    #[test]
    fn unbounded_unknown_number_is_rejected() {
        let prog = compile("param x: number;\noutput y = x + 1;").unwrap();
        let b = bind(&[("x", BindingEntry::Unknown)]);
        let err = eval_interval(&prog, &b, &[]).unwrap_err();
        assert!(matches!(err, EvalError::Unboundable { ref param } if param == "x"));
    }

    #[test]
    fn division_risk_sets_partial() {
        let prog = compile("param x: number in [-1, 1];\noutput y = 1 / x;").unwrap();
        let b = bind(&[("x", BindingEntry::Unknown)]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        assert!(out.partial);
        assert!(!out.partial_errors.is_empty());
    }

    #[test]
    fn failing_branch_is_excluded_with_partial() {
        let prog =
            compile("param x: number in [-1, 1];\noutput y = x < 0 ? ln(x) : x + 1;").unwrap();
        let b = bind(&[("x", BindingEntry::Unknown)]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        assert!(out.partial);
        let (lo, hi) = hull_of(&out, "y");
        assert!(lo <= 1.0 && hi >= 2.0);
    }

    #[test]
    fn every_completion_failing_is_an_error() {
        let prog = compile("param x: number in [-5, -1];\noutput y = sqrt(x);").unwrap();
        let b = bind(&[("x", BindingEntry::Unknown)]);
        assert!(eval_interval(&prog, &b, &[]).is_err());
    }

    #[test]
    fn enum_candidates_enumerate() {
        let src = "param stage: enum {one, two, three};\noutput s = stage = \"one\" ? 1 : (stage = \"two\" ? 2 : 3);";
        let prog = compile(src).unwrap();
        let b = bind(&[(
            "stage",
            BindingEntry::Candidates(vec!["one".into(), "three".into()]),
        )]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        assert_eq!(hull_of(&out, "s"), (1.0, 3.0));
    }

    #[test]
    fn finite_value_domain_enumerates_exactly() {
        let src = "param pts: number in {0, 2, 5};\noutput d = pts * 10;";
        let prog = compile(src).unwrap();
        let b = bind(&[("pts", BindingEntry::Unknown)]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        assert_eq!(hull_of(&out, "d"), (0.0, 50.0));
        assert!(!out.partial);
    }

    #[test]
    fn mixed_discrete_and_continuous_is_sound() {
        let src = "param age: number unit \"years\" in [0, 120];\nparam sex: enum {male, female};\noutput v = (sex = \"female\" ? 0.85 : 1.0) * age;";
        let prog = compile(src).unwrap();
        let b = bind(&[
            ("age", BindingEntry::Interval { lo: 20.0, hi: 30.0 }),
            ("sex", BindingEntry::Unknown),
        ]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        let (lo, hi) = hull_of(&out, "v");
        assert!(lo <= 17.0 && hi >= 30.0);
        assert!(lo > 16.0 && hi < 31.0);
    }

    #[test]
    fn degenerate_interval_collapses_to_exact() {
        let prog = compile(fixtures::F2_SOURCE).unwrap();
        let b = bind(&[
            ("age", BindingEntry::Interval { lo: 50.0, hi: 50.0 }),
            ("smoker", BindingEntry::flag(true)),
        ]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        let exact = bind(&[
            ("age", BindingEntry::num(50.0)),
            ("smoker", BindingEntry::flag(true)),
        ]);
        let point = eval_point(&prog, &exact, &[]).unwrap();
        assert_eq!(out, point);
        assert!(matches!(
            out.output("risk").unwrap().value,
            OutcomeValue::Number { value } if (value - 0.668187772168).abs() < 1e-12
        ));
    }

    #[test]
    fn boolean_output_can_be_indeterminate() {
        let src = "param x: number in [0, 10];\noutput flagged = x > 5;";
        let prog = compile(src).unwrap();
        let b = bind(&[("x", BindingEntry::Unknown)]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        assert_eq!(out.outputs[0].value, OutcomeValue::EitherBool);
        let b = bind(&[("x", BindingEntry::Interval { lo: 6.0, hi: 9.0 })]);
        let out = eval_interval(&prog, &b, &[]).unwrap();
        assert_eq!(out.outputs[0].value, OutcomeValue::Boolean { value: true });
    }

    proptest! {
        /// Soundness: any point drawn from the bound box evaluates (when it
        /// evaluates at all) to a value inside the interval result.
        #[test]
        fn point_results_land_inside_interval_hulls(
            age_lo in 0.0f64..100.0,
            width in 0.0f64..20.0,
            t in 0.0f64..=1.0,
            smoker_known in any::<Option<bool>>(),
            smoker_sample in any::<bool>(),
        ) {
            let prog = compile(fixtures::F2_SOURCE).unwrap();
            let age_hi = (age_lo + width).min(120.0);
            let smoker_entry = match smoker_known {
                Some(b) => BindingEntry::flag(b),
                None => BindingEntry::Unknown,
            };
            let b = bind(&[
                ("age", BindingEntry::Interval { lo: age_lo, hi: age_hi }),
                ("smoker", smoker_entry),
            ]);
            let interval = eval_interval(&prog, &b, &[]).unwrap();
            let (lo, hi) = hull_of(&interval, "risk");

            let age_sample = age_lo + t * (age_hi - age_lo);
            let point_b = bind(&[
                ("age", BindingEntry::num(age_sample.min(age_hi))),
                ("smoker", BindingEntry::flag(smoker_known.unwrap_or(smoker_sample))),
            ]);
            let point = eval_point(&prog, &point_b, &[]).unwrap();
            let v = match point.outputs[0].value {
                OutcomeValue::Number { value } => value,
                _ => unreachable!(),
            };
            prop_assert!(lo <= v && v <= hi, "point {} outside hull [{}, {}]", v, lo, hi);
        }

        /// The same soundness property through division, pow, and sqrt.
        #[test]
        fn gnarly_expressions_stay_sound(
            x_lo in -4.0f64..4.0,
            width in 0.0f64..3.0,
            t in 0.0f64..=1.0,
        ) {
            let src = "param x: number in [-5, 5];\n\
                       let shifted = x + 6;\n\
                       output y = sqrt(shifted) + 1 / shifted + pow(shifted, 2) range [0, 200];";
            let prog = compile(src).unwrap();
            let x_hi = (x_lo + width).min(5.0);
            let b = bind(&[("x", BindingEntry::Interval { lo: x_lo, hi: x_hi })]);
            let interval = eval_interval(&prog, &b, &[]).unwrap();
            let (lo, hi) = hull_of(&interval, "y");

            let sample = x_lo + t * (x_hi - x_lo);
            let point_b = bind(&[("x", BindingEntry::num(sample.min(x_hi)))]);
            if let Ok(point) = eval_point(&prog, &point_b, &[]) {
                let v = match point.outputs[0].value {
                    OutcomeValue::Number { value } => value,
                    _ => unreachable!(),
                };
                prop_assert!(lo <= v && v <= hi, "point {} outside hull [{}, {}]", v, lo, hi);
            }
        }
    }
}
