use super::ast::*;
use super::checked::CheckedProgram;
use super::value::*;
use crate::bands::{lookup_value, InterpretationBand};
use std::collections::BTreeMap;

/// Evaluate a program against exact bindings for every parameter.
///
/// Bindings are validated up front: every parameter must be present, exact,
/// of the declared kind, and inside the declared domain. Any arithmetic step
/// that leaves the finite range (division by zero, log of a non-positive
/// value, overflow) is a domain error, never a NaN that leaks into results.
pub fn eval_point(
    prog: &CheckedProgram,
    binding: &Binding,
    bands: &[InterpretationBand],
) -> Result<EvalOutcome, EvalError> {
    let mut env = validate_binding(prog, binding)?;
    for l in &prog.program().lets {
        let v = eval_expr(&l.expr, &env)?;
        env.insert(l.name.clone(), v);
    }
    let mut outputs = Vec::new();
    for o in prog.outputs() {
        let v = eval_expr(&o.expr, &env)?;
        if let (Some((lo, hi)), PointValue::Num(n)) = (o.declared_range, &v) {
            if *n < lo || *n > hi {
                return Err(EvalError::domain(
                    "range",
                    format!("output {} = {} is outside its declared range [{}, {}]", o.name, n, lo, hi),
                ));
            }
        }
        let value = match v {
            PointValue::Num(n) => OutcomeValue::Number { value: n },
            PointValue::Bool(b) => OutcomeValue::Boolean { value: b },
            PointValue::Enum { .. } => {
                return Err(EvalError::domain("output", "enum-valued output"))
            }
        };
        let matched = match &value {
            OutcomeValue::Number { value } => lookup_value(bands, &o.name, *value),
            _ => Vec::new(),
        };
        outputs.push(OutputResult {
            name: o.name.clone(),
            value,
            bands: matched.into_iter().cloned().collect(),
        });
    }
    Ok(EvalOutcome {
        outputs,
        partial: false,
        partial_errors: Vec::new(),
    })
}

pub(crate) fn validate_binding(
    prog: &CheckedProgram,
    binding: &Binding,
) -> Result<BTreeMap<String, PointValue>, EvalError> {
    let mut env = BTreeMap::new();
    for p in prog.params() {
        let entry = binding
            .get(&p.name)
            .ok_or_else(|| EvalError::binding(&p.name, "no value bound"))?;
        let v = validate_entry(p, entry)?;
        env.insert(p.name.clone(), v);
    }
    for name in binding.keys() {
        if prog.program().param(name).is_none() {
            return Err(EvalError::binding(name, "not a declared parameter"));
        }
    }
    Ok(env)
}

pub(crate) fn validate_entry(p: &ParamDecl, entry: &BindingEntry) -> Result<PointValue, EvalError> {
    match (&p.kind, entry) {
        (ParamKind::Boolean, BindingEntry::Exact(PointValue::Bool(b))) => {
            Ok(PointValue::Bool(*b))
        }
        (ParamKind::Number { domain, .. }, BindingEntry::Exact(PointValue::Num(n))) => {
            if !n.is_finite() {
                return Err(EvalError::binding(&p.name, "value is not finite"));
            }
            if let Some(d) = domain {
                if !d.contains(*n) {
                    return Err(EvalError::binding(
                        &p.name,
                        format!("{} is outside the declared domain", n),
                    ));
                }
            }
            Ok(PointValue::Num(*n))
        }
        (ParamKind::Enum { labels }, BindingEntry::Exact(PointValue::Enum { label, .. })) => {
            match labels.iter().position(|l| l == label) {
                Some(ord) => Ok(PointValue::Enum {
                    label: label.clone(),
                    ord,
                }),
                None => Err(EvalError::binding(
                    &p.name,
                    format!("\"{}\" is not one of the declared labels", label),
                )),
            }
        }
        (_, BindingEntry::Exact(v)) => Err(EvalError::binding(
            &p.name,
            format!("expected a {} value, got {}", p.kind.describe(), v),
        )),
        (_, other) => Err(EvalError::binding(
            &p.name,
            format!("expected an exact value, got {}", other),
        )),
    }
}

pub(crate) fn eval_expr(
    expr: &Expr,
    env: &BTreeMap<String, PointValue>,
) -> Result<PointValue, EvalError> {
    match expr {
        Expr::NumLit { value, .. } => Ok(PointValue::Num(*value)),
        Expr::BoolLit { value, .. } => Ok(PointValue::Bool(*value)),
        Expr::EnumLit { label, ord, .. } => Ok(PointValue::Enum {
            label: label.clone(),
            ord: *ord,
        }),
        Expr::LabelLit { label, .. } => Err(EvalError::domain(
            "label",
            format!("unresolved label \"{}\"", label),
        )),
        Expr::Ident { name, .. } => Ok(env
            .get(name)
            .unwrap_or_else(|| panic!("checker guarantees {} is bound", name))
            .clone()),
        Expr::Unary { op, operand, .. } => {
            let v = eval_expr(operand, env)?;
            match (op, v) {
                (UnOp::Neg, PointValue::Num(n)) => finite(-n, "negation"),
                (UnOp::Not, PointValue::Bool(b)) => Ok(PointValue::Bool(!b)),
                _ => unreachable!("checker rejects ill-typed unary"),
            }
        }
        Expr::Binary { op, lhs, rhs, .. } => eval_binary(*op, lhs, rhs, env),
        Expr::Conditional {
            cond,
            then,
            otherwise,
            ..
        } => {
            let c = eval_expr(cond, env)?;
            match c {
                PointValue::Bool(true) => eval_expr(then, env),
                PointValue::Bool(false) => eval_expr(otherwise, env),
                _ => unreachable!("checker requires a boolean condition"),
            }
        }
        Expr::Call { func, args, .. } => eval_call(*func, args, env),
    }
}

fn eval_binary(
    op: BinOp,
    lhs: &Expr,
    rhs: &Expr,
    env: &BTreeMap<String, PointValue>,
) -> Result<PointValue, EvalError> {
    // and/or short-circuit; everything else is strict.
    if matches!(op, BinOp::And | BinOp::Or) {
        let l = eval_expr(lhs, env)?.as_bool();
        return match (op, l) {
            (BinOp::And, false) => Ok(PointValue::Bool(false)),
            (BinOp::Or, true) => Ok(PointValue::Bool(true)),
            _ => Ok(PointValue::Bool(eval_expr(rhs, env)?.as_bool())),
        };
    }
    let l = eval_expr(lhs, env)?;
    let r = eval_expr(rhs, env)?;
    match op {
        BinOp::Add => finite(l.as_num() + r.as_num(), "addition"),
        BinOp::Sub => finite(l.as_num() - r.as_num(), "subtraction"),
        BinOp::Mul => finite(l.as_num() * r.as_num(), "multiplication"),
        BinOp::Div => {
            let d = r.as_num();
            if d == 0.0 {
                return Err(EvalError::domain("division", "division by zero"));
            }
            finite(l.as_num() / d, "division")
        }
        BinOp::Lt => Ok(PointValue::Bool(l.as_num() < r.as_num())),
        BinOp::Le => Ok(PointValue::Bool(l.as_num() <= r.as_num())),
        BinOp::Gt => Ok(PointValue::Bool(l.as_num() > r.as_num())),
        BinOp::Ge => Ok(PointValue::Bool(l.as_num() >= r.as_num())),
        BinOp::Eq => Ok(PointValue::Bool(point_eq(&l, &r))),
        BinOp::Ne => Ok(PointValue::Bool(!point_eq(&l, &r))),
        BinOp::And | BinOp::Or => unreachable!(),
    }
}

fn point_eq(l: &PointValue, r: &PointValue) -> bool {
    match (l, r) {
        (PointValue::Num(a), PointValue::Num(b)) => a == b,
        (PointValue::Enum { ord: a, .. }, PointValue::Enum { ord: b, .. }) => a == b,
        _ => unreachable!("checker rejects mixed or boolean equality"),
    }
}

fn eval_call(
    func: Func,
    args: &[Expr],
    env: &BTreeMap<String, PointValue>,
) -> Result<PointValue, EvalError> {
    let mut vals = Vec::with_capacity(args.len());
    for a in args {
        vals.push(eval_expr(a, env)?.as_num());
    }
    let name = func.name();
    match func {
        Func::Exp => finite(vals[0].exp(), name),
        Func::Ln => {
            if vals[0] <= 0.0 {
                return Err(EvalError::domain(name, "ln requires a positive argument"));
            }
            finite(vals[0].ln(), name)
        }
        Func::Log10 => {
            if vals[0] <= 0.0 {
                return Err(EvalError::domain(name, "log10 requires a positive argument"));
            }
            finite(vals[0].log10(), name)
        }
        Func::Sqrt => {
            if vals[0] < 0.0 {
                return Err(EvalError::domain(name, "sqrt requires a non-negative argument"));
            }
            finite(vals[0].sqrt(), name)
        }
        Func::Pow => finite(vals[0].powf(vals[1]), name),
        Func::Abs => finite(vals[0].abs(), name),
        Func::Min => finite(vals.iter().cloned().fold(f64::INFINITY, f64::min), name),
        Func::Max => finite(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), name),
        Func::Floor => finite(vals[0].floor(), name),
        Func::Ceil => finite(vals[0].ceil(), name),
        Func::Round => finite(vals[0].round(), name),
    }
}

fn finite(n: f64, op: &str) -> Result<PointValue, EvalError> {
    if n.is_finite() {
        Ok(PointValue::Num(n))
    } else {
        Err(EvalError::domain(op, "result is not a finite number"))
    }
}

impl PointValue {
    fn as_num(&self) -> f64 {
        match self {
            PointValue::Num(n) => *n,
            _ => unreachable!("checker guarantees a number here"),
        }
    }

    fn as_bool(&self) -> bool {
        match self {
            PointValue::Bool(b) => *b,
            _ => unreachable!("checker guarantees a boolean here"),
        }
    }
}

impl ParamKind {
    pub(crate) fn describe(&self) -> &'static str {
        match self {
            ParamKind::Boolean => "boolean",
            ParamKind::Number { .. } => "number",
            ParamKind::Enum { .. } => "enum",
        }
    }
}
