use super::ast::*;
use super::diag::{DiagCode, Diagnostic};
use std::collections::HashMap;
use std::fmt;

/// Static type of an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Ty {
    Number,
    Boolean,
    /// Structural: two enum types are equal iff their ordered label lists are.
    Enum(Vec<String>),
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ty::Number => f.write_str("number"),
            Ty::Boolean => f.write_str("boolean"),
            Ty::Enum(labels) => write!(f, "enum {{{}}}", labels.join(", ")),
        }
    }
}

/// Check every expression in the program. Returns an empty list iff well-typed.
pub fn typecheck(prog: &CalcProgram) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut env: HashMap<String, Ty> = HashMap::new();
    for p in &prog.params {
        let ty = match &p.kind {
            ParamKind::Boolean => Ty::Boolean,
            ParamKind::Number { .. } => Ty::Number,
            ParamKind::Enum { labels } => Ty::Enum(labels.clone()),
        };
        env.insert(p.name.clone(), ty);
    }
    for l in &prog.lets {
        let ty = infer(&l.expr, &env, None, &mut diags);
        // an unresolved let still occupies its name so later uses don't cascade
        env.insert(l.name.clone(), ty.unwrap_or(Ty::Number));
    }
    for o in &prog.outputs {
        if let Some(ty) = infer(&o.expr, &env, None, &mut diags) {
            match ty {
                Ty::Number | Ty::Boolean => {}
                Ty::Enum(_) => diags.push(Diagnostic::new(
                    o.expr.pos(),
                    DiagCode::Type,
                    format!("output `{}` has an enum type; outputs must be number or boolean", o.name),
                )),
            }
            if o.declared_range.is_some() && ty == Ty::Boolean {
                diags.push(Diagnostic::new(
                    o.pos,
                    DiagCode::Type,
                    format!("output `{}` declares a numeric range but is boolean", o.name),
                ));
            }
        }
    }
    diags
}

/// Bottom-up inference with an optional expected type, which is how quoted
/// enum-label literals acquire their type. Returns None after reporting, so
/// a single mistake does not cascade.
fn infer(
    expr: &Expr,
    env: &HashMap<String, Ty>,
    hint: Option<&Ty>,
    diags: &mut Vec<Diagnostic>,
) -> Option<Ty> {
    match expr {
        Expr::NumLit { .. } => Some(Ty::Number),
        Expr::BoolLit { .. } => Some(Ty::Boolean),
        Expr::LabelLit { label, pos } => match hint {
            Some(Ty::Enum(labels)) => {
                if labels.iter().any(|l| l == label) {
                    Some(Ty::Enum(labels.clone()))
                } else {
                    diags.push(Diagnostic::new(
                        *pos,
                        DiagCode::Type,
                        format!(
                            "label \"{label}\" is not a member of enum {{{}}}",
                            labels.join(", ")
                        ),
                    ));
                    None
                }
            }
            _ => {
                diags.push(Diagnostic::new(
                    *pos,
                    DiagCode::Type,
                    format!(
                        "cannot determine the enum type of \"{label}\"; compare it against an enum param"
                    ),
                ));
                None
            }
        },
        // Resolved literals only exist post-lowering; re-checking one behaves
        // like the unresolved form.
        Expr::EnumLit { label, pos, .. } => infer(
            &Expr::LabelLit {
                label: label.clone(),
                pos: *pos,
            },
            env,
            hint,
            diags,
        ),
        Expr::Ident { name, .. } => env.get(name).cloned(),
        Expr::Unary { op, operand, pos } => {
            let want = match op {
                UnOp::Neg => Ty::Number,
                UnOp::Not => Ty::Boolean,
            };
            let got = infer(operand, env, Some(&want), diags)?;
            if got != want {
                diags.push(Diagnostic::new(
                    *pos,
                    DiagCode::Type,
                    format!(
                        "`{}` expects {want}, got {got}",
                        match op {
                            UnOp::Neg => "-",
                            UnOp::Not => "not",
                        }
                    ),
                ));
                return None;
            }
            Some(want)
        }
        Expr::Binary { op, lhs, rhs, pos } => {
            if op.is_arithmetic() {
                let lt = expect(lhs, env, &Ty::Number, op.symbol(), diags);
                let rt = expect(rhs, env, &Ty::Number, op.symbol(), diags);
                lt?;
                rt?;
                Some(Ty::Number)
            } else if op.is_comparison() {
                // Infer the side that can stand alone first; a bare label
                // literal picks its type up from the other side.
                let (first, second) = if matches!(**lhs, Expr::LabelLit { .. }) {
                    (rhs, lhs)
                } else {
                    (lhs, rhs)
                };
                let ft = infer(first, env, None, diags)?;
                let st = infer(second, env, Some(&ft), diags)?;
                match (&ft, &st) {
                    (Ty::Number, Ty::Number) => Some(Ty::Boolean),
                    (Ty::Enum(a), Ty::Enum(b)) if a == b => Some(Ty::Boolean),
                    (Ty::Enum(_), Ty::Enum(_)) => {
                        diags.push(Diagnostic::new(
                            *pos,
                            DiagCode::Type,
                            format!("`{}` compares different enums: {ft} vs {st}", op.symbol()),
                        ));
                        None
                    }
                    _ => {
                        diags.push(Diagnostic::new(
                            *pos,
                            DiagCode::Type,
                            format!(
                                "`{}` compares numbers or same-enum operands, got {ft} and {st}",
                                op.symbol()
                            ),
                        ));
                        None
                    }
                }
            } else {
                // and / or
                let lt = expect(lhs, env, &Ty::Boolean, op.symbol(), diags);
                let rt = expect(rhs, env, &Ty::Boolean, op.symbol(), diags);
                lt?;
                rt?;
                Some(Ty::Boolean)
            }
        }
        Expr::Conditional {
            cond,
            then,
            otherwise,
            pos,
        } => {
            expect(cond, env, &Ty::Boolean, "?:", diags);
            let (first, second) = if matches!(**then, Expr::LabelLit { .. }) {
                (otherwise, then)
            } else {
                (then, otherwise)
            };
            let ft = infer(first, env, hint, diags)?;
            let st = infer(second, env, Some(&ft), diags)?;
            if ft != st {
                diags.push(Diagnostic::new(
                    *pos,
                    DiagCode::Type,
                    format!("conditional arms have different types: {ft} vs {st}"),
                ));
                return None;
            }
            Some(ft)
        }
        Expr::Call { func, args, .. } => {
            let mut ok = true;
            for arg in args {
                if expect(arg, env, &Ty::Number, func.name(), diags).is_none() {
                    ok = false;
                }
            }
            if ok {
                Some(Ty::Number)
            } else {
                None
            }
        }
    }
}

fn expect(
    expr: &Expr,
    env: &HashMap<String, Ty>,
    want: &Ty,
    context: &str,
    diags: &mut Vec<Diagnostic>,
) -> Option<Ty> {
    let got = infer(expr, env, Some(want), diags)?;
    if &got != want {
        diags.push(Diagnostic::new(
            expr.pos(),
            DiagCode::Type,
            format!("`{context}` expects {want}, got {got}"),
        ));
        return None;
    }
    Some(got)
}

/// Convenience: the static type of each output, in declaration order.
/// Call only on a program that typechecks cleanly.
pub fn output_types(prog: &CalcProgram) -> Vec<(String, Ty)> {
    let mut env: HashMap<String, Ty> = HashMap::new();
    for p in &prog.params {
        let ty = match &p.kind {
            ParamKind::Boolean => Ty::Boolean,
            ParamKind::Number { .. } => Ty::Number,
            ParamKind::Enum { labels } => Ty::Enum(labels.clone()),
        };
        env.insert(p.name.clone(), ty);
    }
    let mut sink = Vec::new();
    for l in &prog.lets {
        let ty = infer(&l.expr, &env, None, &mut sink).unwrap_or(Ty::Number);
        env.insert(l.name.clone(), ty);
    }
    prog.outputs
        .iter()
        .map(|o| {
            let ty = infer(&o.expr, &env, None, &mut sink).unwrap_or(Ty::Number);
            (o.name.clone(), ty)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::fixtures;
    use crate::lang::parser::parse;

    #[test]
    fn f1_typechecks_clean() {
        let prog = parse(fixtures::F1_SOURCE).unwrap();
        assert!(typecheck(&prog).is_empty());
    }

    #[test]
    fn f2_typechecks_clean() {
        let prog = parse(fixtures::F2_SOURCE).unwrap();
        assert!(typecheck(&prog).is_empty());
    }

    #[test]
    fn arithmetic_on_boolean_flagged() {
        let prog = parse("output s = true + 1;").unwrap();
        let diags = typecheck(&prog);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, DiagCode::Type);
        assert!(diags[0].message.contains("boolean"));
    }

    #[test]
    fn conditional_arm_mismatch_flagged() {
        let prog = parse("param a: boolean;\noutput s = a ? 1 : false;").unwrap();
        let diags = typecheck(&prog);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("arms"));
    }

    #[test]
    fn enum_compared_against_member_label() {
        let prog = parse(
            "param sex: enum {male, female};\noutput s = sex = \"male\" ? 1 : 0;",
        )
        .unwrap();
        assert!(typecheck(&prog).is_empty());
    }

    #[test]
    fn enum_compared_against_unknown_label() {
        let prog = parse(
            "param sex: enum {male, female};\noutput s = sex = \"other\" ? 1 : 0;",
        )
        .unwrap();
        let diags = typecheck(&prog);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("other"));
    }

    #[test]
    fn enum_output_rejected() {
        let prog = parse("param sex: enum {male, female};\noutput s = sex;").unwrap();
        let diags = typecheck(&prog);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("enum"));
    }

    #[test]
    fn boolean_comparison_rejected() {
        let prog = parse("param a: boolean;\nparam b: boolean;\noutput s = a = b ? 1 : 0;").unwrap();
        let diags = typecheck(&prog);
        assert!(!diags.is_empty());
    }

    #[test]
    fn orphan_label_literal_rejected() {
        let prog = parse("output s = \"male\" = \"male\" ? 1 : 0;").unwrap();
        let diags = typecheck(&prog);
        assert!(!diags.is_empty());
    }
}
