use super::ast::*;
use super::diag::Diagnostic;
use super::parser::parse;
use super::types::{output_types, typecheck, Ty};
use std::collections::HashMap;

/// A program that has passed the type checker, with every quoted enum label
/// resolved to its ordinal. Evaluators take this type, so "prog type-checks"
/// holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedProgram {
    prog: CalcProgram,
    output_tys: Vec<(String, Ty)>,
}

impl CheckedProgram {
    pub fn new(prog: CalcProgram) -> Result<Self, Vec<Diagnostic>> {
        let diags = typecheck(&prog);
        if !diags.is_empty() {
            return Err(diags);
        }
        let output_tys = output_types(&prog);
        let lowered = lower(&prog);
        Ok(CheckedProgram {
            prog: lowered,
            output_tys,
        })
    }

    pub fn program(&self) -> &CalcProgram {
        &self.prog
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.prog.params
    }

    pub fn outputs(&self) -> &[OutputDecl] {
        &self.prog.outputs
    }

    pub fn output_types(&self) -> &[(String, Ty)] {
        &self.output_tys
    }
}

/// Parse and check in one step. A parse failure surfaces as a single-element
/// diagnostic list.
pub fn compile(source: &str) -> Result<CheckedProgram, Vec<Diagnostic>> {
    let prog = parse(source).map_err(|d| vec![d])?;
    CheckedProgram::new(prog)
}

/// Rewrite every `LabelLit` into an `EnumLit` carrying its ordinal. Mirrors
/// the checker's hint flow; only called on programs that typecheck, where a
/// domain is guaranteed to reach every label.
fn lower(prog: &CalcProgram) -> CalcProgram {
    let mut env: HashMap<String, Vec<String>> = HashMap::new();
    for p in &prog.params {
        if let ParamKind::Enum { labels } = &p.kind {
            env.insert(p.name.clone(), labels.clone());
        }
    }
    // Lets can carry enum types through conditionals; track those domains too.
    let mut lowered_lets = Vec::new();
    for l in &prog.lets {
        let expr = lower_expr(&l.expr, &env, None);
        if let Some(domain) = enum_domain_of(&expr, &env) {
            env.insert(l.name.clone(), domain);
        }
        lowered_lets.push(LetDecl {
            name: l.name.clone(),
            expr,
            pos: l.pos,
        });
    }
    let lowered_outputs = prog
        .outputs
        .iter()
        .map(|o| OutputDecl {
            name: o.name.clone(),
            expr: lower_expr(&o.expr, &env, None),
            declared_range: o.declared_range,
            pos: o.pos,
        })
        .collect();
    CalcProgram {
        params: prog.params.clone(),
        lets: lowered_lets,
        outputs: lowered_outputs,
    }
}

fn enum_domain_of(expr: &Expr, env: &HashMap<String, Vec<String>>) -> Option<Vec<String>> {
    match expr {
        Expr::Ident { name, .. } => env.get(name).cloned(),
        Expr::Conditional { then, otherwise, .. } => {
            enum_domain_of(then, env).or_else(|| enum_domain_of(otherwise, env))
        }
        _ => None,
    }
}

fn lower_expr(expr: &Expr, env: &HashMap<String, Vec<String>>, hint: Option<&[String]>) -> Expr {
    match expr {
        Expr::LabelLit { label, pos } => {
            let ord = hint
                .and_then(|labels| labels.iter().position(|l| l == label))
                .unwrap_or(usize::MAX);
            debug_assert!(ord != usize::MAX, "checker guarantees label resolution");
            Expr::EnumLit {
                label: label.clone(),
                ord,
                pos: *pos,
            }
        }
        Expr::Binary { op, lhs, rhs, pos } if op.is_comparison() => {
            let lhs_domain = enum_domain_of(lhs, env);
            let rhs_domain = enum_domain_of(rhs, env);
            let domain = lhs_domain.or(rhs_domain);
            Expr::Binary {
                op: *op,
                lhs: Box::new(lower_expr(lhs, env, domain.as_deref())),
                rhs: Box::new(lower_expr(rhs, env, domain.as_deref())),
                pos: *pos,
            }
        }
        Expr::Conditional {
            cond,
            then,
            otherwise,
            pos,
        } => {
            let arm_domain = enum_domain_of(then, env)
                .or_else(|| enum_domain_of(otherwise, env))
                .or_else(|| hint.map(|h| h.to_vec()));
            Expr::Conditional {
                cond: Box::new(lower_expr(cond, env, None)),
                then: Box::new(lower_expr(then, env, arm_domain.as_deref())),
                otherwise: Box::new(lower_expr(otherwise, env, arm_domain.as_deref())),
                pos: *pos,
            }
        }
        Expr::Unary { op, operand, pos } => Expr::Unary {
            op: *op,
            operand: Box::new(lower_expr(operand, env, None)),
            pos: *pos,
        },
        Expr::Binary { op, lhs, rhs, pos } => Expr::Binary {
            op: *op,
            lhs: Box::new(lower_expr(lhs, env, None)),
            rhs: Box::new(lower_expr(rhs, env, None)),
            pos: *pos,
        },
        Expr::Call { func, args, pos } => Expr::Call {
            func: *func,
            args: args.iter().map(|a| lower_expr(a, env, None)).collect(),
            pos: *pos,
        },
        other => other.clone(),
    }
}
