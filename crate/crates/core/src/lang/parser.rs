use super::ast::*;
use super::diag::{DiagCode, Diagnostic, Pos};
use super::lexer::{lex, Spanned, Tok};
use std::collections::HashSet;

/// Parse CalcLang source into a program.
///
/// Scope rules are enforced here: every identifier must refer to a previously
/// declared param or let, so the result is cycle-free by construction.
pub fn parse(source: &str) -> Result<CalcProgram, Diagnostic> {
    let toks = lex(source)?;
    Parser::new(toks).program()
}

struct Parser {
    toks: Vec<Spanned>,
    at: usize,
    declared: HashSet<String>,
}

impl Parser {
    fn new(toks: Vec<Spanned>) -> Self {
        Parser {
            toks,
            at: 0,
            declared: HashSet::new(),
        }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].pos
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<Spanned, Diagnostic> {
        if self.peek() == want {
            Ok(self.bump())
        } else {
            Err(Diagnostic::new(
                self.pos(),
                DiagCode::Syntax,
                format!("expected {what}, found {}", self.peek().describe()),
            ))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Pos), Diagnostic> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.bump();
                Ok((name, pos))
            }
            other => Err(Diagnostic::new(
                pos,
                DiagCode::Syntax,
                format!("expected {what}, found {}", other.describe()),
            )),
        }
    }

    /// Numeric literal with optional leading minus, for domains and ranges.
    fn signed_number(&mut self) -> Result<f64, Diagnostic> {
        let neg = if matches!(self.peek(), Tok::Minus) {
            self.bump();
            true
        } else {
            false
        };
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(n) => {
                self.bump();
                Ok(if neg { -n } else { n })
            }
            other => Err(Diagnostic::new(
                pos,
                DiagCode::Syntax,
                format!("expected a number, found {}", other.describe()),
            )),
        }
    }

    fn declare(&mut self, name: &str, pos: Pos, role: &str) -> Result<(), Diagnostic> {
        if !self.declared.insert(name.to_string()) {
            return Err(Diagnostic::new(
                pos,
                DiagCode::Duplicate,
                format!("{role} `{name}` conflicts with an earlier declaration"),
            ));
        }
        Ok(())
    }

    fn program(&mut self) -> Result<CalcProgram, Diagnostic> {
        let mut params = Vec::new();
        let mut lets = Vec::new();
        let mut outputs: Vec<OutputDecl> = Vec::new();
        loop {
            match self.peek() {
                Tok::Param => params.push(self.param_decl()?),
                Tok::Let => lets.push(self.let_decl()?),
                Tok::Output => outputs.push(self.output_decl(&outputs)?),
                Tok::Eof => break,
                other => {
                    return Err(Diagnostic::new(
                        self.pos(),
                        DiagCode::Syntax,
                        format!(
                            "expected `param`, `let`, or `output`, found {}",
                            other.describe()
                        ),
                    ));
                }
            }
        }
        if outputs.is_empty() {
            return Err(Diagnostic::new(
                self.pos(),
                DiagCode::Syntax,
                "program declares no outputs; at least one `output` is required",
            ));
        }
        Ok(CalcProgram {
            params,
            lets,
            outputs,
        })
    }

    fn param_decl(&mut self) -> Result<ParamDecl, Diagnostic> {
        let start = self.pos();
        self.bump(); // param
        let (name, name_pos) = self.expect_ident("a parameter name")?;
        self.expect(&Tok::Colon, "`:`")?;
        let kind = match self.peek().clone() {
            Tok::Boolean => {
                self.bump();
                ParamKind::Boolean
            }
            Tok::Number => {
                self.bump();
                let mut unit = None;
                if matches!(self.peek(), Tok::Unit) {
                    self.bump();
                    let pos = self.pos();
                    match self.peek().clone() {
                        Tok::Str(s) => {
                            self.bump();
                            unit = Some(s);
                        }
                        other => {
                            return Err(Diagnostic::new(
                                pos,
                                DiagCode::Syntax,
                                format!("expected a quoted unit string, found {}", other.describe()),
                            ));
                        }
                    }
                }
                let mut domain = None;
                if matches!(self.peek(), Tok::In) {
                    self.bump();
                    domain = Some(self.num_domain()?);
                }
                ParamKind::Number { unit, domain }
            }
            Tok::Enum => {
                self.bump();
                self.expect(&Tok::LBrace, "`{`")?;
                let mut labels = Vec::new();
                loop {
                    let (label, pos) = self.expect_ident("an enum label")?;
                    if labels.contains(&label) {
                        return Err(Diagnostic::new(
                            pos,
                            DiagCode::Duplicate,
                            format!("duplicate enum label `{label}`"),
                        ));
                    }
                    labels.push(label);
                    if matches!(self.peek(), Tok::Comma) {
                        self.bump();
                    } else {
                        break;
                    }
                }
                self.expect(&Tok::RBrace, "`}`")?;
                ParamKind::Enum { labels }
            }
            other => {
                return Err(Diagnostic::new(
                    self.pos(),
                    DiagCode::Syntax,
                    format!(
                        "expected `boolean`, `number`, or `enum`, found {}",
                        other.describe()
                    ),
                ));
            }
        };
        self.expect(&Tok::Semi, "`;`")?;
        self.declare(&name, name_pos, "parameter")?;
        Ok(ParamDecl {
            name,
            kind,
            pos: start,
        })
    }

    fn num_domain(&mut self) -> Result<NumDomain, Diagnostic> {
        match self.peek() {
            Tok::LBracket => {
                let pos = self.pos();
                self.bump();
                let min = self.signed_number()?;
                self.expect(&Tok::Comma, "`,`")?;
                let max = self.signed_number()?;
                self.expect(&Tok::RBracket, "`]`")?;
                if min > max {
                    return Err(Diagnostic::new(
                        pos,
                        DiagCode::Range,
                        format!("domain [{min}, {max}] has min > max"),
                    ));
                }
                Ok(NumDomain::Interval { min, max })
            }
            Tok::LBrace => {
                self.bump();
                let mut values = Vec::new();
                loop {
                    let pos = self.pos();
                    let v = self.signed_number()?;
                    if values.contains(&v) {
                        return Err(Diagnostic::new(
                            pos,
                            DiagCode::Duplicate,
                            format!("duplicate domain value `{v}`"),
                        ));
                    }
                    values.push(v);
                    if matches!(self.peek(), Tok::Comma) {
                        self.bump();
                    } else {
                        break;
                    }
                }
                self.expect(&Tok::RBrace, "`}`")?;
                Ok(NumDomain::Values(values))
            }
            other => Err(Diagnostic::new(
                self.pos(),
                DiagCode::Syntax,
                format!(
                    "expected `[min, max]` or `{{v1, v2, ...}}`, found {}",
                    other.describe()
                ),
            )),
        }
    }

    fn let_decl(&mut self) -> Result<LetDecl, Diagnostic> {
        let start = self.pos();
        self.bump(); // let
        let (name, name_pos) = self.expect_ident("a let name")?;
        self.expect(&Tok::Assign, "`=`")?;
        let expr = self.expr()?;
        self.expect(&Tok::Semi, "`;`")?;
        self.declare(&name, name_pos, "let binding")?;
        Ok(LetDecl {
            name,
            expr,
            pos: start,
        })
    }

    fn output_decl(&mut self, earlier: &[OutputDecl]) -> Result<OutputDecl, Diagnostic> {
        let start = self.pos();
        self.bump(); // output
        let (name, name_pos) = self.expect_ident("an output name")?;
        if earlier.iter().any(|o| o.name == name) {
            return Err(Diagnostic::new(
                name_pos,
                DiagCode::Duplicate,
                format!("duplicate output `{name}`"),
            ));
        }
        self.expect(&Tok::Assign, "`=`")?;
        let expr = self.expr()?;
        let mut declared_range = None;
        if matches!(self.peek(), Tok::Range) {
            let pos = self.pos();
            self.bump();
            self.expect(&Tok::LBracket, "`[`")?;
            let lo = self.signed_number()?;
            self.expect(&Tok::Comma, "`,`")?;
            let hi = self.signed_number()?;
            self.expect(&Tok::RBracket, "`]`")?;
            if lo > hi {
                return Err(Diagnostic::new(
                    pos,
                    DiagCode::Range,
                    format!("range [{lo}, {hi}] has min > max"),
                ));
            }
            declared_range = Some((lo, hi));
        }
        self.expect(&Tok::Semi, "`;`")?;
        Ok(OutputDecl {
            name,
            expr,
            declared_range,
            pos: start,
        })
    }

    // Expression grammar, loosest to tightest:
    //   conditional > or > and > comparison (non-associative) > additive > multiplicative > unary > primary
    fn expr(&mut self) -> Result<Expr, Diagnostic> {
        self.conditional()
    }

    fn conditional(&mut self) -> Result<Expr, Diagnostic> {
        let cond = self.or_expr()?;
        if matches!(self.peek(), Tok::Question) {
            let pos = self.pos();
            self.bump();
            let then = self.conditional()?;
            self.expect(&Tok::Colon, "`:`")?;
            let otherwise = self.conditional()?;
            Ok(Expr::Conditional {
                cond: Box::new(cond),
                then: Box::new(then),
                otherwise: Box::new(otherwise),
                pos,
            })
        } else {
            Ok(cond)
        }
    }

    fn or_expr(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.and_expr()?;
        while matches!(self.peek(), Tok::Or) {
            let pos = self.pos();
            self.bump();
            let rhs = self.and_expr()?;
            lhs = Expr::Binary {
                op: BinOp::Or,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                pos,
            };
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.cmp_expr()?;
        while matches!(self.peek(), Tok::And) {
            let pos = self.pos();
            self.bump();
            let rhs = self.cmp_expr()?;
            lhs = Expr::Binary {
                op: BinOp::And,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                pos,
            };
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> Result<Expr, Diagnostic> {
        let lhs = self.add_expr()?;
        let op = match self.peek() {
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            Tok::Assign => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            _ => return Ok(lhs),
        };
        let pos = self.pos();
        self.bump();
        let rhs = self.add_expr()?;
        Ok(Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
            pos,
        })
    }

    fn add_expr(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            let pos = self.pos();
            self.bump();
            let rhs = self.mul_expr()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                pos,
            };
        }
        Ok(lhs)
    }

    fn mul_expr(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            let pos = self.pos();
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                pos,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, Diagnostic> {
        match self.peek() {
            Tok::Minus => {
                let pos = self.pos();
                self.bump();
                let operand = self.unary()?;
                Ok(Expr::Unary {
                    op: UnOp::Neg,
                    operand: Box::new(operand),
                    pos,
                })
            }
            Tok::Not => {
                let pos = self.pos();
                self.bump();
                let operand = self.unary()?;
                Ok(Expr::Unary {
                    op: UnOp::Not,
                    operand: Box::new(operand),
                    pos,
                })
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, Diagnostic> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(value) => {
                self.bump();
                Ok(Expr::NumLit { value, pos })
            }
            Tok::True => {
                self.bump();
                Ok(Expr::BoolLit { value: true, pos })
            }
            Tok::False => {
                self.bump();
                Ok(Expr::BoolLit { value: false, pos })
            }
            Tok::Str(label) => {
                self.bump();
                Ok(Expr::LabelLit { label, pos })
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if matches!(self.peek(), Tok::LParen) {
                    let func = Func::from_name(&name).ok_or_else(|| {
                        Diagnostic::new(
                            pos,
                            DiagCode::Scope,
                            format!("unknown function `{name}`"),
                        )
                    })?;
                    self.bump(); // (
                    let mut args = Vec::new();
                    if !matches!(self.peek(), Tok::RParen) {
                        loop {
                            args.push(self.expr()?);
                            if matches!(self.peek(), Tok::Comma) {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(&Tok::RParen, "`)`")?;
                    let (min, max) = func.arity();
                    let ok = args.len() >= min && max.map_or(true, |m| args.len() <= m);
                    if !ok {
                        let expect = match max {
                            Some(m) if m == min => format!("{min}"),
                            Some(m) => format!("{min} to {m}"),
                            None => format!("at least {min}"),
                        };
                        return Err(Diagnostic::new(
                            pos,
                            DiagCode::Arity,
                            format!(
                                "`{}` takes {expect} argument(s), got {}",
                                func.name(),
                                args.len()
                            ),
                        ));
                    }
                    Ok(Expr::Call { func, args, pos })
                } else {
                    if !self.declared.contains(&name) {
                        return Err(Diagnostic::new(
                            pos,
                            DiagCode::Scope,
                            format!("`{name}` is not a previously declared param or let"),
                        ));
                    }
                    Ok(Expr::Ident { name, pos })
                }
            }
            other => Err(Diagnostic::new(
                pos,
                DiagCode::Syntax,
                format!("expected an expression, found {}", other.describe()),
            )),
        }
    }
}
