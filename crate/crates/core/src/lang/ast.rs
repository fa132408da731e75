use super::diag::Pos;
use serde::{Deserialize, Serialize};

/// Parameter kind plus its declared domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamKind {
    Boolean,
    Number {
        unit: Option<String>,
        domain: Option<NumDomain>,
    },
    /// Ordered, unique label set. The order is the comparison order.
    Enum { labels: Vec<String> },
}

/// Declared domain of a numeric parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NumDomain {
    /// Closed interval [min, max].
    Interval { min: f64, max: f64 },
    /// Explicit finite value set, in declaration order.
    Values(Vec<f64>),
}

impl NumDomain {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            NumDomain::Interval { min, max } => (*min, *max),
            NumDomain::Values(vs) => {
                let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match self {
            NumDomain::Interval { min, max } => x >= *min && x <= *max,
            NumDomain::Values(vs) => vs.iter().any(|v| *v == x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub kind: ParamKind,
    pub pos: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "=",
            BinOp::Ne => "!=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }

    pub fn is_comparison(&self) -> bool {
        matches!(
            self,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne
        )
    }

    pub fn is_arithmetic(&self) -> bool {
        matches!(self, BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnOp {
    Neg,
    Not,
}

/// Built-in numeric functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Exp,
    Ln,
    Log10,
    Sqrt,
    Pow,
    Abs,
    Min,
    Max,
    Floor,
    Ceil,
    Round,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "log10" => Func::Log10,
            "sqrt" => Func::Sqrt,
            "pow" => Func::Pow,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "floor" => Func::Floor,
            "ceil" => Func::Ceil,
            "round" => Func::Round,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Log10 => "log10",
            Func::Sqrt => "sqrt",
            Func::Pow => "pow",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Floor => "floor",
            Func::Ceil => "ceil",
            Func::Round => "round",
        }
    }

    /// (min, max) accepted argument count; `None` max means unbounded.
    pub fn arity(&self) -> (usize, Option<usize>) {
        match self {
            Func::Pow => (2, Some(2)),
            Func::Min | Func::Max => (2, None),
            _ => (1, Some(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    NumLit { value: f64, pos: Pos },
    BoolLit { value: bool, pos: Pos },
    /// Quoted label literal; its enum type is inferred from context.
    LabelLit { label: String, pos: Pos },
    /// A label literal with its ordinal resolved; produced by the checker,
    /// never by the parser.
    EnumLit { label: String, ord: usize, pos: Pos },
    Ident { name: String, pos: Pos },
    Unary { op: UnOp, operand: Box<Expr>, pos: Pos },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr>, pos: Pos },
    Conditional { cond: Box<Expr>, then: Box<Expr>, otherwise: Box<Expr>, pos: Pos },
    Call { func: Func, args: Vec<Expr>, pos: Pos },
}

impl Expr {
    pub fn pos(&self) -> Pos {
        match self {
            Expr::NumLit { pos, .. }
            | Expr::BoolLit { pos, .. }
            | Expr::LabelLit { pos, .. }
            | Expr::EnumLit { pos, .. }
            | Expr::Ident { pos, .. }
            | Expr::Unary { pos, .. }
            | Expr::Binary { pos, .. }
            | Expr::Conditional { pos, .. }
            | Expr::Call { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetDecl {
    pub name: String,
    pub expr: Expr,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDecl {
    pub name: String,
    pub expr: Expr,
    /// Declared closed range of the output, used by band coverage checks
    /// and as the reference range in digests.
    pub declared_range: Option<(f64, f64)>,
    pub pos: Pos,
}

/// A parsed calculator program: parameters, intermediate bindings, outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalcProgram {
    pub params: Vec<ParamDecl>,
    pub lets: Vec<LetDecl>,
    pub outputs: Vec<OutputDecl>,
}

impl CalcProgram {
    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&OutputDecl> {
        self.outputs.iter().find(|o| o.name == name)
    }
}
