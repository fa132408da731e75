//! The restricted calculator expression language: a line-oriented notation
//! for published clinical score formulas, with a parser, a type checker, an
//! exact point evaluator, and a sound interval evaluator for partially
//! unknown inputs.

pub mod ast;
mod checked;
pub mod diag;
mod eval;
pub mod fixtures;
mod interval;
mod lexer;
mod parser;
pub mod types;
pub mod value;

pub use checked::{compile, CheckedProgram};
pub use diag::{DiagCode, Diagnostic, Pos};
pub use eval::eval_point;
pub use interval::eval_interval;
pub use parser::parse;
pub use types::{typecheck, Ty};
pub use value::{
    Binding, BindingEntry, EvalError, EvalOutcome, OutcomeValue, OutputResult, PointValue,
};
