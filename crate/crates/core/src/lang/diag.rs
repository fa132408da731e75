use serde::{Deserialize, Serialize};
use std::fmt;

/// A source position, 1-based line and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: u32,
    pub column: u32,
}

impl Pos {
    pub fn new(line: u32, column: u32) -> Self {
        Pos { line, column }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

/// Diagnostic codes, stable across releases so callers can match on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagCode {
    Lex,
    Syntax,
    Scope,
    Type,
    Arity,
    Duplicate,
    Range,
}

impl fmt::Display for DiagCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiagCode::Lex => "lex",
            DiagCode::Syntax => "syntax",
            DiagCode::Scope => "scope",
            DiagCode::Type => "type",
            DiagCode::Arity => "arity",
            DiagCode::Duplicate => "duplicate",
            DiagCode::Range => "range",
        };
        f.write_str(s)
    }
}

/// A single parse or type diagnostic. Serializes as `{line, column, code, message}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: u32,
    pub column: u32,
    pub code: DiagCode,
    pub message: String,
}

impl Diagnostic {
    pub fn new(pos: Pos, code: DiagCode, message: impl Into<String>) -> Self {
        Diagnostic {
            line: pos.line,
            column: pos.column,
            code,
            message: message.into(),
        }
    }

    pub fn pos(&self) -> Pos {
        Pos::new(self.line, self.column)
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: {} error: {}",
            self.line, self.column, self.code, self.message
        )
    }
}

impl std::error::Error for Diagnostic {}
