use super::diag::{DiagCode, Diagnostic, Pos};

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    // keywords
    Param,
    Let,
    Output,
    Boolean,
    Number,
    Enum,
    Unit,
    In,
    Range,
    True,
    False,
    And,
    Or,
    Not,
    // punctuation and operators
    Colon,
    Semi,
    Comma,
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Question,
    Assign, // '='  (also the equality operator inside expressions)
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Le,
    Gt,
    Ge,
    Ne, // '!='
    // literals and identifiers
    Num(f64),
    Str(String),
    Ident(String),
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Num(n) => format!("number `{n}`"),
            Tok::Str(s) => format!("string \"{s}\""),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Eof => "end of input".to_string(),
            other => format!("`{}`", other.text()),
        }
    }

    fn text(&self) -> &'static str {
        match self {
            Tok::Param => "param",
            Tok::Let => "let",
            Tok::Output => "output",
            Tok::Boolean => "boolean",
            Tok::Number => "number",
            Tok::Enum => "enum",
            Tok::Unit => "unit",
            Tok::In => "in",
            Tok::Range => "range",
            Tok::True => "true",
            Tok::False => "false",
            Tok::And => "and",
            Tok::Or => "or",
            Tok::Not => "not",
            Tok::Colon => ":",
            Tok::Semi => ";",
            Tok::Comma => ",",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::Question => "?",
            Tok::Assign => "=",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::Ne => "!=",
            _ => "",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Spanned {
    pub tok: Tok,
    pub pos: Pos,
}

/// Tokenize a whole source text. `#` starts a comment running to end of line.
pub fn lex(source: &str) -> Result<Vec<Spanned>, Diagnostic> {
    let mut out = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = source.chars().peekable();

    macro_rules! push {
        ($tok:expr, $pos:expr) => {
            out.push(Spanned { tok: $tok, pos: $pos })
        };
    }

    while let Some(&c) = chars.peek() {
        let pos = Pos::new(line, col);
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            ':' => {
                chars.next();
                col += 1;
                push!(Tok::Colon, pos);
            }
            ';' => {
                chars.next();
                col += 1;
                push!(Tok::Semi, pos);
            }
            ',' => {
                chars.next();
                col += 1;
                push!(Tok::Comma, pos);
            }
            '(' => {
                chars.next();
                col += 1;
                push!(Tok::LParen, pos);
            }
            ')' => {
                chars.next();
                col += 1;
                push!(Tok::RParen, pos);
            }
            '[' => {
                chars.next();
                col += 1;
                push!(Tok::LBracket, pos);
            }
            ']' => {
                chars.next();
                col += 1;
                push!(Tok::RBracket, pos);
            }
            '{' => {
                chars.next();
                col += 1;
                push!(Tok::LBrace, pos);
            }
            '}' => {
                chars.next();
                col += 1;
                push!(Tok::RBrace, pos);
            }
            '?' => {
                chars.next();
                col += 1;
                push!(Tok::Question, pos);
            }
            '=' => {
                chars.next();
                col += 1;
                push!(Tok::Assign, pos);
            }
            '+' => {
                chars.next();
                col += 1;
                push!(Tok::Plus, pos);
            }
            '-' => {
                chars.next();
                col += 1;
                push!(Tok::Minus, pos);
            }
            '*' => {
                chars.next();
                col += 1;
                push!(Tok::Star, pos);
            }
            '/' => {
                chars.next();
                col += 1;
                push!(Tok::Slash, pos);
            }
            '<' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    push!(Tok::Le, pos);
                } else {
                    push!(Tok::Lt, pos);
                }
            }
            '>' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    push!(Tok::Ge, pos);
                } else {
                    push!(Tok::Gt, pos);
                }
            }
            '!' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    push!(Tok::Ne, pos);
                } else {
                    return Err(Diagnostic::new(
                        pos,
                        DiagCode::Lex,
                        "unexpected `!`; the inequality operator is `!=`".to_string(),
                    ));
                }
            }
            '"' => {
                chars.next();
                col += 1;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some('"') => {
                            col += 1;
                            break;
                        }
                        Some('\n') | None => {
                            return Err(Diagnostic::new(
                                pos,
                                DiagCode::Lex,
                                "unterminated string literal",
                            ));
                        }
                        Some(c) => {
                            col += 1;
                            s.push(c);
                        }
                    }
                }
                push!(Tok::Str(s), pos);
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut text = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() || c == '.' {
                        text.push(c);
                        chars.next();
                        col += 1;
                    } else if (c == 'e' || c == 'E') && !text.is_empty() {
                        // exponent part: e[+|-]digits
                        let mut clone = chars.clone();
                        clone.next();
                        let mut exp = String::from(c);
                        if let Some(&sign) = clone.peek() {
                            if sign == '+' || sign == '-' {
                                exp.push(sign);
                                clone.next();
                            }
                        }
                        if matches!(clone.peek(), Some(d) if d.is_ascii_digit()) {
                            for _ in 0..exp.len() {
                                chars.next();
                                col += 1;
                            }
                            text.push_str(&exp);
                            while let Some(&d) = chars.peek() {
                                if d.is_ascii_digit() {
                                    text.push(d);
                                    chars.next();
                                    col += 1;
                                } else {
                                    break;
                                }
                            }
                        }
                        break;
                    } else {
                        break;
                    }
                }
                let value: f64 = text.parse().map_err(|_| {
                    Diagnostic::new(pos, DiagCode::Lex, format!("malformed number `{text}`"))
                })?;
                if !value.is_finite() {
                    return Err(Diagnostic::new(
                        pos,
                        DiagCode::Lex,
                        format!("number `{text}` is too large"),
                    ));
                }
                push!(Tok::Num(value), pos);
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut text = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        text.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let tok = match text.as_str() {
                    "param" => Tok::Param,
                    "let" => Tok::Let,
                    "output" => Tok::Output,
                    "boolean" => Tok::Boolean,
                    "number" => Tok::Number,
                    "enum" => Tok::Enum,
                    "unit" => Tok::Unit,
                    "in" => Tok::In,
                    "range" => Tok::Range,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    _ => Tok::Ident(text),
                };
                push!(tok, pos);
            }
            other => {
                return Err(Diagnostic::new(
                    pos,
                    DiagCode::Lex,
                    format!("unexpected character `{other}`"),
                ));
            }
        }
    }
    out.push(Spanned {
        tok: Tok::Eof,
        pos: Pos::new(line, col),
    });
    Ok(out)
}
