//! Tiny expression language for coefficient functions of `(t, x)`.
//!
//! Config-defined problems supply drift, diffusion, and observable
//! coefficients as strings in a deliberately small grammar: numeric literals,
//! `t`, `x`, the four arithmetic operators, `^` powers, and the unary
//! functions `sin`, `cos`, `exp`, `tanh`. The grammar is total on its domain
//! (no conditionals, no recursion), which keeps evaluation branch-free and
//! cheap enough for per-step use inside path simulations.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("parse error at position {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    T,
    X,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Tanh(Box<Expr>),
}

impl Expr {
    /// Evaluate at a point. Division by zero and out-of-domain powers follow
    /// IEEE semantics; the problem loader probes for non-finite output.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::T => t,
            Expr::X => x,
            Expr::Neg(a) => -a.eval(t, x),
            Expr::Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Expr::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Expr::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Expr::Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Expr::Pow(a, b) => a.eval(t, x).powf(b.eval(t, x)),
            Expr::Sin(a) => a.eval(t, x).sin(),
            Expr::Cos(a) => a.eval(t, x).cos(),
            Expr::Exp(a) => a.eval(t, x).exp(),
            Expr::Tanh(a) => a.eval(t, x).tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0 }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.src.len() {
            let start = self.pos;
            let c = self.src[self.pos];
            match c {
                b' ' | b'\t' | b'\n' | b'\r' => {
                    self.pos += 1;
                }
                b'+' => {
                    out.push((Tok::Plus, start));
                    self.pos += 1;
                }
                b'-' => {
                    out.push((Tok::Minus, start));
                    self.pos += 1;
                }
                b'*' => {
                    out.push((Tok::Star, start));
                    self.pos += 1;
                }
                b'/' => {
                    out.push((Tok::Slash, start));
                    self.pos += 1;
                }
                b'^' => {
                    out.push((Tok::Caret, start));
                    self.pos += 1;
                }
                b'(' => {
                    out.push((Tok::LParen, start));
                    self.pos += 1;
                }
                b')' => {
                    out.push((Tok::RParen, start));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'.' => {
                    let end = self.scan_number(start)?;
                    let text = std::str::from_utf8(&self.src[start..end]).unwrap();
                    let value: f64 = text.parse().map_err(|_| ParseError {
                        pos: start,
                        msg: format!("invalid numeric literal `{text}`"),
                    })?;
                    out.push((Tok::Num(value), start));
                    self.pos = end;
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    let mut end = start;
                    while end < self.src.len()
                        && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                    {
                        end += 1;
                    }
                    let text = std::str::from_utf8(&self.src[start..end]).unwrap();
                    out.push((Tok::Ident(text.to_string()), start));
                    self.pos = end;
                }
                _ => {
                    // Unicode multiply/divide signs are accepted as aliases.
                    let rest = std::str::from_utf8(&self.src[start..]).map_err(|_| ParseError {
                        pos: start,
                        msg: "invalid UTF-8".into(),
                    })?;
                    let ch = rest.chars().next().unwrap();
                    match ch {
                        '×' => {
                            out.push((Tok::Star, start));
                            self.pos += ch.len_utf8();
                        }
                        '÷' => {
                            out.push((Tok::Slash, start));
                            self.pos += ch.len_utf8();
                        }
                        '−' => {
                            out.push((Tok::Minus, start));
                            self.pos += ch.len_utf8();
                        }
                        _ => {
                            return Err(ParseError {
                                pos: start,
                                msg: format!("unexpected character `{ch}`"),
                            })
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn scan_number(&self, start: usize) -> Result<usize, ParseError> {
        let mut end = start;
        let mut seen_dot = false;
        while end < self.src.len() {
            match self.src[end] {
                b'0'..=b'9' => end += 1,
                b'.' if !seen_dot => {
                    seen_dot = true;
                    end += 1;
                }
                b'e' | b'E' => {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e >= self.src.len() || !self.src[e].is_ascii_digit() {
                        break;
                    }
                    end = e;
                    while end < self.src.len() && self.src[end].is_ascii_digit() {
                        end += 1;
                    }
                    return Ok(end);
                }
                _ => break,
            }
        }
        if end == start {
            return Err(ParseError { pos: start, msg: "expected number".into() });
        }
        Ok(end)
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    end_pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.idx).map(|(_, p)| *p).unwrap_or(self.end_pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(t, _)| t.clone());
        self.idx += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // Unary minus binds looser than `^`, so -x^2 means -(x^2).
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            // Right-associative with a signed exponent: x^2^3 = x^(2^3).
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::Ident(name)) => match name.as_str() {
                "t" => Ok(Expr::T),
                "x" => Ok(Expr::X),
                "sin" | "cos" | "exp" | "tanh" => {
                    let open_pos = self.pos();
                    match self.bump() {
                        Some(Tok::LParen) => {}
                        _ => {
                            return Err(ParseError {
                                pos: open_pos,
                                msg: format!("expected `(` after `{name}`"),
                            })
                        }
                    }
                    let arg = self.expr()?;
                    let close_pos = self.pos();
                    match self.bump() {
                        Some(Tok::RParen) => {}
                        _ => {
                            return Err(ParseError {
                                pos: close_pos,
                                msg: format!("unbalanced parenthesis opened at {open_pos}"),
                            })
                        }
                    }
                    let arg = Box::new(arg);
                    Ok(match name.as_str() {
                        "sin" => Expr::Sin(arg),
                        "cos" => Expr::Cos(arg),
                        "exp" => Expr::Exp(arg),
                        _ => Expr::Tanh(arg),
                    })
                }
                other => Err(ParseError {
                    pos,
                    msg: format!("unknown identifier `{other}` (expected t, x, sin, cos, exp, tanh)"),
                }),
            },
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                let close_pos = self.pos();
                match self.bump() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(ParseError {
                        pos: close_pos,
                        msg: format!("unbalanced parenthesis opened at {pos}"),
                    }),
                }
            }
            Some(tok) => Err(ParseError { pos, msg: format!("unexpected token {tok:?}") }),
            None => Err(ParseError { pos, msg: "unexpected end of expression".into() }),
        }
    }
}

/// Parse a coefficient expression in `(t, x)`.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = Lexer::new(src).tokens()?;
    let mut p = Parser { toks, idx: 0, end_pos: src.len() };
    let e = p.expr()?;
    if p.idx < p.toks.len() {
        return Err(ParseError { pos: p.pos(), msg: "trailing input after expression".into() });
    }
    Ok(e)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::T => write!(f, "t"),
            Expr::X => write!(f, "x"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Tanh(a) => write!(f, "tanh({a})"),
        }
    }
}
