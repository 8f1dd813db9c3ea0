//! Literal syntax, e.g. `0.5*p1^2 + cos(q1) - 2*sin(q1+q2)`.
//!
//! Grammar: `expr := term (('+'|'-') term)*`, `term := factor ('*' factor)*`,
//! `factor := unary ('^' integer)?`, `unary := '-' unary | atom`, where an atom
//! is a number, `q<i>`, `p<i>` (1-based), a parenthesised expression, or
//! `cos(·)` / `sin(·)` of an integer-coefficient linear form in `q`.

use super::HamExpr;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Var(char, usize),
    Func(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

fn err<T>(pos: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { pos, msg: msg.into() })
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '+' => out.push((i, Tok::Plus)),
            '-' => out.push((i, Tok::Minus)),
            '*' => out.push((i, Tok::Star)),
            '^' => out.push((i, Tok::Caret)),
            '(' => out.push((i, Tok::LParen)),
            ')' => out.push((i, Tok::RParen)),
            '0'..='9' | '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                match text.parse::<f64>() {
                    Ok(v) => out.push((start, Tok::Num(v))),
                    Err(_) => return err(start, format!("invalid number '{text}'")),
                }
                continue;
            }
            c if c.is_ascii_alphabetic() => {
                while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let word = &src[start..i];
                let head = word.as_bytes()[0] as char;
                if (head == 'q' || head == 'p') && word.len() > 1 && word[1..].bytes().all(|b| b.is_ascii_digit()) {
                    let idx: usize = word[1..].parse().map_err(|_| Error::Parse {
                        pos: start,
                        msg: format!("invalid variable '{word}'"),
                    })?;
                    if idx == 0 {
                        return err(start, "variable indices are 1-based");
                    }
                    out.push((start, Tok::Var(head, idx - 1)));
                } else if word == "cos" || word == "sin" {
                    out.push((start, Tok::Func(word.to_string())));
                } else {
                    return err(start, format!("unknown identifier '{word}'"));
                }
                continue;
            }
            other => return err(i, format!("unexpected character '{other}'")),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    d: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        if self.peek() == Some(&t) {
            self.pos += 1;
            Ok(())
        } else {
            err(self.here(), format!("expected {t:?}"))
        }
    }

    fn expr(&mut self) -> Result<HamExpr> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    acc = acc.sub(&self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<HamExpr> {
        let mut acc = self.factor()?;
        while self.peek() == Some(&Tok::Star) {
            self.pos += 1;
            acc = acc.mul(&self.factor()?);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<HamExpr> {
        let base = self.unary()?;
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            let at = self.here();
            match self.peek() {
                Some(Tok::Num(n)) if n.fract() == 0.0 && *n >= 0.0 && *n <= 64.0 => {
                    let n = *n as u32;
                    self.pos += 1;
                    return Ok(base.powi(n));
                }
                _ => return err(at, "exponent must be a nonnegative integer"),
            }
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<HamExpr> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            return Ok(self.unary()?.scale(-1.0));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<HamExpr> {
        let at = self.here();
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => return err(at, "unexpected end of input"),
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(HamExpr::constant(self.d, v)),
            Tok::Var(c, i) => {
                if i >= self.d {
                    return err(at, format!("variable index {} exceeds d = {}", i + 1, self.d));
                }
                Ok(if c == 'q' { HamExpr::q(self.d, i) } else { HamExpr::p(self.d, i) })
            }
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Func(name) => {
                self.expect(Tok::LParen)?;
                let arg_at = self.here();
                let arg = self.expr()?;
                self.expect(Tok::RParen)?;
                let k = linear_coefficients(&arg, self.d)
                    .ok_or_else(|| Error::Parse {
                        pos: arg_at,
                        msg: format!("{name} needs an integer linear form in q"),
                    })?;
                Ok(if name == "cos" { HamExpr::cos(k) } else { HamExpr::sin(k) })
            }
            other => err(at, format!("unexpected token {other:?}")),
        }
    }
}

/// Integer coefficients `k` when `e = k·q` exactly.
fn linear_coefficients(e: &HamExpr, d: usize) -> Option<Vec<i64>> {
    let mut k = vec![0i64; d];
    for (m, c) in e.terms() {
        if m.trig.is_some() || m.pexp.iter().any(|&x| x > 0) || m.qexp.iter().sum::<u32>() != 1 {
            return None;
        }
        if c.fract() != 0.0 {
            return None;
        }
        let i = m.qexp.iter().position(|&x| x == 1)?;
        k[i] = c as i64;
    }
    Some(k)
}

/// Parses an expression over `d` degrees of freedom.
pub fn parse_expr(src: &str, d: usize) -> Result<HamExpr> {
    if d == 0 {
        return Err(Error::Input("dimension must be at least 1".into()));
    }
    let toks = lex(src)?;
    let mut p = Parser { toks: &toks, pos: 0, d, end: src.len() };
    let e = p.expr()?;
    if p.pos != toks.len() {
        return err(p.here(), "trailing input");
    }
    Ok(e)
}
