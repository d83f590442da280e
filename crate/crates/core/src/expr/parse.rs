use super::Expr;
use std::collections::HashMap;
use thiserror::Error;

/// Maps identifier names to variable indices.
#[derive(Clone, Debug)]
pub struct VarTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl VarTable {
    pub fn new(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        VarTable { names, index }
    }

    /// Phase-space names `q1..qn, p1..pn`.
    pub fn phase(n: usize) -> Self {
        let mut names: Vec<String> = (1..=n).map(|i| format!("q{i}")).collect();
        names.extend((1..=n).map(|i| format!("p{i}")));
        VarTable::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse error at column {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
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
            let v: f64 = text.parse().map_err(|_| ParseError {
                pos: start + 1,
                msg: format!("malformed number '{text}'"),
            })?;
            out.push((Tok::Num(v), start + 1));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start + 1));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Op(c), i + 1));
            i += 1;
        } else {
            return Err(ParseError {
                pos: i + 1,
                msg: format!("unexpected character '{c}'"),
            });
        }
    }
    out.push((Tok::End, src.len() + 1));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    at: usize,
    vars: &'a VarTable,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Op(c) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected '{c}'"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat('+') {
                acc = acc.add(&self.term()?);
            } else if self.eat('-') {
                acc = acc.sub(&self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat('*') {
                acc = acc.mul(&self.unary()?);
            } else if self.eat('/') {
                acc = acc.div(&self.unary()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(self.unary()?.neg())
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^') {
            let e = self.unary()?;
            Ok(base.pow(&e))
        } else {
            Ok(base)
        }
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect('(')?;
        let mut v = vec![self.expr()?];
        while self.eat(',') {
            v.push(self.expr()?);
        }
        self.expect(')')?;
        Ok(v)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.at += 1;
                Ok(Expr::constant(v))
            }
            Tok::Op('(') => {
                self.at += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.at += 1;
                if let Some(i) = self.vars.get(&name) {
                    return Ok(Expr::var(i));
                }
                match name.as_str() {
                    "pi" => return Ok(Expr::constant(std::f64::consts::PI)),
                    "e" => return Ok(Expr::constant(std::f64::consts::E)),
                    _ => {}
                }
                if *self.peek() != Tok::Op('(') {
                    return Err(ParseError {
                        pos,
                        msg: format!("unknown variable '{name}'"),
                    });
                }
                let a = self.args()?;
                let arity = |k: usize| -> Result<(), ParseError> {
                    if a.len() == k {
                        Ok(())
                    } else {
                        Err(ParseError {
                            pos,
                            msg: format!("{name} takes {k} argument(s), got {}", a.len()),
                        })
                    }
                };
                match name.as_str() {
                    "exp" => arity(1).map(|_| a[0].exp()),
                    "ln" | "log" => arity(1).map(|_| a[0].ln()),
                    "sin" => arity(1).map(|_| a[0].sin()),
                    "cos" => arity(1).map(|_| a[0].cos()),
                    "tan" => arity(1).map(|_| a[0].sin().div(&a[0].cos())),
                    "sqrt" => arity(1).map(|_| a[0].sqrt()),
                    "cosh" => arity(1).map(|_| a[0].exp().add(&a[0].neg().exp()).scale(0.5)),
                    "sinh" => arity(1).map(|_| a[0].exp().sub(&a[0].neg().exp()).scale(0.5)),
                    "step" => arity(1).map(|_| super::smooth_step(&a[0])),
                    "psi" => match a.len() {
                        1 => Ok(a[0].psi(0)),
                        2 => match a[1].as_const() {
                            Some(m) if m.fract() == 0.0 && m.abs() < 1e6 => Ok(a[0].psi(m as i32)),
                            _ => Err(ParseError {
                                pos,
                                msg: "psi order must be an integer constant".into(),
                            }),
                        },
                        k => Err(ParseError {
                            pos,
                            msg: format!("psi takes 1 or 2 arguments, got {k}"),
                        }),
                    },
                    _ => Err(ParseError {
                        pos,
                        msg: format!("unknown function '{name}'"),
                    }),
                }
            }
            Tok::End => self.err("unexpected end of expression"),
            Tok::Op(c) => self.err(format!("unexpected '{c}'")),
        }
    }
}

/// Parses an infix expression (`+ - * / ^`, parentheses, elementary functions).
pub fn parse_expr(src: &str, vars: &VarTable) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, at: 0, vars };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.err("trailing input");
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_associativity() {
        let t = VarTable::phase(1);
        let e = parse_expr("-q1^2 + 2*3^2^0.5 - 8/4/2", &t).unwrap();
        let v = e.eval(&[3.0, 0.0]).unwrap();
        assert!((v - (-9.0 + 2.0 * 3f64.powf(2f64.powf(0.5)) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn errors_carry_position() {
        let t = VarTable::phase(2);
        let err = parse_expr("p1^2 + (p2*", &t).unwrap_err();
        assert_eq!(err.pos, 12);
        let err = parse_expr("p1 + r3", &t).unwrap_err();
        assert_eq!(err.pos, 6);
        assert!(err.msg.contains("r3"));
        assert!(parse_expr("p1 $ 2", &t).is_err());
        assert!(parse_expr("sin(p1, p2)", &t).is_err());
    }

    #[test]
    fn scientific_notation() {
        let t = VarTable::phase(1);
        let e = parse_expr("1.5e-3*p1 + 2E2", &t).unwrap();
        assert!((e.eval(&[0.0, 2.0]).unwrap() - 200.003).abs() < 1e-12);
    }
}
