//! Minimal arithmetic expressions for inline coefficient and kernel specs.
//!
//! Grammar (usual precedence, `^` right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables: `x`, `y`, `t`, `z`; constants `pi`, `e`. Functions: `sin`,
//! `cos`, `exp`, `ln`, `sqrt`, `abs`, `min`, `max`, `pos` (positive part).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{NlsError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub z: f64,
}

impl Vars {
    pub fn xt(x: f64, t: f64) -> Self {
        Self {
            x,
            t,
            ..Default::default()
        }
    }

    pub fn xyt(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t, z: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(u8),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Min,
    Max,
    Pos,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "exp" => (Func::Exp, 1),
            "ln" | "log" => (Func::Ln, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "pos" => (Func::Pos, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return None,
        })
    }
}

/// A parsed expression; cheap to clone.
#[derive(Clone)]
pub struct Expr {
    source: Arc<str>,
    root: Arc<Node>,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", &*self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(NlsError::Expr(format!("unexpected trailing input in `{src}`")));
        }
        Ok(Self {
            source: src.into(),
            root: Arc::new(root),
        })
    }

    pub fn constant(v: f64) -> Self {
        Self {
            source: format!("{v:?}").into(),
            root: Arc::new(Node::Num(v)),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        eval(&self.root, v)
    }

    /// True when the expression does not reference `t`.
    pub fn is_time_independent(&self) -> bool {
        !uses_var(&self.root, b't')
    }

    pub fn as_constant(&self) -> Option<f64> {
        match &*self.root {
            Node::Num(v) => Some(*v),
            Node::Neg(inner) => match **inner {
                Node::Num(v) => Some(-v),
                _ => None,
            },
            _ => None,
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Expr::constant(v)),
            Raw::Str(s) => Expr::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

fn uses_var(n: &Node, var: u8) -> bool {
    match n {
        Node::Num(_) => false,
        Node::Var(c) => *c == var,
        Node::Neg(a) => uses_var(a, var),
        Node::Bin(_, a, b) => uses_var(a, var) || uses_var(b, var),
        Node::Call(_, args) => args.iter().any(|a| uses_var(a, var)),
    }
}

fn eval(n: &Node, v: &Vars) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(b'x') => v.x,
        Node::Var(b'y') => v.y,
        Node::Var(b't') => v.t,
        Node::Var(_) => v.z,
        Node::Neg(a) => -eval(a, v),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, v), eval(b, v));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], v);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Ln => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Pos => a.max(0.0),
                Func::Min => a.min(eval(&args[1], v)),
                Func::Max => a.max(eval(&args[1], v)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s
                .parse::<f64>()
                .map_err(|_| NlsError::Expr(format!("bad number `{s}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(NlsError::Expr(format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Node::Bin('+', Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Node::Bin('-', Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Node::Bin('*', Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Node::Bin('/', Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self
            .peek()
            .cloned()
            .ok_or_else(|| NlsError::Expr("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Op('(') => {
                let inner = self.expr()?;
                if !self.eat(')') {
                    return Err(NlsError::Expr("missing `)`".into()));
                }
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some((f, arity)) = Func::lookup(&name) {
                    if !self.eat('(') {
                        return Err(NlsError::Expr(format!("`{name}` needs arguments")));
                    }
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    if !self.eat(')') {
                        return Err(NlsError::Expr("missing `)`".into()));
                    }
                    if args.len() != arity {
                        return Err(NlsError::Expr(format!(
                            "`{name}` takes {arity} argument(s), got {}",
                            args.len()
                        )));
                    }
                    return Ok(Node::Call(f, args));
                }
                match name.as_str() {
                    "x" | "y" | "t" | "z" => Ok(Node::Var(name.as_bytes()[0])),
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ => Err(NlsError::Expr(format!("unknown identifier `{name}`"))),
                }
            }
            Tok::Op(c) => Err(NlsError::Expr(format!("unexpected `{c}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64, t: f64) -> f64 {
        Expr::parse(s).unwrap().eval(&Vars::xt(x, t))
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert!((ev("4 - (x - 0.5)^2", 0.5, 0.0) - 4.0).abs() < 1e-15);
        assert!((ev("sin(2*pi*t)", 0.0, 0.25) - 1.0).abs() < 1e-15);
        assert_eq!(ev("max(x, 1e-3)", 0.0, 0.0), 1e-3);
        assert_eq!(ev("abs(x - 0.5)", 0.25, 0.0), 0.25);
        assert_eq!(ev("pos(x)", -1.0, 0.0), 0.0);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["1 +", "sin 2", "foo(1)", "(1", "1 $ 2", "max(1)", "w"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn time_dependence_detection() {
        assert!(Expr::parse("x^2 + 1").unwrap().is_time_independent());
        assert!(!Expr::parse("cos(2*pi*t)").unwrap().is_time_independent());
        assert_eq!(Expr::parse("-3").unwrap().as_constant(), Some(-3.0));
    }

    #[test]
    fn serde_accepts_numbers_and_strings() {
        let e: Expr = serde_json::from_str("2.5").unwrap();
        assert_eq!(e.as_constant(), Some(2.5));
        let e: Expr = serde_json::from_str("\"1+x\"").unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"1+x\"");
    }
}
