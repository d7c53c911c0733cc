//! Time signals, spatial profiles and separable source terms.
//!
//! Signals are given either as closed-form expressions in a single variable
//! (`t` for time, `x` for the edge coordinate) or as sampled tables with
//! linear interpolation. Volume sources are sums of separable terms
//! `time(t) * space(x)` restricted to a set of edges, which keeps the
//! discrete loads affine in a fixed set of time coefficients.

use crate::error::{Error, Result};

/// Parsed single-variable expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    var: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var,
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
    Exp(Box<Node>),
}

impl Expr {
    /// Parse `src` as an expression in the variable `var`.
    pub fn parse(src: &str, var: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
            var,
            src,
        };
        let root = p.expression()?;
        if p.pos != tokens.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(Expr {
            root,
            var: var.into(),
        })
    }

    pub fn eval(&self, value: f64) -> f64 {
        eval_node(&self.root, value)
    }

    pub fn variable(&self) -> &str {
        &self.var
    }
}

fn eval_node(n: &Node, v: f64) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::Var => v,
        Node::Add(a, b) => eval_node(a, v) + eval_node(b, v),
        Node::Sub(a, b) => eval_node(a, v) - eval_node(b, v),
        Node::Mul(a, b) => eval_node(a, v) * eval_node(b, v),
        Node::Div(a, b) => eval_node(a, v) / eval_node(b, v),
        Node::Pow(a, b) => eval_node(a, v).powf(eval_node(b, v)),
        Node::Neg(a) => -eval_node(a, v),
        Node::Sin(a) => eval_node(a, v).sin(),
        Node::Cos(a) => eval_node(a, v).cos(),
        Node::Exp(a) => eval_node(a, v).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
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

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push(Token::Plus);
                i += 1;
            }
            '-' => {
                tokens.push(Token::Minus);
                i += 1;
            }
            '*' => {
                tokens.push(Token::Star);
                i += 1;
            }
            '/' => {
                tokens.push(Token::Slash);
                i += 1;
            }
            '^' => {
                tokens.push(Token::Caret);
                i += 1;
            }
            '(' => {
                tokens.push(Token::LParen);
                i += 1;
            }
            ')' => {
                tokens.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // Exponent part, accepting a sign right after e/E.
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| Error::Expression(format!("bad number literal '{text}'")))?;
                tokens.push(Token::Num(value));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                tokens.push(Token::Ident(src[start..i].into()));
            }
            _ => {
                return Err(Error::Expression(format!(
                    "unexpected character '{c}' in '{src}'"
                )))
            }
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    var: &'a str,
    src: &'a str,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Expression(format!("{msg} in '{}'", self.src))
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expression(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek() {
            match op {
                Token::Plus => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Token::Minus => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        while let Some(op) = self.peek() {
            match op {
                Token::Star => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Token::Slash => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.pos += 1;
            // Right-associative exponent.
            let exp = self.factor()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next().cloned() {
            Some(Token::Num(v)) => Ok(Node::Const(v)),
            Some(Token::Minus) => Ok(Node::Neg(Box::new(self.factor()?))),
            Some(Token::LParen) => {
                let inner = self.expression()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(self.err("missing closing parenthesis")),
                }
            }
            Some(Token::Ident(name)) => match name.as_str() {
                "pi" => Ok(Node::Const(std::f64::consts::PI)),
                "sin" | "cos" | "exp" => {
                    if !matches!(self.next(), Some(Token::LParen)) {
                        return Err(self.err(&format!("'{name}' requires parenthesized argument")));
                    }
                    let arg = self.expression()?;
                    if !matches!(self.next(), Some(Token::RParen)) {
                        return Err(self.err("missing closing parenthesis"));
                    }
                    let arg = Box::new(arg);
                    Ok(match name.as_str() {
                        "sin" => Node::Sin(arg),
                        "cos" => Node::Cos(arg),
                        _ => Node::Exp(arg),
                    })
                }
                v if v == self.var => Ok(Node::Var),
                _ => Err(self.err(&format!(
                    "unknown identifier '{name}' (variable is '{}')",
                    self.var
                ))),
            },
            _ => Err(self.err("expected value")),
        }
    }
}

/// Scalar function of time: zero, a closed-form expression, or a sampled
/// table with linear interpolation (clamped outside the sample range).
#[derive(Debug, Clone)]
pub enum TimeSignal {
    Zero,
    Expr(Expr),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl TimeSignal {
    pub fn from_expr(src: &str) -> Result<TimeSignal> {
        Ok(TimeSignal::Expr(Expr::parse(src, "t")?))
    }

    pub fn from_table(times: Vec<f64>, values: Vec<f64>) -> Result<TimeSignal> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidConfig(
                "signal table needs equally many times and values, at least one".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig(
                "signal table times must be strictly increasing".into(),
            ));
        }
        if times.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("signal table entries must be finite".into()));
        }
        Ok(TimeSignal::Table { times, values })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeSignal::Zero => 0.0,
            TimeSignal::Expr(e) => e.eval(t),
            TimeSignal::Table { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                if t >= *times.last().unwrap() {
                    return *values.last().unwrap();
                }
                let k = times.partition_point(|&s| s <= t);
                let (t0, t1) = (times[k - 1], times[k]);
                let w = (t - t0) / (t1 - t0);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, TimeSignal::Zero)
    }
}

/// One separable volume source contribution `time(t) * space(x)` supported
/// on a set of edges. Edge indices refer to the graph's edge order.
#[derive(Debug, Clone)]
pub struct SourceTerm {
    pub time: TimeSignal,
    pub space: Expr,
    pub edges: Vec<usize>,
}

/// Complete forcing data: volume sources for both equations and one pressure
/// signal per boundary node (indexed in boundary-node order).
#[derive(Debug, Clone, Default)]
pub struct ForcingModel {
    pub f_terms: Vec<SourceTerm>,
    pub g_terms: Vec<SourceTerm>,
    pub boundary: Vec<TimeSignal>,
}

impl Default for TimeSignal {
    fn default() -> Self {
        TimeSignal::Zero
    }
}
