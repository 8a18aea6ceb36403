//! Arithmetic expression language for problem data.
//!
//! Drift/diffusion coefficients, running profits and switching costs are
//! given as strings over the variables `x1..xk` (state), `y1..ym` (value
//! components) and `z1..zd` (gradient components), combined with
//! `+ - * / ^`, unary minus, `min(a,b)`, `max(a,b)`, `exp(a)`, `log(a)`
//! and parentheses. Nothing else is accepted; every rejection carries the
//! byte offset of the offending token.

use std::fmt;
use thiserror::Error;

/// Which variable class an identifier refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarClass {
    State,
    Value,
    Gradient,
}

impl fmt::Display for VarClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarClass::State => write!(f, "x"),
            VarClass::Value => write!(f, "y"),
            VarClass::Gradient => write!(f, "z"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    /// Variable reference; `index` is zero-based, `pos` the source offset.
    Var {
        class: VarClass,
        index: usize,
        pos: usize,
    },
    Neg(Box<Node>),
    Exp(Box<Node>),
    Log(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
}

/// Parse or binding failure, annotated with a byte position in the source.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("at position {pos}: {message}")]
pub struct ExprError {
    pub pos: usize,
    pub message: String,
}

impl ExprError {
    fn new(pos: usize, message: impl Into<String>) -> Self {
        ExprError {
            pos,
            message: message.into(),
        }
    }
}

/// A compiled expression together with its source text.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    source: String,
    uses_state: bool,
    uses_value: bool,
    uses_gradient: bool,
}

/// Dimension context an expression is bound against: state dim `k`,
/// number of value components `m`, gradient dim `d`.
///
/// Coefficient and cost expressions are bound with `m = d = 0`, which
/// rejects any `y`/`z` reference.
#[derive(Debug, Clone, Copy)]
pub struct VarDims {
    pub state: usize,
    pub value: usize,
    pub gradient: usize,
}

impl VarDims {
    pub fn state_only(k: usize) -> Self {
        VarDims {
            state: k,
            value: 0,
            gradient: 0,
        }
    }

    fn limit(&self, class: VarClass) -> usize {
        match class {
            VarClass::State => self.state,
            VarClass::Value => self.value,
            VarClass::Gradient => self.gradient,
        }
    }
}

impl Expr {
    /// Parses `source` and checks every variable reference against `dims`.
    pub fn parse(source: &str, dims: VarDims) -> Result<Expr, ExprError> {
        let tokens = tokenize(source)?;
        let mut parser = Parser { tokens, at: 0 };
        let root = parser.expression()?;
        match parser.peek() {
            (Token::End, _) => {}
            (_, pos) => return Err(ExprError::new(pos, "unexpected trailing input")),
        }
        let mut expr = Expr {
            root,
            source: source.to_string(),
            uses_state: false,
            uses_value: false,
            uses_gradient: false,
        };
        expr.bind(dims)?;
        Ok(expr)
    }

    fn bind(&mut self, dims: VarDims) -> Result<(), ExprError> {
        let mut usage = [false; 3];
        check_vars(&self.root, dims, &mut usage)?;
        self.uses_state = usage[0];
        self.uses_value = usage[1];
        self.uses_gradient = usage[2];
        Ok(())
    }

    /// Evaluates with IEEE semantics (division by zero and `log` of
    /// non-positive arguments propagate inf/NaN to the caller).
    pub fn eval(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        eval_node(&self.root, x, y, z)
    }

    /// Convenience for expressions bound with `m = d = 0`.
    pub fn eval_state(&self, x: &[f64]) -> f64 {
        eval_node(&self.root, x, &[], &[])
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_value(&self) -> bool {
        self.uses_value
    }

    pub fn uses_gradient(&self) -> bool {
        self.uses_gradient
    }

    /// Returns a copy shifted by the additive constant `delta`.
    pub fn shifted(&self, delta: f64) -> Expr {
        Expr {
            root: Node::Bin(
                BinOp::Add,
                Box::new(self.root.clone()),
                Box::new(Node::Const(delta)),
            ),
            source: format!("({}) + {}", self.source, delta),
            uses_state: self.uses_state,
            uses_value: self.uses_value,
            uses_gradient: self.uses_gradient,
        }
    }

    /// Returns a copy scaled by the constant `factor`.
    pub fn scaled(&self, factor: f64) -> Expr {
        Expr {
            root: Node::Bin(
                BinOp::Mul,
                Box::new(Node::Const(factor)),
                Box::new(self.root.clone()),
            ),
            source: format!("{} * ({})", factor, self.source),
            uses_state: self.uses_state,
            uses_value: self.uses_value,
            uses_gradient: self.uses_gradient,
        }
    }

    /// Zero-based indices of the `y` components the expression reads.
    pub fn used_value_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        collect_value_indices(&self.root, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    /// A constant expression, handy for programmatic problem construction.
    pub fn constant(value: f64) -> Expr {
        Expr {
            root: Node::Const(value),
            source: format!("{value}"),
            uses_state: false,
            uses_value: false,
            uses_gradient: false,
        }
    }
}

fn collect_value_indices(node: &Node, out: &mut Vec<usize>) {
    match node {
        Node::Const(_) => {}
        Node::Var { class, index, .. } => {
            if *class == VarClass::Value {
                out.push(*index);
            }
        }
        Node::Neg(a) | Node::Exp(a) | Node::Log(a) => collect_value_indices(a, out),
        Node::Bin(_, a, b) => {
            collect_value_indices(a, out);
            collect_value_indices(b, out);
        }
    }
}

fn check_vars(node: &Node, dims: VarDims, usage: &mut [bool; 3]) -> Result<(), ExprError> {
    match node {
        Node::Const(_) => Ok(()),
        Node::Var { class, index, pos } => {
            let limit = dims.limit(*class);
            if *index >= limit {
                return Err(ExprError::new(
                    *pos,
                    format!(
                        "variable {}{} out of range (max index {})",
                        class,
                        index + 1,
                        limit
                    ),
                ));
            }
            usage[match class {
                VarClass::State => 0,
                VarClass::Value => 1,
                VarClass::Gradient => 2,
            }] = true;
            Ok(())
        }
        Node::Neg(a) | Node::Exp(a) | Node::Log(a) => check_vars(a, dims, usage),
        Node::Bin(_, a, b) => {
            check_vars(a, dims, usage)?;
            check_vars(b, dims, usage)
        }
    }
}

fn eval_node(node: &Node, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    match node {
        Node::Const(c) => *c,
        Node::Var { class, index, .. } => match class {
            VarClass::State => x[*index],
            VarClass::Value => y[*index],
            VarClass::Gradient => z[*index],
        },
        Node::Neg(a) => -eval_node(a, x, y, z),
        Node::Exp(a) => eval_node(a, x, y, z).exp(),
        Node::Log(a) => eval_node(a, x, y, z).ln(),
        Node::Bin(op, a, b) => {
            let a = eval_node(a, x, y, z);
            let b = eval_node(b, x, y, z);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => a.powf(b),
                BinOp::Min => a.min(b),
                BinOp::Max => a.max(b),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

fn tokenize(source: &str) -> Result<Vec<(Token, usize)>, ExprError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push((Token::Plus, i));
                i += 1;
            }
            '-' => {
                tokens.push((Token::Minus, i));
                i += 1;
            }
            '*' => {
                tokens.push((Token::Star, i));
                i += 1;
            }
            '/' => {
                tokens.push((Token::Slash, i));
                i += 1;
            }
            '^' => {
                tokens.push((Token::Caret, i));
                i += 1;
            }
            '(' => {
                tokens.push((Token::LParen, i));
                i += 1;
            }
            ')' => {
                tokens.push((Token::RParen, i));
                i += 1;
            }
            ',' => {
                tokens.push((Token::Comma, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // exponent part: e or E, optional sign, digits
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
                let text = &source[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| ExprError::new(start, format!("malformed number '{text}'")))?;
                tokens.push((Token::Number(value), start));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                tokens.push((Token::Ident(source[start..i].to_string()), start));
            }
            _ => return Err(ExprError::new(i, format!("unexpected character '{c}'"))),
        }
    }
    tokens.push((Token::End, source.len()));
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> (Token, usize) {
        self.tokens[self.at].clone()
    }

    fn advance(&mut self) -> (Token, usize) {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), ExprError> {
        let (tok, pos) = self.advance();
        if tok == want {
            Ok(())
        } else {
            Err(ExprError::new(pos, format!("expected {what}")))
        }
    }

    fn expression(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().0 {
                Token::Plus => {
                    self.advance();
                    let rhs = self.term()?;
                    lhs = Node::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Token::Minus => {
                    self.advance();
                    let rhs = self.term()?;
                    lhs = Node::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().0 {
                Token::Star => {
                    self.advance();
                    let rhs = self.unary()?;
                    lhs = Node::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Token::Slash => {
                    self.advance();
                    let rhs = self.unary()?;
                    lhs = Node::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.peek().0 == Token::Minus {
            self.advance();
            let inner = self.unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek().0 == Token::Caret {
            self.advance();
            // right-associative, and `-` binds looser than `^` on the right
            let exponent = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let (tok, pos) = self.advance();
        match tok {
            Token::Number(v) => Ok(Node::Const(v)),
            Token::LParen => {
                let inner = self.expression()?;
                self.expect(Token::RParen, "closing ')'")?;
                Ok(inner)
            }
            Token::Ident(name) => self.ident(&name, pos),
            Token::End => Err(ExprError::new(pos, "unexpected end of input")),
            _ => Err(ExprError::new(pos, "expected a number, variable or '('")),
        }
    }

    fn ident(&mut self, name: &str, pos: usize) -> Result<Node, ExprError> {
        match name {
            "exp" | "log" => {
                self.expect(Token::LParen, "'(' after function name")?;
                let arg = self.expression()?;
                self.expect(Token::RParen, "closing ')'")?;
                let arg = Box::new(arg);
                return Ok(if name == "exp" {
                    Node::Exp(arg)
                } else {
                    Node::Log(arg)
                });
            }
            "min" | "max" => {
                self.expect(Token::LParen, "'(' after function name")?;
                let a = self.expression()?;
                self.expect(Token::Comma, "',' between the two arguments")?;
                let b = self.expression()?;
                self.expect(Token::RParen, "closing ')'")?;
                let op = if name == "min" { BinOp::Min } else { BinOp::Max };
                return Ok(Node::Bin(op, Box::new(a), Box::new(b)));
            }
            _ => {}
        }
        let mut chars = name.chars();
        let class = match chars.next() {
            Some('x') => VarClass::State,
            Some('y') => VarClass::Value,
            Some('z') => VarClass::Gradient,
            _ => return Err(ExprError::new(pos, format!("unknown identifier '{name}'"))),
        };
        let digits: String = chars.collect();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ExprError::new(pos, format!("unknown identifier '{name}'")));
        }
        let one_based: usize = digits
            .parse()
            .map_err(|_| ExprError::new(pos, format!("bad variable index in '{name}'")))?;
        if one_based == 0 {
            return Err(ExprError::new(pos, "variable indices start at 1"));
        }
        Ok(Node::Var {
            class,
            index: one_based - 1,
            pos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> VarDims {
        VarDims {
            state: 2,
            value: 3,
            gradient: 2,
        }
    }

    #[test]
    fn arithmetic_and_precedence() {
        let e = Expr::parse("1 + 2 * 3 - 4 / 2", dims()).unwrap();
        assert_eq!(e.eval(&[0.0; 2], &[0.0; 3], &[0.0; 2]), 5.0);
        let e = Expr::parse("2 ^ 3 ^ 2", dims()).unwrap();
        assert_eq!(e.eval_state(&[0.0, 0.0]), 512.0); // right-assoc
        let e = Expr::parse("-2 ^ 2", dims()).unwrap();
        assert_eq!(e.eval_state(&[0.0, 0.0]), -4.0); // unary minus binds looser than ^
    }

    #[test]
    fn variables_and_functions() {
        let e = Expr::parse("x1 + 2*y2 - z1 + min(x2, 0) + max(y3, 1) + exp(0) + log(1)", dims())
            .unwrap();
        let v = e.eval(&[1.0, -3.0], &[0.0, 2.0, 5.0], &[0.5, 0.0]);
        assert_eq!(v, 1.0 + 4.0 - 0.5 - 3.0 + 5.0 + 1.0 + 0.0);
        assert!(e.uses_value() && e.uses_gradient());
    }

    #[test]
    fn rejects_with_positions() {
        let err = Expr::parse("x1 + $", dims()).unwrap_err();
        assert_eq!(err.pos, 5);
        let err = Expr::parse("x1 +", dims()).unwrap_err();
        assert_eq!(err.pos, 4);
        let err = Expr::parse("sin(x1)", dims()).unwrap_err();
        assert_eq!(err.pos, 0);
        let err = Expr::parse("min(x1)", dims()).unwrap_err();
        assert!(err.pos > 0);
        let err = Expr::parse("x3", dims()).unwrap_err();
        assert_eq!(err.pos, 0);
        assert!(err.message.contains("out of range"));
        let err = Expr::parse("y1", VarDims::state_only(2)).unwrap_err();
        assert!(err.message.contains("out of range"));
        let err = Expr::parse("x0", dims()).unwrap_err();
        assert!(err.message.contains("start at 1"));
        let err = Expr::parse("x1 x2", dims()).unwrap_err();
        assert_eq!(err.pos, 3);
    }

    #[test]
    fn shift_and_scale() {
        let e = Expr::parse("x1", VarDims::state_only(1)).unwrap();
        assert_eq!(e.shifted(2.5).eval_state(&[1.0]), 3.5);
        assert_eq!(e.scaled(3.0).eval_state(&[2.0]), 6.0);
    }
}
