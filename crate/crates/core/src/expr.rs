//! A small arithmetic expression language for problem data.
//!
//! Expressions range over the state variables `x1..xn` and the input
//! variables `u1..um`. The grammar is
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | variable | func '(' expr ')' | '(' expr ')'
//! func    := exp | log | sin | cos | sqrt | abs
//! ```
//!
//! so `^` binds tighter than unary minus (`-x1^2` is `-(x1^2)`), `^` is
//! right associative, and the remaining binary operators associate to the
//! left. Evaluation is pure, which makes expressions safe to share across
//! worker threads.

use std::fmt;

use thiserror::Error;

/// A variable reference; indices are zero based (`x1` is `State(0)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    State(usize),
    Input(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

/// Expression tree.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: expected {}", expected.join(" or "))]
    Syntax {
        offset: usize,
        expected: Vec<&'static str>,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{func} of negative argument {arg}")]
    Domain { func: &'static str, arg: f64 },
    #[error("variable {0:?} is out of range for the supplied point")]
    MissingVariable(Var),
}

/// Parse `source`, accepting `x1..x{nx}` and `u1..u{nu}`.
pub fn parse_expr(source: &str, nx: usize, nu: usize) -> Result<Expr, ParseError> {
    Expr::parse(source, nx, nu)
}

/// Evaluate `e` at state `x` and input `u`.
pub fn eval_expr(e: &Expr, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
    e.eval(x, u)
}

impl Expr {
    pub fn parse(source: &str, nx: usize, nu: usize) -> Result<Expr, ParseError> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
            nx,
            nu,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.syntax(&["operator", "end of input"]));
        }
        Ok(e)
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => match *v {
                Var::State(i) => *x.get(i).ok_or(EvalError::MissingVariable(*v))?,
                Var::Input(j) => *u.get(j).ok_or(EvalError::MissingVariable(*v))?,
            },
            Expr::Neg(a) => -a.eval(x, u)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval(x, u)?;
                let b = b.eval(x, u)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(f, a) => {
                let a = a.eval(x, u)?;
                match f {
                    Func::Exp => a.exp(),
                    Func::Log if a < 0.0 => return Err(EvalError::Domain { func: "log", arg: a }),
                    Func::Log => a.ln(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Sqrt if a < 0.0 => return Err(EvalError::Domain { func: "sqrt", arg: a }),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                }
            }
        })
    }

    /// True if the expression mentions any input variable.
    pub fn depends_on_input(&self) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => matches!(v, Var::Input(_)),
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on_input(),
            Expr::Bin(_, a, b) => a.depends_on_input() || b.depends_on_input(),
        }
    }

    /// Returns the value if the expression has no variables.
    pub fn as_constant(&self) -> Option<f64> {
        if self.has_var() {
            None
        } else {
            self.eval(&[], &[]).ok()
        }
    }

    fn has_var(&self) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(_) => true,
            Expr::Neg(a) | Expr::Call(_, a) => a.has_var(),
            Expr::Bin(_, a, b) => a.has_var() || b.has_var(),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            Expr::Const(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

// Integer exponents go through powi so that x^3 matches x*x*x to rounding.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(Var::State(i)) => write!(f, "x{}", i + 1),
            Expr::Var(Var::Input(j)) => write!(f, "u{}", j + 1),
            Expr::Neg(a) => {
                f.write_str("-")?;
                child(f, a, 3)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Bin(op, a, b) => {
                let (sym, lhs, rhs) = match op {
                    BinOp::Add => (" + ", 1, 2),
                    BinOp::Sub => (" - ", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    BinOp::Pow => ("^", 5, 3),
                };
                child(f, a, lhs)?;
                f.write_str(sym)?;
                child(f, b, rhs)
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nx: usize,
    nu: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn syntax(&self, expected: &[&'static str]) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            expected: expected.to_vec(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        const PRIMARY: &[&str] = &["number", "identifier", "`(`", "`-`"];
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')', "`)`")?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            _ => Err(self.syntax(PRIMARY)),
        }
    }

    fn expect(&mut self, byte: u8, name: &'static str) -> Result<(), ParseError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&[name]))
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos > s
        };
        let mut any = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            any |= digits(self);
        }
        if !any {
            self.pos = start;
            return Err(self.syntax(&["digit"]));
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if !digits(self) {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Expr::Const(v)),
            _ => {
                self.pos = start;
                Err(self.syntax(&["finite number"]))
            }
        }
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if let Some(func) = Func::from_name(name) {
            self.expect(b'(', "`(`")?;
            let arg = self.expr()?;
            self.expect(b')', "`)`")?;
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        let unknown = || ParseError::UnknownIdentifier {
            name: name.to_string(),
            offset: start,
        };
        let (kind, digits) = name.split_at(1);
        let index: usize = match digits.parse() {
            Ok(i) if i >= 1 && !digits.starts_with('0') => i,
            _ => return Err(unknown()),
        };
        match kind {
            "x" if index <= self.nx => Ok(Expr::Var(Var::State(index - 1))),
            "u" if index <= self.nu => Ok(Expr::Var(Var::Input(index - 1))),
            _ => Err(unknown()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x(i: usize) -> Box<Expr> {
        Box::new(Expr::Var(Var::State(i)))
    }

    #[test]
    fn cubic_drift_shape() {
        let e = parse_expr("x1 - x1^3", 1, 0).unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Sub,
                x(0),
                Box::new(Expr::Bin(BinOp::Pow, x(0), Box::new(Expr::Const(3.0))))
            )
        );
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse_expr("-x1^2", 1, 0).unwrap();
        assert_eq!(e.eval(&[3.0], &[]).unwrap(), -9.0);
        let e = parse_expr("2^3^2", 0, 0).unwrap();
        assert_eq!(e.eval(&[], &[]).unwrap(), 512.0);
        let e = parse_expr("8 - 3 - 2", 0, 0).unwrap();
        assert_eq!(e.eval(&[], &[]).unwrap(), 3.0);
        let e = parse_expr("8 / 4 / 2", 0, 0).unwrap();
        assert_eq!(e.eval(&[], &[]).unwrap(), 1.0);
        let e = parse_expr("2*x1^-1", 1, 0).unwrap();
        assert_eq!(e.eval(&[4.0], &[]).unwrap(), 0.5);
    }

    #[test]
    fn shipped_expressions() {
        let f1 = parse_expr("x2 - 0.5*x1*x2", 2, 0).unwrap();
        assert_eq!(f1.eval(&[1.0, 2.0], &[]).unwrap(), 1.0);
        let e = parse_expr("exp(-x1^2)", 1, 0).unwrap();
        assert_eq!(e.eval(&[0.0], &[]).unwrap(), 1.0);
        let e = parse_expr("x1/2 - x1^3", 1, 0).unwrap();
        assert_eq!(e.eval(&[1.0], &[]).unwrap(), -0.5);
        let e = parse_expr("0.25*x1^2 + 3*(x2^2-1)^2", 2, 0).unwrap();
        assert_eq!(e.eval(&[0.0, 1.0], &[]).unwrap(), 0.0);
        let e = parse_expr("1 - 0.5*exp(-x1^2)", 1, 0).unwrap();
        assert_eq!(e.eval(&[0.0], &[]).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        match parse_expr("x1 + y", 1, 0) {
            Err(ParseError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "y");
                assert_eq!(offset, 5);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_expr("x3", 2, 0),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse_expr("u1", 1, 0),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        match parse_expr("x1 + * 2", 1, 0) {
            Err(ParseError::Syntax { offset, expected }) => {
                assert_eq!(offset, 5);
                assert!(expected.contains(&"number"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_expr("(x1", 1, 0),
            Err(ParseError::Syntax { offset: 3, .. })
        ));
        assert!(parse_expr("x1 x1", 1, 0).is_err());
        assert!(parse_expr("", 1, 0).is_err());

        let e = parse_expr("sqrt(x1) + log(u1)", 1, 1).unwrap();
        assert!(matches!(
            e.eval(&[-1.0], &[1.0]),
            Err(EvalError::Domain { func: "sqrt", .. })
        ));
        assert!(matches!(
            e.eval(&[1.0], &[-1.0]),
            Err(EvalError::Domain { func: "log", .. })
        ));
    }

    #[test]
    fn scientific_literals_round_trip() {
        for src in ["1e-7*x1", "2.5E3 + x1", "3.", ".5"] {
            let e = parse_expr(src, 1, 0).unwrap();
            let again = parse_expr(&e.to_string(), 1, 0).unwrap();
            assert_eq!(e, again, "{src} -> {e}");
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Expr::Const),
            (0usize..2).prop_map(|i| Expr::Var(Var::State(i))),
            Just(Expr::Var(Var::Input(0))),
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (
                    prop_oneof![Just(Func::Exp), Just(Func::Sin), Just(Func::Abs)],
                    inner
                )
                    .prop_map(|(f, a)| Expr::Call(f, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse_expr(&printed, 2, 1).unwrap();
            prop_assert_eq!(&reparsed, &e);
            let again = parse_expr(&reparsed.to_string(), 2, 1).unwrap();
            prop_assert_eq!(again, reparsed);
        }

        #[test]
        fn sum_evaluates_additively(a in arb_expr(), b in arb_expr(),
                                    x1 in -2.0f64..2.0, x2 in -2.0f64..2.0, u in -2.0f64..2.0) {
            let va = a.eval(&[x1, x2], &[u]).unwrap();
            let vb = b.eval(&[x1, x2], &[u]).unwrap();
            prop_assume!(va.is_finite() && vb.is_finite() && va.abs() < 1e12 && vb.abs() < 1e12);
            let sum = Expr::Bin(BinOp::Add, Box::new(a), Box::new(b));
            let vs = sum.eval(&[x1, x2], &[u]).unwrap();
            prop_assert!((vs - (va + vb)).abs() <= 1e-12 * (1.0 + va.abs() + vb.abs()));
        }
    }
}
