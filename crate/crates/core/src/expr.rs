//! Closed-form expression mini-language for config-supplied densities,
//! weights and coefficients.
//!
//! Grammar: numbers, named variables, `+ - * / ^`, parentheses and the
//! functions `abs`, `min`, `max`, `exp`, `log`, `sqrt`, `sin`, `cos`,
//! `ind(a)` (indicator of `|x| < a`, `|x|` being the Euclidean norm of the
//! evaluation point) and `ind(e, a)` (indicator of `|e| < a`).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Ind,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, &'static [usize])> {
        Some(match name {
            "abs" => (Func::Abs, &[1]),
            "min" => (Func::Min, &[2]),
            "max" => (Func::Max, &[2]),
            "exp" => (Func::Exp, &[1]),
            "log" => (Func::Log, &[1]),
            "sqrt" => (Func::Sqrt, &[1]),
            "sin" => (Func::Sin, &[1]),
            "cos" => (Func::Cos, &[1]),
            "ind" => (Func::Ind, &[1, 2]),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
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
            let text: String = chars[start..i].iter().collect();
            let value = text
                .parse()
                .map_err(|_| Error::Configuration(format!("bad number `{text}`")))?;
            out.push(Token::Num(value));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Token::Sym(c));
            i += 1;
        } else {
            return Err(Error::Configuration(format!(
                "unexpected character `{c}` in expression `{src}`"
            )));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    names: &'a [&'a str],
    src: &'a str,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Configuration(format!("{msg} in expression `{}`", self.src))
    }

    fn peek_sym(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some(Token::Sym(c)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek_sym() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{c}`")))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        while let Some(c @ ('+' | '-')) = self.peek_sym() {
            self.pos += 1;
            let rhs = self.product()?;
            let op = if c == '+' { Op::Add } else { Op::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_sym() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { Op::Mul } else { Op::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek_sym() {
            Some('-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek_sym() == Some('^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Bin(Op::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let token = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| self.err("unexpected end"))?;
        self.pos += 1;
        match token {
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::Sym('(') => {
                let inner = self.sum()?;
                self.expect(')')?;
                Ok(inner)
            }
            Token::Ident(name) => {
                if self.peek_sym() == Some('(') {
                    let (func, arities) = Func::lookup(&name)
                        .ok_or_else(|| self.err(&format!("unknown function `{name}`")))?;
                    self.pos += 1;
                    let mut args = vec![self.sum()?];
                    while self.peek_sym() == Some(',') {
                        self.pos += 1;
                        args.push(self.sum()?);
                    }
                    self.expect(')')?;
                    if !arities.contains(&args.len()) {
                        return Err(self.err(&format!(
                            "`{name}` takes {arities:?} arguments, got {}",
                            args.len()
                        )));
                    }
                    Ok(Expr::Call(func, args))
                } else if name == "pi" {
                    Ok(Expr::Num(std::f64::consts::PI))
                } else {
                    let idx = self
                        .names
                        .iter()
                        .position(|n| *n == name)
                        .ok_or_else(|| self.err(&format!("unknown variable `{name}`")))?;
                    Ok(Expr::Var(idx))
                }
            }
            Token::Sym(c) => Err(self.err(&format!("unexpected `{c}`"))),
        }
    }
}

impl Expr {
    /// Parse `src`; variables must be drawn from `names`, and `Var(i)` refers
    /// to `names[i]`.
    pub fn parse(src: &str, names: &[&str]) -> Result<Expr> {
        let mut parser = Parser {
            tokens: tokenize(src)?,
            pos: 0,
            names,
            src,
        };
        let expr = parser.sum()?;
        if parser.pos != parser.tokens.len() {
            return Err(parser.err("trailing input"));
        }
        Ok(expr)
    }

    /// Evaluate with variable values `vars`; `norm` is the `|x|` used by the
    /// one-argument indicator.
    pub fn eval(&self, vars: &[f64], norm: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => vars[*i],
            Expr::Neg(e) => -e.eval(vars, norm),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(vars, norm), b.eval(vars, norm));
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => a / b,
                    Op::Pow => {
                        if b.fract() == 0.0 && b.abs() < 64.0 {
                            a.powi(b as i32)
                        } else {
                            a.powf(b)
                        }
                    }
                }
            }
            Expr::Call(func, args) => {
                let x = args[0].eval(vars, norm);
                match func {
                    Func::Abs => x.abs(),
                    Func::Min => x.min(args[1].eval(vars, norm)),
                    Func::Max => x.max(args[1].eval(vars, norm)),
                    Func::Exp => x.exp(),
                    Func::Log => x.ln(),
                    Func::Sqrt => x.sqrt(),
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Ind => {
                        let (value, bound) = if args.len() == 1 {
                            (norm, x)
                        } else {
                            (x.abs(), args[1].eval(vars, norm))
                        };
                        if value < bound {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
        }
    }

    /// Evaluate at a point whose coordinates are all the variables; `|x|` is
    /// the norm of that point.
    pub fn eval_point(&self, point: &[f64]) -> f64 {
        let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.eval(point, norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(src: &str, x: f64) -> f64 {
        Expr::parse(src, &["x"]).unwrap().eval_point(&[x])
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval1("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(eval1("2 ^ 3 ^ 2", 0.0), 512.0);
        assert_eq!(eval1("-2 ^ 2", 0.0), -4.0);
        assert_eq!(eval1("(1 - 4) / 2", 0.0), -1.5);
        assert_eq!(eval1("10 - 4 - 3", 0.0), 3.0);
    }

    #[test]
    fn intro_weight() {
        let src = "x^2 * ind(0.5)";
        assert!((eval1(src, 0.25) - 0.0625).abs() < 1e-15);
        assert_eq!(eval1(src, 0.75), 0.0);
        assert_eq!(eval1(src, -0.5), 0.0);
    }

    #[test]
    fn functions() {
        assert_eq!(eval1("min(abs(x), 1)", -3.0), 1.0);
        assert_eq!(eval1("max(x, 2)", 1.0), 2.0);
        assert_eq!(eval1("ind(x - 1, 0.5)", 1.2), 1.0);
        assert!((eval1("exp(log(x))", 2.5) - 2.5).abs() < 1e-15);
        assert!((eval1("1.5e-1 * 2", 0.0) - 0.3).abs() < 1e-16);
    }

    #[test]
    fn norm_uses_all_coordinates() {
        let e = Expr::parse("ind(1)", &["x1", "x2"]).unwrap();
        assert_eq!(e.eval_point(&[0.6, 0.6]), 1.0);
        assert_eq!(e.eval_point(&[0.8, 0.8]), 0.0);
    }

    #[test]
    fn errors() {
        assert!(Expr::parse("y + 1", &["x"]).is_err());
        assert!(Expr::parse("foo(1)", &["x"]).is_err());
        assert!(Expr::parse("min(1)", &["x"]).is_err());
        assert!(Expr::parse("1 +", &["x"]).is_err());
        assert!(Expr::parse("(1", &["x"]).is_err());
        assert!(Expr::parse("1 2", &["x"]).is_err());
        assert!(Expr::parse("1 $ 2", &["x"]).is_err());
    }
}
