//! Small expression language for boundary and terminal data.
//!
//! Grammar (loosest to tightest): `+ -` (left), `* /` (left), unary `-`,
//! `^` (right). Functions: `exp sin cos sqrt log`. Variables are resolved
//! against a declared list at parse time and stored by index, so evaluation
//! over a slice is a plain tree walk.

mod diff;
mod parse;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Log,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "log" => Func::Log,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Log => "log",
        }
    }

    fn apply(self, v: f64) -> Result<f64, ExprError> {
        match self {
            Func::Exp => Ok(v.exp()),
            Func::Sin => Ok(v.sin()),
            Func::Cos => Ok(v.cos()),
            Func::Sqrt if v < 0.0 => Err(ExprError::Domain(format!("sqrt of {v}"))),
            Func::Sqrt => Ok(v.sqrt()),
            Func::Log if v <= 0.0 => Err(ExprError::Domain(format!("log of {v}"))),
            Func::Log => Ok(v.ln()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, vals: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Node::Num(v) => *v,
            Node::Var(i) => vals[*i],
            Node::Neg(e) => -e.eval(vals)?,
            Node::Bin(op, a, b) => {
                let x = a.eval(vals)?;
                let y = b.eval(vals)?;
                binop(*op, x, y)?
            }
            Node::Call(f, a) => f.apply(a.eval(vals)?)?,
        })
    }

    fn mentions(&self, var: usize) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(i) => *i == var,
            Node::Neg(e) | Node::Call(_, e) => e.mentions(var),
            Node::Bin(_, a, b) => a.mentions(var) || b.mentions(var),
        }
    }

    fn collect_vars(&self, out: &mut Vec<usize>) {
        match self {
            Node::Num(_) => {}
            Node::Var(i) => {
                if !out.contains(i) {
                    out.push(*i)
                }
            }
            Node::Neg(e) | Node::Call(_, e) => e.collect_vars(out),
            Node::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }
}

fn binop(op: BinOp, x: f64, y: f64) -> Result<f64, ExprError> {
    match op {
        BinOp::Add => Ok(x + y),
        BinOp::Sub => Ok(x - y),
        BinOp::Mul => Ok(x * y),
        BinOp::Div if y == 0.0 => Err(ExprError::Domain(format!("division of {x} by zero"))),
        BinOp::Div => Ok(x / y),
        BinOp::Pow => {
            let v = x.powf(y);
            if v.is_nan() {
                Err(ExprError::Domain(format!("{x}^{y}")))
            } else {
                Ok(v)
            }
        }
    }
}

/// A parsed expression together with its declared variable list.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    vars: Arc<[String]>,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.vars == other.vars
    }
}

impl Expr {
    pub fn parse(source: &str, vars: &[&str]) -> Result<Self, ExprError> {
        let names: Arc<[String]> = vars.iter().map(|s| s.to_string()).collect();
        let root = parse::Parser::new(source, &names).parse()?;
        Ok(Self { root, vars: names })
    }

    /// Builds an expression from a node over an existing variable list.
    pub fn from_node(root: Node, vars: Arc<[String]>) -> Self {
        Self { root, vars }
    }

    pub fn constant(value: f64, vars: &[&str]) -> Self {
        Self {
            root: Node::Num(value),
            vars: vars.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn node(&self) -> &Node {
        &self.root
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    /// Evaluates with variables bound by position in the declared list.
    #[inline]
    pub fn eval_slice(&self, vals: &[f64]) -> Result<f64, ExprError> {
        debug_assert!(vals.len() >= self.vars.len());
        self.root.eval(vals)
    }

    /// Evaluates with variables bound by name. Only the variables the
    /// expression actually mentions need to be bound.
    pub fn eval(&self, bindings: &HashMap<&str, f64>) -> Result<f64, ExprError> {
        let mut used = Vec::new();
        self.root.collect_vars(&mut used);
        let mut vals = vec![f64::NAN; self.vars.len()];
        for i in used {
            let name = &self.vars[i];
            vals[i] = *bindings
                .get(name.as_str())
                .ok_or_else(|| ExprError::UnboundVariable(name.clone()))?;
        }
        self.root.eval(&vals)
    }

    pub fn depends_on(&self, var: usize) -> bool {
        self.root.mentions(var)
    }

    pub fn is_zero(&self) -> bool {
        self.root == Node::Num(0.0)
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Num(v) => Some(v),
            _ => None,
        }
    }

    /// Symbolic derivative with respect to the named variable.
    pub fn differentiate(&self, var: &str) -> Result<Expr, ExprError> {
        let idx = self
            .var_index(var)
            .ok_or_else(|| ExprError::UnknownVariable(var.to_string()))?;
        Ok(self.derivative(idx))
    }

    /// Symbolic derivative with respect to the variable at `idx`.
    pub fn derivative(&self, idx: usize) -> Expr {
        Expr {
            root: diff::simplify(diff::differentiate(&self.root, idx)),
            vars: self.vars.clone(),
        }
    }

    pub fn simplified(&self) -> Expr {
        Expr {
            root: diff::simplify(self.root.clone()),
            vars: self.vars.clone(),
        }
    }
}

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn write_node(f: &mut fmt::Formatter<'_>, n: &Node, vars: &[String], min: u8) -> fmt::Result {
    let (prec, body): (u8, Box<dyn Fn(&mut fmt::Formatter<'_>) -> fmt::Result>) = match n {
        Node::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
            let v = -*v;
            (PREC_NEG, Box::new(move |f| write!(f, "-{v}")))
        }
        Node::Num(v) => {
            let v = *v;
            (PREC_ATOM, Box::new(move |f| write!(f, "{v}")))
        }
        Node::Var(i) => (PREC_ATOM, Box::new(move |f| write!(f, "{}", vars[*i]))),
        Node::Neg(e) => (
            PREC_NEG,
            Box::new(move |f| {
                write!(f, "-")?;
                write_node(f, e, vars, PREC_NEG)
            }),
        ),
        Node::Call(func, e) => (
            PREC_ATOM,
            Box::new(move |f| {
                write!(f, "{}(", func.name())?;
                write_node(f, e, vars, 0)?;
                write!(f, ")")
            }),
        ),
        Node::Bin(op, a, b) => {
            let (prec, sym, lmin, rmin) = match op {
                BinOp::Add => (PREC_ADD, " + ", PREC_ADD, PREC_MUL),
                BinOp::Sub => (PREC_ADD, " - ", PREC_ADD, PREC_MUL),
                BinOp::Mul => (PREC_MUL, "*", PREC_MUL, PREC_NEG),
                BinOp::Div => (PREC_MUL, "/", PREC_MUL, PREC_NEG),
                BinOp::Pow => (PREC_POW, "^", PREC_ATOM, PREC_NEG),
            };
            (
                prec,
                Box::new(move |f| {
                    write_node(f, a, vars, lmin)?;
                    write!(f, "{sym}")?;
                    write_node(f, b, vars, rmin)
                }),
            )
        }
    };
    if prec < min {
        write!(f, "(")?;
        body(f)?;
        write!(f, ")")
    } else {
        body(f)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, &self.vars, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, f64)]) -> HashMap<&'a str, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn parse_and_eval_examples() {
        let e = Expr::parse("x1 + 2*x2^2", &["x1", "x2"]).unwrap();
        assert_eq!(e.eval(&bind(&[("x1", 1.0), ("x2", 2.0)])).unwrap(), 9.0);
        let e = Expr::parse("exp(x2)*0.5", &["t", "x2"]).unwrap();
        assert_eq!(e.eval(&bind(&[("x2", 0.0)])).unwrap(), 0.5);
        let e = Expr::parse("exp(x1+x2)", &["x1", "x2"]).unwrap();
        assert_eq!(e.eval(&bind(&[("x1", 0.0), ("x2", 0.0)])).unwrap(), 1.0);
        let e = Expr::parse("sin(t)^2 + cos(t)^2", &["t"]).unwrap();
        assert!((e.eval(&bind(&[("t", 0.7)])).unwrap() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn syntax_error_offset() {
        match Expr::parse("x1 +", &["x1"]) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Expr::parse("2*(x1", &["x1"]),
            Err(ExprError::Syntax { offset: 5, .. })
        ));
        assert!(matches!(
            Expr::parse("x1 x1", &["x1"]),
            Err(ExprError::Syntax { offset: 3, .. })
        ));
    }

    #[test]
    fn unknown_names() {
        assert_eq!(
            Expr::parse("x3 + 1", &["x1"]),
            Err(ExprError::UnknownVariable("x3".into()))
        );
        assert_eq!(
            Expr::parse("tan(x1)", &["x1"]),
            Err(ExprError::UnknownFunction("tan".into()))
        );
    }

    #[test]
    fn eval_errors() {
        let e = Expr::parse("x1/x2", &["x1", "x2"]).unwrap();
        assert!(matches!(
            e.eval(&bind(&[("x1", 1.0), ("x2", 0.0)])),
            Err(ExprError::Domain(_))
        ));
        assert_eq!(
            e.eval(&bind(&[("x1", 1.0)])),
            Err(ExprError::UnboundVariable("x2".into()))
        );
        let e = Expr::parse("log(x1) + sqrt(x1)", &["x1"]).unwrap();
        assert!(matches!(
            e.eval(&bind(&[("x1", -1.0)])),
            Err(ExprError::Domain(_))
        ));
        assert!(matches!(
            e.eval(&bind(&[("x1", 0.0)])),
            Err(ExprError::Domain(_))
        ));
    }

    #[test]
    fn precedence() {
        let vars = ["x"];
        let at = |s: &str, x: f64| {
            Expr::parse(s, &vars)
                .unwrap()
                .eval(&bind(&[("x", x)]))
                .unwrap()
        };
        assert_eq!(at("-x^2", 3.0), -9.0);
        assert_eq!(at("2^3^2", 0.0), 512.0);
        assert_eq!(at("2^-1", 0.0), 0.5);
        assert_eq!(at("8/2/2", 0.0), 2.0);
        assert_eq!(at("1-2-3", 0.0), -4.0);
        assert_eq!(at("-2*x", 3.0), -6.0);
        assert_eq!(at("1.5e1 + .5", 0.0), 15.5);
    }

    #[test]
    fn derivative_examples() {
        let vars = ["x1", "x2"];
        let e = Expr::parse("exp(x1+x2)", &vars).unwrap();
        assert_eq!(e.differentiate("x1").unwrap(), e);
        let e = Expr::parse("x1 + 2*x2^2", &vars).unwrap();
        assert_eq!(
            e.differentiate("x2").unwrap(),
            Expr::parse("4*x2", &vars).unwrap()
        );
        let e = Expr::parse("x1*x2", &vars).unwrap();
        let d = e.differentiate("x2").unwrap().differentiate("x1").unwrap();
        assert_eq!(d.as_constant(), Some(1.0));
        assert_eq!(d.to_string(), "1");
    }

    #[test]
    fn printing_round_trips() {
        let vars = ["t", "x1", "x2"];
        for src in [
            "-x1^2",
            "(-x1)^2",
            "x1 - (x2 - t)",
            "x1/(x2*t)",
            "2^3^2",
            "(2^3)^2",
            "x1*-x2",
            "exp(-(x1 + x2))*0.5",
            "sqrt(1 + x1^2) - log(2 + cos(t))",
        ] {
            let e = Expr::parse(src, &vars).unwrap();
            let again = Expr::parse(&e.to_string(), &vars).unwrap();
            assert_eq!(e, again, "{src} -> {e}");
        }
    }
}
