//! Expression tree shared by stocks, auxiliaries and table lookups.
//!
//! Expressions are immutable once built. Numeric literals produced by the
//! parser are always non-negative; negation is an explicit [`Expr::Neg`] node.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{OutOfRange, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

/// The fixed builtin catalogue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Builtin {
    Min,
    Max,
    Exp,
    Ln,
    Abs,
    Lookup,
    Delay1,
    Delay3,
    Smth1,
    Smth3,
}

pub const BUILTINS: [Builtin; 10] = [
    Builtin::Min,
    Builtin::Max,
    Builtin::Exp,
    Builtin::Ln,
    Builtin::Abs,
    Builtin::Lookup,
    Builtin::Delay1,
    Builtin::Delay3,
    Builtin::Smth1,
    Builtin::Smth3,
];

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::Min => "MIN",
            Builtin::Max => "MAX",
            Builtin::Exp => "EXP",
            Builtin::Ln => "LN",
            Builtin::Abs => "ABS",
            Builtin::Lookup => "LOOKUP",
            Builtin::Delay1 => "DELAY1",
            Builtin::Delay3 => "DELAY3",
            Builtin::Smth1 => "SMTH1",
            Builtin::Smth3 => "SMTH3",
        }
    }

    pub fn from_name(name: &str) -> Option<Builtin> {
        BUILTINS.iter().copied().find(|b| b.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Exp | Builtin::Ln | Builtin::Abs => 1,
            _ => 2,
        }
    }

    pub fn is_delay(self) -> bool {
        self.delay_order().is_some()
    }

    /// Number of hidden stages for delay and smooth builtins.
    pub fn delay_order(self) -> Option<usize> {
        match self {
            Builtin::Delay1 | Builtin::Smth1 => Some(1),
            Builtin::Delay3 | Builtin::Smth3 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Number(f64),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// Builtin call. For `LOOKUP` the first argument is always `Var(table)`.
    Call(Builtin, Vec<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Number(v)
    }

    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn neg(e: Expr) -> Expr {
        Expr::Neg(Box::new(e))
    }

    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn call(b: Builtin, args: Vec<Expr>) -> Expr {
        Expr::Call(b, args)
    }

    pub fn lookup(table: impl Into<String>, arg: Expr) -> Expr {
        Expr::Call(Builtin::Lookup, vec![Expr::Var(table.into()), arg])
    }

    /// `Some((builtin, input, delay_time))` when the whole expression is a delay call.
    pub fn as_delay(&self) -> Option<(Builtin, &Expr, &Expr)> {
        match self {
            Expr::Call(b, args) if b.is_delay() && args.len() == 2 => Some((*b, &args[0], &args[1])),
            _ => None,
        }
    }

    pub fn contains_delay(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if let Expr::Call(b, _) = e {
                found |= b.is_delay();
            }
        });
        found
    }

    /// Pre-order traversal over every node.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Number(_) | Expr::Var(_) => {}
            Expr::Neg(e) => e.walk(f),
            Expr::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
        }
    }

    /// Table names referenced through `LOOKUP`.
    pub fn table_refs(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Call(Builtin::Lookup, args) = e {
                if let Some(Expr::Var(t)) = args.first() {
                    out.insert(t.clone());
                }
            }
        });
        out
    }

    /// Replaces every delay call by its input expression (its steady-state value).
    pub fn strip_delays(&self) -> Expr {
        match self {
            Expr::Number(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(e) => Expr::neg(e.strip_delays()),
            Expr::Binary(op, l, r) => Expr::bin(*op, l.strip_delays(), r.strip_delays()),
            Expr::Call(b, args) if b.is_delay() && !args.is_empty() => args[0].strip_delays(),
            Expr::Call(b, args) => Expr::Call(*b, args.iter().map(Expr::strip_delays).collect()),
        }
    }

    /// Replaces `Var(name)` leaves according to `subst`.
    pub fn substitute(&self, subst: &BTreeMap<String, Expr>) -> Expr {
        match self {
            Expr::Number(_) => self.clone(),
            Expr::Var(v) => subst.get(v).cloned().unwrap_or_else(|| self.clone()),
            Expr::Neg(e) => Expr::neg(e.substitute(subst)),
            Expr::Binary(op, l, r) => Expr::bin(*op, l.substitute(subst), r.substitute(subst)),
            Expr::Call(Builtin::Lookup, args) if args.len() == 2 => {
                Expr::Call(Builtin::Lookup, vec![args[0].clone(), args[1].substitute(subst)])
            }
            Expr::Call(b, args) => Expr::Call(*b, args.iter().map(|a| a.substitute(subst)).collect()),
        }
    }
}

/// Identifiers referenced as variables. Table names inside `LOOKUP` are excluded.
pub fn free_vars(expr: &Expr) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    collect_vars(expr, &mut out);
    out
}

fn collect_vars(expr: &Expr, out: &mut BTreeSet<String>) {
    match expr {
        Expr::Number(_) => {}
        Expr::Var(v) => {
            out.insert(v.clone());
        }
        Expr::Neg(e) => collect_vars(e, out),
        Expr::Binary(_, l, r) => {
            collect_vars(l, out);
            collect_vars(r, out);
        }
        Expr::Call(Builtin::Lookup, args) => args.iter().skip(1).for_each(|a| collect_vars(a, out)),
        Expr::Call(_, args) => args.iter().for_each(|a| collect_vars(a, out)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainKind {
    LnNonPositive,
    DivByZero,
    NegativeBaseFractionalPower,
    NonFiniteResult,
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DomainKind::LnNonPositive => "LN of a non-positive value",
            DomainKind::DivByZero => "division by zero",
            DomainKind::NegativeBaseFractionalPower => "negative base raised to a fractional power",
            DomainKind::NonFiniteResult => "non-finite result",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(DomainKind),
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("{0} must be expanded into hidden stocks before evaluation")]
    DelayNotExpanded(Builtin),
    #[error("{builtin} expects {expected} argument(s), found {found}")]
    Arity { builtin: Builtin, expected: usize, found: usize },
}

/// Variable bindings consulted by [`eval`].
pub trait Env {
    fn lookup(&self, name: &str) -> Option<f64>;
}

impl Env for HashMap<String, f64> {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl Env for BTreeMap<String, f64> {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl<F: Fn(&str) -> Option<f64>> Env for F {
    fn lookup(&self, name: &str) -> Option<f64> {
        self(name)
    }
}

/// Table lookup by name, as consumed by [`eval`].
pub trait Tables {
    fn table(&self, name: &str) -> Option<&Table>;
}

impl Tables for [Table] {
    fn table(&self, name: &str) -> Option<&Table> {
        self.iter().find(|t| t.name == name)
    }
}

impl Tables for Vec<Table> {
    fn table(&self, name: &str) -> Option<&Table> {
        self.as_slice().table(name)
    }
}

impl Tables for BTreeMap<String, Table> {
    fn table(&self, name: &str) -> Option<&Table> {
        self.get(name)
    }
}

fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::Domain(DomainKind::NonFiniteResult))
    }
}

pub fn eval<E: Env + ?Sized, T: Tables + ?Sized>(expr: &Expr, env: &E, tables: &T) -> Result<f64, EvalError> {
    match expr {
        Expr::Number(v) => finite(*v),
        Expr::Var(name) => env
            .lookup(name)
            .ok_or_else(|| EvalError::UnboundVariable(name.clone()))
            .and_then(finite),
        Expr::Neg(e) => Ok(-eval(e, env, tables)?),
        Expr::Binary(op, l, r) => {
            let a = eval(l, env, tables)?;
            let b = eval(r, env, tables)?;
            match op {
                BinOp::Add => finite(a + b),
                BinOp::Sub => finite(a - b),
                BinOp::Mul => finite(a * b),
                BinOp::Div => {
                    if b == 0.0 {
                        Err(EvalError::Domain(DomainKind::DivByZero))
                    } else {
                        finite(a / b)
                    }
                }
                BinOp::Pow => {
                    if a < 0.0 && b.fract() != 0.0 {
                        Err(EvalError::Domain(DomainKind::NegativeBaseFractionalPower))
                    } else if a == 0.0 && b < 0.0 {
                        Err(EvalError::Domain(DomainKind::DivByZero))
                    } else {
                        finite(a.powf(b))
                    }
                }
            }
        }
        Expr::Call(b, args) => {
            if args.len() != b.arity() {
                return Err(EvalError::Arity { builtin: *b, expected: b.arity(), found: args.len() });
            }
            match b {
                Builtin::Min => Ok(eval(&args[0], env, tables)?.min(eval(&args[1], env, tables)?)),
                Builtin::Max => Ok(eval(&args[0], env, tables)?.max(eval(&args[1], env, tables)?)),
                Builtin::Exp => finite(eval(&args[0], env, tables)?.exp()),
                Builtin::Ln => {
                    let x = eval(&args[0], env, tables)?;
                    if x <= 0.0 {
                        Err(EvalError::Domain(DomainKind::LnNonPositive))
                    } else {
                        Ok(x.ln())
                    }
                }
                Builtin::Abs => Ok(eval(&args[0], env, tables)?.abs()),
                Builtin::Lookup => {
                    let name = match &args[0] {
                        Expr::Var(t) => t,
                        other => return Err(EvalError::UnknownTable(format!("{other:?}"))),
                    };
                    let table = tables.table(name).ok_or_else(|| EvalError::UnknownTable(name.clone()))?;
                    let x = eval(&args[1], env, tables)?;
                    finite(table.interpolate(x))
                }
                Builtin::Delay1 | Builtin::Delay3 | Builtin::Smth1 | Builtin::Smth3 => {
                    Err(EvalError::DelayNotExpanded(*b))
                }
            }
        }
    }
}

impl Table {
    /// Piecewise-linear interpolation. Outside the knot range the table either
    /// holds the end value or extends the end segment.
    pub fn interpolate(&self, x: f64) -> f64 {
        let pts = &self.points;
        let n = pts.len();
        if n == 0 {
            return f64::NAN;
        }
        if n == 1 {
            return pts[0].1;
        }
        let seg = |i: usize, x: f64| {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[i + 1];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        if x <= pts[0].0 {
            return match self.out_of_range {
                OutOfRange::Clamp => pts[0].1,
                OutOfRange::Extrapolate => seg(0, x),
            };
        }
        if x >= pts[n - 1].0 {
            return match self.out_of_range {
                OutOfRange::Clamp => pts[n - 1].1,
                OutOfRange::Extrapolate => seg(n - 2, x),
            };
        }
        // first knot strictly greater than x
        let hi = pts.partition_point(|p| p.0 <= x);
        if pts[hi - 1].0 == x {
            return pts[hi - 1].1;
        }
        seg(hi - 1, x)
    }
}
