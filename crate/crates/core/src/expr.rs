//! Arithmetic rate expressions over parameters, stocks, lookups and time.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;

use crate::lookup::LookupTable;
use crate::model::Ident;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Built-in functions callable from rate expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builtin {
    Exp,
    Min,
    Max,
}

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::Exp => "exp",
            Builtin::Min => "min",
            Builtin::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Exp => 1,
            Builtin::Min | Builtin::Max => 2,
        }
    }
}

/// Expression AST. Identifier references resolve against an [`Env`];
/// lookup applications resolve against the model's lookup set.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(f64),
    /// Reference to a parameter or stock value.
    Ref(Ident),
    /// The current simulation time.
    Time,
    /// Application of a lookup table: `name(arg)`.
    Lookup(Ident, Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn lookup(name: impl Into<Ident>, arg: Expr) -> Expr {
        Expr::Lookup(name.into(), Box::new(arg))
    }

    pub fn reference(name: impl Into<Ident>) -> Expr {
        Expr::Ref(name.into())
    }

    /// Every identifier the expression mentions, in syntactic order:
    /// value references and lookup names.
    pub fn referenced_idents(&self) -> Vec<(&Ident, RefKind)> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<(&'a Ident, RefKind)>) {
        match self {
            Expr::Literal(_) | Expr::Time => {}
            Expr::Ref(name) => out.push((name, RefKind::Value)),
            Expr::Lookup(name, arg) => {
                out.push((name, RefKind::LookupCallee));
                arg.collect_refs(out);
            }
            Expr::Neg(inner) => inner.collect_refs(out),
            Expr::Binary(_, lhs, rhs) => {
                lhs.collect_refs(out);
                rhs.collect_refs(out);
            }
            Expr::Call(_, args) => {
                for arg in args {
                    arg.collect_refs(out);
                }
            }
        }
    }
}

/// How an identifier is used inside an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    /// Plain value position: must be a parameter or stock.
    Value,
    /// Applied as a lookup: must be a lookup table.
    LookupCallee,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    UnboundIdentifier(Ident),
    UnknownLookup(Ident),
    /// The lookup is declared but its file-backed data was never loaded.
    UnresolvedLookup(Ident),
    DivisionByZero,
    NonFiniteResult,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::UnboundIdentifier(name) => write!(f, "unbound identifier '{}'", name),
            EvalError::UnknownLookup(name) => write!(f, "unknown lookup '{}'", name),
            EvalError::UnresolvedLookup(name) => {
                write!(f, "lookup '{}' has no data loaded", name)
            }
            EvalError::DivisionByZero => write!(f, "division by zero"),
            EvalError::NonFiniteResult => write!(f, "result is not finite"),
        }
    }
}

impl std::error::Error for EvalError {}

/// Value bindings for one evaluation: identifier values plus the current time.
///
/// The env also records whether any lookup application clamped outside its
/// data range, so a run can report extrapolation.
#[derive(Debug, Clone)]
pub struct Env {
    time: f64,
    values: HashMap<Ident, f64>,
    clamped: Cell<bool>,
}

impl Env {
    pub fn new(time: f64) -> Env {
        Env {
            time,
            values: HashMap::new(),
            clamped: Cell::new(false),
        }
    }

    pub fn bind(&mut self, name: impl Into<Ident>, value: f64) {
        self.values.insert(name.into(), value);
    }

    /// Like [`Env::bind`] but avoids re-allocating the key when it is
    /// already bound (the common case in an integration loop).
    pub fn rebind(&mut self, name: &str, value: f64) {
        if let Some(slot) = self.values.get_mut(name) {
            *slot = value;
        } else {
            self.values.insert(name.to_string(), value);
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    /// True if any lookup application since construction fell outside its
    /// table's data range.
    pub fn lookups_clamped(&self) -> bool {
        self.clamped.get()
    }
}

/// Lookup tables visible during evaluation. `None` marks a lookup that is
/// declared but whose file-backed data has not been resolved.
pub type LookupSet<'a> = HashMap<&'a str, Option<&'a LookupTable>>;

pub fn eval_expression(expr: &Expr, env: &Env, lookups: &LookupSet) -> Result<f64, EvalError> {
    let value = match expr {
        Expr::Literal(v) => *v,
        Expr::Time => env.time(),
        Expr::Ref(name) => env
            .get(name)
            .ok_or_else(|| EvalError::UnboundIdentifier(name.clone()))?,
        Expr::Lookup(name, arg) => {
            let table = match lookups.get(name.as_str()) {
                Some(Some(table)) => *table,
                Some(None) => return Err(EvalError::UnresolvedLookup(name.clone())),
                None => return Err(EvalError::UnknownLookup(name.clone())),
            };
            let at = eval_expression(arg, env, lookups)?;
            if table.clamps_at(at) {
                env.clamped.set(true);
            }
            table.interpolate(at)
        }
        Expr::Neg(inner) => -eval_expression(inner, env, lookups)?,
        Expr::Binary(op, lhs, rhs) => {
            let a = eval_expression(lhs, env, lookups)?;
            let b = eval_expression(rhs, env, lookups)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    a / b
                }
            }
        }
        Expr::Call(builtin, args) => {
            debug_assert_eq!(args.len(), builtin.arity());
            match builtin {
                Builtin::Exp => eval_expression(&args[0], env, lookups)?.exp(),
                Builtin::Min => {
                    let a = eval_expression(&args[0], env, lookups)?;
                    let b = eval_expression(&args[1], env, lookups)?;
                    a.min(b)
                }
                Builtin::Max => {
                    let a = eval_expression(&args[0], env, lookups)?;
                    let b = eval_expression(&args[1], env, lookups)?;
                    a.max(b)
                }
            }
        }
    };
    if !value.is_finite() {
        return Err(EvalError::NonFiniteResult);
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_lookups() -> LookupSet<'static> {
        HashMap::new()
    }

    #[test]
    fn arithmetic_with_binding() {
        // 2 * k + 1 with k = 3
        let expr = Expr::binary(
            BinOp::Add,
            Expr::binary(BinOp::Mul, Expr::Literal(2.0), Expr::reference("k")),
            Expr::Literal(1.0),
        );
        let mut env = Env::new(0.0);
        env.bind("k", 3.0);
        assert_eq!(eval_expression(&expr, &env, &no_lookups()), Ok(7.0));
    }

    #[test]
    fn lookup_application_interpolates() {
        let table = LookupTable::new(vec![(0.0, 10.0), (10.0, 20.0)]).unwrap();
        let mut lookups = LookupSet::new();
        lookups.insert("RealNaives", Some(&table));
        let expr = Expr::lookup("RealNaives", Expr::Time);
        let env = Env::new(5.0);
        assert_eq!(eval_expression(&expr, &env, &lookups), Ok(15.0));
        assert!(!env.lookups_clamped());
        let env = Env::new(25.0);
        assert_eq!(eval_expression(&expr, &env, &lookups), Ok(20.0));
        assert!(env.lookups_clamped());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let expr = Expr::binary(BinOp::Div, Expr::reference("x"), Expr::reference("y"));
        let mut env = Env::new(0.0);
        env.bind("x", 1.0);
        env.bind("y", 0.0);
        assert_eq!(
            eval_expression(&expr, &env, &no_lookups()),
            Err(EvalError::DivisionByZero)
        );
    }

    #[test]
    fn unbound_identifier() {
        let expr = Expr::reference("missing");
        assert_eq!(
            eval_expression(&expr, &Env::new(0.0), &no_lookups()),
            Err(EvalError::UnboundIdentifier("missing".to_string()))
        );
    }

    #[test]
    fn overflow_is_non_finite() {
        let expr = Expr::Call(Builtin::Exp, vec![Expr::Literal(1e4)]);
        assert_eq!(
            eval_expression(&expr, &Env::new(0.0), &no_lookups()),
            Err(EvalError::NonFiniteResult)
        );
        let expr = Expr::binary(BinOp::Mul, Expr::Literal(1e308), Expr::Literal(10.0));
        assert_eq!(
            eval_expression(&expr, &Env::new(0.0), &no_lookups()),
            Err(EvalError::NonFiniteResult)
        );
    }

    #[test]
    fn builtins_and_negation() {
        let env = Env::new(2.0);
        let expr = Expr::Call(Builtin::Min, vec![Expr::Time, Expr::Literal(1.5)]);
        assert_eq!(eval_expression(&expr, &env, &no_lookups()), Ok(1.5));
        let expr = Expr::Call(Builtin::Max, vec![Expr::Time, Expr::Literal(1.5)]);
        assert_eq!(eval_expression(&expr, &env, &no_lookups()), Ok(2.0));
        let expr = Expr::Neg(Box::new(Expr::Time));
        assert_eq!(eval_expression(&expr, &env, &no_lookups()), Ok(-2.0));
        let expr = Expr::Call(Builtin::Exp, vec![Expr::Literal(0.0)]);
        assert_eq!(eval_expression(&expr, &env, &no_lookups()), Ok(1.0));
    }

    #[test]
    fn referenced_idents_in_order() {
        let expr = Expr::binary(
            BinOp::Mul,
            Expr::reference("k"),
            Expr::lookup("L", Expr::reference("s")),
        );
        let refs = expr.referenced_idents();
        let names: Vec<&str> = refs.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["k", "L", "s"]);
        assert_eq!(refs[1].1, RefKind::LookupCallee);
        assert_eq!(refs[2].1, RefKind::Value);
    }
}
