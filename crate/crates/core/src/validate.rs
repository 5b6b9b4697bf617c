//! Structural model checks and post-run sanity checks.

use std::collections::HashMap;
use std::fmt;

use crate::expr::RefKind;
use crate::model::{Ident, Item, Model, SimulationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticCode {
    DuplicateIdentifier,
    UnresolvedReference,
    InvalidFlow,
    InvalidTimeSpec,
    NonFiniteValue,
    NegativeStockValue,
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiagnosticCode::DuplicateIdentifier => "DUPLICATE_IDENTIFIER",
            DiagnosticCode::UnresolvedReference => "UNRESOLVED_REFERENCE",
            DiagnosticCode::InvalidFlow => "INVALID_FLOW",
            DiagnosticCode::InvalidTimeSpec => "BAD_TIME_SPEC",
            DiagnosticCode::NonFiniteValue => "NON_FINITE_VALUE",
            DiagnosticCode::NegativeStockValue => "NEGATIVE_STOCK_VALUE",
        };
        f.write_str(s)
    }
}

/// One finding from model validation: a machine-readable code, the offending
/// identifier when there is one, and a human message.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagnosticCode,
    pub ident: Option<Ident>,
    pub message: String,
}

impl Diagnostic {
    fn error(code: DiagnosticCode, ident: impl Into<Ident>, message: String) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            code,
            ident: Some(ident.into()),
            message,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}[{}]: {}", kind, self.code, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NameKind {
    Parameter,
    Lookup,
    Stock,
    Output,
}

impl NameKind {
    fn describe(self) -> &'static str {
        match self {
            NameKind::Parameter => "parameter",
            NameKind::Lookup => "lookup",
            NameKind::Stock => "stock",
            NameKind::Output => "output",
        }
    }
}

/// Checks every structural invariant of a model and returns the findings.
/// An empty list means the model is well-formed and runnable (file-backed
/// lookups may still need their data loaded).
pub fn validate_model(model: &Model) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    if !model.time_spec.is_valid() {
        diags.push(Diagnostic {
            severity: Severity::Error,
            code: DiagnosticCode::InvalidTimeSpec,
            ident: None,
            message: format!(
                "time spec start={} end={} step={} is invalid (need start < end, 0 < step <= end - start)",
                model.time_spec.start, model.time_spec.end, model.time_spec.step
            ),
        });
    }

    // Single namespace across parameters, lookups, stocks and outputs; flow
    // names are checked among themselves.
    let mut names: HashMap<&str, NameKind> = HashMap::new();
    let mut flow_names: HashMap<&str, ()> = HashMap::new();
    for item in model.items() {
        match item {
            Item::Flow(flow) => {
                if flow_names.insert(flow.name.as_str(), ()).is_some() {
                    diags.push(Diagnostic::error(
                        DiagnosticCode::DuplicateIdentifier,
                        flow.name.clone(),
                        format!("flow '{}' is declared more than once", flow.name),
                    ));
                }
            }
            _ => {
                let kind = match item {
                    Item::Parameter { .. } => NameKind::Parameter,
                    Item::Lookup { .. } => NameKind::Lookup,
                    Item::Stock(_) => NameKind::Stock,
                    Item::Output { .. } => NameKind::Output,
                    Item::Flow(_) => unreachable!(),
                };
                if let Some(existing) = names.insert(item.name().as_str(), kind) {
                    diags.push(Diagnostic::error(
                        DiagnosticCode::DuplicateIdentifier,
                        item.name().clone(),
                        format!(
                            "'{}' is already declared as a {}",
                            item.name(),
                            existing.describe()
                        ),
                    ));
                }
            }
        }
    }

    for (name, value) in model.parameters() {
        if !value.is_finite() {
            diags.push(Diagnostic::error(
                DiagnosticCode::NonFiniteValue,
                name.clone(),
                format!("parameter '{}' has a non-finite value", name),
            ));
        }
    }
    for stock in model.stocks() {
        if !stock.initial_value.is_finite() {
            diags.push(Diagnostic::error(
                DiagnosticCode::NonFiniteValue,
                stock.name.clone(),
                format!("stock '{}' has a non-finite initial value", stock.name),
            ));
        }
    }

    for flow in model.flows() {
        if flow.source.is_none() && flow.sink.is_none() {
            diags.push(Diagnostic::error(
                DiagnosticCode::InvalidFlow,
                flow.name.clone(),
                format!("flow '{}' has neither a source nor a sink", flow.name),
            ));
        }
        if let (Some(source), Some(sink)) = (&flow.source, &flow.sink) {
            if source == sink {
                diags.push(Diagnostic::error(
                    DiagnosticCode::InvalidFlow,
                    flow.name.clone(),
                    format!("flow '{}' has the same stock as source and sink", flow.name),
                ));
            }
        }
        for endpoint in [&flow.source, &flow.sink].into_iter().flatten() {
            match names.get(endpoint.as_str()) {
                Some(NameKind::Stock) => {}
                Some(other) => diags.push(Diagnostic::error(
                    DiagnosticCode::UnresolvedReference,
                    endpoint.clone(),
                    format!(
                        "flow '{}' endpoint '{}' is a {}, not a stock",
                        flow.name,
                        endpoint,
                        other.describe()
                    ),
                )),
                None => diags.push(Diagnostic::error(
                    DiagnosticCode::UnresolvedReference,
                    endpoint.clone(),
                    format!("flow '{}' references undeclared stock '{}'", flow.name, endpoint),
                )),
            }
        }
    }

    // Expression references: flows and outputs.
    let exprs = model
        .flows()
        .map(|flow| (&flow.name, &flow.rate))
        .chain(model.outputs().map(|(name, expr)| (name, expr)));
    for (owner, expr) in exprs {
        for literal in expr_literals(expr) {
            if !literal.is_finite() {
                diags.push(Diagnostic::error(
                    DiagnosticCode::NonFiniteValue,
                    owner.clone(),
                    format!("'{}' contains a non-finite literal", owner),
                ));
            }
        }
        for (ident, kind) in expr.referenced_idents() {
            let found = names.get(ident.as_str()).copied();
            match (kind, found) {
                (RefKind::Value, Some(NameKind::Parameter | NameKind::Stock)) => {}
                (RefKind::LookupCallee, Some(NameKind::Lookup)) => {}
                (RefKind::Value, Some(NameKind::Lookup)) => {
                    diags.push(Diagnostic::error(
                        DiagnosticCode::UnresolvedReference,
                        ident.clone(),
                        format!(
                            "'{}' uses lookup '{}' as a value; apply it as {}(...)",
                            owner, ident, ident
                        ),
                    ));
                }
                (RefKind::Value, Some(NameKind::Output)) => {
                    diags.push(Diagnostic::error(
                        DiagnosticCode::UnresolvedReference,
                        ident.clone(),
                        format!("'{}' references output '{}'; outputs cannot be referenced", owner, ident),
                    ));
                }
                (RefKind::LookupCallee, Some(other)) => {
                    diags.push(Diagnostic::error(
                        DiagnosticCode::UnresolvedReference,
                        ident.clone(),
                        format!(
                            "'{}' applies '{}' as a lookup, but it is a {}",
                            owner,
                            ident,
                            other.describe()
                        ),
                    ));
                }
                (_, None) => {
                    diags.push(Diagnostic::error(
                        DiagnosticCode::UnresolvedReference,
                        ident.clone(),
                        format!("'{}' references undeclared identifier '{}'", owner, ident),
                    ));
                }
            }
        }
    }

    diags
}

/// Post-run checks. Negative stock values are reported as warnings rather
/// than clipped during integration: cell counts cannot go negative, but
/// repairing the state mid-run would change the dynamics without anyone
/// noticing.
pub fn validate_result(model: &Model, result: &SimulationResult) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for stock in model.stocks() {
        if let Some(values) = result.get(&stock.name) {
            if let Some((idx, value)) = values
                .iter()
                .enumerate()
                .find(|(_, v)| **v < 0.0)
                .map(|(i, v)| (i, *v))
            {
                diags.push(Diagnostic {
                    severity: Severity::Warning,
                    code: DiagnosticCode::NegativeStockValue,
                    ident: Some(stock.name.clone()),
                    message: format!(
                        "stock '{}' goes negative ({} at t={})",
                        stock.name, value, result.times[idx]
                    ),
                });
            }
        }
    }
    diags
}

fn expr_literals(expr: &crate::expr::Expr) -> Vec<f64> {
    use crate::expr::Expr;
    let mut out = Vec::new();
    let mut stack = vec![expr];
    while let Some(e) = stack.pop() {
        match e {
            Expr::Literal(v) => out.push(*v),
            Expr::Ref(_) | Expr::Time => {}
            Expr::Lookup(_, arg) => stack.push(arg),
            Expr::Neg(inner) => stack.push(inner),
            Expr::Binary(_, lhs, rhs) => {
                stack.push(lhs);
                stack.push(rhs);
            }
            Expr::Call(_, args) => stack.extend(args.iter()),
        }
    }
    out
}
