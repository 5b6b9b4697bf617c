//! Stock-and-flow model types and their core semantics.
//!
//! A [`Model`] is a flat list of declarations (parameters, lookups, stocks,
//! flows, outputs) plus a time specification. Declaration order is preserved
//! so evaluation and serialization are deterministic. The ODE system is never
//! written out by hand: [`net_derivatives`] derives each stock's rate of
//! change mechanically as the signed sum of the flows attached to it.

use std::fmt;

use indexmap::IndexMap;

use crate::expr::{eval_expression, Env, EvalError, Expr, LookupSet};
use crate::lookup::LookupTable;

pub type Ident = String;

/// Integration window: `[start, end]` stepped by `step` (years).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl TimeSpec {
    pub fn new(start: f64, end: f64, step: f64) -> TimeSpec {
        TimeSpec { start, end, step }
    }

    /// Checks start < end, step > 0, step <= end - start, all finite.
    pub fn is_valid(&self) -> bool {
        self.start.is_finite()
            && self.end.is_finite()
            && self.step.is_finite()
            && self.start < self.end
            && self.step > 0.0
            && self.step <= self.end - self.start
    }
}

/// A state variable that accumulates over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Stock {
    pub name: Ident,
    pub initial_value: f64,
}

/// A rate of change attached to one or two stocks. A missing `source` is a
/// boundary inflow; a missing `sink` is a boundary outflow.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub name: Ident,
    pub source: Option<Ident>,
    pub sink: Option<Ident>,
    pub rate: Expr,
}

/// Where a lookup's data comes from. File-backed lookups record the path as
/// written in the source; the data is resolved at load time, relative to the
/// model file.
#[derive(Debug, Clone, PartialEq)]
pub enum LookupSource {
    Inline(LookupTable),
    File { path: String },
}

impl LookupSource {
    pub fn table(&self) -> Option<&LookupTable> {
        match self {
            LookupSource::Inline(table) => Some(table),
            LookupSource::File { .. } => None,
        }
    }
}

/// One declaration in a model, in source order.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Parameter { name: Ident, value: f64 },
    Lookup { name: Ident, source: LookupSource },
    Stock(Stock),
    Flow(Flow),
    Output { name: Ident, expr: Expr },
}

impl Item {
    pub fn name(&self) -> &Ident {
        match self {
            Item::Parameter { name, .. } => name,
            Item::Lookup { name, .. } => name,
            Item::Stock(stock) => &stock.name,
            Item::Flow(flow) => &flow.name,
            Item::Output { name, .. } => name,
        }
    }
}

/// A complete stock-and-flow system.
///
/// Immutable once built (builder methods take `&mut self` but nothing mutates
/// a model mid-run), so it can be shared freely across concurrent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: Ident,
    pub time_spec: TimeSpec,
    items: Vec<Item>,
}

impl Model {
    pub fn new(name: impl Into<Ident>, time_spec: TimeSpec) -> Model {
        Model {
            name: name.into(),
            time_spec,
            items: Vec::new(),
        }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn add_item(&mut self, item: Item) {
        self.items.push(item);
    }

    pub fn add_parameter(&mut self, name: impl Into<Ident>, value: f64) {
        self.items.push(Item::Parameter {
            name: name.into(),
            value,
        });
    }

    pub fn add_lookup(&mut self, name: impl Into<Ident>, source: LookupSource) {
        self.items.push(Item::Lookup {
            name: name.into(),
            source,
        });
    }

    pub fn add_stock(&mut self, name: impl Into<Ident>, initial_value: f64) {
        self.items.push(Item::Stock(Stock {
            name: name.into(),
            initial_value,
        }));
    }

    pub fn add_flow(&mut self, flow: Flow) {
        self.items.push(Item::Flow(flow));
    }

    pub fn add_output(&mut self, name: impl Into<Ident>, expr: Expr) {
        self.items.push(Item::Output {
            name: name.into(),
            expr,
        });
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&Ident, f64)> {
        self.items.iter().filter_map(|item| match item {
            Item::Parameter { name, value } => Some((name, *value)),
            _ => None,
        })
    }

    pub fn stocks(&self) -> impl Iterator<Item = &Stock> {
        self.items.iter().filter_map(|item| match item {
            Item::Stock(stock) => Some(stock),
            _ => None,
        })
    }

    pub fn flows(&self) -> impl Iterator<Item = &Flow> {
        self.items.iter().filter_map(|item| match item {
            Item::Flow(flow) => Some(flow),
            _ => None,
        })
    }

    pub fn lookups(&self) -> impl Iterator<Item = (&Ident, &LookupSource)> {
        self.items.iter().filter_map(|item| match item {
            Item::Lookup { name, source } => Some((name, source)),
            _ => None,
        })
    }

    pub fn outputs(&self) -> impl Iterator<Item = (&Ident, &Expr)> {
        self.items.iter().filter_map(|item| match item {
            Item::Output { name, expr } => Some((name, expr)),
            _ => None,
        })
    }

    pub fn parameter(&self, name: &str) -> Option<f64> {
        self.parameters()
            .find(|(n, _)| n.as_str() == name)
            .map(|(_, v)| v)
    }

    pub fn stock(&self, name: &str) -> Option<&Stock> {
        self.stocks().find(|s| s.name == name)
    }

    pub fn lookup_table(&self, name: &str) -> Option<&LookupTable> {
        self.lookups()
            .find(|(n, _)| n.as_str() == name)
            .and_then(|(_, source)| source.table())
    }

    /// File-backed lookups whose data has not been loaded yet, as
    /// `(name, path)` pairs.
    pub fn unresolved_lookups(&self) -> Vec<(&Ident, &str)> {
        self.lookups()
            .filter_map(|(name, source)| match source {
                LookupSource::File { path } => Some((name, path.as_str())),
                LookupSource::Inline(_) => None,
            })
            .collect()
    }

    /// Replaces a file-backed lookup's source with loaded data. Returns false
    /// if no lookup has that name.
    pub fn resolve_lookup(&mut self, name: &str, table: LookupTable) -> bool {
        for item in &mut self.items {
            if let Item::Lookup { name: n, source } = item {
                if n == name {
                    *source = LookupSource::Inline(table);
                    return true;
                }
            }
        }
        false
    }

    /// Lookup set for expression evaluation. Unresolved file lookups map to
    /// `None` so evaluation can distinguish "no data" from "no such lookup".
    pub fn lookup_set(&self) -> LookupSet<'_> {
        self.lookups()
            .map(|(name, source)| (name.as_str(), source.table()))
            .collect()
    }
}

/// An expression evaluation failure tagged with the flow or output it
/// happened in.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesEvalError {
    /// Name of the flow or output whose expression failed.
    pub name: Ident,
    pub source: EvalError,
}

impl fmt::Display for SeriesEvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "in '{}': {}", self.name, self.source)
    }
}

impl std::error::Error for SeriesEvalError {}

/// Net rate of change for every stock at time `t`.
///
/// Each flow's rate is evaluated once and applied with opposite signs to its
/// source and sink, so internal transfers cancel exactly and closed systems
/// conserve their total by construction.
pub fn net_derivatives(
    model: &Model,
    stock_values: &IndexMap<Ident, f64>,
    t: f64,
) -> Result<IndexMap<Ident, f64>, SeriesEvalError> {
    let mut env = Env::new(t);
    for (name, value) in model.parameters() {
        env.bind(name.clone(), value);
    }
    for (name, value) in stock_values {
        env.bind(name.clone(), *value);
    }
    let lookups = model.lookup_set();

    let mut derivs: IndexMap<Ident, f64> = model
        .stocks()
        .map(|stock| (stock.name.clone(), 0.0))
        .collect();
    accumulate_rates(model, &env, &lookups, |stock, signed_rate| {
        if let Some(slot) = derivs.get_mut(stock) {
            *slot += signed_rate;
        }
    })?;
    Ok(derivs)
}

/// Evaluates every flow rate once in `env` and hands `(stock, signed rate)`
/// contributions to `apply`. Shared by the public derivative map and the
/// engine's slice-based stepping so both use identical arithmetic.
pub(crate) fn accumulate_rates(
    model: &Model,
    env: &Env,
    lookups: &LookupSet,
    mut apply: impl FnMut(&Ident, f64),
) -> Result<(), SeriesEvalError> {
    for flow in model.flows() {
        let rate = eval_expression(&flow.rate, env, lookups).map_err(|source| SeriesEvalError {
            name: flow.name.clone(),
            source,
        })?;
        if let Some(source) = &flow.source {
            apply(source, -rate);
        }
        if let Some(sink) = &flow.sink {
            apply(sink, rate);
        }
    }
    Ok(())
}

/// Dense output of one simulation run: the time grid and one series per
/// stock and output, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    pub series: IndexMap<Ident, Vec<f64>>,
    /// True when any lookup application during the run clamped outside its
    /// data range (extrapolation).
    pub lookups_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleError {
    UnknownSeries(Ident),
    OutOfRange { t: f64, first: f64, last: f64 },
}

impl fmt::Display for SampleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleError::UnknownSeries(name) => write!(f, "unknown series '{}'", name),
            SampleError::OutOfRange { t, first, last } => {
                write!(f, "time {} outside result range [{}, {}]", t, first, last)
            }
        }
    }
}

impl std::error::Error for SampleError {}

impl SimulationResult {
    pub fn series_names(&self) -> impl Iterator<Item = &Ident> {
        self.series.keys()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.get(name).map(Vec::as_slice)
    }

    /// Linear interpolation of a recorded series at time `t` on the result
    /// grid. `t` must lie within `[times.first, times.last]`.
    pub fn sample(&self, name: &str, t: f64) -> Result<f64, SampleError> {
        let values = self
            .series
            .get(name)
            .ok_or_else(|| SampleError::UnknownSeries(name.to_string()))?;
        let first = self.times[0];
        let last = self.times[self.times.len() - 1];
        if !(t >= first && t <= last) {
            return Err(SampleError::OutOfRange { t, first, last });
        }
        if t == last {
            return Ok(values[values.len() - 1]);
        }
        let idx = self.times.partition_point(|&grid| grid <= t);
        let (t0, v0) = (self.times[idx - 1], values[idx - 1]);
        let (t1, v1) = (self.times[idx], values[idx]);
        Ok(v0 + (t - t0) / (t1 - t0) * (v1 - v0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BinOp;

    fn spec() -> TimeSpec {
        TimeSpec::new(0.0, 10.0, 1.0)
    }

    fn stock_values(pairs: &[(&str, f64)]) -> IndexMap<Ident, f64> {
        pairs.iter().map(|(n, v)| (n.to_string(), *v)).collect()
    }

    #[test]
    fn single_boundary_inflow() {
        let mut model = Model::new("m", spec());
        model.add_stock("S", 0.0);
        model.add_flow(Flow {
            name: "f".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::Literal(5.0),
        });
        let derivs = net_derivatives(&model, &stock_values(&[("S", 0.0)]), 0.0).unwrap();
        assert_eq!(derivs.get("S"), Some(&5.0));
    }

    #[test]
    fn internal_transfer_is_antisymmetric() {
        let mut model = Model::new("m", spec());
        model.add_stock("A", 1.0);
        model.add_stock("B", 1.0);
        model.add_flow(Flow {
            name: "move".into(),
            source: Some("A".into()),
            sink: Some("B".into()),
            rate: Expr::Literal(2.0),
        });
        let derivs = net_derivatives(&model, &stock_values(&[("A", 1.0), ("B", 1.0)]), 0.0).unwrap();
        assert_eq!(derivs.get("A"), Some(&-2.0));
        assert_eq!(derivs.get("B"), Some(&2.0));
    }

    #[test]
    fn net_of_lookup_fed_inflow_and_proportional_outflow() {
        // inflow k * L(time), outflow d * S; k=0.025, L(t)=100, d=0.017, S=40
        // hand oracle: 0.025*100 - 0.017*40 = 1.82
        let mut model = Model::new("m", spec());
        model.add_parameter("k", 0.025);
        model.add_parameter("d", 0.017);
        model.add_lookup(
            "L",
            LookupSource::Inline(LookupTable::new(vec![(0.0, 100.0), (10.0, 100.0)]).unwrap()),
        );
        model.add_stock("S", 40.0);
        model.add_flow(Flow {
            name: "in".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::binary(
                BinOp::Mul,
                Expr::reference("k"),
                Expr::lookup("L", Expr::Time),
            ),
        });
        model.add_flow(Flow {
            name: "out".into(),
            source: Some("S".into()),
            sink: None,
            rate: Expr::binary(BinOp::Mul, Expr::reference("d"), Expr::reference("S")),
        });
        let derivs = net_derivatives(&model, &stock_values(&[("S", 40.0)]), 3.0).unwrap();
        assert!((derivs["S"] - 1.82).abs() < 1e-12);
    }

    #[test]
    fn closed_transfer_sums_to_zero_exactly() {
        // A single internal flow contributes the same evaluated rate with
        // opposite signs, so the stock derivatives cancel exactly.
        let mut model = Model::new("m", spec());
        model.add_parameter("k", 0.3);
        model.add_stock("A", 100.0);
        model.add_stock("B", 7.0);
        model.add_flow(Flow {
            name: "ab".into(),
            source: Some("A".into()),
            sink: Some("B".into()),
            rate: Expr::binary(BinOp::Mul, Expr::reference("k"), Expr::reference("A")),
        });
        let values = stock_values(&[("A", 100.0), ("B", 7.0)]);
        let derivs = net_derivatives(&model, &values, 0.5).unwrap();
        assert_eq!(derivs["A"] + derivs["B"], 0.0);
    }

    #[test]
    fn closed_cycle_conserves_up_to_subtotal_rounding() {
        // With several flows per stock the per-stock subtotals round before
        // the cross-stock sum, so the total is only zero to a few ulps.
        let mut model = Model::new("m", spec());
        model.add_parameter("k", 0.3);
        model.add_stock("A", 100.0);
        model.add_stock("B", 7.0);
        model.add_stock("C", 1.0);
        for (name, src, snk) in [("ab", "A", "B"), ("bc", "B", "C"), ("ca", "C", "A")] {
            model.add_flow(Flow {
                name: name.into(),
                source: Some(src.into()),
                sink: Some(snk.into()),
                rate: Expr::binary(BinOp::Mul, Expr::reference("k"), Expr::reference(src)),
            });
        }
        let values = stock_values(&[("A", 100.0), ("B", 7.0), ("C", 1.0)]);
        let derivs = net_derivatives(&model, &values, 0.5).unwrap();
        let total: f64 = derivs.values().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn evaluation_error_carries_flow_name() {
        let mut model = Model::new("m", spec());
        model.add_stock("S", 1.0);
        model.add_flow(Flow {
            name: "bad".into(),
            source: Some("S".into()),
            sink: None,
            rate: Expr::reference("nope"),
        });
        let err = net_derivatives(&model, &stock_values(&[("S", 1.0)]), 0.0).unwrap_err();
        assert_eq!(err.name, "bad");
        assert_eq!(err.source, EvalError::UnboundIdentifier("nope".into()));
    }

    #[test]
    fn derivative_maps_are_bit_identical_across_calls() {
        let mut model = Model::new("m", spec());
        model.add_parameter("k", 0.12345);
        model.add_stock("A", 3.7);
        model.add_stock("B", 0.2);
        model.add_flow(Flow {
            name: "ab".into(),
            source: Some("A".into()),
            sink: Some("B".into()),
            rate: Expr::binary(BinOp::Mul, Expr::reference("k"), Expr::reference("A")),
        });
        let values = stock_values(&[("A", 3.7), ("B", 0.2)]);
        let first = net_derivatives(&model, &values, 1.25).unwrap();
        for _ in 0..10 {
            let again = net_derivatives(&model, &values, 1.25).unwrap();
            assert_eq!(first, again);
        }
    }

    #[test]
    fn sample_at_grid_point_and_midpoint() {
        let result = SimulationResult {
            times: vec![0.0, 1.0, 2.0],
            series: [("S".to_string(), vec![10.0, 20.0, 20.0])]
                .into_iter()
                .collect(),
            lookups_clamped: false,
        };
        assert_eq!(result.sample("S", 1.0), Ok(20.0));
        assert_eq!(result.sample("S", 0.5), Ok(15.0));
        assert_eq!(result.sample("S", 2.0), Ok(20.0));
        assert!(matches!(
            result.sample("S", 2.5),
            Err(SampleError::OutOfRange { .. })
        ));
        assert_eq!(
            result.sample("T", 1.0),
            Err(SampleError::UnknownSeries("T".into()))
        );
    }

    #[test]
    fn unresolved_lookup_listing_and_resolution() {
        let mut model = Model::new("m", spec());
        model.add_lookup(
            "L",
            LookupSource::File {
                path: "data/l.csv".into(),
            },
        );
        assert_eq!(model.unresolved_lookups().len(), 1);
        assert!(model.lookup_table("L").is_none());
        let table = LookupTable::new(vec![(0.0, 1.0)]).unwrap();
        assert!(model.resolve_lookup("L", table.clone()));
        assert!(model.unresolved_lookups().is_empty());
        assert_eq!(model.lookup_table("L"), Some(&table));
        assert!(!model.resolve_lookup("missing", table));
    }
}
