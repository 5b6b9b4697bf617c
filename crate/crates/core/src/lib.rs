//! Stock-and-flow system dynamics toolkit.
//!
//! The crate covers the full loop of a simulation study at library level:
//! declare a model (programmatically or in the SDL text format), integrate it
//! as an ODE system over its time window, compare the result against observed
//! series, and calibrate free parameters by derivative-free least squares.
//! A worked naive T-cell population model ships in [`tcell`].

pub mod calibrate;
pub mod engine;
pub mod expr;
pub mod lookup;
pub mod model;
pub mod parser;
pub mod series_csv;
pub mod tcell;
#[cfg(feature = "testgen")]
pub mod testgen;
pub mod validate;

pub use expr::{eval_expression, BinOp, Builtin, Env, EvalError, Expr, LookupSet};
pub use lookup::{LookupTable, LookupTableError};
pub use model::{
    net_derivatives, Flow, Ident, Item, LookupSource, Model, SampleError, SeriesEvalError,
    SimulationResult, Stock, TimeSpec,
};
pub use parser::{parse_model, serialize_model, ParseError, ParseErrorCode, SourceSpan};
pub use validate::{validate_model, validate_result, Diagnostic, DiagnosticCode, Severity};
