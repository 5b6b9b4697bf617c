//! Fixed-step time integration of a model over its time spec.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::expr::{eval_expression, Env, Expr, LookupSet};
use crate::model::{accumulate_rates, Ident, Item, Model, SeriesEvalError, SimulationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegratorKind {
    Euler,
    #[default]
    Rk4,
}

impl fmt::Display for IntegratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegratorKind::Euler => f.write_str("euler"),
            IntegratorKind::Rk4 => f.write_str("rk4"),
        }
    }
}

impl FromStr for IntegratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(IntegratorKind::Euler),
            "rk4" => Ok(IntegratorKind::Rk4),
            other => Err(format!("unknown integrator '{}' (expected euler or rk4)", other)),
        }
    }
}

/// Per-run settings: scheme, optional step override and parameter overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub integrator: IntegratorKind,
    pub step_override: Option<f64>,
    pub parameter_overrides: IndexMap<Ident, f64>,
}

impl RunConfig {
    pub fn with_override(mut self, name: impl Into<Ident>, value: f64) -> Self {
        self.parameter_overrides.insert(name.into(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    InvalidTimeSpec,
    InvalidStep(f64),
    UnknownParameter(Ident),
    UnresolvedLookup { name: Ident, path: String },
    /// An expression failed to evaluate; `time` is the stage time.
    Evaluation { time: f64, source: SeriesEvalError },
    /// Integration produced a non-finite stock value and was aborted.
    NonFiniteState { time: f64, stock: Ident },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::InvalidTimeSpec => write!(f, "model time spec is invalid"),
            RunError::InvalidStep(h) => write!(
                f,
                "step {} is invalid (need 0 < step <= end - start)",
                h
            ),
            RunError::UnknownParameter(name) => {
                write!(f, "override names unknown parameter '{}'", name)
            }
            RunError::UnresolvedLookup { name, path } => write!(
                f,
                "lookup '{}' has no data (file \"{}\" not loaded)",
                name, path
            ),
            RunError::Evaluation { time, source } => {
                write!(f, "evaluation failed at t={}: {}", time, source)
            }
            RunError::NonFiniteState { time, stock } => write!(
                f,
                "integration aborted: stock '{}' became non-finite at t={}",
                stock, time
            ),
        }
    }
}

impl std::error::Error for RunError {}

/// Everything a step needs besides the state vector itself.
struct StepCtx<'m> {
    model: &'m Model,
    lookups: LookupSet<'m>,
    stock_names: Vec<&'m Ident>,
    stock_index: HashMap<&'m str, usize>,
}

impl<'m> StepCtx<'m> {
    fn new(model: &'m Model) -> StepCtx<'m> {
        let stock_names: Vec<&Ident> = model.stocks().map(|s| &s.name).collect();
        let stock_index = stock_names
            .iter()
            .enumerate()
            .map(|(i, name)| (name.as_str(), i))
            .collect();
        StepCtx {
            model,
            lookups: model.lookup_set(),
            stock_names,
            stock_index,
        }
    }

    fn bind_state(&self, env: &mut Env, state: &[f64], t: f64) {
        env.set_time(t);
        for (i, name) in self.stock_names.iter().enumerate() {
            env.rebind(name, state[i]);
        }
    }

    /// Signed flow sums per stock, into `out` (zeroed first).
    fn derivatives(&self, env: &Env, out: &mut [f64]) -> Result<(), SeriesEvalError> {
        out.fill(0.0);
        accumulate_rates(self.model, env, &self.lookups, |stock, signed_rate| {
            if let Some(&i) = self.stock_index.get(stock.as_str()) {
                out[i] += signed_rate;
            }
        })
    }
}

/// Scratch vectors reused across steps of one run.
struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Scratch {
        Scratch {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            stage: vec![0.0; n],
        }
    }
}

fn euler_core(
    ctx: &StepCtx,
    env: &mut Env,
    state: &mut [f64],
    t: f64,
    h: f64,
    scratch: &mut Scratch,
) -> Result<(), SeriesEvalError> {
    ctx.bind_state(env, state, t);
    ctx.derivatives(env, &mut scratch.k1)?;
    for (x, k) in state.iter_mut().zip(&scratch.k1) {
        *x += h * k;
    }
    Ok(())
}

fn rk4_core(
    ctx: &StepCtx,
    env: &mut Env,
    state: &mut [f64],
    t: f64,
    h: f64,
    scratch: &mut Scratch,
) -> Result<(), SeriesEvalError> {
    let half = h / 2.0;

    ctx.bind_state(env, state, t);
    ctx.derivatives(env, &mut scratch.k1)?;

    for i in 0..state.len() {
        scratch.stage[i] = state[i] + half * scratch.k1[i];
    }
    ctx.bind_state(env, &scratch.stage, t + half);
    ctx.derivatives(env, &mut scratch.k2)?;

    for i in 0..state.len() {
        scratch.stage[i] = state[i] + half * scratch.k2[i];
    }
    ctx.bind_state(env, &scratch.stage, t + half);
    ctx.derivatives(env, &mut scratch.k3)?;

    for i in 0..state.len() {
        scratch.stage[i] = state[i] + h * scratch.k3[i];
    }
    ctx.bind_state(env, &scratch.stage, t + h);
    ctx.derivatives(env, &mut scratch.k4)?;

    for i in 0..state.len() {
        let weighted = ((scratch.k1[i] + scratch.k4[i]) + 2.0 * (scratch.k2[i] + scratch.k3[i])) / 6.0;
        state[i] += h * weighted;
    }
    Ok(())
}

fn env_with_parameters(model: &Model, overrides: &IndexMap<Ident, f64>, t: f64) -> Env {
    let mut env = Env::new(t);
    for (name, value) in model.parameters() {
        let effective = overrides.get(name).copied().unwrap_or(value);
        env.bind(name.clone(), effective);
    }
    env
}

/// One forward Euler step: `state + h * f(t, state)`.
pub fn euler_step(
    model: &Model,
    state: &IndexMap<Ident, f64>,
    t: f64,
    h: f64,
) -> Result<IndexMap<Ident, f64>, SeriesEvalError> {
    step_map(model, state, t, h, IntegratorKind::Euler)
}

/// One classical 4-stage Runge-Kutta step. Lookups and `time` are evaluated
/// at the stage times, so time-varying inputs are sampled mid-step.
pub fn rk4_step(
    model: &Model,
    state: &IndexMap<Ident, f64>,
    t: f64,
    h: f64,
) -> Result<IndexMap<Ident, f64>, SeriesEvalError> {
    step_map(model, state, t, h, IntegratorKind::Rk4)
}

fn step_map(
    model: &Model,
    state: &IndexMap<Ident, f64>,
    t: f64,
    h: f64,
    kind: IntegratorKind,
) -> Result<IndexMap<Ident, f64>, SeriesEvalError> {
    let ctx = StepCtx::new(model);
    let mut env = env_with_parameters(model, &IndexMap::new(), t);
    let mut values: Vec<f64> = ctx
        .stock_names
        .iter()
        .map(|name| state.get(name.as_str()).copied().unwrap_or(0.0))
        .collect();
    let mut scratch = Scratch::new(values.len());
    match kind {
        IntegratorKind::Euler => euler_core(&ctx, &mut env, &mut values, t, h, &mut scratch)?,
        IntegratorKind::Rk4 => rk4_core(&ctx, &mut env, &mut values, t, h, &mut scratch)?,
    }
    Ok(ctx
        .stock_names
        .iter()
        .zip(values)
        .map(|(name, v)| ((*name).clone(), v))
        .collect())
}

/// Integrates the model from start to end on a uniform grid (the last step is
/// truncated to land exactly on end) and records every stock and output at
/// every grid point, including the initial state.
pub fn run(model: &Model, config: &RunConfig) -> Result<SimulationResult, RunError> {
    let spec = model.time_spec;
    if !spec.is_valid() {
        return Err(RunError::InvalidTimeSpec);
    }
    for name in config.parameter_overrides.keys() {
        if model.parameter(name).is_none() {
            return Err(RunError::UnknownParameter(name.clone()));
        }
    }
    let h = config.step_override.unwrap_or(spec.step);
    if !h.is_finite() || h <= 0.0 || h > spec.end - spec.start {
        return Err(RunError::InvalidStep(h));
    }
    if let Some((name, path)) = model.unresolved_lookups().first() {
        return Err(RunError::UnresolvedLookup {
            name: (*name).clone(),
            path: path.to_string(),
        });
    }

    let span = spec.end - spec.start;
    let n_steps = (span / h).ceil() as usize;
    let mut times: Vec<f64> = (0..n_steps)
        .map(|i| spec.start + i as f64 * h)
        .take_while(|&t| t < spec.end)
        .collect();
    times.push(spec.end);
    let n_points = times.len();

    let ctx = StepCtx::new(model);
    let mut env = env_with_parameters(model, &config.parameter_overrides, spec.start);
    let mut state: Vec<f64> = model.stocks().map(|s| s.initial_value).collect();
    let mut scratch = Scratch::new(state.len());

    // Recorded series: stocks and outputs in declaration order.
    enum Series<'m> {
        Stock(usize),
        Output(&'m Ident, &'m Expr),
    }
    let recorded: Vec<Series> = model
        .items()
        .iter()
        .filter_map(|item| match item {
            Item::Stock(stock) => Some(Series::Stock(ctx.stock_index[stock.name.as_str()])),
            Item::Output { name, expr } => Some(Series::Output(name, expr)),
            _ => None,
        })
        .collect();
    let mut series: IndexMap<Ident, Vec<f64>> = model
        .items()
        .iter()
        .filter_map(|item| match item {
            Item::Stock(stock) => Some(stock.name.clone()),
            Item::Output { name, .. } => Some(name.clone()),
            _ => None,
        })
        .map(|name| (name, Vec::with_capacity(n_points)))
        .collect();

    let mut record = |env: &mut Env, state: &[f64], t: f64| -> Result<(), RunError> {
        ctx.bind_state(env, state, t);
        for (slot, what) in series.values_mut().zip(&recorded) {
            let value = match what {
                Series::Stock(i) => state[*i],
                Series::Output(name, expr) => eval_expression(expr, env, &ctx.lookups).map_err(
                    |source| RunError::Evaluation {
                        time: t,
                        source: SeriesEvalError {
                            name: (*name).clone(),
                            source,
                        },
                    },
                )?,
            };
            slot.push(value);
        }
        Ok(())
    };

    record(&mut env, &state, spec.start)?;
    for i in 0..n_points - 1 {
        let t = times[i];
        let t_next = times[i + 1];
        let h_i = t_next - t;
        let stepped = match config.integrator {
            IntegratorKind::Euler => euler_core(&ctx, &mut env, &mut state, t, h_i, &mut scratch),
            IntegratorKind::Rk4 => rk4_core(&ctx, &mut env, &mut state, t, h_i, &mut scratch),
        };
        stepped.map_err(|source| RunError::Evaluation { time: t, source })?;
        for (idx, value) in state.iter().enumerate() {
            if !value.is_finite() {
                return Err(RunError::NonFiniteState {
                    time: t_next,
                    stock: ctx.stock_names[idx].clone(),
                });
            }
        }
        record(&mut env, &state, t_next)?;
    }

    Ok(SimulationResult {
        times,
        series,
        lookups_clamped: env.lookups_clamped(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{BinOp, EvalError};
    use crate::lookup::LookupTable;
    use crate::model::{Flow, LookupSource, TimeSpec};

    /// dx/dt = -k * x with x(0) = x0 on [0, end].
    fn decay_model(k: f64, x0: f64, end: f64, step: f64) -> Model {
        let mut model = Model::new("decay", TimeSpec::new(0.0, end, step));
        model.add_parameter("k", k);
        model.add_stock("x", x0);
        model.add_flow(Flow {
            name: "loss".into(),
            source: Some("x".into()),
            sink: None,
            rate: Expr::binary(BinOp::Mul, Expr::reference("k"), Expr::reference("x")),
        });
        model
    }

    fn state_of(pairs: &[(&str, f64)]) -> IndexMap<Ident, f64> {
        pairs.iter().map(|(n, v)| (n.to_string(), *v)).collect()
    }

    #[test]
    fn no_flows_means_constant_stock() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 10.0, 1.0));
        model.add_stock("S", 7.0);
        let result = run(&model, &RunConfig::default()).unwrap();
        assert_eq!(result.times.len(), 11);
        assert!(result.get("S").unwrap().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn single_euler_step_of_decay() {
        let model = decay_model(0.1, 1.0, 1.0, 1.0);
        let config = RunConfig {
            integrator: IntegratorKind::Euler,
            ..RunConfig::default()
        };
        let result = run(&model, &config).unwrap();
        assert_eq!(result.get("x").unwrap(), &[1.0, 0.9]);
    }

    #[test]
    fn euler_step_hand_arithmetic() {
        // dx/dt = -0.05 x, x = 100, h = 0.5 -> 100 - 0.05*100*0.5 = 97.5
        let model = decay_model(0.05, 100.0, 10.0, 0.5);
        let next = euler_step(&model, &state_of(&[("x", 100.0)]), 0.0, 0.5).unwrap();
        assert_eq!(next["x"], 97.5);
    }

    #[test]
    fn rk4_step_matches_hand_evaluated_tableau() {
        // dx/dt = -x, x = 1, h = 0.1. Stages: k1=-1, k2=-0.95, k3=-0.9525,
        // k4=-0.90475; x' = 1 - (0.1/6)*5.70975 = 0.9048375.
        let model = decay_model(1.0, 1.0, 1.0, 0.1);
        let next = rk4_step(&model, &state_of(&[("x", 1.0)]), 0.0, 0.1).unwrap();
        assert!((next["x"] - 0.9048375).abs() < 1e-8);
        // Cross-check against the analytic solution e^{-0.1}.
        assert!((next["x"] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 1.0, 0.5));
        model.add_stock("S", 3.25);
        let state = state_of(&[("S", 3.25)]);
        assert_eq!(euler_step(&model, &state, 0.0, 0.5).unwrap()["S"], 3.25);
        assert_eq!(rk4_step(&model, &state, 0.0, 0.5).unwrap()["S"], 3.25);
    }

    #[test]
    fn constant_field_advances_exactly() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 10.0, 1.0));
        model.add_stock("S", 7.0);
        model.add_flow(Flow {
            name: "feed".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::Literal(3.0),
        });
        let state = state_of(&[("S", 7.0)]);
        // All four stages see the same derivative, so both schemes land on
        // x + h*c.
        assert_eq!(euler_step(&model, &state, 0.0, 0.25).unwrap()["S"], 7.75);
        assert_eq!(rk4_step(&model, &state, 0.0, 0.25).unwrap()["S"], 7.75);
    }

    #[test]
    fn grid_integrity() {
        for (end, step) in [(1.0, 0.3), (1.0, 0.1), (60.0, 0.05), (10.0, 1.0)] {
            let model = decay_model(0.0, 1.0, end, step);
            let result = run(&model, &RunConfig::default()).unwrap();
            let expected = (end / step).ceil() as usize + 1;
            assert_eq!(result.times.len(), expected, "end={} step={}", end, step);
            assert_eq!(*result.times.last().unwrap(), end);
            for w in result.times.windows(2) {
                assert!(w[1] > w[0]);
                assert!(w[1] - w[0] <= step + 1e-12);
            }
            // All interior intervals equal the step; only the last may be
            // shorter.
            for w in result.times[..result.times.len() - 1].windows(2) {
                assert!((w[1] - w[0] - step).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_final_step_lands_on_end() {
        let model = decay_model(0.0, 1.0, 1.0, 0.3);
        let result = run(&model, &RunConfig::default()).unwrap();
        assert_eq!(result.times.len(), 5);
        assert!((result.times[3] - 0.9).abs() < 1e-12);
        assert_eq!(result.times[4], 1.0);
    }

    #[test]
    fn outputs_recorded_from_post_step_state_including_initial() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 3.0, 1.0));
        model.add_stock("S", 0.0);
        model.add_flow(Flow {
            name: "feed".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::Literal(1.0),
        });
        model.add_output(
            "double",
            Expr::binary(BinOp::Mul, Expr::Literal(2.0), Expr::reference("S")),
        );
        let config = RunConfig {
            integrator: IntegratorKind::Euler,
            ..RunConfig::default()
        };
        let result = run(&model, &config).unwrap();
        assert_eq!(result.get("S").unwrap(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(result.get("double").unwrap(), &[0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_finite_state_aborts_with_time_and_stock() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 10.0, 1.0));
        model.add_stock("S", 1e308);
        model.add_flow(Flow {
            name: "feed".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::Literal(1e308),
        });
        let config = RunConfig {
            integrator: IntegratorKind::Euler,
            ..RunConfig::default()
        };
        match run(&model, &config) {
            Err(RunError::NonFiniteState { time, stock }) => {
                assert_eq!(time, 1.0);
                assert_eq!(stock, "S");
            }
            other => panic!("expected NonFiniteState, got {:?}", other),
        }
    }

    #[test]
    fn evaluation_error_carries_time_and_name() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 2.0, 1.0));
        model.add_parameter("y", 0.0);
        model.add_stock("S", 1.0);
        model.add_flow(Flow {
            name: "bad".into(),
            source: Some("S".into()),
            sink: None,
            rate: Expr::binary(BinOp::Div, Expr::reference("S"), Expr::reference("y")),
        });
        match run(&model, &RunConfig::default()) {
            Err(RunError::Evaluation { time, source }) => {
                assert_eq!(time, 0.0);
                assert_eq!(source.name, "bad");
                assert_eq!(source.source, EvalError::DivisionByZero);
            }
            other => panic!("expected Evaluation, got {:?}", other),
        }

        // Same contract for outputs.
        let mut model = Model::new("m", TimeSpec::new(0.0, 2.0, 1.0));
        model.add_stock("S", 0.0);
        model.add_output(
            "inv",
            Expr::binary(BinOp::Div, Expr::Literal(1.0), Expr::reference("S")),
        );
        match run(&model, &RunConfig::default()) {
            Err(RunError::Evaluation { source, .. }) => assert_eq!(source.name, "inv"),
            other => panic!("expected Evaluation, got {:?}", other),
        }
    }

    #[test]
    fn override_validation_and_effect() {
        let model = decay_model(0.1, 1.0, 1.0, 1.0);
        let config = RunConfig {
            integrator: IntegratorKind::Euler,
            ..RunConfig::default()
        }
        .with_override("k", 0.5);
        let result = run(&model, &config).unwrap();
        assert_eq!(result.get("x").unwrap(), &[1.0, 0.5]);

        let bad = RunConfig::default().with_override("nope", 1.0);
        assert_eq!(
            run(&model, &bad),
            Err(RunError::UnknownParameter("nope".into()))
        );
    }

    #[test]
    fn step_override_validation() {
        let model = decay_model(0.1, 1.0, 1.0, 0.1);
        for h in [0.0, -1.0, 2.0, f64::NAN] {
            let config = RunConfig {
                step_override: Some(h),
                ..RunConfig::default()
            };
            assert!(matches!(run(&model, &config), Err(RunError::InvalidStep(_))));
        }
        let config = RunConfig {
            step_override: Some(0.5),
            ..RunConfig::default()
        };
        assert_eq!(run(&model, &config).unwrap().times.len(), 3);
    }

    #[test]
    fn unresolved_lookup_is_rejected() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 1.0, 0.5));
        model.add_lookup(
            "L",
            LookupSource::File {
                path: "data/l.csv".into(),
            },
        );
        model.add_stock("S", 0.0);
        model.add_flow(Flow {
            name: "feed".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::lookup("L", Expr::Time),
        });
        assert!(matches!(
            run(&model, &RunConfig::default()),
            Err(RunError::UnresolvedLookup { .. })
        ));
        model.resolve_lookup("L", LookupTable::new(vec![(0.0, 1.0)]).unwrap());
        assert!(run(&model, &RunConfig::default()).is_ok());
    }

    #[test]
    fn runs_are_bit_identical() {
        let model = decay_model(0.37, 12.5, 5.0, 0.05);
        let first = run(&model, &RunConfig::default()).unwrap();
        for _ in 0..3 {
            assert_eq!(run(&model, &RunConfig::default()).unwrap(), first);
        }
    }

    #[test]
    fn clamp_flag_is_set_when_lookups_extrapolate() {
        let mut model = Model::new("m", TimeSpec::new(0.0, 10.0, 1.0));
        model.add_lookup(
            "L",
            LookupSource::Inline(LookupTable::new(vec![(0.0, 1.0), (5.0, 2.0)]).unwrap()),
        );
        model.add_stock("S", 0.0);
        model.add_flow(Flow {
            name: "feed".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::lookup("L", Expr::Time),
        });
        let result = run(&model, &RunConfig::default()).unwrap();
        assert!(result.lookups_clamped);

        let mut short = Model::new("m", TimeSpec::new(0.0, 4.0, 1.0));
        short.add_lookup(
            "L",
            LookupSource::Inline(LookupTable::new(vec![(0.0, 1.0), (5.0, 2.0)]).unwrap()),
        );
        short.add_stock("S", 0.0);
        short.add_flow(Flow {
            name: "feed".into(),
            source: None,
            sink: Some("S".into()),
            rate: Expr::lookup("L", Expr::Time),
        });
        let result = run(&short, &RunConfig::default()).unwrap();
        assert!(!result.lookups_clamped);
    }
}
