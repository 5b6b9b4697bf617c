//! Least-squares parameter calibration against observed time series.
//!
//! The objective is a weighted sum of squared errors between the dense
//! simulation output (sampled by linear interpolation at each observation
//! time) and the observed values. Minimization is derivative-free
//! Nelder-Mead over the box-constrained parameter space; bounds are enforced
//! by coordinate-wise clamping of every proposed vertex, so objective values
//! stay interpretable as pure fit error.

use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{run, RunConfig};
use crate::model::{Ident, Model};

/// One parameter to fit: box bounds and a starting guess.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeParameter {
    pub name: Ident,
    pub lower: f64,
    pub upper: f64,
    pub initial_guess: f64,
}

impl FreeParameter {
    pub fn new(name: impl Into<Ident>, lower: f64, upper: f64, initial_guess: f64) -> Self {
        FreeParameter {
            name: name.into(),
            lower,
            upper,
            initial_guess,
        }
    }
}

/// An observed series for one model output or stock.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSeries {
    pub output_name: Ident,
    points: Vec<(f64, f64)>,
    pub weight: f64,
}

impl ObservedSeries {
    pub fn new(
        output_name: impl Into<Ident>,
        points: Vec<(f64, f64)>,
    ) -> Result<Self, CalibrationError> {
        if points.is_empty() {
            return Err(CalibrationError::InvalidProblem(
                "observed series needs at least one point".to_string(),
            ));
        }
        for window in points.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(CalibrationError::InvalidProblem(
                    "observation times must be strictly increasing".to_string(),
                ));
            }
        }
        for &(t, v) in &points {
            if !t.is_finite() || !v.is_finite() {
                return Err(CalibrationError::InvalidProblem(
                    "observations must be finite".to_string(),
                ));
            }
        }
        Ok(ObservedSeries {
            output_name: output_name.into(),
            points,
            weight: 1.0,
        })
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self, CalibrationError> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(CalibrationError::InvalidProblem(format!(
                "weight must be positive and finite, got {}",
                weight
            )));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// A calibration task: the model, what to fit, and what to fit it to.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    model: Model,
    free_parameters: Vec<FreeParameter>,
    observations: Vec<ObservedSeries>,
    run_config: RunConfig,
}

impl CalibrationProblem {
    pub fn new(
        model: Model,
        free_parameters: Vec<FreeParameter>,
        observations: Vec<ObservedSeries>,
        run_config: RunConfig,
    ) -> Result<Self, CalibrationError> {
        let invalid = |message: String| Err(CalibrationError::InvalidProblem(message));
        let mut seen: Vec<&str> = Vec::new();
        for fp in &free_parameters {
            if model.parameter(&fp.name).is_none() {
                return invalid(format!("free parameter '{}' is not a model parameter", fp.name));
            }
            if seen.contains(&fp.name.as_str()) {
                return invalid(format!("free parameter '{}' listed twice", fp.name));
            }
            seen.push(&fp.name);
            if !fp.lower.is_finite() || !fp.upper.is_finite() || fp.lower >= fp.upper {
                return invalid(format!(
                    "free parameter '{}' needs finite bounds with lower < upper",
                    fp.name
                ));
            }
            if !(fp.initial_guess >= fp.lower && fp.initial_guess <= fp.upper) {
                return invalid(format!(
                    "free parameter '{}' initial guess {} is outside [{}, {}]",
                    fp.name, fp.initial_guess, fp.lower, fp.upper
                ));
            }
        }
        let spec = model.time_spec;
        for obs in &observations {
            let known = model.stock(&obs.output_name).is_some()
                || model.outputs().any(|(n, _)| n == &obs.output_name);
            if !known {
                return invalid(format!(
                    "observed series '{}' is not a stock or output of the model",
                    obs.output_name
                ));
            }
            for &(t, _) in obs.points() {
                if t < spec.start || t > spec.end {
                    return invalid(format!(
                        "observation at t={} for '{}' is outside the model time range [{}, {}]",
                        t, obs.output_name, spec.start, spec.end
                    ));
                }
            }
        }
        Ok(CalibrationProblem {
            model,
            free_parameters,
            observations,
            run_config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn free_parameters(&self) -> &[FreeParameter] {
        &self.free_parameters
    }

    pub fn observations(&self) -> &[ObservedSeries] {
        &self.observations
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run_config
    }

    /// Run config with the candidate values substituted for the free
    /// parameters.
    pub fn config_for(&self, candidate: &[f64]) -> RunConfig {
        debug_assert_eq!(candidate.len(), self.free_parameters.len());
        let mut config = self.run_config.clone();
        for (fp, value) in self.free_parameters.iter().zip(candidate) {
            config.parameter_overrides.insert(fp.name.clone(), *value);
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationError {
    InvalidProblem(String),
    InvalidOptions(String),
    GridTooLarge { points: u128, limit: u64 },
}

impl fmt::Display for CalibrationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationError::InvalidProblem(msg) => write!(f, "invalid problem: {}", msg),
            CalibrationError::InvalidOptions(msg) => write!(f, "invalid options: {}", msg),
            CalibrationError::GridTooLarge { points, limit } => {
                write!(f, "grid of {} points exceeds the limit of {}", points, limit)
            }
        }
    }
}

impl std::error::Error for CalibrationError {}

/// Weighted sum of squared errors for one candidate parameter vector.
/// A run that fails (divergence, evaluation error) maps to `+inf`, which
/// Nelder-Mead never accepts as an improvement.
pub fn objective(problem: &CalibrationProblem, candidate: &[f64]) -> f64 {
    let config = problem.config_for(candidate);
    let result = match run(problem.model(), &config) {
        Ok(result) => result,
        Err(_) => return f64::INFINITY,
    };
    let mut total = 0.0;
    for obs in problem.observations() {
        for &(t, observed) in obs.points() {
            let simulated = match result.sample(&obs.output_name, t) {
                Ok(v) => v,
                Err(_) => return f64::INFINITY,
            };
            let residual = simulated - observed;
            total += obs.weight * residual * residual;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateOptions {
    pub max_evaluations: usize,
    /// Convergence threshold on the simplex objective spread
    /// (worst vertex minus best vertex).
    pub simplex_tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            max_evaluations: 1000,
            simplex_tolerance: 1e-10,
            restarts: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub best_parameters: IndexMap<Ident, f64>,
    pub objective_value: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// `(evaluation index, objective)` recorded at every improvement of the
    /// best value seen so far; non-increasing by construction.
    pub trace: Vec<(usize, f64)>,
}

/// Fits the free parameters by Nelder-Mead.
///
/// The initial simplex displaces each coordinate of the initial guess by 10%
/// of its bound range (flipped negative when that would leave the box).
/// Restarts re-seed the simplex around the best point so far with
/// deterministic pseudo-random jitter derived from `seed`.
pub fn calibrate(
    problem: &CalibrationProblem,
    options: &CalibrateOptions,
) -> Result<CalibrationResult, CalibrationError> {
    if options.max_evaluations == 0 {
        return Err(CalibrationError::InvalidOptions(
            "max_evaluations must be at least 1".to_string(),
        ));
    }
    if !(options.simplex_tolerance >= 0.0) {
        return Err(CalibrationError::InvalidOptions(
            "simplex_tolerance must be non-negative".to_string(),
        ));
    }

    let free = problem.free_parameters();
    let initial: Vec<f64> = free.iter().map(|fp| fp.initial_guess).collect();

    if free.is_empty() {
        let value = objective(problem, &initial);
        return Ok(CalibrationResult {
            best_parameters: IndexMap::new(),
            objective_value: value,
            evaluations: 1,
            converged: true,
            trace: vec![(1, value)],
        });
    }

    let bounds: Vec<(f64, f64)> = free.iter().map(|fp| (fp.lower, fp.upper)).collect();
    let mut eval = |x: &[f64]| objective(problem, x);
    let outcome = nelder_mead(
        &mut eval,
        &bounds,
        &initial,
        options.max_evaluations,
        options.simplex_tolerance,
        options.restarts,
        options.seed,
    );

    let best_parameters = free
        .iter()
        .zip(&outcome.best_x)
        .map(|(fp, value)| (fp.name.clone(), *value))
        .collect();
    Ok(CalibrationResult {
        best_parameters,
        objective_value: outcome.best_f,
        evaluations: outcome.evaluations,
        converged: outcome.converged,
        trace: outcome.trace,
    })
}

pub(crate) struct NmOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub trace: Vec<(usize, f64)>,
}

fn clamp_to(bounds: &[(f64, f64)], x: &mut [f64]) {
    for (value, (lo, hi)) in x.iter_mut().zip(bounds) {
        *value = value.clamp(*lo, *hi);
    }
}

/// Nelder-Mead with reflection 1, expansion 2, contraction 0.5, shrink 0.5.
/// Every proposed vertex is clamped into the bounds before evaluation.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    initial: &[f64],
    max_evaluations: usize,
    tolerance: f64,
    restarts: usize,
    seed: u64,
) -> NmOutcome {
    let n = initial.len();
    let mut evaluations = 0usize;
    let mut trace: Vec<(usize, f64)> = Vec::new();
    let mut best_x = initial.to_vec();
    clamp_to(bounds, &mut best_x);
    let mut best_f = f64::INFINITY;

    macro_rules! eval {
        ($x:expr) => {{
            let x: &[f64] = $x;
            evaluations += 1;
            let fx = f(x);
            if fx < best_f {
                best_f = fx;
                best_x = x.to_vec();
                trace.push((evaluations, fx));
            }
            fx
        }};
    }

    let mut converged = false;
    for round in 0..=restarts {
        if evaluations >= max_evaluations {
            break;
        }

        // Seed simplex: first round from the initial guess, later rounds from
        // the best point so far plus jitter.
        let mut vertices: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        if round == 0 {
            let mut v0 = initial.to_vec();
            clamp_to(bounds, &mut v0);
            for i in 0..=n {
                let mut v = v0.clone();
                if i > 0 {
                    let (lo, hi) = bounds[i - 1];
                    let displacement = 0.1 * (hi - lo);
                    let moved = (v[i - 1] + displacement).clamp(lo, hi);
                    v[i - 1] = if moved == v[i - 1] {
                        (v[i - 1] - displacement).clamp(lo, hi)
                    } else {
                        moved
                    };
                }
                vertices.push(v);
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(round as u64));
            vertices.push(best_x.clone());
            for _ in 0..n {
                let mut v = best_x.clone();
                for (value, (lo, hi)) in v.iter_mut().zip(bounds) {
                    let jitter: f64 = rng.random_range(-0.1..0.1) * (hi - lo);
                    *value = (*value + jitter).clamp(*lo, *hi);
                }
                vertices.push(v);
            }
        }

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        for v in vertices {
            if evaluations >= max_evaluations {
                break;
            }
            let fv = eval!(&v);
            simplex.push((v, fv));
        }
        if simplex.len() < n + 1 {
            break;
        }

        converged = false;
        while evaluations < max_evaluations {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[n].1 - simplex[0].1;
            if spread < tolerance {
                converged = true;
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(v, _)| v[j]).sum::<f64>() / n as f64)
                .collect();
            let worst = simplex[n].clone();

            let propose = |coef: f64| -> Vec<f64> {
                let mut v: Vec<f64> = centroid
                    .iter()
                    .zip(&worst.0)
                    .map(|(c, w)| c + coef * (c - w))
                    .collect();
                clamp_to(bounds, &mut v);
                v
            };

            let reflected = propose(1.0);
            let f_reflected = eval!(&reflected);

            if f_reflected < simplex[0].1 {
                if evaluations < max_evaluations {
                    let expanded = propose(2.0);
                    let f_expanded = eval!(&expanded);
                    simplex[n] = if f_expanded < f_reflected {
                        (expanded, f_expanded)
                    } else {
                        (reflected, f_reflected)
                    };
                } else {
                    simplex[n] = (reflected, f_reflected);
                }
            } else if f_reflected < simplex[n - 1].1 {
                simplex[n] = (reflected, f_reflected);
            } else {
                if evaluations >= max_evaluations {
                    break;
                }
                let contracted = if f_reflected < worst.1 {
                    propose(0.5)
                } else {
                    propose(-0.5)
                };
                let f_contracted = eval!(&contracted);
                if f_contracted < f_reflected.min(worst.1) {
                    simplex[n] = (contracted, f_contracted);
                } else {
                    // Shrink toward the best vertex.
                    let anchor = simplex[0].0.clone();
                    for vertex in simplex.iter_mut().skip(1) {
                        if evaluations >= max_evaluations {
                            break;
                        }
                        let mut v: Vec<f64> = anchor
                            .iter()
                            .zip(&vertex.0)
                            .map(|(a, x)| a + 0.5 * (x - a))
                            .collect();
                        clamp_to(bounds, &mut v);
                        let fv = eval!(&v);
                        *vertex = (v, fv);
                    }
                }
            }
        }
    }

    NmOutcome {
        best_x,
        best_f,
        evaluations,
        converged,
        trace,
    }
}

const GRID_LIMIT: u64 = 1_000_000;

/// Evaluates the objective on the full Cartesian grid over the bounds,
/// `resolutions[i]` points per parameter, and returns `(point, objective)`
/// pairs sorted ascending by objective. Useful for sensitivity screening and
/// for seeding Nelder-Mead.
pub fn grid_scan(
    problem: &CalibrationProblem,
    resolutions: &[usize],
) -> Result<Vec<(Vec<f64>, f64)>, CalibrationError> {
    let free = problem.free_parameters();
    if resolutions.len() != free.len() {
        return Err(CalibrationError::InvalidProblem(format!(
            "{} resolutions given for {} free parameters",
            resolutions.len(),
            free.len()
        )));
    }
    for &r in resolutions {
        if r < 2 {
            return Err(CalibrationError::InvalidProblem(
                "grid resolution must be at least 2 per parameter".to_string(),
            ));
        }
    }
    let total: u128 = resolutions.iter().map(|&r| r as u128).product();
    if total > GRID_LIMIT as u128 {
        return Err(CalibrationError::GridTooLarge {
            points: total,
            limit: GRID_LIMIT,
        });
    }

    let coordinate = |param: usize, index: usize| -> f64 {
        let (lo, hi) = (free[param].lower, free[param].upper);
        let r = resolutions[param];
        if index == r - 1 {
            hi
        } else {
            lo + (hi - lo) * index as f64 / (r - 1) as f64
        }
    };

    let mut results = Vec::with_capacity(total as usize);
    let mut indices = vec![0usize; free.len()];
    loop {
        let point: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(p, &i)| coordinate(p, i))
            .collect();
        let value = objective(problem, &point);
        results.push((point, value));

        // Odometer increment; empty index vector means a single evaluation.
        let mut carry = true;
        for p in (0..indices.len()).rev() {
            indices[p] += 1;
            if indices[p] < resolutions[p] {
                carry = false;
                break;
            }
            indices[p] = 0;
        }
        if carry {
            break;
        }
    }
    results.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(results)
}
