//! Bundled case study: naive T-cell population dynamics over a lifetime.
//!
//! Two stocks are simulated — naive cells from peripheral proliferation and
//! memory cells — driven by two empirical inputs (thymic naive cells and
//! active cells vs age) that enter as lookup tables. The reported output
//! `TotalNaive` is the thymic naive pool plus the peripherally proliferated
//! pool.
//!
//! The original measurements behind the inputs are not redistributable, so
//! the crate ships a deterministic synthetic stand-in with a documented
//! functional form: a thymic-output plateau of 100 up to age 20 followed by
//! exponential involution at rate 0.05/year, and a constant active pool of
//! 10. Every dataset-dependent check in the test suite is qualitative for
//! exactly this reason. Both stocks start at 0 (the source data does not pin
//! initial values).

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use crate::expr::{BinOp, Expr};
use crate::lookup::LookupTable;
use crate::model::{Flow, LookupSource, Model, SimulationResult, TimeSpec};
use crate::series_csv;

pub const NAIVE_PROLIFERATION: &str = "NaiveProliferation";
pub const MEMORY: &str = "Memory";
pub const TOTAL_NAIVE: &str = "TotalNaive";
pub const REAL_NAIVES: &str = "RealNaives";
pub const REAL_ACTIVES: &str = "RealActives";

/// Flow rate constants of the T-cell model, per year. All rates are
/// non-negative in any physically meaningful configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TCellParameters {
    /// Thymic export into the peripherally proliferated pool, scaling the
    /// measured thymic naive pool.
    pub naive_thymus_proliferation_rate: f64,
    /// Self-proliferation of the peripherally proliferated pool.
    pub naive_proliferation_rate: f64,
    /// Death rate of the peripherally proliferated pool.
    pub naive_proliferation_death_rate: f64,
    /// Memory cells reverting to the naive-proliferation phenotype
    /// (a conserved transfer out of the memory stock).
    pub memory_to_np_rate: f64,
    /// Death rate of memory cells.
    pub memory_death_rate: f64,
    /// Active cells converting into memory cells, scaling the measured
    /// active pool.
    pub reversion_to_memory_rate: f64,
}

impl Default for TCellParameters {
    /// The reference parameterization used for the bundled sixty-year run.
    fn default() -> Self {
        TCellParameters {
            naive_thymus_proliferation_rate: 0.025,
            naive_proliferation_rate: 0.0,
            naive_proliferation_death_rate: 0.017,
            memory_to_np_rate: 0.001,
            memory_death_rate: 0.05,
            reversion_to_memory_rate: 0.0,
        }
    }
}

fn real_naives_at(age: f64) -> f64 {
    if age <= 20.0 {
        100.0
    } else {
        100.0 * (-0.05 * (age - 20.0)).exp()
    }
}

/// Synthetic thymic naive cell counts at integer ages 1..=55.
pub fn standin_real_naives() -> LookupTable {
    let points: Vec<(f64, f64)> = (1..=55)
        .map(|age| (age as f64, real_naives_at(age as f64)))
        .collect();
    LookupTable::new(points).expect("stand-in series is well-formed")
}

/// Synthetic active cell counts at integer ages 1..=55 (constant 10).
pub fn standin_real_actives() -> LookupTable {
    let points: Vec<(f64, f64)> = (1..=55).map(|age| (age as f64, 10.0)).collect();
    LookupTable::new(points).expect("stand-in series is well-formed")
}

pub fn render_standin_real_naives_csv() -> String {
    series_csv::render_series(
        standin_real_naives().points(),
        &[
            "SYNTHETIC STAND-IN: generated data, not measurements.",
            "Thymic naive cells vs age: 100 for age <= 20, then 100*exp(-0.05*(age-20)).",
        ],
    )
}

pub fn render_standin_real_actives_csv() -> String {
    series_csv::render_series(
        standin_real_actives().points(),
        &[
            "SYNTHETIC STAND-IN: generated data, not measurements.",
            "Active cells vs age: constant 10.",
        ],
    )
}

/// Writes the stand-in dataset as `real_naives_synthetic.csv` and
/// `real_actives_synthetic.csv` under `dir` and returns the two paths.
pub fn write_standin_dataset(dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
    let naives = dir.join("real_naives_synthetic.csv");
    let actives = dir.join("real_actives_synthetic.csv");
    std::fs::write(&naives, render_standin_real_naives_csv())?;
    std::fs::write(&actives, render_standin_real_actives_csv())?;
    Ok((naives, actives))
}

fn scaled(param: &str, of: Expr) -> Expr {
    Expr::binary(BinOp::Mul, Expr::reference(param), of)
}

/// Builds the T-cell model with the stand-in dataset embedded inline, so the
/// returned model is immediately runnable. Time runs 0..60 years at step
/// 0.05.
pub fn build_tcell_model(params: TCellParameters) -> Model {
    let mut model = Model::new("tcell", TimeSpec::new(0.0, 60.0, 0.05));
    model.add_parameter(
        "NaiveThymusProliferationRate",
        params.naive_thymus_proliferation_rate,
    );
    model.add_parameter("NaiveProliferationRate", params.naive_proliferation_rate);
    model.add_parameter(
        "NaiveProliferationDeathRate",
        params.naive_proliferation_death_rate,
    );
    model.add_parameter("MemoryToNPRate", params.memory_to_np_rate);
    model.add_parameter("MemoryDeathRate", params.memory_death_rate);
    model.add_parameter("ReversionToMemoryRate", params.reversion_to_memory_rate);
    model.add_lookup(REAL_NAIVES, LookupSource::Inline(standin_real_naives()));
    model.add_lookup(REAL_ACTIVES, LookupSource::Inline(standin_real_actives()));
    model.add_stock(NAIVE_PROLIFERATION, 0.0);
    model.add_stock(MEMORY, 0.0);
    model.add_flow(Flow {
        name: "thymus_input".into(),
        source: None,
        sink: Some(NAIVE_PROLIFERATION.into()),
        rate: scaled(
            "NaiveThymusProliferationRate",
            Expr::lookup(REAL_NAIVES, Expr::Time),
        ),
    });
    model.add_flow(Flow {
        name: "peripheral_proliferation".into(),
        source: None,
        sink: Some(NAIVE_PROLIFERATION.into()),
        rate: scaled("NaiveProliferationRate", Expr::reference(NAIVE_PROLIFERATION)),
    });
    model.add_flow(Flow {
        name: "memory_reversion".into(),
        source: Some(MEMORY.into()),
        sink: Some(NAIVE_PROLIFERATION.into()),
        rate: scaled("MemoryToNPRate", Expr::reference(MEMORY)),
    });
    model.add_flow(Flow {
        name: "np_death".into(),
        source: Some(NAIVE_PROLIFERATION.into()),
        sink: None,
        rate: scaled(
            "NaiveProliferationDeathRate",
            Expr::reference(NAIVE_PROLIFERATION),
        ),
    });
    model.add_flow(Flow {
        name: "active_to_memory".into(),
        source: None,
        sink: Some(MEMORY.into()),
        rate: scaled(
            "ReversionToMemoryRate",
            Expr::lookup(REAL_ACTIVES, Expr::Time),
        ),
    });
    model.add_flow(Flow {
        name: "memory_death".into(),
        source: Some(MEMORY.into()),
        sink: None,
        rate: scaled("MemoryDeathRate", Expr::reference(MEMORY)),
    });
    model.add_output(
        TOTAL_NAIVE,
        Expr::binary(
            BinOp::Add,
            Expr::lookup(REAL_NAIVES, Expr::Time),
            Expr::reference(NAIVE_PROLIFERATION),
        ),
    );
    model
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingSeries(pub String);

impl fmt::Display for MissingSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "result is missing series '{}'", self.0)
    }
}

impl std::error::Error for MissingSeries {}

/// True when the peripherally proliferated pool dominates the total naive
/// pool (ratio above one half) at every grid point from year 50 on.
pub fn check_np_prevalence(result: &SimulationResult) -> Result<bool, MissingSeries> {
    let np = result
        .get(NAIVE_PROLIFERATION)
        .ok_or_else(|| MissingSeries(NAIVE_PROLIFERATION.to_string()))?;
    let total = result
        .get(TOTAL_NAIVE)
        .ok_or_else(|| MissingSeries(TOTAL_NAIVE.to_string()))?;
    for (i, &t) in result.times.iter().enumerate() {
        if t >= 50.0 {
            let ratio = np[i] / total[i];
            if !(ratio > 0.5) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
