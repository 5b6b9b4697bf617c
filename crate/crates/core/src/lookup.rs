//! Time-indexed empirical series evaluated by piecewise-linear interpolation.

use std::fmt;

/// An empirical series of `(time, value)` points, strictly increasing in time.
///
/// Inside the data range the table interpolates linearly between bracketing
/// points; outside it holds the nearest endpoint value.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupTableError {
    Empty,
    NonMonotonicTime { index: usize },
    NonFinite { index: usize },
}

impl fmt::Display for LookupTableError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LookupTableError::Empty => write!(f, "lookup table needs at least one point"),
            LookupTableError::NonMonotonicTime { index } => {
                write!(f, "lookup point {} does not increase in time", index)
            }
            LookupTableError::NonFinite { index } => {
                write!(f, "lookup point {} is not finite", index)
            }
        }
    }
}

impl std::error::Error for LookupTableError {}

impl LookupTable {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, LookupTableError> {
        if points.is_empty() {
            return Err(LookupTableError::Empty);
        }
        for (i, &(t, v)) in points.iter().enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(LookupTableError::NonFinite { index: i });
            }
            if i > 0 && t <= points[i - 1].0 {
                return Err(LookupTableError::NonMonotonicTime { index: i });
            }
        }
        Ok(LookupTable { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Inclusive time range covered by the data.
    pub fn time_range(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    /// True when `t` falls outside the data range and `interpolate` would
    /// clamp to an endpoint value.
    pub fn clamps_at(&self, t: f64) -> bool {
        let (first, last) = self.time_range();
        !(t >= first && t <= last)
    }

    /// Piecewise-linear interpolation, constant outside the data range.
    pub fn interpolate(&self, t: f64) -> f64 {
        let first = self.points[0];
        let last = self.points[self.points.len() - 1];
        if !(t > first.0) {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        // First point with time > t; the bracket is [idx-1, idx].
        let idx = self.points.partition_point(|p| p.0 <= t);
        let (t0, v0) = self.points[idx - 1];
        let (t1, v1) = self.points[idx];
        v0 + (t - t0) / (t1 - t0) * (v1 - v0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_of_linear_segment() {
        let table = LookupTable::new(vec![(0.0, 10.0), (10.0, 20.0)]).unwrap();
        assert_eq!(table.interpolate(5.0), 15.0);
    }

    #[test]
    fn clamps_outside_range() {
        let table = LookupTable::new(vec![(1.0, 4.0), (55.0, 8.0)]).unwrap();
        assert_eq!(table.interpolate(60.0), 8.0);
        assert_eq!(table.interpolate(0.0), 4.0);
        assert!(table.clamps_at(60.0));
        assert!(table.clamps_at(0.0));
        assert!(!table.clamps_at(30.0));
    }

    #[test]
    fn single_point_is_constant() {
        let table = LookupTable::new(vec![(3.0, 7.5)]).unwrap();
        assert_eq!(table.interpolate(-100.0), 7.5);
        assert_eq!(table.interpolate(3.0), 7.5);
        assert_eq!(table.interpolate(100.0), 7.5);
    }

    #[test]
    fn exact_knots_are_hit() {
        let table = LookupTable::new(vec![(0.0, 1.0), (2.0, 5.0), (4.0, 2.0)]).unwrap();
        assert_eq!(table.interpolate(0.0), 1.0);
        assert_eq!(table.interpolate(2.0), 5.0);
        assert_eq!(table.interpolate(4.0), 2.0);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(LookupTable::new(vec![]), Err(LookupTableError::Empty));
        assert_eq!(
            LookupTable::new(vec![(0.0, 1.0), (0.0, 2.0)]),
            Err(LookupTableError::NonMonotonicTime { index: 1 })
        );
        assert_eq!(
            LookupTable::new(vec![(1.0, 1.0), (0.5, 2.0)]),
            Err(LookupTableError::NonMonotonicTime { index: 1 })
        );
        assert_eq!(
            LookupTable::new(vec![(0.0, f64::NAN)]),
            Err(LookupTableError::NonFinite { index: 0 })
        );
        assert_eq!(
            LookupTable::new(vec![(f64::INFINITY, 1.0)]),
            Err(LookupTableError::NonFinite { index: 0 })
        );
    }

    fn table_strategy() -> impl Strategy<Value = LookupTable> {
        proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..12).prop_map(|mut pts| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            pts.dedup_by(|a, b| a.0 == b.0);
            LookupTable::new(pts).unwrap()
        })
    }

    proptest! {
        #[test]
        fn continuous_at_knots_constant_outside(table in table_strategy(), t in -2e6f64..2e6) {
            let (first, last) = table.time_range();
            let value = table.interpolate(t);
            prop_assert!(value.is_finite());
            if t <= first {
                prop_assert_eq!(value, table.points()[0].1);
            }
            if t >= last {
                prop_assert_eq!(value, table.points()[table.points().len() - 1].1);
            }
            for &(kt, kv) in table.points() {
                prop_assert_eq!(table.interpolate(kt), kv);
            }
        }

        #[test]
        fn linear_inside_segments(table in table_strategy()) {
            for w in table.points().windows(2) {
                let ((t0, v0), (t1, v1)) = (w[0], w[1]);
                let mid = t0 + (t1 - t0) / 2.0;
                let expected = v0 + (mid - t0) / (t1 - t0) * (v1 - v0);
                let err = (table.interpolate(mid) - expected).abs();
                prop_assert!(err <= 1e-9 * (1.0 + expected.abs()));
            }
        }
    }
}
