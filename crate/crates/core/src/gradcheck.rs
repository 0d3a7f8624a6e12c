//! Central finite-difference verification of analytic gradients.

/// Default perturbation for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    /// Combines two reports, keeping the worse one.
    pub fn worst(self, other: GradCheck) -> GradCheck {
        if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        }
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of the scalar function `f`
/// around `point`, one coordinate at a time.
pub fn finite_difference_check(
    point: &[f64],
    analytic: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut report = GradCheck::default();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradCheck {
                max_rel_error: err.max(report.max_rel_error),
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    report
}

pub mod suite;
pub use suite::{run_suite, tiny_model_config, SuiteRow, SUITE_OPS};
