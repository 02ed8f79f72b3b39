//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            samples: 50,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub group: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink; resampled.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// One evaluation of the function under test.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation {
    pub loss: f64,
    /// Piecewise-linear region identifier (see `Tape::relu_signature`).
    pub signature: u64,
}

/// Compares `analytic[g][i]` against central differences of `eval` at
/// uniformly sampled coordinates of `params`. Coordinates where either
/// perturbation changes the ReLU sign pattern are treated as kinks and
/// resampled (up to ten times the requested sample count overall).
///
/// `params` is restored to its original values on return.
pub fn finite_diff_gradcheck<F>(
    params: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    cfg: &GradcheckConfig,
    mut eval: F,
) -> GradcheckReport
where
    F: FnMut(&[Vec<f64>]) -> Evaluation,
{
    let sizes: Vec<usize> = params.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradcheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        coordinates: Vec::new(),
    };
    if total == 0 {
        return report;
    }
    let base = eval(params).signature;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_attempts = cfg.samples * 10;
    let mut attempts = 0;
    while report.checked < cfg.samples && attempts < max_attempts {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut group = 0;
        while flat >= sizes[group] {
            flat -= sizes[group];
            group += 1;
        }
        let index = flat;
        let original = params[group][index];
        params[group][index] = original + cfg.step;
        let plus = eval(params);
        params[group][index] = original - cfg.step;
        let minus = eval(params);
        params[group][index] = original;
        if plus.signature != base || minus.signature != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
        let a = analytic[group][index];
        let rel_error = relative_error(a, numeric);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.checked += 1;
        report.coordinates.push(CoordinateCheck {
            group,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let weights = [vec![0.5, -1.25, 2.0], vec![3.0]];
        let mut params = vec![vec![0.1, 0.2, 0.3], vec![-0.7]];
        let cfg = GradcheckConfig {
            samples: 20,
            ..Default::default()
        };
        let report = finite_diff_gradcheck(&mut params, &weights, &cfg, |p| Evaluation {
            loss: p
                .iter()
                .zip(&weights)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, w)| x * w))
                .sum(),
            signature: 0,
        });
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(params, vec![vec![0.1, 0.2, 0.3], vec![-0.7]]);
    }

    #[test]
    fn kink_coordinates_are_skipped() {
        // relu(x) at x = 0 exactly: both perturbations leave the base piece.
        let mut params = vec![vec![0.0, 1.0]];
        let analytic = vec![vec![0.0, 1.0]];
        let sig = |p: &[Vec<f64>]| p[0].iter().map(|v| (*v > 0.0) as u64).fold(0, |acc, b| acc * 2 + b);
        let report = finite_diff_gradcheck(
            &mut params,
            &analytic,
            &GradcheckConfig {
                samples: 10,
                ..Default::default()
            },
            |p| Evaluation {
                loss: p[0].iter().map(|v| v.max(0.0)).sum(),
                signature: sig(p),
            },
        );
        assert!(report.skipped_kinks > 0);
        assert!(report.coordinates.iter().all(|c| c.index == 1));
        assert!(report.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
