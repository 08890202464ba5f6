//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the loss; it never looks at the tape, so it
//! stays an independent oracle for the analytic gradients. Each evaluation
//! also returns a branch fingerprint (ReLU signs, max-pool winners). A
//! coordinate whose ±eps probes land on a different branch than the base
//! point straddles a kink where the function has no derivative; such
//! coordinates are redrawn and counted, never scored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor (all of them when smaller).
    pub coords_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            coords_per_param: 12,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0
            && self.max_rel_error < tolerance
            && self.skipped_kinks * 10 <= self.checked
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` around `params`.
/// `loss` returns the loss value and a branch fingerprint.
pub fn check_gradients<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    mut loss: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> (f64, u64),
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, base_branch) = loss(params);
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let len = params.get(name).map(|t| t.len()).unwrap_or(0);
        let grad = analytic.get(name).expect("analytic gradient set matches params");
        let wanted = cfg.coords_per_param.min(len);
        let mut scored = 0;
        let mut attempts = 0;
        while scored < wanted && attempts < wanted * 4 {
            attempts += 1;
            let idx = if wanted == len { (attempts - 1) % len } else { rng.random_range(0..len) };
            let orig = params.get(name).unwrap().data()[idx];

            probe.get_mut(name).unwrap().data_mut()[idx] = orig + cfg.eps;
            let (up, b_up) = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - cfg.eps;
            let (down, b_down) = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig;

            if b_up != base_branch || b_down != base_branch {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            scored += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), idx, a, numeric));
                }
                report.max_rel_error = report.max_rel_error.max(err);
            }
        }
    }
    report
}
