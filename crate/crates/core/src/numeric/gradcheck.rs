//! Central finite-difference oracle for backward passes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Step for `(L(p+h) − L(p−h)) / 2h`.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients near zero
    /// are judged on absolute error instead.
    pub abs_floor: f64,
    /// Coordinates sampled per parameter tensor; `None` checks every one.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-4,
            coords_per_param: Some(16),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Compares the gradients returned by `loss_fn` against central differences.
///
/// `loss_fn` maps a parameter store to `(loss, gradients)`; it must be
/// deterministic, which is verified by evaluating it twice up front.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    loss_fn: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (l0, grads) = loss_fn(params)?;
    let (l1, grads_again) = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() || grads != grads_again {
        return Err(Error::Oracle(format!(
            "loss function is not deterministic ({l0} vs {l1})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        tolerance: config.tolerance,
    };

    for id in ids {
        let n = params.get(id).len();
        let coords: Vec<usize> = match config.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get_or_zeros(id, params);
        for c in coords {
            let original = params.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = original + config.step;
            let (plus, _) = loss_fn(&work)?;
            work.get_mut(id).data_mut()[c] = original - config.step;
            let (minus, _) = loss_fn(&work)?;
            work.get_mut(id).data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let err = relative_error(analytic.data()[c], numeric, config.abs_floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}
