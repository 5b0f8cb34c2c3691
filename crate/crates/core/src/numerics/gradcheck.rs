//! Finite-difference gradient verification.
//!
//! The checker compares analytic gradients from `backward` against central
//! differences `(f(x+h) - f(x-h)) / 2h` computed by re-running the forward
//! function with perturbed parameters. It is deliberately independent of the
//! backward implementation: it only reads parameter storage, nudges it, and
//! evaluates the loss. Checks run in `f64`.

use rand::Rng;

use super::{rng, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Both gradients below this magnitude count as agreeing (avoids 0/0).
    pub abs_floor: f64,
    /// If set, check at most this many randomly chosen indices per parameter.
    pub max_indices_per_param: Option<usize>,
    /// Seed for index sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_indices_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    /// Number of (parameter, index) pairs compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Entries exceeding tolerance: (param, index, analytic, numeric, rel err).
    pub failures: Vec<(String, usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Verifies `backward` gradients of `loss_fn` with respect to `params`.
///
/// `loss_fn` must rebuild the computation from current parameter storage each
/// call and return a scalar. Parameters must be tracked leaf variables.
pub fn finite_diff_check<F>(
    params: &[(String, Tensor<f64>)],
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (name, p) in params {
        if !p.is_leaf_var() {
            return Err(Error::contract(format!(
                "gradient check parameter '{name}' must be a tracked leaf variable"
            )));
        }
        p.zero_grad();
    }

    let loss = loss_fn()?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::numerical(format!(
            "gradient check loss is not finite: {loss_value}"
        )));
    }
    loss.backward()?;

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        failures: Vec::new(),
    };

    for (pi, (name, p)) in params.iter().enumerate() {
        let n = p.numel();
        let indices: Vec<usize> = match cfg.max_indices_per_param {
            Some(k) if k < n => {
                let mut r = rng::stream_keyed(cfg.seed, "gradcheck-indices", &[pi as u64]);
                let mut pool: Vec<usize> = (0..n).collect();
                for i in 0..k {
                    let j = i + r.gen_range(0..n - i);
                    pool.swap(i, j);
                }
                pool.truncate(k);
                pool
            }
            _ => (0..n).collect(),
        };

        for idx in indices {
            let original = p.data()[idx];
            let eval_at = |v: f64| -> Result<f64> {
                p.update_data(|d| d[idx] = v);
                let out = super::without_graph(&loss_fn)?;
                out.item()
            };
            let f_plus = eval_at(original + cfg.step)?;
            let f_minus = eval_at(original - cfg.step)?;
            p.update_data(|d| d[idx] = original);

            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            let a = analytic[pi][idx];
            let err = rel_err(a, numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
            if err > cfg.tolerance {
                report.failures.push((name.clone(), idx, a, numeric, err));
            }
        }
    }
    Ok(report)
}
