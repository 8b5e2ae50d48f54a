//! Central finite-difference gradient checking.
//!
//! The checker is independent of the tape: it only needs a scalar function of
//! a [`ParamSet`]. Relative error per coordinate is
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`.

use crate::error::{Error, Result};
use crate::numerics::ParamSet;

/// Outcome of a gradient check over every parameter coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck: {} coordinates, max rel err {:.3e} (tol {:.1e}) at {:?} -> {}",
            self.checked,
            self.max_rel_err,
            self.tol,
            self.worst,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Compare analytic gradients against central differences of `f`, coordinate
/// by coordinate. `f` must be deterministic; `step` must be positive.
pub fn check_gradients<F>(
    mut f: F,
    params: &ParamSet,
    analytic: &ParamSet,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("gradcheck step must be > 0, got {step}")));
    }
    let mut work = params.clone();
    let mut max_rel_err = 0.0_f64;
    let mut worst = None;
    let mut checked = 0usize;

    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let count = params.require(name)?.len();
        let grad = analytic.require(name)?.clone();
        for k in 0..count {
            let orig = work.get(name).unwrap().data()[k];

            work.get_mut(name).unwrap().data_mut()[k] = orig + step;
            let fp = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - step;
            let fm = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite evaluation while perturbing {name}[{k}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), k));
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        tol,
        pass: max_rel_err <= tol,
    })
}
