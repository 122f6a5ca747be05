use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over parameters of |analytic − central| / max(|analytic|, |central|, 1e-5)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares an analytic gradient against central differences of `f`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    check_len("finite_diff_check analytic", params.len(), analytic.len())?;
    let mut p = params.to_vec();
    let mut worst = 0.0;
    let mut worst_index = 0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = f(&p);
        p[i] = orig - step;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective while perturbing parameter {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        checked: p.len(),
    })
}
