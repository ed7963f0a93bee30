//! Central finite-difference verification of analytic gradients.

use std::time::Instant;

use super::tensor::{NnError, Tensor};
use super::Parameter;

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name and flat coordinate of the worst parameter entry.
    pub worst_param: String,
    pub worst_index: usize,
    /// Total scalar coordinates compared.
    pub checked: usize,
    pub elapsed_secs: f64,
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f(params, want_grads)` returns the scalar loss; when `want_grads` it also
/// returns one gradient tensor per parameter, in order (zeros are fine for
/// frozen entries, which are skipped anyway). The relative error per
/// coordinate is `|fd - ad| / max(|fd|, |ad|, 1e-6)`; the floor makes
/// coordinates with negligible gradient compare absolutely at the 1e-6
/// scale instead of amplifying finite-difference rounding noise.
///
/// A check evaluated exactly on a relu kink fails honestly: central
/// differences report the one-sided slope while the backward pass takes the
/// zero subgradient. Zero-initialized biases behind a dead channel sit on
/// that point, so probe a freshly initialized model at a seed whose
/// activations are clear of it.
pub fn gradient_check<F>(
    params: &mut [Parameter],
    mut f: F,
    epsilon: f64,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&[Parameter], bool) -> Result<(f64, Option<Vec<Tensor>>), NnError>,
{
    if !(epsilon > 0.0) {
        return Err(NnError::Numeric(format!("epsilon must be positive, got {epsilon}")));
    }
    let start = Instant::now();
    let (loss0, grads) = f(params, true)?;
    if !loss0.is_finite() {
        return Err(NnError::Numeric(format!("loss is not finite: {loss0}")));
    }
    let grads = grads.ok_or_else(|| {
        NnError::Numeric("closure returned no gradients on the analytic pass".to_string())
    })?;
    if grads.len() != params.len() {
        return Err(NnError::Numeric(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        elapsed_secs: 0.0,
    };
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        if grads[pi].shape() != params[pi].value.shape() {
            return Err(NnError::Numeric(format!(
                "gradient shape {:?} vs parameter {:?} for {}",
                grads[pi].shape(),
                params[pi].value.shape(),
                params[pi].name
            )));
        }
        for ci in 0..params[pi].value.numel() {
            let orig = params[pi].value.data()[ci];
            params[pi].value.data_mut()[ci] = orig + epsilon;
            let (lp, _) = f(params, false)?;
            params[pi].value.data_mut()[ci] = orig - epsilon;
            let (lm, _) = f(params, false)?;
            params[pi].value.data_mut()[ci] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(NnError::Numeric(format!(
                    "perturbed loss not finite at {}[{}]",
                    params[pi].name, ci
                )));
            }
            let fd = (lp - lm) / (2.0 * epsilon);
            let ad = grads[pi].data()[ci];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params[pi].name.clone();
                report.worst_index = ci;
            }
        }
    }
    report.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
