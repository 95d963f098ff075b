use rand::seq::index::sample;

use crate::error::{LabError, Result};
use crate::heads::DraftHead;
use crate::models::DrafterBackbone;
use crate::seed::rng_for;

use super::backprop::{example_loss_grad, flatten_grads, flatten_params, unflatten_params, DrafterGrads, Example};

/// Max over `coords` of `|analytic - central difference| / (|analytic| + 1e-12)`.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(LabError::dims("analytic gradient", params.len(), analytic.len()));
    }
    if !params.iter().all(|x| x.is_finite()) {
        return Err(LabError::Numerical("non-finite parameter".into()));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss_fn(&x);
        x[i] = orig - h;
        let down = loss_fn(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-12));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub params: usize,
}

/// Checks backbone-and-head gradients of one example's loss at `h = 1e-5`.
///
/// Coordinates are drawn from those with `|analytic| > 1e-6`: for smaller
/// entries the central difference is dominated by rounding, not by the
/// gradient. `corrupt` scales the analytic gradient before comparison.
pub fn drafter_gradient_check(
    backbone: &DrafterBackbone,
    head: &DraftHead,
    example: &Example,
    max_coords: usize,
    seed: u64,
    corrupt: f64,
) -> Result<GradCheckReport> {
    let mut grads = DrafterGrads::zeros_like(backbone, head);
    example_loss_grad(backbone, head, example, Some(&mut grads), 1.0, true)?;
    let analytic: Vec<f64> = flatten_grads(&grads).iter().map(|g| g * corrupt).collect();
    let params = flatten_params(backbone, head);
    let live: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > 1e-6).collect();
    if live.is_empty() {
        return Err(LabError::Numerical("gradient vanishes everywhere".into()));
    }
    let mut rng = rng_for(seed, "gradcheck");
    let coords: Vec<usize> = sample(&mut rng, live.len(), max_coords.min(live.len()))
        .into_iter()
        .map(|j| live[j])
        .collect();
    let mut bb = backbone.clone();
    let mut hd = head.clone();
    let mut failure = None;
    let err = finite_diff_check(
        |x| {
            let loss = unflatten_params(&mut bb, &mut hd, x)
                .and_then(|_| example_loss_grad(&bb, &hd, example, None, 1.0, true));
            loss.unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &params,
        &analytic,
        &coords,
        1e-5,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckReport {
        max_rel_error: err,
        coords_checked: coords.len(),
        params: params.len(),
    })
}
