//! Central-difference verification of analytic gradients.

use crate::error::{Result, SamError};
use crate::tensor::DenseArray;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-parameter-group outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients against central differences of `loss_fn`.
///
/// `masks[i]`, when present, marks entries that are projected to zero by
/// construction; those coordinates are skipped (their dense gradients are
/// discarded by the optimizer). `max_coords_per_group == 0` checks every
/// coordinate; otherwise a seeded random subset of that size per group.
///
/// Returns the max over checked coordinates of
/// `|analytic - fd| / max(1, |fd|)` plus a per-group breakdown.
pub fn grad_check(
    loss_fn: &mut dyn FnMut(&[DenseArray<f64>]) -> Result<f64>,
    params: &[DenseArray<f64>],
    analytic: &[DenseArray<f64>],
    names: &[String],
    masks: &[Option<Vec<bool>>],
    eps: f64,
    max_coords_per_group: usize,
    seed: u64,
) -> Result<(f64, Vec<GroupReport>)> {
    if params.len() != analytic.len() {
        return Err(SamError::ShapeMismatch(
            "grad_check params vs analytic length".into(),
        ));
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(SamError::NonFinite("grad_check loss".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut overall = 0.0f64;
    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<DenseArray<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let mask = masks.get(pi).and_then(|m| m.as_ref());
        let mut coords: Vec<usize> = (0..param.len())
            .filter(|&k| mask.map_or(true, |m| !m[k]))
            .collect();
        if max_coords_per_group > 0 && coords.len() > max_coords_per_group {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords_per_group);
            coords.sort_unstable();
        }
        let mut group_max = 0.0f64;
        for &k in &coords {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = loss_fn(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = loss_fn(&work)?;
            work[pi].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(SamError::NonFinite("grad_check perturbed loss".into()));
            }
            let fd = (up - down) / (2.0 * eps);
            let rel = (analytic[pi].data()[k] - fd).abs() / fd.abs().max(1.0);
            group_max = group_max.max(rel);
        }
        overall = overall.max(group_max);
        reports.push(GroupReport {
            name: names.get(pi).cloned().unwrap_or_else(|| format!("param{pi}")),
            max_rel_err: group_max,
            coords_checked: coords.len(),
        });
    }
    Ok((overall, reports))
}
