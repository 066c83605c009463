use std::collections::HashMap;

use ndarray::{Array3, ArrayView3};
use udcvr_core::resample::resize3;
use udcvr_tensor::{Graph, Var};

use crate::error::{NetError, Result};
use crate::model::ClipOutput;
use crate::tensor_of;

/// Mean of `sqrt((x - y)^2 + eps^2)` over all elements.
pub fn charbonnier(x: ArrayView3<'_, f32>, y: ArrayView3<'_, f32>, eps: f64) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(NetError::Invalid(format!("charbonnier of {:?} and {:?}", x.dim(), y.dim())));
    }
    let e2 = eps * eps;
    // Averaging the excess over eps keeps x == y at exactly eps.
    let excess: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            (d * d + e2).sqrt() - eps
        })
        .sum();
    Ok(eps + excess / x.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over frames of the full-resolution term.
    pub final_term: f64,
    /// Mean over intermediates; 0 when supervision is off.
    pub intermediate_term: f64,
}

/// Final-frame loss plus `sup_weight` times the mean intermediate loss, the
/// latter against ground truth resized to each intermediate's scale.
/// `scales` maps an intermediate's scale index to its factor.
pub fn total_loss(
    g: &mut Graph,
    out: &ClipOutput,
    gt: &[Array3<f32>],
    scales: &[usize],
    enable_sup: bool,
    sup_weight: f64,
    eps: f64,
) -> Result<(Var, LossBreakdown)> {
    if out.frames.len() != gt.len() || gt.is_empty() {
        return Err(NetError::Invalid(format!(
            "{} restored frames for {} targets",
            out.frames.len(),
            gt.len()
        )));
    }
    let eps = eps as f32;
    let w_frame = 1.0 / gt.len() as f32;
    let mut terms = Vec::new();
    let mut final_term = 0.0;
    for (&v, y) in out.frames.iter().zip(gt) {
        let target = g.constant(tensor_of(y));
        let l = g.charbonnier(v, target, eps)?;
        final_term += g.value(l).item() as f64 * w_frame as f64;
        terms.push((l, w_frame));
    }
    let mut intermediate_term = 0.0;
    if enable_sup {
        if out.intermediates.is_empty() {
            return Err(NetError::Invalid("intermediate supervision enabled but no intermediates".into()));
        }
        let w_int = 1.0 / out.intermediates.len() as f32;
        let mut targets: HashMap<(usize, usize), Var> = HashMap::new();
        for im in &out.intermediates {
            let s = *scales
                .get(im.scale)
                .ok_or_else(|| NetError::Invalid(format!("intermediate at unknown scale {}", im.scale)))?;
            let y = gt
                .get(im.t)
                .ok_or_else(|| NetError::Invalid(format!("intermediate at frame {}", im.t)))?;
            let target = *targets.entry((im.t, im.scale)).or_insert_with(|| {
                let (_, h, w) = y.dim();
                g.constant(tensor_of(&resize3(y, h / s, w / s)))
            });
            let l = g.charbonnier(im.var, target, eps)?;
            intermediate_term += g.value(l).item() as f64 * w_int as f64;
            terms.push((l, sup_weight as f32 * w_int));
        }
    }
    let loss = g.weighted_sum(&terms);
    let sup = if enable_sup { sup_weight } else { 0.0 };
    Ok((
        loss,
        LossBreakdown {
            total: final_term + sup * intermediate_term,
            final_term,
            intermediate_term,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn charbonnier_examples() {
        let x = Array3::<f32>::from_elem((1, 2, 2), 0.3);
        assert_eq!(charbonnier(x.view(), x.view(), 1e-3).unwrap(), 1e-3);
        let y = Array3::<f32>::from_elem((1, 1, 1), 0.0);
        let d = Array3::<f32>::from_elem((1, 1, 1), 1e-3);
        let v = charbonnier(d.view(), y.view(), 1e-3).unwrap();
        assert!((v - 2f64.sqrt() * 1e-3).abs() < 1e-9);
        let d = Array3::<f32>::from_elem((1, 1, 1), 0.5);
        assert!((charbonnier(d.view(), y.view(), 1e-3).unwrap() - 0.5).abs() < 1e-5);
        assert!(charbonnier(x.view(), y.view(), 1e-3).is_err());
    }
}
