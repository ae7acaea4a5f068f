//! Training objective `λ_rec L_rec + λ_adv L_adv + λ_perp L_perp`.
//!
//! Only the reconstruction term is implemented. The adversarial and perceptual
//! terms are hooks that contribute zero unless a plugin is registered.

use ndarray::{Array3, Axis};

use super::{FusionConfig, OUTPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::grid::{BevGrid, Channel, Group};

/// A pluggable loss term evaluated on the raw `(R, G, B, H)` prediction.
pub trait LossHook: Send + Sync {
    fn name(&self) -> &str;

    /// Value and gradient with respect to the prediction.
    fn evaluate(&self, pred: &Array3<f64>, label: &BevGrid) -> Result<(f64, Array3<f64>)>;
}

#[derive(Default)]
pub struct LossHooks {
    pub adversarial: Option<Box<dyn LossHook>>,
    pub perceptual: Option<Box<dyn LossHook>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub reconstruction: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    /// Gradient of `total` with respect to the prediction.
    pub grad: Array3<f64>,
    /// Number of supervised scalars: three per RGB-valid cell, one per height-valid cell.
    pub n_valid: usize,
}

fn group_of(ch: Channel) -> Group {
    if ch == Channel::Height {
        Group::Height
    } else {
        Group::Rgb
    }
}

/// Mean absolute error over label-valid entries, with its subgradient
/// (`sign(pred − label) / n_valid`, zero at ties). Returns zero on an empty mask.
pub fn masked_l1(pred: &Array3<f64>, label: &BevGrid) -> Result<(f64, Array3<f64>, usize)> {
    let expect = (OUTPUT_CHANNELS.len(), label.rows(), label.cols());
    if pred.dim() != expect {
        return Err(Error::Shape(format!("prediction {:?} does not match label {expect:?}", pred.dim())));
    }
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0;
    let mut n_valid = 0usize;
    for (i, &ch) in OUTPUT_CHANNELS.iter().enumerate() {
        let mask = label.plane(group_of(ch).mask());
        let target = label.plane(ch);
        let p = pred.index_axis(Axis(0), i);
        let mut g = grad.index_axis_mut(Axis(0), i);
        for (k, (pv, gv)) in p.iter().zip(g.iter_mut()).enumerate() {
            if mask[k] != 0.0 {
                let diff = pv - target[k] as f64;
                sum += diff.abs();
                *gv = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                n_valid += 1;
            }
        }
    }
    if n_valid == 0 {
        return Ok((0.0, grad, 0));
    }
    let inv = 1.0 / n_valid as f64;
    grad.mapv_inplace(|v| v * inv);
    Ok((sum * inv, grad, n_valid))
}

pub fn loss(pred: &Array3<f64>, label: &BevGrid, cfg: &FusionConfig, hooks: &LossHooks) -> Result<LossValue> {
    let (reconstruction, g_rec, n_valid) = masked_l1(pred, label)?;
    let mut grad = g_rec * cfg.lambda_rec;
    let mut total = cfg.lambda_rec * reconstruction;
    let mut term = |hook: &Option<Box<dyn LossHook>>, lambda: f64| -> Result<f64> {
        let Some(h) = hook else { return Ok(0.0) };
        let (v, g) = h.evaluate(pred, label)?;
        if g.dim() != pred.dim() {
            return Err(Error::Shape(format!("hook '{}' returned gradient {:?}", h.name(), g.dim())));
        }
        grad.scaled_add(lambda, &g);
        total += lambda * v;
        Ok(v)
    };
    let adversarial = term(&hooks.adversarial, cfg.lambda_adv)?;
    let perceptual = term(&hooks.perceptual, cfg.lambda_perp)?;
    Ok(LossValue { total, reconstruction, adversarial, perceptual, grad, n_valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::grid_tensor;
    use crate::grid::GridGeometry;

    fn label() -> BevGrid {
        let g = GridGeometry::new(1.0, 2.0, 0.25).unwrap();
        let mut l = BevGrid::zeros(g);
        for (k, v) in l.plane_mut(Channel::R).iter_mut().enumerate() {
            *v = 0.5 + 0.01 * k as f32;
        }
        l.plane_mut(Channel::Height).fill(-0.25);
        l.plane_mut(Channel::MaskRgb)[..20].fill(1.0);
        l.plane_mut(Channel::MaskHeight)[5..].fill(1.0);
        l
    }

    struct Constant(f64);

    impl LossHook for Constant {
        fn name(&self) -> &str {
            "constant"
        }

        fn evaluate(&self, pred: &Array3<f64>, _: &BevGrid) -> Result<(f64, Array3<f64>)> {
            Ok((self.0, Array3::zeros(pred.dim())))
        }
    }

    #[test]
    fn identity_and_offset() {
        let l = label();
        let cfg = FusionConfig::default();
        let pred = grid_tensor(&l, &OUTPUT_CHANNELS);
        assert_eq!(loss(&pred, &l, &cfg, &LossHooks::default()).unwrap().total, 0.0);
        let v = loss(&(&pred + 0.1), &l, &cfg, &LossHooks::default()).unwrap();
        assert!((v.total - 0.1).abs() < 1e-12);
        assert_eq!(v.n_valid, 3 * 20 + 27);
    }

    #[test]
    fn hooks_default_to_zero() {
        let l = label();
        let cfg = FusionConfig { lambda_rec: 2.0, lambda_adv: 0.5, lambda_perp: 0.5, ..Default::default() };
        let pred = grid_tensor(&l, &OUTPUT_CHANNELS) - 0.3;
        let v = loss(&pred, &l, &cfg, &LossHooks::default()).unwrap();
        assert_eq!(v.total, 2.0 * v.reconstruction);
        let hooks = LossHooks { adversarial: Some(Box::new(Constant(1.0))), perceptual: None };
        let w = loss(&pred, &l, &cfg, &hooks).unwrap();
        assert!((w.total - v.total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_signed_inverse_count() {
        let l = label();
        let cfg = FusionConfig { lambda_rec: 3.0, ..Default::default() };
        let mut pred = grid_tensor(&l, &OUTPUT_CHANNELS);
        pred.index_axis_mut(Axis(0), 0).mapv_inplace(|v| v + 0.2);
        pred.index_axis_mut(Axis(0), 3).mapv_inplace(|v| v - 0.2);
        let v = loss(&pred, &l, &cfg, &LossHooks::default()).unwrap();
        let unit = 3.0 / v.n_valid as f64;
        let mr = l.plane(Channel::MaskRgb);
        let mh = l.plane(Channel::MaskHeight);
        for k in 0..mr.len() {
            let (r, c) = (k / l.cols(), k % l.cols());
            assert_eq!(v.grad[[0, r, c]], if mr[k] != 0.0 { unit } else { 0.0 });
            assert_eq!(v.grad[[1, r, c]], 0.0);
            assert_eq!(v.grad[[3, r, c]], if mh[k] != 0.0 { -unit } else { 0.0 });
        }
    }
}
