//! Training objectives: angular normal loss, L1 rendering loss,
//! initialization depth loss, normal/depth regularizers, and the
//! visibility-based sample weighting.
//!
//! Angular quantities are in degrees, depths in millimeters. Normals face
//! the cameras, so the canonical regularizer normal is [0, 0, -1].

use nalgebra::Vector3;
use ndarray::Array2;
use thiserror::Error;

use crate::diffmath::Value;

/// Camera-facing flat normal used by the normal regularizer.
pub const CANONICAL_NORMAL: Vector3<f64> = Vector3::new(0.0, 0.0, -1.0);

const RAD_TO_DEG: f64 = 180.0 / std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weight {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("per-light vectors must have equal lengths: {rendered} vs {observed} vs {mask}")]
    MismatchedLights {
        rendered: usize,
        observed: usize,
        mask: usize,
    },
    #[error("shadow count {count} exceeds the light count {n_lights}")]
    ShadowCountExceedsLights { count: usize, n_lights: usize },
    #[error("light count must be positive")]
    NoLights,
}

/// Relative weights of the training objectives.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Angular normal loss (degrees), typically 1.
    pub w_normal: f64,
    /// L1 rendering loss on [0,1] intensities.
    pub w_render: f64,
    /// Depth L1 (mm), used only during initialization.
    pub w_depth: f64,
    /// Regularizer pulling normals toward [`CANONICAL_NORMAL`] (degrees).
    pub w_reg_normal: f64,
    /// Regularizer pulling depths toward the mean initial depth (mm).
    pub w_reg_depth: f64,
}

impl LossWeights {
    /// Dense-sample regime with strong rendering supervision scaled down.
    pub fn luces_like() -> Self {
        Self {
            w_normal: 1.0,
            w_render: 100.0,
            w_depth: 1.0,
            w_reg_normal: 1e-3,
            w_reg_depth: 1e-4,
        }
    }

    /// Sparse-sample regime; the rendering term carries more weight.
    pub fn diligent_like() -> Self {
        Self {
            w_render: 1000.0,
            ..Self::luces_like()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let entries = [
            ("w_normal", self.w_normal),
            ("w_render", self.w_render),
            ("w_depth", self.w_depth),
            ("w_reg_normal", self.w_reg_normal),
            ("w_reg_depth", self.w_reg_depth),
        ];
        for (name, value) in entries {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Per-point visibility weighting derived from the ambient-occlusion
/// fraction `a` (shadowed lights over total lights). Mostly-occluded
/// points contribute less: the normal loss scales by `1 - a` and the
/// rendering loss by `(1 - a)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleWeight {
    /// Occlusion fraction in [0, 1].
    pub a: f64,
    /// Normal-loss weight, `1 - a`.
    pub w_n: f64,
    /// Rendering-loss weight, `(1 - a)^2 = w_n^2` exactly.
    pub w_r: f64,
}

/// Visibility weights from a hard-shadow count.
pub fn sample_weights(shadow_count: usize, n_lights: usize) -> Result<SampleWeight, LossError> {
    if n_lights == 0 {
        return Err(LossError::NoLights);
    }
    if shadow_count > n_lights {
        return Err(LossError::ShadowCountExceedsLights {
            count: shadow_count,
            n_lights,
        });
    }
    let a = shadow_count as f64 / n_lights as f64;
    let w_n = 1.0 - a;
    Ok(SampleWeight { a, w_n, w_r: w_n * w_n })
}

/// Angular error between a predicted and a target unit normal, in degrees,
/// masked by how much the target normal faces the camera:
/// `atan2(|n_n x n_s|, n_n . n_s) * max(n_n . v, 0)`.
pub fn angular_normal_loss_deg(
    n_s: &Vector3<f64>,
    n_n: &Vector3<f64>,
    v: &Vector3<f64>,
) -> f64 {
    let angle = n_n.cross(n_s).norm().atan2(n_n.dot(n_s)).abs();
    angle * RAD_TO_DEG * n_n.dot(v).max(0.0)
}

/// Batched tape version of [`angular_normal_loss_deg`]: predicted normals
/// `[B, 3]` stay differentiable, targets and view directions are data.
/// Returns per-sample degrees `[B, 1]`.
pub fn angular_normal_loss_deg_tape(n_s: &Value, n_n: &Array2<f64>, v: &Array2<f64>) -> Value {
    let b = n_s.shape()[0];
    let tape = n_s.tape();
    let target = tape.constant(n_n.clone().into_dyn());
    let cross_norm = target.cross_last(n_s).norm_last();
    let dot = target.dot_last(n_s);
    let angle = cross_norm.atan2(&dot).mul_s(RAD_TO_DEG);
    let mut mask = Array2::<f64>::zeros((b, 1));
    for i in 0..b {
        let facing = n_n[[i, 0]] * v[[i, 0]] + n_n[[i, 1]] * v[[i, 1]] + n_n[[i, 2]] * v[[i, 2]];
        mask[[i, 0]] = facing.max(0.0);
    }
    angle.mul(&tape.constant(mask.into_dyn()))
}

/// Mean absolute intensity error over the lights marked valid. A sample
/// with zero valid lights is excluded (`None`).
pub fn rendering_loss(
    i_rendered: &[f64],
    i_observed: &[f64],
    valid: &[bool],
) -> Result<Option<f64>, LossError> {
    if i_rendered.len() != i_observed.len() || i_rendered.len() != valid.len() {
        return Err(LossError::MismatchedLights {
            rendered: i_rendered.len(),
            observed: i_observed.len(),
            mask: valid.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((r, o), ok) in i_rendered.iter().zip(i_observed).zip(valid) {
        if *ok {
            sum += (r - o).abs();
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Batched tape rendering loss: rendered `[B, M]` differentiable, observed
/// and the 0/1 validity mask as data. Returns the per-sample mean over
/// valid lights `[B, 1]` plus the inclusion mask (false where a row had no
/// valid light; its loss entry is 0 and must not enter batch averages).
pub fn rendering_loss_tape(
    i_rendered: &Value,
    i_observed: &Array2<f64>,
    valid: &Array2<f64>,
) -> (Value, Vec<bool>) {
    let shape = i_rendered.shape();
    let (b, m) = (shape[0], shape[1]);
    assert_eq!(i_observed.dim(), (b, m), "observed intensities shape mismatch");
    assert_eq!(valid.dim(), (b, m), "validity mask shape mismatch");
    let tape = i_rendered.tape();

    let mut included = Vec::with_capacity(b);
    let mut inv_count = Array2::<f64>::zeros((b, 1));
    for i in 0..b {
        let count = valid.row(i).iter().filter(|x| **x != 0.0).count();
        included.push(count > 0);
        if count > 0 {
            inv_count[[i, 0]] = 1.0 / count as f64;
        }
    }
    let obs = tape.constant(i_observed.clone().into_dyn());
    let mask = tape.constant(valid.clone().into_dyn());
    let per_light = i_rendered.sub(&obs).abs().mul(&mask);
    let per_sample = per_light
        .sum_axis(1, true)
        .mul(&tape.constant(inv_count.into_dyn()));
    (per_sample, included)
}

/// Absolute depth error in millimeters.
pub fn depth_loss(z_s: f64, z_t: f64) -> f64 {
    (z_s - z_t).abs()
}

/// Batched tape depth loss `[B, 1]`.
pub fn depth_loss_tape(z_s: &Value, z_t: &Array2<f64>) -> Value {
    let tape = z_s.tape();
    z_s.sub(&tape.constant(z_t.clone().into_dyn())).abs()
}

/// Weighted pull toward a flat camera-facing surface: angular distance of
/// the normal from [`CANONICAL_NORMAL`] (degrees) times `w_reg_normal`,
/// plus `|z - z_mean|` (mm) times `w_reg_depth`.
pub fn regularizers(
    n_s: &Vector3<f64>,
    z_s: f64,
    z_mean: f64,
    weights: &LossWeights,
) -> f64 {
    let angle = CANONICAL_NORMAL
        .cross(n_s)
        .norm()
        .atan2(CANONICAL_NORMAL.dot(n_s))
        .abs()
        * RAD_TO_DEG;
    weights.w_reg_normal * angle + weights.w_reg_depth * (z_s - z_mean).abs()
}

/// Batched tape version of [`regularizers`]: normals `[B, 3]` and depths
/// `[B, 1]` differentiable; returns `[B, 1]`.
pub fn regularizers_tape(n_s: &Value, z_s: &Value, z_mean: f64, weights: &LossWeights) -> Value {
    let b = n_s.shape()[0];
    let tape = n_s.tape();
    let mut canon = Array2::<f64>::zeros((b, 3));
    canon.column_mut(2).fill(-1.0);
    let canon = tape.constant(canon.into_dyn());
    let angle = canon
        .cross_last(n_s)
        .norm_last()
        .atan2(&canon.dot_last(n_s))
        .mul_s(RAD_TO_DEG);
    let depth = z_s.add_s(-z_mean).abs();
    angle
        .mul_s(weights.w_reg_normal)
        .add(&depth.mul_s(weights.w_reg_depth))
}

/// Mean of `per_sample [B, 1]` over rows flagged included; a constant 0
/// when none are. Excluded rows contribute neither numerator nor count.
pub fn masked_mean(per_sample: &Value, included: &[bool]) -> Value {
    let b = per_sample.shape()[0];
    assert_eq!(included.len(), b, "inclusion mask length mismatch");
    let tape = per_sample.tape();
    let count = included.iter().filter(|x| **x).count();
    if count == 0 {
        return tape.full_constant(&[1, 1], 0.0).sum_all();
    }
    let mut mask = Array2::<f64>::zeros((b, 1));
    for (i, ok) in included.iter().enumerate() {
        if *ok {
            mask[[i, 0]] = 1.0;
        }
    }
    per_sample
        .mul(&tape.constant(mask.into_dyn()))
        .sum_all()
        .mul_s(1.0 / count as f64)
}
