//! Pinhole cameras, rigid transforms, per-pixel ray sampling, and the
//! opacity-weighted reduction that turns candidate surface samples along a
//! ray into a single depth, normal, and albedo estimate.
//!
//! Ray generation is plain (non-differentiable) plumbing: candidate depths
//! are data, not optimized quantities. Gradients enter at
//! [`volumetric_reduce`], which runs on the autodiff tape so the composited
//! estimates backpropagate into the surface network outputs.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::diffmath::Value;

/// Opacity scale: `alpha = exp(-f * (z_s - z_r)^2)`. With inputs in
/// millimeters, opacity drops to 1/e at 1mm discrepancy.
pub const DEFAULT_OPACITY_SCALE: f64 = 1.0;

/// Rays whose total compositing weight falls below this are misses.
pub const MISS_WEIGHT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive and finite, got fx={fx}, fy={fy}")]
    BadFocalLength { fx: f64, fy: f64 },
    #[error("principal point ({cx}, {cy}) outside image bounds {width}x{height}")]
    PrincipalPointOutOfBounds {
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    },
    #[error("pixel ({u}, {v}) outside image bounds {width}x{height}")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("rotation matrix check failed: {reason}")]
    NotARotation { reason: String },
    #[error("depth range ({z_min}, {z_max}) is degenerate or non-finite")]
    DegenerateDepthRange { z_min: f64, z_max: f64 },
    #[error("ray sampling needs at least 2 depth samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("cannot project point with non-positive camera depth {z}")]
    BehindCamera { z: f64 },
}

/// Rotation plus translation: `p_world = R * p_cam + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl RigidTransform {
    /// Validates that `r` is a proper rotation (orthonormal, det +1) within
    /// 1e-9 before accepting it.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = r.transpose() * r;
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - expect).abs());
            }
        }
        if max_dev > 1e-9 {
            return Err(GeometryError::NotARotation {
                reason: format!("R'R deviates from identity by {max_dev:.3e}"),
            });
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation {
                reason: format!("det(R) = {det}, expected +1"),
            });
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation {
                reason: format!("translation {t:?} is not finite"),
            });
        }
        Ok(Self { r, t })
    }

    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking toward `target`, camera +z along the view
    /// direction and +y roughly along `down` (image rows grow downward).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        down: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::new(r, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Inverse map: `p_cam = R' * (p_world - t)`.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (p - self.t)
    }

    pub fn inverse(&self) -> Self {
        Self {
            r: self.r.transpose(),
            t: -(self.r.transpose() * self.t),
        }
    }
}

/// Pinhole camera: intrinsics in pixels plus a camera-to-world transform.
#[derive(Debug, Clone)]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    cam_to_world: RigidTransform,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: RigidTransform,
    ) -> Result<Self, GeometryError> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadFocalLength { fx, fy });
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::PrincipalPointOutOfBounds {
                cx,
                cy,
                width,
                height,
            });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_to_world,
        })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn cam_to_world(&self) -> &RigidTransform {
        &self.cam_to_world
    }

    fn check_bounds(&self, u: f64, v: f64) -> Result<(), GeometryError> {
        if !(0.0..self.width as f64).contains(&u) || !(0.0..self.height as f64).contains(&v) {
            return Err(GeometryError::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Unit view direction through pixel `(u, v)` in the camera frame:
    /// `normalize([(u - cx)/fx, (v - cy)/fy, 1])`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Vector3<f64>, GeometryError> {
        self.check_bounds(u, v)?;
        Ok(Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize())
    }

    /// Camera-frame point for pixel `(u, v)` at projection depth `z`
    /// (distance along the optical axis, not along the ray).
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Result<Vector3<f64>, GeometryError> {
        self.check_bounds(u, v)?;
        Ok(Vector3::new(
            (u - self.cx) / self.fx * z,
            (v - self.cy) / self.fy * z,
            z,
        ))
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
        if p_cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: p_cam.z });
        }
        Ok((
            self.cx + self.fx * p_cam.x / p_cam.z,
            self.cy + self.fy * p_cam.y / p_cam.z,
        ))
    }

    /// Candidate depths uniformly spanning `[z_min, z_max]` inclusive, with
    /// world points per the camera-to-world transform.
    pub fn sample_ray(
        &self,
        u: f64,
        v: f64,
        depth_range: (f64, f64),
        n: usize,
    ) -> Result<RaySampleSet, GeometryError> {
        let depths = uniform_depths(depth_range, n)?;
        self.assemble_samples(u, v, depths)
    }

    /// Stratified variant for training: one uniform draw inside each of the
    /// `n` equal bins covering the range, so depths stay strictly increasing.
    pub fn sample_ray_jittered(
        &self,
        u: f64,
        v: f64,
        depth_range: (f64, f64),
        n: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<RaySampleSet, GeometryError> {
        use rand::RngExt;
        let (z_min, z_max) = check_depth_range(depth_range, n)?;
        let bin = (z_max - z_min) / n as f64;
        let depths: Vec<f64> = (0..n)
            .map(|i| z_min + (i as f64 + rng.random_range(0.0..1.0)) * bin)
            .collect();
        self.assemble_samples(u, v, depths)
    }

    fn assemble_samples(
        &self,
        u: f64,
        v: f64,
        depths: Vec<f64>,
    ) -> Result<RaySampleSet, GeometryError> {
        let dir = self.pixel_ray(u, v)?;
        let mut world_points = Array2::<f64>::zeros((depths.len(), 3));
        for (i, &z) in depths.iter().enumerate() {
            let p = self.cam_to_world.apply(&(dir * z));
            world_points[[i, 0]] = p.x;
            world_points[[i, 1]] = p.y;
            world_points[[i, 2]] = p.z;
        }
        Ok(RaySampleSet::new(dir, Array1::from(depths), world_points))
    }
}

/// Candidate samples along one viewing ray.
#[derive(Debug, Clone)]
pub struct RaySampleSet {
    view_dir: Vector3<f64>,
    depths: Array1<f64>,
    world_points: Array2<f64>,
}

impl RaySampleSet {
    /// Panics unless depths are strictly increasing: compositing order is
    /// front to back, so unsorted input is a programming error.
    pub fn new(view_dir: Vector3<f64>, depths: Array1<f64>, world_points: Array2<f64>) -> Self {
        assert!(
            depths.windows(2).into_iter().all(|w| w[0] < w[1]),
            "ray sample depths must be strictly increasing"
        );
        assert_eq!(
            world_points.nrows(),
            depths.len(),
            "one world point per depth sample"
        );
        Self {
            view_dir,
            depths,
            world_points,
        }
    }

    pub fn view_dir(&self) -> &Vector3<f64> {
        &self.view_dir
    }

    pub fn depths(&self) -> &Array1<f64> {
        &self.depths
    }

    /// World points `[n, 3]`; row i is the transform applied to `v * z_i`.
    pub fn world_points(&self) -> &Array2<f64> {
        &self.world_points
    }

    /// World-frame z coordinate of every sample, the `z_r` of the reduction.
    pub fn world_z(&self) -> Array1<f64> {
        self.world_points.index_axis(Axis(1), 2).to_owned()
    }
}

fn check_depth_range(range: (f64, f64), n: usize) -> Result<(f64, f64), GeometryError> {
    let (z_min, z_max) = range;
    if !(z_min.is_finite() && z_max.is_finite() && z_min < z_max) {
        return Err(GeometryError::DegenerateDepthRange { z_min, z_max });
    }
    if n < 2 {
        return Err(GeometryError::TooFewSamples { n });
    }
    Ok((z_min, z_max))
}

fn uniform_depths(range: (f64, f64), n: usize) -> Result<Vec<f64>, GeometryError> {
    let (z_min, z_max) = check_depth_range(range, n)?;
    let step = (z_max - z_min) / (n - 1) as f64;
    Ok((0..n).map(|i| z_min + step * i as f64).collect())
}

/// Composited surface estimate for a batch of rays.
pub struct ReducedSamples {
    /// Depth estimate per ray, shape `[batch]`.
    pub z: Value,
    /// Unit normal estimate per ray, shape `[batch, 3]`.
    pub normal: Value,
    /// Albedo estimate per ray, shape `[batch]`.
    pub albedo: Value,
    /// Normalized compositing weights, shape `[batch, n]`.
    pub weights: Value,
    /// Rays whose unnormalized weights summed below the miss threshold;
    /// their composited outputs are meaningless and must be excluded.
    pub miss: Vec<bool>,
}

/// Front-to-back compositing of per-sample surface estimates.
///
/// `z_r` are the sample z coordinates along each ray (shape `[batch, n]`,
/// strictly increasing in depth order per ray), `z_s` the surface heights
/// queried at the sample footprints, `n_s` the surface normals
/// `[batch, n, 3]`, `rho_s` the albedos `[batch, n]`. Opacity is
/// `exp(-f * (z_s - z_r)^2)`; weights are opacity times accumulated
/// transmittance, normalized to sum to one per ray. All inputs must share
/// units (millimeters throughout this crate).
pub fn volumetric_reduce(
    z_r: &Value,
    z_s: &Value,
    n_s: &Value,
    rho_s: &Value,
    f: f64,
) -> ReducedSamples {
    let zr_shape = z_r.shape();
    assert_eq!(zr_shape.len(), 2, "volumetric_reduce expects [batch, n]");
    assert_eq!(z_s.shape(), zr_shape, "z_s shape mismatch");
    assert_eq!(rho_s.shape(), zr_shape, "rho_s shape mismatch");
    assert_eq!(
        n_s.shape(),
        vec![zr_shape[0], zr_shape[1], 3],
        "n_s shape mismatch"
    );
    assert!(f > 0.0, "opacity scale must be positive, got {f}");
    {
        let zr = z_r.data();
        for row in zr.axis_iter(ndarray::Axis(0)) {
            assert!(
                row.iter().zip(row.iter().skip(1)).all(|(a, b)| a < b),
                "volumetric_reduce: sample depths must be strictly increasing"
            );
        }
    }

    let (batch, n) = (zr_shape[0], zr_shape[1]);
    let diff = z_s.sub(z_r);
    let alpha = diff.mul(&diff).mul_s(-f).exp();
    // Transmittance via exp of the exclusive cumulative sum of log(1 - a).
    // The guarded log keeps an exact hit (a = 1) finite while still acting
    // as near-total absorption.
    let one_minus = alpha.neg().add_s(1.0);
    let trans = one_minus.log().cumsum_exclusive(1).exp();
    let w = alpha.mul(&trans);
    let wsum = w.sum_axis(1, true);
    let miss: Vec<bool> = wsum
        .data()
        .iter()
        .map(|&s| s < MISS_WEIGHT_THRESHOLD)
        .collect();
    let w_norm = w.div(&wsum);

    let z = w_norm.mul(z_s).sum_axis(1, false);
    let albedo = w_norm.mul(rho_s).sum_axis(1, false);
    let w3 = w_norm.reshape(&[batch, n, 1]);
    let normal = w3.mul(n_s).sum_axis(1, false).normalize_last();
    ReducedSamples {
        z,
        normal,
        albedo,
        weights: w_norm,
        miss,
    }
}
