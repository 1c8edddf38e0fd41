//! Near-field point lights, the MERL-style BRDF angle parameterization, the
//! learned BRDF network, differentiable soft shadows, and per-light
//! intensity synthesis.
//!
//! Conventions: world coordinates in millimeters, world z growing from the
//! cameras toward the scene, normals facing the cameras (negative z), light
//! directions `l` pointing from the surface toward the light, view
//! directions `v` pointing from the surface toward the camera.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, ArrayView2, Axis, IxDyn};
use rand::{Rng, RngExt};
use thiserror::Error;

use crate::diffmath::{Tape, Value};
use crate::heightmap::HeightmapNetwork;

/// Occlusion sharpness (per mm of height difference) in the soft shadow.
pub const SHADOW_SIGMOID_SHARPNESS: f64 = 4.0;
/// Smooth-max temperature combining the 16 occlusion samples.
pub const SHADOW_SMOOTHMAX_GAMMA: f64 = 10.0;
/// Shadow march: 16 samples every 1.5mm starting 3mm from the surface.
pub const SHADOW_SAMPLES: usize = 16;
pub const SHADOW_STEP_MM: f64 = 1.5;
pub const SHADOW_OFFSET_MM: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ShadingError {
    #[error("light principal direction must be unit norm, got |d| = {norm}")]
    NonUnitPrincipalDir { norm: f64 },
    #[error("light brightness must be positive, got {brightness}")]
    NonPositiveBrightness { brightness: f64 },
    #[error("light dissipation must be non-negative, got {dissipation}")]
    NegativeDissipation { dissipation: f64 },
    #[error("surface point within {dist} mm of the light source")]
    PointAtLight { dist: f64 },
    #[error("{which} vectors must be unit norm, worst |v| = {norm}")]
    NonUnitInput { which: &'static str, norm: f64 },
}

/// Calibrated near-field point light.
#[derive(Debug, Clone)]
pub struct LightSource {
    /// Position in world frame (mm).
    pub position: Vector3<f64>,
    /// Intrinsic brightness, > 0.
    pub brightness: f64,
    /// Principal emission direction, unit norm.
    pub principal_dir: Vector3<f64>,
    /// Angular dissipation exponent, >= 0 (0 = isotropic point light).
    pub dissipation: f64,
}

impl LightSource {
    pub fn new(
        position: Vector3<f64>,
        brightness: f64,
        principal_dir: Vector3<f64>,
        dissipation: f64,
    ) -> Result<Self, ShadingError> {
        let light = Self {
            position,
            brightness,
            principal_dir,
            dissipation,
        };
        light.validate()?;
        Ok(light)
    }

    pub fn validate(&self) -> Result<(), ShadingError> {
        let norm = self.principal_dir.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(ShadingError::NonUnitPrincipalDir { norm });
        }
        if !(self.brightness > 0.0) {
            return Err(ShadingError::NonPositiveBrightness {
                brightness: self.brightness,
            });
        }
        if self.dissipation < 0.0 {
            return Err(ShadingError::NegativeDissipation {
                dissipation: self.dissipation,
            });
        }
        Ok(())
    }
}

/// Light vector, unit light direction, and attenuation at surface point `p`:
/// `l = s - p`, `a = phi * max(0, (p - s)/|p - s| . d_hat)^mu / |l|^2`.
///
/// The angular term uses the emission direction (light toward point); the
/// paper writes the surface-to-light direction there, which is -1 for an
/// LED aimed straight at the surface and contradicts its own aligned
/// example, so the physical reading wins.
pub fn light_vectors(
    p: &Vector3<f64>,
    light: &LightSource,
) -> Result<(Vector3<f64>, Vector3<f64>, f64), ShadingError> {
    let l = light.position - p;
    let dist = l.norm();
    if dist < 1e-6 {
        return Err(ShadingError::PointAtLight { dist });
    }
    let l_hat = l / dist;
    let angular = if light.dissipation == 0.0 {
        1.0
    } else {
        (-l_hat).dot(&light.principal_dir).max(1e-12)
    };
    let a = light.brightness * angular.powf(light.dissipation) / (dist * dist);
    Ok((l, l_hat, a))
}

/// Tape version of [`light_vectors`] for a batch of points `[B, 3]`:
/// returns the unit directions `[B, 3]`, attenuations `[B, 1]`, and
/// distances `[B, 1]`, all differentiable in `p`.
pub fn light_vectors_tape(tape: &Tape, p: &Value, light: &LightSource) -> (Value, Value, Value) {
    let b = p.shape()[0];
    let s = tape.constant(
        Array2::from_shape_vec((1, 3), light.position.iter().copied().collect())
            .unwrap()
            .into_dyn(),
    );
    let l = s.sub(p);
    let dist = l.norm_last().reshape(&[b, 1]);
    let l_hat = l.div(&dist);
    let dist2 = dist.mul(&dist);
    let a = if light.dissipation == 0.0 {
        tape.full_constant(&[b, 1], light.brightness).div(&dist2)
    } else {
        let d = tape.constant(
            Array2::from_shape_vec((1, 3), light.principal_dir.iter().copied().collect())
                .unwrap()
                .into_dyn(),
        );
        let cos = l_hat
            .neg()
            .dot_last(&d)
            .reshape(&[b, 1])
            .clamp_min(1e-12);
        cos.powc(light.dissipation)
            .mul_s(light.brightness)
            .div(&dist2)
    };
    (l_hat, a, dist)
}

/// MERL half/difference angle parameterization of a batch of (n, l, v)
/// configurations, plus the physical-validity mask.
pub struct BrdfAngles {
    /// Half-vector elevation from the normal, `[B, 1]`, in [0, pi/2] for
    /// mask-valid configurations.
    pub theta_h: Value,
    /// Difference angle (half the l-v angle), `[B, 1]`.
    pub theta_d: Value,
    /// Difference azimuth wrapped to [0, pi), `[B, 1]`.
    pub phi_d: Value,
    /// 1 where (n.l), (n.v), and (l.v) are all positive, else 0; constant.
    pub sign_mask: Value,
}

impl BrdfAngles {
    /// MLP input `[B, 3]`: theta_h, theta_d, phi_d.
    pub fn stacked(&self) -> Value {
        Value::concat(
            &[self.theta_h.clone(), self.theta_d.clone(), self.phi_d.clone()],
            1,
        )
    }
}

fn check_unit_rows(v: &Value, which: &'static str) -> Result<(), ShadingError> {
    let data = v.data();
    let mut worst = 1.0f64;
    for row in data.axis_iter(Axis(0)) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > (worst - 1.0).abs() {
            worst = n;
        }
    }
    if (worst - 1.0).abs() > 1e-6 {
        return Err(ShadingError::NonUnitInput { which, norm: worst });
    }
    Ok(())
}

fn dot1(a: &Value, b: &Value) -> Value {
    let bsz = a.shape()[0];
    a.dot_last(b).reshape(&[bsz, 1])
}

/// Rusinkiewicz angles for unit normals, light directions, and view
/// directions, all `[B, 3]`.
///
/// Computed frame-free: `theta_h` from `h . n`, `theta_d` as half the l-v
/// angle (symmetric in the swap, hence bit-stable), and `phi_d` as the
/// azimuth of l's residual around h measured from n's residual. Reciprocity
/// (l <-> v swap) maps the azimuth to its antipode; evaluating both
/// candidates and keeping the lexicographic maximum by (y, then x) wraps
/// phi_d into [0, pi) and makes the swapped result bit-identical.
pub fn rusinkiewicz_angles(n: &Value, l: &Value, v: &Value) -> Result<BrdfAngles, ShadingError> {
    check_unit_rows(n, "normal")?;
    check_unit_rows(l, "light")?;
    check_unit_rows(v, "view")?;
    let b = n.shape()[0];
    let tape = n.tape();

    let h = l.add(v).normalize_last();
    let nh = dot1(&h, n);
    let theta_h = nh.acos();
    let lv = dot1(l, v);
    let theta_d = lv.acos().mul_s(0.5);

    // Residuals perpendicular to h; n's residual is the azimuth reference.
    let u = n.sub(&h.mul(&nh)).normalize_last();
    let y_axis = h.cross_last(&u);
    let w_l = l.sub(&h.mul(&dot1(&h, l)));
    let w_v = v.sub(&h.mul(&dot1(&h, v)));
    let xl = dot1(&w_l, &u);
    let yl = dot1(&w_l, &y_axis);
    let xv = dot1(&w_v, &u);
    let yv = dot1(&w_v, &y_axis);

    let mut pick_l = Array2::<f64>::zeros((b, 1));
    {
        let (yld, yvd, xld, xvd) = (yl.data(), yv.data(), xl.data(), xv.data());
        for i in 0..b {
            let li = (yld[[i, 0]], xld[[i, 0]]);
            let vi = (yvd[[i, 0]], xvd[[i, 0]]);
            if li >= vi {
                pick_l[[i, 0]] = 1.0;
            }
        }
    }
    let mask = tape.constant(pick_l.into_dyn());
    let x = Value::select(&mask, &xl, &xv);
    let y = Value::select(&mask, &yl, &yv);
    let phi_d = y.atan2(&x);

    let nl = dot1(n, l).data();
    let nv = dot1(n, v).data();
    let lvd = lv.data();
    let mut sm = Array2::<f64>::zeros((b, 1));
    for i in 0..b {
        if nl[[i, 0]] > 0.0 && nv[[i, 0]] > 0.0 && lvd[[i, 0]] > 0.0 {
            sm[[i, 0]] = 1.0;
        }
    }
    let sign_mask = tape.constant(sm.into_dyn());

    Ok(BrdfAngles {
        theta_h,
        theta_d,
        phi_d,
        sign_mask,
    })
}

/// Learned isotropic BRDF: a 3x16 relu MLP over the Rusinkiewicz angles
/// with an exponential output, so values stay positive. The output head
/// starts at zero, making the initial BRDF exactly Lambertian.
pub struct BrdfNet {
    tape: Tape,
    layers: Vec<(Value, Value)>,
    head: (Value, Value),
}

pub const BRDF_HIDDEN_LAYERS: usize = 3;
pub const BRDF_HIDDEN_WIDTH: usize = 16;

impl BrdfNet {
    pub fn new(tape: &Tape, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = 3usize;
        for _ in 0..BRDF_HIDDEN_LAYERS {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, BRDF_HIDDEN_WIDTH), |_| {
                rng.random_range(-bound..bound)
            });
            let b = Array2::<f64>::zeros((1, BRDF_HIDDEN_WIDTH));
            layers.push((
                tape.leaf(w.into_dyn()),
                tape.leaf(b.into_dyn()),
            ));
            fan_in = BRDF_HIDDEN_WIDTH;
        }
        let head = (
            tape.leaf(Array2::<f64>::zeros((BRDF_HIDDEN_WIDTH, 1)).into_dyn()),
            tape.leaf(Array2::<f64>::zeros((1, 1)).into_dyn()),
        );
        Self {
            tape: tape.clone(),
            layers,
            head,
        }
    }

    /// Positive BRDF multiplier for angle rows `[B, 3]` -> `[B, 1]`.
    pub fn forward(&self, angles: &Value) -> Value {
        let mut h = angles.clone();
        for (w, b) in &self.layers {
            h = h.matmul(w).add(b).relu();
        }
        h.matmul(&self.head.0).add(&self.head.1).exp()
    }

    pub fn params(&self) -> Vec<Value> {
        let mut p = Vec::new();
        for (w, b) in &self.layers {
            p.push(w.clone());
            p.push(b.clone());
        }
        p.push(self.head.0.clone());
        p.push(self.head.1.clone());
        p
    }

    /// Re-issues parameter handles after a tape truncation.
    pub fn rebind(&mut self) {
        for (w, b) in &mut self.layers {
            *w = self.tape.retain(w);
            *b = self.tape.retain(b);
        }
        self.head.0 = self.tape.retain(&self.head.0);
        self.head.1 = self.tape.retain(&self.head.1);
    }

    pub fn export_weights(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        let mut out = Vec::new();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("brdf.layer{k}.weight"), w.data()));
            out.push((format!("brdf.layer{k}.bias"), b.data()));
        }
        out.push(("brdf.head.weight".into(), self.head.0.data()));
        out.push(("brdf.head.bias".into(), self.head.1.data()));
        out
    }

    pub fn import_weights(
        &self,
        named: &[(String, ndarray::ArrayD<f64>)],
    ) -> Result<(), String> {
        let lookup = |name: &str| -> Result<&ndarray::ArrayD<f64>, String> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| format!("missing weight entry {name}"))
        };
        let mut targets: Vec<(String, &Value)> = Vec::new();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            targets.push((format!("brdf.layer{k}.weight"), w));
            targets.push((format!("brdf.layer{k}.bias"), b));
        }
        targets.push(("brdf.head.weight".into(), &self.head.0));
        targets.push(("brdf.head.bias".into(), &self.head.1));
        for (name, val) in targets {
            let arr = lookup(&name)?;
            if arr.shape() != val.shape().as_slice() {
                return Err(format!(
                    "weight {name}: shape {:?} does not match {:?}",
                    arr.shape(),
                    val.shape()
                ));
            }
            val.set_data(arr.clone());
        }
        Ok(())
    }
}

/// Masked BRDF value per Eq-style factoring: `mask * max(n.l, 0) *
/// MLP(theta_h, theta_d, phi_d)`, `[B, 1]`.
pub fn brdf_eval(net: &BrdfNet, angles: &BrdfAngles, n: &Value, l_hat: &Value) -> Value {
    let incident = dot1(n, l_hat).relu();
    angles
        .sign_mask
        .mul(&incident)
        .mul(&net.forward(&angles.stacked()))
}

/// Anything that can report surface heights (mm) at world-plane
/// coordinates (mm), for shadow marching.
pub trait HeightField {
    fn height_mm(&self, xy: &ArrayView2<'_, f64>) -> Array1<f64>;
}

impl HeightField for HeightmapNetwork {
    fn height_mm(&self, xy: &ArrayView2<'_, f64>) -> Array1<f64> {
        let f = self.coordinate_scale();
        let scaled = xy.mapv(|v| v * f);
        let (z, _) = self.query_plain(&scaled.view());
        z.mapv(|v| v / f)
    }
}

/// Closure adapter so analytic surfaces can serve as shadow height fields.
pub struct FnHeightField<F: Fn(f64, f64) -> f64>(pub F);

impl<F: Fn(f64, f64) -> f64> HeightField for FnHeightField<F> {
    fn height_mm(&self, xy: &ArrayView2<'_, f64>) -> Array1<f64> {
        Array1::from_iter(xy.rows().into_iter().map(|r| (self.0)(r[0], r[1])))
    }
}

/// How shadow queries participate in backpropagation.
pub enum ShadowQueries<'a> {
    /// No shadows: every point is fully lit.
    Off,
    /// Heights queried off-tape; only the marched points' own world heights
    /// stay differentiable. Cheap and the default during training.
    Detached(&'a dyn HeightField),
    /// Heights queried on-tape: gradients also reach the surface network
    /// weights through every shadow sample.
    Full(&'a HeightmapNetwork),
}

/// Differentiable cast-shadow term per point, `[B, 1]`; 1 = lit, 0 = in
/// shadow.
///
/// Marches 16 samples along the light direction starting 3mm out, queries
/// the height field under each sample, and converts the height differences
/// `d_h = z_field - z_sample` (negative = blocked) into occlusions
/// `sigmoid(-4 d_h)` combined by a smooth maximum.
pub fn soft_shadow(p: &Value, l_hat: &Value, queries: &ShadowQueries<'_>) -> Value {
    let tape = p.tape();
    let b = p.shape()[0];
    if matches!(queries, ShadowQueries::Off) {
        return tape.full_constant(&[b, 1], 1.0);
    }
    let mut occlusions = Vec::with_capacity(SHADOW_SAMPLES);
    for k in 0..SHADOW_SAMPLES {
        let dist = SHADOW_OFFSET_MM + k as f64 * SHADOW_STEP_MM;
        let pk = p.add(&l_hat.mul_s(dist));
        let zk = pk.slice_axis(1, 2, 3);
        let z_field = match queries {
            ShadowQueries::Off => unreachable!(),
            ShadowQueries::Detached(field) => {
                let data = pk.data();
                let d2 = data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xy = d2.slice(ndarray::s![.., 0..2]).to_owned();
                let z = field.height_mm(&xy.view());
                tape.constant(
                    z.into_shape_with_order(IxDyn(&[b, 1])).unwrap(),
                )
            }
            ShadowQueries::Full(net) => {
                let f = net.coordinate_scale();
                let xy = pk.slice_axis(1, 0, 2).mul_s(f);
                let (z, _) = net.query(&xy);
                z.mul_s(1.0 / f)
            }
        };
        let d_h = z_field.sub(&zk);
        occlusions.push(d_h.mul_s(-SHADOW_SIGMOID_SHARPNESS).sigmoid());
    }
    let o = Value::concat(&occlusions, 1);
    let weights = o.mul_s(SHADOW_SMOOTHMAX_GAMMA).softmax(1);
    let smooth_max = o.mul(&weights).sum_axis(1, true);
    smooth_max.neg().add_s(1.0)
}

/// Per-light rendered intensities `[B, M]` at composited surface points:
/// `i_m = shadow_m * attenuation_m * albedo * brdf(n, l_m, v)`.
///
/// The BRDF is evaluated only at the single composited point per ray, not
/// integrated along it. `v` points from the surface toward the camera and
/// is treated as constant per pixel (the point slides along that very ray).
pub fn render_intensity(
    p: &Value,
    n: &Value,
    albedo: &Value,
    v: &Value,
    lights: &[LightSource],
    brdf: &BrdfNet,
    shadows: &ShadowQueries<'_>,
) -> Result<Value, ShadingError> {
    let tape = p.tape();
    let mut per_light = Vec::with_capacity(lights.len());
    for light in lights {
        let (l_hat, a, _) = light_vectors_tape(tape, p, light);
        let angles = rusinkiewicz_angles(n, &l_hat, v)?;
        let f = brdf_eval(brdf, &angles, n, &l_hat);
        let s = soft_shadow(p, &l_hat, shadows);
        per_light.push(s.mul(&a).mul(albedo).mul(&f));
    }
    Ok(Value::concat(&per_light, 1))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffmath::fd;

    fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn rows(tape: &Tape, rows: &[[f64; 3]]) -> Value {
        let mut a = Array2::<f64>::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            for c in 0..3 {
                a[[i, c]] = r[c];
            }
        }
        tape.constant(a.into_dyn())
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = v3(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn light_validation_rejects_bad_fields() {
        assert!(matches!(
            LightSource::new(v3(0.0, 0.0, 0.0), 1.0, v3(0.0, 0.0, 2.0), 0.0),
            Err(ShadingError::NonUnitPrincipalDir { .. })
        ));
        assert!(matches!(
            LightSource::new(v3(0.0, 0.0, 0.0), 0.0, v3(0.0, 0.0, 1.0), 0.0),
            Err(ShadingError::NonPositiveBrightness { .. })
        ));
        assert!(matches!(
            LightSource::new(v3(0.0, 0.0, 0.0), 1.0, v3(0.0, 0.0, 1.0), -0.5),
            Err(ShadingError::NegativeDissipation { .. })
        ));
    }

    #[test]
    fn attenuation_is_pure_inverse_square_without_dissipation() {
        let light = LightSource::new(v3(0.0, 0.0, 0.0), 1.0, v3(0.0, 0.0, 1.0), 0.0).unwrap();
        let (_, _, a) = light_vectors(&v3(0.0, 60.0, 80.0), &light).unwrap();
        assert_abs_diff_eq!(a, 1e-4, epsilon = 1e-18);
    }

    #[test]
    fn attenuation_aligned_led_matches_hand_value() {
        // LED at origin aimed straight at the point 200mm away.
        let light = LightSource::new(v3(0.0, 0.0, 0.0), 1.0, v3(0.0, 0.0, 1.0), 2.0).unwrap();
        let (_, _, a) = light_vectors(&v3(0.0, 0.0, 200.0), &light).unwrap();
        assert_abs_diff_eq!(a, 2.5e-5, epsilon = 1e-18);
    }

    #[test]
    fn point_at_light_is_an_error() {
        let light = LightSource::new(v3(1.0, 2.0, 3.0), 1.0, v3(0.0, 0.0, 1.0), 0.0).unwrap();
        assert!(matches!(
            light_vectors(&v3(1.0, 2.0, 3.0), &light),
            Err(ShadingError::PointAtLight { .. })
        ));
    }

    #[test]
    fn attenuation_matches_independent_recomputation_at_probes() {
        let light = LightSource::new(
            v3(120.0, 0.0, -170.0),
            2.7,
            v3(-0.5547001962252291, 0.0, 0.8320502943378437),
            1.5,
        )
        .unwrap();
        let probes = [
            v3(0.0, 0.0, 0.0),
            v3(10.0, -20.0, 3.0),
            v3(-35.0, 12.0, -1.0),
            v3(5.0, 44.0, 7.0),
            v3(-18.0, -9.0, 2.5),
        ];
        for p in probes {
            let (_, _, a) = light_vectors(&p, &light).unwrap();
            // Straight-line recomputation from raw components.
            let (lx, ly, lz) = (120.0 - p.x, 0.0 - p.y, -170.0 - p.z);
            let d2 = lx * lx + ly * ly + lz * lz;
            let d = d2.sqrt();
            let cos = (-lx / d) * light.principal_dir.x
                + (-ly / d) * light.principal_dir.y
                + (-lz / d) * light.principal_dir.z;
            let expect = 2.7 * cos.max(0.0).powf(1.5) / d2;
            assert_abs_diff_eq!(a, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn attenuation_decreases_with_distance() {
        let light = LightSource::new(v3(0.0, 0.0, 0.0), 3.0, v3(0.0, 0.0, 1.0), 1.2).unwrap();
        let dir = v3(0.2, -0.1, 1.0).normalize();
        let mut prev = f64::INFINITY;
        for k in 1..40 {
            let p = dir * (20.0 + 10.0 * k as f64);
            let (_, _, a) = light_vectors(&p, &light).unwrap();
            assert!(a < prev, "attenuation rose from {prev} to {a}");
            prev = a;
        }
    }

    #[test]
    fn tape_attenuation_matches_plain() {
        let tape = Tape::new();
        let light = LightSource::new(v3(80.0, -40.0, -150.0), 1.9, v3(0.0, 0.4, 0.6_f64.sqrt()).normalize(), 2.3)
            .unwrap();
        let pts = [[0.0, 0.0, 0.0], [12.0, 7.0, -3.0], [-25.0, 14.0, 6.0]];
        let p = rows(&tape, &pts);
        let (l_hat, a, _) = light_vectors_tape(&tape, &p, &light);
        for (i, pt) in pts.iter().enumerate() {
            let (_, lh, ap) = light_vectors(&v3(pt[0], pt[1], pt[2]), &light).unwrap();
            assert_abs_diff_eq!(a.data()[[i, 0]], ap, epsilon = 1e-12);
            for c in 0..3 {
                assert_abs_diff_eq!(l_hat.data()[[i, c]], lh[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn retro_reflection_has_zero_half_angles() {
        let tape = Tape::new();
        let z = [[0.0, 0.0, 1.0]];
        let angles = rusinkiewicz_angles(&rows(&tape, &z), &rows(&tape, &z), &rows(&tape, &z))
            .unwrap();
        // The guarded normalization leaves |h| = 1 - O(1e-13), which the
        // acos near 1 amplifies to sqrt-scale; 1e-5 rad = 0.0006 degrees.
        assert_abs_diff_eq!(angles.theta_h.data()[[0, 0]], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(angles.theta_d.data()[[0, 0]], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(angles.sign_mask.data()[[0, 0]], 1.0, epsilon = 0.0);
    }

    #[test]
    fn mirror_configuration_gives_quarter_pi_difference_angle() {
        let tape = Tape::new();
        let s = 2f64.sqrt() / 2.0;
        let n = rows(&tape, &[[0.0, 0.0, 1.0]]);
        let l = rows(&tape, &[[0.0, s, s]]);
        let v = rows(&tape, &[[0.0, -s, s]]);
        let angles = rusinkiewicz_angles(&n, &l, &v).unwrap();
        assert_abs_diff_eq!(angles.theta_h.data()[[0, 0]], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(
            angles.theta_d.data()[[0, 0]],
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-9
        );
        // l.v = 0 exactly here, so the validity mask is 0 by the strict
        // positivity rule.
        assert_abs_diff_eq!(angles.sign_mask.data()[[0, 0]], 0.0, epsilon = 0.0);
    }

    #[test]
    fn non_unit_inputs_are_rejected() {
        let tape = Tape::new();
        let ok = rows(&tape, &[[0.0, 0.0, 1.0]]);
        let bad = rows(&tape, &[[0.0, 0.0, 1.1]]);
        assert!(matches!(
            rusinkiewicz_angles(&bad, &ok, &ok),
            Err(ShadingError::NonUnitInput { which: "normal", .. })
        ));
    }

    /// Valid random configuration: all three pairwise dots positive.
    fn random_valid_triple(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3], [f64; 3]) {
        loop {
            let n = random_unit(rng);
            let l = random_unit(rng);
            let v = random_unit(rng);
            if n.dot(&l) > 1e-3 && n.dot(&v) > 1e-3 && l.dot(&v) > 1e-3 {
                return ([n.x, n.y, n.z], [l.x, l.y, l.z], [v.x, v.y, v.z]);
            }
        }
    }

    #[test]
    fn swapping_light_and_view_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..1000 {
            let (n, l, v) = random_valid_triple(&mut rng);
            let tape = Tape::new();
            let (nn, ll, vv) = (rows(&tape, &[n]), rows(&tape, &[l]), rows(&tape, &[v]));
            let fwd = rusinkiewicz_angles(&nn, &ll, &vv).unwrap();
            let swp = rusinkiewicz_angles(&nn, &vv, &ll).unwrap();
            assert_eq!(
                fwd.theta_h.data()[[0, 0]].to_bits(),
                swp.theta_h.data()[[0, 0]].to_bits()
            );
            assert_eq!(
                fwd.theta_d.data()[[0, 0]].to_bits(),
                swp.theta_d.data()[[0, 0]].to_bits()
            );
            assert_eq!(
                fwd.phi_d.data()[[0, 0]].to_bits(),
                swp.phi_d.data()[[0, 0]].to_bits()
            );
            assert_eq!(
                fwd.sign_mask.data()[[0, 0]].to_bits(),
                swp.sign_mask.data()[[0, 0]].to_bits()
            );
        }
    }

    #[test]
    fn difference_azimuth_stays_in_half_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..500 {
            let (n, l, v) = random_valid_triple(&mut rng);
            let tape = Tape::new();
            let angles = rusinkiewicz_angles(
                &rows(&tape, &[n]),
                &rows(&tape, &[l]),
                &rows(&tape, &[v]),
            )
            .unwrap();
            let phi = angles.phi_d.data()[[0, 0]];
            assert!(
                (0.0..std::f64::consts::PI).contains(&phi),
                "phi_d {phi} outside [0, pi)"
            );
            let th = angles.theta_h.data()[[0, 0]];
            let td = angles.theta_d.data()[[0, 0]];
            assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-9).contains(&th));
            assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-9).contains(&td));
        }
    }

    #[test]
    fn sign_mask_zeroes_each_failing_dot() {
        let tape = Tape::new();
        let s = 2f64.sqrt() / 2.0;
        // n.l < 0; n.v < 0; l.v < 0 respectively.
        let cases = [
            ([0.0, 0.0, 1.0], [0.0, s, -s], [0.0, 0.0, 1.0]),
            ([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [s, 0.0, -s]),
            ([0.0, 0.0, 1.0], [0.99, 0.0, (1.0f64 - 0.99 * 0.99).sqrt()], [
                -0.99,
                0.0,
                (1.0f64 - 0.99 * 0.99).sqrt(),
            ]),
        ];
        for (n, l, v) in cases {
            let angles = rusinkiewicz_angles(
                &rows(&tape, &[n]),
                &rows(&tape, &[l]),
                &rows(&tape, &[v]),
            )
            .unwrap();
            assert_eq!(angles.sign_mask.data()[[0, 0]], 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let net = BrdfNet::new(&tape, &mut rng);
            let val = brdf_eval(&net, &angles, &rows(&tape, &[n]), &rows(&tape, &[l]));
            assert_eq!(val.data()[[0, 0]], 0.0, "masked BRDF must be exactly 0");
        }
    }

    #[test]
    fn fresh_brdf_net_is_exactly_lambertian() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = BrdfNet::new(&tape, &mut rng);
        let mut trip_rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (n, l, v) = random_valid_triple(&mut trip_rng);
            let (nn, ll, vv) = (rows(&tape, &[n]), rows(&tape, &[l]), rows(&tape, &[v]));
            let angles = rusinkiewicz_angles(&nn, &ll, &vv).unwrap();
            let out = net.forward(&angles.stacked());
            assert_eq!(out.data()[[0, 0]], 1.0, "zero head must give exp(0) = 1");
            assert!((0.1..=10.0).contains(&out.data()[[0, 0]]));
            let val = brdf_eval(&net, &angles, &nn, &ll);
            let ndl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
            assert_abs_diff_eq!(val.data()[[0, 0]], ndl.max(0.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn brdf_weight_gradients_match_finite_differences() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = BrdfNet::new(&tape, &mut rng);
        // Nudge the head off zero so the exp has non-trivial gradients.
        let mut head = Array2::<f64>::zeros((BRDF_HIDDEN_WIDTH, 1));
        for (i, v) in head.iter_mut().enumerate() {
            *v = 0.02 * (i as f64 - 8.0);
        }
        net.params()[6].set_data(head.into_dyn());

        let mut trip_rng = ChaCha8Rng::seed_from_u64(17);
        let mut triples = Vec::new();
        for _ in 0..4 {
            triples.push(random_valid_triple(&mut trip_rng));
        }
        let ns: Vec<[f64; 3]> = triples.iter().map(|t| t.0).collect();
        let ls: Vec<[f64; 3]> = triples.iter().map(|t| t.1).collect();
        let vs: Vec<[f64; 3]> = triples.iter().map(|t| t.2).collect();

        let flat0: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.data().iter().copied().collect::<Vec<_>>())
            .collect();
        let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape()).collect();

        let eval = |flat: &[f64]| -> f64 {
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let net2 = BrdfNet::new(&tape, &mut rng);
            let mut off = 0;
            for (p, shape) in net2.params().iter().zip(&shapes) {
                let n: usize = shape.iter().product();
                p.set_data(
                    ArrayD::from_shape_vec(IxDyn(shape), flat[off..off + n].to_vec()).unwrap(),
                );
                off += n;
            }
            let (nn, ll, vv) = (rows(&tape, &ns), rows(&tape, &ls), rows(&tape, &vs));
            let angles = rusinkiewicz_angles(&nn, &ll, &vv).unwrap();
            brdf_eval(&net2, &angles, &nn, &ll).sum_all().scalar()
        };

        let (nn, ll, vv) = (rows(&tape, &ns), rows(&tape, &ls), rows(&tape, &vs));
        let angles = rusinkiewicz_angles(&nn, &ll, &vv).unwrap();
        let loss = brdf_eval(&net, &angles, &nn, &ll).sum_all();
        tape.backward(&loss);
        let analytic: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.grad().iter().copied().collect::<Vec<_>>())
            .collect();
        let numeric = fd::central_diff4(eval, &flat0, 1e-4);
        let err = fd::max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "brdf weight gradient rel err {err:.3e}");
    }

    /// Brute-force shadow oracle: march toward the light in 0.05mm steps,
    /// shadowed if the analytic surface ever rises above the ray.
    fn brute_shadowed(
        surface: &dyn Fn(f64, f64) -> f64,
        p: Vector3<f64>,
        light_pos: Vector3<f64>,
    ) -> bool {
        let l = light_pos - p;
        let total = l.norm();
        let dir = l / total;
        let mut t = 0.05;
        while t < total - 0.05 {
            let q = p + dir * t;
            if surface(q.x, q.y) < q.z - 1e-9 {
                return true;
            }
            t += 0.05;
        }
        false
    }

    fn step_wall(x: f64, _y: f64) -> f64 {
        // 10mm wall for x >= 0 (smaller z = closer to the lights = taller).
        if x >= 0.0 {
            -10.0
        } else {
            0.0
        }
    }

    #[test]
    fn flat_plane_with_overhead_light_is_unshadowed() {
        let tape = Tape::new();
        let field = FnHeightField(|_, _| 0.0f64);
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                pts.push([i as f64 * 5.0 - 17.5, j as f64 * 5.0 - 17.5, 0.0]);
            }
        }
        let p = rows(&tape, &pts);
        // Light straight above (toward the cameras): -z direction.
        let l_hat = rows(&tape, &vec![[0.0, 0.0, -1.0]; pts.len()]);
        let s = soft_shadow(&p, &l_hat, &ShadowQueries::Detached(&field));
        for i in 0..pts.len() {
            assert!(s.data()[[i, 0]] > 0.99, "lit plane point got {}", s.data()[[i, 0]]);
        }
    }

    #[test]
    fn step_wall_shadows_match_brute_force_marching() {
        let tape = Tape::new();
        // Light on the raised side at ~30 degrees elevation, so the wall
        // shades the whole floor strip (shadow length ~19mm > 16mm extent).
        let light_pos = v3(200.0, 0.0, -115.5);
        let field = FnHeightField(step_wall);

        let mut pts = Vec::new();
        for i in 0..64 {
            for j in 0..64 {
                let x = -16.0 + 32.0 * (i as f64 + 0.5) / 64.0;
                let y = -16.0 + 32.0 * (j as f64 + 0.5) / 64.0;
                pts.push([x, y, step_wall(x, y)]);
            }
        }
        let p = rows(&tape, &pts);
        let dirs: Vec<[f64; 3]> = pts
            .iter()
            .map(|q| {
                let d = (light_pos - v3(q[0], q[1], q[2])).normalize();
                [d.x, d.y, d.z]
            })
            .collect();
        let l_hat = rows(&tape, &dirs);
        let s = soft_shadow(&p, &l_hat, &ShadowQueries::Detached(&field));

        let mut agree = 0usize;
        for (i, q) in pts.iter().enumerate() {
            let soft_shadowed = s.data()[[i, 0]] < 0.5;
            let hard = brute_shadowed(&|x, y| step_wall(x, y), v3(q[0], q[1], q[2]), light_pos);
            if soft_shadowed == hard {
                agree += 1;
            }
        }
        let frac = agree as f64 / pts.len() as f64;
        assert!(
            frac >= 0.95,
            "soft/hard shadow agreement only {frac:.3} on the step wall"
        );
        // The geometry must actually contain both shadowed and lit points.
        let hard_count = pts
            .iter()
            .filter(|q| brute_shadowed(&|x, y| step_wall(x, y), v3(q[0], q[1], q[2]), light_pos))
            .count();
        assert!(hard_count > 200 && hard_count < 4000, "degenerate scene: {hard_count}");
    }

    #[test]
    fn growing_occluder_flips_lit_to_shadowed() {
        // The sample-weighted smooth maximum is not strictly monotone in
        // the occluder height (a mid-valued sample can briefly steal
        // softmax weight), so assert the endpoints and the range instead.
        let tape = Tape::new();
        let p = rows(&tape, &[[5.0, 0.0, 0.0]]);
        let l_hat = rows(&tape, &[[-(2f64.sqrt() / 2.0), 0.0, -(2f64.sqrt() / 2.0)]]);
        let mut values = Vec::new();
        for wall in 0..=20 {
            let h = wall as f64;
            let field = FnHeightField(move |x: f64, _y: f64| if x < 0.0 { -h } else { 0.0 });
            let s = soft_shadow(&p, &l_hat, &ShadowQueries::Detached(&field));
            let val = s.data()[[0, 0]];
            assert!((0.0..=1.0).contains(&val), "shadow term {val} outside [0, 1]");
            values.push(val);
        }
        assert!(values[0] > 0.99, "no wall must stay lit, got {}", values[0]);
        assert!(
            values[20] < 0.05,
            "20mm wall must shadow the point, got {}",
            values[20]
        );
    }

    #[test]
    fn scaling_unoccluded_geometry_keeps_it_lit() {
        // A point on a gentle slope with the light well above stays lit
        // when the whole configuration is scaled up.
        let tape = Tape::new();
        for scale in [1.0, 2.0] {
            let field = FnHeightField(|x: f64, _y: f64| 0.1 * x);
            let p = rows(&tape, &[[3.0 * scale, -2.0 * scale, 0.3 * scale]]);
            let l_hat = rows(&tape, &[[0.3, 0.1, -0.9486832980505138]]).normalize_last();
            let s = soft_shadow(&p, &l_hat, &ShadowQueries::Detached(&field));
            assert!(s.data()[[0, 0]] > 0.99, "scale {scale} dimmed to {}", s.data()[[0, 0]]);
        }
    }

    #[test]
    fn lambertian_render_matches_hand_formula() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let brdf = BrdfNet::new(&tape, &mut rng);
        let mut cfg_rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let px = cfg_rng.random_range(-30.0..30.0);
            let py = cfg_rng.random_range(-30.0..30.0);
            let p = rows(&tape, &[[px, py, 0.0]]);
            let n_vec = {
                let mut n = random_unit(&mut cfg_rng);
                if n.z > -0.3 {
                    n = v3(n.x * 0.2, n.y * 0.2, -1.0).normalize();
                }
                n
            };
            let n = rows(&tape, &[[n_vec.x, n_vec.y, n_vec.z]]);
            let v = rows(&tape, &[[0.0, 0.0, -1.0]]);
            let albedo = tape.full_constant(&[1, 1], 0.73);
            let phi = cfg_rng.random_range(0.5..3.0);
            let light = LightSource::new(
                v3(
                    cfg_rng.random_range(-100.0..100.0),
                    cfg_rng.random_range(-100.0..100.0),
                    -170.0,
                ),
                phi,
                v3(0.0, 0.0, 1.0),
                0.0,
            )
            .unwrap();
            let out = render_intensity(
                &p,
                &n,
                &albedo,
                &v,
                std::slice::from_ref(&light),
                &brdf,
                &ShadowQueries::Off,
            )
            .unwrap();

            let lv = light.position - v3(px, py, 0.0);
            let dist2 = lv.norm_squared();
            let l_hat = lv / dist2.sqrt();
            let ndl = n_vec.dot(&l_hat);
            let ndv = n_vec.dot(&v3(0.0, 0.0, -1.0));
            let vdl = v3(0.0, 0.0, -1.0).dot(&l_hat);
            let expect = if ndl > 0.0 && ndv > 0.0 && vdl > 0.0 {
                0.73 * phi * ndl / dist2
            } else {
                0.0
            };
            assert_abs_diff_eq!(out.data()[[0, 0]], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn back_facing_light_renders_zero() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let brdf = BrdfNet::new(&tape, &mut rng);
        let p = rows(&tape, &[[0.0, 0.0, 0.0]]);
        let n = rows(&tape, &[[0.0, 0.0, -1.0]]);
        let v = rows(&tape, &[[0.0, 0.0, -1.0]]);
        let albedo = tape.full_constant(&[1, 1], 0.5);
        // Light behind the surface (larger z than the point).
        let light =
            LightSource::new(v3(0.0, 0.0, 120.0), 1.0, v3(0.0, 0.0, -1.0), 0.0).unwrap();
        let out = render_intensity(
            &p,
            &n,
            &albedo,
            &v,
            std::slice::from_ref(&light),
            &brdf,
            &ShadowQueries::Off,
        )
        .unwrap();
        assert_eq!(out.data()[[0, 0]], 0.0);
    }

    #[test]
    fn full_shadow_kills_the_intensity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let brdf = BrdfNet::new(&tape, &mut rng);
        // Point in a deep trench; light at a low angle behind a 40mm wall.
        let field = FnHeightField(|x: f64, _y: f64| if x < -2.0 { -40.0 } else { 0.0 });
        let p = rows(&tape, &[[0.0, 0.0, 0.0]]);
        let n = rows(&tape, &[[0.0, 0.0, -1.0]]);
        let v = rows(&tape, &[[0.0, 0.0, -1.0]]);
        let albedo = tape.full_constant(&[1, 1], 0.5);
        let light =
            LightSource::new(v3(-300.0, 0.0, -30.0), 1.0, v3(1.0, 0.0, 0.0), 0.0).unwrap();
        let lit = render_intensity(
            &p,
            &n,
            &albedo,
            &v,
            std::slice::from_ref(&light),
            &brdf,
            &ShadowQueries::Off,
        )
        .unwrap();
        let shadowed = render_intensity(
            &p,
            &n,
            &albedo,
            &v,
            std::slice::from_ref(&light),
            &brdf,
            &ShadowQueries::Detached(&field),
        )
        .unwrap();
        let ratio = shadowed.data()[[0, 0]] / lit.data()[[0, 0]];
        assert!(ratio <= 1e-3, "shadowed/unshadowed ratio {ratio}");
    }

    #[test]
    fn render_gradients_reach_brdf_weights() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let brdf = BrdfNet::new(&tape, &mut rng);
        let mut head = Array2::<f64>::zeros((BRDF_HIDDEN_WIDTH, 1));
        for (i, v) in head.iter_mut().enumerate() {
            *v = 0.01 * (i as f64 - 7.5);
        }
        brdf.params()[6].set_data(head.into_dyn());

        let lights = vec![
            LightSource::new(v3(100.0, 0.0, -170.0), 1.5, v3(0.0, 0.0, 1.0), 0.0).unwrap(),
            LightSource::new(v3(-80.0, 60.0, -170.0), 2.0, v3(0.0, 0.0, 1.0), 1.0).unwrap(),
        ];
        let pts = [[0.0, 0.0, 0.0], [8.0, -5.0, 1.0], [-6.0, 3.0, -0.5]];
        let normals = [
            [0.1, 0.0, -0.99498743710662],
            [0.0, 0.0, -1.0],
            [-0.1, 0.1, -0.98994949366117],
        ];

        let shapes: Vec<Vec<usize>> = brdf.params().iter().map(|p| p.shape()).collect();
        let flat0: Vec<f64> = brdf
            .params()
            .iter()
            .flat_map(|p| p.data().iter().copied().collect::<Vec<_>>())
            .collect();

        let run = |net: &BrdfNet, tape: &Tape| -> Value {
            let p = rows(tape, &pts);
            let n = rows(tape, &normals).normalize_last();
            let v = rows(tape, &[[0.0, 0.0, -1.0]; 3]);
            let albedo = tape.full_constant(&[3, 1], 0.6);
            render_intensity(&p, &n, &albedo, &v, &lights, net, &ShadowQueries::Off)
                .unwrap()
                .sum_all()
        };

        let eval = |flat: &[f64]| -> f64 {
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(37);
            let net2 = BrdfNet::new(&tape, &mut rng);
            let mut off = 0;
            for (p, shape) in net2.params().iter().zip(&shapes) {
                let n: usize = shape.iter().product();
                p.set_data(
                    ArrayD::from_shape_vec(IxDyn(shape), flat[off..off + n].to_vec()).unwrap(),
                );
                off += n;
            }
            run(&net2, &tape).scalar()
        };

        let loss = run(&brdf, &tape);
        tape.backward(&loss);
        let analytic: Vec<f64> = brdf
            .params()
            .iter()
            .flat_map(|p| p.grad().iter().copied().collect::<Vec<_>>())
            .collect();
        let numeric = fd::central_diff4(eval, &flat0, 1e-5);
        let err = fd::max_rel_err(&analytic, &numeric, 1e-7);
        assert!(err < 1e-4, "render gradient rel err {err:.3e}");
    }

    #[test]
    fn brdf_weight_export_import_round_trips() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let net = BrdfNet::new(&tape, &mut rng);
        let mut head = Array2::<f64>::zeros((BRDF_HIDDEN_WIDTH, 1));
        head[[0, 0]] = 0.37;
        net.params()[6].set_data(head.into_dyn());
        let exported = net.export_weights();

        let tape2 = Tape::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let net2 = BrdfNet::new(&tape2, &mut rng2);
        net2.import_weights(&exported).unwrap();
        let angles = [[0.3, 0.5, 1.2]];
        let a1 = tape.constant(Array2::from_shape_vec((1, 3), angles[0].to_vec()).unwrap().into_dyn());
        let a2 = tape2.constant(Array2::from_shape_vec((1, 3), angles[0].to_vec()).unwrap().into_dyn());
        assert_eq!(
            net.forward(&a1).data()[[0, 0]].to_bits(),
            net2.forward(&a2).data()[[0, 0]].to_bits()
        );
    }
}
