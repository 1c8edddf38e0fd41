//! The neural surface: a sinusoidal coordinate network mapping world-plane
//! coordinates (x, y) to a height z and a scalar albedo.
//!
//! Normals come from the input derivatives of the height channel,
//! `n ∝ [∂F/∂x, ∂F/∂y, −1]`, computed by a forward (dual-number) pass whose
//! tangent components are themselves tape values, so a loss on normals
//! backpropagates into the network weights.
//!
//! The network operates in normalized units: world millimeters times
//! `coordinate_scale` (default 1/100). Slopes are invariant under that
//! uniform scaling, so normals computed in normalized units are valid in
//! millimeter space.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use rand::{Rng, RngExt};

use crate::diffmath::{Tape, Value};

/// Millimeters-to-normalized-units factor suited to scenes 150..200mm away.
pub const DEFAULT_COORD_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SirenConfig {
    /// Number of sine layers, including the first.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// First-layer frequency; folded into the stored first-layer weights.
    pub first_layer_frequency: f64,
    /// Frequency of the deeper sine layers, applied at forward time.
    pub hidden_frequency: f64,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig {
            hidden_layers: 5,
            hidden_width: 512,
            first_layer_frequency: 50.0,
            hidden_frequency: 30.0,
            input_dim: 2,
            output_dim: 2,
        }
    }
}

impl SirenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_layers < 1 {
            return Err(format!("siren config: hidden_layers must be >= 1, got {}", self.hidden_layers));
        }
        if self.hidden_width < 1 {
            return Err(format!("siren config: hidden_width must be >= 1, got {}", self.hidden_width));
        }
        if !(self.first_layer_frequency > 0.0) || !(self.hidden_frequency > 0.0) {
            return Err(format!(
                "siren config: frequencies must be positive, got ({}, {})",
                self.first_layer_frequency, self.hidden_frequency
            ));
        }
        if self.input_dim != 2 || self.output_dim != 2 {
            return Err(format!(
                "siren config: expected 2 inputs (x, y) and 2 outputs (z, albedo), got ({}, {})",
                self.input_dim, self.output_dim
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut total = self.input_dim * self.hidden_width + self.hidden_width;
        total += (self.hidden_layers - 1) * (self.hidden_width * self.hidden_width + self.hidden_width);
        total += self.hidden_width * self.output_dim + self.output_dim;
        total
    }
}

/// One differentiable surface query: height, albedo, slopes, unit normal.
/// Heights and slopes are in normalized units; the normal is unit-norm and
/// valid in millimeter space as well.
pub struct SurfaceSample {
    pub z: Value,
    pub albedo: Value,
    pub dzdx: Value,
    pub dzdy: Value,
    pub normal: Value,
}

pub struct HeightmapNetwork {
    tape: Tape,
    cfg: SirenConfig,
    coordinate_scale: f64,
    /// Sine layers: (weight [in, out], bias [out]).
    layers: Vec<(Value, Value)>,
    head: (Value, Value),
    /// Softplus offset making the initial albedo sit at 0.5.
    albedo_bias: f64,
}

impl HeightmapNetwork {
    pub fn new(tape: &Tape, cfg: SirenConfig, coordinate_scale: f64, rng: &mut impl Rng) -> Self {
        cfg.validate().expect("siren config invalid");
        assert!(
            coordinate_scale > 0.0,
            "heightmap: coordinate scale must be positive, got {coordinate_scale}"
        );
        fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<f64> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product agree")
        }

        let mut layers = Vec::with_capacity(cfg.hidden_layers);
        for k in 0..cfg.hidden_layers {
            let fan_in = if k == 0 { cfg.input_dim } else { cfg.hidden_width };
            let (wb, bb, scale) = if k == 0 {
                // First layer: weights and bias drawn at the SIREN first-layer
                // range, then pre-scaled by the first-layer frequency.
                (
                    1.0 / fan_in as f64,
                    1.0 / (fan_in as f64).sqrt(),
                    cfg.first_layer_frequency,
                )
            } else {
                (
                    (6.0 / fan_in as f64).sqrt() / cfg.hidden_frequency,
                    1.0 / (fan_in as f64).sqrt(),
                    1.0,
                )
            };
            let w = uniform(rng, &[fan_in, cfg.hidden_width], wb).mapv(|v| v * scale);
            let b = uniform(rng, &[cfg.hidden_width], bb).mapv(|v| v * scale);
            layers.push((tape.leaf(w), tape.leaf(b)));
        }
        let hb = (6.0 / cfg.hidden_width as f64).sqrt() / cfg.hidden_frequency;
        let head_w = uniform(rng, &[cfg.hidden_width, cfg.output_dim], hb);
        let head_b = ArrayD::zeros(IxDyn(&[cfg.output_dim]));
        let head = (tape.leaf(head_w), tape.leaf(head_b));

        HeightmapNetwork {
            tape: tape.clone(),
            cfg,
            coordinate_scale,
            layers,
            head,
            // softplus(albedo_bias) = 0.5
            albedo_bias: (0.5f64.exp() - 1.0).ln(),
        }
    }

    pub fn config(&self) -> &SirenConfig {
        &self.cfg
    }

    pub fn coordinate_scale(&self) -> f64 {
        self.coordinate_scale
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn params(&self) -> Vec<Value> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 2);
        for (w, b) in &self.layers {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.head.0.clone());
        out.push(self.head.1.clone());
        out
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Re-issues parameter handles after a tape truncation.
    pub fn rebind(&mut self) {
        for (w, b) in self.layers.iter_mut() {
            *w = self.tape.retain(w);
            *b = self.tape.retain(b);
        }
        self.head.0 = self.tape.retain(&self.head.0);
        self.head.1 = self.tape.retain(&self.head.1);
    }

    /// Named weight arrays in a stable order, for checkpoints.
    pub fn export_weights(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("surface.layer{k}.weight"), w.data()));
            out.push((format!("surface.layer{k}.bias"), b.data()));
        }
        out.push(("surface.head.weight".into(), self.head.0.data()));
        out.push(("surface.head.bias".into(), self.head.1.data()));
        out
    }

    /// Restores weights exported by [`HeightmapNetwork::export_weights`].
    pub fn import_weights(&self, named: &[(String, ArrayD<f64>)]) -> Result<(), String> {
        let mut map: std::collections::BTreeMap<&str, &ArrayD<f64>> =
            named.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut take = |name: String, target: &Value| -> Result<(), String> {
            let arr = map
                .remove(name.as_str())
                .ok_or_else(|| format!("checkpoint is missing weight array {name}"))?;
            if arr.shape() != target.data().shape() {
                return Err(format!(
                    "weight {name}: shape {:?} does not match configured {:?}",
                    arr.shape(),
                    target.data().shape()
                ));
            }
            target.set_data(arr.clone());
            Ok(())
        };
        for (k, (w, b)) in self.layers.iter().enumerate() {
            take(format!("surface.layer{k}.weight"), w)?;
            take(format!("surface.layer{k}.bias"), b)?;
        }
        take("surface.head.weight".into(), &self.head.0)?;
        take("surface.head.bias".into(), &self.head.1)?;
        Ok(())
    }

    fn check_points(points: &ArrayD<f64>, ndim: usize) {
        assert!(
            points.ndim() == 2 && points.shape()[1] == ndim,
            "heightmap query: expected points of shape [N, {ndim}], got {:?}",
            points.shape()
        );
        assert!(
            points.iter().all(|v| v.is_finite()),
            "heightmap query: non-finite input coordinate"
        );
    }

    /// Height and albedo at `points` (normalized units, shape [N, 2]).
    /// Differentiable in both the points and the weights.
    pub fn query(&self, points: &Value) -> (Value, Value) {
        Self::check_points(&points.data(), self.cfg.input_dim);
        let mut h = points.clone();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let pre = h.matmul(w).add(b);
            let pre = if k == 0 {
                pre
            } else {
                pre.mul_s(self.cfg.hidden_frequency)
            };
            h = pre.sin();
        }
        let out = h.matmul(&self.head.0).add(&self.head.1);
        let z = out.slice_axis(1, 0, 1);
        let albedo = out.slice_axis(1, 1, 2).add_s(self.albedo_bias).softplus();
        (z, albedo)
    }

    /// Height, albedo, slopes, and unit normal at `points` [N, 2]. The slope
    /// computation stays on the tape, so losses on normals reach the weights.
    pub fn query_with_normals(&self, points: &Value) -> SurfaceSample {
        let pts = points.data();
        Self::check_points(&pts, self.cfg.input_dim);
        let n = pts.shape()[0];
        let tape = &self.tape;

        let mut tangent_seed_x = Array2::<f64>::zeros((n, 2));
        tangent_seed_x.column_mut(0).fill(1.0);
        let mut tangent_seed_y = Array2::<f64>::zeros((n, 2));
        tangent_seed_y.column_mut(1).fill(1.0);

        let mut h = points.clone();
        let mut tx = tape.constant(tangent_seed_x.into_dyn());
        let mut ty = tape.constant(tangent_seed_y.into_dyn());
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let omega = if k == 0 { 1.0 } else { self.cfg.hidden_frequency };
            let pre = h.matmul(w).add(b);
            let pre = if k == 0 { pre } else { pre.mul_s(omega) };
            let c = pre.cos();
            let scale = |t: Value| if k == 0 { t } else { t.mul_s(omega) };
            tx = scale(tx.matmul(w)).mul(&c);
            ty = scale(ty.matmul(w)).mul(&c);
            h = pre.sin();
        }
        let out = h.matmul(&self.head.0).add(&self.head.1);
        let dout_dx = tx.matmul(&self.head.0);
        let dout_dy = ty.matmul(&self.head.0);

        let z = out.slice_axis(1, 0, 1);
        let albedo = out.slice_axis(1, 1, 2).add_s(self.albedo_bias).softplus();
        let dzdx = dout_dx.slice_axis(1, 0, 1);
        let dzdy = dout_dy.slice_axis(1, 0, 1);
        let minus_one = tape.full_constant(&[n, 1], -1.0);
        let normal = Value::concat(&[dzdx.clone(), dzdy.clone(), minus_one], 1).normalize_last();
        SurfaceSample {
            z,
            albedo,
            dzdx,
            dzdy,
            normal,
        }
    }

    /// Off-tape forward pass for bulk evaluation (no gradients recorded).
    pub fn query_plain(&self, points: &ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
        let (z, albedo, _, _) = self.forward_plain(points, false);
        (z, albedo)
    }

    /// Off-tape forward pass with normals via the same dual-number scheme.
    /// Returns (z, albedo, normals [N,3]).
    pub fn normals_plain(&self, points: &ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let (z, albedo, dzdx, dzdy) = self.forward_plain(points, true);
        let n = points.nrows();
        let mut normals = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            let g = nalgebra::Vector3::new(dzdx[i], dzdy[i], -1.0).normalize();
            normals[[i, 0]] = g.x;
            normals[[i, 1]] = g.y;
            normals[[i, 2]] = g.z;
        }
        (z, albedo, normals)
    }

    fn forward_plain(
        &self,
        points: &ArrayView2<'_, f64>,
        tangents: bool,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
        assert_eq!(points.ncols(), self.cfg.input_dim, "heightmap query: expected [N, 2] points");
        assert!(
            points.iter().all(|v| v.is_finite()),
            "heightmap query: non-finite input coordinate"
        );
        let n = points.nrows();
        let inner = self.tape.inner.borrow();
        let weight = |v: &Value| {
            inner.nodes[v.idx]
                .data
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("stored weights are 2-d")
        };
        let bias = |v: &Value| {
            inner.nodes[v.idx]
                .data
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("stored biases are 1-d")
        };

        let mut h = points.to_owned();
        let mut tx = Array2::<f64>::zeros((n, 2));
        let mut ty = Array2::<f64>::zeros((n, 2));
        tx.column_mut(0).fill(1.0);
        ty.column_mut(1).fill(1.0);
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let omega = if k == 0 { 1.0 } else { self.cfg.hidden_frequency };
            let wv = weight(w);
            let mut pre = h.dot(&wv);
            pre += &bias(b);
            if k != 0 {
                pre *= omega;
            }
            if tangents {
                let cos = pre.mapv(f64::cos);
                tx = tx.dot(&wv) * omega * &cos;
                ty = ty.dot(&wv) * omega * &cos;
            }
            h = pre.mapv(f64::sin);
        }
        let hw = weight(&self.head.0);
        let mut out = h.dot(&hw);
        out += &bias(&self.head.1);
        let z = out.column(0).to_owned();
        let albedo = out
            .column(1)
            .mapv(|v| crate::diffmath::softplus_scalar(v + self.albedo_bias));
        let (dzdx, dzdy) = if tangents {
            (
                tx.dot(&hw).column(0).to_owned(),
                ty.dot(&hw).column(0).to_owned(),
            )
        } else {
            (Array1::zeros(n), Array1::zeros(n))
        };
        (z, albedo, dzdx, dzdy)
    }
}
