//! Reconstruction quality metrics and export artifacts: one-directional
//! shape error with a grid-accelerated nearest neighbor, angular normal
//! error, jet error maps, heightmap mesh export, BRDF sphere
//! visualization, and full re-rendering of a trained model for per-light
//! error maps.

use std::io::Write as IoWrite;
use std::path::Path;
use std::thread;

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{DataError, ViewData};
use crate::diffmath::Tape;
use crate::geometry::GeometryError;
use crate::heightmap::HeightmapNetwork;
use crate::shading::{
    render_intensity, rusinkiewicz_angles, BrdfNet, LightSource, ShadingError, ShadowQueries,
};

/// Copies a BRDF net onto a private tape so chunked evaluation can
/// truncate freely without touching the caller's tape.
fn scratch_brdf(brdf: &BrdfNet) -> (Tape, BrdfNet) {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let local = BrdfNet::new(&tape, &mut rng);
    local
        .import_weights(&brdf.export_weights())
        .expect("same architecture round-trips");
    (tape, local)
}

/// Shape-error maps saturate at this distance; larger errors all render
/// as the same dark red.
pub const SHAPE_ERROR_SATURATION_MM: f64 = 1.5;

/// Rendering-error maps saturate at this absolute intensity residual.
pub const RENDER_ERROR_SATURATION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty point set: {0}")]
    EmptySet(&'static str),
    #[error("bad argument: {0}")]
    BadParam(String),
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("view has no ground truth {0} map")]
    MissingGroundTruth(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Shading(#[from] ShadingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("mesh write failed: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Shape error (one-directional, ground truth -> reconstruction)
// ---------------------------------------------------------------------------

/// Per-point distances from ground truth to the reconstruction, with the
/// mean/median aggregates the tables report.
#[derive(Debug, Clone)]
pub struct ShapeErrorReport {
    /// One distance per ground-truth point, in input order, mm.
    pub distances_mm: Vec<f64>,
    pub mean_mm: f64,
    pub median_mm: f64,
}

impl ShapeErrorReport {
    /// Aggregates a distance list; the median of an even count is the
    /// midpoint of the two central order statistics.
    pub fn from_distances(distances_mm: Vec<f64>) -> Result<Self, EvalError> {
        if distances_mm.is_empty() {
            return Err(EvalError::EmptySet("distances"));
        }
        let mean_mm = distances_mm.iter().sum::<f64>() / distances_mm.len() as f64;
        let mut sorted = distances_mm.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let n = sorted.len();
        let median_mm = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(Self {
            distances_mm,
            mean_mm,
            median_mm,
        })
    }
}

/// Uniform grid over the reconstruction points; queries expand Chebyshev
/// shells of cells outward until no closer point can exist.
struct PointGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    /// Point indices bucketed per cell, row-major over (x, y, z) cells.
    buckets: Vec<Vec<u32>>,
    points: Array2<f64>,
}

impl PointGrid {
    fn build(points: &ArrayView2<'_, f64>) -> Self {
        let n = points.nrows();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..n {
            for c in 0..3 {
                lo[c] = lo[c].min(points[[i, c]]);
                hi[c] = hi[c].max(points[[i, c]]);
            }
        }
        // Cell size targets a few points per cell; degenerate (flat or
        // single-point) extents still get a positive cell.
        let max_extent = (0..3).map(|c| hi[c] - lo[c]).fold(0.0f64, f64::max);
        let per_axis = (n as f64).cbrt().ceil().max(1.0);
        let cell = (max_extent / per_axis).max(1e-9);
        let mut dims = [1i64; 3];
        for c in 0..3 {
            dims[c] = (((hi[c] - lo[c]) / cell).floor() as i64 + 1).max(1);
        }
        let mut buckets = vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize];
        for i in 0..n {
            let mut idx = [0i64; 3];
            for c in 0..3 {
                idx[c] = (((points[[i, c]] - lo[c]) / cell).floor() as i64).clamp(0, dims[c] - 1);
            }
            buckets[Self::flat(&dims, &idx)].push(i as u32);
        }
        Self {
            origin: lo,
            cell,
            dims,
            buckets,
            points: points.to_owned(),
        }
    }

    fn flat(dims: &[i64; 3], idx: &[i64; 3]) -> usize {
        ((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]) as usize
    }

    /// Distance from `q` to its nearest stored point. The query cell may
    /// lie outside the grid; shells still enumerate only real cells. A
    /// point in a cell at Chebyshev shell s is at least (s-1)*cell away,
    /// so the search stops once that bound exceeds the best hit.
    fn nearest_distance(&self, q: &[f64; 3]) -> f64 {
        let mut home = [0i64; 3];
        for c in 0..3 {
            home[c] = ((q[c] - self.origin[c]) / self.cell).floor() as i64;
        }
        let max_shell = (0..3)
            .map(|c| home[c].abs().max((self.dims[c] - 1 - home[c]).abs()))
            .max()
            .expect("three axes")
            + 1;
        let mut best = f64::INFINITY;
        for r in 0..=max_shell {
            if (r - 1).max(0) as f64 * self.cell > best.sqrt() {
                break;
            }
            self.scan_shell(&home, r, q, &mut best);
        }
        best.sqrt()
    }

    /// Visits every in-grid cell at Chebyshev distance exactly `r` from
    /// `home`, updating `best` (squared distance).
    fn scan_shell(&self, home: &[i64; 3], r: i64, q: &[f64; 3], best: &mut f64) {
        let clip = |c: usize, v: i64| -> Option<i64> {
            (v >= 0 && v < self.dims[c]).then_some(v)
        };
        let mut visit = |idx: [i64; 3]| {
            for &pi in &self.buckets[Self::flat(&self.dims, &idx)] {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let d = self.points[[pi as usize, c]] - q[c];
                    d2 += d * d;
                }
                if d2 < *best {
                    *best = d2;
                }
            }
        };
        if r == 0 {
            if let (Some(x), Some(y), Some(z)) =
                (clip(0, home[0]), clip(1, home[1]), clip(2, home[2]))
            {
                visit([x, y, z]);
            }
            return;
        }
        for dx in -r..=r {
            let Some(x) = clip(0, home[0] + dx) else { continue };
            for dy in -r..=r {
                let Some(y) = clip(1, home[1] + dy) else { continue };
                let face = dx.abs() == r || dy.abs() == r;
                let dz_candidates: &[i64] = if face { &[] } else { &[-r, r] };
                if face {
                    for dz in -r..=r {
                        if let Some(z) = clip(2, home[2] + dz) {
                            visit([x, y, z]);
                        }
                    }
                } else {
                    for &dz in dz_candidates {
                        if let Some(z) = clip(2, home[2] + dz) {
                            visit([x, y, z]);
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor distance from every `from` point to the `to` set,
/// grid-accelerated and computed in parallel over query points.
pub fn nearest_distances(
    from: &ArrayView2<'_, f64>,
    to: &ArrayView2<'_, f64>,
) -> Result<Vec<f64>, EvalError> {
    if from.nrows() == 0 {
        return Err(EvalError::EmptySet("query points"));
    }
    if to.nrows() == 0 {
        return Err(EvalError::EmptySet("reconstruction points"));
    }
    for (what, arr) in [("query points", from), ("reconstruction points", to)] {
        if arr.ncols() != 3 {
            return Err(EvalError::ShapeMismatch {
                what: "point set columns",
                expected: "3".into(),
                got: format!("{} ({what})", arr.ncols()),
            });
        }
    }
    let grid = PointGrid::build(to);
    let n = from.nrows();
    let mut distances = vec![0.0f64; n];
    let threads = thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(8)
        .min(n);
    let chunk = n.div_ceil(threads);
    thread::scope(|scope| {
        for (t, out) in distances.chunks_mut(chunk).enumerate() {
            let grid = &grid;
            let from = &from;
            scope.spawn(move || {
                for (j, slot) in out.iter_mut().enumerate() {
                    let i = t * chunk + j;
                    let q = [from[[i, 0]], from[[i, 1]], from[[i, 2]]];
                    *slot = grid.nearest_distance(&q);
                }
            });
        }
    });
    Ok(distances)
}

/// Brute-force O(N*M) oracle for [`nearest_distances`].
pub fn nearest_distances_brute(
    from: &ArrayView2<'_, f64>,
    to: &ArrayView2<'_, f64>,
) -> Vec<f64> {
    (0..from.nrows())
        .map(|i| {
            (0..to.nrows())
                .map(|j| {
                    (0..3)
                        .map(|c| (from[[i, c]] - to[[j, c]]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// One-directional shape error: for each ground-truth point, the distance
/// to the nearest reconstruction point. Spurious extra reconstruction
/// geometry can only tie or lower it, never raise it.
pub fn shape_error(
    gt_points: &ArrayView2<'_, f64>,
    recon_points: &ArrayView2<'_, f64>,
) -> Result<ShapeErrorReport, EvalError> {
    let distances = nearest_distances(gt_points, recon_points)?;
    ShapeErrorReport::from_distances(distances)
}

/// Back-projects a view's ground-truth depth map to world points over the
/// mask. Returns the points and their (row, col) pixels in matching order.
pub fn gt_points_world(view: &ViewData) -> Result<(Array2<f64>, Vec<(usize, usize)>), EvalError> {
    let depth_gt = view
        .depth_gt
        .as_ref()
        .ok_or(EvalError::MissingGroundTruth("depth"))?;
    let (h, w) = view.mask.dim();
    let mut rows = Vec::new();
    let mut pixels = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if !view.mask[[row, col]] {
                continue;
            }
            let p = view
                .camera
                .back_project(col as f64, row as f64, depth_gt[[row, col]])?;
            let pw = view.camera.cam_to_world().apply(&p);
            rows.push([pw.x, pw.y, pw.z]);
            pixels.push((row, col));
        }
    }
    if rows.is_empty() {
        return Err(EvalError::EmptySet("masked ground-truth pixels"));
    }
    let mut pts = Array2::<f64>::zeros((rows.len(), 3));
    for (i, p) in rows.iter().enumerate() {
        for c in 0..3 {
            pts[[i, c]] = p[c];
        }
    }
    Ok((pts, pixels))
}

/// Shape error of one view against a reconstruction point set, plus the
/// per-pixel distance map (NaN outside the mask) for jet rendering.
pub fn shape_error_view(
    view: &ViewData,
    recon_points: &ArrayView2<'_, f64>,
) -> Result<(ShapeErrorReport, Array2<f64>), EvalError> {
    let (gt, pixels) = gt_points_world(view)?;
    let report = shape_error(&gt.view(), recon_points)?;
    let (h, w) = view.mask.dim();
    let mut map = Array2::<f64>::from_elem((h, w), f64::NAN);
    for (d, (row, col)) in report.distances_mm.iter().zip(&pixels) {
        map[[*row, *col]] = *d;
    }
    Ok((report, map))
}

/// Samples the heightmap on a regular world-plane grid as a
/// reconstruction point set (mm).
pub fn surface_points(
    net: &HeightmapNetwork,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
) -> Result<Array2<f64>, EvalError> {
    let mesh = export_mesh(net, x_range, y_range, resolution, None)?;
    let mut pts = Array2::<f64>::zeros((mesh.vertices.len(), 3));
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in 0..3 {
            pts[[i, c]] = v[c];
        }
    }
    Ok(pts)
}

// ---------------------------------------------------------------------------
// Normal error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NormalErrorReport {
    /// Per-pixel angular errors over the mask, row-major order, degrees.
    pub angles_deg: Vec<f64>,
    pub mean_deg: f64,
    pub median_deg: f64,
    /// Per-pixel angular error map, NaN outside the mask.
    pub map: Array2<f64>,
}

/// Per-pixel arccos of the clamped dot product between unit normal maps,
/// aggregated over the mask.
pub fn normal_error(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    mask: &Array2<bool>,
) -> Result<NormalErrorReport, EvalError> {
    let (h, w) = mask.dim();
    for (what, arr) in [("predicted normals", pred), ("ground-truth normals", gt)] {
        if arr.dim() != (h, w, 3) {
            return Err(EvalError::ShapeMismatch {
                what: "normal map",
                expected: format!("[{h}, {w}, 3]"),
                got: format!("{:?} ({what})", arr.dim()),
            });
        }
    }
    let mut angles = Vec::new();
    let mut map = Array2::<f64>::from_elem((h, w), f64::NAN);
    for row in 0..h {
        for col in 0..w {
            if !mask[[row, col]] {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..3 {
                dot += pred[[row, col, c]] * gt[[row, col, c]];
            }
            let deg = dot.clamp(-1.0, 1.0).acos().to_degrees();
            map[[row, col]] = deg;
            angles.push(deg);
        }
    }
    if angles.is_empty() {
        return Err(EvalError::EmptySet("masked normal pixels"));
    }
    let mean_deg = angles.iter().sum::<f64>() / angles.len() as f64;
    let mut sorted = angles.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("angles are finite"));
    let n = sorted.len();
    let median_deg = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(NormalErrorReport {
        angles_deg: angles,
        mean_deg,
        median_deg,
        map,
    })
}

// ---------------------------------------------------------------------------
// Jet error maps
// ---------------------------------------------------------------------------

/// Standard 4-segment jet: t=0 half-blue (0,0,128), t=0.5 near-white
/// green, t=1 half-red (128,0,0). Inputs are clamped to [0, 1].
pub fn jet_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let seg = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        seg(1.5 - (4.0 * t - 3.0).abs()),
        seg(1.5 - (4.0 * t - 2.0).abs()),
        seg(1.5 - (4.0 * t - 1.0).abs()),
    ]
}

/// Renders a value map as a jet image; values at or beyond `saturation`
/// all get the saturation color, NaN (outside mask) renders white.
pub fn jet_map(values: &Array2<f64>, saturation: f64) -> Array3<u8> {
    let (h, w) = values.dim();
    let mut img = Array3::<u8>::from_elem((h, w, 3), 255);
    for row in 0..h {
        for col in 0..w {
            let v = values[[row, col]];
            if !v.is_finite() {
                continue;
            }
            let rgb = jet_color(v / saturation);
            for c in 0..3 {
                img[[row, col, c]] = rgb[c];
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Mesh export
// ---------------------------------------------------------------------------

/// Triangle mesh with shared vertices; positions in mm.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Counter-clockwise as seen from the cameras (normals have negative
    /// world z).
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Unit face normals, for orientation checks.
    pub fn face_normals(&self) -> Vec<[f64; 3]> {
        self.faces
            .iter()
            .map(|f| {
                let a = self.vertices[f[0]];
                let b = self.vertices[f[1]];
                let c = self.vertices[f[2]];
                let e1: Vec<f64> = (0..3).map(|k| b[k] - a[k]).collect();
                let e2: Vec<f64> = (0..3).map(|k| c[k] - a[k]).collect();
                let n = [
                    e1[1] * e2[2] - e1[2] * e2[1],
                    e1[2] * e2[0] - e1[0] * e2[2],
                    e1[0] * e2[1] - e1[1] * e2[0],
                ];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                [n[0] / len, n[1] / len, n[2] / len]
            })
            .collect()
    }
}

/// Triangulates the heightmap over a regular grid on the world plane.
/// A quad becomes two triangles only when all four corners pass the mask,
/// so interior edges are shared and the interior is watertight.
pub fn export_mesh(
    net: &HeightmapNetwork,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
    mask: Option<&dyn Fn(f64, f64) -> bool>,
) -> Result<Mesh, EvalError> {
    if resolution < 2 {
        return Err(EvalError::BadParam(format!(
            "mesh resolution must be at least 2, got {resolution}"
        )));
    }
    if !(x_range.1 > x_range.0) || !(y_range.1 > y_range.0) {
        return Err(EvalError::BadParam(format!(
            "mesh ranges must be increasing, got x={x_range:?} y={y_range:?}"
        )));
    }
    let scale = net.coordinate_scale();
    let step_x = (x_range.1 - x_range.0) / (resolution - 1) as f64;
    let step_y = (y_range.1 - y_range.0) / (resolution - 1) as f64;
    let mut index = vec![usize::MAX; resolution * resolution];
    let mut coords = Vec::new();
    let mut kept = Vec::new();
    for j in 0..resolution {
        for i in 0..resolution {
            let x = x_range.0 + i as f64 * step_x;
            let y = y_range.0 + j as f64 * step_y;
            if mask.map(|m| m(x, y)).unwrap_or(true) {
                index[j * resolution + i] = kept.len();
                kept.push((i, j));
                coords.push([x * scale, y * scale]);
            }
        }
    }
    if kept.is_empty() {
        return Err(EvalError::EmptySet("masked mesh vertices"));
    }
    let mut pts = Array2::<f64>::zeros((coords.len(), 2));
    for (i, c) in coords.iter().enumerate() {
        pts[[i, 0]] = c[0];
        pts[[i, 1]] = c[1];
    }
    let (z, _albedo) = net.query_plain(&pts.view());
    let vertices: Vec<[f64; 3]> = kept
        .iter()
        .zip(z.iter())
        .map(|(&(i, j), &zv)| {
            [
                x_range.0 + i as f64 * step_x,
                y_range.0 + j as f64 * step_y,
                zv / scale,
            ]
        })
        .collect();
    let mut faces = Vec::new();
    for j in 0..resolution - 1 {
        for i in 0..resolution - 1 {
            let a = index[j * resolution + i];
            let b = index[j * resolution + i + 1];
            let c = index[(j + 1) * resolution + i + 1];
            let d = index[(j + 1) * resolution + i];
            if a != usize::MAX && b != usize::MAX && c != usize::MAX && d != usize::MAX {
                // Winding chosen so face normals point toward negative z,
                // matching the camera-facing surface orientation.
                faces.push([a, c, b]);
                faces.push([a, d, c]);
            }
        }
    }
    Ok(Mesh { vertices, faces })
}

/// Writes the mesh as OBJ text: `v x y z` then 1-indexed `f a b c`.
pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?;
    }
    for f in &mesh.faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// BRDF sphere visualization
// ---------------------------------------------------------------------------

/// BRDF sphere viewing geometry: orthographic view along +z, light at 45
/// degrees in the y-z plane.
pub const SPHERE_VIEW_DIR: [f64; 3] = [0.0, 0.0, 1.0];
pub const SPHERE_LIGHT_DIR: [f64; 3] = [0.0, std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

/// Evaluates the learned BRDF over an orthographically viewed unit
/// sphere, excluding the (n.l) factor: sign_mask * MLP(angles). Pixels
/// outside the sphere are NaN. Row 0 is the top of the image (+y up).
pub fn brdf_sphere_values(brdf: &BrdfNet, resolution: usize) -> Result<Array2<f64>, EvalError> {
    if resolution < 2 {
        return Err(EvalError::BadParam(format!(
            "sphere resolution must be at least 2, got {resolution}"
        )));
    }
    let mut map = Array2::<f64>::from_elem((resolution, resolution), f64::NAN);
    let mut normals = Vec::new();
    let mut pixels = Vec::new();
    for row in 0..resolution {
        for col in 0..resolution {
            let x = 2.0 * (col as f64 + 0.5) / resolution as f64 - 1.0;
            let y = 1.0 - 2.0 * (row as f64 + 0.5) / resolution as f64;
            let r2 = x * x + y * y;
            if r2 > 1.0 {
                continue;
            }
            normals.push([x, y, (1.0 - r2).sqrt()]);
            pixels.push((row, col));
        }
    }
    let (tape, mut local) = scratch_brdf(brdf);
    let entry = tape.mark();
    for (chunk_n, chunk_px) in normals.chunks(8192).zip(pixels.chunks(8192)) {
        let b = chunk_n.len();
        let mut n = Array2::<f64>::zeros((b, 3));
        let mut l = Array2::<f64>::zeros((b, 3));
        let mut v = Array2::<f64>::zeros((b, 3));
        for (i, nv) in chunk_n.iter().enumerate() {
            for c in 0..3 {
                n[[i, c]] = nv[c];
                l[[i, c]] = SPHERE_LIGHT_DIR[c];
                v[[i, c]] = SPHERE_VIEW_DIR[c];
            }
        }
        let nc = tape.constant(n.into_dyn());
        let lc = tape.constant(l.into_dyn());
        let vc = tape.constant(v.into_dyn());
        let angles = rusinkiewicz_angles(&nc, &lc, &vc)?;
        let value = angles.sign_mask.mul(&local.forward(&angles.stacked()));
        let data = value.data().clone();
        for (i, (row, col)) in chunk_px.iter().enumerate() {
            map[[*row, *col]] = data[[i, 0]];
        }
        tape.truncate(entry);
        local.rebind();
    }
    Ok(map)
}

/// Colors a BRDF sphere value map: 0 pale gray, 1 green, >= 2 dark red,
/// linear in between; NaN (outside the sphere) renders white.
pub fn render_brdf_sphere(brdf: &BrdfNet, resolution: usize) -> Result<Array3<u8>, EvalError> {
    let values = brdf_sphere_values(brdf, resolution)?;
    let (h, w) = values.dim();
    let mut img = Array3::<u8>::from_elem((h, w, 3), 255);
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| -> [u8; 3] {
        [
            (a[0] + (b[0] - a[0]) * t).round() as u8,
            (a[1] + (b[1] - a[1]) * t).round() as u8,
            (a[2] + (b[2] - a[2]) * t).round() as u8,
        ]
    };
    const PALE: [f64; 3] = [235.0, 235.0, 235.0];
    const GREEN: [f64; 3] = [0.0, 140.0, 0.0];
    const DARK_RED: [f64; 3] = [139.0, 0.0, 0.0];
    for row in 0..h {
        for col in 0..w {
            let v = values[[row, col]];
            if !v.is_finite() {
                continue;
            }
            let rgb = if v <= 1.0 {
                lerp(PALE, GREEN, v.max(0.0))
            } else {
                lerp(GREEN, DARK_RED, (v - 1.0).min(1.0))
            };
            for c in 0..3 {
                img[[row, col, c]] = rgb[c];
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Model re-rendering
// ---------------------------------------------------------------------------

/// Re-rendered images and their residuals against the observations.
#[derive(Debug, Clone)]
pub struct RerenderResult {
    /// One image per light, zero outside the mask.
    pub rendered: Vec<Array2<f64>>,
    /// Absolute residual per light, NaN outside the mask.
    pub error_maps: Vec<Array2<f64>>,
    /// Mean absolute residual per light over the mask.
    pub mean_abs: Vec<f64>,
}

/// Re-renders every light of a view from the trained model: marches each
/// pixel ray to the heightmap crossing (seeded by the estimate depth),
/// then shades the crossing point with the learned BRDF and soft shadow
/// queries against the same surface.
pub fn rerender_view(
    net: &HeightmapNetwork,
    brdf: &BrdfNet,
    view: &ViewData,
    lights: &[LightSource],
    depth_samples: usize,
    window_mm: f64,
) -> Result<RerenderResult, EvalError> {
    if depth_samples < 2 {
        return Err(EvalError::BadParam(format!(
            "depth_samples must be at least 2, got {depth_samples}"
        )));
    }
    if !(window_mm > 0.0) {
        return Err(EvalError::BadParam(format!(
            "window_mm must be positive, got {window_mm}"
        )));
    }
    if view.images.len() != lights.len() {
        return Err(EvalError::ShapeMismatch {
            what: "images per light",
            expected: lights.len().to_string(),
            got: view.images.len().to_string(),
        });
    }
    let (h, w) = view.mask.dim();
    let scale = net.coordinate_scale();
    let eye = view
        .camera
        .cam_to_world()
        .apply(&nalgebra::Vector3::zeros());

    // Surface crossings per masked pixel.
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if !view.mask[[row, col]] {
                continue;
            }
            let d = view.depth_est[[row, col]];
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let p_est = view.camera.back_project(col as f64, row as f64, d)?;
            let pw = view.camera.cam_to_world().apply(&p_est);
            let t_est = (pw - eye).norm();
            let set = view.camera.sample_ray(
                col as f64,
                row as f64,
                (t_est - window_mm, t_est + window_mm),
                depth_samples,
            )?;
            let ray = set.world_points();
            let mut xy = Array2::<f64>::zeros((depth_samples, 2));
            for k in 0..depth_samples {
                xy[[k, 0]] = ray[[k, 0]] * scale;
                xy[[k, 1]] = ray[[k, 1]] * scale;
            }
            let (zf, _alb) = net.query_plain(&xy.view());
            let mut crossing: Option<[f64; 3]> = None;
            for k in 0..depth_samples - 1 {
                let g0 = ray[[k, 2]] - zf[k] / scale;
                let g1 = ray[[k + 1, 2]] - zf[k + 1] / scale;
                if g0 < 0.0 && g1 >= 0.0 {
                    let a = g0 / (g0 - g1);
                    let mut p = [0.0; 3];
                    for c in 0..3 {
                        p[c] = ray[[k, c]] + a * (ray[[k + 1, c]] - ray[[k, c]]);
                    }
                    crossing = Some(p);
                    break;
                }
            }
            let p = crossing.unwrap_or([pw.x, pw.y, pw.z]);
            pixels.push((row, col));
            points.push(p);
        }
    }
    if pixels.is_empty() {
        return Err(EvalError::EmptySet("masked pixels with usable depth"));
    }

    // Shade in chunks on a private tape; the heightmap is queried
    // off-tape for normals/albedo and for the detached shadow marches.
    let (tape, mut local) = scratch_brdf(brdf);
    let entry = tape.mark();
    let m = lights.len();
    let mut rendered = vec![Array2::<f64>::zeros((h, w)); m];
    for (chunk_p, chunk_px) in points.chunks(4096).zip(pixels.chunks(4096)) {
        let b = chunk_p.len();
        let mut xy = Array2::<f64>::zeros((b, 2));
        for (i, p) in chunk_p.iter().enumerate() {
            xy[[i, 0]] = p[0] * scale;
            xy[[i, 1]] = p[1] * scale;
        }
        let (zf, albedo, normals) = net.normals_plain(&xy.view());
        let mut pw = Array2::<f64>::zeros((b, 3));
        let mut vdir = Array2::<f64>::zeros((b, 3));
        let mut alb = Array2::<f64>::zeros((b, 1));
        for (i, p) in chunk_p.iter().enumerate() {
            pw[[i, 0]] = p[0];
            pw[[i, 1]] = p[1];
            pw[[i, 2]] = zf[i] / scale;
            let to_eye =
                nalgebra::Vector3::new(eye.x - p[0], eye.y - p[1], eye.z - pw[[i, 2]]).normalize();
            for c in 0..3 {
                vdir[[i, c]] = to_eye[c];
            }
            alb[[i, 0]] = albedo[i];
        }
        let pc = tape.constant(pw.into_dyn());
        let nc = tape.constant(normals.into_dyn());
        let ac = tape.constant(alb.into_dyn());
        let vc = tape.constant(vdir.into_dyn());
        let out = render_intensity(
            &pc,
            &nc,
            &ac,
            &vc,
            lights,
            &local,
            &ShadowQueries::Detached(net),
        )?;
        let data = out.data().clone();
        for (i, (row, col)) in chunk_px.iter().enumerate() {
            for (li, img) in rendered.iter_mut().enumerate() {
                img[[*row, *col]] = data[[i, li]];
            }
        }
        tape.truncate(entry);
        local.rebind();
    }

    let mut error_maps = Vec::with_capacity(m);
    let mut mean_abs = Vec::with_capacity(m);
    for (li, img) in rendered.iter().enumerate() {
        let mut emap = Array2::<f64>::from_elem((h, w), f64::NAN);
        let mut acc = 0.0;
        for &(row, col) in &pixels {
            let e = (img[[row, col]] - view.images[li][[row, col]]).abs();
            emap[[row, col]] = e;
            acc += e;
        }
        mean_abs.push(acc / pixels.len() as f64);
        error_maps.push(emap);
    }
    Ok(RerenderResult {
        rendered,
        error_maps,
        mean_abs,
    })
}
