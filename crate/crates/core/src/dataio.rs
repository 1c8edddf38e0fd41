//! Dataset and checkpoint persistence: float-map and PNG image formats,
//! camera and light calibration files, the textual dataset manifest, and
//! an adapter for converted DiLiGenT-MV-style captures.
//!
//! All formats carry versioned header strings. Images load to linear
//! values in [0, 1]; RGB inputs collapse to luminance (0.2126, 0.7152,
//! 0.0722). Depth maps hold optical-axis depth in mm; normal maps are
//! stored per view in the camera frame and rotated to world at load.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayD};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, RigidTransform};
use crate::shading::{LightSource, ShadingError};

pub const F32MAP_MAGIC: &str = "STEREOPS-F32MAP-1";
pub const CHECKPOINT_MAGIC: &str = "STEREOPS-CKPT-1";
pub const CALIB_MAGIC: &str = "STEREOPS-CALIB-1";
pub const LIGHTS_MAGIC: &str = "STEREOPS-LIGHTS-1";
pub const MANIFEST_MAGIC: &str = "STEREOPS-MANIFEST-1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: expected header {expected}, found {found}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("{path}: truncated or malformed at {what}")]
    Truncated { path: PathBuf, what: String },
    #[error("{path}: cannot parse {what}: {detail}")]
    Parse {
        path: PathBuf,
        what: String,
        detail: String,
    },
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },
    #[error("manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("views disagree on light count: {counts:?}")]
    LightCountMismatch { counts: Vec<usize> },
    #[error("need at least 3 lights, found {found}")]
    TooFewLights { found: usize },
    #[error("image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("bad camera calibration: {0}")]
    Geometry(#[from] GeometryError),
    #[error("bad light record: {0}")]
    Shading(#[from] ShadingError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Flat float maps
// ---------------------------------------------------------------------------

/// Writes `[H, W, C]` f32 data: a text header (magic, then `H W C`),
/// followed by little-endian row-major f32 payload.
pub fn write_f32_map(path: &Path, data: &Array3<f32>) -> Result<(), DataError> {
    let (h, w, c) = data.dim();
    let mut buf = Vec::with_capacity(64 + h * w * c * 4);
    buf.extend_from_slice(format!("{F32MAP_MAGIC}\n{h} {w} {c}\n").as_bytes());
    for v in data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads a float map written by [`write_f32_map`].
pub fn read_f32_map(path: &Path) -> Result<Array3<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header_end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| DataError::Truncated {
            path: path.into(),
            what: "header line".into(),
        })?;
    let magic = String::from_utf8_lossy(&bytes[..header_end]).into_owned();
    if magic != F32MAP_MAGIC {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: F32MAP_MAGIC,
            found: magic,
        });
    }
    let rest = &bytes[header_end + 1..];
    let dims_end = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| DataError::Truncated {
            path: path.into(),
            what: "dimension line".into(),
        })?;
    let dims_line = String::from_utf8_lossy(&rest[..dims_end]).into_owned();
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Parse {
            path: path.into(),
            what: format!("dimensions '{dims_line}'"),
            detail: e.to_string(),
        })?;
    if dims.len() != 3 {
        return Err(DataError::Parse {
            path: path.into(),
            what: format!("dimensions '{dims_line}'"),
            detail: "expected 3 integers".into(),
        });
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let payload = &rest[dims_end + 1..];
    let expected = h * w * c * 4;
    if payload.len() != expected {
        return Err(DataError::Truncated {
            path: path.into(),
            what: format!("payload: {} bytes, expected {expected}", payload.len()),
        });
    }
    let mut values = Vec::with_capacity(h * w * c);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Array3::from_shape_vec((h, w, c), values).map_err(|e| DataError::Parse {
        path: path.into(),
        what: "payload shape".into(),
        detail: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Writes linear intensities in [0, 1] as 16-bit grayscale PNG.
pub fn write_gray16_png(path: &Path, values: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = values.dim();
    let raw: Vec<u16> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| DataError::BadImage {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Writes an `[H, W, 3]` byte array as 8-bit RGB PNG.
pub fn write_rgb8_png(path: &Path, pixels: &Array3<u8>) -> Result<(), DataError> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(DataError::BadImage {
            path: path.into(),
            reason: format!("expected 3 channels, got {c}"),
        });
    }
    let raw: Vec<u8> = pixels.iter().copied().collect();
    let img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| DataError::BadImage {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Loads any supported grayscale/RGB PNG to linear [0, 1] values.
/// RGB collapses by the standard luminance weights.
pub fn read_image01(path: &Path) -> Result<Array2<f64>, DataError> {
    let img = image::open(path).map_err(|e| DataError::BadImage {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<f64>::zeros((h, w));
    let lum = |r: f64, g: f64, b: f64| 0.2126 * r + 0.7152 * g + 0.0722 * b;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                out[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
        }
        image::DynamicImage::ImageLuma16(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                out[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
            }
        }
        image::DynamicImage::ImageRgb8(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                let [r, g, b] = p.0;
                out[[y as usize, x as usize]] =
                    lum(r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
            }
        }
        image::DynamicImage::ImageRgb16(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                let [r, g, b] = p.0;
                out[[y as usize, x as usize]] = lum(
                    r as f64 / 65535.0,
                    g as f64 / 65535.0,
                    b as f64 / 65535.0,
                );
            }
        }
        other => {
            let gray = other.to_luma16();
            for (x, y, p) in gray.enumerate_pixels() {
                out[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
            }
        }
    }
    Ok(out)
}

/// Writes a boolean mask as 8-bit PNG (255 = valid).
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    let img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| DataError::BadImage {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Loads a mask image; any nonzero intensity counts as valid.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>, DataError> {
    let img = read_image01(path)?;
    Ok(img.mapv(|v| v > 0.0))
}

// ---------------------------------------------------------------------------
// Calibration files
// ---------------------------------------------------------------------------

/// Writes one camera as a textual key-value calibration file. `R` and `t`
/// are the camera-to-world transform, row-major, millimeters.
pub fn write_calib(path: &Path, camera: &Camera) -> Result<(), DataError> {
    let mut s = String::new();
    s.push_str(CALIB_MAGIC);
    s.push('\n');
    s.push_str(&format!("fx {:.17e}\n", camera.fx()));
    s.push_str(&format!("fy {:.17e}\n", camera.fy()));
    s.push_str(&format!("cx {:.17e}\n", camera.cx()));
    s.push_str(&format!("cy {:.17e}\n", camera.cy()));
    s.push_str(&format!("width {}\n", camera.width()));
    s.push_str(&format!("height {}\n", camera.height()));
    let r = camera.cam_to_world().rotation();
    s.push('R');
    for i in 0..3 {
        for j in 0..3 {
            s.push_str(&format!(" {:.17e}", r[(i, j)]));
        }
    }
    s.push('\n');
    let t = camera.cam_to_world().translation();
    s.push_str(&format!("t {:.17e} {:.17e} {:.17e}\n", t.x, t.y, t.z));
    s.push_str("units mm\n");
    fs::write(path, s).map_err(io_err(path))
}

fn parse_reals(path: &Path, what: &str, tokens: &[&str]) -> Result<Vec<f64>, DataError> {
    tokens
        .iter()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Parse {
            path: path.into(),
            what: what.into(),
            detail: e.to_string(),
        })
}

/// Reads a camera calibration file written by [`write_calib`].
pub fn read_calib(path: &Path) -> Result<Camera, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != CALIB_MAGIC {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: CALIB_MAGIC,
            found: magic.into(),
        });
    }
    let mut fx = None;
    let mut fy = None;
    let mut cx = None;
    let mut cy = None;
    let mut width = None;
    let mut height = None;
    let mut rot = None;
    let mut trans = None;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["fx", v] => fx = Some(parse_reals(path, "fx", &[v])?[0]),
            ["fy", v] => fy = Some(parse_reals(path, "fy", &[v])?[0]),
            ["cx", v] => cx = Some(parse_reals(path, "cx", &[v])?[0]),
            ["cy", v] => cy = Some(parse_reals(path, "cy", &[v])?[0]),
            ["width", v] => width = Some(parse_reals(path, "width", &[v])?[0] as usize),
            ["height", v] => height = Some(parse_reals(path, "height", &[v])?[0] as usize),
            ["R", rest @ ..] if rest.len() == 9 => {
                let vals = parse_reals(path, "R", rest)?;
                rot = Some(Matrix3::from_row_slice(&vals));
            }
            ["t", rest @ ..] if rest.len() == 3 => {
                let vals = parse_reals(path, "t", rest)?;
                trans = Some(Vector3::new(vals[0], vals[1], vals[2]));
            }
            ["units", "mm"] | [] => {}
            _ => {
                return Err(DataError::Parse {
                    path: path.into(),
                    what: format!("line '{line}'"),
                    detail: "unrecognized calibration entry".into(),
                })
            }
        }
    }
    let missing = |what: &str| DataError::Truncated {
        path: path.into(),
        what: what.into(),
    };
    let cam_to_world = RigidTransform::new(
        rot.ok_or_else(|| missing("R"))?,
        trans.ok_or_else(|| missing("t"))?,
    )?;
    Ok(Camera::new(
        fx.ok_or_else(|| missing("fx"))?,
        fy.ok_or_else(|| missing("fy"))?,
        cx.ok_or_else(|| missing("cx"))?,
        cy.ok_or_else(|| missing("cy"))?,
        width.ok_or_else(|| missing("width"))?,
        height.ok_or_else(|| missing("height"))?,
        cam_to_world,
    )?)
}

// ---------------------------------------------------------------------------
// Lights
// ---------------------------------------------------------------------------

/// Writes the light calibration: one record per light, `index x y z
/// brightness dx dy dz mu`, positions in mm.
pub fn write_lights(path: &Path, lights: &[LightSource]) -> Result<(), DataError> {
    let mut s = String::new();
    s.push_str(LIGHTS_MAGIC);
    s.push('\n');
    s.push_str("# index x y z brightness dx dy dz mu\n");
    for (i, l) in lights.iter().enumerate() {
        s.push_str(&format!(
            "{i} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
            l.position.x,
            l.position.y,
            l.position.z,
            l.brightness,
            l.principal_dir.x,
            l.principal_dir.y,
            l.principal_dir.z,
            l.dissipation,
        ));
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Reads a light calibration file. Records missing the trailing `mu`
/// field get dissipation 0 plus a warning (far-field-style calibrations).
pub fn read_lights(path: &Path) -> Result<(Vec<LightSource>, Vec<String>), DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != LIGHTS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: LIGHTS_MAGIC,
            found: magic.into(),
        });
    }
    let mut lights = Vec::new();
    let mut warnings = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 8 && tokens.len() != 9 {
            return Err(DataError::Parse {
                path: path.into(),
                what: format!("light record '{line}'"),
                detail: format!("expected 8 or 9 fields, got {}", tokens.len()),
            });
        }
        let vals = parse_reals(path, "light record", &tokens[1..])?;
        let mu = if tokens.len() == 9 {
            vals[7]
        } else {
            warnings.push(format!(
                "light {}: no dissipation exponent, assuming 0 (isotropic)",
                tokens[0]
            ));
            0.0
        };
        lights.push(LightSource::new(
            Vector3::new(vals[0], vals[1], vals[2]),
            vals[3],
            Vector3::new(vals[4], vals[5], vals[6]),
            mu,
        )?);
    }
    Ok((lights, warnings))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned checkpoint: string metadata plus named f64 arrays (network
/// weights, optimizer moments, RNG counters, loss history). Serialization
/// preserves entry order, so save -> load -> save is byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    buf.push(b'\n');
    let mut head = String::new();
    head.push_str(&format!("meta {}\n", ckpt.meta.len()));
    for (k, v) in &ckpt.meta {
        assert!(
            !k.contains(char::is_whitespace) && !v.contains('\n'),
            "checkpoint meta keys must be single tokens and values single lines"
        );
        head.push_str(&format!("{k} {v}\n"));
    }
    head.push_str(&format!("arrays {}\n", ckpt.arrays.len()));
    buf.extend_from_slice(head.as_bytes());
    for (name, arr) in &ckpt.arrays {
        let dims: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
        buf.extend_from_slice(format!("{name} {}\n", dims.join(" ")).as_bytes());
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn next_line(&mut self, what: &str) -> Result<String, DataError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.path.into(),
                what: what.into(),
            });
        }
        let line = String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(line)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = cur.next_line("header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let meta_line = cur.next_line("meta count")?;
    let meta_count: usize = meta_line
        .strip_prefix("meta ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::Parse {
            path: path.into(),
            what: "meta count".into(),
            detail: meta_line.clone(),
        })?;
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let line = cur.next_line("meta entry")?;
        let (k, v) = line.split_once(' ').ok_or_else(|| DataError::Parse {
            path: path.into(),
            what: "meta entry".into(),
            detail: line.clone(),
        })?;
        meta.push((k.to_string(), v.to_string()));
    }
    let arrays_line = cur.next_line("array count")?;
    let array_count: usize = arrays_line
        .strip_prefix("arrays ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::Parse {
            path: path.into(),
            what: "array count".into(),
            detail: arrays_line.clone(),
        })?;
    let mut arrays = Vec::with_capacity(array_count);
    for _ in 0..array_count {
        let header = cur.next_line("array header")?;
        let mut tokens = header.split_whitespace();
        let name = tokens
            .next()
            .ok_or_else(|| DataError::Parse {
                path: path.into(),
                what: "array header".into(),
                detail: header.clone(),
            })?
            .to_string();
        let dims: Vec<usize> = tokens
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::Parse {
                path: path.into(),
                what: format!("array {name} dims"),
                detail: e.to_string(),
            })?;
        let count: usize = dims.iter().product();
        let need = count * 8;
        if cur.pos + need + 1 > bytes.len() {
            return Err(DataError::Truncated {
                path: path.into(),
                what: format!("array {name} payload"),
            });
        }
        let mut values = Vec::with_capacity(count);
        for chunk in bytes[cur.pos..cur.pos + need].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        cur.pos += need;
        if bytes[cur.pos] != b'\n' {
            return Err(DataError::Truncated {
                path: path.into(),
                what: format!("array {name} terminator"),
            });
        }
        cur.pos += 1;
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), values).map_err(|e| {
            DataError::Parse {
                path: path.into(),
                what: format!("array {name} shape"),
                detail: e.to_string(),
            }
        })?;
        arrays.push((name, arr));
    }
    Ok(Checkpoint { meta, arrays })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Per-view file references, relative to the manifest root.
#[derive(Debug, Clone)]
pub struct ViewEntry {
    pub calib: PathBuf,
    pub mask: PathBuf,
    pub normals_est: PathBuf,
    pub depth_est: PathBuf,
    pub depth_gt: Option<PathBuf>,
    pub normals_gt: Option<PathBuf>,
    /// Light-image paths in light-index order.
    pub images: Vec<PathBuf>,
}

/// Validated dataset description: exactly two views sharing one light rig.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub views: Vec<ViewEntry>,
    pub lights_file: PathBuf,
    pub intensity_scale: f64,
    pub warnings: Vec<String>,
}

/// Everything one view contributes to training, eagerly loaded.
pub struct ViewData {
    pub camera: Camera,
    pub mask: Array2<bool>,
    /// Per-light linear intensities, already divided by the manifest's
    /// intensity scale.
    pub images: Vec<Array2<f64>>,
    /// World-frame unit normal estimates [H, W, 3].
    pub normals_est: Array3<f64>,
    /// Optical-axis depth estimates in mm [H, W].
    pub depth_est: Array2<f64>,
    pub depth_gt: Option<Array2<f64>>,
    /// World-frame ground-truth normals [H, W, 3].
    pub normals_gt: Option<Array3<f64>>,
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::BadManifest {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Writes a manifest; paths in the entries must already be root-relative.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let mut s = String::new();
    s.push_str(MANIFEST_MAGIC);
    s.push('\n');
    s.push_str("[global]\n");
    s.push_str(&format!("lights = {}\n", manifest.lights_file.display()));
    s.push_str(&format!(
        "intensity_scale = {:.17e}\n",
        manifest.intensity_scale
    ));
    for (k, view) in manifest.views.iter().enumerate() {
        s.push_str(&format!("[view {k}]\n"));
        s.push_str(&format!("calib = {}\n", view.calib.display()));
        s.push_str(&format!("mask = {}\n", view.mask.display()));
        s.push_str(&format!("normals_est = {}\n", view.normals_est.display()));
        s.push_str(&format!("depth_est = {}\n", view.depth_est.display()));
        if let Some(p) = &view.depth_gt {
            s.push_str(&format!("depth_gt = {}\n", p.display()));
        }
        if let Some(p) = &view.normals_gt {
            s.push_str(&format!("normals_gt = {}\n", p.display()));
        }
        for (m, img) in view.images.iter().enumerate() {
            s.push_str(&format!("image {m} = {}\n", img.display()));
        }
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Loads and validates a manifest: both views present, every referenced
/// file exists, views agree on the light list, at least 3 lights.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MANIFEST_MAGIC {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: MANIFEST_MAGIC,
            found: magic.into(),
        });
    }

    #[derive(Default)]
    struct ViewDraft {
        calib: Option<PathBuf>,
        mask: Option<PathBuf>,
        normals_est: Option<PathBuf>,
        depth_est: Option<PathBuf>,
        depth_gt: Option<PathBuf>,
        normals_gt: Option<PathBuf>,
        images: Vec<(usize, PathBuf)>,
    }

    enum Section {
        None,
        Global,
        View(usize),
    }

    let mut lights_file = None;
    let mut intensity_scale = 1.0f64;
    let mut drafts: Vec<ViewDraft> = Vec::new();
    let mut section = Section::None;

    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[global]" {
            section = Section::Global;
            continue;
        }
        if let Some(idx) = line
            .strip_prefix("[view ")
            .and_then(|r| r.strip_suffix(']'))
        {
            let k: usize = idx.parse().map_err(|_| {
                manifest_err(path, format!("bad view section header '{line}'"))
            })?;
            while drafts.len() <= k {
                drafts.push(ViewDraft::default());
            }
            section = Section::View(k);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| manifest_err(path, format!("expected 'key = value', got '{line}'")))?;
        match &section {
            Section::None => {
                return Err(manifest_err(path, format!("entry '{line}' before any section")))
            }
            Section::Global => match key {
                "lights" => lights_file = Some(PathBuf::from(value)),
                "intensity_scale" => {
                    intensity_scale = value.parse().map_err(|_| {
                        manifest_err(path, format!("bad intensity_scale '{value}'"))
                    })?
                }
                other => {
                    return Err(manifest_err(path, format!("unknown global key '{other}'")))
                }
            },
            Section::View(k) => {
                let draft = &mut drafts[*k];
                if let Some(idx) = key.strip_prefix("image ") {
                    let m: usize = idx.parse().map_err(|_| {
                        manifest_err(path, format!("bad image index in '{line}'"))
                    })?;
                    draft.images.push((m, PathBuf::from(value)));
                } else {
                    let slot = match key {
                        "calib" => &mut draft.calib,
                        "mask" => &mut draft.mask,
                        "normals_est" => &mut draft.normals_est,
                        "depth_est" => &mut draft.depth_est,
                        "depth_gt" => &mut draft.depth_gt,
                        "normals_gt" => &mut draft.normals_gt,
                        other => {
                            return Err(manifest_err(
                                path,
                                format!("unknown view key '{other}'"),
                            ))
                        }
                    };
                    *slot = Some(PathBuf::from(value));
                }
            }
        }
    }

    if drafts.len() != 2 {
        return Err(manifest_err(
            path,
            format!("expected exactly 2 views, found {}", drafts.len()),
        ));
    }
    let lights_file =
        lights_file.ok_or_else(|| manifest_err(path, "missing global 'lights' entry"))?;
    if !(intensity_scale > 0.0) {
        return Err(manifest_err(
            path,
            format!("intensity_scale must be positive, got {intensity_scale}"),
        ));
    }

    let mut views = Vec::new();
    for (k, mut draft) in drafts.into_iter().enumerate() {
        let need = |field: Option<PathBuf>, name: &str| {
            field.ok_or_else(|| manifest_err(path, format!("view {k} missing '{name}'")))
        };
        draft.images.sort_by_key(|(m, _)| *m);
        let indices: Vec<usize> = draft.images.iter().map(|(m, _)| *m).collect();
        if indices != (0..indices.len()).collect::<Vec<_>>() {
            return Err(manifest_err(
                path,
                format!("view {k} image indices must be 0..n contiguous, got {indices:?}"),
            ));
        }
        views.push(ViewEntry {
            calib: need(draft.calib, "calib")?,
            mask: need(draft.mask, "mask")?,
            normals_est: need(draft.normals_est, "normals_est")?,
            depth_est: need(draft.depth_est, "depth_est")?,
            depth_gt: draft.depth_gt,
            normals_gt: draft.normals_gt,
            images: draft.images.into_iter().map(|(_, p)| p).collect(),
        });
    }

    let counts: Vec<usize> = views.iter().map(|v| v.images.len()).collect();
    if counts[0] != counts[1] {
        return Err(DataError::LightCountMismatch { counts });
    }
    if counts[0] < 3 {
        return Err(DataError::TooFewLights { found: counts[0] });
    }

    let manifest = DatasetManifest {
        root,
        views,
        lights_file,
        intensity_scale,
        warnings: Vec::new(),
    };
    for file in manifest.referenced_files() {
        if !file.exists() {
            return Err(DataError::MissingFile { path: file });
        }
    }
    Ok(manifest)
}

impl DatasetManifest {
    /// Absolute paths of every file the manifest references.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let mut out = vec![self.root.join(&self.lights_file)];
        for v in &self.views {
            out.push(self.root.join(&v.calib));
            out.push(self.root.join(&v.mask));
            out.push(self.root.join(&v.normals_est));
            out.push(self.root.join(&v.depth_est));
            if let Some(p) = &v.depth_gt {
                out.push(self.root.join(p));
            }
            if let Some(p) = &v.normals_gt {
                out.push(self.root.join(p));
            }
            for img in &v.images {
                out.push(self.root.join(img));
            }
        }
        out
    }

    pub fn n_lights(&self) -> usize {
        self.views[0].images.len()
    }

    /// Loads the shared light rig.
    pub fn load_lights(&self) -> Result<(Vec<LightSource>, Vec<String>), DataError> {
        read_lights(&self.root.join(&self.lights_file))
    }

    /// Eagerly loads one view: camera, mask, all light images (scaled),
    /// and the estimate/GT maps with normals rotated into world frame.
    pub fn load_view(&self, k: usize) -> Result<ViewData, DataError> {
        let entry = &self.views[k];
        let camera = read_calib(&self.root.join(&entry.calib))?;
        let mask = read_mask_png(&self.root.join(&entry.mask))?;
        let mut images = Vec::with_capacity(entry.images.len());
        for img in &entry.images {
            let mut data = read_image01(&self.root.join(img))?;
            if self.intensity_scale != 1.0 {
                data.mapv_inplace(|v| v / self.intensity_scale);
            }
            images.push(data);
        }
        let rotate = |map: Array3<f32>| -> Array3<f64> {
            let (h, w, _) = map.dim();
            let r = camera.cam_to_world().rotation();
            let mut out = Array3::<f64>::zeros((h, w, 3));
            for i in 0..h {
                for j in 0..w {
                    let n_cam = Vector3::new(
                        map[[i, j, 0]] as f64,
                        map[[i, j, 1]] as f64,
                        map[[i, j, 2]] as f64,
                    );
                    let n_world = r * n_cam;
                    for c in 0..3 {
                        out[[i, j, c]] = n_world[c];
                    }
                }
            }
            out
        };
        let normals_est = rotate(read_f32_map(&self.root.join(&entry.normals_est))?);
        let depth_est_map = read_f32_map(&self.root.join(&entry.depth_est))?;
        let depth_est = depth_est_map
            .index_axis(ndarray::Axis(2), 0)
            .mapv(|v| v as f64);
        let depth_gt = entry
            .depth_gt
            .as_ref()
            .map(|p| -> Result<Array2<f64>, DataError> {
                Ok(read_f32_map(&self.root.join(p))?
                    .index_axis(ndarray::Axis(2), 0)
                    .mapv(|v| v as f64))
            })
            .transpose()?;
        let normals_gt = entry
            .normals_gt
            .as_ref()
            .map(|p| Ok::<_, DataError>(rotate(read_f32_map(&self.root.join(p))?)))
            .transpose()?;
        Ok(ViewData {
            camera,
            mask,
            images,
            normals_est,
            depth_est,
            depth_gt,
            normals_gt,
        })
    }
}

// ---------------------------------------------------------------------------
// DiLiGenT-style adapter
// ---------------------------------------------------------------------------

/// Builds a manifest from a converted DiLiGenT-MV-style capture: the first
/// two of its views, far-field directional lights turned into near-field
/// point lights placed at the average object distance with intensities
/// compensated by its square, and dissipation forced to 0.
///
/// Expected layout under `root` (textual conversions of the original
/// MATLAB calibration; see the formats document):
///   view_01/, view_02/: 001.png.., light_directions.txt,
///   light_intensities.txt, normals_est.f32, depth_est.f32, mask.png,
///   optional depth_gt.f32/normals_gt.f32, calib.txt
pub fn diligent_adapter(root: &Path) -> Result<DatasetManifest, DataError> {
    let out_dir = root.join("stereops_converted");
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut warnings = vec![
        "far-field light intensities compensated by squared average object distance; \
         near-field accuracy depends on how the equivalents were measured"
            .to_string(),
        "no angular dissipation exponents provided; mu = 0 assumed for all lights".to_string(),
    ];

    let mut views = Vec::new();
    let mut all_lights: Option<Vec<LightSource>> = None;
    for (k, dir_name) in ["view_01", "view_02"].iter().enumerate() {
        let vdir = root.join(dir_name);
        if !vdir.is_dir() {
            return Err(DataError::MissingFile { path: vdir });
        }
        let camera = read_calib(&vdir.join("calib.txt"))?;

        // Average object distance from the depth estimates (mask-valid).
        let mask = read_mask_png(&vdir.join("mask.png"))?;
        let depth = read_f32_map(&vdir.join("depth_est.f32"))?;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (i, m) in mask.iter().enumerate() {
            if *m {
                let (h, w, _) = depth.dim();
                let (row, col) = (i / w, i % w);
                let _ = h;
                sum += depth[[row, col, 0]] as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(manifest_err(&vdir, "empty mask; cannot estimate distance"));
        }
        let d_avg = sum / count as f64;

        if k == 0 {
            // World-frame point lights shared by both views, derived from
            // view 1's camera-frame directions.
            let dirs = read_direction_table(&vdir.join("light_directions.txt"))?;
            let intens = read_intensity_table(&vdir.join("light_intensities.txt"))?;
            if dirs.len() != intens.len() {
                return Err(manifest_err(
                    &vdir,
                    format!(
                        "{} light directions but {} intensities",
                        dirs.len(),
                        intens.len()
                    ),
                ));
            }
            let r = camera.cam_to_world().rotation();
            let center_cam = Vector3::new(0.0, 0.0, d_avg);
            let center_world = camera.cam_to_world().apply(&center_cam);
            let mut lights = Vec::with_capacity(dirs.len());
            for (dir_cam, intensity) in dirs.iter().zip(&intens) {
                let dir_world = (r * dir_cam).normalize();
                lights.push(LightSource::new(
                    center_world + dir_world * d_avg,
                    intensity * d_avg * d_avg,
                    -dir_world,
                    0.0,
                )?);
            }
            all_lights = Some(lights);
        }

        views.push(ViewEntry {
            calib: PathBuf::from(dir_name).join("calib.txt"),
            mask: PathBuf::from(dir_name).join("mask.png"),
            normals_est: PathBuf::from(dir_name).join("normals_est.f32"),
            depth_est: PathBuf::from(dir_name).join("depth_est.f32"),
            depth_gt: vdir
                .join("depth_gt.f32")
                .exists()
                .then(|| PathBuf::from(dir_name).join("depth_gt.f32")),
            normals_gt: vdir
                .join("normals_gt.f32")
                .exists()
                .then(|| PathBuf::from(dir_name).join("normals_gt.f32")),
            images: list_numbered_images(&vdir, dir_name)?,
        });
        warnings.push(format!(
            "{dir_name}: average object distance {d_avg:.1} mm"
        ));
    }

    let lights = all_lights.expect("first view populates the rig");
    let lights_rel = PathBuf::from("stereops_converted/lights.txt");
    write_lights(&root.join(&lights_rel), &lights)?;

    let counts: Vec<usize> = views.iter().map(|v| v.images.len()).collect();
    if counts[0] != counts[1] {
        return Err(DataError::LightCountMismatch { counts });
    }
    if counts[0] < 3 {
        return Err(DataError::TooFewLights { found: counts[0] });
    }
    if counts[0] != lights.len() {
        return Err(manifest_err(
            root,
            format!(
                "{} light images per view but {} calibrated lights",
                counts[0],
                lights.len()
            ),
        ));
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        views,
        lights_file: lights_rel,
        intensity_scale: 1.0,
        warnings,
    };
    // Root-level so the file references resolve against the capture root.
    let manifest_path = root.join("stereops_manifest.txt");
    write_manifest(&manifest_path, &manifest)?;
    load_manifest(&manifest_path).map(|mut m| {
        m.warnings = manifest.warnings.clone();
        m
    })
}

fn read_direction_table(path: &Path) -> Result<Vec<Vector3<f64>>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = parse_reals(path, "light direction", &line.split_whitespace().collect::<Vec<_>>())?;
        if vals.len() != 3 {
            return Err(DataError::Parse {
                path: path.into(),
                what: format!("direction row '{line}'"),
                detail: "expected 3 reals".into(),
            });
        }
        out.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(out)
}

/// Intensity rows are either scalar or RGB; RGB collapses to luminance.
fn read_intensity_table(path: &Path) -> Result<Vec<f64>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = parse_reals(path, "light intensity", &line.split_whitespace().collect::<Vec<_>>())?;
        match vals.as_slice() {
            [v] => out.push(*v),
            [r, g, b] => out.push(0.2126 * r + 0.7152 * g + 0.0722 * b),
            _ => {
                return Err(DataError::Parse {
                    path: path.into(),
                    what: format!("intensity row '{line}'"),
                    detail: "expected 1 or 3 reals".into(),
                })
            }
        }
    }
    Ok(out)
}

fn list_numbered_images(vdir: &Path, dir_name: &str) -> Result<Vec<PathBuf>, DataError> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(vdir).map_err(io_err(vdir))? {
        let entry = entry.map_err(io_err(vdir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Ok(idx) = stem.parse::<usize>() {
                numbered.push((idx, PathBuf::from(dir_name).join(&name)));
            }
        }
    }
    numbered.sort_by_key(|(i, _)| *i);
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use tempfile::TempDir;

    use super::*;

    fn tmp() -> TempDir {
        TempDir::new().expect("create temp dir")
    }

    #[test]
    fn f32_map_round_trips_exactly() {
        let dir = tmp();
        let path = dir.path().join("map.f32");
        let data = Array3::from_shape_fn((5, 7, 3), |(i, j, c)| {
            (i as f32 * 0.37 - j as f32 * 1.21 + c as f32).sin()
        });
        write_f32_map(&path, &data).unwrap();
        let back = read_f32_map(&path).unwrap();
        assert_eq!(back.dim(), (5, 7, 3));
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_map_rejects_bad_magic_and_truncation() {
        let dir = tmp();
        let path = dir.path().join("bad.f32");
        fs::write(&path, b"WRONG-MAGIC\n1 1 1\n\0\0\0\0").unwrap();
        assert!(matches!(
            read_f32_map(&path),
            Err(DataError::BadMagic { .. })
        ));

        let data = Array3::from_elem((2, 2, 1), 1.0f32);
        write_f32_map(&path, &data).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_f32_map(&path),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn gray16_png_round_trips_to_quantization() {
        let dir = tmp();
        let path = dir.path().join("img.png");
        let img = Array2::from_shape_fn((9, 11), |(i, j)| {
            ((i * 11 + j) as f64 / 98.0).clamp(0.0, 1.0)
        });
        write_gray16_png(&path, &img).unwrap();
        let back = read_image01(&path).unwrap();
        assert_eq!(back.dim(), (9, 11));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12, "{a} vs {b}");
            let requantized = (b * 65535.0).round() / 65535.0;
            assert_abs_diff_eq!(*b, requantized, epsilon = 1e-12);
        }
    }

    #[test]
    fn rgb_images_collapse_to_standard_luminance() {
        let dir = tmp();
        let white = dir.path().join("white.png");
        let red = dir.path().join("red.png");
        let w = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_pixel(
            3,
            2,
            image::Rgb([255, 255, 255]),
        );
        w.save(&white).unwrap();
        let r = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_pixel(
            3,
            2,
            image::Rgb([255, 0, 0]),
        );
        r.save(&red).unwrap();
        let w01 = read_image01(&white).unwrap();
        let r01 = read_image01(&red).unwrap();
        assert_abs_diff_eq!(w01[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r01[[1, 2]], 0.2126, epsilon = 1e-12);
    }

    #[test]
    fn mask_round_trips() {
        let dir = tmp();
        let path = dir.path().join("mask.png");
        let mask = Array2::from_shape_fn((6, 4), |(i, j)| (i + j) % 3 == 0);
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    #[test]
    fn calib_round_trips_at_full_precision() {
        let dir = tmp();
        let path = dir.path().join("calib.txt");
        let pose = RigidTransform::look_at(
            Vector3::new(30.0, -2.0, -170.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let cam = Camera::new(151.3, 152.7, 31.5, 23.5, 64, 48, pose).unwrap();
        write_calib(&path, &cam).unwrap();
        let back = read_calib(&path).unwrap();
        assert_eq!(back.fx().to_bits(), cam.fx().to_bits());
        assert_eq!(back.fy().to_bits(), cam.fy().to_bits());
        assert_eq!(back.cx().to_bits(), cam.cx().to_bits());
        assert_eq!(back.cy().to_bits(), cam.cy().to_bits());
        assert_eq!((back.width(), back.height()), (64, 48));
        let (ra, rb) = (
            cam.cam_to_world().rotation(),
            back.cam_to_world().rotation(),
        );
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(ra[(i, j)].to_bits(), rb[(i, j)].to_bits());
            }
        }
        let (ta, tb) = (
            cam.cam_to_world().translation(),
            back.cam_to_world().translation(),
        );
        for c in 0..3 {
            assert_eq!(ta[c].to_bits(), tb[c].to_bits());
        }
    }

    #[test]
    fn lights_round_trip_and_missing_mu_warns() {
        let dir = tmp();
        let path = dir.path().join("lights.txt");
        let lights = vec![
            LightSource::new(
                Vector3::new(120.0, 0.0, -170.0),
                30000.0,
                Vector3::new(0.0, 0.0, 1.0),
                1.5,
            )
            .unwrap(),
            LightSource::new(
                Vector3::new(-60.0, 103.9, -170.0),
                29000.0,
                Vector3::new(0.0, 1.0, 0.0),
                0.0,
            )
            .unwrap(),
        ];
        write_lights(&path, &lights).unwrap();
        let (back, warnings) = read_lights(&path).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].position, lights[0].position);
        assert_eq!(back[0].dissipation, 1.5);
        assert_eq!(back[1].brightness, 29000.0);

        // A record without the trailing mu field: assumed isotropic.
        fs::write(
            &path,
            format!("{LIGHTS_MAGIC}\n0 1.0 2.0 -170.0 5000.0 0.0 0.0 1.0\n"),
        )
        .unwrap();
        let (back, warnings) = read_lights(&path).unwrap();
        assert_eq!(back[0].dissipation, 0.0);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("assuming 0"));
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tmp();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = Checkpoint {
            meta: vec![
                ("epoch".into(), "17".into()),
                ("config".into(), "hidden=2,width=48".into()),
            ],
            arrays: vec![
                (
                    "net.layer0.weight".into(),
                    ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 4]), |ix| {
                        (ix[0] * 4 + ix[1]) as f64 * 0.123456789012345
                    }),
                ),
                (
                    "rng.word_pos".into(),
                    ArrayD::from_elem(ndarray::IxDyn(&[1]), 8192.0),
                ),
            ],
        };
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_reports_versioned_error() {
        let dir = tmp();
        let path = dir.path().join("trunc.ckpt");
        let ckpt = Checkpoint {
            meta: vec![],
            arrays: vec![(
                "w".into(),
                ArrayD::from_elem(ndarray::IxDyn(&[8]), 1.25),
            )],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(DataError::Truncated { .. })
        ));

        fs::write(&path, b"STEREOPS-CKPT-0\nmeta 0\narrays 0\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(DataError::BadMagic { .. })
        ));
    }

    /// Builds a minimal on-disk dataset and returns its manifest path.
    fn write_tiny_dataset(root: &Path, n_lights: usize) -> PathBuf {
        for k in 0..2 {
            let vdir = root.join(format!("view{k}"));
            fs::create_dir_all(&vdir).unwrap();
            let pose = RigidTransform::look_at(
                Vector3::new(if k == 0 { -30.0 } else { 30.0 }, 0.0, -170.0),
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            )
            .unwrap();
            let cam = Camera::new(100.0, 100.0, 3.5, 2.5, 8, 6, pose).unwrap();
            write_calib(&vdir.join("calib.txt"), &cam).unwrap();
            write_mask_png(&vdir.join("mask.png"), &Array2::from_elem((6, 8), true)).unwrap();
            let mut normals = Array3::<f32>::zeros((6, 8, 3));
            normals.index_axis_mut(ndarray::Axis(2), 2).fill(-1.0);
            write_f32_map(&vdir.join("normals_est.f32"), &normals).unwrap();
            write_f32_map(
                &vdir.join("depth_est.f32"),
                &Array3::from_elem((6, 8, 1), 170.0),
            )
            .unwrap();
            for m in 0..n_lights {
                write_gray16_png(
                    &vdir.join(format!("light_{m:03}.png")),
                    &Array2::from_elem((6, 8), 0.25 + 0.01 * m as f64),
                )
                .unwrap();
            }
        }
        let lights: Vec<LightSource> = (0..n_lights)
            .map(|m| {
                let angle = std::f64::consts::TAU * m as f64 / n_lights as f64;
                LightSource::new(
                    Vector3::new(120.0 * angle.cos(), 120.0 * angle.sin(), -170.0),
                    30000.0,
                    Vector3::new(0.0, 0.0, 1.0),
                    1.0,
                )
                .unwrap()
            })
            .collect();
        write_lights(&root.join("lights.txt"), &lights).unwrap();
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            views: (0..2)
                .map(|k| ViewEntry {
                    calib: PathBuf::from(format!("view{k}/calib.txt")),
                    mask: PathBuf::from(format!("view{k}/mask.png")),
                    normals_est: PathBuf::from(format!("view{k}/normals_est.f32")),
                    depth_est: PathBuf::from(format!("view{k}/depth_est.f32")),
                    depth_gt: None,
                    normals_gt: None,
                    images: (0..n_lights)
                        .map(|m| PathBuf::from(format!("view{k}/light_{m:03}.png")))
                        .collect(),
                })
                .collect(),
            lights_file: PathBuf::from("lights.txt"),
            intensity_scale: 1.0,
            warnings: Vec::new(),
        };
        let path = root.join("manifest.txt");
        write_manifest(&path, &manifest).unwrap();
        path
    }

    #[test]
    fn manifest_round_trips_and_loads_views() {
        let dir = tmp();
        let path = write_tiny_dataset(dir.path(), 4);
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.views.len(), 2);
        assert_eq!(manifest.n_lights(), 4);
        let (lights, warnings) = manifest.load_lights().unwrap();
        assert_eq!(lights.len(), 4);
        assert!(warnings.is_empty());

        let view = manifest.load_view(0).unwrap();
        assert_eq!(view.mask.dim(), (6, 8));
        assert_eq!(view.images.len(), 4);
        assert_abs_diff_eq!(view.images[0][[0, 0]], 0.25, epsilon = 1e-4);
        // Camera-frame flat normals become world-frame camera-facing ones.
        let n = Vector3::new(
            view.normals_est[[3, 3, 0]],
            view.normals_est[[3, 3, 1]],
            view.normals_est[[3, 3, 2]],
        );
        let axis = view.camera.cam_to_world().rotation() * Vector3::new(0.0, 0.0, -1.0);
        assert_abs_diff_eq!(n.dot(&axis), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(view.depth_est[[2, 2]], 170.0, epsilon = 1e-4);
    }

    #[test]
    fn manifest_names_the_missing_file() {
        let dir = tmp();
        let path = write_tiny_dataset(dir.path(), 4);
        fs::remove_file(dir.path().join("view1/light_002.png")).unwrap();
        match load_manifest(&path) {
            Err(DataError::MissingFile { path }) => {
                assert!(path.to_string_lossy().contains("light_002.png"));
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_too_few_lights_and_count_mismatch() {
        let dir = tmp();
        let path = write_tiny_dataset(dir.path(), 2);
        assert!(matches!(
            load_manifest(&path),
            Err(DataError::TooFewLights { found: 2 })
        ));

        let dir = tmp();
        let path = write_tiny_dataset(dir.path(), 4);
        // Drop the last image of view 1 only.
        let text = fs::read_to_string(&path).unwrap();
        let mut seen_view1 = false;
        let mut out = String::new();
        for line in text.lines() {
            if line == "[view 1]" {
                seen_view1 = true;
            }
            if seen_view1 && line.starts_with("image 3") {
                continue;
            }
            out.push_str(line);
            out.push('\n');
        }
        fs::write(&path, out).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(DataError::LightCountMismatch { .. })
        ));
    }

    #[test]
    fn diligent_adapter_builds_two_view_isotropic_manifest() {
        let dir = tmp();
        let root = dir.path();
        let n_lights = 96usize;
        let d_true = 1500.0f32;
        for name in ["view_01", "view_02"] {
            let vdir = root.join(name);
            fs::create_dir_all(&vdir).unwrap();
            let pose = RigidTransform::look_at(
                Vector3::new(if name.ends_with('1') { -50.0 } else { 50.0 }, 0.0, -1500.0),
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            )
            .unwrap();
            let cam = Camera::new(4000.0, 4000.0, 3.5, 3.5, 8, 8, pose).unwrap();
            write_calib(&vdir.join("calib.txt"), &cam).unwrap();
            write_mask_png(&vdir.join("mask.png"), &Array2::from_elem((8, 8), true)).unwrap();
            let mut normals = Array3::<f32>::zeros((8, 8, 3));
            normals.index_axis_mut(ndarray::Axis(2), 2).fill(-1.0);
            write_f32_map(&vdir.join("normals_est.f32"), &normals).unwrap();
            write_f32_map(
                &vdir.join("depth_est.f32"),
                &Array3::from_elem((8, 8, 1), d_true),
            )
            .unwrap();
            let mut dirs = String::new();
            let mut intens = String::new();
            for m in 0..n_lights {
                let angle = std::f64::consts::TAU * m as f64 / n_lights as f64;
                // Camera-frame directions tilted toward the camera.
                dirs.push_str(&format!(
                    "{} {} {}\n",
                    0.3 * angle.cos(),
                    0.3 * angle.sin(),
                    -(1.0f64 - 0.09).sqrt()
                ));
                intens.push_str("2.0 2.0 2.0\n");
                write_gray16_png(
                    &vdir.join(format!("{:03}.png", m + 1)),
                    &Array2::from_elem((8, 8), 0.5),
                )
                .unwrap();
            }
            fs::write(vdir.join("light_directions.txt"), dirs).unwrap();
            fs::write(vdir.join("light_intensities.txt"), intens).unwrap();
        }

        let manifest = diligent_adapter(root).unwrap();
        assert_eq!(manifest.views.len(), 2);
        assert_eq!(manifest.n_lights(), 96);
        let (lights, _) = manifest.load_lights().unwrap();
        assert_eq!(lights.len(), 96);
        for l in &lights {
            assert_eq!(l.dissipation, 0.0);
            // Far-field compensation: brightness = luminance * d_avg^2.
            assert_abs_diff_eq!(
                l.brightness,
                2.0 * (d_true as f64) * (d_true as f64),
                epsilon = 1.0
            );
        }
        assert!(manifest
            .warnings
            .iter()
            .any(|w| w.contains("compensated")));
        assert!(!manifest.warnings.is_empty());

        // Lights sit one average-distance away from the object center.
        let view = manifest.load_view(0).unwrap();
        let center = view
            .camera
            .cam_to_world()
            .apply(&Vector3::new(0.0, 0.0, d_true as f64));
        for l in &lights {
            assert_abs_diff_eq!((l.position - center).norm(), d_true as f64, epsilon = 1e-6);
        }
    }
}
