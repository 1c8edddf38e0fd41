//! Two-stage surface and reflectance optimization.
//!
//! The initialization stage fits the coordinate network to the per-view
//! depth and normal estimates projected into the shared world frame, with
//! a small coordinate jitter so the two views' disagreeing surfaces pull
//! the network toward their average instead of two copies. The main stage
//! refines surface, albedo, and BRDF by marching camera rays, compositing
//! the network's predictions volumetrically, and comparing rendered
//! against observed intensities once rendering is enabled.

use std::fmt::Write as FmtWrite;
use std::io::Write as IoWrite;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{Checkpoint, DataError, DatasetManifest, ViewData};
use crate::diffmath::{Adam, AdamState, Tape, TapeMark, Value};
use crate::geometry::{volumetric_reduce, GeometryError};
use crate::heightmap::{HeightmapNetwork, SirenConfig};
use crate::losses::{
    angular_normal_loss_deg_tape, depth_loss_tape, masked_mean, regularizers_tape,
    rendering_loss_tape, sample_weights, LossError, LossWeights,
};
use crate::shading::{
    light_vectors_tape, render_intensity, soft_shadow, BrdfNet, LightSource, ShadingError,
    ShadowQueries, SHADOW_SAMPLES,
};

/// Coarse subdivisions when searching a ray for its surface crossing.
const SURFACE_MARCH_STEPS: usize = 64;

/// Short-lived reborrow of an optional progress sink, so one `Option` can
/// feed several sequential writers.
fn reborrow<'s>(log: &'s mut Option<&mut dyn IoWrite>) -> Option<&'s mut dyn IoWrite> {
    match log {
        Some(w) => Some(&mut **w),
        None => None,
    }
}
/// Soft-shadow attenuation below this counts a light as occluded when
/// tallying per-sample shadow counts.
const HARD_SHADOW_LEVEL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("view {view} has an empty foreground mask")]
    EmptyMask { view: usize },
    #[error("invalid sample at view {view} pixel ({u}, {v}): {reason}")]
    BadSample {
        view: usize,
        u: usize,
        v: usize,
        reason: String,
    },
    #[error("main stage requires a completed initialization stage")]
    InitNotRun,
    #[error("non-finite loss in {stage} stage, epoch {epoch}, batch {batch}:\n{dump}")]
    NanLoss {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        dump: String,
    },
    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),
    #[error("progress log write failed: {0}")]
    Log(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Shading(#[from] ShadingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which data terms drive the main stage. Initialization always runs on
/// normals and depth regardless of the mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    NormalsOnly,
    IntensitiesOnly,
    NormalsPlusIntensities,
}

impl LossMode {
    pub fn uses_normals(self) -> bool {
        !matches!(self, LossMode::IntensitiesOnly)
    }

    pub fn uses_intensities(self) -> bool {
        !matches!(self, LossMode::NormalsOnly)
    }

    pub fn key(self) -> &'static str {
        match self {
            LossMode::NormalsOnly => "normals_only",
            LossMode::IntensitiesOnly => "intensities_only",
            LossMode::NormalsPlusIntensities => "normals_plus_intensities",
        }
    }

    pub fn from_key(key: &str) -> Result<Self, TrainError> {
        match key {
            "normals_only" => Ok(LossMode::NormalsOnly),
            "intensities_only" => Ok(LossMode::IntensitiesOnly),
            "normals_plus_intensities" => Ok(LossMode::NormalsPlusIntensities),
            other => Err(TrainError::BadConfig(format!("unknown loss mode {other:?}"))),
        }
    }
}

/// Every knob of the two training stages. The two `*_like` presets carry
/// the published schedule for the two capture rigs; `synthetic_small` is a
/// CPU-scale variant for the synthetic oracle scenes.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub init_epochs: usize,
    pub main_epochs: usize,
    pub init_batch: usize,
    pub main_batch: usize,
    pub depth_samples_per_ray: usize,
    pub shadow_samples: usize,
    /// Main-stage epoch index (0-based) at which rendering and shadows
    /// turn on; earlier epochs train on normals and regularizers only.
    pub render_enable_epoch: usize,
    /// Half-width of the uniform world-coordinate jitter at init.
    pub augment_mm: f64,
    pub rng_seed: u64,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// Rays are sampled this far (mm) to either side of the initialized
    /// surface along each pixel ray.
    pub depth_window_mm: f64,
    pub siren: SirenConfig,
    /// World mm → normalized network coordinates.
    pub coordinate_scale: f64,
}

impl TrainConfig {
    pub fn diligent_like() -> Self {
        TrainConfig {
            init_epochs: 300,
            main_epochs: 300,
            init_batch: 16384,
            main_batch: 512,
            depth_samples_per_ray: 128,
            shadow_samples: SHADOW_SAMPLES,
            render_enable_epoch: 10,
            augment_mm: 1.0,
            rng_seed: 0,
            loss_mode: LossMode::NormalsPlusIntensities,
            weights: LossWeights::diligent_like(),
            learning_rate: 1e-4,
            depth_window_mm: 15.0,
            siren: SirenConfig::default(),
            coordinate_scale: 0.01,
        }
    }

    pub fn luces_like() -> Self {
        TrainConfig {
            init_epochs: 30,
            main_epochs: 50,
            main_batch: 1024,
            render_enable_epoch: 2,
            weights: LossWeights::luces_like(),
            ..Self::diligent_like()
        }
    }

    /// Small network and batches sized so the synthetic oracle scenes train
    /// in minutes on a CPU; schedule mirrors the near-field rig preset.
    pub fn synthetic_small() -> Self {
        TrainConfig {
            init_epochs: 30,
            main_epochs: 50,
            init_batch: 2048,
            main_batch: 256,
            depth_samples_per_ray: 64,
            render_enable_epoch: 2,
            weights: LossWeights::luces_like(),
            learning_rate: 5e-4,
            siren: SirenConfig {
                hidden_layers: 2,
                hidden_width: 48,
                first_layer_frequency: 18.0,
                hidden_frequency: 12.0,
                input_dim: 2,
                output_dim: 2,
            },
            ..Self::diligent_like()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.init_batch == 0 || self.main_batch == 0 {
            return bad(format!(
                "batch sizes must be >= 1, got init {} main {}",
                self.init_batch, self.main_batch
            ));
        }
        if self.depth_samples_per_ray < 2 {
            return bad(format!(
                "depth_samples_per_ray must be >= 2, got {}",
                self.depth_samples_per_ray
            ));
        }
        if self.shadow_samples != SHADOW_SAMPLES {
            return bad(format!(
                "shadow marching is fixed at {SHADOW_SAMPLES} samples, got {}",
                self.shadow_samples
            ));
        }
        if self.render_enable_epoch > self.main_epochs {
            return bad(format!(
                "render_enable_epoch {} exceeds main_epochs {}",
                self.render_enable_epoch, self.main_epochs
            ));
        }
        if !(self.augment_mm.is_finite() && self.augment_mm >= 0.0) {
            return bad(format!("augment_mm must be >= 0, got {}", self.augment_mm));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.depth_window_mm.is_finite() && self.depth_window_mm > 0.0) {
            return bad(format!(
                "depth_window_mm must be positive, got {}",
                self.depth_window_mm
            ));
        }
        if !(self.coordinate_scale.is_finite() && self.coordinate_scale > 0.0) {
            return bad(format!(
                "coordinate_scale must be positive, got {}",
                self.coordinate_scale
            ));
        }
        self.siren
            .validate()
            .map_err(|e| TrainError::BadConfig(format!("siren: {e}")))?;
        self.weights.validate()?;
        Ok(())
    }

    /// Key-value form shared by checkpoints and config files.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let f = |v: f64| format!("{v:.17e}");
        vec![
            ("init_epochs".into(), self.init_epochs.to_string()),
            ("main_epochs".into(), self.main_epochs.to_string()),
            ("init_batch".into(), self.init_batch.to_string()),
            ("main_batch".into(), self.main_batch.to_string()),
            (
                "depth_samples_per_ray".into(),
                self.depth_samples_per_ray.to_string(),
            ),
            ("shadow_samples".into(), self.shadow_samples.to_string()),
            (
                "render_enable_epoch".into(),
                self.render_enable_epoch.to_string(),
            ),
            ("augment_mm".into(), f(self.augment_mm)),
            ("rng_seed".into(), self.rng_seed.to_string()),
            ("loss_mode".into(), self.loss_mode.key().into()),
            ("w_normal".into(), f(self.weights.w_normal)),
            ("w_render".into(), f(self.weights.w_render)),
            ("w_depth".into(), f(self.weights.w_depth)),
            ("w_reg_normal".into(), f(self.weights.w_reg_normal)),
            ("w_reg_depth".into(), f(self.weights.w_reg_depth)),
            ("learning_rate".into(), f(self.learning_rate)),
            ("depth_window_mm".into(), f(self.depth_window_mm)),
            ("hidden_layers".into(), self.siren.hidden_layers.to_string()),
            ("hidden_width".into(), self.siren.hidden_width.to_string()),
            (
                "first_layer_frequency".into(),
                f(self.siren.first_layer_frequency),
            ),
            ("hidden_frequency".into(), f(self.siren.hidden_frequency)),
            ("coordinate_scale".into(), f(self.coordinate_scale)),
        ]
    }

    /// Parses the key-value form, starting from the near-field preset for
    /// any omitted key. Unknown keys are rejected so typos fail loudly.
    pub fn from_key_values(pairs: &[(String, String)]) -> Result<Self, TrainError> {
        let mut cfg = Self::luces_like();
        for (key, value) in pairs {
            let num = || -> Result<f64, TrainError> {
                value
                    .parse::<f64>()
                    .map_err(|_| TrainError::BadConfig(format!("bad number for {key}: {value:?}")))
            };
            let int = || -> Result<usize, TrainError> {
                value
                    .parse::<usize>()
                    .map_err(|_| TrainError::BadConfig(format!("bad count for {key}: {value:?}")))
            };
            match key.as_str() {
                "init_epochs" => cfg.init_epochs = int()?,
                "main_epochs" => cfg.main_epochs = int()?,
                "init_batch" => cfg.init_batch = int()?,
                "main_batch" => cfg.main_batch = int()?,
                "depth_samples_per_ray" => cfg.depth_samples_per_ray = int()?,
                "shadow_samples" => cfg.shadow_samples = int()?,
                "render_enable_epoch" => cfg.render_enable_epoch = int()?,
                "augment_mm" => cfg.augment_mm = num()?,
                "rng_seed" => {
                    cfg.rng_seed = value.parse::<u64>().map_err(|_| {
                        TrainError::BadConfig(format!("bad seed: {value:?}"))
                    })?;
                }
                "loss_mode" => cfg.loss_mode = LossMode::from_key(value)?,
                "w_normal" => cfg.weights.w_normal = num()?,
                "w_render" => cfg.weights.w_render = num()?,
                "w_depth" => cfg.weights.w_depth = num()?,
                "w_reg_normal" => cfg.weights.w_reg_normal = num()?,
                "w_reg_depth" => cfg.weights.w_reg_depth = num()?,
                "learning_rate" => cfg.learning_rate = num()?,
                "depth_window_mm" => cfg.depth_window_mm = num()?,
                "hidden_layers" => cfg.siren.hidden_layers = int()?,
                "hidden_width" => cfg.siren.hidden_width = int()?,
                "first_layer_frequency" => cfg.siren.first_layer_frequency = num()?,
                "hidden_frequency" => cfg.siren.hidden_frequency = num()?,
                "coordinate_scale" => cfg.coordinate_scale = num()?,
                other => {
                    return Err(TrainError::BadConfig(format!("unknown config key {other:?}")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One foreground pixel's training record, fixed for the whole run.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub view: usize,
    /// (u, v) = (column, row).
    pub pixel: (usize, usize),
    /// World-frame unit normal target.
    pub normal_target: [f64; 3],
    /// World z of the projected per-view estimate (init target, mm).
    pub depth_target_mm: f64,
    /// World xy of the projected estimate (init network input, mm).
    pub xy_world: (f64, f64),
    /// Observed per-light intensities, linear [0, 1].
    pub intensities: Vec<f64>,
    pub valid_lights: Vec<bool>,
    /// Unit world direction from the surface toward the camera.
    pub view_dir: [f64; 3],
    /// Unit world direction of the pixel ray, away from the camera.
    pub ray_dir: [f64; 3],
    /// Along-ray distance of the projected estimate (mm).
    pub ray_t_est: f64,
}

/// Per-sample state the stages update as training progresses.
#[derive(Clone, Debug)]
struct SampleState {
    /// Along-ray distance of the initialized surface; center of the
    /// main-stage sampling window.
    t_surface: f64,
    /// Normal-loss weight from the latest hard-shadow tally.
    w_n: f64,
    /// Rendering-loss weight, the square of `w_n`.
    w_r: f64,
    /// Ground-truth world point under this pixel, when the dataset has one.
    gt_xy: Option<(f64, f64)>,
    gt_z: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Main,
}

/// Per-epoch mean losses and bookkeeping. Terms inactive during an epoch
/// are NaN (e.g. rendering before it is enabled).
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean facing-weighted normal error, degrees.
    pub normal_loss: f64,
    /// Mean absolute intensity error over valid lights.
    pub render_loss: f64,
    /// Mean absolute depth error against init targets, mm.
    pub depth_loss: f64,
    /// Mean combined regularizer value.
    pub reg_loss: f64,
    /// Weighted total actually optimized.
    pub total_loss: f64,
    pub learning_rate: f64,
    pub seconds: f64,
    /// Mean |height - GT| over GT pixels, mm; NaN without ground truth.
    pub shape_mean_mm: f64,
    pub shape_median_mm: f64,
}

impl EpochStats {
    /// The five loss fields, for bit-exact determinism comparisons that
    /// must ignore wall time.
    pub fn loss_bits(&self) -> [u64; 5] {
        [
            self.normal_loss.to_bits(),
            self.render_loss.to_bits(),
            self.depth_loss.to_bits(),
            self.reg_loss.to_bits(),
            self.total_loss.to_bits(),
        ]
    }

    fn to_row(self) -> [f64; 11] {
        [
            match self.stage {
                Stage::Init => 0.0,
                Stage::Main => 1.0,
            },
            self.epoch as f64,
            self.normal_loss,
            self.render_loss,
            self.depth_loss,
            self.reg_loss,
            self.total_loss,
            self.learning_rate,
            self.seconds,
            self.shape_mean_mm,
            self.shape_median_mm,
        ]
    }

    fn from_row(row: &[f64]) -> Self {
        EpochStats {
            stage: if row[0] == 0.0 { Stage::Init } else { Stage::Main },
            epoch: row[1] as usize,
            normal_loss: row[2],
            render_loss: row[3],
            depth_loss: row[4],
            reg_loss: row[5],
            total_loss: row[6],
            learning_rate: row[7],
            seconds: row[8],
            shape_mean_mm: row[9],
            shape_median_mm: row[10],
        }
    }
}

/// Owns the networks, optimizer, RNG stream, and sample set for one run.
///
/// All randomness flows from the single seeded stream in a fixed order
/// (network init, then per-epoch shuffles and jitters), so a fixed seed
/// reproduces the loss history bit for bit, and a checkpoint's stream
/// position resumes it exactly.
pub struct Trainer {
    cfg: TrainConfig,
    tape: Tape,
    net: HeightmapNetwork,
    brdf: BrdfNet,
    adam: Adam,
    rng: ChaCha8Rng,
    base_mark: TapeMark,
    views: Vec<ViewData>,
    lights: Vec<LightSource>,
    samples: Vec<TrainSample>,
    state: Vec<SampleState>,
    history: Vec<EpochStats>,
    init_epochs_done: usize,
    init_done: bool,
    main_epochs_done: usize,
}

/// Running numerator/denominator for one loss term across an epoch.
#[derive(Default, Clone, Copy)]
struct TermMean {
    sum: f64,
    count: usize,
}

impl TermMean {
    fn add(&mut self, mean: f64, count: usize) {
        self.sum += mean * count as f64;
        self.count += count;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

impl Trainer {
    pub fn new(manifest: &DatasetManifest, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (lights, _ingest_warnings) = manifest.load_lights()?;
        let mut views = Vec::with_capacity(manifest.views.len());
        for k in 0..manifest.views.len() {
            views.push(manifest.load_view(k)?);
        }

        let (samples, state) = build_samples(&views, &lights)?;

        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let net = HeightmapNetwork::new(&tape, cfg.siren.clone(), cfg.coordinate_scale, &mut rng);
        let brdf = BrdfNet::new(&tape, &mut rng);
        let mut params = net.params();
        params.extend(brdf.params());
        let adam = Adam::new(params, cfg.learning_rate);
        let base_mark = tape.mark();

        let mut trainer = Trainer {
            cfg,
            tape,
            net,
            brdf,
            adam,
            rng,
            base_mark,
            views,
            lights,
            samples,
            state,
            history: Vec::new(),
            init_epochs_done: 0,
            init_done: false,
            main_epochs_done: 0,
        };
        trainer.warm_start_height();
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &HeightmapNetwork {
        &self.net
    }

    pub fn brdf(&self) -> &BrdfNet {
        &self.brdf
    }

    pub fn lights(&self) -> &[LightSource] {
        &self.lights
    }

    pub fn views(&self) -> &[ViewData] {
        &self.views
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn init_done(&self) -> bool {
        self.init_done
    }

    pub fn main_epochs_done(&self) -> usize {
        self.main_epochs_done
    }

    /// Both stages back to back.
    pub fn run(&mut self, mut log: Option<&mut dyn IoWrite>) -> Result<(), TrainError> {
        self.init_stage(reborrow(&mut log))?;
        self.main_stage(log)
    }

    /// Seeds the network's height output with the mean projected estimate
    /// depth so the initial surface sits inside the sampling window.
    fn warm_start_height(&mut self) {
        let mean_z: f64 =
            self.samples.iter().map(|s| s.depth_target_mm).sum::<f64>() / self.samples.len() as f64;
        let mut named = self.net.export_weights();
        for (name, data) in named.iter_mut() {
            if name == "surface.head.bias" {
                data[[0]] = mean_z * self.cfg.coordinate_scale;
            }
        }
        self.net
            .import_weights(&named)
            .expect("own exported weights always re-import");
    }

    /// Fits the network to the projected per-view estimates with depth and
    /// normal losses under a +/- augment_mm world-coordinate jitter.
    pub fn init_stage(&mut self, mut log: Option<&mut dyn IoWrite>) -> Result<(), TrainError> {
        if self.init_done {
            return Ok(());
        }
        if self.init_epochs_done == 0 {
            self.log_header(reborrow(&mut log))?;
        }
        let n = self.samples.len();
        for epoch in self.init_epochs_done..self.cfg.init_epochs {
            let clock = Instant::now();
            let order = self.shuffled_indices(n);
            let mut normal_term = TermMean::default();
            let mut depth_term = TermMean::default();
            let mut total_term = TermMean::default();

            for (batch_idx, chunk) in order.chunks(self.cfg.init_batch).enumerate() {
                self.ensure_finite_params("init", epoch, batch_idx, chunk)?;
                let b = chunk.len();
                let mut xy = Array2::<f64>::zeros((b, 2));
                let mut z_t = Array2::<f64>::zeros((b, 1));
                let mut n_t = Array2::<f64>::zeros((b, 3));
                let mut v_t = Array2::<f64>::zeros((b, 3));
                for (i, &si) in chunk.iter().enumerate() {
                    let s = &self.samples[si];
                    let a = self.cfg.augment_mm;
                    let dx = self.rng.random_range(-a..=a);
                    let dy = self.rng.random_range(-a..=a);
                    let dz = self.rng.random_range(-a..=a);
                    xy[[i, 0]] = (s.xy_world.0 + dx) * self.cfg.coordinate_scale;
                    xy[[i, 1]] = (s.xy_world.1 + dy) * self.cfg.coordinate_scale;
                    z_t[[i, 0]] = s.depth_target_mm + dz;
                    for c in 0..3 {
                        n_t[[i, c]] = s.normal_target[c];
                        v_t[[i, c]] = s.view_dir[c];
                    }
                }

                let coords = self.tape.constant(xy.into_dyn());
                let sample = self.net.query_with_normals(&coords);
                let z_mm = sample.z.mul_s(1.0 / self.cfg.coordinate_scale);
                let l_n = angular_normal_loss_deg_tape(&sample.normal, &n_t, &v_t);
                let l_z = depth_loss_tape(&z_mm, &z_t);
                let included = vec![true; b];
                let mean_n = masked_mean(&l_n, &included);
                let mean_z_loss = masked_mean(&l_z, &included);
                let loss = mean_n
                    .mul_s(self.cfg.weights.w_normal)
                    .add(&mean_z_loss.mul_s(self.cfg.weights.w_depth));

                let (n_val, z_val, total) = (mean_n.scalar(), mean_z_loss.scalar(), loss.scalar());
                if !total.is_finite() {
                    return Err(self.nan_dump("init", epoch, batch_idx, chunk, &[
                        ("normal", n_val),
                        ("depth", z_val),
                        ("total", total),
                    ]));
                }
                normal_term.add(n_val, b);
                depth_term.add(z_val, b);
                total_term.add(total, b);

                self.tape.backward(&loss);
                self.adam.step();
                self.step_cleanup();
            }

            let (shape_mean, shape_median) = self.shape_error();
            let stats = EpochStats {
                stage: Stage::Init,
                epoch,
                normal_loss: normal_term.mean(),
                render_loss: f64::NAN,
                depth_loss: depth_term.mean(),
                reg_loss: f64::NAN,
                total_loss: total_term.mean(),
                learning_rate: self.adam.lr(),
                seconds: clock.elapsed().as_secs_f64(),
                shape_mean_mm: shape_mean,
                shape_median_mm: shape_median,
            };
            self.push_stats(stats, reborrow(&mut log))?;
            self.init_epochs_done = epoch + 1;
        }
        self.init_done = true;
        self.locate_surface_along_rays();
        Ok(())
    }

    /// Volumetric refinement along camera rays; rendering and shadow terms
    /// join once `render_enable_epoch` is reached.
    pub fn main_stage(&mut self, mut log: Option<&mut dyn IoWrite>) -> Result<(), TrainError> {
        if !self.init_done {
            return Err(TrainError::InitNotRun);
        }
        if self.main_epochs_done == 0 && self.cfg.main_epochs > 0 && self.cfg.init_epochs == 0 {
            self.log_header(reborrow(&mut log))?;
        }
        let n = self.samples.len();
        let n_samples_per_ray = self.cfg.depth_samples_per_ray;
        let halving_epoch = self.cfg.main_epochs * 4 / 5;

        for epoch in self.main_epochs_done..self.cfg.main_epochs {
            let clock = Instant::now();
            if epoch == halving_epoch && epoch > 0 {
                self.adam.set_lr(self.adam.lr() * 0.5);
            }
            let render_on =
                self.cfg.loss_mode.uses_intensities() && epoch >= self.cfg.render_enable_epoch;
            if render_on {
                self.refresh_sample_weights();
            } else {
                for st in &mut self.state {
                    st.w_n = 1.0;
                    st.w_r = 1.0;
                }
            }

            let order = self.shuffled_indices(n);
            let mut normal_term = TermMean::default();
            let mut render_term = TermMean::default();
            let mut reg_term = TermMean::default();
            let mut total_term = TermMean::default();

            for (batch_idx, chunk) in order.chunks(self.cfg.main_batch).enumerate() {
                self.ensure_finite_params("main", epoch, batch_idx, chunk)?;
                let b = chunk.len();
                let s_per = n_samples_per_ray;
                let mut z_r = Array2::<f64>::zeros((b, s_per));
                let mut xy_ray = ArrayD::<f64>::zeros(IxDyn(&[b, s_per, 2]));
                let mut pts = Array2::<f64>::zeros((b * s_per, 2));
                let mut n_t = Array2::<f64>::zeros((b, 3));
                let mut v_t = Array2::<f64>::zeros((b, 3));
                let mut w_n = Array2::<f64>::zeros((b, 1));
                let mut w_r = Array2::<f64>::zeros((b, 1));
                let mut obs = Array2::<f64>::zeros((b, self.lights.len()));
                let mut valid01 = Array2::<f64>::zeros((b, self.lights.len()));

                for (i, &si) in chunk.iter().enumerate() {
                    let s = &self.samples[si];
                    let st = &self.state[si];
                    let window = self.cfg.depth_window_mm;
                    let range = (st.t_surface - window, st.t_surface + window);
                    let ray = self.views[s.view].camera.sample_ray_jittered(
                        s.pixel.0 as f64,
                        s.pixel.1 as f64,
                        range,
                        s_per,
                        &mut self.rng,
                    )?;
                    let pw = ray.world_points();
                    for k in 0..s_per {
                        z_r[[i, k]] = pw[[k, 2]];
                        xy_ray[[i, k, 0]] = pw[[k, 0]];
                        xy_ray[[i, k, 1]] = pw[[k, 1]];
                        pts[[i * s_per + k, 0]] = pw[[k, 0]] * self.cfg.coordinate_scale;
                        pts[[i * s_per + k, 1]] = pw[[k, 1]] * self.cfg.coordinate_scale;
                    }
                    for c in 0..3 {
                        n_t[[i, c]] = s.normal_target[c];
                        v_t[[i, c]] = s.view_dir[c];
                    }
                    w_n[[i, 0]] = st.w_n;
                    w_r[[i, 0]] = st.w_r;
                    for (m, (&int, &ok)) in
                        s.intensities.iter().zip(&s.valid_lights).enumerate()
                    {
                        obs[[i, m]] = int;
                        valid01[[i, m]] = if ok { 1.0 } else { 0.0 };
                    }
                }

                let coords = self.tape.constant(pts.into_dyn());
                let sample = self.net.query_with_normals(&coords);
                let z_mm = sample
                    .z
                    .mul_s(1.0 / self.cfg.coordinate_scale)
                    .reshape(&[b, s_per]);
                let rho = sample.albedo.reshape(&[b, s_per]);
                let normals = sample.normal.reshape(&[b, s_per, 3]);
                let z_r_const = self.tape.constant(z_r.into_dyn());
                let red = volumetric_reduce(&z_r_const, &z_mm, &normals, &rho, 1.0);
                let included: Vec<bool> = red.miss.iter().map(|m| !m).collect();
                let z_hat = red.z.reshape(&[b, 1]);

                let mut terms: Vec<Value> = Vec::new();
                let mut scalars: Vec<(&'static str, f64)> = Vec::new();

                let raw_normal = if self.cfg.loss_mode.uses_normals() {
                    let l_n = angular_normal_loss_deg_tape(&red.normal, &n_t, &v_t);
                    let raw = masked_mean(&l_n, &included).scalar();
                    let weighted = l_n.mul(&self.tape.constant(w_n.into_dyn()));
                    terms.push(
                        masked_mean(&weighted, &included).mul_s(self.cfg.weights.w_normal),
                    );
                    raw
                } else {
                    f64::NAN
                };

                let raw_render = if render_on {
                    let w3 = red.weights.reshape(&[b, s_per, 1]);
                    let xy_hat = w3
                        .mul(&self.tape.constant(xy_ray.clone()))
                        .sum_axis(1, false);
                    let p_hat = Value::concat(&[xy_hat, z_hat.clone()], 1);
                    let v_const = self.tape.constant(v_t.clone().into_dyn());
                    let rendered = render_intensity(
                        &p_hat,
                        &red.normal,
                        &red.albedo.reshape(&[b, 1]),
                        &v_const,
                        &self.lights,
                        &self.brdf,
                        &ShadowQueries::Detached(&self.net),
                    )?;
                    let (l_r, lit_rows) = rendering_loss_tape(&rendered, &obs, &valid01);
                    let inc_r: Vec<bool> = included
                        .iter()
                        .zip(&lit_rows)
                        .map(|(a, b)| *a && *b)
                        .collect();
                    let raw = masked_mean(&l_r, &inc_r).scalar();
                    let weighted = l_r.mul(&self.tape.constant(w_r.into_dyn()));
                    terms.push(masked_mean(&weighted, &inc_r).mul_s(self.cfg.weights.w_render));
                    raw
                } else {
                    f64::NAN
                };

                let z_mean = {
                    let data = z_hat.data();
                    let mut sum = 0.0;
                    let mut cnt = 0usize;
                    for (i, inc) in included.iter().enumerate() {
                        if *inc {
                            sum += data[[i, 0]];
                            cnt += 1;
                        }
                    }
                    if cnt == 0 {
                        0.0
                    } else {
                        sum / cnt as f64
                    }
                };
                let l_reg = regularizers_tape(&red.normal, &z_hat, z_mean, &self.cfg.weights);
                let reg_mean = masked_mean(&l_reg, &included);
                let raw_reg = reg_mean.scalar();
                terms.push(reg_mean);

                let mut loss = terms[0].clone();
                for t in &terms[1..] {
                    loss = loss.add(t);
                }
                let total = loss.scalar();
                scalars.push(("normal", raw_normal));
                scalars.push(("render", raw_render));
                scalars.push(("regularizer", raw_reg));
                scalars.push(("total", total));
                if !total.is_finite() {
                    return Err(self.nan_dump("main", epoch, batch_idx, chunk, &scalars));
                }

                let inc_count = included.iter().filter(|x| **x).count();
                if self.cfg.loss_mode.uses_normals() {
                    normal_term.add(raw_normal, inc_count);
                }
                if render_on && raw_render.is_finite() {
                    render_term.add(raw_render, inc_count);
                }
                reg_term.add(raw_reg, inc_count);
                total_term.add(total, b);

                self.tape.backward(&loss);
                self.adam.step();
                self.step_cleanup();
            }

            let (shape_mean, shape_median) = self.shape_error();
            let stats = EpochStats {
                stage: Stage::Main,
                epoch,
                normal_loss: normal_term.mean(),
                render_loss: render_term.mean(),
                depth_loss: f64::NAN,
                reg_loss: reg_term.mean(),
                total_loss: total_term.mean(),
                learning_rate: self.adam.lr(),
                seconds: clock.elapsed().as_secs_f64(),
                shape_mean_mm: shape_mean,
                shape_median_mm: shape_median,
            };
            self.push_stats(stats, reborrow(&mut log))?;
            self.main_epochs_done = epoch + 1;
        }
        Ok(())
    }

    /// Fisher-Yates on the single RNG stream so the visit order is part of
    /// the reproducible state.
    fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    fn step_cleanup(&mut self) {
        self.tape.truncate(self.base_mark);
        self.net.rebind();
        self.brdf.rebind();
        let mut params = self.net.params();
        params.extend(self.brdf.params());
        self.adam.rebind(params);
    }

    /// Finds where each sample's pixel ray crosses the current surface and
    /// stores the along-ray distance; the fit window and shadow tallies
    /// both anchor there. Rays without a crossing keep the estimate
    /// distance.
    fn locate_surface_along_rays(&mut self) {
        let window = self.cfg.depth_window_mm;
        let n = self.samples.len();
        let steps = SURFACE_MARCH_STEPS;
        let mut pts = Array2::<f64>::zeros((n * (steps + 1), 2));
        let mut ray_z = vec![0.0f64; n * (steps + 1)];
        let mut ts = vec![0.0f64; n * (steps + 1)];
        for (i, s) in self.samples.iter().enumerate() {
            let cam = &self.views[s.view].camera;
            let origin = *cam.cam_to_world().translation();
            let t0 = self.state[i].t_surface;
            for k in 0..=steps {
                let t = t0 - window + 2.0 * window * k as f64 / steps as f64;
                let idx = i * (steps + 1) + k;
                ts[idx] = t;
                for c in 0..2 {
                    pts[[idx, c]] =
                        (origin[c] + s.ray_dir[c] * t) * self.cfg.coordinate_scale;
                }
                ray_z[idx] = origin[2] + s.ray_dir[2] * t;
            }
        }
        let (z_norm, _) = self.net.query_plain(&pts.view());
        let heights = z_norm.mapv(|z| z / self.cfg.coordinate_scale);
        for i in 0..n {
            let base = i * (steps + 1);
            let mut found = None;
            for k in 0..steps {
                let g0 = ray_z[base + k] - heights[base + k];
                let g1 = ray_z[base + k + 1] - heights[base + k + 1];
                if g0 < 0.0 && g1 >= 0.0 {
                    let frac = if g1 > g0 { -g0 / (g1 - g0) } else { 0.0 };
                    found = Some(ts[base + k] + frac * (ts[base + k + 1] - ts[base + k]));
                    break;
                }
            }
            if let Some(t) = found {
                self.state[i].t_surface = t;
            }
        }
    }

    /// Tallies, per sample, how many lights the current surface blocks and
    /// derates the sample's loss weights accordingly: mostly shadowed
    /// pixels carry unreliable estimates and renders.
    fn refresh_sample_weights(&mut self) {
        self.locate_surface_along_rays();
        let n = self.samples.len();
        let mut p = Array2::<f64>::zeros((n, 3));
        for (i, s) in self.samples.iter().enumerate() {
            let cam = &self.views[s.view].camera;
            let origin = *cam.cam_to_world().translation();
            let t = self.state[i].t_surface;
            for c in 0..3 {
                p[[i, c]] = origin[c] + s.ray_dir[c] * t;
            }
        }
        let scratch = Tape::new();
        let p_const = scratch.constant(p.into_dyn());
        let mut counts = vec![0usize; n];
        for light in &self.lights {
            let (l_hat, _, _) = light_vectors_tape(&scratch, &p_const, light);
            let s = soft_shadow(&p_const, &l_hat, &ShadowQueries::Detached(&self.net));
            let data = s.data();
            for (i, count) in counts.iter_mut().enumerate() {
                if data[[i, 0]] < HARD_SHADOW_LEVEL {
                    *count += 1;
                }
            }
        }
        for (st, count) in self.state.iter_mut().zip(&counts) {
            let w = sample_weights(*count, self.lights.len())
                .expect("count bounded by light count");
            st.w_n = w.w_n;
            st.w_r = w.w_r;
        }
    }

    /// Mean and median |network height - GT height| over pixels with
    /// ground truth, in mm; NaN when the dataset has none.
    fn shape_error(&self) -> (f64, f64) {
        let mut pts = Vec::new();
        let mut gt = Vec::new();
        for (s, st) in self.samples.iter().zip(&self.state) {
            if let (Some((x, y)), Some(z)) = (st.gt_xy, st.gt_z) {
                pts.push([x * self.cfg.coordinate_scale, y * self.cfg.coordinate_scale]);
                gt.push(z);
                let _ = s;
            }
        }
        if pts.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mut arr = Array2::<f64>::zeros((pts.len(), 2));
        for (i, p) in pts.iter().enumerate() {
            arr[[i, 0]] = p[0];
            arr[[i, 1]] = p[1];
        }
        let (z_norm, _) = self.net.query_plain(&arr.view());
        let mut errs: Vec<f64> = z_norm
            .iter()
            .zip(&gt)
            .map(|(z, g)| (z / self.cfg.coordinate_scale - g).abs())
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        errs.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let median = if errs.len() % 2 == 1 {
            errs[errs.len() / 2]
        } else {
            0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
        };
        (mean, median)
    }

    /// Divergence guard: a step that blows the parameters up to inf/NaN
    /// must abort with diagnostics before the next forward pass consumes
    /// the poisoned weights.
    fn ensure_finite_params(
        &self,
        stage: &'static str,
        epoch: usize,
        batch: usize,
        chunk: &[usize],
    ) -> Result<(), TrainError> {
        for (i, p) in self.adam.params().iter().enumerate() {
            let data = p.data();
            let bad = data.iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                let mut dump = String::new();
                let _ = writeln!(
                    dump,
                    "  parameter {i} (shape {:?}) has {bad} non-finite entries",
                    p.shape()
                );
                let err = self.nan_dump(stage, epoch, batch, chunk, &[]);
                if let TrainError::NanLoss { dump: rest, .. } = &err {
                    dump.push_str(rest);
                }
                return Err(TrainError::NanLoss {
                    stage,
                    epoch,
                    batch,
                    dump,
                });
            }
        }
        Ok(())
    }

    fn nan_dump(
        &self,
        stage: &'static str,
        epoch: usize,
        batch: usize,
        chunk: &[usize],
        scalars: &[(&'static str, f64)],
    ) -> TrainError {
        let mut dump = String::new();
        for (name, v) in scalars {
            let _ = writeln!(dump, "  {name} = {v}");
        }
        let _ = writeln!(dump, "  batch size {}", chunk.len());
        let shown = chunk.len().min(8);
        for &si in &chunk[..shown] {
            let s = &self.samples[si];
            let _ = writeln!(
                dump,
                "  sample {si}: view {} pixel ({}, {}) t_surface {:.3}",
                s.view, s.pixel.0, s.pixel.1, self.state[si].t_surface
            );
        }
        TrainError::NanLoss {
            stage,
            epoch,
            batch,
            dump,
        }
    }

    fn log_header(&self, log: Option<&mut dyn IoWrite>) -> Result<(), TrainError> {
        if let Some(w) = log {
            writeln!(
                w,
                "#stage\tepoch\tnormal_deg\trender_abs\tdepth_mm\treg\ttotal\tlr\tseconds\tshape_mean_mm\tshape_median_mm"
            )?;
        }
        Ok(())
    }

    fn push_stats(
        &mut self,
        stats: EpochStats,
        log: Option<&mut dyn IoWrite>,
    ) -> Result<(), TrainError> {
        if let Some(w) = log {
            let cell = |v: f64| {
                if v.is_nan() {
                    String::new()
                } else {
                    format!("{v:.6e}")
                }
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{}",
                match stats.stage {
                    Stage::Init => "init",
                    Stage::Main => "main",
                },
                stats.epoch,
                cell(stats.normal_loss),
                cell(stats.render_loss),
                cell(stats.depth_loss),
                cell(stats.reg_loss),
                cell(stats.total_loss),
                cell(stats.learning_rate),
                stats.seconds,
                cell(stats.shape_mean_mm),
                cell(stats.shape_median_mm),
            )?;
        }
        self.history.push(stats);
        Ok(())
    }

    /// Snapshot of everything a bit-exact resume needs.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = vec![
            ("format".to_string(), "1".to_string()),
            ("init_done".to_string(), if self.init_done { "1" } else { "0" }.to_string()),
            (
                "init_epochs_done".to_string(),
                self.init_epochs_done.to_string(),
            ),
            (
                "main_epochs_done".to_string(),
                self.main_epochs_done.to_string(),
            ),
            (
                "rng_word_pos".to_string(),
                self.rng.get_word_pos().to_string(),
            ),
            ("adam_lr".to_string(), format!("{:.17e}", self.adam.lr())),
        ];
        for (k, v) in self.cfg.to_key_values() {
            meta.push((format!("cfg.{k}"), v));
        }

        let mut arrays = self.net.export_weights();
        arrays.extend(self.brdf.export_weights());
        let state = self.adam.state();
        arrays.push((
            "adam.step".to_string(),
            ArrayD::from_elem(IxDyn(&[1]), state.step as f64),
        ));
        for (i, m) in state.m.iter().enumerate() {
            arrays.push((format!("adam.m.{i}"), m.clone()));
        }
        for (i, v) in state.v.iter().enumerate() {
            arrays.push((format!("adam.v.{i}"), v.clone()));
        }
        let t_surface =
            Array1::from_iter(self.state.iter().map(|st| st.t_surface)).into_dyn();
        arrays.push(("sample.t_surface".to_string(), t_surface));
        let mut hist = Array2::<f64>::zeros((self.history.len(), 11));
        for (i, row) in self.history.iter().enumerate() {
            for (j, v) in row.to_row().iter().enumerate() {
                hist[[i, j]] = *v;
            }
        }
        arrays.push(("history".to_string(), hist.into_dyn()));

        Checkpoint { meta, arrays }
    }

    /// Rebuilds a trainer from a checkpoint over the same dataset. The
    /// caller's config must match the checkpoint on everything except the
    /// epoch budgets, which may be extended to continue a finished run.
    pub fn resume(
        manifest: &DatasetManifest,
        ckpt: &Checkpoint,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        let meta = |key: &str| -> Result<&str, TrainError> {
            ckpt.meta_value(key)
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing meta key {key:?}")))
        };
        if meta("format")? != "1" {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported checkpoint format {:?}",
                meta("format")?
            )));
        }
        let stored: Vec<(String, String)> = ckpt
            .meta
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("cfg.").map(|name| (name.to_string(), v.clone()))
            })
            .collect();
        let stored_cfg = TrainConfig::from_key_values(&stored)?;
        for ((key, a), (_, b)) in stored_cfg
            .to_key_values()
            .iter()
            .zip(cfg.to_key_values().iter())
        {
            let extendable = key == "init_epochs" || key == "main_epochs";
            if a != b && !extendable {
                return Err(TrainError::BadCheckpoint(format!(
                    "config key {key} changed from {a} to {b}; only the epoch budgets may change on resume"
                )));
            }
        }

        let mut trainer = Trainer::new(manifest, cfg)?;
        let named: Vec<(String, ArrayD<f64>)> = ckpt
            .arrays
            .iter()
            .filter(|(k, _)| k.starts_with("surface."))
            .cloned()
            .collect();
        trainer
            .net
            .import_weights(&named)
            .map_err(TrainError::BadCheckpoint)?;
        let named: Vec<(String, ArrayD<f64>)> = ckpt
            .arrays
            .iter()
            .filter(|(k, _)| k.starts_with("brdf."))
            .cloned()
            .collect();
        trainer
            .brdf
            .import_weights(&named)
            .map_err(TrainError::BadCheckpoint)?;

        let array = |key: &str| -> Result<&ArrayD<f64>, TrainError> {
            ckpt.array(key)
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing array {key:?}")))
        };
        let n_params = trainer.adam.params().len();
        let mut m = Vec::with_capacity(n_params);
        let mut v = Vec::with_capacity(n_params);
        for i in 0..n_params {
            m.push(array(&format!("adam.m.{i}"))?.clone());
            v.push(array(&format!("adam.v.{i}"))?.clone());
        }
        let step = array("adam.step")?[[0]] as u64;
        trainer.adam.restore(AdamState { step, m, v });
        trainer.adam.set_lr(
            meta("adam_lr")?
                .parse::<f64>()
                .map_err(|_| TrainError::BadCheckpoint("bad adam_lr".into()))?,
        );

        let word_pos = meta("rng_word_pos")?
            .parse::<u128>()
            .map_err(|_| TrainError::BadCheckpoint("bad rng_word_pos".into()))?;
        trainer.rng.set_word_pos(word_pos);

        trainer.init_done = meta("init_done")? == "1";
        trainer.init_epochs_done = meta("init_epochs_done")?
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("bad init_epochs_done".into()))?;
        trainer.main_epochs_done = meta("main_epochs_done")?
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("bad main_epochs_done".into()))?;

        let t_surface = array("sample.t_surface")?;
        if t_surface.len() != trainer.state.len() {
            return Err(TrainError::BadCheckpoint(format!(
                "checkpoint has {} samples, dataset has {}",
                t_surface.len(),
                trainer.state.len()
            )));
        }
        for (st, t) in trainer.state.iter_mut().zip(t_surface.iter()) {
            st.t_surface = *t;
        }

        let hist = array("history")?;
        if hist.ndim() != 2 || (hist.shape()[0] > 0 && hist.shape()[1] != 11) {
            return Err(TrainError::BadCheckpoint("malformed history array".into()));
        }
        trainer.history = hist
            .rows()
            .into_iter()
            .map(|row| EpochStats::from_row(row.as_slice().expect("contiguous row")))
            .collect();
        Ok(trainer)
    }
}

/// Projects every foreground pixel of every view into the world frame.
fn build_samples(
    views: &[ViewData],
    lights: &[LightSource],
) -> Result<(Vec<TrainSample>, Vec<SampleState>), TrainError> {
    let mut samples = Vec::new();
    let mut state = Vec::new();
    for (view_idx, view) in views.iter().enumerate() {
        let (h, w) = view.mask.dim();
        let mut any = false;
        for row in 0..h {
            for col in 0..w {
                if !view.mask[[row, col]] {
                    continue;
                }
                any = true;
                let (u, v) = (col, row);
                let bad = |reason: String| TrainError::BadSample {
                    view: view_idx,
                    u,
                    v,
                    reason,
                };

                let depth = view.depth_est[[row, col]];
                if !(depth.is_finite() && depth > 0.0) {
                    return Err(bad(format!("estimate depth {depth} not positive")));
                }
                let mut normal = [0.0f64; 3];
                let mut norm2 = 0.0;
                for (c, n) in normal.iter_mut().enumerate() {
                    *n = view.normals_est[[row, col, c]];
                    norm2 += *n * *n;
                }
                if !(norm2.is_finite() && norm2 > 1e-12) {
                    return Err(bad("estimate normal is degenerate".into()));
                }
                let inv = norm2.sqrt().recip();
                for c in &mut normal {
                    *c *= inv;
                }

                let cam = &view.camera;
                let p_cam = cam.back_project(u as f64, v as f64, depth)?;
                let p_world = cam.cam_to_world().apply(&p_cam);
                let dir_world = cam.cam_to_world().rotation()
                    * cam.pixel_ray(u as f64, v as f64)?;
                let eye = cam.cam_to_world().translation();
                let t_est = (p_world - eye).norm();

                let mut intensities = Vec::with_capacity(view.images.len());
                for (m, img) in view.images.iter().enumerate() {
                    let val = img[[row, col]];
                    if !(0.0..=1.0).contains(&val) {
                        return Err(bad(format!("light {m} intensity {val} outside [0, 1]")));
                    }
                    intensities.push(val);
                }
                let valid_lights = vec![true; view.images.len()];

                let gt = view.depth_gt.as_ref().map(|d| d[[row, col]]).and_then(|z| {
                    let p = cam.back_project(u as f64, v as f64, z).ok()?;
                    let pw = cam.cam_to_world().apply(&p);
                    Some(((pw.x, pw.y), pw.z))
                });

                samples.push(TrainSample {
                    view: view_idx,
                    pixel: (u, v),
                    normal_target: normal,
                    depth_target_mm: p_world.z,
                    xy_world: (p_world.x, p_world.y),
                    intensities,
                    valid_lights,
                    view_dir: [-dir_world.x, -dir_world.y, -dir_world.z],
                    ray_dir: [dir_world.x, dir_world.y, dir_world.z],
                    ray_t_est: t_est,
                });
                state.push(SampleState {
                    t_surface: t_est,
                    w_n: 1.0,
                    w_r: 1.0,
                    gt_xy: gt.map(|(xy, _)| xy),
                    gt_z: gt.map(|(_, z)| z),
                });
            }
        }
        if !any {
            return Err(TrainError::EmptyMask { view: view_idx });
        }
        if view.images.len() != lights.len() {
            return Err(TrainError::BadCheckpoint(format!(
                "view {view_idx} has {} images for {} lights",
                view.images.len(),
                lights.len()
            )));
        }
    }
    Ok((samples, state))
}
