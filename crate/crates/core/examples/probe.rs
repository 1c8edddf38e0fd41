//! Scratch probe: end-to-end sphere-cap run with estimate noise, timing
//! each stage. Not part of the test suite.

use std::time::Instant;

use ndarray::Array2;
use stereops::scenegen::{generate_scene, BiasStyle, EstimateNoise, SceneSpec};
use stereops::trainer::{TrainConfig, Trainer};

fn main() {
    let dir = std::env::temp_dir().join(format!("stereops-probe-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    let envf = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let mut spec = SceneSpec::named("sphere_cap").unwrap();
    spec.estimate_noise = EstimateNoise {
        angular_sigma_deg: 5.0,
        depth_bias_mm: 2.0,
        bias_style: BiasStyle::SmoothField,
    };
    spec.seed = 21;
    let t0 = Instant::now();
    let manifest = generate_scene(&dir, &spec).unwrap();
    eprintln!("scene: {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig::synthetic_small();
    cfg.rng_seed = 33;
    cfg.learning_rate = envf("PROBE_LR", cfg.learning_rate);
    cfg.weights.w_render = envf("PROBE_WRENDER", cfg.weights.w_render);
    cfg.render_enable_epoch = envf("PROBE_ENABLE", cfg.render_enable_epoch as f64) as usize;
    cfg.main_batch = envf("PROBE_BATCH", cfg.main_batch as f64) as usize;
    eprintln!(
        "cfg: lr={} w_render={} enable={} batch={}",
        cfg.learning_rate, cfg.weights.w_render, cfg.render_enable_epoch, cfg.main_batch
    );
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&manifest, cfg).unwrap();
    eprintln!(
        "trainer: {:.1}s, {} samples",
        t0.elapsed().as_secs_f64(),
        trainer.samples().len()
    );

    let stderr = std::io::stderr();
    let mut log = stderr.lock();
    let t0 = Instant::now();
    trainer.run(Some(&mut log)).unwrap();
    eprintln!("train: {:.1}s", t0.elapsed().as_secs_f64());

    // Final depth + angular error against GT over both views.
    let scale = trainer.config().coordinate_scale;
    let mut depth_err = 0.0f64;
    let mut ang_err = 0.0f64;
    let mut count = 0usize;
    for view in trainer.views() {
        let (h, w) = view.mask.dim();
        let depth_gt = view.depth_gt.as_ref().unwrap();
        let normals_gt = view.normals_gt.as_ref().unwrap();
        let cam = &view.camera;
        let mut pts = Vec::new();
        let mut gts = Vec::new();
        let mut ngts = Vec::new();
        for row in 0..h {
            for col in 0..w {
                if !view.mask[[row, col]] {
                    continue;
                }
                let p = cam.back_project(col as f64, row as f64, depth_gt[[row, col]]).unwrap();
                let pw = cam.cam_to_world().apply(&p);
                pts.push([pw.x * scale, pw.y * scale]);
                gts.push(pw.z);
                ngts.push([
                    normals_gt[[row, col, 0]],
                    normals_gt[[row, col, 1]],
                    normals_gt[[row, col, 2]],
                ]);
            }
        }
        let mut arr = Array2::<f64>::zeros((pts.len(), 2));
        for (i, p) in pts.iter().enumerate() {
            arr[[i, 0]] = p[0];
            arr[[i, 1]] = p[1];
        }
        let (z, _alb, n) = trainer.net().normals_plain(&arr.view());
        for i in 0..pts.len() {
            depth_err += (z[i] / scale - gts[i]).abs();
            let dot: f64 = (0..3).map(|c| n[[i, c]] * ngts[i][c]).sum();
            ang_err += dot.clamp(-1.0, 1.0).acos().to_degrees();
            count += 1;
        }
    }
    eprintln!(
        "mean depth err {:.4} mm ({} pts), mean angular err {:.3} deg",
        depth_err / count as f64,
        count,
        ang_err / count as f64
    );
}
