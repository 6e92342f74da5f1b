//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test -p visenc-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use visenc::data_io::{FeatureTensor, NoiseCeilingVector, ObjectMask};
use visenc::embedviz::silhouette;
use visenc::encoder::{init_params, predict, EncoderConfig, EncoderParams};
use visenc::extractor::{FeatureExtractor, ImageInput, ToyExtractor, ToyExtractorConfig};
use visenc::hypersearch::{run_search, Dimension, SearchSpace};
use visenc::metrics::{accuracy, paired_ttest, NcUnits};
use visenc::optimize::batch_gradient;
use visenc::saliency::{
    functional_probability, image_probability, kl_divergence, kl_slices, scorecam, AttentionMap,
    CamMode, RegionTarget,
};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: f64, detail: String) -> Check {
    let secs = elapsed.as_secs_f64();
    ensure(secs < limit_secs, format!("{detail}; {secs:.2}s (limit {limit_secs}s)"))
}

// 1 ------------------------------------------------------------------------

/// Straight transcription: r per voxel, r^2 over the ceiling as a fraction,
/// median over voxels, times 100.
fn oracle_accuracy(ground: &Array2<f64>, pred: &Array2<f64>, nc_percent: &[f64]) -> f64 {
    let t = ground.nrows() as f64;
    let mut ratios = Vec::new();
    for v in 0..ground.ncols() {
        let (g, p) = (ground.column(v), pred.column(v));
        let (mg, mp) = (g.sum() / t, p.sum() / t);
        let mut cov = 0.0;
        let mut vg = 0.0;
        let mut vp = 0.0;
        for i in 0..ground.nrows() {
            cov += (g[i] - mg) * (p[i] - mp);
            vg += (g[i] - mg).powi(2);
            vp += (p[i] - mp).powi(2);
        }
        let r = cov / (vg * vp).sqrt();
        ratios.push(r * r / (nc_percent[v] / 100.0));
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let med = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        (ratios[n / 2 - 1] + ratios[n / 2]) / 2.0
    };
    100.0 * med
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let t = rng.random_range(2..=5);
        let v = rng.random_range(1..=4);
        let ground = Array2::from_shape_simple_fn((t, v), || rng.random_range(-2.0..2.0));
        let pred = Array2::from_shape_simple_fn((t, v), || rng.random_range(-2.0..2.0));
        let nc: Vec<f64> = (0..v).map(|_| rng.random_range(5.0..100.0)).collect();
        let ours = accuracy(
            ground.view(),
            pred.view(),
            &NoiseCeilingVector::new(nc.clone()).map_err(|e| e.to_string())?,
            NcUnits::Fraction,
        )
        .map_err(|e| e.to_string())?
        .0
        .accuracy;
        worst = worst.max((ours - oracle_accuracy(&ground, &pred, &nc)).abs());
    }
    let detail = format!("max |diff| {worst:.2e} over 50 instances");
    ensure(worst <= 1e-12, detail.clone())?;
    within(start.elapsed(), 1.0, detail)
}

// 2 ------------------------------------------------------------------------

fn mean_loss(params: &EncoderParams, feats: &[FeatureTensor], targets: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (f, y) in feats.iter().zip(targets.rows()) {
        let p = predict(params, f).expect("shapes match");
        total += (&p - &y).mapv(|d| d * d).mean().expect("voxels");
    }
    total / feats.len() as f64
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let cfg = EncoderConfig {
            queries: rng.random_range(1..=4),
            dim: rng.random_range(1..=5),
            hidden: rng.random_range(1..=4),
            query_out: rng.random_range(1..=3),
            voxels: rng.random_range(1..=3),
        };
        let n = rng.random_range(1..=3);
        let mut params = init_params(&cfg, case).map_err(|e| e.to_string())?;
        for s in params.slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let feats: Vec<FeatureTensor> = (0..n)
            .map(|_| {
                FeatureTensor::new(Array2::from_shape_simple_fn((cfg.queries, cfg.dim), || {
                    rng.random_range(-1.0f32..1.0)
                }))
                .expect("finite")
            })
            .collect();
        let targets = Array2::from_shape_simple_fn((n, cfg.voxels), || rng.random_range(-1.0..1.0));
        let refs: Vec<&FeatureTensor> = feats.iter().collect();
        let (_, grads) = batch_gradient(&params, &refs, targets.view()).map_err(|e| e.to_string())?;
        let analytic = grads.tensors();

        for (t, (_, _, values)) in analytic.iter().enumerate() {
            for (j, &a) in values.iter().enumerate() {
                let mut plus = params.clone();
                plus.slices_mut()[t][j] += h;
                let mut minus = params.clone();
                minus.slices_mut()[t][j] -= h;
                let fd = (mean_loss(&plus, &feats, &targets) - mean_loss(&minus, &feats, &targets)) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let detail = format!("max relative error {worst:.2e} over 20 configs");
    ensure(worst < 1e-4, detail.clone())?;
    within(start.elapsed(), 30.0, detail)
}

// 3 ------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["visenc"];
    full.extend_from_slice(args);
    match visenc_cli::run(&full) {
        0 => Ok(()),
        code => Err(format!("`visenc {}` exited {code}", args.join(" "))),
    }
}

fn read_summary(dir: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(dir.join("summary.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn synthetic_recovery(root: &Path) -> Check {
    let start = Instant::now();
    let config = root.join("recovery.json");
    fs::write(
        &config,
        r#"{"seed": 0,
            "synth": {"stimuli": 200, "voxels": 30, "noise_ratio": 0.25},
            "encoder": {"hidden": 16, "query_out": 8},
            "train": {"max_epochs": 100}}"#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();
    let data = root.join("recovery-data");
    let run = root.join("recovery-train");
    let eval = root.join("recovery-eval");
    let (data, run, eval) = (data.to_str().unwrap(), run.to_str().unwrap(), eval.to_str().unwrap());
    cli(&["synth", "--config", cfg, "--threads", "1", "--out", data])?;
    cli(&["train", "--config", cfg, "--threads", "1", "--dataset", data, "--out", run])?;
    let checkpoint = format!("{run}/checkpoint");
    let split = format!("{run}/split.json");
    cli(&[
        "eval", "--config", cfg, "--threads", "1", "--dataset", data, "--checkpoint", &checkpoint, "--split",
        &split, "--out", eval,
    ])?;
    let trained = read_summary(Path::new(run))?;
    let summary = read_summary(Path::new(eval))?;
    let acc = summary["result"]["accuracy"]["accuracy"]
        .as_f64()
        .ok_or("eval summary has no accuracy")?;
    let epochs = trained["result"]["epochs_run"].as_u64().unwrap_or(u64::MAX);
    let detail = format!("test accuracy {acc:.2} after {epochs} epochs");
    ensure(acc >= 80.0 && epochs <= 100, detail.clone())?;
    within(start.elapsed(), 120.0, detail)
}

// 4 ------------------------------------------------------------------------

/// One hidden unit reads each patch's mean pixel (the bias keeps GELU in its
/// linear range); voxel 0 sums the top-left quadrant, voxel 1 the bottom-right.
fn quadrant_encoder(ex: &ToyExtractor) -> EncoderParams {
    let c = ex.config();
    let (g, d) = (c.grid(), c.token_dim());
    let cfg = EncoderConfig {
        queries: c.queries(),
        dim: d,
        hidden: 1,
        query_out: 1,
        voxels: 2,
    };
    let mut p = EncoderParams::zeros(&cfg);
    // tokens = pixels . Q with Q orthonormal, so tokens . Q^T 1/d = mean pixel.
    let q = ex.projection();
    for i in 0..d {
        p.w1[[i, 0]] = q.column(i).sum() / d as f64;
    }
    p.b1[0] = 10.0;
    p.w2[[0, 0]] = 1.0;
    p.b2[0] = -10.0;
    let half = g / 2;
    let gain = 20.0 / (half * half) as f64;
    for r in 0..half {
        for col in 0..half {
            p.w_head[[c.token_index(r, col), 0]] = gain;
            p.w_head[[c.token_index(r + half, col + half), 1]] = gain;
        }
    }
    p
}

fn scorecam_localization() -> Check {
    let start = Instant::now();
    let config = ToyExtractorConfig {
        image_size: 64,
        patch: 8,
        channels: 3,
    };
    let ex = ToyExtractor::with_config(config, 7).map_err(|e| e.to_string())?;
    let params = quadrant_encoder(&ex);
    // Textured bright object in the top-left quadrant on a dim textured background.
    let image = ImageInput::new(Array3::from_shape_fn((64, 64, 3), |(r, c, _)| {
        let base = if r < 32 && c < 32 { 0.8 } else { 0.1 };
        base + 0.1 * (((r * 7 + c * 13) % 5) as f64 / 4.0)
    }))
    .map_err(|e| e.to_string())?;

    // The planted readout must see the quadrant: voxel 0 tracks its mean pixel.
    let pred = predict(&params, &ex.extract_features(&image).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let tl_mean = image.pixels().slice(ndarray::s![..32, ..32, ..]).mean().unwrap();
    ensure(
        (pred[0] - 20.0 * tl_mean).abs() < 1e-3,
        format!("planted readout {:.4} vs {:.4}", pred[0], 20.0 * tl_mean),
    )?;

    let in_tl = |r: usize, c: usize| r < 32 && c < 32;
    let target = RegionTarget::new("top-left", vec![0]).map_err(|e| e.to_string())?;
    let res = scorecam(&image, &params, &target, &ex, CamMode::RegionMean).map_err(|e| e.to_string())?;
    let mass = res.map.mass_where(in_tl);
    let sum = res.map.values().sum();
    let min = res.map.values().iter().cloned().fold(f64::INFINITY, f64::min);

    let control = RegionTarget::new("bottom-right", vec![1]).map_err(|e| e.to_string())?;
    let other = scorecam(&image, &params, &control, &ex, CamMode::RegionMean).map_err(|e| e.to_string())?;
    let control_mass = other.map.mass_where(in_tl);

    let detail = format!(
        "target-quadrant mass {mass:.3} (bottom-right target puts {control_mass:.3} there); sum-1 {:.1e}, min {min:.2e}",
        sum - 1.0
    );
    ensure(
        mass >= 0.6 && (sum - 1.0).abs() <= 1e-9 && min >= 0.0 && control_mass < mass,
        detail.clone(),
    )?;
    within(start.elapsed(), 30.0, detail)
}

// 5 ------------------------------------------------------------------------

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ObjectMask {
    loop {
        let p = rng.random_range(0.05..0.95);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
        let mask = ObjectMask::from_fn(h, w, |r, c| bits[r * w + c]);
        if mask.inside_count() > 0 && mask.inside_count() < h * w {
            return mask;
        }
    }
}

fn functional_probability_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (12, 10);
    let masks: Vec<ObjectMask> = (0..10).map(|_| random_mask(&mut rng, h, w)).collect();
    let uniform = vec![AttentionMap::uniform(h, w); masks.len()];
    let pf = functional_probability(&uniform, &masks).map_err(|e| e.to_string())?.p_f;

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let map = AttentionMap::from_weights(Array2::from_shape_simple_fn((h, w), || rng.random::<f64>().powi(2)))
            .map_err(|e| e.to_string())?;
        let mask = random_mask(&mut rng, h, w);
        let a = image_probability(&map, &mask).map_err(|e| e.to_string())?.ok_or("excluded mask")?;
        let b = image_probability(&map, &mask.complement())
            .map_err(|e| e.to_string())?
            .ok_or("excluded mask")?;
        worst = worst.max((a + b - 1.0).abs());
    }
    ensure(
        (pf - 0.5).abs() <= 1e-9 && worst <= 1e-9,
        format!("uniform P_f {pf:.12}; max |p + p' - 1| {worst:.1e} over 20 maps"),
    )
}

// 6 ------------------------------------------------------------------------

fn kl_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut min_kl = f64::INFINITY;
    let mut max_self: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let mut draw = || {
            AttentionMap::from_weights(Array2::from_shape_simple_fn((1, n), || rng.random::<f64>().powi(3)))
                .expect("positive weights")
        };
        let (p, q) = (draw(), draw());
        min_kl = min_kl.min(kl_divergence(&p, &q).map_err(|e| e.to_string())?);
        max_self = max_self.max(kl_divergence(&p, &p).map_err(|e| e.to_string())?.abs());
    }
    let fixture = kl_slices(&[0.5, 0.5], &[0.9, 0.1]).map_err(|e| e.to_string())?;
    let by_hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    ensure(
        min_kl >= 0.0 && max_self <= 1e-12 && (fixture - 0.5108).abs() <= 1e-3 && (fixture - by_hand).abs() < 1e-12,
        format!("min KL {min_kl:.2e}; max KL(p,p) {max_self:.1e}; fixture {fixture:.4} nats"),
    )
}

// 7 ------------------------------------------------------------------------

fn tpe_quadratic() -> Check {
    let start = Instant::now();
    let space = SearchSpace::new([(
        "x".to_string(),
        Dimension::Continuous {
            low: 0.0,
            high: 1.0,
            log: false,
        },
    )])
    .map_err(|e| e.to_string())?;
    let mut hits = 0;
    let mut out_of_bounds = 0;
    for seed in 0..20 {
        let outcome = run_search(
            &space,
            |p| {
                let x = p["x"].as_f64().expect("continuous");
                Ok(-(x - 0.3).powi(2))
            },
            100,
            seed,
        )
        .map_err(|e| e.to_string())?;
        out_of_bounds += outcome
            .history
            .iter()
            .filter(|t| !(0.0..=1.0).contains(&t.params["x"].as_f64().unwrap_or(-1.0)))
            .count();
        let best = outcome.best.params["x"].as_f64().unwrap_or(f64::NAN);
        if (best - 0.3).abs() < 0.1 {
            hits += 1;
        }
    }
    let detail = format!("{hits}/20 seeds within 0.1 of the optimum; {out_of_bounds} suggestions out of bounds");
    ensure(hits >= 18 && out_of_bounds == 0, detail.clone())?;
    within(start.elapsed(), 10.0, detail)
}

// 8 ------------------------------------------------------------------------

fn ttest_fixture() -> Check {
    let t = paired_ttest(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    ensure(
        (t.t - 3.4641).abs() <= 1e-3 && (t.p - 0.0742).abs() <= 1e-3,
        format!("t = {:.4}, p = {:.4}", t.t, t.p),
    )
}

// 9 ------------------------------------------------------------------------

fn without_timestamp(dir: &Path) -> Result<String, String> {
    let text = fs::read_to_string(dir.join("summary.json")).map_err(|e| e.to_string())?;
    let cut = text.find("\"timestamp\"").ok_or("summary has no timestamp field")?;
    Ok(text[..cut].to_string())
}

fn determinism(root: &Path) -> Check {
    let config = root.join("determinism.json");
    fs::write(
        &config,
        r#"{"seed": 3,
            "synth": {"stimuli": 40, "voxels": 9, "extractor": {"image_size": 32, "patch": 8, "channels": 3}},
            "encoder": {"hidden": 8, "query_out": 4},
            "train": {"max_epochs": 15}}"#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();
    let data = root.join("determinism-data");
    let data = data.to_str().unwrap();
    cli(&["synth", "--config", cfg, "--out", data])?;
    let mut texts = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = root.join(format!("determinism-{run}"));
        cli(&["train", "--config", cfg, "--dataset", data, "--threads", threads, "--out", out.to_str().unwrap()])?;
        texts.push(without_timestamp(&out)?);
    }
    let weights = |run: &str| fs::read(root.join(format!("determinism-{run}/checkpoint/w_head.visf"))).ok();
    ensure(
        texts[0] == texts[1] && texts[0] == texts[2] && weights("a") == weights("b") && weights("a") == weights("c"),
        format!(
            "summary.json identical across 3 runs (1, 1 and 2 threads): {}",
            texts.windows(2).all(|w| w[0] == w[1])
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, centre: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || centre + standard_normal(rng))
}

/// Box-Muller, to keep the test independent of the library's samplers.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn embedding_silhouette() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = gaussian_cloud(&mut rng, 60, 2, 0.0);
    let b = gaussian_cloud(&mut rng, 60, 2, 12.0);
    let points = ndarray::concatenate![ndarray::Axis(0), a, b];
    let labels: Vec<u8> = (0..120).map(|i| u8::from(i >= 60)).collect();
    let separated = silhouette(points.view(), &labels).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cloud = gaussian_cloud(&mut rng, 200, 2, 0.0);
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.5)).collect();
        worst = worst.max(silhouette(cloud.view(), &labels).map_err(|e| e.to_string())?.abs());
    }
    ensure(
        separated > 0.8 && worst < 0.1,
        format!("two clusters {separated:.3}; random labels max |s| {worst:.3} over 10 seeds"),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: [(&str, Box<dyn Fn() -> Check>); 10] = [
        ("metric oracle equivalence", Box::new(metric_oracle)),
        ("gradient correctness", Box::new(gradient_check)),
        ("synthetic recovery", Box::new(|| synthetic_recovery(root.path()))),
        ("ScoreCAM localization", Box::new(scorecam_localization)),
        ("functional probability properties", Box::new(functional_probability_properties)),
        ("KL suite", Box::new(kl_suite)),
        ("TPE on a quadratic", Box::new(tpe_quadratic)),
        ("paired t-test fixture", Box::new(ttest_fixture)),
        ("train determinism", Box::new(|| determinism(root.path()))),
        ("embedding silhouette", Box::new(embedding_silhouette)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
