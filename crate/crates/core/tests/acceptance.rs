//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 4, 5, 6 and 8 train networks for hours and are ignored by
//! default; run them with
//! `cargo test --release -p ptn-core --test acceptance -- --ignored --nocapture --test-threads 1`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use ptn::autodiff::conv2d_forward;
use ptn::datasets::{digit_geometry, generate, ks_uniform, DatasetName, DatasetSpec, Mnist};
use ptn::equivariance::{
    check_model_equivariance, check_polar_dilation, check_polar_rotation, dilation_for_columns, disk, gaussian_blobs,
    gaussian_blur, ModelChecks,
};
use ptn::network::{Model, NetworkConfig, Variant};
use ptn::sampler::PolarShape;
use ptn::trainer::{ablate, evaluate, train, Ablation, Splits, TrainConfig};
use ptn::verification::gradcheck_suite;
use ptn::{PaddingMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let results = gradcheck_suite(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let required = [
        "conv2d zero padding",
        "conv2d wrap padding",
        "batch_norm train",
        "conv2d+batch_norm+relu",
        "bilinear_sample",
        "polar_transform",
        "spatial_softmax+centroid",
    ];
    let worst = results
        .iter()
        .filter(|r| required.contains(&r.op))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let covered = required.iter().all(|op| results.iter().any(|r| r.op == *op));
    let pass = covered && worst < 1e-3 && secs < 300.0;
    report(
        1,
        pass,
        &format!("max relative error {worst:.2e} (< 1e-3) in {secs:.1}s (< 300s)"),
    );
    for r in &results {
        println!("    {:<36} {:.3e}", r.op, r.max_rel_error);
    }
    assert!(pass);
}

#[test]
fn criterion_2_wrap_convolution_commutes_with_row_shifts() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(3..20), rng.gen_range(3..20));
        let mut random = |len: usize| (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let x = Tensor::new([n, c, h, w], random(n * c * h * w)).unwrap();
        let k = Tensor::new([o, c, 3, 3], random(o * c * 9)).unwrap();
        let shift = rng.gen_range(-(h as isize)..=h as isize);
        let a = conv2d_forward(&x.circshift_rows(shift).unwrap(), &k, 1, PaddingMode::WRAP).unwrap();
        let b = conv2d_forward(&x, &k, 1, PaddingMode::WRAP)
            .unwrap()
            .circshift_rows(shift)
            .unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap());
    }
    let pass = worst <= 1e-5;
    report(
        2,
        pass,
        &format!(
            "max abs {worst:.2e} (<= 1e-5) over 100 pairs in {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_polar_geometry() {
    let mut images = vec![("blobs", gaussian_blobs(28, 0)), ("blobs", gaussian_blobs(28, 1))];
    if let Some(mnist) = common::load_mnist() {
        for i in 0..5 {
            images.push((
                "blurred digit",
                gaussian_blur(&mnist.digits.batch::<f64>(&[i]), 1.0).unwrap(),
            ));
        }
    }
    let shape = PolarShape::log_polar(28, 28, 28, 28);
    let ks = [1, shape.height / 4, shape.height / 2];
    let scales = [dilation_for_columns(shape, 1.0), dilation_for_columns(shape, 4.0)];
    let origin = (12.5, 14.5);
    let mut worst: f64 = 0.0;
    for (_, img) in &images {
        for r in check_polar_rotation(img, origin, shape, &ks, 0.05).unwrap() {
            worst = worst.max(r.value);
        }
        for r in check_polar_dilation(img, origin, shape, &scales, 0.05).unwrap() {
            worst = worst.max(r.value);
        }
    }
    let d = check_polar_rotation(&disk(28, 9.0), (13.5, 13.5), shape, &[7], 1e-6).unwrap();
    let disk_mad = d[0].value;
    let pass = worst <= 0.05 && disk_mad <= 1e-6;
    report(
        3,
        pass,
        &format!(
            "worst MAD {worst:.2e} (<= 0.05) over {} smooth images, k in {ks:?}, m in [1, 4]; disk {disk_mad:.1e} (<= 1e-6)",
            images.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_sim2mnist_generation() {
    let Some(mnist) = common::load_mnist() else {
        println!("criterion 7: SKIPPED (MNIST files not found)");
        return;
    };
    let preset = DatasetSpec::preset(DatasetName::Sim2mnist, 7);
    let ranges = preset.canvas == 96
        && (preset.train, preset.val, preset.test) == (10_000, 5_000, 50_000)
        && preset.scale_range == [1.0, 2.4]
        && preset.angle_range == [0.0, std::f64::consts::TAU];

    let spec = DatasetSpec {
        val: 0,
        test: 0,
        ..preset.clone()
    };
    let a = generate(&spec, &mnist.digits).unwrap();
    let prov = a.train.provenance.as_ref().unwrap();
    let angles: Vec<f64> = prov.iter().map(|p| p.angle).collect();
    let scales: Vec<f64> = prov.iter().map(|p| p.scale).collect();
    // Placement is uniform over the positions that keep the scaled digit in
    // frame, so normalize each center by its own admissible interval.
    let mid = (spec.canvas as f64 - 1.0) / 2.0;
    let mut px = Vec::new();
    let mut py = Vec::new();
    for (k, p) in prov.iter().enumerate() {
        let g = digit_geometry(mnist.digits.image(k), 28, 28, None);
        let lo = p.scale * g.radius;
        let hi = spec.canvas as f64 - 1.0 - lo;
        px.push((mid + p.dx - lo) / (hi - lo));
        py.push((mid + p.dy - lo) / (hi - lo));
    }
    let ks = [
        ks_uniform(&angles, 0.0, std::f64::consts::TAU),
        ks_uniform(&scales, 1.0, 2.4),
        ks_uniform(&px, 0.0, 1.0),
        ks_uniform(&py, 0.0, 1.0),
    ];
    let in_range = angles.iter().all(|a| (0.0..std::f64::consts::TAU).contains(a))
        && scales.iter().all(|s| (1.0..=2.4).contains(s))
        && px.iter().chain(&py).all(|u| (0.0..=1.0).contains(u));

    let small = DatasetSpec {
        train: 200,
        val: 50,
        test: 100,
        ..preset
    };
    let b1 = generate(&small, &mnist.digits).unwrap();
    let b2 = generate(&small, &mnist.digits).unwrap();
    let deterministic = b1.train == b2.train && b1.val == b2.val && b1.test == b2.test;

    let worst = ks.iter().cloned().fold(0.0, f64::max);
    let pass = ranges && in_range && deterministic && worst < 0.02;
    report(
        7,
        pass,
        &format!(
            "KS angle {:.4} scale {:.4} x {:.4} y {:.4} (< 0.02, n = {}); deterministic {deterministic}; ranges {}",
            ks[0],
            ks[1],
            ks[2],
            ks[3],
            angles.len(),
            ranges && in_range
        ),
    );
    assert!(pass);
}

fn mnist_or_panic() -> Mnist {
    common::load_mnist().expect("MNIST IDX files are required for this criterion")
}

fn rotmnist(mnist: &Mnist) -> Splits {
    let g = generate(&DatasetSpec::preset(DatasetName::Rotmnist, 0), &mnist.digits).unwrap();
    Splits {
        train: g.train,
        val: g.val,
        test: g.test,
    }
}

fn config(variant: Variant, size: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        network: NetworkConfig::new(variant, size),
        ..TrainConfig::default()
    }
}

/// Trains (or reuses a finished run of) `cfg` in `artifacts/<name>`.
fn train_or_reuse(name: &str, cfg: &TrainConfig, data: &Splits) -> Model<f32> {
    let dir = artifacts().join(name);
    let ckpt = dir.join("best.ckpt");
    let saved = std::fs::read_to_string(dir.join("config.toml")).ok();
    let done = std::fs::read_to_string(dir.join("metrics.csv"))
        .map(|m| m.lines().count() == cfg.epochs + 1)
        .unwrap_or(false);
    if done && saved.as_deref() == Some(cfg.to_toml().as_str()) {
        return Model::load(cfg.network.clone(), &ckpt).unwrap();
    }
    let _ = std::fs::remove_dir_all(&dir);
    let start = Instant::now();
    let out = train(cfg, data, Some(&dir)).unwrap();
    println!(
        "    trained {name}: best epoch {} val {:.2}% in {:.0}s",
        out.best_epoch,
        out.best_val_err,
        start.elapsed().as_secs_f64()
    );
    out.best
}

#[test]
#[ignore = "trains two networks for 50 epochs; run explicitly"]
fn criterion_4_rotated_mnist() {
    let mnist = mnist_or_panic();
    let data = rotmnist(&mnist);
    let start = Instant::now();
    let ptn = train_or_reuse("ptn-s-rotmnist", &config(Variant::PtnS, 28, 50, 0), &data);
    let ccnn = train_or_reuse("ccnn-s-rotmnist", &config(Variant::CcnnS, 28, 50, 0), &data);
    let e_ptn = evaluate(&ptn, &data.test, 1, 200).unwrap().error_pct;
    let e_ccnn = evaluate(&ccnn, &data.test, 1, 200).unwrap().error_pct;
    let pass = e_ptn <= 5.0 && e_ccnn >= 2.0 * e_ptn;
    report(
        4,
        pass,
        &format!(
            "PTN-S {e_ptn:.2}% (<= 5.0), CCNN-S {e_ccnn:.2}% (ratio {:.2}, >= 2) on {} test images; {:.0}s",
            e_ccnn / e_ptn,
            data.test.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains 12 networks for 20 epochs; run explicitly"]
fn criterion_5_ablation_directionality() {
    let mnist = mnist_or_panic();
    let data = rotmnist(&mnist);
    let start = Instant::now();
    let base = config(Variant::PtnB, 28, 20, 0);
    let dir = artifacts().join("ablation");
    let _ = std::fs::remove_dir_all(&dir);
    let rows = ablate(&base, &data, &[0, 1, 2], Some(&dir)).unwrap();
    let full = rows.iter().find(|r| r.ablation == Ablation::Full).unwrap().mean();
    let pass = rows.iter().all(|r| full <= r.mean());
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.2}+-{:.2}", r.ablation.name(), r.mean(), r.std()))
        .collect();
    report(
        5,
        pass,
        &format!(
            "PTN-B 20 epochs, 3 seeds: {}; {:.0}s",
            summary.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
    for r in &rows {
        println!("    {:<16} {:?}", r.ablation.name(), r.errors);
    }
    assert!(pass);
}

#[test]
#[ignore = "needs the trained PTN-S of criterion 4; run explicitly"]
fn criterion_6_trained_model_equivariance() {
    let mnist = mnist_or_panic();
    let data = rotmnist(&mnist);
    let model = train_or_reuse("ptn-s-rotmnist", &config(Variant::PtnS, 28, 50, 0), &data);
    let indices: Vec<usize> = (0..200).collect();
    let images = data.test.batch::<f32>(&indices);
    let records = check_model_equivariance(&model, &images, &ModelChecks::default()).unwrap();
    let get = |claim: &str| records.iter().filter(|r| r.claim == claim).collect::<Vec<_>>();
    let corr = get("model-rotation-feature-shift")[0].value;
    let agree = get("model-translation-class")[0].value;
    let logit = get("model-fixed-origin-logits")
        .iter()
        .map(|r| r.value)
        .fold(0.0, f64::max);
    let pass = corr >= 0.9 && agree >= 0.95 && logit <= 1e-4;
    report(
        6,
        pass,
        &format!(
            "180-degree feature correlation {corr:.4} (>= 0.9), translation agreement {:.2}% (>= 95), fixed-origin logit diff {logit:.1e} (<= 1e-4)",
            100.0 * agree
        ),
    );
    for r in &records {
        println!("    {:<30} {:<30} {:.4e} {}", r.claim, r.params, r.value, r.pass);
    }
    assert!(pass);
}

#[test]
#[ignore = "generates SIM2MNIST and trains two big networks; run explicitly"]
fn criterion_8_ptn_beats_pcnn_on_sim2mnist() {
    let mnist = mnist_or_panic();
    let start = Instant::now();
    let spec = DatasetSpec {
        test: 10_000,
        ..DatasetSpec::preset(DatasetName::Sim2mnist, 0)
    };
    let g = generate(&spec, &mnist.digits).unwrap();
    let data = Splits {
        train: g.train,
        val: g.val.select(&(0..2_000).collect::<Vec<_>>()),
        test: g.test,
    };
    let epochs = 10;
    let mut errors = Vec::new();
    for variant in [Variant::PtnB, Variant::PcnnB] {
        let mut cfg = config(variant, 96, epochs, 0);
        cfg.network.augmentation.origin_shift = 0.0;
        let model = train_or_reuse(&format!("{}-sim2mnist", variant.name()), &cfg, &data);
        errors.push(evaluate(&model, &data.test, 1, 100).unwrap().error_pct);
    }
    let (ptn, pcnn) = (errors[0], errors[1]);
    let pass = ptn < pcnn && pcnn < 90.0;
    report(
        8,
        pass,
        &format!(
            "PTN-B {ptn:.2}% < PCNN-B {pcnn:.2}% < 90% ({epochs} epochs, 10k train, {} test); {:.0}s",
            data.test.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "needs the trained PTN-S of criterion 4; run explicitly"]
fn test_time_rotations_do_not_hurt() {
    let mnist = mnist_or_panic();
    let data = rotmnist(&mnist);
    let model = train_or_reuse("ptn-s-rotmnist", &config(Variant::PtnS, 28, 50, 0), &data);
    let test = data.test.select(&(0..10_000).collect::<Vec<_>>());
    let e1 = evaluate(&model, &test, 1, 200).unwrap().error_pct;
    let e8 = evaluate(&model, &test, 8, 200).unwrap().error_pct;
    println!("check tta: PTN-S error {e1:.2}% with 1 rotation, {e8:.2}% with 8 (allowed +0.5)");
    assert!(e8 <= e1 + 0.5);
}

#[test]
#[ignore = "trains PTN-S for 5 epochs; run explicitly"]
fn training_moves_the_origin_toward_the_digit() {
    let mnist = mnist_or_panic();
    let data = rotmnist(&mnist);
    let cfg = config(Variant::PtnS, 28, 5, 0);
    let sample = data.test.select(&(0..2_000).collect::<Vec<_>>());
    let init = Model::<f32>::build(cfg.network.clone(), cfg.seed).unwrap();
    let before = ptn::trainer::mean_origin_error(&init, &sample, 200).unwrap().unwrap();
    let out = train(&cfg, &data, None).unwrap();
    let after = ptn::trainer::mean_origin_error(&out.last, &sample, 200)
        .unwrap()
        .unwrap();
    println!("check origin: mean distance to intensity centroid {before:.3} px at init, {after:.3} px after 5 epochs");
    assert!(after < before);
}
