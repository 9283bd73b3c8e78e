use ptn::datasets::Dataset;
use ptn::network::{Model, Variant};
use ptn::trainer::{evaluate, train, Splits, TrainConfig, METRICS_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A bright square in one of four quadrants (the label) over faint noise.
fn quadrants(n: usize, seed: u64) -> Dataset {
    let s = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..4u8);
        let (qy, qx) = ((label / 2) as usize, (label % 2) as usize);
        let (y0, x0) = (qy * 14 + rng.gen_range(1..6), qx * 14 + rng.gen_range(1..6));
        for i in 0..s {
            for j in 0..s {
                let inside = (y0..y0 + 7).contains(&i) && (x0..x0 + 7).contains(&j);
                pixels.push(if inside { 255 } else { rng.gen_range(0..40) });
            }
        }
        labels.push(label);
    }
    Dataset {
        height: s,
        width: s,
        pixels,
        labels,
        provenance: None,
    }
}

fn splits() -> Splits {
    Splits {
        train: quadrants(100, 1),
        val: quadrants(40, 2),
        test: quadrants(40, 3),
    }
}

fn config(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig::from_toml(
        &format!(
            "seed = 11\nepochs = {epochs}\nbatch_size = 20\n[network]\nvariant = \"{}\"\nnum_classes = 4\n",
            variant.name()
        ),
        &[],
    )
    .unwrap()
}

#[test]
fn loss_decreases_on_a_small_subset() {
    for variant in [Variant::PtnS, Variant::CcnnS] {
        let out = train(&config(variant, 6), &splits(), None).unwrap();
        let first = out.metrics.first().unwrap().train_loss;
        let last = out.metrics.last().unwrap().train_loss;
        assert!(last < 0.8 * first, "{variant:?}: {first} -> {last}");
    }
}

#[test]
fn training_is_deterministic_apart_from_wall_clock() {
    let data = splits();
    let cfg = config(Variant::PtnS, 2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(&cfg, &data, Some(a.path())).unwrap();
    let rb = train(&cfg, &data, Some(b.path())).unwrap();
    let strip = |dir: &std::path::Path| -> Vec<String> {
        let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        text.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let (ma, mb) = (strip(a.path()), strip(b.path()));
    assert_eq!(ma.len(), 3);
    assert_eq!(ma[0], METRICS_HEADER.rsplit_once(',').unwrap().0);
    assert_eq!(ma, mb);
    for (p, q) in ra.last.parameters().iter().zip(rb.last.parameters()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert_eq!(
        std::fs::read(a.path().join("best.ckpt")).unwrap(),
        std::fs::read(b.path().join("best.ckpt")).unwrap()
    );
    let other = train(&TrainConfig { seed: 12, ..cfg }, &data, None).unwrap();
    assert_ne!(other.last.parameters()[0].value, ra.last.parameters()[0].value);
}

#[test]
fn checkpoint_reload_evaluates_identically() {
    let data = splits();
    let cfg = config(Variant::PtnS, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, Some(dir.path())).unwrap();
    let loaded = Model::<f32>::load(cfg.network.clone(), &dir.path().join("best.ckpt")).unwrap();
    let x = data.test.batch::<f32>(&(0..data.test.len()).collect::<Vec<_>>());
    assert_eq!(loaded.logits(&x).unwrap(), out.best.logits(&x).unwrap());
    let e1 = evaluate(&out.best, &data.test, 1, 16).unwrap();
    let e2 = evaluate(&loaded, &data.test, 1, 16).unwrap();
    assert_eq!(e1, e2);
    let saved = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(TrainConfig::from_toml(&saved, &[]).unwrap(), cfg);
}

#[test]
fn evaluation_matches_the_last_validation_metric() {
    let data = splits();
    let cfg = config(Variant::PtnS, 2);
    let out = train(&cfg, &data, None).unwrap();
    let e = evaluate(&out.last, &data.val, 1, cfg.eval_batch_size).unwrap();
    assert_eq!(e.error_pct, out.metrics.last().unwrap().val_err);
}

#[test]
fn confusion_rows_sum_to_class_counts() {
    let data = splits();
    let model = Model::<f32>::build(config(Variant::CcnnS, 1).network, 4).unwrap();
    for batch in [7, 40, 200] {
        let e = evaluate(&model, &data.test, 1, batch).unwrap();
        let counts = data.test.class_counts(4);
        for (row, &c) in e.confusion.iter().zip(&counts) {
            assert_eq!(row.iter().sum::<usize>(), c);
        }
        let correct: usize = (0..4).map(|k| e.confusion[k][k]).sum();
        let expect = 100.0 * (data.test.len() - correct) as f64 / data.test.len() as f64;
        assert!((e.error_pct - expect).abs() < 1e-12);
        assert_eq!(e.predictions.len(), data.test.len());
    }
}

#[test]
fn mismatched_input_size_is_a_config_error() {
    let mut cfg = config(Variant::PtnS, 1);
    cfg.network.input_size = 42;
    assert!(matches!(train(&cfg, &splits(), None), Err(ptn::Error::Config(_))));
}
