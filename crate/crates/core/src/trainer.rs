//! Minibatch training with Adam, evaluation, and ablation runs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::datasets::{Dataset, DatasetSpec, Generated, Mnist};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, augment_rotation, ForwardOptions, Model, NetworkConfig};
use crate::parallel;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_err,val_err,seconds";

/// Where the images come from: a directory written by `gen-data`, or a
/// dataset generated in memory from the MNIST files in `mnist_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub generate: Option<DatasetSpec>,
    pub mnist_dir: Option<PathBuf>,
    /// Use only the first `n` items of each split.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Fraction of the training split held out when the data has no
    /// validation split.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            generate: None,
            mnist_dir: None,
            train_limit: None,
            val_limit: None,
            test_limit: None,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub threads: usize,
    /// Batch size used for evaluation passes.
    pub eval_batch_size: usize,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch_size: 32,
            threads: 1,
            eval_batch_size: 200,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

fn set_key(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().unwrap();
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    /// Parses a config file and applies `key=value` overrides, where keys are
    /// dotted paths such as `network.variant` and values use TOML syntax
    /// (bare words are read as strings).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("invalid override key {key:?}")));
            }
            set_key(&mut table, &path, parse_value(value.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("data.val_fraction must be in [0, 1)".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Train, validation and test images.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < d.len() => d.select(&(0..n).collect::<Vec<_>>()),
        _ => d,
    }
}

impl Splits {
    /// Loads or generates the data described by `cfg`, carving a validation
    /// split from the training data when there is none.
    pub fn resolve(cfg: &DataConfig) -> Result<Self> {
        let g = match (&cfg.dir, &cfg.generate) {
            (Some(dir), None) => Generated::load(dir)?,
            (None, Some(spec)) => {
                let dir = cfg
                    .mnist_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.generate needs data.mnist_dir".into()))?;
                crate::datasets::generate(spec, &Mnist::load(dir)?.digits)?
            }
            _ => return Err(Error::Config("set exactly one of data.dir and data.generate".into())),
        };
        Ok(Self::from_generated(g, cfg))
    }

    pub fn from_generated(g: Generated, cfg: &DataConfig) -> Self {
        let train = limit(g.train, cfg.train_limit);
        let (train, val) = if g.val.is_empty() {
            train.carve_validation(cfg.val_fraction)
        } else {
            (train, g.val)
        };
        Self {
            train,
            val: limit(val, cfg.val_limit),
            test: limit(g.test, cfg.test_limit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub val_err: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4},{:.3}",
            self.epoch, self.train_loss, self.train_err, self.val_err, self.seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub error_pct: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Classification error of `model` on `data`; `tta > 1` sums logits over
/// that many input rotations.
pub fn evaluate(model: &Model<f32>, data: &Dataset, tta: usize, batch_size: usize) -> Result<Evaluation> {
    let s = model.config().input_size;
    if data.height != s || data.width != s {
        return Err(Error::Config(format!(
            "model expects {s}x{s} images, data has {}x{}",
            data.height, data.width
        )));
    }
    let k = model.config().num_classes;
    let mut confusion = vec![vec![0; k]; k];
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = data.batch::<f32>(chunk);
        let pred = model.predict_tta(&x, tta)?;
        for (&i, &p) in chunk.iter().zip(&pred) {
            let truth = data.labels[i] as usize;
            if truth >= k {
                return Err(Error::Config(format!("label {truth} outside the model's {k} classes")));
            }
            confusion[truth][p] += 1;
        }
        predictions.extend(pred);
    }
    let wrong = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(&p, &l)| p != l as usize)
        .count();
    Ok(Evaluation {
        error_pct: 100.0 * wrong as f64 / data.len().max(1) as f64,
        confusion,
        predictions,
    })
}

/// Loss and gradients of one minibatch; returns `(loss, train errors)`.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    x: Tensor<f32>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let x = if model.config().augmentation.rotation {
        augment_rotation(&x, rng)?
    } else {
        x
    };
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let trace = model.forward(&mut tape, input, &ForwardOptions::train(), rng)?;
    let loss = tape.softmax_cross_entropy(trace.logits, labels)?;
    let value = tape.value(loss).item()? as f64;
    let wrong = argmax_rows(tape.value(trace.logits))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    if !value.is_finite() {
        return Ok((value, wrong));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = trace
        .params
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    let mut params: Vec<&mut Tensor<f32>> = model.parameters_mut().iter_mut().map(|p| &mut p.value).collect();
    adam.step(&mut params, &grad_refs)?;
    Ok((value, wrong))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub best_val_err: f64,
    /// Parameters from the epoch with the lowest validation error.
    pub best: Model<f32>,
    pub last: Model<f32>,
}

/// Trains from scratch. With `run_dir`, writes `config.toml`, appends each
/// epoch to `metrics.csv` and keeps the best-validation parameters in
/// `best.ckpt`.
pub fn train(cfg: &TrainConfig, data: &Splits, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    parallel::set_threads(cfg.threads);
    let mut model = Model::<f32>::build(cfg.network.clone(), cfg.seed)?;
    let s = cfg.network.input_size;
    if data.train.height != s || data.train.width != s {
        return Err(Error::Config(format!(
            "network.input_size is {s} but training images are {}x{}",
            data.train.height, data.train.width
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let metrics_path = run_dir.map(|d| d.join("metrics.csv"));
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cpath = dir.join("config.toml");
        fs::write(&cpath, cfg.to_toml()).map_err(|e| Error::io(&cpath, e))?;
        let mpath = metrics_path.as_ref().unwrap();
        fs::write(mpath, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(mpath, e))?;
    }

    let mut adam = Adam::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x74_7261_696e);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut wrong, mut seen) = (0.0, 0usize, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.train.batch::<f32>(chunk);
            let labels = data.train.labels_of(chunk);
            let (loss, w) = train_step(&mut model, &mut adam, x, &labels, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            wrong += w;
            seen += chunk.len();
        }
        let val = evaluate(&model, &data.val, 1, cfg.eval_batch_size)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_err: 100.0 * wrong as f64 / seen as f64,
            val_err: val.error_pct,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} train_err {:.2}% val_err {:.2}% ({:.0}s)",
            cfg.epochs,
            row.train_loss,
            row.train_err,
            row.val_err,
            row.seconds
        );
        if let Some(path) = &metrics_path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(path, e))?;
        }
        if best.as_ref().is_none_or(|(_, v, _)| row.val_err < *v) {
            if let Some(dir) = run_dir {
                model.save(&dir.join("best.ckpt"))?;
            }
            best = Some((epoch, row.val_err, model.clone()));
        }
        metrics.push(row);
    }
    let (best_epoch, best_val_err, best_model) = match best {
        Some(b) => b,
        None => (0, f64::NAN, model.clone()),
    };
    Ok(TrainOutcome {
        metrics,
        best_epoch,
        best_val_err,
        best: best_model,
        last: model,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoOriginAugmentation,
    NoRotationAugmentation,
    NoWrapPadding,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoOriginAugmentation,
        Ablation::NoRotationAugmentation,
        Ablation::NoWrapPadding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoOriginAugmentation => "no-origin-aug",
            Ablation::NoRotationAugmentation => "no-rotation-aug",
            Ablation::NoWrapPadding => "no-wrap",
        }
    }

    /// `base` with every factor enabled, then this one removed.
    pub fn apply(self, base: &TrainConfig, origin_shift: f64) -> TrainConfig {
        let mut c = base.clone();
        c.network.augmentation.rotation = true;
        c.network.augmentation.origin_shift = origin_shift;
        c.network.wrap_padding = true;
        match self {
            Ablation::Full => {}
            Ablation::NoOriginAugmentation => c.network.augmentation.origin_shift = 0.0,
            Ablation::NoRotationAugmentation => c.network.augmentation.rotation = false,
            Ablation::NoWrapPadding => c.network.wrap_padding = false,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Test error per seed, in seed order.
    pub errors: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.errors.len().max(2) as f64;
        (self.errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

/// Trains every ablation for every seed on the same data and reports the
/// test error of the best-validation parameters.
pub fn ablate(base: &TrainConfig, data: &Splits, seeds: &[u64], run_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let shift = if base.network.augmentation.origin_shift > 0.0 {
        base.network.augmentation.origin_shift
    } else {
        NetworkConfig::default().augmentation.origin_shift
    };
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut errors = Vec::new();
        for &seed in seeds {
            let mut cfg = ablation.apply(base, shift);
            cfg.seed = seed;
            let dir = run_dir.map(|d| d.join(format!("{}-seed{seed}", ablation.name())));
            let out = train(&cfg, data, dir.as_deref())?;
            let e = evaluate(&out.best, &data.test, 1, cfg.eval_batch_size)?.error_pct;
            log::info!("ablation {} seed {seed}: test error {e:.2}%", ablation.name());
            errors.push(e);
        }
        rows.push(AblationRow { ablation, errors });
    }
    Ok(rows)
}

/// Intensity-weighted centroid `(x, y)` of every image in `data`.
pub fn intensity_centroids(data: &Dataset) -> Vec<(f64, f64)> {
    (0..data.len())
        .map(|k| {
            let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for (idx, &v) in data.image(k).iter().enumerate() {
                let v = v as f64;
                m += v;
                sx += v * (idx % data.width) as f64;
                sy += v * (idx / data.width) as f64;
            }
            if m == 0.0 {
                ((data.width as f64 - 1.0) / 2.0, (data.height as f64 - 1.0) / 2.0)
            } else {
                (sx / m, sy / m)
            }
        })
        .collect()
}

/// Mean distance between the predicted origin and the intensity centroid,
/// or `None` for models without an origin predictor.
pub fn mean_origin_error(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Option<f64>> {
    let centroids = intensity_centroids(data);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let Some(origins) = model.predict_origins(&data.batch::<f32>(chunk))? else {
            return Ok(None);
        };
        for (&i, o) in chunk.iter().zip(origins) {
            total += (o.x - centroids[i].0).hypot(o.y - centroids[i].1);
        }
    }
    Ok(Some(total / data.len().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = TrainConfig::from_toml(
            "epochs = 3\n[network]\nvariant = \"ccnn-s\"\n",
            &[
                "network.variant=pcnn-b".into(),
                "batch_size = 8".into(),
                "optimizer.lr=0.01".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.network.variant, crate::network::Variant::PcnnB);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert!(matches!(
            TrainConfig::from_toml("", &["network.bogus=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_toml("", &["epochs".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_toml("batch_size = 0", &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn ablations_toggle_one_factor() {
        let base = TrainConfig::default();
        let full = Ablation::Full.apply(&base, 0.05);
        assert!(full.network.augmentation.rotation && full.network.wrap_padding);
        for a in &Ablation::ALL[1..] {
            let c = a.apply(&base, 0.05);
            let changed = [
                c.network.augmentation.rotation != full.network.augmentation.rotation,
                c.network.augmentation.origin_shift != full.network.augmentation.origin_shift,
                c.network.wrap_padding != full.network.wrap_padding,
            ];
            assert_eq!(changed.iter().filter(|&&b| b).count(), 1, "{a:?}");
        }
    }
}
