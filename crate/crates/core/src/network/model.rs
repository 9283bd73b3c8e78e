use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint;
use crate::autodiff::{BatchNormMode, PaddingMode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::origin::Origin;
use crate::sampler::{similarity_warp, PolarShape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{BlockSpec, NetworkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Input-frame origins used instead of the predicted (or fixed) ones.
    /// Disables origin augmentation.
    pub origin: Option<Vec<(f64, f64)>>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            origin: None,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// Nodes of one forward pass. Every field refers to the tape the pass was
/// recorded on.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Parameter leaves, in [`Model::parameters`] order.
    pub params: Vec<Var>,
    /// Normalized origin heatmap, `N x 1 x h x w`.
    pub heatmap: Option<Var>,
    /// Heatmap centroid in the heatmap frame, `N x 2`.
    pub origin_heatmap: Option<Var>,
    /// Predicted origin in the input frame, `N x 2`.
    pub origin_predicted: Option<Var>,
    /// Origin the polar transform was taken about, `N x 2`.
    pub origin: Option<Var>,
    pub polar: Option<Var>,
    /// Output of every classifier block.
    pub features: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T> Param<T> {
    fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    origin_blocks: Vec<BlockSpec>,
    classifier_blocks: Vec<BlockSpec>,
}

fn he_uniform<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).unwrap()
}

enum Stats<'a, T> {
    Train(&'a mut [RunningStats<T>], T),
    Eval(&'a [RunningStats<T>]),
}

impl<T: Scalar> Stats<'_, T> {
    fn mode(&mut self, i: usize) -> BatchNormMode<'_, T> {
        match self {
            Stats::Train(r, momentum) => BatchNormMode::Train {
                running: &mut r[i],
                momentum: *momentum,
            },
            Stats::Eval(r) => BatchNormMode::Eval { running: &r[i] },
        }
    }
}

/// Index of the largest entry of every row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Rotates every item of an NCHW batch about the image center by an
/// independent uniform angle in `[0, 2 pi)`.
pub fn augment_rotation<T: Scalar, R: Rng + ?Sized>(batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let angles: Vec<f64> = (0..batch.dims4()?.0).map(|_| rng.gen_range(0.0..TAU)).collect();
    rotate_items(batch, &angles)
}

/// Rotates item `i` of an NCHW batch by `angles[i]` about the image center.
pub fn rotate_items<T: Scalar>(batch: &Tensor<T>, angles: &[f64]) -> Result<Tensor<T>> {
    let n = batch.dims4()?.0;
    if angles.len() != n {
        return Err(Error::shape(format!("{} angles for {n} items", angles.len())));
    }
    let mut data = Vec::with_capacity(batch.len());
    for (i, &a) in angles.iter().enumerate() {
        let item = batch.slice_batch(i, 1)?;
        if a == 0.0 {
            data.extend_from_slice(item.data());
        } else {
            data.extend(similarity_warp(&item, a, 1.0, (0.0, 0.0))?.into_data());
        }
    }
    Tensor::new(batch.shape().to_vec(), data)
}

impl<T: Scalar> Model<T> {
    /// Builds a network with He-uniform kernels (fan-in), unit batch-norm
    /// scales and zero shifts and biases, drawn from a stream seeded by `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let origin_blocks = config.origin_blocks();
        let classifier_blocks = config.classifier_blocks();
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut add_blocks = |prefix: &str, blocks: &[BlockSpec], params: &mut Vec<Param<T>>, rng: &mut ChaCha8Rng| {
            let mut cin = 1;
            for (i, b) in blocks.iter().enumerate() {
                params.push(Param::new(
                    format!("{prefix}.{i}.kernel"),
                    he_uniform([b.filters, cin, 3, 3], rng),
                ));
                params.push(Param::new(
                    format!("{prefix}.{i}.gamma"),
                    Tensor::full([b.filters], T::one()),
                ));
                params.push(Param::new(format!("{prefix}.{i}.beta"), Tensor::zeros([b.filters])));
                running.push(RunningStats::new(b.filters));
                cin = b.filters;
            }
            cin
        };
        if !origin_blocks.is_empty() {
            let c = add_blocks("origin", &origin_blocks, &mut params, &mut rng);
            params.push(Param::new("origin.head.kernel", he_uniform([1, c, 1, 1], &mut rng)));
        }
        let c = add_blocks("classifier", &classifier_blocks, &mut params, &mut rng);
        let k = config.num_classes;
        params.push(Param::new("head.kernel", he_uniform([k, c, 1, 1], &mut rng)));
        params.push(Param::new("head.bias", Tensor::zeros([k])));
        Ok(Self {
            config,
            params,
            running,
            origin_blocks,
            classifier_blocks,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of parameters of the origin predictor alone.
    pub fn origin_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("origin."))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn polar_shape(&self) -> PolarShape {
        let s = self.config.input_size;
        let p = self.config.polar_side();
        PolarShape::log_polar(s, s, p, p)
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Full forward pass. Train mode normalizes with batch statistics, folds
    /// them into the running averages and applies origin augmentation.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let params = self.bind(tape, opts.mode == Mode::Train);
        let mut running = self.running.clone();
        let out = self.forward_bound(tape, &params, &mut running, input, opts, rng);
        self.running = running;
        out
    }

    /// Evaluation-mode forward pass that leaves the model untouched.
    pub fn infer(&self, tape: &mut Tape<T>, input: Var, origin: Option<Vec<(f64, f64)>>) -> Result<ForwardTrace> {
        let params = self.bind(tape, false);
        let mut running = self.running.clone();
        let opts = ForwardOptions {
            mode: Mode::Eval,
            origin,
        };
        self.forward_bound(
            tape,
            &params,
            &mut running,
            input,
            &opts,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    /// Forward pass on caller-bound parameter leaves, with `running` standing
    /// in for the model's batch-norm statistics.
    pub fn forward_bound<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        running: &mut [RunningStats<T>],
        input: Var,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        if params.len() != self.params.len() || running.len() != self.running.len() {
            return Err(Error::arg("bound parameters do not match the model"));
        }
        let (n, c, h, w) = tape.value(input).dims4()?;
        let s = self.config.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(format!(
                "model expects N x 1 x {s} x {s} input, got {:?}",
                tape.value(input).shape()
            )));
        }
        let momentum = T::lit(self.config.bn_momentum);
        let mut stats = match opts.mode {
            Mode::Train => Stats::Train(running, momentum),
            Mode::Eval => Stats::Eval(running),
        };
        let mut trace = ForwardTrace {
            params: params.to_vec(),
            heatmap: None,
            origin_heatmap: None,
            origin_predicted: None,
            origin: None,
            polar: None,
            features: Vec::new(),
            logits: input,
        };
        let mut next = params.iter().copied();
        let mut bn_index = 0;

        let classifier_input = if self.config.variant.is_polar() {
            let mut origin = None;
            if self.config.variant.has_origin_predictor() {
                let mut x = input;
                for b in &self.origin_blocks {
                    x = self.block(tape, x, b, &mut next, &mut stats, bn_index)?;
                    bn_index += 1;
                }
                let head = next.next().unwrap();
                let raw = tape.conv2d(x, head, 1, PaddingMode::ZERO)?;
                let heatmap = tape.spatial_softmax(raw)?;
                let centroid = tape.centroid(heatmap)?;
                let predicted = tape.to_input_frame(centroid, self.config.origin_stride_product())?;
                trace.heatmap = Some(heatmap);
                trace.origin_heatmap = Some(centroid);
                trace.origin_predicted = Some(predicted);
                origin = Some(predicted);
            }
            let origin = match (&opts.origin, origin) {
                (Some(fixed), _) => self.constant_origins(tape, fixed, n)?,
                (None, Some(predicted)) => {
                    let shift = self.config.augmentation.origin_shift * s as f64;
                    if opts.mode == Mode::Train && shift > 0.0 {
                        let offsets: Vec<T> = (0..2 * n).map(|_| T::lit(rng.gen_range(-shift..=shift))).collect();
                        tape.affine(predicted, T::one(), Some(&offsets))?
                    } else {
                        predicted
                    }
                }
                (None, None) => {
                    let center = (s as f64 - 1.0) / 2.0;
                    self.constant_origins(tape, &vec![(center, center); n], n)?
                }
            };
            trace.origin = Some(origin);
            let polar = tape.polar_transform(input, origin, self.polar_shape())?;
            trace.polar = Some(polar);
            polar
        } else {
            input
        };

        let mut x = classifier_input;
        for b in &self.classifier_blocks {
            x = self.block(tape, x, b, &mut next, &mut stats, bn_index)?;
            bn_index += 1;
            trace.features.push(x);
        }
        let (kernel, bias) = (next.next().unwrap(), next.next().unwrap());
        let y = tape.conv2d(x, kernel, 1, PaddingMode::ZERO)?;
        let y = tape.channel_bias(y, bias)?;
        trace.logits = tape.global_average_pool(y)?;
        Ok(trace)
    }

    fn constant_origins(&self, tape: &mut Tape<T>, origins: &[(f64, f64)], n: usize) -> Result<Var> {
        if origins.len() != n {
            return Err(Error::shape(format!("{} origins for {n} items", origins.len())));
        }
        let flat: Vec<f64> = origins.iter().flat_map(|&(x, y)| [x, y]).collect();
        Ok(tape.constant(Tensor::from_f64([n, 2], &flat)?))
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        b: &BlockSpec,
        next: &mut impl Iterator<Item = Var>,
        stats: &mut Stats<'_, T>,
        bn_index: usize,
    ) -> Result<Var> {
        let (kernel, gamma, beta) = (next.next().unwrap(), next.next().unwrap(), next.next().unwrap());
        let y = tape.conv2d(x, kernel, b.stride, b.padding)?;
        let eps = T::lit(self.config.bn_epsilon);
        let y = tape.batch_norm(y, gamma, beta, stats.mode(bn_index), eps)?;
        Ok(tape.relu(y))
    }

    /// Classifier stack alone (evaluation mode) on a map the classifier would
    /// normally receive, such as a polar image. Returns the block outputs and
    /// the logits.
    pub fn classify(&self, tape: &mut Tape<T>, x: Var) -> Result<(Vec<Var>, Var)> {
        let params = self.bind(tape, false);
        let skip = if self.config.variant.has_origin_predictor() {
            self.origin_blocks.len() * 3 + 1
        } else {
            0
        };
        let mut next = params.into_iter().skip(skip);
        let mut stats = Stats::Eval(&self.running);
        let mut features = Vec::new();
        let mut y = x;
        for (i, b) in self.classifier_blocks.iter().enumerate() {
            y = self.block(tape, y, b, &mut next, &mut stats, self.origin_blocks.len() + i)?;
            features.push(y);
        }
        let (kernel, bias) = (next.next().unwrap(), next.next().unwrap());
        let z = tape.conv2d(y, kernel, 1, PaddingMode::ZERO)?;
        let z = tape.channel_bias(z, bias)?;
        Ok((features, tape.global_average_pool(z)?))
    }

    /// Evaluation-mode logits of an NCHW batch.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let trace = self.infer(&mut tape, x, None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Predicted origins (input frame) for an NCHW batch, or `None` for
    /// variants without an origin predictor.
    pub fn predict_origins(&self, input: &Tensor<T>) -> Result<Option<Vec<Origin>>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let trace = self.infer(&mut tape, x, None)?;
        Ok(trace.origin_predicted.map(|o| Origin::from_rows(tape.value(o))))
    }

    /// Logits summed over `n_rotations` evenly spaced rotations of each input.
    pub fn tta_logits(&self, input: &Tensor<T>, n_rotations: usize) -> Result<Tensor<T>> {
        if n_rotations < 1 {
            return Err(Error::arg("n_rotations must be at least 1"));
        }
        let n = input.dims4()?.0;
        let mut total = self.logits(input)?;
        for r in 1..n_rotations {
            let angle = TAU * r as f64 / n_rotations as f64;
            let rotated = rotate_items(input, &vec![angle; n])?;
            let l = self.logits(&rotated)?;
            for (a, b) in total.data_mut().iter_mut().zip(l.data()) {
                *a += *b;
            }
        }
        Ok(total)
    }

    /// Class predictions with test-time rotation augmentation.
    pub fn predict_tta(&self, input: &Tensor<T>, n_rotations: usize) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.tta_logits(input, n_rotations)?))
    }

    /// Parameters and batch-norm statistics as named checkpoint records.
    pub fn records(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let bn_names = self
            .params
            .iter()
            .filter(|p| p.name.ends_with(".gamma"))
            .map(|p| p.name.trim_end_matches(".gamma").to_string());
        for (prefix, stats) in bn_names.zip(&self.running) {
            let c = stats.mean.len();
            out.push((
                format!("{prefix}.running_mean"),
                Tensor::new([c], stats.mean.clone()).unwrap(),
            ));
            out.push((
                format!("{prefix}.running_var"),
                Tensor::new([c], stats.var.clone()).unwrap(),
            ));
        }
        out
    }

    /// Replaces every parameter and statistic from `records`; names and
    /// shapes must match this model exactly.
    pub fn load_records<U: Scalar>(&mut self, records: &[(String, Tensor<U>)]) -> Result<()> {
        let current = self.records();
        if records.len() != current.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} records, model expects {}",
                records.len(),
                current.len()
            )));
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let (_, t) = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name:?}")))?;
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "{name:?} has shape {:?} in checkpoint, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.cast())
        };
        let mut params = self.params.clone();
        for p in &mut params {
            p.value = lookup(&p.name, p.value.shape())?;
        }
        let mut running = self.running.clone();
        for (i, (name, t)) in current.iter().skip(params.len()).enumerate() {
            let loaded = lookup(name, t.shape())?.into_data();
            if i % 2 == 0 {
                running[i / 2].mean = loaded;
            } else {
                running[i / 2].var = loaded;
            }
        }
        self.params = params;
        self.running = running;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.records())
    }

    /// Builds a model for `config` and fills it from a checkpoint file.
    pub fn load(config: NetworkConfig, path: &Path) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        model.load_records(&checkpoint::load(path)?)?;
        Ok(model)
    }
}
