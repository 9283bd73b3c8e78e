//! Gradient verification of every differentiable operator against central
//! finite differences, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, BatchNormMode, GradcheckOptions, PaddingMode, RunningStats};
use crate::error::Result;
use crate::network::{ForwardOptions, Mode, Model, NetworkConfig, Variant};
use crate::sampler::PolarShape;
use crate::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Operator-level tolerance.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance of the end-to-end check through a whole origin predictor.
pub const END_TO_END_TOLERANCE: f64 = 1e-2;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalar loss with distinct weights per element, so that no gradient
/// vanishes by symmetry.
fn project(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect();
    tape.weighted_sum(v, &w)
}

/// Coordinates with fractional parts inside `[0.15, 0.85]`, away from the
/// kinks of bilinear interpolation.
fn off_lattice(rng: &mut ChaCha8Rng, shape: &[usize], hi: usize) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(0..hi.saturating_sub(1).max(1)) as f64 + rng.gen_range(0.15..0.85))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let mut out = Vec::new();
    let mut push = |op, err: f64, tolerance| {
        out.push(CheckResult {
            op,
            max_rel_error: err,
            tolerance,
        })
    };

    let x = uniform(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
    let k = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    for (op, stride, pad) in [
        ("conv2d zero padding", 1, PaddingMode::ZERO),
        ("conv2d wrap padding", 1, PaddingMode::WRAP),
        ("conv2d stride 2", 2, PaddingMode::WRAP),
    ] {
        let err = gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                project(t, y)
            },
            &[x.clone(), k.clone()],
            opts,
        )?;
        push(op, err, OP_TOLERANCE);
    }

    let bias = uniform(&mut rng, &[4], -1.0, 1.0);
    let y0 = uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
    push(
        "channel_bias",
        gradcheck(
            |t, v| {
                let y = t.channel_bias(v[0], v[1])?;
                project(t, y)
            },
            &[y0.clone(), bias],
            opts,
        )?,
        OP_TOLERANCE,
    );

    let gamma = uniform(&mut rng, &[4], 0.5, 1.5);
    let beta = uniform(&mut rng, &[4], -0.5, 0.5);
    let running = RunningStats {
        mean: vec![0.1, -0.2, 0.3, 0.0],
        var: vec![0.8, 1.3, 0.5, 1.0],
    };
    for train in [true, false] {
        let err = gradcheck(
            |t, v| {
                let mut r = running.clone();
                let mode = if train {
                    BatchNormMode::Train {
                        running: &mut r,
                        momentum: 0.1,
                    }
                } else {
                    BatchNormMode::Eval { running: &running }
                };
                let y = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
                project(t, y)
            },
            &[y0.clone(), gamma.clone(), beta.clone()],
            opts,
        )?;
        push(
            if train { "batch_norm train" } else { "batch_norm eval" },
            err,
            OP_TOLERANCE,
        );
    }

    push(
        "conv2d+batch_norm+relu",
        gradcheck(
            |t, v| {
                let mut r = running.clone();
                let c = t.conv2d(v[0], v[1], 1, PaddingMode::WRAP)?;
                let mode = BatchNormMode::Train {
                    running: &mut r,
                    momentum: 0.1,
                };
                let b = t.batch_norm(c, v[2], v[3], mode, 1e-5)?;
                let y = t.relu(b);
                project(t, y)
            },
            &[x.clone(), k.clone(), gamma.clone(), beta.clone()],
            opts,
        )?,
        OP_TOLERANCE,
    );

    let logits = uniform(&mut rng, &[3, 2, 4, 4], -2.0, 2.0);
    push(
        "global_average_pool+cross_entropy",
        gradcheck(
            |t, v| {
                let g = t.global_average_pool(v[0])?;
                t.softmax_cross_entropy(g, &[1, 0, 1])
            },
            &[logits],
            opts,
        )?,
        OP_TOLERANCE,
    );

    let image = uniform(&mut rng, &[2, 2, 6, 7], 0.0, 1.0);
    let mut grid = off_lattice(&mut rng, &[2, 4, 5, 2], 6);
    // A few samples partly or wholly outside the image.
    grid.data_mut()[0] = -0.4;
    grid.data_mut()[3] = 5.7;
    grid.data_mut()[6] = 7.3;
    push(
        "bilinear_sample",
        gradcheck(
            |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                project(t, y)
            },
            &[image, grid],
            opts,
        )?,
        OP_TOLERANCE,
    );

    let image = uniform(&mut rng, &[2, 1, 9, 9], 0.0, 1.0);
    let origin = Tensor::new([2, 2], vec![3.37, 4.61, 5.22, 3.83])?;
    let shape = PolarShape::log_polar(9, 9, 8, 6);
    push(
        "polar_transform",
        gradcheck(
            |t, v| {
                let y = t.polar_transform(v[0], v[1], shape)?;
                project(t, y)
            },
            &[image, origin],
            opts,
        )?,
        OP_TOLERANCE,
    );

    let raw = uniform(&mut rng, &[2, 1, 5, 6], -2.0, 2.0);
    push(
        "spatial_softmax+centroid",
        gradcheck(
            |t, v| {
                let h = t.spatial_softmax(v[0])?;
                let c = t.centroid(h)?;
                let o = t.to_input_frame(c, 2)?;
                project(t, o)
            },
            &[raw],
            opts,
        )?,
        OP_TOLERANCE,
    );

    push("origin predictor end to end", end_to_end(seed)?, END_TO_END_TOLERANCE);
    Ok(out)
}

/// Classification loss of a small polar transformer differentiated with
/// respect to the origin predictor's parameters, through the heatmap,
/// centroid and polar resampling.
fn end_to_end(seed: u64) -> Result<f64> {
    let mut cfg = NetworkConfig::new(Variant::PtnS, 12);
    cfg.num_classes = 3;
    cfg.augmentation.origin_shift = 0.0;
    let model = Model::<f64>::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let input = uniform(&mut rng, &[3, 1, 12, 12], 0.0, 1.0);
    let labels = [0, 2, 1];
    let origin: Vec<usize> = (0..model.parameters().len())
        .filter(|&i| model.parameters()[i].name.starts_with("origin."))
        .collect();
    let inputs: Vec<Tensor<f64>> = origin.iter().map(|&i| model.parameters()[i].value.clone()).collect();
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    gradcheck(
        |t, v| {
            let mut bound = Vec::with_capacity(model.parameters().len());
            let mut next = v.iter();
            for (i, p) in model.parameters().iter().enumerate() {
                bound.push(if origin.contains(&i) {
                    *next.next().unwrap()
                } else {
                    t.constant(p.value.clone())
                });
            }
            let mut running = model.running_stats().to_vec();
            let x = t.constant(input.clone());
            let fwd = ForwardOptions {
                mode: Mode::Train,
                origin: None,
            };
            let trace = model.forward_bound(t, &bound, &mut running, x, &fwd, &mut ChaCha8Rng::seed_from_u64(0))?;
            t.softmax_cross_entropy(trace.logits, &labels)
        },
        &inputs,
        opts,
    )
}
