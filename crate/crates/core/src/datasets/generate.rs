use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_chunks;
use crate::sampler::{warp, Similarity};
use crate::tensor::Tensor;

use super::{parse_idx, Dataset, Sim2Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Rotmnist,
    MnistR,
    MnistRts,
    Sim2mnist,
}

impl DatasetName {
    pub const ALL: [DatasetName; 4] = [
        DatasetName::Rotmnist,
        DatasetName::MnistR,
        DatasetName::MnistRts,
        DatasetName::Sim2mnist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Rotmnist => "rotmnist",
            DatasetName::MnistR => "mnist-r",
            DatasetName::MnistRts => "mnist-rts",
            DatasetName::Sim2mnist => "sim2mnist",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// The digit center lands on the canvas center; the base image is moved
    /// by a whole number of pixels.
    Centered,
    /// The digit center is drawn uniformly over every position that keeps
    /// the transformed digit inside the canvas.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Side of the square output canvas.
    pub canvas: usize,
    /// Rotation range in radians, `[lo, hi)`.
    pub angle_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub placement: Placement,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn preset(name: DatasetName, seed: u64) -> Self {
        let (train, val, test, canvas, angle_range, scale_range, placement) = match name {
            DatasetName::Rotmnist => (10_000, 2_000, 50_000, 28, [0.0, TAU], [1.0, 1.0], Placement::Centered),
            DatasetName::MnistR => (
                60_000,
                0,
                10_000,
                28,
                [-FRAC_PI_2, FRAC_PI_2],
                [1.0, 1.0],
                Placement::Centered,
            ),
            DatasetName::MnistRts => (
                60_000,
                0,
                10_000,
                42,
                [-FRAC_PI_4, FRAC_PI_4],
                [0.7, 1.2],
                Placement::Uniform,
            ),
            DatasetName::Sim2mnist => (10_000, 5_000, 50_000, 96, [0.0, TAU], [1.0, 2.4], Placement::Uniform),
        };
        Self {
            name,
            train,
            val,
            test,
            canvas,
            angle_range,
            scale_range,
            placement,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.angle_range;
        let [s0, s1] = self.scale_range;
        if !(a0 <= a1 && a0.is_finite() && a1.is_finite()) {
            return Err(Error::Config(format!("invalid angle range {:?}", self.angle_range)));
        }
        if !(0.0 < s0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Config(format!("invalid scale range {:?}", self.scale_range)));
        }
        if self.canvas == 0 {
            return Err(Error::Config("canvas must be positive".into()));
        }
        Ok(())
    }
}

/// The 70k MNIST digits: the training file followed by the test file.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub digits: Dataset,
}

impl Mnist {
    pub const FILES: [&'static str; 4] = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            parse_idx(&bytes)
        };
        let mut train = Dataset::from_idx(read(Self::FILES[0])?, read(Self::FILES[1])?)?;
        let test = Dataset::from_idx(read(Self::FILES[2])?, read(Self::FILES[3])?)?;
        if (train.height, train.width) != (test.height, test.width) {
            return Err(Error::shape("MNIST train and test image sizes differ"));
        }
        train.pixels.extend(test.pixels);
        train.labels.extend(test.labels);
        Ok(Self { digits: train })
    }
}

/// Center of the ink bounding box and the largest distance from it to an
/// ink pixel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DigitGeometry {
    pub center: (f64, f64),
    pub radius: f64,
}

fn ink(image: &[u8], w: usize) -> Vec<(f64, f64)> {
    image
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .map(|(k, _)| ((k % w) as f64, (k / w) as f64))
        .collect()
}

fn radius_about(points: &[(f64, f64)], c: (f64, f64)) -> f64 {
    points
        .iter()
        .map(|&(x, y)| (x - c.0).hypot(y - c.1))
        .fold(0.0, f64::max)
}

/// Bounding-box geometry of a digit. With `align = Some(t)` each center
/// coordinate is moved by at most half a pixel so that its fractional part
/// equals that of `t`, choosing the smallest resulting radius.
pub fn digit_geometry(image: &[u8], h: usize, w: usize, align: Option<f64>) -> DigitGeometry {
    let points = ink(image, w);
    if points.is_empty() {
        let c = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        return DigitGeometry { center: c, radius: 0.0 };
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    };
    let c = (span(|p| p.0), span(|p| p.1));
    let candidates = |v: f64| match align {
        Some(t) if (v - t).fract() != 0.0 => vec![v - 0.5, v + 0.5],
        _ => vec![v],
    };
    let mut best = DigitGeometry {
        center: c,
        radius: f64::INFINITY,
    };
    for &x in &candidates(c.0) {
        for &y in &candidates(c.1) {
            let r = radius_about(&points, (x, y));
            if r < best.radius {
                best = DigitGeometry {
                    center: (x, y),
                    radius: r,
                };
            }
        }
    }
    best
}

/// Generated splits.
#[derive(Clone, Debug)]
pub struct Generated {
    pub spec: DatasetSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Generated {
    pub const SPLITS: [&'static str; 3] = ["train", "val", "test"];

    /// Writes every split plus `spec.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, d) in Self::SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            d.save(dir, name)?;
        }
        let path = dir.join("spec.toml");
        let text = toml::to_string(&self.spec).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("spec.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            spec,
            train: Dataset::load(dir, "train")?,
            val: Dataset::load(dir, "val")?,
            test: Dataset::load(dir, "test")?,
        })
    }
}

struct Item {
    pixels: Vec<u8>,
    params: Sim2Params,
}

fn sample_range<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn generate_item(spec: &DatasetSpec, base: &Dataset, index: usize) -> Result<Item> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let angle = sample_range(&mut rng, spec.angle_range);
    let scale = sample_range(&mut rng, spec.scale_range);
    let c = spec.canvas;
    let mid = (c as f64 - 1.0) / 2.0;
    let image = base.image(index);
    let (src, dst) = match spec.placement {
        Placement::Centered => {
            let g = digit_geometry(image, base.height, base.width, Some(mid));
            if scale * g.radius > mid {
                return Err(Error::Generation(format!(
                    "item {index}: digit of radius {:.2} at scale {scale:.3} does not fit a {c}x{c} canvas",
                    g.radius
                )));
            }
            (g.center, (mid, mid))
        }
        Placement::Uniform => {
            let g = digit_geometry(image, base.height, base.width, None);
            let (lo, hi) = (scale * g.radius, c as f64 - 1.0 - scale * g.radius);
            if lo > hi {
                return Err(Error::Generation(format!(
                    "item {index}: digit of radius {:.2} at scale {scale:.3} does not fit a {c}x{c} canvas",
                    g.radius
                )));
            }
            let x = lo + rng.gen::<f64>() * (hi - lo);
            let y = lo + rng.gen::<f64>() * (hi - lo);
            (g.center, (x, y))
        }
    };
    let sim = Similarity {
        angle,
        scale,
        src_center: src,
        dst_center: dst,
        out_h: c,
        out_w: c,
    };
    let scale255 = 1.0 / 255.0;
    let input = Tensor::<f32>::new(
        [1, 1, base.height, base.width],
        image.iter().map(|&b| b as f32 * scale255).collect(),
    )?;
    let out = warp(&input, &sim)?;
    let pixels = out
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Item {
        pixels,
        params: Sim2Params {
            angle,
            scale,
            dx: dst.0 - mid,
            dy: dst.1 - mid,
        },
    })
}

fn build_split(spec: &DatasetSpec, base: &Dataset, start: usize, count: usize) -> Result<Dataset> {
    let chunks = map_chunks(count, |range| -> Result<Vec<Item>> {
        range.map(|i| generate_item(spec, base, start + i)).collect()
    });
    let c = spec.canvas;
    let mut d = Dataset {
        height: c,
        width: c,
        pixels: Vec::with_capacity(count * c * c),
        labels: base.labels[start..start + count].to_vec(),
        provenance: Some(Vec::with_capacity(count)),
    };
    for chunk in chunks {
        for item in chunk? {
            d.pixels.extend(item.pixels);
            d.provenance.as_mut().unwrap().push(item.params);
        }
    }
    Ok(d)
}

/// Transforms consecutive, disjoint ranges of `base` into the train,
/// validation and test splits. Item `g` (counted across the splits in that
/// order) is digit `g` of `base` under parameters drawn from random stream
/// `g` of `spec.seed`, so the result does not depend on the worker count.
pub fn generate(spec: &DatasetSpec, base: &Dataset) -> Result<Generated> {
    spec.validate()?;
    if spec.total() > base.len() {
        return Err(Error::Generation(format!(
            "{} items requested from a pool of {}",
            spec.total(),
            base.len()
        )));
    }
    Ok(Generated {
        spec: spec.clone(),
        train: build_split(spec, base, 0, spec.train)?,
        val: build_split(spec, base, spec.train, spec.val)?,
        test: build_split(spec, base, spec.train + spec.val, spec.test)?,
    })
}

/// Kolmogorov-Smirnov distance between `samples` and the uniform
/// distribution on `[lo, hi]`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut u: Vec<f64> = samples
        .iter()
        .map(|&x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_base(n: usize) -> Dataset {
        let mut pixels = Vec::new();
        for k in 0..n {
            let mut img = vec![0u8; 28 * 28];
            for i in 8..20 {
                for j in 10..(14 + k % 5) {
                    img[i * 28 + j] = (40 * (i + j) % 256) as u8;
                }
            }
            pixels.extend(img);
        }
        Dataset {
            height: 28,
            width: 28,
            pixels,
            labels: (0..n).map(|k| (k % 10) as u8).collect(),
            provenance: None,
        }
    }

    #[test]
    fn names_roundtrip() {
        for d in DatasetName::ALL {
            assert_eq!(DatasetName::parse(d.name()).unwrap(), d);
        }
    }

    #[test]
    fn identity_spec_reproduces_centered_digit() {
        let base = synthetic_base(3);
        let spec = DatasetSpec {
            train: 3,
            val: 0,
            test: 0,
            angle_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            ..DatasetSpec::preset(DatasetName::Rotmnist, 1)
        };
        let g = generate(&spec, &base).unwrap();
        for k in 0..3 {
            let geo = digit_geometry(base.image(k), 28, 28, Some(13.5));
            let (tx, ty) = ((13.5 - geo.center.0) as isize, (13.5 - geo.center.1) as isize);
            for i in 0..28isize {
                for j in 0..28isize {
                    let (si, sj) = (i - ty, j - tx);
                    let want = if (0..28).contains(&si) && (0..28).contains(&sj) {
                        base.image(k)[(si * 28 + sj) as usize]
                    } else {
                        0
                    };
                    assert_eq!(g.train.image(k)[(i * 28 + j) as usize], want);
                }
            }
        }
    }

    #[test]
    fn oversized_digit_is_rejected() {
        let base = synthetic_base(1);
        let spec = DatasetSpec {
            train: 1,
            val: 0,
            test: 0,
            scale_range: [3.0, 3.0],
            ..DatasetSpec::preset(DatasetName::Sim2mnist, 0)
        };
        let spec = DatasetSpec { canvas: 28, ..spec };
        assert!(matches!(generate(&spec, &base), Err(Error::Generation(_))));
    }

    #[test]
    fn ks_of_exact_grid_is_small() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&xs, 0.0, 1.0) <= 0.0005 + 1e-12);
        let skewed: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skewed, 0.0, 1.0) > 0.2);
    }

    #[test]
    fn pool_exhaustion_is_an_error() {
        let base = synthetic_base(2);
        let spec = DatasetSpec {
            train: 2,
            val: 1,
            test: 0,
            ..DatasetSpec::preset(DatasetName::Rotmnist, 0)
        };
        assert!(matches!(generate(&spec, &base), Err(Error::Generation(_))));
    }
}
