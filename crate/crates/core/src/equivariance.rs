//! Executable equivariance checks.
//!
//! Each check compares a transformed-then-mapped result with a
//! mapped-then-transformed one and emits a [`Record`]. Library checks
//! (convolution, polar resampling) hold for any input; model checks need a
//! trained network.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use serde::Serialize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv2d_forward, PaddingMode};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Model};
use crate::sampler::{polar_transform, similarity_about, similarity_warp, PolarShape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Largest absolute difference; passes at or below the threshold.
    MaxAbs,
    /// Mean absolute difference; passes at or below the threshold.
    Mad,
    /// Normalized correlation; passes at or above the threshold.
    Correlation,
    /// Fraction of agreeing predictions; passes at or above the threshold.
    Agreement,
}

impl Metric {
    fn passes(self, value: f64, threshold: f64) -> bool {
        match self {
            Metric::MaxAbs | Metric::Mad => value <= threshold,
            Metric::Correlation | Metric::Agreement => value >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub claim: String,
    pub params: String,
    pub metric: Metric,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Record {
    pub fn new(claim: &str, params: String, metric: Metric, value: f64, threshold: f64) -> Self {
        Self {
            claim: claim.to_string(),
            params,
            metric,
            value,
            threshold,
            pass: value.is_finite() && metric.passes(value, threshold),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub records: Vec<Record>,
}

impl Report {
    pub fn extend(&mut self, records: impl IntoIterator<Item = Record>) {
        self.records.extend(records);
    }

    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    /// Records sorted by claim, so the output does not depend on the order
    /// in which checks ran.
    fn sorted(&self) -> Vec<&Record> {
        let mut v: Vec<&Record> = self.records.iter().collect();
        v.sort_by(|a, b| (&a.claim, &a.params).cmp(&(&b.claim, &b.params)));
        v
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.sorted() {
            w.serialize(r).map_err(|e| Error::arg(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::arg(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in self.sorted() {
            let op = match r.metric {
                Metric::MaxAbs | Metric::Mad => "<=",
                Metric::Correlation | Metric::Agreement => ">=",
            };
            let _ = writeln!(
                s,
                "{} {:<28} {:<30} {:?} {:.3e} {op} {:.1e}",
                if r.pass { "PASS" } else { "FAIL" },
                r.claim,
                r.params,
                r.metric,
                r.value,
                r.threshold
            );
        }
        let passed = self.records.iter().filter(|r| r.pass).count();
        let _ = writeln!(s, "{passed}/{} checks passed", self.records.len());
        s
    }
}

/// Thresholds of the library checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub exact: f64,
    pub interpolation: f64,
    pub symmetric: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            exact: 1e-5,
            interpolation: 0.05,
            symmetric: 1e-6,
        }
    }
}

/// Convolution commutes with translation: circular row shifts under wrap
/// padding (whole map), and column shifts under zero padding (away from the
/// borders). `image` is `N x C x H x W`, `kernel` is `O x C x kh x kw`, and
/// the convolution has stride 1.
pub fn check_shift_equivariance<T: Scalar>(
    kernel: &Tensor<T>,
    image: &Tensor<T>,
    shifts: &[isize],
    tol: f64,
) -> Result<Vec<Record>> {
    let (_, _, _, w) = image.dims4()?;
    let (_, _, _, kw) = kernel.dims4()?;
    let r = (kw / 2) as isize;
    let mut out = Vec::new();
    let wrapped = conv2d_forward(image, kernel, 1, PaddingMode::WRAP)?;
    let zeroed = conv2d_forward(image, kernel, 1, PaddingMode::ZERO)?;
    for &k in shifts {
        let a = conv2d_forward(&image.circshift_rows(k)?, kernel, 1, PaddingMode::WRAP)?;
        let b = wrapped.circshift_rows(k)?;
        let diff = a.max_abs_diff(&b)?.as_f64();
        out.push(Record::new(
            "conv-wrap-row-shift",
            format!("k={k}"),
            Metric::MaxAbs,
            diff,
            tol,
        ));

        let a = conv2d_forward(&image.shift_cols(k)?, kernel, 1, PaddingMode::ZERO)?;
        let b = zeroed.shift_cols(k)?;
        let (lo, hi) = if k >= 0 {
            (k + r, w as isize - r)
        } else {
            (r, w as isize + k - r)
        };
        let diff = max_abs_cols(&a, &b, lo.max(0) as usize, hi.max(0) as usize)?;
        out.push(Record::new(
            "conv-zero-col-shift",
            format!("k={k}"),
            Metric::MaxAbs,
            diff,
            tol,
        ));
    }
    Ok(out)
}

fn max_abs_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, lo: usize, hi: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    let w = *a.shape().last().unwrap();
    let mut m: f64 = 0.0;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if (lo..hi).contains(&(i % w)) {
            m = m.max((*x - *y).abs().as_f64());
        }
    }
    Ok(m)
}

/// Pearson correlation of two equally long sequences.
pub fn correlation<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let mean = |x: &[T]| x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64() - ma, y.as_f64() - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

/// Mean absolute difference over columns `lo..hi` of two equally shaped
/// tensors whose last axis is the column.
pub fn mad_region<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, lo: usize, hi: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    let w = *a.shape().last().unwrap();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if (lo..hi).contains(&(i % w)) {
            sum += (*x - *y).abs().as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::arg("empty comparison region"));
    }
    Ok(sum / count as f64)
}

fn single_image<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.dims4()? {
        (1, _, h, w) => Ok((h, w)),
        (n, ..) => Err(Error::shape(format!("expected a single image, got a batch of {n}"))),
    }
}

/// Rotating the input by `2 pi k / H` about the origin shifts its polar
/// image by `k` rows.
pub fn check_polar_rotation<T: Scalar>(
    image: &Tensor<T>,
    origin: (f64, f64),
    shape: PolarShape,
    ks: &[usize],
    threshold: f64,
) -> Result<Vec<Record>> {
    single_image(image)?;
    let base = polar_transform(image, &[origin], shape)?;
    let mut out = Vec::new();
    for &k in ks {
        let angle = TAU * k as f64 / shape.height as f64;
        let rotated = similarity_about(image, origin, angle, 1.0)?;
        let a = polar_transform(&rotated, &[origin], shape)?;
        let b = base.circshift_rows(k as isize)?;
        let value = mad_region(&a, &b, 0, shape.width)?;
        out.push(Record::new(
            "polar-rotation-row-shift",
            format!("k={k} H={}", shape.height),
            Metric::Mad,
            value,
            threshold,
        ));
    }
    Ok(out)
}

/// Column shift produced by a dilation `scale` about the origin.
pub fn dilation_columns(shape: PolarShape, scale: f64) -> f64 {
    shape.width as f64 * scale.ln() / shape.max_radius.ln()
}

/// Dilating the input by `r^(m / W)` about the origin shifts its log-polar
/// image by `m` columns. Columns that the shift fills with zeros are
/// excluded. Fractional `ms` are rounded for the comparison.
pub fn check_polar_dilation<T: Scalar>(
    image: &Tensor<T>,
    origin: (f64, f64),
    shape: PolarShape,
    scales: &[f64],
    threshold: f64,
) -> Result<Vec<Record>> {
    single_image(image)?;
    let base = polar_transform(image, &[origin], shape)?;
    let mut out = Vec::new();
    for &scale in scales {
        let m = dilation_columns(shape, scale);
        let shift = m.round() as isize;
        let dilated = similarity_about(image, origin, 0.0, scale)?;
        let a = polar_transform(&dilated, &[origin], shape)?;
        let b = base.shift_cols(shift)?;
        let lo = shift.max(0) as usize;
        let hi = (shape.width as isize + shift.min(0)) as usize;
        let value = mad_region(&a, &b, lo, hi)?;
        out.push(Record::new(
            "polar-dilation-col-shift",
            format!("scale={scale:.4} m={m:.2}"),
            Metric::Mad,
            value,
            threshold,
        ));
    }
    Ok(out)
}

/// Scale whose dilation shifts the log-polar image by exactly `m` columns.
pub fn dilation_for_columns(shape: PolarShape, m: f64) -> f64 {
    shape.max_radius.powf(m / shape.width as f64)
}

/// Translates every image of a batch by whole pixels, filling with zeros.
pub fn translate<T: Scalar>(batch: &Tensor<T>, dx: isize, dy: isize) -> Result<Tensor<T>> {
    let (n, c, h, w) = batch.dims4()?;
    let mut out = Tensor::zeros(batch.shape().to_vec());
    let plane = h * w;
    for p in 0..n * c {
        for i in 0..h as isize {
            let si = i - dy;
            if !(0..h as isize).contains(&si) {
                continue;
            }
            for j in 0..w as isize {
                let sj = j - dx;
                if (0..w as isize).contains(&sj) {
                    out.data_mut()[p * plane + (i as usize) * w + j as usize] =
                        batch.data()[p * plane + (si as usize) * w + sj as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Whether translating `image` (`1 x 1 x H x W`) by `(dx, dy)` keeps every
/// nonzero pixel inside the frame.
pub fn keeps_in_frame<T: Scalar>(image: &Tensor<T>, dx: isize, dy: isize) -> bool {
    let (_, _, h, w) = image.dims4().unwrap();
    image.data().iter().enumerate().all(|(idx, &v)| {
        if v == T::zero() {
            return true;
        }
        let (i, j) = ((idx / w) as isize, (idx % w) as isize);
        (0..h as isize).contains(&(i + dy)) && (0..w as isize).contains(&(j + dx))
    })
}

/// Settings of [`check_model_equivariance`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelChecks {
    pub translations: Vec<(isize, isize)>,
    pub correlation_threshold: f64,
    pub agreement_threshold: f64,
    pub logit_tolerance: f64,
}

impl Default for ModelChecks {
    fn default() -> Self {
        Self {
            translations: vec![(5, 5), (-5, 5), (5, -5), (-5, -5)],
            correlation_threshold: 0.9,
            agreement_threshold: 0.95,
            logit_tolerance: 1e-4,
        }
    }
}

/// Checks on a trained model over a sample of images (`N x 1 x S x S`):
///
/// * the last classifier features of a half-turn rotated input match the
///   original features shifted by half their height (normalized correlation);
/// * predicted classes survive translations that keep the digit in frame;
/// * for a fixed origin, logits do not change when the polar image is
///   shifted by whole multiples of the classifier's vertical stride.
pub fn check_model_equivariance(model: &Model<f32>, images: &Tensor<f32>, checks: &ModelChecks) -> Result<Vec<Record>> {
    let (n, ..) = images.dims4()?;
    if n == 0 {
        return Err(Error::arg("no images to check"));
    }
    let mut out = Vec::new();
    let cfg = model.config();

    if cfg.variant.is_polar() {
        let features = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let t = model.infer(&mut tape, v, None)?;
            Ok(tape.value(*t.features.last().unwrap()).clone())
        };
        let f = features(images)?;
        let fr = features(&similarity_warp(images, std::f64::consts::PI, 1.0, (0.0, 0.0))?)?;
        let hf = f.dims4()?.2;
        let shifted = f.circshift_rows((hf / 2) as isize)?;
        out.push(Record::new(
            "model-rotation-feature-shift",
            format!("angle=180 rows={}", hf / 2),
            Metric::Correlation,
            correlation(fr.data(), shifted.data()),
            checks.correlation_threshold,
        ));
        out.push(Record::new(
            "model-identity-feature",
            "angle=0".into(),
            Metric::Correlation,
            correlation(f.data(), f.data()),
            checks.correlation_threshold,
        ));
    }

    let base = argmax_rows(&model.logits(images)?);
    let (mut agree, mut total) = (0usize, 0usize);
    for &(dx, dy) in &checks.translations {
        let keep: Vec<usize> = (0..n)
            .filter(|&i| keeps_in_frame(&images.slice_batch(i, 1).unwrap(), dx, dy))
            .collect();
        if keep.is_empty() {
            continue;
        }
        let mut data = Vec::new();
        for &i in &keep {
            data.extend(images.slice_batch(i, 1)?.into_data());
        }
        let s = cfg.input_size;
        let sub = Tensor::new([keep.len(), 1, s, s], data)?;
        let pred = argmax_rows(&model.logits(&translate(&sub, dx, dy)?)?);
        agree += keep.iter().zip(&pred).filter(|(&i, &p)| base[i] == p).count();
        total += keep.len();
    }
    let shifts: Vec<String> = checks.translations.iter().map(|(x, y)| format!("({x},{y})")).collect();
    out.push(Record::new(
        "model-translation-class",
        format!("shifts={} n={total}", shifts.join(" ")),
        Metric::Agreement,
        if total == 0 {
            f64::NAN
        } else {
            agree as f64 / total as f64
        },
        checks.agreement_threshold,
    ));

    if cfg.variant.is_polar() {
        let mut tape = Tape::new();
        let v = tape.constant(images.clone());
        let t = model.infer(&mut tape, v, None)?;
        let polar = tape.value(t.polar.unwrap()).clone();
        let logits = tape.value(t.logits).clone();
        let stride = cfg.classifier_stride_product();
        let h = polar.dims4()?.2;
        let mut ks = vec![stride];
        if h.is_multiple_of(2 * stride) {
            ks.push(h / 2);
        }
        for k in ks {
            let mut tape = Tape::new();
            let p = tape.constant(polar.circshift_rows(k as isize)?);
            let (_, l) = model.classify(&mut tape, p)?;
            let diff = tape.value(l).max_abs_diff(&logits)?.as_f64();
            out.push(Record::new(
                "model-fixed-origin-logits",
                format!("rows={k}"),
                Metric::MaxAbs,
                diff,
                checks.logit_tolerance,
            ));
        }
    }
    Ok(out)
}

/// Model-independent checks on synthetic smooth images (and on `digits`,
/// smooth `1 x 1 x S x S` images, when given), with a random kernel for the
/// convolution checks.
pub fn library_checks(seed: u64, size: usize, digits: &[Tensor<f64>], tol: Tolerances) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: [usize; 4]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let kernel: Tensor<f64> = random([3, 2, 3, 3]);
    let image = random([2, 2, 12, 10]);
    let mut report = Report::default();
    report.extend(check_shift_equivariance(&kernel, &image, &[1, -3, 5], tol.exact)?);

    let shape = PolarShape::log_polar(size, size, size, size);
    let center = ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0);
    let ks = [0, 1, size / 4, size / 2];
    let scales: Vec<f64> = [0.0, 1.0, 4.0]
        .iter()
        .map(|&m| dilation_for_columns(shape, m))
        .chain([2.4])
        .collect();
    let blobs = gaussian_blobs(size, seed);
    let mut smooth = vec![("blobs", blobs)];
    smooth.extend(digits.iter().cloned().map(|d| ("digit", d)));
    for (name, img) in &smooth {
        let tag = |mut r: Record| {
            r.params = format!("{name} {}", r.params);
            r
        };
        let origin = (center.0 - 1.0, center.1 + 1.0);
        report.extend(
            check_polar_rotation(img, origin, shape, &ks, tol.interpolation)?
                .into_iter()
                .map(tag),
        );
        report.extend(
            check_polar_dilation(img, origin, shape, &scales, tol.interpolation)?
                .into_iter()
                .map(tag),
        );
    }
    if shape.height.is_multiple_of(4) {
        let d = disk(size, size as f64 / 4.0);
        for mut r in check_polar_rotation(&d, center, shape, &[shape.height / 4], tol.symmetric)? {
            r.params = format!("disk {}", r.params);
            report.records.push(r);
        }
    }
    Ok(report)
}

/// Sum of a few random anisotropic Gaussians, `1 x 1 x size x size`, kept
/// away from the border so rotations about the center stay in frame.
pub fn gaussian_blobs(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (size as f64 - 1.0) / 2.0;
    let blobs: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            let r = rng.gen_range(0.0..0.25) * size as f64;
            let a = rng.gen_range(0.0..TAU);
            [
                c + r * a.cos(),
                c + r * a.sin(),
                rng.gen_range(0.06..0.12) * size as f64,
                rng.gen_range(0.06..0.12) * size as f64,
                rng.gen_range(0.4..1.0),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let v: f64 = blobs
                .iter()
                .map(|&[x, y, sx, sy, amp]| {
                    let (dx, dy) = ((j as f64 - x) / sx, (i as f64 - y) / sy);
                    amp * (-0.5 * (dx * dx + dy * dy)).exp()
                })
                .sum();
            data.push(v.min(1.0));
        }
    }
    Tensor::new([1, 1, size, size], data).unwrap()
}

/// Filled disk of `radius` about the image center.
pub fn disk(size: usize, radius: f64) -> Tensor<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let data = (0..size * size)
        .map(|k| {
            let (i, j) = ((k / size) as f64 - c, (k % size) as f64 - c);
            if i * i + j * j <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new([1, 1, size, size], data).unwrap()
}

/// Separable Gaussian blur of every plane, zero outside the image.
pub fn gaussian_blur<T: Scalar>(image: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let data: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let mut tmp = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (d, k) in (-r..=r).zip(&taps) {
                    let u = j as isize + d;
                    if (0..w as isize).contains(&u) {
                        acc += k * data[base + i * w + u as usize];
                    }
                }
                tmp[base + i * w + j] = acc / norm;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (d, k) in (-r..=r).zip(&taps) {
                    let u = i as isize + d;
                    if (0..h as isize).contains(&u) {
                        acc += k * tmp[base + u as usize * w + j];
                    }
                }
                out[base + i * w + j] = acc / norm;
            }
        }
    }
    Tensor::from_f64(image.shape().to_vec(), &out)
}
