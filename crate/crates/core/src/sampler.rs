//! Differentiable sampling grids and bilinear resampling.
//!
//! Coordinates are continuous pixel positions: pixel `(row i, column j)` sits
//! at `(x, y) = (j, i)`, with `y` pointing down. A sampling grid stores, for
//! every output pixel, the `(x, y)` source position it reads from.
//!
//! The log-polar grid places angle on rows and log-radius on columns:
//!
//! ```text
//! x_s = x0 + r^(j / W) * cos(2 pi i / H)
//! y_s = y0 + r^(j / W) * sin(2 pi i / H)
//! ```
//!
//! so a rotation about `(x0, y0)` by `2 pi k / H` becomes a circular shift of
//! `k` rows, and a dilation by `r^(m / W)` becomes a shift of `m` columns.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::autodiff::tape::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradPair, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RadialScale {
    /// Radius `r^(j / W)`: dilations become column shifts.
    #[default]
    Log,
    /// Radius `r * j / W`: plain polar coordinates.
    Linear,
}

impl RadialScale {
    fn radius(self, max_radius: f64, column: usize, width: usize) -> f64 {
        let t = column as f64 / width as f64;
        match self {
            RadialScale::Log => max_radius.powf(t),
            RadialScale::Linear => max_radius * t,
        }
    }
}

/// Parameters of a polar resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarGridSpec {
    pub origin: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub max_radius: f64,
    pub radial: RadialScale,
}

impl PolarGridSpec {
    /// Log-polar grid of `height x width` samples with the default maximum
    /// radius for an `in_h x in_w` input.
    pub fn for_input(origin: (f64, f64), in_h: usize, in_w: usize, height: usize, width: usize) -> Self {
        Self {
            origin,
            height,
            width,
            max_radius: default_max_radius(in_h, in_w),
            radial: RadialScale::Log,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.max_radius.is_finite() || self.max_radius <= 0.0 {
            return Err(Error::arg(format!(
                "maximum radius must be positive, got {}",
                self.max_radius
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::arg("polar output must be non-empty"));
        }
        if !self.origin.0.is_finite() || !self.origin.1.is_finite() {
            return Err(Error::arg("polar origin must be finite"));
        }
        Ok(())
    }
}

/// Half the diagonal of an `h x w` image.
pub fn default_max_radius(h: usize, w: usize) -> f64 {
    0.5 * ((h * h + w * w) as f64).sqrt()
}

/// Per-output-pixel source coordinates, shape `H x W x 2` with `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid<T> {
    coords: Tensor<T>,
}

impl<T: Scalar> SampleGrid<T> {
    pub fn from_tensor(coords: Tensor<T>) -> Result<Self> {
        match coords.shape() {
            [_, _, 2] => {}
            s => return Err(Error::shape(format!("sample grid must be H x W x 2, got {s:?}"))),
        }
        if !coords.is_finite() {
            return Err(Error::arg("sample grid contains non-finite coordinates"));
        }
        Ok(Self { coords })
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    /// Source `(x, y)` for output pixel `(row, col)`.
    pub fn source(&self, row: usize, col: usize) -> (T, T) {
        let i = (row * self.width() + col) * 2;
        (self.coords.data()[i], self.coords.data()[i + 1])
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.coords
    }
}

fn write_polar<T: Scalar>(dst: &mut [T], origin: (T, T), spec: &PolarGridSpec) {
    let (h, w) = (spec.height, spec.width);
    for i in 0..h {
        let theta = 2.0 * PI * i as f64 / h as f64;
        let (s, c) = theta.sin_cos();
        for j in 0..w {
            let rho = spec.radial.radius(spec.max_radius, j, w);
            let k = (i * w + j) * 2;
            dst[k] = origin.0 + T::lit(rho * c);
            dst[k + 1] = origin.1 + T::lit(rho * s);
        }
    }
}

pub fn log_polar_grid<T: Scalar>(spec: &PolarGridSpec) -> Result<SampleGrid<T>> {
    spec.validate()?;
    let mut data = vec![T::zero(); spec.height * spec.width * 2];
    write_polar(&mut data, (T::lit(spec.origin.0), T::lit(spec.origin.1)), spec);
    SampleGrid::from_tensor(Tensor::new([spec.height, spec.width, 2], data)?)
}

/// Grid that reads every pixel from itself.
pub fn identity_grid<T: Scalar>(h: usize, w: usize) -> SampleGrid<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(T::from_usize(j).unwrap());
            data.push(T::from_usize(i).unwrap());
        }
    }
    SampleGrid::from_tensor(Tensor::new([h, w, 2], data).unwrap()).unwrap()
}

/// Checks `grid` against `input` and returns `(n, c, h, w, ho, wo, per_item)`
/// where `per_item` says whether the grid has a leading batch axis.
fn sample_dims<T: Scalar>(
    input: &Tensor<T>,
    grid: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize, bool)> {
    let (n, c, h, w) = input.dims4()?;
    match *grid.shape() {
        [gn, ho, wo, 2] if gn == n => Ok((n, c, h, w, ho, wo, true)),
        [ho, wo, 2] => Ok((n, c, h, w, ho, wo, false)),
        ref s => Err(Error::shape(format!(
            "grid shape {s:?} does not match input batch of {n}"
        ))),
    }
}

struct Corner<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

fn corner<T: Scalar>(x: T, y: T) -> Corner<T> {
    let (xf, yf) = (x.floor(), y.floor());
    Corner {
        x0: xf.to_isize().unwrap_or(isize::MIN / 2),
        y0: yf.to_isize().unwrap_or(isize::MIN / 2),
        fx: x - xf,
        fy: y - yf,
    }
}

#[inline]
fn pixel<T: Scalar>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// Bilinear interpolation of `input` (`N x C x H x W`) at the positions in
/// `grid` (`N x H' x W' x 2`, or `H' x W' x 2` shared by the batch).
/// Neighbors outside the input contribute zero.
pub fn bilinear_sample<T: Scalar>(input: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, ho, wo, per_item) = sample_dims(input, grid)?;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let one = T::one();
    for ni in 0..n {
        let g = if per_item {
            &grid.data()[ni * ho * wo * 2..(ni + 1) * ho * wo * 2]
        } else {
            grid.data()
        };
        for p in 0..ho * wo {
            let k = corner(g[2 * p], g[2 * p + 1]);
            for ci in 0..c {
                let plane = &input.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let v00 = pixel(plane, h, w, k.y0, k.x0);
                let v01 = pixel(plane, h, w, k.y0, k.x0 + 1);
                let v10 = pixel(plane, h, w, k.y0 + 1, k.x0);
                let v11 = pixel(plane, h, w, k.y0 + 1, k.x0 + 1);
                out[(ni * c + ci) * ho * wo + p] =
                    (one - k.fy) * ((one - k.fx) * v00 + k.fx * v01) + k.fy * ((one - k.fx) * v10 + k.fx * v11);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub(crate) fn bilinear_backward<T: Scalar>(
    input: &Tensor<T>,
    grid: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
    need_grid: bool,
) -> Result<GradPair<T>> {
    let (n, c, h, w, ho, wo, per_item) = sample_dims(input, grid)?;
    let one = T::one();
    let mut di = vec![T::zero(); if need_input { input.len() } else { 0 }];
    let mut dg = vec![T::zero(); if need_grid { grid.len() } else { 0 }];
    for ni in 0..n {
        let goff = if per_item { ni * ho * wo * 2 } else { 0 };
        for p in 0..ho * wo {
            let (x, y) = (grid.data()[goff + 2 * p], grid.data()[goff + 2 * p + 1]);
            let k = corner(x, y);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let g = dy.data()[(ni * c + ci) * ho * wo + p];
                if need_grid {
                    let plane = &input.data()[base..base + h * w];
                    let v00 = pixel(plane, h, w, k.y0, k.x0);
                    let v01 = pixel(plane, h, w, k.y0, k.x0 + 1);
                    let v10 = pixel(plane, h, w, k.y0 + 1, k.x0);
                    let v11 = pixel(plane, h, w, k.y0 + 1, k.x0 + 1);
                    gx += g * ((one - k.fy) * (v01 - v00) + k.fy * (v11 - v10));
                    gy += g * ((one - k.fx) * (v10 - v00) + k.fx * (v11 - v01));
                }
                if need_input {
                    let corners = [
                        (k.y0, k.x0, (one - k.fy) * (one - k.fx)),
                        (k.y0, k.x0 + 1, (one - k.fy) * k.fx),
                        (k.y0 + 1, k.x0, k.fy * (one - k.fx)),
                        (k.y0 + 1, k.x0 + 1, k.fy * k.fx),
                    ];
                    for (yy, xx, wgt) in corners {
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            di[base + yy as usize * w + xx as usize] += g * wgt;
                        }
                    }
                }
            }
            if need_grid {
                dg[goff + 2 * p] += gx;
                dg[goff + 2 * p + 1] += gy;
            }
        }
    }
    let di = need_input
        .then(|| Tensor::new(input.shape().to_vec(), di))
        .transpose()?;
    let dg = need_grid.then(|| Tensor::new(grid.shape().to_vec(), dg)).transpose()?;
    Ok((di, dg))
}

pub(crate) fn polar_grid_backward<T: Scalar>(dgrid: &Tensor<T>) -> Result<Tensor<T>> {
    let n = dgrid.shape()[0];
    let per = dgrid.len() / n.max(1);
    let mut d = vec![T::zero(); n * 2];
    for ni in 0..n {
        for pair in dgrid.data()[ni * per..(ni + 1) * per].chunks(2) {
            d[2 * ni] += pair[0];
            d[2 * ni + 1] += pair[1];
        }
    }
    Tensor::new([n, 2], d)
}

/// Output geometry of a polar resampling recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarShape {
    pub height: usize,
    pub width: usize,
    pub max_radius: f64,
    pub radial: RadialScale,
}

impl PolarShape {
    /// Log-polar output of `height x width` for an `in_h x in_w` input.
    pub fn log_polar(in_h: usize, in_w: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            max_radius: default_max_radius(in_h, in_w),
            radial: RadialScale::Log,
        }
    }

    fn spec(&self, origin: (f64, f64)) -> PolarGridSpec {
        PolarGridSpec {
            origin,
            height: self.height,
            width: self.width,
            max_radius: self.max_radius,
            radial: self.radial,
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// One polar grid per origin row of an `N x 2` tensor of `(x0, y0)`;
    /// the result is `N x H x W x 2`. Every grid entry moves one-for-one
    /// with its origin.
    pub fn polar_grid(&mut self, origin: Var, shape: PolarShape) -> Result<Var> {
        let o = self.value(origin);
        let [n, 2] = *o.shape() else {
            return Err(Error::shape(format!("origins must be N x 2, got {:?}", o.shape())));
        };
        shape.spec((0.0, 0.0)).validate()?;
        let item = shape.height * shape.width * 2;
        let mut data = vec![T::zero(); n * item];
        for ni in 0..n {
            let org = (o.data()[2 * ni], o.data()[2 * ni + 1]);
            write_polar(&mut data[ni * item..(ni + 1) * item], org, &shape.spec((0.0, 0.0)));
        }
        let grid = Tensor::new([n, shape.height, shape.width, 2], data)?;
        if !grid.is_finite() {
            return Err(Error::arg("polar grid has non-finite coordinates"));
        }
        Ok(self.push(grid, Op::PolarGrid { origin }, &[origin]))
    }

    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let out = bilinear_sample(self.value(input), self.value(grid))?;
        Ok(self.push(out, Op::BilinearSample { input, grid }, &[input, grid]))
    }

    /// Polar resampling of an NCHW batch about per-item origins (`N x 2`).
    /// Origins are first clamped to the input rectangle; the clamp has zero
    /// gradient while active.
    pub fn polar_transform(&mut self, input: Var, origin: Var, shape: PolarShape) -> Result<Var> {
        let (n, _, h, w) = self.value(input).dims4()?;
        let lo = vec![T::zero(); n * 2];
        let hi: Vec<T> = (0..n)
            .flat_map(|_| [T::from_usize(w - 1).unwrap(), T::from_usize(h - 1).unwrap()])
            .collect();
        let clamped = self.clamp(origin, &lo, &hi)?;
        let grid = self.polar_grid(clamped, shape)?;
        self.bilinear_sample(input, grid)
    }

    /// Applies [`polar_transform`](Self::polar_transform) to every depth slice
    /// of an `N x C x D x H x W` volume with one origin per volume.
    pub fn cylindrical_transform(&mut self, volume: Var, origin: Var, shape: PolarShape) -> Result<Var> {
        let dims = self.value(volume).shape().to_vec();
        let [n, c, d, h, w] = *dims.as_slice() else {
            return Err(Error::shape(format!("volume must be N x C x D x H x W, got {dims:?}")));
        };
        let flat = self.reshape(volume, &[n, c * d, h, w])?;
        let polar = self.polar_transform(flat, origin, shape)?;
        self.reshape(polar, &[n, c, d, shape.height, shape.width])
    }
}

/// Polar resampling on plain tensors; origins are clamped to the input.
pub fn polar_transform<T: Scalar>(input: &Tensor<T>, origins: &[(f64, f64)], shape: PolarShape) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let flat: Vec<f64> = origins.iter().flat_map(|&(a, b)| [a, b]).collect();
    let o = tape.constant(Tensor::from_f64([origins.len(), 2], &flat)?);
    let y = tape.polar_transform(x, o, shape)?;
    Ok(tape.value(y).clone())
}

pub fn cylindrical_transform<T: Scalar>(
    volume: &Tensor<T>,
    origins: &[(f64, f64)],
    shape: PolarShape,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(volume.clone());
    let flat: Vec<f64> = origins.iter().flat_map(|&(a, b)| [a, b]).collect();
    let o = tape.constant(Tensor::from_f64([origins.len(), 2], &flat)?);
    let y = tape.cylindrical_transform(x, o, shape)?;
    Ok(tape.value(y).clone())
}

/// `(cos, sin)` of `angle`, exact when `angle` is a multiple of a quarter turn.
fn snapped_trig(angle: f64) -> (f64, f64) {
    let quarters = angle / FRAC_PI_2;
    if (quarters - quarters.round()).abs() < 1e-12 {
        match (quarters.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        (angle.cos(), angle.sin())
    }
}

/// Geometry of a similarity resampling: a point `q` of the source maps to
/// `dst_center + scale * R(angle) * (q - src_center)` in an output of
/// `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub angle: f64,
    pub scale: f64,
    pub src_center: (f64, f64),
    pub dst_center: (f64, f64),
    pub out_h: usize,
    pub out_w: usize,
}

impl Similarity {
    /// Inverse map: the source position read by output pixel `(x, y)`.
    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = snapped_trig(self.angle);
        let (dx, dy) = (x - self.dst_center.0, y - self.dst_center.1);
        // R(-angle) (p - dst) / scale + src
        let u = (c * dx + s * dy) / self.scale;
        let v = (-s * dx + c * dy) / self.scale;
        (u + self.src_center.0, v + self.src_center.1)
    }

    pub fn grid<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.out_h * self.out_w * 2);
        for i in 0..self.out_h {
            for j in 0..self.out_w {
                let (u, v) = self.source_of(j as f64, i as f64);
                data.push(T::lit(u));
                data.push(T::lit(v));
            }
        }
        Tensor::new([self.out_h, self.out_w, 2], data).unwrap()
    }
}

/// Resamples every image of an NCHW batch under `sim` (bilinear, zero
/// outside). Quarter-turn rotations with unit scale and integer offsets read
/// exact pixel positions, so they permute pixels without interpolation.
pub fn warp<T: Scalar>(input: &Tensor<T>, sim: &Similarity) -> Result<Tensor<T>> {
    if sim.scale.is_nan() || sim.scale <= 0.0 {
        return Err(Error::arg(format!("scale must be positive, got {}", sim.scale)));
    }
    bilinear_sample(input, &sim.grid())
}

/// Rotates by `angle` (radians, `x` toward `y`), scales by `scale` about the
/// image center, then translates by `shift = (dx, dy)` pixels.
pub fn similarity_warp<T: Scalar>(input: &Tensor<T>, angle: f64, scale: f64, shift: (f64, f64)) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    warp(
        input,
        &Similarity {
            angle,
            scale,
            src_center: center,
            dst_center: (center.0 + shift.0, center.1 + shift.1),
            out_h: h,
            out_w: w,
        },
    )
}

/// Rotation and scaling about an arbitrary `center`, same output size.
pub fn similarity_about<T: Scalar>(input: &Tensor<T>, center: (f64, f64), angle: f64, scale: f64) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    warp(
        input,
        &Similarity {
            angle,
            scale,
            src_center: center,
            dst_center: center,
            out_h: h,
            out_w: w,
        },
    )
}
