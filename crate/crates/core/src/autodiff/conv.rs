//! Same-size 2-D cross-correlation with zero or vertical wrap-around padding.
//!
//! Kernels are applied without flipping (cross-correlation). Each side is
//! padded by `k / 2`, so the output extent is `ceil(extent / stride)`. With
//! [`VerticalPadding::Wrap`] rows are read modulo the input height, which
//! identifies the top and bottom edges of an angular axis.

use crate::error::{Error, Result};
use crate::parallel::map_chunks;
use crate::scalar::{gemm, Scalar};
use crate::tensor::{GradPair, Tensor};

use super::tape::{Op, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum VerticalPadding {
    #[default]
    Zero,
    Wrap,
}

/// Padding policy for [`conv2d`](Tape::conv2d). The horizontal axis is always
/// zero-padded; wrap-around is only meaningful on the angular (vertical) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct PaddingMode {
    pub vertical: VerticalPadding,
}

impl PaddingMode {
    pub const ZERO: Self = Self {
        vertical: VerticalPadding::Zero,
    };
    pub const WRAP: Self = Self {
        vertical: VerticalPadding::Wrap,
    };
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: PaddingMode,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, padding: PaddingMode) -> Result<Self> {
        if stride < 1 {
            return Err(Error::arg("conv2d stride must be at least 1"));
        }
        let (n, c, h, w) = x.dims4()?;
        let (o, ci, kh, kw) = k.dims4()?;
        if ci != c {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels, kernel expects {ci}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must have odd spatial size, got {kh}x{kw}"
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
            stride,
            padding,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 convolution reads the image directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn source_row(&self, i: usize, a: usize) -> Option<usize> {
        let y = (i * self.stride + a) as isize - (self.kh / 2) as isize;
        match self.padding.vertical {
            VerticalPadding::Wrap => Some(y.rem_euclid(self.h as isize) as usize),
            VerticalPadding::Zero => (0..self.h as isize).contains(&y).then_some(y as usize),
        }
    }

    /// Output columns `lo..hi` whose kernel tap `b` reads inside the image.
    fn valid_cols(&self, b: usize) -> (usize, usize) {
        let pad = self.kw / 2;
        let lo = pad.saturating_sub(b).div_ceil(self.stride);
        // x = j * stride + b - pad < w
        let hi = (self.w + pad).saturating_sub(b).div_ceil(self.stride).min(self.wo);
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.pixels();
        let pad = self.kw / 2;
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(b);
                    for i in 0..self.ho {
                        let out = &mut dst[i * self.wo..(i + 1) * self.wo];
                        let Some(y) = self.source_row(i, a) else {
                            out.fill(T::zero());
                            continue;
                        };
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let src = &plane[y * self.w..(y + 1) * self.w];
                        let x0 = lo * self.stride + b - pad;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (v, x) in out[lo..hi].iter_mut().zip((x0..).step_by(self.stride)) {
                                *v = src[x];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.pixels();
        let pad = self.kw / 2;
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(b);
                    for i in 0..self.ho {
                        let Some(y) = self.source_row(i, a) else {
                            continue;
                        };
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        let x0 = lo * self.stride + b - pad;
                        let s = &src[i * self.wo + lo..i * self.wo + hi];
                        if self.stride == 1 {
                            for (d, v) in dst[x0..x0 + s.len()].iter_mut().zip(s) {
                                *d += *v;
                            }
                        } else {
                            for (v, x) in s.iter().zip((x0..).step_by(self.stride)) {
                                dst[x] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: PaddingMode,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, kernel, stride, padding)?;
    let (p, patch) = (g.pixels(), g.patch());
    let in_item = g.c * g.h * g.w;
    let out_item = g.o * p;
    let parts = map_chunks(g.n, |range| {
        let mut out = vec![T::zero(); range.len() * out_item];
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * p }];
        for (slot, n) in range.enumerate() {
            let img = &x.data()[n * in_item..(n + 1) * in_item];
            let cols = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut cols);
                &cols
            };
            let dst = &mut out[slot * out_item..(slot + 1) * out_item];
            gemm(false, false, g.o, p, patch, kernel.data(), cols, T::zero(), dst);
        }
        out
    });
    Tensor::new([g.n, g.o, g.ho, g.wo], parts.concat())
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: PaddingMode,
    dy: &Tensor<T>,
    need_input: bool,
    need_kernel: bool,
) -> Result<GradPair<T>> {
    let g = Geometry::new(x, kernel, stride, padding)?;
    let (p, patch) = (g.pixels(), g.patch());
    let in_item = g.c * g.h * g.w;
    let out_item = g.o * p;
    let parts = map_chunks(g.n, |range| {
        let mut dx = vec![T::zero(); if need_input { range.len() * in_item } else { 0 }];
        let mut dk = vec![T::zero(); if need_kernel { kernel.len() } else { 0 }];
        let mut cols = vec![T::zero(); patch * p];
        let mut dcols = vec![T::zero(); if need_input { patch * p } else { 0 }];
        for (slot, n) in range.enumerate() {
            let dy_n = &dy.data()[n * out_item..(n + 1) * out_item];
            let img = &x.data()[n * in_item..(n + 1) * in_item];
            if need_kernel {
                let cols = if g.is_pointwise() {
                    img
                } else {
                    g.im2col(img, &mut cols);
                    &cols
                };
                gemm(false, true, g.o, patch, p, dy_n, cols, T::one(), &mut dk);
            }
            if need_input {
                let dst = &mut dx[slot * in_item..(slot + 1) * in_item];
                if g.is_pointwise() {
                    gemm(true, false, patch, p, g.o, kernel.data(), dy_n, T::zero(), dst);
                } else {
                    gemm(true, false, patch, p, g.o, kernel.data(), dy_n, T::zero(), &mut dcols);
                    g.col2im(&dcols, dst);
                }
            }
        }
        (dx, dk)
    });
    let mut dx_all = Vec::new();
    let mut dk_all = vec![T::zero(); if need_kernel { kernel.len() } else { 0 }];
    for (dx, dk) in parts {
        dx_all.extend(dx);
        for (a, b) in dk_all.iter_mut().zip(dk) {
            *a += b;
        }
    }
    let dx = need_input
        .then(|| Tensor::new(x.shape().to_vec(), dx_all))
        .transpose()?;
    let dk = need_kernel
        .then(|| Tensor::new(kernel.shape().to_vec(), dk_all))
        .transpose()?;
    Ok((dx, dk))
}

pub(crate) fn channel_bias_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dy.dims4()?;
    let mut db = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, acc) in db.iter_mut().enumerate() {
            let base = (ni * c + ci) * h * w;
            *acc += dy.data()[base..base + h * w].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], db)
}

impl<T: Scalar> Tape<T> {
    /// Same-size strided cross-correlation of an `N x C x H x W` input with an
    /// `O x C x kh x kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: PaddingMode) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::shape(format!("bias has {} entries for {c} channels", b.len())));
        }
        let mut out = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let bc = b.data()[ci];
                out.data_mut()[base..base + h * w].iter_mut().for_each(|v| *v += bc);
            }
        }
        Ok(self.push(out, Op::ChannelBias { input, bias }, &[input, bias]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop evaluation of the padded cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, wrap: bool) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (o, _, kh, kw) = k.dims4().unwrap();
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = Tensor::zeros([n, o, ho, wo]);
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let mut y = (i * stride + a) as isize - (kh / 2) as isize;
                                    let xx = (j * stride + b) as isize - (kw / 2) as isize;
                                    if wrap {
                                        y = y.rem_euclid(h as isize);
                                    }
                                    if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc += k.at4(oi, ci, a, b) * x.at4(ni, ci, y as usize, xx as usize);
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f64>::from_f64([1, 1, 1, 1], &[1.0]).unwrap();
        let y = conv2d_forward(&x, &k, 1, PaddingMode::ZERO).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_ones_with_vertical_wrap() {
        let x = Tensor::<f64>::full([1, 1, 4, 4], 1.0);
        let k = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, 1, PaddingMode::WRAP).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = (0..4).map(|j| y.at4(0, 0, i, j)).collect();
            assert_eq!(row, vec![6.0, 9.0, 9.0, 6.0]);
        }
        let z = conv2d_forward(&x, &k, 1, PaddingMode::ZERO).unwrap();
        assert_eq!(z.at4(0, 0, 0, 0), 4.0);
        assert_eq!(z.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn matches_direct_oracle() {
        for (stride, wrap) in [(1, false), (1, true), (2, false), (2, true)] {
            let x = Tensor::new([2, 3, 7, 6], pseudo(2 * 3 * 7 * 6, 0.731)).unwrap();
            let k = Tensor::new([4, 3, 3, 3], pseudo(4 * 27, 1.37)).unwrap();
            let pad = if wrap { PaddingMode::WRAP } else { PaddingMode::ZERO };
            let got = conv2d_forward(&x, &k, stride, pad).unwrap();
            let want = conv_oracle(&x, &k, stride, wrap);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "stride {stride} wrap {wrap}");
        }
    }

    #[test]
    fn strided_output_is_ceil() {
        let x = Tensor::<f32>::zeros([1, 1, 7, 5]);
        let k = Tensor::<f32>::zeros([2, 1, 3, 3]);
        let y = conv2d_forward(&x, &k, 2, PaddingMode::ZERO).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 3]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, 1, PaddingMode::ZERO),
            Err(Error::Shape(_))
        ));
        let k = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, 0, PaddingMode::ZERO),
            Err(Error::Argument(_))
        ));
        let k = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &k, 1, PaddingMode::ZERO).is_err());
    }

    #[test]
    fn wrap_conv_commutes_with_row_shift() {
        let x = Tensor::new([1, 2, 8, 5], pseudo(80, 0.417)).unwrap();
        let k = Tensor::new([3, 2, 3, 3], pseudo(54, 2.11)).unwrap();
        let base = conv2d_forward(&x, &k, 1, PaddingMode::WRAP).unwrap();
        for shift in 0..8 {
            let shifted = conv2d_forward(&x.circshift_rows(shift).unwrap(), &k, 1, PaddingMode::WRAP).unwrap();
            let want = base.circshift_rows(shift).unwrap();
            assert!(shifted.max_abs_diff(&want).unwrap() < 1e-12);
        }
        let strided = conv2d_forward(&x, &k, 2, PaddingMode::WRAP).unwrap();
        for shift in [2, 4, 6] {
            let s = conv2d_forward(&x.circshift_rows(shift).unwrap(), &k, 2, PaddingMode::WRAP).unwrap();
            let want = strided.circshift_rows(shift / 2).unwrap();
            assert!(s.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn parallel_chunks_match_sequential() {
        let x = Tensor::new([5, 2, 6, 6], pseudo(360, 0.29)).unwrap();
        let k = Tensor::new([3, 2, 3, 3], pseudo(54, 0.83)).unwrap();
        let dy = Tensor::new([5, 3, 6, 6], pseudo(540, 1.9)).unwrap();
        let seq = conv2d_backward(&x, &k, 1, PaddingMode::WRAP, &dy, true, true).unwrap();
        let y_seq = conv2d_forward(&x, &k, 1, PaddingMode::WRAP).unwrap();
        crate::parallel::set_threads(3);
        let par = conv2d_backward(&x, &k, 1, PaddingMode::WRAP, &dy, true, true).unwrap();
        let y_par = conv2d_forward(&x, &k, 1, PaddingMode::WRAP).unwrap();
        crate::parallel::set_threads(1);
        assert_eq!(y_seq, y_par);
        assert_eq!(seq.0, par.0);
        assert!(seq.1.unwrap().max_abs_diff(&par.1.unwrap()).unwrap() < 1e-12);
    }
}
