//! Polar origin from a predicted heatmap.
//!
//! The origin predictor emits one raw channel per image. It is normalized
//! with a spatial softmax into a strictly positive map that sums to one, and
//! its centroid (soft-argmax) is taken as the origin. Unlike argmax, every
//! heatmap pixel away from the centroid receives a nonzero gradient.

use crate::autodiff::tape::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Continuous `(x, y)` position; pixel `(row i, column j)` is at `(j, i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Origin {
    pub x: f64,
    pub y: f64,
}

impl Origin {
    /// Maps a heatmap-frame position to the input frame of a predictor whose
    /// strided blocks subsample by `stride_product` in total.
    pub fn to_input_frame(self, stride_product: usize) -> Result<Origin> {
        let (scale, offset) = frame_affine(stride_product)?;
        Ok(Origin {
            x: self.x * scale + offset,
            y: self.y * scale + offset,
        })
    }

    /// Reads the `N x 2` origin tensor produced by [`Tape::centroid`].
    pub fn from_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Origin> {
        t.data()
            .chunks(2)
            .map(|p| Origin {
                x: p[0].as_f64(),
                y: p[1].as_f64(),
            })
            .collect()
    }
}

/// Heatmap pixel `j` covers input pixels `j*s .. j*s + s - 1`, whose center is
/// `j*s + (s - 1) / 2`.
fn frame_affine(stride_product: usize) -> Result<(f64, f64)> {
    if stride_product < 1 {
        return Err(Error::arg("stride product must be at least 1"));
    }
    let s = stride_product as f64;
    Ok((s, (s - 1.0) / 2.0))
}

pub(crate) fn spatial_softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = y.dims4()?;
    let hw = h * w;
    let mut dx = vec![T::zero(); y.len()];
    for ((ys, gs), ds) in y.data().chunks(hw).zip(dy.data().chunks(hw)).zip(dx.chunks_mut(hw)) {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((d, &yi), &gi) in ds.iter_mut().zip(ys).zip(gs) {
            *d = yi * (gi - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

pub(crate) fn centroid_backward<T: Scalar>(h: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, hh, ww) = h.dims4()?;
    let mut dx = vec![T::zero(); h.len()];
    for ni in 0..n {
        let (gx, gy) = (dy.data()[2 * ni], dy.data()[2 * ni + 1]);
        for i in 0..hh {
            for j in 0..ww {
                dx[(ni * hh + i) * ww + j] = gx * T::from_usize(j).unwrap() + gy * T::from_usize(i).unwrap();
            }
        }
    }
    Tensor::new(h.shape().to_vec(), dx)
}

impl<T: Scalar> Tape<T> {
    /// Softmax over the spatial extent of each `(item, channel)` plane.
    pub fn spatial_softmax(&mut self, raw: Var) -> Result<Var> {
        let x = self.value(raw);
        let (_, _, h, w) = x.dims4()?;
        let out = Tensor::new(x.shape().to_vec(), crate::autodiff::ops::softmax_rows(x.data(), h * w))?;
        Ok(self.push(out, Op::SpatialSoftmax { input: raw }, &[raw]))
    }

    /// Probability-weighted mean pixel position of each `N x 1 x H x W`
    /// heatmap, as an `N x 2` tensor of `(x, y)` in the heatmap frame.
    pub fn centroid(&mut self, heatmap: Var) -> Result<Var> {
        let x = self.value(heatmap);
        let (n, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("heatmap must have one channel, got {c}")));
        }
        let mut out = vec![T::zero(); n * 2];
        for ni in 0..n {
            let plane = &x.data()[ni * h * w..(ni + 1) * h * w];
            let (mut sx, mut sy) = (T::zero(), T::zero());
            for i in 0..h {
                for j in 0..w {
                    let m = plane[i * w + j];
                    sx += m * T::from_usize(j).unwrap();
                    sy += m * T::from_usize(i).unwrap();
                }
            }
            out[2 * ni] = sx;
            out[2 * ni + 1] = sy;
        }
        let out = Tensor::new([n, 2], out)?;
        Ok(self.push(out, Op::Centroid { input: heatmap }, &[heatmap]))
    }

    /// Heatmap-frame origins (`N x 2`) to input-frame origins.
    pub fn to_input_frame(&mut self, origin: Var, stride_product: usize) -> Result<Var> {
        let (scale, offset) = frame_affine(stride_product)?;
        let off = vec![T::lit(offset); self.value(origin).len()];
        self.affine(origin, T::lit(scale), Some(&off))
    }
}
