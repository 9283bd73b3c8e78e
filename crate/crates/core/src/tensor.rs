//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optional gradients with respect to two inputs.
pub(crate) type GradPair<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// Dense N-dimensional array. Image data uses `N x C x H x W` order.
///
/// Gradients are not stored here: they live on the [`Tape`](crate::Tape)
/// node that owns a copy of the value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::shape(format!(
                "expected a single element, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected N x C x H x W, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    /// Element at `(n, c, h, w)` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cc, hh, ww) = self.dims4().expect("rank-4 tensor");
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Batch items `[start, start + count)` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("rank-0 tensor"))?;
        if start + count > n {
            return Err(Error::shape(format!(
                "batch slice {start}..{} out of {n}",
                start + count
            )));
        }
        let item: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * item..(start + count) * item].to_vec(),
        })
    }

    /// Circular shift along the height axis of an NCHW tensor:
    /// `out[.., i, ..] = in[.., (i - k) mod H, ..]`.
    pub fn circshift_rows(&self, k: isize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let mut out = Self::zeros(self.shape.clone());
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..h {
                let src = (i as isize - k).rem_euclid(h as isize) as usize;
                out.data[base + i * w..base + (i + 1) * w]
                    .copy_from_slice(&self.data[base + src * w..base + (src + 1) * w]);
            }
        }
        Ok(out)
    }

    /// Shift along the width axis of an NCHW tensor, filling vacated columns
    /// with zero: `out[.., j] = in[.., j - m]`.
    pub fn shift_cols(&self, m: isize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let mut out = Self::zeros(self.shape.clone());
        for row in 0..n * c * h {
            for j in 0..w {
                let src = j as isize - m;
                if src >= 0 && (src as usize) < w {
                    out.data[row * w + j] = self.data[row * w + src as usize];
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        let total: T = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(total / T::from_usize(self.data.len().max(1)).unwrap())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.reshape([3, 3]).is_err());
    }

    #[test]
    fn circshift_rows_wraps() {
        let t = Tensor::<f64>::from_f64([1, 1, 3, 1], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.circshift_rows(1).unwrap().data(), &[3.0, 1.0, 2.0]);
        assert_eq!(t.circshift_rows(-1).unwrap().data(), &[2.0, 3.0, 1.0]);
        assert_eq!(t.circshift_rows(3).unwrap(), t);
    }

    #[test]
    fn shift_cols_zero_fills() {
        let t = Tensor::<f64>::from_f64([1, 1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.shift_cols(1).unwrap().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(t.shift_cols(-2).unwrap().data(), &[3.0, 0.0, 0.0]);
    }
}
