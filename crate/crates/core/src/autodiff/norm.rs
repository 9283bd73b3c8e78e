//! Per-channel batch normalization over the N, H and W axes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::{Op, Tape, Var};

/// Exponential moving averages of the per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into `running`
    /// (`running = (1 - momentum) * running + momentum * batch`, unbiased
    /// variance).
    Train {
        running: &'a mut RunningStats<T>,
        momentum: T,
    },
    /// Normalize with the stored running statistics.
    Eval { running: &'a RunningStats<T> },
}

pub(crate) struct BatchNormSaved<'a, T> {
    pub xhat: &'a [T],
    pub inv_std: &'a [T],
    pub train: bool,
}

pub(crate) fn backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dy.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * saved.xhat[i];
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let scale = gamma.data()[ci] * saved.inv_std[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                dx.data_mut()[i] = if saved.train {
                    scale / m * (m * dy.data()[i] - sum_dy - saved.xhat[i] * sum_dy_xhat)
                } else {
                    scale * dy.data()[i]
                };
            }
        }
    }
    Ok((dx, Tensor::new([c], dgamma)?, Tensor::new([c], dbeta)?))
}

impl<T: Scalar> Tape<T> {
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        epsilon: T,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if n == 0 {
            return Err(Error::arg("batch_norm on an empty batch"));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta have {}/{} entries for {c} channels",
                g.len(),
                b.len()
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let (mean, var, train) = match &mode {
            BatchNormMode::Train { .. } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let m = T::from_usize(count).unwrap();
                for ci in 0..c {
                    let plane = |ni: usize| {
                        let base = (ni * c + ci) * hw;
                        &x.data()[base..base + hw]
                    };
                    let mu = (0..n).map(|ni| plane(ni).iter().copied().sum::<T>()).sum::<T>() / m;
                    let v = (0..n)
                        .map(|ni| plane(ni).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                        .sum::<T>()
                        / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { running } => (running.mean.clone(), running.var.clone(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + epsilon).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g.data()[ci] * xh + b.data()[ci];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        if let BatchNormMode::Train { running, momentum } = mode {
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ci in 0..c {
                running.mean[ci] = (T::one() - momentum) * running.mean[ci] + momentum * mean[ci];
                running.var[ci] = (T::one() - momentum) * running.var[ci] + momentum * var[ci] * unbias;
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        ))
    }
}
