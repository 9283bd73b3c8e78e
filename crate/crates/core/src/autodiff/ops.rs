use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::{Op, Tape, Var};

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn global_average_pool_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::from_usize(hw).unwrap().recip();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for (plane, &g) in dy.data().iter().enumerate().take(n * c) {
        dx.data_mut()[plane * hw..(plane + 1) * hw].fill(g * inv);
    }
    Ok(dx)
}

pub(crate) fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    probs: &[T],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, k) = (labels.len(), logits.shape()[1]);
    let scale = dy.item()? / T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); n * k];
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..k {
            let target = if j == label { T::one() } else { T::zero() };
            dx[i * k + j] = (probs[i * k + j] - target) * scale;
        }
    }
    Tensor::new([n, k], dx)
}

/// Row-wise softmax of an `N x K` array, stabilized by max subtraction.
pub fn softmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, dst) in data.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu { input }, &[input])
    }

    /// Spatial mean per channel: `N x C x H x W` to `N x C`.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("global_average_pool over an empty map"));
        }
        let hw = h * w;
        let inv = T::from_usize(hw).unwrap().recip();
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { input }, &[input]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let [n, k] = *x.shape() else {
            return Err(Error::shape(format!("logits must be N x K, got {:?}", x.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::arg(format!("label {bad} outside [0, {k})")));
        }
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &x.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
        }
        loss /= T::from_usize(n.max(1)).unwrap();
        let probs = softmax_rows(x.data(), k);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `scale * x + offset`, with `offset` broadcast elementwise (same shape as
    /// `x`) or omitted.
    pub fn affine(&mut self, input: Var, scale: T, offset: Option<&[T]>) -> Result<Var> {
        let x = self.value(input);
        let mut out = x.map(|v| v * scale);
        if let Some(off) = offset {
            if off.len() != out.len() {
                return Err(Error::shape(format!(
                    "affine offset has {} entries for {} elements",
                    off.len(),
                    out.len()
                )));
            }
            out.data_mut().iter_mut().zip(off).for_each(|(v, &o)| *v += o);
        }
        Ok(self.push(out, Op::Affine { input, scale }, &[input]))
    }

    /// Clamps each element to `[lo[i], hi[i]]`. The gradient is zero wherever
    /// the clamp is active.
    pub fn clamp(&mut self, input: Var, lo: &[T], hi: &[T]) -> Result<Var> {
        let x = self.value(input);
        if lo.len() != x.len() || hi.len() != x.len() {
            return Err(Error::shape("clamp bounds must match the input size"));
        }
        let mut out = x.clone();
        let mut pass = vec![true; x.len()];
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < lo[i] {
                *v = lo[i];
                pass[i] = false;
            } else if *v > hi[i] {
                *v = hi[i];
                pass[i] = false;
            }
        }
        Ok(self.push(out, Op::Mask { input, pass }, &[input]))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        a.check_same_shape(b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    /// `sum_i weights[i] * x[i]`; projects any tensor to a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::shape("weighted_sum weights must match the input size"));
        }
        let total = x.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let ones = vec![T::one(); self.value(input).len()];
        self.weighted_sum(input, &ones).expect("matching weights")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[-1.0, -0.5, -3.0]).unwrap(), true);
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_average_pool_cases() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::full([1, 1, 3, 5], 4.25), true);
        let p = tape.global_average_pool(c).unwrap();
        assert_eq!(tape.value(p).data(), &[4.25]);

        let one = tape.leaf(Tensor::from_f64([2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let p1 = tape.global_average_pool(one).unwrap();
        assert_eq!(tape.value(p1).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sq = tape.leaf(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let p2 = tape.global_average_pool(sq).unwrap();
        assert_eq!(tape.value(p2).data(), &[2.5]);
        let s = tape.sum(p2);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(sq).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2, 7], 0.3), true);
        let l = tape.softmax_cross_entropy(x, &[0, 6]).unwrap();
        assert!((tape.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_correct_logit_gives_small_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64([1, 3], &[20.0, 0.0, 0.0]).unwrap(), true);
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-3);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels = [4, 0, 2];
        // Direct evaluation: -log(exp(z_y) / sum_j exp(z_j)), no max shift.
        let want = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &data[i * 5..(i + 1) * 5];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([3, 5], data).unwrap(), true);
        let l = tape.softmax_cross_entropy(x, &labels).unwrap();
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 3]), true);
        assert!(matches!(tape.softmax_cross_entropy(x, &[3]), Err(Error::Argument(_))));
    }

    #[test]
    fn clamp_blocks_gradient_where_active() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[-1.0, 0.5, 3.0]).unwrap(), true);
        let y = tape.clamp(x, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
