//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Inputs larger than this are checked on a random subset of elements.
    pub max_elements: usize,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding do not dominate the result.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: 256,
            floor: 1e-5,
            seed: 0,
        }
    }
}

/// Largest relative error between tape gradients and central differences of
/// the scalar returned by `f`, over every input tensor.
///
/// `f` receives a fresh tape and one leaf per input (all `requires_grad`) and
/// must return a scalar. The caller chooses evaluation points away from
/// kinks (relu at zero, integer sampling coordinates).
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = match tape.grad(*v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(inputs[i].shape().to_vec()),
        };
        let n = inputs[i].len();
        let picks: Vec<usize> = if n > opts.max_elements {
            sample(&mut rng, n, opts.max_elements).into_vec()
        } else {
            (0..n).collect()
        };
        for j in picks {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - opts.step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::arg(format!("non-finite gradient at input {i}, element {j}")));
            }
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
