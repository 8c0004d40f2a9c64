//! Central finite-difference gradient checking.
//!
//! The checker reduces the function output to a scalar with fixed random
//! weights, `L = Σ r ⊙ f(x)`, and compares the tape's analytic gradient of
//! `L` with `(L(x + ε) − L(x − ε)) / 2ε`. Numeric evaluations only run the
//! forward pass and reduce in f64 outside the tape.

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f32,
    /// Check at most this many coordinates per input (sampled without replacement).
    pub max_coords: usize,
    /// Lower bound on the denominator of the relative error.
    pub floor: f32,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            max_coords: 64,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `max |analytic − numeric| / max(max |numeric|, max |analytic|, floor)`.
    pub rel_errors: Vec<f32>,
    /// Per input: `max |analytic − numeric|`.
    pub abs_errors: Vec<f32>,
    /// Per input: `max(max |numeric|, max |analytic|)`.
    pub scales: Vec<f32>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f32 {
        self.rel_errors.iter().copied().fold(0.0, f32::max)
    }

    /// Largest absolute error over all inputs divided by the largest gradient
    /// magnitude over all inputs. Inputs whose true gradient is zero are then
    /// judged against the scale of the whole function.
    pub fn max_error_vs_global_scale(&self, floor: f32) -> f32 {
        let err = self.abs_errors.iter().copied().fold(0.0, f32::max);
        let scale = self.scales.iter().copied().fold(floor, f32::max);
        err / scale
    }
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let weights = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let y = f(&mut t, &vs)?;
        Ok(t.value(y)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut abs_errors = Vec::with_capacity(inputs.len());
    let mut scales = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let mut max_diff = 0.0f32;
        let mut max_num = 0.0f32;
        let mut max_ana = 0.0f32;
        for &j in &coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = ((plus - minus) / (2.0 * opts.eps as f64)) as f32;
            let a = analytic[i].data()[j];
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
            max_ana = max_ana.max(a.abs());
        }
        coords_checked += coords.len();
        rel_errors.push(max_diff / max_num.max(max_ana).max(opts.floor));
        abs_errors.push(max_diff);
        scales.push(max_num.max(max_ana));
    }
    Ok(GradCheckReport {
        rel_errors,
        abs_errors,
        scales,
        coords_checked,
    })
}
