//! Dropout masks for the AWD-LSTM regularizers.
//!
//! Masks are 0/1 tensors; the `1 / (1 - p)` rescaling is applied by
//! [`Tape::apply_mask`] so surviving activations keep their expectation.

use rand::Rng;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) fn check_p(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("{name} dropout must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Bernoulli(1 - p) keep-mask.
pub fn bernoulli_mask<T: Scalar, R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| if p > 0.0 && rng.gen::<f64>() < p { T::zero() } else { T::one() })
        .collect();
    Tensor::from_rows(rows, cols, data)
}

pub(crate) fn keep_scale<T: Scalar>(p: f64) -> T {
    T::lit(1.0 / (1.0 - p))
}

/// One DropConnect mask per recurrent matrix, given as `(rows, cols)`
/// shapes. The caller reuses each mask for every time step of the pass.
pub fn weight_drop_masks<T: Scalar, R: Rng>(shapes: &[(usize, usize)], p_weight: f64, rng: &mut R) -> Result<Vec<Tensor<T>>> {
    check_p("weight", p_weight)?;
    Ok(shapes
        .iter()
        .map(|&(r, c)| bernoulli_mask(r, c, p_weight, rng))
        .collect())
}

/// Zero whole embedding rows (token identities) for one batch.
pub fn embedding_dropout<T: Scalar, R: Rng>(tape: &mut Tape<T>, embedding: Var, p_emb: f64, rng: &mut R) -> Result<Var> {
    check_p("embedding", p_emb)?;
    if p_emb == 0.0 {
        return Ok(embedding);
    }
    let rows = tape.value(embedding).rows();
    let mask = bernoulli_mask(rows, 1, p_emb, rng);
    tape.apply_mask(embedding, mask, keep_scale(p_emb))
}

/// Sample one `batch x width` mask and apply it to every time step.
///
/// `stacked` holds all time steps row-stacked (`steps * batch` rows,
/// time-major), as produced by the encoder.
pub fn variational_dropout<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    stacked: Var,
    batch: usize,
    p: f64,
    rng: &mut R,
) -> Result<Var> {
    check_p("variational", p)?;
    if p == 0.0 {
        return Ok(stacked);
    }
    let (rows, cols) = (tape.value(stacked).rows(), tape.value(stacked).cols());
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape("variational_dropout", &[rows, cols], &[batch, cols]));
    }
    let one: Tensor<T> = bernoulli_mask(batch, cols, p, rng);
    let mut tiled = Vec::with_capacity(rows * cols);
    for _ in 0..rows / batch {
        tiled.extend_from_slice(one.data());
    }
    tape.apply_mask(stacked, Tensor::from_rows(rows, cols, tiled), keep_scale(p))
}
