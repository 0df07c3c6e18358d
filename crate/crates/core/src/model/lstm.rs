//! Single LSTM cell step on the tape.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Gate blocks per combined weight matrix, ordered input, forget, output, cell.
pub const GATES: usize = 4;

/// One LSTM step for a batch of rows.
///
/// `w_ih` is `d x 4h`, `w_hh` is `h x 4h` and `bias` is `1 x 4h`, with the
/// four gate blocks laid out column-wise as input, forget, output, cell.
/// Returns `(h', c')`.
pub fn lstm_cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, w_ih)?;
    let xw = tape.add_row(xw, bias)?;
    step_from_projection(tape, xw, h, c, w_hh)
}

/// LSTM step where `x W_ih + b` has already been computed.
pub(crate) fn step_from_projection<T: Scalar>(tape: &mut Tape<T>, xw: Var, h: Var, c: Var, w_hh: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let expected = [tape.shape(h)[0], GATES * hidden];
    if tape.shape(xw) != expected {
        return Err(Error::shape("lstm_cell_step", tape.shape(xw), &expected));
    }
    if tape.shape(c) != tape.shape(h) {
        return Err(Error::shape("lstm_cell_step", tape.shape(c), tape.shape(h)));
    }
    let hu = tape.matmul(h, w_hh)?;
    let z = tape.add(xw, hu)?;
    let zi = tape.slice_cols(z, 0, hidden)?;
    let zf = tape.slice_cols(z, hidden, 2 * hidden)?;
    let zo = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let zg = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let o = tape.sigmoid(zo);
    let g = tape.tanh(zg);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}
