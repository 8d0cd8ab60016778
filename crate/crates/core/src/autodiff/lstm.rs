use super::{AutodiffError, Tape, Var};

/// Gate parameters of one LSTM cell bound to a tape.
///
/// `weight` is `[input + hidden, 4 * hidden]` with gate columns ordered
/// input, forget, candidate, output; `bias` has length `4 * hidden`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub weight: Var,
    pub bias: Var,
}

/// One LSTM step over a batch: `x` is `[b, input]`, `h` and `c` are `[b, hidden]`.
///
/// Returns `(h', c')` with `c' = f * c + i * g` and `h' = o * tanh(c')`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, cell: LstmVars) -> Result<(Var, Var), AutodiffError> {
    let hidden = match tape.shape(h) {
        [_, hd] => *hd,
        s => {
            return Err(AutodiffError::InvalidArgument {
                op: "lstm_step",
                detail: format!("hidden state must be rank 2, got {s:?}"),
            })
        }
    };
    if tape.shape(c) != tape.shape(h) {
        return Err(AutodiffError::ShapeMismatch {
            op: "lstm_step",
            lhs: tape.shape(h).to_vec(),
            rhs: tape.shape(c).to_vec(),
        });
    }
    let w_shape = tape.shape(cell.weight).to_vec();
    let in_dim = tape.shape(x).get(1).copied().unwrap_or(0);
    if w_shape != [in_dim + hidden, 4 * hidden] {
        return Err(AutodiffError::ShapeMismatch {
            op: "lstm_step",
            lhs: vec![in_dim + hidden, 4 * hidden],
            rhs: w_shape,
        });
    }
    let xh = tape.concat(&[x, h], 1)?;
    let pre = tape.matmul(xh, cell.weight)?;
    let pre = tape.add(pre, cell.bias)?;
    let i = tape.slice_cols(pre, 0, hidden)?;
    let f = tape.slice_cols(pre, hidden, hidden)?;
    let g = tape.slice_cols(pre, 2 * hidden, hidden)?;
    let o = tape.slice_cols(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// `old + mask * (new - old)` with a per-row 0/1 `mask`; rows whose sequence
/// has ended keep their previous state.
pub fn masked_update(tape: &mut Tape, old: Var, new: Var, mask: Var) -> Result<Var, AutodiffError> {
    let delta = tape.sub(new, old)?;
    let delta = tape.scale_rows(delta, mask)?;
    tape.add(old, delta)
}
