use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Real;
use crate::error::{Error, Result};

/// Projection weights of one multi-head attention block, as tape variables.
/// Weights are `D×D` (input-major, applied as `x·W`), biases length `D`.
/// There is no key bias: it shifts every score in a row by the same amount,
/// which the softmax cancels, so its gradient is identically zero.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `x·W + b`.
pub fn affine<R: Real>(tape: &mut Tape<R>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Scaled dot-product attention over `heads` heads followed by the output
/// projection. Self-attention is the case `q == k == v`.
pub fn multi_head_attention<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    p: &AttentionVars,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    if tape.value(k).cols() != d || tape.value(v).cols() != d {
        return Err(Error::dim("multi_head_attention", "query/key/value widths differ"));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::dim("multi_head_attention", "key and value lengths differ"));
    }
    let dh = d / heads;
    let qp = affine(tape, q, p.wq, p.bq)?;
    let kp = tape.matmul(k, p.wk)?;
    let vp = affine(tape, v, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, h * dh, dh)?,
                tape.slice_cols(kp, h * dh, dh)?,
                tape.slice_cols(vp, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
    affine(tape, joined, p.wo, p.bo)
}
