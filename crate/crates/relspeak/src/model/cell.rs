//! LSTM cell and the single-query attention block shared by all variants.

use crate::error::{Error, Result};
use crate::model::{DecoderState, ModelParams, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One gate: act(W [x; h] + b).
fn gate(
    tape: &mut Tape,
    w: Var,
    b: Var,
    xh: Var,
    act: fn(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let lin = tape.matvec(w, xh)?;
    let pre = tape.add(lin, b)?;
    Ok(act(tape, pre))
}

/// Standard LSTM cell on the tape: input/forget/output gates plus tanh
/// candidate; returns (h', c').
pub(crate) fn lstm_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    emb: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let xh = tape.concat_rows(emb, h)?;
    let i = gate(tape, pv.get("lstm_wi"), pv.get("lstm_bi"), xh, Tape::sigmoid)?;
    let f = gate(tape, pv.get("lstm_wf"), pv.get("lstm_bf"), xh, Tape::sigmoid)?;
    let g = gate(tape, pv.get("lstm_wg"), pv.get("lstm_bg"), xh, Tape::tanh)?;
    let o = gate(tape, pv.get("lstm_wo"), pv.get("lstm_bo"), xh, Tape::sigmoid)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

/// Advances the decoder LSTM one step from a word embedding.
pub fn lstm_cell(
    prev_word_embedding: &Tensor,
    state: &DecoderState,
    params: &ModelParams,
) -> Result<DecoderState> {
    let expected = params
        .get("lstm_wi")
        .ok_or_else(|| Error::Invalid("params lack LSTM weights".into()))?
        .shape()[1]
        - state.h.numel();
    if prev_word_embedding.numel() != expected {
        return Err(Error::Invalid(format!(
            "embedding length {} does not match embed_dim {}",
            prev_word_embedding.numel(),
            expected
        )));
    }
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let emb = tape.leaf(prev_word_embedding.clone());
    let h = tape.leaf(state.h.clone());
    let c = tape.leaf(state.c.clone());
    let (h2, c2) = lstm_vars(&mut tape, &pv, emb, h, c)?;
    Ok(DecoderState {
        h: tape.value(h2).clone(),
        c: tape.value(c2).clone(),
    })
}

/// Single-query attention: alpha_i = softmax_i(q^T W f_i), context = sum_i alpha_i f_i.
pub(crate) fn attend_vars(
    tape: &mut Tape,
    query: Var,
    features: Var,
    weight: Var,
) -> Result<(Var, Var)> {
    if tape.shape(features).len() != 2 || tape.shape(features)[0] == 0 {
        return Err(Error::Invalid("attend: empty feature sequence".into()));
    }
    let u = tape.vecmat(query, weight)?; // q^T W -> [d]
    let scores = tape.matvec(features, u)?; // [n]
    let alpha = tape.softmax_vec(scores)?;
    let context = tape.vecmat(alpha, features)?; // [d]
    Ok((alpha, context))
}

/// Attention over a feature sequence. Returns (weights, context).
pub fn attend(query: &Tensor, features: &Tensor, weight: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let q = tape.leaf(query.clone());
    let f = tape.leaf(features.clone());
    let w = tape.leaf(weight.clone());
    let (alpha, ctx) = attend_vars(&mut tape, q, f, w)?;
    Ok((tape.value(alpha).clone(), tape.value(ctx).clone()))
}
