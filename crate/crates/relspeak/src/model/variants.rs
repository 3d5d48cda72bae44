//! Per-step decoders for the four speaker variants.
//!
//! All variants share the same skeleton: embed the previous word, advance
//! the LSTM, attend over image features, merge the attended context with
//! the hidden state through a tanh layer, and project to vocabulary
//! log-probabilities. They differ in how the two feature grids are
//! attended:
//!
//! * basic      — one attention over the concatenated [src; trg] sequence
//! * multihead  — source head first, target head queried by its output
//! * static     — bidirectional cross-attention precomputed once per
//!                example, its outputs fed to the multihead block
//! * dynamic    — joint attention over all N^2 x N^2 (source, target)
//!                position pairs, scored while decoding

use crate::data::FeatureGrid;
use crate::error::{Error, Result};
use crate::model::cell::{attend_vars, lstm_vars};
use crate::model::{DecoderState, ModelConfig, ModelParams, ParamVars, StepOutput, Variant};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct StepVars {
    pub log_probs: Var,
    pub h: Var,
    pub c: Var,
    pub attention: Vec<(String, Var)>,
}

/// Image features bound on a tape, either raw grids or the static
/// variant's precomputed relationship-aware sequences.
pub(crate) enum FeaturesVars {
    Raw {
        fsrc: Var,
        ftrg: Var,
    },
    /// Dynamic variant: raw grids plus their key projections, computed
    /// once per example (they do not depend on the decoder state).
    Projected {
        fsrc: Var,
        ftrg: Var,
        ps: Var,
        pt_t: Var,
    },
    Precomputed {
        fs: Var,
        ft: Var,
    },
}

fn check_grid(grid: &FeatureGrid, cfg: &ModelConfig, which: &str) -> Result<()> {
    if grid.n != cfg.grid_side || grid.d != cfg.feature_dim {
        return Err(Error::Invalid(format!(
            "{which} grid is {}x{} (d={}), config expects {}x{} (d={})",
            grid.n, grid.n, grid.d, cfg.grid_side, cfg.grid_side, cfg.feature_dim
        )));
    }
    Ok(())
}

fn check_token(token: usize, cfg: &ModelConfig) -> Result<()> {
    if token >= cfg.vocab_size {
        return Err(Error::Invalid(format!(
            "token {token} out of vocabulary (size {})",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Embedding lookup + LSTM advance; returns (h', c', dropped h').
fn advance(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    token: usize,
    h: Var,
    c: Var,
) -> Result<(Var, Var, Var)> {
    let emb = tape.gather_row(pv.get("embedding"), token)?;
    let emb = tape.dropout(emb, cfg.dropout_rate)?;
    let (h2, c2) = lstm_vars(tape, pv, emb, h, c)?;
    let h_drop = tape.dropout(h2, cfg.dropout_rate)?;
    Ok((h2, c2, h_drop))
}

/// tanh(W [a; b] + bias)
fn merge(tape: &mut Tape, w: Var, bias: Var, a: Var, b: Var) -> Result<Var> {
    let cat = tape.concat_rows(a, b)?;
    let lin = tape.matvec(w, cat)?;
    let pre = tape.add(lin, bias)?;
    Ok(tape.tanh(pre))
}

/// Word distribution from the merged attentive hidden.
fn predict(tape: &mut Tape, pv: &ParamVars, merged: Var) -> Result<Var> {
    let lin = tape.matvec(pv.get("w_w"), merged)?;
    let logits = tape.add(lin, pv.get("b_w"))?;
    tape.log_softmax_vec(logits)
}

fn basic_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    fsrc: Var,
    ftrg: Var,
    token: usize,
    h: Var,
    c: Var,
) -> Result<StepVars> {
    let (h2, c2, h_drop) = advance(tape, pv, cfg, token, h, c)?;
    let f = tape.concat_rows(fsrc, ftrg)?;
    let (alpha, ctx) = attend_vars(tape, h_drop, f, pv.get("w_img"))?;
    let h_hat = merge(tape, pv.get("w_1"), pv.get("b_1"), ctx, h_drop)?;
    let h_hat = tape.dropout(h_hat, cfg.dropout_rate)?;
    let log_probs = predict(tape, pv, h_hat)?;
    Ok(StepVars {
        log_probs,
        h: h2,
        c: c2,
        attention: vec![("alpha".into(), alpha)],
    })
}

/// The sequential two-head block: source head queried by the hidden state,
/// target head queried by the source head's output.
fn multihead_core(
    tape: &mut Tape,
    pv: &ParamVars,
    src_feats: Var,
    trg_feats: Var,
    query: Var,
) -> Result<(Var, Vec<(String, Var)>)> {
    let (alpha_src, f_src_hat) = attend_vars(tape, query, src_feats, pv.get("w_src"))?;
    let h_src = merge(tape, pv.get("w_2"), pv.get("b_2"), f_src_hat, query)?;
    let (alpha_trg, f_trg_hat) = attend_vars(tape, h_src, trg_feats, pv.get("w_trg"))?;
    let h_trg = merge(tape, pv.get("w_3"), pv.get("b_3"), f_trg_hat, h_src)?;
    Ok((
        h_trg,
        vec![
            ("alpha_src".into(), alpha_src),
            ("alpha_trg".into(), alpha_trg),
        ],
    ))
}

fn multihead_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    src_feats: Var,
    trg_feats: Var,
    token: usize,
    h: Var,
    c: Var,
) -> Result<StepVars> {
    let (h2, c2, h_drop) = advance(tape, pv, cfg, token, h, c)?;
    let (h_trg, attention) = multihead_core(tape, pv, src_feats, trg_feats, h_drop)?;
    let out = tape.dropout(h_trg, cfg.dropout_rate)?;
    let log_probs = predict(tape, pv, out)?;
    Ok(StepVars {
        log_probs,
        h: h2,
        c: c2,
        attention,
    })
}

/// One direction of the static bidirectional relational attention:
/// alpha_{i,j} = softmax_j((W_a q_i)^T (W_b k_j)), merged through W_m.
fn static_direction(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    w_a: Var,
    w_b: Var,
    w_m: Var,
    b_m: Var,
) -> Result<Var> {
    let wa_t = tape.transpose(w_a)?;
    let wb_t = tape.transpose(w_b)?;
    let a = tape.matmul(queries, wa_t)?; // [N^2, K]
    let b = tape.matmul(keys, wb_t)?; // [N^2, K]
    let b_t = tape.transpose(b)?;
    let scores = tape.matmul(a, b_t)?; // [N^2, N^2]
    let alpha = tape.softmax_rows(scores)?;
    let attended = tape.matmul(alpha, keys)?; // [N^2, D]
    let cat = tape.concat_cols(queries, attended)?;
    let wm_t = tape.transpose(w_m)?;
    let lin = tape.matmul(cat, wm_t)?;
    let pre = tape.add_row(lin, b_m)?;
    Ok(tape.tanh(pre))
}

pub(crate) fn static_precompute_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    fsrc: Var,
    ftrg: Var,
) -> Result<(Var, Var)> {
    let fs = static_direction(
        tape,
        fsrc,
        ftrg,
        pv.get("w_s"),
        pv.get("w_t"),
        pv.get("w_4"),
        pv.get("b_4"),
    )?;
    let ft = static_direction(
        tape,
        ftrg,
        fsrc,
        pv.get("w_s_rev"),
        pv.get("w_t_rev"),
        pv.get("w_4_rev"),
        pv.get("b_4_rev"),
    )?;
    Ok((fs, ft))
}

#[allow(clippy::too_many_arguments)]
fn dynamic_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    fsrc: Var,
    ftrg: Var,
    ps: Var,
    pt_t: Var,
    token: usize,
    h: Var,
    c: Var,
) -> Result<StepVars> {
    let (h2, c2, h_drop) = advance(tape, pv, cfg, token, h, c)?;
    let n2 = tape.shape(fsrc)[0];

    // factored pair scores between the projected sides, queried by h
    let q = tape.matvec(pv.get("w_hk"), h_drop)?; // [K]
    let psq = tape.mul_row(ps, q)?;
    let scores = tape.matmul(psq, pt_t)?; // [N^2, N^2]

    // joint softmax over all N^4 pairs
    let flat = tape.reshape(scores, vec![n2 * n2])?;
    let alpha_flat = tape.softmax_vec(flat)?;
    let alpha = tape.reshape(alpha_flat, vec![n2, n2])?;

    let src_weights = tape.row_sum(alpha)?;
    let trg_weights = tape.col_sum(alpha)?;
    let f_src_d = tape.vecmat(src_weights, fsrc)?;
    let f_trg_d = tape.vecmat(trg_weights, ftrg)?;

    // tanh(W_5s f_src_d + W_5t f_trg_d + W_5h h + b_5); dropout is applied
    // to the merged output only, not to h inside the merge
    let s_term = tape.matvec(pv.get("w_5s"), f_src_d)?;
    let t_term = tape.matvec(pv.get("w_5t"), f_trg_d)?;
    let h_term = tape.matvec(pv.get("w_5h"), h2)?;
    let st = tape.add(s_term, t_term)?;
    let sth = tape.add(st, h_term)?;
    let pre = tape.add(sth, pv.get("b_5"))?;
    let merged = tape.tanh(pre);
    let out = tape.dropout(merged, cfg.dropout_rate)?;
    let log_probs = predict(tape, pv, out)?;
    Ok(StepVars {
        log_probs,
        h: h2,
        c: c2,
        attention: vec![("alpha_pairs".into(), alpha)],
    })
}

/// Dispatches one decoding step for any variant.
pub(crate) fn step_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    feats: &FeaturesVars,
    token: usize,
    h: Var,
    c: Var,
) -> Result<StepVars> {
    check_token(token, cfg)?;
    match (cfg.variant, feats) {
        (Variant::Basic, FeaturesVars::Raw { fsrc, ftrg }) => {
            basic_vars(tape, pv, cfg, *fsrc, *ftrg, token, h, c)
        }
        (Variant::Multihead, FeaturesVars::Raw { fsrc, ftrg }) => {
            multihead_vars(tape, pv, cfg, *fsrc, *ftrg, token, h, c)
        }
        (Variant::Static, FeaturesVars::Precomputed { fs, ft }) => {
            multihead_vars(tape, pv, cfg, *fs, *ft, token, h, c)
        }
        (Variant::Dynamic, FeaturesVars::Projected { fsrc, ftrg, ps, pt_t }) => {
            dynamic_vars(tape, pv, cfg, *fsrc, *ftrg, *ps, *pt_t, token, h, c)
        }
        _ => Err(Error::Invalid(
            "feature binding does not match the model variant".into(),
        )),
    }
}

/// Binds raw grids on the tape and precomputes static sequences if needed.
pub(crate) fn bind_features(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
) -> Result<FeaturesVars> {
    check_grid(f_src, cfg, "source")?;
    check_grid(f_trg, cfg, "target")?;
    let fsrc = tape.leaf(f_src.to_tensor());
    let ftrg = tape.leaf(f_trg.to_tensor());
    match cfg.variant {
        Variant::Static => {
            let (fs, ft) = static_precompute_vars(tape, pv, fsrc, ftrg)?;
            Ok(FeaturesVars::Precomputed { fs, ft })
        }
        Variant::Dynamic => {
            let wsk_t = tape.transpose(pv.get("w_sk"))?;
            let wtk_t = tape.transpose(pv.get("w_tk"))?;
            let ps = tape.matmul(fsrc, wsk_t)?; // [N^2, K]
            let pt = tape.matmul(ftrg, wtk_t)?; // [N^2, K]
            let pt_t = tape.transpose(pt)?;
            Ok(FeaturesVars::Projected { fsrc, ftrg, ps, pt_t })
        }
        _ => Ok(FeaturesVars::Raw { fsrc, ftrg }),
    }
}

/// Teacher-forced per-token mean negative log likelihood over the
/// reference (BOS-fed, EOS-supervised, PAD positions masked).
pub(crate) fn sequence_loss_vars(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    feats: &FeaturesVars,
    reference: &[usize],
) -> Result<Var> {
    use crate::data::{BOS, EOS, PAD};
    if reference.is_empty() {
        return Err(Error::Invalid("empty reference sequence".into()));
    }
    let mut h = tape.leaf(Tensor::zeros(vec![cfg.hidden_dim]));
    let mut c = tape.leaf(Tensor::zeros(vec![cfg.hidden_dim]));

    let mut inputs = vec![BOS];
    inputs.extend_from_slice(reference);
    let mut targets = reference.to_vec();
    targets.push(EOS);

    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (input, target) in inputs.iter().zip(&targets) {
        let step = step_vars(tape, pv, cfg, feats, *input, h, c)?;
        h = step.h;
        c = step.c;
        if *target == PAD {
            continue;
        }
        check_token(*target, cfg)?;
        let lp = tape.pick(step.log_probs, *target)?;
        let nll = tape.neg(lp);
        total = Some(match total {
            Some(acc) => tape.add(acc, nll)?,
            None => nll,
        });
        count += 1;
    }
    let total = total.ok_or_else(|| Error::Invalid("reference is all PAD".into()))?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

fn extract_step(tape: &Tape, step: StepVars) -> StepOutput {
    StepOutput {
        log_probs: tape.value(step.log_probs).clone(),
        state: DecoderState {
            h: tape.value(step.h).clone(),
            c: tape.value(step.c).clone(),
        },
        attention: step
            .attention
            .into_iter()
            .map(|(n, v)| (n, tape.value(v).clone()))
            .collect(),
    }
}

fn run_raw_step(
    token: usize,
    state: &DecoderState,
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
    expect: Variant,
) -> Result<StepOutput> {
    if cfg.variant != expect {
        return Err(Error::Invalid(format!(
            "config variant is {}, expected {}",
            cfg.variant.name(),
            expect.name()
        )));
    }
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let feats = bind_features(&mut tape, &pv, cfg, f_src, f_trg)?;
    let h = tape.leaf(state.h.clone());
    let c = tape.leaf(state.c.clone());
    let step = step_vars(&mut tape, &pv, cfg, &feats, token, h, c)?;
    Ok(extract_step(&tape, step))
}

/// One attention over the concatenated [src; trg] feature sequence.
pub fn basic_step(
    token: usize,
    state: &DecoderState,
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    run_raw_step(token, state, f_src, f_trg, params, cfg, Variant::Basic)
}

pub fn multihead_step(
    token: usize,
    state: &DecoderState,
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    run_raw_step(token, state, f_src, f_trg, params, cfg, Variant::Multihead)
}

pub fn dynamic_step(
    token: usize,
    state: &DecoderState,
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    run_raw_step(token, state, f_src, f_trg, params, cfg, Variant::Dynamic)
}

/// Bidirectional relational attention, computed once per example.
/// Returns the two relationship-aware sequences (each N^2 x D).
pub fn static_relational_precompute(
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
    params: &ModelParams,
) -> Result<(Tensor, Tensor)> {
    if f_src.n != f_trg.n || f_src.d != f_trg.d {
        return Err(Error::Invalid(format!(
            "grids disagree: {}x{} (d={}) vs {}x{} (d={})",
            f_src.n, f_src.n, f_src.d, f_trg.n, f_trg.n, f_trg.d
        )));
    }
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let fsrc = tape.leaf(f_src.to_tensor());
    let ftrg = tape.leaf(f_trg.to_tensor());
    let (fs, ft) = static_precompute_vars(&mut tape, &pv, fsrc, ftrg)?;
    Ok((tape.value(fs).clone(), tape.value(ft).clone()))
}

/// Multihead control flow over the precomputed sequences.
pub fn static_step(
    token: usize,
    state: &DecoderState,
    fs_hat: &Tensor,
    ft_hat: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    if cfg.variant != Variant::Static {
        return Err(Error::Invalid(format!(
            "config variant is {}, expected static",
            cfg.variant.name()
        )));
    }
    let n2 = cfg.positions();
    if fs_hat.shape() != [n2, cfg.feature_dim] || ft_hat.shape() != [n2, cfg.feature_dim] {
        return Err(Error::Invalid(
            "precomputed sequences do not match the config".into(),
        ));
    }
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let fs = tape.leaf(fs_hat.clone());
    let ft = tape.leaf(ft_hat.clone());
    let feats = FeaturesVars::Precomputed { fs, ft };
    let h = tape.leaf(state.h.clone());
    let c = tape.leaf(state.c.clone());
    let step = step_vars(&mut tape, &pv, cfg, &feats, token, h, c)?;
    Ok(extract_step(&tape, step))
}

// ── Brute-force oracle for the dynamic variant ──────────────────────
//
// Materializes all N^4 relationship pairs explicitly with plain loops:
// key_ij = W_sk f_i ⊙ W_tk f_j, score_ij = key_ij · (W_hk h),
// value_ij = W_5s f_i + W_5t f_j, output = tanh(Σ α value + W_5h h + b_5).
// Shares no code with the tape path.

fn plain_matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|i| (0..n).map(|j| w.data()[i * n + j] * x[j]).sum())
        .collect()
}

fn plain_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Explicit attention over all visual relationship pairs; intended for
/// small grids (N <= 4). Agrees with `dynamic_step` to high precision.
pub fn dynamic_step_oracle(
    token: usize,
    state: &DecoderState,
    f_src: &FeatureGrid,
    f_trg: &FeatureGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    if cfg.variant != Variant::Dynamic {
        return Err(Error::Invalid("oracle requires the dynamic variant".into()));
    }
    check_grid(f_src, cfg, "source")?;
    check_grid(f_trg, cfg, "target")?;
    check_token(token, cfg)?;
    let p = |name: &str| -> &Tensor { params.get(name).expect("dynamic parameter") };
    let (n2, d, hd) = (cfg.positions(), cfg.feature_dim, cfg.hidden_dim);

    // embedding + LSTM, plain loops
    let e = cfg.embed_dim;
    let emb = &p("embedding").data()[token * e..(token + 1) * e];
    let mut xh: Vec<f64> = emb.to_vec();
    xh.extend_from_slice(state.h.data());
    let gate = |w: &str, b: &str| -> Vec<f64> {
        let lin = plain_matvec(p(w), &xh);
        lin.iter()
            .zip(p(b).data())
            .map(|(v, bv)| v + bv)
            .collect()
    };
    let i: Vec<f64> = gate("lstm_wi", "lstm_bi").iter().map(|&v| plain_sigmoid(v)).collect();
    let f: Vec<f64> = gate("lstm_wf", "lstm_bf").iter().map(|&v| plain_sigmoid(v)).collect();
    let g: Vec<f64> = gate("lstm_wg", "lstm_bg").iter().map(|&v| v.tanh()).collect();
    let o: Vec<f64> = gate("lstm_wo", "lstm_bo").iter().map(|&v| plain_sigmoid(v)).collect();
    let c_new: Vec<f64> = (0..hd)
        .map(|k| f[k] * state.c.data()[k] + i[k] * g[k])
        .collect();
    let h_new: Vec<f64> = (0..hd).map(|k| o[k] * c_new[k].tanh()).collect();

    // all N^4 pair scores, one pair at a time
    let q = plain_matvec(p("w_hk"), &h_new);
    let src_rows: Vec<&[f64]> = (0..n2).map(|i| &f_src.features[i * d..(i + 1) * d]).collect();
    let trg_rows: Vec<&[f64]> = (0..n2).map(|j| &f_trg.features[j * d..(j + 1) * d]).collect();
    let mut scores = vec![0.0; n2 * n2];
    for ii in 0..n2 {
        let ks = plain_matvec(p("w_sk"), src_rows[ii]);
        for jj in 0..n2 {
            let kt = plain_matvec(p("w_tk"), trg_rows[jj]);
            let key: Vec<f64> = ks.iter().zip(&kt).map(|(a, b)| a * b).collect();
            scores[ii * n2 + jj] = key.iter().zip(&q).map(|(a, b)| a * b).sum();
        }
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|v| v / z).collect();

    // Σ α value, value_ij = W_5s f_i + W_5t f_j
    let mut attended = vec![0.0; hd];
    for ii in 0..n2 {
        let vs = plain_matvec(p("w_5s"), src_rows[ii]);
        for jj in 0..n2 {
            let vt = plain_matvec(p("w_5t"), trg_rows[jj]);
            let a = alpha[ii * n2 + jj];
            for k in 0..hd {
                attended[k] += a * (vs[k] + vt[k]);
            }
        }
    }
    let h_term = plain_matvec(p("w_5h"), &h_new);
    let merged: Vec<f64> = (0..hd)
        .map(|k| (attended[k] + h_term[k] + p("b_5").data()[k]).tanh())
        .collect();

    let mut logits = plain_matvec(p("w_w"), &merged);
    for (l, b) in logits.iter_mut().zip(p("b_w").data()) {
        *l += b;
    }
    let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - lmax).exp()).sum::<f64>().ln() + lmax;
    let log_probs: Vec<f64> = logits.iter().map(|v| v - lse).collect();

    Ok(StepOutput {
        log_probs: Tensor::vector(log_probs),
        state: DecoderState {
            h: Tensor::vector(h_new),
            c: Tensor::vector(c_new),
        },
        attention: vec![(
            "alpha_pairs".into(),
            Tensor::from_vec(vec![n2, n2], alpha)?,
        )],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ExamplePair;
    use crate::model::sequence_loss;
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_cfg(variant: Variant, grid_side: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(variant, grid_side, 6, 12);
        cfg.hidden_dim = 10;
        cfg.embed_dim = 5;
        cfg
    }

    fn random_grid(seed: u64, n: usize, d: usize) -> FeatureGrid {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        FeatureGrid::new(n, d, (0..n * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Same parameters with the named tensors replaced by zeros.
    fn zeroed(params: &ModelParams, names: &[&str]) -> ModelParams {
        let entries = params
            .entries()
            .iter()
            .map(|(n, t)| {
                if names.contains(&n.as_str()) {
                    (n.clone(), Rc::new(Tensor::zeros(t.shape().to_vec())))
                } else {
                    (n.clone(), Rc::clone(t))
                }
            })
            .collect();
        ModelParams::from_entries(entries)
    }

    #[test]
    fn zeroed_output_layer_predicts_uniformly() {
        let cfg = small_cfg(Variant::Basic, 2);
        let params = zeroed(&ModelParams::init(&cfg, 3).unwrap(), &["w_w", "b_w"]);
        let src = random_grid(1, 2, 6);
        let trg = random_grid(2, 2, 6);
        let state = DecoderState::zeros(cfg.hidden_dim);
        let step = basic_step(5, &state, &src, &trg, &params, &cfg).unwrap();
        let want = -(cfg.vocab_size as f64).ln();
        for lp in step.log_probs.data() {
            assert!((lp - want).abs() < 1e-12);
        }
        // and the teacher-forced loss equals ln(vocab) exactly
        let pair = ExamplePair {
            id: "t".into(),
            src,
            trg,
            captions: vec!["unused".into()],
            split: crate::data::Split::Train,
        };
        let loss = sequence_loss(&pair, &[5, 6, 7], &params, &cfg, false, 0).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn static_single_cell_closed_form() {
        let cfg = small_cfg(Variant::Static, 1);
        let params = ModelParams::init(&cfg, 9).unwrap();
        let src = random_grid(4, 1, 6);
        let trg = random_grid(5, 1, 6);
        let (fs, ft) = static_relational_precompute(&src, &trg, &params).unwrap();

        // one cell attends only to the other image's one cell:
        // fs = tanh(W_4 [f_src; f_trg] + b_4), ft mirrors with _rev weights
        let expect = |w: &Tensor, b: &Tensor, first: &[f64], second: &[f64]| -> Vec<f64> {
            let cat: Vec<f64> = first.iter().chain(second).copied().collect();
            (0..w.shape()[0])
                .map(|i| {
                    let row = &w.data()[i * cat.len()..(i + 1) * cat.len()];
                    (row.iter().zip(&cat).map(|(x, y)| x * y).sum::<f64>() + b.data()[i]).tanh()
                })
                .collect()
        };
        let want_fs = expect(
            params.get("w_4").unwrap(),
            params.get("b_4").unwrap(),
            src.cell(0),
            trg.cell(0),
        );
        let want_ft = expect(
            params.get("w_4_rev").unwrap(),
            params.get("b_4_rev").unwrap(),
            trg.cell(0),
            src.cell(0),
        );
        for (a, b) in fs.data().iter().zip(&want_fs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ft.data().iter().zip(&want_ft) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn static_zero_merge_gives_zero_sequences() {
        let cfg = small_cfg(Variant::Static, 2);
        let params = zeroed(
            &ModelParams::init(&cfg, 9).unwrap(),
            &["w_4", "b_4", "w_4_rev", "b_4_rev"],
        );
        let src = random_grid(6, 2, 6);
        let trg = random_grid(7, 2, 6);
        let (fs, ft) = static_relational_precompute(&src, &trg, &params).unwrap();
        assert!(fs.data().iter().chain(ft.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn dynamic_constant_grids_attend_uniformly() {
        let cfg = small_cfg(Variant::Dynamic, 2);
        let params = ModelParams::init(&cfg, 11).unwrap();
        let row: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        let grid = |scale: f64| {
            FeatureGrid::new(2, 6, row.iter().map(|v| v * scale).cycle().take(24).collect())
                .unwrap()
        };
        let state = DecoderState::zeros(cfg.hidden_dim);
        let step = dynamic_step(3, &state, &grid(1.0), &grid(0.5), &params, &cfg).unwrap();
        let alpha = &step.attention[0].1;
        assert_eq!(step.attention[0].0, "alpha_pairs");
        let want = 1.0 / (4.0 * 4.0);
        for a in alpha.data() {
            assert!((a - want).abs() < 1e-12, "alpha {a} != {want}");
        }
    }

    #[test]
    fn single_cell_pair_attention_is_one() {
        let cfg = small_cfg(Variant::Dynamic, 1);
        let params = ModelParams::init(&cfg, 13).unwrap();
        let src = random_grid(8, 1, 6);
        let trg = random_grid(9, 1, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let state = DecoderState {
            h: Tensor::vector((0..10).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            c: Tensor::vector((0..10).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        };
        for step in [
            dynamic_step(4, &state, &src, &trg, &params, &cfg).unwrap(),
            dynamic_step_oracle(4, &state, &src, &trg, &params, &cfg).unwrap(),
        ] {
            assert_eq!(step.attention[0].1.data(), &[1.0]);
        }
    }

    #[test]
    fn zeroed_query_projection_attends_uniformly() {
        // w_hk = 0 makes every pair score zero in both implementations
        let cfg = small_cfg(Variant::Dynamic, 2);
        let params = zeroed(&ModelParams::init(&cfg, 15).unwrap(), &["w_hk"]);
        let src = random_grid(10, 2, 6);
        let trg = random_grid(11, 2, 6);
        let state = DecoderState::zeros(cfg.hidden_dim);
        for step in [
            dynamic_step(2, &state, &src, &trg, &params, &cfg).unwrap(),
            dynamic_step_oracle(2, &state, &src, &trg, &params, &cfg).unwrap(),
        ] {
            for a in step.attention[0].1.data() {
                assert!((a - 1.0 / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_variant_config_is_rejected() {
        let cfg = small_cfg(Variant::Basic, 2);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let src = random_grid(1, 2, 6);
        let trg = random_grid(2, 2, 6);
        let state = DecoderState::zeros(cfg.hidden_dim);
        assert!(dynamic_step(0, &state, &src, &trg, &params, &cfg).is_err());
        assert!(basic_step(0, &state, &src, &trg, &params, &cfg).is_ok());
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cfg = small_cfg(Variant::Basic, 2);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let src = random_grid(1, 2, 6);
        let trg = random_grid(2, 2, 6);
        let state = DecoderState::zeros(cfg.hidden_dim);
        assert!(basic_step(cfg.vocab_size, &state, &src, &trg, &params, &cfg).is_err());
    }
}
