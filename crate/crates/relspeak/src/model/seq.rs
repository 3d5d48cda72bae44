//! Teacher-forced sequence loss and greedy decoding.

use crate::data::{ExamplePair, BOS, EOS};
use crate::error::Result;
use crate::model::variants::{bind_features, sequence_loss_vars, step_vars};
use crate::model::{ModelConfig, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Mean per-token negative log likelihood of `reference` under teacher
/// forcing. `train_mode` enables dropout, seeded by `dropout_seed`.
pub fn sequence_loss(
    pair: &ExamplePair,
    reference: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = if train_mode {
        Tape::train_mode(dropout_seed)
    } else {
        Tape::new()
    };
    let pv = params.bind(&mut tape);
    let feats = bind_features(&mut tape, &pv, cfg, &pair.src, &pair.trg)?;
    let loss = sequence_loss_vars(&mut tape, &pv, cfg, &feats, reference)?;
    Ok(tape.value(loss).item())
}

/// Greedy (argmax) decoding from BOS until EOS or `max_decode_len` tokens.
/// The returned sequence excludes BOS and EOS. Ties break toward the
/// lowest token id.
pub fn greedy_decode(
    pair: &ExamplePair,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let feats = bind_features(&mut tape, &pv, cfg, &pair.src, &pair.trg)?;
    let mut h = tape.leaf(Tensor::zeros(vec![cfg.hidden_dim]));
    let mut c = tape.leaf(Tensor::zeros(vec![cfg.hidden_dim]));

    let mut out = Vec::new();
    let mut token = BOS;
    while out.len() < cfg.max_decode_len {
        let step = step_vars(&mut tape, &pv, cfg, &feats, token, h, c)?;
        h = step.h;
        c = step.c;
        token = tape.value(step.log_probs).argmax();
        if token == EOS {
            break;
        }
        out.push(token);
    }
    Ok(out)
}
