//! The four relational speaker variants: shared configuration, parameter
//! initialization, and decoder state.

mod cell;
mod seq;
mod variants;

pub use cell::{attend, lstm_cell};
pub use seq::{greedy_decode, sequence_loss};
pub use variants::{
    basic_step, dynamic_step, dynamic_step_oracle, multihead_step, static_relational_precompute,
    static_step,
};
pub(crate) use variants::{bind_features, sequence_loss_vars, step_vars};

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Basic,
    Multihead,
    Static,
    Dynamic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Basic,
        Variant::Multihead,
        Variant::Static,
        Variant::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Multihead => "multihead",
            Variant::Static => "static",
            Variant::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "multihead" => Ok(Variant::Multihead),
            "static" => Ok(Variant::Static),
            "dynamic" => Ok(Variant::Dynamic),
            other => Err(Error::Invalid(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Grid side N; each image contributes N^2 feature vectors.
    pub grid_side: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub max_decode_len: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, grid_side: usize, feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            grid_side,
            feature_dim,
            hidden_dim: 512,
            embed_dim: 256,
            vocab_size,
            dropout_rate: 0.5,
            max_decode_len: 25,
        }
    }

    pub fn positions(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0
            || self.feature_dim == 0
            || self.hidden_dim == 0
            || self.embed_dim == 0
            || self.max_decode_len == 0
        {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Invalid(format!(
                "vocab_size {} < 5 (four specials + at least one word)",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout_rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// All learnable tensors of one variant, in a fixed iteration order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: Vec<(String, Rc<Tensor>)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor,
    /// where fan_in is the column count (vector length for 1-D tensors).
    ///
    /// The dynamic merge gets a structured start: w_5t is the mirror
    /// -w_5s and both are scaled by N², so the image term of the merge
    /// reads the (source - target) context difference at full strength
    /// from the first step — attended contexts attenuate a single-cell
    /// edit by 1/N², and with independently drawn projections the shared
    /// scene content drowns that difference until the two matrices learn
    /// to mirror each other. w_5h starts at zero for the same reason: the
    /// hidden-state term otherwise saturates the tanh merge long before
    /// the image term becomes informative, and a saturated merge passes
    /// almost no gradient back to the image pathway.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut entries: Vec<(String, Rc<Tensor>)> = Vec::new();
        for (name, shape) in param_shapes(cfg) {
            let fan_in = *shape.last().unwrap() as f64;
            let bound = 1.0 / fan_in.sqrt();
            let numel: usize = shape.iter().product();
            let mut data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
            match name {
                "w_5s" => {
                    let gain = cfg.positions() as f64;
                    for v in &mut data {
                        *v *= gain;
                    }
                }
                "w_5t" => {
                    let w5s = &entries
                        .iter()
                        .find(|(n, _)| n == "w_5s")
                        .expect("w_5s precedes w_5t")
                        .1;
                    data = w5s.data().iter().map(|v| -v).collect();
                }
                "w_5h" => {
                    data = vec![0.0; numel];
                }
                _ => {}
            }
            entries.push((name.to_string(), Rc::new(Tensor::from_vec(shape, data)?)));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<(String, Rc<Tensor>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        ModelParams { entries, index }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &*self.entries[i].1)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| (**t).clone()).collect()
    }

    pub fn entries(&self) -> &[(String, Rc<Tensor>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces every tensor, keeping names and order.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Invalid("tensor shape changed in set_tensors".into()));
            }
            *slot = Rc::new(t);
        }
        Ok(())
    }

    /// Binds every parameter onto `tape` as a requires-grad leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf_shared(Rc::clone(t), true)))
            .collect();
        ParamVars { vars }
    }
}

/// Per-variant parameter tensor names and shapes. Every tensor named by
/// the variant's equations exists here and nothing else does.
fn param_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, h, e, v) = (
        cfg.feature_dim,
        cfg.hidden_dim,
        cfg.embed_dim,
        cfg.vocab_size,
    );
    let k = h; // relational key dimension
    let mut shapes: Vec<(&'static str, Vec<usize>)> = vec![
        ("embedding", vec![v, e]),
        ("lstm_wi", vec![h, e + h]),
        ("lstm_wf", vec![h, e + h]),
        ("lstm_wg", vec![h, e + h]),
        ("lstm_wo", vec![h, e + h]),
        ("lstm_bi", vec![h]),
        ("lstm_bf", vec![h]),
        ("lstm_bg", vec![h]),
        ("lstm_bo", vec![h]),
    ];
    match cfg.variant {
        Variant::Basic => {
            shapes.push(("w_img", vec![h, d]));
            shapes.push(("w_1", vec![h, d + h]));
            shapes.push(("b_1", vec![h]));
        }
        Variant::Multihead => shapes.extend(multihead_shapes(d, h)),
        Variant::Static => {
            shapes.push(("w_s", vec![k, d]));
            shapes.push(("w_t", vec![k, d]));
            shapes.push(("w_4", vec![d, 2 * d]));
            shapes.push(("b_4", vec![d]));
            shapes.push(("w_s_rev", vec![k, d]));
            shapes.push(("w_t_rev", vec![k, d]));
            shapes.push(("w_4_rev", vec![d, 2 * d]));
            shapes.push(("b_4_rev", vec![d]));
            shapes.extend(multihead_shapes(d, h));
        }
        Variant::Dynamic => {
            shapes.push(("w_sk", vec![k, d]));
            shapes.push(("w_tk", vec![k, d]));
            shapes.push(("w_hk", vec![k, h]));
            shapes.push(("w_5s", vec![h, d]));
            shapes.push(("w_5t", vec![h, d]));
            shapes.push(("w_5h", vec![h, h]));
            shapes.push(("b_5", vec![h]));
        }
    }
    shapes.push(("w_w", vec![v, h]));
    shapes.push(("b_w", vec![v]));
    shapes
}

fn multihead_shapes(d: usize, h: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("w_src", vec![h, d]),
        ("w_2", vec![h, d + h]),
        ("b_2", vec![h]),
        ("w_trg", vec![h, d]),
        ("w_3", vec![h, d + h]),
        ("b_3", vec![h]),
    ]
}

/// Tape handles for every bound parameter.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub(crate) fn from_pairs(vars: Vec<(String, Var)>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound for this variant"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// LSTM hidden and cell vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

impl DecoderState {
    pub fn zeros(hidden_dim: usize) -> Self {
        DecoderState {
            h: Tensor::zeros(vec![hidden_dim]),
            c: Tensor::zeros(vec![hidden_dim]),
        }
    }
}

/// One decoding step's outputs.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Log-probabilities over the vocabulary; exponentiates to a distribution.
    pub log_probs: Tensor,
    pub state: DecoderState,
    /// Every attention distribution produced this step, by name.
    pub attention: Vec<(String, Tensor)>,
}
