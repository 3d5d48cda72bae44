//! Datasets: feature grids, example pairs, vocabulary, file IO, and the
//! synthetic paired-scene generator.

mod io;
mod synth;
mod vocab;

pub use io::{read_dataset, write_dataset};
pub use synth::{feature_codebook, synth_generate, Codebook, SceneSpec, SynthConfig, BRIGHTEN_FACTOR};
pub use vocab::{build_vocab, tokenize, Vocabulary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One image's flattened feature map: N^2 position-major rows of D values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub n: usize,
    pub d: usize,
    pub features: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(n: usize, d: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != n * n * d {
            return Err(Error::Invalid(format!(
                "feature grid n={n} d={d} needs {} values, got {}",
                n * n * d,
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(FeatureGrid { n, d, features })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.n * self.n, self.d], self.features.clone()).unwrap()
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.d..(idx + 1) * self.d]
    }
}

/// Source grid + target grid + one or more reference captions.
#[derive(Debug, Clone)]
pub struct ExamplePair {
    pub id: String,
    pub src: FeatureGrid,
    pub trg: FeatureGrid,
    pub captions: Vec<String>,
    pub split: Split,
}

impl ExamplePair {
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() {
            return Err(Error::Invalid(format!("example {} has no captions", self.id)));
        }
        if self.src.n != self.trg.n || self.src.d != self.trg.d {
            return Err(Error::Invalid(format!(
                "example {}: src and trg grids disagree",
                self.id
            )));
        }
        Ok(())
    }
}

/// A loaded dataset with uniform grid geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<ExamplePair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ExamplePair> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn grid_side(&self) -> Option<usize> {
        self.examples.first().map(|e| e.src.n)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.src.d)
    }
}
