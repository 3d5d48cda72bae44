//! Deterministic synthetic paired-scene generator.
//!
//! Each example is a small grid of cells holding colored shapes, an edit
//! applied to it, and templated captions describing the edit. Cells are
//! embedded through a fixed seeded codebook of orthogonal symbol rows
//! with per-position scalar bindings, so the edit is recoverable from
//! the feature grids by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{Dataset, ExamplePair, FeatureGrid, Split};
use crate::error::{Error, Result};

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "black"];
/// Feature scale applied to every cell of a brightened target image.
pub const BRIGHTEN_FACTOR: f64 = 1.5;
/// Per-coordinate RMS of cell embeddings. Kept at one so randomly
/// initialized pair scores stay small and attention starts near uniform,
/// where the grid-sum difference signal below is cleanest.
pub const FEATURE_GAIN: f64 = 1.0;
/// Spacing of the per-position scalars that bind a symbol to its cell.
pub const POSITION_STEP: f64 = 0.3;

/// Symbols: 0 = empty cell, 1.. = shape x color.
pub const NUM_SYMBOLS: usize = 1 + SHAPES.len() * COLORS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
}

impl Object {
    fn symbol(self) -> usize {
        1 + self.shape * COLORS.len() + self.color
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Add { cell: usize, obj: Object },
    Remove { cell: usize },
    Recolor { cell: usize, new_color: usize },
    Move { from: usize, to: usize },
    Swap { a: usize, b: usize },
    Brighten,
}

/// A sampled scene plus the edit that produces its target scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub n: usize,
    pub cells: Vec<Option<Object>>,
    pub edit: Edit,
}

impl SceneSpec {
    /// Target cells after the edit; `Brighten` leaves symbols unchanged
    /// (the brightness lives in the feature scale).
    pub fn apply(&self) -> Vec<Option<Object>> {
        let mut out = self.cells.clone();
        match self.edit {
            Edit::Add { cell, obj } => out[cell] = Some(obj),
            Edit::Remove { cell } => out[cell] = None,
            Edit::Recolor { cell, new_color } => {
                let obj = out[cell].expect("recolor target");
                out[cell] = Some(Object {
                    shape: obj.shape,
                    color: new_color,
                });
            }
            Edit::Move { from, to } => {
                out[to] = out[from];
                out[from] = None;
            }
            Edit::Swap { a, b } => out.swap(a, b),
            Edit::Brighten => {}
        }
        out
    }

    fn brightened(&self) -> bool {
        matches!(self.edit, Edit::Brighten)
    }

    /// All paraphrase templates for this edit; the first one is the
    /// training caption.
    pub fn captions(&self) -> Vec<String> {
        let name = |o: Object| format!("{} {}", COLORS[o.color], SHAPES[o.shape]);
        match self.edit {
            Edit::Add { obj, .. } => {
                let n = name(obj);
                vec![
                    format!("add a {n}"),
                    format!("place a {n} on the image"),
                    format!("a new {n} appears"),
                ]
            }
            Edit::Remove { cell } => {
                let n = name(self.cells[cell].expect("remove target"));
                vec![
                    format!("remove the {n}"),
                    format!("delete the {n}"),
                    format!("the {n} is gone"),
                ]
            }
            Edit::Recolor { cell, new_color } => {
                let n = name(self.cells[cell].expect("recolor target"));
                let c2 = COLORS[new_color];
                vec![
                    format!("change the {n} to {c2}"),
                    format!("recolor the {n} to {c2}"),
                    format!("make the {n} {c2}"),
                ]
            }
            // A move is a transposition of an occupied and an empty cell,
            // a swap of two occupied ones; which cell gained and which
            // lost is not recoverable from any permutation-invariant view
            // of the grids, so both edits share one caption family that
            // does not name the operands.
            Edit::Move { .. } | Edit::Swap { .. } => vec![
                "two cells trade contents".to_string(),
                "the contents of two cells swap".to_string(),
                "a pair of cells exchange contents".to_string(),
            ],
            Edit::Brighten => vec![
                "brighten the image".to_string(),
                "make the image brighter".to_string(),
                "increase the brightness".to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub grid_side: usize,
    pub feature_dim: usize,
    /// train/val/test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 2400,
            grid_side: 4,
            feature_dim: 32,
            split_ratios: [5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0],
        }
    }
}

/// The fixed seeded cell embedding. A cell holding symbol `s` at position
/// `p` embeds as the concatenation of
///
/// * a random orthogonal row for `s` (all-zero for the empty symbol),
/// * the same row scaled by a per-position scalar `w_p` (distinct,
///   centered on zero), and
/// * a constant brightness channel shared by every cell.
///
/// Unchanged cells are identical in both grids, so they cancel exactly in
/// the difference of the two grids' attention sums, and what remains is a
/// linear fingerprint of the edit: add/remove leave ±s in the first
/// block, recolor leaves s₂ − s₁, move leaves (w_b − w_a)·s in the
/// second block, swap leaves (w_a − w_b)(s₂ − s₁) there, and brighten
/// rescales everything including the constant channel. Every edit type
/// and operand is therefore decodable from the sum difference alone —
/// attention never has to localize the edited cell. Nearest-neighbor
/// inversion of any cell is exact. Depends only on (seed, d, positions).
pub struct Codebook {
    /// Per-symbol rows for the first block; row 0 (empty) is all-zero.
    pub symbols: Vec<Vec<f64>>,
    /// Per-position scalars multiplying the symbol row in block two.
    pub position_weights: Vec<f64>,
    /// Value of the always-on brightness channel.
    pub brightness: f64,
    /// Total embedding width (blocks are zero-padded up to it).
    pub feature_dim: usize,
}

impl Codebook {
    /// The embedding of `cell` holding `symbol`, before any brightening.
    pub fn cell_vector(&self, symbol: usize, cell: usize) -> Vec<f64> {
        let row = &self.symbols[symbol];
        let w = self.position_weights[cell];
        let mut v = Vec::with_capacity(self.feature_dim);
        v.extend_from_slice(row);
        v.extend(row.iter().map(|x| x * w));
        v.push(self.brightness);
        v.resize(self.feature_dim, 0.0);
        v
    }
}

pub fn feature_codebook(seed: u64, d: usize, positions: usize) -> Result<Codebook> {
    let content = NUM_SYMBOLS - 1;
    if d < 2 * content + 1 {
        return Err(Error::Invalid(format!(
            "feature_dim {d} < {} (two symbol blocks of {content} plus the \
             brightness channel); codebook cannot be injective",
            2 * content + 1
        )));
    }
    let sym_width = (d - 1) / 2;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1); // separate from scene sampling
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(content);
    while rows.len() < content {
        let mut v: Vec<f64> = (0..sym_width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in &rows {
            let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (vi, ri) in v.iter_mut().zip(r) {
                *vi -= proj * ri;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    let scale = FEATURE_GAIN * (sym_width as f64).sqrt();
    for row in &mut rows {
        for v in row {
            *v *= scale;
        }
    }
    let mut symbols = vec![vec![0.0; sym_width]];
    symbols.append(&mut rows);
    let mid = (positions - 1) as f64 / 2.0;
    let position_weights = (0..positions)
        .map(|p| (p as f64 - mid) * POSITION_STEP)
        .collect();
    Ok(Codebook {
        symbols,
        position_weights,
        brightness: FEATURE_GAIN,
        feature_dim: d,
    })
}

fn grid_from_cells(
    cells: &[Option<Object>],
    n: usize,
    d: usize,
    codebook: &Codebook,
    scale: f64,
) -> FeatureGrid {
    let mut features = Vec::with_capacity(n * n * d);
    for (i, cell) in cells.iter().enumerate() {
        let symbol = cell.map(Object::symbol).unwrap_or(0);
        features.extend(codebook.cell_vector(symbol, i).iter().map(|v| v * scale));
    }
    FeatureGrid::new(n, d, features).expect("codebook grid")
}

fn sample_scene(rng: &mut ChaCha20Rng, n: usize) -> SceneSpec {
    let n2 = n * n;
    assert!(n2 >= 3, "grid too small for every edit type");
    let max_objects = (n2 - 1).min(4);
    let k = rng.gen_range(2..=max_objects);

    let mut cells: Vec<Option<Object>> = vec![None; n2];
    let mut order: Vec<usize> = (0..n2).collect();
    order.shuffle(rng);
    let object_cells: Vec<usize> = order[..k].to_vec();
    for &cell in &object_cells {
        cells[cell] = Some(Object {
            shape: rng.gen_range(0..SHAPES.len()),
            color: rng.gen_range(0..COLORS.len()),
        });
    }
    // guarantee two distinct objects so swap is always applicable
    let first = cells[object_cells[0]].unwrap();
    if object_cells.iter().all(|&c| cells[c] == Some(first)) {
        let target = object_cells[1];
        let mut obj = cells[target].unwrap();
        while obj == first {
            obj.color = rng.gen_range(0..COLORS.len());
            obj.shape = rng.gen_range(0..SHAPES.len());
        }
        cells[target] = Some(obj);
    }

    let empty_cells: Vec<usize> = (0..n2).filter(|i| cells[*i].is_none()).collect();
    let edit = match rng.gen_range(0..6) {
        0 => Edit::Add {
            cell: *empty_cells.choose(rng).unwrap(),
            obj: Object {
                shape: rng.gen_range(0..SHAPES.len()),
                color: rng.gen_range(0..COLORS.len()),
            },
        },
        1 => Edit::Remove {
            cell: *object_cells.choose(rng).unwrap(),
        },
        2 => {
            let cell = *object_cells.choose(rng).unwrap();
            let old = cells[cell].unwrap().color;
            let mut new_color = rng.gen_range(0..COLORS.len());
            while new_color == old {
                new_color = rng.gen_range(0..COLORS.len());
            }
            Edit::Recolor { cell, new_color }
        }
        3 => Edit::Move {
            from: *object_cells.choose(rng).unwrap(),
            to: *empty_cells.choose(rng).unwrap(),
        },
        4 => {
            // two object cells with distinct contents always exist
            loop {
                let a = *object_cells.choose(rng).unwrap();
                let b = *object_cells.choose(rng).unwrap();
                if cells[a] != cells[b] {
                    break Edit::Swap { a, b };
                }
            }
        }
        _ => Edit::Brighten,
    };
    SceneSpec { n, cells, edit }
}

/// Generates a deterministic dataset of paired scenes. Training examples
/// carry one caption; validation and test examples carry all three
/// paraphrases.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    let ratio_sum: f64 = cfg.split_ratios.iter().sum();
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios sum to {ratio_sum}, expected 1"
        )));
    }
    if cfg.grid_side < 2 {
        return Err(Error::Invalid("grid_side must be at least 2".into()));
    }
    let codebook = feature_codebook(cfg.seed, cfg.feature_dim, cfg.grid_side * cfg.grid_side)?;

    let n_train = (cfg.count as f64 * cfg.split_ratios[0]).round() as usize;
    let n_val = (cfg.count as f64 * cfg.split_ratios[1]).round() as usize;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.count);
    for idx in 0..cfg.count {
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let scene = sample_scene(&mut rng, cfg.grid_side);
        let target = scene.apply();
        let scale = if scene.brightened() { BRIGHTEN_FACTOR } else { 1.0 };
        let src = grid_from_cells(&scene.cells, cfg.grid_side, cfg.feature_dim, &codebook, 1.0);
        let trg = grid_from_cells(&target, cfg.grid_side, cfg.feature_dim, &codebook, scale);
        let all_captions = scene.captions();
        let captions = match split {
            Split::Train => vec![all_captions[0].clone()],
            _ => all_captions,
        };
        examples.push(ExamplePair {
            id: format!("pair-{idx:06}"),
            src,
            trg,
            captions,
            split,
        });
    }
    Ok(Dataset { examples })
}
