//! Training, evaluation, and checkpointing around the four captioning
//! variants.

pub mod verify;

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExamplePair, Split, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::{
    bind_features, greedy_decode, sequence_loss_vars, step_vars, ModelConfig, ModelParams,
};
use crate::optim::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MainMetric {
    Cider,
    Bleu4,
    #[serde(rename = "rougel")]
    RougeL,
}

impl MainMetric {
    pub fn of(self, report: &MetricReport) -> f64 {
        match self {
            MainMetric::Cider => report.cider,
            MainMetric::Bleu4 => report.bleu4,
            MainMetric::RougeL => report.rouge_l,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MainMetric::Cider => "cider",
            MainMetric::Bleu4 => "bleu4",
            MainMetric::RougeL => "rougel",
        }
    }
}

impl std::str::FromStr for MainMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cider" => Ok(MainMetric::Cider),
            "bleu4" => Ok(MainMetric::Bleu4),
            "rougel" | "rouge-l" => Ok(MainMetric::RougeL),
            other => Err(Error::Invalid(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub main_metric: MainMetric,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            main_metric: MainMetric::Cider,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Invalid(
                "patience, batch_size, and eval_every must be at least 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Invalid(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub token_accuracy: f64,
    pub main: f64,
    pub best_main: f64,
    pub best_epoch: usize,
}

/// Fully self-describing training state: reloading one of these resumes
/// training or serves evaluation with no other inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Non-special vocabulary words; line i of the vocab file = id i+4.
    pub vocab_words: Vec<String>,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub rng_seed: u64,
    /// ChaCha word position, stringified (u128 is not JSON-safe).
    pub rng_word_pos: String,
    pub epoch: usize,
    pub best_main: f64,
    pub best_epoch: usize,
    pub evals_since_improvement: usize,
}

impl Checkpoint {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams::from_entries(
            self.params
                .iter()
                .map(|(n, t)| (n.clone(), Rc::new(t.clone())))
                .collect(),
        )
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_word_list(self.vocab_words.clone())
    }

    fn rng(&self) -> Result<ChaCha20Rng> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.rng_seed);
        let pos: u128 = self
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Invalid(format!("bad rng position '{}'", self.rng_word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    #[serde(flatten)]
    pub report: MetricReport,
    pub token_accuracy: f64,
    pub predictions: Vec<Prediction>,
}

fn reference_ids(vocab: &Vocabulary, ex: &ExamplePair) -> Result<Vec<usize>> {
    let ids = vocab.encode_text(&ex.captions[0]);
    if ids.is_empty() {
        return Err(Error::Invalid(format!("example {} has an empty caption", ex.id)));
    }
    Ok(ids)
}

/// Teacher-forced per-token argmax accuracy against the first caption,
/// EOS included, dropout off.
fn token_accuracy_counts(
    pair: &ExamplePair,
    reference: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(usize, usize)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let feats = bind_features(&mut tape, &pv, cfg, &pair.src, &pair.trg)?;
    let mut h = tape.leaf(Tensor::zeros(vec![cfg.hidden_dim]));
    let mut c = tape.leaf(Tensor::zeros(vec![cfg.hidden_dim]));
    let inputs = std::iter::once(BOS).chain(reference.iter().copied());
    let targets = reference.iter().copied().chain(std::iter::once(EOS));
    let mut correct = 0;
    let mut total = 0;
    for (input, target) in inputs.zip(targets) {
        let step = step_vars(&mut tape, &pv, cfg, &feats, input, h, c)?;
        h = step.h;
        c = step.c;
        if tape.value(step.log_probs).argmax() == target {
            correct += 1;
        }
        total += 1;
    }
    Ok((correct, total))
}

/// Greedy-decodes every example of `split` (sorted by id) and scores the
/// decoded captions against all references.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalOutcome> {
    let mut examples: Vec<&ExamplePair> = dataset.split(split).collect();
    examples.sort_by(|a, b| a.id.cmp(&b.id));
    if examples.is_empty() {
        return Err(Error::Invalid(format!("no {} examples", split.name())));
    }
    let mut candidates = Vec::with_capacity(examples.len());
    let mut reference_sets = Vec::with_capacity(examples.len());
    let mut predictions = Vec::with_capacity(examples.len());
    let mut correct = 0;
    let mut total = 0;
    for ex in &examples {
        ex.validate()?;
        let ids = greedy_decode(ex, params, cfg)?;
        let caption = vocab.decode_to_text(&ids);
        candidates.push(caption.clone());
        reference_sets.push(ex.captions.clone());
        predictions.push(Prediction {
            id: ex.id.clone(),
            caption,
        });
        let reference = reference_ids(vocab, ex)?;
        let (c, t) = token_accuracy_counts(ex, &reference, params, cfg)?;
        correct += c;
        total += t;
    }
    Ok(EvalOutcome {
        report: metrics::report(&candidates, &reference_sets)?,
        token_accuracy: correct as f64 / total as f64,
        predictions,
    })
}

/// Loss and gradients (aligned with the parameter order) for one example.
fn example_grads(
    pair: &ExamplePair,
    reference: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::train_mode(dropout_seed);
    let pv = params.bind(&mut tape);
    let feats = bind_features(&mut tape, &pv, cfg, &pair.src, &pair.trg)?;
    let loss_var = sequence_loss_vars(&mut tape, &pv, cfg, &feats, reference)?;
    let loss = tape.value(loss_var).item();
    let grads = tape.backward(loss_var)?;
    let out = pv
        .iter()
        .map(|(_, var)| {
            grads
                .wrt(var)
                .cloned()
                .expect("bound parameter missing from gradients")
        })
        .collect();
    Ok((loss, out))
}

/// Mean eval-mode loss over `examples`; this is what "initial loss is
/// ln(vocab)" is measured on.
pub fn mean_eval_loss(
    examples: &[&ExamplePair],
    vocab: &Vocabulary,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    for ex in examples {
        let reference = reference_ids(vocab, ex)?;
        sum += crate::model::sequence_loss(ex, &reference, params, cfg, false, 0)?;
    }
    Ok(sum / examples.len() as f64)
}

pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_main: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub const LAST_CKPT: &str = "last.json";
pub const BEST_CKPT: &str = "best.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Trains on the train split with early stopping on the validation main
/// metric. If `out_dir` already holds a `last.json`, training resumes
/// from it. `stop_early` sees every epoch's log line and may end
/// training (the acceptance experiments stop at target quality).
pub fn train<F: FnMut(&EpochLog) -> bool>(
    dataset: &Dataset,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    mut stop_early: F,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_examples: Vec<&ExamplePair> = dataset.split(Split::Train).collect();
    if train_examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let references: Vec<Vec<usize>> = train_examples
        .iter()
        .map(|ex| reference_ids(vocab, ex))
        .collect::<Result<_>>()?;

    let last_path = out_dir.join(LAST_CKPT);
    let log_path = out_dir.join(TRAIN_LOG);

    let (mut params, mut adam, mut rng, start_epoch, mut best_main, mut best_epoch, mut stale);
    if last_path.exists() {
        let ckpt = Checkpoint::load(&last_path)?;
        let same_model = serde_json::to_string(&ckpt.model)? == serde_json::to_string(model_cfg)?;
        let same_train = serde_json::to_string(&ckpt.train)? == serde_json::to_string(train_cfg)?;
        if !same_model || !same_train {
            return Err(Error::Invalid(format!(
                "checkpoint in {} was trained with a different configuration",
                out_dir.display()
            )));
        }
        params = ckpt.model_params();
        rng = ckpt.rng()?;
        adam = ckpt.adam.clone();
        start_epoch = ckpt.epoch;
        best_main = ckpt.best_main;
        best_epoch = ckpt.best_epoch;
        stale = ckpt.evals_since_improvement;
    } else {
        params = ModelParams::init(model_cfg, train_cfg.seed)?;
        adam = AdamState::new(&params.tensors());
        rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);
        start_epoch = 0;
        best_main = f64::NEG_INFINITY;
        best_epoch = 0;
        stale = 0;
        // fresh run: record the untrained loss on the first examples
        let probe: Vec<&ExamplePair> = train_examples
            .iter()
            .take(train_cfg.batch_size)
            .copied()
            .collect();
        let initial = mean_eval_loss(&probe, vocab, &params, model_cfg)?;
        let line = serde_json::to_string(&serde_json::json!({ "initial_loss": initial }))?;
        std::fs::write(&log_path, format!("{line}\n"))?;
    }

    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut master = params.tensors();
    let mut outcome_log = Vec::new();
    let mut epochs_run = start_epoch;

    for epoch in start_epoch + 1..=train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut batch_grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let dropout_seed = rng.gen();
                let (loss, grads) = example_grads(
                    train_examples[i],
                    &references[i],
                    &params,
                    model_cfg,
                    dropout_seed,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite loss {loss} on example {} in epoch {epoch}",
                        train_examples[i].id
                    )));
                }
                loss_sum += loss;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
            adam_step(
                &mut master,
                &grads,
                &mut adam,
                train_cfg.lr,
                DEFAULT_BETA1,
                DEFAULT_BETA2,
                DEFAULT_EPS,
            )?;
            params.set_tensors(master.clone())?;
        }
        epochs_run = epoch;
        let train_loss = loss_sum / train_examples.len() as f64;

        if epoch % train_cfg.eval_every != 0 && epoch != train_cfg.max_epochs {
            continue;
        }
        let eval = evaluate(&params, model_cfg, vocab, dataset, Split::Val)?;
        let main = train_cfg.main_metric.of(&eval.report);
        let improved = main > best_main;
        if improved {
            best_main = main;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            bleu4: eval.report.bleu4,
            rouge_l: eval.report.rouge_l,
            cider: eval.report.cider,
            token_accuracy: eval.token_accuracy,
            main,
            best_main,
            best_epoch,
        };
        writeln!(log_file, "{}", serde_json::to_string(&entry)?)?;
        let ckpt = Checkpoint {
            model: model_cfg.clone(),
            train: train_cfg.clone(),
            vocab_words: vocab.words().to_vec(),
            params: params
                .entries()
                .iter()
                .map(|(n, t)| (n.clone(), (**t).clone()))
                .collect(),
            adam: adam.clone(),
            rng_seed: train_cfg.seed,
            rng_word_pos: rng.get_word_pos().to_string(),
            epoch,
            best_main,
            best_epoch,
            evals_since_improvement: stale,
        };
        ckpt.save(&last_path)?;
        if improved {
            ckpt.save(out_dir.join(BEST_CKPT))?;
        }
        let stop = stop_early(&entry);
        outcome_log.push(entry);
        if stop || stale >= train_cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs_run,
        best_main,
        best_epoch,
        log: outcome_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, tokenize, SynthConfig};
    use crate::model::Variant;

    fn tiny_setup(count: usize) -> (Dataset, Vocabulary, ModelConfig) {
        let ds = synth_generate(&SynthConfig {
            seed: 11,
            count,
            grid_side: 2,
            feature_dim: 32,
            split_ratios: [0.5, 0.25, 0.25],
        })
        .unwrap();
        let corpus: Vec<Vec<String>> = ds
            .examples
            .iter()
            .flat_map(|e| e.captions.iter().map(|c| tokenize(c)))
            .collect();
        let vocab = build_vocab_for(&corpus);
        let mut cfg = ModelConfig::new(Variant::Basic, 2, 32, vocab.len());
        cfg.hidden_dim = 24;
        cfg.embed_dim = 12;
        (ds, vocab, cfg)
    }

    fn build_vocab_for(corpus: &[Vec<String>]) -> Vocabulary {
        crate::data::build_vocab(corpus, 1).unwrap()
    }

    fn quick_train_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 2,
            patience: 10,
            main_metric: MainMetric::Cider,
            seed: 3,
            eval_every: 1,
        }
    }

    #[test]
    fn training_writes_logs_and_checkpoints() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&ds, &vocab, &cfg, &quick_train_cfg(), dir.path(), |_| false).unwrap();
        assert_eq!(out.epochs_run, 2);
        assert!(dir.path().join(LAST_CKPT).exists());
        assert!(dir.path().join(BEST_CKPT).exists());
        let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 3); // initial loss + 2 epochs
        assert!(lines[0].contains("initial_loss"));
    }

    #[test]
    fn same_seed_trains_byte_identically() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&ds, &vocab, &cfg, &quick_train_cfg(), da.path(), |_| false).unwrap();
        train(&ds, &vocab, &cfg, &quick_train_cfg(), db.path(), |_| false).unwrap();
        for name in [TRAIN_LOG, LAST_CKPT, BEST_CKPT] {
            let a = std::fs::read(da.path().join(name)).unwrap();
            let b = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let mut tc = quick_train_cfg();
        tc.max_epochs = 4;

        let full_dir = tempfile::tempdir().unwrap();
        train(&ds, &vocab, &cfg, &tc, full_dir.path(), |_| false).unwrap();

        // same run, interrupted after epoch 2 and resumed
        let part_dir = tempfile::tempdir().unwrap();
        let mut tc_half = tc.clone();
        tc_half.max_epochs = 2;
        train(&ds, &vocab, &cfg, &tc_half, part_dir.path(), |_| false).unwrap();
        // rewrite the stored train config so the resumed run matches
        let mut ckpt = Checkpoint::load(part_dir.path().join(LAST_CKPT)).unwrap();
        ckpt.train = tc.clone();
        ckpt.save(part_dir.path().join(LAST_CKPT)).unwrap();
        train(&ds, &vocab, &cfg, &tc, part_dir.path(), |_| false).unwrap();

        let a = Checkpoint::load(full_dir.path().join(LAST_CKPT)).unwrap();
        let b = Checkpoint::load(part_dir.path().join(LAST_CKPT)).unwrap();
        assert_eq!(a.epoch, b.epoch);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(&b.params) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "parameter {na} diverged after resume");
        }
    }

    #[test]
    fn mismatched_resume_config_is_rejected() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let dir = tempfile::tempdir().unwrap();
        train(&ds, &vocab, &cfg, &quick_train_cfg(), dir.path(), |_| false).unwrap();
        let mut other = cfg.clone();
        other.hidden_dim += 1;
        assert!(train(&ds, &vocab, &other, &quick_train_cfg(), dir.path(), |_| false).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let dir = tempfile::tempdir().unwrap();
        train(&ds, &vocab, &cfg, &quick_train_cfg(), dir.path(), |_| false).unwrap();
        let path = dir.path().join(LAST_CKPT);
        let a = Checkpoint::load(&path).unwrap();
        let resaved = dir.path().join("resaved.json");
        a.save(&resaved).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&resaved).unwrap()
        );
        // and the reloaded parameters evaluate identically
        let params = a.model_params();
        let e1 = evaluate(&params, &a.model, &a.vocabulary(), &ds, Split::Val).unwrap();
        let e2 = evaluate(&params, &a.model, &a.vocabulary(), &ds, Split::Val).unwrap();
        assert_eq!(
            serde_json::to_string(&e1).unwrap(),
            serde_json::to_string(&e2).unwrap()
        );
    }

    #[test]
    fn evaluation_reports_are_within_bounds() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let out = evaluate(&params, &cfg, &vocab, &ds, Split::Test).unwrap();
        for v in [
            out.report.bleu1,
            out.report.bleu4,
            out.report.rouge_l,
            out.token_accuracy,
        ] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((0.0..=10.0).contains(&out.report.cider));
        assert_eq!(out.predictions.len(), ds.split(Split::Test).count());
    }

    #[test]
    fn early_stop_callback_halts_training() {
        let (ds, vocab, cfg) = tiny_setup(32);
        let dir = tempfile::tempdir().unwrap();
        let mut tc = quick_train_cfg();
        tc.max_epochs = 10;
        let out = train(&ds, &vocab, &cfg, &tc, dir.path(), |log| log.epoch >= 1).unwrap();
        assert_eq!(out.epochs_run, 1);
    }
}
