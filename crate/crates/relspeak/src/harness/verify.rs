//! Self-contained correctness suite: finite-difference gradient checks,
//! brute-force oracle comparison, and attention invariants. Run from the
//! CLI with `verify`; the acceptance tests call into it too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::FeatureGrid;
use crate::error::Result;
use crate::gradcheck::{grad_check_multi, DEFAULT_EPS, DEFAULT_TOL};
use crate::model::{
    basic_step, bind_features, dynamic_step, dynamic_step_oracle, multihead_step,
    sequence_loss_vars, static_relational_precompute, static_step, DecoderState, ModelConfig,
    ModelParams, StepOutput, Variant,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(CheckOutcome {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn small_config(variant: Variant, grid_side: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, grid_side, 8, 20);
    cfg.hidden_dim = 16;
    cfg.embed_dim = 8;
    cfg
}

fn random_grid(rng: &mut ChaCha20Rng, n: usize, d: usize) -> FeatureGrid {
    let features = (0..n * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureGrid::new(n, d, features).unwrap()
}

fn random_state(rng: &mut ChaCha20Rng, h: usize) -> DecoderState {
    DecoderState {
        h: Tensor::vector((0..h).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        c: Tensor::vector((0..h).map(|_| rng.gen_range(-0.5..0.5)).collect()),
    }
}

/// One full step of any variant through its public entry points.
fn full_step(
    variant: Variant,
    token: usize,
    state: &DecoderState,
    src: &FeatureGrid,
    trg: &FeatureGrid,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    match variant {
        Variant::Basic => basic_step(token, state, src, trg, params, cfg),
        Variant::Multihead => multihead_step(token, state, src, trg, params, cfg),
        Variant::Dynamic => dynamic_step(token, state, src, trg, params, cfg),
        Variant::Static => {
            let (fs, ft) = static_relational_precompute(src, trg, params)?;
            static_step(token, state, &fs, &ft, params, cfg)
        }
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn permute_rows(grid: &FeatureGrid, perm: &[usize]) -> FeatureGrid {
    let mut features = Vec::with_capacity(grid.features.len());
    for &p in perm {
        features.extend_from_slice(grid.cell(p));
    }
    FeatureGrid::new(grid.n, grid.d, features).unwrap()
}

fn random_perm(rng: &mut ChaCha20Rng, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(rng);
    p
}

/// Finite-difference check of the teacher-forced sequence loss of every
/// variant with respect to all of its parameters.
pub fn check_gradients(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for variant in Variant::ALL {
        let cfg = small_config(variant, 2);
        let params = ModelParams::init(&cfg, rng.gen())?;
        let src = random_grid(&mut rng, cfg.grid_side, cfg.feature_dim);
        let trg = random_grid(&mut rng, cfg.grid_side, cfg.feature_dim);
        let reference = vec![5, 9, 4];
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let points = params.tensors();
        let cfg2 = cfg.clone();
        let gc = grad_check_multi(
            move |tape, vars| {
                let pairs = names
                    .iter()
                    .cloned()
                    .zip(vars.iter().copied())
                    .collect::<Vec<_>>();
                let pv = crate::model::ParamVars::from_pairs(pairs);
                let feats = bind_features(tape, &pv, &cfg2, &src, &trg)?;
                sequence_loss_vars(tape, &pv, &cfg2, &feats, &reference)
            },
            &points,
            DEFAULT_EPS,
            DEFAULT_TOL,
        )?;
        report.push(
            format!("gradcheck/{}", variant.name()),
            gc.pass,
            format!(
                "max rel err {:.3e} (analytic {:.6e} vs numeric {:.6e})",
                gc.max_rel_err, gc.analytic_at_worst, gc.numeric_at_worst
            ),
        );
    }
    Ok(())
}

/// `dynamic_step` against the explicit N^4 oracle on random instances.
pub fn check_oracle(report: &mut VerifyReport, seed: u64, instances: usize) -> Result<()> {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for n in 1..=4usize {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let cfg = small_config(Variant::Dynamic, n);
            let params = ModelParams::init(&cfg, rng.gen())?;
            let src = random_grid(&mut rng, n, cfg.feature_dim);
            let trg = random_grid(&mut rng, n, cfg.feature_dim);
            let state = random_state(&mut rng, cfg.hidden_dim);
            let token = rng.gen_range(0..cfg.vocab_size);
            let fast = dynamic_step(token, &state, &src, &trg, &params, &cfg)?;
            let slow = dynamic_step_oracle(token, &state, &src, &trg, &params, &cfg)?;
            worst = worst
                .max(max_abs_diff(&fast.log_probs, &slow.log_probs))
                .max(max_abs_diff(&fast.state.h, &slow.state.h))
                .max(max_abs_diff(&fast.state.c, &slow.state.c));
            for ((na, ta), (nb, tb)) in fast.attention.iter().zip(&slow.attention) {
                assert_eq!(na, nb);
                worst = worst.max(max_abs_diff(ta, tb));
            }
        }
        report.push(
            format!("oracle/dynamic-n{n}"),
            worst <= TOL,
            format!("max abs diff {worst:.3e} over {instances} instances"),
        );
    }
    Ok(())
}

fn attention_normalized(step: &StepOutput, tol: f64) -> (bool, f64) {
    let mut worst = 0.0f64;
    for (name, alpha) in &step.attention {
        if name == "alpha_pairs" || alpha.shape().len() == 1 {
            let s: f64 = alpha.data().iter().sum();
            worst = worst.max((s - 1.0).abs());
        } else {
            let cols = alpha.shape()[1];
            for row in alpha.data().chunks(cols) {
                let s: f64 = row.iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    (worst <= tol, worst)
}

/// Attention distributions sum to one; the prediction is invariant to
/// position permutations of either image; the basic variant cannot tell
/// the images apart while multihead and dynamic can.
pub fn check_invariants(report: &mut VerifyReport, seed: u64) -> Result<()> {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for variant in Variant::ALL {
        let cfg = small_config(variant, 2);
        let params = ModelParams::init(&cfg, rng.gen())?;
        let src = random_grid(&mut rng, cfg.grid_side, cfg.feature_dim);
        let trg = random_grid(&mut rng, cfg.grid_side, cfg.feature_dim);
        let state = random_state(&mut rng, cfg.hidden_dim);
        let token = rng.gen_range(0..cfg.vocab_size);

        let step = full_step(variant, token, &state, &src, &trg, &params, &cfg)?;
        let (ok, worst) = attention_normalized(&step, TOL);
        report.push(
            format!("normalization/{}", variant.name()),
            ok && !step.attention.is_empty(),
            format!("max |sum - 1| = {worst:.3e}"),
        );

        let perm_src = random_perm(&mut rng, cfg.positions());
        let perm_trg = random_perm(&mut rng, cfg.positions());
        let permuted = full_step(
            variant,
            token,
            &state,
            &permute_rows(&src, &perm_src),
            &permute_rows(&trg, &perm_trg),
            &params,
            &cfg,
        )?;
        let diff = max_abs_diff(&step.log_probs, &permuted.log_probs);
        report.push(
            format!("permutation/{}", variant.name()),
            diff <= TOL,
            format!("max log-prob diff {diff:.3e}"),
        );

        let swapped = full_step(variant, token, &state, &trg, &src, &params, &cfg)?;
        let swap_diff = max_abs_diff(&step.log_probs, &swapped.log_probs);
        match variant {
            Variant::Basic => report.push(
                "swap-invariance/basic",
                swap_diff <= TOL,
                format!("max log-prob diff {swap_diff:.3e}"),
            ),
            Variant::Multihead | Variant::Dynamic => report.push(
                format!("swap-sensitivity/{}", variant.name()),
                swap_diff > 1e-6,
                format!("max log-prob diff {swap_diff:.3e}"),
            ),
            Variant::Static => {}
        }
    }
    Ok(())
}

/// The whole suite. `oracle_instances` random instances per grid size.
pub fn run_verify(seed: u64, oracle_instances: usize) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    check_gradients(&mut report, seed)?;
    check_oracle(&mut report, seed.wrapping_add(1), oracle_instances)?;
    check_invariants(&mut report, seed.wrapping_add(2))?;
    Ok(report)
}
