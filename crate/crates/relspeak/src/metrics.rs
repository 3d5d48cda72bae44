//! Corpus-level caption metrics: BLEU-1..4, ROUGE-L, and plain CIDEr.
//!
//! Inputs are raw strings; both candidates and references go through the
//! same tokenizer as the data module.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
/// ROUGE-L recall weight, the usual captioning-evaluation setting.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub n_examples: usize,
}

fn check_inputs(candidates: &[String], reference_sets: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to score".into()));
    }
    if candidates.len() != reference_sets.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            reference_sets.len()
        )));
    }
    if let Some(i) = reference_sets.iter().position(|r| r.is_empty()) {
        return Err(Error::Invalid(format!("example {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-1..max_n: clipped n-gram counts summed over examples,
/// geometric mean of precisions, brevity penalty from per-example
/// closest-length references.
pub fn bleu(
    candidates: &[String],
    reference_sets: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>> {
    check_inputs(candidates, reference_sets)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(reference_sets) {
        let cand_toks = tokenize(cand);
        let ref_toks: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        cand_len += cand_toks.len();
        // closest reference length, ties broken toward the shorter
        ref_len += ref_toks
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - cand_toks.len() as i64).abs();
                (diff, l)
            })
            .unwrap();
        for n in 1..=max_n {
            let cand_grams = ngram_counts(&cand_toks, n);
            let mut clip: HashMap<&[String], usize> = HashMap::new();
            for r in &ref_toks {
                for (gram, count) in ngram_counts(r, n) {
                    let e = clip.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &cand_grams {
                total[n - 1] += count;
                matched[n - 1] += (*count).min(clip.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();
    Ok((1..=max_n)
        .map(|k| {
            if precisions[..k].iter().any(|&p| p == 0.0) {
                0.0
            } else {
                let log_mean: f64 =
                    precisions[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
                bp * log_mean.exp()
            }
        })
        .collect())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over examples of the best (max over references) LCS F-measure
/// with recall weight ROUGE_BETA.
pub fn rouge_l(candidates: &[String], reference_sets: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, reference_sets)?;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(reference_sets) {
        let cand_toks = tokenize(cand);
        let mut best = 0.0f64;
        for r in refs {
            let ref_toks = tokenize(r);
            let lcs = lcs_len(&cand_toks, &ref_toks) as f64;
            if lcs == 0.0 || cand_toks.is_empty() || ref_toks.is_empty() {
                continue;
            }
            let p = lcs / cand_toks.len() as f64;
            let rec = lcs / ref_toks.len() as f64;
            let f = (1.0 + beta2) * rec * p / (rec + beta2 * p);
            best = best.max(f);
        }
        sum += best;
    }
    Ok(sum / candidates.len() as f64)
}

type GramVec = HashMap<Vec<String>, f64>;

fn tfidf_vec(tokens: &[String], n: usize, idf: &HashMap<Vec<String>, f64>) -> GramVec {
    let mut vec: GramVec = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *vec.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    for (gram, v) in vec.iter_mut() {
        *v *= idf.get(gram).copied().unwrap_or(0.0);
    }
    vec
}

fn cosine(a: &GramVec, b: &GramVec) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, va)| b.get(g).map(|vb| va * vb))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: per-n tf-idf cosine to each reference, averaged over
/// references and n, ×10, then averaged over examples.
///
/// The per-n average only covers orders for which the example's
/// references contain at least one n-gram; otherwise short references
/// would force the n=3,4 similarities of a perfect candidate to an
/// arbitrary value. Document frequency is counted over reference sets.
pub fn cider(candidates: &[String], reference_sets: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, reference_sets)?;
    let m = reference_sets.len();
    if m < 2 {
        return Err(Error::DegenerateCorpus(
            "CIDEr needs at least 2 examples for idf".into(),
        ));
    }
    let ref_tokens: Vec<Vec<Vec<String>>> = reference_sets
        .iter()
        .map(|refs| refs.iter().map(|r| tokenize(r)).collect())
        .collect();

    // df per n-gram order: number of reference sets containing the gram
    let mut idf: Vec<HashMap<Vec<String>, f64>> = vec![HashMap::new(); MAX_N];
    for refs in &ref_tokens {
        for n in 1..=MAX_N {
            let mut seen: Vec<&[String]> = Vec::new();
            for r in refs {
                if r.len() >= n {
                    for w in r.windows(n) {
                        if !seen.contains(&w) {
                            seen.push(w);
                        }
                    }
                }
            }
            for gram in seen {
                *idf[n - 1].entry(gram.to_vec()).or_insert(0.0) += 1.0;
            }
        }
    }
    let mut any_signal = false;
    for table in idf.iter_mut() {
        for df in table.values_mut() {
            *df = (m as f64 / *df).ln();
            if *df > 0.0 {
                any_signal = true;
            }
        }
    }
    if !any_signal {
        return Err(Error::DegenerateCorpus(
            "every n-gram appears in every reference set; all idf weights are zero".into(),
        ));
    }

    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(&ref_tokens) {
        let cand_toks = tokenize(cand);
        let mut per_n = Vec::new();
        for n in 1..=MAX_N {
            if refs.iter().all(|r| r.len() < n) {
                continue;
            }
            let cand_vec = tfidf_vec(&cand_toks, n, &idf[n - 1]);
            let sim: f64 = refs
                .iter()
                .map(|r| cosine(&cand_vec, &tfidf_vec(r, n, &idf[n - 1])))
                .sum::<f64>()
                / refs.len() as f64;
            per_n.push(sim);
        }
        if !per_n.is_empty() {
            sum += 10.0 * per_n.iter().sum::<f64>() / per_n.len() as f64;
        }
    }
    Ok(sum / m as f64)
}

/// All metrics in one report.
pub fn report(candidates: &[String], reference_sets: &[Vec<String>]) -> Result<MetricReport> {
    let b = bleu(candidates, reference_sets, MAX_N)?;
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(candidates, reference_sets)?,
        cider: cider(candidates, reference_sets)?,
        n_examples: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    fn refs(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| s(x)).collect()
    }

    #[test]
    fn identical_corpus_is_perfect() {
        let cands = vec![s("a red circle appears"), s("the blue square is gone")];
        let rs = vec![refs(&["a red circle appears"]), refs(&["the blue square is gone"])];
        let b = bleu(&cands, &rs, 4).unwrap();
        for v in &b {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!((rouge_l(&cands, &rs).unwrap() - 1.0).abs() < 1e-12);
        assert!((cider(&cands, &rs).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_unigram_counts() {
        // "the the the the" vs "the cat": only one "the" is creditable
        let cands = vec![s("the the the the")];
        let rs = vec![refs(&["the cat"])];
        let b = bleu(&cands, &rs, 2).unwrap();
        assert!((b[0] - 0.25).abs() < 1e-12, "bleu1 = {}", b[0]);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn brevity_penalty_short_candidate() {
        // length 3 vs 6, all n-grams matching: BP = e^{1-2}
        let cands = vec![s("a b c")];
        let rs = vec![refs(&["a b c a b c"])];
        let b = bleu(&cands, &rs, 1).unwrap();
        assert!((b[0] - (-1.0f64).exp()).abs() < 1e-12, "bleu1 = {}", b[0]);
    }

    #[test]
    fn bp_ties_pick_shorter_reference() {
        // candidate length 3, references of length 2 and 4: r = 2, c >= r, BP = 1
        let cands = vec![s("a b c")];
        let rs = vec![refs(&["a b", "a b c d"])];
        let b = bleu(&cands, &rs, 1).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_example() {
        // LCS("a b c", "a c b") = 2, P = R = 2/3 so F = 2/3 at any beta
        let cands = vec![s("a b c")];
        let rs = vec![refs(&["a c b"])];
        let got = rouge_l(&cands, &rs).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn rouge_asymmetric_beta() {
        // LCS = 2, P = 2/2 = 1, R = 2/4: beta favors recall
        let cands = vec![s("a b")];
        let rs = vec![refs(&["a b c d"])];
        let beta2 = ROUGE_BETA * ROUGE_BETA;
        let (p, r) = (1.0, 0.5);
        let want = (1.0 + beta2) * r * p / (r + beta2 * p);
        let got = rouge_l(&cands, &rs).unwrap();
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let cands = vec![s("x y z"), s("p q")];
        let rs = vec![refs(&["a b c"]), refs(&["d e f"])];
        let b = bleu(&cands, &rs, 4).unwrap();
        assert_eq!(b, vec![0.0; 4]);
        assert_eq!(rouge_l(&cands, &rs).unwrap(), 0.0);
        assert_eq!(cider(&cands, &rs).unwrap(), 0.0);
    }

    #[test]
    fn cider_two_short_sentences() {
        // disjoint two-word references, candidates identical to them:
        // cosine 1 at n = 1, 2 (no higher-order reference grams), x10
        let cands = vec![s("red circle"), s("blue square")];
        let rs = vec![refs(&["red circle"]), refs(&["blue square"])];
        let got = cider(&cands, &rs).unwrap();
        assert!((got - 10.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn cider_degenerate_corpora_error() {
        let one = vec![s("a b")];
        let one_r = vec![refs(&["a b"])];
        assert!(matches!(
            cider(&one, &one_r),
            Err(Error::DegenerateCorpus(_))
        ));
        // identical references everywhere: every idf is ln(1) = 0
        let cands = vec![s("a b"), s("a b")];
        let rs = vec![refs(&["a b"]), refs(&["a b"])];
        assert!(matches!(cider(&cands, &rs), Err(Error::DegenerateCorpus(_))));
    }

    #[test]
    fn empty_inputs_error() {
        assert!(bleu(&[], &[], 4).is_err());
        let cands = vec![s("a")];
        assert!(rouge_l(&cands, &[Vec::new()]).is_err());
        assert!(bleu(&cands, &[refs(&["a"]), refs(&["b"])], 4).is_err());
    }

    #[test]
    fn report_shape_and_json_keys() {
        let cands = vec![s("red circle"), s("blue square")];
        let rs = vec![refs(&["red circle"]), refs(&["blue square"])];
        let rep = report(&cands, &rs).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        for key in ["bleu1", "bleu4", "rougeL", "cider", "n_examples"] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["red", "blue", "circle", "square", "moves", "the", "a"])
            .prop_map(|w| w.to_string())
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(word(), 1..8).prop_map(|ws| ws.join(" "))
    }

    fn corpus() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>)> {
        prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 2..8)
            .prop_map(|rows| rows.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn example_order_is_irrelevant((cands, rs) in corpus()) {
            let rev_c: Vec<String> = cands.iter().rev().cloned().collect();
            let rev_r: Vec<Vec<String>> = rs.iter().rev().cloned().collect();
            let a = bleu(&cands, &rs, 4).unwrap();
            let b = bleu(&rev_c, &rev_r, 4).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((rouge_l(&cands, &rs).unwrap() - rouge_l(&rev_c, &rev_r).unwrap()).abs() < 1e-12);
            if let (Ok(x), Ok(y)) = (cider(&cands, &rs), cider(&rev_c, &rev_r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn exact_match_example_never_hurts((mut cands, mut rs) in corpus(), extra in sentence()) {
            let before_b = bleu(&cands, &rs, 4).unwrap();
            let before_r = rouge_l(&cands, &rs).unwrap();
            cands.push(extra.clone());
            rs.push(vec![extra]);
            let after_b = bleu(&cands, &rs, 4).unwrap();
            let after_r = rouge_l(&cands, &rs).unwrap();
            for (x, y) in before_b.iter().zip(&after_b) {
                prop_assert!(y >= &(x - 1e-12));
            }
            prop_assert!(after_r >= before_r - 1e-12);
        }

        #[test]
        fn more_references_never_hurt_rouge((cands, mut rs) in corpus(), extra in sentence()) {
            let before = rouge_l(&cands, &rs).unwrap();
            rs[0].push(extra);
            let after = rouge_l(&cands, &rs).unwrap();
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn bounds_hold((cands, rs) in corpus()) {
            for v in bleu(&cands, &rs, 4).unwrap() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            let r = rouge_l(&cands, &rs).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
            if let Ok(c) = cider(&cands, &rs) {
                prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
                prop_assert!(c.is_finite());
            }
        }
    }
}
