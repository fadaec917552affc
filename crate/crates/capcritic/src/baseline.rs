//! Rule-based caption metrics: BLEU-1..4, ROUGE-L, CIDEr.
//!
//! All three work on the valid token ids of a caption. CIDEr here follows
//! the unscaled convention (cosine similarities averaged over n, no x10
//! factor and no length penalty), so scores of rule-based and learned
//! metrics live on comparable [0,1]-ish scales. n-gram maps are ordered so
//! floating-point sums never depend on hash-map iteration order.

use std::collections::BTreeMap;

use crate::corpus::Caption;
use crate::error::{Error, Result};

const BLEU_EPS: f64 = 1e-9;
const ROUGE_BETA: f64 = 1.2;

type NgramMap = BTreeMap<Vec<usize>, u64>;

fn ngram_counts(tokens: &[usize], n: usize) -> NgramMap {
    let mut map = NgramMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

fn validate_pair(candidate: &Caption, references: &[Caption]) -> Result<()> {
    if candidate.valid_len == 0 {
        return Err(Error::data("cannot score an empty candidate caption"));
    }
    if references.is_empty() {
        return Err(Error::data("scoring needs at least one reference caption"));
    }
    Ok(())
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for
/// n = 1..=n_max, times the brevity penalty `exp(1 - r/c)` when the
/// candidate is shorter than the closest reference. Orders with no matches
/// (or no n-grams at all) contribute a floor precision of 1e-9.
pub fn bleu(candidate: &Caption, references: &[Caption], n_max: usize) -> Result<f64> {
    validate_pair(candidate, references)?;
    if !(1..=4).contains(&n_max) {
        return Err(Error::config(format!(
            "bleu order must be 1..=4, got {n_max}"
        )));
    }
    let cand = candidate.valid_ids();
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let counts = ngram_counts(cand, n);
        let total: u64 = counts.values().sum();
        let mut clipped = 0u64;
        if total > 0 {
            // Clip each n-gram count to the most any single reference has.
            let ref_counts: Vec<NgramMap> = references
                .iter()
                .map(|r| ngram_counts(r.valid_ids(), n))
                .collect();
            for (gram, &c) in &counts {
                let cap = ref_counts
                    .iter()
                    .map(|m| m.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += c.min(cap);
            }
        }
        let p = if total == 0 || clipped == 0 {
            BLEU_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / n_max as f64).exp();
    let c = cand.len() as f64;
    let r = closest_ref_len(cand.len(), references) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * precision)
}

/// Reference length closest to the candidate's; ties prefer the shorter.
fn closest_ref_len(c: usize, references: &[Caption]) -> usize {
    let mut best = references[0].valid_len;
    for r in &references[1..] {
        let l = r.valid_len;
        let d = l.abs_diff(c);
        let bd = best.abs_diff(c);
        if d < bd || (d == bd && l < best) {
            best = l;
        }
    }
    best
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS-based F-measure with beta = 1.2, maximised over the
/// references.
pub fn rouge_l(candidate: &Caption, references: &[Caption]) -> Result<f64> {
    validate_pair(candidate, references)?;
    let cand = candidate.valid_ids();
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut best = 0.0f64;
    for r in references {
        let rids = r.valid_ids();
        let lcs = lcs_len(cand, rids) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / cand.len() as f64;
        let rec = lcs / rids.len() as f64;
        let f = (1.0 + b2) * p * rec / (rec + b2 * p);
        best = best.max(f);
    }
    Ok(best)
}

/// Document frequencies over an evaluation corpus: how many images have a
/// given n-gram somewhere in their reference set, for n = 1..=4.
#[derive(Debug, Clone)]
pub struct CiderCorpusStats {
    df: [NgramMap; 4],
    corpus_size: usize,
}

impl CiderCorpusStats {
    /// `images` holds one reference list per image.
    pub fn build(images: &[&[Caption]]) -> Result<CiderCorpusStats> {
        if images.is_empty() {
            return Err(Error::data("idf statistics need a non-empty corpus"));
        }
        let mut df: [NgramMap; 4] = Default::default();
        for refs in images {
            for n in 1..=4usize {
                let mut seen = NgramMap::new();
                for r in *refs {
                    for w in r.valid_ids().windows(n) {
                        seen.entry(w.to_vec()).or_insert(0);
                    }
                }
                for gram in seen.into_keys() {
                    *df[n - 1].entry(gram).or_insert(0) += 1;
                }
            }
        }
        Ok(CiderCorpusStats {
            df,
            corpus_size: images.len(),
        })
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    /// ln(N / max(df, 1)); n-grams the corpus never saw fall back to df=1.
    fn idf(&self, n: usize, gram: &[usize]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        ((self.corpus_size as f64) / df as f64).ln()
    }

    fn tfidf_vector(&self, tokens: &[usize], n: usize) -> BTreeMap<Vec<usize>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, c)| {
                let w = c as f64 * self.idf(n, &gram);
                (gram, w)
            })
            .collect()
    }
}

fn cosine_sparse(a: &BTreeMap<Vec<usize>, f64>, b: &BTreeMap<Vec<usize>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// CIDEr: per n, cosine similarity between tf-idf n-gram vectors of the
/// candidate and each reference, averaged over references; the final score
/// is the mean over n = 1..=4.
pub fn cider(candidate: &Caption, references: &[Caption], stats: &CiderCorpusStats) -> Result<f64> {
    validate_pair(candidate, references)?;
    if stats.corpus_size == 0 {
        return Err(Error::data("idf statistics are empty"));
    }
    let cand = candidate.valid_ids();
    let mut total = 0.0;
    for n in 1..=4usize {
        let cv = stats.tfidf_vector(cand, n);
        let mut per_ref = 0.0;
        for r in references {
            let rv = stats.tfidf_vector(r.valid_ids(), n);
            per_ref += cosine_sparse(&cv, &rv);
        }
        total += per_ref / references.len() as f64;
    }
    Ok(total / 4.0)
}

/// Rescales scores so the ground-truth human captions average exactly 1.
pub fn normalize_scores(scores: &[f64], human_scores: &[f64]) -> Result<Vec<f64>> {
    if human_scores.is_empty() {
        return Err(Error::data("normalization needs human scores"));
    }
    let mean = human_scores.iter().sum::<f64>() / human_scores.len() as f64;
    if mean <= 0.0 {
        return Err(Error::data(format!(
            "cannot normalize by a human mean of {mean}"
        )));
    }
    Ok(scores.iter().map(|s| s / mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_caption, Vocabulary};
    use approx::assert_relative_eq;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = "the cat dog sat mat a b c d x y p q r s w1 w2 w3 w4"
            .split_whitespace()
            .map(str::to_owned)
            .collect();
        Vocabulary::build(&words, 64, 1).unwrap()
    }

    fn cap(v: &Vocabulary, text: &str) -> Caption {
        let toks: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        encode_caption(&toks, v, 12).unwrap()
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let v = vocab();
        let c = cap(&v, "the cat sat the mat");
        let r = vec![c.clone()];
        for n in 1..=4 {
            assert_relative_eq!(bleu(&c, &r, n).unwrap(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn bleu_clips_repeated_unigrams() {
        let v = vocab();
        let c = cap(&v, "the the the the");
        let r = vec![cap(&v, "the cat")];
        // "the" appears 4 times but the reference caps it at 1; c > r so no
        // brevity penalty.
        assert_relative_eq!(bleu(&c, &r, 1).unwrap(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn bleu_penalizes_short_candidates() {
        let v = vocab();
        let c = cap(&v, "the cat");
        let r = vec![cap(&v, "the cat sat the mat")];
        let got = bleu(&c, &r, 1).unwrap();
        let expect = (1.0f64 - 5.0 / 2.0).exp();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn bleu_uses_the_closest_reference_length() {
        let v = vocab();
        let c = cap(&v, "the cat sat");
        let refs = vec![cap(&v, "the cat sat mat"), cap(&v, "the cat")];
        // Lengths 4 and 2 are both one away from 3; the tie prefers 2, so
        // no brevity penalty applies.
        let got = bleu(&c, &refs, 1).unwrap();
        assert_relative_eq!(got, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn bleu_floors_unmatched_orders() {
        let v = vocab();
        let c = cap(&v, "a b");
        let r = vec![cap(&v, "x y")];
        // No overlap anywhere: every order contributes the 1e-9 floor and
        // the lengths agree, so the score is exactly the floor.
        assert_relative_eq!(bleu(&c, &r, 4).unwrap(), 1e-9, max_relative = 1e-9);
        // Candidate shorter than any order-4 window: p4 floors too.
        let c3 = cap(&v, "a b c");
        let r3 = vec![cap(&v, "a b c")];
        let got = bleu(&c3, &r3, 4).unwrap();
        let expect = (1f64.ln() * 3.0 / 4.0 + (1e-9f64).ln() / 4.0).exp();
        assert_relative_eq!(got, expect, max_relative = 1e-9);
    }

    #[test]
    fn bleu_validates_inputs() {
        let v = vocab();
        let c = cap(&v, "a b");
        assert!(bleu(&c, &[], 4).is_err());
        assert!(bleu(&c, std::slice::from_ref(&c), 0).is_err());
        assert!(bleu(&c, std::slice::from_ref(&c), 5).is_err());
    }

    #[test]
    fn rouge_identical_is_one() {
        let v = vocab();
        let c = cap(&v, "the cat sat the mat");
        assert_relative_eq!(
            rouge_l(&c, std::slice::from_ref(&c)).unwrap(),
            1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn rouge_skip_example_matches_hand_computation() {
        let v = vocab();
        let c = cap(&v, "a c");
        let r = vec![cap(&v, "a b c")];
        // LCS=2, P=1, R=2/3, F = 2.44 * (2/3) / (2/3 + 1.44) = 61/79.
        assert_relative_eq!(rouge_l(&c, &r).unwrap(), 61.0 / 79.0, max_relative = 1e-12);
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        let v = vocab();
        let c = cap(&v, "a b c");
        let r = vec![cap(&v, "x y")];
        assert_eq!(rouge_l(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn rouge_takes_the_best_reference() {
        let v = vocab();
        let c = cap(&v, "the cat sat");
        let refs = vec![cap(&v, "x y"), cap(&v, "the cat sat")];
        assert_relative_eq!(rouge_l(&c, &refs).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn lcs_handles_reorderings() {
        assert_eq!(lcs_len(&[1, 2, 3, 4], &[2, 1, 3, 4]), 3);
        assert_eq!(lcs_len(&[1, 2], &[1, 2]), 2);
        assert_eq!(lcs_len(&[1], &[2]), 0);
        assert_eq!(lcs_len(&[], &[1, 2]), 0);
    }

    #[test]
    fn cider_identical_unique_caption_scores_one() {
        let v = vocab();
        let r1 = vec![cap(&v, "p q r s")];
        let r2 = vec![cap(&v, "a b x y")];
        let stats = CiderCorpusStats::build(&[&r1, &r2]).unwrap();
        let c = cap(&v, "p q r s");
        assert_relative_eq!(cider(&c, &r1, &stats).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn cider_disjoint_scores_zero() {
        let v = vocab();
        let r1 = vec![cap(&v, "p q r s")];
        let r2 = vec![cap(&v, "a b x y")];
        let stats = CiderCorpusStats::build(&[&r1, &r2]).unwrap();
        let c = cap(&v, "w1 w2 w3 w4");
        assert_eq!(cider(&c, &r1, &stats).unwrap(), 0.0);
    }

    #[test]
    fn cider_two_image_example_matches_direct_tfidf() {
        // Corpus: image 1 refs ["a b c d"], image 2 refs ["a b x y"]; N=2.
        // Shared grams ("a", "b", bigram "a b") get idf ln(2/2)=0, all
        // others ln 2. Candidate "a b c y" vs image 1's reference:
        //   n=1: dot over {c}; both norms sqrt(2)*ln2     -> 1/2
        //   n=2: dot over {(b,c)}; norms sqrt(2)*ln2      -> 1/2
        //   n=3: dot over {(a,b,c)}; norms sqrt(2)*ln2    -> 1/2
        //   n=4: no common 4-gram                         -> 0
        // mean = 0.375.
        let v = vocab();
        let r1 = vec![cap(&v, "a b c d")];
        let r2 = vec![cap(&v, "a b x y")];
        let stats = CiderCorpusStats::build(&[&r1, &r2]).unwrap();
        let c = cap(&v, "a b c y");
        assert_relative_eq!(cider(&c, &r1, &stats).unwrap(), 0.375, max_relative = 1e-12);
    }

    #[test]
    fn cider_needs_a_corpus() {
        assert!(CiderCorpusStats::build(&[]).is_err());
    }

    #[test]
    fn normalization_divides_by_the_human_mean() {
        let human = [0.4, 0.6];
        let got = normalize_scores(&[0.25, 1.0], &human).unwrap();
        assert_relative_eq!(got[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(got[1], 2.0, max_relative = 1e-12);
        let self_norm = normalize_scores(&human, &human).unwrap();
        let mean: f64 = self_norm.iter().sum::<f64>() / self_norm.len() as f64;
        assert_relative_eq!(mean, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn normalization_rejects_nonpositive_means() {
        assert!(normalize_scores(&[1.0], &[0.0, 0.0]).is_err());
        assert!(normalize_scores(&[1.0], &[0.5, -0.7]).is_err());
        assert!(normalize_scores(&[1.0], &[]).is_err());
    }
}
