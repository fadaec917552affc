//! Evaluation statistics: per-pair critic performance, robustness curves
//! over transform strength, word-frequency diagnostics, and rank/linear
//! correlation with p-values.
//!
//! `kendall_tau` is the O(n log n) production path;
//! [`kendall_tau_brute`] is the O(n^2) reference kept so the two can check
//! each other — do not fold them together.

pub mod special;

use serde::Serialize;

use crate::augment::{rc_draw, transform_rw, transform_wp, NeighborIndex, TransformKind};
use crate::baseline::normalize_scores;
use crate::corpus::{Caption, Dataset, ImageRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::stablehash::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use special::{erfc, reg_inc_beta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Human,
    Generated,
}

/// One scored image-caption pair.
#[derive(Debug, Clone, Serialize)]
pub struct ScoredPair {
    pub image_id: String,
    pub caption: String,
    pub score: f64,
    pub label: PairLabel,
}

/// Per-pair performance: the probability mass the critic put on the pair's
/// true label.
pub fn pair_performance(pair: &ScoredPair) -> f64 {
    match pair.label {
        PairLabel::Human => pair.score,
        PairLabel::Generated => 1.0 - pair.score,
    }
}

/// Mean per-pair performance over a scored set.
pub fn dataset_performance(pairs: &[ScoredPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("performance needs at least one scored pair"));
    }
    Ok(pairs.iter().map(pair_performance).sum::<f64>() / pairs.len() as f64)
}

/// Anything that can score a candidate caption for an image given reference
/// captions: the learned critic or a rule-based baseline.
pub trait CandidateMetric {
    fn name(&self) -> String;
    fn score(
        &self,
        image: &ImageRecord,
        references: &[Caption],
        candidate: &Caption,
    ) -> Result<f64>;
}

pub struct BleuMetric(pub usize);

impl CandidateMetric for BleuMetric {
    fn name(&self) -> String {
        format!("bleu{}", self.0)
    }

    fn score(&self, _: &ImageRecord, refs: &[Caption], cand: &Caption) -> Result<f64> {
        crate::baseline::bleu(cand, refs, self.0)
    }
}

pub struct RougeMetric;

impl CandidateMetric for RougeMetric {
    fn name(&self) -> String {
        "rougeL".to_owned()
    }

    fn score(&self, _: &ImageRecord, refs: &[Caption], cand: &Caption) -> Result<f64> {
        crate::baseline::rouge_l(cand, refs)
    }
}

pub struct CiderMetric(pub crate::baseline::CiderCorpusStats);

impl CandidateMetric for CiderMetric {
    fn name(&self) -> String {
        "cider".to_owned()
    }

    fn score(&self, _: &ImageRecord, refs: &[Caption], cand: &Caption) -> Result<f64> {
        crate::baseline::cider(cand, refs, &self.0)
    }
}

pub struct CriticMetric(pub crate::critic::CriticModel);

impl CandidateMetric for CriticMetric {
    fn name(&self) -> String {
        "critic".to_owned()
    }

    fn score(&self, image: &ImageRecord, refs: &[Caption], cand: &Caption) -> Result<f64> {
        self.0.score_with_all_references(&image.feature, refs, cand)
    }
}

/// Mean normalized metric score per transform strength, plus its area
/// under the curve. Lower AUC = the metric rejects transformed captions
/// more decisively = more robust.
#[derive(Debug, Clone)]
pub struct RobustnessCurve {
    pub metric: String,
    pub transform: TransformKind,
    /// (gamma, mean normalized score), in grid order.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

// Negated comparison so a NaN grid point fails validation too.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn validate_gamma_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::config("gamma grid needs at least 2 points"));
    }
    if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
        return Err(Error::config("gamma grid must span [0, 1] inclusive"));
    }
    for w in grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::config(format!(
                "gamma grid must increase strictly, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// The evaluation units of a robustness run: every image with at least two
/// references, its first reference as the base candidate, the rest as the
/// scoring references (leave-one-out, so rule-based metrics cannot match a
/// caption against itself).
struct EvalUnit<'a> {
    image_idx: usize,
    image: &'a ImageRecord,
    base: &'a Caption,
    refs: Vec<Caption>,
}

fn eval_units(dataset: &Dataset) -> Result<Vec<EvalUnit<'_>>> {
    let units: Vec<EvalUnit> = dataset
        .images
        .iter()
        .enumerate()
        .filter(|(_, e)| e.references.len() >= 2)
        .map(|(i, e)| EvalUnit {
            image_idx: i,
            image: &e.image,
            base: &e.references[0],
            refs: e.references[1..].to_vec(),
        })
        .collect();
    if units.is_empty() {
        return Err(Error::data(
            "robustness evaluation needs images with at least 2 references",
        ));
    }
    Ok(units)
}

/// Sweeps one transform over the gamma grid and scores the transformed
/// captions with `metric`, normalized so untransformed human captions
/// average 1. Paired design: every gamma reuses the same base pairs and
/// per-image seeds, so curve differences are attributable to gamma alone.
/// The transform is applied at gamma = 0 too; its minimum-strength floor
/// (at least two words touched, at least one neighbor) keeps that point
/// below 1 for a discriminating metric.
pub fn robustness_curve(
    metric: &dyn CandidateMetric,
    dataset: &Dataset,
    kind: TransformKind,
    grid: &[f64],
    seed: u64,
) -> Result<RobustnessCurve> {
    validate_gamma_grid(grid)?;
    let units = eval_units(dataset)?;
    let neighbors = match kind {
        TransformKind::Rc => Some(NeighborIndex::build(dataset)?),
        _ => None,
    };
    let mut human_scores = Vec::with_capacity(units.len());
    for u in &units {
        human_scores.push(metric.score(u.image, &u.refs, u.base)?);
    }
    let vocab: &Vocabulary = &dataset.vocab;
    let mut points = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let mut raw = Vec::with_capacity(units.len());
        for (k, u) in units.iter().enumerate() {
            let cand = match kind {
                TransformKind::Rc => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rc", k as u64));
                    rc_draw(
                        dataset,
                        neighbors.as_ref().unwrap(),
                        u.image_idx,
                        gamma,
                        &mut rng,
                    )?
                }
                TransformKind::Wp => {
                    transform_wp(u.base, gamma, vocab, derive_seed(seed, "wp", k as u64))?
                }
                TransformKind::Rw => {
                    transform_rw(u.base, gamma, vocab, derive_seed(seed, "rw", k as u64))?
                }
            };
            raw.push(metric.score(u.image, &u.refs, &cand)?);
        }
        let normalized = normalize_scores(&raw, &human_scores)?;
        let mean = normalized.iter().sum::<f64>() / normalized.len() as f64;
        points.push((gamma, mean));
    }
    let auc = trapezoid_auc(&points);
    Ok(RobustnessCurve {
        metric: metric.name(),
        transform: kind,
        points,
        auc,
    })
}

/// CSV rows `metric,transform,gamma,mean_score`, one per curve point, then
/// one `auc` summary row per curve.
pub fn write_robustness_csv<W: std::io::Write>(curves: &[RobustnessCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| Error::data(format!("writing robustness csv: {e}"));
    w.write_record(["metric", "transform", "gamma", "mean_score"])
        .map_err(io_err)?;
    for c in curves {
        for (gamma, mean) in &c.points {
            w.write_record([
                c.metric.as_str(),
                &c.transform.to_string(),
                &gamma.to_string(),
                &mean.to_string(),
            ])
            .map_err(io_err)?;
        }
        w.write_record([
            c.metric.as_str(),
            &c.transform.to_string(),
            "auc",
            &c.auc.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| Error::data(format!("flushing robustness csv: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    pub method: String,
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

fn check_pairs_finite(pairs: &[(f64, f64)]) -> Result<()> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::data("correlation inputs must be finite"));
    }
    Ok(())
}

/// Counts strict inversions in `v` (pairs i < j with v[i] > v[j]) by
/// bottom-up merge sort.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    let mut buf = vec![0.0; n];
    let mut count = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo + width < n {
            let mid = lo + width;
            let hi = (mid + width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if v[j] < v[i] {
                    count += (mid - i) as u64;
                    buf[k] = v[j];
                    j += 1;
                } else {
                    buf[k] = v[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&v[i..mid]);
            let k = k + (mid - i);
            buf[k..k + (hi - j)].copy_from_slice(&v[j..hi]);
            v[lo..hi].copy_from_slice(&buf[lo..hi]);
            lo = hi;
        }
        width *= 2;
    }
    count
}

/// Tie bookkeeping for one axis: for each run of equal values of length t,
/// the pair count t(t-1)/2 and the moments the p-value formula needs.
#[derive(Debug, Default, Clone, Copy)]
struct TieStats {
    pairs: u64,
    vt: f64,
    sum1: f64,
    sum2: f64,
}

fn tie_stats<I: Iterator<Item = u64>>(group_sizes: I) -> TieStats {
    let mut s = TieStats::default();
    for t in group_sizes {
        let tf = t as f64;
        s.pairs += t * (t - 1) / 2;
        s.vt += tf * (tf - 1.0) * (2.0 * tf + 5.0);
        s.sum1 += tf * (tf - 1.0);
        s.sum2 += tf * (tf - 1.0) * (tf - 2.0);
    }
    s
}

fn group_sizes_by<F: Fn(&(f64, f64), &(f64, f64)) -> bool>(
    sorted: &[(f64, f64)],
    same: F,
) -> Vec<u64> {
    let mut sizes = Vec::new();
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if same(&w[0], &w[1]) {
            run += 1;
        } else {
            sizes.push(run);
            run = 1;
        }
    }
    sizes.push(run);
    sizes
}

/// Shared final step for both Kendall routes, so the fast and brute-force
/// paths produce bit-identical coefficients from the same counts.
fn kendall_finish(s: i64, n0: u64, x_pairs: u64, y_pairs: u64) -> Result<f64> {
    if x_pairs == n0 || y_pairs == n0 {
        return Err(Error::data(
            "kendall tau is undefined when one variable is entirely tied",
        ));
    }
    Ok(s as f64 / (((n0 - x_pairs) as f64) * ((n0 - y_pairs) as f64)).sqrt())
}

/// Kendall's tau-b with a normal-approximation two-sided p-value,
/// O(n log n) via sorting plus inversion counting.
pub fn kendall_tau(pairs: &[(f64, f64)]) -> Result<CorrelationReport> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::data("kendall tau needs at least 2 pairs"));
    }
    check_pairs_finite(pairs)?;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tx = tie_stats(group_sizes_by(&sorted, |a, b| a.0 == b.0).into_iter());
    let txy_pairs: u64 = group_sizes_by(&sorted, |a, b| a == b)
        .into_iter()
        .map(|t| t * (t - 1) / 2)
        .sum();
    let mut ys: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let dis = count_inversions(&mut ys);
    // ys is sorted now; reuse it for y tie runs.
    let mut ty_sizes = Vec::new();
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ty_sizes.push(run);
            run = 1;
        }
    }
    ty_sizes.push(run);
    let ty = tie_stats(ty_sizes.into_iter());

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    // Pairs untied in both coordinates split into concordant + discordant.
    // Inclusion-exclusion; add the both-tied count first so the
    // intermediate stays non-negative.
    let both = n0 + txy_pairs - tx.pairs - ty.pairs;
    let con = both - dis;
    let s = con as i64 - dis as i64;
    let coefficient = kendall_finish(s, n0, tx.pairs, ty.pairs)?;

    let nf = n as f64;
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let v1 = tx.sum1 * ty.sum1 / (2.0 * nf * (nf - 1.0));
    let v2 = if n > 2 {
        tx.sum2 * ty.sum2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0))
    } else {
        0.0
    };
    let var_s = (v0 - tx.vt - ty.vt) / 18.0 + v1 + v2;
    let p_value = if var_s > 0.0 {
        erfc((s as f64).abs() / var_s.sqrt() / std::f64::consts::SQRT_2)
    } else {
        1.0
    };
    Ok(CorrelationReport {
        method: "kendall".to_owned(),
        coefficient,
        p_value,
        n,
    })
}

/// Quadratic reference for tau-b: classify every pair directly. Kept
/// independent of [`kendall_tau`] as its correctness oracle.
pub fn kendall_tau_brute(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::data("kendall tau needs at least 2 pairs"));
    }
    check_pairs_finite(pairs)?;
    let (mut con, mut dis, mut tx, mut ty) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = pairs[i].0 - pairs[j].0;
            let dy = pairs[i].1 - pairs[j].1;
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    con += 1;
                } else {
                    dis += 1;
                }
            }
        }
    }
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    kendall_finish(con as i64 - dis as i64, n0, tx, ty)
}

/// Two-sided p-value of a Pearson coefficient under the exact Student-t
/// null: t = rho sqrt((n-2)/(1-rho^2)), p = I_{nu/(nu+t^2)}(nu/2, 1/2).
pub fn pearson_p_value(rho: f64, n: usize) -> f64 {
    let nu = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t2 = rho * rho * nu / denom;
    reg_inc_beta(nu / 2.0, 0.5, nu / (nu + t2))
}

/// Sample Pearson correlation with its Student-t two-sided p-value.
pub fn pearson_rho(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "pearson",
            format!("{} x values vs {} y values", x.len(), y.len()),
        ));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::data("pearson correlation needs at least 3 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::data("correlation inputs must be finite"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::data(
            "pearson correlation is undefined for a zero-variance input",
        ));
    }
    let coefficient = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationReport {
        method: "pearson".to_owned(),
        coefficient,
        p_value: pearson_p_value(coefficient, n),
        n,
    })
}

/// Relative frequency of every real vocabulary word over a caption set,
/// indexed by word id — which is corpus frequency rank, so the profile is
/// plot-ready. Sentinel tokens are excluded; frequencies sum to 1.
pub fn word_frequency_profile(captions: &[&Caption], vocab: &Vocabulary) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; vocab.n_real()];
    let mut total = 0u64;
    for c in captions {
        for &id in c.valid_ids() {
            if id < vocab.n_real() {
                counts[id] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::data(
            "word frequency profile needs at least one real-word token",
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_caption, synth_dataset};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn pair_performance_follows_the_label() {
        let gen = ScoredPair {
            image_id: "i".into(),
            caption: "c".into(),
            score: 0.2,
            label: PairLabel::Generated,
        };
        assert_relative_eq!(pair_performance(&gen), 0.8);
        let hum = ScoredPair {
            score: 0.9,
            label: PairLabel::Human,
            ..gen.clone()
        };
        assert_relative_eq!(pair_performance(&hum), 0.9);
        let mid_h = ScoredPair {
            score: 0.5,
            label: PairLabel::Human,
            ..gen.clone()
        };
        let mid_g = ScoredPair {
            score: 0.5,
            label: PairLabel::Generated,
            ..gen
        };
        assert_eq!(pair_performance(&mid_h), pair_performance(&mid_g));
    }

    #[test]
    fn dataset_performance_means_pairs() {
        let mk = |score, label| ScoredPair {
            image_id: "i".into(),
            caption: "c".into(),
            score,
            label,
        };
        let one = [mk(0.2, PairLabel::Generated)];
        assert_relative_eq!(dataset_performance(&one).unwrap(), 0.8);
        let perfect = [mk(1.0, PairLabel::Human), mk(0.0, PairLabel::Generated)];
        assert_relative_eq!(dataset_performance(&perfect).unwrap(), 1.0);
        let blind = [mk(0.6, PairLabel::Human), mk(0.6, PairLabel::Generated)];
        assert_relative_eq!(dataset_performance(&blind).unwrap(), 0.5);
        assert!(dataset_performance(&[]).is_err());
    }

    #[test]
    fn trapezoid_matches_hand_areas() {
        assert_relative_eq!(trapezoid_auc(&[(0.0, 1.0), (1.0, 1.0)]), 1.0);
        assert_relative_eq!(
            trapezoid_auc(&[(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]),
            0.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn gamma_grid_validation() {
        assert!(validate_gamma_grid(&[0.0, 0.5, 1.0]).is_ok());
        assert!(validate_gamma_grid(&[0.0]).is_err());
        assert!(validate_gamma_grid(&[0.1, 1.0]).is_err());
        assert!(validate_gamma_grid(&[0.0, 0.9]).is_err());
        assert!(validate_gamma_grid(&[0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn kendall_perfect_and_reversed() {
        let up = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert_eq!(kendall_tau(&up).unwrap().coefficient, 1.0);
        let down = [(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)];
        assert_eq!(kendall_tau(&down).unwrap().coefficient, -1.0);
    }

    #[test]
    fn kendall_one_discordant_pair() {
        let pairs = [(1.0, 2.0), (2.0, 1.0), (3.0, 3.0)];
        assert_relative_eq!(
            kendall_tau(&pairs).unwrap().coefficient,
            1.0 / 3.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn kendall_tied_example() {
        // x = [1,1,2,3], y = [1,2,2,3]: C=4, D=0, one tied pair per axis;
        // tau-b = 4 / sqrt(5 * 5).
        let pairs = [(1.0, 1.0), (1.0, 2.0), (2.0, 2.0), (3.0, 3.0)];
        let r = kendall_tau(&pairs).unwrap();
        assert_relative_eq!(r.coefficient, 0.8, max_relative = 1e-15);
    }

    #[test]
    fn kendall_rejects_degenerate_input() {
        assert!(kendall_tau(&[(1.0, 1.0)]).is_err());
        let tied_x = [(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)];
        assert!(kendall_tau(&tied_x).is_err());
        assert!(kendall_tau_brute(&tied_x).is_err());
        assert!(kendall_tau(&[(f64::NAN, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn kendall_fast_path_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        for round in 0..300 {
            let n = rng.gen_range(2..=20);
            // Small value grids force plenty of ties.
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64 * 0.5))
                .collect();
            let brute = kendall_tau_brute(&pairs);
            let fast = kendall_tau(&pairs);
            match (fast, brute) {
                (Ok(f), Ok(b)) => {
                    assert_eq!(f.coefficient, b, "round {round}: {pairs:?}");
                    assert!((0.0..=1.0).contains(&f.p_value));
                }
                (Err(_), Err(_)) => {}
                (f, b) => panic!("round {round}: routes disagree: {f:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn kendall_is_invariant_under_monotone_maps() {
        let pairs = [(1.0, 4.0), (2.0, 1.0), (3.0, 3.0), (5.0, 2.0), (6.0, 6.0)];
        let base = kendall_tau(&pairs).unwrap();
        let mapped: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (x.exp(), y.powi(3))).collect();
        let got = kendall_tau(&mapped).unwrap();
        assert_eq!(base.coefficient, got.coefficient);
        assert_eq!(base.p_value, got.p_value);
    }

    #[test]
    fn kendall_p_value_shrinks_with_evidence() {
        let small: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, i as f64)).collect();
        let large: Vec<(f64, f64)> = (0..100).map(|i| (i as f64, i as f64)).collect();
        let ps = kendall_tau(&small).unwrap().p_value;
        let pl = kendall_tau(&large).unwrap().p_value;
        assert!(pl < ps);
        assert!(pl < 1e-10);
    }

    #[test]
    fn pearson_exact_lines_and_hand_example() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = pearson_rho(&x, &y).unwrap();
        assert_eq!(r.coefficient, 1.0);
        assert_eq!(r.p_value, 0.0);
        let down: Vec<f64> = x.iter().map(|v| -0.5 * v).collect();
        assert_eq!(pearson_rho(&x, &down).unwrap().coefficient, -1.0);

        let r = pearson_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert_relative_eq!(r.coefficient, 0.5, max_relative = 1e-15);
        // nu=1, t=1/sqrt(3): p = I_{0.75}(1/2,1/2) = (2/pi) asin(sqrt(3)/2) = 2/3.
        assert_relative_eq!(r.p_value, 2.0 / 3.0, max_relative = 1e-10);
    }

    #[test]
    fn pearson_table_scale_p_value() {
        let p = pearson_p_value(0.939, 12);
        assert!(p < 0.001, "p = {p}");
        assert!(p > 0.0);
    }

    #[test]
    fn pearson_affine_invariance() {
        let x = [0.3, 1.9, 2.2, 4.8, 5.1];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        let base = pearson_rho(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v - 7.0).collect();
        let got = pearson_rho(&x2, &y).unwrap();
        assert_relative_eq!(base.coefficient, got.coefficient, max_relative = 1e-12);
        let yneg: Vec<f64> = y.iter().map(|v| -v).collect();
        let flipped = pearson_rho(&x, &yneg).unwrap();
        assert_relative_eq!(flipped.coefficient, -base.coefficient, max_relative = 1e-12);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(pearson_rho(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn word_profile_counts_and_normalizes() {
        let vocab = crate::corpus::Vocabulary::build(
            &["a".to_owned(), "a".to_owned(), "b".to_owned()],
            8,
            1,
        )
        .unwrap();
        let toks: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let c = encode_caption(&toks, &vocab, 5).unwrap();
        let profile = word_frequency_profile(&[&c], &vocab).unwrap();
        assert_eq!(profile.len(), vocab.n_real());
        assert_relative_eq!(profile[vocab.id_of("a").unwrap()], 2.0 / 3.0);
        assert_relative_eq!(profile[vocab.id_of("b").unwrap()], 1.0 / 3.0);
        assert_relative_eq!(profile.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn generated_and_reference_profiles_differ_on_synth_data() {
        let ds = synth_dataset(7, 60, 60, 8).unwrap();
        let refs: Vec<&Caption> = ds.images.iter().flat_map(|e| &e.references).collect();
        let gens: Vec<&Caption> = ds
            .images
            .iter()
            .flat_map(|e| e.generated.values().flatten())
            .collect();
        let pr = word_frequency_profile(&refs, &ds.vocab).unwrap();
        let pg = word_frequency_profile(&gens, &ds.vocab).unwrap();
        let tv = 0.5 * pr.iter().zip(&pg).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv > 0.05, "total variation {tv}");
    }

    /// Scores 1 for an image's own first reference, 0.5 otherwise.
    struct BaseSpotter {
        bases: Vec<(String, Vec<usize>)>,
    }

    impl CandidateMetric for BaseSpotter {
        fn name(&self) -> String {
            "spotter".to_owned()
        }

        fn score(&self, image: &ImageRecord, _: &[Caption], cand: &Caption) -> Result<f64> {
            let hit = self
                .bases
                .iter()
                .any(|(id, ids)| *id == image.id && ids == cand.valid_ids());
            Ok(if hit { 1.0 } else { 0.5 })
        }
    }

    #[test]
    fn robustness_curve_on_a_hand_built_metric() {
        let ds = synth_dataset(3, 12, 50, 6).unwrap();
        let metric = BaseSpotter {
            bases: ds
                .images
                .iter()
                .map(|e| (e.image.id.clone(), e.references[0].valid_ids().to_vec()))
                .collect(),
        };
        let grid = [0.0, 0.5, 1.0];
        let curve = robustness_curve(&metric, &ds, TransformKind::Rw, &grid, 9).unwrap();
        // Human base pairs score 1 exactly; every replaced caption scores
        // 0.5, so the normalized curve is flat at 0.5.
        for (_, mean) in &curve.points {
            assert_relative_eq!(*mean, 0.5, max_relative = 1e-12);
        }
        assert_relative_eq!(curve.auc, 0.5, max_relative = 1e-12);
        assert_eq!(curve.metric, "spotter");

        let again = robustness_curve(&metric, &ds, TransformKind::Rw, &grid, 9).unwrap();
        for (a, b) in curve.points.iter().zip(&again.points) {
            assert_eq!(a.1.to_bits(), b.1.to_bits(), "paired design is replayable");
        }
    }

    #[test]
    fn robustness_with_rule_metrics_decreases_under_replacement() {
        let ds = synth_dataset(19, 24, 60, 6).unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let curve = robustness_curve(&BleuMetric(1), &ds, TransformKind::Rw, &grid, 3).unwrap();
        // Replacing every word should hurt BLEU-1 much more than replacing
        // two words.
        let first = curve.points.first().unwrap().1;
        let last = curve.points.last().unwrap().1;
        assert!(last < first, "curve fell from {first} to {last}");
        assert!(curve.auc < 1.0);
        assert!(curve.points.iter().all(|(_, m)| *m < 1.0));
    }

    #[test]
    fn robustness_needs_multi_reference_images() {
        let mut ds = synth_dataset(3, 8, 50, 4).unwrap();
        for e in &mut ds.images {
            e.references.truncate(1);
        }
        assert!(robustness_curve(&RougeMetric, &ds, TransformKind::Wp, &[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn robustness_csv_layout_is_stable() {
        let curves = [RobustnessCurve {
            metric: "bleu4".into(),
            transform: TransformKind::Wp,
            points: vec![(0.0, 0.75), (1.0, 0.25)],
            auc: 0.5,
        }];
        let mut out = Vec::new();
        write_robustness_csv(&curves, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "metric,transform,gamma,mean_score\n\
             bleu4,wp,0,0.75\n\
             bleu4,wp,1,0.25\n\
             bleu4,wp,auc,0.5\n"
        );
    }

    #[test]
    fn inversion_counter_agrees_with_quadratic_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.gen_range(0..40);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            let brute = {
                let mut c = 0u64;
                for i in 0..v.len() {
                    for j in i + 1..v.len() {
                        if v[i] > v[j] {
                            c += 1;
                        }
                    }
                }
                c
            };
            let mut w = v.clone();
            assert_eq!(count_inversions(&mut w), brute, "{v:?}");
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(w, sorted);
        }
    }
}
