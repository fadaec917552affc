//! Pathological negative captions: caption/image mismatch (rc), word
//! permutation (wp), word replacement (rw), plus a bigram Monte-Carlo
//! sampler and the mixer that draws training negatives from the enabled
//! sources.
//!
//! Every generator here is a pure function of (input, seed), so negative
//! sampling can be replayed and parallelized freely.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{caption_from_ids, Caption, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::stablehash::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Random caption: pair the image with a reference of a near neighbor.
    Rc,
    /// Word permutation within the caption.
    Wp,
    /// Word replacement with random vocabulary words.
    Rw,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Rc, TransformKind::Wp, TransformKind::Rw];
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<TransformKind> {
        match s {
            "rc" => Ok(TransformKind::Rc),
            "wp" => Ok(TransformKind::Wp),
            "rw" => Ok(TransformKind::Rw),
            other => Err(Error::config(format!(
                "unknown transform {other:?} (expected rc, wp or rw)"
            ))),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransformKind::Rc => "rc",
            TransformKind::Wp => "wp",
            TransformKind::Rw => "rw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub gamma: f64,
    pub seed: u64,
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!(
            "gamma must be in [0,1], got {gamma}"
        )));
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// For every image, the other images sorted by descending feature cosine
/// (ties broken by ascending index). The first `max(1, ceil(gamma * (n-1)))`
/// entries form the neighbor pool at strength `gamma`.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    order: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn build(dataset: &Dataset) -> Result<NeighborIndex> {
        let n = dataset.n_images();
        if n < 2 {
            return Err(Error::data(
                "caption mismatch needs at least 2 images to draw neighbors from",
            ));
        }
        let mut order = Vec::with_capacity(n);
        for i in 0..n {
            let fi = &dataset.images[i].image.feature;
            let mut others: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, cosine(fi, &dataset.images[j].image.feature)))
                .collect();
            others.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            order.push(others.into_iter().map(|(j, _)| j).collect());
        }
        Ok(NeighborIndex { order })
    }

    pub fn pool(&self, image_idx: usize, gamma: f64) -> &[usize] {
        let all = &self.order[image_idx];
        let k = ((gamma * all.len() as f64).ceil() as usize).clamp(1, all.len());
        &all[..k]
    }
}

/// Draws one mismatched caption for `image_idx`: a uniform neighbor from
/// the pool, then one of its references uniformly.
pub fn rc_draw(
    dataset: &Dataset,
    neighbors: &NeighborIndex,
    image_idx: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Caption> {
    check_gamma(gamma)?;
    let pool = neighbors.pool(image_idx, gamma);
    let j = pool[rng.gen_range(0..pool.len())];
    let refs = &dataset.images[j].references;
    Ok(refs[rng.gen_range(0..refs.len())].clone())
}

/// Applies the caption-mismatch transform to every image; element `i` is
/// the foreign caption now paired with image `i`.
pub fn transform_rc(dataset: &Dataset, gamma: f64, seed: u64) -> Result<Vec<Caption>> {
    let neighbors = NeighborIndex::build(dataset)?;
    let mut out = Vec::with_capacity(dataset.n_images());
    for i in 0..dataset.n_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rc", i as u64));
        out.push(rc_draw(dataset, &neighbors, i, gamma, &mut rng)?);
    }
    Ok(out)
}

/// Rounding used for transform strengths: half away from zero, i.e. half-up
/// for the non-negative values seen here.
fn strength(gamma: f64, valid_len: usize) -> usize {
    (gamma * valid_len as f64).round() as usize
}

/// Permutes `max(2, round(gamma * valid_len))` token positions with a
/// random permutation, resampling (up to 16 permutations per position set,
/// up to 16 position sets) until the token sequence actually changes. A
/// caption that cannot be rearranged distinguishably at all — every valid
/// token identical — is an error.
pub fn transform_wp(
    caption: &Caption,
    gamma: f64,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Caption> {
    check_gamma(gamma)?;
    let n = caption.valid_len;
    if n < 2 {
        return Err(Error::data(format!(
            "word permutation needs at least 2 tokens, caption has {n}"
        )));
    }
    let k = strength(gamma, n).clamp(2, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        let positions = choose_distinct(n, k, &mut rng);
        let original: Vec<usize> = positions.iter().map(|&p| caption.ids[p]).collect();
        // A position set of identical tokens (duplicated words) can never
        // change; a fresh set is drawn by the outer loop.
        for _ in 0..16 {
            let perm = random_permutation(k, &mut rng);
            let shuffled: Vec<usize> = perm.iter().map(|&s| original[s]).collect();
            if shuffled != original {
                let mut ids = caption.ids.clone();
                for (slot, &p) in positions.iter().enumerate() {
                    ids[p] = shuffled[slot];
                }
                return Ok(caption_from_ids(ids, n, vocab));
            }
        }
    }
    Err(Error::data(format!(
        "no distinguishable permutation for caption {:?}",
        caption.raw
    )))
}

/// Replaces `clamp(round(gamma * valid_len), 2, valid_len)` token positions
/// with random real-vocabulary words, each different from the word it
/// replaces.
pub fn transform_rw(
    caption: &Caption,
    gamma: f64,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Caption> {
    check_gamma(gamma)?;
    let n = caption.valid_len;
    if n < 2 {
        return Err(Error::data(format!(
            "word replacement needs at least 2 tokens, caption has {n}"
        )));
    }
    let n_real = vocab.n_real();
    if n_real < 2 {
        return Err(Error::config(
            "word replacement needs a vocabulary with at least 2 real words",
        ));
    }
    let k = strength(gamma, n).clamp(2, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = choose_distinct(n, k, &mut rng);
    let mut ids = caption.ids.clone();
    for &p in &positions {
        ids[p] = draw_different(ids[p], n_real, &mut rng);
    }
    Ok(caption_from_ids(ids, n, vocab))
}

/// Uniform draw from the real-word ids excluding `original`, without
/// rejection: sample one id fewer and skip past the excluded value.
fn draw_different(original: usize, n_real: usize, rng: &mut ChaCha8Rng) -> usize {
    if original >= n_real {
        return rng.gen_range(0..n_real);
    }
    let r = rng.gen_range(0..n_real - 1);
    if r >= original {
        r + 1
    } else {
        r
    }
}

/// `k` distinct positions from `0..n`, in ascending order.
fn choose_distinct(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn random_permutation(k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Successor index used for the virtual end-of-caption token.
const END: usize = usize::MAX;

/// Bigram language model with add-1 smoothing over the real vocabulary plus
/// a virtual end token; the start state is virtual as well. Stands in for
/// sampling from a full captioning model: cheap, and it covers rare words.
#[derive(Debug, Clone)]
pub struct BigramLm {
    n_real: usize,
    /// count[(prev, next)]; prev = n_real means the start state, next =
    /// n_real means the end token.
    counts: HashMap<(usize, usize), u64>,
    totals: HashMap<usize, u64>,
}

impl BigramLm {
    pub fn fit(dataset: &Dataset) -> Result<BigramLm> {
        let n_real = dataset.vocab.n_real();
        let start = n_real;
        let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
        let mut totals: HashMap<usize, u64> = HashMap::new();
        let mut seen = false;
        for entry in &dataset.images {
            for r in &entry.references {
                seen = true;
                let mut prev = start;
                for &id in r.valid_ids() {
                    let next = if id < n_real { id } else { continue };
                    *counts.entry((prev, next)).or_insert(0) += 1;
                    *totals.entry(prev).or_insert(0) += 1;
                    prev = next;
                }
                *counts.entry((prev, n_real)).or_insert(0) += 1;
                *totals.entry(prev).or_insert(0) += 1;
            }
        }
        if !seen {
            return Err(Error::data(
                "language model needs at least one reference caption",
            ));
        }
        Ok(BigramLm {
            n_real,
            counts,
            totals,
        })
    }

    fn count(&self, prev: usize, next: usize) -> u64 {
        self.counts.get(&(prev, next)).copied().unwrap_or(0)
    }

    /// Draws the next token id, or `END`. Successor space = every real word
    /// plus the end token, each with a +1 smoothing count.
    fn step(&self, prev: usize, rng: &mut ChaCha8Rng) -> usize {
        let total = self.totals.get(&prev).copied().unwrap_or(0) + self.n_real as u64 + 1;
        let mut u = rng.gen_range(0..total);
        for next in 0..self.n_real {
            let c = self.count(prev, next) + 1;
            if u < c {
                return next;
            }
            u -= c;
        }
        END
    }

    fn step_argmax(&self, prev: usize) -> usize {
        let mut best = END;
        let mut best_c = self.count(prev, self.n_real) + 1;
        // Scan high to low so ties resolve to the smallest id, with the end
        // token losing all ties.
        for next in (0..self.n_real).rev() {
            let c = self.count(prev, next) + 1;
            if c >= best_c {
                best = next;
                best_c = c;
            }
        }
        best
    }

    fn walk(&self, t_max: usize, mut next: impl FnMut(usize) -> usize) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut prev = self.n_real;
        while ids.len() < t_max {
            let id = next(prev);
            if id == END {
                break;
            }
            ids.push(id);
            prev = id;
        }
        ids
    }

    /// Autoregressive sample of at most `t_max` tokens.
    pub fn sample(&self, t_max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.walk(t_max, |prev| self.step(prev, rng))
    }

    /// Deterministic most-likely walk; ties go to the smallest word id.
    pub fn sample_argmax(&self, t_max: usize) -> Vec<usize> {
        self.walk(t_max, |prev| self.step_argmax(prev))
    }
}

/// Samples one Monte-Carlo caption, retrying when the model ends the
/// caption before its first token.
pub fn mc_sample_caption(
    lm: &BigramLm,
    vocab: &Vocabulary,
    t_max: usize,
    seed: u64,
) -> Result<Caption> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let ids = lm.sample(t_max, &mut rng);
        if !ids.is_empty() {
            let valid = ids.len();
            let mut padded = ids;
            padded.resize(t_max, vocab.pad_id());
            return Ok(caption_from_ids(padded, valid, vocab));
        }
    }
    Err(Error::data(
        "language model kept sampling empty captions; is it fit on empty references?",
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub generator: bool,
    pub pathological: bool,
    pub monte_carlo: bool,
    /// Which transforms the pathological source draws from, each equally
    /// likely. Narrowing this to one kind trains a critic against a single
    /// pathology.
    pub transforms: Vec<TransformKind>,
}

impl Default for MixerConfig {
    fn default() -> MixerConfig {
        MixerConfig {
            generator: true,
            pathological: true,
            monte_carlo: true,
            transforms: TransformKind::ALL.to_vec(),
        }
    }
}

impl MixerConfig {
    /// Only machine-generated captions as negatives.
    pub fn generator_only() -> MixerConfig {
        MixerConfig {
            generator: true,
            pathological: false,
            monte_carlo: false,
            transforms: TransformKind::ALL.to_vec(),
        }
    }

    /// Only the given transforms as negatives.
    pub fn pathological_only(kinds: &[TransformKind]) -> MixerConfig {
        MixerConfig {
            generator: false,
            pathological: true,
            monte_carlo: false,
            transforms: kinds.to_vec(),
        }
    }

    fn enabled(&self) -> Vec<NegativeSource> {
        let mut v = Vec::new();
        if self.generator {
            v.push(NegativeSource::Generator);
        }
        if self.pathological {
            v.push(NegativeSource::Pathological);
        }
        if self.monte_carlo {
            v.push(NegativeSource::MonteCarlo);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    Generator,
    Pathological,
    MonteCarlo,
}

/// One drawn negative example: a candidate caption for an image, labeled
/// machine-generated.
#[derive(Debug, Clone)]
pub struct NegativeDraw {
    pub image_idx: usize,
    pub candidate: Caption,
    pub source: NegativeSource,
}

/// Transform strengths used for training negatives.
pub const GAMMA_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Pre-assembled negative sources for one training dataset. Sources are
/// drawn with equal probability among those enabled; within the
/// pathological source the three transforms are equally likely and gamma
/// is uniform on [`GAMMA_GRID`].
pub struct NegativePool<'a> {
    dataset: &'a Dataset,
    sources: Vec<NegativeSource>,
    transforms: Vec<TransformKind>,
    /// Name of the generator whose captions serve as generator negatives.
    generator: Option<String>,
    neighbors: Option<NeighborIndex>,
    lm: Option<BigramLm>,
}

impl<'a> NegativePool<'a> {
    pub fn new(
        dataset: &'a Dataset,
        cfg: MixerConfig,
        generator: Option<&str>,
    ) -> Result<NegativePool<'a>> {
        let sources = cfg.enabled();
        if sources.is_empty() {
            return Err(Error::config("no negative sources enabled"));
        }
        if cfg.pathological {
            if cfg.transforms.is_empty() {
                return Err(Error::config(
                    "pathological negatives enabled but no transforms listed",
                ));
            }
            for (i, k) in cfg.transforms.iter().enumerate() {
                if cfg.transforms[..i].contains(k) {
                    return Err(Error::config(format!("transform {k} listed twice")));
                }
            }
        }
        let generator = if cfg.generator {
            let name = generator.ok_or_else(|| {
                Error::config("generator negatives enabled but no generator named")
            })?;
            let have: usize = dataset
                .images
                .iter()
                .map(|e| e.generated.get(name).map_or(0, Vec::len))
                .sum();
            if have == 0 {
                return Err(Error::config(format!(
                    "generator negatives enabled but the dataset has no captions from {name:?}"
                )));
            }
            Some(name.to_owned())
        } else {
            None
        };
        let neighbors = if cfg.pathological && cfg.transforms.contains(&TransformKind::Rc) {
            Some(NeighborIndex::build(dataset)?)
        } else {
            None
        };
        let lm = if cfg.monte_carlo {
            Some(BigramLm::fit(dataset)?)
        } else {
            None
        };
        Ok(NegativePool {
            dataset,
            sources,
            transforms: cfg.transforms,
            generator,
            neighbors,
            lm,
        })
    }

    /// Draws a negative for a uniformly chosen image. Rare dead ends (an
    /// image with no captions from the named generator, a caption with no
    /// distinguishable permutation) are retried with fresh draws.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<NegativeDraw> {
        let mut last_err = None;
        for _ in 0..16 {
            let image_idx = rng.gen_range(0..self.dataset.n_images());
            let source = self.sources[rng.gen_range(0..self.sources.len())];
            match self.draw_from(source, image_idx, rng) {
                Ok(candidate) => {
                    return Ok(NegativeDraw {
                        image_idx,
                        candidate,
                        source,
                    })
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("16 failed attempts leave an error"))
    }

    fn draw_from(
        &self,
        source: NegativeSource,
        image_idx: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Caption> {
        let entry = &self.dataset.images[image_idx];
        match source {
            NegativeSource::Generator => {
                let name = self.generator.as_deref().expect("validated in new");
                let caps = entry
                    .generated
                    .get(name)
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| {
                        Error::data(format!(
                            "image {:?} has no captions from {name:?}",
                            entry.image.id
                        ))
                    })?;
                Ok(caps[rng.gen_range(0..caps.len())].clone())
            }
            NegativeSource::Pathological => {
                let kind = self.transforms[rng.gen_range(0..self.transforms.len())];
                let gamma = GAMMA_GRID[rng.gen_range(0..GAMMA_GRID.len())];
                let vocab = &self.dataset.vocab;
                match kind {
                    TransformKind::Rc => rc_draw(
                        self.dataset,
                        self.neighbors.as_ref().expect("built in new"),
                        image_idx,
                        gamma,
                        rng,
                    ),
                    TransformKind::Wp => {
                        let r = &entry.references[rng.gen_range(0..entry.references.len())];
                        transform_wp(r, gamma, vocab, rng.gen())
                    }
                    TransformKind::Rw => {
                        let r = &entry.references[rng.gen_range(0..entry.references.len())];
                        transform_rw(r, gamma, vocab, rng.gen())
                    }
                }
            }
            NegativeSource::MonteCarlo => mc_sample_caption(
                self.lm.as_ref().expect("built in new"),
                &self.dataset.vocab,
                self.dataset.t_max,
                rng.gen(),
            ),
        }
    }
}
