//! Mini-batch critic training: balanced human/negative batches, Adam with
//! per-epoch learning-rate decay, and the two-fold protocol that scores
//! every image with a model that never saw it.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{MixerConfig, NegativePool};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{Caption, Dataset};
use crate::critic::{CriticConfig, CriticModel, ScoreInput};
use crate::error::{Error, Result};
use crate::evalstats::{PairLabel, ScoredPair};
use crate::stablehash::{derive_seed, fnv1a};

fn default_batch_size() -> usize {
    100
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-3
}
fn default_lr_decay() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Epoch count for the generator-evaluation preset, which trains shorter
/// than the full metric study.
pub const GENERATOR_EVAL_EPOCHS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: CriticConfig,
    /// Examples per batch, half labeled human and half negative.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Multiplied into the learning rate after every epoch.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Seed for batch sampling; the model draws its own from `model.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mixer: MixerConfig,
}

impl TrainConfig {
    pub fn new(model: CriticConfig) -> TrainConfig {
        TrainConfig {
            model,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr: default_lr(),
            lr_decay: default_lr_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
            mixer: MixerConfig::default(),
        }
    }

    // Negated comparisons so NaN fails validation too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// One training example: an image, a context reference, a candidate
/// caption, and whether the candidate is human-written.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image_idx: usize,
    /// Index into the image's references used as scoring context.
    pub context_ref: usize,
    /// For positives, which reference the candidate is.
    pub candidate_ref: Option<usize>,
    pub candidate: Caption,
    pub human: bool,
}

/// Uniform draw from 0..n excluding `skip` (n must be >= 2).
fn draw_other(skip: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= skip {
        j + 1
    } else {
        j
    }
}

/// Builds one balanced batch: half positives (uniform image, one reference
/// as context, a different one as candidate — an image with a single
/// reference reuses it for both roles), half negatives from the pool.
pub fn make_batch(
    dataset: &Dataset,
    pool: &NegativePool,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::config(format!(
            "batch size must be even and at least 2, got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = batch_size / 2;
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..half {
        let image_idx = rng.gen_range(0..dataset.n_images());
        let refs = &dataset.images[image_idx].references;
        if refs.is_empty() {
            return Err(Error::data(format!(
                "image {:?} has no references to sample positives from",
                dataset.images[image_idx].image.id
            )));
        }
        let candidate_ref = rng.gen_range(0..refs.len());
        let context_ref = if refs.len() >= 2 {
            draw_other(candidate_ref, refs.len(), &mut rng)
        } else {
            candidate_ref
        };
        batch.push(LabeledExample {
            image_idx,
            context_ref,
            candidate_ref: Some(candidate_ref),
            candidate: refs[candidate_ref].clone(),
            human: true,
        });
    }
    for _ in 0..half {
        let draw = pool.draw(&mut rng)?;
        let refs = &dataset.images[draw.image_idx].references;
        if refs.is_empty() {
            return Err(Error::data(format!(
                "image {:?} has no references to use as context",
                dataset.images[draw.image_idx].image.id
            )));
        }
        let context_ref = rng.gen_range(0..refs.len());
        batch.push(LabeledExample {
            image_idx: draw.image_idx,
            context_ref,
            candidate_ref: None,
            candidate: draw.candidate,
            human: false,
        });
    }
    Ok(batch)
}

fn batch_inputs<'a>(
    dataset: &'a Dataset,
    batch: &'a [LabeledExample],
    uses_caption: bool,
) -> Vec<ScoreInput<'a>> {
    batch
        .iter()
        .map(|ex| {
            let entry = &dataset.images[ex.image_idx];
            ScoreInput {
                image: &entry.image.feature,
                reference: if uses_caption {
                    Some(&entry.references[ex.context_ref])
                } else {
                    None
                },
                candidate: &ex.candidate,
            }
        })
        .collect()
}

/// First/second moment accumulators for one parameter list.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn like(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_model(model: &CriticModel, cfg: &TrainConfig) -> AdamState {
        let params: Vec<&Tensor> = model.params().into_iter().map(|(_, p)| p).collect();
        AdamState::like(&params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place. The update is elementwise, so
/// it does not matter how the parameters are split into tensors.
pub fn adam_step(
    mut params: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (k, p) in params.iter_mut().enumerate() {
        if p.shape() != grads[k].shape() {
            return Err(Error::shape(
                "adam",
                format!("param {k}: {:?} vs grad {:?}", p.shape(), grads[k].shape()),
            ));
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let g = grads[k].data();
        let x = p.data_mut();
        for i in 0..x.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

fn train_step(
    model: &mut CriticModel,
    dataset: &Dataset,
    pool: &NegativePool,
    cfg: &TrainConfig,
    batch_seed: u64,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let batch = make_batch(dataset, pool, cfg.batch_size, batch_seed)?;
    let labels: Vec<bool> = batch.iter().map(|e| e.human).collect();
    let inputs = batch_inputs(dataset, &batch, cfg.model.context_mode.uses_caption());
    let mut tape = Tape::new();
    let (loss_id, param_ids) = model.loss_graph(&mut tape, &inputs, &labels)?;
    let loss = tape.value(loss_id).data()[0];
    let mut grads = tape.backward(loss_id)?;
    let mut grad_vec = Vec::with_capacity(param_ids.len());
    for id in &param_ids {
        grad_vec.push(
            grads
                .take(*id)
                .ok_or_else(|| Error::shape("adam", "parameter missing from gradient"))?,
        );
    }
    // The padding embedding stays fixed at zero.
    let (pad_param, pad_row) = model.pad_row();
    let cols = grad_vec[pad_param].cols();
    grad_vec[pad_param].data_mut()[pad_row * cols..(pad_row + 1) * cols].fill(0.0);
    adam_step(model.params_mut(), &grad_vec, adam, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_human_mean: Option<f64>,
    pub val_generated_mean: Option<f64>,
}

/// CSV with columns epoch, mean_loss, lr, val_human_mean,
/// val_generated_mean; validation cells are empty when no held-out set was
/// given.
pub fn write_history_csv<W: std::io::Write>(history: &[EpochStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| Error::data(format!("writing history csv: {e}"));
    w.write_record([
        "epoch",
        "mean_loss",
        "lr",
        "val_human_mean",
        "val_generated_mean",
    ])
    .map_err(io_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.mean_loss.to_string(),
            e.lr.to_string(),
            opt(e.val_human_mean),
            opt(e.val_generated_mean),
        ])
        .map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| Error::data(format!("flushing history csv: {e}")))?;
    Ok(())
}

/// Mean critic score over human reference pairs (each reference scored
/// against the image's remaining references) and over generated pairs
/// (scored against all references), optionally restricted to one
/// generator's captions.
pub fn validation_means(
    model: &CriticModel,
    dataset: &Dataset,
    generator: Option<&str>,
) -> Result<(f64, f64)> {
    let pairs = score_pairs(model, dataset, generator)?;
    let mean_of = |label: PairLabel| {
        let scores: Vec<f64> = pairs
            .iter()
            .filter(|p| p.label == label)
            .map(|p| p.score)
            .collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    };
    let human =
        mean_of(PairLabel::Human).ok_or_else(|| Error::data("validation set has no references"))?;
    let generated = mean_of(PairLabel::Generated)
        .ok_or_else(|| Error::data("validation set has no generated captions"))?;
    Ok((human, generated))
}

/// Scores every pair in the dataset with one model: each human reference
/// against the image's other references (against itself for single-
/// reference images) and each generated caption against all references.
pub fn score_pairs(
    model: &CriticModel,
    dataset: &Dataset,
    generator: Option<&str>,
) -> Result<Vec<ScoredPair>> {
    let mut out = Vec::new();
    for entry in &dataset.images {
        let feature = &entry.image.feature;
        for (k, r) in entry.references.iter().enumerate() {
            let mut others: Vec<Caption> = entry
                .references
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, c)| c.clone())
                .collect();
            if others.is_empty() {
                others.push(r.clone());
            }
            out.push(ScoredPair {
                image_id: entry.image.id.clone(),
                caption: r.raw.clone(),
                score: model.score_with_all_references(feature, &others, r)?,
                label: PairLabel::Human,
            });
        }
        for (name, caps) in &entry.generated {
            if generator.is_none_or(|g| g == name) {
                for c in caps {
                    out.push(ScoredPair {
                        image_id: entry.image.id.clone(),
                        caption: c.raw.clone(),
                        score: model.score_with_all_references(feature, &entry.references, c)?,
                        label: PairLabel::Generated,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::data("no pairs to score"));
    }
    Ok(out)
}

/// Trains a fresh critic. One epoch is ceil(total references / half batch)
/// batches; the learning rate is multiplied by the decay factor after
/// every epoch. With a validation set, history rows carry held-out mean
/// scores per label. `generator` restricts generator negatives (and
/// validation) to one submission's captions.
pub fn train_with_validation(
    dataset: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    generator: Option<&str>,
) -> Result<(CriticModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let model = CriticModel::new(cfg.model.clone(), &dataset.vocab, None)?;
    resume_training(model, dataset, cfg, validation, generator)
}

/// Same loop, starting from an existing model — e.g. one whose embedding
/// table was seeded from pretrained word vectors.
pub fn resume_training(
    mut model: CriticModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    generator: Option<&str>,
) -> Result<(CriticModel, Vec<EpochStats>)> {
    cfg.validate()?;
    if dataset.n_images() == 0 {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let positives = dataset.total_references();
    if positives == 0 {
        return Err(Error::data("cannot train on a dataset with no references"));
    }
    let pool = NegativePool::new(dataset, cfg.mixer.clone(), generator)?;
    let mut adam = AdamState::for_model(&model, cfg);
    let batches_per_epoch = positives.div_ceil(cfg.batch_size / 2);
    let mut lr = cfg.lr;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let seed = derive_seed(cfg.seed, "batch", batch_counter);
            batch_counter += 1;
            loss_sum += train_step(&mut model, dataset, &pool, cfg, seed, &mut adam, lr)?;
        }
        let (val_human_mean, val_generated_mean) = match validation {
            Some(v) => {
                let (h, g) = validation_means(&model, v, generator)?;
                (Some(h), Some(g))
            }
            None => (None, None),
        };
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            lr,
            val_human_mean,
            val_generated_mean,
        });
        lr *= cfg.lr_decay;
    }
    Ok((model, history))
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(CriticModel, Vec<EpochStats>)> {
    let generator = single_generator(dataset);
    train_with_validation(dataset, cfg, None, generator.as_deref())
}

/// The sole generator name if the dataset has exactly one, so a plain
/// train call does not have to name it.
fn single_generator(dataset: &Dataset) -> Option<String> {
    let names = dataset.generator_names();
    if names.len() == 1 {
        Some(names.into_iter().next().unwrap())
    } else {
        None
    }
}

/// Fold assignment by image-id hash parity: stable across runs, machines,
/// and dataset ordering.
pub fn fold_of(image_id: &str) -> u8 {
    (fnv1a(image_id.as_bytes()) & 1) as u8
}

#[derive(Debug, Clone)]
pub struct TwoFoldReport {
    /// Every pair scored by the opposite fold's model, averaged over
    /// replicas, in dataset image order.
    pub pairs: Vec<ScoredPair>,
    pub replicas: usize,
    /// `train_ids[f]` = images the model that scored fold-f pairs was
    /// trained on (i.e. the other fold).
    pub train_ids: [Vec<String>; 2],
    /// Training histories in job order (replica-major, scored fold minor).
    pub histories: Vec<Vec<EpochStats>>,
}

/// Runs `jobs(i)` for i in 0..n, at most `threads` at a time, returning
/// results in job order regardless of scheduling.
fn run_jobs<T, F>(n: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(job).collect();
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in indices.chunks(threads) {
        let results = std::thread::scope(|scope| {
            let job = &job;
            let handles: Vec<_> = chunk.iter().map(|&i| scope.spawn(move || job(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training job panicked"))
                .collect::<Vec<Result<T>>>()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Two-fold protocol: split images by id-hash parity, train one model per
/// fold (negatives from the named generator plus the configured
/// augmentations, drawn from that fold only), and score each fold's pairs
/// with the other fold's model, so no image is scored by a model that
/// trained on it. `replicas` independent seed replicas are averaged.
pub fn two_fold_score(
    dataset: &Dataset,
    generator: &str,
    cfg: &TrainConfig,
    replicas: usize,
    threads: usize,
) -> Result<TwoFoldReport> {
    cfg.validate()?;
    if replicas == 0 {
        return Err(Error::config("need at least 1 replica"));
    }
    if threads == 0 {
        return Err(Error::config("need at least 1 thread"));
    }
    if !dataset.generator_names().iter().any(|n| n == generator) {
        return Err(Error::data(format!(
            "dataset has no captions from generator {generator:?}"
        )));
    }
    let (fold1, fold0) = dataset.partition(|id| fold_of(id) == 1);
    let folds = [fold0, fold1];
    for (f, fold) in folds.iter().enumerate() {
        if fold.n_images() == 0 {
            return Err(Error::data(format!(
                "hash split left fold {f} empty; need more images"
            )));
        }
    }

    // Job j = (replica r, scored fold f): train on the other fold,
    // validate on and score fold f.
    let n_jobs = replicas * 2;
    let results = run_jobs(n_jobs, threads, |j| {
        let (r, f) = (j / 2, j % 2);
        let mut job_cfg = cfg.clone();
        job_cfg.seed = derive_seed(cfg.seed, "fold-train", (r * 2 + f) as u64);
        job_cfg.model.seed = derive_seed(cfg.seed, "fold-model", (r * 2 + f) as u64);
        let (model, history) =
            train_with_validation(&folds[1 - f], &job_cfg, Some(&folds[f]), Some(generator))?;
        let pairs = score_pairs(&model, &folds[f], Some(generator))?;
        Ok((pairs, history))
    })?;

    let mut histories = Vec::with_capacity(n_jobs);
    let mut fold_pairs: [Vec<ScoredPair>; 2] = [Vec::new(), Vec::new()];
    for (j, (pairs, history)) in results.into_iter().enumerate() {
        let f = j % 2;
        if j < 2 {
            fold_pairs[f] = pairs;
        } else {
            let acc = &mut fold_pairs[f];
            if acc.len() != pairs.len() {
                return Err(Error::data("replicas scored different pair sets"));
            }
            for (a, p) in acc.iter_mut().zip(pairs) {
                debug_assert_eq!(a.image_id, p.image_id);
                debug_assert_eq!(a.caption, p.caption);
                a.score += p.score;
            }
        }
        histories.push(history);
    }
    for pairs in &mut fold_pairs {
        for p in pairs.iter_mut() {
            p.score /= replicas as f64;
        }
    }

    // Interleave back into dataset image order.
    let mut queues: [VecDeque<ScoredPair>; 2] =
        fold_pairs.map(|v| v.into_iter().collect::<VecDeque<_>>());
    let mut pairs = Vec::with_capacity(queues[0].len() + queues[1].len());
    for entry in &dataset.images {
        let q = &mut queues[fold_of(&entry.image.id) as usize];
        while q.front().is_some_and(|p| p.image_id == entry.image.id) {
            pairs.push(q.pop_front().unwrap());
        }
    }
    debug_assert!(queues.iter().all(VecDeque::is_empty));

    let ids = |d: &Dataset| d.images.iter().map(|e| e.image.id.clone()).collect();
    Ok(TwoFoldReport {
        pairs,
        replicas,
        train_ids: [ids(&folds[1]), ids(&folds[0])],
        histories,
    })
}
