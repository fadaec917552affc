//! The critic model: scores a candidate caption with the probability that
//! a human wrote it, conditioned on an optional context built from the
//! image and/or one reference caption.
//!
//! Class convention everywhere: index 0 = machine-generated, index 1 =
//! human-written. `score` returns the softmax probability of class 1.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Tape, Tensor, VarId};
use crate::corpus::{Caption, Vocabulary};
use crate::encoder::{
    context_width, encode_context_batch, encode_sequence_batch, ContextMode, EmbeddingTable,
    LstmLayer, LstmLayerVars, LstmParams,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, CountSketchPlan, FusionConfig, FusionStrategy, MlpVars};
use crate::stablehash::derive_seed;

pub const MODEL_MAGIC: &[u8; 4] = b"CRT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub context_mode: ContextMode,
    pub fusion: FusionConfig,
    pub emb_dim: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    /// Image feature dimension; only read in modes that use the image.
    pub d_img: usize,
    pub t_max: usize,
    /// Filled in from the vocabulary when the model is built; 0 means
    /// "not yet bound".
    pub vocab_size: usize,
    pub seed: u64,
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden == 0 {
            return Err(Error::config("emb_dim and hidden must be positive"));
        }
        if !(1..=3).contains(&self.lstm_layers) {
            return Err(Error::config(format!(
                "lstm_layers must be 1..=3, got {}",
                self.lstm_layers
            )));
        }
        if self.t_max == 0 {
            return Err(Error::config("t_max must be positive"));
        }
        if self.context_mode.uses_image() && self.d_img == 0 {
            return Err(Error::config(format!(
                "context mode {} needs d_img > 0",
                self.context_mode
            )));
        }
        if self.fusion.strategy == FusionStrategy::CbpLinear
            && self.context_mode == ContextMode::None
        {
            return Err(Error::config(
                "cbp_linear fusion needs a context; pick a context mode other than none",
            ));
        }
        self.fusion.validate()
    }

    fn ctx_width(&self) -> usize {
        context_width(self.context_mode, self.hidden)
    }

    /// Input width of the fusion MLP: context block plus candidate encoding.
    fn mlp_input(&self) -> usize {
        self.ctx_width() + self.hidden
    }

    fn fused_width(&self) -> usize {
        self.fusion.fused_width(self.ctx_width(), self.hidden)
    }
}

/// One scoring/training example. The image feature is always supplied and
/// ignored by modes that do not look at it; the reference must be present
/// exactly when the context mode uses a caption.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInput<'a> {
    pub image: &'a [f64],
    pub reference: Option<&'a Caption>,
    pub candidate: &'a Caption,
}

/// Tape handles produced by a forward pass: one leaf per parameter, in the
/// same order as [`CriticModel::params`], plus the `[B, 2]` logits.
pub struct ForwardPass {
    pub param_ids: Vec<VarId>,
    pub logits: VarId,
}

#[derive(Debug, Clone)]
pub struct CriticModel {
    pub config: CriticConfig,
    pub embedding: EmbeddingTable,
    pub lstm: LstmParams,
    pub img_proj: Option<(Tensor, Tensor)>,
    pub mlp: Option<(Tensor, Tensor)>,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub vocab_fingerprint: u64,
    plans: Option<(Arc<CountSketchPlan>, Arc<CountSketchPlan>)>,
}

fn build_plans(config: &CriticConfig) -> Option<(Arc<CountSketchPlan>, Arc<CountSketchPlan>)> {
    if config.fusion.strategy != FusionStrategy::CbpLinear {
        return None;
    }
    let d = config.fusion.cbp_dim;
    Some((
        Arc::new(CountSketchPlan::from_seed(
            derive_seed(config.seed, "sketch", 0),
            config.ctx_width(),
            d,
        )),
        Arc::new(CountSketchPlan::from_seed(
            derive_seed(config.seed, "sketch", 1),
            config.hidden,
            d,
        )),
    ))
}

impl CriticModel {
    /// Builds a freshly initialized model bound to `vocab`. Pretrained word
    /// vectors, when given, seed the embedding table; words they miss get
    /// random rows.
    pub fn new(
        mut config: CriticConfig,
        vocab: &Vocabulary,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
    ) -> Result<CriticModel> {
        if config.vocab_size != 0 && config.vocab_size != vocab.size() {
            return Err(Error::config(format!(
                "config says vocab_size {} but the vocabulary has {} entries",
                config.vocab_size,
                vocab.size()
            )));
        }
        config.vocab_size = vocab.size();
        config.validate()?;
        let seed = config.seed;
        let mut emb_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "emb", 0));
        let embedding = match pretrained {
            Some(table) => {
                EmbeddingTable::with_pretrained(vocab, config.emb_dim, table, &mut emb_rng)?
            }
            None => EmbeddingTable::init(vocab, config.emb_dim, &mut emb_rng),
        };
        let mut lstm_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lstm", 0));
        let lstm = LstmParams::init(
            config.emb_dim,
            config.hidden,
            config.lstm_layers,
            &mut lstm_rng,
        )?;
        let img_proj = if config.context_mode.uses_image() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "img", 0));
            Some((
                Tensor::uniform(&[config.d_img, config.hidden], &mut rng, -0.08, 0.08),
                Tensor::zeros(&[config.hidden]),
            ))
        } else {
            None
        };
        let mlp = if config.fusion.strategy == FusionStrategy::ConcatMlp {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mlp", 0));
            Some((
                Tensor::uniform(
                    &[config.mlp_input(), config.fusion.mlp_hidden],
                    &mut rng,
                    -0.08,
                    0.08,
                ),
                Tensor::zeros(&[config.fusion.mlp_hidden]),
            ))
        } else {
            None
        };
        let mut cls_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cls", 0));
        let cls_w = Tensor::uniform(&[config.fused_width(), 2], &mut cls_rng, -0.08, 0.08);
        let cls_b = Tensor::zeros(&[2]);
        let plans = build_plans(&config);
        Ok(CriticModel {
            config,
            embedding,
            lstm,
            img_proj,
            mlp,
            cls_w,
            cls_b,
            vocab_fingerprint: vocab.fingerprint(),
            plans,
        })
    }

    /// All-zero parameter tensors in the documented order; used by `load`.
    fn with_shapes(config: CriticConfig, vocab_fingerprint: u64) -> Result<CriticModel> {
        config.validate()?;
        if config.vocab_size < 3 {
            return Err(Error::config(format!(
                "vocab_size {} is too small for a bound model",
                config.vocab_size
            )));
        }
        let embedding = EmbeddingTable {
            weights: Tensor::zeros(&[config.vocab_size, config.emb_dim]),
            pad_id: config.vocab_size - 2,
        };
        let h = config.hidden;
        let layers = (0..config.lstm_layers)
            .map(|l| {
                let d_in = if l == 0 { config.emb_dim } else { h };
                LstmLayer {
                    w_x: Tensor::zeros(&[d_in, 4 * h]),
                    w_h: Tensor::zeros(&[h, 4 * h]),
                    bias: Tensor::zeros(&[4 * h]),
                }
            })
            .collect();
        let lstm = LstmParams {
            layers,
            input_dim: config.emb_dim,
            hidden: h,
        };
        let img_proj = config
            .context_mode
            .uses_image()
            .then(|| (Tensor::zeros(&[config.d_img, h]), Tensor::zeros(&[h])));
        let mlp = (config.fusion.strategy == FusionStrategy::ConcatMlp).then(|| {
            (
                Tensor::zeros(&[config.mlp_input(), config.fusion.mlp_hidden]),
                Tensor::zeros(&[config.fusion.mlp_hidden]),
            )
        });
        let cls_w = Tensor::zeros(&[config.fused_width(), 2]);
        let cls_b = Tensor::zeros(&[2]);
        let plans = build_plans(&config);
        Ok(CriticModel {
            config,
            embedding,
            lstm,
            img_proj,
            mlp,
            cls_w,
            cls_b,
            vocab_fingerprint,
            plans,
        })
    }

    /// Parameters in the fixed serialization order: embedding, LSTM layers
    /// (w_x, w_h, bias each), image projection (w, b), fusion MLP (w, b),
    /// classifier (w, b).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("embedding".to_owned(), &self.embedding.weights)];
        for (l, layer) in self.lstm.layers.iter().enumerate() {
            out.push((format!("lstm{l}.w_x"), &layer.w_x));
            out.push((format!("lstm{l}.w_h"), &layer.w_h));
            out.push((format!("lstm{l}.bias"), &layer.bias));
        }
        if let Some((w, b)) = &self.img_proj {
            out.push(("img_proj.w".to_owned(), w));
            out.push(("img_proj.b".to_owned(), b));
        }
        if let Some((w, b)) = &self.mlp {
            out.push(("mlp.w".to_owned(), w));
            out.push(("mlp.b".to_owned(), b));
        }
        out.push(("cls.w".to_owned(), &self.cls_w));
        out.push(("cls.b".to_owned(), &self.cls_b));
        out
    }

    /// Same order as [`CriticModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding.weights];
        for layer in &mut self.lstm.layers {
            out.push(&mut layer.w_x);
            out.push(&mut layer.w_h);
            out.push(&mut layer.bias);
        }
        if let Some((w, b)) = &mut self.img_proj {
            out.push(w);
            out.push(b);
        }
        if let Some((w, b)) = &mut self.mlp {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Index of the embedding table's PAD row in the parameter list; the
    /// trainer zeroes its gradient so padding stays at exactly zero.
    pub fn pad_row(&self) -> (usize, usize) {
        (0, self.embedding.pad_id)
    }

    fn validate_caption(&self, cap: &Caption, what: &str) -> Result<()> {
        if cap.valid_len == 0 {
            return Err(Error::data(format!("{what} caption is empty")));
        }
        if cap.valid_len > cap.ids.len() {
            return Err(Error::data(format!(
                "{what} caption claims {} valid tokens but holds {}",
                cap.valid_len,
                cap.ids.len()
            )));
        }
        if let Some(&bad) = cap.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::data(format!(
                "{what} caption holds word id {bad}, outside the {}-entry vocabulary",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the batched forward pass up to the logits.
    pub fn forward_batch(&self, tape: &mut Tape, inputs: &[ScoreInput]) -> Result<ForwardPass> {
        if inputs.is_empty() {
            return Err(Error::data("forward pass needs at least one example"));
        }
        let mode = self.config.context_mode;
        for inp in inputs {
            if mode.uses_image() && inp.image.len() != self.config.d_img {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "image feature has dimension {}, model expects {}",
                        inp.image.len(),
                        self.config.d_img
                    ),
                ));
            }
            if mode.uses_caption() != inp.reference.is_some() {
                return Err(Error::config(format!(
                    "context mode {mode} and reference presence disagree"
                )));
            }
            if let Some(r) = inp.reference {
                self.validate_caption(r, "reference")?;
            }
            self.validate_caption(inp.candidate, "candidate")?;
        }

        // Leaves in params() order.
        let emb = tape.leaf(self.embedding.weights.clone());
        let mut param_ids = vec![emb];
        let mut layer_vars = Vec::with_capacity(self.lstm.layers.len());
        for layer in &self.lstm.layers {
            let w_x = tape.leaf(layer.w_x.clone());
            let w_h = tape.leaf(layer.w_h.clone());
            let bias = tape.leaf(layer.bias.clone());
            param_ids.extend([w_x, w_h, bias]);
            layer_vars.push(LstmLayerVars { w_x, w_h, bias });
        }
        let proj_vars = self.img_proj.as_ref().map(|(w, b)| {
            let w = tape.leaf(w.clone());
            let b = tape.leaf(b.clone());
            param_ids.extend([w, b]);
            (w, b)
        });
        let mlp_vars = self.mlp.as_ref().map(|(w, b)| {
            let w = tape.leaf(w.clone());
            let b = tape.leaf(b.clone());
            param_ids.extend([w, b]);
            MlpVars { w, b }
        });
        let cls_w = tape.leaf(self.cls_w.clone());
        let cls_b = tape.leaf(self.cls_b.clone());
        param_ids.extend([cls_w, cls_b]);

        let hidden = self.config.hidden;
        let cands: Vec<&Caption> = inputs.iter().map(|i| i.candidate).collect();
        let cand_enc = encode_sequence_batch(tape, emb, &layer_vars, hidden, &cands)?;
        let ref_enc = if mode.uses_caption() {
            let refs: Vec<&Caption> = inputs
                .iter()
                .map(|i| i.reference.expect("checked above"))
                .collect();
            Some(encode_sequence_batch(
                tape,
                emb,
                &layer_vars,
                hidden,
                &refs,
            )?)
        } else {
            None
        };
        let img_feats = if mode.uses_image() {
            let mut data = Vec::with_capacity(inputs.len() * self.config.d_img);
            for inp in inputs {
                data.extend_from_slice(inp.image);
            }
            Some(tape.leaf(Tensor::from_vec(&[inputs.len(), self.config.d_img], data)?))
        } else {
            None
        };
        let context = encode_context_batch(tape, mode, img_feats, proj_vars, ref_enc)?;
        let plans = self.plans.as_ref().map(|(a, b)| (a, b));
        let fused = fuse(
            tape,
            &self.config.fusion,
            context,
            cand_enc,
            mlp_vars,
            plans,
        )?;
        let z = tape.matmul(fused, cls_w)?;
        let logits = tape.add_bias(z, cls_b)?;
        Ok(ForwardPass { param_ids, logits })
    }

    /// Probability that `candidate` is human-written.
    pub fn score(
        &self,
        image: &[f64],
        reference: Option<&Caption>,
        candidate: &Caption,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(
            &mut tape,
            &[ScoreInput {
                image,
                reference,
                candidate,
            }],
        )?;
        let row = softmax_row(tape.value(fwd.logits).row(0));
        Ok(row[1])
    }

    /// Protocol score: the mean over every reference used as context. In
    /// modes whose context ignores the reference this collapses to one
    /// plain score.
    pub fn score_with_all_references(
        &self,
        image: &[f64],
        references: &[Caption],
        candidate: &Caption,
    ) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::data("scoring needs at least one reference caption"));
        }
        if !self.config.context_mode.uses_caption() {
            return self.score(image, None, candidate);
        }
        let inputs: Vec<ScoreInput> = references
            .iter()
            .map(|r| ScoreInput {
                image,
                reference: Some(r),
                candidate,
            })
            .collect();
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &inputs)?;
        let logits = tape.value(fwd.logits);
        let mut acc = 0.0;
        for r in 0..inputs.len() {
            acc += softmax_row(logits.row(r))[1];
        }
        Ok(acc / inputs.len() as f64)
    }

    /// Builds the mean cross-entropy loss graph; `labels[i]` is true when
    /// example `i` is human-written. Returns the loss node and the
    /// parameter leaves in [`CriticModel::params`] order.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        inputs: &[ScoreInput],
        labels: &[bool],
    ) -> Result<(VarId, Vec<VarId>)> {
        if labels.len() != inputs.len() {
            return Err(Error::data(format!(
                "{} examples but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let fwd = self.forward_batch(tape, inputs)?;
        let mut one_hot = Vec::with_capacity(labels.len() * 2);
        for &human in labels {
            one_hot.extend(if human { [0.0, 1.0] } else { [1.0, 0.0] });
        }
        let y = Tensor::from_vec(&[labels.len(), 2], one_hot)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &y)?;
        Ok((loss, fwd.param_ids))
    }

    /// Mean cross-entropy of a labeled batch.
    pub fn loss(&self, inputs: &[ScoreInput], labels: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.loss_graph(&mut tape, inputs, labels)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Binary model file: magic, u32 little-endian JSON header length, the
    /// header (config + vocabulary fingerprint), then every parameter as
    /// raw little-endian f64 in [`CriticModel::params`] order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SavedHeader {
            config: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::format(path, format!("encoding model header: {e}")))?;
        let mut buf = Vec::with_capacity(4 + 4 + json.len() + 8 * self.n_params());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in self.params() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CriticModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::format(path, "not a critic model file (bad magic)"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = 8 + header_len;
        if bytes.len() < body {
            return Err(Error::format(path, "truncated model header"));
        }
        let header: SavedHeader = serde_json::from_slice(&bytes[8..body])
            .map_err(|e| Error::format(path, format!("bad model header: {e}")))?;
        let mut model = CriticModel::with_shapes(header.config, header.vocab_fingerprint)?;
        let expected = model.n_params();
        let payload = &bytes[body..];
        if payload.len() != expected * 8 {
            return Err(Error::format(
                path,
                format!(
                    "parameter payload holds {} bytes, config implies {}",
                    payload.len(),
                    expected * 8
                ),
            ));
        }
        let mut off = 0;
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedHeader {
    config: CriticConfig,
    vocab_fingerprint: u64,
}
