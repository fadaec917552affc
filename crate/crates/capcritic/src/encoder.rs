//! Caption and context encoders.
//!
//! Captions are embedded word by word and run through an LSTM; the encoding
//! of a caption is the hidden state at its last valid token, so the PAD tail
//! never influences the result. One parameter set encodes both reference and
//! candidate captions. The context of an image is the concatenation, in
//! fixed `[image, reference]` order, of a linear projection of the image
//! feature and/or the encoded reference caption, as selected by
//! [`ContextMode`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::corpus::{Caption, Vocabulary};
use crate::error::{Error, Result};

/// What the critic sees next to the candidate caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    Image,
    Caption,
    ImageCaption,
}

impl ContextMode {
    pub fn uses_image(self) -> bool {
        matches!(self, ContextMode::Image | ContextMode::ImageCaption)
    }

    pub fn uses_caption(self) -> bool {
        matches!(self, ContextMode::Caption | ContextMode::ImageCaption)
    }

    pub const ALL: [ContextMode; 4] = [
        ContextMode::None,
        ContextMode::Image,
        ContextMode::Caption,
        ContextMode::ImageCaption,
    ];
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ContextMode> {
        match s {
            "none" => Ok(ContextMode::None),
            "image" => Ok(ContextMode::Image),
            "caption" => Ok(ContextMode::Caption),
            "image_caption" | "image+caption" => Ok(ContextMode::ImageCaption),
            other => Err(Error::config(format!(
                "unknown context mode {other:?} (expected none, image, caption or image_caption)"
            ))),
        }
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ContextMode::None => "none",
            ContextMode::Image => "image",
            ContextMode::Caption => "caption",
            ContextMode::ImageCaption => "image_caption",
        };
        f.write_str(s)
    }
}

/// Word embedding matrix, one row per vocabulary id. The PAD row is zero at
/// initialization and stays zero: the trainer masks its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub pad_id: usize,
}

impl EmbeddingTable {
    /// Random init, uniform(-0.05, 0.05), PAD row zeroed.
    pub fn init<R: rand::Rng>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> EmbeddingTable {
        let mut weights = Tensor::uniform(&[vocab.size(), dim], rng, -0.05, 0.05);
        let pad = vocab.pad_id();
        zero_row(&mut weights, pad, dim);
        EmbeddingTable {
            weights,
            pad_id: pad,
        }
    }

    /// Init from a pretrained word-vector table; vocabulary words absent
    /// from it (UNK included) get uniform(-0.05, 0.05), PAD is zeroed.
    pub fn with_pretrained<R: rand::Rng>(
        vocab: &Vocabulary,
        dim: usize,
        pretrained: &HashMap<String, Vec<f64>>,
        rng: &mut R,
    ) -> Result<EmbeddingTable> {
        let mut weights = Tensor::zeros(&[vocab.size(), dim]);
        for id in 0..vocab.size() {
            let word = vocab.word(id);
            let row = &mut weights.data_mut()[id * dim..(id + 1) * dim];
            match pretrained.get(word) {
                Some(v) => {
                    if v.len() != dim {
                        return Err(Error::config(format!(
                            "pretrained vector for {word:?} has dimension {}, expected {dim}",
                            v.len()
                        )));
                    }
                    row.copy_from_slice(v);
                }
                None => {
                    for x in row.iter_mut() {
                        *x = rng.gen_range(-0.05..0.05);
                    }
                }
            }
        }
        let pad = vocab.pad_id();
        zero_row(&mut weights, pad, dim);
        Ok(EmbeddingTable {
            weights,
            pad_id: pad,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

fn zero_row(t: &mut Tensor, row: usize, dim: usize) {
    for v in &mut t.data_mut()[row * dim..(row + 1) * dim] {
        *v = 0.0;
    }
}

/// Parses a word-vector text file: one entry per line, the word followed by
/// its space-separated components. All vectors must share one dimension.
pub fn load_embedding_file(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = HashMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let word = it.next().unwrap().to_owned();
        let vals: Vec<f64> = it
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("line {}: bad float {s:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if vals.is_empty() {
            return Err(Error::format(
                path,
                format!("line {}: no vector components", lineno + 1),
            ));
        }
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(Error::format(
                    path,
                    format!(
                        "line {}: vector has {} components, previous lines had {d}",
                        lineno + 1,
                        vals.len()
                    ),
                ));
            }
            _ => {}
        }
        table.insert(word, vals);
    }
    Ok(table)
}

/// One LSTM layer: input weights `[in, 4H]`, recurrent weights `[H, 4H]`
/// and bias `[4H]`, gate order `[input | forget | output | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    /// Weights uniform(-0.08, 0.08); biases zero except the forget gate,
    /// which starts at 1.0 so early training does not erase the cell state.
    pub fn init<R: rand::Rng>(
        input_dim: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<LstmParams> {
        if !(1..=3).contains(&n_layers) {
            return Err(Error::config(format!(
                "lstm layers must be 1..=3, got {n_layers}"
            )));
        }
        if input_dim == 0 || hidden == 0 {
            return Err(Error::config("lstm dimensions must be positive"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d_in = if l == 0 { input_dim } else { hidden };
            let w_x = Tensor::uniform(&[d_in, 4 * hidden], rng, -0.08, 0.08);
            let w_h = Tensor::uniform(&[hidden, 4 * hidden], rng, -0.08, 0.08);
            let mut bias = Tensor::zeros(&[4 * hidden]);
            for v in &mut bias.data_mut()[hidden..2 * hidden] {
                *v = 1.0;
            }
            layers.push(LstmLayer { w_x, w_h, bias });
        }
        Ok(LstmParams {
            layers,
            input_dim,
            hidden,
        })
    }
}

/// Tape handles for one LSTM layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerVars {
    pub w_x: VarId,
    pub w_h: VarId,
    pub bias: VarId,
}

/// One LSTM step over a batch: `x [B,in]`, `h`/`c` `[B,H]` to new `(h, c)`.
pub fn lstm_step(
    tape: &mut Tape,
    x: VarId,
    h: VarId,
    c: VarId,
    layer: &LstmLayerVars,
    hidden: usize,
) -> Result<(VarId, VarId)> {
    let zx = tape.matmul(x, layer.w_x)?;
    let zh = tape.matmul(h, layer.w_h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, layer.bias)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(z, hidden, hidden)?;
    let f = tape.sigmoid(f);
    let o = tape.slice_cols(z, 2 * hidden, hidden)?;
    let o = tape.sigmoid(o);
    let g = tape.slice_cols(z, 3 * hidden, hidden)?;
    let g = tape.tanh(g);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Encodes a batch of captions to `[B, H]`: embed each timestep, run the
/// stacked LSTM from a zero state, and read out the top-layer hidden state
/// at each caption's last valid position. Steps past the longest valid
/// length in the batch are skipped; no readout can depend on them.
pub fn encode_sequence_batch(
    tape: &mut Tape,
    emb: VarId,
    layers: &[LstmLayerVars],
    hidden: usize,
    captions: &[&Caption],
) -> Result<VarId> {
    if captions.is_empty() {
        return Err(Error::shape("encode_sequence", "empty batch"));
    }
    if layers.is_empty() {
        return Err(Error::shape("encode_sequence", "no lstm layers"));
    }
    let b = captions.len();
    let t_eff = captions.iter().map(|c| c.valid_len).max().unwrap();

    let zero = tape.leaf(Tensor::zeros(&[b, hidden]));
    let mut hs: Vec<VarId> = vec![zero; layers.len()];
    let mut cs: Vec<VarId> = vec![zero; layers.len()];
    let mut readout = zero;

    for t in 0..t_eff {
        let ids: Vec<usize> = captions.iter().map(|c| c.ids[t]).collect();
        let mut x = tape.embed_rows(emb, &ids)?;
        for (l, layer) in layers.iter().enumerate() {
            let (h_new, c_new) = lstm_step(tape, x, hs[l], cs[l], layer, hidden)?;
            hs[l] = h_new;
            cs[l] = c_new;
            x = h_new;
        }
        let mut mask = Tensor::zeros(&[b, hidden]);
        let mut any = false;
        for (r, cap) in captions.iter().enumerate() {
            if cap.valid_len == t + 1 {
                for v in &mut mask.data_mut()[r * hidden..(r + 1) * hidden] {
                    *v = 1.0;
                }
                any = true;
            }
        }
        if any {
            let mask = tape.leaf(mask);
            let top = *hs.last().unwrap();
            let sel = tape.mul(mask, top)?;
            readout = tape.add(readout, sel)?;
        }
    }
    Ok(readout)
}

/// Convenience single-caption encoding on a private tape; returns the `[H]`
/// vector.
pub fn encode_sequence(
    caption: &Caption,
    emb: &EmbeddingTable,
    params: &LstmParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let emb_id = tape.leaf(emb.weights.clone());
    let layer_vars: Vec<LstmLayerVars> = params
        .layers
        .iter()
        .map(|l| LstmLayerVars {
            w_x: tape.leaf(l.w_x.clone()),
            w_h: tape.leaf(l.w_h.clone()),
            bias: tape.leaf(l.bias.clone()),
        })
        .collect();
    let out = encode_sequence_batch(&mut tape, emb_id, &layer_vars, params.hidden, &[caption])?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

/// Builds the `[B, ctx]` context block for a batch, or `None` in mode
/// `none`. The image part is an affine projection of the feature vector;
/// the caption part is the already-encoded reference. Presence of each
/// input must match the mode exactly.
pub fn encode_context_batch(
    tape: &mut Tape,
    mode: ContextMode,
    image_feats: Option<VarId>,
    proj: Option<(VarId, VarId)>,
    ref_enc: Option<VarId>,
) -> Result<Option<VarId>> {
    if mode.uses_image() != image_feats.is_some() || mode.uses_image() != proj.is_some() {
        return Err(Error::config(format!(
            "context mode {mode} and image input presence disagree"
        )));
    }
    if mode.uses_caption() != ref_enc.is_some() {
        return Err(Error::config(format!(
            "context mode {mode} and reference input presence disagree"
        )));
    }
    let mut parts = Vec::new();
    if let (Some(feats), Some((w, b))) = (image_feats, proj) {
        let p = tape.matmul(feats, w)?;
        let p = tape.add_bias(p, b)?;
        parts.push(p);
    }
    if let Some(r) = ref_enc {
        parts.push(r);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.concat(&parts)?))
}

/// Width of the context block for a mode, given hidden size `h`.
pub fn context_width(mode: ContextMode, h: usize) -> usize {
    let mut w = 0;
    if mode.uses_image() {
        w += h;
    }
    if mode.uses_caption() {
        w += h;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::corpus::encode_caption;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let caps = vec!["a man riding a horse on a beach near a dog".to_owned()];
        Vocabulary::build(&caps, 100, 1).unwrap()
    }

    fn words(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_weights_and_state_give_zero_outputs() {
        // All-zero gates: i = f = o = 1/2, g = 0, so c' = 0 and h' = 0.
        let hidden = 3;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![0.7, -0.3]).unwrap());
        let h = tape.leaf(Tensor::zeros(&[1, hidden]));
        let c = tape.leaf(Tensor::zeros(&[1, hidden]));
        let layer = LstmLayerVars {
            w_x: tape.leaf(Tensor::zeros(&[2, 4 * hidden])),
            w_h: tape.leaf(Tensor::zeros(&[hidden, 4 * hidden])),
            bias: tape.leaf(Tensor::zeros(&[4 * hidden])),
        };
        let (h2, c2) = lstm_step(&mut tape, x, h, c, &layer, hidden).unwrap();
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_ranges_and_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::init(5, 4, 2, &mut rng).unwrap();
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[0].w_x.shape(), &[5, 16]);
        assert_eq!(p.layers[1].w_x.shape(), &[4, 16]);
        for l in &p.layers {
            assert!(l.w_x.data().iter().all(|v| v.abs() <= 0.08));
            assert!(l.w_h.data().iter().all(|v| v.abs() <= 0.08));
            assert_eq!(&l.bias.data()[4..8], &[1.0, 1.0, 1.0, 1.0]);
            assert!(l.bias.data()[..4].iter().all(|&v| v == 0.0));
            assert!(l.bias.data()[8..].iter().all(|&v| v == 0.0));
        }
        assert!(LstmParams::init(5, 4, 0, &mut rng).is_err());
        assert!(LstmParams::init(5, 4, 4, &mut rng).is_err());
    }

    #[test]
    fn embedding_init_zeroes_pad() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = EmbeddingTable::init(&v, 6, &mut rng);
        assert_eq!(emb.weights.shape(), &[v.size(), 6]);
        assert!(emb.weights.data().iter().all(|x| x.abs() <= 0.05));
        let pad = emb.pad_id;
        assert!(emb.weights.row(pad).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_caption_is_one_step_from_zero_state() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = EmbeddingTable::init(&v, 4, &mut rng);
        let params = LstmParams::init(4, 3, 1, &mut rng).unwrap();
        let cap = encode_caption(&words(&["man"]), &v, 10).unwrap();
        let enc = encode_sequence(&cap, &emb, &params).unwrap();

        let mut tape = Tape::new();
        let id = v.id_of("man").unwrap();
        let x = tape.leaf(Tensor::matrix(1, 4, emb.weights.row(id).to_vec()).unwrap());
        let h = tape.leaf(Tensor::zeros(&[1, 3]));
        let c = tape.leaf(Tensor::zeros(&[1, 3]));
        let layer = LstmLayerVars {
            w_x: tape.leaf(params.layers[0].w_x.clone()),
            w_h: tape.leaf(params.layers[0].w_h.clone()),
            bias: tape.leaf(params.layers[0].bias.clone()),
        };
        let (h1, _) = lstm_step(&mut tape, x, h, c, &layer, 3).unwrap();
        for (a, b) in enc.data().iter().zip(tape.value(h1).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn padding_depth_does_not_change_the_encoding() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Deliberately non-zero PAD row: the readout rule alone must protect
        // the encoding.
        let mut emb = EmbeddingTable::init(&v, 4, &mut rng);
        let pad = emb.pad_id;
        for x in &mut emb.weights.data_mut()[pad * 4..(pad + 1) * 4] {
            *x = 0.5;
        }
        let params = LstmParams::init(4, 3, 1, &mut rng).unwrap();
        let toks = words(&["a", "man", "riding"]);
        let short = encode_caption(&toks, &v, 5).unwrap();
        let long = encode_caption(&toks, &v, 15).unwrap();
        let e1 = encode_sequence(&short, &emb, &params).unwrap();
        let e2 = encode_sequence(&long, &emb, &params).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn multi_layer_encoding_differs_from_single() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let emb = EmbeddingTable::init(&v, 4, &mut rng);
        let p1 = LstmParams::init(4, 3, 1, &mut rng).unwrap();
        let mut p2 = LstmParams::init(4, 3, 2, &mut rng).unwrap();
        p2.layers[0] = p1.layers[0].clone();
        let cap = encode_caption(&words(&["a", "man"]), &v, 6).unwrap();
        let e1 = encode_sequence(&cap, &emb, &p1).unwrap();
        let e2 = encode_sequence(&cap, &emb, &p2).unwrap();
        assert_eq!(e1.numel(), e2.numel());
        assert_ne!(e1, e2);
    }

    #[test]
    fn context_widths_and_order() {
        let h = 3;
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        // Projection picks out recognizable values.
        let w = tape.leaf(Tensor::matrix(2, h, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0, 7.0]));
        let refenc = tape.leaf(Tensor::matrix(1, h, vec![9.0, 8.0, 7.5]).unwrap());
        let ctx = encode_context_batch(
            &mut tape,
            ContextMode::ImageCaption,
            Some(feats),
            Some((w, b)),
            Some(refenc),
        )
        .unwrap()
        .unwrap();
        assert_eq!(tape.value(ctx).shape(), &[1, 2 * h]);
        assert_eq!(tape.value(ctx).data(), &[1.0, 2.0, 7.0, 9.0, 8.0, 7.5]);
        assert_eq!(context_width(ContextMode::ImageCaption, 512), 1024);
    }

    #[test]
    fn context_mode_none_yields_no_context() {
        let mut tape = Tape::new();
        let ctx = encode_context_batch(&mut tape, ContextMode::None, None, None, None).unwrap();
        assert!(ctx.is_none());
    }

    #[test]
    fn context_presence_must_match_mode() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let err = encode_context_batch(&mut tape, ContextMode::None, Some(feats), None, None);
        assert!(err.is_err());
        let err = encode_context_batch(&mut tape, ContextMode::Image, None, None, None);
        assert!(err.is_err());
    }

    #[test]
    fn zero_feature_and_zero_bias_give_zero_image_context() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::zeros(&[1, 4]));
        let w = tape.leaf(Tensor::uniform(
            &[4, 3],
            &mut ChaCha8Rng::seed_from_u64(5),
            -1.0,
            1.0,
        ));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let ctx = encode_context_batch(
            &mut tape,
            ContextMode::Image,
            Some(feats),
            Some((w, b)),
            None,
        )
        .unwrap()
        .unwrap();
        assert!(tape.value(ctx).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = EmbeddingTable::init(&v, 3, &mut rng);
        let params = LstmParams::init(3, 2, 1, &mut rng).unwrap();
        let cap_a = encode_caption(&words(&["a", "man", "riding"]), &v, 5).unwrap();
        let cap_b = encode_caption(&words(&["horse"]), &v, 5).unwrap();
        let named = vec![
            ("emb".to_owned(), emb.weights.clone()),
            ("w_x".to_owned(), params.layers[0].w_x.clone()),
            ("w_h".to_owned(), params.layers[0].w_h.clone()),
            ("bias".to_owned(), params.layers[0].bias.clone()),
        ];
        let report = check_gradients(
            &named,
            |tape, ids| {
                let layer = LstmLayerVars {
                    w_x: ids[1],
                    w_h: ids[2],
                    bias: ids[3],
                };
                let enc = encode_sequence_batch(tape, ids[0], &[layer], 2, &[&cap_a, &cap_b])?;
                let sq = tape.mul(enc, enc)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
