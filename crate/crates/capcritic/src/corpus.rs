//! Captions, vocabularies, image features and dataset files.
//!
//! A [`Dataset`] ties together one vocabulary, one set of image feature
//! vectors and, per image, human reference captions plus zero or more
//! machine-generated captions keyed by generator name. Two file formats are
//! owned here: a JSON caption file and a little-endian binary feature file
//! (magic `CFV1`). Both round-trip exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stablehash::{derive_seed, fnv1a};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Captions are padded or truncated to this many tokens unless configured
/// otherwise.
pub const DEFAULT_T_MAX: usize = 15;

const FEATURE_MAGIC: &[u8; 4] = b"CFV1";

/// Lowercases, replaces every character outside `[a-z0-9']` with a space and
/// splits on whitespace. Empty pieces are dropped, so punctuation-only input
/// yields no tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Word-id table. Real words come first, ordered by corpus frequency
/// (descending, ties broken lexicographically), followed by the PAD and UNK
/// sentinels. A word's id is its line number in the saved file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw caption texts: tokenize, count, keep
    /// words with frequency >= `min_freq`, keep at most `max_vocab` of them.
    pub fn build(captions: &[String], max_vocab: usize, min_freq: usize) -> Result<Vocabulary> {
        if captions.is_empty() {
            return Err(Error::data("vocabulary build: empty caption corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in captions {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        kept.truncate(max_vocab);
        let words: Vec<String> = kept.into_iter().map(|(w, _)| w).collect();
        Ok(Vocabulary::from_real_words(words))
    }

    fn from_real_words(mut words: Vec<String>) -> Vocabulary {
        words.push(PAD_TOKEN.to_owned());
        words.push(UNK_TOKEN.to_owned());
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    /// Total size including the PAD and UNK sentinels.
    pub fn size(&self) -> usize {
        self.words.len()
    }

    /// Number of real words (excludes the two sentinels).
    pub fn n_real(&self) -> usize {
        self.words.len() - 2
    }

    pub fn pad_id(&self) -> usize {
        self.words.len() - 2
    }

    pub fn unk_id(&self) -> usize {
        self.words.len() - 1
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Stable fingerprint of the full word list; stored in model files so a
    /// model is never scored under a different vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        for w in &self.words {
            buf.extend_from_slice(w.as_bytes());
            buf.push(b'\n');
        }
        fnv1a(&buf)
    }

    /// One word per line; the line number is the word id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_owned).collect();
        if words.len() < 2 {
            return Err(Error::format(
                path,
                "vocabulary needs at least the PAD and UNK lines",
            ));
        }
        let n = words.len();
        if words[n - 2] != PAD_TOKEN || words[n - 1] != UNK_TOKEN {
            return Err(Error::format(
                path,
                format!("last two lines must be {PAD_TOKEN} and {UNK_TOKEN}"),
            ));
        }
        let mut seen = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::format(path, format!("empty word at line {}", i + 1)));
            }
            if let Some(first) = seen.insert(w.clone(), i) {
                return Err(Error::format(
                    path,
                    format!(
                        "duplicate word {:?} at lines {} and {}",
                        w,
                        first + 1,
                        i + 1
                    ),
                ));
            }
        }
        let index = seen;
        Ok(Vocabulary { words, index })
    }
}

/// A caption encoded under one vocabulary: `ids` always has length `t_max`,
/// the first `valid_len` entries are real tokens (OOV mapped to UNK) and the
/// tail is PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub raw: String,
    pub ids: Vec<usize>,
    pub valid_len: usize,
}

impl Caption {
    pub fn t_max(&self) -> usize {
        self.ids.len()
    }

    /// The non-PAD prefix.
    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.valid_len]
    }
}

/// Encodes a token sequence: truncate to `t_max`, map OOV to UNK, pad with
/// PAD. The empty token list is rejected because a caption with no content
/// has no defined encoder readout.
pub fn encode_caption(tokens: &[String], vocab: &Vocabulary, t_max: usize) -> Result<Caption> {
    if tokens.is_empty() {
        return Err(Error::data("encode: empty token list"));
    }
    if t_max == 0 {
        return Err(Error::config("encode: t_max must be at least 1"));
    }
    let valid_len = tokens.len().min(t_max);
    let mut ids = Vec::with_capacity(t_max);
    for tok in &tokens[..valid_len] {
        ids.push(vocab.id_of(tok).unwrap_or_else(|| vocab.unk_id()));
    }
    ids.resize(t_max, vocab.pad_id());
    Ok(Caption {
        raw: tokens.join(" "),
        ids,
        valid_len,
    })
}

/// Tokenizes raw text and encodes it, keeping the original text in `raw`.
pub fn encode_text(raw: &str, vocab: &Vocabulary, t_max: usize) -> Result<Caption> {
    let tokens = tokenize(raw);
    if tokens.is_empty() {
        return Err(Error::data(format!(
            "encode: caption {raw:?} has no tokens after normalization"
        )));
    }
    let mut cap = encode_caption(&tokens, vocab, t_max)?;
    cap.raw = raw.to_owned();
    Ok(cap)
}

/// Words of the valid prefix; UNK positions come back as the UNK sentinel.
pub fn decode(caption: &Caption, vocab: &Vocabulary) -> Vec<String> {
    caption
        .valid_ids()
        .iter()
        .map(|&id| vocab.word(id).to_owned())
        .collect()
}

/// Builds a caption directly from already-encoded ids, e.g. the output of a
/// caption transform. `raw` is reconstructed from the vocabulary.
pub fn caption_from_ids(ids: Vec<usize>, valid_len: usize, vocab: &Vocabulary) -> Caption {
    let raw = ids[..valid_len]
        .iter()
        .map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ");
    Caption {
        raw,
        ids,
        valid_len,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub image: ImageRecord,
    pub references: Vec<Caption>,
    /// Generated captions keyed by generator name; ordered map so iteration
    /// order never depends on hash state.
    pub generated: BTreeMap<String, Vec<Caption>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub vocab: Arc<Vocabulary>,
    pub t_max: usize,
}

impl Dataset {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map_or(0, |e| e.image.feature.len())
    }

    pub fn total_references(&self) -> usize {
        self.images.iter().map(|e| e.references.len()).sum()
    }

    /// Sorted list of generator names present anywhere in the dataset.
    pub fn generator_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .images
            .iter()
            .flat_map(|e| e.generated.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Splits by image id, preserving order. Both halves share the
    /// vocabulary.
    pub fn partition<F: Fn(&str) -> bool>(&self, pred: F) -> (Dataset, Dataset) {
        let (yes, no): (Vec<ImageEntry>, Vec<ImageEntry>) =
            self.images.iter().cloned().partition(|e| pred(&e.image.id));
        (
            Dataset {
                images: yes,
                vocab: Arc::clone(&self.vocab),
                t_max: self.t_max,
            },
            Dataset {
                images: no,
                vocab: Arc::clone(&self.vocab),
                t_max: self.t_max,
            },
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionRecord {
    image_id: String,
    references: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    generated: BTreeMap<String, Vec<String>>,
}

/// Longest tokenized caption (reference or generated) in a caption file;
/// the natural `t_max` for ingesting it.
pub fn scan_t_max(captions_path: &Path) -> Result<usize> {
    let text = fs::read_to_string(captions_path).map_err(|e| Error::io(captions_path, e))?;
    let records: Vec<CaptionRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(captions_path, e.to_string()))?;
    let longest = records
        .iter()
        .flat_map(|r| r.references.iter().chain(r.generated.values().flatten()))
        .map(|t| tokenize(t).len())
        .max()
        .unwrap_or(0);
    if longest == 0 {
        return Err(Error::data(format!(
            "{} holds no non-empty captions",
            captions_path.display()
        )));
    }
    Ok(longest)
}

/// Loads a caption JSON file and a feature file and joins them by image id.
/// Every captioned image must have a feature vector; every image needs at
/// least one reference.
pub fn load_dataset(
    captions_path: &Path,
    features_path: &Path,
    vocab: Arc<Vocabulary>,
    t_max: usize,
) -> Result<Dataset> {
    let text = fs::read_to_string(captions_path).map_err(|e| Error::io(captions_path, e))?;
    let records: Vec<CaptionRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(captions_path, e.to_string()))?;
    let (features, _dim) = read_features(features_path)?;
    let mut feature_map: HashMap<String, Vec<f64>> = HashMap::new();
    for (id, feat) in features {
        if feature_map.insert(id.clone(), feat).is_some() {
            return Err(Error::format(
                features_path,
                format!("duplicate feature record for image {id:?}"),
            ));
        }
    }

    let mut images = Vec::with_capacity(records.len());
    let mut seen_ids = HashMap::new();
    for rec in records {
        if seen_ids.insert(rec.image_id.clone(), ()).is_some() {
            return Err(Error::format(
                captions_path,
                format!("duplicate image id {:?}", rec.image_id),
            ));
        }
        if rec.references.is_empty() {
            return Err(Error::data(format!(
                "image {:?} has no reference captions",
                rec.image_id
            )));
        }
        let feature = feature_map.remove(&rec.image_id).ok_or_else(|| {
            Error::data(format!(
                "image {:?} has captions but no feature vector",
                rec.image_id
            ))
        })?;
        let encode_all = |texts: &[String]| -> Result<Vec<Caption>> {
            texts
                .iter()
                .map(|t| {
                    encode_text(t, &vocab, t_max)
                        .map_err(|e| Error::data(format!("image {:?}: {e}", rec.image_id)))
                })
                .collect()
        };
        let references = encode_all(&rec.references)?;
        let mut generated = BTreeMap::new();
        for (name, texts) in &rec.generated {
            generated.insert(name.clone(), encode_all(texts)?);
        }
        images.push(ImageEntry {
            image: ImageRecord {
                id: rec.image_id,
                feature,
            },
            references,
            generated,
        });
    }
    Ok(Dataset {
        images,
        vocab,
        t_max,
    })
}

/// Writes the caption JSON and feature file for a dataset. Raw caption text
/// is preserved, so loading the pair back reproduces the dataset.
pub fn write_dataset(ds: &Dataset, captions_path: &Path, features_path: &Path) -> Result<()> {
    let records: Vec<CaptionRecord> = ds
        .images
        .iter()
        .map(|e| CaptionRecord {
            image_id: e.image.id.clone(),
            references: e.references.iter().map(|c| c.raw.clone()).collect(),
            generated: e
                .generated
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|c| c.raw.clone()).collect()))
                .collect(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::format(captions_path, e.to_string()))?;
    fs::write(captions_path, json).map_err(|e| Error::io(captions_path, e))?;
    let feats: Vec<(&str, &[f64])> = ds
        .images
        .iter()
        .map(|e| (e.image.id.as_str(), e.image.feature.as_slice()))
        .collect();
    write_features(features_path, &feats)
}

/// Binary feature file: magic `CFV1`, u32 record count, u32 dimension, then
/// per record a u32 id length, the UTF-8 id and `dim` little-endian f32s.
pub fn write_features(path: &Path, records: &[(&str, &[f64])]) -> Result<()> {
    let dim = records.first().map_or(0, |(_, f)| f.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, feat) in records {
        if feat.len() != dim {
            return Err(Error::shape(
                "write_features",
                format!(
                    "image {id:?} has dimension {} but file dimension is {dim}",
                    feat.len()
                ),
            ));
        }
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for &v in *feat {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// An image id with its feature vector, as stored in a feature file.
pub type FeatureRecord = (String, Vec<f64>);

/// Reads a feature file, returning records in file order plus the dimension.
pub fn read_features(path: &Path) -> Result<(Vec<FeatureRecord>, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(
                path,
                format!("truncated feature file: expected {what} at offset {}", *pos),
            ));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, not a CFV1 feature file"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4, "record count")?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(&mut pos, 4, "dimension")?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id_len =
            u32::from_le_bytes(take(&mut pos, 4, "id length")?.try_into().unwrap()) as usize;
        let id_bytes = take(&mut pos, id_len, "image id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::format(path, format!("record {i}: image id is not UTF-8")))?
            .to_owned();
        let raw = take(&mut pos, 4 * dim, "feature values")?;
        let feat: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push((id, feat));
    }
    if pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after last record", bytes.len() - pos),
        ));
    }
    Ok((records, dim))
}

// --- synthetic data ---------------------------------------------------------

/// Standard normal via Box-Muller; `rand` 0.8 ships only uniform sampling.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Index draw with weights proportional to 1/(i+1); a crude frequency head
/// so the synthetic corpus has common and rare words.
fn zipf_idx(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    let total: f64 = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).sum();
    let mut r = rng.gen_range(0.0..total);
    for i in 0..n {
        let w = 1.0 / (i as f64 + 1.0);
        if r < w {
            return i;
        }
        r -= w;
    }
    n - 1
}

/// Deterministic synthetic caption dataset with latent topics.
///
/// Each image belongs to one of K topics. Its feature vector is a noisy copy
/// of the topic centroid, its five reference captions follow a
/// determiner/adjective/noun/verb template with topic-specific content
/// words, and its two captions under the built-in generator `synthgen` come
/// from a degraded distribution: adjectives dropped and nouns restricted to
/// the most frequent few, sampled flat. That word-frequency gap is the
/// signal a trained critic should find.
pub fn synth_dataset(
    seed: u64,
    n_images: usize,
    vocab_size: usize,
    d_img: usize,
) -> Result<Dataset> {
    if n_images < 2 {
        return Err(Error::config("synth_dataset: need at least 2 images"));
    }
    if vocab_size < 20 {
        return Err(Error::config(
            "synth_dataset: vocab_size must be at least 20",
        ));
    }
    if d_img == 0 {
        return Err(Error::config("synth_dataset: d_img must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth", 0));

    let dets = ["the", "a", "this", "that"];
    let verbs = ["is", "has", "shows", "holds", "sits", "rests"];
    let remaining = vocab_size - dets.len() - verbs.len();
    let k_topics = (remaining / 6).clamp(2, 8);
    let per_topic = remaining / k_topics;
    let n_adj = per_topic / 2;
    let n_noun = per_topic - n_adj;
    let topic_nouns: Vec<Vec<String>> = (0..k_topics)
        .map(|k| (0..n_noun).map(|j| format!("obj{k}x{j}")).collect())
        .collect();
    let topic_adjs: Vec<Vec<String>> = (0..k_topics)
        .map(|k| (0..n_adj).map(|j| format!("adj{k}x{j}")).collect())
        .collect();

    let centroids: Vec<Vec<f64>> = (0..k_topics)
        .map(|_| {
            let v: Vec<f64> = (0..d_img).map(|_| gauss(&mut rng)).collect();
            normalize(v)
        })
        .collect();

    struct RawImage {
        id: String,
        feature: Vec<f64>,
        refs: Vec<String>,
        gens: Vec<String>,
    }

    let mut raw_images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let topic = i % k_topics;
        let mut feature: Vec<f64> = centroids[topic]
            .iter()
            .map(|&c| c + 0.25 * gauss(&mut rng))
            .collect();
        feature = normalize(feature);
        // Features live on disk as f32; generate values that survive the
        // round trip unchanged.
        for v in &mut feature {
            *v = *v as f32 as f64;
        }

        let mut refs = Vec::with_capacity(5);
        for _ in 0..5 {
            let len = rng.gen_range(6..=10);
            let mut toks = Vec::with_capacity(len);
            for pos in 0..len {
                let w = match pos % 4 {
                    0 => dets[zipf_idx(&mut rng, dets.len())].to_owned(),
                    1 => topic_adjs[topic][zipf_idx(&mut rng, n_adj)].clone(),
                    2 => topic_nouns[topic][zipf_idx(&mut rng, n_noun)].clone(),
                    _ => verbs[zipf_idx(&mut rng, verbs.len())].to_owned(),
                };
                toks.push(w);
            }
            refs.push(toks.join(" "));
        }

        let head_nouns = n_noun.div_ceil(3);
        let mut gens = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = rng.gen_range(4..=7);
            let mut toks = Vec::with_capacity(len);
            for pos in 0..len {
                let w = match pos % 3 {
                    0 => dets[rng.gen_range(0..2)].to_owned(),
                    1 => topic_nouns[topic][rng.gen_range(0..head_nouns)].clone(),
                    _ => verbs[rng.gen_range(0..2)].to_owned(),
                };
                toks.push(w);
            }
            gens.push(toks.join(" "));
        }

        raw_images.push(RawImage {
            id: format!("img{i:04}"),
            feature,
            refs,
            gens,
        });
    }

    let all_refs: Vec<String> = raw_images
        .iter()
        .flat_map(|im| im.refs.iter().cloned())
        .collect();
    let vocab = Arc::new(Vocabulary::build(&all_refs, vocab_size, 1)?);

    let mut images = Vec::with_capacity(n_images);
    for im in raw_images {
        let references = im
            .refs
            .iter()
            .map(|t| encode_text(t, &vocab, DEFAULT_T_MAX))
            .collect::<Result<Vec<_>>>()?;
        let gens = im
            .gens
            .iter()
            .map(|t| encode_text(t, &vocab, DEFAULT_T_MAX))
            .collect::<Result<Vec<_>>>()?;
        let mut generated = BTreeMap::new();
        generated.insert("synthgen".to_owned(), gens);
        images.push(ImageEntry {
            image: ImageRecord {
                id: im.id,
                feature: im.feature,
            },
            references,
            generated,
        });
    }
    Ok(Dataset {
        images,
        vocab,
        t_max: DEFAULT_T_MAX,
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("A man, riding."), strs(&["a", "man", "riding"]));
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("don't STOP"), strs(&["don't", "stop"]));
        assert_eq!(tokenize("..!?"), Vec::<String>::new());
        assert_eq!(tokenize("caf\u{e9} 42"), strs(&["caf", "42"]));
    }

    #[test]
    fn vocab_min_freq_filters() {
        let v = Vocabulary::build(&strs(&["a a b", "a c"]), 10, 2).unwrap();
        assert_eq!(v.n_real(), 1);
        assert_eq!(v.id_of("a"), Some(0));
        assert_eq!(v.id_of("b"), None);
        assert_eq!(v.size(), 3);
        assert_eq!(v.pad_id(), 1);
        assert_eq!(v.unk_id(), 2);
        assert_ne!(v.pad_id(), v.unk_id());
    }

    #[test]
    fn vocab_single_word() {
        let v = Vocabulary::build(&strs(&["x"]), 10, 1).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.id_of("x"), Some(0));
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        // Eleven words, each with frequency 5; only ten fit.
        let words: Vec<String> = (0..11).map(|i| format!("w{i:02}")).collect();
        let caps: Vec<String> = (0..5).map(|_| words.join(" ")).collect();
        let v = Vocabulary::build(&caps, 10, 1).unwrap();
        assert_eq!(v.n_real(), 10);
        for w in &words[..10] {
            assert!(v.id_of(w).is_some(), "{w} should be kept");
        }
        assert_eq!(
            v.id_of("w10"),
            None,
            "lexicographically largest word dropped"
        );
    }

    #[test]
    fn vocab_orders_by_frequency_then_word() {
        let v = Vocabulary::build(&strs(&["b b b a a c"]), 10, 1).unwrap();
        assert_eq!(v.id_of("b"), Some(0));
        assert_eq!(v.id_of("a"), Some(1));
        assert_eq!(v.id_of("c"), Some(2));
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        assert!(Vocabulary::build(&[], 10, 1).is_err());
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&strs(&["b b b a a c"]), 10, 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(v.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn vocab_load_rejects_missing_sentinels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    fn test_vocab() -> Vocabulary {
        Vocabulary::build(&strs(&["a man riding a horse on a beach"]), 100, 1).unwrap()
    }

    #[test]
    fn encode_truncates_to_t_max() {
        let v = test_vocab();
        let toks: Vec<String> = (0..17).map(|_| "man".to_owned()).collect();
        let c = encode_caption(&toks, &v, 15).unwrap();
        assert_eq!(c.valid_len, 15);
        assert_eq!(c.ids.len(), 15);
        assert!(c.ids.iter().all(|&id| id == v.id_of("man").unwrap()));
    }

    #[test]
    fn encode_pads_short_captions() {
        let v = test_vocab();
        let c = encode_caption(&strs(&["a", "man", "riding"]), &v, 15).unwrap();
        assert_eq!(c.valid_len, 3);
        assert_eq!(c.ids.len(), 15);
        assert_eq!(c.ids[3..], vec![v.pad_id(); 12][..]);
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = test_vocab();
        let c = encode_caption(&strs(&["zebra"]), &v, 15).unwrap();
        assert_eq!(c.ids[0], v.unk_id());
    }

    #[test]
    fn encode_empty_errors() {
        let v = test_vocab();
        assert!(encode_caption(&[], &v, 15).is_err());
        assert!(encode_text("!!!", &v, 15).is_err());
    }

    #[test]
    fn decode_inverts_encode_up_to_unk() {
        let v = test_vocab();
        let c = encode_caption(&strs(&["a", "zebra", "riding"]), &v, 15).unwrap();
        assert_eq!(decode(&c, &v), strs(&["a", "<unk>", "riding"]));
    }

    #[test]
    fn feature_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let a = vec![1.0f64, -0.5, 0.25];
        let b = vec![0.0f64, 2.0, -3.5];
        write_features(&path, &[("img0", &a), ("img1", &b)]).unwrap();
        let (recs, dim) = read_features(&path).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0], ("img0".to_owned(), a));
        assert_eq!(recs[1], ("img1".to_owned(), b));
    }

    #[test]
    fn feature_file_truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let a = vec![1.0f64, 2.0];
        write_features(&path, &[("img0", &a)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn feature_file_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        fs::write(&path, b"NOPE\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_features(&path).is_err());
    }

    fn tiny_dataset() -> Dataset {
        let vocab = Arc::new(
            Vocabulary::build(&strs(&["a man riding a horse", "a dog on a beach"]), 100, 1)
                .unwrap(),
        );
        let mk = |raw: &str| encode_text(raw, &vocab, 15).unwrap();
        let mut generated = BTreeMap::new();
        generated.insert("genA".to_owned(), vec![mk("a dog")]);
        Dataset {
            images: vec![
                ImageEntry {
                    image: ImageRecord {
                        id: "i0".into(),
                        feature: vec![1.0, 0.0],
                    },
                    references: vec![mk("a man riding a horse"), mk("a man on a horse")],
                    generated,
                },
                ImageEntry {
                    image: ImageRecord {
                        id: "i1".into(),
                        feature: vec![0.0, 1.0],
                    },
                    references: vec![mk("a dog on a beach")],
                    generated: BTreeMap::new(),
                },
            ],
            vocab,
            t_max: 15,
        }
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let caps = dir.path().join("captions.json");
        let feats = dir.path().join("features.bin");
        let ds = tiny_dataset();
        write_dataset(&ds, &caps, &feats).unwrap();
        let loaded = load_dataset(&caps, &feats, Arc::clone(&ds.vocab), ds.t_max).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn dataset_missing_feature_names_image() {
        let dir = tempfile::tempdir().unwrap();
        let caps = dir.path().join("captions.json");
        let feats = dir.path().join("features.bin");
        let ds = tiny_dataset();
        write_dataset(&ds, &caps, &feats).unwrap();
        let a = vec![1.0f64, 0.0];
        write_features(&feats, &[("i0", &a)]).unwrap();
        let err = load_dataset(&caps, &feats, Arc::clone(&ds.vocab), 15).unwrap_err();
        assert!(err.to_string().contains("i1"), "{err}");
    }

    #[test]
    fn dataset_missing_field_errors() {
        let dir = tempfile::tempdir().unwrap();
        let caps = dir.path().join("captions.json");
        let feats = dir.path().join("features.bin");
        fs::write(&caps, r#"[{"image_id": "i0"}]"#).unwrap();
        let a = vec![1.0f64];
        write_features(&feats, &[("i0", &a)]).unwrap();
        let vocab = Arc::new(Vocabulary::build(&strs(&["a"]), 10, 1).unwrap());
        let err = load_dataset(&caps, &feats, vocab, 15).unwrap_err();
        assert!(err.to_string().contains("references"), "{err}");
    }

    #[test]
    fn dataset_empty_references_error() {
        let dir = tempfile::tempdir().unwrap();
        let caps = dir.path().join("captions.json");
        let feats = dir.path().join("features.bin");
        fs::write(&caps, r#"[{"image_id": "i0", "references": []}]"#).unwrap();
        let a = vec![1.0f64];
        write_features(&feats, &[("i0", &a)]).unwrap();
        let vocab = Arc::new(Vocabulary::build(&strs(&["a"]), 10, 1).unwrap());
        assert!(load_dataset(&caps, &feats, vocab, 15).is_err());
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_dataset(7, 10, 30, 8).unwrap();
        let b = synth_dataset(7, 10, 30, 8).unwrap();
        let c = synth_dataset(8, 10, 30, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synth_shape_invariants() {
        let ds = synth_dataset(3, 12, 40, 16).unwrap();
        assert_eq!(ds.n_images(), 12);
        assert!(ds.vocab.size() <= 40 + 2);
        for e in &ds.images {
            assert_eq!(e.references.len(), 5);
            assert_eq!(e.image.feature.len(), 16);
            let gens = &e.generated["synthgen"];
            assert!(!gens.is_empty());
            // Written features are f32; in-memory values must already be
            // exactly representable so the file round trip is lossless.
            for &v in &e.image.feature {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }

    #[test]
    fn synth_preconditions() {
        assert!(synth_dataset(1, 1, 30, 8).is_err());
        assert!(synth_dataset(1, 10, 19, 8).is_err());
        assert!(synth_dataset(1, 10, 30, 0).is_err());
    }

    #[test]
    fn synth_generated_word_distribution_differs() {
        let ds = synth_dataset(11, 40, 60, 16).unwrap();
        let mut ref_counts: HashMap<usize, f64> = HashMap::new();
        let mut gen_counts: HashMap<usize, f64> = HashMap::new();
        let mut n_ref = 0.0;
        let mut n_gen = 0.0;
        for e in &ds.images {
            for c in &e.references {
                for &id in c.valid_ids() {
                    *ref_counts.entry(id).or_insert(0.0) += 1.0;
                    n_ref += 1.0;
                }
            }
            for c in &e.generated["synthgen"] {
                for &id in c.valid_ids() {
                    *gen_counts.entry(id).or_insert(0.0) += 1.0;
                    n_gen += 1.0;
                }
            }
        }
        // Chi-squared of generated counts against reference proportions.
        let mut chi2 = 0.0;
        for (id, rc) in &ref_counts {
            let expected = rc / n_ref * n_gen;
            let observed = gen_counts.get(id).copied().unwrap_or(0.0);
            chi2 += (observed - expected).powi(2) / expected;
        }
        assert!(chi2 > 0.0, "chi2 = {chi2}");
        // Total variation distance between the unigram profiles.
        let mut tv = 0.0;
        for id in 0..ds.vocab.size() {
            let p = ref_counts.get(&id).copied().unwrap_or(0.0) / n_ref;
            let q = gen_counts.get(&id).copied().unwrap_or(0.0) / n_gen;
            tv += (p - q).abs();
        }
        tv /= 2.0;
        assert!(tv >= 0.05, "tv = {tv}");
    }
}
