//! Definition-text encoder: whitespace/punctuation tokenizer with a fixed
//! subword table built from catalog texts, a small bidirectional
//! transformer, and mean pooling down to a d-vector.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{add_positional, Embedding, EncoderLayer, EncoderLayerCache};
use crate::catalog::AbnormalityCatalog;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const UNK: u32 = 0;
pub const SEP: u32 = 1;

/// Fixed token table: word-level entries built from catalog texts, with a
/// single-character fallback for unseen words. "[SEP]" is its own token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: std::collections::HashMap<String, u32>,
}

fn word_split(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, chunk) in text.split("[SEP]").enumerate() {
        if i > 0 {
            tokens.push("[SEP]".to_string());
        }
        tokens.extend(crate::catalog::word_tokens(chunk));
    }
    tokens
}

impl Vocab {
    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// Build from arbitrary source texts, capped to `cap` entries. Words
    /// are kept by descending frequency; single characters are always
    /// included as the subword fallback.
    pub fn build(texts: &[String], cap: usize) -> Vocab {
        let mut counts: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
        let mut chars: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in texts {
            for word in word_split(text) {
                if word == "[SEP]" {
                    continue;
                }
                for ch in word.chars() {
                    chars.insert(format!("#{ch}"));
                }
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut tokens = vec!["[UNK]".to_string(), "[SEP]".to_string()];
        tokens.extend(chars);
        let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (word, _) in by_freq {
            if tokens.len() >= cap {
                break;
            }
            tokens.push(word);
        }
        let mut vocab = Vocab {
            tokens,
            index: Default::default(),
        };
        vocab.rebuild_index();
        vocab
    }

    /// Vocabulary sourced from every text the catalog carries (names,
    /// synonyms, definitions, description banks) plus the fixed strings
    /// the pipeline can emit.
    pub fn from_catalog(catalog: &AbnormalityCatalog, cap: usize) -> Vocab {
        let mut texts: Vec<String> = vec!["normal".into(), "normal study".into()];
        for e in &catalog.entities {
            texts.push(e.canonical_name.clone());
            texts.push(e.definition_text.clone());
            texts.extend(e.synonyms.iter().cloned());
            texts.extend(e.description_bank.iter().cloned());
        }
        Vocab::build(&texts, cap)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Encode text to token ids: known words directly, unknown words as
    /// their character fallback (unknown characters become [UNK]).
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in word_split(text) {
            if let Some(&id) = self.index.get(&word) {
                ids.push(id);
            } else if word == "[SEP]" {
                ids.push(SEP);
            } else {
                for ch in word.chars() {
                    ids.push(self.index.get(&format!("#{ch}")).copied().unwrap_or(UNK));
                }
            }
            if ids.len() >= max_len {
                break;
            }
        }
        ids.truncate(max_len);
        ids
    }

    pub(crate) fn restore_index(&mut self) {
        if self.index.is_empty() {
            self.rebuild_index();
        }
    }
}

/// Bidirectional transformer over token embeddings with mean pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub positional: bool,
    pub max_len: usize,
}

pub struct TextCache {
    ids: Vec<u32>,
    layer_caches: Vec<EncoderLayerCache>,
    n_tokens: usize,
}

impl TextEncoder {
    pub fn new(
        vocab_size: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ff: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TextEncoder {
            embedding: Embedding::new(vocab_size, d, rng),
            layers: (0..layers).map(|_| EncoderLayer::new(d, heads, ff, rng)).collect(),
            positional: true,
            max_len,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.embedding.params();
        for l in &self.layers {
            out.extend(l.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.embedding.params_mut();
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.embedding.param_names(&format!("{prefix}.embedding"));
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.param_names(&format!("{prefix}.layer{i}")));
        }
        out
    }

    /// Encode token ids to a pooled d-vector.
    pub fn forward(&self, ids: &[u32]) -> Result<(Tensor, TextCache)> {
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut x = self.embedding.forward(ids);
        if self.positional {
            add_positional(&mut x);
        }
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = y;
        }
        let (n, d) = (x.rows(), x.cols());
        let mut pooled = Tensor::zeros(&[1, d]);
        for r in 0..n {
            for (p, v) in pooled.row_mut(0).iter_mut().zip(x.row(r)) {
                *p += v / n as f64;
            }
        }
        Ok((
            pooled,
            TextCache {
                ids: ids.to_vec(),
                layer_caches,
                n_tokens: n,
            },
        ))
    }

    /// Backward from the pooled-vector gradient `[1, d]`.
    pub fn backward(&self, cache: &TextCache, dpooled: &Tensor, grads: &mut TextEncoder) {
        let d = dpooled.cols();
        let n = cache.n_tokens;
        let mut dx = Tensor::zeros(&[n, d]);
        for r in 0..n {
            for (dv, g) in dx.row_mut(r).iter_mut().zip(dpooled.row(0)) {
                *dv = g / n as f64;
            }
        }
        for i in (0..self.layers.len()).rev() {
            dx = self.layers[i].backward(&cache.layer_caches[i], &dx, &mut grads.layers[i]);
        }
        // Positional encoding is additive, gradient passes through.
        self.embedding.backward(&cache.ids, &dx, &mut grads.embedding);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_vocab() -> Vocab {
        Vocab::build(
            &[
                "ventricular septal defect is a hole in the septum".to_string(),
                "normal study [SEP] shunt".to_string(),
            ],
            256,
        )
    }

    #[test]
    fn encode_known_and_fallback() {
        let v = small_vocab();
        let ids = v.encode("septal defect", 16);
        assert_eq!(ids.len(), 2);
        assert!(ids.iter().all(|&i| i > SEP));
        // Unknown word falls back to characters.
        let ids = v.encode("zzz", 16);
        assert_eq!(ids.len(), 3);
        let ids = v.encode("shunt [SEP] normal", 16);
        assert_eq!(ids[1], SEP);
    }

    #[test]
    fn deterministic_and_distinct_embeddings() {
        let v = small_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(v.len(), 16, 2, 2, 32, 32, &mut rng);
        let a = enc.forward(&v.encode("septal defect", 32)).unwrap().0;
        let b = enc.forward(&v.encode("septal defect", 32)).unwrap().0;
        assert_eq!(a, b);
        let c = enc.forward(&v.encode("normal study", 32)).unwrap().0;
        let cos = crate::tensor::dot(a.row(0), c.row(0))
            / (a.sq_norm().sqrt() * c.sq_norm().sqrt());
        assert!(cos < 1.0 - 1e-6, "cos {cos}");
    }

    #[test]
    fn token_order_matters_with_positional_encoding() {
        let v = small_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(v.len(), 16, 2, 2, 32, 32, &mut rng);
        let ab = enc.forward(&v.encode("septal defect", 32)).unwrap().0;
        let ba = enc.forward(&v.encode("defect septal", 32)).unwrap().0;
        assert_ne!(ab, ba);
    }

    #[test]
    fn empty_text_errors() {
        let v = small_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(v.len(), 16, 1, 2, 32, 32, &mut rng);
        assert!(matches!(enc.forward(&[]), Err(Error::EmptyText)));
    }
}
