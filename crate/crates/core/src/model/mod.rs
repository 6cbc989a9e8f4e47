//! The knowledge-aware query-based transformer.
//!
//! Definition texts are encoded into query vectors; filter-bank features
//! are encoded into an audio feature map; queries cross-attend to the
//! audio and a linear head turns each query's output into a per-class
//! logit. Training combines multi-label BCE with a symmetric contrastive
//! loss between pooled audio and the per-sample semantic description,
//! weighted by a learnable scalar.

pub mod audio;
pub mod checkpoint;
pub mod decoder;
pub mod loss;
pub mod nn;
pub mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audio::AudioEncoder;
pub use decoder::QueryDecoder;
pub use loss::{bce_loss, contrastive_loss, sigmoid, total_loss, LossBreakdown};
pub use nn::Linear;
pub use text::{TextEncoder, Vocab};

use crate::audiofeat::FilterBankFeatures;
use crate::catalog::LabelVector;
use crate::parallel::Execution;
use crate::tensor::Tensor;
use crate::util::derive_seed;
use crate::Result;

/// Architecture and loss hyperparameters. The checkpoint embeds this, so
/// a saved model is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub max_text_len: usize,
    pub vocab_cap: usize,
    pub mel_bins: usize,
    pub audio_channels: Vec<usize>,
    pub audio_time_stride: usize,
    pub audio_positional: bool,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    /// Dependent-variant switch: queries attend to each other when set.
    pub query_self_attention: bool,
    pub tau: f64,
    pub init_seed: u64,
    /// Ablation hooks: reseed one encoder's initialization independently.
    pub text_init_seed: Option<u64>,
    pub audio_init_seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 256,
            text_layers: 2,
            text_heads: 4,
            text_ff: 1024,
            max_text_len: 64,
            vocab_cap: 8192,
            mel_bins: 64,
            audio_channels: vec![8, 16, 32, 32],
            audio_time_stride: 2,
            audio_positional: true,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_ff: 1024,
            query_self_attention: false,
            tau: 0.07,
            init_seed: 0,
            text_init_seed: None,
            audio_init_seed: None,
        }
    }
}

impl ModelConfig {
    /// Compact preset for laptop-scale experiments and tests.
    pub fn compact(d: usize, mel_bins: usize) -> Self {
        ModelConfig {
            d,
            text_ff: 2 * d,
            decoder_ff: 2 * d,
            mel_bins,
            audio_channels: vec![4, 8, 16, 16],
            vocab_cap: 4096,
            ..ModelConfig::default()
        }
    }

    pub fn total_time_stride(&self) -> usize {
        self.audio_time_stride.pow(self.audio_channels.len() as u32)
    }
}

/// Every learnable tensor of the model. A gradient of a `ModelParams` is
/// another `ModelParams` with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub text: TextEncoder,
    pub audio: AudioEncoder,
    pub decoder: QueryDecoder,
    pub head: Linear,
    pub lambda: Tensor,
}

impl ModelParams {
    pub fn new(config: &ModelConfig, vocab_size: usize) -> Self {
        let mut text_rng = ChaCha8Rng::seed_from_u64(
            config.text_init_seed.unwrap_or(derive_seed(config.init_seed, 1)),
        );
        let mut audio_rng = ChaCha8Rng::seed_from_u64(
            config.audio_init_seed.unwrap_or(derive_seed(config.init_seed, 2)),
        );
        let mut decoder_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.init_seed, 3));
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.init_seed, 4));
        ModelParams {
            text: TextEncoder::new(
                vocab_size,
                config.d,
                config.text_layers,
                config.text_heads,
                config.text_ff,
                config.max_text_len,
                &mut text_rng,
            ),
            audio: AudioEncoder::new(
                config.mel_bins,
                &config.audio_channels,
                config.audio_time_stride,
                config.d,
                config.audio_positional,
                &mut audio_rng,
            ),
            decoder: QueryDecoder::new(
                config.d,
                config.decoder_layers,
                config.decoder_heads,
                config.decoder_ff,
                config.query_self_attention,
                &mut decoder_rng,
            ),
            head: Linear::new(1, config.d, &mut head_rng),
            lambda: Tensor::scalar(1.0),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.text.params();
        out.extend(self.audio.params());
        out.extend(self.decoder.params());
        out.extend(self.head.params());
        out.push(&self.lambda);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.text.params_mut();
        out.extend(self.audio.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend(self.head.params_mut());
        out.push(&mut self.lambda);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.text.param_names("text");
        out.extend(self.audio.param_names("audio"));
        out.extend(self.decoder.param_names("decoder"));
        out.extend(self.head.param_names("head"));
        out.push("lambda".to_string());
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut copy = self.clone();
        copy.params_mut().into_iter().for_each(|t| t.zero());
        copy
    }

    pub fn accumulate(&mut self, other: &ModelParams) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().into_iter().all(|t| t.all_finite())
    }

    pub fn lambda_value(&self) -> f64 {
        self.lambda.item()
    }

    /// Norm per top-level group, for abort diagnostics.
    pub fn group_norms(&self) -> String {
        let group = |ps: Vec<&Tensor>| ps.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        format!(
            "text={:.3e} audio={:.3e} decoder={:.3e} head={:.3e} lambda={:.3e}",
            group(self.text.params()),
            group(self.audio.params()),
            group(self.decoder.params()),
            group(self.head.params()),
            group(vec![&self.lambda]),
        )
    }
}

/// Config + vocabulary + parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

/// One training batch: per-sample features (already augmented), targets,
/// and the semantic description text used as the contrastive anchor.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub features: Vec<FilterBankFeatures>,
    pub labels: Vec<LabelVector>,
    pub descriptions: Vec<String>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Self {
        let params = ModelParams::new(&config, vocab.len());
        Model {
            config,
            vocab,
            params,
        }
    }

    /// Encode a text into a d-vector (tokenize, transform, mean-pool).
    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        let ids = self.vocab.encode(text, self.config.max_text_len);
        let (pooled, _) = self.params.text.forward(&ids)?;
        Ok(pooled)
    }

    /// Encode filter banks into the audio feature map `[x_h, d]`.
    pub fn encode_audio(&self, features: &FilterBankFeatures) -> Result<Tensor> {
        let (h, _) = self.params.audio.forward(features)?;
        Ok(h)
    }

    /// Stack per-query embeddings into the decoder input `[k, d]`.
    pub fn stack_queries(queries: &[Tensor]) -> Tensor {
        assert!(!queries.is_empty(), "at least one query");
        let d = queries[0].cols();
        let mut q = Tensor::zeros(&[queries.len(), d]);
        for (r, t) in queries.iter().enumerate() {
            q.row_mut(r).copy_from_slice(t.row(0));
        }
        q
    }

    /// Per-query logits for an encoded audio map.
    pub fn query_decode(&self, h: &Tensor, queries: &[Tensor]) -> Vec<f64> {
        let q = Self::stack_queries(queries);
        let (dec_out, _) = self.params.decoder.forward(&q, h);
        let logits = self.params.head.forward(&dec_out);
        logits.data().to_vec()
    }

    /// Sigmoid probabilities for an encoded audio map.
    pub fn query_predict(&self, h: &Tensor, queries: &[Tensor]) -> Vec<f64> {
        self.query_decode(h, queries).into_iter().map(sigmoid).collect()
    }

    fn encode_query_texts(
        &self,
        texts: &[String],
    ) -> Result<Vec<(Tensor, text::TextCache)>> {
        texts
            .iter()
            .map(|t| {
                let ids = self.vocab.encode(t, self.config.max_text_len);
                let (pooled, cache) = self.params.text.forward(&ids)?;
                Ok((pooled, cache))
            })
            .collect()
    }

    /// Forward-only loss on a batch; the reference for gradient checks.
    /// With `with_contrastive = false` the contrastive term reports 0 and
    /// the total reduces to the BCE term.
    pub fn training_loss(
        &self,
        query_texts: &[String],
        batch: &TrainBatch,
        with_contrastive: bool,
    ) -> Result<LossBreakdown> {
        let encoded = self.encode_query_texts(query_texts)?;
        let queries: Vec<Tensor> = encoded.iter().map(|(p, _)| p.clone()).collect();
        let q = Self::stack_queries(&queries);
        let n = batch.features.len();
        let k = query_texts.len();
        let mut logits = Tensor::zeros(&[n, k]);
        let mut pooled = Vec::with_capacity(n);
        let mut r_texts = Vec::with_capacity(n);
        for i in 0..n {
            let (h, _) = self.params.audio.forward(&batch.features[i])?;
            let (dec_out, _) = self.params.decoder.forward(&q, &h);
            let l = self.params.head.forward(&dec_out);
            logits.row_mut(i).copy_from_slice(l.data());
            pooled.push(mean_rows(&h));
            let ids = self.vocab.encode(&batch.descriptions[i], self.config.max_text_len);
            let (r, _) = self.params.text.forward(&ids)?;
            r_texts.push(r.row(0).to_vec());
        }
        let labels = labels_tensor(&batch.labels, k);
        let (bce, _) = loss::bce_from_logits(&logits, &labels)?;
        let con = if with_contrastive {
            loss::contrastive_core(&pooled, &r_texts, self.config.tau)?.0
        } else {
            0.0
        };
        let lambda = if with_contrastive {
            self.params.lambda_value()
        } else {
            0.0
        };
        Ok(total_loss(bce, con, lambda, self.config.tau))
    }

    /// Full training step math: forward, both losses, and gradients for
    /// every parameter (including the loss weight). Per-sample work is
    /// data-parallel; reduction order is fixed, so results are identical
    /// across thread counts.
    pub fn training_grads(
        &self,
        query_texts: &[String],
        batch: &TrainBatch,
        execution: Execution,
        with_contrastive: bool,
    ) -> Result<(LossBreakdown, ModelParams)> {
        let n = batch.features.len();
        let k = query_texts.len();
        assert!(n > 0 && k > 0, "non-empty batch and query set");

        let encoded = self.encode_query_texts(query_texts)?;
        let queries: Vec<Tensor> = encoded.iter().map(|(p, _)| p.clone()).collect();
        let q = Self::stack_queries(&queries);

        struct SampleForward {
            audio_cache: audio::AudioCache,
            dec_cache: decoder::DecoderCache,
            h: Tensor,
            logits: Vec<f64>,
            pooled: Vec<f64>,
            r_cache: Option<text::TextCache>,
            r: Vec<f64>,
        }

        let forwards: Vec<Result<SampleForward>> = execution.map(n, |i| {
            let (h, audio_cache) = self.params.audio.forward(&batch.features[i])?;
            let (dec_out, dec_cache) = self.params.decoder.forward(&q, &h);
            let logits = self.params.head.forward(&dec_out);
            let (r, r_cache) = if with_contrastive {
                let r_ids = self
                    .vocab
                    .encode(&batch.descriptions[i], self.config.max_text_len);
                let (r, cache) = self.params.text.forward(&r_ids)?;
                (r.row(0).to_vec(), Some(cache))
            } else {
                (Vec::new(), None)
            };
            Ok(SampleForward {
                audio_cache,
                dec_cache,
                pooled: mean_rows(&h),
                h,
                logits: logits.data().to_vec(),
                r,
                r_cache,
            })
        });
        let forwards: Vec<SampleForward> = forwards.into_iter().collect::<Result<_>>()?;

        let mut logits = Tensor::zeros(&[n, k]);
        for (i, f) in forwards.iter().enumerate() {
            logits.row_mut(i).copy_from_slice(&f.logits);
        }
        let labels = labels_tensor(&batch.labels, k);
        let (bce, dlogits) = loss::bce_from_logits(&logits, &labels)?;
        let (con, dpooled, dr, lambda) = if with_contrastive {
            let pooled: Vec<Vec<f64>> = forwards.iter().map(|f| f.pooled.clone()).collect();
            let r_texts: Vec<Vec<f64>> = forwards.iter().map(|f| f.r.clone()).collect();
            let (con, dpooled, dr) = loss::contrastive_core(&pooled, &r_texts, self.config.tau)?;
            (con, dpooled, dr, self.params.lambda_value())
        } else {
            (0.0, Vec::new(), Vec::new(), 0.0)
        };
        let breakdown = total_loss(bce, con, lambda, self.config.tau);

        // Per-sample backward; dqueries accumulate across samples.
        let per_sample: Vec<(ModelParams, Tensor)> = execution.map(n, |i| {
            let f = &forwards[i];
            let mut grads = self.params.zeros_like();
            let dlogit = Tensor::from_vec(&[k, 1], dlogits.row(i).to_vec());
            let ddec_out = self
                .params
                .head
                .backward(&f.dec_cache.output, &dlogit, &mut grads.head);
            let (dq, mut dh) =
                self.params
                    .decoder
                    .backward(&f.dec_cache, &f.h, &ddec_out, &mut grads.decoder);
            if with_contrastive {
                // Mean-pool backward from the contrastive term, scaled
                // by lambda.
                let rows = f.h.rows() as f64;
                for r in 0..f.h.rows() {
                    for (dv, g) in dh.row_mut(r).iter_mut().zip(&dpooled[i]) {
                        *dv += lambda * g / rows;
                    }
                }
            }
            self.params
                .audio
                .backward(&f.audio_cache, &dh, &mut grads.audio);
            if let Some(r_cache) = &f.r_cache {
                let mut dr_i = Tensor::from_vec(&[1, dr[i].len()], dr[i].clone());
                dr_i.scale(lambda);
                self.params.text.backward(r_cache, &dr_i, &mut grads.text);
            }
            (grads, dq)
        });

        let mut grads = self.params.zeros_like();
        let d = self.config.d;
        let mut dqueries = Tensor::zeros(&[k, d]);
        for (g, dq) in &per_sample {
            grads.accumulate(g);
            dqueries.add_assign(dq);
        }

        // Backward through the text encoder for each definition query.
        let query_grads: Vec<TextEncoder> = execution.map(k, |j| {
            let mut tg = zeroed_text(&self.params.text);
            let dq_j = Tensor::from_vec(&[1, d], dqueries.row(j).to_vec());
            self.params.text.backward(&encoded[j].1, &dq_j, &mut tg);
            tg
        });
        for tg in &query_grads {
            for (a, b) in grads.text.params_mut().into_iter().zip(tg.params()) {
                a.add_assign(b);
            }
        }

        grads.lambda.data_mut()[0] = con;
        Ok((breakdown, grads))
    }
}

fn zeroed_text(text: &TextEncoder) -> TextEncoder {
    let mut tg = text.clone();
    tg.params_mut().into_iter().for_each(|t| t.zero());
    tg
}

fn mean_rows(h: &Tensor) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v / n as f64;
        }
    }
    out
}

fn labels_tensor(labels: &[LabelVector], k: usize) -> Tensor {
    let n = labels.len();
    let mut t = Tensor::zeros(&[n, k]);
    for (i, l) in labels.iter().enumerate() {
        for (j, &v) in l.values.iter().enumerate() {
            t.row_mut(i)[j] = f64::from(v);
        }
    }
    t
}

/// Build the per-sample semantic description: positive entity names
/// joined by the delimiter token, or the literal "normal" when no class
/// is positive.
pub fn semantic_description(labels: &LabelVector, names: &[&str]) -> String {
    let positives: Vec<&str> = names
        .iter()
        .enumerate()
        .filter(|(j, _)| labels.is_positive(*j))
        .map(|(_, n)| *n)
        .collect();
    if positives.is_empty() {
        "normal".to_string()
    } else {
        positives.join(" [SEP] ")
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::audiofeat::{FRAME_LEN_MS, FRAME_SHIFT_MS};

    pub fn tiny_features(num_frames: usize, bins: usize, seed: u64) -> FilterBankFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        FilterBankFeatures {
            frames: (0..num_frames * bins)
                .map(|_| rng.gen_range(-2.0f32..2.0))
                .collect(),
            num_frames,
            num_mel_bins: bins,
            frame_len_ms: FRAME_LEN_MS,
            frame_shift_ms: FRAME_SHIFT_MS,
            sample_rate_hz: 4000,
        }
    }

    pub fn tiny_model() -> Model {
        let catalog = crate::catalog::AbnormalityCatalog::default_schema();
        let vocab = Vocab::from_catalog(&catalog, 4096);
        let mut config = ModelConfig::compact(16, 8);
        config.text_heads = 2;
        config.decoder_heads = 2;
        config.text_layers = 2;
        config.audio_channels = vec![2, 2];
        config.init_seed = 12;
        Model::new(config, vocab)
    }

    #[test]
    fn query_decode_duplicate_and_permutation_invariance() {
        let model = tiny_model();
        let fb = tiny_features(32, 8, 5);
        let h = model.encode_audio(&fb).unwrap();
        let qa = model.encode_text("ventricular septal defect").unwrap();
        let qb = model.encode_text("shunt").unwrap();
        let qc = model.encode_text("dilation").unwrap();

        let base = model.query_decode(&h, &[qa.clone(), qb.clone(), qc.clone()]);
        let dup = model.query_decode(&h, &[qa.clone(), qb.clone(), qc.clone(), qa.clone()]);
        assert_eq!(base[0], dup[3], "duplicate query logit is bit-exact");
        let perm = model.query_decode(&h, &[qc, qb, qa]);
        assert_eq!(base[0], perm[2]);
        assert_eq!(base[1], perm[1]);
        assert_eq!(base[2], perm[0]);
    }

    #[test]
    fn single_query_equals_batched_query() {
        let model = tiny_model();
        let fb = tiny_features(48, 8, 9);
        let h = model.encode_audio(&fb).unwrap();
        let queries: Vec<Tensor> = crate::catalog::knowledge::CANONICAL_ORDER
            .iter()
            .map(|n| model.encode_text(n).unwrap())
            .collect();
        let all = model.query_decode(&h, &queries);
        for (j, q) in queries.iter().enumerate() {
            let single = model.query_decode(&h, std::slice::from_ref(q));
            assert_eq!(single[0], all[j], "query {j}");
        }
    }

    #[test]
    fn encoded_frames_match_stride_formula() {
        let model = tiny_model();
        // two conv blocks, stride 2 each -> ceil(t / 4)
        let fb = tiny_features(37, 8, 3);
        let h = model.encode_audio(&fb).unwrap();
        assert_eq!(h.rows(), 10);
    }

    #[test]
    fn semantic_description_formats() {
        let names = vec!["atrial septal defect", "shunt", "dilation"];
        let l = LabelVector::from_bits(&[true, false, true]);
        assert_eq!(
            semantic_description(&l, &names),
            "atrial septal defect [SEP] dilation"
        );
        let zero = LabelVector::zeros(3);
        assert_eq!(semantic_description(&zero, &names), "normal");
    }

    #[test]
    fn training_grads_parallel_equals_sequential() {
        let model = tiny_model();
        let queries: Vec<String> = vec!["shunt".into(), "hypertrophy".into()];
        let batch = TrainBatch {
            features: (0..3).map(|i| tiny_features(24, 8, i)).collect(),
            labels: vec![
                LabelVector::from_bits(&[true, false]),
                LabelVector::from_bits(&[false, true]),
                LabelVector::from_bits(&[false, false]),
            ],
            descriptions: vec!["shunt".into(), "hypertrophy".into(), "normal".into()],
        };
        let (la, ga) = model
            .training_grads(&queries, &batch, Execution::Parallel, true)
            .unwrap();
        let (lb, gb) = model
            .training_grads(&queries, &batch, Execution::Sequential, true)
            .unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        assert!(ga.all_finite());
        // Loss pieces agree with the forward-only path.
        let lc = model.training_loss(&queries, &batch, true).unwrap();
        assert_eq!(la, lc);
        // Lambda gradient is the contrastive term.
        assert!((ga.lambda.item() - la.con).abs() < 1e-15);
    }

    #[test]
    fn contrastive_flag_off_reduces_to_bce() {
        let model = tiny_model();
        let queries: Vec<String> = vec!["shunt".into(), "hypertrophy".into()];
        let batch = TrainBatch {
            features: (0..2).map(|i| tiny_features(24, 8, i + 40)).collect(),
            labels: vec![
                LabelVector::from_bits(&[true, false]),
                LabelVector::from_bits(&[false, true]),
            ],
            descriptions: vec!["shunt".into(), "hypertrophy".into()],
        };
        let (off, goff) = model
            .training_grads(&queries, &batch, Execution::Sequential, false)
            .unwrap();
        assert_eq!(off.con, 0.0);
        assert_eq!(off.total, off.bce);
        assert_eq!(goff.lambda.item(), 0.0);
        let (on, _) = model
            .training_grads(&queries, &batch, Execution::Sequential, true)
            .unwrap();
        assert_eq!(on.bce, off.bce);
    }
}
