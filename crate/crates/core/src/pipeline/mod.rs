//! Training loop and description-ensemble inference.
//!
//! Training follows the published schedule: AdamW with decoupled weight
//! decay, linear warmup into a cosine learning-rate decay, per-step
//! augmentation, and the joint BCE + contrastive objective with its
//! learnable mixing weight. Inference aggregates per-class predictions
//! over N paraphrased definitions by arithmetic mean and thresholds at
//! 0.5 (inclusive).

pub mod optim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{lr_at, AdamW};

use crate::audiofeat::{augment, augment_spec, compute_filterbanks, AugmentPolicy, FilterBankFeatures};
use crate::catalog::{AbnormalityCatalog, LabelVector};
use crate::model::checkpoint::OptimizerState;
use crate::model::{semantic_description, sigmoid, LossBreakdown, Model, ModelConfig, TrainBatch, Vocab};
use crate::parallel::Execution;
use crate::tensor::Tensor;
use crate::util::derive_seed3;
use crate::{Error, Result};

/// Training queries: full definition texts (default) or bare entity words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    #[default]
    Definitions,
    EntityWords,
}

/// Learning-rate schedule; only cosine-with-warmup is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub augment: AugmentPolicy,
    pub query_source: QuerySource,
    /// Disables the contrastive term: the loss weight is frozen and the
    /// term is absent from logs.
    pub contrastive: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            weight_decay: 0.02,
            epochs: 100,
            warmup_epochs: 20,
            schedule: Schedule::Cosine,
            batch_size: 16,
            seed: 0,
            tau: 0.07,
            augment: AugmentPolicy::default_train(0),
            query_source: QuerySource::Definitions,
            contrastive: true,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig(
                "warmup_epochs must be smaller than epochs".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Where training samples come from.
pub enum DataSource {
    /// Precomputed features; only SpecAugment can apply.
    Features(Vec<FilterBankFeatures>),
    /// WAV + sidecar files on disk; the full augmentation chain applies.
    WavDir { dir: PathBuf, ids: Vec<String>, mel_bins: usize },
}

/// A training (or evaluation) set.
pub struct TrainSet {
    pub source: DataSource,
    pub labels: Vec<LabelVector>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features for one sample; `aug_seed` selects the per-(epoch, sample)
    /// augmentation draw, `None` means the clean evaluation path.
    pub fn features(&self, idx: usize, policy: &AugmentPolicy, aug_seed: Option<u64>) -> Result<FilterBankFeatures> {
        match &self.source {
            DataSource::Features(all) => {
                let fb = all[idx].clone();
                match aug_seed {
                    Some(seed) => Ok(augment_spec(&fb, &policy.with_seed(seed))),
                    None => Ok(fb),
                }
            }
            DataSource::WavDir { dir, ids, mel_bins } => {
                let record = crate::audiofeat::wav::read_record(dir, &ids[idx])?;
                match aug_seed {
                    Some(seed) => {
                        let seeded = policy.with_seed(seed);
                        let augmented = augment(&record, &seeded);
                        let fb = compute_filterbanks(&augmented, *mel_bins)?;
                        Ok(augment_spec(&fb, &seeded))
                    }
                    None => compute_filterbanks(&record, *mel_bins),
                }
            }
        }
    }
}

/// Per-epoch log entry; the contrastive term is `None` when disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub con: Option<f64>,
    pub lambda: f64,
    pub total: f64,
    pub lr_last: f64,
}

/// A finished (or resumed-and-finished) training run.
pub struct Trained {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub optimizer: OptimizerState,
}

/// Query texts used during training, one per catalog class.
pub fn training_query_texts(catalog: &AbnormalityCatalog, source: QuerySource) -> Vec<String> {
    catalog
        .entities
        .iter()
        .map(|e| match source {
            QuerySource::Definitions => e.definition_text.clone(),
            QuerySource::EntityWords => e.canonical_name.clone(),
        })
        .collect()
}

/// Train a model on `set`. With `resume` the run continues from a saved
/// model and optimizer state, keeping epoch numbering.
pub fn train(
    set: &TrainSet,
    catalog: &AbnormalityCatalog,
    config: &TrainConfig,
    mut model_config: ModelConfig,
    resume: Option<(Model, OptimizerState)>,
) -> Result<Trained> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model_config.tau = config.tau;
    let names: Vec<&str> = catalog.names();
    let query_texts = training_query_texts(catalog, config.query_source);

    let (mut model, mut opt, start_epoch) = match resume {
        Some((model, state)) => {
            let epoch = state.epoch as usize;
            let opt = AdamW::from_state(state, config.weight_decay);
            (model, opt, epoch)
        }
        None => {
            let vocab = Vocab::from_catalog(catalog, model_config.vocab_cap);
            let model = Model::new(model_config.clone(), vocab);
            let opt = AdamW::new(&model.params, config.weight_decay);
            (model, opt, 0)
        }
    };

    let n = set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;
    let mut log = Vec::new();
    let mut global_step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed3(config.seed, 0xE0, epoch as u64));
        order.shuffle(&mut rng);

        let mut sum = LossAccum::default();
        let mut lr_last = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = assemble_batch(set, chunk, config, epoch, &names)?;
            let (breakdown, grads) =
                model.training_grads(&query_texts, &batch, config.execution, config.contrastive)?;
            if !breakdown.total.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    bce: breakdown.bce,
                    con: breakdown.con,
                    lambda: breakdown.lambda,
                    grad_norms: grads.group_norms(),
                });
            }
            let lr = lr_at(global_step, total_steps, warmup_steps, config.lr);
            lr_last = lr;
            opt.step(&mut model.params, &grads, lr, config.contrastive);
            global_step += 1;
            sum.add(&breakdown, chunk.len());
        }
        log.push(sum.epoch_log(epoch, model.params.lambda_value(), lr_last, config.contrastive));
    }

    let optimizer = opt.state(config.epochs as u64);
    Ok(Trained {
        model,
        log,
        optimizer,
    })
}

#[derive(Default)]
struct LossAccum {
    bce: f64,
    con: f64,
    total: f64,
    batches: usize,
}

impl LossAccum {
    fn add(&mut self, b: &LossBreakdown, _batch_len: usize) {
        self.bce += b.bce;
        self.con += b.con;
        self.total += b.total;
        self.batches += 1;
    }

    fn epoch_log(&self, epoch: usize, lambda: f64, lr_last: f64, contrastive: bool) -> EpochLog {
        let denom = self.batches.max(1) as f64;
        EpochLog {
            epoch,
            bce: self.bce / denom,
            con: contrastive.then_some(self.con / denom),
            lambda,
            total: self.total / denom,
            lr_last,
        }
    }
}

fn assemble_batch(
    set: &TrainSet,
    indices: &[usize],
    config: &TrainConfig,
    epoch: usize,
    names: &[&str],
) -> Result<TrainBatch> {
    let feats: Vec<Result<FilterBankFeatures>> = config.execution.map(indices.len(), |bi| {
        let idx = indices[bi];
        let aug_seed = derive_seed3(config.augment.rng_seed ^ config.seed, epoch as u64, idx as u64);
        set.features(idx, &config.augment, Some(aug_seed))
    });
    let features = feats.into_iter().collect::<Result<Vec<_>>>()?;
    let labels: Vec<LabelVector> = indices.iter().map(|&i| set.labels[i].clone()).collect();
    let descriptions = labels
        .iter()
        .map(|l| semantic_description(l, names))
        .collect();
    Ok(TrainBatch {
        features,
        labels,
        descriptions,
    })
}

/// Inference settings: how many bank descriptions per class (0 means the
/// bare entity word) and the decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub n_descriptions: usize,
    pub threshold: f64,
    /// Reserved for alternative selection policies; the default policy
    /// takes the first N bank entries in fixed order and ignores this.
    pub selection_seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            n_descriptions: 10,
            threshold: 0.5,
            selection_seed: 0,
        }
    }
}

/// Per-class probabilities in catalog order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    pub values: Vec<f64>,
}

/// Precomputed description queries: `counts[j]` embeddings per class,
/// flattened in class order.
pub struct QuerySet {
    pub embeddings: Vec<Tensor>,
    pub counts: Vec<usize>,
}

/// Resolve and encode the description queries for every class.
pub fn build_query_set(
    model: &Model,
    catalog: &AbnormalityCatalog,
    config: &InferConfig,
) -> Result<QuerySet> {
    let mut embeddings = Vec::new();
    let mut counts = Vec::new();
    for entity in &catalog.entities {
        let texts: Vec<&str> = if config.n_descriptions == 0 {
            vec![entity.canonical_name.as_str()]
        } else {
            if config.n_descriptions > entity.description_bank.len() {
                return Err(Error::DescriptionBankExceeded {
                    class: entity.canonical_name.clone(),
                    n: config.n_descriptions,
                    bank: entity.description_bank.len(),
                });
            }
            entity.description_bank[..config.n_descriptions]
                .iter()
                .map(|s| s.as_str())
                .collect()
        };
        counts.push(texts.len());
        for t in texts {
            embeddings.push(model.encode_text(t)?);
        }
    }
    Ok(QuerySet { embeddings, counts })
}

/// Predict per-class probabilities for one feature matrix: the mean of
/// the per-description sigmoids within each class.
pub fn infer_features(
    model: &Model,
    features: &FilterBankFeatures,
    queries: &QuerySet,
) -> Result<PredictionVector> {
    let h = model.encode_audio(features)?;
    let logits = model.query_decode(&h, &queries.embeddings);
    let mut values = Vec::with_capacity(queries.counts.len());
    let mut offset = 0;
    for &count in &queries.counts {
        let mean = logits[offset..offset + count]
            .iter()
            .map(|&z| sigmoid(z))
            .sum::<f64>()
            / count as f64;
        values.push(mean);
        offset += count;
    }
    Ok(PredictionVector { values })
}

/// Predict for a raw record: featurize (no augmentation), then infer.
pub fn infer_record(
    model: &Model,
    record: &crate::audiofeat::HeartSoundRecord,
    catalog: &AbnormalityCatalog,
    config: &InferConfig,
) -> Result<PredictionVector> {
    let queries = build_query_set(model, catalog, config)?;
    let features = compute_filterbanks(record, model.config.mel_bins)?;
    infer_features(model, &features, &queries)
}

/// Batch inference over a feature set with a shared query set.
pub fn infer_batch(
    model: &Model,
    set: &TrainSet,
    queries: &QuerySet,
    execution: Execution,
) -> Result<Vec<PredictionVector>> {
    let policy = AugmentPolicy::disabled(0);
    let results: Vec<Result<PredictionVector>> = execution.map(set.len(), |i| {
        let features = set.features(i, &policy, None)?;
        infer_features(model, &features, queries)
    });
    results.into_iter().collect()
}

/// Threshold predictions into a label vector (inclusive comparison).
pub fn decide(preds: &PredictionVector, threshold: f64) -> LabelVector {
    LabelVector {
        values: preds
            .values
            .iter()
            .map(|&p| u8::from(p >= threshold))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::{FRAME_LEN_MS, FRAME_SHIFT_MS};
    use crate::model::tests::tiny_model;

    /// Features with a class-dependent pattern: positive class j lifts
    /// column j by a margin, so a tiny model can fit quickly.
    fn patterned_features(labels: &LabelVector, bins: usize, seed: u64) -> FilterBankFeatures {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num_frames = 24;
        let mut frames = vec![0f32; num_frames * bins];
        for f in frames.iter_mut() {
            *f = rng.gen_range(-0.5f32..0.5);
        }
        for (j, &v) in labels.values.iter().enumerate() {
            if v == 1 {
                for t in 0..num_frames {
                    frames[t * bins + (j % bins)] += 3.0;
                }
            }
        }
        FilterBankFeatures {
            frames,
            num_frames,
            num_mel_bins: bins,
            frame_len_ms: FRAME_LEN_MS,
            frame_shift_ms: FRAME_SHIFT_MS,
            sample_rate_hz: 4000,
        }
    }

    fn tiny_set(n: usize, k: usize, bins: usize, seed: u64) -> TrainSet {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<LabelVector> = (0..n)
            .map(|_| {
                let bits: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.4)).collect();
                LabelVector::from_bits(&bits)
            })
            .collect();
        let features = labels
            .iter()
            .enumerate()
            .map(|(i, l)| patterned_features(l, bins, derive_seed3(seed, 1, i as u64)))
            .collect();
        TrainSet {
            source: DataSource::Features(features),
            labels,
        }
    }

    fn small_catalog(k: usize) -> AbnormalityCatalog {
        let mut catalog = AbnormalityCatalog::default_schema();
        catalog.entities.truncate(k);
        catalog.k = k;
        catalog
    }

    fn smoke_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            epochs,
            warmup_epochs: if epochs > 1 { 1 } else { 0 },
            batch_size: 8,
            augment: AugmentPolicy::disabled(0),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn smoke_model_config() -> ModelConfig {
        let mut mc = ModelConfig::compact(16, 8);
        mc.text_heads = 2;
        mc.decoder_heads = 2;
        mc.audio_channels = vec![2, 2];
        mc.init_seed = 3;
        mc
    }

    #[test]
    fn smoke_run_loss_decreases() {
        let catalog = small_catalog(4);
        let set = tiny_set(32, 4, 8, 11);
        let out = train(&set, &catalog, &smoke_config(2), smoke_model_config(), None).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(
            out.log[1].total < out.log[0].total,
            "{:?}",
            out.log
        );
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let catalog = small_catalog(4);
        let set = tiny_set(16, 4, 8, 11);
        let mut config = smoke_config(0);
        config.warmup_epochs = 0;
        let out = train(&set, &catalog, &config, smoke_model_config(), None).unwrap();
        let vocab = Vocab::from_catalog(&catalog, smoke_model_config().vocab_cap);
        let mut expect_config = smoke_model_config();
        expect_config.tau = config.tau;
        let fresh = Model::new(expect_config, vocab);
        assert_eq!(out.model.params, fresh.params);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let catalog = small_catalog(3);
        let set = tiny_set(20, 3, 8, 7);
        let a = train(&set, &catalog, &smoke_config(2), smoke_model_config(), None).unwrap();
        let b = train(&set, &catalog, &smoke_config(2), smoke_model_config(), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let catalog = small_catalog(3);
        let set = tiny_set(20, 3, 8, 7);
        let full = train(&set, &catalog, &smoke_config(3), smoke_model_config(), None).unwrap();
        let part = train(&set, &catalog, &smoke_config(2), smoke_model_config(), None).unwrap();
        let resumed = train(
            &set,
            &catalog,
            &smoke_config(3),
            smoke_model_config(),
            Some((part.model, part.optimizer)),
        )
        .unwrap();
        assert_eq!(resumed.log.len(), 1);
        assert_eq!(resumed.log[0].epoch, 2);
        assert_eq!(resumed.model.params, full.model.params);
    }

    #[test]
    fn no_contrastive_freezes_lambda_and_drops_term() {
        let catalog = small_catalog(3);
        let set = tiny_set(16, 3, 8, 7);
        let mut config = smoke_config(1);
        config.warmup_epochs = 0;
        config.contrastive = false;
        let out = train(&set, &catalog, &config, smoke_model_config(), None).unwrap();
        assert!(out.log[0].con.is_none());
        assert_eq!(out.model.params.lambda_value(), 1.0);
    }

    #[test]
    fn infer_mean_aggregation_is_exact() {
        let model = tiny_model();
        let catalog = crate::catalog::AbnormalityCatalog::default_schema();
        let features = crate::model::tests::tiny_features(32, 8, 5);

        let n = 10;
        let cfg_n = InferConfig {
            n_descriptions: n,
            ..InferConfig::default()
        };
        let queries = build_query_set(&model, &catalog, &cfg_n).unwrap();
        let combined = infer_features(&model, &features, &queries).unwrap();

        // Mean of N single-description runs.
        let h = model.encode_audio(&features).unwrap();
        for (j, entity) in catalog.entities.iter().enumerate() {
            let mut acc = 0.0;
            for desc in &entity.description_bank[..n] {
                let q = model.encode_text(desc).unwrap();
                let logit = model.query_decode(&h, &[q])[0];
                acc += sigmoid(logit);
            }
            let want = acc / n as f64;
            assert!(
                (combined.values[j] - want).abs() <= 1e-9,
                "class {j}: {} vs {want}",
                combined.values[j]
            );
        }
    }

    #[test]
    fn infer_n0_uses_entity_words() {
        let model = tiny_model();
        let catalog = crate::catalog::AbnormalityCatalog::default_schema();
        let features = crate::model::tests::tiny_features(32, 8, 6);
        let cfg = InferConfig {
            n_descriptions: 0,
            ..InferConfig::default()
        };
        let queries = build_query_set(&model, &catalog, &cfg).unwrap();
        let got = infer_features(&model, &features, &queries).unwrap();
        let h = model.encode_audio(&features).unwrap();
        for (j, entity) in catalog.entities.iter().enumerate() {
            let q = model.encode_text(&entity.canonical_name).unwrap();
            let want = sigmoid(model.query_decode(&h, &[q])[0]);
            assert_eq!(got.values[j], want);
        }
    }

    #[test]
    fn infer_bank_overflow_names_class() {
        let model = tiny_model();
        let catalog = crate::catalog::AbnormalityCatalog::default_schema();
        let cfg = InferConfig {
            n_descriptions: 101,
            ..InferConfig::default()
        };
        match build_query_set(&model, &catalog, &cfg) {
            Err(Error::DescriptionBankExceeded { class, .. }) => {
                assert_eq!(class, "atrial septal defect")
            }
            other => panic!("expected bank error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn decide_threshold_semantics() {
        let preds = PredictionVector {
            values: vec![0.5, 0.49, 0.51],
        };
        let labels = decide(&preds, 0.5);
        assert_eq!(labels.values, vec![1, 0, 1]);
        let all_low = PredictionVector {
            values: vec![0.49; 4],
        };
        assert!(!decide(&all_low, 0.5).any_positive());
    }

    #[test]
    fn decide_monotone_in_threshold() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let preds = PredictionVector {
                values: (0..12).map(|_| rng.gen_range(0.0..1.0)).collect(),
            };
            let (t1, t2) = {
                let a: f64 = rng.gen_range(0.0..1.0);
                let b: f64 = rng.gen_range(0.0..1.0);
                (a.min(b), a.max(b))
            };
            let low = decide(&preds, t1);
            let high = decide(&preds, t2);
            for (l, h) in low.values.iter().zip(&high.values) {
                assert!(h <= l, "raising threshold must not add positives");
            }
        }
    }
}
