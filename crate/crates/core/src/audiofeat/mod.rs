//! Waveform-to-feature path: log mel filter banks at 100 ms frames with a
//! 40 ms shift, plus the training-time augmentation chain (chunk dropping,
//! speed perturbation, clipping, noising, amplifying in the waveform
//! domain; SpecAugment in the feature domain).

pub mod wav;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The five auscultation sites of the recording protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Aortic,
    Pulmonic,
    Erb,
    Tricuspid,
    Mitral,
}

pub const ALL_SITES: [Site; 5] = [
    Site::Aortic,
    Site::Pulmonic,
    Site::Erb,
    Site::Tricuspid,
    Site::Mitral,
];

/// Contiguous slice of the concatenated waveform belonging to one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpan {
    pub site: Site,
    pub start_sample: usize,
    pub end_sample: usize,
}

/// A five-site auscultation recording, concatenated into one mono signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartSoundRecord {
    pub record_id: String,
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub site_spans: Vec<SiteSpan>,
}

impl HeartSoundRecord {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Span layout and duration invariants for freshly constructed or
    /// loaded records (training-time augmented copies are exempt).
    pub fn validate(&self) -> Result<()> {
        let min_span = 15 * self.sample_rate_hz as usize;
        let mut cursor = 0usize;
        for span in &self.site_spans {
            if span.start_sample != cursor || span.end_sample <= span.start_sample {
                return Err(Error::InvalidRecord(format!(
                    "record {}: spans must be ordered, non-overlapping and covering",
                    self.record_id
                )));
            }
            if span.end_sample - span.start_sample < min_span {
                return Err(Error::InvalidRecord(format!(
                    "record {}: site segment shorter than 15 s",
                    self.record_id
                )));
            }
            cursor = span.end_sample;
        }
        if cursor != self.samples.len() {
            return Err(Error::InvalidRecord(format!(
                "record {}: spans cover {} of {} samples",
                self.record_id,
                cursor,
                self.samples.len()
            )));
        }
        let dur = self.duration_s();
        if !(37.5..=112.5).contains(&dur) {
            return Err(Error::InvalidRecord(format!(
                "record {}: duration {dur:.1} s outside 75 s +/- 50%",
                self.record_id
            )));
        }
        Ok(())
    }

    pub fn site_slice(&self, site: Site) -> Option<&[f64]> {
        self.site_spans
            .iter()
            .find(|s| s.site == site)
            .map(|s| &self.samples[s.start_sample..s.end_sample])
    }
}

/// Framed log mel filter-bank features, stored f32 row-major
/// `[num_frames x num_mel_bins]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBankFeatures {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub num_mel_bins: usize,
    pub frame_len_ms: u32,
    pub frame_shift_ms: u32,
    pub sample_rate_hz: u32,
}

impl FilterBankFeatures {
    pub fn at(&self, frame: usize, bin: usize) -> f32 {
        self.frames[frame * self.num_mel_bins + bin]
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.frames[frame * self.num_mel_bins..(frame + 1) * self.num_mel_bins]
    }

    pub fn mean(&self) -> f32 {
        if self.frames.is_empty() {
            return 0.0;
        }
        (self.frames.iter().map(|&v| v as f64).sum::<f64>() / self.frames.len() as f64) as f32
    }
}

pub const FRAME_LEN_MS: u32 = 100;
pub const FRAME_SHIFT_MS: u32 = 40;
pub const DEFAULT_MEL_BINS: usize = 64;
const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as (first_bin, weights) pairs over the one-sided
/// power spectrum of an `fft_size`-point transform.
fn mel_filters(num_bins: usize, fft_size: usize, sample_rate: u32) -> Vec<(usize, Vec<f64>)> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_spec = fft_size / 2 + 1;
    let mel_max = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..num_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (num_bins + 1) as f64))
        .collect();
    let hz_per_bin = sample_rate as f64 / fft_size as f64;
    let mut filters = Vec::with_capacity(num_bins);
    for m in 0..num_bins {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        let first = (lo / hz_per_bin).ceil() as usize;
        let last = ((hi / hz_per_bin).floor() as usize).min(n_spec - 1);
        let mut weights = Vec::new();
        for b in first..=last {
            let f = b as f64 * hz_per_bin;
            let w = if f <= mid {
                if mid > lo {
                    (f - lo) / (mid - lo)
                } else {
                    0.0
                }
            } else if hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            weights.push(w.max(0.0));
        }
        filters.push((first, weights));
    }
    filters
}

/// Compute log mel filter-bank features over 100 ms frames shifted by
/// 40 ms. Frame count follows `1 + floor((duration - frame_len) / shift)`.
pub fn compute_filterbanks(
    record: &HeartSoundRecord,
    num_mel_bins: usize,
) -> Result<FilterBankFeatures> {
    if record.sample_rate_hz < 2000 {
        return Err(Error::SampleRateTooLow {
            got: record.sample_rate_hz,
            min: 2000,
        });
    }
    let sr = record.sample_rate_hz as u64;
    let frame_len = ((sr * FRAME_LEN_MS as u64 + 500) / 1000) as usize;
    let shift = ((sr * FRAME_SHIFT_MS as u64 + 500) / 1000) as usize;
    if record.samples.len() < frame_len {
        return Err(Error::InputTooShort {
            got_ms: record.samples.len() as f64 * 1000.0 / sr as f64,
            frame_ms: FRAME_LEN_MS,
        });
    }
    let num_frames = 1 + (record.samples.len() - frame_len) / shift;
    let fft_size = frame_len.next_power_of_two();
    let filters = mel_filters(num_mel_bins, fft_size, record.sample_rate_hz);
    let window: Vec<f64> = (0..frame_len)
        .map(|i| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (frame_len - 1) as f64).cos()
        })
        .collect();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut frames = vec![0f32; num_frames * num_mel_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut power = vec![0f64; fft_size / 2 + 1];
    for fi in 0..num_frames {
        let start = fi * shift;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < frame_len {
                Complex::new(record.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (i, p) in power.iter_mut().enumerate() {
            *p = buf[i].norm_sqr();
        }
        for (m, (first, weights)) in filters.iter().enumerate() {
            let mut e = 0.0;
            for (w, p) in weights.iter().zip(&power[*first..]) {
                e += w * p;
            }
            frames[fi * num_mel_bins + m] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Ok(FilterBankFeatures {
        frames,
        num_frames,
        num_mel_bins,
        frame_len_ms: FRAME_LEN_MS,
        frame_shift_ms: FRAME_SHIFT_MS,
        sample_rate_hz: record.sample_rate_hz,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDropParams {
    pub max_fraction: f64,
    pub max_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentParams {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

/// Which augmentations run and with what parameter ranges. `None`
/// disables an op entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub chunk_drop: Option<ChunkDropParams>,
    pub speed_perturb: Option<Vec<f64>>,
    pub clip: Option<f64>,
    pub noise_snr_db: Option<(f64, f64)>,
    pub amplify: Option<(f64, f64)>,
    pub spec_augment: Option<SpecAugmentParams>,
    pub rng_seed: u64,
}

impl AugmentPolicy {
    /// Everything off; augment() becomes the identity.
    pub fn disabled(seed: u64) -> Self {
        AugmentPolicy {
            chunk_drop: None,
            speed_perturb: None,
            clip: None,
            noise_snr_db: None,
            amplify: None,
            spec_augment: None,
            rng_seed: seed,
        }
    }

    /// Training defaults: every op enabled at its documented range.
    pub fn default_train(seed: u64) -> Self {
        AugmentPolicy {
            chunk_drop: Some(ChunkDropParams {
                max_fraction: 0.1,
                max_chunks: 5,
            }),
            speed_perturb: Some(vec![0.95, 1.0, 1.05]),
            clip: Some(0.9),
            noise_snr_db: Some((15.0, 30.0)),
            amplify: Some((0.5, 2.0)),
            spec_augment: Some(SpecAugmentParams {
                time_masks: 2,
                max_time_width: 40,
                freq_masks: 2,
                max_freq_width: 8,
            }),
            rng_seed: seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.rng_seed = seed;
        p
    }

    /// True when no waveform-domain op is enabled (features can then be
    /// computed once and cached).
    pub fn waveform_identity(&self) -> bool {
        self.chunk_drop.is_none()
            && self.speed_perturb.is_none()
            && self.clip.is_none()
            && self.noise_snr_db.is_none()
            && self.amplify.is_none()
    }
}

/// Standard normal draw via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn resample_linear(x: &[f64], factor: f64) -> Vec<f64> {
    if x.len() < 2 {
        return x.to_vec();
    }
    let out_len = ((x.len() - 1) as f64 / factor).floor() as usize + 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < x.len() {
                x[lo] * (1.0 - frac) + x[lo + 1] * frac
            } else {
                x[lo]
            }
        })
        .collect()
}

/// Apply the waveform-domain augmentation chain in fixed order
/// (speed, chunk drop, noise, amplify, clip). Deterministic for a fixed
/// `policy.rng_seed`; label-preserving by construction.
pub fn augment(record: &HeartSoundRecord, policy: &AugmentPolicy) -> HeartSoundRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    let mut samples = record.samples.clone();
    let mut spans = record.site_spans.clone();

    if let Some(factors) = &policy.speed_perturb {
        if !factors.is_empty() {
            let factor = factors[rng.gen_range(0..factors.len())];
            if (factor - 1.0).abs() > 1e-12 {
                samples = resample_linear(&samples, factor);
                let n = samples.len();
                spans = spans
                    .iter()
                    .map(|s| SiteSpan {
                        site: s.site,
                        start_sample: ((s.start_sample as f64 / factor).round() as usize).min(n),
                        end_sample: ((s.end_sample as f64 / factor).round() as usize).min(n),
                    })
                    .collect();
                if let Some(last) = spans.last_mut() {
                    last.end_sample = n;
                }
            }
        }
    }
    if let Some(params) = &policy.chunk_drop {
        let budget = (samples.len() as f64 * params.max_fraction) as usize;
        let n_chunks = rng.gen_range(1..=params.max_chunks.max(1));
        for _ in 0..n_chunks {
            let max_len = (budget / n_chunks).max(1);
            let len = rng.gen_range(1..=max_len).min(samples.len());
            let start = rng.gen_range(0..=samples.len() - len);
            samples[start..start + len].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if let Some((lo, hi)) = policy.noise_snr_db {
        let snr = rng.gen_range(lo..=hi);
        let power = samples.iter().map(|v| v * v).sum::<f64>() / samples.len().max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        if sigma > 0.0 {
            for v in samples.iter_mut() {
                *v += sigma * gauss(&mut rng);
            }
        }
    }
    if let Some((lo, hi)) = policy.amplify {
        let gain = rng.gen_range(lo..=hi);
        samples.iter_mut().for_each(|v| *v *= gain);
    }
    if let Some(fraction) = policy.clip {
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let limit = peak * fraction;
        if limit > 0.0 {
            samples.iter_mut().for_each(|v| *v = v.clamp(-limit, limit));
        }
    }
    HeartSoundRecord {
        record_id: record.record_id.clone(),
        samples,
        sample_rate_hz: record.sample_rate_hz,
        site_spans: spans,
    }
}

/// SpecAugment: mask random time and frequency stripes with the feature
/// matrix mean (computed before masking). Deterministic given the seed.
pub fn augment_spec(features: &FilterBankFeatures, policy: &AugmentPolicy) -> FilterBankFeatures {
    let Some(params) = &policy.spec_augment else {
        return features.clone();
    };
    let mut out = features.clone();
    let mean = features.mean();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed ^ 0x5bec_a466);
    let (t, m) = (out.num_frames, out.num_mel_bins);
    for _ in 0..params.time_masks {
        let width = rng.gen_range(0..=params.max_time_width.min(t));
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t - width);
        for frame in start..start + width {
            out.frames[frame * m..(frame + 1) * m]
                .iter_mut()
                .for_each(|v| *v = mean);
        }
    }
    for _ in 0..params.freq_masks {
        let width = rng.gen_range(0..=params.max_freq_width.min(m));
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=m - width);
        for frame in 0..t {
            out.frames[frame * m + start..frame * m + start + width]
                .iter_mut()
                .for_each(|v| *v = mean);
        }
    }
    out
}

const CACHE_MAGIC: &[u8; 4] = b"HSFB";

/// Write features as the binary cache format: magic, u32 LE frame count,
/// u32 LE bin count, u32 LE sample rate, then f32 LE payload.
pub fn write_feature_cache(path: &std::path::Path, features: &FilterBankFeatures) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CACHE_MAGIC)?;
    file.write_all(&(features.num_frames as u32).to_le_bytes())?;
    file.write_all(&(features.num_mel_bins as u32).to_le_bytes())?;
    file.write_all(&features.sample_rate_hz.to_le_bytes())?;
    for v in &features.frames {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_cache(path: &std::path::Path) -> Result<FilterBankFeatures> {
    use std::io::Read;
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::InvalidRecord("bad feature cache magic".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let num_frames = u32::from_le_bytes(word) as usize;
    file.read_exact(&mut word)?;
    let num_mel_bins = u32::from_le_bytes(word) as usize;
    file.read_exact(&mut word)?;
    let sample_rate_hz = u32::from_le_bytes(word);
    let mut frames = vec![0f32; num_frames * num_mel_bins];
    for v in frames.iter_mut() {
        file.read_exact(&mut word)?;
        *v = f32::from_le_bytes(word);
    }
    Ok(FilterBankFeatures {
        frames,
        num_frames,
        num_mel_bins,
        frame_len_ms: FRAME_LEN_MS,
        frame_shift_ms: FRAME_SHIFT_MS,
        sample_rate_hz,
    })
}
