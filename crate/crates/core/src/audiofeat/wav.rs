//! Record storage: one PCM16 mono RIFF/WAVE file per record plus a JSON
//! sidecar carrying the record id, sample rate and site span map.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HeartSoundRecord, SiteSpan};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    record_id: String,
    sample_rate_hz: u32,
    site_spans: Vec<SiteSpan>,
}

pub fn wav_path(dir: &Path, record_id: &str) -> PathBuf {
    dir.join(format!("{record_id}.wav"))
}

pub fn sidecar_path(dir: &Path, record_id: &str) -> PathBuf {
    dir.join(format!("{record_id}.json"))
}

/// Write `<id>.wav` and `<id>.json` into `dir`. Samples are clamped to
/// [-1, 1] and quantized to i16.
pub fn write_record(dir: &Path, record: &HeartSoundRecord) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: record.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(wav_path(dir, &record.record_id), spec)?;
    for &v in &record.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    let sidecar = Sidecar {
        record_id: record.record_id.clone(),
        sample_rate_hz: record.sample_rate_hz,
        site_spans: record.site_spans.clone(),
    };
    let file = std::io::BufWriter::new(std::fs::File::create(sidecar_path(
        dir,
        &record.record_id,
    ))?);
    serde_json::to_writer_pretty(file, &sidecar)?;
    Ok(())
}

/// Load a record by id from `dir`, validating the span layout.
pub fn read_record(dir: &Path, record_id: &str) -> Result<HeartSoundRecord> {
    let sidecar: Sidecar = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(sidecar_path(dir, record_id))?,
    ))?;
    let mut reader = hound::WavReader::open(wav_path(dir, record_id))?;
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<_, _>>()?;
    let record = HeartSoundRecord {
        record_id: sidecar.record_id,
        samples,
        sample_rate_hz: sidecar.sample_rate_hz,
        site_spans: sidecar.site_spans,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::{Site, ALL_SITES};

    #[test]
    fn roundtrip_preserves_layout_and_quantized_samples() {
        let sr = 4000u32;
        let per_site = 15 * sr as usize;
        let n = 5 * per_site;
        let samples: Vec<f64> = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 90.0 * i as f64 / sr as f64).sin())
            .collect();
        let spans: Vec<SiteSpan> = ALL_SITES
            .iter()
            .enumerate()
            .map(|(k, &site)| SiteSpan {
                site,
                start_sample: k * per_site,
                end_sample: (k + 1) * per_site,
            })
            .collect();
        let rec = HeartSoundRecord {
            record_id: "rt0".into(),
            samples,
            sample_rate_hz: sr,
            site_spans: spans,
        };
        rec.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_record(dir.path(), &rec).unwrap();
        let back = read_record(dir.path(), "rt0").unwrap();
        assert_eq!(back.site_spans, rec.site_spans);
        assert_eq!(back.samples.len(), rec.samples.len());
        assert!(back.site_slice(Site::Erb).is_some());
        for (a, b) in rec.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0 + 1e-9);
        }
    }
}
