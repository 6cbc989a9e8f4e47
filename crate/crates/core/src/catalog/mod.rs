//! Report distillation: from free-text echocardiography reports to a fixed
//! multi-label abnormality schema and per-record label vectors.
//!
//! The flow mirrors the clinical data-processing protocol: strip numeric
//! measurements, extract abnormality entities and rank them by how many
//! reports mention them, keep the `k` most frequent ones above a minimum
//! count, then label every record by resolved presence with
//! absence-by-default for anything unmentioned.

pub mod knowledge;
pub mod resolver;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
pub use resolver::{AbnormalityResolver, RuleBasedResolver};

/// One numeric measurement from a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericIndex {
    pub key: String,
    pub value: f64,
    pub unit: String,
}

/// A raw echocardiography report: numeric indices plus free-text
/// description and diagnosis sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoReportRaw {
    pub report_id: String,
    pub numeric_indices: Vec<NumericIndex>,
    pub description: String,
    pub diagnosis: String,
}

impl EchoReportRaw {
    /// Description and diagnosis may be empty, but not both.
    pub fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() && self.diagnosis.trim().is_empty() {
            return Err(Error::InvalidRecord(format!(
                "report {}: description and diagnosis both empty",
                self.report_id
            )));
        }
        Ok(())
    }
}

/// One abnormality class: canonical name, definition, synonym surface
/// forms, negation cues, and a bank of paraphrased definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityEntity {
    pub entity_id: usize,
    pub canonical_name: String,
    pub definition_text: String,
    pub synonyms: Vec<String>,
    pub negation_cues: Vec<String>,
    pub description_bank: Vec<String>,
}

/// The ordered label schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityCatalog {
    pub entities: Vec<AbnormalityEntity>,
    pub min_count: usize,
    pub k: usize,
}

impl AbnormalityCatalog {
    /// The built-in twelve-class schema in its fixed order.
    pub fn default_schema() -> Self {
        let entities = knowledge::CANONICAL_ORDER
            .iter()
            .enumerate()
            .map(|(i, name)| knowledge::known_entity(name, i).expect("registry entry"))
            .collect();
        AbnormalityCatalog {
            entities,
            min_count: 20,
            k: 12,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn names(&self) -> Vec<&str> {
        self.entities.iter().map(|e| e.canonical_name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.len() != self.k {
            return Err(Error::InvalidCatalog(format!(
                "{} entities but k = {}",
                self.entities.len(),
                self.k
            )));
        }
        let mut names = std::collections::HashSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            if e.entity_id != i {
                return Err(Error::InvalidCatalog(format!(
                    "entity {} has id {}",
                    i, e.entity_id
                )));
            }
            if !names.insert(e.canonical_name.clone()) {
                return Err(Error::InvalidCatalog(format!(
                    "duplicate canonical name {}",
                    e.canonical_name
                )));
            }
            if e.definition_text.trim().is_empty() {
                return Err(Error::InvalidCatalog(format!(
                    "empty definition for {}",
                    e.canonical_name
                )));
            }
            let mut bank = std::collections::HashSet::new();
            for d in &e.description_bank {
                if d.trim().is_empty() {
                    return Err(Error::InvalidCatalog(format!(
                        "empty bank entry for {}",
                        e.canonical_name
                    )));
                }
                if !bank.insert(d.clone()) {
                    return Err(Error::InvalidCatalog(format!(
                        "duplicate bank entry for {}",
                        e.canonical_name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-record binary targets aligned to catalog order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub values: Vec<u8>,
}

impl LabelVector {
    pub fn zeros(k: usize) -> Self {
        LabelVector { values: vec![0; k] }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        LabelVector {
            values: bits.iter().map(|&b| u8::from(b)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_positive(&self, j: usize) -> bool {
        self.values[j] == 1
    }

    pub fn any_positive(&self) -> bool {
        self.values.iter().any(|&v| v == 1)
    }
}

/// One ranked row of the entity frequency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub surface_form: String,
    pub mapped_entity: Option<String>,
    pub count: usize,
}

/// Surface-form counts over a corpus, sorted by count descending with a
/// lexicographic tie-break on the surface form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityFrequencyTable {
    pub entries: Vec<FrequencyEntry>,
}

impl EntityFrequencyTable {
    fn sort(&mut self) {
        self.entries.sort_by(|a, b| {
            b.count
                .cmp(&a.count)
                .then_with(|| a.surface_form.cmp(&b.surface_form))
        });
    }
}

/// Lowercase alphanumeric word tokens; everything else separates.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn has_digit(s: &str) -> bool {
    s.chars().any(|c| c.is_ascii_digit())
}

/// Units recognized as part of a measurement phrase when they follow a
/// number as a separate token.
const UNIT_LEXICON: [&str; 16] = [
    "%", "mm", "cm", "m", "mmhg", "m/s", "cm/s", "ms", "s", "mm2", "cm2", "bpm", "kg", "g", "hz",
    "l/min",
];

fn normalize_unit(token: &str) -> String {
    token
        .trim_matches(|c: char| c == '.' || c == ',' || c == ';' || c == ')' || c == '(')
        .to_lowercase()
}

fn is_unit_token(token: &str, extra_units: &[String]) -> bool {
    let t = normalize_unit(token);
    !t.is_empty() && (UNIT_LEXICON.contains(&t.as_str()) || extra_units.iter().any(|u| *u == t))
}

fn strip_numeric_text(text: &str, keys: &[String], extra_units: &[String]) -> String {
    if !has_digit(text) {
        return text.to_string();
    }
    // Split into sentences on ., ;, !, ? keeping the delimiter.
    let mut sentences: Vec<(String, String)> = Vec::new(); // (body, delimiter)
    let mut body = String::new();
    for ch in text.chars() {
        if matches!(ch, '.' | ';' | '!' | '?') {
            sentences.push((std::mem::take(&mut body), ch.to_string()));
        } else {
            body.push(ch);
        }
    }
    if !body.trim().is_empty() {
        sentences.push((body, String::new()));
    }

    let mut out_sentences: Vec<String> = Vec::new();
    for (sentence, delim) in sentences {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        let mut keep = vec![true; tokens.len()];
        for (i, tok) in tokens.iter().enumerate() {
            if !has_digit(tok) {
                continue;
            }
            keep[i] = false;
            // Unit token right after the number.
            if i + 1 < tokens.len() && is_unit_token(tokens[i + 1], extra_units) {
                keep[i + 1] = false;
            }
            // Measurement key right before the number.
            if i > 0 {
                let prev = normalize_unit(tokens[i - 1]);
                if keys.iter().any(|k| k.to_lowercase() == prev) {
                    keep[i - 1] = false;
                }
            }
        }
        let kept: Vec<&str> = tokens
            .iter()
            .zip(&keep)
            .filter_map(|(t, &k)| if k { Some(*t) } else { None })
            .collect();
        if kept.iter().any(|t| t.chars().any(|c| c.is_alphanumeric())) {
            out_sentences.push(format!("{}{}", kept.join(" "), delim));
        }
    }
    out_sentences.join(" ")
}

/// Remove all numeric information from a report: the numeric-index block
/// and every measurement phrase (number, attached or adjacent unit, and a
/// preceding token matching a numeric-index key) in the text sections.
/// Idempotent; text without digits is returned unchanged.
pub fn strip_numeric(report: &EchoReportRaw) -> EchoReportRaw {
    let keys: Vec<String> = report.numeric_indices.iter().map(|n| n.key.clone()).collect();
    let units: Vec<String> = report
        .numeric_indices
        .iter()
        .map(|n| n.unit.to_lowercase())
        .collect();
    EchoReportRaw {
        report_id: report.report_id.clone(),
        numeric_indices: Vec::new(),
        description: strip_numeric_text(&report.description, &keys, &units),
        diagnosis: strip_numeric_text(&report.diagnosis, &keys, &units),
    }
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() || tokens.len() < phrase.len() {
        return false;
    }
    (0..=tokens.len() - phrase.len()).any(|s| tokens[s..s + phrase.len()] == *phrase)
}

/// Count synonym-table surface forms over a corpus, once per report,
/// matching whole phrases case-insensitively after numeric stripping.
pub fn extract_entities(
    corpus: &[EchoReportRaw],
    synonym_table: &BTreeMap<String, String>,
) -> Result<EntityFrequencyTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let surfaces: Vec<(String, Vec<String>, String)> = synonym_table
        .iter()
        .map(|(surface, entity)| (surface.clone(), word_tokens(surface), entity.clone()))
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for report in corpus {
        let stripped = strip_numeric(report);
        let mut tokens = word_tokens(&stripped.description);
        tokens.extend(word_tokens(&stripped.diagnosis));
        for (surface, phrase, _) in &surfaces {
            if contains_phrase(&tokens, phrase) {
                *counts.entry(surface.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut table = EntityFrequencyTable {
        entries: surfaces
            .iter()
            .map(|(surface, _, entity)| FrequencyEntry {
                surface_form: surface.clone(),
                mapped_entity: Some(entity.clone()),
                count: counts.get(surface).copied().unwrap_or(0),
            })
            .collect(),
    };
    table.sort();
    Ok(table)
}

/// Select the `k` most frequent abnormality entities with at least
/// `min_count` occurrences and assemble the catalog.
///
/// Counts are aggregated per mapped entity (a report may be counted once
/// per surface form); entities below `min_count` are excluded regardless
/// of rank. Entity metadata comes from the built-in registry when the
/// name is known, otherwise a minimal entity is synthesized.
pub fn build_label_schema(
    freq: &EntityFrequencyTable,
    k: usize,
    min_count: usize,
) -> Result<AbnormalityCatalog> {
    let mut per_entity: BTreeMap<String, usize> = BTreeMap::new();
    for entry in &freq.entries {
        if let Some(entity) = &entry.mapped_entity {
            *per_entity.entry(entity.clone()).or_insert(0) += entry.count;
        }
    }
    let mut eligible: Vec<(String, usize)> = per_entity
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    eligible.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if eligible.len() < k {
        return Err(Error::InsufficientEntities {
            needed: k,
            found: eligible.len(),
        });
    }
    let entities = eligible
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (name, _))| {
            knowledge::known_entity(&name, i).unwrap_or_else(|| knowledge::fallback_entity(&name, i))
        })
        .collect();
    Ok(AbnormalityCatalog {
        entities,
        min_count,
        k,
    })
}

/// Label a (numeric-stripped) report against the catalog: 1 where the
/// resolver affirms presence in description or diagnosis, 0 otherwise.
pub fn annotate(
    report: &EchoReportRaw,
    catalog: &AbnormalityCatalog,
    resolver: &dyn AbnormalityResolver,
) -> LabelVector {
    let text = format!("{}\n{}", report.description, report.diagnosis);
    let bits: Vec<bool> = catalog
        .entities
        .iter()
        .map(|e| resolver.is_present(&text, e))
        .collect();
    LabelVector::from_bits(&bits)
}

/// Train/test id split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: (u32, u32),
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Uniform random split at `ratio = (major, minor)`; the test share is
/// `round(N * minor / (major + minor))` with halves rounded up.
pub fn split_corpus(ids: &[String], ratio: (u32, u32), seed: u64) -> Result<SplitManifest> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::CorpusTooSmall { min: 10, got: n });
    }
    let total = (ratio.0 + ratio.1) as usize;
    let n_test = (n * ratio.1 as usize * 2 + total) / (2 * total);
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let (test, train) = shuffled.split_at(n_test);
    let mut train_ids = train.to_vec();
    let mut test_ids = test.to_vec();
    train_ids.sort();
    test_ids.sort();
    Ok(SplitManifest {
        seed,
        ratio,
        train_ids,
        test_ids,
    })
}

/// One line of the labels file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRow {
    pub report_id: String,
    pub labels: Vec<u8>,
}

/// Read a JSON-lines corpus, validating each record and citing the
/// offending line on failure.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<EchoReportRaw>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let report: EchoReportRaw =
            serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
                line: i + 1,
                msg: e.to_string(),
            })?;
        report.validate().map_err(|e| Error::CorpusLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(report.report_id.clone()) {
            return Err(Error::CorpusLine {
                line: i + 1,
                msg: format!("duplicate report_id {}", report.report_id),
            });
        }
        out.push(report);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

pub fn write_corpus_jsonl(path: &Path, corpus: &[EchoReportRaw]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for report in corpus {
        serde_json::to_writer(&mut file, report)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_labels_jsonl(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut file, row)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels_jsonl(path: &Path) -> Result<Vec<LabelRow>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_catalog_json(path: &Path, catalog: &AbnormalityCatalog) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, catalog)?;
    Ok(())
}

pub fn read_catalog_json(path: &Path) -> Result<AbnormalityCatalog> {
    let file = std::fs::File::open(path)?;
    let catalog: AbnormalityCatalog = serde_json::from_reader(std::io::BufReader::new(file))?;
    catalog.validate()?;
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: &str, desc: &str, diag: &str) -> EchoReportRaw {
        EchoReportRaw {
            report_id: id.to_string(),
            numeric_indices: Vec::new(),
            description: desc.to_string(),
            diagnosis: diag.to_string(),
        }
    }

    #[test]
    fn strip_numeric_removes_measurement_phrase() {
        let r = EchoReportRaw {
            report_id: "r1".into(),
            numeric_indices: vec![NumericIndex {
                key: "LVEF".into(),
                value: 62.0,
                unit: "%".into(),
            }],
            description: "LVEF 62%. Mild regurgitation.".into(),
            diagnosis: String::new(),
        };
        let s = strip_numeric(&r);
        assert!(s.numeric_indices.is_empty());
        assert_eq!(s.description, "Mild regurgitation.");
    }

    #[test]
    fn strip_numeric_identity_without_digits() {
        let r = report("r1", "Mild  regurgitation,  trace shunt.", "normal study");
        let s = strip_numeric(&r);
        assert_eq!(s.description, r.description);
        assert_eq!(s.diagnosis, r.diagnosis);
    }

    #[test]
    fn strip_numeric_detached_unit() {
        let r = report("r1", "Gradient measured 25 mmHg across valve.", "");
        let s = strip_numeric(&r);
        assert_eq!(s.description, "Gradient measured across valve.");
    }

    #[test]
    fn extract_entities_counts_once_per_report() {
        let table = knowledge::default_synonym_table();
        let corpus = vec![
            report("a", "VSD present. VSD again.", ""),
            report("b", "ventricular septal defect", ""),
            report("c", "clean study", "normal"),
        ];
        let freq = extract_entities(&corpus, &table).unwrap();
        let vsd = freq
            .entries
            .iter()
            .find(|e| e.surface_form == "VSD")
            .unwrap();
        assert_eq!(vsd.count, 1);
        let full = freq
            .entries
            .iter()
            .find(|e| e.surface_form == "ventricular septal defect")
            .unwrap();
        assert_eq!(full.count, 1);
    }

    #[test]
    fn extract_entities_empty_corpus_errors() {
        let table = knowledge::default_synonym_table();
        assert!(matches!(
            extract_entities(&[], &table),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn frequency_tie_break_is_lexicographic() {
        let corpus = vec![report("a", "aortic stenosis and shunt", "")];
        let mut table = BTreeMap::new();
        table.insert("aortic stenosis".to_string(), "aortic stenosis".to_string());
        table.insert("shunt".to_string(), "shunt".to_string());
        let freq = extract_entities(&corpus, &table).unwrap();
        assert_eq!(freq.entries[0].surface_form, "aortic stenosis");
        assert_eq!(freq.entries[1].surface_form, "shunt");
        assert_eq!(freq.entries[0].count, freq.entries[1].count);
    }

    #[test]
    fn build_label_schema_filters_and_truncates() {
        let freq = EntityFrequencyTable {
            entries: vec![
                FrequencyEntry {
                    surface_form: "A".into(),
                    mapped_entity: Some("A".into()),
                    count: 50,
                },
                FrequencyEntry {
                    surface_form: "B".into(),
                    mapped_entity: Some("B".into()),
                    count: 30,
                },
                FrequencyEntry {
                    surface_form: "C".into(),
                    mapped_entity: Some("C".into()),
                    count: 19,
                },
                FrequencyEntry {
                    surface_form: "D".into(),
                    mapped_entity: Some("D".into()),
                    count: 100,
                },
            ],
        };
        let catalog = build_label_schema(&freq, 3, 20).unwrap();
        assert_eq!(catalog.names(), vec!["D", "A", "B"]);
    }

    #[test]
    fn build_label_schema_insufficient_entities() {
        let freq = EntityFrequencyTable {
            entries: vec![FrequencyEntry {
                surface_form: "A".into(),
                mapped_entity: Some("A".into()),
                count: 50,
            }],
        };
        let err = build_label_schema(&freq, 3, 20).unwrap_err();
        assert!(err.to_string().contains("deficit 2"), "{err}");
    }

    #[test]
    fn annotate_absence_by_default() {
        let catalog = AbnormalityCatalog::default_schema();
        let resolver = RuleBasedResolver::default();
        let r = report("a", "ventricular septal defect with left-to-right shunt", "");
        let labels = annotate(&r, &catalog, &resolver);
        for (j, e) in catalog.entities.iter().enumerate() {
            let want = matches!(
                e.canonical_name.as_str(),
                "ventricular septal defect" | "shunt"
            );
            assert_eq!(labels.is_positive(j), want, "{}", e.canonical_name);
        }
    }

    #[test]
    fn annotate_negation_and_normal_study() {
        let catalog = AbnormalityCatalog::default_schema();
        let resolver = RuleBasedResolver::default();
        let r = report("a", "no atrial septal defect seen", "normal study");
        let labels = annotate(&r, &catalog, &resolver);
        assert!(!labels.any_positive());
        let r2 = report("b", "", "normal study");
        assert!(!annotate(&r2, &catalog, &resolver).any_positive());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ids: Vec<String> = (0..2275).map(|i| format!("r{i}")).collect();
        let split = split_corpus(&ids, (9, 1), 7).unwrap();
        assert_eq!(split.test_ids.len(), 228);
        assert_eq!(split.train_ids.len(), 2047);
        let all: std::collections::HashSet<_> = split
            .train_ids
            .iter()
            .chain(&split.test_ids)
            .cloned()
            .collect();
        assert_eq!(all.len(), 2275);

        let ids10: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let s10 = split_corpus(&ids10, (9, 1), 7).unwrap();
        assert_eq!(s10.test_ids.len(), 1);
        assert_eq!(s10.train_ids.len(), 9);
    }

    #[test]
    fn split_deterministic_and_small_corpus_errors() {
        let ids: Vec<String> = (0..57).map(|i| format!("r{i}")).collect();
        let a = split_corpus(&ids, (9, 1), 99).unwrap();
        let b = split_corpus(&ids, (9, 1), 99).unwrap();
        assert_eq!(a, b);
        let few: Vec<String> = (0..9).map(|i| format!("r{i}")).collect();
        assert!(split_corpus(&few, (9, 1), 1).is_err());
    }
}
