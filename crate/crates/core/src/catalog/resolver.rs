//! Presence resolution for abnormality mentions.
//!
//! The production system described by the upstream protocol delegates this
//! judgment to a large language model; here the default is a deterministic
//! rule: a whole-phrase synonym match counts as an assertion of presence
//! unless a negation cue ends within the four tokens preceding the match.
//! The trait keeps the seam open for an LLM-backed implementation.

use super::{word_tokens, AbnormalityEntity};

/// Decides whether an entity is asserted present in report text.
pub trait AbnormalityResolver: Sync {
    fn is_present(&self, text: &str, entity: &AbnormalityEntity) -> bool;
}

/// Synonym whole-phrase matching with a negation look-back window.
///
/// Hedged mentions ("possible small PFO") are treated as present.
#[derive(Debug, Clone)]
pub struct RuleBasedResolver {
    /// Number of tokens before a mention inside which a negation cue
    /// suppresses it.
    pub negation_window: usize,
}

impl Default for RuleBasedResolver {
    fn default() -> Self {
        RuleBasedResolver { negation_window: 4 }
    }
}

/// Positions where `phrase` occurs as a whole-token subsequence of `tokens`.
fn phrase_matches(tokens: &[String], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || tokens.len() < phrase.len() {
        return Vec::new();
    }
    (0..=tokens.len() - phrase.len())
        .filter(|&start| tokens[start..start + phrase.len()] == *phrase)
        .collect()
}

impl RuleBasedResolver {
    fn mention_negated(&self, tokens: &[String], start: usize, cues: &[Vec<String>]) -> bool {
        let window_start = start.saturating_sub(self.negation_window);
        for cue in cues {
            if cue.is_empty() || cue.len() > start {
                continue;
            }
            // The cue must end inside the look-back window.
            for cue_start in window_start..start {
                if cue_start + cue.len() <= start
                    && tokens[cue_start..cue_start + cue.len()] == *cue
                {
                    return true;
                }
            }
        }
        false
    }
}

impl AbnormalityResolver for RuleBasedResolver {
    fn is_present(&self, text: &str, entity: &AbnormalityEntity) -> bool {
        let tokens = word_tokens(text);
        if tokens.is_empty() {
            return false;
        }
        let cues: Vec<Vec<String>> = entity
            .negation_cues
            .iter()
            .map(|c| word_tokens(c))
            .collect();
        let mut surfaces: Vec<Vec<String>> = entity
            .synonyms
            .iter()
            .map(|s| word_tokens(s))
            .collect();
        let canon = word_tokens(&entity.canonical_name);
        if !surfaces.contains(&canon) {
            surfaces.push(canon);
        }
        for surface in &surfaces {
            for start in phrase_matches(&tokens, surface) {
                if !self.mention_negated(&tokens, start, &cues) {
                    return true;
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::knowledge;

    fn vsd() -> AbnormalityEntity {
        knowledge::known_entity("ventricular septal defect", 1).unwrap()
    }

    #[test]
    fn plain_mention_is_present() {
        let r = RuleBasedResolver::default();
        assert!(r.is_present("small ventricular septal defect with shunt", &vsd()));
        assert!(r.is_present("VSD noted.", &vsd()));
    }

    #[test]
    fn negated_mention_is_absent() {
        let r = RuleBasedResolver::default();
        assert!(!r.is_present("no ventricular septal defect seen", &vsd()));
        assert!(!r.is_present("negative for ventricular septal defect", &vsd()));
        assert!(!r.is_present("ruled out a ventricular septal defect", &vsd()));
    }

    #[test]
    fn cue_outside_window_does_not_suppress() {
        let r = RuleBasedResolver::default();
        // "no" sits five tokens before the mention.
        let text = "no pericardial effusion is seen today; ventricular septal defect present";
        assert!(r.is_present(text, &vsd()));
    }

    #[test]
    fn hedged_mention_counts_as_present() {
        let r = RuleBasedResolver::default();
        assert!(r.is_present("possible small ventricular septal defect", &vsd()));
    }

    #[test]
    fn later_affirmative_mention_overrides_earlier_negated_one() {
        let r = RuleBasedResolver::default();
        let text = "no ventricular septal defect initially; follow-up shows ventricular septal defect";
        assert!(r.is_present(text, &vsd()));
    }

    #[test]
    fn partial_token_does_not_match() {
        let r = RuleBasedResolver::default();
        // "interventricular" must not match the token "ventricular".
        assert!(!r.is_present("interventricular conduction delay", &vsd()));
    }
}
