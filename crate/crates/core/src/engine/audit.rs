//! Checks that every class description can be traced to its origin: the
//! previous version, or text some model actually produced.

use super::{ThetaOrigin, TranscriptEntry, VerbalParameters};
use crate::prompting::RoleTag;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Untraced {
    pub step: usize,
    pub label: String,
    pub description: String,
}

/// Audits a chain of versions `thetas[0..]` (consecutive steps) against the
/// transcript. Returns the descriptions that could not be traced.
pub fn audit_lineage(
    thetas: &[VerbalParameters],
    transcript: &[TranscriptEntry],
    max_desc_words: usize,
) -> Vec<Untraced> {
    let completions: Vec<&str> = transcript
        .iter()
        .filter(|e| matches!(e.role, RoleTag::Optimizer | RoleTag::Summary))
        .filter_map(|e| e.completion.as_deref())
        .collect();
    let mut out = Vec::new();
    for pair in thetas.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        for class in &next.per_class {
            let before = prev.get(&class.label).unwrap_or_default();
            let d = class.description.as_str();
            let traced = d == before
                || completions.iter().any(|c| c.contains(d))
                || (next.origin == ThetaOrigin::AblationConcat
                    && concat_traceable(before, d, &completions, max_desc_words));
            if !traced {
                out.push(Untraced {
                    step: next.step,
                    label: class.label.clone(),
                    description: d.to_string(),
                });
            }
        }
    }
    out
}

/// Under the no-summary ablation a description is the previous one followed
/// by revision texts, possibly truncated. Every appended word run must come
/// from a completion.
fn concat_traceable(before: &str, d: &str, completions: &[&str], max_desc_words: usize) -> bool {
    let Some(rest) = d.strip_prefix(before) else {
        let before_words: Vec<&str> = before.split_whitespace().collect();
        let d_words: Vec<&str> = d.split_whitespace().collect();
        return d_words.len() == max_desc_words && before_words.starts_with(&d_words);
    };
    let rest = rest.trim_start();
    if rest.is_empty() {
        return true;
    }
    // Greedy: peel off the longest prefix found in some completion.
    let words: Vec<&str> = rest.split_whitespace().collect();
    let mut i = 0;
    while i < words.len() {
        let mut j = words.len();
        while j > i
            && !completions
                .iter()
                .any(|c| c.contains(&words[i..j].join(" ")))
        {
            j -= 1;
        }
        if j == i {
            return false;
        }
        i = j;
    }
    true
}
