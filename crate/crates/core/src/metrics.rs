//! Mixed Error Rate: edit-distance error rate over mixed units.
//!
//! Char-like language tokens count one unit each; word-like language tokens
//! group into units of `tokens_per_unit` (a trailing partial group is its
//! own unit). Hypothesis grouping works purely from token-id ranges — no
//! language tags exist on hypotheses. Alignment is Levenshtein with unit
//! costs 1/1/1; MER = (S + D + I) / N with N the reference unit count.

use serde::{Deserialize, Serialize};

use crate::data::{ToyLanguageSpec, UnitGranularity, Utterance};
use crate::error::{Error, Result};

/// One scoring unit: a char-like token or a word-like token group.
/// Equality compares the token content; languages have disjoint ranges, so
/// tokens determine the language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub lang: String,
    pub tokens: Vec<usize>,
}

/// Language name attached to tokens outside every registered range.
pub const UNKNOWN_LANG: &str = "<other>";

/// Groups a token sequence into units by token-id ranges.
pub fn units_of(tokens: &[usize], langs: &[ToyLanguageSpec]) -> Vec<Unit> {
    let mut units = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match langs.iter().find(|l| l.contains(tokens[i])) {
            Some(lang) if lang.unit_granularity == UnitGranularity::WordLike => {
                let mut group = Vec::with_capacity(lang.tokens_per_unit);
                while group.len() < lang.tokens_per_unit
                    && i < tokens.len()
                    && lang.contains(tokens[i])
                {
                    group.push(tokens[i]);
                    i += 1;
                }
                units.push(Unit { lang: lang.name.clone(), tokens: group });
            }
            Some(lang) => {
                units.push(Unit { lang: lang.name.clone(), tokens: vec![tokens[i]] });
                i += 1;
            }
            None => {
                units.push(Unit { lang: UNKNOWN_LANG.into(), tokens: vec![tokens[i]] });
                i += 1;
            }
        }
    }
    units
}

/// Reference-side unitization from the per-token language tags.
pub fn ref_units(utt: &Utterance, langs: &[ToyLanguageSpec]) -> Result<Vec<Unit>> {
    if utt.tokens.is_empty() {
        return Err(Error::InvalidArg(format!("empty reference utterance {}", utt.id)));
    }
    if utt.tokens.len() != utt.token_langs.len() {
        return Err(Error::InvalidArg(format!(
            "utterance {}: {} tokens but {} language tags",
            utt.id,
            utt.tokens.len(),
            utt.token_langs.len()
        )));
    }
    let mut units = Vec::new();
    let mut i = 0;
    while i < utt.tokens.len() {
        let name = &utt.token_langs[i];
        let spec = langs
            .iter()
            .find(|l| &l.name == name)
            .ok_or_else(|| Error::UnknownLanguage(name.clone()))?;
        match spec.unit_granularity {
            UnitGranularity::CharLike => {
                units.push(Unit { lang: name.clone(), tokens: vec![utt.tokens[i]] });
                i += 1;
            }
            UnitGranularity::WordLike => {
                let mut group = Vec::with_capacity(spec.tokens_per_unit);
                while group.len() < spec.tokens_per_unit
                    && i < utt.tokens.len()
                    && &utt.token_langs[i] == name
                {
                    group.push(utt.tokens[i]);
                    i += 1;
                }
                units.push(Unit { lang: name.clone(), tokens: group });
            }
        }
    }
    Ok(units)
}

/// Per-language error attribution: substitutions and deletions go to the
/// reference unit's language, insertions to the hypothesis unit's.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LangCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// reference unit count N
    pub ref_units: usize,
    pub per_lang: Vec<(String, LangCounts)>,
}

impl MerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn mer(&self) -> f64 {
        self.errors() as f64 / self.ref_units as f64
    }

    pub fn is_exact(&self) -> bool {
        self.errors() == 0
    }
}

/// Sums error counts over a corpus; MER is (ΣS + ΣD + ΣI) / ΣN.
pub fn merge_reports(reports: &[MerReport]) -> MerReport {
    let mut total = MerReport {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ref_units: 0,
        per_lang: Vec::new(),
    };
    for r in reports {
        total.substitutions += r.substitutions;
        total.deletions += r.deletions;
        total.insertions += r.insertions;
        total.ref_units += r.ref_units;
        for (lang, counts) in &r.per_lang {
            match total.per_lang.iter_mut().find(|(l, _)| l == lang) {
                Some((_, t)) => {
                    t.substitutions += counts.substitutions;
                    t.deletions += counts.deletions;
                    t.insertions += counts.insertions;
                    t.ref_units += counts.ref_units;
                }
                None => total.per_lang.push((lang.clone(), counts.clone())),
            }
        }
    }
    total
}

/// Aligns reference and hypothesis unit sequences and counts
/// substitutions, deletions, and insertions. The reference must be
/// nonempty. Tie-breaking order on equal cost: match, substitution,
/// deletion, insertion.
pub fn align_units(reference: &[Unit], hypothesis: &[Unit]) -> Result<MerReport> {
    if reference.is_empty() {
        return Err(Error::InvalidArg("mer: empty reference".into()));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let eq = reference[i - 1] == hypothesis[j - 1];
            let sub = dist[idx(i - 1, j - 1)] + usize::from(!eq);
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            dist[idx(i, j)] = sub.min(del).min(ins);
        }
    }

    let mut report = MerReport {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ref_units: n,
        per_lang: Vec::new(),
    };
    let lang_entry = |per_lang: &mut Vec<(String, LangCounts)>, lang: &str| -> usize {
        match per_lang.iter().position(|(l, _)| l == lang) {
            Some(pos) => pos,
            None => {
                per_lang.push((lang.to_string(), LangCounts::default()));
                per_lang.len() - 1
            }
        }
    };
    for unit in reference {
        let pos = lang_entry(&mut report.per_lang, &unit.lang);
        report.per_lang[pos].1.ref_units += 1;
    }

    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[idx(i, j)];
        if i > 0 && j > 0 {
            let eq = reference[i - 1] == hypothesis[j - 1];
            if dist[idx(i - 1, j - 1)] + usize::from(!eq) == here {
                if !eq {
                    report.substitutions += 1;
                    let pos = lang_entry(&mut report.per_lang, &reference[i - 1].lang);
                    report.per_lang[pos].1.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i - 1, j)] + 1 == here {
            report.deletions += 1;
            let pos = lang_entry(&mut report.per_lang, &reference[i - 1].lang);
            report.per_lang[pos].1.deletions += 1;
            i -= 1;
            continue;
        }
        report.insertions += 1;
        let pos = lang_entry(&mut report.per_lang, &hypothesis[j - 1].lang);
        report.per_lang[pos].1.insertions += 1;
        j -= 1;
    }
    debug_assert_eq!(report.errors(), dist[idx(n, m)]);
    Ok(report)
}

/// MER of a hypothesis token sequence against a reference utterance.
pub fn mer(reference: &Utterance, hypothesis: &[usize], langs: &[ToyLanguageSpec]) -> Result<MerReport> {
    let ref_seq = ref_units(reference, langs)?;
    let hyp_seq = units_of(hypothesis, langs);
    align_units(&ref_seq, &hyp_seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn langs() -> Vec<ToyLanguageSpec> {
        vec![
            ToyLanguageSpec::char_like("A", 0, 24),
            ToyLanguageSpec::word_like("B", 24, 48, 2),
        ]
    }

    fn utt(tokens: Vec<usize>, token_langs: Vec<&str>) -> Utterance {
        Utterance {
            id: "t".into(),
            tokens,
            token_langs: token_langs.into_iter().map(String::from).collect(),
            features: Tensor::zeros(1, 1),
        }
    }

    /// Independent oracle: plain full-table edit distance over units,
    /// no backtrace, no error-type split.
    fn oracle_distance(a: &[Unit], b: &[Unit]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        let mut curr = vec![0usize; b.len() + 1];
        for i in 1..=a.len() {
            curr[0] = i;
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
            }
            std::mem::swap(&mut prev, &mut curr);
        }
        prev[b.len()]
    }

    fn char_units(ids: &[usize]) -> Vec<Unit> {
        ids.iter().map(|&t| Unit { lang: "A".into(), tokens: vec![t] }).collect()
    }

    #[test]
    fn exact_hypothesis_scores_zero() {
        let reference = utt(vec![1, 2, 25, 26], vec!["A", "A", "B", "B"]);
        let report = mer(&reference, &[1, 2, 25, 26], &langs()).unwrap();
        assert_eq!(report.errors(), 0);
        assert!(report.is_exact());
        assert_eq!(report.mer(), 0.0);
    }

    #[test]
    fn worked_example_one_deletion_over_four_units_is_25_percent() {
        // ref: two char-like units + two word-like units (each one word of
        // 2 tokens); hyp drops the second char unit.
        let reference = utt(
            vec![1, 2, 25, 26, 30, 31],
            vec!["A", "A", "B", "B", "B", "B"],
        );
        let hyp = vec![1, 25, 26, 30, 31];
        let report = mer(&reference, &hyp, &langs()).unwrap();
        assert_eq!(report.ref_units, 4);
        assert_eq!(report.deletions, 1);
        assert_eq!(report.substitutions, 0);
        assert_eq!(report.insertions, 0);
        assert!((report.mer() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let reference = utt(vec![1, 2, 3], vec!["A", "A", "A"]);
        let report = mer(&reference, &[], &langs()).unwrap();
        assert_eq!(report.deletions, 3);
        assert!((report.mer() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_reference_is_rejected() {
        let reference = utt(vec![], vec![]);
        assert!(mer(&reference, &[1], &langs()).is_err());
    }

    #[test]
    fn one_extra_unit_on_a_perfect_hypothesis_costs_one_over_n() {
        let reference = utt(vec![1, 2, 3, 4], vec!["A", "A", "A", "A"]);
        let report = mer(&reference, &[1, 2, 3, 4, 5], &langs()).unwrap();
        assert_eq!(report.insertions, 1);
        assert!((report.mer() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn word_grouping_uses_token_ranges_on_the_hypothesis() {
        // 3 word-like tokens form one full word and one partial unit.
        let _reference = utt(vec![25, 26], vec!["B", "B"]);
        let hyp_units = units_of(&[25, 26, 27], &langs());
        assert_eq!(hyp_units.len(), 2);
        assert_eq!(hyp_units[0].tokens, vec![25, 26]);
        assert_eq!(hyp_units[1].tokens, vec![27]);
        // a char token interrupts a word group
        let mixed = units_of(&[25, 1, 26], &langs());
        assert_eq!(mixed.len(), 3);
    }

    #[test]
    fn unknown_token_ids_become_single_units() {
        // text ids outside every language range (48..56 in the toy layout)
        let hyp_units = units_of(&[50], &langs());
        assert_eq!(hyp_units[0].lang, UNKNOWN_LANG);
    }

    #[test]
    fn substitutions_plus_deletions_never_exceed_reference_length() {
        let reference = utt(vec![1, 2], vec!["A", "A"]);
        let report = mer(&reference, &[9, 9, 9, 9, 9, 9], &langs()).unwrap();
        assert!(report.substitutions + report.deletions <= report.ref_units);
    }

    #[test]
    fn per_language_counts_attribute_errors_to_the_right_side() {
        // unambiguous single deletion of a char-like A unit
        let reference = utt(vec![1, 25, 26], vec!["A", "B", "B"]);
        let report = mer(&reference, &[25, 26], &langs()).unwrap();
        assert_eq!(report.errors(), 1);
        let a = report.per_lang.iter().find(|(l, _)| l == "A").unwrap();
        assert_eq!(a.1.deletions, 1);

        // unambiguous single insertion of a word-like B unit
        let reference = utt(vec![1], vec!["A"]);
        let report = mer(&reference, &[1, 30, 31], &langs()).unwrap();
        assert_eq!(report.errors(), 1);
        let b = report.per_lang.iter().find(|(l, _)| l == "B").unwrap();
        assert_eq!(b.1.insertions, 1);
        let a = report.per_lang.iter().find(|(l, _)| l == "A").unwrap();
        assert_eq!(a.1.ref_units, 1);
    }

    #[test]
    fn exhaustive_agreement_with_oracle_on_short_sequences() {
        // All pairs over a 6-unit alphabet with len(ref) in 1..=3 and
        // len(hyp) in 0..=3.
        let alphabet: Vec<usize> = (0..6).collect();
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=3 {
            let mut next = Vec::new();
            for s in seqs.iter().filter(|s| s.len() == len - 1) {
                for &a in &alphabet {
                    let mut t = s.clone();
                    t.push(a);
                    next.push(t);
                }
            }
            seqs.extend(next);
        }
        let mut checked = 0usize;
        for r in seqs.iter().filter(|s| !s.is_empty()) {
            for h in &seqs {
                let ru = char_units(r);
                let hu = char_units(h);
                let report = align_units(&ru, &hu).unwrap();
                assert_eq!(report.errors(), oracle_distance(&ru, &hu), "ref {r:?} hyp {h:?}");
                checked += 1;
            }
        }
        assert!(checked > 50_000, "checked {checked}");
    }

    #[test]
    fn exhaustive_agreement_with_oracle_on_binary_alphabet_up_to_len_8() {
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..8 {
            let max_len = seqs.iter().map(|s| s.len()).max().unwrap();
            let mut next = Vec::new();
            for s in seqs.iter().filter(|s| s.len() == max_len) {
                for a in 0..2usize {
                    let mut t = s.clone();
                    t.push(a);
                    next.push(t);
                }
            }
            seqs.extend(next);
        }
        assert_eq!(seqs.len(), 511);
        for r in seqs.iter().filter(|s| !s.is_empty()) {
            for h in &seqs {
                let ru = char_units(r);
                let hu = char_units(h);
                let report = align_units(&ru, &hu).unwrap();
                assert_eq!(report.errors(), oracle_distance(&ru, &hu));
            }
        }
    }

    proptest! {
        #[test]
        fn random_pairs_match_oracle(
            r in proptest::collection::vec(0usize..6, 1..20),
            h in proptest::collection::vec(0usize..6, 0..20),
        ) {
            let ru = char_units(&r);
            let hu = char_units(&h);
            let report = align_units(&ru, &hu).unwrap();
            prop_assert_eq!(report.errors(), oracle_distance(&ru, &hu));
            prop_assert!(report.substitutions + report.deletions <= ru.len());
            prop_assert_eq!(report.errors() == 0, r == h);
        }
    }
}
