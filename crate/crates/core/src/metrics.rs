//! Word error rate and WER recovery rate.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("reference must contain at least one word")]
    EmptyReference,
    #[error("seed WER {seed} must exceed oracle WER {oracle}")]
    NoGap { seed: f64, oracle: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum-cost alignment of `hyp` against `reference`. Among optimal
/// alignments the one with the fewest substitutions is chosen.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    // Cost is (edits, substitutions), compared lexicographically.
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![vec![((0usize, 0usize), EditCounts::default()); m + 1]; n + 1];
    for i in 1..=n {
        let mut c = dp[i - 1][0].1;
        c.deletions += 1;
        dp[i][0] = ((i, 0), c);
    }
    for j in 1..=m {
        let mut c = dp[0][j - 1].1;
        c.insertions += 1;
        dp[0][j] = ((j, 0), c);
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let ((de, ds), dc) = dp[i - 1][j - 1];
            let mut best = if same {
                ((de, ds), dc)
            } else {
                let mut c = dc;
                c.substitutions += 1;
                ((de + 1, ds + 1), c)
            };
            let ((e, s), c) = dp[i - 1][j];
            if (e + 1, s) < best.0 {
                let mut c = c;
                c.deletions += 1;
                best = ((e + 1, s), c);
            }
            let ((e, s), c) = dp[i][j - 1];
            if (e + 1, s) < best.0 {
                let mut c = c;
                c.insertions += 1;
                best = ((e + 1, s), c);
            }
            dp[i][j] = best;
        }
    }
    dp[n][m].1
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    align(a, b).errors()
}

pub fn word_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<WerResult, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let c = align(hyp, reference);
    Ok(WerResult {
        substitutions: c.substitutions,
        insertions: c.insertions,
        deletions: c.deletions,
        ref_words: reference.len(),
        wer: c.errors() as f64 / reference.len() as f64,
    })
}

/// Percentage of the seed-to-oracle WER gap recovered by `model_wer`.
pub fn wer_recovery_rate(seed_wer: f64, model_wer: f64, oracle_wer: f64) -> Result<f64, MetricsError> {
    if !(seed_wer > oracle_wer) {
        return Err(MetricsError::NoGap {
            seed: seed_wer,
            oracle: oracle_wer,
        });
    }
    Ok(100.0 * (seed_wer - model_wer) / (seed_wer - oracle_wer))
}

/// Per-utterance record of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub hypothesis: String,
    pub reference: String,
}

/// Corpus-level WER: summed errors over summed reference words.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusWer {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub utterances: usize,
}

impl CorpusWer {
    pub fn add(&mut self, r: &WerResult) {
        self.substitutions += r.substitutions;
        self.insertions += r.insertions;
        self.deletions += r.deletions;
        self.ref_words += r.ref_words;
        self.utterances += 1;
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// WER as a fraction; 0 for an empty aggregate.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub summary: CorpusWer,
    pub utterances: Vec<UtteranceScore>,
}

impl EvaluationReport {
    pub fn push(&mut self, id: &str, hypothesis: &str, reference: &str, r: &WerResult) {
        self.summary.add(r);
        self.utterances.push(UtteranceScore {
            id: id.to_string(),
            substitutions: r.substitutions,
            insertions: r.insertions,
            deletions: r.deletions,
            ref_words: r.ref_words,
            hypothesis: hypothesis.to_string(),
            reference: reference.to_string(),
        });
    }

    /// JSON lines: one record per utterance, then the summary.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for u in &self.utterances {
            s.push_str(&serde_json::to_string(u).expect("serializable"));
            s.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "utterances": self.summary.utterances,
            "substitutions": self.summary.substitutions,
            "insertions": self.summary.insertions,
            "deletions": self.summary.deletions,
            "ref_words": self.summary.ref_words,
            "wer": self.summary.wer(),
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        s
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a, b) {
            ([], _) => b.len(),
            (_, []) => a.len(),
            ([x, ra @ ..], [y, rb @ ..]) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn documented_examples() {
        let r = word_error_rate(&w("a b c"), &w("a b c")).unwrap();
        assert_eq!(r.wer, 0.0);
        let r = word_error_rate::<&str>(&[], &w("a b c d")).unwrap();
        assert_eq!((r.deletions, r.wer), (4, 1.0));
        let r = word_error_rate(&w("a b c d"), &w("a x c")).unwrap();
        assert_eq!(r.errors(), 2);
        assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 1, 0));
        assert!((r.wer - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(word_error_rate(&w("a"), &[]), Err(MetricsError::EmptyReference));
    }

    #[test]
    fn fewer_substitutions_preferred() {
        // "a b" vs "b c": distance 2 either as two subs or as one del + one ins.
        let c = align(&w("b c"), &w("a b"));
        assert_eq!(c.errors(), 2);
        assert_eq!(c.substitutions, 0);
    }

    #[test]
    fn recovery_rate() {
        assert!((wer_recovery_rate(7.5, 5.7, 3.9).unwrap() - 50.0).abs() < 0.05);
        assert_eq!(wer_recovery_rate(10.0, 4.0, 4.0).unwrap(), 100.0);
        assert_eq!(wer_recovery_rate(10.0, 10.0, 4.0).unwrap(), 0.0);
        assert!(wer_recovery_rate(10.0, 11.0, 4.0).unwrap() < 0.0);
        assert!(wer_recovery_rate(4.0, 4.0, 4.0).is_err());
    }

    #[test]
    fn agrees_with_recursive_oracle_exhaustively() {
        fn all(len: usize) -> Vec<Vec<u8>> {
            (0..=len)
                .flat_map(|l| {
                    (0..3usize.pow(l as u32)).map(move |mut k| {
                        (0..l)
                            .map(|_| {
                                let d = (k % 3) as u8;
                                k /= 3;
                                d
                            })
                            .collect()
                    })
                })
                .collect()
        }
        let short = all(4);
        let long: Vec<Vec<u8>> = all(6).into_iter().step_by(7).collect();
        for a in short.iter().chain(&long) {
            for b in &short {
                assert_eq!(edit_distance(a, b), brute(a, b), "{a:?} {b:?}");
                assert_eq!(edit_distance(b, a), brute(b, a));
            }
        }
    }

    #[test]
    fn corpus_aggregation_sums_before_dividing() {
        let mut c = CorpusWer::default();
        c.add(&word_error_rate(&w("a"), &w("b")).unwrap());
        c.add(&word_error_rate(&w("a b c"), &w("a b c")).unwrap());
        assert_eq!(c.wer(), 0.25);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn words() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..8)
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in words(), b in words()) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }

        #[test]
        fn triangle_inequality(a in words(), b in words(), c in words()) {
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn zero_iff_equal(a in words(), b in prop::collection::vec(0u8..4, 1..8)) {
            let r = word_error_rate(&a, &b).unwrap();
            prop_assert_eq!(r.wer == 0.0, a == b);
            prop_assert_eq!(r.wer, r.errors() as f64 / b.len() as f64);
        }

        #[test]
        fn relabeling_invariance(a in words(), b in prop::collection::vec(0u8..4, 1..8), shift in 1u8..4) {
            let rename = |v: &[u8]| v.iter().map(|x| (x + shift) % 4 + 10).collect::<Vec<u8>>();
            prop_assert_eq!(word_error_rate(&a, &b).unwrap(), word_error_rate(&rename(&a), &rename(&b)).unwrap());
        }
    }
}
