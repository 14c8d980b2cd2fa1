//! Mispronunciation detection and diagnosis metrics.
//!
//! Detection outcomes per canonical phoneme follow the four-way taxonomy:
//! true acceptance (spoken and recognized as canonical), false rejection
//! (spoken canonically, recognized as something else), false acceptance
//! (mispronounced, recognized as canonical) and true rejection
//! (mispronounced, recognized as non-canonical). True rejections split into
//! correct diagnoses (the recognizer output matches what was actually said)
//! and diagnostic errors. Rates with a 0/0 denominator are reported as null,
//! never as 0.
//!
//! The three sequences are joined by pivoting two pairwise alignments on the
//! canonical sequence; insertions relative to the canonical sequence do not
//! enter the taxonomy and count only toward the phoneme error rate, which is
//! measured against the annotated (actually spoken) sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::token_to_phoneme;
use crate::util::par_map;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference sequence for utterance {0:?}")]
    EmptyReference(String),
    #[error("no utterances to aggregate")]
    NoUtterances,
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyReference(_) => "empty_reference",
            EvalError::NoUtterances => "no_utterances",
        }
    }
}

/// One step of a minimal edit script between sequences `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Del { a: usize },
    Ins { b: usize },
}

/// Minimal unit-cost alignment with a deterministic tie-break: at equal cost
/// prefer match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(a: &[T], b: &[T]) -> Vec<EditOp> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + sub_cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cost = dp[idx(i, j)];
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && dp[idx(i - 1, j - 1)] == cost {
            ops.push(EditOp::Match { a: i - 1, b: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dp[idx(i - 1, j - 1)] + 1 == cost {
            ops.push(EditOp::Sub { a: i - 1, b: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[idx(i - 1, j)] + 1 == cost {
            ops.push(EditOp::Del { a: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { b: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Detection outcome of one canonical position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TrueAcceptance,
    FalseRejection,
    FalseAcceptance,
    CorrectDiagnosis,
    DiagnosticError,
}

/// Canonical position with its aligned annotated and predicted symbols;
/// `None` marks a deletion, treated as a distinguished null phone unequal to
/// every real phone (and equal to itself).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedTriple {
    pub canonical: String,
    pub annotated: Option<String>,
    pub predicted: Option<String>,
    pub outcome: Outcome,
}

/// Taxonomy counts. `tr = cd + de` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MddCounts {
    pub ta: u64,
    pub fr: u64,
    pub fa: u64,
    pub tr: u64,
    pub cd: u64,
    pub de: u64,
}

impl MddCounts {
    pub fn merge(mut self, o: &MddCounts) -> Self {
        self.ta += o.ta;
        self.fr += o.fr;
        self.fa += o.fa;
        self.tr += o.tr;
        self.cd += o.cd;
        self.de += o.de;
        self
    }
}

/// Edit statistics of predicted vs annotated, the inputs to PER.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_len: u64,
    /// Substitutions where both sides are tonal finals sharing a base and
    /// differing only in tone.
    pub tone_substitutions: u64,
}

impl EditCounts {
    pub fn merge(mut self, o: &EditCounts) -> Self {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_len += o.ref_len;
        self.tone_substitutions += o.tone_substitutions;
        self
    }

    pub fn total_edits(&self) -> u64 {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Derived rates; `None` is a 0/0 denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub frr: Option<f64>,
    pub far: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub per: Option<f64>,
    pub der: Option<f64>,
    pub tone_sub_per: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

impl Rates {
    pub fn from_counts(c: &MddCounts, e: &EditCounts) -> Self {
        let precision = ratio(c.tr, c.fr + c.tr);
        let recall = ratio(c.tr, c.fa + c.tr);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            frr: ratio(c.fr, c.fr + c.ta),
            far: ratio(c.fa, c.fa + c.tr),
            precision,
            recall,
            f1,
            per: ratio(e.total_edits(), e.ref_len),
            der: ratio(c.de, c.cd + c.de),
            tone_sub_per: ratio(e.tone_substitutions, e.ref_len),
        }
    }
}

/// Full report: counts plus derived rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MddReport {
    pub utterances: u64,
    pub counts: MddCounts,
    pub edits: EditCounts,
    pub rates: Rates,
}

/// Classifies every canonical position by pivoting the two pairwise
/// alignments on the canonical sequence.
pub fn classify(
    canonical: &[String],
    annotated: &[String],
    predicted: &[String],
) -> (Vec<AlignedTriple>, MddCounts) {
    let pivot = |other: &[String]| -> Vec<Option<String>> {
        let mut at: Vec<Option<String>> = vec![None; canonical.len()];
        for op in align(canonical, other) {
            match op {
                EditOp::Match { a, b } | EditOp::Sub { a, b } => at[a] = Some(other[b].clone()),
                EditOp::Del { .. } | EditOp::Ins { .. } => {}
            }
        }
        at
    };
    let spoken = pivot(annotated);
    let recognized = pivot(predicted);

    let mut counts = MddCounts::default();
    let mut triples = Vec::with_capacity(canonical.len());
    for (i, canon) in canonical.iter().enumerate() {
        let s = &spoken[i];
        let p = &recognized[i];
        let s_canon = s.as_deref() == Some(canon.as_str());
        let p_canon = p.as_deref() == Some(canon.as_str());
        let outcome = match (s_canon, p_canon) {
            (true, true) => {
                counts.ta += 1;
                Outcome::TrueAcceptance
            }
            (true, false) => {
                counts.fr += 1;
                Outcome::FalseRejection
            }
            (false, true) => {
                counts.fa += 1;
                Outcome::FalseAcceptance
            }
            (false, false) => {
                counts.tr += 1;
                if p == s {
                    counts.cd += 1;
                    Outcome::CorrectDiagnosis
                } else {
                    counts.de += 1;
                    Outcome::DiagnosticError
                }
            }
        };
        triples.push(AlignedTriple {
            canonical: canon.clone(),
            annotated: s.clone(),
            predicted: p.clone(),
            outcome,
        });
    }
    (triples, counts)
}

fn is_tone_substitution(a: &str, b: &str) -> bool {
    match (token_to_phoneme(a), token_to_phoneme(b)) {
        (Some(pa), Some(pb)) => {
            !pa.is_initial() && !pb.is_initial() && pa.base() == pb.base() && pa.tone() != pb.tone()
        }
        _ => false,
    }
}

/// Edit statistics of `hypothesis` against `reference`; the reference must be
/// non-empty.
pub fn edit_stats(
    utt_id: &str,
    reference: &[String],
    hypothesis: &[String],
) -> Result<EditCounts, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference(utt_id.to_string()));
    }
    let mut e = EditCounts { ref_len: reference.len() as u64, ..Default::default() };
    for op in align(reference, hypothesis) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Sub { a, b } => {
                e.substitutions += 1;
                if is_tone_substitution(&reference[a], &hypothesis[b]) {
                    e.tone_substitutions += 1;
                }
            }
            EditOp::Del { .. } => e.deletions += 1,
            EditOp::Ins { .. } => e.insertions += 1,
        }
    }
    Ok(e)
}

/// Phoneme error rate `(S + D + I) / N` of `hypothesis` against `reference`.
pub fn per(reference: &[String], hypothesis: &[String]) -> Result<f64, EvalError> {
    let e = edit_stats("", reference, hypothesis)?;
    Ok(e.total_edits() as f64 / e.ref_len as f64)
}

/// One manifest line of an evaluation input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub utt_id: String,
    pub canonical: Vec<String>,
    pub annotated: Vec<String>,
    pub predicted: Vec<String>,
}

/// Per-utterance evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub utt_id: String,
    pub triples: Vec<AlignedTriple>,
    pub counts: MddCounts,
    pub edits: EditCounts,
}

/// Evaluates one utterance: taxonomy on the canonical pivot, edits against
/// the annotated sequence.
pub fn evaluate_utterance(rec: &EvalRecord) -> Result<UtteranceEval, EvalError> {
    let (triples, counts) = classify(&rec.canonical, &rec.annotated, &rec.predicted);
    let edits = edit_stats(&rec.utt_id, &rec.annotated, &rec.predicted)?;
    Ok(UtteranceEval { utt_id: rec.utt_id.clone(), triples, counts, edits })
}

/// Micro-averaged corpus report: counts summed over utterances before any
/// rate is formed.
pub fn aggregate(evals: &[UtteranceEval]) -> Result<MddReport, EvalError> {
    if evals.is_empty() {
        return Err(EvalError::NoUtterances);
    }
    let counts = evals
        .iter()
        .fold(MddCounts::default(), |acc, e| acc.merge(&e.counts));
    let edits = evals
        .iter()
        .fold(EditCounts::default(), |acc, e| acc.merge(&e.edits));
    Ok(MddReport {
        utterances: evals.len() as u64,
        counts,
        edits,
        rates: Rates::from_counts(&counts, &edits),
    })
}

/// Evaluates a corpus, utterances in parallel, reduction in input order.
pub fn evaluate_corpus(records: &[EvalRecord]) -> Result<(Vec<UtteranceEval>, MddReport), EvalError> {
    let evals = par_map(records, evaluate_utterance)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let report = aggregate(&evals)?;
    Ok((evals, report))
}
