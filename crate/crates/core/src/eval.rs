//! Word error rates of the acoustic 1-best and the corrected output, per test split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyp_text::{edit_distance, normalize_words, pooled_wer, wer_str};
use crate::speech_sim::SplitName;

/// One utterance before and after correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub reference: String,
    pub asr_1best: String,
    pub corrected: String,
    pub wer_before: f64,
    pub wer_after: f64,
}

impl CaseRecord {
    pub fn new(
        id: impl Into<String>,
        reference: impl Into<String>,
        asr_1best: impl Into<String>,
        corrected: impl Into<String>,
    ) -> Result<Self> {
        let (reference, asr_1best, corrected) =
            (reference.into(), asr_1best.into(), corrected.into());
        Ok(Self {
            id: id.into(),
            wer_before: wer_str(&reference, &asr_1best)?,
            wer_after: wer_str(&reference, &corrected)?,
            reference,
            asr_1best,
            corrected,
        })
    }

    /// Recomputes both rates from the stored strings.
    pub fn verify(&self) -> Result<()> {
        let b = wer_str(&self.reference, &self.asr_1best)?;
        let a = wer_str(&self.reference, &self.corrected)?;
        if b != self.wer_before || a != self.wer_after {
            return Err(Error::invalid(format!(
                "case {} has stale word error rates",
                self.id
            )));
        }
        Ok(())
    }

    pub fn improvement(&self) -> f64 {
        self.wer_before - self.wer_after
    }
}

/// Aggregates of one split. Every number derives from `cases`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub split: SplitName,
    pub utterances: usize,
    pub reference_words: usize,
    pub asr_pooled: f64,
    pub ger_pooled: f64,
    pub asr_mean: f64,
    pub ger_mean: f64,
    /// `ger - asr`, pooled.
    pub delta_pooled: f64,
    pub delta_mean: f64,
    /// Sorted by improvement, largest first.
    pub cases: Vec<CaseRecord>,
}

impl SplitEval {
    pub fn from_cases(split: SplitName, mut cases: Vec<CaseRecord>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Empty("evaluation cases"));
        }
        let n = cases.len() as f64;
        let asr_pooled = pooled_wer(
            cases
                .iter()
                .map(|c| (c.reference.as_str(), c.asr_1best.as_str())),
        )?;
        let ger_pooled = pooled_wer(
            cases
                .iter()
                .map(|c| (c.reference.as_str(), c.corrected.as_str())),
        )?;
        let asr_mean = cases.iter().map(|c| c.wer_before).sum::<f64>() / n;
        let ger_mean = cases.iter().map(|c| c.wer_after).sum::<f64>() / n;
        let reference_words = cases
            .iter()
            .map(|c| normalize_words(&c.reference).len())
            .sum();
        cases.sort_by(|a, b| {
            b.improvement()
                .total_cmp(&a.improvement())
                .then_with(|| a.id.cmp(&b.id))
        });
        Ok(Self {
            split,
            utterances: cases.len(),
            reference_words,
            asr_pooled,
            ger_pooled,
            asr_mean,
            ger_mean,
            delta_pooled: ger_pooled - asr_pooled,
            delta_mean: ger_mean - asr_mean,
            cases,
        })
    }

    /// Total word edits of the corrected outputs.
    pub fn corrected_edits(&self) -> usize {
        self.cases
            .iter()
            .map(|c| {
                edit_distance(
                    &normalize_words(&c.reference),
                    &normalize_words(&c.corrected),
                )
            })
            .sum()
    }
}

/// Baseline and corrected rates over the test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitEval>,
}

impl EvalReport {
    pub fn split(&self, name: SplitName) -> Option<&SplitEval> {
        self.splits.iter().find(|s| s.split == name)
    }

    /// Recomputes every aggregate from the per-case records.
    pub fn verify(&self) -> Result<()> {
        for s in &self.splits {
            for c in &s.cases {
                c.verify()?;
            }
            let again = SplitEval::from_cases(s.split, s.cases.clone())?;
            if &again != s {
                return Err(Error::invalid(format!(
                    "aggregates of {} disagree with cases",
                    s.split.label()
                )));
            }
        }
        Ok(())
    }

    /// Plain-text matrix: one row per system, one column per split, pooled WER in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "system");
        for s in &self.splits {
            let _ = write!(out, "{:>14}", s.split.label());
        }
        out.push('\n');
        for (name, pick) in [("asr 1-best", 0), ("corrected", 1), ("delta", 2)] {
            let _ = write!(out, "{name:<16}");
            for s in &self.splits {
                let v = match pick {
                    0 => s.asr_pooled,
                    1 => s.ger_pooled,
                    _ => s.delta_pooled,
                };
                let _ = write!(out, "{:>13.2}%", 100.0 * v);
            }
            out.push('\n');
        }
        out
    }

    /// The `n` most improved cases of each split.
    pub fn case_dump(&self, n: usize) -> String {
        let mut out = String::new();
        for s in &self.splits {
            let _ = writeln!(out, "== {} ==", s.split.label());
            for c in s.cases.iter().take(n) {
                let _ = writeln!(out, "{}", c.id);
                let _ = writeln!(out, "  truth     : {}", c.reference);
                let _ = writeln!(
                    out,
                    "  1-best    : {}  ({:.2}%)",
                    c.asr_1best,
                    100.0 * c.wer_before
                );
                let _ = writeln!(
                    out,
                    "  corrected : {}  ({:.2}%)",
                    c.corrected,
                    100.0 * c.wer_after
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: &str = "pour mayonnaise over all chill and serve";

    #[test]
    fn error_case_table_rows() {
        let c = CaseRecord::new(
            "x",
            REF,
            "pour may raise over all chille at serve",
            "pour mayonnaise over all chili and serve",
        )
        .unwrap();
        assert!((100.0 * c.wer_before - 57.14).abs() < 0.01);
        assert!((100.0 * c.wer_after - 14.29).abs() < 0.01);
        assert_eq!(wer_str(REF, REF).unwrap(), 0.0);
    }

    #[test]
    fn aggregates_follow_cases() {
        let cases = vec![
            CaseRecord::new("a", "a b c d", "a x c d", "a b c d").unwrap(),
            CaseRecord::new("b", "e f", "e f", "e g").unwrap(),
        ];
        let s = SplitEval::from_cases(SplitName::TestInDomain, cases).unwrap();
        assert_eq!(s.asr_pooled, 1.0 / 6.0);
        assert_eq!(s.ger_pooled, 1.0 / 6.0);
        assert_eq!(s.asr_mean, 0.125);
        assert_eq!(s.ger_mean, 0.25);
        assert_eq!(s.delta_mean, 0.125);
        assert_eq!(s.cases[0].id, "a");
        assert_eq!(s.corrected_edits(), 1);
        let r = EvalReport { splits: vec![s] };
        r.verify().unwrap();
        assert!(r.table().contains("16.67%"));
    }

    #[test]
    fn perfect_correction_is_zero() {
        let cases = vec![CaseRecord::new("a", "a b", "a c", "a b").unwrap()];
        let s = SplitEval::from_cases(SplitName::TestClean, cases).unwrap();
        assert_eq!(s.ger_pooled, 0.0);
        assert_eq!(s.delta_pooled, -0.5);
    }

    #[test]
    fn tampered_case_fails_verification() {
        let mut c = CaseRecord::new("a", "a b", "a c", "a b").unwrap();
        c.wer_after = 0.1;
        assert!(c.verify().is_err());
    }
}
