use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn normalized<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    words
        .iter()
        .flat_map(|w| normalize_words(w.as_ref()))
        .collect()
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> usize {
    let r = normalized(reference);
    let h = normalized(hypothesis);
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()]
}

/// `(S + I + D) / |reference|`. May exceed 1.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    let n = normalized(reference).len();
    if n == 0 {
        return Err(Error::Empty("reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / n as f64)
}

/// [`wer`] on raw strings.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<f64> {
    wer(&normalize_words(reference), &normalize_words(hypothesis))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Hit,
    Substitution,
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub op: EditOp,
    pub reference: Option<String>,
    pub hypothesis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub hits: usize,
    pub pairs: Vec<AlignedPair>,
}

impl EditAlignment {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn reference_len(&self) -> usize {
        self.substitutions + self.deletions + self.hits
    }

    pub fn hypothesis_len(&self) -> usize {
        self.substitutions + self.insertions + self.hits
    }
}

/// Minimal edit alignment via a full DP table and backtrace.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditAlignment {
    let r = normalized(reference);
    let h = normalized(hypothesis);
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = EditAlignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            let op = if r[i - 1] == h[j - 1] {
                out.hits += 1;
                EditOp::Hit
            } else {
                out.substitutions += 1;
                EditOp::Substitution
            };
            out.pairs.push(AlignedPair {
                op,
                reference: Some(r[i - 1].clone()),
                hypothesis: Some(h[j - 1].clone()),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.deletions += 1;
            out.pairs.push(AlignedPair {
                op: EditOp::Deletion,
                reference: Some(r[i - 1].clone()),
                hypothesis: None,
            });
            i -= 1;
        } else {
            out.insertions += 1;
            out.pairs.push(AlignedPair {
                op: EditOp::Insertion,
                reference: None,
                hypothesis: Some(h[j - 1].clone()),
            });
            j -= 1;
        }
    }
    out.pairs.reverse();
    out
}

/// Corpus-level WER: total edits over total reference words.
pub fn pooled_wer<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        let rw = normalize_words(r);
        edits += edit_distance(&rw, &normalize_words(h));
        words += rw.len();
    }
    if words == 0 {
        return Err(Error::Empty("reference"));
    }
    Ok(edits as f64 / words as f64)
}
