use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// `BOS ... EOS`.
    pub tokens: Vec<usize>,
    pub log_score: f64,
    /// Reached the length limit before emitting EOS.
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens between BOS and EOS.
    pub fn body(&self) -> &[usize] {
        let end = self.tokens.len().saturating_sub(1);
        &self.tokens[1.min(end)..end]
    }
}

/// Hypotheses sorted by descending log-score.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
}

/// One line of an n-best dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    pub rank: usize,
    pub text: String,
    pub log_score: f64,
}

fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

impl NBestList {
    /// Sorts the given hypotheses into rank order.
    pub fn new(mut hypotheses: Vec<Hypothesis>) -> Self {
        hypotheses.sort_by(rank_order);
        Self { hypotheses }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn top1(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    pub fn texts(&self, tok: &Tokenizer) -> Vec<String> {
        self.hypotheses
            .iter()
            .map(|h| tok.decode(&h.tokens))
            .collect()
    }

    pub fn records(&self, id: &str, tok: &Tokenizer) -> Vec<NBestRecord> {
        self.hypotheses
            .iter()
            .enumerate()
            .map(|(rank, h)| NBestRecord {
                id: id.to_string(),
                rank,
                text: tok.decode(&h.tokens),
                log_score: h.log_score,
            })
            .collect()
    }

    /// Rebuilds a list from dumped records of one utterance.
    pub fn from_records(records: &[NBestRecord], tok: &Tokenizer) -> Self {
        let mut recs: Vec<&NBestRecord> = records.iter().collect();
        recs.sort_by_key(|r| r.rank);
        let hypotheses = recs
            .into_iter()
            .map(|r| Hypothesis {
                tokens: tok.encode_delimited(&r.text),
                log_score: r.log_score,
                truncated: false,
            })
            .collect();
        Self { hypotheses }
    }
}

/// Autoregressive scorer driven by [`beam_search`].
pub trait BeamModel {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Feeds `token` and returns the next state with log-probabilities over the vocabulary.
    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum number of emitted tokens, EOS included.
    pub max_len: usize,
    /// Tokens that may be emitted; everything else is skipped.
    pub allowed: Vec<usize>,
}

struct Live<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    log_probs: Vec<f64>,
}

fn candidate_order(a: &(f64, usize, usize, usize), b: &(f64, usize, usize, usize)) -> Ordering {
    // (score, token, length, parent)
    b.0.total_cmp(&a.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

/// Greedy decoding: argmax at every step, smallest id on ties.
pub fn greedy<M: BeamModel>(model: &mut M, cfg: &BeamConfig) -> Result<Hypothesis> {
    let s0 = model.initial()?;
    let (mut state, mut lp) = model.step(&s0, BOS)?;
    let mut tokens = vec![BOS];
    let mut score = 0.0;
    for _ in 0..cfg.max_len {
        let tok = best_allowed(&lp, &cfg.allowed)?;
        score += lp[tok];
        tokens.push(tok);
        if tok == EOS {
            return Ok(Hypothesis {
                tokens,
                log_score: score,
                truncated: false,
            });
        }
        let next = model.step(&state, tok)?;
        state = next.0;
        lp = next.1;
    }
    tokens.push(EOS);
    Ok(Hypothesis {
        tokens,
        log_score: score,
        truncated: true,
    })
}

fn best_allowed(lp: &[f64], allowed: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &t in allowed {
        let v = *lp.get(t).ok_or(Error::TokenOutOfRange {
            id: t,
            size: lp.len(),
        })?;
        match best {
            Some(b) if lp[b] > v || (lp[b] == v && b < t) => {}
            _ => best = Some(t),
        }
    }
    best.ok_or(Error::Empty("allowed tokens"))
}

/// Beam search returning up to `cfg.beam` finished hypotheses.
///
/// The greedy path is always part of the candidate pool, so the best returned
/// score is never below the beam-1 result.
pub fn beam_search<M: BeamModel>(model: &mut M, cfg: &BeamConfig) -> Result<NBestList> {
    if cfg.beam == 0 {
        return Err(Error::invalid("beam must be at least 1"));
    }
    if cfg.allowed.is_empty() {
        return Err(Error::Empty("allowed tokens"));
    }
    let greedy_hyp = if cfg.beam > 1 {
        Some(greedy(model, cfg)?)
    } else {
        None
    };

    let s0 = model.initial()?;
    let (state, log_probs) = model.step(&s0, BOS)?;
    let mut live = vec![Live {
        tokens: vec![BOS],
        score: 0.0,
        state,
        log_probs,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, usize, usize)> =
            Vec::with_capacity(live.len() * cfg.allowed.len());
        for (p, l) in live.iter().enumerate() {
            for &t in &cfg.allowed {
                let v = *l.log_probs.get(t).ok_or(Error::TokenOutOfRange {
                    id: t,
                    size: l.log_probs.len(),
                })?;
                cands.push((l.score + v, t, l.tokens.len() + 1, p));
            }
        }
        cands.sort_by(candidate_order);
        cands.truncate(cfg.beam);

        let last_step = step + 1 == cfg.max_len;
        let mut next = Vec::with_capacity(cfg.beam);
        for (score, tok, _, p) in cands {
            let mut tokens = live[p].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_score: score,
                    truncated: false,
                });
            } else if last_step {
                tokens.push(EOS);
                finished.push(Hypothesis {
                    tokens,
                    log_score: score,
                    truncated: true,
                });
            } else {
                let (state, log_probs) = model.step(&live[p].state, tok)?;
                next.push(Live {
                    tokens,
                    score,
                    state,
                    log_probs,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Log-probabilities are non-positive, so live scores only fall.
        if finished.len() >= cfg.beam {
            finished.sort_by(rank_order);
            let kth = finished[cfg.beam - 1].log_score;
            if live.iter().all(|l| l.score <= kth) {
                break;
            }
        }
    }

    if let Some(g) = greedy_hyp {
        if !finished.iter().any(|h| h.tokens == g.tokens) {
            finished.push(g);
        }
    }
    let mut list = NBestList::new(finished);
    list.hypotheses.truncate(cfg.beam);
    Ok(list)
}
