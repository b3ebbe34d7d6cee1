//! Word error rate and corpus evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Example;
use crate::error::Result;
use crate::model::{decode_greedy, Model};
use crate::tree::ParameterTree;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; infinite when the reference is empty but the hypothesis is not.
    pub fn wer(&self) -> f64 {
        match (self.errors(), self.reference_len) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

/// Minimal-cost alignment with unit costs.
///
/// Among alignments of equal cost the one with fewer insertions wins, then
/// the one with fewer deletions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerBreakdown {
    // (cost, insertions, deletions); tuple order is the tie-break order
    type Cell = (usize, usize, usize);
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, j, 0)).collect();
    let mut cur: Vec<Cell> = vec![(0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i);
        for j in 1..=m {
            let (c, ins, del) = prev[j - 1];
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                (c, ins, del)
            } else {
                (c + 1, ins, del)
            };
            let (c, ins, del) = prev[j];
            let up = (c + 1, ins, del + 1);
            let (c, ins, del) = cur[j - 1];
            let left = (c + 1, ins + 1, del);
            cur[j] = diag.min(up).min(left);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, insertions, deletions) = prev[m];
    WerBreakdown {
        substitutions: cost - insertions - deletions,
        deletions,
        insertions,
        reference_len: n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Corpus-pooled: total errors over total reference tokens.
    pub wer: f64,
    /// Mean over utterances of the per-frame cross-entropy.
    pub loss: f64,
    pub errors: usize,
    pub reference_tokens: usize,
}

/// Pools per-utterance breakdowns into one corpus WER.
pub fn pooled_wer(parts: &[WerBreakdown]) -> f64 {
    let total = parts.iter().fold(WerBreakdown::default(), |acc, p| WerBreakdown {
        substitutions: acc.substitutions + p.substitutions,
        deletions: acc.deletions + p.deletions,
        insertions: acc.insertions + p.insertions,
        reference_len: acc.reference_len + p.reference_len,
    });
    total.wer()
}

pub fn evaluate(model: &Model, tree: &ParameterTree, examples: &[Example]) -> Result<EvalMetrics> {
    let mut parts = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for ex in examples {
        let logits = model.logits_value(tree, &ex.features)?;
        let hyp = decode_greedy(&logits, model.config.blank());
        parts.push(edit_distance(&ex.tokens, &hyp));
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let mask = vec![true; ex.frame_labels.len()];
        let x = tape.softmax_xent(l, &ex.frame_labels, &mask)?;
        loss += tape.value(x).item();
    }
    Ok(EvalMetrics {
        wer: pooled_wer(&parts),
        loss: if examples.is_empty() { 0.0 } else { loss / examples.len() as f64 },
        errors: parts.iter().map(WerBreakdown::errors).sum(),
        reference_tokens: parts.iter().map(|p| p.reference_len).sum(),
    })
}
