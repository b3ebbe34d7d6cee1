//! Training objectives: supervised frame classification and masked SSL.

use crate::autodiff::{Precision, Tape, Var};
use crate::data::{Example, SslBatch};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalMetrics};
use crate::model::Model;
use crate::tree::{ParamMap, ParameterTree};

/// Something a trainer can differentiate and evaluate.
pub trait Objective: Sync {
    /// Mean loss over `batch` and gradients for every trainable leaf.
    fn loss_and_grads(&self, tree: &ParameterTree, batch: &[&Example]) -> Result<(f64, ParamMap)>;

    fn evaluate(&self, tree: &ParameterTree, examples: &[Example]) -> Result<EvalMetrics>;
}

/// Frame-level cross-entropy against the generator's frame labels.
#[derive(Clone, Debug)]
pub struct FrameObjective {
    pub model: Model,
    pub precision: Precision,
}

impl FrameObjective {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            precision: Precision::F64,
        }
    }
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64))
}

impl Objective for FrameObjective {
    fn loss_and_grads(&self, tree: &ParameterTree, batch: &[&Example]) -> Result<(f64, ParamMap)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tape = Tape::with_precision(self.precision);
        let bound = tree.bind(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let x = tape.constant(ex.features.clone());
            let logits = self.model.logits(&mut tape, &bound, x)?;
            let mask = vec![true; ex.frame_labels.len()];
            losses.push(tape.softmax_xent(logits, &ex.frame_labels, &mask)?);
        }
        let loss = mean_of(&mut tape, &losses)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), bound.trainable_grads(&tape, tree)))
    }

    fn evaluate(&self, tree: &ParameterTree, examples: &[Example]) -> Result<EvalMetrics> {
        evaluate(&self.model, tree, examples)
    }
}

/// Masked-label prediction through `ssl_head/{w,b}`.
pub fn ssl_loss_and_grads(model: &Model, tree: &ParameterTree, batch: &[SslBatch]) -> Result<(f64, ParamMap)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = tree.bind(&mut tape);
    let (w, b) = (bound.var("ssl_head/w")?, bound.var("ssl_head/b")?);
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let x = tape.constant(item.features.clone());
        let h = model.encode(&mut tape, &bound, x)?;
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_bias(logits, b)?;
        losses.push(tape.softmax_xent(logits, &item.dense_labels(), &item.mask)?);
    }
    let loss = mean_of(&mut tape, &losses)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.trainable_grads(&tape, tree)))
}

/// SSL loss without gradients.
pub fn ssl_loss(model: &Model, tree: &ParameterTree, batch: &[SslBatch]) -> Result<f64> {
    let mut frozen = tree.clone();
    for p in tree.paths() {
        frozen.set_frozen(p, true)?;
    }
    ssl_loss_and_grads(model, &frozen, batch).map(|(l, _)| l)
}
