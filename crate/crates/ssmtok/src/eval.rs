//! Evaluation metrics: unigram KL against the analytic source marginal, and
//! validation perplexity.

use crate::model::Model;
use crate::rvq::TokenGrid;
use crate::train::{self, TrainConfig};
use crate::{Error, Real, Result};

pub const KL_SMOOTHING: Real = 1e-4;

/// KL(empirical ‖ reference) over token unigrams, with add-ε smoothing on
/// both sides. `reference` must be a distribution over the vocabulary.
pub fn eval_kl(samples: &[u32], reference: &[Real], eps: Real) -> Result<Real> {
    if samples.is_empty() {
        return Err(Error::contract("eval_kl needs at least one sample"));
    }
    let v = reference.len();
    let mut counts = vec![0.0; v];
    for &s in samples {
        if s as usize >= v {
            return Err(Error::contract(format!(
                "sample {s} outside the reference support [0, {v})"
            )));
        }
        counts[s as usize] += 1.0;
    }
    let n = samples.len() as Real;
    let mut kl = 0.0;
    let ref_total: Real = reference.iter().sum::<Real>() + eps * v as Real;
    for j in 0..v {
        let q = (counts[j] + eps) / (n + eps * v as Real);
        let p = (reference[j] + eps) / ref_total;
        kl += q * (q / p).ln();
    }
    Ok(kl)
}

/// exp(mean masked cross-entropy) of a model over a validation corpus.
pub fn eval_perplexity(model: &Model, val: &[(TokenGrid, u32)], batch_size: usize) -> Result<Real> {
    let items = train::prepare_items(val, model.config.mode, model.config.k_layers)?;
    let loss = train::eval_loss(model, &items, batch_size)?;
    Ok(loss.exp())
}

/// Convenience: perplexity with the default batch size.
pub fn eval_perplexity_default(model: &Model, val: &[(TokenGrid, u32)]) -> Result<Real> {
    eval_perplexity(model, val, TrainConfig::default().batch_size)
}
