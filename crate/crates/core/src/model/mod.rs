//! Base denoisers: a small bidirectional transformer and an exact tabular model.

mod neural;
mod tabular;
pub(crate) mod transformer;
mod vocab;

pub(crate) use neural::split_outputs as neural_split;
pub use neural::{train_base, BaseTrainConfig, BaseTrainReport, ModelDims, NeuralDenoiser};
pub use tabular::{tabular_conditional, TabularDenoiser};
pub use transformer::BlockParams;
pub use vocab::{TokenString, Vocab};

use crate::error::{Error, Result};
use crate::numerics::{tempered_row, ProbRow, Tensor};

/// One forward pass over a single string.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    /// `L × d` embeddings, when the model has them.
    pub hidden: Option<Tensor>,
    /// `L × |V|` logits.
    pub logits: Tensor,
}

impl DenoiserOutput {
    pub fn logit_row(&self, i: usize) -> &[f64] {
        self.logits.row(i)
    }
}

/// Anything that maps a partially masked string to per-position logits.
pub trait Denoiser: Send + Sync {
    fn vocab(&self) -> &Vocab;

    fn max_len(&self) -> usize;

    /// Forwards every string independently. Results do not depend on how
    /// strings are grouped into batches.
    fn forward_batch(&self, xs: &[TokenString]) -> Result<Vec<DenoiserOutput>>;

    fn forward(&self, x: &TokenString) -> Result<DenoiserOutput> {
        Ok(self
            .forward_batch(std::slice::from_ref(x))?
            .pop()
            .expect("one output per input"))
    }

    /// Content hash of the parameters, for models that have them.
    fn checksum(&self) -> Option<[u8; 32]> {
        None
    }

    /// Transformer blocks traversed by one forward (cost accounting).
    fn layer_count(&self) -> usize;
}

/// Tempered, nucleus-truncated rows for the masked positions of `x`.
pub fn rows_for_masked(
    output: &DenoiserOutput,
    x: &TokenString,
    temperature: f64,
    top_p: f64,
) -> Result<Vec<(usize, ProbRow)>> {
    x.masked_positions()
        .into_iter()
        .map(|i| Ok((i, tempered_row(output.logit_row(i), temperature, top_p)?)))
        .collect()
}

/// Per-position distributions at every masked position of `x`.
pub fn marginals(
    model: &dyn Denoiser,
    x: &TokenString,
    temperature: f64,
    top_p: f64,
) -> Result<Vec<(usize, ProbRow)>> {
    if x.mask_count() == 0 {
        return Err(Error::NothingMasked);
    }
    let out = model.forward(x)?;
    rows_for_masked(&out, x, temperature, top_p)
}

pub(crate) fn check_batch(model: &dyn Denoiser, xs: &[TokenString]) -> Result<usize> {
    let len = xs.first().map(|x| x.len()).unwrap_or(0);
    for x in xs {
        if x.len() != len {
            return Err(Error::Shape(format!(
                "batch mixes lengths {len} and {}",
                x.len()
            )));
        }
        if x.len() > model.max_len() {
            return Err(Error::InvalidArgument(format!(
                "string of length {} exceeds model maximum {}",
                x.len(),
                model.max_len()
            )));
        }
        if x.mask_id() != model.vocab().mask_id() {
            return Err(Error::InvalidArgument(
                "string built for a different vocabulary".into(),
            ));
        }
    }
    Ok(len)
}
