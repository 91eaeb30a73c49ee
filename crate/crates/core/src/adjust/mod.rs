//! The joint sampler: a network that refreshes per-position logits after each
//! newly committed token, plus exact and pass-through stand-ins.

mod net;

use std::sync::Arc;

pub use net::AdjustNet;
pub(crate) use net::AdjustVars;

use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserOutput, TabularDenoiser, TokenString};

/// Produces refreshed outputs from the previous step's output and the string
/// with one more committed token.
pub trait JointSampler: Send + Sync {
    /// Checksum of the base model this sampler is tied to, if any.
    fn base_checksum(&self) -> Option<[u8; 32]>;

    fn refresh(&self, prev: &[&DenoiserOutput], xs: &[TokenString]) -> Result<Vec<DenoiserOutput>>;
}

/// Refuses a sampler trained against a different base model.
pub fn check_compatible(base: &dyn Denoiser, g: &dyn JointSampler) -> Result<()> {
    if let Some(expected) = g.base_checksum() {
        match base.checksum() {
            Some(found) if found == expected => {}
            found => {
                return Err(Error::BaseMismatch {
                    expected: hex::encode(expected),
                    found: found.map(hex::encode).unwrap_or_else(|| "none".into()),
                })
            }
        }
    }
    Ok(())
}

/// Returns the tabular model's exact conditionals for the current string.
#[derive(Clone, Debug)]
pub struct OracleSampler {
    tab: Arc<TabularDenoiser>,
}

impl OracleSampler {
    pub fn new(tab: Arc<TabularDenoiser>) -> Self {
        OracleSampler { tab }
    }
}

/// Exact stand-in for a trained sampler over a tabular model.
pub fn oracle_g(tab: Arc<TabularDenoiser>) -> OracleSampler {
    OracleSampler::new(tab)
}

impl JointSampler for OracleSampler {
    fn base_checksum(&self) -> Option<[u8; 32]> {
        None
    }

    fn refresh(&self, _prev: &[&DenoiserOutput], xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
        self.tab.forward_batch(xs)
    }
}

/// Passes the previous output through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentitySampler;

impl JointSampler for IdentitySampler {
    fn base_checksum(&self) -> Option<[u8; 32]> {
        None
    }

    fn refresh(&self, prev: &[&DenoiserOutput], xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
        if prev.len() != xs.len() {
            return Err(Error::Shape("previous outputs do not match strings".into()));
        }
        Ok(prev.iter().map(|p| (*p).clone()).collect())
    }
}

/// Current output and string within one macro-step; `k` counts outputs
/// produced so far (1 right after the base forward).
#[derive(Clone, Debug)]
pub struct RecursionState {
    pub output: DenoiserOutput,
    pub x: TokenString,
    pub k: usize,
}

impl RecursionState {
    pub fn start(base: &dyn Denoiser, x: TokenString) -> Result<Self> {
        let output = base.forward(&x)?;
        Ok(RecursionState { output, x, k: 1 })
    }

    /// Commits `token` at `position` and refreshes the output through `g`.
    pub fn advance(&self, g: &dyn JointSampler, (position, token): (usize, usize)) -> Result<Self> {
        let x = self.x.splice(position, token)?;
        let output = g
            .refresh(&[&self.output], std::slice::from_ref(&x))?
            .pop()
            .expect("one output per input");
        Ok(RecursionState {
            output,
            x,
            k: self.k + 1,
        })
    }
}
