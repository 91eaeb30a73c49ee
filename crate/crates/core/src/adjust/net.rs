use std::sync::Arc;

use crate::adjust::JointSampler;
use crate::error::{Error, Result};
use crate::model::transformer::{BlockParams, BlockVars};
use crate::model::{check_batch, Denoiser, DenoiserOutput, NeuralDenoiser, TokenString};
use crate::numerics::{RngStream, Tape, Tensor, Var};

const FORWARD_CHUNK: usize = 256;

/// Single-block sampler network on top of a frozen base model.
///
/// Per position the input is `[tok_emb[x_i] + pos_emb[i], h_i]` (width `2d`),
/// projected to `d` and passed through one block shaped like a base block.
/// Logits come from the base model's head. Only the projection and the block
/// are trainable.
#[derive(Clone, Debug)]
pub struct AdjustNet {
    base: Arc<NeuralDenoiser>,
    down_proj: Tensor,
    block: BlockParams,
    trained_against: [u8; 32],
}

/// Frozen base tensors used by the sampler, registered on a tape.
pub(crate) struct FrozenBase<'t> {
    pub tok_emb: Var<'t>,
    pub pos_emb: Var<'t>,
    pub head: Var<'t>,
    pub mask_bias: Var<'t>,
}

pub(crate) struct AdjustVars<'t> {
    pub down_proj: Var<'t>,
    pub block: BlockVars<'t>,
}

impl<'t> AdjustVars<'t> {
    pub fn trainable(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.down_proj];
        v.extend_from_slice(&self.block.vars);
        v
    }
}

impl AdjustNet {
    /// Starts as an exact pass-through: the projection copies `h` and ignores
    /// the token half, and the block's output projections are zero.
    pub fn new(base: Arc<NeuralDenoiser>, rng: &mut RngStream) -> Result<Self> {
        let d = base.dims().d;
        let down_proj = Tensor::from_fn(2 * d, d, |r, c| if r >= d && r - d == c { 1.0 } else { 0.0 });
        let block = BlockParams::init_identity(d, rng);
        Self::from_parts(base, down_proj, block)
    }

    pub fn from_parts(base: Arc<NeuralDenoiser>, down_proj: Tensor, block: BlockParams) -> Result<Self> {
        let d = base.dims().d;
        if down_proj.shape() != [2 * d, d] {
            return Err(Error::Shape(format!(
                "down projection {:?}, expected [{}, {d}]",
                down_proj.shape(),
                2 * d
            )));
        }
        if block.width() != d {
            return Err(Error::Shape(format!("sampler block width {} vs base {d}", block.width())));
        }
        let trained_against = base.checksum().expect("neural models have checksums");
        Ok(AdjustNet {
            base,
            down_proj,
            block,
            trained_against,
        })
    }

    pub fn base(&self) -> &Arc<NeuralDenoiser> {
        &self.base
    }

    pub fn down_proj(&self) -> &Tensor {
        &self.down_proj
    }

    pub fn block(&self) -> &BlockParams {
        &self.block
    }

    /// Checksum of the base this sampler belongs to.
    pub fn trained_against(&self) -> [u8; 32] {
        self.trained_against
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("down_proj".to_string(), &self.down_proj)];
        for (name, t) in BlockParams::NAMES.iter().zip(self.block.tensors()) {
            out.push((format!("block.{name}"), t));
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.down_proj];
        out.extend(self.block.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.down_proj.numel() + self.block.param_count()
    }

    pub(crate) fn frozen_on_tape<'t>(&self, tape: &'t Tape) -> FrozenBase<'t> {
        FrozenBase {
            tok_emb: tape.constant(self.base.tok_emb()),
            pos_emb: tape.constant(self.base.pos_emb()),
            head: tape.constant(self.base.head()),
            mask_bias: tape.constant(&self.base.mask_bias()),
        }
    }

    pub(crate) fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> AdjustVars<'t> {
        AdjustVars {
            down_proj: if trainable {
                tape.param(&self.down_proj)
            } else {
                tape.constant(&self.down_proj)
            },
            block: self.block.on_tape(tape, trainable),
        }
    }

    /// New embeddings from stacked previous embeddings `h` and strings `xs`.
    pub(crate) fn hidden_on_tape<'t>(
        &self,
        vars: &AdjustVars<'t>,
        frozen: &FrozenBase<'t>,
        h: Var<'t>,
        xs: &[TokenString],
    ) -> Var<'t> {
        let seq_len = xs[0].len();
        let e = NeuralDenoiser::embed(frozen.tok_emb, frozen.pos_emb, xs);
        let z = e.concat_cols(h).matmul(vars.down_proj);
        vars.block.forward(z, seq_len, self.base.dims().heads)
    }

    /// `L × d` embeddings for one string from its previous embeddings.
    pub fn adjust_forward(&self, h: &Tensor, x: &TokenString) -> Result<Tensor> {
        let d = self.base.dims().d;
        if h.shape() != [x.len(), d] {
            return Err(Error::Shape(format!(
                "embeddings {:?} for a string of length {} (width {d})",
                h.shape(),
                x.len()
            )));
        }
        check_batch(self.base.as_ref(), std::slice::from_ref(x))?;
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false);
        let frozen = self.frozen_on_tape(&tape);
        let out = self.hidden_on_tape(&vars, &frozen, tape.constant(h), std::slice::from_ref(x));
        Ok(out.value())
    }

    fn refresh_chunk(&self, prev: &[&DenoiserOutput], xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
        let d = self.base.dims().d;
        let len = xs[0].len();
        let mut stacked = Vec::with_capacity(xs.len() * len * d);
        for p in prev {
            let h = p.hidden.as_ref().ok_or_else(|| {
                Error::InvalidArgument("sampler needs embeddings from the previous step".into())
            })?;
            if h.shape() != [len, d] {
                return Err(Error::Shape(format!("previous embeddings {:?}", h.shape())));
            }
            stacked.extend_from_slice(h.data());
        }
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false);
        let frozen = self.frozen_on_tape(&tape);
        let h = tape.constant_from(xs.len() * len, d, stacked)?;
        let hidden = self.hidden_on_tape(&vars, &frozen, h, xs);
        let logits = NeuralDenoiser::logits_on_tape(hidden, frozen.head, frozen.mask_bias);
        Ok(crate::model::neural_split(&hidden.value(), &logits.value(), xs.len()))
    }
}

impl JointSampler for AdjustNet {
    fn base_checksum(&self) -> Option<[u8; 32]> {
        Some(self.trained_against)
    }

    fn refresh(&self, prev: &[&DenoiserOutput], xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
        if prev.len() != xs.len() {
            return Err(Error::Shape(format!(
                "{} previous outputs for {} strings",
                prev.len(),
                xs.len()
            )));
        }
        check_batch(self.base.as_ref(), xs)?;
        let mut out = Vec::with_capacity(xs.len());
        for (p, x) in prev.chunks(FORWARD_CHUNK).zip(xs.chunks(FORWARD_CHUNK)) {
            out.extend(self.refresh_chunk(p, x)?);
        }
        Ok(out)
    }
}
