use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::transformer::{normal, BlockParams, BlockVars, INIT_STD};
use crate::model::{check_batch, Denoiser, DenoiserOutput, TokenString, Vocab};
use crate::numerics::{Adam, RngStream, Tape, Tensor, Var, MASKED_LOGIT};

/// Strings per internal forward chunk.
const FORWARD_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 64,
            blocks: 4,
            heads: 4,
            max_len: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.blocks == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(format!("model dims must be positive: {self:?}")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Bidirectional transformer denoiser: token plus learned positional
/// embeddings, pre-norm blocks, a final norm, and a separate output head.
///
/// Embedding matrices are stored with one row per position, so a forward
/// over a length-`L` string yields an `L × d` hidden matrix.
#[derive(Clone, Debug)]
pub struct NeuralDenoiser {
    vocab: Vocab,
    dims: ModelDims,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<BlockParams>,
    final_gamma: Tensor,
    final_beta: Tensor,
    head: Tensor,
    checksum: OnceLock<[u8; 32]>,
}

/// The model's parameters registered on a tape, in `named_params` order.
pub(crate) struct ModelVars<'t> {
    pub tok_emb: Var<'t>,
    pub pos_emb: Var<'t>,
    pub blocks: Vec<BlockVars<'t>>,
    pub final_gamma: Var<'t>,
    pub final_beta: Var<'t>,
    pub head: Var<'t>,
    pub mask_bias: Var<'t>,
}

impl<'t> ModelVars<'t> {
    pub fn trainable(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            v.extend_from_slice(&b.vars);
        }
        v.extend([self.final_gamma, self.final_beta, self.head]);
        v
    }
}

impl NeuralDenoiser {
    pub fn new(vocab: Vocab, dims: ModelDims, rng: &mut RngStream) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let out_scale = 1.0 / ((2 * dims.blocks) as f64).sqrt();
        let tok_emb = normal(vocab.size(), d, INIT_STD, rng);
        let pos_emb = normal(dims.max_len, d, INIT_STD, rng);
        let blocks = (0..dims.blocks)
            .map(|_| BlockParams::init(d, out_scale, rng))
            .collect();
        let head = normal(vocab.size(), d, INIT_STD, rng);
        Ok(NeuralDenoiser {
            vocab,
            dims,
            tok_emb,
            pos_emb,
            blocks,
            final_gamma: Tensor::full(&[1, d], 1.0),
            final_beta: Tensor::zeros(&[1, d]),
            head,
            checksum: OnceLock::new(),
        })
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_named(vocab: Vocab, dims: ModelDims, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        dims.validate()?;
        let mut rng = RngStream::new(0, 0);
        let mut model = NeuralDenoiser::new(vocab, dims, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if named.len() != expected.len() {
            return Err(Error::CheckpointFormat(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (want_name, want_shape)) in named.iter().zip(&expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::CheckpointFormat(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in model.params_mut().into_iter().zip(named.drain(..)) {
            *slot = t;
        }
        Ok(model)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tok_emb(&self) -> &Tensor {
        &self.tok_emb
    }

    pub fn pos_emb(&self) -> &Tensor {
        &self.pos_emb
    }

    pub fn head(&self) -> &Tensor {
        &self.head
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BlockParams::NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gamma".to_string(), &self.final_gamma));
        out.push(("final_norm.beta".to_string(), &self.final_beta));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.checksum = OnceLock::new();
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters inside the transformer blocks only.
    pub fn block_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    /// `1 × |V|` row that pins the mask token's logit far below every other.
    pub(crate) fn mask_bias(&self) -> Tensor {
        let mut bias = Tensor::zeros(&[1, self.vocab.size()]);
        bias.data_mut()[self.vocab.mask_id()] = MASKED_LOGIT;
        bias
    }

    pub(crate) fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        let reg = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        ModelVars {
            tok_emb: reg(&self.tok_emb),
            pos_emb: reg(&self.pos_emb),
            blocks: self.blocks.iter().map(|b| b.on_tape(tape, trainable)).collect(),
            final_gamma: reg(&self.final_gamma),
            final_beta: reg(&self.final_beta),
            head: reg(&self.head),
            mask_bias: tape.constant(&self.mask_bias()),
        }
    }

    /// Token plus positional embedding for a batch of equal-length strings.
    pub(crate) fn embed<'t>(tok_emb: Var<'t>, pos_emb: Var<'t>, xs: &[TokenString]) -> Var<'t> {
        let flat: Vec<usize> = xs.iter().flat_map(|x| x.tokens().iter().copied()).collect();
        let positions: Vec<usize> = xs.iter().flat_map(|x| 0..x.len()).collect();
        tok_emb.gather_rows(&flat).add(pos_emb.gather_rows(&positions))
    }

    /// Hidden states `(N·L) × d` for a batch of equal-length strings.
    pub(crate) fn hidden_on_tape<'t>(&self, vars: &ModelVars<'t>, xs: &[TokenString]) -> Var<'t> {
        let seq_len = xs[0].len();
        let mut h = Self::embed(vars.tok_emb, vars.pos_emb, xs);
        for b in &vars.blocks {
            h = b.forward(h, seq_len, self.dims.heads);
        }
        h.layer_norm(vars.final_gamma, vars.final_beta)
    }

    pub(crate) fn logits_on_tape<'t>(hidden: Var<'t>, head: Var<'t>, mask_bias: Var<'t>) -> Var<'t> {
        hidden.matmul_t(head).add_row(mask_bias)
    }

    fn forward_chunk(&self, xs: &[TokenString]) -> Vec<DenoiserOutput> {
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false);
        let hidden = self.hidden_on_tape(&vars, xs);
        let logits = Self::logits_on_tape(hidden, vars.head, vars.mask_bias);
        split_outputs(&hidden.value(), &logits.value(), xs.len())
    }
}

/// Splits stacked `(N·L) × c` matrices back into per-string outputs.
pub(crate) fn split_outputs(hidden: &Tensor, logits: &Tensor, n: usize) -> Vec<DenoiserOutput> {
    let len = hidden.rows() / n.max(1);
    (0..n)
        .map(|s| DenoiserOutput {
            hidden: Some(hidden.slice_rows(s * len, len)),
            logits: logits.slice_rows(s * len, len),
        })
        .collect()
}

impl Denoiser for NeuralDenoiser {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.dims.max_len
    }

    fn forward_batch(&self, xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
        check_batch(self, xs)?;
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        if xs[0].is_empty() {
            return Err(Error::InvalidArgument("empty string".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(FORWARD_CHUNK) {
            out.extend(self.forward_chunk(chunk));
        }
        Ok(out)
    }

    fn checksum(&self) -> Option<[u8; 32]> {
        Some(*self
            .checksum
            .get_or_init(|| crate::workbench::checkpoint::base_checksum(self)))
    }

    fn layer_count(&self) -> usize {
        self.dims.blocks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            epochs: 8,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaseTrainReport {
    /// Mean masked-position cross-entropy per optimizer step.
    pub losses: Vec<f64>,
}

/// Masked-denoising training: per string draw a rate `t ~ U(0,1)`, mask each
/// token with probability `t` (redrawing if nothing got masked), and minimize
/// the mean cross-entropy at masked positions.
pub fn train_base(
    model: &NeuralDenoiser,
    corpus: &[TokenString],
    cfg: &BaseTrainConfig,
    rng: &mut RngStream,
) -> Result<(NeuralDenoiser, BaseTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let len = corpus[0].len();
    for x in corpus {
        if x.len() != len || !x.is_complete() {
            return Err(Error::InvalidArgument(
                "training corpus must hold complete strings of one length".into(),
            ));
        }
    }
    check_batch(model, corpus)?;

    let mut model = model.clone();
    let mask = model.vocab.mask_id();
    let vsize = model.vocab.size();
    let mut opt = Adam::new(cfg.lr);
    let mut report = BaseTrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (b, &idx) in batch.iter().enumerate() {
                let clean = &corpus[idx];
                let tokens = loop {
                    let t = rng.next_f64();
                    let toks: Vec<usize> = clean
                        .tokens()
                        .iter()
                        .map(|&tok| if rng.next_f64() < t { mask } else { tok })
                        .collect();
                    if toks.contains(&mask) {
                        break toks;
                    }
                };
                for (i, &tok) in tokens.iter().enumerate() {
                    if tok == mask {
                        rows.push(b * len + i);
                        targets.push(clean.get(i));
                    }
                }
                inputs.push(TokenString::new(tokens, &model.vocab)?);
            }

            let tape = Tape::new();
            let vars = model.on_tape(&tape, true);
            let hidden = model.hidden_on_tape(&vars, &inputs);
            let logits =
                NeuralDenoiser::logits_on_tape(hidden.gather_rows(&rows), vars.head, vars.mask_bias);
            let mut onehot = vec![0.0; rows.len() * vsize];
            for (r, &t) in targets.iter().enumerate() {
                onehot[r * vsize + t] = 1.0;
            }
            let onehot = tape.constant_from(rows.len(), vsize, onehot)?;
            let loss = logits
                .log_softmax_rows()
                .mul(onehot)
                .sum()
                .scale(-1.0 / rows.len() as f64);
            let value = loss.scalar();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: report.losses.len(),
                    detail: format!("base loss {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = vars.trainable().iter().map(|v| grads.get_or_zeros(*v)).collect();
            drop(vars);
            opt.step(&mut model.params_mut(), &g)
                .map_err(|e| Error::Diverged {
                    step: report.losses.len(),
                    detail: e.to_string(),
                })?;
            report.losses.push(value);
        }
    }
    for t in model.params_mut() {
        t.round_to_f32();
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> NeuralDenoiser {
        let vocab = Vocab::with_mask_last(4).unwrap();
        let dims = ModelDims {
            d: 8,
            blocks: 2,
            heads: 2,
            max_len: 6,
        };
        NeuralDenoiser::new(vocab, dims, &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_position_sensitive() {
        let m = tiny(1);
        let v = m.vocab().clone();
        let x = TokenString::new(vec![0, 1, 4, 4], &v).unwrap();
        let y = TokenString::new(vec![1, 0, 4, 4], &v).unwrap();
        let a = m.forward(&x).unwrap();
        assert_eq!(a, m.forward(&x).unwrap());
        assert_ne!(a.hidden, m.forward(&y).unwrap().hidden);
        assert_eq!(a.hidden.as_ref().unwrap().shape(), &[4, 8]);
        assert_eq!(a.logits.shape(), &[4, 5]);
    }

    #[test]
    fn batch_results_match_single_forwards_bitwise() {
        let m = tiny(2);
        let v = m.vocab().clone();
        let xs: Vec<_> = [[0, 4, 4, 1], [4, 4, 4, 4], [3, 2, 1, 4]]
            .iter()
            .map(|t| TokenString::new(t.to_vec(), &v).unwrap())
            .collect();
        let batched = m.forward_batch(&xs).unwrap();
        for (x, b) in xs.iter().zip(&batched) {
            assert_eq!(&m.forward(x).unwrap(), b);
        }
    }

    #[test]
    fn rejects_overlong_input_and_mixed_lengths() {
        let m = tiny(3);
        let v = m.vocab().clone();
        assert!(m.forward(&TokenString::all_masked(7, &v)).is_err());
        let xs = [TokenString::all_masked(3, &v), TokenString::all_masked(4, &v)];
        assert!(m.forward_batch(&xs).is_err());
    }

    #[test]
    fn mask_token_never_gets_probability() {
        let m = tiny(4);
        let v = m.vocab().clone();
        let x = TokenString::all_masked(5, &v);
        let rows = crate::model::marginals(&m, &x, 1.0, 1.0).unwrap();
        for (_, r) in rows {
            assert_eq!(r.get(v.mask_id()), 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let m = tiny(5);
        let v = m.vocab().clone();
        let corpus = vec![TokenString::new(vec![0, 1, 2, 3], &v).unwrap(); 8];
        let cfg = BaseTrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: 4,
        };
        let (trained, report) = train_base(&m, &corpus, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(report.losses.len(), 2);
        for ((_, a), (_, b)) in m.named_params().iter().zip(trained.named_params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let m = tiny(6);
        let v = m.vocab().clone();
        let corpus = vec![TokenString::new(vec![0, 1, 2, 3], &v).unwrap(); 8];
        let cfg = BaseTrainConfig {
            epochs: 2,
            lr: 1e-2,
            batch_size: 4,
        };
        let (a, _) = train_base(&m, &corpus, &cfg, &mut RngStream::new(9, 0)).unwrap();
        let (b, _) = train_base(&m, &corpus, &cfg, &mut RngStream::new(9, 0)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), m.checksum());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let m = tiny(7);
        let cfg = BaseTrainConfig::default();
        assert!(train_base(&m, &[], &cfg, &mut RngStream::new(0, 0)).is_err());
    }
}
