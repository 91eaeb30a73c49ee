//! Pre-norm transformer block shared by the base denoiser and the sampler.

use rand_distr::{Distribution, Normal};

use crate::numerics::{RngStream, Tape, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Parameters of one block: attention then an MLP with expansion 4, each
/// behind a layer norm and a residual connection. Weights are `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::from_fn(rows, cols, |_, _| dist.sample(rng));
    t.round_to_f32();
    t
}

impl BlockParams {
    /// Random init; `out_scale` multiplies the std of the two projections
    /// that write into the residual stream.
    pub fn init(d: usize, out_scale: f64, rng: &mut RngStream) -> Self {
        BlockParams {
            ln1_gamma: Tensor::full(&[1, d], 1.0),
            ln1_beta: Tensor::zeros(&[1, d]),
            w_qkv: normal(d, 3 * d, INIT_STD, rng),
            b_qkv: Tensor::zeros(&[1, 3 * d]),
            w_out: normal(d, d, INIT_STD * out_scale, rng),
            b_out: Tensor::zeros(&[1, d]),
            ln2_gamma: Tensor::full(&[1, d], 1.0),
            ln2_beta: Tensor::zeros(&[1, d]),
            w_up: normal(d, 4 * d, INIT_STD, rng),
            b_up: Tensor::zeros(&[1, 4 * d]),
            w_down: normal(4 * d, d, INIT_STD * out_scale, rng),
            b_down: Tensor::zeros(&[1, d]),
        }
    }

    /// Zero output projections: the block is the identity map.
    pub fn init_identity(d: usize, rng: &mut RngStream) -> Self {
        let mut b = Self::init(d, 1.0, rng);
        b.w_out = Tensor::zeros(&[d, d]);
        b.w_down = Tensor::zeros(&[4 * d, d]);
        b
    }

    pub const NAMES: [&'static str; 12] = [
        "ln1.gamma",
        "ln1.beta",
        "attn.w_qkv",
        "attn.b_qkv",
        "attn.w_out",
        "attn.b_out",
        "ln2.gamma",
        "ln2.beta",
        "mlp.w_up",
        "mlp.b_up",
        "mlp.w_down",
        "mlp.b_down",
    ];

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn width(&self) -> usize {
        self.ln1_gamma.numel()
    }

    pub(crate) fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> BlockVars<'t> {
        let reg = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let [a, b, c, d, e, f, g, h, i, j, k, l] = self.tensors();
        BlockVars {
            vars: [
                reg(a),
                reg(b),
                reg(c),
                reg(d),
                reg(e),
                reg(f),
                reg(g),
                reg(h),
                reg(i),
                reg(j),
                reg(k),
                reg(l),
            ],
        }
    }
}

/// A block's parameters registered on a tape, in [`BlockParams::NAMES`] order.
#[derive(Clone, Copy)]
pub(crate) struct BlockVars<'t> {
    pub vars: [Var<'t>; 12],
}

impl<'t> BlockVars<'t> {
    /// Applies the block to `x`, whose rows are `n_seq` stacked sequences of
    /// `seq_len` positions.
    pub fn forward(&self, x: Var<'t>, seq_len: usize, heads: usize) -> Var<'t> {
        let [ln1_g, ln1_b, w_qkv, b_qkv, w_out, b_out, ln2_g, ln2_b, w_up, b_up, w_down, b_down] =
            self.vars;
        let d = x.shape().1;
        let h = x.layer_norm(ln1_g, ln1_b);
        let qkv = h.matmul(w_qkv).add_row(b_qkv);
        let q = qkv.slice_cols(0, d);
        let k = qkv.slice_cols(d, d);
        let v = qkv.slice_cols(2 * d, d);
        let attn = q.attention(k, v, seq_len, heads).matmul(w_out).add_row(b_out);
        let x = x.add(attn);
        let h = x.layer_norm(ln2_g, ln2_b);
        let mlp = h
            .matmul(w_up)
            .add_row(b_up)
            .relu_sq()
            .matmul(w_down)
            .add_row(b_down);
        x.add(mlp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_formula() {
        let mut rng = RngStream::new(0, 0);
        for d in [4, 8, 64] {
            let b = BlockParams::init(d, 1.0, &mut rng);
            assert_eq!(b.param_count(), 12 * d * d + 13 * d);
        }
    }

    #[test]
    fn identity_init_passes_input_through() {
        let mut rng = RngStream::new(1, 0);
        let b = BlockParams::init_identity(8, &mut rng);
        let x = normal(6, 8, 1.0, &mut rng);
        let tape = Tape::new();
        let vars = b.on_tape(&tape, false);
        let y = vars.forward(tape.constant(&x), 3, 2);
        assert_eq!(y.value().data(), x.data());
    }
}
