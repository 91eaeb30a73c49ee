use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adjust::{AdjustNet, JointSampler};
use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserOutput, TokenString};
use crate::numerics::prob::kl_slices;
use crate::numerics::{softmax_row, Adam, RngStream, Tape, Var};
use crate::training::TrajectorySample;
use crate::workbench::checkpoint::base_checksum;

/// Which positions of `x_k` contribute to the step-`k` KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    /// Every masked position of `x_k`.
    AllMasked,
    /// Only the position the trajectory commits next.
    NextOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Tokens per macro-step; the sampler is unrolled `k − 1` times.
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss_positions: LossPositions,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            epochs: 2,
            lr: 5e-5,
            batch_size: 32,
            loss_positions: LossPositions::AllMasked,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("sampler training needs k >= 2, got {}", self.k)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Where an input to the sampler came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    /// Base-model embeddings of the entry string.
    BaseEmbedding,
    /// The sampler's own output from unroll step `k`.
    SamplerOutput(usize),
    /// String `x_k` read from the trajectory.
    TrajectoryTokens(usize),
}

/// Inputs fed to the sampler at unroll step `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedTag {
    pub k: usize,
    pub tokens: DataSource,
    pub embeddings: DataSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Sum over steps of the mean per-sample KL.
    pub loss: f64,
    /// Entry `k − 1` is the mean KL at step `k`.
    pub kl_at_k: Vec<f64>,
    pub tags: Vec<FeedTag>,
}

fn check_samples(samples: &[TrajectorySample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let len = first.x.len();
    if samples.iter().any(|s| s.x.len() != len) {
        return Err(Error::Shape("samples differ in length".into()));
    }
    Ok(len)
}

/// Every sampler step up to `k − 1` must be scored by some sample.
fn check_reach(samples: &[TrajectorySample], k: usize) -> Result<()> {
    if let Some(step) = (1..k).find(|&step| !samples.iter().any(|s| s.reaches(step))) {
        return Err(Error::InvalidArgument(format!(
            "no sample reaches sampler step {step} of {}",
            k - 1
        )));
    }
    Ok(())
}

/// Samples scored at `step`.
pub(crate) fn reaching(samples: &[TrajectorySample], step: usize) -> usize {
    samples.iter().filter(|s| s.reaches(step)).count()
}

pub(crate) fn selected(s: &TrajectorySample, k: usize, mode: LossPositions) -> Vec<usize> {
    match mode {
        LossPositions::AllMasked => s.state(k).masked_positions(),
        LossPositions::NextOnly => vec![s.positions[k]],
    }
}

pub(crate) fn states(samples: &[TrajectorySample], k: usize) -> Vec<TokenString> {
    samples.iter().map(|s| s.state(k).clone()).collect()
}

fn feed_tag(k: usize) -> FeedTag {
    FeedTag {
        k,
        tokens: DataSource::TrajectoryTokens(k),
        embeddings: if k == 1 {
            DataSource::BaseEmbedding
        } else {
            DataSource::SamplerOutput(k - 1)
        },
    }
}

/// Builds the unrolled loss on `tape`. Returns per-step KL nodes.
fn unrolled_loss<'t>(
    tape: &'t Tape,
    g: &AdjustNet,
    vars: &crate::adjust::AdjustVars<'t>,
    samples: &[TrajectorySample],
    k: usize,
    mode: LossPositions,
) -> Result<Vec<Var<'t>>> {
    let base = g.base();
    let len = check_samples(samples)?;
    let n = samples.len();
    let d = base.dims().d;
    let vsize = base.vocab().size();
    let frozen = g.frozen_on_tape(tape);

    let entry = base.forward_batch(&states(samples, 0))?;
    let mut stacked = Vec::with_capacity(n * len * d);
    for o in &entry {
        stacked.extend_from_slice(o.hidden.as_ref().expect("neural output").data());
    }
    let mut h = tape.constant_from(n * len, d, stacked)?;

    let mut terms = Vec::with_capacity(k - 1);
    for step in 1..k {
        let xs = states(samples, step);
        let teacher = base.forward_batch(&xs)?;
        h = g.hidden_on_tape(vars, &frozen, h, &xs);

        let mut rows = Vec::new();
        let mut weights = Vec::new();
        let mut constant = 0.0;
        // A minibatch may hold only short tails; an unscored step adds zero.
        let scored = reaching(samples, step).max(1);
        for (si, s) in samples.iter().enumerate().filter(|(_, s)| s.reaches(step)) {
            let pos = selected(s, step, mode);
            let w = 1.0 / (pos.len() as f64 * scored as f64);
            for i in pos {
                let p = softmax_row(teacher[si].logit_row(i), 1.0)?;
                rows.push(si * len + i);
                for &pv in p.values() {
                    weights.push(w * pv);
                    if pv > 0.0 {
                        constant += w * pv * pv.ln();
                    }
                }
            }
        }
        if rows.is_empty() {
            terms.push(tape.constant_from(1, 1, vec![0.0])?);
            continue;
        }
        let target = tape.constant_from(rows.len(), vsize, weights)?;
        let logq = h
            .gather_rows(&rows)
            .matmul_t(frozen.head)
            .add_row(frozen.mask_bias)
            .log_softmax_rows();
        let c = tape.constant_from(1, 1, vec![constant])?;
        terms.push(logq.mul(target).sum().scale(-1.0).add(c));
    }
    Ok(terms)
}

fn report(terms: &[Var<'_>], k: usize) -> LossReport {
    let kl_at_k: Vec<f64> = terms.iter().map(|t| t.scalar()).collect();
    LossReport {
        loss: kl_at_k.iter().sum(),
        kl_at_k,
        tags: (1..k).map(feed_tag).collect(),
    }
}

/// Distillation loss of `g` on `samples`: the sampler is unrolled from the
/// base embeddings of `x` with tokens taken from the trajectory, and step `k`
/// is scored by `KL(base rows at x_k ‖ sampler rows)`, averaged over the
/// selected positions and then over samples.
pub fn distill_loss(
    g: &AdjustNet,
    samples: &[TrajectorySample],
    k: usize,
    mode: LossPositions,
) -> Result<LossReport> {
    let tape = Tape::new();
    let vars = g.on_tape(&tape, false);
    let terms = unrolled_loss(&tape, g, &vars, samples, k, mode)?;
    Ok(report(&terms, k))
}

/// Loss and gradients with respect to the sampler's trainable parameters,
/// in `AdjustNet::named_params` order.
pub fn distill_gradients(
    g: &AdjustNet,
    samples: &[TrajectorySample],
    k: usize,
    mode: LossPositions,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let vars = g.on_tape(&tape, true);
    let terms = unrolled_loss(&tape, g, &vars, samples, k, mode)?;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t);
    }
    let rep = report(&terms, k);
    if !rep.loss.is_finite() {
        return Ok((rep, Vec::new()));
    }
    let grads = tape.backward(total)?;
    let g = vars.trainable().iter().map(|v| grads.get_or_zeros(*v)).collect();
    Ok((rep, g))
}

/// Same quantity as [`distill_loss`] for any sampler, computed with plain
/// forwards. Used for held-out diagnostics.
pub fn evaluate_distill(
    base: &dyn Denoiser,
    g: &dyn JointSampler,
    samples: &[TrajectorySample],
    k: usize,
    mode: LossPositions,
) -> Result<LossReport> {
    check_samples(samples)?;
    check_reach(samples, k)?;
    let mut prev: Vec<DenoiserOutput> = base.forward_batch(&states(samples, 0))?;
    let mut kl_at_k = Vec::with_capacity(k - 1);
    for step in 1..k {
        let xs = states(samples, step);
        let teacher = base.forward_batch(&xs)?;
        let cur = {
            let refs: Vec<&DenoiserOutput> = prev.iter().collect();
            g.refresh(&refs, &xs)?
        };
        let mut total = 0.0;
        for (si, s) in samples.iter().enumerate().filter(|(_, s)| s.reaches(step)) {
            let pos = selected(s, step, mode);
            let mut acc = 0.0;
            for &i in &pos {
                let p = softmax_row(teacher[si].logit_row(i), 1.0)?;
                let q = softmax_row(cur[si].logit_row(i), 1.0)?;
                acc += kl_slices(p.values(), q.values())?;
            }
            total += acc / pos.len() as f64;
        }
        kl_at_k.push(total / reaching(samples, step) as f64);
        prev = cur;
    }
    Ok(LossReport {
        loss: kl_at_k.iter().sum(),
        kl_at_k,
        tags: (1..k).map(feed_tag).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub kl_at_k: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsHistory {
    /// One row per optimizer step.
    pub steps: Vec<MetricsRow>,
    /// Mean of the step rows of each epoch; `step` is the last step index.
    pub epochs: Vec<MetricsRow>,
}

/// Adam on the sampler's projection and block with a constant learning rate
/// and per-epoch shuffling. The base model is checked unchanged afterwards.
pub fn train_sampler(
    g: &AdjustNet,
    samples: &[TrajectorySample],
    cfg: &TrainConfig,
) -> Result<(AdjustNet, MetricsHistory)> {
    cfg.validate()?;
    check_samples(samples)?;
    check_reach(samples, cfg.k)?;
    let before = base_checksum(g.base());
    if before != g.trained_against() {
        return Err(Error::BaseMismatch {
            expected: hex::encode(g.trained_against()),
            found: hex::encode(before),
        });
    }
    let mut g = g.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = RngStream::new(cfg.seed, 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = MetricsHistory::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let first = history.steps.len();
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TrajectorySample> = batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let (rep, grads) = distill_gradients(&g, &batch, cfg.k, cfg.loss_positions)?;
            if !rep.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("sampler loss {} (KL@k {:?})", rep.loss, rep.kl_at_k),
                });
            }
            opt.step(&mut g.params_mut(), &grads).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
            step += 1;
            history.steps.push(MetricsRow {
                epoch,
                step,
                loss: rep.loss,
                kl_at_k: rep.kl_at_k,
            });
        }
        let rows = &history.steps[first..];
        if !rows.is_empty() {
            let m = rows.len() as f64;
            history.epochs.push(MetricsRow {
                epoch,
                step,
                loss: rows.iter().map(|r| r.loss).sum::<f64>() / m,
                kl_at_k: (0..cfg.k - 1)
                    .map(|j| rows.iter().map(|r| r.kl_at_k[j]).sum::<f64>() / m)
                    .collect(),
            });
        }
    }
    for t in g.params_mut() {
        t.round_to_f32();
    }
    let after = base_checksum(g.base());
    if after != before {
        return Err(Error::BaseMismatch {
            expected: hex::encode(before),
            found: hex::encode(after),
        });
    }
    Ok((g, history))
}

/// CSV with columns `epoch,step,loss,KL@1..KL@{k−1}`.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    let width = rows.first().map(|r| r.kl_at_k.len()).unwrap_or(0);
    let mut header = String::from("epoch,step,loss");
    for k in 1..=width {
        header.push_str(&format!(",KL@{k}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        let mut line = format!("{},{},{}", r.epoch, r.step, r.loss);
        for v in &r.kl_at_k {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::SamplingConfig;
    use crate::model::{ModelDims, NeuralDenoiser, Vocab};
    use crate::training::{build_samples, harvest_trajectories};
    use std::sync::Arc;

    /// Returns the base model's fresh output for the new string.
    struct BaseRefresh(Arc<NeuralDenoiser>);

    impl JointSampler for BaseRefresh {
        fn base_checksum(&self) -> Option<[u8; 32]> {
            None
        }
        fn refresh(&self, _: &[&DenoiserOutput], xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
            self.0.forward_batch(xs)
        }
    }

    fn setup() -> (Arc<NeuralDenoiser>, Vec<TrajectorySample>) {
        let v = Vocab::with_mask_last(4).unwrap();
        let dims = ModelDims {
            d: 8,
            blocks: 2,
            heads: 2,
            max_len: 6,
        };
        let base = Arc::new(NeuralDenoiser::new(v.clone(), dims, &mut RngStream::new(1, 0)).unwrap());
        let prompt = TokenString::all_masked(6, &v);
        let trajs = harvest_trajectories(base.as_ref(), &prompt, 6, &SamplingConfig::default(), 0).unwrap();
        let (samples, _) = build_samples(&trajs, 3, 2, &mut RngStream::new(2, 0)).unwrap();
        (base, samples)
    }

    #[test]
    fn perfect_sampler_has_zero_loss() {
        let (base, samples) = setup();
        let r = evaluate_distill(base.as_ref(), &BaseRefresh(base.clone()), &samples, 3, LossPositions::AllMasked)
            .unwrap();
        assert_eq!(r.kl_at_k, vec![0.0, 0.0]);
    }

    #[test]
    fn tape_loss_agrees_with_plain_evaluation() {
        let (base, samples) = setup();
        let g = AdjustNet::new(base.clone(), &mut RngStream::new(3, 0)).unwrap();
        for mode in [LossPositions::AllMasked, LossPositions::NextOnly] {
            let a = distill_loss(&g, &samples, 3, mode).unwrap();
            let b = evaluate_distill(base.as_ref(), &g, &samples, 3, mode).unwrap();
            for (x, y) in a.kl_at_k.iter().zip(&b.kl_at_k) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn tokens_come_from_trajectory_and_embeddings_from_sampler() {
        let (base, samples) = setup();
        let g = AdjustNet::new(base, &mut RngStream::new(3, 0)).unwrap();
        let r = distill_loss(&g, &samples, 3, LossPositions::AllMasked).unwrap();
        assert_eq!(
            r.tags,
            vec![
                FeedTag {
                    k: 1,
                    tokens: DataSource::TrajectoryTokens(1),
                    embeddings: DataSource::BaseEmbedding
                },
                FeedTag {
                    k: 2,
                    tokens: DataSource::TrajectoryTokens(2),
                    embeddings: DataSource::SamplerOutput(1)
                },
            ]
        );
    }

    #[test]
    fn zero_learning_rate_keeps_sampler_and_logs_metrics() {
        let (base, samples) = setup();
        let g = AdjustNet::new(base, &mut RngStream::new(4, 0)).unwrap();
        let cfg = TrainConfig {
            k: 3,
            epochs: 1,
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, hist) = train_sampler(&g, &samples, &cfg).unwrap();
        for ((_, a), (_, b)) in g.named_params().iter().zip(trained.named_params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(hist.steps.len(), samples.len().div_ceil(4));
        assert_eq!(hist.epochs.len(), 1);
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &hist.steps).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,step,loss,KL@1,KL@2\n"));
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let (base, samples) = setup();
        let g = AdjustNet::new(base, &mut RngStream::new(5, 0)).unwrap();
        let batch = &samples[..8];
        let cfg = TrainConfig {
            k: 3,
            epochs: 30,
            lr: 1e-2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (trained, _) = train_sampler(&g, batch, &cfg).unwrap();
        let before = distill_loss(&g, batch, 3, LossPositions::AllMasked).unwrap().loss;
        let after = distill_loss(&trained, batch, 3, LossPositions::AllMasked).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }
}
