use std::collections::{BTreeMap, HashMap};

use crate::adjust::JointSampler;
use crate::decoding::engine::{validate_setup, Cursor, Need};
use crate::decoding::{select_position, PolicyKind, Procedure, SamplingConfig};
use crate::error::{Error, Result};
use crate::evaluation::StringDistribution;
use crate::model::{Denoiser, DenoiserOutput, TokenString};

/// Default bound on `|V_data|^masks`.
pub const DEFAULT_LEAF_BUDGET: usize = 1_000_000;

/// Branches whose path probability falls below this are dropped; their mass is
/// reported as `pruned_mass`.
pub const PRUNE_BELOW: f64 = 1e-15;

/// Exact distribution over final strings induced by `procedure` from `start`.
///
/// Expands the full sampling tree breadth-first: position choices follow the
/// policy (the random policy branches uniformly over candidates) and token
/// choices branch over every token with positive probability.
pub fn enumerate_induced(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    start: &TokenString,
    cfg: &SamplingConfig,
    leaf_budget: usize,
) -> Result<StringDistribution> {
    let (procedure, g) = match (procedure, cfg.k) {
        (Procedure::Adjust, 1) => (Procedure::ExactJoint, None),
        other => (other.0, g),
    };
    validate_setup(procedure, base, g, cfg)?;
    let needed = (base.vocab().data_size() as f64).powi(start.mask_count() as i32);
    if needed > leaf_budget as f64 {
        return Err(Error::BudgetExceeded {
            needed,
            bound: leaf_budget,
        });
    }

    let mut leaves: BTreeMap<TokenString, f64> = BTreeMap::new();
    let mut pruned = 0.0;
    let mut frontier = vec![(Cursor::new(procedure, cfg, start.clone(), false)?, 1.0)];
    while !frontier.is_empty() {
        // Expand every decision until each node waits on a forward.
        let mut waiting = Vec::new();
        while let Some((c, mass)) = frontier.pop() {
            match c.need {
                Need::Done => *leaves.entry(c.x).or_default() += mass,
                Need::Base | Need::Sampler => waiting.push((c, mass)),
                Need::Choose => {
                    let positions: Vec<(usize, f64)> = if cfg.policy == PolicyKind::Random {
                        let w = 1.0 / c.rows.len() as f64;
                        c.rows.iter().map(|(p, _)| (*p, w)).collect()
                    } else {
                        vec![(select_position(&c.rows, cfg.policy, None)?, 1.0)]
                    };
                    for (pos, w) in positions {
                        let row = &c.rows[c.rows.binary_search_by_key(&pos, |(p, _)| *p).expect("candidate")].1;
                        for (tok, &p) in row.values().iter().enumerate() {
                            if p <= 0.0 {
                                continue;
                            }
                            let m = mass * w * p;
                            if m < PRUNE_BELOW {
                                pruned += m;
                                continue;
                            }
                            let mut child = c.clone();
                            child.commit(pos, tok)?;
                            frontier.push((child, m));
                        }
                    }
                }
            }
        }
        forward_all(base, g, &mut waiting)?;
        frontier = waiting;
    }
    StringDistribution::new(leaves, pruned)
}

fn forward_all(base: &dyn Denoiser, g: Option<&dyn JointSampler>, nodes: &mut [(Cursor, f64)]) -> Result<()> {
    let base_ids: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].0.need == Need::Base).collect();
    if !base_ids.is_empty() {
        let mut index: HashMap<TokenString, usize> = HashMap::new();
        let mut unique = Vec::new();
        let slots: Vec<usize> = base_ids
            .iter()
            .map(|&i| {
                let x = &nodes[i].0.x;
                *index.entry(x.clone()).or_insert_with(|| {
                    unique.push(x.clone());
                    unique.len() - 1
                })
            })
            .collect();
        let outs = base.forward_batch(&unique)?;
        for (&i, s) in base_ids.iter().zip(slots) {
            nodes[i].0.apply_base(outs[s].clone())?;
        }
    }
    let samp_ids: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].0.need == Need::Sampler).collect();
    if !samp_ids.is_empty() {
        let g = g.expect("sampler steps only occur with a sampler");
        let xs: Vec<TokenString> = samp_ids.iter().map(|&i| nodes[i].0.x.clone()).collect();
        let outs = {
            let prev: Vec<&DenoiserOutput> = samp_ids
                .iter()
                .map(|&i| nodes[i].0.output.as_ref().expect("output after base step"))
                .collect();
            g.refresh(&prev, &xs)?
        };
        for (&i, o) in samp_ids.iter().zip(outs) {
            nodes[i].0.apply_sampler(o)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::{oracle_g, IdentitySampler};
    use crate::decoding::{adjust_string_logprob, decode_batch};
    use crate::evaluation::tv_distance;
    use crate::model::{TabularDenoiser, Vocab};
    use std::sync::Arc;

    fn aabb() -> (Vocab, Arc<TabularDenoiser>) {
        let v = Vocab::from_labels(&["a", "b"]).unwrap();
        let sup = vec![(v.parse("a a").unwrap(), 0.5), (v.parse("b b").unwrap(), 0.5)];
        (v.clone(), Arc::new(TabularDenoiser::new(v, sup, 0.0).unwrap()))
    }

    #[test]
    fn exact_joint_recovers_the_support() {
        let (v, tab) = aabb();
        let start = TokenString::all_masked(2, &v);
        let d = enumerate_induced(Procedure::ExactJoint, tab.as_ref(), None, &start, &SamplingConfig::default(), 100)
            .unwrap();
        assert_eq!(d.len(), 2);
        assert!((d.get(&v.parse("a a").unwrap()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parallel_pair_is_uniform_and_half_off_support() {
        let (v, tab) = aabb();
        let start = TokenString::all_masked(2, &v);
        let cfg = SamplingConfig::default().with_k(2);
        let par = enumerate_induced(Procedure::Parallel, tab.as_ref(), None, &start, &cfg, 100).unwrap();
        assert_eq!(par.len(), 4);
        for (_, p) in par.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let truth = StringDistribution::of_tabular(&tab).unwrap();
        assert!((tv_distance(&par, &truth).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_policy_oracle_matches_truth() {
        let (v, tab) = aabb();
        let start = TokenString::all_masked(2, &v);
        let g = oracle_g(tab.clone());
        let cfg = SamplingConfig::default().with_k(2).with_policy(PolicyKind::Random);
        let d = enumerate_induced(Procedure::Adjust, tab.as_ref(), Some(&g), &start, &cfg, 100).unwrap();
        let truth = StringDistribution::of_tabular(&tab).unwrap();
        assert!(tv_distance(&d, &truth).unwrap() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let (v, tab) = aabb();
        let start = TokenString::all_masked(2, &v);
        let err = enumerate_induced(Procedure::ExactJoint, tab.as_ref(), None, &start, &SamplingConfig::default(), 3)
            .unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { bound: 3, .. }));
    }

    #[test]
    fn sampled_logprobs_agree_with_enumeration() {
        let (v, tab) = aabb();
        let start = TokenString::all_masked(2, &v);
        let cfg = SamplingConfig::default().with_k(2);
        let g = IdentitySampler;
        let d = enumerate_induced(Procedure::Adjust, tab.as_ref(), Some(&g), &start, &cfg, 100).unwrap();
        let draws = decode_batch(Procedure::Adjust, tab.as_ref(), Some(&g), &vec![start; 50], &cfg, 0, false).unwrap();
        for (x, tr) in draws {
            let lp = adjust_string_logprob(tab.as_ref(), &g, &tr).unwrap();
            assert!((lp.exp() - d.get(&x)).abs() < 1e-12);
        }
    }
}
