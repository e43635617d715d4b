//! Central-difference checks of every hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::afs::{afs_backward, afs_forward, afs_init, AfsConfig, AfsParams};
use crate::error::Result;
use crate::fusion::{Fusion, FusionKind};
use crate::grpo::{sgrpo_loss, sgrpo_loss_and_grad, GroupBatch, GrpoConfig, QueryInput, Rollout, RolloutGroup};
use crate::numerics::{finite_diff_grad, relative_error, stream_id, ParamSet, RngStream, Tensor};
use crate::policy::{
    sft_loss_and_grad, PolicySnapshot, ResponsePolicy, SeqModelConfig, SeqModelParams, SnapshotRole, Vocab,
};
use crate::rewards::{RewardBreakdown, RewardWeights};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(name: &str, errs: &[f64]) -> Self {
        let max = errs.iter().copied().fold(0.0, f64::max);
        Self {
            name: name.into(),
            cases: errs.len(),
            max_rel_err: max,
            tolerance: TOLERANCE,
            passed: errs.iter().all(|e| *e < TOLERANCE),
        }
    }
}

fn fd_params<P: ParamSet>(p: &P, f: impl Fn(&P) -> f64) -> Result<Vec<f64>> {
    let flat = Tensor::from_vec(p.flatten());
    let num = finite_diff_grad(
        |t| {
            let mut q = p.clone();
            q.assign_flat(t.data());
            f(&q)
        },
        &flat,
        STEP,
    )?;
    Ok(num.into_data())
}

fn small_afs() -> AfsConfig {
    AfsConfig {
        dim_i: 6,
        dim: 9,
        dim_o: 5,
    }
}

/// AFS parameters moved off the zero-initialized output path.
pub fn random_afs(cfg: AfsConfig, rng: &mut RngStream) -> Result<AfsParams> {
    let mut p = afs_init(cfg, rng)?;
    p.w_up = Tensor::uniform(&[cfg.dim, cfg.dim_o], 0.5, rng);
    p.b_up = Tensor::uniform(&[cfg.dim_o], 0.5, rng);
    p.ln_gamma = Tensor::uniform(&[cfg.dim], 1.0, rng);
    p.ln_beta = Tensor::uniform(&[cfg.dim], 0.5, rng);
    Ok(p)
}

/// Batched AFS: parameters and `f_ana` against a random linear readout.
pub fn afs_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let cfg = small_afs();
    let mut errs = Vec::with_capacity(cases);
    for c in 0..cases {
        let mut rng = RngStream::new(seed, stream_id(0xaf5, &[c as u64]));
        let p = random_afs(cfg, &mut rng)?;
        let a = Tensor::uniform(&[2, cfg.dim_i], 1.0, &mut rng);
        let e = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
        let w = Tensor::uniform(&[2, cfg.dim_o], 1.0, &mut rng);
        let objective = |p: &AfsParams, a: &Tensor| -> f64 {
            let (o, _) = afs_forward(a, &e, p).expect("shapes are consistent");
            o.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
        };
        let (_, cache) = afs_forward(&a, &e, &p)?;
        let g = afs_backward(&p, &cache, &w)?;
        let num_p = fd_params(&p, |q| objective(q, &a))?;
        let num_a = finite_diff_grad(|t| objective(&p, t), &a, STEP)?;
        let mut ana = g.params.flatten();
        ana.extend_from_slice(g.f_ana.data());
        let mut num = num_p;
        num.extend_from_slice(num_a.data());
        errs.push(relative_error(&ana, &num));
    }
    Ok(SuiteReport::new("afs", &errs))
}

/// Every fusion variant: parameters and both inputs.
pub fn fusion_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let cfg = small_afs();
    let mut errs = Vec::new();
    for kind in FusionKind::ALL {
        for c in 0..cases {
            let mut rng = RngStream::new(seed, stream_id(0xf05, &[kind as u64, c as u64]));
            let mut f = Fusion::init(kind, cfg, &mut rng)?;
            for t in f.tensors_mut() {
                for v in t.data_mut() {
                    *v += 0.3 * (rng.next_f64() - 0.5);
                }
            }
            let a: Vec<f64> = (0..cfg.dim_i).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let e: Vec<f64> = (0..cfg.dim_o).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let w: Vec<f64> = (0..cfg.dim_o).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let obj = |f: &Fusion, a: &[f64], e: &[f64]| -> f64 {
                let (o, _) = f.forward(a, e).expect("shapes are consistent");
                o.iter().zip(&w).map(|(x, y)| x * y).sum()
            };
            let (_, cache) = f.forward(&a, &e)?;
            let mut g = f.zeros_like();
            let (ga, ge) = f.backward(&cache, &w, &mut g);
            let mut ana = g.flatten();
            let mut num = fd_params(&f, |q| obj(q, &a, &e))?;
            if kind != FusionKind::None {
                ana.extend(ga);
                num.extend(
                    finite_diff_grad(|t| obj(&f, t.data(), &e), &Tensor::from_vec(a.clone()), STEP)?.into_data(),
                );
            }
            ana.extend(ge);
            num.extend(finite_diff_grad(|t| obj(&f, &a, t.data()), &Tensor::from_vec(e.clone()), STEP)?.into_data());
            errs.push(relative_error(&ana, &num));
        }
    }
    Ok(SuiteReport::new("fusion", &errs))
}

/// Sequence-model cross-entropy through BPTT, parameters and context.
pub fn policy_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let vocab = Vocab::standard();
    let cfg = SeqModelConfig {
        vocab: vocab.len(),
        embed: 3,
        hidden: 4,
        ctx: 5,
    };
    let mut errs = Vec::with_capacity(cases);
    for c in 0..cases {
        let mut rng = RngStream::new(seed, stream_id(0x5e9, &[c as u64]));
        let m = SeqModelParams::init(cfg, &mut rng)?;
        let ctx = Tensor::uniform(&[cfg.ctx], 1.0, &mut rng);
        let target: Vec<usize> = (0..2 + rng.index(5)).map(|_| rng.index(vocab.len())).collect();
        let out = sft_loss_and_grad(&m, &vocab, ctx.data(), &target)?;
        let loss = |m: &SeqModelParams, ctx: &[f64]| {
            sft_loss_and_grad(m, &vocab, ctx, &target).map(|o| o.loss).unwrap_or(f64::NAN)
        };
        let mut num = fd_params(&m, |q| loss(q, ctx.data()))?;
        num.extend(finite_diff_grad(|t| loss(&m, t.data()), &ctx, STEP)?.into_data());
        let mut ana = out.grads.flatten();
        ana.extend(out.g_ctx);
        errs.push(relative_error(&ana, &num));
    }
    Ok(SuiteReport::new("policy_sft", &errs))
}

/// Small response policy with every fusion parameter nonzero.
pub fn toy_policy(seed: u64, kind: FusionKind, vocab: usize) -> Result<ResponsePolicy> {
    let cfg = AfsConfig {
        dim_i: 6,
        dim: 4,
        dim_o: 5,
    };
    let mut rng = RngStream::new(seed, 77);
    let mut fusion = Fusion::init(kind, cfg, &mut rng)?;
    for t in fusion.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = 0.3 * (rng.next_f64() - 0.5);
            }
        }
    }
    let seq = SeqModelParams::init(
        SeqModelConfig {
            vocab,
            embed: 3,
            hidden: 4,
            ctx: 5,
        },
        &mut rng,
    )?;
    Ok(ResponsePolicy { fusion, seq })
}

/// Two groups of two random rollouts. Old log-probs are the current ones
/// perturbed by up to ±0.3 so that some ratios leave the clip range.
pub fn toy_batch(seed: u64, p: &ResponsePolicy, vocab: &Vocab) -> Result<GroupBatch> {
    let mut rng = RngStream::new(seed, 5);
    let mut groups = Vec::with_capacity(2);
    for gi in 0..2 {
        let input = QueryInput {
            f_ana: (0..6).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
            f_emb: (0..5).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
        };
        let mut rollouts = Vec::with_capacity(2);
        for ri in 0..2 {
            let len = 2 + rng.index(4);
            let tokens: Vec<usize> = (0..len).map(|_| rng.index(vocab.len())).collect();
            let (trace, _) = p.teacher_forced(vocab, &input.f_ana, &input.f_emb, &tokens)?;
            let old = trace
                .token_log_probs()
                .iter()
                .map(|l| l + 0.6 * (rng.next_f64() - 0.5))
                .collect();
            rollouts.push(Rollout {
                query_id: format!("q{gi}"),
                tokens,
                old_log_probs: old,
                raw_response: String::new(),
                reward: RewardBreakdown {
                    r_format: 0.0,
                    r_answer: 0.0,
                    r_ground: 0.0,
                    total: rng.next_f64() * 4.0 + ri as f64,
                    weights: RewardWeights::default(),
                },
            });
        }
        groups.push(RolloutGroup { input, rollouts });
    }
    GroupBatch::new(groups, 2)
}

/// Objective gradient on random two-group batches against a distinct
/// reference policy.
pub fn sgrpo_suite(cases: usize, seed: u64, cfg: GrpoConfig) -> Result<SuiteReport> {
    let vocab = Vocab::standard();
    let mut errs = Vec::with_capacity(cases);
    for c in 0..cases {
        let s = seed.wrapping_add(c as u64);
        let cur = toy_policy(s, FusionKind::Afs, vocab.len())?;
        let refp = PolicySnapshot::new(
            SnapshotRole::Reference,
            toy_policy(s.wrapping_add(1000), FusionKind::Afs, vocab.len())?,
        );
        let batch = toy_batch(s, &cur, &vocab)?;
        let snap = |p: &ResponsePolicy| PolicySnapshot::new(SnapshotRole::Current, p.clone());
        let out = sgrpo_loss_and_grad(&batch, &snap(&cur), &refp, &cfg, &vocab)?;
        let num = fd_params(&cur, |q| {
            sgrpo_loss(&batch, &snap(q), &refp, &cfg, &vocab).map(|o| o.loss).unwrap_or(f64::NAN)
        })?;
        let ana = out.grads.expect("gradient requested").flatten();
        errs.push(relative_error(&ana, &num));
    }
    Ok(SuiteReport::new("sgrpo", &errs))
}

pub fn run_all(seed: u64, cases: usize) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        afs_suite(cases, seed)?,
        fusion_suite(cases.div_ceil(4).max(1), seed)?,
        policy_suite(cases, seed)?,
        sgrpo_suite(cases, seed, GrpoConfig::default())?,
        {
            let mut r = sgrpo_suite(
                cases.div_ceil(4).max(1),
                seed,
                GrpoConfig {
                    ppo_min: true,
                    kl_estimator: crate::grpo::KlEstimator::K3,
                    ..GrpoConfig::default()
                },
            )?;
            r.name = "sgrpo_ppo_min_k3".into();
            r
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(3, 4).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }
}
