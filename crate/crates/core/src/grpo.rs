//! Group-relative policy optimization with asymmetric clipping, a per-token
//! KL penalty to a frozen reference, and token-level group averaging.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamSet;
use crate::policy::{PolicySnapshot, ResponsePolicy, SnapshotRole, Vocab};
use crate::rewards::RewardBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `Σ_v p ln(p / p_ref)` over the full next-token distribution.
    #[default]
    Exact,
    /// `r - 1 - ln r` with `r = p_ref(o) / p(o)` at the sampled token.
    K3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub eps_adv: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    /// Use `min(ρÂ, clip(ρ)Â)` instead of the plain clipped term.
    pub ppo_min: bool,
    pub kl_estimator: KlEstimator,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eps_adv: 1e-4,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.04,
            ppo_min: false,
            kl_estimator: KlEstimator::Exact,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_adv > 0.0
            && self.eps_low > 0.0
            && self.eps_low < 1.0
            && self.eps_high >= self.eps_low
            && self.beta >= 0.0
            && [self.eps_adv, self.eps_high, self.beta].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid GRPO settings: {self:?}")))
        }
    }
}

/// `(r_i - mean) / (popstd + eps_adv)`.
pub fn group_advantages(rewards: &[f64], eps_adv: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Validation(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps_adv;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn asym_clip(rho: f64, eps_low: f64, eps_high: f64) -> f64 {
    rho.clamp(1.0 - eps_low, 1.0 + eps_high)
}

/// Exact categorical KL divergence `KL(p_theta || p_ref)`.
pub fn token_kl(p_theta: &[f64], p_ref: &[f64]) -> Result<f64> {
    if p_theta.len() != p_ref.len() {
        return Err(Error::Dimension(format!(
            "distributions over {} and {} outcomes",
            p_theta.len(),
            p_ref.len()
        )));
    }
    let mut kl = 0.0;
    for (p, q) in p_theta.iter().zip(p_ref) {
        if *p == 0.0 {
            continue;
        }
        if *q == 0.0 {
            return Err(Error::Numeric("KL is infinite: reference assigns zero mass".into()));
        }
        kl += p * (p / q).ln();
    }
    Ok(kl.max(0.0))
}

/// One sampled response with its behaviour-policy log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: String,
    pub tokens: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub raw_response: String,
    pub reward: RewardBreakdown,
}

/// Policy inputs shared by every rollout of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInput {
    pub f_ana: Vec<f64>,
    pub f_emb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub input: QueryInput,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub groups: Vec<RolloutGroup>,
    pub group_size: usize,
}

impl GroupBatch {
    pub fn new(groups: Vec<RolloutGroup>, group_size: usize) -> Result<Self> {
        let b = Self { groups, group_size };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Validation("group size must be at least 2".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Validation("batch has no groups".into()));
        }
        for (gi, g) in self.groups.iter().enumerate() {
            if g.rollouts.len() != self.group_size {
                return Err(Error::Validation(format!(
                    "group {gi} has {} rollouts, expected {}",
                    g.rollouts.len(),
                    self.group_size
                )));
            }
            for r in &g.rollouts {
                if r.tokens.is_empty() {
                    return Err(Error::Validation(format!("rollout for {} is empty", r.query_id)));
                }
                if r.old_log_probs.len() != r.tokens.len() {
                    return Err(Error::Validation(format!(
                        "rollout for {} has {} old log-probs for {} tokens",
                        r.query_id,
                        r.old_log_probs.len(),
                        r.tokens.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.groups.iter().flat_map(|g| g.rollouts.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTerm {
    pub ratio: f64,
    pub clipped: bool,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct SgrpoOutput {
    /// Objective to maximize.
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// `terms[group][rollout][token]`.
    pub terms: Vec<Vec<Vec<TokenTerm>>>,
    /// Gradient of `loss`; present when requested.
    pub grads: Option<ResponsePolicy>,
}

struct GroupResult {
    loss: f64,
    kl_sum: f64,
    clipped: usize,
    tokens: usize,
    terms: Vec<Vec<TokenTerm>>,
    grads: Option<ResponsePolicy>,
}

fn check_roles(current: &PolicySnapshot, reference: &PolicySnapshot) -> Result<()> {
    if current.role != SnapshotRole::Current || reference.role != SnapshotRole::Reference {
        return Err(Error::Validation(format!(
            "expected (Current, Reference) snapshots, got ({:?}, {:?})",
            current.role, reference.role
        )));
    }
    Ok(())
}

/// Objective value and per-token diagnostics.
pub fn sgrpo_loss(
    batch: &GroupBatch,
    current: &PolicySnapshot,
    reference: &PolicySnapshot,
    cfg: &GrpoConfig,
    vocab: &Vocab,
) -> Result<SgrpoOutput> {
    sgrpo_eval(batch, current, reference, cfg, vocab, false)
}

/// As [`sgrpo_loss`], also returning the exact gradient of the objective.
pub fn sgrpo_loss_and_grad(
    batch: &GroupBatch,
    current: &PolicySnapshot,
    reference: &PolicySnapshot,
    cfg: &GrpoConfig,
    vocab: &Vocab,
) -> Result<SgrpoOutput> {
    sgrpo_eval(batch, current, reference, cfg, vocab, true)
}

fn sgrpo_eval(
    batch: &GroupBatch,
    current: &PolicySnapshot,
    reference: &PolicySnapshot,
    cfg: &GrpoConfig,
    vocab: &Vocab,
    with_grad: bool,
) -> Result<SgrpoOutput> {
    cfg.validate()?;
    batch.validate()?;
    check_roles(current, reference)?;
    let n_groups = batch.groups.len() as f64;
    let results: Vec<Result<GroupResult>> = batch
        .groups
        .par_iter()
        .map(|g| group_term(g, &current.policy, &reference.policy, cfg, vocab, n_groups, with_grad))
        .collect();

    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    let mut tokens = 0;
    let mut terms = Vec::with_capacity(results.len());
    let mut grads = with_grad.then(|| current.policy.zeros_like());
    for r in results {
        let r = r?;
        loss += r.loss;
        kl_sum += r.kl_sum;
        clipped += r.clipped;
        tokens += r.tokens;
        terms.push(r.terms);
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.add_assign(g);
        }
    }
    Ok(SgrpoOutput {
        loss,
        mean_kl: kl_sum / tokens as f64,
        clip_fraction: clipped as f64 / tokens as f64,
        terms,
        grads,
    })
}

fn group_term(
    g: &RolloutGroup,
    cur: &ResponsePolicy,
    refp: &ResponsePolicy,
    cfg: &GrpoConfig,
    vocab: &Vocab,
    n_groups: f64,
    with_grad: bool,
) -> Result<GroupResult> {
    let rewards: Vec<f64> = g.rollouts.iter().map(|r| r.reward.total).collect();
    let adv = group_advantages(&rewards, cfg.eps_adv)?;
    let n_roll = g.rollouts.len() as f64;
    let mut out = GroupResult {
        loss: 0.0,
        kl_sum: 0.0,
        clipped: 0,
        tokens: 0,
        terms: Vec::with_capacity(g.rollouts.len()),
        grads: with_grad.then(|| cur.zeros_like()),
    };
    let QueryInput { f_ana, f_emb } = &g.input;
    for (r, a) in g.rollouts.iter().zip(adv) {
        let (trace, cache) = cur.teacher_forced(vocab, f_ana, f_emb, &r.tokens)?;
        let (ref_trace, _) = refp.teacher_forced(vocab, f_ana, f_emb, &r.tokens)?;
        let w = 1.0 / (n_groups * n_roll * r.tokens.len() as f64);
        let mut g_logits = Vec::with_capacity(if with_grad { r.tokens.len() } else { 0 });
        let mut terms = Vec::with_capacity(r.tokens.len());
        for t in 0..r.tokens.len() {
            let o = r.tokens[t];
            let lp = &trace.log_probs[t];
            let p = &trace.probs[t];
            let lr = &ref_trace.log_probs[t];
            let rho = (lp[o] - r.old_log_probs[t]).exp();
            let c = asym_clip(rho, cfg.eps_low, cfg.eps_high);
            let clipped = c != rho;
            // surrogate value and its derivative with respect to log p(o)
            let (surr, d_surr) = if cfg.ppo_min {
                if rho * a <= c * a {
                    (rho * a, rho * a)
                } else {
                    (c * a, 0.0)
                }
            } else if clipped {
                (c * a, 0.0)
            } else {
                (rho * a, rho * a)
            };
            let kl = match cfg.kl_estimator {
                KlEstimator::Exact => p
                    .iter()
                    .zip(lp.iter().zip(lr))
                    .map(|(pv, (a, b))| pv * (a - b))
                    .sum::<f64>(),
                KlEstimator::K3 => {
                    let d = lr[o] - lp[o];
                    d.exp() - 1.0 - d
                }
            };
            out.loss += w * (surr - cfg.beta * kl);
            out.kl_sum += kl;
            out.clipped += usize::from(clipped);
            out.tokens += 1;
            terms.push(TokenTerm {
                ratio: rho,
                clipped,
                kl,
            });
            if with_grad {
                let mut gz: Vec<f64> = p.iter().map(|pv| -d_surr * pv).collect();
                gz[o] += d_surr;
                match cfg.kl_estimator {
                    KlEstimator::Exact => {
                        for (j, gv) in gz.iter_mut().enumerate() {
                            *gv -= cfg.beta * p[j] * (lp[j] - lr[j] - kl);
                        }
                    }
                    KlEstimator::K3 => {
                        let dk = 1.0 - (lr[o] - lp[o]).exp();
                        for (j, gv) in gz.iter_mut().enumerate() {
                            *gv += cfg.beta * dk * p[j];
                        }
                        gz[o] -= cfg.beta * dk;
                    }
                }
                gz.iter_mut().for_each(|v| *v *= w);
                g_logits.push(gz);
            }
        }
        if let Some(grads) = out.grads.as_mut() {
            cur.backward_into(&trace, &cache, &g_logits, grads);
        }
        out.terms.push(terms);
    }
    Ok(out)
}

/// AdamW optimizer state. Weight decay is decoupled and applies only to
/// matrices (rank ≥ 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One ascent step on the objective whose gradient is `grads`.
pub fn update_step<P: ParamSet>(params: &mut P, grads: &P, opt: &mut AdamW) -> Result<()> {
    let n = params.num_params();
    if grads.num_params() != n {
        return Err(Error::Dimension(format!(
            "gradient has {} entries, parameters {n}",
            grads.num_params()
        )));
    }
    for (i, g) in grads.tensors().iter().enumerate() {
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in tensor {i} at index {j}; update aborted"
            )));
        }
    }
    if opt.m.len() != n {
        opt.m = vec![0.0; n];
        opt.v = vec![0.0; n];
    }
    opt.step += 1;
    let b1t = 1.0 - opt.beta1.powi(opt.step as i32);
    let b2t = 1.0 - opt.beta2.powi(opt.step as i32);
    let mut off = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        let decay = if p.rank() >= 2 { opt.lr * opt.weight_decay } else { 0.0 };
        for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let m = &mut opt.m[off + k];
            let v = &mut opt.v[off + k];
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * gv;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * gv * gv;
            *pv -= decay * *pv;
            *pv += opt.lr * (*m / b1t) / ((*v / b2t).sqrt() + opt.eps);
        }
        off += g.len();
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One line of stage-2 telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_format: f64,
    pub mean_r_answer: f64,
    pub mean_r_ground: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionKind;
    use crate::gradcheck;
    use crate::numerics::{finite_diff_grad, relative_error, Tensor};
    use crate::rewards::RewardWeights;

    fn toy_policy(seed: u64, kind: FusionKind, vocab: usize) -> ResponsePolicy {
        gradcheck::toy_policy(seed, kind, vocab).unwrap()
    }

    fn toy_batch(seed: u64, p: &ResponsePolicy, vocab: &Vocab) -> GroupBatch {
        gradcheck::toy_batch(seed, p, vocab).unwrap()
    }

    fn breakdown(total: f64) -> RewardBreakdown {
        RewardBreakdown {
            r_format: 0.0,
            r_answer: 0.0,
            r_ground: 0.0,
            total,
            weights: RewardWeights::default(),
        }
    }

    fn snapshots(cur: &ResponsePolicy, refp: &ResponsePolicy) -> (PolicySnapshot, PolicySnapshot) {
        (
            PolicySnapshot::new(SnapshotRole::Current, cur.clone()),
            PolicySnapshot::new(SnapshotRole::Reference, refp.clone()),
        )
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[2.0, 2.0, 2.0, 2.0], 1e-4).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0], 1e-12).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-10 && (a[1] + 1.0).abs() < 1e-10);
        assert!(group_advantages(&[1.0], 1e-4).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(asym_clip(1.5, 0.2, 0.28), 1.28);
        assert_eq!(asym_clip(0.5, 0.2, 0.28), 0.8);
        assert_eq!(asym_clip(1.0, 0.01, 0.5), 1.0);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(token_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((token_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(token_kl(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        let bad = GrpoConfig {
            eps_high: 0.1,
            ..GrpoConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn equal_length_group_at_old_policy_has_zero_surrogate() {
        let vocab = Vocab::standard();
        let p = toy_policy(1, FusionKind::Afs, vocab.len());
        let input = QueryInput {
            f_ana: vec![0.1; 6],
            f_emb: vec![-0.2; 5],
        };
        let rollouts = [vec![3, 4, 5], vec![7, 1, 2]]
            .into_iter()
            .zip([1.0, 0.0])
            .map(|(tokens, r)| {
                let (trace, _) = p.teacher_forced(&vocab, &input.f_ana, &input.f_emb, &tokens).unwrap();
                Rollout {
                    query_id: "q".into(),
                    old_log_probs: trace.token_log_probs(),
                    tokens,
                    raw_response: String::new(),
                    reward: breakdown(r),
                }
            })
            .collect();
        let batch = GroupBatch::new(vec![RolloutGroup { input, rollouts }], 2).unwrap();
        let (c, r) = snapshots(&p, &p);
        let cfg = GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        };
        let out = sgrpo_loss(&batch, &c, &r, &cfg, &vocab).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert_eq!(out.mean_kl, 0.0);
        assert_eq!(out.clip_fraction, 0.0);
        assert!(out.grads.is_none());
    }

    #[test]
    fn missing_old_log_probs_rejected() {
        let vocab = Vocab::standard();
        let p = toy_policy(2, FusionKind::Sum, vocab.len());
        let mut batch = toy_batch(2, &p, &vocab);
        batch.groups[0].rollouts[1].old_log_probs.pop();
        let (c, r) = snapshots(&p, &p);
        assert!(sgrpo_loss(&batch, &c, &r, &GrpoConfig::default(), &vocab).is_err());
        let (c2, _) = snapshots(&p, &p);
        let wrong = PolicySnapshot::new(SnapshotRole::Old, p.clone());
        assert!(sgrpo_loss(&toy_batch(2, &p, &vocab), &c2, &wrong, &GrpoConfig::default(), &vocab).is_err());
    }

    fn grad_check(cfg: GrpoConfig, kind: FusionKind, seed: u64) -> f64 {
        let vocab = Vocab::standard();
        let cur = toy_policy(seed, kind, vocab.len());
        let refp = toy_policy(seed + 1000, kind, vocab.len());
        let batch = toy_batch(seed, &cur, &vocab);
        let (c, r) = snapshots(&cur, &refp);
        let out = sgrpo_loss_and_grad(&batch, &c, &r, &cfg, &vocab).unwrap();
        let flat = Tensor::from_vec(cur.flatten());
        let num = finite_diff_grad(
            |t| {
                let mut q = cur.clone();
                q.assign_flat(t.data());
                let (c, r) = snapshots(&q, &refp);
                sgrpo_loss(&batch, &c, &r, &cfg, &vocab).unwrap().loss
            },
            &flat,
            1e-6,
        )
        .unwrap();
        relative_error(&out.grads.unwrap().flatten(), num.data())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let e = grad_check(GrpoConfig::default(), FusionKind::Afs, seed);
            assert!(e < 1e-6, "seed {seed}: {e}");
        }
    }

    #[test]
    fn gradient_variants_match_finite_differences() {
        let cases = [
            GrpoConfig {
                ppo_min: true,
                ..GrpoConfig::default()
            },
            GrpoConfig {
                kl_estimator: KlEstimator::K3,
                beta: 0.3,
                ..GrpoConfig::default()
            },
        ];
        for (i, cfg) in cases.into_iter().enumerate() {
            for kind in [FusionKind::Concat, FusionKind::CrossAttention] {
                let e = grad_check(cfg, kind, 10 + i as u64);
                assert!(e < 1e-6, "{cfg:?} {kind}: {e}");
            }
        }
    }

    #[test]
    fn on_policy_gradient_is_vanilla_policy_gradient() {
        let vocab = Vocab::standard();
        let p = toy_policy(4, FusionKind::Afs, vocab.len());
        let mut batch = toy_batch(4, &p, &vocab);
        for g in &mut batch.groups {
            for r in &mut g.rollouts {
                let (t, _) = p.teacher_forced(&vocab, &g.input.f_ana, &g.input.f_emb, &r.tokens).unwrap();
                r.old_log_probs = t.token_log_probs();
            }
        }
        let cfg = GrpoConfig {
            beta: 0.0,
            ..GrpoConfig::default()
        };
        let (c, r) = snapshots(&p, &p);
        let got = sgrpo_loss_and_grad(&batch, &c, &r, &cfg, &vocab).unwrap().grads.unwrap();
        // Σ_g Σ_i Â_i / (N G |o_i|) ∇ log π(o_i)
        let mut want = p.zeros_like();
        let n = batch.groups.len() as f64;
        for g in &batch.groups {
            let rewards: Vec<f64> = g.rollouts.iter().map(|r| r.reward.total).collect();
            let adv = group_advantages(&rewards, cfg.eps_adv).unwrap();
            for (r, a) in g.rollouts.iter().zip(adv) {
                let (trace, cache) = p.teacher_forced(&vocab, &g.input.f_ana, &g.input.f_emb, &r.tokens).unwrap();
                let w = a / (n * g.rollouts.len() as f64 * r.tokens.len() as f64);
                let gz: Vec<Vec<f64>> = trace
                    .probs
                    .iter()
                    .zip(&r.tokens)
                    .map(|(pr, &o)| {
                        let mut v: Vec<f64> = pr.iter().map(|x| -w * x).collect();
                        v[o] += w;
                        v
                    })
                    .collect();
                p.backward_into(&trace, &cache, &gz, &mut want);
            }
        }
        assert!(relative_error(&got.flatten(), &want.flatten()) < 1e-12);
    }

    #[test]
    fn identical_reference_gives_zero_kl() {
        let vocab = Vocab::standard();
        let p = toy_policy(6, FusionKind::Mlp, vocab.len());
        let batch = toy_batch(6, &p, &vocab);
        let (c, r) = snapshots(&p, &p);
        let out = sgrpo_loss(&batch, &c, &r, &GrpoConfig::default(), &vocab).unwrap();
        assert!(out.terms.iter().flatten().flatten().all(|t| t.kl.abs() < 1e-15));
        assert!((0.0..=1.0).contains(&out.clip_fraction));
    }

    #[test]
    fn adamw_zero_grad_and_determinism() {
        let vocab = Vocab::standard();
        let p = toy_policy(8, FusionKind::Afs, vocab.len());
        let mut q = p.clone();
        let mut opt = AdamW::new(3e-3, 0.0);
        update_step(&mut q, &p.zeros_like(), &mut opt).unwrap();
        assert_eq!(q, p);

        let mut g = p.zeros_like();
        g.assign_flat(&(0..p.num_params()).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let (mut a, mut b) = (p.clone(), p.clone());
        let (mut oa, mut ob) = (AdamW::new(3e-3, 0.05), AdamW::new(3e-3, 0.05));
        update_step(&mut a, &g, &mut oa).unwrap();
        update_step(&mut b, &g, &mut ob).unwrap();
        assert_eq!(a, b);

        let mut bad = g.clone();
        bad.tensors_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(update_step(&mut a, &bad, &mut oa), Err(Error::Numeric(_))));
    }

    #[test]
    fn adamw_ascends_quadratic() {
        #[derive(Clone)]
        struct P(Tensor);
        impl ParamSet for P {
            fn tensors(&self) -> Vec<&Tensor> {
                vec![&self.0]
            }
            fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![&mut self.0]
            }
        }
        // J(x) = -|x - c|²
        let c = [1.0, -2.0, 0.5];
        let j = |x: &P| -x.0.data().iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut x = P(Tensor::zeros(&[3]));
        let mut opt = AdamW::new(0.1, 0.05);
        let before = j(&x);
        for _ in 0..3 {
            let g = P(Tensor::from_vec(x.0.data().iter().zip(&c).map(|(a, b)| -2.0 * (a - b)).collect()));
            update_step(&mut x, &g, &mut opt).unwrap();
        }
        assert!(j(&x) > before);
    }

    #[test]
    fn grad_norm_clipping() {
        let vocab = Vocab::standard();
        let p = toy_policy(9, FusionKind::Sum, vocab.len());
        let mut g = p.clone();
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.sum_sq().sqrt() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn advantages_center(rewards in prop::collection::vec(-10.0f64..10.0, 2..9)) {
                let a = group_advantages(&rewards, 1e-4).unwrap();
                prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
            }

            #[test]
            fn advantages_shift_and_scale(rewards in prop::collection::vec(0.0f64..4.0, 2..6),
                                          shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
                let base = group_advantages(&rewards, 1e-12).unwrap();
                let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
                let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
                let spread = rewards.iter().cloned().fold(f64::MIN, f64::max)
                    - rewards.iter().cloned().fold(f64::MAX, f64::min);
                prop_assume!(spread > 1e-3);
                for (a, b) in base.iter().zip(group_advantages(&shifted, 1e-12).unwrap()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
                for (a, b) in base.iter().zip(group_advantages(&scaled, 1e-12).unwrap()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn clip_in_bounds(rho in 0.0f64..5.0, lo in 0.01f64..0.9, extra in 0.0f64..1.0) {
                let hi = lo + extra;
                let c = asym_clip(rho, lo, hi);
                prop_assert!(c >= 1.0 - lo && c <= 1.0 + hi);
            }

            #[test]
            fn kl_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
                let (_, p) = crate::numerics::log_softmax(&a);
                let (_, q) = crate::numerics::log_softmax(&b);
                prop_assert!(token_kl(&p, &q).unwrap() >= 0.0);
                prop_assert_eq!(token_kl(&p, &p).unwrap(), 0.0);
            }
        }
    }
}
