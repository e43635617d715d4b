//! Token vocabulary and the recurrent sequence model used for both the
//! analysis model (stage 1) and the response policy (stage 2).
//!
//! Cell: `h_t = tanh(E[x_t] W_x + h_{t-1} W_h + ctx W_c + b_h)`,
//! `logits_t = h_t W_o + b_o`, with `h_{-1} = 0` and `x_0 = <bos>`.
//! Gradients are exact BPTT.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionCache};
use crate::numerics::{
    log_softmax, mat_vec_acc, outer_acc, vec_mat_acc, ParamSet, RngStream, Tensor,
};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const TAGS: [&str; 4] = ["<answer>", "</answer>", "<bbox>", "</bbox>"];
pub const NOUNS: [&str; 8] = [
    "left_hand", "right_hand", "mug", "bowl", "knife", "laptop", "drawer", "kettle",
];
pub const VERBS: [&str; 6] = ["grasp", "hold", "push", "cut", "open", "lift"];
pub const GERUNDS: [&str; 6] = ["grasping", "holding", "pushing", "cutting", "opening", "lifting"];
const WORDS: [&str; 7] = ["left", "right", "none", "the", "hand", "is", "and"];
const PUNCT: [&str; 5] = [".", ",", ";", "[", "]"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// Ordered token list with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token '{t}'")));
            }
        }
        if !index.contains_key(EOS) || !index.contains_key(BOS) {
            return Err(Error::Validation("vocabulary must contain <bos> and <eos>".into()));
        }
        Ok(Self { tokens, index })
    }

    /// Tags, entity nouns, gerunds, function words, punctuation, digits.
    pub fn standard() -> Self {
        let tokens = [BOS, EOS]
            .iter()
            .chain(TAGS.iter())
            .chain(NOUNS.iter())
            .chain(GERUNDS.iter())
            .chain(WORDS.iter())
            .chain(PUNCT.iter())
            .chain(DIGITS.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    fn is_word(&self, id: usize) -> bool {
        self.tokens[id]
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic())
    }

    /// Splits text into tokens: tags, words, single digits and punctuation.
    /// Text is lowercased; whitespace only separates.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let lower = text.to_lowercase();
        let bytes = lower.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_whitespace() {
                i += 1;
            } else if c == '<' {
                let end = lower[i..]
                    .find('>')
                    .ok_or_else(|| Error::Validation(format!("unterminated tag in '{text}'")))?;
                let tag = &lower[i..i + end + 1];
                out.push(self.lookup(tag)?);
                i += end + 1;
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len() && ((bytes[i] as char).is_ascii_alphabetic() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(self.lookup(&lower[start..i])?);
            } else {
                let len = c.len_utf8();
                out.push(self.lookup(&lower[i..i + len])?);
                i += len;
            }
        }
        Ok(out)
    }

    fn lookup(&self, tok: &str) -> Result<usize> {
        self.id(tok)
            .ok_or_else(|| Error::Validation(format!("token '{tok}' is not in the vocabulary")))
    }

    /// Joins tokens, putting a space only between adjacent words. `<bos>` and
    /// `<eos>` are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            if id == self.bos() || id == self.eos() {
                continue;
            }
            let word = self.is_word(id);
            if word && prev_word {
                out.push(' ');
            }
            out.push_str(&self.tokens[id]);
            prev_word = word;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub ctx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelParams {
    pub cfg: SeqModelConfig,
    pub embed: Tensor,
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub w_c: Tensor,
    pub b_h: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl ParamSet for SeqModelParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.embed, &self.w_x, &self.w_h, &self.w_c, &self.b_h, &self.w_o, &self.b_o]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embed, &mut self.w_x, &mut self.w_h, &mut self.w_c, &mut self.b_h,
            &mut self.w_o, &mut self.b_o,
        ]
    }
}

/// Teacher-forced or sampled pass over one sequence.
#[derive(Debug, Clone)]
pub struct SeqTrace {
    /// Input token at each step (`<bos>` then the sequence shifted right).
    pub inputs: Vec<usize>,
    /// Emitted token at each step.
    pub outputs: Vec<usize>,
    pub hidden: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub ctx: Vec<f64>,
}

impl SeqTrace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn token_log_probs(&self) -> Vec<f64> {
        self.outputs
            .iter()
            .zip(&self.log_probs)
            .map(|(&o, lp)| lp[o])
            .collect()
    }

    pub fn h_final(&self) -> Vec<f64> {
        self.hidden.last().cloned().unwrap_or_default()
    }
}

impl SeqModelParams {
    pub fn init(cfg: SeqModelConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.vocab == 0 || cfg.embed == 0 || cfg.hidden == 0 || cfg.ctx == 0 {
            return Err(Error::Config(format!("sequence model dims must be positive: {cfg:?}")));
        }
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        Ok(Self {
            cfg,
            embed: Tensor::uniform(&[cfg.vocab, cfg.embed], 1.0, rng),
            w_x: Tensor::uniform(&[cfg.embed, cfg.hidden], inv(cfg.embed), rng),
            w_h: Tensor::uniform(&[cfg.hidden, cfg.hidden], inv(cfg.hidden), rng),
            w_c: Tensor::uniform(&[cfg.ctx, cfg.hidden], inv(cfg.ctx), rng),
            b_h: Tensor::zeros(&[cfg.hidden]),
            w_o: Tensor::uniform(&[cfg.hidden, cfg.vocab], inv(cfg.hidden), rng),
            b_o: Tensor::zeros(&[cfg.vocab]),
        })
    }

    /// All-zero parameters (uniform output distribution).
    pub fn zeros(cfg: SeqModelConfig) -> Self {
        Self {
            cfg,
            embed: Tensor::zeros(&[cfg.vocab, cfg.embed]),
            w_x: Tensor::zeros(&[cfg.embed, cfg.hidden]),
            w_h: Tensor::zeros(&[cfg.hidden, cfg.hidden]),
            w_c: Tensor::zeros(&[cfg.ctx, cfg.hidden]),
            b_h: Tensor::zeros(&[cfg.hidden]),
            w_o: Tensor::zeros(&[cfg.hidden, cfg.vocab]),
            b_o: Tensor::zeros(&[cfg.vocab]),
        }
    }

    /// `ctx W_c + b_h`, constant across the steps of one sequence.
    fn ctx_bias(&self, ctx: &[f64]) -> Result<Vec<f64>> {
        if ctx.len() != self.cfg.ctx {
            return Err(Error::Dimension(format!(
                "context [{}], model expects [{}]",
                ctx.len(),
                self.cfg.ctx
            )));
        }
        let mut out = self.b_h.data().to_vec();
        vec_mat_acc(ctx, self.w_c.data(), self.cfg.hidden, &mut out);
        Ok(out)
    }

    fn check_token(&self, tok: usize) -> Result<()> {
        if tok >= self.cfg.vocab {
            return Err(Error::Validation(format!(
                "token id {tok} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    /// One recurrent step: `(h_next, logits)`.
    fn step_raw(&self, ctx_bias: &[f64], h_prev: &[f64], tok: usize) -> (Vec<f64>, Vec<f64>) {
        let SeqModelConfig { embed, hidden, vocab, .. } = self.cfg;
        let mut pre = ctx_bias.to_vec();
        let e = &self.embed.data()[tok * embed..(tok + 1) * embed];
        vec_mat_acc(e, self.w_x.data(), hidden, &mut pre);
        vec_mat_acc(h_prev, self.w_h.data(), hidden, &mut pre);
        let h: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
        let mut logits = self.b_o.data().to_vec();
        vec_mat_acc(&h, self.w_o.data(), vocab, &mut logits);
        (h, logits)
    }

    fn run(
        &self,
        ctx: &[f64],
        start: usize,
        max_len: usize,
        mut choose: impl FnMut(usize, &[f64]) -> Option<usize>,
    ) -> Result<SeqTrace> {
        let cb = self.ctx_bias(ctx)?;
        let mut trace = SeqTrace {
            inputs: Vec::new(),
            outputs: Vec::new(),
            hidden: Vec::new(),
            log_probs: Vec::new(),
            probs: Vec::new(),
            ctx: ctx.to_vec(),
        };
        let mut h = vec![0.0; self.cfg.hidden];
        let mut input = start;
        for t in 0..max_len {
            let (h_next, logits) = self.step_raw(&cb, &h, input);
            let (lp, p) = log_softmax(&logits);
            let Some(out) = choose(t, &p) else { break };
            self.check_token(out)?;
            trace.inputs.push(input);
            trace.outputs.push(out);
            trace.hidden.push(h_next.clone());
            trace.log_probs.push(lp);
            trace.probs.push(p);
            h = h_next;
            input = out;
        }
        Ok(trace)
    }

    /// Teacher-forced pass over `tokens` starting from `bos`.
    pub fn teacher_forced(&self, ctx: &[f64], bos: usize, tokens: &[usize]) -> Result<SeqTrace> {
        self.check_token(bos)?;
        self.run(ctx, bos, tokens.len(), |t, _| Some(tokens[t]))
    }

    /// Exact BPTT. `g_logits[t]` is the loss gradient with respect to the
    /// logits of step `t`. Returns parameter gradients and `∂/∂ctx`.
    pub fn backward(&self, trace: &SeqTrace, g_logits: &[Vec<f64>]) -> (SeqModelParams, Vec<f64>) {
        let mut grads = self.zeros_like();
        let g_ctx = self.backward_into(trace, g_logits, &mut grads);
        (grads, g_ctx)
    }

    pub fn backward_into(&self, trace: &SeqTrace, g_logits: &[Vec<f64>], grads: &mut SeqModelParams) -> Vec<f64> {
        let SeqModelConfig { embed, hidden, .. } = self.cfg;
        let mut g_next = vec![0.0; hidden];
        let mut g_bias = vec![0.0; hidden];
        let mut g_pre = vec![0.0; hidden];
        let mut g_e = vec![0.0; embed];
        for t in (0..trace.len()).rev() {
            let h = &trace.hidden[t];
            let gz = &g_logits[t];
            outer_acc(h, gz, grads.w_o.data_mut());
            for (b, g) in grads.b_o.data_mut().iter_mut().zip(gz) {
                *b += g;
            }
            let mut g_h = std::mem::take(&mut g_next);
            mat_vec_acc(self.w_o.data(), gz, &mut g_h);
            for ((gp, gh), hv) in g_pre.iter_mut().zip(&g_h).zip(h) {
                *gp = gh * (1.0 - hv * hv);
            }
            let tok = trace.inputs[t];
            let e = &self.embed.data()[tok * embed..(tok + 1) * embed];
            outer_acc(e, &g_pre, grads.w_x.data_mut());
            g_e.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_acc(self.w_x.data(), &g_pre, &mut g_e);
            for (ge, v) in grads.embed.data_mut()[tok * embed..(tok + 1) * embed]
                .iter_mut()
                .zip(&g_e)
            {
                *ge += v;
            }
            g_next = vec![0.0; hidden];
            if t > 0 {
                outer_acc(&trace.hidden[t - 1], &g_pre, grads.w_h.data_mut());
                mat_vec_acc(self.w_h.data(), &g_pre, &mut g_next);
            }
            for (b, g) in g_bias.iter_mut().zip(&g_pre) {
                *b += g;
            }
        }
        for (b, g) in grads.b_h.data_mut().iter_mut().zip(&g_bias) {
            *b += g;
        }
        outer_acc(&trace.ctx, &g_bias, grads.w_c.data_mut());
        let mut g_ctx = vec![0.0; self.cfg.ctx];
        mat_vec_acc(self.w_c.data(), &g_bias, &mut g_ctx);
        g_ctx
    }
}

/// Single recurrent step as tensors: `(logits[|V|], h_next[hid])`.
pub fn step_logits(
    m: &SeqModelParams,
    h_prev: &Tensor,
    tok_prev: usize,
    ctx: &Tensor,
) -> Result<(Tensor, Tensor)> {
    m.check_token(tok_prev)?;
    if h_prev.len() != m.cfg.hidden {
        return Err(Error::Dimension(format!("hidden state [{}]", h_prev.len())));
    }
    let cb = m.ctx_bias(ctx.data())?;
    let (h, logits) = m.step_raw(&cb, h_prev.data(), tok_prev);
    Ok((Tensor::from_vec(logits), Tensor::from_vec(h)))
}

/// A generated sequence and its exact per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub h_final: Vec<f64>,
}

fn trace_to_sample(trace: SeqTrace) -> Sample {
    Sample {
        log_probs: trace.token_log_probs(),
        h_final: trace.h_final(),
        tokens: trace.outputs,
    }
}

/// Ancestral sampling at temperature 1 until `<eos>` or `max_len` tokens.
pub fn sample_sequence(
    m: &SeqModelParams,
    vocab: &Vocab,
    ctx: &[f64],
    rng: &mut RngStream,
    max_len: usize,
) -> Result<Sample> {
    if max_len == 0 {
        return Err(Error::Validation("max_len must be at least 1".into()));
    }
    let eos = vocab.eos();
    let mut done = false;
    let trace = m.run(ctx, vocab.bos(), max_len, |_, p| {
        if done {
            return None;
        }
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut pick = p.len() - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                pick = i;
                break;
            }
        }
        done = pick == eos;
        Some(pick)
    })?;
    Ok(trace_to_sample(trace))
}

/// Argmax decoding (ties go to the lowest id).
pub fn greedy_decode(m: &SeqModelParams, vocab: &Vocab, ctx: &[f64], max_len: usize) -> Result<Sample> {
    let eos = vocab.eos();
    let mut done = false;
    let trace = m.run(ctx, vocab.bos(), max_len, |_, p| {
        if done {
            return None;
        }
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        done = best == eos;
        Some(best)
    })?;
    Ok(trace_to_sample(trace))
}

/// Teacher-forced log-probabilities.
#[derive(Debug, Clone)]
pub struct SeqLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
    /// Full next-token distribution at every step.
    pub distributions: Vec<Vec<f64>>,
}

pub fn logprob_of(m: &SeqModelParams, vocab: &Vocab, ctx: &[f64], tokens: &[usize]) -> Result<SeqLogProb> {
    let trace = m.teacher_forced(ctx, vocab.bos(), tokens)?;
    let per_token = trace.token_log_probs();
    Ok(SeqLogProb {
        total: per_token.iter().sum(),
        per_token,
        distributions: trace.probs,
    })
}

#[derive(Debug, Clone)]
pub struct SftOutput {
    /// Mean token cross-entropy.
    pub loss: f64,
    pub grads: SeqModelParams,
    pub g_ctx: Vec<f64>,
    pub h_final: Vec<f64>,
}

/// Mean cross-entropy of `target` under teacher forcing, with gradients.
pub fn sft_loss_and_grad(m: &SeqModelParams, vocab: &Vocab, ctx: &[f64], target: &[usize]) -> Result<SftOutput> {
    if target.is_empty() {
        return Err(Error::Validation("SFT target is empty".into()));
    }
    let trace = m.teacher_forced(ctx, vocab.bos(), target)?;
    let n = target.len() as f64;
    let mut loss = 0.0;
    let g_logits: Vec<Vec<f64>> = trace
        .probs
        .iter()
        .zip(&trace.log_probs)
        .zip(target)
        .map(|((p, lp), &y)| {
            loss -= lp[y];
            let mut g: Vec<f64> = p.iter().map(|v| v / n).collect();
            g[y] -= 1.0 / n;
            g
        })
        .collect();
    let (grads, g_ctx) = m.backward(&trace, &g_logits);
    Ok(SftOutput {
        loss: loss / n,
        grads,
        g_ctx,
        h_final: trace.h_final(),
    })
}

/// Stage-2 response policy: fusion block feeding the sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePolicy {
    pub fusion: Fusion,
    pub seq: SeqModelParams,
}

impl ParamSet for ResponsePolicy {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.fusion.tensors();
        v.extend(self.seq.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.fusion.tensors_mut();
        v.extend(self.seq.tensors_mut());
        v
    }
}

impl ResponsePolicy {
    /// Fused context `F_R` for one query.
    pub fn context(&self, f_ana: &[f64], f_emb: &[f64]) -> Result<(Vec<f64>, FusionCache)> {
        self.fusion.forward(f_ana, f_emb)
    }

    pub fn sample(
        &self,
        vocab: &Vocab,
        f_ana: &[f64],
        f_emb: &[f64],
        rng: &mut RngStream,
        max_len: usize,
    ) -> Result<Sample> {
        let (ctx, _) = self.context(f_ana, f_emb)?;
        sample_sequence(&self.seq, vocab, &ctx, rng, max_len)
    }

    pub fn greedy(&self, vocab: &Vocab, f_ana: &[f64], f_emb: &[f64], max_len: usize) -> Result<Sample> {
        let (ctx, _) = self.context(f_ana, f_emb)?;
        greedy_decode(&self.seq, vocab, &ctx, max_len)
    }

    /// Teacher-forced pass through fusion and sequence model.
    pub fn teacher_forced(
        &self,
        vocab: &Vocab,
        f_ana: &[f64],
        f_emb: &[f64],
        tokens: &[usize],
    ) -> Result<(SeqTrace, FusionCache)> {
        let (ctx, cache) = self.context(f_ana, f_emb)?;
        Ok((self.seq.teacher_forced(&ctx, vocab.bos(), tokens)?, cache))
    }

    /// Accumulates gradients of a loss whose logits gradients are `g_logits`.
    pub fn backward_into(
        &self,
        trace: &SeqTrace,
        cache: &FusionCache,
        g_logits: &[Vec<f64>],
        grads: &mut ResponsePolicy,
    ) {
        let g_ctx = self.seq.backward_into(trace, g_logits, &mut grads.seq);
        self.fusion.backward(cache, &g_ctx, &mut grads.fusion);
    }
}

/// Fused stage-2 context: the frozen query-conditioned embedding of
/// `(scene_feat, query_emb)` passed through the fusion block with `f_ana`.
pub fn encode_context(
    enc: &FrozenEncoders,
    scene_feat: &Tensor,
    query_emb: &Tensor,
    f_ana: &Tensor,
    fusion: &Fusion,
) -> Result<Tensor> {
    let f_emb = enc.f_emb(scene_feat.data(), query_emb.data())?;
    let (out, _) = fusion.forward(f_ana.data(), &f_emb)?;
    Ok(Tensor::from_vec(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotRole {
    Current,
    Old,
    Reference,
}

/// Immutable view of a response policy in one of its training roles.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub role: SnapshotRole,
    pub policy: Arc<ResponsePolicy>,
}

impl PolicySnapshot {
    pub fn new(role: SnapshotRole, policy: ResponsePolicy) -> Self {
        Self {
            role,
            policy: Arc::new(policy),
        }
    }
}
