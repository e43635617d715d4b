//! Two sequential training stages and evaluation.
//!
//! Stage 1 fits the analysis model with cross-entropy on the description
//! text; its final hidden state is the interaction descriptor `F_ana`.
//! Stage 2 freezes stage 1 and trains the fusion block and response policy
//! with group-relative policy optimization on the three rewards.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::afs::AfsConfig;
use crate::checkpoint;
use crate::encoders::{EncoderConfig, FrozenEncoders};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::geometry::{rasterize_boxes, BBox, Canvas, CiouAccumulator, Mask};
use crate::grpo::{
    clip_grad_norm, sgrpo_loss_and_grad, update_step, AdamW, GroupBatch, GrpoConfig, QueryInput, Rollout,
    RolloutGroup, StepTelemetry,
};
use crate::numerics::{stream_id, ParamSet, RngStream};
use crate::parser::{parse_response, render_response};
use crate::policy::{
    greedy_decode, sft_loss_and_grad, PolicySnapshot, ResponsePolicy, SeqModelConfig, SeqModelParams,
    SnapshotRole, Vocab, NOUNS,
};
use crate::rewards::{format_reward, total_reward, RewardBreakdown, RewardWeights};
use crate::synth_env::{
    generate_dataset, read_jsonl, scene_features, split_dataset, AnnotatedSample, QueryKind, Splits,
    ANALYSIS_INSTRUCTION, SPLIT_FILES,
};
use crate::text_metrics::{cider, meteor_exact, Caption};

pub const STAGE1_KIND: &str = "analysis_model";
pub const STAGE2_KIND: &str = "response_policy";

const S1_INIT: u64 = 0x51;
const S1_SHUFFLE: u64 = 0x52;
const S2_FUSION_INIT: u64 = 0x61;
const S2_SEQ_INIT: u64 = 0x62;
const S2_PRIOR: u64 = 0x63;
const S2_BATCH: u64 = 0x64;
const S2_ROLLOUT: u64 = 0x65;
const BASELINE_INIT: u64 = 0x71;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub embed: usize,
    pub max_len: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.0,
            embed: 16,
            max_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub groups_per_step: usize,
    pub group_size: usize,
    /// Optimizer passes over each sampled batch before resampling.
    pub inner_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub max_len: usize,
    pub embed: usize,
    pub hidden: usize,
    pub fusion: FusionKind,
    /// Supervised warm-up steps on responses of unrelated queries, which
    /// teach the output grammar without revealing the answer for the input.
    pub prior_steps: usize,
    pub prior_batch: usize,
    pub prior_lr: f64,
    pub grpo: GrpoConfig,
    pub weights: RewardWeights,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 500,
            groups_per_step: 8,
            group_size: 4,
            inner_epochs: 2,
            lr: 1e-3,
            weight_decay: 0.05,
            max_grad_norm: Some(1.0),
            max_len: 40,
            embed: 16,
            hidden: 64,
            fusion: FusionKind::Afs,
            prior_steps: 200,
            prior_batch: 32,
            prior_lr: 1e-2,
            grpo: GrpoConfig::default(),
            weights: RewardWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split '{s}' (train, val, test)"))),
        }
    }
}

impl SplitName {
    pub fn pick<T>(self, s: &Splits<T>) -> &[T] {
        match self {
            SplitName::Train => &s.train,
            SplitName::Val => &s.val,
            SplitName::Test => &s.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the generated dataset, kept apart from the training seed.
    pub data_seed: u64,
    pub n_samples: usize,
    /// Directory with `train/val/test.jsonl`; generated in memory when unset.
    pub data_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub afs: AfsConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval_split: SplitName,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data_seed: 42,
            n_samples: 600,
            data_dir: None,
            encoder: EncoderConfig::default(),
            afs: AfsConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval_split: SplitName::Test,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.afs.validate()?;
        self.stage2.grpo.validate()?;
        self.stage2.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.encoder.scene_dim + self.encoder.text_dim != self.afs.dim_o {
            return bad("encoder scene_dim + text_dim must equal afs.dim_o");
        }
        let s1 = &self.stage1;
        if s1.batch_size == 0 || s1.embed == 0 || s1.max_len == 0 || !(s1.lr > 0.0) {
            return bad("stage1 batch_size, embed, max_len and lr must be positive");
        }
        let s2 = &self.stage2;
        if s2.group_size < 2 {
            return bad("stage2.group_size must be at least 2");
        }
        if s2.groups_per_step == 0 || s2.inner_epochs == 0 || s2.max_len == 0 || s2.embed == 0 || s2.hidden == 0 {
            return bad("stage2 groups_per_step, inner_epochs, max_len, embed and hidden must be positive");
        }
        if !(s2.lr > 0.0) || s2.weight_decay < 0.0 || (s2.prior_steps > 0 && !(s2.prior_lr > 0.0)) {
            return bad("stage2 learning rates must be positive and weight decay non-negative");
        }
        if s2.prior_steps > 0 && s2.prior_batch == 0 {
            return bad("stage2.prior_batch must be positive");
        }
        if s2.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("stage2.max_grad_norm must be positive");
        }
        if self.n_samples < 10 && self.data_dir.is_none() {
            return bad("n_samples must be at least 10");
        }
        Ok(())
    }
}

/// Reads the three split files from `cfg.data_dir`, or generates them.
pub fn load_dataset(cfg: &RunConfig) -> Result<Splits<AnnotatedSample>> {
    match &cfg.data_dir {
        Some(dir) => {
            let mut parts = Vec::new();
            for name in SPLIT_FILES {
                let p = dir.join(name);
                if !p.exists() {
                    return Err(Error::Validation(format!("dataset file {} is missing", p.display())));
                }
                parts.push(read_jsonl(&p)?);
            }
            let test = parts.pop().expect("three parts");
            let val = parts.pop().expect("three parts");
            let train = parts.pop().expect("three parts");
            if train.is_empty() {
                return Err(Error::Validation("training split is empty".into()));
            }
            Ok(Splits { train, val, test })
        }
        None => Ok(split_dataset(generate_dataset(cfg.data_seed, cfg.n_samples)?, cfg.data_seed)),
    }
}

fn write_records<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_records<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_records(path, items)
}

pub fn read_jsonl_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// stage 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMeta {
    pub model: SeqModelConfig,
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub max_len: usize,
}

/// Stage-1 model: describes the scene and exposes its final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisModel {
    pub meta: AnalysisMeta,
    pub params: SeqModelParams,
    enc: FrozenEncoders,
    instruction: Vec<f64>,
}

impl AnalysisModel {
    pub fn new(meta: AnalysisMeta, params: SeqModelParams) -> Result<Self> {
        let enc = FrozenEncoders::new(meta.encoder)?;
        if params.cfg != meta.model || meta.model.ctx != enc.context_dim() {
            return Err(Error::Validation("analysis model does not match its encoder".into()));
        }
        let instruction = enc.embed_text(ANALYSIS_INSTRUCTION);
        Ok(Self {
            meta,
            params,
            enc,
            instruction,
        })
    }

    pub fn encoders(&self) -> &FrozenEncoders {
        &self.enc
    }

    pub fn context(&self, scene_feat: &[f64]) -> Result<Vec<f64>> {
        self.enc.joint(scene_feat, &self.instruction)
    }

    /// Greedy description and the descriptor `F_ana` (final hidden state).
    pub fn describe(&self, scene_feat: &[f64]) -> Result<(String, Vec<f64>)> {
        let ctx = self.context(scene_feat)?;
        let s = greedy_decode(&self.params, &self.meta.vocab, &ctx, self.meta.max_len)?;
        Ok((self.meta.vocab.detokenize(&s.tokens), s.h_final))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, STAGE1_KIND, &self.meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path, STAGE1_KIND, |m: &AnalysisMeta| {
            Ok(SeqModelParams::zeros(m.model))
        })?;
        Self::new(meta, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(STAGE1_KIND, &self.meta, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub model: AnalysisModel,
    pub telemetry: Vec<EpochTelemetry>,
}

fn with_eos(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut t = vocab.tokenize(text)?;
    t.push(vocab.eos());
    Ok(t)
}

/// Averaged SFT gradient over `(ctx, target)` pairs; returns the mean loss.
fn sft_batch(
    params: &SeqModelParams,
    vocab: &Vocab,
    items: &[(&[f64], &[usize])],
) -> Result<(f64, SeqModelParams)> {
    let outs: Vec<Result<(f64, SeqModelParams)>> = items
        .par_iter()
        .map(|(ctx, target)| sft_loss_and_grad(params, vocab, ctx, target).map(|o| (o.loss, o.grads)))
        .collect();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for o in outs {
        let (l, g) = o?;
        loss += l;
        grads.add_assign(&g);
    }
    let n = items.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

pub fn train_stage1(cfg: &RunConfig, data: &Splits<AnnotatedSample>) -> Result<Stage1Output> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let vocab = Vocab::standard();
    let enc = FrozenEncoders::new(cfg.encoder)?;
    let meta = AnalysisMeta {
        model: SeqModelConfig {
            vocab: vocab.len(),
            embed: cfg.stage1.embed,
            hidden: cfg.afs.dim_i,
            ctx: enc.context_dim(),
        },
        vocab: vocab.clone(),
        encoder: cfg.encoder,
        max_len: cfg.stage1.max_len,
    };
    let params = SeqModelParams::init(meta.model, &mut RngStream::new(cfg.seed, S1_INIT))?;
    let mut model = AnalysisModel::new(meta, params)?;

    let examples: Vec<(Vec<f64>, Vec<usize>)> = data
        .train
        .par_iter()
        .map(|s| {
            let feat = scene_features(&s.scene, &enc)?;
            Ok((model.context(feat.data())?, with_eos(&vocab, &s.analysis_text)?))
        })
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(cfg.stage1.lr, cfg.stage1.weight_decay);
    let mut telemetry = Vec::with_capacity(cfg.stage1.epochs);
    let epochs = cfg.stage1.epochs;
    for epoch in 0..epochs {
        // cosine decay over epochs
        opt.lr = cfg.stage1.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos());
        let mut order: Vec<usize> = (0..examples.len()).collect();
        RngStream::new(cfg.seed, stream_id(S1_SHUFFLE, &[epoch as u64])).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.stage1.batch_size) {
            let items: Vec<(&[f64], &[usize])> = chunk
                .iter()
                .map(|&i| (examples[i].0.as_slice(), examples[i].1.as_slice()))
                .collect();
            let (loss, mut grads) = sft_batch(&model.params, &vocab, &items)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("stage-1 loss became {loss} in epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            grads.scale(-1.0);
            update_step(&mut model.params, &grads, &mut opt)?;
        }
        let mean_loss = total / examples.len() as f64;
        log::info!("stage1 epoch {epoch}: loss {mean_loss:.4}");
        telemetry.push(EpochTelemetry { epoch, mean_loss });
    }
    Ok(Stage1Output { model, telemetry })
}

// ---------------------------------------------------------------------------
// stage 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub fusion: FusionKind,
    pub afs: AfsConfig,
    pub model: SeqModelConfig,
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub max_len: usize,
}

/// Stage-2 policy together with what is needed to rebuild and run it.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseModel {
    pub meta: PolicyMeta,
    pub policy: ResponsePolicy,
}

impl ResponseModel {
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let vocab = Vocab::standard();
        let meta = PolicyMeta {
            fusion: cfg.stage2.fusion,
            afs: cfg.afs,
            model: SeqModelConfig {
                vocab: vocab.len(),
                embed: cfg.stage2.embed,
                hidden: cfg.stage2.hidden,
                ctx: cfg.afs.dim_o,
            },
            vocab,
            encoder: cfg.encoder,
            max_len: cfg.stage2.max_len,
        };
        let fusion = Fusion::init(meta.fusion, meta.afs, &mut RngStream::new(seed, S2_FUSION_INIT))?;
        let seq = SeqModelParams::init(meta.model, &mut RngStream::new(seed, S2_SEQ_INIT))?;
        Ok(Self {
            meta,
            policy: ResponsePolicy { fusion, seq },
        })
    }

    fn skeleton(meta: &PolicyMeta) -> Result<ResponsePolicy> {
        Ok(ResponsePolicy {
            fusion: Fusion::init(meta.fusion, meta.afs, &mut RngStream::new(0, 0))?,
            seq: SeqModelParams::zeros(meta.model),
        })
    }

    /// Greedy response text.
    pub fn respond(&self, input: &QueryInput) -> Result<String> {
        let s = self
            .policy
            .greedy(&self.meta.vocab, &input.f_ana, &input.f_emb, self.meta.max_len)?;
        Ok(self.meta.vocab.detokenize(&s.tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, STAGE2_KIND, &self.meta, &self.policy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, policy) = checkpoint::load(path, STAGE2_KIND, Self::skeleton)?;
        Ok(Self { meta, policy })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(STAGE2_KIND, &self.meta, &self.policy)
    }
}

/// One query with frozen inputs and ground truth.
#[derive(Debug, Clone)]
pub struct QueryItem {
    pub id: String,
    pub kind: QueryKind,
    pub input: QueryInput,
    pub gt_answer: String,
    pub gt_mask: Mask,
    pub canvas: Canvas,
    pub oracle: String,
}

pub fn query_id(scene_id: &str, index: usize) -> String {
    format!("{scene_id}#{index}")
}

/// Frozen per-query inputs: stage-1 descriptor and query-conditioned embedding.
pub fn prepare_queries(stage1: &AnalysisModel, samples: &[AnnotatedSample]) -> Result<Vec<QueryItem>> {
    let enc = stage1.encoders();
    let per_sample: Vec<Result<Vec<QueryItem>>> = samples
        .par_iter()
        .map(|s| {
            let feat = scene_features(&s.scene, enc)?;
            let (_, f_ana) = stage1.describe(feat.data())?;
            s.queries
                .iter()
                .enumerate()
                .map(|(qi, q)| {
                    let f_emb = enc.f_emb(feat.data(), &enc.embed_text(&q.query_text))?;
                    Ok(QueryItem {
                        id: query_id(&s.scene_id, qi),
                        kind: q.kind,
                        input: QueryInput {
                            f_ana: f_ana.clone(),
                            f_emb,
                        },
                        gt_answer: q.gt_answer.clone(),
                        gt_mask: q.gt_mask.clone(),
                        canvas: s.scene.canvas,
                        oracle: q.oracle_response(&s.scene)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_sample {
        out.extend(r?);
    }
    Ok(out)
}

pub fn score_response(raw: &str, item: &QueryItem, w: RewardWeights) -> Result<RewardBreakdown> {
    total_reward(&parse_response(raw, item.canvas), &item.gt_answer, &item.gt_mask, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub step: usize,
    pub group: usize,
    pub index: usize,
    pub query_id: String,
    pub raw_response: String,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub model: ResponseModel,
    /// Policy after the grammar warm-up; also the frozen reference.
    pub warmed: ResponsePolicy,
    pub telemetry: Vec<StepTelemetry>,
    pub rollouts: Vec<RolloutLog>,
}

fn check_stage1(cfg: &RunConfig, stage1: &AnalysisModel) -> Result<()> {
    if stage1.meta.model.hidden != cfg.afs.dim_i {
        return Err(Error::Validation(format!(
            "stage-1 hidden size {} does not match afs.dim_i {}",
            stage1.meta.model.hidden, cfg.afs.dim_i
        )));
    }
    if stage1.meta.encoder != cfg.encoder {
        return Err(Error::Validation("stage-1 checkpoint uses different frozen encoders".into()));
    }
    Ok(())
}

/// A well-formed response with random content: the answer names zero, one
/// or two random entities and carries one uniformly random box per entity.
/// "none" is drawn about as often as any single noun.
pub fn random_response(rng: &mut RngStream, canvas: Canvas) -> Result<String> {
    let n = match rng.index(10) {
        0 => 0,
        k => 1 + k % 2,
    };
    let names: Vec<&str> = (0..n).map(|_| NOUNS[rng.index(NOUNS.len())]).collect();
    let answer = if names.is_empty() { "none".to_string() } else { names.join(" and ") };
    let mut coord = |len: u32| -> (u32, u32) {
        let side = rng.range_inclusive(4, len as i64 / 2) as u32;
        let start = rng.range_inclusive(0, (len - side) as i64) as u32;
        (start, start + side)
    };
    let boxes = (0..n)
        .map(|_| {
            let (sx, ex) = coord(canvas.width);
            let (sy, ey) = coord(canvas.height);
            BBox::new(sx, sy, ex, ey)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(render_response(&answer, &boxes))
}

/// Supervised warm-up of the sequence model on [`random_response`] targets,
/// which teach the output grammar and nothing about the task. The fusion
/// block is left untouched.
fn grammar_warmup(cfg: &RunConfig, model: &mut ResponseModel, items: &[QueryItem]) -> Result<()> {
    let s2 = &cfg.stage2;
    if s2.prior_steps == 0 {
        return Ok(());
    }
    let vocab = model.meta.vocab.clone();
    let mut opt = AdamW::new(s2.prior_lr, 0.0);
    for step in 0..s2.prior_steps {
        let mut rng = RngStream::new(cfg.seed, stream_id(S2_PRIOR, &[step as u64]));
        let mut ctxs = Vec::with_capacity(s2.prior_batch);
        let mut targets = Vec::with_capacity(s2.prior_batch);
        for _ in 0..s2.prior_batch {
            let it = &items[rng.index(items.len())];
            ctxs.push(model.policy.context(&it.input.f_ana, &it.input.f_emb)?.0);
            targets.push(with_eos(&vocab, &random_response(&mut rng, it.canvas)?)?);
        }
        let batch: Vec<(&[f64], &[usize])> = ctxs
            .iter()
            .zip(&targets)
            .map(|(c, t)| (c.as_slice(), t.as_slice()))
            .collect();
        let (loss, mut grads) = sft_batch(&model.policy.seq, &vocab, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("warm-up loss became {loss} at step {step}")));
        }
        grads.scale(-1.0);
        update_step(&mut model.policy.seq, &grads, &mut opt)?;
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Stage-2 training. When `out_dir` is given, telemetry is appended to
/// `telemetry.jsonl` as it is produced and a NaN abort leaves the last good
/// policy in `last_good.ckpt`.
pub fn train_stage2(
    cfg: &RunConfig,
    stage1: &AnalysisModel,
    data: &Splits<AnnotatedSample>,
    out_dir: Option<&Path>,
) -> Result<Stage2Output> {
    cfg.validate()?;
    check_stage1(cfg, stage1)?;
    let items = prepare_queries(stage1, &data.train)?;
    if items.is_empty() {
        return Err(Error::Validation("training split has no queries".into()));
    }
    let s2 = &cfg.stage2;
    let mut model = ResponseModel::init(cfg, cfg.seed)?;
    grammar_warmup(cfg, &mut model, &items)?;
    let warmed = model.policy.clone();
    let reference = PolicySnapshot::new(SnapshotRole::Reference, warmed.clone());
    let vocab = model.meta.vocab.clone();

    let mut sink = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("telemetry.jsonl"))?))
        }
        None => None,
    };
    let mut opt = AdamW::new(s2.lr, s2.weight_decay);
    let mut telemetry = Vec::with_capacity(s2.steps);
    let mut logs = Vec::with_capacity(s2.steps * s2.groups_per_step * s2.group_size);

    for step in 0..s2.steps {
        let old = PolicySnapshot::new(SnapshotRole::Old, model.policy.clone());
        let mut rng = RngStream::new(cfg.seed, stream_id(S2_BATCH, &[step as u64]));
        let chosen: Vec<usize> = (0..s2.groups_per_step).map(|_| rng.index(items.len())).collect();
        let jobs: Vec<(usize, usize)> = (0..s2.groups_per_step)
            .flat_map(|g| (0..s2.group_size).map(move |i| (g, i)))
            .collect();
        let sampled: Vec<Result<Rollout>> = jobs
            .par_iter()
            .map(|&(g, i)| {
                let item = &items[chosen[g]];
                let mut r = RngStream::new(cfg.seed, stream_id(S2_ROLLOUT, &[step as u64, g as u64, i as u64]));
                let s = old
                    .policy
                    .sample(&vocab, &item.input.f_ana, &item.input.f_emb, &mut r, s2.max_len)?;
                let raw = vocab.detokenize(&s.tokens);
                let reward = score_response(&raw, item, s2.weights)?;
                Ok(Rollout {
                    query_id: item.id.clone(),
                    tokens: s.tokens,
                    old_log_probs: s.log_probs,
                    raw_response: raw,
                    reward,
                })
            })
            .collect();
        let mut groups: Vec<RolloutGroup> = chosen
            .iter()
            .map(|&c| RolloutGroup {
                input: items[c].input.clone(),
                rollouts: Vec::with_capacity(s2.group_size),
            })
            .collect();
        for ((g, i), r) in jobs.iter().zip(sampled) {
            let r = r?;
            logs.push(RolloutLog {
                step,
                group: *g,
                index: *i,
                query_id: r.query_id.clone(),
                raw_response: r.raw_response.clone(),
                reward: r.reward,
            });
            groups[*g].rollouts.push(r);
        }
        let batch = GroupBatch::new(groups, s2.group_size)?;

        let mut loss_acc = 0.0;
        let mut kl_acc = 0.0;
        let mut clip_acc = 0.0;
        for _ in 0..s2.inner_epochs {
            let current = PolicySnapshot::new(SnapshotRole::Current, model.policy.clone());
            let out = sgrpo_loss_and_grad(&batch, &current, &reference, &s2.grpo, &vocab)?;
            let mut grads = out.grads.expect("gradient requested");
            if !out.loss.is_finite() || !grads.all_finite() {
                if let Some(dir) = out_dir {
                    model.save(&dir.join("last_good.ckpt"))?;
                }
                return Err(Error::Numeric(format!(
                    "stage-2 objective became non-finite at step {step}"
                )));
            }
            if let Some(m) = s2.max_grad_norm {
                clip_grad_norm(&mut grads, m);
            }
            update_step(&mut model.policy, &grads, &mut opt)?;
            loss_acc += out.loss;
            kl_acc += out.mean_kl;
            clip_acc += out.clip_fraction;
        }
        let k = s2.inner_epochs as f64;
        let rewards: Vec<&RewardBreakdown> = batch.rollouts().map(|r| &r.reward).collect();
        let rec = StepTelemetry {
            step,
            mean_reward: mean(rewards.iter().map(|r| r.total)),
            mean_r_format: mean(rewards.iter().map(|r| r.r_format)),
            mean_r_answer: mean(rewards.iter().map(|r| r.r_answer)),
            mean_r_ground: mean(rewards.iter().map(|r| r.r_ground)),
            loss: loss_acc / k,
            mean_kl: kl_acc / k,
            clip_fraction: clip_acc / k,
        };
        if step % 50 == 0 {
            log::info!(
                "stage2 step {step}: reward {:.3} (f {:.2} a {:.2} g {:.2}) kl {:.4} clip {:.3}",
                rec.mean_reward,
                rec.mean_r_format,
                rec.mean_r_answer,
                rec.mean_r_ground,
                rec.mean_kl,
                rec.clip_fraction
            );
        }
        if let Some(w) = sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        telemetry.push(rec);
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    Ok(Stage2Output {
        model,
        warmed,
        telemetry,
        rollouts: logs,
    })
}

/// Mean of `mean_reward` over the last `window` steps.
pub fn final_window_mean(telemetry: &[StepTelemetry], window: usize) -> f64 {
    let start = telemetry.len().saturating_sub(window);
    mean(telemetry[start..].iter().map(|t| t.mean_reward))
}

/// Mean of `mean_reward` over steps `[from, to)`.
pub fn window_mean(telemetry: &[StepTelemetry], from: usize, to: usize) -> f64 {
    mean(telemetry.iter().filter(|t| t.step >= from && t.step < to).map(|t| t.mean_reward))
}

/// Recomputes every logged reward from its raw response and checks each
/// telemetry record's reward means against them.
pub fn audit_rollouts(
    telemetry: &[StepTelemetry],
    rollouts: &[RolloutLog],
    items: &[QueryItem],
    w: RewardWeights,
) -> Result<()> {
    let by_id: HashMap<&str, &QueryItem> = items.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut per_step: BTreeMap<usize, Vec<RewardBreakdown>> = BTreeMap::new();
    for r in rollouts {
        let item = by_id
            .get(r.query_id.as_str())
            .ok_or_else(|| Error::Validation(format!("rollout refers to unknown query {}", r.query_id)))?;
        let again = score_response(&r.raw_response, item, w)?;
        if again != r.reward {
            return Err(Error::Validation(format!(
                "step {} rollout {}/{}: logged reward {:?} but recomputed {:?}",
                r.step, r.group, r.index, r.reward, again
            )));
        }
        per_step.entry(r.step).or_default().push(again);
    }
    for t in telemetry {
        let rs = per_step
            .get(&t.step)
            .ok_or_else(|| Error::Validation(format!("no rollouts logged for step {}", t.step)))?;
        let checks = [
            (t.mean_reward, mean(rs.iter().map(|r| r.total))),
            (t.mean_r_format, mean(rs.iter().map(|r| r.r_format))),
            (t.mean_r_answer, mean(rs.iter().map(|r| r.r_answer))),
            (t.mean_r_ground, mean(rs.iter().map(|r| r.r_ground))),
        ];
        if checks.iter().any(|(a, b)| a != b) {
            return Err(Error::Validation(format!("telemetry of step {} disagrees with its rollouts", t.step)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingScores {
    /// `None` when every prediction and target was empty.
    pub ciou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub analysis: TextScores,
    pub answering: TextScores,
    pub grounding: GroundingScores,
    pub per_kind_ciou: BTreeMap<String, Option<f64>>,
    pub n_samples: usize,
    pub n_queries: usize,
    pub mean_format_reward: f64,
    pub mean_total_reward: f64,
}

impl EvalReport {
    pub fn ciou_or_zero(&self) -> f64 {
        self.grounding.ciou.unwrap_or(0.0)
    }
}

struct QueryOutcome {
    kind: QueryKind,
    answer: String,
    gt_answer: String,
    acc: CiouAccumulator,
    format: f64,
    total: f64,
}

/// Scores analysis texts and raw responses produced by arbitrary callbacks.
pub fn evaluate_with<A, R>(samples: &[AnnotatedSample], w: RewardWeights, analyze: A, respond: R) -> Result<EvalReport>
where
    A: Fn(usize, &AnnotatedSample) -> Result<String> + Sync,
    R: Fn(usize, usize, &AnnotatedSample) -> Result<String> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    type PerSample = (String, Vec<QueryOutcome>);
    let per: Vec<Result<PerSample>> = samples
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let text = analyze(si, s)?;
            let outcomes = s
                .queries
                .iter()
                .enumerate()
                .map(|(qi, q)| {
                    let raw = respond(si, qi, s)?;
                    let parsed = parse_response(&raw, s.scene.canvas);
                    let pred = rasterize_boxes(&parsed.boxes, s.scene.canvas)?;
                    let mut acc = CiouAccumulator::default();
                    acc.add(&pred, &q.gt_mask)?;
                    let total = total_reward(&parsed, &q.gt_answer, &q.gt_mask, w)?.total;
                    Ok(QueryOutcome {
                        kind: q.kind,
                        format: format_reward(&parsed),
                        answer: parsed.answer_text,
                        gt_answer: q.gt_answer.clone(),
                        acc,
                        total,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((text, outcomes))
        })
        .collect();
    let mut analyses = Vec::with_capacity(samples.len());
    let mut outcomes = Vec::new();
    for r in per {
        let (t, o) = r?;
        analyses.push(t);
        outcomes.extend(o);
    }

    let ana_c: Vec<Caption> = analyses.iter().map(|t| Caption::from_text(t)).collect();
    let ana_r: Vec<Caption> = samples.iter().map(|s| Caption::from_text(&s.analysis_text)).collect();
    let ans_c: Vec<Caption> = outcomes.iter().map(|o| Caption::from_text(&o.answer)).collect();
    let ans_r: Vec<Caption> = outcomes.iter().map(|o| Caption::from_text(&o.gt_answer)).collect();
    let meteor_mean = |c: &[Caption], r: &[Caption]| -> Result<f64> {
        let mut s = 0.0;
        for (a, b) in c.iter().zip(r) {
            s += meteor_exact(a, b)?;
        }
        Ok(s / c.len() as f64)
    };

    let mut all = CiouAccumulator::default();
    let mut by_kind: BTreeMap<String, CiouAccumulator> = BTreeMap::new();
    for o in &outcomes {
        all.merge(&o.acc);
        by_kind.entry(o.kind.name().to_string()).or_default().merge(&o.acc);
    }
    Ok(EvalReport {
        analysis: TextScores {
            meteor: meteor_mean(&ana_c, &ana_r)?,
            cider: cider(&ana_c, &ana_r, &ana_r)?,
        },
        answering: TextScores {
            meteor: meteor_mean(&ans_c, &ans_r)?,
            cider: cider(&ans_c, &ans_r, &ans_r)?,
        },
        grounding: GroundingScores { ciou: all.value() },
        per_kind_ciou: by_kind.into_iter().map(|(k, a)| (k, a.value())).collect(),
        n_samples: samples.len(),
        n_queries: outcomes.len(),
        mean_format_reward: mean(outcomes.iter().map(|o| o.format)),
        mean_total_reward: mean(outcomes.iter().map(|o| o.total)),
    })
}

/// Greedy evaluation of a stage-1 / stage-2 checkpoint pair.
pub fn evaluate(
    stage1: &AnalysisModel,
    policy: &ResponseModel,
    samples: &[AnnotatedSample],
    w: RewardWeights,
) -> Result<EvalReport> {
    if policy.meta.encoder != stage1.meta.encoder {
        return Err(Error::Validation("checkpoints were trained with different encoders".into()));
    }
    let enc = stage1.encoders();
    let inputs: Vec<(String, Vec<QueryInput>)> = samples
        .par_iter()
        .map(|s| {
            let feat = scene_features(&s.scene, enc)?;
            let (text, f_ana) = stage1.describe(feat.data())?;
            let qs = s
                .queries
                .iter()
                .map(|q| {
                    Ok(QueryInput {
                        f_ana: f_ana.clone(),
                        f_emb: enc.f_emb(feat.data(), &enc.embed_text(&q.query_text))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((text, qs))
        })
        .collect::<Result<_>>()?;
    evaluate_with(
        samples,
        w,
        |si, _| Ok(inputs[si].0.clone()),
        |si, qi, _| policy.respond(&inputs[si].1[qi]),
    )
}

/// A randomly initialized response policy, the untrained reference point.
pub fn untrained_policy(cfg: &RunConfig) -> Result<ResponseModel> {
    ResponseModel::init(cfg, cfg.seed ^ BASELINE_INIT)
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub fusion: FusionKind,
    pub report: EvalReport,
    pub final_mean_reward: f64,
    pub telemetry: Vec<StepTelemetry>,
}

/// Window used for "final mean reward" comparisons.
pub const FINAL_WINDOW: usize = 100;

/// Stage-2 training and evaluation with the fusion block swapped.
pub fn ablation_run(
    cfg: &RunConfig,
    fusion: FusionKind,
    stage1: &AnalysisModel,
    data: &Splits<AnnotatedSample>,
) -> Result<AblationResult> {
    let mut cfg = cfg.clone();
    cfg.stage2.fusion = fusion;
    let out = train_stage2(&cfg, stage1, data, None)?;
    let report = evaluate(stage1, &out.model, cfg.eval_split.pick(data), cfg.stage2.weights)?;
    Ok(AblationResult {
        fusion,
        report,
        final_mean_reward: final_window_mean(&out.telemetry, FINAL_WINDOW),
        telemetry: out.telemetry,
    })
}
