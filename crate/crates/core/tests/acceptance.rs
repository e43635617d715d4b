//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use egorl::afs::{afs_backward, afs_forward, afs_init, AfsConfig};
use egorl::fusion::FusionKind;
use egorl::geometry::{rasterize_boxes, BBox, Canvas};
use egorl::gradcheck::{afs_suite, sgrpo_suite};
use egorl::grpo::{asym_clip, group_advantages, token_kl, GrpoConfig, StepTelemetry};
use egorl::numerics::{RngStream, Tensor};
use egorl::parser::parse_response;
use egorl::pipeline::{
    evaluate, final_window_mean, load_dataset, train_stage1, train_stage2, untrained_policy, window_mean,
    AnalysisModel, EvalReport, RunConfig, FINAL_WINDOW,
};
use egorl::rewards::{answer_reward, format_reward, grounding_reward, total_reward, RewardWeights};
use egorl::synth_env::{generate_dataset, AnnotatedSample, CANVAS};
use egorl::Result;

const SEEDS: [u64; 3] = [42, 123, 3407];

struct Line {
    id: usize,
    passed: bool,
    detail: String,
    secs: f64,
}

fn dp_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn criterion_1() -> Result<(bool, String)> {
    let c = Canvas::new(16, 16);
    let f = [
        format_reward(&parse_response("<answer>mug</answer><bbox>[1,1,4,4]</bbox>", c)),
        format_reward(&parse_response("<answer>mug</answer>", c)),
        format_reward(&parse_response("just a mug", c)),
    ];
    let oracle = 1.0 - dp_levenshtein("kitten", "sitting") as f64 / 7.0;
    let a = answer_reward("kitten", "sitting")?;
    let gt = rasterize_boxes(&[BBox::new(5, 5, 15, 15)?], c)?;
    let g = grounding_reward(&[BBox::new(0, 0, 10, 10)?], &gt, c)?;
    let ok = f == [1.0, 0.5, 0.0] && (a - oracle).abs() <= 1e-9 && (g - 25.0 / 175.0).abs() <= 1e-12;
    Ok((ok, format!("format {f:?}, answer {a:.12} (dp {oracle:.12}), ground {g:.15}")))
}

/// Total reward of every ground-truth response, in dataset order.
fn oracle_rewards(samples: &[AnnotatedSample]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in samples {
        for q in &s.queries {
            let raw = q.oracle_response(&s.scene)?;
            let r = total_reward(&parse_response(&raw, CANVAS), &q.gt_answer, &q.gt_mask, RewardWeights::default())?;
            out.push(r.total);
        }
    }
    Ok(out)
}

fn criterion_2() -> Result<(bool, String, Vec<f64>)> {
    let data = generate_dataset(42, 600)?;
    let r = oracle_rewards(&data)?;
    let hits = r.iter().filter(|&&v| v == 4.0).count();
    Ok((hits == r.len(), format!("{hits}/{} oracle responses score exactly 4.0", r.len()), r))
}

fn criterion_3() -> Result<(bool, String)> {
    let mut rng = RngStream::new(3, 0);
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let g = 2 + rng.index(15);
        let rewards: Vec<f64> = (0..g).map(|_| 4.0 * rng.next_f64()).collect();
        let a = group_advantages(&rewards, 1e-4)?;
        worst_sum = worst_sum.max(a.iter().sum::<f64>().abs());
    }
    let cfg = GrpoConfig::default();
    let mut clip_ok = true;
    for _ in 0..10_000 {
        let rho = (6.0 * rng.next_f64() - 3.0).exp();
        let c = asym_clip(rho, cfg.eps_low, cfg.eps_high);
        clip_ok &= (0.8..=1.28).contains(&c);
    }
    let mut kl_min = f64::INFINITY;
    let mut kl_self = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + rng.index(10);
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let p = norm((0..n).map(|_| rng.next_f64() + 1e-3).collect());
        let q = norm((0..n).map(|_| rng.next_f64() + 1e-3).collect());
        kl_min = kl_min.min(token_kl(&p, &q)?);
        kl_self = kl_self.max(token_kl(&p, &p)?.abs());
    }
    let grad = sgrpo_suite(20, 11, cfg)?;
    let ok = worst_sum <= 1e-12 && clip_ok && kl_min >= 0.0 && kl_self == 0.0 && grad.passed && grad.cases == 20;
    Ok((
        ok,
        format!(
            "max |sum adv| {worst_sum:.1e}, clip in range {clip_ok}, min KL {kl_min:.2e}, KL(p,p) {kl_self}, \
             sgrpo grad rel err {:.2e} over {} cases",
            grad.max_rel_err, grad.cases
        ),
    ))
}

fn criterion_4() -> Result<(bool, String)> {
    let cfg = AfsConfig::default();
    let mut rng = RngStream::new(4, 0);
    let p = afs_init(cfg, &mut rng)?;
    let b = 5;
    let f_ana = Tensor::uniform(&[b, cfg.dim_i], 1.0, &mut rng);
    let f_emb = Tensor::uniform(&[b, cfg.dim_o], 1.0, &mut rng);
    let (out, cache) = afs_forward(&f_ana, &f_emb, &p)?;
    let identity = out.data() == f_emb.data();
    let g_out = Tensor::uniform(&[b, cfg.dim_o], 1.0, &mut rng);
    let grads = afs_backward(&p, &cache, &g_out)?;
    let passthrough = grads.f_emb.data() == g_out.data();
    let mut worst_row = 0.0f64;
    for s in cache.samples() {
        let a = s.attention();
        let h = (a.len() as f64).sqrt() as usize;
        for row in a.chunks(h) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let suite = afs_suite(20, 13)?;
    let ok = identity && passthrough && worst_row <= 1e-12 && suite.passed && suite.cases == 20;
    Ok((
        ok,
        format!(
            "identity {identity}, grad passthrough {passthrough}, worst row-sum error {worst_row:.1e}, \
             grad rel err {:.2e} over {} cases",
            suite.max_rel_err, suite.cases
        ),
    ))
}

struct Run {
    telemetry: Vec<StepTelemetry>,
    report: EvalReport,
}

fn config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

fn stage2_run(cfg: &RunConfig, stage1: &AnalysisModel) -> Result<Run> {
    let data = load_dataset(cfg)?;
    let out = train_stage2(cfg, stage1, &data, None)?;
    let report = evaluate(stage1, &out.model, cfg.eval_split.pick(&data), cfg.stage2.weights)?;
    Ok(Run {
        telemetry: out.telemetry,
        report,
    })
}

fn telemetry_bytes(t: &[StepTelemetry]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in t {
        out.extend(serde_json::to_vec(r).expect("telemetry serializes"));
        out.push(b'\n');
    }
    out
}

fn relative_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[test]
fn acceptance_criteria() -> Result<()> {
    let mut lines = Vec::new();
    let mut push = |id: usize, passed: bool, detail: String, start: Instant| {
        let line = Line {
            id,
            passed,
            detail,
            secs: start.elapsed().as_secs_f64(),
        };
        println!(
            "criterion {}: {} ({:.1}s) {}",
            line.id,
            if line.passed { "PASS" } else { "FAIL" },
            line.secs,
            line.detail
        );
        lines.push(line);
    };

    let t = Instant::now();
    let (ok, d) = criterion_1()?;
    push(1, ok && t.elapsed().as_secs_f64() < 1.0, d, t);

    let t = Instant::now();
    let (ok, d, oracle_first) = criterion_2()?;
    push(2, ok && t.elapsed().as_secs_f64() < 5.0, d, t);

    let t = Instant::now();
    let (ok, d) = criterion_3()?;
    push(3, ok && t.elapsed().as_secs_f64() < 30.0, d, t);

    let t = Instant::now();
    let (ok, d) = criterion_4()?;
    push(4, ok && t.elapsed().as_secs_f64() < 10.0, d, t);

    // stage-1 models are shared by every stage-2 run of the same seed
    let mut stage1 = BTreeMap::new();
    for seed in SEEDS {
        let cfg = config(seed);
        let data = load_dataset(&cfg)?;
        stage1.insert(seed, train_stage1(&cfg, &data)?.model);
    }

    let t = Instant::now();
    let base_cfg = config(42);
    let base = stage2_run(&base_cfg, &stage1[&42])?;
    let early = window_mean(&base.telemetry, 0, 100);
    let late = window_mean(&base.telemetry, 400, 500);
    let data = load_dataset(&base_cfg)?;
    let baseline = evaluate(
        &stage1[&42],
        &untrained_policy(&base_cfg)?,
        base_cfg.eval_split.pick(&data),
        base_cfg.stage2.weights,
    )?;
    let gain = base.report.ciou_or_zero() - baseline.ciou_or_zero();
    let ok = late >= 1.5 * early && gain >= 0.30 && t.elapsed().as_secs_f64() < 600.0;
    push(
        5,
        ok,
        format!(
            "reward steps 1-100 {early:.3}, 401-500 {late:.3} (x{:.3}, need 1.5); test cIoU {:.3} vs untrained {:.3} \
             (gain {gain:.3}, need 0.30)",
            late / early,
            base.report.ciou_or_zero(),
            baseline.ciou_or_zero()
        ),
        t,
    );

    let t = Instant::now();
    let mut no_ground = base_cfg.clone();
    no_ground.stage2.weights = RewardWeights::new(1.0, 1.0, 0.0)?;
    let no_ground = stage2_run(&no_ground, &stage1[&42])?;
    let mut no_answer = base_cfg.clone();
    no_answer.stage2.weights = RewardWeights::new(1.0, 0.0, 1.0)?;
    let no_answer = stage2_run(&no_answer, &stage1[&42])?;
    let ciou_drop = no_ground.report.ciou_or_zero() < base.report.ciou_or_zero();
    let meteor_drop = no_answer.report.answering.meteor < base.report.answering.meteor;
    push(
        6,
        ciou_drop && meteor_drop,
        format!(
            "cIoU lambda_g=0 {:.3} vs default {:.3}; answering METEOR lambda_a=0 {:.3} vs default {:.3}",
            no_ground.report.ciou_or_zero(),
            base.report.ciou_or_zero(),
            no_answer.report.answering.meteor,
            base.report.answering.meteor
        ),
        t,
    );

    let t = Instant::now();
    let variants = [
        FusionKind::Afs,
        FusionKind::None,
        FusionKind::Concat,
        FusionKind::Sum,
        FusionKind::Mlp,
    ];
    let mut finals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        for v in variants {
            let telemetry = if seed == 42 && v == FusionKind::Afs {
                base.telemetry.clone()
            } else {
                let mut cfg = config(seed);
                cfg.stage2.fusion = v;
                let data = load_dataset(&cfg)?;
                train_stage2(&cfg, &stage1[&seed], &data, None)?.telemetry
            };
            finals
                .entry(v.to_string())
                .or_default()
                .push(final_window_mean(&telemetry, FINAL_WINDOW));
        }
    }
    let avg: BTreeMap<&str, f64> = finals
        .iter()
        .map(|(k, v)| (k.as_str(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let afs = avg["afs"];
    let ok = avg.iter().all(|(_, &v)| afs >= v);
    let table: Vec<String> = avg.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    push(7, ok, format!("seed-averaged final reward: {}", table.join(", ")), t);

    let t = Instant::now();
    let rsd = relative_std(&finals["afs"]);
    push(
        8,
        rsd <= 0.15,
        format!("final-window reward over seeds {:?} -> RSD {:.2}%", finals["afs"], 100.0 * rsd),
        t,
    );

    let t = Instant::now();
    let oracle_again = oracle_rewards(&generate_dataset(42, 600)?)?;
    let rerun = train_stage2(&base_cfg, &stage1[&42], &load_dataset(&base_cfg)?, None)?;
    let same_oracle = oracle_again == oracle_first;
    let same_telemetry = telemetry_bytes(&rerun.telemetry) == telemetry_bytes(&base.telemetry);
    push(
        9,
        same_oracle && same_telemetry,
        format!("oracle rerun identical {same_oracle}, stage-2 telemetry bytes identical {same_telemetry}"),
        t,
    );

    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    Ok(())
}
