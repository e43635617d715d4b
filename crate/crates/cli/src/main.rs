//! Command-line driver: data generation, both training stages, evaluation,
//! reward scoring, gradient checks, fusion ablations and reward plots.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use egorl::fusion::FusionKind;
use egorl::gradcheck;
use egorl::grpo::StepTelemetry;
use egorl::pipeline::{
    ablation_run, evaluate, load_dataset, read_jsonl_records, score_response, train_stage1, train_stage2,
    untrained_policy, write_jsonl_records, AnalysisModel, QueryItem, ResponseModel, RunConfig, SplitName,
};
use egorl::synth_env::{read_jsonl, write_splits};
use egorl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "egorl", version, about = "Two-stage interaction reasoning and grounding at desk scale")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Training seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset and write train/val/test.jsonl.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 600)]
        n: usize,
    },
    /// Stage 1: supervised training of the analysis model.
    TrainSft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage 2: reinforcement learning of the response policy.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        fusion: Option<FusionKind>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedy evaluation; without --stage2 the untrained policy is scored.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        split: Option<SplitName>,
    },
    /// Score logged responses against a dataset file.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run all finite-difference suites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Train and evaluate every fusion variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "none,concat,sum,mlp,cross_attention,afs")]
        variants: Vec<FusionKind>,
        #[arg(long, value_delimiter = ',', default_value = "42,123,3407")]
        seeds: Vec<u64>,
    },
    /// Render a telemetry reward curve as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        telemetry: PathBuf,
    },
}

fn load_config(common: &Common, data: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = data {
        cfg.data_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ScoreInput {
    id: String,
    scene_id: String,
    query_index: usize,
    raw_response: String,
}

#[derive(serde::Serialize)]
struct ScoreOutput {
    id: String,
    r_format: f64,
    r_answer: f64,
    r_ground: f64,
    total: f64,
}

fn score(cfg: &RunConfig, rollouts: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let samples = read_jsonl(data)?;
    let by_scene: BTreeMap<&str, _> = samples.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let inputs: Vec<ScoreInput> = read_jsonl_records(rollouts)?;
    let mut rows = Vec::with_capacity(inputs.len());
    for r in inputs {
        let s = by_scene
            .get(r.scene_id.as_str())
            .ok_or_else(|| Error::Validation(format!("{}: unknown scene {}", r.id, r.scene_id)))?;
        let q = s.queries.get(r.query_index).ok_or_else(|| {
            Error::Validation(format!("{}: scene {} has no query {}", r.id, r.scene_id, r.query_index))
        })?;
        let item = QueryItem {
            id: r.id.clone(),
            kind: q.kind,
            input: egorl::grpo::QueryInput {
                f_ana: vec![],
                f_emb: vec![],
            },
            gt_answer: q.gt_answer.clone(),
            gt_mask: q.gt_mask.clone(),
            canvas: s.scene.canvas,
            oracle: String::new(),
        };
        let b = score_response(&r.raw_response, &item, cfg.stage2.weights)?;
        rows.push(ScoreOutput {
            id: r.id,
            r_format: b.r_format,
            r_answer: b.r_answer,
            r_ground: b.r_ground,
            total: b.total,
        });
    }
    match out {
        Some(p) => write_jsonl_records(p, &rows),
        None => {
            for r in &rows {
                println!("{}", serde_json::to_string(r)?);
            }
            Ok(())
        }
    }
}

/// Reward curve with a trailing moving average, as a standalone SVG.
fn render_svg(t: &[StepTelemetry]) -> Result<String> {
    if t.is_empty() {
        return Err(Error::Validation("telemetry is empty".into()));
    }
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let ys: Vec<f64> = t.iter().map(|r| r.mean_reward).collect();
    let ymax = ys.iter().copied().fold(4.0f64, f64::max);
    let n = (t.len() - 1).max(1) as f64;
    let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * v / ymax;
    let line = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", px(i), py(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let k = 20;
    let smooth: Vec<f64> = (0..ys.len())
        .map(|i| {
            let lo = i.saturating_sub(k - 1);
            ys[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
        })
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad},{pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for tick in 0..=4 {
        let v = ymax * tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            pad - 4.0,
            py(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">step (0..{})</text>"#,
        w / 2.0,
        h - 8.0,
        t.len() - 1
    );
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#9ab" stroke-width="1"/>"##, line(&ys));
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c33" stroke-width="2"/>"##, line(&smooth));
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="12">mean reward per step</text>"#, pad);
    s.push_str("</svg>\n");
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { common, n } => {
            let dir = out_dir(&common, "data");
            let seed = common.seed.unwrap_or(42);
            let s = write_splits(&dir, seed, n)?;
            log::info!("wrote {} / {} / {} samples to {}", s.train.len(), s.val.len(), s.test.len(), dir.display());
        }
        Command::TrainSft { common, data } => {
            let cfg = load_config(&common, data.as_ref())?;
            let dir = out_dir(&common, "runs/stage1");
            let ds = load_dataset(&cfg)?;
            let out = train_stage1(&cfg, &ds)?;
            fs::create_dir_all(&dir)?;
            out.model.save(&dir.join("stage1.ckpt"))?;
            write_jsonl_records(&dir.join("stage1_telemetry.jsonl"), &out.telemetry)?;
        }
        Command::TrainRl {
            common,
            data,
            stage1,
            fusion,
            steps,
        } => {
            let mut cfg = load_config(&common, data.as_ref())?;
            if let Some(f) = fusion {
                cfg.stage2.fusion = f;
            }
            if let Some(s) = steps {
                cfg.stage2.steps = s;
            }
            if !stage1.exists() {
                return Err(Error::Validation(format!(
                    "stage-1 checkpoint {} not found; run train-sft first",
                    stage1.display()
                )));
            }
            let s1 = AnalysisModel::load(&stage1)?;
            let ds = load_dataset(&cfg)?;
            let dir = out_dir(&common, "runs/stage2");
            let out = train_stage2(&cfg, &s1, &ds, Some(&dir))?;
            out.model.save(&dir.join("stage2.ckpt"))?;
            write_jsonl_records(&dir.join("rollouts.jsonl"), &out.rollouts)?;
        }
        Command::Eval {
            common,
            data,
            stage1,
            stage2,
            split,
        } => {
            let mut cfg = load_config(&common, data.as_ref())?;
            if let Some(s) = split {
                cfg.eval_split = s;
            }
            let s1 = AnalysisModel::load(&stage1)?;
            let policy = match &stage2 {
                Some(p) => ResponseModel::load(p)?,
                None => untrained_policy(&cfg)?,
            };
            let ds = load_dataset(&cfg)?;
            let report = evaluate(&s1, &policy, cfg.eval_split.pick(&ds), cfg.stage2.weights)?;
            write_json(common.out.as_deref(), &serde_json::to_value(report)?)?;
        }
        Command::Score { common, rollouts, data } => {
            let cfg = load_config(&common, None)?;
            score(&cfg, &rollouts, &data, common.out.as_deref())?;
        }
        Command::Gradcheck { common, cases } => {
            let seed = common.seed.unwrap_or(0);
            let reports = gradcheck::run_all(seed, cases.max(1))?;
            for r in &reports {
                eprintln!(
                    "{:<18} cases {:>3}  max rel err {:.3e}  {}",
                    r.name,
                    r.cases,
                    r.max_rel_err,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            write_json(common.out.as_deref(), &serde_json::to_value(&reports)?)?;
            if let Some(bad) = reports.iter().find(|r| !r.passed) {
                return Err(Error::Numeric(format!(
                    "gradient check '{}' failed: {:.3e} >= {:.0e}",
                    bad.name, bad.max_rel_err, bad.tolerance
                )));
            }
        }
        Command::Ablate {
            common,
            data,
            variants,
            seeds,
        } => {
            let base = load_config(&common, data.as_ref())?;
            let ds = load_dataset(&base)?;
            let mut rows = Vec::new();
            let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
            for &seed in &seeds {
                let cfg = RunConfig { seed, ..base.clone() };
                let s1 = train_stage1(&cfg, &ds)?.model;
                for &v in &variants {
                    let r = ablation_run(&cfg, v, &s1, &ds)?;
                    log::info!("seed {seed} {v}: final reward {:.3}", r.final_mean_reward);
                    let e = sums.entry(v.to_string()).or_default();
                    e.0 += r.final_mean_reward;
                    e.1 += r.report.ciou_or_zero();
                    e.2 += 1;
                    rows.push(json!({
                        "seed": seed,
                        "fusion": v,
                        "final_mean_reward": r.final_mean_reward,
                        "ciou": r.report.grounding.ciou,
                        "answering_meteor": r.report.answering.meteor,
                    }));
                }
            }
            let summary: BTreeMap<String, serde_json::Value> = sums
                .into_iter()
                .map(|(k, (r, c, n))| {
                    (k, json!({"final_mean_reward": r / n as f64, "ciou": c / n as f64}))
                })
                .collect();
            write_json(common.out.as_deref(), &json!({"runs": rows, "mean_over_seeds": summary}))?;
        }
        Command::Plot { common, telemetry } => {
            let t: Vec<StepTelemetry> = read_jsonl_records(&telemetry)?;
            let svg = render_svg(&t)?;
            let path = common.out.unwrap_or_else(|| PathBuf::from("reward_curve.svg"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, svg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
