//! Default stage-1 run on the seed-42 toy dataset, plus the untrained
//! response baseline.

use egorl::pipeline::{evaluate, load_dataset, train_stage1, untrained_policy, RunConfig};
use egorl::synth_env::scene_features;

#[test]
fn default_stage1_run() {
    let cfg = RunConfig::default();
    let data = load_dataset(&cfg).unwrap();
    let out = train_stage1(&cfg, &data).unwrap();

    let losses: Vec<f64> = out.telemetry.iter().map(|e| e.mean_loss).collect();
    assert_eq!(losses.len(), cfg.stage1.epochs);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "epoch loss rose: {losses:?}");
    }

    // Position-wise agreement between greedy descriptions and references on
    // held-out scenes.
    let m = &out.model;
    let vocab = &m.meta.vocab;
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &data.test {
        let feat = scene_features(&s.scene, m.encoders()).unwrap();
        let (text, _) = m.describe(feat.data()).unwrap();
        let got = vocab.tokenize(&text).unwrap();
        let want = vocab.tokenize(&s.analysis_text).unwrap();
        hit += want.iter().zip(&got).filter(|(a, b)| a == b).count();
        total += want.len();
    }
    let frac = hit as f64 / total as f64;
    assert!(frac >= 0.9, "template token agreement {frac:.3}");

    let again = train_stage1(&cfg, &data).unwrap();
    assert_eq!(m.to_bytes().unwrap(), again.model.to_bytes().unwrap());

    let base = untrained_policy(&cfg).unwrap();
    let report = evaluate(m, &base, &data.test, cfg.stage2.weights).unwrap();
    assert!(report.ciou_or_zero() < 0.05, "untrained cIoU {:?}", report.grounding.ciou);
    assert!(report.mean_format_reward < 0.05, "untrained format {}", report.mean_format_reward);
    assert_eq!(report, evaluate(m, &base, &data.test, cfg.stage2.weights).unwrap());
}
