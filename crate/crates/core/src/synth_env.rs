//! Synthetic desk scenes: two hands, a few objects, one hand-object
//! interaction, and three queries per scene with box-shaped ground truth.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::geometry::{rasterize_boxes, BBox, Canvas, Mask, MaskRle};
use crate::numerics::{stream_id, RngStream, Tensor};
use crate::parser::render_response;
use crate::policy::{GERUNDS, NOUNS, VERBS};

pub const CANVAS: Canvas = Canvas {
    width: 64,
    height: 64,
};
pub const GRID: usize = 8;
pub const CHANNELS: usize = NOUNS.len() + VERBS.len();
pub const RAW_FEATURE_DIM: usize = CHANNELS * GRID * GRID;
pub const ANALYSIS_INSTRUCTION: &str =
    "Please analyze the interactions of hands and objects in detail";

const OBJECTS: [&str; 6] = ["mug", "bowl", "knife", "laptop", "drawer", "kettle"];
const MIN_SIDE: u32 = 4;
const MAX_TRIES: usize = 200;
const SCENE_TAG: u64 = 0x5ce9e;
const QUERY_TAG: u64 = 0x9e7;
const SPLIT_TAG: u64 = 0x5b117;

/// Zone center and size ranges `(cx, cy, w_lo, w_hi, h_lo, h_hi)` per object.
const ZONES: [(i64, i64, i64, i64, i64, i64); 6] = [
    (16, 18, 8, 12, 8, 12),
    (46, 16, 12, 16, 10, 14),
    (32, 30, 14, 20, 4, 6),
    (32, 12, 18, 24, 12, 16),
    (12, 34, 14, 18, 8, 12),
    (52, 34, 10, 14, 12, 16),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub hand: String,
    pub verb: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: Canvas,
    pub regions: Vec<Region>,
    pub interaction: Interaction,
}

impl Scene {
    pub fn region(&self, label: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.label == label)
    }

    pub fn objects(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(|r| !r.label.ends_with("_hand"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        for r in &self.regions {
            if !NOUNS.contains(&r.label.as_str()) {
                return bad(format!("unknown label '{}'", r.label));
            }
            r.bbox.validate(self.canvas)?;
        }
        for hand in ["left_hand", "right_hand"] {
            let n = self.regions.iter().filter(|r| r.label == hand).count();
            if n != 1 {
                return bad(format!("scene has {n} {hand} regions"));
            }
        }
        let n_obj = self.objects().count();
        if !(1..=3).contains(&n_obj) {
            return bad(format!("scene has {n_obj} objects"));
        }
        let mut labels: Vec<&str> = self.regions.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.regions.len() {
            return bad("duplicate region labels".into());
        }
        let i = &self.interaction;
        if !VERBS.contains(&i.verb.as_str()) {
            return bad(format!("unknown verb '{}'", i.verb));
        }
        if !i.hand.ends_with("_hand") || self.region(&i.hand).is_none() {
            return bad(format!("interaction hand '{}' missing", i.hand));
        }
        if i.object.ends_with("_hand") || self.region(&i.object).is_none() {
            return bad(format!("interaction object '{}' missing", i.object));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    NoTarget,
    SingleTarget,
    MultiTarget,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::NoTarget, QueryKind::SingleTarget, QueryKind::MultiTarget];

    pub fn name(&self) -> &'static str {
        match self {
            QueryKind::NoTarget => "no_target",
            QueryKind::SingleTarget => "single_target",
            QueryKind::MultiTarget => "multi_target",
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

mod mask_as_rle {
    use super::*;

    pub fn serialize<S: serde::Serializer>(m: &Mask, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.to_rle().serialize(s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Mask, D::Error> {
        let rle = MaskRle::deserialize(d)?;
        Mask::from_rle(&rle).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub kind: QueryKind,
    pub query_text: String,
    pub gt_answer: String,
    pub gt_entities: Vec<String>,
    #[serde(rename = "gt_mask_rle", with = "mask_as_rle")]
    pub gt_mask: Mask,
}

impl QueryCase {
    /// Boxes of the ground-truth entities, in order.
    pub fn gt_boxes(&self, scene: &Scene) -> Result<Vec<BBox>> {
        self.gt_entities
            .iter()
            .map(|e| {
                scene
                    .region(e)
                    .map(|r| r.bbox)
                    .ok_or_else(|| Error::Validation(format!("entity '{e}' not in scene")))
            })
            .collect()
    }

    /// The ground truth rendered in the response grammar.
    pub fn oracle_response(&self, scene: &Scene) -> Result<String> {
        Ok(render_response(&self.gt_answer, &self.gt_boxes(scene)?))
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if self.kind == QueryKind::NoTarget
            && (!self.gt_entities.is_empty() || !self.gt_mask.is_empty() || self.gt_answer != "none")
        {
            return Err(Error::Validation(format!(
                "no-target query '{}' has a target",
                self.query_text
            )));
        }
        let expect = rasterize_boxes(&self.gt_boxes(scene)?, scene.canvas)?;
        if expect != self.gt_mask {
            return Err(Error::Validation(format!(
                "mask of '{}' does not match its entities",
                self.query_text
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub scene_id: String,
    pub scene: Scene,
    pub analysis_text: String,
    pub queries: Vec<QueryCase>,
}

impl AnnotatedSample {
    pub fn analysis_prompt(&self) -> String {
        serialize_prompt(&self.scene_id, PromptTask::Analysis, ANALYSIS_INSTRUCTION)
    }

    pub fn query_prompt(&self, i: usize) -> String {
        serialize_prompt(&self.scene_id, PromptTask::Query, &self.queries[i].query_text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.analysis_text != analysis_text(&self.scene.interaction) {
            return Err(Error::Validation(format!(
                "{}: analysis text does not describe the interaction",
                self.scene_id
            )));
        }
        for q in &self.queries {
            q.validate(&self.scene)?;
        }
        Ok(())
    }
}

fn gerund(verb: &str) -> &'static str {
    let i = VERBS.iter().position(|v| *v == verb).expect("known verb");
    GERUNDS[i]
}

fn hand_word(hand: &str) -> &str {
    hand.trim_end_matches("_hand")
}

pub fn analysis_text(i: &Interaction) -> String {
    format!(
        "The {} hand is {} the {}.",
        hand_word(&i.hand),
        gerund(&i.verb),
        i.object
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTask {
    Analysis,
    Query,
}

pub fn serialize_prompt(scene_id: &str, task: PromptTask, text: &str) -> String {
    let tag = match task {
        PromptTask::Analysis => "analysis",
        PromptTask::Query => "query",
    };
    format!("[INST] <Img>{scene_id}</Img> [{tag}] {text} [/INST]")
}

fn clamp_box(sx: i64, sy: i64, ex: i64, ey: i64, c: Canvas) -> Option<BBox> {
    let sx = sx.clamp(0, c.width as i64) as u32;
    let ex = ex.clamp(0, c.width as i64) as u32;
    let sy = sy.clamp(0, c.height as i64) as u32;
    let ey = ey.clamp(0, c.height as i64) as u32;
    (ex >= sx + MIN_SIDE && ey >= sy + MIN_SIDE).then_some(BBox { sx, sy, ex, ey })
}

fn hand_box(rng: &mut RngStream, right: bool) -> Option<BBox> {
    let w = rng.range_inclusive(14, 16);
    let h = rng.range_inclusive(11, 13);
    let margin = rng.range_inclusive(4, 7);
    let sy = rng.range_inclusive(44, 47);
    let sx = if right { CANVAS.width as i64 - margin - w } else { margin };
    clamp_box(sx, sy, sx + w, sy + h, CANVAS)
}

fn object_box(rng: &mut RngStream, label: &str, anchor: Option<(i64, i64)>) -> Option<BBox> {
    let zi = OBJECTS.iter().position(|o| *o == label)?;
    let (zx, zy, wl, wh, hl, hh) = ZONES[zi];
    let w = rng.range_inclusive(wl, wh);
    let h = rng.range_inclusive(hl, hh);
    let (cx, cy) = match anchor {
        Some((ax, ay)) => (ax + rng.range_inclusive(-1, 1), ay + rng.range_inclusive(-1, 1)),
        None => (zx + rng.range_inclusive(-2, 2), zy + rng.range_inclusive(-2, 2)),
    };
    clamp_box(cx - w / 2, cy - h / 2, cx - w / 2 + w, cy - h / 2 + h, CANVAS)
}

/// Samples one valid scene; the interacted object overlaps its hand.
pub fn generate_scene(rng: &mut RngStream) -> Result<Scene> {
    for _ in 0..MAX_TRIES {
        let (Some(left), Some(right)) = (hand_box(rng, false), hand_box(rng, true)) else {
            continue;
        };
        let mut objects = OBJECTS.to_vec();
        rng.shuffle(&mut objects);
        let n_obj = 1 + rng.index(3);
        let right_acts = rng.index(2) == 1;
        let verb = VERBS[rng.index(VERBS.len())];
        let hand = if right_acts { right } else { left };
        // grip point: the hand's upper inner corner
        let anchor = if right_acts {
            (hand.sx as i64 + 1, hand.sy as i64)
        } else {
            (hand.ex as i64 - 1, hand.sy as i64)
        };
        let mut regions = vec![
            Region {
                label: "left_hand".into(),
                bbox: left,
            },
            Region {
                label: "right_hand".into(),
                bbox: right,
            },
        ];
        let mut ok = true;
        for (k, label) in objects[..n_obj].iter().enumerate() {
            match object_box(rng, label, (k == 0).then_some(anchor)) {
                Some(bbox) => regions.push(Region {
                    label: label.to_string(),
                    bbox,
                }),
                None => ok = false,
            }
        }
        if !ok || regions[2].bbox.intersection(&hand).is_none() {
            continue;
        }
        let scene = Scene {
            canvas: CANVAS,
            regions,
            interaction: Interaction {
                hand: if right_acts { "right_hand" } else { "left_hand" }.into(),
                verb: verb.into(),
                object: objects[0].into(),
            },
        };
        scene.validate()?;
        return Ok(scene);
    }
    Err(Error::Generation(format!("no valid scene after {MAX_TRIES} attempts")))
}

fn case(scene: &Scene, kind: QueryKind, text: String, answer: String, entities: Vec<String>) -> Result<QueryCase> {
    let mut q = QueryCase {
        kind,
        query_text: text,
        gt_answer: answer,
        gt_entities: entities,
        gt_mask: Mask::empty(scene.canvas),
    };
    q.gt_mask = rasterize_boxes(&q.gt_boxes(scene)?, scene.canvas)?;
    Ok(q)
}

/// One no-target, one single-target and one multi-target query.
pub fn generate_queries(scene: &Scene, rng: &mut RngStream) -> Result<Vec<QueryCase>> {
    scene.validate()?;
    let absent: Vec<&str> = OBJECTS
        .iter()
        .copied()
        .filter(|o| scene.region(o).is_none())
        .collect();
    let missing = absent[rng.index(absent.len())];
    let no_target = case(
        scene,
        QueryKind::NoTarget,
        format!("Is there a {missing}?"),
        "none".into(),
        vec![],
    )?;

    let single = if rng.index(2) == 0 {
        let r = &scene.regions[rng.index(scene.regions.len())];
        case(
            scene,
            QueryKind::SingleTarget,
            format!("Segment the {}.", r.label),
            r.label.clone(),
            vec![r.label.clone()],
        )?
    } else {
        let i = &scene.interaction;
        case(
            scene,
            QueryKind::SingleTarget,
            format!("Which object is the {} hand {}?", hand_word(&i.hand), gerund(&i.verb)),
            i.object.clone(),
            vec![i.object.clone()],
        )?
    };

    let hand = if rng.index(2) == 0 { "left_hand" } else { "right_hand" };
    let objs: Vec<&Region> = scene.objects().collect();
    let obj = &objs[rng.index(objs.len())].label;
    let multi = case(
        scene,
        QueryKind::MultiTarget,
        format!("Segment the {} hand and the {obj}.", hand_word(hand)),
        format!("{hand} and {obj}"),
        vec![hand.to_string(), obj.clone()],
    )?;
    Ok(vec![no_target, single, multi])
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Sample `index` of the dataset generated from `seed`; pure in both.
pub fn generate_sample(seed: u64, index: usize) -> Result<AnnotatedSample> {
    let mut rng = RngStream::new(seed, stream_id(SCENE_TAG, &[index as u64]));
    let scene = generate_scene(&mut rng)?;
    let mut qrng = RngStream::new(seed, stream_id(QUERY_TAG, &[index as u64]));
    let queries = generate_queries(&scene, &mut qrng)?;
    Ok(AnnotatedSample {
        scene_id: scene_id(index),
        analysis_text: analysis_text(&scene.interaction),
        scene,
        queries,
    })
}

pub fn generate_dataset(seed: u64, n: usize) -> Result<Vec<AnnotatedSample>> {
    (0..n).into_par_iter().map(|i| generate_sample(seed, i)).collect()
}

/// Per-label occupancy fractions on an 8×8 grid, then one channel per verb
/// covering the hand-object contact region.
pub fn occupancy_grid(scene: &Scene) -> Vec<f64> {
    let cw = scene.canvas.width as f64 / GRID as f64;
    let ch = scene.canvas.height as f64 / GRID as f64;
    let mut out = vec![0.0; RAW_FEATURE_DIM];
    let mut paint = |channel: usize, b: &BBox| {
        let base = channel * GRID * GRID;
        for gy in 0..GRID {
            let (y0, y1) = (gy as f64 * ch, (gy + 1) as f64 * ch);
            let oy = (b.ey as f64).min(y1) - (b.sy as f64).max(y0);
            if oy <= 0.0 {
                continue;
            }
            for gx in 0..GRID {
                let (x0, x1) = (gx as f64 * cw, (gx + 1) as f64 * cw);
                let ox = (b.ex as f64).min(x1) - (b.sx as f64).max(x0);
                if ox > 0.0 {
                    out[base + gy * GRID + gx] += ox * oy / (cw * ch);
                }
            }
        }
    };
    for r in &scene.regions {
        if let Some(c) = NOUNS.iter().position(|n| *n == r.label) {
            paint(c, &r.bbox);
        }
    }
    let i = &scene.interaction;
    if let (Some(h), Some(o), Some(v)) = (
        scene.region(&i.hand),
        scene.region(&i.object),
        VERBS.iter().position(|v| *v == i.verb),
    ) {
        if let Some(contact) = h.bbox.intersection(&o.bbox) {
            paint(NOUNS.len() + v, &contact);
        }
    }
    out
}

/// Frozen visual features of a scene.
pub fn scene_features(scene: &Scene, enc: &FrozenEncoders) -> Result<Tensor> {
    Ok(Tensor::from_vec(enc.project_scene(&occupancy_grid(scene))?))
}

pub fn write_jsonl(path: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotatedSample>> {
    let f = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: AnnotatedSample = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffled 5:2:3 partition of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> Splits<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    RngStream::new(seed, SPLIT_TAG).shuffle(&mut ids);
    let n_train = n * 5 / 10;
    let n_val = n * 2 / 10;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Splits {
        train: ids,
        val,
        test,
    }
}

pub fn split_dataset(samples: Vec<AnnotatedSample>, seed: u64) -> Splits<AnnotatedSample> {
    let idx = split_indices(samples.len(), seed);
    let mut slots: Vec<Option<AnnotatedSample>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<AnnotatedSample> {
        ids.iter().map(|&i| slots[i].take().expect("indices are a partition")).collect()
    };
    Splits {
        train: take(&idx.train),
        val: take(&idx.val),
        test: take(&idx.test),
    }
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

/// Generates `n` samples and writes `train/val/test.jsonl` into `dir`.
pub fn write_splits(dir: &Path, seed: u64, n: usize) -> Result<Splits<AnnotatedSample>> {
    if n < 10 {
        return Err(Error::Validation(format!("need at least 10 samples for a 5:2:3 split, got {n}")));
    }
    std::fs::create_dir_all(dir)?;
    let splits = split_dataset(generate_dataset(seed, n)?, seed);
    for (name, part) in SPLIT_FILES.iter().zip([&splits.train, &splits.val, &splits.test]) {
        write_jsonl(&dir.join(name), part)?;
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::parser::parse_response;
    use crate::rewards::{total_reward, RewardWeights};

    #[test]
    fn scene_determinism_and_invariants() {
        let a = generate_scene(&mut RngStream::new(42, 1)).unwrap();
        let b = generate_scene(&mut RngStream::new(42, 1)).unwrap();
        assert_eq!(a, b);
        for i in 0..1000 {
            let s = generate_scene(&mut RngStream::new(7, i)).unwrap();
            s.validate().unwrap();
            assert!((3..=5).contains(&s.regions.len()));
            for r in &s.regions {
                assert!(r.bbox.width() >= 4 && r.bbox.height() >= 4);
            }
            let h = s.region(&s.interaction.hand).unwrap().bbox;
            let o = s.region(&s.interaction.object).unwrap().bbox;
            assert!(h.intersection(&o).is_some());
        }
    }

    #[test]
    fn query_kinds_and_masks() {
        for i in 0..200 {
            let s = generate_sample(3, i).unwrap();
            s.validate().unwrap();
            let kinds: Vec<QueryKind> = s.queries.iter().map(|q| q.kind).collect();
            assert_eq!(kinds, QueryKind::ALL.to_vec());
            let nt = &s.queries[0];
            assert_eq!(nt.gt_answer, "none");
            assert!(nt.gt_mask.is_empty());
            let mt = &s.queries[2];
            // union of the two boxes by inclusion-exclusion
            let b0 = s.scene.region(&mt.gt_entities[0]).unwrap().bbox;
            let b1 = s.scene.region(&mt.gt_entities[1]).unwrap().bbox;
            let inter = b0.intersection(&b1).map_or(0, |b| b.area());
            assert_eq!(mt.gt_mask.count(), b0.area() + b1.area() - inter);
        }
    }

    #[test]
    fn segment_query_masks_its_box() {
        let s = (0..100)
            .map(|i| generate_sample(11, i).unwrap())
            .find(|s| s.queries[1].query_text == "Segment the left_hand.")
            .expect("template appears within 100 scenes");
        let b = s.scene.region("left_hand").unwrap().bbox;
        assert_eq!(s.queries[1].gt_mask, rasterize_boxes(&[b], CANVAS).unwrap());
    }

    #[test]
    fn analysis_text_template() {
        let i = Interaction {
            hand: "right_hand".into(),
            verb: "cut".into(),
            object: "knife".into(),
        };
        assert_eq!(analysis_text(&i), "The right hand is cutting the knife.");
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            serialize_prompt("scene_0007", PromptTask::Analysis, ANALYSIS_INSTRUCTION),
            "[INST] <Img>scene_0007</Img> [analysis] Please analyze the interactions of hands and objects in detail [/INST]"
        );
        assert_eq!(
            serialize_prompt("scene_0001", PromptTask::Query, "Is there a mug?"),
            "[INST] <Img>scene_0001</Img> [query] Is there a mug? [/INST]"
        );
    }

    #[test]
    fn oracle_response_scores_four() {
        let w = RewardWeights::default();
        for i in 0..100 {
            let s = generate_sample(5, i).unwrap();
            for q in &s.queries {
                let raw = q.oracle_response(&s.scene).unwrap();
                let r = total_reward(&parse_response(&raw, CANVAS), &q.gt_answer, &q.gt_mask, w).unwrap();
                assert_eq!(r.total, 4.0, "{raw}");
            }
        }
    }

    #[test]
    fn features_isolate_object_channels() {
        let enc = FrozenEncoders::new(EncoderConfig::default()).unwrap();
        let s = generate_sample(9, 0).unwrap().scene;
        assert_eq!(scene_features(&s, &enc).unwrap(), scene_features(&s.clone(), &enc).unwrap());
        assert_eq!(scene_features(&s, &enc).unwrap().len(), enc.config().scene_dim);

        let mut stripped = s.clone();
        stripped.regions.retain(|r| r.label.ends_with("_hand"));
        let a = occupancy_grid(&s);
        let b = occupancy_grid(&stripped);
        let hand_channels = [0, 1];
        for c in 0..CHANNELS {
            let same = a[c * 64..(c + 1) * 64] == b[c * 64..(c + 1) * 64];
            if hand_channels.contains(&c) {
                assert!(same, "hand channel {c} changed");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn occupancy_matches_box_area() {
        let s = generate_sample(2, 4).unwrap().scene;
        let g = occupancy_grid(&s);
        for r in &s.regions {
            let c = NOUNS.iter().position(|n| *n == r.label).unwrap();
            let mass: f64 = g[c * 64..(c + 1) * 64].iter().sum::<f64>() * 64.0;
            assert!((mass - r.bbox.area() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn splits_are_disjoint_and_stable() {
        let a = split_indices(600, 42);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (300, 120, 180));
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
        assert_eq!(a, split_indices(600, 42));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(1, 12).unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &data).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), data);
        assert_eq!(data[3].query_prompt(0), read_jsonl(&p).unwrap()[3].query_prompt(0));
        assert!(read_jsonl(&dir.path().join("missing.jsonl")).is_err());
    }
}
