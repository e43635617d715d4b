//! The three reward terms and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_iou, rasterize_boxes, BBox, Canvas, Mask};
use crate::parser::{FormatClass, ParsedResponse};
use crate::text_metrics::{exact_match, levenshtein_ratio};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_f: f64,
    pub lambda_a: f64,
    pub lambda_g: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_f: 1.0,
            lambda_a: 1.0,
            lambda_g: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn new(lambda_f: f64, lambda_a: f64, lambda_g: f64) -> Result<Self> {
        let w = Self {
            lambda_f,
            lambda_a,
            lambda_g,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_f, self.lambda_a, self.lambda_g];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("reward weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one reward weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-rollout reward terms together with the weights that produced `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_answer: f64,
    pub r_ground: f64,
    pub total: f64,
    pub weights: RewardWeights,
}

/// 1 for a valid structure, 0.5 when only one block parsed, 0 otherwise.
pub fn format_reward(p: &ParsedResponse) -> f64 {
    match p.format_class {
        FormatClass::Valid => 1.0,
        FormatClass::Partial => 0.5,
        FormatClass::Invalid => 0.0,
    }
}

/// Exact match plus Levenshtein ratio, in `[0, 2]`.
pub fn answer_reward(pred: &str, gt: &str) -> Result<f64> {
    if gt.trim().is_empty() {
        return Err(Error::Validation("ground-truth answer is empty".into()));
    }
    Ok(exact_match(pred, gt) + levenshtein_ratio(pred, gt))
}

/// IoU between the rasterized predicted boxes and the ground-truth mask.
pub fn grounding_reward(pred_boxes: &[BBox], gt: &Mask, canvas: Canvas) -> Result<f64> {
    let pred = rasterize_boxes(pred_boxes, canvas)?;
    mask_iou(&pred, gt)
}

/// Weighted sum of the three terms. Terms are computed on whatever fields
/// parsed, so an invalid response still earns answer and grounding credit
/// for empty fields.
pub fn total_reward(
    p: &ParsedResponse,
    gt_answer: &str,
    gt_mask: &Mask,
    w: RewardWeights,
) -> Result<RewardBreakdown> {
    let r_format = format_reward(p);
    let r_answer = answer_reward(&p.answer_text, gt_answer)?;
    let r_ground = grounding_reward(&p.boxes, gt_mask, gt_mask.canvas())?;
    Ok(RewardBreakdown {
        r_format,
        r_answer,
        r_ground,
        total: w.lambda_f * r_format + w.lambda_a * r_answer + w.lambda_g * r_ground,
        weights: w,
    })
}
