use crate::decoder::DetectionOutput;
use crate::error::Result;
use crate::geometry::{box_loss, BBox};

use super::hungarian::hungarian;
use super::loss::LossConfig;

/// A ground-truth object of one training image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub name: String,
    /// Normalized center-size box.
    pub bbox: BBox,
}

/// Query/ground-truth pairs for one condition. Queries not listed are
/// labeled not-matched.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(query, index into the image's ground truths)`, ordered by ground truth.
    pub pairs: Vec<(usize, usize)>,
}

/// `λ_cls·(−p_matched) + λ_box·box_term(l1, 1 − GIoU)` for one query and box.
pub fn matching_cost(pred: &DetectionOutput, query: usize, gt: &BBox, cfg: &LossConfig) -> Result<f64> {
    let bl = box_loss(&pred.boxes[query], gt)?;
    Ok(-cfg.lambda_cls * pred.p_matched(query) + cfg.lambda_box * cfg.box_mode.combine(bl.l1, bl.giou))
}

/// Bipartite matching restricted to the ground truths named `condition`.
pub fn conditional_match(
    pred: &DetectionOutput,
    gts: &[GroundTruth],
    condition: &str,
    cfg: &LossConfig,
) -> Result<MatchResult> {
    let kept: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].name == condition).collect();
    if kept.is_empty() {
        return Ok(MatchResult::default());
    }
    let cost = (0..pred.boxes.len())
        .map(|q| {
            kept.iter()
                .map(|&i| matching_cost(pred, q, &gts[i].bbox, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let a = hungarian(&cost)?;
    Ok(MatchResult {
        pairs: a.pairs.into_iter().map(|(q, g)| (q, kept[g])).collect(),
    })
}
