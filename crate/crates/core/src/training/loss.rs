use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::decoder::{HeadOutput, MATCHED, NOT_MATCHED};
use crate::error::{Error, Result};
use crate::geometry::{box_losses_on_graph, BBox, BoxLossMode};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub lambda_lm: f64,
    pub lambda_noun: f64,
    pub box_mode: BoxLossMode,
    /// Cross-entropy weight of queries labeled not-matched.
    pub not_matched_weight: f64,
    /// Cloze sequences also predict the next word at unmasked positions.
    pub whole_caption: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_box: 5.0,
            lambda_lm: 1.0,
            lambda_noun: 1.0,
            box_mode: BoxLossMode::Sum,
            not_matched_weight: 0.1,
            whole_caption: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_box", self.lambda_box),
            ("lambda_lm", self.lambda_lm),
            ("lambda_noun", self.lambda_noun),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss.{f}"), "must be finite and non-negative"));
            }
        }
        if !(self.not_matched_weight.is_finite() && self.not_matched_weight > 0.0) {
            return Err(Error::config("loss.not_matched_weight", "must be positive"));
        }
        Ok(())
    }
}

/// Decoder outputs for one condition with their assigned target boxes.
#[derive(Debug, Clone)]
pub struct DetectionTarget {
    pub head: HeadOutput,
    /// `(query, target box)` for every assigned pair.
    pub pairs: Vec<(usize, BBox)>,
}

/// Language-model outputs of one sequence with its supervision.
#[derive(Debug, Clone)]
pub struct SequenceTarget {
    pub logits: Var,
    pub noun_logits: Var,
    pub lm_targets: Vec<(usize, TokenId)>,
    pub noun_labels: Vec<f64>,
}

/// Scalar loss nodes on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub box_l1: Var,
    pub box_giou: Var,
    pub lm: Var,
    pub noun: Var,
    pub total: Var,
    pub assigned: usize,
    pub lm_positions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub lm: f64,
    pub noun: f64,
    pub total: f64,
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub lambda_lm: f64,
    pub lambda_noun: f64,
    pub box_mode: BoxLossMode,
    /// Number of assigned query/box pairs.
    pub assigned: usize,
    /// Number of supervised token positions; zero leaves `lm` at 0.
    pub lm_positions: usize,
}

impl LossBreakdown {
    /// The weighted sum recomputed from the individual terms.
    pub fn weighted_total(&self) -> f64 {
        self.lambda_cls * self.cls
            + self.lambda_box * self.box_mode.combine(self.box_l1, self.box_giou)
            + self.lambda_lm * self.lm
            + self.lambda_noun * self.noun
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.box_l1, self.box_giou, self.lm, self.noun, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, cfg: &LossConfig) -> LossBreakdown {
        let s = |v: Var| g.value(v).values()[0];
        LossBreakdown {
            cls: s(self.cls),
            box_l1: s(self.box_l1),
            box_giou: s(self.box_giou),
            lm: s(self.lm),
            noun: s(self.noun),
            total: s(self.total),
            lambda_cls: cfg.lambda_cls,
            lambda_box: cfg.lambda_box,
            lambda_lm: cfg.lambda_lm,
            lambda_noun: cfg.lambda_noun,
            box_mode: cfg.box_mode,
            assigned: self.assigned,
            lm_positions: self.lm_positions,
        }
    }
}

fn sum_all(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = parts.split_first() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    rest.iter().try_fold(first, |acc, &p| g.add(acc, p))
}

/// Assembles the weighted training loss.
///
/// * `cls`: per condition, the weighted mean two-class cross-entropy over all
///   queries (assigned ones labeled matched), averaged over conditions.
/// * `box_l1`, `box_giou`: means over all assigned pairs.
/// * `lm`: mean token cross-entropy over all supervised positions.
/// * `noun`: mean binary cross-entropy over all token positions.
///
/// Empty sets contribute 0.
pub fn compute_loss(
    g: &mut Graph,
    dets: &[DetectionTarget],
    seqs: &[SequenceTarget],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let mut cls_parts = Vec::with_capacity(dets.len());
    for d in dets {
        let n = g.shape(d.head.cls_logits)[0];
        let mut targets = vec![NOT_MATCHED; n];
        for &(q, _) in &d.pairs {
            targets[q] = MATCHED;
        }
        let raw: Vec<f64> = targets
            .iter()
            .map(|&t| if t == MATCHED { 1.0 } else { cfg.not_matched_weight })
            .collect();
        let norm = raw.iter().sum::<f64>() * dets.len() as f64;
        let w: Vec<f64> = raw.iter().map(|r| r / norm).collect();
        cls_parts.push(g.cross_entropy(d.head.cls_logits, &targets, &w)?);
    }
    let cls = sum_all(g, &cls_parts)?;

    let assigned: usize = dets.iter().map(|d| d.pairs.len()).sum();
    let (box_l1, box_giou) = if assigned == 0 {
        let z = g.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let mut preds = Vec::new();
        let mut tgt = Vec::with_capacity(assigned * 4);
        for d in dets.iter().filter(|d| !d.pairs.is_empty()) {
            let rows: Vec<usize> = d.pairs.iter().map(|p| p.0).collect();
            preds.push(g.gather_rows(d.head.boxes, &rows)?);
            for (_, b) in &d.pairs {
                tgt.extend_from_slice(&b.to_center_size());
            }
        }
        let pred = if preds.len() == 1 { preds[0] } else { g.concat_rows(&preds)? };
        let target = g.constant(Tensor::new(&[assigned, 4], tgt)?);
        let (l1, gl) = box_losses_on_graph(g, pred, target)?;
        (g.mean(l1), g.mean(gl))
    };

    let lm_positions: usize = seqs.iter().map(|s| s.lm_targets.len()).sum();
    let mut lm_parts = Vec::new();
    for s in seqs.iter().filter(|s| !s.lm_targets.is_empty()) {
        let rows: Vec<usize> = s.lm_targets.iter().map(|t| t.0).collect();
        let targets: Vec<usize> = s.lm_targets.iter().map(|t| t.1).collect();
        let logits = g.gather_rows(s.logits, &rows)?;
        let w = vec![1.0 / lm_positions as f64; rows.len()];
        lm_parts.push(g.cross_entropy(logits, &targets, &w)?);
    }
    let lm = sum_all(g, &lm_parts)?;

    let noun_count: usize = seqs.iter().map(|s| s.noun_labels.len()).sum();
    let mut noun_parts = Vec::new();
    for s in seqs.iter().filter(|s| !s.noun_labels.is_empty()) {
        let w = vec![1.0 / noun_count as f64; s.noun_labels.len()];
        noun_parts.push(g.bce_with_logits(s.noun_logits, &s.noun_labels, &w)?);
    }
    let noun = sum_all(g, &noun_parts)?;

    let box_term = match cfg.box_mode {
        BoxLossMode::L1 => box_l1,
        BoxLossMode::Giou => box_giou,
        BoxLossMode::Sum => g.add(box_l1, box_giou)?,
    };
    let parts = [
        g.scale(cls, cfg.lambda_cls),
        g.scale(box_term, cfg.lambda_box),
        g.scale(lm, cfg.lambda_lm),
        g.scale(noun, cfg.lambda_noun),
    ];
    let total = sum_all(g, &parts)?;
    Ok(LossTerms {
        cls,
        box_l1,
        box_giou,
        lm,
        noun,
        total,
        assigned,
        lm_positions,
    })
}
