//! Cloze accuracy and name-aware average precision.
//!
//! A prediction is a true positive when its box overlaps an unmatched ground
//! truth of the same image and mask index by at least the IoU threshold, and
//! the ground-truth name equals the top-1 name (`k = 1`) or lies among the
//! top-k names. Predictions from all names are pooled into one AP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_cloze, CodeSample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::Model;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `p_matched × p(top-1 name)`.
    #[default]
    Product,
    MatchedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Candidate names kept per mask; the relaxed metrics use `k = 5`.
    pub k: usize,
    pub score_floor: f64,
    pub score_mode: ScoreMode,
    /// JSON object mapping alternative names to canonical ones.
    pub synonyms: Option<String>,
    /// Include per-image counts in the report.
    pub per_image: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            score_floor: 0.05,
            score_mode: ScoreMode::Product,
            synonyms: None,
            per_image: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 5 {
            return Err(Error::config("eval.k", "must be at least 5"));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::config("eval.score_floor", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Lowercasing, whitespace trimming/collapsing and an optional synonym table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NameNormalizer {
    synonyms: BTreeMap<String, String>,
}

fn basic(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl NameNormalizer {
    /// Builds a normalizer; chains are resolved so that every alias maps
    /// straight to a name that is not itself an alias. Cycles are rejected.
    pub fn new(table: &BTreeMap<String, String>) -> Result<Self> {
        let raw: BTreeMap<String, String> = table
            .iter()
            .map(|(k, v)| (basic(k), basic(v)))
            .filter(|(k, v)| k != v)
            .collect();
        let mut synonyms = BTreeMap::new();
        for k in raw.keys() {
            let mut cur = k;
            let mut hops = 0;
            while let Some(next) = raw.get(cur) {
                cur = next;
                hops += 1;
                if hops > raw.len() {
                    return Err(Error::config("eval.synonyms", format!("cycle through {k:?}")));
                }
            }
            synonyms.insert(k.clone(), cur.clone());
        }
        Ok(Self { synonyms })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        Self::new(&table)
    }

    pub fn normalize(&self, name: &str) -> String {
        let b = basic(name);
        self.synonyms.get(&b).cloned().unwrap_or(b)
    }
}

/// Ranked names for one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NamePrediction {
    pub image_id: u64,
    pub mask_index: usize,
    /// Names by descending probability.
    pub candidates: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub percent: f64,
    /// Masks without a prediction entry (counted as wrong).
    pub missing: usize,
}

/// Percentage of `(image, mask, name)` ground truths whose name appears in
/// the first `k` candidates of the matching prediction.
pub fn accuracy_at_k(
    preds: &[NamePrediction],
    gts: &[(u64, usize, String)],
    k: usize,
    norm: &NameNormalizer,
) -> Accuracy {
    if gts.is_empty() {
        return Accuracy {
            percent: 0.0,
            missing: 0,
        };
    }
    let by_mask: BTreeMap<(u64, usize), &NamePrediction> =
        preds.iter().map(|p| ((p.image_id, p.mask_index), p)).collect();
    let mut correct = 0;
    let mut missing = 0;
    for (img, m, name) in gts {
        match by_mask.get(&(*img, *m)) {
            Some(p) => {
                let want = norm.normalize(name);
                if p.candidates.iter().take(k).any(|(c, _)| norm.normalize(c) == want) {
                    correct += 1;
                }
            }
            None => missing += 1,
        }
    }
    Accuracy {
        percent: 100.0 * correct as f64 / gts.len() as f64,
        missing,
    }
}

/// One scored box of a mask, carrying that mask's ranked (normalized) names.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image_id: u64,
    pub mask_index: usize,
    pub score: f64,
    pub bbox: BBox,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image_id: u64,
    pub mask_index: usize,
    pub name: String,
    pub bbox: BBox,
}

/// Indices of `preds` by descending score; earlier entries win ties.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

/// TP/FP label of each prediction, in input order. Greedy in descending
/// score: each prediction takes the highest-IoU eligible unmatched ground
/// truth (lowest index on ties).
pub fn classify_matches(preds: &[ScoredBox], gts: &[GtBox], iou_threshold: f64, k: usize) -> Vec<bool> {
    let mut by_mask: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_mask.entry((g.image_id, g.mask_index)).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![false; preds.len()];
    for p in score_order(preds.iter().map(|p| p.score)) {
        let pred = &preds[p];
        let names = &pred.names[..pred.names.len().min(k)];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_mask.get(&(pred.image_id, pred.mask_index)).into_iter().flatten() {
            if taken[gi] || !names.contains(&gts[gi].name) {
                continue;
            }
            let o = iou(&pred.bbox, &gts[gi].bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            labels[p] = true;
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// Set when there were no ground truths; `ap` is then 0.
    pub no_gts: bool,
}

/// 101-point interpolated average precision.
pub fn average_precision(labels: &[bool], scores: &[f64], total_gts: usize) -> ApResult {
    if total_gts == 0 {
        return ApResult { ap: 0.0, no_gts: true };
    }
    let order = score_order(scores.iter().copied());
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (n, &i) in order.iter().enumerate() {
        tp += usize::from(labels[i]);
        recall.push(tp as f64 / total_gts as f64);
        precision.push(tp as f64 / (n + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            let at = recall.partition_point(|&x| x < r);
            precision.get(at).copied().unwrap_or(0.0)
        })
        .sum();
    ApResult {
        ap: sum / 101.0,
        no_gts: false,
    }
}

/// AP at every threshold and their mean.
pub fn ap_over_thresholds(preds: &[ScoredBox], gts: &[GtBox], k: usize) -> (f64, Vec<(f64, f64)>) {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let per: Vec<(f64, f64)> = iou_thresholds()
        .into_iter()
        .map(|t| (t, average_precision(&classify_matches(preds, gts, t, k), &scores, gts.len()).ap))
        .collect();
    let mean = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    (mean, per)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: u64,
    pub masks: usize,
    pub top1_correct: usize,
    /// True positives at IoU 0.5 with the top-1 name.
    pub tp_at_50: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc1: f64,
    pub acc5: f64,
    pub ap1: f64,
    pub ap5: f64,
    pub ap1_per_threshold: Vec<(f64, f64)>,
    pub ap5_per_threshold: Vec<(f64, f64)>,
    pub images: usize,
    pub masks: usize,
    pub gts: usize,
    pub predictions: usize,
    pub missing_predictions: usize,
    pub no_gts: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_image: Vec<ImageReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text table: the headline columns, then per-threshold AP.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", "Acc@1", "Acc@5", "AP@1", "AP@5");
        let _ = writeln!(
            s,
            "{:>8.1} {:>8.1} {:>8.3} {:>8.3}",
            self.acc1, self.acc5, self.ap1, self.ap5
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>6} {:>8} {:>8}", "IoU", "AP@1", "AP@5");
        for ((t, a1), (_, a5)) in self.ap1_per_threshold.iter().zip(&self.ap5_per_threshold) {
            let _ = writeln!(s, "{t:>6.2} {a1:>8.3} {a5:>8.3}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "images {}  masks {}  gts {}  predictions {}  missing {}",
            self.images, self.masks, self.gts, self.predictions, self.missing_predictions
        );
        s
    }
}

/// Cloze readout and scored boxes for every mask of every sample.
///
/// Samples must carry rasters. Each mask's boxes share one latent, so the
/// same boxes and scores serve both the top-1 and top-k name criteria.
pub fn evaluate(model: &Model, samples: &[CodeSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let norm = match &cfg.synonyms {
        Some(p) => NameNormalizer::from_file(Path::new(p))?,
        None => NameNormalizer::default(),
    };
    let mut names = Vec::new();
    let mut name_gts = Vec::new();
    let mut boxes = Vec::new();
    let mut gts = Vec::new();
    let mut per_image = Vec::new();
    for s in samples {
        let image = s.raster.as_ref().ok_or_else(|| Error::InvalidSample {
            sample: s.image_id,
            msg: "raster not loaded".into(),
        })?;
        for a in &s.annotations {
            gts.push(GtBox {
                image_id: s.image_id,
                mask_index: a.mask_index,
                name: norm.normalize(&a.name),
                bbox: a.normalized_box(s.width, s.height)?,
            });
        }
        let cloze = make_cloze(s)?;
        for (m, ans) in cloze.answers.iter().enumerate() {
            name_gts.push((s.image_id, m, ans.clone()));
        }
        if cloze.positions.is_empty() {
            continue;
        }
        let answers = model.cloze(image, &cloze.ids, cfg.k)?;
        let mut rep = ImageReport {
            image_id: s.image_id,
            masks: answers.len(),
            top1_correct: 0,
            tp_at_50: 0,
        };
        let first_box = boxes.len();
        for a in answers {
            let candidates: Vec<(String, f64)> = a
                .names
                .iter()
                .zip(&a.fill.candidates)
                .map(|(n, (_, p))| (n.clone(), *p))
                .collect();
            let top_p = candidates[0].1;
            let ranked: Vec<String> = candidates.iter().map(|c| norm.normalize(&c.0)).collect();
            if ranked[0] == norm.normalize(&cloze.answers[a.mask_index]) {
                rep.top1_correct += 1;
            }
            for (q, bbox) in a.detection.boxes.iter().enumerate() {
                let pm = a.detection.p_matched(q);
                let score = match cfg.score_mode {
                    ScoreMode::Product => pm * top_p,
                    ScoreMode::MatchedOnly => pm,
                };
                if score >= cfg.score_floor {
                    boxes.push(ScoredBox {
                        image_id: s.image_id,
                        mask_index: a.mask_index,
                        score,
                        bbox: *bbox,
                        names: ranked.clone(),
                    });
                }
            }
            names.push(NamePrediction {
                image_id: s.image_id,
                mask_index: a.mask_index,
                candidates,
            });
        }
        if cfg.per_image {
            let img_gts: Vec<GtBox> = gts.iter().filter(|g| g.image_id == s.image_id).cloned().collect();
            rep.tp_at_50 = classify_matches(&boxes[first_box..], &img_gts, 0.5, 1)
                .into_iter()
                .filter(|&t| t)
                .count();
            per_image.push(rep);
        }
    }
    let acc1 = accuracy_at_k(&names, &name_gts, 1, &norm);
    let acc5 = accuracy_at_k(&names, &name_gts, 5, &norm);
    let (ap1, ap1_per_threshold) = ap_over_thresholds(&boxes, &gts, 1);
    let (ap5, ap5_per_threshold) = ap_over_thresholds(&boxes, &gts, cfg.k);
    Ok(EvalReport {
        acc1: acc1.percent,
        acc5: acc5.percent,
        ap1,
        ap5,
        ap1_per_threshold,
        ap5_per_threshold,
        images: samples.len(),
        masks: name_gts.len(),
        gts: gts.len(),
        predictions: boxes.len(),
        missing_predictions: acc1.missing,
        no_gts: gts.is_empty(),
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::corners(x0, y0, x1, y1).unwrap()
    }

    fn np(img: u64, m: usize, names: &[&str]) -> NamePrediction {
        NamePrediction {
            image_id: img,
            mask_index: m,
            candidates: names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), 1.0 / (i + 2) as f64))
                .collect(),
        }
    }

    #[test]
    fn accuracy_counts() {
        let norm = NameNormalizer::default();
        let gts = vec![(0, 0, "cup".into()), (0, 1, "hat".into()), (1, 0, "box".into())];
        let preds = vec![
            np(0, 0, &["cup", "hat"]),
            np(0, 1, &["Hat ", "cup"]),
            np(1, 0, &["cup", "hat", "pen", "car", "box"]),
        ];
        let a1 = accuracy_at_k(&preds, &gts, 1, &norm);
        assert!((a1.percent - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(format!("{:.1}", a1.percent), "66.7");
        assert_eq!(accuracy_at_k(&preds, &gts, 5, &norm).percent, 100.0);
        let all = accuracy_at_k(&preds[..2], &gts[..2], 1, &norm);
        assert_eq!(all.percent, 100.0);
        let miss = accuracy_at_k(&preds[..1], &gts, 1, &norm);
        assert_eq!(miss.missing, 2);
    }

    #[test]
    fn synonyms_resolve_chains_and_reject_cycles() {
        let t: BTreeMap<String, String> = [("Mug", "cup"), ("beaker", "mug")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let n = NameNormalizer::new(&t).unwrap();
        assert_eq!(n.normalize("  BEAKER "), "cup");
        assert_eq!(n.normalize("mug"), "cup");
        let cyc: BTreeMap<String, String> = [("a", "b"), ("b", "a")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert!(NameNormalizer::new(&cyc).is_err());
    }

    fn sb(m: usize, score: f64, bbox: BBox, names: &[&str]) -> ScoredBox {
        ScoredBox {
            image_id: 0,
            mask_index: m,
            score,
            bbox,
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn gt(m: usize, name: &str, bbox: BBox) -> GtBox {
        GtBox {
            image_id: 0,
            mask_index: m,
            name: name.into(),
            bbox,
        }
    }

    #[test]
    fn perfect_prediction_is_tp_everywhere() {
        let bx = b(0.1, 0.1, 0.4, 0.5);
        let p = [sb(0, 0.9, bx, &["cup"])];
        let g = [gt(0, "cup", bx)];
        for t in iou_thresholds() {
            assert_eq!(classify_matches(&p, &g, t, 1), vec![true]);
        }
        let (ap, _) = ap_over_thresholds(&p, &g, 1);
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn wrong_mask_index_is_fp() {
        let bx = b(0.1, 0.1, 0.4, 0.5);
        assert_eq!(
            classify_matches(&[sb(1, 0.9, bx, &["cup"])], &[gt(0, "cup", bx)], 0.5, 1),
            vec![false]
        );
    }

    #[test]
    fn top5_relaxation() {
        let bx = b(0.1, 0.1, 0.4, 0.5);
        let p = [sb(0, 0.9, bx, &["hat", "cup"])];
        let g = [gt(0, "cup", bx)];
        assert_eq!(classify_matches(&p, &g, 0.5, 1), vec![false]);
        assert_eq!(classify_matches(&p, &g, 0.5, 5), vec![true]);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(&[], &[], 3).ap, 0.0);
        let z = average_precision(&[true], &[0.5], 0);
        assert!(z.no_gts && z.ap == 0.0);
        assert_eq!(average_precision(&[true, true], &[0.9, 0.4], 2).ap, 1.0);
    }

    #[test]
    fn ap_hand_built_pr_curve() {
        // Ranked TP, FP, TP with two ground truths: recall 0.5, 0.5, 1 and
        // precision 1, 1/2, 2/3. Interpolated precision is 1 up to recall
        // 0.5 (51 points) and 2/3 beyond (50 points).
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2).ap;
        let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - want).abs() < 1e-12);
        // Same ranking given in shuffled input order.
        let ap2 = average_precision(&[true, true, false], &[0.7, 0.9, 0.8], 2).ap;
        assert!((ap2 - want).abs() < 1e-12);
    }

    /// Oracle: for each prediction in score order, list every legal pairing
    /// with a still-free ground truth and keep the best one.
    fn oracle_labels(preds: &[ScoredBox], gts: &[GtBox], t: f64, k: usize) -> Vec<bool> {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
        let mut free = vec![true; gts.len()];
        let mut out = vec![false; preds.len()];
        for p in order {
            let legal: Vec<(usize, f64)> = (0..gts.len())
                .filter(|&g| free[g])
                .filter(|&g| gts[g].image_id == preds[p].image_id && gts[g].mask_index == preds[p].mask_index)
                .filter(|&g| preds[p].names.iter().take(k).any(|n| *n == gts[g].name))
                .map(|g| (g, iou(&preds[p].bbox, &gts[g].bbox)))
                .filter(|&(_, o)| o >= t)
                .collect();
            let mut best: Option<(usize, f64)> = None;
            for (g, o) in legal {
                if best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                free[g] = false;
                out[p] = true;
            }
        }
        out
    }

    /// Oracle AP: precision at each recall level read from the explicit
    /// curve as the best precision at any recall at or beyond it.
    fn oracle_ap(labels: &[bool], scores: &[f64], n_gt: usize) -> f64 {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut pts = Vec::new();
        let mut tp = 0.0;
        for (n, &i) in idx.iter().enumerate() {
            if labels[i] {
                tp += 1.0;
            }
            pts.push((tp / n_gt as f64, tp / (n + 1) as f64));
        }
        (0..=100)
            .map(|r| {
                let r = r as f64 / 100.0;
                pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    fn random_eval_set(rng: &mut Rng) -> (Vec<ScoredBox>, Vec<GtBox>, Vec<NamePrediction>, Vec<(u64, usize, String)>) {
        let vocab = ["cup", "hat", "box", "pen", "car", "dog"];
        let rb = |rng: &mut Rng| {
            let x = rng.uniform() * 0.6;
            let y = rng.uniform() * 0.6;
            b(x, y, x + 0.1 + rng.uniform() * 0.3, y + 0.1 + rng.uniform() * 0.3)
        };
        let n_masks = rng.range_inclusive(1, 3);
        let mut gts = Vec::new();
        let mut answers = Vec::new();
        let mut names = Vec::new();
        for m in 0..n_masks {
            let name = vocab[rng.below(vocab.len())];
            answers.push((0u64, m, name.to_string()));
            for _ in 0..rng.range_inclusive(0, 2) {
                if gts.len() < 4 {
                    gts.push(gt(m, name, rb(rng)));
                }
            }
            let mut cands: Vec<&str> = vocab.to_vec();
            rng.shuffle(&mut cands);
            names.push(np(0, m, &cands[..5]));
        }
        let mut preds = Vec::new();
        for _ in 0..rng.range_inclusive(0, 8) {
            let m = rng.below(n_masks);
            let bbox = if !gts.is_empty() && rng.bernoulli(0.6) {
                let g = &gts[rng.below(gts.len())];
                let [x0, y0, x1, y1] = g.bbox.to_corners();
                let j = 0.05 * rng.uniform();
                b(x0 + j, y0, x1 + j, y1)
            } else {
                rb(rng)
            };
            let ns: Vec<&str> = names[m].candidates.iter().map(|c| c.0.as_str()).collect();
            preds.push(sb(m, (rng.below(5) as f64) / 4.0 * rng.uniform(), bbox, &ns));
        }
        (preds, gts, names, answers)
    }

    #[test]
    fn evaluator_agrees_with_oracles() {
        let mut rng = Rng::new(21);
        let norm = NameNormalizer::default();
        for _ in 0..100 {
            let (preds, gts, names, answers) = random_eval_set(&mut rng);
            let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
            let mut prev = f64::INFINITY;
            for t in iou_thresholds() {
                for k in [1, 5] {
                    let l = classify_matches(&preds, &gts, t, k);
                    assert_eq!(l, oracle_labels(&preds, &gts, t, k));
                    assert!(l.iter().filter(|&&x| x).count() <= preds.len().min(gts.len()));
                    if !gts.is_empty() {
                        let ap = average_precision(&l, &scores, gts.len()).ap;
                        assert!((ap - oracle_ap(&l, &scores, gts.len())).abs() < 1e-9);
                    }
                }
                let ap1 = average_precision(&classify_matches(&preds, &gts, t, 1), &scores, gts.len()).ap;
                assert!(ap1 <= prev + 1e-12);
                prev = ap1;
            }
            let (ap1, _) = ap_over_thresholds(&preds, &gts, 1);
            let (ap5, _) = ap_over_thresholds(&preds, &gts, 5);
            assert!(ap5 >= ap1 - 1e-12);
            assert!(accuracy_at_k(&names, &answers, 5, &norm).percent >= accuracy_at_k(&names, &answers, 1, &norm).percent);
        }
    }

    #[test]
    fn report_renders() {
        let r = EvalReport {
            acc1: 50.0,
            acc5: 75.0,
            ap1: 0.25,
            ap5: 0.5,
            ap1_per_threshold: iou_thresholds().into_iter().map(|t| (t, 0.25)).collect(),
            ap5_per_threshold: iou_thresholds().into_iter().map(|t| (t, 0.5)).collect(),
            images: 2,
            masks: 4,
            gts: 4,
            predictions: 9,
            missing_predictions: 0,
            no_gts: false,
            per_image: vec![],
        };
        let table = r.to_table();
        assert!(table.contains("    50.0     75.0    0.250    0.500"));
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[ A-Za-z]{0,12}") {
            let n = NameNormalizer::default();
            prop_assert_eq!(n.normalize(&n.normalize(&s)), n.normalize(&s));
        }
    }
}
