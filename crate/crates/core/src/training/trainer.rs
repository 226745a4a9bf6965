use serde::{Deserialize, Serialize};

use crate::data::{
    caption_sequence, cloze_sequence, ov_sequence, qa_sequence, side_swap, CodeSample, Image, Task, TaskSequence,
    Vocabulary,
};
use crate::decoder::DetectionOutput;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamW, Graph, Rng};

use super::loss::{compute_loss, DetectionTarget, LossBreakdown, LossConfig, LossTerms, SequenceTarget};
use super::matching::{conditional_match, GroundTruth, MatchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Linear warmup length in steps.
    pub warmup: u64,
    /// Cosine decay from `lr` to `lr · min_lr_ratio` after warmup.
    pub cosine: bool,
    pub min_lr_ratio: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub flip_prob: f64,
    /// Each sample gets its cloze sequence plus one task drawn from this list.
    pub aux_tasks: Vec<Task>,
    pub freeze_lm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            steps: 2000,
            batch: 4,
            seed: 0,
            warmup: 100,
            cosine: true,
            min_lr_ratio: 0.05,
            grad_clip: 1.0,
            flip_prob: 0.5,
            aux_tasks: vec![Task::Caption, Task::Qa, Task::Ov],
            freeze_lm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("train.min_lr_ratio", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("train.flip_prob", "must lie in [0, 1]"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be non-negative"));
        }
        if self.aux_tasks.contains(&Task::Cloze) {
            return Err(Error::config("train.aux_tasks", "cloze is always trained; list only caption, qa, ov"));
        }
        Ok(())
    }

    /// Learning rate used for the update at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let m = self.min_lr_ratio;
        self.lr * (m + (1.0 - m) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// One augmented training sample: image, task sequences and ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub image: Image,
    pub sequences: Vec<TaskSequence>,
    pub gts: Vec<GroundTruth>,
}

/// Draws the flip and auxiliary task for one sample.
pub fn prepare_item(
    sample: &CodeSample,
    vocab: &Vocabulary,
    rng: &mut Rng,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainItem> {
    if sample.raster.is_none() {
        return Err(Error::InvalidSample {
            sample: sample.image_id,
            msg: "raster not loaded".into(),
        });
    }
    let flipped;
    let s = if rng.bernoulli(train.flip_prob) {
        flipped = sample.hflip(side_swap(vocab), vocab)?;
        &flipped
    } else {
        sample
    };
    let mut sequences = vec![cloze_sequence(s, vocab, loss.whole_caption)?];
    if !train.aux_tasks.is_empty() {
        match train.aux_tasks[rng.below(train.aux_tasks.len())] {
            Task::Caption => sequences.push(caption_sequence(s, vocab)?),
            Task::Qa if !s.annotations.is_empty() => {
                let i = rng.below(s.annotations.len());
                sequences.extend(qa_sequence(s, i, vocab)?);
            }
            Task::Ov => {
                let present: Vec<&str> = s.annotations.iter().map(|a| a.name.as_str()).collect();
                let absent: Vec<String> = vocab
                    .noun_words()
                    .into_iter()
                    .filter(|n| !present.contains(&n.as_str()))
                    .collect();
                let pick_present = rng.bernoulli(0.5);
                let class = if (pick_present || absent.is_empty()) && !present.is_empty() {
                    Some(present[rng.below(present.len())].to_string())
                } else if !absent.is_empty() {
                    Some(absent[rng.below(absent.len())].clone())
                } else {
                    None
                };
                if let Some(c) = class {
                    sequences.push(ov_sequence(s, &c, vocab)?);
                }
            }
            _ => {}
        }
    }
    let gts = s
        .annotations
        .iter()
        .map(|a| {
            Ok(GroundTruth {
                name: a.name.clone(),
                bbox: a.normalized_box(s.width, s.height)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrainItem {
        image: s.raster.clone().expect("checked above"),
        sequences,
        gts,
    })
}

/// Loss nodes of a batch together with the matching that produced them.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub terms: LossTerms,
    /// One entry per condition: items, then sequences, then conditions.
    pub matches: Vec<MatchResult>,
}

/// Full forward pass with teacher-forced conditions. With `fixed`, the given
/// matching is reused instead of being recomputed (for gradient checks).
pub fn forward_loss(
    g: &mut Graph,
    model: &Model,
    items: &[TrainItem],
    cfg: &LossConfig,
    fixed: Option<&[MatchResult]>,
) -> Result<ForwardPass> {
    let mut dets = Vec::new();
    let mut seqs = Vec::new();
    let mut matches = Vec::new();
    for item in items {
        let enc = model.encode(g, &item.image)?;
        let mut latents = Vec::new();
        let mut conds = Vec::new();
        for seq in &item.sequences {
            let prefix = model.lm.build_prefix(g, Task::Cloze, enc.z, &seq.ids, &model.vocab)?;
            let out = model.lm.forward(g, &prefix)?;
            seqs.push(SequenceTarget {
                logits: out.logits,
                noun_logits: out.noun_logits,
                lm_targets: seq.lm_targets.clone(),
                noun_labels: seq.noun_labels.clone(),
            });
            for c in &seq.conditions {
                latents.push(g.slice_rows(out.hidden, c.position, c.position + 1)?);
                conds.push(c);
            }
        }
        let heads = model.decoder.detect_for_conditions(g, enc.c, &latents)?;
        for (head, c) in heads.into_iter().zip(conds) {
            let m = match fixed {
                Some(f) => f
                    .get(matches.len())
                    .cloned()
                    .ok_or_else(|| Error::InvalidShape {
                        op: "forward_loss",
                        msg: "fixed matching has too few entries".into(),
                    })?,
                None => {
                    let pred = DetectionOutput::from_heads(g, &head, &c.name, c.position)?;
                    conditional_match(&pred, &item.gts, &c.name, cfg)?
                }
            };
            dets.push(DetectionTarget {
                head,
                pairs: m.pairs.iter().map(|&(q, i)| (q, item.gts[i].bbox)).collect(),
            });
            matches.push(m);
        }
    }
    let terms = compute_loss(g, &dets, &seqs, cfg)?;
    Ok(ForwardPass { terms, matches })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

impl StepReport {
    /// Stable `key=value` log line; floats print in shortest round-trip form.
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "step={} lr={} grad_norm={} total={} cls={} box_l1={} box_giou={} lm={} noun={} assigned={} lm_positions={}",
            self.step, self.lr, self.grad_norm, l.total, l.cls, l.box_l1, l.box_giou, l.lm, l.noun, l.assigned, l.lm_positions
        )
    }
}

/// Model, optimizer state and sampling state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    /// Stream for flips and auxiliary-task draws.
    pub rng: Rng,
    /// Completed steps.
    pub step: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Trainer {
    pub fn new(mut model: Model, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        model.set_lm_frozen(train.freeze_lm);
        Ok(Self {
            model,
            optimizer: AdamW::new(),
            rng: Rng::new(train.seed).fork(1),
            step: 0,
            train,
            loss,
        })
    }

    /// Corpus indices of the batch for the next step: consecutive slices of
    /// per-epoch shuffles, so the batch depends only on the step count.
    pub fn batch_indices(&self, corpus_len: usize) -> Vec<usize> {
        let b = self.train.batch;
        let start = self.step as usize * b;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + b)
            .map(|pos| {
                let epoch = pos / corpus_len;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..corpus_len).collect();
                    Rng::new(self.train.seed).fork(1_000 + epoch as u64).shuffle(&mut perm);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("filled above").1[pos % corpus_len]
            })
            .collect()
    }

    pub fn train_step(&mut self, corpus: &[CodeSample]) -> Result<StepReport> {
        if corpus.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batch: Vec<&CodeSample> = self.batch_indices(corpus.len()).into_iter().map(|i| &corpus[i]).collect();
        self.step_on(&batch)
    }

    /// One optimization step on an explicit batch.
    pub fn step_on(&mut self, batch: &[&CodeSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let items = batch
            .iter()
            .map(|s| prepare_item(s, &self.model.vocab, &mut self.rng, &self.train, &self.loss))
            .collect::<Result<Vec<_>>>()?;
        let next = self.step + 1;
        let (loss, grads) = {
            let mut g = Graph::with_params(&self.model.store);
            let fp = forward_loss(&mut g, &self.model, &items, &self.loss, None)?;
            let loss = fp.terms.breakdown(&g, &self.loss);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: next,
                    msg: format!("non-finite loss {loss:?}"),
                });
            }
            (loss, g.backward(fp.terms.total)?)
        };
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(&grads);
        let grad_norm = store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: next,
                msg: format!("non-finite gradient norm {grad_norm}"),
            });
        }
        if self.train.grad_clip > 0.0 && grad_norm > self.train.grad_clip {
            store.scale_grads(self.train.grad_clip / grad_norm);
        }
        let lr = self.train.lr_at(self.step);
        self.optimizer.step(store, lr, self.train.weight_decay)?;
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.tensor.all_finite()) {
            return Err(Error::Diverged {
                step: next,
                msg: format!("parameter {} became non-finite", p.name),
            });
        }
        self.step = next;
        Ok(StepReport {
            step: next,
            lr,
            grad_norm,
            loss,
        })
    }

    /// Trains until `train.steps` steps are complete, reporting each step.
    pub fn run(
        &mut self,
        corpus: &[CodeSample],
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.train.steps {
            let r = self.train_step(corpus)?;
            on_step(self, &r)?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GrammarConfig};
    use crate::model::ModelConfig;
    use crate::numerics::fdcheck::check_params;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            d1: 16,
            d2: 16,
            bins: 4,
            queries: 4,
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_ffn: 16,
            lm_layers: 1,
            lm_heads: 2,
            lm_ffn: 16,
            decoder_layers: 1,
            decoder_heads: 2,
            decoder_ffn: 16,
            ..ModelConfig::default()
        }
    }

    fn setup(train: TrainConfig) -> (Trainer, Vec<CodeSample>) {
        let grammar = GrammarConfig::default();
        let vocab = grammar.vocabulary().unwrap();
        let corpus = generate_synthetic(&mut Rng::new(3), 6, &grammar).unwrap();
        let model = Model::new(micro_config(), vocab, &mut Rng::new(train.seed)).unwrap();
        (Trainer::new(model, train, LossConfig::default()).unwrap(), corpus)
    }

    #[test]
    fn lr_schedule_shape() {
        let c = TrainConfig {
            lr: 1.0,
            warmup: 10,
            steps: 110,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-15);
        assert_eq!(c.lr_at(9), 1.0);
        assert_eq!(c.lr_at(10), 1.0);
        assert!((c.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((c.lr_at(110) - 0.1).abs() < 1e-12);
        let flat = TrainConfig {
            warmup: 0,
            cosine: false,
            ..c
        };
        assert_eq!(flat.lr_at(50), 1.0);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let (t, _) = setup(TrainConfig {
            batch: 3,
            ..TrainConfig::default()
        });
        let mut t = t;
        let mut seen = Vec::new();
        for s in 0..4 {
            t.step = s;
            seen.extend(t.batch_indices(6));
        }
        let mut first: Vec<_> = seen[..6].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..6).collect::<Vec<_>>());
        let mut second: Vec<_> = seen[6..].to_vec();
        second.sort_unstable();
        assert_eq!(second, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn identical_seeds_give_identical_steps() {
        let cfg = TrainConfig {
            batch: 2,
            ..TrainConfig::default()
        };
        let (mut a, corpus) = setup(cfg.clone());
        let (mut b, _) = setup(cfg);
        for _ in 0..2 {
            let (ra, rb) = (a.train_step(&corpus).unwrap(), b.train_step(&corpus).unwrap());
            assert_eq!(ra.log_line(), rb.log_line());
        }
    }

    #[test]
    fn frozen_lm_is_untouched() {
        let (mut t, corpus) = setup(TrainConfig {
            batch: 2,
            freeze_lm: true,
            ..TrainConfig::default()
        });
        let before: Vec<_> = t
            .model
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm."))
            .map(|(_, p)| p.tensor.values().to_vec())
            .collect();
        let enc_before = t.model.store.value(t.model.decoder.queries).clone();
        t.train_step(&corpus).unwrap();
        let after: Vec<_> = t
            .model
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm."))
            .map(|(_, p)| p.tensor.values().to_vec())
            .collect();
        assert_eq!(before, after);
        assert_ne!(&enc_before, t.model.store.value(t.model.decoder.queries));
    }

    #[test]
    fn micro_batch_loss_decreases() {
        let (mut t, corpus) = setup(TrainConfig {
            batch: 2,
            warmup: 0,
            cosine: false,
            flip_prob: 0.0,
            aux_tasks: vec![],
            ..TrainConfig::default()
        });
        let batch = [&corpus[0], &corpus[1]];
        let losses: Vec<f64> = (0..50).map(|_| t.step_on(&batch).unwrap().loss.total).collect();
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[40..].iter().sum();
        assert!(losses[49] < losses[0] && tail < head, "{losses:?}");
    }

    #[test]
    fn missing_raster_is_reported() {
        let (mut t, corpus) = setup(TrainConfig::default());
        let mut s = corpus[0].clone();
        s.raster = None;
        assert!(matches!(t.step_on(&[&s]), Err(Error::InvalidSample { .. })));
    }

    #[test]
    fn end_to_end_gradient_check() {
        let (t, corpus) = setup(TrainConfig::default());
        let sample = corpus.iter().find(|s| !s.annotations.is_empty()).unwrap();
        let cfg = LossConfig::default();
        let item = prepare_item(
            sample,
            &t.model.vocab,
            &mut Rng::new(0),
            &TrainConfig {
                flip_prob: 0.0,
                aux_tasks: vec![],
                ..TrainConfig::default()
            },
            &cfg,
        )
        .unwrap();
        let items = [item];
        let matches = {
            let mut g = Graph::with_params(&t.model.store);
            forward_loss(&mut g, &t.model, &items, &cfg, None).unwrap().matches
        };
        assert!(matches.iter().any(|m| !m.pairs.is_empty()));
        let ids: Vec<_> = t.model.store.iter().map(|(id, _)| id).collect();
        let r = check_params(&t.model.store, &ids, 2, 1e-6, &mut Rng::new(1), |g| {
            Ok(forward_loss(g, &t.model, &items, &cfg, Some(&matches))?.terms.total)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
