//! Causal language model over a multimodal prefix `[z, t₁:l]`.
//!
//! The latent `e` of a token is the final-layer state (after the closing
//! layer norm) at that token's own position. The vocabulary head reads the
//! same state: a next-token distribution at ordinary positions, and the
//! hidden word at `[MASK]` positions.

use crate::data::{Task, TokenId, Vocabulary, CAPTION_PROMPT, EOS, MASK};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm, SelfBlock};
use crate::model::ModelConfig;
use crate::numerics::{sigmoid, Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Lm {
    pub(crate) tok: ParamId,
    pub(crate) pos: ParamId,
    pub(crate) z_proj: Linear,
    pub(crate) layers: Vec<SelfBlock>,
    pub(crate) ln_f: Norm,
    pub(crate) head: Linear,
    pub(crate) noun: Linear,
    max_positions: usize,
    vocab_size: usize,
    d1: usize,
}

/// Embedded context: projected local tokens (if any) followed by token
/// embeddings. Positions are added when the model runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrefix {
    pub visual: Option<Var>,
    pub ids: Vec<TokenId>,
    /// Number of rows taken by the visual segment (`p`, or 0 when ablated).
    pub visual_len: usize,
}

impl MultimodalPrefix {
    pub fn len(&self) -> usize {
        self.visual_len + self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Language-position outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// `(l, d₁)` latents of the language positions.
    pub hidden: Var,
    /// `(l, |W|)` vocabulary logits.
    pub logits: Var,
    /// `(l, 1)` object-word logits.
    pub noun_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub distribution: Vec<f64>,
    pub latent: Tensor,
    pub noun_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub latents: Vec<Tensor>,
    /// Distribution each token was chosen from.
    pub distributions: Vec<Vec<f64>>,
    pub noun_probs: Vec<f64>,
    /// Whether decoding stopped on `[EOS]` rather than the length bound.
    pub hit_eos: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskFill {
    /// Position of the `[MASK]` within the language ids.
    pub position: usize,
    /// Noun candidates by descending probability, renormalized over nouns.
    pub candidates: Vec<(TokenId, f64)>,
    pub latent: Tensor,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / z).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Lm {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        let layers = (0..cfg.lm_layers)
            .map(|i| SelfBlock::new(store, &format!("lm.layers.{i}"), cfg.d1, cfg.lm_heads, cfg.lm_ffn, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            tok: store.add_table("lm.tok", &[vocab_size, cfg.d1], rng)?,
            pos: store.add_table("lm.pos", &[cfg.max_positions, cfg.d1], rng)?,
            z_proj: Linear::new(store, "lm.z_proj", cfg.d1, cfg.d1, rng)?,
            layers,
            ln_f: Norm::new(store, "lm.ln_f", cfg.d1)?,
            head: Linear::new(store, "lm.head", cfg.d1, vocab_size, rng)?,
            noun: Linear::new(store, "lm.noun", cfg.d1, 1, rng)?,
            max_positions: cfg.max_positions,
            vocab_size,
            d1: cfg.d1,
        })
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    /// Assembles the prefix for `task`: cloze text is used as is, caption text
    /// follows `a photo of`, and question text is wrapped as
    /// `question: … answer:`.
    pub fn build_prefix(
        &self,
        g: &mut Graph,
        task: Task,
        z: Option<Var>,
        text: &[TokenId],
        vocab: &Vocabulary,
    ) -> Result<MultimodalPrefix> {
        let ids = match task {
            Task::Cloze => text.to_vec(),
            Task::Caption => {
                let mut ids = vocab.tokenize(CAPTION_PROMPT)?;
                ids.extend_from_slice(text);
                ids
            }
            Task::Qa | Task::Ov => {
                let mut ids = vocab.tokenize("question:")?;
                ids.extend_from_slice(text);
                ids.extend(vocab.tokenize("answer:")?);
                ids
            }
        };
        let visual = match z {
            Some(z) => Some(self.z_proj.forward(g, z)?),
            None => None,
        };
        let visual_len = visual.map_or(0, |v| g.shape(v)[0]);
        Ok(MultimodalPrefix {
            visual,
            ids,
            visual_len,
        })
    }

    /// Runs the causal stack over a prefix, returning outputs at the language
    /// positions only.
    pub fn forward(&self, g: &mut Graph, prefix: &MultimodalPrefix) -> Result<LmOutput> {
        let total = prefix.len();
        if total == 0 {
            return Err(Error::InvalidShape {
                op: "lm",
                msg: "empty context".into(),
            });
        }
        if total > self.max_positions {
            return Err(Error::ContextTooLong {
                len: total,
                max: self.max_positions,
            });
        }
        if let Some(&bad) = prefix.ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let table = g.param(self.tok);
        let mut parts = Vec::with_capacity(2);
        if let Some(v) = prefix.visual {
            parts.push(v);
        }
        if !prefix.ids.is_empty() {
            parts.push(g.gather_rows(table, &prefix.ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, total)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, true)?;
        }
        let x = self.ln_f.forward(g, x)?;
        let hidden = if prefix.visual_len > 0 {
            g.slice_rows(x, prefix.visual_len, total)?
        } else {
            x
        };
        Ok(LmOutput {
            hidden,
            logits: self.head.forward(g, hidden)?,
            noun_logits: self.noun.forward(g, hidden)?,
        })
    }

    fn step_at(&self, g: &Graph, out: &LmOutput, row: usize) -> StepOutput {
        let logits = g.value(out.logits).row(row);
        StepOutput {
            distribution: softmax_row(logits),
            latent: Tensor::new(&[self.d1], g.value(out.hidden).row(row).to_vec()).expect("finite latent"),
            noun_prob: sigmoid(g.value(out.noun_logits).values()[row]),
        }
    }

    /// Distribution, latent and noun probability at the last position.
    pub fn decode_step(&self, g: &mut Graph, prefix: &MultimodalPrefix) -> Result<StepOutput> {
        if prefix.ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "decode_step",
                msg: "no language token to read".into(),
            });
        }
        let out = self.forward(g, prefix)?;
        Ok(self.step_at(g, &out, prefix.ids.len() - 1))
    }

    /// Greedy decoding until `[EOS]` or `max_len` tokens. Each emitted token's
    /// latent and noun score are read at its own position after it is fed
    /// back, which costs one extra pass at the end.
    pub fn generate(&self, g: &mut Graph, prefix: &MultimodalPrefix, max_len: usize) -> Result<DecodeResult> {
        let mut ctx = prefix.clone();
        let mut res = DecodeResult::default();
        let budget = max_len.min(self.max_positions.saturating_sub(prefix.len()));
        loop {
            let out = self.forward(g, &ctx)?;
            let last = ctx.ids.len() - 1;
            if !res.tokens.is_empty() {
                let s = self.step_at(g, &out, last);
                res.latents.push(s.latent);
                res.noun_probs.push(s.noun_prob);
            }
            if res.tokens.len() >= budget {
                break;
            }
            let dist = softmax_row(g.value(out.logits).row(last));
            let next = argmax(&dist);
            if next == EOS {
                res.hit_eos = true;
                break;
            }
            res.tokens.push(next);
            res.distributions.push(dist);
            ctx.ids.push(next);
        }
        Ok(res)
    }

    /// Reads every `[MASK]` of a fully given masked sequence: top-`k` nouns
    /// and the latent at the mask.
    pub fn cloze_fill(
        &self,
        g: &mut Graph,
        prefix: &MultimodalPrefix,
        vocab: &Vocabulary,
        k: usize,
    ) -> Result<Vec<MaskFill>> {
        let masks: Vec<usize> = (0..prefix.ids.len()).filter(|&i| prefix.ids[i] == MASK).collect();
        if masks.is_empty() {
            return Err(Error::NoMask);
        }
        let out = self.forward(g, prefix)?;
        let nouns = vocab.noun_ids();
        Ok(masks
            .into_iter()
            .map(|pos| {
                let s = self.step_at(g, &out, pos);
                MaskFill {
                    position: pos,
                    candidates: top_nouns(&s.distribution, &nouns, k),
                    latent: s.latent,
                }
            })
            .collect())
    }
}

/// Noun-restricted, renormalized top-`k` with ties broken by lower id.
pub fn top_nouns(distribution: &[f64], nouns: &[TokenId], k: usize) -> Vec<(TokenId, f64)> {
    let z: f64 = nouns.iter().map(|&i| distribution[i]).sum();
    let mut c: Vec<(TokenId, f64)> = nouns.iter().map(|&i| (i, distribution[i] / z)).collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c.truncate(k);
    c
}

/// Indices of emitted tokens whose noun probability reaches `threshold`.
pub fn noun_positions(result: &DecodeResult, threshold: f64) -> Vec<usize> {
    (0..result.noun_probs.len())
        .filter(|&i| result.noun_probs[i] >= threshold)
        .collect()
}
