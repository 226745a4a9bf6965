//! Language sequences for the four tasks, with their supervision targets.
//!
//! Every sequence carries the positions whose final hidden state conditions
//! the box decoder. A latent is read at the conditioning token's own position.

use serde::{Deserialize, Serialize};

use super::code::{make_cloze, CodeSample};
use super::vocab::{TokenId, Vocabulary, EOS, MASK};
use crate::error::{Error, Result};

pub const CAPTION_PROMPT: &str = "a photo of";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cloze,
    Caption,
    Qa,
    Ov,
}

/// A token position that conditions the decoder, with the word it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub position: usize,
    pub name: String,
    pub mask_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub task: Task,
    pub ids: Vec<TokenId>,
    /// `(position, target)`: the output at `position` is trained towards `target`.
    pub lm_targets: Vec<(usize, TokenId)>,
    /// Object-word label for every position.
    pub noun_labels: Vec<f64>,
    pub conditions: Vec<Condition>,
}

fn noun_labels(ids: &[TokenId], vocab: &Vocabulary) -> Vec<f64> {
    ids.iter()
        .map(|&t| if t == MASK || vocab.is_noun(t) { 1.0 } else { 0.0 })
        .collect()
}

/// Next-token targets for every position from `from` to the second last.
fn next_token_targets(ids: &[TokenId], from: usize) -> Vec<(usize, TokenId)> {
    (from..ids.len().saturating_sub(1)).map(|i| (i, ids[i + 1])).collect()
}

fn single_token(vocab: &Vocabulary, name: &str) -> Result<TokenId> {
    match vocab.tokenize(name)?.as_slice() {
        [id] => Ok(*id),
        _ => Err(Error::OutOfVocabulary(vec![name.to_string()])),
    }
}

/// The masked caption. Mask positions are trained to produce the hidden word;
/// with `whole_caption` the remaining positions also predict the next word of
/// the original caption.
pub fn cloze_sequence(sample: &CodeSample, vocab: &Vocabulary, whole_caption: bool) -> Result<TaskSequence> {
    let cloze = make_cloze(sample)?;
    let mut lm_targets = Vec::new();
    let mut conditions = Vec::new();
    let mut answer_at = vec![None; cloze.ids.len()];
    for (m, (&pos, name)) in cloze.positions.iter().zip(&cloze.answers).enumerate() {
        let id = vocab.tokenize(name)?.first().copied();
        if let Some(id) = id {
            answer_at[pos] = Some(id);
            lm_targets.push((pos, id));
        }
        conditions.push(Condition {
            position: pos,
            name: name.clone(),
            mask_index: Some(m),
        });
    }
    if whole_caption {
        for i in 0..cloze.ids.len().saturating_sub(1) {
            if cloze.ids[i] != MASK {
                let next = answer_at[i + 1].unwrap_or(cloze.ids[i + 1]);
                lm_targets.push((i, next));
            }
        }
        lm_targets.sort_unstable();
    }
    Ok(TaskSequence {
        task: Task::Cloze,
        noun_labels: noun_labels(&cloze.ids, vocab),
        ids: cloze.ids,
        lm_targets,
        conditions,
    })
}

/// `a photo of` followed by the caption and `[EOS]`.
pub fn caption_sequence(sample: &CodeSample, vocab: &Vocabulary) -> Result<TaskSequence> {
    let mut ids = vocab.tokenize(CAPTION_PROMPT)?;
    let offset = ids.len();
    ids.extend_from_slice(&sample.token_ids);
    ids.push(EOS);
    let conditions = sample
        .annotations
        .iter()
        .filter(|a| a.token_span.1 - a.token_span.0 == 1)
        .map(|a| Condition {
            position: offset + a.token_span.0,
            name: a.name.clone(),
            mask_index: None,
        })
        .collect();
    Ok(TaskSequence {
        task: Task::Caption,
        lm_targets: next_token_targets(&ids, offset - 1),
        noun_labels: noun_labels(&ids, vocab),
        ids,
        conditions,
    })
}

pub fn qa_prompt(question: &str) -> String {
    format!("question: {} answer:", question.trim())
}

/// Side word of a synthetic annotation, read from `at <side> a <name>`.
pub fn annotation_side<'v>(sample: &CodeSample, index: usize, vocab: &'v Vocabulary) -> Option<&'v str> {
    let (s, e) = sample.annotations.get(index)?.token_span;
    if s < 3 || e != s + 1 {
        return None;
    }
    let word = |i: usize| vocab.token(sample.token_ids[i]).ok();
    (word(s - 3)? == "at" && word(s - 1)? == "a").then(|| word(s - 2)).flatten()
}

/// `question: what is at <side>? answer: a <name> [EOS]` for one annotation,
/// or `None` when the caption does not name the annotation's side.
pub fn qa_sequence(sample: &CodeSample, index: usize, vocab: &Vocabulary) -> Result<Option<TaskSequence>> {
    let Some(side) = annotation_side(sample, index, vocab) else {
        return Ok(None);
    };
    let name = &sample.annotations[index].name;
    let mut ids = vocab.tokenize(&qa_prompt(&format!("what is at {side}?")))?;
    let prompt_len = ids.len();
    ids.push(vocab.tokenize("a")?[0]);
    ids.push(single_token(vocab, name)?);
    ids.push(EOS);
    Ok(Some(TaskSequence {
        task: Task::Qa,
        lm_targets: next_token_targets(&ids, prompt_len - 1),
        noun_labels: noun_labels(&ids, vocab),
        conditions: vec![Condition {
            position: prompt_len + 1,
            name: name.clone(),
            mask_index: None,
        }],
        ids,
    }))
}

pub fn ov_question(class: &str) -> String {
    qa_prompt(&format!("does the {class} appear in this picture?"))
}

/// Position of the class word inside [`ov_question`].
pub const OV_CLASS_POSITION: usize = 4;

/// The yes/no presence question for `class`. The class token conditions the
/// decoder; when the class is absent it has no ground truths.
pub fn ov_sequence(sample: &CodeSample, class: &str, vocab: &Vocabulary) -> Result<TaskSequence> {
    single_token(vocab, class)?;
    let mut ids = vocab.tokenize(&ov_question(class))?;
    let prompt_len = ids.len();
    let present = sample.annotations.iter().any(|a| a.name == class);
    ids.push(vocab.tokenize(if present { "yes" } else { "no" })?[0]);
    ids.push(EOS);
    Ok(TaskSequence {
        task: Task::Ov,
        lm_targets: next_token_targets(&ids, prompt_len - 1),
        noun_labels: noun_labels(&ids, vocab),
        conditions: vec![Condition {
            position: OV_CLASS_POSITION,
            name: class.to_string(),
            mask_index: None,
        }],
        ids,
    })
}

/// Token map exchanging `left` and `right`, for horizontal flips.
pub fn side_swap(vocab: &Vocabulary) -> impl Fn(TokenId) -> TokenId {
    let l = vocab.id("left");
    let r = vocab.id("right");
    move |t| match (l, r) {
        (Some(l), Some(r)) if t == l => r,
        (Some(l), Some(r)) if t == r => l,
        _ => t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, GrammarConfig};
    use crate::numerics::Rng;

    fn corpus() -> (Vocabulary, Vec<CodeSample>) {
        let cfg = GrammarConfig::default();
        let v = cfg.vocabulary().unwrap();
        (v, generate_synthetic(&mut Rng::new(3), 10, &cfg).unwrap())
    }

    #[test]
    fn cloze_targets_sit_on_masks() {
        let (v, s) = corpus();
        for x in &s {
            let seq = cloze_sequence(x, &v, false).unwrap();
            assert_eq!(seq.lm_targets.len(), x.annotations.len());
            for ((p, t), c) in seq.lm_targets.iter().zip(&seq.conditions) {
                assert_eq!(seq.ids[*p], MASK);
                assert_eq!(*p, c.position);
                assert_eq!(v.token(*t).unwrap(), c.name);
                assert_eq!(seq.noun_labels[*p], 1.0);
            }
            assert_eq!(seq.noun_labels.iter().sum::<f64>(), x.annotations.len() as f64);
        }
    }

    #[test]
    fn whole_caption_cloze_predicts_original_words() {
        let (v, s) = corpus();
        let seq = cloze_sequence(&s[0], &v, true).unwrap();
        let non_mask = (0..seq.ids.len() - 1).filter(|&i| seq.ids[i] != MASK).count();
        assert_eq!(seq.lm_targets.len(), non_mask + s[0].annotations.len());
        for &(p, t) in &seq.lm_targets {
            if seq.ids[p] != MASK {
                assert_eq!(t, s[0].token_ids[p + 1]);
            }
        }
    }

    #[test]
    fn caption_sequence_layout() {
        let (v, s) = corpus();
        let seq = caption_sequence(&s[0], &v).unwrap();
        assert_eq!(&seq.ids[..3], v.tokenize("a photo of").unwrap().as_slice());
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(seq.lm_targets.first().unwrap().0, 2);
        assert_eq!(seq.lm_targets.last().unwrap().1, EOS);
        for c in &seq.conditions {
            assert_eq!(v.token(seq.ids[c.position]).unwrap(), c.name);
        }
    }

    #[test]
    fn qa_names_the_side() {
        let (v, s) = corpus();
        for x in &s {
            for i in 0..x.annotations.len() {
                let seq = qa_sequence(x, i, &v).unwrap().unwrap();
                let text = v.detokenize(&seq.ids).unwrap();
                let side = annotation_side(x, i, &v).unwrap();
                assert_eq!(
                    text,
                    format!("question: what is at {side}? answer: a {} [EOS]", x.annotations[i].name)
                );
                assert_eq!(v.token(seq.ids[seq.conditions[0].position]).unwrap(), x.annotations[i].name);
            }
        }
    }

    #[test]
    fn ov_answers_presence() {
        let (v, s) = corpus();
        let present = &s[0].annotations[0].name;
        let seq = ov_sequence(&s[0], present, &v).unwrap();
        assert_eq!(v.token(seq.ids[seq.ids.len() - 2]).unwrap(), "yes");
        assert_eq!(v.token(seq.ids[OV_CLASS_POSITION]).unwrap(), present);
        let absent = v
            .noun_ids()
            .into_iter()
            .map(|i| v.token(i).unwrap().to_string())
            .find(|n| s[0].annotations.iter().all(|a| &a.name != n))
            .unwrap();
        let seq = ov_sequence(&s[0], &absent, &v).unwrap();
        assert_eq!(v.token(seq.ids[seq.ids.len() - 2]).unwrap(), "no");
    }

    #[test]
    fn swap_exchanges_sides_only() {
        let (v, _) = corpus();
        let f = side_swap(&v);
        let ids = v.tokenize("at left a cup and at right a hat").unwrap();
        let out: Vec<_> = ids.iter().map(|&t| f(t)).collect();
        assert_eq!(v.detokenize(&out).unwrap(), "at right a cup and at left a hat");
    }
}
