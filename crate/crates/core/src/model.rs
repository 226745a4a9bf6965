//! Model configuration and the assembled encoder / language model / decoder,
//! with the inference entry points used by evaluation, the CLI and the FFI.

use serde::{Deserialize, Serialize};

use crate::data::{Image, Task, TokenId, Vocabulary, MASK, OV_CLASS_POSITION};
use crate::decoder::{latent_row, Decoder, DetectionOutput};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::lm::{noun_positions, DecodeResult, Lm, MaskFill};
use crate::numerics::{Graph, InitScheme, ParamStore, Rng, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch: usize,
    /// Width of the patch features `v`.
    pub d: usize,
    /// Width of the language model (and of `z`, `e`).
    pub d1: usize,
    /// Width of the full tokens `c` and of the decoder.
    pub d2: usize,
    /// Number of pooled local tokens `p` (a perfect square).
    pub bins: usize,
    /// Object queries `N`.
    pub queries: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ffn: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ffn: usize,
    pub max_positions: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub box_layers: usize,
    pub query_self_attention: bool,
    /// Whether `z` is prepended to the language tokens.
    pub local_tokens: bool,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch: 6,
            d: 32,
            d1: 64,
            d2: 64,
            bins: 9,
            queries: 20,
            encoder_layers: 6,
            encoder_heads: 4,
            encoder_ffn: 128,
            lm_layers: 2,
            lm_heads: 4,
            lm_ffn: 256,
            max_positions: 48,
            decoder_layers: 6,
            decoder_heads: 4,
            decoder_ffn: 128,
            box_layers: 3,
            query_self_attention: true,
            local_tokens: true,
            init: InitScheme::Fixed,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<(usize, usize)> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::IndivisibleImage {
                height: self.image_size,
                width: self.image_size,
                patch: self.patch,
            });
        }
        let n = self.image_size / self.patch;
        Ok((n, n))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("model.{f}"), m));
        self.grid().map_err(|e| Error::config("model.patch", e.to_string()))?;
        for (name, v) in [
            ("d", self.d),
            ("d1", self.d1),
            ("d2", self.d2),
            ("queries", self.queries),
            ("encoder_ffn", self.encoder_ffn),
            ("lm_layers", self.lm_layers),
            ("lm_ffn", self.lm_ffn),
            ("decoder_layers", self.decoder_layers),
            ("decoder_ffn", self.decoder_ffn),
        ] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        for (name, heads, width) in [
            ("encoder_heads", self.encoder_heads, self.d2),
            ("lm_heads", self.lm_heads, self.d1),
            ("decoder_heads", self.decoder_heads, self.d2),
        ] {
            if heads == 0 || width % heads != 0 {
                return bad(name, "must be positive and divide the layer width");
            }
        }
        if self.box_layers == 0 {
            return bad("box_layers", "must be positive");
        }
        let (h, w) = self.grid()?;
        crate::encoder::pooling_matrix(h, w, self.bins).map_err(|e| Error::config("model.bins", e.to_string()))?;
        if self.max_positions <= self.bins {
            return bad("max_positions", "must exceed the number of local tokens");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub lm: Lm,
    pub decoder: Decoder,
}

/// Visual tokens of one image on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Local tokens, absent when the model runs without them.
    pub z: Option<Var>,
    pub c: Var,
}

/// One `[MASK]` answer: ranked names, latent and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClozeAnswer {
    pub mask_index: usize,
    pub fill: MaskFill,
    /// Candidate words matching `fill.candidates`.
    pub names: Vec<String>,
    pub detection: DetectionOutput,
}

/// Generated text with boxes for the tokens judged to be object words.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub decode: DecodeResult,
    pub detections: Vec<DetectionOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvAnswer {
    pub class: String,
    pub present: bool,
    pub p_yes: f64,
    pub detection: Option<DetectionOutput>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::with_init(config.init);
        let encoder = Encoder::new(&mut store, &config, rng)?;
        let lm = Lm::new(&mut store, &config, vocab.len(), rng)?;
        let decoder = Decoder::new(&mut store, &config, rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            lm,
            decoder,
        })
    }

    /// Freezes or unfreezes every language-model parameter.
    pub fn set_lm_frozen(&mut self, frozen: bool) -> usize {
        self.store.set_frozen_prefix("lm.", frozen)
    }

    pub fn encode(&self, g: &mut Graph, image: &Image) -> Result<Encoded> {
        let feats = self.encoder.extract_features(g, image)?;
        let z = if self.config.local_tokens {
            Some(self.encoder.local_tokens(g, &feats, self.config.bins)?)
        } else {
            None
        };
        let c = self.encoder.full_tokens(g, &feats)?;
        Ok(Encoded { z, c })
    }

    fn detect(&self, g: &mut Graph, c: Var, conds: &[(String, usize, crate::numerics::Tensor)]) -> Result<Vec<DetectionOutput>> {
        let latents = conds
            .iter()
            .map(|(_, _, e)| latent_row(g, e))
            .collect::<Result<Vec<_>>>()?;
        let outs = self.decoder.detect_for_conditions(g, c, &latents)?;
        outs.iter()
            .zip(conds)
            .map(|(o, (name, pos, _))| DetectionOutput::from_heads(g, o, name, *pos))
            .collect()
    }

    /// Fills every `[MASK]` in `masked` and detects boxes for each, using the
    /// mask's latent (shared by all of its candidate names).
    pub fn cloze(&self, image: &Image, masked: &[TokenId], k: usize) -> Result<Vec<ClozeAnswer>> {
        if !masked.contains(&MASK) {
            return Err(Error::NoMask);
        }
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode(&mut g, image)?;
        let prefix = self.lm.build_prefix(&mut g, Task::Cloze, enc.z, masked, &self.vocab)?;
        let fills = self.lm.cloze_fill(&mut g, &prefix, &self.vocab, k.max(1))?;
        let conds: Vec<_> = fills
            .iter()
            .map(|f| {
                let top = self.vocab.token(f.candidates[0].0).map(str::to_string);
                top.map(|t| (t, f.position, f.latent.clone()))
            })
            .collect::<Result<_>>()?;
        let dets = self.detect(&mut g, enc.c, &conds)?;
        fills
            .into_iter()
            .zip(dets)
            .enumerate()
            .map(|(m, (fill, detection))| {
                let names = fill
                    .candidates
                    .iter()
                    .map(|(t, _)| self.vocab.token(*t).map(str::to_string))
                    .collect::<Result<_>>()?;
                Ok(ClozeAnswer {
                    mask_index: m,
                    fill,
                    names,
                    detection,
                })
            })
            .collect()
    }

    fn generate_with_boxes(
        &self,
        image: &Image,
        task: Task,
        text: &[TokenId],
        max_len: usize,
        threshold: f64,
    ) -> Result<Generation> {
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode(&mut g, image)?;
        let prefix = self.lm.build_prefix(&mut g, task, enc.z, text, &self.vocab)?;
        let decode = self.lm.generate(&mut g, &prefix, max_len)?;
        let conds: Vec<_> = noun_positions(&decode, threshold)
            .into_iter()
            .map(|i| {
                let word = self.vocab.token(decode.tokens[i])?.to_string();
                Ok((word, i, decode.latents[i].clone()))
            })
            .collect::<Result<_>>()?;
        let detections = self.detect(&mut g, enc.c, &conds)?;
        Ok(Generation {
            text: self.vocab.detokenize(&decode.tokens)?,
            decode,
            detections,
        })
    }

    /// Caption after `a photo of`, with boxes for generated object words.
    pub fn caption(&self, image: &Image, max_len: usize, threshold: f64) -> Result<Generation> {
        self.generate_with_boxes(image, Task::Caption, &[], max_len, threshold)
    }

    /// Answer to `question: <history and question> answer:`.
    pub fn qa(&self, image: &Image, question: &[TokenId], max_len: usize, threshold: f64) -> Result<Generation> {
        self.generate_with_boxes(image, Task::Qa, question, max_len, threshold)
    }

    /// Presence question per class; a "yes" conditions the decoder on the
    /// class token's latent.
    pub fn ov(&self, image: &Image, classes: &[String]) -> Result<Vec<OvAnswer>> {
        if classes.is_empty() {
            return Ok(Vec::new());
        }
        let yes = self.vocab.id("yes").ok_or_else(|| Error::OutOfVocabulary(vec!["yes".into()]))?;
        let no = self.vocab.id("no").ok_or_else(|| Error::OutOfVocabulary(vec!["no".into()]))?;
        let mut g = Graph::with_params(&self.store);
        let enc = self.encode(&mut g, image)?;
        let mut out = Vec::with_capacity(classes.len());
        for class in classes {
            let question = self.vocab.tokenize(&format!("does the {class} appear in this picture?"))?;
            let prefix = self.lm.build_prefix(&mut g, Task::Ov, enc.z, &question, &self.vocab)?;
            let lm_out = self.lm.forward(&mut g, &prefix)?;
            let last = prefix.ids.len() - 1;
            let logits = g.value(lm_out.logits).row(last);
            let (ly, ln) = (logits[yes], logits[no]);
            let p_yes = 1.0 / (1.0 + (ln - ly).exp());
            let present = ly > ln;
            let detection = if present {
                let e = crate::numerics::Tensor::new(
                    &[self.config.d1],
                    g.value(lm_out.hidden).row(OV_CLASS_POSITION).to_vec(),
                )?;
                self.detect(&mut g, enc.c, &[(class.clone(), OV_CLASS_POSITION, e)])?.pop()
            } else {
                None
            };
            out.push(OvAnswer {
                class: class.clone(),
                present,
                p_yes,
                detection,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GrammarConfig;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 24,
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
            lm_ffn: 32,
            decoder_layers: 1,
            decoder_heads: 2,
            decoder_ffn: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().grid().unwrap(), (8, 8));
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let c = ModelConfig {
            bins: 8,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.bins"));
        let c = ModelConfig {
            lm_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.lm_heads"));
    }

    #[test]
    fn inference_entry_points_run() {
        let vocab = GrammarConfig::default().vocabulary().unwrap();
        let m = Model::new(tiny(), vocab.clone(), &mut Rng::new(0)).unwrap();
        let img = Image::black(24, 24);
        let masked = vocab.tokenize("at left a [MASK] and at right a [MASK]").unwrap();
        let ans = m.cloze(&img, &masked, 5).unwrap();
        assert_eq!(ans.len(), 2);
        assert_eq!(ans[1].mask_index, 1);
        assert_eq!(ans[0].detection.boxes.len(), 4);
        assert!(matches!(m.cloze(&img, &masked[..3], 5), Err(Error::NoMask)));
        let cap = m.caption(&img, 5, 0.5).unwrap();
        assert!(cap.decode.tokens.len() <= 5);
        for d in &cap.detections {
            assert!(vocab.id(&d.condition).is_some());
        }
        let ov = m.ov(&img, &["cup".to_string()]).unwrap();
        assert_eq!(ov.len(), 1);
        assert_eq!(ov[0].present, ov[0].detection.is_some());
        assert!(m.ov(&img, &[]).unwrap().is_empty());
    }

    #[test]
    fn ablated_model_has_no_local_tokens() {
        let vocab = GrammarConfig::default().vocabulary().unwrap();
        let cfg = ModelConfig {
            local_tokens: false,
            ..tiny()
        };
        let m = Model::new(cfg, vocab, &mut Rng::new(0)).unwrap();
        let mut g = Graph::with_params(&m.store);
        let enc = m.encode(&mut g, &Image::black(24, 24)).unwrap();
        assert!(enc.z.is_none());
    }
}
