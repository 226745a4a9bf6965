//! CODE-format records: images, captions with token ids, and name-span
//! annotations with explicit mask ordinals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::vocab::{TokenId, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct CodeAnnotation {
    pub id: u64,
    /// Absolute pixel corners `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    pub name: String,
    /// Half-open range `[start, end)` into the caption's token ids.
    pub token_span: (usize, usize),
    pub mask_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeSample {
    pub image_id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
    /// In-memory raster for generated samples; file-backed samples leave this empty.
    pub raster: Option<Image>,
    pub caption: String,
    pub token_ids: Vec<TokenId>,
    pub annotations: Vec<CodeAnnotation>,
}

/// A caption with each annotated span collapsed to one `[MASK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cloze {
    pub ids: Vec<TokenId>,
    /// Position of each `[MASK]` in `ids`, indexed by mask ordinal.
    pub positions: Vec<usize>,
    pub answers: Vec<String>,
    /// Original span covered by each mask.
    pub spans: Vec<(usize, usize)>,
}

impl CodeAnnotation {
    /// Box in normalized center-size form.
    pub fn normalized_box(&self, width: usize, height: usize) -> Result<BBox> {
        let (w, h) = (width as f64, height as f64);
        let [x0, y0, x1, y1] = self.bbox;
        Ok(BBox::corners(x0 / w, y0 / h, x1 / w, y1 / h)?.convert(crate::geometry::BoxForm::CenterSize))
    }
}

impl CodeSample {
    fn invalid(&self, msg: impl Into<String>) -> Error {
        Error::InvalidSample {
            sample: self.image_id,
            msg: msg.into(),
        }
    }

    /// Structural checks that need no vocabulary.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(self.invalid("image has zero extent"));
        }
        let mut spans: BTreeMap<(usize, usize), (usize, &str)> = BTreeMap::new();
        for a in &self.annotations {
            let (s, e) = a.token_span;
            if s >= e || e > self.token_ids.len() {
                return Err(self.invalid(format!(
                    "annotation {}: token span [{s}, {e}) out of range for {} tokens",
                    a.id,
                    self.token_ids.len()
                )));
            }
            let [x0, y0, x1, y1] = a.bbox;
            let inside = a.bbox.iter().all(|v| v.is_finite())
                && 0.0 <= x0
                && x0 <= x1
                && x1 <= self.width as f64
                && 0.0 <= y0
                && y0 <= y1
                && y1 <= self.height as f64;
            if !inside {
                return Err(self.invalid(format!("annotation {}: malformed box {:?}", a.id, a.bbox)));
            }
            match spans.get(&a.token_span) {
                Some(&(m, name)) if m != a.mask_index || name != a.name => {
                    return Err(self.invalid(format!(
                        "annotation {}: shares span [{s}, {e}) with a different mask index or name",
                        a.id
                    )))
                }
                _ => {
                    spans.insert(a.token_span, (a.mask_index, &a.name));
                }
            }
        }
        for (ordinal, (span, (m, _))) in spans.iter().enumerate() {
            if *m != ordinal {
                return Err(self.invalid(format!(
                    "span {span:?} has mask index {m}, expected {ordinal} from caption order"
                )));
            }
        }
        Ok(())
    }

    /// Checks that token ids decode to the caption and each span to its name.
    pub fn validate_with_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        self.validate()?;
        let text = vocab.detokenize(&self.token_ids)?;
        if text != self.caption {
            return Err(self.invalid(format!("token ids decode to {text:?}, caption is {:?}", self.caption)));
        }
        for a in &self.annotations {
            let span = vocab.detokenize(&self.token_ids[a.token_span.0..a.token_span.1])?;
            if span != a.name {
                return Err(self.invalid(format!("annotation {}: span decodes to {span:?}, name is {:?}", a.id, a.name)));
            }
        }
        Ok(())
    }

    /// Raster for this sample, reading `file_name` relative to `base` when
    /// the sample is file-backed.
    pub fn load_raster(&self, base: &Path) -> Result<Image> {
        if let Some(img) = &self.raster {
            return Ok(img.clone());
        }
        let img = Image::load_png(&base.join(&self.file_name))?;
        if img.height() != self.height || img.width() != self.width {
            return Err(self.invalid(format!(
                "image file is {}x{}, record says {}x{}",
                img.height(),
                img.width(),
                self.height,
                self.width
            )));
        }
        Ok(img)
    }

    /// Horizontal mirror of the raster and boxes; caption words are passed
    /// through `swap` so that side words can follow the flip.
    pub fn hflip(&self, swap: impl Fn(TokenId) -> TokenId, vocab: &Vocabulary) -> Result<CodeSample> {
        let mut out = self.clone();
        out.raster = self.raster.as_ref().map(Image::hflip);
        let w = self.width as f64;
        for a in &mut out.annotations {
            let [x0, y0, x1, y1] = a.bbox;
            a.bbox = [w - x1, y0, w - x0, y1];
        }
        out.token_ids = self.token_ids.iter().map(|&t| swap(t)).collect();
        out.caption = vocab.detokenize(&out.token_ids)?;
        Ok(out)
    }
}

/// Replaces every annotated span with a single `[MASK]`.
pub fn make_cloze(sample: &CodeSample) -> Result<Cloze> {
    let mut groups: BTreeMap<(usize, usize), &CodeAnnotation> = BTreeMap::new();
    for a in &sample.annotations {
        let (s, e) = a.token_span;
        if s >= e || e > sample.token_ids.len() {
            return Err(sample.invalid(format!("token span [{s}, {e}) out of range")));
        }
        groups.entry(a.token_span).or_insert(a);
    }
    let spans: Vec<(usize, usize)> = groups.keys().copied().collect();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::OverlappingSpans {
                sample: sample.image_id,
                a: pair[0],
                b: pair[1],
            });
        }
    }
    let mut ids = Vec::with_capacity(sample.token_ids.len());
    let mut positions = Vec::with_capacity(spans.len());
    let mut answers = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for (ordinal, (span, ann)) in groups.iter().enumerate() {
        if ann.mask_index != ordinal {
            return Err(sample.invalid(format!(
                "annotation {} has mask index {}, caption order gives {ordinal}",
                ann.id, ann.mask_index
            )));
        }
        ids.extend_from_slice(&sample.token_ids[cursor..span.0]);
        positions.push(ids.len());
        ids.push(MASK);
        answers.push(ann.name.clone());
        cursor = span.1;
    }
    ids.extend_from_slice(&sample.token_ids[cursor..]);
    Ok(Cloze {
        ids,
        positions,
        answers,
        spans,
    })
}

/// Corpus counts in the style of a dataset card.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CodeStats {
    pub images: u64,
    pub boxes: u64,
    pub unique_names: u64,
}

pub fn code_stats(samples: &[CodeSample]) -> CodeStats {
    let names: BTreeSet<&str> = samples
        .iter()
        .flat_map(|s| s.annotations.iter().map(|a| a.name.as_str()))
        .collect();
    CodeStats {
        images: samples.len() as u64,
        boxes: samples.iter().map(|s| s.annotations.len() as u64).sum(),
        unique_names: names.len() as u64,
    }
}

// On-disk layout. Field order here is the key order written by `save_code`.

#[derive(Serialize)]
struct FileOut<'a> {
    images: Vec<ImageOut<'a>>,
    annotations: Vec<AnnotationOut<'a>>,
    captions: Vec<CaptionOut<'a>>,
}

#[derive(Serialize)]
struct ImageOut<'a> {
    id: u64,
    file_name: &'a str,
    height: usize,
    width: usize,
}

#[derive(Serialize)]
struct AnnotationOut<'a> {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    name: &'a str,
    token_ids: [usize; 2],
    mask_index: usize,
}

#[derive(Serialize)]
struct CaptionOut<'a> {
    image_id: u64,
    caption: &'a str,
    token_ids: &'a [TokenId],
}

#[derive(Deserialize)]
struct FileIn {
    images: Option<Vec<ImageIn>>,
    annotations: Option<Vec<AnnotationIn>>,
    captions: Option<Vec<CaptionIn>>,
}

#[derive(Deserialize)]
struct ImageIn {
    id: Option<u64>,
    file_name: Option<String>,
    height: Option<usize>,
    width: Option<usize>,
}

#[derive(Deserialize)]
struct AnnotationIn {
    id: Option<u64>,
    image_id: Option<u64>,
    bbox: Option<Vec<f64>>,
    name: Option<String>,
    token_ids: Option<Vec<usize>>,
    mask_index: Option<usize>,
}

#[derive(Deserialize)]
struct CaptionIn {
    image_id: Option<u64>,
    caption: Option<String>,
    token_ids: Option<Vec<TokenId>>,
}

pub fn save_code(samples: &[CodeSample], path: &Path) -> Result<()> {
    let file = FileOut {
        images: samples
            .iter()
            .map(|s| ImageOut {
                id: s.image_id,
                file_name: &s.file_name,
                height: s.height,
                width: s.width,
            })
            .collect(),
        annotations: samples
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(move |a| AnnotationOut {
                    id: a.id,
                    image_id: s.image_id,
                    bbox: a.bbox,
                    name: &a.name,
                    token_ids: [a.token_span.0, a.token_span.1],
                    mask_index: a.mask_index,
                })
            })
            .collect(),
        captions: samples
            .iter()
            .map(|s| CaptionOut {
                image_id: s.image_id,
                caption: &s.caption,
                token_ids: &s.token_ids,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_code(path: &Path) -> Result<Vec<CodeSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_code(&text).map_err(|e| match e {
        Error::Json(j) => Error::Format {
            path: path.into(),
            msg: j.to_string(),
        },
        other => other,
    })
}

fn missing(sample: u64, what: &str) -> Error {
    Error::InvalidSample {
        sample,
        msg: format!("missing field `{what}`"),
    }
}

/// Parses CODE JSON text into validated samples.
pub fn parse_code(text: &str) -> Result<Vec<CodeSample>> {
    let file: FileIn = serde_json::from_str(text)?;
    let top = |f: &str| Error::InvalidSample {
        sample: 0,
        msg: format!("missing top-level array `{f}`"),
    };
    let images = file.images.ok_or_else(|| top("images"))?;
    let annotations = file.annotations.ok_or_else(|| top("annotations"))?;
    let captions = file.captions.ok_or_else(|| top("captions"))?;

    let mut samples = Vec::with_capacity(images.len());
    let mut by_id: HashMap<u64, usize> = HashMap::new();
    for (i, im) in images.into_iter().enumerate() {
        let id = im.id.ok_or_else(|| Error::InvalidSample {
            sample: i as u64,
            msg: format!("image entry #{i} is missing field `id`"),
        })?;
        let sample = CodeSample {
            image_id: id,
            file_name: im.file_name.ok_or_else(|| missing(id, "file_name"))?,
            height: im.height.ok_or_else(|| missing(id, "height"))?,
            width: im.width.ok_or_else(|| missing(id, "width"))?,
            raster: None,
            caption: String::new(),
            token_ids: Vec::new(),
            annotations: Vec::new(),
        };
        if by_id.insert(id, samples.len()).is_some() {
            return Err(Error::InvalidSample {
                sample: id,
                msg: "duplicate image id".into(),
            });
        }
        samples.push(sample);
    }

    let mut captioned = vec![false; samples.len()];
    for (i, c) in captions.into_iter().enumerate() {
        let id = c.image_id.ok_or_else(|| Error::InvalidSample {
            sample: i as u64,
            msg: format!("caption entry #{i} is missing field `image_id`"),
        })?;
        let &slot = by_id.get(&id).ok_or_else(|| Error::InvalidSample {
            sample: id,
            msg: "caption refers to an unknown image".into(),
        })?;
        if std::mem::replace(&mut captioned[slot], true) {
            return Err(Error::InvalidSample {
                sample: id,
                msg: "more than one caption".into(),
            });
        }
        samples[slot].caption = c.caption.ok_or_else(|| missing(id, "caption"))?;
        samples[slot].token_ids = c.token_ids.ok_or_else(|| missing(id, "token_ids"))?;
    }
    if let Some(slot) = captioned.iter().position(|c| !c) {
        return Err(missing(samples[slot].image_id, "caption"));
    }

    for (i, a) in annotations.into_iter().enumerate() {
        let image_id = a.image_id.ok_or_else(|| Error::InvalidSample {
            sample: i as u64,
            msg: format!("annotation entry #{i} is missing field `image_id`"),
        })?;
        let &slot = by_id.get(&image_id).ok_or_else(|| Error::InvalidSample {
            sample: image_id,
            msg: "annotation refers to an unknown image".into(),
        })?;
        let bbox = a.bbox.ok_or_else(|| missing(image_id, "bbox"))?;
        let bbox: [f64; 4] = bbox.try_into().map_err(|b: Vec<f64>| Error::InvalidSample {
            sample: image_id,
            msg: format!("malformed box with {} coordinates", b.len()),
        })?;
        let span = a.token_ids.ok_or_else(|| missing(image_id, "token_ids"))?;
        if span.len() != 2 {
            return Err(Error::InvalidSample {
                sample: image_id,
                msg: format!("annotation token_ids must be [start, end], got {span:?}"),
            });
        }
        samples[slot].annotations.push(CodeAnnotation {
            id: a.id.ok_or_else(|| missing(image_id, "id"))?,
            bbox,
            name: a.name.ok_or_else(|| missing(image_id, "name"))?,
            token_span: (span[0], span[1]),
            mask_index: a.mask_index.ok_or_else(|| missing(image_id, "mask_index"))?,
        });
    }
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            &["bride", "groom", "cake"],
            &["a", "and", "her", "kiss", "with", "their", "at", "wedding", "big"],
        )
        .unwrap()
    }

    fn sample(v: &Vocabulary) -> CodeSample {
        let caption = "a bride and her groom kiss with their big cake at their wedding";
        let ids = v.tokenize(caption).unwrap();
        let ann = |id, span: (usize, usize), m, name: &str| CodeAnnotation {
            id,
            bbox: [1.0, 2.0, 10.0, 20.0],
            name: name.into(),
            token_span: span,
            mask_index: m,
        };
        CodeSample {
            image_id: 7,
            file_name: "7.png".into(),
            height: 32,
            width: 32,
            raster: None,
            caption: caption.into(),
            token_ids: ids,
            annotations: vec![
                ann(1, (1, 2), 0, "bride"),
                ann(2, (4, 5), 1, "groom"),
                ann(3, (8, 10), 2, "big cake"),
            ],
        }
    }

    #[test]
    fn three_names_give_three_masks() {
        let v = vocab();
        let s = sample(&v);
        let c = make_cloze(&s).unwrap();
        assert_eq!(c.ids.iter().filter(|&&t| t == MASK).count(), 3);
        assert_eq!(c.answers, vec!["bride", "groom", "big cake"]);
        assert_eq!(
            v.detokenize(&c.ids).unwrap(),
            "a [MASK] and her [MASK] kiss with their [MASK] at their wedding"
        );
        for (m, &p) in c.positions.iter().enumerate() {
            assert_eq!(c.ids[p], MASK, "mask {m}");
        }
    }

    #[test]
    fn masked_length_matches_brute_force_reconstruction() {
        let v = vocab();
        let s = sample(&v);
        let c = make_cloze(&s).unwrap();
        let shrink: usize = c.spans.iter().map(|(a, b)| b - a - 1).sum();
        assert_eq!(c.ids.len(), s.token_ids.len() - shrink);
        // Re-expanding each mask with its original span recovers the caption.
        let mut rebuilt = Vec::new();
        let mut m = 0;
        for &t in &c.ids {
            if t == MASK {
                let (a, b) = c.spans[m];
                rebuilt.extend_from_slice(&s.token_ids[a..b]);
                m += 1;
            } else {
                rebuilt.push(t);
            }
        }
        assert_eq!(rebuilt, s.token_ids);
    }

    #[test]
    fn no_annotations_leaves_ids_unchanged() {
        let v = vocab();
        let mut s = sample(&v);
        s.annotations.clear();
        let c = make_cloze(&s).unwrap();
        assert_eq!(c.ids, s.token_ids);
        assert!(c.positions.is_empty());
    }

    #[test]
    fn overlapping_spans_rejected() {
        let v = vocab();
        let mut s = sample(&v);
        s.annotations[2].token_span = (4, 6);
        assert!(matches!(make_cloze(&s), Err(Error::OverlappingSpans { sample: 7, .. })));
    }

    #[test]
    fn shared_span_shares_mask() {
        let v = vocab();
        let mut s = sample(&v);
        let mut twin = s.annotations[1].clone();
        twin.id = 9;
        s.annotations.push(twin);
        s.validate().unwrap();
        assert_eq!(make_cloze(&s).unwrap().positions.len(), 3);
    }

    #[test]
    fn validate_with_vocab_checks_names() {
        let v = vocab();
        let mut s = sample(&v);
        s.validate_with_vocab(&v).unwrap();
        s.annotations[0].name = "groom".into();
        assert!(s.validate_with_vocab(&v).is_err());
    }

    #[test]
    fn mask_index_gap_rejected() {
        let v = vocab();
        let mut s = sample(&v);
        s.annotations[2].mask_index = 3;
        assert!(matches!(s.validate(), Err(Error::InvalidSample { sample: 7, .. })));
    }

    #[test]
    fn empty_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.json");
        save_code(&[], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["images"], serde_json::json!([]));
        assert_eq!(v["annotations"], serde_json::json!([]));
        assert_eq!(v["captions"], serde_json::json!([]));
        assert!(load_code(&p).unwrap().is_empty());
    }

    #[test]
    fn save_load_save_is_stable() {
        let v = vocab();
        let s = sample(&v);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_code(std::slice::from_ref(&s), &a).unwrap();
        let loaded = load_code(&a).unwrap();
        assert_eq!(loaded, vec![s]);
        save_code(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn key_order_is_stable() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        save_code(&[sample(&v)], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let pos = |k: &str| text.find(k).unwrap();
        assert!(pos("\"images\"") < pos("\"annotations\"") && pos("\"annotations\"") < pos("\"captions\""));
        assert!(pos("\"bbox\"") < pos("\"name\"") && pos("\"name\"") < pos("\"mask_index\""));
    }

    #[test]
    fn missing_field_names_the_sample() {
        let text = r#"{"images":[{"id":12,"file_name":"a.png","height":4,"width":4}],
            "annotations":[{"id":1,"image_id":12,"name":"x","token_ids":[0,1],"mask_index":0}],
            "captions":[{"image_id":12,"caption":"x","token_ids":[5]}]}"#;
        match parse_code(text) {
            Err(Error::InvalidSample { sample, msg }) => {
                assert_eq!(sample, 12);
                assert!(msg.contains("bbox"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn span_out_of_range_names_the_sample() {
        let text = r#"{"images":[{"id":3,"file_name":"a.png","height":4,"width":4}],
            "annotations":[{"id":1,"image_id":3,"bbox":[0,0,1,1],"name":"x","token_ids":[0,2],"mask_index":0}],
            "captions":[{"image_id":3,"caption":"x","token_ids":[5]}]}"#;
        assert!(matches!(parse_code(text), Err(Error::InvalidSample { sample: 3, .. })));
    }

    #[test]
    fn malformed_box_names_the_sample() {
        let text = r#"{"images":[{"id":4,"file_name":"a.png","height":4,"width":4}],
            "annotations":[{"id":1,"image_id":4,"bbox":[3,0,1,1],"name":"x","token_ids":[0,1],"mask_index":0}],
            "captions":[{"image_id":4,"caption":"x","token_ids":[5]}]}"#;
        assert!(matches!(parse_code(text), Err(Error::InvalidSample { sample: 4, .. })));
    }

    #[test]
    fn benchmark_scale_ids_are_representable() {
        let text = r#"{"images":[{"id":29781,"file_name":"a.png","height":4,"width":4}],
            "annotations":[{"id":665161,"image_id":29781,"bbox":[0,0,1,1],"name":"x","token_ids":[0,1],"mask_index":0}],
            "captions":[{"image_id":29781,"caption":"x","token_ids":[5]}]}"#;
        let s = parse_code(text).unwrap();
        assert_eq!(s[0].image_id, 29_781);
        assert_eq!(s[0].annotations[0].id, 665_161);
        let stats = CodeStats {
            images: 29_781,
            boxes: 665_161,
            unique_names: 10_346,
        };
        assert!(stats.boxes > stats.images);
    }

    #[test]
    fn stats_count_unique_names() {
        let v = vocab();
        let s = sample(&v);
        let st = code_stats(&[s.clone(), s]);
        assert_eq!((st.images, st.boxes, st.unique_names), (2, 6, 3));
    }
}
