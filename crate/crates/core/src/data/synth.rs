//! Synthetic scenes: colored shapes in a row or column, each shape/color pair
//! named by its own noun, with a caption that names objects by their side.

use serde::{Deserialize, Serialize};

use super::code::{CodeAnnotation, CodeSample};
use super::image::Image;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
    ];

    /// Inside test at normalized cell coordinates `(u, v)`, `v` pointing down.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => du * du + dv * dv <= 0.25,
            ShapeKind::Triangle => du.abs() <= v / 2.0,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl ColorKind {
    pub const ALL: [ColorKind; 6] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::Cyan,
        ColorKind::Magenta,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorKind::Red => [1.0, 0.0, 0.0],
            ColorKind::Green => [0.0, 1.0, 0.0],
            ColorKind::Blue => [0.0, 0.0, 1.0],
            ColorKind::Yellow => [1.0, 1.0, 0.0],
            ColorKind::Cyan => [0.0, 1.0, 1.0],
            ColorKind::Magenta => [1.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounSpec {
    pub word: String,
    pub shape: ShapeKind,
    pub color: ColorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Row,
    Column,
}

const DEFAULT_NOUNS: [&str; 30] = [
    "apple", "ball", "cup", "drum", "egg", "fan", "gem", "hat", "jar", "kite", "lamp", "mug", "nut",
    "orb", "pan", "quilt", "ring", "sock", "tile", "urn", "vase", "wand", "yarn", "bell", "coin",
    "dice", "flag", "horn", "key", "leaf",
];

/// Every non-noun word used by captions and task prompts.
pub const GRAMMAR_WORDS: [&str; 27] = [
    "at", "left", "right", "top", "bottom", "center", "a", "and", ",", "an", "empty", "picture",
    "photo", "of", "question", ":", "what", "is", "?", "answer", "does", "the", "appear", "in",
    "this", "yes", "no",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub nouns: Vec<NounSpec>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Maximum offset in pixels from the cell center along each axis.
    pub jitter: usize,
    pub layouts: Vec<Layout>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let nouns = DEFAULT_NOUNS
            .iter()
            .enumerate()
            .map(|(i, w)| NounSpec {
                word: (*w).to_string(),
                shape: ShapeKind::ALL[i % ShapeKind::ALL.len()],
                color: ColorKind::ALL[i / ShapeKind::ALL.len()],
            })
            .collect();
        Self {
            canvas: 48,
            nouns,
            min_objects: 1,
            max_objects: 2,
            min_size: 14,
            max_size: 14,
            jitter: 1,
            layouts: vec![Layout::Row, Layout::Column],
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: String| Err(Error::config(format!("data.grammar.{f}"), m));
        if self.nouns.is_empty() {
            return field("nouns", "at least one noun is required".into());
        }
        for (i, a) in self.nouns.iter().enumerate() {
            for b in &self.nouns[i + 1..] {
                if a.word == b.word || (a.shape, a.color) == (b.shape, b.color) {
                    return field("nouns", format!("`{}` and `{}` are not distinguishable", a.word, b.word));
                }
            }
            if GRAMMAR_WORDS.contains(&a.word.as_str()) {
                return field("nouns", format!("`{}` collides with a grammar word", a.word));
            }
        }
        if self.min_objects > self.max_objects || self.max_objects > 3 {
            return field("max_objects", "need min_objects <= max_objects <= 3".into());
        }
        if self.max_objects > self.nouns.len() {
            return field("max_objects", "more objects than distinct nouns".into());
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return field("min_size", "need 3 <= min_size <= max_size".into());
        }
        if self.layouts.is_empty() {
            return field("layouts", "at least one layout is required".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let nouns: Vec<&str> = self.nouns.iter().map(|n| n.word.as_str()).collect();
        Vocabulary::new(&nouns, &GRAMMAR_WORDS)
    }

    pub fn noun(&self, word: &str) -> Option<&NounSpec> {
        self.nouns.iter().find(|n| n.word == word)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub noun: NounSpec,
    /// Side word used in the caption (`left`, `center`, ...).
    pub position: &'static str,
    pub size: usize,
    /// Top-left corner of the object's cell square in pixels.
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<PlacedObject>,
    pub raster: Image,
    pub caption: String,
    pub annotations: Vec<CodeAnnotation>,
}

fn side_words(layout: Layout, count: usize) -> &'static [&'static str] {
    match (layout, count) {
        (_, 1) => &["center"],
        (Layout::Row, 2) => &["left", "right"],
        (Layout::Column, 2) => &["top", "bottom"],
        (Layout::Row, _) => &["left", "center", "right"],
        (Layout::Column, _) => &["top", "center", "bottom"],
    }
}

/// Offset of an object of extent `size` inside `[lo, hi)`: centered, then
/// jittered, then clamped into the interval.
fn place(rng: &mut Rng, lo: usize, hi: usize, size: usize, jitter: usize) -> usize {
    let center = lo + (hi - lo - size) / 2;
    let off = (center + rng.range_inclusive(0, 2 * jitter)) as i64 - jitter as i64;
    off.clamp(lo as i64, (hi - size) as i64) as usize
}

/// Draws one scene with `count` objects.
pub fn generate_scene(rng: &mut Rng, cfg: &GrammarConfig, count: usize, image_id: u64) -> Result<SceneSpec> {
    let n = cfg.canvas;
    let fail = |msg: String| Error::Placement {
        count,
        width: n,
        height: n,
        msg,
    };
    if count > 3 {
        return Err(fail("captions describe at most three objects".into()));
    }
    if count > cfg.nouns.len() {
        return Err(fail("not enough distinct nouns".into()));
    }
    let cell = if count <= 1 { n } else { n / count - 1 };
    if cfg.min_size > cell || cfg.min_size > n {
        return Err(fail(format!("objects of {} px do not fit cells of {cell} px", cfg.min_size)));
    }
    let layout = cfg.layouts[rng.below(cfg.layouts.len())];
    let nouns = rng.choose_distinct(cfg.nouns.len(), count);
    let sides = side_words(layout, count);
    let mut objects = Vec::with_capacity(count);
    for (slot, &ni) in nouns.iter().enumerate() {
        // Non-final cells give up their last column so neighbours never touch.
        let (lo, mut hi) = (slot * n / count, (slot + 1) * n / count);
        if slot + 1 < count {
            hi -= 1;
        }
        let max_size = cfg.max_size.min(hi - lo);
        let size = rng.range_inclusive(cfg.min_size, max_size);
        let along = place(rng, lo, hi, size, cfg.jitter);
        let across = place(rng, 0, n, size, cfg.jitter);
        let (x, y) = match layout {
            Layout::Row => (along, across),
            Layout::Column => (across, along),
        };
        objects.push(PlacedObject {
            noun: cfg.nouns[ni].clone(),
            position: sides[slot],
            size,
            x,
            y,
        });
    }

    let mut raster = Image::black(n, n);
    let mut boxes = Vec::with_capacity(count);
    for o in &objects {
        let rgb = o.noun.color.rgb();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..o.size {
            for dx in 0..o.size {
                let u = (dx as f64 + 0.5) / o.size as f64;
                let v = (dy as f64 + 0.5) / o.size as f64;
                if o.noun.shape.covers(u, v) {
                    let (px, py) = (o.x + dx, o.y + dy);
                    raster.set_pixel(py, px, rgb);
                    x0 = x0.min(px);
                    y0 = y0.min(py);
                    x1 = x1.max(px + 1);
                    y1 = y1.max(py + 1);
                }
            }
        }
        boxes.push([x0 as f64, y0 as f64, x1 as f64, y1 as f64]);
    }

    let (caption, spans) = caption_for(&objects);
    let annotations = objects
        .iter()
        .zip(boxes)
        .zip(spans)
        .enumerate()
        .map(|(i, ((o, bbox), start))| CodeAnnotation {
            id: image_id * 4 + i as u64,
            bbox,
            name: o.noun.word.clone(),
            token_span: (start, start + 1),
            mask_index: i,
        })
        .collect();
    Ok(SceneSpec {
        objects,
        raster,
        caption,
        annotations,
    })
}

/// Caption text and the token index of each object's noun.
fn caption_for(objects: &[PlacedObject]) -> (String, Vec<usize>) {
    if objects.is_empty() {
        return ("an empty picture".into(), Vec::new());
    }
    let mut words: Vec<&str> = Vec::new();
    let mut spans = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            words.push(if i + 1 == objects.len() { "and" } else { "," });
        }
        words.extend(["at", o.position, "a"]);
        spans.push(words.len());
        words.push(&o.noun.word);
    }
    let mut text = String::new();
    for w in &words {
        if !text.is_empty() && *w != "," {
            text.push(' ');
        }
        text.push_str(w);
    }
    (text, spans)
}

/// Generates `count` scenes with image ids `0..count`.
pub fn generate_synthetic(rng: &mut Rng, count: usize, cfg: &GrammarConfig) -> Result<Vec<CodeSample>> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    (0..count)
        .map(|i| {
            let k = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
            let scene = generate_scene(rng, cfg, k, i as u64)?;
            let token_ids = vocab.tokenize(&scene.caption)?;
            Ok(CodeSample {
                image_id: i as u64,
                file_name: format!("images/{i:05}.png"),
                height: cfg.canvas,
                width: cfg.canvas,
                raster: Some(scene.raster),
                caption: scene.caption,
                token_ids,
                annotations: scene.annotations,
            })
        })
        .collect()
}
