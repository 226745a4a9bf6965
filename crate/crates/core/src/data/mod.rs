//! CODE-format persistence, the tokenizer, cloze masking, task prompts and the
//! synthetic scene generator.

mod code;
mod image;
mod prompts;
mod synth;
mod vocab;

pub use code::{code_stats, load_code, make_cloze, parse_code, save_code, Cloze, CodeAnnotation, CodeSample, CodeStats};
pub use image::Image;
pub use prompts::*;
pub use synth::{
    generate_scene, generate_synthetic, ColorKind, GrammarConfig, Layout, NounSpec, PlacedObject, SceneSpec,
    ShapeKind, GRAMMAR_WORDS,
};
pub use vocab::{TokenId, Vocabulary, EOS, EOS_TOKEN, MASK, MASK_TOKEN, PAD, PAD_TOKEN};
