//! Command-line verbs: `synth`, `train`, `eval`, `cloze`, `caption`, `qa`,
//! `ov`, plus `config` to print the resolved configuration.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{code_stats, generate_synthetic, load_code, save_code, CodeSample, Image, Vocabulary};
use crate::decoder::DetectionOutput;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::numerics::Rng;
use crate::training::{load_checkpoint, save_checkpoint, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Parser)]
#[command(name = "ctxdet", version, about = "Contextual object detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct ImageArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image whose size matches the model input.
    #[arg(long)]
    image: PathBuf,
    /// Write a copy of the image with the best box of each condition drawn.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/val/test splits in CODE format.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run without local visual tokens in the prefix.
        #[arg(long)]
        no_local_tokens: bool,
        #[arg(long)]
        freeze_lm: bool,
    },
    /// Evaluate a checkpoint on a CODE split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory name under the data directory.
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fill the [MASK] words of a caption and locate each.
    Cloze {
        #[command(flatten)]
        img: ImageArgs,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0.05)]
        score_floor: f64,
    },
    /// Caption an image and locate the generated object words.
    Caption {
        #[command(flatten)]
        img: ImageArgs,
        #[arg(long, default_value_t = 24)]
        max_len: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Answer a question about an image and locate the answered objects.
    Qa {
        #[command(flatten)]
        img: ImageArgs,
        #[arg(long)]
        question: String,
        /// Earlier dialogue turns, prepended in order.
        #[arg(long)]
        history: Vec<String>,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Ask whether each class appears and locate the present ones.
    Ov {
        #[command(flatten)]
        img: ImageArgs,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::NoMask | Error::OutOfVocabulary(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the verb, and returns
/// the process exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(c: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(c.config.as_deref(), &c.set)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth { cfg } => cmd_synth(&load_config(&cfg)?, out),
        Command::Train {
            cfg,
            resume,
            no_local_tokens,
            freeze_lm,
        } => {
            let mut c = load_config(&cfg)?;
            if no_local_tokens {
                c.model.local_tokens = false;
            }
            if freeze_lm {
                c.train.freeze_lm = true;
            }
            cmd_train(&c, resume.as_deref(), out)
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            report,
        } => {
            let c = load_config(&cfg)?;
            let r = cmd_eval(&c, &checkpoint, &split)?;
            if let Some(p) = report {
                std::fs::write(&p, r.to_json()?).map_err(io_err(&p))?;
            }
            emit(out, r.to_table().trim_end())
        }
        Command::Cloze {
            img,
            caption,
            top_k,
            score_floor,
        } => cmd_cloze(&img, &caption, top_k, score_floor, out),
        Command::Caption {
            img,
            max_len,
            threshold,
        } => {
            let (model, image) = open(&img)?;
            let g = model.caption(&image, max_len, threshold)?;
            report_generation(&model, &image, &img, &g, out)
        }
        Command::Qa {
            img,
            question,
            history,
            max_len,
            threshold,
        } => {
            let (model, image) = open(&img)?;
            let mut text = history.join(" ");
            text.push(' ');
            text.push_str(&question);
            let ids = model.vocab.tokenize(text.trim())?;
            let g = model.qa(&image, &ids, max_len, threshold)?;
            report_generation(&model, &image, &img, &g, out)
        }
        Command::Ov { img, classes } => cmd_ov(&img, &classes, out),
        Command::Config { cfg } => emit(out, load_config(&cfg)?.to_toml()?.trim_end()),
    }
}

/// Writes splits, their PNG rasters and the shared vocabulary.
pub fn write_corpus(cfg: &RunConfig) -> Result<Vec<(String, Vec<CodeSample>)>> {
    let grammar = &cfg.data.grammar;
    let vocab = grammar.vocabulary()?;
    let root = Path::new(&cfg.data.dir);
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    vocab.save(&root.join("vocab.json"))?;
    let base = Rng::new(cfg.data.seed);
    let mut splits = Vec::new();
    for (i, (name, count)) in SPLITS
        .iter()
        .zip([cfg.data.train, cfg.data.val, cfg.data.test])
        .enumerate()
    {
        let samples = generate_synthetic(&mut base.fork(i as u64), count, grammar)?;
        let dir = root.join(name);
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(io_err(&images))?;
        for s in &samples {
            if let Some(r) = &s.raster {
                r.save_png(&dir.join(&s.file_name))?;
            }
        }
        save_code(&samples, &dir.join("code.json"))?;
        splits.push((name.to_string(), samples));
    }
    Ok(splits)
}

fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    for (name, samples) in write_corpus(cfg)? {
        let st = code_stats(&samples);
        emit(
            out,
            format!(
                "split={name} images={} boxes={} unique_names={}",
                st.images, st.boxes, st.unique_names
            ),
        )?;
    }
    Ok(())
}

/// Loads a split with its rasters.
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<CodeSample>> {
    let dir = cfg.split_dir(split);
    let mut samples = load_code(&dir.join("code.json"))?;
    for s in &mut samples {
        s.raster = Some(s.load_raster(&dir)?);
    }
    Ok(samples)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    Vocabulary::load(&Path::new(&cfg.data.dir).join("vocab.json"))
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let train = load_split(cfg, "train")?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in &train {
        s.validate_with_vocab(&vocab)?;
    }
    let val = if cfg.run.eval_every > 0 && cfg.data.val > 0 {
        load_split(cfg, "val")?
    } else {
        Vec::new()
    };
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_checkpoint(p)?;
            t.train.steps = cfg.train.steps;
            t
        }
        None => {
            let model = Model::new(cfg.model.clone(), vocab, &mut Rng::new(cfg.train.seed))?;
            Trainer::new(model, cfg.train.clone(), cfg.loss.clone())?
        }
    };
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt = dir.join("model.ckpt");
    let log_path = dir.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    trainer.run(&train, |t, r| {
        let line = r.log_line();
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        emit(out, &line)?;
        let every = |n: u64| n > 0 && r.step % n == 0;
        if every(cfg.run.eval_every) && !val.is_empty() {
            let e = evaluate(&t.model, &val, &cfg.eval)?;
            let line = format!(
                "eval step={} acc1={} acc5={} ap1={} ap5={}",
                r.step, e.acc1, e.acc5, e.ap1, e.ap5
            );
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
            emit(out, &line)?;
        }
        if every(cfg.run.checkpoint_every) {
            save_checkpoint(t, &ckpt)?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer, &ckpt)?;
    emit(out, format!("checkpoint {}", ckpt.display()))
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<EvalReport> {
    let trainer = load_checkpoint(checkpoint)?;
    let samples = load_split(cfg, split)?;
    evaluate(&trainer.model, &samples, &cfg.eval)
}

fn open(img: &ImageArgs) -> Result<(Model, Image)> {
    let model = load_checkpoint(&img.checkpoint)?.model;
    let image = Image::load_png(&img.image)?;
    Ok((model, image))
}

fn pixel_corners(image: &Image, d: &DetectionOutput, q: usize) -> [f64; 4] {
    let [x0, y0, x1, y1] = d.boxes[q].clamped().to_corners();
    let (w, h) = (image.width() as f64, image.height() as f64);
    [x0 * w, y0 * h, x1 * w, y1 * h]
}

fn fmt_box(c: [f64; 4]) -> String {
    format!("[{:.1}, {:.1}, {:.1}, {:.1}]", c[0], c[1], c[2], c[3])
}

const DUMP_COLORS: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];

fn dump(image: &Image, img: &ImageArgs, dets: &[&DetectionOutput]) -> Result<()> {
    let Some(path) = &img.dump else { return Ok(()) };
    let mut canvas = image.clone();
    for (i, d) in dets.iter().enumerate() {
        canvas.draw_rect(pixel_corners(image, d, d.best()), DUMP_COLORS[i % DUMP_COLORS.len()]);
    }
    canvas.save_png(path)
}

fn cmd_cloze(img: &ImageArgs, caption: &str, top_k: usize, floor: f64, out: &mut dyn Write) -> Result<()> {
    let (model, image) = open(img)?;
    let ids = model.vocab.tokenize(caption)?;
    let answers = model.cloze(&image, &ids, top_k.max(1))?;
    for a in &answers {
        let names: Vec<String> = a
            .names
            .iter()
            .zip(&a.fill.candidates)
            .map(|(n, (_, p))| format!("{n}:{p:.4}"))
            .collect();
        emit(out, format!("mask {} names {}", a.mask_index, names.join(" ")))?;
        let top_p = a.fill.candidates[0].1;
        let mut qs: Vec<usize> = (0..a.detection.boxes.len()).collect();
        qs.sort_by(|&x, &y| a.detection.p_matched(y).total_cmp(&a.detection.p_matched(x)));
        for q in qs {
            let score = a.detection.p_matched(q) * top_p;
            if score >= floor {
                emit(
                    out,
                    format!(
                        "mask {} box {} score {:.4}",
                        a.mask_index,
                        fmt_box(pixel_corners(&image, &a.detection, q)),
                        score
                    ),
                )?;
            }
        }
    }
    dump(&image, img, &answers.iter().map(|a| &a.detection).collect::<Vec<_>>())
}

fn report_generation(
    model: &Model,
    image: &Image,
    img: &ImageArgs,
    g: &crate::model::Generation,
    out: &mut dyn Write,
) -> Result<()> {
    emit(out, format!("text {}", g.text))?;
    emit(out, format!("eos {}", g.decode.hit_eos))?;
    for d in &g.detections {
        let q = d.best();
        emit(
            out,
            format!(
                "object {} position {} box {} p_matched {:.4}",
                d.condition,
                d.position,
                fmt_box(pixel_corners(image, d, q)),
                d.p_matched(q)
            ),
        )?;
    }
    let _ = model;
    dump(image, img, &g.detections.iter().collect::<Vec<_>>())
}

fn cmd_ov(img: &ImageArgs, classes: &[String], out: &mut dyn Write) -> Result<()> {
    let (model, image) = open(img)?;
    let classes: Vec<String> = classes.iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
    let answers = model.ov(&image, &classes)?;
    for a in &answers {
        let verdict = if a.present { "yes" } else { "no" };
        match &a.detection {
            Some(d) => {
                let q = d.best();
                emit(
                    out,
                    format!(
                        "class {} {verdict} p_yes {:.4} box {} p_matched {:.4}",
                        a.class,
                        a.p_yes,
                        fmt_box(pixel_corners(&image, d, q)),
                        d.p_matched(q)
                    ),
                )?;
            }
            None => emit(out, format!("class {} {verdict} p_yes {:.4}", a.class, a.p_yes))?,
        }
    }
    dump(&image, img, &answers.iter().filter_map(|a| a.detection.as_ref()).collect::<Vec<_>>())
}
