//! `sed` command line: training, inference, evaluation, benchmarking and
//! synthetic dataset generation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sed_core::bench::{run_benchmark, time_prediction, BenchReport, TIMED_RUNS, WARMUP_RUNS};
use sed_core::cer::TopK;
use sed_core::config::Config;
use sed_core::data::{read_categories, synthetic_names, Dataset, SyntheticScenes};
use sed_core::encoder::ImageTensor;
use sed_core::io::checkpoint;
use sed_core::io::labels::{write_labels, LabelMap};
use sed_core::io::pnm::read_ppm;
use sed_core::metrics::{compute_miou, MIoUAccumulator};
use sed_core::model::Sed;
use sed_core::params::{ParamSet, Record};
use sed_core::text::{embed_texts, expand_prompts, read_templates, CategoryVocabulary, EmbeddingProvider, TextEmbeddings, DEFAULT_TEMPLATES};
use sed_core::train::Trainer;

/// Checkpoint record holding `[P, D_t]` of the embeddings used in training.
const META_RECORD: &str = "meta.embedding";
const CONFIG_FILE: &str = "config.json";
const FINAL_CHECKPOINT: &str = "model.sedc";
const LOSS_FILE: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "sed", version, about = "Open-vocabulary semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write checkpoints.
    Train(TrainArgs),
    /// Segment one image.
    Infer(InferArgs),
    /// mIoU of a checkpoint over a dataset directory.
    Eval(EvalArgs),
    /// Per-image timing with the configured category pruning.
    Bench(BenchArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
}

/// Settings shared by every model subcommand. Flags override values from
/// the config file.
#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-pixel top-k of category early rejection: an integer or `all`.
    #[arg(long, value_name = "K|all")]
    cer_k: Option<TopK>,
    /// Run every decoder layer on all categories.
    #[arg(long)]
    no_cer: bool,
    /// Depthwise kernel of the spatial aggregation stage (7, 9 or 11).
    #[arg(long)]
    kernel: Option<usize>,
    /// Decoder layers (1 to 3).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    no_class: bool,
    /// SEDE file of text embeddings, rows in category order.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, config and loss curve.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Side of the random square training crop.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the loss every this many iterations (0 = never).
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM image; extents must be multiples of 32.
    #[arg(long)]
    image: PathBuf,
    /// Category names, one per line.
    #[arg(long)]
    categories: PathBuf,
    /// Prompt templates, one per line; defaults to the built-in set.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Label map: PGM for up to 255 categories, SEDL above.
    #[arg(long)]
    out: PathBuf,
    /// Also write the timing report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = WARMUP_RUNS)]
    warmup: usize,
    #[arg(long, default_value_t = TIMED_RUNS)]
    runs: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// Square image side, a multiple of 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Vocabulary size written to categories.txt.
    #[arg(long, default_value_t = 4)]
    categories: usize,
    /// Categories that actually appear; defaults to all of them.
    #[arg(long)]
    present: Option<usize>,
    #[arg(long, default_value_t = 4)]
    templates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    }
}

/// Loads `--config`, else `fallback` when it exists, else defaults, then
/// applies the flag overrides.
fn resolve_config(o: &Overrides, fallback: Option<&Path>) -> Result<Config> {
    let mut cfg = match (&o.config, fallback) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) if p.exists() => Config::load(p)?,
        _ => Config::default(),
    };
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = o.cer_k {
        cfg.cer.enabled = true;
        cfg.cer.k = k;
    }
    if o.no_cer {
        cfg.cer.enabled = false;
    }
    if let Some(k) = o.kernel {
        cfg.model.decoder.fam.dw_kernel = k;
    }
    if let Some(l) = o.layers {
        cfg.model.decoder.layers = l;
    }
    if o.no_spatial {
        cfg.model.decoder.fam.enable_spatial = false;
    }
    if o.no_class {
        cfg.model.decoder.fam.enable_class = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn embeddings(cfg: &Config, vocab: &CategoryVocabulary, templates: &[String], file: Option<&Path>) -> Result<TextEmbeddings<f32>> {
    if templates.len() != cfg.model.templates {
        bail!("{} prompt templates given but the model expects {}", templates.len(), cfg.model.templates);
    }
    let prompts = expand_prompts(vocab, templates)?;
    let provider = match file {
        Some(p) => EmbeddingProvider::File(p.to_path_buf()),
        None => EmbeddingProvider::Synthetic { seed: cfg.embedding_seed, dim: cfg.model.encoder.align_dim },
    };
    let e = embed_texts(&prompts, &provider)?;
    Ok(e)
}

fn default_templates(p: usize) -> Result<Vec<String>> {
    if p > DEFAULT_TEMPLATES.len() {
        bail!("the model uses {p} templates; pass --templates with that many lines");
    }
    Ok(DEFAULT_TEMPLATES[..p].iter().map(|s| s.to_string()).collect())
}

fn meta_record(e: &TextEmbeddings<f32>) -> Record {
    Record { name: META_RECORD.into(), shape: vec![2], values: vec![e.num_templates() as f32, e.dim() as f32] }
}

/// Model and weights from a checkpoint, checked against the embeddings that
/// will be used with it.
fn load_model(cfg: &Config, path: &Path, e: &TextEmbeddings<f32>) -> Result<(Sed, ParamSet<f32>)> {
    let records = checkpoint::read(path)?;
    let (sed, mut params) = Sed::new::<f32>(&cfg.model, cfg.train.seed)?;
    let rest = params.load_records(records).with_context(|| format!("loading {}", path.display()))?;
    reject_unknown(&rest, path)?;
    if let Some(meta) = rest.iter().find(|r| r.name == META_RECORD) {
        let (p, d) = (meta.values[0] as usize, meta.values[1] as usize);
        if (p, d) != (e.num_templates(), e.dim()) {
            bail!("{} was trained with {p} templates of width {d}, got embeddings {} x {}", path.display(), e.num_templates(), e.dim());
        }
    }
    sed.check_embeddings(e)?;
    Ok((sed, params))
}

/// Fails on records that belong to no parameter of this architecture.
/// Optimizer state and the embedding meta record are allowed.
fn reject_unknown(rest: &[Record], path: &Path) -> Result<()> {
    if let Some(r) = rest.iter().find(|r| r.name != META_RECORD && !r.name.starts_with("optim.")) {
        bail!("{} has parameter `{}` that this model does not have; check --layers and the config", path.display(), r.name);
    }
    Ok(())
}

fn config_beside(path: &Path) -> Option<PathBuf> {
    path.parent().map(|d| d.join(CONFIG_FILE))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, None)?;
    if let Some(n) = a.iters {
        cfg.train.iters = n;
    }
    if let Some(n) = a.crop {
        cfg.train.crop = n;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.train.checkpoint_every = n;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data)?;
    let e = embeddings(&cfg, &data.vocab, &data.templates, a.common.embeddings.as_deref())?;
    let (sed, params) = Sed::new::<f32>(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(sed, params, e, cfg.train.clone())?;
    if let Some(r) = &a.resume {
        let rest = trainer.load_records(checkpoint::read(r)?).with_context(|| format!("resuming from {}", r.display()))?;
        reject_unknown(&rest, r)?;
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    cfg.save(&a.out.join(CONFIG_FILE))?;
    let loss_path = a.out.join(LOSS_FILE);
    let file = if a.resume.is_some() && loss_path.exists() {
        OpenOptions::new().append(true).open(&loss_path)
    } else {
        File::create(&loss_path).and_then(|mut f| writeln!(f, "iter,loss").map(|_| f))
    };
    let mut curve = BufWriter::new(file.with_context(|| format!("opening {}", loss_path.display()))?);

    let save = |trainer: &Trainer, path: &Path| -> Result<()> {
        let mut records = trainer.to_records();
        records.push(meta_record(trainer.embeddings()));
        checkpoint::write(path, &records)?;
        Ok(())
    };
    while trainer.iteration() < cfg.train.iters as u64 {
        let loss = trainer.step(&data.samples)?;
        let it = trainer.iteration();
        writeln!(curve, "{it},{loss}")?;
        if a.log_every > 0 && it % a.log_every == 0 {
            eprintln!("iter {it:>6}  loss {loss:.5}");
        }
        let every = cfg.train.checkpoint_every as u64;
        if every > 0 && it % every == 0 {
            curve.flush()?;
            save(&trainer, &a.out.join(format!("model-{it:06}.sedc")))?;
        }
    }
    curve.flush()?;
    save(&trainer, &a.out.join(FINAL_CHECKPOINT))?;
    eprintln!("wrote {}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = resolve_config(&a.common, config_beside(&a.checkpoint).as_deref())?;
    let vocab = read_categories(&a.categories)?;
    let templates = match &a.templates {
        Some(p) => read_templates(p)?,
        None => default_templates(cfg.model.templates)?,
    };
    let e = embeddings(&cfg, &vocab, &templates, a.common.embeddings.as_deref())?;
    let (sed, params) = load_model(&cfg, &a.checkpoint, &e)?;
    let img = read_ppm(&a.image)?;
    let image = ImageTensor::from_rgb8(img.height, img.width, &img.data).with_context(|| format!("{}", a.image.display()))?;
    let top_k = cfg.cer.top_k();
    let (pred, ms) = time_prediction(&sed, &params, &image, &e, top_k, a.warmup, a.runs)?;
    let map = LabelMap::new(img.height, img.width, pred.labels.clone())?;
    write_labels(&a.out, &map, vocab.len())?;
    let name = a.image.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let line = BenchReport::new(&name, top_k, &pred, ms, vocab.len(), None).to_json_line();
    println!("{line}");
    if let Some(r) = &a.report {
        std::fs::write(r, line + "\n").with_context(|| format!("writing {}", r.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&a.common, config_beside(&a.checkpoint).as_deref())?;
    let data = Dataset::load(&a.data)?;
    let e = embeddings(&cfg, &data.vocab, &data.templates, a.common.embeddings.as_deref())?;
    let (sed, params) = load_model(&cfg, &a.checkpoint, &e)?;
    let mut acc = MIoUAccumulator::new(data.vocab.len());
    for s in &data.samples {
        let pred = sed.predict(&params, &s.image_tensor()?, &e, cfg.cer.top_k())?;
        acc.add(&s.label.values, &pred.labels)?;
    }
    let r = compute_miou(&acc)?;
    let out = serde_json::json!({
        "images": data.samples.len(),
        "k": sed_core::bench::k_label(cfg.cer.top_k()),
        "miou": r.miou,
        "per_class": r.per_class,
    });
    println!("{out}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = resolve_config(&a.common, config_beside(&a.checkpoint).as_deref())?;
    let data = Dataset::load(&a.data)?;
    let e = embeddings(&cfg, &data.vocab, &data.templates, a.common.embeddings.as_deref())?;
    let (sed, params) = load_model(&cfg, &a.checkpoint, &e)?;
    let samples: Vec<_> = data.names.iter().cloned().zip(data.samples.iter().cloned()).collect();
    let run = run_benchmark(&sed, &params, &samples, &e, cfg.cer.top_k(), a.warmup, a.runs)?;
    for r in &run.reports {
        println!("{}", r.to_json_line());
    }
    let total = |f: fn(&BenchReport) -> f64| run.reports.iter().map(f).sum::<f64>();
    let summary = serde_json::json!({
        "summary": true,
        "images": run.reports.len(),
        "k": sed_core::bench::k_label(cfg.cer.top_k()),
        "decoder_ms": total(|r| r.decoder_ms),
        "end_to_end_ms": total(|r| r.end_to_end_ms),
        "miou": run.miou,
    });
    println!("{summary}");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let present = a.present.unwrap_or(a.categories);
    if present > a.categories {
        bail!("--present {present} exceeds --categories {}", a.categories);
    }
    let gen = SyntheticScenes::new(a.size, present, a.seed)?;
    let data = Dataset {
        samples: gen.samples(a.images),
        names: (0..a.images).map(|i| format!("{i:04}")).collect(),
        vocab: CategoryVocabulary::new(synthetic_names(a.categories))?,
        templates: default_templates(a.templates)?,
    };
    data.save(&a.out)?;
    eprintln!("wrote {} images to {}", a.images, a.out.display());
    Ok(())
}
