//! `mdt`: synthetic data, training, translation and evaluation for
//! multi-domain image transfer.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mdt_core::config::RunConfigFile;
use mdt_core::data::{self, DomainDataset, DomainStyle, ImageBatch};
use mdt_core::fen::{load_fen, FenVariant};
use mdt_core::metrics::{self, Embedder, EmbedderSpec, EvalConfig};
use mdt_core::model::TransferVariant;
use mdt_core::train::{self, TrainRun};
use mdt_core::Error;

#[derive(Parser)]
#[command(name = "mdt", version, about = "Multi-domain image transfer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain corpus with structure and fluid masks.
    Synth(SynthArgs),
    /// Train a generator from a source domain into every other domain.
    Train(TrainArgs),
    /// Translate images into target domains with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score every direction a checkpoint can translate.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 200)]
    per_domain: usize,
    /// `HxW`, each side divisible by 4 and at least 32.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON list of per-domain styles; defaults to the three stock styles.
    #[arg(long)]
    style_file: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    None,
    NoResidual,
    SingleConv,
    Vgg19,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Name of the source domain directory.
    #[arg(long)]
    source: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Ablation::None)]
    ablation: Ablation,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated target domain names, or `all`.
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long)]
    out: PathBuf,
    /// Accept a checkpoint whose stored config hash does not match.
    #[arg(long = "override")]
    allow_mismatch: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    source: String,
    #[arg(long)]
    out: PathBuf,
    /// `fen:<layer>` or `inception:<weights file>`; overrides the config.
    #[arg(long)]
    embedder: Option<EmbedderSpec>,
    /// Run configuration; only its `eval` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override")]
    allow_mismatch: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn workers() -> Result<usize> {
    match std::env::var("MDT_NUM_WORKERS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| Error::Argument(format!("MDT_NUM_WORKERS must be a positive integer, got {v:?}")))?;
            if n == 0 {
                bail!(Error::Argument("MDT_NUM_WORKERS must be >= 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn find_domain<'a>(datasets: &'a [DomainDataset], name: &str) -> Result<&'a DomainDataset> {
    datasets.iter().find(|d| d.name == name).ok_or_else(|| {
        let names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
        anyhow!(Error::Argument(format!("unknown domain {name:?}; available: {}", names.join(", "))))
    })
}

fn synth(a: &SynthArgs) -> Result<()> {
    let styles: Vec<DomainStyle> = match &a.style_file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => DomainStyle::default_set(),
    };
    if a.domains == 0 || a.domains > styles.len() {
        bail!(Error::Argument(format!("--domains must be in 1..={} for the available styles", styles.len())));
    }
    data::check_size(a.size)?;
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out).with_context(|| format!("listing {}", a.out.display()))?.next().is_some();
        if non_empty {
            if !a.force {
                bail!(Error::Argument(format!("{} exists and is not empty; pass --force to replace it", a.out.display())));
            }
            fs::remove_dir_all(&a.out).with_context(|| format!("removing {}", a.out.display()))?;
        }
    }
    create_dir(&a.out)?;
    data::synthesize_corpus(&a.out, &styles[..a.domains], a.per_domain, a.size, a.seed)?;
    eprintln!("wrote {} domains x {} images to {}", a.domains, a.per_domain, a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs, datasets: &[DomainDataset]) -> Result<RunConfigFile> {
    let mut cfg = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    match a.ablation {
        Ablation::None => {}
        Ablation::NoResidual => cfg.model.residual_output = false,
        Ablation::SingleConv => cfg.model.transfer_variant = TransferVariant::SingleConv,
        Ablation::Vgg19 => cfg.fen.variant = FenVariant::Vgg19,
    }
    let source = find_domain(datasets, &a.source)?;
    cfg.resolve_domains(source.domain_id, datasets.len())?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let datasets = data::scan_dataset(&a.data)?;
    let cfg = resolve_train_config(a, &datasets)?;
    let held = cfg.data.held_out;
    let datasets: Vec<DomainDataset> = datasets
        .iter()
        .map(|d| {
            if held >= d.count {
                bail!(Error::Config(format!("data.held_out = {held} leaves no training images in {}", d.name)));
            }
            Ok(d.subset(0..d.count - held))
        })
        .collect::<Result<_>>()?;
    create_dir(&a.out)?;
    cfg.write_resolved(&a.out)?;
    let run = TrainRun {
        image_size: cfg.data.size(),
        workers: workers()?,
        out_dir: Some(a.out.clone()),
        resume: a.resume.clone(),
        progress: true,
    };
    let (_, log) = train::train(&cfg.train, &datasets, &cfg.model, &cfg.fen, &run)?;
    if let Some(p) = log.final_checkpoint {
        eprintln!("final checkpoint: {}", p.display());
    }
    Ok(())
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!(Error::Argument(format!("{} is neither a file nor a directory", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        p.is_file()
            && p.extension().and_then(|e| e.to_str()).is_some_and(|e| data::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
    });
    files.sort();
    if files.is_empty() {
        bail!(Error::Argument(format!("no images in {}", input.display())));
    }
    Ok(files)
}

/// `(slot, name)` for each requested target.
fn select_targets(spec: &str, available: &[String]) -> Result<Vec<(usize, String)>> {
    if spec == "all" {
        return Ok(available.iter().cloned().enumerate().collect());
    }
    spec.split(',')
        .map(|name| {
            let name = name.trim();
            available.iter().position(|t| t == name).map(|s| (s, name.to_string())).ok_or_else(|| {
                anyhow!(Error::Argument(format!(
                    "unknown target {name:?}; the checkpoint translates into: {}",
                    available.join(", ")
                )))
            })
        })
        .collect()
}

fn save_image(path: &Path, image: &ImageBatch) -> Result<()> {
    let (h, w) = image.size();
    data::save_gray_png(path, image.plane(0, 0), h, w)?;
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let ck = train::load_checkpoint(&a.checkpoint, a.allow_mismatch)?;
    let targets = select_targets(&a.targets, &ck.meta.targets)?;
    let files = image_files(&a.input)?;
    for (_, name) in &targets {
        create_dir(&a.out.join(name))?;
    }
    let model = &ck.state.model;
    for file in &files {
        let image = data::load_image(file, data::image_dimensions(file)?)?.to_gray();
        let stem = file.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        for (slot, name) in &targets {
            let out = model.translate(&image, *slot)?;
            save_image(&a.out.join(name).join(format!("{stem}.png")), &out)?;
        }
    }
    eprintln!("translated {} images into {} targets", files.len(), targets.len());
    Ok(())
}

/// Combined label maps for every image, or `None` when any mask is missing.
fn load_masks(ds: &DomainDataset) -> Result<Option<Vec<data::LabelMap>>> {
    let mut out = Vec::with_capacity(ds.count);
    for p in &ds.image_paths {
        let Some((s, f)) = ds.mask_paths(p) else { return Ok(None) };
        out.push(data::combined_labels(&data::load_label_png(&s)?, &data::load_label_png(&f)?));
    }
    Ok(Some(out))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = train::load_checkpoint(&a.checkpoint, a.allow_mismatch)?;
    let mut eval: EvalConfig = match &a.config {
        Some(p) => RunConfigFile::load(p)?.eval,
        None => EvalConfig::default(),
    };
    if let Some(e) = &a.embedder {
        eval.embedder = e.clone();
    }
    let datasets = data::scan_dataset(&a.data)?;
    let source_ds = find_domain(&datasets, &a.source)?;
    let size = ck.meta.image_size;
    let n_workers = workers()?;
    let fen = load_fen::<f32>(&ck.meta.fen)?;
    let embedder = Embedder::load(&eval.embedder, &fen)?;
    let sources = data::load_gray_images(&source_ds.image_paths, size, n_workers)?;
    let masks = load_masks(source_ds)?;
    if let Some(m) = &masks {
        if m.iter().any(|l| (l.height, l.width) != size) {
            eprintln!("warning: masks of {} do not match the model size {}x{}; skipping structural consistency", source_ds.name, size.0, size.1);
        }
    }
    let masks = masks.filter(|m| m.iter().all(|l| (l.height, l.width) == size));
    create_dir(&a.out)?;
    let mut reports = Vec::new();
    for (slot, target) in ck.meta.targets.iter().enumerate() {
        let Some(target_ds) = datasets.iter().find(|d| &d.name == target) else {
            eprintln!("warning: no data for target {target} under {}; skipping", a.data.display());
            continue;
        };
        let target_images = data::load_gray_images(&target_ds.image_paths, size, n_workers)?;
        let transferred = metrics::translate_images(&ck.state.model, &sources, slot)?;
        let mut report = metrics::score_direction(
            (&source_ds.name, &sources),
            (target, &target_images),
            &transferred,
            &fen,
            &embedder,
            &eval,
        )?;
        if let Some(m) = &masks {
            report.structural_consistency = Some(metrics::structural_consistency(m, &ImageBatch::stack(&transferred)?)?);
        }
        let path = a.out.join(format!("{}_to_{target}.json", source_ds.name));
        write_file(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        println!("{}", serde_json::to_string(&report)?);
        reports.push(report);
    }
    if reports.is_empty() {
        bail!("no target domain of the checkpoint has data under {}", a.data.display());
    }
    write_file(&a.out.join("metrics.csv"), metrics::reports_csv(&reports))?;
    Ok(())
}

/// Usage and configuration problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Argument(_) | Error::Config(_) | Error::DatasetRootNotFound(_) | Error::UnknownDomain { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
