//! `svit` command line: segmentation, data generation, training, evaluation,
//! attribution heatmaps and augmentation previews.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::DynamicImage;

use svit::augment::{augment_segments, preview_sheet, stream_rng, AugmentConfig};
use svit::explain::{format_table, render_heatmap, token_importance};
use svit::harness::{
    evaluate, gen_dataset, gen_shifted_testset, load_dataset, load_split, model_config_from_kv, read_num_classes,
    save_dataset, train, Dataset, KvConfig, Shift, SyntheticSceneSpec, TrainConfig,
};
use svit::model::{read_checkpoint, write_checkpoint, Model};
use svit::segmenter::{label_map_from_colors, read_manifest, segment_connected_components, write_manifest, LabelMap};
use svit::tokenizer::tokenize;
use svit::{Result, SvitError};

#[derive(Parser)]
#[command(name = "svit", version, about = "Semantic-segment vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Connected-component masks from a PGM label map or a flat-colored PPM.
    Segment(SegmentArgs),
    /// Generate a synthetic shape dataset.
    GenData(GenDataArgs),
    /// Train a model from a key = value config file.
    Train(TrainArgs),
    /// Top-1 accuracy and loss of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Token attribution heatmap and score table.
    Explain(ExplainArgs),
    /// Before/after contact sheet of segment-level augmentation.
    AugmentPreview(PreviewArgs),
}

#[derive(Args)]
struct SegmentArgs {
    /// PGM label map (0 = background) or PPM whose dominant color is background.
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Image id written to the manifest; defaults to the file stem.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Scene spec file; every key is optional.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    /// Scale every object in the test split by this factor (train split left empty).
    #[arg(long, conflicts_with = "shift_translate")]
    shift_scale: Option<f64>,
    /// Translate every test object by `dx,dy` pixels (train split left empty).
    #[arg(long, allow_hyphen_values = true)]
    shift_translate: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    class: usize,
    /// Heatmap PPM path.
    #[arg(short, long, default_value = "heatmap.ppm")]
    output: PathBuf,
    /// Score table path; printed to stdout when absent.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(short, long, default_value = "preview.ppm")]
    output: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.25)]
    max_perc: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    epoch: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Segment(a) => segment(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::AugmentPreview(a) => augment_preview(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SvitError::config(format!("{}: {e}", path.display())))
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    read_checkpoint(&fs::read(path)?)
}

fn segment(a: SegmentArgs) -> Result<()> {
    let labels = match image::open(&a.input)? {
        DynamicImage::ImageLuma8(g) => LabelMap::from_gray(&g),
        other => label_map_from_colors(&other.to_rgb8()),
    };
    let id = match a.id {
        Some(id) => id,
        None => a
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
    };
    let manifest = segment_connected_components(&labels, &id)?.with_source("reference")?;
    fs::write(&a.output, write_manifest(&manifest))?;
    println!("{} masks -> {}", manifest.masks().len(), a.output.display());
    Ok(())
}

fn parse_shift(a: &GenDataArgs) -> Result<Option<Shift>> {
    if let Some(f) = a.shift_scale {
        return Ok(Some(Shift::Scale(f)));
    }
    let Some(raw) = &a.shift_translate else {
        return Ok(None);
    };
    let parts: Vec<_> = raw.split(',').map(|p| p.trim().parse::<i64>()).collect();
    match parts.as_slice() {
        [Ok(dx), Ok(dy)] => Ok(Some(Shift::Translate(*dx, *dy))),
        _ => Err(SvitError::config(format!("--shift-translate expects dx,dy, got {raw:?}"))),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut kv = match &a.spec {
        Some(p) => KvConfig::parse(&read_text(p)?)?,
        None => KvConfig::default(),
    };
    let spec = SyntheticSceneSpec::from_kv(&mut kv)?;
    kv.finish()?;
    let data = match parse_shift(&a)? {
        None => gen_dataset(&spec, a.train, a.test)?,
        Some(shift) => {
            let set = gen_shifted_testset(&spec, a.test, shift)?;
            if set.clamped > 0 {
                eprintln!("warning: {} objects clamped to fit the frame", set.clamped);
            }
            Dataset {
                num_classes: spec.num_classes(),
                train: Vec::new(),
                test: set.samples,
            }
        }
    };
    save_dataset(&data, &a.out)?;
    println!(
        "{} train / {} test images, {} classes -> {}",
        data.train.len(),
        data.test.len(),
        data.num_classes,
        a.out.display()
    );
    Ok(())
}

/// Relative paths in a config file resolve against the file's directory.
fn resolve(base: &Path, p: String) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut kv = KvConfig::parse(&read_text(&a.config)?)?;
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let data_dir = resolve(
        &base,
        kv.take::<String>("data")?
            .ok_or_else(|| SvitError::config("missing required key data"))?,
    );
    let out = match (a.out, kv.take::<String>("out")?) {
        (Some(p), _) => p,
        (None, Some(p)) => resolve(&base, p),
        (None, None) => return Err(SvitError::config("missing required key out (or --out)")),
    };
    let metrics_path = kv.take::<String>("metrics")?.map(|p| resolve(&base, p));
    // the whole file is checked before any data is read
    let explicit_classes = kv.contains("num_classes");
    let mut model_cfg = model_config_from_kv(&mut kv, 2)?;
    let train_cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if !explicit_classes {
        model_cfg.num_classes = read_num_classes(&data_dir)?;
        model_cfg.validate()?;
    }

    let data = load_dataset(&data_dir)?;
    let outcome = train::<f32>(&model_cfg, &train_cfg, &data)?;
    let text = outcome.metrics.to_text();
    print!("{text}");
    println!("wall_clock_secs {:.1}", outcome.metrics.wall_clock_secs);
    fs::write(&out, write_checkpoint(&outcome.model))?;
    if let Some(p) = metrics_path {
        fs::write(p, text)?;
    }
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let classes = read_num_classes(&a.data)?;
    if classes != model.config().num_classes {
        return Err(SvitError::contract(format!(
            "dataset has {classes} classes, checkpoint has {}",
            model.config().num_classes
        )));
    }
    let samples = load_split(&a.data, &a.split)?;
    let m = evaluate(&model, &samples, a.batch_size)?;
    println!("split {}", a.split);
    println!("count {}", m.count);
    println!("correct {}", m.correct);
    println!("accuracy {}", m.accuracy);
    println!("loss {}", m.loss);
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let image = open_rgb(&a.image)?;
    let manifest = read_manifest(&fs::read(&a.manifest)?)?;
    let tokens = tokenize::<f32>(&image, &manifest, model.config().patch_size)?;
    let map = token_importance(&model, &tokens, a.class)?;
    render_heatmap(&map, &image, &manifest)?.save(&a.output)?;
    let table = format_table(&map);
    match a.table {
        Some(p) => fs::write(p, table)?,
        None => print!("{table}"),
    }
    eprintln!("heatmap -> {}", a.output.display());
    Ok(())
}

fn augment_preview(a: PreviewArgs) -> Result<()> {
    let cfg = AugmentConfig {
        max_perc: a.max_perc,
        rng_seed: a.seed,
        ..AugmentConfig::default()
    };
    cfg.validate()?;
    if a.patch_size == 0 {
        return Err(SvitError::config("patch_size must be positive"));
    }
    let image = open_rgb(&a.image)?;
    let manifest = read_manifest(&fs::read(&a.manifest)?)?;
    let before = tokenize::<f32>(&image, &manifest, a.patch_size)?;
    let mut rng = stream_rng(a.seed, 0, a.epoch);
    let after = augment_segments(&before, &cfg, &mut rng);
    preview_sheet(&before, &after).save(&a.output)?;
    println!("{} tokens -> {}", before.len(), a.output.display());
    Ok(())
}
