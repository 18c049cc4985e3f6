//! Command-line entry points.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crownseg_core::dsm::{peak_prompts, DsmChannel, PeakConfig};
use crownseg_core::metrics::{evaluate, IouThresholds, MetricsReport};
use crownseg_core::taxonomy::{build_schema, ClassSchema, Grouping, TaxonomyTree};
use crownseg_core::tiling::{
    annotations_in_aoi, assign_splits, attach_annotations, clip_annotations_to_tile, filter_tiles,
    tile_orthomosaic, ClipReport,
};
use crownseg_core::{Detection, Grid};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::io::{coco, geojson, geotiff, read_json, write_json, write_png_grid};
use crate::model::Model;
use crate::render::{draw_cross, draw_masks, grid_panel, Overlay};
use crate::trainer::{fit, FitOptions, BEST_CHECKPOINT, LAST_CHECKPOINT};

/// Environment variable naming the checkpoint cache directory.
pub const CHECKPOINT_DIR_ENV: &str = "CROWNSEG_CHECKPOINT_DIR";
/// Model description written next to trained checkpoints.
pub const MODEL_CARD: &str = "model.json";

#[derive(Debug, Parser)]
#[command(name = "crownseg", version, about = "Tree crown instance segmentation on drone orthomosaics")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint cache; relative checkpoint paths resolve here.
    #[arg(long, global = true, env = CHECKPOINT_DIR_ENV)]
    pub checkpoint_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut an orthomosaic into tiles and write per-split COCO files.
    Tile(TileArgs),
    /// Class schema commands.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
    /// Prompt visualisation.
    Prompts {
        #[command(subcommand)]
        command: PromptsCommand,
    },
    /// Train a model and write checkpoints and a step log.
    Train(TrainArgs),
    /// Run a model over a tile set and write COCO results.
    Predict(PredictArgs),
    /// Score results against ground truth.
    Eval(EvalArgs),
    /// Side-by-side comparison of two or more result files.
    Panel(PanelArgs),
    /// Write a synthetic orthomosaic with annotations, AOI and splits.
    Synth(SynthArgs),
}

#[derive(Debug, Subcommand)]
pub enum SchemaCommand {
    /// Threshold label counts into a class schema.
    Build(SchemaArgs),
}

#[derive(Debug, Subcommand)]
pub enum PromptsCommand {
    /// Draw DSM peak prompts over a tile image.
    Preview(PreviewArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// RGB or RGB+DSM GeoTIFF.
    #[arg(long)]
    pub rgb: PathBuf,
    /// Separate DSM GeoTIFF.
    #[arg(long)]
    pub dsm: Option<PathBuf>,
    /// Crown polygons (GeoJSON with a `Label` property).
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub aoi: Option<PathBuf>,
    /// Split polygons (GeoJSON with a `split` property).
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Class schema JSON; built from the label counts when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub min_count: u64,
    #[arg(long)]
    pub raster_id: Option<String>,
    #[arg(long, default_value_t = 1024)]
    pub tile_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.2)]
    pub min_visibility: f64,
    #[arg(long, default_value_t = 0.8)]
    pub max_black_fraction: f64,
    /// Keep tiles without any annotation.
    #[arg(long)]
    pub keep_unlabeled: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GroupingArg {
    Species,
    Family,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// JSON object of label counts.
    #[arg(long, conflicts_with = "annotations", required_unless_present = "annotations")]
    pub counts: Option<PathBuf>,
    /// Count labels of a GeoJSON annotation file instead.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub min_count: u64,
    #[arg(long, value_enum, default_value = "species")]
    pub grouping: GroupingArg,
    /// Taxonomy JSON, needed for family grouping.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Tile image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Tile DSM (GeoTIFF).
    #[arg(long)]
    pub dsm: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    pub min_distance: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model family; overrides the config.
    #[arg(long)]
    pub model: Option<String>,
    /// DSM input: none, stack, gradients or encoder.
    #[arg(long)]
    pub dsm: Option<String>,
    /// Training COCO file; defaults to `train.json` in the config data directory.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Pipeline {
    /// A trained checkpoint.
    Model,
    /// Segmenter with a grid of point prompts.
    SamAutomatic,
    /// Segmenter prompted with DSM peaks.
    SamDsm,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Training output directory or checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// COCO file listing the tiles.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "model")]
    pub pipeline: Pipeline,
    /// Also write one overlay PNG per tile.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Result files, one column each.
    #[arg(long, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Number of tiles, one row each.
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long, default_value_t = 24)]
    pub crowns: usize,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', default_value = "Abies,Betula,Picea")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 10.0)]
    pub min_radius: f64,
    #[arg(long, default_value_t = 18.0)]
    pub max_radius: f64,
}

/// What `predict` needs to rebuild a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: String,
    pub classes: Vec<String>,
    pub config: ExperimentConfig,
    /// Checksums of frozen components the checkpoint was trained against.
    pub frozen_checksums: BTreeMap<String, String>,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Usage(format!("device {} is not available; use cpu", cli.device)));
    }
    match &cli.command {
        Command::Tile(a) => tile(&cli, a),
        Command::Schema { command: SchemaCommand::Build(a) } => schema_build(&cli, a),
        Command::Prompts { command: PromptsCommand::Preview(a) } => prompts_preview(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Predict(a) => predict(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Panel(a) => panel(&cli, a),
        Command::Synth(a) => synth(&cli, a),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let d = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out is required".into()))?;
    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    Ok(d)
}

fn load_config(cli: &Cli) -> Result<Option<ExperimentConfig>> {
    cli.config
        .as_deref()
        .map(|p| ExperimentConfig::load(p, cli.checkpoint_dir.as_deref()))
        .transpose()
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{}: no such file", p.display())))
    }
}

fn tile(cli: &Cli, a: &TileArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let raster_id = a.raster_id.clone().unwrap_or_else(|| {
        a.rgb
            .file_stem()
            .map_or_else(|| "raster".into(), |s| s.to_string_lossy().into_owned())
    });
    let ortho = geotiff::read_orthomosaic(&raster_id, &a.rgb, a.dsm.as_deref())?;
    let annotations = geojson::read_annotations(&a.annotations)?;
    let aoi = a.aoi.as_deref().map(geojson::read_aois).transpose()?.unwrap_or_default();
    let annotations = annotations_in_aoi(&annotations, &aoi);
    let mut tiles = tile_orthomosaic(&ortho, &aoi, a.tile_size, a.overlap)?;
    attach_annotations(&mut tiles, &annotations)?;
    let mut total = ClipReport::default();
    let mut clipped = Vec::with_capacity(tiles.len());
    for t in tiles {
        let (t, r) = clip_annotations_to_tile(t, a.min_visibility)?;
        total.kept += r.kept;
        total.low_visibility += r.low_visibility;
        total.degenerate += r.degenerate;
        clipped.push(t);
    }
    let cut = clipped.len();
    let mut tiles = filter_tiles(clipped, a.max_black_fraction, !a.keep_unlabeled);
    if let Some(p) = &a.splits {
        tiles = assign_splits(tiles, &geojson::read_splits(p)?)?;
    }
    let schema = match &a.schema {
        Some(p) => read_json::<ClassSchema>(p)?,
        None => {
            let mut counts = BTreeMap::new();
            for ann in &annotations {
                *counts.entry(ann.class_label.clone()).or_insert(0u64) += 1;
            }
            build_schema(&counts, a.min_count, Grouping::Species, None)?
        }
    };
    write_json(&out.join("schema.json"), &schema)?;
    let written = coco::write_tile_set(&tiles, &schema, out)?;
    eprintln!(
        "{cut} tiles cut, {} kept; {} annotation clips kept, {} below visibility, {} degenerate",
        tiles.len(),
        total.kept,
        total.low_visibility,
        total.degenerate
    );
    for (split, p) in written {
        let n = tiles.iter().filter(|t| t.split == split).count();
        eprintln!("{}: {n} tiles -> {}", split.as_str(), p.display());
    }
    Ok(())
}

fn schema_build(cli: &Cli, a: &SchemaArgs) -> Result<()> {
    let counts: BTreeMap<String, u64> = match (&a.counts, &a.annotations) {
        (Some(p), _) => read_json(p)?,
        (None, Some(p)) => {
            let mut c = BTreeMap::new();
            for ann in geojson::read_annotations(p)? {
                *c.entry(ann.class_label).or_insert(0) += 1;
            }
            c
        }
        (None, None) => return Err(Error::Usage("give --counts or --annotations".into())),
    };
    let taxonomy = a.taxonomy.as_deref().map(read_json::<TaxonomyTree>).transpose()?;
    if let Some(t) = &taxonomy {
        t.validate()?;
    }
    let grouping = match a.grouping {
        GroupingArg::Species => Grouping::Species,
        GroupingArg::Family => Grouping::Family,
    };
    let schema = build_schema(&counts, a.min_count, grouping, taxonomy.as_ref())?;
    match &cli.out {
        Some(_) => write_json(&out_dir(cli)?.join("schema.json"), &schema),
        None => print_json(&schema),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Usage(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn read_dsm(path: &Path, w: usize, h: usize) -> Result<DsmChannel> {
    let r = geotiff::read_geotiff(path)?;
    if r.width != w || r.height != h || r.bands != 1 {
        return Err(Error::format(path, format!("expected a single-band {w}x{h} raster")));
    }
    let values: Vec<f32> = match r.data {
        geotiff::RasterData::F32(v) => v,
        geotiff::RasterData::U8(v) => v.into_iter().map(f32::from).collect(),
    };
    let valid: Vec<bool> = values
        .iter()
        .map(|&v| !v.is_nan() && r.nodata.is_none_or(|nd| f64::from(v) != nd))
        .collect();
    let values = values.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    DsmChannel::new(Grid::from_vec(w, h, values)?, Grid::from_vec(w, h, valid)?).map_err(Into::into)
}

fn prompts_preview(cli: &Cli, a: &PreviewArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let mut img = crate::io::read_png(&a.image)?;
    let dsm = read_dsm(&a.dsm, img.width(), img.height())?;
    let peaks = peak_prompts(&dsm, &PeakConfig { min_distance: a.min_distance })?;
    let arm = (img.width() / 100).max(3);
    for &(x, y) in &peaks {
        draw_cross(&mut img, x, y, arm, [255, 40, 40]);
    }
    let stem = a.image.file_stem().map_or_else(|| "tile".into(), |s| s.to_string_lossy().into_owned());
    let p = out.join(format!("{stem}_prompts.png"));
    write_png_grid(&p, &img)?;
    eprintln!("{} peaks -> {}", peaks.len(), p.display());
    print_json(&peaks)
}

fn data_file(cfg: &ExperimentConfig, explicit: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| cfg.data_dir.as_ref().map(|d| d.join(name)))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = match load_config(cli)? {
        Some(c) => c,
        None => {
            let model = a
                .model
                .clone()
                .ok_or_else(|| Error::Usage("give --config or --model".into()))?;
            ExperimentConfig::parse(&format!("model = {model:?}\nimage_size = 0\n"))?
        }
    };
    if let Some(m) = &a.model {
        cfg.model = m.clone();
    }
    if let Some(d) = &a.dsm {
        cfg.dsm = (d != "none").then(|| d.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.recipe.max_epochs = Some(e);
    }
    let train_path = data_file(&cfg, &a.train, "train.json")
        .ok_or_else(|| Error::Usage("no training data: give --train or data_dir".into()))?;
    require_file(&train_path)?;
    let val_path = data_file(&cfg, &a.val, "val.json").filter(|p| a.val.is_some() || p.is_file());
    let mode = cfg.dsm_normalization.into();
    let (train_ds, train_samples) = coco::load_samples(&train_path, mode)?;
    let val_samples = match &val_path {
        Some(p) => coco::load_samples(p, mode)?.1,
        None => Vec::new(),
    };
    let size = train_samples
        .first()
        .map(Sample::size)
        .ok_or_else(|| Error::Usage(format!("{}: no images", train_path.display())))?;
    if cfg.image_size == 0 {
        cfg.image_size = size;
    }
    let classes = train_ds.class_names();
    let mut counts: BTreeMap<String, u64> = classes.iter().map(|c| (c.clone(), 0)).collect();
    for s in &train_samples {
        for i in &s.instances {
            *counts.get_mut(&classes[i.class_id as usize]).expect("known class") += 1;
        }
    }
    let tc = cfg.train_config()?;
    let model = cfg.build_model(&classes, Some(&counts))?;
    let out = match &cli.out {
        Some(_) => out_dir(cli)?.to_path_buf(),
        None => {
            let base = cli
                .checkpoint_dir
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("give --out or set {CHECKPOINT_DIR_ENV}")))?;
            base.join(model.kind().as_str())
        }
    };
    let card = ModelCard {
        model: model.kind().as_str().into(),
        classes: classes.clone(),
        config: cfg.clone(),
        frozen_checksums: model.frozen_checksums()?,
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join(MODEL_CARD), &card)?;
    eprintln!(
        "training {} on {} tiles ({} val) for {} epochs",
        card.model,
        train_samples.len(),
        val_samples.len(),
        tc.max_epochs
    );
    let opts = FitOptions {
        out_dir: Some(out.clone()),
        class_names: classes,
        weights: None,
        thresholds: IouThresholds::default(),
        eval_every: 1,
        clip_norm: cfg.recipe.clip_norm,
    };
    let report = fit(model.as_ref(), &train_samples, &val_samples, &tc, &opts)?;
    if let Some(last) = report.epochs.last() {
        eprintln!("final epoch mean loss {:.4}", last.mean_loss);
    }
    match (report.best_epoch, report.best_map) {
        (Some(e), Some(m)) => eprintln!("best val mAP {m:.4} at epoch {e}"),
        _ => eprintln!("no validation; keeping the last checkpoint"),
    }
    Ok(())
}

/// Rebuild a trained model from its output directory or a checkpoint inside one.
pub fn load_trained(path: &Path, checkpoint_dir: Option<&Path>) -> Result<(ModelCard, Box<dyn Model>)> {
    let path = if path.is_relative() && !path.exists() {
        checkpoint_dir.map_or_else(|| path.to_path_buf(), |d| d.join(path))
    } else {
        path.to_path_buf()
    };
    let (dir, weights) = if path.is_dir() {
        let best = path.join(BEST_CHECKPOINT);
        let w = if best.is_file() { best } else { path.join(LAST_CHECKPOINT) };
        (path.clone(), w)
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.clone())
    };
    let card: ModelCard = read_json(&dir.join(MODEL_CARD))?;
    require_file(&weights)?;
    let model = card.config.build_model(&card.classes, None).or_else(|e| match e {
        // the weighted loss needs counts only for training
        Error::Config(_) => {
            let mut c = card.config.clone();
            c.loss.kind = crate::config::LossKind::Ce;
            c.build_model(&card.classes, None)
        }
        e => Err(e),
    })?;
    model.params().load(&weights)?;
    let frozen = model.frozen_checksums()?;
    if frozen != card.frozen_checksums {
        return Err(Error::Model(format!(
            "{}: frozen components differ from the ones the checkpoint was trained with",
            weights.display()
        )));
    }
    Ok((card, model))
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let out = out_dir(cli)?;
    require_file(&a.input)?;
    let (run, classes, mode): (Box<dyn Fn(&Sample) -> Result<Vec<Detection>>>, Vec<String>, _) = match a.pipeline {
        Pipeline::Model => {
            let ckpt = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Usage("--checkpoint is required for the model pipeline".into()))?;
            let (card, model) = load_trained(ckpt, cli.checkpoint_dir.as_deref())?;
            let mode = card.config.dsm_normalization.into();
            (Box::new(move |s| model.predict(s)), card.classes, mode)
        }
        p => {
            let cfg = load_config(cli)?
                .ok_or_else(|| Error::Usage("segmenter pipelines need --config".into()))?;
            let sam = cfg.build_segmenter()?;
            let nms = crate::sam::pipeline_nms();
            let pl = cfg.pipeline.clone();
            let mode = cfg.dsm_normalization.into();
            let f: Box<dyn Fn(&Sample) -> Result<Vec<Detection>>> = if p == Pipeline::SamAutomatic {
                Box::new(move |s| crate::sam::run_sam_automatic(sam.as_ref(), &s.rgb, pl.points_per_side, &nms, pl.batch))
            } else {
                Box::new(move |s| {
                    let peaks = PeakConfig { min_distance: pl.peak_min_distance };
                    crate::sam::run_sam_dsm_prompts(sam.as_ref(), &s.rgb, s.dsm.as_ref(), &peaks, &nms, pl.batch)
                })
            };
            (f, vec!["tree".to_string()], mode)
        }
    };
    let (ds, samples) = coco::load_samples(&a.input, mode)?;
    if a.pipeline == Pipeline::Model && ds.class_names() != classes {
        return Err(Error::Usage(format!(
            "{}: categories {:?} differ from the model classes {:?}",
            a.input.display(),
            ds.class_names(),
            classes
        )));
    }
    let overlay_dir = out.join("overlays");
    if a.overlays {
        std::fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    }
    let mut results = Vec::new();
    for (img, s) in ds.images.iter().zip(&samples) {
        let dets = run(s)?;
        if a.overlays {
            let ov: Vec<Overlay> = dets
                .iter()
                .filter_map(|d| {
                    Some(Overlay {
                        mask: d.mask.as_ref()?,
                        class: classes.get(d.class_id as usize).map_or("?", String::as_str),
                    })
                })
                .collect();
            write_png_grid(&overlay_dir.join(format!("{}.png", s.id)), &draw_masks(&s.rgb, &ov))?;
        }
        results.extend(coco::detections_to_results(img.id, &dets));
    }
    let p = out.join("results.json");
    write_json(&p, &results)?;
    eprintln!("{} detections on {} tiles -> {}", results.len(), samples.len(), p.display());
    Ok(())
}

/// Per-class AP table with the summary metrics underneath.
pub fn format_table(report: &MetricsReport) -> String {
    let width = report
        .per_class_ap
        .keys()
        .map(String::len)
        .chain(["mAP (1 class)".len()])
        .max()
        .unwrap_or(0);
    let mut s = format!("{:<width$}  {:>7}\n", "class", "AP");
    for (c, ap) in &report.per_class_ap {
        s += &format!("{c:<width$}  {:>7.2}\n", ap * 100.0);
    }
    for c in &report.skipped_classes {
        s += &format!("{c:<width$}  {:>7}\n", "-");
    }
    for (name, v) in [
        ("mAP", report.map),
        ("wmAP", report.wmap),
        ("mAP (1 class)", report.single_class_map),
        ("mIoU", report.miou),
    ] {
        s += &format!("{name:<width$}  {:>7.2}\n", v * 100.0);
    }
    s
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let gt = coco::read_dataset(&a.gt)?;
    let results = coco::read_results(&a.results)?;
    let images = coco::eval_images(&gt, &results)?;
    let report = evaluate(&images, &gt.class_names(), None, IouThresholds::default())?;
    let table = format_table(&report);
    match &cli.out {
        Some(_) => {
            write_json(&out_dir(cli)?.join("metrics.json"), &report)?;
            print!("{table}");
        }
        None => {
            print_json(&report)?;
            eprint!("{table}");
        }
    }
    Ok(())
}

fn panel(cli: &Cli, a: &PanelArgs) -> Result<()> {
    if a.results.len() < 2 {
        return Err(Error::Usage("need ≥2 methods".into()));
    }
    let out = out_dir(cli)?;
    let (ds, samples) = coco::load_samples(&a.gt, crownseg_core::dsm::NormalizeMode::Max)?;
    let classes = ds.class_names();
    let per_method = a
        .results
        .iter()
        .map(|p| coco::eval_images(&ds, &coco::read_results(p)?))
        .collect::<Result<Vec<_>>>()?;
    let name = |id: u32| classes.get(id as usize).map_or("?", String::as_str);
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate().take(a.rows) {
        let gt: Vec<Overlay> = s
            .instances
            .iter()
            .map(|inst| Overlay { mask: &inst.mask, class: name(inst.class_id) })
            .collect();
        let mut row = vec![s.rgb.clone(), draw_masks(&s.rgb, &gt)];
        for m in &per_method {
            let ov: Vec<Overlay> = m[i]
                .detections
                .iter()
                .filter_map(|d| Some(Overlay { mask: d.mask.as_ref()?, class: name(d.class_id) }))
                .collect();
            row.push(draw_masks(&s.rgb, &ov));
        }
        rows.push(row);
    }
    let p = out.join("panel.png");
    write_png_grid(&p, &grid_panel(&rows))?;
    eprintln!("{} rows x {} columns -> {}", rows.len(), a.results.len() + 2, p.display());
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let cfg = crate::synth::SynthConfig {
        width: a.width,
        height: a.height,
        crowns: a.crowns,
        classes: a.classes.clone(),
        radius: (a.min_radius, a.max_radius),
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    let scene = crate::synth::scene(&cfg)?;
    geotiff::write_orthomosaic(&scene.ortho, &out.join("ortho.tif"), Some(&out.join("dsm.tif")))?;
    geojson::write_annotations(&out.join("annotations.geojson"), &scene.annotations)?;
    geojson::write_aois(&out.join("aoi.geojson"), &scene.aoi)?;
    geojson::write_splits(&out.join("splits.geojson"), &scene.splits)?;
    eprintln!("{} crowns -> {}", scene.crowns.len(), out.display());
    Ok(())
}
