//! `roadmtl` command line: dataset preparation, training, evaluation and
//! figure rendering. Every failure exits nonzero after printing a single
//! `E_*: message` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use roadmtl::checkpoint::read_checkpoint;
use roadmtl::config::RunConfig;
use roadmtl::data::imgproc;
use roadmtl::data::preprocess::{crop_top_quarter, merge_road_classes, road_fraction, MIN_ROAD_FRACTION};
use roadmtl::data::synth::{write_synth_dataset, SynthDatasetSpec};
use roadmtl::data::{DatasetManifest, ManifestEntry, Split};
use roadmtl::error::{Error, Result};
use roadmtl::model::Model;
use roadmtl::nn::{Binding, Mode, ParamStore};
use roadmtl::tensor::Tape;
use roadmtl::trainer::{evaluate_model, load_model_weights, TrainVariant, Trainer};
use roadmtl::{rng, viz};

#[derive(Parser)]
#[command(
    name = "roadmtl",
    version,
    about = "Road-area segmentation with an auxiliary steering task",
    long_about = "Data preparation, training (single-task, transfer, multi-task), evaluation \
                  and overlay rendering for road-area segmentation with a steering auxiliary."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic source/target dataset.
    Synth(SynthArgs),
    /// Convert a multiclass labeled dataset into a binary road dataset.
    Preprocess(PreprocessArgs),
    /// Write the default configuration file.
    Config(ConfigArgs),
    /// Train one variant from a configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated split.
    Eval(EvalArgs),
    /// Render per-sample overlay figures from a checkpoint.
    Visualize(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train_source: usize,
    #[arg(long, default_value_t = 400)]
    n_train_target: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source image size as HxW.
    #[arg(long, default_value = "768x1024")]
    source_size: String,
    /// Target image size as HxW.
    #[arg(long, default_value = "320x1216")]
    target_size: String,
    /// Raw-angle scale written to the manifests.
    #[arg(long, default_value_t = 540.0)]
    max_angle: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory holding images/ and labels/ with paired PNGs.
    #[arg(long)]
    source_root: PathBuf,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated label ids that count as road.
    #[arg(long, value_delimiter = ',', required = true)]
    class_ids: Vec<i32>,
    /// Optional output size as HxW (applied after the crop).
    #[arg(long)]
    size: Option<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Where to write the file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training variant: st, tl or mtl.
    #[arg(long)]
    mode: String,
    /// Overrides the seed in the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<mode>_seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotated target split: val or test.
    #[arg(long, default_value = "val")]
    split: String,
    /// Report file; defaults to eval_<split>.tsv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// What to render: steer_features or segmentation.
    #[arg(long)]
    what: String,
    /// Split to draw samples from: train, val or test.
    #[arg(long, default_value = "val")]
    split: String,
    /// Output directory for the PNG panels.
    #[arg(long, default_value = "viz")]
    out: PathBuf,
    /// Number of samples to render.
    #[arg(long, default_value_t = 8)]
    limit: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Config(a) => cmd_config(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Visualize(a) => cmd_visualize(a),
    }
}

/// Default root that relative dataset paths resolve against.
fn data_root() -> PathBuf {
    std::env::var_os("ROADMTL_DATA_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let mut it = s.split('x');
    let parse = |v: Option<&str>| -> Result<usize> {
        v.and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("size must look like 320x1216, got {s:?}")))
    };
    let h = parse(it.next())?;
    let w = parse(it.next())?;
    if it.next().is_some() || h == 0 || w == 0 {
        return Err(Error::Config(format!("size must look like 320x1216, got {s:?}")));
    }
    Ok((h, w))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthDatasetSpec {
        n_train_source: a.n_train_source,
        n_train_target: a.n_train_target,
        n_val: a.n_val,
        n_test: a.n_test,
        seed: a.seed,
        source_size: parse_size(&a.source_size)?,
        target_size: parse_size(&a.target_size)?,
        max_angle: a.max_angle,
    };
    write_synth_dataset(&a.out, &spec)?;
    println!(
        "wrote synthetic dataset to {}: {} source train, {} target train, {} val, {} test",
        a.out.display(),
        spec.n_train_source,
        spec.n_train_target,
        spec.n_val,
        spec.n_test
    );
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let images_dir = a.source_root.join("images");
    let labels_dir = a.source_root.join("labels");
    let size = a.size.as_deref().map(parse_size).transpose()?;

    let mut stems: Vec<String> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(format!("reading {}", images_dir.display()), e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().and_then(|e| e.to_str()) == Some("png"))
                .then(|| path.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("no PNG images under {}", images_dir.display())));
    }

    std::fs::create_dir_all(a.out.join("images"))?;
    std::fs::create_dir_all(a.out.join("masks"))?;

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let (mut kept, mut dropped) = (0usize, 0usize);
    for stem in &stems {
        match preprocess_one(&images_dir, &labels_dir, &a.out, stem, &a.class_ids, size) {
            Ok(Some(entry)) => {
                kept += 1;
                entries.push(entry);
            }
            Ok(None) => dropped += 1,
            Err(e) => failures.push(format!("{stem}: {e}")),
        }
    }

    if !failures.is_empty() {
        for f in &failures {
            eprintln!("  {f}");
        }
        return Err(Error::Data(format!(
            "{} of {} file(s) failed preprocessing (see listing above)",
            failures.len(),
            stems.len()
        )));
    }

    let manifest = DatasetManifest {
        root: a.out.clone(),
        kind: roadmtl::model::DatasetKind::Source,
        split: Split::Train,
        max_angle: 1.0,
        entries,
    };
    manifest.save(&a.out.join("train.tsv"))?;
    println!("kept {kept} dropped {dropped} (road fraction < {MIN_ROAD_FRACTION})");
    Ok(())
}

/// Merge → filter → crop → resize for one image/label pair. `Ok(None)`
/// means the pair was dropped by the road-fraction rule.
fn preprocess_one(
    images_dir: &Path,
    labels_dir: &Path,
    out: &Path,
    stem: &str,
    class_ids: &[i32],
    size: Option<(usize, usize)>,
) -> Result<Option<ManifestEntry>> {
    let label_path = labels_dir.join(format!("{stem}.png"));
    if !label_path.exists() {
        return Err(Error::Data(format!("no label map for image {stem}.png")));
    }
    let image = imgproc::load_image_rgb(&images_dir.join(format!("{stem}.png")))?;
    let labels = imgproc::load_label_map(&label_path)?;
    let mask = merge_road_classes(&labels, class_ids)?;
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::Data(format!(
            "image {:?} and label map {:?} sizes differ",
            &image.shape()[1..],
            &mask.shape()[1..]
        )));
    }
    if road_fraction(&mask) < MIN_ROAD_FRACTION {
        return Ok(None);
    }
    let (image, mask) = crop_top_quarter(&image, &mask)?;
    let (image, mask) = match size {
        Some((h, w)) => (imgproc::resize_bilinear(&image, h, w)?, imgproc::resize_nearest(&mask, h, w)?),
        None => (image, mask),
    };
    let image_rel = format!("images/{stem}.png");
    let mask_rel = format!("masks/{stem}.png");
    imgproc::save_image_rgb(&out.join(&image_rel), &image)?;
    imgproc::save_mask(&out.join(&mask_rel), &mask)?;
    Ok(Some(ManifestEntry {
        id: stem.to_string(),
        image: image_rel,
        mask: Some(mask_rel),
        angle_raw: None,
        timestamp: None,
    }))
}

fn cmd_config(a: ConfigArgs) -> Result<()> {
    let cfg = RunConfig::default();
    match a.out {
        Some(path) => {
            cfg.save(&path)?;
            println!("wrote default config to {}", path.display());
        }
        None => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    let variant = TrainVariant::parse(&a.mode)?;
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", variant.code(), run.train.seed)));

    let root = data_root();
    let source = DatasetManifest::load(&resolve(&root, &run.data.source_train))?;
    let target = if variant.uses_target() {
        Some(DatasetManifest::load(&resolve(&root, &run.data.target_train))?)
    } else {
        None
    };
    let val = DatasetManifest::load(&resolve(&root, &run.data.target_val))?;

    let mut trainer = match &a.checkpoint {
        Some(ckpt) => Trainer::resume_from(run, variant, ckpt)?,
        None => Trainer::new(run, variant)?,
    };
    let report = trainer.fit(&source, target.as_ref(), &val, &out)?;
    println!(
        "trained {} to step {}: best mIoU {:.4} at step {}, final mIoU {:.4}; artifacts in {}",
        variant.code(),
        report.final_step,
        report.best_val_miou,
        report.best_step,
        report.final_val_miou,
        out.display()
    );
    Ok(())
}

fn split_manifest(run: &RunConfig, split: &str) -> Result<DatasetManifest> {
    let root = data_root();
    let rel = match split {
        "train" => &run.data.target_train,
        "val" => &run.data.target_val,
        "test" => &run.data.target_test,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?} (expected train, val or test)"
            )))
        }
    };
    DatasetManifest::load(&resolve(&root, rel))
}

/// Build the network from the config and fill it with checkpoint weights.
fn model_from_checkpoint(run: &RunConfig, ckpt_path: &Path) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(run.train.seed, "model_init", 0);
    let model = Model::new(&mut store, &mut r, run.backbone.clone(), run.model.clone())?;
    let ckpt = read_checkpoint(ckpt_path)?;
    load_model_weights(&mut store, &ckpt)?;
    Ok((model, store))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.split != "val" && a.split != "test" {
        return Err(Error::Config(format!(
            "evaluation needs an annotated split (val or test), got {:?}",
            a.split
        )));
    }
    let run = RunConfig::load(&a.config)?;
    let manifest = split_manifest(&run, &a.split)?;
    let (model, store) = model_from_checkpoint(&run, &a.checkpoint)?;
    let report = evaluate_model(&model, &store, &manifest)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("eval_{}.tsv", a.split)));
    std::fs::write(&out, report.render())
        .map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
    println!(
        "{} samples: mIoU {:.4} precision {:.4} recall {:.4}; report in {}",
        report.n_samples,
        report.miou,
        report.precision,
        report.recall,
        out.display()
    );
    Ok(())
}

fn cmd_visualize(a: VizArgs) -> Result<()> {
    if a.what != "steer_features" && a.what != "segmentation" {
        return Err(Error::Config(format!(
            "unknown figure kind {:?} (expected steer_features or segmentation)",
            a.what
        )));
    }
    let run = RunConfig::load(&a.config)?;
    let manifest = split_manifest(&run, &a.split)?;
    let (model, store) = model_from_checkpoint(&run, &a.checkpoint)?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    let n = manifest.len().min(a.limit);
    for i in 0..n {
        let s = manifest.load_sample(i)?;
        let image = s.image.clone().insert_axis(ndarray::Axis(0));
        let tape = Tape::new();
        let b = Binding::frozen(&store, &tape, Mode::Eval);
        let outs = model.forward(&b, &image, s.kind)?;
        let panel = match a.what.as_str() {
            "steer_features" => {
                let feature = outs.final_steer_feature.value();
                viz::steer_feature_panel(&s.image, &feature)?
            }
            _ => {
                let probs = outs.primary_seg_logits.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
                let probs =
                    probs.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
                viz::segmentation_panel(&s.image, s.road_mask.as_ref(), &probs)?
            }
        };
        let path = a.out.join(format!("{}_{}.png", s.id, a.what));
        imgproc::save_image_rgb(&path, &panel)?;
    }
    println!("wrote {n} {} panel(s) to {}", a.what, a.out.display());
    Ok(())
}
