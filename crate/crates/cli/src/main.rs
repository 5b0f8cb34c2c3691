//! Command-line front end for the diffusion lab: dataset generation, index
//! building, training, sampling, benchmark evaluation, and sweeps.
//!
//! Every command validates its inputs before touching the filesystem, never
//! mutates its inputs, and produces byte-identical outputs for identical
//! flags and seeds. Errors print one machine-parsable line
//! (`error[<category>]: <message>`) and exit 2 (usage/format), 3 (contract),
//! or 4 (numerical); success exits 0.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use xfuse_core::baselines::MechanismKind;
use xfuse_core::conditioning::{AreaFilters, Modality, RetrievalIndex};
use xfuse_core::diffusion::{
    make_schedule, GuidanceConfig, DEFAULT_GUIDANCE_SCALE, SCENE_GUIDANCE_SCALE,
};
use xfuse_core::error::{Error, Result};
use xfuse_core::metrics::{
    copy_generator, prepare_eval_cases, render_table, rows_to_csv, rows_to_jsonl, run_benchmark,
    spearman, BenchmarkRow, CondMode, EvalCase,
};
use xfuse_core::toydata::{
    generate_corpus_sized, largest_visible_object, load_corpus, save_corpus, Image, ToyExample,
};
use xfuse_core::trainer::{
    heldout_eps_mse, load_checkpoint, sample_images, save_checkpoint, stats_to_jsonl,
    warm_start, Scenario, TrainConfig, TrainRun, TrainedModel,
};

#[derive(Parser)]
#[command(
    name = "xfuse",
    about = "Desk-scale diffusion lab: data, indices, training, sampling, evaluation, sweeps",
    version
)]
struct Cli {
    /// Worker threads for data generation (default: all cores; env XFUSE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural sprite corpus (images, masks, manifest).
    DatasetGen(DatasetGenArgs),
    /// Build a flat retrieval index over a corpus and write it as JSON.
    IndexBuild(IndexBuildArgs),
    /// Train a model from a TOML config; writes a checkpoint and a step log.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Run one benchmark against a checkpoint (or the no-model copy baseline).
    Eval(EvalArgs),
    /// Multi-point experiments: index size/type, crop scale, sampler steps,
    /// or the full mechanism comparison table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DatasetGenArgs {
    /// Corpus seed; every example derives from (seed, id).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of examples.
    #[arg(long)]
    count: usize,
    /// Canvas edge in pixels.
    #[arg(long, default_value_t = 16)]
    canvas: usize,
    /// Output directory (created; must not already contain a manifest).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexBuildArgs {
    /// Corpus directory from dataset-gen.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding side the index is keyed by.
    #[arg(long, value_parser = parse_modality)]
    modality: Modality,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file ([corpus] + [train] tables).
    #[arg(long)]
    config: PathBuf,
    /// Vanilla-backbone checkpoint to initialize from.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Output directory (checkpoint.ckpt, log.jsonl, config.toml).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Caption to condition on.
    #[arg(long)]
    caption: String,
    /// Conditioning image file (PNG).
    #[arg(long)]
    cond_image: Option<PathBuf>,
    /// Corpus example id whose scene layout conditions the sample
    /// (requires --corpus; appends the layout's color labels to the caption).
    #[arg(long)]
    scene: Option<usize>,
    /// Corpus example id whose largest subject crop conditions the sample
    /// (requires --corpus).
    #[arg(long)]
    crop: Option<usize>,
    /// Scale applied when placing the subject crop.
    #[arg(long, default_value_t = 1.0)]
    crop_scale: f64,
    /// Corpus directory for --scene/--crop.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Sampler update count.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
    /// Sampler stochasticity (0 = deterministic).
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG file (count 1) or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; omit with --mechanism null.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `null` evaluates the no-model copy baseline without a checkpoint.
    #[arg(long)]
    mechanism: Option<String>,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Which conditioning pipeline to benchmark.
    #[arg(long, value_parser = ["vanilla", "ground-truth", "retrieve", "crop", "scene"])]
    benchmark: String,
    /// Index side for the retrieve benchmark.
    #[arg(long, value_parser = parse_modality, default_value = "text")]
    modality: Modality,
    /// Crop placement scale for the crop benchmark.
    #[arg(long, default_value_t = 1.0)]
    crop_scale: f64,
    /// Examples held out (from the end of the corpus) for evaluation.
    #[arg(long, default_value_t = 64)]
    holdout: usize,
    /// Sampler update count.
    #[arg(long, default_value_t = 32)]
    steps: usize,
    /// Guidance scale (default: standard, scene-specific for scene).
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (table.txt, rows.jsonl, rows.csv, heldout.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = ["index-size", "index-type", "crop-scale", "scene-steps", "ablation-table"])]
    kind: String,
    /// TOML config file ([corpus] + [train] + [sweep] tables).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (rows.jsonl, rows.csv, table.txt, summary.json).
    #[arg(long)]
    out: PathBuf,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::parse(s).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Config file format.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CorpusSection {
    seed: u64,
    /// Total examples; the last `holdout` are the evaluation split.
    count: usize,
    holdout: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { seed: 0, count: 576, holdout: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SweepSection {
    /// Corpus seeds averaged over (index-size).
    seeds: Vec<u64>,
    /// Index entry counts (index-size; first entry also sizes index-type).
    index_sizes: Vec<usize>,
    /// Placement scales (crop-scale).
    crop_scales: Vec<f64>,
    /// Sampler update counts (scene-steps).
    step_counts: Vec<usize>,
    /// Evaluation cases per sweep point.
    eval_count: usize,
    /// Trained checkpoint for sweeps that sample from a model; when absent,
    /// index sweeps fall back to the no-model copy baseline.
    checkpoint: Option<PathBuf>,
    /// Sampler update count for model-based sweep points.
    steps: usize,
    guidance: Option<f64>,
    seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            seeds: vec![0, 1, 2],
            index_sizes: vec![2_000, 10_000, 35_000],
            crop_scales: vec![0.1, 0.3, 0.6, 1.0],
            step_counts: vec![16, 32, 64],
            eval_count: 64,
            checkpoint: None,
            steps: 32,
            guidance: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    corpus: CorpusSection,
    train: TrainConfig,
    sweep: SweepSection,
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: FileConfig =
        toml::from_str(&text).map_err(|e| Error::format(format!("bad config: {e}")))?;
    cfg.train.validate()?;
    if cfg.corpus.count == 0 {
        return Err(Error::contract("corpus.count must be at least 1".to_string()));
    }
    if cfg.corpus.holdout >= cfg.corpus.count {
        return Err(Error::contract(format!(
            "corpus.holdout {} must leave at least one training example of {}",
            cfg.corpus.holdout, cfg.corpus.count
        )));
    }
    Ok(cfg)
}

/// Generates the configured corpus and splits off the held-out tail.
fn corpus_split(cfg: &FileConfig) -> (Vec<ToyExample>, Vec<ToyExample>) {
    let all =
        generate_corpus_sized(cfg.corpus.seed, cfg.corpus.count, cfg.train.unet.image_size);
    let train_n = cfg.corpus.count - cfg.corpus.holdout;
    let eval = all[train_n..].to_vec();
    let mut train = all;
    train.truncate(train_n);
    (train, eval)
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

fn cmd_dataset_gen(a: &DatasetGenArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::contract("--count must be at least 1".to_string()));
    }
    if a.canvas < 8 {
        return Err(Error::contract(format!("--canvas {} is below the minimum 8", a.canvas)));
    }
    if a.out.join("manifest.jsonl").exists() {
        return Err(Error::contract(format!(
            "{} already holds a corpus; refusing to overwrite",
            a.out.display()
        )));
    }
    let corpus = generate_corpus_sized(a.seed, a.count, a.canvas);
    save_corpus(&a.out, &corpus)?;
    println!("wrote {} examples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_index_build(a: &IndexBuildArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let index = RetrievalIndex::build(&corpus, a.modality)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    index.save(&a.out)?;
    println!(
        "indexed {} entries ({}) into {}",
        index.len(),
        index.modality.name(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    let (train, eval) = corpus_split(&cfg);
    let start: Option<TrainedModel<f64>> = match &a.warm_start {
        Some(path) => Some(warm_start(path, cfg.train.mechanism)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out)?;
    let total = cfg.train.total_steps;
    let mut run = TrainRun::new(cfg.train.clone(), train.clone(), start)?;
    let stats = run.run(|s| {
        if s.step % 100 == 0 || s.step + 1 == total {
            eprintln!("step {:>6}/{total}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr);
        }
    })?;
    save_checkpoint(a.out.join("checkpoint.ckpt"), &run.model, &cfg.train, total)?;
    std::fs::write(a.out.join("log.jsonl"), stats_to_jsonl(&stats)?)?;
    std::fs::write(
        a.out.join("config.toml"),
        toml::to_string_pretty(&cfg).map_err(|e| Error::format(e.to_string()))?,
    )?;
    if !eval.is_empty() {
        let index;
        let mode = match cfg.train.scenario {
            Scenario::Vanilla => CondMode::None,
            Scenario::Retrieve => {
                index = RetrievalIndex::build(&train, Modality::Text)?;
                CondMode::Retrieved { index: &index, train: &train }
            }
            Scenario::Crop => CondMode::Crop {
                scale: 1.0,
                filters: AreaFilters::toy_default(cfg.train.unet.image_size),
            },
            Scenario::Scene => CondMode::Scene,
        };
        let mse = heldout_eps_mse(&run.model, &eval, &mode, &cfg.train, 4, cfg.corpus.seed)?;
        let report = serde_json::json!({
            "heldout_eps_mse": mse,
            "heldout_examples": eval.len(),
            "conditioning": mode.name(),
        });
        std::fs::write(a.out.join("heldout.json"), format!("{report:#}\n"))?;
        eprintln!("held-out eps-mse {mse:.4} ({})", mode.name());
    }
    println!("checkpoint written to {}", a.out.join("checkpoint.ckpt").display());
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::contract("--count must be at least 1".to_string()));
    }
    let sources =
        [a.cond_image.is_some(), a.scene.is_some(), a.crop.is_some()].iter().filter(|&&x| x).count();
    if sources > 1 {
        return Err(Error::contract(
            "--cond-image, --scene, and --crop are mutually exclusive".to_string(),
        ));
    }
    let loaded = load_checkpoint::<f64, _>(&a.checkpoint)?;
    let canvas = loaded.config.unet.image_size;
    let schedule = make_schedule(loaded.config.schedule, loaded.config.timesteps)?;

    let mut caption = a.caption.clone();
    let cond: Option<Image> = if let Some(path) = &a.cond_image {
        let img = Image::load_png(path)?;
        if img.width != canvas || img.height != canvas {
            return Err(Error::dim(format!(
                "conditioning image is {}x{}, model expects {canvas}x{canvas}",
                img.width, img.height
            )));
        }
        Some(img)
    } else if a.scene.is_some() || a.crop.is_some() {
        let dir = a.corpus.as_ref().ok_or_else(|| {
            Error::contract("--scene/--crop need --corpus to resolve the example id".to_string())
        })?;
        let corpus = load_corpus(dir)?;
        if let Some(id) = a.scene {
            let ex = find_example(&corpus, id)?;
            let spec = xfuse_core::conditioning::scene_from_example(ex);
            let (img, suffix) = xfuse_core::conditioning::render_scene(&spec)?;
            caption = xfuse_core::conditioning::scene_caption(&caption, &suffix);
            Some(img)
        } else {
            let id = a.crop.expect("checked above");
            let ex = find_example(&corpus, id)?;
            let (_, mask) = largest_visible_object(ex).ok_or_else(|| {
                Error::contract(format!("example {id} has no visible object"))
            })?;
            let filters = AreaFilters::toy_default(canvas);
            let crop = xfuse_core::conditioning::crop_subject(&ex.image, mask, &filters)
                .ok_or_else(|| {
                    Error::contract(format!(
                        "example {id}'s subject fails the area filters"
                    ))
                })?;
            let params = xfuse_core::conditioning::AffineParams {
                scale: [a.crop_scale, a.crop_scale],
                translate_frac: 0.0,
                degrees: [0.0, 0.0],
            };
            let mut r = xfuse_core::numerics::rng::stream_keyed(a.seed, "cli-crop", &[id as u64]);
            Some(xfuse_core::conditioning::augment_affine(&crop, &params, canvas, &mut r)?)
        }
    } else {
        None
    };

    let guidance = GuidanceConfig {
        scale: a.guidance.unwrap_or(if a.scene.is_some() {
            SCENE_GUIDANCE_SCALE
        } else {
            DEFAULT_GUIDANCE_SCALE
        }),
        ..GuidanceConfig::default()
    };
    guidance.validate()?;
    let captions = vec![caption; a.count];
    let conds: Option<Vec<Image>> = cond.map(|c| vec![c; a.count]);
    let images = sample_images(
        &loaded.model,
        &schedule,
        &captions,
        conds.as_deref(),
        &guidance,
        a.steps,
        a.eta,
        a.seed,
    )?;

    if a.count == 1 && a.out.extension().map(|e| e == "png").unwrap_or(false) {
        if let Some(parent) = a.out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        images[0].save_png(&a.out)?;
        println!("wrote {}", a.out.display());
    } else {
        std::fs::create_dir_all(&a.out)?;
        for (i, img) in images.iter().enumerate() {
            img.save_png(a.out.join(format!("sample_{i:03}.png")))?;
        }
        println!("wrote {} samples to {}", images.len(), a.out.display());
    }
    Ok(())
}

fn find_example(corpus: &[ToyExample], id: usize) -> Result<&ToyExample> {
    corpus
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::contract(format!("example id {id} not in corpus")))
}

/// Per-case generator that samples one image from a trained model,
/// deterministically keyed by the case index.
fn model_generator<'m>(
    model: &'m TrainedModel<f64>,
    schedule: &'m xfuse_core::diffusion::NoiseSchedule,
    guidance: GuidanceConfig,
    steps: usize,
    seed: u64,
) -> impl FnMut(usize, &EvalCase) -> Result<Image> + 'm {
    move |idx, case| {
        let captions = vec![case.caption.clone()];
        let conds: Option<Vec<Image>> = case.cond.clone().map(|c| vec![c]);
        let images = sample_images(
            model,
            schedule,
            &captions,
            conds.as_deref(),
            &guidance,
            steps,
            0.0,
            seed.wrapping_add(1 + idx as u64),
        )?;
        Ok(images.into_iter().next().expect("one caption, one image"))
    }
}

struct BenchmarkSetup<'a> {
    mode: CondMode<'a>,
    label: String,
}

fn eval_mode<'a>(
    benchmark: &str,
    modality: Modality,
    crop_scale: f64,
    canvas: usize,
    train: &'a [ToyExample],
    index_slot: &'a mut Option<RetrievalIndex>,
) -> Result<BenchmarkSetup<'a>> {
    let setup = match benchmark {
        "vanilla" => BenchmarkSetup { mode: CondMode::None, label: "vanilla".to_string() },
        "ground-truth" => {
            BenchmarkSetup { mode: CondMode::GroundTruth, label: "ground-truth".to_string() }
        }
        "retrieve" => {
            *index_slot = Some(RetrievalIndex::build(train, modality)?);
            BenchmarkSetup {
                mode: CondMode::Retrieved { index: index_slot.as_ref().expect("set"), train },
                label: format!("retrieve[{}]", modality.name()),
            }
        }
        "crop" => BenchmarkSetup {
            mode: CondMode::Crop { scale: crop_scale, filters: AreaFilters::toy_default(canvas) },
            label: format!("crop@{crop_scale}"),
        },
        "scene" => BenchmarkSetup { mode: CondMode::Scene, label: "scene".to_string() },
        other => return Err(Error::contract(format!("unknown benchmark '{other}'"))),
    };
    Ok(setup)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let null_mode = matches!(a.mechanism.as_deref(), Some("null") | Some("null_copy"));
    if let Some(m) = &a.mechanism {
        if !null_mode {
            return Err(Error::contract(format!(
                "--mechanism only accepts 'null' (got '{m}'); trained mechanisms come from the \
                 checkpoint"
            )));
        }
    }
    if null_mode == a.checkpoint.is_some() {
        return Err(Error::contract(
            "provide exactly one of --checkpoint or --mechanism null".to_string(),
        ));
    }
    let corpus = load_corpus(&a.corpus)?;
    if a.holdout == 0 || a.holdout >= corpus.len() {
        return Err(Error::contract(format!(
            "--holdout {} must leave both splits nonempty for {} examples",
            a.holdout,
            corpus.len()
        )));
    }
    let (train, eval) = corpus.split_at(corpus.len() - a.holdout);
    let canvas = eval[0].image.width;
    let mut index_slot = None;
    let setup = eval_mode(&a.benchmark, a.modality, a.crop_scale, canvas, train, &mut index_slot)?;
    let cases = prepare_eval_cases(eval, &setup.mode, a.seed)?;
    let train_ids: Vec<usize> = train.iter().map(|e| e.id).collect();

    let scale = a.guidance.unwrap_or(if a.benchmark == "scene" {
        SCENE_GUIDANCE_SCALE
    } else {
        DEFAULT_GUIDANCE_SCALE
    });
    let guidance = GuidanceConfig { scale, ..GuidanceConfig::default() };
    guidance.validate()?;

    let row = if null_mode {
        let mut generate = copy_generator();
        run_benchmark(&setup.label, "null_copy", &train_ids, &cases, &mut generate)?
    } else {
        let loaded = load_checkpoint::<f64, _>(a.checkpoint.as_ref().expect("checked"))?;
        if loaded.config.unet.image_size != canvas {
            return Err(Error::contract(format!(
                "checkpoint expects {0}x{0} images, corpus is {canvas}x{canvas}",
                loaded.config.unet.image_size
            )));
        }
        let schedule = make_schedule(loaded.config.schedule, loaded.config.timesteps)?;
        let variant = loaded.model.mechanism().name().to_string();
        let mut generate =
            model_generator(&loaded.model, &schedule, guidance, a.steps, a.seed);
        run_benchmark(&setup.label, &variant, &train_ids, &cases, &mut generate)?
    };

    write_report(&a.out, &[row])?;
    println!("report written to {}", a.out.display());
    Ok(())
}

fn write_report(dir: &Path, rows: &[BenchmarkRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("table.txt"), render_table(rows))?;
    std::fs::write(dir.join("rows.jsonl"), rows_to_jsonl(rows)?)?;
    std::fs::write(dir.join("rows.csv"), rows_to_csv(rows))?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    match a.kind.as_str() {
        "index-size" => sweep_index_size(&cfg, &a.out),
        "index-type" => sweep_index_type(&cfg, &a.out),
        "crop-scale" => sweep_crop_scale(&cfg, &a.out),
        "scene-steps" => sweep_scene_steps(&cfg, &a.out),
        "ablation-table" => sweep_ablation_table(&cfg, &a.out),
        other => Err(Error::contract(format!("unknown sweep kind '{other}'"))),
    }
}

/// Loads the sweep's checkpoint when one is configured.
fn sweep_model(cfg: &FileConfig) -> Result<Option<(TrainedModel<f64>, TrainConfig)>> {
    match &cfg.sweep.checkpoint {
        Some(path) => {
            let loaded = load_checkpoint::<f64, _>(path)?;
            Ok(Some((loaded.model, loaded.config)))
        }
        None => Ok(None),
    }
}

fn benchmark_point(
    cfg: &FileConfig,
    label: &str,
    train: &[ToyExample],
    cases: &[EvalCase],
    model: Option<&(TrainedModel<f64>, TrainConfig)>,
    guidance_scale: f64,
    steps: usize,
) -> Result<BenchmarkRow> {
    let train_ids: Vec<usize> = train.iter().map(|e| e.id).collect();
    match model {
        None => {
            let mut generate = copy_generator();
            run_benchmark(label, "null_copy", &train_ids, cases, &mut generate)
        }
        Some((model, mcfg)) => {
            let schedule = make_schedule(mcfg.schedule, mcfg.timesteps)?;
            let guidance = GuidanceConfig { scale: guidance_scale, ..GuidanceConfig::default() };
            let variant = model.mechanism().name().to_string();
            let mut generate =
                model_generator(model, &schedule, guidance, steps, cfg.sweep.seed);
            run_benchmark(label, &variant, &train_ids, cases, &mut generate)
        }
    }
}

fn sweep_index_size(cfg: &FileConfig, out: &Path) -> Result<()> {
    let sizes = &cfg.sweep.index_sizes;
    if sizes.is_empty() {
        return Err(Error::contract("sweep.index_sizes is empty".to_string()));
    }
    let model = sweep_model(cfg)?;
    let max = *sizes.iter().max().expect("nonempty");
    let canvas = cfg.train.unet.image_size;
    let scale = cfg.sweep.guidance.unwrap_or(DEFAULT_GUIDANCE_SCALE);
    let mut rows = Vec::new();
    for &seed in &cfg.sweep.seeds {
        // One generation covers every size: example id streams make the
        // prefix of a larger corpus identical to the smaller corpus.
        let all = generate_corpus_sized(seed, max + cfg.sweep.eval_count, canvas);
        let (pool, eval) = all.split_at(max);
        for &size in sizes {
            let train = &pool[..size];
            let index = RetrievalIndex::build(train, Modality::Text)?;
            let mode = CondMode::Retrieved { index: &index, train };
            let cases = prepare_eval_cases(eval, &mode, cfg.sweep.seed)?;
            rows.push(benchmark_point(
                cfg,
                &format!("n={size} seed={seed}"),
                train,
                &cases,
                model.as_ref(),
                scale,
                cfg.sweep.steps,
            )?);
            eprintln!("index-size: n={size} seed={seed} done");
        }
    }
    write_report(out, &rows)?;
    // Per-size means across seeds, in size order.
    let mut summary = Vec::new();
    for &size in sizes {
        let pts: Vec<f64> = rows
            .iter()
            .filter(|r| r.label.starts_with(&format!("n={size} ")))
            .map(|r| r.frechet)
            .collect();
        summary.push(serde_json::json!({
            "index_size": size,
            "mean_frechet": pts.iter().sum::<f64>() / pts.len() as f64,
            "seeds": pts.len(),
        }));
    }
    std::fs::write(
        out.join("summary.json"),
        format!("{:#}\n", serde_json::Value::Array(summary)),
    )?;
    println!("index-size sweep written to {}", out.display());
    Ok(())
}

fn sweep_index_type(cfg: &FileConfig, out: &Path) -> Result<()> {
    let size = cfg.sweep.index_sizes.first().copied().unwrap_or(2_000);
    let model = sweep_model(cfg)?;
    let canvas = cfg.train.unet.image_size;
    let scale = cfg.sweep.guidance.unwrap_or(DEFAULT_GUIDANCE_SCALE);
    let all = generate_corpus_sized(cfg.corpus.seed, size + cfg.sweep.eval_count, canvas);
    let (train, eval) = all.split_at(size);
    let mut rows = Vec::new();
    for modality in [Modality::Text, Modality::Image] {
        let index = RetrievalIndex::build(train, modality)?;
        let mode = CondMode::Retrieved { index: &index, train };
        let cases = prepare_eval_cases(eval, &mode, cfg.sweep.seed)?;
        rows.push(benchmark_point(
            cfg,
            &format!("index={}", modality.name()),
            train,
            &cases,
            model.as_ref(),
            scale,
            cfg.sweep.steps,
        )?);
        eprintln!("index-type: {} done", modality.name());
    }
    write_report(out, &rows)?;
    println!("index-type sweep written to {}", out.display());
    Ok(())
}

fn sweep_crop_scale(cfg: &FileConfig, out: &Path) -> Result<()> {
    let model = sweep_model(cfg)?.ok_or_else(|| {
        Error::contract("crop-scale sweep needs sweep.checkpoint (a crop-trained model)".to_string())
    })?;
    let scales = &cfg.sweep.crop_scales;
    if scales.is_empty() {
        return Err(Error::contract("sweep.crop_scales is empty".to_string()));
    }
    let (train, eval) = corpus_split(cfg);
    let canvas = cfg.train.unet.image_size;
    let scale_g = cfg.sweep.guidance.unwrap_or(DEFAULT_GUIDANCE_SCALE);
    let mut rows = Vec::new();
    for &s in scales {
        let mode = CondMode::Crop { scale: s, filters: AreaFilters::toy_default(canvas) };
        let cases = prepare_eval_cases(&eval, &mode, cfg.sweep.seed)?;
        let cases = &cases[..cases.len().min(cfg.sweep.eval_count)];
        rows.push(benchmark_point(
            cfg,
            &format!("scale={s}"),
            &train,
            cases,
            Some(&model),
            scale_g,
            cfg.sweep.steps,
        )?);
        eprintln!("crop-scale: scale={s} done");
    }
    write_report(out, &rows)?;
    let subject: Vec<f64> = rows.iter().map(|r| r.subject_alignment.unwrap_or(f64::NAN)).collect();
    let text: Vec<f64> = rows.iter().map(|r| r.text_alignment).collect();
    let summary = serde_json::json!({
        "scales": scales,
        "subject_alignment": subject,
        "text_alignment": text,
        "spearman_subject_vs_scale": spearman(scales, &subject)?,
        "spearman_text_vs_scale": spearman(scales, &text)?,
    });
    std::fs::write(out.join("summary.json"), format!("{summary:#}\n"))?;
    println!("crop-scale sweep written to {}", out.display());
    Ok(())
}

fn sweep_scene_steps(cfg: &FileConfig, out: &Path) -> Result<()> {
    let model = sweep_model(cfg)?.ok_or_else(|| {
        Error::contract("scene-steps sweep needs sweep.checkpoint (a scene-trained model)".to_string())
    })?;
    let (train, eval) = corpus_split(cfg);
    let scale = cfg.sweep.guidance.unwrap_or(SCENE_GUIDANCE_SCALE);
    let cases = prepare_eval_cases(&eval, &CondMode::Scene, cfg.sweep.seed)?;
    let cases = &cases[..cases.len().min(cfg.sweep.eval_count)];
    let mut rows = Vec::new();
    for &steps in &cfg.sweep.step_counts {
        rows.push(benchmark_point(
            cfg,
            &format!("steps={steps}"),
            &train,
            cases,
            Some(&model),
            scale,
            steps,
        )?);
        eprintln!("scene-steps: steps={steps} done");
    }
    write_report(out, &rows)?;
    println!("scene-steps sweep written to {}", out.display());
    Ok(())
}

fn sweep_ablation_table(cfg: &FileConfig, out: &Path) -> Result<()> {
    let (train, eval) = corpus_split(cfg);
    let index = RetrievalIndex::build(&train, Modality::Text)?;
    let mode = CondMode::Retrieved { index: &index, train: &train };
    let cases = prepare_eval_cases(&eval, &mode, cfg.sweep.seed)?;
    let cases = &cases[..cases.len().min(cfg.sweep.eval_count)];
    let train_ids: Vec<usize> = train.iter().map(|e| e.id).collect();
    let scale = cfg.sweep.guidance.unwrap_or(DEFAULT_GUIDANCE_SCALE);
    let mechanisms = [
        MechanismKind::XFuse,
        MechanismKind::ChannelConcat,
        MechanismKind::EmbedToken,
        MechanismKind::InitImage,
        MechanismKind::NullCopy,
    ];
    let mut rows = Vec::new();
    for mechanism in mechanisms {
        let label = format!("retrieve+{}", mechanism.name());
        if mechanism == MechanismKind::NullCopy {
            let mut generate = copy_generator();
            rows.push(run_benchmark(&label, mechanism.name(), &train_ids, cases, &mut generate)?);
            continue;
        }
        let mut tcfg = cfg.train.clone();
        tcfg.mechanism = mechanism;
        if mechanism == MechanismKind::InitImage {
            tcfg.scenario = Scenario::Vanilla;
        }
        eprintln!("ablation-table: training {} ({} steps)", mechanism.name(), tcfg.total_steps);
        let mut run = TrainRun::<f64>::new(tcfg.clone(), train.clone(), None)?;
        run.run(|s| {
            if s.step % 200 == 0 {
                eprintln!("  {} step {:>6} loss {:.4}", mechanism.name(), s.step, s.loss);
            }
        })?;
        let schedule = make_schedule(tcfg.schedule, tcfg.timesteps)?;
        let guidance = GuidanceConfig { scale, ..GuidanceConfig::default() };
        let mut generate =
            model_generator(&run.model, &schedule, guidance, cfg.sweep.steps, cfg.sweep.seed);
        rows.push(run_benchmark(&label, mechanism.name(), &train_ids, cases, &mut generate)?);
        save_checkpoint(
            out.join(format!("{}.ckpt", mechanism.name())),
            &run.model,
            &tcfg,
            tcfg.total_steps,
        )?;
    }
    write_report(out, &rows)?;
    println!("ablation table written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point.
// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.or_else(|| {
        std::env::var("XFUSE_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::contract("--threads must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::DatasetGen(a) => cmd_dataset_gen(a),
        Command::IndexBuild(a) => cmd_index_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error[{}]: {e}", e.category());
        std::process::exit(e.exit_code());
    }
}
