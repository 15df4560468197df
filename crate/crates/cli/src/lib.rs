//! Subcommands of the `patholab` binary.

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use patholab_core::checkpoint;
use patholab_core::conditioning::{augment_mask, build_bbox_mask, AnnotationRecord, BoxAnnotation};
use patholab_core::detect::{
    classifier_accuracy, compute_anchors, evaluate_detector, train_classifier, train_supervised, ClassifierSample, ClassifierSpec,
    DetSample, DetectorSpec, DEFAULT_BOXES, DEFAULT_DETECTION_THRESHOLD,
};
use patholab_core::eval::{cpm, froc, match_and_count, tsne, DetectionSet, EmbeddingConfig, Prediction};
use patholab_core::io::{read_jsonl, write_jsonl, write_pgm};
use patholab_core::objectives::LossLog;
use patholab_core::phantom::{
    generate_set, make_splits, random_classic_augment, read_bundle, write_bundle, BundleManifest, ClassMix, BUNDLE_ANNOTATIONS,
    BUNDLE_MANIFEST,
};
use patholab_core::progressive::{load_stage_checkpoint, save_stage_checkpoint, ProgressiveTrainer, TrainingSample};
use patholab_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use config::{ExperimentConfig, Family};

/// Default root for outputs when neither `--out` nor the config names one.
pub const DATA_ROOT_ENV: &str = "PATHOLAB_DATA_ROOT";
pub const VTT_ADDR_ENV: &str = "PATHOLAB_VTT_ADDR";
pub const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configs or inputs. Exit code 1.
    #[error("{0}")]
    User(String),
    /// Failure while running. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<patholab_core::Error> for CliError {
    fn from(e: patholab_core::Error) -> Self {
        use patholab_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) => CliError::User(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "patholab", version, about = "Pathology-aware GAN augmentation lab")]
pub struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Force single-worker execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom scene bundle.
    Phantom {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        min_lesions: usize,
        #[arg(long, default_value_t = 2)]
        max_lesions: usize,
    },
    /// Train a progressive GAN from the config.
    Train,
    /// Sample a trained generator into a slice bundle.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Apply random classic augmentations to a slice bundle.
    Augment {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
    },
    /// Train and test the detector with the configured augmentation mix.
    Detect {
        /// Synthetic bundle for the GAN pool; overrides `da.synthetic`.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Train and test the lesion / no-lesion classifier.
    Classify,
    /// Score prediction records against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        score_threshold: f64,
    },
    /// Embed bundle images with t-SNE and plot them.
    Tsne {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
    },
    /// Serve Visual Turing Test sessions over HTTP.
    VttServe {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long, env = VTT_ADDR_ENV, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Summarize a finished run directory.
    Report { run: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Train => "train",
            Command::Synth { .. } => "synth",
            Command::Augment { .. } => "augment",
            Command::Detect { .. } => "detect",
            Command::Classify => "classify",
            Command::Evaluate { .. } => "evaluate",
            Command::Tsne { .. } => "tsne",
            Command::VttServe { .. } => "vtt-serve",
            Command::Report { .. } => "report",
        }
    }
}

/// Written next to every run's outputs, also when the run fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub seed: u64,
    pub deterministic: bool,
    pub workers: usize,
    pub files: Vec<String>,
    /// `"complete"` or `"partial"`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn produced(&mut self, name: &str) {
        if !self.manifest.files.iter().any(|f| f == name) {
            self.manifest.files.push(name.to_string());
        }
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.file(name), bytes)?;
        self.produced(name);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn close(mut self, outcome: &Result<()>) -> Result<()> {
        if let Err(e) = outcome {
            self.manifest.status = "partial".into();
            self.manifest.error = Some(e.to_string());
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.out.join(RUN_MANIFEST), text + "\n")?;
        Ok(())
    }
}

/// A 2-D slice with its boxes.
struct Slice {
    id: String,
    image: Tensor<f32>,
    boxes: Vec<BoxAnnotation>,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::User(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::User(format!("`{}` needs --config", cli.command.name())))?;
    require(path, "config")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: Option<&ExperimentConfig>, seed: u64) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(out) = cfg.and_then(|c| c.output.clone()) {
        return out;
    }
    let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-{seed}", cli.command.name()))
}

fn read_slices(dir: &Path) -> Result<(BundleManifest, Vec<Slice>)> {
    require(&dir.join(BUNDLE_MANIFEST), "bundle manifest")?;
    let (manifest, scenes) = read_bundle(dir)?;
    if manifest.dims != 2 {
        return Err(CliError::User(format!("{} holds {}-D scenes; expected 2-D slices", dir.display(), manifest.dims)));
    }
    let slices = scenes.into_iter().map(|s| Slice { id: s.id, image: s.image, boxes: s.boxes }).collect();
    Ok((manifest, slices))
}

fn dataset(cfg: &ExperimentConfig) -> Result<Vec<Slice>> {
    let d = &cfg.dataset;
    if let Some(dir) = &d.bundle {
        let (manifest, slices) = read_slices(dir)?;
        if manifest.extent != [d.size, d.size] {
            return Err(CliError::User(format!(
                "dataset.bundle: extent {:?} does not match dataset.size {}",
                manifest.extent, d.size
            )));
        }
        return Ok(slices);
    }
    let scenes = generate_set(cfg.seed, d.count, 2, &[d.size, d.size], d.min_lesions..=d.max_lesions, ClassMix(d.class_mix))?;
    Ok(scenes
        .into_iter()
        .map(|s| Slice {
            id: s.id(),
            image: s.image,
            boxes: s.boxes,
        })
        .collect())
}

struct Split {
    train: Vec<Slice>,
    validation: Vec<Slice>,
    test: Vec<Slice>,
}

fn split(cfg: &ExperimentConfig, slices: Vec<Slice>) -> Result<Split> {
    let s = make_splits(slices.len(), cfg.dataset.splits, cfg.seed)?;
    let mut slots: Vec<Option<Slice>> = slices.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("splits are disjoint")).collect::<Vec<_>>();
    Ok(Split {
        train: take(&s.train),
        validation: take(&s.validation),
        test: take(&s.test),
    })
}

fn det_samples(slices: &[Slice]) -> Result<Vec<DetSample>> {
    Ok(slices.iter().map(|s| DetSample::from_slice(&s.image, s.boxes.clone())).collect::<patholab_core::Result<_>>()?)
}

/// Write `(id, image (H, W), boxes)` items in the bundle layout.
fn write_slice_bundle(dir: &Path, seed: u64, items: &[(String, Tensor<f32>, Vec<BoxAnnotation>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let first = items.first().ok_or_else(|| CliError::User("nothing to write".into()))?;
    let mut files = Vec::with_capacity(items.len() + 1);
    let mut records = Vec::new();
    for (id, image, boxes) in items {
        let name = format!("{id}.pgm");
        write_pgm(&dir.join(&name), image)?;
        files.push(name);
        records.extend(boxes.iter().map(|b| AnnotationRecord::new(id.clone(), b)));
    }
    write_jsonl(&dir.join(BUNDLE_ANNOTATIONS), &records)?;
    files.push(BUNDLE_ANNOTATIONS.to_string());
    let manifest = BundleManifest {
        seed,
        count: items.len(),
        dims: 2,
        extent: first.1.shape().to_vec(),
        class_mix: ClassMix::default(),
        lesion_total: records.len(),
        files,
    };
    fs::write(dir.join(BUNDLE_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Parse arguments already split by clap and run the command.
pub fn run(cli: Cli) -> Result<()> {
    let workers = if cli.deterministic { 1 } else { cli.workers.max(1) };
    match &cli.command {
        Command::VttServe { data_dir, real, synthetic, addr } => return vtt_serve(data_dir, real, synthetic, addr),
        Command::Report { run } => return report(run),
        Command::Evaluate { .. } if cli.out.is_none() => return evaluate(&cli, None),
        _ => {}
    }
    let cfg = match &cli.command {
        Command::Phantom { .. } | Command::Augment { .. } | Command::Evaluate { .. } | Command::Tsne { .. } => None,
        _ => Some(load_config(&cli)?),
    };
    let seed = cfg.as_ref().map(|c| c.seed).or(cli.seed).unwrap_or(0);
    let out = output_dir(&cli, cfg.as_ref(), seed);
    fs::create_dir_all(&out).map_err(|e| CliError::User(format!("cannot create output directory {}: {e}", out.display())))?;
    let mut run = Run {
        out,
        manifest: RunManifest {
            command: cli.command.name().to_string(),
            config_hash: cfg.as_ref().map(ExperimentConfig::hash),
            seed,
            deterministic: cli.deterministic,
            workers,
            files: Vec::new(),
            status: "complete".into(),
            error: None,
        },
    };
    if let Some(cfg) = &cfg {
        run.write("config.toml", cfg.to_toml())?;
    }
    let outcome = match (&cli.command, &cfg) {
        (Command::Phantom { count, dims, size, min_lesions, max_lesions }, _) => {
            phantom(&mut run, seed, *count, *dims, *size, *min_lesions, *max_lesions)
        }
        (Command::Train, Some(cfg)) => train(&mut run, cfg),
        (Command::Synth { checkpoint, count }, Some(cfg)) => synth(&mut run, cfg, checkpoint, *count),
        (Command::Augment { bundle, copies }, _) => augment(&mut run, seed, bundle, *copies),
        (Command::Detect { synthetic }, Some(cfg)) => detect(&mut run, cfg, synthetic.as_deref()),
        (Command::Classify, Some(cfg)) => classify(&mut run, cfg),
        (Command::Evaluate { .. }, _) => evaluate(&cli, Some(&mut run)),
        (Command::Tsne { bundle, synthetic, perplexity, iterations }, _) => {
            tsne_plot(&mut run, seed, bundle, synthetic.as_deref(), *perplexity, *iterations)
        }
        _ => unreachable!("handled above"),
    };
    run.close(&outcome)?;
    outcome
}

fn phantom(run: &mut Run, seed: u64, count: usize, dims: usize, size: usize, min_lesions: usize, max_lesions: usize) -> Result<()> {
    if count == 0 || min_lesions > max_lesions {
        return Err(CliError::User("phantom: need count >= 1 and min-lesions <= max-lesions".into()));
    }
    let extent = vec![size; dims];
    let scenes = generate_set(seed, count, dims, &extent, min_lesions..=max_lesions, ClassMix::default())?;
    let manifest = write_bundle(&run.out, seed, ClassMix::default(), &scenes)?;
    for f in &manifest.files {
        run.produced(f);
    }
    run.produced(BUNDLE_MANIFEST);
    println!("wrote {} scenes ({} lesions) to {}", manifest.count, manifest.lesion_total, run.out.display());
    Ok(())
}

fn train(run: &mut Run, cfg: &ExperimentConfig) -> Result<()> {
    let parts = split(cfg, dataset(cfg)?)?;
    let size = cfg.dataset.size;
    let conditional = cfg.model.family == Family::Cpggan;
    let data = parts
        .train
        .iter()
        .map(|s| {
            let mask = if conditional { Some(build_bbox_mask(&s.boxes, [size, size])?.as_channel()) } else { None };
            Ok(TrainingSample {
                image: s.image.reshape(vec![1, size, size])?,
                mask,
            })
        })
        .collect::<patholab_core::Result<Vec<_>>>()?;
    let mut trainer = ProgressiveTrainer::new(cfg.progressive(), 1)?;
    let total = trainer.blueprint.schedule.total_steps();
    let mut log = LossLog::create(&run.file("losses.jsonl"))?;
    run.produced("losses.jsonl");
    let losses = trainer.train(&data, total, Some(&mut log));
    log.flush()?;
    let losses = losses?;

    save_stage_checkpoint(&run.file("generator.glt"), &trainer.params, &trainer.sidecar())?;
    run.produced("generator.glt");
    run.produced("generator.json");
    let pick = |f: fn(&patholab_core::progressive::StepLosses) -> f64| losses.iter().map(|l| (l.step as f64, f(l))).collect::<Vec<_>>();
    let svg = plot::line_chart(
        "Training losses",
        "step",
        "loss",
        &[("critic", pick(|l| l.critic)), ("generator", pick(|l| l.generator)), ("gradient penalty", pick(|l| l.penalty))],
    );
    run.write("losses.svg", svg)?;
    let last = losses.last();
    run.write_json(
        "summary.json",
        &json!({
            "family": cfg.model.family,
            "steps": total,
            "stages": trainer.blueprint.schedule.stages(),
            "train_slices": data.len(),
            "final": last,
        }),
    )?;
    println!("trained {total} steps over {} stages; outputs in {}", trainer.blueprint.schedule.stages(), run.out.display());
    Ok(())
}

fn synth(run: &mut Run, cfg: &ExperimentConfig, ckpt: &Path, count: usize) -> Result<()> {
    require(ckpt, "checkpoint")?;
    let (params, sidecar) = load_stage_checkpoint(ckpt)?;
    let mut trainer = ProgressiveTrainer::resume(cfg.progressive(), 1, params, &sidecar)?;
    let size = cfg.dataset.size;
    let parts = split(cfg, dataset(cfg)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let (boxes, masks) = if cfg.model.family == Family::Cpggan {
            let src = &parts.train[i % parts.train.len()];
            let (boxes, mask, _) = augment_mask(&src.boxes, [size, size], &mut rng)?;
            (boxes, Some(Tensor::stack(&[mask.as_channel()])?))
        } else {
            (Vec::new(), None)
        };
        let z = trainer.sample_latent(1);
        let img = trainer.generate(&z, masks.as_ref())?;
        items.push((format!("synth-{i:04}"), img.reshape(vec![size, size])?, boxes));
    }
    let dir = run.file("bundle");
    write_slice_bundle(&dir, cfg.seed, &items)?;
    run.produced("bundle");
    println!("wrote {count} synthetic slices to {}", dir.display());
    Ok(())
}

fn augment(run: &mut Run, seed: u64, bundle: &Path, copies: usize) -> Result<()> {
    let (_, slices) = read_slices(bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(slices.len() * copies);
    let mut specs = Vec::new();
    for s in &slices {
        for k in 0..copies {
            let (image, boxes, spec) = random_classic_augment(&s.image, &s.boxes, -1.0, &mut rng)?;
            let id = format!("{}-aug{k}", s.id);
            specs.push(json!({ "id": id, "spec": spec }));
            items.push((id, image, boxes));
        }
    }
    let dir = run.file("bundle");
    write_slice_bundle(&dir, seed, &items)?;
    run.produced("bundle");
    run.write_json("transforms.json", &specs)?;
    println!("wrote {} augmented slices to {}", items.len(), dir.display());
    Ok(())
}

/// Sensitivity and FPs per slice at `iou`, plus the FROC curve and CPM
/// when there is ground truth.
fn detection_metrics(d: &DetectionSet, iou: f64, score_threshold: f64) -> Result<serde_json::Value> {
    let m = match_and_count(d, iou, score_threshold)?;
    let curve = if m.truth > 0 { Some(froc(d, iou)?) } else { None };
    Ok(json!({
        "iou_threshold": iou,
        "score_threshold": score_threshold,
        "sensitivity": m.sensitivity,
        "fps_per_slice": m.fps_per_unit,
        "true_positives": m.true_positives,
        "false_positives": m.false_positives,
        "truth": m.truth,
        "slices": m.units,
        "cpm": curve.as_ref().map(cpm),
        "froc": curve.as_ref().map(|c| c.rates()),
    }))
}

fn froc_svg(metrics: &[serde_json::Value]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = metrics
        .iter()
        .map(|m| {
            let pts: Vec<(f64, f64)> = serde_json::from_value(m["froc"].clone()).unwrap_or_default();
            (format!("IoU {}", m["iou_threshold"]), pts)
        })
        .collect();
    let named: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    plot::line_chart("FROC", "false positives per slice", "sensitivity", &named)
}

fn detect(run: &mut Run, cfg: &ExperimentConfig, synthetic: Option<&Path>) -> Result<()> {
    let size = cfg.dataset.size;
    let parts = split(cfg, dataset(cfg)?)?;
    let shapes: Vec<(f64, f64)> = parts
        .train
        .iter()
        .flat_map(|s| s.boxes.iter())
        .map(|b| (b.extent[1] as f64 / size as f64, b.extent[0] as f64 / size as f64))
        .collect();
    let anchors = compute_anchors(&shapes, DEFAULT_BOXES, cfg.seed)?;
    let spec = DetectorSpec::new(size, cfg.detector.grid, anchors)?;
    let mix = cfg.da.mix();
    let pool = match synthetic.map(Path::to_path_buf).or_else(|| cfg.da.synthetic.clone()) {
        Some(dir) if mix.gan => det_samples(&read_slices(&dir)?.1)?,
        None if mix.gan => return Err(CliError::User("da.synthetic: required when da.gan is enabled".into())),
        _ => Vec::new(),
    };
    let sched = cfg.train_schedule();
    let model = train_supervised(&spec, &det_samples(&parts.train)?, &det_samples(&parts.validation)?, &pool, &mix, &sched)?;
    checkpoint::save(&model.params, &run.file("detector.glt"))?;
    run.produced("detector.glt");
    write_jsonl(&run.file("train_log.jsonl"), &model.log)?;
    run.produced("train_log.jsonl");
    let loss: Vec<(f64, f64)> = model.log.iter().map(|r| (r.step as f64, r.loss)).collect();
    run.write("train_loss.svg", plot::line_chart("Detector loss", "step", "loss", &[("loss", loss)]))?;

    let d = evaluate_detector(&spec, &model.params, &det_samples(&parts.test)?, DEFAULT_DETECTION_THRESHOLD, sched.nms_iou)?;
    let preds: Vec<Prediction> = d
        .units
        .iter()
        .flat_map(|u| u.predictions.iter().map(|(b, s)| Prediction { image_id: u.id.clone(), bbox: b.clone(), score: *s }))
        .collect();
    let truth: Vec<AnnotationRecord> = d.units.iter().flat_map(|u| u.truth.iter().map(|b| AnnotationRecord::new(u.id.clone(), b))).collect();
    write_jsonl(&run.file("predictions.jsonl"), &preds)?;
    run.produced("predictions.jsonl");
    write_jsonl(&run.file("ground_truth.jsonl"), &truth)?;
    run.produced("ground_truth.jsonl");
    let metrics: Vec<serde_json::Value> =
        [0.5, 0.25].iter().map(|&iou| detection_metrics(&d, iou, cfg.detector.score_threshold)).collect::<Result<_>>()?;
    run.write("froc.svg", froc_svg(&metrics))?;
    run.write_json(
        "metrics.json",
        &json!({
            "da": cfg.da,
            "best_step": model.best_step,
            "validation_sensitivity": model.best_metric,
            "test": metrics,
        }),
    )?;
    for m in &metrics {
        println!("IoU {}: sensitivity {:.4}, FP/slice {:.4}", m["iou_threshold"], m["sensitivity"], m["fps_per_slice"]);
    }
    Ok(())
}

fn classify(run: &mut Run, cfg: &ExperimentConfig) -> Result<()> {
    let size = cfg.dataset.size;
    let parts = split(cfg, dataset(cfg)?)?;
    let samples = |slices: &[Slice]| -> Result<Vec<ClassifierSample>> {
        slices
            .iter()
            .map(|s| {
                Ok(ClassifierSample {
                    image: s.image.reshape(vec![1, size, size])?,
                    label: usize::from(!s.boxes.is_empty()),
                })
            })
            .collect()
    };
    let train = samples(&parts.train)?;
    if train.iter().all(|s| s.label == 1) || train.iter().all(|s| s.label == 0) {
        return Err(CliError::User("dataset: classification needs scenes with and without lesions (set dataset.min_lesions = 0)".into()));
    }
    let spec = ClassifierSpec {
        input: size,
        ..ClassifierSpec::default()
    };
    let sched = cfg.train_schedule();
    let model = train_classifier(&spec, &train, &samples(&parts.validation)?, &sched)?;
    let test = samples(&parts.test)?;
    let accuracy = classifier_accuracy(&spec, &model.params, &test)?;
    checkpoint::save(&model.params, &run.file("classifier.glt"))?;
    run.produced("classifier.glt");
    write_jsonl(&run.file("train_log.jsonl"), &model.log)?;
    run.produced("train_log.jsonl");
    run.write_json(
        "metrics.json",
        &json!({ "test_accuracy": accuracy, "test_slices": test.len(), "best_step": model.best_step, "validation_accuracy": model.best_metric }),
    )?;
    println!("test accuracy {accuracy:.4} on {} slices", test.len());
    Ok(())
}

fn evaluate(cli: &Cli, run: Option<&mut Run>) -> Result<()> {
    let Command::Evaluate { pred, gt, iou, score_threshold } = &cli.command else {
        unreachable!("dispatched on evaluate")
    };
    if !(0.0..=1.0).contains(iou) || !(0.0..=1.0).contains(score_threshold) {
        return Err(CliError::User("--iou and --score-threshold must lie in [0, 1]".into()));
    }
    require(pred, "prediction file")?;
    require(gt, "ground-truth file")?;
    let preds: Vec<Prediction> = read_jsonl(pred).map_err(|e| CliError::User(format!("{}: {e}", pred.display())))?;
    let truth: Vec<AnnotationRecord> = read_jsonl(gt).map_err(|e| CliError::User(format!("{}: {e}", gt.display())))?;
    let d = DetectionSet::from_records(&preds, &truth)?;
    let metrics = detection_metrics(&d, *iou, *score_threshold)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(run) = run {
        run.write_json("metrics.json", &metrics)?;
        if metrics["froc"].is_array() {
            run.write("froc.svg", froc_svg(std::slice::from_ref(&metrics)))?;
        }
    }
    Ok(())
}

fn tsne_plot(run: &mut Run, seed: u64, bundle: &Path, synthetic: Option<&Path>, perplexity: f64, iterations: usize) -> Result<()> {
    let mut groups = vec![("real", read_slices(bundle)?.1)];
    if let Some(dir) = synthetic {
        groups.push(("synthetic", read_slices(dir)?.1));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (name, slices) in &groups {
        for s in slices {
            points.push(s.image.data().iter().map(|&v| v as f64).collect::<Vec<f64>>());
            labels.push((*name, s.id.clone()));
        }
    }
    if points.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(CliError::User("tsne: all images must share one size".into()));
    }
    let cfg = EmbeddingConfig {
        perplexity,
        iterations,
        exaggeration_iterations: EmbeddingConfig::default().exaggeration_iterations.min(iterations / 4),
        ..EmbeddingConfig::default()
    };
    let res = tsne(&points, &cfg, seed)?;
    let rows: Vec<serde_json::Value> = labels
        .iter()
        .zip(&res.embedding)
        .map(|((src, id), p)| json!({ "id": id, "source": src, "x": p[0], "y": p[1] }))
        .collect();
    run.write_json(
        "embedding.json",
        &json!({
            "perplexity": perplexity,
            "kl_initial": res.kl_initial,
            "kl_final": res.kl_final,
            "calibration_error": res.calibration_error,
            "points": rows,
        }),
    )?;
    let scatter: Vec<(&str, Vec<(f64, f64)>)> = groups
        .iter()
        .map(|(name, _)| {
            let pts = labels.iter().zip(&res.embedding).filter(|(l, _)| l.0 == *name).map(|(_, p)| (p[0], p[1])).collect();
            (*name, pts)
        })
        .collect();
    run.write("tsne.svg", plot::scatter("t-SNE embedding", &scatter))?;
    println!("embedded {} images; KL {:.4} -> {:.4}", points.len(), res.kl_initial, res.kl_final);
    Ok(())
}

fn vtt_serve(data_dir: &Path, real: &Path, synthetic: &Path, addr: &str) -> Result<()> {
    use std::sync::Arc;
    let user = |e: patholab_vtt::VttError| CliError::User(e.to_string());
    let real_pool = patholab_vtt::load_pool(real).map_err(user)?;
    let synth_pool = patholab_vtt::load_pool(synthetic).map_err(user)?;
    let store = patholab_vtt::VttStore::open(data_dir, real_pool, synth_pool).map_err(|e| CliError::Runtime(e.to_string()))?;
    let app = patholab_vtt::http::router(Arc::new(store));
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::User(format!("cannot bind {addr}: {e}")))?;
        println!("serving sessions on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

fn report(dir: &Path) -> Result<()> {
    let path = dir.join(RUN_MANIFEST);
    require(&path, "run manifest")?;
    let manifest: RunManifest = serde_json::from_slice(&fs::read(&path)?).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    let mut text = format!("# Run `{}`\n\n", manifest.command);
    text += &format!("- status: {}\n- seed: {}\n", manifest.status, manifest.seed);
    if let Some(h) = &manifest.config_hash {
        text += &format!("- config sha256: {h}\n");
    }
    if let Some(e) = &manifest.error {
        text += &format!("- error: {e}\n");
    }
    text += "\n## Files\n\n";
    for f in &manifest.files {
        text += &format!("- {f}\n");
    }
    for name in ["summary.json", "metrics.json"] {
        if let Ok(bytes) = fs::read(dir.join(name)) {
            let v: serde_json::Value = serde_json::from_slice(&bytes)?;
            text += &format!("\n## {name}\n\n```json\n{}\n```\n", serde_json::to_string_pretty(&v)?);
        }
    }
    fs::write(dir.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}
