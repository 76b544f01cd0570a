mod files;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use wildsat::encoders::PeftMode;
use wildsat::eval::{
    accuracy, build_index, confusion_matrix, encounter_rates_at_tiles, fit_to_model, mean_iou,
    mean_top_k_accuracy, micro_f1, run_probe, site_split_alternating, site_split_by_class,
    species_sets_at_tiles, zero_shot_batch, EvalError, ProbeConfig, ProbeReport, ProbeTargets,
    ProbeTask, RetrievalIndex,
};
use wildsat::geodata::{
    generate_synthetic_world, ingest_dataset, read_truth, write_world, GeoDataset, GeoError,
    SyntheticWorldConfig, TileRecord,
};
use wildsat::numerics::{GradCheckOptions, Tensor};
use wildsat::training::{
    initial_model, load_checkpoint, loss_gradcheck, save_checkpoint, Checkpoint, TrainConfig,
    TrainError, Trainer,
};

use output::{write_dir_atomic, write_files_atomic, ManifestBuilder};

#[derive(Parser)]
#[command(
    name = "wildsat",
    version,
    about = "Tri-modal contrastive pretraining of satellite-image encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world with known habitats.
    Synth(SynthArgs),
    /// Train the encoders on a dataset directory.
    Train(TrainArgs),
    /// Check backward gradients of the full loss by central differences.
    Gradcheck(GradcheckArgs),
    /// Fit a linear probe on frozen image features.
    Probe(ProbeArgs),
    /// Embed every tile and save a retrieval index.
    Index(IndexArgs),
    /// Rank indexed tiles against a query embedding.
    Retrieve(RetrieveArgs),
    /// Classify tiles by their nearest class-text embedding.
    Zeroshot(ZeroshotArgs),
    /// Score predictions from plain-text files.
    EvalMetrics(EvalMetricsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// World config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint header path; the tensor blob goes beside it as `.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    peft: Option<PeftMode>,
    #[arg(long)]
    freeze_location: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint with its own config.
    #[arg(long, conflicts_with_all = ["config", "seed", "peft", "freeze_location", "epochs"])]
    resume: Option<PathBuf>,
    /// Stop after this many total steps and save.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch size of the checked loss.
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// cls, multilabel or encounter.
    #[arg(long)]
    task: ProbeTask,
    /// `tile_id,label` CSV for cls; defaults to the synthetic habitat truth.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Training sites per class (cls only).
    #[arg(long, default_value_t = 1)]
    train_sites: usize,
    /// Radius in degrees for observation-derived targets; defaults to the
    /// checkpoint's match radius.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also probe the untrained initialization of the same config.
    #[arg(long)]
    baseline: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query vector (`.bin` f32 LE, or text). Without --ckpt it must already
    /// be a shared-space embedding.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Treat the query as a raw text embedding and project it with this
    /// checkpoint's text head.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Raw text embedding per class, one row per line; defaults to the
    /// synthetic habitat prototypes.
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Accuracy,
    Confusion,
    MicroF1,
    MeanIou,
    TopK,
}

#[derive(Args)]
struct EvalMetricsArgs {
    #[arg(long)]
    metric: Metric,
    /// Class per line; label set per line (micro-f1); score row per line (top-k).
    #[arg(long)]
    pred: PathBuf,
    /// Class per line; label set per line (micro-f1, top-k).
    #[arg(long)]
    truth: PathBuf,
    /// Class count for confusion and mean-iou; defaults to one past the
    /// largest label.
    #[arg(long)]
    classes: Option<usize>,
}

/// Exit status 1: bad input or config. Exit status 2: the run itself failed.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Numerics(_) | TrainError::Io { .. } => {
            Failure::Runtime(e.into())
        }
        _ => Failure::Invalid(e.into()),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Numerics(_) | EvalError::Io { .. } => Failure::Runtime(e.into()),
        _ => Failure::Invalid(e.into()),
    }
}

fn geo_failure(e: GeoError) -> Failure {
    match e {
        GeoError::Io { .. } => Failure::Runtime(e.into()),
        _ => Failure::Invalid(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Probe(a) => probe(a),
        Command::Index(a) => index(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Zeroshot(a) => zeroshot(a),
        Command::EvalMetrics(a) => eval_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("failed: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .invalid()?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .invalid()
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(value).runtime()?);
    Ok(())
}

fn load_data(dir: &Path) -> CmdResult<GeoDataset> {
    ingest_dataset(dir).map_err(geo_failure)
}

fn load_ckpt(path: &Path) -> CmdResult<Checkpoint> {
    load_checkpoint(path).map_err(train_failure)
}

fn synth(a: SynthArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::start("synth");
    let mut config: SyntheticWorldConfig = match &a.config {
        Some(p) => {
            manifest.input(p);
            read_json(p)?
        }
        None => SyntheticWorldConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let world = generate_synthetic_world(&config).map_err(geo_failure)?;
    write_dir_atomic(&a.out, |tmp| Ok(write_world(&world, tmp)?)).runtime()?;
    manifest.seed = Some(config.seed);
    manifest.config = serde_json::to_value(&config).runtime()?;
    manifest
        .finish(&a.out, std::slice::from_ref(&a.out))
        .runtime()?;
    info!("wrote {}", a.out.display());
    print_json(&json!({
        "out": a.out,
        "tiles": world.dataset.tiles.len(),
        "observations": world.dataset.observations.len(),
        "texts": world.dataset.texts.len(),
        "species": config.species,
        "habitats": config.habitats,
    }))
}

fn train(a: TrainArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::start("train");
    manifest.input(&a.data);
    let dataset = load_data(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            manifest.input(p);
            Trainer::from_checkpoint(load_ckpt(p)?, &dataset).map_err(train_failure)?
        }
        None => {
            let mut config: TrainConfig = match &a.config {
                Some(p) => {
                    manifest.input(p);
                    read_json(p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if let Some(peft) = a.peft {
                config.peft = peft;
            }
            if let Some(epochs) = a.epochs {
                config.epochs = epochs;
            }
            config.freeze_location |= a.freeze_location;
            if let Some(d) = dataset.text_dim() {
                config.model.d_txt = d;
            }
            if let Some(t) = dataset.tiles.first() {
                config.model.image.channels = t.channels;
            }
            Trainer::new(config, &dataset).map_err(train_failure)?
        }
    };
    let config = trainer.state().config.clone();
    info!(
        "{} paired samples, {} steps per epoch, {} epochs",
        trainer.samples().len(),
        trainer.steps_per_epoch(),
        config.epochs
    );
    trainer.run(a.stop_after).map_err(train_failure)?;
    let ckpt = trainer.into_checkpoint();

    let name = a
        .out
        .file_name()
        .ok_or_else(|| anyhow!("--out must name a file"))
        .invalid()?
        .to_string_lossy()
        .into_owned();
    let blob = Path::new(&name)
        .with_extension("bin")
        .to_string_lossy()
        .into_owned();
    let dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    write_files_atomic(dir, &[blob.as_str(), name.as_str()], |tmp| {
        Ok(save_checkpoint(&ckpt, &tmp.join(&name))?)
    })
    .runtime()?;
    manifest.seed = Some(config.seed);
    manifest.config = serde_json::to_value(&config).runtime()?;
    manifest
        .finish(&a.out, &[a.out.clone(), dir.join(&blob)])
        .runtime()?;
    print_json(&json!({
        "out": a.out,
        "steps": ckpt.step_losses.len(),
        "epochs_completed": ckpt.epoch(),
        "epoch_losses": ckpt.epoch_losses,
        "final_step_loss": ckpt.step_losses.last(),
        "content_hash": ckpt.content_hash(),
        "encoder_hash": ckpt.model.encoder_hash(),
    }))
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.samples < 2 {
        return Err(Failure::Invalid(anyhow!("--samples must be at least 2")));
    }
    let report =
        loss_gradcheck(a.seed, a.samples, &GradCheckOptions::default()).map_err(train_failure)?;
    println!("max_rel_error\t{:e}", report.max_rel_error);
    println!("checked\t{}", report.checked);
    if let Some((name, i)) = &report.worst {
        println!("worst\t{name}[{i}]");
    }
    if report.pass {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Runtime(anyhow!(
            "{} of {} coordinates exceed the tolerance",
            report.failures,
            report.checked
        )))
    }
}

fn features_of(model: &wildsat::encoders::WildSatModel, tiles: &[TileRecord]) -> CmdResult<Tensor> {
    let size = model.config.image.input_size;
    let fitted: Vec<TileRecord> = tiles
        .iter()
        .map(|t| fit_to_model(t, size))
        .collect::<Result<_, _>>()
        .map_err(eval_failure)?;
    let refs: Vec<&TileRecord> = fitted.iter().collect();
    model.encode_tiles(&refs).invalid()
}

fn class_labels(a: &ProbeArgs, dataset: &GeoDataset) -> CmdResult<Vec<usize>> {
    match &a.labels {
        Some(p) => {
            let rows = files::read_tile_labels(p).invalid()?;
            let by_id: std::collections::BTreeMap<u64, usize> = rows.into_iter().collect();
            dataset
                .tiles
                .iter()
                .map(|t| {
                    by_id
                        .get(&t.tile_id)
                        .copied()
                        .ok_or_else(|| anyhow!("{}: no label for tile {}", p.display(), t.tile_id))
                })
                .collect::<Result<_, _>>()
                .invalid()
        }
        None => {
            let truth = read_truth(&a.data)
                .map_err(|e| anyhow!("{e}; pass --labels for non-synthetic data"))
                .invalid()?;
            Ok(truth.tile_habitat)
        }
    }
}

fn probe(a: ProbeArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::start("probe");
    manifest.input(&a.ckpt);
    manifest.input(&a.data);
    let ckpt = load_ckpt(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    let radius = a.radius.unwrap_or(ckpt.config.match_radius);
    let (targets, split) = match a.task {
        ProbeTask::SingleLabel => {
            let labels = class_labels(&a, &dataset)?;
            let split = site_split_by_class(&dataset.tiles, &labels, a.train_sites);
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            (ProbeTargets::Classes { labels, classes }, split)
        }
        ProbeTask::MultiLabel => (
            ProbeTargets::Sets {
                sets: species_sets_at_tiles(&dataset, radius),
                classes: dataset.species_count(),
            },
            site_split_alternating(&dataset.tiles),
        ),
        ProbeTask::EncounterRate => (
            ProbeTargets::Rates(encounter_rates_at_tiles(&dataset, radius)),
            site_split_alternating(&dataset.tiles),
        ),
    };
    let config = ProbeConfig {
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let run = |model: &wildsat::encoders::WildSatModel| -> CmdResult<ProbeReport> {
        let before = model.encoder_hash();
        let features = features_of(model, &dataset.tiles)?;
        let report =
            run_probe(&features, &targets, a.task, &split, &config).map_err(eval_failure)?;
        if model.encoder_hash() != before {
            return Err(Failure::Runtime(anyhow!("encoder changed during probing")));
        }
        Ok(report)
    };
    let report = run(&ckpt.model)?;
    let baseline = if a.baseline {
        Some(run(&initial_model(&ckpt.config).map_err(train_failure)?)?)
    } else {
        None
    };
    info!(
        "{} {}: train {:.4}, test {:.4}",
        a.task, report.metric, report.train_value, report.test_value
    );
    let out = json!({
        "task": a.task,
        "report": report,
        "baseline": baseline,
        "encoder_hash": ckpt.model.encoder_hash(),
        "split": split,
    });
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&out).runtime()?;
        output::write_bytes_atomic(path, text.as_bytes()).runtime()?;
        manifest.seed = Some(a.seed);
        manifest.config = serde_json::to_value(config).runtime()?;
        manifest
            .finish(path, std::slice::from_ref(path))
            .runtime()?;
    }
    print_json(&out)
}

fn index(a: IndexArgs) -> CmdResult {
    let mut manifest = ManifestBuilder::start("index");
    manifest.input(&a.ckpt);
    manifest.input(&a.data);
    let ckpt = load_ckpt(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    let refs: Vec<&TileRecord> = dataset.tiles.iter().collect();
    let idx = build_index(&ckpt.model, &refs).map_err(eval_failure)?;
    write_dir_atomic(&a.out, |tmp| Ok(idx.save(tmp)?)).runtime()?;
    manifest
        .finish(&a.out, std::slice::from_ref(&a.out))
        .runtime()?;
    print_json(&json!({ "out": a.out, "tiles": idx.len(), "dim": idx.dim() }))
}

fn retrieve(a: RetrieveArgs) -> CmdResult {
    if a.k == 0 {
        return Err(Failure::Invalid(anyhow!("--k must be at least 1")));
    }
    let idx = RetrievalIndex::load(&a.index).map_err(eval_failure)?;
    let raw = files::read_vector(&a.query).invalid()?;
    let query = match &a.ckpt {
        Some(p) => {
            let ckpt = load_ckpt(p)?;
            wildsat::eval::project_query(&ckpt.model, &raw).map_err(eval_failure)?
        }
        None => raw,
    };
    if query.len() != idx.dim() {
        return Err(Failure::Invalid(anyhow!(
            "query has {} values, index dimension is {}; pass --ckpt to project a raw text embedding",
            query.len(),
            idx.dim()
        )));
    }
    if a.k > idx.len() {
        warn!("k = {} exceeds the {} indexed tiles", a.k, idx.len());
    }
    for (id, cos) in idx.query(&query, a.k).map_err(eval_failure)? {
        println!("{id}\t{cos:.6}");
    }
    Ok(())
}

fn zeroshot(a: ZeroshotArgs) -> CmdResult {
    let ckpt = load_ckpt(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    let (classes, truth) = match &a.classes {
        Some(p) => (files::read_rows(p).invalid()?, None),
        None => {
            let truth = read_truth(&a.data)
                .map_err(|e| anyhow!("{e}; pass --classes for non-synthetic data"))
                .invalid()?;
            (truth.text_prototypes.clone(), Some(truth.tile_habitat))
        }
    };
    let classes = Tensor::from_rows(&classes).invalid()?;
    let refs: Vec<&TileRecord> = dataset.tiles.iter().collect();
    let preds = zero_shot_batch(&ckpt.model, &refs, &classes).map_err(eval_failure)?;
    for (t, p) in dataset.tiles.iter().zip(&preds) {
        println!("{}\t{p}", t.tile_id);
    }
    if let Some(truth) = truth {
        info!(
            "accuracy against habitat truth: {:.4}",
            accuracy(&preds, &truth).map_err(eval_failure)?
        );
    }
    Ok(())
}

fn eval_metrics(a: EvalMetricsArgs) -> CmdResult {
    let class_count = |p: &[usize], t: &[usize]| {
        a.classes
            .unwrap_or_else(|| p.iter().chain(t).max().map_or(0, |m| m + 1))
    };
    let out = match a.metric {
        Metric::Accuracy | Metric::Confusion | Metric::MeanIou => {
            let pred = files::read_labels(&a.pred).invalid()?;
            let truth = files::read_labels(&a.truth).invalid()?;
            let k = class_count(&pred, &truth);
            match a.metric {
                Metric::Accuracy => json!({
                    "metric": "accuracy",
                    "n": pred.len(),
                    "value": accuracy(&pred, &truth).map_err(eval_failure)?,
                }),
                Metric::Confusion => json!({
                    "metric": "confusion_matrix",
                    "n": pred.len(),
                    "value": confusion_matrix(&pred, &truth, k).map_err(eval_failure)?,
                }),
                _ => json!({
                    "metric": "mean_iou",
                    "n": pred.len(),
                    "value": mean_iou(&pred, &truth, k).map_err(eval_failure)?,
                }),
            }
        }
        Metric::MicroF1 => {
            let pred = files::read_sets(&a.pred).invalid()?;
            let truth = files::read_sets(&a.truth).invalid()?;
            json!({
                "metric": "micro_f1",
                "n": pred.len(),
                "value": micro_f1(&pred, &truth).map_err(eval_failure)?,
            })
        }
        Metric::TopK => {
            let scores = files::read_rows(&a.pred).invalid()?;
            let truth = files::read_sets(&a.truth).invalid()?;
            let (value, skipped) = mean_top_k_accuracy(&scores, &truth).map_err(eval_failure)?;
            json!({
                "metric": "top_k_accuracy",
                "n": scores.len(),
                "skipped": skipped,
                "value": value,
            })
        }
    };
    print_json(&out)
}
