//! `camadapt`: reproducible batch runs of the adaptation laboratory.
//!
//! Every command is a pure function of its inputs and seed; reruns produce
//! byte-identical artifacts (the manifest's wall-clock field aside). Errors
//! leave a machine-readable JSON object on stderr and a nonzero exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use camadapt_core::config;
use camadapt_core::eval::{self, MetricsReport};
use camadapt_core::miner::{
    build_fragment_batch, compute_distance_matrix, DistanceMetric, TripletSet,
};
use camadapt_core::model::Models;
use camadapt_core::rerank::{kreciprocal_rerank, RerankParams};
use camadapt_core::rng;
use camadapt_core::tensor::Tensor;
use camadapt_core::trainer::{run_training_flushing, Checkpoint};
use camadapt_core::world::{
    self, load_dataset_dir, load_embeddings, save_embeddings, Dataset, LabelVisibility,
};

#[derive(Parser)]
#[command(name = "camadapt", version, about = "Camera-aware domain adaptation laboratory")]
struct Cli {
    /// Cap worker threads (results never depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera world into four split files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a generated or ingested dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: mAP, CMC, discrepancy distances, posteriors.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine one fragment batch of triplets from a target camera.
    Mine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long, default_value_t = 12)]
        p: usize,
        #[arg(long, default_value_t = 10)]
        q: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long = "kn", default_value_t = 2)]
        k_n: usize,
        #[arg(long, default_value = "kreciprocal")]
        metric: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Triplets as JSON lines; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank the pairwise distance matrix of an embedding file.
    Rerank {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        /// Distance matrix CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    version: String,
    command: String,
    seed: Option<u64>,
    config_hash: Option<String>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>, config_hash: Option<String>) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_hash,
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    fn write(mut self, dir: &Path, started: Instant) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        self.outputs.push("manifest.json".to_string());
        self.outputs.sort();
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("sha256:{hex}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map(|_| ()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen_data(config: &Path, out: &Path, seed: u64) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = config::world_config_from_file(config)?;
    let dataset = world::generate_world(&cfg, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest = RunManifest::new("gen-data", Some(seed), Some(sha256_file(config)?));
    let splits: [(&str, &[world::Sample], LabelVisibility); 4] = [
        ("source_train.csv", &dataset.source_train, LabelVisibility::Visible),
        ("target_train.csv", &dataset.target_train, cfg.target_labels),
        ("target_query.csv", &dataset.target_query, LabelVisibility::Visible),
        ("target_gallery.csv", &dataset.target_gallery, LabelVisibility::Visible),
    ];
    for (name, samples, vis) in splits {
        save_embeddings(&out.join(name), samples, None, vis)?;
        manifest.outputs.push(name.to_string());
    }
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    manifest.write(out, started)
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = config::train_config_from_file(config)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let dataset = load_dataset_dir(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let config_hash = sha256_file(config)?;
    match run_training_flushing(&cfg, &dataset) {
        Ok(outcome) => {
            let ckpt = Checkpoint::new(&outcome, &cfg, &dataset.indexer, config_hash.clone());
            ckpt.save(&out.join("checkpoint.json"))?;
            write_json(&out.join("history.json"), &outcome.history)?;
            for w in &outcome.history.warnings {
                eprintln!("warning: {w}");
            }
            let mut manifest = RunManifest::new("train", Some(cfg.seed), Some(config_hash));
            manifest.outputs.push("checkpoint.json".to_string());
            manifest.outputs.push("history.json".to_string());
            manifest.write(out, started)
        }
        Err(failure) => {
            // Flush whatever history was recorded before the failure.
            write_json(&out.join("history.json"), &failure.partial)?;
            Err(anyhow!("training failed: {} (partial history flushed)", failure.error))
        }
    }
}

fn load_models(path: &Path) -> anyhow::Result<(Checkpoint, Models)> {
    let ckpt = Checkpoint::load(path)?;
    let models = ckpt.models.clone();
    Ok((ckpt, models))
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let started = Instant::now();
    let (_, models) = load_models(checkpoint)?;
    let dataset: Dataset = load_dataset_dir(data)?;
    let report: MetricsReport = eval::evaluate(&models, &dataset, Default::default())?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    emit(out, &json)?;
    if let Some(path) = out {
        let mut manifest = RunManifest::new("eval", None, None);
        manifest.outputs.push(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let dir = path.parent().unwrap_or(Path::new("."));
        manifest.write(dir, started)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MinedTriplet<'a> {
    anchor: usize,
    w: u8,
    positives: &'a [usize],
    negatives: &'a [usize],
    camera_id: usize,
}

fn cmd_mine(
    checkpoint: &Path,
    data: &Path,
    camera: usize,
    p: usize,
    q: usize,
    k: usize,
    k_n: usize,
    metric: &str,
    seed: u64,
    out: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let started = Instant::now();
    let (_, models) = load_models(checkpoint)?;
    let dataset = load_dataset_dir(data)?;
    if camera >= dataset.indexer.target_cameras() {
        return Err(anyhow!(
            "camera {camera} out of range: dataset has {} target cameras",
            dataset.indexer.target_cameras()
        ));
    }
    let timeline = Dataset::camera_timeline(&dataset.target_train, camera);
    let mut frag_rng = rng::stream(seed, "cli-mine");
    let batch = build_fragment_batch(camera, timeline.len(), p, q, &mut frag_rng)?;
    let samples: Vec<world::Sample> = batch
        .flat_positions()
        .iter()
        .map(|&pos| dataset.target_train[timeline[pos]].clone())
        .collect();
    let (emb, _) = eval::extract_embeddings(&models.backbone, &samples)?;
    let metric = match metric {
        "euclidean" => DistanceMetric::Euclidean,
        "kreciprocal" => DistanceMetric::KReciprocal(RerankParams::default()),
        other => return Err(anyhow!("unknown metric `{other}` (expected euclidean|kreciprocal)")),
    };
    let dist = compute_distance_matrix(&emb, &metric)?;
    let set = TripletSet::mine(&dist, &batch, k, k_n)?;

    let mut text = String::new();
    for e in &set.entries {
        let line = serde_json::to_string(&MinedTriplet {
            anchor: e.anchor,
            w: e.active as u8,
            positives: &e.positives,
            negatives: &e.negatives,
            camera_id: set.camera_id,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    emit(out, &text)?;
    if let Some(path) = out {
        let mut manifest = RunManifest::new("mine", Some(seed), None);
        manifest.outputs.push(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        manifest.write(path.parent().unwrap_or(Path::new(".")), started)?;
    }
    Ok(())
}

fn cmd_rerank(
    input: &Path,
    k1: usize,
    k2: usize,
    lambda: f64,
    out: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let started = Instant::now();
    let file = load_embeddings(input)?;
    if file.samples.len() < 2 {
        return Err(anyhow!("re-ranking needs at least two samples"));
    }
    let rows: Vec<Vec<f64>> = file.samples.iter().map(|s| s.feature.clone()).collect();
    let emb = Tensor::from_rows(&rows)?;
    let euclid = compute_distance_matrix(&emb, &DistanceMetric::Euclidean)?;
    let reranked = kreciprocal_rerank(&euclid, k1, k2, lambda)?;

    let n = reranked.rows();
    let mut text = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                text.push(',');
            }
            text.push_str(&format!("{}", reranked.at(i, j)));
        }
        text.push('\n');
    }
    emit(out, &text)?;
    if let Some(path) = out {
        let mut manifest = RunManifest::new("rerank", None, None);
        manifest.outputs.push(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        manifest.write(path.parent().unwrap_or(Path::new(".")), started)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .ok();
    }
    match &cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config, out, *seed),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => cmd_train(config, data, out, *seed),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(checkpoint, data, out),
        Command::Mine {
            checkpoint,
            data,
            camera,
            p,
            q,
            k,
            k_n,
            metric,
            seed,
            out,
        } => cmd_mine(checkpoint, data, *camera, *p, *q, *k, *k_n, metric, *seed, out),
        Command::Rerank {
            input,
            k1,
            k2,
            lambda,
            out,
        } => cmd_rerank(input, *k1, *k2, *lambda, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let payload = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
