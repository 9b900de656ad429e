use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pipe_core::backends::service as backend_service;
use pipe_core::blob::BlobStore;
use pipe_core::calibration::service::{router as calibration_router, CalibrationState};
use pipe_core::calibration::{candidates_from_records, sample_candidates, AnnotationStore};
use pipe_core::config::BackendKind;
use pipe_core::evaluation::{
    evaluate_pairs, tradeoff_sweep, tradeoff_table, CmmdParams, EvalExample, EvalImage, LatentEditor, Metric,
};
use pipe_core::guidance::toy::{toy_hit_rate, toy_noise_schedule, toy_train, two_mode_dataset, ToyDenoiser};
use pipe_core::guidance::{
    GuidanceScales, NoiseSchedule, SamplerSettings, SamplingSchedule, StubCodec, TrainHyperparams, TrainingManifest,
};
use pipe_core::http::BackgroundServer;
use pipe_core::manifest::{read_manifest, read_work};
use pipe_core::pipeline::{emit_funnel_report, read_funnel};
use pipe_core::raster::decode_rgb;
use pipe_core::synth::{apply_stub_thresholds, write_synthetic_corpus, SynthOptions};
use pipe_core::{run_all, run_stage, PipelineConfig, RunOptions, Stage, Workspace};

/// Environment variable holding the bearer token for `serve-calibration`
/// and `serve-backends`.
const SERVICE_TOKEN_ENV: &str = "PIPE_SERVICE_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "pipe", version, about = "Build object-addition editing datasets by removing objects from segmented images")]
struct Cli {
    /// Pipeline config (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backends: Option<BackendArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads per stage; 0 picks one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Work directory holding stage outputs.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    /// Rerun a stage whose outputs were produced under a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Remote,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read COCO annotations into edit-pair records.
    Ingest,
    /// Geometry and abnormality gates, mask dilation.
    Prefilter,
    /// Inpaint removal candidates.
    Remove,
    /// Consensus, multimodal and importance gates; blend the chosen candidate.
    Postfilter,
    /// Write class, captioned and reference instructions.
    Instructions,
    /// Write the dataset manifest and funnel sidecar.
    Assemble,
    /// Run every stage that is not complete yet.
    Run,
    /// Print the filtering table; optionally write bar-chart data.
    FunnelReport {
        #[arg(long)]
        bar_chart: Option<PathBuf>,
    },
    /// Metrics of edited images against references (`<pair_id>.png` in both directories).
    Eval {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// JSON object mapping pair id to target caption, needed for clip-t.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long, default_value = "l1,l2,clip-i,dino,clip-t,cmmd")]
        metrics: String,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image-guidance trade-off curve over the assembled dataset.
    Sweep {
        #[arg(long)]
        s_text: Option<f64>,
        /// Comma-separated image guidance scales.
        #[arg(long)]
        s_image: Option<String>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Use at most this many dataset entries.
        #[arg(long, default_value_t = 64)]
        limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API (and optionally a static UI bundle).
    ServeCalibration {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Serve the stub backends over HTTP for remote-mode runs.
    ServeBackends {
        #[arg(long, default_value_t = 8090)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write the manifest an external trainer consumes.
    EmitTrainManifest {
        #[arg(long)]
        s_text: Option<f64>,
        #[arg(long)]
        s_image: Option<f64>,
        #[arg(long)]
        steps: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic COCO-style corpus and a config pointing at it.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 96)]
        size: u32,
    },
    /// Train the two-mode toy editor and report hit rates per text scale.
    Toy {
        #[arg(long, default_value = "0,1,3")]
        s_text: String,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            resolve(base, &mut cfg.ingest.annotations);
            resolve(base, &mut cfg.ingest.images);
            resolve(base, &mut cfg.instructions.icl_bank);
            resolve(base, &mut cfg.instructions.references);
            resolve(base, &mut cfg.calibration.annotations_log);
            cfg
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match cli.backends {
        Some(BackendArg::Stub) => cfg.backends.kind = BackendKind::Stub,
        Some(BackendArg::Remote) => cfg.backends.kind = BackendKind::Remote,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect()
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let opts = RunOptions { force: cli.force };
    let stage = match &cli.command {
        Command::Ingest => Some(Stage::Ingest),
        Command::Prefilter => Some(Stage::Prefilter),
        Command::Remove => Some(Stage::Remove),
        Command::Postfilter => Some(Stage::Postfilter),
        Command::Instructions => Some(Stage::Instructions),
        Command::Assemble => Some(Stage::Assemble),
        _ => None,
    };
    if let Some(stage) = stage {
        let cfg = load_config(&cli)?;
        let ws = Workspace::open(&cli.work)?;
        let outcome = run_stage(&ws, stage, &cfg, &cfg.make_backends()?, opts)?;
        let verb = if outcome.ran { "done" } else { "up to date" };
        println!("{}\t{}\t{verb}", outcome.stage, outcome.survivors);
        return Ok(());
    }

    match &cli.command {
        Command::Run => {
            let cfg = load_config(&cli)?;
            let ws = Workspace::open(&cli.work)?;
            for o in run_all(&ws, &cfg, &cfg.make_backends()?, opts)? {
                let verb = if o.ran { "done" } else { "up to date" };
                println!("{}\t{}\t{verb}", o.stage, o.survivors);
            }
        }
        Command::FunnelReport { bar_chart } => {
            let ws = Workspace::open(&cli.work)?;
            let path = match ws.completed().last() {
                Some(stage) => ws.stage_path(*stage),
                None => bail!("no stage has completed in {}", cli.work.display()),
            };
            let report = emit_funnel_report(&read_funnel(&path)?)?;
            print!("{}", report.to_tsv());
            if let Some(p) = bar_chart {
                std::fs::write(p, serde_json::to_string_pretty(&report.bar_chart())? + "\n")?;
            }
        }
        Command::Eval {
            outputs,
            references,
            captions,
            metrics,
            bandwidth,
            scale,
            out,
        } => {
            let cfg = load_config(&cli)?;
            let metrics = Metric::parse_list(metrics)?;
            let captions: BTreeMap<String, String> = match captions {
                Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => BTreeMap::new(),
            };
            let outs = read_image_dir(outputs, &BTreeMap::new())?;
            let refs = read_image_dir(references, &captions)?;
            let params = CmmdParams {
                bandwidth: bandwidth.unwrap_or(cfg.evaluation.bandwidth),
                scale: scale.unwrap_or(cfg.evaluation.scale),
            };
            let table = evaluate_pairs(&outs, &refs, &cfg.make_backends()?, &metrics, params)?;
            write_or_print(out.as_deref(), &table.to_delimited('\t'))?;
        }
        Command::Sweep {
            s_text,
            s_image,
            steps,
            limit,
            out,
        } => {
            let cfg = load_config(&cli)?;
            let ws = Workspace::open(&cli.work)?;
            let manifest = read_manifest(&ws.dataset_path()).context("run assemble first")?;
            let blobs = ws.blobs()?;
            let examples = manifest
                .entries
                .iter()
                .take(*limit)
                .map(|e| {
                    // the source lacks the object, the target shows it
                    Ok(EvalExample {
                        source: decode_rgb(&blobs.get(&e.source_image_ref)?)?,
                        instruction: e.instructions[0].text.clone(),
                        source_caption: "a photo".into(),
                        target_caption: format!("a photo of a {}", e.object_label),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let backends = cfg.make_backends()?;
            let editor = LatentEditor {
                codec: StubCodec,
                denoiser: backends.denoiser.clone(),
                text_encoder: backends.embedder.clone(),
                schedule: SamplingSchedule::uniform(NoiseSchedule::scaled_linear(1000, 0.00085, 0.012), *steps)?,
                seed: cfg.guidance.sampler.seed,
            };
            let s_image = match s_image {
                Some(s) => parse_floats(s)?,
                None => cfg.evaluation.s_image_values.clone(),
            };
            let points = tradeoff_sweep(
                &editor,
                &examples,
                s_text.unwrap_or(cfg.evaluation.s_text),
                &s_image,
                backends.embedder.as_ref(),
            )?;
            write_or_print(out.as_deref(), &tradeoff_table(&points, '\t'))?;
        }
        Command::ServeCalibration { port, host, static_dir } => {
            let cfg = load_config(&cli)?;
            let ws = Workspace::open(&cli.work)?;
            let work = read_work(&ws.stage_path(Stage::Postfilter)).context("run postfilter first")?;
            let all = candidates_from_records(&work.records);
            let keep: HashSet<_> =
                sample_candidates(&all, cfg.calibration.sample_size, cfg.seed, cfg.calibration.stratify).into_iter().collect();
            let candidates: Vec<_> = all.into_iter().filter(|c| keep.contains(&c.key)).collect();
            let log_path = cfg
                .calibration
                .annotations_log
                .clone()
                .unwrap_or_else(|| cli.work.join("annotations.jsonl"));
            let store = AnnotationStore::open(&log_path, candidates.iter().map(|c| c.key.clone()))?;
            log::info!("{} candidates, {} annotations in {}", candidates.len(), store.log().len(), log_path.display());
            let state = CalibrationState {
                candidates,
                store: Mutex::new(store),
                blobs: ws.blobs()?,
                config_path: cli.config.clone(),
                default_epsilon: cfg.calibration.epsilon,
                token: std::env::var(SERVICE_TOKEN_ENV).ok(),
            };
            serve(calibration_router(state, static_dir.clone()), host, *port)?;
        }
        Command::ServeBackends { port, host } => {
            let cfg = load_config(&cli)?;
            if cfg.backends.kind != BackendKind::Stub {
                bail!("serve-backends only serves the stub backends");
            }
            let router = backend_service::router(cfg.make_backends()?, std::env::var(SERVICE_TOKEN_ENV).ok());
            serve(router, host, *port)?;
        }
        Command::EmitTrainManifest { s_text, s_image, steps, out } => {
            let cfg = load_config(&cli)?;
            let ws = Workspace::open(&cli.work)?;
            let dataset = ws.dataset_path();
            let manifest = read_manifest(&dataset).context("run assemble first")?;
            let base = cfg.guidance.sampler;
            let sampler = SamplerSettings {
                s_text: s_text.unwrap_or(base.s_text),
                s_image: s_image.unwrap_or(base.s_image),
                steps: steps.unwrap_or(base.steps),
                seed: cli.seed.unwrap_or(base.seed),
            };
            GuidanceScales::new(sampler.s_text, sampler.s_image)?;
            cfg.guidance.hyperparams.validate()?;
            let train = TrainingManifest {
                dataset: std::path::absolute(&dataset)?.display().to_string(),
                config_digest: manifest.config_digest,
                dropout: cfg.guidance.dropout,
                hyperparams: cfg.guidance.hyperparams.clone(),
                sampler,
            };
            let out = out.clone().unwrap_or_else(|| cli.work.join("train.manifest.toml"));
            std::fs::write(&out, toml::to_string(&train)?)?;
            println!("{}", out.display());
        }
        Command::SynthCorpus { out, images, size } => {
            let opts = SynthOptions {
                images: *images,
                width: *size,
                height: *size,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let corpus = write_synthetic_corpus(out, &opts)?;
            let mut cfg = PipelineConfig::default();
            cfg.ingest.annotations = Some("annotations.json".into());
            cfg.ingest.images = Some("images".into());
            cfg.instructions.references = Some("references.json".into());
            apply_stub_thresholds(&mut cfg);
            let path = out.join("pipe.toml");
            std::fs::write(&path, cfg.to_toml()?)?;
            println!("{} images, {} annotations; config {}", images, corpus.annotation_count, path.display());
        }
        Command::Toy { s_text, samples } => {
            let cfg = load_config(&cli)?;
            let data = two_mode_dataset(4096, cfg.seed);
            let noise = toy_noise_schedule();
            let trained = toy_train(
                &data,
                ToyDenoiser::new(64, noise.len(), cfg.seed),
                &cfg.guidance.dropout,
                &TrainHyperparams::toy(),
                &noise,
                cfg.seed,
            )?;
            let schedule = SamplingSchedule::uniform(noise, 25)?;
            println!("s_text\thit_rate");
            for s in parse_floats(s_text)? {
                let rate = toy_hit_rate(&trained.model, &schedule, GuidanceScales::new(s, 1.0)?, *samples, cfg.seed)?;
                println!("{s}\t{rate:.4}");
            }
        }
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

fn read_image_dir(dir: &Path, captions: &BTreeMap<String, String>) -> Result<Vec<EvalImage>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let pair_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.push(EvalImage {
            caption: captions.get(&pair_id).cloned(),
            image: decode_rgb(&std::fs::read(&path)?).with_context(|| format!("decoding {}", path.display()))?,
            pair_id,
        });
    }
    out.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    if out.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    Ok(out)
}

fn serve(router: pipe_core::http::Router, host: &str, port: u16) -> Result<()> {
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let server = BackgroundServer::start(router, addr)?;
    println!("listening on {}", server.base_url());
    std::io::stdout().flush()?;
    let _keep = Arc::new(server);
    loop {
        std::thread::park();
    }
}
