//! `sdedit` command-line tool.

mod io;

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sdedit_core::guide_tools::{simulate_stroke, stroke_kernel_for_height, RasterImage, DEFAULT_STROKE_COLORS};
use sdedit_core::score::{Activation, MlpScoreNet, TimeEmbedding, TrainConfig, TrainingData};
use sdedit_core::{
    faithfulness, tradeoff_sweep, Feedback, NoiseSchedule, NoiseStream, Sampler, SdeditConfig, SweepConfig,
    T0SearchState,
};
use sdedit_service::{AppState, EditService, Limits, PresetRegistry, PRESET_DIR_ENV};
use serde_json::json;

use crate::io::{read_guide, read_mask, write_output, Manifest, PresetSource};

#[derive(Parser)]
#[command(name = "sdedit", version, about = "Guided image synthesis and editing with stochastic differential equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unconditional samples: integrate the reverse SDE from the prior at t = 1.
    Sample(SampleArgs),
    /// Perturb a guide to t0 and denoise it, optionally under an edit mask.
    Edit(EditArgs),
    /// Faithfulness and realism over a grid of t0 values.
    Sweep(SweepArgs),
    /// Interactive bisection over t0 driven by terminal feedback.
    GuideSearch(GuideSearchArgs),
    /// Turn an image into a stroke-like guide (median filter + palette).
    StrokeSim(StrokeArgs),
    /// Fit a score network by denoising score matching.
    Train(TrainArgs),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Built-in preset name, a preset in --preset-dir, or a preset TOML file.
    #[arg(long, default_value = "toy-2d")]
    preset: String,
    #[arg(long, env = PRESET_DIR_ENV)]
    preset_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Text file of rows (vector presets) or an output directory (image presets).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Guide: a PPM/PGM image or a whitespace-separated vector.
    #[arg(long)]
    guide: PathBuf,
    /// Edit mask (same shape as the guide; nonzero = editable).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.45)]
    t0: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class label for classifier guidance (mixture presets).
    #[arg(long)]
    label: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    guidance_scale: f64,
    /// Copy the guide back onto masked-out coordinates after the last step.
    #[arg(long)]
    hard_restore: bool,
    #[arg(long)]
    out: PathBuf,
    /// Run manifest path (defaults to `<out>.json`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "guide", required = true)]
    guides: Vec<PathBuf>,
    /// Reference data rows; drawn from the preset's mixture when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    reference_count: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    t0: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    runs: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// TradeoffReport JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GuideSearchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for candidates and the final manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StrokeArgs {
    /// Median kernel; defaults to the height-scaled reference size.
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_STROKE_COLORS)]
    colors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Mixture preset to draw training data from.
    #[command(flatten)]
    model: ModelArgs,
    /// Train on these data rows instead of the preset's mixture.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "vp-default")]
    schedule: String,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, env = PRESET_DIR_ENV)]
    preset_dir: Option<PathBuf>,
    /// Restore sessions from this file at startup and save them on shutdown.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Concurrent sampler runs.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Sample(a) => sample(a),
        Command::Edit(a) => edit(a),
        Command::Sweep(a) => sweep(a),
        Command::GuideSearch(a) => guide_search(a),
        Command::StrokeSim(a) => stroke_sim(a),
        Command::Train(a) => train(a),
        Command::Serve(a) => serve(a),
    }
}

fn load(model: &ModelArgs) -> Result<PresetSource> {
    PresetSource::resolve(&model.preset, model.preset_dir.as_deref())
}

fn sample(a: SampleArgs) -> Result<()> {
    let src = load(&a.model)?;
    let p = &src.preset;
    let sampler = Sampler::new(p.score.as_ref(), p.schedule);
    let root = NoiseStream::new(a.seed);
    let outputs: Vec<Vec<f64>> = (0..a.count)
        .map(|i| sampler.sample_prior(a.steps, &root.substream(i as u64)))
        .collect::<sdedit_core::Result<_>>()?;
    let files = io::write_batch(&a.out, p.info.shape, &outputs)?;
    Manifest::new("sample", &src)
        .with("config", json!({"t0": 1.0, "n_steps": a.steps, "count": a.count, "seed": a.seed}))
        .with("outputs", json!(files))
        .write(&io::manifest_path(&a.out, None))?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn edit(a: EditArgs) -> Result<()> {
    let src = load(&a.model)?;
    let p = &src.preset;
    let guide = read_guide(&a.guide, p.info.shape)?;
    let mask = a.mask.as_deref().map(|m| read_mask(m, p.info.shape)).transpose()?;
    let mut config = SdeditConfig::new(a.t0, a.steps).with_repeats(a.repeats).with_seed(a.seed);
    config.hard_restore = a.hard_restore;
    let mut sampler = Sampler::new(p.score.as_ref(), p.schedule);
    if let Some(label) = a.label {
        let classifier = p
            .classifier
            .as_deref()
            .with_context(|| format!("preset `{}` has no classifier for --label", p.info.name))?;
        sampler = sampler.with_classifier(classifier);
        config = config.with_guidance(label, a.guidance_scale);
    }
    let result = sampler.run(&guide, mask.as_ref(), &config)?;
    write_output(&a.out, &result.output, result.shape)?;
    let faith = faithfulness(guide.data(), &result.output)?;
    Manifest::new("edit", &src)
        .with("config", serde_json::to_value(&config)?)
        .with("guide", json!(a.guide))
        .with("mask", json!(a.mask))
        .with("output", json!(a.out))
        .with("steps", json!(result.steps))
        .with("metrics", json!({"faithfulness": faith}))
        .write(&io::manifest_path(&a.out, a.manifest.as_deref()))?;
    println!("t0 {}: l2 {:.6}, l2^2 {:.6} -> {}", a.t0, faith.l2, faith.l2_squared, a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let src = load(&a.model)?;
    let p = &src.preset;
    let guides = a
        .guides
        .iter()
        .map(|g| read_guide(g, p.info.shape))
        .collect::<Result<Vec<_>>>()?;
    let reference = match &a.reference {
        Some(path) => io::read_rows(path)?,
        None => {
            let gmm = src
                .gmm
                .as_ref()
                .context("preset has no mixture to draw reference data from; pass --reference")?;
            gmm.sample(&mut NoiseStream::new(a.seed).sequential(0x5EED), a.reference_count)
        }
    };
    let config = SweepConfig { t0_grid: a.t0, runs_per_point: a.runs, n_steps: a.steps, seed: a.seed, mmd_folds: a.folds };
    let report = tradeoff_sweep(&guides, p.score.as_ref(), &p.schedule, &reference, &config)?;
    report.write(&a.out, a.csv.as_deref())?;
    for pt in &report.points {
        println!(
            "t0 {:.3}  l2^2 {:.4} ± {:.4}  mmd {:.5} ± {:.5}",
            pt.t0, pt.l2sq_mean, pt.l2sq_stderr, pt.mmd_mean, pt.mmd_stderr
        );
    }
    Ok(())
}

fn guide_search(a: GuideSearchArgs) -> Result<()> {
    let src = load(&a.model)?;
    let p = &src.preset;
    let guide = read_guide(&a.guide, p.info.shape)?;
    let mask = a.mask.as_deref().map(|m| read_mask(m, p.info.shape)).transpose()?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let sampler = Sampler::new(p.score.as_ref(), p.schedule);
    let mut state = T0SearchState::default();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut candidates = Vec::new();
    let ext = io::extension_for(p.info.shape);
    loop {
        let round = candidates.len();
        let config = SdeditConfig::new(state.probe, a.steps).with_seed(a.seed.wrapping_add(round as u64));
        let result = sampler.run(&guide, mask.as_ref(), &config)?;
        let path = a.out_dir.join(format!("candidate-{round:02}.{ext}"));
        write_output(&path, &result.output, result.shape)?;
        let faith = faithfulness(guide.data(), &result.output)?;
        candidates.push(json!({"t0": state.probe, "seed": config.seed, "path": path, "faithfulness": faith}));
        println!(
            "[{round}] t0 = {:.4} in [{:.4}, {:.4}]  l2^2 {:.4}  -> {}",
            state.probe,
            state.lo,
            state.hi,
            faith.l2_squared,
            path.display()
        );
        if state.at_soft_cap() {
            println!("reached {} rounds; accept or keep refining", state.iterations);
        }
        print!("(r)ealistic, (f)aithful, (a)ccept, (q)uit > ");
        std::io::stdout().flush()?;
        let Some(line) = lines.next() else { break };
        let feedback = match line?.trim() {
            "r" | "realistic" | "more_realistic" => Feedback::MoreRealistic,
            "f" | "faithful" | "more_faithful" => Feedback::MoreFaithful,
            "a" | "accept" => Feedback::Accept,
            "q" | "quit" => break,
            other => {
                println!("unrecognised `{other}`");
                candidates.pop();
                continue;
            }
        };
        state = state.step(feedback)?;
        if state.accepted {
            println!("accepted t0 = {}", state.probe);
            break;
        }
    }
    Manifest::new("guide-search", &src)
        .with("search", serde_json::to_value(&state)?)
        .with("candidates", json!(candidates))
        .write(&a.out_dir.join("manifest.json"))?;
    Ok(())
}

fn stroke_sim(a: StrokeArgs) -> Result<()> {
    let img = RasterImage::read(&a.input)?;
    let kernel = a.kernel.unwrap_or_else(|| stroke_kernel_for_height(img.height()));
    let out = simulate_stroke(&img, kernel, a.colors, a.seed)?;
    out.write(&a.output)?;
    println!(
        "kernel {kernel}, {} colours -> {} ({} distinct)",
        a.colors,
        a.output.display(),
        out.distinct_colors()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let schedule = NoiseSchedule::from_preset(&a.schedule)?;
    let (data, origin) = match &a.data {
        Some(path) => (TrainingData::Samples(io::read_rows(path)?), json!(path)),
        None => {
            let src = load(&a.model)?;
            let gmm = src.gmm.context("preset has no mixture to train on; pass --data")?;
            (TrainingData::Gmm(gmm), json!(src.preset.info.name))
        }
    };
    let dim = match &data {
        TrainingData::Gmm(g) => g.dim(),
        TrainingData::Samples(s) => s.first().map(Vec::len).context("empty training data")?,
    };
    let stream = NoiseStream::new(a.seed);
    let net = MlpScoreNet::new(dim, &a.hidden, TimeEmbedding::default(), Activation::Silu, &mut stream.sequential(1))?;
    let mut config = TrainConfig { steps: a.steps, batch_size: a.batch, ..TrainConfig::default() };
    config.optimizer.learning_rate = a.lr;
    let (net, report) = sdedit_core::score::train_score(net, &data, &schedule, &config, &stream)?;
    let learned = sdedit_core::score::LearnedScore::new(net, schedule);
    learned.save(&a.out, &a.schedule, a.seed)?;
    let manifest_path = io::manifest_path(&a.out, None);
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&json!({
            "command": "train",
            "data": origin,
            "schedule": a.schedule,
            "hidden": a.hidden,
            "config": serde_json::to_value(config)?,
            "seed": a.seed,
            "report": serde_json::to_value(&report)?,
            "weights": a.out,
        }))?,
    )
    .with_context(|| format!("writing {}", manifest_path.display()))?;
    println!("trained {} steps, final loss (EMA) {:.5} -> {}", report.steps, report.final_loss_ema, a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut registry = PresetRegistry::with_builtins()?;
    if let Some(dir) = &a.preset_dir {
        for p in sdedit_service::presets::load_dir(dir)? {
            tracing::info!(preset = %p.info.name, "loaded preset");
            registry.insert(p);
        }
    }
    let service = Arc::new(EditService::new(registry, Limits::default()));
    if let Some(path) = a.snapshot.as_deref().filter(|p| p.exists()) {
        let n = service.load_snapshot(path)?;
        tracing::info!(sessions = n, path = %path.display(), "restored sessions");
    }
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        tracing::info!(addr = %listener.local_addr()?, workers, "serving");
        sdedit_service::serve(listener, AppState::new(service.clone(), workers), shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    if let Some(path) = &a.snapshot {
        service.save_snapshot(path)?;
        tracing::info!(path = %path.display(), "saved sessions");
    }
    Ok(())
}

async fn shutdown_signal() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}
