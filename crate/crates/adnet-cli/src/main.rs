//! `adnet` — one executable for the whole pipeline: dataset synthesis,
//! training, threshold calibration, routing, restoration, evaluation, and
//! the gradient diagnostic suite.

mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adnet_core::checkpoint::load_model_expecting;
use adnet_core::codec::{Codec, CodecBackendConfig};
use adnet_core::error::Error;
use adnet_core::image::ImageBuffer;
use adnet_core::metrics;
use adnet_core::models::{Model, ModelConfig, Restorer};
use adnet_core::routing::{self, AdnetPipeline};
use adnet_core::synth::{self, DatasetManifest, GenParams};
use adnet_core::trainer::{self, TrainConfig};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "adnet", version, about = "Adaptive QR code deblurring pipeline")]
struct Cli {
    /// Optional run config file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Decoder command template with one {path} placeholder.
    /// Defaults to ADNET_DECODER, then qrdec/zbarimg discovery.
    #[arg(long, global = true)]
    decoder: Option<String>,
    /// Decoder timeout in seconds.
    #[arg(long, global = true, default_value_t = 10.0)]
    decoder_timeout: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blurred-QR dataset (train + test splits).
    Synth(SynthArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Calibrate the routing threshold from LENet decode outcomes.
    Calibrate(CalibrateArgs),
    /// Route a single image: print its sharpness score and branch.
    Route(RouteArgs),
    /// Restore one image or a whole manifest through the adaptive pipeline.
    Restore(RestoreArgs),
    /// Evaluate a model or the adaptive pipeline over a test manifest.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Probe the decoder backend, optionally decoding one image.
    Decode(DecodeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 40)]
    n_test: usize,
    /// Defaults to the run config seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    severity_min: f64,
    #[arg(long, default_value_t = 0.6)]
    severity_max: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_min: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_max: f64,
    #[arg(long, default_value_t = 2)]
    qr_version: u32,
    #[arg(long, default_value = "M")]
    ec_level: String,
    #[arg(long, default_value_t = 3)]
    module_pixels: usize,
    #[arg(long, default_value_t = 4)]
    quiet_zone: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset split directory containing a manifest (e.g. data/train).
    #[arg(long)]
    train_dir: PathBuf,
    /// Optional validation split directory.
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Model preset: lenet-desk | eg-desk | lenet-paper | eg-paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 2000)]
    iters: u64,
    /// Defaults to the run config seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Full training config TOML; overrides preset/iters/seed.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Initialize from an existing checkpoint (transfer learning).
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Dataset split directory with a manifest (calibration set).
    #[arg(long)]
    dataset_dir: PathBuf,
    /// LENet checkpoint.
    #[arg(long)]
    lenet: PathBuf,
    /// Where to write the calibration report (TOML).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    image: PathBuf,
    /// Defaults to the run config tau file.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct RestoreArgs {
    /// Single image to restore.
    #[arg(long, conflicts_with = "dataset_dir")]
    image: Option<PathBuf>,
    /// Or a dataset split directory with a manifest.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    lenet: PathBuf,
    #[arg(long)]
    eg: PathBuf,
    /// Defaults to the run config tau file.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset_dir: PathBuf,
    /// Single-model evaluation: checkpoint path.
    #[arg(long, conflicts_with_all = ["lenet", "eg"])]
    model: Option<PathBuf>,
    /// Pipeline evaluation: LENet checkpoint.
    #[arg(long, requires = "eg")]
    lenet: Option<PathBuf>,
    /// Pipeline evaluation: EG-Restormer checkpoint.
    #[arg(long)]
    eg: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Optional contact sheet PNG of (blurred, restored, sharp) triptychs.
    #[arg(long)]
    contact_sheet: Option<PathBuf>,
    /// Worker threads for restoration; timing rows are wall-clock per worker.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    /// Image to decode; without it only the backend probe runs.
    #[arg(long)]
    image: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error category={} msg={:?}", e.category(), e.to_string());
            match e {
                Error::Environment(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Values a run config file can supply when flags are absent.
struct Defaults {
    seed: Option<u64>,
    preset: Option<String>,
    tau: Option<f64>,
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let run_config = match &cli.config {
        Some(path) => Some(RunConfig::load(path)?),
        None => None,
    };
    let codec_config = resolve_codec(&cli, run_config.as_ref());
    let defaults = Defaults {
        seed: run_config.as_ref().and_then(|c| c.seed),
        preset: run_config.as_ref().and_then(|c| c.model_preset.clone()),
        tau: match run_config.as_ref().and_then(|c| c.paths.as_ref()).and_then(|p| p.tau_file.as_ref()) {
            Some(path) if path.is_file() => Some(read_tau_file(path)?),
            _ => None,
        },
    };
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &defaults),
        Command::Train(args) => cmd_train(args, &defaults),
        Command::Calibrate(args) => cmd_calibrate(args, &codec_config),
        Command::Route(args) => cmd_route(args, &defaults),
        Command::Restore(args) => cmd_restore(args, &codec_config, &defaults),
        Command::Eval(args) => cmd_eval(args, &codec_config, &defaults),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Decode(args) => cmd_decode(args, &codec_config),
    }
}

/// Read the threshold out of a calibration report (or any TOML with a
/// top-level `tau` float).
fn read_tau_file(path: &Path) -> Result<f64, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Environment(format!("cannot read {}: {}", path.display(), e)))?;
    let value: toml::Value = toml::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("tau file parse: {}", e),
    })?;
    value
        .get("tau")
        .and_then(|v| v.as_float())
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("{} has no float `tau` field", path.display()),
        })
}

fn require_tau(flag: Option<f64>, defaults: &Defaults) -> Result<f64, Error> {
    flag.or(defaults.tau).ok_or_else(|| {
        Error::Parameter("no --tau given and no tau file in the run config".into())
    })
}

fn resolve_codec(cli: &Cli, run_config: Option<&RunConfig>) -> CodecBackendConfig {
    let template = cli
        .decoder
        .clone()
        .or_else(|| run_config.and_then(|c| c.codec.as_ref().map(|k| k.decoder_template.clone())))
        .or_else(adnet_core::codec::default_decoder_template)
        .unwrap_or_default();
    CodecBackendConfig {
        decoder_template: template,
        timeout_secs: cli.decoder_timeout,
    }
}

fn build_codec(config: &CodecBackendConfig) -> Result<Codec, Error> {
    if config.decoder_template.is_empty() {
        return Err(Error::Environment(
            "no decoder backend found: pass --decoder, set ADNET_DECODER, or install qrdec/zbarimg".into(),
        ));
    }
    Codec::new(config)
}

/// Write the list of files a subcommand produced under its output directory.
fn write_artifacts(out_dir: &Path, files: &[String]) -> Result<(), Error> {
    let listing = files
        .iter()
        .map(|f| format!("\"{}\"", f))
        .collect::<Vec<_>>()
        .join(", ");
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("artifacts.toml"),
        format!("artifacts = [{}]\n", listing),
    )?;
    Ok(())
}

fn cmd_synth(args: SynthArgs, defaults: &Defaults) -> Result<ExitCode, Error> {
    let params = GenParams {
        seed: args.seed.or(defaults.seed).unwrap_or(0),
        qr_version: args.qr_version,
        ec_level: args.ec_level.parse()?,
        module_pixels: args.module_pixels,
        quiet_zone: args.quiet_zone,
        severity: (args.severity_min, args.severity_max),
        noise_sigma: (args.noise_min, args.noise_max),
        channels: 3,
    };
    let (train, test) = synth::build_dataset(&args.out_dir, args.n_train, args.n_test, &params)?;
    let mut files = vec!["train/manifest".to_string(), "test/manifest".to_string()];
    for s in &train.samples {
        files.push(format!("train/{}", s.sharp));
        files.push(format!("train/{}", s.blur));
    }
    for s in &test.samples {
        files.push(format!("test/{}", s.sharp));
        files.push(format!("test/{}", s.blur));
    }
    write_artifacts(&args.out_dir, &files)?;
    println!(
        "synth ok train={} test={} out_dir={}",
        train.count,
        test.count,
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_preset(name: &str) -> Result<ModelConfig, Error> {
    match name {
        "lenet-desk" => Ok(ModelConfig::lenet_desk()),
        "eg-desk" => Ok(ModelConfig::eg_restormer_desk()),
        "lenet-paper" => Ok(ModelConfig::lenet_paper()),
        "eg-paper" => Ok(ModelConfig::eg_restormer_paper()),
        other => Err(Error::Parameter(format!(
            "unknown preset `{}` (expected lenet-desk|eg-desk|lenet-paper|eg-paper)",
            other
        ))),
    }
}

fn cmd_train(args: TrainArgs, defaults: &Defaults) -> Result<ExitCode, Error> {
    let mut config = match &args.train_config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Environment(format!("cannot read {}: {}", path.display(), e)))?;
            TrainConfig::parse_str(&text)?
        }
        None => {
            let preset = args
                .preset
                .clone()
                .or_else(|| defaults.preset.clone())
                .unwrap_or_else(|| "lenet-desk".to_string());
            TrainConfig::desk(
                parse_preset(&preset)?,
                args.iters,
                args.seed.or(defaults.seed).unwrap_or(0),
            )
        }
    };
    if args.train_config.is_none() {
        config.init_from = args.init_from.clone();
    }
    let outcome = trainer::train_from_dirs(
        &config,
        &args.train_dir,
        args.val_dir.as_deref(),
        &args.out_dir,
    )?;
    write_artifacts(
        &args.out_dir,
        &[
            "final.ckpt".into(),
            "best.ckpt".into(),
            "train.log".into(),
            "config.toml".into(),
        ],
    )?;
    println!(
        "train ok final={} best={} initial_loss={:.6} final_loss={:.6}{}",
        outcome.final_checkpoint.display(),
        outcome.best_checkpoint.display(),
        outcome.initial_loss,
        outcome.final_loss,
        outcome
            .best_val_psnr
            .map(|v| format!(" best_val_psnr={:.3}", v))
            .unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(args: CalibrateArgs, codec_config: &CodecBackendConfig) -> Result<ExitCode, Error> {
    let codec = build_codec(codec_config)?;
    codec.probe()?;
    let manifest = DatasetManifest::load(&args.dataset_dir)?;
    let lenet = load_model_expecting(&args.lenet, &checkpoint_config(&args.lenet)?)?;
    let records = routing::collect_calibration_records(&manifest, &args.dataset_dir, &lenet, &codec)?;
    let outcome = routing::calibrate_threshold(&records)?;
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, routing::calibration_report(&records, &outcome))?;
    }
    println!(
        "calibrate ok tau={:.6} separable={} decodable={} non_decodable={}",
        outcome.tau, outcome.separable, outcome.decodable_count, outcome.non_decodable_count
    );
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_config(path: &Path) -> Result<ModelConfig, Error> {
    Ok(adnet_core::checkpoint::Checkpoint::load(path)?.config)
}

fn cmd_route(args: RouteArgs, defaults: &Defaults) -> Result<ExitCode, Error> {
    let tau = require_tau(args.tau, defaults)?;
    let image = ImageBuffer::load_png(&args.image)?;
    let lv = routing::laplacian_variance(&image)?;
    let decision = routing::route(lv, tau)?;
    let branch = match decision.branch {
        routing::Branch::Mild => "LENet",
        routing::Branch::Severe => "EG-Restormer",
    };
    println!("v={:.6} tau={:.6} branch={}", lv, tau, branch);
    Ok(ExitCode::SUCCESS)
}

/// A pipeline owning its parts, buildable per worker thread.
struct OwnedPipeline {
    lenet: Model<f32>,
    eg: Model<f32>,
    tau: f64,
    codec: Codec,
}

impl Restorer for OwnedPipeline {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer, Error> {
        AdnetPipeline {
            lenet: &self.lenet,
            eg_restormer: &self.eg,
            tau: self.tau,
            codec: &self.codec,
        }
        .restore(image)
    }

    fn name(&self) -> String {
        format!(
            "adnet[{} | {} | tau={:.4}]",
            self.lenet.name(),
            self.eg.name(),
            self.tau
        )
    }
}

fn cmd_restore(
    args: RestoreArgs,
    codec_config: &CodecBackendConfig,
    defaults: &Defaults,
) -> Result<ExitCode, Error> {
    let tau = require_tau(args.tau, defaults)?;
    let codec = build_codec(codec_config)?;
    codec.probe()?;
    let lenet = load_model_expecting(&args.lenet, &checkpoint_config(&args.lenet)?)?;
    let eg = load_model_expecting(&args.eg, &checkpoint_config(&args.eg)?)?;
    let pipeline = AdnetPipeline {
        lenet: &lenet,
        eg_restormer: &eg,
        tau,
        codec: &codec,
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let mut traces = String::new();
    let mut files = Vec::new();
    let mut restore_one = |name: &str, image: &ImageBuffer| -> Result<(), Error> {
        let (restored, decision, decode) = pipeline.restore_traced(image)?;
        let out_name = format!("restored_{}", name);
        restored.save_png(&args.out_dir.join(&out_name))?;
        files.push(out_name.clone());
        let trace: Vec<&str> = decision
            .trace
            .iter()
            .map(|n| match n {
                routing::NetworkId::Lenet => "lenet",
                routing::NetworkId::EgRestormer => "eg-restormer",
            })
            .collect();
        traces.push_str(&format!(
            "[[image]]\nname = \"{}\"\nv = {}\ntau = {}\nbranch = \"{:?}\"\ntrace = {:?}\ndecoded = {}\n\n",
            name,
            decision.lv,
            decision.tau,
            decision.branch,
            trace,
            decode.decoded(),
        ));
        Ok(())
    };
    match (&args.image, &args.dataset_dir) {
        (Some(img), None) => {
            let image = ImageBuffer::load_png(img)?;
            let name = img
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image.png".into());
            restore_one(&name, &image)?;
        }
        (None, Some(dir)) => {
            let manifest = DatasetManifest::load(dir)?;
            for i in 0..manifest.samples.len() {
                let (_, blurred) = manifest.load_pair(dir, i)?;
                restore_one(&format!("{:04}.png", i), &blurred)?;
            }
        }
        _ => {
            return Err(Error::Parameter(
                "restore needs exactly one of --image or --dataset-dir".into(),
            ))
        }
    }
    std::fs::write(args.out_dir.join("trace.toml"), &traces)?;
    files.push("trace.toml".into());
    write_artifacts(&args.out_dir, &files)?;
    println!("restore ok out_dir={}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    args: EvalArgs,
    codec_config: &CodecBackendConfig,
    defaults: &Defaults,
) -> Result<ExitCode, Error> {
    if codec_config.decoder_template.is_empty() {
        return Err(Error::Environment(
            "no decoder backend found: pass --decoder, set ADNET_DECODER, or install qrdec/zbarimg".into(),
        ));
    }
    let manifest = DatasetManifest::load(&args.dataset_dir)?;
    let report = match (&args.model, &args.lenet) {
        (Some(model_path), None) => {
            let ckpt = adnet_core::checkpoint::Checkpoint::load(model_path)?;
            let factory = move || -> Result<Box<dyn Restorer>, Error> {
                Ok(Box::new(ckpt.build_model()?) as Box<dyn Restorer>)
            };
            metrics::evaluate_parallel(&factory, &manifest, &args.dataset_dir, codec_config, args.workers)?
        }
        (None, Some(lenet_path)) => {
            let eg_path = args.eg.clone().expect("clap requires --eg");
            let tau = require_tau(args.tau, defaults)?;
            let lenet_ckpt = adnet_core::checkpoint::Checkpoint::load(lenet_path)?;
            let eg_ckpt = adnet_core::checkpoint::Checkpoint::load(&eg_path)?;
            let codec_cfg = codec_config.clone();
            let factory = move || -> Result<Box<dyn Restorer>, Error> {
                Ok(Box::new(OwnedPipeline {
                    lenet: lenet_ckpt.build_model()?,
                    eg: eg_ckpt.build_model()?,
                    tau,
                    codec: Codec::new(&codec_cfg)?,
                }) as Box<dyn Restorer>)
            };
            metrics::evaluate_parallel(&factory, &manifest, &args.dataset_dir, codec_config, args.workers)?
        }
        _ => {
            return Err(Error::Parameter(
                "eval needs either --model or the pipeline flags --lenet --eg --tau".into(),
            ))
        }
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, report.to_toml_string())?;
    if let Some(sheet) = &args.contact_sheet {
        let restorer: Box<dyn Restorer> = match (&args.model, &args.lenet) {
            (Some(model_path), None) => Box::new(adnet_core::checkpoint::load_model(model_path)?),
            (None, Some(lenet_path)) => Box::new(OwnedPipeline {
                lenet: adnet_core::checkpoint::load_model(lenet_path)?,
                eg: adnet_core::checkpoint::load_model(args.eg.as_ref().unwrap())?,
                tau: require_tau(args.tau, defaults)?,
                codec: build_codec(codec_config)?,
            }),
            _ => unreachable!(),
        };
        metrics::contact_sheet(restorer.as_ref(), &manifest, &args.dataset_dir, 8, sheet)?;
    }
    println!(
        "eval ok model={:?} dr={:.2} mean_psnr={:.3} mean_ssim={:.4} avg_time={:.4}s report={}",
        report.model,
        report.aggregates.decoding_rate_pct,
        report.aggregates.mean_psnr_db,
        report.aggregates.mean_ssim,
        report.aggregates.avg_time_secs,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let cases = adnet_core::gradcheck::run_full_suite(args.seed)?;
    let mut all_ok = true;
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<40} max_rel_err={:.3e} entries={} {}",
            c.name, c.max_rel_err, c.entries_checked, status
        );
        all_ok &= c.passed();
    }
    if all_ok {
        println!("gradcheck ok ({} cases)", cases.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Contract("gradient check failed".into()))
    }
}

fn cmd_decode(args: DecodeArgs, codec_config: &CodecBackendConfig) -> Result<ExitCode, Error> {
    let codec = build_codec(codec_config)?;
    codec.probe()?;
    println!("probe ok backend={:?}", codec.ident());
    if let Some(image) = &args.image {
        let img = ImageBuffer::load_png(image)?;
        let result = codec.decode(&img);
        match result.status {
            adnet_core::codec::DecodeStatus::Decoded => {
                println!("decoded payload={:?}", result.payload.unwrap_or_default());
            }
            adnet_core::codec::DecodeStatus::NotDecoded => println!("not_decoded"),
            adnet_core::codec::DecodeStatus::BackendError => println!("backend_error"),
        }
    }
    Ok(ExitCode::SUCCESS)
}
