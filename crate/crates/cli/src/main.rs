//! `xraydet`: train, evaluate and compare X-ray baggage detectors.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand};
use xraydet::assembly::{
    build_detector, enumerate_reference_configs, validate_skip_config, DetectorConfig, SkipConfig,
};
use xraydet::backbone::BackboneSpec;
use xraydet::data::{write_synthetic, ClassTaxonomy, DatasetManifest, SynthDatasetConfig};
use xraydet::harness::{
    evaluate, load_checkpoint, read_checkpoint_config, read_results, run_protocol, write_results, ProtocolData,
    ResultsFile, TrainConfig,
};
use xraydet::report::{aggregate, analyze};

use run::{load_detector_config, RunManifest, DEVICE_ENV};

#[derive(Debug, Parser)]
#[command(name = "xraydet", version, about = "Object detection for X-ray baggage screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run, detector or synthetic-dataset config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `eval`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// cpu, cuda, cuda:N or metal. Defaults to $XRAYDET_DEVICE, then cpu.
    #[arg(long, global = true)]
    device: Option<String>,
    /// Dataset manifest; overrides the one named in the config.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate one detector under the configured protocol.
    Train,
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split name from the dataset manifest.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the protocol for all four reference detectors, then analyze.
    Sweep,
    /// Check a detector's skip connection against its backbone.
    Validate {
        /// Skip connection as "x,y"; overrides the config.
        #[arg(long)]
        skip: Option<String>,
    },
    /// Build tables and charts from results files.
    Analyze { results: Vec<PathBuf> },
    /// Write a synthetic dataset with its manifest.
    Synth,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train => train(cli),
        Command::Eval { checkpoint, split } => eval(cli, checkpoint, split),
        Command::Sweep => sweep(cli),
        Command::Validate { skip } => validate(cli, skip.as_deref()),
        Command::Analyze { results } => analyze_cmd(cli, results),
        Command::Synth => synth(cli),
    }
}

fn device(flag: Option<&str>) -> Result<Device> {
    let spec = flag
        .map(str::to_string)
        .or_else(|| std::env::var(DEVICE_ENV).ok())
        .unwrap_or_else(|| "cpu".into());
    Ok(match spec.as_str() {
        "cpu" => Device::Cpu,
        "cuda" => Device::new_cuda(0)?,
        "metal" => Device::new_metal(0)?,
        s => match s.strip_prefix("cuda:").map(str::parse::<usize>) {
            Some(Ok(n)) => Device::new_cuda(n)?,
            _ => bail!("unknown device {s:?}; expected cpu, cuda, cuda:N or metal"),
        },
    })
}

fn require<'a>(p: Option<&'a PathBuf>, flag: &str) -> Result<&'a Path> {
    p.map(PathBuf::as_path).with_context(|| format!("{flag} is required"))
}

fn load_run(cli: &Cli) -> Result<RunManifest> {
    let mut run = RunManifest::load(require(cli.config.as_ref(), "--config")?)?;
    if let Some(seed) = cli.seed {
        run.train.seed = seed;
    }
    Ok(run)
}

fn fit_classes(mut det: DetectorConfig, explicit: bool, taxonomy: &ClassTaxonomy) -> DetectorConfig {
    if !explicit {
        det.num_classes = taxonomy.len();
    }
    det
}

fn run_one(
    data: &ProtocolData,
    det: &DetectorConfig,
    train_cfg: &TrainConfig,
    device: &Device,
    out: &Path,
) -> Result<ResultsFile> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = run_protocol(data, det, train_cfg, device, Some(out))?;
    let results = ResultsFile::new(det.clone(), train_cfg.clone(), report);
    let path = out.join("results.json");
    write_results(&path, &results)?;
    let a = aggregate(&results.report)?;
    println!(
        "{}: mAP50 {:.4}  mAP50:95 {:.4}  -> {}",
        results.report.detector,
        a.map50,
        a.map50_95,
        path.display()
    );
    Ok(results)
}

fn train(cli: &Cli) -> Result<ExitCode> {
    let run = load_run(cli)?;
    let device = device(cli.device.as_deref())?;
    let manifest = DatasetManifest::load(&run.manifest_path(cli.manifest.as_deref())?)?;
    let det = fit_classes(run.detector.clone(), run.explicit_classes, &manifest.taxonomy());
    let data = ProtocolData::from_manifest(run.protocol, &manifest)?;
    run_one(&data, &det, &run.train, &device, &run.out_dir(cli.out.as_deref())?)?;
    Ok(ExitCode::SUCCESS)
}

fn sweep(cli: &Cli) -> Result<ExitCode> {
    let run = load_run(cli)?;
    let device = device(cli.device.as_deref())?;
    let manifest = DatasetManifest::load(&run.manifest_path(cli.manifest.as_deref())?)?;
    let template = fit_classes(run.detector.clone(), run.explicit_classes, &manifest.taxonomy());
    let data = ProtocolData::from_manifest(run.protocol, &manifest)?;
    let out = run.out_dir(cli.out.as_deref())?;
    let mut all = Vec::new();
    for reference in enumerate_reference_configs(template.num_classes) {
        let det = DetectorConfig {
            head: reference.head,
            backbone: BackboneSpec {
                width_scale: template.backbone.width_scale,
                ..BackboneSpec::new(reference.backbone.kind)
            },
            skip: None,
            ..template.clone()
        };
        let dir = out.join(slug(&det.name()));
        all.push(run_one(&data, &det, &run.train, &device, &dir)?);
    }
    let files = analyze(&all, &out.join("analysis"))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

fn eval(cli: &Cli, checkpoint: &Path, split: &str) -> Result<ExitCode> {
    let device = device(cli.device.as_deref())?;
    let manifest_path = match (&cli.manifest, &cli.config) {
        (Some(m), _) => m.clone(),
        (None, Some(_)) => load_run(cli)?.manifest_path(None)?,
        (None, None) => bail!("--manifest or --config is required"),
    };
    let decode = match &cli.config {
        Some(_) => load_run(cli)?.train.decode,
        None => Default::default(),
    };
    let manifest = DatasetManifest::load(&manifest_path)?;
    let dataset = manifest.split(split)?;
    let det_cfg = read_checkpoint_config(checkpoint)?;
    let detector = build_detector(&det_cfg, 0, &device)?;
    load_checkpoint(checkpoint, &detector)?;
    let eval = evaluate(&detector, &dataset, &decode, 8)?;
    println!(
        "{} on {split} ({} images): mAP50 {:.4}  mAP50:95 {:.4}",
        det_cfg.name(),
        eval.report.num_images,
        eval.report.map50,
        eval.report.map50_95
    );
    if let Some(out) = &cli.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&eval.report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_skip(s: &str) -> Result<SkipConfig> {
    let (x, y) = s
        .split_once(',')
        .with_context(|| format!("--skip expects \"x,y\", got {s:?}"))?;
    Ok(SkipConfig::new(x.trim().parse()?, y.trim().parse()?))
}

fn validate(cli: &Cli, skip: Option<&str>) -> Result<ExitCode> {
    let mut det = match &cli.config {
        Some(p) => load_detector_config(p)?,
        None => DetectorConfig::default(),
    };
    if let Some(s) = skip {
        det.skip = Some(parse_skip(s)?);
    }
    let report = validate_skip_config(&det.backbone, det.skip());
    println!("{report}");
    if !report.passed {
        return Ok(ExitCode::FAILURE);
    }
    if let Err(e) = det.validate() {
        println!("{e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze_cmd(cli: &Cli, paths: &[PathBuf]) -> Result<ExitCode> {
    if paths.is_empty() {
        bail!("analyze needs at least one results file");
    }
    let out = require(cli.out.as_ref(), "--out")?;
    let results = paths.iter().map(|p| read_results(p)).collect::<Result<Vec<_>, _>>()?;
    for f in analyze(&results, out)? {
        println!("{}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(cli: &Cli) -> Result<ExitCode> {
    let mut cfg: SynthDatasetConfig = match &cli.config {
        Some(p) => {
            if !p.exists() {
                bail!("config file {} does not exist", p.display());
            }
            toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthDatasetConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.spec.seed = seed;
    }
    let out = require(cli.out.as_ref(), "--out")?;
    write_synthetic(&cfg, out)?;
    println!("{}", out.join("manifest.toml").display());
    Ok(ExitCode::SUCCESS)
}
