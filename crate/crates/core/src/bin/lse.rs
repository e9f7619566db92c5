use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lse_core::evaluate;
use lse_core::model::read_checkpoint;
use lse_core::pipeline::{self, RunConfig};
use lse_core::selection::{score_images, ImageId, SelectionRecord};
use lse_core::synth::{self, DatasetManifest, Domain, DomainPair};
use lse_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lse", version, about = "Self-training domain adaptation for segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    steps_per_round: Option<usize>,
    #[arg(long)]
    source_steps: Option<usize>,
    /// Weight of the focal term; 0 disables it.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.data.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.run.seed = v;
        }
        if let Some(v) = self.rounds {
            cfg.run.rounds = v;
        }
        if let Some(v) = self.steps_per_round {
            cfg.run.steps_per_round = v;
        }
        if let Some(v) = self.source_steps {
            cfg.run.source_steps = v;
        }
        if let Some(v) = self.beta {
            cfg.loss.beta = v;
        }
        if let Some(v) = &self.eval_manifest {
            cfg.data.eval_manifest = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target datasets plus a matching run.toml.
    GenData {
        /// `default` or a JSON file holding a source/target spec pair.
        #[arg(long, default_value = "default")]
        spec: String,
        /// Images per domain.
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the labelled source domain only.
    TrainSource {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the adaptation rounds.
    Adapt {
        #[command(flatten)]
        overrides: Overrides,
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Per-image class confidence table as CSV.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class selection counts per round for one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Format {
            path: p.to_owned(),
            message: e.to_string(),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(spec: &str, n: usize, out: &Path, height: usize, width: usize, seed: u64) -> Result<()> {
    let pair = if spec == "default" {
        DomainPair::default_pair(height, width, seed)
    } else {
        let text = std::fs::read_to_string(spec).map_err(|e| Error::Format {
            path: spec.into(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: spec.into(),
            source,
        })?
    };
    synth::generate_dataset(&pair.source, Domain::Source, n, out.join("source"))?;
    synth::generate_dataset(&pair.target, Domain::Target, n, out.join("target"))?;
    let mut cfg = RunConfig::default();
    cfg.data.source_manifest = out.join("source/manifest.json");
    cfg.data.target_manifest = out.join("target/manifest.json");
    cfg.data.eval_manifest = Some(out.join("target/manifest.json"));
    cfg.data.out_dir = out.join("run");
    cfg.run.seed = seed;
    emit(Some(&out.join("run.toml")), &cfg.to_toml())?;
    emit(
        Some(&out.join("domains.json")),
        &(serde_json::to_string_pretty(&pair).expect("serialisable") + "\n"),
    )?;
    log::info!("wrote {n} source and {n} target scenes to {}", out.display());
    Ok(())
}

fn score(checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let m = DatasetManifest::read(manifest)?;
    let images = m.images()?;
    let probs: Vec<_> = images
        .iter()
        .map(|(_, x)| lse_core::model::predict(&ck.params, x))
        .collect::<Result<_>>()?;
    let pairs: Vec<(ImageId, _)> = images.iter().zip(&probs).map(|((id, _), p)| (*id, p)).collect();
    let table = score_images(&pairs);
    let mut text = String::from("id");
    for c in 0..table.classes {
        text.push_str(&format!(",u{c}"));
    }
    text.push('\n');
    for row in &table.rows {
        text.push_str(&row.id.to_string());
        for v in &row.confidence {
            text.push(',');
            if let Some(v) = v {
                text.push_str(&format!("{v:.6}"));
            }
        }
        text.push('\n');
    }
    emit(out, &text)
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut histories = Vec::new();
    for dir in runs {
        let mut history = Vec::new();
        for r in 0.. {
            let path = dir.join(format!("round_{r}/selection.json"));
            if !path.exists() {
                break;
            }
            history.push(SelectionRecord::read_json(path)?);
        }
        if history.is_empty() {
            return Err(Error::Format {
                path: dir.clone(),
                message: "no round_*/selection.json found".into(),
            });
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        histories.push((name, history));
    }
    let refs: Vec<(&str, &[SelectionRecord])> =
        histories.iter().map(|(n, h)| (n.as_str(), h.as_slice())).collect();
    emit(out, &evaluate::selection_report(&refs))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            spec,
            n,
            out,
            height,
            width,
            seed,
        } => gen_data(&spec, n, &out, height, width, seed),
        Command::TrainSource { overrides } => {
            let cfg = overrides.resolve()?;
            pipeline::run_train_source(&cfg).map(|_| ())
        }
        Command::Adapt { overrides, init } => {
            let cfg = overrides.resolve()?;
            let states = pipeline::run_adapt(&cfg, init.as_deref())?;
            for s in states {
                match s.target_miou {
                    Some(m) => println!("round {}: {} images selected, target mIoU {:.4}", s.round, s.selected.len(), m),
                    None => println!("round {}: {} images selected", s.round, s.selected.len()),
                }
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let m = DatasetManifest::read(&manifest)?;
            let pairs = m.eval_pairs()?;
            let refs: Vec<_> = pairs.iter().map(|(_, x, y)| (x, y)).collect();
            let (cm, rep) = evaluate::evaluate(&ck.params, &refs)?;
            let names = &synth::CLASS_NAMES[..ck.params.config.classes.min(synth::CLASS_NAMES.len())];
            evaluate::write_report(&out, &cm, &rep, Some(names))?;
            println!("mIoU {:.4} over {} images", rep.miou, rep.images);
            Ok(())
        }
        Command::Score {
            checkpoint,
            manifest,
            out,
        } => score(&checkpoint, &manifest, out.as_deref()),
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = std::env::var("LSE_THREADS").ok().and_then(|v| v.parse().ok());
    lse_core::par::init_threads(threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
