use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use radarllm_core::pipeline::{self as pl, RunConfig, RunDir, Scorer, SEED_ENV};
use radarllm_core::training::LossMode;
use radarllm_core::Error;

/// Marine target detection in sea clutter: synthesize or ingest echoes,
/// extract feature tokens, fine-tune a token-weighted transformer and
/// report detection rates at a fixed false-alarm rate.
#[derive(Parser)]
#[command(name = "radarllm", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding the default artifact paths and manifest.
    #[arg(long, global = true, default_value = "run")]
    dir: PathBuf,
    /// Override one config key, e.g. `--set finetune.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set finetune.loss_mode=MODE`
    /// (preference, plain_ce, weighted_ce_sample).
    #[arg(long, global = true)]
    loss_mode: Option<LossMode>,
    /// Shorthand for `--set detect.scorer=S` (head or backbone).
    #[arg(long, global = true)]
    scorer: Option<Scorer>,
    /// Log verbosity when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize target and clutter cells and segment them into a dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment externally converted echoes (CSV: cell_id,kind,re,im).
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split the dataset, extract the five features and patch them.
    Features {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reference model on the validation split.
    TrainRef {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cache per-token reference losses of the training split.
    Score {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the backbone adapters with the configured loss mode.
    Finetune {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain the autoencoder head on frozen backbone features.
    TrainHead {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the test split and write the detection report.
    Eval {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Write the ROC points of a report as CSV.
    Roc {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge reports into a detection-rate table, or compare two sets.
    Report {
        /// Reports as `name=path` (or a path, named by its parent
        /// directory and file stem).
        #[arg(required = true)]
        reports: Vec<String>,
        /// Counterpart reports matched by name; emits a delta table.
        #[arg(long, num_args = 1..)]
        compare: Vec<String>,
        /// Column labels of the two sets in a comparison.
        #[arg(long, default_value = "pa,ce")]
        labels: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from synthesis to the ROC file.
    Run,
    /// Print the resolved configuration and its hash.
    Config,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut overrides = Vec::new();
    for s in &c.set {
        let Some((k, v)) = s.split_once('=') else {
            bail!(Error::Config(format!("--set expects KEY=VALUE, got `{s}`")));
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(m) = c.loss_mode {
        let name = match m {
            LossMode::Preference => "preference",
            LossMode::PlainCe => "plain_ce",
            LossMode::WeightedCeSample => "weighted_ce_sample",
        };
        overrides.push(("finetune.loss_mode".into(), format!("\"{name}\"")));
    }
    if let Some(s) = c.scorer {
        let name = match s {
            Scorer::Head => "head",
            Scorer::Backbone => "backbone",
        };
        overrides.push(("detect.scorer".into(), format!("\"{name}\"")));
    }
    Ok(RunConfig::resolve(&text, env_seed.as_deref(), &overrides)?)
}

fn named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let parent = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned());
            let name = match parent {
                Some(d) => format!("{d}/{stem}"),
                None => stem,
            };
            (name, p)
        }
    }
}

fn or(p: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.clone().unwrap_or(default)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let dir = RunDir::new(&cli.common.dir);
    let manifest = dir.manifest();
    let rec = |name: &str, f: &dyn Fn() -> radarllm_core::Result<pl::StepOutcome>| -> Result<()> {
        std::fs::create_dir_all(&dir.root).with_context(|| format!("creating {}", dir.root.display()))?;
        pl::record(&manifest, name, &cfg, f)?;
        Ok(())
    };
    match &cli.command {
        Command::Synth { out } => rec("synth", &|| pl::step_synth(&cfg, &or(out, dir.dataset()))),
        Command::Ingest { input, out } => rec("ingest", &|| pl::step_ingest(&cfg, input, &or(out, dir.dataset()))),
        Command::Features { dataset, out } => rec("features", &|| {
            pl::step_features(&cfg, &or(dataset, dir.dataset()), &or(out, dir.tokens()))
        }),
        Command::TrainRef { tokens, out } => rec("train-ref", &|| {
            pl::step_train_ref(&cfg, &or(tokens, dir.tokens()), &or(out, dir.reference()))
        }),
        Command::Score { tokens, reference, out } => rec("score", &|| {
            pl::step_score(&cfg, &or(tokens, dir.tokens()), &or(reference, dir.reference()), &or(out, dir.scores()))
        }),
        Command::Finetune { tokens, scores, out } => rec("finetune", &|| {
            pl::step_finetune(&cfg, &or(tokens, dir.tokens()), &or(scores, dir.scores()), &or(out, dir.backbone()))
        }),
        Command::TrainHead { tokens, backbone, out } => rec("train-head", &|| {
            pl::step_train_head(&cfg, &or(tokens, dir.tokens()), &or(backbone, dir.backbone()), &or(out, dir.head()))
        }),
        Command::Eval {
            tokens,
            backbone,
            head,
            out,
            roc,
        } => rec("eval", &|| {
            let head = or(head, dir.head());
            pl::step_eval(
                &cfg,
                &or(tokens, dir.tokens()),
                &or(backbone, dir.backbone()),
                Some(head.as_path()),
                &or(out, dir.report()),
                roc.as_deref(),
            )
        }),
        Command::Roc { report, out } => rec("roc", &|| pl::step_roc(&or(report, dir.report()), &or(out, dir.roc()))),
        Command::Report {
            reports,
            compare,
            labels,
            out,
        } => {
            let a: Vec<_> = reports.iter().map(|s| named(s)).collect();
            let b: Vec<_> = compare.iter().map(|s| named(s)).collect();
            let (la, lb) = labels.split_once(',').unwrap_or((labels.as_str(), "b"));
            let cmp = (!b.is_empty()).then_some((la, lb, b.as_slice()));
            let outcome = pl::step_report(&a, cmp, out)?;
            print!("{}", std::fs::read_to_string(&outcome.outputs[0])?);
            Ok(())
        }
        Command::Run => {
            let r = pl::run_all(&cfg, &dir)?;
            println!(
                "{}: DR {:.4} at FAR {:.4} (requested {}), report {}",
                r.scorer,
                r.detection_rate,
                r.achieved_far,
                r.requested_pfa,
                dir.report().display()
            );
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            println!("# hash = \"{}\"", cfg.hash());
            Ok(())
        }
    }
}

/// 2 for invalid input or configuration, 3 for numeric failure during
/// training, 4 for missing, corrupt or mismatched artifacts.
fn exit_code(e: &anyhow::Error) -> u8 {
    use radarllm_core::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Diverged { .. } | E::NonFinite(_) | E::FrozenMutated { .. } => 3,
                E::ArtifactMismatch(_)
                | E::MissingSamples(_)
                | E::BadMagic { .. }
                | E::Version { .. }
                | E::Truncated { .. } => 4,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
                E::Nn(n) => nn_code(n),
                _ => 2,
            };
        }
        if let Some(n) = cause.downcast_ref::<radarllm_nn::NnError>() {
            return nn_code(n);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 4;
            }
        }
    }
    2
}

fn nn_code(e: &radarllm_nn::NnError) -> u8 {
    use radarllm_nn::NnError as N;
    match e {
        N::NonFinite(_) | N::NonFiniteGradient(_) => 3,
        N::Checkpoint(_) | N::Json(_) => 4,
        N::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.common.log))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
