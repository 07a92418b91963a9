use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use predcls::model::BranchMode;
use predcls::sla::AttentionMode;
use predcls_cli::{ablation_table, cmd_ablate, cmd_eval, cmd_project, cmd_synth, cmd_train, RunConfig, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "predcls", version, about = "Predicate classification: data synthesis, training, evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, env = "PREDCLS_OUT")]
    out: Option<PathBuf>,
    /// Seed for data generation, initialisation and shuffling
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    train_images: Option<usize>,
    #[arg(long, global = true)]
    test_images: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test splits as annotation files
    Synth,
    /// Train a model and write a checkpoint and an epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Run the component ablation grid
    Ablate(AblateArgs),
    /// Project attention vectors of test pairs to 2-D
    Project(CheckpointArg),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// none, linguistic, spatial or spatio-linguistic
    #[arg(long, value_parser = parse_kebab::<AttentionMode>)]
    attention: Option<AttentionMode>,
    /// predicate, object-subject or both
    #[arg(long, value_parser = parse_kebab::<BranchMode>)]
    branches: Option<BranchMode>,
    /// Turn off the auxiliary branch losses
    #[arg(long)]
    no_deep_supervision: bool,
}

#[derive(Args)]
struct CheckpointArg {
    /// Defaults to the checkpoint in the output directory
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Recall settings such as `1@50,70@100`
    #[arg(long, value_delimiter = ',', value_parser = parse_setting)]
    recall: Vec<(usize, usize)>,
    /// Average recall per image instead of over all pairs
    #[arg(long)]
    per_image: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_setting(s: &str) -> Result<(usize, usize), String> {
    let (k, x) = s.split_once('@').ok_or_else(|| format!("expected k@x, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(k)?, num(x)?))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.data.synthetic.seed = s;
            cfg.train.seed = s;
            cfg.project.projection.seed = s;
        }
        if let Some(n) = self.train_images {
            cfg.data.train_images = n;
        }
        if let Some(n) = self.test_images {
            cfg.data.test_images = n;
        }
        Ok(cfg)
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.base_lr = v;
        }
        if let Some(v) = self.attention {
            t.attention = v;
        }
        if let Some(v) = self.branches {
            t.branches = v;
        }
        if self.no_deep_supervision {
            t.deep_supervision = false;
        }
    }
}

impl CheckpointArg {
    fn path(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT_FILE))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.common.resolve()?;
    match cli.command {
        Command::Synth => {
            let dir = cmd_synth(&cfg)?;
            println!("wrote dataset to {}", dir.display());
        }
        Command::Train(args) => {
            args.apply(&mut cfg);
            let path = cmd_train(&cfg)?;
            let log = std::fs::read_to_string(cfg.out_dir().join(predcls_cli::TRAIN_LOG_FILE))?;
            for line in log.lines().skip(1) {
                let rec: predcls::train::EpochRecord = serde_json::from_str(line)?;
                let val = rec.val_recall_1_50.map_or_else(|| "-".into(), |v| format!("{:.4}", v));
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:.4}  val R_1@50 {val}",
                    rec.epoch, rec.lr, rec.train_loss, rec.train_accuracy
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Eval(args) => {
            if !args.recall.is_empty() {
                cfg.eval.settings = args.recall.clone();
            }
            if args.per_image {
                cfg.eval.per_image = true;
            }
            let report = cmd_eval(&cfg, &args.checkpoint.path(&cfg))?;
            println!("{} on {} test pairs", report.variant, report.test_pairs);
            for (label, v) in &report.recall {
                println!("{label:<10} {:.2}", 100.0 * v);
            }
            if let Some(a) = report.alignment {
                println!("alignment  {a:.4}");
            }
        }
        Command::Ablate(args) => {
            args.train.apply(&mut cfg);
            if !args.seeds.is_empty() {
                cfg.ablate.seeds = args.seeds.clone();
            }
            let report = cmd_ablate(&cfg, |r| {
                eprintln!("{:<22} seed {}  R_1@50 {:.4}  {:.1}s", r.variant, r.seed, r.recall_1_50, r.seconds)
            })?;
            print!("{}", ablation_table(&report));
        }
        Command::Project(args) => {
            let path = cmd_project(&cfg, &args.path(&cfg))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
