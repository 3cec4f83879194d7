use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use seffsal_core::ablation::{param_table, run_ablation, synthetic_split, write_ablation_csv};
use seffsal_core::checkpoint::Checkpoint;
use seffsal_core::config::{RunConfig, KEYS};
use seffsal_core::data::{loader_workers, make_pyramid, synth_generate, Dataset, Sample};
use seffsal_core::metrics::{evaluate_dataset, write_metrics_csv};
use seffsal_core::msnet::MsNet;
use seffsal_core::trainer::{infer, train, RunOutput};
use seffsal_core::Error;

const NET_KEYS: &[&str] = &[
    "stage_channels",
    "blocks_per_stage",
    "decoder_channels",
    "reduction",
    "input_sizes",
    "variant",
    "fusion",
];

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "micro_batch",
    "lr0",
    "decay_factor",
    "decay_every",
    "epochs",
    "seed",
    "checkpoint_every",
    "hflip",
    "lambda_bce",
    "lambda_iou",
    "lambda_l1",
    "omega_mu",
    "loss_kernels",
];

const SYNTH_KEYS: &[&str] = &["seed", "synth_n", "synth_canvas"];

const CONFIG_SYNTAX: &str = "Config file: one `key = value` per line; blank lines and lines starting with `#` are \
ignored; lists are comma-separated; each key at most once. --set KEY=VALUE overrides win over the file, and --seed \
wins over both.";

#[derive(Parser)]
#[command(name = "seffsal", version, about = "Multiscale RGB-D salient object detection")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed; same as `--set seed=N`, applied last.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `dataset`; writes config.txt, loss.csv and checkpoints.
    Train,
    /// Predict saliency maps with a trained checkpoint.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// RGB image (single-pair mode).
        #[arg(long, value_name = "PATH", requires = "depth", conflicts_with = "dataset")]
        rgb: Option<PathBuf>,
        /// Depth image (single-pair mode).
        #[arg(long, value_name = "PATH", requires = "rgb")]
        depth: Option<PathBuf>,
        /// Dataset root whose every RGB-D pair is predicted into --out.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Score prediction PNGs against ground-truth masks; writes metrics.csv.
    Eval {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Build the full, scale2, scale1 and w/o-SEFF variants; optionally
    /// train and score each.
    Ablate,
    /// Write a synthetic RGB-D dataset.
    Synth,
}

fn key_help(keys: &[&str]) -> String {
    let mut s = String::from("Config keys read:\n");
    for k in keys {
        let doc = KEYS.iter().find(|(name, _)| name == k).map_or("", |(_, d)| d);
        s.push_str(&format!("  {k:<18} {doc}\n"));
    }
    s.push('\n');
    s.push_str(CONFIG_SYNTAX);
    s
}

fn command() -> clap::Command {
    let cat = |parts: &[&[&'static str]]| -> Vec<&'static str> { parts.concat() };
    let train = cat(&[NET_KEYS, TRAIN_KEYS, &["dataset"]]);
    let ablate = cat(&[
        NET_KEYS,
        TRAIN_KEYS,
        &["dataset", "test_dataset", "synth_n", "synth_test_n", "synth_canvas", "ablate_train"],
    ]);
    Cli::command()
        .mut_subcommand("train", |c| c.after_help(key_help(&train)))
        .mut_subcommand("infer", |c| c.after_help(key_help(NET_KEYS)))
        .mut_subcommand("eval", |c| c.after_help(format!("Config keys read: none.\n\n{CONFIG_SYNTAX}")))
        .mut_subcommand("ablate", |c| c.after_help(key_help(&ablate)))
        .mut_subcommand("synth", |c| c.after_help(key_help(SYNTH_KEYS)))
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> anyhow::Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_dataset(root: &Path, key: &str) -> anyhow::Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::config(key, format!("{} is not a directory", root.display())).into());
    }
    let ds = Dataset::open(root)?;
    if ds.is_empty() {
        return Err(Error::config(key, format!("{} holds no complete RGB/depth/GT triples", root.display())).into());
    }
    Ok(ds.load_all(loader_workers())?)
}

fn cmd_train(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let root = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::config("dataset", "training needs a dataset path"))?;
    let samples = load_dataset(&root, "dataset")?;
    let dir = out_dir(cli, "runs/train")?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let pyramids = samples
        .iter()
        .map(|s| make_pyramid(s, &cfg.net))
        .collect::<seffsal_core::Result<Vec<_>>>()?;
    let net = MsNet::new(&cfg.net, cfg.train.seed)?;
    log::info!("training {} parameters on {} samples", net.num_params(), pyramids.len());
    let out = RunOutput {
        dir: &dir,
        run_config: cfg.to_json(),
    };
    let outcome = train(net, &pyramids, &cfg.train, Some(&out))?;
    if let Some(last) = outcome.log.last() {
        println!("final loss {:.6} after {} iterations", last.total, last.iteration);
    }
    for p in &outcome.checkpoints {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_infer(
    cli: &Cli,
    checkpoint: &Path,
    rgb: Option<&Path>,
    depth: Option<&Path>,
    dataset: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let net = Checkpoint::load(checkpoint)?.restore(&cfg.net)?;
    let dir = out_dir(cli, "runs/infer")?;
    match (rgb, depth, dataset) {
        (Some(rgb), Some(depth), None) => {
            let stem = rgb.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
            let path = dir.join(format!("{stem}.png"));
            infer(&net, rgb, depth, &path)?;
            println!("wrote {}", path.display());
        }
        (None, None, Some(root)) => {
            let ds = Dataset::open(root)?;
            let rgb_stems: Vec<_> = ds.entries.iter().collect();
            if rgb_stems.is_empty() {
                return Err(Error::config("dataset", format!("{} holds no RGB-D pairs", root.display())).into());
            }
            for e in rgb_stems {
                infer(&net, &e.rgb, &e.depth, &dir.join(format!("{}.png", e.id)))?;
            }
            println!("wrote {} predictions to {}", ds.len(), dir.display());
        }
        _ => return Err(anyhow!(Error::config("infer", "give either --rgb and --depth, or --dataset"))),
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, pred: &Path, gt: &Path) -> anyhow::Result<()> {
    for (dir, key) in [(pred, "pred"), (gt, "gt")] {
        if !dir.is_dir() {
            return Err(Error::config(key, format!("{} is not a directory", dir.display())).into());
        }
    }
    let report = evaluate_dataset(pred, gt)?;
    if report.rows.is_empty() {
        return Err(Error::config(
            "pred",
            format!("no file stems shared by {} and {}", pred.display(), gt.display()),
        )
        .into());
    }
    let dir = out_dir(cli, "runs/eval")?;
    let csv = dir.join("metrics.csv");
    write_metrics_csv(&csv, &report)?;
    let s = report.summary;
    println!("images {} (empty masks skipped for F/E/S: {})", s.images, s.skipped_empty);
    println!("M {:.4}  F {:.4}  E {:.4}  S {:.4}", s.mae, s.f_max, s.e_max, s.s_measure);
    if !report.unmatched.is_empty() {
        println!("unmatched: {}", report.unmatched.join(", "));
    }
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_ablate(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let dir = out_dir(cli, "runs/ablate")?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let sets = if cfg.ablate_train {
        let (train_set, test_set) = match (&cfg.dataset, &cfg.test_dataset) {
            (Some(tr), Some(te)) => (load_dataset(tr, "dataset")?, load_dataset(te, "test_dataset")?),
            (None, None) => synthetic_split(cfg.train.seed, cfg.synth_n, cfg.synth_test_n, cfg.synth_canvas)?,
            (None, Some(_)) => return Err(Error::config("dataset", "test_dataset is set without dataset").into()),
            (Some(_), None) => return Err(Error::config("test_dataset", "dataset is set without test_dataset").into()),
        };
        Some((train_set, test_set))
    } else {
        None
    };
    let rows = run_ablation(
        &cfg.net,
        &cfg.train,
        sets.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
    )?;
    print!("{}", param_table(&rows));
    for r in &rows {
        if let Some(m) = &r.metrics {
            println!(
                "{:<10} M {:.4}  F {:.4}  E {:.4}  S {:.4}",
                r.variant, m.mae, m.f_max, m.e_max, m.s_measure
            );
        }
    }
    let csv = dir.join("ablation.csv");
    write_ablation_csv(&csv, &rows)?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_synth(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let dir = out_dir(cli, "runs/synth")?;
    let set = synth_generate(cfg.train.seed, cfg.synth_n, cfg.synth_canvas)?;
    set.write(&dir)?;
    println!(
        "wrote {} samples ({}×{}) to {}",
        set.samples.len(),
        cfg.synth_canvas.0,
        cfg.synth_canvas.1,
        dir.display()
    );
    Ok(())
}

/// 2 for configuration problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::ArchitectureMismatch { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Infer {
            checkpoint,
            rgb,
            depth,
            dataset,
        } => cmd_infer(&cli, checkpoint, rgb.as_deref(), depth.as_deref(), dataset.as_deref()),
        Command::Eval { pred, gt } => cmd_eval(&cli, pred, gt),
        Command::Ablate => cmd_ablate(&cli),
        Command::Synth => cmd_synth(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
