use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use globalmind::bench::{format_table, growth_factors, run_bench};
use globalmind::checkpoint::{load_checkpoint, save_checkpoint};
use globalmind::eval::{confusion, metrics, render_confusion_map};
use globalmind::gradcheck::{block_suite, model_entries, op_suite, TOLERANCE};
use globalmind::io::{read_binary_map, read_hsc, read_labels, write_binary_map, write_hsc, write_labels};
use globalmind::synth::{synth_generate, SynthSpec};
use globalmind::tiling::infer_tiled;
use globalmind::train::{train_with, write_loss_history};
use globalmind::{AttentionMode, AxialLayout, Error, GasCombo, GlobalMindModel, HyperCube, ModelConfig, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "globalmind", version, about = "Hyperspectral change detection with global axial attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file with optional "model", "train" and "synth" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// GAS layouts of the two GlobalM stages.
    #[arg(long, value_parser = ["rr", "rc", "cr", "cc"])]
    gas: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    tiles: Option<u8>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene pair and its labels.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write the checkpoint and loss history.
    Train {
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict a change map and change probabilities.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a change map against labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the full-model gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Time axial against full attention at growing sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
}

struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthSpec,
}

fn section<T: serde::de::DeserializeOwned + Default>(root: &Value, key: &str) -> anyhow::Result<T> {
    match root.get(key) {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("config section {key:?}: {e}")).into()),
        None => Ok(T::default()),
    }
}

fn settings(c: &Common) -> anyhow::Result<Settings> {
    let root: Value = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let mut s = Settings {
        model: section(&root, "model")?,
        train: section(&root, "train")?,
        synth: section(&root, "synth")?,
    };
    if let Some(seed) = c.seed {
        s.train.seed = seed;
        s.synth.seed = seed;
    }
    if let Some(g) = &c.gas {
        s.model.gas_combo = g.parse::<GasCombo>()?;
    }
    if let Some(e) = c.epochs {
        s.train.epochs = e;
    }
    if let Some(lr) = c.lr {
        s.train.lr0 = lr;
    }
    Ok(s)
}

fn tiles(c: &Common) -> anyhow::Result<usize> {
    match c.tiles.unwrap_or(1) {
        t @ (1 | 2 | 4) => Ok(t as usize),
        t => Err(Error::Usage(format!("--tiles must be 1, 2 or 4, got {t}")).into()),
    }
}

fn out_dir(c: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let s = settings(&common)?;
            let scene = synth_generate(&s.synth)?;
            let dir = out_dir(&common)?;
            write_hsc(&scene.t1, dir.join("t1.hsc"))?;
            write_hsc(&scene.t2, dir.join("t2.hsc"))?;
            write_labels(&scene.labels, dir.join("labels.chl"))?;
            let (h, w, b) = scene.t1.dims();
            println!("wrote {h}×{w}×{b} scene pair to {}", dir.display());
        }
        Command::Train { t1, t2, labels, common } => {
            let mut s = settings(&common)?;
            let x = read_hsc(&t1)?;
            let y = read_hsc(&t2)?;
            let labels = read_labels(&labels)?;
            s.model.in_bands = x.bands();
            let mut model = GlobalMindModel::<f32>::init_he_normal(s.model, s.train.seed)?;
            let every = (s.train.epochs / 10).max(1);
            let (history, _) = train_with(&mut model, &x, &y, &labels, &s.train, |r| {
                if r.epoch % every == 0 || r.epoch + 1 == s.train.epochs {
                    eprintln!("epoch {:>4}  lr {:.3e}  loss {:.6}", r.epoch, r.lr, r.loss);
                }
            })?;
            let dir = out_dir(&common)?;
            save_checkpoint(&model, dir.join("model.gmck"))?;
            let f = fs::File::create(dir.join("loss.jsonl"))?;
            write_loss_history(&history, BufWriter::new(f))?;
            println!("trained {} for {} epochs", model.config.variant_name(), history.len());
        }
        Command::Infer { model, t1, t2, common } => {
            let parts = tiles(&common)?;
            let model = load_checkpoint(&model)?;
            let x = read_hsc(&t1)?;
            let y = read_hsc(&t2)?;
            let out = infer_tiled(&model, &x, &y, parts)?;
            let dir = out_dir(&common)?;
            write_binary_map(&out.map, dir.join("change_map.chl"))?;
            write_hsc(&HyperCube::new(out.probabilities)?, dir.join("probabilities.hsc"))?;
            let changed = out.map.data().iter().filter(|&&v| v == 1).count();
            println!("{changed} of {} pixels predicted changed", out.map.data().len());
        }
        Command::Eval { pred, labels, common } => {
            let pred = read_binary_map(&pred)?;
            let labels = read_labels(&labels)?;
            let report = metrics(&confusion(&pred, &labels)?)?;
            let dir = out_dir(&common)?;
            fs::write(dir.join("metrics.txt"), report.to_text())?;
            render_confusion_map(&pred, &labels)?.write_png(dir.join("confusion.png"))?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck { common } => {
            let seed = common.seed.unwrap_or(0);
            let mut entries = op_suite(seed)?;
            entries.extend(block_suite(seed)?);
            entries.extend(model_entries(seed)?);
            let mut failed = 0;
            for e in &entries {
                let ok = e.passed(TOLERANCE);
                failed += usize::from(!ok);
                println!(
                    "{:<24} worst {:.3e} at {}[{}]  {}",
                    e.name,
                    e.worst.max_rel_error,
                    e.worst.param,
                    e.worst.worst_index,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks exceeded {TOLERANCE:e}")).into());
            }
        }
        Command::Bench { sizes, bands, reps, common } => {
            if sizes.is_empty() || sizes.contains(&0) || bands == 0 {
                bail!(Error::Usage("bench needs positive sizes and bands".into()));
            }
            let modes = [AttentionMode::Axial(AxialLayout::Grs), AttentionMode::Full];
            let points = run_bench(&sizes, bands, &modes, reps)?;
            let table = format_table(&points);
            print!("{table}");
            for m in modes {
                let g = growth_factors(&points, m);
                println!("{} growth per doubling: {g:.2?}", globalmind::bench::mode_name(m));
            }
            if common.out != Path::new(".") {
                fs::write(out_dir(&common)?.join("bench.txt"), table)?;
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => EXIT_USAGE,
        Some(err) if err.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
