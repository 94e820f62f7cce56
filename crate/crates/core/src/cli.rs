//! The `afr` command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{info, warn};

use crate::ablation::{render, run_sweep, variants, AblationRow, Sweep};
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::dataio::{check_protocol, dataset_id, materialize, read_image_native, resize_image};
use crate::error::{AfrError, Result};
use crate::evaluate::evaluate;
use crate::export::{write_heatmap_png, write_score};
use crate::metrics::{render_table, to_csv};
use crate::model::Model;
use crate::numeric::bilinear_resize;
use crate::params::ParamStore;
use crate::training::{train, TrainOutput};

/// Directory for cached prompt embeddings.
pub const CACHE_ENV: &str = "AFR_CACHE";

const CONFIG_KEYS: &str = "\
Config file (TOML; every key optional, see `afr print-config`):
  backbone_source        surrogate | surrogate:<seed> | file:<dir>
  seed                   adapter initialization seed
  workers                parallel workers, 0 = all CPUs
  out_dir                output directory
  [backbone]             image_size, patch_size, layers_total, stages, embed_dim, heads,
                         mlp_ratio, activation, text_*, shared_dim, cnn_channels,
                         pixel_mean, pixel_std
  [prompts]              normal, abnormal, stateless (templates with one {c})
  [sp]                   enabled, k, stages, use_pv, use_pl
  [mpfa]                 enabled, m
  [cmfr]                 enabled, fallback (visual | stateless), bounded_gate, use_mt, hidden
  [score]                temperature, average_image_stages
  [train]                epochs, batch_size, lr0, beta1, beta2, adam_eps, seed, focal_weight,
                         dice_weight, focal_gamma, dice_smooth, validation_fraction,
                         checkpoint_every
  [data.train] [data.test]
                         kind (synthetic | folder | manifest), id, root, split, classes,
                         per_class, seed
  [metrics]              pixel_mode (global | per_image)

Environment:
  AFR_CACHE              directory for cached prompt embeddings

Exit codes: 0 ok, 1 I/O, 2 configuration or protocol violation, 3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "afr", version, about = "Zero-shot anomaly detection with rectified text prompts", after_long_help = CONFIG_KEYS)]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Adapter checkpoint directory.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides both `seed` and `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel workers; 0 uses every CPU.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// `surrogate`, `surrogate:<seed>` or `file:<dir>`.
    #[arg(long, global = true)]
    pub backbone: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the adapters on `data.train`; writes checkpoints and a JSONL log.
    Train,
    /// Score `data.test` and write metrics.csv.
    Eval,
    /// Score one image; writes `<name>_score.txt` and `<name>_heatmap.png`.
    Predict {
        image: PathBuf,
        /// Object class used in the prompts.
        #[arg(long = "class")]
        class_name: String,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(value_parser = ["components", "sp_stages", "m", "pv_pl"])]
        sweep: String,
    },
    /// Print the resolved configuration.
    PrintConfig {
        /// Start from the small-data preset instead of the defaults.
        #[arg(long)]
        desk: bool,
    },
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let desk = matches!(cli.command, Command::PrintConfig { desk: true });
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if desk => RunConfig::desk_scale(),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(b) = &cli.backbone {
        cfg.backbone_source = b.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Command::PrintConfig { .. } = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| AfrError::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    pool.install(|| match &cli.command {
        Command::Train => cmd_train(&cfg, cli.checkpoint.as_deref()),
        Command::Eval => cmd_eval(&cfg, cli.checkpoint.as_deref()),
        Command::Predict { image, class_name } => cmd_predict(&cfg, cli.checkpoint.as_deref(), image, class_name),
        Command::Ablate { sweep } => cmd_ablate(&cfg, sweep.parse()?),
        Command::PrintConfig { .. } => unreachable!(),
    })
}

fn load_backbone(cfg: &RunConfig) -> Result<Arc<Backbone>> {
    Ok(Arc::new(Backbone::load(&cfg.backbone()?, cfg.backbone.clone())?))
}

fn with_cache(model: Model, cfg: &RunConfig) -> Model {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => {
            let tag = format!("{}|{}", cfg.backbone_source, toml::to_string(&cfg.backbone).unwrap_or_default());
            model.with_prompt_cache_dir(PathBuf::from(dir), tag)
        }
        _ => model,
    }
}

/// Adapters from `checkpoint` (training resumes from it), or freshly
/// initialized from the config seed.
pub fn build_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let backbone = load_backbone(cfg)?;
    let mcfg = cfg.model();
    let model = match checkpoint {
        Some(dir) => Model::new(backbone, ParamStore::load(&mcfg, dir)?, mcfg)?,
        None => Model::init(backbone, mcfg, cfg.seed)?,
    };
    Ok(with_cache(model, cfg))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AfrError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| AfrError::io(path, e))
}

fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    check_protocol(&dataset_id(&cfg.data.train), &dataset_id(&cfg.data.test))?;
    let train_set = materialize(&cfg.data.train, cfg.backbone.image_size)?;
    let mut model = build_model(cfg, checkpoint)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.toml"), &cfg.to_toml())?;
    let out = TrainOutput { dir: cfg.out_dir.clone() };
    let report = train(&cfg.train, &train_set, &mut model, Some(&out))?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} ({} samples); final loss {:.6}; best epoch {} ({:.6})",
        report.epochs.len(),
        train_set.id,
        train_set.samples.len(),
        last.train.total,
        report.best_epoch,
        report.best_loss
    );
    println!("checkpoints in {}", out.dir.join("checkpoints").display());
    Ok(())
}

fn build_trained_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    if checkpoint.is_none() {
        warn!("no --checkpoint given; using untrained adapters from seed {}", cfg.seed);
    }
    build_model(cfg, checkpoint)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let test_id = dataset_id(&cfg.data.test);
    check_protocol(&dataset_id(&cfg.data.train), &test_id)?;
    let test_set = materialize(&cfg.data.test, cfg.backbone.image_size)?;
    let model = build_trained_model(cfg, checkpoint)?;
    let e = evaluate(&model, &test_set, cfg.metrics.pixel_mode)?;
    let rows = e.rows(&test_id);
    create_dir(&cfg.out_dir)?;
    let csv = cfg.out_dir.join("metrics.csv");
    write_file(&csv, &to_csv(&rows))?;
    print!("{}", render_table(&rows));
    info!("metrics written to {}", csv.display());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, checkpoint: Option<&Path>, image: &Path, class_name: &str) -> Result<()> {
    let native = read_image_native(image)?;
    let (h, w) = (native.shape()[0], native.shape()[1]);
    let model = build_trained_model(cfg, checkpoint)?;
    info!("prompts for class {class_name:?} are generated from the templates");
    let result = model.infer(&resize_image(&native, cfg.backbone.image_size), class_name)?;
    let heatmap = bilinear_resize(&result.heatmap, (h, w))?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".into());
    create_dir(&cfg.out_dir)?;
    let score_path = cfg.out_dir.join(format!("{stem}_score.txt"));
    write_score(result.image_score, &score_path)?;
    write_heatmap_png(&heatmap, &cfg.out_dir.join(format!("{stem}_heatmap.png")))?;
    println!("{stem}: {:.6}", result.image_score);
    Ok(())
}

/// One line per variant and level.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,level,auroc,max_f1\n");
    for r in rows.iter().flat_map(|r| r.metric_rows()) {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.dataset, r.level.as_str(), r.auroc, r.max_f1);
    }
    out
}

fn cmd_ablate(cfg: &RunConfig, sweep: Sweep) -> Result<()> {
    check_protocol(&dataset_id(&cfg.data.train), &dataset_id(&cfg.data.test))?;
    let size = cfg.backbone.image_size;
    let train_set = materialize(&cfg.data.train, size)?;
    let test_set = materialize(&cfg.data.test, size)?;
    let backbone = load_backbone(cfg)?;
    let vs = variants(sweep, &cfg.model());
    let rows = run_sweep(&backbone, &vs, &cfg.train, cfg.seed, &train_set, &test_set, cfg.metrics.pixel_mode)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
    print!("{}", render(&rows));
    Ok(())
}
