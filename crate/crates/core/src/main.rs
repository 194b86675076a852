use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spairswin::checkpoint::Checkpoint;
use spairswin::dataset::{LabelMap, Split, SplitManifest};
use spairswin::metrics::Level;
use spairswin::model::{ModelConfig, SpairSwin};
use spairswin::patch::{PatchConfig, PatchManifest, Selector};
use spairswin::pipeline::{self, GradModule, RunConfig, PATCH_DIR};
use spairswin::synth::{Layout, SynthConfig};
use spairswin::train::TrainConfig;
use spairswin::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "spairswin", version, about = "Entropy patch selection and SPAIR-Swin camera model identification")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    /// Worker threads; defaults to the available parallelism. Outputs do not
    /// depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-class dataset.
    Synth(SynthArgs),
    /// Scan a dataset and write a stratified image-level split.
    Split(SplitArgs),
    /// Tile, score and select patches for every image of a split.
    Extract(ExtractArgs),
    /// Check that no image contributes patches to both splits.
    Verify(VerifyArgs),
    /// Train SPAIR-Swin on extracted patches.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write PLA/ILA/F1 reports.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Extract, train and evaluate for several patch counts.
    Sweep(SweepArgs),
    /// Render SVG bar charts from evaluation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RootArg {
    /// Dataset root (one folder per device).
    #[arg(long, env = "SPAIRSWIN_DATASET_ROOT")]
    root: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectorArg {
    Entropy,
    Homogeneity,
    Random,
}

impl From<SelectorArg> for Selector {
    fn from(s: SelectorArg) -> Self {
        match s {
            SelectorArg::Entropy => Selector::EntropyDesc,
            SelectorArg::Homogeneity => Selector::Homogeneity,
            SelectorArg::Random => Selector::Random,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct PatchArgs {
    /// Patch edge length in pixels.
    #[arg(long, default_value_t = 256)]
    k: usize,
    /// Patches selected per image.
    #[arg(long = "patches", default_value_t = 20)]
    patches: usize,
    #[arg(long, value_enum, default_value = "entropy")]
    selector: SelectorArg,
    /// Seed of the random selector.
    #[arg(long = "selector-seed", default_value_t = 0)]
    selector_seed: u64,
}

impl PatchArgs {
    fn config(&self) -> PatchConfig {
        PatchConfig {
            k: self.k,
            patches: self.patches,
            selector: self.selector.into(),
            seed: self.selector_seed,
            ..PatchConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// One stage, 4×4 token grid, 2×2 windows.
    Tiny,
    /// Two stages, dim 24, windows of up to 4×4.
    Desk,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Full model configuration as JSON; overrides the preset and flags.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    #[arg(long)]
    drop_rate: Option<f64>,
    #[arg(long)]
    abs_pos_embed: bool,
    /// Keep the SPAIR attention map summing to 1 instead of averaging 1.
    #[arg(long)]
    no_attention_rescale: bool,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

impl ModelArgs {
    fn config(&self, input_size: usize, num_classes: usize) -> Result<ModelConfig> {
        if let Some(path) = &self.model_config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg: ModelConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            return Ok(cfg);
        }
        let mut cfg = match self.preset {
            Preset::Tiny => ModelConfig::tiny(input_size, num_classes),
            Preset::Desk => ModelConfig::desk(input_size, num_classes),
        };
        let s = &mut cfg.swin;
        if let Some(v) = self.embed_dim {
            s.embed_dim = v;
        }
        if let Some(v) = self.patch_size {
            s.patch_size = v;
        }
        if let Some(v) = self.window {
            s.window = v;
        }
        if let Some(v) = &self.depths {
            s.depths = v.clone();
        }
        if let Some(v) = &self.heads {
            s.heads = v.clone();
        }
        if let Some(v) = self.drop_rate {
            s.drop_rate = v;
        }
        s.absolute_pos_embed = self.abs_pos_embed;
        cfg.spair.attention_rescale = !self.no_attention_rescale;
        cfg.init_seed = self.init_seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save `epoch_<n>.ckpt` every N epochs (0: only best and last).
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: usize,
    /// Stop after this many optimizer steps; resume with --resume.
    #[arg(long)]
    max_steps: Option<u64>,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            max_steps: self.max_steps,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Textured,
    Mixed,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    images_per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class trace RMS in gray levels.
    #[arg(long, default_value_t = 2.0)]
    amplitude: f64,
    #[arg(long, value_enum, default_value = "textured")]
    layout: LayoutArg,
    #[arg(long, default_value_t = 0.5)]
    flat_fraction: f64,
    /// Trace gain in flat regions relative to textured ones.
    #[arg(long, default_value_t = 1.0)]
    flat_gain: f64,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    root: RootArg,
    /// Label map JSON; defaults to `<root>/labels.json`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// Report folders missing from the label map instead of failing.
    #[arg(long)]
    allow_unmapped: bool,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    root: RootArg,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    patch: PatchArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    split: PathBuf,
    /// Patch manifest (`patches.jsonl`).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Patch manifest (`patches.jsonl`); tiles are read from `patches/` next to it.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Patch,
    Image,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Level of the headline macro F1.
    #[arg(long, value_enum, default_value = "patch")]
    f1_level: LevelArg,
    /// Also write every per-patch record to `records.jsonl`.
    #[arg(long)]
    dump_records: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModuleArg {
    Spair,
    Swin,
    All,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: ModuleArg,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    root: RootArg,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "15,20,30,60")]
    patch_counts: Vec<usize>,
    #[command(flatten)]
    patch: PatchArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One or more `report.json` files.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn patch_dir_for(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(PATCH_DIR)
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if workers == 0 {
        return Err(Error::InvalidArgument("--workers must be ≥ 1".into()));
    }
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                classes: a.classes,
                images_per_class: a.images_per_class,
                width: a.size,
                height: a.size,
                seed: a.seed,
                trace_amplitude: a.amplitude,
                flat_gain: a.flat_gain,
                layout: match a.layout {
                    LayoutArg::Textured => Layout::Textured,
                    LayoutArg::Mixed => Layout::Mixed {
                        flat_fraction: a.flat_fraction,
                    },
                },
                ..SynthConfig::default()
            };
            pipeline::cmd_synth(&cfg, &a.out)?;
            println!("wrote {} images to {}", cfg.classes * cfg.images_per_class, a.out.display());
        }
        Command::Split(a) => {
            let labels_path = a.labels.clone().unwrap_or_else(|| a.root.root.join("labels.json"));
            let labels = LabelMap::load(&labels_path)?;
            let mut rc = RunConfig::new("split");
            rc.dataset_root = Some(a.root.root.display().to_string());
            rc.seed = Some(a.seed);
            rc.ratio = Some(a.ratio);
            let m = pipeline::cmd_split(&a.root.root, &labels, a.seed, a.ratio, a.allow_unmapped, &a.out, &rc)?;
            for c in &m.header.class_counts {
                println!("{:<24} total {:>5} train {:>5} test {:>5}", c.name, c.total, c.train, c.test);
            }
        }
        Command::Extract(a) => {
            let split = SplitManifest::read(&a.split)?;
            let cfg = a.patch.config();
            let mut rc = RunConfig::new("extract");
            rc.dataset_root = Some(a.root.root.display().to_string());
            rc.patch = Some(cfg.clone());
            let m = pipeline::cmd_extract(&a.root.root, &split, &cfg, &a.out, workers, &rc)?;
            println!(
                "{} images, {} tiles, {} selected, {} skipped",
                m.header.images,
                m.header.tiles,
                m.header.selected,
                m.header.skipped.len()
            );
            if !m.header.skipped.is_empty() {
                return Err(Error::Dataset(format!("{} image(s) skipped", m.header.skipped.len())));
            }
        }
        Command::Verify(a) => {
            let split = SplitManifest::read(&a.split)?;
            let patches = PatchManifest::read(&a.manifest)?;
            let r = pipeline::cmd_verify(&split, &patches)?;
            println!("no leakage: {} train images, {} test images", r.train_images, r.test_images);
        }
        Command::Train(a) => {
            let manifest = PatchManifest::read(&a.manifest)?;
            let classes = manifest.header.class_names.len();
            let model_cfg = a.model.config(manifest.header.config.k, classes)?;
            let train_cfg = a.train.config();
            let mut rc = RunConfig::new("train");
            rc.patch = Some(manifest.header.config.clone());
            rc.model = Some(model_cfg.clone());
            rc.train = Some(train_cfg.clone());
            let r = pipeline::cmd_train(
                &manifest,
                &patch_dir_for(&a.manifest),
                &model_cfg,
                &train_cfg,
                &a.out,
                a.resume.as_deref(),
                workers,
                &rc,
            )?;
            if let Some(last) = r.outcome.log.last() {
                println!("epoch {} train_loss {:.4} val_pla {:?}", last.epoch, last.train_loss, last.val_pla);
            }
        }
        Command::Eval(a) => {
            let manifest = PatchManifest::read(&a.manifest)?;
            let model = SpairSwin::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
            let split = match a.split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let level = match a.f1_level {
                LevelArg::Patch => Level::Patch,
                LevelArg::Image => Level::Image,
            };
            let mut rc = RunConfig::new("eval");
            rc.model = Some(model.config.clone());
            rc.extra = Some(serde_json::json!({"split": format!("{:?}", a.split).to_lowercase()}));
            let (report, _) = pipeline::cmd_eval(
                &model,
                &manifest,
                &patch_dir_for(&a.manifest),
                split,
                &manifest.header.class_names,
                level,
                &a.out,
                a.dump_records,
                workers,
                &rc,
            )?;
            println!(
                "PLA {:.4}  ILA {:.4}  macro F1 ({:?}) {:.4}  vote ties {}",
                report.pla, report.ila, report.f1_level, report.macro_f1, report.vote_ties
            );
        }
        Command::Gradcheck(a) => {
            let module = match a.module {
                ModuleArg::Spair => GradModule::Spair,
                ModuleArg::Swin => GradModule::Swin,
                ModuleArg::All => GradModule::All,
            };
            let reports = pipeline::cmd_gradcheck(module, a.h, a.tolerance, a.seed)?;
            print!("{}", pipeline::gradcheck_table(&reports));
            if let Some(path) = &a.json {
                let text = serde_json::to_string_pretty(&reports)?;
                std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            }
            let worst = reports.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
            if reports.iter().any(|(_, r)| !r.passed()) {
                return Err(Error::GradCheckFailed {
                    max_error: worst,
                    tolerance: a.tolerance,
                });
            }
            println!("all gradients within {:e} (max {:.3e})", a.tolerance, worst);
        }
        Command::Sweep(a) => {
            let split = SplitManifest::read(&a.split)?;
            let patch_cfg = a.patch.config();
            let model_cfg = a.model.config(patch_cfg.k, split.header.class_names.len())?;
            let train_cfg = a.train.config();
            let mut rc = RunConfig::new("sweep");
            rc.dataset_root = Some(a.root.root.display().to_string());
            rc.patch = Some(patch_cfg.clone());
            rc.model = Some(model_cfg.clone());
            rc.train = Some(train_cfg.clone());
            rc.extra = Some(serde_json::json!({ "patch_counts": a.patch_counts }));
            let rows = pipeline::cmd_sweep(
                &a.root.root,
                &split,
                &patch_cfg,
                &a.patch_counts,
                &model_cfg,
                &train_cfg,
                &a.out,
                workers,
                &rc,
            )?;
            for r in rows {
                println!("P {:>3}  PLA {:.4}  ILA {:.4}  F1 {:.4}", r.patches, r.pla, r.ila, r.macro_f1);
            }
        }
        Command::Report(a) => {
            for p in pipeline::cmd_report(&a.reports, &a.out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
