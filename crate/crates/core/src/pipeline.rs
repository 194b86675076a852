//! Stage-level entry points shared by the command line and the tests. Each
//! stage reads and writes files so its outputs can be inspected or reused.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::PatchDataset;
use crate::dataset::{self, LabelMap, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{confusion_csv, EvalRecord, EvalReport, Level};
use crate::model::{ModelConfig, SpairSwin};
use crate::nn::{Forward, Mode, ParamStore};
use crate::patch::{self, ImageJob, PatchConfig, PatchManifest};
use crate::report;
use crate::spair::{Spair, SpairConfig};
use crate::swin::{Swin, SwinConfig};
use crate::synth::{self, SynthConfig};
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::train::{self, TrainConfig, TrainOutput, TrainState};

pub const SPLIT_FILE: &str = "split.jsonl";
pub const PATCH_MANIFEST: &str = "patches.jsonl";
pub const PATCH_DIR: &str = "patches";
pub const REPORT_JSON: &str = "report.json";

/// Settings that determine a run's outputs. Worker count and the output
/// location are deliberately absent: neither changes any artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_root: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        RunConfig {
            command: command.into(),
            tool_version: crate::VERSION.into(),
            ..Default::default()
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scans `root` with the label map and writes a stratified split manifest.
pub fn cmd_split(
    root: &Path,
    labels: &LabelMap,
    seed: u64,
    ratio: f64,
    allow_unmapped: bool,
    out: &Path,
    run: &RunConfig,
) -> Result<SplitManifest> {
    let inventory = dataset::scan(root, labels, allow_unmapped)?;
    let mut manifest = dataset::split(&inventory, seed, ratio)?;
    manifest.header.warnings.splice(0..0, inventory.warnings.iter().cloned());
    manifest.header.run = run.to_value();
    for w in &manifest.header.warnings {
        log::warn!("{w}");
    }
    manifest.write(out)?;
    Ok(manifest)
}

/// Extracts patches for every image of the split manifest into
/// `out_dir/patches/` and writes `out_dir/patches.jsonl`. Fails when the
/// result would leak an image across splits.
pub fn cmd_extract(
    root: &Path,
    split: &SplitManifest,
    config: &PatchConfig,
    out_dir: &Path,
    workers: usize,
    run: &RunConfig,
) -> Result<PatchManifest> {
    config.validate()?;
    create_dir(out_dir)?;
    let jobs: Vec<ImageJob> = split
        .entries
        .iter()
        .map(|e| ImageJob {
            image_id: e.image_id.clone(),
            path: root.join(&e.path),
            label: Some(e.class),
            split: Some(e.split),
        })
        .collect();
    let output = patch::extract(&jobs, config, Some(&out_dir.join(PATCH_DIR)), workers)?;
    for s in &output.skipped {
        log::warn!("skipped {}: {}", s.image_id, s.reason);
    }
    let manifest = PatchManifest::from_output(&output, config, &split.header.class_names, run.to_value());
    let leakage = dataset::verify_leakage(split, &manifest.records);
    if !leakage.passed() {
        return Err(Error::Leakage(leakage.leaked));
    }
    manifest.write(&out_dir.join(PATCH_MANIFEST))?;
    Ok(manifest)
}

/// Checks a split manifest against a patch manifest.
pub fn cmd_verify(split: &SplitManifest, patches: &PatchManifest) -> Result<dataset::LeakageReport> {
    let report = dataset::verify_leakage(split, &patches.records);
    if !report.passed() {
        return Err(Error::Leakage(report.leaked));
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: SpairSwin,
    pub outcome: train::TrainOutcome,
}

/// Trains on the train split of a patch manifest, validating on the test
/// split each epoch. Artifacts go to `out_dir`. With `resume`, training
/// continues from that checkpoint's parameters and optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    manifest: &PatchManifest,
    patch_dir: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    workers: usize,
    run: &RunConfig,
) -> Result<TrainRun> {
    let train_set = PatchDataset::load(manifest, patch_dir, Some(Split::Train), workers)?;
    let val_set = if manifest.selected(Some(Split::Test)).is_empty() {
        None
    } else {
        Some(PatchDataset::load(manifest, patch_dir, Some(Split::Test), workers)?)
    };
    let (mut model, state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let model = SpairSwin::from_checkpoint(&ckpt)?;
            let state = TrainState::from_checkpoint(&ckpt, &model)?;
            (model, Some(state))
        }
        None => (SpairSwin::new(model_cfg.clone())?, None),
    };
    let output = TrainOutput {
        dir: out_dir.to_path_buf(),
        run: run.to_value(),
    };
    let outcome = train::train(
        &mut model,
        &train_set,
        val_set.as_ref(),
        train_cfg,
        state,
        Some(&output),
        workers,
    )?;
    Ok(TrainRun { model, outcome })
}

/// Evaluates `model` on the selected patches of `split` and writes
/// `report.json`, `confusion_patch.csv`, `confusion_image.csv` and, when
/// `dump_records`, `records.jsonl` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    model: &SpairSwin,
    manifest: &PatchManifest,
    patch_dir: &Path,
    split: Option<Split>,
    class_names: &[String],
    f1_level: Level,
    out_dir: &Path,
    dump_records: bool,
    workers: usize,
    run: &RunConfig,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    if class_names.len() != model.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes but the dataset has {}",
            model.num_classes(),
            class_names.len()
        )));
    }
    let data = PatchDataset::load(manifest, patch_dir, split, workers)?;
    let records = train::eval_records(model, &data, 64, workers)?;
    let mut report = EvalReport::from_records(&records, class_names, f1_level)?;
    report.meta = run.to_value();
    create_dir(out_dir)?;
    report.write_json(&out_dir.join(REPORT_JSON))?;
    write_text(
        &out_dir.join("confusion_patch.csv"),
        &confusion_csv(&report.confusion_patch, class_names),
    )?;
    write_text(
        &out_dir.join("confusion_image.csv"),
        &confusion_csv(&report.confusion_image, class_names),
    )?;
    if dump_records {
        dataset::write_jsonl(
            &out_dir.join("records.jsonl"),
            &serde_json::json!({"kind": "eval_records", "format_version": 1}),
            &records,
        )?;
    }
    Ok((report, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradModule {
    Spair,
    Swin,
    All,
}

/// Scalar probe `Σ output ⊙ R` with fixed random `R`, so every output
/// element contributes a distinct weight.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng);
    let r = g.leaf(r)?;
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn check_store<F>(store: &ParamStore, input: &Tensor, forward: F, h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward<'_>, Var) -> Result<Var>,
{
    let ids = store.trainable_ids();
    let mut params: Vec<(String, Tensor)> = ids
        .iter()
        .map(|&id| (store.param(id).name.clone(), store.get(id).clone()))
        .collect();
    params.push(("input".into(), input.clone()));
    grad_check(
        |g, vars| {
            let mut cx = Forward::new(g, store, Mode::Train);
            for (&id, &v) in ids.iter().zip(vars) {
                cx.bind(id, v);
            }
            let out = forward(&mut cx, vars[vars.len() - 1])?;
            probe(cx.graph, out, seed ^ 0xabcd)
        },
        &params,
        h,
        tolerance,
    )
}

/// Finite-difference check of every SPAIR parameter (train-mode batch
/// statistics) on a random `[2, 3, 6, 6]` input.
pub fn gradcheck_spair(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let spair = Spair::new(&mut store, "spair", SpairConfig::default(), &mut rng)?;
    // move BN affine terms and the attention bias off their trivial init
    for id in store.trainable_ids() {
        let t = store.get(id).clone();
        let jitter = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng);
        store.set(id, t.zip_map(&jitter, |a, b| a + b)?)?;
    }
    let input = Tensor::randn([2, 3, 6, 6], 1.0, &mut rng);
    check_store(&store, &input, |cx, x| spair.forward(cx, x), h, tolerance, seed)
}

/// The small transformer used by the gradient suite: 16×16 input, one stage
/// of two blocks (regular and shifted windows).
pub fn gradcheck_swin_config() -> SwinConfig {
    SwinConfig {
        input_size: 16,
        patch_size: 4,
        embed_dim: 8,
        depths: vec![2],
        heads: vec![2],
        window: 2,
        mlp_ratio: 2,
        num_classes: 3,
        ..SwinConfig::default()
    }
}

/// Finite-difference check of every transformer parameter on a random
/// `[2, 3, 16, 16]` input.
pub fn gradcheck_swin(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let swin = Swin::new(&mut store, "swin", gradcheck_swin_config(), &mut rng)?;
    for id in store.trainable_ids() {
        let t = store.get(id).clone();
        let jitter = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng);
        store.set(id, t.zip_map(&jitter, |a, b| a + b)?)?;
    }
    let input = Tensor::randn([2, 3, 16, 16], 1.0, &mut rng);
    check_store(&store, &input, |cx, x| swin.forward(cx, x), h, tolerance, seed)
}

/// Runs the selected checks. Returns the reports; the caller decides how to
/// treat failures.
pub fn cmd_gradcheck(module: GradModule, h: f64, tolerance: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    if matches!(module, GradModule::Spair | GradModule::All) {
        out.push(("spair".to_string(), gradcheck_spair(h, tolerance, seed)?));
    }
    if matches!(module, GradModule::Swin | GradModule::All) {
        out.push(("swin".to_string(), gradcheck_swin(h, tolerance, seed)?));
    }
    Ok(out)
}

/// Plain-text pass/fail table of gradient-check reports.
pub fn gradcheck_table(reports: &[(String, GradCheckReport)]) -> String {
    let mut s = format!("{:<8} {:<44} {:>6} {:>12} {:>6}\n", "module", "parameter", "numel", "max_rel_err", "ok");
    for (module, r) in reports {
        for e in &r.entries {
            s.push_str(&format!(
                "{:<8} {:<44} {:>6} {:>12.3e} {:>6}\n",
                module,
                e.name,
                e.numel,
                e.max_rel_error,
                if e.passed { "pass" } else { "FAIL" }
            ));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub patches: usize,
    pub pla: f64,
    pub ila: f64,
    pub macro_f1: f64,
}

/// For each patch count: extract, train from the same initialization, and
/// evaluate on the test split. Writes `sweep.csv` and per-P subdirectories.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    root: &Path,
    split: &SplitManifest,
    patch_cfg: &PatchConfig,
    patch_counts: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    workers: usize,
    run: &RunConfig,
) -> Result<Vec<SweepRow>> {
    if patch_counts.is_empty() || patch_counts.contains(&0) {
        return Err(Error::InvalidArgument("patch counts must be nonempty and ≥ 1".into()));
    }
    create_dir(out_dir)?;
    let class_names = split.header.class_names.clone();
    let mut rows = Vec::with_capacity(patch_counts.len());
    for &p in patch_counts {
        let dir = out_dir.join(format!("p{p}"));
        let cfg = PatchConfig {
            patches: p,
            ..patch_cfg.clone()
        };
        let manifest = cmd_extract(root, split, &cfg, &dir, workers, run)?;
        let trained = cmd_train(
            &manifest,
            &dir.join(PATCH_DIR),
            model_cfg,
            train_cfg,
            &dir.join("train"),
            None,
            workers,
            run,
        )?;
        let (report, _) = cmd_eval(
            &trained.model,
            &manifest,
            &dir.join(PATCH_DIR),
            Some(Split::Test),
            &class_names,
            Level::Patch,
            &dir.join("eval"),
            false,
            workers,
            run,
        )?;
        log::info!("P = {p}: PLA {:.4} ILA {:.4}", report.pla, report.ila);
        rows.push(SweepRow {
            patches: p,
            pla: report.pla,
            ila: report.ila,
            macro_f1: report.macro_f1,
        });
    }
    let mut csv = String::from("patches,pla,ila,macro_f1\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.patches, r.pla, r.ila, r.macro_f1));
    }
    write_text(&out_dir.join("sweep.csv"), &csv)?;
    Ok(rows)
}

/// Bar charts comparing the given reports. Returns the written SVG paths.
pub fn cmd_report(reports: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports given".into()));
    }
    let loaded: Vec<(String, EvalReport)> = reports
        .iter()
        .map(|p| {
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            EvalReport::read_json(p).map(|r| (name, r))
        })
        .collect::<Result<_>>()?;
    create_dir(out_dir)?;
    let summary = out_dir.join("metrics.svg");
    write_text(&summary, &report::metrics_chart(&loaded))?;
    let per_class = out_dir.join("f1_per_class.svg");
    write_text(&per_class, &report::per_class_f1_chart(&loaded))?;
    Ok(vec![summary, per_class])
}

/// Generates a synthetic dataset under `root`.
pub fn cmd_synth(cfg: &SynthConfig, root: &Path) -> Result<LabelMap> {
    create_dir(root)?;
    synth::generate(cfg, root)
}
