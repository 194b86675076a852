//! Center crop, non-overlapping tiling, per-tile scoring and top-P selection.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    EntropyDesc,
    Homogeneity,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grayscale {
    /// `round(0.299 R + 0.587 G + 0.114 B)`, halves rounded up.
    #[default]
    Luma601,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub k: usize,
    pub patches: usize,
    pub selector: Selector,
    pub grayscale: Grayscale,
    /// Only used by the random selector.
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            k: 256,
            patches: 20,
            selector: Selector::EntropyDesc,
            grayscale: Grayscale::Luma601,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("patch size k must be ≥ 2, got {}", self.k)));
        }
        if self.patches == 0 {
            return Err(Error::InvalidArgument("patch count P must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Largest centered region whose sides are multiples of `k`; odd margins put
/// the extra pixel on the bottom/right.
pub fn center_crop(image_id: &str, width: usize, height: usize, k: usize) -> Result<CropRect> {
    if k == 0 || width < k || height < k {
        return Err(Error::ImageTooSmall {
            image_id: image_id.to_string(),
            width,
            height,
            k,
        });
    }
    let cw = width / k * k;
    let ch = height / k * k;
    Ok(CropRect {
        x0: (width - cw) / 2,
        y0: (height - ch) / 2,
        width: cw,
        height: ch,
    })
}

pub fn luma601(r: u8, g: u8, b: u8) -> u8 {
    // weights in thousandths sum to 1000, so the result never exceeds 255
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Interleaved RGB bytes to one luma byte per pixel.
pub fn to_grayscale(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3).map(|p| luma601(p[0], p[1], p[2])).collect()
}

pub fn histogram(gray: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in gray {
        h[v as usize] += 1;
    }
    h
}

/// Shannon entropy of the intensity histogram, in nats.
pub fn patch_entropy(gray: &[u8]) -> f64 {
    if gray.is_empty() {
        return 0.0;
    }
    let n = gray.len() as f64;
    let mut h = 0.0;
    for &c in histogram(gray).iter().filter(|&&c| c > 0) {
        let p = c as f64 / n;
        h -= p * p.ln();
    }
    h.clamp(0.0, 256f64.ln())
}

/// Mean over channels of the per-channel population standard deviation.
pub fn homogeneity_score(rgb: &[u8]) -> f64 {
    let n = rgb.len() / 3;
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..3 {
        let mean = rgb.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = rgb
            .iter()
            .skip(c)
            .step_by(3)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        total += var.sqrt();
    }
    total / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub image_id: String,
    pub tile_row: usize,
    pub tile_col: usize,
    pub x0: usize,
    pub y0: usize,
    pub entropy: f64,
    pub homogeneity_score: f64,
    pub rank: usize,
    pub selected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Tile file name relative to the patch directory, for selected tiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl PatchRecord {
    pub fn file_name(&self) -> String {
        tile_file_name(&self.image_id, self.tile_row, self.tile_col)
    }
}

pub fn tile_file_name(image_id: &str, row: usize, col: usize) -> String {
    format!("{image_id}_r{row}_c{col}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_id: String,
    pub crop: CropRect,
    pub rows: usize,
    pub cols: usize,
    pub records: Vec<PatchRecord>,
    pub warnings: Vec<String>,
}

impl PatchGrid {
    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn selected(&self) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(|r| r.selected)
    }
}

/// FNV-1a of the image id mixed with the seed, stable across platforms.
fn seed_for(image_id: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed
}

/// Ranks tiles by the configured selector and marks the top `P` as selected.
/// Ties keep raster order (`tile_row`, then `tile_col`).
pub fn rank_and_select(grid: &mut PatchGrid, config: &PatchConfig) {
    let n = grid.records.len();
    if n == 0 {
        return;
    }
    grid.records.sort_by_key(|r| (r.tile_row, r.tile_col));
    let mut order: Vec<usize> = (0..n).collect();
    match config.selector {
        Selector::EntropyDesc => {
            order.sort_by(|&a, &b| grid.records[b].entropy.total_cmp(&grid.records[a].entropy));
        }
        Selector::Homogeneity => {
            order.sort_by(|&a, &b| {
                grid.records[a]
                    .homogeneity_score
                    .total_cmp(&grid.records[b].homogeneity_score)
            });
        }
        Selector::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(&grid.image_id, config.seed));
            let keys: Vec<u64> = (0..n).map(|_| rng.random()).collect();
            order.sort_by_key(|&i| keys[i]);
        }
    }
    for (rank, &i) in order.iter().enumerate() {
        let r = &mut grid.records[i];
        r.rank = rank + 1;
        r.selected = rank < config.patches;
    }
    if n < config.patches {
        grid.warnings.push(format!(
            "{}: only {n} tiles available for P = {}; all selected",
            grid.image_id, config.patches
        ));
    }
}

/// A decoded 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        })
    }

    /// Interleaved RGB bytes of the `k×k` tile with top-left `(x0, y0)`.
    pub fn tile(&self, x0: usize, y0: usize, k: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(k * k * 3);
        for y in y0..y0 + k {
            let start = (y * self.width + x0) * 3;
            out.extend_from_slice(&self.pixels[start..start + k * 3]);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, &self.pixels, self.width, self.height)
    }
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    image::save_buffer_with_format(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

/// Tiles and scores one decoded image. Records come back ranked, in raster order.
pub fn score_image(image_id: &str, img: &RgbImage, config: &PatchConfig) -> Result<PatchGrid> {
    config.validate()?;
    let crop = center_crop(image_id, img.width, img.height, config.k)?;
    let k = config.k;
    let (rows, cols) = (crop.height / k, crop.width / k);
    let mut records = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = (c * k, r * k);
            let tile = img.tile(crop.x0 + x0, crop.y0 + y0, k);
            records.push(PatchRecord {
                image_id: image_id.to_string(),
                tile_row: r,
                tile_col: c,
                x0,
                y0,
                entropy: patch_entropy(&to_grayscale(&tile)),
                homogeneity_score: homogeneity_score(&tile),
                rank: 0,
                selected: false,
                label: None,
                split: None,
                file: None,
            });
        }
    }
    let mut grid = PatchGrid {
        image_id: image_id.to_string(),
        crop,
        rows,
        cols,
        records,
        warnings: Vec::new(),
    };
    rank_and_select(&mut grid, config);
    Ok(grid)
}

/// One image to process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageJob {
    pub image_id: String,
    pub path: PathBuf,
    pub label: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub image_id: String,
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractOutput {
    pub grids: Vec<PatchGrid>,
    pub skipped: Vec<SkipEntry>,
}

impl ExtractOutput {
    pub fn records(&self) -> impl Iterator<Item = &PatchRecord> {
        self.grids.iter().flat_map(|g| g.records.iter())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &String> {
        self.grids.iter().flat_map(|g| g.warnings.iter())
    }
}

enum Outcome {
    Done(PatchGrid),
    Skipped(SkipEntry),
}

fn process(job: &ImageJob, config: &PatchConfig, out_dir: Option<&Path>) -> Result<Outcome> {
    let skip = |reason: String| {
        Ok(Outcome::Skipped(SkipEntry {
            image_id: job.image_id.clone(),
            path: job.path.display().to_string(),
            reason,
        }))
    };
    let img = match RgbImage::open(&job.path) {
        Ok(img) => img,
        Err(e) => return skip(format!("decode failed: {e}")),
    };
    let mut grid = match score_image(&job.image_id, &img, config) {
        Ok(g) => g,
        Err(e @ Error::ImageTooSmall { .. }) => return skip(e.to_string()),
        Err(e) => return Err(e),
    };
    for r in &mut grid.records {
        r.label = job.label;
        r.split = job.split;
        if r.selected {
            let name = r.file_name();
            if let Some(dir) = out_dir {
                let tile = img.tile(grid.crop.x0 + r.x0, grid.crop.y0 + r.y0, config.k);
                write_png(&dir.join(&name), &tile, config.k, config.k)?;
            }
            r.file = Some(name);
        }
    }
    Ok(Outcome::Done(grid))
}

/// Runs the full pipeline on every job with `workers` threads. Selected tiles
/// are written to `out_dir` when given. Output is sorted by image id, so it
/// does not depend on scheduling or worker count.
pub fn extract(jobs: &[ImageJob], config: &PatchConfig, out_dir: Option<&Path>, workers: usize) -> Result<ExtractOutput> {
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<Outcome>> =
        pool.install(|| jobs.par_iter().map(|j| process(j, config, out_dir)).collect());
    let mut out = ExtractOutput::default();
    for o in outcomes {
        match o? {
            Outcome::Done(g) => out.grids.push(g),
            Outcome::Skipped(s) => out.skipped.push(s),
        }
    }
    out.grids.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    out.skipped.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchHeader {
    pub kind: String,
    pub format_version: u32,
    pub tool_version: String,
    pub config: PatchConfig,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Logarithm base of the stored entropies.
    pub log_base: String,
    pub images: usize,
    pub tiles: usize,
    pub selected: usize,
    pub skipped: Vec<SkipEntry>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub run: serde_json::Value,
}

/// Every scored tile of every image, one record per line after a header.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchManifest {
    pub header: PatchHeader,
    pub records: Vec<PatchRecord>,
}

impl PatchManifest {
    pub fn from_output(out: &ExtractOutput, config: &PatchConfig, class_names: &[String], run: serde_json::Value) -> Self {
        let records: Vec<PatchRecord> = out.records().cloned().collect();
        PatchManifest {
            header: PatchHeader {
                kind: "patch_manifest".into(),
                format_version: 1,
                tool_version: crate::VERSION.into(),
                config: config.clone(),
                class_names: class_names.to_vec(),
                log_base: "e".into(),
                images: out.grids.len(),
                tiles: records.len(),
                selected: records.iter().filter(|r| r.selected).count(),
                skipped: out.skipped.clone(),
                warnings: out.warnings().cloned().collect(),
                run,
            },
            records,
        }
    }

    pub fn selected(&self, split: Option<Split>) -> Vec<&PatchRecord> {
        self.records
            .iter()
            .filter(|r| r.selected && (split.is_none() || r.split == split))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::dataset::write_jsonl(path, &self.header, &self.records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, records): (PatchHeader, Vec<PatchRecord>) = crate::dataset::read_jsonl(path)?;
        if header.kind != "patch_manifest" {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: format!("expected a patch manifest, found `{}`", header.kind),
            });
        }
        Ok(PatchManifest { header, records })
    }
}
