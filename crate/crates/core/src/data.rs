//! In-memory patch datasets decoded from emitted tiles.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::model::pixels_to_chw;
use crate::patch::{PatchManifest, RgbImage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub size: usize,
    pub channels: usize,
    /// `[n, C, size, size]` values in `[0, 1]`, row-major.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub image_ids: Vec<String>,
    /// Position of the patch within its image, in manifest order.
    pub patch_index: Vec<usize>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// Stacks the given examples into `[b, C, size, size]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let e = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            data.extend_from_slice(&self.data[i * e..(i + 1) * e]);
        }
        Tensor::new([indices.len(), self.channels, self.size, self.size], data)
            .expect("batch shape matches")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn num_images(&self) -> usize {
        let mut ids: Vec<&String> = self.image_ids.iter().collect();
        ids.dedup();
        ids.len()
    }

    /// Builds a dataset from 8-bit interleaved RGB tiles.
    pub fn from_tiles(size: usize, tiles: &[(String, usize, Vec<u8>)]) -> Result<Self> {
        let mut ds = PatchDataset {
            size,
            channels: 3,
            data: Vec::with_capacity(tiles.len() * 3 * size * size),
            labels: Vec::with_capacity(tiles.len()),
            image_ids: Vec::with_capacity(tiles.len()),
            patch_index: Vec::with_capacity(tiles.len()),
        };
        let mut prev: Option<&str> = None;
        let mut j = 0;
        for (id, label, px) in tiles {
            if px.len() != 3 * size * size {
                return Err(Error::Dataset(format!(
                    "tile of `{id}` has {} bytes, expected {}",
                    px.len(),
                    3 * size * size
                )));
            }
            j = if prev == Some(id.as_str()) { j + 1 } else { 0 };
            prev = Some(id);
            ds.data.extend(pixels_to_chw(px, size, size, 3));
            ds.labels.push(*label);
            ds.image_ids.push(id.clone());
            ds.patch_index.push(j);
        }
        Ok(ds)
    }

    /// Loads every selected tile of `split` from `dir`. All files must exist
    /// and be `k×k`; missing files are listed in the error.
    pub fn load(manifest: &PatchManifest, dir: &Path, split: Option<Split>, workers: usize) -> Result<Self> {
        let k = manifest.header.config.k;
        let records = manifest.selected(split);
        if records.is_empty() {
            return Err(Error::Dataset(format!(
                "manifest has no selected patches for split {split:?}"
            )));
        }
        let paths: Vec<PathBuf> = records
            .iter()
            .map(|r| dir.join(r.file.clone().unwrap_or_else(|| r.file_name())))
            .collect();
        let missing: Vec<&PathBuf> = paths.iter().filter(|p| !p.is_file()).collect();
        if let Some(first) = missing.first() {
            return Err(Error::MissingPatches {
                count: missing.len(),
                first: (*first).clone(),
            });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        let decoded: Vec<Result<Vec<u8>>> = pool.install(|| {
            paths
                .par_iter()
                .map(|p| {
                    let img = RgbImage::open(p)?;
                    if img.width != k || img.height != k {
                        return Err(Error::Dataset(format!(
                            "{} is {}x{}, expected {k}x{k}",
                            p.display(),
                            img.width,
                            img.height
                        )));
                    }
                    Ok(img.pixels)
                })
                .collect()
        });
        let mut tiles = Vec::with_capacity(records.len());
        for (r, px) in records.iter().zip(decoded) {
            let label = r.label.ok_or_else(|| {
                Error::Dataset(format!("patch of `{}` has no label", r.image_id))
            })?;
            tiles.push((r.image_id.clone(), label, px?));
        }
        Self::from_tiles(k, &tiles)
    }
}
