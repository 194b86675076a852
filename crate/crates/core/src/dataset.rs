//! Label maps, directory scanning, stratified image-level splits and leakage
//! checks.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::PatchRecord;

/// File extensions treated as images during scanning (case-insensitive).
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Directory nesting below a class folder beyond which scanning gives up.
pub const MAX_SCAN_DEPTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Top-level dataset folders whose images belong to this class. More
    /// than one folder merges several devices into one camera model.
    pub folders: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub classes: Vec<ClassSpec>,
}

impl LabelMap {
    /// One class per folder, in the given order.
    pub fn from_folders<S: AsRef<str>>(folders: &[S]) -> Self {
        LabelMap {
            classes: folders
                .iter()
                .map(|f| ClassSpec {
                    name: f.as_ref().to_string(),
                    folders: vec![f.as_ref().to_string()],
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("label map has no classes".into()));
        }
        let mut names = HashSet::new();
        let mut folders = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{}`", c.name)));
            }
            if c.folders.is_empty() {
                return Err(Error::Config(format!("class `{}` has no folders", c.name)));
            }
            for f in &c.folders {
                if !folders.insert(f.as_str()) {
                    return Err(Error::Config(format!(
                        "folder `{f}` appears in more than one merge group"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: LabelMap = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn class_of(&self, folder: &str) -> Option<usize> {
        self.classes
            .iter()
            .position(|c| c.folders.iter().any(|f| f == folder))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inventory {
    pub images: Vec<ImageEntry>,
    pub class_names: Vec<String>,
    /// Top-level folders with no class in the label map.
    pub unmapped: Vec<String>,
    pub warnings: Vec<String>,
}

/// Stable identifier derived from the relative path: extension dropped,
/// separators replaced by `__`.
pub fn image_id_for(rel_path: &str) -> String {
    let stem = match rel_path.rfind('.') {
        Some(i) if !rel_path[i..].contains('/') => &rel_path[..i],
        _ => rel_path,
    };
    stem.replace('/', "__")
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn walk(dir: &Path, root: &Path, depth: usize, visited: &mut HashSet<PathBuf>, out: &mut Vec<String>) -> Result<()> {
    let canonical = fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
    if !visited.insert(canonical) {
        return Err(Error::Dataset(format!(
            "directory cycle detected at {}",
            dir.display()
        )));
    }
    if depth > MAX_SCAN_DEPTH {
        return Err(Error::Dataset(format!(
            "directory nesting deeper than {MAX_SCAN_DEPTH} at {}",
            dir.display()
        )));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk(&path, root, depth + 1, visited, out)?;
        } else if path.is_file() && is_image(&path) {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// Lists images under each top-level folder of `root`, labelled through the
/// map. Folders missing from the map are an error unless `allow_unmapped`.
pub fn scan(root: &Path, map: &LabelMap, allow_unmapped: bool) -> Result<Inventory> {
    map.validate()?;
    let mut folders: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    folders.sort();

    let mut unmapped = Vec::new();
    let mut mapped = Vec::new();
    for f in folders {
        match map.class_of(&f) {
            Some(c) => mapped.push((f, c)),
            None => unmapped.push(f),
        }
    }
    if !unmapped.is_empty() && !allow_unmapped {
        return Err(Error::Dataset(format!(
            "folders not in label map: {}",
            unmapped.join(", ")
        )));
    }

    let listed: Vec<Result<Vec<ImageEntry>>> = mapped
        .par_iter()
        .map(|(folder, class)| {
            let mut paths = Vec::new();
            walk(&root.join(folder), root, 0, &mut HashSet::new(), &mut paths)?;
            Ok(paths
                .into_iter()
                .map(|p| ImageEntry {
                    image_id: image_id_for(&p),
                    path: p,
                    class: *class,
                })
                .collect())
        })
        .collect();
    let mut images = Vec::new();
    for l in listed {
        images.extend(l?);
    }
    images.sort_by(|a, b| a.path.cmp(&b.path));
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }

    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for img in &images {
        if !seen.insert(img.image_id.as_str()) {
            return Err(Error::Dataset(format!("duplicate image id `{}`", img.image_id)));
        }
    }
    for (c, spec) in map.classes.iter().enumerate() {
        if !images.iter().any(|i| i.class == c) {
            warnings.push(format!("class `{}` has no images", spec.name));
        }
    }
    for f in &unmapped {
        warnings.push(format!("unmapped folder `{f}` ignored"));
    }
    Ok(Inventory {
        images,
        class_names: map.class_names(),
        unmapped,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub image_id: String,
    pub path: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: usize,
    pub name: String,
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub kind: String,
    pub format_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub ratio: f64,
    pub stratified: bool,
    pub rounding: String,
    pub class_names: Vec<String>,
    pub class_counts: Vec<ClassCount>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub header: SplitHeader,
    pub entries: Vec<SplitEntry>,
}

/// Number of training images for a class of `n` at `ratio`: `⌈ratio·n⌉`,
/// with a small slack so that e.g. `0.7·10` is not rounded up to 8.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Per-class seeded shuffle (ChaCha8, stream = class id) followed by
/// `⌈ratio·n_c⌉` images to train, the rest to test.
pub fn split(inventory: &Inventory, seed: u64, ratio: f64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be in (0, 1], got {ratio}")));
    }
    let mut by_class: BTreeMap<usize, Vec<&ImageEntry>> = BTreeMap::new();
    for img in &inventory.images {
        by_class.entry(img.class).or_default().push(img);
    }
    let mut entries = Vec::with_capacity(inventory.images.len());
    let mut counts = Vec::new();
    let mut warnings = Vec::new();
    for (c, name) in inventory.class_names.iter().enumerate() {
        let mut imgs = by_class.remove(&c).unwrap_or_default();
        imgs.sort_by(|a, b| a.path.cmp(&b.path));
        let n = imgs.len();
        if n < 2 {
            warnings.push(format!("class `{name}` has {n} image(s); nothing held out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        imgs.shuffle(&mut rng);
        let n_train = if n < 2 { n } else { train_count(n, ratio) };
        for (i, img) in imgs.iter().enumerate() {
            entries.push(SplitEntry {
                image_id: img.image_id.clone(),
                path: img.path.clone(),
                class: c,
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
        counts.push(ClassCount {
            class: c,
            name: name.clone(),
            total: n,
            train: n_train,
            test: n - n_train,
        });
    }
    if let Some((&c, _)) = by_class.iter().next() {
        return Err(Error::Dataset(format!("image with class {c} outside the label map")));
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(SplitManifest {
        header: SplitHeader {
            kind: "split_manifest".into(),
            format_version: 1,
            tool_version: crate::VERSION.into(),
            seed,
            ratio,
            stratified: true,
            rounding: "ceil_to_train".into(),
            class_names: inventory.class_names.clone(),
            class_counts: counts,
            warnings,
            run: serde_json::Value::Null,
        },
        entries,
    })
}

impl SplitManifest {
    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.entries.iter().find(|e| e.image_id == image_id).map(|e| e.split)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.header, &self.entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, entries): (SplitHeader, Vec<SplitEntry>) = read_jsonl(path)?;
        if header.kind != "split_manifest" {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                detail: format!("expected a split manifest, found `{}`", header.kind),
            });
        }
        Ok(SplitManifest { header, entries })
    }
}

/// Writes a header line followed by one JSON object per line.
pub fn write_jsonl<H: Serialize, T: Serialize>(path: &Path, header: &H, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(header)?).map_err(io)?;
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a header line and the remaining lines of a JSONL file.
pub fn read_jsonl<H: for<'de> Deserialize<'de>, T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(H, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, e: serde_json::Error| Error::Manifest {
        path: path.to_path_buf(),
        detail: format!("line {line}: {e}"),
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            detail: "empty file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_str(&first).map_err(|e| bad(1, e))?;
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&l).map_err(|e| bad(i + 2, e))?);
    }
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub train_images: usize,
    pub test_images: usize,
    /// Image ids attributed to both splits, sorted.
    pub leaked: Vec<String>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.leaked.is_empty()
    }
}

/// Collects, per split, every image id named by the split manifest or by a
/// patch record carrying that split, and reports ids present in both.
pub fn verify_leakage(split: &SplitManifest, patches: &[PatchRecord]) -> LeakageReport {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    let mut add = |id: &str, s: Split| {
        match s {
            Split::Train => train.insert(id.to_string()),
            Split::Test => test.insert(id.to_string()),
        };
    };
    for e in &split.entries {
        add(&e.image_id, e.split);
    }
    for p in patches {
        if let Some(s) = p.split {
            add(&p.image_id, s);
        }
    }
    LeakageReport {
        train_images: train.len(),
        test_images: test.len(),
        leaked: train.intersection(&test).cloned().collect(),
    }
}
