//! Patch- and image-level accuracy, majority voting, macro F1 and confusion
//! matrices.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub patch_index: usize,
    pub label: usize,
    pub predicted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Patch,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub predicted: usize,
    /// More than one class shared the maximum vote count.
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub label: usize,
    pub predicted: usize,
    pub patches: usize,
    pub tied: bool,
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no evaluation records".into()));
    }
    Ok(())
}

/// Fraction of patches whose prediction equals the label.
pub fn pla(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let correct = records.iter().filter(|r| r.predicted == r.label).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Majority vote over one image's patches. Ties go to the class with the
/// larger probability mass summed over all patches (when every record has
/// probabilities), then to the smallest class index.
pub fn image_vote(records: &[EvalRecord]) -> Result<Vote> {
    nonempty(records)?;
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *votes.entry(r.predicted).or_default() += 1;
    }
    let best = *votes.values().max().unwrap();
    let tied: Vec<usize> = votes
        .iter()
        .filter(|(_, &v)| v == best)
        .map(|(&k, _)| k)
        .collect();
    if tied.len() == 1 {
        return Ok(Vote {
            predicted: tied[0],
            tied: false,
        });
    }
    let mass = |k: usize| -> Option<f64> {
        records
            .iter()
            .map(|r| r.probs.as_ref().and_then(|p| p.get(k).copied()))
            .sum()
    };
    let mut winner = tied[0];
    if let Some(mut best_mass) = mass(winner) {
        for &k in &tied[1..] {
            match mass(k) {
                Some(m) if m > best_mass => {
                    best_mass = m;
                    winner = k;
                }
                Some(_) => {}
                None => {
                    winner = tied[0];
                    break;
                }
            }
        }
    }
    Ok(Vote {
        predicted: winner,
        tied: true,
    })
}

/// Groups records by image (sorted by id) and votes each image.
pub fn image_results(records: &[EvalRecord]) -> Result<Vec<ImageResult>> {
    nonempty(records)?;
    let mut groups: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.image_id.as_str()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(id, mut rs)| {
            let label = rs[0].label;
            if let Some(bad) = rs.iter().find(|r| r.label != label) {
                return Err(Error::Dataset(format!(
                    "image `{id}` has patches labelled {label} and {}",
                    bad.label
                )));
            }
            rs.sort_by_key(|r| r.patch_index);
            let vote = image_vote(&rs)?;
            Ok(ImageResult {
                image_id: id.to_string(),
                label,
                predicted: vote.predicted,
                patches: rs.len(),
                tied: vote.tied,
            })
        })
        .collect()
}

/// Fraction of images whose vote equals the label.
pub fn ila(records: &[EvalRecord]) -> Result<f64> {
    let images = image_results(records)?;
    let correct = images.iter().filter(|i| i.predicted == i.label).count();
    Ok(correct as f64 / images.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion(pairs: impl IntoIterator<Item = (usize, usize)>, num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (t, p) in pairs {
        if t >= num_classes || p >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: num_classes,
            });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Absent from both truth and predictions; scored as 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub level: Level,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// One-vs-rest precision/recall/F1 per class from a confusion matrix,
/// averaged without weights. Undefined ratios count as 0.
pub fn f1_from_confusion(m: &[Vec<usize>], level: Level) -> F1Report {
    let k = m.len();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = m[c][c];
        let support: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        // 2PR/(P+R) with a single rounding
        let f1 = ratio(2 * tp, support + predicted);
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
            degenerate: support == 0 && predicted == 0,
        });
    }
    let macro_f1 = if k == 0 {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64
    };
    F1Report {
        level,
        macro_f1,
        per_class,
    }
}

pub fn macro_f1(records: &[EvalRecord], level: Level, num_classes: usize) -> Result<F1Report> {
    let m = match level {
        Level::Patch => {
            nonempty(records)?;
            confusion(records.iter().map(|r| (r.label, r.predicted)), num_classes)?
        }
        Level::Image => confusion(
            image_results(records)?.iter().map(|i| (i.label, i.predicted)),
            num_classes,
        )?,
    };
    Ok(f1_from_confusion(&m, level))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub patches: usize,
    pub images: usize,
    pub pla: f64,
    pub ila: f64,
    /// Macro F1 at `f1_level`; both levels are in `f1_patch` / `f1_image`.
    pub macro_f1: f64,
    pub f1_level: Level,
    pub f1_patch: F1Report,
    pub f1_image: F1Report,
    pub confusion_patch: Vec<Vec<usize>>,
    pub confusion_image: Vec<Vec<usize>>,
    pub vote_ties: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl EvalReport {
    pub fn from_records(records: &[EvalRecord], class_names: &[String], f1_level: Level) -> Result<Self> {
        let k = class_names.len();
        let images = image_results(records)?;
        let confusion_patch = confusion(records.iter().map(|r| (r.label, r.predicted)), k)?;
        let confusion_image = confusion(images.iter().map(|i| (i.label, i.predicted)), k)?;
        let f1_patch = f1_from_confusion(&confusion_patch, Level::Patch);
        let f1_image = f1_from_confusion(&confusion_image, Level::Image);
        let correct_images = images.iter().filter(|i| i.label == i.predicted).count();
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: crate::VERSION.into(),
            num_classes: k,
            class_names: class_names.to_vec(),
            patches: records.len(),
            images: images.len(),
            pla: pla(records)?,
            ila: correct_images as f64 / images.len() as f64,
            macro_f1: match f1_level {
                Level::Patch => f1_patch.macro_f1,
                Level::Image => f1_image.macro_f1,
            },
            f1_level,
            f1_patch,
            f1_image,
            confusion_patch,
            confusion_image,
            vote_ties: images.iter().filter(|i| i.tied).count(),
            meta: serde_json::Value::Null,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Report {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Report {
                path: path.to_path_buf(),
                detail: format!(
                    "schema version {} (expected {REPORT_SCHEMA_VERSION})",
                    report.schema_version
                ),
            });
        }
        Ok(report)
    }
}

/// Confusion matrix as CSV: a header of predicted class names, then one row
/// per true class.
pub fn confusion_csv(m: &[Vec<usize>], class_names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in class_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (row, name) in m.iter().zip(class_names) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
