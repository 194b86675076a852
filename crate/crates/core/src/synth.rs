//! Synthetic camera-model datasets.
//!
//! Every image is a random multi-scale texture shared by all classes plus a
//! faint class-specific periodic trace (a zero-mean 4×4 pattern per channel,
//! like a demosaicing residue) and Gaussian sensor noise, quantized to 8 bits.
//! The trace is far below the texture contrast, so single pixels carry no
//! usable class information; it is recoverable only from local
//! high-frequency structure. The trace gain can differ between textured and
//! flat regions, which makes tile selection matter.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassSpec, LabelMap};
use crate::error::{Error, Result};
use crate::patch::write_png;

pub const PERIOD: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Texture everywhere.
    #[default]
    Textured,
    /// Textured blobs on a flat background; roughly `flat_fraction` of the
    /// area is flat.
    Mixed { flat_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// RMS of the class trace in gray levels at unit gain.
    pub trace_amplitude: f64,
    /// Trace gain inside textured regions.
    pub textured_gain: f64,
    /// Trace gain inside flat regions.
    pub flat_gain: f64,
    /// Peak-to-peak texture contrast in gray levels.
    pub texture_contrast: f64,
    pub noise_sigma: f64,
    pub layout: Layout,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            images_per_class: 200,
            width: 64,
            height: 64,
            seed: 0,
            trace_amplitude: 4.0,
            textured_gain: 1.0,
            flat_gain: 1.0,
            texture_contrast: 120.0,
            noise_sigma: 2.0,
            layout: Layout::Textured,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.images_per_class == 0 {
            return Err(Error::Config("synth: classes and images per class must be ≥ 1".into()));
        }
        if self.width < PERIOD || self.height < PERIOD {
            return Err(Error::Config(format!("synth: images must be at least {PERIOD}x{PERIOD}")));
        }
        if self.classes > 3 * PERIOD * PERIOD - 3 {
            return Err(Error::Config(format!(
                "synth: at most {} orthogonal traces exist",
                3 * PERIOD * PERIOD - 3
            )));
        }
        if let Layout::Mixed { flat_fraction } = self.layout {
            if !(0.0..=1.0).contains(&flat_fraction) {
                return Err(Error::Config(format!("synth: flat fraction {flat_fraction} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("synth: noise sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn class_name(&self, c: usize) -> String {
        format!("camera_{c:02}")
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap {
            classes: (0..self.classes)
                .map(|c| ClassSpec {
                    name: self.class_name(c),
                    folders: vec![self.class_name(c)],
                })
                .collect(),
        }
    }
}

/// Orthonormal-then-scaled traces `[class][channel·16 + row·4 + col]`, each
/// channel zero-mean (no DC component), unit RMS over all 48 entries.
pub fn class_traces(classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = 3 * PERIOD * PERIOD;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for ch in v.chunks_mut(PERIOD * PERIOD) {
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            ch.iter_mut().for_each(|x| *x -= mean);
        }
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let scale = (n as f64).sqrt();
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Bilinearly upsampled random lattice with spacing `cell`, values in [-1, 1].
fn value_noise(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ox, oy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64 + ox;
            let fy = y as f64 / cell as f64 + oy;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Multi-octave texture normalized to [-1, 1].
fn texture(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = vec![0.0; w * h];
    let mut cell = (w.max(h) / 4).max(2);
    let mut amp = 1.0;
    while cell >= 2 {
        let layer = value_noise(w, h, cell, rng);
        t.iter_mut().zip(&layer).for_each(|(a, b)| *a += amp * b);
        cell /= 2;
        amp *= 0.7;
    }
    // random oriented stripes for edge-like structure
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(0.05..0.2);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            t[y * w + x] += 0.5 * (u * freq * std::f64::consts::TAU + phase).sin();
        }
    }
    let max = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    t.iter_mut().for_each(|v| *v /= max);
    t
}

/// Pixels (interleaved RGB) of image `index` of class `class`.
pub fn generate_image(cfg: &SynthConfig, traces: &[Vec<f64>], class: usize, index: usize) -> Vec<u8> {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((class as u64) << 32) | (index as u64 + 2));
    let tex = texture(w, h, &mut rng);
    let mask: Vec<f64> = match cfg.layout {
        Layout::Textured => vec![1.0; w * h],
        Layout::Mixed { flat_fraction } => {
            let field = value_noise(w, h, (w.max(h) / 3).max(2), &mut rng);
            let mut sorted = field.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = ((flat_fraction * (w * h) as f64) as usize).min(w * h - 1);
            let threshold = sorted[cut];
            field.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect()
        }
    };
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).unwrap();
    let trace = &traces[class];
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mask[i];
            let gain = cfg.flat_gain + (cfg.textured_gain - cfg.flat_gain) * m;
            for c in 0..3 {
                let t = trace[c * PERIOD * PERIOD + (y % PERIOD) * PERIOD + x % PERIOD];
                let v = base[c]
                    + 0.5 * cfg.texture_contrast * tint[c] * m * tex[i]
                    + gain * cfg.trace_amplitude * t
                    + noise.sample(&mut rng);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Writes `<root>/<class name>/img_<index>.png` for every image and a
/// `labels.json` label map. Returns the label map.
pub fn generate(cfg: &SynthConfig, root: &Path) -> Result<LabelMap> {
    cfg.validate()?;
    let traces = class_traces(cfg.classes, cfg.seed);
    for c in 0..cfg.classes {
        let dir = root.join(cfg.class_name(c));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.classes)
        .flat_map(|c| (0..cfg.images_per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter().try_for_each(|&(c, i)| {
        let px = generate_image(cfg, &traces, c, i);
        let path = root.join(cfg.class_name(c)).join(format!("img_{i:04}.png"));
        write_png(&path, &px, cfg.width, cfg.height)
    })?;
    let map = cfg.label_map();
    map.save(&root.join("labels.json"))?;
    Ok(map)
}
