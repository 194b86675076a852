//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use spairswin::metrics::EvalRecord;
use spairswin::nn::ParamStore;
use spairswin::patch::{PatchGrid, PatchRecord, Selector};
use spairswin::swin::WindowAttention;
use spairswin::Tensor;

// ---------------------------------------------------------------------------
// double-double arithmetic

/// Unevaluated sum `hi + lo` with |lo| ≤ ulp(hi)/2, about 106 bits.
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        let q = quick_two_sum(q1, q2);
        q.add(Dd::from(q3))
    }

    /// Exact scaling by a power of two.
    fn ldexp(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    pub fn exp(self) -> Dd {
        let k = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.mul(Dd::from(k))).ldexp(-10);
        // Taylor series of exp(r) − 1 for |r| < 2^-10
        let mut term = r;
        let mut sum = r;
        for i in 2..=14 {
            term = term.mul(r).div(Dd::from(i as f64));
            sum = sum.add(term);
        }
        // (1 + s)² − 1 = s(2 + s), repeated keeps the small part accurate
        for _ in 0..10 {
            sum = sum.mul(sum.add(Dd::from(2.0)));
        }
        sum.add(Dd::from(1.0)).ldexp(k as i32)
    }

    /// Natural log of a positive value by Newton iteration on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..3 {
            y = y.add(self.mul(y.neg().exp())).sub(Dd::from(1.0));
        }
        y
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// `ln N − (1/N)·Σ c·ln c` over the nonzero bins of a 256-bin histogram of
/// `gray`, in double-double arithmetic.
pub fn entropy_oracle(gray: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &g in gray {
        counts[g as usize] += 1;
    }
    let n = gray.len() as f64;
    let mut acc = Dd::from(0.0);
    for &c in counts.iter().filter(|&&c| c > 0) {
        let cd = Dd::from(c as f64);
        acc = acc.add(cd.mul(cd.ln()));
    }
    Dd::from(n).ln().sub(acc.div(Dd::from(n))).to_f64()
}

// ---------------------------------------------------------------------------
// selection

/// Expected selected `(row, col)` set from a full sort with explicit keys.
pub fn selection_oracle(records: &[PatchRecord], selector: Selector, p: usize) -> Vec<(usize, usize)> {
    let mut keyed: Vec<(f64, usize, usize)> = records
        .iter()
        .map(|r| {
            let key = match selector {
                Selector::EntropyDesc => -r.entropy,
                Selector::Homogeneity => r.homogeneity_score,
                Selector::Random => unreachable!("random selection has no sort key"),
            };
            (key, r.tile_row, r.tile_col)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<(usize, usize)> = keyed.into_iter().take(p).map(|(_, r, c)| (r, c)).collect();
    out.sort();
    out
}

pub fn selected_set(grid: &PatchGrid) -> Vec<(usize, usize)> {
    let mut s: Vec<(usize, usize)> = grid.selected().map(|r| (r.tile_row, r.tile_col)).collect();
    s.sort();
    s
}

pub fn grid_from_scores(image_id: &str, rows: usize, cols: usize, entropy: &[f64], homog: &[f64]) -> PatchGrid {
    let mut records = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            records.push(PatchRecord {
                image_id: image_id.to_string(),
                tile_row: r,
                tile_col: c,
                x0: c * 16,
                y0: r * 16,
                entropy: entropy[i],
                homogeneity_score: homog[i],
                rank: 0,
                selected: false,
                label: None,
                split: None,
                file: None,
            });
        }
    }
    PatchGrid {
        image_id: image_id.to_string(),
        crop: spairswin::patch::CropRect {
            x0: 0,
            y0: 0,
            width: cols * 16,
            height: rows * 16,
        },
        rows,
        cols,
        records,
        warnings: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// attention

/// Dense (shifted-)window attention over a `[B, H, W, D]` grid computed
/// token pair by token pair. With `shift > 0` the grid is viewed rolled by
/// `−shift`, and a query only sees keys in the same window whose original
/// positions did not wrap differently (i.e. were contiguous before the roll).
pub fn dense_window_attention(
    store: &ParamStore,
    attn: &WindowAttention,
    x: &Tensor,
    shift: usize,
) -> Tensor {
    let (b, h, wd, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let w = attn.window;
    let heads = attn.heads;
    let hd = d / heads;
    let wq = store.get(attn.qkv.weight);
    let bq = attn.qkv.bias.map(|id| store.get(id).clone());
    let wp = store.get(attn.proj.weight);
    let bp = attn.proj.bias.map(|id| store.get(id).clone());
    let table = store.get(attn.rel_bias);
    let span = 2 * w - 1;

    // rolled coordinate (r, c) holds original ((r + s) mod H, (c + s) mod W)
    let orig = |r: usize, c: usize| ((r + shift) % h, (c + shift) % wd);
    let wraps = |r: usize, c: usize| (r + shift >= h, c + shift >= wd);

    let mut out_data = vec![0.0; b * h * wd * d];
    for bi in 0..b {
        // q, k, v of every original position
        let mut qkv = vec![0.0; h * wd * 3 * d];
        for r in 0..h {
            for c in 0..wd {
                for o in 0..3 * d {
                    let mut acc = bq.as_ref().map_or(0.0, |t| t.data()[o]);
                    for i in 0..d {
                        acc += x.at(&[bi, r, c, i]) * wq.at(&[i, o]);
                    }
                    qkv[(r * wd + c) * 3 * d + o] = acc;
                }
            }
        }
        for qr in 0..h {
            for qc in 0..wd {
                let (oqr, oqc) = orig(qr, qc);
                let mut concat = vec![0.0; d];
                for head in 0..heads {
                    let mut keys = Vec::new();
                    for kr in 0..h {
                        for kc in 0..wd {
                            let same_window = kr / w == qr / w && kc / w == qc / w;
                            let same_region = shift == 0 || wraps(kr, kc) == wraps(qr, qc);
                            if same_window && same_region {
                                keys.push((kr, kc));
                            }
                        }
                    }
                    let qoff = (oqr * wd + oqc) * 3 * d + head * hd;
                    let mut scores: Vec<f64> = keys
                        .iter()
                        .map(|&(kr, kc)| {
                            let (okr, okc) = orig(kr, kc);
                            let koff = (okr * wd + okc) * 3 * d + d + head * hd;
                            let mut s = 0.0;
                            for e in 0..hd {
                                s += qkv[qoff + e] * qkv[koff + e];
                            }
                            let dr = (qr % w) as isize - (kr % w) as isize + w as isize - 1;
                            let dc = (qc % w) as isize - (kc % w) as isize + w as isize - 1;
                            s / (hd as f64).sqrt() + table.at(&[dr as usize * span + dc as usize, head])
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    scores.iter_mut().for_each(|s| *s = (*s - m).exp());
                    let z: f64 = scores.iter().sum();
                    for (&(kr, kc), s) in keys.iter().zip(&scores) {
                        let (okr, okc) = orig(kr, kc);
                        let voff = (okr * wd + okc) * 3 * d + 2 * d + head * hd;
                        for e in 0..hd {
                            concat[head * hd + e] += s / z * qkv[voff + e];
                        }
                    }
                }
                for o in 0..d {
                    let mut acc = bp.as_ref().map_or(0.0, |t| t.data()[o]);
                    for i in 0..d {
                        acc += concat[i] * wp.at(&[i, o]);
                    }
                    out_data[((bi * h + oqr) * wd + oqc) * d + o] = acc;
                }
            }
        }
    }
    Tensor::new([b, h, wd, d], out_data).unwrap()
}

// ---------------------------------------------------------------------------
// metrics

pub fn pla_oracle(records: &[EvalRecord]) -> f64 {
    let mut correct = 0usize;
    for r in records {
        if r.label == r.predicted {
            correct += 1;
        }
    }
    correct as f64 / records.len() as f64
}

/// Per image: most voted class; ties broken by summed probability, then by
/// smallest class index. Returns `(image_id, label, predicted)` sorted by id.
pub fn votes_oracle(records: &[EvalRecord]) -> Vec<(String, usize, usize)> {
    let mut by_image: HashMap<&str, Vec<&EvalRecord>> = HashMap::new();
    for r in records {
        by_image.entry(&r.image_id).or_default().push(r);
    }
    let mut out: Vec<(String, usize, usize)> = by_image
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_by_key(|r| r.patch_index);
            let k = rs
                .iter()
                .map(|r| r.predicted + 1)
                .chain(rs.iter().filter_map(|r| r.probs.as_ref().map(|p| p.len())))
                .max()
                .unwrap();
            let mut counts = vec![0usize; k];
            for r in &rs {
                counts[r.predicted] += 1;
            }
            let top = *counts.iter().max().unwrap();
            let have_probs = rs.iter().all(|r| r.probs.is_some());
            let mut best: Option<(usize, f64)> = None;
            for (class, &n) in counts.iter().enumerate() {
                if n != top {
                    continue;
                }
                let mass = if have_probs {
                    rs.iter().map(|r| r.probs.as_ref().unwrap()[class]).sum()
                } else {
                    0.0
                };
                match best {
                    None => best = Some((class, mass)),
                    Some((_, m)) if mass > m => best = Some((class, mass)),
                    _ => {}
                }
            }
            (id.to_string(), rs[0].label, best.unwrap().0)
        })
        .collect();
    out.sort();
    out
}

pub fn ila_oracle(records: &[EvalRecord]) -> f64 {
    let v = votes_oracle(records);
    v.iter().filter(|(_, l, p)| l == p).count() as f64 / v.len() as f64
}

/// Macro F1 as `mean_c 2·tp/(2·tp + fp + fn)` with 0 for classes that never
/// occur, from `(label, predicted)` pairs.
pub fn macro_f1_oracle(pairs: &[(usize, usize)], k: usize) -> f64 {
    let mut tp = BTreeMap::new();
    let mut fp = BTreeMap::new();
    let mut fne = BTreeMap::new();
    for &(l, p) in pairs {
        if l == p {
            *tp.entry(l).or_insert(0usize) += 1;
        } else {
            *fp.entry(p).or_insert(0usize) += 1;
            *fne.entry(l).or_insert(0usize) += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..k {
        let t = *tp.get(&c).unwrap_or(&0);
        let denom = 2 * t + fp.get(&c).unwrap_or(&0) + fne.get(&c).unwrap_or(&0);
        if denom > 0 {
            sum += (2 * t) as f64 / denom as f64;
        }
    }
    sum / k as f64
}
