mod common;

use common::dense_window_attention;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spairswin::nn::{Forward, Mode, ParamStore};
use spairswin::swin::{
    attention_mask, merge_neighbourhoods, relative_position_index, swmsa, window_partition, window_reverse, wmsa,
    Swin, SwinConfig, WindowAttention, MASK_VALUE,
};
use spairswin::{Error, Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Window attention with random weights, biases and relative-bias table.
fn attention(dim: usize, heads: usize, w: usize, seed: u64) -> (ParamStore, WindowAttention) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let attn = WindowAttention::new(&mut store, "attn", dim, heads, w, 0.0, 0.0, &mut r).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(shape, 0.4, &mut r)).unwrap();
    }
    (store, attn)
}

fn run_wmsa(store: &ParamStore, attn: &WindowAttention, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, store, Mode::Eval);
    let v = cx.constant(x.clone()).unwrap();
    let out = wmsa(&mut cx, attn, v).unwrap();
    g.value(out).clone()
}

fn run_swmsa(store: &ParamStore, attn: &WindowAttention, x: &Tensor, shift: usize) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mask = attention_mask(h, w, attn.window, shift).unwrap();
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, store, Mode::Eval);
    let v = cx.constant(x.clone()).unwrap();
    let out = swmsa(&mut cx, attn, v, shift, &mask).unwrap();
    g.value(out).clone()
}

fn partition(x: &Tensor, w: usize) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone()).unwrap();
    let out = window_partition(&mut g, v, w).unwrap();
    g.value(out).clone()
}

fn reverse(x: &Tensor, w: usize, h: usize, wd: usize) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone()).unwrap();
    let out = window_reverse(&mut g, v, w, h, wd).unwrap();
    g.value(out).clone()
}

proptest! {
    #[test]
    fn partition_reverse_round_trip(b in 1usize..3, nh in 1usize..4, nw in 1usize..4, w in 1usize..5, d in 1usize..4, seed: u64) {
        let x = Tensor::randn([b, nh * w, nw * w, d], 1.0, &mut rng(seed));
        let p = partition(&x, w);
        prop_assert_eq!(p.shape(), &[b * nh * nw, w * w, d][..]);
        prop_assert_eq!(&reverse(&p, w, nh * w, nw * w), &x);
        prop_assert_eq!(&partition(&reverse(&p, w, nh * w, nw * w), w), &p);
    }
}

#[test]
fn partition_matches_index_arithmetic() {
    let (b, h, wd, w) = (2, 4, 6, 2);
    // value encodes (batch, row, col)
    let x = Tensor::from_fn([b, h, wd, 1], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
    let p = partition(&x, w);
    let (nh, nw) = (h / w, wd / w);
    for bi in 0..b {
        for wr in 0..nh {
            for wc in 0..nw {
                for t in 0..w * w {
                    let win = (bi * nh + wr) * nw + wc;
                    let (r, c) = (wr * w + t / w, wc * w + t % w);
                    assert_eq!(p.at(&[win, t, 0]), (bi * 100 + r * 10 + c) as f64);
                }
            }
        }
    }
    // a single window is the flattened grid
    let y = Tensor::randn([1, 3, 3, 2], 1.0, &mut rng(3));
    assert_eq!(partition(&y, 3).data(), y.data());
}

#[test]
fn partition_rejects_indivisible_grid() {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::zeros([1, 5, 4, 2])).unwrap();
    assert!(matches!(window_partition(&mut g, v, 2), Err(Error::Shape { .. })));
    let v = g.leaf(Tensor::zeros([3, 4, 2])).unwrap();
    assert!(window_reverse(&mut g, v, 2, 4, 6).is_err());
}

/// Mask entry is −LARGE exactly when the two rolled positions wrapped around
/// differently, i.e. were not neighbours before the shift.
fn check_mask(h: usize, wd: usize, w: usize, s: usize) {
    let mask = attention_mask(h, wd, w, s).unwrap();
    let (nh, nw, n) = (h / w, wd / w, w * w);
    assert_eq!(mask.shape(), &[nh * nw, n, n]);
    let wraps = |r: usize, c: usize| (r + s >= h, c + s >= wd);
    for wr in 0..nh {
        for wc in 0..nw {
            for i in 0..n {
                for j in 0..n {
                    let (ri, ci) = (wr * w + i / w, wc * w + i % w);
                    let (rj, cj) = (wr * w + j / w, wc * w + j % w);
                    let expect = if wraps(ri, ci) == wraps(rj, cj) { 0.0 } else { MASK_VALUE };
                    assert_eq!(mask.at(&[wr * nw + wc, i, j]), expect, "grid {h}×{wd} w {w} s {s}");
                }
            }
        }
    }
}

#[test]
fn shifted_mask_matches_region_brute_force() {
    for h in 4..=8 {
        for wd in 4..=8 {
            for w in 2..=4 {
                if h % w == 0 && wd % w == 0 {
                    check_mask(h, wd, w, w / 2);
                }
            }
        }
    }
}

#[test]
fn mask_on_single_window_has_four_regions() {
    let mask = attention_mask(4, 4, 4, 2).unwrap();
    let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
    assert_eq!(zeros, 4 * 4 * 4);
    assert!(attention_mask(4, 4, 4, 4).is_err());
    assert!(attention_mask(6, 4, 4, 2).is_err());
}

#[test]
fn relative_index_covers_the_table() {
    for w in 1..=5 {
        let idx = relative_position_index(w);
        let span = 2 * w - 1;
        assert_eq!(idx.len(), w.pow(4));
        assert!(idx.iter().all(|&i| i < span * span));
        let mut seen = vec![false; span * span];
        idx.iter().for_each(|&i| seen[i] = true);
        assert!(seen.iter().all(|&s| s));
        // diagonal maps to zero offset
        for i in 0..w * w {
            assert_eq!(idx[i * w * w + i], (w - 1) * span + (w - 1));
        }
    }
}

#[test]
fn wmsa_matches_dense_oracle() {
    for (h, wd, w, heads) in [(4, 4, 2, 2), (6, 6, 3, 1), (8, 8, 4, 3), (4, 8, 2, 3), (8, 8, 2, 2)] {
        let d = 6;
        let (store, attn) = attention(d, heads, w, (h * 31 + wd * 7 + w) as u64);
        let x = Tensor::randn([2, h, wd, d], 1.0, &mut rng(h as u64 + 100));
        let got = run_wmsa(&store, &attn, &x);
        let want = dense_window_attention(&store, &attn, &x, 0);
        assert!(got.max_abs_diff(&want) < 1e-10, "{h}×{wd} w {w}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn swmsa_matches_masked_dense_oracle() {
    for (h, wd, w, heads) in [(4, 4, 2, 2), (6, 6, 3, 1), (8, 8, 4, 3), (4, 8, 2, 3), (8, 8, 2, 2), (4, 4, 4, 2)] {
        let d = 6;
        let s = w / 2;
        let (store, attn) = attention(d, heads, w, (h * 13 + wd + w) as u64);
        let x = Tensor::randn([2, h, wd, d], 1.0, &mut rng(wd as u64 + 200));
        let got = run_swmsa(&store, &attn, &x, s);
        let want = dense_window_attention(&store, &attn, &x, s);
        assert!(got.max_abs_diff(&want) < 1e-10, "{h}×{wd} w {w}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn wmsa_is_local_to_windows() {
    let (store, attn) = attention(4, 2, 2, 9);
    let x = Tensor::randn([1, 6, 6, 4], 1.0, &mut rng(10));
    let base = run_wmsa(&store, &attn, &x);
    for (pr, pc) in [(0, 0), (3, 2), (5, 5)] {
        let mut data = x.data().to_vec();
        data[(pr * 6 + pc) * 4 + 1] += 0.75;
        let y = run_wmsa(&store, &attn, &Tensor::new([1, 6, 6, 4], data).unwrap());
        for r in 0..6 {
            for c in 0..6 {
                let inside = r / 2 == pr / 2 && c / 2 == pc / 2;
                let diff: f64 = (0..4).map(|e| (y.at(&[0, r, c, e]) - base.at(&[0, r, c, e])).abs()).sum();
                if inside {
                    assert!(diff > 0.0);
                } else {
                    assert_eq!(diff, 0.0, "({r},{c}) changed by perturbing ({pr},{pc})");
                }
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (store, attn) = attention(6, 3, 2, 4);
    let x = Tensor::randn([2, 4, 4, 6], 3.0, &mut rng(5));
    let mask = attention_mask(4, 4, 2, 1).unwrap();
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &store, Mode::Eval);
    let v = cx.constant(x).unwrap();
    let windows = window_partition(cx.graph, v, 2).unwrap();
    let (_, weights) = attn.forward_with_weights(&mut cx, windows, Some(&mask)).unwrap();
    let a = g.value(weights);
    assert_eq!(a.shape(), &[8, 3, 4, 4]);
    for row in a.data().chunks(4) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // masked pairs get no weight
    for win in 0..8 {
        for head in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    if mask.at(&[win % 4, i, j]) != 0.0 {
                        assert!(a.at(&[win, head, i, j]) < 1e-12);
                    }
                }
            }
        }
    }
}

/// `proj(V)` token by token.
fn proj_of_values(store: &ParamStore, attn: &WindowAttention, x: &Tensor) -> Tensor {
    let d = attn.dim;
    let wq = store.get(attn.qkv.weight);
    let bq = store.get(attn.qkv.bias.unwrap());
    let wp = store.get(attn.proj.weight);
    let bp = store.get(attn.proj.bias.unwrap());
    let tokens = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    for t in 0..tokens {
        let xt = &x.data()[t * d..(t + 1) * d];
        let v: Vec<f64> = (0..d)
            .map(|o| bq.data()[2 * d + o] + (0..d).map(|i| xt[i] * wq.at(&[i, 2 * d + o])).sum::<f64>())
            .collect();
        for o in 0..d {
            out.push(bp.data()[o] + (0..d).map(|i| v[i] * wp.at(&[i, o])).sum::<f64>());
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[test]
fn single_token_windows_return_projected_values() {
    let (store, attn) = attention(4, 2, 1, 2);
    let x = Tensor::randn([1, 3, 3, 4], 1.0, &mut rng(1));
    let got = run_wmsa(&store, &attn, &x);
    assert!(got.max_abs_diff(&proj_of_values(&store, &attn, &x)) < 1e-12);
}

#[test]
fn self_only_mask_returns_projected_values() {
    let (store, attn) = attention(4, 2, 2, 6);
    let x = Tensor::randn([2, 4, 4], 1.0, &mut rng(7));
    let mask = Tensor::from_fn([1, 4, 4], |i| if i[1] == i[2] { 0.0 } else { MASK_VALUE });
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &store, Mode::Eval);
    let v = cx.constant(x.clone()).unwrap();
    let out = attn.forward(&mut cx, v, Some(&mask)).unwrap();
    assert!(g.value(out).max_abs_diff(&proj_of_values(&store, &attn, &x)) < 1e-12);
}

#[test]
fn shifted_attention_of_constant_grid_equals_regular() {
    let (store, attn) = attention(6, 2, 2, 8);
    let token: Vec<f64> = vec![0.3, -1.2, 0.5, 2.0, 0.0, -0.7];
    let x = Tensor::from_fn([1, 4, 4, 6], |i| token[i[3]]);
    let a = run_wmsa(&store, &attn, &x);
    let b = run_swmsa(&store, &attn, &x, 1);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn attention_rejects_bad_heads() {
    let mut store = ParamStore::new();
    assert!(WindowAttention::new(&mut store, "a", 6, 4, 2, 0.0, 0.0, &mut rng(0)).is_err());
}

#[test]
fn patch_merging_gathers_neighbourhoods() {
    let (b, h, w, d) = (2, 4, 6, 3);
    let x = Tensor::from_fn([b, h, w, d], |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64);
    let mut g = Graph::new();
    let v = g.leaf(x.clone()).unwrap();
    let m = merge_neighbourhoods(&mut g, v).unwrap();
    let m = g.value(m);
    assert_eq!(m.shape(), &[b, h / 2, w / 2, 4 * d]);
    let order = [(0, 0), (1, 0), (0, 1), (1, 1)];
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (q, (dr, dc)) in order.iter().enumerate() {
                    for e in 0..d {
                        assert_eq!(m.at(&[bi, i, j, q * d + e]), x.at(&[bi, 2 * i + dr, 2 * j + dc, e]));
                    }
                }
            }
        }
    }
    let v = g.leaf(Tensor::zeros([1, 3, 4, 2])).unwrap();
    assert!(merge_neighbourhoods(&mut g, v).is_err());
    let v = g.leaf(Tensor::ones([1, 2, 2, 5])).unwrap();
    let one = merge_neighbourhoods(&mut g, v).unwrap();
    assert_eq!(g.shape(one), &[1, 1, 1, 20]);
}

fn small_swin(input: usize, classes: usize, seed: u64) -> (ParamStore, Swin) {
    let mut store = ParamStore::new();
    let cfg = SwinConfig {
        input_size: input,
        patch_size: 4,
        embed_dim: 6,
        depths: vec![2, 2],
        heads: vec![2, 3],
        window: 2,
        mlp_ratio: 2,
        num_classes: classes,
        ..SwinConfig::default()
    };
    let swin = Swin::new(&mut store, "swin", cfg, &mut rng(seed)).unwrap();
    (store, swin)
}

#[test]
fn patch_embed_matches_unfold_linear_layernorm() {
    let (mut store, swin) = small_swin(16, 3, 1);
    let mut r = rng(2);
    store.set(swin.embed_norm.gamma, Tensor::randn([6], 1.0, &mut r)).unwrap();
    store.set(swin.embed_norm.beta, Tensor::randn([6], 1.0, &mut r)).unwrap();
    store.set(swin.embed.bias.unwrap(), Tensor::randn([6], 1.0, &mut r)).unwrap();
    let img = Tensor::randn([2, 3, 16, 16], 1.0, &mut r);
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &store, Mode::Eval);
    let v = cx.constant(img.clone()).unwrap();
    let t = swin.patch_embed(&mut cx, v).unwrap();
    let t = g.value(t).clone();
    assert_eq!(t.shape(), &[2, 16, 6]);
    let w = store.get(swin.embed.weight);
    let bias = store.get(swin.embed.bias.unwrap());
    let gamma = store.get(swin.embed_norm.gamma);
    let beta = store.get(swin.embed_norm.beta);
    for b in 0..2 {
        for tok in 0..16 {
            let (gr, gc) = (tok / 4, tok % 4);
            let mut y = bias.data().to_vec();
            let mut f = 0;
            for c in 0..3 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        let px = img.at(&[b, c, gr * 4 + dy, gc * 4 + dx]);
                        for (o, yo) in y.iter_mut().enumerate() {
                            *yo += px * w.at(&[f, o]);
                        }
                        f += 1;
                    }
                }
            }
            let mean = y.iter().sum::<f64>() / 6.0;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for o in 0..6 {
                let want = (y[o] - mean) / (var + 1e-5).sqrt() * gamma.data()[o] + beta.data()[o];
                assert!((t.at(&[b, tok, o]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn desk_sized_input_gives_256_tokens() {
    let mut store = ParamStore::new();
    let swin = Swin::new(&mut store, "swin", SwinConfig::default(), &mut rng(0)).unwrap();
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &store, Mode::Eval);
    let v = cx.constant(Tensor::zeros([1, 3, 64, 64])).unwrap();
    let t = swin.patch_embed(&mut cx, v).unwrap();
    assert_eq!(g.shape(t), &[1, 256, 24]);
}

fn logits(store: &ParamStore, swin: &Swin, img: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, store, Mode::Eval);
    let v = cx.constant(img.clone()).unwrap();
    let out = swin.forward(&mut cx, v).unwrap();
    g.value(out).clone()
}

#[test]
fn zero_head_gives_bias_logits() {
    let (mut store, swin) = small_swin(16, 1, 3);
    store.set(swin.head.weight, Tensor::zeros([12, 1])).unwrap();
    store.set(swin.head.bias.unwrap(), Tensor::scalar(0.7).reshape([1]).unwrap()).unwrap();
    let l = logits(&store, &swin, &Tensor::randn([3, 3, 16, 16], 1.0, &mut rng(4)));
    assert_eq!(l.shape(), &[3, 1]);
    assert!(l.data().iter().all(|&v| v == 0.7));
}

#[test]
fn permuting_head_columns_permutes_logits() {
    let (mut store, swin) = small_swin(16, 4, 5);
    store.set(swin.head.bias.unwrap(), Tensor::randn([4], 1.0, &mut rng(6))).unwrap();
    let img = Tensor::randn([2, 3, 16, 16], 1.0, &mut rng(7));
    let base = logits(&store, &swin, &img);
    let perm = [2, 0, 3, 1];
    let w = store.get(swin.head.weight).clone();
    let b = store.get(swin.head.bias.unwrap()).clone();
    store.set(swin.head.weight, Tensor::from_fn([12, 4], |i| w.at(&[i[0], perm[i[1]]]))).unwrap();
    store.set(swin.head.bias.unwrap(), Tensor::from_fn([4], |i| b.data()[perm[i[0]]])).unwrap();
    let permuted = logits(&store, &swin, &img);
    for r in 0..2 {
        for k in 0..4 {
            assert_eq!(permuted.at(&[r, k]), base.at(&[r, perm[k]]));
        }
    }
}

#[test]
fn config_invariants_are_enforced() {
    let ok = SwinConfig::default();
    let geo = ok.validate().unwrap();
    assert_eq!(geo.len(), 2);
    assert_eq!((geo[0].grid, geo[0].dim, geo[0].shift), (16, 24, 2));
    assert_eq!((geo[1].grid, geo[1].dim, geo[1].shift), (8, 48, 2));
    let bad = [
        SwinConfig { input_size: 62, ..ok.clone() },
        SwinConfig { depths: vec![3, 2], ..ok.clone() },
        SwinConfig { heads: vec![5, 6], ..ok.clone() },
        SwinConfig { window: 3, ..ok.clone() },
        SwinConfig { depths: vec![2], ..ok.clone() },
        SwinConfig { input_size: 16, ..ok.clone() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    // a grid that fits in one window runs without shift
    let one = SwinConfig { input_size: 16, depths: vec![2], heads: vec![3], ..ok };
    assert_eq!(one.validate().unwrap()[0].shift, 0);
}

#[test]
fn absolute_position_embedding_is_optional() {
    let cfg = SwinConfig {
        input_size: 16,
        depths: vec![2],
        heads: vec![3],
        absolute_pos_embed: true,
        ..SwinConfig::default()
    };
    let mut store = ParamStore::new();
    let swin = Swin::new(&mut store, "swin", cfg, &mut rng(0)).unwrap();
    assert!(swin.pos_embed.is_some());
    assert!(store.find("swin.pos_embed").is_some());
    let mut store = ParamStore::new();
    let swin = Swin::new(&mut store, "swin", SwinConfig::default(), &mut rng(0)).unwrap();
    assert!(swin.pos_embed.is_none());
}
