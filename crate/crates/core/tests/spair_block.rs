use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spairswin::nn::{Forward, Mode, ParamStore};
use spairswin::pipeline::gradcheck_spair;
use spairswin::spair::{Spair, SpairConfig};
use spairswin::{Error, Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn block(config: SpairConfig, seed: u64) -> (ParamStore, Spair) {
    let mut store = ParamStore::new();
    let s = Spair::new(&mut store, "spair", config, &mut rng(seed)).unwrap();
    (store, s)
}

/// Replaces every parameter and buffer with random values; variances stay positive.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.param(id).name.clone();
        let shape = store.get(id).shape().to_vec();
        let t = if name.ends_with("running_var") {
            Tensor::uniform(shape, 0.5, 2.0, &mut r)
        } else {
            Tensor::randn(shape, 0.5, &mut r)
        };
        store.set(id, t).unwrap();
    }
}

fn eval(store: &ParamStore, f: impl FnOnce(&mut Forward<'_>, spairswin::Var) -> spairswin::Result<spairswin::Var>, x: &Tensor, mode: Mode) -> Tensor {
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, store, mode);
    let v = cx.constant(x.clone()).unwrap();
    let out = f(&mut cx, v).unwrap();
    g.value(out).clone()
}

// --- straight-line reference -------------------------------------------------

type Img = Vec<Vec<Vec<Vec<f64>>>>; // [b][c][y][x]

fn to_img(t: &Tensor) -> Img {
    let s = t.shape();
    (0..s[0])
        .map(|b| (0..s[1]).map(|c| (0..s[2]).map(|y| (0..s[3]).map(|x| t.at(&[b, c, y, x])).collect()).collect()).collect())
        .collect()
}

fn from_img(i: &Img) -> Tensor {
    let s = [i.len(), i[0].len(), i[0][0].len(), i[0][0][0].len()];
    Tensor::from_fn(s, |j| i[j[0]][j[1]][j[2]][j[3]])
}

/// Zero-padded cross-correlation; `groups == cin` gives a depthwise conv.
fn conv(x: &Img, w: &Tensor, bias: Option<&Tensor>, depthwise: bool) -> Img {
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let p = (k - 1) / 2;
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    x.iter()
        .map(|xb| {
            (0..cout)
                .map(|o| {
                    (0..h)
                        .map(|y| {
                            (0..wd)
                                .map(|xx| {
                                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                                    let inputs: Vec<usize> = if depthwise { vec![o] } else { (0..xb.len()).collect() };
                                    for (ci, &c) in inputs.iter().enumerate() {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                let iy = y as isize + ky as isize - p as isize;
                                                let ix = xx as isize + kx as isize - p as isize;
                                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                                    let wi = if depthwise { 0 } else { ci };
                                                    acc += xb[c][iy as usize][ix as usize] * w.at(&[o, wi, ky, kx]);
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn bn(x: &Img, store: &ParamStore, name: &str, train: bool) -> Img {
    let get = |s: &str| store.get(store.find(&format!("{name}.{s}")).unwrap()).data().to_vec();
    let (gamma, beta) = (get("gamma"), get("beta"));
    let channels = x[0].len();
    let (mut mean, mut var) = (get("running_mean"), get("running_var"));
    if train {
        for c in 0..channels {
            let vals: Vec<f64> = x.iter().flat_map(|b| b[c].iter().flatten().copied()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            mean[c] = m;
            var[c] = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        }
    }
    let mut out = x.clone();
    for b in out.iter_mut() {
        for (c, ch) in b.iter_mut().enumerate() {
            for v in ch.iter_mut().flatten() {
                *v = (*v - mean[c]) / (var[c] + 1e-5).sqrt() * gamma[c] + beta[c];
            }
        }
    }
    out
}

fn relu(mut x: Img) -> Img {
    x.iter_mut().flatten().flatten().flatten().for_each(|v| *v = v.max(0.0));
    x
}

fn reference_residual(store: &ParamStore, x: &Tensor, train: bool) -> Img {
    let p = |s: &str| store.get(store.find(&format!("spair.{s}")).unwrap()).clone();
    let xi = to_img(x);
    let h = relu(bn(&conv(&xi, &p("expand.weight"), None, false), store, "spair.bn1", train));
    let h = relu(bn(&conv(&h, &p("dw.weight"), None, true), store, "spair.bn2", train));
    let h = bn(&conv(&h, &p("project.weight"), None, false), store, "spair.bn3", train);
    let mut y = xi;
    for (yb, hb) in y.iter_mut().zip(&h) {
        for (yv, hv) in yb.iter_mut().flatten().flatten().zip(hb.iter().flatten().flatten()) {
            *yv += hv;
        }
    }
    y
}

/// Per-sample softmax over positions of sigmoid(conv(mean over channels)).
fn reference_attention(store: &ParamStore, f: &Img) -> Img {
    let p = |s: &str| store.get(store.find(&format!("spair.{s}")).unwrap()).clone();
    let pooled: Img = f
        .iter()
        .map(|b| {
            let c = b.len() as f64;
            vec![(0..b[0].len())
                .map(|y| (0..b[0][0].len()).map(|x| b.iter().map(|ch| ch[y][x]).sum::<f64>() / c).collect())
                .collect()]
        })
        .collect();
    let logits = conv(&pooled, &p("att_conv.weight"), Some(&p("att_conv.bias")), false);
    logits
        .into_iter()
        .map(|b| {
            let s: Vec<Vec<f64>> = b[0].iter().map(|r| r.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()).collect();
            let m = s.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().flatten().map(|v| (v - m).exp()).sum();
            vec![s.iter().map(|r| r.iter().map(|v| (v - m).exp() / z).collect()).collect()]
        })
        .collect()
}

// --- tests -------------------------------------------------------------------

#[test]
fn zero_branch_with_identity_bn_returns_input() {
    let (mut store, s) = block(SpairConfig::default(), 0);
    for name in ["spair.expand.weight", "spair.dw.weight", "spair.project.weight"] {
        let id = store.find(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = Tensor::randn([2, 3, 6, 5], 1.0, &mut rng(1));
    let y = eval(&store, |cx, v| s.inverted_residual(cx, v), &x, Mode::Eval);
    assert_eq!(y, x);
}

#[test]
fn inverted_residual_matches_reference() {
    for train in [false, true] {
        let (mut store, s) = block(SpairConfig::default(), 2);
        randomize(&mut store, 3);
        let x = Tensor::randn([2, 3, 7, 6], 1.0, &mut rng(4));
        let mode = if train { Mode::Train } else { Mode::Eval };
        let y = eval(&store, |cx, v| s.inverted_residual(cx, v), &x, mode);
        assert!(y.max_abs_diff(&from_img(&reference_residual(&store, &x, train))) < 1e-10);
    }
}

#[test]
fn spair_forward_matches_reference() {
    for rescale in [true, false] {
        let cfg = SpairConfig { attention_rescale: rescale, ..SpairConfig::default() };
        let (mut store, s) = block(cfg, 5);
        randomize(&mut store, 6);
        let x = Tensor::randn([2, 3, 9, 8], 1.0, &mut rng(7));
        let y = eval(&store, |cx, v| s.forward(cx, v), &x, Mode::Eval);
        let r = reference_residual(&store, &x, false);
        let a = reference_attention(&store, &r);
        let scale = if rescale { 72.0 } else { 1.0 };
        let want = Tensor::from_fn([2, 3, 9, 8], |i| r[i[0]][i[1]][i[2]][i[3]] * a[i[0]][0][i[2]][i[3]] * scale);
        assert!(y.max_abs_diff(&want) < 1e-10);
        let probs = eval(&store, |cx, v| s.attention_probs(cx, v), &from_img(&r), Mode::Eval);
        assert!(probs.max_abs_diff(&from_img(&a)) < 1e-12);
    }
}

#[test]
fn constant_features_give_uniform_map() {
    let (mut store, s) = block(SpairConfig::default(), 8);
    randomize(&mut store, 9);
    // a 7×7 kernel on a constant 1×1 map only sees the centre tap
    let one = eval(&store, |cx, v| s.spatial_attention(cx, v), &Tensor::full([2, 3, 1, 1], 0.3), Mode::Eval);
    assert_eq!(one.data(), &[1.0, 1.0]);
    // zero padding makes border cells differ for wider kernels
    let cfg = SpairConfig { att_kernel: 1, ..SpairConfig::default() };
    let (mut store, s) = block(cfg, 10);
    randomize(&mut store, 11);
    let f = Tensor::full([2, 3, 5, 5], -0.4);
    let map = eval(&store, |cx, v| s.spatial_attention(cx, v), &f, Mode::Eval);
    assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let probs = eval(&store, |cx, v| s.attention_probs(cx, v), &f, Mode::Eval);
    assert!(probs.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
}

#[test]
fn zero_branch_constant_input_passes_through() {
    let cfg = SpairConfig { att_kernel: 1, ..SpairConfig::default() };
    let (mut store, s) = block(cfg, 12);
    for name in ["spair.expand.weight", "spair.dw.weight", "spair.project.weight"] {
        let id = store.find(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = Tensor::full([1, 3, 4, 4], 0.8);
    let y = eval(&store, |cx, v| s.forward(cx, v), &x, Mode::Eval);
    assert!(y.max_abs_diff(&x) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shape_is_preserved_and_map_normalized(
        expansion in 1usize..5,
        dw in prop::sample::select(vec![1usize, 3, 5]),
        att in prop::sample::select(vec![1usize, 3, 5, 7]),
        b in 1usize..3,
        h in 1usize..9,
        w in 1usize..9,
        seed: u64,
    ) {
        let cfg = SpairConfig { expansion, dw_kernel: dw, att_kernel: att, ..SpairConfig::default() };
        let (mut store, s) = block(cfg, seed);
        randomize(&mut store, seed ^ 1);
        let x = Tensor::randn([b, 3, h, w], 2.0, &mut rng(seed ^ 2));
        let y = eval(&store, |cx, v| s.forward(cx, v), &x, Mode::Train);
        prop_assert_eq!(y.shape(), x.shape());
        let probs = eval(&store, |cx, v| s.attention_probs(cx, v), &x, Mode::Eval);
        for sample in probs.data().chunks(h * w) {
            prop_assert!(sample.iter().all(|&p| p > 0.0));
            prop_assert!((sample.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_logits_shift_with_the_input() {
    let (mut store, s) = block(SpairConfig::default(), 13);
    randomize(&mut store, 14);
    let (h, w, dy, dx) = (20, 20, 2, 3);
    let x = Tensor::randn([1, 3, h, w], 1.0, &mut rng(15));
    let shifted = Tensor::from_fn([1, 3, h, w], |i| x.at(&[0, i[1], (i[2] + h - dy) % h, (i[3] + w - dx) % w]));
    let logits = |t: &Tensor| {
        eval(
            &store,
            |cx, v| {
                let a = cx.graph.avgpool_channels(v)?;
                s.att_conv.forward(cx, a)
            },
            t,
            Mode::Eval,
        )
    };
    let (a, b) = (logits(&x), logits(&shifted));
    // 7×7 kernel: cells within 3 of a border (or of the wrap seam) see padding
    for y in 3 + dy..h - 3 {
        for xx in 3 + dx..w - 3 {
            assert!((b.at(&[0, 0, y, xx]) - a.at(&[0, 0, y - dy, xx - dx])).abs() < 1e-12);
        }
    }
}

#[test]
fn stride_other_than_one_is_rejected() {
    let mut store = ParamStore::new();
    let cfg = SpairConfig { stride: 2, ..SpairConfig::default() };
    assert!(matches!(Spair::new(&mut store, "spair", cfg, &mut rng(0)), Err(Error::Config(_))));
    let cfg = SpairConfig { dw_kernel: 4, ..SpairConfig::default() };
    assert!(Spair::new(&mut store, "spair", cfg, &mut rng(0)).is_err());
}

#[test]
fn wrong_channel_count_is_a_shape_error() {
    let (store, s) = block(SpairConfig::default(), 0);
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &store, Mode::Eval);
    let v = cx.constant(Tensor::zeros([1, 4, 5, 5])).unwrap();
    assert!(matches!(s.forward(&mut cx, v), Err(Error::Shape { .. })));
}

#[test]
fn gradients_match_finite_differences() {
    let report = gradcheck_spair(1e-5, 1e-4, 3).unwrap();
    assert!(report.passed(), "max relative error {}", report.max_rel_error());
}

#[test]
fn train_mode_reports_batch_statistics() {
    let (store, s) = block(SpairConfig::default(), 16);
    let x = Tensor::randn([4, 3, 5, 5], 1.0, &mut rng(17));
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &store, Mode::Train);
    let v = cx.constant(x).unwrap();
    s.forward(&mut cx, v).unwrap();
    assert_eq!(cx.take_updates().len(), 3);
    let mut cx = Forward::new(&mut g, &store, Mode::Eval);
    let v = cx.constant(Tensor::zeros([1, 3, 5, 5])).unwrap();
    s.forward(&mut cx, v).unwrap();
    assert!(cx.take_updates().is_empty());
}
