//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here works on plain [`Tensor`]s; [`Graph`](super::Graph) wires
//! the kernels into a tape. Loops run in a fixed order so results are
//! bit-reproducible.

use super::{split_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups: channels,
        }
    }
}

pub(crate) struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    m: usize,
    ho: usize,
    wo: usize,
    cin_per_group: usize,
    cout_per_group: usize,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, m: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - m) / stride + 1
}

pub(crate) fn conv_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<ConvDims> {
    let op = if spec.groups == 1 {
        "conv2d"
    } else {
        "depthwise_conv2d"
    };
    let [batch, cin, h, w] = *input.shape() else {
        return Err(Error::shape(
            op,
            format!("input must be [B,C,H,W], got {:?}", input.shape()),
        ));
    };
    let [cout, wcin, m, m2] = *weight.shape() else {
        return Err(Error::shape(
            op,
            format!("weight must be [Cout,Cin,m,m], got {:?}", weight.shape()),
        ));
    };
    if spec.stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::shape(
            op,
            format!(
                "groups {} must divide Cin {cin} and Cout {cout}",
                spec.groups
            ),
        ));
    }
    let cin_per_group = cin / spec.groups;
    if wcin != cin_per_group {
        return Err(Error::shape(
            op,
            format!("weight input channels {wcin} != input channels per group {cin_per_group} (input C={cin})"),
        ));
    }
    if m != m2 || m % 2 == 0 {
        return Err(Error::shape(
            op,
            format!("kernel must be square with odd size, got {m}x{m2}"),
        ));
    }
    if h + 2 * spec.padding < m || w + 2 * spec.padding < m {
        return Err(Error::shape(
            op,
            format!(
                "padded input {}x{} smaller than kernel {m}",
                h + 2 * spec.padding,
                w + 2 * spec.padding
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?} != [{cout}]", b.shape()),
            ));
        }
    }
    Ok(ConvDims {
        batch,
        cin,
        cout,
        h,
        w,
        m,
        ho: conv_out_len(h, m, spec.stride, spec.padding),
        wo: conv_out_len(w, m, spec.stride, spec.padding),
        cin_per_group,
        cout_per_group: cout / spec.groups,
    })
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + offset < in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        ((last / s) as usize + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    let d = conv_dims(input, weight, bias, spec)?;
    let (s, p) = (spec.stride, spec.padding as isize);
    let mut out = vec![0.0; d.batch * d.cout * d.ho * d.wo];
    let x = input.data();
    let wt = weight.data();
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    for b in 0..d.batch {
        for o in 0..d.cout {
            let group = o / d.cout_per_group;
            let out_plane = &mut out[(b * d.cout + o) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                out_plane.fill(bias.data()[o]);
            }
            for ci in 0..d.cin_per_group {
                let c = group * d.cin_per_group + ci;
                let in_plane = &x[(b * d.cin + c) * plane_in..][..plane_in];
                for i in 0..d.m {
                    let (ylo, yhi) = valid_range(d.ho, d.h, s, i as isize - p);
                    for j in 0..d.m {
                        let wv = wt[((o * d.cin_per_group + ci) * d.m + i) * d.m + j];
                        let (xlo, xhi) = valid_range(d.wo, d.w, s, j as isize - p);
                        for y in ylo..yhi {
                            let iy = (y * s) as isize + i as isize - p;
                            let row = &in_plane[iy as usize * d.w..][..d.w];
                            let orow = &mut out_plane[y * d.wo..][..d.wo];
                            for xo in xlo..xhi {
                                let ix = ((xo * s) as isize + j as isize - p) as usize;
                                orow[xo] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([d.batch, d.cout, d.ho, d.wo], out)
}

/// Returns gradients with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(input, weight, None, spec)?;
    if grad_out.shape() != [d.batch, d.cout, d.ho, d.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad shape {:?} != [{}, {}, {}, {}]",
                grad_out.shape(),
                d.batch,
                d.cout,
                d.ho,
                d.wo
            ),
        ));
    }
    let (s, p) = (spec.stride, spec.padding as isize);
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gin = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; d.cout];
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    for b in 0..d.batch {
        for o in 0..d.cout {
            let group = o / d.cout_per_group;
            let g_plane = &g[(b * d.cout + o) * plane_out..][..plane_out];
            gb[o] += g_plane.iter().sum::<f64>();
            for ci in 0..d.cin_per_group {
                let c = group * d.cin_per_group + ci;
                let in_off = (b * d.cin + c) * plane_in;
                for i in 0..d.m {
                    let (ylo, yhi) = valid_range(d.ho, d.h, s, i as isize - p);
                    for j in 0..d.m {
                        let widx = ((o * d.cin_per_group + ci) * d.m + i) * d.m + j;
                        let wv = wt[widx];
                        let (xlo, xhi) = valid_range(d.wo, d.w, s, j as isize - p);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let iy = ((y * s) as isize + i as isize - p) as usize;
                            let grow = &g_plane[y * d.wo..][..d.wo];
                            let row_off = in_off + iy * d.w;
                            for xo in xlo..xhi {
                                let ix = ((xo * s) as isize + j as isize - p) as usize;
                                acc += grow[xo] * x[row_off + ix];
                                gin[row_off + ix] += grow[xo] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gin)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new([d.cout], gb)?,
    ))
}

/// Per-channel statistics over `(B, H, W)` of a `[B,C,H,W]` tensor.
/// Variance is the biased (population) estimate.
pub fn channel_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [b, c, h, w] = *input.shape() else {
        return Err(Error::shape(
            "batchnorm2d",
            format!("input must be [B,C,H,W], got {:?}", input.shape()),
        ));
    };
    let n = b * h * w;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "batchnorm2d: zero-size batch in train mode".into(),
        ));
    }
    let x = input.data();
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            sum += x[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let mu = sum / n as f64;
        let mut sq = 0.0;
        for bi in 0..b {
            sq += x[(bi * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / n as f64;
    }
    Ok((mean, var))
}

/// `xhat = (x - mean[c]) * inv_std[c]` for a `[B,C,H,W]` tensor.
pub fn channel_normalize(input: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let s = input.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = (k / plane) % c;
            (v - mean[ch]) * inv_std[ch]
        })
        .collect();
    Tensor::new(s, data).expect("shape preserved")
}

pub fn channel_affine(xhat: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let s = xhat.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let data = xhat
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = (k / plane) % c;
            gamma[ch] * v + beta[ch]
        })
        .collect();
    Tensor::new(s, data).expect("shape preserved")
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(src[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (src[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// VJP of softmax given its output `y`: `dx = y * (g - sum(g * y))`.
pub fn softmax_backward(y: &Tensor, grad: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(y.shape(), axis)?;
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|k| yd[base + k * inner] * gd[base + k * inner])
                .sum();
            for k in 0..len {
                let at = base + k * inner;
                out[at] = yd[at] * (gd[at] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out)
}

/// Normalizes along `axis`; returns `(xhat, inv_std)` with one `inv_std` per
/// normalized group (row-major over the non-axis positions).
pub fn layernorm_normalize(x: &Tensor, axis: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut inv = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mean = (0..len).map(|k| src[base + k * inner]).sum::<f64>() / len as f64;
            let var = (0..len)
                .map(|k| {
                    let d = src[base + k * inner] - mean;
                    d * d
                })
                .sum::<f64>()
                / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            for k in 0..len {
                out[base + k * inner] = (src[base + k * inner] - mean) * r;
            }
            inv.push(r);
        }
    }
    Ok((Tensor::new(x.shape(), out)?, inv))
}

/// Input gradient of a normalization given `dxhat`, for groups laid out as
/// in [`layernorm_normalize`].
pub fn layernorm_input_grad(
    xhat: &Tensor,
    dxhat: &[f64],
    inv_std: &[f64],
    axis: usize,
) -> Result<Vec<f64>> {
    let (outer, len, inner) = split_axis(xhat.shape(), axis)?;
    let xh = xhat.data();
    let mut out = vec![0.0; xh.len()];
    let n = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for k in 0..len {
                let at = base + k * inner;
                sum_d += dxhat[at];
                sum_dx += dxhat[at] * xh[at];
            }
            let r = inv_std[o * inner + i];
            for k in 0..len {
                let at = base + k * inner;
                out[at] = r / n * (n * dxhat[at] - sum_d - xh[at] * sum_dx);
            }
        }
    }
    Ok(out)
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..][..m];
        let brow = &b[p * n..][..n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// Batched matrix product of `[..., M, K]` and `[..., K, N]` with identical
/// leading dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, lead) = matmul_dims(a, b)?;
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        gemm_nn(
            &a.data()[t * m * k..][..m * k],
            &b.data()[t * k * n..][..k * n],
            &mut out[t * m * n..][..m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = lead;
    shape.extend([m, n]);
    Tensor::new(shape, out)
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::shape(
            "matmul",
            format!("incompatible batch dims {sa:?} @ {sb:?}"),
        ));
    }
    let r = sa.len();
    let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {sa:?} @ {sb:?}"),
        ));
    }
    let lead = sa[..r - 2].to_vec();
    Ok((lead.iter().product(), m, k, n, lead))
}

/// Axis permutation: output axis `d` is input axis `axes[d]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes.iter().any(|&a| {
            a >= rank || std::mem::replace(&mut seen[a], true)
        })
    {
        return Err(Error::InvalidArgument(format!(
            "permute: {axes:?} is not a permutation of 0..{rank}"
        )));
    }
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return Tensor::new(out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        out.push(src[off]);
        let mut d = rank;
        loop {
            if d == 0 {
                return Tensor::new(out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    inv
}

/// Cyclic shift along `axis`: `out[i] = x[(i - shift) mod n]`.
pub fn roll(x: &Tensor, axis: usize, shift: isize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    if len == 0 {
        return Tensor::new(x.shape(), out);
    }
    let sh = shift.rem_euclid(len as isize) as usize;
    for o in 0..outer {
        for k in 0..len {
            let dst = (k + sh) % len;
            out[(o * len + dst) * inner..][..inner]
                .copy_from_slice(&src[(o * len + k) * inner..][..inner]);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed inside `out_shape` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d + pad] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output position with the matching offsets into `a` and `b`.
pub(crate) fn broadcast_for_each(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for stride in 1..4 {
                    for offset in -3isize..4 {
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "{out_len} {in_len} {stride} {offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn permute_transposes_matrix() {
        let t = Tensor::from_fn([2, 3], |i| (i[0] * 3 + i[1]) as f64);
        let p = permute(&t, &[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(permute(&t, &[0, 0]).is_err());
    }

    #[test]
    fn roll_shifts_cyclically() {
        let t = Tensor::new([4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(roll(&t, 0, 1).unwrap().data(), &[3.0, 0.0, 1.0, 2.0]);
        assert_eq!(roll(&t, 0, -1).unwrap().data(), &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let a = Tensor::from_fn([3, 4], |i| (i[0] as f64) - 0.5 * i[1] as f64);
        let b = Tensor::from_fn([4, 2], |i| (i[0] * 2 + i[1]) as f64 * 0.25);
        let mut nn = vec![0.0; 6];
        gemm_nn(a.data(), b.data(), &mut nn, 3, 4, 2);
        let at = permute(&a, &[1, 0]).unwrap();
        let bt = permute(&b, &[1, 0]).unwrap();
        let mut tn = vec![0.0; 6];
        gemm_tn(at.data(), b.data(), &mut tn, 3, 4, 2);
        let mut nt = vec![0.0; 6];
        gemm_nt(a.data(), bt.data(), &mut nt, 3, 4, 2);
        assert_eq!(nn, tn);
        assert_eq!(nn, nt);
    }
}
