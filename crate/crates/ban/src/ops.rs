//! Differentiable operations on [`Tensor`].
//!
//! Forward is eager; each op registers a backward closure over the saved
//! values it needs. When no input requires a gradient the op returns a
//! plain constant, so inference and the frozen-encoder path build no graph.

use ndarray::{concatenate, Array1, Array2, Array3, Axis, Ix1, Ix2, Ix3};

use crate::autodiff::Tensor;
use crate::raster::bilinear_axis_taps;

pub const LN_EPS: f32 = 1e-5;

fn any_grad(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

fn as2(t: &Tensor) -> Array2<f32> {
    t.data().view().into_dimensionality::<Ix2>().expect("rank-2 tensor").to_owned()
}

fn as3(t: &Tensor) -> Array3<f32> {
    t.data().view().into_dimensionality::<Ix3>().expect("rank-3 tensor").to_owned()
}

fn as1(t: &Tensor) -> Array1<f32> {
    t.data().view().into_dimensionality::<Ix1>().expect("rank-1 tensor").to_owned()
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let out = &*a.data() + &*b.data();
    if !any_grad(&[a, b]) {
        return Tensor::constant(out);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(out, vec![a.clone(), b.clone()], Box::new(move |g| {
        pa.accumulate_grad(g);
        pb.accumulate_grad(g);
    }))
}

/// Elementwise difference a - b.
pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let out = &*a.data() - &*b.data();
    if !any_grad(&[a, b]) {
        return Tensor::constant(out);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(out, vec![a.clone(), b.clone()], Box::new(move |g| {
        pa.accumulate_grad(g);
        pb.accumulate_grad(&g.mapv(|v| -v));
    }))
}

/// Elementwise product of two same-shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let out = &*a.data() * &*b.data();
    if !any_grad(&[a, b]) {
        return Tensor::constant(out);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(out, vec![a.clone(), b.clone()], Box::new(move |g| {
        if pa.requires_grad() {
            pa.accumulate_grad(&(g * &*pb.data()));
        }
        if pb.requires_grad() {
            pb.accumulate_grad(&(g * &*pa.data()));
        }
    }))
}

/// Sum of all elements as a scalar tensor; the reduction runs in f64.
pub fn sum_all(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    let out = ndarray::arr1(&[total as f32]).into_dyn();
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    let shape = x.shape();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let g0 = g[[0]];
        px.accumulate_grad(&ndarray::ArrayD::from_elem(ndarray::IxDyn(&shape), g0));
    }))
}

pub fn mul_scalar(a: &Tensor, s: f32) -> Tensor {
    let out = a.data().mapv(|v| v * s);
    if !a.requires_grad() {
        return Tensor::constant(out);
    }
    let pa = a.clone();
    Tensor::from_op(out, vec![a.clone()], Box::new(move |g| {
        pa.accumulate_grad(&g.mapv(|v| v * s));
    }))
}

/// Row-broadcast bias add: x [n, c] + b [c].
pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let xv = as2(x);
    let bv = as1(b);
    assert_eq!(xv.ncols(), bv.len(), "bias width mismatch");
    let out = (&xv + &bv).into_dyn();
    if !any_grad(&[x, b]) {
        return Tensor::constant(out);
    }
    let (px, pb) = (x.clone(), b.clone());
    Tensor::from_op(out, vec![x.clone(), b.clone()], Box::new(move |g| {
        px.accumulate_grad(g);
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        pb.accumulate_grad(&g2.sum_axis(Axis(0)).into_dyn());
    }))
}

/// Matrix product of [m, k] and [k, n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as2(a);
    let bv = as2(b);
    assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
    let out = av.dot(&bv).into_dyn();
    if !any_grad(&[a, b]) {
        return Tensor::constant(out);
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(out, vec![a.clone(), b.clone()], Box::new(move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        if pa.requires_grad() {
            let bv = pb.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
            pa.accumulate_grad(&g2.dot(&bv.t()).into_dyn());
        }
        if pb.requires_grad() {
            let av = pa.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
            pb.accumulate_grad(&av.t().dot(&g2).into_dyn());
        }
    }))
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Tensor {
    let out = as2(a).t().as_standard_layout().into_owned().into_dyn();
    if !a.requires_grad() {
        return Tensor::constant(out);
    }
    let pa = a.clone();
    Tensor::from_op(out, vec![a.clone()], Box::new(move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        pa.accumulate_grad(&g2.t().as_standard_layout().into_owned().into_dyn());
    }))
}

pub fn relu(x: &Tensor) -> Tensor {
    let out = x.data().mapv(|v| v.max(0.0));
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let mask = px.data().mapv(|v| if v > 0.0 { 1.0f32 } else { 0.0 });
        px.accumulate_grad(&(g * &mask));
    }))
}

/// Elementwise absolute value; subgradient 0 at 0.
pub fn abs(x: &Tensor) -> Tensor {
    let out = x.data().mapv(f32::abs);
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let sign = px.data().mapv(|v| {
            if v > 0.0 {
                1.0f32
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        px.accumulate_grad(&(g * &sign));
    }))
}

/// Per-row layer normalization with affine: rows of x [n, c] are mapped to
/// gain * (x - mean) / sqrt(var + eps) + bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let xv = as2(x);
    let gv = as1(gain);
    let bv = as1(bias);
    let (n, c) = xv.dim();
    assert_eq!(gv.len(), c, "layer_norm gain width mismatch");
    assert_eq!(bv.len(), c, "layer_norm bias width mismatch");
    let mut xhat = Array2::<f32>::zeros((n, c));
    let mut inv_std = Array1::<f32>::zeros(n);
    for i in 0..n {
        let row = xv.row(i);
        let mean = row.sum() / c as f32;
        let var = row.fold(0.0f32, |acc, &v| acc + (v - mean) * (v - mean)) / c as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = r;
        for j in 0..c {
            xhat[(i, j)] = (xv[(i, j)] - mean) * r;
        }
    }
    let out = (&xhat * &gv + &bv).into_dyn();
    if !any_grad(&[x, gain, bias]) {
        return Tensor::constant(out);
    }
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Tensor::from_op(out, vec![x.clone(), gain.clone(), bias.clone()], Box::new(move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        if pb.requires_grad() {
            pb.accumulate_grad(&g2.sum_axis(Axis(0)).into_dyn());
        }
        if pg.requires_grad() {
            pg.accumulate_grad(&(&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
        }
        if px.requires_grad() {
            let gv = pg.data().view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let (n, c) = xhat.dim();
            let mut dx = Array2::<f32>::zeros((n, c));
            for i in 0..n {
                let mut dxhat = Array1::<f32>::zeros(c);
                for j in 0..c {
                    dxhat[j] = g2[(i, j)] * gv[j];
                }
                let mean_dxhat = dxhat.sum() / c as f32;
                let mean_dxhat_xhat =
                    (0..c).map(|j| dxhat[j] * xhat[(i, j)]).sum::<f32>() / c as f32;
                for j in 0..c {
                    dx[(i, j)] =
                        inv_std[i] * (dxhat[j] - mean_dxhat - xhat[(i, j)] * mean_dxhat_xhat);
                }
            }
            px.accumulate_grad(&dx.into_dyn());
        }
    }))
}

/// Normalize each row of [n, c] to unit L2 length (rows of zero norm pass
/// through a small epsilon floor).
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    const EPS: f32 = 1e-12;
    let xv = as2(x);
    let (n, c) = xv.dim();
    let mut norms = Array1::<f32>::zeros(n);
    let mut y = Array2::<f32>::zeros((n, c));
    for i in 0..n {
        let norm = xv.row(i).fold(0.0f32, |a, &v| a + v * v).sqrt().max(EPS);
        norms[i] = norm;
        for j in 0..c {
            y[(i, j)] = xv[(i, j)] / norm;
        }
    }
    let out = y.clone().into_dyn();
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let (n, c) = y.dim();
        let mut dx = Array2::<f32>::zeros((n, c));
        for i in 0..n {
            let dot = (0..c).map(|j| g2[(i, j)] * y[(i, j)]).sum::<f32>();
            for j in 0..c {
                dx[(i, j)] = (g2[(i, j)] - y[(i, j)] * dot) / norms[i];
            }
        }
        px.accumulate_grad(&dx.into_dyn());
    }))
}

/// Row-wise softmax of [n, m].
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let xv = as2(x);
    let (n, m) = xv.dim();
    let mut y = Array2::<f32>::zeros((n, m));
    for i in 0..n {
        let row = xv.row(i);
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f32;
        for j in 0..m {
            let e = (row[j] - max).exp();
            y[(i, j)] = e;
            sum += e;
        }
        for j in 0..m {
            y[(i, j)] /= sum;
        }
    }
    let out = y.clone().into_dyn();
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let (n, m) = y.dim();
        let mut dx = Array2::<f32>::zeros((n, m));
        for i in 0..n {
            let dot = (0..m).map(|j| g2[(i, j)] * y[(i, j)]).sum::<f32>();
            for j in 0..m {
                dx[(i, j)] = y[(i, j)] * (g2[(i, j)] - dot);
            }
        }
        px.accumulate_grad(&dx.into_dyn());
    }))
}

fn conv_out_len(i: usize, k: usize, stride: usize, pad: usize) -> usize {
    (i + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &Array3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f32>, usize, usize) {
    let (ci, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f32>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(
    dcols: &Array2<f32>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros((ci, h, w));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c, iy as usize, ix as usize)] += dcols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution: x [ci, h, w] * w [co, ci, kh, kw] + b [co] -> [co, oh, ow].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xv = as3(x);
    let wshape = weight.shape();
    assert_eq!(wshape.len(), 4, "conv2d weight must be rank 4");
    let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(xv.dim().0, ci, "conv2d channel mismatch");
    let bv = as1(bias);
    assert_eq!(bv.len(), co, "conv2d bias width mismatch");
    let (cols, oh, ow) = im2col(&xv, kh, kw, stride, pad);
    let wflat = weight
        .data()
        .view()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap()
        .to_owned();
    let mut out2 = wflat.dot(&cols);
    for o in 0..co {
        let mut row = out2.row_mut(o);
        row += bv[o];
    }
    let out = out2.into_shape_with_order((co, oh, ow)).unwrap().into_dyn();
    if !any_grad(&[x, weight, bias]) {
        return Tensor::constant(out);
    }
    let (px, pw, pb) = (x.clone(), weight.clone(), bias.clone());
    let (h, w_in) = (xv.dim().1, xv.dim().2);
    Tensor::from_op(out, vec![x.clone(), weight.clone(), bias.clone()], Box::new(move |g| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let go = g3.to_shape((co, oh * ow)).unwrap().into_owned();
        if pb.requires_grad() {
            pb.accumulate_grad(&go.sum_axis(Axis(1)).into_dyn());
        }
        if pw.requires_grad() {
            // dot with a transposed rhs may return an F-layout result
            let dw = go.dot(&cols.t());
            pw.accumulate_grad(&dw.to_shape((co, ci, kh, kw)).unwrap().into_owned().into_dyn());
        }
        if px.requires_grad() {
            let wflat = pw
                .data()
                .view()
                .into_shape_with_order((co, ci * kh * kw))
                .unwrap()
                .to_owned();
            let dcols = wflat.t().dot(&go);
            let dx = col2im(&dcols, ci, h, w_in, kh, kw, stride, pad, oh, ow);
            px.accumulate_grad(&dx.into_dyn());
        }
    }))
}

/// Bilinear resize of a [c, h, w] tensor; backward scatters the same taps.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let xv = as3(x);
    let (c, h, w) = xv.dim();
    let rows = bilinear_axis_taps(h, out_h);
    let cols = bilinear_axis_taps(w, out_w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for i in 0..out_h {
            let r = rows[i];
            for j in 0..out_w {
                let cc = cols[j];
                out[(ch, i, j)] = r.w0
                    * (cc.w0 * xv[(ch, r.lo, cc.lo)] + cc.w1 * xv[(ch, r.lo, cc.hi)])
                    + r.w1 * (cc.w0 * xv[(ch, r.hi, cc.lo)] + cc.w1 * xv[(ch, r.hi, cc.hi)]);
            }
        }
    }
    let out = out.into_dyn();
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = Array3::<f32>::zeros((c, h, w));
        for ch in 0..c {
            for i in 0..out_h {
                let r = rows[i];
                for j in 0..out_w {
                    let cc = cols[j];
                    let gv = g3[(ch, i, j)];
                    dx[(ch, r.lo, cc.lo)] += gv * r.w0 * cc.w0;
                    dx[(ch, r.lo, cc.hi)] += gv * r.w0 * cc.w1;
                    dx[(ch, r.hi, cc.lo)] += gv * r.w1 * cc.w0;
                    dx[(ch, r.hi, cc.hi)] += gv * r.w1 * cc.w1;
                }
            }
        }
        px.accumulate_grad(&dx.into_dyn());
    }))
}

/// Concatenate [ci, h, w] tensors along the channel axis.
pub fn concat_channels(xs: &[Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let views: Vec<Array3<f32>> = xs.iter().map(as3).collect();
    let out = concatenate(
        Axis(0),
        &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .expect("concat_channels")
    .into_dyn();
    if !xs.iter().any(|t| t.requires_grad()) {
        return Tensor::constant(out);
    }
    let parents: Vec<Tensor> = xs.to_vec();
    let splits: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
    let ps = parents.clone();
    Tensor::from_op(out, parents, Box::new(move |g| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut start = 0;
        for (p, &c) in ps.iter().zip(&splits) {
            let slice = g3.slice(ndarray::s![start..start + c, .., ..]).to_owned();
            p.accumulate_grad(&slice.into_dyn());
            start += c;
        }
    }))
}

/// Reshape row-major tokens [h*w, c] into a [c, h, w] map.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Tensor {
    let xv = as2(x);
    let (n, c) = xv.dim();
    assert_eq!(n, h * w, "token count {n} does not factor as {h}x{w}");
    let out = xv
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .unwrap()
        .into_dyn();
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let g2 = g3
            .to_owned()
            .into_shape_with_order((c, h * w))
            .unwrap()
            .t()
            .as_standard_layout()
            .into_owned();
        px.accumulate_grad(&g2.into_dyn());
    }))
}

/// Flatten a [c, h, w] map into row-major tokens [h*w, c].
pub fn map_to_tokens(x: &Tensor) -> Tensor {
    let xv = as3(x);
    let (c, h, w) = xv.dim();
    let out = xv
        .into_shape_with_order((c, h * w))
        .unwrap()
        .t()
        .as_standard_layout()
        .into_owned()
        .into_dyn();
    if !x.requires_grad() {
        return Tensor::constant(out);
    }
    let px = x.clone();
    Tensor::from_op(out, vec![x.clone()], Box::new(move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g2
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .unwrap();
        px.accumulate_grad(&dx.into_dyn());
    }))
}

/// Mean pixel-wise cross-entropy of logits [k, h, w] against a class map.
/// The reduction runs in f64; the result is a scalar tensor. Labels must be
/// pre-validated to lie in [0, k).
pub fn cross_entropy_mean(logits: &Tensor, labels: &ndarray::Array2<u8>) -> Tensor {
    let lv = as3(logits);
    let (k, h, w) = lv.dim();
    assert_eq!((h, w), labels.dim(), "cross_entropy label size mismatch");
    let mut probs = Array3::<f32>::zeros((k, h, w));
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let label = labels[(y, x)] as usize;
            debug_assert!(label < k, "label {label} out of range at ({y},{x})");
            let mut max = f32::NEG_INFINITY;
            for c in 0..k {
                max = max.max(lv[(c, y, x)]);
            }
            let mut sum = 0.0f64;
            for c in 0..k {
                sum += ((lv[(c, y, x)] - max) as f64).exp();
            }
            let lse = max as f64 + sum.ln();
            for c in 0..k {
                probs[(c, y, x)] = ((lv[(c, y, x)] as f64 - lse).exp()) as f32;
            }
            total += lse - lv[(label, y, x)] as f64;
        }
    }
    let loss = total / (h * w) as f64;
    let out = ndarray::arr1(&[loss as f32]).into_dyn();
    if !logits.requires_grad() {
        return Tensor::constant(out);
    }
    let pl = logits.clone();
    let labels = labels.clone();
    Tensor::from_op(out, vec![logits.clone()], Box::new(move |g| {
        let g0 = g[[0]];
        let scale = g0 / (h * w) as f32;
        let mut dx = probs.clone();
        for y in 0..h {
            for x in 0..w {
                let label = labels[(y, x)] as usize;
                dx[(label, y, x)] -= 1.0;
            }
        }
        pl.accumulate_grad(&dx.mapv(|v| v * scale).into_dyn());
    }))
}

/// Sum a non-empty list of same-shaped tensors.
pub fn add_n(xs: &[Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let mut acc = xs[0].clone();
    for x in &xs[1..] {
        acc = add(&acc, x);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0f32..1.0))
    }

    /// Central finite differences against backprop for a scalar-valued
    /// function of one leaf.
    fn grad_check<F>(leaf_shape: &[usize], f: F, h: f32, tol: f32)
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let leaf = Tensor::var(rand_arr(&mut rng, leaf_shape));
        let out = f(&leaf);
        assert_eq!(out.len(), 1, "grad_check needs a scalar output");
        out.backward();
        let analytic = leaf.grad().expect("no gradient reached the leaf");
        let n = leaf.len();
        for idx in 0..n {
            let orig = leaf.data().as_slice().unwrap()[idx];
            leaf.data_mut().as_slice_mut().unwrap()[idx] = orig + h;
            let up = f(&leaf).scalar() as f64;
            leaf.data_mut().as_slice_mut().unwrap()[idx] = orig - h;
            let down = f(&leaf).scalar() as f64;
            leaf.data_mut().as_slice_mut().unwrap()[idx] = orig;
            let fd = ((up - down) / (2.0 * h as f64)) as f32;
            let bp = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(bp.abs()).max(1e-4);
            assert!(
                ((fd - bp) / denom).abs() < tol,
                "grad mismatch at {idx}: fd={fd} bp={bp}"
            );
        }
    }

    /// Collapse any tensor to a scalar through a fixed random projection so
    /// grad_check can exercise non-scalar ops.
    fn project(t: &Tensor) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let shape = t.shape();
        let flat: usize = shape.iter().product();
        let proj = Tensor::constant(rand_arr(&mut rng, &[1, flat]));
        let t2 = if shape.len() == 2 {
            t.clone()
        } else {
            // flatten through tokens: works for rank-3 [c,h,w]
            map_to_tokens(t)
        };
        let v = t2.data().len();
        let reshaped = Tensor::from_op(
            t2.data()
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((v, 1))
                .unwrap()
                .into_dyn(),
            vec![t2.clone()],
            Box::new({
                let p = t2.clone();
                let shape2 = t2.shape();
                move |g| {
                    let gflat = g.view().into_shape_with_order(IxDyn(&shape2)).unwrap().to_owned();
                    p.accumulate_grad(&gflat);
                }
            }),
        );
        matmul(&proj, &reshaped)
    }

    #[test]
    fn matmul_forward_matches_hand_case() {
        let a = Tensor::constant(arr2(&[[1.0f32, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::constant(arr2(&[[5.0f32], [6.0]]).into_dyn());
        let c = matmul(&a, &b);
        assert_eq!(*c.data(), arr2(&[[17.0f32], [39.0]]).into_dyn());
    }

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let b = Tensor::constant(rand_arr(&mut rng, &[4, 3]));
        grad_check(&[2, 4], |t| project(&matmul(t, &b)), 1e-2, 2e-2);
    }

    #[test]
    fn grad_layer_norm_inputs_and_affine() {
        let gain = Tensor::constant(arr1(&[1.1f32, 0.9, 1.3, 0.8]).into_dyn());
        let bias = Tensor::constant(arr1(&[0.1f32, -0.2, 0.0, 0.3]).into_dyn());
        grad_check(&[3, 4], |t| project(&layer_norm(t, &gain, &bias)), 1e-2, 3e-2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Tensor::constant(rand_arr(&mut rng, &[3, 4]));
        grad_check(&[4], |g| project(&layer_norm(&x, g, &bias)), 1e-2, 2e-2);
        grad_check(&[4], |b| project(&layer_norm(&x, &gain, b)), 1e-2, 2e-2);
    }

    #[test]
    fn grad_softmax() {
        grad_check(&[3, 5], |t| project(&softmax_rows(t)), 1e-2, 3e-2);
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let w = Tensor::constant(rand_arr(&mut rng, &[3, 2, 3, 3]));
        let b = Tensor::constant(rand_arr(&mut rng, &[3]));
        grad_check(&[2, 5, 5], |t| project(&conv2d(t, &w, &b, 2, 1)), 1e-2, 3e-2);
        let x = Tensor::constant(rand_arr(&mut rng, &[2, 5, 5]));
        grad_check(&[3, 2, 3, 3], |wt| project(&conv2d(&x, wt, &b, 2, 1)), 1e-2, 3e-2);
        grad_check(&[3], |bt| project(&conv2d(&x, &w, bt, 2, 1)), 1e-2, 3e-2);
    }

    #[test]
    fn grad_resize_bilinear() {
        grad_check(&[2, 3, 3], |t| project(&resize_bilinear(t, 5, 4)), 1e-2, 3e-2);
        grad_check(&[1, 4, 4], |t| project(&resize_bilinear(t, 2, 2)), 1e-2, 3e-2);
    }

    #[test]
    fn grad_abs_and_relu() {
        grad_check(&[3, 4], |t| project(&abs(t)), 1e-3, 5e-2);
        grad_check(&[3, 4], |t| project(&relu(t)), 1e-3, 5e-2);
    }

    #[test]
    fn grad_mul_and_sum_all() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let other = Tensor::constant(rand_arr(&mut rng, &[3, 4]));
        grad_check(&[3, 4], |t| sum_all(&mul(t, &other)), 1e-2, 2e-2);
        grad_check(&[2, 3, 2], sum_all, 1e-2, 2e-2);
    }

    #[test]
    fn grad_token_map_round_trip() {
        grad_check(&[6, 4], |t| project(&map_to_tokens(&tokens_to_map(t, 2, 3))), 1e-2, 2e-2);
    }

    #[test]
    fn grad_cross_entropy() {
        let labels = ndarray::arr2(&[[0u8, 1], [1, 0]]);
        grad_check(&[2, 2, 2], |t| cross_entropy_mean(t, &labels), 1e-2, 2e-2);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let logits = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 4, 4])));
        let labels = ndarray::Array2::<u8>::zeros((4, 4));
        let loss = cross_entropy_mean(&logits, &labels);
        assert!((loss.scalar() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn conv2d_matches_scalar_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = rand_arr(&mut rng, &[2, 6, 5]);
        let w = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let b = rand_arr(&mut rng, &[3]);
        let (stride, pad) = (2usize, 1usize);
        let out = conv2d(
            &Tensor::constant(x.clone()),
            &Tensor::constant(w.clone()),
            &Tensor::constant(b.clone()),
            stride,
            pad,
        );
        let x3 = x.into_dimensionality::<Ix3>().unwrap();
        let w4 = w.into_dimensionality::<ndarray::Ix4>().unwrap();
        let b1 = b.into_dimensionality::<Ix1>().unwrap();
        let (oh, ow) = (3usize, 3usize);
        let o3 = out.data().view().into_dimensionality::<Ix3>().unwrap().to_owned();
        assert_eq!(o3.dim(), (3, oh, ow));
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b1[o] as f64;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                    acc += (x3[(c, iy as usize, ix as usize)]
                                        * w4[(o, c, ky, kx)])
                                        as f64;
                                }
                            }
                        }
                    }
                    assert!((o3[(o, oy, ox)] as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }
}
