//! Convolution, pooling and resampling kernels with hand-derived adjoints.
//!
//! Parallel sections are deterministic by construction: forward passes and
//! input gradients parallelize over disjoint output rows, and weight
//! gradients reduce per-sample partial buffers in fixed batch order, so the
//! result is bitwise identical for any thread count.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};

/// 2-D convolution, zero padding, square kernel. Weight layout is
/// (kh, kw, c_in, c_out); bias has c_out entries.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let Shape { n, h, w, c } = input.shape;
    let (kh, kw, cin, cout) = weight_dims(weight);
    assert!(stride >= 1, "conv stride must be positive");
    assert_eq!(kh, kw, "conv kernel must be square, got {kh}x{kw}");
    assert_eq!(
        cin, c,
        "conv weight expects {cin} input channels, input has {c}"
    );
    assert_eq!(bias.len(), cout, "conv bias length must equal output channels");
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw,
        "conv kernel {kh}x{kw} larger than padded input {}x{}",
        h + 2 * pad,
        w + 2 * pad
    );

    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let out_shape = Shape::new(n, oh, ow, cout);
    let mut out = vec![T::zero(); out_shape.len()];

    out.par_chunks_mut(ow * cout).enumerate().for_each(|(row, chunk)| {
        let b = row / oh;
        let oy = row % oh;
        for ox in 0..ow {
            let acc = &mut chunk[ox * cout..(ox + 1) * cout];
            acc.copy_from_slice(&bias.data);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = input.shape.idx(b, iy as usize, ix as usize, 0);
                    let w_base = ((ky * kw + kx) * cin) * cout;
                    for ic in 0..cin {
                        let v = input.data[in_base + ic];
                        let wrow = &weight.data[w_base + ic * cout..w_base + (ic + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + v * wv;
                        }
                    }
                }
            }
        }
    });

    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let Shape { n, h, w, c } = input.shape;
    let (kh, kw, cin, cout) = weight_dims(weight);
    let Shape { h: oh, w: ow, .. } = d_out.shape;

    // d_input: gather over the output positions each input pixel fed.
    let mut d_input = vec![T::zero(); input.shape.len()];
    d_input.par_chunks_mut(w * c).enumerate().for_each(|(row, chunk)| {
        let b = row / h;
        let iy = row % h;
        for ky in 0..kh {
            let oy_num = iy as isize + pad as isize - ky as isize;
            if oy_num < 0 || oy_num % stride as isize != 0 {
                continue;
            }
            let oy = (oy_num / stride as isize) as usize;
            if oy >= oh {
                continue;
            }
            for ix in 0..w {
                for kx in 0..kw {
                    let ox_num = ix as isize + pad as isize - kx as isize;
                    if ox_num < 0 || ox_num % stride as isize != 0 {
                        continue;
                    }
                    let ox = (ox_num / stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let g_base = d_out.shape.idx(b, oy, ox, 0);
                    let w_base = ((ky * kw + kx) * cin) * cout;
                    for ic in 0..cin {
                        let wrow = &weight.data[w_base + ic * cout..w_base + (ic + 1) * cout];
                        let mut acc = T::zero();
                        for (oc, &wv) in wrow.iter().enumerate() {
                            acc = acc + d_out.data[g_base + oc] * wv;
                        }
                        chunk[ix * c + ic] = chunk[ix * c + ic] + acc;
                    }
                }
            }
        }
    });

    // d_weight / d_bias: per-sample partials reduced in batch order.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut dw = vec![T::zero(); weight.len()];
            let mut db = vec![T::zero(); cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g_base = d_out.shape.idx(b, oy, ox, 0);
                    let g = &d_out.data[g_base..g_base + cout];
                    for (oc, &gv) in g.iter().enumerate() {
                        db[oc] = db[oc] + gv;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_base = input.shape.idx(b, iy as usize, ix as usize, 0);
                            let w_base = ((ky * kw + kx) * cin) * cout;
                            for ic in 0..cin {
                                let v = input.data[in_base + ic];
                                let drow =
                                    &mut dw[w_base + ic * cout..w_base + (ic + 1) * cout];
                                for (d, &gv) in drow.iter_mut().zip(g) {
                                    *d = *d + v * gv;
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![T::zero(); cout];
    for (dw, db) in &partials {
        for (a, &v) in d_weight.iter_mut().zip(dw) {
            *a = *a + v;
        }
        for (a, &v) in d_bias.iter_mut().zip(db) {
            *a = *a + v;
        }
    }

    (
        Tensor::new(input.shape, d_input),
        Tensor::new(weight.shape, d_weight),
        d_bias,
    )
}

/// Transposed convolution: the adjoint of a no-padding strided [`conv2d`]
/// that shares the same (kh, kw, c_out, c_in) weight. Input carries `c_in`
/// channels (the conv's output side), output carries `c_out` and grows to
/// (h-1)*stride + kh spatially. With a 2x2 kernel and stride 2 this doubles
/// the spatial size exactly.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let Shape { n, h, w, c } = input.shape;
    let (kh, kw, tc, sc) = weight_dims(weight);
    assert!(stride >= 1, "transposed conv stride must be positive");
    assert_eq!(
        sc, c,
        "transposed conv weight expects {sc} source channels, input has {c}"
    );
    assert_eq!(bias.len(), tc, "transposed conv bias length must equal output channels");

    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let out_shape = Shape::new(n, oh, ow, tc);
    let mut out = vec![T::zero(); out_shape.len()];

    out.par_chunks_mut(ow * tc).enumerate().for_each(|(row, chunk)| {
        let b = row / oh;
        let iy = row % oh;
        for ox in 0..ow {
            let acc = &mut chunk[ox * tc..(ox + 1) * tc];
            acc.copy_from_slice(&bias.data);
            for ky in 0..kh {
                if iy < ky || (iy - ky) % stride != 0 {
                    continue;
                }
                let sy = (iy - ky) / stride;
                if sy >= h {
                    continue;
                }
                for kx in 0..kw {
                    if ox < kx || (ox - kx) % stride != 0 {
                        continue;
                    }
                    let sx = (ox - kx) / stride;
                    if sx >= w {
                        continue;
                    }
                    let in_base = input.shape.idx(b, sy, sx, 0);
                    let w_base = ((ky * kw + kx) * tc) * sc;
                    for (t, a) in acc.iter_mut().enumerate() {
                        let wrow = &weight.data[w_base + t * sc..w_base + (t + 1) * sc];
                        let mut dot = T::zero();
                        for (s, &wv) in wrow.iter().enumerate() {
                            dot = dot + input.data[in_base + s] * wv;
                        }
                        *a = *a + dot;
                    }
                }
            }
        }
    });

    Tensor::new(out_shape, out)
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, weight and bias.
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let Shape { n, h, w, c } = input.shape;
    let (kh, kw, tc, _sc) = weight_dims(weight);

    // d_input is a plain strided convolution of d_out with the same weight.
    let mut d_input = vec![T::zero(); input.shape.len()];
    d_input.par_chunks_mut(w * c).enumerate().for_each(|(row, chunk)| {
        let b = row / h;
        let sy = row % h;
        for sx in 0..w {
            let acc = &mut chunk[sx * c..(sx + 1) * c];
            for ky in 0..kh {
                let iy = sy * stride + ky;
                for kx in 0..kw {
                    let ix = sx * stride + kx;
                    let g_base = d_out.shape.idx(b, iy, ix, 0);
                    let w_base = ((ky * kw + kx) * tc) * c;
                    for (t, wrow) in weight.data[w_base..w_base + tc * c].chunks(c).enumerate() {
                        let gv = d_out.data[g_base + t];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + gv * wv;
                        }
                    }
                }
            }
        }
    });

    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut dw = vec![T::zero(); weight.len()];
            let mut db = vec![T::zero(); tc];
            for sy in 0..h {
                for sx in 0..w {
                    let in_base = input.shape.idx(b, sy, sx, 0);
                    for ky in 0..kh {
                        let iy = sy * stride + ky;
                        for kx in 0..kw {
                            let ix = sx * stride + kx;
                            let g_base = d_out.shape.idx(b, iy, ix, 0);
                            let w_base = ((ky * kw + kx) * tc) * c;
                            for t in 0..tc {
                                let gv = d_out.data[g_base + t];
                                let drow = &mut dw[w_base + t * c..w_base + (t + 1) * c];
                                for (d, &iv) in
                                    drow.iter_mut().zip(&input.data[in_base..in_base + c])
                                {
                                    *d = *d + gv * iv;
                                }
                            }
                        }
                    }
                }
            }
            let Shape { h: oh, w: ow, .. } = d_out.shape;
            for iy in 0..oh {
                for ix in 0..ow {
                    let g_base = d_out.shape.idx(b, iy, ix, 0);
                    for t in 0..tc {
                        db[t] = db[t] + d_out.data[g_base + t];
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut d_weight = vec![T::zero(); weight.len()];
    let mut d_bias = vec![T::zero(); tc];
    for (dw, db) in &partials {
        for (a, &v) in d_weight.iter_mut().zip(dw) {
            *a = *a + v;
        }
        for (a, &v) in d_bias.iter_mut().zip(db) {
            *a = *a + v;
        }
    }

    (
        Tensor::new(input.shape, d_input),
        Tensor::new(weight.shape, d_weight),
        d_bias,
    )
}

/// k-by-k mean pooling. Sizes that do not divide by k are replicate-padded
/// on the bottom/right, so the output is always ceil(h/k) x ceil(w/k).
pub fn avg_pool<T: Scalar>(input: &Tensor<T>, k: usize) -> Tensor<T> {
    assert!(k >= 1, "pool size must be positive");
    let Shape { n, h, w, c } = input.shape;
    let oh = h.div_ceil(k);
    let ow = w.div_ceil(k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = Tensor::zeros(Shape::new(n, oh, ow, c));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut sum = T::zero();
                    for ky in 0..k {
                        let iy = (oy * k + ky).min(h - 1);
                        for kx in 0..k {
                            let ix = (ox * k + kx).min(w - 1);
                            sum = sum + input.at(b, iy, ix, ch);
                        }
                    }
                    out.set(b, oy, ox, ch, sum * inv);
                }
            }
        }
    }
    out
}

/// Gradient of [`avg_pool`]: each output cell spreads g/k^2 back onto the
/// block it averaged; replicated border pixels accumulate their extra share.
pub fn avg_pool_backward<T: Scalar>(
    input_shape: Shape,
    k: usize,
    d_out: &Tensor<T>,
) -> Tensor<T> {
    let Shape { n, h, w, c } = input_shape;
    let Shape { h: oh, w: ow, .. } = d_out.shape;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut d_input = Tensor::zeros(input_shape);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let g = d_out.at(b, oy, ox, ch) * inv;
                    for ky in 0..k {
                        let iy = (oy * k + ky).min(h - 1);
                        for kx in 0..k {
                            let ix = (ox * k + kx).min(w - 1);
                            let i = input_shape.idx(b, iy, ix, ch);
                            d_input.data[i] = d_input.data[i] + g;
                        }
                    }
                }
            }
        }
    }
    d_input
}

#[inline]
fn leaky<T: Scalar>(v: T, slope: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * slope
    }
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| leaky(v, slope))
}

pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, slope: T, d_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data
        .iter()
        .zip(&d_out.data)
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * slope })
        .collect();
    Tensor::new(input.shape, data)
}

/// Bilinear upsampling by an integer factor using half-pixel sample centers,
/// clamped at the borders. Constant maps stay exactly constant because the
/// four tap weights always sum to one.
pub fn upsample_bilinear<T: Scalar>(input: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert!(factor >= 1, "upsample factor must be positive");
    let Shape { n, h, w, c } = input.shape;
    let oh = h * factor;
    let ow = w * factor;
    let mut out = Tensor::zeros(Shape::new(n, oh, ow, c));
    for b in 0..n {
        for oy in 0..oh {
            let (y0, y1, wy) = tap::<T>(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, wx) = tap::<T>(ox, factor, w);
                for ch in 0..c {
                    let one = T::one();
                    let v = input.at(b, y0, x0, ch) * (one - wy) * (one - wx)
                        + input.at(b, y0, x1, ch) * (one - wy) * wx
                        + input.at(b, y1, x0, ch) * wy * (one - wx)
                        + input.at(b, y1, x1, ch) * wy * wx;
                    out.set(b, oy, ox, ch, v);
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(
    input_shape: Shape,
    factor: usize,
    d_out: &Tensor<T>,
) -> Tensor<T> {
    let Shape { n, h, w, c } = input_shape;
    let Shape { h: oh, w: ow, .. } = d_out.shape;
    let mut d_input = Tensor::zeros(input_shape);
    for b in 0..n {
        for oy in 0..oh {
            let (y0, y1, wy) = tap::<T>(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, wx) = tap::<T>(ox, factor, w);
                for ch in 0..c {
                    let one = T::one();
                    let g = d_out.at(b, oy, ox, ch);
                    for (iy, ix, wgt) in [
                        (y0, x0, (one - wy) * (one - wx)),
                        (y0, x1, (one - wy) * wx),
                        (y1, x0, wy * (one - wx)),
                        (y1, x1, wy * wx),
                    ] {
                        let i = input_shape.idx(b, iy, ix, ch);
                        d_input.data[i] = d_input.data[i] + g * wgt;
                    }
                }
            }
        }
    }
    d_input
}

/// Source taps and blend weight for one output coordinate under the
/// half-pixel-center convention.
#[inline]
fn tap<T: Scalar>(o: usize, factor: usize, size: usize) -> (usize, usize, T) {
    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.clamp(0.0, (size - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, T::from_f64(src - lo as f64).unwrap())
}

fn weight_dims<T: Scalar>(weight: &Tensor<T>) -> (usize, usize, usize, usize) {
    let Shape { n, h, w, c } = weight.shape;
    (n, h, w, c)
}
