//! im2col/GEMM convolution kernels shared by the forward and backward passes
//! of `Conv2d` and `ConvTranspose2d`.
//!
//! The three primitives (forward, grad-input, grad-weight) are adjoint to one
//! another, so transposed convolution reuses them with the roles swapped.
//! Images inside a batch are independent and processed in parallel; results
//! are written to disjoint slices, keeping the output deterministic.

use ndarray::ArrayView2;
use rayon::prelude::*;

use super::tensor::Tensor;

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Lower one image (C,H,W) into a patch matrix (OH*OW, C*KH*KW).
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let k = c * kh * kw;
    let mut cols = vec![0.0; oh * ow * k];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * k;
            for ci in 0..c {
                let plane = ci * h * w;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = plane + iy as usize * w;
                    let dst = row + (ci * kh + ky) * kw;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst + kx] = img[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back into an image (C,H,W). Adjoint of `im2col`.
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let k = c * kh * kw;
    let mut img = vec![0.0; c * h * w];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * k;
            for ci in 0..c {
                let plane = ci * h * w;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = plane + iy as usize * w;
                    let src = row + (ci * kh + ky) * kw;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[dst_row + ix as usize] += cols[src + kx];
                    }
                }
            }
        }
    }
    img
}

fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    av.dot(&bv).into_raw_vec_and_offset().0
}

/// `a (m,k) · b^T` where `b` is (n,k).
fn gemm_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((n, k), b).expect("rhs shape");
    let out = av.dot(&bv.t());
    out.into_raw_vec_and_offset().0
}

/// `a^T (k,m) · b (k,n)` giving (m,n), where `a` is stored (k,m).
fn gemm_at(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let av = ArrayView2::from_shape((k, m), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let out = av.t().dot(&bv);
    out.into_raw_vec_and_offset().0
}

/// Convolution forward: x (N,Ci,H,W), w (Co,Ci,KH,KW) -> (N,Co,OH,OW).
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (co, wci, kh, kw) = w.dims4();
    assert_eq!(ci, wci, "input channels {ci} != weight channels {wci}");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let k = ci * kh * kw;
    let img_len = ci * h * wd;
    let out_len = co * oh * ow;

    let outs: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = &x.data()[i * img_len..(i + 1) * img_len];
            let cols = im2col(img, ci, h, wd, kh, kw, stride, pad, oh, ow);
            // (OH*OW, K) · (Co, K)^T -> (OH*OW, Co)
            let prod = gemm_bt(&cols, oh * ow, k, w.data(), co);
            // transpose to planar (Co, OH, OW) and add bias
            let mut out = vec![0.0; out_len];
            for r in 0..oh * ow {
                for c in 0..co {
                    out[c * oh * ow + r] = prod[r * co + c];
                }
            }
            if let Some(b) = bias {
                for c in 0..co {
                    let bv = b.data()[c];
                    for v in &mut out[c * oh * ow..(c + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
            out
        })
        .collect();

    let mut data = Vec::with_capacity(n * out_len);
    for o in outs {
        data.extend_from_slice(&o);
    }
    Tensor::from_vec(&[n, co, oh, ow], data)
}

/// Gradient of the convolution output w.r.t. its input.
/// dy (N,Co,OH,OW), w (Co,Ci,KH,KW) -> (N,Ci,H,W).
pub fn conv2d_grad_input(
    dy: &Tensor,
    w: &Tensor,
    h: usize,
    wd: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, co, oh, ow) = dy.dims4();
    let (wco, ci, kh, kw) = w.dims4();
    assert_eq!(co, wco, "grad channels {co} != weight out-channels {wco}");
    let k = ci * kh * kw;
    let dy_len = co * oh * ow;
    let img_len = ci * h * wd;

    let grads: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &dy.data()[i * dy_len..(i + 1) * dy_len];
            // planar (Co, OH*OW) -> rows (OH*OW, Co)
            let mut g_rows = vec![0.0; oh * ow * co];
            for c in 0..co {
                for r in 0..oh * ow {
                    g_rows[r * co + c] = g[c * oh * ow + r];
                }
            }
            // (OH*OW, Co) · (Co, K) -> (OH*OW, K)
            let dcols = gemm(&g_rows, oh * ow, co, w.data(), k);
            col2im(&dcols, ci, h, wd, kh, kw, stride, pad, oh, ow)
        })
        .collect();

    let mut data = Vec::with_capacity(n * img_len);
    for g in grads {
        data.extend_from_slice(&g);
    }
    Tensor::from_vec(&[n, ci, h, wd], data)
}

/// Gradient of the convolution output w.r.t. the weight.
/// x (N,Ci,H,W), dy (N,Co,OH,OW) -> (Co,Ci,KH,KW).
pub fn conv2d_grad_weight(
    x: &Tensor,
    dy: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (dn, co, oh, ow) = dy.dims4();
    assert_eq!(n, dn);
    let k = ci * kh * kw;
    let img_len = ci * h * wd;
    let dy_len = co * oh * ow;

    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = &x.data()[i * img_len..(i + 1) * img_len];
            let cols = im2col(img, ci, h, wd, kh, kw, stride, pad, oh, ow);
            let g = &dy.data()[i * dy_len..(i + 1) * dy_len];
            // dy planar is (Co, OH*OW); (Co, OH*OW) · (OH*OW, K) -> (Co, K)
            gemm(g, co, oh * ow, &cols, k)
        })
        .collect();

    let mut acc = vec![0.0; co * k];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    Tensor::from_vec(&[co, ci, kh, kw], acc)
}

/// Gradient w.r.t. a per-output-channel bias: sum of dy over batch and space.
pub fn conv2d_grad_bias(dy: &Tensor) -> Tensor {
    let (n, co, oh, ow) = dy.dims4();
    let mut b = vec![0.0; co];
    let plane = oh * ow;
    for i in 0..n {
        for c in 0..co {
            let off = (i * co + c) * plane;
            b[c] += dy.data()[off..off + plane].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[co], b)
}

/// Weight gradient for a transposed convolution.
/// Adjoint bookkeeping: for `y = conv_grad_input(x; w)`, dL/dw has the
/// grad-weight structure applied to (upstream grad, x).
pub fn conv_transpose2d_grad_weight(
    upstream: &Tensor,
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    conv2d_grad_weight(upstream, x, kh, kw, stride, pad)
}

/// Max pooling forward; returns output and flat argmax indices into the input.
pub fn maxpool2d_forward(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut idx = vec![0usize; n * c * oh * ow];
    for i in 0..n {
        for ci in 0..c {
            let plane = (i * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = plane;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let p = plane + iy as usize * w + ix as usize;
                            if x.data()[p] > best {
                                best = x.data()[p];
                                best_i = p;
                            }
                        }
                    }
                    let o = ((i * c + ci) * oh + oy) * ow + ox;
                    out[o] = best;
                    idx[o] = best_i;
                }
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out), idx)
}

pub fn maxpool2d_backward(dy: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Shared-RHS batched matmul: a (N,S,C) · b (C,K) -> (N,S,K).
pub fn batched_matmul_shared(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, s, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bc, k) = b.dims2();
    assert_eq!(c, bc);
    let mut data = Vec::with_capacity(n * s * k);
    for i in 0..n {
        let block = &a.data()[i * s * c..(i + 1) * s * c];
        data.extend_from_slice(&gemm(block, s, c, b.data(), k));
    }
    Tensor::from_vec(&[n, s, k], data)
}

/// Backward of `batched_matmul_shared` w.r.t. both operands.
pub fn batched_matmul_shared_backward(
    a: &Tensor,
    b: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let (n, s, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (_, k) = b.dims2();
    let mut da = Vec::with_capacity(n * s * c);
    let mut db = vec![0.0; c * k];
    for i in 0..n {
        let g = &dy.data()[i * s * k..(i + 1) * s * k];
        let ab = &a.data()[i * s * c..(i + 1) * s * c];
        da.extend_from_slice(&gemm_bt(g, s, k, b.data(), c));
        for (acc, v) in db.iter_mut().zip(gemm_at(ab, s, c, g, k)) {
            *acc += v;
        }
    }
    (
        Tensor::from_vec(&[n, s, c], da),
        Tensor::from_vec(&[c, k], db),
    )
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (bk, n) = b.dims2();
    assert_eq!(k, bk, "matmul inner dims {k} vs {bk}");
    Tensor::from_vec(&[m, n], gemm(a.data(), m, k, b.data(), n))
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = a.dims2();
    let (_, n) = b.dims2();
    let da = gemm_bt(dy.data(), m, n, b.data(), k);
    let db = gemm_at(a.data(), m, k, dy.data(), n);
    (
        Tensor::from_vec(&[m, k], da),
        Tensor::from_vec(&[k, n], db),
    )
}
