//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are appended; `backward` walks the
//! tape in reverse. Each op caches what its backward rule needs inside the
//! op variant itself. Gradients only flow into nodes created with
//! `param_leaf` (or leaves explicitly marked), so data inputs cost nothing
//! in the backward pass.

use super::conv;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Mean(Var),
    SumAll(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    MatMul(Var, Var),
    AddLastDim(Var, Var),
    SoftmaxRows(Var),
    /// `sum_i w_i * (-ln max(p[i, t_i], 1e-12))`
    CrossEntropyWeighted {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        invstd: Vec<f64>,
        training: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCh(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    GradReverse(Var),
    BroadcastScalar(Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    NetVladCore {
        assign: Var,
        locals: Var,
        centers: Var,
    },
    Reshape(Var),
    NchwToNsc(Var),
    BatchedMatMulShared(Var, Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm node.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const CLAMP_PROB: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Data leaf; gradients do not flow into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf; receives a gradient in `backward`.
    pub fn param_leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = zip2(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = zip2(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = zip2(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = map1(self.value(a), |x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = map1(self.value(a), |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = map1(self.value(a), |x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = map1(self.value(a), f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = map1(self.value(a), f64::sqrt);
        let rg = self.rg(a);
        self.push(t, Op::Sqrt(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum::<f64>());
        let rg = self.rg(a);
        self.push(t, Op::SumAll(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = map1(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let t = map1(self.value(a), |x| if x > 0.0 { x } else { alpha * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, alpha), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = map1(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = conv::matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// Broadcast-add a vector over the last dimension.
    pub fn add_last_dim(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let k = *av.shape().last().expect("add_last_dim on scalar");
        assert_eq!(bv.shape(), [k]);
        let mut data = av.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % k];
        }
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddLastDim(a, b), rg)
    }

    /// Row-wise softmax over a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = v.dims2();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &v.data()[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in data[r * n..(r + 1) * n].iter_mut().zip(row.iter()) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in &mut data[r * n..(r + 1) * n] {
                *o /= s;
            }
        }
        let t = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Weighted negative-log-likelihood over probability rows:
    /// `sum_i weights[i] * (-ln max(probs[i, targets[i]], 1e-12))`.
    /// Probabilities at or below the clamp are clamped with a logged warning.
    pub fn cross_entropy_weighted(
        &mut self,
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Var {
        let v = self.value(probs);
        let (m, n) = v.dims2();
        assert_eq!(targets.len(), m);
        assert_eq!(weights.len(), m);
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            assert!(t < n, "target class {t} out of range");
            if w == 0.0 {
                continue;
            }
            let p = v.data()[i * n + t];
            if p < CLAMP_PROB {
                log::warn!("cross-entropy probability {p:.3e} clamped to {CLAMP_PROB:.0e}");
            }
            total += w * -(p.max(CLAMP_PROB)).ln();
        }
        let rg = self.rg(probs);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropyWeighted {
                probs,
                targets,
                weights,
            },
            rg,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let t = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|bb| self.value(bb)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|bb| self.rg(bb)).unwrap_or(false);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Transposed convolution; weight layout (Cin, Cout, KH, KW).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (_, _, kh, kw) = self.value(w).dims4();
        let (_, _, h, wd) = self.value(x).dims4();
        let oh = conv::conv_transpose_out_dim(h, kh, stride, pad);
        let ow = conv::conv_transpose_out_dim(wd, kw, stride, pad);
        let mut t = conv::conv2d_grad_input(self.value(x), self.value(w), oh, ow, stride, pad);
        if let Some(bb) = b {
            let bv = self.value(bb).data().to_vec();
            let (n, co, th, tw) = t.dims4();
            let plane = th * tw;
            for i in 0..n {
                for c in 0..co {
                    let off = (i * co + c) * plane;
                    for v in &mut t.data_mut()[off..off + plane] {
                        *v += bv[c];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map(|bb| self.rg(bb)).unwrap_or(false);
        self.push(t, Op::ConvTranspose2d { x, w, b, stride, pad }, rg)
    }

    /// Batch normalization over (N,C,H,W). In training mode batch statistics
    /// are used (and returned so the caller can update running buffers); in
    /// eval mode the provided running statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let m = (n * h * w) as f64;
        let training = running.is_none();

        let (mean, var): (Vec<f64>, Vec<f64>) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ci in 0..c {
                        let off = (i * c + ci) * h * w;
                        mean[ci] += v.data()[off..off + h * w].iter().sum::<f64>();
                    }
                }
                for mu in &mut mean {
                    *mu /= m;
                }
                for i in 0..n {
                    for ci in 0..c {
                        let off = (i * c + ci) * h * w;
                        var[ci] += v.data()[off..off + h * w]
                            .iter()
                            .map(|x| (x - mean[ci]) * (x - mean[ci]))
                            .sum::<f64>();
                    }
                }
                for s in &mut var {
                    *s /= m;
                }
                (mean, var)
            }
        };

        let invstd: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; v.numel()];
        let mut out = vec![0.0; v.numel()];
        for i in 0..n {
            for ci in 0..c {
                let off = (i * c + ci) * h * w;
                for j in 0..h * w {
                    let xh = (v.data()[off + j] - mean[ci]) * invstd[ci];
                    xhat[off + j] = xh;
                    out[off + j] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let xhat = Tensor::from_vec(&[n, c, h, w], xhat);
        let t = Tensor::from_vec(&[n, c, h, w], out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd: invstd.clone(),
                training,
            },
            rg,
        );
        let stats = training.then_some(BatchStats { mean, var });
        (var_out, stats)
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (t, argmax) = conv::maxpool2d_forward(self.value(x), kernel, stride, pad);
        let rg = self.rg(x);
        self.push(t, Op::MaxPool { x, argmax }, rg)
    }

    /// Concatenate two NCHW tensors along the channel dimension.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4();
        let (nb, cb, hb, wb) = bv.dims4();
        assert!(n == nb && h == hb && w == wb, "concat spatial/batch mismatch");
        let plane = h * w;
        let mut data = Vec::with_capacity((ca + cb) * n * plane);
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let t = Tensor::from_vec(&[n, ca + cb, h, w], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::ConcatCh(a, b), rg)
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let (m, n) = v.dims2();
        assert!(start + len <= m, "slice {start}+{len} beyond {m} rows");
        let t = Tensor::from_vec(&[len, n], v.data()[start * n..(start + len) * n].to_vec());
        let rg = self.rg(x);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let rg = self.rg(x);
        self.push(t, Op::GradReverse(x), rg)
    }

    /// Fill `shape` with the value of a single-element node; gradients sum
    /// back into it.
    pub fn broadcast_scalar(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = Tensor::full(shape, self.value(x).item());
        let rg = self.rg(x);
        self.push(t, Op::BroadcastScalar(x), rg)
    }

    /// L2-normalize each row of a 2-D tensor. Rows with norm below `eps`
    /// pass through as zero rows (and receive zero gradient).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (m, n) = v.dims2();
        let mut norms = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &v.data()[r * n..(r + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm >= eps {
                for (o, &x) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = x / norm;
                }
            }
        }
        let t = Tensor::from_vec(&[m, n], data);
        let rg = self.rg(x);
        self.push(t, Op::L2NormRows { x, norms, eps }, rg)
    }

    /// Rows of the given `l2_normalize_rows` node that were below the norm
    /// guard and emitted as zero rows.
    pub fn degenerate_rows(&self, v: Var) -> Vec<usize> {
        match &self.nodes[v.0].op {
            Op::L2NormRows { norms, eps, .. } => norms
                .iter()
                .enumerate()
                .filter(|(_, &n)| n < *eps)
                .map(|(i, _)| i)
                .collect(),
            _ => panic!("degenerate_rows on non-normalization node"),
        }
    }

    /// VLAD accumulation: assign (N,S,K), locals (N,S,C), centers (K,C)
    /// -> (N,K,C) with `V[n,k,:] = sum_s assign[n,s,k] * (locals[n,s,:] - centers[k,:])`.
    pub fn netvlad_core(&mut self, assign: Var, locals: Var, centers: Var) -> Var {
        let av = self.value(assign);
        let lv = self.value(locals);
        let cv = self.value(centers);
        let (n, s, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (nl, sl, c) = (lv.shape()[0], lv.shape()[1], lv.shape()[2]);
        assert!(n == nl && s == sl, "assign/locals mismatch");
        assert_eq!(cv.shape(), [k, c]);

        let mut data = Vec::with_capacity(n * k * c);
        for i in 0..n {
            let a_blk = Tensor::from_vec(&[s, k], av.data()[i * s * k..(i + 1) * s * k].to_vec());
            let l_blk = Tensor::from_vec(&[s, c], lv.data()[i * s * c..(i + 1) * s * c].to_vec());
            // A^T X: (K, S) · (S, C)
            let mut at = vec![0.0; k * s];
            for si in 0..s {
                for ki in 0..k {
                    at[ki * s + si] = a_blk.data()[si * k + ki];
                }
            }
            let atx = conv::matmul(&Tensor::from_vec(&[k, s], at), &l_blk);
            // column sums of A
            let mut asum = vec![0.0; k];
            for si in 0..s {
                for ki in 0..k {
                    asum[ki] += a_blk.data()[si * k + ki];
                }
            }
            for ki in 0..k {
                for cj in 0..c {
                    data.push(atx.data()[ki * c + cj] - asum[ki] * cv.data()[ki * c + cj]);
                }
            }
        }
        let t = Tensor::from_vec(&[n, k, c], data);
        let rg = self.rg(assign) || self.rg(locals) || self.rg(centers);
        self.push(
            t,
            Op::NetVladCore {
                assign,
                locals,
                centers,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Permute (N,C,H,W) into per-location feature rows (N, H*W, C).
    pub fn nchw_to_nsc(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let s = h * w;
        let mut data = vec![0.0; n * s * c];
        for i in 0..n {
            for ci in 0..c {
                let src = (i * c + ci) * s;
                for si in 0..s {
                    data[(i * s + si) * c + ci] = v.data()[src + si];
                }
            }
        }
        let t = Tensor::from_vec(&[n, s, c], data);
        let rg = self.rg(x);
        self.push(t, Op::NchwToNsc(x), rg)
    }

    /// Batched matmul with a shared right-hand side: (N,S,C) · (C,K) -> (N,S,K).
    pub fn batched_matmul_shared(&mut self, a: Var, b: Var) -> Var {
        let t = conv::batched_matmul_shared(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::BatchedMatMulShared(a, b), rg)
    }

    /// Reverse pass from a scalar loss node. Existing gradients are cleared.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward from non-scalar node"
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().expect("grad just checked");
            self.apply_backward(id, &g);
        }
    }

    fn accum(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, id: usize, g: &Tensor) {
        // Ops are matched by value where cheap; tensors are cloned out of the
        // node to satisfy the borrow checker, which is fine at these sizes.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, map1(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let d = zip2(g, &self.nodes[b.0].value, |x, y| x * y);
                    self.accum(a, d);
                }
                if self.rg(b) {
                    let d = zip2(g, &self.nodes[a.0].value, |x, y| x * y);
                    self.accum(b, d);
                }
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accum(a, g.clone());
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                self.accum(a, map1(g, |x| x * s));
            }
            Op::Square(a) => {
                let a = *a;
                let d = zip2(g, &self.nodes[a.0].value, |gv, x| gv * 2.0 * x);
                self.accum(a, d);
            }
            Op::Abs(a) => {
                let a = *a;
                let d = zip2(g, &self.nodes[a.0].value, |gv, x| {
                    gv * if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(a, d);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let d = zip2(g, &self.nodes[id].value, |gv, y| gv * 0.5 / y.max(1e-12));
                self.accum(a, d);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.numel() as f64;
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(a, Tensor::full(&shape, g.item() / n));
            }
            Op::SumAll(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(a, Tensor::full(&shape, g.item()));
            }
            Op::Relu(a) => {
                let a = *a;
                let d = zip2(g, &self.nodes[a.0].value, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accum(a, d);
            }
            Op::LeakyRelu(a, alpha) => {
                let (a, alpha) = (*a, *alpha);
                let d = zip2(g, &self.nodes[a.0].value, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else {
                        gv * alpha
                    }
                });
                self.accum(a, d);
            }
            Op::Tanh(a) => {
                let a = *a;
                let d = zip2(g, &self.nodes[id].value, |gv, y| gv * (1.0 - y * y));
                self.accum(a, d);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) =
                    conv::matmul_backward(&self.nodes[a.0].value, &self.nodes[b.0].value, g);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::AddLastDim(a, b) => {
                let (a, b) = (*a, *b);
                let k = self.nodes[b.0].value.numel();
                self.accum(a, g.clone());
                if self.rg(b) {
                    let mut db = vec![0.0; k];
                    for (i, gv) in g.data().iter().enumerate() {
                        db[i % k] += gv;
                    }
                    self.accum(b, Tensor::from_vec(&[k], db));
                }
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let (m, n) = y.dims2();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(a, Tensor::from_vec(&[m, n], d));
            }
            Op::CrossEntropyWeighted {
                probs,
                targets,
                weights,
            } => {
                let probs = *probs;
                let targets = targets.clone();
                let weights = weights.clone();
                let v = &self.nodes[probs.0].value;
                let (m, n) = v.dims2();
                let gscalar = g.item();
                let mut d = vec![0.0; m * n];
                for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let p = v.data()[i * n + t];
                    // below the clamp the loss is constant, so the gradient is zero
                    if p >= CLAMP_PROB {
                        d[i * n + t] = -w * gscalar / p;
                    }
                }
                self.accum(probs, Tensor::from_vec(&[m, n], d));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (_, _, kh, kw) = self.nodes[w.0].value.dims4();
                let (_, _, h, wd) = self.nodes[x.0].value.dims4();
                if self.rg(x) {
                    let dx =
                        conv::conv2d_grad_input(g, &self.nodes[w.0].value, h, wd, stride, pad);
                    self.accum(x, dx);
                }
                if self.rg(w) {
                    let dw =
                        conv::conv2d_grad_weight(&self.nodes[x.0].value, g, kh, kw, stride, pad);
                    self.accum(w, dw);
                }
                if let Some(bb) = b {
                    if self.rg(bb) {
                        self.accum(bb, conv::conv2d_grad_bias(g));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (_, _, kh, kw) = self.nodes[w.0].value.dims4();
                if self.rg(x) {
                    let dx = conv::conv2d_forward(g, &self.nodes[w.0].value, None, stride, pad);
                    self.accum(x, dx);
                }
                if self.rg(w) {
                    let dw = conv::conv_transpose2d_grad_weight(
                        g,
                        &self.nodes[x.0].value,
                        kh,
                        kw,
                        stride,
                        pad,
                    );
                    self.accum(w, dw);
                }
                if let Some(bb) = b {
                    if self.rg(bb) {
                        self.accum(bb, conv::conv2d_grad_bias(g));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                training,
            } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let xhat = xhat.clone();
                let invstd = invstd.clone();
                let (n, c, h, w) = xhat.dims4();
                let m = (n * h * w) as f64;
                let gv = self.nodes[gamma.0].value.data().to_vec();

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for i in 0..n {
                    for ci in 0..c {
                        let off = (i * c + ci) * h * w;
                        for j in 0..h * w {
                            let gg = g.data()[off + j];
                            let xh = xhat.data()[off + j];
                            dgamma[ci] += gg * xh;
                            dbeta[ci] += gg;
                            let dxh = gg * gv[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xh;
                        }
                    }
                }
                if self.rg(x) {
                    let mut dx = vec![0.0; xhat.numel()];
                    for i in 0..n {
                        for ci in 0..c {
                            let off = (i * c + ci) * h * w;
                            for j in 0..h * w {
                                let dxh = g.data()[off + j] * gv[ci];
                                dx[off + j] = if training {
                                    invstd[ci] / m
                                        * (m * dxh
                                            - sum_dxhat[ci]
                                            - xhat.data()[off + j] * sum_dxhat_xhat[ci])
                                } else {
                                    dxh * invstd[ci]
                                };
                            }
                        }
                    }
                    self.accum(x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                self.accum(gamma, Tensor::from_vec(&[c], dgamma));
                self.accum(beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let shape = self.nodes[x.0].value.shape().to_vec();
                let dx = conv::maxpool2d_backward(g, &argmax, &shape);
                self.accum(x, dx);
            }
            Op::ConcatCh(a, b) => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.nodes[a.0].value.dims4();
                let (_, cb, _, _) = self.nodes[b.0].value.dims4();
                let plane = h * w;
                let mut da = vec![0.0; n * ca * plane];
                let mut db = vec![0.0; n * cb * plane];
                for i in 0..n {
                    let src = i * (ca + cb) * plane;
                    da[i * ca * plane..(i + 1) * ca * plane]
                        .copy_from_slice(&g.data()[src..src + ca * plane]);
                    db[i * cb * plane..(i + 1) * cb * plane]
                        .copy_from_slice(&g.data()[src + ca * plane..src + (ca + cb) * plane]);
                }
                self.accum(a, Tensor::from_vec(&[n, ca, h, w], da));
                self.accum(b, Tensor::from_vec(&[n, cb, h, w], db));
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let (m, n) = self.nodes[x.0].value.dims2();
                let (len, _) = g.dims2();
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                self.accum(x, Tensor::from_vec(&[m, n], dx));
            }
            Op::GradReverse(a) => {
                let a = *a;
                self.accum(a, map1(g, |x| -x));
            }
            Op::BroadcastScalar(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(a, Tensor::from_vec(&shape, vec![g.data().iter().sum::<f64>()]));
            }
            Op::L2NormRows { x, norms, eps } => {
                let (x, eps) = (*x, *eps);
                let norms = norms.clone();
                let y = &self.nodes[id].value;
                let (m, n) = y.dims2();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    if norms[r] < eps {
                        continue;
                    }
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accum(x, Tensor::from_vec(&[m, n], dx));
            }
            Op::NetVladCore {
                assign,
                locals,
                centers,
            } => {
                let (assign, locals, centers) = (*assign, *locals, *centers);
                let av = self.nodes[assign.0].value.clone();
                let lv = self.nodes[locals.0].value.clone();
                let cv = self.nodes[centers.0].value.clone();
                let (n, s, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let c = lv.shape()[2];

                let mut da = vec![0.0; n * s * k];
                let mut dl = vec![0.0; n * s * c];
                let mut dc = vec![0.0; k * c];
                for i in 0..n {
                    let g_blk = &g.data()[i * k * c..(i + 1) * k * c]; // (K, C)
                    let a_blk = &av.data()[i * s * k..(i + 1) * s * k]; // (S, K)
                    let l_blk = &lv.data()[i * s * c..(i + 1) * s * c]; // (S, C)

                    // q[k] = sum_c dV[k,c] * centers[k,c]
                    let mut q = vec![0.0; k];
                    for ki in 0..k {
                        for cj in 0..c {
                            q[ki] += g_blk[ki * c + cj] * cv.data()[ki * c + cj];
                        }
                    }
                    // dA[s,k] = sum_c dV[k,c]*X[s,c] - q[k]
                    let xg = conv::matmul(
                        &Tensor::from_vec(&[s, c], l_blk.to_vec()),
                        &transpose2(g_blk, k, c),
                    );
                    for si in 0..s {
                        for ki in 0..k {
                            da[(i * s + si) * k + ki] = xg.data()[si * k + ki] - q[ki];
                        }
                    }
                    // dX[s,c] = sum_k A[s,k]*dV[k,c]
                    let ag = conv::matmul(
                        &Tensor::from_vec(&[s, k], a_blk.to_vec()),
                        &Tensor::from_vec(&[k, c], g_blk.to_vec()),
                    );
                    dl[i * s * c..(i + 1) * s * c].copy_from_slice(ag.data());
                    // dC[k,c] -= (sum_s A[s,k]) * dV[k,c]
                    let mut asum = vec![0.0; k];
                    for si in 0..s {
                        for ki in 0..k {
                            asum[ki] += a_blk[si * k + ki];
                        }
                    }
                    for ki in 0..k {
                        for cj in 0..c {
                            dc[ki * c + cj] -= asum[ki] * g_blk[ki * c + cj];
                        }
                    }
                }
                self.accum(assign, Tensor::from_vec(&[n, s, k], da));
                self.accum(locals, Tensor::from_vec(&[n, s, c], dl));
                self.accum(centers, Tensor::from_vec(&[k, c], dc));
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(a, Tensor::from_vec(&shape, g.data().to_vec()));
            }
            Op::NchwToNsc(a) => {
                let a = *a;
                let (n, c, h, w) = self.nodes[a.0].value.dims4();
                let s = h * w;
                let mut dx = vec![0.0; n * c * s];
                for i in 0..n {
                    for ci in 0..c {
                        let dst = (i * c + ci) * s;
                        for si in 0..s {
                            dx[dst + si] = g.data()[(i * s + si) * c + ci];
                        }
                    }
                }
                self.accum(a, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::BatchedMatMulShared(a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = conv::batched_matmul_shared_backward(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    g,
                );
                self.accum(a, da);
                self.accum(b, db);
            }
        }
    }
}

fn map1(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn transpose2(data: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    Tensor::from_vec(&[cols, rows], out)
}
