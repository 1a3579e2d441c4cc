//! Layer wrappers: thin structs holding [`ParamId`]s plus hyperparameters,
//! with `forward` methods that append graph nodes.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::init;
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;

/// Weight init scheme for conv/linear layers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, 0.02) — pix2pix GAN convention.
    Gan,
    /// He normal scaled by fan-in.
    He,
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::Gan => init::normal(rng, &shape, 0.02),
            Init::He => init::he_normal(rng, &shape, cin * k * k),
        };
        let w = ps.add(format!("{name}.weight"), w);
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        g.conv2d(x, bound.var(self.w), self.b.map(|b| bound.var(b)), self.stride, self.pad)
    }
}

pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        // transposed conv weight layout: (Cin, Cout, KH, KW)
        let shape = [cin, cout, k, k];
        let w = match init {
            Init::Gan => init::normal(rng, &shape, 0.02),
            Init::He => init::he_normal(rng, &shape, cin * k * k),
        };
        let w = ps.add(format!("{name}.weight"), w);
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, bound.var(self.w), self.b.map(|b| bound.var(b)), self.stride, self.pad)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode uses batch statistics and updates the running buffers;
    /// eval mode normalizes with the frozen buffers, keeping embeddings
    /// deterministic.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        bound: &Bound,
        x: Var,
        training: bool,
    ) -> Var {
        let gamma = bound.var(self.gamma);
        let beta = bound.var(self.beta);
        if training {
            let (out, stats) = g.batch_norm(x, gamma, beta, None, self.eps);
            let stats = stats.expect("training batch norm returns stats");
            let count = {
                let (n, _, h, w) = g.value(x).dims4();
                (n * h * w) as f64
            };
            // unbiased variance for the running buffer
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = ps.value_mut(self.running_mean).data_mut();
            for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
            let rv = ps.value_mut(self.running_var).data_mut();
            for (r, &b) in rv.iter_mut().zip(&stats.var) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b * correction;
            }
            out
        } else {
            let rm = ps.value(self.running_mean).data().to_vec();
            let rv = ps.value(self.running_var).data().to_vec();
            let (out, _) = g.batch_norm(x, gamma, beta, Some((&rm, &rv)), self.eps);
            out
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        // weight stored (din, dout) so forward is x (N,din) · w
        let bound = (1.0 / din as f64).sqrt();
        Linear {
            w: ps.add(format!("{name}.weight"), init::uniform(rng, &[din, dout], bound)),
            b: ps.add(format!("{name}.bias"), init::uniform(rng, &[dout], bound)),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let y = g.matmul(x, bound.var(self.w));
        g.add_last_dim(y, bound.var(self.b))
    }
}
