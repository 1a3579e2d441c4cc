//! Generator and discriminator networks.
//!
//! The generator is a U-Net: stride-2 4x4 conv encoder, transposed-conv
//! decoder with skip concatenation, tanh output in [-1, 1], no dropout
//! anywhere so outputs are deterministic. The discriminator is a patch
//! classifier over the channel-concatenated (thermal, satellite) pair,
//! emitting an unbounded score grid smaller than its input (no sigmoid;
//! least-squares objective).

use rand_chacha::ChaCha8Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Init};
use crate::nn::params::{Bound, ParamStore};

fn width_at(base: usize, level: usize) -> usize {
    base * (1 << level.min(3))
}

struct DownBlock {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

struct UpBlock {
    conv: ConvTranspose2d,
    norm: Option<BatchNorm2d>,
}

pub struct UNet {
    downs: Vec<DownBlock>,
    ups: Vec<UpBlock>,
}

impl UNet {
    /// `depth` stride-2 stages; spatial size must be divisible by 2^depth.
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        base_width: usize,
    ) -> Self {
        assert!(depth >= 2, "u-net needs at least two stages");
        let mut downs = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { in_channels } else { width_at(base_width, i - 1) };
            let cout = width_at(base_width, i);
            let name = format!("{prefix}.down{i}");
            let conv = Conv2d::new(ps, rng, &name, cin, cout, 4, 2, 1, true, Init::Gan);
            // outermost and innermost stages run without normalization
            let norm = (i != 0 && i != depth - 1)
                .then(|| BatchNorm2d::new(ps, &format!("{name}.bn"), cout));
            downs.push(DownBlock { conv, norm });
        }
        let mut ups = Vec::with_capacity(depth);
        for i in 0..depth {
            // decoder level i consumes the innermost feature (i = 0) or the
            // concat of the previous decoder output with the skip connection
            let level = depth - 1 - i; // encoder level being reconstructed
            let cin = if i == 0 {
                width_at(base_width, depth - 1)
            } else {
                2 * width_at(base_width, level)
            };
            let cout = if level == 0 { out_channels } else { width_at(base_width, level - 1) };
            let name = format!("{prefix}.up{i}");
            let conv = ConvTranspose2d::new(ps, rng, &name, cin, cout, 4, 2, 1, true, Init::Gan);
            let norm =
                (level != 0).then(|| BatchNorm2d::new(ps, &format!("{name}.bn"), cout));
            ups.push(UpBlock { conv, norm });
        }
        UNet { downs, ups }
    }

    /// Input (N, in_channels, H, W) in [-1, 1]; output (N, out_channels, H, W)
    /// in [-1, 1] via tanh.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        bound: &Bound,
        x: Var,
        training: bool,
    ) -> Var {
        let mut skips: Vec<Var> = Vec::with_capacity(self.downs.len());
        let mut h = x;
        for (i, block) in self.downs.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, 0.2);
            }
            h = block.conv.forward(g, bound, h);
            if let Some(norm) = &block.norm {
                h = norm.forward(g, ps, bound, h, training);
            }
            skips.push(h);
        }
        for (i, block) in self.ups.iter().enumerate() {
            let level = self.ups.len() - 1 - i;
            h = g.relu(h);
            h = block.conv.forward(g, bound, h);
            if let Some(norm) = &block.norm {
                h = norm.forward(g, ps, bound, h, training);
            }
            if level > 0 {
                h = g.concat_channels(h, skips[level - 1]);
            }
        }
        g.tanh(h)
    }
}

struct DiscLayer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

pub struct PatchDiscriminator {
    layers: Vec<DiscLayer>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        n_layers: usize,
        base_width: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for i in 0..n_layers {
            let cout = width_at(base_width, i);
            let name = format!("{prefix}.layer{i}");
            let conv = Conv2d::new(ps, rng, &name, cin, cout, 4, 2, 1, true, Init::Gan);
            let norm = (i != 0).then(|| BatchNorm2d::new(ps, &format!("{name}.bn"), cout));
            layers.push(DiscLayer { conv, norm });
            cin = cout;
        }
        // stride-1 head produces the patch score grid, smaller than the input
        let head = Conv2d::new(ps, rng, &format!("{prefix}.head"), cin, 1, 4, 1, 1, true, Init::Gan);
        PatchDiscriminator { layers, head }
    }

    /// Conditional scores for (thermal, satellite): channel-concatenate and
    /// classify patches. Output is an unbounded (N, 1, h', w') grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        bound: &Bound,
        thermal: Var,
        satellite: Var,
        training: bool,
    ) -> Var {
        let mut h = g.concat_channels(thermal, satellite);
        for block in &self.layers {
            h = block.conv.forward(g, bound, h);
            if let Some(norm) = &block.norm {
                h = norm.forward(g, ps, bound, h, training);
            }
            h = g.leaky_relu(h, 0.2);
        }
        self.head.forward(g, bound, h)
    }
}
