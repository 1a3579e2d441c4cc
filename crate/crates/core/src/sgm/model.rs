//! The embedding network and domain classifier.
//!
//! One set of weights embeds both modalities: thermal tiles are replicated
//! to three channels and pass through the same extractor as satellite
//! tiles. The extractor downsamples by exactly 16; a kernel-1 convolution
//! with batch norm compresses channels to `c_target`; NetVLAD soft-assigns
//! the local features to `num_clusters` centers, accumulates residuals,
//! intra-normalizes per cluster, and L2-normalizes the flattened result
//! into a `c_final`-dimensional unit descriptor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SgmConfig, SgmError};
use crate::checkpoint::Checkpoint;
use crate::geodata::GeoTile;
use crate::imagebuf::ImageBuf;
use crate::mining::{CacheEmbedder, MiningError};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{BatchNorm2d, Conv2d, Init, Linear};
use crate::nn::params::{Bound, ParamStore};
use crate::nn::{init, Tensor};

/// Domain-classifier class indices.
pub const THERMAL_CLASS: usize = 0;
pub const SATELLITE_CLASS: usize = 1;

/// Embedding batch size used for cache refresh and index building.
const EMBED_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneKind {
    /// Four stride-2 conv/bn/relu stages; feature width is 4x base.
    Tiny { base_width: usize },
    /// ResNet-18 topology cut after the third stage (downsample 16, 256
    /// channels).
    ResNet18,
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(ps, rng, name, cin, cout, k, stride, pad, false, Init::He),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamStore, bound: &Bound, x: Var, training: bool) -> Var {
        let h = self.conv.forward(g, bound, x);
        let h = self.bn.forward(g, ps, bound, h, training);
        g.relu(h)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(ps, rng, &format!("{name}.down"), cin, cout, 1, stride, 0, false, Init::He),
                BatchNorm2d::new(ps, &format!("{name}.down.bn"), cout),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, Init::He),
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, Init::He),
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), cout),
            downsample,
        }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamStore, bound: &Bound, x: Var, training: bool) -> Var {
        let h = self.conv1.forward(g, bound, x);
        let h = self.bn1.forward(g, ps, bound, h, training);
        let h = g.relu(h);
        let h = self.conv2.forward(g, bound, h);
        let h = self.bn2.forward(g, ps, bound, h, training);
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, bound, x);
                bn.forward(g, ps, bound, s, training)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

enum Backbone {
    Tiny(Vec<ConvBnRelu>),
    ResNet18 {
        stem: ConvBnRelu,
        blocks: Vec<BasicBlock>,
    },
}

impl Backbone {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, kind: BackboneKind) -> (Self, usize) {
        match kind {
            BackboneKind::Tiny { base_width } => {
                let widths = [base_width, base_width * 2, base_width * 4, base_width * 4];
                let mut layers = Vec::new();
                let mut cin = 3;
                for (i, &w) in widths.iter().enumerate() {
                    layers.push(ConvBnRelu::new(ps, rng, &format!("f.stage{i}"), cin, w, 3, 2, 1));
                    cin = w;
                }
                (Backbone::Tiny(layers), cin)
            }
            BackboneKind::ResNet18 => {
                let stem = ConvBnRelu::new(ps, rng, "f.stem", 3, 64, 7, 2, 3);
                let mut blocks = Vec::new();
                let plan = [(64, 64, 1), (64, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1)];
                for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
                    blocks.push(BasicBlock::new(ps, rng, &format!("f.block{i}"), cin, cout, stride));
                }
                (Backbone::ResNet18 { stem, blocks }, 256)
            }
        }
    }

    fn forward(&self, g: &mut Graph, ps: &mut ParamStore, bound: &Bound, x: Var, training: bool) -> Var {
        match self {
            Backbone::Tiny(layers) => {
                let mut h = x;
                for layer in layers {
                    h = layer.forward(g, ps, bound, h, training);
                }
                h
            }
            Backbone::ResNet18 { stem, blocks } => {
                let mut h = stem.forward(g, ps, bound, x, training);
                h = g.maxpool2d(h, 3, 2, 1);
                for block in blocks {
                    h = block.forward(g, ps, bound, h, training);
                }
                h
            }
        }
    }
}

pub struct EmbeddingModel {
    pub config: SgmConfig,
    pub store: ParamStore,
    backbone: Backbone,
    compress: Conv2d,
    compress_bn: BatchNorm2d,
    assign_w: crate::nn::ParamId,
    assign_b: crate::nn::ParamId,
    centers: crate::nn::ParamId,
    domain_fc1: Linear,
    domain_fc2: Linear,
}

/// Graph handles produced by one embedding forward pass.
pub struct EmbedVars {
    /// (N, c_final) unit-norm descriptor rows.
    pub descriptors: Var,
    /// (N*K, c_target) intra-normalized VLAD rows, for degeneracy checks.
    pub intra: Var,
}

impl EmbeddingModel {
    pub fn new(config: &SgmConfig) -> Result<Self, SgmError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (backbone, c_prime) = Backbone::new(&mut store, &mut rng, config.backbone);
        let compress = Conv2d::new(&mut store, &mut rng, "fc.conv", c_prime, config.c_target, 1, 1, 0, false, Init::He);
        let compress_bn = BatchNorm2d::new(&mut store, "fc.bn", config.c_target);
        let assign_w = store.add(
            "fa.assign_w",
            init::he_normal(&mut rng, &[config.c_target, config.num_clusters], config.c_target),
        );
        let assign_b = store.add("fa.assign_b", Tensor::zeros(&[config.num_clusters]));
        let centers = store.add(
            "fa.centers",
            init::unit_rows(&mut rng, config.num_clusters, config.c_target),
        );
        let domain_fc1 = Linear::new(&mut store, &mut rng, "fd.fc1", config.c_final, 256);
        let domain_fc2 = Linear::new(&mut store, &mut rng, "fd.fc2", 256, 2);
        Ok(EmbeddingModel {
            config: config.clone(),
            store,
            backbone,
            compress,
            compress_bn,
            assign_w,
            assign_b,
            centers,
            domain_fc1,
            domain_fc2,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.c_final
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    /// Full embedding pass over an (N, 3, H, W) batch in [-1, 1].
    pub fn forward_embed(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        training: bool,
    ) -> EmbedVars {
        let (n, _, h, w) = g.value(x).dims4();
        debug_assert!(h % 16 == 0 && w % 16 == 0);
        let f = self.backbone.forward(g, &mut self.store, bound, x, training);
        let z = self.compress.forward(g, bound, f);
        let z = self.compress_bn.forward(g, &mut self.store, bound, z, training);
        let locals = g.nchw_to_nsc(z); // (N, S, C_t)
        let s = h / 16 * (w / 16);
        let k = self.config.num_clusters;
        let ct = self.config.c_target;
        let logits = g.batched_matmul_shared(locals, bound.var(self.assign_w));
        let logits = g.add_last_dim(logits, bound.var(self.assign_b));
        let flat = g.reshape(logits, &[n * s, k]);
        let soft = g.softmax_rows(flat);
        let assign = g.reshape(soft, &[n, s, k]);
        let vlad = g.netvlad_core(assign, locals, bound.var(self.centers));
        let rows = g.reshape(vlad, &[n * k, ct]);
        let intra = g.l2_normalize_rows(rows, 1e-12);
        let flat_desc = g.reshape(intra, &[n, k * ct]);
        let descriptors = g.l2_normalize_rows(flat_desc, 1e-12);
        EmbedVars { descriptors, intra }
    }

    /// Domain probabilities (thermal, satellite) for descriptor rows,
    /// behind the gradient reversal.
    pub fn forward_domain_probs(
        &self,
        g: &mut Graph,
        bound: &Bound,
        descriptors: Var,
    ) -> Var {
        let rev = g.grad_reverse(descriptors);
        let h = self.domain_fc1.forward(g, bound, rev);
        let h = g.relu(h);
        let logits = self.domain_fc2.forward(g, bound, h);
        g.softmax_rows(logits)
    }

    fn prepare(&self, img: &ImageBuf) -> Result<ImageBuf, SgmError> {
        let (h, w) = (img.height(), img.width());
        if h % 16 != 0 || w % 16 != 0 {
            return Err(SgmError::DimsNotDivisible { h, w });
        }
        match img.channels() {
            3 => Ok(img.clone()),
            1 => Ok(img.replicate_channels(3)),
            c => Err(SgmError::BadChannels(c)),
        }
    }

    /// Batch images into an (N, 3, H, W) tensor scaled to [-1, 1].
    pub fn batch_tensor(&self, images: &[&ImageBuf]) -> Result<Tensor, SgmError> {
        let prepared: Vec<ImageBuf> =
            images.iter().map(|i| self.prepare(i)).collect::<Result<_, _>>()?;
        let (h, w) = (prepared[0].height(), prepared[0].width());
        let mut data = Vec::with_capacity(prepared.len() * 3 * h * w);
        for img in &prepared {
            assert_eq!((img.height(), img.width()), (h, w), "mixed sizes in one batch");
            data.extend(img.data().iter().map(|&v| v * 2.0 - 1.0));
        }
        Ok(Tensor::from_vec(&[prepared.len(), 3, h, w], data))
    }

    /// Eval-mode descriptors with per-image degeneracy flags. A flagged
    /// descriptor is the zero vector (all residuals vanished before
    /// normalization).
    pub fn embed_images_flagged(
        &mut self,
        images: &[&ImageBuf],
    ) -> Result<(Vec<Vec<f64>>, Vec<bool>), SgmError> {
        let mut descs = Vec::with_capacity(images.len());
        let mut flags = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let x_data = self.batch_tensor(chunk)?;
            let mut g = Graph::new();
            let bound = self.store.bind(&mut g);
            let x = g.leaf(x_data);
            let out = self.forward_embed(&mut g, &bound, x, false);
            let d = self.config.c_final;
            let mut chunk_flags = vec![false; chunk.len()];
            for row in g.degenerate_rows(out.descriptors) {
                chunk_flags[row] = true;
            }
            let values = g.value(out.descriptors);
            for (i, flag) in chunk_flags.iter().enumerate() {
                if *flag {
                    log::warn!("degenerate embedding (zero residuals); returning zero vector");
                }
                descs.push(values.data()[i * d..(i + 1) * d].to_vec());
                flags.push(*flag);
            }
        }
        Ok((descs, flags))
    }

    /// Eval-mode descriptors as f64 rows.
    pub fn embed_images(&mut self, images: &[&ImageBuf]) -> Result<Vec<Vec<f64>>, SgmError> {
        Ok(self.embed_images_flagged(images)?.0)
    }

    /// Single-image convenience wrapper.
    pub fn embed_image(&mut self, image: &ImageBuf) -> Result<Vec<f64>, SgmError> {
        Ok(self.embed_images(&[image])?.pop().expect("one descriptor"))
    }

    /// Compressed local features (rows of c_target) of eval-mode forward,
    /// for k-means center initialization.
    fn compressed_locals(&mut self, images: &[&ImageBuf]) -> Result<Vec<Vec<f64>>, SgmError> {
        let mut out = Vec::new();
        for chunk in images.chunks(EMBED_CHUNK) {
            let x_data = self.batch_tensor(chunk)?;
            let mut g = Graph::new();
            let bound = self.store.bind(&mut g);
            let x = g.leaf(x_data);
            let f = self.backbone.forward(&mut g, &mut self.store, &bound, x, false);
            let z = self.compress.forward(&mut g, &bound, f);
            let z = self.compress_bn.forward(&mut g, &mut self.store, &bound, z, false);
            let locals = g.nchw_to_nsc(z);
            let v = g.value(locals);
            let (n, s, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            for i in 0..n {
                for si in 0..s {
                    out.push(v.data()[(i * s + si) * c..(i * s + si) * c + c].to_vec());
                }
            }
        }
        Ok(out)
    }

    /// Lloyd k-means over sampled local features; overwrites the cluster
    /// centers and seeds the assignment conv the NetVLAD way
    /// (`w_k = 2a c_k`, `b_k = -a |c_k|^2`).
    pub fn kmeans_init_centers(
        &mut self,
        sample_tiles: &[GeoTile],
        seed: u64,
    ) -> Result<(), SgmError> {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tiles: Vec<&GeoTile> = sample_tiles.iter().collect();
        tiles.shuffle(&mut rng);
        tiles.truncate(32);
        let images: Vec<&ImageBuf> = tiles.iter().map(|t| &t.image).collect();
        if images.is_empty() {
            return Ok(());
        }
        let locals = self.compressed_locals(&images)?;
        let k = self.config.num_clusters;
        let c = self.config.c_target;
        if locals.len() < k {
            log::warn!("k-means init skipped: {} local features < {k} clusters", locals.len());
            return Ok(());
        }
        let mut centers: Vec<Vec<f64>> = locals.choose_multiple(&mut rng, k).cloned().collect();
        let mut assignment = vec![0usize; locals.len()];
        for _ in 0..15 {
            for (i, x) in locals.iter().enumerate() {
                let mut best = (f64::INFINITY, 0usize);
                for (j, ctr) in centers.iter().enumerate() {
                    let d: f64 = x.iter().zip(ctr).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                assignment[i] = best.1;
            }
            for (j, ctr) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = locals
                    .iter()
                    .zip(&assignment)
                    .filter(|(_, &a)| a == j)
                    .map(|(x, _)| x)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for (ci, v) in ctr.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[ci]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let alpha = 10.0;
        let mut centers_flat = Vec::with_capacity(k * c);
        let mut w = vec![0.0; c * k];
        let mut b = vec![0.0; k];
        for (j, ctr) in centers.iter().enumerate() {
            centers_flat.extend_from_slice(ctr);
            let norm_sq: f64 = ctr.iter().map(|v| v * v).sum();
            b[j] = -alpha * norm_sq;
            for (ci, &v) in ctr.iter().enumerate() {
                w[ci * k + j] = 2.0 * alpha * v;
            }
        }
        *self.store.value_mut(self.centers) = Tensor::from_vec(&[k, c], centers_flat);
        *self.store.value_mut(self.assign_w) = Tensor::from_vec(&[c, k], w);
        *self.store.value_mut(self.assign_b) = Tensor::from_vec(&[k], b);
        Ok(())
    }

    pub fn save(&self, path: &Path, data_fingerprint: &str) -> Result<(), SgmError> {
        Checkpoint::from_store("sgm", &self.config, data_fingerprint, &self.store)?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String), SgmError> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("sgm")?;
        let config: SgmConfig = ck.config()?;
        let mut model = EmbeddingModel::new(&config)?;
        ck.load_into(&mut model.store)?;
        Ok((model, ck.data_fingerprint.clone()))
    }
}

impl CacheEmbedder for EmbeddingModel {
    fn descriptor_dim(&self) -> usize {
        self.config.c_final
    }

    fn embed_tiles(&mut self, tiles: &[GeoTile]) -> Result<Vec<Vec<f32>>, MiningError> {
        let images: Vec<&ImageBuf> = tiles.iter().map(|t| &t.image).collect();
        let descs = self
            .embed_images(&images)
            .map_err(|e| MiningError::Embed(e.to_string()))?;
        Ok(descs
            .into_iter()
            .map(|row| row.into_iter().map(|v| v as f32).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> EmbeddingModel {
        let cfg = SgmConfig {
            c_target: 4,
            num_clusters: 4,
            c_final: 16,
            backbone: BackboneKind::Tiny { base_width: 4 },
            ..SgmConfig::desk()
        };
        EmbeddingModel::new(&cfg).unwrap()
    }

    fn test_image(seed: u64, c: usize, size: usize) -> ImageBuf {
        ImageBuf::from_fn(c, size, size, |ci, y, x| {
            let v = (seed as usize * 31 + ci * 7 + y * 3 + x) % 97;
            v as f64 / 96.0
        })
    }

    #[test]
    fn descriptor_has_unit_norm_and_right_dim() {
        let mut m = tiny_model();
        let img = test_image(1, 3, 32);
        let d = m.embed_image(&img).unwrap();
        assert_eq!(d.len(), 16);
        let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
    }

    #[test]
    fn identical_images_embed_identically() {
        let mut m = tiny_model();
        let img = test_image(2, 3, 32);
        let a = m.embed_image(&img).unwrap();
        let b = m.embed_image(&img).unwrap();
        assert_eq!(a, b);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert_eq!(dist, 0.0);
    }

    #[test]
    fn thermal_single_channel_is_replicated() {
        let mut m = tiny_model();
        let thermal = test_image(3, 1, 32);
        let d = m.embed_image(&thermal).unwrap();
        assert_eq!(d.len(), 16);
    }

    #[test]
    fn bad_dims_rejected() {
        let mut m = tiny_model();
        let img = test_image(4, 3, 33);
        assert!(matches!(
            m.embed_image(&img),
            Err(SgmError::DimsNotDivisible { .. })
        ));
    }

    #[test]
    fn bad_channels_rejected() {
        let mut m = tiny_model();
        let img = ImageBuf::zeros(2, 32, 32);
        assert!(matches!(m.embed_image(&img), Err(SgmError::BadChannels(2))));
    }

    #[test]
    fn netvlad_single_cluster_at_center_is_degenerate() {
        // K = 1 and every local feature equal to the single center: the
        // pre-normalization VLAD is exactly zero, the guard returns the zero
        // vector and flags it.
        let cfg = SgmConfig {
            c_target: 4,
            num_clusters: 1,
            c_final: 4,
            backbone: BackboneKind::Tiny { base_width: 4 },
            ..SgmConfig::desk()
        };
        let mut m = EmbeddingModel::new(&cfg).unwrap();
        // constant input makes every local feature identical (conv + bn in
        // eval mode preserve spatial constancy); set the center to that value
        let img = ImageBuf::from_fn(3, 32, 32, |_, _, _| 0.5);
        let locals = m.compressed_locals(&[&img]).unwrap();
        let first = locals[0].clone();
        for row in &locals {
            for (a, b) in row.iter().zip(&first) {
                assert!((a - b).abs() < 1e-9, "locals not constant");
            }
        }
        *m.store.value_mut(m.centers) = Tensor::from_vec(&[1, 4], first);
        let (descs, flags) = m.embed_images_flagged(&[&img]).unwrap();
        assert!(flags[0], "expected degenerate flag");
        assert!(descs[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn netvlad_is_permutation_invariant() {
        // permuting the spatial order of local features leaves the
        // descriptor unchanged: feed the VLAD stage directly.
        let cfg = SgmConfig {
            c_target: 3,
            num_clusters: 4,
            c_final: 12,
            backbone: BackboneKind::Tiny { base_width: 4 },
            ..SgmConfig::desk()
        };
        let m = EmbeddingModel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = 10;
        let locals_data = init::normal(&mut rng, &[1, s, 3], 1.0);
        let mut permuted = vec![0.0; s * 3];
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..s).collect();
            p.shuffle(&mut rng);
            p
        };
        for (to, &from) in perm.iter().enumerate() {
            permuted[to * 3..to * 3 + 3].copy_from_slice(&locals_data.data()[from * 3..from * 3 + 3]);
        }
        let permuted = Tensor::from_vec(&[1, s, 3], permuted);

        let descriptor_of = |m: &EmbeddingModel, locals_t: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = m.store.bind(&mut g);
            let locals = g.leaf(locals_t.clone());
            let logits = g.batched_matmul_shared(locals, bound.var(m.assign_w));
            let logits = g.add_last_dim(logits, bound.var(m.assign_b));
            let flat = g.reshape(logits, &[s, 4]);
            let soft = g.softmax_rows(flat);
            let assign = g.reshape(soft, &[1, s, 4]);
            let vlad = g.netvlad_core(assign, locals, bound.var(m.centers));
            let rows = g.reshape(vlad, &[4, 3]);
            let intra = g.l2_normalize_rows(rows, 1e-12);
            let flat_d = g.reshape(intra, &[1, 12]);
            let desc = g.l2_normalize_rows(flat_d, 1e-12);
            g.value(desc).data().to_vec()
        };
        let a = descriptor_of(&m, &locals_data);
        let b = descriptor_of(&m, &permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn domain_probs_sum_to_one() {
        let m = tiny_model();
        let mut g = Graph::new();
        let bound = m.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let descs = {
            let raw = init::normal(&mut rng, &[3, 16], 1.0);
            let l = g.leaf(raw);
            g.l2_normalize_rows(l, 1e-12)
        };
        let probs = m.forward_domain_probs(&mut g, &bound, descs);
        let v = g.value(probs);
        assert_eq!(v.shape(), [3, 2]);
        for r in 0..3 {
            let sum = v.data()[r * 2] + v.data()[r * 2 + 1];
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(v.data()[r * 2] > 0.0 && v.data()[r * 2 + 1] > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = tiny_model();
        let img = test_image(5, 3, 32);
        let before = m.embed_image(&img).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sgm.ckpt");
        m.save(&path, &"d".repeat(64)).unwrap();
        let (mut back, _) = EmbeddingModel::load(&path).unwrap();
        let after = back.embed_image(&img).unwrap();
        assert_eq!(before, after);
        assert_eq!(m.fingerprint(), back.fingerprint());
    }

    #[test]
    fn resnet18_downsamples_by_sixteen() {
        let cfg = SgmConfig {
            c_target: 4,
            num_clusters: 4,
            c_final: 16,
            backbone: BackboneKind::ResNet18,
            ..SgmConfig::desk()
        };
        let mut m = EmbeddingModel::new(&cfg).unwrap();
        let img = test_image(6, 3, 32);
        let d = m.embed_image(&img).unwrap();
        assert_eq!(d.len(), 16);
        let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}
