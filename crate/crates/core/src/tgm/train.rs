//! Generator/discriminator training and generated-dataset synthesis.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{PatchDiscriminator, UNet};
use super::{TgmConfig, TgmError};
use crate::checkpoint::Checkpoint;
use crate::enhance::contrast_enhance;
use crate::geodata::{CropSource, GeoTile, PairedCrop};
use crate::imagebuf::ImageBuf;
use crate::nn::{Adam, Graph, ParamStore, Tensor};

/// Trained generator/discriminator pair.
pub struct TgmModel {
    pub config: TgmConfig,
    pub store: ParamStore,
    unet: UNet,
    disc: PatchDiscriminator,
}

pub struct TgmTrainStats {
    /// Per-generator-step L1 value between generated and target thermal.
    pub l1_history: Vec<f64>,
    pub d_loss_history: Vec<f64>,
    pub g_gan_history: Vec<f64>,
    pub steps: usize,
}

/// Stack images into an (N, C, H, W) tensor mapped from [0,1] to [-1,1].
fn images_to_tensor(images: &[&ImageBuf]) -> Tensor {
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        debug_assert_eq!(img.channels(), c);
        data.extend(img.data().iter().map(|&v| v * 2.0 - 1.0));
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// Extract image `n` from an (N, 1, H, W) tensor back into [0,1].
fn tensor_to_thermal(t: &Tensor, n: usize) -> ImageBuf {
    let (_, c, h, w) = t.dims4();
    debug_assert_eq!(c, 1);
    let plane = h * w;
    let data: Vec<f64> = t.data()[n * plane..(n + 1) * plane]
        .iter()
        .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
        .collect();
    ImageBuf::new(1, h, w, data).expect("clamped pixels are valid")
}

impl TgmModel {
    pub fn new(config: &TgmConfig) -> Result<Self, TgmError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unet = UNet::new(
            &mut store,
            &mut rng,
            "g",
            3,
            1,
            config.unet_depth,
            config.unet_base_width,
        );
        let disc = PatchDiscriminator::new(
            &mut store,
            &mut rng,
            "d",
            4,
            config.disc_layers,
            config.disc_base_width,
        );
        Ok(TgmModel { config: config.clone(), store, unet, disc })
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    /// Generator forward on an (N, 3, H, W) batch in [-1, 1].
    pub fn forward_generator(
        &mut self,
        g: &mut Graph,
        bound: &crate::nn::Bound,
        x: crate::nn::Var,
        training: bool,
    ) -> crate::nn::Var {
        self.unet.forward(g, &mut self.store, bound, x, training)
    }

    /// Discriminator scores for a (thermal, satellite) pair.
    pub fn forward_discriminator(
        &mut self,
        g: &mut Graph,
        bound: &crate::nn::Bound,
        thermal: crate::nn::Var,
        satellite: crate::nn::Var,
        training: bool,
    ) -> crate::nn::Var {
        self.disc.forward(g, &mut self.store, bound, thermal, satellite, training)
    }

    /// Translate one satellite tile: upsample to the train resolution, run
    /// the generator in eval mode, downsample to the output resolution.
    pub fn generate(&mut self, sat: &ImageBuf) -> Result<ImageBuf, TgmError> {
        Ok(self.generate_batch(&[sat])?.pop().expect("one output per input"))
    }

    /// Batched version of [`generate`](Self::generate).
    pub fn generate_batch(&mut self, sats: &[&ImageBuf]) -> Result<Vec<ImageBuf>, TgmError> {
        for s in sats {
            if s.channels() != 3 {
                return Err(TgmError::NotSatellite(s.channels()));
            }
        }
        let res = self.config.train_resolution;
        let resized: Vec<ImageBuf> = sats.iter().map(|s| s.resize_bilinear(res, res)).collect();
        let refs: Vec<&ImageBuf> = resized.iter().collect();
        let x_data = images_to_tensor(&refs);
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.leaf(x_data);
        let fake = self.unet.forward(&mut g, &mut self.store, &bound, x, false);
        let out_res = self.config.output_resolution;
        Ok((0..sats.len())
            .map(|i| tensor_to_thermal(g.value(fake), i).resize_bilinear(out_res, out_res))
            .collect())
    }

    pub fn save(&self, path: &Path, data_fingerprint: &str) -> Result<(), TgmError> {
        Checkpoint::from_store("tgm", &self.config, data_fingerprint, &self.store)?
            .save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String), TgmError> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("tgm")?;
        let config: TgmConfig = ck.config()?;
        let mut model = TgmModel::new(&config)?;
        ck.load_into(&mut model.store)?;
        Ok((model, ck.data_fingerprint.clone()))
    }
}

/// Alternating least-squares GAN training over pre-filtered pairs.
///
/// Each step updates the discriminator on (real, detached fake), then the
/// generator on the refreshed discriminator scores plus weighted L1. Inputs
/// are resampled to the train resolution per batch; thermal targets get the
/// contrast enhancement first when `use_ce_inputs` is set.
pub fn train_tgm(
    config: &TgmConfig,
    pairs: &[PairedCrop],
    checkpoint_dir: Option<&Path>,
) -> Result<(TgmModel, TgmTrainStats), TgmError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TgmError::EmptyDataset);
    }
    for p in pairs {
        if p.satellite.image.channels() != 3 {
            return Err(TgmError::NotSatellite(p.satellite.image.channels()));
        }
        let got = p.thermal.image.height();
        if got != config.output_resolution || p.satellite.image.height() != config.output_resolution {
            return Err(TgmError::BadCropSize { got, want: config.output_resolution });
        }
    }

    let mut model = TgmModel::new(config)?;
    let data_fp = crate::checkpoint::dataset_fingerprint(pairs);
    let mut adam_g = Adam::with_mask(&model.store, config.learning_rate, 0.5, 0.999, |n| {
        n.starts_with("g.")
    });
    let mut adam_d = Adam::with_mask(&model.store, config.learning_rate, 0.5, 0.999, |n| {
        n.starts_with("d.")
    });

    // resample once up front; identity when train == output resolution
    let res = config.train_resolution;
    let prepared: Vec<(ImageBuf, ImageBuf)> = pairs
        .iter()
        .map(|p| {
            let thermal = if config.use_ce_inputs {
                contrast_enhance(&p.thermal.image, config.ce_factor)?
            } else {
                p.thermal.image.clone()
            };
            Ok((
                p.satellite.image.resize_bilinear(res, res),
                thermal.resize_bilinear(res, res),
            ))
        })
        .collect::<Result<_, TgmError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut stats = TgmTrainStats {
        l1_history: Vec::new(),
        d_loss_history: Vec::new(),
        g_gan_history: Vec::new(),
        steps: 0,
    };
    let (a, b, c) = (config.label_fake, config.label_real, config.label_target);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate * config.lr_factor(epoch);
        adam_g.set_lr(lr);
        adam_d.set_lr(lr);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(config.batch_size) {
            let sats: Vec<&ImageBuf> = chunk.iter().map(|&i| &prepared[i].0).collect();
            let thermals: Vec<&ImageBuf> = chunk.iter().map(|&i| &prepared[i].1).collect();
            let x_data = images_to_tensor(&sats);
            let y_data = images_to_tensor(&thermals);

            // generator forward (recorded for the G step)
            let mut g1 = Graph::new();
            let bound1 = model.store.bind(&mut g1);
            let x = g1.leaf(x_data.clone());
            let y = g1.leaf(y_data.clone());
            let fake = model.unet.forward(&mut g1, &mut model.store, &bound1, x, true);
            let fake_value = g1.value(fake).clone();

            // discriminator step on (real, detached fake)
            let d_loss_value = {
                let mut g2 = Graph::new();
                let bound2 = model.store.bind(&mut g2);
                let x2 = g2.leaf(x_data.clone());
                let y2 = g2.leaf(y_data.clone());
                let fake_det = g2.leaf(fake_value);
                let s_real =
                    model.disc.forward(&mut g2, &mut model.store, &bound2, y2, x2, true);
                let s_fake =
                    model.disc.forward(&mut g2, &mut model.store, &bound2, fake_det, x2, true);
                let sr = g2.add_scalar(s_real, -b);
                let sr = g2.square(sr);
                let sr = g2.mean(sr);
                let sr = g2.scale(sr, 0.5);
                let sf = g2.add_scalar(s_fake, -a);
                let sf = g2.square(sf);
                let sf = g2.mean(sf);
                let sf = g2.scale(sf, 0.5);
                let d_loss = g2.add(sr, sf);
                g2.backward(d_loss);
                adam_d.step(&mut model.store, &g2, &bound2);
                g2.value(d_loss).item()
            };

            // generator step against the updated discriminator
            let bound_d = model.store.bind(&mut g1);
            let s_fake_g =
                model.disc.forward(&mut g1, &mut model.store, &bound_d, fake, x, true);
            let gg = g1.add_scalar(s_fake_g, -c);
            let gg = g1.square(gg);
            let g_gan = g1.mean(gg);
            let diff = g1.sub(fake, y);
            let ad = g1.abs(diff);
            let l1 = g1.mean(ad);
            let weighted = g1.scale(l1, config.lambda1);
            let g_obj = g1.add(g_gan, weighted);
            g1.backward(g_obj);
            adam_g.step(&mut model.store, &g1, &bound1);

            let l1_value = g1.value(l1).item();
            let g_gan_value = g1.value(g_gan).item();
            stats.steps += 1;
            if !l1_value.is_finite() || !g_gan_value.is_finite() || !d_loss_value.is_finite() {
                return Err(TgmError::DivergedLoss { step: stats.steps, epoch });
            }
            stats.l1_history.push(l1_value);
            stats.d_loss_history.push(d_loss_value);
            stats.g_gan_history.push(g_gan_value);
        }

        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join(format!("tgm_epoch{epoch:03}.ckpt")), &data_fp)?;
            model.save(&dir.join("tgm.ckpt"), &data_fp)?;
        }
        log::info!(
            "tgm epoch {epoch}: L1 {:.4}, D {:.4}, G_gan {:.4}",
            stats.l1_history.last().copied().unwrap_or(f64::NAN),
            stats.d_loss_history.last().copied().unwrap_or(f64::NAN),
            stats.g_gan_history.last().copied().unwrap_or(f64::NAN),
        );
    }

    Ok((model, stats))
}

/// Synthesize one generated pair per unpaired satellite tile.
///
/// Generated thermal tiles live in the same domain the generator was trained
/// for. When the experiment wants enhanced thermal but the generator was
/// trained on raw targets, the enhancement is applied to the outputs here;
/// the embedding stage must not enhance generated pairs again.
pub fn generate_dataset(
    model: &mut TgmModel,
    unpaired_sats: &[GeoTile],
    use_ce: bool,
    ce_factor: f64,
) -> Result<Vec<PairedCrop>, TgmError> {
    if model.config.use_ce_inputs && !use_ce {
        log::warn!(
            "generator was trained on contrast-enhanced targets but the \
             experiment runs without enhancement; generated thermal tiles \
             stay in the enhanced domain"
        );
    }
    let apply_ce = use_ce && !model.config.use_ce_inputs;
    let mut out = Vec::with_capacity(unpaired_sats.len());
    for chunk in unpaired_sats.chunks(8) {
        let refs: Vec<&ImageBuf> = chunk.iter().map(|t| &t.image).collect();
        let thermals = model.generate_batch(&refs)?;
        for (tile, thermal) in chunk.iter().zip(thermals) {
            let thermal = if apply_ce {
                contrast_enhance(&thermal, ce_factor)?
            } else {
                thermal
            };
            out.push(PairedCrop {
                satellite: tile.clone(),
                thermal: GeoTile {
                    image: thermal,
                    pixel_offset: tile.pixel_offset,
                    position: tile.position,
                    tile_id: tile.tile_id,
                    invalid_fraction: 0.0,
                },
                source: CropSource::Generated,
                invalid_fraction: 0.0,
            });
        }
    }
    Ok(out)
}
