//! Stage-two refiner: VAE, control-conditioned latent denoiser and masked sampling.

pub mod prompt;
pub mod unet;
pub mod vae;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::diffusion::{sample_loop, KnownConvention, KnownRegion, NoiseSchedule, SampleOptions, DEFAULT_INFERENCE_STEPS};
use crate::error::{Error, Result};
use crate::imaging::{detect_unknown_mask, project_mask_to_latent, ImageBuffer, RegionMask, SaturationMode};
use crate::nn::{images_to_tensor, tensor_to_images};

pub use prompt::{PromptEmbedding, PromptEncoder};
pub use unet::{build_sagiri, build_unet, unet_from_bundle, ControlFeatures, ControlUnetConfig, SagiriNet, Unet};
pub use vae::{build_vae, vae_round_trip, Vae, VaeConfig};

/// Loaded VAE and control U-Net.
pub struct SagiriModels {
    pub vae: Vae,
    pub net: SagiriNet,
}

impl SagiriModels {
    pub fn from_bundles(vae: &ModelBundle, sagiri: &ModelBundle) -> Result<Self> {
        let vae = Vae::from_bundle(vae)?;
        let net = SagiriNet::from_bundle(sagiri)?;
        if vae.config().latent_channels != net.config().latent_channels {
            return Err(Error::InvalidConfig(format!(
                "VAE has {} latent channels, denoiser expects {}",
                vae.config().latent_channels,
                net.config().latent_channels
            )));
        }
        Ok(Self { vae, net })
    }

    /// Pixel sides are padded to multiples of this before encoding.
    pub fn pixel_multiple(&self) -> usize {
        self.vae.factor() * self.net.config().latent_multiple()
    }

    pub fn round_trip(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        vae_round_trip(&self.vae, img, self.pixel_multiple())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub n_steps: usize,
    pub seed: u64,
    pub convention: KnownConvention,
    /// Classifier-free guidance scale; 1 disables the unconditional pass.
    pub guidance: f64,
    pub saturation: SaturationMode,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_INFERENCE_STEPS,
            seed: 0,
            convention: KnownConvention::Shifted,
            guidance: 1.0,
            saturation: SaturationMode::AllChannels,
        }
    }
}

pub(crate) fn latent_mask_tensor(mask: &RegionMask) -> Result<Tensor> {
    let lm = mask
        .latent()
        .ok_or_else(|| Error::InvalidConfig("mask has no latent projection".into()))?;
    Ok(Tensor::from_vec(lm.as_f32(), (1, lm.channels, lm.height, lm.width), &Device::Cpu)?)
}

/// Refines a stage-one result. Without `mask_override`, pixels at 0 or 255 in
/// `stage1` are regenerated and the rest kept.
pub fn refine(
    stage1: &ImageBuffer,
    prompt: Option<&str>,
    mask_override: Option<&RegionMask>,
    models: &SagiriModels,
    sched: &NoiseSchedule,
    opts: &RefineOptions,
) -> Result<ImageBuffer> {
    let (h, w, _) = stage1.dims();
    let mask = match mask_override {
        Some(m) => {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::shape(format!("{h}x{w} mask"), format!("{}x{}", m.height(), m.width())));
            }
            m.clone()
        }
        None => detect_unknown_mask(&stage1.to_byte()?.to_rgb(), opts.saturation)?,
    };
    refine_with_mask(stage1, prompt.unwrap_or(""), &mask, models, sched, opts)
}

fn refine_with_mask(
    stage1: &ImageBuffer,
    prompt: &str,
    mask: &RegionMask,
    models: &SagiriModels,
    sched: &NoiseSchedule,
    opts: &RefineOptions,
) -> Result<ImageBuffer> {
    let (h, w, _) = stage1.dims();
    let m = models.pixel_multiple();
    let padded = stage1.to_unit_float()?.to_rgb().reflect_pad_to_multiple(m);
    let (ph, pw, _) = padded.dims();
    let f = models.vae.factor();
    let lc = models.vae.config().latent_channels;
    let mask = project_mask_to_latent(&mask.reflect_pad(ph, pw), f, lc)?;
    let latent_mask = latent_mask_tensor(&mask)?;

    let dtype = DType::F32;
    let x = images_to_tensor(&[&padded], dtype, &Device::Cpu)?;
    let scale = models.vae.latent_scale;
    let z_cond = (models.vae.encode(&x)? * scale)?;
    let ctx = models.net.context(&[prompt])?;
    let null_ctx = models.net.context(&[""])?;
    let net = &models.net;
    let guidance = opts.guidance;
    let denoiser = |xt: &Tensor, t: usize| -> Result<Tensor> {
        let eps = net.forward(xt, &[t], &ctx, &z_cond)?;
        if guidance == 1.0 {
            return Ok(eps);
        }
        let eps_null = net.forward(xt, &[t], &null_ctx, &z_cond)?;
        Ok((&eps_null + ((eps - &eps_null)? * guidance)?)?)
    };
    let z = sample_loop(
        &denoiser,
        z_cond.dims(),
        Some(KnownRegion {
            x0: &z_cond,
            mask: &latent_mask,
        }),
        sched,
        SampleOptions {
            n_steps: opts.n_steps,
            seed: opts.seed,
            convention: opts.convention,
            observer: None,
        },
        dtype,
    )?;
    let generated = models.vae.decode(&(z / scale)?)?;
    let kept = models.vae.decode(&(&z_cond / scale)?)?;
    // paste the codec round-trip back over the footprint of known latent cells
    let pix = mask.latent().expect("projected").to_pixel_mask(f);
    let pm: Vec<f32> = pix.pixels().iter().map(|&v| v as f32).collect();
    let pm = Tensor::from_vec(pm, (1, 1, ph, pw), &Device::Cpu)?;
    let inv = (pm.ones_like()? - &pm)?;
    let out = (kept.broadcast_mul(&pm)? + generated.broadcast_mul(&inv)?)?;
    tensor_to_images(&out)?.remove(0).crop(0, 0, h, w)
}
