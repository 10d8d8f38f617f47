//! Small convolutional VAE mapping images to a `factor`-times smaller latent grid.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelBundle, ModelKind};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::nn::{images_to_tensor, tensor_to_images, Conv2d, ParamStore, Vb};

pub const LATENT_SCALE_KEY: &str = "latent_scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub base_width: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            downsample_factor: 8,
            base_width: 32,
            kl_weight: 1e-6,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(Error::InvalidConfig(format!(
                "downsample_factor must be a power of two >= 2, got {}",
                self.downsample_factor
            )));
        }
        if self.latent_channels == 0 || self.base_width < 2 {
            return Err(Error::InvalidConfig("latent_channels >= 1 and base_width >= 2 required".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::InvalidConfig("kl_weight must be >= 0".into()));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channel width at full resolution (index 0) and after each downsample.
    fn widths(&self) -> Vec<usize> {
        let w = self.base_width;
        (0..=self.stages())
            .map(|i| match i {
                0 => w / 2,
                1 => w,
                _ => 2 * w,
            })
            .collect()
    }
}

pub struct Vae {
    cfg: VaeConfig,
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
    /// Multiplier bringing encoder means to roughly unit variance.
    pub latent_scale: f64,
}

impl Vae {
    pub fn new(cfg: &VaeConfig, vb: &Vb) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let lc = cfg.latent_channels;
        let s = cfg.stages();
        let enc_down = (0..s)
            .map(|i| {
                let v = vb.pp(format!("enc.down.{i}"));
                Ok((
                    Conv2d::new(&v.pp("down"), w[i], w[i + 1], 3, 2)?,
                    Conv2d::new(&v.pp("conv"), w[i + 1], w[i + 1], 3, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_up = (0..s)
            .map(|i| {
                let v = vb.pp(format!("dec.up.{i}"));
                let (cin, cout) = (w[s - i], w[s - i - 1]);
                Ok((
                    Conv2d::new(&v.pp("conv1"), cin, cout, 3, 1)?,
                    Conv2d::new(&v.pp("conv2"), cout, cout, 3, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            enc_in: Conv2d::new(&vb.pp("enc.conv_in"), 3, w[0], 3, 1)?,
            enc_down,
            enc_out: Conv2d::new(&vb.pp("enc.conv_out"), w[s], 2 * lc, 3, 1)?,
            dec_in: Conv2d::new(&vb.pp("dec.conv_in"), lc, w[s], 3, 1)?,
            dec_mid: Conv2d::new(&vb.pp("dec.mid"), w[s], w[s], 3, 1)?,
            dec_up,
            dec_out: Conv2d::new(&vb.pp("dec.conv_out"), w[0], 3, 3, 1)?,
            latent_scale: 1.0,
        })
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        bundle.expect_kind(ModelKind::Vae)?;
        let cfg: VaeConfig = bundle.config()?;
        let mut vae = Self::new(&cfg, &bundle.params.root())?;
        if let Some(s) = bundle.extra.get(LATENT_SCALE_KEY) {
            vae.latent_scale = s
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {LATENT_SCALE_KEY} {s:?}")))?;
        }
        Ok(vae)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn factor(&self) -> usize {
        self.cfg.downsample_factor
    }

    /// Posterior mean and log-variance, each `(B, latent_channels, H/f, W/f)`.
    pub fn encode_moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let f = self.cfg.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("spatial dims divisible by {f}"),
                found: format!("{h}x{w}"),
            });
        }
        // inputs are centered to [-1, 1]
        let mut h = self.enc_in.forward(&((x * 2.0)? - 1.0)?)?.silu()?;
        for (down, conv) in &self.enc_down {
            h = down.forward(&h)?.silu()?;
            h = conv.forward(&h)?.silu()?;
        }
        let out = self.enc_out.forward(&h)?;
        let lc = self.cfg.latent_channels;
        let mean = out.narrow(1, 0, lc)?;
        let logvar = out.narrow(1, lc, lc)?.clamp(-20.0, 10.0)?;
        Ok((mean, logvar))
    }

    /// Deterministic encoding (posterior mean).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_moments(x)?.0)
    }

    /// Reparameterized posterior sample with externally supplied unit noise.
    pub fn encode_sample(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (mean, logvar) = self.encode_moments(x)?;
        Ok((mean + ((logvar * 0.5)?.exp()? * noise)?)?)
    }

    /// Unclamped image-space reconstruction in `[0, 1]` units.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?.silu()?;
        h = self.dec_mid.forward(&h)?.silu()?;
        for (conv1, conv2) in &self.dec_up {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = conv1.forward(&h)?.silu()?;
            h = conv2.forward(&h)?.silu()?;
        }
        let y = self.dec_out.forward(&h)?;
        Ok(((y + 1.0)? * 0.5)?)
    }

    fn dtype(&self) -> DType {
        self.enc_in.weight.dtype()
    }

    pub fn encode_image(&self, img: &ImageBuffer) -> Result<Tensor> {
        let x = images_to_tensor(&[img], self.dtype(), &Device::Cpu)?;
        self.encode(&x)
    }

    pub fn decode_image(&self, z: &Tensor) -> Result<ImageBuffer> {
        Ok(tensor_to_images(&self.decode(z)?)?.remove(0))
    }
}

/// Reconstruction MSE plus `kl_weight` times the mean per-element KL to N(0, I).
pub fn vae_loss(vae: &Vae, x: &Tensor, noise: &Tensor) -> Result<(Tensor, f64, f64)> {
    let (mean, logvar) = vae.encode_moments(x)?;
    let z = (&mean + ((&logvar * 0.5)?.exp()? * noise)?)?;
    let recon = crate::losses::mse_t(&vae.decode(&z)?, x)?;
    let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - &logvar)?;
    let kl = (kl.mean_all()? * 0.5)?;
    let total = (&recon + (&kl * vae.cfg.kl_weight)?)?;
    let r = recon.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let k = kl.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok((total, r, k))
}

pub fn build_vae(cfg: &VaeConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let store = ParamStore::new(seed, DType::F32);
    Vae::new(cfg, &store.root())?;
    let mut bundle = ModelBundle::new(ModelKind::Vae, cfg, seed, store)?;
    bundle.extra.insert(LATENT_SCALE_KEY.into(), "1".into());
    Ok(bundle)
}

/// Encodes then decodes, padding to the latent grid and cropping back.
pub fn vae_round_trip(vae: &Vae, img: &ImageBuffer, multiple: usize) -> Result<ImageBuffer> {
    let (h, w, _) = img.dims();
    let padded = img.to_unit_float()?.to_rgb().reflect_pad_to_multiple(multiple.max(vae.factor()));
    let z = vae.encode_image(&padded)?;
    vae.decode_image(&z)?.crop(0, 0, h, w)
}
