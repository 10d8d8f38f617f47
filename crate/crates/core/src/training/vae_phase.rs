use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::stage1::{index_tensor, pair_tensors};
use super::{crop_offsets, run_loop, sample_indices, scalar, Corpus, TrainConfig, TrainReport};
use crate::checkpoint::{ModelBundle, ModelKind};
use crate::diffusion::randn;
use crate::error::Result;
use crate::losses::mse_t;
use crate::sagiri::vae::{vae_loss, Vae, LATENT_SCALE_KEY};

/// Trains the VAE on both sides of the corpus, then sets the latent scale so
/// encoded training images have unit standard deviation.
pub fn train_vae(mut bundle: ModelBundle, train: &Corpus, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    bundle.expect_kind(ModelKind::Vae)?;
    let pairs = pair_tensors(train)?;
    let images = Tensor::cat(&[&pairs.gt, &pairs.lq], 0)?;
    let vae = Vae::from_bundle(&bundle)?;
    let (n, c, h, w) = images.dims4()?;
    let (ch, cw) = if cfg.crop_size == 0 { (h, w) } else { (cfg.crop_size, cfg.crop_size) };
    let lc = vae.config().latent_channels;
    let f = vae.factor();
    let history = run_loop(&mut bundle, "vae", cfg, out, &["recon", "kl"], |_, rng| {
        let idx = index_tensor(&sample_indices(rng, n, cfg.batch_size))?;
        let (top, left) = crop_offsets(rng, h, w, cfg.crop_size, f)?;
        let x = images.index_select(&idx, 0)?.narrow(2, top, ch)?.narrow(3, left, cw)?;
        debug_assert_eq!(x.dim(1)?, c);
        let noise = randn(rng, (cfg.batch_size, lc, ch / f, cw / f), DType::F32, &Device::Cpu)?;
        let (loss, recon, kl) = vae_loss(&vae, &x, &noise)?;
        Ok((loss, vec![recon, kl]))
    })?;
    let scale = latent_scale(&vae, &pairs.gt)?;
    bundle.extra.insert(LATENT_SCALE_KEY.into(), format!("{scale}"));
    Ok(TrainReport { bundle, history })
}

fn latent_scale(vae: &Vae, images: &Tensor) -> Result<f64> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    let n = images.dim(0)?;
    for start in (0..n).step_by(16) {
        let z = vae.encode(&images.narrow(0, start, 16.min(n - start))?)?.detach();
        let z = z.to_dtype(DType::F64)?.flatten_all()?;
        sum += scalar(&z.sum_all()?)?;
        sq += scalar(&z.sqr()?.sum_all()?)?;
        count += z.dim(0)?;
    }
    let mean = sum / count as f64;
    let var = (sq / count as f64 - mean * mean).max(0.0);
    Ok(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 })
}

/// Mean squared reconstruction error of `encode -> decode` on the corpus targets.
pub fn vae_recon_mse(vae: &Vae, corpus: &Corpus) -> Result<f64> {
    let gt = pair_tensors(corpus)?.gt;
    let n = gt.dim(0)?;
    let mut acc = 0.0;
    for start in (0..n).step_by(16) {
        let len = 16.min(n - start);
        let x = gt.narrow(0, start, len)?;
        let y = vae.decode(&vae.encode(&x)?)?.clamp(0.0, 1.0)?;
        acc += scalar(&mse_t(&y, &x)?)? * len as f64;
    }
    Ok(acc / n as f64)
}
