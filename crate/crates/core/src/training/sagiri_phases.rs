use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stage1::{index_tensor, pair_tensors, stage1_outputs};
use super::{crop_offsets, run_loop, sample_indices, scalar, Corpus, PromptSource, TrainConfig, TrainReport};
use crate::checkpoint::{ModelBundle, ModelKind};
use crate::diffusion::{q_sample_batch, randn, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{detect_unknown_mask, generate_degradation, project_mask_to_latent, DegradationSpec, ImageBuffer, SaturationMode};
use crate::losses::{content_loss_terms_t, mse_t, LossWeights, SsimConfig};
use crate::nn::images_to_tensor;
use crate::restorer::Restorer;
use crate::sagiri::unet::{unet_from_bundle, SagiriNet, Unet};
use crate::sagiri::{latent_mask_tensor, refine, RefineOptions, SagiriModels, Vae};

const ENCODE_CHUNK: usize = 16;

enum Net<'a> {
    Base(&'a Unet),
    Control(&'a SagiriNet),
}

impl Net<'_> {
    fn context(&self, prompts: &[&str]) -> Result<Tensor> {
        match self {
            Net::Base(u) => u.prompt.context(prompts),
            Net::Control(s) => s.context(prompts),
        }
    }

    fn eps(&self, x: &Tensor, ts: &[usize], ctx: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        match (self, cond) {
            (Net::Base(u), _) => u.forward(x, ts, ctx),
            (Net::Control(s), Some(c)) => s.forward(x, ts, ctx, c),
            (Net::Control(_), None) => Err(Error::InvariantViolation("control net needs a condition latent".into())),
        }
    }
}

/// Scaled posterior means for a batch of unit-range images, without gradient.
fn encode_scaled(vae: &Vae, x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let mut parts = Vec::new();
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let len = ENCODE_CHUNK.min(n - start);
        parts.push(vae.encode(&x.narrow(0, start, len)?)?.detach());
    }
    Ok((Tensor::cat(&parts, 0)? * vae.latent_scale)?)
}

fn encode_images(vae: &Vae, images: &[&ImageBuffer]) -> Result<Tensor> {
    encode_scaled(vae, &images_to_tensor(images, DType::F32, &Device::Cpu)?)
}

/// Per-item latent masks (1 = known) from the saturated pixels of the stage-one input.
fn paired_masks(corpus: &Corpus, vae: &Vae) -> Result<Tensor> {
    let f = vae.factor();
    let lc = vae.config().latent_channels;
    let masks = corpus
        .items
        .iter()
        .map(|item| {
            let pixel = match &item.mask {
                Some(m) => m.clone(),
                None => detect_unknown_mask(&item.lq.to_byte()?, SaturationMode::AllChannels)?,
            };
            latent_mask_tensor(&project_mask_to_latent(&pixel, f, lc)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&masks, 0)?)
}

/// `m * z_cond + (1 - m) * z_gt`.
fn combine(mask: &Tensor, cond: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let inv = (mask.ones_like()? - mask)?;
    Ok(((mask * cond)? + (inv * gt)?)?)
}

fn row_coeffs(ts: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
    let v: Vec<f32> = ts.iter().map(|&t| f(t) as f32).collect();
    Ok(Tensor::from_vec(v, (ts.len(), 1, 1, 1), &Device::Cpu)?)
}

/// One-step clean estimate `(x_t - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    let a = row_coeffs(ts, |t| sched.alpha_bar(t).sqrt())?;
    let s = row_coeffs(ts, |t| (1.0 - sched.alpha_bar(t)).sqrt())?;
    Ok((x_t - eps_hat.broadcast_mul(&s)?)?.broadcast_div(&a)?)
}

fn pick_prompts(corpus: &Corpus, idx: &[usize], source: PromptSource, drop: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    idx.iter()
        .map(|&i| {
            let keep = rng.random::<f64>() >= drop;
            let item = &corpus.items[i];
            match source {
                _ if !keep => String::new(),
                PromptSource::None => String::new(),
                PromptSource::GtCaptions => item.gt_prompt.clone(),
                PromptSource::LqCaptions => item.lq_prompt.clone(),
            }
        })
        .collect()
}

enum Cond<'a> {
    None,
    /// Degrade the ground truth afresh each step.
    Degrade(&'a DegradationSpec),
    /// Precomputed condition latents, one per item.
    Fixed(&'a Tensor),
}

struct DiffusionData<'a> {
    corpus: &'a Corpus,
    /// Latent the forward process noises, one per item.
    x0: Tensor,
    gt: Tensor,
    cond: Cond<'a>,
}

struct StepParts<'a> {
    net: Net<'a>,
    vae: &'a Vae,
    sched: &'a NoiseSchedule,
}

fn diffusion_step_loss(
    parts: &StepParts<'_>,
    data: &DiffusionData<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, lc, lh, lw) = data.x0.dims4()?;
    let f = parts.vae.factor();
    let ids = sample_indices(rng, n, cfg.batch_size);
    let idx = index_tensor(&ids)?;
    let t_max = parts.sched.len();
    let ts: Vec<usize> = (0..ids.len()).map(|_| rng.random_range(1..=t_max)).collect();
    let prompts = pick_prompts(data.corpus, &ids, cfg.prompt_source, cfg.prompt_drop, rng);
    let crop = cfg.crop_size / f;
    let (top, left) = crop_offsets(rng, lh, lw, crop, 1)?;
    let (ch, cw) = if crop == 0 { (lh, lw) } else { (crop, crop) };
    let cut = |t: &Tensor, k: usize| -> Result<Tensor> { Ok(t.narrow(2, top * k, ch * k)?.narrow(3, left * k, cw * k)?) };

    let cond = match data.cond {
        Cond::None => None,
        Cond::Fixed(c) => Some(cut(&c.index_select(&idx, 0)?, 1)?),
        Cond::Degrade(spec) => {
            let degraded = ids
                .iter()
                .map(|&i| {
                    let seed: u64 = rng.random();
                    Ok(generate_degradation(&data.corpus.items[i].gt.to_unit_float()?, &spec.with_seed(seed))?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageBuffer> = degraded.iter().collect();
            Some(cut(&encode_images(parts.vae, &refs)?, 1)?)
        }
    };
    let x0 = cut(&data.x0.index_select(&idx, 0)?, 1)?;
    let eps = randn(rng, (ids.len(), lc, ch, cw), DType::F32, &Device::Cpu)?;
    let x_t = q_sample_batch(&x0, &ts, &eps, parts.sched)?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let ctx = parts.net.context(&refs)?;
    let eps_hat = parts.net.eps(&x_t, &ts, &ctx, cond.as_ref())?;
    let eps_loss = mse_t(&eps_hat, &eps)?;
    let mut terms = vec![scalar(&eps_loss)?, 0.0];
    let mut total = eps_loss;

    if cfg.content_loss {
        let limit = (cfg.content_t_fraction * t_max as f64).floor() as usize;
        let rows: Vec<usize> = (0..ts.len()).filter(|&r| ts[r] <= limit).collect();
        if !rows.is_empty() {
            let r = index_tensor(&rows)?;
            let sub_ts: Vec<usize> = rows.iter().map(|&i| ts[i]).collect();
            let x0_hat = predict_x0(&x_t.index_select(&r, 0)?, &eps_hat.index_select(&r, 0)?, &sub_ts, parts.sched)?;
            let decoded = parts.vae.decode(&(x0_hat / parts.vae.latent_scale)?)?;
            let target = cut(&data.gt.index_select(&idx, 0)?.index_select(&r, 0)?, f)?;
            let content = content_loss_terms_t(&decoded, &target, &cfg.loss_weights, &SsimConfig::default())?.total;
            terms[1] = scalar(&content)?;
            total = (total + content)?;
        }
    }
    Ok((total, terms))
}

fn frozen_vae(vae_bundle: &ModelBundle) -> Result<Vae> {
    vae_bundle.expect_kind(ModelKind::Vae)?;
    let copy = vae_bundle.deep_clone()?;
    copy.params.freeze_prefix("");
    Vae::from_bundle(&copy)
}

fn gt_latents(vae: &Vae, corpus: &Corpus) -> Result<(Tensor, Tensor)> {
    let gt = pair_tensors(corpus)?.gt;
    Ok((encode_scaled(vae, &gt)?, gt))
}

fn check_latent_shape(net: &SagiriNet, vae: &Vae) -> Result<()> {
    if net.config().latent_channels != vae.config().latent_channels {
        return Err(Error::InvalidConfig(format!(
            "VAE has {} latent channels, denoiser expects {}",
            vae.config().latent_channels,
            net.config().latent_channels
        )));
    }
    Ok(())
}

/// Trains the unconditional-plus-prompt base denoiser on ground-truth latents.
pub fn train_base(
    mut bundle: ModelBundle,
    vae: &ModelBundle,
    train: &Corpus,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    let unet = unet_from_bundle(&bundle)?;
    let vae = frozen_vae(vae)?;
    let (x0, gt) = gt_latents(&vae, train)?;
    let data = DiffusionData {
        corpus: train,
        x0,
        gt,
        cond: Cond::None,
    };
    let parts = StepParts {
        net: Net::Base(&unet),
        vae: &vae,
        sched,
    };
    let cfg = TrainConfig {
        content_loss: false,
        ..cfg.clone()
    };
    let history = run_loop(&mut bundle, "base", &cfg, out, &["eps", "content"], |_, rng| {
        diffusion_step_loss(&parts, &data, &cfg, rng)
    })?;
    Ok(TrainReport { bundle, history })
}

/// Degradation pretraining: the condition is a randomly degraded ground truth
/// and the target is the clean latent. No mask is applied.
pub fn pretrain_sagiri(
    mut bundle: ModelBundle,
    vae: &ModelBundle,
    train: &Corpus,
    deg: &DegradationSpec,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    deg.validate()?;
    let net = SagiriNet::from_bundle(&bundle)?;
    let vae = frozen_vae(vae)?;
    check_latent_shape(&net, &vae)?;
    if cfg.mask_enabled {
        log::warn!("mask_enabled is ignored during degradation pretraining");
    }
    let cfg = TrainConfig {
        mask_enabled: false,
        ..cfg.clone()
    };
    let (x0, gt) = gt_latents(&vae, train)?;
    let data = DiffusionData {
        corpus: train,
        x0,
        gt,
        cond: Cond::Degrade(deg),
    };
    let parts = StepParts {
        net: Net::Control(&net),
        vae: &vae,
        sched,
    };
    let history = run_loop(&mut bundle, "sagiri_pretrain", &cfg, out, &["eps", "content"], |_, rng| {
        diffusion_step_loss(&parts, &data, &cfg, rng)
    })?;
    Ok(TrainReport { bundle, history })
}

/// Paired fine-tuning: the condition is the restorer's output, and with
/// `mask_enabled` the noised latent keeps the condition on known cells.
pub fn finetune_sagiri(
    mut bundle: ModelBundle,
    vae: &ModelBundle,
    restorer: &Restorer,
    train: &Corpus,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    bundle.expect_kind(ModelKind::Sagiri)?;
    let net = SagiriNet::from_bundle(&bundle)?;
    let vae = frozen_vae(vae)?;
    check_latent_shape(&net, &vae)?;
    let (cond, x0, gt) = paired_latents(&vae, restorer, train, cfg.mask_enabled)?;
    let data = DiffusionData {
        corpus: train,
        x0,
        gt,
        cond: Cond::Fixed(&cond),
    };
    let parts = StepParts {
        net: Net::Control(&net),
        vae: &vae,
        sched,
    };
    let history = run_loop(&mut bundle, "sagiri_finetune", cfg, out, &["eps", "content"], |_, rng| {
        diffusion_step_loss(&parts, &data, cfg, rng)
    })?;
    Ok(TrainReport { bundle, history })
}

/// (condition latents, noised-target latents, gt images) for paired data.
fn paired_latents(vae: &Vae, restorer: &Restorer, corpus: &Corpus, masked: bool) -> Result<(Tensor, Tensor, Tensor)> {
    let stage1 = stage1_outputs(restorer, corpus)?;
    let refs: Vec<&ImageBuffer> = stage1.iter().collect();
    let cond = encode_images(vae, &refs)?;
    let (z_gt, gt) = gt_latents(vae, corpus)?;
    let x0 = if masked {
        combine(&paired_masks(corpus, vae)?, &cond, &z_gt)?
    } else {
        z_gt
    };
    Ok((cond, x0, gt))
}

/// Conditioning used by [`eval_eps_loss`].
pub enum EpsEvalMode<'a> {
    /// Degraded ground truth; item `i` uses `spec.seed ^ i`.
    Degraded(DegradationSpec),
    /// Restorer outputs, with the masked target when `masked`.
    Paired { restorer: &'a Restorer, masked: bool },
}

/// Mean noise-prediction error over the corpus at `n_t` evenly spaced
/// timesteps, with noise fixed by `seed` and ground-truth prompts.
pub fn eval_eps_loss(
    net: &SagiriNet,
    vae: &ModelBundle,
    corpus: &Corpus,
    mode: &EpsEvalMode<'_>,
    sched: &NoiseSchedule,
    n_t: usize,
    seed: u64,
) -> Result<f64> {
    if n_t == 0 {
        return Err(Error::InvalidConfig("n_t must be >= 1".into()));
    }
    let vae = frozen_vae(vae)?;
    check_latent_shape(net, &vae)?;
    let (cond, x0) = match mode {
        EpsEvalMode::Degraded(spec) => {
            let degraded = corpus
                .items
                .iter()
                .enumerate()
                .map(|(i, item)| Ok(generate_degradation(&item.gt.to_unit_float()?, &spec.with_seed(spec.seed ^ i as u64))?.0))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageBuffer> = degraded.iter().collect();
            (encode_images(&vae, &refs)?, gt_latents(&vae, corpus)?.0)
        }
        EpsEvalMode::Paired { restorer, masked } => {
            let (c, x0, _) = paired_latents(&vae, restorer, corpus, *masked)?;
            (c, x0)
        }
    };
    let t_max = sched.len();
    let grid: Vec<usize> = (0..n_t)
        .map(|k| (((k as f64 + 0.5) * t_max as f64 / n_t as f64).round() as usize).clamp(1, t_max))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, lc, lh, lw) = x0.dims4()?;
    let mut acc = 0.0;
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let len = ENCODE_CHUNK.min(n - start);
        let prompts: Vec<&str> = corpus.items[start..start + len].iter().map(|i| i.gt_prompt.as_str()).collect();
        let ctx = net.context(&prompts)?;
        let x0 = x0.narrow(0, start, len)?;
        let c = cond.narrow(0, start, len)?;
        for &t in &grid {
            let eps = randn(&mut rng, (len, lc, lh, lw), DType::F32, &Device::Cpu)?;
            let ts = vec![t; len];
            let x_t = q_sample_batch(&x0, &ts, &eps, sched)?;
            let eps_hat = net.forward(&x_t, &ts, &ctx, &c)?.detach();
            acc += scalar(&mse_t(&eps_hat, &eps)?)? * len as f64;
        }
    }
    Ok(acc / (n * grid.len()) as f64)
}

/// Mean content loss of the full refinement against ground truth over the
/// items whose stage-one input has saturated pixels. `None` when no item does.
pub fn eval_refine_content_loss(
    models: &SagiriModels,
    restorer: &Restorer,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    opts: &RefineOptions,
    weights: &LossWeights,
) -> Result<Option<f64>> {
    let stage1 = stage1_outputs(restorer, corpus)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, (item, s1)) in corpus.items.iter().zip(&stage1).enumerate() {
        let mask = match &item.mask {
            Some(m) => m.clone(),
            None => detect_unknown_mask(&item.lq.to_byte()?, SaturationMode::AllChannels)?,
        };
        if mask.unknown_fraction() == 0.0 {
            continue;
        }
        let o = RefineOptions {
            seed: opts.seed ^ i as u64,
            ..opts.clone()
        };
        let out = refine(s1, Some(&item.gt_prompt), Some(&mask), models, sched, &o)?;
        acc += crate::losses::compose_content_loss(&out, &item.gt.to_unit_float()?, weights, &SsimConfig::default())?;
        count += 1;
    }
    Ok((count > 0).then(|| acc / count as f64))
}
