use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::{crop_offsets, run_loop, sample_indices, scalar, Corpus, StepRecord, TrainConfig, TrainReport};
use crate::checkpoint::{ModelBundle, ModelKind};
use crate::error::{Error, Result};
use crate::evaluation::psnr;
use crate::imaging::ImageBuffer;
use crate::losses::{color_distribution_loss_t, color_loss_terms_t, HistogramMode, LossWeights, EVAL_HISTOGRAM_BINS};
use crate::nn::images_to_tensor;
use crate::restorer::{restore_batch, Restorer};

const EVAL_CHUNK: usize = 16;

pub(crate) struct PairTensors {
    pub lq: Tensor,
    pub gt: Tensor,
}

pub(crate) fn pair_tensors(corpus: &Corpus) -> Result<PairTensors> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lq: Vec<&ImageBuffer> = corpus.items.iter().map(|i| &i.lq).collect();
    let gt: Vec<&ImageBuffer> = corpus.items.iter().map(|i| &i.gt).collect();
    Ok(PairTensors {
        lq: images_to_tensor(&lq, DType::F32, &Device::Cpu)?,
        gt: images_to_tensor(&gt, DType::F32, &Device::Cpu)?,
    })
}

pub(crate) fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
}

fn restorer_batch(data: &PairTensors, cfg: &TrainConfig, align: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let (n, _, h, w) = data.lq.dims4()?;
    let idx = index_tensor(&sample_indices(rng, n, cfg.batch_size))?;
    let (top, left) = crop_offsets(rng, h, w, cfg.crop_size, align)?;
    let (ch, cw) = if cfg.crop_size == 0 { (h, w) } else { (cfg.crop_size, cfg.crop_size) };
    let take = |t: &Tensor| -> Result<Tensor> {
        Ok(t.index_select(&idx, 0)?.narrow(2, top, ch)?.narrow(3, left, cw)?)
    };
    Ok((take(&data.lq)?, take(&data.gt)?))
}

fn restorer_step_loss(
    model: &Restorer,
    data: &PairTensors,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    let (lq, gt) = restorer_batch(data, cfg, model.config().spatial_multiple(), rng)?;
    let terms = color_loss_terms_t(&model.forward(&lq)?, &gt, &cfg.loss_weights, cfg.hist_bins)?;
    let s = terms.scalars()?;
    Ok((terms.total, s[1..].to_vec()))
}

fn check_crop(model: &Restorer, data: &PairTensors, cfg: &TrainConfig) -> Result<()> {
    let m = model.config().spatial_multiple();
    let (_, _, h, w) = data.lq.dims4()?;
    let (ch, cw) = if cfg.crop_size == 0 { (h, w) } else { (cfg.crop_size, cfg.crop_size) };
    if ch % m != 0 || cw % m != 0 {
        return Err(Error::InvalidConfig(format!(
            "training size {ch}x{cw} must be a multiple of {m} (unshuffle scale x window size)"
        )));
    }
    Ok(())
}

/// Trains the stage-one restorer on `(lq, gt)` pairs with the color loss.
/// `bundle` is either a fresh model or a checkpoint to resume from.
pub fn train_restorer(mut bundle: ModelBundle, train: &Corpus, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    bundle.expect_kind(ModelKind::Restorer)?;
    let data = pair_tensors(train)?;
    let model = Restorer::from_bundle(&bundle)?;
    check_crop(&model, &data, cfg)?;
    let history = run_loop(&mut bundle, "restorer", cfg, out, &["mse", "cd", "fdp"], |_, rng| {
        restorer_step_loss(&model, &data, cfg, rng)
    })?;
    Ok(TrainReport { bundle, history })
}

/// Recomputes the loss logged at step `bundle.step` from the bundle's parameters alone.
pub fn replay_restorer_loss(bundle: &ModelBundle, train: &Corpus, cfg: &TrainConfig) -> Result<StepRecord> {
    bundle.expect_kind(ModelKind::Restorer)?;
    let data = pair_tensors(train)?;
    let model = Restorer::from_bundle(bundle)?;
    let mut rng = super::step_rng(cfg.seed, bundle.step);
    let (loss, terms) = restorer_step_loss(&model, &data, cfg, &mut rng)?;
    Ok(StepRecord {
        step: bundle.step,
        loss: scalar(&loss)?,
        terms,
    })
}

/// Mean metrics of a restorer over a paired corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestorerEval {
    /// Composite color loss with the training histogram.
    pub color_loss: f64,
    /// Hard-binned color-distribution loss at 256 bins.
    pub cd_hard: f64,
    pub psnr: f64,
    pub mse: f64,
}

pub fn eval_restorer(model: &Restorer, corpus: &Corpus, weights: &LossWeights, hist_bins: usize) -> Result<RestorerEval> {
    let data = pair_tensors(corpus)?;
    let n = corpus.len();
    let mut acc = [0f64; 3];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(n - start);
        let lq = data.lq.narrow(0, start, len)?;
        let gt = data.gt.narrow(0, start, len)?;
        let pred = model.forward(&lq)?.detach();
        let terms = color_loss_terms_t(&pred, &gt, weights, hist_bins)?.scalars()?;
        let clamped = pred.clamp(0.0, 1.0)?;
        let cd = scalar(&color_distribution_loss_t(&clamped, &gt, EVAL_HISTOGRAM_BINS, HistogramMode::Hard)?)?;
        let mse = scalar(&crate::losses::mse_t(&clamped, &gt)?)?;
        let w = len as f64;
        acc[0] += terms[0] * w;
        acc[1] += cd * w;
        acc[2] += mse * w;
    }
    let outputs = stage1_outputs(model, corpus)?;
    let mut p = 0.0;
    for (out, item) in outputs.iter().zip(&corpus.items) {
        p += psnr(out, &item.gt)?;
    }
    let n = n as f64;
    Ok(RestorerEval {
        color_loss: acc[0] / n,
        cd_hard: acc[1] / n,
        mse: acc[2] / n,
        psnr: p / n,
    })
}

/// Restorer outputs for every `lq` image of the corpus, in order.
pub fn stage1_outputs(model: &Restorer, corpus: &Corpus) -> Result<Vec<ImageBuffer>> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.items.chunks(EVAL_CHUNK) {
        let imgs: Vec<&ImageBuffer> = chunk.iter().map(|i| &i.lq).collect();
        out.extend(restore_batch(model, &imgs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restorer::{build_restorer, RestorerConfig};
    use crate::training::{synthesize_corpus, SynthConfig};

    fn tiny_restorer() -> RestorerConfig {
        RestorerConfig {
            unshuffle_scale: 4,
            embed_dim: 16,
            n_blocks: 1,
            block_depth: 2,
            window_size: 2,
            n_heads: 2,
            mlp_ratio: 2.0,
            upsample_stages: 2,
        }
    }

    fn corpus() -> (tempfile::TempDir, Corpus) {
        let d = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 6,
            n_val: 0,
            size: 16,
            ..Default::default()
        };
        let (t, _) = synthesize_corpus(d.path(), &cfg, 3).unwrap();
        let c = Corpus::load(t).unwrap();
        (d, c)
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps,
            checkpoint_every: 2,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (_d, train) = corpus();
        let out = tempfile::tempdir().unwrap();
        let full = train_restorer(build_restorer(&tiny_restorer(), 1).unwrap(), &train, &cfg(4), None).unwrap();
        let _ = train_restorer(build_restorer(&tiny_restorer(), 1).unwrap(), &train, &cfg(2), Some(out.path())).unwrap();
        let ckpt = ModelBundle::load(crate::training::checkpoint_path(out.path(), 2)).unwrap();
        assert_eq!(ckpt.step, 2);
        let replay = replay_restorer_loss(&ckpt, &train, &cfg(4)).unwrap();
        assert_eq!(replay.loss, full.history[2].loss);
        let resumed = train_restorer(ckpt, &train, &cfg(4), None).unwrap();
        assert_eq!(resumed.losses(), full.losses()[2..].to_vec());
        let log = std::fs::read_to_string(out.path().join(crate::training::LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.starts_with("step,loss,mse,cd,fdp,lr"));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (_d, train) = corpus();
        let b = build_restorer(&tiny_restorer(), 2).unwrap();
        let before = b.params.flat_values("").unwrap();
        let c = TrainConfig { lr: 0.0, ..cfg(3) };
        let r = train_restorer(b, &train, &c, None).unwrap();
        assert_eq!(r.bundle.params.flat_values("").unwrap(), before);
        assert_eq!(r.bundle.step, 3);
    }

    #[test]
    fn errors() {
        let b = build_restorer(&tiny_restorer(), 2).unwrap();
        assert!(matches!(
            train_restorer(b, &Corpus::default(), &cfg(1), None),
            Err(Error::EmptyDataset)
        ));
        let (_d, train) = corpus();
        let b = build_restorer(&tiny_restorer(), 2).unwrap();
        let bad = TrainConfig { crop_size: 12, ..cfg(1) };
        assert!(matches!(train_restorer(b, &train, &bad, None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn nan_loss_aborts() {
        let (_d, train) = corpus();
        let b = build_restorer(&tiny_restorer(), 2).unwrap();
        let name = b.params.names().into_iter().find(|n| n.ends_with("weight")).unwrap();
        let t = b.params.tensor(&name).unwrap();
        b.params.set(&name, &(t.ones_like().unwrap() * f64::NAN).unwrap()).unwrap();
        match train_restorer(b, &train, &cfg(2), None) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
