//! Training phases: the stage-one restorer, the VAE, the base denoiser, and
//! the two Sagiri phases (degradation pretraining without masks, then paired
//! fine-tuning with masks and prompts).
//!
//! Every phase runs the same loop. The batch and noise for step `s` come from
//! an RNG seeded by `(seed, s)`, and Adam state is saved with each checkpoint,
//! so resuming from step `s` replays an uninterrupted run exactly.

pub mod corpus;
pub mod optim;
mod sagiri_phases;
mod stage1;
mod vae_phase;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TRAIN_HISTOGRAM_BINS};

pub use corpus::{synthesize_corpus, Corpus, CorpusItem, ManifestRecord, SynthConfig};
pub use optim::Adam;
pub use sagiri_phases::{
    eval_eps_loss, eval_refine_content_loss, finetune_sagiri, pretrain_sagiri, train_base, EpsEvalMode,
};
pub use stage1::{eval_restorer, replay_restorer_loss, stage1_outputs, train_restorer, RestorerEval};
pub use vae_phase::{train_vae, vae_recon_mse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    None,
    #[default]
    GtCaptions,
    LqCaptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Square training crop; 0 uses whole images.
    pub crop_size: usize,
    pub loss_weights: LossWeights,
    pub mask_enabled: bool,
    pub prompt_source: PromptSource,
    /// Probability of replacing a prompt with the empty prompt.
    pub prompt_drop: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub hist_bins: usize,
    /// Adds the decoded content loss for samples with `t <= content_t_fraction * T`.
    pub content_loss: bool,
    pub content_t_fraction: f64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Settings reported for the full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-4,
            steps: 150_000,
            crop_size: 256,
            checkpoint_every: 5000,
            ..Self::toy()
        }
    }

    /// Desk-scale settings used by the toy corpus.
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            steps: 2000,
            seed: 0,
            crop_size: 0,
            loss_weights: LossWeights::default(),
            mask_enabled: false,
            prompt_source: PromptSource::GtCaptions,
            prompt_drop: 0.1,
            grad_clip: 1.0,
            hist_bins: TRAIN_HISTOGRAM_BINS,
            content_loss: true,
            content_t_fraction: 0.25,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop) || !(0.0..=1.0).contains(&self.content_t_fraction) {
            return Err(Error::InvalidConfig("prompt_drop and content_t_fraction must lie in [0, 1]".into()));
        }
        if self.hist_bins < 2 {
            return Err(Error::InvalidConfig("hist_bins must be >= 2".into()));
        }
        self.loss_weights.validate()
    }

    fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

/// One logged optimization step. `loss` is evaluated with the parameters
/// held before the step's update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub terms: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub bundle: ModelBundle,
    pub history: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

pub const LOG_FILE: &str = "train_log.csv";
/// Bundle metadata key naming the phase that last trained it.
pub const PHASE_KEY: &str = "phase";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.safetensors"))
}

/// RNG driving the batch, noise and augmentation of step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn sample_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

struct CsvLog {
    writer: csv::Writer<std::fs::File>,
}

impl CsvLog {
    fn open(path: &Path, columns: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            let mut header = vec!["step", "loss"];
            header.extend_from_slice(columns);
            header.push("lr");
            writer.write_record(&header).map_err(|e| csv_err(path, e))?;
        }
        Ok(Self { writer })
    }

    fn row(&mut self, rec: &StepRecord, lr: f64) -> Result<()> {
        let mut fields = vec![rec.step.to_string(), format!("{}", rec.loss)];
        fields.extend(rec.terms.iter().map(|t| format!("{t}")));
        fields.push(format!("{lr}"));
        self.writer
            .write_record(&fields)
            .map_err(|e| Error::Io {
                path: PathBuf::from(LOG_FILE),
                source: std::io::Error::other(e.to_string()),
            })?;
        self.writer.flush().map_err(|e| Error::io(LOG_FILE, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Shared optimization loop: runs from `bundle.step` up to `cfg.steps`.
/// Runs steps until `bundle.step == cfg.steps`. A bundle last trained by a
/// different phase starts over at step 0 with fresh optimizer state.
pub(crate) fn run_loop<F>(
    bundle: &mut ModelBundle,
    phase: &str,
    cfg: &TrainConfig,
    out: Option<&Path>,
    columns: &[&str],
    mut step_loss: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(u64, &mut ChaCha8Rng) -> Result<(Tensor, Vec<f64>)>,
{
    cfg.validate()?;
    if bundle.extra.get(PHASE_KEY).is_some_and(|p| p != phase) {
        bundle.step = 0;
        bundle.optim.clear();
    }
    bundle.extra.insert(PHASE_KEY.into(), phase.into());
    let params = bundle.params.trainable();
    let mut opt = Adam::new(cfg.lr, cfg.clip());
    if !bundle.optim.is_empty() {
        opt.load_state(&bundle.optim)?;
    }
    let mut log = out.map(|d| CsvLog::open(&d.join(LOG_FILE), columns)).transpose()?;
    let mut history = Vec::new();
    while bundle.step < cfg.steps as u64 {
        let s = bundle.step;
        let mut rng = step_rng(cfg.seed, s);
        let (loss, terms) = step_loss(s, &mut rng)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: s as usize,
                loss: value,
            });
        }
        let grads = loss.backward()?;
        opt.step(&grads, &params)?;
        bundle.step += 1;
        let rec = StepRecord { step: s, loss: value, terms };
        if let Some(log) = log.as_mut() {
            log.row(&rec, cfg.lr)?;
        }
        if s % 100 == 0 {
            log::info!("step {s}: loss {value:.6}");
        }
        history.push(rec);
        if let Some(out) = out {
            if cfg.checkpoint_every > 0 && bundle.step % cfg.checkpoint_every as u64 == 0 {
                bundle.optim = opt.state()?;
                bundle.save(checkpoint_path(out, bundle.step))?;
            }
        }
    }
    bundle.optim = opt.state()?;
    Ok(history)
}

/// Same-offset random square crops of aligned image pairs.
pub(crate) fn crop_offsets(rng: &mut ChaCha8Rng, h: usize, w: usize, crop: usize, align: usize) -> Result<(usize, usize)> {
    if crop == 0 || (crop == h && crop == w) {
        return Ok((0, 0));
    }
    if crop > h || crop > w {
        return Err(Error::InvalidConfig(format!("crop {crop} exceeds image {h}x{w}")));
    }
    let align = align.max(1);
    let top = rng.random_range(0..=(h - crop) / align) * align;
    let left = rng.random_range(0..=(w - crop) / align) * align;
    Ok((top, left))
}
