//! DDPM schedule, forward noising and the masked reverse step that keeps
//! known latent cells on their forward-noised trajectory.

use candle_core::{DType, Device, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Which forward-noising level the known branch uses when producing `x_{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnownConvention {
    /// Noise the known latent to level `t`.
    SameLevel,
    /// Noise it to level `t - 1`, matching the sample it replaces.
    #[default]
    Shifted,
}

/// Tables indexed by step `0..=len()`, with step 0 the clean signal (`alpha_bar[0] = 1`).
///
/// A schedule may be a strided subsequence of a longer one; `timesteps[i]`
/// then gives the original timestep that step `i` corresponds to.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    timesteps: Vec<usize>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 30;

pub fn build_schedule(t: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t < 1 {
        return Err(Error::InvalidConfig("schedule needs T >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut beta = vec![0.0];
    match kind {
        ScheduleKind::Linear => {
            for i in 0..t {
                let f = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
                beta.push(beta_start + f * (beta_end - beta_start));
            }
        }
    }
    let mut alpha_bar = vec![1.0];
    for &b in &beta[1..] {
        alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
    }
    Ok(NoiseSchedule::from_alpha_bar(alpha_bar, (0..=t).collect()))
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_T, ScheduleKind::Linear, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    fn from_alpha_bar(alpha_bar: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let n = alpha_bar.len() - 1;
        let mut alpha = vec![1.0];
        let mut beta = vec![0.0];
        let mut posterior_var = vec![0.0];
        for i in 1..=n {
            let a = alpha_bar[i] / alpha_bar[i - 1];
            alpha.push(a);
            beta.push(1.0 - a);
            posterior_var.push((1.0 - a) * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]));
        }
        Self {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
            timesteps,
        }
    }

    /// Number of noising steps `T`.
    pub fn len(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::InvalidConfig(format!("timestep {t} outside 0..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    /// Original timestep for step `t` of this (possibly strided) schedule.
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Original timesteps selected by [`Self::subsequence`]: evenly strided,
    /// ascending, first entry 1 and last entry `T`.
    pub fn strided_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if n_steps < 1 || n_steps > t {
            return Err(Error::InvalidConfig(format!("n_steps must be in 1..={t}, got {n_steps}")));
        }
        if n_steps == 1 {
            return Ok(vec![1]);
        }
        Ok((0..n_steps)
            .map(|i| 1 + ((i * (t - 1)) as f64 / (n_steps - 1) as f64).round() as usize)
            .collect())
    }

    /// Retabulates the schedule on an evenly strided subsequence so that
    /// consecutive selected timesteps act as adjacent steps.
    pub fn subsequence(&self, n_steps: usize) -> Result<NoiseSchedule> {
        let taus = self.strided_timesteps(n_steps)?;
        let mut alpha_bar = vec![1.0];
        let mut timesteps = vec![0];
        for &tau in &taus {
            alpha_bar.push(self.alpha_bar[tau]);
            timesteps.push(self.timesteps[tau]);
        }
        Ok(NoiseSchedule::from_alpha_bar(alpha_bar, timesteps))
    }
}

pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if x0.dims() != eps.dims() {
        return Err(Error::shape(format!("{:?}", x0.dims()), format!("{:?}", eps.dims())));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = sched.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Same as [`q_sample`] with one shared `t` per batch row given as a slice.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(Error::shape(b, ts.len()));
    }
    let rows = (0..b)
        .map(|i| q_sample(&x0.narrow(0, i, 1)?, ts[i], &eps.narrow(0, i, 1)?, sched))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 0)?)
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn randn(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let n = shape.elem_count();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Noise predictor `eps_hat(x_t, t)`, where `t` is an original timestep.
pub trait Denoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> Denoiser for F {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

#[derive(Debug, Clone)]
pub struct SamplerState {
    pub x: Tensor,
    /// Step index in the schedule being sampled.
    pub t: usize,
    pub rng_seed: u64,
}

/// Posterior mean `mu(x_t, t)` from the predicted noise.
pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (b, a, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let coef = b / (1.0 - ab).sqrt();
    Ok(((x_t - (eps_hat * coef)?)? * (1.0 / a.sqrt()))?)
}

/// Model branch: `mu + sqrt(posterior_var) * noise`, with no noise at `t = 1`.
pub fn unknown_branch(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let mu = posterior_mean(x_t, eps_hat, t, sched)?;
    if t <= 1 {
        return Ok(mu);
    }
    Ok((mu + (noise * sched.posterior_var(t).sqrt())?)?)
}

/// Known branch: the clean latent forward-noised to the convention's level.
pub fn known_branch(x0: &Tensor, t: usize, sched: &NoiseSchedule, convention: KnownConvention, noise: &Tensor) -> Result<Tensor> {
    q_sample(x0, known_level(t, convention), noise, sched)
}

pub fn known_level(t: usize, convention: KnownConvention) -> usize {
    match convention {
        KnownConvention::SameLevel => t,
        KnownConvention::Shifted => t - 1,
    }
}

fn splice(mask: &Tensor, known: &Tensor, unknown: &Tensor) -> Result<Tensor> {
    let m = mask.to_dtype(known.dtype())?.broadcast_as(known.dims())?;
    let inv = (m.ones_like()? - &m)?;
    Ok(((&m * known)? + (inv * unknown)?)?)
}

fn validate_mask(mask: &Tensor, x: &Tensor) -> Result<()> {
    if mask.broadcast_as(x.dims()).is_err() {
        return Err(Error::shape(format!("mask broadcastable to {:?}", x.dims()), format!("{:?}", mask.dims())));
    }
    Ok(())
}

/// One reverse step `t -> t-1` with the known/unknown splice.
///
/// Noise is drawn from `rng` for the known branch first, then the unknown branch.
pub fn masked_reverse_step(
    state: &SamplerState,
    x0: &Tensor,
    mask: &Tensor,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    convention: KnownConvention,
    rng: &mut ChaCha8Rng,
) -> Result<SamplerState> {
    if state.t == 0 {
        return Err(Error::InvalidConfig("cannot step below t = 0".into()));
    }
    sched.check(state.t)?;
    validate_mask(mask, &state.x)?;
    let x = &state.x;
    let n_known = randn(rng, x.dims(), x.dtype(), x.device())?;
    let n_unknown = randn(rng, x.dims(), x.dtype(), x.device())?;
    let known = known_branch(x0, state.t, sched, convention, &n_known)?;
    let unknown = unknown_branch(x, eps_hat, state.t, sched, &n_unknown)?;
    Ok(SamplerState {
        x: splice(mask, &known, &unknown)?,
        t: state.t - 1,
        rng_seed: state.rng_seed,
    })
}

/// Plain ancestral reverse step `t -> t-1`.
pub fn reverse_step(state: &SamplerState, eps_hat: &Tensor, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<SamplerState> {
    if state.t == 0 {
        return Err(Error::InvalidConfig("cannot step below t = 0".into()));
    }
    sched.check(state.t)?;
    let x = &state.x;
    let noise = randn(rng, x.dims(), x.dtype(), x.device())?;
    Ok(SamplerState {
        x: unknown_branch(x, eps_hat, state.t, sched, &noise)?,
        t: state.t - 1,
        rng_seed: state.rng_seed,
    })
}

/// Clean latent and latent mask (1 = known) for masked sampling.
pub struct KnownRegion<'a> {
    pub x0: &'a Tensor,
    pub mask: &'a Tensor,
}

pub struct SampleOptions<'a> {
    pub n_steps: usize,
    pub seed: u64,
    pub convention: KnownConvention,
    /// Called after every step with the new state (step index already decremented).
    pub observer: Option<&'a mut dyn FnMut(&SamplerState)>,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_INFERENCE_STEPS,
            seed: 0,
            convention: KnownConvention::default(),
            observer: None,
        }
    }
}

/// Runs the strided reverse chain from pure noise of `shape`.
pub fn sample_loop(
    denoiser: &dyn Denoiser,
    shape: &[usize],
    known: Option<KnownRegion<'_>>,
    sched: &NoiseSchedule,
    opts: SampleOptions<'_>,
    dtype: DType,
) -> Result<Tensor> {
    let sub = sched.subsequence(opts.n_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if let Some(k) = &known {
        if k.x0.dims() != shape {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?}", k.x0.dims())));
        }
    }
    let mut state = SamplerState {
        x: randn(&mut rng, shape, dtype, &Device::Cpu)?,
        t: sub.len(),
        rng_seed: opts.seed,
    };
    let mut observer = opts.observer;
    while state.t > 0 {
        let eps = denoiser.predict_eps(&state.x, sub.timestep(state.t))?;
        state = match &known {
            Some(k) => masked_reverse_step(&state, k.x0, k.mask, &eps, &sub, opts.convention, &mut rng)?,
            None => reverse_step(&state, &eps, &sub, &mut rng)?,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&state);
        }
    }
    Ok(state.x)
}
