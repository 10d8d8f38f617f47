//! Latent denoiser U-Net and its parallel control branch.
//!
//! The control branch is a copy of the encoder and middle block fed with the
//! noisy latent concatenated with the condition latent. Each of its level
//! outputs, and the middle output, passes a zero-initialized 1x1 conv and is
//! concatenated into the matching decoder block right after that block's
//! input normalization. Since the first decoder conv is linear, that concat
//! is carried out as a separate weight slice whose product is added to the
//! base conv output; a zero control input therefore reproduces the base
//! network exactly.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelBundle, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{linear, Conv2d, GroupNorm, Init, ParamStore, Vb};
use crate::sagiri::prompt::PromptEncoder;

pub const BASE_PREFIX: &str = "base.";
pub const CONTROL_PREFIX: &str = "ctrl.";
const GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlUnetConfig {
    pub latent_channels: usize,
    pub base_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub prompt_embed_dim: usize,
    pub n_levels: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for ControlUnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_widths: vec![32, 64],
            time_embed_dim: 64,
            prompt_embed_dim: 32,
            n_levels: 2,
            vocab_size: 1024,
            max_tokens: 8,
        }
    }
}

impl ControlUnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 || self.base_widths.len() != self.n_levels {
            return Err(Error::InvalidConfig(format!(
                "base_widths has {} entries but n_levels is {}",
                self.base_widths.len(),
                self.n_levels
            )));
        }
        if self.base_widths.iter().any(|&w| w == 0 || w % 2 != 0) || self.time_embed_dim == 0 {
            return Err(Error::InvalidConfig("widths must be positive and even".into()));
        }
        if self.latent_channels == 0 || self.prompt_embed_dim == 0 {
            return Err(Error::InvalidConfig("latent_channels and prompt_embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Latent sides must be multiples of this.
    pub fn latent_multiple(&self) -> usize {
        1 << (self.n_levels - 1)
    }
}

fn sinusoidal(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * f).cos());
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * f).sin());
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: candle_nn::Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vb: &Vb, cin: usize, cout: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&vb.pp("norm1"), cin, GROUPS)?,
            conv1: Conv2d::new(&vb.pp("conv1"), cin, cout, 3, 1)?,
            temb: linear(&vb.pp("temb"), tdim, cout)?,
            norm2: GroupNorm::new(&vb.pp("norm2"), cout, GROUPS)?,
            conv2: Conv2d::new(&vb.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&vb.pp("skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `extra` is added to the first conv output (the concatenated control slice).
    fn forward(&self, x: &Tensor, temb: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let Some(e) = extra {
            h = (h + e)?;
        }
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

struct CrossAttention {
    norm: GroupNorm,
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    out: candle_nn::Linear,
    scale: f64,
}

impl CrossAttention {
    fn new(vb: &Vb, c: usize, ctx_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&vb.pp("norm"), c, GROUPS)?,
            q: linear(&vb.pp("q"), c, c)?,
            k: linear(&vb.pp("k"), ctx_dim, c)?,
            v: linear(&vb.pp("v"), ctx_dim, c)?,
            out: linear(&vb.pp("out"), c, c)?,
            scale: 1.0 / (c as f64).sqrt(),
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let q = (self.q.forward(&tokens)? * self.scale)?;
        let k = self.k.forward(ctx)?;
        let v = self.v.forward(ctx)?;
        let attn = candle_nn::ops::softmax_last_dim(&q.matmul(&k.t()?.contiguous()?)?)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

struct EncLevel {
    res: ResBlock,
    attn: CrossAttention,
    down: Option<Conv2d>,
}

/// Encoder plus middle block; shared layout of the base network and the control copy.
struct Encoder {
    conv_in: Conv2d,
    levels: Vec<EncLevel>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
}

impl Encoder {
    fn new(vb: &Vb, cfg: &ControlUnetConfig, in_channels: usize) -> Result<Self> {
        let w = &cfg.base_widths;
        let (td, pd) = (cfg.time_embed_dim, cfg.prompt_embed_dim);
        let mut levels = Vec::new();
        let mut c = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let v = vb.pp(format!("enc.levels.{i}"));
            levels.push(EncLevel {
                res: ResBlock::new(&v.pp("res"), c, wi, td)?,
                attn: CrossAttention::new(&v.pp("attn"), wi, pd)?,
                down: if i + 1 < w.len() {
                    Some(Conv2d::new(&v.pp("down"), wi, wi, 3, 2)?)
                } else {
                    None
                },
            });
            c = wi;
        }
        Ok(Self {
            conv_in: Conv2d::new(&vb.pp("enc.conv_in"), in_channels, w[0], 3, 1)?,
            levels,
            mid1: ResBlock::new(&vb.pp("mid.res1"), c, c, td)?,
            mid_attn: CrossAttention::new(&vb.pp("mid.attn"), c, pd)?,
            mid2: ResBlock::new(&vb.pp("mid.res2"), c, c, td)?,
        })
    }

    /// Per-level features (before downsampling) and the middle output.
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        let mut feats = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = level.res.forward(&h, temb, None)?;
            h = level.attn.forward(&h, ctx)?;
            feats.push(h.clone());
            if let Some(d) = &level.down {
                h = d.forward(&h)?;
            }
        }
        let h = self.mid1.forward(&h, temb, None)?;
        let h = self.mid_attn.forward(&h, ctx)?;
        let h = self.mid2.forward(&h, temb, None)?;
        Ok((feats, h))
    }
}

struct DecLevel {
    res: ResBlock,
    attn: CrossAttention,
    up: Option<Conv2d>,
}

/// Time- and prompt-conditioned epsilon predictor.
pub struct Unet {
    cfg: ControlUnetConfig,
    time1: candle_nn::Linear,
    time2: candle_nn::Linear,
    pub prompt: PromptEncoder,
    encoder: Encoder,
    /// Decoder levels, index `i` at the resolution of encoder level `i`.
    decoder: Vec<DecLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Unet {
    /// Builds the network under `vb` (normally the `base.` scope).
    pub fn new(cfg: &ControlUnetConfig, vb: &Vb) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.base_widths;
        let td = cfg.time_embed_dim;
        let n = w.len();
        let decoder = (0..n)
            .map(|i| {
                let v = vb.pp(format!("dec.levels.{i}"));
                let cin = if i + 1 == n { w[i] } else { w[i + 1] };
                // input is (upsampled deeper features, skip) concatenated
                let cin = cin + w[i];
                Ok(DecLevel {
                    res: ResBlock::new(&v.pp("res"), cin, w[i], td)?,
                    attn: CrossAttention::new(&v.pp("attn"), w[i], cfg.prompt_embed_dim)?,
                    up: if i > 0 {
                        Some(Conv2d::new(&v.pp("up"), w[i], w[i], 3, 1)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            time1: linear(&vb.pp("time.fc1"), w[0], td)?,
            time2: linear(&vb.pp("time.fc2"), td, td)?,
            prompt: PromptEncoder::new(&vb.pp("prompt"), cfg.vocab_size, cfg.prompt_embed_dim, cfg.max_tokens)?,
            encoder: Encoder::new(vb, cfg, cfg.latent_channels)?,
            decoder,
            out_norm: GroupNorm::new(&vb.pp("out.norm"), w[0], GROUPS)?,
            out_conv: Conv2d::new(&vb.pp("out.conv"), w[0], cfg.latent_channels, 3, 1)?,
        })
    }

    pub fn config(&self) -> &ControlUnetConfig {
        &self.cfg
    }

    pub fn time_embedding(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let s = sinusoidal(ts, self.cfg.base_widths[0], dtype, &Device::Cpu)?;
        Ok(self.time2.forward(&self.time1.forward(&s)?.silu()?)?)
    }

    fn check_input(&self, x: &Tensor, ts: &[usize]) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        let m = self.cfg.latent_multiple();
        if c != self.cfg.latent_channels || h % m != 0 || w % m != 0 || ts.len() != b {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "({} timesteps, {} channels, sides divisible by {m})",
                    b, self.cfg.latent_channels
                ),
                found: format!("{:?} with {} timesteps", x.dims(), ts.len()),
            });
        }
        Ok(())
    }

    /// Predicted noise. `extra[i]` is added inside decoder level `i`'s first conv.
    fn forward_with(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor, extra: &[Option<Tensor>]) -> Result<Tensor> {
        let (feats, mut h) = self.encoder.forward(x, temb, ctx)?;
        for i in (0..self.decoder.len()).rev() {
            let level = &self.decoder[i];
            h = Tensor::cat(&[&h, &feats[i]], 1)?;
            h = level.res.forward(&h, temb, extra.get(i).and_then(|e| e.as_ref()))?;
            h = level.attn.forward(&h, ctx)?;
            if let Some(up) = &level.up {
                let (_, _, hh, ww) = h.dims4()?;
                h = up.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        Ok(self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?)
    }

    pub fn forward(&self, x: &Tensor, ts: &[usize], ctx: &Tensor) -> Result<Tensor> {
        self.check_input(x, ts)?;
        let temb = self.time_embedding(ts, x.dtype())?;
        self.forward_with(x, &temb, ctx, &[])
    }
}

/// Control features after the zero 1x1 fusion convs; `None` drops a level.
#[derive(Debug, Clone)]
pub struct ControlFeatures {
    pub levels: Vec<Option<Tensor>>,
    pub middle: Option<Tensor>,
}

struct Control {
    encoder: Encoder,
    fuse: Vec<Conv2d>,
    fuse_mid: Conv2d,
    /// Decoder weight slices for the concatenated control channels.
    dec: Vec<Tensor>,
}

/// Frozen base U-Net with the trainable control branch.
pub struct SagiriNet {
    pub base: Unet,
    control: Control,
}

impl SagiriNet {
    pub fn new(cfg: &ControlUnetConfig, store: &ParamStore) -> Result<Self> {
        let root = store.root();
        let base = Unet::new(cfg, &root.pp("base"))?;
        let c = root.pp("ctrl");
        let w = &cfg.base_widths;
        let n = w.len();
        let encoder = Encoder::new(&c, cfg, 2 * cfg.latent_channels)?;
        let fuse = (0..n)
            .map(|i| Conv2d::zeros(&c.pp(format!("fuse.{i}")), w[i], w[i], 1))
            .collect::<Result<Vec<_>>>()?;
        let fuse_mid = Conv2d::zeros(&c.pp("fuse.mid"), w[n - 1], w[n - 1], 1)?;
        let dec = (0..n)
            .map(|i| {
                let extra_in = if i + 1 == n { 2 * w[i] } else { w[i] };
                let bound = 1.0 / ((extra_in * 9) as f64).sqrt();
                c.get(&format!("dec.{i}.weight"), &[w[i], extra_in, 3, 3], Init::Uniform(bound))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            control: Control {
                encoder,
                fuse,
                fuse_mid,
                dec,
            },
        })
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        bundle.expect_kind(ModelKind::Sagiri)?;
        let cfg: ControlUnetConfig = bundle.config()?;
        bundle.params.freeze_prefix(BASE_PREFIX);
        Self::new(&cfg, &bundle.params)
    }

    pub fn config(&self) -> &ControlUnetConfig {
        self.base.config()
    }

    pub fn context(&self, prompts: &[&str]) -> Result<Tensor> {
        self.base.prompt.context(prompts)
    }

    /// Runs the control branch on `concat(x, cond)`.
    pub fn control_features(&self, x: &Tensor, cond: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<ControlFeatures> {
        let (feats, mid) = self.control.encoder.forward(&Tensor::cat(&[x, cond], 1)?, temb, ctx)?;
        let levels = feats
            .iter()
            .zip(&self.control.fuse)
            .map(|(f, conv)| Ok(Some(conv.forward(f)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlFeatures {
            levels,
            middle: Some(self.control.fuse_mid.forward(&mid)?),
        })
    }

    fn decoder_extras(&self, feats: &ControlFeatures) -> Result<Vec<Option<Tensor>>> {
        let n = self.control.dec.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let w = &self.control.dec[i];
            let level = feats.levels.get(i).and_then(|f| f.as_ref());
            let extra = if i + 1 == n {
                let wl = w.dim(0)?;
                let (wm, wf) = (w.narrow(1, 0, wl)?, w.narrow(1, wl, wl)?);
                let a = feats.middle.as_ref().map(|m| crate::nn::conv2d(m, &wm, 1, 1)).transpose()?;
                let b = level.map(|f| crate::nn::conv2d(f, &wf, 1, 1)).transpose()?;
                match (a, b) {
                    (Some(a), Some(b)) => Some((a + b)?),
                    (a, b) => a.or(b),
                }
            } else {
                level.map(|f| crate::nn::conv2d(f, w, 1, 1)).transpose()?
            };
            out.push(extra);
        }
        Ok(out)
    }

    /// Base network with explicit control features.
    pub fn forward_with_features(&self, x: &Tensor, ts: &[usize], ctx: &Tensor, feats: &ControlFeatures) -> Result<Tensor> {
        self.base.check_input(x, ts)?;
        let temb = self.base.time_embedding(ts, x.dtype())?;
        let extras = self.decoder_extras(feats)?;
        self.base.forward_with(x, &temb, ctx, &extras)
    }

    /// Predicted noise for noisy latent `x` conditioned on latent `cond` and prompt context.
    pub fn forward(&self, x: &Tensor, ts: &[usize], ctx: &Tensor, cond: &Tensor) -> Result<Tensor> {
        self.base.check_input(x, ts)?;
        if cond.dims() != x.dims() {
            return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", cond.dims())));
        }
        let temb = self.base.time_embedding(ts, x.dtype())?;
        let feats = self.control_features(x, cond, &temb, ctx)?;
        let extras = self.decoder_extras(&feats)?;
        self.base.forward_with(x, &temb, ctx, &extras)
    }
}

pub fn build_unet(cfg: &ControlUnetConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let store = ParamStore::new(seed, DType::F32);
    Unet::new(cfg, &store.root().pp("base"))?;
    ModelBundle::new(ModelKind::Unet, cfg, seed, store)
}

pub fn unet_from_bundle(bundle: &ModelBundle) -> Result<Unet> {
    bundle.expect_kind(ModelKind::Unet)?;
    let cfg: ControlUnetConfig = bundle.config()?;
    Unet::new(&cfg, &bundle.params.root().pp("base"))
}

/// Attaches a control branch to `base` (a trained U-Net bundle, or a fresh one
/// from `seed`). The control encoder starts as a copy of the base encoder with
/// zero weights on the condition channels; base parameters are frozen.
pub fn build_sagiri(cfg: &ControlUnetConfig, base: Option<&ModelBundle>, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let base = match base {
        Some(b) => {
            b.expect_kind(ModelKind::Unet)?;
            let base_cfg: ControlUnetConfig = b.config()?;
            if &base_cfg != cfg {
                return Err(Error::InvalidConfig(format!(
                    "control levels {:?} do not mirror base levels {:?}",
                    cfg.base_widths, base_cfg.base_widths
                )));
            }
            b.deep_clone()?
        }
        None => build_unet(cfg, seed)?,
    };
    let store = ParamStore::new(seed, DType::F32);
    let lc = cfg.latent_channels;
    for (name, t) in base.params.tensors() {
        store.set(&name, &t)?;
        let Some(rest) = name.strip_prefix(BASE_PREFIX) else { continue };
        if rest == "enc.conv_in.weight" {
            let zeros = t.zeros_like()?;
            store.set(&format!("{CONTROL_PREFIX}{rest}"), &Tensor::cat(&[&t, &zeros], 1)?)?;
            debug_assert_eq!(t.dim(1)?, lc);
        } else if rest.starts_with("enc.") || rest.starts_with("mid.") {
            store.set(&format!("{CONTROL_PREFIX}{rest}"), &t)?;
        }
    }
    store.freeze_prefix(BASE_PREFIX);
    SagiriNet::new(cfg, &store)?;
    ModelBundle::new(ModelKind::Sagiri, cfg, seed, store)
}
