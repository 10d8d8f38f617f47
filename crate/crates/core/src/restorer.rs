//! Stage-one color/brightness restorer.
//!
//! Layout: pixel-unshuffle by 8, a shallow 3x3 conv on RGB summed with a 3x3
//! conv on a fixed YCbCr transform of the same input, residual groups of
//! shifted-window self-attention layers, then three (nearest x2, 3x3 conv)
//! stages back to full resolution and a 3-channel head added to the input.

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelBundle, ModelKind};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::nn::{images_to_tensor, linear, tensor_to_images, Conv2d, Init, LayerNorm, ParamStore, Vb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorerConfig {
    pub unshuffle_scale: usize,
    pub embed_dim: usize,
    /// Number of residual transformer groups.
    pub n_blocks: usize,
    /// Attention layers inside each group.
    pub block_depth: usize,
    pub window_size: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub upsample_stages: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self {
            unshuffle_scale: 8,
            embed_dim: 96,
            n_blocks: 4,
            block_depth: 2,
            window_size: 4,
            n_heads: 4,
            mlp_ratio: 2.0,
            upsample_stages: 3,
        }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if 1usize.checked_shl(self.upsample_stages as u32) != Some(self.unshuffle_scale) {
            return Err(Error::InvalidConfig(format!(
                "2^{} upsample stages must equal unshuffle scale {}",
                self.upsample_stages, self.unshuffle_scale
            )));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.window_size == 0 || self.block_depth == 0 {
            return Err(Error::InvalidConfig("window_size and block_depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.unshuffle_scale * self.window_size
    }

    fn stage_channels(&self) -> Vec<usize> {
        (1..=self.upsample_stages)
            .map(|i| (self.embed_dim >> i).max(8))
            .collect()
    }
}

/// Space-to-depth on `(B, C, H, W)`: output channel index is `c*s*s + dy*s + dx`.
pub fn pixel_unshuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial dims divisible by {s}"),
            found: format!("{h}x{w}"),
        });
    }
    Ok(x.reshape((b, c, h / s, s, w / s, s))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * s * s, h / s, w / s))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if s == 0 || c % (s * s) != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("channels divisible by {}", s * s),
            found: format!("{c}"),
        });
    }
    let oc = c / (s * s);
    Ok(x.reshape((b, oc, s, s, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * s, w * s))?)
}

/// Full-range BT.601 RGB -> YCbCr as a fixed 1x1 linear map.
fn rgb_to_ycbcr(x: &Tensor) -> Result<Tensor> {
    let m = Tensor::from_vec(
        vec![
            0.299f64, 0.587, 0.114, //
            -0.168736, -0.331264, 0.5, //
            0.5, -0.418688, -0.081312,
        ],
        (3, 3, 1, 1),
        x.device(),
    )?
    .to_dtype(x.dtype())?;
    let offset = Tensor::from_vec(vec![0.0f64, 0.5, 0.5], (1, 3, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(crate::nn::conv2d(x, &m, 0, 1)?.broadcast_add(&offset)?)
}

struct Mlp {
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
}

impl Mlp {
    fn new(vb: &Vb, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(&vb.pp("fc1"), dim, hidden)?,
            fc2: linear(&vb.pp("fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)?)
    }
}

struct WindowAttention {
    qkv: candle_nn::Linear,
    proj: candle_nn::Linear,
    bias_table: Tensor,
    relative_index: Tensor,
    heads: usize,
    window: usize,
    scale: f64,
}

impl WindowAttention {
    fn new(vb: &Vb, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let span = 2 * window - 1;
        let n = window * window;
        let mut idx = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) as i64 - (j / window) as i64 + window as i64 - 1;
                let dx = (i % window) as i64 - (j % window) as i64 + window as i64 - 1;
                idx.push((dy * span as i64 + dx) as u32);
            }
        }
        Ok(Self {
            qkv: linear(&vb.pp("qkv"), dim, 3 * dim)?,
            proj: linear(&vb.pp("proj"), dim, dim)?,
            bias_table: vb.get("relative_position_bias_table", &[span * span, heads], Init::Normal(0.02))?,
            relative_index: Tensor::from_vec(idx, n * n, &vb.device())?,
            heads,
            window,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    /// `x`: `(B*nW, N, C)`; `mask`: `(nW, N, N)` additive.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * self.scale)?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?)?;
        let nn = self.window * self.window;
        let bias = self
            .bias_table
            .index_select(&self.relative_index, 0)?
            .reshape((nn, nn, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = candle_nn::ops::softmax_last_dim(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        Ok(self.proj.forward(&out)?)
    }
}

struct SwinLayer {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
}

fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

fn window_reverse(x: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    Ok(x.reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h, w, c))?)
}

/// Additive mask keeping attention inside the regions produced by a cyclic shift.
fn shifted_window_mask(h: usize, w: usize, ws: usize, shift: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let region = |i: usize, n: usize| -> usize {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let n = ws * ws;
    let mut data = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..n)
                .map(|p| {
                    let (y, x) = (wy * ws + p / ws, wx * ws + p % ws);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    data.push(if ids[i] == ids[j] { 0f32 } else { -100.0 });
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (nh * nw, n, n), device)?.to_dtype(dtype)?)
}

impl SwinLayer {
    fn new(vb: &Vb, dim: usize, heads: usize, window: usize, shift: usize, mlp_ratio: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&vb.pp("norm1"), dim)?,
            attn: WindowAttention::new(&vb.pp("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), dim)?,
            mlp: Mlp::new(&vb.pp("mlp"), dim, (dim as f64 * mlp_ratio) as usize)?,
            window,
            shift,
        })
    }

    /// `x`: `(B, H, W, C)` token grid.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let ws = self.window;
        // a window covering the whole grid makes the shift meaningless
        let shift = if h <= ws || w <= ws { 0 } else { self.shift };
        let shortcut = x;
        let mut t = self.norm1.forward(x)?;
        if shift > 0 {
            t = t.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let windows = window_partition(&t, ws)?;
        let mask = if shift > 0 {
            Some(shifted_window_mask(h, w, ws, shift, x.dtype(), x.device())?)
        } else {
            None
        };
        let attended = self.attn.forward(&windows, mask.as_ref())?;
        let mut t = window_reverse(&attended, ws, b, h, w)?;
        if shift > 0 {
            t = t.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        let x = (shortcut + t)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        let _ = c;
        Ok((x + y)?)
    }
}

struct ResidualGroup {
    layers: Vec<SwinLayer>,
    conv: Conv2d,
}

impl ResidualGroup {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // (B, C, H, W) -> tokens (B, H, W, C)
        let mut t = x.permute((0, 2, 3, 1))?.contiguous()?;
        for layer in &self.layers {
            t = layer.forward(&t)?;
        }
        let t = t.permute((0, 3, 1, 2))?.contiguous()?;
        Ok((self.conv.forward(&t)? + x)?)
    }
}

/// The stage-one network. Construct through [`build_restorer`] or [`Restorer::from_bundle`].
pub struct Restorer {
    cfg: RestorerConfig,
    shallow: Conv2d,
    color: Conv2d,
    groups: Vec<ResidualGroup>,
    conv_after_body: Conv2d,
    up: Vec<Conv2d>,
    head: Conv2d,
}

impl Restorer {
    pub fn new(cfg: &RestorerConfig, vb: &Vb) -> Result<Self> {
        cfg.validate()?;
        let s2 = cfg.unshuffle_scale * cfg.unshuffle_scale;
        let dim = cfg.embed_dim;
        let groups = (0..cfg.n_blocks)
            .map(|g| {
                let gvb = vb.pp(format!("body.{g}"));
                let layers = (0..cfg.block_depth)
                    .map(|l| {
                        let shift = if l % 2 == 1 { cfg.window_size / 2 } else { 0 };
                        SwinLayer::new(&gvb.pp(format!("layers.{l}")), dim, cfg.n_heads, cfg.window_size, shift, cfg.mlp_ratio)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ResidualGroup {
                    layers,
                    conv: Conv2d::new(&gvb.pp("conv"), dim, dim, 3, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut up = Vec::new();
        let mut c_in = dim;
        for (i, c_out) in cfg.stage_channels().into_iter().enumerate() {
            up.push(Conv2d::new(&vb.pp(format!("up.{i}")), c_in, c_out, 3, 1)?);
            c_in = c_out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            shallow: Conv2d::new(&vb.pp("shallow"), 3 * s2, dim, 3, 1)?,
            color: Conv2d::new(&vb.pp("color"), 3 * s2, dim, 3, 1)?,
            groups,
            conv_after_body: Conv2d::new(&vb.pp("conv_after_body"), dim, dim, 3, 1)?,
            up,
            head: Conv2d::new(&vb.pp("head"), c_in, 3, 3, 1)?,
        })
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        bundle.expect_kind(ModelKind::Restorer)?;
        let cfg: RestorerConfig = bundle.config()?;
        Self::new(&cfg, &bundle.params.root())
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.cfg
    }

    /// Unclamped forward pass on a `(B, 3, H, W)` batch; sides must be
    /// multiples of [`RestorerConfig::spatial_multiple`].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.cfg.unshuffle_scale;
        let rgb = pixel_unshuffle(x, s)?;
        let ycc = pixel_unshuffle(&rgb_to_ycbcr(x)?, s)?;
        let f0 = (self.shallow.forward(&rgb)? + self.color.forward(&ycc)?)?;
        let mut h = f0.clone();
        for g in &self.groups {
            h = g.forward(&h)?;
        }
        let mut h = (self.conv_after_body.forward(&h)? + f0)?;
        for conv in &self.up {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = candle_nn::ops::leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        Ok((self.head.forward(&h)? + x)?)
    }
}

pub fn build_restorer(cfg: &RestorerConfig, seed: u64) -> Result<ModelBundle> {
    build_restorer_with_dtype(cfg, seed, DType::F32)
}

pub fn build_restorer_with_dtype(cfg: &RestorerConfig, seed: u64, dtype: DType) -> Result<ModelBundle> {
    cfg.validate()?;
    let store = ParamStore::new(seed, dtype);
    Restorer::new(cfg, &store.root())?;
    ModelBundle::new(ModelKind::Restorer, cfg, seed, store)
}

/// Restores one LDR image: reflect-pad, forward, crop, clamp to `[0, 1]`.
pub fn restore(model: &Restorer, ldr: &ImageBuffer) -> Result<ImageBuffer> {
    Ok(restore_batch(model, &[ldr])?.remove(0))
}

pub fn restore_batch(model: &Restorer, images: &[&ImageBuffer]) -> Result<Vec<ImageBuffer>> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w, c) = first.dims();
    if c != 3 {
        return Err(Error::shape("3 channels", c));
    }
    let m = model.cfg.spatial_multiple();
    let padded: Vec<ImageBuffer> = images
        .iter()
        .map(|img| {
            img.same_shape(first)?;
            Ok(img.to_unit_float()?.reflect_pad_to_multiple(m))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&ImageBuffer> = padded.iter().collect();
    let dtype = model.shallow.weight.dtype();
    let x = images_to_tensor(&refs, dtype, &Device::Cpu)?;
    let y = model.forward(&x)?;
    tensor_to_images(&y)?
        .into_iter()
        .map(|img| img.crop(0, 0, h, w))
        .collect()
}
