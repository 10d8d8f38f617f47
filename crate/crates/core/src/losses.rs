//! Training objectives for both stages.
//!
//! Tensor functions take `(B, C, H, W)` batches of unit-range values and are
//! differentiable; the `ImageBuffer` wrappers evaluate the same code in `f64`.
//! Reductions: histograms are normalized by pixel count and summed over bins
//! and channels; the frequency term is the mean magnitude of the unnormalized
//! 2-D DFT of the difference; batch reductions are means.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, ValueRange};

pub const TRAIN_HISTOGRAM_BINS: usize = 64;
pub const EVAL_HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda6: 0.01,
        }
    }
}

impl LossWeights {
    /// Color weights `(mse, cd, fdp)` with the content weights left at default.
    pub fn color(mse: f64, cd: f64, fdp: f64) -> Self {
        Self {
            lambda1: mse,
            lambda2: cd,
            lambda3: fdp,
            ..Self::default()
        }
    }

    /// Content weights `(mse, ssim, fdp)` with the color weights left at default.
    pub fn content(mse: f64, ssim: f64, fdp: f64) -> Self {
        Self {
            lambda4: mse,
            lambda5: ssim,
            lambda6: fdp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss weights must be finite and nonnegative: {all:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    Hard,
    Soft,
}

/// Per-channel histogram over `[0, 1]`; bins hold raw (fractional) counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<Vec<f64>>,
    pub n_bins: usize,
    pub mode: HistogramMode,
    pub range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SsimWindow {
    Global,
    Gaussian { size: usize, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
}

impl SsimConfig {
    pub fn for_range(l: f64, window: SsimWindow) -> Self {
        Self {
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
            window,
        }
    }

    /// 11x11 Gaussian window with sigma 1.5.
    pub fn windowed() -> Self {
        Self::for_range(
            1.0,
            SsimWindow::Gaussian {
                size: 11,
                sigma: 1.5,
            },
        )
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::for_range(1.0, SsimWindow::Global)
    }
}

fn check_bins(n: usize) -> Result<()> {
    if n < 2 {
        Err(Error::InvalidConfig(format!("histogram needs >= 2 bins, got {n}")))
    } else {
        Ok(())
    }
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::shape(a.dims(), b.dims()))
    }
}

#[cfg(test)]
fn bin_centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Triangular-kernel histogram, `(B, C, N)`, normalized by pixel count.
///
/// Values are clamped to the outer bin centers so edge mass is kept; each
/// value splits unit mass between its two nearest centers.
pub fn soft_histogram_t(x: &Tensor, n_bins: usize) -> Result<Tensor> {
    check_bins(n_bins)?;
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(SoftHistogram { n_bins })?)
}

/// Lower bin and the share of mass going to the bin above it; `None` when
/// the value sits outside the outer centers (clamped, zero gradient).
#[inline]
fn soft_bin(v: f64, n_bins: usize) -> (usize, f64, bool) {
    let n = n_bins as f64;
    let inside = v > 0.5 / n && v < 1.0 - 0.5 / n;
    let u = (v * n - 0.5).clamp(0.0, n - 1.0);
    let i = (u.floor() as usize).min(n_bins - 2);
    (i, u - i as f64, inside)
}

/// Scatter form of the triangular kernel: linear in the inputs between bin
/// centers, so the backward pass is a gather of neighbouring bin gradients.
struct SoftHistogram {
    n_bins: usize,
}

impl SoftHistogram {
    fn planes(&self, layout: &candle_core::Layout) -> candle_core::Result<(usize, usize, usize)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        Ok((b * c, h * w, layout.start_offset()))
    }
}

impl candle_core::CustomOp1 for SoftHistogram {
    fn name(&self) -> &'static str {
        "soft-histogram"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        if !layout.is_contiguous() {
            candle_core::bail!("soft-histogram needs a contiguous input");
        }
        let (planes, p, off) = self.planes(layout)?;
        let n = self.n_bins;
        let hist = |values: &mut dyn Iterator<Item = f64>| {
            let mut out = vec![0f64; planes * n];
            for (k, v) in values.enumerate() {
                let (i, frac, _) = soft_bin(v, n);
                let base = (k / p) * n;
                out[base + i] += 1.0 - frac;
                out[base + i + 1] += frac;
            }
            out.iter_mut().for_each(|h| *h /= p as f64);
            out
        };
        let (b, c, _, _) = layout.shape().dims4()?;
        let shape = candle_core::Shape::from((b, c, n));
        let len = planes * p;
        Ok(match storage {
            CpuStorage::F32(d) => {
                let h = hist(&mut d[off..off + len].iter().map(|&v| v as f64));
                (CpuStorage::F32(h.into_iter().map(|v| v as f32).collect()), shape)
            }
            CpuStorage::F64(d) => (CpuStorage::F64(hist(&mut d[off..off + len].iter().copied())), shape),
            _ => candle_core::bail!("soft-histogram supports f32 and f64 only"),
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let (planes, p, n) = (b * c, h * w, self.n_bins);
        let x = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let g = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let scale = n as f64 / p as f64;
        let mut out = vec![0f64; planes * p];
        for (k, (o, &v)) in out.iter_mut().zip(&x).enumerate() {
            let (i, _, inside) = soft_bin(v, n);
            if inside {
                let base = (k / p) * n;
                *o = scale * (g[base + i + 1] - g[base + i]);
            }
        }
        Ok(Some(Tensor::from_vec(out, (b, c, h, w), arg.device())?.to_dtype(arg.dtype())?))
    }
}

fn hard_histogram_t(x: &Tensor, n_bins: usize) -> Result<Tensor> {
    check_bins(n_bins)?;
    let (b, c, h, w) = x.dims4()?;
    let flat = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut hist = vec![0f64; b * c * n_bins];
    let p = h * w;
    for (plane, values) in flat.chunks_exact(p).enumerate() {
        for &v in values {
            hist[plane * n_bins + hard_bin(v, n_bins)] += 1.0;
        }
    }
    hist.iter_mut().for_each(|v| *v /= p as f64);
    Ok(Tensor::from_vec(hist, (b, c, n_bins), x.device())?.to_dtype(x.dtype())?)
}

#[inline]
fn hard_bin(v: f64, n_bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Sum over channels and bins of absolute histogram differences, batch mean.
pub fn color_distribution_loss_t(
    pred: &Tensor,
    target: &Tensor,
    n_bins: usize,
    mode: HistogramMode,
) -> Result<Tensor> {
    same_dims(pred, target)?;
    let (hp, ht) = match mode {
        HistogramMode::Soft => (soft_histogram_t(pred, n_bins)?, soft_histogram_t(target, n_bins)?),
        HistogramMode::Hard => (hard_histogram_t(pred, n_bins)?, hard_histogram_t(target, n_bins)?),
    };
    let per_item = (hp - ht)?.abs()?.sum((1, 2))?;
    Ok(per_item.mean_all()?)
}

fn dft_matrices(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut cos = Vec::with_capacity(n * n);
    let mut sin = Vec::with_capacity(n * n);
    for k in 0..n {
        for m in 0..n {
            // reduce the index product first for accurate large-n angles
            let angle = 2.0 * PI * ((k * m) % n) as f64 / n as f64;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    let c = Tensor::from_vec(cos, (n, n), device)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(sin, (n, n), device)?.to_dtype(dtype)?;
    Ok((c, s))
}


/// Mean magnitude of the 2-D DFT of `pred - target` over bins, channels and batch.
pub fn frequency_preservation_loss_t(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_dims(pred, target)?;
    let (b, c, h, w) = pred.dims4()?;
    let (ch, sh) = dft_matrices(h, pred.dtype(), pred.device())?;
    let (cw, sw) = dft_matrices(w, pred.dtype(), pred.device())?;
    let diff = (pred - target)?.reshape((b * c, h, w))?;
    // batched matmul needs materialized operands; stride-0 batches give wrong products
    let ch = ch.broadcast_left(b * c)?.contiguous()?;
    let sh = sh.broadcast_left(b * c)?.contiguous()?;
    let cw = cw.broadcast_left(b * c)?.contiguous()?;
    let sw = sw.broadcast_left(b * c)?.contiguous()?;
    let cx = ch.matmul(&diff)?;
    let sx = sh.matmul(&diff)?;
    let re = (cx.matmul(&cw)? - sx.matmul(&sw)?)?;
    let im = (cx.matmul(&sw)? + sx.matmul(&cw)?)?;
    let power = (re.sqr()? + im.sqr()?)?;
    // sqrt is evaluated on 1 where the power vanishes so the gradient stays finite
    let nonzero = power.gt(0.0)?;
    let safe = nonzero.where_cond(&power, &power.ones_like()?)?;
    let mag = nonzero.where_cond(&safe.sqrt()?, &power.zeros_like()?)?;
    Ok(mag.mean_all()?)
}

pub fn mse_t(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_dims(pred, target)?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

fn gaussian_window(size: usize, sigma: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let r = size as f64 / 2.0 - 0.5;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut k = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            k.push(a * b / (s * s));
        }
    }
    Ok(Tensor::from_vec(k, (1, 1, size, size), device)?.to_dtype(dtype)?)
}

/// Mean SSIM over batch and channels.
pub fn ssim_t(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    same_dims(x, y)?;
    let (b, c, h, w) = x.dims4()?;
    let (mx, my, vx, vy, cxy) = match cfg.window {
        SsimWindow::Global => {
            let xf = x.reshape((b * c, h * w))?;
            let yf = y.reshape((b * c, h * w))?;
            let mx = xf.mean_keepdim(D::Minus1)?;
            let my = yf.mean_keepdim(D::Minus1)?;
            let xc = xf.broadcast_sub(&mx)?;
            let yc = yf.broadcast_sub(&my)?;
            let vx = xc.sqr()?.mean_keepdim(D::Minus1)?;
            let vy = yc.sqr()?.mean_keepdim(D::Minus1)?;
            let cxy = (xc * yc)?.mean_keepdim(D::Minus1)?;
            (mx, my, vx, vy, cxy)
        }
        SsimWindow::Gaussian { size, sigma } => {
            let size = size.min(h).min(w);
            let k = gaussian_window(size, sigma, x.dtype(), x.device())?;
            let xf = x.reshape((b * c, 1, h, w))?;
            let yf = y.reshape((b * c, 1, h, w))?;
            let filt = |t: &Tensor| crate::nn::conv2d(t, &k, 0, 1);
            let mx = filt(&xf)?;
            let my = filt(&yf)?;
            let vx = (filt(&xf.sqr()?)? - mx.sqr()?)?;
            let vy = (filt(&yf.sqr()?)? - my.sqr()?)?;
            let cxy = (filt(&(&xf * &yf)?)? - (&mx * &my)?)?;
            (mx, my, vx, vy, cxy)
        }
    };
    let num = ((((&mx * &my)? * 2.0)? + cfg.c1)? * ((cxy * 2.0)? + cfg.c2)?)?;
    let den = (((mx.sqr()? + my.sqr()?)? + cfg.c1)? * ((vx + vy)? + cfg.c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// Individual terms of a composite loss, each weighted.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub mse: Tensor,
    pub second: Tensor,
    pub fdp: Tensor,
}

impl LossTerms {
    pub fn scalars(&self) -> Result<[f64; 4]> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([f(&self.total)?, f(&self.mse)?, f(&self.second)?, f(&self.fdp)?])
    }
}

/// `l1 * MSE + l2 * L_cd(soft) + l3 * L_fdp`; `second` holds the weighted histogram term.
pub fn color_loss_terms_t(
    pred: &Tensor,
    target: &Tensor,
    w: &LossWeights,
    n_bins: usize,
) -> Result<LossTerms> {
    w.validate()?;
    let mse = (mse_t(pred, target)? * w.lambda1)?;
    let cd = if w.lambda2 > 0.0 {
        (color_distribution_loss_t(pred, target, n_bins, HistogramMode::Soft)? * w.lambda2)?
    } else {
        mse.zeros_like()?
    };
    let fdp = if w.lambda3 > 0.0 {
        (frequency_preservation_loss_t(pred, target)? * w.lambda3)?
    } else {
        mse.zeros_like()?
    };
    let total = ((&mse + &cd)? + &fdp)?;
    Ok(LossTerms {
        total,
        mse,
        second: cd,
        fdp,
    })
}

pub fn compose_color_loss_t(pred: &Tensor, target: &Tensor, w: &LossWeights, n_bins: usize) -> Result<Tensor> {
    Ok(color_loss_terms_t(pred, target, w, n_bins)?.total)
}

/// `l4 * MSE + l5 * (1 - SSIM) + l6 * L_fdp`; `second` holds the weighted SSIM term.
pub fn content_loss_terms_t(
    pred: &Tensor,
    target: &Tensor,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<LossTerms> {
    w.validate()?;
    let mse = (mse_t(pred, target)? * w.lambda4)?;
    let ssim = if w.lambda5 > 0.0 {
        (ssim_t(pred, target, cfg)?.affine(-1.0, 1.0)? * w.lambda5)?
    } else {
        mse.zeros_like()?
    };
    let fdp = if w.lambda6 > 0.0 {
        (frequency_preservation_loss_t(pred, target)? * w.lambda6)?
    } else {
        mse.zeros_like()?
    };
    let total = ((&mse + &ssim)? + &fdp)?;
    Ok(LossTerms {
        total,
        mse,
        second: ssim,
        fdp,
    })
}

pub fn compose_content_loss_t(
    pred: &Tensor,
    target: &Tensor,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<Tensor> {
    Ok(content_loss_terms_t(pred, target, w, cfg)?.total)
}

// ---------------------------------------------------------------------------
// ImageBuffer front ends (f64)

fn unit_tensor(img: &ImageBuffer) -> Result<Tensor> {
    if img.range() == ValueRange::HdrLinear {
        return Err(Error::ValueRange {
            expected: "unit_float".into(),
            found: img.range().to_string(),
        });
    }
    crate::nn::images_to_tensor(&[img], DType::F64, &Device::Cpu)
}

fn pair(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(Tensor, Tensor)> {
    pred.same_shape(target)?;
    Ok((unit_tensor(pred)?, unit_tensor(target)?))
}

fn scalar(t: Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn soft_histogram(img: &ImageBuffer, n_bins: usize) -> Result<Histogram> {
    histogram(img, n_bins, HistogramMode::Soft)
}

pub fn histogram(img: &ImageBuffer, n_bins: usize, mode: HistogramMode) -> Result<Histogram> {
    let t = unit_tensor(img)?;
    let h = match mode {
        HistogramMode::Soft => soft_histogram_t(&t, n_bins)?,
        HistogramMode::Hard => hard_histogram_t(&t, n_bins)?,
    };
    let p = img.pixel_count() as f64;
    let v = h.squeeze(0)?.to_vec2::<f64>()?;
    Ok(Histogram {
        bins: v
            .into_iter()
            .map(|row| row.into_iter().map(|x| x * p).collect())
            .collect(),
        n_bins,
        mode,
        range: (0.0, 1.0),
    })
}

pub fn color_distribution_loss(
    pred: &ImageBuffer,
    target: &ImageBuffer,
    n_bins: usize,
    mode: HistogramMode,
) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    scalar(color_distribution_loss_t(&p, &t, n_bins, mode)?)
}

pub fn frequency_preservation_loss(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    scalar(frequency_preservation_loss_t(&p, &t)?)
}

pub fn ssim_index(x: &ImageBuffer, y: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    let (a, b) = pair(x, y)?;
    scalar(ssim_t(&a, &b, cfg)?)
}

pub fn mse(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    scalar(mse_t(&p, &t)?)
}

pub fn compose_color_loss(
    pred: &ImageBuffer,
    target: &ImageBuffer,
    w: &LossWeights,
    n_bins: usize,
) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    scalar(compose_color_loss_t(&p, &t, w, n_bins)?)
}

pub fn compose_content_loss(
    pred: &ImageBuffer,
    target: &ImageBuffer,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    scalar(compose_content_loss_t(&p, &t, w, cfg)?)
}
