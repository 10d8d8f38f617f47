//! Parameter storage, seeded initialization and the small set of layers the
//! models are assembled from.
//!
//! Every parameter is initialized from a stream seeded by `(store seed, name)`,
//! so a model's weights do not depend on construction order. Frozen prefixes
//! hand out detached tensors: gradients never reach them and the optimizer
//! never sees them.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, ImageBuffer, ValueRange};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Shared, named parameter table.
#[derive(Clone)]
pub struct ParamStore(Arc<Mutex<StoreInner>>);

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.lock().expect("param store poisoned");
        f.debug_struct("ParamStore")
            .field("params", &inner.vars.len())
            .field("seed", &inner.seed)
            .field("dtype", &inner.dtype)
            .finish()
    }
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self(Arc::new(Mutex::new(StoreInner {
            vars: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
            seed,
            dtype,
            device: Device::Cpu,
        })))
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, seed: u64, dtype: DType) -> Result<Self> {
        let store = Self::new(seed, dtype);
        {
            let mut inner = store.lock();
            for (k, t) in tensors {
                let t = t.to_dtype(dtype)?.contiguous()?;
                inner.vars.insert(k, Var::from_tensor(&t)?);
            }
        }
        Ok(store)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreInner> {
        self.0.lock().expect("param store poisoned")
    }

    pub fn seed(&self) -> u64 {
        self.lock().seed
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn root(&self) -> Vb {
        Vb {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn freeze_prefix(&self, prefix: &str) {
        let mut inner = self.lock();
        if !inner.frozen_prefixes.iter().any(|p| p == prefix) {
            inner.frozen_prefixes.push(prefix.to_string());
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.lock()
            .frozen_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lock().vars.contains_key(name)
    }

    /// Fetches `name`, creating it with `init` when absent.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        let frozen = inner
            .frozen_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()));
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(if frozen {
                v.as_tensor().detach()
            } else {
                v.as_tensor().clone()
            });
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * { let z: f64 = StandardNormal.sample(&mut rng); z })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites (or inserts) a parameter's value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let mut inner = self.lock();
        let value = value.to_dtype(inner.dtype)?.contiguous()?;
        match inner.vars.get(name) {
            Some(v) if v.dims() == value.dims() => v.set(&value)?,
            _ => {
                inner.vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.lock().vars.get(name).map(|v| v.as_tensor().detach())
    }

    /// Detached snapshot of every parameter, ordered by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Parameters not under a frozen prefix, ordered by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .vars
            .iter()
            .filter(|(k, _)| !inner.frozen_prefixes.iter().any(|p| k.starts_with(p.as_str())))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.lock()
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// All parameter values under `prefix`, concatenated in name order.
    pub fn flat_values(&self, prefix: &str) -> Result<Vec<f64>> {
        let inner = self.lock();
        let mut out = Vec::new();
        for (_, v) in inner.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.extend(
                v.as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }
}

/// Prefix-scoped view into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vb {
    store: ParamStore,
    prefix: String,
}

impl Vb {
    pub fn pp(&self, name: impl std::fmt::Display) -> Vb {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Vb {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.path(name), shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }
}

pub fn linear(vb: &Vb, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = vb.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
    let b = vb.get("bias", &[out_dim], Init::Uniform(bound))?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

pub fn linear_zero(vb: &Vb, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let w = vb.get("weight", &[out_dim, in_dim], Init::Zeros)?;
    let b = vb.get("bias", &[out_dim], Init::Zeros)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// 2-D convolution with `same` padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(vb: &Vb, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: vb.get("weight", &[c_out, c_in, k, k], Init::Uniform(bound))?,
            bias: vb.get("bias", &[c_out], Init::Uniform(bound))?,
            stride,
            padding: k / 2,
        })
    }

    /// Zero-initialized convolution (control fusion layers).
    pub fn zeros(vb: &Vb, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get("weight", &[c_out, c_in, k, k], Init::Zeros)?,
            bias: vb.get("bias", &[c_out], Init::Zeros)?,
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).expect("conv weight is 4-d")
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Same result as `x.conv2d(w, padding, stride, 1, 1)`, computed as an
/// im2col unfold followed by one matrix product, which is much faster to
/// differentiate on CPU.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if ci != c || kh != kw || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        candle_core::bail!("conv2d: input {:?} incompatible with weight {:?}", x.dims(), w.dims());
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let cols = x.contiguous()?.apply_op1(Unfold { k: kh, stride, padding })?;
    let w = w.reshape((o, c * kh * kw))?;
    w.matmul(&cols)?.reshape((o, b, ho, wo))?.permute((1, 0, 2, 3))?.contiguous()
}

/// im2col: `(B, C, H, W)` to `(C*k*k, B*Ho*Wo)`, row `c*k*k + ky*k + kx`.
struct Unfold {
    k: usize,
    stride: usize,
    padding: usize,
}

struct UnfoldGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Unfold {
    fn geom(&self, dims: &[usize]) -> UnfoldGeom {
        let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        UnfoldGeom {
            b,
            c,
            h,
            w,
            ho: (h + 2 * self.padding - self.k) / self.stride + 1,
            wo: (w + 2 * self.padding - self.k) / self.stride + 1,
        }
    }

    /// Calls `f(src_index, dst_index)` for every in-bounds tap.
    fn for_each_tap(&self, g: &UnfoldGeom, mut f: impl FnMut(usize, usize)) {
        let k = self.k;
        let l = g.ho * g.wo;
        let cols = g.b * l;
        for ci in 0..g.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for bi in 0..g.b {
                        let src_plane = (bi * g.c + ci) * g.h * g.w;
                        let dst_base = row * cols + bi * l;
                        for oy in 0..g.ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src_row = src_plane + iy as usize * g.w;
                            let dst_row = dst_base + oy * g.wo;
                            for ox in 0..g.wo {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    f(src_row + ix as usize, dst_row + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl candle_core::CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        if !layout.is_contiguous() {
            candle_core::bail!("unfold needs a contiguous input");
        }
        let g = self.geom(layout.dims());
        let rows = g.c * self.k * self.k;
        let n = rows * g.b * g.ho * g.wo;
        let off = layout.start_offset();
        let shape = candle_core::Shape::from((rows, g.b * g.ho * g.wo));
        Ok(match storage {
            CpuStorage::F32(src) => {
                let mut dst = vec![0f32; n];
                self.for_each_tap(&g, |s, d| dst[d] = src[off + s]);
                (CpuStorage::F32(dst), shape)
            }
            CpuStorage::F64(src) => {
                let mut dst = vec![0f64; n];
                self.for_each_tap(&g, |s, d| dst[d] = src[off + s]);
                (CpuStorage::F64(dst), shape)
            }
            _ => candle_core::bail!("unfold supports f32 and f64 only"),
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.geom(arg.dims());
        let n = g.b * g.c * g.h * g.w;
        let grad = grad_res.contiguous()?;
        let out = match arg.dtype() {
            DType::F64 => {
                let gv = grad.flatten_all()?.to_vec1::<f64>()?;
                let mut acc = vec![0f64; n];
                self.for_each_tap(&g, |s, d| acc[s] += gv[d]);
                Tensor::from_vec(acc, arg.shape(), arg.device())?
            }
            _ => {
                let gv = grad.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                let mut acc = vec![0f32; n];
                self.for_each_tap(&g, |s, d| acc[s] += gv[d]);
                Tensor::from_vec(acc, arg.shape(), arg.device())?.to_dtype(arg.dtype())?
            }
        };
        Ok(Some(out))
    }
}

/// Layer norm over the last dimension, built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &Vb, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get("weight", &[dim], Init::Ones)?,
            bias: vb.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Group norm over `(B, C, H, W)` tensors.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vb: &Vb, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            weight: vb.get("weight", &[channels], Init::Ones)?,
            bias: vb.get("bias", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = gc.sqr()?.mean_keepdim(D::Minus1)?;
        let gn = gc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        gn.reshape((b, c, h, w))?
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Stacks images into a `(B, C, H, W)` tensor of unit-range values.
pub fn images_to_tensor(images: &[&ImageBuffer], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty image batch".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        img.same_shape(first)?;
        let unit = img.to_unit_float()?;
        // HWC -> CHW
        for ch in 0..c {
            for i in 0..h * w {
                data.push(unit.data()[i * c + ch]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(B, C, H, W)` tensor into unit-float images (values clamped).
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageBuffer>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * c * h * w;
        let mut data = vec![0f32; h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                let v = flat[base + ch * h * w + i];
                data[i * c + ch] = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        out.push(ImageBuffer::new(
            w,
            h,
            c,
            data,
            ValueRange::UnitFloat,
            ColorSpace::Srgb,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let a = ParamStore::new(5, DType::F32);
        let b = ParamStore::new(5, DType::F32);
        let a1 = a.get("x.w", &[3, 2], Init::Uniform(1.0)).unwrap();
        let _ = a.get("y.w", &[4], Init::Uniform(1.0)).unwrap();
        let _ = b.get("y.w", &[4], Init::Uniform(1.0)).unwrap();
        let b1 = b.get("x.w", &[3, 2], Init::Uniform(1.0)).unwrap();
        let d = (a1 - b1).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn frozen_params_do_not_receive_gradients() {
        let s = ParamStore::new(1, DType::F64);
        s.freeze_prefix("base.");
        let w1 = s.get("base.w", &[2], Init::Ones).unwrap();
        let w2 = s.get("ctrl.w", &[2], Init::Ones).unwrap();
        let loss = (w1 * &w2).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let trainable = s.trainable();
        assert_eq!(trainable.len(), 1);
        assert_eq!(trainable[0].0, "ctrl.w");
        assert!(grads.get(trainable[0].1.as_tensor()).is_some());
    }

    #[test]
    fn group_norm_normalizes() {
        let s = ParamStore::new(0, DType::F64);
        let gn = GroupNorm::new(&s.root().pp("gn"), 4, 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = ImageBuffer::from_fn(3, 2, 3, ValueRange::UnitFloat, |y, x, c| {
            (y * 9 + x * 3 + c) as f32 / 20.0
        })
        .unwrap();
        let t = images_to_tensor(&[&img, &img], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 3]);
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back[1], img);
    }

    #[test]
    fn unfold_conv_matches_direct_conv_and_gradients() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (b, c, h, w, o, k, pad, stride) in [(2, 3, 7, 5, 4, 3, 1, 1), (1, 2, 8, 8, 3, 3, 1, 2), (3, 4, 4, 6, 2, 1, 0, 1), (1, 1, 5, 5, 1, 3, 0, 1)] {
            let xv: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..o * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Var::from_vec(xv, (b, c, h, w), &Device::Cpu).unwrap();
            let wt = Var::from_vec(wv, (o, c, k, k), &Device::Cpu).unwrap();
            let ours = conv2d(x.as_tensor(), wt.as_tensor(), pad, stride).unwrap();
            let reference = x.as_tensor().conv2d(wt.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let d = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "{d}");
            let probe = Tensor::rand(0f64, 1.0, ours.shape(), &Device::Cpu).unwrap();
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "{d}");
            }
        }
    }
}
