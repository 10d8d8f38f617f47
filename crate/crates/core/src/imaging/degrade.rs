//! Synthetic blur-blob degradation used to pretrain the refiner.
//!
//! Random thick strokes are dilated and blurred into a soft weight map `w`;
//! the output blends a heavily blurred copy of the image into the original
//! with that weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::buffer::{ImageBuffer, ValueRange};
use crate::imaging::mask::RegionMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    /// Inclusive range for the number of strokes.
    pub n_lines: (u32, u32),
    /// Inclusive range for stroke thickness in pixels.
    pub thickness_px: (u32, u32),
    pub dilation_radius: u32,
    pub mask_blur_sigma: f64,
    pub content_blur_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            n_lines: (1, 8),
            thickness_px: (5, 30),
            dilation_radius: 8,
            mask_blur_sigma: 12.0,
            content_blur_sigma: 10.0,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    /// Defaults are tuned for 256 px images; this rescales the pixel-sized
    /// fields to the shorter side of a `height x width` image.
    pub fn scaled_for(height: usize, width: usize, seed: u64) -> Self {
        let base = Self::default();
        let k = height.min(width) as f64 / 256.0;
        let px = |v: u32| ((v as f64 * k).round() as u32).max(1);
        Self {
            n_lines: base.n_lines,
            thickness_px: (px(base.thickness_px.0), px(base.thickness_px.1)),
            dilation_radius: (base.dilation_radius as f64 * k).round() as u32,
            mask_blur_sigma: (base.mask_blur_sigma * k).max(0.5),
            content_blur_sigma: (base.content_blur_sigma * k).max(0.5),
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.n_lines;
        let (c, d) = self.thickness_px;
        if a > b || c > d || c == 0 {
            return Err(Error::InvalidConfig(format!(
                "degradation ranges must be nonempty: n_lines={:?} thickness={:?}",
                self.n_lines, self.thickness_px
            )));
        }
        if !(self.mask_blur_sigma > 0.0 && self.content_blur_sigma > 0.0) {
            return Err(Error::InvalidConfig("blur sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Degrades `img` and returns it with the mask of its untouched area
/// (`1` where `w = 0`, `0` wherever the blend touched the pixel).
pub fn generate_degradation(
    img: &ImageBuffer,
    spec: &DegradationSpec,
) -> Result<(ImageBuffer, RegionMask)> {
    spec.validate()?;
    if img.range() == ValueRange::HdrLinear {
        return Err(Error::ValueRange {
            expected: "byte or unit_float".into(),
            found: img.range().to_string(),
        });
    }
    let (h, w, c) = img.dims();
    let weight = degradation_weight(h, w, spec);

    // Blur in f64 and store as f32 so a constant plane blurs to itself exactly.
    let mut blurred = vec![0f32; h * w * c];
    for ch in 0..c {
        let plane: Vec<f64> = (0..h * w).map(|i| img.data()[i * c + ch] as f64).collect();
        let b = gaussian_blur_plane(&plane, h, w, spec.content_blur_sigma);
        for (i, v) in b.into_iter().enumerate() {
            blurred[i * c + ch] = v as f32;
        }
    }

    let mut out = img.clone();
    let is_byte = img.range() == ValueRange::Byte;
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let wt = weight[i];
        if wt == 0.0 {
            continue;
        }
        for (ch, v) in px.iter_mut().enumerate() {
            let mixed = wt * blurred[i * c + ch] as f64 + (1.0 - wt) * *v as f64;
            *v = if is_byte {
                mixed.round().clamp(0.0, 255.0) as f32
            } else {
                (mixed as f32).clamp(0.0, 1.0)
            };
        }
    }
    let mask = RegionMask::new(w, h, weight.iter().map(|&wt| (wt == 0.0) as u8).collect())?;
    Ok((out, mask))
}

/// Soft weight map in `[0, 1]` from strokes, dilation and blur.
pub fn degradation_weight(h: usize, w: usize, spec: &DegradationSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.random_range(spec.n_lines.0..=spec.n_lines.1);
    let mut stroke = vec![0f64; h * w];
    for _ in 0..n {
        let p0 = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
        let p1 = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
        let thickness = rng.random_range(spec.thickness_px.0..=spec.thickness_px.1) as f64;
        draw_segment(&mut stroke, h, w, p0, p1, thickness / 2.0);
    }
    let dilated = dilate(&stroke, h, w, spec.dilation_radius as i64);
    gaussian_blur_plane(&dilated, h, w, spec.mask_blur_sigma)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

fn draw_segment(buf: &mut [f64], h: usize, w: usize, p0: (f64, f64), p1: (f64, f64), radius: f64) {
    let (dy, dx) = (p1.0 - p0.0, p1.1 - p0.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - p0.0) * dy + (px - p0.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cy, cx) = (p0.0 + t * dy, p0.1 + t * dx);
            if (py - cy).powi(2) + (px - cx).powi(2) <= r2 {
                buf[y * w + x] = 1.0;
            }
        }
    }
}

/// Binary dilation with a disk of the given radius.
fn dilate(buf: &[f64], h: usize, w: usize, radius: i64) -> Vec<f64> {
    if radius <= 0 {
        return buf.to_vec();
    }
    let mut out = vec![0f64; h * w];
    let offsets: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= radius * radius)
        .collect();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if buf[(y as usize) * w + x as usize] == 0.0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[ny as usize * w + nx as usize] = 1.0;
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders; kernel radius `ceil(3 sigma)`.
pub fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = reflect_signed(x as i64 + k as i64 - r, w);
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = reflect_signed(y as i64 + k as i64 - r, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn reflect_signed(i: i64, n: usize) -> usize {
    let period = 2 * n.max(1) as i64;
    let m = i.rem_euclid(period) as usize;
    // symmetric reflection (edge sample repeated) keeps short images valid
    let idx = if m < n { m } else { period as usize - 1 - m };
    debug_assert!(idx < n);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 3, ValueRange::UnitFloat, |y, x, c| {
            (((y * 13 + x * 7 + c * 5) % 17) as f32) / 16.0
        })
        .unwrap()
    }

    #[test]
    fn seeded_determinism() {
        let img = textured(64, 64);
        let spec = DegradationSpec::scaled_for(64, 64, 11);
        let a = generate_degradation(&img, &spec).unwrap();
        let b = generate_degradation(&img, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_degradation(&img, &spec.with_seed(12)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn untouched_pixels_are_identical() {
        let img = textured(64, 64);
        let spec = DegradationSpec::scaled_for(64, 64, 3);
        let (out, mask) = generate_degradation(&img, &spec).unwrap();
        let mut untouched = 0;
        for y in 0..64 {
            for x in 0..64 {
                if mask.is_known(y, x) {
                    untouched += 1;
                    assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
        assert!(untouched > 0);
        assert!(mask.unknown_fraction() > 0.0);
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        for (range, v) in [(ValueRange::UnitFloat, 0.3f32), (ValueRange::Byte, 77.0)] {
            let img = ImageBuffer::filled(40, 48, 3, v, range).unwrap();
            let spec = DegradationSpec::scaled_for(40, 48, 5);
            let (out, _) = generate_degradation(&img, &spec).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn weight_is_a_probability() {
        let spec = DegradationSpec::scaled_for(64, 64, 9);
        let w = degradation_weight(64, 64, &spec);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn degenerate_spec_rejected() {
        let img = textured(8, 8);
        let spec = DegradationSpec {
            n_lines: (3, 2),
            ..Default::default()
        };
        assert!(generate_degradation(&img, &spec).is_err());
    }
}
