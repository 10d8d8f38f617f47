//! Known/unknown region masks and their projection onto the latent grid.
//!
//! Convention: `1` marks a known pixel (kept from the input), `0` an unknown
//! one (to be generated).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::buffer::{reflect_index, ColorSpace, ImageBuffer, ValueRange};
use crate::imaging::io::{load_image, save_image};

/// How saturation is tested on multi-channel pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationMode {
    /// Unknown iff every channel is 255, or every channel is 0.
    #[default]
    AllChannels,
    /// Unknown iff any channel is 255 or any channel is 0.
    AnyChannel,
}

/// Mask on the latent grid, stored channel-major (`C x h x w`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LatentMask {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Fraction of unknown latent cells.
    pub fn unknown_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 0).count() as f64 / self.data.len() as f64
    }

    /// Nearest-neighbour expansion of one channel back to pixel resolution.
    pub fn to_pixel_mask(&self, scale: usize) -> RegionMask {
        let (h, w) = (self.height * scale, self.width * scale);
        let mut pixel_mask = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                pixel_mask.push(self.get(0, y / scale, x / scale));
            }
        }
        RegionMask {
            width: w,
            height: h,
            pixel_mask,
            latent: None,
            scale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    pixel_mask: Vec<u8>,
    latent: Option<LatentMask>,
    scale: usize,
}

impl RegionMask {
    pub fn new(width: usize, height: usize, pixel_mask: Vec<u8>) -> Result<Self> {
        if pixel_mask.len() != width * height {
            return Err(Error::shape(width * height, pixel_mask.len()));
        }
        if let Some(v) = pixel_mask.iter().find(|&&v| v > 1) {
            return Err(Error::InvariantViolation(format!(
                "mask entries must be 0 or 1, found {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_mask,
            latent: None,
            scale: 1,
        })
    }

    pub fn all_known(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![1; width * height]).expect("valid mask")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                m.push(f(y, x) as u8);
            }
        }
        Self::new(width, height, m).expect("valid mask")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixel_mask
    }

    #[inline]
    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.pixel_mask[y * self.width + x] == 1
    }

    pub fn latent(&self) -> Option<&LatentMask> {
        self.latent.as_ref()
    }

    pub fn unknown_fraction(&self) -> f64 {
        self.pixel_mask.iter().filter(|&&v| v == 0).count() as f64 / self.pixel_mask.len() as f64
    }

    pub fn reflect_pad(&self, out_h: usize, out_w: usize) -> RegionMask {
        let mut m = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = reflect_index(y, self.height);
            for x in 0..out_w {
                m.push(self.pixel_mask[sy * self.width + reflect_index(x, self.width)]);
            }
        }
        RegionMask::new(out_w, out_h, m).expect("valid mask")
    }

    /// Grayscale byte image with known = 255 and unknown = 0.
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::new(
            self.width,
            self.height,
            1,
            self.pixel_mask.iter().map(|&v| v as f32 * 255.0).collect(),
            ValueRange::Byte,
            ColorSpace::Srgb,
        )
        .expect("mask image is valid")
    }

    /// Interprets the first channel of an image; values >= 128 are known.
    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        let img = img.to_byte()?;
        let m = (0..img.height())
            .flat_map(|y| (0..img.width()).map(move |x| (y, x)))
            .map(|(y, x)| (img.get(y, x, 0) >= 128.0) as u8)
            .collect();
        RegionMask::new(img.width(), img.height(), m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_image(&self.to_image(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(&load_image(path)?)
    }
}

fn is_saturated(px: &[f32], mode: SaturationMode) -> bool {
    match mode {
        SaturationMode::AllChannels => {
            px.iter().all(|&v| v == 255.0) || px.iter().all(|&v| v == 0.0)
        }
        SaturationMode::AnyChannel => px.iter().any(|&v| v == 255.0 || v == 0.0),
    }
}

/// Marks pixels at the dynamic-range extremes (0 or 255) as unknown.
pub fn detect_unknown_mask(ldr: &ImageBuffer, mode: SaturationMode) -> Result<RegionMask> {
    ldr.expect_range(ValueRange::Byte)?;
    Ok(RegionMask::from_fn(ldr.width(), ldr.height(), |y, x| {
        !is_saturated(ldr.pixel(y, x), mode)
    }))
}

/// A latent cell is known iff every pixel of its `scale x scale` footprint is known.
pub fn project_mask_to_latent(mask: &RegionMask, scale: usize, channels: usize) -> Result<RegionMask> {
    if scale == 0 || channels == 0 {
        return Err(Error::InvalidConfig("scale and channels must be >= 1".into()));
    }
    if mask.height % scale != 0 || mask.width % scale != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("dimensions divisible by {scale}"),
            found: format!("{}x{}", mask.height, mask.width),
        });
    }
    let (h, w) = (mask.height / scale, mask.width / scale);
    let mut plane = vec![1u8; h * w];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.is_known(y, x) {
                plane[(y / scale) * w + x / scale] = 0;
            }
        }
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Ok(RegionMask {
        latent: Some(LatentMask {
            channels,
            height: h,
            width: w,
            data,
        }),
        scale,
        ..mask.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(pixels: &[[f32; 3]]) -> ImageBuffer {
        let data = pixels.iter().flatten().copied().collect();
        ImageBuffer::new(pixels.len(), 1, 3, data, ValueRange::Byte, ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn extremes_are_unknown() {
        let img = rgb(&[[255.0; 3], [0.0; 3], [128.0, 40.0, 200.0]]);
        let m = detect_unknown_mask(&img, SaturationMode::AllChannels).unwrap();
        assert_eq!(m.pixels(), &[0, 0, 1]);
    }

    #[test]
    fn mode_table() {
        let img = rgb(&[[255.0, 0.0, 0.0]]);
        let all = detect_unknown_mask(&img, SaturationMode::AllChannels).unwrap();
        let any = detect_unknown_mask(&img, SaturationMode::AnyChannel).unwrap();
        assert_eq!(all.pixels(), &[1]);
        assert_eq!(any.pixels(), &[0]);
    }

    #[test]
    fn mid_gray_is_all_known() {
        let img = ImageBuffer::filled(5, 4, 3, 128.0, ValueRange::Byte).unwrap();
        let m = detect_unknown_mask(&img, SaturationMode::default()).unwrap();
        assert!(m.pixels().iter().all(|&v| v == 1));
    }

    #[test]
    fn rejects_float_input() {
        let img = ImageBuffer::filled(1, 1, 3, 1.0, ValueRange::UnitFloat).unwrap();
        assert!(detect_unknown_mask(&img, SaturationMode::default()).is_err());
    }

    #[test]
    fn projection_footprints() {
        let all = RegionMask::all_known(16, 16);
        let p = project_mask_to_latent(&all, 8, 1).unwrap();
        let lat = p.latent().unwrap();
        assert_eq!((lat.height, lat.width), (2, 2));
        assert!(lat.data.iter().all(|&v| v == 1));

        let one_hole = RegionMask::from_fn(16, 16, |y, x| (y, x) != (3, 5));
        let p = project_mask_to_latent(&one_hole, 8, 4).unwrap();
        let lat = p.latent().unwrap();
        for c in 0..4 {
            assert_eq!(lat.get(c, 0, 0), 0);
            assert_eq!(lat.get(c, 0, 1), 1);
            assert_eq!(lat.get(c, 1, 0), 1);
            assert_eq!(lat.get(c, 1, 1), 1);
        }
        assert!(project_mask_to_latent(&RegionMask::all_known(12, 16), 8, 1).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mask.png");
        let m = RegionMask::from_fn(7, 3, |y, x| (x + y) % 3 != 0);
        m.save(&p).unwrap();
        assert_eq!(RegionMask::load(&p).unwrap(), m);
    }
}
