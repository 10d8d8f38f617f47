use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric interpretation of the samples in an [`ImageBuffer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Samples in `[0, 1]`.
    UnitFloat,
    /// Integer samples in `[0, 255]`.
    Byte,
    /// Scene-referred radiance, any nonnegative value.
    HdrLinear,
}

impl std::fmt::Display for ValueRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ValueRange::UnitFloat => "unit_float",
            ValueRange::Byte => "byte",
            ValueRange::HdrLinear => "hdr_linear",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Srgb,
    Linear,
}

/// Interleaved `H x W x C` raster. `C` is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    range: ValueRange,
    colorspace: ColorSpace,
}

impl ImageBuffer {
    /// Builds an image and checks every invariant of `range`.
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        range: ValueRange,
        colorspace: ColorSpace,
    ) -> Result<Self> {
        let img = Self {
            width,
            height,
            channels,
            data,
            range,
            colorspace,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        value: f32,
        range: ValueRange,
    ) -> Result<Self> {
        let colorspace = default_colorspace(range);
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
            range,
            colorspace,
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(width, height, channels, data, range, default_colorspace(range))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvariantViolation(format!(
                "channel count must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvariantViolation("image has zero area".into()));
        }
        let expected = self.width * self.height * self.channels;
        if self.data.len() != expected {
            return Err(Error::shape(expected, self.data.len()));
        }
        for (i, &v) in self.data.iter().enumerate() {
            let ok = v.is_finite()
                && match self.range {
                    ValueRange::UnitFloat => (0.0..=1.0).contains(&v),
                    ValueRange::Byte => (0.0..=255.0).contains(&v) && v.fract() == 0.0,
                    ValueRange::HdrLinear => v >= 0.0,
                };
            if !ok {
                return Err(Error::InvariantViolation(format!(
                    "sample {i} = {v} is not valid for a {} image",
                    self.range
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn expect_range(&self, range: ValueRange) -> Result<()> {
        if self.range == range {
            Ok(())
        } else {
            Err(Error::ValueRange {
                expected: range.to_string(),
                found: self.range.to_string(),
            })
        }
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::shape(self.dims(), other.dims()))
        }
    }

    /// Byte images are divided by 255; unit images are returned unchanged.
    pub fn to_unit_float(&self) -> Result<ImageBuffer> {
        match self.range {
            ValueRange::UnitFloat => Ok(self.clone()),
            ValueRange::Byte => Ok(ImageBuffer {
                data: self.data.iter().map(|v| v / 255.0).collect(),
                range: ValueRange::UnitFloat,
                ..self.clone()
            }),
            ValueRange::HdrLinear => Err(Error::ValueRange {
                expected: "byte or unit_float".into(),
                found: self.range.to_string(),
            }),
        }
    }

    /// Unit images are scaled by 255 and rounded.
    pub fn to_byte(&self) -> Result<ImageBuffer> {
        match self.range {
            ValueRange::Byte => Ok(self.clone()),
            ValueRange::UnitFloat => Ok(ImageBuffer {
                data: self
                    .data
                    .iter()
                    .map(|v| (v * 255.0).round().clamp(0.0, 255.0))
                    .collect(),
                range: ValueRange::Byte,
                ..self.clone()
            }),
            ValueRange::HdrLinear => Err(Error::ValueRange {
                expected: "byte or unit_float".into(),
                found: self.range.to_string(),
            }),
        }
    }

    /// Reflect-pads bottom/right edges so both sides become multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> ImageBuffer {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        self.reflect_pad(ph, pw)
    }

    pub fn reflect_pad(&self, out_h: usize, out_w: usize) -> ImageBuffer {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(out_h * out_w * c);
        for y in 0..out_h {
            let sy = reflect_index(y, self.height);
            for x in 0..out_w {
                let sx = reflect_index(x, self.width);
                data.extend_from_slice(self.pixel(sy, sx));
            }
        }
        ImageBuffer {
            width: out_w,
            height: out_h,
            data,
            ..self.clone()
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageBuffer> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(
                (self.height, self.width),
                (top + h, left + w),
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(ImageBuffer {
            width: w,
            height: h,
            data,
            ..self.clone()
        })
    }

    /// Returns a copy with samples clamped to `[0, 1]` and range set to unit float.
    pub fn clamped_unit(&self) -> ImageBuffer {
        ImageBuffer {
            data: self
                .data
                .iter()
                .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
                .collect(),
            range: ValueRange::UnitFloat,
            ..self.clone()
        }
    }

    /// Replicates a single channel to RGB; RGB images are returned unchanged.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ..self.clone()
        }
    }
}

fn default_colorspace(range: ValueRange) -> ColorSpace {
    match range {
        ValueRange::HdrLinear => ColorSpace::Linear,
        _ => ColorSpace::Srgb,
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_invariant_rejects_fractional_and_out_of_range() {
        let bad = ImageBuffer::new(1, 1, 1, vec![256.0], ValueRange::Byte, ColorSpace::Srgb);
        assert!(matches!(bad, Err(Error::InvariantViolation(_))));
        let frac = ImageBuffer::new(1, 1, 1, vec![1.5], ValueRange::Byte, ColorSpace::Srgb);
        assert!(frac.is_err());
        let two_channels =
            ImageBuffer::new(1, 1, 2, vec![0.0, 0.0], ValueRange::Byte, ColorSpace::Srgb);
        assert!(two_channels.is_err());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let img = ImageBuffer::from_fn(5, 3, 3, ValueRange::UnitFloat, |y, x, c| {
            ((y * 7 + x * 3 + c) % 11) as f32 / 10.0
        })
        .unwrap();
        let padded = img.reflect_pad_to_multiple(4);
        assert_eq!((padded.height(), padded.width()), (4, 8));
        // row 3 mirrors row 1
        assert_eq!(padded.pixel(3, 0), img.pixel(1, 0));
        // column 5 mirrors column 3
        assert_eq!(padded.pixel(0, 5), img.pixel(0, 3));
        assert_eq!(padded.crop(0, 0, 3, 5).unwrap(), img);
    }

    #[test]
    fn reflect_index_pattern() {
        let idx: Vec<usize> = (0..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }
}
