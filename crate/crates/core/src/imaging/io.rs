//! PNG (8-bit LDR) and PFM (float HDR) readers and writers.
//!
//! PFM follows the usual convention: a `PF` (RGB) or `Pf` (gray) line, a
//! `width height` line, a scale line whose sign encodes endianness (negative
//! means little-endian), then float32 rows stored bottom-to-top.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::buffer::{ColorSpace, ImageBuffer, ValueRange};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes)
    } else if bytes.starts_with(b"PF") || bytes.starts_with(b"Pf") {
        decode_pfm(&bytes)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{} is neither PNG nor PFM",
            path.display()
        )))
    }
}

/// Writes PNG or PFM depending on the extension (`.pfm` selects PFM).
///
/// Unit-float images written as PNG are quantized to 8 bits; HDR images can
/// only be stored as PFM.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.validate()?;
    let is_pfm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let bytes = if is_pfm {
        encode_pfm(img)
    } else {
        encode_png(img)?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptHeader(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptPayload(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "png bit depth {:?}; only 8-bit is supported",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgb | png::ColorType::Rgba => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!("png color type {other:?}")));
        }
    };
    let mut data = Vec::with_capacity(w * h * channels);
    for px in buf[..info.buffer_size()].chunks_exact(src_channels) {
        // alpha is dropped
        data.extend(px[..channels].iter().map(|&b| b as f32));
    }
    ImageBuffer::new(w, h, channels, data, ValueRange::Byte, ColorSpace::Srgb)
}

fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let byte = match img.range() {
        ValueRange::Byte => img.clone(),
        ValueRange::UnitFloat => img.to_byte()?,
        ValueRange::HdrLinear => {
            return Err(Error::UnsupportedFormat(
                "HDR images must be saved as .pfm".into(),
            ))
        }
    };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, byte.width() as u32, byte.height() as u32);
        encoder.set_color(if byte.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::CorruptPayload(format!("png encode: {e}")))?;
        let data: Vec<u8> = byte.data().iter().map(|&v| v as u8).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::CorruptPayload(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn decode_pfm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0usize;
    let mut next_token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptHeader("pfm header ended early".into()));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::CorruptHeader("pfm header is not ASCII".into()))?
            .to_string();
        Ok(tok)
    };
    let magic = next_token()?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::CorruptHeader(format!("bad pfm magic {m:?}"))),
    };
    let parse_dim = |s: String| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::CorruptHeader(format!("bad pfm dimension {s:?}")))
    };
    let w = parse_dim(next_token()?)?;
    let h = parse_dim(next_token()?)?;
    let scale_tok = next_token()?;
    let scale: f32 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::CorruptHeader(format!("bad pfm scale {scale_tok:?}")))?;
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let little_endian = scale < 0.0;
    let n = w * h * channels;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < n * 4 {
        return Err(Error::CorruptPayload(format!(
            "pfm payload has {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let mut data = vec![0f32; n];
    let row_len = w * channels;
    for (file_row, chunk) in payload[..n * 4].chunks_exact(row_len * 4).enumerate() {
        let y = h - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            data[y * row_len + i] = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptPayload("pfm contains non-finite samples".into()));
    }
    let range = if data.iter().all(|&v| v >= 0.0) {
        ValueRange::HdrLinear
    } else {
        return Err(Error::InvariantViolation(
            "pfm contains negative radiance".into(),
        ));
    };
    ImageBuffer::new(w, h, channels, data, range, ColorSpace::Linear)
}

fn encode_pfm(img: &ImageBuffer) -> Vec<u8> {
    let (h, w, c) = img.dims();
    let magic = if c == 3 { "PF" } else { "Pf" };
    let mut out = BufWriter::new(Vec::with_capacity(32 + h * w * c * 4));
    write!(out, "{magic}\n{w} {h}\n-1.0\n").expect("write to Vec");
    let row_len = w * c;
    for y in (0..h).rev() {
        for v in &img.data()[y * row_len..(y + 1) * row_len] {
            out.write_all(&v.to_le_bytes()).expect("write to Vec");
        }
    }
    out.into_inner().expect("flush Vec")
}
