//! Procedural HDR toy corpus and the line-delimited manifest format.
//!
//! Each scene is a gradient sky with an optional sun, a textured ground plane
//! and a few flat occluders, rendered in linear radiance. The ground truth is
//! a Reinhard tone map of the key-normalized radiance; the low-quality input
//! is the same radiance exposed a few stops up or down, which clips whole
//! regions to 0 or 255.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{apply_exposure, load_image, save_image, ExposureSpec, ImageBuffer, RegionMask, ValueRange};

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const VAL_MANIFEST: &str = "val.jsonl";

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub lq: String,
    pub gt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hdr: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    /// Stop range for over-exposed inputs; under-exposed ones use the negated range.
    pub ev_range: (f64, f64),
    pub gamma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 128,
            n_val: 32,
            size: 64,
            ev_range: (1.5, 3.0),
            gamma: 2.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub lq: ImageBuffer,
    pub gt: ImageBuffer,
    pub gt_prompt: String,
    pub lq_prompt: String,
    pub mask: Option<RegionMask>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let root = manifest.parent().unwrap_or(Path::new("."));
        let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut items = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::CorruptPayload(format!("{} line {}: {e}", manifest.display(), i + 1))
            })?;
            let read_text = |p: &Option<String>| -> Result<String> {
                match p {
                    Some(p) => {
                        let path = root.join(p);
                        Ok(fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?.trim().to_string())
                    }
                    None => Ok(String::new()),
                }
            };
            items.push(CorpusItem {
                lq: load_image(root.join(&rec.lq))?.to_rgb(),
                gt: load_image(root.join(&rec.gt))?.to_rgb(),
                gt_prompt: read_text(&rec.prompt)?,
                lq_prompt: read_text(&rec.lq_prompt)?,
                mask: rec.mask.as_ref().map(|m| RegionMask::load(root.join(m))).transpose()?,
                id: rec.id,
            });
        }
        Ok(Self { items })
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

struct Scene {
    hdr: ImageBuffer,
    caption: String,
}

const SKY_COLORS: [(&str, [f64; 3], [f64; 3]); 3] = [
    ("blue", [0.25, 0.45, 1.0], [0.7, 0.85, 1.0]),
    ("orange", [0.9, 0.45, 0.2], [1.0, 0.8, 0.5]),
    ("gray", [0.55, 0.55, 0.6], [0.8, 0.8, 0.82]),
];
const GROUND_COLORS: [(&str, [f64; 3]); 3] = [
    ("green", [0.2, 0.5, 0.15]),
    ("brown", [0.45, 0.3, 0.15]),
    ("sand", [0.75, 0.65, 0.45]),
];
const OBJECT_COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.8, 0.1, 0.1]),
    ("white", [0.9, 0.9, 0.9]),
    ("black", [0.04, 0.04, 0.04]),
    ("yellow", [0.9, 0.8, 0.1]),
];

/// Two-octave smooth value noise in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for (cell, weight) in [(16usize, 0.65), (4, 0.35)] {
        let n = size / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
                let (iy, ix) = (fy as usize, fx as usize);
                let s = |t: f64| t * t * (3.0 - 2.0 * t);
                let (ty, tx) = (s(fy - iy as f64), s(fx - ix as f64));
                let l = |a: usize, b: usize| lattice[a * n + b];
                let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
                let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
                out[y * size + x] += weight * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

fn render_scene(rng: &mut ChaCha8Rng, size: usize) -> Result<Scene> {
    let s = size as f64;
    let (sky_name, sky_lo, sky_hi) = SKY_COLORS[rng.random_range(0..SKY_COLORS.len())];
    let sky_gain = rng.random_range(0.6..3.0);
    let horizon = rng.random_range(0.45..0.75) * s;
    let (ground_name, ground) = GROUND_COLORS[rng.random_range(0..GROUND_COLORS.len())];
    let ground_gain = rng.random_range(0.05..0.5);
    let texture = value_noise(rng, size);
    let sun = if rng.random_bool(0.6) {
        Some((
            rng.random_range(0.1..0.9) * s,
            rng.random_range(0.05..0.4) * horizon,
            rng.random_range(0.06..0.16) * s,
            rng.random_range(20.0..60.0),
        ))
    } else {
        None
    };
    let n_obj = rng.random_range(1..=3);
    let mut objects = Vec::new();
    for _ in 0..n_obj {
        let (name, color) = OBJECT_COLORS[rng.random_range(0..OBJECT_COLORS.len())];
        let disk = rng.random_bool(0.5);
        let cx = rng.random_range(0.1..0.9) * s;
        let cy = rng.random_range(0.35..0.95) * s;
        let r = rng.random_range(0.06..0.2) * s;
        let gain = rng.random_range(0.05..1.5);
        objects.push((name, color, disk, cx, cy, r, gain));
    }

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let tex = texture[y * size + x];
            let mut rgb = if py < horizon {
                let f = py / horizon;
                let mut c = [0.0; 3];
                for i in 0..3 {
                    c[i] = sky_gain * (sky_lo[i] * (1.0 - f) + sky_hi[i] * f) * (0.9 + 0.2 * tex);
                }
                c
            } else {
                let f = 0.5 + tex;
                [ground[0] * ground_gain * f, ground[1] * ground_gain * f, ground[2] * ground_gain * f]
            };
            if let Some((sx, sy, r, gain)) = sun {
                let d = ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
                let glow = if d <= r { gain } else { gain * (-(d - r) / (0.5 * r)).exp() * 0.3 };
                for c in rgb.iter_mut() {
                    *c += glow;
                }
            }
            for &(_, color, disk, cx, cy, r, gain) in &objects {
                let inside = if disk {
                    (px - cx).powi(2) + (py - cy).powi(2) <= r * r
                } else {
                    (px - cx).abs() <= r && (py - cy).abs() <= 0.7 * r
                };
                if inside {
                    for i in 0..3 {
                        rgb[i] = color[i] * gain * (0.85 + 0.3 * tex);
                    }
                }
            }
            data.extend(rgb.iter().map(|&v| v.max(0.0) as f32));
        }
    }
    let mut words = vec![format!("{sky_name} sky")];
    if sun.is_some() {
        words.push("sun".into());
    }
    words.push(format!("{ground_name} ground"));
    for (name, _, disk, ..) in &objects {
        words.push(format!("{name} {}", if *disk { "disk" } else { "box" }));
    }
    Ok(Scene {
        hdr: ImageBuffer::new(size, size, 3, data, ValueRange::HdrLinear, crate::imaging::ColorSpace::Linear)?,
        caption: words.join(" "),
    })
}

/// Scales radiance so the log-average luminance maps to middle gray.
fn key_normalize(hdr: &ImageBuffer) -> Result<ImageBuffer> {
    let n = hdr.pixel_count() as f64;
    let log_avg = (hdr
        .data()
        .chunks_exact(3)
        .map(|p| (1e-4 + 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64).ln())
        .sum::<f64>()
        / n)
        .exp();
    let k = 0.18 / log_avg;
    let data = hdr.data().iter().map(|&v| (v as f64 * k) as f32).collect();
    ImageBuffer::new(hdr.width(), hdr.height(), 3, data, ValueRange::HdrLinear, hdr.colorspace())
}

/// Reinhard `2x / (1 + 2x)` per channel, gamma encoded, quantized to bytes.
pub fn tone_map(hdr: &ImageBuffer, gamma: f64) -> Result<ImageBuffer> {
    hdr.expect_range(ValueRange::HdrLinear)?;
    let data = hdr
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64 * 2.0;
            ((v / (1.0 + v)).powf(1.0 / gamma) * 255.0).round() as f32
        })
        .collect();
    ImageBuffer::new(hdr.width(), hdr.height(), hdr.channels(), data, ValueRange::Byte, crate::imaging::ColorSpace::Srgb)
}

/// Writes the toy corpus under `root` and returns (train, val) manifest paths.
pub fn synthesize_corpus(root: impl AsRef<Path>, cfg: &SynthConfig, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let root = root.as_ref();
    if cfg.size == 0 || cfg.n_train == 0 {
        return Err(Error::InvalidConfig("corpus needs size > 0 and at least one training item".into()));
    }
    for d in ["hdr", "gt", "lq", "captions"] {
        fs::create_dir_all(root.join(d)).map_err(|e| Error::io(root.join(d), e))?;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for idx in 0..cfg.n_train + cfg.n_val {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
        let scene = render_scene(&mut rng, cfg.size)?;
        let hdr = key_normalize(&scene.hdr)?;
        let over = idx % 2 == 0;
        let ev = rng.random_range(cfg.ev_range.0..=cfg.ev_range.1);
        let spec = ExposureSpec {
            ev: if over { ev } else { -ev },
            gamma: cfg.gamma,
            quantize_bits: 8,
        };
        let lq = apply_exposure(&hdr, &spec)?;
        let gt = tone_map(&hdr, cfg.gamma)?;
        let id = format!("{idx:05}");
        let rec = ManifestRecord {
            lq: format!("lq/{id}.png"),
            gt: format!("gt/{id}.png"),
            prompt: Some(format!("captions/{id}.gt.txt")),
            lq_prompt: Some(format!("captions/{id}.lq.txt")),
            mask: None,
            hdr: Some(format!("hdr/{id}.pfm")),
            id,
        };
        save_image(&hdr, root.join(rec.hdr.as_ref().unwrap()))?;
        save_image(&gt, root.join(&rec.gt))?;
        save_image(&lq, root.join(&rec.lq))?;
        let lq_caption = format!("{} {}", if over { "bright" } else { "dark" }, scene.caption);
        for (p, text) in [(&rec.prompt, &scene.caption), (&rec.lq_prompt, &lq_caption)] {
            let path = root.join(p.as_ref().unwrap());
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if idx < cfg.n_train {
            train.push(rec);
        } else {
            val.push(rec);
        }
    }
    let (tp, vp) = (root.join(TRAIN_MANIFEST), root.join(VAL_MANIFEST));
    write_manifest(&tp, &train)?;
    write_manifest(&vp, &val)?;
    Ok((tp, vp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{detect_unknown_mask, SaturationMode};

    #[test]
    fn synthesis_is_deterministic_and_loadable() {
        let cfg = SynthConfig {
            n_train: 4,
            n_val: 2,
            size: 32,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ta, va) = synthesize_corpus(a.path(), &cfg, 7).unwrap();
        let (tb, _) = synthesize_corpus(b.path(), &cfg, 7).unwrap();
        assert_eq!(fs::read(&ta).unwrap(), fs::read(&tb).unwrap());
        assert_eq!(
            fs::read(a.path().join("lq/00003.png")).unwrap(),
            fs::read(b.path().join("lq/00003.png")).unwrap()
        );
        let train = Corpus::load(&ta).unwrap();
        let val = Corpus::load(&va).unwrap();
        assert_eq!((train.len(), val.len()), (4, 2));
        assert!(!train.items[0].gt_prompt.is_empty());
        assert!(train.items[0].lq_prompt.starts_with("bright"));
        // over-exposed inputs clip a visible share of pixels
        let m = detect_unknown_mask(&train.items[0].lq, SaturationMode::AllChannels).unwrap();
        assert!(m.unknown_fraction() > 0.0);
    }

    #[test]
    fn bad_manifest_line_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.jsonl");
        fs::write(&p, "{not json}\n").unwrap();
        assert!(matches!(Corpus::load(&p), Err(Error::CorruptPayload(_))));
        assert!(matches!(Corpus::load(d.path().join("none.jsonl")), Err(Error::NotFound(_))));
    }
}
