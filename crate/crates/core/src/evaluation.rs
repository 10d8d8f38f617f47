//! Full-reference metrics, directory benchmarking with external metric
//! plug-ins, and plug-and-play refinement of another method's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::imaging::{detect_unknown_mask, load_image, save_image, ImageBuffer, RegionMask, ValueRange};
use crate::losses::{color_distribution_loss, mse, ssim_index, HistogramMode, SsimConfig, EVAL_HISTOGRAM_BINS};
use crate::sagiri::{refine, RefineOptions, SagiriModels};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const METRICS_CSV: &str = "metrics.csv";
pub const REFINE_MANIFEST: &str = "refine_manifest.csv";
const IMAGE_EXTENSIONS: [&str; 2] = ["png", "pfm"];

/// Peak signal-to-noise ratio in dB for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    pred.same_shape(target)?;
    let e = mse(&pred.to_unit_float()?, &target.to_unit_float()?)?;
    if e <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

/// Structural similarity with the 11x11 Gaussian window, falling back to a
/// single global window for images smaller than that.
pub fn ssim(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    let cfg = if pred.height().min(pred.width()) >= 11 {
        SsimConfig::windowed()
    } else {
        SsimConfig::default()
    };
    ssim_index(&pred.to_unit_float()?, &target.to_unit_float()?, &cfg)
}

/// External no-reference metric, run as `<command> [args..] <image-path>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plugin {
    pub name: String,
    pub command: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Plugin {
    /// Parses `name=command`; a bare command is named after its file stem.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, cmd) = match spec.split_once('=') {
            Some((n, c)) => (n.to_string(), c),
            None => {
                let stem = Path::new(spec).file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
                (stem.to_string(), spec)
            }
        };
        let mut parts = cmd.split_whitespace();
        let command = parts
            .next()
            .ok_or_else(|| Error::InvalidConfig(format!("empty plug-in command in {spec:?}")))?;
        Ok(Self {
            name,
            command: command.into(),
            args: parts.map(String::from).collect(),
        })
    }

    fn score(&self, image: &Path) -> std::result::Result<f64, String> {
        let out = Command::new(&self.command)
            .args(&self.args)
            .arg(image)
            .output()
            .map_err(|e| format!("{}: {e}", self.command.display()))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.name, out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        line.parse::<f64>()
            .map_err(|_| format!("{} printed {line:?}, not a number", self.name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub l_cd_hard: Option<f64>,
    pub external: BTreeMap<String, Option<f64>>,
    /// Problems met while scoring this item (missing reference, plug-in failure).
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub records: Vec<MetricsRecord>,
    pub plugins: Vec<String>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsTable {
    /// Per-column means over the items that have a value.
    pub fn means(&self) -> MetricsRecord {
        MetricsRecord {
            id: "mean".into(),
            psnr: mean(self.records.iter().map(|r| r.psnr)),
            ssim: mean(self.records.iter().map(|r| r.ssim)),
            l_cd_hard: mean(self.records.iter().map(|r| r.l_cd_hard)),
            external: self
                .plugins
                .iter()
                .map(|p| (p.clone(), mean(self.records.iter().map(|r| r.external.get(p).copied().flatten()))))
                .collect(),
            flags: Vec::new(),
        }
    }

    /// Columns: `id,psnr,ssim,l_cd_hard,<plugins..>,flags`; empty cells mean
    /// "not available". The last row holds the means.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["id".to_string(), "psnr".into(), "ssim".into(), "l_cd_hard".into()];
        header.extend(self.plugins.iter().cloned());
        header.push("flags".into());
        w.write_record(&header).map_err(err)?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let means = self.means();
        for r in self.records.iter().chain(std::iter::once(&means)) {
            let mut row = vec![r.id.clone(), cell(r.psnr), cell(r.ssim), cell(r.l_cd_hard)];
            row.extend(self.plugins.iter().map(|p| cell(r.external.get(p).copied().flatten())));
            row.push(r.flags.join("; "));
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn is_image(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    !name.ends_with(".mask.png")
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Image files of `dir` in name order, excluding mask sidecars.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn find_reference(ref_dir: &Path, pred: &Path) -> Option<PathBuf> {
    let exact = ref_dir.join(pred.file_name()?);
    if exact.is_file() {
        return Some(exact);
    }
    let s = stem(pred);
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| ref_dir.join(format!("{s}.{e}")))
        .find(|p| p.is_file())
}

fn full_reference(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, f64, f64)> {
    let (p, t) = (pred.to_unit_float()?.to_rgb(), target.to_unit_float()?.to_rgb());
    Ok((
        psnr(&p, &t)?,
        ssim(&p, &t)?,
        color_distribution_loss(&p, &t, EVAL_HISTOGRAM_BINS, HistogramMode::Hard)?,
    ))
}

/// Scores every image of `pred_dir`, against same-named references in
/// `ref_dir` when given, and with each plug-in.
pub fn evaluate_directory(pred_dir: impl AsRef<Path>, ref_dir: Option<&Path>, plugins: &[Plugin]) -> Result<MetricsTable> {
    let preds = list_images(&pred_dir)?;
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut records = Vec::with_capacity(preds.len());
    let mut matched = 0usize;
    for path in &preds {
        let mut rec = MetricsRecord {
            id: stem(path),
            psnr: None,
            ssim: None,
            l_cd_hard: None,
            external: BTreeMap::new(),
            flags: Vec::new(),
        };
        match load_image(path) {
            Ok(pred) => {
                if let Some(rd) = ref_dir {
                    match find_reference(rd, path) {
                        None => rec.flags.push("missing reference".into()),
                        Some(rp) => {
                            matched += 1;
                            match load_image(&rp).and_then(|t| full_reference(&pred, &t)) {
                                Ok((p, s, c)) => {
                                    rec.psnr = Some(p);
                                    rec.ssim = Some(s);
                                    rec.l_cd_hard = Some(c);
                                }
                                Err(e) => rec.flags.push(format!("reference: {e}")),
                            }
                        }
                    }
                }
            }
            Err(e) => rec.flags.push(format!("unreadable: {e}")),
        }
        for p in plugins {
            let v = match p.score(path) {
                Ok(v) => Some(v),
                Err(msg) => {
                    rec.flags.push(msg);
                    None
                }
            };
            rec.external.insert(p.name.clone(), v);
        }
        records.push(rec);
    }
    if let Some(rd) = ref_dir {
        if matched == 0 {
            return Err(Error::InvalidConfig(format!(
                "no file names in {} match {}",
                pred_dir.as_ref().display(),
                rd.display()
            )));
        }
    }
    Ok(MetricsTable {
        records,
        plugins: plugins.iter().map(|p| p.name.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Share of pixels regenerated (unknown before latent projection).
    pub mask_coverage: f64,
    pub seed: u64,
    pub mask_from_sidecar: bool,
}

/// Sidecar paths `name.mask.png` and `name.txt` next to an input.
pub fn sidecars(input: &Path) -> (PathBuf, PathBuf) {
    let dir = input.parent().unwrap_or(Path::new("."));
    let s = stem(input);
    (dir.join(format!("{s}.mask.png")), dir.join(format!("{s}.txt")))
}

/// Refines every image of `input_dir` into `output_dir` as PNG. Item `i` (in
/// name order) uses seed `opts.seed ^ i`. Unreadable inputs are logged and
/// skipped. Writes a manifest CSV next to the outputs.
pub fn refine_directory(
    input_dir: impl AsRef<Path>,
    output_dir: impl AsRef<Path>,
    models: &SagiriModels,
    sched: &NoiseSchedule,
    opts: &RefineOptions,
) -> Result<Vec<RefineRecord>> {
    let output_dir = output_dir.as_ref();
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut records = Vec::new();
    for (i, input) in list_images(&input_dir)?.into_iter().enumerate() {
        let img = match load_image(&input) {
            Ok(img) if img.range() != ValueRange::HdrLinear => img.to_rgb(),
            Ok(_) => {
                log::warn!("skipping {}: HDR input", input.display());
                continue;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", input.display());
                continue;
            }
        };
        let (mask_path, prompt_path) = sidecars(&input);
        let sidecar = mask_path.is_file();
        let mask = if sidecar {
            RegionMask::load(&mask_path)?
        } else {
            detect_unknown_mask(&img.to_byte()?, opts.saturation)?
        };
        let prompt = if prompt_path.is_file() {
            Some(fs::read_to_string(&prompt_path).map_err(|e| Error::io(&prompt_path, e))?.trim().to_string())
        } else {
            None
        };
        let seed = opts.seed ^ i as u64;
        let item_opts = RefineOptions { seed, ..opts.clone() };
        let out = refine(&img, prompt.as_deref(), Some(&mask), models, sched, &item_opts)?;
        let output = output_dir.join(format!("{}.png", stem(&input)));
        save_image(&out, &output)?;
        records.push(RefineRecord {
            input,
            output,
            mask_coverage: mask.unknown_fraction(),
            seed,
            mask_from_sidecar: sidecar,
        });
    }
    write_refine_manifest(&output_dir.join(REFINE_MANIFEST), &records)?;
    Ok(records)
}

fn write_refine_manifest(path: &Path, records: &[RefineRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["input", "output", "mask_coverage", "seed", "mask_source"]).map_err(err)?;
    for r in records {
        w.write_record([
            r.input.display().to_string(),
            r.output.display().to_string(),
            format!("{}", r.mask_coverage),
            r.seed.to_string(),
            if r.mask_from_sidecar { "sidecar" } else { "auto" }.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32) -> ImageBuffer {
        ImageBuffer::filled(8, 8, 3, v, ValueRange::UnitFloat).unwrap()
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(&constant(0.3), &constant(0.3)).unwrap(), PSNR_CAP);
        let p = psnr(&constant(0.5), &constant(0.4)).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");
        assert!(psnr(&constant(0.5), &ImageBuffer::filled(4, 8, 3, 0.5, ValueRange::UnitFloat).unwrap()).is_err());
    }

    #[test]
    fn plugin_spec_parsing() {
        let p = Plugin::parse("niqe=/usr/bin/python3 niqe.py").unwrap();
        assert_eq!(p.name, "niqe");
        assert_eq!(p.args, vec!["niqe.py".to_string()]);
        assert_eq!(Plugin::parse("/opt/brisque").unwrap().name, "brisque");
        assert!(Plugin::parse("x=").is_err());
    }

    #[test]
    fn means_skip_missing_values() {
        let rec = |id: &str, p: Option<f64>| MetricsRecord {
            id: id.into(),
            psnr: p,
            ssim: p,
            l_cd_hard: None,
            external: BTreeMap::new(),
            flags: vec![],
        };
        let t = MetricsTable {
            records: vec![rec("a", Some(10.0)), rec("b", None), rec("c", Some(20.0))],
            plugins: vec![],
        };
        let m = t.means();
        assert_eq!(m.psnr, Some(15.0));
        assert_eq!(m.l_cd_hard, None);
    }
}
