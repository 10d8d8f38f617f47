//! `sagiri-lab` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::ModelBundle;
use crate::config::{Artifact, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_directory, list_images, refine_directory, sidecars, Plugin, METRICS_CSV};
use crate::imaging::{detect_unknown_mask, load_image, save_image, RegionMask, ValueRange};
use crate::restorer::{build_restorer, restore, Restorer};
use crate::sagiri::{build_sagiri, build_unet, build_vae, refine, RefineOptions, SagiriModels};
use crate::training::{
    finetune_sagiri, pretrain_sagiri, synthesize_corpus, train_base, train_restorer, train_vae, Corpus, TrainReport,
};

const DEFAULT_DATA_DIR: &str = "data";

#[derive(Debug, Parser)]
#[command(name = "sagiri-lab", version, about = "Two-stage LDR enhancement: restore, then refine with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML run configuration; unset keys take the toy defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every phase (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config override, e.g. `train_restorer.lr=5e-4` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest (default: `paths.train_manifest`, then `data/train.jsonl`)
    #[arg(long, value_name = "FILE")]
    train: Option<PathBuf>,
    /// Number of optimizer steps (overrides the config)
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint to continue from
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize toy HDR scenes, exposure variants and manifests
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the stage-one restorer
    TrainRestorer(TrainArgs),
    /// Train the latent autoencoder
    TrainVae(TrainArgs),
    /// Train the unconditional base denoiser
    TrainBase(TrainArgs),
    /// Pretrain the control branch on synthetic degradations
    PretrainSagiri(TrainArgs),
    /// Finetune the control branch on restorer outputs
    FinetuneSagiri(TrainArgs),
    /// Restore then refine one image or every image of a directory
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Prompt text file (single-image input only)
        #[arg(long, value_name = "FILE")]
        prompt_file: Option<PathBuf>,
        /// Unknown-region mask, white = regenerate (single-image input only)
        #[arg(long, value_name = "FILE")]
        mask_file: Option<PathBuf>,
        /// Also write the stage-one image as `<name>.stage1.png`
        #[arg(long)]
        keep_intermediate: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Refine already-enhanced images (sidecar masks and prompts honored)
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write `<name>.mask.png` unknown-region masks for a directory
    MakeMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
    /// Score predictions against references
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: Option<PathBuf>,
        /// External metric, `name=command args`; called as `command args <pred> [<ref>]`
        #[arg(long = "plugin", value_name = "SPEC")]
        plugins: Vec<String>,
    },
}

/// Parses `argv` (program name first) and runs one subcommand. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sets one dotted key of the config; the value is parsed as a TOML literal, else taken as a string.
pub fn apply_override(cfg: &RunConfig, assignment: &str) -> Result<RunConfig> {
    let bad = |m: String| Error::InvalidConfig(format!("--set {assignment}: {m}"));
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected KEY=VALUE".into()))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut root = toml::Value::try_from(cfg).map_err(|e| bad(e.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = &mut root;
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| bad(format!("`{part}` is not inside a section")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value.clone());
            break;
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let text = toml::to_string(&root).map_err(|e| bad(e.to_string()))?;
    toml::from_str::<RunConfig>(&text).map_err(|e| bad(e.to_string()))
}

fn execute(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::SynthData {
            common,
            n_train,
            n_val,
            size,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.synth.n_train = n_train.unwrap_or(cfg.synth.n_train);
            cfg.synth.n_val = n_val.unwrap_or(cfg.synth.n_val);
            cfg.synth.size = size.unwrap_or(cfg.synth.size);
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
            let (t, v) = synthesize_corpus(&out, &cfg.synth, cfg.seed)?;
            cfg.write_resolved(&out, argv)?;
            log::info!("wrote {} and {}", t.display(), v.display());
            Ok(())
        }
        Command::TrainRestorer(a) => train_phase(Phase::Restorer, a, argv),
        Command::TrainVae(a) => train_phase(Phase::Vae, a, argv),
        Command::TrainBase(a) => train_phase(Phase::Base, a, argv),
        Command::PretrainSagiri(a) => train_phase(Phase::Pretrain, a, argv),
        Command::FinetuneSagiri(a) => train_phase(Phase::Finetune, a, argv),
        Command::Enhance {
            common,
            input,
            prompt_file,
            mask_file,
            keep_intermediate,
            steps,
        } => {
            let mut cfg = resolve(&common)?;
            cfg.refine.n_steps = steps.unwrap_or(cfg.refine.n_steps);
            let out = output_dir(&common, &cfg, "enhanced");
            cfg.write_resolved(&out, argv)?;
            let job = EnhanceJob::load(&cfg)?;
            if input.is_dir() {
                if prompt_file.is_some() || mask_file.is_some() {
                    return Err(Error::InvalidConfig(
                        "--prompt-file and --mask-file apply to a single image; use sidecar files for directories".into(),
                    ));
                }
                for (i, path) in list_images(&input)?.iter().enumerate() {
                    let (mask, prompt) = sidecars(path);
                    let mask = mask.is_file().then_some(mask);
                    let prompt = prompt.is_file().then_some(prompt);
                    let opts = RefineOptions {
                        seed: cfg.refine.seed ^ i as u64,
                        ..cfg.refine.clone()
                    };
                    job.enhance(path, prompt.as_deref(), mask.as_deref(), &out, keep_intermediate, &opts)?;
                }
            } else {
                job.enhance(&input, prompt_file.as_deref(), mask_file.as_deref(), &out, keep_intermediate, &cfg.refine)?;
            }
            Ok(())
        }
        Command::Refine { common, input, steps } => {
            let mut cfg = resolve(&common)?;
            cfg.refine.n_steps = steps.unwrap_or(cfg.refine.n_steps);
            let out = output_dir(&common, &cfg, "refined");
            cfg.write_resolved(&out, argv)?;
            let models = load_sagiri(&cfg)?;
            let records = refine_directory(&input, &out, &models, &cfg.schedule.build()?, &cfg.refine)?;
            log::info!("refined {} images into {}", records.len(), out.display());
            Ok(())
        }
        Command::MakeMasks { common, input } => {
            let cfg = resolve(&common)?;
            let out = common.out.clone().unwrap_or_else(|| input.clone());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for path in list_images(&input)? {
                let img = load_image(&path)?;
                if img.range() == ValueRange::HdrLinear {
                    log::warn!("skipping {}: HDR input", path.display());
                    continue;
                }
                let mask = detect_unknown_mask(&img.to_rgb().to_byte()?, cfg.refine.saturation)?;
                let (target, _) = sidecars(&out.join(path.file_name().expect("listed file")));
                mask.save(&target)?;
            }
            cfg.write_resolved(&out, argv).map(drop)
        }
        Command::Eval {
            common,
            pred,
            reference,
            plugins,
        } => {
            let cfg = resolve(&common)?;
            let plugins: Vec<Plugin> = plugins.iter().map(|p| Plugin::parse(p)).collect::<Result<_>>()?;
            let out = common.out.clone().unwrap_or_else(|| pred.clone());
            let table = evaluate_directory(&pred, reference.as_deref(), &plugins)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            table.write_csv(out.join(METRICS_CSV))?;
            let m = table.means();
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("n={} psnr={} ssim={}", table.records.len(), show(m.psnr), show(m.ssim));
            cfg.write_resolved(&out, argv).map(drop)
        }
    }
}

fn output_dir(common: &Common, cfg: &RunConfig, leaf: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.cache_dir().join(leaf))
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Restorer,
    Vae,
    Base,
    Pretrain,
    Finetune,
}

impl Phase {
    fn artifact(self) -> Artifact {
        match self {
            Phase::Restorer => Artifact::Restorer,
            Phase::Vae => Artifact::Vae,
            Phase::Base => Artifact::Base,
            Phase::Pretrain => Artifact::SagiriPretrained,
            Phase::Finetune => Artifact::Sagiri,
        }
    }

    fn run_name(self) -> &'static str {
        match self {
            Phase::Restorer => "restorer",
            Phase::Vae => "vae",
            Phase::Base => "base",
            Phase::Pretrain => "sagiri_pretrained",
            Phase::Finetune => "sagiri",
        }
    }
}

fn load_bundle(cfg: &RunConfig, which: Artifact) -> Result<ModelBundle> {
    let path = cfg.artifact(which);
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "missing {} (train it first or set paths in the config)",
            path.display()
        )));
    }
    ModelBundle::load(path)
}

fn train_phase(phase: Phase, args: TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    {
        let tc = match phase {
            Phase::Restorer => &mut cfg.train_restorer,
            Phase::Vae => &mut cfg.train_vae,
            Phase::Base => &mut cfg.train_base,
            Phase::Pretrain => &mut cfg.pretrain_sagiri,
            Phase::Finetune => &mut cfg.finetune_sagiri,
        };
        tc.steps = args.steps.unwrap_or(tc.steps);
    }
    let out = args.common.out.clone().unwrap_or_else(|| cfg.cache_dir());
    cfg.paths.cache = Some(out.clone());
    let manifest = args
        .train
        .clone()
        .or_else(|| cfg.paths.train_manifest.clone())
        .unwrap_or_else(|| Path::new(DEFAULT_DATA_DIR).join(crate::training::corpus::TRAIN_MANIFEST));
    cfg.paths.train_manifest = Some(manifest.clone());
    let run_dir = out.join(format!("{}_run", phase.run_name()));
    cfg.write_resolved(&run_dir, argv)?;
    let train = Corpus::load(&manifest)?;
    let resume = args.resume.as_ref().map(ModelBundle::load).transpose()?;
    let sched = cfg.schedule.build()?;
    let run_dir = Some(run_dir.as_path());
    let report: TrainReport = match phase {
        Phase::Restorer => {
            let b = resume.map_or_else(|| build_restorer(&cfg.restorer, cfg.seed), Ok)?;
            train_restorer(b, &train, &cfg.train_restorer, run_dir)?
        }
        Phase::Vae => {
            let b = resume.map_or_else(|| build_vae(&cfg.vae, cfg.seed), Ok)?;
            train_vae(b, &train, &cfg.train_vae, run_dir)?
        }
        Phase::Base => {
            let vae = load_bundle(&cfg, Artifact::Vae)?;
            let b = resume.map_or_else(|| build_unet(&cfg.unet, cfg.seed), Ok)?;
            train_base(b, &vae, &train, &sched, &cfg.train_base, run_dir)?
        }
        Phase::Pretrain => {
            let vae = load_bundle(&cfg, Artifact::Vae)?;
            let b = match resume {
                Some(b) => b,
                None => build_sagiri(&cfg.unet, Some(&load_bundle(&cfg, Artifact::Base)?), cfg.seed)?,
            };
            let first = train.items.first().ok_or(Error::EmptyDataset)?;
            let deg = cfg.degradation_for(first.gt.height(), first.gt.width());
            pretrain_sagiri(b, &vae, &train, &deg, &sched, &cfg.pretrain_sagiri, run_dir)?
        }
        Phase::Finetune => {
            let vae = load_bundle(&cfg, Artifact::Vae)?;
            let restorer = Restorer::from_bundle(&load_bundle(&cfg, Artifact::Restorer)?)?;
            let b = match resume {
                Some(b) => b,
                None => load_bundle(&cfg, Artifact::SagiriPretrained)?,
            };
            finetune_sagiri(b, &vae, &restorer, &train, &sched, &cfg.finetune_sagiri, run_dir)?
        }
    };
    let target = cfg.artifact(phase.artifact());
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    report.bundle.save(&target)?;
    if let Some(last) = report.history.last() {
        log::info!("{}: step {} loss {:.6}", phase.run_name(), last.step, last.loss);
    }
    log::info!("saved {}", target.display());
    Ok(())
}

fn load_sagiri(cfg: &RunConfig) -> Result<SagiriModels> {
    SagiriModels::from_bundles(&load_bundle(cfg, Artifact::Vae)?, &load_bundle(cfg, Artifact::Sagiri)?)
}

struct EnhanceJob {
    restorer: Restorer,
    models: SagiriModels,
    sched: crate::diffusion::NoiseSchedule,
    saturation: crate::imaging::SaturationMode,
}

impl EnhanceJob {
    fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            restorer: Restorer::from_bundle(&load_bundle(cfg, Artifact::Restorer)?)?,
            models: load_sagiri(cfg)?,
            sched: cfg.schedule.build()?,
            saturation: cfg.refine.saturation,
        })
    }

    /// The unknown region comes from the clipped pixels of the original input
    /// unless a mask file is given.
    fn enhance(
        &self,
        input: &Path,
        prompt_file: Option<&Path>,
        mask_file: Option<&Path>,
        out: &Path,
        keep_intermediate: bool,
        opts: &RefineOptions,
    ) -> Result<()> {
        let img = load_image(input)?;
        if img.range() == ValueRange::HdrLinear {
            return Err(Error::InvalidConfig(format!("{}: enhance expects an LDR image", input.display())));
        }
        let img = img.to_rgb();
        let mask = match mask_file {
            Some(p) => RegionMask::load(p)?,
            None => detect_unknown_mask(&img.to_byte()?, self.saturation)?,
        };
        let prompt = prompt_file
            .map(|p| fs::read_to_string(p).map(|s| s.trim().to_string()).map_err(|e| Error::io(p, e)))
            .transpose()?;
        let stage1 = restore(&self.restorer, &img)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        if keep_intermediate {
            save_image(&stage1, out.join(format!("{stem}.stage1.png")))?;
        }
        let refined = refine(&stage1, prompt.as_deref(), Some(&mask), &self.models, &self.sched, opts)?;
        let target = out.join(format!("{stem}.png"));
        save_image(&refined, &target)?;
        log::info!("{} -> {} ({:.1}% regenerated)", input.display(), target.display(), 100.0 * mask.unknown_fraction());
        Ok(())
    }
}
