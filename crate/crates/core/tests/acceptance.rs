//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `SAGIRI_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails, and
//! `SAGIRI_ACCEPTANCE_ONLY=1,2,7` to run a subset.

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sagiri_core::checkpoint::ModelBundle;
use sagiri_core::config::RunConfig;
use sagiri_core::diffusion::{masked_reverse_step, sample_loop, KnownConvention, NoiseSchedule, SampleOptions, SamplerState};
use sagiri_core::evaluation::refine_directory;
use sagiri_core::imaging::{
    detect_unknown_mask, load_image, project_mask_to_latent, save_image, ColorSpace, ImageBuffer,
    RegionMask, SaturationMode, ValueRange,
};
use sagiri_core::losses::{
    color_distribution_loss, compose_color_loss, compose_color_loss_t, compose_content_loss, compose_content_loss_t,
    frequency_preservation_loss, soft_histogram_t, ssim_index, HistogramMode, LossWeights, SsimConfig,
};
use sagiri_core::restorer::{build_restorer, pixel_shuffle, pixel_unshuffle, restore, Restorer};
use sagiri_core::sagiri::{
    build_sagiri, build_unet, build_vae, refine, unet_from_bundle, ControlUnetConfig, RefineOptions, SagiriModels,
    SagiriNet, VaeConfig,
};
use sagiri_core::training::{
    eval_eps_loss, eval_restorer, finetune_sagiri, pretrain_sagiri, synthesize_corpus, train_base, train_restorer,
    train_vae, Corpus, EpsEvalMode, SynthConfig, TrainConfig,
};

type Outcome = Result<(bool, String), String>;

const TOY_SEED: u64 = 0;
const EPS_EVAL_TIMESTEPS: usize = 10;
const ABLATION_SEEDS: u64 = 5;

fn main() {
    let strict = std::env::var("SAGIRI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<u32>> = std::env::var("SAGIRI_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut results: Vec<(u32, bool)> = Vec::new();
    let mut run = |n: u32, name: &str, budget_s: Option<f64>, f: &mut dyn FnMut() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n:>2} SKIP: {name}");
            return;
        }
        eprintln!("running criterion {n}: {name}");
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match outcome {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(b) = budget_s {
            if secs >= b {
                pass = false;
                detail.push_str(&format!("; over the {b:.0} s budget"));
            }
        }
        println!(
            "criterion {n:>2} {}: {name}: {detail} ({secs:.1} s)",
            if pass { "PASS" } else { "FAIL" }
        );
        results.push((n, pass));
    };

    run(1, "loss identities", Some(10.0), &mut criterion_1);
    run(2, "gradient fidelity", Some(60.0), &mut criterion_2);
    run(3, "histogram oracle", Some(30.0), &mut criterion_3);
    run(4, "DFT oracle", None, &mut criterion_4);
    run(5, "zero-init control equivalence", Some(60.0), &mut criterion_5);
    run(6, "masked-sampling invariants", Some(300.0), &mut criterion_6);
    run(7, "pixel-unshuffle bijection", Some(10.0), &mut criterion_7);
    run(8, "mask semantics", None, &mut criterion_8);

    let mut toy: Option<ToyRun> = None;
    run(9, "toy end-to-end training", Some(45.0 * 60.0), &mut || {
        let (run, outcome) = criterion_9()?;
        toy = Some(run);
        Ok(outcome)
    });
    run(10, "ablation direction", None, &mut || criterion_10(toy.as_ref()));
    run(11, "plug-and-play protocol", None, &mut || criterion_11(toy.as_ref()));
    run(12, "30-step inference at 256 px", Some(60.0), &mut || criterion_12(toy.as_ref()));

    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn random_unit(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> ImageBuffer {
    let data = (0..w * h * c).map(|_| rng.random::<f32>()).collect();
    ImageBuffer::new(w, h, c, data, ValueRange::UnitFloat, ColorSpace::Srgb).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 1 -------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (iw, ih) = (8 + 4 * (i % 5), 8 + 2 * (i % 7));
        let x = random_unit(&mut rng, iw, ih, 3);
        let devs = [
            color_distribution_loss(&x, &x, 64, HistogramMode::Soft).map_err(e)?,
            color_distribution_loss(&x, &x, 256, HistogramMode::Hard).map_err(e)?,
            frequency_preservation_loss(&x, &x).map_err(e)?,
            ssim_index(&x, &x, &SsimConfig::default()).map_err(e)? - 1.0,
            ssim_index(&x, &x, &SsimConfig::windowed()).map_err(e)? - 1.0,
            compose_color_loss(&x, &x, &w, 64).map_err(e)?,
            compose_content_loss(&x, &x, &w, &SsimConfig::default()).map_err(e)?,
            compose_content_loss(&x, &x, &w, &SsimConfig::windowed()).map_err(e)?,
        ];
        worst = devs.iter().fold(worst, |m, d| m.max(d.abs()));
    }
    Ok((worst <= 1e-6, format!("max deviation {worst:.2e} over 50 images (tol 1e-6)")))
}

// 2 -------------------------------------------------------------------------

/// Inputs are drawn where the loss is differentiable within the finite-difference step:
/// away from the soft-histogram kinks and with no histogram bin difference near zero.
fn smooth_color_input(rng: &mut ChaCha8Rng, bins: usize, h: f64) -> (Tensor, Tensor) {
    loop {
        let pred: Vec<f64> = (0..3 * 64)
            .map(|_| loop {
                let v: f64 = rng.random_range(0.05..0.95);
                let u = v * bins as f64 - 0.5;
                if (u - u.round()).abs() > 4.0 * h * bins as f64 {
                    break v;
                }
            })
            .collect();
        let target: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = Tensor::from_vec(pred, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let t = Tensor::from_vec(target, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let hp = flat64(&soft_histogram_t(&p, bins).unwrap());
        let ht = flat64(&soft_histogram_t(&t, bins).unwrap());
        let step = 4.0 * h * bins as f64 / 64.0;
        if hp.iter().zip(&ht).all(|(a, b)| (a - b).abs() > step) {
            return (p, t);
        }
    }
}

fn gradient_rel_error(loss: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, h: f64) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let l = loss(var.as_tensor());
    let grads = l.backward().unwrap();
    let analytic = flat64(grads.get(var.as_tensor()).unwrap());
    let base = flat64(x);
    let shape = x.dims().to_vec();
    let eval = |v: &[f64]| flat64(&loss(&Tensor::from_vec(v.to_vec(), shape.as_slice(), &Device::Cpu).unwrap()))[0];
    let mut numeric = vec![0.0; base.len()];
    let mut v = base.clone();
    for i in 0..base.len() {
        v[i] = base[i] + h;
        let up = eval(&v);
        v[i] = base[i] - h;
        let down = eval(&v);
        v[i] = base[i];
        numeric[i] = (up - down) / (2.0 * h);
    }
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300)
}

fn criterion_2() -> Outcome {
    let h = 1e-4;
    let bins = 64;
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_color: f64 = 0.0;
    let mut worst_content: f64 = 0.0;
    for trial in 0..20 {
        let (p, t) = smooth_color_input(&mut rng, bins, h);
        let color = |x: &Tensor| compose_color_loss_t(x, &t, &w, bins).unwrap();
        worst_color = worst_color.max(gradient_rel_error(&color, &p, h));
        let ssim = if trial % 2 == 0 { SsimConfig::default() } else { SsimConfig::windowed() };
        let content = |x: &Tensor| compose_content_loss_t(x, &t, &w, &ssim).unwrap();
        worst_content = worst_content.max(gradient_rel_error(&content, &p, h));
    }
    let pass = worst_color < 1e-3 && worst_content < 1e-3;
    Ok((
        pass,
        format!("max relative error color {worst_color:.2e}, content {worst_content:.2e} over 20 trials (tol 1e-3)"),
    ))
}

// 3 -------------------------------------------------------------------------

fn brute_force_cd(a: &[u32], b: &[u32], channels: usize, bins: usize) -> f64 {
    let pixels = a.len() / channels;
    let mut total = 0.0;
    for c in 0..channels {
        let mut ca = vec![0i64; bins];
        let mut cb = vec![0i64; bins];
        for p in 0..pixels {
            let bin = |v: u32| ((v as usize * bins) / 255).min(bins - 1);
            ca[bin(a[p * channels + c])] += 1;
            cb[bin(b[p * channels + c])] += 1;
        }
        total += ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum::<i64>() as f64 / pixels as f64;
    }
    total
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for case in 0..200 {
        let bins: usize = 2 + case % 7;
        // half of the samples sit exactly on bin edges
        let edges: Vec<u32> = (0..=bins).map(|k| ((255 * k).div_ceil(bins)) as u32).collect();
        let sample = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            (0..48)
                .map(|_| {
                    if rng.random::<bool>() {
                        edges[rng.random_range(0..edges.len())].min(255)
                    } else {
                        rng.random_range(0..=255)
                    }
                })
                .collect()
        };
        let a = sample(&mut rng);
        let b = sample(&mut rng);
        let img = |v: &[u32]| {
            ImageBuffer::new(4, 4, 3, v.iter().map(|&x| x as f32).collect(), ValueRange::Byte, ColorSpace::Srgb).unwrap()
        };
        let got = color_distribution_loss(&img(&a), &img(&b), bins, HistogramMode::Hard).map_err(e)?;
        if got != brute_force_cd(&a, &b, 3, bins) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/200 cases differ from integer bin counting (exact)")))
}

// 4 -------------------------------------------------------------------------

fn direct_dft_loss(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (h, w, c) = a.dims();
    let mut total = 0.0;
    for ch in 0..c {
        let d = |y: usize, x: usize| a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64;
        for k in 0..h {
            for l in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..h {
                    for n in 0..w {
                        let ang = -2.0 * PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                        re += d(m, n) * ang.cos();
                        im += d(m, n) * ang.sin();
                    }
                }
                total += (re * re + im * im).sqrt();
            }
        }
    }
    total / (h * w * c) as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = random_unit(&mut rng, 16, 16, 3);
        let b = random_unit(&mut rng, 16, 16, 3);
        let got = frequency_preservation_loss(&a, &b).map_err(e)?;
        let want = direct_dft_loss(&a, &b);
        eprintln!("{got} {want}");
        worst = worst.max((got - want).abs());
    }
    let mut const_err: f64 = 0.0;
    for (va, vb) in [(0.75f32, 0.25f32), (0.1, 0.9), (0.5, 0.5), (1.0, 0.0)] {
        let a = ImageBuffer::filled(16, 16, 3, va, ValueRange::UnitFloat).map_err(e)?;
        let b = ImageBuffer::filled(16, 16, 3, vb, ValueRange::UnitFloat).map_err(e)?;
        let got = frequency_preservation_loss(&a, &b).map_err(e)?;
        const_err = const_err.max((got - (va as f64 - vb as f64).abs()).abs());
    }
    Ok((
        worst < 1e-6 && const_err <= 1e-12,
        format!("max |impl - direct DFT| {worst:.2e} (tol 1e-6); constant case |loss - |a-b|| {const_err:.1e} (float tol 1e-12)"),
    ))
}

// 5 -------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let cfg = ControlUnetConfig::default();
    let base_bundle = build_unet(&cfg, 50).map_err(e)?;
    let sagiri = SagiriNet::from_bundle(&build_sagiri(&cfg, Some(&base_bundle), 51).map_err(e)?).map_err(e)?;
    let base = unet_from_bundle(&base_bundle).map_err(e)?;
    let prompts = ["", "a bright sky over the sea", "dark street at night", "sunlit mountains", "indoor lamp"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let x = random_tensor(&mut rng, &[1, 4, 8, 8], -2.0, 2.0).to_dtype(DType::F32).unwrap();
        let cond = random_tensor(&mut rng, &[1, 4, 8, 8], -2.0, 2.0).to_dtype(DType::F32).unwrap();
        let t = rng.random_range(1..=1000);
        let ctx = sagiri.context(&[prompts[i % prompts.len()]]).map_err(e)?;
        let a = flat64(&sagiri.forward(&x, &[t], &ctx, &cond).map_err(e)?);
        let b = flat64(&base.forward(&x, &[t], &ctx).map_err(e)?);
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok((worst < 1e-5, format!("max |sagiri - base| {worst:.2e} over 10 triples (tol 1e-5)")))
}

// 6 -------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    // (a) all-known mask, shifted convention: refine equals the VAE round trip
    let vae = build_vae(&VaeConfig { base_width: 16, ..Default::default() }, 60).map_err(e)?;
    let ucfg = ControlUnetConfig::default();
    let base = build_unet(&ucfg, 61).map_err(e)?;
    let net = build_sagiri(&ucfg, Some(&base), 62).map_err(e)?;
    let models = SagiriModels::from_bundles(&vae, &net).map_err(e)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_unit(&mut rng, 40, 48, 3);
    let opts = RefineOptions { convention: KnownConvention::Shifted, seed: 3, ..Default::default() };
    let refined = refine(&img, Some("sky"), Some(&RegionMask::all_known(40, 48)), &models, &sched, &opts).map_err(e)?;
    let rt = models.round_trip(&img).map_err(e)?;
    let to64 = |i: &ImageBuffer| i.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let err_a = max_abs_diff(&to64(&refined), &to64(&rt));
    let pass_a = err_a < 1e-5;

    // (b) known-region statistics of one masked reverse step
    let n_side = 100;
    let x0_val = 0.7;
    let x0 = Tensor::full(x0_val, (1, 1, n_side, 2 * n_side), &Device::Cpu).map_err(e)?;
    let mask_v: Vec<f64> = (0..n_side * 2 * n_side).map(|i| if i % (2 * n_side) < n_side { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask_v.clone(), (1, 1, n_side, 2 * n_side), &Device::Cpu).map_err(e)?;
    let mut worst_z: f64 = 0.0;
    for (k, &t) in [2usize, 250, 900].iter().enumerate() {
        let state = SamplerState { x: random_tensor(&mut rng, &[1, 1, n_side, 2 * n_side], -1.0, 1.0), t, rng_seed: 0 };
        let eps_hat = random_tensor(&mut rng, &[1, 1, n_side, 2 * n_side], -1.0, 1.0);
        let mut step_rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let next = masked_reverse_step(&state, &x0, &mask, &eps_hat, &sched, KnownConvention::Shifted, &mut step_rng)
            .map_err(e)?;
        let vals: Vec<f64> = flat64(&next.x).into_iter().zip(&mask_v).filter(|(_, m)| **m == 1.0).map(|(v, _)| v).collect();
        let n = vals.len() as f64;
        let ab = sched.alpha_bar(t - 1);
        let (mu, var) = (ab.sqrt() * x0_val, 1.0 - ab);
        let mean = vals.iter().sum::<f64>() / n;
        let sample_var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let z_mean = (mean - mu).abs() / (var / n).sqrt();
        let z_var = (sample_var - var).abs() / (var * (2.0 / (n - 1.0)).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    let pass_b = worst_z < 3.0;

    // (c) exact denoiser for N(0, I) data over the full chain
    let eps_of = |x: &Tensor, t: usize| -> sagiri_core::Result<Tensor> { Ok((x * (1.0 - sched.alpha_bar(t)).sqrt())?) };
    let n = 10_000;
    let samples = sample_loop(
        &eps_of,
        &[n, 4, 1, 1],
        None,
        &sched,
        SampleOptions { n_steps: sched.len(), seed: 7, ..Default::default() },
        DType::F64,
    )
    .map_err(e)?;
    let v = flat64(&samples);
    let mut worst_cov: f64 = 0.0;
    let means: Vec<f64> = (0..4).map(|i| (0..n).map(|s| v[s * 4 + i]).sum::<f64>() / n as f64).collect();
    for i in 0..4 {
        for j in 0..4 {
            let c = (0..n).map(|s| (v[s * 4 + i] - means[i]) * (v[s * 4 + j] - means[j])).sum::<f64>() / (n - 1) as f64;
            let target = if i == j { 1.0 } else { 0.0 };
            worst_cov = worst_cov.max((c - target).abs());
        }
    }
    let pass_c = worst_cov < 0.1;
    Ok((
        pass_a && pass_b && pass_c,
        format!(
            "(a) |refine - round trip| {err_a:.1e} (tol 1e-5); (b) worst z {worst_z:.2} over 3 steps (tol 3); \
             (c) max |cov - I| {worst_cov:.3} at T={} steps (tol 0.1)",
            sched.len()
        ),
    ))
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0;
    for _ in 0..100 {
        let (b, c, s) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..6));
        let (hs, ws) = (rng.random_range(1..6), rng.random_range(1..6));
        let (h, w) = (hs * s, ws * s);
        let x = random_tensor(&mut rng, &[b, c, h, w], -1.0, 1.0);
        let y = pixel_unshuffle(&x, s).map_err(e)?;
        let xv = flat64(&x);
        let yv = flat64(&y);
        let mut ok = flat64(&pixel_shuffle(&y, s).map_err(e)?) == xv && y.dims() == [b, c * s * s, hs, ws];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        for yy in 0..hs {
                            for xx in 0..ws {
                                let out = ((bi * c * s * s + ci * s * s + i * s + j) * hs + yy) * ws + xx;
                                let inp = ((bi * c + ci) * h + yy * s + i) * w + xx * s + j;
                                ok &= yv[out] == xv[inp];
                            }
                        }
                    }
                }
            }
        }
        failures += usize::from(!ok);
    }
    Ok((failures == 0, format!("{failures}/100 shapes fail the exact round trip or index map")))
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad_detect = 0;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(4..40), rng.random_range(4..40));
        let mut data = Vec::with_capacity(w * h * 3);
        let mut truth_all = Vec::with_capacity(w * h);
        let mut truth_any = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            let kind = rng.random_range(0..5);
            let mut px: [u32; 3] = [rng.random_range(1..255), rng.random_range(1..255), rng.random_range(1..255)];
            match kind {
                0 => px = [255; 3],
                1 => px = [0; 3],
                2 => px[rng.random_range(0..3)] = if rng.random::<bool>() { 255 } else { 0 },
                _ => {}
            }
            truth_all.push(kind >= 2);
            truth_any.push(kind >= 3);
            data.extend(px.iter().map(|&v| v as f32));
        }
        let img = ImageBuffer::new(w, h, 3, data, ValueRange::Byte, ColorSpace::Srgb).map_err(e)?;
        for (mode, truth) in [(SaturationMode::AllChannels, &truth_all), (SaturationMode::AnyChannel, &truth_any)] {
            let m = detect_unknown_mask(&img, mode).map_err(e)?;
            let got: Vec<bool> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| m.is_known(y, x)).collect();
            bad_detect += usize::from(&got != truth);
        }
    }
    let mut bad_project = 0;
    for _ in 0..50 {
        let scale = rng.random_range(1..9);
        let (lh, lw, lc) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let p_unknown = rng.random_range(0.0..0.2);
        let (h, w) = (lh * scale, lw * scale);
        let known: Vec<bool> = (0..h * w).map(|_| !rng.random_bool(p_unknown)).collect();
        let mask = RegionMask::from_fn(w, h, |y, x| known[y * w + x]);
        let proj = project_mask_to_latent(&mask, scale, lc).map_err(e)?;
        let lat = proj.latent().ok_or("no latent mask")?;
        let mut ok = (lat.channels, lat.height, lat.width) == (lc, lh, lw);
        for c in 0..lc {
            for ly in 0..lh {
                for lx in 0..lw {
                    let mut all_known = true;
                    for y in ly * scale..(ly + 1) * scale {
                        for x in lx * scale..(lx + 1) * scale {
                            all_known &= known[y * w + x];
                        }
                    }
                    ok &= (lat.get(c, ly, lx) == 1) == all_known;
                }
            }
        }
        bad_project += usize::from(!ok);
    }
    Ok((
        bad_detect == 0 && bad_project == 0,
        format!("detection mismatches {bad_detect}/100, projection mismatches {bad_project}/50 (exact)"),
    ))
}

// 9 -------------------------------------------------------------------------

struct ToyRun {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    train: Corpus,
    val: Corpus,
    restorer: Restorer,
    vae: ModelBundle,
    sagiri: ModelBundle,
}

fn reduction(before: f64, after: f64) -> f64 {
    100.0 * (1.0 - after / before)
}

fn criterion_9() -> Result<(ToyRun, (bool, String)), String> {
    let cfg = RunConfig::toy().with_seed(TOY_SEED);
    let dir = tempfile::tempdir().map_err(e)?;
    let synth = SynthConfig { n_train: 128, n_val: 32, size: 64, ..cfg.synth.clone() };
    let (t, v) = synthesize_corpus(dir.path(), &synth, cfg.seed).map_err(e)?;
    let train = Corpus::load(t).map_err(e)?;
    let val = Corpus::load(v).map_err(e)?;
    let clock = Instant::now();
    let lap = |what: &str| eprintln!("  [{:>6.0} s] {what}", clock.elapsed().as_secs_f64());

    let tc = &cfg.train_restorer;
    let rb = build_restorer(&cfg.restorer, cfg.seed).map_err(e)?;
    let r0 = Restorer::from_bundle(&rb).map_err(e)?;
    let (tr0, va0) = (
        eval_restorer(&r0, &train, &tc.loss_weights, tc.hist_bins).map_err(e)?,
        eval_restorer(&r0, &val, &tc.loss_weights, tc.hist_bins).map_err(e)?,
    );
    let rep = train_restorer(rb, &train, tc, None).map_err(e)?;
    let restorer = Restorer::from_bundle(&rep.bundle).map_err(e)?;
    let (tr1, va1) = (
        eval_restorer(&restorer, &train, &tc.loss_weights, tc.hist_bins).map_err(e)?,
        eval_restorer(&restorer, &val, &tc.loss_weights, tc.hist_bins).map_err(e)?,
    );
    lap("restorer trained");

    let vae = train_vae(build_vae(&cfg.vae, cfg.seed).map_err(e)?, &train, &cfg.train_vae, None).map_err(e)?.bundle;
    lap("vae trained");
    let sched = cfg.schedule.build().map_err(e)?;
    let base = train_base(build_unet(&cfg.unet, cfg.seed).map_err(e)?, &vae, &train, &sched, &cfg.train_base, None)
        .map_err(e)?
        .bundle;
    lap("base denoiser trained");
    let s0 = build_sagiri(&cfg.unet, Some(&base), cfg.seed).map_err(e)?;
    let paired = EpsEvalMode::Paired { restorer: &restorer, masked: cfg.finetune_sagiri.mask_enabled };
    let deg = cfg.degradation_for(64, 64);
    let degraded = EpsEvalMode::Degraded(deg);
    let eval = |b: &ModelBundle, mode: &EpsEvalMode| -> Result<f64, String> {
        eval_eps_loss(&SagiriNet::from_bundle(b).map_err(e)?, &vae, &val, mode, &sched, EPS_EVAL_TIMESTEPS, cfg.seed)
            .map_err(e)
    };
    let (eps0, deg0) = (eval(&s0, &paired)?, eval(&s0, &degraded)?);
    let pre = pretrain_sagiri(s0, &vae, &train, &deg, &sched, &cfg.pretrain_sagiri, None).map_err(e)?.bundle;
    let deg1 = eval(&pre, &degraded)?;
    lap("sagiri pretrained");
    let sagiri = finetune_sagiri(pre, &vae, &restorer, &train, &sched, &cfg.finetune_sagiri, None).map_err(e)?.bundle;
    let eps1 = eval(&sagiri, &paired)?;
    lap("sagiri finetuned");

    let (rt, rv, re) = (
        reduction(tr0.color_loss, tr1.color_loss),
        reduction(va0.color_loss, va1.color_loss),
        reduction(eps0, eps1),
    );
    let pass = rt >= 50.0 && rv >= 30.0 && re >= 30.0;
    let detail = format!(
        "restorer L_color train {:.3}->{:.3} (-{rt:.1}%, need 50), val {:.3}->{:.3} (-{rv:.1}%, need 30); \
         val eps-loss {eps0:.4}->{eps1:.4} (-{re:.1}%, need 30); pretrain-only degraded eps {deg0:.4}->{deg1:.4}",
        tr0.color_loss, tr1.color_loss, va0.color_loss, va1.color_loss
    );
    let run = ToyRun { _dir: dir, cfg, train, val, restorer, vae, sagiri };
    Ok((run, (pass, detail)))
}

// 10 ------------------------------------------------------------------------

fn criterion_10(toy: Option<&ToyRun>) -> Outcome {
    let owned;
    let (cfg, train, val) = match toy {
        Some(t) => (t.cfg.clone(), &t.train, &t.val),
        None => {
            let dir = tempfile::tempdir().map_err(e)?;
            let (t, v) = synthesize_corpus(dir.path(), &SynthConfig::default(), TOY_SEED).map_err(e)?;
            owned = (Corpus::load(t).map_err(e)?, Corpus::load(v).map_err(e)?, dir);
            (RunConfig::toy(), &owned.0, &owned.1)
        }
    };
    let full_w = LossWeights::default();
    let mse_w = LossWeights { lambda2: 0.0, lambda3: 0.0, ..full_w };
    let mut wins = 0;
    let mut psnr_wins = 0;
    let mut rows = Vec::new();
    let steps = cfg.train_restorer.steps;
    for seed in 0..ABLATION_SEEDS {
        let score = |w: LossWeights| -> Result<(f64, f64), String> {
            let tc = TrainConfig { steps, seed, loss_weights: w, ..cfg.train_restorer.clone() };
            let b = train_restorer(build_restorer(&cfg.restorer, seed).map_err(e)?, train, &tc, None).map_err(e)?.bundle;
            let r = eval_restorer(&Restorer::from_bundle(&b).map_err(e)?, val, &full_w, tc.hist_bins).map_err(e)?;
            Ok((r.cd_hard, r.psnr))
        };
        // the criterion 9 restorer is the full-loss arm for the run seed
        let reused = toy.filter(|t| seed == t.cfg.seed && t.cfg.train_restorer.loss_weights == full_w);
        let (cd_full, psnr_full) = match reused {
            Some(t) => {
                let r = eval_restorer(&t.restorer, val, &full_w, cfg.train_restorer.hist_bins).map_err(e)?;
                (r.cd_hard, r.psnr)
            }
            None => score(full_w)?,
        };
        let (cd_mse, psnr_mse) = score(mse_w)?;
        wins += usize::from(cd_full < cd_mse);
        psnr_wins += usize::from(psnr_full > psnr_mse);
        rows.push(format!("{cd_full:.3}/{cd_mse:.3}"));
        eprintln!("  seed {seed}: hard L_cd full {cd_full:.4} vs mse {cd_mse:.4}; psnr {psnr_full:.2} vs {psnr_mse:.2}");
    }
    Ok((
        wins >= 4,
        format!(
            "full L_color beats MSE-only on val hard L_cd in {wins}/{ABLATION_SEEDS} seeds (need 4) [{}]; \
             PSNR higher with full loss in {psnr_wins}/{ABLATION_SEEDS} (recorded, not gated); {steps} steps per run",
            rows.join(", ")
        ),
    ))
}

// 11 ------------------------------------------------------------------------

fn models_for(toy: Option<&ToyRun>) -> Result<(SagiriModels, Option<&Restorer>, String), String> {
    match toy {
        Some(t) => Ok((SagiriModels::from_bundles(&t.vae, &t.sagiri).map_err(e)?, Some(&t.restorer), "toy-trained".into())),
        None => {
            let cfg = RunConfig::toy();
            let vae = build_vae(&cfg.vae, 1).map_err(e)?;
            let base = build_unet(&cfg.unet, 1).map_err(e)?;
            let net = build_sagiri(&cfg.unet, Some(&base), 1).map_err(e)?;
            Ok((SagiriModels::from_bundles(&vae, &net).map_err(e)?, None, "untrained (criterion 9 unavailable)".into()))
        }
    }
}

fn byte_data(img: &ImageBuffer) -> Vec<f64> {
    img.to_byte().unwrap().data().iter().map(|&v| v as f64).collect()
}

fn criterion_11(toy: Option<&ToyRun>) -> Outcome {
    let (models, _, which) = models_for(toy)?;
    let sched = NoiseSchedule::default();
    let dir = tempfile::tempdir().map_err(e)?;
    let input = dir.path().join("in");
    fs::create_dir_all(&input).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut originals = Vec::new();
    for i in 0..4 {
        let base = random_unit(&mut rng, 64, 64, 3);
        let (cy, cx, r) = (rng.random_range(12..52), rng.random_range(12..52), rng.random_range(6..14) as f64);
        let level = if i % 2 == 0 { 1.0 } else { 0.0 };
        let img = ImageBuffer::from_fn(64, 64, 3, ValueRange::UnitFloat, |y, x, c| {
            let d = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt();
            if d < r {
                level
            } else {
                0.15 + 0.7 * base.get(y, x, c)
            }
        })
        .map_err(e)?;
        let path = input.join(format!("img{i}.png"));
        save_image(&img, &path).map_err(e)?;
        originals.push(path);
    }
    let opts = RefineOptions { seed: 5, ..Default::default() };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    refine_directory(&input, &out_a, &models, &sched, &opts).map_err(e)?;
    refine_directory(&input, &out_b, &models, &sched, &opts).map_err(e)?;

    let f = models.vae.factor();
    let mut identical = true;
    let mut known_max: f64 = 0.0;
    let mut unknown_min_mean = f64::INFINITY;
    for path in &originals {
        let name = path.file_name().unwrap();
        identical &= fs::read(out_a.join(name)).map_err(e)? == fs::read(out_b.join(name)).map_err(e)?;
        let src = load_image(path).map_err(e)?;
        let out = load_image(out_a.join(name)).map_err(e)?;
        let reference = models.round_trip(&src).map_err(e)?;
        let mask = detect_unknown_mask(&src, SaturationMode::AllChannels).map_err(e)?;
        let footprint = project_mask_to_latent(&mask, f, 1).map_err(e)?.latent().unwrap().to_pixel_mask(f);
        let (o, r) = (byte_data(&out), byte_data(&reference));
        let (mut sum_unknown, mut n_unknown) = (0.0, 0usize);
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    let i = (y * 64 + x) * 3 + c;
                    let d = (o[i] - r[i]).abs() / 255.0;
                    if footprint.is_known(y, x) {
                        known_max = known_max.max(d);
                    } else {
                        sum_unknown += d;
                        n_unknown += 1;
                    }
                }
            }
        }
        if n_unknown == 0 {
            return Err(format!("{} has no unknown latent cell", path.display()));
        }
        unknown_min_mean = unknown_min_mean.min(sum_unknown / n_unknown as f64);
    }
    Ok((
        identical && known_max < 1e-5 && unknown_min_mean > 0.0,
        format!(
            "{which} models; known-footprint max diff vs codec round trip {known_max:.1e} (tol 1e-5), \
             smallest mean unknown-footprint diff {unknown_min_mean:.4} (need > 0), reruns bit-identical: {identical}"
        ),
    ))
}

// 12 ------------------------------------------------------------------------

fn criterion_12(toy: Option<&ToyRun>) -> Outcome {
    let (models, restorer, which) = models_for(toy)?;
    let sched = NoiseSchedule::default();
    let opts = RefineOptions::default();
    let img = ImageBuffer::from_fn(256, 256, 3, ValueRange::UnitFloat, |y, x, c| {
        let sky = 0.4 + 0.6 * (1.0 - y as f32 / 255.0);
        let sun = (((y as f32 - 60.0).powi(2) + (x as f32 - 180.0).powi(2)).sqrt() < 30.0) as u8 as f32;
        (sky * (0.8 + 0.1 * c as f32) + sun).min(1.0)
    })
    .map_err(e)?;
    let start = Instant::now();
    let stage1 = match restorer {
        Some(r) => restore(r, &img).map_err(e)?,
        None => img.clone(),
    };
    let mask = detect_unknown_mask(&img.to_byte().map_err(e)?, opts.saturation).map_err(e)?;
    let out = refine(&stage1, None, Some(&mask), &models, &sched, &opts).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let finite = out.data().iter().all(|v| v.is_finite());
    let in_range = out.data().iter().all(|&v| (0.0..=1.0).contains(&v));
    let dims_ok = out.dims() == (256, 256, 3);
    Ok((
        finite && in_range && dims_ok && opts.n_steps == 30,
        format!(
            "{which} models, {} steps, restore+refine {secs:.1} s; finite {finite}, in [0,1] {in_range}, \
             {:.1}% of pixels regenerated",
            opts.n_steps,
            100.0 * mask.unknown_fraction()
        ),
    ))
}
