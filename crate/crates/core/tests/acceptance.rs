//! One line per acceptance criterion. Run with `cargo test --test acceptance`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};

use image::{GrayImage, Luma, RgbImage};
use pipe_core::backends::stub::StubDenoiser;
use pipe_core::calibration::{suggest_threshold, sweep_threshold, CandidateKey, Label, Orientation};
use pipe_core::evaluation::{cmmd, magicbrush_add_filter};
use pipe_core::guidance::toy::{toy_hit_rate, toy_noise_schedule, toy_train, two_mode_dataset, ToyDenoiser};
use pipe_core::guidance::*;
use pipe_core::instructions::InstructionTally;
use pipe_core::pipeline::read_funnel;
use pipe_core::post_removal::{alpha_blend, consensus_value};
use pipe_core::raster::WeightMap;
use pipe_core::removal::build_removal_prompts;
use pipe_core::seed::rng_from_seed;
use pipe_core::{run_all, EmbeddingVector, InstructionKind, RunOptions, Workspace};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e2e_pipeline() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = common::corpus(dir.path());
    let cfg = common::stub_config(&corpus);
    let mut bytes = Vec::new();
    let mut slowest = 0.0f64;
    let mut funnel = None;
    for run in ["first", "second"] {
        let ws = Workspace::open(dir.path().join(run)).map_err(|e| e.to_string())?;
        let t = std::time::Instant::now();
        run_all(&ws, &cfg, &cfg.make_backends().map_err(|e| e.to_string())?, RunOptions::default())
            .map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        bytes.push(std::fs::read(ws.dataset_path()).map_err(|e| e.to_string())?);
        funnel = Some(read_funnel(&ws.dataset_path()).map_err(|e| e.to_string())?);
    }
    let funnel = funnel.expect("two runs");
    let counts: Vec<u64> = funnel.stages.iter().map(|s| s.count).collect();
    ensure!(slowest < 60.0, "slowest run {slowest:.1}s");
    ensure!(counts.len() == 6, "{} funnel stages", counts.len());
    ensure!(funnel.validate().is_ok() && counts.windows(2).all(|w| w[1] <= w[0]), "funnel {counts:?}");
    ensure!(bytes[0] == bytes[1], "manifests differ between seeded runs");
    Ok(format!(
        "{} images, funnel {counts:?}, slowest run {slowest:.2}s, manifests byte-identical",
        200
    ))
}

fn removal_prompts() -> Check {
    for (label, neg) in [("dog", "an object, a dog"), ("traffic light", "an object, a traffic light")] {
        let (p, n) = build_removal_prompts(label).map_err(|e| e.to_string())?;
        ensure!(p == "a photo of a background, a photo of an empty place", "positive {p:?}");
        ensure!(n == neg, "negative {n:?}");
    }
    Ok("positive and negative prompts match character for character".into())
}

fn unit(v: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector::unit(v).expect("non-zero")
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn consensus() -> Check {
    let mut rng = rng_from_seed(3);
    for _ in 0..100 {
        let e = unit(random_vec(&mut rng, 32));
        let v = consensus_value(&[e.clone(), e.clone(), e]).map_err(|e| e.to_string())?;
        ensure!(v == 0.0, "identical triple gave {v:e}");
    }
    let fixture = consensus_value(&[unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0]), unit(vec![1.0, 0.0])]).map_err(|e| e.to_string())?;
    let err = (fixture - 2f64.sqrt() / 3.0).abs();
    ensure!(err <= 1e-12, "fixture off by {err:e}");
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for _ in 0..1000 {
        let t: Vec<EmbeddingVector> = (0..3).map(|_| unit(random_vec(&mut rng, 16))).collect();
        let base = consensus_value(&t).map_err(|e| e.to_string())?;
        for p in PERMS {
            let v = consensus_value(&[t[p[0]].clone(), t[p[1]].clone(), t[p[2]].clone()]).map_err(|e| e.to_string())?;
            ensure!(v == base, "permutation {p:?} changed {base} to {v}");
        }
    }
    Ok(format!("identical = 0 exactly, fixture error {err:.1e}, 1000 triples permutation-invariant (bitwise)"))
}

fn alpha_blend_check() -> Check {
    let mut rng = rng_from_seed(4);
    let mut zero_weight_pixels = 0u64;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(2..24u32), rng.random_range(2..24u32));
        let src = RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let inp = RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let density = rng.random_range(0.0..0.5);
        let mask = GrayImage::from_fn(w, h, |_, _| Luma([if rng.random_bool(density) { 255 } else { 0 }]));
        let sigma = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.1..3.0) };
        let out = alpha_blend(&src, &inp, &mask, sigma).map_err(|e| e.to_string())?;
        let weights = WeightMap::from_mask(&mask).blurred(sigma);
        for (i, (o, s)) in out.pixels().zip(src.pixels()).enumerate() {
            if weights.data[i] == 0.0 {
                zero_weight_pixels += 1;
                ensure!(o == s, "zero-weight pixel {i} changed");
            }
        }
        let full = GrayImage::from_pixel(w, h, Luma([255]));
        let empty = GrayImage::new(w, h);
        ensure!(alpha_blend(&src, &inp, &full, sigma).map_err(|e| e.to_string())? == inp, "full mask, sigma {sigma}");
        ensure!(alpha_blend(&src, &inp, &empty, sigma).map_err(|e| e.to_string())? == src, "empty mask, sigma {sigma}");
    }
    Ok(format!("1000 fixtures, {zero_weight_pixels} zero-weight pixels bit-exact, full/empty masks exact"))
}

fn cmmd_oracle(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64, scale: f64) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |s: &[Vec<f64>], t: &[Vec<f64>]| {
        let mut acc = 0.0;
        for x in s {
            for y in t {
                acc += k(x, y);
            }
        }
        acc / (s.len() * t.len()) as f64
    };
    scale * (mean(a, a) + mean(b, b) - 2.0 * mean(a, b))
}

fn cmmd_check() -> Check {
    let raw = |v: &[Vec<f64>]| v.iter().cloned().map(EmbeddingVector::raw).collect::<Vec<_>>();
    let mut rng = rng_from_seed(5);
    let a: Vec<Vec<f64>> = (0..32).map(|_| random_vec(&mut rng, 16)).collect();
    let same = cmmd(&raw(&a), &raw(&a), 10.0, 1000.0).map_err(|e| e.to_string())?;
    ensure!(same.abs() <= 1e-12, "identical sets gave {same:e}");
    let single = cmmd(&raw(&[vec![1.0, 0.0]]), &raw(&[vec![0.0, 1.0]]), 1.0, 1.0).map_err(|e| e.to_string())?;
    let single_err = (single - (2.0 - 2.0 * (-1f64).exp())).abs();
    ensure!(single_err <= 1e-9, "single pair off by {single_err:e}");
    let mut worst = 0.0f64;
    for i in 0..20 {
        let a: Vec<Vec<f64>> = (0..32).map(|_| random_vec(&mut rng, 16)).collect();
        let b: Vec<Vec<f64>> = (0..32).map(|_| random_vec(&mut rng, 16).iter().map(|v| v + 0.3).collect()).collect();
        let (sigma, scale) = if i % 2 == 0 { (10.0, 1000.0) } else { (1.0, 1.0) };
        let got = cmmd(&raw(&a), &raw(&b), sigma, scale).map_err(|e| e.to_string())?;
        let want = cmmd_oracle(&a, &b, sigma, scale);
        worst = worst.max((got - want).abs());
    }
    ensure!(worst <= 1e-9, "oracle mismatch {worst:e}");
    Ok(format!("identical {same:.1e}, single pair error {single_err:.1e}, worst oracle error {worst:.1e} over 20 set pairs"))
}

fn cfg_algebra() -> Check {
    let mut rng = rng_from_seed(6);
    let s11 = GuidanceScales::new(1.0, 1.0).map_err(|e| e.to_string())?;
    let s01 = GuidanceScales::new(0.0, 1.0).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let mut v = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-10.0..10.0)).collect() };
        let (u, i, f) = (v(), v(), v());
        ensure!(cfg_combine(&u, &i, &f, s11).map_err(|e| e.to_string())? == f, "s_I=s_T=1 is not e_full");
        ensure!(cfg_combine(&u, &i, &f, s01).map_err(|e| e.to_string())? == i, "s_T=0, s_I=1 is not e_img");
    }
    let fixture = cfg_combine(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], GuidanceScales::new(7.5, 1.5).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure!(fixture == vec![1.5, 7.5], "fixture gave {fixture:?}");
    Ok("1000 random tensors exact for both identities, fixture [1.5, 7.5] exact".into())
}

fn dropout() -> Check {
    let cfg = DropoutConfig::default();
    let mut rng = rng_from_seed(7);
    let n = 100_000;
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for _ in 0..n {
        let name = match drop_event(&cfg, rng.random::<f64>()) {
            DropEvent::Text => "text",
            DropEvent::Image => "image",
            DropEvent::Both => "both",
            DropEvent::Keep => "keep",
        };
        *counts.entry(name).or_default() += 1;
    }
    let mut parts = Vec::new();
    for ev in ["text", "image", "both"] {
        let p = counts.get(ev).copied().unwrap_or(0) as f64 / n as f64;
        ensure!((p - 0.05).abs() <= 0.005, "{ev} dropped at {p}");
        parts.push(format!("{ev} {:.2}%", p * 100.0));
    }
    Ok(format!("{n} draws: {}", parts.join(", ")))
}

fn toy_guidance() -> Check {
    let data = two_mode_dataset(4096, 11);
    let noise = toy_noise_schedule();
    let out = toy_train(&data, ToyDenoiser::new(64, 50, 1), &DropoutConfig::default(), &TrainHyperparams::toy(), &noise, 7)
        .map_err(|e| e.to_string())?;
    let sched = SamplingSchedule::uniform(noise, 25).map_err(|e| e.to_string())?;
    let rate = |s_t: f64| -> std::result::Result<f64, String> {
        let scales = GuidanceScales::new(s_t, 1.0).map_err(|e| e.to_string())?;
        toy_hit_rate(&out.model, &sched, scales, 1000, 5).map_err(|e| e.to_string())
    };
    let (off, on) = (rate(0.0)?, rate(3.0)?);
    let gap = (on - off) * 100.0;
    ensure!(gap > 10.0, "hit rate s_T=0 {off:.3}, s_T=3 {on:.3}");
    Ok(format!("hit rate s_T=0 {:.1}%, s_T=3 {:.1}%, gap {gap:.1} points", off * 100.0, on * 100.0))
}

fn latent_chaining() -> Check {
    let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 100]));
    let den = StubDenoiser::new(1);
    let sched = SamplingSchedule::uniform(NoiseSchedule::linear(100, 1e-3, 0.05), 4).map_err(|e| e.to_string())?;
    let scales = GuidanceScales::new(7.5, 1.5).map_err(|e| e.to_string())?;
    for n in [1usize, 3, 10] {
        let codec = CountingCodec::new(StubCodec);
        let instr: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64; 3]).collect();
        multi_edit_latent_chain(&img, &instr, &codec, &den, scales, &sched, 9).map_err(|e| e.to_string())?;
        ensure!((codec.encodes(), codec.decodes()) == (1, 1), "{n} instructions: ({}, {})", codec.encodes(), codec.decodes());
    }
    Ok("(encode, decode) = (1, 1) for 1, 3 and 10 instructions".into())
}

fn magicbrush() -> Check {
    let cases = [
        ("add a red hat to the man", true),
        ("put a cat on the sofa", true),
        ("add a dog and a cat", false),
        ("remove the cup and add a vase", false),
        ("remove the lamp", false),
        ("add a band on the stage", true),
        ("Add a brand new umbrella", true),
    ];
    for (text, keep) in cases {
        ensure!(magicbrush_add_filter(text) == keep, "{text:?} should be {}", if keep { "kept" } else { "dropped" });
    }
    Ok(format!("{} cases including \"band\" kept", cases.len()))
}

fn calibration() -> Check {
    let planted = common::planted_candidates();
    let labels: BTreeMap<CandidateKey, Label> = planted.iter().map(|(c, l)| (c.key.clone(), *l)).collect();
    let scores: HashMap<CandidateKey, f64> = planted.iter().map(|(c, _)| (c.key.clone(), c.scores.consensus.unwrap())).collect();
    let thresholds: Vec<f64> = common::PLANTED_TABLE.iter().map(|r| r.0).collect();
    let curve = sweep_threshold(&labels, &scores, &thresholds, Orientation::FilterHigh).map_err(|e| e.to_string())?;
    let got: Vec<(f64, f64, Option<f64>)> = curve.iter().map(|p| (p.threshold, p.filtered_pct, p.success_pct_retained)).collect();
    ensure!(got == common::PLANTED_TABLE.to_vec(), "sweep {got:?}");
    let s = suggest_threshold(&curve, 0.05).map_err(|e| e.to_string())?;
    ensure!(s.threshold == 0.10 && !s.no_plateau, "suggested {s:?}, elbow at 0.10");

    // failure iff the score crosses a cutoff: a monotone score
    let mut rng = rng_from_seed(8);
    for _ in 0..200 {
        let n = rng.random_range(5..60);
        let cutoff = rng.random_range(0.0..1.0);
        let mut labels = BTreeMap::new();
        let mut scores = HashMap::new();
        for i in 0..n {
            let k = CandidateKey::new(format!("r{i}"), 0);
            let s: f64 = rng.random();
            labels.insert(k.clone(), if s > cutoff { Label::Failure } else { Label::Success });
            scores.insert(k, s);
        }
        let mut grid: Vec<f64> = (0..=20).map(|i| 1.0 - i as f64 / 20.0).collect();
        grid.push(-0.01);
        let curve = sweep_threshold(&labels, &scores, &grid, Orientation::FilterHigh).map_err(|e| e.to_string())?;
        let defined: Vec<f64> = curve.iter().filter_map(|p| p.success_pct_retained).collect();
        ensure!(defined.windows(2).all(|w| w[1] >= w[0]), "success not monotone: {defined:?}");
        ensure!(curve.windows(2).all(|w| w[1].filtered_pct >= w[0].filtered_pct), "filtered not monotone");
    }
    Ok("20-row table exact, 200 monotone fixtures non-decreasing, elbow 0.10 suggested".into())
}

fn tally() -> Check {
    let t = InstructionTally::from_counts(&[
        (InstructionKind::ClassTemplate, 887_773),
        (InstructionKind::VlmLlm, 887_773),
        (InstructionKind::Reference, 104_373),
    ]);
    ensure!(t.total() == 1_879_919, "total {}", t.total());
    Ok(format!("887,773 + 887,773 + 104,373 = {}", t.total()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 12] = [
        ("end-to-end stub pipeline", e2e_pipeline),
        ("removal prompts", removal_prompts),
        ("clip consensus", consensus),
        ("alpha blend", alpha_blend_check),
        ("cmmd", cmmd_check),
        ("cfg algebra", cfg_algebra),
        ("dropout frequencies", dropout),
        ("toy guidance effect", toy_guidance),
        ("latent chaining", latent_chaining),
        ("magicbrush add filter", magicbrush),
        ("calibration sweep", calibration),
        ("instruction counts", tally),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria pass", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
