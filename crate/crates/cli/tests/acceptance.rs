//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.
//!
//! `ZED_ACCEPTANCE_STEPS` overrides the number of training steps used for
//! the detection experiment.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zed::codec::{decode_bytes, encode};
use zed::corpus_io::{load_image, save_image};
use zed::eval::{balanced_accuracy, image_features, roc_auc, threshold_sweep, StatisticChoice};
use zed::features::{level_maps, nll_entropy_maps};
use zed::mixture::{LogisticMixtureParams, NUM_SYMBOLS};
use zed::net::{init_weights, sample_level};
use zed::pyramid::{fourth_pixel, round_quarter_value, LEVELS};
use zed::trainer::{grad_check, train_on_images, TrainConfig};
use zed::{build_pyramid, ModelWeights, NetConfig, RgbImage};

const DEFAULT_TRAIN_STEPS: usize = 4000;
const TRAIN_PHOTOS: [&str; 5] = ["astronaut", "coffee", "motorcycle_left", "rocket", "china"];
const HELD_OUT_PHOTOS: [&str; 3] = ["chelsea", "flower", "motorcycle_right"];

type Outcome = Result<String, String>;

fn natural(name: &str) -> RgbImage {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata/natural");
    load_image(dir.join(format!("{name}.png"))).expect("natural test image")
}

fn random_crops(photos: &[RgbImage], n: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let im = &photos[i % photos.len()];
            let r = rng.random_range(0..=im.height() - size);
            let c = rng.random_range(0..=im.width() - size);
            im.crop(r, c, size, size).unwrap()
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width, height, |_, _, _| rng.random())
}

/// 2x Catmull-Rom downsampling followed by 2x upsampling.
fn bicubic_resample(img: &RgbImage) -> RgbImage {
    use image::imageops::{resize, FilterType};
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).unwrap();
    let small = resize(&buf, buf.width() / 2, buf.height() / 2, FilterType::CatmullRom);
    let up = resize(&small, buf.width(), buf.height(), FilterType::CatmullRom);
    RgbImage::new(img.width(), img.height(), up.into_raw()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mixture_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let k = rng.random_range(1..=10);
        let p = LogisticMixtureParams::new(
            (0..k).map(|_| rng.random_range(-10.0..10.0)).collect(),
            (0..k).map(|_| rng.random_range(-60.0..320.0)).collect(),
            (0..k).map(|_| rng.random_range(-4.0..5.0)).collect(),
        );
        let pmf: Vec<f64> = (0..NUM_SYMBOLS).map(|s| p.pmf(s as u8)).collect();
        worst_sum = worst_sum.max((pmf.iter().sum::<f64>() - 1.0).abs());
        let naive: f64 = pmf.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum();
        worst_h = worst_h.max((p.entropy_nats() - naive).abs());
    }
    check(
        worst_sum < 1e-9 && worst_h < 1e-12,
        format!("max |sum pmf - 1| = {worst_sum:.2e}, max entropy error = {worst_h:.2e}"),
    )
}

fn jittered_tiny_weights(seed: u64) -> ModelWeights<f64> {
    let mut w = init_weights(NetConfig::tiny(), seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = w
        .tensors()
        .iter()
        .filter(|t| t.name.ends_with("bias"))
        .map(|t| t.name.clone())
        .collect();
    for name in names {
        for b in w.tensor_mut(&name).unwrap() {
            *b += rng.random_range(-0.2..0.2);
        }
    }
    w
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p64 = build_pyramid(&random_image(&mut rng, 8, 8)).unwrap();
    let p32 = build_pyramid(&random_image(&mut rng, 8, 8)).unwrap();
    let c64 = grad_check(&jittered_tiny_weights(3), &p64, 1e-5, 240, 1).map_err(|e| e.to_string())?;
    let c32 = grad_check(&jittered_tiny_weights(4).cast::<f32>(), &p32, 1e-5, 240, 2).map_err(|e| e.to_string())?;
    check(
        c64.checked >= 200 && c64.max_rel_error < 1e-5 && c32.max_rel_error < 1e-3,
        format!(
            "64-bit max rel error {:.2e} over {} params, 32-bit {:.2e} over {}",
            c64.max_rel_error, c64.checked, c32.max_rel_error, c32.checked
        ),
    )
}

fn pyramid_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for _ in 0..1000 {
        let (w, h) = (8 * rng.random_range(1..=6), 8 * rng.random_range(1..=6));
        let p = build_pyramid(&random_image(&mut rng, w, h)).unwrap();
        for level in 1..LEVELS {
            let (fine, y, x) = (p.x(level - 1), p.y(level), p.x(level));
            for r in 0..y.height() {
                for c in 0..y.width() {
                    for ch in 0..3 {
                        let b = [
                            fine.get(2 * r, 2 * c, ch),
                            fine.get(2 * r, 2 * c + 1, ch),
                            fine.get(2 * r + 1, 2 * c, ch),
                            fine.get(2 * r + 1, 2 * c + 1, ch),
                        ];
                        let q = y.get(r, c, ch);
                        let sum: u16 = b.iter().map(|&v| u16::from(v)).sum();
                        checked += 1;
                        if q != sum
                            || x.get(r, c, ch) != round_quarter_value(q)
                            || fourth_pixel(q, b[0], b[1], b[2]) != Some(b[3])
                        {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    check(
        violations == 0,
        format!("{violations} violations over {checked} averages"),
    )
}

fn coded_and_model_bits(img: &RgbImage, weights: &ModelWeights) -> Result<(f64, f64), String> {
    let bs = encode(img, weights).map_err(|e| e.to_string())?;
    let back = decode_bytes(&bs.to_bytes(), weights).map_err(|e| e.to_string())?;
    if &back != img {
        return Err("round trip changed the image".into());
    }
    let maps = nll_entropy_maps(weights, &build_pyramid(img).unwrap()).map_err(|e| e.to_string())?;
    let nll_bits = maps.iter().flat_map(|m| &m.nll).sum::<f64>() / std::f64::consts::LN_2;
    Ok((bs.coded_bits() as f64, nll_bits))
}

fn codec_ground_truth(weights: &ModelWeights) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut images: Vec<(String, RgbImage)> = (0..50)
        .map(|i| {
            let (w, h) = (8 * rng.random_range(1..=4), 8 * rng.random_range(1..=4));
            (format!("random #{i}"), random_image(&mut rng, w, h))
        })
        .collect();
    for name in ["astronaut", "coffee", "chelsea", "flower", "rocket"] {
        let img = natural(name);
        let side = 128;
        let crop = img
            .crop((img.height() - side) / 2, (img.width() - side) / 2, side, side)
            .unwrap();
        images.push((name.to_string(), crop));
    }
    let mut worst_ratio = 0.0f64;
    let mut below = Vec::new();
    for (name, img) in &images {
        let (coded, nll) = coded_and_model_bits(img, weights).map_err(|e| format!("{name}: {e}"))?;
        if coded > 1.03 * nll + 128.0 {
            return Err(format!("{name}: {coded} coded bits above {:.1}", 1.03 * nll + 128.0));
        }
        if coded < nll {
            below.push(format!("{name} {:+.0}", coded - nll));
        }
        worst_ratio = worst_ratio.max(coded / nll);
    }
    let summary = format!(
        "{} images round-trip, all within 1.03 NLL + 128 (worst coded/NLL {worst_ratio:.5})",
        images.len()
    );
    if below.is_empty() {
        Ok(format!("{summary}, none below NLL"))
    } else {
        Err(format!(
            "{summary}; {} below the NLL lower bound (bits vs NLL: {})",
            below.len(),
            below.join(", ")
        ))
    }
}

fn self_consistency(weights: &ModelWeights) -> Outcome {
    let photos: Vec<RgbImage> = HELD_OUT_PHOTOS.iter().map(|n| natural(n)).collect();
    let crops = random_crops(&photos, 50, 64, 5);
    let mut d0 = Vec::with_capacity(crops.len());
    let mut clamped = 0;
    for (i, crop) in crops.iter().enumerate() {
        let context = build_pyramid(crop).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let s = sample_level(weights, 0, context.y(1), &mut rng).map_err(|e| e.to_string())?;
        clamped += s.violations;
        let m = level_maps(weights, 0, context.y(1), &s.image).map_err(|e| e.to_string())?;
        d0.push(m.mean_nll().unwrap() - m.mean_h().unwrap());
    }
    let n = d0.len() as f64;
    let mean = d0.iter().sum::<f64>() / n;
    let se = (d0.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    check(
        mean.abs() <= 3.0 * se,
        format!("mean D0 {mean:+.5} nats, standard error {se:.5}, {clamped} clamped fourth pixels"),
    )
}

fn desk_scale_detection(weights: &ModelWeights, train_secs: f64) -> Outcome {
    let photos: Vec<RgbImage> = HELD_OUT_PHOTOS.iter().map(|n| natural(n)).collect();
    let crops = random_crops(&photos, 80, 128, 6);
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for (i, crop) in crops.iter().enumerate() {
        if i % 2 == 0 {
            real.push(image_features(crop, weights).map_err(|e| e.to_string())?.statistics());
        } else {
            fake.push(
                image_features(&bicubic_resample(crop), weights)
                    .map_err(|e| e.to_string())?
                    .statistics(),
            );
        }
    }
    let pick = |c: StatisticChoice, v: &[zed::DecisionStats]| v.iter().map(|s| c.pick(s)).collect::<Vec<_>>();
    let auc = |c| {
        roc_auc(&pick(c, &real), &pick(c, &fake))
            .map(|r| r.auc)
            .map_err(|e| e.to_string())
    };
    let auc_d0 = auc(StatisticChoice::AbsD0)?;
    let auc_delta = auc(StatisticChoice::AbsDelta01)?;
    let best = [StatisticChoice::AbsD0, StatisticChoice::AbsDelta01]
        .into_iter()
        .map(|c| threshold_sweep(&pick(c, &real), &pick(c, &fake), 0).map(|s| s.best_accuracy))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let ba = best.iter().copied().fold(0.0, f64::max);
    check(
        auc_d0 >= 0.85 && auc_delta >= 0.80 && ba >= 0.80 && train_secs <= 3600.0,
        format!(
            "AUC |D0| {auc_d0:.3} (>= 0.85), AUC |delta01| {auc_delta:.3} (>= 0.80), best balanced accuracy {ba:.3} (>= 0.80) \
             on {}+{} crops, training {train_secs:.0} s (<= 3600)",
            real.len(),
            fake.len()
        ),
    )
}

fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for instance in 0..100 {
        let levels = rng.random_range(2..40);
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| f64::from(rng.random_range(0..levels)) / 3.0)
                .collect::<Vec<_>>()
        };
        let n_real = 1 + (instance * 37) % 200;
        let n_fake = 1 + (instance * 53) % 200;
        let (real, fake) = (draw(n_real), draw(n_fake));
        let mut wins = 0u64;
        for f in &fake {
            for r in &real {
                wins += if f > r {
                    2
                } else if f == r {
                    1
                } else {
                    0
                };
            }
        }
        let brute = wins as f64 / (2 * n_real * n_fake) as f64;
        let got = roc_auc(&real, &fake).map_err(|e| e.to_string())?.auc;
        if got != brute {
            return Err(format!("instance {instance}: AUC {got} vs pairwise {brute}"));
        }
        for t in [-1.0, 0.5, 2.0, real[0], fake[0], 100.0] {
            let tnr = real.iter().filter(|&&s| s <= t).count() as f64 / n_real as f64;
            let tpr = fake.iter().filter(|&&s| s > t).count() as f64 / n_fake as f64;
            let ba = balanced_accuracy(&real, &fake, t).map_err(|e| e.to_string())?;
            if ba != 0.5 * (tnr + tpr) {
                return Err(format!("instance {instance}: balanced accuracy {ba} at {t}"));
            }
        }
    }
    Ok("100 instances: AUC equals pairwise counting, balanced accuracy equals direct counting".into())
}

fn run_zed(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_zed"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "zed {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn without_summary(jsonl: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(jsonl);
    text.lines()
        .filter(|l| !l.starts_with("{\"summary\""))
        .collect::<Vec<_>>()
        .join("\n")
        .into_bytes()
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let photos: Vec<RgbImage> = TRAIN_PHOTOS.iter().map(|n| natural(n)).collect();
    let crops = random_crops(&photos, 12, 32, 8);
    let mut train_csv = String::from("path,label,generator,group\n");
    let mut eval_csv = train_csv.clone();
    for (i, crop) in crops.iter().enumerate() {
        let real = format!("real{i}.png");
        save_image(root.join(&real), crop).map_err(|e| e.to_string())?;
        if i < 6 {
            train_csv.push_str(&format!("{real},real,real,g\n"));
        } else {
            let fake = format!("fake{i}.png");
            save_image(root.join(&fake), &bicubic_resample(crop)).map_err(|e| e.to_string())?;
            eval_csv.push_str(&format!("{real},real,real,g\n{fake},synthetic,bicubic,g\n"));
        }
    }
    let write = |name: &str, text: &str| std::fs::write(root.join(name), text).map_err(|e| e.to_string());
    write("train.csv", &train_csv)?;
    write("eval.csv", &eval_csv)?;
    write(
        "tiny.conf",
        "seed = 11\nsteps = 20\nbatch_size = 3\ncrop_size = 16\nlog_every = 5\n\
         mixtures = 2\ntrunk_depth = 1\ntrunk_channels = 4\nhead_width = 8\n",
    )?;

    let p = |name: String| -> PathBuf { root.join(name) };
    let s = |path: &PathBuf| path.to_str().unwrap().to_string();
    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let weights = p(format!("w{run}.zedw"));
        let report = p(format!("eval{run}.json"));
        run_zed(&[
            "--config",
            &s(&p("tiny.conf".into())),
            "--threads",
            "2",
            "train",
            "--manifest",
            &s(&p("train.csv".into())),
            "--out",
            &s(&weights),
        ])?;
        run_zed(&[
            "--config",
            &s(&p("tiny.conf".into())),
            "evaluate",
            "--weights",
            &s(&weights),
            "--manifest",
            &s(&p("eval.csv".into())),
            "--report-out",
            &s(&report),
            "--features-out",
            &s(&p(format!("features{run}.csv"))),
        ])?;
        let files = [
            format!("w{run}.zedw"),
            format!("eval{run}.json"),
            format!("eval{run}.sweep.csv"),
            format!("eval{run}.gaps.csv"),
            format!("features{run}.csv"),
        ];
        let mut bytes = files
            .iter()
            .map(|f| std::fs::read(p(f.clone())).map_err(|e| format!("{f}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let log = std::fs::read(p(format!("w{run}.train.jsonl"))).map_err(|e| e.to_string())?;
        bytes.push(without_summary(&log));
        outputs.push(bytes);
    }
    let names = ["weights", "report", "sweep", "gaps", "features", "training log"];
    let differing: Vec<&str> = names
        .iter()
        .zip(outputs[0].iter().zip(&outputs[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| *n)
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            "weights, evaluation report, sweep, gap and feature files identical; training log identical apart from wall time".into()
        } else {
            format!("outputs differ between runs: {}", differing.join(", "))
        },
    )
}

fn train_detector() -> Result<(ModelWeights, f64), String> {
    let steps = std::env::var("ZED_ACCEPTANCE_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_TRAIN_STEPS);
    let photos: Vec<RgbImage> = TRAIN_PHOTOS.iter().map(|n| natural(n)).collect();
    let crops = random_crops(&photos, 500, 128, 9);
    let config = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (weights, report) = train_on_images(&crops, &config).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "trained default model: {steps} steps on {} crops in {secs:.0} s, validation NLL {:.4} -> {:.4} nats",
        crops.len(),
        report.initial_nll,
        report.final_validation_nll
    );
    Ok((weights, secs))
}

fn report(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let slow = limit.is_some_and(|l| took > l);
    let (status, detail) = match &outcome {
        Ok(d) if !slow => ("PASS", d.clone()),
        Ok(d) => ("FAIL", format!("{d}; exceeded time limit {:?}", limit.unwrap())),
        Err(d) => ("FAIL", d.clone()),
    };
    println!(
        "criterion {id} {status}: {name}: {detail} [{:.1} s]",
        took.as_secs_f64()
    );
    status == "PASS"
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut all = true;
    all &= report(1, "mixture normalization", secs(10), mixture_normalization);
    all &= report(2, "gradient correctness", secs(120), gradient_correctness);
    all &= report(3, "pyramid exactness", secs(30), pyramid_exactness);
    all &= report(7, "AUC and balanced accuracy", secs(10), metric_correctness);
    all &= report(8, "CLI determinism", None, cli_determinism);

    match train_detector() {
        Ok((weights, train_secs)) => {
            all &= report(4, "codec ground truth", secs(300), || codec_ground_truth(&weights));
            all &= report(5, "self-consistency", secs(600), || self_consistency(&weights));
            all &= report(6, "desk-scale detection", None, || {
                desk_scale_detection(&weights, train_secs)
            });
        }
        Err(e) => {
            for (id, name) in [
                (4, "codec ground truth"),
                (5, "self-consistency"),
                (6, "desk-scale detection"),
            ] {
                println!("criterion {id} FAIL: {name}: training failed: {e}");
            }
            all = false;
        }
    }
    if !all {
        std::process::exit(1);
    }
}
