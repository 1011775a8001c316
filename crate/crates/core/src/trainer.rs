//! Maximum-likelihood training of the context network on real images.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{load_image, CorpusManifest, Label, RgbImage};
use crate::error::{Error, Result};
use crate::mixture::MixtureRef;
use crate::net::model::{activate, group_base, log_scale_active};
use crate::net::{init_weights, LevelForward, ModelWeights, NetConfig, Position, Real, CODED_LEVELS};
use crate::pyramid::{build_pyramid, Pyramid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Side of the square random crops; multiple of 8.
    pub crop_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub level_weights: [f64; 3],
    /// Interval between JSON-lines log records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            crop_size: 64,
            batch_size: 16,
            steps: 20_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            level_weights: [1.0, 1.0, 1.0],
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return Err(Error::invalid(format!(
                "crop size {} is not a positive multiple of 8",
                self.crop_size
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch size and log interval must be positive"));
        }
        let positive = [self.learning_rate, self.beta1, self.beta2, self.epsilon];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid(
                "learning rate, betas and epsilon must be positive (betas < 1)",
            ));
        }
        if self.level_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("level weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Loss (nats per coded pixel-channel) and its gradient.
#[derive(Clone, Debug)]
pub struct LossAndGrad<T> {
    pub loss: f64,
    /// Unweighted mean NLL per level.
    pub level_losses: [f64; 3],
    pub grads: Vec<T>,
}

fn coded_samples(p: &Pyramid, level: usize) -> usize {
    p.y(level + 1).width() * p.y(level + 1).height() * 9
}

struct ImageTerms<T> {
    nll_sums: [f64; 3],
    grads: Vec<T>,
}

fn image_terms<T: Real>(
    weights: &ModelWeights<T>,
    pyramid: &Pyramid,
    scales: [f64; 3],
    with_grad: bool,
) -> Result<ImageTerms<T>> {
    let k = weights.config().mixtures;
    let outputs = weights.config().head_outputs();
    let mut grads = if with_grad {
        vec![T::zero(); weights.len()]
    } else {
        Vec::new()
    };
    let mut nll_sums = [0.0; 3];
    let mut params = vec![0.0; 9 * k];
    let (mut dl, mut dm, mut ds) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for level in 0..CODED_LEVELS {
        let y = pyramid.y(level + 1);
        let x = pyramid.x(level);
        let fwd = LevelForward::new(weights, level, y, x)?;
        let backprop = with_grad && scales[level] != 0.0;
        let mut d_raw: Vec<Vec<T>> = Position::ALL
            .iter()
            .map(|_| {
                if backprop {
                    vec![T::zero(); fwd.groups() * outputs]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let mut sum = 0.0;
        for i in 0..y.height() {
            for j in 0..y.width() {
                let g = i * y.width() + j;
                let base = group_base(y, i, j);
                for pos in Position::ALL {
                    let raw = &fwd.raw_outputs(pos)[g * outputs..(g + 1) * outputs];
                    activate(raw, base, k, &mut params);
                    let (dr, dc) = pos.offset();
                    for c in 0..3 {
                        let e = &params[c * 3 * k..(c + 1) * 3 * k];
                        let m = MixtureRef::new(&e[..k], &e[k..2 * k], &e[2 * k..]);
                        let actual = x.get(2 * i + dr, 2 * j + dc, c);
                        sum += m.nll_and_grad(actual, &mut dl, &mut dm, &mut ds);
                        if backprop {
                            let d = &mut d_raw[pos.index()][g * outputs + c * 3 * k..][..3 * k];
                            let r = &raw[c * 3 * k..(c + 1) * 3 * k];
                            let s = scales[level];
                            for t in 0..k {
                                d[t] = T::of(s * dl[t]);
                                d[k + t] = T::of(s * dm[t]);
                                d[2 * k + t] = if log_scale_active(r[2 * k + t].as_f64()) {
                                    T::of(s * ds[t])
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
        nll_sums[level] = sum;
        if backprop {
            fwd.backward(weights, [&d_raw[0], &d_raw[1], &d_raw[2]], &mut grads);
        }
    }
    Ok(ImageTerms { nll_sums, grads })
}

fn batch_terms<T: Real>(
    weights: &ModelWeights<T>,
    batch: &[Pyramid],
    level_weights: [f64; 3],
    with_grad: bool,
) -> Result<LossAndGrad<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut counts = [0usize; 3];
    for p in batch {
        for (l, n) in counts.iter_mut().enumerate() {
            *n += coded_samples(p, l);
        }
    }
    let scales: [f64; 3] = std::array::from_fn(|l| level_weights[l] / counts[l] as f64);
    let terms: Vec<Result<ImageTerms<T>>> = batch
        .par_iter()
        .map(|p| image_terms(weights, p, scales, with_grad))
        .collect();

    let mut sums = [0.0; 3];
    let mut grads = if with_grad {
        vec![T::zero(); weights.len()]
    } else {
        Vec::new()
    };
    // fixed reduction order: batch order, then parameter index
    for (i, t) in terms.into_iter().enumerate() {
        let t = t?;
        let loss_i: f64 = t.nll_sums.iter().sum();
        if !loss_i.is_finite() {
            return Err(Error::Numerical(format!("non-finite NLL for batch item {i}")));
        }
        for (s, v) in sums.iter_mut().zip(t.nll_sums) {
            *s += v;
        }
        for (g, v) in grads.iter_mut().zip(&t.grads) {
            *g += *v;
        }
    }
    let level_losses: [f64; 3] = std::array::from_fn(|l| sums[l] / counts[l] as f64);
    let loss = (0..3).map(|l| level_weights[l] * level_losses[l]).sum::<f64>();
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite loss or gradient".into()));
    }
    Ok(LossAndGrad {
        loss,
        level_losses,
        grads,
    })
}

/// `Σ_l level_weights[l] · mean NLL⁽ˡ⁾` over all coded pixel-channels of
/// the batch, with its gradient by backpropagation.
pub fn loss_and_grad<T: Real>(
    weights: &ModelWeights<T>,
    batch: &[Pyramid],
    level_weights: [f64; 3],
) -> Result<LossAndGrad<T>> {
    batch_terms(weights, batch, level_weights, true)
}

/// Loss only (no gradient buffers).
pub fn loss<T: Real>(weights: &ModelWeights<T>, batch: &[Pyramid], level_weights: [f64; 3]) -> Result<f64> {
    Ok(batch_terms(weights, batch, level_weights, false)?.loss)
}

/// Parameter-subset comparison between backprop and central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with a denominator floor so that components that are zero
/// in both computations do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Gradient components below this magnitude are compared in absolute terms;
/// their central differences are dominated by cancellation noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares the analytic gradient computed in `T` against central
/// differences of the loss evaluated in 64-bit, over `samples` randomly
/// chosen parameters.
pub fn grad_check<T: Real>(
    weights: &ModelWeights<T>,
    pyramid: &Pyramid,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheck> {
    let level_weights = [1.0; 3];
    let batch = std::slice::from_ref(pyramid);
    let analytic = loss_and_grad(weights, batch, level_weights)?.grads;
    let mut probe = weights.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, weights.len(), samples.min(weights.len())).into_vec();
    let mut worst: f64 = 0.0;
    for &idx in &picks {
        let original = probe.values()[idx];
        probe.values_mut()[idx] = original + epsilon;
        let plus = loss(&probe, batch, level_weights)?;
        probe.values_mut()[idx] = original - epsilon;
        let minus = loss(&probe, batch, level_weights)?;
        probe.values_mut()[idx] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[idx].as_f64(), numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: picks.len(),
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = f64::from(grads[i]);
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let update = cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
            params[i] = (f64::from(params[i]) - update) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub level_losses: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// One record per optimization step.
    pub records: Vec<LogRecord>,
    /// Mean NLL of the held-back center crops before training.
    pub initial_nll: f64,
    pub final_validation_nll: f64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// JSON lines: one record every `log_every` steps (and the last step),
    /// followed by a summary record.
    pub fn write_json_lines<W: Write>(&self, mut out: W, log_every: usize) -> Result<()> {
        let last = self.records.len().saturating_sub(1);
        let io = |e: std::io::Error| Error::invalid(format!("report write failed: {e}"));
        for (i, r) in self.records.iter().enumerate() {
            if i % log_every.max(1) == 0 || i == last {
                serde_json::to_writer(&mut out, r).map_err(|e| Error::invalid(e.to_string()))?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
        let summary = serde_json::json!({
            "summary": {
                "seed": self.seed,
                "steps": self.records.len(),
                "initial_nll": self.initial_nll,
                "final_validation_nll": self.final_validation_nll,
                "wall_time_secs": self.wall_time_secs,
            }
        });
        serde_json::to_writer(&mut out, &summary).map_err(|e| Error::invalid(e.to_string()))?;
        out.write_all(b"\n").map_err(io)
    }

    pub fn save_json_lines(&self, path: impl AsRef<Path>, log_every: usize) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_json_lines(&mut buf, log_every)?;
        buf.flush().map_err(|e| Error::io(path, e))
    }
}

const VALIDATION_CROPS: usize = 64;

fn center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    img.crop((img.height() - size) / 2, (img.width() - size) / 2, size, size)
}

/// Trains on a manifest of real images. Any synthetic entry is an error
/// raised before a single image is read.
pub fn train(corpus: &CorpusManifest, config: &TrainConfig) -> Result<(ModelWeights, TrainReport)> {
    if let Some(bad) = corpus.with_label(Label::Synthetic).next() {
        return Err(Error::invalid(format!(
            "training corpus must contain real images only; {} is labeled synthetic",
            bad.path.display()
        )));
    }
    config.validate()?;
    let images = corpus
        .entries
        .iter()
        .map(|e| load_image(&e.path))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = corpus.entries.iter().map(|e| e.path.display().to_string()).collect();
    train_images(&images, &names, config)
}

/// Trains on in-memory real images.
pub fn train_on_images(images: &[RgbImage], config: &TrainConfig) -> Result<(ModelWeights, TrainReport)> {
    let names: Vec<String> = (0..images.len()).map(|i| format!("image #{i}")).collect();
    train_images(images, &names, config)
}

fn train_images(images: &[RgbImage], names: &[String], config: &TrainConfig) -> Result<(ModelWeights, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let crop = config.crop_size;
    let usable: Vec<usize> = (0..images.len())
        .filter(|&i| images[i].width() >= crop && images[i].height() >= crop)
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid(format!("no training image is at least {crop}x{crop}")));
    }
    if usable.len() < images.len() {
        log::warn!(
            "{} image(s) smaller than the {crop}px crop are skipped",
            images.len() - usable.len()
        );
    }

    let mut weights = init_weights(config.net, config.seed)?;
    let validation: Vec<Pyramid> = usable
        .iter()
        .take(VALIDATION_CROPS)
        .map(|&i| build_pyramid(&center_crop(&images[i], crop)?))
        .collect::<Result<_>>()?;
    let initial_nll = loss(&weights, &validation, config.level_weights)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(weights.len());
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut picked = Vec::with_capacity(config.batch_size);
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let idx = usable[rng.random_range(0..usable.len())];
            let img = &images[idx];
            let row = rng.random_range(0..=img.height() - crop);
            let col = rng.random_range(0..=img.width() - crop);
            batch.push(build_pyramid(&img.crop(row, col, crop, crop)?)?);
            picked.push(idx);
        }
        let out = loss_and_grad(&weights, &batch, config.level_weights).map_err(|e| match e {
            Error::Numerical(msg) => {
                let involved: Vec<&str> = picked.iter().map(|&i| names[i].as_str()).collect();
                Error::Numerical(format!("step {step}: {msg} (batch images: {})", involved.join(", ")))
            }
            other => other,
        })?;
        adam.step(weights.values_mut(), &out.grads, config);
        records.push(LogRecord {
            step,
            loss: out.loss,
            level_losses: out.level_losses,
        });
        if step % config.log_every == 0 {
            log::info!("step {step}: loss {:.4} nats", out.loss);
        }
    }
    if !weights.is_finite() {
        return Err(Error::Numerical("training produced non-finite weights".into()));
    }
    let final_validation_nll = loss(&weights, &validation, config.level_weights)?;
    Ok((
        weights,
        TrainReport {
            seed: config.seed,
            records,
            initial_nll,
            final_validation_nll,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}
