//! Scoring, threshold calibration and detection metrics.
//!
//! Convention: a larger score means "more likely synthetic", and an image is
//! classified synthetic when its score is strictly greater than the
//! threshold. Signs are never flipped automatically; the absolute-value
//! statistics cover generators whose gap is negative.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{load_image, CorpusManifest, FeatureRow, Label, RgbImage};
use crate::error::{Error, Result};
use crate::features::{aggregate, nll_entropy_maps, DecisionStats, FeatureVector};
use crate::net::{ModelWeights, Real};
use crate::pyramid::{build_pyramid, crop_to_multiple_of_8};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticChoice {
    D0,
    AbsD0,
    Delta01,
    AbsDelta01,
}

impl StatisticChoice {
    pub const ALL: [StatisticChoice; 4] = [
        StatisticChoice::D0,
        StatisticChoice::AbsD0,
        StatisticChoice::Delta01,
        StatisticChoice::AbsDelta01,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StatisticChoice::D0 => "d0",
            StatisticChoice::AbsD0 => "abs_d0",
            StatisticChoice::Delta01 => "delta01",
            StatisticChoice::AbsDelta01 => "abs_delta01",
        }
    }

    pub fn pick(self, stats: &DecisionStats) -> f64 {
        match self {
            StatisticChoice::D0 => stats.d[0],
            StatisticChoice::AbsD0 => stats.abs_d0,
            StatisticChoice::Delta01 => stats.delta01,
            StatisticChoice::AbsDelta01 => stats.abs_delta01,
        }
    }
}

impl fmt::Display for StatisticChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatisticChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StatisticChoice::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown statistic {s:?} (expected d0, abs_d0, delta01 or abs_delta01)"
            ))
        })
    }
}

/// Center-crops to a multiple of 8 and returns the level-wise averages.
pub fn image_features<T: Real>(image: &RgbImage, weights: &ModelWeights<T>) -> Result<FeatureVector> {
    let pyramid = build_pyramid(&crop_to_multiple_of_8(image)?)?;
    aggregate(&nll_entropy_maps(weights, &pyramid)?)
}

pub fn score<T: Real>(image: &RgbImage, weights: &ModelWeights<T>, choice: StatisticChoice) -> Result<f64> {
    Ok(choice.pick(&image_features(image, weights)?.statistics()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAuc {
    pub name: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub n_real: usize,
    pub n_fake: usize,
    pub groups: Vec<GroupAuc>,
}

impl RocReport {
    /// Trapezoidal area under the stored points.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

fn check_scores(real: &[f64], fake: &[f64]) -> Result<()> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid(format!(
            "need scores for both classes (got {} real, {} synthetic)",
            real.len(),
            fake.len()
        )));
    }
    if real.iter().chain(fake).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// AUC as the Mann–Whitney statistic `P(fake > real) + ½ P(tie)`, from
/// midranks of the pooled sorted scores.
pub fn roc_auc(real: &[f64], fake: &[f64]) -> Result<RocReport> {
    check_scores(real, fake)?;
    let mut pooled: Vec<(f64, bool)> = real
        .iter()
        .map(|&s| (s, false))
        .chain(fake.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the rank sum of the fakes, kept integral
    let mut fake_rank2: u64 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i + 1 + j) / 2
        let fakes = pooled[i..j].iter().filter(|p| p.1).count() as u64;
        fake_rank2 += fakes * (i as u64 + 1 + j as u64);
        i = j;
    }
    let (nr, nf) = (real.len() as u64, fake.len() as u64);
    let u2 = fake_rank2 - nf * (nf + 1);
    let auc = u2 as f64 / (2 * nr * nf) as f64;

    // sweep thresholds from the top: everything ≥ s is called synthetic
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = pooled.len();
    while k > 0 {
        let s = pooled[k - 1].0;
        while k > 0 && pooled[k - 1].0 == s {
            if pooled[k - 1].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        points.push((fp as f64 / nr as f64, tp as f64 / nf as f64));
    }
    Ok(RocReport {
        auc,
        points,
        n_real: real.len(),
        n_fake: fake.len(),
        groups: Vec::new(),
    })
}

fn count_le(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&s| s <= t)
}

fn balanced_accuracy_sorted(real: &[f64], fake: &[f64], t: f64) -> f64 {
    let tnr = count_le(real, t) as f64 / real.len() as f64;
    let tpr = (fake.len() - count_le(fake, t)) as f64 / fake.len() as f64;
    0.5 * (tnr + tpr)
}

/// `½·(fraction of real ≤ t) + ½·(fraction of fake > t)`.
pub fn balanced_accuracy(real: &[f64], fake: &[f64], threshold: f64) -> Result<f64> {
    check_scores(real, fake)?;
    Ok(balanced_accuracy_sorted(&sorted(real), &sorted(fake), threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    /// `(threshold, balanced accuracy)`, thresholds increasing.
    pub curve: Vec<(f64, f64)>,
    pub best_threshold: f64,
    pub best_accuracy: f64,
}

/// Balanced accuracy at every midpoint between consecutive distinct pooled
/// scores, plus one threshold below and one above all scores. The maximum is
/// taken over every candidate (ties go to the smallest threshold); the
/// returned curve is thinned to `n_points` evenly spaced candidates when
/// `n_points` is non-zero and smaller than the candidate count.
pub fn threshold_sweep(real: &[f64], fake: &[f64], n_points: usize) -> Result<ThresholdSweep> {
    check_scores(real, fake)?;
    let (sr, sf) = (sorted(real), sorted(fake));
    let mut distinct: Vec<f64> = sr.iter().chain(&sf).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(distinct[0] - 1.0);
    thresholds.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);

    let full: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (t, balanced_accuracy_sorted(&sr, &sf, t)))
        .collect();
    let (mut best_threshold, mut best_accuracy) = full[0];
    for &(t, ba) in &full[1..] {
        if ba > best_accuracy {
            best_threshold = t;
            best_accuracy = ba;
        }
    }
    let curve = if n_points == 0 || n_points >= full.len() {
        full
    } else if n_points == 1 {
        vec![(best_threshold, best_accuracy)]
    } else {
        (0..n_points)
            .map(|i| full[i * (full.len() - 1) / (n_points - 1)])
            .collect()
    };
    Ok(ThresholdSweep {
        curve,
        best_threshold,
        best_accuracy,
    })
}

pub const MIN_CALIBRATION_SCORES: usize = 20;

/// The `⌈(1 − target_fpr)·n⌉`-th smallest real score, so that at most a
/// `target_fpr` fraction of the calibration set lies strictly above it.
pub fn calibrate_threshold(real: &[f64], target_fpr: f64) -> Result<f64> {
    if real.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::invalid(format!(
            "calibration needs at least {MIN_CALIBRATION_SCORES} real scores, got {}",
            real.len()
        )));
    }
    if !(target_fpr > 0.0 && target_fpr <= 0.5) {
        return Err(Error::invalid(format!("target FPR {target_fpr} outside (0, 0.5]")));
    }
    if real.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite calibration score".into()));
    }
    let n = real.len();
    // the tolerance keeps exact products such as 0.95·100 from rounding up
    let k = (((1.0 - target_fpr) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted(real)[k - 1])
}

/// Scores every manifest entry (in parallel, results in manifest order).
pub fn feature_rows<T: Real>(corpus: &CorpusManifest, weights: &ModelWeights<T>) -> Result<Vec<FeatureRow>> {
    corpus
        .entries
        .par_iter()
        .map(|e| {
            let img = load_image(&e.path)?;
            let features = image_features(&img, weights).map_err(|err| match err {
                Error::InvalidInput(msg) => Error::format(&e.path, msg),
                Error::Numerical(msg) => Error::Numerical(format!("{}: {msg}", e.path.display())),
                other => other,
            })?;
            Ok(FeatureRow {
                path: e.path.display().to_string(),
                label: e.label,
                generator: e.generator.clone(),
                group: e.group.clone(),
                features,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub statistic: StatisticChoice,
    /// Fixed decision threshold; the pooled sweep optimum when absent.
    pub threshold: Option<f64>,
    /// Points kept in the reported sweep curve (0 keeps all).
    pub sweep_points: usize,
    /// Recorded in the report.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            statistic: StatisticChoice::AbsDelta01,
            threshold: None,
            sweep_points: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub auc: f64,
    pub ba_at_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub statistic: StatisticChoice,
    pub seed: u64,
    /// Mean of the per-group AUCs.
    pub global_auc: f64,
    /// AUC of all real against all synthetic scores.
    pub pooled_auc: f64,
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
    /// `"user"` or `"sweep"`.
    pub threshold_source: String,
    pub sweep_best_accuracy: f64,
    pub sweep: Vec<(f64, f64)>,
}

/// Mean and sample standard deviation of `D⁽ˡ⁾` for one group and label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapLevelRow {
    pub group: String,
    pub label: Label,
    pub level: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub roc: RocReport,
    pub gap_levels: Vec<GapLevelRow>,
}

/// Scores the manifest and evaluates the chosen statistic.
pub fn evaluate<T: Real>(
    corpus: &CorpusManifest,
    weights: &ModelWeights<T>,
    options: &EvalOptions,
) -> Result<(Evaluation, Vec<FeatureRow>)> {
    let rows = feature_rows(corpus, weights)?;
    Ok((evaluate_rows(&rows, options)?, rows))
}

type Split = (Vec<f64>, Vec<f64>);

fn split_by_label(rows: &[&FeatureRow], choice: StatisticChoice) -> Split {
    let mut out = (Vec::new(), Vec::new());
    for r in rows {
        let s = choice.pick(&r.features.statistics());
        match r.label {
            Label::Real => out.0.push(s),
            Label::Synthetic => out.1.push(s),
        }
    }
    out
}

/// Evaluation from already computed features (for example a loaded feature
/// table). Every group must contain both labels.
pub fn evaluate_rows(rows: &[FeatureRow], options: &EvalOptions) -> Result<Evaluation> {
    let choice = options.statistic;
    let mut by_group: BTreeMap<&str, Vec<&FeatureRow>> = BTreeMap::new();
    for r in rows {
        by_group.entry(r.group.as_str()).or_default().push(r);
    }
    let all: Vec<&FeatureRow> = rows.iter().collect();
    let (real, fake) = split_by_label(&all, choice);
    let mut roc = roc_auc(&real, &fake)?;
    let sweep = threshold_sweep(&real, &fake, options.sweep_points)?;
    let (threshold, source) = match options.threshold {
        Some(t) if t.is_finite() => (t, "user"),
        Some(t) => return Err(Error::invalid(format!("threshold {t} is not finite"))),
        None => (sweep.best_threshold, "sweep"),
    };

    let mut groups = Vec::new();
    for (name, members) in &by_group {
        let (gr, gf) = split_by_label(members, choice);
        if gr.is_empty() || gf.is_empty() {
            return Err(Error::invalid(format!(
                "group {name:?} has {} real and {} synthetic images; both labels are required",
                gr.len(),
                gf.len()
            )));
        }
        let auc = roc_auc(&gr, &gf)?.auc;
        groups.push(GroupReport {
            name: name.to_string(),
            n_real: gr.len(),
            n_fake: gf.len(),
            auc,
            ba_at_threshold: balanced_accuracy(&gr, &gf, threshold)?,
        });
    }
    roc.groups = groups
        .iter()
        .map(|g| GroupAuc {
            name: g.name.clone(),
            n_real: g.n_real,
            n_fake: g.n_fake,
            auc: g.auc,
        })
        .collect();
    let global_auc = groups.iter().map(|g| g.auc).sum::<f64>() / groups.len() as f64;

    Ok(Evaluation {
        report: EvalReport {
            statistic: choice,
            seed: options.seed,
            global_auc,
            pooled_auc: roc.auc,
            groups,
            threshold,
            threshold_source: source.into(),
            sweep_best_accuracy: sweep.best_accuracy,
            sweep: sweep.curve,
        },
        roc,
        gap_levels: gap_levels(rows),
    })
}

/// Per (group, label, level) mean and standard deviation of the gap.
pub fn gap_levels(rows: &[FeatureRow]) -> Vec<GapLevelRow> {
    type Cell = (Label, Vec<[f64; 3]>);
    let mut cells: BTreeMap<(&str, &str), Cell> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.group.as_str(), r.label.as_str()))
            .or_insert_with(|| (r.label, Vec::new()))
            .1
            .push(r.features.statistics().d);
    }
    let mut out = Vec::new();
    for ((group, _), (label, ds)) in cells {
        for level in 0..3 {
            let n = ds.len();
            let mean = ds.iter().map(|d| d[level]).sum::<f64>() / n as f64;
            let std = if n > 1 {
                (ds.iter().map(|d| (d[level] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            out.push(GapLevelRow {
                group: group.to_string(),
                label,
                level,
                n,
                mean,
                std,
            });
        }
    }
    out
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(write_err(path))
    }
}

/// `threshold,balanced_accuracy` rows.
pub fn save_sweep_csv(curve: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("threshold,balanced_accuracy\n");
    for (t, ba) in curve {
        out.push_str(&format!("{t:.16e},{ba:.16e}\n"));
    }
    std::fs::write(path, out).map_err(write_err(path))
}

/// `group,label,level,n,mean_d,std_d` rows.
pub fn save_gap_levels_csv(rows: &[GapLevelRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("group,label,level,n,mean_d,std_d\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.16e},{:.16e}\n",
            csv_field(&r.group),
            r.label,
            r.level,
            r.n,
            r.mean,
            r.std
        ));
    }
    std::fs::write(path, out).map_err(write_err(path))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Histogram counts per statistic and label over `bins` equal-width bins
/// spanning the pooled range of that statistic.
pub fn save_histograms_csv(rows: &[FeatureRow], bins: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bins = bins.max(1);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(write_err(path))?);
    writeln!(file, "statistic,label,bin_lo,bin_hi,count").map_err(write_err(path))?;
    for choice in StatisticChoice::ALL {
        let scores: Vec<(Label, f64)> = rows
            .iter()
            .map(|r| (r.label, choice.pick(&r.features.statistics())))
            .collect();
        if scores.is_empty() {
            continue;
        }
        let lo = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        let hi = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        for label in [Label::Real, Label::Synthetic] {
            let mut counts = vec![0usize; bins];
            for &(l, s) in &scores {
                if l == label {
                    counts[(((s - lo) / width) as usize).min(bins - 1)] += 1;
                }
            }
            for (b, c) in counts.iter().enumerate() {
                let a = lo + b as f64 * width;
                writeln!(file, "{choice},{label},{a:.16e},{:.16e},{c}", a + width).map_err(write_err(path))?;
            }
        }
    }
    file.flush().map_err(write_err(path))
}
