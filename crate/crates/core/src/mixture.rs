//! Discretized logistic mixtures over the 256 pixel values.
//!
//! Each component is a logistic density integrated over unit bins centred on
//! the integers, with the tails below 0 and above 255 absorbed into the two
//! edge bins, so the 256 bin probabilities sum to one exactly (up to rounding).

use rand::Rng;

/// Largest supported component count; lets hot paths use stack buffers.
pub const MAX_COMPONENTS: usize = 32;
pub const NUM_SYMBOLS: usize = 256;
/// Scale range enforced when activating raw network outputs.
pub const MIN_SCALE: f64 = 0.05;
pub const MAX_SCALE: f64 = 64.0;
/// Probability floor applied inside [`MixtureRef::log_pmf`] only.
pub const PROB_FLOOR: f64 = 1e-12;

// Beyond this |z| the logistic is 0 or 1 to double precision (σ(-40) ≈ 4e-18).
const SATURATION: f64 = 40.0;

/// Returns `(σ(z), σ(-z))` from a single exponential.
#[inline]
fn sigmoid_pair(z: f64) -> (f64, f64) {
    if z > SATURATION {
        (1.0, 0.0)
    } else if z < -SATURATION {
        (0.0, 1.0)
    } else {
        let t = (-z.abs()).exp();
        let big = 1.0 / (1.0 + t);
        let small = t * big;
        if z >= 0.0 {
            (big, small)
        } else {
            (small, big)
        }
    }
}

/// Owned mixture parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticMixtureParams {
    pub weight_logits: Vec<f64>,
    /// Component locations in pixel units.
    pub means: Vec<f64>,
    /// Natural log of the component scales.
    pub log_scales: Vec<f64>,
}

impl LogisticMixtureParams {
    pub fn new(weight_logits: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>) -> Self {
        assert!(
            !weight_logits.is_empty()
                && weight_logits.len() <= MAX_COMPONENTS
                && weight_logits.len() == means.len()
                && means.len() == log_scales.len(),
            "mixture needs 1..={MAX_COMPONENTS} components with matching parameter lengths"
        );
        LogisticMixtureParams {
            weight_logits,
            means,
            log_scales,
        }
    }

    /// Single logistic with location `mean` and scale `scale`.
    pub fn single(mean: f64, scale: f64) -> Self {
        Self::new(vec![0.0], vec![mean], vec![scale.ln()])
    }

    pub fn components(&self) -> usize {
        self.weight_logits.len()
    }

    pub fn view(&self) -> MixtureRef<'_> {
        MixtureRef {
            weight_logits: &self.weight_logits,
            means: &self.means,
            log_scales: &self.log_scales,
        }
    }

    pub fn pmf(&self, k: u8) -> f64 {
        self.view().pmf(k)
    }

    pub fn log_pmf(&self, k: u8) -> f64 {
        self.view().log_pmf(k)
    }

    pub fn entropy_nats(&self) -> f64 {
        self.view().entropy_nats()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        self.view().sample(rng)
    }

    pub fn nll_grad(&self, k: u8) -> MixtureGrad {
        let n = self.components();
        let mut grad = MixtureGrad {
            nll: 0.0,
            weight_logits: vec![0.0; n],
            means: vec![0.0; n],
            log_scales: vec![0.0; n],
        };
        grad.nll = self
            .view()
            .nll_and_grad(k, &mut grad.weight_logits, &mut grad.means, &mut grad.log_scales);
        grad
    }
}

/// Gradient of `-log_pmf(k)` with respect to each parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureGrad {
    pub nll: f64,
    pub weight_logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

/// Borrowed view over mixture parameters, used on hot paths.
#[derive(Clone, Copy, Debug)]
pub struct MixtureRef<'a> {
    weight_logits: &'a [f64],
    means: &'a [f64],
    log_scales: &'a [f64],
}

/// Softmax weights and inverse scales, computed once per evaluation.
struct Prepared {
    n: usize,
    weights: [f64; MAX_COMPONENTS],
    inv_scales: [f64; MAX_COMPONENTS],
}

impl<'a> MixtureRef<'a> {
    pub fn new(weight_logits: &'a [f64], means: &'a [f64], log_scales: &'a [f64]) -> Self {
        debug_assert!(!weight_logits.is_empty() && weight_logits.len() <= MAX_COMPONENTS);
        debug_assert!(weight_logits.len() == means.len() && means.len() == log_scales.len());
        MixtureRef {
            weight_logits,
            means,
            log_scales,
        }
    }

    pub fn to_owned(&self) -> LogisticMixtureParams {
        LogisticMixtureParams::new(
            self.weight_logits.to_vec(),
            self.means.to_vec(),
            self.log_scales.to_vec(),
        )
    }

    fn prepare(&self) -> Prepared {
        let n = self.weight_logits.len();
        let mut weights = [0.0; MAX_COMPONENTS];
        let mut inv_scales = [0.0; MAX_COMPONENTS];
        let max = self.weight_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..n {
            weights[k] = (self.weight_logits[k] - max).exp();
            total += weights[k];
            inv_scales[k] = (-self.log_scales[k]).exp();
        }
        for w in &mut weights[..n] {
            *w /= total;
        }
        Prepared { n, weights, inv_scales }
    }

    /// Probability of bin `k` under one component, computed without
    /// cancellation in either tail.
    #[inline]
    fn component_bin(k: u8, mean: f64, inv_scale: f64) -> f64 {
        let x = f64::from(k);
        let hi = (x + 0.5 - mean) * inv_scale;
        let lo = (x - 0.5 - mean) * inv_scale;
        match k {
            0 => sigmoid_pair(hi).0,
            255 => sigmoid_pair(lo).1,
            _ if lo >= 0.0 => sigmoid_pair(lo).1 - sigmoid_pair(hi).1,
            _ => sigmoid_pair(hi).0 - sigmoid_pair(lo).0,
        }
    }

    pub fn pmf(&self, k: u8) -> f64 {
        let p = self.prepare();
        (0..p.n)
            .map(|j| p.weights[j] * Self::component_bin(k, self.means[j], p.inv_scales[j]))
            .sum()
    }

    /// Natural-log probability with the [`PROB_FLOOR`] applied.
    pub fn log_pmf(&self, k: u8) -> f64 {
        self.pmf(k).max(PROB_FLOOR).ln()
    }

    /// All 256 bin probabilities. Bin values are bit-identical to [`Self::pmf`].
    pub fn pmf_table(&self, table: &mut [f64; NUM_SYMBOLS]) {
        let p = self.prepare();
        table.fill(0.0);
        // (σ(z_m), σ(-z_m)) at the bin edges m - 0.5, m = 1..=255
        let mut edges = [(0.0f64, 0.0f64); NUM_SYMBOLS];
        for j in 0..p.n {
            let (w, mean, inv_s) = (p.weights[j], self.means[j], p.inv_scales[j]);
            for (m, edge) in edges.iter_mut().enumerate().skip(1) {
                *edge = sigmoid_pair((m as f64 - 0.5 - mean) * inv_s);
            }
            table[0] += w * edges[1].0;
            for k in 1..255 {
                let (lo, hi) = (edges[k], edges[k + 1]);
                let bin = if (k as f64 - 0.5 - mean) * inv_s >= 0.0 {
                    lo.1 - hi.1
                } else {
                    hi.0 - lo.0
                };
                table[k] += w * bin;
            }
            table[255] += w * edges[255].1;
        }
    }

    /// Entropy in nats by direct summation over the 256 bins (no flooring).
    pub fn entropy_nats(&self) -> f64 {
        let mut table = [0.0; NUM_SYMBOLS];
        self.pmf_table(&mut table);
        entropy_of_table(&table)
    }

    /// Inverse-CDF draw from the bin probabilities.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        let mut table = [0.0; NUM_SYMBOLS];
        self.pmf_table(&mut table);
        sample_from_table(&table, rng)
    }

    /// Returns `-log_pmf(k)` and writes its gradient with respect to the
    /// logits, means and log-scales into the output slices.
    pub fn nll_and_grad(&self, k: u8, d_logits: &mut [f64], d_means: &mut [f64], d_log_scales: &mut [f64]) -> f64 {
        let p = self.prepare();
        let x = f64::from(k);
        let mut bins = [0.0; MAX_COMPONENTS];
        let mut d_bin_mean = [0.0; MAX_COMPONENTS];
        let mut d_bin_log_scale = [0.0; MAX_COMPONENTS];
        let mut total = 0.0;
        for j in 0..p.n {
            let inv_s = p.inv_scales[j];
            let hi = (x + 0.5 - self.means[j]) * inv_s;
            let lo = (x - 0.5 - self.means[j]) * inv_s;
            // Contribution of each edge: σ'(z) and z·σ'(z); open edges contribute 0.
            let (s_hi, c_hi) = sigmoid_pair(hi);
            let (s_lo, c_lo) = sigmoid_pair(lo);
            let (dh, dl) = (s_hi * c_hi, s_lo * c_lo);
            let (bin, g_hi, g_lo) = match k {
                0 => (s_hi, dh, 0.0),
                255 => (c_lo, 0.0, dl),
                _ if lo >= 0.0 => (c_lo - c_hi, dh, dl),
                _ => (s_hi - s_lo, dh, dl),
            };
            let (zh, zl) = (if k == 255 { 0.0 } else { hi }, if k == 0 { 0.0 } else { lo });
            bins[j] = bin;
            d_bin_mean[j] = -inv_s * (g_hi - g_lo);
            d_bin_log_scale[j] = -(zh * g_hi - zl * g_lo);
            total += p.weights[j] * bin;
        }
        if total < PROB_FLOOR {
            d_logits[..p.n].fill(0.0);
            d_means[..p.n].fill(0.0);
            d_log_scales[..p.n].fill(0.0);
            return -PROB_FLOOR.ln();
        }
        let inv_total = 1.0 / total;
        for j in 0..p.n {
            let w = p.weights[j];
            d_logits[j] = -w * (bins[j] - total) * inv_total;
            d_means[j] = -w * d_bin_mean[j] * inv_total;
            d_log_scales[j] = -w * d_bin_log_scale[j] * inv_total;
        }
        -total.ln()
    }
}

/// `-Σ p ln p` over a probability table, skipping empty bins.
pub fn entropy_of_table(table: &[f64; NUM_SYMBOLS]) -> f64 {
    let mut h = 0.0;
    for &p in table {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

pub fn sample_from_table<R: Rng + ?Sized>(table: &[f64; NUM_SYMBOLS], rng: &mut R) -> u8 {
    let total: f64 = table.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (k, &p) in table.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = k;
        }
        acc += p;
        if u < acc {
            return k as u8;
        }
    }
    last_nonzero as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut impl Rng, k: usize) -> LogisticMixtureParams {
        LogisticMixtureParams::new(
            (0..k).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..k).map(|_| rng.random_range(-20.0..275.0)).collect(),
            (0..k).map(|_| rng.random_range(0.1f64.ln()..30f64.ln())).collect(),
        )
    }

    fn naive_entropy(m: &LogisticMixtureParams) -> f64 {
        let mut h = 0.0;
        for k in 0..=255u8 {
            let p = m.pmf(k);
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }

    #[test]
    fn point_mass_limit() {
        let m = LogisticMixtureParams::single(10.0, 0.01);
        assert!((m.pmf(10) - 1.0).abs() < 1e-12);
        assert!(m.log_pmf(10).abs() < 1e-9);
        assert!(m.entropy_nats() < 1e-8);
    }

    #[test]
    fn edge_bin_absorbs_lower_tail() {
        let m = LogisticMixtureParams::single(0.0, 1.0);
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((m.pmf(0) - expected).abs() < 1e-15);
        assert!((m.pmf(0) - 0.622_459_3).abs() < 1e-7);
    }

    #[test]
    fn far_tail_hits_floor() {
        let m = LogisticMixtureParams::single(0.0, 0.1);
        assert_eq!(m.log_pmf(255), PROB_FLOOR.ln());
    }

    #[test]
    fn normalization_and_entropy_agree_with_naive_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..300 {
            let m = random_params(&mut rng, 1 + i % 10);
            let total: f64 = (0..=255u8).map(|k| m.pmf(k)).sum();
            assert!((total - 1.0).abs() < 1e-9, "sum {total}");
            let mut table = [0.0; NUM_SYMBOLS];
            m.view().pmf_table(&mut table);
            for k in 0..=255u8 {
                assert_eq!(table[k as usize], m.pmf(k));
            }
            assert!((m.entropy_nats() - naive_entropy(&m)).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_pmf_matches_log_of_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let m = random_params(&mut rng, 4);
            for k in (0..=255u8).step_by(7) {
                let p = m.pmf(k);
                if p > 1e-6 {
                    assert!((m.log_pmf(k) - p.ln()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn huge_scale_splits_mass_between_edges() {
        let m = LogisticMixtureParams::single(128.0, 1e6);
        assert!((m.entropy_nats() - 2f64.ln()).abs() < 1e-3, "{}", m.entropy_nats());
    }

    #[test]
    fn entropy_is_bounded_by_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bound = (NUM_SYMBOLS as f64).ln();
        for _ in 0..1000 {
            let k = rng.random_range(1..=10);
            let h = random_params(&mut rng, k).entropy_nats();
            assert!((0.0..=bound + 1e-12).contains(&h));
        }
    }

    #[test]
    fn sampling_point_mass_and_determinism() {
        let m = LogisticMixtureParams::single(100.0, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| m.sample(&mut rng) == 100));

        let m = LogisticMixtureParams::single(60.0, 9.0);
        let a = m.sample(&mut ChaCha8Rng::seed_from_u64(99));
        let b = m.sample(&mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_frequencies_match_pmf() {
        let m = LogisticMixtureParams::new(vec![0.3, -0.2, 0.0], vec![40.0, 90.0, 250.0], vec![1.5, 0.7, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut counts = [0u32; 256];
        for _ in 0..n {
            counts[m.sample(&mut rng) as usize] += 1;
        }
        for k in 0..=255u8 {
            let p = m.pmf(k);
            let expected = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let diff = (f64::from(counts[k as usize]) - expected).abs();
            assert!(
                diff <= 4.0 * sigma + 1.0,
                "bin {k}: {} vs {expected}",
                counts[k as usize]
            );
        }
    }

    #[test]
    fn monte_carlo_nll_matches_entropy() {
        let m = LogisticMixtureParams::new(vec![0.0, 1.0], vec![100.0, 120.0], vec![2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| -m.log_pmf(m.sample(&mut rng))).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - m.entropy_nats()).abs() < 5.0 * se);
    }

    #[test]
    fn symmetric_means_have_opposite_gradients() {
        let s = 12f64.ln();
        let m = LogisticMixtureParams::new(vec![0.0, 0.0], vec![100.0, 156.0], vec![s, s]);
        let g = m.nll_grad(128);
        assert!((g.means[0] + g.means[1]).abs() < 1e-12);
        assert!(g.means[0] != 0.0);
    }

    #[test]
    fn stationary_at_bin_center() {
        let m = LogisticMixtureParams::single(77.0, 3.0);
        assert!(m.nll_grad(77).means[0].abs() < 1e-8);
    }

    #[test]
    fn floored_probability_has_zero_gradient() {
        let g = LogisticMixtureParams::single(0.0, 0.1).nll_grad(255);
        assert_eq!(g.nll, -PROB_FLOOR.ln());
        assert!(g.means.iter().chain(&g.log_scales).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.random_range(1..=5);
            let m = random_params(&mut rng, n);
            // keep the true pixel within reach of the mixture so the floor is inactive
            let k = m.sample(&mut rng);
            let g = m.nll_grad(k);
            let nll = |p: &LogisticMixtureParams| -p.log_pmf(k);
            for group in 0..3 {
                for j in 0..n {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    let (gp, gm, analytic) = match group {
                        0 => (&mut plus.weight_logits, &mut minus.weight_logits, g.weight_logits[j]),
                        1 => (&mut plus.means, &mut minus.means, g.means[j]),
                        _ => (&mut plus.log_scales, &mut minus.log_scales, g.log_scales[j]),
                    };
                    gp[j] += eps;
                    gm[j] -= eps;
                    let numeric = (nll(&plus) - nll(&minus)) / (2.0 * eps);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
