use super::real::{gemm, Op};
use super::weights::{ConvSlot, HeadSlot};
use super::{ModelWeights, Position, Real, CODED_LEVELS, KERNEL};
use crate::corpus_io::RgbImage;
use crate::error::{Error, Result};
use crate::mixture::{MixtureRef, MAX_SCALE, MIN_SCALE};
use crate::pyramid::QuarterImage;

#[inline]
fn normalize_quarter<T: Real>(q: u16) -> T {
    T::of(f64::from(q)) / T::of(510.0) - T::one()
}

#[inline]
fn normalize_pixel<T: Real>(v: u8) -> T {
    T::of(f64::from(v)) / T::of(127.5) - T::one()
}

fn check_level<T: Real>(weights: &ModelWeights<T>, level: usize) -> Result<()> {
    if level >= CODED_LEVELS || weights.layout.levels.len() != CODED_LEVELS {
        return Err(Error::invalid(format!("level {level} is not a coded level (0..=2)")));
    }
    Ok(())
}

fn check_dims(y_lr: &QuarterImage, x_hr: &RgbImage) -> Result<()> {
    if x_hr.width() != 2 * y_lr.width() || x_hr.height() != 2 * y_lr.height() {
        return Err(Error::invalid(format!(
            "high-resolution image is {}x{}, context {}x{} requires {}x{}",
            x_hr.width(),
            x_hr.height(),
            y_lr.width(),
            y_lr.height(),
            2 * y_lr.width(),
            2 * y_lr.height()
        )));
    }
    Ok(())
}

/// Zero-padded 3x3 patches: `[rows·cols, 9·channels]`.
fn im2col<T: Real>(input: &[T], rows: usize, cols: usize, channels: usize, out: &mut Vec<T>) {
    let width = KERNEL * KERNEL * channels;
    out.clear();
    out.resize(rows * cols * width, T::zero());
    for i in 0..rows {
        for j in 0..cols {
            let dst = &mut out[(i * cols + j) * width..][..width];
            for ky in 0..KERNEL {
                let r = i as isize + ky as isize - 1;
                if r < 0 || r >= rows as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let c = j as isize + kx as isize - 1;
                    if c < 0 || c >= cols as isize {
                        continue;
                    }
                    let src = (r as usize * cols + c as usize) * channels;
                    let at = (ky * KERNEL + kx) * channels;
                    dst[at..at + channels].copy_from_slice(&input[src..src + channels]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols_buf: &[T], rows: usize, cols: usize, channels: usize, out: &mut [T]) {
    let width = KERNEL * KERNEL * channels;
    out.fill(T::zero());
    for i in 0..rows {
        for j in 0..cols {
            let src = &cols_buf[(i * cols + j) * width..][..width];
            for ky in 0..KERNEL {
                let r = i as isize + ky as isize - 1;
                if r < 0 || r >= rows as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let c = j as isize + kx as isize - 1;
                    if c < 0 || c >= cols as isize {
                        continue;
                    }
                    let dst = (r as usize * cols + c as usize) * channels;
                    let at = (ky * KERNEL + kx) * channels;
                    for ch in 0..channels {
                        out[dst + ch] += src[at + ch];
                    }
                }
            }
        }
    }
}

fn add_bias_relu<T: Real>(out: &mut [T], bias: &[T], relu: bool) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
            if relu && *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

fn column_sums<T: Real>(m: &[T], cols: usize, acc: &mut [T]) {
    for row in m.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

struct Trunk<T> {
    cols: Vec<Vec<T>>,
    acts: Vec<Vec<T>>,
}

fn trunk_forward<T: Real>(weights: &ModelWeights<T>, level: usize, y: &QuarterImage) -> Trunk<T> {
    let slots = &weights.layout.levels[level].trunk;
    let (rows, cols) = (y.height(), y.width());
    let positions = rows * cols;
    let values = weights.values();
    let mut input: Vec<T> = y.data().iter().map(|&q| normalize_quarter(q)).collect();
    let mut trunk = Trunk {
        cols: Vec::with_capacity(slots.len()),
        acts: Vec::with_capacity(slots.len()),
    };
    for ConvSlot {
        cin,
        cout,
        weight,
        bias,
    } in slots
    {
        let mut col = Vec::new();
        im2col(&input, rows, cols, *cin, &mut col);
        let mut out = vec![T::zero(); positions * cout];
        gemm(
            positions,
            KERNEL * KERNEL * cin,
            *cout,
            &col,
            Op::N,
            &values[weight.clone()],
            Op::N,
            &mut out,
            false,
        );
        add_bias_relu(&mut out, &values[bias.clone()], true);
        trunk.cols.push(col);
        input = out.clone();
        trunk.acts.push(out);
    }
    trunk
}

fn trunk_backward<T: Real>(
    weights: &ModelWeights<T>,
    level: usize,
    trunk: &Trunk<T>,
    rows: usize,
    cols: usize,
    mut d_out: Vec<T>,
    grads: &mut [T],
) {
    let slots = &weights.layout.levels[level].trunk;
    let positions = rows * cols;
    for (layer, slot) in slots.iter().enumerate().rev() {
        let act = &trunk.acts[layer];
        for (d, &a) in d_out.iter_mut().zip(act) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        let k = KERNEL * KERNEL * slot.cin;
        gemm(
            k,
            positions,
            slot.cout,
            &trunk.cols[layer],
            Op::T,
            &d_out,
            Op::N,
            &mut grads[slot.weight.clone()],
            true,
        );
        column_sums(&d_out, slot.cout, &mut grads[slot.bias.clone()]);
        if layer > 0 {
            let mut d_col = vec![T::zero(); positions * k];
            gemm(
                positions,
                slot.cout,
                k,
                &d_out,
                Op::N,
                &weights.values()[slot.weight.clone()],
                Op::T,
                &mut d_col,
                false,
            );
            let mut d_in = vec![T::zero(); positions * slot.cin];
            col2im(&d_col, rows, cols, slot.cin, &mut d_in);
            d_out = d_in;
        }
    }
}

struct Head<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    out: Vec<T>,
}

/// Known in-group pixels preceding `pos`, normalized: `[groups, 3·pos]`.
fn known_pixels<T: Real>(x_hr: &RgbImage, pos: Position) -> Vec<T> {
    let (rows, cols) = (x_hr.height() / 2, x_hr.width() / 2);
    let mut out = Vec::with_capacity(rows * cols * 3 * pos.index());
    for i in 0..rows {
        for j in 0..cols {
            for prev in &Position::ALL[..pos.index()] {
                let (dr, dc) = prev.offset();
                for c in 0..3 {
                    out.push(normalize_pixel(x_hr.get(2 * i + dr, 2 * j + dc, c)));
                }
            }
        }
    }
    out
}

fn head_forward<T: Real>(
    weights: &ModelWeights<T>,
    slot: &HeadSlot,
    features: &[T],
    channels: usize,
    known: &[T],
    groups: usize,
) -> Head<T> {
    let known_width = slot.inputs - channels;
    let mut input = Vec::with_capacity(groups * slot.inputs);
    for g in 0..groups {
        input.extend_from_slice(&features[g * channels..(g + 1) * channels]);
        input.extend_from_slice(&known[g * known_width..(g + 1) * known_width]);
    }
    let values = weights.values();
    let mut hidden = vec![T::zero(); groups * slot.hidden];
    gemm(
        groups,
        slot.inputs,
        slot.hidden,
        &input,
        Op::N,
        &values[slot.w1.clone()],
        Op::N,
        &mut hidden,
        false,
    );
    add_bias_relu(&mut hidden, &values[slot.b1.clone()], true);
    let mut out = vec![T::zero(); groups * slot.outputs];
    gemm(
        groups,
        slot.hidden,
        slot.outputs,
        &hidden,
        Op::N,
        &values[slot.w2.clone()],
        Op::N,
        &mut out,
        false,
    );
    add_bias_relu(&mut out, &values[slot.b2.clone()], false);
    Head { input, hidden, out }
}

#[allow(clippy::too_many_arguments)]
fn head_backward<T: Real>(
    weights: &ModelWeights<T>,
    slot: &HeadSlot,
    head: &Head<T>,
    d_out: &[T],
    groups: usize,
    channels: usize,
    grads: &mut [T],
    d_features: &mut [T],
) {
    let values = weights.values();
    gemm(
        slot.hidden,
        groups,
        slot.outputs,
        &head.hidden,
        Op::T,
        d_out,
        Op::N,
        &mut grads[slot.w2.clone()],
        true,
    );
    column_sums(d_out, slot.outputs, &mut grads[slot.b2.clone()]);
    let mut d_hidden = vec![T::zero(); groups * slot.hidden];
    gemm(
        groups,
        slot.outputs,
        slot.hidden,
        d_out,
        Op::N,
        &values[slot.w2.clone()],
        Op::T,
        &mut d_hidden,
        false,
    );
    for (d, &h) in d_hidden.iter_mut().zip(&head.hidden) {
        if h <= T::zero() {
            *d = T::zero();
        }
    }
    gemm(
        slot.inputs,
        groups,
        slot.hidden,
        &head.input,
        Op::T,
        &d_hidden,
        Op::N,
        &mut grads[slot.w1.clone()],
        true,
    );
    column_sums(&d_hidden, slot.hidden, &mut grads[slot.b1.clone()]);
    let mut d_input = vec![T::zero(); groups * slot.inputs];
    gemm(
        groups,
        slot.hidden,
        slot.inputs,
        &d_hidden,
        Op::N,
        &values[slot.w1.clone()],
        Op::T,
        &mut d_input,
        false,
    );
    for g in 0..groups {
        let src = &d_input[g * slot.inputs..g * slot.inputs + channels];
        for (d, &v) in d_features[g * channels..(g + 1) * channels].iter_mut().zip(src) {
            *d += v;
        }
    }
}

/// Trunk output for every group: `[rows·cols, trunk_channels]`.
pub fn trunk_features<T: Real>(weights: &ModelWeights<T>, level: usize, y_lr: &QuarterImage) -> Result<Vec<T>> {
    check_level(weights, level)?;
    let mut trunk = trunk_forward(weights, level, y_lr);
    Ok(trunk.acts.pop().expect("trunk depth ≥ 1"))
}

/// Evaluates one head for one group with plain loops in a fixed order.
///
/// The codec uses this on both sides so encoder and decoder see bit-identical
/// distributions regardless of how many groups are in flight.
pub fn head_row<T: Real>(
    weights: &ModelWeights<T>,
    level: usize,
    pos: Position,
    feature: &[T],
    known: &[u8],
) -> Vec<T> {
    let slot = &weights.layout.levels[level].heads[pos.index()];
    let values = weights.values();
    let input: Vec<T> = feature
        .iter()
        .copied()
        .chain(known.iter().map(|&v| normalize_pixel::<T>(v)))
        .collect();
    debug_assert_eq!(input.len(), slot.inputs);
    let (w1, b1) = (&values[slot.w1.clone()], &values[slot.b1.clone()]);
    let mut hidden = b1.to_vec();
    for (i, &x) in input.iter().enumerate() {
        let row = &w1[i * slot.hidden..(i + 1) * slot.hidden];
        for (h, &w) in hidden.iter_mut().zip(row) {
            *h += x * w;
        }
    }
    for h in &mut hidden {
        if *h < T::zero() {
            *h = T::zero();
        }
    }
    let (w2, b2) = (&values[slot.w2.clone()], &values[slot.b2.clone()]);
    let mut out = b2.to_vec();
    for (j, &h) in hidden.iter().enumerate() {
        let row = &w2[j * slot.outputs..(j + 1) * slot.outputs];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += h * w;
        }
    }
    out
}

/// Maps one coded pixel's raw head outputs to mixture parameters, laid out
/// per channel as `[logits; K] [means; K] [log_scales; K]`.
pub(crate) fn activate<T: Real>(raw: &[T], base: [f64; 3], k: usize, out: &mut [f64]) {
    let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
    for c in 0..3 {
        let src = &raw[c * 3 * k..(c + 1) * 3 * k];
        let dst = &mut out[c * 3 * k..(c + 1) * 3 * k];
        for j in 0..k {
            dst[j] = src[j].as_f64();
            dst[k + j] = base[c] + src[k + j].as_f64();
            dst[2 * k + j] = src[2 * k + j].as_f64().clamp(lo, hi);
        }
    }
}

/// True when a raw log-scale sits inside the clamp range (non-zero gradient).
#[inline]
pub(crate) fn log_scale_active(raw: f64) -> bool {
    raw > MIN_SCALE.ln() && raw < MAX_SCALE.ln()
}

#[inline]
pub(crate) fn group_base(y: &QuarterImage, i: usize, j: usize) -> [f64; 3] {
    [y.value(i, j, 0), y.value(i, j, 1), y.value(i, j, 2)]
}

/// Teacher-forced forward pass of one level, retaining what backpropagation
/// needs.
pub struct LevelForward<T: Real> {
    level: usize,
    rows: usize,
    cols: usize,
    trunk: Trunk<T>,
    heads: Vec<Head<T>>,
}

impl<T: Real> LevelForward<T> {
    pub fn new(weights: &ModelWeights<T>, level: usize, y_lr: &QuarterImage, x_hr: &RgbImage) -> Result<Self> {
        check_level(weights, level)?;
        check_dims(y_lr, x_hr)?;
        let trunk = trunk_forward(weights, level, y_lr);
        let features = trunk.acts.last().expect("trunk depth ≥ 1");
        let groups = y_lr.width() * y_lr.height();
        let channels = weights.config().trunk_channels;
        let heads = Position::ALL
            .iter()
            .map(|&pos| {
                let known = known_pixels(x_hr, pos);
                let slot = &weights.layout.levels[level].heads[pos.index()];
                head_forward(weights, slot, features, channels, &known, groups)
            })
            .collect();
        Ok(LevelForward {
            level,
            rows: y_lr.height(),
            cols: y_lr.width(),
            trunk,
            heads,
        })
    }

    pub fn groups(&self) -> usize {
        self.rows * self.cols
    }

    /// Raw head outputs for `pos`: `[groups, 9K]`.
    pub fn raw_outputs(&self, pos: Position) -> &[T] {
        &self.heads[pos.index()].out
    }

    /// Accumulates parameter gradients given `d_raw[pos] = ∂loss/∂raw outputs`.
    pub fn backward(&self, weights: &ModelWeights<T>, d_raw: [&[T]; 3], grads: &mut [T]) {
        let channels = weights.config().trunk_channels;
        let groups = self.groups();
        let mut d_features = vec![T::zero(); groups * channels];
        for pos in Position::ALL {
            let slot = &weights.layout.levels[self.level].heads[pos.index()];
            head_backward(
                weights,
                slot,
                &self.heads[pos.index()],
                d_raw[pos.index()],
                groups,
                channels,
                grads,
                &mut d_features,
            );
        }
        trunk_backward(
            weights,
            self.level,
            &self.trunk,
            self.rows,
            self.cols,
            d_features,
            grads,
        );
    }
}

/// Predicted mixtures for the three coded pixels of every group of a level.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionMap {
    level: usize,
    rows: usize,
    cols: usize,
    mixtures: usize,
    params: Vec<f64>,
}

impl DistributionMap {
    pub fn level(&self) -> usize {
        self.level
    }

    /// Group grid size `(rows, cols)`, equal to the context image size.
    pub fn group_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn mixtures(&self) -> usize {
        self.mixtures
    }

    /// Number of coded pixel-channels covered (3 of every 4 pixels).
    pub fn coded_samples(&self) -> usize {
        self.rows * self.cols * 9
    }

    fn entry(&self, group: usize, pos: Position, channel: usize) -> &[f64] {
        let k = self.mixtures;
        let start = ((group * 3 + pos.index()) * 3 + channel) * 3 * k;
        &self.params[start..start + 3 * k]
    }

    pub fn get(&self, row: usize, col: usize, pos: Position, channel: usize) -> MixtureRef<'_> {
        self.get_group(row * self.cols + col, pos, channel)
    }

    /// Same as [`Self::get`] with a raster group index.
    pub fn get_group(&self, group: usize, pos: Position, channel: usize) -> MixtureRef<'_> {
        let k = self.mixtures;
        let e = self.entry(group, pos, channel);
        MixtureRef::new(&e[..k], &e[k..2 * k], &e[2 * k..])
    }
}

/// Teacher-forced conditional distributions of level `level`: context
/// `y_lr = y⁽ˡ⁺¹⁾`, known in-group pixels taken from `x_hr = x⁽ˡ⁾`.
pub fn analyze_level<T: Real>(
    weights: &ModelWeights<T>,
    level: usize,
    y_lr: &QuarterImage,
    x_hr: &RgbImage,
) -> Result<DistributionMap> {
    let fwd = LevelForward::new(weights, level, y_lr, x_hr)?;
    let k = weights.config().mixtures;
    let outputs = weights.config().head_outputs();
    let (rows, cols) = (y_lr.height(), y_lr.width());
    let mut params = vec![0.0; rows * cols * 3 * 3 * 3 * k];
    for i in 0..rows {
        for j in 0..cols {
            let g = i * cols + j;
            let base = group_base(y_lr, i, j);
            for pos in Position::ALL {
                let raw = &fwd.raw_outputs(pos)[g * outputs..(g + 1) * outputs];
                let start = (g * 3 + pos.index()) * 9 * k;
                activate(raw, base, k, &mut params[start..start + 9 * k]);
            }
        }
    }
    Ok(DistributionMap {
        level,
        rows,
        cols,
        mixtures: k,
        params,
    })
}
