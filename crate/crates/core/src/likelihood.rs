//! Discretized logistic mixture models over finite symbol grids.
//!
//! Latent channels are modelled independently; RGB uses a channel
//! autoregressive mixture where the green mean shifts linearly with the
//! decoded red value and the blue mean with red and green.
//!
//! Parameter layouts (per point, `K` mixture components):
//!
//! * latent, per channel `c`: `[logits(K) | means(K) | log_scales(K)]` at
//!   column offset `3·K·c`;
//! * RGB: `[logits R,G,B | means R,G,B | log_scales R,G,B | c_GR | c_BR | c_BG]`,
//!   each block `K` wide. Coefficients pass through `tanh`.

use std::sync::Arc;

use crate::autodiff::{sigmoid, softplus, Graph, NodeId, RowLocalGrad};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quantizer::QuantizerConfig;

/// Lower clamp on log-scales, applied identically in training and coding.
pub const MIN_LOG_SCALE: f64 = -7.0;
/// Smallest admissible scale for directly supplied mixtures.
pub const MIN_SCALE: f64 = 1e-6;
/// Fixed-point precision of the coder's CDF tables.
pub const CDF_PRECISION_BITS: u32 = 16;

const LN_2: f64 = std::f64::consts::LN_2;

/// Bin centers and half-width of a discrete alphabet on the value axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    centers: Vec<f64>,
    half_width: f64,
}

impl SymbolGrid {
    /// 8-bit colors normalized as `m / 127.5 - 1`.
    pub fn rgb() -> Self {
        Self::uniform_on_unit(256)
    }

    /// `m` evenly spaced centers on [-1, 1] with bins that tile the axis.
    pub fn uniform_on_unit(m: usize) -> Self {
        assert!(m >= 2);
        let step = 2.0 / (m - 1) as f64;
        SymbolGrid {
            centers: (0..m).map(|i| i as f64 * step - 1.0).collect(),
            half_width: step / 2.0,
        }
    }

    pub fn latent(q: &QuantizerConfig) -> Self {
        SymbolGrid {
            centers: q.centers.clone(),
            half_width: q.half_width(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, m: usize) -> f64 {
        self.centers[m]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}

/// Normalized RGB value of an 8-bit symbol.
#[inline]
pub fn rgb_value(symbol: u8) -> f64 {
    symbol as f64 / 127.5 - 1.0
}

fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Probability of every symbol under a mixture with normalized `weights`
/// and explicit `scales`. Bin mass is the difference of the mixture CDF at
/// adjacent bin edges; the outermost bins absorb the tails.
pub fn dlm_pmf(
    weights: &[f64],
    means: &[f64],
    scales: &[f64],
    grid: &SymbolGrid,
) -> Result<Vec<f64>> {
    if weights.len() != means.len() || weights.len() != scales.len() || weights.is_empty() {
        return Err(Error::ShapeMismatch(
            "mixture parameter lengths differ".into(),
        ));
    }
    if let Some(&s) = scales
        .iter()
        .find(|&&s| !(s >= MIN_SCALE) || !s.is_finite())
    {
        return Err(Error::InvalidScale(s));
    }
    let mut pmf = vec![0.0; grid.len()];
    for k in 0..weights.len() {
        accumulate_component(&mut pmf, weights[k], means[k], 1.0 / scales[k], grid);
    }
    Ok(pmf)
}

/// Mixture pmf from raw network outputs (logits, means, log-scales).
pub fn mixture_pmf_raw(
    logits: &[f64],
    means: &[f64],
    log_scales: &[f64],
    grid: &SymbolGrid,
    pmf: &mut Vec<f64>,
) {
    let k = logits.len();
    let mut logw = vec![0.0; k];
    log_softmax(logits, &mut logw);
    pmf.clear();
    pmf.resize(grid.len(), 0.0);
    for i in 0..k {
        let inv = (-log_scales[i].max(MIN_LOG_SCALE)).exp();
        accumulate_component(pmf, logw[i].exp(), means[i], inv, grid);
    }
}

fn accumulate_component(
    pmf: &mut [f64],
    weight: f64,
    mean: f64,
    inv_scale: f64,
    grid: &SymbolGrid,
) {
    let m = grid.len();
    let half = grid.half_width;
    if m == 1 {
        pmf[0] += weight;
        return;
    }
    // Edges are evenly spaced, so e^{-|t|} advances by a constant factor.
    // It is recomputed every ANCHOR edges, where t changes sign, when the
    // rising side starts from an underflowed value, and for narrow components.
    const ANCHOR: usize = 32;
    let d = 2.0 * half * inv_scale;
    let steady = d < 32.0;
    let (up, down) = (d.exp(), (-d).exp());
    let mut prev = 0.0;
    let mut e = 0.0;
    let mut was_neg = false;
    for i in 0..m - 1 {
        let t = (grid.centers[i] + half - mean) * inv_scale;
        let neg = t < 0.0;
        if !steady || i % ANCHOR == 0 || neg != was_neg || (neg && e < 1e-200) {
            e = (-t.abs()).exp();
        } else {
            e *= if neg { up } else { down };
        }
        was_neg = neg;
        let cdf = if neg { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
        pmf[i] += weight * (cdf - prev);
        prev = cdf;
    }
    let last_edge = grid.centers[m - 2] + half;
    pmf[m - 1] += weight * sigmoid(-(last_edge - mean) * inv_scale);
}

/// Per-component derivatives of a single-bin log-probability.
struct BinGrad {
    d_logit: Vec<f64>,
    d_mean: Vec<f64>,
    d_log_scale: Vec<f64>,
    d_x: f64,
}

impl BinGrad {
    fn new(k: usize) -> Self {
        BinGrad {
            d_logit: vec![0.0; k],
            d_mean: vec![0.0; k],
            d_log_scale: vec![0.0; k],
            d_x: 0.0,
        }
    }
}

/// Natural log-probability of the bin centered at `x` (index `symbol` of an
/// `m`-symbol grid) and its gradients.
///
/// Uses `σ(a) - σ(b) = σ(a)·σ(-b)·(1 - e^{b-a})` so tiny scales stay finite.
#[allow(clippy::too_many_arguments)]
fn bin_logprob(
    logits: &[f64],
    means: &[f64],
    log_scales: &[f64],
    x: f64,
    half: f64,
    symbol: usize,
    m: usize,
    grad: &mut BinGrad,
) -> f64 {
    let k = logits.len();
    let left = symbol == 0;
    let right = symbol + 1 == m;
    let mut logw = vec![0.0; k];
    log_softmax(logits, &mut logw);
    let mut comp = vec![0.0; k];
    // ∂ log P_k / ∂a and ∂b, plus the standardized edges.
    let mut ga = vec![0.0; k];
    let mut gb = vec![0.0; k];
    let mut av = vec![0.0; k];
    let mut bv = vec![0.0; k];
    let mut inv = vec![0.0; k];
    for i in 0..k {
        let clamped = log_scales[i] < MIN_LOG_SCALE;
        let ls = log_scales[i].max(MIN_LOG_SCALE);
        inv[i] = (-ls).exp();
        let a = (x + half - means[i]) * inv[i];
        let b = (x - half - means[i]) * inv[i];
        av[i] = a;
        bv[i] = b;
        let lp = match (left, right) {
            (true, true) => 0.0,
            (true, false) => {
                ga[i] = sigmoid(-a);
                -softplus(-a)
            }
            (false, true) => {
                gb[i] = -sigmoid(b);
                -softplus(b)
            }
            (false, false) => {
                let d = b - a;
                let one_minus = -d.exp_m1();
                let r = d.exp() / one_minus;
                ga[i] = sigmoid(-a) + r;
                gb[i] = -sigmoid(b) - r;
                -softplus(-a) - softplus(b) + one_minus.ln()
            }
        };
        comp[i] = logw[i] + lp;
        if clamped {
            // Mark: no gradient through a clamped log-scale.
            inv[i] = -inv[i];
        }
    }
    let max = comp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + comp.iter().map(|c| (c - max).exp()).sum::<f64>().ln();
    grad.d_x = 0.0;
    for i in 0..k {
        let resp = (comp[i] - lse).exp();
        let pi = logw[i].exp();
        grad.d_logit[i] = resp - pi;
        let s_inv = inv[i].abs();
        let gab = ga[i] + gb[i];
        grad.d_mean[i] = -resp * gab * s_inv;
        grad.d_x += resp * gab * s_inv;
        grad.d_log_scale[i] = if inv[i] < 0.0 {
            0.0
        } else {
            -resp * (ga[i] * av[i] + gb[i] * bv[i])
        };
    }
    lse
}

/// Log-probability (natural) of `symbol` under a mixture given by raw
/// network outputs.
pub fn mixture_logprob_raw(
    logits: &[f64],
    means: &[f64],
    log_scales: &[f64],
    grid: &SymbolGrid,
    symbol: usize,
) -> f64 {
    let mut g = BinGrad::new(logits.len());
    bin_logprob(
        logits,
        means,
        log_scales,
        grid.centers[symbol],
        grid.half_width,
        symbol,
        grid.len(),
        &mut g,
    )
}

/// Column ranges of one RGB channel's mixture inside a 12·K parameter row.
#[derive(Debug, Clone, Copy)]
pub struct RgbLayout {
    pub mixtures: usize,
}

impl RgbLayout {
    pub fn width(&self) -> usize {
        12 * self.mixtures
    }
    fn block(&self, b: usize) -> std::ops::Range<usize> {
        b * self.mixtures..(b + 1) * self.mixtures
    }
    pub fn logits(&self, ch: usize) -> std::ops::Range<usize> {
        self.block(ch)
    }
    pub fn means(&self, ch: usize) -> std::ops::Range<usize> {
        self.block(3 + ch)
    }
    pub fn log_scales(&self, ch: usize) -> std::ops::Range<usize> {
        self.block(6 + ch)
    }
    /// 0 = c_GR, 1 = c_BR, 2 = c_BG.
    pub fn coeffs(&self, which: usize) -> std::ops::Range<usize> {
        self.block(9 + which)
    }
}

/// Column ranges of one latent channel's mixture.
#[derive(Debug, Clone, Copy)]
pub struct LatentLayout {
    pub mixtures: usize,
    pub channels: usize,
}

impl LatentLayout {
    pub fn width(&self) -> usize {
        3 * self.mixtures * self.channels
    }
    pub fn logits(&self, ch: usize) -> std::ops::Range<usize> {
        let b = 3 * self.mixtures * ch;
        b..b + self.mixtures
    }
    pub fn means(&self, ch: usize) -> std::ops::Range<usize> {
        let b = 3 * self.mixtures * ch + self.mixtures;
        b..b + self.mixtures
    }
    pub fn log_scales(&self, ch: usize) -> std::ops::Range<usize> {
        let b = 3 * self.mixtures * ch + 2 * self.mixtures;
        b..b + self.mixtures
    }
}

/// Means of one RGB channel after the linear dependence on decoded values.
pub fn rgb_conditional_means(row: &[f64], layout: RgbLayout, ch: usize, prev: &[u8]) -> Vec<f64> {
    let mut means = row[layout.means(ch)].to_vec();
    let k = layout.mixtures;
    match ch {
        0 => {}
        1 => {
            let xr = rgb_value(prev[0]);
            for (i, m) in means.iter_mut().enumerate() {
                *m += row[layout.coeffs(0).start + i].tanh() * xr;
            }
        }
        _ => {
            let (xr, xg) = (rgb_value(prev[0]), rgb_value(prev[1]));
            for i in 0..k {
                means[i] += row[layout.coeffs(1).start + i].tanh() * xr
                    + row[layout.coeffs(2).start + i].tanh() * xg;
            }
        }
    }
    means
}

/// pmf of RGB channel `ch` given already decoded channels `prev`.
pub fn rgb_channel_pmf(
    row: &[f64],
    layout: RgbLayout,
    ch: usize,
    prev: &[u8],
    grid: &SymbolGrid,
    pmf: &mut Vec<f64>,
) {
    let means = rgb_conditional_means(row, layout, ch, prev);
    mixture_pmf_raw(
        &row[layout.logits(ch)],
        &means,
        &row[layout.log_scales(ch)],
        grid,
        pmf,
    );
}

/// `log p(r) + log p(g | r) + log p(b | r, g)` for one parameter row.
pub fn rgb_joint_logprob(
    row: &[f64],
    mixtures: usize,
    rgb: [usize; 3],
    grid: &SymbolGrid,
) -> Result<f64> {
    let layout = RgbLayout { mixtures };
    if row.len() != layout.width() {
        return Err(Error::ShapeMismatch(format!(
            "rgb parameter row has {} values, expected {}",
            row.len(),
            layout.width()
        )));
    }
    for &s in &rgb {
        if s >= grid.len() {
            return Err(Error::SymbolOutOfRange {
                symbol: s,
                alphabet: grid.len(),
            });
        }
    }
    let vals = [grid.center(rgb[0]), grid.center(rgb[1])];
    let mut total = 0.0;
    for ch in 0..3 {
        let mut means = row[layout.means(ch)].to_vec();
        for (i, m) in means.iter_mut().enumerate() {
            *m += match ch {
                0 => 0.0,
                1 => row[layout.coeffs(0).start + i].tanh() * vals[0],
                _ => {
                    row[layout.coeffs(1).start + i].tanh() * vals[0]
                        + row[layout.coeffs(2).start + i].tanh() * vals[1]
                }
            };
        }
        total += mixture_logprob_raw(
            &row[layout.logits(ch)],
            &means,
            &row[layout.log_scales(ch)],
            grid,
            rgb[ch],
        );
    }
    Ok(total)
}

/// Differentiable per-entry log-probabilities of latent symbols.
///
/// `targets` holds the (de)quantized latent values whose gradient flows back
/// to the encoder; `symbols` (row-major, one per entry) fixes which bins are
/// tails. Returns an `N × channels` node of natural log-probabilities.
pub fn latent_logprob_node(
    g: &mut Graph<'_>,
    params: NodeId,
    targets: NodeId,
    symbols: &[u16],
    grid: &SymbolGrid,
    layout: LatentLayout,
) -> Result<NodeId> {
    let pv = g.value(params);
    let (rows, cols) = pv.shape();
    let tv = g.value(targets);
    if cols != layout.width()
        || tv.shape() != (rows, layout.channels)
        || symbols.len() != rows * layout.channels
    {
        return Err(Error::ShapeMismatch(format!(
            "latent params {rows}x{cols}, targets {:?}, {} symbols",
            tv.shape(),
            symbols.len()
        )));
    }
    let k = layout.mixtures;
    let mut out = Matrix::zeros(rows, layout.channels);
    let mut partials = Matrix::zeros(rows, cols);
    let mut d_target = Matrix::zeros(rows, layout.channels);
    let mut bg = BinGrad::new(k);
    for r in 0..rows {
        let row = pv.row(r);
        for c in 0..layout.channels {
            let sym = symbols[r * layout.channels + c] as usize;
            if sym >= grid.len() {
                return Err(Error::SymbolOutOfRange {
                    symbol: sym,
                    alphabet: grid.len(),
                });
            }
            let lp = bin_logprob(
                &row[layout.logits(c)],
                &row[layout.means(c)],
                &row[layout.log_scales(c)],
                tv[(r, c)],
                grid.half_width,
                sym,
                grid.len(),
                &mut bg,
            );
            out[(r, c)] = lp;
            let prow = partials.row_mut(r);
            prow[layout.logits(c)].copy_from_slice(&bg.d_logit);
            prow[layout.means(c)].copy_from_slice(&bg.d_mean);
            prow[layout.log_scales(c)].copy_from_slice(&bg.d_log_scale);
            d_target[(r, c)] = bg.d_x;
        }
    }
    let mut owner = vec![0; cols];
    for c in 0..layout.channels {
        for j in 3 * k * c..3 * k * (c + 1) {
            owner[j] = c;
        }
    }
    let grad = RowLocalGrad {
        partials,
        owner: Arc::new(owner),
    };
    g.row_local(params, out, grad, Some((targets, d_target)))
}

/// Differentiable per-channel conditional log-probabilities of RGB symbols.
/// Returns an `N × 3` node: `log p(r)`, `log p(g|r)`, `log p(b|r,g)`.
pub fn rgb_logprob_node(
    g: &mut Graph<'_>,
    params: NodeId,
    colors: &[[u8; 3]],
    grid: &SymbolGrid,
    mixtures: usize,
) -> Result<NodeId> {
    let layout = RgbLayout { mixtures };
    let pv = g.value(params);
    let (rows, cols) = pv.shape();
    if cols != layout.width() || colors.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "rgb params {rows}x{cols} for {} colors",
            colors.len()
        )));
    }
    let k = mixtures;
    let mut out = Matrix::zeros(rows, 3);
    let mut partials = Matrix::zeros(rows, cols);
    let mut bg = BinGrad::new(k);
    for r in 0..rows {
        let row = pv.row(r);
        let rgb = colors[r];
        let vals = [grid.center(rgb[0] as usize), grid.center(rgb[1] as usize)];
        for ch in 0..3 {
            let means = {
                let mut m = row[layout.means(ch)].to_vec();
                for (i, mi) in m.iter_mut().enumerate() {
                    *mi += match ch {
                        0 => 0.0,
                        1 => row[layout.coeffs(0).start + i].tanh() * vals[0],
                        _ => {
                            row[layout.coeffs(1).start + i].tanh() * vals[0]
                                + row[layout.coeffs(2).start + i].tanh() * vals[1]
                        }
                    };
                }
                m
            };
            let sym = rgb[ch] as usize;
            let lp = bin_logprob(
                &row[layout.logits(ch)],
                &means,
                &row[layout.log_scales(ch)],
                grid.center(sym),
                grid.half_width,
                sym,
                grid.len(),
                &mut bg,
            );
            out[(r, ch)] = lp;
            let prow = partials.row_mut(r);
            prow[layout.logits(ch)].copy_from_slice(&bg.d_logit);
            prow[layout.means(ch)].copy_from_slice(&bg.d_mean);
            prow[layout.log_scales(ch)].copy_from_slice(&bg.d_log_scale);
            // d mean~ / d raw coefficient = (1 - tanh²) · x
            match ch {
                1 => {
                    for i in 0..k {
                        let t = row[layout.coeffs(0).start + i].tanh();
                        prow[layout.coeffs(0).start + i] = bg.d_mean[i] * (1.0 - t * t) * vals[0];
                    }
                }
                2 => {
                    for i in 0..k {
                        let t1 = row[layout.coeffs(1).start + i].tanh();
                        let t2 = row[layout.coeffs(2).start + i].tanh();
                        prow[layout.coeffs(1).start + i] = bg.d_mean[i] * (1.0 - t1 * t1) * vals[0];
                        prow[layout.coeffs(2).start + i] = bg.d_mean[i] * (1.0 - t2 * t2) * vals[1];
                    }
                }
                _ => {}
            }
        }
    }
    let mut owner = vec![0; cols];
    for ch in 0..3 {
        for j in layout
            .logits(ch)
            .chain(layout.means(ch))
            .chain(layout.log_scales(ch))
        {
            owner[j] = ch;
        }
    }
    for j in layout.coeffs(0) {
        owner[j] = 1;
    }
    for j in layout.coeffs(1).chain(layout.coeffs(2)) {
        owner[j] = 2;
    }
    let grad = RowLocalGrad {
        partials,
        owner: Arc::new(owner),
    };
    g.row_local(params, out, grad, None)
}

/// Bits for coding `count` latent points of `channels` channels uniformly
/// over `alphabet` symbols.
pub fn uniform_bits(count: usize, channels: usize, alphabet: usize) -> f64 {
    (count * channels) as f64 * (alphabet as f64).log2()
}

/// Cross-entropy of the whole stack in bits:
/// `-Σ log₂ p(F|z¹) - Σ_n log₂ p(Lⁿ|zⁿ⁺¹) + |L^S|·C·log₂(M)`.
///
/// `latent_params[i]` / `latent_symbols[i]` describe scale `i + 1` for all
/// scales below the coarsest; `coarsest_count` is the number of points at the
/// coarsest latent level.
#[allow(clippy::too_many_arguments)]
pub fn cross_entropy_bits(
    rgb_params: &Matrix,
    colors: &[[u8; 3]],
    latent_params: &[Matrix],
    latent_symbols: &[Vec<u16>],
    coarsest_count: usize,
    mixtures: usize,
    latent_channels: usize,
    quantizer: &QuantizerConfig,
) -> Result<f64> {
    let rgb_grid = SymbolGrid::rgb();
    if rgb_params.rows() != colors.len() || latent_params.len() != latent_symbols.len() {
        return Err(Error::ShapeMismatch(
            "cross-entropy inputs are not aligned".into(),
        ));
    }
    let mut nats = 0.0;
    for (r, c) in colors.iter().enumerate() {
        let rgb = [c[0] as usize, c[1] as usize, c[2] as usize];
        nats -= rgb_joint_logprob(rgb_params.row(r), mixtures, rgb, &rgb_grid)?;
    }
    let grid = SymbolGrid::latent(quantizer);
    let layout = LatentLayout {
        mixtures,
        channels: latent_channels,
    };
    for (p, syms) in latent_params.iter().zip(latent_symbols) {
        if p.cols() != layout.width() || syms.len() != p.rows() * latent_channels {
            return Err(Error::ShapeMismatch(
                "latent parameters do not match symbols".into(),
            ));
        }
        for r in 0..p.rows() {
            let row = p.row(r);
            for ch in 0..latent_channels {
                let s = syms[r * latent_channels + ch] as usize;
                if s >= grid.len() {
                    return Err(Error::SymbolOutOfRange {
                        symbol: s,
                        alphabet: grid.len(),
                    });
                }
                nats -= mixture_logprob_raw(
                    &row[layout.logits(ch)],
                    &row[layout.means(ch)],
                    &row[layout.log_scales(ch)],
                    &grid,
                    s,
                );
            }
        }
    }
    Ok(nats / LN_2 + uniform_bits(coarsest_count, latent_channels, quantizer.num_bins))
}

/// Integer CDF with `cdf[0] = 0`, `cdf[M] = 2^precision` and every symbol
/// at least one unit wide. Each symbol gets one unit plus the floor of its
/// share of the rest; the units left over go to the most probable symbol
/// (lowest index on ties). Every symbol keeps at least `(1 - M/2^precision)`
/// of its probability.
pub fn build_cdf_table(pmf: &[f64], precision_bits: u32) -> Result<Vec<u32>> {
    let m = pmf.len();
    let total = 1u64 << precision_bits;
    if m == 0 || m as u64 > total {
        return Err(Error::DegeneratePmf(format!(
            "{m} symbols at {precision_bits} bits"
        )));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::DegeneratePmf("negative or non-finite mass".into()));
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::DegeneratePmf(format!("mass sums to {sum}")));
    }
    let spare = total - m as u64;
    let scale = spare as f64 / sum;
    let mut freq = Vec::with_capacity(m);
    let mut assigned = 0u64;
    let mut top = 0;
    for (i, &p) in pmf.iter().enumerate() {
        let base = (p * scale) as u64;
        freq.push(1 + base);
        assigned += base;
        if p > pmf[top] {
            top = i;
        }
    }
    if assigned < spare {
        freq[top] += spare - assigned;
    } else {
        // Rounding noise can overshoot by a unit; take it from the widest bins.
        let mut over = assigned - spare;
        while over > 0 {
            let i = (0..m)
                .max_by_key(|&i| (freq[i], std::cmp::Reverse(i)))
                .unwrap();
            freq[i] -= 1;
            over -= 1;
        }
    }
    let mut cdf = Vec::with_capacity(m + 1);
    let mut acc = 0u64;
    cdf.push(0);
    for f in freq {
        acc += f;
        cdf.push(acc as u32);
    }
    debug_assert_eq!(acc, total);
    Ok(cdf)
}

/// Probability the coder actually assigns to `symbol`.
pub fn cdf_probability(cdf: &[u32], symbol: usize) -> f64 {
    let total = *cdf.last().unwrap() as f64;
    (cdf[symbol + 1] - cdf[symbol]) as f64 / total
}
