//! Scalar quantization of latent pre-activations onto fixed centers.
//!
//! Training uses the hard value in the forward pass and the gradient of the
//! softmax-weighted soft assignment in the backward pass.

use std::sync::Arc;

use crate::autodiff::{Graph, NodeId, RowLocalGrad};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub num_bins: usize,
    pub centers: Vec<f64>,
    pub temperature: f64,
}

impl QuantizerConfig {
    /// `num_bins` centers evenly spaced on [-1, 1].
    pub fn uniform(num_bins: usize) -> Self {
        assert!(num_bins >= 2, "quantizer needs at least two bins");
        let step = 2.0 / (num_bins - 1) as f64;
        let centers = (0..num_bins).map(|j| -1.0 + step * j as f64).collect();
        QuantizerConfig {
            num_bins,
            centers,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.centers.windows(2).all(|w| w[0] < w[1]);
        if self.centers.len() != self.num_bins
            || self.num_bins < 2
            || !increasing
            || self.temperature <= 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "quantizer with {} bins and {} centers",
                self.num_bins,
                self.centers.len()
            )));
        }
        Ok(())
    }

    /// Half the spacing between the first two centers.
    pub fn half_width(&self) -> f64 {
        0.5 * (self.centers[1] - self.centers[0])
    }

    /// Nearest center, ties to the lower index.
    pub fn symbol(&self, v: f64) -> Result<usize> {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(v));
        }
        // First center strictly closer than the previous one wins.
        let idx = self.centers.partition_point(|&c| c < v);
        if idx == 0 {
            return Ok(0);
        }
        if idx == self.centers.len() {
            return Ok(idx - 1);
        }
        let lo = v - self.centers[idx - 1];
        let hi = self.centers[idx] - v;
        Ok(if hi < lo { idx } else { idx - 1 })
    }

    pub fn quantize_hard(&self, values: &[f64]) -> Result<(Vec<u16>, Vec<f64>)> {
        let mut symbols = Vec::with_capacity(values.len());
        let mut dequant = Vec::with_capacity(values.len());
        for &v in values {
            let s = self.symbol(v)?;
            symbols.push(s as u16);
            dequant.push(self.centers[s]);
        }
        Ok((symbols, dequant))
    }

    /// Soft assignment `Σ_j softmax(-(v - c_j)² / T)_j · c_j` and its derivative.
    pub fn soft_value(&self, v: f64) -> (f64, f64) {
        let t = self.temperature;
        let logits: Vec<f64> = self
            .centers
            .iter()
            .map(|c| -(v - c) * (v - c) / t)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut mean_c = 0.0;
        let mut mean_d = 0.0;
        let mut mean_cd = 0.0;
        for (j, wj) in w.iter().enumerate() {
            let p = wj / total;
            let c = self.centers[j];
            let d = -2.0 * (v - c) / t;
            mean_c += p * c;
            mean_d += p * d;
            mean_cd += p * c * d;
        }
        (mean_c, mean_cd - mean_c * mean_d)
    }
}

/// How the differentiable quantizer behaves in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    /// Hard centers forward, soft-surrogate gradient backward.
    #[default]
    StraightThrough,
    /// Soft value forward and backward; a smooth function for gradient checks.
    Soft,
}

/// Quantizes every entry of `x`. Returns the quantized node and the hard
/// symbols in row-major order.
pub fn quantize_soft(
    g: &mut Graph<'_>,
    x: NodeId,
    q: &QuantizerConfig,
    mode: QuantMode,
) -> Result<(NodeId, Vec<u16>)> {
    let xv = g.value(x);
    let (rows, cols) = xv.shape();
    let (symbols, hard) = q.quantize_hard(xv.data())?;
    let mut value = Vec::with_capacity(rows * cols);
    let mut partials = Vec::with_capacity(rows * cols);
    for (i, &v) in xv.data().iter().enumerate() {
        let (soft, d) = q.soft_value(v);
        value.push(match mode {
            QuantMode::StraightThrough => hard[i],
            QuantMode::Soft => soft,
        });
        partials.push(d);
    }
    let grad = RowLocalGrad {
        partials: Matrix::from_vec(rows, cols, partials),
        owner: Arc::new((0..cols).collect()),
    };
    let node = g.row_local(x, Matrix::from_vec(rows, cols, value), grad, None)?;
    Ok((node, symbols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamSet;
    use proptest::prelude::*;

    #[test]
    fn centers_match_grid() {
        let q = QuantizerConfig::uniform(26);
        assert_eq!(q.centers.len(), 26);
        for (j, c) in q.centers.iter().enumerate() {
            assert!((c - (-1.0 + 0.08 * j as f64)).abs() < 1e-12);
        }
        assert!((q.half_width() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn hard_examples() {
        let q = QuantizerConfig::uniform(26);
        let (s, v) = q.quantize_hard(&[-1.0, 0.0, 5.0]).unwrap();
        assert_eq!(s, vec![0, 12, 25]);
        assert_eq!(v[0], -1.0);
        assert!((v[1] + 0.04).abs() < 1e-12);
        assert_eq!(v[2], 1.0);
        assert!(matches!(
            q.quantize_hard(&[f64::NAN]),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn soft_value_limits() {
        let mut q = QuantizerConfig::uniform(26);
        let (s0, _) = q.soft_value(0.0);
        assert!(s0.abs() < 1e-12);
        q.temperature = 1e-4;
        let c = q.centers[7];
        let (s, _) = q.soft_value(c);
        assert!((s - c).abs() < 1e-9);
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let q = QuantizerConfig::uniform(26);
        let h = 1e-5;
        for &v in &[-1.3, -0.51, 0.0, 0.123, 0.77, 2.0] {
            let (_, d) = q.soft_value(v);
            let fd = (q.soft_value(v + h).0 - q.soft_value(v - h).0) / (2.0 * h);
            assert!(
                (d - fd).abs() <= 1e-6 * d.abs().max(1e-3),
                "{v}: {d} vs {fd}"
            );
        }
    }

    #[test]
    fn straight_through_node() {
        let params = ParamSet::new();
        let q = QuantizerConfig::uniform(26);
        let mut g = Graph::new(&params);
        let x = g.variable(Matrix::from_rows(&[vec![0.31, -0.9]]));
        let (y, sym) = quantize_soft(&mut g, x, &q, QuantMode::StraightThrough).unwrap();
        assert_eq!(
            sym,
            vec![
                q.symbol(0.31).unwrap() as u16,
                q.symbol(-0.9).unwrap() as u16
            ]
        );
        assert!((g.value(y)[(0, 0)] - 0.28).abs() < 1e-12);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gx = grads.node(x).unwrap();
        assert!((gx[(0, 0)] - q.soft_value(0.31).1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn idempotent_and_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let q = QuantizerConfig::uniform(26);
            let sa = q.symbol(a).unwrap();
            prop_assert_eq!(q.symbol(q.centers[sa]).unwrap(), sa);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q.symbol(lo).unwrap() <= q.symbol(hi).unwrap());
        }
    }

    #[test]
    fn every_symbol_reachable() {
        let q = QuantizerConfig::uniform(26);
        let reached: std::collections::BTreeSet<usize> =
            q.centers.iter().map(|&c| q.symbol(c).unwrap()).collect();
        assert_eq!(reached.len(), 26);
    }
}
