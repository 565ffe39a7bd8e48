//! The multiscale stack: parameters, per-block preparation and the
//! differentiable rate (in bits) used for training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::likelihood::{
    latent_logprob_node, rgb_logprob_node, rgb_value, uniform_bits, LatentLayout, SymbolGrid,
};
use crate::matrix::Matrix;
use crate::nn::{run_decoder, run_encoder, ModelConfig, Network, PyramidMaps};
use crate::quantizer::{quantize_soft, QuantMode, QuantizerConfig};
use crate::tensor::{pyramid_from_base, Coord3, CoordSet, ScalePyramid};

/// Bookkeeping carried in checkpoints; not part of the model digest.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMetadata {
    pub epoch: u32,
    /// Best validation loss in bits per point.
    pub loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub quantizer: QuantizerConfig,
    pub params: ParamSet,
    pub network: Network,
    pub metadata: TrainingMetadata,
}

impl Model {
    /// Freshly initialized weights drawn from `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let network = Network::init(&mut params, &config, &mut rng);
        Ok(Model {
            config,
            quantizer: QuantizerConfig::uniform(config.num_bins),
            params,
            network,
            metadata: TrainingMetadata {
                seed,
                ..TrainingMetadata::default()
            },
        })
    }

    /// First eight bytes of SHA-256 over the configuration, quantizer table
    /// and every weight, in parameter order.
    pub fn digest(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(crate::checkpoint::config_bytes(
            &self.config,
            &self.quantizer,
        ));
        for p in self.params.iter() {
            h.update((p.name.len() as u16).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u32).to_le_bytes());
            h.update((p.value.cols() as u32).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let full = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&full[..8]);
        out
    }

    pub fn latent_layout(&self) -> LatentLayout {
        LatentLayout {
            mixtures: self.config.mixtures,
            channels: self.config.latent_channels,
        }
    }

    pub fn latent_grid(&self) -> SymbolGrid {
        SymbolGrid::latent(&self.quantizer)
    }
}

/// Encoder input features: colors mapped to [-1, 1].
pub fn normalized_rgb(colors: &[[u8; 3]]) -> Matrix {
    let mut m = Matrix::zeros(colors.len(), 3);
    for (r, c) in colors.iter().enumerate() {
        for ch in 0..3 {
            m[(r, ch)] = rgb_value(c[ch]);
        }
    }
    m
}

/// Geometry, kernel maps and colors of one block in canonical order.
#[derive(Debug, Clone)]
pub struct PreparedBlock {
    pub pyramid: ScalePyramid,
    pub maps: PyramidMaps,
    pub colors: Vec<[u8; 3]>,
    /// `order[i]` is the caller's index of canonical row `i`.
    pub order: Vec<usize>,
}

impl PreparedBlock {
    /// Sorts `geometry` (any order) and aligns `colors` with it. Colors may be
    /// empty when only geometry is known (decoding).
    pub fn new(geometry: &[Coord3], colors: &[[u8; 3]], config: &ModelConfig) -> Result<Self> {
        if geometry.is_empty() {
            return Err(Error::EmptyGeometry);
        }
        if !colors.is_empty() && colors.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} colors for {} points",
                colors.len(),
                geometry.len()
            )));
        }
        let mut order: Vec<usize> = (0..geometry.len()).collect();
        order.sort_unstable_by_key(|&i| geometry[i]);
        let sorted: Vec<Coord3> = order.iter().map(|&i| geometry[i]).collect();
        let base = CoordSet::new(sorted, 1)?;
        let pyramid = pyramid_from_base(base, config.num_scales);
        let maps = PyramidMaps::build(&pyramid, config.kernel_size)?;
        let colors = if colors.is_empty() {
            Vec::new()
        } else {
            order.iter().map(|&i| colors[i]).collect()
        };
        Ok(PreparedBlock {
            pyramid,
            maps,
            colors,
            order,
        })
    }

    pub fn num_points(&self) -> usize {
        self.pyramid.level(0).len()
    }
}

/// Nodes of the training objective for one block.
#[derive(Debug, Clone)]
pub struct LossNodes {
    /// Differentiable part of the rate, in bits.
    pub bits: NodeId,
    /// Rate of the uniformly coded coarsest latent, in bits.
    pub constant_bits: f64,
    /// Per-scale quantized latent symbols, index 0 = scale 1.
    pub symbols: Vec<Vec<u16>>,
}

impl LossNodes {
    pub fn total_bits(&self, g: &Graph<'_>) -> f64 {
        g.value(self.bits)[(0, 0)] + self.constant_bits
    }
}

/// Builds the full rate objective `-Σ log₂ p(F|z¹) - Σ log₂ p(Lⁿ|zⁿ⁺¹) + const`.
pub fn loss_graph(
    g: &mut Graph<'_>,
    model: &Model,
    block: &PreparedBlock,
    mode: QuantMode,
) -> Result<LossNodes> {
    if block.colors.len() != block.num_points() {
        return Err(Error::ShapeMismatch("block has no colors".into()));
    }
    let cfg = &model.config;
    let s = cfg.num_scales;
    if block.pyramid.num_scales() != s {
        return Err(Error::ModelMismatch(format!(
            "block prepared for {} scales, model has {s}",
            block.pyramid.num_scales()
        )));
    }
    let mut x = g.input(normalized_rgb(&block.colors));
    let mut quantized: Vec<NodeId> = Vec::with_capacity(s);
    let mut symbols = Vec::with_capacity(s);
    for n in 1..=s {
        let (pre, fwd) = run_encoder(g, model.network.encoder(n), x, &block.maps)?;
        let (q, sym) = quantize_soft(g, pre, &model.quantizer, mode)?;
        quantized.push(q);
        symbols.push(sym);
        if let Some(f) = fwd {
            x = f;
        }
    }
    let grid = model.latent_grid();
    let layout = model.latent_layout();
    let mut z = None;
    let mut total: Option<NodeId> = None;
    for n in (1..=s).rev() {
        let (params, next) = run_decoder(
            g,
            model.network.decoder(n),
            quantized[n - 1],
            z,
            &block.maps,
        )?;
        let lp = if n >= 2 {
            latent_logprob_node(g, params, quantized[n - 2], &symbols[n - 2], &grid, layout)?
        } else {
            rgb_logprob_node(g, params, &block.colors, &SymbolGrid::rgb(), cfg.mixtures)?
        };
        let term = g.sum(lp);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        z = next;
    }
    let nats = total.expect("at least one scale");
    let bits = g.scale(nats, -1.0 / std::f64::consts::LN_2);
    let constant_bits = uniform_bits(
        block.pyramid.level(s).len(),
        cfg.latent_channels,
        model.quantizer.num_bins,
    );
    Ok(LossNodes {
        bits,
        constant_bits,
        symbols,
    })
}
