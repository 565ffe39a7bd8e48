//! Multiscale encode/decode, the block bitstream container and scalable
//! (lossy) extraction from a truncated stream.
//!
//! Block stream layout (all integers little-endian):
//!
//! ```text
//! "MNET"  u8 version=1  u8 num_scales S
//! u32 × (S+1)   point count per pyramid level 0..=S
//! [u8; 8]       model digest
//! u8 latent channels, u16 latent alphabet, u8 color channels, u16 color alphabet
//! S+1 chunks in decode order L^S, L^{S-1}, …, L^1, F:
//!     u32 payload length, u32 CRC-32 of payload, payload
//! ```
//!
//! Geometry is not stored; the decoder receives it separately. Any prefix
//! that ends on a chunk boundary after the first chunk parses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::likelihood::{
    build_cdf_table, cdf_probability, mixture_logprob_raw, mixture_pmf_raw, rgb_channel_pmf,
    rgb_conditional_means, RgbLayout, SymbolGrid, CDF_PRECISION_BITS,
};
use crate::matrix::Matrix;
use crate::model::{normalized_rgb, Model, PreparedBlock};
use crate::nn::{run_decoder, run_encoder};
use crate::pc_io::Block;
use crate::range_coder::{decode_uniform, encode_uniform, uniform_cdf, RangeDecoder, RangeEncoder};
use crate::tensor::Coord3;

pub const MAGIC: &[u8; 4] = b"MNET";
pub const VERSION: u8 = 1;
const RGB_ALPHABET: u16 = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub num_scales: u8,
    /// Points per pyramid level, level 0 first.
    pub num_points: Vec<u32>,
    pub model_digest: [u8; 8],
    pub latent_channels: u8,
    pub latent_alphabet: u16,
    pub rgb_channels: u8,
    pub rgb_alphabet: u16,
}

impl Header {
    fn byte_len(&self) -> usize {
        4 + 2 + 4 * self.num_points.len() + 8 + 6
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.num_scales);
        for n in &self.num_points {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&self.model_digest);
        out.push(self.latent_channels);
        out.extend_from_slice(&self.latent_alphabet.to_le_bytes());
        out.push(self.rgb_channels);
        out.extend_from_slice(&self.rgb_alphabet.to_le_bytes());
    }
}

/// Parsed block stream: header plus the chunks present, in decode order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub chunks: Vec<Vec<u8>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStream(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("stream ends inside a field"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Bitstream {
    /// Number of chunks in a complete stream.
    pub fn full_chunk_count(&self) -> usize {
        self.header.num_scales as usize + 1
    }

    pub fn is_complete(&self) -> bool {
        self.chunks.len() == self.full_chunk_count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.header.write(&mut out);
        for c in &self.chunks {
            out.extend_from_slice(&(c.len() as u32).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(c).to_le_bytes());
            out.extend_from_slice(c);
        }
        out
    }

    pub fn byte_len(&self) -> usize {
        self.header.byte_len() + self.chunks.iter().map(|c| 8 + c.len()).sum::<usize>()
    }

    /// Serialized length of the header and the first `k` chunks.
    pub fn prefix_len(&self, k: usize) -> usize {
        self.header.byte_len()
            + self
                .chunks
                .iter()
                .take(k)
                .map(|c| 8 + c.len())
                .sum::<usize>()
    }

    /// Keeps the first `k` chunks.
    pub fn truncated(&self, k: usize) -> Bitstream {
        Bitstream {
            header: self.header.clone(),
            chunks: self.chunks.iter().take(k).cloned().collect(),
        }
    }

    /// Parses a complete stream or a chunk-aligned prefix of one, verifying
    /// every chunk checksum.
    pub fn parse(bytes: &[u8]) -> Result<Bitstream> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = c.u8()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let num_scales = c.u8()?;
        if num_scales == 0 {
            return Err(corrupt("zero scales"));
        }
        let num_points = (0..=num_scales)
            .map(|_| c.u32())
            .collect::<Result<Vec<_>>>()?;
        let mut model_digest = [0u8; 8];
        model_digest.copy_from_slice(c.take(8)?);
        let header = Header {
            num_scales,
            num_points,
            model_digest,
            latent_channels: c.u8()?,
            latent_alphabet: c.u16()?,
            rgb_channels: c.u8()?,
            rgb_alphabet: c.u16()?,
        };
        let mut chunks = Vec::new();
        while c.remaining() > 0 {
            if chunks.len() == num_scales as usize + 1 {
                return Err(corrupt("trailing bytes after the last chunk"));
            }
            let len = c.u32()? as usize;
            let crc = c.u32()?;
            let payload = c.take(len)?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::ChecksumFailure {
                    chunk: chunks.len(),
                });
            }
            chunks.push(payload.to_vec());
        }
        Ok(Bitstream { header, chunks })
    }
}

/// `8 · bytes / points`
pub fn measure_bpp(total_bytes: usize, num_points: usize) -> f64 {
    assert!(num_points > 0, "bpp of an empty cloud");
    8.0 * total_bytes as f64 / num_points as f64
}

/// Options shared by encode and decode.
#[derive(Debug, Clone, Copy, Default)]
pub struct CodecOptions {
    /// Hash every CDF table in coding order.
    pub trace_cdfs: bool,
}

#[derive(Default)]
struct CdfTrace(Option<Sha256>);

impl CdfTrace {
    fn new(on: bool) -> Self {
        CdfTrace(on.then(Sha256::new))
    }
    fn record(&mut self, cdf: &[u32]) {
        if let Some(h) = self.0.as_mut() {
            for v in cdf {
                h.update(v.to_le_bytes());
            }
        }
    }
    fn finish(self) -> Option<[u8; 32]> {
        self.0.map(|h| h.finalize().into())
    }
}

/// Per-chunk information content of an encoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateStats {
    /// `Σ -log₂ q(s)` under the quantized CDF tables, per chunk.
    pub ideal_bits: Vec<f64>,
    /// `Σ -log₂ p(s)` under the continuous model, per chunk.
    pub model_bits: Vec<f64>,
}

impl RateStats {
    pub fn total_ideal_bits(&self) -> f64 {
        self.ideal_bits.iter().sum()
    }
    pub fn total_model_bits(&self) -> f64 {
        self.model_bits.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bitstream: Bitstream,
    pub stats: RateStats,
    pub cdf_hash: Option<[u8; 32]>,
}

impl Encoded {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bitstream.to_bytes()
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// Colors aligned with the caller's geometry order.
    pub colors: Vec<[u8; 3]>,
    pub cdf_hash: Option<[u8; 32]>,
}

/// Runs encoders 1..=S and returns the quantized symbols of every scale
/// (row-major, `latent_channels` per point).
fn encoder_symbols(model: &Model, block: &PreparedBlock) -> Result<Vec<Vec<u16>>> {
    let mut x = normalized_rgb(&block.colors);
    let mut out = Vec::with_capacity(model.config.num_scales);
    for n in 1..=model.config.num_scales {
        let mut g = Graph::new(&model.params);
        let input = g.input(x);
        let (pre, fwd) = run_encoder(&mut g, model.network.encoder(n), input, &block.maps)?;
        let (symbols, _) = model.quantizer.quantize_hard(g.value(pre).data())?;
        out.push(symbols);
        x = match fwd {
            Some(f) => g.value(f).clone(),
            None => Matrix::zeros(0, 0),
        };
    }
    Ok(out)
}

/// Runs decoder `n` on decoded symbols; identical on both sides of the codec.
fn decoder_stage(
    model: &Model,
    block: &PreparedBlock,
    n: usize,
    symbols: &[u16],
    summary: Option<Matrix>,
) -> Result<(Matrix, Option<Matrix>)> {
    let c = model.config.latent_channels;
    let rows = block.pyramid.level(n).len();
    let values = symbols
        .iter()
        .map(|&s| model.quantizer.centers[s as usize])
        .collect();
    let mut g = Graph::new(&model.params);
    let latent = g.input(Matrix::from_vec(rows, c, values));
    let z = summary.map(|m| g.input(m));
    let (params, next) = run_decoder(&mut g, model.network.decoder(n), latent, z, &block.maps)?;
    Ok((g.value(params).clone(), next.map(|z| g.value(z).clone())))
}

fn check_model(model: &Model) -> Result<()> {
    model.network.check(&model.params)?;
    if model.config.num_scales > u8::MAX as usize
        || model.config.latent_channels > u8::MAX as usize
        || model.config.num_bins > u16::MAX as usize
    {
        return Err(Error::ModelMismatch(
            "configuration does not fit the stream header".into(),
        ));
    }
    Ok(())
}

/// Model bits of a symbol. Small masses lose precision as a difference of
/// logistic CDFs, so those are recomputed in log space.
fn model_bits(mass: f64, log_prob: impl FnOnce() -> f64) -> f64 {
    if mass > 1e-6 {
        -mass.log2()
    } else {
        -log_prob() / std::f64::consts::LN_2
    }
}

fn code_latents(
    model: &Model,
    params: &Matrix,
    symbols: &[u16],
    trace: &mut CdfTrace,
    ideal: &mut f64,
    estimate: &mut f64,
) -> Result<Vec<u8>> {
    let layout = model.latent_layout();
    let grid = model.latent_grid();
    let mut enc = RangeEncoder::new();
    let mut pmf = Vec::new();
    for r in 0..params.rows() {
        let row = params.row(r);
        for ch in 0..layout.channels {
            let s = symbols[r * layout.channels + ch] as usize;
            let (lg, mu, ls) = (
                &row[layout.logits(ch)],
                &row[layout.means(ch)],
                &row[layout.log_scales(ch)],
            );
            mixture_pmf_raw(lg, mu, ls, &grid, &mut pmf);
            let cdf = build_cdf_table(&pmf, CDF_PRECISION_BITS)?;
            trace.record(&cdf);
            enc.encode_symbol(s, &cdf)?;
            *ideal -= cdf_probability(&cdf, s).log2();
            *estimate += model_bits(pmf[s], || mixture_logprob_raw(lg, mu, ls, &grid, s));
        }
    }
    Ok(enc.finish())
}

fn code_colors(
    model: &Model,
    params: &Matrix,
    colors: &[[u8; 3]],
    trace: &mut CdfTrace,
    ideal: &mut f64,
    estimate: &mut f64,
) -> Result<Vec<u8>> {
    let layout = RgbLayout {
        mixtures: model.config.mixtures,
    };
    let grid = SymbolGrid::rgb();
    let mut enc = RangeEncoder::new();
    let mut pmf = Vec::new();
    for (r, rgb) in colors.iter().enumerate() {
        let row = params.row(r);
        for ch in 0..3 {
            let means = rgb_conditional_means(row, layout, ch, &rgb[..ch]);
            let (lg, ls) = (&row[layout.logits(ch)], &row[layout.log_scales(ch)]);
            mixture_pmf_raw(lg, &means, ls, &grid, &mut pmf);
            let cdf = build_cdf_table(&pmf, CDF_PRECISION_BITS)?;
            trace.record(&cdf);
            let s = rgb[ch] as usize;
            enc.encode_symbol(s, &cdf)?;
            *ideal -= cdf_probability(&cdf, s).log2();
            *estimate += model_bits(pmf[s], || mixture_logprob_raw(lg, &means, ls, &grid, s));
        }
    }
    Ok(enc.finish())
}

/// Encodes the colors of one block. `geometry` may be in any order;
/// `colors[i]` belongs to `geometry[i]`.
pub fn encode(
    geometry: &[Coord3],
    colors: &[[u8; 3]],
    model: &Model,
    opts: CodecOptions,
) -> Result<Encoded> {
    check_model(model)?;
    if colors.len() != geometry.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} colors for {} points",
            colors.len(),
            geometry.len()
        )));
    }
    let block = PreparedBlock::new(geometry, colors, &model.config)?;
    let s = model.config.num_scales;
    let symbols = encoder_symbols(model, &block)?;
    let mut trace = CdfTrace::new(opts.trace_cdfs);
    let mut stats = RateStats::default();
    let mut chunks = Vec::with_capacity(s + 1);

    let alphabet = model.quantizer.num_bins;
    let coarsest = &symbols[s - 1];
    if opts.trace_cdfs {
        trace.record(&uniform_cdf(alphabet)?);
    }
    chunks.push(encode_uniform(coarsest, alphabet)?);
    let uniform = crate::likelihood::uniform_bits(coarsest.len(), 1, alphabet);
    let cdf = uniform_cdf(alphabet)?;
    stats.ideal_bits.push(
        coarsest
            .iter()
            .map(|&v| -cdf_probability(&cdf, v as usize).log2())
            .sum(),
    );
    stats.model_bits.push(uniform);

    let mut z = None;
    for n in (1..=s).rev() {
        let (params, next) = decoder_stage(model, &block, n, &symbols[n - 1], z)?;
        let (mut ideal, mut estimate) = (0.0, 0.0);
        let chunk = if n >= 2 {
            code_latents(
                model,
                &params,
                &symbols[n - 2],
                &mut trace,
                &mut ideal,
                &mut estimate,
            )?
        } else {
            code_colors(
                model,
                &params,
                &block.colors,
                &mut trace,
                &mut ideal,
                &mut estimate,
            )?
        };
        chunks.push(chunk);
        stats.ideal_bits.push(ideal);
        stats.model_bits.push(estimate);
        z = next;
    }
    let header = Header {
        num_scales: s as u8,
        num_points: block.pyramid.counts().iter().map(|&c| c as u32).collect(),
        model_digest: model.digest(),
        latent_channels: model.config.latent_channels as u8,
        latent_alphabet: alphabet as u16,
        rgb_channels: 3,
        rgb_alphabet: RGB_ALPHABET,
    };
    Ok(Encoded {
        bitstream: Bitstream { header, chunks },
        stats,
        cdf_hash: trace.finish(),
    })
}

fn digest_hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Header checks shared by lossless and scalable decoding.
fn validate_header(stream: &Bitstream, model: &Model, block: &PreparedBlock) -> Result<()> {
    let h = &stream.header;
    let digest = model.digest();
    if h.model_digest != digest {
        return Err(Error::DigestMismatch {
            stream: digest_hex(&h.model_digest),
            model: digest_hex(&digest),
        });
    }
    if h.num_scales as usize != model.config.num_scales
        || h.latent_channels as usize != model.config.latent_channels
        || h.latent_alphabet as usize != model.quantizer.num_bins
        || h.rgb_channels != 3
        || h.rgb_alphabet != RGB_ALPHABET
    {
        return Err(Error::ModelMismatch(
            "stream header disagrees with the model".into(),
        ));
    }
    let counts: Vec<u32> = block.pyramid.counts().iter().map(|&c| c as u32).collect();
    if counts != h.num_points {
        return Err(corrupt(format!(
            "stream point counts {:?} do not match geometry {counts:?}",
            h.num_points
        )));
    }
    if stream.chunks.is_empty() {
        return Err(corrupt("stream has no chunks"));
    }
    Ok(())
}

fn decode_latents(
    model: &Model,
    params: &Matrix,
    payload: &[u8],
    trace: &mut CdfTrace,
) -> Result<Vec<u16>> {
    let layout = model.latent_layout();
    let grid = model.latent_grid();
    let mut dec = RangeDecoder::new(payload);
    let mut pmf = Vec::new();
    let mut out = Vec::with_capacity(params.rows() * layout.channels);
    for r in 0..params.rows() {
        let row = params.row(r);
        for ch in 0..layout.channels {
            mixture_pmf_raw(
                &row[layout.logits(ch)],
                &row[layout.means(ch)],
                &row[layout.log_scales(ch)],
                &grid,
                &mut pmf,
            );
            let cdf = build_cdf_table(&pmf, CDF_PRECISION_BITS)?;
            trace.record(&cdf);
            out.push(dec.decode_symbol(&cdf)? as u16);
        }
    }
    Ok(out)
}

fn decode_colors(
    model: &Model,
    params: &Matrix,
    payload: &[u8],
    trace: &mut CdfTrace,
) -> Result<Vec<[u8; 3]>> {
    let layout = RgbLayout {
        mixtures: model.config.mixtures,
    };
    let grid = SymbolGrid::rgb();
    let mut dec = RangeDecoder::new(payload);
    let mut pmf = Vec::new();
    let mut out = Vec::with_capacity(params.rows());
    for r in 0..params.rows() {
        let row = params.row(r);
        let mut rgb = [0u8; 3];
        for ch in 0..3 {
            rgb_channel_pmf(row, layout, ch, &rgb[..ch], &grid, &mut pmf);
            let cdf = build_cdf_table(&pmf, CDF_PRECISION_BITS)?;
            trace.record(&cdf);
            rgb[ch] = dec.decode_symbol(&cdf)? as u8;
        }
        out.push(rgb);
    }
    Ok(out)
}

fn reorder(block: &PreparedBlock, canonical: Vec<[u8; 3]>) -> Vec<[u8; 3]> {
    let mut out = vec![[0u8; 3]; canonical.len()];
    for (row, &orig) in block.order.iter().enumerate() {
        out[orig] = canonical[row];
    }
    out
}

/// Lossless decode of a complete block stream.
pub fn decode(
    geometry: &[Coord3],
    bytes: &[u8],
    model: &Model,
    opts: CodecOptions,
) -> Result<Decoded> {
    let stream = Bitstream::parse(bytes)?;
    let block = PreparedBlock::new(geometry, &[], &model.config)?;
    validate_header(&stream, model, &block)?;
    if !stream.is_complete() {
        return Err(corrupt(format!(
            "stream has {} of {} chunks",
            stream.chunks.len(),
            stream.full_chunk_count()
        )));
    }
    check_model(model)?;
    let s = model.config.num_scales;
    let c = model.config.latent_channels;
    let alphabet = model.quantizer.num_bins;
    let mut trace = CdfTrace::new(opts.trace_cdfs);
    if opts.trace_cdfs {
        trace.record(&uniform_cdf(alphabet)?);
    }
    let mut symbols = decode_uniform(
        &stream.chunks[0],
        block.pyramid.level(s).len() * c,
        alphabet,
    )?;
    let mut z = None;
    let mut colors = Vec::new();
    for n in (1..=s).rev() {
        let (params, next) = decoder_stage(model, &block, n, &symbols, z)?;
        let payload = &stream.chunks[s + 1 - n];
        if n >= 2 {
            symbols = decode_latents(model, &params, payload, &mut trace)?;
        } else {
            colors = decode_colors(model, &params, payload, &mut trace)?;
        }
        z = next;
    }
    Ok(Decoded {
        colors: reorder(&block, colors),
        cdf_hash: trace.finish(),
    })
}

/// How missing chunks are filled in by [`decode_scalable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalableMode {
    /// Mean of each predicted distribution, rounded to the nearest symbol.
    Mean,
    /// Seeded draw from each predicted distribution.
    Sample { seed: u64 },
}

fn pick_symbol(pmf: &[f64], values: &[f64], mode: ScalableMode, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        ScalableMode::Mean => {
            let mean: f64 = pmf.iter().zip(values).map(|(p, v)| p * v).sum();
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                if (v - mean).abs() < (values[best] - mean).abs() {
                    best = i;
                }
            }
            best
        }
        ScalableMode::Sample { .. } => {
            let u: f64 = rng.gen();
            let total: f64 = pmf.iter().sum();
            let mut acc = 0.0;
            for (i, p) in pmf.iter().enumerate() {
                acc += p / total;
                if u < acc {
                    return i;
                }
            }
            pmf.len() - 1
        }
    }
}

/// Decodes whatever chunks are present and fills each missing scale (and
/// the colors, when the last chunk is missing) from the predicted
/// distributions according to `mode`.
pub fn decode_scalable(
    geometry: &[Coord3],
    bytes: &[u8],
    model: &Model,
    mode: ScalableMode,
) -> Result<Vec<[u8; 3]>> {
    let stream = Bitstream::parse(bytes)?;
    let block = PreparedBlock::new(geometry, &[], &model.config)?;
    validate_header(&stream, model, &block)?;
    check_model(model)?;
    let s = model.config.num_scales;
    let c = model.config.latent_channels;
    let alphabet = model.quantizer.num_bins;
    let seed = match mode {
        ScalableMode::Sample { seed } => seed,
        ScalableMode::Mean => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = CdfTrace::new(false);
    let mut symbols = decode_uniform(
        &stream.chunks[0],
        block.pyramid.level(s).len() * c,
        alphabet,
    )?;
    let grid = model.latent_grid();
    let rgb_grid = SymbolGrid::rgb();
    let rgb_levels: Vec<f64> = (0..256).map(|v| v as f64).collect();
    let layout = model.latent_layout();
    let rgb_layout = RgbLayout {
        mixtures: model.config.mixtures,
    };
    let mut z = None;
    let mut colors = Vec::new();
    let mut pmf = Vec::new();
    for n in (1..=s).rev() {
        let (params, next) = decoder_stage(model, &block, n, &symbols, z)?;
        let payload = stream.chunks.get(s + 1 - n);
        if n >= 2 {
            symbols = match payload {
                Some(p) => decode_latents(model, &params, p, &mut trace)?,
                None => {
                    let mut out = Vec::with_capacity(params.rows() * c);
                    for r in 0..params.rows() {
                        let row = params.row(r);
                        for ch in 0..c {
                            mixture_pmf_raw(
                                &row[layout.logits(ch)],
                                &row[layout.means(ch)],
                                &row[layout.log_scales(ch)],
                                &grid,
                                &mut pmf,
                            );
                            out.push(pick_symbol(&pmf, grid.centers(), mode, &mut rng) as u16);
                        }
                    }
                    out
                }
            };
        } else {
            colors = match payload {
                Some(p) => decode_colors(model, &params, p, &mut trace)?,
                None => {
                    let mut out = Vec::with_capacity(params.rows());
                    for r in 0..params.rows() {
                        let row = params.row(r);
                        let mut rgb = [0u8; 3];
                        for ch in 0..3 {
                            rgb_channel_pmf(row, rgb_layout, ch, &rgb[..ch], &rgb_grid, &mut pmf);
                            rgb[ch] = pick_symbol(&pmf, &rgb_levels, mode, &mut rng) as u8;
                        }
                        out.push(rgb);
                    }
                    out
                }
            };
        }
        z = next;
    }
    Ok(reorder(&block, colors))
}

/// Concatenation of block streams with their grid origins.
///
/// ```text
/// "MNEF"  u8 version=1  u32 block count
/// per block: i32 × 3 origin, u32 stream length, stream bytes
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FileStream {
    pub blocks: Vec<(Coord3, Vec<u8>)>,
}

const FILE_MAGIC: &[u8; 4] = b"MNEF";

impl FileStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FILE_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (origin, bytes) in &self.blocks {
            for v in [origin.x, origin.y, origin.z] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<FileStream> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4)? != FILE_MAGIC {
            return Err(corrupt("bad file magic"));
        }
        if c.u8()? != VERSION {
            return Err(corrupt("unsupported file version"));
        }
        let count = c.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let x = c.u32()? as i32;
            let y = c.u32()? as i32;
            let z = c.u32()? as i32;
            let len = c.u32()? as usize;
            blocks.push((Coord3::new(x, y, z), c.take(len)?.to_vec()));
        }
        if c.remaining() != 0 {
            return Err(corrupt("trailing bytes after the last block"));
        }
        Ok(FileStream { blocks })
    }

    pub fn byte_len(&self) -> usize {
        9 + self.blocks.iter().map(|(_, b)| 16 + b.len()).sum::<usize>()
    }
}

fn run_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Encodes every block into one file stream. `threads` caps block-level
/// parallelism (0 = all cores); output does not depend on it.
pub fn encode_blocks(blocks: &[Block], model: &Model, threads: usize) -> Result<FileStream> {
    let streams = run_pool(threads, || {
        blocks
            .par_iter()
            .map(|b| {
                encode(b.coords(), &b.colors(), model, CodecOptions::default())
                    .map(|e| e.to_bytes())
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(FileStream {
        blocks: blocks.iter().map(|b| b.origin).zip(streams).collect(),
    })
}

/// Decodes a file stream against block geometry given as `(origin, local
/// coordinates)` in the same order as the stream.
pub fn decode_blocks(
    geometry: &[(Coord3, Vec<Coord3>)],
    stream: &FileStream,
    model: &Model,
    threads: usize,
) -> Result<Vec<Vec<[u8; 3]>>> {
    if geometry.len() != stream.blocks.len() {
        return Err(corrupt(format!(
            "stream has {} blocks, geometry has {}",
            stream.blocks.len(),
            geometry.len()
        )));
    }
    for ((origin, _), (so, _)) in geometry.iter().zip(&stream.blocks) {
        if origin != so {
            return Err(corrupt(format!(
                "block origin {so:?} does not match geometry {origin:?}"
            )));
        }
    }
    run_pool(threads, || {
        geometry
            .par_iter()
            .zip(&stream.blocks)
            .map(|((_, coords), (_, bytes))| {
                decode(coords, bytes, model, CodecOptions::default()).map(|d| d.colors)
            })
            .collect::<Result<Vec<_>>>()
    })?
}
