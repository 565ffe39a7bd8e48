//! Sparse-tensor layers: kernel maps, generalized sparse convolution,
//! transpose convolution onto known finer coordinates, stride-2 max pooling
//! and the per-scale encoder/decoder built from them.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{CoordSet, ScalePyramid};

/// For each kernel offset, the `(input_row, output_row)` pairs it connects.
#[derive(Debug, Clone)]
pub struct KernelMap {
    offsets: Vec<[i32; 3]>,
    ins: Vec<Vec<usize>>,
    outs: Vec<Vec<usize>>,
    n_in: usize,
    n_out: usize,
}

impl KernelMap {
    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    /// Input and output rows for offset `o`, aligned by position.
    pub fn pairs(&self, o: usize) -> (&[usize], &[usize]) {
        (&self.ins[o], &self.outs[o])
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn num_pairs(&self) -> usize {
        self.ins.iter().map(Vec::len).sum()
    }
}

/// Kernel offsets for size `k`, lexicographic in (dx, dy, dz). Odd sizes are
/// centered; even sizes start at zero.
pub fn kernel_offsets(k: usize) -> Vec<[i32; 3]> {
    let lo = -((k as i32 - 1) / 2);
    let hi = lo + k as i32;
    let mut offsets = Vec::with_capacity(k * k * k);
    for dx in lo..hi {
        for dy in lo..hi {
            for dz in lo..hi {
                offsets.push([dx, dy, dz]);
            }
        }
    }
    offsets
}

/// Pairs `(i, j)` for offset `o` whenever `input[i] == output[j] + o · dilation`.
pub fn build_kernel_map(
    input: &CoordSet,
    output: &CoordSet,
    kernel_size: usize,
    dilation: i32,
) -> KernelMap {
    let offsets = kernel_offsets(kernel_size);
    let mut ins = vec![Vec::new(); offsets.len()];
    let mut outs = vec![Vec::new(); offsets.len()];
    for (j, c) in output.coords().iter().enumerate() {
        for (o, d) in offsets.iter().enumerate() {
            let q = c.offset(d[0] * dilation, d[1] * dilation, d[2] * dilation);
            if let Some(i) = input.row_of(&q) {
                ins[o].push(i);
                outs[o].push(j);
            }
        }
    }
    KernelMap {
        offsets,
        ins,
        outs,
        n_in: input.len(),
        n_out: output.len(),
    }
}

/// Map from coarse `parents` (stride 2s) to the finer `targets` (stride s):
/// target `t` receives parent `p` through offset `(t - p) / s ∈ {0,1}³`.
pub fn build_transpose_map(parents: &CoordSet, targets: &CoordSet) -> KernelMap {
    let s = targets.stride();
    let offsets = kernel_offsets(2);
    let mut ins = vec![Vec::new(); offsets.len()];
    let mut outs = vec![Vec::new(); offsets.len()];
    for (j, t) in targets.coords().iter().enumerate() {
        let p = t.parent(s);
        if let Some(i) = parents.row_of(&p) {
            let o = (((t.x - p.x) / s) * 4 + ((t.y - p.y) / s) * 2 + (t.z - p.z) / s) as usize;
            ins[o].push(i);
            outs[o].push(j);
        }
    }
    KernelMap {
        offsets,
        ins,
        outs,
        n_in: parents.len(),
        n_out: targets.len(),
    }
}

/// Parent row (in `parents`) of every row of `children`.
pub fn pool_segments(children: &CoordSet, parents: &CoordSet) -> Result<Vec<usize>> {
    children
        .coords()
        .iter()
        .map(|c| {
            parents.row_of(&c.parent(children.stride())).ok_or_else(|| {
                Error::ShapeMismatch(format!("no parent for {c:?} in pooled coordinates"))
            })
        })
        .collect()
}

/// Kernel maps for every level of a pyramid, built once per block.
#[derive(Debug, Clone)]
pub struct PyramidMaps {
    /// k3 self-convolution map per level.
    conv: Vec<Arc<KernelMap>>,
    /// Level n-1 row → level n row, for n ≥ 1 (index 0 unused).
    pool: Vec<Vec<usize>>,
    /// Level n → level n-1 transpose map, for n ≥ 1 (index 0 unused).
    up: Vec<Option<Arc<KernelMap>>>,
}

impl PyramidMaps {
    pub fn build(pyramid: &ScalePyramid, kernel_size: usize) -> Result<Self> {
        let levels = pyramid.num_levels();
        let mut conv = Vec::with_capacity(levels);
        let mut pool = vec![Vec::new()];
        let mut up = vec![None];
        for n in 0..levels {
            let lv = pyramid.level(n);
            conv.push(Arc::new(build_kernel_map(lv, lv, kernel_size, lv.stride())));
            if n > 0 {
                let fine = pyramid.level(n - 1);
                pool.push(pool_segments(fine, lv)?);
                up.push(Some(Arc::new(build_transpose_map(lv, fine))));
            }
        }
        Ok(PyramidMaps { conv, pool, up })
    }

    pub fn conv(&self, level: usize) -> &Arc<KernelMap> {
        &self.conv[level]
    }

    pub fn pool(&self, level: usize) -> &[usize] {
        &self.pool[level]
    }

    pub fn up(&self, level: usize) -> &Arc<KernelMap> {
        self.up[level]
            .as_ref()
            .expect("no upsampling map into level 0")
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.conv[level].n_out()
    }
}

/// Weights of one convolution: `num_offsets · c_in × c_out` stacked blocks
/// plus a `1 × c_out` bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvParams {
    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        kernel_size: usize,
        c_in: usize,
        c_out: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let taps = kernel_size.pow(3);
        let fan_in = (taps * c_in) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let data = (0..taps * c_in * c_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let weight = params.add(
            format!("{name}.weight"),
            Matrix::from_vec(taps * c_in, c_out, data),
        );
        let bias = params.add(format!("{name}.bias"), Matrix::zeros(1, c_out));
        ConvParams {
            weight,
            bias,
            kernel_size,
            c_in,
            c_out,
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let w = params.value(self.weight).shape();
        let b = params.value(self.bias).shape();
        if w != (self.kernel_size.pow(3) * self.c_in, self.c_out) || b != (1, self.c_out) {
            return Err(Error::ModelMismatch(format!(
                "conv weight {w:?} / bias {b:?} do not match k{} {}→{}",
                self.kernel_size, self.c_in, self.c_out
            )));
        }
        Ok(())
    }
}

/// Sparse convolution of `x` through `map`.
pub fn sparse_conv(
    g: &mut Graph<'_>,
    x: NodeId,
    p: &ConvParams,
    map: &Arc<KernelMap>,
) -> Result<NodeId> {
    if g.shape(x).1 != p.c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            p.c_in,
            g.shape(x).1
        )));
    }
    let w = g.param(p.weight);
    let b = g.param(p.bias);
    g.sparse_conv(x, w, b, Arc::clone(map))
}

/// Transpose convolution from stride 2s onto the known stride-s targets of `map`.
pub fn sparse_transpose_conv(
    g: &mut Graph<'_>,
    x: NodeId,
    p: &ConvParams,
    map: &Arc<KernelMap>,
) -> Result<NodeId> {
    sparse_conv(g, x, p, map)
}

/// Channel-wise max over the children of every parent.
pub fn max_pool2(
    g: &mut Graph<'_>,
    x: NodeId,
    segments: &[usize],
    n_parents: usize,
) -> Result<NodeId> {
    g.segment_max(x, segments, n_parents)
}

/// `x + conv2(relu(conv1(x)))`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ResBlock {
    fn init(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResBlock {
            conv1: ConvParams::init(
                params,
                &format!("{name}.conv1"),
                k,
                channels,
                channels,
                1.0,
                rng,
            ),
            conv2: ConvParams::init(
                params,
                &format!("{name}.conv2"),
                k,
                channels,
                channels,
                0.1,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, map: &Arc<KernelMap>) -> Result<NodeId> {
        let h = sparse_conv(g, x, &self.conv1, map)?;
        let h = g.relu(h);
        let h = sparse_conv(g, h, &self.conv2, map)?;
        g.add(x, h)
    }
}

/// Architecture hyper-parameters of the multiscale stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_scales: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub latent_channels: usize,
    pub mixtures: usize,
    pub num_bins: usize,
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_scales: 3,
            channels: 64,
            res_blocks: 8,
            latent_channels: 5,
            mixtures: 10,
            num_bins: 26,
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_scales >= 1
            && self.num_scales <= 8
            && self.channels >= 1
            && self.latent_channels >= 1
            && self.mixtures >= 1
            && self.num_bins >= 2
            && self.num_bins <= 1 << 12
            && self.kernel_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Width of the RGB parameter head: 12 values per mixture component.
    pub fn rgb_param_width(&self) -> usize {
        12 * self.mixtures
    }

    /// Width of a latent parameter head: weight, mean and log-scale per
    /// channel and component.
    pub fn latent_param_width(&self) -> usize {
        3 * self.mixtures * self.latent_channels
    }

    /// Parameter-head width of decoder `n` (1-based).
    pub fn decoder_head_width(&self, n: usize) -> usize {
        if n == 1 {
            self.rgb_param_width()
        } else {
            self.latent_param_width()
        }
    }
}

/// Encoder of scale `n`: head conv at level n-1, max-pool to level n,
/// residual blocks, then the latent and forward branches. The coarsest
/// encoder has no forward branch since nothing consumes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleEncoder {
    pub scale: usize,
    pub head: ConvParams,
    pub blocks: Vec<ResBlock>,
    pub latent: ConvParams,
    pub forward: Option<ConvParams>,
}

/// Decoder of scale `n`: input conv at level n over `[L^n | z^{n+1}]`,
/// residual blocks, upsampler to level n-1, then the parameter head and (for
/// n ≥ 2) the forwarding-feature conv.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleDecoder {
    pub scale: usize,
    pub input: ConvParams,
    pub blocks: Vec<ResBlock>,
    pub upsample: ConvParams,
    pub head: ConvParams,
    pub forward: Option<ConvParams>,
}

impl ScaleEncoder {
    pub fn init(
        params: &mut ParamSet,
        cfg: &ModelConfig,
        scale: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = format!("enc{scale}");
        let k = cfg.kernel_size;
        let c_in = if scale == 1 { 3 } else { cfg.channels };
        let head = ConvParams::init(
            params,
            &format!("{name}.head"),
            k,
            c_in,
            cfg.channels,
            1.0,
            rng,
        );
        let blocks = (0..cfg.res_blocks)
            .map(|i| ResBlock::init(params, &format!("{name}.res{i}"), cfg.channels, k, rng))
            .collect();
        let latent = ConvParams::init(
            params,
            &format!("{name}.latent"),
            k,
            cfg.channels,
            cfg.latent_channels,
            1.0,
            rng,
        );
        let forward = (scale < cfg.num_scales).then(|| {
            ConvParams::init(
                params,
                &format!("{name}.forward"),
                k,
                cfg.channels,
                cfg.channels,
                1.0,
                rng,
            )
        });
        ScaleEncoder {
            scale,
            head,
            blocks,
            latent,
            forward,
        }
    }

    fn convs(&self) -> Vec<&ConvParams> {
        let mut v = vec![&self.head];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
        }
        v.push(&self.latent);
        v.extend(self.forward.iter());
        v
    }
}

impl ScaleDecoder {
    pub fn init(
        params: &mut ParamSet,
        cfg: &ModelConfig,
        scale: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = format!("dec{scale}");
        let k = cfg.kernel_size;
        let c_in = if scale == cfg.num_scales {
            cfg.latent_channels
        } else {
            cfg.latent_channels + cfg.channels
        };
        let input = ConvParams::init(
            params,
            &format!("{name}.input"),
            k,
            c_in,
            cfg.channels,
            1.0,
            rng,
        );
        let blocks = (0..cfg.res_blocks)
            .map(|i| ResBlock::init(params, &format!("{name}.res{i}"), cfg.channels, k, rng))
            .collect();
        let upsample = ConvParams::init(
            params,
            &format!("{name}.up"),
            2,
            cfg.channels,
            cfg.channels,
            1.0,
            rng,
        );
        let head = ConvParams::init(
            params,
            &format!("{name}.head"),
            k,
            cfg.channels,
            cfg.decoder_head_width(scale),
            1.0,
            rng,
        );
        let forward = (scale > 1).then(|| {
            ConvParams::init(
                params,
                &format!("{name}.forward"),
                k,
                cfg.channels,
                cfg.channels,
                1.0,
                rng,
            )
        });
        ScaleDecoder {
            scale,
            input,
            blocks,
            upsample,
            head,
            forward,
        }
    }

    fn convs(&self) -> Vec<&ConvParams> {
        let mut v = vec![&self.input];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
        }
        v.push(&self.upsample);
        v.push(&self.head);
        v.extend(self.forward.iter());
        v
    }
}

/// Runs encoder `scale` on `input` (rows at level `scale - 1`). Returns the
/// latent pre-activation and, except at the coarsest scale, the forward
/// feature; both live on level `scale`.
pub fn run_encoder(
    g: &mut Graph<'_>,
    enc: &ScaleEncoder,
    input: NodeId,
    maps: &PyramidMaps,
) -> Result<(NodeId, Option<NodeId>)> {
    let n = enc.scale;
    if g.shape(input).0 != maps.level_len(n - 1) {
        return Err(Error::ShapeMismatch(format!(
            "encoder {n} input has {} rows, level {} has {}",
            g.shape(input).0,
            n - 1,
            maps.level_len(n - 1)
        )));
    }
    let h = sparse_conv(g, input, &enc.head, maps.conv(n - 1))?;
    let mut h = max_pool2(g, h, maps.pool(n), maps.level_len(n))?;
    for block in &enc.blocks {
        h = block.forward(g, h, maps.conv(n))?;
    }
    let latent = sparse_conv(g, h, &enc.latent, maps.conv(n))?;
    let forward = match &enc.forward {
        Some(p) => Some(sparse_conv(g, h, p, maps.conv(n))?),
        None => None,
    };
    Ok((latent, forward))
}

/// Runs decoder `scale` on the dequantized latent `L^n` (level n) and the
/// summarization feature `z^{n+1}` (level n, absent at the coarsest scale).
/// Returns the mixture parameters and, for scale ≥ 2, `z^n`; both live on
/// level `scale - 1`.
pub fn run_decoder(
    g: &mut Graph<'_>,
    dec: &ScaleDecoder,
    latent: NodeId,
    summary: Option<NodeId>,
    maps: &PyramidMaps,
) -> Result<(NodeId, Option<NodeId>)> {
    let n = dec.scale;
    let rows = maps.level_len(n);
    if g.shape(latent).0 != rows {
        return Err(Error::ShapeMismatch(format!(
            "decoder {n} latent has {} rows, level {n} has {rows}",
            g.shape(latent).0
        )));
    }
    let x = match summary {
        Some(z) => g.concat_cols(latent, z)?,
        None => latent,
    };
    let mut h = sparse_conv(g, x, &dec.input, maps.conv(n))?;
    for block in &dec.blocks {
        h = block.forward(g, h, maps.conv(n))?;
    }
    let up = sparse_transpose_conv(g, h, &dec.upsample, maps.up(n))?;
    let up = g.relu(up);
    let params = sparse_conv(g, up, &dec.head, maps.conv(n - 1))?;
    let z = match &dec.forward {
        Some(p) => Some(sparse_conv(g, up, p, maps.conv(n - 1))?),
        None => None,
    };
    Ok((params, z))
}

/// All encoders and decoders of the stack, in scale order 1..=num_scales.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    pub encoders: Vec<ScaleEncoder>,
    pub decoders: Vec<ScaleDecoder>,
}

impl Network {
    /// Creates parameters in a fixed order: encoders 1..S, then decoders 1..S.
    pub fn init(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoders = (1..=cfg.num_scales)
            .map(|n| ScaleEncoder::init(params, cfg, n, rng))
            .collect();
        let decoders = (1..=cfg.num_scales)
            .map(|n| ScaleDecoder::init(params, cfg, n, rng))
            .collect();
        Network { encoders, decoders }
    }

    pub fn encoder(&self, scale: usize) -> &ScaleEncoder {
        &self.encoders[scale - 1]
    }

    pub fn decoder(&self, scale: usize) -> &ScaleDecoder {
        &self.decoders[scale - 1]
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        for c in self.encoders.iter().flat_map(ScaleEncoder::convs) {
            c.check(params)?;
        }
        for c in self.decoders.iter().flat_map(ScaleDecoder::convs) {
            c.check(params)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{build_pyramid, Coord3};
    use rand::SeedableRng;

    fn set(coords: &[(i32, i32, i32)], stride: i32) -> CoordSet {
        CoordSet::new(
            coords
                .iter()
                .map(|&(x, y, z)| Coord3::new(x, y, z))
                .collect(),
            stride,
        )
        .unwrap()
    }

    #[test]
    fn kernel_map_single_point() {
        let s = set(&[(0, 0, 0)], 1);
        let m = build_kernel_map(&s, &s, 3, 1);
        assert_eq!(m.num_pairs(), 1);
        let center = m.offsets().iter().position(|o| *o == [0, 0, 0]).unwrap();
        assert_eq!(m.pairs(center), (&[0usize][..], &[0usize][..]));
    }

    #[test]
    fn kernel_map_two_neighbours() {
        let s = set(&[(0, 0, 0), (1, 0, 0)], 1);
        let m = build_kernel_map(&s, &s, 3, 1);
        assert_eq!(m.num_pairs(), 4);
        let at = |d: [i32; 3]| {
            let o = m.offsets().iter().position(|x| *x == d).unwrap();
            m.pairs(o).0.len()
        };
        assert_eq!(at([0, 0, 0]), 2);
        assert_eq!(at([1, 0, 0]), 1);
        assert_eq!(at([-1, 0, 0]), 1);
    }

    #[test]
    fn kernel_map_disjoint() {
        let a = set(&[(0, 0, 0)], 1);
        let b = set(&[(10, 0, 0)], 1);
        assert_eq!(build_kernel_map(&a, &b, 3, 1).num_pairs(), 0);
    }

    #[test]
    fn transpose_map_children() {
        let parents = set(&[(0, 0, 0)], 2);
        let kids: Vec<(i32, i32, i32)> = kernel_offsets(2)
            .iter()
            .map(|o| (o[0], o[1], o[2]))
            .collect();
        let kids = set(&kids, 1);
        let m = build_transpose_map(&parents, &kids);
        assert_eq!(m.num_pairs(), 8);
        for o in 0..8 {
            assert_eq!(m.pairs(o).0, &[0]);
        }
    }

    #[test]
    fn single_point_pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            channels: 8,
            res_blocks: 1,
            mixtures: 2,
            ..ModelConfig::default()
        };
        let mut params = ParamSet::new();
        let net = Network::init(&mut params, &cfg, &mut rng);
        net.check(&params).unwrap();
        let pyr = build_pyramid(&[Coord3::new(5, 5, 5)]).unwrap();
        let maps = PyramidMaps::build(&pyr, 3).unwrap();
        let mut g = Graph::new(&params);
        let x = g.input(Matrix::from_rows(&[vec![0.1, -0.2, 0.3]]));
        let (l, f) = run_encoder(&mut g, net.encoder(1), x, &maps).unwrap();
        assert_eq!(g.shape(l), (1, 5));
        assert_eq!(g.shape(f.unwrap()), (1, 8));
        let (p, z) = run_decoder(&mut g, net.decoder(3), l, None, &maps).unwrap();
        assert_eq!(g.shape(p), (1, cfg.latent_param_width()));
        assert_eq!(g.shape(z.unwrap()), (1, 8));
    }

    #[test]
    fn zero_weight_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let block = ResBlock::init(&mut params, "r", 4, 3, &mut rng);
        *params.value_mut(block.conv1.weight) = Matrix::zeros(27 * 4, 4);
        *params.value_mut(block.conv2.weight) = Matrix::zeros(27 * 4, 4);
        let s = set(&[(0, 0, 0), (1, 0, 0), (3, 3, 3)], 1);
        let map = Arc::new(build_kernel_map(&s, &s, 3, 1));
        let mut g = Graph::new(&params);
        let xm = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let x = g.input(xm.clone());
        let y = block.forward(&mut g, x, &map).unwrap();
        assert_eq!(g.value(y), &xm);
    }
}
