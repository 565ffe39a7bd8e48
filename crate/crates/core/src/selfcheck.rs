//! Dense reference implementations of the sparse operators and a quick
//! invariant suite, run by `mnet self-check`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamSet};
use crate::codec::{decode, encode, CodecOptions};
use crate::likelihood::{build_cdf_table, mixture_pmf_raw, SymbolGrid, CDF_PRECISION_BITS};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::nn::{
    build_kernel_map, build_transpose_map, kernel_offsets, pool_segments, ModelConfig,
};
use crate::range_coder::{RangeDecoder, RangeEncoder};
use crate::tensor::{Coord3, CoordSet};

/// Dense feature volume of edge `n`; unoccupied cells hold zeros.
struct Dense {
    n: i32,
    c: usize,
    data: Vec<f64>,
}

impl Dense {
    fn new(n: i32, c: usize) -> Self {
        Dense {
            n,
            c,
            data: vec![0.0; (n * n * n) as usize * c],
        }
    }

    fn cell(&self, x: i32, y: i32, z: i32) -> Option<usize> {
        let n = self.n;
        if x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n {
            return None;
        }
        Some((((x * n + y) * n + z) as usize) * self.c)
    }

    fn scatter(n: i32, coords: &[Coord3], feats: &Matrix, stride: i32) -> Self {
        let mut d = Dense::new(n, feats.cols());
        for (r, p) in coords.iter().enumerate() {
            let i = d
                .cell(p.x / stride, p.y / stride, p.z / stride)
                .expect("coordinate inside volume");
            d.data[i..i + d.c].copy_from_slice(feats.row(r));
        }
        d
    }
}

/// Zero-padded dense 3D convolution evaluated at `coords` (stride 1, all
/// inside `[0, n)³`). `weight` stacks one `c_in × c_out` block per offset.
pub fn dense_conv(
    n: i32,
    coords: &[Coord3],
    x: &Matrix,
    weight: &Matrix,
    bias: &[f64],
    k: usize,
) -> Matrix {
    let vol = Dense::scatter(n, coords, x, 1);
    let c_in = x.cols();
    let c_out = bias.len();
    let mut out = Matrix::zeros(coords.len(), c_out);
    for (r, p) in coords.iter().enumerate() {
        for (j, b) in bias.iter().enumerate() {
            out[(r, j)] = *b;
        }
        for (o, d) in kernel_offsets(k).iter().enumerate() {
            let Some(i) = vol.cell(p.x + d[0], p.y + d[1], p.z + d[2]) else {
                continue;
            };
            for a in 0..c_in {
                let v = vol.data[i + a];
                for j in 0..c_out {
                    out[(r, j)] += v * weight[(o * c_in + a, j)];
                }
            }
        }
    }
    out
}

/// Dense stride-2 transpose convolution with a 2³ kernel, evaluated at the
/// fine coordinates `targets`. `parents` are at stride 2.
pub fn dense_transpose_conv(
    n: i32,
    parents: &[Coord3],
    x: &Matrix,
    targets: &[Coord3],
    weight: &Matrix,
    bias: &[f64],
) -> Matrix {
    let coarse = Dense::scatter(n / 2, parents, x, 2);
    let occupied: std::collections::HashSet<Coord3> = parents.iter().copied().collect();
    let c_in = x.cols();
    let mut out = Matrix::zeros(targets.len(), bias.len());
    for (r, t) in targets.iter().enumerate() {
        for (j, b) in bias.iter().enumerate() {
            out[(r, j)] = *b;
        }
        let (px, py, pz) = (t.x.div_euclid(2), t.y.div_euclid(2), t.z.div_euclid(2));
        if !occupied.contains(&Coord3::new(px * 2, py * 2, pz * 2)) {
            continue;
        }
        let o = (t.x.rem_euclid(2) * 4 + t.y.rem_euclid(2) * 2 + t.z.rem_euclid(2)) as usize;
        let i = coarse.cell(px, py, pz).expect("parent inside volume");
        for a in 0..c_in {
            for j in 0..bias.len() {
                out[(r, j)] += coarse.data[i + a] * weight[(o * c_in + a, j)];
            }
        }
    }
    out
}

/// Dense 2×2×2 max-pool over occupied cells, evaluated at `parents`.
pub fn dense_max_pool(n: i32, coords: &[Coord3], x: &Matrix, parents: &[Coord3]) -> Matrix {
    let vol = Dense::scatter(n, coords, x, 1);
    let mut occ = vec![false; (n * n * n) as usize];
    for p in coords {
        occ[vol.cell(p.x, p.y, p.z).unwrap() / vol.c] = true;
    }
    let mut out = Matrix::filled(parents.len(), x.cols(), f64::NEG_INFINITY);
    for (r, p) in parents.iter().enumerate() {
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let Some(i) = vol.cell(p.x + dx, p.y + dy, p.z + dz) else {
                        continue;
                    };
                    if !occ[i / vol.c] {
                        continue;
                    }
                    for a in 0..x.cols() {
                        out[(r, a)] = out[(r, a)].max(vol.data[i + a]);
                    }
                }
            }
        }
    }
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn random_occupancy(rng: &mut ChaCha8Rng, n: i32, density: f64) -> CoordSet {
    let mut coords = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if rng.gen_bool(density) {
                    coords.push(Coord3::new(x, y, z));
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push(Coord3::new(0, 0, 0));
    }
    CoordSet::new(coords, 1).expect("unique coordinates")
}

/// Max abs difference between sparse conv, transpose conv and max-pool and
/// their dense references on one random 8³ occupancy.
pub fn sparse_op_errors(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let density = rng.gen_range(0.05..0.9);
    let set = random_occupancy(&mut rng, n, density);
    let (c_in, c_out) = (3, 4);
    let x = random_matrix(&mut rng, set.len(), c_in);
    let params = ParamSet::new();

    let k = if rng.gen_bool(0.5) { 3 } else { 2 };
    let w = random_matrix(&mut rng, k * k * k * c_in, c_out);
    let b = random_matrix(&mut rng, 1, c_out);
    let map = Arc::new(build_kernel_map(&set, &set, k, 1));
    let mut g = Graph::new(&params);
    let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.sparse_conv(xn, wn, bn, map).expect("conv shapes");
    let conv_err = g
        .value(y)
        .max_abs_diff(&dense_conv(n, set.coords(), &x, &w, b.row(0), k));

    let parents = set.downsample();
    let xp = random_matrix(&mut rng, parents.len(), c_in);
    let wt = random_matrix(&mut rng, 8 * c_in, c_out);
    let tmap = Arc::new(build_transpose_map(&parents, &set));
    let mut g = Graph::new(&params);
    let (xn, wn, bn) = (g.input(xp.clone()), g.input(wt.clone()), g.input(b.clone()));
    let y = g.sparse_conv(xn, wn, bn, tmap).expect("transpose shapes");
    let oracle = dense_transpose_conv(n, parents.coords(), &xp, set.coords(), &wt, b.row(0));
    let tconv_err = g.value(y).max_abs_diff(&oracle);

    let segments = pool_segments(&set, &parents).expect("parents cover children");
    let mut g = Graph::new(&params);
    let xn = g.input(x.clone());
    let y = g
        .segment_max(xn, &segments, parents.len())
        .expect("pool shapes");
    let pool_err = g
        .value(y)
        .max_abs_diff(&dense_max_pool(n, set.coords(), &x, parents.coords()));

    [conv_err, tconv_err, pool_err]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail,
    }
}

/// Quick oracle and invariant checks; every entry should pass.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();

    let mut worst = [0.0f64; 3];
    for s in 0..5 {
        let e = sparse_op_errors(seed.wrapping_add(s));
        for i in 0..3 {
            worst[i] = worst[i].max(e[i]);
        }
    }
    for (i, name) in [
        "sparse conv vs dense",
        "transpose conv vs dense",
        "max-pool vs dense",
    ]
    .into_iter()
    .enumerate()
    {
        results.push(check(
            name,
            worst[i] <= 1e-9,
            format!("max error {:.3e}", worst[i]),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = SymbolGrid::rgb();
    let mut pmf = Vec::new();
    let mut worst_norm: f64 = 0.0;
    for _ in 0..100 {
        let logits = random_matrix(&mut rng, 1, 4);
        let means = random_matrix(&mut rng, 1, 4);
        let scales: Vec<f64> = (0..4).map(|_| rng.gen_range(-7.0..1.0)).collect();
        mixture_pmf_raw(logits.row(0), means.row(0), &scales, &grid, &mut pmf);
        worst_norm = worst_norm.max((pmf.iter().sum::<f64>() - 1.0).abs());
    }
    results.push(check(
        "mixture pmf normalization",
        worst_norm <= 1e-9,
        format!("max error {worst_norm:.3e}"),
    ));

    let mut tables = Vec::new();
    let mut symbols = Vec::new();
    for _ in 0..2000 {
        let m = rng.gen_range(2..64);
        let raw: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 1e-9).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        tables.push(build_cdf_table(&p, CDF_PRECISION_BITS).expect("valid pmf"));
        symbols.push(rng.gen_range(0..m));
    }
    let mut enc = RangeEncoder::new();
    for (s, t) in symbols.iter().zip(&tables) {
        enc.encode_symbol(*s, t).expect("valid symbol");
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes);
    let ok = symbols
        .iter()
        .zip(&tables)
        .all(|(s, t)| dec.decode_symbol(t).ok() == Some(*s));
    results.push(check(
        "range coder round trip",
        ok,
        format!("{} symbols, {} bytes", symbols.len(), bytes.len()),
    ));

    let cfg = ModelConfig {
        channels: 4,
        res_blocks: 1,
        mixtures: 2,
        ..ModelConfig::default()
    };
    let lossless = Model::random(cfg, seed).and_then(|model| {
        let set = random_occupancy(&mut rng, 8, 0.3);
        let colors: Vec<[u8; 3]> = (0..set.len())
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let opts = CodecOptions { trace_cdfs: true };
        let enc = encode(set.coords(), &colors, &model, opts)?;
        let dec = decode(set.coords(), &enc.to_bytes(), &model, opts)?;
        Ok(dec.colors == colors && dec.cdf_hash == enc.cdf_hash)
    });
    results.push(match lossless {
        Ok(ok) => check("codec lossless round trip", ok, "random 8³ block".into()),
        Err(e) => check("codec lossless round trip", false, e.to_string()),
    });
    results
}
