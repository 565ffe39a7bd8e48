//! Reference computations used by the integration tests. Everything here is
//! written from first principles and shares no code with the library apart
//! from plain data types.
#![allow(dead_code)]

use mnet::matrix::Matrix;
use mnet::pc_io::PointCloud;
use mnet::tensor::Coord3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Occupied cells of an `n³` volume, each present with probability `density`
/// (never empty).
pub fn random_occupancy(rng: &mut ChaCha8Rng, n: i32, density: f64) -> Vec<Coord3> {
    let mut out = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if rng.gen::<f64>() < density {
                    out.push(Coord3::new(x, y, z));
                }
            }
        }
    }
    if out.is_empty() {
        out.push(Coord3::new(
            rng.gen_range(0..n),
            rng.gen_range(0..n),
            rng.gen_range(0..n),
        ));
    }
    out
}

/// Dense `n³ × c` volume indexed as `[x][y][z][channel]`.
pub struct Volume {
    pub n: usize,
    pub c: usize,
    pub v: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl Volume {
    pub fn zeros(n: usize, c: usize) -> Self {
        Volume {
            n,
            c,
            v: vec![0.0; n * n * n * c],
            occupied: vec![false; n * n * n],
        }
    }

    fn cell(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        let n = self.n as i64;
        if (0..n).contains(&x) && (0..n).contains(&y) && (0..n).contains(&z) {
            Some(((x * n + y) * n + z) as usize)
        } else {
            None
        }
    }

    /// Places row `r` of `feats` at `coords[r] / stride`.
    pub fn from_points(n: usize, coords: &[Coord3], feats: &Matrix, stride: i32) -> Self {
        let mut vol = Volume::zeros(n, feats.cols());
        for (r, p) in coords.iter().enumerate() {
            let i = vol
                .cell(
                    (p.x / stride) as i64,
                    (p.y / stride) as i64,
                    (p.z / stride) as i64,
                )
                .unwrap();
            vol.occupied[i] = true;
            vol.v[i * vol.c..(i + 1) * vol.c].copy_from_slice(feats.row(r));
        }
        vol
    }

    pub fn at(&self, x: i64, y: i64, z: i64, ch: usize) -> f64 {
        self.cell(x, y, z).map_or(0.0, |i| self.v[i * self.c + ch])
    }

    pub fn is_occupied(&self, x: i64, y: i64, z: i64) -> bool {
        self.cell(x, y, z).is_some_and(|i| self.occupied[i])
    }
}

/// Zero-padded dense cross-correlation of the whole volume with a `k³`
/// kernel, then read out at `coords`. Tap `(a, b, c)` for `a, b, c ∈ [0, k)`
/// looks at displacement `(a, b, c) - ⌊(k-1)/2⌋` and owns weight rows
/// `((a·k + b)·k + c)·c_in ..`.
pub fn dense_conv(
    n: usize,
    coords: &[Coord3],
    x: &Matrix,
    weight: &Matrix,
    bias: &Matrix,
    k: usize,
) -> Matrix {
    let vol = Volume::from_points(n, coords, x, 1);
    let (c_in, c_out) = (x.cols(), weight.cols());
    let shift = ((k - 1) / 2) as i64;
    let mut full = vec![0.0; n * n * n * c_out];
    for px in 0..n as i64 {
        for py in 0..n as i64 {
            for pz in 0..n as i64 {
                let base = (((px * n as i64 + py) * n as i64 + pz) as usize) * c_out;
                for j in 0..c_out {
                    full[base + j] = bias[(0, j)];
                }
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..k {
                            let tap = (a * k + b) * k + c;
                            let (qx, qy, qz) = (
                                px + a as i64 - shift,
                                py + b as i64 - shift,
                                pz + c as i64 - shift,
                            );
                            for ci in 0..c_in {
                                let v = vol.at(qx, qy, qz, ci);
                                if v == 0.0 {
                                    continue;
                                }
                                for j in 0..c_out {
                                    full[base + j] += v * weight[(tap * c_in + ci, j)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    read_out(&full, n, c_out, coords)
}

/// Dense stride-2 transpose convolution with a 2³ kernel: every coarse cell
/// paints its 2³ children, read out at the fine `targets`. `parents` are
/// coordinates at stride 2.
pub fn dense_transpose_conv(
    n: usize,
    parents: &[Coord3],
    x: &Matrix,
    targets: &[Coord3],
    weight: &Matrix,
    bias: &Matrix,
) -> Matrix {
    let coarse = Volume::from_points(n / 2, parents, x, 2);
    let (c_in, c_out) = (x.cols(), weight.cols());
    let mut full = vec![0.0; n * n * n * c_out];
    for i in 0..n * n * n {
        for j in 0..c_out {
            full[i * c_out + j] = bias[(0, j)];
        }
    }
    let h = n as i64 / 2;
    for px in 0..h {
        for py in 0..h {
            for pz in 0..h {
                for a in 0..2i64 {
                    for b in 0..2i64 {
                        for c in 0..2i64 {
                            let tap = ((a * 2 + b) * 2 + c) as usize;
                            let (fx, fy, fz) = (2 * px + a, 2 * py + b, 2 * pz + c);
                            let base = (((fx * n as i64 + fy) * n as i64 + fz) as usize) * c_out;
                            for ci in 0..c_in {
                                let v = coarse.at(px, py, pz, ci);
                                for j in 0..c_out {
                                    full[base + j] += v * weight[(tap * c_in + ci, j)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    read_out(&full, n, c_out, targets)
}

/// Channel-wise max over the occupied cells of each 2³ cell group, read out
/// at `parents` (stride-2 coordinates).
pub fn dense_max_pool(n: usize, coords: &[Coord3], x: &Matrix, parents: &[Coord3]) -> Matrix {
    let vol = Volume::from_points(n, coords, x, 1);
    let mut out = Matrix::zeros(parents.len(), x.cols());
    for (r, p) in parents.iter().enumerate() {
        for ch in 0..x.cols() {
            let mut best = f64::NEG_INFINITY;
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let (qx, qy, qz) = ((p.x + a) as i64, (p.y + b) as i64, (p.z + c) as i64);
                        if vol.is_occupied(qx, qy, qz) {
                            best = best.max(vol.at(qx, qy, qz, ch));
                        }
                    }
                }
            }
            out[(r, ch)] = best;
        }
    }
    out
}

fn read_out(full: &[f64], n: usize, c: usize, at: &[Coord3]) -> Matrix {
    let mut out = Matrix::zeros(at.len(), c);
    for (r, p) in at.iter().enumerate() {
        let base = ((p.x as usize * n + p.y as usize) * n + p.z as usize) * c;
        for j in 0..c {
            out[(r, j)] = full[base + j];
        }
    }
    out
}

/// Stride-2 parents (floor division), sorted and unique.
pub fn parents_of(coords: &[Coord3]) -> Vec<Coord3> {
    let mut p: Vec<Coord3> = coords
        .iter()
        .map(|c| {
            Coord3::new(
                c.x.div_euclid(2) * 2,
                c.y.div_euclid(2) * 2,
                c.z.div_euclid(2) * 2,
            )
        })
        .collect();
    p.sort();
    p.dedup();
    p
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mixture-of-logistics mass of each of `m` bins centred on an even grid over
/// [-1, 1]; the first and last bins take the open tails.
pub fn naive_dlm_pmf(weights: &[f64], means: &[f64], scales: &[f64], m: usize) -> Vec<f64> {
    let step = 2.0 / (m - 1) as f64;
    (0..m)
        .map(|i| {
            let c = -1.0 + i as f64 * step;
            weights
                .iter()
                .zip(means)
                .zip(scales)
                .map(|((w, mu), s)| {
                    let hi = if i + 1 == m {
                        1.0
                    } else {
                        logistic((c + step / 2.0 - mu) / s)
                    };
                    let lo = if i == 0 {
                        0.0
                    } else {
                        logistic((c - step / 2.0 - mu) / s)
                    };
                    w * (hi - lo)
                })
                .sum()
        })
        .collect()
}

/// Shannon entropy in bits.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum()
}

/// Ideal code length of `symbols` under per-symbol integer frequency tables.
pub fn table_bits(cdfs: &[Vec<u32>], symbols: &[usize]) -> f64 {
    cdfs.iter()
        .zip(symbols)
        .map(|(c, &s)| {
            let total = *c.last().unwrap() as f64;
            -(((c[s + 1] - c[s]) as f64) / total).log2()
        })
        .sum()
}

/// Surface patch with piecewise base colors, smooth shading, texture and
/// sensor-like noise, in world units; voxelizes to a single 64³ block at
/// 6 bits of depth.
pub fn textured_surface(seed: u64) -> PointCloud {
    let mut rng = rng(seed);
    let height = |x: f64, y: f64| {
        30.0 + 9.0 * (x / 10.0).sin() * (y / 13.0).cos() + 4.0 * ((x + y) / 7.0).sin()
    };
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for x in 0..64 {
        for y in 0..64 {
            let (fx, fy) = (x as f64, y as f64);
            let top = height(fx, fy).floor() as i32;
            // Extend downwards so neighbouring columns stay connected.
            let low = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
                .iter()
                .map(|(dx, dy)| height(fx + dx, fy + dy).floor() as i32)
                .min()
                .unwrap()
                .clamp(0, top);
            for z in low..=top {
                let base = if (fx - 20.0).hypot(fy - 40.0) < 14.0 {
                    [196.0, 150.0, 120.0]
                } else if fy < 20.0 {
                    [40.0, 60.0, 110.0]
                } else {
                    [150.0, 140.0, 120.0]
                };
                let shade = 0.75 + 0.25 * (fx / 6.0).cos() * (fy / 9.0).sin();
                let texture =
                    12.0 * (fx * 1.7 + fy * 0.9).sin() * (fy * 1.3 - z as f64 / 3.2).cos();
                let mut c = [0u8; 3];
                for ch in 0..3 {
                    let noise: f64 = rng.gen_range(-4.0..4.0);
                    c[ch] = (base[ch] * shade + texture + noise)
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
                positions.push([fx + 0.3, fy + 0.3, z as f64 + 0.3]);
                colors.push(c);
            }
        }
    }
    PointCloud { positions, colors }
}
