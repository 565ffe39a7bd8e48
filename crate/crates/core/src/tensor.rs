//! Sparse voxel tensors with canonical (x, y, z) ordering and the
//! multiscale coordinate pyramid derived from geometry alone.
//!
//! Coordinates keep their absolute grid position at every scale: a level-n
//! coordinate is a multiple of `2^n`, never re-indexed.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Number of coded scales used by the default model (levels 0..=3).
pub const DEFAULT_NUM_SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Coord3 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord3 {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Coord3 { x, y, z }
    }

    #[inline]
    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Coord3::new(self.x + dx, self.y + dy, self.z + dz)
    }

    /// Parent coordinate at `2 * stride` using floor division.
    #[inline]
    pub fn parent(self, stride: i32) -> Self {
        let s = 2 * stride;
        Coord3::new(
            self.x.div_euclid(s) * s,
            self.y.div_euclid(s) * s,
            self.z.div_euclid(s) * s,
        )
    }

    #[inline]
    fn aligned_to(self, stride: i32) -> bool {
        self.x.rem_euclid(stride) == 0
            && self.y.rem_euclid(stride) == 0
            && self.z.rem_euclid(stride) == 0
    }
}

impl From<[i32; 3]> for Coord3 {
    fn from(v: [i32; 3]) -> Self {
        Coord3::new(v[0], v[1], v[2])
    }
}

/// Multiplicative hash for packed coordinates; SipHash dominates kernel-map
/// construction otherwise.
#[derive(Default)]
pub struct CoordHasher(u64);

impl Hasher for CoordHasher {
    #[inline]
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    #[inline]
    fn write_i32(&mut self, v: i32) {
        self.write_u64(v as u32 as u64);
    }

    #[inline]
    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(21) ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

/// Map from coordinate to row index, bijective with a coordinate list.
#[derive(Debug, Clone, Default)]
pub struct CoordIndex {
    map: HashMap<Coord3, usize, BuildHasherDefault<CoordHasher>>,
}

impl CoordIndex {
    pub fn build(coords: &[Coord3]) -> Self {
        let mut map = HashMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (i, &c) in coords.iter().enumerate() {
            map.insert(c, i);
        }
        CoordIndex { map }
    }

    #[inline]
    pub fn get(&self, c: &Coord3) -> Option<usize> {
        self.map.get(c).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Sorted unique coordinates at a common stride, with their index.
#[derive(Debug, Clone)]
pub struct CoordSet {
    coords: Vec<Coord3>,
    index: CoordIndex,
    stride: i32,
}

impl CoordSet {
    /// Sorts and validates `coords`; duplicates and misaligned entries are errors.
    pub fn new(mut coords: Vec<Coord3>, stride: i32) -> Result<Self> {
        check_stride(stride)?;
        coords.sort_unstable();
        for w in coords.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateCoordinate(w[0]));
            }
        }
        if let Some(&c) = coords.iter().find(|c| !c.aligned_to(stride)) {
            return Err(Error::StrideViolation { coord: c, stride });
        }
        Ok(Self::from_sorted_unchecked(coords, stride))
    }

    fn from_sorted_unchecked(coords: Vec<Coord3>, stride: i32) -> Self {
        let index = CoordIndex::build(&coords);
        CoordSet {
            coords,
            index,
            stride,
        }
    }

    pub fn coords(&self) -> &[Coord3] {
        &self.coords
    }

    pub fn index(&self) -> &CoordIndex {
        &self.index
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn row_of(&self, c: &Coord3) -> Option<usize> {
        self.index.get(c)
    }

    /// The stride-doubled parent set.
    pub fn downsample(&self) -> CoordSet {
        CoordSet::from_sorted_unchecked(
            downsample_coords(&self.coords, self.stride),
            2 * self.stride,
        )
    }
}

fn check_stride(stride: i32) -> Result<()> {
    if stride <= 0 || (stride & (stride - 1)) != 0 {
        return Err(Error::InvalidConfig(format!(
            "stride {stride} is not a positive power of two"
        )));
    }
    Ok(())
}

/// Coordinates in canonical order with one feature row per coordinate.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    coords: CoordSet,
    features: Matrix,
}

impl SparseTensor {
    pub fn coords(&self) -> &[Coord3] {
        self.coords.coords()
    }

    pub fn coord_set(&self) -> &CoordSet {
        &self.coords
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    pub fn index(&self) -> &CoordIndex {
        self.coords.index()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn into_parts(self) -> (CoordSet, Matrix) {
        (self.coords, self.features)
    }
}

/// Builds a tensor, sorting coordinates lexicographically and permuting
/// feature rows to match.
pub fn build_sparse_tensor(
    coords: Vec<Coord3>,
    features: Matrix,
    stride: i32,
) -> Result<SparseTensor> {
    if features.rows() != coords.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} coordinates",
            features.rows(),
            coords.len()
        )));
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_unstable_by_key(|&i| coords[i]);
    let sorted: Vec<Coord3> = order.iter().map(|&i| coords[i]).collect();
    let mut permuted = Matrix::zeros(features.rows(), features.cols());
    for (dst, &src) in order.iter().enumerate() {
        permuted.row_mut(dst).copy_from_slice(features.row(src));
    }
    let coords = CoordSet::new(sorted, stride)?;
    Ok(SparseTensor {
        coords,
        features: permuted,
    })
}

/// Unique, sorted parents of `coords` at stride `2 * stride`.
pub fn downsample_coords(coords: &[Coord3], stride: i32) -> Vec<Coord3> {
    let mut out: Vec<Coord3> = coords.iter().map(|c| c.parent(stride)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Coordinate sets for levels `0..=num_scales`; level `n` has stride `2^n`.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    levels: Vec<CoordSet>,
}

impl ScalePyramid {
    pub fn level(&self, n: usize) -> &CoordSet {
        &self.levels[n]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of downsampling steps, i.e. coded latent scales.
    pub fn num_scales(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(CoordSet::len).collect()
    }
}

pub fn build_pyramid(geometry: &[Coord3]) -> Result<ScalePyramid> {
    build_pyramid_with_scales(geometry, DEFAULT_NUM_SCALES)
}

pub fn build_pyramid_with_scales(geometry: &[Coord3], num_scales: usize) -> Result<ScalePyramid> {
    if geometry.is_empty() {
        return Err(Error::EmptyGeometry);
    }
    let base = CoordSet::new(geometry.to_vec(), 1)?;
    Ok(pyramid_from_base(base, num_scales))
}

pub(crate) fn pyramid_from_base(base: CoordSet, num_scales: usize) -> ScalePyramid {
    let mut levels = Vec::with_capacity(num_scales + 1);
    levels.push(base);
    for n in 1..=num_scales {
        let next = levels[n - 1].downsample();
        levels.push(next);
    }
    ScalePyramid { levels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x: i32, y: i32, z: i32) -> Coord3 {
        Coord3::new(x, y, z)
    }

    #[test]
    fn build_sorts_and_permutes() {
        let t = build_sparse_tensor(
            vec![c(2, 0, 0), c(0, 0, 0)],
            Matrix::from_rows(&[vec![1.0], vec![2.0]]),
            1,
        )
        .unwrap();
        assert_eq!(t.coords(), &[c(0, 0, 0), c(2, 0, 0)]);
        assert_eq!(t.features(), &Matrix::from_rows(&[vec![2.0], vec![1.0]]));
        assert_eq!(t.index().get(&c(2, 0, 0)), Some(1));
    }

    #[test]
    fn build_rejects_duplicates_and_misalignment() {
        let dup = build_sparse_tensor(vec![c(0, 0, 0), c(0, 0, 0)], Matrix::zeros(2, 1), 1);
        assert!(matches!(dup, Err(Error::DuplicateCoordinate(_))));
        let bad = build_sparse_tensor(vec![c(1, 0, 0)], Matrix::zeros(1, 1), 2);
        assert!(matches!(bad, Err(Error::StrideViolation { .. })));
        let rows = build_sparse_tensor(vec![c(0, 0, 0)], Matrix::zeros(2, 1), 1);
        assert!(matches!(rows, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(
            downsample_coords(&[c(0, 0, 0), c(1, 1, 1)], 1),
            vec![c(0, 0, 0)]
        );
        assert_eq!(
            downsample_coords(&[c(0, 0, 0), c(2, 0, 0)], 1),
            vec![c(0, 0, 0), c(2, 0, 0)]
        );
        assert_eq!(downsample_coords(&[c(-1, -3, 0)], 1), vec![c(-2, -4, 0)]);
    }

    #[test]
    fn downsample_dense_grid() {
        let mut grid = Vec::new();
        for x in 0..64 {
            for y in 0..64 {
                for z in 0..64 {
                    grid.push(c(x, y, z));
                }
            }
        }
        let down = downsample_coords(&grid, 1);
        // Oracle: every even triple below 64.
        let mut expected = Vec::new();
        for x in (0..64).step_by(2) {
            for y in (0..64).step_by(2) {
                for z in (0..64).step_by(2) {
                    expected.push(c(x, y, z));
                }
            }
        }
        assert_eq!(down.len(), 32768);
        assert_eq!(down, expected);
    }

    #[test]
    fn pyramid_examples() {
        let p = build_pyramid(&[c(5, 5, 5)]).unwrap();
        assert_eq!(p.level(0).coords(), &[c(5, 5, 5)]);
        assert_eq!(p.level(1).coords(), &[c(4, 4, 4)]);
        assert_eq!(p.level(2).coords(), &[c(4, 4, 4)]);
        assert_eq!(p.level(3).coords(), &[c(0, 0, 0)]);
        let strides: Vec<i32> = (0..4).map(|n| p.level(n).stride()).collect();
        assert_eq!(strides, vec![1, 2, 4, 8]);

        assert!(matches!(build_pyramid(&[]), Err(Error::EmptyGeometry)));

        let mut cube = Vec::new();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    cube.push(c(x, y, z));
                }
            }
        }
        assert_eq!(build_pyramid(&cube).unwrap().counts(), vec![8, 1, 1, 1]);
    }

    fn coord_strategy() -> impl Strategy<Value = Vec<Coord3>> {
        proptest::collection::hash_set((-40i32..40, -40i32..40, -40i32..40), 1..200)
            .prop_map(|s| s.into_iter().map(|(x, y, z)| c(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn order_independent(coords in coord_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let feats: Vec<Vec<f64>> = coords.iter().map(|p| vec![p.x as f64, (p.y * 3 + p.z) as f64]).collect();
            let a = build_sparse_tensor(coords.clone(), Matrix::from_rows(&feats), 1).unwrap();
            let mut order: Vec<usize> = (0..coords.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<Coord3> = order.iter().map(|&i| coords[i]).collect();
            let sfeats: Vec<Vec<f64>> = order.iter().map(|&i| feats[i].clone()).collect();
            let b = build_sparse_tensor(shuffled, Matrix::from_rows(&sfeats), 1).unwrap();
            prop_assert_eq!(a.coords(), b.coords());
            prop_assert_eq!(a.features(), b.features());
        }

        #[test]
        fn pyramid_levels_nest(coords in coord_strategy()) {
            let p = build_pyramid(&coords).unwrap();
            let twice = downsample_coords(&downsample_coords(&coords, 1), 2);
            prop_assert_eq!(p.level(2).coords(), &twice[..]);
            for n in 1..p.num_levels() {
                let prev = p.level(n - 1).len();
                let cur = p.level(n).len();
                prop_assert!(cur <= prev);
                prop_assert!(cur >= prev.div_ceil(8));
            }
        }
    }
}
