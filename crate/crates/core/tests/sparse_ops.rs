mod common;

use std::sync::Arc;

use common::*;
use mnet::autodiff::{Graph, ParamSet};
use mnet::nn::{build_kernel_map, build_transpose_map, pool_segments, PyramidMaps};
use mnet::tensor::{build_pyramid, Coord3, CoordSet};
use proptest::prelude::*;

fn conv_error(seed: u64, n: i32, density: f64, k: usize) -> f64 {
    let mut rng = rng(seed);
    let coords = random_occupancy(&mut rng, n, density);
    let set = CoordSet::new(coords.clone(), 1).unwrap();
    let x = random_matrix(&mut rng, coords.len(), 2);
    let w = random_matrix(&mut rng, k * k * k * 2, 3);
    let b = random_matrix(&mut rng, 1, 3);
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g
        .sparse_conv(xn, wn, bn, Arc::new(build_kernel_map(&set, &set, k, 1)))
        .unwrap();
    max_abs_diff(g.value(y), &dense_conv(n as usize, &coords, &x, &w, &b, k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_dense_for_any_kernel(seed in any::<u64>(), k in 1usize..=5, density in 0.02f64..0.9) {
        prop_assert!(conv_error(seed, 7, density, k) <= 1e-9);
    }

    #[test]
    fn transpose_and_pool_match_dense(seed in any::<u64>(), density in 0.02f64..0.9) {
        let mut rng = rng(seed);
        let coords = random_occupancy(&mut rng, 8, density);
        let set = CoordSet::new(coords.clone(), 1).unwrap();
        let parents = parents_of(&coords);
        let pset = CoordSet::new(parents.clone(), 2).unwrap();
        let params = ParamSet::new();

        let xp = random_matrix(&mut rng, parents.len(), 3);
        let w = random_matrix(&mut rng, 24, 2);
        let b = random_matrix(&mut rng, 1, 2);
        let mut g = Graph::new(&params);
        let (xn, wn, bn) = (g.input(xp.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.sparse_conv(xn, wn, bn, Arc::new(build_transpose_map(&pset, &set))).unwrap();
        prop_assert!(max_abs_diff(g.value(y), &dense_transpose_conv(8, &parents, &xp, &coords, &w, &b)) <= 1e-9);

        let x = random_matrix(&mut rng, coords.len(), 3);
        let mut g = Graph::new(&params);
        let xn = g.input(x.clone());
        let y = g.segment_max(xn, &pool_segments(&set, &pset).unwrap(), parents.len()).unwrap();
        prop_assert!(max_abs_diff(g.value(y), &dense_max_pool(8, &coords, &x, &parents)) <= 1e-9);
    }
}

#[test]
fn isolated_voxel_sees_only_the_centre_tap() {
    let coords = vec![Coord3::new(3, 3, 3)];
    let set = CoordSet::new(coords, 1).unwrap();
    let map = build_kernel_map(&set, &set, 3, 1);
    assert_eq!(map.num_pairs(), 1);
    let centre = map.offsets().iter().position(|o| *o == [0, 0, 0]).unwrap();
    assert_eq!(centre, 13);
    assert_eq!(map.pairs(centre), (&[0usize][..], &[0usize][..]));
}

#[test]
fn full_cube_has_every_neighbour_pair() {
    let mut coords = Vec::new();
    for x in 0..4 {
        for y in 0..4 {
            for z in 0..4 {
                coords.push(Coord3::new(x, y, z));
            }
        }
    }
    let set = CoordSet::new(coords, 1).unwrap();
    let map = build_kernel_map(&set, &set, 3, 1);
    // Per axis, 3 + 4 + 3 positions keep p + d inside a 4-wide line.
    assert_eq!(map.num_pairs(), 10 * 10 * 10);
}

#[test]
fn pyramid_levels_shrink_by_floor_division() {
    let geometry: Vec<Coord3> = [[0, 0, 0], [1, 1, 1], [2, 0, 0], [5, 5, 5], [7, 6, 5]]
        .iter()
        .map(|&c| Coord3::from(c))
        .collect();
    let p = build_pyramid(&geometry).unwrap();
    assert_eq!(p.counts(), vec![5, 4, 2, 1]);
    let expected: Vec<Coord3> = [[0, 0, 0], [2, 0, 0], [4, 4, 4], [6, 6, 4]]
        .iter()
        .map(|&c| Coord3::from(c))
        .collect();
    assert_eq!(p.level(1).coords(), &expected[..]);
    assert_eq!(p.level(3).coords(), &[Coord3::new(0, 0, 0)]);
    let maps = PyramidMaps::build(&p, 3).unwrap();
    for level in 0..p.num_levels() {
        assert_eq!(maps.level_len(level), p.level(level).len());
    }
}
