mod common;

use std::collections::HashMap;

use common::*;
use mnet::pc_io::{
    load_dataset, manifest_text, parse_manifest, partition_blocks, ply_bytes, read_ply,
    read_ply_from, tensor_colors, voxelize, write_ply, PlyFormat, PointCloud, BLOCK_SIZE,
};
use mnet::tensor::Coord3;
use mnet::Error;
use rand::Rng;

fn random_cloud(seed: u64, n: usize, limit: f64) -> PointCloud {
    let mut rng = rng(seed);
    PointCloud {
        positions: (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..limit),
                    rng.gen_range(0.0..limit),
                    rng.gen_range(0.0..limit),
                ]
            })
            .collect(),
        colors: (0..n).map(|_| rng.gen()).collect(),
    }
}

/// Voxel -> mean color with ties rounded away from zero, computed with
/// integer arithmetic.
fn voxel_oracle(pc: &PointCloud) -> HashMap<Coord3, [u8; 3]> {
    let mut acc: HashMap<Coord3, ([u64; 3], u64)> = HashMap::new();
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        let v = Coord3::new(
            p[0].floor() as i32,
            p[1].floor() as i32,
            p[2].floor() as i32,
        );
        let e = acc.entry(v).or_default();
        for ch in 0..3 {
            e.0[ch] += c[ch] as u64;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(v, (sum, n))| (v, [0, 1, 2].map(|ch| ((2 * sum[ch] + n) / (2 * n)) as u8)))
        .collect()
}

#[test]
fn both_formats_round_trip() {
    let pc = random_cloud(1, 500, 1000.0);
    let dir = tempfile::tempdir().unwrap();
    for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let path = dir.path().join(format!("{format:?}.ply"));
        write_ply(&pc, &path, format).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.colors, pc.colors);
        assert_eq!(back.positions, pc.positions);
        let bytes = ply_bytes(&pc, format).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}

#[test]
fn voxelization_averages_colors_per_cell() {
    let pc = random_cloud(2, 4000, 16.0);
    let t = voxelize(&pc, 4).unwrap();
    let oracle = voxel_oracle(&pc);
    assert_eq!(t.len(), oracle.len());
    for (c, col) in t.coords().iter().zip(tensor_colors(&t)) {
        assert_eq!(oracle[c], col, "{c:?}");
    }
    assert!(t.coords().windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn out_of_range_positions_are_rejected() {
    let mut pc = random_cloud(3, 10, 8.0);
    pc.positions[4] = [1.0, 16.0, 2.0];
    assert!(matches!(voxelize(&pc, 4), Err(Error::OutOfRange { .. })));
    pc.positions[4] = [-0.5, 1.0, 2.0];
    assert!(matches!(voxelize(&pc, 4), Err(Error::OutOfRange { .. })));
}

#[test]
fn blocks_tile_the_cloud() {
    let pc = random_cloud(4, 3000, 200.0);
    let t = voxelize(&pc, 8).unwrap();
    let blocks = partition_blocks(&t, BLOCK_SIZE).unwrap();
    let mut rebuilt: Vec<(Coord3, [u8; 3])> = Vec::new();
    for b in &blocks {
        assert!(
            b.origin.x % BLOCK_SIZE == 0
                && b.origin.y % BLOCK_SIZE == 0
                && b.origin.z % BLOCK_SIZE == 0
        );
        for (c, col) in b.coords().iter().zip(b.colors()) {
            assert!(
                (0..BLOCK_SIZE).contains(&c.x)
                    && (0..BLOCK_SIZE).contains(&c.y)
                    && (0..BLOCK_SIZE).contains(&c.z)
            );
            rebuilt.push((
                Coord3::new(c.x + b.origin.x, c.y + b.origin.y, c.z + b.origin.z),
                col,
            ));
        }
    }
    rebuilt.sort();
    let original: Vec<(Coord3, [u8; 3])> =
        t.coords().iter().copied().zip(tensor_colors(&t)).collect();
    assert_eq!(rebuilt, original);
    assert!(blocks.windows(2).all(|w| w[0].origin < w[1].origin));

    let manifest = parse_manifest(&manifest_text(&blocks)).unwrap();
    assert_eq!(manifest.len(), blocks.len());
    for ((origin, n), b) in manifest.iter().zip(&blocks) {
        assert_eq!((*origin, *n), (b.origin, b.len()));
    }
}

#[test]
fn dataset_is_read_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    write_ply(
        &random_cloud(5, 50, 100.0),
        &dir.path().join("b.ply"),
        PlyFormat::Ascii,
    )
    .unwrap();
    write_ply(
        &random_cloud(6, 80, 100.0),
        &dir.path().join("a.PLY"),
        PlyFormat::BinaryLittleEndian,
    )
    .unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let ds = load_dataset(dir.path(), 7).unwrap();
    let names: Vec<&str> = ds.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["a", "b"]);
}

#[test]
fn float_colors_and_extra_elements_are_handled() {
    let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\n\
                property uchar red\nproperty uchar green\nproperty uchar blue\nproperty float alpha\n\
                element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                1 2 3 10 20 30 0.5\n4 5 6 40 50 60 0.5\n3 0 1 1\n";
    let pc = read_ply_from(&mut std::io::Cursor::new(text)).unwrap();
    assert_eq!(pc.colors, vec![[10, 20, 30], [40, 50, 60]]);

    let bad = text.replace("40 50 60", "40 500 60");
    assert!(matches!(
        read_ply_from(&mut std::io::Cursor::new(bad)),
        Err(Error::MalformedBody(_))
    ));
}
