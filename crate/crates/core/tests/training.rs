mod common;

use common::*;
use mnet::autodiff::AdamConfig;
use mnet::checkpoint;
use mnet::codec::encode_blocks;
use mnet::nn::ModelConfig;
use mnet::pc_io::{partition_blocks, voxelize, BLOCK_SIZE};
use mnet::trainer::{evaluate, report_csv, train, TrainConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        num_scales: 2,
        channels: 4,
        res_blocks: 1,
        mixtures: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn trained_checkpoint_survives_a_save_and_reload() {
    let blocks = partition_blocks(&voxelize(&textured_surface(1), 7).unwrap(), BLOCK_SIZE).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        max_epochs: 4,
        threads: 2,
        val_fraction: 0.25,
        ..TrainConfig::default()
    };
    let mut epochs = Vec::new();
    let out = train(&blocks, tiny(), &cfg, |log| epochs.push(log.epoch)).unwrap();
    assert_eq!(epochs, [0, 1, 2, 3]);
    let best = out
        .history
        .iter()
        .min_by(|a, b| a.val_bpp.total_cmp(&b.val_bpp))
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    assert_eq!(out.model.metadata.loss, best.val_bpp);
    assert!(out
        .history
        .iter()
        .all(|h| h.train_bpp.is_finite() && h.train_bpp > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&out.model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.digest(), out.model.digest());
    assert_eq!(back.metadata, out.model.metadata);
    assert_eq!(
        encode_blocks(&blocks, &back, 1).unwrap(),
        encode_blocks(&blocks, &out.model, 1).unwrap()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn evaluation_report_matches_stream_sizes() {
    let model = mnet::model::Model::random(tiny(), 2).unwrap();
    let clouds: Vec<(String, Vec<_>)> = [3u64, 4]
        .iter()
        .map(|&s| {
            let t = voxelize(&textured_surface(s), 7).unwrap();
            (format!("c{s}"), partition_blocks(&t, BLOCK_SIZE).unwrap())
        })
        .collect();
    let rows = evaluate(&clouds, &model, 1, true).unwrap();
    assert_eq!(rows.len(), 2);
    for ((name, blocks), row) in clouds.iter().zip(&rows) {
        let bytes = encode_blocks(blocks, &model, 1).unwrap().byte_len();
        let points: usize = blocks.iter().map(|b| b.len()).sum();
        assert_eq!(&row.name, name);
        assert_eq!(row.points, points);
        assert_eq!(row.bpp, 8.0 * bytes as f64 / points as f64);
    }
    let csv = report_csv(&rows);
    let last = csv.lines().last().unwrap();
    let mean_bpp = (rows[0].bpp + rows[1].bpp) / 2.0;
    assert!(last.starts_with("Average,"));
    assert!(last.contains(&format!(",{mean_bpp:.2},")), "{last}");
}
