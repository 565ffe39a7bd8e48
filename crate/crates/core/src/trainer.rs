//! Minibatch training of the full stack on the rate objective, and
//! per-cloud evaluation reports.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, learning_rate, AdamConfig, Graph};
use crate::codec::{decode_blocks, encode_blocks, measure_bpp};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{loss_graph, Model, PreparedBlock};
use crate::nn::ModelConfig;
use crate::pc_io::Block;
use crate::quantizer::QuantMode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Blocks per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: u32,
    pub max_epochs: u32,
    pub seed: u64,
    /// Fraction of blocks held out for validation.
    pub val_fraction: f64,
    /// Worker threads for block-level parallelism; 0 uses every core.
    pub threads: usize,
    /// Stops after the first epoch that ends past this wall-clock budget.
    pub time_budget: Option<Duration>,
    /// Stops once the validation rate is at or below this many bits per point.
    pub target_bpp: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            adam: AdamConfig::default(),
            patience: 20,
            max_epochs: 200,
            seed: 0,
            val_fraction: 0.1,
            threads: 0,
            time_budget: None,
            target_bpp: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.patience == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "batch size {}, patience {}, validation fraction {}",
                self.batch_size, self.patience, self.val_fraction
            )));
        }
        if let Some(t) = self.target_bpp.filter(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidConfig(format!("target rate {t}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    /// Mean training rate over the epoch, bits per point.
    pub train_bpp: f64,
    pub val_bpp: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation rate.
    pub model: Model,
    pub best_epoch: u32,
    pub history: Vec<EpochLog>,
}

/// Bits of one block under the model and, optionally, their gradient
/// (one matrix per parameter).
pub fn block_rate(
    model: &Model,
    block: &PreparedBlock,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    let mut g = Graph::new(&model.params);
    let loss = loss_graph(&mut g, model, block, QuantMode::StraightThrough)?;
    let bits = loss.total_bits(&g);
    if !with_grad {
        return Ok((bits, None));
    }
    let grads = g.backward(loss.bits)?.into_param_grads(&model.params);
    Ok((bits, Some(grads)))
}

fn prepare(blocks: &[Block], config: &ModelConfig) -> Result<Vec<PreparedBlock>> {
    blocks
        .par_iter()
        .map(|b| PreparedBlock::new(b.coords(), &b.colors(), config))
        .collect()
}

/// Σ bits / Σ points over `blocks`.
fn dataset_bpp(model: &Model, blocks: &[&PreparedBlock]) -> Result<f64> {
    let rates = blocks
        .par_iter()
        .map(|b| block_rate(model, b, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let points: usize = blocks.iter().map(|b| b.num_points()).sum();
    Ok(rates.iter().sum::<f64>() / points as f64)
}

/// Trains a freshly initialized model. `on_epoch` sees every epoch's log.
pub fn train(
    blocks: &[Block],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if blocks.iter().all(|b| b.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let mut model = Model::random(model_config, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| train_loop(&mut model, blocks, cfg, &mut on_epoch))
}

fn train_loop(
    model: &mut Model,
    blocks: &[Block],
    cfg: &TrainConfig,
    on_epoch: &mut (dyn FnMut(&EpochLog) + Send),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let nonempty: Vec<Block> = blocks.iter().filter(|b| !b.is_empty()).cloned().collect();
    let prepared = prepare(&nonempty, &model.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if prepared.len() < 2 || cfg.val_fraction == 0.0 {
        0
    } else {
        ((cfg.val_fraction * prepared.len() as f64).ceil() as usize).min(prepared.len() - 1)
    };
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    // With nothing held out, validation falls back to the training set.
    let val: Vec<&PreparedBlock> = if n_val == 0 {
        train_idx.iter().map(|&i| &prepared[i]).collect()
    } else {
        val_idx.iter().map(|&i| &prepared[i]).collect()
    };

    let mut best = (f64::INFINITY, 0u32, model.params.clone());
    let mut history = Vec::new();
    let mut stall = 0;
    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        train_idx.shuffle(&mut rng);
        let mut epoch_bits = 0.0;
        let mut epoch_points = 0usize;
        for batch in train_idx.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| block_rate(model, &prepared[i], true))
                .collect::<Result<Vec<_>>>()?;
            let points: usize = batch.iter().map(|&i| prepared[i].num_points()).sum();
            let mut total: Option<Vec<Matrix>> = None;
            for (bits, grads) in results {
                epoch_bits += bits;
                let grads = grads.expect("gradients requested");
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&grads) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            epoch_points += points;
            let mut grads = total.expect("nonempty batch");
            for gm in grads.iter_mut() {
                gm.scale_in_place(1.0 / points as f64);
            }
            adam_step(&mut model.params, &grads, &cfg.adam, epoch);
        }
        let val_bpp = dataset_bpp(model, &val)?;
        let log = EpochLog {
            epoch,
            lr: learning_rate(&cfg.adam, epoch),
            train_bpp: epoch_bits / epoch_points as f64,
            val_bpp,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if val_bpp < best.0 {
            best = (val_bpp, epoch, model.params.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
        if cfg.target_bpp.is_some_and(|t| val_bpp <= t)
            || cfg.time_budget.is_some_and(|b| start.elapsed() >= b)
        {
            break;
        }
    }
    let (loss, best_epoch, params) = best;
    model.params = params;
    model.metadata.epoch = best_epoch;
    model.metadata.loss = loss;
    model.metadata.seed = cfg.seed;
    Ok(TrainOutcome {
        model: model.clone(),
        best_epoch,
        history,
    })
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub points: usize,
    pub bpp: f64,
    pub enc_seconds: f64,
}

/// Encodes every cloud (and, with `verify`, checks that it decodes back
/// exactly). Rate is total stream bytes over total points.
pub fn evaluate(
    clouds: &[(String, Vec<Block>)],
    model: &Model,
    threads: usize,
    verify: bool,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(clouds.len());
    for (name, blocks) in clouds {
        let points: usize = blocks.iter().map(Block::len).sum();
        if points == 0 {
            return Err(Error::EmptyGeometry);
        }
        let t0 = Instant::now();
        let stream = encode_blocks(blocks, model, threads)?;
        let bytes = stream.to_bytes();
        let enc_seconds = t0.elapsed().as_secs_f64();
        if verify {
            let geometry: Vec<_> = blocks
                .iter()
                .map(|b| (b.origin, b.coords().to_vec()))
                .collect();
            let decoded = decode_blocks(&geometry, &stream, model, threads)?;
            for (b, colors) in blocks.iter().zip(decoded) {
                if colors != b.colors() {
                    return Err(Error::CorruptStream(format!(
                        "block {:?} of `{name}` did not round-trip",
                        b.origin
                    )));
                }
            }
        }
        rows.push(ReportRow {
            name: name.clone(),
            points,
            bpp: measure_bpp(bytes.len(), points),
            enc_seconds,
        });
    }
    Ok(rows)
}

/// CSV with header `name,points,bpp,enc_seconds`, one row per cloud and a
/// final `Average` row (mean of each column).
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("name,points,bpp,enc_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.2}\n",
            r.name, r.points, r.bpp, r.enc_seconds
        ));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let points = rows.iter().map(|r| r.points as f64).sum::<f64>() / n;
        let bpp = rows.iter().map(|r| r.bpp).sum::<f64>() / n;
        let secs = rows.iter().map(|r| r.enc_seconds).sum::<f64>() / n;
        out.push_str(&format!("Average,{:.0},{bpp:.2},{secs:.2}\n", points));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pc_io::partition_blocks;
    use crate::tensor::{build_sparse_tensor, Coord3};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 4,
            res_blocks: 1,
            mixtures: 2,
            ..ModelConfig::default()
        }
    }

    fn block(seed: u64, edge: i32, n: usize) -> Block {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert(Coord3::new(
                rng.gen_range(0..edge),
                rng.gen_range(0..edge),
                rng.gen_range(0..edge),
            ));
        }
        let coords: Vec<Coord3> = set.into_iter().collect();
        let feats: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0..256) as f64).collect();
        let t = build_sparse_tensor(coords, Matrix::from_vec(n, 3, feats), 1).unwrap();
        partition_blocks(&t, 64).unwrap().remove(0)
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train(&[], tiny(), &TrainConfig::default(), |_| {}),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn overfit_loss_decreases() {
        let b = block(1, 16, 200);
        let cfg = TrainConfig {
            max_epochs: 5,
            threads: 1,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&[b], tiny(), &cfg, |_| {}).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|h| h.train_bpp).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn training_is_reproducible_and_keeps_best() {
        let blocks: Vec<Block> = (0..3).map(|s| block(s, 8, 40)).collect();
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 2,
            patience: 2,
            seed: 7,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let a = train(&blocks, tiny(), &cfg, |_| {}).unwrap();
        let b = train(
            &blocks,
            tiny(),
            &TrainConfig {
                threads: 1,
                ..cfg.clone()
            },
            |_| {},
        )
        .unwrap();
        assert_eq!(a.model.digest(), b.model.digest());
        let best = a
            .history
            .iter()
            .min_by(|x, y| x.val_bpp.total_cmp(&y.val_bpp))
            .unwrap();
        assert_eq!(a.best_epoch, best.epoch);
        assert_eq!(a.model.metadata.loss, best.val_bpp);
    }

    #[test]
    fn batch_rate_is_sum_of_blocks() {
        let model = Model::random(tiny(), 3).unwrap();
        let blocks: Vec<Block> = (0..2).map(|s| block(s, 8, 30)).collect();
        let prepared = prepare(&blocks, &model.config).unwrap();
        let each: Vec<f64> = prepared
            .iter()
            .map(|p| block_rate(&model, p, false).unwrap().0)
            .collect();
        let refs: Vec<&PreparedBlock> = prepared.iter().collect();
        let bpp = dataset_bpp(&model, &refs).unwrap();
        assert!((bpp - (each[0] + each[1]) / 60.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_reports_exact_bpp() {
        let model = Model::random(tiny(), 3).unwrap();
        let clouds = vec![
            ("a".to_string(), vec![block(1, 8, 30)]),
            ("b".to_string(), vec![block(2, 8, 20)]),
        ];
        let rows = evaluate(&clouds, &model, 1, true).unwrap();
        assert_eq!(rows.len(), 2);
        for (row, (_, blocks)) in rows.iter().zip(&clouds) {
            let bytes = encode_blocks(blocks, &model, 1).unwrap().to_bytes();
            assert_eq!(row.bpp, 8.0 * bytes.len() as f64 / row.points as f64);
        }
        let csv = report_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,points,bpp,enc_seconds");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("Average,25,"));
    }
}
