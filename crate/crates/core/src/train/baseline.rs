use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::metrics::MetricReport;
use super::trainer::{task_metrics, Examples, TrainConfig};
use crate::data::{sample_indices, TileBag};
use crate::error::{Error, Result};
use crate::model::{softmax, TargetStats, TaskOutput};
use crate::mtl::{total_loss, Label, LabelSet, TaskKind, TaskSpec};
use crate::numerics::{adam_step, init, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};

/// How per-tile head outputs become a slide output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilePooling {
    Ave,
    Max,
}

impl TilePooling {
    pub fn label(self) -> &'static str {
        match self {
            TilePooling::Ave => "SlideAve",
            TilePooling::Max => "SlideMax",
        }
    }
}

/// A linear head applied to every tile feature, pooled over the slide.
#[derive(Clone, Debug)]
pub struct TileBaseline<T: Scalar> {
    pub pooling: TilePooling,
    pub tasks: Vec<TaskSpec>,
    pub store: ParamStore<T>,
    pub target_stats: Vec<TargetStats>,
}

impl<T: Scalar> TileBaseline<T> {
    pub fn init(d_in: usize, tasks: Vec<TaskSpec>, pooling: TilePooling, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for t in &tasks {
            let k = t.outputs();
            store.insert(
                format!("{}.weight", t.name),
                init::normal(&[d_in, k], 1.0 / (d_in as f64).sqrt(), &mut rng),
            );
            store.insert(format!("{}.bias", t.name), Tensor::zeros(&[k]));
        }
        Self {
            pooling,
            target_stats: vec![TargetStats::default(); tasks.len()],
            tasks,
            store,
        }
    }

    fn forward(&self, g: &mut Graph<T>, bag: &TileBag) -> Result<Vec<Var>> {
        let x = g.constant(bag.features.cast());
        self.tasks
            .iter()
            .map(|t| {
                let w = g.param(&self.store, &format!("{}.weight", t.name))?;
                let b = g.param(&self.store, &format!("{}.bias", t.name))?;
                let tiles = g.matmul(x, w)?;
                let tiles = g.add(tiles, b)?;
                match self.pooling {
                    TilePooling::Ave => g.col_mean(tiles),
                    TilePooling::Max => g.col_max(tiles),
                }
            })
            .collect()
    }

    pub fn predict(&self, bag: &TileBag) -> Result<Vec<TaskOutput>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, bag)?;
        Ok(self
            .tasks
            .iter()
            .zip(out)
            .zip(&self.target_stats)
            .map(|((t, v), s)| {
                let r: Vec<f64> = g.value(v).data().iter().map(|x| x.as_f64()).collect();
                match t.kind {
                    TaskKind::Classification { .. } => TaskOutput::Probabilities(softmax(&r)),
                    TaskKind::Regression => TaskOutput::Value(s.restore(r[0])),
                }
            })
            .collect())
    }
}

/// Trains a tile-level baseline end to end with the schedule, batching and
/// tile sampling of `cfg`.
pub fn train_baseline<T: Scalar>(
    data: &Examples,
    pooling: TilePooling,
    cfg: &TrainConfig,
) -> Result<(TileBaseline<T>, Vec<f64>)> {
    cfg.validate()?;
    let first = data
        .items
        .first()
        .ok_or_else(|| Error::Data("training set is empty".into()))?;
    let mut model = TileBaseline::<T>::init(first.bag.dim(), data.tasks.clone(), pooling, cfg.seed);
    for (i, t) in data.tasks.iter().enumerate() {
        if t.kind == TaskKind::Regression {
            let ys: Vec<f64> = data
                .items
                .iter()
                .filter_map(|e| match e.labels.get(i) {
                    Some(Label::Value(v)) => Some(v),
                    _ => None,
                })
                .collect();
            model.target_stats[i] = TargetStats::fit(&ys);
        }
    }
    let labels: Vec<LabelSet> = data
        .items
        .iter()
        .map(|e| {
            LabelSet(
                e.labels
                    .0
                    .iter()
                    .zip(&model.target_stats)
                    .map(|(l, s)| match l {
                        Some(Label::Value(v)) => Some(Label::Value(s.standardize(*v))),
                        other => *other,
                    })
                    .collect(),
            )
        })
        .collect();
    let schedule = cfg.schedule()?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let (mut sum, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut used = 0;
            for &i in batch {
                let bag = &data.items[i].bag;
                let seed = derive_seed(cfg.seed, &[epoch as u64, i as u64]);
                let sub = bag.select(&sample_indices(&bag.coords, cfg.max_n_tiles, cfg.sampling, seed)?)?;
                let mut g = Graph::new();
                let preds = model.forward(&mut g, &sub)?;
                let Some(loss) = total_loss(&mut g, &preds, &labels[i], &model.tasks)? else {
                    continue;
                };
                let v = g.value(loss).item()?.as_f64();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("baseline loss on `{}`", bag.slide_id)));
                }
                g.backward(loss)?;
                g.export_grads(&mut model.store)?;
                sum += v;
                used += 1;
            }
            if used > 0 {
                model.store.scale_grads(T::one() / T::from_usize(used).expect("batch size"));
                adam_step(&mut model.store, lr, AdamConfig::default());
                count += used;
            }
        }
        curve.push(sum / count.max(1) as f64);
    }
    Ok((model, curve))
}

/// Metrics of a baseline over all tiles of each slide.
pub fn evaluate_baseline<T: Scalar>(model: &TileBaseline<T>, data: &Examples) -> Result<MetricReport> {
    if data.tasks != model.tasks {
        return Err(Error::config("baseline tasks do not match the data"));
    }
    let start = Instant::now();
    let outputs = data
        .items
        .iter()
        .map(|e| model.predict(&e.bag))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<LabelSet> = data.items.iter().map(|e| e.labels.clone()).collect();
    Ok(MetricReport {
        tasks: task_metrics(&data.tasks, &outputs, &labels),
        wall_time_s: start.elapsed().as_secs_f64(),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, synthetic_tasks, DatasetSpec, SyntheticSlideSpec};
    use crate::train::Precision;

    #[test]
    fn baseline_learns_and_pools_as_declared() {
        let spec = DatasetSpec {
            n_slides: 12,
            slide: SyntheticSlideSpec {
                grid_w: 10,
                grid_h: 10,
                seed: 3,
                ..Default::default()
            },
            d_in: 16,
            ..Default::default()
        };
        let data = Examples::from_samples(synthetic_tasks(), &synthesize_dataset(&spec, 1).unwrap());
        let cfg = TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            base_lr: 1e-2,
            precision: Precision::F64,
            ..Default::default()
        };
        for pooling in [TilePooling::Ave, TilePooling::Max] {
            let (m, curve) = train_baseline::<f64>(&data, pooling, &cfg).unwrap();
            assert!(curve.last().unwrap() < curve.first().unwrap());
            let bag = &data.items[0].bag;
            let w = m.store.get("fraction.weight").unwrap();
            let b = m.store.get("fraction.bias").unwrap().data()[0];
            let tiles: Vec<f64> = (0..bag.len())
                .map(|r| bag.features.row(r).iter().zip(w.data()).map(|(&x, &w)| x as f64 * w).sum::<f64>() + b)
                .collect();
            let pooled = match pooling {
                TilePooling::Ave => tiles.iter().sum::<f64>() / tiles.len() as f64,
                TilePooling::Max => tiles.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            let TaskOutput::Value(v) = m.predict(bag).unwrap()[2] else { panic!() };
            assert!((v - m.target_stats[2].restore(pooled)).abs() < 1e-9);
            let rep = evaluate_baseline(&m, &data).unwrap();
            assert_eq!(rep.tasks.len(), 4);
        }
    }
}
