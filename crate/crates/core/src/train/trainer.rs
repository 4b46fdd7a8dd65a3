use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, macro_auc, pearson, MetricReport, TaskMetrics};
use super::{derive_seed, Precision};
use crate::aggregation::{infer_slide, DEFAULT_BAG_SIZE};
use crate::data::{morton_order, sample_indices, Dataset, SampleMethod, SlideSample, TileBag};
use crate::error::{Error, Result};
use crate::model::{PathRwkv, TargetStats, TaskOutput};
use crate::mtl::{total_loss, Label, LabelSet, TaskKind, TaskSpec};
use crate::numerics::{activation_meter, adam_step, AdamConfig, Graph, LrSchedule, Scalar};
use crate::parallel::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    /// Final learning rate as a fraction of `base_lr`.
    pub lr_floor: f64,
    pub batch_size: usize,
    pub max_n_tiles: usize,
    pub sampling: SampleMethod,
    pub precision: Precision,
    pub seed: u64,
    /// Slide workers per batch; gradients are summed in slide order, so the
    /// result does not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 20,
            base_lr: 1e-4,
            lr_floor: 0.01,
            batch_size: 4,
            max_n_tiles: 2000,
            sampling: SampleMethod::Random,
            precision: Precision::F32,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.base_lr, self.warmup_epochs, self.epochs, self.lr_floor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_n_tiles == 0 {
            return Err(Error::config("max_n_tiles must be at least 1"));
        }
        self.schedule().map(|_| ())
    }
}

/// A slide bag with labels aligned to some task list.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub bag: TileBag,
    pub labels: LabelSet,
}

/// Slides plus the tasks their labels refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    pub tasks: Vec<TaskSpec>,
    pub items: Vec<Example>,
}

impl Examples {
    pub fn from_samples(tasks: Vec<TaskSpec>, samples: &[SlideSample]) -> Self {
        Self {
            tasks,
            items: samples
                .iter()
                .map(|s| Example {
                    bag: s.bag.clone(),
                    labels: s.labels.clone(),
                })
                .collect(),
        }
    }

    pub fn load(ds: &Dataset) -> Result<Self> {
        let items = ds
            .records
            .iter()
            .map(|r| {
                Ok(Example {
                    bag: ds.read(r)?,
                    labels: r.labels.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tasks: ds.tasks.clone(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            tasks: self.tasks.clone(),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    /// Keeps only the named tasks, in the given order. Slides left without
    /// any label are dropped.
    pub fn restrict(&self, names: &[String]) -> Result<Self> {
        let cols: Vec<usize> = names
            .iter()
            .map(|n| {
                self.tasks
                    .iter()
                    .position(|t| &t.name == n)
                    .ok_or_else(|| Error::config(format!("unknown task `{n}`")))
            })
            .collect::<Result<_>>()?;
        let tasks = cols.iter().map(|&c| self.tasks[c].clone()).collect();
        let mut dropped = 0;
        let items = self
            .items
            .iter()
            .filter_map(|ex| {
                let labels = LabelSet(cols.iter().map(|&c| ex.labels.get(c)).collect());
                if labels.any_present() {
                    Some(Example {
                        bag: ex.bag.clone(),
                        labels,
                    })
                } else {
                    dropped += 1;
                    None
                }
            })
            .collect();
        if dropped > 0 {
            warn!("{dropped} slide(s) carry none of the tasks {names:?} and were dropped");
        }
        Ok(Self { tasks, items })
    }

    fn check_tasks(&self, model_tasks: &[TaskSpec]) -> Result<()> {
        if self.tasks != model_tasks {
            let names = |t: &[TaskSpec]| t.iter().map(|t| t.name.clone()).collect::<Vec<_>>();
            return Err(Error::config(format!(
                "model tasks {:?} do not match data tasks {:?}",
                names(model_tasks),
                names(&self.tasks)
            )));
        }
        Ok(())
    }
}

/// Sizes of a train/val/test split for `n` slides from fractions of the
/// first two parts; the test part takes the rest.
pub fn split_counts(n: usize, train: f64, val: f64) -> (usize, usize, usize) {
    let a = ((n as f64 * train).round() as usize).min(n);
    let b = ((n as f64 * val).round() as usize).min(n - a);
    (a, b, n - a - b)
}

/// Seeded disjoint index sets of the given sizes.
pub fn split_indices(n: usize, counts: (usize, usize, usize), seed: u64) -> Result<[Vec<usize>; 3]> {
    let (a, b, c) = counts;
    if a + b + c > n {
        return Err(Error::config(format!("split {a}/{b}/{c} exceeds {n} slides")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok([idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..a + b + c].to_vec()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-slide loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
    pub wall_time_s: f64,
}

type SlideGrads<T> = Vec<(String, Vec<T>)>;

fn standardized(labels: &LabelSet, tasks: &[TaskSpec], stats: &[TargetStats]) -> LabelSet {
    LabelSet(
        labels
            .0
            .iter()
            .zip(tasks)
            .zip(stats)
            .map(|((l, t), s)| match (l, &t.kind) {
                (Some(Label::Value(v)), TaskKind::Regression) => Some(Label::Value(s.standardize(*v))),
                (l, _) => *l,
            })
            .collect(),
    )
}

fn slide_step<T: Scalar>(
    model: &PathRwkv<T>,
    bag: &TileBag,
    labels: &LabelSet,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<Option<(f64, SlideGrads<T>)>> {
    let idx = sample_indices(&bag.coords, cfg.max_n_tiles, cfg.sampling, seed)?;
    let sub = bag.select(&idx)?;
    let mut g = Graph::new();
    let preds = model.forward_bag(&mut g, &sub)?;
    let Some(loss) = total_loss(&mut g, &preds, labels, &model.cfg.tasks)? else {
        return Ok(None);
    };
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {value} on slide `{}` in epoch {epoch} ({} tiles sampled)",
            bag.slide_id,
            sub.len()
        )));
    }
    g.backward(loss)?;
    let grads = g
        .param_names()
        .filter_map(|name| {
            let v = g.param_var(name)?;
            g.grad(v).map(|gr| (name.to_string(), gr.to_vec()))
        })
        .collect();
    Ok(Some((value, grads)))
}

/// Trains `model` in place on sampled bags. Regression targets are
/// standardised with statistics of the training labels, which are stored in
/// the model.
pub fn train<T: Scalar>(model: &mut PathRwkv<T>, cfg: &TrainConfig, data: &Examples) -> Result<TrainReport> {
    cfg.validate()?;
    data.check_tasks(&model.cfg.tasks)?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(ex) = data.items.iter().find(|e| !e.labels.any_present()) {
        return Err(Error::Data(format!("slide `{}` has no label for any task", ex.bag.slide_id)));
    }
    for ex in &data.items {
        ex.labels.validate(&data.tasks)?;
    }
    let schedule = cfg.schedule()?;
    let tasks = model.cfg.tasks.clone();
    model.target_stats = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| match t.kind {
            TaskKind::Regression => {
                let ys: Vec<f64> = data
                    .items
                    .iter()
                    .filter_map(|e| match e.labels.get(i) {
                        Some(Label::Value(v)) => Some(v),
                        _ => None,
                    })
                    .collect();
                TargetStats::fit(&ys)
            }
            TaskKind::Classification { .. } => TargetStats::default(),
        })
        .collect();
    let labels: Vec<LabelSet> = data
        .items
        .iter()
        .map(|e| standardized(&e.labels, &tasks, &model.target_stats))
        .collect();

    let start = Instant::now();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = par_map(batch, cfg.workers, |&i| {
                let seed = derive_seed(cfg.seed, &[epoch as u64, i as u64]);
                slide_step(model, &data.items[i].bag, &labels[i], cfg, seed, epoch)
            });
            let mut used = 0usize;
            for r in results {
                let Some((loss, grads)) = r? else { continue };
                for (name, g) in grads {
                    model.store.accumulate_grad(&name, &g)?;
                }
                sum += loss;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            model.store.scale_grads(T::one() / T::from_usize(used).expect("batch size"));
            adam_step(&mut model.store, lr, AdamConfig::default());
            count += used;
        }
        if !model.store.all_finite() {
            return Err(Error::NonFinite(format!("parameters diverged in epoch {epoch} at lr {lr:e}")));
        }
        let mean = sum / count.max(1) as f64;
        debug!("epoch {epoch}: lr {lr:.3e}, loss {mean:.6}");
        loss_curve.push(mean);
    }
    let wall = start.elapsed().as_secs_f64();
    info!(
        "trained {} epochs over {} slides in {wall:.1}s, final loss {:.5}",
        cfg.epochs,
        data.len(),
        loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TrainReport {
        loss_curve,
        steps: model.store.step(),
        wall_time_s: wall,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Training-style truncation to at most `max_n_tiles` tiles.
    Sampled,
    /// Chunked recurrent inference over every tile.
    #[default]
    Recurrent,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" | "sample" => Ok(EvalMode::Sampled),
            "recurrent" => Ok(EvalMode::Recurrent),
            _ => Err(Error::config(format!("unknown mode `{s}` (sampled, recurrent)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub max_n_tiles: usize,
    pub sampling: SampleMethod,
    pub bag_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::Recurrent,
            max_n_tiles: 2000,
            sampling: SampleMethod::Random,
            bag_size: DEFAULT_BAG_SIZE,
            seed: 0,
            workers: 1,
        }
    }
}

impl EvalOptions {
    pub fn for_training(cfg: &TrainConfig, mode: EvalMode) -> Self {
        Self {
            mode,
            max_n_tiles: cfg.max_n_tiles,
            sampling: cfg.sampling,
            seed: cfg.seed,
            workers: cfg.workers,
            ..Self::default()
        }
    }
}

/// Tile order used at evaluation: stored order for random sampling, Morton
/// order for the Z-order samplers.
pub fn eval_order(coords: &[(i32, i32)], method: SampleMethod) -> Vec<usize> {
    match method {
        SampleMethod::Random => (0..coords.len()).collect(),
        SampleMethod::ZOrder | SampleMethod::ZOrderStrided => morton_order(coords),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub outputs: Vec<TaskOutput>,
    pub tiles_used: usize,
}

/// Predictions for one slide under `opts`.
pub fn predict_slide<T: Scalar>(model: &PathRwkv<T>, bag: &TileBag, opts: &EvalOptions) -> Result<(SlidePrediction, usize)> {
    let order = eval_order(&bag.coords, opts.sampling);
    let base = activation_meter::live();
    activation_meter::reset_peak();
    let (outputs, used, peak) = match opts.mode {
        EvalMode::Sampled => {
            let mut idx = sample_indices(&bag.coords, opts.max_n_tiles, opts.sampling, opts.seed)?;
            // process the subset in evaluation order
            let mut rank = vec![0usize; bag.len()];
            for (r, &i) in order.iter().enumerate() {
                rank[i] = r;
            }
            idx.sort_unstable_by_key(|&i| rank[i]);
            let sub = bag.select(&idx)?;
            let out = model.predict_full(&sub.features.cast(), &sub.coords)?;
            (out, sub.len(), activation_meter::peak().saturating_sub(base))
        }
        EvalMode::Recurrent => {
            let ordered = bag.select(&order)?;
            let inf = infer_slide(model, &ordered, opts.bag_size)?;
            let raw = model.head_outputs(&inf.pooled)?;
            (model.interpret(&raw), inf.tiles, inf.peak_activation)
        }
    };
    Ok((
        SlidePrediction {
            slide_id: bag.slide_id.clone(),
            outputs,
            tiles_used: used,
        },
        peak,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub predictions: Vec<SlidePrediction>,
    pub report: MetricReport,
}

/// Per-task metrics of `outputs` (one entry per slide) against `labels`.
pub fn task_metrics(tasks: &[TaskSpec], outputs: &[Vec<TaskOutput>], labels: &[LabelSet]) -> Vec<TaskMetrics> {
    fn defined(r: Result<f64>, what: &str, task: &str) -> Option<f64> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("{what} of task `{task}` undefined: {e}");
                None
            }
        }
    }
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let pairs: Vec<(&TaskOutput, Label)> = outputs
                .iter()
                .zip(labels)
                .filter_map(|(o, l)| Some((&o[i], l.get(i)?)))
                .collect();
            let mut m = TaskMetrics {
                task: task.name.clone(),
                n: pairs.len(),
                accuracy: None,
                auc: None,
                pearson: None,
            };
            match task.kind {
                TaskKind::Classification { num_classes } => {
                    let mut probs = Vec::new();
                    let mut truth = Vec::new();
                    for (o, l) in &pairs {
                        if let (TaskOutput::Probabilities(p), Label::Class(c)) = (o, l) {
                            probs.push(p.clone());
                            truth.push(*c);
                        }
                    }
                    let pred: Vec<usize> = pairs.iter().filter_map(|(o, _)| o.predicted_class()).collect();
                    m.accuracy = defined(accuracy(&pred, &truth), "accuracy", &task.name);
                    m.auc = defined(macro_auc(&probs, &truth, num_classes), "AUC", &task.name);
                }
                TaskKind::Regression => {
                    let (p, y): (Vec<f64>, Vec<f64>) = pairs
                        .iter()
                        .filter_map(|(o, l)| match (o, l) {
                            (TaskOutput::Value(p), Label::Value(y)) => Some((*p, *y)),
                            _ => None,
                        })
                        .unzip();
                    m.pearson = defined(pearson(&p, &y), "correlation", &task.name);
                }
            }
            m
        })
        .collect()
}

/// Evaluates `model` on every slide of `data` with one set of weights.
pub fn evaluate<T: Scalar>(model: &PathRwkv<T>, data: &Examples, opts: &EvalOptions) -> Result<Evaluation> {
    data.check_tasks(&model.cfg.tasks)?;
    if opts.max_n_tiles == 0 {
        return Err(Error::config("max_n_tiles must be at least 1"));
    }
    let start = Instant::now();
    let results = par_map(&data.items, opts.workers, |ex| predict_slide(model, &ex.bag, opts));
    let mut predictions = Vec::with_capacity(results.len());
    let mut peak = 0;
    for r in results {
        let (p, pk) = r?;
        peak = peak.max(pk);
        predictions.push(p);
    }
    let outputs: Vec<Vec<TaskOutput>> = predictions.iter().map(|p| p.outputs.clone()).collect();
    let labels: Vec<LabelSet> = data.items.iter().map(|e| e.labels.clone()).collect();
    Ok(Evaluation {
        report: MetricReport {
            tasks: task_metrics(&data.tasks, &outputs, &labels),
            loss_curve: Vec::new(),
            wall_time_s: start.elapsed().as_secs_f64(),
            peak_activation: peak,
        },
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, synthetic_tasks, DatasetSpec, SyntheticSlideSpec};
    use crate::model::ModelConfig;

    fn data(n: usize, seed: u64) -> Examples {
        let spec = DatasetSpec {
            n_slides: n,
            slide: SyntheticSlideSpec {
                grid_w: 10,
                grid_h: 10,
                witness_rate: 0.2,
                seed,
                ..Default::default()
            },
            d_in: 16,
            ..Default::default()
        };
        Examples::from_samples(synthetic_tasks(), &synthesize_dataset(&spec, 1).unwrap())
    }

    fn model<T: Scalar>(tasks: Vec<TaskSpec>) -> PathRwkv<T> {
        let mut cfg = ModelConfig::new(16, 8, tasks);
        cfg.heads = 2;
        cfg.lora_rank = 2;
        cfg.decay_rank = 2;
        cfg.ffn_dim = 16;
        PathRwkv::init(cfg, 5).unwrap()
    }

    fn quick(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: 0,
            base_lr: lr,
            batch_size: 2,
            max_n_tiles: 30,
            precision: Precision::F64,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let d = data(1, 1).restrict(&["witness".into()]).unwrap();
        let mut m = model::<f64>(d.tasks.clone());
        let before = m.store.clone();
        train(&mut m, &quick(1, 0.0), &d).unwrap();
        for (name, t) in before.iter() {
            assert_eq!(t.data(), m.store.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn training_is_deterministic_and_worker_independent() {
        let d = data(6, 2);
        let run = |workers| {
            let mut m = model::<f64>(d.tasks.clone());
            let cfg = TrainConfig { workers, ..quick(2, 1e-3) };
            (train(&mut m, &cfg, &d).unwrap().loss_curve, m.to_checkpoint())
        };
        let a = run(1);
        assert_eq!(a, run(1));
        let b = run(3);
        assert_eq!(a.0.len(), b.0.len());
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn task_mismatch_is_config_error() {
        let d = data(2, 3);
        let m = model::<f64>(vec![TaskSpec::classification("other", 2)]);
        assert!(matches!(evaluate(&m, &d, &EvalOptions::default()), Err(Error::Config(_))));
        let mut m = m;
        assert!(matches!(train(&mut m, &quick(1, 0.0), &d), Err(Error::Config(_))));
    }

    #[test]
    fn modes_agree_when_everything_fits() {
        let d = data(3, 4);
        let m = model::<f64>(d.tasks.clone());
        for sampling in [SampleMethod::Random, SampleMethod::ZOrder] {
            let mut opts = EvalOptions {
                max_n_tiles: 10_000,
                bag_size: 7,
                sampling,
                ..Default::default()
            };
            let rec = evaluate(&m, &d, &opts).unwrap();
            opts.mode = EvalMode::Sampled;
            let smp = evaluate(&m, &d, &opts).unwrap();
            for (a, b) in rec.predictions.iter().zip(&smp.predictions) {
                for (x, y) in a.outputs.iter().zip(&b.outputs) {
                    match (x, y) {
                        (TaskOutput::Probabilities(p), TaskOutput::Probabilities(q)) => {
                            p.iter().zip(q).for_each(|(u, v)| assert!((u - v).abs() < 1e-10))
                        }
                        (TaskOutput::Value(u), TaskOutput::Value(v)) => assert!((u - v).abs() < 1e-10),
                        _ => panic!("output kinds differ"),
                    }
                }
            }
        }
    }

    #[test]
    fn restrict_drops_unlabelled_and_rejects_unknown() {
        let mut d = data(3, 5);
        d.items[0].labels = LabelSet(vec![None, Some(Label::Class(1)), None, None]);
        let r = d.restrict(&["fraction".into(), "witness".into()]).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.tasks[0].name, "fraction");
        assert!(matches!(d.restrict(&["nope".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_disjoint() {
        assert_eq!(split_counts(200, 0.7, 0.1), (140, 20, 40));
        let [a, b, c] = split_indices(220, (160, 20, 40), 1).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 220);
        assert!(split_indices(10, (8, 2, 1), 0).is_err());
    }

    #[test]
    fn diverging_loss_aborts() {
        let d = data(2, 6).restrict(&["fraction".into()]).unwrap();
        let mut m = model::<f64>(d.tasks.clone());
        m.store.get_mut("head.fraction.bias").unwrap().data_mut()[0] = f64::INFINITY;
        assert!(matches!(train(&mut m, &quick(1, 1e-3), &d), Err(Error::NonFinite(_))));
    }
}
