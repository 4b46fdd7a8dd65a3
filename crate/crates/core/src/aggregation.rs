//! Bag splitting, the feature-wise max combiner and chunked recurrent
//! inference over all tiles of a slide.
//!
//! The running maximum starts at `-inf`, the identity of `max`, so folding
//! bag summaries with [`comb`] in any grouping gives exactly the summary of
//! all rows at once.

use std::ops::Range;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TileBag;
use crate::error::{Error, Result};
use crate::model::PathRwkv;
use crate::mtl::MtlDesign;
use crate::numerics::{activation_meter, Graph, Scalar, Tensor};

pub const DEFAULT_BAG_SIZE: usize = 512;

pub fn identity<T: Scalar>(dim: usize) -> Vec<T> {
    vec![T::neg_infinity(); dim]
}

/// Feature-wise max over the rows of a summary; `empty` marks a summary of
/// zero rows, which is the identity vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSummary<T> {
    pub value: Vec<T>,
    pub empty: bool,
}

pub fn local_summary<T: Scalar>(features: &Tensor<T>) -> LocalSummary<T> {
    let d = features.cols();
    let mut value = identity(d);
    for r in 0..features.rows() {
        for (m, &x) in value.iter_mut().zip(features.row(r)) {
            if x > *m {
                *m = x;
            }
        }
    }
    LocalSummary {
        value,
        empty: features.rows() == 0,
    }
}

/// Feature-wise max of two summaries.
pub fn comb<T: Scalar>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("comb of lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| if y > x { y } else { x }).collect())
}

/// Per-task running maximum over absorbed tile features.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMax<T> {
    pub values: Vec<Vec<T>>,
    pub seen: usize,
}

impl<T: Scalar> RunningMax<T> {
    pub fn new(tasks: usize, dim: usize) -> Self {
        Self {
            values: (0..tasks).map(|_| identity(dim)).collect(),
            seen: 0,
        }
    }

    /// Folds one bag of per-task `[n, D]` features into the running value.
    pub fn absorb(&mut self, per_task: &[Tensor<T>]) -> Result<()> {
        if per_task.len() != self.values.len() {
            return Err(Error::dim(format!(
                "{} task feature maps for {} tasks",
                per_task.len(),
                self.values.len()
            )));
        }
        for (v, f) in self.values.iter_mut().zip(per_task) {
            *v = comb(v, &local_summary(f).value)?;
        }
        self.seen += per_task.first().map_or(0, Tensor::rows);
        Ok(())
    }
}

/// Contiguous bags over a tile order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagPlan {
    pub order: Vec<usize>,
    pub bags: Vec<Range<usize>>,
    pub bag_size: usize,
}

/// `ceil(n / bag_size)` contiguous bags over tiles `0..n` in stored order.
pub fn plan_bags(n: usize, bag_size: usize) -> Result<BagPlan> {
    if n == 0 {
        return Err(Error::EmptySlide("cannot plan bags for zero tiles".into()));
    }
    if bag_size == 0 {
        return Err(Error::contract("bag_size must be at least 1"));
    }
    let bags = (0..n)
        .step_by(bag_size)
        .map(|s| s..(s + bag_size).min(n))
        .collect();
    Ok(BagPlan {
        order: (0..n).collect(),
        bags,
        bag_size,
    })
}

/// Accumulator for the pooled features of one design while streaming bags.
enum Pool<T> {
    Max(RunningMax<T>),
    Mean { sum: Vec<T>, count: usize },
    Tokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput<T> {
    /// One `[D]` pooled feature per task.
    pub pooled: Vec<Vec<T>>,
    pub bags: usize,
    pub tiles: usize,
    /// Highest number of live graph activation elements during the run,
    /// above what was live when it started.
    pub peak_activation: usize,
}

/// Recurrent inference over a stream of `(features, coords)` bags: each bag
/// runs through the backbone with the state carried from the previous one
/// and its per-tile task features are folded into the pooled summary.
pub fn infer_bags<T, I>(model: &PathRwkv<T>, bags: I) -> Result<InferOutput<T>>
where
    T: Scalar,
    I: IntoIterator<Item = (Tensor<T>, Vec<(i32, i32)>)>,
{
    let base = activation_meter::live();
    activation_meter::reset_peak();
    let cfg = &model.cfg;
    let t = cfg.num_tasks();
    let mut state = model.fresh_state();
    let mut pool = match cfg.mtl_design {
        MtlDesign::Ours => Pool::Max(RunningMax::new(t, cfg.dim)),
        MtlDesign::To => Pool::Mean {
            sum: vec![T::zero(); cfg.dim],
            count: 0,
        },
        MtlDesign::Through => Pool::Tokens,
    };
    let (mut n_bags, mut tiles) = (0, 0);
    for (feats, coords) in bags {
        if feats.rows() == 0 {
            warn!("skipping a bag with no tiles");
            continue;
        }
        let mut g = Graph::inference();
        let x = model.embed(&mut g, &feats, &coords)?;
        let h = model.backbone(&mut g, x, &mut state)?;
        match &mut pool {
            Pool::Max(rm) => {
                let parts = model.task_tile_features(&mut g, h)?;
                let maps: Vec<Tensor<T>> = parts.iter().map(|&p| g.value(p).clone()).collect();
                rm.absorb(&maps)?;
            }
            Pool::Mean { sum, count } => {
                let hv = g.value(h);
                for r in 0..hv.rows() {
                    sum.iter_mut().zip(hv.row(r)).for_each(|(s, &x)| *s = *s + x);
                }
                *count += hv.rows();
            }
            Pool::Tokens => {}
        }
        n_bags += 1;
        tiles += feats.rows();
    }
    if tiles == 0 {
        return Err(Error::EmptySlide("no tiles in any bag".into()));
    }
    let pooled = match pool {
        Pool::Max(rm) => rm.values,
        Pool::Mean { sum, count } => {
            let inv = T::one() / T::from_usize(count).expect("count fits");
            vec![sum.iter().map(|&s| s * inv).collect(); t]
        }
        Pool::Tokens => {
            let mut g = Graph::inference();
            let tokens = g.param(&model.store, "mtl.tokens")?;
            let h = model.backbone(&mut g, tokens, &mut state)?;
            let hv = g.value(h);
            (0..t).map(|i| hv.row(i).to_vec()).collect()
        }
    };
    Ok(InferOutput {
        pooled,
        bags: n_bags,
        tiles,
        peak_activation: activation_meter::peak().saturating_sub(base),
    })
}

fn rows_of<T: Scalar>(bag: &TileBag, r: Range<usize>) -> (Tensor<T>, Vec<(i32, i32)>) {
    let d = bag.dim();
    let data = bag.features.data()[r.start * d..r.end * d]
        .iter()
        .map(|&x| T::from_f64_lossy(x as f64))
        .collect();
    (
        Tensor::new(&[r.len(), d], data).expect("row range of a valid bag"),
        bag.coords[r].to_vec(),
    )
}

/// Recurrent inference over all tiles of `bag` in stored order, split into
/// contiguous bags of `bag_size`.
pub fn infer_slide<T: Scalar>(model: &PathRwkv<T>, bag: &TileBag, bag_size: usize) -> Result<InferOutput<T>> {
    if bag.is_empty() {
        return Err(Error::EmptySlide(bag.slide_id.clone()));
    }
    let plan = plan_bags(bag.len(), bag_size)?;
    infer_bags(model, plan.bags.into_iter().map(|r| rows_of(bag, r)))
}

/// Pooled features from a single pass over all rows (no chunking).
pub fn single_pass_pooled<T: Scalar>(model: &PathRwkv<T>, bag: &TileBag) -> Result<Vec<Vec<T>>> {
    let mut g = Graph::inference();
    let (feats, coords) = rows_of::<T>(bag, 0..bag.len());
    let pooled = model.pooled_features(&mut g, &feats, &coords)?;
    Ok(pooled.iter().map(|&p| g.value(p).data().to_vec()).collect())
}

fn check_preds<T: Scalar>(preds: &Tensor<T>) -> Result<()> {
    if preds.rank() != 2 || preds.rows() == 0 {
        return Err(Error::EmptySlide(format!(
            "tile predictions of shape {:?}",
            preds.shape()
        )));
    }
    Ok(())
}

/// Column mean of per-tile predictions `[N, K]`.
pub fn slide_ave<T: Scalar>(preds: &Tensor<T>) -> Result<Vec<T>> {
    check_preds(preds)?;
    let mut acc = vec![T::zero(); preds.cols()];
    for r in 0..preds.rows() {
        acc.iter_mut().zip(preds.row(r)).for_each(|(a, &x)| *a = *a + x);
    }
    let inv = T::one() / T::from_usize(preds.rows()).expect("row count");
    Ok(acc.into_iter().map(|a| a * inv).collect())
}

/// Column max of per-tile predictions `[N, K]`.
pub fn slide_max<T: Scalar>(preds: &Tensor<T>) -> Result<Vec<T>> {
    check_preds(preds)?;
    Ok(local_summary(preds).value)
}

/// Monte-Carlo variance of one raw head output over uniformly drawn tile
/// subsets of `subset_size` (kept in stored order).
pub fn subset_prediction_variance<T: Scalar>(
    model: &PathRwkv<T>,
    bag: &TileBag,
    subset_size: usize,
    trials: usize,
    task: usize,
    seed: u64,
) -> Result<f64> {
    if subset_size == 0 || subset_size > bag.len() {
        return Err(Error::contract(format!(
            "subset size {subset_size} for a slide of {} tiles",
            bag.len()
        )));
    }
    if trials < 2 {
        return Err(Error::contract("variance needs at least two trials"));
    }
    if task >= model.cfg.num_tasks() {
        return Err(Error::contract(format!("task index {task}")));
    }
    let (feats, coords) = rows_of::<T>(bag, 0..bag.len());
    let embedded = model.embed_tensor(&feats, &coords)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outputs = Vec::with_capacity(trials);
    let d = embedded.cols();
    for _ in 0..trials {
        let mut idx = index::sample(&mut rng, bag.len(), subset_size).into_vec();
        idx.sort_unstable();
        let mut data = Vec::with_capacity(subset_size * d);
        for &i in &idx {
            data.extend_from_slice(embedded.row(i));
        }
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(&[subset_size, d], data)?);
        let pooled = model.pooled_from_embedded(&mut g, x)?;
        let out = model.heads(&mut g, &pooled[task..=task])?;
        outputs.push(g.value(out[0]).data()[0].as_f64());
    }
    // shifting by the first output makes identical outputs give exactly 0
    let shift = outputs[0];
    let d: Vec<f64> = outputs.iter().map(|o| o - shift).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    Ok(d.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (n - 1.0))
}
