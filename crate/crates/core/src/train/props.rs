use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bench::loglog_slope;
use super::derive_seed;
use crate::aggregation::subset_prediction_variance;
use crate::data::TileBag;
use crate::error::{Error, Result};
use crate::model::PathRwkv;
use crate::numerics::{init, Graph, Scalar, Tensor};

/// Prediction variance of one slide at each subset size. A size of 0
/// stands for the whole slide.
pub fn variance_curve<T: Scalar>(
    model: &PathRwkv<T>,
    bag: &TileBag,
    sizes: &[usize],
    trials: usize,
    task: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    sizes
        .iter()
        .map(|&s| {
            let s = if s == 0 { bag.len() } else { s.min(bag.len()) };
            subset_prediction_variance(model, bag, s, trials, task, seed)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnbiasednessReport {
    pub trial_counts: Vec<usize>,
    /// Root-mean-square distance between the averaged sampled-bag gradient
    /// and the full-slide gradient, over slides and repetitions.
    pub errors: Vec<f64>,
    pub slope: f64,
}

fn head_gradient(feats: &Tensor<f64>, w: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let w = g.leaf(w.clone(), true);
    let pooled = g.col_mean(x)?;
    let pooled = g.reshape(pooled, &[1, feats.cols()])?;
    let pred = g.matmul(pooled, w)?;
    let loss = g.sum(pred);
    g.backward(loss)?;
    Ok(g.grad(w).expect("leaf gradient").to_vec())
}

/// Averages the head gradient of a mean-pooled linear model over random
/// tile subsets of `subset` tiles and measures its distance from the
/// gradient on every tile as the number of averaged subsets grows.
pub fn mean_gradient_unbiasedness(
    bags: &[TileBag],
    subset: usize,
    trial_counts: &[usize],
    reps: usize,
    seed: u64,
) -> Result<UnbiasednessReport> {
    if bags.is_empty() || reps == 0 || subset == 0 {
        return Err(Error::contract("need slides, repetitions and a positive subset size"));
    }
    if trial_counts.is_empty() || trial_counts.windows(2).any(|w| w[0] >= w[1]) || trial_counts[0] == 0 {
        return Err(Error::contract(format!("trial counts {trial_counts:?} must be positive and increasing")));
    }
    let mut sq = vec![0.0; trial_counts.len()];
    let mut runs = 0.0;
    for (b, bag) in bags.iter().enumerate() {
        if subset > bag.len() {
            return Err(Error::contract(format!("subset of {subset} from {} tiles", bag.len())));
        }
        let feats: Tensor<f64> = bag.features.cast();
        let d = feats.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
        let w: Tensor<f64> = init::normal(&[d, 1], 1.0, &mut rng);
        let full = head_gradient(&feats, &w)?;
        for _ in 0..reps {
            let mut acc = vec![0.0; d];
            let mut next = 0;
            for t in 1..=*trial_counts.last().expect("non-empty") {
                let idx = index::sample(&mut rng, bag.len(), subset);
                let mut data = Vec::with_capacity(subset * d);
                for i in idx {
                    data.extend_from_slice(feats.row(i));
                }
                let g = head_gradient(&Tensor::new(&[subset, d], data)?, &w)?;
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                if t == trial_counts[next] {
                    let e: f64 = acc.iter().zip(&full).map(|(a, f)| (a / t as f64 - f).powi(2)).sum();
                    sq[next] += e;
                    next += 1;
                }
            }
            runs += 1.0;
        }
    }
    let errors: Vec<f64> = sq.iter().map(|s| (s / runs).sqrt()).collect();
    let xs: Vec<f64> = trial_counts.iter().map(|&t| t as f64).collect();
    let slope = if xs.len() >= 2 { loglog_slope(&xs, &errors)? } else { f64::NAN };
    Ok(UnbiasednessReport {
        trial_counts: trial_counts.to_vec(),
        errors,
        slope,
    })
}
