use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::infer_bags;
use crate::error::{Error, Result};
use crate::model::PathRwkv;
use crate::numerics::{init, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub recurrent_s: f64,
    /// `None` above the reference size limit.
    pub quadratic_s: Option<f64>,
    pub peak_activation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub bag_size: usize,
    pub rows: Vec<ScalingRow>,
    pub recurrent_slope: f64,
    pub quadratic_slope: Option<f64>,
    /// `(max - min) / max` of the peak activation over the grid.
    pub memory_spread: f64,
}

impl ScalingReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("n\trecurrent_s\tquadratic_s\tpeak_activation\n");
        for r in &self.rows {
            let q = r.quadratic_s.map_or("-".to_string(), |q| format!("{q:.6}"));
            let _ = writeln!(out, "{}\t{:.6}\t{q}\t{}", r.n, r.recurrent_s, r.peak_activation);
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract("slope needs at least two paired points"));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::contract("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Full softmax self-attention over the rows of `x` followed by a column
/// max; every row attends to every row, so the cost is quadratic in N.
pub fn quadratic_attention_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (n, d) = (x.rows(), x.cols());
    let scale = T::one() / T::from_usize(d).expect("width").sqrt();
    let mut pooled = vec![T::neg_infinity(); d];
    let mut scores = vec![T::zero(); n];
    let mut out = vec![T::zero(); d];
    for i in 0..n {
        let q = x.row(i);
        let mut m = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            *s = q.iter().zip(x.row(j)).map(|(&a, &b)| a * b).sum::<T>() * scale;
            m = m.max(*s);
        }
        let mut z = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z = z + *s;
        }
        out.iter_mut().for_each(|o| *o = T::zero());
        for (j, &s) in scores.iter().enumerate() {
            let w = s / z;
            out.iter_mut().zip(x.row(j)).for_each(|(o, &v)| *o = *o + w * v);
        }
        pooled.iter_mut().zip(&out).for_each(|(p, &o)| *p = p.max(o));
    }
    pooled
}

fn grid_coords(n: usize) -> Vec<(i32, i32)> {
    let w = (n as f64).sqrt().ceil() as usize;
    (0..n).map(|i| ((i % w) as i32, (i / w) as i32)).collect()
}

fn best_of<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times recurrent inference of `model` on random slides of each size in
/// `n_grid` (best of `reps`), alongside the quadratic reference for sizes up
/// to `quadratic_max_n`, and records the activation peak of each run.
pub fn bench_scaling<T: Scalar>(
    model: &PathRwkv<T>,
    n_grid: &[usize],
    bag_size: usize,
    quadratic_max_n: usize,
    reps: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] == 0 {
        return Err(Error::contract(format!("N grid {n_grid:?} must be positive and increasing")));
    }
    if bag_size == 0 {
        return Err(Error::contract("bag size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = model.cfg.d_in;
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let feats: Tensor<T> = init::uniform(&[n, d_in], 1.0, &mut rng);
        let coords = grid_coords(n);
        let mut peak = 0;
        let recurrent_s = best_of(reps, || {
            let bags = (0..n).step_by(bag_size).map(|s| {
                let e = (s + bag_size).min(n);
                let data = feats.data()[s * d_in..e * d_in].to_vec();
                (Tensor::new(&[e - s, d_in], data).expect("row range"), coords[s..e].to_vec())
            });
            peak = infer_bags(model, bags)?.peak_activation;
            Ok(())
        })?;
        let quadratic_s = if n <= quadratic_max_n {
            Some(best_of(reps, || {
                let x = model.embed_tensor(&feats, &coords)?;
                std::hint::black_box(quadratic_attention_pool(&x));
                Ok(())
            })?)
        } else {
            None
        };
        log::info!("bench N={n}: recurrent {recurrent_s:.4}s, quadratic {quadratic_s:?}");
        rows.push(ScalingRow {
            n,
            recurrent_s,
            quadratic_s,
            peak_activation: peak,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let recurrent_slope = if rows.len() >= 2 {
        loglog_slope(&ns, &rows.iter().map(|r| r.recurrent_s).collect::<Vec<_>>())?
    } else {
        f64::NAN
    };
    let q: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.quadratic_s.map(|s| (r.n as f64, s)))
        .collect();
    let quadratic_slope = if q.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = q.into_iter().unzip();
        Some(loglog_slope(&x, &y)?)
    } else {
        None
    };
    let hi = rows.iter().map(|r| r.peak_activation).max().unwrap_or(0) as f64;
    let lo = rows.iter().map(|r| r.peak_activation).min().unwrap_or(0) as f64;
    Ok(ScalingReport {
        bag_size,
        rows,
        recurrent_slope,
        quadratic_slope,
        memory_spread: if hi > 0.0 { (hi - lo) / hi } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::mtl::TaskSpec;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn attention_pool_matches_matrix_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = init::uniform(&[6, 4], 1.0, &mut rng);
        let mut s = x.matmul(&transpose(&x)).unwrap();
        for i in 0..6 {
            let row = s.row_mut(i);
            row.iter_mut().for_each(|v| *v /= 2.0);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
        let out = s.matmul(&x).unwrap();
        let want: Vec<f64> = (0..4).map(|c| (0..6).map(|r| out.at(r, c)).fold(f64::NEG_INFINITY, f64::max)).collect();
        let got = quadratic_attention_pool(&x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn transpose(x: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (x.rows(), x.cols());
        Tensor::from_fn(&[c, r], |i| x.at(i % r, i / r))
    }

    #[test]
    fn bench_rows_and_flat_memory() {
        let mut cfg = ModelConfig::new(8, 8, vec![TaskSpec::classification("a", 2)]);
        cfg.heads = 2;
        cfg.lora_rank = 2;
        cfg.decay_rank = 2;
        cfg.ffn_dim = 16;
        let m = PathRwkv::<f32>::init(cfg, 0).unwrap();
        let r = bench_scaling(&m, &[64, 128, 256], 32, 128, 1, 0).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.memory_spread, 0.0);
        assert!(r.rows[2].quadratic_s.is_none());
        assert!(r.quadratic_slope.is_some());
        assert!(bench_scaling(&m, &[128, 64], 32, 0, 1, 0).is_err());
    }
}
