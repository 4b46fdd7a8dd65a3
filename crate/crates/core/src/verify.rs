//! The property suite behind `pathrwkv verify`.
//!
//! Each property runs over a sequence of derived seeds and stops at the
//! first failure, reporting that seed so the case can be replayed.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{comb, identity, infer_slide, single_pass_pooled};
use crate::data::TileBag;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PathRwkv};
use crate::mtl::{total_loss, Label, LabelSet, MtlDesign, TaskSpec};
use crate::numerics::gradcheck::{check_gradients, GradCheckReport};
use crate::numerics::{init, Scalar, Tensor};
use crate::train::{auc, bench_scaling, derive_seed, mean_gradient_unbiasedness, pearson, variance_curve};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    #[default]
    Fast,
    Full,
}

impl FromStr for VerifyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(VerifyLevel::Fast),
            "full" => Ok(VerifyLevel::Full),
            _ => Err(Error::config(format!("unknown verify level `{s}` (fast, full)"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub level: VerifyLevel,
    pub seed: u64,
    /// Replaces the max combine with an element-wise mean, to show that the
    /// monoid checks catch it.
    pub mutate_comb: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Seed of the failing case.
    pub counterexample_seed: Option<u64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = write!(out, "{status} {:<28} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            if let Some(s) = r.counterexample_seed {
                let _ = write!(out, " (seed {s})");
            }
            out.push('\n');
        }
        out
    }
}

/// Outcome of one property: `Err((detail, seed))` on failure.
type Outcome = std::result::Result<String, (String, Option<u64>)>;

fn record(name: &str, f: impl FnOnce() -> Outcome) -> PropertyResult {
    let start = Instant::now();
    let (passed, detail, seed) = match f() {
        Ok(d) => (true, d, None),
        Err((d, s)) => (false, d, s),
    };
    PropertyResult {
        name: name.to_string(),
        passed,
        detail,
        counterexample_seed: seed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn internal(e: Error) -> (String, Option<u64>) {
    (format!("error: {e}"), None)
}

pub type CombFn = fn(&[f64], &[f64]) -> Vec<f64>;

pub fn max_comb(a: &[f64], b: &[f64]) -> Vec<f64> {
    comb(a, b).expect("equal lengths")
}

pub fn mean_comb(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Random vector with repeated values and signed zeros mixed in.
fn monoid_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| match rng.random_range(0..8) {
            0 => 0.0,
            1 => 1.5,
            2 => -2.25,
            _ => rng.random_range(-10.0..10.0),
        })
        .collect()
}

/// Checks the four monoid laws of `f` over `cases` random triples; one
/// result per law, each bit-exact.
pub fn check_monoid_laws(f: CombFn, cases: usize, seed: u64) -> Vec<PropertyResult> {
    type Law = fn(CombFn, &[f64], &[f64], &[f64]) -> bool;
    let laws: [(&str, Law); 4] = [
        ("comb.associativity", |f, a, b, c| bits(&f(&f(a, b), c)) == bits(&f(a, &f(b, c)))),
        ("comb.commutativity", |f, a, b, _| bits(&f(a, b)) == bits(&f(b, a))),
        ("comb.idempotence", |f, a, _, _| bits(&f(a, a)) == bits(a)),
        ("comb.identity", |f, a, _, _| {
            let e = identity::<f64>(a.len());
            bits(&f(a, &e)) == bits(a) && bits(&f(&e, a)) == bits(a)
        }),
    ];
    laws.iter()
        .map(|(name, law)| {
            record(name, || {
                for i in 0..cases {
                    let s = derive_seed(seed, &[i as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let len = rng.random_range(1..24);
                    let (a, b, c) = (
                        monoid_vector(&mut rng, len),
                        monoid_vector(&mut rng, len),
                        monoid_vector(&mut rng, len),
                    );
                    if !law(f, &a, &b, &c) {
                        return Err((format!("violated on case {i} (length {len})"), Some(s)));
                    }
                }
                Ok(format!("{cases} triples bit-exact"))
            })
        })
        .collect()
}

/// A small random model for property checks.
pub fn probe_model<T: Scalar>(d_in: usize, dim: usize, design: MtlDesign, seed: u64) -> Result<PathRwkv<T>> {
    let cfg = ModelConfig {
        d_in,
        dim,
        depth: 2,
        heads: 2,
        lora_rank: 3,
        decay_rank: 4,
        ffn_dim: dim * 2,
        use_pe: true,
        tasks: vec![TaskSpec::classification("class", 3), TaskSpec::regression("value")],
        mtl_design: design,
        norm_eps: 1e-5,
    };
    PathRwkv::init(cfg, seed)
}

/// A bag of `n` random tiles on a grid.
pub fn probe_bag(n: usize, d_in: usize, seed: u64) -> TileBag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats: Tensor<f32> = init::normal(&[n, d_in], 1.0, &mut rng);
    let w = (n as f64).sqrt().ceil().max(1.0) as i32;
    TileBag::new("probe", feats, (0..n as i32).map(|i| (i % w, i / w)).collect()).expect("valid probe bag")
}

/// Largest absolute difference between chunked and single-pass pooled
/// features over bag sizes `sizes` (0 stands for N).
pub fn chunk_gap<T: Scalar>(model: &PathRwkv<T>, bag: &TileBag, sizes: &[usize]) -> Result<f64> {
    let reference = single_pass_pooled(model, bag)?;
    let mut worst = 0.0f64;
    for &s in sizes {
        let s = if s == 0 { bag.len() } else { s };
        let out = infer_slide(model, bag, s)?;
        for (a, b) in out.pooled.iter().flatten().zip(reference.iter().flatten()) {
            worst = worst.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    Ok(worst)
}

/// Chunk exactness over `pairs` random (model, slide) pairs in both
/// precisions.
pub fn check_chunk_exactness(pairs: usize, seed: u64) -> PropertyResult {
    record("chunk_exactness", || {
        let (mut w64, mut w32) = (0.0f64, 0.0f64);
        for p in 0..pairs {
            let s = derive_seed(seed, &[p as u64]);
            let design = MtlDesign::ALL[p % MtlDesign::ALL.len()];
            let m64 = probe_model::<f64>(6, 8, design, s).map_err(internal)?;
            let m32: PathRwkv<f32> = m64.cast();
            for n in [1usize, 13, 257] {
                let bag = probe_bag(n, 6, s ^ n as u64);
                let g64 = chunk_gap(&m64, &bag, &[1, 7, 64, 0]).map_err(internal)?;
                let g32 = chunk_gap(&m32, &bag, &[1, 7, 64, 0]).map_err(internal)?;
                w64 = w64.max(g64);
                w32 = w32.max(g32);
                if g64 > 1e-10 || g32 > 1e-4 {
                    return Err((
                        format!("{design} model, N={n}: gap {g64:.2e} (64-bit), {g32:.2e} (32-bit)"),
                        Some(s),
                    ));
                }
            }
        }
        Ok(format!("{pairs} pairs, worst gap {w64:.1e} (64-bit), {w32:.1e} (32-bit)"))
    })
}

/// Finite-difference check of every parameter of a D=8, two-block,
/// two-head, two-task model.
pub fn model_gradient_check(design: MtlDesign, seed: u64) -> Result<GradCheckReport> {
    let mut model = probe_model::<f64>(5, 8, design, seed)?;
    model.cfg.tasks = vec![TaskSpec::classification("class", 3), TaskSpec::regression("value")];
    let bag = probe_bag(6, 5, seed);
    let feats: Tensor<f64> = bag.features.cast();
    let labels = LabelSet(vec![Some(Label::Class(1)), Some(Label::Value(0.37))]);
    let cfg = model.cfg.clone();
    check_gradients(&model.store, 1e-6, |_| true, |store, g| {
        let m = PathRwkv {
            cfg: cfg.clone(),
            store: store.clone(),
            target_stats: model.target_stats.clone(),
        };
        let preds = m.forward(g, &feats, &bag.coords)?;
        total_loss(g, &preds, &labels, &cfg.tasks)?.ok_or_else(|| Error::contract("labels present"))
    })
}

pub fn check_gradients_all_designs(seed: u64) -> PropertyResult {
    record("gradient_check", || {
        let mut summary = Vec::new();
        for design in MtlDesign::ALL {
            let r = model_gradient_check(design, seed).map_err(internal)?;
            if !r.passes(1e-4) {
                return Err((
                    format!(
                        "{design}: `{}`[{}] analytic {:.6e} numeric {:.6e} (rel {:.2e})",
                        r.worst_param, r.worst_index, r.analytic, r.numeric, r.worst_rel_error
                    ),
                    Some(seed),
                ));
            }
            summary.push(format!("{design} {} params rel {:.1e}", r.checked, r.worst_rel_error));
        }
        Ok(summary.join("; "))
    })
}

/// Prediction variance over subset sizes `sizes` (0 stands for N) on
/// `slides` random slides of `n` tiles.
pub fn check_variance_reduction(slides: usize, n: usize, trials: usize, sizes: &[usize], seed: u64) -> PropertyResult {
    record("variance_reduction", || {
        let model = probe_model::<f64>(6, 8, MtlDesign::Ours, seed).map_err(internal)?;
        let mut worst_ratio = 0.0f64;
        for i in 0..slides {
            let s = derive_seed(seed, &[i as u64]);
            let bag = probe_bag(n, 6, s);
            let v = variance_curve(&model, &bag, sizes, trials, 1, s).map_err(internal)?;
            if v.windows(2).any(|w| w[1] > w[0]) || *v.last().unwrap_or(&0.0) != 0.0 {
                return Err((format!("slide {i}: variances {v:?}"), Some(s)));
            }
            for w in v.windows(2).filter(|w| w[0] > 0.0) {
                worst_ratio = worst_ratio.max(w[1] / w[0]);
            }
        }
        Ok(format!(
            "{slides} slides x {trials} trials, largest successive ratio {worst_ratio:.3}"
        ))
    })
}

pub fn check_unbiasedness(slides: usize, reps: usize, trial_counts: &[usize], seed: u64) -> PropertyResult {
    record("mean_gradient_unbiasedness", || {
        let bags: Vec<TileBag> = (0..slides).map(|i| probe_bag(200, 16, derive_seed(seed, &[i as u64]))).collect();
        let r = mean_gradient_unbiasedness(&bags, 8, trial_counts, reps, seed).map_err(internal)?;
        let detail = format!("errors {:?}, slope {:.3}", r.errors, r.slope);
        if (r.slope + 0.5).abs() <= 0.15 {
            Ok(detail)
        } else {
            Err((detail, Some(seed)))
        }
    })
}

pub fn check_metric_oracles(cases: usize, seed: u64) -> PropertyResult {
    record("metric_oracles", || {
        for i in 0..cases {
            let s = derive_seed(seed, &[i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let n = rng.random_range(2..=50);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).floor()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let (mut wins, mut pairs) = (0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    if labels[a] && !labels[b] {
                        pairs += 1.0;
                        wins += match scores[a].partial_cmp(&scores[b]) {
                            Some(std::cmp::Ordering::Greater) => 1.0,
                            Some(std::cmp::Ordering::Equal) => 0.5,
                            _ => 0.0,
                        };
                    }
                }
            }
            let got = auc(&scores, &labels).map_err(internal)?;
            if got != wins / pairs {
                return Err((format!("AUC {got} vs pairwise {}", wins / pairs), Some(s)));
            }
            let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
            let (mx, my) = (x.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
            let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            let want = cov / (vx * vy).sqrt();
            let got = pearson(&x, &y).map_err(internal)?;
            if (got - want).abs() > 1e-12 {
                return Err((format!("Pearson {got} vs two-pass {want}"), Some(s)));
            }
        }
        Ok(format!("{cases} random cases"))
    })
}

pub fn check_scaling(seed: u64) -> PropertyResult {
    record("scaling", || {
        let model = probe_model::<f32>(32, 32, MtlDesign::Ours, seed).map_err(internal)?;
        let grid = [1024, 2048, 4096, 8192, 16384, 32768];
        let r = bench_scaling(&model, &grid, 512, 4096, 3, seed).map_err(internal)?;
        let q = r.quadratic_slope.unwrap_or(f64::NAN);
        let detail = format!(
            "recurrent slope {:.3}, quadratic slope {q:.3}, memory spread {:.3}",
            r.recurrent_slope, r.memory_spread
        );
        let ok = (0.8..=1.2).contains(&r.recurrent_slope) && (1.7..=2.3).contains(&q) && r.memory_spread < 0.1;
        if ok {
            Ok(detail)
        } else {
            Err((detail, Some(seed)))
        }
    })
}

/// Runs the suite. The fast level uses reduced trial counts; the full level
/// uses acceptance-sized runs and adds the scaling bench.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let seed = opts.seed;
    let full = opts.level == VerifyLevel::Full;
    let comb_fn: CombFn = if opts.mutate_comb { mean_comb } else { max_comb };
    let mut results = check_monoid_laws(comb_fn, 1000, seed);
    results.push(check_chunk_exactness(if full { 20 } else { 6 }, seed));
    results.push(check_gradients_all_designs(seed));
    results.push(if full {
        check_variance_reduction(20, 300, 1000, &[1, 8, 64, 256, 0], seed)
    } else {
        check_variance_reduction(3, 300, 300, &[1, 8, 64, 256, 0], seed)
    });
    results.push(if full {
        check_unbiasedness(4, 8, &[100, 1000, 10000], seed)
    } else {
        check_unbiasedness(2, 6, &[100, 1000, 10000], seed)
    });
    results.push(check_metric_oracles(if full { 2000 } else { 300 }, seed));
    if full {
        results.push(check_scaling(seed));
    }
    VerifyReport { results }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_satisfies_laws_and_mean_does_not() {
        assert!(check_monoid_laws(max_comb, 300, 1).iter().all(|r| r.passed));
        let broken: Vec<String> = check_monoid_laws(mean_comb, 300, 1)
            .into_iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        assert!(broken.contains(&"comb.associativity".to_string()));
        assert!(broken.contains(&"comb.identity".to_string()));
    }

    #[test]
    fn gradients_of_every_design() {
        let r = check_gradients_all_designs(3);
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn chunking_is_exact() {
        let r = check_chunk_exactness(3, 2);
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn failures_carry_seeds() {
        let r = check_monoid_laws(mean_comb, 10, 5);
        let f = r.iter().find(|r| !r.passed).unwrap();
        assert!(f.counterexample_seed.is_some());
        let report = VerifyReport { results: r };
        assert!(!report.all_passed());
        assert!(report.to_text().contains("FAIL"));
    }
}
