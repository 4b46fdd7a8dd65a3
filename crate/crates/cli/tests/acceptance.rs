//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 1 6`.

use std::fs;
use std::process::Command;
use std::time::Instant;

use pathrwkv::aggregation::{comb, identity, infer_slide};
use pathrwkv::data::{
    decode_bag, encode_bag, read_bag, synthesize_dataset, synthetic_tasks, write_bag, DatasetSpec, SampleMethod,
    SyntheticSlideSpec, TileBag,
};
use pathrwkv::model::{config_sidecar, ModelConfig, PathRwkv};
use pathrwkv::mtl::{total_loss, Label, LabelSet, MtlDesign, TaskSpec};
use pathrwkv::numerics::{init, Graph, Tensor};
use pathrwkv::train::{
    evaluate, evaluate_baseline, mean_gradient_unbiasedness, split_indices, train, train_baseline, variance_curve,
    bench_scaling, EvalMode, EvalOptions, Examples, TilePooling, TrainConfig,
};
use pathrwkv::verify::{model_gradient_check, probe_bag, probe_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Chunked recurrent inference against the recorded single-pass forward,
/// compared on the task head outputs.
fn chunk_exactness() -> Outcome {
    let start = Instant::now();
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for p in 0..20u64 {
        let design = MtlDesign::ALL[p as usize % 3];
        let m64 = probe_model::<f64>(6, 8, design, 100 + p).map_err(fail)?;
        let m32: PathRwkv<f32> = m64.cast();
        for n in [1usize, 13, 257] {
            let bag = probe_bag(n, 6, 1000 * p + n as u64);
            let mut g = Graph::new();
            let r64: Vec<Vec<f64>> = m64
                .forward_bag(&mut g, &bag)
                .map_err(fail)?
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect();
            let mut g = Graph::new();
            let r32: Vec<Vec<f32>> = m32
                .forward_bag(&mut g, &bag)
                .map_err(fail)?
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect();
            for size in [1, 7, 64, n] {
                let o64 = m64.head_outputs(&infer_slide(&m64, &bag, size).map_err(fail)?.pooled).map_err(fail)?;
                let o32 = m32.head_outputs(&infer_slide(&m32, &bag, size).map_err(fail)?.pooled).map_err(fail)?;
                for (a, b) in o64.iter().flatten().zip(r64.iter().flatten()) {
                    w64 = w64.max((a - b).abs());
                }
                for (a, b) in o32.iter().flatten().zip(r32.iter().flatten()) {
                    w32 = w32.max((a - b).abs() as f64);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        w64 <= 1e-10 && w32 <= 1e-4 && secs < 60.0,
        format!("max diff {w64:.1e} (f64), {w32:.1e} (f32), {secs:.1}s"),
    )
}

fn monoid_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let c = |a: &[f64], b: &[f64]| comb(a, b).expect("equal lengths");
    for case in 0..1000 {
        let len = rng.random_range(1..32);
        let mut draw = || -> Vec<f64> {
            (0..len)
                .map(|_| if rng.random_bool(0.2) { 0.5 } else { rng.random_range(-5.0..5.0) })
                .collect()
        };
        let (a, b, d) = (draw(), draw(), draw());
        let e = identity::<f64>(len);
        let laws = [
            ("associativity", bits(&c(&c(&a, &b), &d)) == bits(&c(&a, &c(&b, &d)))),
            ("commutativity", bits(&c(&a, &b)) == bits(&c(&b, &a))),
            ("idempotence", bits(&c(&a, &a)) == bits(&a)),
            ("identity", bits(&c(&a, &e)) == bits(&a) && bits(&c(&e, &a)) == bits(&a)),
        ];
        if let Some((law, _)) = laws.iter().find(|(_, ok)| !ok) {
            return Err(format!("{law} violated on triple {case}"));
        }
    }
    Ok("1000 triples bit-exact for all four laws".into())
}

fn gradients() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for design in MtlDesign::ALL {
        let r = model_gradient_check(design, 3).map_err(fail)?;
        ok &= r.passes(1e-4);
        parts.push(format!("{design}: {} params, worst rel {:.1e}", r.checked, r.worst_rel_error));
    }
    check(ok, parts.join("; "))
}

fn variance_reduction() -> Outcome {
    let model = probe_model::<f64>(6, 8, MtlDesign::Ours, 4).map_err(fail)?;
    let sizes = [1, 8, 64, 256, 0];
    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let bag = probe_bag(300, 6, 40 + s);
        let v = variance_curve(&model, &bag, &sizes, 1000, 1, s).map_err(fail)?;
        if v.windows(2).any(|w| w[1] > w[0]) || v[4] != 0.0 {
            return Err(format!("slide {s}: {v:?}"));
        }
        worst = worst.max(v[3] / v[2]);
    }
    Ok(format!("20 slides x 1000 trials, non-increasing, 0 at N; var(256)/var(64) <= {worst:.3}"))
}

fn unbiasedness() -> Outcome {
    let bags: Vec<TileBag> = (0..4).map(|i| probe_bag(200, 16, 50 + i)).collect();
    let r = mean_gradient_unbiasedness(&bags, 8, &[100, 1000, 10000], 8, 5).map_err(fail)?;
    check(
        (r.slope + 0.5).abs() <= 0.15,
        format!("errors {:.2e} {:.2e} {:.2e}, slope {:.3}", r.errors[0], r.errors[1], r.errors[2], r.slope),
    )
}

fn synthetic_data(n: usize, grid: usize, seed: u64) -> Result<Examples, String> {
    let spec = DatasetSpec {
        n_slides: n,
        slide: SyntheticSlideSpec {
            grid_w: grid,
            grid_h: grid,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let samples = synthesize_dataset(&spec, 1).map_err(fail)?;
    Ok(Examples::from_samples(synthetic_tasks(), &samples))
}

fn small_model(d_in: usize, dim: usize, tasks: Vec<TaskSpec>, seed: u64) -> Result<PathRwkv<f32>, String> {
    let mut cfg = ModelConfig::new(d_in, dim, tasks);
    cfg.lora_rank = 8;
    cfg.decay_rank = 8;
    PathRwkv::init(cfg, seed).map_err(fail)
}

fn synthetic_learning() -> Outcome {
    let start = Instant::now();
    let all = synthetic_data(220, 48, 7)?;
    let ex = all.restrict(&["witness".into(), "fraction".into()]).map_err(fail)?;
    let [tr, _, te] = split_indices(ex.len(), (160, 20, 40), 1).map_err(fail)?;
    let (train_set, test_set) = (ex.subset(&tr), ex.subset(&te));
    let tc = TrainConfig {
        epochs: 20,
        warmup_epochs: 2,
        base_lr: 1e-3,
        ..Default::default()
    };
    let mut model = small_model(384, 32, ex.tasks.clone(), 1)?;
    train(&mut model, &tc, &train_set).map_err(fail)?;
    let ev = evaluate(&model, &test_set, &EvalOptions::for_training(&tc, EvalMode::Recurrent)).map_err(fail)?;
    let witness = ev.report.task("witness").ok_or("no witness metrics")?;
    let fraction = ev.report.task("fraction").ok_or("no fraction metrics")?;

    let witness_only = train_set.restrict(&["witness".into()]).map_err(fail)?;
    let (base, _) = train_baseline::<f32>(&witness_only, TilePooling::Ave, &tc).map_err(fail)?;
    let base_rep = evaluate_baseline(&base, &test_set.restrict(&["witness".into()]).map_err(fail)?).map_err(fail)?;
    let base_acc = base_rep.task("witness").and_then(|t| t.accuracy).ok_or("no baseline accuracy")?;

    let acc = witness.accuracy.ok_or("no accuracy")?;
    let auc = witness.auc.ok_or("no AUC")?;
    let r = fraction.pearson.ok_or("no Pearson")?;
    let secs = start.elapsed().as_secs_f64();
    check(
        acc >= 0.95 && auc >= 0.97 && acc - base_acc >= 0.05 && r >= 0.90 && secs < 1800.0,
        format!(
            "accuracy {acc:.3}, AUC {auc:.3}, SlideAve accuracy {base_acc:.3}, fraction Pearson {r:.3}, {secs:.0}s"
        ),
    )
}

fn structure_benefit() -> Outcome {
    let all = synthetic_data(100, 32, 11)?;
    let ex = all.restrict(&["witness".into(), "burden".into()]).map_err(fail)?;
    let min_n = ex.items.iter().map(|e| e.bag.len()).min().unwrap_or(0);
    let max_n_tiles = 64;
    if min_n <= max_n_tiles {
        return Err(format!("smallest slide has {min_n} tiles, not above {max_n_tiles}"));
    }
    let (mut rec, mut sam) = (0.0, 0.0);
    for seed in 0..5u64 {
        let [tr, _, te] = split_indices(ex.len(), (70, 0, 30), seed).map_err(fail)?;
        let tc = TrainConfig {
            epochs: 10,
            warmup_epochs: 1,
            base_lr: 1e-3,
            max_n_tiles,
            sampling: SampleMethod::Random,
            seed,
            ..Default::default()
        };
        let mut model = small_model(384, 16, ex.tasks.clone(), seed)?;
        train(&mut model, &tc, &ex.subset(&tr)).map_err(fail)?;
        let test = ex.subset(&te);
        for (mode, acc) in [(EvalMode::Recurrent, &mut rec), (EvalMode::Sampled, &mut sam)] {
            let ev = evaluate(&model, &test, &EvalOptions::for_training(&tc, mode)).map_err(fail)?;
            *acc += ev.report.mean_auc().ok_or("no AUC")? / 5.0;
        }
    }
    check(
        rec >= sam,
        format!("mean AUC over 5 seeds: recurrent {rec:.3}, sampled {sam:.3} (N >= {min_n} > {max_n_tiles})"),
    )
}

fn scaling() -> Outcome {
    let start = Instant::now();
    let model = probe_model::<f32>(32, 32, MtlDesign::Ours, 8).map_err(fail)?;
    let grid = [1024, 2048, 4096, 8192, 16384, 32768];
    let r = bench_scaling(&model, &grid, 512, 4096, 3, 8).map_err(fail)?;
    let q = r.quadratic_slope.unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    check(
        (0.8..=1.2).contains(&r.recurrent_slope) && (1.7..=2.3).contains(&q) && r.memory_spread < 0.1 && secs < 600.0,
        format!(
            "recurrent slope {:.3}, quadratic slope {q:.3}, memory spread {:.3}, {secs:.0}s",
            r.recurrent_slope, r.memory_spread
        ),
    )
}

fn mtl_plumbing() -> Outcome {
    let tasks = synthetic_tasks();
    let bag = probe_bag(20, 384, 9);
    let labels = LabelSet(vec![Some(Label::Class(1)), None, Some(Label::Value(0.3)), None]);
    for design in MtlDesign::ALL {
        let mut cfg = ModelConfig::new(384, 16, tasks.clone());
        cfg.mtl_design = design;
        cfg.lora_rank = 4;
        cfg.decay_rank = 4;
        let model = PathRwkv::<f64>::init(cfg, 9).map_err(fail)?;
        let mut g = Graph::new();
        let preds = model.forward_bag(&mut g, &bag).map_err(fail)?;
        let loss = total_loss(&mut g, &preds, &labels, &tasks).map_err(fail)?.ok_or("no loss")?;
        g.backward(loss).map_err(fail)?;
        for (t, label) in tasks.iter().zip(&labels.0) {
            for part in ["weight", "bias"] {
                let name = format!("head.{}.{part}", t.name);
                let v = g.param_var(&name).ok_or(format!("{name} not recorded"))?;
                let zero = g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0));
                if zero != label.is_none() {
                    return Err(format!("{design}: `{name}` zero gradient {zero} with label {label:?}"));
                }
            }
        }
    }

    let spec = DatasetSpec {
        n_slides: 24,
        slide: SyntheticSlideSpec {
            grid_w: 16,
            grid_h: 16,
            missing_rate: 0.3,
            seed: 12,
            ..Default::default()
        },
        ..Default::default()
    };
    let samples = synthesize_dataset(&spec, 1).map_err(fail)?;
    let ex = Examples::from_samples(synthetic_tasks(), &samples);
    let tc = TrainConfig {
        epochs: 2,
        warmup_epochs: 0,
        base_lr: 1e-3,
        ..Default::default()
    };
    let mut model = small_model(384, 16, ex.tasks.clone(), 12)?;
    train(&mut model, &tc, &ex.subset(&(0..16).collect::<Vec<_>>())).map_err(fail)?;
    let ev = evaluate(&model, &ex.subset(&(16..24).collect::<Vec<_>>()), &EvalOptions::for_training(&tc, EvalMode::Recurrent))
        .map_err(fail)?;
    let names: Vec<&str> = ev.report.tasks.iter().map(|t| t.task.as_str()).collect();
    check(
        names == ["witness", "burden", "fraction", "stain"],
        format!("absent heads get zero gradient in all designs; MTL-All reports {names:?}"),
    )
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let n = rng.random_range(1..200);
        let d = rng.random_range(1..64);
        let mut feats: Tensor<f32> = init::normal(&[n, d], 3.0, &mut rng);
        if i % 10 == 0 {
            feats.data_mut()[0] = -0.0;
        }
        let coords = (0..n).map(|_| (rng.random_range(-500..500), rng.random_range(-500..500))).collect();
        let bag = TileBag::new(format!("s{i}"), feats, coords).map_err(fail)?;
        let path = dir.path().join(format!("s{i}.bag"));
        write_bag(&path, &bag).map_err(fail)?;
        let back = read_bag(&path).map_err(fail)?;
        let same_bits = back.features.data().iter().map(|x| x.to_bits()).eq(bag.features.data().iter().map(|x| x.to_bits()));
        if !same_bits || back.coords != bag.coords || back.features.shape() != bag.features.shape() {
            return Err(format!("bag {i} ({n}x{d}) changed on round trip"));
        }
    }

    // Corrupted files through the binary.
    let bag = probe_bag(10, 8, 1);
    let mut cfg = ModelConfig::new(8, 8, vec![TaskSpec::regression("value")]);
    cfg.lora_rank = 2;
    cfg.decay_rank = 2;
    let ckpt = dir.path().join("m.prwk");
    PathRwkv::<f32>::init(cfg, 1).map_err(fail)?.save(&ckpt).map_err(fail)?;
    if !config_sidecar(&ckpt).exists() {
        return Err("checkpoint sidecar missing".into());
    }
    let good = encode_bag(&bag);
    decode_bag(&good, "x").map_err(fail)?;
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_len = good.clone();
    bad_len[8] = bad_len[8].wrapping_add(1);
    let cases: [(&str, Vec<u8>); 4] = [
        ("truncated", good[..good.len() - 3].to_vec()),
        ("bad magic", bad_magic),
        ("bad header", bad_len),
        ("empty", Vec::new()),
    ];
    let mut seen = Vec::new();
    for (name, bytes) in cases {
        let path = dir.path().join(format!("{}.bag", name.replace(' ', "_")));
        fs::write(&path, bytes).map_err(fail)?;
        let out = Command::new(env!("CARGO_BIN_EXE_pathrwkv"))
            .arg("infer")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg(&path)
            .env("RUST_LOG", "error")
            .output()
            .map_err(fail)?;
        seen.push(format!("{name} -> {}", out.status.code().unwrap_or(-1)));
        if out.status.code() != Some(2) {
            return Err(format!("{}: {}", seen.join(", "), String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(format!("100 bags bit-exact; {}", seen.join(", ")))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "chunk exactness", chunk_exactness),
    (2, "comb monoid laws", monoid_laws),
    (3, "gradient correctness", gradients),
    (4, "variance reduction", variance_reduction),
    (5, "mean-aggregator unbiasedness", unbiasedness),
    (6, "synthetic learning", synthetic_learning),
    (7, "recurrent structure benefit", structure_benefit),
    (8, "scaling", scaling),
    (9, "multi-task plumbing", mtl_plumbing),
    (10, "format round-trip", format_round_trip),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {name:<30} {tag}  {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
