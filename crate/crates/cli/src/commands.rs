use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use pathrwkv::data::{read_bag, synthesize_dataset, synthetic_tasks, write_dataset, Dataset, MANIFEST_FILE, TASKS_FILE};
use pathrwkv::model::{PathRwkv, TaskOutput};
use pathrwkv::mtl::TaskKind;
use pathrwkv::numerics::Scalar;
use pathrwkv::train::{
    bench_scaling, evaluate, predict_slide, run_ablation, split_counts, split_indices, AblationAxis,
    AblationSetup, EvalMode, Examples, MetricReport, Precision,
};
use pathrwkv::verify::{run_verify, VerifyOptions};
use pathrwkv::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn gen(cfg: &RunConfig, out: Option<PathBuf>, force: bool) -> Result<u8> {
    let root = out.unwrap_or_else(|| cfg.data_dir.clone());
    if cfg.n_slides == 0 {
        return Err(Error::Config("at least one slide must be requested".into()));
    }
    if root.exists() {
        let non_empty = fs::read_dir(&root).map_err(io_err(&root))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                root.display()
            )));
        }
        if non_empty {
            let bags = root.join("bags");
            if bags.is_dir() {
                fs::remove_dir_all(&bags).map_err(io_err(&bags))?;
            }
        }
    }
    let spec = cfg.dataset_spec();
    let samples = synthesize_dataset(&spec, cfg.workers)?;
    let tasks = synthetic_tasks();
    let ds = write_dataset(&root, &samples, &tasks)?;
    let tiles: usize = samples.iter().map(|s| s.bag.len()).sum();
    let positives = samples.iter().filter(|s| s.truth.positive).count();
    println!(
        "wrote {} slides to {} ({} tiles, {:.1} per slide, {} positive)",
        samples.len(),
        root.display(),
        tiles,
        tiles as f64 / samples.len() as f64,
        positives
    );
    for (i, t) in tasks.iter().enumerate() {
        let present = samples.iter().filter(|s| s.labels.get(i).is_some()).count();
        println!("  task {:<10} labelled on {present} slides", t.name);
    }
    println!("manifest sha256 {}", sha256_hex(ds.manifest_text()?.as_bytes()));
    println!("config sha256 {}", cfg.hash()?);
    Ok(0)
}

fn load_examples(cfg: &RunConfig, data: Option<PathBuf>) -> Result<Examples> {
    let root = data.unwrap_or_else(|| cfg.data_dir.clone());
    if !root.join(MANIFEST_FILE).is_file() || !root.join(TASKS_FILE).is_file() {
        return Err(Error::Io {
            path: root.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset (manifest.csv, tasks.json) here"),
        });
    }
    let ex = Examples::load(&Dataset::load(&root)?)?;
    if cfg.tasks.is_empty() {
        Ok(ex)
    } else {
        ex.restrict(&cfg.tasks)
    }
}

/// Train and test parts of the seeded split.
fn split(cfg: &RunConfig, ex: &Examples) -> Result<(Examples, Examples)> {
    let counts = split_counts(ex.len(), cfg.split_train, cfg.split_val);
    let [tr, _, te] = split_indices(ex.len(), counts, cfg.seed)?;
    if tr.is_empty() {
        return Err(Error::Config(format!("split leaves no training slides out of {}", ex.len())));
    }
    Ok((ex.subset(&tr), ex.subset(&te)))
}

fn report_text(report: &MetricReport, label: &str) -> String {
    let mut s = format!("{label}:");
    for t in &report.tasks {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        if t.pearson.is_some() || (t.accuracy.is_none() && t.auc.is_none()) {
            s.push_str(&format!("  {} corr {}", t.task, f(t.pearson)));
        } else {
            s.push_str(&format!("  {} acc {} auc {}", t.task, f(t.accuracy), f(t.auc)));
        }
    }
    s
}

fn append_summary(path: &Path, record: serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{record}").map_err(io_err(path))
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    train_set: &Examples,
    test_set: &Examples,
    ckpt: &Path,
) -> Result<serde_json::Value> {
    let d_in = train_set.items[0].bag.dim();
    let mut model = PathRwkv::<T>::init(cfg.model_config(d_in, train_set.tasks.clone()), cfg.seed)?;
    let tc = cfg.train_config();
    info!(
        "training {} parameters on {} slides for {} epochs",
        model.store.num_scalars(),
        train_set.len(),
        tc.epochs
    );
    let rep = pathrwkv::train::train(&mut model, &tc, train_set)?;
    model.save(ckpt)?;
    println!("saved {}", ckpt.display());
    let mut metrics = serde_json::Map::new();
    if !test_set.is_empty() {
        for mode in [EvalMode::Sampled, EvalMode::Recurrent] {
            let ev = evaluate(&model, test_set, &cfg.eval_options(mode))?;
            println!("{}", report_text(&ev.report, &format!("test {mode:?}")));
            metrics.insert(format!("{mode:?}").to_lowercase(), serde_json::to_value(&ev.report).expect("report"));
        }
    }
    println!("final training loss {:.5}", rep.loss_curve.last().copied().unwrap_or(f64::NAN));
    Ok(json!({
        "loss_curve": rep.loss_curve,
        "train_wall_s": rep.wall_time_s,
        "steps": rep.steps,
        "metrics": metrics,
    }))
}

pub fn train(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, summary: Option<PathBuf>) -> Result<u8> {
    let ex = load_examples(cfg, data)?;
    let (train_set, test_set) = split(cfg, &ex)?;
    let ckpt = out.unwrap_or_else(|| cfg.checkpoint.clone());
    if ckpt.exists() {
        info!("overwriting {}", ckpt.display());
    }
    let body = match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &train_set, &test_set, &ckpt)?,
        Precision::F64 => train_typed::<f64>(cfg, &train_set, &test_set, &ckpt)?,
    };
    let mut record = json!({
        "command": "train",
        "config_hash": cfg.hash()?,
        "seed": cfg.seed,
        "checkpoint": ckpt,
        "train_slides": train_set.len(),
        "test_slides": test_set.len(),
    });
    if let (Some(r), serde_json::Value::Object(b)) = (record.as_object_mut(), body) {
        r.extend(b);
    }
    let summary = summary.unwrap_or_else(|| ckpt.with_extension("runs.jsonl"));
    append_summary(&summary, record)?;
    println!("summary appended to {}", summary.display());
    Ok(0)
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, ckpt: &Path, test_set: &Examples) -> Result<()> {
    let model = PathRwkv::<T>::load(ckpt)?;
    let ev = evaluate(&model, test_set, &cfg.eval_options(cfg.mode))?;
    println!("{}", report_text(&ev.report, &format!("{:?} on {} slides", cfg.mode, test_set.len())));
    println!("{}", serde_json::to_string(&ev.report).expect("report"));
    Ok(())
}

pub fn eval(cfg: &RunConfig, data: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<u8> {
    let ex = load_examples(cfg, data)?;
    let (_, test_set) = split(cfg, &ex)?;
    let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &ckpt, &test_set)?,
        Precision::F64 => eval_typed::<f64>(cfg, &ckpt, &test_set)?,
    }
    Ok(0)
}

fn output_text(model_tasks: &[pathrwkv::mtl::TaskSpec], outputs: &[TaskOutput]) -> String {
    model_tasks
        .iter()
        .zip(outputs)
        .map(|(t, o)| match (o, &t.kind) {
            (TaskOutput::Probabilities(p), TaskKind::Classification { .. }) => {
                let probs: Vec<String> = p.iter().map(|x| format!("{x:.4}")).collect();
                format!(
                    "  {}: class {} p=[{}]",
                    t.name,
                    o.predicted_class().unwrap_or(0),
                    probs.join(", ")
                )
            }
            (TaskOutput::Value(v), _) => format!("  {}: {v:.6}", t.name),
            (o, _) => format!("  {}: {o:?}", t.name),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn infer_typed<T: Scalar>(cfg: &RunConfig, ckpt: &Path, slides: &[PathBuf], json_out: bool) -> Result<()> {
    let model = PathRwkv::<T>::load(ckpt)?;
    let opts = cfg.eval_options(cfg.mode);
    for path in slides {
        let bag = read_bag(path)?;
        let (pred, _) = predict_slide(&model, &bag, &opts)?;
        if json_out {
            println!(
                "{}",
                json!({
                    "slide": pred.slide_id,
                    "path": path,
                    "mode": cfg.mode,
                    "tiles": pred.tiles_used,
                    "outputs": model
                        .cfg
                        .tasks
                        .iter()
                        .zip(&pred.outputs)
                        .map(|(t, o)| (t.name.clone(), serde_json::to_value(o).expect("output")))
                        .collect::<serde_json::Map<_, _>>(),
                })
            );
        } else {
            println!(
                "{} ({} of {} tiles, {:?})",
                pred.slide_id,
                pred.tiles_used,
                bag.len(),
                cfg.mode
            );
            println!("{}", output_text(&model.cfg.tasks, &pred.outputs));
        }
    }
    Ok(())
}

pub fn infer(cfg: &RunConfig, checkpoint: Option<PathBuf>, slides: &[PathBuf], json_out: bool) -> Result<u8> {
    let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
    match cfg.precision {
        Precision::F32 => infer_typed::<f32>(cfg, &ckpt, slides, json_out)?,
        Precision::F64 => infer_typed::<f64>(cfg, &ckpt, slides, json_out)?,
    }
    Ok(0)
}

pub fn verify(cfg: &RunConfig, mutate_comb: bool) -> Result<u8> {
    let report = run_verify(&VerifyOptions {
        level: cfg.verify_level,
        seed: cfg.seed,
        mutate_comb,
    });
    print!("{}", report.to_text());
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} properties passed", report.results.len());
        Ok(0)
    } else {
        eprintln!("failed properties: {}", failed.join(", "));
        Ok(4)
    }
}

pub fn ablate(cfg: &RunConfig, axis: &str, data: Option<PathBuf>) -> Result<u8> {
    let axis: AblationAxis = axis.parse()?;
    let ex = load_examples(cfg, data)?;
    let (train_set, test_set) = split(cfg, &ex)?;
    let d_in = train_set.items[0].bag.dim();
    let setup = AblationSetup {
        model: cfg.model_config(d_in, train_set.tasks.clone()),
        train: cfg.train_config(),
        eval: cfg.eval_options(cfg.mode),
        train_set,
        test_set,
        init_seed: cfg.seed,
    };
    let table = run_ablation(axis, &cfg.ablation_grid, &setup)?;
    print!("{}", table.to_tsv());
    Ok(0)
}

fn bench_typed<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let tasks = synthetic_tasks();
    let model = PathRwkv::<T>::init(cfg.model_config(cfg.d_in, tasks), cfg.seed)?;
    let r = bench_scaling(&model, &cfg.bench_n, cfg.bag_size, cfg.bench_quadratic_max_n, cfg.bench_reps, cfg.seed)?;
    print!("{}", r.to_tsv());
    println!("recurrent log-log slope\t{:.3}", r.recurrent_slope);
    match r.quadratic_slope {
        Some(q) => println!("quadratic log-log slope\t{q:.3}"),
        None => println!("quadratic log-log slope\t-"),
    }
    println!("peak activation spread\t{:.3}", r.memory_spread);
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<u8> {
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(cfg)?,
        Precision::F64 => bench_typed::<f64>(cfg)?,
    }
    Ok(0)
}
