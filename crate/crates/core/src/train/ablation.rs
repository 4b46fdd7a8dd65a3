use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::Serialize;

use super::metrics::{MetricReport, TaskMetrics};
use super::trainer::{evaluate, train, EvalMode, EvalOptions, Examples, TrainConfig};
use super::Precision;
use crate::data::SampleMethod;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PathRwkv};
use crate::mtl::{MtlDesign, TaskKind, TaskSpec};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Sampling,
    Structure,
    MaxNTiles,
    MtlGrouping,
    MtlDesign,
    Pe,
    Dim,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Sampling,
        AblationAxis::Structure,
        AblationAxis::MaxNTiles,
        AblationAxis::MtlGrouping,
        AblationAxis::MtlDesign,
        AblationAxis::Pe,
        AblationAxis::Dim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Sampling => "sampling",
            AblationAxis::Structure => "structure",
            AblationAxis::MaxNTiles => "max_n_tiles",
            AblationAxis::MtlGrouping => "mtl_grouping",
            AblationAxis::MtlDesign => "mtl_design",
            AblationAxis::Pe => "pe",
            AblationAxis::Dim => "dim",
        }
    }

    /// Grid used when none is given.
    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Sampling => &["z_order", "random"],
            AblationAxis::Structure => &["sampled", "recurrent"],
            AblationAxis::MaxNTiles => &["1000", "2000", "5000"],
            AblationAxis::MtlGrouping => &[],
            AblationAxis::MtlDesign => &["through", "to", "ours"],
            AblationAxis::Pe => &["off", "on"],
            AblationAxis::Dim => &["512", "768", "1024", "1536"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
                Error::config(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Shared inputs of every cell of an ablation.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub train_set: Examples,
    pub test_set: Examples,
    /// Seed of model initialisation, shared by all cells.
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    /// One entry per task of the setup, in its order.
    pub metrics: Vec<TaskMetrics>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub tasks: Vec<TaskSpec>,
    pub rows: Vec<AblationRow>,
}

fn fmt_metric(v: Option<f64>, percent: bool) -> String {
    match v {
        Some(x) if percent => format!("{:.1}", x * 100.0),
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

impl AblationTable {
    /// Tab-separated table: accuracy and AUC in percent for classification
    /// tasks, correlation for regression tasks.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(self.axis.as_str());
        for t in &self.tasks {
            match t.kind {
                TaskKind::Classification { .. } => {
                    let _ = write!(out, "\t{0} acc[%]\t{0} auc[%]", t.name);
                }
                TaskKind::Regression => {
                    let _ = write!(out, "\t{} corr", t.name);
                }
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for (t, m) in self.tasks.iter().zip(&row.metrics) {
                match t.kind {
                    TaskKind::Classification { .. } => {
                        let _ = write!(out, "\t{}\t{}", fmt_metric(m.accuracy, true), fmt_metric(m.auc, true));
                    }
                    TaskKind::Regression => {
                        let _ = write!(out, "\t{}", fmt_metric(m.pearson, false));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn fit_eval_typed<T: Scalar>(
    model: &ModelConfig,
    tc: &TrainConfig,
    modes: &[EvalOptions],
    train_set: &Examples,
    test_set: &Examples,
    init_seed: u64,
) -> Result<Vec<MetricReport>> {
    let mut m = PathRwkv::<T>::init(model.clone(), init_seed)?;
    let rep = train(&mut m, tc, train_set)?;
    modes
        .iter()
        .map(|o| {
            let mut r = evaluate(&m, test_set, o)?.report;
            r.loss_curve = rep.loss_curve.clone();
            Ok(r)
        })
        .collect()
}

/// Trains one model and evaluates it under each of `modes`.
pub fn fit_eval(
    model: &ModelConfig,
    tc: &TrainConfig,
    modes: &[EvalOptions],
    train_set: &Examples,
    test_set: &Examples,
    init_seed: u64,
) -> Result<Vec<MetricReport>> {
    match tc.precision {
        Precision::F32 => fit_eval_typed::<f32>(model, tc, modes, train_set, test_set, init_seed),
        Precision::F64 => fit_eval_typed::<f64>(model, tc, modes, train_set, test_set, init_seed),
    }
}

fn initials(tasks: &[TaskSpec], group: &[usize]) -> String {
    group
        .iter()
        .map(|&i| tasks[i].name.chars().next().unwrap_or('?').to_ascii_uppercase())
        .collect()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Task groupings: every task alone, each proper subset of two or more
/// tasks trained jointly while the remaining tasks form a second group,
/// and all tasks together. Complementary halves are listed once.
pub fn grouping_rows(tasks: &[TaskSpec]) -> Vec<(String, Vec<Vec<usize>>)> {
    let t = tasks.len();
    let mut rows = vec![("STL".to_string(), (0..t).map(|i| vec![i]).collect())];
    for k in 2..t {
        for combo in combinations(t, k) {
            if 2 * k == t && combo[0] != 0 {
                continue;
            }
            let rest: Vec<usize> = (0..t).filter(|i| !combo.contains(i)).collect();
            let label = format!("MTL-{}", initials(tasks, &combo));
            rows.push((label, vec![combo, rest]));
        }
    }
    if t > 1 {
        rows.push(("MTL-All".to_string(), vec![(0..t).collect()]));
    }
    rows
}

fn parse<V: FromStr>(axis: AblationAxis, s: &str) -> Result<V> {
    s.parse()
        .map_err(|_| Error::config(format!("invalid value `{s}` for ablation axis `{}`", axis.as_str())))
}

/// Trains and evaluates every cell of `grid` along `axis`, all cells
/// sharing the setup's seeds. An empty grid uses the axis default.
pub fn run_ablation(axis: AblationAxis, grid: &[String], setup: &AblationSetup) -> Result<AblationTable> {
    let grid = if grid.is_empty() { axis.default_grid() } else { grid.to_vec() };
    let tasks = setup.model.tasks.clone();
    let mut rows = Vec::new();
    let cell = |model: &ModelConfig, tc: &TrainConfig, eval: &EvalOptions| -> Result<Vec<TaskMetrics>> {
        let mut r = fit_eval(model, tc, std::slice::from_ref(eval), &setup.train_set, &setup.test_set, setup.init_seed)?;
        Ok(r.remove(0).tasks)
    };
    let timed = |label: String, f: &dyn Fn() -> Result<Vec<TaskMetrics>>| -> Result<AblationRow> {
        let start = Instant::now();
        let metrics = f()?;
        let wall = start.elapsed().as_secs_f64();
        info!("ablation {}: {label} done in {wall:.1}s", axis.as_str());
        Ok(AblationRow {
            label,
            metrics,
            wall_time_s: wall,
        })
    };
    match axis {
        AblationAxis::Structure => {
            let modes: Vec<EvalMode> = grid.iter().map(|s| parse(axis, s)).collect::<Result<_>>()?;
            let opts: Vec<EvalOptions> = modes
                .iter()
                .map(|&mode| EvalOptions {
                    mode,
                    ..setup.eval.clone()
                })
                .collect();
            // one set of weights serves every evaluation mode
            let start = Instant::now();
            let reports = fit_eval(&setup.model, &setup.train, &opts, &setup.train_set, &setup.test_set, setup.init_seed)?;
            let wall = start.elapsed().as_secs_f64();
            for (label, r) in grid.iter().zip(reports) {
                rows.push(AblationRow {
                    label: label.clone(),
                    metrics: r.tasks,
                    wall_time_s: wall,
                });
            }
        }
        AblationAxis::Sampling => {
            for v in &grid {
                let sampling: SampleMethod = parse(axis, v)?;
                let tc = TrainConfig {
                    sampling,
                    ..setup.train.clone()
                };
                let eval = EvalOptions {
                    sampling,
                    ..setup.eval.clone()
                };
                rows.push(timed(sampling.to_string(), &|| cell(&setup.model, &tc, &eval))?);
            }
        }
        AblationAxis::MaxNTiles => {
            for v in &grid {
                let max_n_tiles: usize = parse(axis, v)?;
                if max_n_tiles == 0 {
                    return Err(Error::config("max_n_tiles must be at least 1"));
                }
                let tc = TrainConfig {
                    max_n_tiles,
                    ..setup.train.clone()
                };
                let eval = EvalOptions {
                    max_n_tiles,
                    ..setup.eval.clone()
                };
                rows.push(timed(max_n_tiles.to_string(), &|| cell(&setup.model, &tc, &eval))?);
            }
        }
        AblationAxis::MtlDesign => {
            for v in &grid {
                let design: MtlDesign = parse(axis, v)?;
                let model = ModelConfig {
                    mtl_design: design,
                    ..setup.model.clone()
                };
                rows.push(timed(design.to_string(), &|| cell(&model, &setup.train, &setup.eval))?);
            }
        }
        AblationAxis::Pe => {
            for v in &grid {
                let use_pe = match v.as_str() {
                    "off" | "O/PE" | "false" => false,
                    "on" | "W/PE" | "true" => true,
                    _ => return Err(Error::config(format!("invalid value `{v}` for ablation axis `pe` (off, on)"))),
                };
                let model = ModelConfig {
                    use_pe,
                    ..setup.model.clone()
                };
                let label = if use_pe { "W/PE" } else { "O/PE" };
                rows.push(timed(label.into(), &|| cell(&model, &setup.train, &setup.eval))?);
            }
        }
        AblationAxis::Dim => {
            for v in &grid {
                let dim: usize = parse(axis, v)?;
                let base = &setup.model;
                let model = ModelConfig {
                    depth: base.depth,
                    lora_rank: base.lora_rank,
                    decay_rank: base.decay_rank,
                    use_pe: base.use_pe,
                    mtl_design: base.mtl_design,
                    norm_eps: base.norm_eps,
                    ..ModelConfig::new(base.d_in, dim, base.tasks.clone())
                };
                model.validate()?;
                rows.push(timed(dim.to_string(), &|| cell(&model, &setup.train, &setup.eval))?);
            }
        }
        AblationAxis::MtlGrouping => {
            let all = grouping_rows(&tasks);
            let selected: Vec<&(String, Vec<Vec<usize>>)> = if grid.is_empty() {
                all.iter().collect()
            } else {
                grid.iter()
                    .map(|g| {
                        all.iter()
                            .find(|(l, _)| l == g)
                            .ok_or_else(|| Error::config(format!("unknown task grouping `{g}`")))
                    })
                    .collect::<Result<_>>()?
            };
            for (label, groups) in selected {
                rows.push(timed(label.clone(), &|| {
                    let mut metrics: Vec<Option<TaskMetrics>> = vec![None; tasks.len()];
                    for group in groups {
                        let names: Vec<String> = group.iter().map(|&i| tasks[i].name.clone()).collect();
                        let model = ModelConfig {
                            tasks: group.iter().map(|&i| tasks[i].clone()).collect(),
                            ..setup.model.clone()
                        };
                        let (tr, te) = (setup.train_set.restrict(&names)?, setup.test_set.restrict(&names)?);
                        let mut r = fit_eval(&model, &setup.train, std::slice::from_ref(&setup.eval), &tr, &te, setup.init_seed)?;
                        for (&i, m) in group.iter().zip(r.remove(0).tasks) {
                            metrics[i] = Some(m);
                        }
                    }
                    Ok(metrics.into_iter().map(|m| m.expect("groups cover every task")).collect())
                })?);
            }
        }
    }
    Ok(AblationTable { axis, tasks, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, synthetic_tasks, DatasetSpec, SyntheticSlideSpec};

    fn setup() -> AblationSetup {
        let spec = DatasetSpec {
            n_slides: 8,
            slide: SyntheticSlideSpec {
                grid_w: 8,
                grid_h: 8,
                witness_rate: 0.3,
                seed: 11,
                ..Default::default()
            },
            d_in: 16,
            ..Default::default()
        };
        let data = Examples::from_samples(synthetic_tasks(), &synthesize_dataset(&spec, 1).unwrap());
        let mut model = ModelConfig::new(16, 8, synthetic_tasks());
        model.heads = 2;
        model.lora_rank = 2;
        model.decay_rank = 2;
        model.ffn_dim = 16;
        AblationSetup {
            model,
            train: TrainConfig {
                epochs: 2,
                warmup_epochs: 1,
                base_lr: 1e-3,
                max_n_tiles: 20,
                precision: Precision::F64,
                ..Default::default()
            },
            eval: EvalOptions::default(),
            train_set: data.subset(&[0, 1, 2, 3, 4]),
            test_set: data.subset(&[5, 6, 7]),
            init_seed: 1,
        }
    }

    #[test]
    fn unknown_axis_is_config_error() {
        assert!(matches!("colour".parse::<AblationAxis>(), Err(Error::Config(_))));
        assert_eq!("max_n_tiles".parse::<AblationAxis>().unwrap(), AblationAxis::MaxNTiles);
    }

    #[test]
    fn grouping_rows_for_four_tasks() {
        let labels: Vec<String> = grouping_rows(&synthetic_tasks()).into_iter().map(|r| r.0).collect();
        assert_eq!(
            labels,
            ["STL", "MTL-WB", "MTL-WF", "MTL-WS", "MTL-WBF", "MTL-WBS", "MTL-WFS", "MTL-BFS", "MTL-All"]
        );
    }

    #[test]
    fn pe_axis_has_two_rows() {
        let t = run_ablation(AblationAxis::Pe, &[], &setup()).unwrap();
        let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["O/PE", "W/PE"]);
        assert_eq!(t.to_tsv().lines().count(), 3);
    }

    #[test]
    fn single_cell_matches_evaluate() {
        let s = setup();
        let t = run_ablation(AblationAxis::MaxNTiles, &["20".into()], &s).unwrap();
        assert_eq!(t.rows.len(), 1);
        let direct = fit_eval(&s.model, &s.train, &[s.eval.clone()], &s.train_set, &s.test_set, s.init_seed).unwrap();
        assert_eq!(t.rows[0].metrics, direct[0].tasks);
    }

    #[test]
    fn bad_grid_values_rejected() {
        assert!(matches!(
            run_ablation(AblationAxis::Dim, &["wide".into()], &setup()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_ablation(AblationAxis::MtlGrouping, &["MTL-XYZ".into()], &setup()),
            Err(Error::Config(_))
        ));
    }
}
