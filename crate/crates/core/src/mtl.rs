//! Multi-task heads: per-task projection of backbone features, max tile
//! selection, linear heads and the masked sum of task losses.
//!
//! Graph-level functions operate on one slide at a time (`B = 1`); a batch of
//! slides is handled by accumulating gradients across per-slide graphs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MeanAbsoluteError,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub loss: LossKind,
}

impl TaskSpec {
    pub fn classification(name: impl Into<String>, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Classification { num_classes },
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn regression(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: TaskKind::Regression,
            loss: LossKind::MeanAbsoluteError,
        }
    }

    /// Width of the head output: class count, or 1 for regression.
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification { num_classes } => num_classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::Classification { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(|c: char| c == ',' || c.is_whitespace()) {
            return Err(Error::config(format!("invalid task name `{}`", self.name)));
        }
        match (self.kind, self.loss) {
            (TaskKind::Classification { num_classes }, LossKind::CrossEntropy) if num_classes >= 2 => {
                Ok(())
            }
            (TaskKind::Regression, LossKind::MeanAbsoluteError) => Ok(()),
            (TaskKind::Classification { num_classes }, LossKind::CrossEntropy) => Err(
                Error::config(format!("task `{}` has {num_classes} classes", self.name)),
            ),
            _ => Err(Error::config(format!(
                "task `{}`: classification pairs with cross-entropy, regression with MAE",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Value(f64),
}

/// One optional label per task, in task order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet(pub Vec<Option<Label>>);

impl LabelSet {
    pub fn get(&self, task: usize) -> Option<Label> {
        self.0.get(task).copied().flatten()
    }

    pub fn any_present(&self) -> bool {
        self.0.iter().any(Option::is_some)
    }

    pub fn validate(&self, tasks: &[TaskSpec]) -> Result<()> {
        if self.0.len() != tasks.len() {
            return Err(Error::Data(format!(
                "{} labels for {} tasks",
                self.0.len(),
                tasks.len()
            )));
        }
        for (label, task) in self.0.iter().zip(tasks) {
            match (label, task.kind) {
                (None, _) => {}
                (Some(Label::Class(c)), TaskKind::Classification { num_classes }) if *c < num_classes => {}
                (Some(Label::Value(v)), TaskKind::Regression) if v.is_finite() => {}
                (Some(l), _) => {
                    return Err(Error::Data(format!("label {l:?} invalid for task `{}`", task.name)))
                }
            }
        }
        Ok(())
    }
}

/// How backbone output reaches the task heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtlDesign {
    /// One learned token per task appended after the tiles; each head reads
    /// its token's output row.
    Through,
    /// Heads read the mean of the backbone output, without projection.
    To,
    /// Projection to per-task features, then feature-wise max over tiles.
    #[default]
    Ours,
}

impl MtlDesign {
    pub const ALL: [MtlDesign; 3] = [MtlDesign::Through, MtlDesign::To, MtlDesign::Ours];

    pub fn as_str(self) -> &'static str {
        match self {
            MtlDesign::Through => "through",
            MtlDesign::To => "to",
            MtlDesign::Ours => "ours",
        }
    }
}

impl fmt::Display for MtlDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MtlDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "through" => Ok(MtlDesign::Through),
            "to" => Ok(MtlDesign::To),
            "ours" => Ok(MtlDesign::Ours),
            other => Err(Error::config(format!(
                "unknown MTL design `{other}` (expected through, to or ours)"
            ))),
        }
    }
}

pub fn mtl_variant(kind: &str) -> Result<MtlDesign> {
    kind.parse()
}

/// Projects `[N, D]` through a `D -> D*T` linear layer and splits the result
/// into `T` task-specific `[N, D]` feature maps.
pub fn mtl_project<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Var,
    tasks: usize,
) -> Result<Vec<Var>> {
    if tasks == 0 {
        return Err(Error::contract("MTL projection needs at least one task"));
    }
    let d = g.shape(x).last().copied().unwrap_or(0);
    if g.shape(weight) != [d, d * tasks] {
        return Err(Error::dim(format!(
            "projection weight {:?} does not map D={d} to {} tasks",
            g.shape(weight),
            tasks
        )));
    }
    let p = g.matmul(x, weight)?;
    let p = g.add(p, bias)?;
    (0..tasks).map(|t| g.slice_cols(p, t * d, d)).collect()
}

/// Feature-wise max over the tile axis of `[N, D]`, giving `[D]`.
pub fn select_max_tile<T: Scalar>(g: &mut Graph<T>, feat: Var) -> Result<Var> {
    g.col_max(feat)
}

/// Linear head on a `[D]` feature vector: logits for classification, a
/// single value for regression.
pub fn head_forward<T: Scalar>(g: &mut Graph<T>, feat: Var, weight: Var, bias: Var) -> Result<Var> {
    let d = g.value(feat).numel();
    let row = g.reshape(feat, &[1, d])?;
    let out = g.matmul(row, weight)?;
    let out = g.add(out, bias)?;
    let k = g.value(out).numel();
    g.reshape(out, &[k])
}

/// Loss of one task. Regression targets are expected already standardised.
pub fn task_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, label: Label, task: &TaskSpec) -> Result<Var> {
    match (task.kind, label) {
        (TaskKind::Classification { .. }, Label::Class(c)) => g.cross_entropy(pred, c),
        (TaskKind::Regression, Label::Value(v)) => g.abs_error(pred, T::from_f64_lossy(v)),
        _ => Err(Error::Data(format!(
            "label {label:?} does not fit task `{}`",
            task.name
        ))),
    }
}

/// Sum of the losses of tasks whose label is present. Returns `None` when
/// every label is absent, meaning the sample should be skipped.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Var],
    labels: &LabelSet,
    tasks: &[TaskSpec],
) -> Result<Option<Var>> {
    if preds.len() != tasks.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} tasks",
            preds.len(),
            tasks.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, (task, &pred)) in tasks.iter().zip(preds).enumerate() {
        let Some(label) = labels.get(i) else { continue };
        let l = task_loss(g, pred, label, task)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn projection_splits_into_task_maps() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_fn(&[4, 8], |i| i as f64 * 0.1));
        let w = g.constant(Tensor::from_fn(&[8, 24], |i| (i % 7) as f64 - 3.0));
        let b = g.constant(Tensor::zeros(&[24]));
        let parts = mtl_project(&mut g, x, w, b, 3).unwrap();
        assert_eq!(parts.len(), 3);
        for p in parts {
            assert_eq!(g.shape(p), [4, 8]);
        }
    }

    #[test]
    fn single_task_identity_projection() {
        let mut g = Graph::<f64>::inference();
        let xt = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::zeros(&[4]));
        let parts = mtl_project(&mut g, x, w, b, 1).unwrap();
        assert_eq!(g.value(parts[0]).data(), xt.data());
    }

    #[test]
    fn zero_tasks_rejected() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let w = g.constant(Tensor::zeros(&[4, 0]));
        let b = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(mtl_project(&mut g, x, w, b, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn max_tile_selection() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t(&[2, 2], vec![1.0, 3.0, 2.0, 0.0]));
        let m = select_max_tile(&mut g, x).unwrap();
        assert_eq!(g.value(m).data(), [2.0, 3.0]);
        let one = g.constant(t(&[1, 3], vec![4.0, -1.0, 0.5]));
        let m = select_max_tile(&mut g, one).unwrap();
        assert_eq!(g.value(m).data(), [4.0, -1.0, 0.5]);
        let empty = g.constant(Tensor::zeros(&[0, 3]));
        assert!(select_max_tile(&mut g, empty).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities_and_ln_k_loss() {
        let mut g = Graph::<f64>::inference();
        let f = g.constant(t(&[3], vec![0.3, -2.0, 1.0]));
        let w = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        let logits = head_forward(&mut g, f, w, b).unwrap();
        assert_eq!(g.value(logits).data(), [0.0; 4]);
        let task = TaskSpec::classification("c", 4);
        for class in 0..4 {
            let l = task_loss(&mut g, logits, Label::Class(class), &task).unwrap();
            assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_head_bias_is_constant_output() {
        let mut g = Graph::<f64>::inference();
        let f = g.constant(t(&[2], vec![5.0, -7.0]));
        let w = g.constant(Tensor::zeros(&[2, 1]));
        let b = g.constant(t(&[1], vec![2.5]));
        let y = head_forward(&mut g, f, w, b).unwrap();
        assert_eq!(g.value(y).data(), [2.5]);
    }

    #[test]
    fn total_loss_sums_present_tasks_only() {
        let mut g = Graph::<f64>::new();
        let tasks = vec![TaskSpec::regression("a"), TaskSpec::regression("b")];
        let pa = g.leaf(t(&[1], vec![1.5]), true);
        let pb = g.leaf(t(&[1], vec![0.2]), true);
        let both = LabelSet(vec![Some(Label::Value(1.0)), Some(Label::Value(1.4))]);
        let l = total_loss(&mut g, &[pa, pb], &both, &tasks).unwrap().unwrap();
        assert!((g.value(l).item().unwrap() - 1.7).abs() < 1e-12);

        let one = LabelSet(vec![None, Some(Label::Value(1.4))]);
        let l = total_loss(&mut g, &[pa, pb], &one, &tasks).unwrap().unwrap();
        assert!((g.value(l).item().unwrap() - 1.2).abs() < 1e-12);
        g.backward(l).unwrap();
        assert!(g.grad(pa).is_none());
        assert_eq!(g.grad(pb).unwrap(), [-1.0]);

        let none = LabelSet(vec![None, None]);
        assert!(total_loss(&mut g, &[pa, pb], &none, &tasks).unwrap().is_none());
    }

    #[test]
    fn task_spec_validation() {
        assert!(TaskSpec::classification("x", 2).validate().is_ok());
        assert!(TaskSpec::classification("x", 1).validate().is_err());
        let mut bad = TaskSpec::regression("y");
        bad.loss = LossKind::CrossEntropy;
        assert!(bad.validate().is_err());
        assert!(TaskSpec::regression("has space").validate().is_err());
    }

    #[test]
    fn label_validation() {
        let tasks = vec![TaskSpec::classification("c", 3), TaskSpec::regression("r")];
        assert!(LabelSet(vec![Some(Label::Class(2)), None]).validate(&tasks).is_ok());
        assert!(LabelSet(vec![Some(Label::Class(3)), None]).validate(&tasks).is_err());
        assert!(LabelSet(vec![Some(Label::Value(1.0)), None]).validate(&tasks).is_err());
        assert!(LabelSet(vec![None]).validate(&tasks).is_err());
    }

    #[test]
    fn design_parsing() {
        for d in MtlDesign::ALL {
            assert_eq!(mtl_variant(d.as_str()).unwrap(), d);
        }
        assert!(matches!(mtl_variant("sideways"), Err(Error::Config(_))));
    }
}
