//! Per-task masked losses and the multi-task total.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, SpatialWeights, Tensor, Var};
use crate::schema::{LossKind, TaskSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Equal,
    #[default]
    Uncertainty,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(LossMode::Equal),
            "uncertainty" => Ok(LossMode::Uncertainty),
            _ => Err(Error::Config(format!("unknown loss mode `{s}` (equal, uncertainty)"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Equal => "equal",
            LossMode::Uncertainty => "uncertainty",
        })
    }
}

/// Batched supervision for one task.
#[derive(Clone, Debug)]
pub enum TaskTarget {
    /// `[N, S, S, C]` standardized values and `[N, S, S, 1]` validity.
    Pixel { values: Tensor, valid: SpatialWeights },
    /// One label per pixel, row-major over `[N, S, S]`.
    PixelLabels { labels: Rc<Vec<u32>> },
    /// `[N, C]` values and one validity flag per sample.
    Values { values: Tensor, valid: Rc<Vec<f32>> },
    /// One label per sample.
    Labels { labels: Rc<Vec<u32>> },
}

/// Loss for one task on one batch. `loss` is `None` when nothing was scored.
#[derive(Clone, Debug)]
pub struct TaskLossResult {
    pub task_id: String,
    pub loss: Option<Var>,
    pub valid_element_count: usize,
}

impl TaskLossResult {
    pub fn raw(&self, g: &Graph) -> Option<f32> {
        self.loss.map(|v| g.value(v).item())
    }
}

/// Mean squared error over pixels that are both hidden and valid. With
/// `patch`, the target is standardized per patch and channel first.
pub fn masked_mse(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    hidden: &SpatialWeights,
    valid: &SpatialWeights,
    patch: Option<usize>,
) -> (Option<Var>, usize) {
    let t = g.constant(target.clone());
    masked_mse_var(g, pred, t, hidden, valid, patch)
}

/// [`masked_mse`] with the target already in the graph.
pub fn masked_mse_var(
    g: &mut Graph,
    pred: Var,
    target: Var,
    hidden: &SpatialWeights,
    valid: &SpatialWeights,
    patch: Option<usize>,
) -> (Option<Var>, usize) {
    let weights = Rc::new(Tensor::new(
        hidden.shape(),
        hidden.data().iter().zip(valid.data()).map(|(h, v)| h * v).collect(),
    ));
    let count = weights.data().iter().filter(|&&w| w != 0.0).count();
    let t = match patch {
        Some(p) => g.patch_normalize(target, p, valid),
        None => target,
    };
    (g.mse_spatial(pred, t, &weights), count)
}

/// Mean negative log-likelihood over hidden pixels whose label is not `ignore`.
pub fn masked_cross_entropy(
    g: &mut Graph,
    scores: Var,
    labels: &Rc<Vec<u32>>,
    hidden: &SpatialWeights,
    ignore: Option<u32>,
) -> (Option<Var>, usize) {
    let weights: Vec<f32> = hidden
        .data()
        .iter()
        .zip(labels.iter())
        .map(|(&h, &l)| if h != 0.0 && Some(l) != ignore { 1.0 } else { 0.0 })
        .collect();
    let count = weights.iter().filter(|&&w| w != 0.0).count();
    (g.cross_entropy(scores, labels.clone(), Rc::new(weights)), count)
}

/// Image-level loss: MSE for continuous targets, cross entropy for classes.
pub fn image_level_loss(g: &mut Graph, pred: Var, target: &TaskTarget, task: &TaskSpec) -> Result<(Option<Var>, usize)> {
    match (task.loss_kind, target) {
        (LossKind::ImageRegression, TaskTarget::Values { values, valid }) => {
            let count = valid.iter().filter(|&&w| w != 0.0).count();
            let t = g.constant(values.clone());
            Ok((g.mse_rows(pred, t, valid.clone()), count))
        }
        (LossKind::ImageClassification, TaskTarget::Labels { labels }) => {
            let w = Rc::new(vec![1.0; labels.len()]);
            Ok((g.cross_entropy(pred, labels.clone(), w), labels.len()))
        }
        _ => Err(Error::invalid(format!("target does not match image-level task `{}`", task.task_id))),
    }
}

/// Dispatch on the task kind. `hidden` is the pixel-resolution hidden map.
pub fn task_loss(
    g: &mut Graph,
    task: &TaskSpec,
    pred: Var,
    target: &TaskTarget,
    hidden: &SpatialWeights,
    patch_norm: Option<usize>,
) -> Result<TaskLossResult> {
    let (loss, count) = match (task.loss_kind, target) {
        (LossKind::MaskedRegression, TaskTarget::Pixel { values, valid }) => {
            masked_mse(g, pred, values, hidden, valid, patch_norm)
        }
        (LossKind::MaskedClassification, TaskTarget::PixelLabels { labels }) => {
            masked_cross_entropy(g, pred, labels, hidden, task.ignore_label)
        }
        (LossKind::ImageRegression | LossKind::ImageClassification, _) => image_level_loss(g, pred, target, task)?,
        _ => return Err(Error::invalid(format!("target does not match task `{}`", task.task_id))),
    };
    Ok(TaskLossResult {
        task_id: task.task_id.clone(),
        loss: if count == 0 { None } else { loss },
        valid_element_count: count,
    })
}

/// Per-task terms of the total, as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTerm {
    pub task_id: String,
    pub raw_loss: f32,
    pub s: f32,
    pub weighted: f32,
}

/// Σ exp(−s_t)·L_t + s_t/2 over scored tasks (uncertainty), or Σ L_t (equal).
/// `log_vars[i]` is the `s_t` variable of `results[i]`.
pub fn aggregate_multitask(
    g: &mut Graph,
    results: &[TaskLossResult],
    log_vars: &[Var],
    mode: LossMode,
) -> Result<(Var, Vec<TaskTerm>)> {
    if results.len() != log_vars.len() {
        return Err(Error::invalid("one log-variance per task is required"));
    }
    let mut terms = Vec::new();
    let mut logs = Vec::new();
    for (r, &s) in results.iter().zip(log_vars) {
        let Some(l) = r.loss else { continue };
        let raw = g.value(l).item();
        let sv = g.value(s).item();
        let term = match mode {
            LossMode::Equal => l,
            LossMode::Uncertainty => {
                let neg = g.scale(s, -1.0);
                let prec = g.exp(neg);
                let weighted = g.mul(prec, l);
                let half = g.scale(s, 0.5);
                g.add(weighted, half)
            }
        };
        logs.push(TaskTerm {
            task_id: r.task_id.clone(),
            raw_loss: raw,
            s: if mode == LossMode::Equal { 0.0 } else { sv },
            weighted: g.value(term).item(),
        });
        terms.push(term);
    }
    if terms.is_empty() {
        return Err(Error::InvalidState("no task had a scoreable element in this batch".into()));
    }
    Ok((g.add_n(&terms), logs))
}
