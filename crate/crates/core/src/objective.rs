//! Loss functions for the detector.
//!
//! The supervised loss sums an IoU term over assigned cells, a BCE
//! objectness term over all cells, a BCE classification term over
//! assigned cells, and a BCE image-level multi-label term. The
//! unsupervised loss replaces BCE with focal terms, drops box
//! regression entirely, and reads its objectness and classification
//! targets from two independently thresholded pseudo-label sets.
//!
//! All losses are built as tape subgraphs so gradients flow to
//! whatever produced the prediction nodes; the coupled and decoupled
//! head wirings therefore share this code unchanged and produce
//! identical loss values for identical map values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{IouCell, NodeId, Tape};
use crate::error::Result;
use crate::model::{PredictionNodes, TargetMaps};
use crate::tensor::Tensor;

/// Focal-loss shape parameters for the unsupervised terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 1.5 }
    }
}

/// Scalar focal loss. `y = 1`: `-alpha (1-p)^gamma ln p`;
/// `y = 0`: `-(1-alpha) p^gamma ln(1-p)`; each log floored at 1e-7.
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    crate::autodiff::focal_term(p, y, alpha, gamma)
}

/// Scalar binary cross entropy with the same log floor.
pub fn bce(p: f64, y: f64) -> f64 {
    crate::autodiff::bce_term(p, y)
}

/// Node handles for the supervised loss and its components.
pub struct SupervisedLoss {
    pub l_iou: NodeId,
    pub l_conf: NodeId,
    pub l_cls: NodeId,
    pub l_gls: NodeId,
    pub total: NodeId,
}

/// Node handles for the unsupervised loss and its components.
pub struct UnsupervisedLoss {
    pub l_conf: NodeId,
    pub l_cls: NodeId,
    pub l_gls: NodeId,
    pub total: NodeId,
}

/// Per-step loss values, extracted from the graph after forward.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_iou: f64,
    pub l_conf: f64,
    pub l_cls: f64,
    pub l_gls: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub lambda: f64,
    pub total: f64,
}

fn zero(tape: &mut Tape) -> Result<NodeId> {
    tape.input(Tensor::scalar(0.0))
}

/// Objectness probabilities as a `[h, w, 1]` node.
fn conf_probs(tape: &mut Tape, reg: NodeId) -> Result<NodeId> {
    let obj_logits = tape.slice_channels(reg, 4, 5)?;
    tape.sigmoid(obj_logits)
}

fn as_3d(t: &Tensor) -> Tensor {
    let (h, w) = t.dims2();
    Tensor::from_vec(&[h, w, 1], t.data().to_vec())
}

/// Supervised loss over one scene.
///
/// With zero assigned cells the IoU and classification terms are
/// defined as exact zeros; the objectness and image-level terms always
/// train.
pub fn supervised_loss(tape: &mut Tape, pm: &PredictionNodes, tm: &TargetMaps) -> Result<SupervisedLoss> {
    let (h, w, _) = tape.value(pm.reg).dims3();
    let (_, _, c) = tape.value(pm.cls).dims3();
    let n_pos = tm.positives.len();

    let l_iou = if n_pos == 0 {
        zero(tape)?
    } else {
        let cells: Vec<IouCell> = tm
            .positives
            .iter()
            .map(|&(cy, cx, target, _)| IouCell { cy, cx, target })
            .collect();
        tape.iou_loss(pm.reg, cells, tm.stride, w as f64 * tm.stride as f64, h as f64 * tm.stride as f64)?
    };

    let conf = conf_probs(tape, pm.reg)?;
    let l_conf = tape.bce_loss(
        conf,
        as_3d(&tm.obj),
        Tensor::filled(&[h, w, 1], 1.0 / (h * w) as f64),
    )?;

    let l_cls = if n_pos == 0 {
        zero(tape)?
    } else {
        let probs = tape.sigmoid(pm.cls)?;
        let mut weights = Tensor::zeros(&[h, w, c]);
        let per = 1.0 / (n_pos * c) as f64;
        for &(cy, cx, _, _) in &tm.positives {
            for k in 0..c {
                weights.set3(cy, cx, k, per);
            }
        }
        tape.bce_loss(probs, tm.cls.clone(), weights)?
    };

    let gls_probs = tape.sigmoid(pm.gls)?;
    let l_gls = tape.bce_loss(gls_probs, tm.gls.clone(), Tensor::filled(&[c], 1.0 / c as f64))?;

    let a = tape.add(l_iou, l_conf)?;
    let b = tape.add(a, l_cls)?;
    let total = tape.add(b, l_gls)?;
    Ok(SupervisedLoss { l_iou, l_conf, l_cls, l_gls, total })
}

/// Unsupervised loss over one scene.
///
/// * `conf_targets`: target maps assigned from the regression
///   pseudo-label split; only its objectness map is read.
/// * `cls_targets`: target maps assigned from the classification
///   split; only its positive cells and one-hot classes are read.
/// * `global_target`: `[c]` multi-label target from the classes
///   present in the refined pseudo-label set.
///
/// There is no box-regression term, so box-offset channels of the
/// regression map receive exactly zero gradient from this loss.
pub fn unsupervised_loss(
    tape: &mut Tape,
    pm: &PredictionNodes,
    conf_targets: &TargetMaps,
    cls_targets: &TargetMaps,
    global_target: &Tensor,
    focal: FocalParams,
) -> Result<UnsupervisedLoss> {
    let (h, w, _) = tape.value(pm.reg).dims3();
    let (_, _, c) = tape.value(pm.cls).dims3();

    let conf = conf_probs(tape, pm.reg)?;
    let l_conf = tape.focal_loss(
        conf,
        as_3d(&conf_targets.obj),
        Tensor::filled(&[h, w, 1], 1.0 / (h * w) as f64),
        focal.alpha,
        focal.gamma,
    )?;

    let n_pos = cls_targets.positives.len();
    let l_cls = if n_pos == 0 {
        zero(tape)?
    } else {
        let probs = tape.sigmoid(pm.cls)?;
        let mut weights = Tensor::zeros(&[h, w, c]);
        let per = 1.0 / (n_pos * c) as f64;
        for &(cy, cx, _, _) in &cls_targets.positives {
            for k in 0..c {
                weights.set3(cy, cx, k, per);
            }
        }
        tape.focal_loss(probs, cls_targets.cls.clone(), weights, focal.alpha, focal.gamma)?
    };

    let gls_probs = tape.sigmoid(pm.gls)?;
    let l_gls = tape.bce_loss(gls_probs, global_target.clone(), Tensor::filled(&[c], 1.0 / c as f64))?;

    let a = tape.add(l_conf, l_cls)?;
    let total = tape.add(a, l_gls)?;
    Ok(UnsupervisedLoss { l_conf, l_cls, l_gls, total })
}

/// `total = l_sup + lambda * l_unsup` as a graph node.
pub fn total_loss(tape: &mut Tape, sup: NodeId, unsup: NodeId, lambda: f64) -> Result<NodeId> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let scaled = tape.scale(unsup, lambda)?;
    tape.add(sup, scaled)
}

impl LossBreakdown {
    /// Reads component values out of the tape. `total` is recomputed
    /// with the same expression the graph used, so the identity
    /// `total == l_sup + lambda * l_unsup` holds bit-exactly.
    pub fn from_nodes(
        tape: &Tape,
        sup: &SupervisedLoss,
        unsup: Option<&UnsupervisedLoss>,
        lambda: f64,
    ) -> LossBreakdown {
        let l_sup = tape.scalar(sup.total);
        let l_unsup = unsup.map(|u| tape.scalar(u.total)).unwrap_or(0.0);
        LossBreakdown {
            l_iou: tape.scalar(sup.l_iou),
            l_conf: tape.scalar(sup.l_conf),
            l_cls: tape.scalar(sup.l_cls),
            l_gls: tape.scalar(sup.l_gls),
            l_sup,
            l_unsup,
            lambda,
            total: l_sup + lambda * l_unsup,
        }
    }
}
