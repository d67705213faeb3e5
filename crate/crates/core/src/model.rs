//! The toy one-stage detector: a small conv trunk over a single
//! stride-8 grid with either decoupled regression/classification
//! heads plus an image-level multi-label branch, or a single coupled
//! head producing the joint `(5 + c)`-channel map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, ScoredBox};
use crate::rng;
use crate::tensor::Tensor;

/// Head wiring: separate regression/classification heads or one joint
/// map that gets sliced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Decoupled,
    Coupled,
}

/// Detector architecture. `trunk_channels` are the output widths of
/// the three stride-2 blocks plus the stride-1 refinement conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub stride: usize,
    pub num_classes: usize,
    pub trunk_channels: [usize; 4],
    pub head_mode: HeadMode,
    /// Initial objectness-bias logit; negative values start the
    /// detector quiet, which stabilises early training.
    pub objectness_bias_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 96,
            stride: 8,
            num_classes: 6,
            trunk_channels: [6, 10, 14, 14],
            head_mode: HeadMode::Decoupled,
            objectness_bias_init: -3.0,
        }
    }
}

impl ArchConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.stride == 0 || self.image_size % self.stride != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by stride {}",
                self.image_size, self.stride
            )));
        }
        if self.image_size % 8 != 0 {
            return Err(Error::Config(
                "image size must be divisible by 8 (three stride-2 blocks)".into(),
            ));
        }
        if self.trunk_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("trunk channels must be positive".into()));
        }
        Ok(())
    }
}

/// The detector's dense outputs, as raw logits.
#[derive(Clone, Debug)]
pub struct PredictionMaps {
    /// `[h, w, 5]`: tx, ty, tw, th, objectness logit.
    pub reg: Tensor,
    /// `[h, w, c]` class logits.
    pub cls: Tensor,
    /// `[c]` image-level multi-label logits.
    pub gls: Tensor,
    pub stride: usize,
}

/// Tape node handles for the same maps, used when building a loss
/// graph for backward.
pub struct PredictionNodes {
    pub reg: NodeId,
    pub cls: NodeId,
    pub gls: NodeId,
    pub stride: usize,
}

/// Dense training targets on the detector grid.
#[derive(Clone, Debug)]
pub struct TargetMaps {
    /// `[h, w, 4]` corner-format target boxes at positive cells.
    pub coord: Tensor,
    /// `[h, w]` objectness targets in {0, 1}.
    pub obj: Tensor,
    /// `[h, w, c]` one-hot class targets at positive cells.
    pub cls: Tensor,
    /// `[c]` image-level multi-label target.
    pub gls: Tensor,
    /// `[h, w]` 1.0 at cells assigned a ground-truth box.
    pub pos_mask: Tensor,
    /// Positive cells as `(cy, cx, target box, class)` after collision
    /// resolution, in grid scan order.
    pub positives: Vec<(usize, usize, BBox, usize)>,
    pub stride: usize,
}

fn conv_param_names(layer: &str) -> (String, String) {
    (format!("{layer}.w"), format!("{layer}.b"))
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    // Box-Muller on uniform draws keeps the stream portable.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-style normal init scaled by fan-in; biases start at zero.
fn init_conv(
    params: &mut ParamSet,
    rng: &mut rand_chacha::ChaCha8Rng,
    layer: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    let n = kh * kw * cin * cout;
    let data = (0..n).map(|_| gaussian(rng) * std).collect();
    let (wn, bn) = conv_param_names(layer);
    params.insert(&wn, Tensor::from_vec(&[kh, kw, cin, cout], data));
    params.insert(&bn, Tensor::zeros(&[cout]));
}

/// Deterministic parameter initialization for the configured
/// architecture: same `(config, seed)`, same `ParamSet`.
pub fn init_detector(cfg: &ArchConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "detector-init", 0);
    let [c1, c2, c3, c4] = cfg.trunk_channels;
    let c = cfg.num_classes;

    let mut params = ParamSet::new();
    init_conv(&mut params, &mut rng, "trunk.conv1", 3, 3, 3, c1);
    init_conv(&mut params, &mut rng, "trunk.conv2", 3, 3, c1, c2);
    init_conv(&mut params, &mut rng, "trunk.conv3", 3, 3, c2, c3);
    init_conv(&mut params, &mut rng, "trunk.conv4", 3, 3, c3, c4);

    match cfg.head_mode {
        HeadMode::Decoupled => {
            init_conv(&mut params, &mut rng, "head.reg", 1, 1, c4, 5);
            init_conv(&mut params, &mut rng, "head.cls", 1, 1, c4, c);
            params.get_mut("head.reg.b").unwrap().data_mut()[4] = cfg.objectness_bias_init;
        }
        HeadMode::Coupled => {
            init_conv(&mut params, &mut rng, "head.joint", 1, 1, c4, 5 + c);
            params.get_mut("head.joint.b").unwrap().data_mut()[4] = cfg.objectness_bias_init;
        }
    }

    // Image-level multi-label branch: global average pool then affine.
    let std = (2.0 / c4 as f64).sqrt();
    let data = (0..c * c4).map(|_| gaussian(&mut rng) * std).collect();
    params.insert("head.gls.w", Tensor::from_vec(&[c, c4], data));
    params.insert("head.gls.b", Tensor::zeros(&[c]));
    Ok(params)
}

/// Builds the detector forward graph on `tape`, returning logit
/// nodes. The trainer uses this directly so losses can backpropagate;
/// [`detect`] wraps it for inference.
pub fn build_detector(
    tape: &mut Tape,
    cfg: &ArchConfig,
    params: &ParamSet,
    image: &Tensor,
) -> Result<PredictionNodes> {
    let (h, w, ch) = {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                node: "detector input".into(),
                detail: format!("rank {} != 3", s.len()),
            });
        }
        (s[0], s[1], s[2])
    };
    if h != cfg.image_size || w != cfg.image_size || ch != 3 {
        return Err(Error::ShapeMismatch {
            node: "detector input".into(),
            detail: format!("got [{h}, {w}, {ch}], config wants [{0}, {0}, 3]", cfg.image_size),
        });
    }

    let p = |tape: &mut Tape, name: &str| -> Result<NodeId> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter '{name}'")))?;
        tape.param(name, t.clone())
    };

    let x = tape.input(image.clone())?;
    let mut cur = x;
    for (i, stride) in [(1usize, 2usize), (2, 2), (3, 2), (4, 1)] {
        let (wn, bn) = conv_param_names(&format!("trunk.conv{i}"));
        let w = p(tape, &wn)?;
        let b = p(tape, &bn)?;
        let conv = tape.conv2d(cur, w, b, stride, 1)?;
        cur = tape.leaky_relu(conv, 0.1)?;
    }
    let trunk = cur;

    let (reg, cls) = match cfg.head_mode {
        HeadMode::Decoupled => {
            let (rw, rb) = conv_param_names("head.reg");
            let w = p(tape, &rw)?;
            let b = p(tape, &rb)?;
            let reg = tape.conv2d(trunk, w, b, 1, 0)?;
            let (cw, cb) = conv_param_names("head.cls");
            let w = p(tape, &cw)?;
            let b = p(tape, &cb)?;
            let cls = tape.conv2d(trunk, w, b, 1, 0)?;
            (reg, cls)
        }
        HeadMode::Coupled => {
            let (jw, jb) = conv_param_names("head.joint");
            let w = p(tape, &jw)?;
            let b = p(tape, &jb)?;
            let joint = tape.conv2d(trunk, w, b, 1, 0)?;
            let reg = tape.slice_channels(joint, 0, 5)?;
            let cls = tape.slice_channels(joint, 5, 5 + cfg.num_classes)?;
            (reg, cls)
        }
    };

    let pooled = tape.global_avg_pool(trunk)?;
    let gw = p(tape, "head.gls.w")?;
    let gb = p(tape, "head.gls.b")?;
    let gls = tape.affine(pooled, gw, gb)?;

    Ok(PredictionNodes { reg, cls, gls, stride: cfg.stride })
}

/// Inference forward pass: logits only, gradient bookkeeping discarded.
pub fn detect(cfg: &ArchConfig, params: &ParamSet, image: &Tensor) -> Result<PredictionMaps> {
    let mut tape = Tape::new();
    let nodes = build_detector(&mut tape, cfg, params, image)?;
    Ok(PredictionMaps {
        reg: tape.value(nodes.reg).clone(),
        cls: tape.value(nodes.cls).clone(),
        gls: tape.value(nodes.gls).clone(),
        stride: cfg.stride,
    })
}

/// Assigns each ground-truth box to the cell containing its center.
/// Later boxes overwrite earlier ones on cell collision; the image
/// multi-label target is the union of present classes.
pub fn assign_targets(
    gt: &[(BBox, usize)],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    num_classes: usize,
) -> TargetMaps {
    let mut coord = Tensor::zeros(&[grid_h, grid_w, 4]);
    let mut obj = Tensor::zeros(&[grid_h, grid_w]);
    let mut cls = Tensor::zeros(&[grid_h, grid_w, num_classes]);
    let mut gls = Tensor::zeros(&[num_classes]);
    let mut pos_mask = Tensor::zeros(&[grid_h, grid_w]);
    let mut cell_owner: Vec<Option<usize>> = vec![None; grid_h * grid_w];

    for (i, (bbox, class)) in gt.iter().enumerate() {
        debug_assert!(*class < num_classes);
        let (cx, cy) = bbox.center();
        let gx = ((cx / stride as f64).floor() as isize).clamp(0, grid_w as isize - 1) as usize;
        let gy = ((cy / stride as f64).floor() as isize).clamp(0, grid_h as isize - 1) as usize;
        cell_owner[gy * grid_w + gx] = Some(i);
        gls.data_mut()[*class] = 1.0;
    }

    let mut positives = Vec::new();
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            if let Some(i) = cell_owner[gy * grid_w + gx] {
                let (bbox, class) = gt[i];
                coord.set3(gy, gx, 0, bbox.x1);
                coord.set3(gy, gx, 1, bbox.y1);
                coord.set3(gy, gx, 2, bbox.x2);
                coord.set3(gy, gx, 3, bbox.y2);
                obj.data_mut()[gy * grid_w + gx] = 1.0;
                cls.set3(gy, gx, class, 1.0);
                pos_mask.data_mut()[gy * grid_w + gx] = 1.0;
                positives.push((gy, gx, bbox, class));
            }
        }
    }

    TargetMaps { coord, obj, cls, gls, pos_mask, positives, stride }
}

/// Decodes prediction maps into scored boxes: per-cell sigmoid center
/// offsets, exponential sizes capped at the image extent, confidence
/// floor, then greedy NMS. Output boxes are clamped to the image and
/// sorted by descending confidence.
pub fn decode(pm: &PredictionMaps, conf_floor: f64, nms_thr: f64) -> Vec<ScoredBox> {
    assert!((0.0..1.0).contains(&conf_floor), "conf_floor must be in [0, 1)");
    let (h, w, _) = pm.reg.dims3();
    let (_, _, c) = pm.cls.dims3();
    let s = pm.stride as f64;
    let img_w = w as f64 * s;
    let img_h = h as f64 * s;

    let mut cands = Vec::new();
    for gy in 0..h {
        for gx in 0..w {
            let conf = sigmoid(pm.reg.at3(gy, gx, 4));
            if conf < conf_floor {
                continue;
            }
            let cx = (gx as f64 + sigmoid(pm.reg.at3(gy, gx, 0))) * s;
            let cy = (gy as f64 + sigmoid(pm.reg.at3(gy, gx, 1))) * s;
            let bw = (pm.reg.at3(gy, gx, 2).exp() * s).min(img_w);
            let bh = (pm.reg.at3(gy, gx, 3).exp() * s).min(img_h);
            let bbox = BBox::new(cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh)
                .clamp_to(img_w, img_h);
            let cls_probs: Vec<f64> = (0..c).map(|k| sigmoid(pm.cls.at3(gy, gx, k))).collect();
            cands.push(ScoredBox::new(bbox, conf, cls_probs));
        }
    }
    let kept = nms(&cands, nms_thr);
    kept.into_iter().map(|i| cands[i].clone()).collect()
}

/// Sigmoid-activated image-level class probabilities.
pub fn global_probs(pm: &PredictionMaps) -> Vec<f64> {
    pm.gls.data().iter().map(|&v| sigmoid(v)).collect()
}

/// Renders target maps as saturated logits (+/-50 for binary targets,
/// exact inverse transforms for coordinates). Decoding these recovers
/// the assigned boxes; a self-check of the grid geometry.
pub fn targets_as_logits(tm: &TargetMaps, num_classes: usize) -> PredictionMaps {
    let (h, w) = tm.obj.dims2();
    let s = tm.stride as f64;
    let mut reg = Tensor::zeros(&[h, w, 5]);
    let mut cls = Tensor::zeros(&[h, w, num_classes]);
    for gy in 0..h {
        for gx in 0..w {
            let pos = tm.pos_mask.data()[gy * w + gx] > 0.5;
            reg.set3(gy, gx, 4, if pos { 50.0 } else { -50.0 });
            for k in 0..num_classes {
                let on = tm.cls.at3(gy, gx, k) > 0.5;
                cls.set3(gy, gx, k, if pos && on { 50.0 } else { -50.0 });
            }
            if pos {
                let b = BBox::new(
                    tm.coord.at3(gy, gx, 0),
                    tm.coord.at3(gy, gx, 1),
                    tm.coord.at3(gy, gx, 2),
                    tm.coord.at3(gy, gx, 3),
                );
                let (cx, cy) = b.center();
                let fx = (cx / s - gx as f64).clamp(1e-6, 1.0 - 1e-6);
                let fy = (cy / s - gy as f64).clamp(1e-6, 1.0 - 1e-6);
                reg.set3(gy, gx, 0, logit(fx));
                reg.set3(gy, gx, 1, logit(fy));
                reg.set3(gy, gx, 2, (b.width().max(1e-6) / s).ln());
                reg.set3(gy, gx, 3, (b.height().max(1e-6) / s).ln());
            }
        }
    }
    let mut gls = Tensor::zeros(&[num_classes]);
    for k in 0..num_classes {
        gls.data_mut()[k] = if tm.gls.data()[k] > 0.5 { 50.0 } else { -50.0 };
    }
    PredictionMaps { reg, cls, gls, stride: tm.stride }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
