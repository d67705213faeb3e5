//! Weak and strong augmentation pipelines.
//!
//! Ops are grouped by whether they transform ground-truth boxes.
//! Box-relevant ops (mosaic, horizontal flip, scale jitter,
//! translation) form the weak pipeline used for the teacher's view;
//! the strong pipeline for the student appends box-irrelevant pixel
//! perturbations (channel jitter, grayscale, gaussian blur, random
//! erasing) that leave the box list bitwise untouched.
//!
//! Sampling and application are separate: a pipeline first draws an
//! op list from a seeded stream, then applies it. The recorded op
//! list replays to the identical image.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{flip_box, BBox};
use crate::rng;
use crate::tensor::Tensor;

/// Per-op probabilities and ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub mosaic_p: f64,
    /// Whether the weak pipeline may sample mosaic at all.
    pub mosaic_enabled: bool,
    /// Whether unlabeled weak views also draw mosaic.
    pub mosaic_unlabeled: bool,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Max translation as a fraction of the image size.
    pub translate_frac: f64,
    pub channel_jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub erase_p: f64,
    /// Upper bound on erased area as a fraction of the image.
    pub erase_max_frac: f64,
    /// Boxes smaller than this after clamping are dropped (px^2).
    pub min_box_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            mosaic_p: 0.5,
            mosaic_enabled: true,
            mosaic_unlabeled: true,
            scale_lo: 0.7,
            scale_hi: 1.3,
            translate_frac: 0.1,
            channel_jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            erase_p: 0.7,
            erase_max_frac: 0.2,
            min_box_area: 4.0,
        }
    }
}

/// One sampled augmentation with its parameters; applying the same op
/// list to the same inputs reproduces the output exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugOp {
    /// 2x2 composite split at `(cx, cy)`; consumes 3 partner scenes.
    Mosaic { cx: usize, cy: usize },
    Flip,
    Scale { factor: f64 },
    Translate { dx: i64, dy: i64 },
    ChannelJitter { scale: [f64; 3], shift: [f64; 3] },
    Grayscale,
    GaussianBlur { sigma: f64 },
    RandomErase { x: usize, y: usize, w: usize, h: usize, noise_seed: u64 },
}

impl AugOp {
    pub fn is_box_relevant(&self) -> bool {
        matches!(
            self,
            AugOp::Mosaic { .. } | AugOp::Flip | AugOp::Scale { .. } | AugOp::Translate { .. }
        )
    }
}

/// An augmented image with transformed boxes and the replayable op
/// record.
#[derive(Clone, Debug)]
pub struct AugmentedScene {
    pub image: Tensor,
    pub boxes: Vec<(BBox, usize)>,
    pub applied_ops: Vec<AugOp>,
    pub rng_seed: u64,
}

fn clamp_and_filter(boxes: Vec<(BBox, usize)>, w: f64, h: f64, min_area: f64) -> Vec<(BBox, usize)> {
    boxes
        .into_iter()
        .map(|(b, c)| (b.clamp_to(w, h), c))
        .filter(|(b, _)| b.area() >= min_area)
        .collect()
}

/// Samples the box-relevant op list. Mosaic is only drawn when the
/// caller can supply three partner scenes.
pub fn sample_weak_ops(cfg: &AugmentConfig, rng: &mut ChaCha8Rng, image_size: usize, have_partners: bool) -> Vec<AugOp> {
    let mut ops = Vec::new();
    if cfg.mosaic_enabled && have_partners && rng.gen_bool(cfg.mosaic_p) {
        let lo = (image_size as f64 * 0.3) as usize;
        let hi = (image_size as f64 * 0.7) as usize;
        ops.push(AugOp::Mosaic { cx: rng.gen_range(lo..=hi), cy: rng.gen_range(lo..=hi) });
    }
    if rng.gen_bool(cfg.flip_p) {
        ops.push(AugOp::Flip);
    }
    ops.push(AugOp::Scale { factor: rng.gen_range(cfg.scale_lo..cfg.scale_hi) });
    let max_t = (image_size as f64 * cfg.translate_frac) as i64;
    ops.push(AugOp::Translate { dx: rng.gen_range(-max_t..=max_t), dy: rng.gen_range(-max_t..=max_t) });
    ops
}

/// Samples the box-irrelevant op list used to strengthen a weak view.
pub fn sample_strong_extra_ops(cfg: &AugmentConfig, rng: &mut ChaCha8Rng, image_size: usize) -> Vec<AugOp> {
    let mut ops = Vec::new();
    if rng.gen_bool(cfg.channel_jitter_p) {
        let mut scale = [0.0; 3];
        let mut shift = [0.0; 3];
        for ch in 0..3 {
            scale[ch] = rng.gen_range(0.8..1.2);
            shift[ch] = rng.gen_range(-0.1..0.1);
        }
        ops.push(AugOp::ChannelJitter { scale, shift });
    }
    if rng.gen_bool(cfg.grayscale_p) {
        ops.push(AugOp::Grayscale);
    }
    if rng.gen_bool(cfg.blur_p) {
        ops.push(AugOp::GaussianBlur { sigma: rng.gen_range(0.3..1.0) });
    }
    if rng.gen_bool(cfg.erase_p) {
        let max_area = (image_size * image_size) as f64 * cfg.erase_max_frac;
        let w = rng.gen_range(4..=image_size / 2);
        let max_h = ((max_area / w as f64) as usize).clamp(2, image_size / 2);
        let h = rng.gen_range(2..=max_h);
        let x = rng.gen_range(0..image_size - w);
        let y = rng.gen_range(0..image_size - h);
        ops.push(AugOp::RandomErase { x, y, w, h, noise_seed: rng.gen() });
    }
    ops
}

/// Applies an op list to a scene. `partners` supplies the three extra
/// scenes a mosaic op consumes; it may be empty when the list has no
/// mosaic.
pub fn apply_ops(
    image: &Tensor,
    boxes: &[(BBox, usize)],
    partners: &[&Scene],
    ops: &[AugOp],
    cfg: &AugmentConfig,
    rng_seed: u64,
) -> Result<AugmentedScene> {
    let mut img = image.clone();
    let mut bxs: Vec<(BBox, usize)> = boxes.to_vec();

    for op in ops {
        let (h, w, _) = img.dims3();
        let (wf, hf) = (w as f64, h as f64);
        match op {
            AugOp::Mosaic { cx, cy } => {
                if partners.len() < 3 {
                    return Err(Error::Config("mosaic needs exactly 3 partner scenes".into()));
                }
                let quads: [(&Tensor, &[(BBox, usize)]); 4] = [
                    (&img, &bxs),
                    (&partners[0].image, &partners[0].gt),
                    (&partners[1].image, &partners[1].gt),
                    (&partners[2].image, &partners[2].gt),
                ];
                let (m_img, m_boxes) = mosaic_composite(&quads, *cx, *cy, cfg.min_box_area);
                img = m_img;
                bxs = m_boxes;
            }
            AugOp::Flip => {
                img = flip_image(&img);
                bxs = bxs.iter().map(|(b, c)| (flip_box(b, wf), *c)).collect();
            }
            AugOp::Scale { factor } => {
                img = scale_about_center(&img, *factor);
                let (cx, cy) = (wf / 2.0, hf / 2.0);
                bxs = clamp_and_filter(
                    bxs.iter()
                        .map(|(b, c)| {
                            (
                                BBox::new(
                                    cx + (b.x1 - cx) * factor,
                                    cy + (b.y1 - cy) * factor,
                                    cx + (b.x2 - cx) * factor,
                                    cy + (b.y2 - cy) * factor,
                                ),
                                *c,
                            )
                        })
                        .collect(),
                    wf,
                    hf,
                    cfg.min_box_area,
                );
            }
            AugOp::Translate { dx, dy } => {
                img = translate_image(&img, *dx, *dy);
                bxs = clamp_and_filter(
                    bxs.iter()
                        .map(|(b, c)| {
                            (
                                BBox::new(
                                    b.x1 + *dx as f64,
                                    b.y1 + *dy as f64,
                                    b.x2 + *dx as f64,
                                    b.y2 + *dy as f64,
                                ),
                                *c,
                            )
                        })
                        .collect(),
                    wf,
                    hf,
                    cfg.min_box_area,
                );
            }
            AugOp::ChannelJitter { scale, shift } => {
                for px in 0..h * w {
                    for ch in 0..3 {
                        let i = px * 3 + ch;
                        let v = img.data()[i];
                        img.data_mut()[i] = (v * scale[ch] + shift[ch]).clamp(0.0, 1.0);
                    }
                }
            }
            AugOp::Grayscale => {
                for px in 0..h * w {
                    let r = img.data()[px * 3];
                    let g = img.data()[px * 3 + 1];
                    let b = img.data()[px * 3 + 2];
                    let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                    for ch in 0..3 {
                        img.data_mut()[px * 3 + ch] = luma;
                    }
                }
            }
            AugOp::GaussianBlur { sigma } => {
                img = gaussian_blur(&img, *sigma);
            }
            AugOp::RandomErase { x, y, w: ew, h: eh, noise_seed } => {
                let mut noise = rng::stream(*noise_seed, "erase-noise", 0);
                for yy in *y..(*y + *eh).min(h) {
                    for xx in *x..(*x + *ew).min(w) {
                        for ch in 0..3 {
                            img.set3(yy, xx, ch, noise.gen_range(0.0..1.0));
                        }
                    }
                }
            }
        }
    }

    Ok(AugmentedScene { image: img, boxes: bxs, applied_ops: ops.to_vec(), rng_seed })
}

/// Weak (box-relevant) augmentation of a scene.
pub fn weak_augment(scene: &Scene, partners: &[&Scene], cfg: &AugmentConfig, seed: u64) -> Result<AugmentedScene> {
    let (h, _, _) = scene.image.dims3();
    let mut rng = rng::stream(seed, "weak-augment", scene.scene_id);
    let ops = sample_weak_ops(cfg, &mut rng, h, partners.len() >= 3);
    apply_ops(&scene.image, &scene.gt, partners, &ops, cfg, seed)
}

/// Appends box-irrelevant perturbations to an already weakly augmented
/// view. The box list is carried over bitwise.
pub fn strengthen(weak: &AugmentedScene, cfg: &AugmentConfig, seed: u64, image_id: u64) -> Result<AugmentedScene> {
    let (h, _, _) = weak.image.dims3();
    let mut rng = rng::stream(seed, "strong-augment", image_id);
    let extra = sample_strong_extra_ops(cfg, &mut rng, h);
    let out = apply_ops(&weak.image, &weak.boxes, &[], &extra, cfg, seed)?;
    let mut ops = weak.applied_ops.clone();
    ops.extend(out.applied_ops.iter().cloned());
    Ok(AugmentedScene { image: out.image, boxes: out.boxes, applied_ops: ops, rng_seed: seed })
}

/// Full strong pipeline: weak stage then pixel perturbations.
pub fn strong_augment(scene: &Scene, partners: &[&Scene], cfg: &AugmentConfig, seed: u64) -> Result<AugmentedScene> {
    let weak = weak_augment(scene, partners, cfg, seed)?;
    strengthen(&weak, cfg, seed, scene.scene_id)
}

/// 2x2 mosaic of exactly four scenes around a seeded center point.
pub fn mosaic(scenes: &[&Scene], cfg: &AugmentConfig, seed: u64) -> Result<AugmentedScene> {
    if scenes.len() != 4 {
        return Err(Error::Config(format!("mosaic needs exactly 4 scenes, got {}", scenes.len())));
    }
    let (h, _, _) = scenes[0].image.dims3();
    for s in scenes {
        if s.image.shape() != scenes[0].image.shape() {
            return Err(Error::Config("mosaic scenes must share a size".into()));
        }
    }
    let mut rng = rng::stream(seed, "mosaic", scenes[0].scene_id);
    let lo = (h as f64 * 0.3) as usize;
    let hi = (h as f64 * 0.7) as usize;
    let cx = rng.gen_range(lo..=hi);
    let cy = rng.gen_range(lo..=hi);
    let quads: [(&Tensor, &[(BBox, usize)]); 4] = [
        (&scenes[0].image, &scenes[0].gt),
        (&scenes[1].image, &scenes[1].gt),
        (&scenes[2].image, &scenes[2].gt),
        (&scenes[3].image, &scenes[3].gt),
    ];
    let (image, boxes) = mosaic_composite(&quads, cx, cy, cfg.min_box_area);
    Ok(AugmentedScene { image, boxes, applied_ops: vec![AugOp::Mosaic { cx, cy }], rng_seed: seed })
}

fn mosaic_composite(
    quads: &[(&Tensor, &[(BBox, usize)]); 4],
    cx: usize,
    cy: usize,
    min_box_area: f64,
) -> (Tensor, Vec<(BBox, usize)>) {
    let (h, w, _) = quads[0].0.dims3();
    let mut out = Tensor::zeros(&[h, w, 3]);
    let mut boxes = Vec::new();

    // Quadrants: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    let regions = [
        (0usize, 0usize, cx, cy),
        (cx, 0, w, cy),
        (0, cy, cx, h),
        (cx, cy, w, h),
    ];
    for (k, &(x0, y0, x1, y1)) in regions.iter().enumerate() {
        let (src, src_boxes) = quads[k];
        let qw = x1 - x0;
        let qh = y1 - y0;
        if qw == 0 || qh == 0 {
            continue;
        }
        let sx = w as f64 / qw as f64;
        let sy = h as f64 / qh as f64;
        for y in 0..qh {
            for x in 0..qw {
                // Sample the source at the quadrant-scaled position.
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                for ch in 0..3 {
                    out.set3(y0 + y, x0 + x, ch, bilinear(src, src_x, src_y, ch));
                }
            }
        }
        for (b, c) in src_boxes.iter() {
            let nb = BBox::new(
                x0 as f64 + b.x1 / sx,
                y0 as f64 + b.y1 / sy,
                x0 as f64 + b.x2 / sx,
                y0 as f64 + b.y2 / sy,
            );
            let clamped = BBox::new(
                nb.x1.clamp(x0 as f64, x1 as f64),
                nb.y1.clamp(y0 as f64, y1 as f64),
                nb.x2.clamp(x0 as f64, x1 as f64),
                nb.y2.clamp(y0 as f64, y1 as f64),
            );
            if clamped.area() >= min_box_area {
                boxes.push((clamped, *c));
            }
        }
    }
    (out, boxes)
}

fn flip_image(img: &Tensor) -> Tensor {
    let (h, w, _) = img.dims3();
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.set3(y, x, ch, img.at3(y, w - 1 - x, ch));
            }
        }
    }
    out
}

fn bilinear(img: &Tensor, x: f64, y: f64, ch: usize) -> f64 {
    let (h, w, _) = img.dims3();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let a = img.at3(y0, x0, ch) * (1.0 - tx) + img.at3(y0, x1, ch) * tx;
    let b = img.at3(y1, x0, ch) * (1.0 - tx) + img.at3(y1, x1, ch) * tx;
    a * (1.0 - ty) + b * ty
}

/// Zoom about the image center by `factor`, gray fill outside the
/// source footprint.
fn scale_about_center(img: &Tensor, factor: f64) -> Tensor {
    let (h, w, _) = img.dims3();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let sx = cx + (x as f64 + 0.5 - cx) / factor - 0.5;
            let sy = cy + (y as f64 + 0.5 - cy) / factor - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                for ch in 0..3 {
                    out.set3(y, x, ch, 0.5);
                }
            } else {
                for ch in 0..3 {
                    out.set3(y, x, ch, bilinear(img, sx, sy, ch));
                }
            }
        }
    }
    out
}

fn translate_image(img: &Tensor, dx: i64, dy: i64) -> Tensor {
    let (h, w, _) = img.dims3();
    let mut out = Tensor::filled(&[h, w, 3], 0.5);
    for y in 0..h {
        let sy = y as i64 - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w {
            let sx = x as i64 - dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            for ch in 0..3 {
                out.set3(y, x, ch, img.at3(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let radius = (2.5 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    let (h, w, _) = img.dims3();
    // Horizontal then vertical pass with edge replication.
    let mut tmp = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * img.at3(y, sx, ch);
                }
                tmp.set3(y, x, ch, acc);
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp.at3(sy, x, ch);
                }
                out.set3(y, x, ch, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}
