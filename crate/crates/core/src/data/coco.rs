//! COCO-instances JSON interop.
//!
//! Field names follow the COCO convention: `images`, `annotations`
//! with `bbox` as `[x, y, w, h]`, and `categories`. Import converts
//! boxes to corner format and remaps category ids densely to
//! `0..c-1` (sorted by original id), recording the mapping; export is
//! the exact inverse for datasets whose coordinates sit on a dyadic
//! grid.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::{class_name, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// A parsed COCO dataset with dense class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    /// Per image (parallel to `images`): corner boxes and dense class.
    pub boxes: Vec<Vec<(BBox, usize)>>,
    /// Dense class index -> original category id.
    pub category_ids: Vec<u64>,
    /// Dense class index -> category name.
    pub category_names: Vec<String>,
}

/// Writes a synthetic dataset as COCO-instances JSON. Category ids are
/// `1..=c` in class order; annotation ids are assigned sequentially.
pub fn write_coco_json(ds: &Dataset, path: &Path) -> Result<()> {
    let size = ds.gen_config.image_size as u32;
    let images = ds
        .scenes
        .iter()
        .map(|s| CocoImage {
            id: s.scene_id,
            file_name: format!("{:06}.bin", s.scene_id),
            width: size,
            height: size,
        })
        .collect();

    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for scene in &ds.scenes {
        for (b, class) in &scene.gt {
            let w = b.x2 - b.x1;
            let h = b.y2 - b.y1;
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: scene.scene_id,
                category_id: *class as u64 + 1,
                bbox: [b.x1, b.y1, w, h],
                area: w * h,
                iscrowd: 0,
            });
            next_id += 1;
        }
    }

    let categories = (0..super::NUM_SHAPE_CLASSES)
        .map(|k| CocoCategory { id: k as u64 + 1, name: class_name(k).to_string(), supercategory: None })
        .collect();

    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &CocoFile { images, annotations, categories })?;
    Ok(())
}

/// Reads COCO-instances JSON, validating annotations and remapping
/// category ids densely.
pub fn read_coco_json(path: &Path) -> Result<CocoDataset> {
    let f = File::open(path)?;
    let file: CocoFile = serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::CocoParse {
        location: path.display().to_string(),
        detail: e.to_string(),
    })?;

    if file.images.is_empty() {
        return Err(Error::CocoParse { location: path.display().to_string(), detail: "no images".into() });
    }

    let mut category_ids: Vec<u64> = file.categories.iter().map(|c| c.id).collect();
    category_ids.sort_unstable();
    category_ids.dedup();
    if category_ids.len() != file.categories.len() {
        return Err(Error::CocoParse {
            location: path.display().to_string(),
            detail: "duplicate category ids".into(),
        });
    }
    let dense = |orig: u64| category_ids.binary_search(&orig).ok();
    let mut category_names = vec![String::new(); category_ids.len()];
    for c in &file.categories {
        category_names[dense(c.id).unwrap()] = c.name.clone();
    }

    let mut image_index = std::collections::BTreeMap::new();
    for (i, img) in file.images.iter().enumerate() {
        if image_index.insert(img.id, i).is_some() {
            return Err(Error::CocoParse {
                location: format!("image id {}", img.id),
                detail: "duplicate image id".into(),
            });
        }
    }

    let mut boxes: Vec<Vec<(BBox, usize)>> = vec![Vec::new(); file.images.len()];
    for ann in &file.annotations {
        let [x, y, w, h] = ann.bbox;
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::CocoParse {
                location: format!("annotation id {}", ann.id),
                detail: format!("invalid bbox extents [{x}, {y}, {w}, {h}]"),
            });
        }
        let img_slot = *image_index.get(&ann.image_id).ok_or_else(|| Error::CocoParse {
            location: format!("annotation id {}", ann.id),
            detail: format!("unknown image id {}", ann.image_id),
        })?;
        let class = dense(ann.category_id).ok_or_else(|| Error::CocoParse {
            location: format!("annotation id {}", ann.id),
            detail: format!("unknown category id {}", ann.category_id),
        })?;
        boxes[img_slot].push((BBox::new(x, y, x + w, y + h), class));
    }

    Ok(CocoDataset { images: file.images, boxes, category_ids, category_names })
}
