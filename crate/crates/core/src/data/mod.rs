//! Synthetic detection scenes, labeled/unlabeled split management,
//! the on-disk dataset layout, and COCO-format annotation interop.

pub mod coco;
mod gen;
mod store;

pub use gen::{class_name, generate_scene, GenConfig, NUM_SHAPE_CLASSES};
pub use store::{load_dataset, save_dataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[H, W, 3]`, values in `[0, 1]` quantized to 16-bit levels.
    pub image: Tensor,
    pub gt: Vec<(BBox, usize)>,
    pub scene_id: u64,
    pub split: Split,
}

/// Reproducible labeled/unlabeled partition of scene ids.
///
/// Labeled ids are a prefix sample of a seed-determined permutation,
/// so manifests for nested fractions from the same seed are nested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled_ids: Vec<u64>,
    pub unlabeled_ids: Vec<u64>,
    pub seed: u64,
    pub labeled_fraction: f64,
}

/// Uniform sample without replacement for the labeled set; the
/// remainder is unlabeled. Errors when the fraction selects zero
/// scenes.
pub fn make_splits(n_scenes: usize, labeled_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(0.0..=1.0).contains(&labeled_fraction) || labeled_fraction <= 0.0 {
        return Err(Error::Config(format!("labeled fraction {labeled_fraction} not in (0, 1]")));
    }
    let k = (n_scenes as f64 * labeled_fraction).round() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} of {n_scenes} scenes selects zero labeled scenes"
        )));
    }

    // Fisher-Yates over all ids, then take the prefix.
    use rand::Rng;
    let mut rng = rng::stream(seed, "split-permutation", 0);
    let mut ids: Vec<u64> = (0..n_scenes as u64).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut labeled: Vec<u64> = ids[..k].to_vec();
    let mut unlabeled: Vec<u64> = ids[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitManifest { labeled_ids: labeled, unlabeled_ids: unlabeled, seed, labeled_fraction })
}

/// An in-memory dataset: scenes indexed by id plus the split manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub manifest: SplitManifest,
    pub gen_config: GenConfig,
}

impl Dataset {
    /// Generates `n_scenes` scenes from one master seed and splits
    /// them. Scene `i` draws from an independent stream, so the
    /// dataset is reproducible per scene id.
    pub fn generate(n_scenes: usize, labeled_fraction: f64, master_seed: u64, cfg: &GenConfig) -> Result<Dataset> {
        let manifest = make_splits(n_scenes, labeled_fraction, master_seed)?;
        let mut scenes = Vec::with_capacity(n_scenes);
        for id in 0..n_scenes as u64 {
            let mut scene = generate_scene(master_seed, id, cfg);
            scene.split = if manifest.labeled_ids.binary_search(&id).is_ok() {
                Split::Labeled
            } else {
                Split::Unlabeled
            };
            scenes.push(scene);
        }
        Ok(Dataset { scenes, manifest, gen_config: cfg.clone() })
    }

    pub fn scene(&self, id: u64) -> &Scene {
        &self.scenes[id as usize]
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}
