//! On-disk dataset layout: `manifest.json` plus one binary raster per
//! scene under `scenes/`.
//!
//! Scene file layout (little-endian):
//!
//! ```text
//! magic    8 bytes  b"SSODSCN1"
//! scene_id u64
//! split    u8       0 = labeled, 1 = unlabeled
//! h, w     u32 each
//! n_boxes  u32
//! boxes    n_boxes * (x1 y1 x2 y2 as f64 bits, class u32)
//! pixels   h*w*3 u16, row-major RGB, value = k / 65535
//! ```
//!
//! Generated pixels live on the 16-bit grid and box coordinates on
//! the 1/256-px grid, so the round trip is bit-exact.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

use super::{Dataset, GenConfig, Scene, Split, SplitManifest};

const MAGIC: &[u8; 8] = b"SSODSCN1";

/// Dataset-level metadata stored in `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    n_scenes: usize,
    gen_config: GenConfig,
    split: SplitManifest,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("scenes"))?;
    let manifest = ManifestFile {
        format_version: 1,
        n_scenes: ds.scenes.len(),
        gen_config: ds.gen_config.clone(),
        split: ds.manifest.clone(),
    };
    let mf = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(mf), &manifest)?;

    for scene in &ds.scenes {
        let path = dir.join("scenes").join(format!("{:06}.bin", scene.scene_id));
        save_scene(scene, &path)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mf = File::open(dir.join("manifest.json"))?;
    let manifest: ManifestFile = serde_json::from_reader(BufReader::new(mf))?;
    let mut scenes = Vec::with_capacity(manifest.n_scenes);
    for id in 0..manifest.n_scenes as u64 {
        let path = dir.join("scenes").join(format!("{id:06}.bin"));
        scenes.push(load_scene(&path)?);
    }
    Ok(Dataset { scenes, manifest: manifest.split, gen_config: manifest.gen_config })
}

fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&scene.scene_id.to_le_bytes())?;
    w.write_all(&[match scene.split {
        Split::Labeled => 0u8,
        Split::Unlabeled => 1u8,
    }])?;
    let (h, wd, c) = scene.image.dims3();
    debug_assert_eq!(c, 3);
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(wd as u32).to_le_bytes())?;
    w.write_all(&(scene.gt.len() as u32).to_le_bytes())?;
    for (b, class) in &scene.gt {
        for v in [b.x1, b.y1, b.x2, b.y2] {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        w.write_all(&(*class as u32).to_le_bytes())?;
    }
    for &v in scene.image.data() {
        let k = (v * 65535.0).round() as u16;
        w.write_all(&k.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn load_scene(path: &Path) -> Result<Scene> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: bad scene magic", path.display())));
    }
    let scene_id = read_u64(&mut r)?;
    let mut split_byte = [0u8; 1];
    r.read_exact(&mut split_byte)?;
    let split = match split_byte[0] {
        0 => Split::Labeled,
        1 => Split::Unlabeled,
        other => return Err(Error::Data(format!("{}: bad split byte {other}", path.display()))),
    };
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let n_boxes = read_u32(&mut r)? as usize;
    let mut gt = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let x1 = f64::from_bits(read_u64(&mut r)?);
        let y1 = f64::from_bits(read_u64(&mut r)?);
        let x2 = f64::from_bits(read_u64(&mut r)?);
        let y2 = f64::from_bits(read_u64(&mut r)?);
        let class = read_u32(&mut r)? as usize;
        gt.push((BBox::new(x1, y1, x2, y2), class));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    let mut buf = vec![0u8; h * w * 3 * 2];
    r.read_exact(&mut buf)?;
    for chunk in buf.chunks_exact(2) {
        let k = u16::from_le_bytes([chunk[0], chunk[1]]);
        data.push(k as f64 / 65535.0);
    }
    Ok(Scene { image: Tensor::from_vec(&[h, w, 3], data), gt, scene_id, split })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_roundtrip_is_exact() {
        let cfg = GenConfig::default();
        let ds = Dataset::generate(12, 0.25, 42, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, loaded.manifest);
        assert_eq!(ds.scenes.len(), loaded.scenes.len());
        for (a, b) in ds.scenes.iter().zip(&loaded.scenes) {
            assert_eq!(a, b, "scene {} did not round-trip", a.scene_id);
        }
    }
}
