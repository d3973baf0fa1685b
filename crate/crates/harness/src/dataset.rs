//! On-disk layout, netpbm IO and the train/validation split.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scenes/<seed>/image.ppm     binary P6, 8-bit
//! <root>/scenes/<seed>/mask_<k>.pgm  binary P5, 0 or 255
//! <root>/scenes/<seed>/meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use baris_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::scene::{generate_scene, DegradationParams, SceneConfig, SyntheticScene};
use crate::{HarnessError, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[3, H, W]` values in `[0, 1]` as P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(quantize(image.data()[ch * plane + p]));
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes a binary `[1, H, W]` mask as P5 with values 0 and 255.
pub fn write_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Parses a binary netpbm header; returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |why: &str| HarnessError::Format(format!("{}: {why}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    Ok((w, h, i + 1))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, off) = parse_header(&bytes, "P6", path)?;
    let plane = h * w;
    let payload = bytes
        .get(off..off + 3 * plane)
        .ok_or_else(|| HarnessError::Format(format!("{}: payload too short", path.display())))?;
    Ok(Tensor::from_fn(&[3, h, w], |i| payload[3 * (i[1] * w + i[2]) + i[0]] as f32 / 255.0))
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, off) = parse_header(&bytes, "P5", path)?;
    let payload = bytes
        .get(off..off + h * w)
        .ok_or_else(|| HarnessError::Format(format!("{}: payload too short", path.display())))?;
    Ok(Tensor::new(&[1, h, w], payload.iter().map(|&b| (b > 127) as u8 as f32).collect())?)
}

/// One training example as the model sees it: the 8-bit image and the
/// union of the instance masks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    /// `[3, H, W]`, multiples of 1/255.
    pub image: Tensor<f32>,
    /// `[1, H, W]` binary.
    pub target: Tensor<f32>,
}

impl Sample {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Self {
            seed: scene.seed,
            image: scene.image.map(|v| quantize(v) as f32 / 255.0),
            target: union(&scene.masks),
        }
    }
}

/// Pixelwise union of binary masks.
pub fn union(masks: &[Tensor<f32>]) -> Tensor<f32> {
    let mut out = Tensor::<f32>::zeros(masks[0].shape());
    for m in masks {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(v);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub instances: usize,
    pub degradation: DegradationParams,
}

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("scenes").join(seed.to_string())
}

/// Scenes for `seeds`, rendered in parallel. Each scene depends only on its
/// seed, so the result does not depend on the thread count.
pub fn generate_scenes(seeds: &[u64], cfg: &SceneConfig) -> Vec<SyntheticScene> {
    seeds.par_iter().map(|&s| generate_scene(s, cfg)).collect()
}

fn write_scene(root: &Path, scene: &SyntheticScene) -> Result<()> {
    let dir = scene_dir(root, scene.seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_ppm(&dir.join("image.ppm"), &scene.image)?;
    for (k, m) in scene.masks.iter().enumerate() {
        write_pgm(&dir.join(format!("mask_{k}.pgm")), m)?;
    }
    let meta = SceneMeta {
        seed: scene.seed,
        instances: scene.masks.len(),
        degradation: scene.degradation,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&path))
}

/// Writes scenes `seed..seed + count` and `manifest.json` under `root`.
/// Rendering and writing run on the current rayon pool.
pub fn write_dataset(root: &Path, seed: u64, count: usize, cfg: &SceneConfig) -> Result<()> {
    fs::create_dir_all(root.join("scenes")).map_err(io_err(root))?;
    let seeds: Vec<u64> = (seed..seed + count as u64).collect();
    seeds
        .par_iter()
        .map(|&s| write_scene(root, &generate_scene(s, cfg)))
        .collect::<Result<Vec<()>>>()?;
    let manifest = json!({
        "format": "baris-scenes/1",
        "seed": seed,
        "count": count,
        "seeds": seeds,
        "scene": cfg,
    });
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))
}

pub fn read_sample(root: &Path, seed: u64) -> Result<Sample> {
    let dir = scene_dir(root, seed);
    let meta_path = dir.join("meta.json");
    let meta: SceneMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)?;
    let masks = (0..meta.instances)
        .map(|k| read_pgm(&dir.join(format!("mask_{k}.pgm"))))
        .collect::<Result<Vec<_>>>()?;
    if masks.is_empty() {
        return Err(HarnessError::Format(format!("{}: scene has no masks", dir.display())));
    }
    Ok(Sample {
        seed,
        image: read_ppm(&dir.join("image.ppm"))?,
        target: union(&masks),
    })
}

/// Seeds listed in `root/manifest.json`.
pub fn read_manifest_seeds(root: &Path) -> Result<Vec<u64>> {
    let path = root.join("manifest.json");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
    v["seeds"]
        .as_array()
        .ok_or_else(|| HarnessError::Format(format!("{}: missing `seeds`", path.display())))?
        .iter()
        .map(|s| s.as_u64().ok_or_else(|| HarnessError::Format(format!("{}: bad seed {s}", path.display()))))
        .collect()
}

pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    read_manifest_seeds(root)?.into_par_iter().map(|s| read_sample(root, s)).collect()
}

fn seed_hash(seed: u64) -> [u8; 32] {
    Sha256::digest(seed.to_le_bytes()).into()
}

/// Orders samples by the hash of their seed and puts the first
/// `round(train_fraction * n)` in the training split.
pub fn split(mut samples: Vec<Sample>, train_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    samples.sort_by_key(|s| seed_hash(s.seed));
    let n_train = (train_fraction * samples.len() as f64).round() as usize;
    let val = samples.split_off(n_train.min(samples.len()));
    (samples, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 5, 7], |i| ((i[0] * 35 + i[1] * 7 + i[2]) % 256) as f32 / 255.0);
        write_ppm(&dir.path().join("a.ppm"), &img).unwrap();
        assert!(read_ppm(&dir.path().join("a.ppm")).unwrap().bit_eq(&img));
        let mask = Tensor::from_fn(&[1, 5, 7], |i| ((i[1] + i[2]) % 3 == 0) as u8 as f32);
        write_pgm(&dir.path().join("m.pgm"), &mask).unwrap();
        assert!(read_pgm(&dir.path().join("m.pgm")).unwrap().bit_eq(&mask));
        fs::write(dir.path().join("bad.ppm"), b"P5\n2 2\n255\n0000").unwrap();
        assert!(read_ppm(&dir.path().join("bad.ppm")).is_err());
    }

    #[test]
    fn disk_and_memory_samples_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        write_dataset(dir.path(), 10, 4, &cfg).unwrap();
        let disk = read_dataset(dir.path()).unwrap();
        assert_eq!(disk.len(), 4);
        for s in &disk {
            let mem = Sample::from_scene(&generate_scene(s.seed, &cfg));
            assert!(mem.image.bit_eq(&s.image) && mem.target.bit_eq(&s.target));
        }
    }

    #[test]
    fn split_is_deterministic_and_exact() {
        let samples: Vec<Sample> = (0..500)
            .map(|seed| Sample {
                seed,
                image: Tensor::zeros(&[1]),
                target: Tensor::zeros(&[1]),
            })
            .collect();
        let (train, val) = split(samples.clone(), 0.8);
        assert_eq!((train.len(), val.len()), (400, 100));
        let (train2, _) = split(samples.into_iter().rev().collect(), 0.8);
        assert!(train.iter().zip(&train2).all(|(a, b)| a.seed == b.seed));
    }
}
