//! Scene dataset directories and external stereo-pair folders.
//!
//! A scene dataset holds `left/ right/ disp_left/ disp_right/ occ_left/
//! occ_right/` with one file per sample (`00000.png`, `00000.pfm`, ...) and
//! a `manifest.json` describing the generator settings and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pfm::{read_pfm, write_pfm};
use super::png::{read_mask_png, read_png, write_mask_png, write_png};
use super::scene::{generate_scene, SceneConfig, SceneSample};
use super::types::Image;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const SUBDIRS: [&str; 6] = ["left", "right", "disp_left", "disp_right", "occ_left", "occ_right"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub max_disparity: f64,
    pub seeds: Vec<u64>,
    /// Generator settings shared by every sample; its own seed is unused.
    pub scene: SceneConfig,
}

/// Generates one scene per seed from the `base` settings.
pub fn generate_dataset(base: &SceneConfig, seeds: &[u64]) -> Result<Vec<SceneSample>> {
    base.validate()?;
    seeds
        .par_iter()
        .map(|&seed| generate_scene(&SceneConfig { seed, ..base.clone() }))
        .collect()
}

fn sample_name(i: usize) -> String {
    format!("{i:05}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: impl AsRef<Path>, base: &SceneConfig, samples: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in SUBDIRS {
        create_dir(&dir.join(sub))?;
    }
    let manifest = DatasetManifest {
        width: base.width,
        height: base.height,
        max_disparity: base.max_disparity,
        seeds: samples.iter().map(|s| s.seed).collect(),
        scene: base.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    for (i, s) in samples.iter().enumerate() {
        let n = sample_name(i);
        write_png(&s.left, dir.join("left").join(format!("{n}.png")))?;
        write_png(&s.right, dir.join("right").join(format!("{n}.png")))?;
        write_pfm(&s.gt_disp_left, dir.join("disp_left").join(format!("{n}.pfm")))?;
        write_pfm(&s.gt_disp_right, dir.join("disp_right").join(format!("{n}.pfm")))?;
        write_mask_png(&s.gt_occ_left, dir.join("occ_left").join(format!("{n}.png")))?;
        write_mask_png(&s.gt_occ_right, dir.join("occ_right").join(format!("{n}.png")))?;
    }
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        offset: 0,
        reason: e.to_string(),
    })
}

/// Loads every sample listed in the manifest, in order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let samples = manifest
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let n = sample_name(i);
            Ok(SceneSample {
                left: read_png(dir.join("left").join(format!("{n}.png")))?,
                right: read_png(dir.join("right").join(format!("{n}.png")))?,
                gt_disp_left: read_pfm(dir.join("disp_left").join(format!("{n}.pfm")))?,
                gt_disp_right: read_pfm(dir.join("disp_right").join(format!("{n}.pfm")))?,
                gt_occ_left: read_mask_png(dir.join("occ_left").join(format!("{n}.png")))?,
                gt_occ_right: read_mask_png(dir.join("occ_right").join(format!("{n}.png")))?,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// A rectified pair read from `<name>_L.png` / `<name>_R.png`.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub name: String,
    pub left: Image,
    pub right: Image,
}

/// Lazily decoded pairs of a stereo directory, in lexicographic name order.
pub struct StereoPairs {
    dir: PathBuf,
    names: std::vec::IntoIter<(String, bool, bool)>,
}

impl Iterator for StereoPairs {
    type Item = Result<StereoPair>;

    fn next(&mut self) -> Option<Self::Item> {
        let (name, has_l, has_r) = self.names.next()?;
        let lpath = self.dir.join(format!("{name}_L.png"));
        let rpath = self.dir.join(format!("{name}_R.png"));
        Some(match (has_l, has_r) {
            (true, false) => Err(Error::invalid(format!(
                "{} has no mate {}",
                lpath.display(),
                rpath.display()
            ))),
            (false, true) => Err(Error::invalid(format!(
                "{} has no mate {}",
                rpath.display(),
                lpath.display()
            ))),
            _ => read_pair(name, &lpath, &rpath),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.names.size_hint()
    }
}

fn read_pair(name: String, lpath: &Path, rpath: &Path) -> Result<StereoPair> {
    let left = read_png(lpath)?;
    let right = read_png(rpath)?;
    let dims = |i: &Image| (i.width(), i.height(), i.channels());
    if dims(&left) != dims(&right) {
        return Err(Error::invalid(format!(
            "{} is {}x{}x{} but {} is {}x{}x{}",
            lpath.display(),
            left.width(),
            left.height(),
            left.channels(),
            rpath.display(),
            right.width(),
            right.height(),
            right.channels()
        )));
    }
    Ok(StereoPair { name, left, right })
}

/// Lists `<name>_L.png` / `<name>_R.png` pairs in `dir`. Each yielded item
/// fails independently, naming the offending file(s).
pub fn load_stereo_dir(dir: impl AsRef<Path>) -> Result<StereoPairs> {
    let dir = dir.as_ref();
    let mut names: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name();
        let Some(file) = file.to_str() else { continue };
        if let Some(stem) = file.strip_suffix("_L.png") {
            names.entry(stem.to_string()).or_default().0 = true;
        } else if let Some(stem) = file.strip_suffix("_R.png") {
            names.entry(stem.to_string()).or_default().1 = true;
        }
    }
    Ok(StereoPairs {
        dir: dir.to_path_buf(),
        names: names
            .into_iter()
            .map(|(n, (l, r))| (n, l, r))
            .collect::<Vec<_>>()
            .into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            width: 32,
            height: 16,
            max_disparity: 6.0,
            num_foreground_layers: 1,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = small();
        let samples = generate_dataset(&base, &[3, 9]).unwrap();
        save_dataset(dir.path(), &base, &samples).unwrap();
        let (manifest, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.seeds, vec![3, 9]);
        assert_eq!(back.len(), 2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.gt_disp_left, b.gt_disp_left);
            assert_eq!(a.gt_occ_right, b.gt_occ_right);
            for (x, y) in a.left.array().data().iter().zip(b.left.array().data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn stereo_dir_listing() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_stereo_dir(dir.path()).unwrap().count(), 0);

        let img = |h| Image::from_fn(8, h, 1, |_, y, x| ((x + y) % 3) as f64 / 2.0).unwrap();
        write_png(&img(8), dir.path().join("b_L.png")).unwrap();
        write_png(&img(8), dir.path().join("b_R.png")).unwrap();
        write_png(&img(8), dir.path().join("a_L.png")).unwrap();
        write_png(&img(9), dir.path().join("a_R.png")).unwrap();
        write_png(&img(8), dir.path().join("c_L.png")).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();

        let items: Vec<_> = load_stereo_dir(dir.path()).unwrap().collect();
        assert_eq!(items.len(), 3);
        let msg = items[0].as_ref().unwrap_err().to_string();
        assert!(msg.contains("a_L.png") && msg.contains("a_R.png"), "{msg}");
        assert_eq!(items[1].as_ref().unwrap().name, "b");
        let msg = items[2].as_ref().unwrap_err().to_string();
        assert!(msg.contains("c_R.png"), "{msg}");
    }
}
