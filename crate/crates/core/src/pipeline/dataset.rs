//! Paired datasets: `degraded/` and `clean/` directories whose files are
//! matched by stem, or pairs generated in memory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::{synth_pair_with, Preset, SynthOptions};
use crate::error::{Error, Result};
use crate::pipeline::image::{is_image_path, load_image_resized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub degraded: PathBuf,
    pub clean: PathBuf,
}

/// A file left out of the dataset and the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<PairPaths>,
    pub extent: (usize, usize),
    pub seed: u64,
    pub skipped: Vec<SkipRecord>,
}

/// One training example: generator input and target, `[3, H, W]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Matches `root/degraded/*` against `root/clean/*` by file stem and
/// shuffles the matched pairs with `seed`. Unmatched files become skip
/// records; images are not decoded yet.
pub fn load_dataset(root: impl AsRef<Path>, extent: (usize, usize), seed: u64) -> Result<PairedDataset> {
    let root = root.as_ref();
    let degraded = list_images(&root.join("degraded"))?;
    let clean = list_images(&root.join("clean"))?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (name, d) in &degraded {
        match clean.get(name) {
            Some(c) => pairs.push(PairPaths {
                name: name.clone(),
                degraded: d.clone(),
                clean: c.clone(),
            }),
            None => skipped.push(SkipRecord {
                path: d.clone(),
                reason: "no clean counterpart".into(),
            }),
        }
    }
    for (name, c) in &clean {
        if !degraded.contains_key(name) {
            skipped.push(SkipRecord {
                path: c.clone(),
                reason: "no degraded counterpart".into(),
            });
        }
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(PairedDataset {
        pairs,
        extent,
        seed,
        skipped,
    })
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decodes every pair at the dataset extent, degraded image as input.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.pairs
            .iter()
            .map(|p| {
                Ok(Sample {
                    name: p.name.clone(),
                    input: load_image_resized(&p.degraded, self.extent)?,
                    target: load_image_resized(&p.clean, self.extent)?,
                })
            })
            .collect()
    }
}

/// `count` procedural pairs from consecutive seeds starting at `seed`,
/// cycling through the presets.
pub fn synthetic_samples(count: usize, seed: u64, extent: (usize, usize), presets: &[Preset]) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let preset = presets[i % presets.len()];
            let (clean, degraded) = synth_pair_with(seed + i as u64, &SynthOptions::new(preset, extent));
            Sample {
                name: format!("synth_{i:05}"),
                input: degraded,
                target: clean,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::image::save_image;

    #[test]
    fn empty_dir_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path(), (8, 8), 0).unwrap();
        assert!(ds.is_empty() && ds.skipped.is_empty());
    }

    #[test]
    fn matches_by_name_and_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("clean")).unwrap();
        std::fs::create_dir_all(dir.path().join("degraded")).unwrap();
        let img = Tensor::full(&[3, 6, 6], 0.5f32);
        for n in ["a", "b", "c"] {
            save_image(dir.path().join(format!("clean/{n}.png")), &img).unwrap();
            save_image(dir.path().join(format!("degraded/{n}.ppm")), &img).unwrap();
        }
        save_image(dir.path().join("degraded/orphan.png"), &img).unwrap();
        let ds = load_dataset(dir.path(), (4, 4), 3).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.skipped.len(), 1);
        assert!(ds.skipped[0].path.ends_with("orphan.png"));
        let again = load_dataset(dir.path(), (4, 4), 3).unwrap();
        assert_eq!(ds.pairs, again.pairs);
        let samples = ds.load_samples().unwrap();
        assert_eq!(samples[0].input.shape(), &[3, 4, 4]);
    }

    #[test]
    fn synthetic_samples_are_deterministic() {
        let a = synthetic_samples(4, 10, (16, 16), &Preset::ALL);
        assert_eq!(a, synthetic_samples(4, 10, (16, 16), &Preset::ALL));
        assert_ne!(a[0].input, a[0].target);
    }
}
