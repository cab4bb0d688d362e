//! Synthetic faces-free benchmark: each AU owns a fixed rectangle and is
//! present exactly when a bright blob is drawn inside it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_ppm, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle in normalised `[0, 1]` coordinates, `x` across.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Pixel mask on an `l x l` grid, by pixel centre.
    pub fn mask(&self, l: usize) -> Vec<bool> {
        (0..l * l)
            .map(|i| {
                let (y, x) = ((i / l) as f64 + 0.5, (i % l) as f64 + 0.5);
                self.contains(x / l as f64, y / l as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
    /// Side of the generated images.
    pub side: usize,
    pub regions: Vec<Region>,
    /// Probability that each AU is present; one value per region.
    pub occurrence: Vec<f64>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Blob radius, normalised to the image side.
    pub blob_radius: f64,
    /// Rows are spread round-robin over this many subjects.
    pub subjects: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 32,
            seed: 0,
            side: 32,
            regions: default_regions(),
            occurrence: vec![0.5; 3],
            noise: 0.03,
            blob_radius: 0.09,
            subjects: 4,
        }
    }
}

/// Three disjoint regions: upper left, upper right and lower centre.
pub fn default_regions() -> Vec<Region> {
    vec![
        Region {
            x0: 0.05,
            y0: 0.05,
            x1: 0.45,
            y1: 0.45,
        },
        Region {
            x0: 0.55,
            y0: 0.05,
            x1: 0.95,
            y1: 0.45,
        },
        Region {
            x0: 0.25,
            y0: 0.55,
            x1: 0.75,
            y1: 0.95,
        },
    ]
}

/// One rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor<f64>,
    pub labels: Vec<bool>,
    pub subject: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.regions.is_empty() || self.occurrence.len() != self.regions.len() {
            return bad("need one occurrence rate per region");
        }
        if self.side == 0 || self.subjects == 0 {
            return bad("side and subjects must be positive");
        }
        if self.occurrence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("occurrence rates must lie in [0, 1]");
        }
        if !(0.0..).contains(&self.noise) || self.blob_radius.is_nan() || self.blob_radius <= 0.0 {
            return bad("noise must be >= 0 and blob radius > 0");
        }
        for r in &self.regions {
            let (w, h) = (r.x1 - r.x0, r.y1 - r.y0);
            let ok = r.x0 >= 0.0 && r.y0 >= 0.0 && r.x1 <= 1.0 && r.y1 <= 1.0;
            if !ok || w < 2.0 * self.blob_radius || h < 2.0 * self.blob_radius {
                return bad("regions must lie in the unit square and fit a blob");
            }
        }
        Ok(())
    }

    /// Renders every sample in memory, deterministically from the seed.
    pub fn render(&self) -> Result<Vec<SyntheticSample>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("finite std");
        let l = self.side;
        let r = self.blob_radius;
        (0..self.count)
            .map(|i| {
                let subject = i % self.subjects;
                // Per-subject skin tone keeps subjects distinguishable.
                let tone = 0.30 + 0.08 * (subject % 4) as f64;
                let labels: Vec<bool> = self.occurrence.iter().map(|&p| rng.gen_bool(p)).collect();
                let centres: Vec<(f64, f64)> = self
                    .regions
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &on)| on)
                    .map(|(reg, _)| {
                        (
                            rng.gen_range(reg.x0 + r..=reg.x1 - r),
                            rng.gen_range(reg.y0 + r..=reg.y1 - r),
                        )
                    })
                    .collect();
                let mut data = Vec::with_capacity(l * l * 3);
                for py in 0..l {
                    for px in 0..l {
                        let (x, y) = ((px as f64 + 0.5) / l as f64, (py as f64 + 0.5) / l as f64);
                        let blob = centres
                            .iter()
                            .map(|&(cx, cy)| {
                                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                                (-d2 / (2.0 * (0.5 * r).powi(2))).exp()
                            })
                            .fold(0.0, f64::max);
                        let base = tone + 0.6 * blob;
                        for ch in 0..3 {
                            let tint = [0.05, 0.0, -0.05][ch] * (1.0 - blob);
                            let n = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            data.push((base + tint + n).clamp(0.0, 1.0));
                        }
                    }
                }
                Ok(SyntheticSample {
                    image: Tensor::new(vec![l, l, 3], data)?,
                    labels,
                    subject,
                })
            })
            .collect()
    }

    /// Writes `img_XXXXX.ppm` files and `manifest.csv` into `dir`.
    pub fn generate(&self, dir: &Path) -> Result<DatasetManifest> {
        let samples = self.render()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let path = dir.join(format!("img_{i:05}.ppm"));
            write_ppm(&path, &s.image)?;
            entries.push(ManifestEntry {
                image: path,
                subject: format!("s{:02}", s.subject),
                labels: s.labels.clone(),
            });
        }
        let manifest = DatasetManifest {
            root: dir.to_path_buf(),
            entries,
            n_aus: self.regions.len(),
        };
        manifest.write_csv(&dir.join("manifest.csv"))?;
        Ok(manifest)
    }
}
