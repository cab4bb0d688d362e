//! Label manifests, subject-exclusive folds, image I/O and augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory.
    pub image: PathBuf,
    /// Falls back to the image path when the manifest has no subject column.
    pub subject: String,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub n_aus: usize,
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

impl DatasetManifest {
    /// Reads `image,subject,au_1,...,au_n` (the subject column may be left out).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, &root)
    }

    pub fn parse(text: &str, path: &Path, root: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .quoting(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"image") {
            return Err(parse_err(path, 1, "header must start with `image`"));
        }
        let has_subject = cols.get(1) == Some(&"subject");
        let au_cols = &cols[if has_subject { 2 } else { 1 }..];
        for (i, name) in au_cols.iter().enumerate() {
            if *name != format!("au_{}", i + 1) {
                return Err(parse_err(
                    path,
                    1,
                    format!("expected column au_{}, found `{name}`", i + 1),
                ));
            }
        }
        if au_cols.is_empty() {
            return Err(parse_err(path, 1, "no AU columns"));
        }
        let mut entries = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(path, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != cols.len() {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected {} fields, found {}", cols.len(), rec.len()),
                ));
            }
            let image = root.join(&rec[0]);
            if !image.is_file() {
                return Err(parse_err(
                    path,
                    line,
                    format!("image {} does not exist", image.display()),
                ));
            }
            let subject = if has_subject {
                rec[1].to_string()
            } else {
                rec[0].to_string()
            };
            let first_label = if has_subject { 2 } else { 1 };
            let labels = rec
                .iter()
                .skip(first_label)
                .map(|cell| match cell {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(parse_err(path, line, format!("label `{other}` is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(ManifestEntry { image, subject, labels });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            n_aus: au_cols.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<bool>> {
        self.entries.iter().map(|e| e.labels.clone()).collect()
    }

    /// Assigns each subject to one of `k` folds; returns the fold of every row.
    ///
    /// Subjects are ordered by a stable hash of their name and dealt out
    /// round-robin, so folds hold whole subjects and their sizes differ by at
    /// most one subject.
    pub fn folds(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::structure("fold count must be positive"));
        }
        let mut subjects: Vec<&str> = self.entries.iter().map(|e| e.subject.as_str()).collect();
        subjects.sort_unstable();
        subjects.dedup();
        if subjects.len() < k {
            return Err(Error::structure(format!(
                "{} subjects cannot fill {k} folds",
                subjects.len()
            )));
        }
        subjects.sort_by_key(|s| (fnv1a(s.as_bytes()), *s));
        let fold_of: BTreeMap<&str, usize> = subjects.iter().enumerate().map(|(i, s)| (*s, i % k)).collect();
        Ok(self.entries.iter().map(|e| fold_of[e.subject.as_str()]).collect())
    }

    /// Rows whose fold is (or is not) `fold`.
    pub fn split(&self, folds: &[usize], fold: usize) -> (DatasetManifest, DatasetManifest) {
        let pick = |held: bool| DatasetManifest {
            root: self.root.clone(),
            entries: self
                .entries
                .iter()
                .zip(folds)
                .filter(|(_, &f)| (f == fold) == held)
                .map(|(e, _)| e.clone())
                .collect(),
            n_aus: self.n_aus,
        };
        (pick(false), pick(true))
    }

    /// Writes the manifest CSV with paths relative to `root`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("image,subject");
        for i in 1..=self.n_aus {
            out.push_str(&format!(",au_{i}"));
        }
        out.push('\n');
        for e in &self.entries {
            let rel = e.image.strip_prefix(&self.root).unwrap_or(&e.image);
            out.push_str(&format!("{},{}", rel.display(), e.subject));
            for &y in &e.labels {
                out.push_str(if y { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Decodes an RGB image (PPM, PGM or PNG) into `[h, w, 3]` with values in `[0, 1]`.
pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| S::lit(v as f64 / 255.0)).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// `round(255 v)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes an `[h, w, 3]` tensor as binary PPM (P6).
pub fn write_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::structure(format!("PPM needs [h, w, 3], got {s:?}"))),
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| quantize(v.as_f64())));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes values in `[0, 1]` as an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::structure(format!("{} values for a {h}x{w} map", values.len())));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| quantize(v)));
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PGM back into `[0, 1]` values with its dimensions.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok((
        h as usize,
        w as usize,
        gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    ))
}

/// Crop and flip decisions for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// Centred crop, no flip: the evaluation-time view of a source image.
    pub fn centered(src_h: usize, src_w: usize, l: usize) -> Self {
        AugmentDraw {
            top: src_h.saturating_sub(l) / 2,
            left: src_w.saturating_sub(l) / 2,
            flip: false,
        }
    }

    /// Random offset up to `margin` pixels from the centre (clamped to the
    /// image) and a fair-coin mirror when `flip` is enabled.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        src_h: usize,
        src_w: usize,
        l: usize,
        margin: usize,
        flip: bool,
    ) -> Self {
        let mut d = Self::centered(src_h, src_w, l);
        let jitter = |rng: &mut R, centre: usize, max: usize| {
            if margin == 0 || max == 0 {
                return centre;
            }
            let lo = centre.saturating_sub(margin);
            let hi = (centre + margin).min(max);
            rng.gen_range(lo..=hi)
        };
        d.top = jitter(rng, d.top, src_h - l);
        d.left = jitter(rng, d.left, src_w - l);
        d.flip = flip && rng.gen_bool(0.5);
        d
    }
}

/// Crops an `[H, W, 3]` image to `l x l` at the drawn offset and optionally mirrors it.
pub fn augment<S: Scalar>(image: &Tensor<S>, l: usize, draw: AugmentDraw) -> Result<Tensor<S>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::structure(format!("augment needs [h, w, 3], got {s:?}"))),
    };
    if h < l || w < l || draw.top + l > h || draw.left + l > w {
        return Err(Error::structure(format!(
            "cannot crop {l}x{l} at ({}, {}) from a {h}x{w} image",
            draw.top, draw.left
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(l * l * 3);
    for y in 0..l {
        for x in 0..l {
            let sx = if draw.flip { l - 1 - x } else { x };
            let base = ((draw.top + y) * w + draw.left + sx) * 3;
            out.extend_from_slice(&src[base..base + 3]);
        }
    }
    Tensor::new(vec![l, l, 3], out)
}
