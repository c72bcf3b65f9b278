//! Synthetic SAR-like chips: anisotropic Gaussian scatterers under
//! multiplicative exponential speckle, written in folder-per-class layout.
//!
//! Layout of a generated dataset:
//!
//! ```text
//! DIR/manifest.json
//! DIR/class_0/00000.png   16-bit grayscale
//! DIR/class_0/00001.png
//! ...
//! ```
//!
//! `manifest.json` holds the [`DatasetManifest`]: seed, chip size, class names,
//! the per-class generating specs and, when a test split was requested, the
//! relative file lists of the `train` and `test` splits.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::conv::Plane;
use crate::error::{Error, Result};
use crate::imageio::{read_gray, resize, write_gray16};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Fractional `(x, y)` = (column, row) position in `[0.1, 0.9]^2`.
    pub center: [f64; 2],
    pub amplitude: f64,
    /// Pixels, at the generated chip size.
    pub sigma_major: f64,
    pub sigma_minor: f64,
    /// Major-axis angle from the x axis, radians.
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobClassSpec {
    pub class_id: usize,
    pub blobs: Vec<Blob>,
    /// Maximum center displacement per sample, fraction of the chip size.
    pub center_jitter: f64,
    /// Maximum relative amplitude change per sample.
    pub amplitude_jitter: f64,
}

impl BlobClassSpec {
    /// Seed-fixed random layout with 4 to 8 blobs.
    pub fn random<R: Rng>(class_id: usize, size: usize, rng: &mut R) -> Self {
        let count = rng.random_range(4..=8);
        let unit = size as f64 / 64.0;
        let blobs = (0..count)
            .map(|_| {
                let major = rng.random_range(1.5..4.0) * unit;
                Blob {
                    center: [rng.random_range(0.1..=0.9), rng.random_range(0.1..=0.9)],
                    amplitude: rng.random_range(0.3..=1.0),
                    sigma_major: major,
                    sigma_minor: major * rng.random_range(0.35..=1.0),
                    orientation: rng.random_range(0.0..PI),
                }
            })
            .collect();
        let mut spec = Self { class_id, blobs, center_jitter: 0.03, amplitude_jitter: 0.2 };
        spec.normalize(size);
        spec
    }

    /// Rescales amplitudes so the canonical render peaks at `1 / (1 + amplitude_jitter)`.
    fn normalize(&mut self, size: usize) {
        let peak = render(&self.blobs, size).data.iter().cloned().fold(0.0, f64::max);
        let scale = 1.0 / (peak.max(1e-12) * (1.0 + self.amplitude_jitter));
        for b in &mut self.blobs {
            b.amplitude *= scale;
        }
    }

    /// Independent per-sample jitter of centers and amplitudes.
    pub fn jitter<R: Rng>(&self, rng: &mut R) -> Vec<Blob> {
        self.blobs
            .iter()
            .map(|b| {
                let radius = self.center_jitter * rng.random::<f64>().sqrt();
                let angle = rng.random_range(0.0..2.0 * PI);
                let gain = 1.0 + self.amplitude_jitter * rng.random_range(-1.0..=1.0);
                Blob {
                    center: [b.center[0] + radius * angle.cos(), b.center[1] + radius * angle.sin()],
                    amplitude: b.amplitude * gain,
                    ..b.clone()
                }
            })
            .collect()
    }
}

/// Sum of anisotropic Gaussians on a `size x size` grid, no clipping.
pub fn render(blobs: &[Blob], size: usize) -> Plane {
    let mut data = vec![0.0; size * size];
    for b in blobs {
        let (cx, cy) = (b.center[0] * (size - 1) as f64, b.center[1] * (size - 1) as f64);
        let (s, c) = b.orientation.sin_cos();
        let (a2, b2) = (b.sigma_major.powi(2), b.sigma_minor.powi(2));
        for r in 0..size {
            for col in 0..size {
                let (dx, dy) = (col as f64 - cx, r as f64 - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                data[r * size + col] += b.amplitude * (-0.5 * (u * u / a2 + v * v / b2)).exp();
            }
        }
    }
    Plane { height: size, width: size, data }
}

/// Unit-mean single-look speckle.
pub fn speckle<R: Rng>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Additional samples per class listed in a `test` split.
    #[serde(default)]
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub speckle: bool,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!("chip size must be >= 32, got {}", self.size)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per-class count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub config: SyntheticConfig,
    /// Class folder names, index = label.
    pub classes: Vec<String>,
    pub specs: Vec<BlobClassSpec>,
    #[serde(default)]
    pub splits: Option<SplitLists>,
}

fn class_name(i: usize) -> String {
    format!("class_{i}")
}

/// One sample, deterministic in `(seed, class, index)`.
pub fn synthesize(spec: &BlobClassSpec, cfg: &SyntheticConfig, index: usize) -> (Plane, Vec<Blob>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + (spec.class_id as u64) * (1 << 32) + index as u64);
    let blobs = spec.jitter(&mut rng);
    let mut plane = render(&blobs, cfg.size);
    for v in &mut plane.data {
        if cfg.speckle {
            *v *= speckle(&mut rng);
        }
        *v = v.clamp(0.0, 1.0);
    }
    (plane, blobs)
}

/// Writes the dataset under `out`; an existing non-empty directory is an
/// error unless `force`, in which case it is replaced.
pub fn gen_synthetic(cfg: &SyntheticConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    let mut spec_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs: Vec<_> = (0..cfg.classes).map(|k| BlobClassSpec::random(k, cfg.size, &mut spec_rng)).collect();
    let classes: Vec<_> = (0..cfg.classes).map(class_name).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (spec, name) in specs.iter().zip(&classes) {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        for i in 0..cfg.per_class + cfg.test_per_class {
            let (plane, _) = synthesize(spec, cfg, i);
            let file = format!("{i:05}.png");
            write_gray16(&dir.join(&file), &plane)?;
            let rel = format!("{name}/{file}");
            if i < cfg.per_class {
                train.push(rel);
            } else {
                test.push(rel);
            }
        }
    }
    let splits = (cfg.test_per_class > 0).then_some(SplitLists { train, test });
    let manifest = DatasetManifest { format: 1, config: cfg.clone(), classes, specs, splits };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// In-memory labeled images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<Plane>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps only the listed indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            classes: self.classes.clone(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            paths: idx.iter().map(|&i| self.paths[i].clone()).collect(),
        }
    }
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Class folders under `root` in sorted order, each with its sorted PNG files.
fn scan_classes(root: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| Error::Dataset(format!("{}: {e}", root.display())))?;
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let mut files: Vec<String> = fs::read_dir(entry.path())?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_png(p))
            .map(|p| format!("{name}/{}", p.file_name().expect("file").to_string_lossy()))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class folder {} has no PNG images", entry.path().display())));
        }
        files.sort();
        out.insert(name, files);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{}: no class folders", root.display())));
    }
    Ok(out)
}

pub fn read_manifest(root: &Path) -> Result<Option<DatasetManifest>> {
    let p = root.join(MANIFEST_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(&p)?)?))
}

/// Checks that the train and test lists share no file.
pub fn check_disjoint(splits: &SplitLists) -> Result<()> {
    let train: BTreeSet<_> = splits.train.iter().collect();
    if let Some(dup) = splits.test.iter().find(|p| train.contains(p)) {
        return Err(Error::Dataset(format!("split overlap: {dup} is in both train and test")));
    }
    Ok(())
}

/// Loads a folder-per-class dataset.
///
/// `split` selects `train` or `test` from the manifest's split lists; without
/// one every image is loaded. Order is class-sorted then file-sorted. Images
/// are resized bilinearly to `size` when given.
pub fn load_dataset(root: &Path, split: Option<&str>, size: Option<usize>) -> Result<Dataset> {
    let folders = scan_classes(root)?;
    let manifest = read_manifest(root)?;
    // generated datasets fix the label order; otherwise folders sort by name
    let classes: Vec<String> = match &manifest {
        Some(m) => {
            if m.classes.len() != folders.len() || m.classes.iter().any(|c| !folders.contains_key(c)) {
                return Err(Error::Dataset(format!("{}: class folders do not match the manifest", root.display())));
            }
            m.classes.clone()
        }
        None => folders.keys().cloned().collect(),
    };
    let files: Vec<String> = match split {
        None => classes.iter().flat_map(|c| folders[c].iter().cloned()).collect(),
        Some(name) => {
            let manifest = manifest.ok_or_else(|| {
                Error::Dataset(format!("{}: split `{name}` requested but no manifest", root.display()))
            })?;
            let splits =
                manifest.splits.ok_or_else(|| Error::Dataset(format!("{}: manifest has no splits", root.display())))?;
            check_disjoint(&splits)?;
            match name {
                "train" => splits.train,
                "test" => splits.test,
                other => return Err(Error::Dataset(format!("unknown split `{other}` (expected train or test)"))),
            }
        }
    };
    let mut data = Dataset { classes: classes.clone(), images: Vec::new(), labels: Vec::new(), paths: Vec::new() };
    for rel in files {
        let class = rel.split('/').next().unwrap_or_default();
        let label = classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::Dataset(format!("{rel}: class folder `{class}` not found")))?;
        let path = root.join(&rel);
        let mut img = read_gray(&path)?;
        if let Some(s) = size {
            img = resize(&img, s, s);
        }
        data.images.push(img);
        data.labels.push(label);
        data.paths.push(path);
    }
    if data.is_empty() {
        return Err(Error::Dataset(format!("{}: no images selected", root.display())));
    }
    Ok(data)
}
