//! Deterministic synthetic scene generation.
//!
//! Scenes are Voronoi mosaics: region seed points land uniformly in the
//! image, each region takes a leaf class, and pixels take their region's
//! spectral mean plus Gaussian noise. Labels at coarser levels derive from
//! the leaf raster through the hierarchy, so every pixel's tuple is a valid
//! path by construction.
//!
//! Spectral means are laid out hierarchically: level-1 classes get
//! well-separated anchor vectors, and each finer class offsets its parent's
//! mean by a shrinking radius. Siblings therefore look alike while classes
//! from different coarse branches stay far apart, which is what makes the
//! label tree informative on this data. The mean layout is a canonical
//! function of the hierarchy (an internal fixed stream), while region
//! layout, class draws, and noise all flow from the dataset seed; every
//! image uses a seed derived from (dataset seed, image index).
//!
//! After generating, a nearest-mean classifier is scored on the emitted
//! pixels; generation fails if its accuracy drops below the configured
//! floor, which guards against spectral layouts too entangled to learn.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hierarchy::{derive_coarse_labels, Hierarchy, HierarchyError, LabelRaster};
use crate::htf::{self, HtfError};
use crate::rng;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Htf(#[from] HtfError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("spec carries {got} means for {want} leaf classes")]
    MeansCount { got: usize, want: usize },
    #[error("spec carries {got} leaf weights for {want} leaf classes")]
    WeightsCount { got: usize, want: usize },
    #[error("nearest-mean accuracy {accuracy:.3} below the {floor:.2} floor; means too entangled")]
    Inseparable { accuracy: f64, floor: f64 },
    #[error("need at least one image")]
    NoImages,
    #[error("checksum mismatch for {file}")]
    Checksum { file: String },
}

pub type Result<T> = std::result::Result<T, DatagenError>;

/// Everything that defines a generated task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Square image edge in pixels.
    pub size: usize,
    /// Spectral channels per pixel.
    pub channels: usize,
    /// Voronoi region seeds per scene.
    pub regions: usize,
    /// Gaussian noise scale added per channel.
    pub noise: f64,
    /// Per-leaf spectral mean vectors.
    pub means: Vec<Vec<f64>>,
    /// Optional region class draw weights (uniform when absent).
    pub leaf_weights: Option<Vec<f64>>,
    /// Minimum nearest-mean classifier accuracy accepted at generation.
    pub bayes_floor: f64,
}

/// Knobs for the hierarchical mean layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralLayout {
    /// Scale of the level-1 anchor cloud.
    pub anchor_spread: f64,
    /// Offset radius from level 1 to level 2.
    pub base_radius: f64,
    /// Radius shrink factor per further level.
    pub decay: f64,
}

impl Default for SpectralLayout {
    fn default() -> SpectralLayout {
        SpectralLayout { anchor_spread: 1.0, base_radius: 0.26, decay: 0.55 }
    }
}

impl SceneSpec {
    /// Defaults for a hierarchy: 32x32 scenes, 4 channels, hierarchical means.
    pub fn for_hierarchy(h: &Hierarchy) -> SceneSpec {
        let channels = 4;
        SceneSpec {
            size: 32,
            channels,
            regions: 10,
            noise: 0.05,
            means: hierarchical_means(h, channels, &SpectralLayout::default()),
            leaf_weights: None,
            bayes_floor: 0.90,
        }
    }

    fn validate(&self, h: &Hierarchy) -> Result<()> {
        let leaves = h.class_count(h.num_levels() - 1);
        if self.means.len() != leaves || self.means.iter().any(|m| m.len() != self.channels) {
            return Err(DatagenError::MeansCount { got: self.means.len(), want: leaves });
        }
        if let Some(w) = &self.leaf_weights {
            if w.len() != leaves {
                return Err(DatagenError::WeightsCount { got: w.len(), want: leaves });
            }
        }
        Ok(())
    }
}

fn random_unit(r: &mut rng::Stream, dim: usize) -> Vec<f64> {
    // Rejection-free: normalize a Gaussian draw.
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Canonical per-leaf mean layout for a hierarchy.
///
/// Level-1 anchors are rejection-sampled until pairwise distances exceed
/// 0.55 * spread; each deeper level offsets its parent by a shrinking
/// radius, resampled until siblings are at least one radius apart.
pub fn hierarchical_means(h: &Hierarchy, channels: usize, layout: &SpectralLayout) -> Vec<Vec<f64>> {
    let mut r = rng::stream(0, "spectral-layout");
    let levels = h.num_levels();

    // Anchors for the coarsest level.
    let n_roots = h.class_count(0);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(n_roots);
    'outer: for _attempt in 0..10_000 {
        anchors.clear();
        for _ in 0..n_roots {
            let v: Vec<f64> =
                (0..channels).map(|_| r.gen_range(0.0..layout.anchor_spread)).collect();
            anchors.push(v);
        }
        for i in 0..n_roots {
            for j in 0..i {
                if dist(&anchors[i], &anchors[j]) < 0.55 * layout.anchor_spread {
                    continue 'outer;
                }
            }
        }
        break;
    }

    let mut level_means = vec![anchors];
    for l in 1..levels {
        let radius = layout.base_radius * layout.decay.powi(l as i32 - 1);
        let n = h.class_count(l);
        let parents: Vec<usize> = (0..n).map(|c| h.parent_of(l, c).expect("l >= 1")).collect();
        let mut means: Vec<Vec<f64>> = vec![Vec::new(); n];
        for c in 0..n {
            let parent_mean = level_means[l - 1][parents[c]].clone();
            for _attempt in 0..10_000 {
                let offset = random_unit(&mut r, channels);
                let cand: Vec<f64> =
                    parent_mean.iter().zip(&offset).map(|(p, o)| p + radius * o).collect();
                let clash = (0..c).any(|other| {
                    parents[other] == parents[c] && dist(&means[other], &cand) < radius
                });
                if !clash {
                    means[c] = cand;
                    break;
                }
            }
            if means[c].is_empty() {
                means[c] = parent_mean;
            }
        }
        level_means.push(means);
    }
    level_means.pop().expect("at least one level")
}

/// One generated scene: image channels plus labels at every level.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Row-major `[channels, size, size]`.
    pub image: Vec<f64>,
    /// One raster per hierarchy level, coarse to fine.
    pub labels: Vec<LabelRaster>,
}

#[derive(Debug)]
pub struct Dataset {
    pub hierarchy: Hierarchy,
    pub spec: SceneSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

fn draw_leaf(r: &mut rng::Stream, weights: Option<&[f64]>, leaves: usize) -> usize {
    match weights {
        None => r.gen_range(0..leaves),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut t = r.gen_range(0.0..total);
            for (i, &wi) in w.iter().enumerate() {
                if t < wi {
                    return i;
                }
                t -= wi;
            }
            leaves - 1
        }
    }
}

fn generate_sample(h: &Hierarchy, spec: &SceneSpec, image_seed: u64) -> Result<Sample> {
    let mut r = rng::stream(image_seed, "scene");
    let n = spec.size;
    let leaves = spec.means.len();

    let seeds: Vec<(f64, f64, usize)> = (0..spec.regions)
        .map(|_| {
            let y = r.gen_range(0.0..n as f64);
            let x = r.gen_range(0.0..n as f64);
            let leaf = draw_leaf(&mut r, spec.leaf_weights.as_deref(), leaves);
            (y, x, leaf)
        })
        .collect();

    let mut leaf_raster = LabelRaster::new(n, n, 0);
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = f64::INFINITY;
            let mut best_leaf = 0usize;
            for &(sy, sx, leaf) in &seeds {
                let d = (py - sy) * (py - sy) + (px - sx) * (px - sx);
                if d < best {
                    best = d;
                    best_leaf = leaf;
                }
            }
            leaf_raster.set(y, x, best_leaf as u32);
        }
    }

    let fine_level = h.num_levels() - 1;
    let mut labels = derive_coarse_labels(h, &leaf_raster, fine_level)?;
    labels.push(leaf_raster.clone());

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut image = vec![0.0; spec.channels * n * n];
    for y in 0..n {
        for x in 0..n {
            let mean = &spec.means[leaf_raster.get(y, x) as usize];
            for c in 0..spec.channels {
                image[(c * n + y) * n + x] = mean[c] + spec.noise * normal.sample(&mut r);
            }
        }
    }
    Ok(Sample { image, labels })
}

/// Fraction of pixels a nearest-mean classifier labels correctly.
pub fn nearest_mean_accuracy(ds: &Dataset) -> f64 {
    let n = ds.spec.size;
    let mut correct = 0u64;
    let mut total = 0u64;
    for s in &ds.samples {
        let truth = s.labels.last().expect("leaf raster");
        for y in 0..n {
            for x in 0..n {
                let pixel: Vec<f64> =
                    (0..ds.spec.channels).map(|c| s.image[(c * n + y) * n + x]).collect();
                let mut best = f64::INFINITY;
                let mut best_leaf = 0usize;
                for (leaf, mean) in ds.spec.means.iter().enumerate() {
                    let d = dist(&pixel, mean);
                    if d < best {
                        best = d;
                        best_leaf = leaf;
                    }
                }
                total += 1;
                if best_leaf as u32 == truth.get(y, x) {
                    correct += 1;
                }
            }
        }
    }
    correct as f64 / total as f64
}

/// Generate a dataset of `n_images` scenes.
pub fn generate(h: &Hierarchy, spec: &SceneSpec, n_images: usize, seed: u64) -> Result<Dataset> {
    if n_images == 0 {
        return Err(DatagenError::NoImages);
    }
    spec.validate(h)?;
    let samples: Result<Vec<Sample>> = (0..n_images)
        .map(|i| generate_sample(h, spec, rng::derive_seed(seed, &format!("image-{i}"))))
        .collect();
    let ds = Dataset { hierarchy: h.clone(), spec: spec.clone(), seed, samples: samples? };
    if spec.noise > 0.0 {
        let accuracy = nearest_mean_accuracy(&ds);
        if accuracy < spec.bayes_floor {
            return Err(DatagenError::Inseparable { accuracy, floor: spec.bayes_floor });
        }
    }
    Ok(ds)
}

/// Build the crop-extension task spec from a source task.
///
/// The crop task keeps the source task's spectral world: non-crop regions
/// reuse source leaf spectra (relabeled through the crop tree's "others"
/// chain), while regions drawn from the source's cropland leaves split into
/// crop classes whose means sit around the cropland spectral center. The
/// `crop_bias` fraction of regions is drawn from the crop classes so the
/// target task is not dominated by background.
pub fn crop_spec(
    source_h: &Hierarchy,
    source_spec: &SceneSpec,
    crop_h: &Hierarchy,
    crop_bias: f64,
) -> Result<SceneSpec> {
    source_spec.validate(source_h)?;
    let mut r = rng::stream(0, "crop-spectra");
    let fine = source_h.num_levels() - 1;

    // Source leaves under the cropland branch form the crop spectral center.
    let cropland = source_h
        .class_index(1, "cropland")
        .expect("source hierarchy carries a cropland class at level 2");
    let crop_sources: Vec<usize> = (0..source_h.class_count(fine))
        .filter(|&leaf| source_h.ancestor(fine, leaf, 1) == cropland)
        .collect();
    let center: Vec<f64> = (0..source_spec.channels)
        .map(|c| {
            crop_sources.iter().map(|&l| source_spec.means[l][c]).sum::<f64>()
                / crop_sources.len() as f64
        })
        .collect();

    let crop_fine = crop_h.num_levels() - 1;
    let crop_leaves = crop_h.class_count(crop_fine);
    let others_leaf = crop_h
        .class_index(crop_fine, "others")
        .expect("crop hierarchy carries an others leaf");

    // Non-crop spectra: average of the non-cropland source leaves keeps the
    // background statistics shared with the source task; the crop classes
    // get distinct offsets around the cropland center.
    let non_crop: Vec<usize> =
        (0..source_h.class_count(fine)).filter(|l| !crop_sources.contains(l)).collect();
    let others_mean: Vec<f64> = (0..source_spec.channels)
        .map(|c| {
            non_crop.iter().map(|&l| source_spec.means[l][c]).sum::<f64>() / non_crop.len() as f64
        })
        .collect();

    let radius = 0.16;
    let mut means = vec![Vec::new(); crop_leaves];
    means[others_leaf] = others_mean;
    let crop_classes: Vec<usize> = (0..crop_leaves).filter(|&l| l != others_leaf).collect();
    for (slot, &leaf) in crop_classes.iter().enumerate() {
        for _attempt in 0..10_000 {
            let offset = random_unit(&mut r, source_spec.channels);
            let cand: Vec<f64> =
                center.iter().zip(&offset).map(|(m, o)| m + radius * o).collect();
            let clash = crop_classes[..slot]
                .iter()
                .any(|&other| dist(&means[other], &cand) < radius);
            if !clash {
                means[leaf] = cand;
                break;
            }
        }
        if means[leaf].is_empty() {
            means[leaf] = center.clone();
        }
    }

    let n_crops = crop_classes.len() as f64;
    let weights: Vec<f64> = (0..crop_leaves)
        .map(|l| if l == others_leaf { 1.0 - crop_bias } else { crop_bias / n_crops })
        .collect();

    Ok(SceneSpec {
        size: source_spec.size,
        channels: source_spec.channels,
        regions: source_spec.regions,
        noise: source_spec.noise,
        means,
        leaf_weights: Some(weights),
        bayes_floor: source_spec.bayes_floor,
    })
}

/// Generate the crop-extension dataset for a source task.
pub fn make_crop_target(
    source_h: &Hierarchy,
    source_spec: &SceneSpec,
    crop_h: &Hierarchy,
    crop_bias: f64,
    n_images: usize,
    seed: u64,
) -> Result<Dataset> {
    let spec = crop_spec(source_h, source_spec, crop_h, crop_bias)?;
    generate(crop_h, &spec, n_images, seed)
}

// ---------------------------------------------------------------------------
// Directory layout
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    images: usize,
    spec: SceneSpec,
    /// Relative path -> SHA-256 of file bytes.
    checksums: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let mut hex = String::with_capacity(64);
    for b in hasher.finalize() {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io { path: path.display().to_string(), source }
}

/// Write `images/*.htf`, `labels/L{k}/*.htf`, `hierarchy.json`, and
/// `manifest.json` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let levels = ds.hierarchy.num_levels();
    fs::create_dir_all(dir.join("images")).map_err(|e| io_err(dir, e))?;
    for k in 1..=levels {
        fs::create_dir_all(dir.join(format!("labels/L{k}"))).map_err(|e| io_err(dir, e))?;
    }

    let n = ds.spec.size;
    let mut checksums = BTreeMap::new();
    let mut record = |rel: String, path: &Path| -> Result<()> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        checksums.insert(rel, sha256_hex(&bytes));
        Ok(())
    };

    for (i, s) in ds.samples.iter().enumerate() {
        let rel = format!("images/img_{i:05}.htf");
        let path = dir.join(&rel);
        htf::write(&path, &s.image, &[ds.spec.channels, n, n])?;
        record(rel, &path)?;
        for (li, raster) in s.labels.iter().enumerate() {
            let rel = format!("labels/L{}/lab_{i:05}.htf", li + 1);
            let path = dir.join(&rel);
            htf::write(&path, &raster.to_f64(), &[n, n])?;
            record(rel, &path)?;
        }
    }

    let hier_path = dir.join("hierarchy.json");
    fs::write(&hier_path, ds.hierarchy.to_json()).map_err(|e| io_err(&hier_path, e))?;
    record("hierarchy.json".into(), &hier_path)?;

    let manifest = Manifest {
        seed: ds.seed,
        images: ds.samples.len(),
        spec: ds.spec.clone(),
        checksums,
    };
    let man_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&man_path, body).map_err(|e| io_err(&man_path, e))?;
    Ok(())
}

/// Load a dataset directory, verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let man_path = dir.join("manifest.json");
    let body = fs::read_to_string(&man_path).map_err(|e| io_err(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&body).map_err(|e| DatagenError::Manifest {
        path: man_path.display().to_string(),
        msg: e.to_string(),
    })?;

    for (rel, want) in &manifest.checksums {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        if &sha256_hex(&bytes) != want {
            return Err(DatagenError::Checksum { file: rel.clone() });
        }
    }

    let hier_src =
        fs::read_to_string(dir.join("hierarchy.json")).map_err(|e| io_err(dir, e))?;
    let hierarchy = Hierarchy::from_json(&hier_src)?;
    let levels = hierarchy.num_levels();
    let n = manifest.spec.size;

    let mut samples = Vec::with_capacity(manifest.images);
    for i in 0..manifest.images {
        let (image, dims) = htf::read(&dir.join(format!("images/img_{i:05}.htf")))?;
        debug_assert_eq!(dims, vec![manifest.spec.channels, n, n]);
        let mut labels = Vec::with_capacity(levels);
        for k in 1..=levels {
            let (data, _) = htf::read(&dir.join(format!("labels/L{k}/lab_{i:05}.htf")))?;
            labels.push(LabelRaster::from_f64(n, n, &data));
        }
        samples.push(Sample { image, labels });
    }
    Ok(Dataset { hierarchy, spec: manifest.spec, seed: manifest.seed, samples })
}
