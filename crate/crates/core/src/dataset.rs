//! Sample assembly (deform → perturb pose → render → package) and the
//! on-disk dataset layout.
//!
//! ```text
//! out/
//!   dataset.json          generation parameters, base geometry, preop checksum
//!   manifest.jsonl        one ManifestEntry per line
//!   samples/<id>/proj.{raw,json} field.{raw,json} pose.json log.json
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffeo::{generate_dvf, GenerationLog, RandomizationParams};
use crate::drr::{default_geometry, default_step, render_drr, ProjectionImage};
use crate::io::{read_json, sha256_hex, write_json};
use crate::net::{NetworkConfig, TrainingSet};
use crate::pose::{
    camera_image_plane, compose_pose, compose_total_field, project_to_image_plane, sample_pose_perturbation,
    volume_frame_rigid, CameraIntrinsics, ExtrinsicPose, PoseBounds, PosePerturbation,
};
use crate::volume::{warp_volume, DisplacementField, Grid, Volume};
use crate::{par, Error, Result};

pub const DATASET_FORMAT: &str = "deformreg-dataset";

/// Planned C-arm geometry `(K, E)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseGeometry {
    pub intrinsics: CameraIntrinsics,
    pub pose: ExtrinsicPose,
}

impl BaseGeometry {
    /// AP view of `grid` on a `detector = [W, H]` pixel detector.
    pub fn default_for(grid: &Grid, detector: [usize; 2]) -> Result<Self> {
        let (intrinsics, pose) = default_geometry(grid, detector)?;
        Ok(BaseGeometry { intrinsics, pose })
    }
}

/// Everything needed to regenerate a dataset from a preoperative volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    /// Fraction of samples tagged `train`.
    pub split: f64,
    pub seed: u64,
    pub params: RandomizationParams,
    pub pose_bounds: PoseBounds,
    /// Detector `[W, H]`; must equal the network input size.
    pub detector: [usize; 2],
    /// Target lattice `[H_out, D_out, W_out]`; must equal the network output size.
    pub target_lattice: [usize; 3],
    /// Ray-marching step in mm; half the smallest voxel spacing when unset.
    pub step_mm: Option<f64>,
    /// Explicit base geometry; the default AP view when unset.
    pub geometry: Option<BaseGeometry>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 200,
            split: 0.8,
            seed: 0,
            params: RandomizationParams::default(),
            pose_bounds: PoseBounds::default(),
            detector: [64, 64],
            target_lattice: [16, 8, 16],
            step_mm: None,
            geometry: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split) {
            return Err(Error::InvalidArgument(format!(
                "split must lie in [0, 1], got {}",
                self.split
            )));
        }
        if self.detector.contains(&0) || self.target_lattice.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!(
                "detector {:?} and target lattice {:?} must be non-degenerate",
                self.detector, self.target_lattice
            )));
        }
        if let Some(s) = self.step_mm {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("step_mm must be positive, got {s}")));
            }
        }
        self.params.validate()?;
        self.pose_bounds.validate()
    }

    /// Train/val sample counts: `round(n · split)` train, the rest val.
    pub fn split_counts(&self) -> (usize, usize) {
        let n_train = ((self.n as f64) * self.split).round() as usize;
        (n_train.min(self.n), self.n - n_train.min(self.n))
    }

    /// Network config whose input and output sizes match this dataset.
    pub fn matches_network(&self, net: &NetworkConfig) -> bool {
        net.input_size == [self.detector[1], self.detector[0]] && net.output_size == self.target_lattice
    }
}

/// `[H_out, D_out, W_out]` lattice over the bounding box of `grid`: `W_out`
/// along x, `D_out` along y (depth), `H_out` along z.
pub fn target_grid(grid: &Grid, lattice: [usize; 3]) -> Result<Grid> {
    let [h, d, w] = lattice;
    grid.resampled([w, d, h])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Deterministic per-sample seed from the dataset seed and sample index.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(index as u64))
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// One generated training example.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSample {
    pub projection: ProjectionImage,
    /// `u_tot` on the target lattice, 3 channels.
    pub target_field: DisplacementField,
    /// Non-rigid field `u_i` on the preoperative lattice.
    pub deformation: DisplacementField,
    pub perturbation: PosePerturbation,
    pub seed: u64,
    pub log: GenerationLog,
}

/// Deforms `preop`, perturbs the pose, renders, and builds the target.
pub fn generate_sample(
    preop: &Volume,
    config: &DatasetConfig,
    geometry: &BaseGeometry,
    seed: u64,
) -> Result<DataSample> {
    let grid = preop.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, log) = generate_dvf(grid, &config.params, &mut rng)?;
    let warped = warp_volume(preop, &u)?;
    let pivot = geometry.pose.to_camera(&grid.center());
    let perturbation = sample_pose_perturbation(&mut rng, &config.pose_bounds, camera_image_plane(), pivot)?;
    let perturbed = compose_pose(&perturbation, &geometry.pose);
    let step = config.step_mm.unwrap_or_else(|| default_step(grid));
    let projection = render_drr(&warped, &geometry.intrinsics, &perturbed, step)?;
    let q = volume_frame_rigid(&perturbation, &geometry.pose);
    let total = compose_total_field(&u, &q)?;
    let target_field = total.resample(&target_grid(grid, config.target_lattice)?)?;
    Ok(DataSample {
        projection,
        target_field,
        deformation: u,
        perturbation,
        seed,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePose {
    pub base: ExtrinsicPose,
    pub perturbed: ExtrinsicPose,
    pub perturbation: PosePerturbation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub seed: u64,
    pub generation: GenerationLog,
}

/// One line of `manifest.jsonl`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub projection: String,
    pub field: String,
    pub pose: String,
    pub log: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub format: String,
    pub config: DatasetConfig,
    pub geometry: BaseGeometry,
    pub preop_grid: Grid,
    pub preop_sha256: String,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub info: DatasetInfo,
    pub entries: Vec<ManifestEntry>,
}

/// Checksum of a volume's geometry and f32 payload, independent of file names.
pub fn volume_checksum(vol: &Volume) -> String {
    let g = vol.grid();
    let mut bytes = Vec::with_capacity(vol.data().len() * 4 + 72);
    for d in g.dims {
        bytes.extend((d as u64).to_le_bytes());
    }
    for v in g.spacing.iter().chain(&g.origin) {
        bytes.extend(v.to_le_bytes());
    }
    for &v in vol.data() {
        bytes.extend((v as f32).to_le_bytes());
    }
    sha256_hex(&bytes)
}

fn entry_paths(id: &str) -> [String; 4] {
    let base = format!("samples/{id}");
    [
        format!("{base}/proj.raw"),
        format!("{base}/field.raw"),
        format!("{base}/pose.json"),
        format!("{base}/log.json"),
    ]
}

/// Writes one sample's files into `dir`.
pub fn write_sample(dir: &Path, sample: &DataSample, geometry: &BaseGeometry) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sample.projection.save(&dir.join("proj.raw"))?;
    sample.target_field.save(&dir.join("field.raw"))?;
    write_json(
        &dir.join("pose.json"),
        &SamplePose {
            base: geometry.pose,
            perturbed: *sample.projection.pose(),
            perturbation: sample.perturbation.clone(),
        },
    )?;
    write_json(
        &dir.join("log.json"),
        &SampleLog {
            seed: sample.seed,
            generation: sample.log.clone(),
        },
    )
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Generates `config.n` samples under `out_dir`. Samples run in parallel,
/// each from its own seed; a sample that fails is removed from disk and
/// listed as invalid.
pub fn generate_dataset(preop: &Volume, config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let geometry = match config.geometry {
        Some(g) => g,
        None => BaseGeometry::default_for(preop.grid(), config.detector)?,
    };
    if geometry.intrinsics.detector != config.detector {
        return Err(Error::InvalidArgument(format!(
            "geometry detector {:?} differs from configured detector {:?}",
            geometry.intrinsics.detector, config.detector
        )));
    }
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let (n_train, n_val) = config.split_counts();

    let entries: Vec<ManifestEntry> = par::try_map_range(config.n, |i| -> Result<ManifestEntry> {
        let id = sample_id(i);
        let seed = sample_seed(config.seed, i);
        let final_dir = samples_dir.join(&id);
        let tmp_dir = samples_dir.join(format!(".tmp-{id}"));
        for d in [&final_dir, &tmp_dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        let [projection, field, pose, log] = entry_paths(&id);
        let mut entry = ManifestEntry {
            id,
            seed,
            split: if i < n_train { Split::Train } else { Split::Val },
            projection,
            field,
            pose,
            log,
            valid: true,
            error: None,
        };
        let outcome = generate_sample(preop, config, &geometry, seed)
            .and_then(|s| write_sample(&tmp_dir, &s, &geometry))
            .and_then(|_| fs::rename(&tmp_dir, &final_dir).map_err(|e| Error::io(&final_dir, e)));
        if let Err(e) = outcome {
            if tmp_dir.exists() {
                fs::remove_dir_all(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;
            }
            if matches!(e, Error::Io { .. }) {
                return Err(e);
            }
            entry.valid = false;
            entry.error = Some(e.to_string());
        }
        Ok(entry)
    })?;

    let info = DatasetInfo {
        format: DATASET_FORMAT.into(),
        config: config.clone(),
        geometry,
        preop_grid: *preop.grid(),
        preop_sha256: volume_checksum(preop),
        n_train,
        n_val,
    };
    write_json(&out_dir.join("dataset.json"), &info)?;
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(DatasetManifest { info, entries })
}

/// Reads `dataset.json` and `manifest.jsonl`, checking that ids are unique
/// and every file of a valid entry exists.
pub fn open_dataset(root: &Path) -> Result<DatasetManifest> {
    let info: DatasetInfo = read_json(&root.join("dataset.json"))?;
    if info.format != DATASET_FORMAT {
        return Err(Error::format(
            root.join("dataset.json"),
            format!("unknown format {:?}", info.format),
        ));
    }
    let path = root.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: ManifestEntry =
            serde_json::from_str(line).map_err(|err| Error::format(&path, format!("line {}: {err}", line_no + 1)))?;
        if !seen.insert(e.id.clone()) {
            return Err(Error::format(&path, format!("duplicate sample id {}", e.id)));
        }
        if e.valid {
            for f in [&e.projection, &e.field, &e.pose, &e.log] {
                if !root.join(f).exists() {
                    return Err(Error::format(
                        &path,
                        format!("sample {} references missing file {f}", e.id),
                    ));
                }
            }
        }
        entries.push(e);
    }
    Ok(DatasetManifest { info, entries })
}

/// Regenerates one manifest entry from its seed.
pub fn regenerate_sample(preop: &Volume, info: &DatasetInfo, entry: &ManifestEntry) -> Result<DataSample> {
    if volume_checksum(preop) != info.preop_sha256 {
        return Err(Error::InvalidArgument(
            "preoperative volume differs from the one the dataset was generated from".into(),
        ));
    }
    generate_sample(preop, &info.config, &info.geometry, entry.seed)
}

/// Per-image standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Set when the image had zero variance; `values` are then all zero.
    pub degenerate: bool,
}

/// Zero-mean, unit-variance (population) rescaling of `p`.
pub fn normalize_projection(p: &[f64]) -> Result<NormalizedImage> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection must be non-empty and finite".into()));
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Ok(NormalizedImage {
            values: vec![0.0; p.len()],
            mean,
            std,
            degenerate: true,
        });
    }
    Ok(NormalizedImage {
        values: p.iter().map(|v| (v - mean) / std).collect(),
        mean,
        std,
        degenerate: false,
    })
}

/// Network input and target for one stored sample.
pub fn load_pair(
    root: &Path,
    entry: &ManifestEntry,
    info: &DatasetInfo,
    net: &NetworkConfig,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let proj = ProjectionImage::load(&root.join(&entry.projection))?;
    let [h, w] = net.input_size;
    if proj.width() != w || proj.height() != h {
        return Err(Error::ShapeMismatch {
            layer: "input".into(),
            detail: format!(
                "sample {} is {}x{}, network expects {w}x{h}",
                entry.id,
                proj.width(),
                proj.height()
            ),
        });
    }
    let input = normalize_projection(proj.data())?
        .values
        .iter()
        .map(|&v| v as f32)
        .collect();
    let field = DisplacementField::load(&root.join(&entry.field))?;
    let [ho, d, wo] = net.output_size;
    if field.grid().dims != [wo, d, ho] {
        return Err(Error::ShapeMismatch {
            layer: "target".into(),
            detail: format!(
                "sample {} field lattice {:?} does not match network output {:?}",
                entry.id,
                field.grid().dims,
                net.output_size
            ),
        });
    }
    let target = match net.out_channels {
        2 => project_to_image_plane(&field, &info.geometry.pose)?,
        _ => field,
    };
    Ok((input, target.data().iter().map(|&v| v as f32).collect()))
}

/// All valid samples of one split, loaded in manifest order.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split, net: &NetworkConfig) -> Result<TrainingSet> {
    let chosen: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.valid && e.split == split)
        .collect();
    let pairs = par::try_map_range(chosen.len(), |i| load_pair(root, chosen[i], &manifest.info, net))?;
    let mut set = TrainingSet::default();
    for (e, (x, y)) in chosen.iter().zip(pairs) {
        set.ids.push(e.id.clone());
        set.inputs.push(x);
        set.targets.push(y);
    }
    Ok(set)
}

/// Sample directory of an entry.
pub fn sample_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join("samples").join(&entry.id)
}
