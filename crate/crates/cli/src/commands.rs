use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deformreg::dataset::{
    generate_dataset, load_pair, load_split, normalize_projection, open_dataset, target_grid, BaseGeometry,
    DatasetManifest, SamplePose, Split,
};
use deformreg::drr::{default_step, render_drr, DisplayMapping, ProjectionImage};
use deformreg::eval::{aggregate_report, landmark_errors, LandmarkRecord, LandmarkSet};
use deformreg::io::{read_json, write_json};
use deformreg::net::{
    load_checkpoint, predict as net_predict, train as net_train, zero_predictor_mse, Network, TrainOptions,
};
use deformreg::overlay::overlay as draw_overlay;
use deformreg::phantom::{centered_grid, chest_phantom, lung_landmarks, lung_mask};
use deformreg::pose::lift_from_image_plane;
use deformreg::volume::{DisplacementField, Grid, Volume};
use deformreg::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::SplitArg;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.with_extension("json").exists() || path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} not found: {}", path.display())))
    }
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.snapshot(dir).save(&dir.join("config.json"))
}

pub fn init_config(out: &Path, cfg: RunConfig, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} exists; pass --force to overwrite",
            out.display()
        )));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    cfg.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let grid = centered_grid(cfg.phantom.size, cfg.phantom.spacing_mm)?;
    chest_phantom(grid)?.save(&out.join("ct.raw"))?;
    lung_mask(grid)?.save(&out.join("mask.raw"))?;
    LandmarkSet::new(lung_landmarks(&grid), &grid)?.save(&out.join("landmarks.json"))?;
    println!(
        "wrote phantom ({n}^3 nodes at {s} mm) to {}",
        out.display(),
        n = cfg.phantom.size,
        s = cfg.phantom.spacing_mm
    );
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    require(&cfg.paths.preop, "preoperative volume")?;
    let preop = Volume::load(&cfg.paths.preop)?;
    let out = &cfg.paths.data_dir;
    create_dir(out)?;
    let start = Instant::now();
    let manifest = generate_dataset(&preop, &cfg.dataset, out)?;
    write_snapshot(cfg, out)?;
    let invalid = manifest.entries.iter().filter(|e| !e.valid).count();
    println!(
        "generated {} samples ({} train / {} val, {invalid} invalid) in {:.1} s -> {}",
        manifest.entries.len(),
        manifest.info.n_train,
        manifest.info.n_val,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    if invalid > 0 {
        for e in manifest.entries.iter().filter(|e| !e.valid) {
            eprintln!("sample {}: {}", e.id, e.error.as_deref().unwrap_or("unknown error"));
        }
    }
    Ok(())
}

fn open_checked(cfg: &RunConfig) -> Result<DatasetManifest> {
    let root = &cfg.paths.data_dir;
    require(&root.join("dataset.json"), "dataset")?;
    let m = open_dataset(root)?;
    if !m.info.config.matches_network(&cfg.network) {
        return Err(Error::InvalidArgument(format!(
            "dataset {} (detector {:?}, lattice {:?}) does not fit network input {:?} / output {:?}",
            root.display(),
            m.info.config.detector,
            m.info.config.target_lattice,
            cfg.network.input_size,
            cfg.network.output_size
        )));
    }
    Ok(m)
}

#[derive(Serialize)]
struct TrainSummary {
    epochs_run: usize,
    stopped_early: bool,
    final_train_mse: f64,
    final_val_mse: Option<f64>,
    zero_train_mse: f64,
    zero_val_mse: Option<f64>,
    train_samples: usize,
    val_samples: usize,
    parameters: usize,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let manifest = open_checked(cfg)?;
    let root = &cfg.paths.data_dir;
    let train_set = load_split(root, &manifest, Split::Train, &cfg.network)?;
    let val_set = load_split(root, &manifest, Split::Val, &cfg.network)?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset {} has no training samples",
            root.display()
        )));
    }
    let zero_train = zero_predictor_mse(&train_set);
    let zero_val = (!val_set.is_empty()).then(|| zero_predictor_mse(&val_set));
    let run_dir = &cfg.paths.run_dir;
    create_dir(run_dir)?;
    write_snapshot(cfg, run_dir)?;
    let t = &cfg.training;
    let opts = TrainOptions {
        epochs: t.epochs,
        batch_size: t.batch_size,
        schedule: t.schedule,
        optimizer: t.optimizer,
        seed: cfg.seed,
        max_seconds: t.max_seconds,
        target_val_mse: t.target_val_ratio.zip(zero_val).map(|(r, z)| r * z),
        checkpoint: Some(cfg.checkpoint()),
        metrics_csv: Some(run_dir.join("metrics.csv")),
    };
    let mut net = Network::<f32>::new(cfg.network.clone())?;
    let outcome = net_train(&mut net, &train_set, &val_set, &opts)?;
    let last = outcome
        .metrics
        .last()
        .ok_or_else(|| Error::InvalidArgument("training ran zero epochs".into()))?;
    let summary = TrainSummary {
        epochs_run: outcome.metrics.len(),
        stopped_early: outcome.stopped_early,
        final_train_mse: last.train_mse,
        final_val_mse: last.val_mse,
        zero_train_mse: zero_train,
        zero_val_mse: zero_val,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        parameters: net.parameter_count(),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs in {:.1} s: train MSE {:.4} ({:.1}% of zero), val MSE {} -> {}",
        summary.epochs_run,
        outcome.seconds,
        last.train_mse,
        100.0 * last.train_mse / zero_train,
        match (last.val_mse, zero_val) {
            (Some(v), Some(z)) => format!("{v:.4} ({:.1}% of zero)", 100.0 * v / z),
            _ => "n/a".into(),
        },
        run_dir.display()
    );
    Ok(())
}

fn output_grid(net: &deformreg::net::NetworkConfig, data: Option<&Path>) -> Result<Grid> {
    match data {
        Some(root) => {
            let m = open_dataset(root)?;
            target_grid(&m.info.preop_grid, net.output_size)
        }
        None => {
            let [h, d, w] = net.output_size;
            Grid::new([w, d, h], [1.0; 3], [0.0; 3])
        }
    }
}

pub fn predict(checkpoint: &Path, projection: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    require(checkpoint, "checkpoint")?;
    require(projection, "projection")?;
    let (mut net, _) = load_checkpoint(checkpoint)?;
    let proj = ProjectionImage::load(projection)?;
    let [h, w] = net.config().input_size;
    if proj.width() != w || proj.height() != h {
        return Err(Error::ShapeMismatch {
            layer: "input".into(),
            detail: format!(
                "projection is {}x{}, network expects {w}x{h}",
                proj.width(),
                proj.height()
            ),
        });
    }
    let input: Vec<f32> = normalize_projection(proj.data())?
        .values
        .iter()
        .map(|&v| v as f32)
        .collect();
    let start = Instant::now();
    let values = net_predict(&mut net, &input)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let grid = output_grid(net.config(), data)?;
    let field = DisplacementField::new(
        grid,
        net.config().out_channels,
        values.iter().map(|&v| v as f64).collect(),
    )?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    field.save(out)?;
    println!("inference_ms {ms:.3}");
    println!("wrote {}", out.display());
    Ok(())
}

fn load_landmarks(cfg: &RunConfig, grid: &Grid) -> Result<LandmarkSet> {
    match &cfg.paths.landmarks {
        Some(p) if p.exists() => LandmarkSet::load(p, grid),
        Some(p) if p != &crate::config::Paths::default().landmarks.unwrap() => Err(Error::InvalidArgument(format!(
            "landmark file not found: {}",
            p.display()
        ))),
        _ => LandmarkSet::new(lung_landmarks(grid), grid),
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: SplitArg, out: &Path) -> Result<()> {
    let manifest = open_checked(cfg)?;
    let root = &cfg.paths.data_dir;
    let info = &manifest.info;
    let mut net = match checkpoint {
        Some(ck) => {
            require(ck, "checkpoint")?;
            let (net, _) = load_checkpoint(ck)?;
            if net.config().input_size != cfg.network.input_size || net.config().output_size != cfg.network.output_size
            {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {} was trained for a different input/output size",
                    ck.display()
                )));
            }
            Some(net)
        }
        None => None,
    };
    let landmarks = load_landmarks(cfg, &info.preop_grid)?;
    let lattice = target_grid(&info.preop_grid, cfg.network.output_size)?;
    let source = info.geometry.pose.camera_center();
    let mut records = Vec::new();
    let mut groups = Vec::new();
    for (tag, s) in [("train", Split::Train), ("val", Split::Val)] {
        if split != SplitArg::All
            && !matches!(
                (split, s),
                (SplitArg::Train, Split::Train) | (SplitArg::Val, Split::Val)
            )
        {
            continue;
        }
        groups.push(tag.to_string());
        for entry in manifest.entries.iter().filter(|e| e.valid && e.split == s) {
            let gt = DisplacementField::load(&root.join(&entry.field))?;
            let pred = match &mut net {
                Some(net) => {
                    let (input, _) = load_pair(root, entry, info, net.config())?;
                    let values = net_predict(net, &input)?;
                    let f = DisplacementField::new(
                        lattice,
                        net.config().out_channels,
                        values.iter().map(|&v| v as f64).collect(),
                    )?;
                    lift_from_image_plane(&f, &info.geometry.pose)?
                }
                None => DisplacementField::zeros(lattice, 3)?,
            };
            for ((label, _), (tre, pd)) in landmarks.iter().zip(landmark_errors(&pred, &gt, &landmarks, &source)?) {
                records.push(LandmarkRecord {
                    group: tag.into(),
                    sample: entry.id.clone(),
                    landmark: label.into(),
                    tre,
                    pd,
                });
            }
        }
    }
    let report = aggregate_report(records, &groups)?;
    create_dir(out)?;
    write_snapshot(cfg, out)?;
    fs::write(out.join("report.md"), report.to_markdown()).map_err(|e| Error::io(out.join("report.md"), e))?;
    fs::write(out.join("metrics.csv"), report.to_csv()).map_err(|e| Error::io(out.join("metrics.csv"), e))?;
    fs::write(out.join("records.csv"), report.records_csv()).map_err(|e| Error::io(out.join("records.csv"), e))?;
    write_json(&out.join("report.json"), &report)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_markdown());
    Ok(())
}

/// Geometry from, in order: an explicit file, a dataset sample's perturbed
/// pose, a dataset's base geometry, or the default AP view of the volume.
pub fn resolve_geometry(
    cfg: &RunConfig,
    volume: &Path,
    geometry: Option<&Path>,
    data: Option<&Path>,
    sample: Option<&str>,
) -> Result<BaseGeometry> {
    if let Some(g) = geometry {
        require(g, "geometry file")?;
        return read_json(g);
    }
    if let Some(root) = data {
        let m = open_dataset(root)?;
        let mut geo = m.info.geometry;
        if let Some(id) = sample {
            let entry = m
                .entries
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("no sample {id} in {}", root.display())))?;
            let pose: SamplePose = read_json(&root.join(&entry.pose))?;
            geo.pose = pose.perturbed;
        }
        return Ok(geo);
    }
    if sample.is_some() {
        return Err(Error::InvalidArgument("--sample needs --data".into()));
    }
    require(volume, "volume")?;
    let vol = Volume::load(volume)?;
    BaseGeometry::default_for(vol.grid(), cfg.dataset.detector)
}

pub fn render(cfg: &RunConfig, volume: &Path, geo: &BaseGeometry, out: &Path) -> Result<()> {
    require(volume, "volume")?;
    let vol = Volume::load(volume)?;
    let step = cfg.dataset.step_mm.unwrap_or_else(|| default_step(vol.grid()));
    let p = render_drr(&vol, &geo.intrinsics, &geo.pose, step)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    p.save_with_png(out, DisplayMapping::MinMax)?;
    println!("wrote {} ({}x{})", out.display(), p.width(), p.height());
    Ok(())
}

#[derive(Serialize)]
struct OverlayRecord {
    image: PathBuf,
    original_contour_px: usize,
    warped_contour_px: usize,
    coincident: bool,
}

pub fn overlay(
    cfg: &RunConfig,
    volume: &Path,
    mask: &Path,
    field: &Path,
    geo: &BaseGeometry,
    out: &Path,
) -> Result<()> {
    for (p, what) in [(volume, "volume"), (mask, "mask"), (field, "field")] {
        require(p, what)?;
    }
    let vol = Volume::load(volume)?;
    let mask_vol = Volume::load(mask)?;
    let f = DisplacementField::load(field)?;
    let step = cfg.dataset.step_mm.unwrap_or_else(|| default_step(vol.grid()));
    let o = draw_overlay(&vol, &mask_vol, &f, &geo.intrinsics, &geo.pose, step)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let png = out.with_extension("png");
    o.image.save(&png)?;
    let record = OverlayRecord {
        image: png.file_name().map(PathBuf::from).unwrap_or_default(),
        original_contour_px: o.original.iter().filter(|&&b| b).count(),
        warped_contour_px: o.warped.iter().filter(|&&b| b).count(),
        coincident: o.contours_coincide(),
    };
    write_json(&out.with_extension("json"), &record)?;
    println!(
        "wrote {} (contours: original {} px, warped {} px, coincident {})",
        png.display(),
        record.original_contour_px,
        record.warped_contour_px,
        record.coincident
    );
    Ok(())
}
