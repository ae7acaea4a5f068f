use std::fs::File;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use futurefuse_core::config::{parse_pair, KvConfig};
use futurefuse_core::dataset::{build_pair, export_split, read_index, DatasetConfig, IndexEntry};
use futurefuse_core::fusion::train::{train_toy, TrainConfig, TrainingPair};
use futurefuse_core::fusion::weights::WEIGHTS_MAGIC;
use futurefuse_core::fusion::{fuse_forward, FusionConfig, FusionWeights, LossHooks, FUSION_KEYS};
use futurefuse_core::io::{open_scan, read_bev, write_bev, GridHeader, GRID_MAGIC, SCAN_MAGIC};
use futurefuse_core::metrics::{self, EvalOptions};
use futurefuse_core::synth::{write_synthetic_dataset, SynthConfig};
use futurefuse_core::{BevGrid, GridGeometry, Group, TrajectoryManifest};
use rayon::prelude::*;

use crate::{
    DatasetArgs, EvalArgs, FuseArgs, GeometryArgs, InspectArgs, ModelArgs, RasterizeArgs, SynthArgs, TrainArgs,
    WhichGrid,
};

fn log_config(what: &str, kv: &KvConfig) {
    log::info!("{what} configuration:");
    for line in kv.to_text().lines() {
        log::info!("  {line}");
    }
}

fn load_manifest(path: &Path) -> Result<TrajectoryManifest> {
    TrajectoryManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Geometry flags override the manifest's raster settings.
fn resolve_geometry(args: &GeometryArgs, manifest: &TrajectoryManifest) -> Result<GridGeometry> {
    let (lat, fwd) = match &args.extent {
        Some(s) => parse_pair(s)?,
        None => (manifest.lateral, manifest.forward),
    };
    Ok(GridGeometry::new(lat, fwd, args.resolution.unwrap_or(manifest.resolution))?)
}

pub fn synth(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    if let Some(f) = a.frames {
        kv.set("traj.frames", f);
    }
    if let Some(r) = a.runs {
        kv.set("traj.runs", r);
    }
    if let Some(e) = &a.extent {
        kv.set("grid.extent", e);
    }
    if let Some(r) = a.resolution {
        kv.set("grid.resolution", r);
    }
    let origin = a.config.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "defaults".into());
    let cfg = SynthConfig::from_kv(&kv).with_context(|| format!("synth configuration from {origin}"))?;
    log_config("synth", &cfg.to_kv());
    let summary = write_synthetic_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} scans ({} points) and {} ground-truth grids; manifest {}",
        summary.scans,
        summary.points,
        summary.ground_truth.len(),
        summary.manifest.display()
    );
    Ok(())
}

pub fn rasterize(a: RasterizeArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let run = match &a.run {
        Some(r) => r.clone(),
        None => manifest.runs().into_iter().next().context("manifest has no scans")?,
    };
    let geometry = resolve_geometry(&a.geometry, &manifest)?;
    let cfg = DatasetConfig {
        policy: a.policy,
        stereo_feeds_height: a.stereo_height,
        geometry: Some(geometry),
        ..Default::default()
    };
    log::info!(
        "rasterize: run = {run}, frame = {}, grid = {:?}, policy = {}, geometry = {}x{} @ {}",
        a.frame_index,
        a.grid,
        cfg.policy,
        geometry.lateral(),
        geometry.forward(),
        geometry.resolution()
    );
    let pair = build_pair(&manifest.run(&run), a.frame_index, &cfg)
        .with_context(|| format!("run {run}, frame {}", a.frame_index))?;
    let grid = match a.grid {
        WhichGrid::Input => &pair.input,
        WhichGrid::Label => &pair.label,
    };
    write_bev(grid, &a.out)?;
    println!(
        "{}: {}×{} cells, rgb coverage {}, height coverage {}",
        pair.frame_id,
        grid.rows(),
        grid.cols(),
        grid.coverage(Group::Rgb),
        grid.coverage(Group::Height)
    );
    Ok(())
}

pub fn dataset(a: DatasetArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let geometry = resolve_geometry(&a.geometry, &manifest)?;
    let cfg = DatasetConfig {
        policy: a.policy,
        stereo_feeds_height: a.stereo_height,
        stride: a.stride,
        max_resident_points: a.max_resident_points,
        geometry: Some(geometry),
        ..Default::default()
    };
    log::info!(
        "dataset: policy = {}, geometry = {}x{} @ {} ({}×{}), stride = {}, holdout = {:?}, stereo height = {}",
        cfg.policy,
        geometry.lateral(),
        geometry.forward(),
        geometry.resolution(),
        geometry.rows(),
        geometry.cols(),
        cfg.stride,
        a.holdout,
        cfg.stereo_feeds_height
    );
    let report = export_split(&manifest, a.holdout.as_ref(), &a.out, &cfg)?;
    println!(
        "{} pairs ({} train runs, {} test runs); index {}",
        report.train_pairs + report.test_pairs,
        report.train_runs.len(),
        report.test_runs.len(),
        report.index.display()
    );
    Ok(())
}

fn model_config(m: &ModelArgs, geometry: &GridGeometry) -> Result<FusionConfig> {
    let cfg = match &m.model_config {
        Some(p) => {
            let kv = KvConfig::load(p)?;
            kv.reject_unknown(FUSION_KEYS).with_context(|| p.display().to_string())?;
            FusionConfig::from_kv(&kv).with_context(|| p.display().to_string())?
        }
        None => {
            FusionConfig::from_geometry(geometry, m.stride, m.downsample, m.latent_channels, m.hidden_channels, m.mode)?
        }
    };
    log_config("model", &cfg.to_kv());
    Ok(cfg)
}

fn index_entries(path: &Path) -> Result<Vec<IndexEntry>> {
    let entries = read_index(path)?;
    if entries.is_empty() {
        bail!("index {} has no entries", path.display());
    }
    Ok(entries)
}

fn read_grid(path: &Path, frame: &str) -> Result<BevGrid> {
    read_bev(path).with_context(|| format!("frame {frame}"))
}

pub fn fuse(a: FuseArgs, seed: u64) -> Result<()> {
    let jobs: Vec<(String, std::path::PathBuf, std::path::PathBuf)> = match (&a.input, &a.index) {
        (Some(input), _) => vec![("input".into(), input.clone(), a.out.clone().context("--out is required")?)],
        (None, Some(index)) => {
            let dir = a.pred_dir.clone().context("--pred-dir is required")?;
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            index_entries(index)?
                .into_iter()
                .map(|e| {
                    let out = metrics::prediction_path(&dir, &e.frame_id);
                    (e.frame_id, e.input, out)
                })
                .collect()
        }
        (None, None) => bail!("either --input or --index is required"),
    };
    let first = read_grid(&jobs[0].1, &jobs[0].0)?;
    let cfg = model_config(&a.model, first.geometry())?;
    let weights = match &a.weights {
        Some(p) => {
            let w = FusionWeights::load(p)?;
            w.validate(&cfg).with_context(|| format!("weights {} do not fit the model", p.display()))?;
            w
        }
        None => {
            log::info!("no weights given; initializing from seed {seed}");
            FusionWeights::init(&cfg, seed)
        }
    };
    jobs.par_iter()
        .map(|(id, input, out)| {
            let grid = read_grid(input, id)?;
            let (pred, _) = fuse_forward(&grid, &weights, &cfg).with_context(|| format!("frame {id}"))?;
            write_bev(&pred, out)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    println!("fused {} grid(s)", jobs.len());
    Ok(())
}

pub fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let entries = index_entries(&a.index)?;
    let pairs: Vec<TrainingPair> = entries
        .par_iter()
        .map(|e| {
            Ok(TrainingPair { input: read_grid(&e.input, &e.frame_id)?, label: read_grid(&e.label, &e.frame_id)? })
        })
        .collect::<Result<_>>()?;
    let cfg = model_config(&a.model, pairs[0].input.geometry())?;
    let tc = TrainConfig { steps: a.steps, lr: a.lr, momentum: a.momentum, batch_size: a.batch_size, seed };
    log::info!("training: {tc:?}, {} pairs", pairs.len());
    let result = train_toy(&pairs, &cfg, &tc, &LossHooks::default())?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    result.weights.save(a.out.join("weights.dbw1"))?;
    std::fs::write(a.out.join("model.cfg"), cfg.to_kv().to_text())?;
    let curve: String = result.loss_curve.iter().enumerate().map(|(i, l)| format!("{i} {l}\n")).collect();
    std::fs::write(a.out.join("loss.txt"), curve)?;
    let (first, last) = (result.loss_curve.first().copied(), result.loss_curve.last().copied());
    println!(
        "trained {} steps, {} parameters; minibatch loss {} -> {}",
        tc.steps,
        result.weights.param_count(),
        first.map_or("n/a".into(), |v| format!("{v:.5}")),
        last.map_or("n/a".into(), |v| format!("{v:.5}"))
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let entries = index_entries(&a.index)?;
    let opts = EvalOptions { patch: a.patch, shrinkage: a.shrinkage, ..Default::default() };
    log::info!("eval: {opts:?}");
    let evaluation = metrics::evaluate(&entries, &a.pred_dir, &opts)?;
    evaluation.write(&a.out)?;
    print!("{}", evaluation.to_text());
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let path = &a.path;
    let mut magic = [0u8; 4];
    let n =
        File::open(path).and_then(|mut f| f.read(&mut magic)).with_context(|| format!("opening {}", path.display()))?;
    let magic = &magic[..n];
    if magic == SCAN_MAGIC {
        let r = open_scan(path)?;
        let p = r.pose();
        let t = p.translation;
        println!("format      DBF1 scan");
        println!("kind        {}", r.kind().name());
        println!("stamp       {}", p.stamp);
        println!("translation {} {} {}", t.x, t.y, t.z);
        println!("rotation    {:?}", p.wxyz());
        println!("points      {}", r.point_count());
    } else if magic == GRID_MAGIC {
        let mut f = File::open(path)?;
        let h = GridHeader::read_from(&mut f).with_context(|| path.display().to_string())?;
        let grid = read_bev(path)?;
        println!("format      DBG1 grid");
        println!("extent      {}x{} m", h.lateral, h.forward);
        println!("resolution  {} m", h.resolution);
        println!("shape       {} channels × {} rows × {} cols", h.channels, h.rows, h.cols);
        println!("rgb cells   {}", grid.coverage(Group::Rgb));
        println!("height cells {}", grid.coverage(Group::Height));
    } else if magic == WEIGHTS_MAGIC {
        let w = FusionWeights::load(path)?;
        println!("format      DBW1 weights");
        println!("tensors     {}", w.len());
        println!("parameters  {}", w.param_count());
        for (name, t) in w.iter() {
            println!("  {name} {:?}", t.shape());
        }
    } else {
        let m = load_manifest(path)?;
        println!("format      manifest");
        println!("extent      {}x{} m", m.lateral, m.forward);
        println!("resolution  {} m", m.resolution);
        println!("ground      {} m", m.ground_offset);
        for run in m.runs() {
            let sub = m.run(&run);
            println!("run {run}: {} scans", sub.entries.len());
        }
    }
    Ok(())
}
