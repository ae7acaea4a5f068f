//! Future-fusion dataset generation.
//!
//! Every scan of a run is registered once into a tiled global map. For a frame
//! at stamp `t`, the input grid is rasterized from the points with stamp `<= t`
//! and the label grid from all points of the run, both in the frame's local
//! ground frame.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{derive_local_frame, LocalFrame, Pose, Vec3};
use crate::grid::{BevGrid, GridGeometry};
use crate::io::{self, open_scan, stream_manifest, write_bev, SensorKind, TrajectoryManifest};
use crate::raster::{rasterize, Accumulation, RasterPolicy, RegisteredPoint};

type TileKey = (i64, i64);

#[derive(Debug, Default)]
struct Tile {
    resident: Vec<RegisteredPoint>,
    spill: Option<PathBuf>,
    spilled: usize,
}

const SPILL_RECORD: usize = 3 * 8 + 1 + 4 + 4 + 8 + 8;

fn encode_point(p: &RegisteredPoint, out: &mut Vec<u8>) {
    for v in p.global.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(p.kind.code());
    match p.rgb {
        Some([r, g, b]) => out.extend_from_slice(&[1, r, g, b]),
        None => out.extend_from_slice(&[0; 4]),
    }
    out.extend_from_slice(&p.ego_dist.to_le_bytes());
    out.extend_from_slice(&p.stamp.to_le_bytes());
    out.extend_from_slice(&p.key.to_le_bytes());
}

fn decode_point(b: &[u8]) -> Result<RegisteredPoint> {
    let f = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
    Ok(RegisteredPoint {
        global: Vec3::new(f(0), f(8), f(16)),
        kind: SensorKind::from_code(b[24])?,
        rgb: (b[25] == 1).then(|| [b[26], b[27], b[28]]),
        ego_dist: f32::from_le_bytes(b[29..33].try_into().expect("4 bytes")),
        stamp: f(33),
        key: u64::from_le_bytes(b[41..49].try_into().expect("8 bytes")),
    })
}

/// Registered points of a whole run, bucketed into square xy tiles.
///
/// With a memory budget, whole tiles are spilled to disk in ascending tile
/// order once the resident point count exceeds the budget; queries read them
/// back transparently.
#[derive(Debug)]
pub struct GlobalMap {
    tile_size: f64,
    tiles: BTreeMap<TileKey, Tile>,
    resident: usize,
    total: usize,
    budget: Option<usize>,
    spill_dir: Option<tempfile::TempDir>,
}

impl GlobalMap {
    pub fn new(tile_size: f64) -> Self {
        Self { tile_size, tiles: BTreeMap::new(), resident: 0, total: 0, budget: None, spill_dir: None }
    }

    /// Caps the number of resident points; excess tiles spill to a private temp directory.
    pub fn with_budget(mut self, max_resident_points: usize) -> Self {
        self.budget = Some(max_resident_points.max(1));
        self
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn resident_points(&self) -> usize {
        self.resident
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    fn tile_of(&self, x: f64, y: f64) -> TileKey {
        ((x / self.tile_size).floor() as i64, (y / self.tile_size).floor() as i64)
    }

    pub fn insert(&mut self, p: RegisteredPoint) -> Result<()> {
        let key = self.tile_of(p.global.x, p.global.y);
        self.tiles.entry(key).or_default().resident.push(p);
        self.resident += 1;
        self.total += 1;
        if let Some(budget) = self.budget {
            if self.resident > budget {
                self.spill(budget / 2)?;
            }
        }
        Ok(())
    }

    pub fn insert_scan(&mut self, scan: &io::ScanFrame) -> Result<()> {
        for p in &scan.points {
            self.insert(RegisteredPoint::from_scan_point(scan, p))?;
        }
        Ok(())
    }

    fn spill(&mut self, target: usize) -> Result<()> {
        if self.spill_dir.is_none() {
            self.spill_dir = Some(tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?);
        }
        let dir = self.spill_dir.as_ref().expect("spill dir").path().to_path_buf();
        let mut buf = Vec::new();
        for (&(tx, ty), tile) in self.tiles.iter_mut() {
            if self.resident <= target {
                break;
            }
            if tile.resident.is_empty() {
                continue;
            }
            let path = tile.spill.get_or_insert_with(|| dir.join(format!("tile_{tx}_{ty}.bin"))).clone();
            let file =
                std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            buf.clear();
            tile.resident.iter().for_each(|p| encode_point(p, &mut buf));
            let mut w = BufWriter::new(file);
            w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
            self.resident -= tile.resident.len();
            tile.spilled += tile.resident.len();
            tile.resident = Vec::new();
        }
        Ok(())
    }

    fn visit_tile(&self, tile: &Tile, f: &mut dyn FnMut(&RegisteredPoint)) -> Result<()> {
        if let Some(path) = &tile.spill {
            let mut bytes = Vec::with_capacity(tile.spilled * SPILL_RECORD);
            BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            if bytes.len() != tile.spilled * SPILL_RECORD {
                return Err(Error::Format { path: Some(path.clone()), msg: "spill file size mismatch".into() });
            }
            for rec in bytes.chunks_exact(SPILL_RECORD) {
                f(&decode_point(rec)?);
            }
        }
        for p in &tile.resident {
            f(p);
        }
        Ok(())
    }

    /// Visits every point whose tile overlaps the frame's map footprint.
    pub fn for_each_near(
        &self,
        frame: &LocalFrame,
        geometry: &GridGeometry,
        mut f: impl FnMut(&RegisteredPoint),
    ) -> Result<()> {
        let corners = [
            (geometry.x_min(), geometry.y_min()),
            (geometry.x_min() + geometry.forward(), geometry.y_min()),
            (geometry.x_min(), geometry.y_min() + geometry.lateral()),
            (geometry.x_min() + geometry.forward(), geometry.y_min() + geometry.lateral()),
        ]
        .map(|(x, y)| frame.to_global(&Vec3::new(x, y, 0.0)));
        let (mut lo, mut hi) = ((i64::MAX, i64::MAX), (i64::MIN, i64::MIN));
        for c in corners {
            let (tx, ty) = self.tile_of(c.x, c.y);
            lo = (lo.0.min(tx), lo.1.min(ty));
            hi = (hi.0.max(tx), hi.1.max(ty));
        }
        // Ranges are lexicographic, so the second coordinate is filtered here.
        for ((tx, ty), tile) in self.tiles.range((lo.0, i64::MIN)..=(hi.0, i64::MAX)) {
            if *tx < lo.0 || *tx > hi.0 || *ty < lo.1 || *ty > hi.1 {
                continue;
            }
            self.visit_tile(tile, &mut f)?;
        }
        Ok(())
    }

    /// Visits every point in tile order.
    pub fn for_each(&self, mut f: impl FnMut(&RegisteredPoint)) -> Result<()> {
        for tile in self.tiles.values() {
            self.visit_tile(tile, &mut f)?;
        }
        Ok(())
    }
}

pub const DEFAULT_TILE_SIZE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub policy: RasterPolicy,
    pub stereo_feeds_height: bool,
    /// Keep every `stride`-th frame.
    pub stride: usize,
    pub tile_size: f64,
    pub max_resident_points: Option<usize>,
    /// Overrides the manifest's raster geometry when set.
    pub geometry: Option<GridGeometry>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            policy: RasterPolicy::default(),
            stereo_feeds_height: false,
            stride: 1,
            tile_size: DEFAULT_TILE_SIZE,
            max_resident_points: None,
            geometry: None,
        }
    }
}

/// Registers every scan of the manifest into one global map.
pub fn build_trajectory_map(manifest: &TrajectoryManifest, cfg: &DatasetConfig) -> Result<GlobalMap> {
    let mut map = GlobalMap::new(cfg.tile_size);
    if let Some(b) = cfg.max_resident_points {
        map = map.with_budget(b);
    }
    for scan in stream_manifest(manifest) {
        map.insert_scan(&scan?)?;
    }
    Ok(map)
}

/// A frame of a run: the pose and stamp of one scan of the frame stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRef {
    pub run: String,
    pub index: usize,
    pub pose: Pose,
}

impl FrameRef {
    pub fn id(&self) -> String {
        format!("{}_{:06}", self.run, self.index)
    }

    pub fn stamp(&self) -> f64 {
        self.pose.stamp
    }
}

/// Frames of one run: its stereo scans, or its lidar scans when it has no stereo.
pub fn run_frames(manifest: &TrajectoryManifest, run: &str) -> Result<Vec<FrameRef>> {
    let entries: Vec<_> = manifest.ordered_entries().into_iter().filter(|e| e.run == run).collect();
    let kind =
        if entries.iter().any(|e| e.kind == SensorKind::Stereo) { SensorKind::Stereo } else { SensorKind::Lidar };
    entries
        .into_iter()
        .filter(|e| e.kind == kind)
        .enumerate()
        .map(|(index, e)| {
            let pose = open_scan(manifest.resolve(e))?.pose();
            Ok(FrameRef { run: run.to_string(), index, pose })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub frame_id: String,
    pub pose: Pose,
    pub local_frame: LocalFrame,
    pub input: BevGrid,
    pub label: BevGrid,
}

/// Builds input/label pairs for the frames of one run from a shared global map.
pub struct PairBuilder {
    map: GlobalMap,
    frames: Vec<FrameRef>,
    geometry: GridGeometry,
    ground_offset: f64,
    cfg: DatasetConfig,
}

impl PairBuilder {
    /// `manifest` must hold exactly one run.
    pub fn new(manifest: &TrajectoryManifest, cfg: &DatasetConfig) -> Result<Self> {
        let runs = manifest.runs();
        let [run] = runs.as_slice() else {
            return Err(Error::Config(format!("pair builder needs exactly one run, manifest has {}", runs.len())));
        };
        let geometry = match cfg.geometry {
            Some(g) => g,
            None => manifest.geometry()?,
        };
        Ok(Self {
            map: build_trajectory_map(manifest, cfg)?,
            frames: run_frames(manifest, run)?,
            geometry,
            ground_offset: manifest.ground_offset,
            cfg: cfg.clone(),
        })
    }

    pub fn frames(&self) -> &[FrameRef] {
        &self.frames
    }

    pub fn map(&self) -> &GlobalMap {
        &self.map
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn local_frame(&self, frame_index: usize) -> Result<LocalFrame> {
        let f = self
            .frames
            .get(frame_index)
            .ok_or_else(|| Error::Config(format!("frame index {frame_index} out of range ({})", self.frames.len())))?;
        derive_local_frame(&f.pose, self.ground_offset)
    }

    /// Past-only and full-trajectory accumulations in the frame's local frame.
    pub fn accumulations(&self, frame_index: usize) -> Result<(LocalFrame, Accumulation, Accumulation)> {
        let frame = self.local_frame(frame_index)?;
        let stamp = self.frames[frame_index].stamp();
        let mut input = Accumulation::new(self.geometry).with_stereo_height(self.cfg.stereo_feeds_height);
        let mut label = input.clone();
        self.map.for_each_near(&frame, &self.geometry, |p| {
            if label.insert(p, &frame) && p.stamp <= stamp {
                input.insert(p, &frame);
            }
        })?;
        Ok((frame, input, label))
    }

    pub fn pair(&self, frame_index: usize) -> Result<FramePair> {
        let (local_frame, input, label) = self.accumulations(frame_index)?;
        let f = &self.frames[frame_index];
        Ok(FramePair {
            frame_id: f.id(),
            pose: f.pose,
            local_frame,
            input: rasterize(&input, &self.cfg.policy),
            label: rasterize(&label, &self.cfg.policy),
        })
    }
}

/// Builds the pair for one frame of a single-run manifest.
pub fn build_pair(manifest: &TrajectoryManifest, frame_index: usize, cfg: &DatasetConfig) -> Result<FramePair> {
    PairBuilder::new(manifest, cfg)?.pair(frame_index)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Holdout {
    /// Fraction of runs, rounded to the nearest whole run; the last runs are held out.
    Fraction(f64),
    Runs(Vec<String>),
}

impl std::str::FromStr for Holdout {
    type Err = Error;

    /// A number in `(0, 1)` is a fraction; anything else is a comma-separated run list.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().parse::<f64>() {
            Ok(f) => Ok(Holdout::Fraction(f)),
            Err(_) => Ok(Holdout::Runs(s.split(',').map(|r| r.trim().to_string()).filter(|r| !r.is_empty()).collect())),
        }
    }
}

/// Splits runs into `(train, test)`; the split is always by whole run.
pub fn split_runs(runs: &[String], holdout: &Holdout) -> Result<(Vec<String>, Vec<String>)> {
    let test: Vec<String> = match holdout {
        Holdout::Fraction(f) => {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::Config(format!("holdout fraction {f} must be in (0, 1)")));
            }
            let n = (f * runs.len() as f64).round() as usize;
            runs[runs.len().saturating_sub(n)..].to_vec()
        }
        Holdout::Runs(ids) => {
            if let Some(missing) = ids.iter().find(|id| !runs.contains(id)) {
                return Err(Error::Config(format!("holdout run '{missing}' not in manifest")));
            }
            runs.iter().filter(|r| ids.contains(r)).cloned().collect()
        }
    };
    if test.is_empty() || test.len() == runs.len() {
        return Err(Error::Config(format!(
            "holdout selects {} of {} runs; both splits must be non-empty",
            test.len(),
            runs.len()
        )));
    }
    let train = runs.iter().filter(|r| !test.contains(r)).cloned().collect();
    Ok((train, test))
}

/// One line of a dataset index: `frame_id input label stamp tx ty tz qw qx qy qz`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub frame_id: String,
    pub input: PathBuf,
    pub label: PathBuf,
    pub pose: Pose,
}

impl IndexEntry {
    pub fn to_line(&self) -> String {
        let t = self.pose.translation;
        let q = self.pose.wxyz();
        format!(
            "{} {} {} {} {} {} {} {} {} {} {}",
            self.frame_id,
            self.input.display(),
            self.label.display(),
            self.pose.stamp,
            t.x,
            t.y,
            t.z,
            q[0],
            q[1],
            q[2],
            q[3]
        )
    }

    pub fn parse(line: &str, base: &Path) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 11 {
            return Err(Error::format(format!("index line needs 11 fields: '{line}'")));
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| Error::format(format!("bad number '{}' in index", f[i])));
        Ok(Self {
            frame_id: f[0].to_string(),
            input: base.join(f[1]),
            label: base.join(f[2]),
            pose: Pose::from_wxyz(n(3)?, Vec3::new(n(4)?, n(5)?, n(6)?), [n(7)?, n(8)?, n(9)?, n(10)?])?,
        })
    }
}

/// Reads an index file; paths resolve relative to its directory.
pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<IndexEntry>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    io::read_lines(path)?
        .iter()
        .map(|l| IndexEntry::parse(l, &base))
        .collect::<Result<_>>()
        .map_err(|e| e.with_path(path))
}

fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut text = String::from("# frame_id input label stamp tx ty tz qw qx qy qz\n");
    for e in entries {
        text += &e.to_line();
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitReport {
    pub train_runs: Vec<String>,
    pub test_runs: Vec<String>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub index: PathBuf,
}

/// Writes every pair under `out_dir/pairs/` with an `index` of all pairs, plus
/// `train.index` / `test.index` when a holdout is given.
pub fn export_split(
    manifest: &TrajectoryManifest,
    holdout: Option<&Holdout>,
    out_dir: &Path,
    cfg: &DatasetConfig,
) -> Result<SplitReport> {
    if cfg.stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let runs = manifest.runs();
    let (train_runs, test_runs) = match holdout {
        Some(h) => split_runs(&runs, h)?,
        None => (runs.clone(), Vec::new()),
    };
    let pairs_dir = out_dir.join("pairs");
    std::fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;

    let mut all = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for run in &runs {
        let builder = PairBuilder::new(&manifest.run(run), cfg)?;
        let selected: Vec<usize> = (0..builder.frames().len()).step_by(cfg.stride).collect();
        let entries = selected
            .par_iter()
            .map(|&i| {
                let pair = builder.pair(i)?;
                let input = PathBuf::from("pairs").join(format!("{}_input.dbg1", pair.frame_id));
                let label = PathBuf::from("pairs").join(format!("{}_label.dbg1", pair.frame_id));
                write_bev(&pair.input, out_dir.join(&input))?;
                write_bev(&pair.label, out_dir.join(&label))?;
                Ok(IndexEntry { frame_id: pair.frame_id, input, label, pose: pair.pose })
            })
            .collect::<Result<Vec<_>>>()?;
        if test_runs.contains(run) {
            test.extend(entries.iter().cloned());
        } else {
            train.extend(entries.iter().cloned());
        }
        all.extend(entries);
    }

    let index = out_dir.join("index");
    write_index(&index, &all)?;
    if holdout.is_some() {
        write_index(&out_dir.join("train.index"), &train)?;
        write_index(&out_dir.join("test.index"), &test)?;
    }
    Ok(SplitReport { train_runs, test_runs, train_pairs: train.len(), test_pairs: test.len(), index })
}
