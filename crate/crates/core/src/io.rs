//! Binary scan (`DBF1`) and grid (`DBG1`) formats plus the text trajectory manifest.
//!
//! All multi-byte values are little-endian with no padding.
//!
//! Scan layout: `"DBF1"`, `u8` sensor kind (0 stereo, 1 lidar), `u64` point
//! count, 64-byte pose block, then per point `3×f32` xyz, `3×u8` rgb (stereo
//! only) and `f32` ego distance.
//!
//! Grid layout: `"DBG1"`, `f64` lateral extent, `f64` forward extent, `f64`
//! resolution, `u32` channel count, `u32` rows, `u32` cols, then row-major
//! `f32` planes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::{Pose, POSE_BYTES};
use crate::grid::{BevGrid, GridGeometry, NUM_CHANNELS};

pub const SCAN_MAGIC: &[u8; 4] = b"DBF1";
pub const GRID_MAGIC: &[u8; 4] = b"DBG1";

const EGO_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SensorKind {
    Stereo,
    Lidar,
}

impl SensorKind {
    pub fn code(self) -> u8 {
        match self {
            SensorKind::Stereo => 0,
            SensorKind::Lidar => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SensorKind::Stereo),
            1 => Ok(SensorKind::Lidar),
            other => Err(Error::format(format!("unknown sensor kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SensorKind::Stereo => "stereo",
            SensorKind::Lidar => "lidar",
        }
    }

    fn record_bytes(self) -> usize {
        match self {
            SensorKind::Stereo => 19,
            SensorKind::Lidar => 16,
        }
    }
}

impl std::str::FromStr for SensorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stereo" => Ok(SensorKind::Stereo),
            "lidar" => Ok(SensorKind::Lidar),
            other => Err(Error::Config(format!("unknown sensor kind '{other}'"))),
        }
    }
}

/// One point in the recording sensor's frame, before registration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub xyz: [f32; 3],
    pub rgb: Option<[u8; 3]>,
    pub ego_dist: f32,
}

fn norm_f32(xyz: [f32; 3]) -> f32 {
    let [x, y, z] = xyz.map(f64::from);
    (x * x + y * y + z * z).sqrt() as f32
}

impl PointRecord {
    /// Computes the ego distance from the sensor-frame position.
    pub fn new(xyz: [f32; 3], rgb: Option<[u8; 3]>) -> Self {
        Self { xyz, rgb, ego_dist: norm_f32(xyz) }
    }

    fn check(&self) -> Result<()> {
        let norm = norm_f32(self.xyz);
        if !(self.ego_dist > 0.0) {
            return Err(Error::format(format!("non-positive ego distance {}", self.ego_dist)));
        }
        if !((self.ego_dist - norm).abs() <= EGO_TOLERANCE * norm.max(1.0)) {
            return Err(Error::format(format!("ego distance mismatch: stored {} vs |xyz| = {norm}", self.ego_dist)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanFrame {
    pub kind: SensorKind,
    pub pose: Pose,
    pub points: Vec<PointRecord>,
}

impl ScanFrame {
    pub fn new(kind: SensorKind, pose: Pose, points: Vec<PointRecord>) -> Self {
        Self { kind, pose, points }
    }

    pub fn stamp(&self) -> f64 {
        self.pose.stamp
    }
}

pub fn write_scan_to<W: Write>(frame: &ScanFrame, mut w: W) -> Result<()> {
    let io = |e| Error::format(format!("write failed: {e}"));
    w.write_all(SCAN_MAGIC).map_err(io)?;
    w.write_all(&[frame.kind.code()]).map_err(io)?;
    w.write_all(&(frame.points.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&frame.pose.to_le_bytes()).map_err(io)?;
    let mut rec = Vec::with_capacity(frame.kind.record_bytes());
    for p in &frame.points {
        rec.clear();
        for v in p.xyz {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        match (frame.kind, p.rgb) {
            (SensorKind::Stereo, Some(rgb)) => rec.extend_from_slice(&rgb),
            (SensorKind::Lidar, None) => {}
            (kind, rgb) => {
                return Err(Error::format(format!("{} point with rgb {rgb:?}", kind.name())));
            }
        }
        rec.extend_from_slice(&p.ego_dist.to_le_bytes());
        w.write_all(&rec).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_scan(frame: &ScanFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_scan_to(frame, BufWriter::new(file)).map_err(|e| e.with_path(path))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated {what}")),
        _ => Error::format(format!("read failed: {e}")),
    })
}

/// Streaming scan reader: parses the header eagerly and yields points one at a time.
pub struct ScanReader<R: Read> {
    inner: R,
    kind: SensorKind,
    pose: Pose,
    count: u64,
    read: u64,
    buf: [u8; 19],
}

impl<R: Read> ScanReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(&mut inner, &mut magic, "header")?;
        if &magic != SCAN_MAGIC {
            return Err(Error::format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let mut kind = [0u8; 1];
        read_exact_or(&mut inner, &mut kind, "header")?;
        let kind = SensorKind::from_code(kind[0])?;
        let mut count = [0u8; 8];
        read_exact_or(&mut inner, &mut count, "header")?;
        let mut pose = [0u8; POSE_BYTES];
        read_exact_or(&mut inner, &mut pose, "pose block")?;
        Ok(Self {
            inner,
            kind,
            pose: Pose::from_le_bytes(&pose)?,
            count: u64::from_le_bytes(count),
            read: 0,
            buf: [0u8; 19],
        })
    }

    pub fn kind(&self) -> SensorKind {
        self.kind
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn point_count(&self) -> u64 {
        self.count
    }

    fn next_record(&mut self) -> Result<PointRecord> {
        let n = self.kind.record_bytes();
        let (buf, inner) = (&mut self.buf[..n], &mut self.inner);
        read_exact_or(inner, buf, "point record")?;
        let f = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
        let xyz = [f(0), f(4), f(8)];
        let (rgb, ego_at) = match self.kind {
            SensorKind::Stereo => (Some([buf[12], buf[13], buf[14]]), 15),
            SensorKind::Lidar => (None, 12),
        };
        let rec = PointRecord { xyz, rgb, ego_dist: f(ego_at) };
        rec.check()?;
        Ok(rec)
    }

    /// Consumes the reader, checking that no bytes follow the last record.
    pub fn finish(mut self) -> Result<()> {
        if self.read != self.count {
            return Err(Error::format("reader finished before the last record"));
        }
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format("trailing bytes after last record")),
            Err(e) => Err(Error::format(format!("read failed: {e}"))),
        }
    }
}

impl<R: Read> Iterator for ScanReader<R> {
    type Item = Result<PointRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.count {
            return None;
        }
        self.read += 1;
        Some(self.next_record())
    }
}

pub fn read_scan_from<R: Read>(r: R) -> Result<ScanFrame> {
    let mut reader = ScanReader::new(r)?;
    let kind = reader.kind();
    let pose = reader.pose();
    // Cap the preallocation so a corrupt count cannot exhaust memory.
    let mut points = Vec::with_capacity(reader.point_count().min(1 << 20) as usize);
    for p in reader.by_ref() {
        points.push(p?);
    }
    reader.finish()?;
    Ok(ScanFrame { kind, pose, points })
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<ScanFrame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scan_from(BufReader::new(file)).map_err(|e| e.with_path(path))
}

pub fn open_scan(path: impl AsRef<Path>) -> Result<ScanReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ScanReader::new(BufReader::new(file)).map_err(|e| e.with_path(path))
}

/// Header fields of a `DBG1` file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridHeader {
    pub lateral: f64,
    pub forward: f64,
    pub resolution: f64,
    pub channels: u32,
    pub rows: u32,
    pub cols: u32,
}

pub const GRID_HEADER_BYTES: usize = 4 + 3 * 8 + 3 * 4;

impl GridHeader {
    pub fn of(grid: &BevGrid) -> Self {
        let g = grid.geometry();
        Self {
            lateral: g.lateral(),
            forward: g.forward(),
            resolution: g.resolution(),
            channels: NUM_CHANNELS as u32,
            rows: g.rows() as u32,
            cols: g.cols() as u32,
        }
    }

    pub fn to_bytes(&self) -> [u8; GRID_HEADER_BYTES] {
        let mut out = [0u8; GRID_HEADER_BYTES];
        out[..4].copy_from_slice(GRID_MAGIC);
        out[4..12].copy_from_slice(&self.lateral.to_le_bytes());
        out[12..20].copy_from_slice(&self.forward.to_le_bytes());
        out[20..28].copy_from_slice(&self.resolution.to_le_bytes());
        out[28..32].copy_from_slice(&self.channels.to_le_bytes());
        out[32..36].copy_from_slice(&self.rows.to_le_bytes());
        out[36..40].copy_from_slice(&self.cols.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; GRID_HEADER_BYTES]) -> Result<Self> {
        if &b[..4] != GRID_MAGIC {
            return Err(Error::format(format!("bad magic {:?}", String::from_utf8_lossy(&b[..4]))));
        }
        let f = |i: usize| f64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        let u = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        Ok(Self { lateral: f(4), forward: f(12), resolution: f(20), channels: u(28), rows: u(32), cols: u(36) })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = [0u8; GRID_HEADER_BYTES];
        read_exact_or(r, &mut buf, "grid header")?;
        Self::from_bytes(&buf)
    }

    /// Geometry implied by extent and resolution, checked against the stored dimensions.
    pub fn geometry(&self) -> Result<GridGeometry> {
        let g = GridGeometry::new(self.lateral, self.forward, self.resolution)
            .map_err(|e| Error::format(format!("invalid grid extent: {e}")))?;
        if g.rows() != self.rows as usize || g.cols() != self.cols as usize {
            return Err(Error::format(format!(
                "header dims {}x{} inconsistent with extent {}x{} at {}",
                self.rows, self.cols, self.lateral, self.forward, self.resolution
            )));
        }
        if self.channels as usize != NUM_CHANNELS {
            return Err(Error::format(format!("expected {NUM_CHANNELS} channels, found {}", self.channels)));
        }
        Ok(g)
    }
}

pub fn write_bev_to<W: Write>(grid: &BevGrid, mut w: W) -> Result<()> {
    let io = |e| Error::format(format!("write failed: {e}"));
    w.write_all(&GridHeader::of(grid).to_bytes()).map_err(io)?;
    let mut bytes = Vec::with_capacity(grid.data().len() * 4);
    for v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_bev(grid: &BevGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_bev_to(grid, BufWriter::new(file)).map_err(|e| e.with_path(path))
}

pub fn read_bev_from<R: Read>(mut r: R) -> Result<BevGrid> {
    let header = GridHeader::read_from(&mut r)?;
    let geometry = header.geometry()?;
    let expected = NUM_CHANNELS * geometry.cells() * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload).map_err(|e| Error::format(format!("read failed: {e}")))?;
    if payload.len() != expected {
        return Err(Error::format(format!("payload has {} bytes, header implies {expected}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    BevGrid::from_data(geometry, data)
}

pub fn read_bev(path: impl AsRef<Path>) -> Result<BevGrid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bev_from(BufReader::new(file)).map_err(|e| e.with_path(path))
}

/// One scan referenced by a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub run: String,
    pub kind: SensorKind,
    pub stamp: f64,
    /// As written in the manifest; relative paths resolve against the manifest directory.
    pub path: PathBuf,
}

/// Ordered list of scan files plus the raster configuration for a set of runs.
///
/// Text format, one directive per line, `#` comments:
///
/// ```text
/// extent 12 30
/// resolution 0.02
/// ground_offset 1.5
/// scan <run> <stereo|lidar> <stamp> <path>
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryManifest {
    pub lateral: f64,
    pub forward: f64,
    pub resolution: f64,
    pub ground_offset: f64,
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl TrajectoryManifest {
    pub fn new(geometry: &GridGeometry, ground_offset: f64, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            lateral: geometry.lateral(),
            forward: geometry.forward(),
            resolution: geometry.resolution(),
            ground_offset,
            base_dir: base_dir.into(),
            entries: Vec::new(),
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.lateral, self.forward, self.resolution)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Run ids in order of first appearance.
    pub fn runs(&self) -> Vec<String> {
        let mut runs: Vec<String> = Vec::new();
        for e in &self.entries {
            if !runs.contains(&e.run) {
                runs.push(e.run.clone());
            }
        }
        runs
    }

    /// A manifest restricted to one run.
    pub fn run(&self, run: &str) -> TrajectoryManifest {
        TrajectoryManifest {
            entries: self.entries.iter().filter(|e| e.run == run).cloned().collect(),
            base_dir: self.base_dir.clone(),
            ..*self
        }
    }

    /// Entries sorted by stamp; equal stamps keep manifest order.
    pub fn ordered_entries(&self) -> Vec<&ManifestEntry> {
        let mut v: Vec<&ManifestEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.stamp.total_cmp(&b.stamp));
        v
    }

    /// Stamps must be finite and strictly increasing within each (run, sensor) stream.
    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if !(self.ground_offset >= 0.0) {
            return Err(Error::Config(format!("ground_offset must be >= 0, got {}", self.ground_offset)));
        }
        let mut last: std::collections::HashMap<(&str, SensorKind), f64> = Default::default();
        for e in &self.entries {
            if !e.stamp.is_finite() {
                return Err(Error::Config(format!("non-finite stamp for {}", e.path.display())));
            }
            if let Some(prev) = last.insert((e.run.as_str(), e.kind), e.stamp) {
                if !(e.stamp > prev) {
                    return Err(Error::Config(format!(
                        "stamps not strictly increasing in run {} {} stream at {}",
                        e.run,
                        e.kind.name(),
                        e.stamp
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# futurefuse trajectory manifest\n");
        s += &format!("extent {} {}\n", self.lateral, self.forward);
        s += &format!("resolution {}\n", self.resolution);
        s += &format!("ground_offset {}\n", self.ground_offset);
        for e in &self.entries {
            s += &format!("scan {} {} {} {}\n", e.run, e.kind.name(), e.stamp, e.path.display());
        }
        s
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m = TrajectoryManifest {
            lateral: 12.0,
            forward: 30.0,
            resolution: 0.02,
            ground_offset: 0.0,
            base_dir: base_dir.into(),
            entries: Vec::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::format(format!("manifest line {}: {msg}: '{raw}'", lineno + 1));
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["extent", lat, fwd] => {
                    m.lateral = num(lat)?;
                    m.forward = num(fwd)?;
                }
                ["resolution", r] => m.resolution = num(r)?,
                ["ground_offset", g] => m.ground_offset = num(g)?,
                ["scan", run, kind, stamp, path @ ..] if !path.is_empty() => m.entries.push(ManifestEntry {
                    run: run.to_string(),
                    kind: kind.parse().map_err(|_| err("bad sensor kind"))?,
                    stamp: num(stamp)?,
                    path: PathBuf::from(path.join(" ")),
                }),
                _ => return Err(err("unrecognized directive")),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| e.with_path(path))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Lazily reads every scan of the manifest in global stamp order, merging sensor streams.
pub fn stream_manifest(manifest: &TrajectoryManifest) -> impl Iterator<Item = Result<ScanFrame>> + '_ {
    manifest.ordered_entries().into_iter().map(move |e| {
        let path = manifest.resolve(e);
        let scan = read_scan(&path)?;
        if scan.kind != e.kind {
            return Err(Error::Format {
                path: Some(path),
                msg: format!("manifest says {} but file holds {}", e.kind.name(), scan.kind.name()),
            });
        }
        Ok(scan)
    })
}

/// Reads newline-delimited text, skipping blank and `#` lines.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push(t.to_string());
        }
    }
    Ok(out)
}
