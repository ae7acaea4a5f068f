//! Procedural terrain and sensor simulator.
//!
//! Produces posed scans whose position noise and sparsity grow with range, and
//! analytic dense maps of the same terrain. Everything is a pure function of
//! the specs, the trajectory and the seed.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::{parse_pair, KvConfig};
use crate::error::{Error, Result};
use crate::geom::{LocalFrame, Pose, Vec3};
use crate::grid::{BevGrid, Channel, GridGeometry};
use crate::io::{write_bev, write_scan, ManifestEntry, PointRecord, ScanFrame, SensorKind, TrajectoryManifest};
use crate::mix64;

/// Planar sinusoid `A sin(2π (x cos θ + y sin θ) / λ + φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub amplitude: f64,
    pub wavelength: f64,
    pub phase: f64,
    /// Direction of travel of the wave, radians from +x.
    pub direction: f64,
}

impl Harmonic {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.direction.sin_cos();
        self.amplitude * (TAU * (x * c + y * s) / self.wavelength + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainSpec {
    pub seed: u64,
    pub harmonics: Vec<Harmonic>,
    /// Amplitude (m) and lattice spacing (m) of the value-noise height residual.
    pub noise_amplitude: f64,
    pub noise_scale: f64,
    pub texture_seed: u64,
    /// Lattice spacing (m) and strength of the color value noise.
    pub texture_scale: f64,
    pub texture_amplitude: f64,
    /// Color shift per unit of `tanh(height)`.
    pub height_tint: f64,
    /// Full size in x and y; the terrain spans `[-sx/2, sx/2] × [-sy/2, sy/2]`.
    pub extent: (f64, f64),
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            harmonics: Vec::new(),
            noise_amplitude: 0.0,
            noise_scale: 4.0,
            texture_seed: 0,
            texture_scale: 1.0,
            texture_amplitude: 0.3,
            height_tint: 0.2,
            extent: (200.0, 200.0),
        }
    }
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = mix64(seed ^ mix64((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated hash lattice, in `[0, 1)`.
pub fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (i, j) = (fu as i64, fv as i64);
    let (tu, tv) = (u - fu, v - fv);
    let a = lattice(seed, i, j);
    let b = lattice(seed, i + 1, j);
    let c = lattice(seed, i, j + 1);
    let d = lattice(seed, i + 1, j + 1);
    let top = a + (b - a) * tu;
    let bot = c + (d - c) * tu;
    top + (bot - top) * tv
}

impl TerrainSpec {
    /// Harmonics and noise lattices must be band-limited relative to `resolution`.
    pub fn validate(&self, resolution: f64) -> Result<()> {
        for h in &self.harmonics {
            if !(h.wavelength > 2.0 * resolution) {
                return Err(Error::Config(format!(
                    "harmonic wavelength {} must exceed twice the resolution {resolution}",
                    h.wavelength
                )));
            }
        }
        if self.noise_amplitude != 0.0 && !(self.noise_scale > 2.0 * resolution) {
            return Err(Error::Config(format!(
                "noise scale {} too fine for resolution {resolution}",
                self.noise_scale
            )));
        }
        if !(self.texture_scale > 2.0 * resolution) {
            return Err(Error::Config(format!(
                "texture scale {} too fine for resolution {resolution}",
                self.texture_scale
            )));
        }
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::Config("terrain extent must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= 0.5 * self.extent.0 && y.abs() <= 0.5 * self.extent.1
    }

    pub fn sample_height(&self, x: f64, y: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(Error::OutOfExtent { x, y });
        }
        Ok(self.height(x, y))
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let mut h: f64 = self.harmonics.iter().map(|hm| hm.eval(x, y)).sum();
        if self.noise_amplitude != 0.0 {
            let n = value_noise(self.seed, x / self.noise_scale, y / self.noise_scale);
            h += self.noise_amplitude * (2.0 * n - 1.0);
        }
        h
    }

    /// Surface color at `(x, y)` for terrain height `h`.
    pub fn texture(&self, x: f64, y: f64, h: f64) -> [u8; 3] {
        let g = value_noise(self.texture_seed, x / self.texture_scale, y / self.texture_scale) - 0.5;
        let t = self.height_tint * h.tanh();
        let a = self.texture_amplitude;
        [0.45 + a * g + t, 0.40 + 0.8 * a * g + 0.5 * t, 0.30 + 0.6 * a * g - 0.5 * t]
            .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
    }

    /// Slopes `(dh/dx, dh/dy)` by central differences.
    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let e = 0.05;
        (
            (self.height(x + e, y) - self.height(x - e, y)) / (2.0 * e),
            (self.height(x, y + e) - self.height(x, y - e)) / (2.0 * e),
        )
    }
}

/// Range-dependent corruption: position noise `σ(d) = sigma0 + quad·d²` and
/// keep probability `p(d) = max(1 − slope·d, min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma0: f64,
    pub quad_coeff: f64,
    pub keep_slope: f64,
    pub keep_min: f64,
    pub rgb_sigma: [f64; 3],
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { sigma0: 0.0, quad_coeff: 0.0, keep_slope: 0.0, keep_min: 1.0, rgb_sigma: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma0 >= 0.0
            && self.quad_coeff >= 0.0
            && self.keep_slope >= 0.0
            && self.keep_min > 0.0
            && self.keep_min <= 1.0
            && self.rgb_sigma.iter().all(|s| *s >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise model {self:?}")))
        }
    }

    pub fn sigma(&self, d: f64) -> f64 {
        self.sigma0 + self.quad_coeff * d * d
    }

    pub fn keep_prob(&self, d: f64) -> f64 {
        (1.0 - self.keep_slope * d).max(self.keep_min).min(1.0)
    }

    /// Bernoulli draw with probability `keep_prob(d)`.
    pub fn keeps<R: Rng>(&self, rng: &mut R, d: f64) -> bool {
        rng.random::<f64>() < self.keep_prob(d)
    }
}

/// Ground-footprint sampling pattern of one sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovParams {
    pub kind: SensorKind,
    /// Horizontal range band, meters.
    pub range_min: f64,
    pub range_max: f64,
    /// Half of the horizontal field of view, radians.
    pub half_angle: f64,
    /// Ground sample spacing, meters.
    pub spacing: f64,
}

impl FovParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_min > 0.0 && self.range_max > self.range_min && self.spacing > 0.0 && self.half_angle > 0.0) {
            return Err(Error::Config(format!("invalid field of view {self:?}")));
        }
        Ok(())
    }

    fn contains(&self, fx: f64, fy: f64) -> bool {
        let r = fx.hypot(fy);
        r >= self.range_min && r <= self.range_max && fy.atan2(fx).abs() <= self.half_angle
    }
}

fn pose_seed(seed: u64, index: usize, kind: SensorKind) -> u64 {
    mix64(seed ^ mix64(index as u64 + 1) ^ (kind.code() as u64) << 56)
}

fn simulate_one(spec: &TerrainSpec, noise: &NoiseModel, pose: &Pose, fov: &FovParams, seed: u64) -> Result<ScanFrame> {
    let t = pose.translation;
    if !spec.contains(t.x, t.y) {
        return Err(Error::OutOfExtent { x: t.x, y: t.y });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let x_axis = pose.rotation * Vec3::x();
    let heading = x_axis.y.atan2(x_axis.x);
    let (sh, ch) = heading.sin_cos();
    let inv = pose.rotation.inverse();

    let lateral = if fov.half_angle >= std::f64::consts::FRAC_PI_2 {
        fov.range_max
    } else {
        fov.range_max * fov.half_angle.sin()
    };
    let nx = (fov.range_max / fov.spacing).ceil() as i64;
    let ny = (lateral / fov.spacing).ceil() as i64;

    let mut points = Vec::new();
    for ix in 0..nx {
        for iy in -ny..ny {
            // Jitter inside each ground sample so the point set is not lattice-aligned.
            let fx = (ix as f64 + rng.random::<f64>()) * fov.spacing;
            let fy = (iy as f64 + rng.random::<f64>()) * fov.spacing;
            let keep_u: f64 = rng.random();
            let n = [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)];
            let c = [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)];
            if !fov.contains(fx, fy) {
                continue;
            }
            let gx = t.x + ch * fx - sh * fy;
            let gy = t.y + sh * fx + ch * fy;
            if !spec.contains(gx, gy) {
                continue;
            }
            let h = spec.height(gx, gy);
            let sensor = inv * (Vec3::new(gx, gy, h) - t);
            let d = sensor.norm();
            if !(keep_u < noise.keep_prob(d)) {
                continue;
            }
            let sigma = noise.sigma(d);
            let noisy = sensor + Vec3::new(n[0], n[1], n[2]) * sigma;
            let xyz = [noisy.x as f32, noisy.y as f32, noisy.z as f32];
            let rgb = match fov.kind {
                SensorKind::Stereo => {
                    let base = spec.texture(gx, gy, h);
                    let mut out = [0u8; 3];
                    for k in 0..3 {
                        let v = base[k] as f64 / 255.0 + noise.rgb_sigma[k] * c[k];
                        out[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    Some(out)
                }
                SensorKind::Lidar => None,
            };
            let rec = PointRecord::new(xyz, rgb);
            if rec.ego_dist > 0.0 {
                points.push(rec);
            }
        }
    }
    Ok(ScanFrame::new(fov.kind, *pose, points))
}

/// Simulates one scan per pose. Pose `i` draws from its own seeded stream, so
/// the result does not depend on evaluation order.
pub fn simulate_sweep(
    spec: &TerrainSpec,
    noise: &NoiseModel,
    trajectory: &[Pose],
    fov: &FovParams,
    seed: u64,
) -> Result<Vec<ScanFrame>> {
    noise.validate()?;
    fov.validate()?;
    trajectory
        .par_iter()
        .enumerate()
        .map(|(i, pose)| simulate_one(spec, noise, pose, fov, pose_seed(seed, i, fov.kind)))
        .collect()
}

/// Dense analytic map of the terrain in `frame`, sampled at cell centers.
/// Cells falling outside the terrain extent stay masked out.
pub fn ground_truth_bev(spec: &TerrainSpec, frame: &LocalFrame, geometry: &GridGeometry) -> BevGrid {
    let mut grid = BevGrid::zeros(*geometry);
    for row in 0..geometry.rows() {
        for col in 0..geometry.cols() {
            let (lx, ly) = geometry.cell_center(row, col);
            let g = frame.to_global(&Vec3::new(lx, ly, 0.0));
            if !spec.contains(g.x, g.y) {
                continue;
            }
            let h = spec.height(g.x, g.y);
            let rgb = spec.texture(g.x, g.y, h);
            grid.set(Channel::R, row, col, rgb[0] as f32 / 255.0);
            grid.set(Channel::G, row, col, rgb[1] as f32 / 255.0);
            grid.set(Channel::B, row, col, rgb[2] as f32 / 255.0);
            grid.set(Channel::Height, row, col, (h - frame.origin.z) as f32);
            grid.set(Channel::MaskRgb, row, col, 1.0);
            grid.set(Channel::MaskHeight, row, col, 1.0);
        }
    }
    grid
}

/// Drive path over the terrain: constant curvature from a start pose, with the
/// body following the local terrain slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub start: (f64, f64),
    pub heading: f64,
    /// Arc length between frames, meters.
    pub step: f64,
    pub frames: usize,
    /// Heading change per meter, rad/m.
    pub curvature: f64,
    /// Time between frames, seconds.
    pub dt: f64,
    pub start_time: f64,
    /// Sensor height above the ground, meters.
    pub mount_height: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            start: (0.0, 0.0),
            heading: 0.0,
            step: 1.0,
            frames: 10,
            curvature: 0.0,
            dt: 0.1,
            start_time: 0.0,
            mount_height: 1.5,
        }
    }
}

impl TrajectorySpec {
    /// Body pose after traveling arc length `s`.
    pub fn pose_at(&self, terrain: &TerrainSpec, s: f64) -> Result<Pose> {
        let k = self.curvature;
        let (x0, y0) = self.start;
        let yaw = self.heading + k * s;
        let (x, y) = if k.abs() < 1e-12 {
            (x0 + s * self.heading.cos(), y0 + s * self.heading.sin())
        } else {
            (x0 + (yaw.sin() - self.heading.sin()) / k, y0 - (yaw.cos() - self.heading.cos()) / k)
        };
        let h = terrain.sample_height(x, y)?;
        let (gx, gy) = terrain.gradient(x, y);
        let (sy, cy) = yaw.sin_cos();
        let slope_fwd = gx * cy + gy * sy;
        let slope_lat = -gx * sy + gy * cy;
        let stamp = self.start_time + s / self.step * self.dt;
        Ok(Pose::from_ypr(stamp, Vec3::new(x, y, h + self.mount_height), yaw, -slope_fwd.atan(), slope_lat.atan()))
    }

    pub fn poses(&self, terrain: &TerrainSpec) -> Result<Vec<Pose>> {
        (0..self.frames).map(|i| self.pose_at(terrain, i as f64 * self.step)).collect()
    }

    /// Poses half a step after each frame, for a second sensor interleaved in time.
    pub fn midpoint_poses(&self, terrain: &TerrainSpec) -> Result<Vec<Pose>> {
        (0..self.frames).map(|i| self.pose_at(terrain, (i as f64 + 0.5) * self.step)).collect()
    }
}

/// Full configuration of the `synth` command.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub terrain: TerrainSpec,
    pub noise: NoiseModel,
    pub stereo: Option<FovParams>,
    pub lidar: Option<FovParams>,
    pub trajectory: TrajectorySpec,
    pub runs: usize,
    /// Lateral offset between the start points of consecutive runs, meters.
    pub run_spacing: f64,
    pub geometry: GridGeometry,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let terrain = TerrainSpec::default();
        Self {
            seed: 0,
            trajectory: TrajectorySpec { start: (-0.5 * terrain.extent.0 + 10.0, 0.0), ..Default::default() },
            terrain,
            noise: NoiseModel::noiseless(),
            stereo: Some(FovParams {
                kind: SensorKind::Stereo,
                range_min: 1.0,
                range_max: 30.0,
                half_angle: 50f64.to_radians(),
                spacing: 0.1,
            }),
            lidar: Some(FovParams {
                kind: SensorKind::Lidar,
                range_min: 1.0,
                range_max: 32.0,
                half_angle: 60f64.to_radians(),
                spacing: 0.15,
            }),
            runs: 1,
            run_spacing: 20.0,
            geometry: GridGeometry::new(12.0, 30.0, 0.1).expect("integral"),
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "seed",
    "terrain.seed",
    "terrain.harmonics",
    "terrain.noise_amplitude",
    "terrain.noise_scale",
    "terrain.texture_seed",
    "terrain.texture_scale",
    "terrain.texture_amplitude",
    "terrain.height_tint",
    "terrain.extent",
    "noise.sigma0",
    "noise.quad",
    "noise.keep_slope",
    "noise.keep_min",
    "noise.rgb_sigma",
    "stereo.enabled",
    "stereo.range_min",
    "stereo.range_max",
    "stereo.half_angle_deg",
    "stereo.spacing",
    "lidar.enabled",
    "lidar.range_min",
    "lidar.range_max",
    "lidar.half_angle_deg",
    "lidar.spacing",
    "traj.start",
    "traj.heading_deg",
    "traj.step",
    "traj.frames",
    "traj.curvature",
    "traj.dt",
    "traj.mount_height",
    "traj.runs",
    "traj.run_spacing",
    "grid.extent",
    "grid.resolution",
];

fn parse_harmonics(s: &str) -> Result<Vec<Harmonic>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty() && *t != "none")
        .map(|t| {
            let v: Vec<f64> = t
                .split(':')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad harmonic '{t}'")))?;
            match v.as_slice() {
                [a, l, p] => Ok(Harmonic { amplitude: *a, wavelength: *l, phase: *p, direction: 0.0 }),
                [a, l, p, d] => Ok(Harmonic { amplitude: *a, wavelength: *l, phase: *p, direction: d.to_radians() }),
                _ => Err(Error::Config(format!("harmonic '{t}' needs amp:wavelength:phase[:direction_deg]"))),
            }
        })
        .collect()
}

fn fmt_harmonics(hs: &[Harmonic]) -> String {
    if hs.is_empty() {
        return "none".into();
    }
    hs.iter()
        .map(|h| format!("{}:{}:{}:{}", h.amplitude, h.wavelength, h.phase, h.direction.to_degrees()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fov_from_kv(kv: &KvConfig, prefix: &str, default: Option<FovParams>) -> Result<Option<FovParams>> {
    let base = default.expect("defaults define both sensors");
    if !kv.get_or(&format!("{prefix}.enabled"), true)? {
        return Ok(None);
    }
    let fov = FovParams {
        kind: base.kind,
        range_min: kv.get_or(&format!("{prefix}.range_min"), base.range_min)?,
        range_max: kv.get_or(&format!("{prefix}.range_max"), base.range_max)?,
        half_angle: kv.get_or(&format!("{prefix}.half_angle_deg"), base.half_angle.to_degrees())?.to_radians(),
        spacing: kv.get_or(&format!("{prefix}.spacing"), base.spacing)?,
    };
    fov.validate()?;
    Ok(Some(fov))
}

impl SynthConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(SYNTH_KEYS)?;
        let d = SynthConfig::default();
        let seed = kv.get_or("seed", d.seed)?;
        let extent = match kv.get_str("terrain.extent") {
            Some(s) => parse_pair(s)?,
            None => d.terrain.extent,
        };
        let terrain = TerrainSpec {
            seed: kv.get_or("terrain.seed", seed)?,
            harmonics: match kv.get_str("terrain.harmonics") {
                Some(s) => parse_harmonics(s)?,
                None => d.terrain.harmonics.clone(),
            },
            noise_amplitude: kv.get_or("terrain.noise_amplitude", d.terrain.noise_amplitude)?,
            noise_scale: kv.get_or("terrain.noise_scale", d.terrain.noise_scale)?,
            texture_seed: kv.get_or("terrain.texture_seed", seed.wrapping_add(1))?,
            texture_scale: kv.get_or("terrain.texture_scale", d.terrain.texture_scale)?,
            texture_amplitude: kv.get_or("terrain.texture_amplitude", d.terrain.texture_amplitude)?,
            height_tint: kv.get_or("terrain.height_tint", d.terrain.height_tint)?,
            extent,
        };
        let rgb_sigma = match kv.get::<f64>("noise.rgb_sigma")? {
            Some(s) => [s; 3],
            None => d.noise.rgb_sigma,
        };
        let noise = NoiseModel {
            sigma0: kv.get_or("noise.sigma0", d.noise.sigma0)?,
            quad_coeff: kv.get_or("noise.quad", d.noise.quad_coeff)?,
            keep_slope: kv.get_or("noise.keep_slope", d.noise.keep_slope)?,
            keep_min: kv.get_or("noise.keep_min", d.noise.keep_min)?,
            rgb_sigma,
        };
        noise.validate()?;
        let start = match kv.get_str("traj.start") {
            Some(s) => parse_pair(s)?,
            None => (-0.5 * extent.0 + 10.0, 0.0),
        };
        let trajectory = TrajectorySpec {
            start,
            heading: kv.get_or("traj.heading_deg", 0.0f64)?.to_radians(),
            step: kv.get_or("traj.step", d.trajectory.step)?,
            frames: kv.get_or("traj.frames", d.trajectory.frames)?,
            curvature: kv.get_or("traj.curvature", d.trajectory.curvature)?,
            dt: kv.get_or("traj.dt", d.trajectory.dt)?,
            start_time: 0.0,
            mount_height: kv.get_or("traj.mount_height", d.trajectory.mount_height)?,
        };
        let (lat, fwd) = match kv.get_str("grid.extent") {
            Some(s) => parse_pair(s)?,
            None => (d.geometry.lateral(), d.geometry.forward()),
        };
        let geometry = GridGeometry::new(lat, fwd, kv.get_or("grid.resolution", d.geometry.resolution())?)?;
        let cfg = SynthConfig {
            seed,
            terrain,
            noise,
            stereo: fov_from_kv(kv, "stereo", d.stereo)?,
            lidar: fov_from_kv(kv, "lidar", d.lidar)?,
            trajectory,
            runs: kv.get_or("traj.runs", d.runs)?,
            run_spacing: kv.get_or("traj.run_spacing", d.run_spacing)?,
            geometry,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective configuration in the same `key = value` form `from_kv` accepts.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        kv.set("terrain.seed", self.terrain.seed);
        kv.set("terrain.harmonics", fmt_harmonics(&self.terrain.harmonics));
        kv.set("terrain.noise_amplitude", self.terrain.noise_amplitude);
        kv.set("terrain.noise_scale", self.terrain.noise_scale);
        kv.set("terrain.texture_seed", self.terrain.texture_seed);
        kv.set("terrain.texture_scale", self.terrain.texture_scale);
        kv.set("terrain.texture_amplitude", self.terrain.texture_amplitude);
        kv.set("terrain.height_tint", self.terrain.height_tint);
        kv.set("terrain.extent", format!("{}x{}", self.terrain.extent.0, self.terrain.extent.1));
        kv.set("noise.sigma0", self.noise.sigma0);
        kv.set("noise.quad", self.noise.quad_coeff);
        kv.set("noise.keep_slope", self.noise.keep_slope);
        kv.set("noise.keep_min", self.noise.keep_min);
        kv.set("noise.rgb_sigma", self.noise.rgb_sigma[0]);
        for (prefix, fov) in [("stereo", &self.stereo), ("lidar", &self.lidar)] {
            kv.set(format!("{prefix}.enabled"), fov.is_some());
            if let Some(f) = fov {
                kv.set(format!("{prefix}.range_min"), f.range_min);
                kv.set(format!("{prefix}.range_max"), f.range_max);
                kv.set(format!("{prefix}.half_angle_deg"), f.half_angle.to_degrees());
                kv.set(format!("{prefix}.spacing"), f.spacing);
            }
        }
        let t = &self.trajectory;
        kv.set("traj.start", format!("{}x{}", t.start.0, t.start.1));
        kv.set("traj.heading_deg", t.heading.to_degrees());
        kv.set("traj.step", t.step);
        kv.set("traj.frames", t.frames);
        kv.set("traj.curvature", t.curvature);
        kv.set("traj.dt", t.dt);
        kv.set("traj.mount_height", t.mount_height);
        kv.set("traj.runs", self.runs);
        kv.set("traj.run_spacing", self.run_spacing);
        kv.set("grid.extent", format!("{}x{}", self.geometry.lateral(), self.geometry.forward()));
        kv.set("grid.resolution", self.geometry.resolution());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.terrain.validate(self.geometry.resolution())?;
        self.noise.validate()?;
        if self.stereo.is_none() && self.lidar.is_none() {
            return Err(Error::Config("at least one sensor must be enabled".into()));
        }
        if self.runs == 0 || self.trajectory.frames == 0 {
            return Err(Error::Config("runs and frames must be >= 1".into()));
        }
        if !(self.trajectory.step > 0.0 && self.trajectory.dt > 0.0 && self.trajectory.mount_height >= 0.0) {
            return Err(Error::Config("trajectory step/dt must be > 0 and mount height >= 0".into()));
        }
        Ok(())
    }

    /// Trajectory of run `r`: runs start on parallel lanes `run_spacing` apart.
    pub fn run_trajectory(&self, r: usize) -> TrajectorySpec {
        let (sx, sy) = self.trajectory.start;
        let (s, c) = self.trajectory.heading.sin_cos();
        let off = r as f64 * self.run_spacing;
        TrajectorySpec { start: (sx - s * off, sy + c * off), start_time: r as f64 * 1000.0, ..self.trajectory }
    }

    pub fn run_id(r: usize) -> String {
        format!("run{r:03}")
    }

    /// Simulated scans of run `r`, stereo first then lidar, each in stamp order.
    pub fn simulate_run(&self, r: usize) -> Result<Vec<ScanFrame>> {
        let traj = self.run_trajectory(r);
        let seed = mix64(self.seed ^ mix64(r as u64 + 0x5EED));
        let mut scans = Vec::new();
        if let Some(fov) = &self.stereo {
            scans.extend(simulate_sweep(&self.terrain, &self.noise, &traj.poses(&self.terrain)?, fov, seed)?);
        }
        if let Some(fov) = &self.lidar {
            let poses = traj.midpoint_poses(&self.terrain)?;
            scans.extend(simulate_sweep(&self.terrain, &self.noise, &poses, fov, seed)?);
        }
        Ok(scans)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub scans: usize,
    pub points: usize,
    pub ground_truth: Vec<PathBuf>,
}

/// Writes `manifest`, `scans/*.dbf1` and per-frame ground-truth grids `gt/<run>_<frame>.dbg1`.
///
/// Frames are the stereo scans when a stereo sensor is enabled, otherwise the lidar scans.
pub fn write_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let scans_dir = out_dir.join("scans");
    let gt_dir = out_dir.join("gt");
    for d in [out_dir, &scans_dir, &gt_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = TrajectoryManifest::new(&cfg.geometry, cfg.trajectory.mount_height, out_dir);
    let mut summary = SynthSummary { manifest: out_dir.join("manifest"), scans: 0, points: 0, ground_truth: vec![] };
    let frame_kind = if cfg.stereo.is_some() { SensorKind::Stereo } else { SensorKind::Lidar };
    for r in 0..cfg.runs {
        let run = SynthConfig::run_id(r);
        let scans = cfg.simulate_run(r)?;
        let mut frame_idx = 0;
        let mut counters = [0usize; 2];
        for scan in &scans {
            let k = scan.kind.code() as usize;
            let name = format!("scans/{run}_{}_{:06}.dbf1", scan.kind.name(), counters[k]);
            counters[k] += 1;
            write_scan(scan, out_dir.join(&name))?;
            manifest.entries.push(ManifestEntry {
                run: run.clone(),
                kind: scan.kind,
                stamp: scan.stamp(),
                path: name.into(),
            });
            summary.scans += 1;
            summary.points += scan.points.len();
            if scan.kind == frame_kind {
                let frame = crate::geom::derive_local_frame(&scan.pose, cfg.trajectory.mount_height)?;
                let gt = ground_truth_bev(&cfg.terrain, &frame, &cfg.geometry);
                let path = gt_dir.join(format!("{run}_{frame_idx:06}.dbg1"));
                write_bev(&gt, &path)?;
                summary.ground_truth.push(path);
                frame_idx += 1;
            }
        }
    }
    manifest.save(&summary.manifest)?;
    std::fs::write(out_dir.join("synth.cfg"), cfg.to_kv().to_text()).map_err(|e| Error::io(out_dir, e))?;
    Ok(summary)
}
