//! Registration of scans into per-cell candidate lists and their attribution
//! into BEV grids.
//!
//! Every candidate carries a content-derived 64-bit key. Before reduction a
//! cell's candidates are sorted by `(key, ego distance, value)`, which fixes
//! both the closest-point tie-break and the floating-point summation order, so
//! the grid is bit-identical under any reordering of scans or points.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{LocalFrame, Vec3};
use crate::grid::{BevGrid, Channel, GridGeometry, Group, NUM_CHANNELS};
use crate::io::{PointRecord, ScanFrame, SensorKind};
use crate::mix64;

/// Ego distances below this are rejected by inverse-distance weighting.
pub const MIN_EGO_DIST: f64 = 1e-9;

/// One candidate for a cell: an `N`-component value, the ego distance of the
/// point that produced it, and a stable identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<const N: usize> {
    pub value: [f32; N],
    pub ego_dist: f32,
    pub key: u64,
}

impl<const N: usize> Candidate<N> {
    pub fn new(value: [f32; N], ego_dist: f32, key: u64) -> Self {
        Self { value, ego_dist, key }
    }

    fn sort_key(&self) -> (u64, u32, [u32; N]) {
        (self.key, self.ego_dist.to_bits(), self.value.map(f32::to_bits))
    }
}

pub type RgbCandidate = Candidate<3>;
pub type HeightCandidate = Candidate<1>;

/// Sorts candidates into the canonical reduction order.
pub fn canonical_order<const N: usize>(cands: &mut [Candidate<N>]) {
    cands.sort_unstable_by_key(Candidate::sort_key);
}

/// Unweighted mean of the candidate values.
pub fn attribute_mean<const N: usize>(cands: &[Candidate<N>]) -> Result<[f64; N]> {
    if cands.is_empty() {
        return Err(Error::EmptyCell);
    }
    let mut acc = [0.0f64; N];
    for c in cands {
        for (a, v) in acc.iter_mut().zip(c.value) {
            *a += v as f64;
        }
    }
    let n = cands.len() as f64;
    Ok(acc.map(|a| a / n))
}

/// Normalized inverse-ego-distance weights `(1/dᵢ) / Σⱼ (1/dⱼ)`.
pub fn idw_weights<const N: usize>(cands: &[Candidate<N>]) -> Result<Vec<f64>> {
    if cands.is_empty() {
        return Err(Error::EmptyCell);
    }
    let mut inv = Vec::with_capacity(cands.len());
    for c in cands {
        let d = c.ego_dist as f64;
        if !(d >= MIN_EGO_DIST) {
            return Err(Error::DegenerateDistance(d));
        }
        inv.push(1.0 / d);
    }
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}

/// Inverse-ego-distance weighted mean.
pub fn attribute_idw<const N: usize>(cands: &[Candidate<N>]) -> Result<[f64; N]> {
    let weights = idw_weights(cands)?;
    let mut acc = [0.0f64; N];
    for (c, w) in cands.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(c.value) {
            *a += w * v as f64;
        }
    }
    Ok(acc)
}

/// Value of the candidate with the smallest ego distance; ties go to the smaller key.
pub fn attribute_closest<const N: usize>(cands: &[Candidate<N>]) -> Result<[f64; N]> {
    let best = cands
        .iter()
        .min_by(|a, b| a.ego_dist.total_cmp(&b.ego_dist).then_with(|| a.sort_key().cmp(&b.sort_key())))
        .ok_or(Error::EmptyCell)?;
    Ok(best.value.map(f64::from))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Mean,
    Idw,
    Closest,
}

impl Strategy {
    pub fn apply<const N: usize>(self, cands: &[Candidate<N>]) -> Result<[f64; N]> {
        match self {
            Strategy::Mean => attribute_mean(cands),
            Strategy::Idw => attribute_idw(cands),
            Strategy::Closest => attribute_closest(cands),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mean => "mean",
            Strategy::Idw => "idw",
            Strategy::Closest => "closest",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Strategy::Mean),
            "idw" => Ok(Strategy::Idw),
            "closest" => Ok(Strategy::Closest),
            other => Err(Error::Config(format!("unknown attribution strategy '{other}'"))),
        }
    }
}

/// Attribution strategy per channel group. Defaults to closest-point color and
/// inverse-distance weighted height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RasterPolicy {
    pub rgb: Strategy,
    pub height: Strategy,
}

impl Default for RasterPolicy {
    fn default() -> Self {
        Self { rgb: Strategy::Closest, height: Strategy::Idw }
    }
}

impl RasterPolicy {
    pub fn uniform(s: Strategy) -> Self {
        Self { rgb: s, height: s }
    }
}

impl fmt::Display for RasterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rgb={},height={}", self.rgb.name(), self.height.name())
    }
}

/// Parses `rgb=closest,height=idw`; omitted groups keep their defaults.
impl FromStr for RasterPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = RasterPolicy::default();
        for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match part.split_once('=') {
                Some(("rgb", v)) => p.rgb = v.parse()?,
                Some(("height", v)) => p.height = v.parse()?,
                _ => return Err(Error::Config(format!("bad policy component '{part}'"))),
            }
        }
        Ok(p)
    }
}

/// A point already registered into the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisteredPoint {
    pub global: Vec3,
    pub kind: SensorKind,
    pub rgb: Option<[u8; 3]>,
    pub ego_dist: f32,
    pub stamp: f64,
    pub key: u64,
}

/// Content hash identifying a point independently of its position in any sequence.
pub fn point_key(stamp: f64, kind: SensorKind, p: &PointRecord) -> u64 {
    let mut h = mix64(stamp.to_bits() ^ ((kind.code() as u64) << 60));
    for v in p.xyz {
        h = mix64(h ^ v.to_bits() as u64);
    }
    h = mix64(h ^ p.ego_dist.to_bits() as u64);
    if let Some([r, g, b]) = p.rgb {
        h = mix64(h ^ u64::from_le_bytes([r, g, b, 1, 0, 0, 0, 0]));
    }
    h
}

impl RegisteredPoint {
    pub fn from_scan_point(scan: &ScanFrame, p: &PointRecord) -> Self {
        let sensor = Vec3::new(p.xyz[0] as f64, p.xyz[1] as f64, p.xyz[2] as f64);
        Self {
            global: scan.pose.transform_point(&sensor),
            kind: scan.kind,
            rgb: p.rgb,
            ego_dist: p.ego_dist,
            stamp: scan.stamp(),
            key: point_key(scan.stamp(), scan.kind, p),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccumStats {
    pub rgb_candidates: u64,
    pub height_candidates: u64,
    pub out_of_extent: u64,
    pub degenerate: u64,
}

/// Per-cell candidate lists for one local frame.
#[derive(Debug, Clone)]
pub struct Accumulation {
    geometry: GridGeometry,
    stereo_feeds_height: bool,
    rgb: HashMap<u32, Vec<RgbCandidate>>,
    height: HashMap<u32, Vec<HeightCandidate>>,
    stats: AccumStats,
}

impl Accumulation {
    pub fn new(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            stereo_feeds_height: false,
            rgb: HashMap::new(),
            height: HashMap::new(),
            stats: AccumStats::default(),
        }
    }

    /// Lets stereo points also contribute height candidates.
    pub fn with_stereo_height(mut self, enabled: bool) -> Self {
        self.stereo_feeds_height = enabled;
        self
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn stats(&self) -> AccumStats {
        self.stats
    }

    /// Registers every point of `scan` and bins it in `frame`.
    pub fn accumulate(&mut self, scan: &ScanFrame, frame: &LocalFrame) {
        for p in &scan.points {
            self.insert(&RegisteredPoint::from_scan_point(scan, p), frame);
        }
    }

    /// Bins one registered point; returns whether it landed in the extent.
    pub fn insert(&mut self, p: &RegisteredPoint, frame: &LocalFrame) -> bool {
        if !(p.ego_dist as f64 >= MIN_EGO_DIST) {
            self.stats.degenerate += 1;
            return false;
        }
        let local = frame.to_local(&p.global);
        let Some(cell) = self.geometry.cell_index(local.x, local.y) else {
            self.stats.out_of_extent += 1;
            return false;
        };
        let feeds_height = match p.kind {
            SensorKind::Lidar => true,
            SensorKind::Stereo => self.stereo_feeds_height,
        };
        if let Some(rgb) = p.rgb {
            let value = rgb.map(|c| c as f32 / 255.0);
            self.rgb.entry(cell).or_default().push(Candidate::new(value, p.ego_dist, p.key));
            self.stats.rgb_candidates += 1;
        }
        if feeds_height {
            self.height.entry(cell).or_default().push(Candidate::new([local.z as f32], p.ego_dist, p.key));
            self.stats.height_candidates += 1;
        }
        true
    }

    pub fn rgb_candidates(&self, cell: u32) -> &[RgbCandidate] {
        self.rgb.get(&cell).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn height_candidates(&self, cell: u32) -> &[HeightCandidate] {
        self.height.get(&cell).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rgb_cells(&self) -> impl Iterator<Item = (u32, &[RgbCandidate])> {
        self.rgb.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn height_cells(&self) -> impl Iterator<Item = (u32, &[HeightCandidate])> {
        self.height.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Dense per-cell candidate counts for one group.
    pub fn counts(&self, group: Group) -> Vec<u32> {
        let mut out = vec![0u32; self.geometry.cells()];
        match group {
            Group::Rgb => self.rgb.iter().for_each(|(k, v)| out[*k as usize] = v.len() as u32),
            Group::Height => self.height.iter().for_each(|(k, v)| out[*k as usize] = v.len() as u32),
        }
        out
    }

    /// Same multiset of candidates per cell, irrespective of insertion order.
    pub fn same_content(&self, other: &Accumulation) -> bool {
        fn norm<const N: usize>(m: &HashMap<u32, Vec<Candidate<N>>>) -> Vec<(u32, Vec<(u64, u32, [u32; N])>)> {
            let mut v: Vec<_> = m
                .iter()
                .map(|(k, c)| {
                    let mut keys: Vec<_> = c.iter().map(Candidate::sort_key).collect();
                    keys.sort_unstable();
                    (*k, keys)
                })
                .collect();
            v.sort_unstable_by_key(|e| e.0);
            v
        }
        self.geometry == other.geometry
            && norm(&self.rgb) == norm(&other.rgb)
            && norm(&self.height) == norm(&other.height)
    }
}

struct Scratch {
    rgb: Vec<RgbCandidate>,
    height: Vec<HeightCandidate>,
}

fn reduce<const N: usize>(
    strategy: Strategy,
    cands: &[Candidate<N>],
    scratch: &mut Vec<Candidate<N>>,
) -> Option<[f64; N]> {
    if cands.is_empty() {
        return None;
    }
    scratch.clear();
    scratch.extend_from_slice(cands);
    canonical_order(scratch);
    // Candidates are admitted only with ego distance >= MIN_EGO_DIST, so
    // attribution of a non-empty cell cannot fail.
    strategy.apply(scratch).ok()
}

/// Rasterizes an accumulation. Row bands are processed in parallel; each cell
/// is reduced independently, so the result does not depend on the worker count.
pub fn rasterize(acc: &Accumulation, policy: &RasterPolicy) -> BevGrid {
    let g = acc.geometry;
    let cols = g.cols();
    let rows: Vec<Vec<[f32; NUM_CHANNELS]>> = (0..g.rows())
        .into_par_iter()
        .map_init(
            || Scratch { rgb: Vec::new(), height: Vec::new() },
            |scratch, row| {
                (0..cols)
                    .map(|col| {
                        let cell = (row * cols + col) as u32;
                        let mut px = [0.0f32; NUM_CHANNELS];
                        if let Some(v) = reduce(policy.rgb, acc.rgb_candidates(cell), &mut scratch.rgb) {
                            px[Channel::R.index()] = v[0] as f32;
                            px[Channel::G.index()] = v[1] as f32;
                            px[Channel::B.index()] = v[2] as f32;
                            px[Channel::MaskRgb.index()] = 1.0;
                        }
                        if let Some(v) = reduce(policy.height, acc.height_candidates(cell), &mut scratch.height) {
                            px[Channel::Height.index()] = v[0] as f32;
                            px[Channel::MaskHeight.index()] = 1.0;
                        }
                        px
                    })
                    .collect()
            },
        )
        .collect();

    let mut grid = BevGrid::zeros(g);
    for ch in Channel::ALL {
        let plane = grid.plane_mut(ch);
        for (r, row) in rows.iter().enumerate() {
            for (c, px) in row.iter().enumerate() {
                plane[r * cols + c] = px[ch.index()];
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c1(v: f32, d: f32, key: u64) -> HeightCandidate {
        Candidate::new([v], d, key)
    }

    fn random_cands(rng: &mut ChaCha8Rng, n: usize) -> Vec<RgbCandidate> {
        (0..n)
            .map(|i| Candidate::new([rng.random(), rng.random(), rng.random()], rng.random_range(0.5..40.0), i as u64))
            .collect()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(attribute_mean(&[c1(0.7, 1.0, 0)]).unwrap(), [0.7f32 as f64]);
        assert_eq!(attribute_mean(&[c1(2.0, 1.0, 0), c1(6.0, 2.0, 1)]).unwrap(), [4.0]);
        assert!(matches!(attribute_mean::<1>(&[]), Err(Error::EmptyCell)));
    }

    #[test]
    fn mean_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands = random_cands(&mut rng, 32);
        let got = attribute_mean(&cands).unwrap();
        for k in 0..3 {
            let mut s = 0.0;
            let mut i = 0;
            while i < cands.len() {
                s += cands[i].value[k] as f64;
                i += 1;
            }
            assert!((got[k] - s / 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idw_examples() {
        let cands = [c1(2.0, 1.0, 0), c1(6.0, 3.0, 1)];
        let w = idw_weights(&cands).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!((attribute_idw(&cands).unwrap()[0] - 3.0).abs() < 1e-12);
        assert_eq!(attribute_idw(&[c1(5.0, 2.0, 0)]).unwrap(), [5.0]);
        assert_eq!(idw_weights(&[c1(5.0, 2.0, 0)]).unwrap(), vec![1.0]);
        assert!(matches!(attribute_idw(&[c1(1.0, 0.0, 0)]), Err(Error::DegenerateDistance(_))));
        assert!(matches!(attribute_idw::<1>(&[]), Err(Error::EmptyCell)));
    }

    #[test]
    fn idw_equals_mean_for_equal_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cands = random_cands(&mut rng, 17);
        cands.iter_mut().for_each(|c| c.ego_dist = 4.25);
        let (a, b) = (attribute_idw(&cands).unwrap(), attribute_mean(&cands).unwrap());
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn closest_examples() {
        let cands = [Candidate::new([0.2, 0.3, 0.4], 5.0, 0), Candidate::new([0.9, 0.1, 0.1], 2.0, 1)];
        assert_eq!(attribute_closest(&cands).unwrap(), [0.9f32, 0.1, 0.1].map(f64::from));
        let tie = [c1(1.0, 2.0, 7), c1(3.0, 2.0, 3)];
        assert_eq!(attribute_closest(&tie).unwrap(), [3.0]);
        assert!(matches!(attribute_closest::<1>(&[]), Err(Error::EmptyCell)));
    }

    #[test]
    fn closest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cands = random_cands(&mut rng, 32);
        let mut best = 0;
        for i in 1..cands.len() {
            if cands[i].ego_dist < cands[best].ego_dist {
                best = i;
            }
        }
        assert_eq!(attribute_closest(&cands).unwrap(), cands[best].value.map(f64::from));
    }

    #[test]
    fn policy_parsing() {
        let p: RasterPolicy = "rgb=mean,height=closest".parse().unwrap();
        assert_eq!(p, RasterPolicy { rgb: Strategy::Mean, height: Strategy::Closest });
        assert_eq!("".parse::<RasterPolicy>().unwrap(), RasterPolicy::default());
        assert_eq!(p.to_string().parse::<RasterPolicy>().unwrap(), p);
        assert!("rgb=median".parse::<RasterPolicy>().is_err());
    }

    fn geom() -> GridGeometry {
        GridGeometry::standard()
    }

    fn stereo_at_local(x: f32, y: f32, z: f32) -> ScanFrame {
        ScanFrame::new(SensorKind::Stereo, Pose::identity(), vec![PointRecord::new([x, y, z], Some([10, 20, 30]))])
    }

    #[test]
    fn empty_scan_leaves_accumulation_unchanged() {
        let mut acc = Accumulation::new(geom());
        let frame = LocalFrame::new(Vec3::zeros(), 0.0);
        acc.accumulate(&ScanFrame::new(SensorKind::Lidar, Pose::identity(), vec![]), &frame);
        assert_eq!(acc.stats(), AccumStats::default());
        assert!(acc.rgb_cells().next().is_none());
    }

    #[test]
    fn point_lands_in_expected_cell() {
        let mut acc = Accumulation::new(geom());
        acc.accumulate(&stereo_at_local(0.05, -5.99, 0.3), &LocalFrame::new(Vec3::zeros(), 0.0));
        let (x, y) = (0.05f32 as f64, -5.99f32 as f64);
        let row = ((y + 6.0) / 0.02).floor() as u32;
        let col = (x / 0.02).floor() as u32;
        assert_eq!((row, col), (0, 2));
        assert_eq!(acc.rgb_candidates(row * 1500 + col).len(), 1);
        // Stereo does not feed height unless enabled.
        assert_eq!(acc.stats().height_candidates, 0);
    }

    #[test]
    fn forward_boundary_is_excluded() {
        let mut acc = Accumulation::new(geom());
        acc.accumulate(&stereo_at_local(30.0, 0.0, 0.0), &LocalFrame::new(Vec3::zeros(), 0.0));
        assert_eq!(acc.stats().out_of_extent, 1);
        assert_eq!(acc.stats().rgb_candidates, 0);
    }

    #[test]
    fn stereo_height_flag() {
        let mut acc = Accumulation::new(geom()).with_stereo_height(true);
        acc.accumulate(&stereo_at_local(1.0, 0.0, 0.25), &LocalFrame::new(Vec3::zeros(), 0.0));
        let grid = rasterize(&acc, &RasterPolicy::default());
        let (r, c) = geom().cell_of(1.0, 0.0).unwrap();
        assert_eq!(grid.get(Channel::Height, r, c), 0.25);
        assert_eq!(grid.get(Channel::MaskHeight, r, c), 1.0);
    }

    #[test]
    fn empty_accumulation_rasterizes_to_zeros() {
        let grid = rasterize(&Accumulation::new(GridGeometry::new(2.0, 3.0, 0.1).unwrap()), &RasterPolicy::default());
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    fn random_scans(seed: u64) -> Vec<ScanFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|i| {
                let kind = if i % 2 == 0 { SensorKind::Stereo } else { SensorKind::Lidar };
                let pose = Pose::from_ypr(
                    i as f64,
                    Vec3::new(rng.random_range(-1.0..1.0), 0.0, 1.0),
                    0.05 * i as f64,
                    0.0,
                    0.0,
                );
                let points = (0..3000)
                    .map(|_| {
                        let xyz = [rng.random_range(0.5..8.0f32), rng.random_range(-2.0..2.0f32), -1.0f32];
                        PointRecord::new(
                            xyz,
                            (kind == SensorKind::Stereo).then(|| [rng.random(), rng.random(), rng.random()]),
                        )
                    })
                    .collect();
                ScanFrame::new(kind, pose, points)
            })
            .collect()
    }

    #[test]
    fn shuffled_input_gives_identical_grid() {
        let g = GridGeometry::new(4.0, 8.0, 0.1).unwrap();
        let frame = LocalFrame::new(Vec3::zeros(), 0.0);
        let scans = random_scans(5);
        let mut base = Accumulation::new(g);
        scans.iter().for_each(|s| base.accumulate(s, &frame));

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut shuffled = scans.clone();
        shuffled.shuffle(&mut rng);
        shuffled.iter_mut().for_each(|s| s.points.shuffle(&mut rng));
        let mut other = Accumulation::new(g);
        shuffled.iter().for_each(|s| other.accumulate(s, &frame));

        for policy in
            [RasterPolicy::default(), RasterPolicy::uniform(Strategy::Mean), RasterPolicy::uniform(Strategy::Idw)]
        {
            let a = rasterize(&base, &policy);
            let b = rasterize(&other, &policy);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let g = GridGeometry::new(4.0, 8.0, 0.1).unwrap();
        let frame = LocalFrame::new(Vec3::zeros(), 0.0);
        let mut acc = Accumulation::new(g);
        random_scans(6).iter().for_each(|s| acc.accumulate(s, &frame));
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| rasterize(&acc, &RasterPolicy::default()))
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn coverage_never_decreases() {
        let g = GridGeometry::new(4.0, 8.0, 0.1).unwrap();
        let frame = LocalFrame::new(Vec3::zeros(), 0.0);
        let mut acc = Accumulation::new(g);
        let mut last = (0, 0);
        for s in random_scans(8) {
            acc.accumulate(&s, &frame);
            let grid = rasterize(&acc, &RasterPolicy::default());
            let cov = (grid.coverage(Group::Rgb), grid.coverage(Group::Height));
            assert!(cov.0 >= last.0 && cov.1 >= last.1);
            last = cov;
        }
        assert!(last.0 > 0 && last.1 > 0);
    }

    mod props {
        use super::{c1, idw_weights, HeightCandidate, Strategy as Attribution};
        use proptest::prelude::*;

        fn cands() -> impl Strategy<Value = Vec<HeightCandidate>> {
            proptest::collection::vec((-5.0f32..5.0, 0.01f32..50.0, any::<u64>()), 1..32)
                .prop_map(|v| v.into_iter().map(|(x, d, k)| c1(x, d, k)).collect())
        }

        proptest! {
            #[test]
            fn idw_weights_sum_to_one(c in cands()) {
                let s: f64 = idw_weights(&c).unwrap().iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn attribution_within_candidate_range(c in cands()) {
                let lo = c.iter().map(|c| c.value[0] as f64).fold(f64::INFINITY, f64::min);
                let hi = c.iter().map(|c| c.value[0] as f64).fold(f64::NEG_INFINITY, f64::max);
                for s in [Attribution::Mean, Attribution::Idw, Attribution::Closest] {
                    let v = s.apply(&c).unwrap()[0];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
