//! Metric raster geometry and the six-plane BEV grid.
//!
//! Rows index lateral `y ∈ [-lateral/2, +lateral/2)`, columns index forward
//! `x ∈ [0, forward)`, both with half-open cells and floor indexing.

use crate::error::{Error, Result};

/// Width of the reliable near-field band at the left of every map, in meters.
pub const PROXIMAL_BAND_M: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    lateral: f64,
    forward: f64,
    resolution: f64,
    rows: usize,
    cols: usize,
}

fn exact_count(extent: f64, resolution: f64, what: &str) -> Result<usize> {
    let n = extent / resolution;
    let rounded = n.round();
    if !(rounded >= 1.0) || (n - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::Config(format!(
            "{what} extent {extent} m is not an integral multiple of resolution {resolution} m"
        )));
    }
    Ok(rounded as usize)
}

impl GridGeometry {
    pub fn new(lateral: f64, forward: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !(lateral > 0.0) || !(forward > 0.0) {
            return Err(Error::Config(format!(
                "extent {lateral}x{forward} at resolution {resolution} must be positive"
            )));
        }
        let rows = exact_count(lateral, resolution, "lateral")?;
        let cols = exact_count(forward, resolution, "forward")?;
        Ok(Self { lateral, forward, resolution, rows, cols })
    }

    /// 12 m lateral by 30 m forward at 2 cm.
    pub fn standard() -> Self {
        Self::new(12.0, 30.0, 0.02).expect("standard geometry is integral")
    }

    pub fn lateral(&self) -> f64 {
        self.lateral
    }

    pub fn forward(&self) -> f64 {
        self.forward
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn x_min(&self) -> f64 {
        0.0
    }

    pub fn y_min(&self) -> f64 {
        -0.5 * self.lateral
    }

    /// `(row, col)` of the cell containing local `(x, y)`, or `None` outside the extent.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let dx = x - self.x_min();
        let dy = y - self.y_min();
        if !(dx >= 0.0 && dx < self.forward && dy >= 0.0 && dy < self.lateral) {
            return None;
        }
        let col = ((dx / self.resolution).floor() as usize).min(self.cols - 1);
        let row = ((dy / self.resolution).floor() as usize).min(self.rows - 1);
        Some((row, col))
    }

    #[inline]
    pub fn cell_index(&self, x: f64, y: f64) -> Option<u32> {
        self.cell_of(x, y).map(|(r, c)| (r * self.cols + c) as u32)
    }

    /// Local `(x, y)` of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.resolution + self.x_min(), (row as f64 + 0.5) * self.resolution + self.y_min())
    }

    /// Number of columns covering the first `PROXIMAL_BAND_M` meters.
    pub fn proximal_cols(&self) -> Result<usize> {
        exact_count(PROXIMAL_BAND_M, self.resolution, "proximal band")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
    Height = 3,
    MaskRgb = 4,
    MaskHeight = 5,
}

impl Channel {
    pub const ALL: [Channel; 6] =
        [Channel::R, Channel::G, Channel::B, Channel::Height, Channel::MaskRgb, Channel::MaskHeight];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const NUM_CHANNELS: usize = 6;

/// Channel groups that share a validity mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Rgb,
    Height,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Rgb, Group::Height];

    pub fn name(self) -> &'static str {
        match self {
            Group::Rgb => "rgb",
            Group::Height => "height",
        }
    }

    pub fn channels(self) -> &'static [Channel] {
        match self {
            Group::Rgb => &[Channel::R, Channel::G, Channel::B],
            Group::Height => &[Channel::Height],
        }
    }

    pub fn mask(self) -> Channel {
        match self {
            Group::Rgb => Channel::MaskRgb,
            Group::Height => Channel::MaskHeight,
        }
    }
}

/// Multi-channel BEV raster; planes are row-major and stored channel after channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    geometry: GridGeometry,
    data: Vec<f32>,
}

impl BevGrid {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self { geometry, data: vec![0.0; NUM_CHANNELS * geometry.cells()] }
    }

    pub fn from_data(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_CHANNELS * geometry.cells() {
            return Err(Error::Shape(format!(
                "grid payload has {} values, expected {}",
                data.len(),
                NUM_CHANNELS * geometry.cells()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, ch: Channel) -> &[f32] {
        let n = self.geometry.cells();
        &self.data[ch.index() * n..(ch.index() + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: Channel) -> &mut [f32] {
        let n = self.geometry.cells();
        &mut self.data[ch.index() * n..(ch.index() + 1) * n]
    }

    #[inline]
    pub fn get(&self, ch: Channel, row: usize, col: usize) -> f32 {
        self.data[ch.index() * self.geometry.cells() + row * self.geometry.cols + col]
    }

    #[inline]
    pub fn set(&mut self, ch: Channel, row: usize, col: usize, v: f32) {
        let n = self.geometry.cells();
        let cols = self.geometry.cols;
        self.data[ch.index() * n + row * cols + col] = v;
    }

    /// Number of cells whose mask for `group` is set.
    pub fn coverage(&self, group: Group) -> usize {
        self.plane(group.mask()).iter().filter(|&&m| m != 0.0).count()
    }

    /// Checks the grid invariants: binary masks, zero values under zero masks,
    /// colors in `[0, 1]` and finite heights.
    pub fn validate(&self) -> Result<()> {
        for group in Group::ALL {
            let mask = self.plane(group.mask());
            if let Some(bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
                return Err(Error::Shape(format!("{} mask holds non-binary value {bad}", group.name())));
            }
            for &ch in group.channels() {
                for (i, (&v, &m)) in self.plane(ch).iter().zip(mask).enumerate() {
                    let ok = if m == 0.0 {
                        v == 0.0
                    } else if group == Group::Rgb {
                        (0.0..=1.0).contains(&v)
                    } else {
                        v.is_finite()
                    };
                    if !ok {
                        return Err(Error::Shape(format!("channel {ch:?} cell {i} holds invalid value {v}")));
                    }
                }
            }
        }
        Ok(())
    }
}
