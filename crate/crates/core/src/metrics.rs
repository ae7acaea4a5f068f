//! Evaluation metrics: masked MAE, Gaussian-window SSIM and the Fréchet
//! distance between Gaussian fits of patch-statistics features.
//!
//! All metrics look at a prediction only where the label is valid; cells
//! outside the label mask are zeroed in both images before SSIM and feature
//! extraction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::dataset::IndexEntry;
use crate::error::{Error, Result};
use crate::grid::{BevGrid, Channel, Group};
use crate::io::read_bev;

pub const BANNER: &str = "patch-statistics features; NOT comparable to Inception-based FID";

/// Floor below which a negative eigenvalue or distance is treated as an error.
pub const NEGATIVE_FLOOR: f64 = -1e-8;

fn check_shapes(a: &BevGrid, b: &BevGrid) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!("grids are {}×{} and {}×{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(())
}

/// Sum of absolute errors over label-valid cells and the number of such cells.
pub fn abs_error_sum(pred: &BevGrid, label: &BevGrid, group: Group) -> Result<(f64, usize)> {
    check_shapes(pred, label)?;
    let mask = label.plane(group.mask());
    let cells = mask.iter().filter(|&&m| m != 0.0).count();
    let mut sum = 0.0;
    for &ch in group.channels() {
        let (p, l) = (pred.plane(ch), label.plane(ch));
        for k in 0..mask.len() {
            if mask[k] != 0.0 {
                sum += (p[k] as f64 - l[k] as f64).abs();
            }
        }
    }
    Ok((sum / group.channels().len() as f64, cells))
}

/// Mean absolute error over cells where the label mask is set.
pub fn mae(pred: &BevGrid, label: &BevGrid, group: Group) -> Result<f64> {
    let (sum, cells) = abs_error_sum(pred, label, group)?;
    if cells == 0 {
        return Err(Error::EmptyMask(group.name()));
    }
    Ok(sum / cells as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with `g` along both axes.
fn filter_valid(x: ArrayView2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = g.len();
    let mut tmp = Array2::<f64>::zeros((h, w + 1 - n));
    for ((i, j), v) in tmp.indexed_iter_mut() {
        *v = (0..n).map(|k| g[k] * x[[i, j + k]]).sum();
    }
    let mut out = Array2::<f64>::zeros((h + 1 - n, w + 1 - n));
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = (0..n).map(|k| g[k] * tmp[[i + k, j]]).sum();
    }
    out
}

/// Mean SSIM over all valid window positions of two single-channel images.
pub fn ssim_plane(x: ArrayView2<f64>, y: ArrayView2<f64>, p: &SsimParams) -> Result<f64> {
    let (h, w) = x.dim();
    if y.dim() != x.dim() {
        return Err(Error::Shape(format!("images are {:?} and {:?}", x.dim(), y.dim())));
    }
    if h < p.window || w < p.window || p.window == 0 {
        return Err(Error::Shape(format!("image {h}×{w} is smaller than the {} window", p.window)));
    }
    let g = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mx = filter_valid(x, &g);
    let my = filter_valid(y, &g);
    let xx = filter_valid((&x * &x).view(), &g);
    let yy = filter_valid((&y * &y).view(), &g);
    let xy = filter_valid((&x * &y).view(), &g);
    let mut total = 0.0;
    for k in 0..mx.len() {
        let (i, j) = (k / mx.ncols(), k % mx.ncols());
        let (a, b) = (mx[[i, j]], my[[i, j]]);
        let vx = xx[[i, j]] - a * a;
        let vy = yy[[i, j]] - b * b;
        let cxy = xy[[i, j]] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

fn masked_plane(grid: &BevGrid, ch: Channel, mask: &[f32]) -> Array2<f64> {
    let v = grid.plane(ch);
    Array2::from_shape_fn((grid.rows(), grid.cols()), |(i, j)| {
        let k = i * grid.cols() + j;
        if mask[k] != 0.0 {
            v[k] as f64
        } else {
            0.0
        }
    })
}

/// Min-max range of the label's valid height cells; `(0, 1)` if there are none.
fn height_range(label: &BevGrid) -> (f64, f64) {
    let mask = label.plane(Channel::MaskHeight);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, &h) in label.plane(Channel::Height).iter().enumerate() {
        if mask[k] != 0.0 {
            lo = lo.min(h as f64);
            hi = hi.max(h as f64);
        }
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// The planes of `group` as compared by SSIM and the feature extractor:
/// restricted to the label mask, height min-max normalized by the label.
pub fn comparison_planes(grid: &BevGrid, label: &BevGrid, group: Group) -> Vec<Array2<f64>> {
    let mask = label.plane(group.mask());
    let mut planes: Vec<Array2<f64>> = group.channels().iter().map(|&ch| masked_plane(grid, ch, mask)).collect();
    if group == Group::Height {
        let (lo, hi) = height_range(label);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for p in &mut planes {
            for (v, &m) in p.iter_mut().zip(mask) {
                if m != 0.0 {
                    *v = (*v - lo) / span;
                }
            }
        }
    }
    planes
}

/// SSIM of `pred` against `label` for one group, averaged over its channels.
pub fn ssim(pred: &BevGrid, label: &BevGrid, group: Group, p: &SsimParams) -> Result<f64> {
    check_shapes(pred, label)?;
    let a = comparison_planes(pred, label, group);
    let b = comparison_planes(label, label, group);
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        total += ssim_plane(x.view(), y.view(), p)?;
    }
    Ok(total / a.len() as f64)
}

/// Per non-overlapping `patch × patch` block, row-major: the mean of each
/// plane followed by its (population) standard deviation.
pub fn patch_features(planes: &[Array2<f64>], patch: usize) -> Result<Array2<f64>> {
    let Some(first) = planes.first() else {
        return Err(Error::Shape("no channels to extract features from".into()));
    };
    let (h, w) = first.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("grid {h}×{w} is not divisible by patch {patch}")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let c = planes.len();
    let n = (patch * patch) as f64;
    let mut f = Array2::zeros((ph * pw, 2 * c));
    for pi in 0..ph {
        for pj in 0..pw {
            let row = pi * pw + pj;
            for (ci, plane) in planes.iter().enumerate() {
                let block = plane.slice(s![pi * patch..(pi + 1) * patch, pj * patch..(pj + 1) * patch]);
                let mean = block.sum() / n;
                let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                f[[row, ci]] = mean;
                f[[row, c + ci]] = var.sqrt();
            }
        }
    }
    Ok(f)
}

/// Patch features over the listed raw channels of a grid.
pub fn extract_patch_features(grid: &BevGrid, patch: usize, channels: &[Channel]) -> Result<Array2<f64>> {
    let planes: Vec<Array2<f64>> = channels
        .iter()
        .map(|&ch| {
            Array2::from_shape_vec((grid.rows(), grid.cols()), grid.plane(ch).iter().map(|&v| v as f64).collect())
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Shape(e.to_string()))?;
    patch_features(&planes, patch)
}

fn mean_and_cov(f: ArrayView2<f64>, shrinkage: f64) -> (Array1<f64>, DMatrix<f64>) {
    let (n, k) = f.dim();
    let mean = f.mean_axis(Axis(0)).expect("non-empty features");
    let centered = &f - &mean.view().insert_axis(Axis(0));
    let mut cov = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = centered.column(i).dot(&centered.column(j)) / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if shrinkage > 0.0 {
        let target = cov.trace() / k as f64;
        cov *= 1.0 - shrinkage;
        for i in 0..k {
            cov[(i, i)] += shrinkage * target;
        }
    }
    (mean, cov)
}

fn clamped_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for v in e.eigenvalues.iter_mut() {
        if *v < NEGATIVE_FLOOR {
            return Err(Error::IllConditioned(format!("{what} has eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Fréchet distance `|μA − μB|² + tr(ΣA + ΣB − 2 (ΣA ΣB)^½)` between Gaussian
/// fits of two feature sets. `shrinkage ∈ [0, 1]` pulls each covariance
/// towards a scaled identity and is required when a set has no more rows
/// than columns.
pub fn frechet_with(a: ArrayView2<f64>, b: ArrayView2<f64>, shrinkage: f64) -> Result<f64> {
    let k = a.ncols();
    if k == 0 || b.ncols() != k {
        return Err(Error::Shape(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Config(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    for (name, f) in [("A", &a), ("B", &b)] {
        if f.nrows() < 2 || (f.nrows() <= k && shrinkage == 0.0) {
            return Err(Error::IllConditioned(format!(
                "set {name} has {} samples for {k} features; more are needed or shrinkage must be set",
                f.nrows()
            )));
        }
    }
    let (ma, ca) = mean_and_cov(a, shrinkage);
    let (mb, cb) = mean_and_cov(b, shrinkage);
    let dm = &ma - &mb;

    let ea = clamped_eigenvalues(ca.clone(), "covariance A")?;
    let sqrt_a =
        &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let prod = &sqrt_a * &cb * &sqrt_a;
    let ep = clamped_eigenvalues(prod, "covariance product")?;
    let tr_sqrt: f64 = ep.eigenvalues.iter().map(|v| v.sqrt()).sum();

    let d = dm.dot(&dm) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if d < NEGATIVE_FLOOR {
        return Err(Error::IllConditioned(format!("distance evaluated to {d:e}")));
    }
    Ok(d.max(0.0))
}

pub fn frechet(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    frechet_with(a, b, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub patch: usize,
    pub ssim: SsimParams,
    pub shrinkage: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { patch: 16, ssim: SsimParams::default(), shrinkage: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    /// Cell-weighted over all frames.
    pub mae: f64,
    /// Mean over frames.
    pub ssim: f64,
    /// `None` when the feature covariance is too ill-conditioned to evaluate.
    pub frechet: Option<f64>,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub frames: usize,
    pub rgb: GroupMetrics,
    pub height: GroupMetrics,
}

impl MetricsReport {
    pub fn group(&self, g: Group) -> &GroupMetrics {
        match g {
            Group::Rgb => &self.rgb,
            Group::Height => &self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub model: MetricsReport,
    /// The raw inputs scored as if they were predictions.
    pub baseline: MetricsReport,
    pub options: EvalOptions,
}

#[derive(Debug, Clone)]
struct GroupFrame {
    abs_sum: f64,
    cells: usize,
    ssim: f64,
    features: Array2<f64>,
    label_features: Array2<f64>,
}

fn score_group(pred: &BevGrid, label: &BevGrid, group: Group, opts: &EvalOptions) -> Result<GroupFrame> {
    let (abs_sum, cells) = abs_error_sum(pred, label, group)?;
    let ssim = ssim(pred, label, group, &opts.ssim)?;
    let features = patch_features(&comparison_planes(pred, label, group), opts.patch)?;
    let label_features = patch_features(&comparison_planes(label, label, group), opts.patch)?;
    Ok(GroupFrame { abs_sum, cells, ssim, features, label_features })
}

fn aggregate(frames: &[[GroupFrame; 2]], opts: &EvalOptions) -> Result<MetricsReport> {
    let mut groups = Vec::with_capacity(2);
    for (gi, group) in Group::ALL.into_iter().enumerate() {
        let cells: usize = frames.iter().map(|f| f[gi].cells).sum();
        if cells == 0 {
            return Err(Error::EmptyMask(group.name()));
        }
        let abs: f64 = frames.iter().map(|f| f[gi].abs_sum).sum();
        let ssim = frames.iter().map(|f| f[gi].ssim).sum::<f64>() / frames.len() as f64;
        let stack = |pick: fn(&GroupFrame) -> &Array2<f64>| {
            let views: Vec<_> = frames.iter().map(|f| pick(&f[gi]).view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        };
        let fa = stack(|g| &g.features)?;
        let fb = stack(|g| &g.label_features)?;
        let frechet = frechet_with(fa.view(), fb.view(), opts.shrinkage).ok();
        groups.push(GroupMetrics { mae: abs / cells as f64, ssim, frechet, cells });
    }
    let height = groups.pop().expect("two groups");
    let rgb = groups.pop().expect("two groups");
    Ok(MetricsReport { frames: frames.len(), rgb, height })
}

/// Path of the prediction for `frame_id` inside `pred_dir`.
pub fn prediction_path(pred_dir: &Path, frame_id: &str) -> PathBuf {
    pred_dir.join(format!("{frame_id}.dbg1"))
}

/// Scores the predictions in `pred_dir` (one `<frame_id>.dbg1` per index
/// entry) and the raw inputs against the labels.
pub fn evaluate(entries: &[IndexEntry], pred_dir: &Path, opts: &EvalOptions) -> Result<Evaluation> {
    if entries.is_empty() {
        return Err(Error::Config("index has no entries".into()));
    }
    if let Some(e) = entries.iter().find(|e| !prediction_path(pred_dir, &e.frame_id).is_file()) {
        return Err(Error::MissingPrediction(e.frame_id.clone()));
    }
    type Scored = ([GroupFrame; 2], [GroupFrame; 2]);
    let scored: Vec<Result<Scored>> = entries
        .par_iter()
        .map(|e| {
            let label = read_bev(&e.label)?;
            let input = read_bev(&e.input)?;
            let pred = read_bev(prediction_path(pred_dir, &e.frame_id))?;
            check_shapes(&pred, &label)?;
            check_shapes(&input, &label)?;
            let s = |g: &BevGrid, group| score_group(g, &label, group, opts);
            Ok(([s(&pred, Group::Rgb)?, s(&pred, Group::Height)?], [s(&input, Group::Rgb)?, s(&input, Group::Height)?]))
        })
        .collect();
    let mut model = Vec::with_capacity(entries.len());
    let mut baseline = Vec::with_capacity(entries.len());
    for s in scored {
        let (m, b) = s?;
        model.push(m);
        baseline.push(b);
    }
    Ok(Evaluation { model: aggregate(&model, opts)?, baseline: aggregate(&baseline, opts)?, options: opts.clone() })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

impl Evaluation {
    pub fn rows(&self) -> [(&'static str, &MetricsReport); 2] {
        [("model", &self.model), ("baseline", &self.baseline)]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {BANNER}");
        let _ = writeln!(s, "frames {}", self.model.frames);
        let _ = writeln!(s, "{:<10}{:<8}{:>12}{:>12}{:>14}{:>12}", "row", "group", "mae", "ssim", "frechet", "cells");
        for (row, r) in self.rows() {
            for g in Group::ALL {
                let m = r.group(g);
                let fr = m.frechet.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(s, "{row:<10}{:<8}{:>12.6}{:>12.6}{fr:>14}{:>12}", g.name(), m.mae, m.ssim, m.cells);
            }
        }
        s
    }

    /// One `key = value` per line; floats are printed round-trip exact.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "banner = {BANNER}");
        let _ = writeln!(s, "frames = {}", self.model.frames);
        let o = &self.options;
        let _ = writeln!(s, "config.patch = {}", o.patch);
        let _ = writeln!(s, "config.ssim_window = {}", o.ssim.window);
        let _ = writeln!(s, "config.ssim_sigma = {}", o.ssim.sigma);
        let _ = writeln!(s, "config.shrinkage = {}", o.shrinkage);
        for (row, r) in self.rows() {
            for g in Group::ALL {
                let m = r.group(g);
                let p = format!("{row}.{}", g.name());
                let _ = writeln!(s, "{p}.mae = {}", m.mae);
                let _ = writeln!(s, "{p}.ssim = {}", m.ssim);
                let _ = writeln!(s, "{p}.frechet = {}", fmt_opt(m.frechet));
                let _ = writeln!(s, "{p}.cells = {}", m.cells);
            }
        }
        s
    }

    /// Writes `report.txt` and `metrics.kv` into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let text = out_dir.join("report.txt");
        let kv = out_dir.join("metrics.kv");
        std::fs::write(&text, self.to_text()).map_err(|e| Error::io(&text, e))?;
        std::fs::write(&kv, self.to_kv()).map_err(|e| Error::io(&kv, e))?;
        Ok((text, kv))
    }
}
