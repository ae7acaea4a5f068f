//! Bayesian future-fusion model.
//!
//! The proximal band is encoded and rolled forward column by column with a GRU
//! encoder/decoder (prediction step). The distal band of the observation is
//! encoded separately and the predicted columns attend over it (measurement
//! update). Proximal encoder columns and fused columns are decoded back into a
//! full-size RGB + height map.

pub mod attention;
pub mod gru;
pub mod loss;
pub mod ops;
pub mod train;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::grid::{BevGrid, Channel, GridGeometry, NUM_CHANNELS};

pub use attention::{attend, attend_backward, attention_weights};
pub use gru::{rollout, rollout_backward, Gru, GruGrad, RolloutCache};
pub use loss::{loss, masked_l1, LossHook, LossHooks, LossValue};
pub use train::{dataset_loss, train_toy, TrainConfig, TrainResult, TrainingPair};
pub use weights::{shape_table, FusionWeights};

/// Channels of the model output tensor.
pub const OUTPUT_CHANNELS: [Channel; 4] = [Channel::R, Channel::G, Channel::B, Channel::Height];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderMode {
    /// One branch over all six input channels.
    Stacked,
    /// Independent RGB and height branches with half the latent channels each.
    Split,
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "stacked" => Ok(EncoderMode::Stacked),
            "split" => Ok(EncoderMode::Split),
            other => Err(Error::Config(format!("unknown encoder mode '{other}'"))),
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::Stacked => "stacked",
            EncoderMode::Split => "split",
        })
    }
}

/// One independent encoder/roll-out/attention/decoder path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub name: &'static str,
    pub inputs: &'static [Channel],
    /// Indices into [`OUTPUT_CHANNELS`].
    pub outputs: &'static [usize],
}

const STACKED: [BranchSpec; 1] = [BranchSpec {
    name: "main",
    inputs: &[Channel::R, Channel::G, Channel::B, Channel::MaskRgb, Channel::Height, Channel::MaskHeight],
    outputs: &[0, 1, 2, 3],
}];

const SPLIT: [BranchSpec; 2] = [
    BranchSpec { name: "rgb", inputs: &[Channel::R, Channel::G, Channel::B, Channel::MaskRgb], outputs: &[0, 1, 2] },
    BranchSpec { name: "height", inputs: &[Channel::Height, Channel::MaskHeight], outputs: &[3] },
];

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Input grid size.
    pub rows: usize,
    pub cols: usize,
    /// Total encoder stride `s` (a power of two) and extra pooling `d`.
    pub stride: usize,
    pub downsample: usize,
    /// Latent channels `C_lat`, shared equally between branches.
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub mode: EncoderMode,
    /// Latent columns in the proximal band.
    pub proximal_cols: usize,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_perp: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rows: 48,
            cols: 120,
            stride: 8,
            downsample: 3,
            latent_channels: 4,
            hidden_channels: 4,
            mode: EncoderMode::Stacked,
            proximal_cols: 1,
            lambda_rec: 1.0,
            lambda_adv: 0.0,
            lambda_perp: 0.0,
        }
    }
}

pub const FUSION_KEYS: &[&str] = &[
    "fusion.rows",
    "fusion.cols",
    "fusion.stride",
    "fusion.downsample",
    "fusion.latent_channels",
    "fusion.hidden_channels",
    "fusion.mode",
    "fusion.proximal_cols",
    "loss.lambda_rec",
    "loss.lambda_adv",
    "loss.lambda_perp",
];

impl FusionConfig {
    /// Derives the proximal split from the 6 m band of `geometry`.
    pub fn from_geometry(
        geometry: &GridGeometry,
        stride: usize,
        downsample: usize,
        latent_channels: usize,
        hidden_channels: usize,
        mode: EncoderMode,
    ) -> Result<Self> {
        let band = geometry.proximal_cols()?;
        let f = stride * downsample;
        if f == 0 || band % f != 0 {
            return Err(Error::Shape(format!("proximal band of {band} columns is not divisible by s·d = {f}")));
        }
        let cfg = Self {
            rows: geometry.rows(),
            cols: geometry.cols(),
            stride,
            downsample,
            latent_channels,
            hidden_channels,
            mode,
            proximal_cols: band / f,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return bad(format!("stride {} must be a power of two ≥ 2", self.stride));
        }
        if self.downsample == 0 {
            return bad("downsample must be ≥ 1".into());
        }
        let f = self.factor();
        if self.rows == 0 || self.cols == 0 || !self.rows.is_multiple_of(f) || !self.cols.is_multiple_of(f) {
            return bad(format!("grid {}×{} is not divisible by s·d = {f}", self.rows, self.cols));
        }
        if self.proximal_cols == 0 || self.proximal_cols >= self.latent_cols() {
            return bad(format!("proximal columns {} must lie in [1, {})", self.proximal_cols, self.latent_cols()));
        }
        let nb = self.branches().len();
        if self.latent_channels == 0 || !self.latent_channels.is_multiple_of(nb) || self.hidden_channels == 0 {
            return bad(format!(
                "latent channels {} must be a positive multiple of {nb}, hidden channels positive",
                self.latent_channels
            ));
        }
        for l in [self.lambda_rec, self.lambda_adv, self.lambda_perp] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("loss weight {l} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        self.stride * self.downsample
    }

    pub fn conv_layers(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    pub fn latent_rows(&self) -> usize {
        self.rows / self.factor()
    }

    pub fn latent_cols(&self) -> usize {
        self.cols / self.factor()
    }

    pub fn distal_cols(&self) -> usize {
        self.latent_cols() - self.proximal_cols
    }

    /// Width of the proximal band in grid columns.
    pub fn proximal_px(&self) -> usize {
        self.proximal_cols * self.factor()
    }

    pub fn branches(&self) -> &'static [BranchSpec] {
        match self.mode {
            EncoderMode::Stacked => &STACKED,
            EncoderMode::Split => &SPLIT,
        }
    }

    pub fn branch_channels(&self) -> usize {
        self.latent_channels / self.branches().len()
    }

    /// Length of one column token within a branch.
    pub fn token_dim(&self) -> usize {
        self.branch_channels() * self.latent_rows()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            rows: kv.get_or("fusion.rows", d.rows)?,
            cols: kv.get_or("fusion.cols", d.cols)?,
            stride: kv.get_or("fusion.stride", d.stride)?,
            downsample: kv.get_or("fusion.downsample", d.downsample)?,
            latent_channels: kv.get_or("fusion.latent_channels", d.latent_channels)?,
            hidden_channels: kv.get_or("fusion.hidden_channels", d.hidden_channels)?,
            mode: kv.get_or("fusion.mode", d.mode)?,
            proximal_cols: kv.get_or("fusion.proximal_cols", d.proximal_cols)?,
            lambda_rec: kv.get_or("loss.lambda_rec", d.lambda_rec)?,
            lambda_adv: kv.get_or("loss.lambda_adv", d.lambda_adv)?,
            lambda_perp: kv.get_or("loss.lambda_perp", d.lambda_perp)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("fusion.rows", self.rows);
        kv.set("fusion.cols", self.cols);
        kv.set("fusion.stride", self.stride);
        kv.set("fusion.downsample", self.downsample);
        kv.set("fusion.latent_channels", self.latent_channels);
        kv.set("fusion.hidden_channels", self.hidden_channels);
        kv.set("fusion.mode", self.mode);
        kv.set("fusion.proximal_cols", self.proximal_cols);
        kv.set("loss.lambda_rec", self.lambda_rec);
        kv.set("loss.lambda_adv", self.lambda_adv);
        kv.set("loss.lambda_perp", self.lambda_perp);
        kv
    }

    fn check_input(&self, grid: &BevGrid) -> Result<()> {
        self.validate()?;
        if grid.rows() != self.rows || grid.cols() != self.cols {
            return Err(Error::Shape(format!(
                "input grid is {}×{}, model expects {}×{}",
                grid.rows(),
                grid.cols(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Proximal,
    Distal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Proximal,
    Measurement,
    Predicted,
    Fused,
}

/// `C_lat × H_lat × W_lat` latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub tensor: Array3<f64>,
    pub provenance: Provenance,
}

/// Selected grid planes as an `f64` tensor.
pub fn grid_tensor(grid: &BevGrid, channels: &[Channel]) -> Array3<f64> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut t = Array3::zeros((channels.len(), rows, cols));
    for (mut plane, &ch) in t.axis_iter_mut(Axis(0)).zip(channels) {
        for (dst, &src) in plane.iter_mut().zip(grid.plane(ch)) {
            *dst = src as f64;
        }
    }
    t
}

/// Converts a raw `(R, G, B, H)` output tensor into a grid: color clamped to
/// `[0, 1]`, every mask set.
pub fn output_to_grid(out: ArrayView3<f64>, geometry: GridGeometry) -> Result<BevGrid> {
    let (c, rows, cols) = out.dim();
    if c != OUTPUT_CHANNELS.len() || rows != geometry.rows() || cols != geometry.cols() {
        return Err(Error::Shape(format!("output {:?} does not match geometry", out.dim())));
    }
    let mut g = BevGrid::zeros(geometry);
    for (i, &ch) in OUTPUT_CHANNELS.iter().enumerate() {
        let clamp = ch != Channel::Height;
        for (dst, &v) in g.plane_mut(ch).iter_mut().zip(out.index_axis(Axis(0), i)) {
            *dst = if clamp { v.clamp(0.0, 1.0) as f32 } else { v as f32 };
        }
    }
    g.plane_mut(Channel::MaskRgb).fill(1.0);
    g.plane_mut(Channel::MaskHeight).fill(1.0);
    debug_assert_eq!(g.data().len(), NUM_CHANNELS * rows * cols);
    Ok(g)
}

#[derive(Debug, Clone)]
struct StackCache {
    inputs: Vec<Array3<f64>>,
    outputs: Vec<Array3<f64>>,
}

fn encoder_forward(x: Array3<f64>, w: &FusionWeights, prefix: &str, cfg: &FusionConfig) -> (Array3<f64>, StackCache) {
    let mut c = StackCache { inputs: Vec::new(), outputs: Vec::new() };
    let mut a = x;
    for l in 0..cfg.conv_layers() {
        let y = ops::conv2d(
            a.view(),
            w.view4(&format!("{prefix}.conv{l}.w")),
            w.view1(&format!("{prefix}.conv{l}.b")),
            2,
            1,
        )
        .mapv(f64::tanh);
        c.inputs.push(a);
        a = y.clone();
        c.outputs.push(y);
    }
    (ops::avg_pool(a.view(), cfg.downsample), c)
}

fn encoder_backward(
    w: &FusionWeights,
    prefix: &str,
    cache: &StackCache,
    d_latent: &Array3<f64>,
    cfg: &FusionConfig,
    grads: &mut FusionWeights,
) {
    let mut g = ops::avg_pool_backward(d_latent.view(), cfg.downsample);
    for l in (0..cfg.conv_layers()).rev() {
        let name = format!("{prefix}.conv{l}");
        let ga = ops::tanh_backward(cache.outputs[l].view(), g.view());
        let (gx, gw, gb) = ops::conv2d_backward(cache.inputs[l].view(), w.view4(&format!("{name}.w")), ga.view(), 2, 1);
        grads.add_to(&format!("{name}.w"), &gw.view().into_dyn());
        grads.add_to(&format!("{name}.b"), &gb.view().into_dyn());
        g = gx;
    }
}

fn decoder_forward(
    latent: &Array3<f64>,
    w: &FusionWeights,
    prefix: &str,
    cfg: &FusionConfig,
) -> (Array3<f64>, StackCache) {
    let mut c = StackCache { inputs: Vec::new(), outputs: Vec::new() };
    let layers = cfg.conv_layers();
    let mut a = latent.clone();
    for l in 0..=layers {
        let name = if l == 0 { format!("{prefix}.up") } else { format!("{prefix}.conv{}", l - 1) };
        let mut y = ops::conv_transpose(a.view(), w.view4(&format!("{name}.w")), w.view1(&format!("{name}.b")));
        if l < layers {
            y.mapv_inplace(f64::tanh);
        }
        c.inputs.push(a);
        a = y.clone();
        c.outputs.push(y);
    }
    (a, c)
}

fn decoder_backward(
    w: &FusionWeights,
    prefix: &str,
    cache: &StackCache,
    d_out: Array3<f64>,
    cfg: &FusionConfig,
    grads: &mut FusionWeights,
) -> Array3<f64> {
    let layers = cfg.conv_layers();
    let mut g = d_out;
    for l in (0..=layers).rev() {
        let name = if l == 0 { format!("{prefix}.up") } else { format!("{prefix}.conv{}", l - 1) };
        if l < layers {
            g = ops::tanh_backward(cache.outputs[l].view(), g.view());
        }
        let (gx, gw, gb) =
            ops::conv_transpose_backward(cache.inputs[l].view(), w.view4(&format!("{name}.w")), g.view());
        grads.add_to(&format!("{name}.w"), &gw.view().into_dyn());
        grads.add_to(&format!("{name}.b"), &gb.view().into_dyn());
        g = gx;
    }
    g
}

/// Intermediates of one branch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pub spec: BranchSpec,
    enc_prox: StackCache,
    enc_meas: StackCache,
    pub proximal: Array3<f64>,
    pub measurement: Array3<f64>,
    pub psi: Array2<f64>,
    pub theta: Array2<f64>,
    rollout: RolloutCache,
    pub attention: Array2<f64>,
    pub fused: Array3<f64>,
    decoder: StackCache,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub branches: Vec<BranchCache>,
    /// Raw `(R, G, B, H)` output.
    pub output: Array3<f64>,
}

fn branch_forward(grid: &BevGrid, spec: BranchSpec, w: &FusionWeights, cfg: &FusionConfig) -> BranchCache {
    let b = spec.name;
    let x = grid_tensor(grid, spec.inputs);
    let split = cfg.proximal_px();
    let (proximal, enc_prox) =
        encoder_forward(x.slice(s![.., .., ..split]).to_owned(), w, &format!("{b}.enc_prox"), cfg);
    let (measurement, enc_meas) =
        encoder_forward(x.slice(s![.., .., split..]).to_owned(), w, &format!("{b}.enc_meas"), cfg);

    let p = cfg.proximal_cols;
    let n = cfg.distal_cols();
    let prox_tokens = ops::columns_to_tokens(proximal.view(), 0..p);
    let theta = ops::columns_to_tokens(measurement.view(), 0..n);
    let g_enc = Gru::from_weights(w, &format!("{b}.gru_enc"));
    let g_dec = Gru::from_weights(w, &format!("{b}.gru_dec"));
    let (psi, rollout) = gru::rollout(prox_tokens.view(), n, &g_enc, &g_dec);
    let attention = attention_weights(psi.view(), theta.view());
    let fused_tokens = attention.dot(&theta);

    let mut fused = Array3::zeros((cfg.branch_channels(), cfg.latent_rows(), cfg.latent_cols()));
    fused.slice_mut(s![.., .., ..p]).assign(&proximal);
    ops::tokens_to_columns(fused_tokens.view(), &mut fused, p);
    let (_, decoder) = decoder_forward(&fused, w, &format!("{b}.dec"), cfg);
    BranchCache { spec, enc_prox, enc_meas, proximal, measurement, psi, theta, rollout, attention, fused, decoder }
}

/// Full forward pass, returning every intermediate.
pub fn forward(input: &BevGrid, w: &FusionWeights, cfg: &FusionConfig) -> Result<ForwardCache> {
    cfg.check_input(input)?;
    let branches: Vec<BranchCache> = cfg.branches().iter().map(|&spec| branch_forward(input, spec, w, cfg)).collect();
    let mut output = Array3::zeros((OUTPUT_CHANNELS.len(), cfg.rows, cfg.cols));
    for br in &branches {
        let out = br.decoder.outputs.last().expect("decoder has layers");
        for (i, &o) in br.spec.outputs.iter().enumerate() {
            output.index_axis_mut(Axis(0), o).assign(&out.index_axis(Axis(0), i));
        }
    }
    Ok(ForwardCache { branches, output })
}

/// Forward pass producing a BEV grid plus the cache for [`fuse_backward`].
pub fn fuse_forward(input: &BevGrid, w: &FusionWeights, cfg: &FusionConfig) -> Result<(BevGrid, ForwardCache)> {
    let cache = forward(input, w, cfg)?;
    let grid = output_to_grid(cache.output.view(), *input.geometry())?;
    Ok((grid, cache))
}

/// Analytic gradient of `⟨grad_out, output⟩` with respect to every tensor in `w`.
pub fn fuse_backward(
    w: &FusionWeights,
    cfg: &FusionConfig,
    cache: &ForwardCache,
    grad_out: &Array3<f64>,
) -> Result<FusionWeights> {
    if grad_out.dim() != cache.output.dim() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.dim(),
            cache.output.dim()
        )));
    }
    let mut grads = FusionWeights::zeros_like(w);
    let p = cfg.proximal_cols;
    let d = cfg.token_dim();
    for br in &cache.branches {
        let b = br.spec.name;
        let mut g = Array3::zeros((br.spec.outputs.len(), cfg.rows, cfg.cols));
        for (i, &o) in br.spec.outputs.iter().enumerate() {
            g.index_axis_mut(Axis(0), i).assign(&grad_out.index_axis(Axis(0), o));
        }
        let d_fused = decoder_backward(w, &format!("{b}.dec"), &br.decoder, g, cfg, &mut grads);

        let mut d_prox = d_fused.slice(s![.., .., ..p]).to_owned();
        let d_tokens = ops::columns_to_tokens(d_fused.view(), p..cfg.latent_cols());
        let (d_psi, d_theta) = attend_backward(br.psi.view(), br.theta.view(), br.attention.view(), d_tokens.view());

        let g_enc = Gru::from_weights(w, &format!("{b}.gru_enc"));
        let g_dec = Gru::from_weights(w, &format!("{b}.gru_dec"));
        let (mut ge, mut gd) = (GruGrad::zeros(d), GruGrad::zeros(d));
        let d_prox_tokens = rollout_backward(&g_enc, &g_dec, &br.rollout, d_psi.view(), &mut ge, &mut gd);
        ge.add_into(&mut grads, &format!("{b}.gru_enc"));
        gd.add_into(&mut grads, &format!("{b}.gru_dec"));

        let mut from_tokens = Array3::zeros(d_prox.dim());
        ops::tokens_to_columns(d_prox_tokens.view(), &mut from_tokens, 0);
        d_prox += &from_tokens;
        let mut d_meas = Array3::zeros(br.measurement.dim());
        ops::tokens_to_columns(d_theta.view(), &mut d_meas, 0);

        encoder_backward(w, &format!("{b}.enc_prox"), &br.enc_prox, &d_prox, cfg, &mut grads);
        encoder_backward(w, &format!("{b}.enc_meas"), &br.enc_meas, &d_meas, cfg, &mut grads);
    }
    Ok(grads)
}

/// Encodes one band of `grid`. Split-mode branch latents are stacked along channels.
pub fn encode(grid: &BevGrid, region: Region, w: &FusionWeights, cfg: &FusionConfig) -> Result<LatentGrid> {
    cfg.check_input(grid)?;
    let split = cfg.proximal_px();
    let (enc, provenance) = match region {
        Region::Proximal => ("enc_prox", Provenance::Proximal),
        Region::Distal => ("enc_meas", Provenance::Measurement),
    };
    let parts: Vec<Array3<f64>> = cfg
        .branches()
        .iter()
        .map(|spec| {
            let x = grid_tensor(grid, spec.inputs);
            let x = match region {
                Region::Proximal => x.slice(s![.., .., ..split]).to_owned(),
                Region::Distal => x.slice(s![.., .., split..]).to_owned(),
            };
            encoder_forward(x, w, &format!("{}.{enc}", spec.name), cfg).0
        })
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let tensor = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(LatentGrid { tensor, provenance })
}
