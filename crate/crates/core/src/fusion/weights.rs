//! Named parameter tensors and the `DBW1` weights file.
//!
//! Layout, all little-endian: magic `DBW1`, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and the
//! row-major `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, IxDyn, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::gru::GRU_TENSORS;
use super::FusionConfig;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DBW1";
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

/// Expected tensor names and shapes for `cfg`, in canonical order.
pub fn shape_table(cfg: &FusionConfig) -> Vec<(String, Vec<usize>)> {
    let mut t = Vec::new();
    let layers = cfg.conv_layers();
    let hd = cfg.hidden_channels;
    let cb = cfg.branch_channels();
    let dt = cfg.token_dim();
    for br in cfg.branches() {
        let b = br.name;
        for enc in ["enc_prox", "enc_meas"] {
            for l in 0..layers {
                let cin = if l == 0 { br.inputs.len() } else { hd };
                let cout = if l + 1 == layers { cb } else { hd };
                t.push((format!("{b}.{enc}.conv{l}.w"), vec![cout, cin, 3, 3]));
                t.push((format!("{b}.{enc}.conv{l}.b"), vec![cout]));
            }
        }
        for gru in ["gru_enc", "gru_dec"] {
            for n in GRU_TENSORS {
                let shape = if n.starts_with('b') { vec![dt] } else { vec![dt, dt] };
                t.push((format!("{b}.{gru}.{n}"), shape));
            }
        }
        let k = cfg.downsample;
        t.push((format!("{b}.dec.up.w"), vec![cb, hd, k, k]));
        t.push((format!("{b}.dec.up.b"), vec![hd]));
        for l in 0..layers {
            let cout = if l + 1 == layers { br.outputs.len() } else { hd };
            t.push((format!("{b}.dec.conv{l}.w"), vec![hd, cout, 2, 2]));
            t.push((format!("{b}.dec.conv{l}.b"), vec![cout]));
        }
    }
    t
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionWeights {
    tensors: IndexMap<String, ArrayD<f64>>,
}

impl FusionWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(cfg: &FusionConfig) -> Self {
        let tensors = shape_table(cfg).into_iter().map(|(n, s)| (n, ArrayD::zeros(IxDyn(&s)))).collect();
        Self { tensors }
    }

    pub fn zeros_like(other: &FusionWeights) -> Self {
        let tensors = other.tensors.iter().map(|(n, a)| (n.clone(), ArrayD::zeros(a.raw_dim()))).collect();
        Self { tensors }
    }

    /// Seeded initialization: biases zero, weights `N(0, 1/fan_in)`.
    pub fn init(cfg: &FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(cfg);
        for (name, t) in w.tensors.iter_mut() {
            let dims = t.shape().to_vec();
            let fan_in = match dims.len() {
                1 => continue,
                2 => dims[1],
                // Transposed convolutions store `(in, out, k, k)`.
                _ if name.contains(".dec.") => dims[0],
                _ => dims[1] * dims[2] * dims[3],
            };
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
            t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        w
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ArrayD<f64>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    fn expect(&self, name: &str) -> &ArrayD<f64> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub(crate) fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.expect(name).view().into_dimensionality().expect("rank-1 tensor")
    }

    pub(crate) fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.expect(name).view().into_dimensionality().expect("rank-2 tensor")
    }

    pub(crate) fn view4(&self, name: &str) -> ArrayView4<'_, f64> {
        self.expect(name).view().into_dimensionality().expect("rank-4 tensor")
    }

    pub(crate) fn add_to(&mut self, name: &str, g: &ArrayViewD<f64>) {
        let t = self.tensors.get_mut(name).unwrap_or_else(|| panic!("missing tensor {name}"));
        *t += g;
    }

    /// Checks names, order, shapes and finiteness against the table for `cfg`.
    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        let table = shape_table(cfg);
        if table.len() != self.tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", table.len(), self.tensors.len())));
        }
        for ((name, shape), (have_name, t)) in table.iter().zip(&self.tensors) {
            if name != have_name {
                return Err(Error::Shape(format!("expected tensor '{name}', found '{have_name}'")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::Shape(format!("tensor '{name}' has non-finite entries")));
            }
        }
        Ok(())
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: f64, other: &FusionWeights) {
        for (t, o) in self.tensors.values_mut().zip(other.tensors.values()) {
            t.scaled_add(alpha, o);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors.values_mut().for_each(|t| t.mapv_inplace(|v| v * alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &FusionWeights) -> f64 {
        self.tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| Zip::from(a).and(b).fold(0.0f64, |m, x, y| m.max((x - y).abs())))
            .fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let e = |err| Error::io("<weights>", err);
        w.write_all(WEIGHTS_MAGIC).map_err(e)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(e)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(e)?;
            w.write_all(name.as_bytes()).map_err(e)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes()).map_err(e)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(e)?;
            }
            for v in t.iter() {
                w.write_all(&v.to_le_bytes()).map_err(e)?;
            }
        }
        w.flush().map_err(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| relabel(e, path))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected DBW1")));
        }
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut tensors = IndexMap::new();
        for i in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            if len > MAX_NAME_LEN {
                return Err(Error::format(format!("tensor {i}: name length {len} too large")));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8")))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::format(format!("tensor '{name}': rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "dims")?;
                dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::format("dimension overflow"))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(format!("tensor '{name}': element count overflows")))?;
            let mut payload = Vec::new();
            let got = (&mut r).take(n as u64 * 8).read_to_end(&mut payload).map_err(|e| Error::io("<weights>", e))?;
            if got != n * 8 {
                return Err(Error::format(format!("tensor '{name}': truncated payload")));
            }
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::format(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(format!("duplicate tensor '{name}'")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("<weights>", e))? != 0 {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| relabel(e, path))
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other.with_path(path),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated while reading {what}")),
        _ => Error::io("<weights>", e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
