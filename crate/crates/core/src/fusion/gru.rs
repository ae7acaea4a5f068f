//! Gated recurrent unit and the column-wise roll-out built on it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::weights::FusionWeights;

pub const GRU_TENSORS: [&str; 9] = ["wz", "wr", "wn", "uz", "ur", "un", "bz", "br", "bn"];

/// GRU parameters. Input and hidden sizes are equal.
///
/// ```text
/// z  = σ(Wz x + Uz h + bz)
/// r  = σ(Wr x + Ur h + br)
/// n  = tanh(Wn x + bn + r ⊙ (Un h))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub wz: Array2<f64>,
    pub wr: Array2<f64>,
    pub wn: Array2<f64>,
    pub uz: Array2<f64>,
    pub ur: Array2<f64>,
    pub un: Array2<f64>,
    pub bz: Array1<f64>,
    pub br: Array1<f64>,
    pub bn: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct GruStep {
    x: Array1<f64>,
    h: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    n: Array1<f64>,
    un_h: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruGrad {
    pub wz: Array2<f64>,
    pub wr: Array2<f64>,
    pub wn: Array2<f64>,
    pub uz: Array2<f64>,
    pub ur: Array2<f64>,
    pub un: Array2<f64>,
    pub bz: Array1<f64>,
    pub br: Array1<f64>,
    pub bn: Array1<f64>,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a = a.view().insert_axis(Axis(1));
    let b = b.view().insert_axis(Axis(0));
    &a * &b
}

impl Gru {
    pub fn zeros(d: usize) -> Self {
        let m = || Array2::zeros((d, d));
        let v = || Array1::zeros(d);
        Self { wz: m(), wr: m(), wn: m(), uz: m(), ur: m(), un: m(), bz: v(), br: v(), bn: v() }
    }

    /// Reads `<prefix>.wz` … `<prefix>.bn`.
    pub fn from_weights(w: &FusionWeights, prefix: &str) -> Self {
        let m = |n: &str| w.view2(&format!("{prefix}.{n}")).to_owned();
        let v = |n: &str| w.view1(&format!("{prefix}.{n}")).to_owned();
        Self {
            wz: m("wz"),
            wr: m("wr"),
            wn: m("wn"),
            uz: m("uz"),
            ur: m("ur"),
            un: m("un"),
            bz: v("bz"),
            br: v("br"),
            bn: v("bn"),
        }
    }

    pub fn dim(&self) -> usize {
        self.bz.len()
    }

    pub fn step(&self, x: ArrayView1<f64>, h: ArrayView1<f64>) -> (Array1<f64>, GruStep) {
        let z = (self.wz.dot(&x) + self.uz.dot(&h) + &self.bz).mapv(sigmoid);
        let r = (self.wr.dot(&x) + self.ur.dot(&h) + &self.br).mapv(sigmoid);
        let un_h = self.un.dot(&h);
        let n = (self.wn.dot(&x) + &self.bn + &r * &un_h).mapv(f64::tanh);
        let h_new = (1.0 - &z) * &n + &z * &h;
        (h_new, GruStep { x: x.to_owned(), h: h.to_owned(), z, r, n, un_h })
    }
}

impl GruGrad {
    pub fn zeros(d: usize) -> Self {
        let g = Gru::zeros(d);
        Self { wz: g.wz, wr: g.wr, wn: g.wn, uz: g.uz, ur: g.ur, un: g.un, bz: g.bz, br: g.br, bn: g.bn }
    }

    /// Adds these gradients into `<prefix>.*` of `out`.
    pub fn add_into(&self, out: &mut FusionWeights, prefix: &str) {
        for (name, m) in
            [("wz", &self.wz), ("wr", &self.wr), ("wn", &self.wn), ("uz", &self.uz), ("ur", &self.ur), ("un", &self.un)]
        {
            out.add_to(&format!("{prefix}.{name}"), &m.view().into_dyn());
        }
        for (name, v) in [("bz", &self.bz), ("br", &self.br), ("bn", &self.bn)] {
            out.add_to(&format!("{prefix}.{name}"), &v.view().into_dyn());
        }
    }
}

/// Backward through one step. Accumulates parameter gradients into `grad` and
/// returns the gradients with respect to `x` and the previous hidden state.
pub fn step_backward(p: &Gru, s: &GruStep, dh_new: &Array1<f64>, grad: &mut GruGrad) -> (Array1<f64>, Array1<f64>) {
    let dz = dh_new * &(&s.h - &s.n);
    let dn = dh_new * &(1.0 - &s.z);
    let mut dh = dh_new * &s.z;

    let da_n = &dn * &(1.0 - &s.n * &s.n);
    let dr = &da_n * &s.un_h;
    let d_un_h = &da_n * &s.r;
    let da_z = &dz * &(&s.z * &(1.0 - &s.z));
    let da_r = &dr * &(&s.r * &(1.0 - &s.r));

    grad.wn += &outer(&da_n, &s.x);
    grad.bn += &da_n;
    grad.un += &outer(&d_un_h, &s.h);
    grad.wz += &outer(&da_z, &s.x);
    grad.uz += &outer(&da_z, &s.h);
    grad.bz += &da_z;
    grad.wr += &outer(&da_r, &s.x);
    grad.ur += &outer(&da_r, &s.h);
    grad.br += &da_r;

    let dx = p.wn.t().dot(&da_n) + p.wz.t().dot(&da_z) + p.wr.t().dot(&da_r);
    dh += &(p.un.t().dot(&d_un_h) + p.uz.t().dot(&da_z) + p.ur.t().dot(&da_r));
    (dx, dh)
}

/// Intermediate state of [`rollout`].
#[derive(Debug, Clone)]
pub struct RolloutCache {
    enc_steps: Vec<GruStep>,
    dec_steps: Vec<GruStep>,
}

/// Consumes the proximal tokens with `enc` from a zero state, then lets `dec`
/// emit `n_distal` tokens autoregressively. The first decoder input is the last
/// proximal token; every emitted hidden state is the next input.
pub fn rollout(proximal: ArrayView2<f64>, n_distal: usize, enc: &Gru, dec: &Gru) -> (Array2<f64>, RolloutCache) {
    let d = proximal.ncols();
    assert!(proximal.nrows() >= 1, "rollout needs at least one proximal column");
    let mut h = Array1::zeros(d);
    let mut enc_steps = Vec::with_capacity(proximal.nrows());
    for x in proximal.rows() {
        let (hn, st) = enc.step(x, h.view());
        enc_steps.push(st);
        h = hn;
    }
    let mut x = proximal.row(proximal.nrows() - 1).to_owned();
    let mut out = Array2::zeros((n_distal, d));
    let mut dec_steps = Vec::with_capacity(n_distal);
    for k in 0..n_distal {
        let (hn, st) = dec.step(x.view(), h.view());
        dec_steps.push(st);
        out.row_mut(k).assign(&hn);
        h = hn.clone();
        x = hn;
    }
    (out, RolloutCache { enc_steps, dec_steps })
}

/// Backpropagation through time for [`rollout`]. Returns the gradient with
/// respect to the proximal tokens.
pub fn rollout_backward(
    enc: &Gru,
    dec: &Gru,
    cache: &RolloutCache,
    d_out: ArrayView2<f64>,
    g_enc: &mut GruGrad,
    g_dec: &mut GruGrad,
) -> Array2<f64> {
    let d = enc.dim();
    let p = cache.enc_steps.len();
    let mut d_prox = Array2::zeros((p, d));

    // Gradients arriving at h_k through the next step's hidden and input slots.
    let mut dh_next = Array1::<f64>::zeros(d);
    let mut dx_next = Array1::<f64>::zeros(d);
    for k in (0..cache.dec_steps.len()).rev() {
        let dh = &d_out.row(k) + &dh_next + &dx_next;
        let (dx, dh_prev) = step_backward(dec, &cache.dec_steps[k], &dh, g_dec);
        dh_next = dh_prev;
        dx_next = dx;
    }
    // dx_next now belongs to the first decoder input, the last proximal token.
    if !cache.dec_steps.is_empty() {
        d_prox.row_mut(p - 1).assign(&dx_next);
    }
    let mut dh = dh_next;
    for j in (0..p).rev() {
        let (dx, dh_prev) = step_backward(enc, &cache.enc_steps[j], &dh, g_enc);
        let mut row = d_prox.row_mut(j);
        row += &dx;
        dh = dh_prev;
    }
    d_prox
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gru(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Gru {
        let mut m = || Array2::from_shape_fn((d, d), |_| scale * rng.random_range(-1.0..1.0));
        let (wz, wr, wn, uz, ur, un) = (m(), m(), m(), m(), m(), m());
        let mut v = || Array1::from_shape_fn(d, |_| scale * rng.random_range(-1.0..1.0));
        Gru { wz, wr, wn, uz, ur, un, bz: v(), br: v(), bn: v() }
    }

    /// Plain nested-loop GRU step.
    fn oracle_step(p: &Gru, x: &[f64], h: &[f64]) -> Vec<f64> {
        let d = h.len();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let (mut az, mut ar, mut an, mut uh) = (p.bz[i], p.br[i], p.bn[i], 0.0);
            for j in 0..d {
                az += p.wz[[i, j]] * x[j] + p.uz[[i, j]] * h[j];
                ar += p.wr[[i, j]] * x[j] + p.ur[[i, j]] * h[j];
                an += p.wn[[i, j]] * x[j];
                uh += p.un[[i, j]] * h[j];
            }
            let z = 1.0 / (1.0 + (-az).exp());
            let r = 1.0 / (1.0 + (-ar).exp());
            let n = (an + r * uh).tanh();
            out[i] = (1.0 - z) * n + z * h[i];
        }
        out
    }

    #[test]
    fn zero_weights_stay_at_zero() {
        let g = Gru::zeros(6);
        let prox = Array2::from_shape_fn((3, 6), |(i, j)| (i + j) as f64 * 0.1);
        let (out, _) = rollout(prox.view(), 5, &g, &g);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 5;
        let enc = random_gru(&mut rng, d, 0.5);
        let dec = random_gru(&mut rng, d, 0.5);
        let col: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let prox = Array2::from_shape_vec((1, d), col.clone()).unwrap();
        let (out, _) = rollout(prox.view(), 2, &enc, &dec);

        let h = oracle_step(&enc, &col, &vec![0.0; d]);
        let t1 = oracle_step(&dec, &col, &h);
        let t2 = oracle_step(&dec, &t1, &t1);
        for j in 0..d {
            assert!((out[[0, j]] - t1[j]).abs() < 1e-12);
            assert!((out[[1, j]] - t2[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_norm_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 8;
        let g = random_gru(&mut rng, d, 3.0);
        let prox = Array2::from_shape_fn((2, d), |_| rng.random_range(-1.0..1.0));
        let (out, _) = rollout(prox.view(), 100, &g, &g);
        let bound = (d as f64).sqrt();
        for row in out.rows() {
            assert!(row.dot(&row).sqrt() <= bound + 1e-12);
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let enc = random_gru(&mut rng, d, 0.8);
        let dec = random_gru(&mut rng, d, 0.8);
        let prox = Array2::from_shape_fn((3, d), |_| rng.random_range(-1.0..1.0));
        let gout = Array2::from_shape_fn((4, d), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = rollout(prox.view(), 4, &enc, &dec);
        let (mut ge, mut gd) = (GruGrad::zeros(d), GruGrad::zeros(d));
        let dprox = rollout_backward(&enc, &dec, &cache, gout.view(), &mut ge, &mut gd);

        let f = |enc: &Gru, dec: &Gru, prox: &Array2<f64>| (rollout(prox.view(), 4, enc, dec).0 * &gout).sum();
        let eps = 1e-6;
        for i in 0..prox.len() {
            let (mut a, mut b) = (prox.clone(), prox.clone());
            a.as_slice_mut().unwrap()[i] += eps;
            b.as_slice_mut().unwrap()[i] -= eps;
            let fd = (f(&enc, &dec, &a) - f(&enc, &dec, &b)) / (2.0 * eps);
            assert!((fd - dprox.as_slice().unwrap()[i]).abs() < 1e-7);
        }
        for i in 0..d * d {
            let (mut a, mut b) = (dec.clone(), dec.clone());
            a.un.as_slice_mut().unwrap()[i] += eps;
            b.un.as_slice_mut().unwrap()[i] -= eps;
            let fd = (f(&enc, &a, &prox) - f(&enc, &b, &prox)) / (2.0 * eps);
            assert!((fd - gd.un.as_slice().unwrap()[i]).abs() < 1e-7);
            let (mut a, mut b) = (enc.clone(), enc.clone());
            a.wz.as_slice_mut().unwrap()[i] += eps;
            b.wz.as_slice_mut().unwrap()[i] -= eps;
            let fd = (f(&a, &dec, &prox) - f(&b, &dec, &prox)) / (2.0 * eps);
            assert!((fd - ge.wz.as_slice().unwrap()[i]).abs() < 1e-7);
        }
    }
}
