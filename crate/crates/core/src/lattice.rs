//! Periodic d-dimensional lattices, fields on them and the spectral
//! machinery (multi-dimensional FFT, lattice heat semigroup, packed transforms
//! of two real fields at once).
//!
//! Cells are indexed row-major; cell j along an axis sits at the minimum-image
//! coordinate (j or j − n)·cell, so the origin is cell 0.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{argument, Error, Result};

/// Geometry of a periodic lattice: n_per_side cells of side L/n along each of
/// d axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    d: usize,
    n_per_side: usize,
    box_length: f64,
}

impl LatticeSpec {
    pub fn new(d: usize, n_per_side: usize, box_length: f64) -> Result<Self> {
        if d == 0 {
            return argument("lattice dimension must be positive");
        }
        if n_per_side < 8 || !n_per_side.is_power_of_two() {
            return argument(format!(
                "n_per_side = {n_per_side} must be a power of two and at least 8"
            ));
        }
        if !(box_length > 0.0 && box_length.is_finite()) {
            return argument(format!("box length {box_length} must be positive"));
        }
        Ok(Self {
            d,
            n_per_side,
            box_length,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_per_side(&self) -> usize {
        self.n_per_side
    }

    pub fn box_length(&self) -> f64 {
        self.box_length
    }

    pub fn cell(&self) -> f64 {
        self.box_length / self.n_per_side as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell().powi(self.d as i32)
    }

    pub fn n_cells(&self) -> usize {
        self.n_per_side.pow(self.d as u32)
    }

    /// Requires the mollification scale to be resolved: cell < ε/2.
    pub fn check_resolves(&self, epsilon: f64) -> Result<()> {
        if self.cell() >= 0.5 * epsilon {
            return Err(Error::Resolution(format!(
                "cell {} is not below epsilon/2 = {}",
                self.cell(),
                0.5 * epsilon
            )));
        }
        Ok(())
    }

    /// Signed wrapped index: j for j < n/2, j − n otherwise.
    #[inline]
    pub fn wrap(&self, j: usize) -> i64 {
        let n = self.n_per_side as i64;
        let j = j as i64;
        if j < n / 2 {
            j
        } else {
            j - n
        }
    }

    /// Per-axis indices of a flat cell index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d];
        for slot in idx.iter_mut().rev() {
            *slot = flat % self.n_per_side;
            flat /= self.n_per_side;
        }
        idx
    }

    /// Flat index of a (possibly negative or out-of-range) lattice vector,
    /// reduced periodically.
    pub fn flat_index(&self, idx: &[i64]) -> usize {
        let n = self.n_per_side as i64;
        idx.iter()
            .fold(0usize, |acc, &j| acc * self.n_per_side + j.rem_euclid(n) as usize)
    }

    /// Minimum-image coordinates of every cell, flattened (d values per cell).
    pub fn coordinates(&self) -> Vec<f64> {
        let n = self.n_cells();
        let h = self.cell();
        let mut out = Vec::with_capacity(n * self.d);
        for flat in 0..n {
            for j in self.multi_index(flat) {
                out.push(self.wrap(j) as f64 * h);
            }
        }
        out
    }

    /// Minimum-image displacement of `x` along one axis.
    #[inline]
    pub fn min_image(&self, x: f64) -> f64 {
        let l = self.box_length;
        x - l * (x / l).round()
    }

    /// Evaluates `f(displacement)` on every cell, where the displacement is
    /// the minimum-image vector from `center` to the cell.
    pub fn sample<F: FnMut(&[f64]) -> f64>(&self, center: &[f64], mut f: F) -> Vec<f64> {
        let coords = self.coordinates();
        let mut disp = vec![0.0; self.d];
        coords
            .chunks_exact(self.d)
            .map(|x| {
                for ((o, xi), ci) in disp.iter_mut().zip(x).zip(center) {
                    *o = self.min_image(xi - ci);
                }
                f(&disp)
            })
            .collect()
    }
}

/// Scalar field on a lattice; values are densities, so ∫_A u ≈ Σ_{cells in A} value·cell^d.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub lattice: LatticeSpec,
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn new(lattice: LatticeSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.n_cells() {
            return argument(format!(
                "field has {} values, lattice has {} cells",
                values.len(),
                lattice.n_cells()
            ));
        }
        Ok(Self { lattice, values })
    }

    pub fn constant(lattice: LatticeSpec, value: f64) -> Self {
        Self {
            lattice,
            values: vec![value; lattice.n_cells()],
        }
    }

    /// Σ values·cell^d.
    pub fn total_mass(&self) -> f64 {
        crate::stats::ksum(&self.values) * self.lattice.cell_volume()
    }

    /// Σ values·f·cell^d for a test function sampled on the same lattice.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        integrate(&self.values, f, self.lattice.cell_volume())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn integrate(u: &[f64], f: &[f64], cell_volume: f64) -> f64 {
    let mut acc = crate::stats::KahanSum::new();
    for (a, b) in u.iter().zip(f) {
        acc.add(a * b);
    }
    acc.value() * cell_volume
}

/// Multi-dimensional complex FFT over a lattice plus per-mode symbols.
pub struct Spectral {
    lattice: LatticeSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch_len: usize,
    neg_index: Vec<u32>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("lattice", &self.lattice).finish()
    }
}

/// Reusable buffers for [`Spectral`] transforms.
#[derive(Debug, Default)]
pub struct Workspace {
    pub buf: Vec<Complex64>,
    tmp: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Spectral {
    pub fn new(lattice: LatticeSpec) -> Self {
        let n = lattice.n_per_side();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        let neg_index = (0..lattice.n_cells())
            .map(|flat| {
                let idx: Vec<i64> = lattice.multi_index(flat).iter().map(|&j| -(j as i64)).collect();
                lattice.flat_index(&idx) as u32
            })
            .collect();
        Self {
            lattice,
            forward,
            inverse,
            scratch_len,
            neg_index,
        }
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn workspace(&self) -> Workspace {
        let n = self.lattice.n_cells();
        Workspace {
            buf: vec![Complex64::new(0.0, 0.0); n],
            tmp: vec![Complex64::new(0.0, 0.0); n],
            scratch: vec![Complex64::new(0.0, 0.0); self.scratch_len],
        }
    }

    /// Flat index of the mode −k.
    pub fn neg_index(&self, flat: usize) -> usize {
        self.neg_index[flat] as usize
    }

    /// Unnormalised forward DFT of `ws.buf` in place.
    pub fn forward(&self, ws: &mut Workspace) {
        self.transform(&*self.forward, ws);
    }

    /// Unnormalised inverse DFT of `ws.buf` in place.
    pub fn inverse(&self, ws: &mut Workspace) {
        self.transform(&*self.inverse, ws);
    }

    fn transform(&self, fft: &dyn Fft<f64>, ws: &mut Workspace) {
        let n = self.lattice.n_per_side();
        let total = self.lattice.n_cells();
        let d = self.lattice.d();
        let Workspace { buf, tmp, scratch } = ws;
        for axis in 0..d {
            let stride = n.pow((d - 1 - axis) as u32);
            if stride == 1 {
                fft.process_with_scratch(buf, scratch);
                continue;
            }
            let block = n * stride;
            for start in (0..total).step_by(block) {
                transpose::transpose(&buf[start..start + block], &mut tmp[..block], stride, n);
                fft.process_with_scratch(&mut tmp[..block], scratch);
                transpose::transpose(&tmp[..block], &mut buf[start..start + block], n, stride);
            }
        }
    }

    /// DFT of a real array; the result is left in `ws.buf`.
    pub fn forward_real(&self, values: &[f64], ws: &mut Workspace) {
        for (b, &v) in ws.buf.iter_mut().zip(values) {
            *b = Complex64::new(v, 0.0);
        }
        self.forward(ws);
    }

    /// Symbol of the lattice Laplacian, −Σ (4/h²) sin²(π m_i / n), per mode.
    pub fn laplacian_symbol(&self) -> Vec<f64> {
        let n = self.lattice.n_per_side();
        let h = self.lattice.cell();
        let per_axis: Vec<f64> = (0..n)
            .map(|m| {
                let s = (std::f64::consts::PI * m as f64 / n as f64).sin();
                -4.0 * s * s / (h * h)
            })
            .collect();
        (0..self.lattice.n_cells())
            .map(|flat| self.lattice.multi_index(flat).iter().map(|&m| per_axis[m]).sum())
            .collect()
    }

    /// Multiplier of the lattice heat semigroup exp(τ·½Δ_h), including the
    /// 1/N normalisation of the inverse transform.
    pub fn heat_multiplier(&self, tau: f64) -> Vec<f64> {
        let inv_n = 1.0 / self.lattice.n_cells() as f64;
        self.laplacian_symbol()
            .into_iter()
            .map(|lam| (0.5 * tau * lam).exp() * inv_n)
            .collect()
    }

    /// Applies the real, even multiplier `mult` (normalisation included) to
    /// up to two real fields packed as real and imaginary parts. When `quad`
    /// is given, also returns Σ_k quad(k)|Û(k)|² for each input field, where
    /// Û is the raw DFT of the field before the multiplier.
    pub fn apply_pair(
        &self,
        a: &mut [f64],
        b: Option<&mut [f64]>,
        mult: &[f64],
        quad: Option<&[f64]>,
        ws: &mut Workspace,
    ) -> (f64, f64) {
        self.load_pair(a, b.as_deref(), ws);
        self.forward(ws);
        let forms = match quad {
            Some(q) => self.packed_forms(q, ws),
            None => (0.0, 0.0),
        };
        for (z, &m) in ws.buf.iter_mut().zip(mult) {
            *z *= m;
        }
        self.inverse(ws);
        match b {
            Some(b) => {
                for ((z, x), y) in ws.buf.iter().zip(a.iter_mut()).zip(b.iter_mut()) {
                    *x = z.re;
                    *y = z.im;
                }
            }
            None => {
                for (z, x) in ws.buf.iter().zip(a.iter_mut()) {
                    *x = z.re;
                }
            }
        }
        forms
    }

    /// Σ_k quad(k)|Û(k)|² for one or two real fields, forward transform only.
    pub fn quadratic_forms(&self, a: &[f64], b: Option<&[f64]>, quad: &[f64], ws: &mut Workspace) -> (f64, f64) {
        self.load_pair(a, b, ws);
        self.forward(ws);
        self.packed_forms(quad, ws)
    }

    fn load_pair(&self, a: &[f64], b: Option<&[f64]>, ws: &mut Workspace) {
        match b {
            Some(b) => {
                for ((z, &x), &y) in ws.buf.iter_mut().zip(a).zip(b) {
                    *z = Complex64::new(x, y);
                }
            }
            None => {
                for (z, &x) in ws.buf.iter_mut().zip(a) {
                    *z = Complex64::new(x, 0.0);
                }
            }
        }
    }

    // splits a packed spectrum P = Â + iB̂ via Â(k) = (P(k) + conj P(−k))/2
    fn packed_forms(&self, q: &[f64], ws: &Workspace) -> (f64, f64) {
        let mut qa = crate::stats::KahanSum::new();
        let mut qb = crate::stats::KahanSum::new();
        for (k, &p) in ws.buf.iter().enumerate() {
            if q[k] == 0.0 {
                continue;
            }
            let pm = ws.buf[self.neg_index(k)].conj();
            qa.add(q[k] * (p + pm).norm_sqr());
            qb.add(q[k] * (p - pm).norm_sqr());
        }
        (0.25 * qa.value(), 0.25 * qb.value())
    }

    /// Applies a real even multiplier to any number of fields, two per
    /// transform.
    pub fn apply_many(&self, fields: &mut [&mut [f64]], mult: &[f64], ws: &mut Workspace) {
        let mut rest = fields;
        while !rest.is_empty() {
            let (head, tail) = rest.split_at_mut(1);
            if tail.is_empty() {
                self.apply_pair(head[0], None, mult, None, ws);
                rest = tail;
            } else {
                let (second, tail2) = tail.split_at_mut(1);
                self.apply_pair(head[0], Some(second[0]), mult, None, ws);
                rest = tail2;
            }
        }
    }

    /// Periodic convolution cell^d·Σ_y k(x−y)u(y) with a kernel given by its
    /// DFT `kernel_hat` (unnormalised), evaluated for one field.
    pub fn convolve(&self, u: &[f64], kernel_hat: &[f64], ws: &mut Workspace) -> Vec<f64> {
        let scale = self.lattice.cell_volume() / self.lattice.n_cells() as f64;
        let mult: Vec<f64> = kernel_hat.iter().map(|k| k * scale).collect();
        let mut out = u.to_vec();
        self.apply_pair(&mut out, None, &mult, None, ws);
        out
    }

    /// Real part of the DFT of a real, even table (which is itself real).
    pub fn real_dft(&self, table: &[f64], ws: &mut Workspace) -> Vec<f64> {
        self.forward_real(table, ws);
        ws.buf.iter().map(|z| z.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn lattice() -> LatticeSpec {
        LatticeSpec::new(3, 8, 4.0).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(LatticeSpec::new(3, 12, 1.0).is_err());
        assert!(LatticeSpec::new(3, 4, 1.0).is_err());
        assert!(LatticeSpec::new(3, 16, -1.0).is_err());
        let l = LatticeSpec::new(3, 16, 1.6).unwrap();
        assert!(l.check_resolves(0.25).is_ok());
        assert!(matches!(l.check_resolves(0.2), Err(Error::Resolution(_))));
    }

    #[test]
    fn index_round_trip() {
        let l = lattice();
        for flat in [0, 1, 7, 8, 63, 64, 511] {
            let idx: Vec<i64> = l.multi_index(flat).iter().map(|&j| j as i64).collect();
            assert_eq!(l.flat_index(&idx), flat);
        }
        assert_eq!(l.flat_index(&[-1, 0, 0]), 7 * 64);
        assert_eq!(l.wrap(5), -3);
    }

    fn naive_dft(l: &LatticeSpec, x: &[Complex64]) -> Vec<Complex64> {
        let n = l.n_per_side() as f64;
        (0..l.n_cells())
            .map(|k| {
                let km = l.multi_index(k);
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, v) in x.iter().enumerate() {
                    let jm = l.multi_index(j);
                    let phase: f64 = km.iter().zip(&jm).map(|(a, b)| (a * b) as f64).sum();
                    acc += v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * phase / n);
                }
                acc
            })
            .collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let l = lattice();
        let sp = Spectral::new(l);
        let mut ws = sp.workspace();
        let mut rng = crate::rng::substream(1, "fft", 0);
        let x: Vec<Complex64> = (0..l.n_cells())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        ws.buf.copy_from_slice(&x);
        sp.forward(&mut ws);
        let naive = naive_dft(&l, &x);
        for (a, b) in ws.buf.iter().zip(&naive) {
            assert!((a - b).norm() < 1e-10);
        }
        sp.inverse(&mut ws);
        for (a, b) in ws.buf.iter().zip(&x) {
            assert!((a / l.n_cells() as f64 - b).norm() < 1e-13);
        }
    }

    #[test]
    fn packed_heat_flow_equals_separate() {
        let l = lattice();
        let sp = Spectral::new(l);
        let mut ws = sp.workspace();
        let mut rng = crate::rng::substream(2, "heat", 0);
        let a0: Vec<f64> = (0..l.n_cells()).map(|_| rng.random()).collect();
        let b0: Vec<f64> = (0..l.n_cells()).map(|_| rng.random()).collect();
        let mult = sp.heat_multiplier(0.3);
        let (mut a, mut b) = (a0.clone(), b0.clone());
        sp.apply_pair(&mut a, Some(&mut b), &mult, None, &mut ws);
        let mut a1 = a0.clone();
        sp.apply_pair(&mut a1, None, &mult, None, &mut ws);
        let mut b1 = b0.clone();
        sp.apply_pair(&mut b1, None, &mult, None, &mut ws);
        for i in 0..a.len() {
            assert!((a[i] - a1[i]).abs() < 1e-13 && (b[i] - b1[i]).abs() < 1e-13);
        }
        // mass conservation and positivity of the lattice heat semigroup
        let m0: f64 = a0.iter().sum();
        let m1: f64 = a.iter().sum();
        assert!((m0 - m1).abs() < 1e-10);
        let mut spike = vec![0.0; l.n_cells()];
        spike[0] = 1.0;
        sp.apply_pair(&mut spike, None, &sp.heat_multiplier(0.01), None, &mut ws);
        assert!(spike.iter().all(|&v| v >= -1e-15));
    }

    #[test]
    fn quadratic_form_matches_direct_sum() {
        let l = lattice();
        let sp = Spectral::new(l);
        let mut ws = sp.workspace();
        let mut rng = crate::rng::substream(3, "quad", 0);
        let kernel = l.sample(&[0.0; 3], |x| (-x.iter().map(|v| v * v).sum::<f64>()).exp());
        let khat = sp.real_dft(&kernel, &mut ws);
        let ident: Vec<f64> = vec![1.0 / l.n_cells() as f64; l.n_cells()];
        let q: Vec<f64> = khat.iter().map(|k| k / l.n_cells() as f64).collect();
        let a: Vec<f64> = (0..l.n_cells()).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..l.n_cells()).map(|_| rng.random()).collect();
        let (mut a2, mut b2) = (a.clone(), b.clone());
        let (qa, qb) = sp.apply_pair(&mut a2, Some(&mut b2), &ident, Some(&q), &mut ws);
        let (qa2, _) = sp.quadratic_forms(&a, None, &q, &mut ws);
        assert!((qa2 / qa - 1.0).abs() < 1e-12);
        let direct = |u: &[f64]| {
            let mut s = 0.0;
            for x in 0..l.n_cells() {
                let xm = l.multi_index(x);
                for y in 0..l.n_cells() {
                    let ym = l.multi_index(y);
                    let diff: Vec<i64> = xm.iter().zip(&ym).map(|(p, q)| *p as i64 - *q as i64).collect();
                    s += u[x] * kernel[l.flat_index(&diff)] * u[y];
                }
            }
            s
        };
        assert!((qa / direct(&a) - 1.0).abs() < 1e-10);
        assert!((qb / direct(&b) - 1.0).abs() < 1e-10);
    }
}
