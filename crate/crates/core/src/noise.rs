//! The mollified noise F^ε on a periodic lattice.
//!
//! Space-time white noise W is convolved in space with the capped Riesz
//! kernel g^ε(x) = min(c₇|x|^{−(d+2)/2}, 1/ε), so increments over a step dt
//! have covariance dt·h^ε with h^ε = g^ε ∗ g^ε. On the lattice, g^ε is sampled
//! at minimum-image positions and the convolution is periodic; positive
//! semi-definiteness is structural because the covariance spectrum is
//! cell^d·ĝ², never a square root of anything.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{argument, Error, Result};
use crate::lattice::{LatticeField, LatticeSpec, Spectral, Workspace};
use crate::special::{riesz_constant, ModelParams};
use crate::stats::KahanSum;

/// Radial profile tabulated on increasing radii, interpolated log-log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialKernel {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// Mollification parameter; 0 for the unmollified kernel.
    pub epsilon: f64,
}

impl RadialKernel {
    /// Tabulates `f` on `n` log-spaced radii in [r_min, r_max].
    pub fn log_spaced<F: Fn(f64) -> f64>(f: F, r_min: f64, r_max: f64, n: usize, epsilon: f64) -> Self {
        let step = (r_max / r_min).ln() / (n - 1) as f64;
        let radii: Vec<f64> = (0..n).map(|i| r_min * (step * i as f64).exp()).collect();
        let values = radii.iter().map(|&r| f(r)).collect();
        Self { radii, values, epsilon }
    }

    /// Value at radius r: constant below the first radius, log-log linear
    /// in between, power-law extrapolated from the last panel beyond.
    pub fn eval(&self, r: f64) -> f64 {
        let n = self.radii.len();
        if r <= self.radii[0] {
            return self.values[0];
        }
        let i = match self.radii.binary_search_by(|x| x.total_cmp(&r)) {
            Ok(i) => return self.values[i],
            Err(i) => i.min(n - 1),
        };
        let (r0, r1) = (self.radii[i - 1], self.radii[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        if v0 <= 0.0 || v1 <= 0.0 {
            return v0 + (v1 - v0) * (r - r0) / (r1 - r0);
        }
        let w = (r / r0).ln() / (r1 / r0).ln();
        (v0.ln() + w * (v1 / v0).ln()).exp()
    }
}

/// g^ε(r) = min(c₇ r^{−(d+2)/2}, 1/ε); ε = 0 gives the Riesz kernel itself.
pub fn g_eps(d: usize, epsilon: f64, r: f64) -> f64 {
    let g = riesz_constant(d) * r.powf(-(d as f64 + 2.0) / 2.0);
    if epsilon > 0.0 {
        g.min(1.0 / epsilon)
    } else {
        g
    }
}

/// Kernel tables for one (d, ε, lattice) triple.
#[derive(Debug, Clone)]
pub struct Kernels {
    lattice: LatticeSpec,
    epsilon: f64,
    /// g^ε at the minimum-image position of every cell.
    pub g_table: Vec<f64>,
    /// Unnormalised DFT of `g_table` (real because g is even).
    pub g_hat: Vec<f64>,
    /// Periodic lattice convolution h^ε(x) = Σ_y g(y)g(x−y)·cell^d.
    pub h_table: Vec<f64>,
    /// Unnormalised DFT of `h_table`, equal to cell^d·ĝ² ≥ 0.
    pub h_hat: Vec<f64>,
    /// h^ε(0) = Σ g²·cell^d, the Itô correction rate.
    pub h0: f64,
    pub g_radial: RadialKernel,
    /// On-axis lattice values of h^ε at radii 0, cell, ..., L/2.
    pub h_radial: RadialKernel,
}

/// Tabulates g^ε on the lattice and forms h^ε = g^ε ∗ g^ε spectrally.
/// Errors if the lattice does not resolve ε (cell ≥ ε/2).
pub fn build_kernels(params: &ModelParams, epsilon: f64, lattice: LatticeSpec) -> Result<Kernels> {
    if !(epsilon > 0.0) {
        return argument(format!("epsilon = {epsilon} must be positive"));
    }
    if params.d() != lattice.d() {
        return argument("model and lattice dimensions differ");
    }
    lattice.check_resolves(epsilon)?;
    let d = lattice.d();
    let spectral = Spectral::new(lattice);
    let mut ws = spectral.workspace();
    let g_table = lattice.sample(&vec![0.0; d], |x| g_eps(d, epsilon, crate::special::norm(x)));
    let g_hat = spectral.real_dft(&g_table, &mut ws);
    let cv = lattice.cell_volume();
    let h_hat: Vec<f64> = g_hat.iter().map(|g| cv * g * g).collect();
    for z in ws.buf.iter_mut().zip(&h_hat) {
        *z.0 = Complex64::new(*z.1, 0.0);
    }
    spectral.inverse(&mut ws);
    let inv_n = 1.0 / lattice.n_cells() as f64;
    let mut h_table: Vec<f64> = ws.buf.iter().map(|z| z.re * inv_n).collect();
    let h0 = ksum_sq(&g_table) * cv;
    h_table[0] = h0;
    let g_radial = RadialKernel::log_spaced(
        |r| g_eps(d, epsilon, r),
        0.25 * lattice.cell(),
        lattice.box_length(),
        256,
        epsilon,
    );
    let half = lattice.n_per_side() / 2;
    let stride = lattice.n_per_side().pow(d as u32 - 1);
    let h_radial = RadialKernel {
        radii: (0..=half).map(|j| j as f64 * lattice.cell()).collect(),
        values: (0..=half).map(|j| h_table[j * stride]).collect(),
        epsilon,
    };
    Ok(Kernels {
        lattice,
        epsilon,
        g_table,
        g_hat,
        h_table,
        h_hat,
        h0,
        g_radial,
        h_radial,
    })
}

fn ksum_sq(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).collect::<KahanSum>().value()
}

impl Kernels {
    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Lattice h^ε at an integer lag (reduced periodically).
    pub fn h_at_lag(&self, lag: &[i64]) -> f64 {
        self.h_table[self.lattice.flat_index(lag)]
    }

    /// Multilinear periodic interpolation of the lattice h^ε at a continuum
    /// displacement.
    pub fn h_at(&self, x: &[f64]) -> f64 {
        let d = self.lattice.d();
        let h = self.lattice.cell();
        let mut base = [0i64; 8];
        let mut frac = [0f64; 8];
        for i in 0..d {
            let s = x[i] / h;
            let f = s.floor();
            base[i] = f as i64;
            frac[i] = s - f;
        }
        let mut total = 0.0;
        let mut corner = [0i64; 8];
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for i in 0..d {
                if mask >> i & 1 == 1 {
                    corner[i] = base[i] + 1;
                    w *= frac[i];
                } else {
                    corner[i] = base[i];
                    w *= 1.0 - frac[i];
                }
            }
            if w != 0.0 {
                total += w * self.h_table[self.lattice.flat_index(&corner[..d])];
            }
        }
        total
    }
}

/// One noise increment F^ε(t+dt) − F^ε(t) on the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub field: LatticeField,
    pub dt: f64,
    pub epsilon: f64,
    /// h^ε(0) of the kernel that produced the increment.
    pub h0: f64,
}

/// Draws increments dF = g^ε ∗ W with W white of variance dt/cell^d per
/// cell, via one complex FFT pair per increment (two increments when packed).
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    kernels: Arc<Kernels>,
    spectral: Arc<Spectral>,
    dt: f64,
    mult: Vec<f64>,
}

impl NoiseSampler {
    pub fn new(kernels: Arc<Kernels>, spectral: Arc<Spectral>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return argument(format!("dt = {dt} must be positive"));
        }
        if spectral.lattice() != kernels.lattice() {
            return argument("sampler lattice differs from kernel lattice");
        }
        let lat = kernels.lattice();
        let scale = dt.sqrt() * lat.cell_volume().sqrt() / lat.n_cells() as f64;
        let mult = kernels.g_hat.iter().map(|g| g * scale).collect();
        Ok(Self {
            kernels,
            spectral,
            dt,
            mult,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn kernels(&self) -> &Kernels {
        &self.kernels
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    /// Spectral multiplier sqrt(dt)·cell^{d/2}·ĝ/N.
    pub fn multiplier(&self) -> &[f64] {
        &self.mult
    }

    /// Fills `out` with one increment drawn from `rng`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64], ws: &mut Workspace) {
        for z in ws.buf.iter_mut() {
            *z = Complex64::new(rng.sample(StandardNormal), 0.0);
        }
        self.filter(ws);
        for (o, z) in out.iter_mut().zip(ws.buf.iter()) {
            *o = z.re;
        }
    }

    /// Two independent increments from one transform: `rng_a` feeds the real
    /// part and `rng_b` the imaginary part. Each output is bit-for-bit the
    /// law of `sample_into` with the same stream.
    pub fn sample_pair<R: Rng + ?Sized, S: Rng + ?Sized>(
        &self,
        rng_a: &mut R,
        rng_b: &mut S,
        out_a: &mut [f64],
        out_b: &mut [f64],
        ws: &mut Workspace,
    ) {
        for z in ws.buf.iter_mut() {
            z.re = rng_a.sample(StandardNormal);
        }
        for z in ws.buf.iter_mut() {
            z.im = rng_b.sample(StandardNormal);
        }
        self.filter(ws);
        for ((a, b), z) in out_a.iter_mut().zip(out_b.iter_mut()).zip(ws.buf.iter()) {
            *a = z.re;
            *b = z.im;
        }
    }

    /// Two consecutive increments from one stream and one transform: the
    /// first N normals feed `first`, the next N feed `second`. The draws are
    /// consumed in the same order as two calls to `sample_into`.
    pub fn sample_two_steps<R: Rng + ?Sized>(&self, rng: &mut R, first: &mut [f64], second: &mut [f64], ws: &mut Workspace) {
        for z in ws.buf.iter_mut() {
            z.re = rng.sample(StandardNormal);
        }
        for z in ws.buf.iter_mut() {
            z.im = rng.sample(StandardNormal);
        }
        self.filter(ws);
        for ((a, b), z) in first.iter_mut().zip(second.iter_mut()).zip(ws.buf.iter()) {
            *a = z.re;
            *b = z.im;
        }
    }

    fn filter(&self, ws: &mut Workspace) {
        self.spectral.forward(ws);
        for (z, &m) in ws.buf.iter_mut().zip(&self.mult) {
            *z *= m;
        }
        self.spectral.inverse(ws);
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, ws: &mut Workspace) -> NoiseIncrement {
        let lat = *self.kernels.lattice();
        let mut values = vec![0.0; lat.n_cells()];
        self.sample_into(rng, &mut values, ws);
        NoiseIncrement {
            field: LatticeField { lattice: lat, values },
            dt: self.dt,
            epsilon: self.kernels.epsilon(),
            h0: self.kernels.h0,
        }
    }
}

/// One-off increment; builds the transform plan on every call, so prefer
/// [`NoiseSampler`] in loops.
pub fn sample_noise_increment<R: Rng + ?Sized>(kernels: &Kernels, dt: f64, rng: &mut R) -> Result<NoiseIncrement> {
    let spectral = Arc::new(Spectral::new(*kernels.lattice()));
    let sampler = NoiseSampler::new(Arc::new(kernels.clone()), spectral.clone(), dt)?;
    let mut ws = spectral.workspace();
    Ok(sampler.sample(rng, &mut ws))
}

/// One row of an empirical covariance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub lag: Vec<i64>,
    pub estimate: f64,
    pub std_error: f64,
    pub n_increments: usize,
}

/// Streaming estimator of E[X(x)X(x+lag)] for stationary, mean-zero fields.
/// Each field contributes its spatial average per lag; standard errors are
/// leave-one-out jackknife over fields. Optionally also tracks the
/// cross-covariance between consecutive fields.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    lattice: LatticeSpec,
    lags: Vec<Vec<i64>>,
    shifts: Vec<Vec<usize>>,
    per_field: Vec<Vec<f64>>,
    cross: Vec<Vec<f64>>,
    previous: Option<Vec<f64>>,
}

impl CovarianceAccumulator {
    pub fn new(lattice: LatticeSpec, lags: &[Vec<i64>]) -> Result<Self> {
        if lags.is_empty() {
            return argument("no lags requested");
        }
        if lags.iter().any(|l| l.len() != lattice.d()) {
            return argument("lag vectors must have one entry per dimension");
        }
        let n = lattice.n_cells();
        let shifts = lags
            .iter()
            .map(|lag| {
                (0..n)
                    .map(|flat| {
                        let idx: Vec<i64> = lattice
                            .multi_index(flat)
                            .iter()
                            .zip(lag)
                            .map(|(&j, &l)| j as i64 + l)
                            .collect();
                        lattice.flat_index(&idx)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            lattice,
            lags: lags.to_vec(),
            shifts,
            per_field: vec![Vec::new(); lags.len()],
            cross: vec![Vec::new(); lags.len()],
            previous: None,
        })
    }

    pub fn push(&mut self, values: &[f64]) {
        let inv = 1.0 / self.lattice.n_cells() as f64;
        for (k, shift) in self.shifts.iter().enumerate() {
            let same: KahanSum = values.iter().zip(shift).map(|(a, &s)| a * values[s]).collect();
            self.per_field[k].push(same.value() * inv);
            if let Some(prev) = &self.previous {
                let c: KahanSum = prev.iter().zip(shift).map(|(a, &s)| a * values[s]).collect();
                self.cross[k].push(c.value() * inv);
            }
        }
        self.previous = Some(values.to_vec());
    }

    pub fn len(&self) -> usize {
        self.per_field[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same-time covariance per lag.
    pub fn table(&self) -> Result<Vec<CovarianceRow>> {
        self.rows(&self.per_field)
    }

    /// Covariance between consecutive fields per lag.
    pub fn cross_table(&self) -> Result<Vec<CovarianceRow>> {
        self.rows(&self.cross)
    }

    fn rows(&self, data: &[Vec<f64>]) -> Result<Vec<CovarianceRow>> {
        if data[0].len() < 2 {
            return argument("covariance estimate needs at least two fields");
        }
        Ok(self
            .lags
            .iter()
            .zip(data)
            .map(|(lag, xs)| {
                let (estimate, std_error) = jackknife_mean(xs);
                CovarianceRow {
                    lag: lag.clone(),
                    estimate,
                    std_error,
                    n_increments: xs.len(),
                }
            })
            .collect())
    }
}

fn jackknife_mean(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let total = crate::stats::ksum(xs);
    let mean = total / n;
    let loo: KahanSum = xs
        .iter()
        .map(|x| {
            let m = (total - x) / (n - 1.0);
            (m - mean) * (m - mean)
        })
        .collect();
    (mean, ((n - 1.0) / n * loo.value()).sqrt())
}

/// Spatially averaged covariance of a set of increments at the given lags,
/// with jackknife standard errors.
pub fn empirical_covariance(increments: &[NoiseIncrement], lags: &[Vec<i64>]) -> Result<Vec<CovarianceRow>> {
    let first = increments
        .first()
        .ok_or_else(|| Error::Argument("no increments supplied".into()))?;
    let mut acc = CovarianceAccumulator::new(first.field.lattice, lags)?;
    for inc in increments {
        if inc.field.lattice != first.field.lattice {
            return argument("increments live on different lattices");
        }
        acc.push(&inc.field.values);
    }
    acc.table()
}

/// Writes a field as a flat little-endian binary snapshot: header
/// (u64 d, u64 n_per_side, f64 box_length, f64 dt, f64 epsilon) followed by
/// the row-major cell values as f64.
pub fn write_snapshot(path: &Path, field: &LatticeField, dt: f64, epsilon: f64) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let lat = field.lattice;
    out.write_all(&(lat.d() as u64).to_le_bytes())?;
    out.write_all(&(lat.n_per_side() as u64).to_le_bytes())?;
    for v in [lat.box_length(), dt, epsilon] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &field.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

/// Reads a snapshot written by [`write_snapshot`]; returns (field, dt, epsilon).
pub fn read_snapshot(path: &Path) -> Result<(LatticeField, f64, f64)> {
    let io = |e: std::io::Error| Error::Argument(format!("snapshot {}: {e}", path.display()));
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io)?;
    if bytes.len() < 40 {
        return argument("snapshot header truncated");
    }
    let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().unwrap() };
    let d = u64::from_le_bytes(word(0)) as usize;
    let n = u64::from_le_bytes(word(1)) as usize;
    let (l, dt, eps) = (
        f64::from_le_bytes(word(2)),
        f64::from_le_bytes(word(3)),
        f64::from_le_bytes(word(4)),
    );
    let lattice = LatticeSpec::new(d, n, l)?;
    let body = &bytes[40..];
    if body.len() != 8 * lattice.n_cells() {
        return argument("snapshot body length does not match its header");
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((LatticeField::new(lattice, values)?, dt, eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(eps: f64) -> Kernels {
        let p = ModelParams::new(3, 0.4).unwrap();
        build_kernels(&p, eps, LatticeSpec::new(3, 16, 1.6).unwrap()).unwrap()
    }

    #[test]
    fn unresolved_epsilon_is_rejected() {
        let p = ModelParams::new(3, 0.4).unwrap();
        let lat = LatticeSpec::new(3, 8, 1.6).unwrap();
        assert!(matches!(build_kernels(&p, 0.3, lat), Err(Error::Resolution(_))));
    }

    #[test]
    fn h_spectrum_and_origin_value() {
        let k = setup(0.25);
        assert!(k.h_hat.iter().all(|&v| v >= 0.0));
        let direct: f64 = k.g_table.iter().map(|g| g * g).sum::<f64>() * k.lattice().cell_volume();
        assert!((k.h0 / direct - 1.0).abs() < 1e-12);
        // direct periodic convolution at one lag
        let lat = *k.lattice();
        let lag = [3i64, 1, 0];
        let mut s = 0.0;
        for y in 0..lat.n_cells() {
            let ym: Vec<i64> = lat.multi_index(y).iter().map(|&j| j as i64).collect();
            let diff: Vec<i64> = lag.iter().zip(&ym).map(|(a, b)| a - b).collect();
            s += k.g_table[y] * k.g_table[lat.flat_index(&diff)];
        }
        s *= lat.cell_volume();
        assert!((k.h_at_lag(&lag) / s - 1.0).abs() < 1e-10);
        assert!((k.h_at(&[0.3, 0.1, 0.0]) / s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn h_increases_as_epsilon_decreases() {
        let a = setup(0.25);
        let b = setup(0.5);
        for (x, y) in a.h_table.iter().zip(&b.h_table) {
            assert!(x >= &(y * (1.0 - 1e-12)));
        }
    }

    #[test]
    fn packed_pair_matches_single_draws() {
        let k = Arc::new(setup(0.25));
        let sp = Arc::new(Spectral::new(*k.lattice()));
        let s = NoiseSampler::new(k.clone(), sp.clone(), 0.01).unwrap();
        let mut ws = sp.workspace();
        let n = k.lattice().n_cells();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        s.sample_pair(
            &mut crate::rng::substream(1, "n", 0),
            &mut crate::rng::substream(1, "n", 1),
            &mut a,
            &mut b,
            &mut ws,
        );
        let mut a1 = vec![0.0; n];
        s.sample_into(&mut crate::rng::substream(1, "n", 0), &mut a1, &mut ws);
        for (x, y) in a.iter().zip(&a1) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn snapshot_round_trip() {
        let k = setup(0.25);
        let inc = sample_noise_increment(&k, 0.01, &mut crate::rng::substream(2, "snap", 0)).unwrap();
        let dir = std::env::temp_dir().join(format!("pam-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.bin");
        write_snapshot(&path, &inc.field, inc.dt, inc.epsilon).unwrap();
        let (f, dt, eps) = read_snapshot(&path).unwrap();
        assert_eq!(f, inc.field);
        assert_eq!((dt, eps), (0.01, 0.25));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn radial_interpolation_is_exact_for_power_laws() {
        let k = RadialKernel::log_spaced(|r| r.powf(-2.5), 0.01, 10.0, 50, 0.0);
        for r in [0.013, 0.5, 3.3] {
            assert!((k.eval(r) / r.powf(-2.5) - 1.0).abs() < 1e-12);
        }
    }
}
