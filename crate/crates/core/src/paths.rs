//! Monte Carlo over Brownian bridges and Bessel processes.
//!
//! Path functionals ∫₀ᵗ V(X_s) ds are integrated with the trapezoidal rule on
//! a uniform grid. Inverse-square potentials are capped at `clip` so a grid
//! point landing next to the singularity cannot dominate; every estimator
//! reports the fraction of paths on which the cap was active.
//!
//! Path i of an estimator always draws from substream i of the supplied
//! [`SeedStream`] and samples are reduced in path order, so estimates are
//! bit-identical for any number of worker threads.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{argument, domain, Error, Result};
use crate::noise::Kernels;
use crate::quadrature::GaussLegendre;
use crate::rng::SeedStream;
use crate::special::{self, ModelParams};
use crate::stats::MCEstimate;

/// Default cap on inverse-square integrands.
pub const DEFAULT_CLIP: f64 = 1e4;

/// Sample excess kurtosis above which a standard error is not trusted.
pub const KURTOSIS_LIMIT: f64 = 1e4;

/// A discretised bridge path on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgePath {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
}

/// Exact grid marginals of a d-dimensional Brownian bridge from `start` at
/// time 0 to `end` at time `t`, built by sequential Gaussian conditioning.
/// The last position is `end` itself.
pub fn sample_brownian_bridge<R: Rng + ?Sized>(
    d: usize,
    start: &[f64],
    end: &[f64],
    t: f64,
    m: usize,
    rng: &mut R,
) -> Result<BridgePath> {
    check_bridge_args(d, start, end, t, m)?;
    let mut buf = vec![0.0; (m + 1) * d];
    fill_bridge(d, start, end, t, m, rng, &mut buf);
    let times = (0..=m)
        .map(|i| if i == m { t } else { t * i as f64 / m as f64 })
        .collect();
    let positions = buf.chunks_exact(d).map(|p| p.to_vec()).collect();
    Ok(BridgePath { times, positions })
}

fn check_bridge_args(d: usize, start: &[f64], end: &[f64], t: f64, m: usize) -> Result<()> {
    if m < 2 {
        return argument(format!("bridge needs m >= 2 grid steps, got {m}"));
    }
    if !(t > 0.0) {
        return argument(format!("bridge duration t = {t} must be positive"));
    }
    if start.len() != d || end.len() != d {
        return argument("bridge endpoints must have d coordinates");
    }
    Ok(())
}

/// Writes the (m+1)·d grid positions of a bridge into `buf`.
fn fill_bridge<R: Rng + ?Sized>(d: usize, start: &[f64], end: &[f64], t: f64, m: usize, rng: &mut R, buf: &mut [f64]) {
    let h = t / m as f64;
    buf[..d].copy_from_slice(start);
    for k in 0..m - 1 {
        // remaining time before and after this step
        let rem = t - k as f64 * h;
        let rem_next = t - (k + 1) as f64 * h;
        let w = h / rem;
        let sd = (h * rem_next / rem).sqrt();
        let (head, tail) = buf.split_at_mut((k + 1) * d);
        let cur = &head[k * d..];
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            tail[i] = cur[i] + (end[i] - cur[i]) * w + sd * z;
        }
    }
    buf[m * d..].copy_from_slice(end);
}

/// Trapezoidal integral of `v` along grid positions with spacing `h`, on the
/// full grid and on every other point (m even), plus whether `v` reported a cap.
fn trapezoid<V: FnMut(&[f64]) -> (f64, bool)>(buf: &[f64], d: usize, h: f64, mut v: V) -> (f64, f64, bool) {
    let m = buf.len() / d - 1;
    let mut fine = 0.0;
    let mut coarse = 0.0;
    let mut clipped = false;
    for (i, p) in buf.chunks_exact(d).enumerate() {
        let (val, c) = v(p);
        clipped |= c;
        let end = i == 0 || i == m;
        fine += if end { 0.5 * val } else { val };
        if i % 2 == 0 {
            coarse += if end { 0.5 * val } else { val };
        }
    }
    (fine * h, coarse * 2.0 * h, clipped)
}

#[inline]
fn inv_square_capped(x: &[f64], clip: f64) -> (f64, bool) {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 * clip <= 1.0 {
        (clip, true)
    } else {
        (1.0 / r2, false)
    }
}

/// One bridge sample of the exponential functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalSample {
    /// exp(η·∫ min(|X|⁻², clip)) on the full grid.
    pub value: f64,
    /// Same functional on the half-resolution grid of the same path.
    pub coarse: f64,
    pub clipped: bool,
}

/// Draws one bridge and evaluates exp(η∫₀ᵗ min(|X_s|⁻², clip) ds).
pub fn bridge_functional<R: Rng + ?Sized>(
    d: usize,
    eta: f64,
    start: &[f64],
    end: &[f64],
    t: f64,
    m: usize,
    clip: f64,
    rng: &mut R,
) -> FunctionalSample {
    let mut buf = vec![0.0; (m + 1) * d];
    fill_bridge(d, start, end, t, m, rng, &mut buf);
    let (fine, coarse, clipped) = trapezoid(&buf, d, t / m as f64, |x| inv_square_capped(x, clip));
    FunctionalSample {
        value: (eta * fine).exp(),
        coarse: (eta * coarse).exp(),
        clipped,
    }
}

fn check_eta(d: usize, eta: f64) -> Result<()> {
    special::alpha_of_eta(d, eta).map(|_| ())
}

fn check_clip(clip: f64) -> Result<()> {
    if !(clip > 0.0) {
        return argument(format!("clip = {clip} must be positive"));
    }
    Ok(())
}

/// Turns per-path samples into an estimate, refusing heavy tails.
fn finish(samples: &[f64], clipped: usize) -> Result<MCEstimate> {
    let est = MCEstimate::from_samples(samples).with_clip_fraction(clipped as f64 / samples.len() as f64);
    if est.excess_kurtosis > KURTOSIS_LIMIT {
        return Err(Error::HeavyTailed(est.excess_kurtosis));
    }
    Ok(est)
}

/// Estimation mode for the time discretisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeRule {
    /// Plain trapezoid on m steps.
    Trapezoid,
    /// 2·(m-step) − (m/2-step) on the same path, cancelling the O(1/m) bias.
    Richardson,
}

/// E[exp(η∫₀ᵗ min(|X_s|⁻², clip) ds)] over Brownian bridges from `start` to `end`.
#[allow(clippy::too_many_arguments)]
pub fn exp_functional_mc(
    d: usize,
    eta: f64,
    start: &[f64],
    end: &[f64],
    t: f64,
    m: usize,
    n_paths: usize,
    clip: f64,
    rule: TimeRule,
    seeds: &SeedStream,
) -> Result<MCEstimate> {
    check_bridge_args(d, start, end, t, m)?;
    check_eta(d, eta)?;
    check_clip(clip)?;
    if start.iter().all(|&v| v == 0.0) && end.iter().all(|&v| v == 0.0) {
        return domain("bridge pinned at the origin at both ends: the functional is a.s. infinite");
    }
    if n_paths == 0 {
        return argument("n_paths must be positive");
    }
    if rule == TimeRule::Richardson && m % 2 != 0 {
        return argument("Richardson extrapolation needs an even m");
    }
    if eta == 0.0 {
        return Ok(MCEstimate::from_samples(&vec![1.0; n_paths]));
    }
    let out: Vec<(f64, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.substream(i as u64);
            let s = bridge_functional(d, eta, start, end, t, m, clip, &mut rng);
            let v = match rule {
                TimeRule::Trapezoid => s.value,
                TimeRule::Richardson => 2.0 * s.value - s.coarse,
            };
            (v, s.clipped)
        })
        .collect();
    let samples: Vec<f64> = out.iter().map(|p| p.0).collect();
    finish(&samples, out.iter().filter(|p| p.1).count())
}

/// Estimates of the Bessel-bridge moment E[exp(η∫ds/R²) | R_t ≈ b] for a
/// ladder of bin half-widths, using one common set of d-dimensional Brownian
/// paths started at a·e₁ (their norm is a Bessel(d) process). Each estimate
/// averages the functional over paths with |R_t − b| ≤ δ.
#[allow(clippy::too_many_arguments)]
pub fn bessel_binned_ladder(
    d: usize,
    eta: f64,
    a: f64,
    b: f64,
    half_widths: &[f64],
    t: f64,
    m: usize,
    n_paths: usize,
    seeds: &SeedStream,
) -> Result<Vec<MCEstimate>> {
    check_eta(d, eta)?;
    if !(a > 0.0 && b > 0.0 && t > 0.0) {
        return domain("a, b and t must be positive");
    }
    if m < 2 || n_paths == 0 || half_widths.is_empty() {
        return argument("need m >= 2, n_paths >= 1 and at least one bin width");
    }
    if half_widths.iter().any(|&w| !(w > 0.0 && w < b)) {
        return argument("bin half-widths must lie in (0, b)");
    }
    let h = t / m as f64;
    let sq = h.sqrt();
    let out: Vec<(f64, f64, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.substream(i as u64);
            let mut x = vec![0.0; d];
            x[0] = a;
            let mut acc = 0.5 / (a * a).max(1.0 / DEFAULT_CLIP);
            let mut clipped = false;
            for k in 1..=m {
                for v in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sq * z;
                }
                let (val, c) = inv_square_capped(&x, DEFAULT_CLIP);
                clipped |= c;
                acc += if k == m { 0.5 * val } else { val };
            }
            let r = special::norm(&x);
            ((eta * acc * h).exp(), r, clipped)
        })
        .collect();
    half_widths
        .iter()
        .map(|&w| {
            let hits: Vec<&(f64, f64, bool)> = out.iter().filter(|p| (p.1 - b).abs() <= w).collect();
            if hits.len() < 2 {
                return Err(Error::InsufficientSamples(format!(
                    "{} of {n_paths} paths ended within {w} of {b}",
                    hits.len()
                )));
            }
            let samples: Vec<f64> = hits.iter().map(|p| p.0).collect();
            finish(&samples, hits.iter().filter(|p| p.2).count())
        })
        .collect()
}

/// Single-width version of [`bessel_binned_ladder`].
#[allow(clippy::too_many_arguments)]
pub fn bessel_binned_exp_moment(
    d: usize,
    eta: f64,
    a: f64,
    b: f64,
    half_width: f64,
    t: f64,
    m: usize,
    n_paths: usize,
    seeds: &SeedStream,
) -> Result<MCEstimate> {
    Ok(bessel_binned_ladder(d, eta, a, b, &[half_width], t, m, n_paths, seeds)?.remove(0))
}

/// The quantity a binned estimator converges to as m → ∞:
/// ∫_{b−δ}^{b+δ} q(a,r)·M(a,r) dr / ∫_{b−δ}^{b+δ} q(a,r) dr with M the exact
/// bridge moment.
pub fn binned_exact_target(d: usize, eta: f64, a: f64, b: f64, half_width: f64, t: f64) -> Result<f64> {
    let gl = GaussLegendre::new(32);
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, w) in gl.mapped(b - half_width, b + half_width) {
        let q = special::bessel_transition_density(d as f64, t, a, r)?;
        num += w * q * special::bridge_exp_moment_exact(d, eta, a, r, t)?;
        den += w * q;
    }
    Ok(num / den)
}

/// Pair potential used by the interacting-bridge functionals.
#[derive(Debug, Clone)]
pub enum PairKernel {
    /// min(|x|⁻², clip).
    InverseSquare { clip: f64 },
    /// The lattice covariance h^ε, interpolated and periodic.
    Mollified(Arc<Kernels>),
}

impl PairKernel {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> (f64, bool) {
        match self {
            PairKernel::InverseSquare { clip } => inv_square_capped(x, *clip),
            PairKernel::Mollified(k) => (k.h_at(x), false),
        }
    }
}

/// Per-path exponential pair functional exp(κ²Σ_{j<k}∫V(X^j−X^k)) for n
/// independent bridges, and whether any cap was hit.
#[allow(clippy::too_many_arguments)]
pub fn pair_functional<R: Rng + ?Sized>(
    d: usize,
    coupling: f64,
    starts: &[Vec<f64>],
    ends: &[Vec<f64>],
    t: f64,
    m: usize,
    kernel: &PairKernel,
    rng: &mut R,
) -> (f64, bool) {
    let n = starts.len();
    let mut bufs: Vec<Vec<f64>> = vec![vec![0.0; (m + 1) * d]; n];
    for (j, buf) in bufs.iter_mut().enumerate() {
        fill_bridge(d, &starts[j], &ends[j], t, m, rng, buf);
    }
    let h = t / m as f64;
    let mut diff = vec![0.0; d];
    let mut total = 0.0;
    let mut clipped = false;
    for j in 0..n {
        for k in j + 1..n {
            let mut acc = 0.0;
            for i in 0..=m {
                for c in 0..d {
                    diff[c] = bufs[j][i * d + c] - bufs[k][i * d + c];
                }
                let (v, cl) = kernel.eval(&diff);
                clipped |= cl;
                acc += if i == 0 || i == m { 0.5 * v } else { v };
            }
            total += acc * h;
        }
    }
    ((coupling * total).exp(), clipped)
}

fn check_pair_args(d: usize, starts: &[Vec<f64>], ends: &[Vec<f64>], t: f64, m: usize, n_paths: usize) -> Result<()> {
    if starts.len() < 2 || starts.len() != ends.len() {
        return argument("pair functional needs n >= 2 matching starts and ends");
    }
    for (s, e) in starts.iter().zip(ends) {
        check_bridge_args(d, s, e, t, m)?;
    }
    if n_paths == 0 {
        return argument("n_paths must be positive");
    }
    Ok(())
}

/// E[exp(Σ_{j<k} c·∫₀ᵗ V(X^j_s − X^k_s) ds)] over independent bridges with a
/// general pair potential and coupling c.
#[allow(clippy::too_many_arguments)]
pub fn pair_interaction_mc_kernel(
    d: usize,
    coupling: f64,
    starts: &[Vec<f64>],
    ends: &[Vec<f64>],
    t: f64,
    m: usize,
    n_paths: usize,
    kernel: &PairKernel,
    seeds: &SeedStream,
) -> Result<MCEstimate> {
    check_pair_args(d, starts, ends, t, m, n_paths)?;
    if coupling == 0.0 {
        return Ok(MCEstimate::from_samples(&vec![1.0; n_paths]));
    }
    let out: Vec<(f64, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|i| pair_functional(d, coupling, starts, ends, t, m, kernel, &mut seeds.substream(i as u64)))
        .collect();
    let samples: Vec<f64> = out.iter().map(|p| p.0).collect();
    finish(&samples, out.iter().filter(|p| p.1).count())
}

/// E[exp(Σ_{j<k} κ²∫₀ᵗ min(|X^j_s − X^k_s|⁻², clip) ds)] over n independent
/// Brownian bridges.
#[allow(clippy::too_many_arguments)]
pub fn pair_interaction_mc(
    params: &ModelParams,
    starts: &[Vec<f64>],
    ends: &[Vec<f64>],
    t: f64,
    m: usize,
    n_paths: usize,
    clip: f64,
    seeds: &SeedStream,
) -> Result<MCEstimate> {
    check_clip(clip)?;
    let k2 = params.kappa() * params.kappa();
    pair_interaction_mc_kernel(
        params.d(),
        k2,
        starts,
        ends,
        t,
        m,
        n_paths,
        &PairKernel::InverseSquare { clip },
        seeds,
    )
}

/// Hölder bound Π_{j<k} (E[exp(n(n−1)κ²∫|X^j−X^k|⁻²)])^{1/(n(n−1))} on the
/// n-bridge moment. Each pair factor is estimated on its difference bridge
/// (X^j−X^k)/√2 with η = n(n−1)κ²/2; the standard error is propagated by the
/// delta method.
#[allow(clippy::too_many_arguments)]
pub fn holder_pair_bound(
    params: &ModelParams,
    starts: &[Vec<f64>],
    ends: &[Vec<f64>],
    t: f64,
    m: usize,
    n_paths: usize,
    clip: f64,
    seeds: &SeedStream,
) -> Result<MCEstimate> {
    let d = params.d();
    check_pair_args(d, starts, ends, t, m, n_paths)?;
    let n = starts.len();
    let p = (n * (n - 1)) as f64;
    let eta = p * params.kappa() * params.kappa() / 2.0;
    if eta > special::eta_max(d) {
        return domain(format!(
            "Hölder exponent gives eta = {eta}, beyond the finite-moment range {}",
            special::eta_max(d)
        ));
    }
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut log_bound = 0.0;
    let mut rel_var = 0.0;
    let mut clip_fraction = 0.0f64;
    for j in 0..n {
        for k in j + 1..n {
            let x: Vec<f64> = (0..d).map(|c| (starts[j][c] - starts[k][c]) * s2).collect();
            let y: Vec<f64> = (0..d).map(|c| (ends[j][c] - ends[k][c]) * s2).collect();
            // min(|√2 z|⁻², clip) = ½·min(|z|⁻², 2·clip)
            let e = exp_functional_mc(
                d,
                eta,
                &x,
                &y,
                t,
                m,
                n_paths,
                2.0 * clip,
                TimeRule::Trapezoid,
                &seeds.child(&format!("pair-{j}-{k}")),
            )?;
            log_bound += e.mean.ln() / p;
            rel_var += (e.std_error / e.mean / p).powi(2);
            clip_fraction = clip_fraction.max(e.clip_fraction);
        }
    }
    let mean = log_bound.exp();
    Ok(MCEstimate {
        mean,
        std_error: mean * rel_var.sqrt(),
        n_samples: n_paths,
        clip_fraction,
        excess_kurtosis: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bridge_is_pinned_bit_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = [0.3, -1.7, 2.2];
        let e = [1.0 / 3.0, 0.1, -5.5];
        let p = sample_brownian_bridge(3, &s, &e, 0.7, 9, &mut rng).unwrap();
        assert_eq!(p.positions[0], s.to_vec());
        assert_eq!(p.positions[9], e.to_vec());
        assert_eq!(p.times[9], 0.7);
        assert!(p.times.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_brownian_bridge(3, &s, &e, 0.7, 1, &mut rng).is_err());
    }

    #[test]
    fn eta_zero_is_exactly_one() {
        let seeds = SeedStream::new(1, "t");
        let e = exp_functional_mc(3, 0.0, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1.0, 8, 10, 1e4, TimeRule::Trapezoid, &seeds)
            .unwrap();
        assert_eq!((e.mean, e.std_error), (1.0, 0.0));
        let z = [0.0; 3];
        assert!(matches!(
            exp_functional_mc(3, 0.1, &z, &z, 1.0, 8, 10, 1e4, TimeRule::Trapezoid, &seeds),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn binned_target_tends_to_exact_value() {
        let exact = special::bridge_exp_moment_exact(3, 0.1, 1.0, 1.0, 1.0).unwrap();
        let wide = binned_exact_target(3, 0.1, 1.0, 1.0, 0.1, 1.0).unwrap();
        let narrow = binned_exact_target(3, 0.1, 1.0, 1.0, 0.025, 1.0).unwrap();
        assert!((narrow - exact).abs() < (wide - exact).abs());
        assert!((narrow / exact - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empty_bin_is_reported() {
        let seeds = SeedStream::new(1, "bin");
        let r = bessel_binned_exp_moment(3, 0.1, 1.0, 5.0, 1e-6, 0.01, 4, 50, &seeds);
        assert!(matches!(r, Err(Error::InsufficientSamples(_))));
    }
}
