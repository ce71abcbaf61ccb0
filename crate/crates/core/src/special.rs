//! Closed-form quantities: model exponents, the Gaussian heat kernel, modified
//! Bessel functions I_ν, Bessel transition densities, the exact exponential
//! moment of a Bessel bridge and the Riesz constant c₇.
//!
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{argument, domain, Result};

/// Spatial dimension, coupling and the derived intermittency exponent
/// α = (d−2)/2 − sqrt(((d−2)/2)² − κ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    d: usize,
    kappa: f64,
    alpha: f64,
}

impl ModelParams {
    /// Validates d ≥ 3 and 0 < κ < (d−2)/2.
    pub fn new(d: usize, kappa: f64) -> Result<Self> {
        if d < 3 {
            return domain(format!("dimension d = {d} must be at least 3"));
        }
        let half = (d as f64 - 2.0) / 2.0;
        if !(kappa > 0.0 && kappa < half) {
            return domain(format!(
                "kappa = {kappa} violates 0 < kappa < (d-2)/2 = {half}: the second moment of the solution is infinite beyond this bound"
            ));
        }
        Ok(Self::unchecked(d, kappa))
    }

    /// Same as [`ModelParams::new`] but also admits κ = 0, the null model used
    /// by every experiment's sanity configuration.
    pub fn with_null(d: usize, kappa: f64) -> Result<Self> {
        if kappa == 0.0 && d >= 3 {
            return Ok(Self::unchecked(d, 0.0));
        }
        Self::new(d, kappa)
    }

    fn unchecked(d: usize, kappa: f64) -> Self {
        let half = (d as f64 - 2.0) / 2.0;
        let alpha = half - (half * half - kappa * kappa).sqrt();
        Self { d, kappa, alpha }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The exponential-functional coefficient η = κ²/2 seen by the difference
    /// bridge (X¹ − X²)/√2 in the two-point moment.
    pub fn pair_eta(&self) -> EtaParam {
        EtaParam::new(self.d, 0.5 * self.kappa * self.kappa)
            .expect("kappa < (d-2)/2 keeps kappa^2/2 inside the admissible eta range")
    }
}

/// Coefficient η of the exponential functional exp(η∫ds/|X_s|²) together with
/// its exponent α(η).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaParam {
    d: usize,
    eta: f64,
    alpha_eta: f64,
}

impl EtaParam {
    pub fn new(d: usize, eta: f64) -> Result<Self> {
        let alpha_eta = alpha_of_eta(d, eta)?;
        Ok(Self { d, eta, alpha_eta })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha_eta(&self) -> f64 {
        self.alpha_eta
    }
}

/// Largest η with a finite exponential moment, (d−2)²/8.
pub fn eta_max(d: usize) -> f64 {
    let dm2 = d as f64 - 2.0;
    dm2 * dm2 / 8.0
}

/// α(η) = (d−2)/2 − sqrt(((d−2)/2)² − 2η) for 0 ≤ η ≤ (d−2)²/8.
pub fn alpha_of_eta(d: usize, eta: f64) -> Result<f64> {
    if d < 3 {
        return domain(format!("dimension d = {d} must be at least 3"));
    }
    let max = eta_max(d);
    if !(0.0..=max).contains(&eta) {
        return domain(format!(
            "eta = {eta} outside [0, (d-2)^2/8 = {max}]: no finite exponential moment regime"
        ));
    }
    let half = (d as f64 - 2.0) / 2.0;
    Ok(half - (half * half - 2.0 * eta).max(0.0).sqrt())
}

/// Index μ = sqrt(((d−2)/2)² − 2η) of the dimension-shifted Bessel process.
fn shifted_index(d: usize, eta: f64) -> f64 {
    let half = (d as f64 - 2.0) / 2.0;
    (half * half - 2.0 * eta).max(0.0).sqrt()
}

/// Gaussian heat kernel G_t(x) = (2πt)^(−d/2) exp(−|x|²/2t).
pub fn heat_kernel(d: usize, t: f64, x: &[f64]) -> Result<f64> {
    if t <= 0.0 {
        return domain(format!("heat kernel needs t > 0, got {t}"));
    }
    if x.len() != d {
        return argument(format!("point has {} coordinates, expected {d}", x.len()));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((2.0 * PI * t).powf(-(d as f64) / 2.0) * (-r2 / (2.0 * t)).exp())
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1−x) = π / sin(πx)
        return (PI / (PI * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Γ(x) for real x away from the poles.
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        return PI / ((PI * x).sin() * gamma(1.0 - x));
    }
    ln_gamma(x).exp()
}

/// Switchover between the power series and the large-argument expansion:
/// the series is used for z ≤ ν + 20.
pub const BESSEL_SWITCH_OFFSET: f64 = 20.0;

/// ln I_ν(z) for ν ≥ 0, z ≥ 0. Returns −∞ for I_ν(0) = 0.
///
/// For z ≤ ν + 20 the ascending series Σ (z/2)^{2k+ν} / (k! Γ(k+ν+1)) is summed
/// with its leading factor kept in log form; all terms are positive so there is
/// no cancellation. Beyond that the Hankel expansion
/// I_ν(z) ≈ e^z / sqrt(2πz) Σ (−1)^k a_k(ν) / z^k is summed to its smallest
/// term. Both branches stay in log space, so z in the thousands is fine.
pub fn ln_bessel_i(nu: f64, z: f64) -> f64 {
    debug_assert!(nu >= 0.0 && z >= 0.0);
    if z == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if z <= nu + BESSEL_SWITCH_OFFSET {
        let lead = nu * (0.5 * z).ln() - ln_gamma(nu + 1.0);
        let q = 0.25 * z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= q / (k * (k + nu));
            sum += term;
            if term < 1e-17 * sum && k > 0.5 * z {
                break;
            }
        }
        lead + sum.ln()
    } else {
        let mu4 = 4.0 * nu * nu;
        let mut term = 1.0f64;
        let mut sum = 1.0f64;
        let mut k = 0.0;
        loop {
            k += 1.0;
            let odd = 2.0 * k - 1.0;
            let next = -term * (mu4 - odd * odd) / (8.0 * k * z);
            if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
                if next.abs() < term.abs() {
                    sum += next;
                }
                break;
            }
            term = next;
            sum += term;
            if k > 200.0 {
                break;
            }
        }
        z - 0.5 * (2.0 * PI * z).ln() + sum.ln()
    }
}

/// Modified Bessel function of the first kind I_ν(z).
pub fn bessel_i(nu: f64, z: f64) -> Result<f64> {
    if nu < 0.0 || z < 0.0 {
        return domain(format!("bessel_i needs nu >= 0 and z >= 0, got ({nu}, {z})"));
    }
    Ok(ln_bessel_i(nu, z).exp())
}

/// ln q^{(dim)}_t(a, b), the log transition density of a Bessel process of
/// (possibly fractional) dimension `dim` ≥ 2 from a to b over time t.
pub fn ln_bessel_transition_density(dim: f64, t: f64, a: f64, b: f64) -> Result<f64> {
    if !(t > 0.0 && a > 0.0 && b > 0.0) {
        return domain(format!(
            "Bessel transition density needs t, a, b > 0, got t={t}, a={a}, b={b}"
        ));
    }
    if dim < 2.0 {
        return domain(format!("Bessel dimension {dim} below 2"));
    }
    let nu = dim / 2.0 - 1.0;
    Ok(-t.ln() - nu * a.ln() + 0.5 * dim * b.ln() - (a * a + b * b) / (2.0 * t)
        + ln_bessel_i(nu, a * b / t))
}

/// q^{(dim)}_t(a,b) = t⁻¹ a^{−(dim−2)/2} b^{dim/2} exp(−(a²+b²)/2t) I_{dim/2−1}(ab/t).
pub fn bessel_transition_density(dim: f64, t: f64, a: f64, b: f64) -> Result<f64> {
    Ok(ln_bessel_transition_density(dim, t, a, b)?.exp())
}

/// Density of |X| for X ~ N(m, v·I_d) with |m| = a, evaluated at ρ ≥ 0.
///
/// For a > 0 this is the Bessel transition density q^{(d)}_v(a, ρ); at a = 0 it
/// is the scaled chi density.
pub fn noncentral_chi_density(d: usize, v: f64, a: f64, rho: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    let df = d as f64;
    // the a → 0 limit is reached smoothly once a·ρ/v is tiny
    if a * rho / v < 1e-12 {
        let ln = (df - 1.0) * rho.ln() - (rho * rho + a * a) / (2.0 * v)
            - (0.5 * df - 1.0) * 2f64.ln()
            - ln_gamma(0.5 * df)
            - 0.5 * df * v.ln();
        return ln.exp();
    }
    ln_bessel_transition_density(df, v, a, rho)
        .map(f64::exp)
        .unwrap_or(0.0)
}

/// Exact exponential moment of the d-dimensional Bessel bridge from a to b
/// over [0, t]:
///
/// E^{(d)}_{a,b,t}[exp(η∫ds/R_s²)] = a^{−α(η)} b^{α(η)} q^{(2μ+2)}_t(a,b) / q^{(d)}_t(a,b)
///
/// with μ = sqrt(((d−2)/2)² − 2η). Computed in log space so large ab/t does
/// not produce 0/0; η = 0 returns exactly 1.
pub fn bridge_exp_moment_exact(d: usize, eta: f64, a: f64, b: f64, t: f64) -> Result<f64> {
    let alpha = alpha_of_eta(d, eta)?;
    if !(a > 0.0 && b > 0.0 && t > 0.0) {
        return domain(format!(
            "bridge moment needs a, b, t > 0, got a={a}, b={b}, t={t}"
        ));
    }
    if eta == 0.0 {
        return Ok(1.0);
    }
    let mu = shifted_index(d, eta);
    let ln_shift = ln_bessel_transition_density(2.0 * mu + 2.0, t, a, b)?;
    let ln_base = ln_bessel_transition_density(d as f64, t, a, b)?;
    Ok((alpha * (b.ln() - a.ln()) + ln_shift - ln_base).exp())
}

/// Envelope C(η)·(1 + t/(|x||y|))^{α(η)} for the Brownian-bridge exponential
/// moment. Returns +∞ when either endpoint is the origin.
pub fn bridge_exp_moment_bound(eta: &EtaParam, x: &[f64], y: &[f64], t: f64, c_eta: f64) -> f64 {
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return f64::INFINITY;
    }
    c_eta * (1.0 + t / (nx * ny)).powf(eta.alpha_eta())
}

/// Fits C(η) as the maximum of exact / (1 + t/(ab))^{α(η)} over a log-spaced
/// grid of (a, b, t) spanning `decades` decades either side of 1.
pub fn calibrate_bound_constant(d: usize, eta: f64, points_per_axis: usize, decades: f64) -> Result<f64> {
    let alpha = alpha_of_eta(d, eta)?;
    let n = points_per_axis.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|i| 10f64.powf(-decades + 2.0 * decades * i as f64 / (n - 1) as f64))
        .collect();
    let mut best = 0.0f64;
    for &a in &grid {
        for &b in &grid {
            for &t in &grid {
                let exact = bridge_exp_moment_exact(d, eta, a, b, t)?;
                let shape = (1.0 + t / (a * b)).powf(alpha);
                best = best.max(exact / shape);
            }
        }
    }
    Ok(best)
}

/// Constant c₇ with (c₇|·|^{−(d+2)/2}) ∗ (c₇|·|^{−(d+2)/2}) = |·|⁻² in R^d.
///
/// Riesz composition: |x|^{−(d−a)} ∗ |x|^{−(d−b)} = C |x|^{−(d−a−b)} with
/// C = π^{d/2} Γ(a/2)Γ(b/2)Γ((d−a−b)/2) / (Γ((d−a)/2)Γ((d−b)/2)Γ((a+b)/2)).
/// Here a = b = (d−2)/2, so c₇ = C^{−1/2}.
pub fn riesz_constant(d: usize) -> f64 {
    let df = d as f64;
    let a = (df - 2.0) / 2.0;
    let ln_c = 0.5 * df * PI.ln() + 2.0 * ln_gamma(a / 2.0) + ln_gamma((df - 2.0 * a) / 2.0)
        - 2.0 * ln_gamma((df - a) / 2.0)
        - ln_gamma(a);
    (-0.5 * ln_c).exp()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
