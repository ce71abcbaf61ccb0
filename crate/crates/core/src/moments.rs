//! Reference values for the first and second moments of u_t(f): the heat-flow
//! first moment, the Brownian-bridge representation of the second moment, its
//! singular envelope, the ‖·‖_α norms and the Gaussian smoothing inequality.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{argument, domain, Error, Result};
use crate::paths::{pair_functional, PairKernel};
use crate::quadrature::{adaptive, GaussLegendre};
use crate::rng::SeedStream;
use crate::spde::{MeasureKind, MeasureSpec, TestFunction};
use crate::special::{self, noncentral_chi_density, ModelParams};
use crate::stats::MCEstimate;

/// Atoms plus an optional uniform density on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteMeasure {
    pub atoms: Vec<(Vec<f64>, f64)>,
    pub lebesgue: Option<LebesgueBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LebesgueBox {
    pub intensity: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn atoms(atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let m = Self { atoms, lebesgue: None };
        m.validate()?;
        Ok(m)
    }

    pub fn lebesgue_box(intensity: f64, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let m = Self {
            atoms: Vec::new(),
            lebesgue: Some(LebesgueBox { intensity, lower, upper }),
        };
        m.validate()?;
        Ok(m)
    }

    fn dim(&self) -> Option<usize> {
        self.atoms
            .first()
            .map(|a| a.0.len())
            .or_else(|| self.lebesgue.as_ref().map(|b| b.lower.len()))
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim().ok_or_else(|| Error::Argument("empty measure".into()))?;
        if self.atoms.iter().any(|(p, w)| p.len() != d || !(*w > 0.0)) {
            return argument("atoms need positive weights and a common dimension");
        }
        if let Some(b) = &self.lebesgue {
            if b.lower.len() != d || b.upper.len() != d || !(b.intensity > 0.0) {
                return argument("Lebesgue box needs a positive intensity and d-dimensional corners");
            }
            if b.lower.iter().zip(&b.upper).any(|(l, u)| !(u > l)) {
                return argument("Lebesgue box corners must satisfy lower < upper");
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.1).sum();
        let boxed = self.lebesgue.as_ref().map_or(0.0, |b| {
            b.intensity * b.lower.iter().zip(&b.upper).map(|(l, u)| u - l).product::<f64>()
        });
        atoms + boxed
    }
}

/// ‖μ(dx)e^{−a|x|}‖_α, the square root of ∫∫(1 + |x−y|^{−α}) ν(dx)ν(dy).
///
/// Any atom makes the diagonal term infinite (an atom is not in H_α), so
/// +∞ is returned; [`h_alpha_off_diagonal`] gives the distinct-pair part.
/// The box-box term uses a pyramid (Duffy) split of the difference variable,
/// which absorbs the |z|^{−α} singularity into the radial Jacobian.
pub fn h_alpha_norm(mu: &DiscreteMeasure, alpha: f64, a: f64) -> f64 {
    let Some(d) = mu.dim() else { return f64::NAN };
    if mu.validate().is_err() || !(alpha > 0.0 && alpha < d as f64) || !(a >= 0.0) {
        return f64::NAN;
    }
    if !mu.atoms.is_empty() {
        return f64::INFINITY;
    }
    let b = mu.lebesgue.as_ref().expect("validated non-empty measure");
    box_box(b, alpha, a).sqrt()
}

/// Σ_{i≠j} w_i w_j e^{−a|x_i|−a|x_j|}(1 + |x_i − x_j|^{−α}) over distinct atoms
/// (coincident distinct atoms give +∞).
pub fn h_alpha_off_diagonal(mu: &DiscreteMeasure, alpha: f64, a: f64) -> f64 {
    let tilt = |p: &[f64]| (-a * special::norm(p)).exp();
    let mut total = 0.0;
    for (i, (pi, wi)) in mu.atoms.iter().enumerate() {
        for (j, (pj, wj)) in mu.atoms.iter().enumerate() {
            if i == j {
                continue;
            }
            let r: f64 = special::norm(&pi.iter().zip(pj).map(|(x, y)| x - y).collect::<Vec<_>>());
            if r == 0.0 {
                return f64::INFINITY;
            }
            total += wi * wj * tilt(pi) * tilt(pj) * (1.0 + r.powf(-alpha));
        }
    }
    total
}

// ∫∫_{box²} (1 + |x−y|^{−α}) e^{−a|x|−a|y|} c² dx dy
fn box_box(b: &LebesgueBox, alpha: f64, a: f64) -> f64 {
    let d = b.lower.len();
    let w: Vec<f64> = b.lower.iter().zip(&b.upper).map(|(l, u)| u - l).collect();
    let c2 = b.intensity * b.intensity;
    let inner = GaussLegendre::new(8);
    // overlap integral of the tilt over box ∩ (box + z)
    let overlap = |z: &[f64]| -> f64 {
        if a == 0.0 {
            return w.iter().zip(z).map(|(wi, zi)| (wi - zi.abs()).max(0.0)).product();
        }
        let lo: Vec<f64> = (0..d).map(|i| b.lower[i].max(b.lower[i] + z[i])).collect();
        let hi: Vec<f64> = (0..d).map(|i| b.upper[i].min(b.upper[i] + z[i])).collect();
        if lo.iter().zip(&hi).any(|(l, h)| h <= l) {
            return 0.0;
        }
        tensor_gl(&inner, &lo, &hi, |x| {
            let xz: Vec<f64> = x.iter().zip(z).map(|(p, q)| p - q).collect();
            (-a * (special::norm(x) + special::norm(&xz))).exp()
        })
    };
    let plain = {
        let zero = vec![0.0; d];
        if a == 0.0 {
            w.iter().product::<f64>().powi(2)
        } else {
            let single = tensor_gl(&GaussLegendre::new(12), &b.lower, &b.upper, |x| (-a * special::norm(x)).exp());
            let _ = zero;
            single * single
        }
    };
    // pyramid k±: z_k = ±w_k s, z_j = w_j s u_j with u ∈ [−1, 1]^{d−1} split at 0
    let radial = GaussLegendre::new(16);
    let side = GaussLegendre::new(10);
    let jac: f64 = w.iter().product();
    let mut singular = 0.0;
    let mut z = vec![0.0; d];
    let others = d - 1;
    let n_boxes = 1usize << others;
    for k in 0..d {
        for sign in [-1.0, 1.0] {
            for quadrant in 0..n_boxes {
                let lo: Vec<f64> = (0..others).map(|j| if quadrant >> j & 1 == 1 { 0.0 } else { -1.0 }).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + 1.0).collect();
                singular += tensor_gl(&side, &lo, &hi, |u| {
                    radial.integrate(
                        |s| {
                            let mut idx = 0;
                            for (i, zi) in z.iter_mut().enumerate() {
                                if i == k {
                                    *zi = sign * w[i] * s;
                                } else {
                                    *zi = w[i] * s * u[idx];
                                    idx += 1;
                                }
                            }
                            let r = special::norm(&z);
                            s.powi(others as i32) * r.powf(-alpha) * overlap(&z)
                        },
                        0.0,
                        1.0,
                    )
                });
            }
        }
    }
    c2 * (plain + jac * singular)
}

fn tensor_gl<F: FnMut(&[f64]) -> f64>(rule: &GaussLegendre, lo: &[f64], hi: &[f64], mut f: F) -> f64 {
    let d = lo.len();
    if d == 0 {
        return f(&[]);
    }
    let axes: Vec<Vec<(f64, f64)>> = (0..d).map(|i| rule.mapped(lo[i], hi[i]).collect()).collect();
    let m = rule.len();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for i in 0..d {
            let (xi, wi) = axes[i][idx[i]];
            x[i] = xi;
            w *= wi;
        }
        total += w * f(&x);
        let mut i = 0;
        loop {
            idx[i] += 1;
            if idx[i] < m {
                break;
            }
            idx[i] = 0;
            i += 1;
            if i == d {
                return total;
            }
        }
    }
}

/// ∫ f(x) dx over R^d.
pub fn test_function_integral(f: &TestFunction, d: usize) -> f64 {
    let df = d as f64;
    match f {
        TestFunction::Constant { value } => {
            if *value == 0.0 {
                0.0
            } else {
                f64::INFINITY * value.signum()
            }
        }
        TestFunction::Gaussian { sigma, amplitude, .. } => amplitude * (2.0 * PI * sigma * sigma).powf(0.5 * df),
        TestFunction::Ball { radius, .. } => ball_volume(d, *radius),
        TestFunction::SmoothBall { radius, width, .. } => {
            let inner = radius - width;
            let shell = GaussLegendre::new(32).integrate(|r| f.radial(r) * r.powf(df - 1.0), inner, *radius);
            ball_volume(d, inner) + sphere_area(d) * shell
        }
    }
}

pub fn ball_volume(d: usize, r: f64) -> f64 {
    let df = d as f64;
    PI.powf(0.5 * df) / special::gamma(0.5 * df + 1.0) * r.powf(df)
}

pub fn sphere_area(d: usize) -> f64 {
    let df = d as f64;
    2.0 * PI.powf(0.5 * df) / special::gamma(0.5 * df)
}

/// (G_τ ∗ f)(x) = E f(x + √τ Z).
pub fn heat_smoothed(f: &TestFunction, tau: f64, x: &[f64]) -> Result<f64> {
    let d = x.len();
    if tau == 0.0 {
        return Ok(f.eval(x));
    }
    if !(tau > 0.0) {
        return domain("smoothing time must be non-negative");
    }
    let Some(c) = f.center() else { return Ok(f.radial(0.0)) };
    if c.len() != d {
        return argument("test function center has the wrong dimension");
    }
    let a: f64 = x.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    match *f {
        TestFunction::Gaussian { sigma, amplitude, .. } => {
            let s2 = sigma * sigma;
            Ok(amplitude * (s2 / (s2 + tau)).powf(0.5 * d as f64) * (-a * a / (2.0 * (s2 + tau))).exp())
        }
        _ => {
            // radial average against the law of |x − c + √τ Z|
            let r_max = f.support_radius();
            let mut breaks = vec![0.0];
            if let TestFunction::SmoothBall { radius, width, .. } = *f {
                breaks.push(radius - width);
            }
            breaks.push(r_max);
            breaks.retain(|&b| b >= 0.0);
            breaks.dedup();
            let rule = GaussLegendre::new(48);
            let mut total = 0.0;
            for w in breaks.windows(2) {
                total += adaptive(
                    |rho| f.radial(rho) * noncentral_chi_density(d, tau, a, rho),
                    w[0],
                    w[1],
                    1e-10,
                    1e-300,
                )
                .or_else(|_| Ok::<f64, Error>(rule.integrate(|rho| f.radial(rho) * noncentral_chi_density(d, tau, a, rho), w[0], w[1])))?;
            }
            Ok(total)
        }
    }
}

/// E[u_t(f)] = ∫∫ G_{t+δ}(x−x′) f(x′) μ(dx) dx′ for the solution started from
/// G_δ μ (δ = `mu.delta`). At t = δ = 0 this is μ(f).
pub fn first_moment_exact(mu: &MeasureSpec, f: &TestFunction, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return domain("t must be non-negative");
    }
    let tau = t + mu.delta;
    match &mu.kind {
        MeasureKind::Lebesgue { intensity } => {
            let d = f
                .center()
                .map(|c| c.len())
                .ok_or_else(|| Error::Unsupported("Lebesgue paired with a constant test function has infinite mass".into()))?;
            Ok(intensity * test_function_integral(f, d))
        }
        MeasureKind::AtomCloud { atoms } => {
            let mut total = 0.0;
            for a in atoms {
                total += a.weight * heat_smoothed(f, tau, &a.position)?;
            }
            Ok(total)
        }
        MeasureKind::UniformBall {
            center,
            radius,
            total_mass,
        } => {
            let d = center.len();
            match f {
                TestFunction::Constant { value } => Ok(value * total_mass),
                TestFunction::Gaussian {
                    center: c,
                    sigma,
                    amplitude,
                } => {
                    // ∫_ball Gaussian = (2πs²)^{d/2} P(|c − b₀ + sZ| ≤ R)
                    let s2 = sigma * sigma + tau;
                    let a = special::norm(&c.iter().zip(center).map(|(p, q)| p - q).collect::<Vec<_>>());
                    let prob = adaptive(|rho| noncentral_chi_density(d, s2, a, rho), 0.0, *radius, 1e-11, 1e-300)?;
                    let vol = ball_volume(d, *radius);
                    Ok(total_mass / vol
                        * amplitude
                        * (sigma * sigma / s2).powf(0.5 * d as f64)
                        * (2.0 * PI * s2).powf(0.5 * d as f64)
                        * prob)
                }
                _ => Err(Error::Unsupported("uniform-ball initial data needs a constant or Gaussian test function".into())),
            }
        }
        MeasureKind::Density { density } => {
            let (Some(c1), Some(c2)) = (density.center(), f.center()) else {
                return Err(Error::Unsupported("density first moment needs localized functions".into()));
            };
            match (density, f) {
                (
                    TestFunction::Gaussian {
                        sigma: s1, amplitude: a1, ..
                    },
                    TestFunction::Gaussian {
                        sigma: s2, amplitude: a2, ..
                    },
                ) => {
                    let d = c1.len();
                    let v = s1 * s1 + s2 * s2 + tau;
                    let r2: f64 = c1.iter().zip(c2).map(|(p, q)| (p - q) * (p - q)).sum();
                    let norm1 = a1 * (2.0 * PI * s1 * s1).powf(0.5 * d as f64);
                    let norm2 = a2 * (2.0 * PI * s2 * s2).powf(0.5 * d as f64);
                    Ok(norm1 * norm2 * (2.0 * PI * v).powf(-0.5 * d as f64) * (-r2 / (2.0 * v)).exp())
                }
                _ => Err(Error::Unsupported("density first moment implemented for Gaussian pairs".into())),
            }
        }
    }
}

/// Kernel used inside the bridge exponential.
#[derive(Debug, Clone)]
pub enum BridgeKernel {
    /// min(|x|⁻², clip), the unmollified equation.
    InverseSquare { clip: f64 },
    /// The lattice covariance h^ε the simulation uses.
    Mollified(std::sync::Arc<crate::noise::Kernels>),
}

/// Monte Carlo estimate of
/// E[(u_t(f))²] = ∫ f(x′)f(y′)G_t(x−x′)G_t(y−y′) E[exp(κ²∫₀ᵗ h(X¹_s − X²_s)ds)] dx′dy′ μ^δ(dx)μ^δ(dy)
/// with X¹, X² independent Brownian bridges x → x′ and y → y′ and μ^δ = G_δ μ.
///
/// For atoms the starts are drawn from μ^δ and the ends from the Gaussian
/// transitions. For Lebesgue data the ends are drawn from |f| (Gaussian or
/// ball-shaped f) and the starts from the transitions backwards. κ = 0
/// returns (first moment)² with zero error.
#[allow(clippy::too_many_arguments)]
pub fn second_moment_bridge_rhs(
    params: &ModelParams,
    mu: &MeasureSpec,
    f: &TestFunction,
    t: f64,
    n_paths: usize,
    m: usize,
    kernel: &BridgeKernel,
    seeds: &SeedStream,
) -> Result<MCEstimate> {
    check_pair_exponent(params)?;
    if !(t > 0.0) || m < 2 || n_paths < 2 {
        return argument("second moment needs t > 0, m >= 2 and at least two paths");
    }
    let d = params.d();
    let kappa = params.kappa();
    if kappa == 0.0 {
        let m1 = first_moment_exact(mu, f, t)?;
        return Ok(MCEstimate {
            mean: m1 * m1,
            std_error: 0.0,
            n_samples: n_paths,
            clip_fraction: 0.0,
            excess_kurtosis: 0.0,
        });
    }
    let pair_kernel = match kernel {
        BridgeKernel::InverseSquare { clip } => {
            if !(*clip > 0.0) {
                return argument("clip must be positive");
            }
            PairKernel::InverseSquare { clip: *clip }
        }
        BridgeKernel::Mollified(k) => {
            if k.lattice().d() != d {
                return argument("kernel lattice dimension differs from the model dimension");
            }
            PairKernel::Mollified(k.clone())
        }
    };
    let sampler = EndpointSampler::new(mu, f, d)?;
    let sqrt_t = t.sqrt();
    let results: Vec<(f64, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.substream(i);
            let (starts, ends, weight) = sampler.draw(&mut rng, sqrt_t, f);
            if weight == 0.0 {
                return (0.0, false);
            }
            let (e, clipped) = pair_functional(d, kappa * kappa, &starts, &ends, t, m, &pair_kernel, &mut rng);
            (weight * e, clipped)
        })
        .collect();
    let samples: Vec<f64> = results.iter().map(|r| r.0).collect();
    let clipped = results.iter().filter(|r| r.1).count();
    let est = MCEstimate::from_samples(&samples).with_clip_fraction(clipped as f64 / n_paths as f64);
    if est.excess_kurtosis > crate::paths::KURTOSIS_LIMIT {
        return Err(Error::HeavyTailed(est.excess_kurtosis));
    }
    Ok(est)
}

enum EndpointSampler {
    Atoms {
        atoms: Vec<(Vec<f64>, f64)>,
        cumulative: Vec<f64>,
        mass: f64,
        sqrt_delta: f64,
    },
    Lebesgue {
        intensity: f64,
        f_mass: f64,
    },
}

impl EndpointSampler {
    fn new(mu: &MeasureSpec, f: &TestFunction, d: usize) -> Result<Self> {
        match &mu.kind {
            MeasureKind::AtomCloud { atoms } => {
                if atoms.is_empty() || atoms.iter().any(|a| a.position.len() != d || !(a.weight > 0.0)) {
                    return argument("atoms need positive weights and d coordinates");
                }
                let mass: f64 = atoms.iter().map(|a| a.weight).sum();
                let mut acc = 0.0;
                let cumulative = atoms
                    .iter()
                    .map(|a| {
                        acc += a.weight / mass;
                        acc
                    })
                    .collect();
                Ok(EndpointSampler::Atoms {
                    atoms: atoms.iter().map(|a| (a.position.clone(), a.weight)).collect(),
                    cumulative,
                    mass,
                    sqrt_delta: mu.delta.max(0.0).sqrt(),
                })
            }
            MeasureKind::Lebesgue { intensity } => match f {
                TestFunction::Gaussian { center, .. } | TestFunction::Ball { center, .. } | TestFunction::SmoothBall { center, .. }
                    if center.len() == d =>
                {
                    Ok(EndpointSampler::Lebesgue {
                        intensity: *intensity,
                        f_mass: test_function_integral(f, d),
                    })
                }
                _ => Err(Error::Unsupported("Lebesgue second moment needs a localized test function".into())),
            },
            _ => Err(Error::Unsupported("second moment supports atom clouds and Lebesgue data".into())),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, sqrt_t: f64, f: &TestFunction) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
        match self {
            EndpointSampler::Atoms {
                atoms,
                cumulative,
                mass,
                sqrt_delta,
            } => {
                let mut starts = Vec::with_capacity(2);
                let mut ends = Vec::with_capacity(2);
                for _ in 0..2 {
                    let u: f64 = rng.random();
                    let i = cumulative.partition_point(|&c| c < u).min(atoms.len() - 1);
                    let x: Vec<f64> = atoms[i].0.iter().map(|&p| p + sqrt_delta * gauss(rng)).collect();
                    let y: Vec<f64> = x.iter().map(|&p| p + sqrt_t * gauss(rng)).collect();
                    starts.push(x);
                    ends.push(y);
                }
                let w = mass * mass * f.eval(&ends[0]) * f.eval(&ends[1]);
                (starts, ends, w)
            }
            EndpointSampler::Lebesgue { intensity, f_mass } => {
                let mut starts = Vec::with_capacity(2);
                let mut ends = Vec::with_capacity(2);
                for _ in 0..2 {
                    let y = sample_from_test_function(f, rng);
                    let x: Vec<f64> = y.iter().map(|&p| p + sqrt_t * gauss(rng)).collect();
                    starts.push(x);
                    ends.push(y);
                }
                // density of y is f/∫f for the Gaussian case, uniform on the ball otherwise
                let w = match f {
                    TestFunction::Gaussian { .. } => intensity * intensity * f_mass * f_mass,
                    _ => {
                        let vol = ball_volume(ends[0].len(), f.support_radius());
                        intensity * intensity * vol * vol * f.eval(&ends[0]) * f.eval(&ends[1])
                    }
                };
                (starts, ends, w)
            }
        }
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn sample_from_test_function<R: Rng + ?Sized>(f: &TestFunction, rng: &mut R) -> Vec<f64> {
    match f {
        TestFunction::Gaussian { center, sigma, .. } => center.iter().map(|&c| c + sigma * gauss(rng)).collect(),
        _ => {
            let c = f.center().expect("localized test function");
            let r = f.support_radius();
            loop {
                let x: Vec<f64> = c.iter().map(|_| rng.random_range(-r..r)).collect();
                if x.iter().map(|v| v * v).sum::<f64>() <= r * r {
                    return x.iter().zip(c).map(|(a, b)| a + b).collect();
                }
            }
        }
    }
}

/// Checks α(κ²/2) against the model exponent, the link between the pair
/// functional and the difference bridge.
pub fn check_pair_exponent(params: &ModelParams) -> Result<()> {
    let a = special::alpha_of_eta(params.d(), 0.5 * params.kappa() * params.kappa())?;
    if (a - params.alpha()).abs() > 1e-12 {
        return domain(format!("alpha(kappa^2/2) = {a} differs from alpha = {}", params.alpha()));
    }
    Ok(())
}

/// C·∫ G_tG_t f f (1 + t^α |x−y|^{−α}|x′−y′|^{−α}) dμ^δ dμ^δ dx′dy′ for a
/// Gaussian f. Atoms need δ > 0 (otherwise the diagonal is not integrable and
/// +∞ is returned).
pub fn second_moment_bound_rhs(params: &ModelParams, mu: &MeasureSpec, f: &TestFunction, t: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) || !(t > 0.0) {
        return argument("bound needs C > 0 and t > 0");
    }
    let d = params.d();
    let df = d as f64;
    let alpha = params.alpha();
    let m1 = first_moment_exact(mu, f, t)?;
    if alpha == 0.0 {
        return Ok(2.0 * c * m1 * m1);
    }
    let TestFunction::Gaussian {
        center,
        sigma,
        amplitude,
    } = f
    else {
        return Err(Error::Unsupported("bound quadrature needs a Gaussian test function".into()));
    };
    let s2 = sigma * sigma;
    let delta = mu.delta;
    // K(ρ) = ∫ G_{2t}(D′ − D) e^{−|D′|²/4σ²} |D′|^{−α} dD′ at |D| = ρ:
    // the product is e^{−ρ²/(4(σ²+t))}(σ²/(σ²+t))^{d/2} times N(mD, v) with
    // m = σ²/(σ²+t), v = 2tσ²/(σ²+t).
    let mfac = s2 / (s2 + t);
    let v = 2.0 * t * s2 / (s2 + t);
    let k_of = |rho: f64| -> Result<f64> {
        let pre = mfac.powf(0.5 * df) * (-rho * rho / (4.0 * (s2 + t))).exp();
        Ok(pre * inverse_power_moment(d, v, mfac * rho, alpha)?)
    };
    let singular = match &mu.kind {
        MeasureKind::AtomCloud { atoms } => {
            if !(delta > 0.0) {
                return Ok(f64::INFINITY);
            }
            let big_t = s2 + t + delta;
            let mut total = 0.0;
            for ai in atoms {
                for aj in atoms {
                    let s0: f64 = ai
                        .position
                        .iter()
                        .zip(&aj.position)
                        .zip(center)
                        .map(|((a, b), c)| (a + b - 2.0 * c).powi(2))
                        .sum();
                    // S part: ∫ G_{2(t+δ)}(S−S₀) A² e^{−|S−2c|²/4σ²} dS
                    let s_part = amplitude * amplitude * (s2 / big_t).powf(0.5 * df) * (-s0 / (4.0 * big_t)).exp();
                    let d0 = special::norm(&ai.position.iter().zip(&aj.position).map(|(a, b)| a - b).collect::<Vec<_>>());
                    // D = d0 + √(2δ) Z: E[|D|^{−α} K(|D|)]
                    let var = 2.0 * delta;
                    let hi = d0 + 12.0 * var.sqrt();
                    let lo = (d0 - 12.0 * var.sqrt()).max(0.0);
                    let mut err = None;
                    let val = adaptive(
                        |rho| match k_of(rho) {
                            Ok(k) => rho.powf(-alpha) * k * noncentral_chi_density(d, var, d0, rho),
                            Err(e) => {
                                err = Some(e);
                                0.0
                            }
                        },
                        lo,
                        hi,
                        1e-8,
                        1e-300,
                    )?;
                    if let Some(e) = err {
                        return Err(e);
                    }
                    total += ai.weight * aj.weight * s_part * val;
                }
            }
            total
        }
        MeasureKind::Lebesgue { intensity } => {
            let s_part = amplitude * amplitude * (4.0 * PI * s2).powf(0.5 * df) * 2f64.powf(-df);
            let reach = 12.0 * (s2 + t).sqrt();
            let mut err = None;
            let val = adaptive(
                |rho| match k_of(rho) {
                    Ok(k) => sphere_area(d) * rho.powf(df - 1.0 - alpha) * k,
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                },
                0.0,
                reach,
                1e-8,
                1e-300,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            intensity * intensity * s_part * val
        }
        _ => return Err(Error::Unsupported("bound quadrature supports atom clouds and Lebesgue data".into())),
    };
    Ok(c * (m1 * m1 + t.powf(alpha) * singular))
}

/// E|a e₁ + √v Z|^{−r} for Z standard normal in R^d, r < d.
fn inverse_power_moment(d: usize, v: f64, a: f64, r: f64) -> Result<f64> {
    if r == 0.0 {
        return Ok(1.0);
    }
    let sd = v.sqrt();
    let lo = (a - 14.0 * sd).max(0.0);
    let hi = a + 14.0 * sd;
    // the ρ^{d−1−r} behaviour at the origin is integrable; split there
    let mut breaks = vec![lo];
    if lo == 0.0 {
        breaks.push((a * 0.5).max(1e-3 * sd).min(hi));
    }
    breaks.push(hi);
    breaks.dedup();
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += adaptive(|rho| rho.powf(-r) * noncentral_chi_density(d, v, a, rho), w[0], w[1], 1e-11, 1e-300)?;
    }
    Ok(total)
}

/// Both sides of ∫∫G_t(x−x′)G_t(y−y′)|x′−y′|^{−r}dx′dy′ ≲ min(|x−y|^{−r}, t^{−r/2}).
///
/// The left side is E|x − y + √(2t)Z|^{−r}, a one-dimensional integral against
/// the noncentral chi law.
pub fn gaussian_convolution_bound_check(d: usize, r: f64, t: f64, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if !(0.0..d as f64).contains(&r) {
        return domain(format!("r = {r} must lie in [0, d = {d}); the integral diverges otherwise"));
    }
    if !(t > 0.0) || x.len() != d || y.len() != d {
        return argument("need t > 0 and d-dimensional points");
    }
    let sep = special::norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
    let lhs = inverse_power_moment(d, 2.0 * t, sep, r)?;
    let rhs = if r == 0.0 { 1.0 } else { sep.powf(-r).min(t.powf(-0.5 * r)) };
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_atom_norm_is_infinite_and_pairs_are_summed() {
        let one = DiscreteMeasure::atoms(vec![(vec![0.0; 3], 2.0)]).unwrap();
        assert!(h_alpha_norm(&one, 0.2, 0.0).is_infinite());
        let two = DiscreteMeasure::atoms(vec![(vec![0.0; 3], 1.0), (vec![1.0, 0.0, 0.0], 1.0)]).unwrap();
        assert!((h_alpha_off_diagonal(&two, 0.2, 0.0) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn box_norm_without_singularity_matches_volume() {
        // α → 0⁺: ∫∫(1 + |x−y|^{−α}) → 2·vol²
        let b = DiscreteMeasure::lebesgue_box(1.0, vec![0.0; 3], vec![1.0; 3]).unwrap();
        let v = h_alpha_norm(&b, 1e-9, 0.0);
        assert!((v * v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn first_moment_reductions() {
        let f = TestFunction::gaussian(vec![0.5, 0.0, 0.0], 0.4);
        let mu = MeasureSpec::lebesgue(2.0);
        let expect = 2.0 * (2.0 * PI * 0.16f64).powf(1.5);
        assert!((first_moment_exact(&mu, &f, 3.0).unwrap() / expect - 1.0).abs() < 1e-14);
        let atom = MeasureSpec::atom(vec![0.0; 3], 1.5, 0.0);
        assert!((first_moment_exact(&atom, &f, 0.0).unwrap() - 1.5 * f.eval(&[0.0; 3])).abs() < 1e-15);
        let ball = TestFunction::Ball {
            center: vec![0.0; 3],
            radius: 1.0,
        };
        // E 1{|√τ Z| ≤ 1} for τ = 1 is the chi-3 CDF at 1
        let chi = first_moment_exact(&atom, &ball, 1.0).unwrap() / 1.5;
        let exact = statrs_free_chi3_cdf(1.0);
        assert!((chi - exact).abs() < 1e-9, "{chi} vs {exact}");
    }

    // P(|Z| ≤ x) in R³ = erf(x/√2) − √(2/π) x e^{−x²/2}
    fn statrs_free_chi3_cdf(x: f64) -> f64 {
        let mut erf = 0.0;
        // series for erf is enough at x/√2 < 1
        let z = x / 2f64.sqrt();
        let mut term = z;
        for n in 0..40 {
            erf += term / (2 * n + 1) as f64;
            term *= -z * z / (n + 1) as f64;
        }
        erf *= 2.0 / PI.sqrt();
        erf - (2.0 / PI).sqrt() * x * (-x * x / 2.0).exp()
    }

    #[test]
    fn convolution_bound_edges() {
        let (l, r) = gaussian_convolution_bound_check(3, 0.0, 1.0, &[0.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!((l, r), (1.0, 1.0));
        assert!(gaussian_convolution_bound_check(3, 3.0, 1.0, &[0.0; 3], &[0.0; 3]).is_err());
        let (l, r) = gaussian_convolution_bound_check(3, 1.0, 1.0, &[0.0; 3], &[200.0, 0.0, 0.0]).unwrap();
        assert!((l / r - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kappa_zero_bridge_moment_is_squared_first_moment() {
        let p = ModelParams::with_null(3, 0.0).unwrap();
        let mu = MeasureSpec::atom(vec![0.0; 3], 1.0, 0.01);
        let f = TestFunction::gaussian(vec![0.0; 3], 0.5);
        let est = second_moment_bridge_rhs(&p, &mu, &f, 0.5, 10, 8, &BridgeKernel::InverseSquare { clip: 1e4 }, &SeedStream::new(1, "k0")).unwrap();
        let m1 = first_moment_exact(&mu, &f, 0.5).unwrap();
        assert_eq!(est.mean, m1 * m1);
    }
}
