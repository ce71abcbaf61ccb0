//! Independent numerical oracles for closed-form quantities.

use std::f64::consts::PI;

use pam_core::lattice::LatticeSpec;
use pam_core::moments::{first_moment_exact, second_moment_bridge_rhs, BridgeKernel};
use pam_core::noise::build_kernels;
use pam_core::quadrature::GaussLegendre;
use pam_core::rng::SeedStream;
use pam_core::spde::{MeasureSpec, TestFunction};
use pam_core::special::{self, ModelParams};
use statrs::function::gamma::gamma;

/// Area of the unit sphere S^{k} in R^{k+1}.
fn sphere(k: usize) -> f64 {
    let n = (k + 1) as f64;
    2.0 * PI.powf(n / 2.0) / gamma(n / 2.0)
}

/// (g ∗ g)(z) at |z| = ρ for g(x) = |x|^{−(d+2)/2}, by bipolar coordinates
/// (r, s) = (|y|, |z − y|):
/// dy = |S^{d−2}| r s (2Δ)^{d−3} / ρ^{d−2} dr ds, Δ the triangle area.
fn radial_self_convolution(d: usize, rho: f64) -> f64 {
    let a = (d as f64 + 2.0) / 2.0;
    let gl = GaussLegendre::new(160);
    // Cosine maps smooth the square-root behaviour at both ends.
    let cos_map = |lo: f64, hi: f64, w: f64| {
        let r = lo + (hi - lo) * (1.0 - (PI * w).cos()) / 2.0;
        let jac = (hi - lo) * PI * (PI * w).sin() / 2.0;
        (r, jac)
    };
    let inner = |r: f64| {
        let (lo, hi) = ((rho - r).abs(), rho + r);
        gl.integrate(
            |w| {
                let (s, js) = cos_map(lo, hi, w);
                let q = (r + s + rho) * (-r + s + rho) * (r - s + rho) * (r + s - rho);
                let two_delta = 0.5 * q.max(0.0).sqrt();
                js * s.powf(1.0 - a) * two_delta.powi(d as i32 - 3)
            },
            0.0,
            1.0,
        )
    };
    let piece = |lo: f64, hi: f64| {
        gl.integrate(
            |w| {
                let (r, jr) = cos_map(lo, hi, w);
                jr * r.powf(1.0 - a) * inner(r)
            },
            0.0,
            1.0,
        )
    };
    let near = piece(0.0, rho) + piece(rho, 2.0 * rho);
    // r = 2ρ/x on (0, 1].
    let tail = gl.integrate(
        |x| {
            let r = 2.0 * rho / x;
            2.0 * rho / (x * x) * r.powf(1.0 - a) * inner(r)
        },
        0.0,
        1.0,
    );
    sphere(d - 2) / rho.powi(d as i32 - 2) * (near + tail)
}

#[test]
fn riesz_constant_against_radial_convolution() {
    for d in [3, 4, 5] {
        let c = special::riesz_constant(d);
        for rho in [0.5, 1.0, 2.0] {
            let v = c * c * radial_self_convolution(d, rho) * rho * rho;
            assert!((v - 1.0).abs() < 1e-3, "d = {d}, |z| = {rho}: {v}");
        }
    }
    assert!((special::riesz_constant(4) - 1.0 / (2.0 * PI)).abs() < 1e-12);
}

/// Series oracle for the exact bridge moment: I_μ(ab/t)/I_ν(ab/t) with
/// ν = (d−2)/2 and μ = sqrt(ν² − 2η), both from the power series.
fn bridge_series(d: usize, eta: f64, a: f64, b: f64, t: f64) -> f64 {
    let nu = (d as f64 - 2.0) / 2.0;
    let mu = (nu * nu - 2.0 * eta).sqrt();
    let z = a * b / t;
    let series = |order: f64| {
        let mut sum = 0.0;
        for k in 0..200 {
            let k = k as f64;
            sum += (z / 2.0).powf(2.0 * k + order) / (gamma(k + 1.0) * gamma(k + order + 1.0));
        }
        sum
    };
    series(mu) / series(nu)
}

#[test]
fn bridge_moment_matches_series_over_a_grid() {
    for &(eta, a, b, t) in &[(0.05f64, 1.0, 1.0, 1.0), (0.1, 0.5, 2.0, 1.0), (0.12, 1.5, 0.7, 0.5), (0.02, 3.0, 3.0, 2.0)] {
        let exact = special::bridge_exp_moment_exact(3, eta, a, b, t).unwrap();
        let series = bridge_series(3, eta, a, b, t);
        assert!((exact / series - 1.0).abs() < 1e-8, "{eta} {a} {b} {t}: {exact} vs {series}");
    }
}

#[test]
fn bessel_density_is_a_probability_density_in_b() {
    let gl = GaussLegendre::new(64);
    for dim in [3.0, 4.0, 5.0, 3.6] {
        for t in [0.5f64, 1.0, 2.0] {
            for a in [0.5, 1.0, 2.0] {
                let hi = a + 12.0 * t.sqrt() + 6.0;
                let breaks: Vec<f64> = (0..=40).map(|k| hi * k as f64 / 40.0).collect();
                let mass = gl.composite(|b| special::bessel_transition_density(dim, t, a, b).unwrap(), &breaks);
                assert!((mass - 1.0).abs() < 1e-6, "dim {dim} t {t} a {a}: {mass}");
            }
        }
    }
}

#[test]
fn second_moment_dominates_squared_first_moment() {
    let params = ModelParams::new(3, 0.3).unwrap();
    let lat = LatticeSpec::new(3, 16, 3.2).unwrap();
    let kernels = std::sync::Arc::new(build_kernels(&params, 0.5, lat).unwrap());
    let mu = MeasureSpec::atom(vec![0.0; 3], 1.0, 0.25);
    for (i, f) in [TestFunction::gaussian(vec![0.0; 3], 0.3), TestFunction::gaussian(vec![0.4, 0.0, 0.0], 0.2)]
        .iter()
        .enumerate()
    {
        let m1 = first_moment_exact(&mu, f, 0.5).unwrap();
        let seeds = SeedStream::new(11, &format!("cauchy-schwarz-{i}"));
        let m2 = second_moment_bridge_rhs(&params, &mu, f, 0.5, 20_000, 64, &BridgeKernel::Mollified(kernels.clone()), &seeds)
            .unwrap();
        assert!(m2.mean + 3.0 * m2.std_error >= m1 * m1, "{} ± {} vs {}", m2.mean, m2.std_error, m1 * m1);
    }
}
