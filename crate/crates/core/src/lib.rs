//! Numerical laboratory for the parabolic Anderson model
//!
//! ```text
//!     du/dt = ½Δu + κ u Ḟ,      E[Ḟ(t,x) Ḟ(s,y)] = δ(t−s) |x−y|⁻²,
//! ```
//!
//! in dimension d ≥ 3 with 0 < κ < (d−2)/2. The crate is organised bottom-up:
//!
//! * [`special`]: closed-form quantities (exponent α, heat kernel, Bessel
//!   functions, Bessel transition densities, the exact Bessel-bridge
//!   exponential moment, the Riesz constant c₇).
//! * [`paths`]: Monte Carlo engines for Brownian bridges, Bessel processes and
//!   the exponential pair-interaction functionals.
//! * [`lattice`] and [`noise`]: periodic lattices, spectral transforms and the
//!   mollified noise F^ε with covariance h^ε = g^ε ∗ g^ε.
//! * [`spde`]: positivity-preserving splitting scheme for the mollified equation.
//! * [`chaos`]: truncated Wiener chaos expansion driven by the same noise.
//! * [`moments`]: deterministic and Monte Carlo moment oracles.
//! * [`experiments`]: desk-scale statistical experiments (duality, scaling,
//!   total mass, death, singularity and dimension diagnostics).
//!
//! Every stochastic routine draws from counter-based streams ([`rng`]) keyed by
//! a master seed, so results do not depend on the number of worker threads.

pub mod chaos;
mod error;
pub mod experiments;
pub mod lattice;
pub mod moments;
pub mod noise;
pub mod paths;
pub mod quadrature;
pub mod rng;
pub mod spde;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
