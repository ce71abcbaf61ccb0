//! Splitting scheme for the mollified equation
//! du = ½Δu dt + κ u dF^ε on a periodic lattice.
//!
//! One step of size dt is H_{dt/2} ∘ M ∘ H_{dt/2}, where H is the exact
//! lattice heat semigroup (a continuous-time random walk, so positivity
//! preserving) and M multiplies pointwise by exp(κ dF − κ²h^ε(0)dt/2). The
//! multiplier has mean exactly one, so E[u] follows the lattice heat flow.
//! Consecutive half steps are merged: the engine stores v = M ∘ H u and only
//! applies the trailing half step when an observation is taken.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{argument, Error, Result};
use crate::lattice::{LatticeField, LatticeSpec, Spectral, Workspace};
use crate::noise::{build_kernels, Kernels, NoiseIncrement, NoiseSampler};
use crate::rng::{SeedStream, StreamRng};
use crate::special::ModelParams;

/// Test functions f for observables u_t(f) = ∫ f du_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    /// amplitude·exp(−|x−center|²/2σ²).
    Gaussian {
        center: Vec<f64>,
        sigma: f64,
        amplitude: f64,
    },
    /// 1 on B(center, radius − width), cosine taper to 0 at |x−center| = radius.
    SmoothBall {
        center: Vec<f64>,
        radius: f64,
        width: f64,
    },
    /// Indicator of the closed ball.
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
}

impl TestFunction {
    pub fn gaussian(center: Vec<f64>, sigma: f64) -> Self {
        TestFunction::Gaussian {
            center,
            sigma,
            amplitude: 1.0,
        }
    }

    pub fn center(&self) -> Option<&[f64]> {
        match self {
            TestFunction::Constant { .. } => None,
            TestFunction::Gaussian { center, .. }
            | TestFunction::SmoothBall { center, .. }
            | TestFunction::Ball { center, .. } => Some(center),
        }
    }

    /// Value as a function of the distance from the center.
    pub fn radial(&self, r: f64) -> f64 {
        match *self {
            TestFunction::Constant { value } => value,
            TestFunction::Gaussian { sigma, amplitude, .. } => amplitude * (-r * r / (2.0 * sigma * sigma)).exp(),
            TestFunction::SmoothBall { radius, width, .. } => {
                let inner = radius - width;
                if r <= inner {
                    1.0
                } else if r >= radius {
                    0.0
                } else {
                    0.5 * (1.0 + (std::f64::consts::PI * (r - inner) / width).cos())
                }
            }
            TestFunction::Ball { radius, .. } => {
                if r <= radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.center() {
            None => self.radial(0.0),
            Some(c) => {
                let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                self.radial(r2.sqrt())
            }
        }
    }

    /// Values on every cell, using minimum-image distances to the center.
    pub fn sample(&self, lattice: &LatticeSpec) -> Result<Vec<f64>> {
        match self.center() {
            None => Ok(vec![self.radial(0.0); lattice.n_cells()]),
            Some(c) => {
                if c.len() != lattice.d() {
                    return argument("test function center has the wrong dimension");
                }
                Ok(lattice.sample(c, |x| self.radial(crate::special::norm(x))))
            }
        }
    }

    /// Outer radius of the support (∞ for Gaussians and constants).
    pub fn support_radius(&self) -> f64 {
        match *self {
            TestFunction::SmoothBall { radius, .. } | TestFunction::Ball { radius, .. } => radius,
            _ => f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TestFunction::Constant { value } => value.is_finite(),
            TestFunction::Gaussian { sigma, amplitude, .. } => sigma > 0.0 && amplitude.is_finite(),
            TestFunction::SmoothBall { radius, width, .. } => width > 0.0 && radius >= width,
            TestFunction::Ball { radius, .. } => radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            argument(format!("invalid test function {self:?}"))
        }
    }
}

/// Initial measures μ; the lattice initial condition is the density of G_δ μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureKind {
    Lebesgue {
        intensity: f64,
    },
    UniformBall {
        center: Vec<f64>,
        radius: f64,
        total_mass: f64,
    },
    AtomCloud {
        atoms: Vec<Atom>,
    },
    /// μ(dx) = f(x) dx for a test-function-shaped density.
    Density {
        density: TestFunction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub position: Vec<f64>,
    pub weight: f64,
}

/// Serialized flat, as the `kind` fields plus `delta` in one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "FlatMeasure", into = "FlatMeasure")]
pub struct MeasureSpec {
    pub kind: MeasureKind,
    /// Heat-smoothing time δ applied to μ; 0 is allowed only for absolutely
    /// continuous μ.
    pub delta: f64,
}

// serde's `flatten` cannot be combined with `deny_unknown_fields`, so the
// wire form repeats `delta` in every variant.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum FlatMeasure {
    Lebesgue {
        intensity: f64,
        #[serde(default)]
        delta: f64,
    },
    UniformBall {
        center: Vec<f64>,
        radius: f64,
        total_mass: f64,
        #[serde(default)]
        delta: f64,
    },
    AtomCloud {
        atoms: Vec<Atom>,
        delta: f64,
    },
    Density {
        density: TestFunction,
        #[serde(default)]
        delta: f64,
    },
}

impl From<FlatMeasure> for MeasureSpec {
    fn from(f: FlatMeasure) -> Self {
        let (kind, delta) = match f {
            FlatMeasure::Lebesgue { intensity, delta } => (MeasureKind::Lebesgue { intensity }, delta),
            FlatMeasure::UniformBall {
                center,
                radius,
                total_mass,
                delta,
            } => (
                MeasureKind::UniformBall {
                    center,
                    radius,
                    total_mass,
                },
                delta,
            ),
            FlatMeasure::AtomCloud { atoms, delta } => (MeasureKind::AtomCloud { atoms }, delta),
            FlatMeasure::Density { density, delta } => (MeasureKind::Density { density }, delta),
        };
        MeasureSpec { kind, delta }
    }
}

impl From<MeasureSpec> for FlatMeasure {
    fn from(m: MeasureSpec) -> Self {
        let delta = m.delta;
        match m.kind {
            MeasureKind::Lebesgue { intensity } => FlatMeasure::Lebesgue { intensity, delta },
            MeasureKind::UniformBall {
                center,
                radius,
                total_mass,
            } => FlatMeasure::UniformBall {
                center,
                radius,
                total_mass,
                delta,
            },
            MeasureKind::AtomCloud { atoms } => FlatMeasure::AtomCloud { atoms, delta },
            MeasureKind::Density { density } => FlatMeasure::Density { density, delta },
        }
    }
}

impl MeasureSpec {
    pub fn atom(position: Vec<f64>, weight: f64, delta: f64) -> Self {
        MeasureSpec {
            kind: MeasureKind::AtomCloud {
                atoms: vec![Atom { position, weight }],
            },
            delta,
        }
    }

    pub fn lebesgue(intensity: f64) -> Self {
        MeasureSpec {
            kind: MeasureKind::Lebesgue { intensity },
            delta: 0.0,
        }
    }

    pub fn density(density: TestFunction, delta: f64) -> Self {
        MeasureSpec {
            kind: MeasureKind::Density { density },
            delta,
        }
    }

    /// Total mass (∞ for Lebesgue).
    pub fn total_mass(&self) -> f64 {
        match &self.kind {
            MeasureKind::Lebesgue { .. } => f64::INFINITY,
            MeasureKind::UniformBall { total_mass, .. } => *total_mass,
            MeasureKind::AtomCloud { atoms } => atoms.iter().map(|a| a.weight).sum(),
            MeasureKind::Density { .. } => f64::NAN,
        }
    }
}

/// Density of G_δ μ on the lattice.
///
/// Atoms are smoothed by torus-periodised Gaussians evaluated at cell
/// centers. Balls and densities are sampled (balls with 4^d sub-points per
/// cell) and then flowed by the lattice heat semigroup for time δ.
pub fn init_condition(mu: &MeasureSpec, lattice: &LatticeSpec) -> Result<LatticeField> {
    let d = lattice.d();
    let delta = mu.delta;
    if !(delta >= 0.0 && delta.is_finite()) {
        return argument(format!("delta = {delta} must be non-negative"));
    }
    let values = match &mu.kind {
        MeasureKind::Lebesgue { intensity } => {
            if !(*intensity > 0.0) {
                return argument("Lebesgue intensity must be positive");
            }
            vec![*intensity; lattice.n_cells()]
        }
        MeasureKind::AtomCloud { atoms } => {
            if atoms.is_empty() || atoms.iter().any(|a| !(a.weight > 0.0) || a.position.len() != d) {
                return argument("atom cloud needs atoms with positive weights and d coordinates");
            }
            if delta <= 0.0 {
                return argument("atoms need a positive smoothing time delta");
            }
            if delta.sqrt() < 2.0 * lattice.cell() {
                return Err(Error::Resolution(format!(
                    "smoothed atom width sqrt(delta) = {} is below two cells ({})",
                    delta.sqrt(),
                    2.0 * lattice.cell()
                )));
            }
            let mut out = vec![0.0; lattice.n_cells()];
            for a in atoms {
                let axes: Vec<Vec<f64>> = a.position.iter().map(|&p| periodic_gaussian(lattice, p, delta)).collect();
                for (flat, o) in out.iter_mut().enumerate() {
                    let idx = lattice.multi_index(flat);
                    let mut v = a.weight;
                    for (axis, &j) in axes.iter().zip(&idx) {
                        v *= axis[j];
                    }
                    *o += v;
                }
            }
            out
        }
        MeasureKind::UniformBall {
            center,
            radius,
            total_mass,
        } => {
            if center.len() != d || !(*radius > 0.0) || !(*total_mass > 0.0) {
                return argument("uniform ball needs a d-dimensional center, positive radius and mass");
            }
            let frac = ball_fractions(lattice, center, *radius, 4);
            let vol: f64 = frac.iter().sum::<f64>() * lattice.cell_volume();
            if vol <= 0.0 {
                return Err(Error::Resolution("ball contains no lattice sub-points".into()));
            }
            let mut out: Vec<f64> = frac.iter().map(|f| f * total_mass / vol).collect();
            heat_flow_in_place(lattice, &mut out, delta);
            out
        }
        MeasureKind::Density { density } => {
            density.validate()?;
            let mut out = density.sample(lattice)?;
            if out.iter().any(|&v| v < 0.0) {
                return argument("density must be non-negative");
            }
            heat_flow_in_place(lattice, &mut out, delta);
            out
        }
    };
    LatticeField::new(*lattice, values)
}

pub(crate) fn periodic_gaussian(lattice: &LatticeSpec, p: f64, var: f64) -> Vec<f64> {
    let n = lattice.n_per_side();
    let h = lattice.cell();
    let l = lattice.box_length();
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    let images = (6.0 * var.sqrt() / l).ceil() as i64 + 1;
    (0..n)
        .map(|j| {
            let x = lattice.wrap(j) as f64 * h;
            (-images..=images)
                .map(|m| {
                    let dx = x - p - m as f64 * l;
                    (-dx * dx / (2.0 * var)).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Fraction of each cell's sub-points (sub^d per cell) inside the ball.
fn ball_fractions(lattice: &LatticeSpec, center: &[f64], radius: f64, sub: usize) -> Vec<f64> {
    let d = lattice.d();
    let h = lattice.cell();
    let offsets: Vec<f64> = (0..sub).map(|i| ((i as f64 + 0.5) / sub as f64 - 0.5) * h).collect();
    let total = sub.pow(d as u32);
    let r2 = radius * radius;
    let mut sub_idx = vec![0usize; d];
    lattice.sample(center, |x| {
        let far: f64 = x.iter().map(|v| (v.abs() - h).max(0.0).powi(2)).sum();
        if far > r2 {
            return 0.0;
        }
        let mut inside = 0usize;
        for s in 0..total {
            let mut rem = s;
            for slot in sub_idx.iter_mut() {
                *slot = rem % sub;
                rem /= sub;
            }
            let q: f64 = x.iter().zip(&sub_idx).map(|(v, &i)| (v + offsets[i]).powi(2)).sum();
            if q <= r2 {
                inside += 1;
            }
        }
        inside as f64 / total as f64
    })
}

fn heat_flow_in_place(lattice: &LatticeSpec, values: &mut [f64], tau: f64) {
    if tau > 0.0 {
        let sp = Spectral::new(*lattice);
        let mut ws = sp.workspace();
        let mult = sp.heat_multiplier(tau);
        sp.apply_pair(values, None, &mult, None, &mut ws);
        for v in values.iter_mut() {
            // the transform leaves ~1e-17 negative dust where the exact flow is positive but tiny
            *v = v.max(0.0);
        }
    }
}

/// One full splitting step H_{dt/2} ∘ M ∘ H_{dt/2} applied to `u`.
pub fn step(u: &LatticeField, noise: &NoiseIncrement, kappa: f64, dt: f64) -> Result<LatticeField> {
    if u.lattice != noise.field.lattice {
        return argument("field and noise live on different lattices");
    }
    if (noise.dt - dt).abs() > 1e-12 * dt {
        return argument(format!("noise was drawn for dt = {}, step uses {dt}", noise.dt));
    }
    let sp = Spectral::new(u.lattice);
    let mut ws = sp.workspace();
    let half = sp.heat_multiplier(0.5 * dt);
    let mut v = u.values.clone();
    sp.apply_pair(&mut v, None, &half, None, &mut ws);
    let c = 0.5 * kappa * kappa * noise.h0 * dt;
    for (x, f) in v.iter_mut().zip(&noise.field.values) {
        *x *= (kappa * f - c).exp();
    }
    sp.apply_pair(&mut v, None, &half, None, &mut ws);
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    LatticeField::new(u.lattice, v)
}

/// Default time step min(cell², ε²)/4.
pub fn default_dt(lattice: &LatticeSpec, epsilon: f64) -> f64 {
    lattice.cell().powi(2).min(epsilon * epsilon) / 4.0
}

/// Default smoothing time δ = ε².
pub fn default_delta(epsilon: f64) -> f64 {
    epsilon * epsilon
}

/// Closed ball for ball-mass observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// S^ρ = ∫∫ (r_min² + |x−y|²)^{−ρ/2} e^{−a|x|−a|y|} u(dx)u(dy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoFunctional {
    pub rho: f64,
    pub tilt: f64,
    pub r_min: f64,
}

/// What to record during a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservablesConfig {
    /// Observation times; each is rounded to the nearest step.
    pub output_times: Vec<f64>,
    pub test_functions: Vec<TestFunction>,
    pub balls: Vec<BallSpec>,
    pub rho: Vec<RhoFunctional>,
    /// Track realized quadratic variation of the total mass and the bracket
    /// κ²∫⟨u_s, h^ε u_s⟩ds, both on every step.
    pub track_bracket: bool,
}

/// Recorded series; outer index is the observable, inner the output time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Observables {
    pub times: Vec<f64>,
    pub total_mass: Vec<f64>,
    pub ball_masses: Vec<Vec<f64>>,
    pub test_integrals: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    /// Σ (ΔM)² of the per-step total mass up to each output time.
    pub quadratic_variation: Vec<f64>,
    /// κ² Σ ⟨u, h^ε u⟩ dt (left point) up to each output time.
    pub bracket: Vec<f64>,
    /// Σ ΔM/(2√M) over steps (left point): the martingale part of √M, with
    /// mean exactly zero on the lattice.
    pub sqrt_martingale: Vec<f64>,
    /// Smallest cell value seen on any step.
    pub min_value: f64,
}

/// Observation arrays prepared on the scheme's lattice.
#[derive(Debug, Clone)]
pub struct PreparedObservables {
    pub(crate) output_steps: Vec<usize>,
    pub(crate) tests: Vec<Vec<f64>>,
    pub(crate) balls: Vec<Vec<f64>>,
    /// Lattice ball volumes (cell count × cell^d).
    pub ball_volumes: Vec<f64>,
    pub(crate) rho: Vec<(Vec<f64>, Vec<f64>)>,
    pub(crate) track_bracket: bool,
}

/// Precomputed operators for one (κ, ε, lattice, dt) configuration.
#[derive(Debug, Clone)]
pub struct Scheme {
    pub(crate) lattice: LatticeSpec,
    pub(crate) kappa: f64,
    pub(crate) dt: f64,
    pub(crate) kernels: Arc<Kernels>,
    pub(crate) spectral: Arc<Spectral>,
    pub(crate) sampler: NoiseSampler,
    pub(crate) heat_half: Vec<f64>,
    pub(crate) heat_full: Vec<f64>,
    /// Bracket weights on the raw spectrum of v (includes the pending half step).
    bracket_v: Vec<f64>,
    /// Bracket weights on the raw spectrum of u itself.
    bracket_u: Vec<f64>,
    pub(crate) log_shift: f64,
}

impl Scheme {
    pub fn new(params: &ModelParams, epsilon: f64, lattice: LatticeSpec, dt: f64) -> Result<Self> {
        let kernels = Arc::new(build_kernels(params, epsilon, lattice)?);
        Self::with_kernels(params.kappa(), kernels, dt)
    }

    /// Builds the scheme around existing kernels (κ may be 0).
    pub fn with_kernels(kappa: f64, kernels: Arc<Kernels>, dt: f64) -> Result<Self> {
        let lattice = *kernels.lattice();
        if !(dt > 0.0 && dt <= 0.5 * lattice.cell().powi(2) * (1.0 + 1e-12)) {
            return argument(format!(
                "dt = {dt} must be positive and at most cell²/2 = {}",
                0.5 * lattice.cell().powi(2)
            ));
        }
        if !(kappa >= 0.0) {
            return argument("kappa must be non-negative");
        }
        let spectral = Arc::new(Spectral::new(lattice));
        let sampler = NoiseSampler::new(kernels.clone(), spectral.clone(), dt)?;
        let lam = spectral.laplacian_symbol();
        let n = lattice.n_cells() as f64;
        let c2 = lattice.cell_volume().powi(2) / n;
        let heat_half = spectral.heat_multiplier(0.5 * dt);
        let heat_full = spectral.heat_multiplier(dt);
        let bracket_u: Vec<f64> = kernels.h_hat.iter().map(|h| kappa * kappa * dt * c2 * h).collect();
        let bracket_v = bracket_u.iter().zip(&lam).map(|(b, l)| b * (0.5 * dt * l).exp()).collect();
        let log_shift = 0.5 * kappa * kappa * kernels.h0 * dt;
        Ok(Self {
            lattice,
            kappa,
            dt,
            kernels,
            spectral,
            sampler,
            heat_half,
            heat_full,
            bracket_v,
            bracket_u,
            log_shift,
        })
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn kernels(&self) -> &Kernels {
        &self.kernels
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    /// Number of steps needed to reach `t` (must be a multiple of dt).
    pub fn steps_to(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * t.max(self.dt) {
            return argument(format!("time {t} is not a multiple of dt = {}", self.dt));
        }
        Ok(k as usize)
    }

    pub fn prepare(&self, cfg: &ObservablesConfig) -> Result<PreparedObservables> {
        let lat = &self.lattice;
        let output_steps = cfg
            .output_times
            .iter()
            .map(|&t| {
                if !(t >= 0.0) {
                    return argument("output times must be non-negative");
                }
                Ok((t / self.dt).round() as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        if output_steps.windows(2).any(|w| w[0] >= w[1]) {
            return argument("output times must be strictly increasing after rounding to steps");
        }
        let tests = cfg
            .test_functions
            .iter()
            .map(|f| {
                f.validate()?;
                f.sample(lat)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut balls = Vec::new();
        let mut ball_volumes = Vec::new();
        for b in &cfg.balls {
            if b.radius < 2.0 * lat.cell() {
                return Err(Error::Resolution(format!(
                    "ball radius {} is below two cells ({})",
                    b.radius,
                    2.0 * lat.cell()
                )));
            }
            let ind = TestFunction::Ball {
                center: b.center.clone(),
                radius: b.radius,
            }
            .sample(lat)?;
            ball_volumes.push(ind.iter().sum::<f64>() * lat.cell_volume());
            balls.push(ind);
        }
        let mut rho = Vec::new();
        for r in &cfg.rho {
            let (weights, tilt) = rho_operator(lat, &self.spectral, r)?;
            rho.push((weights, tilt));
        }
        Ok(PreparedObservables {
            output_steps,
            tests,
            balls,
            ball_volumes,
            rho,
            track_bracket: cfg.track_bracket,
        })
    }

    /// Runs one trajectory (member `index` of `seeds`).
    pub fn run(&self, init: &LatticeField, obs: &PreparedObservables, seeds: &SeedStream, index: u64) -> Result<Observables> {
        let mut out = self.run_lanes(init, obs, seeds, &[index])?;
        Ok(out.remove(0))
    }

    /// Runs members 0..n of `seeds`, two per transform, in parallel.
    /// Members 2j and 2j+1 always share transforms, so results do not depend
    /// on the thread count.
    pub fn run_ensemble(
        &self,
        init: &LatticeField,
        obs: &PreparedObservables,
        seeds: &SeedStream,
        n_members: usize,
    ) -> Result<Vec<Observables>> {
        let n_pairs = n_members.div_ceil(2);
        let chunks: Vec<Result<Vec<Observables>>> = (0..n_pairs)
            .into_par_iter()
            .map(|p| {
                let a = 2 * p as u64;
                if 2 * p + 1 < n_members {
                    self.run_lanes(init, obs, seeds, &[a, a + 1])
                } else {
                    self.run_lanes(init, obs, seeds, &[a])
                }
            })
            .collect();
        let mut all = Vec::with_capacity(n_members);
        for c in chunks {
            all.extend(c?);
        }
        Ok(all)
    }

    fn run_lanes(&self, init: &LatticeField, obs: &PreparedObservables, seeds: &SeedStream, members: &[u64]) -> Result<Vec<Observables>> {
        if init.lattice != self.lattice {
            return argument("initial field lives on a different lattice");
        }
        let n_steps = obs.output_steps.last().copied().unwrap_or(0);
        let lanes = members.len();
        let n = self.lattice.n_cells();
        let cv = self.lattice.cell_volume();
        let mut ws = self.spectral.workspace();
        let mut rngs: Vec<StreamRng> = members.iter().map(|&m| seeds.substream(m)).collect();
        let mut v: Vec<Vec<f64>> = vec![init.values.clone(); lanes];
        let mut noise: Vec<Vec<f64>> = vec![vec![0.0; n]; 2];
        let mut spare = vec![0.0; n];
        let mut have_spare = false;
        let mut u_buf: Vec<Vec<f64>> = vec![vec![0.0; n]; lanes];
        let mut recs: Vec<Observables> = (0..lanes).map(|_| Observables::new(obs)).collect();
        let mut mass: Vec<f64> = v.iter().map(|x| crate::stats::ksum(x) * cv).collect();
        let mut qv = vec![0.0; lanes];
        let mut bracket = vec![0.0; lanes];
        let mut sqrt_mart = vec![0.0; lanes];
        let mut min_value: Vec<f64> = v.iter().map(|x| min_of(x)).collect();
        let mut next_out = 0;
        let mut fresh = true;

        let record = |k: usize,
                          v: &mut Vec<Vec<f64>>,
                          fresh: bool,
                          u_buf: &mut Vec<Vec<f64>>,
                          ws: &mut Workspace,
                          mass: &[f64],
                          qv: &[f64],
                          bracket: &[f64],
                          sqrt_mart: &[f64],
                          recs: &mut Vec<Observables>| {
            for (u, vv) in u_buf.iter_mut().zip(v.iter()) {
                u.copy_from_slice(vv);
            }
            if !fresh {
                let (first, rest) = u_buf.split_at_mut(1);
                let b = rest.first_mut().map(|x| x.as_mut_slice());
                self.spectral.apply_pair(&mut first[0], b, &self.heat_half, None, ws);
                for u in u_buf.iter_mut() {
                    for x in u.iter_mut() {
                        *x = x.max(0.0);
                    }
                }
            }
            let t = k as f64 * self.dt;
            for (lane, rec) in recs.iter_mut().enumerate() {
                rec.times.push(t);
                rec.total_mass.push(mass[lane]);
                rec.quadratic_variation.push(qv[lane]);
                rec.bracket.push(bracket[lane]);
                rec.sqrt_martingale.push(sqrt_mart[lane]);
                let u = &u_buf[lane];
                for (series, f) in rec.test_integrals.iter_mut().zip(&obs.tests) {
                    series.push(crate::lattice::integrate(u, f, cv));
                }
                for (series, f) in rec.ball_masses.iter_mut().zip(&obs.balls) {
                    series.push(crate::lattice::integrate(u, f, cv));
                }
            }
            for (i, (weights, tilt)) in obs.rho.iter().enumerate() {
                let tilted: Vec<Vec<f64>> = u_buf
                    .iter()
                    .map(|u| u.iter().zip(tilt).map(|(a, b)| a * b).collect())
                    .collect();
                let (fa, fb) = self
                    .spectral
                    .quadratic_forms(&tilted[0], tilted.get(1).map(|x| x.as_slice()), weights, ws);
                recs[0].rho[i].push(fa);
                if lanes == 2 {
                    recs[1].rho[i].push(fb);
                }
            }
        };

        while next_out < obs.output_steps.len() && obs.output_steps[next_out] == 0 {
            record(0, &mut v, true, &mut u_buf, &mut ws, &mass, &qv, &bracket, &sqrt_mart, &mut recs);
            next_out += 1;
        }
        for k in 1..=n_steps {
            // heat part: pending half step plus this step's first half
            let mult = if fresh { &self.heat_half } else { &self.heat_full };
            let quad = if obs.track_bracket {
                Some(if fresh { &self.bracket_u[..] } else { &self.bracket_v[..] })
            } else {
                None
            };
            let forms = {
                let (first, rest) = v.split_at_mut(1);
                let b = rest.first_mut().map(|x| x.as_mut_slice());
                self.spectral.apply_pair(&mut first[0], b, mult, quad, &mut ws)
            };
            fresh = false;
            // noise
            if lanes == 2 {
                let (na, nb) = noise.split_at_mut(1);
                let (ra, rb) = rngs.split_at_mut(1);
                self.sampler.sample_pair(&mut ra[0], &mut rb[0], &mut na[0], &mut nb[0], &mut ws);
            } else if have_spare {
                std::mem::swap(&mut noise[0], &mut spare);
                have_spare = false;
            } else {
                let (na, nb) = noise.split_at_mut(1);
                self.sampler.sample_two_steps(&mut rngs[0], &mut na[0], &mut spare, &mut ws);
                let _ = nb;
                have_spare = true;
            }
            for lane in 0..lanes {
                let vv = &mut v[lane];
                let f = &noise[lane];
                let mut lo = f64::INFINITY;
                for (x, &df) in vv.iter_mut().zip(f) {
                    *x *= (self.kappa * df - self.log_shift).exp();
                    *x = x.max(0.0);
                    lo = lo.min(*x);
                }
                if lo.is_nan() {
                    return Err(Error::Domain("non-finite value in the solution field".into()));
                }
                min_value[lane] = min_value[lane].min(lo);
                let m = crate::stats::ksum(vv) * cv;
                if obs.track_bracket {
                    qv[lane] += (m - mass[lane]).powi(2);
                    bracket[lane] += if lane == 0 { forms.0 } else { forms.1 };
                    if mass[lane] > 0.0 {
                        sqrt_mart[lane] += (m - mass[lane]) / (2.0 * mass[lane].sqrt());
                    }
                }
                mass[lane] = m;
            }
            while next_out < obs.output_steps.len() && obs.output_steps[next_out] == k {
                record(k, &mut v, false, &mut u_buf, &mut ws, &mass, &qv, &bracket, &sqrt_mart, &mut recs);
                next_out += 1;
            }
        }
        for (rec, lo) in recs.iter_mut().zip(min_value) {
            rec.min_value = lo;
        }
        Ok(recs)
    }
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

impl Observables {
    fn new(obs: &PreparedObservables) -> Self {
        Observables {
            times: Vec::new(),
            total_mass: Vec::new(),
            ball_masses: vec![Vec::new(); obs.balls.len()],
            test_integrals: vec![Vec::new(); obs.tests.len()],
            rho: vec![Vec::new(); obs.rho.len()],
            quadratic_variation: Vec::new(),
            bracket: Vec::new(),
            sqrt_martingale: Vec::new(),
            min_value: f64::INFINITY,
        }
    }
}

/// Spectral weights and tilt for S^ρ: with w = u·e^{−a|x|},
/// S = cell^{2d}·Σ w(x)φ(x−y)w(y) = Σ_k q(k)|ŵ(k)|².
fn rho_operator(lattice: &LatticeSpec, spectral: &Spectral, r: &RhoFunctional) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(r.rho > 0.0 && r.tilt >= 0.0 && r.r_min > 0.0) {
        return argument("rho functional needs rho > 0, tilt >= 0, r_min > 0");
    }
    let d = lattice.d();
    let s = r.r_min * r.r_min;
    let phi = lattice.sample(&vec![0.0; d], |x| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (s + r2).powf(-0.5 * r.rho)
    });
    let mut ws = spectral.workspace();
    let phi_hat = spectral.real_dft(&phi, &mut ws);
    let c = lattice.cell_volume().powi(2) / lattice.n_cells() as f64;
    let weights = phi_hat.iter().map(|p| p * c).collect();
    let tilt = lattice.sample(&vec![0.0; d], |x| (-r.tilt * crate::special::norm(x)).exp());
    Ok((weights, tilt))
}

/// Solves on [0, t_end] from G_δ μ and returns the observables of one
/// trajectory (member 0 of `seeds`). `dt` defaults to min(cell², ε²)/4 and is
/// shrunk so that it divides t_end.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    params: &ModelParams,
    mu: &MeasureSpec,
    epsilon: f64,
    lattice: LatticeSpec,
    t_end: f64,
    dt: Option<f64>,
    obs: &ObservablesConfig,
    seeds: &SeedStream,
) -> Result<Observables> {
    Ok(simulate_ensemble(params, mu, epsilon, lattice, t_end, dt, obs, seeds, 1)?.remove(0))
}

/// Ensemble version of [`simulate`]; member i uses substream i.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    params: &ModelParams,
    mu: &MeasureSpec,
    epsilon: f64,
    lattice: LatticeSpec,
    t_end: f64,
    dt: Option<f64>,
    obs: &ObservablesConfig,
    seeds: &SeedStream,
    n_members: usize,
) -> Result<Vec<Observables>> {
    if !(t_end > 0.0) {
        return argument("t_end must be positive");
    }
    let dt = fit_dt(dt.unwrap_or_else(|| default_dt(&lattice, epsilon)), t_end);
    let scheme = Scheme::new(params, epsilon, lattice, dt)?;
    let init = init_condition(mu, &lattice)?;
    let mut cfg = obs.clone();
    if cfg.output_times.is_empty() {
        cfg.output_times = vec![0.0, t_end];
    }
    let prepared = scheme.prepare(&cfg)?;
    scheme.run_ensemble(&init, &prepared, seeds, n_members)
}

/// Largest step ≤ `dt` that divides `t` evenly. A `dt` that already divides
/// `t` up to roundoff is kept, so the map is idempotent.
pub fn fit_dt(dt: f64, t: f64) -> f64 {
    t / ((t / dt) * (1.0 - 1e-12)).ceil().max(1.0)
}

/// Draws one increment with a standalone sampler; mostly for tests.
pub fn noise_for<R: Rng + ?Sized>(scheme: &Scheme, rng: &mut R) -> NoiseIncrement {
    let mut ws = scheme.spectral.workspace();
    scheme.sampler.sample(rng, &mut ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat() -> LatticeSpec {
        LatticeSpec::new(3, 16, 1.6).unwrap()
    }

    #[test]
    fn atom_init_mass_and_resolution() {
        let l = lat();
        let f = init_condition(&MeasureSpec::atom(vec![0.0; 3], 2.5, 0.09), &l).unwrap();
        assert!((f.total_mass() / 2.5 - 1.0).abs() < 1e-6);
        assert!(f.min_value() > 0.0);
        let r = init_condition(&MeasureSpec::atom(vec![0.0; 3], 1.0, 0.01), &l);
        assert!(matches!(r, Err(Error::Resolution(_))));
    }

    #[test]
    fn two_atoms_are_mirror_symmetric() {
        let l = lat();
        let mu = MeasureSpec {
            kind: MeasureKind::AtomCloud {
                atoms: vec![
                    Atom { position: vec![0.3, 0.0, 0.0], weight: 1.0 },
                    Atom { position: vec![-0.3, 0.0, 0.0], weight: 1.0 },
                ],
            },
            delta: 0.04,
        };
        let f = init_condition(&mu, &l).unwrap();
        for flat in 0..l.n_cells() {
            let idx: Vec<i64> = l.multi_index(flat).iter().map(|&j| j as i64).collect();
            let mirror = l.flat_index(&[-idx[0], idx[1], idx[2]]);
            assert!((f.values[flat] - f.values[mirror]).abs() <= 1e-12 * f.values[flat].abs().max(1e-300));
        }
    }

    #[test]
    fn lebesgue_is_constant_and_kappa_zero_is_heat_flow() {
        let l = lat();
        let f = init_condition(&MeasureSpec::lebesgue(1.5), &l).unwrap();
        assert!(f.values.iter().all(|&v| v == 1.5));
        let p = ModelParams::with_null(3, 0.0).unwrap();
        let scheme = Scheme::new(&p, 0.25, l, 0.004).unwrap();
        let inc = noise_for(&scheme, &mut crate::rng::substream(1, "s", 0));
        let g = step(&f, &inc, 0.0, 0.004).unwrap();
        for v in &g.values {
            assert!((v - 1.5).abs() < 1e-13);
        }
        assert!(step(&f, &inc, 0.4, 0.02).is_err());
    }

    #[test]
    fn merged_engine_matches_standalone_steps() {
        let l = lat();
        let p = ModelParams::new(3, 0.4).unwrap();
        let dt = 0.004;
        let scheme = Scheme::new(&p, 0.25, l, dt).unwrap();
        let init = init_condition(&MeasureSpec::atom(vec![0.0; 3], 1.0, 0.0625), &l).unwrap();
        let f = TestFunction::gaussian(vec![0.1, 0.0, 0.0], 0.3);
        let cfg = ObservablesConfig {
            output_times: vec![0.0, 3.0 * dt, 4.0 * dt],
            test_functions: vec![f.clone()],
            ..Default::default()
        };
        let prep = scheme.prepare(&cfg).unwrap();
        let seeds = SeedStream::new(5, "merge");
        let merged = scheme.run(&init, &prep, &seeds, 0).unwrap();
        // reproduce with standalone steps from the same stream
        let mut rng = seeds.substream(0);
        let mut u = init.clone();
        let fvals = f.sample(&l).unwrap();
        let mut ws = scheme.spectral.workspace();
        let mut buf = vec![0.0; l.n_cells()];
        let mut spare = vec![0.0; l.n_cells()];
        let mut vals = vec![u.integrate(&fvals)];
        for k in 0..4 {
            let values = if k % 2 == 0 {
                let mut a = vec![0.0; l.n_cells()];
                scheme.sampler.sample_two_steps(&mut rng, &mut a, &mut spare, &mut ws);
                a
            } else {
                spare.clone()
            };
            buf.copy_from_slice(&values);
            let inc = NoiseIncrement {
                field: LatticeField::new(l, buf.clone()).unwrap(),
                dt,
                epsilon: 0.25,
                h0: scheme.kernels.h0,
            };
            u = step(&u, &inc, 0.4, dt).unwrap();
            if k >= 2 {
                vals.push(u.integrate(&fvals));
            }
        }
        for (a, b) in merged.test_integrals[0].iter().zip(&vals) {
            assert!((a / b - 1.0).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn pairing_is_invisible_to_members() {
        let l = lat();
        let p = ModelParams::new(3, 0.4).unwrap();
        let scheme = Scheme::new(&p, 0.25, l, 0.004).unwrap();
        let init = init_condition(&MeasureSpec::lebesgue(1.0), &l).unwrap();
        let cfg = ObservablesConfig {
            output_times: vec![0.02, 0.04],
            balls: vec![BallSpec { center: vec![0.0; 3], radius: 0.3 }],
            track_bracket: true,
            ..Default::default()
        };
        let prep = scheme.prepare(&cfg).unwrap();
        let seeds = SeedStream::new(9, "pairs");
        let ens = scheme.run_ensemble(&init, &prep, &seeds, 3).unwrap();
        let lone = scheme.run(&init, &prep, &seeds, 1).unwrap();
        for (a, b) in ens[1].ball_masses[0].iter().zip(&lone.ball_masses[0]) {
            assert!((a / b - 1.0).abs() < 1e-12);
        }
        assert!((ens[1].bracket[1] / lone.bracket[1] - 1.0).abs() < 1e-12);
        assert!(ens.iter().all(|o| o.min_value > 0.0));
    }
}
