//! Truncated Wiener chaos expansion on the simulation lattice.
//!
//! The terms Iⁿ satisfy I⁰_t = G_t μ and Iⁿ_t = κ∫₀ᵗ G_{t−s}(Iⁿ⁻¹_s dF_s).
//! They are advanced on the same splitting grid as [`crate::spde`]: each step
//! applies the heat flow to every order and then adds the Itô source
//! κ·Iⁿ⁻¹·dF, with no exponential correction. Orders built this way are exactly
//! orthogonal in the discrete scheme, since order n is a sum of products of n
//! increments from distinct steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{argument, Error, Result};
use crate::lattice::{LatticeField, LatticeSpec, Spectral};
use crate::noise::{build_kernels, Kernels};
use crate::quadrature::GaussLegendre;
use crate::rng::SeedStream;
use crate::spde::{self, init_condition, MeasureKind, MeasureSpec, Scheme, TestFunction};
use crate::special::ModelParams;

/// Highest order the recursion accepts.
pub const MAX_ORDER: usize = 6;

/// Relative agreement required between the two time-quadrature resolutions.
pub const QUADRATURE_TOL: f64 = 1e-4;

/// Snapshot of y ↦ ∫ Iⁿ_t(y, z) μ(dz) at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosTerm {
    pub order: usize,
    pub t: f64,
    pub field: LatticeField,
    /// Identifies the noise realization the term was driven by.
    pub realization: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosConfig {
    pub max_order: usize,
    pub output_times: Vec<f64>,
    pub test_functions: Vec<TestFunction>,
    /// Also run the SPDE on the same noise.
    pub paired_spde: bool,
}

/// Test integrals of one realization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChaosRecord {
    pub times: Vec<f64>,
    /// `orders[n][j][k]` = Iⁿ_{t_k}(f_j).
    pub orders: Vec<Vec<Vec<f64>>>,
    /// `spde[j][k]` = u_{t_k}(f_j) from the paired run (empty if unpaired).
    pub spde: Vec<Vec<f64>>,
}

impl ChaosRecord {
    /// Partial sum Σ_{n≤N} Iⁿ_{t_k}(f_j).
    pub fn partial_sum(&self, n: usize, j: usize, k: usize) -> f64 {
        self.orders[..=n].iter().map(|o| o[j][k]).sum()
    }
}

/// The recursion for a fixed scheme and truncation order.
#[derive(Debug, Clone)]
pub struct ChaosEngine {
    scheme: Scheme,
    max_order: usize,
}

struct Prepared {
    steps: Vec<usize>,
    tests: Vec<Vec<f64>>,
}

impl ChaosEngine {
    pub fn new(scheme: Scheme, max_order: usize) -> Result<Self> {
        if max_order > MAX_ORDER {
            return argument(format!("chaos order {max_order} exceeds the supported maximum {MAX_ORDER}"));
        }
        Ok(Self { scheme, max_order })
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    fn prepare(&self, times: &[f64], tests: &[TestFunction]) -> Result<Prepared> {
        let steps = times
            .iter()
            .map(|&t| {
                if !(t >= 0.0) {
                    return argument("output times must be non-negative");
                }
                Ok((t / self.scheme.dt()).round() as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return argument("output times must be strictly increasing after rounding to steps");
        }
        let tests = tests
            .iter()
            .map(|f| f.sample(self.scheme.lattice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { steps, tests })
    }

    /// Runs members 0..n of `seeds` in parallel. Member i uses the same noise
    /// as member i of [`Scheme::run_ensemble`] with the same seeds.
    pub fn run_ensemble(&self, init: &LatticeField, cfg: &ChaosConfig, seeds: &SeedStream, n_members: usize) -> Result<Vec<ChaosRecord>> {
        if cfg.max_order != self.max_order {
            return argument("config order differs from the engine order");
        }
        let prep = self.prepare(&cfg.output_times, &cfg.test_functions)?;
        (0..n_members as u64)
            .into_par_iter()
            .map(|m| self.run_member(init, &prep, cfg.paired_spde, seeds, m, false).map(|r| r.0))
            .collect()
    }

    /// One realization with full field snapshots, indexed `[time][order]`.
    pub fn snapshots(&self, init: &LatticeField, times: &[f64], seeds: &SeedStream, member: u64) -> Result<Vec<Vec<ChaosTerm>>> {
        let prep = self.prepare(times, &[])?;
        let (_, snaps) = self.run_member(init, &prep, false, seeds, member, true)?;
        let tag = seeds.fingerprint(member);
        let lat = *self.scheme.lattice();
        Ok(snaps
            .into_iter()
            .zip(&prep.steps)
            .map(|(fields, &k)| {
                fields
                    .into_iter()
                    .enumerate()
                    .map(|(order, values)| ChaosTerm {
                        order,
                        t: k as f64 * self.scheme.dt(),
                        field: LatticeField { lattice: lat, values },
                        realization: tag,
                    })
                    .collect()
            })
            .collect())
    }

    #[allow(clippy::type_complexity)]
    fn run_member(
        &self,
        init: &LatticeField,
        prep: &Prepared,
        paired: bool,
        seeds: &SeedStream,
        member: u64,
        keep_fields: bool,
    ) -> Result<(ChaosRecord, Vec<Vec<Vec<f64>>>)> {
        let sc = &self.scheme;
        if init.lattice != *sc.lattice() {
            return argument("initial field lives on a different lattice");
        }
        let n = sc.lattice().n_cells();
        let cv = sc.lattice().cell_volume();
        let orders = self.max_order + 1;
        let lanes = orders + usize::from(paired);
        let mut rng = seeds.substream(member);
        let mut ws = sc.spectral().workspace();
        // lanes 0..=N are the chaos orders, the last lane is the paired SPDE
        let mut v: Vec<Vec<f64>> = (0..lanes)
            .map(|i| if i == 0 || i == orders { init.values.clone() } else { vec![0.0; n] })
            .collect();
        let mut noise = vec![0.0; n];
        let mut spare = vec![0.0; n];
        let mut have_spare = false;
        let mut out_buf: Vec<Vec<f64>> = vec![vec![0.0; n]; lanes];
        let mut rec = ChaosRecord {
            times: Vec::new(),
            orders: vec![vec![Vec::new(); prep.tests.len()]; orders],
            spde: if paired { vec![Vec::new(); prep.tests.len()] } else { Vec::new() },
        };
        let mut fields = Vec::new();
        let n_steps = prep.steps.last().copied().unwrap_or(0);
        let mut next = 0;
        let mut fresh = true;
        let kappa = sc.kappa();
        let mut live: Vec<bool> = (0..lanes).map(|i| i == 0 || i == orders).collect();

        let mut record = |k: usize, v: &[Vec<f64>], live: &[bool], fresh: bool, ws: &mut crate::lattice::Workspace| {
            for (o, x) in out_buf.iter_mut().zip(v) {
                o.copy_from_slice(x);
            }
            if !fresh {
                let mut refs: Vec<&mut [f64]> = out_buf
                    .iter_mut()
                    .zip(live)
                    .filter(|(_, &l)| l)
                    .map(|(x, _)| x.as_mut_slice())
                    .collect();
                sc.spectral().apply_many(&mut refs, &sc.heat_half, ws);
            }
            if paired {
                for x in out_buf[orders].iter_mut() {
                    *x = x.max(0.0);
                }
            }
            rec.times.push(k as f64 * sc.dt());
            for (j, f) in prep.tests.iter().enumerate() {
                for (ord, series) in rec.orders.iter_mut().enumerate() {
                    series[j].push(crate::lattice::integrate(&out_buf[ord], f, cv));
                }
                if paired {
                    rec.spde[j].push(crate::lattice::integrate(&out_buf[orders], f, cv));
                }
            }
            if keep_fields {
                fields.push(out_buf[..orders].to_vec());
            }
        };

        while next < prep.steps.len() && prep.steps[next] == 0 {
            record(0, &v, &live, true, &mut ws);
            next += 1;
        }
        for k in 1..=n_steps {
            let mult = if fresh { &sc.heat_half } else { &sc.heat_full };
            {
                // orders that are still identically zero stay exactly zero
                let mut refs: Vec<&mut [f64]> = v
                    .iter_mut()
                    .zip(&live)
                    .filter(|(_, &l)| l)
                    .map(|(x, _)| x.as_mut_slice())
                    .collect();
                sc.spectral().apply_many(&mut refs, mult, &mut ws);
            }
            fresh = false;
            if have_spare {
                std::mem::swap(&mut noise, &mut spare);
                have_spare = false;
            } else {
                sc.sampler.sample_two_steps(&mut rng, &mut noise, &mut spare, &mut ws);
                have_spare = true;
            }
            for ord in (1..orders).rev() {
                if kappa == 0.0 || !live[ord - 1] {
                    continue;
                }
                live[ord] = true;
                let (lo, hi) = v.split_at_mut(ord);
                for ((x, &src), &df) in hi[0].iter_mut().zip(&lo[ord - 1]).zip(&noise) {
                    *x += kappa * src * df;
                }
            }
            if paired {
                let u = &mut v[orders];
                for (x, &df) in u.iter_mut().zip(&noise) {
                    *x = (*x * (kappa * df - sc.log_shift).exp()).max(0.0);
                }
            }
            if v[orders - 1].iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("non-finite value in a chaos term".into()));
            }
            while next < prep.steps.len() && prep.steps[next] == k {
                record(k, &v, &live, false, &mut ws);
                next += 1;
            }
        }
        Ok((rec, fields))
    }
}

/// Chaos terms of orders 0..=n_max for one realization (member `member` of
/// `seeds`), as snapshots at `output_times`, indexed `[time][order]`.
#[allow(clippy::too_many_arguments)]
pub fn chaos_terms(
    params: &ModelParams,
    mu: &MeasureSpec,
    epsilon: f64,
    lattice: LatticeSpec,
    output_times: &[f64],
    dt: Option<f64>,
    n_max: usize,
    seeds: &SeedStream,
    member: u64,
) -> Result<Vec<Vec<ChaosTerm>>> {
    let t_end = *output_times
        .last()
        .ok_or_else(|| Error::Argument("no output times".into()))?;
    let dt = match dt {
        Some(dt) => dt,
        None if t_end > 0.0 => spde::fit_dt(spde::default_dt(&lattice, epsilon), t_end),
        None => spde::default_dt(&lattice, epsilon),
    };
    let scheme = Scheme::new(params, epsilon, lattice, dt)?;
    let engine = ChaosEngine::new(scheme, n_max)?;
    let init = init_condition(mu, &lattice)?;
    engine.snapshots(&init, output_times, seeds, member)
}

/// Σ_{n≤N} Iⁿ at each snapshot time.
pub fn partial_sum_solution(terms: &[Vec<ChaosTerm>], n: usize) -> Result<Vec<LatticeField>> {
    let tag = terms
        .first()
        .and_then(|t| t.first())
        .ok_or_else(|| Error::Argument("no chaos terms supplied".into()))?
        .realization;
    terms
        .iter()
        .map(|at_t| {
            if at_t.len() <= n {
                return argument(format!("partial sum to order {n} needs {} terms, got {}", n + 1, at_t.len()));
            }
            if at_t.iter().any(|c| c.realization != tag) {
                return argument("chaos terms come from different noise realizations");
            }
            let lat = at_t[0].field.lattice;
            let mut sum = vec![0.0; lat.n_cells()];
            for c in &at_t[..=n] {
                if c.field.lattice != lat || c.t != at_t[0].t {
                    return argument("chaos terms live on different lattices or times");
                }
                for (s, v) in sum.iter_mut().zip(&c.field.values) {
                    *s += v;
                }
            }
            Ok(LatticeField { lattice: lat, values: sum })
        })
        .collect()
}

/// E[(Iⁿ_t(f, G_δ μ))²] for n ≤ 2 with the lattice covariance h^ε.
///
/// Writing S = y+z and D = y−z, each pair of Gaussian transitions becomes a
/// transition for S times one for D with the Jacobians cancelling, and h only
/// sees D. For a Gaussian f the S chain is closed form. The D chain is summed
/// on the simulation lattice with the periodic h^ε table: Gaussian start around
/// D₀ = x−y, multiplication by h at each time s_i, lattice heat flow for
/// 2(s_{i+1} − s_i) in between, and the closed-form Gaussian end weight.
/// Times are integrated by Gauss–Legendre at two resolutions; disagreement
/// above [`QUADRATURE_TOL`] is reported as [`Error::Quadrature`].
///
/// μ must be an atom cloud (δ > 0) or Lebesgue; f must be Gaussian. Gaussians
/// wider than a fraction of the box see the periodic images.
pub fn chaos_l2_norm_quadrature(
    params: &ModelParams,
    mu: &MeasureSpec,
    f: &TestFunction,
    t: f64,
    n: usize,
    epsilon: f64,
    lattice: LatticeSpec,
) -> Result<f64> {
    if n > 2 {
        return Err(Error::Unsupported(format!("closed quadrature only for orders n <= 2, got {n}")));
    }
    if !(t > 0.0) {
        return argument("t must be positive");
    }
    let d = lattice.d();
    if params.d() != d {
        return argument("lattice dimension differs from the model dimension");
    }
    let (center, sigma, amp) = match f {
        TestFunction::Gaussian {
            center,
            sigma,
            amplitude,
        } if center.len() == d && *sigma > 0.0 => (center.clone(), *sigma, *amplitude),
        _ => return Err(Error::Unsupported("chaos quadrature needs a Gaussian test function".into())),
    };
    let s2 = sigma * sigma;
    let delta = mu.delta;
    let df = d as f64;
    let source = match &mu.kind {
        MeasureKind::AtomCloud { atoms } => {
            if !(delta > 0.0) {
                return argument("atoms need a positive smoothing time delta");
            }
            Source::Atoms(atoms.iter().map(|a| (a.position.clone(), a.weight)).collect())
        }
        MeasureKind::Lebesgue { intensity } => Source::Lebesgue(*intensity),
        _ => return Err(Error::Unsupported("chaos quadrature needs atoms or Lebesgue initial data".into())),
    };
    if n == 0 {
        return Ok(match &source {
            Source::Atoms(atoms) => {
                let big_t = s2 + t + delta;
                let m: f64 = atoms
                    .iter()
                    .map(|(p, w)| {
                        let r2: f64 = p.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                        w * amp * (s2 / big_t).powf(0.5 * df) * (-r2 / (2.0 * big_t)).exp()
                    })
                    .sum();
                m * m
            }
            Source::Lebesgue(lam) => {
                let m = lam * amp * (2.0 * std::f64::consts::PI * s2).powf(0.5 * df);
                m * m
            }
        });
    }
    let kernels = Arc::new(build_kernels(params, epsilon, lattice)?);
    if let Source::Atoms(_) = source {
        if (2.0 * delta).sqrt() < 2.0 * lattice.cell() {
            return Err(Error::Resolution(format!(
                "starting width sqrt(2 delta) = {} is below two cells",
                (2.0 * delta).sqrt()
            )));
        }
    }
    let chain = DChain::new(kernels, t, s2, delta);
    let kappa2n = params.kappa().powi(2 * n as i32);
    let eval = |nodes: usize| -> f64 {
        match &source {
            Source::Atoms(atoms) => {
                let mut total = 0.0;
                let big_t = s2 + t + delta;
                for (pi, wi) in atoms {
                    for (pj, wj) in atoms {
                        let s0: f64 = pi
                            .iter()
                            .zip(pj)
                            .zip(&center)
                            .map(|((a, b), c)| (a + b - 2.0 * c).powi(2))
                            .sum();
                        let s_part = amp * amp * (s2 / big_t).powf(0.5 * df) * (-s0 / (4.0 * big_t)).exp();
                        let d0: Vec<f64> = pi.iter().zip(pj).map(|(a, b)| a - b).collect();
                        total += wi * wj * s_part * chain.integral(Some(&d0), n, nodes);
                    }
                }
                total
            }
            Source::Lebesgue(lam) => {
                let s_part = amp * amp * (4.0 * std::f64::consts::PI * s2).powf(0.5 * df) * 2f64.powf(-df);
                lam * lam * s_part * chain.integral(None, n, nodes)
            }
        }
    };
    let coarse = eval(16);
    let fine = eval(32);
    let achieved = ((fine - coarse) / fine).abs();
    if !(achieved <= QUADRATURE_TOL) {
        return Err(Error::Quadrature {
            achieved,
            target: QUADRATURE_TOL,
        });
    }
    Ok(kappa2n * fine)
}

enum Source {
    Atoms(Vec<(Vec<f64>, f64)>),
    Lebesgue(f64),
}

struct DChain {
    kernels: Arc<Kernels>,
    spectral: Spectral,
    r2: Vec<f64>,
    t: f64,
    s2: f64,
    delta: f64,
}

impl DChain {
    fn new(kernels: Arc<Kernels>, t: f64, s2: f64, delta: f64) -> Self {
        let lat = *kernels.lattice();
        let r2 = lat.sample(&vec![0.0; lat.d()], |x| x.iter().map(|v| v * v).sum());
        Self {
            spectral: Spectral::new(lat),
            kernels,
            r2,
            t,
            s2,
            delta,
        }
    }

    /// Start density of D at time s: periodic Gaussian of variance 2(s+δ)
    /// around d0, or 1 for Lebesgue.
    fn start(&self, d0: Option<&[f64]>, s: f64) -> Vec<f64> {
        let lat = self.kernels.lattice();
        match d0 {
            None => vec![1.0; lat.n_cells()],
            Some(d0) => {
                let var = 2.0 * (s + self.delta);
                let axes: Vec<Vec<f64>> = d0.iter().map(|&p| spde::periodic_gaussian(lat, p, var)).collect();
                (0..lat.n_cells())
                    .map(|flat| lat.multi_index(flat).iter().zip(&axes).map(|(&j, a)| a[j]).product())
                    .collect()
            }
        }
    }

    /// Closed-form end weight after the last factor h at time s.
    fn end_weight_sum(&self, field: &[f64], s: f64) -> f64 {
        let d = self.kernels.lattice().d() as f64;
        let b = self.s2 + self.t - s;
        let pre = (self.s2 / b).powf(0.5 * d);
        let cv = self.kernels.lattice().cell_volume();
        let sum: crate::stats::KahanSum = field
            .iter()
            .zip(&self.kernels.h_table)
            .zip(&self.r2)
            .map(|((x, h), r2)| x * h * (-r2 / (4.0 * b)).exp())
            .collect();
        pre * cv * sum.value()
    }

    fn integral(&self, d0: Option<&[f64]>, n: usize, nodes: usize) -> f64 {
        let gl = GaussLegendre::new(nodes);
        match n {
            1 => gl
                .mapped(0.0, self.t)
                .map(|(s, w)| w * self.end_weight_sum(&self.start(d0, s), s))
                .sum(),
            2 => {
                let mut ws = self.spectral.workspace();
                let mut total = 0.0;
                for (s2n, w2) in gl.mapped(0.0, self.t) {
                    for (s1, w1) in gl.mapped(0.0, s2n) {
                        let mut phi: Vec<f64> = self
                            .start(d0, s1)
                            .iter()
                            .zip(&self.kernels.h_table)
                            .map(|(a, h)| a * h)
                            .collect();
                        let mult = self.spectral.heat_multiplier(2.0 * (s2n - s1));
                        self.spectral.apply_pair(&mut phi, None, &mult, None, &mut ws);
                        total += w2 * w1 * self.end_weight_sum(&phi, s2n);
                    }
                }
                total
            }
            _ => unreachable!("orders above 2 are rejected by the caller"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_zero_kills_higher_orders() {
        let lat = LatticeSpec::new(3, 16, 1.6).unwrap();
        let p = ModelParams::with_null(3, 0.0).unwrap();
        let mu = MeasureSpec::atom(vec![0.0; 3], 1.0, 0.0625);
        let seeds = SeedStream::new(3, "chaos");
        let terms = chaos_terms(&p, &mu, 0.25, lat, &[0.02], Some(0.004), 3, &seeds, 0).unwrap();
        for c in &terms[0][1..] {
            assert!(c.field.values.iter().all(|&v| v == 0.0));
        }
        let sum = partial_sum_solution(&terms, 3).unwrap();
        assert_eq!(sum[0].values, terms[0][0].field.values);
    }

    #[test]
    fn order_limit_and_mismatched_realizations() {
        let lat = LatticeSpec::new(3, 16, 1.6).unwrap();
        let p = ModelParams::new(3, 0.3).unwrap();
        let mu = MeasureSpec::atom(vec![0.0; 3], 1.0, 0.0625);
        let seeds = SeedStream::new(3, "chaos");
        assert!(chaos_terms(&p, &mu, 0.25, lat, &[0.02], Some(0.004), 7, &seeds, 0).is_err());
        let a = chaos_terms(&p, &mu, 0.25, lat, &[0.02], Some(0.004), 2, &seeds, 0).unwrap();
        let b = chaos_terms(&p, &mu, 0.25, lat, &[0.02], Some(0.004), 2, &seeds, 1).unwrap();
        let mut mixed = a.clone();
        mixed[0][2] = b[0][2].clone();
        assert!(partial_sum_solution(&mixed, 2).is_err());
        assert!(partial_sum_solution(&a, 2).is_ok());
    }

    #[test]
    fn order_zero_quadrature_is_closed_form() {
        let lat = LatticeSpec::new(3, 16, 3.2).unwrap();
        let p = ModelParams::new(3, 0.4).unwrap();
        let f = TestFunction::gaussian(vec![0.2, 0.0, 0.0], 0.5);
        let mu = MeasureSpec::atom(vec![0.0; 3], 2.0, 0.09);
        let v = chaos_l2_norm_quadrature(&p, &mu, &f, 1.0, 0, 0.5, lat).unwrap();
        let big_t: f64 = 0.25 + 1.09;
        let m = 2.0 * (0.25 / big_t).powf(1.5) * (-0.04 / (2.0 * big_t)).exp();
        assert!((v / (m * m) - 1.0).abs() < 1e-14);
    }
}
