//! Subcommand bodies. Each writes its tables through [`OutputDir`] and
//! prints a short summary on stdout.

use std::sync::Arc;

use pam_core::chaos::{chaos_l2_norm_quadrature, ChaosConfig, ChaosEngine};
use pam_core::experiments::ExperimentConfig;
use pam_core::lattice::{LatticeField, Spectral};
use pam_core::moments::{first_moment_exact, h_alpha_norm, second_moment_bound_rhs, second_moment_bridge_rhs, BridgeKernel};
use pam_core::noise::{build_kernels, write_snapshot, CovarianceAccumulator, NoiseSampler};
use pam_core::paths::{self, TimeRule};
use pam_core::rng::SeedStream;
use pam_core::spde::{init_condition, simulate_ensemble, Scheme};
use pam_core::special;
use pam_core::stats::MCEstimate;

use crate::config::{Estimator, KernelChoice, Rule, RunConfig};
use crate::output::{join, Cell, OutputDir, Table};
use crate::{Command, ExactArgs, ExactFn, Failure, MomentAction};

fn need<T: Copy>(v: Option<T>, flag: &str, f: ExactFn) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("exact {f:?} needs --{flag}").to_lowercase()))
}

pub fn exact(a: &ExactArgs) -> Result<f64, Failure> {
    let f = a.function;
    let d = || need(a.d, "d", f);
    let v = match f {
        ExactFn::Alpha => special::alpha_of_eta(d()?, need(a.eta, "eta", f)?)?,
        ExactFn::EtaMax => special::eta_max(d()?),
        ExactFn::ModelAlpha => special::ModelParams::new(d()?, need(a.kappa, "kappa", f)?)?.alpha(),
        ExactFn::HeatKernel => {
            let x = a.x.as_deref().ok_or_else(|| Failure::Usage("exact heat-kernel needs --x".into()))?;
            special::heat_kernel(d()?, need(a.t, "t", f)?, x)?
        }
        ExactFn::BesselI => special::bessel_i(need(a.nu, "nu", f)?, need(a.z, "z", f)?)?,
        ExactFn::BesselDensity => {
            let dim = match a.dim {
                Some(v) => v,
                None => d()? as f64,
            };
            special::bessel_transition_density(dim, need(a.t, "t", f)?, need(a.a, "a", f)?, need(a.b, "b", f)?)?
        }
        ExactFn::BridgeMoment => special::bridge_exp_moment_exact(
            d()?,
            need(a.eta, "eta", f)?,
            need(a.a, "a", f)?,
            need(a.b, "b", f)?,
            need(a.t, "t", f)?,
        )?,
        ExactFn::BinnedTarget => paths::binned_exact_target(
            d()?,
            need(a.eta, "eta", f)?,
            need(a.a, "a", f)?,
            need(a.b, "b", f)?,
            need(a.half_width, "half-width", f)?,
            need(a.t, "t", f)?,
        )?,
        ExactFn::RieszConstant => {
            let d = d()?;
            if d < 3 {
                return Err(Failure::Usage("riesz-constant needs d >= 3".into()));
            }
            special::riesz_constant(d)
        }
        ExactFn::Gamma => special::gamma(need(a.z, "z", f)?),
    };
    Ok(v)
}

/// The experiment named on the command line, taken from the config's
/// `[experiment]` section when that names the same experiment.
pub fn resolve_experiment(cfg: &RunConfig, name: &str) -> Result<ExperimentConfig, Failure> {
    let name = name.replace('-', "_");
    match &cfg.experiment {
        Some(e) if e.name() == name => Ok(e.clone()),
        Some(e) => Err(Failure::Config(format!(
            "the config's [experiment] section is `{}` but `{name}` was requested",
            e.name()
        ))),
        None => ExperimentConfig::default_for(&name).ok_or_else(|| {
            Failure::Usage(format!(
                "unknown experiment `{name}`; expected one of duality, scaling, total_mass, death, singularity, supermartingale_rho, local_extinction"
            ))
        }),
    }
}

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    match cmd {
        Command::Exact(_) => unreachable!("handled before config loading"),
        Command::BridgeMoment { .. } => bridge_moment(cfg, out),
        Command::PairMoment { .. } => pair_moment(cfg, out),
        Command::NoiseCheck { .. } => noise_check(cfg, out),
        Command::Simulate { .. } => simulate(cfg, out),
        Command::ChaosVerify { .. } => chaos_verify(cfg, out),
        Command::Moments { action, .. } => moments(cfg, *action, out),
        Command::Experiment { .. } => experiment(cfg, out),
    }
}

fn estimate_cells(e: &MCEstimate) -> [Cell; 4] {
    [e.mean.into(), e.std_error.into(), e.n_samples.into(), e.clip_fraction.into()]
}

/// Estimate cells plus a note; estimator refusals (heavy tails, empty bins)
/// become a NaN row with the reason instead of ending the run.
fn estimate_or_note(r: pam_core::Result<MCEstimate>) -> Result<Vec<Cell>, Failure> {
    match r {
        Ok(e) => Ok(estimate_cells(&e).into_iter().chain([Cell::from("")]).collect()),
        Err(e @ (pam_core::Error::HeavyTailed(_) | pam_core::Error::InsufficientSamples(_))) => {
            Ok(vec![f64::NAN.into(), f64::NAN.into(), 0usize.into(), f64::NAN.into(), e.to_string().into()])
        }
        Err(e) => Err(e.into()),
    }
}

fn bridge_moment(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    let b = &cfg.bridge;
    let d = cfg.model.d;
    let seeds = SeedStream::new(cfg.seed, "bridge-moment");
    let binned = b.estimator == Estimator::BesselBinned;
    let mut table = if binned {
        Table::new(&[
            "d", "eta", "a", "b", "t", "m", "n_paths", "half_width", "mean", "std_error", "n_samples", "clip_fraction",
            "binned_exact", "exact", "note",
        ])
    } else {
        Table::new(&[
            "d", "eta", "a", "b", "t", "m", "n_paths", "clip", "angle", "mean", "std_error", "n_samples", "clip_fraction", "note",
        ])
    };
    let rule = match b.rule {
        Rule::Trapezoid => TimeRule::Trapezoid,
        Rule::Richardson => TimeRule::Richardson,
    };
    let mut row = 0u64;
    for &eta in &b.eta {
        for &a in &b.a {
            for &rb in &b.b {
                for &t in &b.t {
                    for &m in &b.m {
                        let s = seeds.child(&format!("row-{row}"));
                        row += 1;
                        let head: Vec<Cell> = vec![d.into(), eta.into(), a.into(), rb.into(), t.into(), m.into(), b.n_paths.into()];
                        let mut cells = head;
                        if binned {
                            let e = paths::bessel_binned_exp_moment(d, eta, a, rb, b.half_width, t, m, b.n_paths, &s);
                            cells.push(b.half_width.into());
                            let mut est = estimate_or_note(e)?;
                            let note = est.pop().expect("note cell");
                            cells.extend(est);
                            cells.push(paths::binned_exact_target(d, eta, a, rb, b.half_width, t)?.into());
                            cells.push(special::bridge_exp_moment_exact(d, eta, a, rb, t)?.into());
                            cells.push(note);
                        } else {
                            let mut start = vec![0.0; d];
                            start[0] = a;
                            let mut end = vec![0.0; d];
                            end[0] = rb * b.angle.cos();
                            end[1] = rb * b.angle.sin();
                            let e = paths::exp_functional_mc(d, eta, &start, &end, t, m, b.n_paths, b.clip, rule, &s);
                            cells.extend([b.clip.into(), b.angle.into()]);
                            cells.extend(estimate_or_note(e)?);
                        }
                        table.push(cells);
                    }
                }
            }
        }
    }
    out.write_csv("bridge_moment.csv", &table)?;
    println!("bridge-moment: {} rows", table.len());
    Ok(())
}

fn pair_moment(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    let p = &cfg.pair;
    let params = cfg.params();
    let seeds = SeedStream::new(cfg.seed, "pair-moment");
    let mut table = Table::new(&[
        "quantity", "n", "kappa", "t", "m", "n_paths", "clip", "mean", "std_error", "n_samples", "clip_fraction", "note",
    ]);
    for (i, &t) in p.t.iter().enumerate() {
        let base = |q: &str| -> Vec<Cell> {
            vec![
                q.into(),
                p.starts.len().into(),
                params.kappa().into(),
                t.into(),
                p.m.into(),
                p.n_paths.into(),
                p.clip.into(),
            ]
        };
        let e = paths::pair_interaction_mc(&params, &p.starts, &p.ends, t, p.m, p.n_paths, p.clip, &seeds.child(&format!("pair-{i}")));
        let mut row = base("pair_moment");
        row.extend(estimate_or_note(e)?);
        table.push(row);
        if p.holder && params.kappa() > 0.0 {
            let mut row = base("holder_bound");
            match paths::holder_pair_bound(&params, &p.starts, &p.ends, t, p.m, p.n_paths, p.clip, &seeds.child(&format!("holder-{i}"))) {
                // Beyond the finite-moment range the Hölder factor is infinite.
                Err(e @ pam_core::Error::Domain(_)) => {
                    row.extend([f64::INFINITY.into(), f64::NAN.into(), 0usize.into(), f64::NAN.into(), e.to_string().into()])
                }
                r => row.extend(estimate_or_note(r)?),
            }
            table.push(row);
        }
    }
    out.write_csv("pair_moment.csv", &table)?;
    println!("pair-moment: {} rows", table.len());
    Ok(())
}

fn noise_check(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    let nz = &cfg.noise;
    let lat = cfg.lattice();
    let eps = cfg.discretization.epsilon;
    let dt = cfg.dt();
    let kernels = Arc::new(build_kernels(&cfg.params(), eps, lat)?);
    let spectral = Arc::new(Spectral::new(lat));
    let sampler = NoiseSampler::new(kernels.clone(), spectral.clone(), dt)?;
    let mut acc = CovarianceAccumulator::new(lat, &nz.lags)?;
    let seeds = SeedStream::new(cfg.seed, "noise-check");
    let mut ws = spectral.workspace();
    let mut a = vec![0.0; lat.n_cells()];
    let mut b = vec![0.0; lat.n_cells()];
    for i in 0..(nz.n_increments / 2) as u64 {
        sampler.sample_pair(&mut seeds.substream(2 * i), &mut seeds.substream(2 * i + 1), &mut a, &mut b, &mut ws);
        if i == 0 && nz.snapshot {
            let name = "noise_increment.bin";
            write_snapshot(&out.path().join(name), &LatticeField::new(lat, a.clone())?, dt, eps)
                .map_err(|e| Failure::Io(e.to_string()))?;
            out.adopt(name)?;
        }
        acc.push(&a);
        acc.push(&b);
    }
    if nz.n_increments % 2 == 1 {
        sampler.sample_into(&mut seeds.substream(nz.n_increments as u64 - 1), &mut a, &mut ws);
        acc.push(&a);
    }
    let mut table = Table::new(&["lag_cells", "expected", "estimate", "std_error", "z"]);
    let mut worst = 0.0f64;
    for r in acc.table()? {
        let expected = dt * kernels.h_at_lag(&r.lag);
        let z = (r.estimate - expected) / r.std_error;
        worst = worst.max(z.abs());
        table.push(vec![join(&r.lag).into(), expected.into(), r.estimate.into(), r.std_error.into(), z.into()]);
    }
    out.write_csv("covariance.csv", &table)?;
    println!("noise-check: {} increments, worst |z| = {worst:.3} (limit {})", nz.n_increments, nz.max_abs_z);
    if !(worst <= nz.max_abs_z) {
        return Err(Failure::Assertion(format!("covariance |z| = {worst:.3} exceeds {}", nz.max_abs_z)));
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    let z = &cfg.discretization;
    let seeds = SeedStream::new(cfg.seed, "simulate");
    let runs = simulate_ensemble(
        &cfg.params(),
        cfg.init(),
        z.epsilon,
        cfg.lattice(),
        z.t_end,
        z.dt,
        &cfg.observables,
        &seeds,
        cfg.n_ensemble,
    )?;
    let mut mass = Table::new(&["member", "time", "total_mass"]);
    let mut summary = Table::new(&["member", "min_value"]);
    let indexed = |what: &str| Table::with_header(vec!["member".into(), what.into(), "time".into(), "value".into()]);
    let mut balls = indexed("ball");
    let mut tests = indexed("function");
    let mut rho = indexed("functional");
    let mut bracket = Table::new(&["member", "time", "quadratic_variation", "bracket", "sqrt_martingale"]);
    for (i, r) in runs.iter().enumerate() {
        summary.push(vec![i.into(), r.min_value.into()]);
        for (k, &t) in r.times.iter().enumerate() {
            mass.push(vec![i.into(), t.into(), r.total_mass[k].into()]);
            if cfg.observables.track_bracket {
                bracket.push(vec![
                    i.into(),
                    t.into(),
                    r.quadratic_variation[k].into(),
                    r.bracket[k].into(),
                    r.sqrt_martingale[k].into(),
                ]);
            }
        }
        for (table, series) in [(&mut balls, &r.ball_masses), (&mut tests, &r.test_integrals), (&mut rho, &r.rho)] {
            for (j, s) in series.iter().enumerate() {
                for (k, &t) in r.times.iter().enumerate() {
                    table.push(vec![i.into(), j.into(), t.into(), s[k].into()]);
                }
            }
        }
    }
    out.write_csv("total_mass.csv", &mass)?;
    out.write_csv("summary.csv", &summary)?;
    for (name, table) in [
        ("ball_masses.csv", &balls),
        ("test_integrals.csv", &tests),
        ("rho.csv", &rho),
        ("bracket.csv", &bracket),
    ] {
        if !table.is_empty() {
            out.write_csv(name, table)?;
        }
    }
    println!("simulate: {} members, {} output times", runs.len(), runs.first().map_or(0, |r| r.times.len()));
    Ok(())
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.len() < 2 {
        return (xs.first().copied().unwrap_or(f64::NAN), f64::NAN);
    }
    pam_core::stats::mean_se(xs)
}

fn chaos_verify(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    let c = &cfg.chaos;
    let params = cfg.params();
    let lat = cfg.lattice();
    let eps = cfg.discretization.epsilon;
    let scheme = Scheme::new(&params, eps, lat, cfg.dt())?;
    let engine = ChaosEngine::new(scheme, c.max_order)?;
    let init = init_condition(cfg.init(), &lat)?;
    let cc = ChaosConfig {
        max_order: c.max_order,
        output_times: c.output_times.clone(),
        test_functions: c.test_functions.clone(),
        paired_spde: c.paired_spde,
    };
    let recs = engine.run_ensemble(&init, &cc, &SeedStream::new(cfg.seed, "chaos-verify"), cfg.n_ensemble)?;
    let times = recs[0].times.clone();
    let mut orders = Table::new(&["order", "time", "function", "mean", "mean_square", "std_error", "quadrature"]);
    let mut resid = Table::new(&["truncation", "time", "function", "mean_square_residual", "std_error", "relative"]);
    for (j, f) in c.test_functions.iter().enumerate() {
        for (k, &t) in times.iter().enumerate() {
            for n in 0..=c.max_order {
                let vals: Vec<f64> = recs.iter().map(|r| r.orders[n][j][k]).collect();
                let sq: Vec<f64> = vals.iter().map(|v| v * v).collect();
                let (m, _) = mean_se(&vals);
                let (ms, se) = mean_se(&sq);
                let quad = if c.quadrature && n <= 2 && t > 0.0 {
                    chaos_l2_norm_quadrature(&params, cfg.init(), f, t, n, eps, lat).unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                };
                orders.push(vec![n.into(), t.into(), j.into(), m.into(), ms.into(), se.into(), quad.into()]);
            }
            if c.paired_spde {
                let u2: Vec<f64> = recs.iter().map(|r| r.spde[j][k].powi(2)).collect();
                let (norm, _) = mean_se(&u2);
                for n in 0..=c.max_order {
                    let r2: Vec<f64> = recs.iter().map(|r| (r.spde[j][k] - r.partial_sum(n, j, k)).powi(2)).collect();
                    let (m, se) = mean_se(&r2);
                    resid.push(vec![n.into(), t.into(), j.into(), m.into(), se.into(), (m / norm).into()]);
                }
            }
        }
    }
    out.write_csv("chaos_orders.csv", &orders)?;
    if !resid.is_empty() {
        out.write_csv("chaos_residuals.csv", &resid)?;
    }
    println!("chaos-verify: {} members, orders 0..={}", recs.len(), c.max_order);
    Ok(())
}

fn moments(cfg: &RunConfig, action: MomentAction, out: &mut OutputDir) -> Result<(), Failure> {
    let mo = &cfg.moments;
    let params = cfg.params();
    let mu = cfg.init();
    let seeds = SeedStream::new(cfg.seed, "moments");
    let wants = |a: MomentAction| action == a || action == MomentAction::All;
    let mut table = Table::new(&[
        "formula", "function", "t", "kappa", "alpha", "value", "std_error", "n_samples", "note",
    ]);
    let mut push = |formula: &str, j: Cell, t: Cell, r: Result<(f64, f64, usize), pam_core::Error>| {
        let (v, se, n, note) = match r {
            Ok((v, se, n)) => (v, se, n, String::new()),
            Err(e) => (f64::NAN, f64::NAN, 0, e.to_string()),
        };
        table.push(vec![
            formula.into(),
            j,
            t,
            params.kappa().into(),
            params.alpha().into(),
            v.into(),
            se.into(),
            n.into(),
            note.into(),
        ]);
    };
    let kernel = match mo.kernel {
        KernelChoice::InverseSquare => BridgeKernel::InverseSquare { clip: mo.clip },
        KernelChoice::Mollified => {
            BridgeKernel::Mollified(Arc::new(build_kernels(&params, cfg.discretization.epsilon, cfg.lattice())?))
        }
    };
    for (j, f) in mo.test_functions.iter().enumerate() {
        for (k, &t) in mo.t.iter().enumerate() {
            if wants(MomentAction::First) {
                push("heat_flow_first_moment", j.into(), t.into(), first_moment_exact(mu, f, t).map(|v| (v, 0.0, 0)));
            }
            if wants(MomentAction::Second) {
                let s = seeds.child(&format!("second-{j}-{k}"));
                let r = second_moment_bridge_rhs(&params, mu, f, t, mo.n_paths, mo.m, &kernel, &s);
                push("bridge_pair_second_moment", j.into(), t.into(), r.map(|e| (e.mean, e.std_error, e.n_samples)));
            }
            if wants(MomentAction::Bound) {
                let r = second_moment_bound_rhs(&params, mu, f, t, mo.bound_c);
                push("second_moment_envelope", j.into(), t.into(), r.map(|v| (v, 0.0, 0)));
            }
        }
    }
    if wants(MomentAction::Norm) {
        let m = mo.norm_measure.as_ref().expect("resolved config");
        let v = h_alpha_norm(m, params.alpha(), mo.norm_tilt);
        let r = if v.is_nan() {
            Err(pam_core::Error::Argument("norm needs 0 < alpha < d and a valid measure".into()))
        } else {
            Ok((v, 0.0, 0))
        };
        push("h_alpha_norm", "".into(), f64::NAN.into(), r);
    }
    let rows = table.len();
    out.write_csv("moments.csv", &table)?;
    println!("moments: {rows} rows");
    Ok(())
}

fn experiment(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), Failure> {
    let exp = cfg.experiment.as_ref().expect("resolved before dispatch");
    let report = exp.run(&cfg.params(), cfg.seed)?;
    out.write("report.txt", report.render().as_bytes())?;
    for s in &report.series {
        let mut t = Table::with_header(s.columns.clone());
        for r in &s.rows {
            t.push(r.iter().map(|&v| v.into()).collect());
        }
        let name: String = s.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect();
        out.write_csv(&format!("{name}.csv"), &t)?;
    }
    for a in &report.assertions {
        println!(
            "{} {} statistic = {:.4e} threshold = {:.4e}",
            if a.passed { "PASS" } else { "FAIL" },
            a.name,
            a.statistic,
            a.threshold
        );
    }
    if report.passed() {
        println!("experiment {}: all {} assertions passed", exp.name(), report.assertions.len());
        Ok(())
    } else {
        let failed: Vec<&str> = report.assertions.iter().filter(|a| !a.passed).map(|a| a.name.as_str()).collect();
        let why = if report.aborted {
            "aborted after a null-model failure".to_string()
        } else {
            format!("failed: {}", failed.join(", "))
        };
        Err(Failure::Assertion(format!("experiment {} {why}", exp.name())))
    }
}
