//! Run configuration: a TOML document with one section per subcommand.
//!
//! Parsing resolves every default and derived value (α, dt, the initial
//! measure, dimension-dependent lags and points), so the rendered form of a
//! parsed config is self-describing and reparses to the same value.

use pam_core::experiments::ExperimentConfig;
use pam_core::lattice::LatticeSpec;
use pam_core::moments::DiscreteMeasure;
use pam_core::spde::{default_delta, default_dt, fit_dt, init_condition, MeasureSpec, ObservablesConfig, TestFunction};
use pam_core::special::{self, ModelParams};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Largest chaos order the engine supports.
pub use pam_core::chaos::MAX_ORDER;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "one")]
    pub n_ensemble: usize,
    pub model: ModelBlock,
    #[serde(default)]
    pub discretization: DiscretizationBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<MeasureSpec>,
    #[serde(default)]
    pub observables: ObservablesConfig,
    #[serde(default)]
    pub bridge: BridgeBlock,
    #[serde(default)]
    pub pair: PairBlock,
    #[serde(default)]
    pub noise: NoiseBlock,
    #[serde(default)]
    pub chaos: ChaosBlock,
    #[serde(default)]
    pub moments: MomentsBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub d: usize,
    pub kappa: f64,
    /// Derived from d and κ; if given it must agree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizationBlock {
    pub epsilon: f64,
    pub n_per_side: usize,
    pub box_length: f64,
    /// Defaults to min(cell², ε²)/4, then shrunk to divide t_end.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub t_end: f64,
}

impl Default for DiscretizationBlock {
    fn default() -> Self {
        Self {
            epsilon: 0.25,
            n_per_side: 32,
            box_length: 3.2,
            dt: None,
            t_end: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Brownian bridge between fixed endpoints.
    Bridge,
    /// Brownian paths from a·e₁ binned on their end radius.
    BesselBinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Trapezoid,
    Richardson,
}

/// `bridge-moment`: one row per element of the product eta × a × b × t × m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeBlock {
    pub estimator: Estimator,
    pub eta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub t: Vec<f64>,
    pub m: Vec<usize>,
    pub n_paths: usize,
    pub clip: f64,
    pub rule: Rule,
    /// Angle between the start and end directions (bridge estimator).
    pub angle: f64,
    /// Bin half-width on the end radius (binned estimator).
    pub half_width: f64,
}

impl Default for BridgeBlock {
    fn default() -> Self {
        Self {
            estimator: Estimator::Bridge,
            eta: vec![0.1],
            a: vec![1.0],
            b: vec![1.0],
            t: vec![1.0],
            m: vec![2048],
            n_paths: 100_000,
            clip: 1e4,
            rule: Rule::Trapezoid,
            angle: 0.0,
            half_width: 0.025,
        }
    }
}

/// `pair-moment`: n interacting bridges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairBlock {
    /// Defaults to ±0.5·e₁.
    pub starts: Vec<Vec<f64>>,
    /// Defaults to the starts.
    pub ends: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub m: usize,
    pub n_paths: usize,
    pub clip: f64,
    /// Also report the Hölder product bound.
    pub holder: bool,
}

impl Default for PairBlock {
    fn default() -> Self {
        Self {
            starts: Vec::new(),
            ends: Vec::new(),
            t: vec![1.0],
            m: 1024,
            n_paths: 100_000,
            clip: 1e4,
            holder: true,
        }
    }
}

/// `noise-check`: empirical covariance of increments against dt·h^ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseBlock {
    pub n_increments: usize,
    /// Lags in cells; defaults to six lags along axes and diagonals.
    pub lags: Vec<Vec<i64>>,
    /// Largest accepted |estimate − expected| / std_error.
    pub max_abs_z: f64,
    /// Write the first increment as a binary snapshot.
    pub snapshot: bool,
}

impl Default for NoiseBlock {
    fn default() -> Self {
        Self {
            n_increments: 10_000,
            lags: Vec::new(),
            max_abs_z: 4.0,
            snapshot: false,
        }
    }
}

/// `chaos-verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaosBlock {
    pub max_order: usize,
    /// Defaults to [t_end].
    pub output_times: Vec<f64>,
    /// Defaults to a Gaussian of width 0.3 at the origin.
    pub test_functions: Vec<TestFunction>,
    pub paired_spde: bool,
    /// Compare orders 1 and 2 with the deterministic quadrature.
    pub quadrature: bool,
}

impl Default for ChaosBlock {
    fn default() -> Self {
        Self {
            max_order: 4,
            output_times: Vec::new(),
            test_functions: Vec::new(),
            paired_spde: true,
            quadrature: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// The lattice covariance the simulation uses.
    Mollified,
    /// min(|x|⁻², clip).
    InverseSquare,
}

/// `moments`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsBlock {
    /// Defaults to a Gaussian of width 0.3 at the origin.
    pub test_functions: Vec<TestFunction>,
    /// Defaults to [t_end].
    pub t: Vec<f64>,
    pub n_paths: usize,
    pub m: usize,
    pub clip: f64,
    pub kernel: KernelChoice,
    /// Constant C of the second-moment envelope.
    pub bound_c: f64,
    /// Measure for the H_α norm; defaults to Lebesgue on [−1, 1]^d.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_measure: Option<DiscreteMeasure>,
    /// Exponential tilt a of the H_α norm.
    pub norm_tilt: f64,
}

impl Default for MomentsBlock {
    fn default() -> Self {
        Self {
            test_functions: Vec::new(),
            t: Vec::new(),
            n_paths: 100_000,
            m: 256,
            clip: 1e4,
            kernel: KernelChoice::Mollified,
            bound_c: 1.0,
            norm_measure: None,
            norm_tilt: 1.0,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn one() -> usize {
    1
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

impl RunConfig {
    /// Validated model parameters (κ = 0 is the null model).
    pub fn params(&self) -> ModelParams {
        ModelParams::with_null(self.model.d, self.model.kappa).expect("validated config")
    }

    pub fn lattice(&self) -> LatticeSpec {
        let z = &self.discretization;
        LatticeSpec::new(self.model.d, z.n_per_side, z.box_length).expect("validated config")
    }

    pub fn dt(&self) -> f64 {
        self.discretization.dt.expect("resolved config")
    }

    pub fn init(&self) -> &MeasureSpec {
        self.init.as_ref().expect("resolved config")
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Fills in defaults and derived values, then checks every precondition.
    fn resolve(mut self) -> Result<Self, Failure> {
        let d = self.model.d;
        let params = ModelParams::with_null(d, self.model.kappa).map_err(|e| bad(format!("model: {e}")))?;
        if let Some(a) = self.model.alpha {
            if (a - params.alpha()).abs() > 1e-12 {
                return Err(bad(format!(
                    "model.alpha = {a} disagrees with the value {} derived from d and kappa",
                    params.alpha()
                )));
            }
        }
        self.model.alpha = Some(params.alpha());
        if self.n_ensemble == 0 {
            return Err(bad("n_ensemble must be at least 1"));
        }

        let z = &mut self.discretization;
        if !(z.epsilon > 0.0 && z.epsilon.is_finite()) {
            return Err(bad(format!("discretization.epsilon = {} must be positive", z.epsilon)));
        }
        if !(z.t_end > 0.0 && z.t_end.is_finite()) {
            return Err(bad(format!("discretization.t_end = {} must be positive", z.t_end)));
        }
        let lattice = LatticeSpec::new(d, z.n_per_side, z.box_length).map_err(|e| bad(format!("discretization: {e}")))?;
        lattice.check_resolves(z.epsilon).map_err(|e| bad(format!("discretization: {e}")))?;
        let dt = z.dt.unwrap_or_else(|| default_dt(&lattice, z.epsilon));
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(bad(format!("discretization.dt = {dt} must be positive")));
        }
        z.dt = Some(fit_dt(dt, z.t_end));
        let (epsilon, t_end) = (z.epsilon, z.t_end);
        let origin = vec![0.0; d];
        let e1 = |s: f64| {
            let mut v = origin.clone();
            v[0] = s;
            v
        };

        let init = self
            .init
            .take()
            .unwrap_or_else(|| MeasureSpec::atom(origin.clone(), 1.0, default_delta(epsilon)));
        init_condition(&init, &lattice).map_err(|e| bad(format!("init: {e}")))?;
        self.init = Some(init);

        let obs = &mut self.observables;
        if obs.output_times.is_empty() {
            obs.output_times = vec![0.0, t_end];
        }
        check_times("observables.output_times", &obs.output_times, t_end)?;
        check_functions("observables.test_functions", &obs.test_functions, d)?;
        for b in &obs.balls {
            if b.center.len() != d || !(b.radius > 0.0) {
                return Err(bad("observables.balls need d-dimensional centers and positive radii"));
            }
        }
        for r in &obs.rho {
            if !(r.rho > 0.0 && r.rho < d as f64) || !(r.tilt >= 0.0) || !(r.r_min > 0.0) {
                return Err(bad("observables.rho needs 0 < rho < d, tilt >= 0 and r_min > 0"));
            }
        }

        let b = &self.bridge;
        if [&b.eta, &b.a, &b.b, &b.t].iter().any(|v| v.is_empty()) || b.m.is_empty() {
            return Err(bad("bridge: eta, a, b, t and m need at least one value each"));
        }
        for &eta in &b.eta {
            special::alpha_of_eta(d, eta).map_err(|e| bad(format!("bridge.eta: {e}")))?;
        }
        if b.a.iter().chain(&b.b).chain(&b.t).any(|&x| !(x > 0.0)) {
            return Err(bad("bridge: a, b and t must be positive"));
        }
        if b.m.iter().any(|&m| m < 2) || b.n_paths < 2 || !(b.clip > 0.0) {
            return Err(bad("bridge: need m >= 2, n_paths >= 2 and clip > 0"));
        }
        if b.rule == Rule::Richardson && b.m.iter().any(|m| m % 2 != 0) {
            return Err(bad("bridge: Richardson extrapolation needs even m"));
        }
        if b.estimator == Estimator::BesselBinned && b.b.iter().any(|&r| !(b.half_width > 0.0 && b.half_width < r)) {
            return Err(bad("bridge.half_width must lie in (0, b)"));
        }

        let p = &mut self.pair;
        if p.starts.is_empty() {
            p.starts = vec![e1(0.5), e1(-0.5)];
        }
        if p.ends.is_empty() {
            p.ends = p.starts.clone();
        }
        if p.starts.len() < 2 || p.starts.len() != p.ends.len() {
            return Err(bad("pair: need at least two starts and as many ends"));
        }
        if p.starts.iter().chain(&p.ends).any(|x| x.len() != d) {
            return Err(bad(format!("pair: every start and end needs {d} coordinates")));
        }
        if p.t.is_empty() || p.t.iter().any(|&t| !(t > 0.0)) || p.m < 2 || p.n_paths < 2 || !(p.clip > 0.0) {
            return Err(bad("pair: need t > 0, m >= 2, n_paths >= 2 and clip > 0"));
        }

        let nz = &mut self.noise;
        if nz.lags.is_empty() {
            nz.lags = default_lags(d);
        }
        if nz.lags.iter().any(|l| l.len() != d) {
            return Err(bad(format!("noise.lags need {d} components each")));
        }
        if nz.n_increments < 4 || !(nz.max_abs_z > 0.0) {
            return Err(bad("noise: need n_increments >= 4 and max_abs_z > 0"));
        }

        let c = &mut self.chaos;
        if c.max_order > MAX_ORDER {
            return Err(bad(format!("chaos.max_order = {} exceeds the supported {MAX_ORDER}", c.max_order)));
        }
        if c.output_times.is_empty() {
            c.output_times = vec![t_end];
        }
        check_times("chaos.output_times", &c.output_times, f64::INFINITY)?;
        if c.test_functions.is_empty() {
            c.test_functions = vec![TestFunction::gaussian(origin.clone(), 0.3)];
        }
        check_functions("chaos.test_functions", &c.test_functions, d)?;

        let mo = &mut self.moments;
        if mo.test_functions.is_empty() {
            mo.test_functions = vec![TestFunction::gaussian(origin.clone(), 0.3)];
        }
        check_functions("moments.test_functions", &mo.test_functions, d)?;
        if mo.t.is_empty() {
            mo.t = vec![t_end];
        }
        if mo.t.iter().any(|&t| !(t > 0.0)) || mo.n_paths < 2 || mo.m < 2 || !(mo.clip > 0.0) || !(mo.bound_c > 0.0) {
            return Err(bad("moments: need t > 0, n_paths >= 2, m >= 2, clip > 0 and bound_c > 0"));
        }
        if !(mo.norm_tilt >= 0.0) {
            return Err(bad("moments.norm_tilt must be non-negative"));
        }
        if mo.norm_measure.is_none() {
            let m = DiscreteMeasure::lebesgue_box(1.0, vec![-1.0; d], vec![1.0; d]).map_err(|e| bad(e.to_string()))?;
            mo.norm_measure = Some(m);
        }
        Ok(self)
    }
}

fn check_times(key: &str, times: &[f64], t_end: f64) -> Result<(), Failure> {
    if times.iter().any(|&t| !(t >= 0.0 && t <= t_end)) {
        return Err(bad(format!("{key} must lie in [0, {t_end}]")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(bad(format!("{key} must be nondecreasing")));
    }
    Ok(())
}

fn check_functions(key: &str, fs: &[TestFunction], d: usize) -> Result<(), Failure> {
    for f in fs {
        f.validate().map_err(|e| bad(format!("{key}: {e}")))?;
        if f.center().is_some_and(|c| c.len() != d) {
            return Err(bad(format!("{key}: centers need {d} coordinates")));
        }
    }
    Ok(())
}

/// Zero lag, three axis lags and two diagonals.
pub fn default_lags(d: usize) -> Vec<Vec<i64>> {
    let axis = |k: i64| {
        let mut v = vec![0; d];
        v[0] = k;
        v
    };
    let mut diag = vec![0; d];
    diag[0] = 1;
    diag[1] = 1;
    vec![axis(0), axis(1), axis(2), axis(4), diag, vec![1; d]]
}

/// Parses and resolves a config document.
pub fn parse_config(text: &str) -> Result<RunConfig, Failure> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
    from_table(table)
}

/// Resolves a config already held as a TOML table (after flag overrides).
pub fn from_table(table: toml::Table) -> Result<RunConfig, Failure> {
    let raw: RunConfig = table.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
    raw.resolve()
}

/// Sets a dotted key such as `discretization.epsilon`, creating sections.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| bad(format!("`{p}` must be a section to set `{key}`")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
