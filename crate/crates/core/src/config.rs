//! JSON run configuration.
//!
//! Scalars may be JSON numbers or strings such as `"1/10"`. Profiles, bounds and targets are
//! expressions in `rho` (and `tau`); rates are affine expressions in `c` or `w`. Any value may be
//! wrapped as `{"value": ..., "source": "..."}` to record where it came from.

use std::sync::Arc;

use meval::{builtin, Expr};
use serde::{Deserialize, Serialize};

use crate::control::{ControlProblem, FbsOptions, FieldFn};
use crate::error::{Error, Result};
use crate::forward::{auto_dt, profile, Model, Profile, ScenarioConfig, Scheme};
use crate::noise::{NoiseModel, Polynomial};
use crate::rates::{Affine, RateModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Annotated<T> {
    Tagged { value: T, source: String },
    Plain(T),
}

impl<T> Annotated<T> {
    pub fn get(&self) -> &T {
        match self {
            Annotated::Tagged { value, .. } => value,
            Annotated::Plain(v) => v,
        }
    }

    fn set(&mut self, v: T) {
        match self {
            Annotated::Tagged { value, .. } => *value = v,
            Annotated::Plain(x) => *x = v,
        }
    }
}

impl<T> From<T> for Annotated<T> {
    fn from(v: T) -> Self {
        Annotated::Plain(v)
    }
}

/// A number written either literally or as an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Num {
    Value(f64),
    Text(String),
}

impl From<f64> for Num {
    fn from(v: f64) -> Self {
        Num::Value(v)
    }
}

fn parse_expr(text: &str, what: &str) -> Result<Expr> {
    text.parse::<Expr>()
        .map_err(|e| Error::Config(format!("{what}: cannot parse `{text}`: {e}")))
}

impl Num {
    pub fn value(&self, what: &str) -> Result<f64> {
        let v = match self {
            Num::Value(v) => *v,
            Num::Text(s) => parse_expr(s, what)?
                .eval_with_context(builtin())
                .map_err(|e| Error::Config(format!("{what}: {e}")))?,
        };
        if !v.is_finite() {
            return Err(Error::Config(format!("{what}: value is not finite")));
        }
        Ok(v)
    }
}

type Value<T> = Annotated<T>;

fn num(what: &str, v: &Value<Num>) -> Result<f64> {
    v.get().value(what)
}

/// Expression compiled once, evaluated with named variables.
#[derive(Clone)]
enum Compiled {
    Const(f64),
    Expr {
        expr: Arc<Expr>,
        vars: &'static [&'static str],
    },
}

impl Compiled {
    fn new(src: &Num, vars: &'static [&'static str], what: &str) -> Result<Self> {
        let c = match src {
            Num::Value(v) => Compiled::Const(*v),
            Num::Text(s) => Compiled::Expr {
                expr: Arc::new(parse_expr(s, what)?),
                vars,
            },
        };
        let probe = vec![0.5; vars.len()];
        c.try_eval(&probe).map_err(|e| Error::Config(format!("{what}: {e}")))?;
        Ok(c)
    }

    fn try_eval(&self, args: &[f64]) -> std::result::Result<f64, meval::Error> {
        match self {
            Compiled::Const(v) => Ok(*v),
            Compiled::Expr { expr, vars } => {
                let mut ctx = meval::Context::new();
                for (name, v) in vars.iter().zip(args) {
                    ctx.var(*name, *v);
                }
                expr.eval_with_context(ctx)
            }
        }
    }

    fn eval(&self, args: &[f64]) -> f64 {
        self.try_eval(args).unwrap_or(f64::NAN)
    }
}

fn rho_profile(src: &Num, what: &str) -> Result<Profile> {
    let c = Compiled::new(src, &["rho"], what)?;
    Ok(profile(move |x| c.eval(&[x])))
}

fn field_fn(src: &Num, what: &str) -> Result<FieldFn> {
    let c = Compiled::new(src, &["rho", "tau"], what)?;
    Ok(Arc::new(move |x, t| c.eval(&[x, t])))
}

fn affine(src: &Num, var: &'static str, what: &str) -> Result<Affine> {
    let vars: &'static [&'static str] = if var == "c" { &["c"] } else { &["w"] };
    let c = Compiled::new(src, vars, what)?;
    let alpha = c.eval(&[0.0]);
    let beta = c.eval(&[1.0]) - alpha;
    for x in [2.0, -3.5, 17.0] {
        let want = alpha + beta * x;
        if (c.eval(&[x]) - want).abs() > 1e-9 * (1.0 + want.abs()) {
            return Err(Error::Config(format!("{what}: rate must be affine in {var}")));
        }
    }
    if !(alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Config(format!("{what}: rate is not finite")));
    }
    Ok(Affine::new(alpha, beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesBlock {
    pub kb: Value<Num>,
    pub kq: Value<Num>,
    pub ka: Value<Num>,
    pub kp: Value<Num>,
    pub kd: Value<Num>,
    pub g1: Value<Num>,
    pub g2: Value<Num>,
    #[serde(default = "default_k1")]
    pub k1: Value<Num>,
    #[serde(default = "default_k2")]
    pub k2: Value<Num>,
    #[serde(default = "default_k3")]
    pub k3: Value<Num>,
    #[serde(default = "default_k4")]
    pub k4: Value<Num>,
    #[serde(default = "default_kr")]
    pub kr: Value<Num>,
    #[serde(default = "default_n_total")]
    pub n_total: Value<Num>,
    pub d1: Value<Num>,
    pub d2: Value<Num>,
}

fn defaulted(v: Num) -> Value<Num> {
    Annotated::Tagged {
        value: v,
        source: "default".into(),
    }
}

fn default_k1() -> Value<Num> {
    defaulted(Num::Text("c".into()))
}
fn default_k2() -> Value<Num> {
    defaulted(Num::Text("c/2".into()))
}
fn default_k3() -> Value<Num> {
    defaulted(Num::Text("w".into()))
}
fn default_k4() -> Value<Num> {
    defaulted(Num::Text("w/2".into()))
}
fn default_kr() -> Value<Num> {
    defaulted(Num::Value(1.0))
}
fn default_n_total() -> Value<Num> {
    defaulted(Num::Value(10.0))
}

impl RatesBlock {
    pub fn build(&self) -> Result<RateModel> {
        let c = |v: &Value<Num>, name: &str| affine(v.get(), "c", &format!("scenario.rates.{name}"));
        let w = |v: &Value<Num>, name: &str| affine(v.get(), "w", &format!("scenario.rates.{name}"));
        let rm = RateModel {
            kb: c(&self.kb, "kb")?,
            kq: c(&self.kq, "kq")?,
            ka: c(&self.ka, "ka")?,
            kp: c(&self.kp, "kp")?,
            kd: c(&self.kd, "kd")?,
            g1: w(&self.g1, "g1")?,
            g2: w(&self.g2, "g2")?,
            k1: c(&self.k1, "k1")?,
            k2: c(&self.k2, "k2")?,
            k3: w(&self.k3, "k3")?,
            k4: w(&self.k4, "k4")?,
            kr: num("scenario.rates.kr", &self.kr)?,
            n_total: num("scenario.rates.n_total", &self.n_total)?,
            d1: num("scenario.rates.d1", &self.d1)?,
            d2: num("scenario.rates.d2", &self.d2)?,
        };
        rm.validate()?;
        Ok(rm)
    }
}

/// Noise weights: one constant for everything, one polynomial for everything, or per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Constant(Num),
    Polynomial(Vec<Num>),
    PerField(PerFieldWeights),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerFieldWeights {
    pub c: Vec<Vec<Num>>,
    pub w: Vec<Vec<Num>>,
    pub p: Vec<Vec<Num>>,
    pub q: Vec<Vec<Num>>,
    pub a: Vec<Vec<Num>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusWeights {
    Constant(Num),
    PerChannel(Vec<Num>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub channels: usize,
    pub h: Value<Weights>,
    pub r: Value<RadiusWeights>,
    #[serde(default)]
    pub corr: Option<Vec<Vec<Num>>>,
    #[serde(default)]
    pub relax_assumption_d: bool,
}

fn poly(coeffs: &[Num], what: &str) -> Result<Polynomial> {
    Ok(Polynomial::new(
        coeffs
            .iter()
            .map(|c| c.value(what))
            .collect::<Result<_>>()?,
    ))
}

impl NoiseBlock {
    pub fn build(&self) -> Result<NoiseModel> {
        let m = self.channels;
        let h = match self.h.get() {
            Weights::Constant(v) => vec![vec![Polynomial::constant(v.value("scenario.noise.h")?); m]; 5],
            Weights::Polynomial(c) => vec![vec![poly(c, "scenario.noise.h")?; m]; 5],
            Weights::PerField(f) => [(&f.c, "c"), (&f.w, "w"), (&f.p, "p"), (&f.q, "q"), (&f.a, "a")]
                .iter()
                .map(|(rows, name)| {
                    rows.iter()
                        .map(|c| poly(c, &format!("scenario.noise.h.{name}")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
        };
        let r = match self.r.get() {
            RadiusWeights::Constant(v) => vec![v.value("scenario.noise.r")?; m],
            RadiusWeights::PerChannel(v) => v
                .iter()
                .map(|x| x.value("scenario.noise.r"))
                .collect::<Result<_>>()?,
        };
        let corr = match &self.corr {
            None => None,
            Some(rows) => Some(
                rows.iter()
                    .map(|row| {
                        row.iter()
                            .map(|x| x.value("scenario.noise.corr"))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        NoiseModel::new(m, h, r, corr, self.relax_assumption_d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    pub c0: Value<Num>,
    pub w0: Value<Num>,
    pub p0: Value<Num>,
    pub q0: Value<Num>,
    pub eta0: Value<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryBlock {
    /// Polynomial coefficients in tau, ascending.
    pub c1: Value<Vec<Num>>,
    pub w1: Value<Vec<Num>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Auto(AutoTag),
    Fixed(Num),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    pub dt: Value<StepSize>,
    pub horizon: Value<Num>,
    pub n_nodes: Value<usize>,
    #[serde(default)]
    pub scheme: Scheme,
    pub rates: RatesBlock,
    pub noise: NoiseBlock,
    pub initial: InitialBlock,
    pub boundary: BoundaryBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub lower: Value<Num>,
    pub upper: Value<Num>,
    pub target: Value<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    pub lambda1: Value<Num>,
    pub lambda2: Value<Num>,
    pub u1: Channel,
    pub u2: Channel,
    pub cbar: Channel,
    pub wbar: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_theta() -> f64 {
    FbsOptions::default().theta
}
fn default_tol() -> f64 {
    FbsOptions::default().tol
}
fn default_max_iter() -> usize {
    FbsOptions::default().max_iter
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            theta: default_theta(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    100
}

impl Default for McBlock {
    fn default() -> Self {
        McBlock {
            n_paths: default_paths(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_true")]
    pub emit_paths: bool,
    #[serde(default)]
    pub emit_brownian: bool,
    /// Write every n-th time level to the per-path CSVs.
    #[serde(default = "default_stride")]
    pub time_stride: usize,
}

fn default_dir() -> String {
    "out".into()
}
fn default_true() -> bool {
    true
}
fn default_stride() -> usize {
    1
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: default_dir(),
            emit_paths: true,
            emit_brownian: false,
            time_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub scenario: ScenarioBlock,
    pub control: ControlBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub mc: McBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub dt: Option<f64>,
    pub n_nodes: Option<usize>,
    pub out: Option<String>,
}

impl RunConfig {
    /// Parses JSON; errors name the offending field path, e.g. `scenario.dt`.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.inner()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies overrides and replaces an `auto` step by its resolved value.
    pub fn resolve(mut self, ov: &Overrides) -> Result<RunConfig> {
        if let Some(s) = ov.seed {
            self.mc.seed = s;
        }
        if let Some(n) = ov.n_paths {
            self.mc.n_paths = n;
        }
        if let Some(n) = ov.n_nodes {
            self.scenario.n_nodes.set(n);
        }
        if let Some(dt) = ov.dt {
            self.scenario.dt.set(StepSize::Fixed(Num::Value(dt)));
        }
        if let Some(o) = &ov.out {
            self.output.dir = o.clone();
        }
        if matches!(self.scenario.dt.get(), StepSize::Auto(_)) {
            let dt = auto_dt(&self.scenario_with_dt(1.0)?)?;
            self.scenario.dt.set(StepSize::Fixed(Num::Value(dt)));
        }
        if self.output.time_stride == 0 {
            return Err(Error::Config("output.time_stride must be >= 1".into()));
        }
        Ok(self)
    }

    fn scenario_with_dt(&self, dt: f64) -> Result<ScenarioConfig> {
        let s = &self.scenario;
        let i = &s.initial;
        Ok(ScenarioConfig {
            rm: s.rates.build()?,
            nm: s.noise.build()?,
            n_nodes: *s.n_nodes.get(),
            dt,
            horizon: num("scenario.horizon", &s.horizon)?,
            c0: rho_profile(i.c0.get(), "scenario.initial.c0")?,
            w0: rho_profile(i.w0.get(), "scenario.initial.w0")?,
            p0: rho_profile(i.p0.get(), "scenario.initial.p0")?,
            q0: rho_profile(i.q0.get(), "scenario.initial.q0")?,
            eta0: num("scenario.initial.eta0", &i.eta0)?,
            c1: poly(s.boundary.c1.get(), "scenario.boundary.c1")?,
            w1: poly(s.boundary.w1.get(), "scenario.boundary.w1")?,
            scheme: s.scheme,
        })
    }

    /// Scenario of a resolved config.
    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let dt = match self.scenario.dt.get() {
            StepSize::Fixed(n) => n.value("scenario.dt")?,
            StepSize::Auto(_) => return Err(Error::Config("scenario.dt is unresolved".into())),
        };
        self.scenario_with_dt(dt)
    }

    pub fn problem(&self, model: &Model) -> Result<ControlProblem> {
        let b = &self.control;
        let ch = |c: &Channel, name: &str| -> Result<(FieldFn, FieldFn, FieldFn)> {
            Ok((
                field_fn(c.lower.get(), &format!("control.{name}.lower"))?,
                field_fn(c.upper.get(), &format!("control.{name}.upper"))?,
                field_fn(c.target.get(), &format!("control.{name}.target"))?,
            ))
        };
        ControlProblem::sample(
            &model.grid,
            model.cfg.dt,
            model.n_steps,
            [ch(&b.u1, "u1")?, ch(&b.u2, "u2")?, ch(&b.cbar, "cbar")?, ch(&b.wbar, "wbar")?],
            num("control.lambda1", &b.lambda1)?,
            num("control.lambda2", &b.lambda2)?,
        )
    }

    pub fn fbs_options(&self) -> FbsOptions {
        FbsOptions {
            theta: self.solver.theta,
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        }
    }
}

/// The bundled example configuration.
pub const EXAMPLE_JSON: &str = include_str!("../example.json");
