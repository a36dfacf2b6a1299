//! Forward Euler–Maruyama sweep of the coupled parabolic/hyperbolic system and the radius SDE.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::control::ControlSet;
use crate::error::{Error, Result};
use crate::grid::{build_grid, SpectralGrid};
use crate::noise::{BrownianPath, Field, NoiseModel, Polynomial};
use crate::rates::{eval_reaction, RateModel};

/// Function of rho used for initial profiles.
pub type Profile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn profile<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Profile {
    Arc::new(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Direct,
    Transformed,
}

#[derive(Clone)]
pub struct ScenarioConfig {
    pub rm: RateModel,
    pub nm: NoiseModel,
    pub n_nodes: usize,
    pub dt: f64,
    pub horizon: f64,
    pub c0: Profile,
    pub w0: Profile,
    pub p0: Profile,
    pub q0: Profile,
    pub eta0: f64,
    /// Boundary data as polynomials in tau.
    pub c1: Polynomial,
    pub w1: Polynomial,
    pub scheme: Scheme,
}

impl fmt::Debug for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScenarioConfig")
            .field("rm", &self.rm)
            .field("nm", &self.nm)
            .field("n_nodes", &self.n_nodes)
            .field("dt", &self.dt)
            .field("horizon", &self.horizon)
            .field("eta0", &self.eta0)
            .field("c1", &self.c1)
            .field("w1", &self.w1)
            .field("scheme", &self.scheme)
            .finish_non_exhaustive()
    }
}

impl ScenarioConfig {
    /// The worked example: noise weight `noise` on two channels, relaxed boundary check.
    pub fn example(noise: f64, n_nodes: usize) -> Self {
        ScenarioConfig {
            rm: RateModel::example(),
            nm: NoiseModel::uniform(2, noise, noise),
            n_nodes,
            dt: 1e-3,
            horizon: 1.0,
            c0: profile(|_| 12.0),
            w0: profile(|_| 14.0),
            p0: profile(|r| 2.0 * r + (r * r).exp() + 1.0),
            q0: profile(|r| 2.0 * r * r + 2.0),
            eta0: 0.1,
            c1: Polynomial::constant(12.0),
            w1: Polynomial::constant(14.0),
            scheme: Scheme::Direct,
        }
    }

    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon || n < 1.0 {
            return Err(Error::Config(format!(
                "horizon {} is not a whole number of steps of {}",
                self.horizon, self.dt
            )));
        }
        Ok(n as usize)
    }

    fn check_compatibility(&self, grid: &SpectralGrid) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        let c1_0 = self.c1.eval(0.0);
        let w1_0 = self.w1.eval(0.0);
        if !close((self.c0)(1.0), c1_0) {
            return Err(Error::Config(format!(
                "c0(1) = {} must equal c1(0) = {c1_0}",
                (self.c0)(1.0)
            )));
        }
        if !close((self.w0)(1.0), w1_0) {
            return Err(Error::Config(format!(
                "w0(1) = {} must equal w1(0) = {w1_0}",
                (self.w0)(1.0)
            )));
        }
        let delta = 1e-6;
        for (name, f) in [("c0", &self.c0), ("w0", &self.w0)] {
            let slope = (f(delta) - f(0.0)) / delta;
            if slope.abs() > 1e-4 * (1.0 + f(0.0).abs()) {
                return Err(Error::Config(format!("{name} must have zero slope at rho=0")));
            }
        }
        for &x in &grid.nodes {
            let (c, w) = ((self.c0)(x), (self.w0)(x));
            if c < -1e-12 || c > c1_0 + 1e-12 {
                return Err(Error::Config(format!("c0({x}) = {c} outside [0, c1(0)]")));
            }
            if w < -1e-12 || w > w1_0 + 1e-12 {
                return Err(Error::Config(format!("w0({x}) = {w} outside [0, w1(0)]")));
            }
            let a = self.rm.n_total - (self.p0)(x) - (self.q0)(x);
            if a < -1e-12 {
                return Err(Error::Config(format!(
                    "initial dead-cell density n_total - p0 - q0 is negative at rho={x}"
                )));
            }
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumourState {
    pub c: Vec<f64>,
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    pub eta: f64,
    pub tau: f64,
}

impl TumourState {
    pub fn initial(cfg: &ScenarioConfig, grid: &SpectralGrid) -> Self {
        let x = &grid.nodes;
        let p: Vec<f64> = x.iter().map(|&r| (cfg.p0)(r)).collect();
        let q: Vec<f64> = x.iter().map(|&r| (cfg.q0)(r)).collect();
        let a = p
            .iter()
            .zip(&q)
            .map(|(p, q)| cfg.rm.n_total - p - q)
            .collect();
        TumourState {
            c: x.iter().map(|&r| (cfg.c0)(r)).collect(),
            w: x.iter().map(|&r| (cfg.w0)(r)).collect(),
            p,
            q,
            a,
            eta: cfg.eta0,
            tau: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.eta.is_finite()
            && [&self.c, &self.w, &self.p, &self.q, &self.a]
                .iter()
                .all(|f| f.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<TumourState>,
    pub u_field: Vec<Vec<f64>>,
    pub v_field: Vec<Vec<f64>>,
    pub u_boundary: Vec<f64>,
    pub path: Arc<BrownianPath>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &TumourState {
        self.states.last().expect("trajectory has an initial state")
    }
}

/// u = (eta^2 / rho^2) int_0^rho s^2 h ds and v = u - rho u(1).
pub fn velocity_field(grid: &SpectralGrid, rm: &RateModel, state: &TumourState) -> (Vec<f64>, Vec<f64>) {
    let n = grid.n_nodes;
    let integrand: Vec<f64> = (0..n)
        .map(|i| {
            let x = grid.nodes[i];
            x * x * rm.h(state.c[i], state.p[i], state.a[i])
        })
        .collect();
    let cum = grid.cumulative_integral(&integrand);
    let e2 = state.eta * state.eta;
    let mut u = vec![0.0; n];
    for i in 1..n {
        let x = grid.nodes[i];
        u[i] = e2 * cum[i] / (x * x);
    }
    let ub = u[n - 1];
    let mut v: Vec<f64> = (0..n).map(|i| u[i] - grid.nodes[i] * ub).collect();
    v[0] = 0.0;
    v[n - 1] = 0.0;
    (u, v)
}

/// eta (1 + u(1) dt + dB*); `None` when the radius reaches zero.
pub fn radius_step(eta: f64, u_boundary: f64, db_star: f64, dt: f64) -> Option<f64> {
    let next = eta * (1.0 + u_boundary * dt + db_star);
    (next > 0.0).then_some(next)
}

/// Node values of the noise weights, precomputed once per run.
#[derive(Debug, Clone)]
pub(crate) struct NodeNoise {
    /// [field][channel][node]
    pub h: Vec<Vec<Vec<f64>>>,
    pub hd: Vec<Vec<Vec<f64>>>,
    pub hdd: Vec<Vec<Vec<f64>>>,
    /// [field][node]
    pub qv: Vec<Vec<f64>>,
    pub sigma2: f64,
}

impl NodeNoise {
    fn new(nm: &NoiseModel, nodes: &[f64]) -> Self {
        let table = |deriv: usize| -> Vec<Vec<Vec<f64>>> {
            nm.h
                .iter()
                .map(|per_field| {
                    per_field
                        .iter()
                        .map(|poly| {
                            let mut p = poly.clone();
                            for _ in 0..deriv {
                                p = p.derivative();
                            }
                            nodes.iter().map(|&x| p.eval(x)).collect()
                        })
                        .collect()
                })
                .collect()
        };
        NodeNoise {
            h: table(0),
            hd: table(1),
            hdd: table(2),
            qv: Field::ALL
                .iter()
                .map(|&f| nodes.iter().map(|&x| nm.quad_var(f, x)).collect())
                .collect(),
            sigma2: nm.radius_quad_var(),
        }
    }

    #[inline]
    pub fn sum(&self, field: Field, node: usize, b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (ch, bi) in b.iter().enumerate() {
            s += self.h[field as usize][ch][node] * bi;
        }
        s
    }

    /// (H, H', H'') at every node for the exponent H = sum_i h_i(rho) b_i.
    fn exponent(&self, field: Field, b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let f = field as usize;
        let n = self.qv[f].len();
        let mut out = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (ch, bi) in b.iter().enumerate() {
            for i in 0..n {
                out.0[i] += self.h[f][ch][i] * bi;
                out.1[i] += self.hd[f][ch][i] * bi;
                out.2[i] += self.hdd[f][ch][i] * bi;
            }
        }
        out
    }
}

/// Rows: node 0 symmetry condition, interior diag - coef * (d2 + (2/rho) d1), last row Dirichlet.
pub(crate) fn implicit_matrix(grid: &SpectralGrid, diag: &[f64], coef: f64) -> DMatrix<f64> {
    let n = grid.n_nodes;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = grid.diff[(0, j)];
    }
    for i in 1..n - 1 {
        let x = grid.nodes[i];
        for j in 0..n {
            m[(i, j)] = -coef * (grid.diff2[(i, j)] + 2.0 / x * grid.diff[(i, j)]);
        }
        m[(i, i)] += diag[i];
    }
    m[(n - 1, n - 1)] = 1.0;
    m
}

pub(crate) fn solve(lu: &LU<f64, Dyn, Dyn>, rhs: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    lu.solve(&DVector::from_vec(rhs))
        .map(|v| v.data.into())
        .ok_or(Error::Singular(what))
}

pub(crate) fn factor(m: DMatrix<f64>, what: &'static str) -> Result<LU<f64, Dyn, Dyn>> {
    let lu = m.lu();
    if !lu.is_invertible() {
        return Err(Error::Singular(what));
    }
    Ok(lu)
}

/// Everything precomputed for one scenario: grid, factored operators, node noise tables.
pub struct Model {
    pub cfg: ScenarioConfig,
    pub grid: SpectralGrid,
    pub n_steps: usize,
    pub initial: TumourState,
    lu_c: LU<f64, Dyn, Dyn>,
    lu_w: LU<f64, Dyn, Dyn>,
    pub(crate) noise: NodeNoise,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("cfg", &self.cfg)
            .field("n_steps", &self.n_steps)
            .finish_non_exhaustive()
    }
}

struct StepInput<'a> {
    k: usize,
    state: &'a TumourState,
    u_bnd: f64,
    v: &'a [f64],
    controls: &'a ControlSet,
    path: &'a BrownianPath,
}

impl Model {
    pub fn new(cfg: ScenarioConfig) -> Result<Model> {
        cfg.rm.validate()?;
        let n_steps = cfg.n_steps()?;
        let grid = build_grid(cfg.n_nodes)?;
        cfg.check_compatibility(&grid)?;
        let ones = vec![1.0; grid.n_nodes];
        let lu_c = factor(implicit_matrix(&grid, &ones, cfg.dt * cfg.rm.d1), "forward c operator")?;
        let lu_w = factor(implicit_matrix(&grid, &ones, cfg.dt * cfg.rm.d2), "forward w operator")?;
        let noise = NodeNoise::new(&cfg.nm, &grid.nodes);
        let initial = TumourState::initial(&cfg, &grid);
        Ok(Model {
            cfg,
            grid,
            n_steps,
            initial,
            lu_c,
            lu_w,
            noise,
        })
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    pub fn tau(&self, k: usize) -> f64 {
        k as f64 * self.cfg.dt
    }

    pub fn velocity(&self, state: &TumourState) -> (Vec<f64>, Vec<f64>) {
        velocity_field(&self.grid, &self.cfg.rm, state)
    }

    fn check_inputs(&self, controls: &ControlSet, path: &BrownianPath) -> Result<()> {
        if controls.n_nodes != self.grid.n_nodes || controls.n_times != self.n_steps + 1 {
            return Err(Error::Config(format!(
                "control grid {}x{} does not match {} steps x {} nodes",
                controls.n_times, controls.n_nodes, self.n_steps + 1, self.grid.n_nodes
            )));
        }
        if path.n_steps != self.n_steps || path.channels != self.cfg.nm.channels {
            return Err(Error::Config(format!(
                "Brownian path has {} steps x {} channels, expected {} x {}",
                path.n_steps, path.channels, self.n_steps, self.cfg.nm.channels
            )));
        }
        if (path.dt - self.cfg.dt).abs() > 1e-12 * self.cfg.dt {
            return Err(Error::Config(format!(
                "Brownian path dt {} differs from scenario dt {}",
                path.dt, self.cfg.dt
            )));
        }
        Ok(())
    }

    pub fn zero_path(&self) -> BrownianPath {
        BrownianPath::zero(self.cfg.nm.channels, self.cfg.dt, self.n_steps)
    }

    pub fn simulate(&self, controls: &ControlSet, path: &BrownianPath) -> Result<Trajectory> {
        self.check_inputs(controls, path)?;
        let mut states = Vec::with_capacity(self.n_steps + 1);
        let mut u_field = Vec::with_capacity(self.n_steps + 1);
        let mut v_field = Vec::with_capacity(self.n_steps + 1);
        let mut u_boundary = Vec::with_capacity(self.n_steps + 1);
        let mut state = self.initial.clone();
        for k in 0..self.n_steps {
            let (u, v) = self.velocity(&state);
            let u_bnd = u[self.grid.n_nodes - 1];
            let input = StepInput {
                k,
                state: &state,
                u_bnd,
                v: &v,
                controls,
                path,
            };
            let next = match self.cfg.scheme {
                Scheme::Direct => self.direct_step(&input)?,
                Scheme::Transformed => self.transformed_step(&input)?,
            };
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    what: "forward state",
                    step: k + 1,
                });
            }
            states.push(std::mem::replace(&mut state, next));
            u_field.push(u);
            v_field.push(v);
            u_boundary.push(u_bnd);
        }
        let (u, v) = self.velocity(&state);
        u_boundary.push(u[self.grid.n_nodes - 1]);
        u_field.push(u);
        v_field.push(v);
        states.push(state);
        Ok(Trajectory {
            dt: self.cfg.dt,
            states,
            u_field,
            v_field,
            u_boundary,
            path: Arc::new(path.clone()),
        })
    }

    /// One implicit-diffusion step of c and w with explicit advection, reaction, source and noise.
    pub fn parabolic_step(
        &self,
        k: usize,
        state: &TumourState,
        u_bnd: f64,
        controls: &ControlSet,
        db: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.grid.n_nodes;
        let dt = self.cfg.dt;
        let e2 = state.eta * state.eta;
        let dc = self.grid.derivative(&state.c);
        let dw = self.grid.derivative(&state.w);
        let mut rc = vec![0.0; n];
        let mut rw = vec![0.0; n];
        for i in 1..n - 1 {
            let x = self.grid.nodes[i];
            let r = eval_reaction(&self.cfg.rm, state.c[i], state.w[i], state.p[i], state.q[i], state.a[i]);
            rc[i] = state.c[i]
                + dt * (u_bnd * x * dc[i] - e2 * r.f + controls.u1(k, i))
                + state.c[i] * self.noise.sum(Field::C, i, db);
            rw[i] = state.w[i]
                + dt * (u_bnd * x * dw[i] - e2 * r.g + controls.u2(k, i))
                + state.w[i] * self.noise.sum(Field::W, i, db);
        }
        let t1 = self.tau(k + 1);
        rc[n - 1] = self.cfg.c1.eval(t1) + controls.cbar[k + 1];
        rw[n - 1] = self.cfg.w1.eval(t1) + controls.wbar[k + 1];
        Ok((solve(&self.lu_c, rc, "c step")?, solve(&self.lu_w, rw, "w step")?))
    }

    /// Semi-Lagrangian transport of p, q, a with reaction at the characteristic foot.
    pub fn hyperbolic_step(&self, state: &TumourState, v: &[f64], db: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.grid.n_nodes;
        let dt = self.cfg.dt;
        let e2 = state.eta * state.eta;
        let mut row = vec![0.0; n];
        let mut out = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let foot = (self.grid.nodes[i] - v[i] * dt).clamp(0.0, 1.0);
            self.grid.interpolation_row(foot, &mut row);
            let at = |f: &[f64]| -> f64 { row.iter().zip(f).map(|(r, x)| r * x).sum() };
            let (c, w, p, q, a) = (at(&state.c), at(&state.w), at(&state.p), at(&state.q), at(&state.a));
            let g = eval_reaction(&self.cfg.rm, c, w, p, q, a).transfer(p, q, a);
            out.0[i] = p + dt * e2 * g[0] + p * self.noise.sum(Field::P, i, db);
            out.1[i] = q + dt * e2 * g[1] + q * self.noise.sum(Field::Q, i, db);
            out.2[i] = a + dt * e2 * g[2] + a * self.noise.sum(Field::A, i, db);
        }
        out
    }

    fn direct_step(&self, s: &StepInput) -> Result<TumourState> {
        let db = s.path.increment(s.k);
        let (c, w) = self.parabolic_step(s.k, s.state, s.u_bnd, s.controls, db)?;
        let (p, q, a) = self.hyperbolic_step(s.state, s.v, db);
        let db_star = self.cfg.nm.radius_increment(db);
        let eta = radius_step(s.state.eta, s.u_bnd, db_star, self.cfg.dt)
            .ok_or(Error::Extinction { step: s.k + 1 })?;
        Ok(TumourState {
            c,
            w,
            p,
            q,
            a,
            eta,
            tau: self.tau(s.k + 1),
        })
    }

    /// Step of the variables with the multiplicative noise factored out, e.g. c = exp(H) C.
    fn transformed_step(&self, s: &StepInput) -> Result<TumourState> {
        let n = self.grid.n_nodes;
        let dt = self.cfg.dt;
        let k = s.k;
        let st = s.state;
        let e2 = st.eta * st.eta;
        let b0 = s.path.value(k);
        let b1 = s.path.value(k + 1);
        let nodes = &self.grid.nodes;
        let t1 = self.tau(k + 1);

        let parabolic = |field: Field,
                         phys: &[f64],
                         d: f64,
                         source: &dyn Fn(usize) -> f64,
                         boundary: f64,
                         lu: &LU<f64, Dyn, Dyn>|
         -> Result<Vec<f64>> {
            let (hh, hd, hdd) = self.noise.exponent(field, b0);
            let qv = &self.noise.qv[field as usize];
            let tr: Vec<f64> = (0..n).map(|i| (-hh[i]).exp() * phys[i]).collect();
            let dtr = self.grid.derivative(&tr);
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let x = nodes[i];
                let adv = s.u_bnd * x + 2.0 * d * hd[i];
                let lin = d * (hdd[i] + hd[i] * hd[i] + 2.0 * hd[i] / x) + s.u_bnd * x * hd[i]
                    - 0.5 * qv[i];
                rhs[i] = tr[i] + dt * (adv * dtr[i] + lin * tr[i] + (-hh[i]).exp() * source(i));
            }
            let h_end = self.noise.exponent(field, b1).0;
            rhs[n - 1] = (-h_end[n - 1]).exp() * boundary;
            let next = solve(lu, rhs, "transformed step")?;
            Ok(next.iter().zip(&h_end).map(|(x, h)| h.exp() * x).collect())
        };

        let reactions: Vec<_> = (0..n)
            .map(|i| eval_reaction(&self.cfg.rm, st.c[i], st.w[i], st.p[i], st.q[i], st.a[i]))
            .collect();
        let c = parabolic(
            Field::C,
            &st.c,
            self.cfg.rm.d1,
            &|i| -e2 * reactions[i].f + s.controls.u1(k, i),
            self.cfg.c1.eval(t1) + s.controls.cbar[k + 1],
            &self.lu_c,
        )?;
        let w = parabolic(
            Field::W,
            &st.w,
            self.cfg.rm.d2,
            &|i| -e2 * reactions[i].g + s.controls.u2(k, i),
            self.cfg.w1.eval(t1) + s.controls.wbar[k + 1],
            &self.lu_w,
        )?;

        // transported densities
        let fields = [Field::P, Field::Q, Field::A];
        let phys = [&st.p, &st.q, &st.a];
        let mut transformed: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (f, x) in fields.iter().zip(phys) {
            let hh = self.noise.exponent(*f, b0).0;
            transformed.push(x.iter().zip(&hh).map(|(v, h)| (-h).exp() * v).collect());
        }
        let nm = &self.cfg.nm;
        let mut row = vec![0.0; n];
        let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let h_end: Vec<Vec<f64>> = fields.iter().map(|f| self.noise.exponent(*f, b1).0).collect();
        for i in 0..n {
            let foot = (nodes[i] - s.v[i] * dt).clamp(0.0, 1.0);
            self.grid.interpolation_row(foot, &mut row);
            let at = |f: &[f64]| -> f64 { row.iter().zip(f).map(|(r, x)| r * x).sum() };
            let cf = at(&st.c);
            let wf = at(&st.w);
            let mut tf = [0.0; 3];
            let mut pf = [0.0; 3];
            let mut hf = [0.0; 3];
            let mut hdf = [0.0; 3];
            let mut qf = [0.0; 3];
            for m in 0..3 {
                tf[m] = at(&transformed[m]);
                let polys = &nm.h[fields[m] as usize];
                hf[m] = polys.iter().zip(b0).map(|(p, b)| p.eval(foot) * b).sum();
                hdf[m] = polys.iter().zip(b0).map(|(p, b)| p.derivative().eval(foot) * b).sum();
                qf[m] = nm.quad_var(fields[m], foot);
                pf[m] = hf[m].exp() * tf[m];
            }
            let g = eval_reaction(&self.cfg.rm, cf, wf, pf[0], pf[1], pf[2]).transfer(pf[0], pf[1], pf[2]);
            for m in 0..3 {
                let next = tf[m]
                    + dt * (-s.v[i] * hdf[m] * tf[m] - 0.5 * qf[m] * tf[m] + (-hf[m]).exp() * e2 * g[m]);
                out[m][i] = h_end[m][i].exp() * next;
            }
        }
        let [p, q, a] = out;

        let bs0 = nm.radius_increment(b0);
        let bs1 = nm.radius_increment(b1);
        let theta = (-bs0).exp() * st.eta * (1.0 + dt * (s.u_bnd - 0.5 * self.noise.sigma2));
        if theta <= 0.0 {
            return Err(Error::Extinction { step: k + 1 });
        }
        Ok(TumourState {
            c,
            w,
            p,
            q,
            a,
            eta: bs1.exp() * theta,
            tau: t1,
        })
    }
}

pub fn simulate_path(cfg: &ScenarioConfig, controls: &ControlSet, path: &BrownianPath) -> Result<Trajectory> {
    Model::new(cfg.clone())?.simulate(controls, path)
}

/// Default step: min(1e-3, 0.25 * min spacing / max|v|) on the initial state, rounded so the horizon
/// is a whole number of steps.
pub fn auto_dt(cfg: &ScenarioConfig) -> Result<f64> {
    cfg.rm.validate()?;
    let grid = build_grid(cfg.n_nodes)?;
    let state = TumourState::initial(cfg, &grid);
    let (_, v) = velocity_field(&grid, &cfg.rm, &state);
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut dt: f64 = 1e-3;
    if vmax > 0.0 {
        dt = dt.min(0.25 * grid.min_spacing() / vmax);
    }
    let steps = (cfg.horizon / dt).ceil().max(1.0);
    Ok(cfg.horizon / steps)
}
