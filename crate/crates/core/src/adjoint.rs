//! Backward sweep of the pathwise adjoint system along a stored forward trajectory.

use crate::error::{Error, Result};
use crate::forward::{factor, implicit_matrix, solve, Model, ScenarioConfig, TumourState, Trajectory};
use crate::grid::SpectralGrid;
use crate::noise::Field;
use crate::rates::{eval_reaction_jacobian, var};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub zc: Vec<f64>,
    pub zw: Vec<f64>,
    pub zp: Vec<f64>,
    pub zq: Vec<f64>,
    pub za: Vec<f64>,
    pub zeta: f64,
}

impl AdjointState {
    pub fn zeros(n: usize) -> Self {
        AdjointState {
            zc: vec![0.0; n],
            zw: vec![0.0; n],
            zp: vec![0.0; n],
            zq: vec![0.0; n],
            za: vec![0.0; n],
            zeta: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.zeta.is_finite()
            && [&self.zc, &self.zw, &self.zp, &self.zq, &self.za]
                .iter()
                .all(|f| f.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    /// states[k] is the adjoint at tau_k; the last entry is the zero terminal state.
    pub states: Vec<AdjointState>,
    /// Flux paired with the boundary controls at tau_k.
    pub boundary_flux_c: Vec<f64>,
    pub boundary_flux_w: Vec<f64>,
}

/// F1* = int rho^3 (c' z_c + w' z_w) and A1*(rho) = int_0^rho Phi - int_0^1 (1 - s^3) Phi
/// with Phi = p' z_p + q' z_q + a' z_a.
pub fn coupling_terms(grid: &SpectralGrid, state: &TumourState, adj: &AdjointState) -> (f64, Vec<f64>) {
    let n = grid.n_nodes;
    let dc = grid.derivative(&state.c);
    let dw = grid.derivative(&state.w);
    let dp = grid.derivative(&state.p);
    let dq = grid.derivative(&state.q);
    let da = grid.derivative(&state.a);
    let mut f_int = vec![0.0; n];
    let mut phi = vec![0.0; n];
    let mut tail = vec![0.0; n];
    for i in 0..n {
        let x = grid.nodes[i];
        f_int[i] = x * x * x * (dc[i] * adj.zc[i] + dw[i] * adj.zw[i]);
        phi[i] = dp[i] * adj.zp[i] + dq[i] * adj.zq[i] + da[i] * adj.za[i];
        tail[i] = (1.0 - x * x * x) * phi[i];
    }
    let total = grid.quadrature(&tail);
    let a1 = grid
        .cumulative_integral(&phi)
        .into_iter()
        .map(|v| v - total)
        .collect();
    (grid.quadrature(&f_int), a1)
}

impl Model {
    /// Adjoint at tau_k from the adjoint at tau_{k+1}; also returns the rho=1 derivatives of z_c, z_w.
    pub fn adjoint_step(
        &self,
        traj: &Trajectory,
        k: usize,
        next: &AdjointState,
        lambda: (f64, f64),
    ) -> Result<(AdjointState, f64, f64)> {
        let grid = &self.grid;
        let n = grid.n_nodes;
        let dt = self.cfg.dt;
        let rm = &self.cfg.rm;
        let st = &traj.states[k];
        let ub = traj.u_boundary[k];
        let v = &traj.v_field[k];
        let db = traj.path.increment(k);
        let nm = &self.cfg.nm;
        let z = next;
        let eta = st.eta;
        let e2 = eta * eta;

        let (f1_star, a1_star) = coupling_terms(grid, st, z);

        let mut fstar = vec![0.0; n];
        let mut gstar = vec![0.0; n];
        let mut rhs_h = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut h_vals = vec![0.0; n];
        let mut eta_src = vec![0.0; n];
        for i in 0..n {
            let j = eval_reaction_jacobian(rm, eta, st.c[i], st.w[i], st.p[i], st.q[i], st.a[i]);
            let h = rm.h(st.c[i], st.p[i], st.a[i]);
            h_vals[i] = h;
            let zk = [z.zp[i], z.zq[i], z.za[i]];
            let nonlocal = f1_star + a1_star[i];
            let coupled = |x: usize| -> f64 {
                (0..3).map(|m| j.big_g[m][x] * zk[m]).sum::<f64>()
                    + j.eta3_h[x] * z.zeta
                    + j.eta2_h[x] * nonlocal
            };
            fstar[i] = -j.f1[var::C] * z.zc[i] - j.g1[var::C] * z.zw[i] + coupled(var::C);
            gstar[i] = -j.f1[var::W] * z.zc[i] - j.g1[var::W] * z.zw[i] + coupled(var::W);
            let dens = [(var::P, lambda.0 * st.p[i]), (var::Q, lambda.1 * st.q[i]), (var::A, 0.0)];
            for (m, (x, cost)) in dens.into_iter().enumerate() {
                rhs_h[m][i] = -j.f1[x] * z.zc[i] - j.g1[x] * z.zw[i] + coupled(x) + cost;
            }
            eta_src[i] = -j.f1[var::ETA] * z.zc[i] - j.g1[var::ETA] * z.zw[i]
                + (0..3).map(|m| j.big_g[m][var::ETA] * zk[m]).sum::<f64>();
        }

        // parabolic adjoints: implicit diffusion and implicit multiplicative noise
        let parabolic = |field: Field, zf: &[f64], src: &[f64], d: f64| -> Result<Vec<f64>> {
            let dz = grid.derivative(zf);
            let mut diag = vec![1.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let x = grid.nodes[i];
                diag[i] = 1.0 - self.noise.sum(field, i, db) + self.noise.qv[field as usize][i] * dt;
                rhs[i] = zf[i] + dt * (-ub * x * dz[i] - 3.0 * ub * zf[i] + src[i]);
            }
            let lu = factor(implicit_matrix(grid, &diag, dt * d), "adjoint operator")?;
            solve(&lu, rhs, "adjoint step")
        };
        let zc = parabolic(Field::C, &z.zc, &fstar, rm.d1)?;
        let zw = parabolic(Field::W, &z.zw, &gstar, rm.d2)?;

        // transported adjoints, characteristics traced forward from each node
        let fields = [Field::P, Field::Q, Field::A];
        let zold = [&z.zp, &z.zq, &z.za];
        let mut carried: Vec<Vec<f64>> = Vec::with_capacity(3);
        for m in 0..3 {
            carried.push(
                (0..n)
                    .map(|i| {
                        let div = e2 * h_vals[i] - 3.0 * ub;
                        zold[m][i] + dt * (div * zold[m][i] + rhs_h[m][i])
                    })
                    .collect(),
            );
        }
        let mut row = vec![0.0; n];
        let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let foot = (grid.nodes[i] + v[i] * dt).clamp(0.0, 1.0);
            grid.interpolation_row(foot, &mut row);
            for m in 0..3 {
                let val: f64 = row.iter().zip(&carried[m]).map(|(r, x)| r * x).sum();
                let f = fields[m];
                let denom = 1.0 - self.noise.sum(f, i, db) + self.noise.qv[f as usize][i] * dt;
                out[m][i] = val / denom;
            }
        }
        let [zp, zq, za] = out;

        let weighted = |f: &dyn Fn(usize) -> f64| -> f64 {
            let vals: Vec<f64> = (0..n).map(|i| grid.nodes[i] * grid.nodes[i] * f(i)).collect();
            grid.quadrature(&vals)
        };
        let int_h = weighted(&|i| 2.0 * h_vals[i]);
        let int_h_nonlocal = weighted(&|i| 2.0 * h_vals[i] * (f1_star + a1_star[i]));
        let int_src = weighted(&|i| eta_src[i]);
        let h_star = ub * z.zeta + e2 * int_h * z.zeta + eta * int_h_nonlocal + int_src;
        let denom = 1.0 - nm.radius_increment(db) + self.noise.sigma2 * dt;
        let zeta = (z.zeta + dt * h_star) / denom;

        let flux_c = grid.boundary_derivative(&zc);
        let flux_w = grid.boundary_derivative(&zw);
        Ok((
            AdjointState {
                zc,
                zw,
                zp,
                zq,
                za,
                zeta,
            },
            flux_c,
            flux_w,
        ))
    }

    pub fn solve_adjoint(&self, traj: &Trajectory, lambda: (f64, f64)) -> Result<AdjointTrajectory> {
        let n = self.grid.n_nodes;
        let steps = traj.n_steps();
        if steps != self.n_steps {
            return Err(Error::Config(format!(
                "trajectory has {steps} steps, model expects {}",
                self.n_steps
            )));
        }
        let mut states = vec![AdjointState::zeros(n); steps + 1];
        let mut flux_c = vec![0.0; steps + 1];
        let mut flux_w = vec![0.0; steps + 1];
        for k in (0..steps).rev() {
            let (prev, fc, fw) = self.adjoint_step(traj, k, &states[k + 1], lambda)?;
            if !prev.is_finite() {
                return Err(Error::NonFinite {
                    what: "adjoint state",
                    step: k,
                });
            }
            // the solve of step k carries the boundary value imposed at tau_{k+1}
            flux_c[k + 1] = fc;
            flux_w[k + 1] = fw;
            states[k] = prev;
        }
        flux_c[0] = self.grid.boundary_derivative(&states[0].zc);
        flux_w[0] = self.grid.boundary_derivative(&states[0].zw);
        Ok(AdjointTrajectory {
            states,
            boundary_flux_c: flux_c,
            boundary_flux_w: flux_w,
        })
    }
}

pub fn solve_adjoint(cfg: &ScenarioConfig, traj: &Trajectory, lambda: (f64, f64)) -> Result<AdjointTrajectory> {
    Model::new(cfg.clone())?.solve_adjoint(traj, lambda)
}
