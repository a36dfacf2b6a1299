//! Costs, projections and the forward–backward sweep solvers.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointTrajectory;
use crate::error::{Error, Result};
use crate::forward::{Model, Trajectory};
use crate::grid::SpectralGrid;
use crate::noise::{sample_path_indexed, BrownianPath};

pub fn project(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::InvalidBounds { lo, hi });
    }
    Ok(x.clamp(lo, hi))
}

/// Control values: u1, u2 on time x nodes (row-major), cbar, wbar on time.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub n_nodes: usize,
    pub n_times: usize,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub cbar: Vec<f64>,
    pub wbar: Vec<f64>,
}

impl ControlSet {
    pub fn zeros(n_nodes: usize, n_times: usize) -> Self {
        ControlSet {
            n_nodes,
            n_times,
            u1: vec![0.0; n_nodes * n_times],
            u2: vec![0.0; n_nodes * n_times],
            cbar: vec![0.0; n_times],
            wbar: vec![0.0; n_times],
        }
    }

    #[inline]
    pub fn u1(&self, k: usize, i: usize) -> f64 {
        self.u1[k * self.n_nodes + i]
    }

    #[inline]
    pub fn u2(&self, k: usize, i: usize) -> f64 {
        self.u2[k * self.n_nodes + i]
    }

    /// Largest pointwise difference over all four channels.
    pub fn sup_distance(&self, other: &ControlSet) -> f64 {
        let pairs = [
            (&self.u1, &other.u1),
            (&self.u2, &other.u2),
            (&self.cbar, &other.cbar),
            (&self.wbar, &other.wbar),
        ];
        pairs
            .iter()
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// (1 - theta) self + theta other
    pub fn blend(&self, other: &ControlSet, theta: f64) -> ControlSet {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| if theta == 1.0 { *y } else { (1.0 - theta) * x + theta * y })
                .collect()
        };
        ControlSet {
            n_nodes: self.n_nodes,
            n_times: self.n_times,
            u1: mix(&self.u1, &other.u1),
            u2: mix(&self.u2, &other.u2),
            cbar: mix(&self.cbar, &other.cbar),
            wbar: mix(&self.wbar, &other.wbar),
        }
    }
}

/// Bounds, targets and weights of the control problem, sampled on the run's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProblem {
    pub n_nodes: usize,
    pub n_times: usize,
    /// Channel order u1, u2, cbar, wbar; field channels are time x nodes, boundary ones time only.
    pub lower: [Vec<f64>; 4],
    pub upper: [Vec<f64>; 4],
    pub target: [Vec<f64>; 4],
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Function of (rho, tau).
pub type FieldFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

impl ControlProblem {
    /// Samples (lower, upper, target) per channel; boundary channels are evaluated at rho = 1.
    pub fn sample(
        grid: &SpectralGrid,
        dt: f64,
        n_steps: usize,
        channels: [(FieldFn, FieldFn, FieldFn); 4],
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self> {
        let n = grid.n_nodes;
        let n_times = n_steps + 1;
        let mut lower: [Vec<f64>; 4] = Default::default();
        let mut upper: [Vec<f64>; 4] = Default::default();
        let mut target: [Vec<f64>; 4] = Default::default();
        for (ch, (lo, hi, tg)) in channels.iter().enumerate() {
            let rhos: &[f64] = if ch < 2 { &grid.nodes } else { &[1.0] };
            for k in 0..n_times {
                let tau = k as f64 * dt;
                for &x in rhos {
                    lower[ch].push(lo(x, tau));
                    upper[ch].push(hi(x, tau));
                    target[ch].push(tg(x, tau));
                }
            }
        }
        let problem = ControlProblem {
            n_nodes: n,
            n_times,
            lower,
            upper,
            target,
            lambda1,
            lambda2,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Constant bounds and targets per channel.
    pub fn constant(
        grid: &SpectralGrid,
        dt: f64,
        n_steps: usize,
        bounds: [(f64, f64); 4],
        targets: [f64; 4],
        lambda: (f64, f64),
    ) -> Result<Self> {
        let c = |v: f64| -> FieldFn { Arc::new(move |_, _| v) };
        let ch = |i: usize| (c(bounds[i].0), c(bounds[i].1), c(targets[i]));
        Self::sample(grid, dt, n_steps, [ch(0), ch(1), ch(2), ch(3)], lambda.0, lambda.1)
    }

    /// Bounds and targets of the worked example.
    pub fn example(grid: &SpectralGrid, dt: f64, n_steps: usize, lambda: (f64, f64)) -> Result<Self> {
        Self::constant(
            grid,
            dt,
            n_steps,
            [(-5.0, 0.0), (0.0, 10.0), (-5.0, 0.0), (0.0, 10.0)],
            [-4.0, 5.0, -4.0, 5.0],
            lambda,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for ch in 0..4 {
            let want = if ch < 2 { self.n_times * self.n_nodes } else { self.n_times };
            if self.lower[ch].len() != want || self.upper[ch].len() != want || self.target[ch].len() != want {
                return Err(Error::Config(format!("control channel {ch} has the wrong size")));
            }
            for (lo, hi) in self.lower[ch].iter().zip(&self.upper[ch]) {
                if lo > hi || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidBounds { lo: *lo, hi: *hi });
                }
            }
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("weights lambda1, lambda2 must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lambda(&self) -> (f64, f64) {
        (self.lambda1, self.lambda2)
    }

    /// Applies F_i pointwise to raw channel values; the first boundary samples are reset to 0.
    pub fn project_all(&self, raw: [Vec<f64>; 4]) -> ControlSet {
        let [a, b, c, d] = raw;
        let clamp = |ch: usize, vals: Vec<f64>| -> Vec<f64> {
            vals.into_iter()
                .enumerate()
                .map(|(j, x)| x.clamp(self.lower[ch][j], self.upper[ch][j]))
                .collect()
        };
        let mut set = ControlSet {
            n_nodes: self.n_nodes,
            n_times: self.n_times,
            u1: clamp(0, a),
            u2: clamp(1, b),
            cbar: clamp(2, c),
            wbar: clamp(3, d),
        };
        set.cbar[0] = 0.0;
        set.wbar[0] = 0.0;
        set
    }

    /// The optimum when lambda1 = lambda2 = 0, and the initial guess of the sweeps.
    pub fn projected_targets(&self) -> ControlSet {
        self.project_all(self.target.clone())
    }

    /// Admissible controls closest to zero (the uncontrolled baseline).
    pub fn nearest_to_zero(&self) -> ControlSet {
        self.project_all([
            vec![0.0; self.target[0].len()],
            vec![0.0; self.target[1].len()],
            vec![0.0; self.n_times],
            vec![0.0; self.n_times],
        ])
    }

    pub fn is_admissible(&self, set: &ControlSet) -> bool {
        let vals = [&set.u1, &set.u2, &set.cbar, &set.wbar];
        let inside = vals.iter().enumerate().all(|(ch, v)| {
            v.iter()
                .enumerate()
                .all(|(j, x)| self.lower[ch][j] <= *x && *x <= self.upper[ch][j])
        });
        inside && set.cbar[0] == 0.0 && set.wbar[0] == 0.0
    }
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..n - 1].iter().sum();
    dt * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Cost with LGL quadrature in rho and the trapezoid rule in tau.
pub fn cost_j(grid: &SpectralGrid, problem: &ControlProblem, traj: &Trajectory, controls: &ControlSet) -> f64 {
    let n = grid.n_nodes;
    let per_step: Vec<f64> = traj
        .states
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let integrand: Vec<f64> = (0..n)
                .map(|i| {
                    let x = grid.nodes[i];
                    let j = k * n + i;
                    let d1 = controls.u1[j] - problem.target[0][j];
                    let d2 = controls.u2[j] - problem.target[1][j];
                    x * x
                        * (problem.lambda1 * st.p[i] * st.p[i]
                            + problem.lambda2 * st.q[i] * st.q[i]
                            + d1 * d1
                            + d2 * d2)
                })
                .collect();
            let d3 = controls.cbar[k] - problem.target[2][k];
            let d4 = controls.wbar[k] - problem.target[3][k];
            grid.quadrature(&integrand) + d3 * d3 + d4 * d4
        })
        .collect();
    trapezoid(&per_step, traj.dt)
}

/// Unprojected right-hand sides of the optimality formulas.
fn optimality_fields(adj: &AdjointTrajectory, problem: &ControlProblem, d1: f64, d2: f64) -> [Vec<f64>; 4] {
    let n = problem.n_nodes;
    let mut a = Vec::with_capacity(problem.n_times * n);
    let mut b = Vec::with_capacity(problem.n_times * n);
    for (k, z) in adj.states.iter().enumerate() {
        for i in 0..n {
            a.push(-z.zc[i] + problem.target[0][k * n + i]);
            b.push(-z.zw[i] + problem.target[1][k * n + i]);
        }
    }
    let c = adj
        .boundary_flux_c
        .iter()
        .zip(&problem.target[2])
        .map(|(f, r)| d1 * f + r)
        .collect();
    let d = adj
        .boundary_flux_w
        .iter()
        .zip(&problem.target[3])
        .map(|(f, r)| d2 * f + r)
        .collect();
    [a, b, c, d]
}

pub fn update_controls(adj: &AdjointTrajectory, problem: &ControlProblem, d1: f64, d2: f64) -> ControlSet {
    problem.project_all(optimality_fields(adj, problem, d1, d2))
}

/// Adjoint prediction of dJ(u)[delta]. The reduced gradient is twice the first-variation
/// integrand because the cost carries no 1/2.
pub fn directional_derivative(
    grid: &SpectralGrid,
    problem: &ControlProblem,
    controls: &ControlSet,
    adj: &AdjointTrajectory,
    delta: &ControlSet,
    dt: f64,
    diffusion: (f64, f64),
) -> f64 {
    let n = grid.n_nodes;
    let per_step: Vec<f64> = (0..controls.n_times)
        .map(|k| {
            let z = &adj.states[k];
            let integrand: Vec<f64> = (0..n)
                .map(|i| {
                    let x = grid.nodes[i];
                    let j = k * n + i;
                    let a = (z.zc[i] + controls.u1[j] - problem.target[0][j]) * delta.u1[j];
                    let b = (z.zw[i] + controls.u2[j] - problem.target[1][j]) * delta.u2[j];
                    x * x * (a + b)
                })
                .collect();
            let c = (controls.cbar[k] - problem.target[2][k] - diffusion.0 * adj.boundary_flux_c[k]) * delta.cbar[k];
            let w = (controls.wbar[k] - problem.target[3][k] - diffusion.1 * adj.boundary_flux_w[k]) * delta.wbar[k];
            grid.quadrature(&integrand) + c + w
        })
        .collect();
    2.0 * trapezoid(&per_step, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbsOptions {
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FbsOptions {
    fn default() -> Self {
        FbsOptions {
            theta: 0.5,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl FbsOptions {
    fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("damping theta must be in (0,1], got {}", self.theta)));
        }
        if self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(Error::Config("max_iter must be >= 1 and tol >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FbsOutcome {
    /// The last evaluated iterate u; trajectory, adjoint and cost belong to it.
    pub controls: ControlSet,
    pub trajectory: Trajectory,
    pub adjoint: AdjointTrajectory,
    pub cost: f64,
    pub iterations: usize,
    /// ||u - H(u)|| at the returned controls
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

pub fn fbs_solve_pathwise(
    model: &Model,
    problem: &ControlProblem,
    path: &BrownianPath,
    opts: &FbsOptions,
) -> Result<FbsOutcome> {
    opts.validate()?;
    let (d1, d2) = (model.cfg.rm.d1, model.cfg.rm.d2);
    let mut u = problem.projected_targets();
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let traj = model.simulate(&u, path)?;
        let adj = model.solve_adjoint(&traj, problem.lambda())?;
        let mapped = update_controls(&adj, problem, d1, d2);
        let residual = u.sup_distance(&mapped);
        history.push(residual);
        let done = residual < opts.tol;
        if done || it == opts.max_iter {
            let cost = cost_j(&model.grid, problem, &traj, &u);
            return Ok(FbsOutcome {
                controls: u,
                trajectory: traj,
                adjoint: adj,
                cost,
                iterations: it,
                residual,
                residual_history: history,
                converged: done,
            });
        }
        u = u.blend(&mapped, opts.theta);
    }
    unreachable!("loop returns on the last iteration")
}

/// Mean over samples with the first sample as shift, exact when all samples coincide.
fn shifted_mean(samples: &[&[f64]]) -> Vec<f64> {
    let first = samples[0];
    let n = samples.len() as f64;
    (0..first.len())
        .map(|j| {
            let x0 = first[j];
            let dev: f64 = samples[1..].iter().map(|s| s[j] - x0).sum();
            x0 + dev / n
        })
        .collect()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let x0 = values[0];
    let m = x0 + values[1..].iter().map(|v| v - x0).sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Path `index` of the ensemble keyed by `seed`, on the model's time grid.
pub fn ensemble_path(model: &Model, seed: u64, index: u64) -> Result<BrownianPath> {
    sample_path_indexed(&model.cfg.nm, model.cfg.dt, model.n_steps, seed, index)
}

#[derive(Debug, Clone)]
pub struct ExpectationOutcome {
    pub controls: ControlSet,
    pub expected_cost: f64,
    pub cost_std_error: f64,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Indices of paths excluded after extinction in the final iteration.
    pub excluded_paths: Vec<usize>,
}

struct PathSweep {
    fields: [Vec<f64>; 4],
    cost: f64,
}

pub fn fbs_solve_expectation(
    model: &Model,
    problem: &ControlProblem,
    n_paths: usize,
    seed: u64,
    opts: &FbsOptions,
) -> Result<ExpectationOutcome> {
    opts.validate()?;
    if n_paths < 2 {
        return Err(Error::Config(format!("expectation solve needs at least 2 paths, got {n_paths}")));
    }
    let paths: Vec<BrownianPath> = (0..n_paths as u64)
        .map(|i| ensemble_path(model, seed, i))
        .collect::<Result<_>>()?;
    let (d1, d2) = (model.cfg.rm.d1, model.cfg.rm.d2);
    let mut u = problem.projected_targets();
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let sweeps: Vec<Result<PathSweep>> = paths
            .par_iter()
            .map(|path| {
                let traj = model.simulate(&u, path)?;
                let adj = model.solve_adjoint(&traj, problem.lambda())?;
                Ok(PathSweep {
                    fields: optimality_fields(&adj, problem, d1, d2),
                    cost: cost_j(&model.grid, problem, &traj, &u),
                })
            })
            .collect();
        let mut kept = Vec::with_capacity(n_paths);
        let mut excluded = Vec::new();
        for (i, s) in sweeps.into_iter().enumerate() {
            match s {
                Ok(s) => kept.push(s),
                Err(Error::Extinction { step }) => {
                    warn!("path {i} went extinct at step {step}; excluded from the average");
                    excluded.push(i);
                }
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            return Err(Error::AllExtinct(n_paths));
        }
        let averaged: [Vec<f64>; 4] = std::array::from_fn(|ch| {
            let refs: Vec<&[f64]> = kept.iter().map(|s| s.fields[ch].as_slice()).collect();
            shifted_mean(&refs)
        });
        let mapped = problem.project_all(averaged);
        let residual = u.sup_distance(&mapped);
        history.push(residual);
        let done = residual < opts.tol;
        if done || it == opts.max_iter {
            let costs: Vec<f64> = kept.iter().map(|s| s.cost).collect();
            let (mean, se) = mean_and_se(&costs);
            return Ok(ExpectationOutcome {
                controls: u,
                expected_cost: mean,
                cost_std_error: se,
                iterations: it,
                residual,
                residual_history: history,
                converged: done,
                excluded_paths: excluded,
            });
        }
        u = u.blend(&mapped, opts.theta);
    }
    unreachable!("loop returns on the last iteration")
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Per-path cost; `None` for extinct paths.
    pub costs: Vec<Option<f64>>,
}

pub fn mc_expected_cost(
    model: &Model,
    problem: &ControlProblem,
    controls: &ControlSet,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_paths < 2 {
        return Err(Error::Config(format!("Monte Carlo cost needs at least 2 paths, got {n_paths}")));
    }
    let costs: Vec<Option<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let path = ensemble_path(model, seed, i)?;
            match model.simulate(controls, &path) {
                Ok(traj) => Ok(Some(cost_j(&model.grid, problem, &traj, controls))),
                Err(Error::Extinction { step }) => {
                    warn!("path {i} went extinct at step {step}; excluded from the estimate");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = costs.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::AllExtinct(n_paths));
    }
    let (mean, std_error) = mean_and_se(&vals);
    Ok(McEstimate {
        mean,
        std_error,
        costs,
    })
}

/// (eta_controlled - eta_uncontrolled) / eta0 per step.
pub fn relative_radius_decrease(controlled: &Trajectory, uncontrolled: &Trajectory, eta0: f64) -> Vec<f64> {
    controlled
        .states
        .iter()
        .zip(&uncontrolled.states)
        .map(|(a, b)| (a.eta - b.eta) / eta0)
        .collect()
}
