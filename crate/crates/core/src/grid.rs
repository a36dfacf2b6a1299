//! Legendre–Gauss–Lobatto collocation on [0, 1].

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone)]
pub struct SpectralGrid {
    pub n_nodes: usize,
    pub nodes: Vec<f64>,
    pub quad_weights: Vec<f64>,
    /// Barycentric weights, scaled by a constant (irrelevant to the formulas).
    pub bary: Vec<f64>,
    pub diff: DMatrix<f64>,
    pub diff2: DMatrix<f64>,
    /// Row i integrates the interpolant over [0, nodes[i]].
    pub cumulative: DMatrix<f64>,
}

/// LGL nodes and weights on [-1, 1], ordered from 1 down to -1.
fn lgl_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let deg = n - 1;
    let mut x: Vec<f64> = (0..n)
        .map(|k| (std::f64::consts::PI * k as f64 / deg as f64).cos())
        .collect();
    let mut p_n = vec![0.0; n];
    for _ in 0..NEWTON_MAX_ITER {
        let mut delta: f64 = 0.0;
        for (xi, pn) in x.iter_mut().zip(p_n.iter_mut()) {
            let (mut p_prev, mut p) = (1.0, *xi);
            for k in 2..=deg {
                let next = ((2 * k - 1) as f64 * *xi * p - (k - 1) as f64 * p_prev) / k as f64;
                p_prev = p;
                p = next;
            }
            *pn = p;
            // Newton step on (1 - x^2) P'_deg written through the recurrence
            let step = (*xi * p - p_prev) / (n as f64 * p);
            *xi -= step;
            delta = delta.max(step.abs());
        }
        if delta < NEWTON_TOL {
            break;
        }
    }
    // final Legendre values at the converged nodes
    for (xi, pn) in x.iter().zip(p_n.iter_mut()) {
        let (mut p_prev, mut p) = (1.0, *xi);
        for k in 2..=deg {
            let next = ((2 * k - 1) as f64 * *xi * p - (k - 1) as f64 * p_prev) / k as f64;
            p_prev = p;
            p = next;
        }
        *pn = p;
    }
    let w = p_n
        .iter()
        .map(|p| 2.0 / (deg as f64 * n as f64 * p * p))
        .collect();
    (x, w)
}

fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    // differences scaled by 4 (the inverse capacity of [0,1]) to avoid underflow
    (0..x.len())
        .map(|j| {
            let prod: f64 = (0..x.len())
                .filter(|&k| k != j)
                .map(|k| 4.0 * (x[j] - x[k]))
                .product();
            1.0 / prod
        })
        .collect()
}

fn lagrange_row(x: &[f64], bary: &[f64], y: f64, out: &mut [f64]) {
    if let Some(j) = x.iter().position(|&xj| xj == y) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[j] = 1.0;
        return;
    }
    let mut sum = 0.0;
    for j in 0..x.len() {
        let t = bary[j] / (y - x[j]);
        out[j] = t;
        sum += t;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn build_grid(n_nodes: usize) -> Result<SpectralGrid> {
    if n_nodes < 4 {
        return Err(Error::GridTooSmall(n_nodes));
    }
    let n = n_nodes;
    let (xr, wr) = lgl_reference(n);
    let mut nodes: Vec<f64> = xr.iter().map(|x| 0.5 * (1.0 - x)).collect();
    nodes[0] = 0.0;
    nodes[n - 1] = 1.0;
    let quad_weights: Vec<f64> = wr.iter().map(|w| 0.5 * w).collect();
    let bary = barycentric_weights(&nodes);

    let mut diff = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let d = bary[j] / bary[i] / (nodes[i] - nodes[j]);
                diff[(i, j)] = d;
                diag -= d;
            }
        }
        diff[(i, i)] = diag;
    }
    let diff2 = &diff * &diff;

    let mut cumulative = DMatrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 1..n {
        let xi = nodes[i];
        for k in 0..n {
            lagrange_row(&nodes, &bary, xi * nodes[k], &mut row);
            for j in 0..n {
                cumulative[(i, j)] += xi * quad_weights[k] * row[j];
            }
        }
    }

    Ok(SpectralGrid {
        n_nodes: n,
        nodes,
        quad_weights,
        bary,
        diff,
        diff2,
        cumulative,
    })
}

pub(crate) fn matvec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..n {
            s += m[(i, j)] * x[j];
        }
        *o = s;
    }
}

impl SpectralGrid {
    pub fn len(&self) -> usize {
        self.n_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.n_nodes == 0
    }

    pub fn derivative(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes];
        matvec(&self.diff, f, &mut out);
        out
    }

    pub fn second_derivative(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes];
        matvec(&self.diff2, f, &mut out);
        out
    }

    /// Derivative at rho = 1 from the last row of the differentiation matrix.
    pub fn boundary_derivative(&self, f: &[f64]) -> f64 {
        let last = self.n_nodes - 1;
        (0..self.n_nodes).map(|j| self.diff[(last, j)] * f[j]).sum()
    }

    pub fn quadrature(&self, f: &[f64]) -> f64 {
        self.quad_weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn cumulative_integral(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes];
        matvec(&self.cumulative, f, &mut out);
        out[0] = 0.0;
        out
    }

    pub fn interpolation_row(&self, y: f64, out: &mut [f64]) {
        lagrange_row(&self.nodes, &self.bary, y, out);
    }

    pub fn interpolate(&self, f: &[f64], y: f64) -> f64 {
        let mut row = vec![0.0; self.n_nodes];
        self.interpolation_row(y, &mut row);
        row.iter().zip(f).map(|(r, v)| r * v).sum()
    }

    /// f'' + (2/rho) f', with the symmetric limit 3 f'' at rho = 0.
    pub fn radial_laplacian(&self, f: &[f64]) -> Vec<f64> {
        let d1 = self.derivative(f);
        let d2 = self.second_derivative(f);
        (0..self.n_nodes)
            .map(|i| {
                if i == 0 {
                    3.0 * d2[0]
                } else {
                    d2[i] + 2.0 * d1[i] / self.nodes[i]
                }
            })
            .collect()
    }

    pub fn min_spacing(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn cumulative_integral(grid: &SpectralGrid, field: &[f64]) -> Vec<f64> {
    grid.cumulative_integral(field)
}
