//! Plot-ready CSV tables. Floats use the shortest round-trip representation, so output is
//! byte-stable for identical inputs.

use std::fmt::Write;

use crate::adjoint::AdjointTrajectory;
use crate::control::ControlSet;
use crate::error::{Error, Result};
use crate::forward::{TumourState, Trajectory};
use crate::grid::SpectralGrid;

pub const TRAJECTORY_HEADER: &str = "tau,node_index,rho,c,w,p,q,a,eta,u,v";
pub const PROFILE_HEADER: &str = "node_index,rho,c,w,p,q,a,alive";

fn indices(n_times: usize, stride: usize) -> impl Iterator<Item = usize> {
    // always include the final level
    (0..n_times)
        .filter(move |k| k % stride == 0 || *k == n_times - 1)
}

pub fn trajectory_csv(grid: &SpectralGrid, traj: &Trajectory, stride: usize) -> String {
    let mut s = String::new();
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for k in indices(traj.states.len(), stride.max(1)) {
        let st = &traj.states[k];
        for i in 0..grid.n_nodes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                st.tau,
                i,
                grid.nodes[i],
                st.c[i],
                st.w[i],
                st.p[i],
                st.q[i],
                st.a[i],
                st.eta,
                traj.u_field[k][i],
                traj.v_field[k][i]
            );
        }
    }
    s
}

/// Node-wise mean over trajectories on a shared time grid.
#[derive(Debug, Clone)]
pub struct EnsembleMean {
    pub n_paths: usize,
    pub states: Vec<TumourState>,
    pub u_field: Vec<Vec<f64>>,
    pub v_field: Vec<Vec<f64>>,
}

impl EnsembleMean {
    pub fn new(n_nodes: usize, n_times: usize) -> Self {
        let zero = TumourState {
            c: vec![0.0; n_nodes],
            w: vec![0.0; n_nodes],
            p: vec![0.0; n_nodes],
            q: vec![0.0; n_nodes],
            a: vec![0.0; n_nodes],
            eta: 0.0,
            tau: 0.0,
        };
        EnsembleMean {
            n_paths: 0,
            states: vec![zero; n_times],
            u_field: vec![vec![0.0; n_nodes]; n_times],
            v_field: vec![vec![0.0; n_nodes]; n_times],
        }
    }

    /// Running mean; paths must be added in a fixed order for reproducible output.
    pub fn add(&mut self, traj: &Trajectory) {
        self.n_paths += 1;
        let w = 1.0 / self.n_paths as f64;
        let upd = |m: &mut [f64], x: &[f64]| {
            for (a, b) in m.iter_mut().zip(x) {
                *a += (b - *a) * w;
            }
        };
        for (k, st) in traj.states.iter().enumerate() {
            let m = &mut self.states[k];
            upd(&mut m.c, &st.c);
            upd(&mut m.w, &st.w);
            upd(&mut m.p, &st.p);
            upd(&mut m.q, &st.q);
            upd(&mut m.a, &st.a);
            m.eta += (st.eta - m.eta) * w;
            m.tau = st.tau;
            upd(&mut self.u_field[k], &traj.u_field[k]);
            upd(&mut self.v_field[k], &traj.v_field[k]);
        }
    }

    pub fn csv(&self, grid: &SpectralGrid, stride: usize) -> String {
        let mut s = String::new();
        s.push_str("tau,node_index,rho,c,w,p,q,a,alive,eta,u,v\n");
        for k in indices(self.states.len(), stride.max(1)) {
            let st = &self.states[k];
            for i in 0..grid.n_nodes {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    st.tau,
                    i,
                    grid.nodes[i],
                    st.c[i],
                    st.w[i],
                    st.p[i],
                    st.q[i],
                    st.a[i],
                    st.p[i] + st.q[i],
                    st.eta,
                    self.u_field[k][i],
                    self.v_field[k][i]
                );
            }
        }
        s
    }
}

pub fn profile_csv(grid: &SpectralGrid, st: &TumourState) -> String {
    let mut s = String::new();
    s.push_str(PROFILE_HEADER);
    s.push('\n');
    for i in 0..grid.n_nodes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            i,
            grid.nodes[i],
            st.c[i],
            st.w[i],
            st.p[i],
            st.q[i],
            st.a[i],
            st.p[i] + st.q[i]
        );
    }
    s
}

pub fn controls_csv(grid: &SpectralGrid, controls: &ControlSet, dt: f64) -> String {
    let mut s = String::from("tau,node_index,rho,u1,u2,cbar,wbar\n");
    for k in 0..controls.n_times {
        for i in 0..controls.n_nodes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                k as f64 * dt,
                i,
                grid.nodes[i],
                controls.u1(k, i),
                controls.u2(k, i),
                controls.cbar[k],
                controls.wbar[k]
            );
        }
    }
    s
}

/// Reads back `controls_csv` output for a grid of `n_nodes` nodes and `n_times` levels.
pub fn parse_controls_csv(text: &str, n_nodes: usize, n_times: usize) -> Result<ControlSet> {
    let bad = |msg: String| Error::Config(format!("controls.csv: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some("tau,node_index,rho,u1,u2,cbar,wbar") {
        return Err(bad("unexpected header".into()));
    }
    let mut set = ControlSet::zeros(n_nodes, n_times);
    let mut rows = 0;
    for (r, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", r + 2)))?;
        if vals.len() != 7 {
            return Err(bad(format!("row {} has {} columns", r + 2, vals.len())));
        }
        let (k, i) = (r / n_nodes, r % n_nodes);
        if k >= n_times || vals[1] as usize != i {
            return Err(bad(format!(
                "layout does not match {n_times} time levels x {n_nodes} nodes"
            )));
        }
        set.u1[r] = vals[3];
        set.u2[r] = vals[4];
        if i == 0 {
            set.cbar[k] = vals[5];
            set.wbar[k] = vals[6];
        }
        rows += 1;
    }
    if rows != n_nodes * n_times {
        return Err(bad(format!(
            "{rows} rows, expected {n_times} time levels x {n_nodes} nodes"
        )));
    }
    Ok(set)
}

pub fn adjoint_csv(grid: &SpectralGrid, adj: &AdjointTrajectory, dt: f64, stride: usize) -> String {
    let mut s = String::from("tau,node_index,rho,z_c,z_w,z_p,z_q,z_a,z_eta,flux_c,flux_w\n");
    for k in indices(adj.states.len(), stride.max(1)) {
        let z = &adj.states[k];
        for i in 0..grid.n_nodes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                k as f64 * dt,
                i,
                grid.nodes[i],
                z.zc[i],
                z.zw[i],
                z.zp[i],
                z.zq[i],
                z.za[i],
                z.zeta,
                adj.boundary_flux_c[k],
                adj.boundary_flux_w[k]
            );
        }
    }
    s
}

/// Parsed `final_profile.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub rho: Vec<f64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl Profile {
    pub fn parse(text: &str) -> Option<Profile> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next()?.split(',').collect();
        if header.first() != Some(&"node_index") || header.get(1) != Some(&"rho") {
            return None;
        }
        let mut rho = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 2];
        for line in lines.filter(|l| !l.is_empty()) {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != header.len() {
                return None;
            }
            rho.push(vals[1].parse().ok()?);
            for (c, v) in cols.iter_mut().zip(&vals[2..]) {
                c.push(v.parse().ok()?);
            }
        }
        Some(Profile {
            rho,
            columns: header[2..].iter().map(|h| h.to_string()).zip(cols).collect(),
        })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn controls_round_trip() {
        let g = build_grid(5).unwrap();
        let mut u = ControlSet::zeros(5, 4);
        for (j, v) in u.u1.iter_mut().enumerate() {
            *v = -0.1 * j as f64 - 1.0 / 3.0;
        }
        u.u2[7] = 2.5e-17;
        u.cbar = vec![0.0, -1.0, -2.0, -3.0];
        u.wbar = vec![0.0, 0.1, 0.2, 0.3];
        let text = controls_csv(&g, &u, 0.25);
        assert_eq!(parse_controls_csv(&text, 5, 4).unwrap(), u);
        assert!(parse_controls_csv(&text, 4, 5).is_err());
        assert!(parse_controls_csv(&text, 5, 3).is_err());
    }

    #[test]
    fn profile_parses_its_own_output() {
        let g = build_grid(4).unwrap();
        let st = TumourState {
            c: vec![1.0; 4],
            w: vec![2.0; 4],
            p: vec![3.0, 3.5, 4.0, 4.5],
            q: vec![0.5; 4],
            a: vec![0.0; 4],
            eta: 0.1,
            tau: 1.0,
        };
        let prof = Profile::parse(&profile_csv(&g, &st)).unwrap();
        assert_eq!(prof.rho, g.nodes);
        assert_eq!(prof.column("alive").unwrap(), &[3.5, 4.0, 4.5, 5.0]);
        assert!(prof.column("eta").is_none());
    }
}
