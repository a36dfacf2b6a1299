//! Brownian drivers: noise weights, correlated increments, replayable paths.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATH_MAGIC: &[u8; 8] = b"SFBPBRN1";

/// Polynomial in rho, coefficients in ascending order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Polynomial { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Polynomial { coeffs: vec![c] }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        Polynomial {
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| k as f64 * c)
                .collect(),
        }
    }
}

/// The five noisy fields, in the order c, w, p, q, a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    C = 0,
    W = 1,
    P = 2,
    Q = 3,
    A = 4,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::C, Field::W, Field::P, Field::Q, Field::A];
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub channels: usize,
    /// h[field][channel]
    pub h: Vec<Vec<Polynomial>>,
    pub r: Vec<f64>,
    pub corr: Option<Vec<Vec<f64>>>,
    pub relax_assumption_d: bool,
    /// corr with None replaced by the identity
    corr_full: DMatrix<f64>,
    chol: DMatrix<f64>,
}

const ASSUMPTION_TOL: f64 = 1e-12;
const JITTER: [f64; 5] = [0.0, 1e-15, 1e-14, 1e-13, 1e-12];

impl NoiseModel {
    pub fn new(
        channels: usize,
        h: Vec<Vec<Polynomial>>,
        r: Vec<f64>,
        corr: Option<Vec<Vec<f64>>>,
        relax_assumption_d: bool,
    ) -> Result<Self> {
        if h.len() != 5 {
            return Err(Error::Noise(format!("need h weights for 5 fields, got {}", h.len())));
        }
        for (j, per_field) in h.iter().enumerate() {
            if per_field.len() != channels {
                return Err(Error::Noise(format!(
                    "field {j}: {} h polynomials for {channels} channels",
                    per_field.len()
                )));
            }
            for (i, poly) in per_field.iter().enumerate() {
                if poly.coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Noise(format!("h[{j}][{i}] has non-finite coefficients")));
                }
                let slope0 = poly.coeffs.get(1).copied().unwrap_or(0.0);
                if slope0.abs() > ASSUMPTION_TOL {
                    return Err(Error::Noise(format!(
                        "h[{j}][{i}] must have zero slope at rho=0, got {slope0}"
                    )));
                }
                let at_one: f64 = poly.coeffs.iter().sum();
                if !relax_assumption_d && at_one.abs() > ASSUMPTION_TOL {
                    return Err(Error::Noise(format!(
                        "h[{j}][{i}] must vanish at rho=1 (got {at_one}); set relax_assumption_d to allow it"
                    )));
                }
            }
        }
        if r.len() != channels {
            return Err(Error::Noise(format!("{} r weights for {channels} channels", r.len())));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Noise("r weights must be finite".into()));
        }
        let corr_full = match &corr {
            None => DMatrix::identity(channels, channels),
            Some(m) => {
                if m.len() != channels || m.iter().any(|row| row.len() != channels) {
                    return Err(Error::Noise(format!("corr must be {channels}x{channels}")));
                }
                let mat = DMatrix::from_fn(channels, channels, |i, j| m[i][j]);
                for i in 0..channels {
                    if mat[(i, i)] != 1.0 {
                        return Err(Error::Noise("corr must have unit diagonal".into()));
                    }
                    for j in 0..channels {
                        if (mat[(i, j)] - mat[(j, i)]).abs() > ASSUMPTION_TOL
                            || mat[(i, j)].abs() > 1.0
                            || !mat[(i, j)].is_finite()
                        {
                            return Err(Error::Noise("corr must be symmetric with entries in [-1,1]".into()));
                        }
                    }
                }
                mat
            }
        };
        let chol = factor_with_jitter(&corr_full)?;
        Ok(NoiseModel {
            channels,
            h,
            r,
            corr,
            relax_assumption_d,
            corr_full,
            chol,
        })
    }

    /// No noise channels at all.
    pub fn none() -> Self {
        NoiseModel::new(0, vec![vec![]; 5], vec![], None, false).expect("empty noise model")
    }

    /// Same constant weight on every field and channel; needs the relaxed boundary check.
    pub fn uniform(channels: usize, h: f64, r: f64) -> Self {
        NoiseModel::new(
            channels,
            vec![vec![Polynomial::constant(h); channels]; 5],
            vec![r; channels],
            None,
            true,
        )
        .expect("constant weights are valid in relaxed mode")
    }

    pub fn with_corr(mut self, corr: Option<Vec<Vec<f64>>>) -> Result<Self> {
        self = NoiseModel::new(self.channels, self.h, self.r, corr, self.relax_assumption_d)?;
        Ok(self)
    }

    pub fn is_silent(&self) -> bool {
        self.channels == 0
    }

    pub fn correlation(&self, i: usize, k: usize) -> f64 {
        self.corr_full[(i, k)]
    }

    /// Lower-triangular factor of the correlation matrix.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// sum_i h_i^j(rho) b_i
    pub fn field_sum(&self, field: Field, rho: f64, b: &[f64]) -> f64 {
        self.h[field as usize]
            .iter()
            .zip(b)
            .map(|(p, bi)| p.eval(rho) * bi)
            .sum()
    }

    /// Quadratic variation rate sum_ik h_i h_k corr_ik of the field noise at rho.
    pub fn quad_var(&self, field: Field, rho: f64) -> f64 {
        let vals: Vec<f64> = self.h[field as usize].iter().map(|p| p.eval(rho)).collect();
        quadratic_form(&self.corr_full, &vals)
    }

    /// Quadratic variation rate of B* = sum_i r_i B_i.
    pub fn radius_quad_var(&self) -> f64 {
        quadratic_form(&self.corr_full, &self.r)
    }

    pub fn radius_increment(&self, db: &[f64]) -> f64 {
        self.r.iter().zip(db).map(|(r, b)| r * b).sum()
    }
}

fn quadratic_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        for k in 0..x.len() {
            s += x[i] * x[k] * m[(i, k)];
        }
    }
    s
}

fn factor_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    for eps in JITTER {
        let shifted = m + DMatrix::<f64>::identity(n, n) * eps;
        if let Some(ch) = nalgebra::Cholesky::new(shifted) {
            return Ok(ch.l());
        }
    }
    Err(Error::NotPsd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub dt: f64,
    pub n_steps: usize,
    pub channels: usize,
    /// n_steps x channels, row-major
    pub increments: Vec<f64>,
    /// (n_steps + 1) x channels, row-major, row 0 zero
    pub cumulative: Vec<f64>,
}

impl BrownianPath {
    fn from_cumulative(dt: f64, n_steps: usize, channels: usize, cumulative: Vec<f64>) -> Self {
        let mut increments = vec![0.0; n_steps * channels];
        for k in 0..n_steps {
            for i in 0..channels {
                increments[k * channels + i] =
                    cumulative[(k + 1) * channels + i] - cumulative[k * channels + i];
            }
        }
        BrownianPath {
            dt,
            n_steps,
            channels,
            increments,
            cumulative,
        }
    }

    pub fn zero(channels: usize, dt: f64, n_steps: usize) -> Self {
        Self::from_cumulative(dt, n_steps, channels, vec![0.0; (n_steps + 1) * channels])
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.channels..(k + 1) * self.channels]
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.cumulative[k * self.channels..(k + 1) * self.channels]
    }

    /// Same path observed every `factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::Noise(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps
            )));
        }
        let n = self.n_steps / factor;
        let mut cum = Vec::with_capacity((n + 1) * self.channels);
        for k in 0..=n {
            cum.extend_from_slice(self.value(k * factor));
        }
        Ok(Self::from_cumulative(self.dt * factor as f64, n, self.channels, cum))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(PATH_MAGIC)?;
        out.write_all(&(self.n_steps as u64).to_le_bytes())?;
        out.write_all(&(self.channels as u64).to_le_bytes())?;
        out.write_all(&self.dt.to_le_bytes())?;
        for x in &self.increments {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Replays a dump; the cumulative sums are rebuilt by running summation.
    pub fn read_from<R: Read>(mut input: R) -> Result<BrownianPath> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != PATH_MAGIC {
            return Err(Error::Noise("bad Brownian path header".into()));
        }
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        let n_steps = u64::from_le_bytes(buf) as usize;
        input.read_exact(&mut buf)?;
        let channels = u64::from_le_bytes(buf) as usize;
        input.read_exact(&mut buf)?;
        let dt = f64::from_le_bytes(buf);
        let mut increments = Vec::with_capacity(n_steps * channels);
        for _ in 0..n_steps * channels {
            input.read_exact(&mut buf)?;
            increments.push(f64::from_le_bytes(buf));
        }
        let mut cumulative = vec![0.0; (n_steps + 1) * channels];
        for k in 0..n_steps {
            for i in 0..channels {
                cumulative[(k + 1) * channels + i] =
                    cumulative[k * channels + i] + increments[k * channels + i];
            }
        }
        Ok(BrownianPath {
            dt,
            n_steps,
            channels,
            increments,
            cumulative,
        })
    }
}

pub fn sample_path(nm: &NoiseModel, dt: f64, n_steps: usize, seed: u64) -> Result<BrownianPath> {
    sample_path_indexed(nm, dt, n_steps, seed, 0)
}

/// Path `index` of the ensemble keyed by `seed`; each index has its own generator stream.
pub fn sample_path_indexed(
    nm: &NoiseModel,
    dt: f64,
    n_steps: usize,
    seed: u64,
    index: u64,
) -> Result<BrownianPath> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Noise(format!("dt must be positive, got {dt}")));
    }
    let m = nm.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let sq = dt.sqrt();
    let l = nm.cholesky();
    let mut z = vec![0.0; m];
    let mut cum = vec![0.0; (n_steps + 1) * m];
    for k in 0..n_steps {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..m {
            let mut d = 0.0;
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                d += l[(i, j)] * zj;
            }
            cum[(k + 1) * m + i] = cum[k * m + i] + sq * d;
        }
    }
    Ok(BrownianPath::from_cumulative(dt, n_steps, m, cum))
}

/// exp(sum_i h_i^j(rho) b_i) at each node.
pub fn transform_factor(nm: &NoiseModel, field: Field, nodes: &[f64], b: &[f64]) -> Vec<f64> {
    nodes.iter().map(|&x| nm.field_sum(field, x, b).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump_model(channels: usize) -> NoiseModel {
        let h = Polynomial::new(vec![1.0, 0.0, -1.0]);
        NoiseModel::new(channels, vec![vec![h; channels]; 5], vec![0.1; channels], None, false)
            .unwrap()
    }

    #[test]
    fn identity_corr_matches_absent_corr() {
        let a = bump_model(3);
        let b = bump_model(3)
            .with_corr(Some(vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ]))
            .unwrap();
        let pa = sample_path(&a, 1e-3, 500, 11).unwrap();
        let pb = sample_path(&b, 1e-3, 500, 11).unwrap();
        assert_eq!(pa.increments, pb.increments);
        assert_eq!(a.quad_var(Field::P, 0.3).to_bits(), b.quad_var(Field::P, 0.3).to_bits());
    }

    #[test]
    fn cumulative_and_increments_agree() {
        let p = sample_path(&bump_model(2), 1e-2, 100, 3).unwrap();
        assert!(p.value(0).iter().all(|v| *v == 0.0));
        for k in 0..p.n_steps {
            for i in 0..2 {
                assert_eq!(p.value(k + 1)[i] - p.value(k)[i], p.increment(k)[i]);
            }
        }
    }

    #[test]
    fn assumption_d_is_checked() {
        let bad = vec![vec![Polynomial::constant(0.5)]; 5];
        assert!(NoiseModel::new(1, bad.clone(), vec![0.5], None, false).is_err());
        assert!(NoiseModel::new(1, bad, vec![0.5], None, true).is_ok());
        let sloped = vec![vec![Polynomial::new(vec![1.0, -1.0])]; 5];
        assert!(NoiseModel::new(1, sloped, vec![0.0], None, true).is_err());
    }

    #[test]
    fn rejects_indefinite_corr() {
        let m = bump_model(2).with_corr(Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert!(m.is_err());
        let singular = bump_model(2).with_corr(Some(vec![vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert!(singular.is_ok());
    }

    #[test]
    fn transform_factor_examples() {
        let nm = NoiseModel::new(
            1,
            vec![vec![Polynomial::new(vec![1.0, 0.0, -1.0])]; 5],
            vec![0.0],
            None,
            false,
        )
        .unwrap();
        let nodes = [0.0, 0.25, 0.5, 1.0];
        let f = transform_factor(&nm, Field::C, &nodes, &[2f64.ln()]);
        for (x, v) in nodes.iter().zip(&f) {
            assert!((v - 2f64.powf(1.0 - x * x)).abs() < 1e-14);
        }
        assert_eq!(f[3], 1.0);
        assert!(transform_factor(&nm, Field::A, &nodes, &[0.0]).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn dump_round_trip() {
        let p = sample_path(&bump_model(2), 1e-3, 40, 5).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], PATH_MAGIC);
        assert_eq!(buf.len(), 32 + 8 * 80);
        let q = BrownianPath::read_from(&buf[..]).unwrap();
        assert_eq!(p.increments, q.increments);
        assert_eq!(p.dt, q.dt);
    }

    #[test]
    fn coarsen_keeps_endpoints() {
        let p = sample_path(&bump_model(1), 1e-3, 64, 9).unwrap();
        let c = p.coarsen(4).unwrap();
        assert_eq!(c.n_steps, 16);
        assert_eq!(c.value(16), p.value(64));
        assert!((c.dt - 4e-3).abs() < 1e-18);
    }
}
