//! Rate functions of the fixed-domain model and their exact partial derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K(x) = alpha + beta * x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub alpha: f64,
    pub beta: f64,
}

impl Affine {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        Affine { alpha, beta }
    }

    pub const fn constant(alpha: f64) -> Self {
        Affine { alpha, beta: 0.0 }
    }

    #[inline]
    pub fn at(&self, x: f64) -> f64 {
        self.alpha + self.beta * x
    }

    fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub kb: Affine,
    pub kq: Affine,
    pub ka: Affine,
    pub kp: Affine,
    pub kd: Affine,
    pub g1: Affine,
    pub g2: Affine,
    pub k1: Affine,
    pub k2: Affine,
    pub k3: Affine,
    pub k4: Affine,
    pub kr: f64,
    pub n_total: f64,
    pub d1: f64,
    pub d2: f64,
}

impl RateModel {
    /// Rates of the worked example with the default consumption and removal rates.
    pub fn example() -> Self {
        RateModel {
            kb: Affine::new(0.0, 15.0),
            kq: Affine::new(15.0, -1.0),
            ka: Affine::new(13.0, -1.0),
            kp: Affine::new(0.0, 1.0),
            kd: Affine::new(13.0, -1.0),
            g1: Affine::new(0.0, 7.0),
            g2: Affine::new(0.0, 3.0),
            k1: Affine::new(0.0, 1.0),
            k2: Affine::new(0.0, 0.5),
            k3: Affine::new(0.0, 1.0),
            k4: Affine::new(0.0, 0.5),
            kr: 1.0,
            n_total: 10.0,
            d1: 0.1,
            d2: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let affine = [
            self.kb, self.kq, self.ka, self.kp, self.kd, self.g1, self.g2, self.k1, self.k2,
            self.k3, self.k4,
        ];
        if !affine.iter().all(Affine::is_finite) {
            return Err(Error::Config("rate coefficients must be finite".into()));
        }
        if !(self.kr.is_finite() && self.kr >= 0.0) {
            return Err(Error::Config(format!("kr must be >= 0, got {}", self.kr)));
        }
        if !(self.n_total.is_finite() && self.n_total > 0.0) {
            return Err(Error::Config(format!("n_total must be > 0, got {}", self.n_total)));
        }
        if !(self.d1 > 0.0 && self.d2 > 0.0 && self.d1.is_finite() && self.d2.is_finite()) {
            return Err(Error::Config("diffusivities d1, d2 must be > 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn h(&self, c: f64, p: f64, a: f64) -> f64 {
        (self.kb.at(c) * p - self.kr * a) / self.n_total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reaction {
    pub f: f64,
    pub g: f64,
    pub gij: [[f64; 3]; 3],
    pub h: f64,
}

pub fn eval_reaction(rm: &RateModel, c: f64, w: f64, p: f64, q: f64, a: f64) -> Reaction {
    let kb = rm.kb.at(c);
    let kq = rm.kq.at(c);
    let ka = rm.ka.at(c);
    let kp = rm.kp.at(c);
    let kd = rm.kd.at(c);
    let g1 = rm.g1.at(w);
    let g2 = rm.g2.at(w);
    let h = rm.h(c, p, a);
    Reaction {
        f: rm.k1.at(c) * p + rm.k2.at(c) * q,
        g: rm.k3.at(w) * p + rm.k4.at(w) * q,
        gij: [
            [kb - kq - ka - g1 - h, kp, 0.0],
            [kq, -(kp + kd + g2) - h, 0.0],
            [ka + g1, kd + g2, -rm.kr - h],
        ],
        h,
    }
}

impl Reaction {
    /// Sum_j g_kj X_j for X = (p, q, a), without the eta^2 factor.
    pub fn transfer(&self, p: f64, q: f64, a: f64) -> [f64; 3] {
        let x = [p, q, a];
        let mut out = [0.0; 3];
        for (k, row) in self.gij.iter().enumerate() {
            out[k] = row[0] * x[0] + row[1] * x[1] + row[2] * x[2];
        }
        out
    }
}

/// Index of each variable in the Jacobian rows.
pub mod var {
    pub const ETA: usize = 0;
    pub const C: usize = 1;
    pub const W: usize = 2;
    pub const P: usize = 3;
    pub const Q: usize = 4;
    pub const A: usize = 5;
}

/// Partial derivatives with respect to (eta, c, w, p, q, a).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionJacobian {
    /// f1 = eta^2 f
    pub f1: [f64; 6],
    /// g1 = eta^2 g
    pub g1: [f64; 6],
    /// G_k = eta^2 sum_j g_kj X_j
    pub big_g: [[f64; 6]; 3],
    pub eta3_h: [f64; 6],
    pub eta2_h: [f64; 6],
}

#[allow(clippy::too_many_arguments)]
pub fn eval_reaction_jacobian(
    rm: &RateModel,
    eta: f64,
    c: f64,
    w: f64,
    p: f64,
    q: f64,
    a: f64,
) -> ReactionJacobian {
    let r = eval_reaction(rm, c, w, p, q, a);
    let e2 = eta * eta;
    let e3 = e2 * eta;
    let n = rm.n_total;

    let h_c = rm.kb.beta * p / n;
    let h_p = rm.kb.at(c) / n;
    let h_a = -rm.kr / n;
    // h has no w or q dependence
    let dh = [0.0, h_c, 0.0, h_p, 0.0, h_a];

    let f = r.f;
    let g = r.g;
    let f1 = [
        2.0 * eta * f,
        e2 * (rm.k1.beta * p + rm.k2.beta * q),
        0.0,
        e2 * rm.k1.at(c),
        e2 * rm.k2.at(c),
        0.0,
    ];
    let g1 = [
        2.0 * eta * g,
        0.0,
        e2 * (rm.k3.beta * p + rm.k4.beta * q),
        e2 * rm.k3.at(w),
        e2 * rm.k4.at(w),
        0.0,
    ];

    let tr = r.transfer(p, q, a);
    let gg = &r.gij;
    let kb_c = rm.kb.beta;
    let kq_c = rm.kq.beta;
    let ka_c = rm.ka.beta;
    let kp_c = rm.kp.beta;
    let kd_c = rm.kd.beta;
    let g1_w = rm.g1.beta;
    let g2_w = rm.g2.beta;

    // derivatives of sum_j g_kj X_j (before the eta^2 factor)
    let raw = [
        [
            0.0,
            (kb_c - kq_c - ka_c) * p - h_c * p + kp_c * q,
            -g1_w * p,
            gg[0][0] - h_p * p,
            gg[0][1],
            -h_a * p,
        ],
        [
            0.0,
            kq_c * p - (kp_c + kd_c) * q - h_c * q,
            -g2_w * q,
            gg[1][0] - h_p * q,
            gg[1][1],
            -h_a * q,
        ],
        [
            0.0,
            ka_c * p + kd_c * q - h_c * a,
            g1_w * p + g2_w * q,
            gg[2][0] - h_p * a,
            gg[2][1],
            gg[2][2] - h_a * a,
        ],
    ];
    let mut big_g = [[0.0; 6]; 3];
    for k in 0..3 {
        big_g[k][0] = 2.0 * eta * tr[k];
        for v in 1..6 {
            big_g[k][v] = e2 * raw[k][v];
        }
    }

    let mut eta3_h = [0.0; 6];
    let mut eta2_h = [0.0; 6];
    eta3_h[0] = 3.0 * e2 * r.h;
    eta2_h[0] = 2.0 * eta * r.h;
    for v in 1..6 {
        eta3_h[v] = e3 * dh[v];
        eta2_h[v] = e2 * dh[v];
    }

    ReactionJacobian {
        f1,
        g1,
        big_g,
        eta3_h,
        eta2_h,
    }
}
