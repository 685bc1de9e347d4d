//! Numerical verification of the variational information-bottleneck bound
//! on finite alphabets: I(X;Y|Z) <= E[log p(X|Y,Z) / q(X|Z)], with equality
//! slack E_z KL(p(.|z) || q(.|z)) >= 0.

use rand::Rng;

use crate::{Error, Result};

/// A joint distribution p(x, y, z) over finite alphabets plus a variational
/// table q(x | z).
#[derive(Clone, Debug)]
pub struct DiscreteJoint {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// p(x, y, z), row-major over (x, y, z).
    pub p: Vec<f64>,
    /// q(x | z), row-major over (x, z); columns (fixed z) sum to 1.
    pub q: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, ny: usize, nz: usize, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != nx * ny * nz {
            return Err(Error::shape("DiscreteJoint p", nx * ny * nz, p.len()));
        }
        if q.len() != nx * nz {
            return Err(Error::shape("DiscreteJoint q", nx * nz, q.len()));
        }
        if p.iter().any(|&v| v < 0.0) || q.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "DiscreteJoint: negative probability".into(),
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "DiscreteJoint: p sums to {total}, not 1"
            )));
        }
        for z in 0..nz {
            let col: f64 = (0..nx).map(|x| q[x * nz + z]).sum();
            if (col - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "DiscreteJoint: q(.|z={z}) sums to {col}, not 1"
                )));
            }
        }
        Ok(DiscreteJoint { nx, ny, nz, p, q })
    }

    fn p_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.p[(x * self.ny + y) * self.nz + z]
    }

    fn q_at(&self, x: usize, z: usize) -> f64 {
        self.q[x * self.nz + z]
    }

    /// Marginal p(z).
    fn pz(&self, z: usize) -> f64 {
        let mut acc = 0.0;
        for x in 0..self.nx {
            for y in 0..self.ny {
                acc += self.p_at(x, y, z);
            }
        }
        acc
    }

    /// Conditional p(x | z).
    fn px_given_z(&self, x: usize, z: usize) -> f64 {
        let pz = self.pz(z);
        if pz == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for y in 0..self.ny {
            acc += self.p_at(x, y, z);
        }
        acc / pz
    }

    /// Conditional p(x | y, z).
    fn px_given_yz(&self, x: usize, y: usize, z: usize) -> f64 {
        let mut pyz = 0.0;
        for xi in 0..self.nx {
            pyz += self.p_at(xi, y, z);
        }
        if pyz == 0.0 {
            return 0.0;
        }
        self.p_at(x, y, z) / pyz
    }

    /// Exact conditional mutual information I(X; Y | Z) by enumeration.
    pub fn conditional_mutual_information(&self) -> f64 {
        let mut acc = 0.0;
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    let pxyz = self.p_at(x, y, z);
                    if pxyz == 0.0 {
                        continue;
                    }
                    let num = self.px_given_yz(x, y, z);
                    let den = self.px_given_z(x, z);
                    acc += pxyz * (num / den).ln();
                }
            }
        }
        acc
    }

    /// Exact E[log p(X|Y,Z) / q(X|Z)] by enumeration.
    pub fn variational_upper_bound(&self) -> f64 {
        let mut acc = 0.0;
        for x in 0..self.nx {
            for y in 0..self.ny {
                for z in 0..self.nz {
                    let pxyz = self.p_at(x, y, z);
                    if pxyz == 0.0 {
                        continue;
                    }
                    acc += pxyz * (self.px_given_yz(x, y, z) / self.q_at(x, z)).ln();
                }
            }
        }
        acc
    }

    /// E_z KL(p(.|z) || q(.|z)), the exact gap between bound and information.
    pub fn expected_kl(&self) -> f64 {
        let mut acc = 0.0;
        for z in 0..self.nz {
            let pz = self.pz(z);
            if pz == 0.0 {
                continue;
            }
            for x in 0..self.nx {
                let pxz = self.px_given_z(x, z);
                if pxz == 0.0 {
                    continue;
                }
                acc += pz * pxz * (pxz / self.q_at(x, z)).ln();
            }
        }
        acc
    }

    /// Random strictly-positive joint and variational tables.
    pub fn random(nx: usize, ny: usize, nz: usize, rng: &mut impl Rng) -> Self {
        let mut p: Vec<f64> = (0..nx * ny * nz)
            .map(|_| rng.random_range(0.05..1.0))
            .collect();
        let total: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= total;
        }
        let mut q = vec![0.0; nx * nz];
        for z in 0..nz {
            let col: Vec<f64> = (0..nx).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = col.iter().sum();
            for x in 0..nx {
                q[x * nz + z] = col[x] / s;
            }
        }
        DiscreteJoint::new(nx, ny, nz, p, q).expect("constructed normalized")
    }

    /// Replace q with the exact conditional p(x|z), which attains the bound.
    pub fn with_exact_q(mut self) -> Self {
        for z in 0..self.nz {
            for x in 0..self.nx {
                self.q[x * self.nz + z] = self.px_given_z(x, z);
            }
        }
        self
    }
}

/// lhs = I(X;Y|Z), rhs = the variational bound, slack = rhs - lhs.
#[derive(Clone, Copy, Debug)]
pub struct IbReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

pub fn verify_ib_bound(joint: &DiscreteJoint) -> IbReport {
    let lhs = joint.conditional_mutual_information();
    let rhs = joint.variational_upper_bound();
    IbReport {
        lhs,
        rhs,
        slack: rhs - lhs,
    }
}
