use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Clamp range applied to every Gaussian head's log standard deviation.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_74; // 0.5 * ln(2*pi)

/// Diagonal Gaussian given by mean and log standard deviation.
///
/// `log_std` is clamped to `[LOG_STD_MIN, LOG_STD_MAX]` on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Tensor,
    log_std: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(Error::shape(
                "DiagGaussian::new",
                format!("{:?}", mean.shape()),
                format!("{:?}", log_std.shape()),
            ));
        }
        let mut log_std = log_std;
        for v in log_std.values_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Tensor::vector(vec![0.0; dim]),
            log_std: Tensor::vector(vec![0.0; dim]),
        }
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_std(&self) -> &Tensor {
        &self.log_std
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    /// Sum over dimensions of the Gaussian log density at `x`.
    pub fn log_prob(&self, x: &Tensor) -> Result<f64> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape(
                "DiagGaussian::log_prob",
                format!("{:?}", self.mean.shape()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(log_prob_slice(
            self.mean.values(),
            self.log_std.values(),
            x.values(),
        ))
    }

    /// Reparameterized sample: mean + std * noise.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.mean.shape() {
            return Err(Error::shape(
                "DiagGaussian::sample",
                format!("{:?}", self.mean.shape()),
                format!("{:?}", noise.shape()),
            ));
        }
        let values = self
            .mean
            .values()
            .iter()
            .zip(self.log_std.values())
            .zip(noise.values())
            .map(|((m, ls), n)| m + ls.exp() * n)
            .collect();
        Ok(Tensor::from_parts(self.mean.shape().to_vec(), values))
    }
}

/// Gaussian log density summed over dimensions, on raw slices.
pub fn log_prob_slice(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..mean.len() {
        let z = (x[i] - mean[i]) * (-log_std[i]).exp();
        acc += -HALF_LN_2PI - log_std[i] - 0.5 * z * z;
    }
    acc
}

/// Closed-form KL(p || q) between diagonal Gaussians:
/// sum_i [ ln(sq_i/sp_i) + (sp_i^2 + (mp_i - mq_i)^2) / (2 sq_i^2) - 1/2 ].
pub fn kl_diag_gaussians(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.mean.shape() != q.mean.shape() {
        return Err(Error::shape(
            "kl_diag_gaussians",
            format!("{:?}", p.mean.shape()),
            format!("{:?}", q.mean.shape()),
        ));
    }
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (mp, lp) = (p.mean.values()[i], p.log_std.values()[i]);
        let (mq, lq) = (q.mean.values()[i], q.log_std.values()[i]);
        let var_p = (2.0 * lp).exp();
        let var_q = (2.0 * lq).exp();
        acc += lq - lp + (var_p + (mp - mq) * (mp - mq)) / (2.0 * var_q) - 0.5;
    }
    Ok(acc)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// log(1 - tanh(u)^2) in the numerically stable form 2(ln 2 - u - softplus(-2u)).
pub(crate) fn tanh_log_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

// Largest f64 strictly below 1. tanh saturates to exactly 1.0 for |u| >~ 19,
// which would put actions on the boundary; clamping here keeps them strictly
// inside (-1, 1).
const ONE_MINUS_EPS: f64 = 1.0 - f64::EPSILON / 2.0;

fn bounded_tanh(u: f64) -> f64 {
    u.tanh().clamp(-ONE_MINUS_EPS, ONE_MINUS_EPS)
}

/// Bound a pre-activation sample with tanh and apply the change-of-variables
/// correction to its log probability.
pub fn tanh_squash(u: &Tensor, log_prob_u: f64) -> (Tensor, f64) {
    let a: Vec<f64> = u.values().iter().map(|v| bounded_tanh(*v)).collect();
    let mut log_prob = log_prob_u;
    for &ui in u.values() {
        log_prob -= tanh_log_jacobian(ui);
    }
    (Tensor::from_parts(u.shape().to_vec(), a), log_prob)
}

/// Row-wise tanh squashing for batched pre-activations: returns the squashed
/// matrix and the per-row correction sum_i log(1 - tanh(u_i)^2).
pub fn tanh_squash_rows(u: &Tensor) -> (Tensor, Vec<f64>) {
    let (rows, cols) = u.dims2();
    let uv = u.values();
    let mut a = vec![0.0; rows * cols];
    let mut corr = vec![0.0; rows];
    for i in 0..rows {
        for j in 0..cols {
            let v = uv[i * cols + j];
            a[i * cols + j] = bounded_tanh(v);
            corr[i] += tanh_log_jacobian(v);
        }
    }
    (Tensor::from_parts(vec![rows, cols], a), corr)
}

// ── Taped building blocks ────────────────────────────────────────────

/// Split a `(rows, 2d)` head output into mean and clamped log_std columns.
pub fn split_gaussian_head(tape: &mut Tape, head: Var) -> Result<(Var, Var)> {
    split_gaussian_head_clamped(tape, head, LOG_STD_MIN, LOG_STD_MAX)
}

/// As `split_gaussian_head` with an explicit clamp range. Decoders on
/// near-deterministic data need a higher variance floor than policy heads:
/// at the global floor their log-density curvature (1/sigma^2) explodes and
/// the gradient noise drowns every other signal.
pub fn split_gaussian_head_clamped(
    tape: &mut Tape,
    head: Var,
    lo: f64,
    hi: f64,
) -> Result<(Var, Var)> {
    let (_, cols) = tape.value(head).dims2();
    if cols % 2 != 0 {
        return Err(Error::shape("split_gaussian_head", "even", cols));
    }
    let d = cols / 2;
    let mean = tape.slice_cols(head, 0, d)?;
    let log_std_raw = tape.slice_cols(head, d, d)?;
    let log_std = tape.clamp(log_std_raw, lo, hi);
    Ok((mean, log_std))
}

/// Taped reparameterized sample mean + exp(log_std) * noise.
pub fn reparam(tape: &mut Tape, mean: Var, log_std: Var, noise: Var) -> Result<Var> {
    let std = tape.exp(log_std);
    let scaled = tape.mul(std, noise)?;
    tape.add(mean, scaled)
}

/// Taped sum over all entries of the Gaussian log density of `x`.
pub fn gaussian_log_prob_sum(tape: &mut Tape, mean: Var, log_std: Var, x: Var) -> Result<Var> {
    let n = tape.value(mean).numel() as f64;
    let diff = tape.sub(x, mean)?;
    let neg_log_std = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg_log_std);
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let quad = tape.sum_all(z2);
    let quad = tape.scale(quad, -0.5);
    let ls_sum = tape.sum_all(log_std);
    let ls_sum = tape.scale(ls_sum, -1.0);
    let partial = tape.add(quad, ls_sum)?;
    Ok(tape.add_scalar(partial, -HALF_LN_2PI * n))
}

/// Taped KL( N(mean, exp(log_std)) || N(0, I) ) summed over dimensions.
pub fn kl_to_std_normal_sum(tape: &mut Tape, mean: Var, log_std: Var) -> Result<Var> {
    let n = tape.value(mean).numel() as f64;
    let two_ls = tape.scale(log_std, 2.0);
    let var = tape.exp(two_ls);
    let var_sum = tape.sum_all(var);
    let mean_sq = tape.square(mean);
    let mean_sq_sum = tape.sum_all(mean_sq);
    let ls_sum = tape.sum_all(log_std);
    let neg_ls_sum = tape.scale(ls_sum, -1.0);
    let quad = tape.add(var_sum, mean_sq_sum)?;
    let quad = tape.scale(quad, 0.5);
    let partial = tape.add(neg_ls_sum, quad)?;
    Ok(tape.add_scalar(partial, -0.5 * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: Vec<f64>, log_std: Vec<f64>) -> DiagGaussian {
        DiagGaussian::new(Tensor::vector(mean), Tensor::vector(log_std)).unwrap()
    }

    #[test]
    fn standard_normal_log_prob_values() {
        let d = g(vec![0.0], vec![0.0]);
        let lp0 = d.log_prob(&Tensor::vector(vec![0.0])).unwrap();
        assert!((lp0 - (-HALF_LN_2PI)).abs() < 1e-15);
        let lp1 = d.log_prob(&Tensor::vector(vec![1.0])).unwrap();
        assert!((lp1 - (-HALF_LN_2PI - 0.5)).abs() < 1e-15);
        let d2 = g(vec![0.0, 0.0], vec![0.0, 0.0]);
        let lp = d2.log_prob(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!((lp - (-2.0 * HALF_LN_2PI)).abs() < 1e-15);
    }

    #[test]
    fn log_prob_integrates_to_one() {
        // Trapezoid over a fine 1-D grid for a few (mean, std) draws.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let mu: f64 = rng.random_range(-1.0..1.0);
            let sigma: f64 = rng.random_range(0.5..2.0);
            let d = g(vec![mu], vec![sigma.ln()]);
            let lo = mu - 10.0 * sigma;
            let hi = mu + 10.0 * sigma;
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let x = lo + i as f64 * h;
                let p = d.log_prob(&Tensor::vector(vec![x])).unwrap().exp();
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                integral += w * p * h;
            }
            assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
        }
    }

    #[test]
    fn reparam_sample_values() {
        let d = g(vec![1.0, -2.0], vec![0.0, 0.0]);
        let s = d.sample(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.values(), d.mean().values());
        let d = g(vec![0.0], vec![0.0]);
        let s = d.sample(&Tensor::vector(vec![1.5])).unwrap();
        assert_eq!(s.values(), &[1.5]);
    }

    #[test]
    fn kl_values() {
        let std1 = g(vec![0.0], vec![0.0]);
        assert_eq!(kl_diag_gaussians(&std1, &std1).unwrap(), 0.0);
        let shifted = g(vec![1.0], vec![0.0]);
        assert!((kl_diag_gaussians(&shifted, &std1).unwrap() - 0.5).abs() < 1e-15);
        let wide = g(vec![0.0], vec![2.0f64.ln()]);
        let expected = -(2.0f64.ln()) + 2.0 - 0.5; // ln(1/2) + sp^2/2 - 1/2
        assert!((kl_diag_gaussians(&wide, &std1).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_non_negative_and_zero_iff_equal() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let dim = rng.random_range(1..4);
            let draw = |rng: &mut rand::rngs::StdRng| {
                let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..1.5)).collect();
                g(mean, ls)
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let kl = kl_diag_gaussians(&p, &q).unwrap();
            assert!(kl >= 0.0, "kl {kl}");
            let self_kl = kl_diag_gaussians(&p, &p).unwrap();
            assert!(self_kl.abs() < 1e-12);
            if kl < 1e-12 {
                for i in 0..dim {
                    assert!((p.mean().values()[i] - q.mean().values()[i]).abs() < 1e-6);
                    assert!((p.log_std().values()[i] - q.log_std().values()[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn tanh_squash_values() {
        let (a, lp) = tanh_squash(&Tensor::vector(vec![0.0]), 0.0);
        assert_eq!(a.values(), &[0.0]);
        assert_eq!(lp, 0.0);

        // Symmetry of the correction.
        let (_, lp_pos) = tanh_squash(&Tensor::vector(vec![1.7]), 0.0);
        let (_, lp_neg) = tanh_squash(&Tensor::vector(vec![-1.7]), 0.0);
        assert!((lp_pos - lp_neg).abs() < 1e-15);

        // Direct high-precision evaluation at u = 3.
        let t = 3.0f64.tanh();
        let direct = -(1.0 - t * t).ln();
        let (_, lp3) = tanh_squash(&Tensor::vector(vec![3.0]), 0.0);
        assert!((lp3 - direct).abs() < 1e-9, "stable {lp3} direct {direct}");
    }

    #[test]
    fn tanh_squash_stable_matches_naive_inside_range() {
        for i in 0..=1000 {
            let u = -5.0 + 10.0 * i as f64 / 1000.0;
            let naive = (1.0 - u.tanh() * u.tanh()).ln();
            let stable = tanh_log_jacobian(u);
            assert!((naive - stable).abs() < 1e-9, "u={u}: {naive} vs {stable}");
        }
        // Output strictly inside (-1, 1) even for extreme inputs.
        let (a, _) = tanh_squash(&Tensor::vector(vec![40.0, -40.0]), 0.0);
        assert!(a.values().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn taped_log_prob_matches_eval() {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let ls = tape.constant(Tensor::matrix(1, 2, vec![0.1, -0.4]).unwrap());
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.9, 0.6]).unwrap());
        let lp = gaussian_log_prob_sum(&mut tape, mean, ls, x).unwrap();
        let d = g(vec![0.3, -0.2], vec![0.1, -0.4]);
        let expected = d.log_prob(&Tensor::vector(vec![0.9, 0.6])).unwrap();
        assert!((tape.value(lp).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn taped_kl_matches_eval() {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::matrix(1, 2, vec![0.7, -1.1]).unwrap());
        let ls = tape.constant(Tensor::matrix(1, 2, vec![0.2, -0.3]).unwrap());
        let kl = kl_to_std_normal_sum(&mut tape, mean, ls).unwrap();
        let p = g(vec![0.7, -1.1], vec![0.2, -0.3]);
        let expected = kl_diag_gaussians(&p, &DiagGaussian::standard(2)).unwrap();
        assert!((tape.value(kl).item().unwrap() - expected).abs() < 1e-12);
    }
}
