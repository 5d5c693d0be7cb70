//! Independent reference implementations used to pin expected values.
//!
//! Everything here is built on dense linear algebra over full covariance
//! matrices and deliberately shares no code with the diagonal-Gaussian and
//! graph machinery it is used to check. Linear-Gaussian model instances
//! admit closed-form evidence and posteriors, which is what makes bound
//! gaps and fusion rules testable to tight tolerances.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian with a full covariance matrix.
#[derive(Clone, Debug)]
pub struct FullGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl FullGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(format!(
                "covariance {}x{} does not match mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        let sym = 0.5 * (&cov + cov.transpose());
        let chol = Cholesky::new(sym.clone()).ok_or_else(|| {
            Error::numerics("covariance is not positive definite")
        })?;
        Ok(FullGaussian { mean, cov: sym, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det_cov(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + self.chol.l() * eps
    }

    pub fn log_prob(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "point of length {} against Gaussian of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let d = x - &self.mean;
        let solved = self.chol.solve(&d);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det_cov() + d.dot(&solved)))
    }

    /// KL divergence from `self` to `p` in closed form.
    pub fn kl_to(&self, p: &FullGaussian) -> Result<f64> {
        if self.dim() != p.dim() {
            return Err(Error::shape("KL between Gaussians of different dimension"));
        }
        let k = self.dim() as f64;
        let trace = p.chol.solve(&self.cov).trace();
        let d = p.mean() - self.mean();
        let maha = d.dot(&p.chol.solve(&d));
        Ok(0.5 * (trace + maha - k + p.log_det_cov() - self.log_det_cov()))
    }

    /// Closed-form `E_{x ~ other}[log self(x)]`, the cross-entropy with the
    /// sign of a log-likelihood.
    pub fn expected_log_prob_under(&self, other: &FullGaussian) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::shape("expectation across mismatched dimensions"));
        }
        let trace = self.chol.solve(other.cov()).trace();
        let d = other.mean() - self.mean();
        let maha = d.dot(&self.chol.solve(&d));
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det_cov() + trace + maha))
    }
}

/// Conditions a joint Gaussian on `given` coordinates taking `value`,
/// returning the law of the `keep` coordinates.
pub fn condition(
    joint: &FullGaussian,
    keep: &[usize],
    given: &[usize],
    value: &DVector<f64>,
) -> Result<FullGaussian> {
    if value.len() != given.len() {
        return Err(Error::shape("conditioning value length mismatch"));
    }
    let sel = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| joint.cov()[(rows[i], cols[j])])
    };
    let mu = |idx: &[usize]| DVector::from_fn(idx.len(), |i, _| joint.mean()[idx[i]]);
    let s_bb = sel(given, given);
    let chol_bb = Cholesky::new(s_bb)
        .ok_or_else(|| Error::numerics("conditioning block is not positive definite"))?;
    let s_ab = sel(keep, given);
    let resid = value - mu(given);
    let mean = mu(keep) + &s_ab * chol_bb.solve(&resid);
    let cov = sel(keep, keep) - &s_ab * chol_bb.solve(&s_ab.transpose());
    FullGaussian::new(mean, cov)
}

/// The marginal law of a coordinate subset.
pub fn marginal(joint: &FullGaussian, keep: &[usize]) -> Result<FullGaussian> {
    let mean = DVector::from_fn(keep.len(), |i, _| joint.mean()[keep[i]]);
    let cov = DMatrix::from_fn(keep.len(), keep.len(), |i, j| {
        joint.cov()[(keep[i], keep[j])]
    });
    FullGaussian::new(mean, cov)
}

/// Linear observation channel `x = A z + b + noise`.
#[derive(Clone, Debug)]
pub struct LinearChannel {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
}

/// Latent Gaussian prior with linear-Gaussian observation channels. Evidence
/// and posteriors are exact, which turns bound gaps into checkable numbers.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    prior: FullGaussian,
    channels: Vec<LinearChannel>,
    joint: FullGaussian,
}

impl LinearGaussianModel {
    pub fn new(prior: FullGaussian, channels: Vec<LinearChannel>) -> Result<Self> {
        let n = prior.dim();
        for (j, c) in channels.iter().enumerate() {
            if c.matrix.ncols() != n
                || c.matrix.nrows() != c.offset.len()
                || c.noise_cov.nrows() != c.offset.len()
                || c.noise_cov.ncols() != c.offset.len()
            {
                return Err(Error::shape(format!("channel {j} has inconsistent shapes")));
            }
        }
        let joint = build_joint(&prior, &channels)?;
        Ok(LinearGaussianModel { prior, channels, joint })
    }

    /// A reproducible, well-conditioned random instance.
    pub fn random(rng: &mut impl Rng, z_dim: usize, obs_dims: &[usize]) -> Result<Self> {
        let randm = |r: usize, c: usize, rng: &mut dyn FnMut() -> f64| {
            DMatrix::from_fn(r, c, |_, _| rng())
        };
        let mut draw = || 0.6 * rng.sample::<f64, _>(StandardNormal);
        let a = randm(z_dim, z_dim, &mut draw);
        let prior_cov = &a * a.transpose() + DMatrix::identity(z_dim, z_dim) * 0.4;
        let prior_mean = DVector::from_fn(z_dim, |_, _| draw());
        let prior = FullGaussian::new(prior_mean, prior_cov)?;
        let channels = obs_dims
            .iter()
            .map(|&k| {
                let m = randm(k, z_dim, &mut draw);
                let noise_seed = randm(k, k, &mut draw);
                LinearChannel {
                    matrix: m,
                    offset: DVector::from_fn(k, |_, _| draw()),
                    noise_cov: &noise_seed * noise_seed.transpose()
                        + DMatrix::identity(k, k) * 0.3,
                }
            })
            .collect();
        LinearGaussianModel::new(prior, channels)
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &FullGaussian {
        &self.prior
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Joint law over `[z; x_0; ...; x_{M-1}]`.
    pub fn joint(&self) -> &FullGaussian {
        &self.joint
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (DVector<f64>, Vec<DVector<f64>>) {
        let all = self.joint.sample(rng);
        let z = all.rows(0, self.latent_dim()).into_owned();
        let mut xs = Vec::new();
        let mut off = self.latent_dim();
        for c in &self.channels {
            let k = c.offset.len();
            xs.push(all.rows(off, k).into_owned());
            off += k;
        }
        (z, xs)
    }

    fn obs_indices(&self, observed: &[usize]) -> Result<Vec<usize>> {
        let mut idx = Vec::new();
        for &j in observed {
            if j >= self.channels.len() {
                return Err(Error::contract(format!("channel {j} out of range")));
            }
            let off: usize = self.latent_dim()
                + self.channels[..j].iter().map(|c| c.offset.len()).sum::<usize>();
            idx.extend(off..off + self.channels[j].offset.len());
        }
        Ok(idx)
    }

    fn stack_obs(&self, xs: &[DVector<f64>], observed: &[usize]) -> Result<DVector<f64>> {
        if xs.len() != observed.len() {
            return Err(Error::contract("one observation per observed channel"));
        }
        let total: usize = observed.iter().map(|&j| self.channels[j].offset.len()).sum();
        let mut v = DVector::zeros(total);
        let mut off = 0;
        for (x, &j) in xs.iter().zip(observed) {
            if x.len() != self.channels[j].offset.len() {
                return Err(Error::shape(format!("observation for channel {j} has wrong size")));
            }
            v.rows_mut(off, x.len()).copy_from(x);
            off += x.len();
        }
        Ok(v)
    }

    /// Exact `log p(x^o)` for the observed channels.
    pub fn evidence(&self, xs: &[DVector<f64>], observed: &[usize]) -> Result<f64> {
        let idx = self.obs_indices(observed)?;
        marginal(&self.joint, &idx)?.log_prob(&self.stack_obs(xs, observed)?)
    }

    /// Exact posterior over the latent given the observed channels.
    pub fn posterior(&self, xs: &[DVector<f64>], observed: &[usize]) -> Result<FullGaussian> {
        let keep: Vec<usize> = (0..self.latent_dim()).collect();
        let given = self.obs_indices(observed)?;
        condition(&self.joint, &keep, &given, &self.stack_obs(xs, observed)?)
    }

    /// `log p(z, x^o) = log p(z) + sum_j log p(x_j | z)` over observed `j`.
    pub fn log_joint_density(
        &self,
        z: &DVector<f64>,
        xs: &[DVector<f64>],
        observed: &[usize],
    ) -> Result<f64> {
        let mut total = self.prior.log_prob(z)?;
        for (x, &j) in xs.iter().zip(observed) {
            let c = &self.channels[j];
            let lik = FullGaussian::new(&c.matrix * z + &c.offset, c.noise_cov.clone())?;
            total += lik.log_prob(x)?;
        }
        Ok(total)
    }

    /// Closed-form `E_{z ~ q}[log p(z, x^o)]` for a Gaussian `q`: the exact
    /// counterpart of averaging `log_joint_density` over draws from `q`. The
    /// latent spread enters each channel as `tr(noise_cov^-1 A cov(q) A^T)`.
    pub fn expected_log_joint(
        &self,
        q: &FullGaussian,
        xs: &[DVector<f64>],
        observed: &[usize],
    ) -> Result<f64> {
        if q.dim() != self.latent_dim() {
            return Err(Error::shape("expectation over mismatched latent dimension"));
        }
        if xs.len() != observed.len() {
            return Err(Error::contract("one observation per observed channel"));
        }
        let mut total = self.prior.expected_log_prob_under(q)?;
        for (x, &j) in xs.iter().zip(observed) {
            if j >= self.channels.len() {
                return Err(Error::contract(format!("channel {j} out of range")));
            }
            let c = &self.channels[j];
            let lik = FullGaussian::new(&c.matrix * q.mean() + &c.offset, c.noise_cov.clone())?;
            let chol = Cholesky::new(c.noise_cov.clone())
                .ok_or_else(|| Error::numerics("channel noise is not positive definite"))?;
            let spread = chol.solve(&(&c.matrix * q.cov() * c.matrix.transpose())).trace();
            total += lik.log_prob(x)? - 0.5 * spread;
        }
        Ok(total)
    }
}

fn build_joint(prior: &FullGaussian, channels: &[LinearChannel]) -> Result<FullGaussian> {
    let n = prior.dim();
    let total = n + channels.iter().map(|c| c.offset.len()).sum::<usize>();
    let mut mean = DVector::zeros(total);
    let mut cov = DMatrix::zeros(total, total);
    mean.rows_mut(0, n).copy_from(prior.mean());
    cov.view_mut((0, 0), (n, n)).copy_from(prior.cov());
    let mut offs = vec![n];
    for c in channels {
        offs.push(offs.last().unwrap() + c.offset.len());
    }
    for (i, c) in channels.iter().enumerate() {
        let k = c.offset.len();
        mean.rows_mut(offs[i], k).copy_from(&(&c.matrix * prior.mean() + &c.offset));
        let cross = prior.cov() * c.matrix.transpose();
        cov.view_mut((0, offs[i]), (n, k)).copy_from(&cross);
        cov.view_mut((offs[i], 0), (k, n)).copy_from(&cross.transpose());
        for (j, c2) in channels.iter().enumerate().take(i + 1) {
            let k2 = c2.offset.len();
            let mut block = &c.matrix * prior.cov() * c2.matrix.transpose();
            if i == j {
                block += &c.noise_cov;
            }
            cov.view_mut((offs[i], offs[j]), (k, k2)).copy_from(&block);
            if i != j {
                cov.view_mut((offs[j], offs[i]), (k2, k)).copy_from(&block.transpose());
            }
        }
    }
    FullGaussian::new(mean, cov)
}

/// Mean and variance of the normalized product of one-dimensional Gaussian
/// densities, computed by trapezoid quadrature on a fixed grid. Serves as a
/// formula-free check of precision-weighted fusion.
pub fn quadrature_product_moments(factors: &[(f64, f64)]) -> (f64, f64) {
    const LO: f64 = -10.0;
    const HI: f64 = 10.0;
    const POINTS: usize = 20_001;
    let step = (HI - LO) / (POINTS - 1) as f64;
    let log_density = |x: f64| -> f64 {
        factors
            .iter()
            .map(|&(m, v)| -0.5 * ((x - m) * (x - m) / v + v.ln() + LN_2PI))
            .sum()
    };
    let mut z = 0.0;
    let mut ex = 0.0;
    let mut exx = 0.0;
    for i in 0..POINTS {
        let x = LO + i as f64 * step;
        let w = if i == 0 || i == POINTS - 1 { 0.5 } else { 1.0 };
        let p = log_density(x).exp() * w;
        z += p;
        ex += x * p;
        exx += x * x * p;
    }
    let mean = ex / z;
    (mean, exx / z - mean * mean)
}

/// Closed-form `E_{x ~ N(m, v)}[log N(x; mu, var)]` in one dimension.
pub fn expected_log_gaussian1d(m: f64, v: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (v + (m - mu) * (m - mu)) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(mean: f64, var: f64) -> FullGaussian {
        FullGaussian::new(DVector::from_vec(vec![mean]), DMatrix::from_vec(1, 1, vec![var]))
            .unwrap()
    }

    #[test]
    fn one_dimensional_log_density_is_pinned() {
        let lp = g1(0.0, 2.0).log_prob(&DVector::from_vec(vec![0.0])).unwrap();
        assert!((lp + 1.265_512_123_484_645_4).abs() < 1e-12);
        let lp = g1(0.0, 1.0).log_prob(&DVector::from_vec(vec![0.0])).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_kl_is_pinned() {
        let kl = g1(1.0, 2.0).kl_to(&g1(0.0, 1.0)).unwrap();
        assert!((kl - 0.653_426_409_720_027_3).abs() < 1e-12);
        assert!(g1(0.3, 1.7).kl_to(&g1(0.3, 1.7)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn covariance_must_be_positive_definite() {
        let bad = DMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(FullGaussian::new(DVector::zeros(2), bad).is_err());
    }

    #[test]
    fn samples_reproduce_mean_and_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov = DMatrix::from_vec(2, 2, vec![1.0, 0.6, 0.6, 2.0]);
        let g = FullGaussian::new(DVector::from_vec(vec![1.0, -2.0]), cov.clone()).unwrap();
        let n = 200_000;
        let mut mean = DVector::zeros(2);
        let mut second = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = g.sample(&mut rng);
            mean += &x;
            second += &x * x.transpose();
        }
        mean /= n as f64;
        let emp_cov = second / n as f64 - &mean * mean.transpose();
        assert!((mean - g.mean()).norm() < 0.02);
        assert!((emp_cov - cov).norm() < 0.05);
    }

    #[test]
    fn conditioning_matches_the_bivariate_closed_form() {
        // Correlation 0.5: x | y=1 is N(0.5, 0.75).
        let joint = FullGaussian::new(
            DVector::zeros(2),
            DMatrix::from_vec(2, 2, vec![1.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let c = condition(&joint, &[0], &[1], &DVector::from_vec(vec![1.0])).unwrap();
        assert!((c.mean()[0] - 0.5).abs() < 1e-12);
        assert!((c.cov()[(0, 0)] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bayes_identity_ties_joint_evidence_and_posterior_together() {
        // log p(z, x) = log p(x) + log p(z | x) must hold pointwise.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = LinearGaussianModel::random(&mut rng, 3, &[2, 2, 1]).unwrap();
        let (_, xs) = model.sample(&mut rng);
        for observed in [vec![0], vec![1, 2], vec![0, 1, 2]] {
            let xo: Vec<DVector<f64>> =
                observed.iter().map(|&j| xs[j].clone()).collect();
            let evidence = model.evidence(&xo, &observed).unwrap();
            let posterior = model.posterior(&xo, &observed).unwrap();
            for _ in 0..5 {
                let z = posterior.sample(&mut rng);
                let lhs = model.log_joint_density(&z, &xo, &observed).unwrap();
                let rhs = evidence + posterior.log_prob(&z).unwrap();
                assert!((lhs - rhs).abs() < 1e-8, "Bayes residual {}", lhs - rhs);
            }
        }
    }

    #[test]
    fn quadrature_confirms_precision_weighted_fusion() {
        // Product of N(0,2), N(1,1), N(3,0.5) densities renormalizes to a
        // Gaussian with precision 3.5 and mean 2.
        let (mean, var) = quadrature_product_moments(&[(0.0, 2.0), (1.0, 1.0), (3.0, 0.5)]);
        assert!((mean - 2.0).abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0 / 3.5).abs() < 1e-9, "var {var}");
    }

    #[test]
    fn quadrature_agrees_with_the_fusion_module() {
        use crate::gaussian::{poe_fuse, DiagGaussian};
        use crate::tensor::Tensor;
        let mk = |m: f64, v: f64| {
            DiagGaussian::new(Tensor::scalar(m), Tensor::scalar(v.ln())).unwrap()
        };
        let cases: &[(f64, f64, Vec<(f64, f64)>)] = &[
            (0.0, 1.0, vec![(0.8, 0.6), (-1.2, 2.5)]),
            (0.5, 3.0, vec![(2.0, 0.4)]),
            (-1.0, 0.7, vec![(0.3, 1.1), (1.5, 0.9), (-0.4, 2.2)]),
        ];
        for (pm, pv, experts) in cases {
            let fused = poe_fuse(
                &mk(*pm, *pv),
                &experts.iter().map(|&(m, v)| mk(m, v)).collect::<Vec<_>>(),
            )
            .unwrap();
            let mut factors = vec![(*pm, *pv)];
            factors.extend_from_slice(experts);
            let (mean, var) = quadrature_product_moments(&factors);
            assert!((fused.mean().item() - mean).abs() < 1e-8);
            assert!((fused.variance().item() - var).abs() < 1e-8);
        }
    }

    #[test]
    fn expected_log_density_helpers_agree_with_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let closed = expected_log_gaussian1d(0.7, 1.3, -0.2, 0.8);
        let q = g1(0.7, 1.3);
        let p = g1(-0.2, 0.8);
        let n = 200_000;
        let mc: f64 = (0..n)
            .map(|_| p.log_prob(&q.sample(&mut rng)).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((closed - mc).abs() < 0.01, "closed {closed} vs mc {mc}");
        assert!((closed - p.expected_log_prob_under(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn expected_log_joint_matches_point_mass_and_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = LinearGaussianModel::random(&mut rng, 3, &[2, 2]).unwrap();
        let (z0, xs) = model.sample(&mut rng);
        let observed = [0usize, 1];

        // A near point mass at z0 recovers the pointwise joint density.
        let spike =
            FullGaussian::new(z0.clone(), DMatrix::identity(3, 3) * 1e-10).unwrap();
        let at_spike = model.expected_log_joint(&spike, &xs, &observed).unwrap();
        let pointwise = model.log_joint_density(&z0, &xs, &observed).unwrap();
        assert!((at_spike - pointwise).abs() < 1e-6);

        // A spread distribution engages the trace terms; check against draws.
        let q = model.posterior(&xs, &observed).unwrap();
        let closed = model.expected_log_joint(&q, &xs, &observed).unwrap();
        let n = 150_000;
        let mc: f64 = (0..n)
            .map(|_| {
                model
                    .log_joint_density(&q.sample(&mut rng), &xs, &observed)
                    .unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((closed - mc).abs() < 0.02, "closed {closed} vs mc {mc}");
    }

    #[test]
    fn kl_decomposes_into_cross_entropy_minus_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = LinearGaussianModel::random(&mut rng, 2, &[2]).unwrap();
        let q = model.posterior(&[DVector::from_vec(vec![0.4, -0.3])], &[0]).unwrap();
        let p = model.prior().clone();
        let kl = q.kl_to(&p).unwrap();
        let alt = q.expected_log_prob_under(&q).unwrap() - p.expected_log_prob_under(&q).unwrap();
        assert!((kl - alt).abs() < 1e-10);
        assert!(kl >= 0.0);
    }

    #[test]
    fn hierarchical_joint_marginalizes_correctly() {
        // Two-level latent stacked as one prior: bottom given top is linear,
        // so the bottom marginal has covariance A St A' + Sb.
        let a = DMatrix::from_vec(1, 1, vec![0.8]);
        let st = DMatrix::from_vec(1, 1, vec![1.0]);
        let sb = DMatrix::from_vec(1, 1, vec![0.5]);
        let mut cov = DMatrix::zeros(2, 2);
        cov[(0, 0)] = st[(0, 0)];
        cov[(0, 1)] = (&st * a.transpose())[(0, 0)];
        cov[(1, 0)] = cov[(0, 1)];
        cov[(1, 1)] = (&a * &st * a.transpose() + &sb)[(0, 0)];
        let prior = FullGaussian::new(DVector::zeros(2), cov).unwrap();
        let bottom = marginal(&prior, &[1]).unwrap();
        assert!((bottom.cov()[(0, 0)] - (0.64 + 0.5)).abs() < 1e-12);
        // Conditioning the top on the bottom shrinks variance.
        let c = condition(&prior, &[0], &[1], &DVector::from_vec(vec![0.3])).unwrap();
        assert!(c.cov()[(0, 0)] < 1.0);
    }
}
