//! Diagonal Gaussian algebra: precision-weighted fusion, KL terms, log
//! densities and reparameterized sampling.
//!
//! Everything exists twice, once over plain tensors and once over graph
//! nodes. The value level is what oracles and evaluation code consume; the
//! node level is what training differentiates through. Agreement between the
//! two is pinned by tests rather than assumed.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Log-variances are clamped to this symmetric range on construction, which
/// bounds variances away from zero and infinity for every downstream ratio.
pub const LOG_VAR_LIMIT: f64 = 20.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian stored as a mean and a log-variance of equal shape.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    mean: Tensor,
    log_var: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::shape(format!(
                "mean shape {:?} does not match log-variance shape {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        if !mean.all_finite() || !log_var.all_finite() {
            return Err(Error::numerics("non-finite Gaussian parameters"));
        }
        let log_var = log_var.map(|v| v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT));
        Ok(DiagGaussian { mean, log_var })
    }

    /// Standard normal over the given shape.
    pub fn standard(shape: &[usize]) -> Self {
        DiagGaussian {
            mean: Tensor::zeros(shape),
            log_var: Tensor::zeros(shape),
        }
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_var(&self) -> &Tensor {
        &self.log_var
    }

    pub fn variance(&self) -> Tensor {
        self.log_var.map(f64::exp)
    }

    /// Reparameterized draw with the standard deviation scaled by
    /// `temperature`; zero collapses onto the mean.
    pub fn sample(&self, temperature: f64, rng: &mut impl Rng) -> Result<Tensor> {
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::contract(format!(
                "sampling temperature must be finite and non-negative, got {temperature}"
            )));
        }
        let mut out = self.mean.clone();
        if temperature > 0.0 {
            let data = out.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *v += temperature * (0.5 * self.log_var.data()[i]).exp() * eps;
            }
        }
        Ok(out)
    }

    /// Elementwise log density at `x`.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape(format!(
                "log_prob point shape {:?} does not match Gaussian shape {:?}",
                x.shape(),
                self.mean.shape()
            )));
        }
        let n = x.numel();
        let mut out = Tensor::zeros(x.shape());
        let data = out.data_mut();
        for i in 0..n {
            let lv = self.log_var.data()[i];
            let d = x.data()[i] - self.mean.data()[i];
            data[i] = -0.5 * (LN_2PI + lv + d * d * (-lv).exp());
        }
        Ok(out)
    }

    /// Elementwise KL divergence from `self` to `p`.
    pub fn kl_to(&self, p: &DiagGaussian) -> Result<Tensor> {
        if self.mean.shape() != p.mean.shape() {
            return Err(Error::shape(format!(
                "KL between Gaussians of shapes {:?} and {:?}",
                self.mean.shape(),
                p.mean.shape()
            )));
        }
        let mut out = Tensor::zeros(self.mean.shape());
        let data = out.data_mut();
        for i in 0..self.mean.numel() {
            let lq = self.log_var.data()[i];
            let lp = p.log_var.data()[i];
            let d = self.mean.data()[i] - p.mean.data()[i];
            data[i] = 0.5 * ((lp - lq) + (lq - lp).exp() + d * d * (-lp).exp() - 1.0);
        }
        Ok(out)
    }
}

/// Precision-weighted product of the prior with zero or more experts. With no
/// experts the result is the prior itself.
pub fn poe_fuse(prior: &DiagGaussian, experts: &[DiagGaussian]) -> Result<DiagGaussian> {
    let shape = prior.mean().shape().to_vec();
    for e in experts {
        if e.mean().shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "expert shape {:?} does not match prior shape {shape:?}",
                e.mean().shape()
            )));
        }
    }
    let n = prior.mean().numel();
    let mut mean = Tensor::zeros(&shape);
    let mut log_var = Tensor::zeros(&shape);
    {
        let md = mean.data_mut();
        for i in 0..n {
            let mut lam = (-prior.log_var().data()[i]).exp();
            let mut num = lam * prior.mean().data()[i];
            for e in experts {
                let le = (-e.log_var().data()[i]).exp();
                lam += le;
                num += le * e.mean().data()[i];
            }
            md[i] = num / lam;
            log_var.data_mut()[i] = -lam.ln();
        }
    }
    DiagGaussian::new(mean, log_var)
}

/// Plain average of expert means and log-variances, a deliberately weaker
/// fusion used as an ablation baseline. The prior takes no part.
pub fn average_fuse(experts: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = experts
        .first()
        .ok_or_else(|| Error::contract("averaging fusion needs at least one expert"))?;
    let shape = first.mean().shape().to_vec();
    let n = first.mean().numel();
    let mut mean = Tensor::zeros(&shape);
    let mut log_var = Tensor::zeros(&shape);
    let inv = 1.0 / experts.len() as f64;
    for e in experts {
        if e.mean().shape() != shape.as_slice() {
            return Err(Error::shape("averaging fusion over mismatched shapes"));
        }
        for i in 0..n {
            mean.data_mut()[i] += inv * e.mean().data()[i];
            log_var.data_mut()[i] += inv * e.log_var().data()[i];
        }
    }
    DiagGaussian::new(mean, log_var)
}

/// Graph-node counterpart of [`DiagGaussian`].
#[derive(Clone, Copy, Debug)]
pub struct GaussNodes {
    pub mean: NodeId,
    pub log_var: NodeId,
}

impl GaussNodes {
    /// Wraps raw head outputs, clamping the log-variance like the value-level
    /// constructor does.
    pub fn new(g: &mut Graph, mean: NodeId, log_var_raw: NodeId) -> Self {
        let log_var = g.clamp(log_var_raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        GaussNodes { mean, log_var }
    }

    /// Standard normal as constant leaves.
    pub fn standard(g: &mut Graph, shape: &[usize]) -> Self {
        GaussNodes {
            mean: g.leaf(Tensor::zeros(shape)),
            log_var: g.leaf(Tensor::zeros(shape)),
        }
    }

    /// Copies current node values out of the graph.
    pub fn detach(&self, g: &Graph) -> Result<DiagGaussian> {
        DiagGaussian::new(g.detach(self.mean), g.detach(self.log_var))
    }
}

/// Node-level precision-weighted fusion; mirrors [`poe_fuse`].
pub fn poe_fuse_nodes(g: &mut Graph, prior: &GaussNodes, experts: &[GaussNodes]) -> Result<GaussNodes> {
    let neg_lv = g.mul_scalar(prior.log_var, -1.0);
    let mut lam = g.exp(neg_lv);
    let mut num = g.mul(lam, prior.mean)?;
    for e in experts {
        let neg_e = g.mul_scalar(e.log_var, -1.0);
        let lam_e = g.exp(neg_e);
        let contrib = g.mul(lam_e, e.mean)?;
        lam = g.add(lam, lam_e)?;
        num = g.add(num, contrib)?;
    }
    let inv = g.recip(lam);
    let mean = g.mul(num, inv)?;
    let log_lam = g.log(lam);
    let log_var = g.mul_scalar(log_lam, -1.0);
    Ok(GaussNodes { mean, log_var })
}

/// Node-level counterpart of [`average_fuse`].
pub fn average_fuse_nodes(g: &mut Graph, experts: &[GaussNodes]) -> Result<GaussNodes> {
    if experts.is_empty() {
        return Err(Error::contract("averaging fusion needs at least one expert"));
    }
    let inv = 1.0 / experts.len() as f64;
    let mut mean = experts[0].mean;
    let mut log_var = experts[0].log_var;
    for e in &experts[1..] {
        mean = g.add(mean, e.mean)?;
        log_var = g.add(log_var, e.log_var)?;
    }
    Ok(GaussNodes {
        mean: g.mul_scalar(mean, inv),
        log_var: g.mul_scalar(log_var, inv),
    })
}

/// Elementwise KL divergence node from `q` to `p`; mirrors
/// [`DiagGaussian::kl_to`].
pub fn kl_nodes(g: &mut Graph, q: &GaussNodes, p: &GaussNodes) -> Result<NodeId> {
    let lv_diff = g.sub(q.log_var, p.log_var)?;
    let ratio = g.exp(lv_diff);
    let d = g.sub(q.mean, p.mean)?;
    let d2 = g.square(d);
    let neg_lp = g.mul_scalar(p.log_var, -1.0);
    let inv_vp = g.exp(neg_lp);
    let maha = g.mul(d2, inv_vp)?;
    let mut acc = g.sub(ratio, lv_diff)?;
    acc = g.add(acc, maha)?;
    acc = g.add_scalar(acc, -1.0);
    Ok(g.mul_scalar(acc, 0.5))
}

/// Reparameterized draw as a node: mean plus `temperature * sigma * noise`,
/// with the noise supplied by the caller as plain data.
pub fn sample_nodes(g: &mut Graph, q: &GaussNodes, noise: Tensor, temperature: f64) -> Result<NodeId> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::contract(format!(
            "sampling temperature must be finite and non-negative, got {temperature}"
        )));
    }
    if noise.shape() != g.value(q.mean).shape() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match Gaussian shape {:?}",
            noise.shape(),
            g.value(q.mean).shape()
        )));
    }
    if temperature == 0.0 {
        return Ok(q.mean);
    }
    let half_lv = g.mul_scalar(q.log_var, 0.5);
    let sigma = g.exp(half_lv);
    let eps = g.leaf(noise);
    let scaled = g.mul(sigma, eps)?;
    let step = g.mul_scalar(scaled, temperature);
    g.add(q.mean, step)
}

/// Total log density of `q` at its own reparameterized sample
/// `mean + temperature * sigma * noise`. The quadratic term collapses to
/// `temperature^2 * noise^2`, a constant, so the node depends on the
/// log-variance alone and the mean receives exactly zero gradient. This is
/// the total derivative of the composition, not an approximation.
pub fn log_prob_at_own_sample_nodes(
    g: &mut Graph,
    q: &GaussNodes,
    noise: &Tensor,
    temperature: f64,
) -> Result<NodeId> {
    if noise.shape() != g.value(q.log_var).shape() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match Gaussian shape {:?}",
            noise.shape(),
            g.value(q.log_var).shape()
        )));
    }
    let t2 = temperature * temperature;
    let offset = g.leaf(noise.map(|e| t2 * e * e + LN_2PI));
    let per_elem = g.add(q.log_var, offset)?;
    let total = g.sum(per_elem);
    Ok(g.mul_scalar(total, -0.5))
}

/// Elementwise log density node at `x`; mirrors [`DiagGaussian::log_prob`].
pub fn log_prob_nodes(g: &mut Graph, q: &GaussNodes, x: NodeId) -> Result<NodeId> {
    let d = g.sub(x, q.mean)?;
    let d2 = g.square(d);
    let neg_lv = g.mul_scalar(q.log_var, -1.0);
    let inv_v = g.exp(neg_lv);
    let maha = g.mul(d2, inv_v)?;
    let mut acc = g.add(maha, q.log_var)?;
    acc = g.add_scalar(acc, LN_2PI);
    Ok(g.mul_scalar(acc, -0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::new(Tensor::scalar(mean), Tensor::scalar(var.ln())).unwrap()
    }

    #[test]
    fn kl_unit_case_matches_closed_form() {
        // KL(N(1,2) || N(0,1)) = 0.5 * (2 + 1 - 1 - ln 2).
        let q = g1(1.0, 2.0);
        let p = g1(0.0, 1.0);
        let kl = q.kl_to(&p).unwrap().item();
        assert!((kl - 0.653_426_409_720_027_3).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let p = DiagGaussian::standard(&[1]);
        let lp = p.log_prob(&Tensor::scalar(0.0)).unwrap().item();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn wide_normal_log_density_at_origin() {
        // log N(0; 0, 2) = -0.5 * (ln 2pi + ln 2).
        let p = g1(0.0, 2.0);
        let lp = p.log_prob(&Tensor::scalar(0.0)).unwrap().item();
        assert!((lp + 1.265_512_123_484_645_4).abs() < 1e-12);
    }

    #[test]
    fn fusion_matches_precision_weighted_combination() {
        // Prior N(0,2) with experts N(1,1) and N(3,0.5): precisions
        // 0.5 + 1 + 2 = 3.5, weighted mean (0 + 1 + 6)/3.5 = 2.
        let fused = poe_fuse(&g1(0.0, 2.0), &[g1(1.0, 1.0), g1(3.0, 0.5)]).unwrap();
        assert!((fused.mean().item() - 2.0).abs() < 1e-12);
        assert!((fused.variance().item() - 1.0 / 3.5).abs() < 1e-12);
    }

    #[test]
    fn fusion_with_no_experts_returns_the_prior() {
        let prior = g1(0.7, 1.3);
        let fused = poe_fuse(&prior, &[]).unwrap();
        assert!((fused.mean().item() - 0.7).abs() < 1e-12);
        assert!((fused.variance().item() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn log_variance_is_clamped_on_construction() {
        let d = DiagGaussian::new(Tensor::scalar(0.0), Tensor::scalar(31.0)).unwrap();
        assert_eq!(d.log_var().item(), LOG_VAR_LIMIT);
        let d = DiagGaussian::new(Tensor::scalar(0.0), Tensor::scalar(-31.0)).unwrap();
        assert_eq!(d.log_var().item(), -LOG_VAR_LIMIT);
    }

    #[test]
    fn zero_temperature_sampling_returns_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = g1(2.5, 4.0);
        let x = d.sample(0.0, &mut rng).unwrap();
        assert_eq!(x.item(), 2.5);
        assert!(d.sample(-0.1, &mut rng).is_err());
    }

    #[test]
    fn temperature_scales_sample_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = g1(0.0, 1.0);
        let spread = |t: f64, rng: &mut ChaCha8Rng| -> f64 {
            let n = 4000;
            let mut acc = 0.0;
            for _ in 0..n {
                let v = d.sample(t, rng).unwrap().item();
                acc += v * v;
            }
            (acc / n as f64).sqrt()
        };
        let s_half = spread(0.5, &mut rng);
        let s_one = spread(1.0, &mut rng);
        assert!((s_half - 0.5).abs() < 0.05, "spread at 0.5: {s_half}");
        assert!((s_one - 1.0).abs() < 0.05, "spread at 1.0: {s_one}");
    }

    fn random_pair(seed: u64, n: usize) -> (DiagGaussian, DiagGaussian) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            DiagGaussian::new(
                Tensor::randn(&[n], rng),
                Tensor::randn(&[n], rng).map(|v| 0.8 * v),
            )
            .unwrap()
        };
        (mk(&mut rng), mk(&mut rng))
    }

    #[test]
    fn node_level_kl_agrees_with_value_level() {
        let (q, p) = random_pair(11, 9);
        let want = q.kl_to(&p).unwrap();
        let mut g = Graph::new();
        let qn = GaussNodes {
            mean: g.leaf(q.mean().clone()),
            log_var: g.leaf(q.log_var().clone()),
        };
        let pn = GaussNodes {
            mean: g.leaf(p.mean().clone()),
            log_var: g.leaf(p.log_var().clone()),
        };
        let kl = kl_nodes(&mut g, &qn, &pn).unwrap();
        for (a, b) in g.value(kl).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn node_level_log_prob_agrees_with_value_level() {
        let (q, p) = random_pair(12, 9);
        let x = p.mean().clone();
        let want = q.log_prob(&x).unwrap();
        let mut g = Graph::new();
        let qn = GaussNodes {
            mean: g.leaf(q.mean().clone()),
            log_var: g.leaf(q.log_var().clone()),
        };
        let xn = g.leaf(x);
        let lp = log_prob_nodes(&mut g, &qn, xn).unwrap();
        for (a, b) in g.value(lp).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn node_level_fusion_agrees_with_value_level() {
        let (prior, e1) = random_pair(13, 9);
        let (e2, _) = random_pair(14, 9);
        let want = poe_fuse(&prior, &[e1.clone(), e2.clone()]).unwrap();
        let mut g = Graph::new();
        let mk = |g: &mut Graph, d: &DiagGaussian| GaussNodes {
            mean: g.leaf(d.mean().clone()),
            log_var: g.leaf(d.log_var().clone()),
        };
        let pn = mk(&mut g, &prior);
        let e1n = mk(&mut g, &e1);
        let e2n = mk(&mut g, &e2);
        let fused = poe_fuse_nodes(&mut g, &pn, &[e1n, e2n]).unwrap();
        for (a, b) in g.value(fused.mean).data().iter().zip(want.mean().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(fused.log_var).data().iter().zip(want.log_var().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn node_level_sampling_matches_closed_form_and_is_reparameterized() {
        let mut g = Graph::new();
        let mean = g.var_leaf(Tensor::scalar(1.0));
        let log_var = g.var_leaf(Tensor::scalar(2.0_f64.ln()));
        let q = GaussNodes { mean, log_var };
        let eps = 0.7;
        let t = 0.5;
        let x = sample_nodes(&mut g, &q, Tensor::scalar(eps), t).unwrap();
        let want = 1.0 + t * 2.0_f64.sqrt() * eps;
        assert!((g.value(x).item() - want).abs() < 1e-12);

        // Gradients flow back through the draw: d x / d mean = 1 and
        // d x / d log_var = 0.5 * t * sigma * eps.
        let grads = g.backward(x).unwrap();
        let d_mean = g.value(grads.get(mean).unwrap()).item();
        let d_lv = g.value(grads.get(log_var).unwrap()).item();
        assert!((d_mean - 1.0).abs() < 1e-12);
        assert!((d_lv - 0.5 * t * 2.0_f64.sqrt() * eps).abs() < 1e-12);
    }

    #[test]
    fn averaging_fusion_is_a_plain_mean() {
        let fused = average_fuse(&[g1(1.0, 1.0), g1(3.0, 4.0)]).unwrap();
        assert!((fused.mean().item() - 2.0).abs() < 1e-12);
        assert!((fused.log_var().item() - 0.5 * 4.0_f64.ln()).abs() < 1e-12);
        assert!(average_fuse(&[]).is_err());
    }

    proptest! {
        #[test]
        fn fusion_is_order_invariant(
            means in prop::collection::vec(-3.0_f64..3.0, 3),
            lvs in prop::collection::vec(-2.0_f64..2.0, 3),
        ) {
            let prior = g1(0.0, 1.0);
            let e: Vec<DiagGaussian> =
                means.iter().zip(&lvs).map(|(&m, &lv)| g1(m, lv.exp())).collect();
            let a = poe_fuse(&prior, &[e[0].clone(), e[1].clone(), e[2].clone()]).unwrap();
            let b = poe_fuse(&prior, &[e[2].clone(), e[0].clone(), e[1].clone()]).unwrap();
            prop_assert!((a.mean().item() - b.mean().item()).abs() < 1e-10);
            prop_assert!((a.log_var().item() - b.log_var().item()).abs() < 1e-10);
        }

        #[test]
        fn fused_variance_never_exceeds_any_component(
            means in prop::collection::vec(-3.0_f64..3.0, 2),
            lvs in prop::collection::vec(-2.0_f64..2.0, 2),
        ) {
            let prior = g1(0.0, 1.5);
            let e: Vec<DiagGaussian> =
                means.iter().zip(&lvs).map(|(&m, &lv)| g1(m, lv.exp())).collect();
            let fused = poe_fuse(&prior, &e).unwrap();
            let fv = fused.variance().item();
            prop_assert!(fv <= prior.variance().item() + 1e-12);
            for c in &e {
                prop_assert!(fv <= c.variance().item() + 1e-12);
            }
        }

        #[test]
        fn kl_is_non_negative_and_zero_on_self(
            m in -3.0_f64..3.0,
            lv in -2.0_f64..2.0,
            m2 in -3.0_f64..3.0,
            lv2 in -2.0_f64..2.0,
        ) {
            let q = g1(m, lv.exp());
            let p = g1(m2, lv2.exp());
            prop_assert!(q.kl_to(&p).unwrap().item() >= -1e-12);
            prop_assert!(q.kl_to(&q).unwrap().item().abs() < 1e-12);
        }
    }
}
