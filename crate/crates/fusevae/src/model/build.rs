//! Graph construction for every network in the model.
//!
//! Initialization and the forward builders both walk the same encoder plan,
//! so the parameter inventory cannot drift from the layers that consume it.

use super::{FusionMode, HierSpec, Model};
use crate::error::{Error, Result};
use crate::gaussian::{
    average_fuse_nodes, poe_fuse_nodes, sample_nodes, GaussNodes,
};
use crate::missingness::Indicator;
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use std::collections::HashMap;

/// Negative-side slope of the hidden activations. Piecewise-linear units
/// keep the per-step transcendental count down to the Gaussian heads and
/// output squashes, which dominate wall time otherwise.
const ACT_SLOPE: f64 = 0.1;

/// Caches one graph leaf per parameter so repeated use inside a pass
/// accumulates gradients on a single node.
pub struct ParamCtx<'s> {
    store: &'s ParamStore,
    cache: HashMap<String, NodeId>,
}

impl<'s> ParamCtx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        ParamCtx { store, cache: HashMap::new() }
    }

    fn node(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let pid = self
            .store
            .id_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let node = g.param_leaf(self.store.value(pid).clone(), pid);
        self.cache.insert(name.to_string(), node);
        Ok(node)
    }
}

/// One step of the encoder trunk below the stem.
#[derive(Clone, Copy, Debug)]
enum EncStep {
    /// Stride-2 convolution changing width from `cin` to `cout`.
    Down { idx: usize, cin: usize, cout: usize },
    /// Residual block tap feeding the expert for `level`.
    TapRes { level: usize, width: usize },
    /// Spatial mean then a dense layer; the tap for the global level.
    TapGlobal { width_in: usize, width_out: usize },
}

/// The shared downsample/tap schedule, finest level first.
fn encoder_steps(hier: &HierSpec, base: usize) -> Vec<EncStep> {
    let mut steps = Vec::new();
    let mut spatial = hier.side;
    let mut width = base;
    let mut down_idx = 0;
    for (level, spec) in hier.levels.iter().enumerate() {
        let target = if spec.spatial == 1 {
            (hier.side / 4).max(1)
        } else {
            spec.spatial
        };
        while spatial > target {
            let next_w = hier.conv_width(spatial / 2, base);
            steps.push(EncStep::Down { idx: down_idx, cin: width, cout: next_w });
            spatial /= 2;
            width = next_w;
            down_idx += 1;
        }
        if spec.spatial == 1 {
            steps.push(EncStep::TapGlobal { width_in: width, width_out: 2 * width });
        } else {
            steps.push(EncStep::TapRes { level, width });
        }
    }
    steps
}

/// Tap feature size per level: channels of the map, or the vector length
/// for the global level.
fn tap_widths(hier: &HierSpec, base: usize) -> Vec<usize> {
    encoder_steps(hier, base)
        .iter()
        .filter_map(|s| match s {
            EncStep::TapRes { width, .. } => Some(*width),
            EncStep::TapGlobal { width_out, .. } => Some(*width_out),
            EncStep::Down { .. } => None,
        })
        .collect()
}

/// Encoder output for one expert head: one feature node per level.
#[derive(Clone)]
pub struct EncoderTaps {
    /// Which expert head consumes these taps.
    pub head: usize,
    /// Finest level first; maps are `[w, s, s]`, the global tap is a vector.
    pub levels: Vec<NodeId>,
}

/// Prior, posterior (when conditioning) and the drawn latent at one level.
#[derive(Clone, Debug)]
pub struct LevelState {
    pub prior: GaussNodes,
    pub posterior: Option<GaussNodes>,
    pub sample: NodeId,
    /// The standard-normal draw behind `sample`; `sample` equals
    /// `mean + temperature * sigma * noise` elementwise.
    pub noise: Tensor,
}

/// A full top-down pass, finest level first.
pub struct LatentPass {
    pub levels: Vec<LevelState>,
}

impl LatentPass {
    pub fn finest_sample(&self) -> NodeId {
        self.levels[0].sample
    }
}

impl Model {
    // ---- parameter construction ----

    fn add_conv(&mut self, rng: &mut impl Rng, prefix: &str, cout: usize, cin: usize) -> Result<()> {
        let std = 1.0 / ((cin * 9) as f64).sqrt();
        let k = Tensor::randn(&[cout, cin, 3, 3], rng).map(|v| v * std);
        self.store_mut().insert(format!("{prefix}.k"), k)?;
        self.store_mut().insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))?;
        Ok(())
    }

    /// Dense or 1x1 weights are stored as `[input, output]`.
    fn add_dense(&mut self, rng: &mut impl Rng, prefix: &str, input: usize, output: usize) -> Result<()> {
        let std = 1.0 / (input as f64).sqrt();
        let w = Tensor::randn(&[input, output], rng).map(|v| v * std);
        self.store_mut().insert(format!("{prefix}.w"), w)?;
        self.store_mut().insert(format!("{prefix}.b"), Tensor::zeros(&[output]))?;
        Ok(())
    }

    /// Expert heads emit `[mean, log-variance]` stacked along the output
    /// axis. The log-variance half starts near zero (or fully zero) so the
    /// initial residual expert is close to standard normal, shifted by the
    /// configured bias.
    fn add_expert_head(&mut self, rng: &mut impl Rng, prefix: &str, input: usize, f: usize) -> Result<()> {
        let init = self.config().init;
        let std_mean = 1.0 / (input as f64).sqrt();
        let mut w = Tensor::randn(&[input, 2 * f], rng);
        {
            let data = w.data_mut();
            for row in 0..input {
                for col in 0..2 * f {
                    let scale = if init.zero_init_expert_heads {
                        0.0
                    } else if col < f {
                        std_mean
                    } else {
                        0.01
                    };
                    data[row * 2 * f + col] *= scale;
                }
            }
        }
        let mut b = Tensor::zeros(&[2 * f]);
        b.data_mut()[f..].fill(init.expert_logvar_bias);
        self.store_mut().insert(format!("{prefix}.w"), w)?;
        self.store_mut().insert(format!("{prefix}.b"), b)?;
        Ok(())
    }

    pub(crate) fn init_params(&mut self, rng: &mut impl Rng) -> Result<()> {
        let cfg = self.config().clone();
        let hier = cfg.hier.clone();
        let base = cfg.base_width;
        let depth = hier.depth();
        let taps = tap_widths(&hier, base);

        for e in 0..cfg.encoder_count() {
            let pre = format!("phi.enc{e}");
            self.add_conv(rng, &format!("{pre}.stem"), base, cfg.encoder_in_channels())?;
            for step in encoder_steps(&hier, base) {
                match step {
                    EncStep::Down { idx, cin, cout } => {
                        self.add_conv(rng, &format!("{pre}.down{idx}"), cout, cin)?
                    }
                    EncStep::TapRes { level, width } => {
                        self.add_conv(rng, &format!("{pre}.lvl{level}.res.c1"), width, width)?;
                        self.add_conv(rng, &format!("{pre}.lvl{level}.res.c2"), width, width)?;
                    }
                    EncStep::TapGlobal { width_in, width_out } => {
                        self.add_dense(rng, &format!("{pre}.head"), width_in, width_out)?
                    }
                }
            }
        }

        for e in 0..cfg.encoder_count() {
            let pre = format!("phi.exp{e}");
            self.add_expert_head(
                rng,
                &format!("{pre}.top"),
                taps[depth - 1],
                hier.levels[depth - 1].channels,
            )?;
            for l in 0..depth - 1 {
                let cw = hier.conv_width(hier.levels[l].spatial, base);
                self.add_expert_head(
                    rng,
                    &format!("{pre}.l{l}"),
                    taps[l] + cw,
                    hier.levels[l].channels,
                )?;
            }
        }

        if depth > 1 {
            let s1 = hier.levels[depth - 2].spatial;
            let cw1 = hier.conv_width(s1, base);
            self.add_dense(
                rng,
                "theta.td.ctx_top",
                hier.levels[depth - 1].channels,
                cw1 * s1 * s1,
            )?;
            for l in (0..depth - 1).rev() {
                let cw = hier.conv_width(hier.levels[l].spatial, base);
                self.add_conv(
                    rng,
                    &format!("theta.td.l{l}.prior"),
                    2 * hier.levels[l].channels,
                    cw,
                )?;
                if l > 0 {
                    let cw_next = hier.conv_width(hier.levels[l - 1].spatial, base);
                    self.add_conv(
                        rng,
                        &format!("theta.td.l{l}.ctx"),
                        cw_next,
                        cw + hier.levels[l].channels,
                    )?;
                }
            }
        }

        for m in 0..cfg.modalities {
            let pre = format!("theta.dec{m}");
            if hier.global_only() {
                self.add_dense(rng, &format!("{pre}.in"), hier.levels[0].channels, base * 16)?;
                let mut s = 4;
                let mut u = 0;
                while s < hier.side {
                    self.add_conv(rng, &format!("{pre}.up{u}"), base, base)?;
                    s *= 2;
                    u += 1;
                }
            } else {
                self.add_dense(rng, &format!("{pre}.in"), hier.levels[0].channels, base)?;
            }
            for i in 0..cfg.decoder_blocks {
                self.add_conv(rng, &format!("{pre}.res{i}.c1"), base, base)?;
                self.add_conv(rng, &format!("{pre}.res{i}.c2"), base, base)?;
            }
            self.add_dense(rng, &format!("{pre}.out"), base, 1)?;
        }

        for m in 0..cfg.modalities {
            let pre = format!("psi.disc{m}");
            self.add_conv(rng, &format!("{pre}.c1"), base, 1)?;
            self.add_conv(rng, &format!("{pre}.c2"), 2 * base, base)?;
            self.add_conv(rng, &format!("{pre}.c3"), 2 * base, 2 * base)?;
            self.add_dense(rng, &format!("{pre}.out"), 2 * base, 1)?;
        }
        Ok(())
    }

    // ---- layer application ----

    fn conv(&self, g: &mut Graph, pc: &mut ParamCtx, prefix: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let k = pc.node(g, &format!("{prefix}.k"))?;
        let b = pc.node(g, &format!("{prefix}.b"))?;
        let y = g.conv2d(x, k, stride)?;
        g.bias_chw(y, b)
    }

    /// 1x1 convolution as a matrix product over the channel axis. The
    /// transpose lands on the small weight matrix, never on the feature map.
    fn conv1x1(&self, g: &mut Graph, pc: &mut ParamCtx, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = pc.node(g, &format!("{prefix}.w"))?;
        let b = pc.node(g, &format!("{prefix}.b"))?;
        let shape = g.value(x).shape().to_vec();
        let (c, h, wd) = (shape[0], shape[1], shape[2]);
        let out = g.value(w).shape()[1];
        let flat = g.reshape(x, &[c, h * wd])?;
        let wt = g.transpose(w)?;
        let y = g.matmul(wt, flat)?;
        let ymap = g.reshape(y, &[out, h, wd])?;
        g.bias_chw(ymap, b)
    }

    fn dense(&self, g: &mut Graph, pc: &mut ParamCtx, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = pc.node(g, &format!("{prefix}.w"))?;
        let b = pc.node(g, &format!("{prefix}.b"))?;
        let n = g.value(x).numel();
        let out = g.value(w).shape()[1];
        let row = g.reshape(x, &[1, n])?;
        let y = g.matmul(row, w)?;
        let flat = g.reshape(y, &[out])?;
        g.add(flat, b)
    }

    fn resblock(&self, g: &mut Graph, pc: &mut ParamCtx, prefix: &str, x: NodeId) -> Result<NodeId> {
        let h = self.conv(g, pc, &format!("{prefix}.c1"), x, 1)?;
        let h = g.leaky_relu(h, ACT_SLOPE);
        let h = self.conv(g, pc, &format!("{prefix}.c2"), h, 1)?;
        g.add(x, h)
    }

    /// Splits a stacked `[mean, log-variance]` head output along axis 0.
    fn split_gauss(&self, g: &mut Graph, stacked: NodeId, f: usize) -> Result<GaussNodes> {
        let mean = g.slice0(stacked, 0, f)?;
        let log_var = g.slice0(stacked, f, f)?;
        Ok(GaussNodes::new(g, mean, log_var))
    }

    // ---- networks ----

    /// Leaf nodes for the observed images, `None` where missing.
    pub(crate) fn image_leaves(
        &self,
        g: &mut Graph,
        images: &[Option<Tensor>],
        subset: &Indicator,
    ) -> Result<Vec<Option<NodeId>>> {
        (0..self.config().modalities)
            .map(|j| {
                Ok(if subset.is_observed(j) {
                    let img = images[j]
                        .as_ref()
                        .ok_or_else(|| Error::contract(format!("modality {j} image missing")))?;
                    Some(g.leaf(img.clone()))
                } else {
                    None
                })
            })
            .collect()
    }

    /// Runs the encoder stack `head` over `x`, returning one tap per level.
    pub(crate) fn build_encoder(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        head: usize,
        x: NodeId,
    ) -> Result<Vec<NodeId>> {
        let pre = format!("phi.enc{head}");
        let mut h = self.conv(g, pc, &format!("{pre}.stem"), x, 1)?;
        h = g.leaky_relu(h, ACT_SLOPE);
        let mut taps = Vec::with_capacity(self.config().hier.depth());
        for step in encoder_steps(&self.config().hier, self.config().base_width) {
            match step {
                EncStep::Down { idx, .. } => {
                    h = self.conv(g, pc, &format!("{pre}.down{idx}"), h, 2)?;
                    h = g.leaky_relu(h, ACT_SLOPE);
                }
                EncStep::TapRes { level, .. } => {
                    h = self.resblock(g, pc, &format!("{pre}.lvl{level}.res"), h)?;
                    taps.push(h);
                }
                EncStep::TapGlobal { .. } => {
                    let pooled = g.chan_mean(h)?;
                    let v = self.dense(g, pc, &format!("{pre}.head"), pooled)?;
                    taps.push(g.leaky_relu(v, ACT_SLOPE));
                }
            }
        }
        Ok(taps)
    }

    /// Encodes every observed modality into expert taps. Under
    /// [`FusionMode::ConcatZeros`] the modalities are stacked into one
    /// multi-channel input with zero planes where data is missing.
    pub(crate) fn build_observed_encoders(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        leaves: &[Option<NodeId>],
        subset: &Indicator,
    ) -> Result<Vec<EncoderTaps>> {
        if subset.is_empty() {
            return Err(Error::contract("encoding needs at least one observed modality"));
        }
        match self.config().fusion {
            FusionMode::ConcatZeros => {
                let side = self.config().hier.side;
                let planes: Vec<NodeId> = (0..self.config().modalities)
                    .map(|j| {
                        leaves[j]
                            .filter(|_| subset.is_observed(j))
                            .unwrap_or_else(|| g.leaf(Tensor::zeros(&[1, side, side])))
                    })
                    .collect();
                let stacked = g.concat0(&planes)?;
                Ok(vec![EncoderTaps {
                    head: 0,
                    levels: self.build_encoder(g, pc, 0, stacked)?,
                }])
            }
            _ => subset
                .iter_observed()
                .map(|j| {
                    let x = leaves[j]
                        .ok_or_else(|| Error::contract(format!("modality {j} image missing")))?;
                    Ok(EncoderTaps {
                        head: j,
                        levels: self.build_encoder(g, pc, j, x)?,
                    })
                })
                .collect(),
        }
    }

    fn fuse(
        &self,
        g: &mut Graph,
        prior: &GaussNodes,
        experts: &[GaussNodes],
    ) -> Result<GaussNodes> {
        match self.config().fusion {
            FusionMode::AverageExperts => {
                if experts.is_empty() {
                    Ok(*prior)
                } else {
                    average_fuse_nodes(g, experts)
                }
            }
            _ => poe_fuse_nodes(g, prior, experts),
        }
    }

    fn topdown(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        taps: Option<&[EncoderTaps]>,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<LatentPass> {
        let hier = self.config().hier.clone();
        let base = self.config().base_width;
        let depth = hier.depth();
        let f_top = hier.levels[depth - 1].channels;

        let prior_top = GaussNodes::standard(g, &[f_top]);
        let q_top = match taps {
            Some(taps) => {
                let experts = taps
                    .iter()
                    .map(|t| {
                        let out = self.dense(g, pc, &format!("phi.exp{}.top", t.head), t.levels[depth - 1])?;
                        self.split_gauss(g, out, f_top)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(self.fuse(g, &prior_top, &experts)?)
            }
            None => None,
        };
        let dist_top = q_top.as_ref().unwrap_or(&prior_top);
        let noise = self.draw_noise(&[f_top], rng);
        let z_top = sample_nodes(g, dist_top, noise.clone(), temperature)?;

        let mut levels =
            vec![LevelState { prior: prior_top, posterior: q_top, sample: z_top, noise }];
        if depth == 1 {
            return Ok(LatentPass { levels });
        }

        let s1 = hier.levels[depth - 2].spatial;
        let cw1 = hier.conv_width(s1, base);
        let ctx_flat = self.dense(g, pc, "theta.td.ctx_top", z_top)?;
        let mut ctx = g.reshape(ctx_flat, &[cw1, s1, s1])?;
        ctx = g.leaky_relu(ctx, ACT_SLOPE);

        for l in (0..depth - 1).rev() {
            let spec = hier.levels[l];
            let f = spec.channels;
            let head_out = self.conv(g, pc, &format!("theta.td.l{l}.prior"), ctx, 1)?;
            let prior = self.split_gauss(g, head_out, f)?;
            let q = match taps {
                Some(taps) => {
                    let experts = taps
                        .iter()
                        .map(|t| {
                            let joined = g.concat0(&[t.levels[l], ctx])?;
                            let out =
                                self.conv1x1(g, pc, &format!("phi.exp{}.l{l}", t.head), joined)?;
                            self.split_gauss(g, out, f)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(self.fuse(g, &prior, &experts)?)
                }
                None => None,
            };
            let dist = q.as_ref().unwrap_or(&prior);
            let noise = self.draw_noise(&[f, spec.spatial, spec.spatial], rng);
            let z = sample_nodes(g, dist, noise.clone(), temperature)?;
            levels.push(LevelState { prior, posterior: q, sample: z, noise });

            if l > 0 {
                let joined = g.concat0(&[ctx, z])?;
                let mut next = self.conv(g, pc, &format!("theta.td.l{l}.ctx"), joined, 1)?;
                next = g.leaky_relu(next, ACT_SLOPE);
                let mut s = spec.spatial;
                while s < hier.levels[l - 1].spatial {
                    next = g.upsample2x(next)?;
                    s *= 2;
                }
                ctx = next;
            }
        }
        levels.reverse();
        Ok(LatentPass { levels })
    }

    /// Top-down pass conditioned on encoder taps; every level carries a
    /// fused posterior.
    pub(crate) fn build_posterior(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        taps: &[EncoderTaps],
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<LatentPass> {
        if taps.is_empty() {
            return Err(Error::contract("posterior pass needs at least one expert"));
        }
        self.topdown(g, pc, Some(taps), temperature, rng)
    }

    /// Unconditional top-down pass through the prior.
    pub(crate) fn build_prior(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<LatentPass> {
        self.topdown(g, pc, None, temperature, rng)
    }

    /// Decodes the finest latent into one modality's image in `[0, 1]`.
    pub(crate) fn build_decoder(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        modality: usize,
        z_finest: NodeId,
    ) -> Result<NodeId> {
        let pre = format!("theta.dec{modality}");
        let hier = &self.config().hier;
        let base = self.config().base_width;
        let mut h = if hier.global_only() {
            let v = self.dense(g, pc, &format!("{pre}.in"), z_finest)?;
            let mut map = g.reshape(v, &[base, 4, 4])?;
            map = g.leaky_relu(map, ACT_SLOPE);
            let mut s = 4;
            let mut u = 0;
            while s < hier.side {
                map = g.upsample2x(map)?;
                map = self.conv(g, pc, &format!("{pre}.up{u}"), map, 1)?;
                map = g.leaky_relu(map, ACT_SLOPE);
                s *= 2;
                u += 1;
            }
            map
        } else {
            let v = self.conv1x1(g, pc, &format!("{pre}.in"), z_finest)?;
            g.leaky_relu(v, ACT_SLOPE)
        };
        for i in 0..self.config().decoder_blocks {
            h = self.resblock(g, pc, &format!("{pre}.res{i}"), h)?;
        }
        let out = self.conv1x1(g, pc, &format!("{pre}.out"), h)?;
        Ok(g.sigmoid(out))
    }

    /// Critic score (a scalar node) for one image.
    pub(crate) fn build_discriminator(
        &self,
        g: &mut Graph,
        pc: &mut ParamCtx,
        modality: usize,
        image: NodeId,
    ) -> Result<NodeId> {
        let pre = format!("psi.disc{modality}");
        let mut h = self.conv(g, pc, &format!("{pre}.c1"), image, 2)?;
        h = g.leaky_relu(h, ACT_SLOPE);
        h = self.conv(g, pc, &format!("{pre}.c2"), h, 2)?;
        h = g.leaky_relu(h, ACT_SLOPE);
        h = self.conv(g, pc, &format!("{pre}.c3"), h, 2)?;
        h = g.leaky_relu(h, ACT_SLOPE);
        let pooled = g.chan_mean(h)?;
        let score = self.dense(g, pc, &format!("{pre}.out"), pooled)?;
        g.reshape(score, &[1])
    }
}
