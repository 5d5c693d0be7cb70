//! Training objective and loop.
//!
//! Each sample contributes a Monte Carlo estimate of its mixture bound: a few
//! posterior components are drawn from the mixture policy, every component is
//! scored against its own density, and reconstruction runs over the
//! modalities the sample actually has. A per-modality critic with a gradient
//! penalty supplies an adversarial term for the modalities it lacks, fed by a
//! memory bank of recent real images so that even batches missing a modality
//! entirely can train its critic.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{kl_nodes, log_prob_at_own_sample_nodes, log_prob_nodes};
use crate::missingness::{Indicator, MixturePolicy};
use crate::model::{CheckpointMeta, EncoderTaps, FusionMode, Model, ParamCtx};
use crate::synthdata::Sample;
use crate::tensor::{AdamConfig, AdamState, GradBuffer, Graph, NodeId, Tensor};

/// How the latent divergence term is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Log density ratio at the sampled latent. Unbiased for the bound and
    /// the default.
    #[default]
    SampleRatio,
    /// Closed-form divergence between the fused posterior and the prior at
    /// every level.
    Analytic,
}

/// Optimization settings. The defaults are the desk-scale values used by the
/// CLI; tests shrink them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Posterior components drawn per sample and step.
    pub mixture_draws: usize,
    pub kl_weight: f64,
    pub gan_weight: f64,
    /// Fraction of total steps after which the adversarial term turns on.
    /// The critic itself trains from the first step so it is ready by then.
    pub gan_start_fraction: f64,
    pub lr: f64,
    pub disc_lr: f64,
    /// Coefficient on the critic's unit-gradient penalty.
    pub grad_penalty: f64,
    /// Interpolation points per modality for that penalty.
    pub gp_pairs: usize,
    /// Real images retained per modality for critic updates.
    pub bank_capacity: usize,
    pub policy: MixturePolicy,
    pub kl_mode: KlMode,
    /// Sampling temperature for posterior draws during training.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            mixture_draws: 3,
            kl_weight: 1e-3,
            gan_weight: 0.025,
            gan_start_fraction: 0.8,
            lr: 1e-3,
            disc_lr: 1e-4,
            grad_penalty: 10.0,
            gp_pairs: 8,
            bank_capacity: 64,
            policy: MixturePolicy::Reference { reference_index: 0 },
            kl_mode: KlMode::SampleRatio,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mixture_draws == 0 {
            return Err(Error::config(
                "epochs, batch size and mixture draws must be positive",
            ));
        }
        for (name, v) in [
            ("kl_weight", self.kl_weight),
            ("gan_weight", self.gan_weight),
            ("grad_penalty", self.grad_penalty),
            ("temperature", self.temperature),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.lr > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gan_start_fraction) {
            return Err(Error::config(format!(
                "gan_start_fraction must lie in [0, 1], got {}",
                self.gan_start_fraction
            )));
        }
        if self.bank_capacity == 0 {
            return Err(Error::config("bank capacity must be positive"));
        }
        Ok(())
    }
}

/// Scalar telemetry for one optimizer step. `loss` is the mean per-draw
/// objective; `recon`, `kl` and `adversarial` are its unweighted parts;
/// `critic` sums the per-modality critic losses. `wall_ms` is the only
/// non-deterministic field and stays out of the CSV view, so two runs with
/// the same seed produce bit-identical logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub progress: f64,
    pub gan_active: bool,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub adversarial: f64,
    pub critic: f64,
    pub wall_ms: u128,
}

impl StepReport {
    pub const CSV_HEADER: &'static str =
        "step,epoch,progress,gan_active,loss,recon,kl,adversarial,critic";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.step,
            self.epoch,
            self.progress,
            self.gan_active as u8,
            self.loss,
            self.recon,
            self.kl,
            self.adversarial,
            self.critic,
        )
    }
}

/// Ring buffer of recent real images per modality: the critic's supply of
/// positives for modalities absent from the current batch.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    slots: Vec<Vec<Tensor>>,
    cursors: Vec<usize>,
}

impl MemoryBank {
    pub fn new(modalities: usize, capacity: usize) -> Result<Self> {
        if modalities == 0 || capacity == 0 {
            return Err(Error::contract("memory bank needs modalities and capacity"));
        }
        Ok(MemoryBank {
            capacity,
            slots: vec![Vec::new(); modalities],
            cursors: vec![0; modalities],
        })
    }

    pub fn modalities(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self, modality: usize) -> usize {
        self.slots[modality].len()
    }

    /// Stores one real image, overwriting the oldest once full.
    pub fn push(&mut self, modality: usize, image: Tensor) {
        let slot = &mut self.slots[modality];
        let at = self.cursors[modality];
        if slot.len() < self.capacity {
            slot.push(image);
        } else {
            slot[at] = image;
        }
        self.cursors[modality] = (at + 1) % self.capacity;
    }

    /// A uniformly drawn stored image, if any.
    pub fn draw(&self, modality: usize, rng: &mut impl Rng) -> Option<&Tensor> {
        let slot = &self.slots[modality];
        if slot.is_empty() {
            None
        } else {
            Some(&slot[rng.gen_range(0..slot.len())])
        }
    }
}

/// Inputs for one sample's objective graph. `draws` lists the posterior
/// components to score, each a non-empty subset of `observed`.
pub struct ObjectiveSpec<'a> {
    pub images: &'a [Option<Tensor>],
    pub observed: &'a Indicator,
    pub draws: &'a [Indicator],
    pub kl_weight: f64,
    /// Zero keeps the synthesized modalities out of the generator graph.
    pub gan_weight: f64,
    pub kl_mode: KlMode,
    pub temperature: f64,
}

/// One sample's objective, embedded in a graph, plus detached values for
/// reporting and for feeding the critic.
pub struct SampleObjective {
    /// Scalar node: sum over draws of `recon + kl_weight * kl +
    /// gan_weight * adversarial`.
    pub root: NodeId,
    /// Per-draw means of the detached terms.
    pub recon: f64,
    pub kl: f64,
    pub adversarial: f64,
    /// Synthesized images for the modalities outside `observed`, one set per
    /// draw. Identical whether or not the adversarial term was in the graph.
    pub fakes: Vec<(usize, Tensor)>,
}

/// Builds the full generator-side objective for one sample into `g`.
///
/// Encoders run once per modality (or once per distinct subset under
/// [`FusionMode::ConcatZeros`]) and are shared across draws, so one backward
/// sweep on `root` covers every term.
pub fn build_sample_objective(
    model: &Model,
    g: &mut Graph,
    pc: &mut ParamCtx,
    spec: &ObjectiveSpec,
    rng: &mut impl Rng,
) -> Result<SampleObjective> {
    let cfg = model.config();
    let side = cfg.hier.side;
    if spec.observed.len() != cfg.modalities || spec.images.len() != cfg.modalities {
        return Err(Error::contract(format!(
            "expected {} modalities, got indicator {} over {} images",
            cfg.modalities,
            spec.observed,
            spec.images.len()
        )));
    }
    if spec.draws.is_empty() {
        return Err(Error::contract("objective needs at least one posterior draw"));
    }
    for d in spec.draws {
        if d.is_empty() || !d.is_subset_of(spec.observed) {
            return Err(Error::contract(format!(
                "draw {d} is not a non-empty subset of {}",
                spec.observed
            )));
        }
    }
    for (name, v) in [("kl weight", spec.kl_weight), ("gan weight", spec.gan_weight)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::contract(format!("{name} must be finite and non-negative")));
        }
    }
    for j in spec.observed.iter_observed() {
        match &spec.images[j] {
            Some(img) if img.shape() == [1, side, side] => {}
            Some(img) => {
                return Err(Error::shape(format!(
                    "modality {j} image has shape {:?}, expected [1, {side}, {side}]",
                    img.shape()
                )))
            }
            None => {
                return Err(Error::contract(format!(
                    "modality {j} is marked observed but has no image"
                )))
            }
        }
    }

    let leaves = model.image_leaves(g, spec.images, spec.observed)?;
    // Per-modality taps are reusable across draws; the stacked-input mode
    // needs one encoder pass per distinct subset instead.
    let shared: Option<Vec<EncoderTaps>> = match cfg.fusion {
        FusionMode::ConcatZeros => None,
        _ => Some(model.build_observed_encoders(g, pc, &leaves, spec.observed)?),
    };
    let mut stacked_cache: Vec<(Indicator, Vec<EncoderTaps>)> = Vec::new();

    let synth_targets: Vec<usize> =
        (0..cfg.modalities).filter(|&j| !spec.observed.is_observed(j)).collect();

    let mut root: Option<NodeId> = None;
    let mut recon_total = 0.0;
    let mut kl_total = 0.0;
    let mut adv_total = 0.0;
    let mut fakes: Vec<(usize, Tensor)> = Vec::new();
    let mut deferred: Vec<Tensor> = Vec::new();

    for draw in spec.draws {
        let taps: Vec<EncoderTaps> = match &shared {
            Some(all) => {
                all.iter().filter(|t| draw.is_observed(t.head)).cloned().collect()
            }
            None => match stacked_cache.iter().find(|(d, _)| d == draw) {
                Some((_, taps)) => taps.clone(),
                None => {
                    let taps = model.build_observed_encoders(g, pc, &leaves, draw)?;
                    stacked_cache.push((*draw, taps.clone()));
                    taps
                }
            },
        };
        let pass = model.build_posterior(g, pc, &taps, spec.temperature, rng)?;
        let z = pass.finest_sample();

        let mut recon: Option<NodeId> = None;
        for j in spec.observed.iter_observed() {
            let dec = model.build_decoder(g, pc, j, z)?;
            let x = leaves[j].expect("observed leaves exist");
            let diff = g.sub(dec, x)?;
            let sq = g.square(diff);
            let s = g.sum(sq);
            recon = Some(match recon {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let recon = recon.expect("observed set is non-empty");

        let mut kl: Option<NodeId> = None;
        for lvl in &pass.levels {
            let q = lvl.posterior.expect("posterior pass carries q at every level");
            let term = match spec.kl_mode {
                KlMode::Analytic => {
                    let k = kl_nodes(g, &q, &lvl.prior)?;
                    g.sum(k)
                }
                KlMode::SampleRatio => {
                    let lq =
                        log_prob_at_own_sample_nodes(g, &q, &lvl.noise, spec.temperature)?;
                    let lp = log_prob_nodes(g, &lvl.prior, lvl.sample)?;
                    let lp_total = g.sum(lp);
                    g.sub(lq, lp_total)?
                }
            };
            kl = Some(match kl {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let kl = kl.expect("hierarchy has at least one level");

        let weighted_kl = g.mul_scalar(kl, spec.kl_weight);
        let mut draw_root = g.add(recon, weighted_kl)?;

        if spec.gan_weight > 0.0 {
            let mut adv: Option<NodeId> = None;
            for &j in &synth_targets {
                let dec = model.build_decoder(g, pc, j, z)?;
                fakes.push((j, g.detach(dec)));
                let score = model.build_discriminator(g, pc, j, dec)?;
                adv = Some(match adv {
                    None => score,
                    Some(acc) => g.add(acc, score)?,
                });
            }
            if let Some(adv) = adv {
                adv_total += g.value(adv).item();
                let weighted = g.mul_scalar(adv, spec.gan_weight);
                draw_root = g.add(draw_root, weighted)?;
            }
        } else if !synth_targets.is_empty() {
            deferred.push(g.detach(z));
        }

        recon_total += g.value(recon).item();
        kl_total += g.value(kl).item();
        root = Some(match root {
            None => draw_root,
            Some(acc) => g.add(acc, draw_root)?,
        });
    }

    // Decoding from the detached latent reproduces the in-graph decode bit
    // for bit; deferring it just keeps the generator graph lean while the
    // adversarial weight is zero.
    for z in &deferred {
        for &j in &synth_targets {
            fakes.push((j, decode_from_latent(model, z, j)?));
        }
    }

    let n = spec.draws.len() as f64;
    Ok(SampleObjective {
        root: root.expect("at least one draw"),
        recon: recon_total / n,
        kl: kl_total / n,
        adversarial: adv_total / n,
        fakes,
    })
}

fn decode_from_latent(model: &Model, z: &Tensor, modality: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut pc = ParamCtx::new(model.store());
    let zn = g.leaf(z.clone());
    let img = model.build_decoder(&mut g, &mut pc, modality, zn)?;
    Ok(g.detach(img))
}

/// One interpolation point for the critic penalty: indices into the real and
/// fake pools plus the blend coefficient toward the real end.
#[derive(Clone, Copy, Debug)]
pub struct Interpolant {
    pub real: usize,
    pub fake: usize,
    pub mix: f64,
}

/// Critic loss for one modality: mean real score minus mean fake score, plus
/// a penalty pushing the score's input gradient toward unit norm at blended
/// points. The penalty differentiates the emitted gradient nodes, so the
/// final backward sweep yields exact second-order critic gradients.
pub fn build_critic_objective(
    model: &Model,
    g: &mut Graph,
    pc: &mut ParamCtx,
    modality: usize,
    reals: &[Tensor],
    fakes: &[Tensor],
    pairs: &[Interpolant],
    penalty_weight: f64,
) -> Result<NodeId> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::contract("critic update needs both real and fake images"));
    }
    let side_sum = |g: &mut Graph, pc: &mut ParamCtx, pool: &[Tensor]| -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for img in pool {
            let x = g.leaf(img.clone());
            let score = model.build_discriminator(g, pc, modality, x)?;
            acc = Some(match acc {
                None => score,
                Some(prev) => g.add(prev, score)?,
            });
        }
        Ok(acc.expect("pool checked non-empty"))
    };
    let real_sum = side_sum(g, pc, reals)?;
    let fake_sum = side_sum(g, pc, fakes)?;
    let real_mean = g.mul_scalar(real_sum, 1.0 / reals.len() as f64);
    let fake_mean = g.mul_scalar(fake_sum, 1.0 / fakes.len() as f64);
    let mut loss = g.sub(real_mean, fake_mean)?;

    if penalty_weight > 0.0 && !pairs.is_empty() {
        let mut pen_sum: Option<NodeId> = None;
        for p in pairs {
            let (r, f) = (
                reals.get(p.real).ok_or_else(|| Error::contract("real index out of range"))?,
                fakes.get(p.fake).ok_or_else(|| Error::contract("fake index out of range"))?,
            );
            if !(0.0..=1.0).contains(&p.mix) {
                return Err(Error::contract(format!("blend coefficient {} outside [0, 1]", p.mix)));
            }
            if r.shape() != f.shape() {
                return Err(Error::shape("blend endpoints have mismatched shapes"));
            }
            let blend: Vec<f64> = r
                .data()
                .iter()
                .zip(f.data())
                .map(|(&a, &b)| p.mix * a + (1.0 - p.mix) * b)
                .collect();
            let x = g.var_leaf(Tensor::new(r.shape().to_vec(), blend)?);
            let score = model.build_discriminator(g, pc, modality, x)?;
            let grads = g.backward(score)?;
            let gx = grads
                .get(x)
                .ok_or_else(|| Error::numerics("no gradient reached the critic input"))?;
            let sq = g.square(gx);
            let ss = g.sum(sq);
            // The offset keeps the norm differentiable at zero gradient.
            let ss = g.add_scalar(ss, 1e-12);
            let norm = g.sqrt(ss);
            let centered = g.add_scalar(norm, -1.0);
            let pen = g.square(centered);
            pen_sum = Some(match pen_sum {
                None => pen,
                Some(prev) => g.add(prev, pen)?,
            });
        }
        let pen_mean =
            g.mul_scalar(pen_sum.expect("pairs checked non-empty"), penalty_weight / pairs.len() as f64);
        loss = g.add(loss, pen_mean)?;
    }
    Ok(loss)
}

/// Interleaved generator and critic optimization over in-memory samples.
/// Generator updates touch every parameter outside the critic namespace;
/// critic updates touch only it.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    gen_opt: AdamState,
    disc_opt: AdamState,
    bank: MemoryBank,
    rng: ChaCha8Rng,
    steps_done: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen_opt = AdamState::new(model.store());
        let disc_opt = AdamState::new(model.store());
        let bank = MemoryBank::new(model.config().modalities, cfg.bank_capacity)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { model, cfg, gen_opt, disc_opt, bank, rng, steps_done: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// One interleaved update. `progress` in `[0, 1]` gates the adversarial
    /// term against `gan_start_fraction`.
    pub fn train_step(
        &mut self,
        batch: &[&Sample],
        epoch: usize,
        progress: f64,
    ) -> Result<StepReport> {
        let start = Instant::now();
        if batch.is_empty() {
            return Err(Error::contract("training batch is empty"));
        }
        let modalities = self.model.config().modalities;
        let gan_active = self.cfg.gan_weight > 0.0 && progress >= self.cfg.gan_start_fraction;
        let gan_weight = if gan_active { self.cfg.gan_weight } else { 0.0 };

        let mut gen_grads = GradBuffer::zeros_like(self.model.store());
        let mut fakes: Vec<Vec<Tensor>> = vec![Vec::new(); modalities];
        let scale = 1.0 / (batch.len() * self.cfg.mixture_draws) as f64;
        let batch_norm = 1.0 / batch.len() as f64;
        let (mut loss_v, mut recon_v, mut kl_v, mut adv_v) = (0.0, 0.0, 0.0, 0.0);

        for sample in batch {
            let mut draws = Vec::with_capacity(self.cfg.mixture_draws);
            for _ in 0..self.cfg.mixture_draws {
                draws.push(self.cfg.policy.sample_component(&sample.indicator, &mut self.rng)?);
            }
            let spec = ObjectiveSpec {
                images: &sample.images,
                observed: &sample.indicator,
                draws: &draws,
                kl_weight: self.cfg.kl_weight,
                gan_weight,
                kl_mode: self.cfg.kl_mode,
                temperature: self.cfg.temperature,
            };
            let mut g = Graph::new();
            let mut pc = ParamCtx::new(self.model.store());
            let out = build_sample_objective(&self.model, &mut g, &mut pc, &spec, &mut self.rng)?;
            let total = g.value(out.root).item();
            if !total.is_finite() {
                return Err(Error::numerics(format!(
                    "non-finite objective for sample {} at step {}",
                    sample.id, self.steps_done
                )));
            }
            loss_v += total * scale;
            recon_v += out.recon * batch_norm;
            kl_v += out.kl * batch_norm;
            adv_v += out.adversarial * batch_norm;
            let grads = g.backward(out.root)?;
            for (pid, grad) in g.param_grads(&grads) {
                gen_grads.accumulate(pid, grad.data(), scale)?;
            }
            for (j, img) in out.fakes {
                fakes[j].push(img);
            }
        }
        self.gen_opt.step(
            self.model.store_mut(),
            &gen_grads,
            &AdamConfig::with_lr(self.cfg.lr),
            |name| !name.starts_with("psi."),
        )?;

        // Bank refresh precedes the critic so its very first update has
        // positives to score.
        for sample in batch {
            for j in sample.indicator.iter_observed() {
                let img = sample.images[j]
                    .as_ref()
                    .ok_or_else(|| Error::contract(format!("modality {j} image missing")))?;
                self.bank.push(j, img.clone());
            }
        }

        let mut critic_v = 0.0;
        let mut critic_ran = false;
        let mut disc_grads = GradBuffer::zeros_like(self.model.store());
        for (j, pool) in fakes.iter().enumerate() {
            if pool.is_empty() || self.bank.len(j) == 0 {
                continue;
            }
            let mut reals = Vec::with_capacity(pool.len());
            for _ in 0..pool.len() {
                let img = self.bank.draw(j, &mut self.rng).expect("bank checked non-empty");
                reals.push(img.clone());
            }
            let mut pairs = Vec::with_capacity(self.cfg.gp_pairs);
            for _ in 0..self.cfg.gp_pairs {
                pairs.push(Interpolant {
                    real: self.rng.gen_range(0..reals.len()),
                    fake: self.rng.gen_range(0..pool.len()),
                    mix: self.rng.gen::<f64>(),
                });
            }
            let mut g = Graph::new();
            let mut pc = ParamCtx::new(self.model.store());
            let root = build_critic_objective(
                &self.model,
                &mut g,
                &mut pc,
                j,
                &reals,
                pool,
                &pairs,
                self.cfg.grad_penalty,
            )?;
            let v = g.value(root).item();
            if !v.is_finite() {
                return Err(Error::numerics(format!(
                    "non-finite critic loss for modality {j} at step {}",
                    self.steps_done
                )));
            }
            critic_v += v;
            let grads = g.backward(root)?;
            for (pid, grad) in g.param_grads(&grads) {
                disc_grads.accumulate(pid, grad.data(), 1.0)?;
            }
            critic_ran = true;
        }
        if critic_ran {
            self.disc_opt.step(
                self.model.store_mut(),
                &disc_grads,
                &AdamConfig::with_lr(self.cfg.disc_lr),
                |name| name.starts_with("psi."),
            )?;
        }

        self.steps_done += 1;
        Ok(StepReport {
            step: self.steps_done,
            epoch,
            progress,
            gan_active,
            loss: loss_v,
            recon: recon_v,
            kl: kl_v,
            adversarial: adv_v,
            critic: critic_v,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Steps the configured number of epochs will take over `samples`; the
    /// denominator for training progress.
    pub fn total_steps(&self, sample_count: usize) -> usize {
        (self.cfg.epochs * sample_count.div_ceil(self.cfg.batch_size)).max(1)
    }

    /// One shuffled minibatch epoch. `total_steps` fixes the progress
    /// denominator so multi-epoch and resumed schedules agree on when the
    /// adversarial term activates.
    pub fn run_epoch(
        &mut self,
        samples: &[Sample],
        epoch: usize,
        total_steps: usize,
        on_step: &mut impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::contract("training needs at least one sample"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.cfg.batch_size) {
            let progress = self.steps_done as f64 / total_steps.max(1) as f64;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let report = self.train_step(&batch, epoch, progress)?;
            on_step(&report)?;
        }
        Ok(())
    }

    /// Shuffled minibatch epochs over `samples`, invoking `on_step` after
    /// every update.
    pub fn run(
        &mut self,
        samples: &[Sample],
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        let total = self.total_steps(samples.len());
        for epoch in 0..self.cfg.epochs {
            self.run_epoch(samples, epoch, total, &mut on_step)?;
        }
        Ok(())
    }

    /// Writes the model checkpoint plus the optimizer moments and RNG
    /// position needed to resume the run exactly.
    pub fn save_checkpoint(&self, dir: &Path, epoch: u64) -> Result<()> {
        self.model
            .save(dir, CheckpointMeta { step: self.steps_done as u64, epoch })?;
        let (gen_t, gen_m, gen_v) = self.gen_opt.snapshot();
        let (disc_t, disc_m, disc_v) = self.disc_opt.snapshot();
        let mut blob = Vec::with_capacity((gen_m.len() + disc_m.len()) * 16);
        for part in [&gen_m, &gen_v, &disc_m, &disc_v] {
            for &x in part.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(dir.join(OPTIM_FILE), blob)?;
        let pos = self.rng.get_word_pos();
        let record = TrainerRecord {
            steps_done: self.steps_done as u64,
            gen_t,
            disc_t,
            rng_word_lo: pos as u64,
            rng_word_hi: (pos >> 64) as u64,
        };
        let json =
            serde_json::to_string_pretty(&record).map_err(|e| Error::parse(e.to_string()))?;
        std::fs::write(dir.join(TRAINER_FILE), json)?;
        Ok(())
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output. Step
    /// numbering, optimizer moments and the sampling stream continue where
    /// they stopped; the memory bank restarts empty and refills from the
    /// first resumed batch.
    pub fn resume(dir: &Path, cfg: TrainConfig) -> Result<(Self, CheckpointMeta)> {
        cfg.validate()?;
        let (model, meta) = Model::load(dir)?;
        let json = std::fs::read_to_string(dir.join(TRAINER_FILE))?;
        let record: TrainerRecord = serde_json::from_str(&json)
            .map_err(|e| Error::parse(format!("trainer state: {e}")))?;
        let blob = std::fs::read(dir.join(OPTIM_FILE))?;
        let total = model.store().total_elems();
        if blob.len() != total * 32 {
            return Err(Error::parse(format!(
                "optimizer blob holds {} bytes, expected {}",
                blob.len(),
                total * 32
            )));
        }
        let vals: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect();
        let gen_opt =
            AdamState::restore(model.store(), record.gen_t, &vals[..total], &vals[total..2 * total])?;
        let disc_opt = AdamState::restore(
            model.store(),
            record.disc_t,
            &vals[2 * total..3 * total],
            &vals[3 * total..],
        )?;
        let bank = MemoryBank::new(model.config().modalities, cfg.bank_capacity)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_word_pos(record.rng_word_lo as u128 | (record.rng_word_hi as u128) << 64);
        let steps_done = record.steps_done as usize;
        Ok((Trainer { model, cfg, gen_opt, disc_opt, bank, rng, steps_done }, meta))
    }
}

const OPTIM_FILE: &str = "optim.bin";
const TRAINER_FILE: &str = "trainer.json";

/// Sidecar state beyond the weights that an exact resume needs.
#[derive(Serialize, Deserialize)]
struct TrainerRecord {
    steps_done: u64,
    gen_t: u64,
    disc_t: u64,
    rng_word_lo: u64,
    rng_word_hi: u64,
}

/// A distribution over latents that can be sampled and scored pointwise.
pub trait LatentComponent {
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn log_density(&self, z: &[f64]) -> Result<f64>;
}

/// A joint score `log p(z, x)` with the observation folded in.
pub trait LatentJoint {
    fn log_joint(&self, z: &[f64]) -> Result<f64>;
}

/// Monte Carlo estimate of the mixture bound with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct MixtureBound {
    pub bound: f64,
    /// Standard error of the estimator; zero when every component integrand
    /// is constant or only one draw was taken.
    pub std_error: f64,
}

/// Monte Carlo estimate of the mixture bound: each component is scored
/// against its own density, never the mixture. With exact-posterior
/// components the integrand is constant, so the estimate equals the evidence
/// to rounding error regardless of the draw count.
pub fn mixture_elbo_mc<C: LatentComponent, J: LatentJoint>(
    components: &[(f64, C)],
    joint: &J,
    draws_per_component: usize,
    rng: &mut dyn RngCore,
) -> Result<MixtureBound> {
    if components.is_empty() || draws_per_component == 0 {
        return Err(Error::contract("mixture bound needs components and draws"));
    }
    let total: f64 = components.iter().map(|(w, _)| *w).sum();
    if components.iter().any(|(w, _)| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract("component weights must be positive and sum to one"));
    }
    let n = draws_per_component as f64;
    let mut bound = 0.0;
    let mut variance = 0.0;
    for (w, c) in components {
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..draws_per_component {
            let z = c.draw(rng);
            let v = joint.log_joint(&z)? - c.log_density(&z)?;
            acc += v;
            acc_sq += v * v;
        }
        let mean = acc / n;
        bound += w * mean;
        if draws_per_component > 1 {
            // Independent draws, so component variances add with squared
            // weights. Clamp guards the tiny negative residue of catastrophic
            // cancellation on constant integrands.
            let s_sq = ((acc_sq - n * mean * mean) / (n - 1.0)).max(0.0);
            variance += w * w * s_sq / n;
        }
    }
    Ok(MixtureBound { bound, std_error: variance.sqrt() })
}
