use super::*;
use crate::gaussian::kl_nodes;
use crate::tensor::Graph;
use rand::SeedableRng;

fn full(m: usize) -> Indicator {
    Indicator::full(m).unwrap()
}

fn random_images(cfg: &ModelConfig, seed: u64) -> Vec<Option<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.modalities)
        .map(|_| {
            Some(
                Tensor::randn(&[1, cfg.hier.side, cfg.hier.side], &mut rng)
                    .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)),
            )
        })
        .collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        modalities: 2,
        hier: HierSpec {
            side: 8,
            levels: vec![
                LevelSpec { spatial: 8, channels: 2 },
                LevelSpec { spatial: 1, channels: 6 },
            ],
        },
        base_width: 2,
        decoder_blocks: 1,
        fusion: FusionMode::ProductOfExperts,
        init: ModelInit::default(),
    }
}

#[test]
fn desk_model_synthesizes_all_modalities_with_expected_shapes() {
    let cfg = ModelConfig::desk(4);
    let model = Model::new(cfg.clone()).unwrap();
    let images = random_images(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = model
        .synthesize(&images, &"1010".parse().unwrap(), 0.5, &mut rng)
        .unwrap();
    assert_eq!(out.len(), 4);
    for img in &out {
        assert_eq!(img.shape(), &[1, 32, 32]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    let params = model.posterior_params(&images, &full(4)).unwrap();
    assert_eq!(params.len(), 3);
    assert_eq!(params[0].0.mean().shape(), &[4, 32, 32]);
    assert_eq!(params[1].0.mean().shape(), &[16, 8, 8]);
    assert_eq!(params[2].0.mean().shape(), &[64]);
    // The top prior is standard normal by construction.
    assert!(params[2].1.mean().data().iter().all(|&v| v == 0.0));
    assert!(params[2].1.log_var().data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_names_partition_into_roles() {
    let model = Model::new(ModelConfig::desk(3)).unwrap();
    let mut saw = [false; 3];
    for (_, p) in model.store().iter() {
        let role = ["theta.", "phi.", "psi."]
            .iter()
            .position(|pre| p.name.starts_with(pre));
        match role {
            Some(i) => saw[i] = true,
            None => panic!("parameter {} has no role prefix", p.name),
        }
    }
    assert!(saw.iter().all(|&s| s), "expected all three roles: {saw:?}");
}

#[test]
fn zero_initialized_experts_add_exactly_unit_precision() {
    let mut cfg = tiny_config();
    cfg.init.zero_init_expert_heads = true;
    let model = Model::new(cfg.clone()).unwrap();
    let images = random_images(&cfg, 9);
    let params = model
        .posterior_params(&images, &Indicator::single(0, 2).unwrap())
        .unwrap();
    for (q, p) in &params {
        for i in 0..q.mean().numel() {
            let prec_q = (-q.log_var().data()[i]).exp();
            let prec_p = (-p.log_var().data()[i]).exp();
            // A zeroed head emits a standard-normal expert, so fused
            // precision exceeds the prior's by exactly one and the fused
            // mean keeps the prior's precision-weighted mean.
            assert!((prec_q - prec_p - 1.0).abs() < 1e-9);
            let num_q = q.mean().data()[i] * prec_q;
            let num_p = p.mean().data()[i] * prec_p;
            assert!((num_q - num_p).abs() < 1e-9);
        }
    }
}

#[test]
fn uninformative_experts_leave_the_posterior_on_the_prior() {
    let mut cfg = tiny_config();
    cfg.init.expert_logvar_bias = 10.0;
    cfg.init.zero_init_expert_heads = true;
    let model = Model::new(cfg.clone()).unwrap();
    let images = random_images(&cfg, 10);
    let params = model.posterior_params(&images, &full(2)).unwrap();
    for (q, p) in &params {
        for i in 0..q.mean().numel() {
            assert!((q.mean().data()[i] - p.mean().data()[i]).abs() < 1e-3);
            assert!((q.log_var().data()[i] - p.log_var().data()[i]).abs() < 1e-3);
        }
    }
}

#[test]
fn default_experts_react_to_the_input() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let a = model
        .posterior_params(&random_images(&cfg, 1), &full(2))
        .unwrap();
    let b = model
        .posterior_params(&random_images(&cfg, 2), &full(2))
        .unwrap();
    let diff: f64 = a[0]
        .0
        .mean()
        .data()
        .iter()
        .zip(b[0].0.mean().data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-4, "posterior ignored the observation, diff {diff}");
}

#[test]
fn synthesis_is_seed_deterministic() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let images = random_images(&cfg, 5);
    let subset: Indicator = "10".parse().unwrap();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.synthesize(&images, &subset, 0.7, &mut rng).unwrap()
    };
    let a = run(11);
    let b = run(11);
    let c = run(12);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
    assert!(a.iter().zip(&c).any(|(x, y)| x.data() != y.data()));

    // Temperature zero removes the randomness entirely.
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(999);
    let d = model.synthesize(&images, &subset, 0.0, &mut r1).unwrap();
    let e = model.synthesize(&images, &subset, 0.0, &mut r2).unwrap();
    for (x, y) in d.iter().zip(&e) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn observation_contract_violations_are_rejected() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = random_images(&cfg, 1);
    assert!(model
        .synthesize(&images, &"00".parse().unwrap(), 0.5, &mut rng)
        .is_err());
    let mut missing = images.clone();
    missing[0] = None;
    assert!(model
        .synthesize(&missing, &"10".parse().unwrap(), 0.5, &mut rng)
        .is_err());
    let mut bad = images.clone();
    bad[1] = Some(Tensor::zeros(&[1, 4, 4]));
    assert!(model
        .synthesize(&bad, &"11".parse().unwrap(), 0.5, &mut rng)
        .is_err());
}

#[test]
fn fusion_modes_build_their_distinct_parameter_sets() {
    let mut cfg = tiny_config();
    cfg.fusion = FusionMode::ConcatZeros;
    let concat = Model::new(cfg.clone()).unwrap();
    assert!(concat.store().id_of("phi.enc0.stem.k").is_some());
    assert!(concat.store().id_of("phi.enc1.stem.k").is_none());
    // The shared stem consumes all modalities as channels.
    let stem = concat.store().value(concat.store().id_of("phi.enc0.stem.k").unwrap());
    assert_eq!(stem.shape()[1], cfg.modalities);

    cfg.fusion = FusionMode::AverageExperts;
    let avg = Model::new(cfg.clone()).unwrap();
    assert!(avg.store().id_of("phi.enc1.stem.k").is_some());

    let images = random_images(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for model in [&concat, &avg] {
        let out = model
            .synthesize(&images, &"10".parse().unwrap(), 0.0, &mut rng)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[1, 8, 8]);
    }
}

#[test]
fn global_only_hierarchy_synthesizes_through_the_vector_decoder() {
    let cfg = ModelConfig {
        modalities: 2,
        hier: HierSpec {
            side: 16,
            levels: vec![LevelSpec { spatial: 1, channels: 8 }],
        },
        base_width: 2,
        decoder_blocks: 1,
        fusion: FusionMode::ProductOfExperts,
        init: ModelInit::default(),
    };
    let model = Model::new(cfg.clone()).unwrap();
    let images = random_images(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = model.synthesize(&images, &"01".parse().unwrap(), 0.5, &mut rng).unwrap();
    assert_eq!(out[0].shape(), &[1, 16, 16]);
    let params = model.posterior_params(&images, &full(2)).unwrap();
    assert_eq!(params.len(), 1);
    assert_eq!(params[0].0.mean().shape(), &[8]);
}

#[test]
fn checkpoint_round_trips_and_rejects_corruption() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let meta = CheckpointMeta { step: 42, epoch: 3 };
    model.save(&a, meta).unwrap();
    let (loaded, meta_back) = Model::load(&a).unwrap();
    assert_eq!(meta_back, meta);
    loaded.save(&b, meta).unwrap();
    for file in ["manifest.json", "params.bin"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} changed across a load/save cycle");
    }

    // Storage is exact, so a reloaded model synthesizes bit-identically.
    let images = random_images(&cfg, 4);
    let subset = full(2);
    let mut r1 = ChaCha8Rng::seed_from_u64(7);
    let mut r2 = ChaCha8Rng::seed_from_u64(7);
    let x = model.synthesize(&images, &subset, 0.5, &mut r1).unwrap();
    let y = loaded.synthesize(&images, &subset, 0.5, &mut r2).unwrap();
    for (xa, ya) in x.iter().zip(&y) {
        assert_eq!(xa.data(), ya.data());
    }

    // Tampered manifests and truncated blobs are refused.
    let json = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    std::fs::write(a.join("manifest.json"), json.replace(FORMAT_PROBE, "other-format")).unwrap();
    assert!(Model::load(&a).is_err());
    std::fs::write(a.join("manifest.json"), json).unwrap();
    let blob = std::fs::read(a.join("params.bin")).unwrap();
    std::fs::write(a.join("params.bin"), &blob[..blob.len() / 2]).unwrap();
    assert!(Model::load(&a).is_err());
}

const FORMAT_PROBE: &str = "fusevae-checkpoint";

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let images = random_images(&cfg, 13);
    let subset = full(2);

    // Loss touches encoders, experts, the top-down path and all decoders:
    // reconstruction sums plus the per-level KL.
    let eval = |model: &Model| -> (f64, Vec<(crate::tensor::ParamId, Tensor)>) {
        let mut g = Graph::new();
        let mut pc = ParamCtx::new(model.store());
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let leaves = model.image_leaves(&mut g, &images, &subset).unwrap();
        let taps = model
            .build_observed_encoders(&mut g, &mut pc, &leaves, &subset)
            .unwrap();
        let pass = model.build_posterior(&mut g, &mut pc, &taps, 1.0, &mut rng).unwrap();
        let z = pass.finest_sample();
        let mut loss = None;
        for m in 0..2 {
            let dec = model.build_decoder(&mut g, &mut pc, m, z).unwrap();
            let s = g.sum(dec);
            loss = Some(match loss {
                None => s,
                Some(acc) => g.add(acc, s).unwrap(),
            });
        }
        for lvl in &pass.levels {
            let q = lvl.posterior.unwrap();
            let kl = kl_nodes(&mut g, &q, &lvl.prior).unwrap();
            let s = g.sum(kl);
            loss = Some(g.add(loss.unwrap(), s).unwrap());
        }
        let root = loss.unwrap();
        let value = g.value(root).item();
        let grads = g.backward(root).unwrap();
        (value, g.param_grads(&grads))
    };

    let (_, grads) = eval(&model);
    let grad_of = |name: &str| -> Tensor {
        let id = model.store().id_of(name).unwrap();
        grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| panic!("no gradient for {name}"))
    };

    let h = 1e-5;
    for name in [
        "phi.enc0.stem.k",
        "phi.exp1.top.w",
        "phi.exp0.l0.w",
        "theta.td.ctx_top.w",
        "theta.td.l0.prior.k",
        "theta.dec1.res0.c1.k",
        "psi.disc0.c1.k", // untouched by this loss: no gradient expected
    ] {
        let id = model.store().id_of(name).unwrap();
        if name.starts_with("psi.") {
            assert!(grads.iter().all(|(pid, _)| *pid != id));
            continue;
        }
        let g = grad_of(name);
        let n = model.store().value(id).numel();
        for idx in [0, n / 2, n - 1] {
            let mut bumped = model.clone();
            bumped.store_mut().value_mut(id).data_mut()[idx] += h;
            let (up, _) = eval(&bumped);
            let mut dipped = model.clone();
            dipped.store_mut().value_mut(id).data_mut()[idx] -= h;
            let (down, _) = eval(&dipped);
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom < 1e-4,
                "{name}[{idx}]: analytic {an} vs finite difference {fd}"
            );
        }
    }
}

#[test]
fn invalid_hierarchies_are_rejected() {
    let mut cfg = tiny_config();
    cfg.hier.levels[1].spatial = 3;
    assert!(Model::new(cfg).is_err());

    let mut cfg = tiny_config();
    cfg.hier.levels[0].spatial = 4; // finest must match the side
    assert!(Model::new(cfg).is_err());

    let mut cfg = tiny_config();
    cfg.hier.levels.clear();
    assert!(Model::new(cfg).is_err());

    let mut cfg = tiny_config();
    cfg.hier.levels = vec![
        LevelSpec { spatial: 8, channels: 2 },
        LevelSpec { spatial: 5, channels: 2 },
        LevelSpec { spatial: 1, channels: 4 },
    ];
    assert!(Model::new(cfg).is_err());

    let mut cfg = tiny_config();
    cfg.modalities = 0;
    assert!(Model::new(cfg).is_err());
}
