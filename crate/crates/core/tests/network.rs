mod common;

use asap::audit::{model_gradcheck, randomized_net, GradcheckConfig};
use asap::network::{
    axial_attention, vertical_attention, AsapNet, BackboneConfig, Ctx, FeaturePyramid, Mode,
    NetConfig, PoolAxis, Variant,
};
use asap::nn::RunningStats;
use asap::tensor::Reduction;
use asap::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> NetConfig {
    NetConfig {
        backbone: BackboneConfig {
            stage_channels: [4, 8, 8, 16],
            blocks_per_stage: 1,
        },
        fpn_width: 8,
        ..NetConfig::default()
    }
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), dims).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn train_pyramid(net: &AsapNet, image: &Tensor) -> FeaturePyramid {
    let mut stats = net.stats.clone();
    let mut ctx = Ctx::train(&net.params, &mut stats);
    let stages = net.backbone.forward(&mut ctx, image).unwrap();
    net.fpn.forward(&mut ctx, &stages).unwrap()
}

#[test]
fn stage_and_pyramid_strides() {
    let net = AsapNet::new(small(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = random(&[2, 3, 64, 64], &mut rng);
    let mut stats = net.stats.clone();
    let mut ctx = Ctx::train(&net.params, &mut stats);
    let stages = net.backbone.forward(&mut ctx, &image).unwrap();
    let sizes: Vec<usize> = stages.iter().map(|s| s.dims()[2]).collect();
    assert_eq!(sizes, [16, 8, 4, 2]);
    for (s, c) in stages.iter().zip(small().backbone.stage_channels) {
        assert_eq!(s.dims()[1], c);
    }
    let pyr = net.fpn.forward(&mut ctx, &stages).unwrap();
    for i in 1..4 {
        assert_eq!(pyr.p(i).dims()[2], 2 * pyr.p(i + 1).dims()[2]);
        assert_eq!(pyr.p(i).dims()[3], 2 * pyr.p(i + 1).dims()[3]);
        assert_eq!(pyr.p(i).dims()[1], 8);
    }
    let mut net = net;
    assert!(net.forward(&random(&[1, 3, 48, 64], &mut rng), Mode::Train).is_err());
}

#[test]
fn zero_image_gives_zero_features() {
    let net = AsapNet::new(small(), 2).unwrap();
    let mut stats = net.stats.clone();
    let mut ctx = Ctx::train(&net.params, &mut stats);
    let stages = net.backbone.forward(&mut ctx, &Tensor::zeros(&[1, 3, 64, 64]).unwrap()).unwrap();
    assert!(stages.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backbone_parameter_count_matches_closed_form() {
    for (channels, blocks) in [([4, 8, 8, 16], 1), ([16, 32, 64, 128], 2), ([3, 5, 7, 11], 3)] {
        let cfg = NetConfig {
            backbone: BackboneConfig {
                stage_channels: channels,
                blocks_per_stage: blocks,
            },
            ..small()
        };
        let net = AsapNet::new(cfg.clone(), 0).unwrap();
        assert_eq!(net.params.numel_with_prefix("backbone."), cfg.backbone.param_count());
    }
}

#[test]
fn zero_laterals_give_zero_pyramid() {
    let mut net = AsapNet::new(small(), 3).unwrap();
    let ids: Vec<_> = net
        .params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.name.starts_with("fpn.lateral"))
        .map(|(i, e)| (i, e.tensor.numel()))
        .collect();
    for (i, n) in ids {
        net.params.set_values(asap::network::ParamId(i), vec![0.0; n]).unwrap();
    }
    let pyr = train_pyramid(&net, &random(&[1, 3, 64, 64], &mut ChaCha8Rng::seed_from_u64(4)));
    assert!(pyr.levels.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn ffdn_of_zero_pyramid_is_sum_of_betas() {
    let mut net = AsapNet::new(small(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bl: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bi: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    net.params.set_values(net.params.find("ffdn.ln.beta").unwrap(), bl.clone()).unwrap();
    net.params.set_values(net.params.find("ffdn.in.beta").unwrap(), bi.clone()).unwrap();
    let zeros = [16, 8, 4, 2].map(|s| Tensor::zeros(&[1, 8, s, s]).unwrap());
    let pyr = FeaturePyramid::new(zeros).unwrap();
    let ctx = Ctx::eval(&net.params, &net.stats);
    let f = net.ffdn.forward(&ctx, &pyr).unwrap();
    assert_eq!(f.dims(), [1, 8, 16, 16]);
    for (c, plane) in f.data().chunks(256).enumerate() {
        assert!(plane.iter().all(|&v| (v - (bl[c] + bi[c])).abs() < 1e-12));
    }
}

#[test]
fn ffdn_branch_statistics() {
    let image = random(&[2, 3, 64, 64], &mut ChaCha8Rng::seed_from_u64(6));
    let base = randomized_net(&small(), 6).unwrap();
    let pyr = train_pyramid(&base, &image);
    for (variant, axes) in [(Variant::LnOnly, [1usize, 2, 3].as_slice()), (Variant::InOnly, [2, 3].as_slice())] {
        let mut net = AsapNet::new(variant.apply(&small()), 6).unwrap();
        net.params = base.params.clone();
        for (name, v) in [("gamma", 1.0), ("beta", 0.0)] {
            for norm in ["ffdn.ln", "ffdn.in"] {
                net.params.set_values(net.params.find(&format!("{norm}.{name}")).unwrap(), vec![v; 8]).unwrap();
            }
        }
        let ctx = Ctx::eval(&net.params, &net.stats);
        let f = net.ffdn.forward(&ctx, &pyr).unwrap();
        let mean = f.reduce(Reduction::Mean, axes, false).unwrap();
        assert!(mean.data().iter().all(|m| m.abs() < 1e-6), "{variant}: {:?}", mean.data());
    }
}

#[test]
fn ffdn_depends_on_every_level() {
    let net = randomized_net(&small(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let levels = [16, 8, 4, 2].map(|s| random(&[1, 8, s, s], &mut rng));
    let ctx = Ctx::eval(&net.params, &net.stats);
    let base = net.ffdn.forward(&ctx, &FeaturePyramid::new(levels.clone()).unwrap()).unwrap();
    for i in 0..4 {
        let mut moved = levels.clone();
        let noise = random(moved[i].dims(), &mut rng).scale(0.1);
        moved[i] = moved[i].add(&noise).unwrap();
        let f = net.ffdn.forward(&ctx, &FeaturePyramid::new(moved).unwrap()).unwrap();
        assert!(max_abs_diff(f.data(), base.data()) > 1e-6, "P{} has no effect", i + 1);
    }
}

#[test]
fn affinity_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for axis in [PoolAxis::Vertical, PoolAxis::Horizontal] {
        for _ in 0..20 {
            let (c, h, w) = (rng.random_range(1..9), rng.random_range(1..7), rng.random_range(1..9));
            let p = common::attention_params(c, (c / 2).max(1), &mut rng);
            let f = random(&[2, c, h, w], &mut rng).scale(3.0);
            let out = axial_attention(&f, &p, axis).unwrap();
            let len = if axis == PoolAxis::Vertical { w } else { h };
            assert_eq!(out.affinity.dims(), [2, len, len]);
            for row in out.affinity.data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_attention_is_exact_identity() {
    let net = AsapNet::new(small(), 9).unwrap();
    let attention = net.attention.as_ref().unwrap();
    let f = random(&[2, 8, 5, 7], &mut ChaCha8Rng::seed_from_u64(9));
    let ctx = Ctx::eval(&net.params, &net.stats);
    let out = attention.forward(&ctx, &f).unwrap();
    assert_eq!(out.output.data(), f.data());
}

#[test]
fn single_column_affinity_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = common::attention_params(4, 2, &mut rng);
    let out = vertical_attention(&random(&[3, 4, 6, 1], &mut rng), &p).unwrap();
    assert!(out.affinity.data().iter().all(|&a| a == 1.0));
}

#[test]
fn attention_branch_ignores_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (c, h, w) = (rng.random_range(1..7), rng.random_range(2..8), rng.random_range(1..9));
        let p = common::attention_params(c, (c / 2).max(1), &mut rng);
        let f = random(&[2, c, h, w], &mut rng).scale(2.0);
        let mut perm: Vec<usize> = (0..h).collect();
        perm.shuffle(&mut rng);
        let branch = |x: &Tensor| vertical_attention(x, &p).unwrap().output.sub(x).unwrap();
        let pf = common::permute_rows(&f, &perm);
        let lhs = branch(&pf);
        let rhs = common::permute_rows(&branch(&f), &perm);
        assert!(max_abs_diff(lhs.data(), rhs.data()) < 1e-9);
    }
}

#[test]
fn output_shapes_and_eval_determinism() {
    let mut net = randomized_net(&small(), 13).unwrap();
    let image = random(&[2, 3, 32, 64], &mut ChaCha8Rng::seed_from_u64(13));
    let train = net.forward(&image, Mode::Train).unwrap();
    assert_eq!(train.logits.dims(), [2, 5, 32, 64]);
    let (a1, a2) = train.aux.unwrap();
    assert_eq!(a1.dims(), [2, 5, 32, 64]);
    assert_eq!(a2.dims(), [2, 5, 32, 64]);
    let e1 = net.forward(&image, Mode::Eval).unwrap();
    let e2 = net.forward(&image, Mode::Eval).unwrap();
    assert!(e1.aux.is_none());
    assert_eq!(e1.logits.data(), e2.logits.data());
}

#[test]
fn zero_head_gives_uniform_predictions() {
    let mut net = randomized_net(&small(), 14).unwrap();
    for name in ["head.classifier.weight", "head.classifier.bias"] {
        let id = net.params.find(name).unwrap_or_else(|| panic!("{name}"));
        let n = net.params.get(id).numel();
        net.params.set_values(id, vec![0.0; n]).unwrap();
    }
    let image = random(&[1, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(14));
    let out = net.forward(&image, Mode::Train).unwrap();
    assert!(out.logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn aux_heads_read_only_their_level() {
    let net = randomized_net(&small(), 15).unwrap();
    let image = random(&[1, 3, 64, 64], &mut ChaCha8Rng::seed_from_u64(15));
    let pyr = train_pyramid(&net, &image);
    let run = |pyr: &FeaturePyramid| {
        let mut stats = net.stats.clone();
        let mut ctx = Ctx::train(&net.params, &mut stats);
        net.aux_forward(&mut ctx, pyr, (64, 64)).unwrap()
    };
    let (a1, a2) = run(&pyr);
    let mut levels = pyr.levels.clone();
    levels[3] = Tensor::zeros(levels[3].dims()).unwrap();
    let (b1, b2) = run(&FeaturePyramid::new(levels).unwrap());
    assert_eq!(a1.data(), b1.data());
    assert_ne!(a2.data(), b2.data());
}

#[test]
fn aux1_gradient_reaches_early_stages() {
    let net = randomized_net(&small(), 16).unwrap();
    let image = random(&[1, 3, 64, 64], &mut ChaCha8Rng::seed_from_u64(16));
    let mut stats = net.stats.clone();
    let mut ctx = Ctx::train(&net.params, &mut stats);
    let out = net.forward_ctx(&mut ctx, &image).unwrap();
    let (a1, _) = out.aux.unwrap();
    net.params.zero_grads();
    a1.mul(&a1).unwrap().mean().backward().unwrap();
    for stage in ["backbone.stage1.", "backbone.stage2.", "backbone.stage3."] {
        let reached = net
            .params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(stage))
            .any(|e| e.tensor.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        assert!(reached, "{stage}");
    }
    let attention_touched = net
        .params
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("attention.") || e.name.starts_with("head."))
        .any(|e| e.tensor.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
    assert!(!attention_touched);
}

#[test]
fn variants_share_parameters_outside_their_block() {
    let full = AsapNet::new(Variant::Full.apply(&small()), 0).unwrap();
    let none = AsapNet::new(Variant::NoAttention.apply(&small()), 0).unwrap();
    let horizontal = AsapNet::new(Variant::HorizontalAttention.apply(&small()), 0).unwrap();
    let outside = |n: &AsapNet| -> Vec<(String, Vec<usize>)> {
        n.params
            .entries()
            .iter()
            .filter(|e| !e.name.starts_with("attention."))
            .map(|e| (e.name.clone(), e.tensor.dims().to_vec()))
            .collect()
    };
    assert_eq!(outside(&full), outside(&none));
    assert_eq!(full.params.numel(), horizontal.params.numel());
    assert_eq!(none.params.numel_with_prefix("attention."), 0);
    let ln = AsapNet::new(Variant::LnOnly.apply(&small()), 0).unwrap();
    let inn = AsapNet::new(Variant::InOnly.apply(&small()), 0).unwrap();
    assert_eq!(outside(&ln), outside(&inn));
    assert_eq!(ln.config.attention, inn.config.attention);
    assert_ne!(ln.config.fusion, inn.config.fusion);
}

#[test]
fn batch_norm_eval_needs_statistics() {
    let mut net = AsapNet::new(small(), 0).unwrap();
    assert!(net.stats.stats.iter().all(|s: &RunningStats| s.updates == 0));
    let image = random(&[1, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(0));
    assert!(net.forward(&image, Mode::Eval).is_err());
    net.forward(&image, Mode::Train).unwrap();
    assert!(net.forward(&image, Mode::Eval).is_ok());
}

#[test]
fn every_variant_passes_a_gradient_check() {
    let tiny = NetConfig {
        backbone: BackboneConfig {
            stage_channels: [2, 4, 4, 4],
            blocks_per_stage: 1,
        },
        fpn_width: 4,
        n_classes: 3,
        ..NetConfig::default()
    };
    for v in Variant::ALL {
        let cfg = GradcheckConfig {
            net: v.apply(&tiny),
            input: [2, 3, 32, 32],
            seed: 21,
            input_coords: 16,
            coords_per_param: 2,
            ..GradcheckConfig::default()
        };
        let r = model_gradcheck(&cfg).unwrap();
        assert!(r.passed, "{v}: {r:?}");
    }
}
