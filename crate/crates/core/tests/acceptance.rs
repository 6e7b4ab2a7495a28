//! Acceptance criteria, one line per criterion. Run with
//! `cargo test -p asap-core --test acceptance -- --nocapture` to see them.

mod common;

use std::time::Instant;

use asap::audit::{model_gradcheck, GradcheckConfig};
use asap::data::{generate_scene, Image, LabelMap, SceneSpec};
use asap::flops::{attention_core_flops, fit_operating_point, Dims, Targets, VariantKind, VariantSpec};
use asap::loss::{combine, miou, ohem_kept, total_loss, ConfusionMatrix, LossWeights};
use asap::network::{
    axial_attention, vertical_attention, AsapNet, BackboneConfig, Ctx, NetConfig, PoolAxis, Variant,
};
use asap::nn::{instance_norm, layer_norm, NormParams};
use asap::tensor::Reduction;
use asap::train::{
    decode_checkpoint, encode_checkpoint, run_variant, train_loop, train_until, AblationRow, TrainConfig,
    TrainState,
};
use asap::Tensor;
use common::{labels, ohem_oracle, rng, uniform};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let report = model_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.max_rel_err < 1e-4 && secs < 300.0,
        format!(
            "whole-model gradcheck on 1x3x32x32, h={:e}: max_rel_err {:.3e} over {} coords in {secs:.1}s",
            cfg.h, report.max_rel_err, report.checked
        ),
    )
}

fn normalization_semantics() -> Outcome {
    let mut r = rng(2);
    let mut worst = (0.0f64, 0.0f64);
    type Norm = fn(&Tensor, &NormParams) -> asap::tensor::Result<Tensor>;
    for (norm, axes) in [(layer_norm as Norm, &[1usize, 2, 3][..]), (instance_norm, &[2, 3][..])] {
        for _ in 0..100 {
            let dims = [r.random_range(1..4), r.random_range(1..6), r.random_range(2..9), r.random_range(2..9)];
            let x = uniform(&dims, -4.0, 4.0, &mut r);
            let y = norm(&x, &NormParams::identity(dims[1]).unwrap()).map_err(|e| e.to_string())?;
            let mean = y.reduce(Reduction::Mean, axes, false).unwrap();
            let var = y.reduce(Reduction::Var, axes, false).unwrap();
            worst.0 = mean.data().iter().fold(worst.0, |m, v| m.max(v.abs()));
            worst.1 = var.data().iter().fold(worst.1, |m, v| m.max((v - 1.0).abs()));
        }
    }
    check(
        worst.0 < 1e-6 && worst.1 < 1e-4,
        format!(
            "layer and instance norm over 100 inputs each: max |mean| {:.2e}, max |var-1| {:.2e}",
            worst.0, worst.1
        ),
    )
}

fn attention_contracts() -> Outcome {
    let mut r = rng(3);
    let mut row_err = 0.0f64;
    for axis in [PoolAxis::Vertical, PoolAxis::Horizontal] {
        for _ in 0..25 {
            let (c, h, w) = (r.random_range(1..9), r.random_range(1..8), r.random_range(1..9));
            let p = common::attention_params(c, (c / 8).max(1), &mut r);
            let f = uniform(&[2, c, h, w], -3.0, 3.0, &mut r);
            let out = axial_attention(&f, &p, axis).map_err(|e| e.to_string())?;
            let len = out.affinity.dims()[1];
            for row in out.affinity.data().chunks(len) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let net = AsapNet::new(NetConfig::default(), 0).map_err(|e| e.to_string())?;
    let attention = net.attention.as_ref().ok_or("full model lacks attention")?;
    let f = uniform(&[2, net.config.fpn_width, 6, 10], -2.0, 2.0, &mut r);
    let out = attention.forward(&Ctx::eval(&net.params, &net.stats), &f).map_err(|e| e.to_string())?;
    let identity = out.output.data() == f.data();

    let mut perm_err = 0.0f64;
    for _ in 0..50 {
        let (c, h, w) = (r.random_range(1..7), r.random_range(2..8), r.random_range(1..9));
        let p = common::attention_params(c, (c / 2).max(1), &mut r);
        let f = uniform(&[2, c, h, w], -2.0, 2.0, &mut r);
        let mut perm: Vec<usize> = (0..h).collect();
        perm.shuffle(&mut r);
        let branch = |x: &Tensor| vertical_attention(x, &p).unwrap().output.sub(x).unwrap();
        let lhs = branch(&common::permute_rows(&f, &perm));
        let rhs = common::permute_rows(&branch(&f), &perm);
        perm_err = perm_err.max(max_abs_diff(lhs.data(), rhs.data()));
    }
    check(
        row_err < 1e-9 && identity && perm_err < 1e-9,
        format!(
            "affinity row-sum error {row_err:.1e}, zero attention exact identity: {identity}, row-permutation error {perm_err:.1e} over 50 inputs"
        ),
    )
}

fn complexity_identity() -> Outcome {
    let mut r = rng(4);
    let mut exact = 0;
    for _ in 0..20 {
        let c = r.random_range(1..512);
        let d = Dims { c, c_hat: r.random_range(1..=c), h: r.random_range(1..128), w: r.random_range(1..256), levels: 4 };
        let core = |kind| attention_core_flops(&VariantSpec { kind, dims: d }.cost().unwrap());
        if core(VariantKind::AttnConventional) == core(VariantKind::AttnVertical) * (d.h * d.h) as u64 {
            exact += 1;
        }
    }
    let op = fit_operating_point(&Targets::default()).map_err(|e| e.to_string())?;
    let (attn, fusion) = (op.attention_ratio(), op.fusion_ratio());
    check(
        exact == 20 && (350.0..=450.0).contains(&attn) && (1.6..=2.4).contains(&fusion),
        format!(
            "H^2 identity exact on {exact}/20 tuples; fitted point stride {} (C={}, C_hat={}, {}x{}): attention ratio {attn:.1}, fusion ratio {fusion:.3}",
            op.stride, op.dims.c, op.dims.c_hat, op.dims.h, op.dims.w
        ),
    )
}

fn ohem_oracle_agreement() -> Outcome {
    let mut r = rng(5);
    let mut agree = 0;
    for _ in 0..100 {
        let (n, k, h, w) = (r.random_range(1..4), r.random_range(2..7), r.random_range(2..10), r.random_range(2..10));
        let logits = uniform(&[n, k, h, w], -4.0, 4.0, &mut r);
        let mut lab = labels(n * h * w, k, 0.15, &mut r);
        lab[0] = 0;
        let min_kept = if r.random_bool(0.5) { Some(r.random_range(1..n * h * w + 1)) } else { None };
        let weights = LossWeights {
            ohem_threshold: r.random_range(0.05..0.95),
            ohem_min_kept: min_kept,
            ..LossWeights::default()
        };
        if ohem_kept(&logits, &lab, &weights).map_err(|e| e.to_string())? == ohem_oracle(&logits, &lab, &weights) {
            agree += 1;
        }
    }
    check(agree == 100, format!("kept set equals sort oracle on {agree}/100 batches"))
}

fn miou_correctness() -> Outcome {
    let mut got = Vec::new();
    let mut ok = true;
    for (k, counts, per_class, mean) in common::miou_examples() {
        let r = miou(&ConfusionMatrix::from_counts(k, counts).unwrap()).map_err(|e| e.to_string())?;
        ok &= r.per_class == per_class && r.mean == mean;
        got.push(format!("{}", r.mean));
    }
    check(ok, format!("hand-computed examples, mIoU {}", got.join(" / ")))
}

fn toy_scenes() -> (Vec<(Image, LabelMap)>, Vec<(Image, LabelMap)>) {
    let spec = SceneSpec::default();
    let mut scenes: Vec<_> = (0..400).map(|i| generate_scene(&spec, i).unwrap()).collect();
    let val = scenes.split_off(320);
    (scenes, val)
}

fn toy_net() -> NetConfig {
    NetConfig {
        backbone: BackboneConfig {
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
        },
        fpn_width: 16,
        ..NetConfig::default()
    }
}

fn toy_training() -> Outcome {
    let (train, val) = toy_scenes();
    let base = toy_net();
    let mut rows: Vec<AblationRow> = Vec::new();
    for seed in 0..3 {
        for variant in [Variant::Full, Variant::NoAttention] {
            let cfg = TrainConfig { max_steps: 2000, seed, ..TrainConfig::default() };
            let row = run_variant(&base, variant, &train, &val, &cfg).map_err(|e| e.to_string())?;
            println!(
                "    {variant} seed {seed}: mIoU {:.4} pole IoU {:.4} ({:.0}s)",
                row.miou,
                row.pole_iou().unwrap_or(f64::NAN),
                row.seconds
            );
            rows.push(row);
        }
    }
    let of = |v: Variant| rows.iter().filter(move |r| r.variant == v);
    let mean = |v: Variant, f: &dyn Fn(&AblationRow) -> f64| of(v).map(f).sum::<f64>() / 3.0;
    let pole = |r: &AblationRow| r.pole_iou().unwrap_or(0.0);
    let full_miou = mean(Variant::Full, &|r| r.miou);
    let worst_full = of(Variant::Full).map(|r| r.miou).fold(f64::INFINITY, f64::min);
    let (pole_full, pole_none) = (mean(Variant::Full, &pole), mean(Variant::NoAttention, &pole));
    let secs: f64 = rows.iter().map(|r| r.seconds).sum();
    check(
        worst_full >= 0.55 && pole_full > pole_none && secs <= 900.0,
        format!(
            "full mIoU min {worst_full:.4} (mean {full_miou:.4}, floor 0.55); mean pole IoU full {pole_full:.4} vs no_attention {pole_none:.4}; {secs:.0}s for 6 runs"
        ),
    )
}

fn reproducibility() -> Outcome {
    let spec = SceneSpec { width: 64, height: 32, ..SceneSpec::default() };
    let data: Vec<_> = (0..8).map(|i| generate_scene(&spec, i).unwrap()).collect();
    let (train, val) = data.split_at(6);
    let net = NetConfig {
        backbone: BackboneConfig {
            stage_channels: [4, 8, 8, 16],
            blocks_per_stage: 1,
        },
        fpn_width: 8,
        ..NetConfig::default()
    };
    let cfg = TrainConfig { max_steps: 6, seed: 1, eval_every: 3, ..TrainConfig::default() };
    let err = |e: asap::train::TrainError| e.to_string();

    let mut a = TrainState::new(net.clone(), 1).map_err(err)?;
    let trace_a = train_loop(&mut a, train, val, &cfg, |_| {}).map_err(err)?;
    let bytes = encode_checkpoint(&a);
    let round_trip = encode_checkpoint(&decode_checkpoint(&bytes).map_err(err)?) == bytes;

    let mut b = TrainState::new(net.clone(), 1).map_err(err)?;
    let same_trace = train_loop(&mut b, train, val, &cfg, |_| {}).map_err(err)? == trace_a;

    let mut c = TrainState::new(net, 1).map_err(err)?;
    let mut trace_c = train_until(&mut c, train, val, &cfg, 2, |_| {}).map_err(err)?;
    let mut c = decode_checkpoint(&encode_checkpoint(&c)).map_err(err)?;
    trace_c.extend(train_loop(&mut c, train, val, &cfg, |_| {}).map_err(err)?);
    let resumed = trace_c == trace_a && encode_checkpoint(&c) == bytes;
    check(
        round_trip && same_trace && resumed,
        format!("checkpoint round trip bit-exact: {round_trip}; same-seed traces identical: {same_trace}; resume at step 2 identical: {resumed}"),
    )
}

fn loss_composition() -> Outcome {
    let mut r = rng(9);
    let heads: Vec<Tensor> = (0..3).map(|_| uniform(&[2, 4, 6, 6], -3.0, 3.0, &mut r)).collect();
    let lab = labels(72, 4, 0.1, &mut r);
    let mut err = 0.0f64;
    for (alpha, beta) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.4, 0.4), (1.7, 0.3)] {
        let w = LossWeights { alpha, beta, ..LossWeights::default() };
        let b = total_loss(&heads[0], &heads[1], &heads[2], &lab, &w).map_err(|e| e.to_string())?;
        err = err.max((b.total.item().unwrap() - (b.pred + alpha * b.aux1 + beta * b.aux2)).abs());
    }
    let s = Tensor::scalar;
    let w = LossWeights { alpha: 0.4, beta: 0.4, ..LossWeights::default() };
    let spot = combine(&s(1.0), &s(0.5), &s(0.5), &w).map_err(|e| e.to_string())?.item().unwrap();
    check(
        err < 1e-12 && (spot - 1.4).abs() < 1e-12,
        format!("linearity error {err:.1e} over 5 weightings; spot value {spot}"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "gradient audit", gradient_audit),
        (2, "normalization semantics", normalization_semantics),
        (3, "attention contracts", attention_contracts),
        (4, "complexity identity", complexity_identity),
        (5, "OHEM oracle", ohem_oracle_agreement),
        (6, "mIoU correctness", miou_correctness),
        (7, "toy training", toy_training),
        (8, "reproducibility", reproducibility),
        (9, "loss composition", loss_composition),
    ];
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                println!("FAIL criterion {n} ({name}): {detail}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
