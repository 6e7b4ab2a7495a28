use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asap::audit::{model_gradcheck, GradcheckConfig};
use asap::data::{class_name, Dataset, SceneSpec, Split};
use asap::flops::{self, fit_operating_point, flops_report, ReportOptions, Targets, VariantKind, VariantSpec};
use asap::loss::MiouReport;
use asap::network::{AsapNet, Mode, Variant};
use asap::nn::{resize, ResizeMode};
use asap::train::{
    self, calibrate_batch_norm, evaluate, load_checkpoint, run_variant, save_checkpoint, train_until, AblationRow,
    TraceRecord, TrainState,
};
use asap::Tensor;

use crate::config::{usage, RunConfig};
use crate::ConfigArgs;

fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{s}` is not {N} numbers joined by x")))
        .collect::<Result<_, _>>()?;
    let dims: [usize; N] = parts
        .try_into()
        .map_err(|_| format!("`{s}` needs exactly {N} extents"))?;
    if dims.contains(&0) {
        return Err(format!("`{s}` has a zero extent"));
    }
    Ok(dims)
}

fn parse_hw(s: &str) -> Result<[usize; 2], String> {
    parse_dims::<2>(s)
}

fn parse_nchw(s: &str) -> Result<[usize; 4], String> {
    parse_dims::<4>(s)
}

fn open_split(dir: &Path, split: Split) -> anyhow::Result<Dataset> {
    Dataset::open(dir, split).with_context(|| format!("loading {} split of {}", split.name(), dir.display()))
}

fn print_report(report: &MiouReport) {
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("{}\t{v:.6}", class_name(k)),
            None => println!("{}\t-", class_name(k)),
        }
    }
    println!("mIoU\t{:.6}", report.mean);
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub count: usize,
    /// Scene size as HxW.
    #[arg(long, default_value = "64x128", value_parser = parse_hw)]
    pub size: [usize; 2],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scenes held out for validation; defaults to a fifth of `count`.
    #[arg(long)]
    pub val: Option<usize>,
}

pub fn gen(a: GenArgs) -> anyhow::Result<bool> {
    let spec = SceneSpec {
        height: a.size[0],
        width: a.size[1],
        seed: a.seed,
        ..SceneSpec::default()
    };
    let val = a.val.unwrap_or(a.count / 5);
    if val > a.count {
        return Err(usage(format!("--val {val} exceeds --count {}", a.count)));
    }
    let meta = asap::data::write_dataset(&a.out, &spec, a.count, val)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    let mut hist = vec![0usize; meta.n_classes];
    for split in [Split::Train, Split::Val] {
        for (_, labels) in &open_split(&a.out, split)?.samples {
            let h = labels.histogram();
            hist.iter_mut().zip(h).for_each(|(t, c)| *t += c);
        }
    }
    let total: usize = hist.iter().sum::<usize>().max(1);
    println!("wrote {} train + {} val scenes of {}x{} to {}", meta.train, meta.val, meta.height, meta.width, a.out.display());
    println!("class\tpixels\tfraction");
    for (k, &n) in hist.iter().enumerate() {
        println!("{}\t{n}\t{:.4}", class_name(k), n as f64 / total as f64);
    }
    Ok(true)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for config echo, trace and checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Stop at this step without changing the schedule; `--resume` continues.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

fn resolve(cfg: &ConfigArgs, extra: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
    let mut overrides = cfg.overrides.clone();
    for (key, value) in extra {
        if let Some(v) = value {
            overrides.push(format!("{key}={v}"));
        }
    }
    RunConfig::resolve(cfg.config.as_deref(), &overrides)
}

pub fn train(a: TrainArgs) -> anyhow::Result<bool> {
    let run = resolve(
        &a.cfg,
        &[
            ("train.max_steps", a.max_steps.map(|v| v.to_string())),
            ("train.seed", a.seed.map(|v| v.to_string())),
            ("train.base_lr", a.lr.map(|v| format!("{v:?}"))),
        ],
    )?;
    let net_cfg = run.net()?;
    let cfg = run.train_config();
    let train_set = open_split(&a.data, Split::Train)?;
    let val_set = open_split(&a.data, Split::Val)?;
    if train_set.meta.n_classes != net_cfg.n_classes {
        return Err(usage(format!(
            "dataset has {} classes, model has {}",
            train_set.meta.n_classes, net_cfg.n_classes
        )));
    }

    let mut state = match &a.resume {
        Some(p) => {
            let st = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if st.net.config != net_cfg {
                return Err(usage(format!("{} holds a different model than the config", p.display())));
            }
            st
        }
        None => TrainState::new(net_cfg, cfg.seed)?,
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), run.to_toml())?;
    let trace_path = a.out.join("trace.tsv");
    let append = a.resume.is_some() && trace_path.exists();
    let mut trace = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&trace_path)?;
    if !append {
        writeln!(trace, "{}", TraceRecord::HEADER)?;
    }
    log::info!(
        "training {} params from step {} to {}",
        state.net.params.numel(),
        state.step,
        cfg.max_steps
    );
    let mut io_err = None;
    let stop = a.stop_after.unwrap_or(cfg.max_steps);
    let records = train_until(&mut state, &train_set.samples, &val_set.samples, &cfg, stop, |r| {
        if let Err(e) = writeln!(trace, "{}", r.to_line()) {
            io_err.get_or_insert(e);
        }
        if r.miou.is_some() || r.step % 100 == 0 {
            log::info!("{}", r.to_line());
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let ckpt = a.out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &state)?;
    match records.last() {
        Some(r) => println!("step {} loss {:.6} mIoU {}", r.step, r.loss, r.miou.map_or("-".into(), |m| format!("{m:.6}"))),
        None => println!("step {} (no steps run)", state.step),
    }
    println!("checkpoint {}", ckpt.display());
    Ok(true)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val", value_parser = ["train", "val"])]
    pub split: String,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

pub fn eval(a: EvalArgs) -> anyhow::Result<bool> {
    let mut state = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let split = if a.split == "train" { Split::Train } else { Split::Val };
    let set = open_split(&a.data, split)?;
    if set.is_empty() {
        bail!("{} split of {} is empty", split.name(), a.data.display());
    }
    if state.net.stats.stats.iter().any(|s| s.updates == 0) {
        let source = open_split(&a.data, Split::Train)?;
        let samples = if source.is_empty() { &set.samples } else { &source.samples };
        log::info!("checkpoint has no batch-norm statistics; calibrating on {} scenes", samples.len());
        calibrate_batch_norm(&mut state.net, samples, a.batch_size)?;
    }
    let (cm, report) = evaluate(&state.net, &set.samples, a.batch_size)?;
    println!("{} scenes, {} labelled pixels, step {}", set.len(), cm.total(), state.step);
    print_report(&report);
    Ok(true)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "full,no_attention,horizontal_attention,ln_only,in_only,no_ffdn")]
    pub variant: Vec<String>,
    /// Seeds `seed, seed+1, …` run for every variant.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<bool> {
    let run = resolve(&a.cfg, &[("train.max_steps", a.max_steps.map(|v| v.to_string()))])?;
    let variants: Vec<Variant> = a
        .variant
        .iter()
        .map(|v| v.trim().parse::<Variant>().map_err(usage))
        .collect::<anyhow::Result<_>>()?;
    if variants.is_empty() || a.seeds == 0 {
        return Err(usage("need at least one variant and one seed"));
    }
    let base = run.net()?;
    let cfg = run.train_config();
    let train_set = open_split(&a.data, Split::Train)?;
    let val_set = open_split(&a.data, Split::Val)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for &v in &variants {
        for s in 0..a.seeds {
            let seeded = train::TrainConfig { seed: cfg.seed + s, ..cfg.clone() };
            rows.push(run_variant(&base, v, &train_set.samples, &val_set.samples, &seeded)?);
        }
    }
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("variant\tseed\tparams\tmiou\tpole_iou\tfinal_loss\tseconds");
    for r in &rows {
        println!(
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.1}",
            r.variant,
            r.seed,
            r.params,
            r.miou,
            fmt(r.pole_iou()),
            fmt(r.final_loss),
            r.seconds
        );
    }
    if a.seeds > 1 {
        println!();
        println!("variant\tmean_miou\tmean_pole_iou");
        for &v in &variants {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let n = mine.len() as f64;
            let miou = mine.iter().map(|r| r.miou).sum::<f64>() / n;
            let pole: Option<Vec<f64>> = mine.iter().map(|r| r.pole_iou()).collect();
            let pole = pole.map(|p| p.iter().sum::<f64>() / n);
            println!("{v}\t{miou:.4}\t{}", fmt(pole));
        }
    }
    Ok(true)
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input size as HxW; both must be multiples of 32.
    #[arg(long, default_value = "512x1024", value_parser = parse_hw)]
    pub size: [usize; 2],
    /// Include the auxiliary heads that run only in training.
    #[arg(long)]
    pub aux: bool,
    /// Emit tab-separated rows instead of an aligned table.
    #[arg(long)]
    pub tsv: bool,
}

/// Attention cost ratio window around 87.52 / 0.22.
pub const ATTENTION_RATIO_RANGE: (f64, f64) = (350.0, 450.0);
/// Fusion cost ratio window around 1.08 / 0.54.
pub const FUSION_RATIO_RANGE: (f64, f64) = (1.6, 2.4);
/// Vertical over conventional attention cost.
pub const INVERSE_RATIO_RANGE: (f64, f64) = (0.002, 0.003);

pub fn flops(a: FlopsArgs) -> anyhow::Result<bool> {
    let run = resolve(&a.cfg, &[])?;
    let opts = ReportOptions {
        height: a.size[0],
        width: a.size[1],
        include_aux: a.aux,
    };
    let table = flops_report(&run.net()?, &opts).map_err(|e| usage(e.to_string()))?;
    print!("{}", if a.tsv { table.to_tsv() } else { table.to_text() });

    let targets = Targets::default();
    let op = fit_operating_point(&targets)?;
    let d = op.dims;
    println!();
    println!(
        "operating point: stride {} ({}x{}), C={} C_hat={} levels={} score {:.3e}",
        op.stride, d.h, d.w, d.c, d.c_hat, d.levels, op.score
    );
    println!("module\tflops\tparams\ttarget_flops");
    let target_of = |k: VariantKind| match k {
        VariantKind::AttnConventional => format!("{:.0}", targets.attn_conventional),
        VariantKind::AttnVertical => format!("{:.0}", targets.attn_vertical),
        VariantKind::GeneralFusion => format!("{:.0}", targets.general_fusion),
        VariantKind::Ffdn => format!("{:.0}", targets.ffdn),
        VariantKind::AttnHorizontal => "-".to_string(),
    };
    for kind in [
        VariantKind::AttnConventional,
        VariantKind::AttnHorizontal,
        VariantKind::AttnVertical,
        VariantKind::GeneralFusion,
        VariantKind::Ffdn,
    ] {
        let t = VariantSpec { kind, dims: d }.cost()?;
        println!("{}\t{}\t{}\t{}", kind.name(), t.total_flops(), t.total_params(), target_of(kind));
    }
    let conv = VariantSpec { kind: VariantKind::AttnConventional, dims: d }.cost()?;
    let vert = VariantSpec { kind: VariantKind::AttnVertical, dims: d }.cost()?;
    let core = flops::attention_core_flops(&conv) as f64 / flops::attention_core_flops(&vert) as f64;
    println!("affinity+aggregation ratio conventional/vertical\t{core:.1}\t(H^2 = {})", d.h * d.h);
    println!("absolute totals max relative error\t{:.3}\t(reported only)", op.max_total_error(&targets));

    let within = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
    let checks = [
        ("attention ratio conventional/vertical", op.attention_ratio(), ATTENTION_RATIO_RANGE, targets.attention_ratio()),
        ("attention ratio vertical/conventional", 1.0 / op.attention_ratio(), INVERSE_RATIO_RANGE, 1.0 / targets.attention_ratio()),
        ("fusion ratio general/ffdn", op.fusion_ratio(), FUSION_RATIO_RANGE, targets.fusion_ratio()),
    ];
    let mut ok = true;
    for (name, value, range, target) in checks {
        let pass = within(value, range);
        ok &= pass;
        println!(
            "{}\t{name}\t{value:.4}\tin [{}, {}]\ttarget {target:.4}",
            if pass { "PASS" } else { "FAIL" },
            range.0,
            range.1
        );
    }
    Ok(ok)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input as NxCxHxW.
    #[arg(long, default_value = "1x3x32x32", value_parser = parse_nchw)]
    pub size: [usize; 4],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<bool> {
    let run = resolve(&a.cfg, &[])?;
    if a.size[1] != 3 {
        return Err(usage("gradcheck input must have 3 channels"));
    }
    let cfg = GradcheckConfig {
        net: run.net()?,
        input: a.size,
        seed: a.seed,
        h: a.step,
        tol: a.tol,
        ..GradcheckConfig::default()
    };
    let start = Instant::now();
    let report = model_gradcheck(&cfg)?;
    println!(
        "checked {} coordinates ({} skipped at relu kinks) in {:.1}s",
        report.checked,
        report.kinks,
        start.elapsed().as_secs_f64()
    );
    println!("max relative error {:.3e} (tolerance {:.0e}) worst {:?}", report.max_rel_err, report.tol, report.worst);
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint to time; a freshly initialized model from the config otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Raw input frame size as HxW.
    #[arg(long, default_value = "512x1024", value_parser = parse_hw)]
    pub size: [usize; 2],
    /// Network input size as HxW; the raw size rounded up to multiples of 32 by default.
    #[arg(long, value_parser = parse_hw)]
    pub input: Option<[usize; 2]>,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
}

pub const WARMUP_RUNS: usize = 10;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bench(a: BenchArgs) -> anyhow::Result<bool> {
    if a.iters == 0 {
        return Err(usage("--iters must be positive"));
    }
    let [h, w] = a.size;
    let input = a.input.unwrap_or([h.next_multiple_of(32), w.next_multiple_of(32)]);
    if input.iter().any(|d| d % 32 != 0) {
        return Err(usage(format!("network input {}x{} is not a multiple of 32", input[0], input[1])));
    }
    let mut net = match &a.ckpt {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.net,
        None => AsapNet::new(resolve(&a.cfg, &[])?.net()?, 0)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frame = Tensor::new((0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(), &[1, 3, h, w])?;
    if net.stats.stats.iter().any(|s| s.updates == 0) {
        let _guard = asap::tensor::no_grad();
        net.forward(&resize(&frame, (input[0], input[1]), ResizeMode::Bilinear)?, Mode::Train)?;
    }
    let run_once = |net: &AsapNet| -> anyhow::Result<f64> {
        let start = Instant::now();
        let x = resize(&frame, (input[0], input[1]), ResizeMode::Bilinear)?;
        let logits = net.predict(&x)?;
        std::hint::black_box(logits);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..WARMUP_RUNS {
        run_once(&net)?;
    }
    println!("sample\tms");
    let mut samples = Vec::with_capacity(a.iters);
    for i in 0..a.iters {
        let ms = run_once(&net)?;
        println!("{i}\t{ms:.3}");
        samples.push(ms);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(f64::total_cmp);
    println!(
        "frame {h}x{w} -> input {}x{}: mean {mean:.3} ms, p50 {:.3} ms, p95 {:.3} ms, {:.2} fps",
        input[0],
        input[1],
        percentile(&samples, 0.5),
        percentile(&samples, 0.95),
        1e3 / mean
    );
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_hw("64x128").unwrap(), [64, 128]);
        assert_eq!(parse_nchw("1x3x32x32").unwrap(), [1, 3, 32, 32]);
        assert!(parse_hw("64").is_err());
        assert!(parse_hw("0x8").is_err());
        assert!(parse_hw("axb").is_err());
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.5), 2.0);
        assert_eq!(percentile(&s, 0.95), 4.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }
}
