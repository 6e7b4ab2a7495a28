//! Whole-model gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::network::{AsapNet, Ctx, NetConfig, ParamKind};
use crate::tensor::{finite_diff_check_coords, FiniteDiffReport, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub net: NetConfig,
    /// `[N, 3, H, W]`
    pub input: [usize; 4],
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    /// Input elements probed.
    pub input_coords: usize,
    /// Elements probed in every parameter tensor.
    pub coords_per_param: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            net: NetConfig::default(),
            input: [1, 3, 32, 32],
            seed: 0,
            h: 1e-5,
            tol: 1e-4,
            input_coords: 32,
            coords_per_param: 3,
        }
    }
}

/// A network whose every parameter is moved off its initial value, so that
/// zero-initialized attention and identity norms carry generic gradients.
pub fn randomized_net(cfg: &NetConfig, seed: u64) -> Result<AsapNet> {
    let mut net = AsapNet::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut noise = |n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let updates: Vec<Vec<f64>> = net
        .params
        .entries()
        .iter()
        .map(|e| {
            let n = e.tensor.numel();
            let jitter = match e.kind {
                ParamKind::ConvWeight if e.name.starts_with("attention.") => noise(n, 0.3),
                ParamKind::ConvWeight => noise(n, 0.05),
                ParamKind::NormGamma => noise(n, 0.2).into_iter().map(|v| v + 1.0).collect(),
                _ => noise(n, 0.1),
            };
            if e.kind == ParamKind::ConvWeight && !e.name.starts_with("attention.") {
                e.tensor.data().iter().zip(jitter).map(|(a, b)| a + b).collect()
            } else {
                jitter
            }
        })
        .collect();
    for (i, v) in updates.into_iter().enumerate() {
        net.params.set_values(crate::network::ParamId(i), v)?;
    }
    Ok(net)
}

/// Central-difference check of the whole training-mode forward pass (main
/// and both auxiliary heads) against reverse-mode gradients. The objective
/// is a fixed random projection of all three logit maps. Probed elements
/// are a random sample of the input plus a few from every parameter tensor.
pub fn model_gradcheck(cfg: &GradcheckConfig) -> Result<FiniteDiffReport> {
    let net = randomized_net(&cfg.net, cfg.seed)?;
    let [n, c, h, w] = cfg.input;
    if c != 3 {
        return Err(TensorError::Shape(format!("gradcheck input needs 3 channels, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let x = Tensor::new((0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect(), &cfg.input)?;
    let k = cfg.net.n_classes;
    let proj: Vec<Tensor> = (0..3)
        .map(|_| {
            let v = (0..n * k * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(v, &[n, k, h, w])
        })
        .collect::<Result<_>>()?;

    let objective = |inputs: &[Tensor]| -> Result<Tensor> {
        let params = net.params.with_tensors(&inputs[1..])?;
        let mut stats = net.stats.clone();
        let mut ctx = Ctx::train(&params, &mut stats);
        let out = net.forward_ctx(&mut ctx, &inputs[0])?;
        let (a1, a2) = out
            .aux
            .ok_or_else(|| TensorError::Contract("training forward lacks auxiliary heads".into()))?;
        let mut total = out.logits.mul(&proj[0])?.mean();
        total = total.add(&a1.mul(&proj[1])?.mean())?;
        total.add(&a2.mul(&proj[2])?.mean())
    };

    let mut inputs = vec![x];
    inputs.extend(net.params.tensors());
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let want = if i == 0 { cfg.input_coords } else { cfg.coords_per_param };
        let numel = t.numel();
        if want >= numel {
            coords.extend((0..numel).map(|j| (i, j)));
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, numel, want).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|j| (i, j)));
        }
    }
    finite_diff_check_coords(objective, &inputs, &coords, cfg.h, cfg.tol)
}

/// Names of parameters whose gradient is identically zero after one
/// backward of the training objective on random data.
pub fn dead_parameters(net: &AsapNet, image: &Tensor, labels: &[u8]) -> Result<Vec<String>> {
    let mut stats = net.stats.clone();
    let mut ctx = Ctx::train(&net.params, &mut stats);
    let out = net.forward_ctx(&mut ctx, image)?;
    let (a1, a2) = out
        .aux
        .ok_or_else(|| TensorError::Contract("training forward lacks auxiliary heads".into()))?;
    let loss = crate::loss::total_loss(&out.logits, &a1, &a2, labels, &Default::default())
        .map_err(|e| TensorError::Contract(e.to_string()))?;
    net.params.zero_grads();
    loss.total.backward()?;
    let dead = net
        .params
        .entries()
        .iter()
        .filter(|e| e.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
        .map(|e| e.name.clone())
        .collect();
    net.params.zero_grads();
    Ok(dead)
}
