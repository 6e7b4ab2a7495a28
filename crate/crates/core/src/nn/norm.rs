//! Batch, layer and instance normalization over NCHW tensors.
//!
//! All three share one kernel that standardizes groups of elements; they
//! differ only in which (sample, channel) blocks form a group:
//!
//! | norm     | group of block (n, c) | elements per group |
//! |----------|-----------------------|--------------------|
//! | batch    | c                     | N·H·W              |
//! | layer    | n                     | C·H·W              |
//! | instance | n·C + c               | H·W                |
//!
//! Variances are population variances, and the standardized value is
//! `(x − μ) / sqrt(σ² + ε)`.

use crate::tensor::counter;
use crate::tensor::{Result, Shape, Tensor, TensorError};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters shared by all normalizations.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl NormParams {
    pub fn new(gamma: Tensor, beta: Tensor, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("epsilon must be positive, got {eps}")));
        }
        if gamma.rank() != 1 || gamma.dims() != beta.dims() {
            return Err(TensorError::Shape(format!(
                "gamma {:?} / beta {:?} must be equal-length vectors",
                gamma.dims(),
                beta.dims()
            )));
        }
        Ok(NormParams { gamma, beta, eps })
    }

    /// gamma = 1, beta = 0.
    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(
            Tensor::ones(&[channels])?,
            Tensor::zeros(&[channels])?,
            DEFAULT_EPS,
        )
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, c: usize) -> Result<()> {
        if self.channels() != c {
            return Err(TensorError::Shape(format!(
                "norm params for {} channels applied to {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Exponential moving averages of batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    /// Number of training batches folded in; eval refuses to run at zero.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self::with_momentum(channels, DEFAULT_MOMENTUM)
    }

    pub fn with_momentum(channels: usize, momentum: f64) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            updates: 0,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates += 1;
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGroups {
    Batch,
    Layer,
    Instance,
}

impl NormGroups {
    fn count(self, n: usize, c: usize) -> usize {
        match self {
            NormGroups::Batch => c,
            NormGroups::Layer => n,
            NormGroups::Instance => n * c,
        }
    }

    fn of(self, n: usize, c: usize, channels: usize) -> usize {
        match self {
            NormGroups::Batch => c,
            NormGroups::Layer => n,
            NormGroups::Instance => n * channels + c,
        }
    }
}

/// Per-group mean and population variance.
fn group_stats(x: &Tensor, groups: NormGroups) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.shape().nchw()?;
    let hw = h * w;
    let ng = groups.count(n, c);
    let per_group = (n * c * hw / ng) as f64;
    let mut mean = vec![0.0; ng];
    let mut var = vec![0.0; ng];
    for (b, block) in x.data().chunks(hw).enumerate() {
        mean[groups.of(b / c, b % c, c)] += block.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= per_group);
    for (b, block) in x.data().chunks(hw).enumerate() {
        let g = groups.of(b / c, b % c, c);
        var[g] += block.iter().map(|v| (v - mean[g]).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= per_group);
    counter::add_norm_passes(2 * x.numel());
    Ok((mean, var))
}

/// Standardizes each group to zero mean and unit variance (up to ε).
pub fn standardize(x: &Tensor, groups: NormGroups, eps: f64) -> Result<Tensor> {
    let (mean, var) = group_stats(x, groups)?;
    standardize_with(x, groups, &mean, &var, eps)
}

fn standardize_with(
    x: &Tensor,
    groups: NormGroups,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw()?;
    let hw = h * w;
    let ng = groups.count(n, c);
    let per_group = (n * c * hw / ng) as f64;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.numel());
    for (b, block) in x.data().chunks(hw).enumerate() {
        let g = groups.of(b / c, b % c, c);
        xhat.extend(block.iter().map(|v| (v - mean[g]) * inv_std[g]));
    }
    counter::add_norm_passes(x.numel());
    let saved = xhat.clone();
    Ok(Tensor::from_op(
        "standardize",
        x.shape().clone(),
        xhat,
        vec![x.clone()],
        move |g| {
            // dx = inv_std · (g − mean(g) − x̂ · mean(g · x̂)) within a group
            let mut sum_g = vec![0.0; ng];
            let mut sum_gx = vec![0.0; ng];
            for (b, (gb, xb)) in g.chunks(hw).zip(saved.chunks(hw)).enumerate() {
                let k = groups.of(b / c, b % c, c);
                for (gv, xv) in gb.iter().zip(xb) {
                    sum_g[k] += gv;
                    sum_gx[k] += gv * xv;
                }
            }
            let mut dx = Vec::with_capacity(g.len());
            for (b, (gb, xb)) in g.chunks(hw).zip(saved.chunks(hw)).enumerate() {
                let k = groups.of(b / c, b % c, c);
                let (mg, mgx) = (sum_g[k] / per_group, sum_gx[k] / per_group);
                dx.extend(
                    gb.iter()
                        .zip(xb)
                        .map(|(gv, xv)| inv_std[k] * (gv - mg - xv * mgx)),
                );
            }
            vec![Some(dx)]
        },
    ))
}

/// `y[n,c,h,w] = scale[c] · x[n,c,h,w] + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw()?;
    if scale.dims() != [c] || shift.dims() != [c] {
        return Err(TensorError::Shape(format!(
            "affine params {:?}/{:?} for {c} channels",
            scale.dims(),
            shift.dims()
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for (b, block) in x.data().chunks(hw).enumerate() {
        let ch = b % c;
        let (s, t) = (scale.data()[ch], shift.data()[ch]);
        out.extend(block.iter().map(|v| s * v + t));
    }
    counter::add_norm_passes(x.numel());
    let (xs, ss) = (x.clone(), scale.clone());
    let parents = vec![x.clone(), scale.clone(), shift.clone()];
    Ok(Tensor::from_op("channel_affine", x.shape().clone(), out, parents, move |g| {
        let dx = xs.requires_grad().then(|| {
            let mut dx = Vec::with_capacity(g.len());
            for (b, gb) in g.chunks(hw).enumerate() {
                let s = ss.data()[b % c];
                dx.extend(gb.iter().map(|v| s * v));
            }
            dx
        });
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        for (b, (gb, xb)) in g.chunks(hw).zip(xs.data().chunks(hw)).enumerate() {
            let ch = b % c;
            dshift[ch] += gb.iter().sum::<f64>();
            dscale[ch] += gb.iter().zip(xb).map(|(g, x)| g * x).sum::<f64>();
        }
        debug_assert_eq!(g.len(), n * c * hw);
        vec![dx, Some(dscale), Some(dshift)]
    }))
}

pub fn layer_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let (_, c, _, _) = x.shape().nchw()?;
    p.check(c)?;
    channel_affine(&standardize(x, NormGroups::Layer, p.eps)?, &p.gamma, &p.beta)
}

pub fn instance_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let (_, c, _, _) = x.shape().nchw()?;
    p.check(c)?;
    channel_affine(&standardize(x, NormGroups::Instance, p.eps)?, &p.gamma, &p.beta)
}

pub fn batch_norm(x: &Tensor, p: &NormParams, mode: BatchNormMode<'_>) -> Result<Tensor> {
    let (_, c, _, _) = x.shape().nchw()?;
    p.check(c)?;
    let xhat = match mode {
        BatchNormMode::Train(stats) => {
            if stats.mean.len() != c {
                return Err(TensorError::Shape(format!(
                    "running stats for {} channels applied to {c}",
                    stats.mean.len()
                )));
            }
            let (mean, var) = group_stats(x, NormGroups::Batch)?;
            stats.update(&mean, &var);
            standardize_with(x, NormGroups::Batch, &mean, &var, p.eps)?
        }
        BatchNormMode::Eval(stats) => {
            if stats.updates == 0 {
                return Err(TensorError::State(
                    "batch norm evaluated before any running statistics were recorded".into(),
                ));
            }
            if stats.mean.len() != c {
                return Err(TensorError::Shape(format!(
                    "running stats for {} channels applied to {c}",
                    stats.mean.len()
                )));
            }
            let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            let shift: Vec<f64> = stats.mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            channel_affine(
                x,
                &Tensor::from_shape(Shape::new(&[c])?, inv)?,
                &Tensor::from_shape(Shape::new(&[c])?, shift)?,
            )?
        }
    };
    channel_affine(&xhat, &p.gamma, &p.beta)
}
