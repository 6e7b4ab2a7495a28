//! Self-attention over one spatial axis of an average-pooled feature.
//!
//! For the vertical variant, `F ∈ R^{N×C×H×W}` is averaged over its full
//! height to `F̂ ∈ R^{N×C×1×W}`. Query and key 1×1 convs reduce to `Ĉ`
//! channels and the value conv keeps `C`, so the `W×W` affinity
//! `A[j, i] = softmax_i(Q_j · K_i)` can reweight values per column. The
//! attended row is tiled back to height `H` and added to `F`.

use rand::Rng;

use super::params::{Builder, ConvLayer, Ctx};
use crate::nn::{self, ConvParams, ResizeMode};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Pool over height, attend across width.
    Vertical,
    /// Pool over width, attend across height.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    /// Query/key width `Ĉ`.
    pub reduced: usize,
}

impl AttentionConfig {
    /// `Ĉ = max(1, C / 8)`.
    pub fn new(channels: usize) -> Self {
        AttentionConfig {
            channels,
            reduced: (channels / 8).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduced == 0 || self.reduced > self.channels {
            return Err(TensorError::Contract(format!(
                "reduced width {} outside 1..={}",
                self.reduced, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: ConvParams,
    pub key: ConvParams,
    pub value: ConvParams,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Same shape as the input.
    pub output: Tensor,
    /// `[N, L, L]`, rows indexed by query position.
    pub affinity: Tensor,
}

pub fn axial_attention(f: &Tensor, p: &AttentionParams, axis: PoolAxis) -> Result<AttentionOutput> {
    let (n, c, h, w) = f.shape().nchw()?;
    if p.value.out_channels() != c || p.query.out_channels() != p.key.out_channels() {
        return Err(TensorError::Shape(format!(
            "attention widths q={} k={} v={} for {c} input channels",
            p.query.out_channels(),
            p.key.out_channels(),
            p.value.out_channels()
        )));
    }
    let (kernel, len) = match axis {
        PoolAxis::Vertical => ((h, 1), w),
        PoolAxis::Horizontal => ((1, w), h),
    };
    let pooled = nn::avg_pool(f, kernel)?;
    let project = |cp: &ConvParams| -> Result<Tensor> {
        let y = nn::conv2d(&pooled, cp)?;
        let ch = y.dims()[1];
        y.reshape(&[n, ch, len])
    };
    let q = project(&p.query)?;
    let k = project(&p.key)?;
    let v = project(&p.value)?;
    let logits = q.transpose_last2()?.bmm(&k)?;
    let affinity = nn::softmax_lastdim(&logits)?;
    let attended = v.bmm(&affinity.transpose_last2()?)?;
    let spread = match axis {
        PoolAxis::Vertical => nn::resize(&attended.reshape(&[n, c, 1, w])?, (h, w), ResizeMode::RowTile)?,
        PoolAxis::Horizontal => attended.reshape(&[n, c, h, 1])?.broadcast_to(&[n, c, h, w])?,
    };
    Ok(AttentionOutput {
        output: spread.add(f)?,
        affinity,
    })
}

pub fn vertical_attention(f: &Tensor, p: &AttentionParams) -> Result<AttentionOutput> {
    axial_attention(f, p, PoolAxis::Vertical)
}

#[derive(Debug, Clone)]
pub struct AxialAttention {
    pub(crate) query: ConvLayer,
    pub(crate) key: ConvLayer,
    pub(crate) value: ConvLayer,
    pub axis: PoolAxis,
    pub config: AttentionConfig,
}

impl AxialAttention {
    /// Q, K and V start at zero so the block begins as the identity.
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: AttentionConfig, axis: PoolAxis) -> Result<Self> {
        cfg.validate()?;
        let (c, r) = (cfg.channels, cfg.reduced);
        Ok(AxialAttention {
            query: b.conv("attention.query", c, r, 1, 1, true, true)?,
            key: b.conv("attention.key", c, r, 1, 1, true, true)?,
            value: b.conv("attention.value", c, c, 1, 1, true, true)?,
            axis,
            config: cfg,
        })
    }

    pub fn params(&self, ctx: &Ctx<'_>) -> Result<AttentionParams> {
        Ok(AttentionParams {
            query: self.query.params(ctx.params)?,
            key: self.key.params(ctx.params)?,
            value: self.value.params(ctx.params)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, f: &Tensor) -> Result<AttentionOutput> {
        axial_attention(f, &self.params(ctx)?, self.axis)
    }
}
