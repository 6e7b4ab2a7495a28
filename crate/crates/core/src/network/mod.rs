//! The segmentation network: residual backbone, top-down pyramid neck,
//! normalization-based fusion, axial self-attention and prediction heads.

mod attention;
mod backbone;
mod ffdn;
mod fpn;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{
    axial_attention, vertical_attention, AttentionConfig, AttentionOutput, AttentionParams,
    AxialAttention, PoolAxis,
};
pub use backbone::{Backbone, BackboneConfig};
pub use ffdn::{Ffdn, FusionMode};
pub use fpn::{FeaturePyramid, StarFpn};
pub use params::{
    BatchNormLayer, ConvBlock, ConvLayer, Ctx, NormLayer, ParamEntry, ParamId, ParamKind,
    ParamStore, StatsStore,
};

use crate::nn::{self, ResizeMode};
use crate::tensor::{self, Result, Tensor, TensorError};
use params::Builder;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    /// Channel width `d` of every pyramid level and of the fused feature.
    pub fpn_width: usize,
    pub n_classes: usize,
    /// `None` drops the attention block.
    pub attention: Option<PoolAxis>,
    pub fusion: FusionMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            backbone: BackboneConfig::default(),
            fpn_width: 32,
            n_classes: 5,
            attention: Some(PoolAxis::Vertical),
            fusion: FusionMode::Both,
        }
    }
}

/// Ablation variants of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoAttention,
    HorizontalAttention,
    LnOnly,
    InOnly,
    NoFfdn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoAttention,
        Variant::HorizontalAttention,
        Variant::LnOnly,
        Variant::InOnly,
        Variant::NoFfdn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no_attention",
            Variant::HorizontalAttention => "horizontal_attention",
            Variant::LnOnly => "ln_only",
            Variant::InOnly => "in_only",
            Variant::NoFfdn => "no_ffdn",
        }
    }

    pub fn apply(self, base: &NetConfig) -> NetConfig {
        let mut cfg = base.clone();
        cfg.attention = Some(PoolAxis::Vertical);
        cfg.fusion = FusionMode::Both;
        match self {
            Variant::Full => {}
            Variant::NoAttention => cfg.attention = None,
            Variant::HorizontalAttention => cfg.attention = Some(PoolAxis::Horizontal),
            Variant::LnOnly => cfg.fusion = FusionMode::LayerOnly,
            Variant::InOnly => cfg.fusion = FusionMode::InstanceOnly,
            Variant::NoFfdn => cfg.fusion = FusionMode::Plain,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 3×3 conv block → 1×1 classifier → bilinear resize to the input size.
#[derive(Debug, Clone)]
pub struct SegHead {
    block: ConvBlock,
    classifier: ConvLayer,
}

impl SegHead {
    fn build<R: rand::Rng>(b: &mut Builder<'_, R>, name: &str, width: usize, classes: usize) -> Result<Self> {
        Ok(SegHead {
            block: b.conv_block(&format!("{name}.block"), width, width, 3, 1, true)?,
            classifier: b.conv(&format!("{name}.classifier"), width, classes, 1, 1, true, false)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
        let y = self.block.forward(ctx, x)?;
        let y = self.classifier.forward(ctx, &y)?;
        nn::resize(&y, size, ResizeMode::Bilinear)
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Tensor,
    /// Heads on P3 and P4; present only in training mode.
    pub aux: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct AsapNet {
    pub config: NetConfig,
    pub params: ParamStore,
    pub stats: StatsStore,
    pub backbone: Backbone,
    pub fpn: StarFpn,
    pub ffdn: Ffdn,
    pub attention: Option<AxialAttention>,
    pub head: SegHead,
    pub aux_heads: [SegHead; 2],
}

impl AsapNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        if config.fpn_width == 0 || config.n_classes == 0 {
            return Err(TensorError::Contract(format!("invalid network config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let d = config.fpn_width;
        let backbone = Backbone::build(&mut b, &config.backbone)?;
        let fpn = StarFpn::build(&mut b, config.backbone.stage_channels, d)?;
        let ffdn = Ffdn::build(&mut b, d, config.fusion)?;
        let attention = config
            .attention
            .map(|axis| AxialAttention::build(&mut b, AttentionConfig::new(d), axis))
            .transpose()?;
        let head = SegHead::build(&mut b, "head", d, config.n_classes)?;
        let aux_heads = [
            SegHead::build(&mut b, "aux1", d, config.n_classes)?,
            SegHead::build(&mut b, "aux2", d, config.n_classes)?,
        ];
        Ok(AsapNet {
            config,
            params: b.params,
            stats: b.stats,
            backbone,
            fpn,
            ffdn,
            attention,
            head,
            aux_heads,
        })
    }

    /// Runs the full pipeline against an explicit context. Auxiliary heads
    /// run only when the context is in training mode.
    pub fn forward_ctx(&self, ctx: &mut Ctx<'_>, image: &Tensor) -> Result<NetOutput> {
        let (_, _, h, w) = image.shape().nchw()?;
        let stages = self.backbone.forward(ctx, image)?;
        let pyramid = self.fpn.forward(ctx, &stages)?;
        let fused = self.ffdn.forward(ctx, &pyramid)?;
        let attended = match &self.attention {
            Some(a) => a.forward(ctx, &fused)?.output,
            None => fused,
        };
        let logits = self.head.forward(ctx, &attended, (h, w))?;
        let aux = if ctx.is_train() {
            Some(self.aux_forward(ctx, &pyramid, (h, w))?)
        } else {
            None
        };
        Ok(NetOutput { logits, aux })
    }

    pub fn aux_forward(
        &self,
        ctx: &mut Ctx<'_>,
        pyramid: &FeaturePyramid,
        size: (usize, usize),
    ) -> Result<(Tensor, Tensor)> {
        Ok((
            self.aux_heads[0].forward(ctx, pyramid.p(3), size)?,
            self.aux_heads[1].forward(ctx, pyramid.p(4), size)?,
        ))
    }

    pub fn forward(&mut self, image: &Tensor, mode: Mode) -> Result<NetOutput> {
        match mode {
            Mode::Train => {
                let mut stats = std::mem::take(&mut self.stats);
                let out = {
                    let mut ctx = Ctx::train(&self.params, &mut stats);
                    self.forward_ctx(&mut ctx, image)
                };
                self.stats = stats;
                out
            }
            Mode::Eval => {
                let mut ctx = Ctx::eval(&self.params, &self.stats);
                self.forward_ctx(&mut ctx, image)
            }
        }
    }

    /// Eval-mode logits without recording a graph.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let _guard = tensor::no_grad();
        let mut ctx = Ctx::eval(&self.params, &self.stats);
        Ok(self.forward_ctx(&mut ctx, image)?.logits)
    }

    /// Per-pixel argmax class of eval-mode logits, `[N, H, W]` flattened.
    pub fn predict_labels(&self, image: &Tensor) -> Result<Vec<u8>> {
        argmax_channels(&self.predict(image)?)
    }
}

/// Argmax over the channel axis of NCHW logits.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.shape().nchw()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(i * k + c) * hw + p] > d[(i * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
