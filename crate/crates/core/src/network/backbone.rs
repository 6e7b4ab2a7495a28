use rand::Rng;

use super::params::{Builder, ConvBlock, Ctx};
use crate::tensor::{Result, Tensor, TensorError};

/// Four-stage residual encoder with output strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(TensorError::Contract(format!("invalid backbone config {self:?}")));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    ///
    /// stem: 3×3 conv 3→c₀ plus batch-norm affine. Each stage opens with a
    /// strided residual block carrying a 1×1 projection shortcut, then
    /// repeats identity residual blocks; a block holds two 3×3 convs, each
    /// followed by a batch norm.
    pub fn param_count(&self) -> usize {
        let c = self.stage_channels;
        let conv_bn = |cin: usize, cout: usize, k: usize| k * k * cin * cout + 2 * cout;
        let mut total = conv_bn(3, c[0], 3);
        let mut cin = c[0];
        for &cs in &c {
            total += conv_bn(cin, cs, 3) + conv_bn(cs, cs, 3) + conv_bn(cin, cs, 1);
            total += (self.blocks_per_stage - 1) * 2 * conv_bn(cs, cs, 3);
            cin = cs;
        }
        total
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    first: ConvBlock,
    second: ConvBlock,
    shortcut: Option<ConvBlock>,
}

impl ResidualBlock {
    fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, &y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBlock,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.stage_channels;
        let stem = b.conv_block("backbone.stem", 3, c[0], 3, 2, true)?;
        let mut cin = c[0];
        let mut stages = Vec::new();
        for (s, &cs) in c.iter().enumerate() {
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks_per_stage {
                let name = format!("backbone.stage{}.block{i}", s + 1);
                let (bin, stride) = if i == 0 { (cin, 2) } else { (cs, 1) };
                blocks.push(ResidualBlock {
                    first: b.conv_block(&format!("{name}.conv1"), bin, cs, 3, stride, true)?,
                    second: b.conv_block(&format!("{name}.conv2"), cs, cs, 3, 1, false)?,
                    shortcut: if i == 0 {
                        Some(b.conv_block(&format!("{name}.proj"), bin, cs, 1, 2, false)?)
                    } else {
                        None
                    },
                });
            }
            stages.push(blocks);
            cin = cs;
        }
        Ok(Backbone { stem, stages })
    }

    /// Stage features at strides 4, 8, 16, 32.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: &Tensor) -> Result<[Tensor; 4]> {
        let (_, c, h, w) = image.shape().nchw()?;
        if c != 3 {
            return Err(TensorError::Shape(format!("expected RGB input, got {c} channels")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(TensorError::Shape(format!(
                "input {h}x{w} is not a multiple of 32"
            )));
        }
        let mut x = self.stem.forward(ctx, image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, &x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }
}
