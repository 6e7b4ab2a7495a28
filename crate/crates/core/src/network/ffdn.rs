use rand::Rng;

use super::fpn::FeaturePyramid;
use super::params::{Builder, ConvLayer, Ctx, NormLayer};
use crate::nn::{self, ResizeMode};
use crate::tensor::{Result, Tensor};

/// Which normalized branches the fusion keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Layer-normalized plus instance-normalized sum.
    Both,
    LayerOnly,
    InstanceOnly,
    /// Raw sum of the resized projections.
    Plain,
}

/// Fusion with different norms: project every level with a 1×1 conv,
/// bilinearly resize to P1, sum, then add the layer-normalized and the
/// instance-normalized views of that sum.
#[derive(Debug, Clone)]
pub struct Ffdn {
    projections: Vec<ConvLayer>,
    layer_norm: NormLayer,
    instance_norm: NormLayer,
    pub mode: FusionMode,
}

impl Ffdn {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, width: usize, mode: FusionMode) -> Result<Self> {
        let mut projections = Vec::new();
        for i in 0..4 {
            projections.push(b.conv(&format!("ffdn.proj{}", i + 1), width, width, 1, 1, true, false)?);
        }
        Ok(Ffdn {
            projections,
            layer_norm: b.norm("ffdn.ln", width)?,
            instance_norm: b.norm("ffdn.in", width)?,
            mode,
        })
    }

    /// Resized projections summed at P1 resolution.
    pub fn aggregate(&self, ctx: &Ctx<'_>, pyr: &FeaturePyramid) -> Result<Tensor> {
        let (_, _, h, w) = pyr.p(1).shape().nchw()?;
        let mut sum: Option<Tensor> = None;
        for (proj, level) in self.projections.iter().zip(&pyr.levels) {
            let y = nn::resize(&proj.forward(ctx, level)?, (h, w), ResizeMode::Bilinear)?;
            sum = Some(match sum {
                Some(s) => s.add(&y)?,
                None => y,
            });
        }
        Ok(sum.expect("four levels"))
    }

    pub fn forward(&self, ctx: &Ctx<'_>, pyr: &FeaturePyramid) -> Result<Tensor> {
        let s = self.aggregate(ctx, pyr)?;
        let ln = || nn::layer_norm(&s, &self.layer_norm.params(ctx.params)?);
        let inorm = || nn::instance_norm(&s, &self.instance_norm.params(ctx.params)?);
        match self.mode {
            FusionMode::Both => ln()?.add(&inorm()?),
            FusionMode::LayerOnly => ln(),
            FusionMode::InstanceOnly => inorm(),
            FusionMode::Plain => Ok(s),
        }
    }
}
