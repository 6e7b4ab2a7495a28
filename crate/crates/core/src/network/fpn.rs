use rand::Rng;

use super::params::{Builder, ConvBlock, ConvLayer, Ctx};
use crate::nn;
use crate::tensor::{Result, Tensor, TensorError};

/// Pyramid levels P1..P4 at strides 4, 8, 16, 32, all with the same width.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 4]) -> Result<Self> {
        let (n, c, _, _) = levels[0].shape().nchw()?;
        for i in 0..3 {
            let (n0, c0, h0, w0) = levels[i].shape().nchw()?;
            let (n1, c1, h1, w1) = levels[i + 1].shape().nchw()?;
            if n0 != n || n1 != n || c0 != c || c1 != c || h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(TensorError::Shape(format!(
                    "pyramid level P{} {:?} is not twice P{} {:?}",
                    i + 1,
                    levels[i].dims(),
                    i + 2,
                    levels[i + 1].dims()
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn p(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }

    pub fn width(&self) -> usize {
        self.levels[0].dims()[1]
    }
}

/// Top-down neck: 1×1 laterals, nearest 2× merges from coarse to fine, then
/// one 3×3 conv block per level.
#[derive(Debug, Clone)]
pub struct StarFpn {
    pub(crate) laterals: Vec<ConvLayer>,
    refine: Vec<ConvBlock>,
}

impl StarFpn {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, stage_channels: [usize; 4], width: usize) -> Result<Self> {
        let mut laterals = Vec::new();
        for (i, &c) in stage_channels.iter().enumerate() {
            laterals.push(b.conv(&format!("fpn.lateral{}", i + 1), c, width, 1, 1, true, false)?);
        }
        let mut refine = Vec::new();
        for i in 0..4 {
            refine.push(b.conv_block(&format!("fpn.refine{}", i + 1), width, width, 3, 1, true)?);
        }
        Ok(StarFpn { laterals, refine })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, stages: &[Tensor; 4]) -> Result<FeaturePyramid> {
        for i in 0..3 {
            let (_, _, h0, w0) = stages[i].shape().nchw()?;
            let (_, _, h1, w1) = stages[i + 1].shape().nchw()?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(TensorError::Shape(format!(
                    "stage {} {:?} and stage {} {:?} do not double",
                    i + 1,
                    stages[i].dims(),
                    i + 2,
                    stages[i + 1].dims()
                )));
            }
        }
        let lateral: Vec<Tensor> = self
            .laterals
            .iter()
            .zip(stages)
            .map(|(l, s)| l.forward(ctx, s))
            .collect::<Result<_>>()?;
        let mut merged = vec![lateral[3].clone()];
        for i in (0..3).rev() {
            let up = nn::upsample_nearest(merged.last().expect("coarser level"), 2)?;
            merged.push(lateral[i].add(&up)?);
        }
        merged.reverse();
        let mut levels = Vec::with_capacity(4);
        for (block, m) in self.refine.iter().zip(&merged) {
            levels.push(block.forward(ctx, m)?);
        }
        FeaturePyramid::new(levels.try_into().expect("four levels"))
    }

    pub fn refine_level(&self, ctx: &mut Ctx<'_>, level: usize, x: &Tensor) -> Result<Tensor> {
        self.refine[level - 1].forward(ctx, x)
    }
}
