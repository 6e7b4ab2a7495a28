use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{self, BatchNormMode, ConvParams, NormParams, RunningStats};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormGamma,
    NormBeta,
}

impl ParamKind {
    /// Weight decay only touches convolution kernels.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::ConvBias => 1,
            ParamKind::NormGamma => 2,
            ParamKind::NormBeta => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::ConvBias,
            2 => ParamKind::NormGamma,
            3 => ParamKind::NormBeta,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named trainable tensors. Order is creation order and is part of
/// the checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor: tensor.into_param(),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Swaps in new values for entry `i`; the replacement becomes a fresh
    /// gradient-tracking leaf.
    pub fn set_values(&mut self, id: ParamId, values: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if values.len() != e.tensor.numel() {
            return Err(TensorError::Shape(format!(
                "{}: {} values for {:?}",
                e.name,
                values.len(),
                e.tensor.dims()
            )));
        }
        e.tensor = Tensor::from_shape(e.tensor.shape().clone(), values)?.into_param();
        Ok(())
    }

    /// Copy of the store whose tensors are the given leaves, in order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<ParamStore> {
        if tensors.len() != self.entries.len() {
            return Err(TensorError::Contract(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.entries.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                if t.dims() != e.tensor.dims() {
                    return Err(TensorError::Shape(format!(
                        "{}: {:?} for {:?}",
                        e.name,
                        t.dims(),
                        e.tensor.dims()
                    )));
                }
                Ok(ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: t.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParamStore { entries })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn zero_grads(&self) {
        self.entries.iter().for_each(|e| e.tensor.zero_grad());
    }
}

/// Named batch-norm running statistics, indexed like the layers that use them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsStore {
    pub names: Vec<String>,
    pub stats: Vec<RunningStats>,
}

impl StatsStore {
    fn push(&mut self, name: String, channels: usize) -> usize {
        self.names.push(name);
        self.stats.push(RunningStats::new(channels));
        self.stats.len() - 1
    }
}

enum StatsAccess<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

/// What a forward pass reads parameters from and where batch-norm
/// statistics go.
pub struct Ctx<'a> {
    pub params: &'a ParamStore,
    stats: StatsAccess<'a>,
}

impl<'a> Ctx<'a> {
    /// Batch statistics for normalization, folded into `stats`.
    pub fn train(params: &'a ParamStore, stats: &'a mut StatsStore) -> Self {
        Ctx {
            params,
            stats: StatsAccess::Train(&mut stats.stats),
        }
    }

    /// Running statistics for normalization.
    pub fn eval(params: &'a ParamStore, stats: &'a StatsStore) -> Self {
        Ctx {
            params,
            stats: StatsAccess::Eval(&stats.stats),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self.stats, StatsAccess::Train(_))
    }

    fn bn_mode(&mut self, idx: usize) -> BatchNormMode<'_> {
        match &mut self.stats {
            StatsAccess::Train(s) => BatchNormMode::Train(&mut s[idx]),
            StatsAccess::Eval(s) => BatchNormMode::Eval(&s[idx]),
        }
    }
}

/// Allocates parameters with their initial values while a model is built.
pub(crate) struct Builder<'r, R: Rng> {
    pub params: ParamStore,
    pub stats: StatsStore,
    pub rng: &'r mut R,
}

impl<'r, R: Rng> Builder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Builder {
            params: ParamStore::default(),
            stats: StatsStore::default(),
            rng,
        }
    }

    /// Kaiming fan-in normal init, or zeros when `zero` is set.
    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        zero: bool,
    ) -> Result<ConvLayer> {
        let n = c_out * c_in * k * k;
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let data: Vec<f64> = if zero {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let weight = self.params.push(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            Tensor::new(data, &[c_out, c_in, k, k])?,
        );
        let bias = if bias {
            Some(self.params.push(
                format!("{name}.bias"),
                ParamKind::ConvBias,
                Tensor::zeros(&[c_out])?,
            ))
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<NormLayer> {
        let gamma = self.params.push(
            format!("{name}.gamma"),
            ParamKind::NormGamma,
            Tensor::ones(&[c])?,
        );
        let beta = self.params.push(
            format!("{name}.beta"),
            ParamKind::NormBeta,
            Tensor::zeros(&[c])?,
        );
        Ok(NormLayer { gamma, beta })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNormLayer> {
        let affine = self.norm(name, c)?;
        let stats = self.stats.push(name.to_string(), c);
        Ok(BatchNormLayer { affine, stats })
    }

    /// conv (no bias) → batch norm → optional relu.
    pub fn conv_block(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Result<ConvBlock> {
        Ok(ConvBlock {
            conv: self.conv(&format!("{name}.conv"), c_in, c_out, k, stride, false, false)?,
            bn: self.batch_norm(&format!("{name}.bn"), c_out)?,
            relu,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn params(&self, store: &ParamStore) -> Result<ConvParams> {
        ConvParams::new(
            store.get(self.weight).clone(),
            self.bias.map(|b| store.get(b).clone()),
            self.stride,
            self.padding,
        )
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        nn::conv2d(x, &self.params(ctx.params)?)
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayer {
    pub fn params(&self, store: &ParamStore) -> Result<NormParams> {
        NormParams::new(
            store.get(self.gamma).clone(),
            store.get(self.beta).clone(),
            nn::DEFAULT_EPS,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub affine: NormLayer,
    pub stats: usize,
}

impl BatchNormLayer {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let p = self.affine.params(ctx.params)?;
        nn::batch_norm(x, &p, ctx.bn_mode(self.stats))
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
    pub relu: bool,
}

impl ConvBlock {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}
