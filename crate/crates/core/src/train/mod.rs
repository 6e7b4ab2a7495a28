//! SGD with momentum, the polynomial-decay training loop, evaluation and
//! binary checkpoints.

mod ablation;
mod checkpoint;

pub use ablation::{run_variant, AblationRow};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, augment, AugmentConfig, DataError, Image, LabelMap};
use crate::loss::{self, ConfusionMatrix, LossError, LossWeights, MiouReport};
use crate::network::{AsapNet, Mode, NetConfig, ParamId, ParamStore};
use crate::tensor::{self, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    /// Added to conv-weight gradients only.
    pub weight_decay: f64,
    pub base_lr: f64,
    /// Exponent of the polynomial decay `(1 − step/max_steps)^power`.
    pub power: f64,
    pub max_steps: u64,
    /// Validation period in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.01,
            power: 0.9,
            max_steps: 1000,
            eval_every: 0,
            seed: 0,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.power > 0.0) {
            return bad(format!("power {} must be positive", self.power));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.max_steps == 0 {
            return self.base_lr;
        }
        let frac = 1.0 - step as f64 / self.max_steps as f64;
        self.base_lr * frac.max(0.0).powf(self.power)
    }
}

/// Momentum buffers, one per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn zeros(params: &ParamStore) -> Self {
        SgdState {
            velocity: params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect(),
        }
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`, with decay on conv weights
/// only. Parameters without a gradient are treated as having a zero one.
/// Any non-finite gradient aborts the step before anything changes.
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{} momentum buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let grads: Vec<Option<Vec<f64>>> = params.entries().iter().map(|e| e.tensor.grad()).collect();
    for (e, g) in params.entries().iter().zip(&grads) {
        if let Some(i) = g.as_ref().and_then(|g| g.iter().position(|v| !v.is_finite())) {
            return Err(TrainError::Numeric(format!("gradient of {} at index {i}", e.name)));
        }
    }
    for (i, g) in grads.into_iter().enumerate() {
        let entry = &params.entries()[i];
        let wd = if entry.kind.decays() { weight_decay } else { 0.0 };
        let p = entry.tensor.data();
        let v = &mut state.velocity[i];
        let mut next = Vec::with_capacity(p.len());
        for (j, (vj, &pj)) in v.iter_mut().zip(p).enumerate() {
            let gj = g.as_ref().map_or(0.0, |g| g[j]);
            *vj = momentum * *vj + (gj + wd * pj);
            next.push(pj - lr * *vj);
        }
        params.set_values(ParamId(i), next)?;
    }
    Ok(())
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: AsapNet,
    pub sgd: SgdState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let net = AsapNet::new(config, seed)?;
        let sgd = SgdState::zeros(&net.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep the data stream apart from the one that initialized weights.
        rng.set_stream(1);
        Ok(TrainState { net, sgd, step: 0, rng })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

impl TraceRecord {
    pub const HEADER: &'static str = "step\tlr\tloss\tmiou";

    /// Tab-separated line; a missing mIoU is written as `-`.
    pub fn to_line(&self) -> String {
        let miou = self.miou.map_or_else(|| "-".to_string(), |m| format!("{m:.6}"));
        format!("{}\t{:.6e}\t{:.6}\t{miou}", self.step, self.lr, self.loss)
    }
}

/// One forward/backward/update on a prepared batch. Returns the loss.
pub fn train_step(state: &mut TrainState, images: &tensor::Tensor, labels: &[u8], lr: f64, cfg: &TrainConfig) -> Result<f64> {
    let out = state.net.forward(images, Mode::Train)?;
    let (aux1, aux2) = out
        .aux
        .ok_or_else(|| TrainError::Config("training forward produced no auxiliary heads".into()))?;
    let loss = loss::total_loss(&out.logits, &aux1, &aux2, labels, &cfg.loss)?;
    let value = loss.total.item()?;
    if !value.is_finite() {
        return Err(TrainError::Numeric(format!("loss {value}")));
    }
    state.net.params.zero_grads();
    loss.total.backward()?;
    sgd_step(&mut state.net.params, &mut state.sgd, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(value)
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    train: &[(Image, LabelMap)],
    cfg: &TrainConfig,
) -> Result<(tensor::Tensor, Vec<u8>)> {
    let mut picked = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (img, lab) = &train[rng.random_range(0..train.len())];
        picked.push(augment(img, lab, &cfg.augment, rng));
    }
    let refs: Vec<(&Image, &LabelMap)> = picked.iter().map(|(i, l)| (i, l)).collect();
    Ok(data::batch(&refs)?)
}

/// Runs until `state.step` reaches `cfg.max_steps`, calling `on_record`
/// after every step. Validation runs every `eval_every` steps and after
/// the final step when `val` is non-empty. Batches whose every pixel is
/// ignored are skipped with a warning.
pub fn train_loop(
    state: &mut TrainState,
    train: &[(Image, LabelMap)],
    val: &[(Image, LabelMap)],
    cfg: &TrainConfig,
    on_record: impl FnMut(&TraceRecord),
) -> Result<Vec<TraceRecord>> {
    train_until(state, train, val, cfg, cfg.max_steps, on_record)
}

/// [`train_loop`] that stops early once `state.step` reaches `stop`. The
/// schedule still follows `cfg.max_steps`, so a later call picks up the
/// same trajectory.
pub fn train_until(
    state: &mut TrainState,
    train: &[(Image, LabelMap)],
    val: &[(Image, LabelMap)],
    cfg: &TrainConfig,
    stop: u64,
    mut on_record: impl FnMut(&TraceRecord),
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    let stop = stop.min(cfg.max_steps);
    if train.is_empty() && state.step < stop {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut trace = Vec::new();
    while state.step < stop {
        let lr = cfg.lr_at(state.step);
        let (images, labels) = sample_batch(&mut state.rng, train, cfg)?;
        let loss = match train_step(state, &images, &labels, lr, cfg) {
            Ok(l) => l,
            Err(TrainError::Loss(LossError::DegenerateBatch)) => {
                log::warn!("step {}: batch has no labelled pixels, skipped", state.step + 1);
                state.step += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        state.step += 1;
        let due = (cfg.eval_every > 0 && state.step % cfg.eval_every == 0) || state.step == cfg.max_steps;
        let miou = if due && !val.is_empty() {
            Some(evaluate(&state.net, val, cfg.batch_size)?.1.mean)
        } else {
            None
        };
        let record = TraceRecord {
            step: state.step,
            lr,
            loss,
            miou,
        };
        on_record(&record);
        trace.push(record);
    }
    Ok(trace)
}

/// Sets batch-norm running statistics to the average of per-batch
/// statistics over `samples`, leaving parameters untouched. Lets a network
/// that never trained be evaluated.
pub fn calibrate_batch_norm(net: &mut AsapNet, samples: &[(Image, LabelMap)], batch_size: usize) -> Result<()> {
    let _guard = tensor::no_grad();
    let saved: Vec<f64> = net.stats.stats.iter().map(|s| s.momentum).collect();
    let mut outcome = Ok(());
    for (k, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        for s in &mut net.stats.stats {
            s.momentum = 1.0 / (k + 1) as f64;
        }
        let refs: Vec<(&Image, &LabelMap)> = chunk.iter().map(|(i, l)| (i, l)).collect();
        outcome = data::batch(&refs)
            .and_then(|(images, _)| net.forward(&images, Mode::Train).map(|_| ()))
            .map_err(TrainError::from);
        if outcome.is_err() {
            break;
        }
    }
    for (s, m) in net.stats.stats.iter_mut().zip(saved) {
        s.momentum = m;
    }
    outcome
}

/// Eval-mode confusion matrix and mIoU over `samples`.
pub fn evaluate(net: &AsapNet, samples: &[(Image, LabelMap)], batch_size: usize) -> Result<(ConfusionMatrix, MiouReport)> {
    let mut cm = ConfusionMatrix::new(net.config.n_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<(&Image, &LabelMap)> = chunk.iter().map(|(i, l)| (i, l)).collect();
        let (images, labels) = data::batch(&refs)?;
        let pred = net.predict_labels(&images)?;
        let mut part = ConfusionMatrix::new(net.config.n_classes);
        part.accumulate(&labels, &pred, loss::IGNORE_LABEL)?;
        cm.merge(&part)?;
    }
    let report = loss::miou(&cm)?;
    Ok((cm, report))
}
