use std::time::Instant;

use super::{evaluate, train_loop, Result, TrainConfig, TrainState};
use crate::data::{Image, LabelMap, POLE};
use crate::network::{NetConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

impl AblationRow {
    pub fn pole_iou(&self) -> Option<f64> {
        self.per_class.get(POLE as usize).copied().flatten()
    }
}

/// Trains `variant` of `base` from scratch with `cfg` and evaluates it on
/// `val`. The seed drives both initialization and data order.
pub fn run_variant(
    base: &NetConfig,
    variant: Variant,
    train: &[(Image, LabelMap)],
    val: &[(Image, LabelMap)],
    cfg: &TrainConfig,
) -> Result<AblationRow> {
    let start = Instant::now();
    let mut state = TrainState::new(variant.apply(base), cfg.seed)?;
    let trace = train_loop(&mut state, train, val, &TrainConfig { eval_every: 0, ..cfg.clone() }, |r| {
        if r.step % 250 == 0 {
            log::info!("{variant} seed {}: step {} loss {:.4}", cfg.seed, r.step, r.loss);
        }
    })?;
    let (_, report) = evaluate(&state.net, val, cfg.batch_size)?;
    Ok(AblationRow {
        variant,
        seed: cfg.seed,
        params: state.net.params.numel(),
        miou: report.mean,
        per_class: report.per_class,
        final_loss: trace.last().map(|r| r.loss),
        seconds: start.elapsed().as_secs_f64(),
    })
}
