//! Online hard-example-mined cross entropy, the weighted three-head
//! objective, and confusion-matrix mIoU.

use std::cmp::Ordering;

use crate::tensor::{Shape, Tensor, TensorError};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("no scorable pixels in batch")]
    DegenerateBatch,
    #[error("no class has a non-empty union")]
    DegenerateMetric,
    #[error("label {label} outside 0..{classes}")]
    Label { label: u8, classes: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Weight of the P3 auxiliary head.
    pub alpha: f64,
    /// Weight of the P4 auxiliary head.
    pub beta: f64,
    /// Pixels whose true-class probability is below this are hard.
    pub ohem_threshold: f64,
    /// Lower bound on kept pixels; `None` means total pixels / 16.
    pub ohem_min_kept: Option<usize>,
    pub ignore_label: u8,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.4,
            beta: 0.4,
            ohem_threshold: 0.7,
            ohem_min_kept: None,
            ignore_label: IGNORE_LABEL,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(LossError::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold < 1.0) {
            return Err(LossError::Config(format!(
                "ohem threshold {} outside (0, 1)",
                self.ohem_threshold
            )));
        }
        if self.ohem_min_kept == Some(0) {
            return Err(LossError::Config("ohem_min_kept must be at least 1".into()));
        }
        Ok(())
    }

    pub fn min_kept(&self, total_pixels: usize) -> usize {
        self.ohem_min_kept.unwrap_or((total_pixels / 16).max(1))
    }
}

/// Per-pixel softmax probabilities and cross entropy for `[N, K, H, W]`
/// logits. Ignored pixels get `None`.
struct PixelTerms {
    k: usize,
    hw: usize,
    probs: Vec<f64>,
    losses: Vec<Option<f64>>,
    true_prob: Vec<f64>,
}

fn pixel_terms(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<PixelTerms> {
    let (n, k, h, w) = logits.shape().nchw()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(TensorError::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.dims()
        ))
        .into());
    }
    let d = logits.data();
    let mut probs = vec![0.0; d.len()];
    let mut losses = Vec::with_capacity(n * hw);
    let mut true_prob = vec![0.0; n * hw];
    for i in 0..n {
        let base = i * k * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let m = (0..k).map(|c| d[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (d[at(c)] - m).exp()).sum();
            let log_z = z.ln() + m;
            for c in 0..k {
                probs[at(c)] = (d[at(c)] - log_z).exp();
            }
            let label = labels[i * hw + p];
            if label == ignore {
                losses.push(None);
                continue;
            }
            if label as usize >= k {
                return Err(LossError::Label { label, classes: k });
            }
            let logp = d[at(label as usize)] - log_z;
            true_prob[i * hw + p] = logp.exp();
            losses.push(Some(-logp));
        }
    }
    Ok(PixelTerms {
        k,
        hw,
        probs,
        losses,
        true_prob,
    })
}

/// Loss-descending order with index as tie-break, so selections are unique.
fn harder(losses: &[Option<f64>]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        let (la, lb) = (losses[a].unwrap_or(0.0), losses[b].unwrap_or(0.0));
        lb.partial_cmp(&la).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    }
}

fn select(terms: &PixelTerms, w: &LossWeights) -> Result<Vec<usize>> {
    let valid: Vec<usize> = (0..terms.losses.len())
        .filter(|&i| terms.losses[i].is_some())
        .collect();
    if valid.is_empty() {
        return Err(LossError::DegenerateBatch);
    }
    let min_kept = w.min_kept(terms.losses.len());
    let hard: Vec<usize> = valid
        .iter()
        .copied()
        .filter(|&i| terms.true_prob[i] < w.ohem_threshold)
        .collect();
    if hard.len() >= min_kept {
        return Ok(hard);
    }
    let mut pool = valid;
    if pool.len() > min_kept {
        pool.select_nth_unstable_by(min_kept - 1, harder(&terms.losses));
        pool.truncate(min_kept);
    }
    pool.sort_unstable();
    Ok(pool)
}

/// Flat pixel indices (`n·H·W + y·W + x`) the hard-example rule keeps.
pub fn ohem_kept(logits: &Tensor, labels: &[u8], w: &LossWeights) -> Result<Vec<usize>> {
    w.validate()?;
    let terms = pixel_terms(logits, labels, w.ignore_label)?;
    select(&terms, w)
}

/// Mean cross entropy over the pixels kept by online hard example mining.
/// Pixels with true-class probability below the threshold are kept; when
/// fewer than `min_kept` qualify, the `min_kept` highest-loss pixels are
/// kept instead.
pub fn ohem_ce(logits: &Tensor, labels: &[u8], w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let terms = pixel_terms(logits, labels, w.ignore_label)?;
    let kept = select(&terms, w)?;
    let inv = 1.0 / kept.len() as f64;
    let loss: f64 = kept.iter().map(|&i| terms.losses[i].unwrap_or(0.0)).sum::<f64>() * inv;
    let (k, hw) = (terms.k, terms.hw);
    let numel = logits.numel();
    let labels = labels.to_vec();
    let probs = terms.probs;
    Ok(Tensor::from_op(
        "ohem_ce",
        Shape::scalar(),
        vec![loss],
        vec![logits.clone()],
        move |g| {
            let scale = g[0] * inv;
            let mut dl = vec![0.0; numel];
            for &pix in &kept {
                let (i, p) = (pix / hw, pix % hw);
                let base = i * k * hw + p;
                for c in 0..k {
                    dl[base + c * hw] = probs[base + c * hw] * scale;
                }
                dl[base + labels[pix] as usize * hw] -= scale;
            }
            vec![Some(dl)]
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub pred: f64,
    pub aux1: f64,
    pub aux2: f64,
}

/// `L_pred + α·L_aux1 + β·L_aux2` for already-computed scalar losses.
pub fn combine(pred: &Tensor, aux1: &Tensor, aux2: &Tensor, w: &LossWeights) -> Result<Tensor> {
    for t in [pred, aux1, aux2] {
        t.item()?;
    }
    Ok(pred.add(&aux1.scale(w.alpha))?.add(&aux2.scale(w.beta))?)
}

/// The weighted three-head objective, each term an OHEM cross entropy.
pub fn total_loss(
    pred: &Tensor,
    aux1: &Tensor,
    aux2: &Tensor,
    labels: &[u8],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if pred.dims() != aux1.dims() || pred.dims() != aux2.dims() {
        return Err(TensorError::Shape(format!(
            "head shapes differ: {:?} {:?} {:?}",
            pred.dims(),
            aux1.dims(),
            aux2.dims()
        ))
        .into());
    }
    let lp = ohem_ce(pred, labels, w)?;
    let l1 = ohem_ce(aux1, labels, w)?;
    let l2 = ohem_ce(aux2, labels, w)?;
    let (pred_v, aux1_v, aux2_v) = (lp.item()?, l1.item()?, l2.item()?);
    let total = combine(&lp, &l1, &l2, w)?;
    Ok(LossBreakdown {
        total,
        pred: pred_v,
        aux1: aux1_v,
        aux2: aux2_v,
    })
}

/// Class-by-class pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(LossError::Config(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth is not `ignore`.
    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8], ignore: u8) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(LossError::Config(format!(
                "{} truth vs {} predicted pixels",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ignore {
                continue;
            }
            for label in [t, p] {
                if label as usize >= self.classes {
                    return Err(LossError::Label {
                        label,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(LossError::Config(format!(
                "merging {}-class into {}-class matrix",
                other.classes, self.classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `IoU_k = TP / (TP + FP + FN)`, averaged over classes with a non-empty
/// union.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    let k = cm.classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(LossError::DegenerateMetric);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, mean })
}
