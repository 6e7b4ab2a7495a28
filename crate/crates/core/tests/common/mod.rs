#![allow(dead_code)]

use asap::loss::LossWeights;
use asap::network::AttentionParams;
use asap::nn::ConvParams;
use asap::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), dims).unwrap()
}

/// Labels in `0..k`, with roughly `ignore_frac` of them set to 255.
pub fn labels(n: usize, k: usize, ignore_frac: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.random_bool(ignore_frac) {
                255
            } else {
                rng.random_range(0..k) as u8
            }
        })
        .collect()
}

/// Per-pixel `(true-class probability, cross entropy)`, written out directly
/// from the softmax definition; `None` for ignored pixels.
pub fn pixel_losses(logits: &Tensor, labels: &[u8], ignore: u8) -> Vec<Option<(f64, f64)>> {
    let [n, k, h, w]: [usize; 4] = logits.dims().try_into().unwrap();
    let hw = h * w;
    let d = logits.data();
    (0..n * hw)
        .map(|pix| {
            let label = labels[pix];
            if label == ignore {
                return None;
            }
            let (i, p) = (pix / hw, pix % hw);
            let row: Vec<f64> = (0..k).map(|c| d[(i * k + c) * hw + p]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let prob = (row[label as usize] - m).exp() / z;
            Some((prob, -prob.ln()))
        })
        .collect()
}

/// Kept set by sorting every scored pixel on loss: the hard pixels when
/// there are at least `min_kept` of them, otherwise the `min_kept`
/// highest-loss pixels (lower index first among equal losses).
pub fn ohem_oracle(logits: &Tensor, labels: &[u8], w: &LossWeights) -> Vec<usize> {
    let terms = pixel_losses(logits, labels, w.ignore_label);
    let min_kept = w.min_kept(labels.len());
    let mut scored: Vec<(usize, f64, f64)> = terms
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|(p, l)| (i, p, l)))
        .collect();
    let hard: Vec<usize> = scored.iter().filter(|s| s.1 < w.ohem_threshold).map(|s| s.0).collect();
    if hard.len() >= min_kept {
        return hard;
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = scored.iter().take(min_kept).map(|s| s.0).collect();
    kept.sort_unstable();
    kept
}

/// `[[a, b], [c, d]]`-style row-major confusion examples with their
/// hand-computed per-class IoU and mean.
pub fn miou_examples() -> Vec<(usize, Vec<u64>, Vec<Option<f64>>, f64)> {
    vec![
        (3, vec![4, 0, 0, 0, 7, 0, 0, 0, 2], vec![Some(1.0); 3], 1.0),
        (2, vec![3, 1, 1, 3], vec![Some(0.6), Some(0.6)], 0.6),
        (2, vec![5, 0, 5, 0], vec![Some(0.5), Some(0.0)], 0.25),
    ]
}

/// Random query/key/value 1×1 convs with biases.
pub fn attention_params(c: usize, c_hat: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
    let mut conv = |out: usize| {
        let w = uniform(&[out, c, 1, 1], -1.0, 1.0, rng);
        ConvParams::new(w, Some(uniform(&[out], -1.0, 1.0, rng)), 1, 0).unwrap()
    };
    AttentionParams {
        query: conv(c_hat),
        key: conv(c_hat),
        value: conv(c),
    }
}

/// Reorders the rows of every `H×W` plane: output row `i` is input row `perm[i]`.
pub fn permute_rows(f: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c, h, w) = f.shape().nchw().unwrap();
    let mut out = vec![0.0; f.numel()];
    for plane in 0..n * c {
        for (dst, &src) in perm.iter().enumerate() {
            let from = (plane * h + src) * w;
            let to = (plane * h + dst) * w;
            out[to..to + w].copy_from_slice(&f.data()[from..from + w]);
        }
    }
    Tensor::new(out, &[n, c, h, w]).unwrap()
}
