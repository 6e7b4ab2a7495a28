use crate::tensor::{Result, Shape, Tensor, TensorError};

/// Non-overlapping average pooling; the kernel must tile the input exactly.
/// A kernel of `(H, 1)` collapses each column to its mean.
pub fn avg_pool(x: &Tensor, kernel: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw()?;
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(TensorError::Shape(format!(
            "pool kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    if h % kh != 0 || w % kw != 0 {
        return Err(TensorError::Shape(format!(
            "pool kernel {kh}x{kw} does not tile input {h}x{w}"
        )));
    }
    let (ho, wo) = (h / kh, w / kw);
    let inv = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane, o) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for y in 0..h {
            for xx in 0..w {
                o[(y / kh) * wo + xx / kw] += plane[y * w + xx] * inv;
            }
        }
    }
    let shape = Shape::new(&[n, c, ho, wo])?;
    Ok(Tensor::from_op("avg_pool", shape, out, vec![x.clone()], move |g| {
        let mut dx = vec![0.0; n * c * h * w];
        for (d, gp) in dx.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
            for y in 0..h {
                for xx in 0..w {
                    d[y * w + xx] = gp[(y / kh) * wo + xx / kw] * inv;
                }
            }
        }
        vec![Some(dx)]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Bilinear with the align-corners-false convention: output pixel
    /// centers map to `(o + 0.5) · in/out − 0.5`, clamped at the low edge.
    Bilinear,
    /// Replicates a single-row input down to the target height.
    RowTile,
}

/// Interpolation taps along one axis: (low index, high index, high weight).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize(x: &Tensor, target: (usize, usize), mode: ResizeMode) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(TensorError::Shape(format!("resize target {th}x{tw}")));
    }
    match mode {
        ResizeMode::RowTile => {
            if h != 1 || tw != w {
                return Err(TensorError::Contract(format!(
                    "row tiling needs a 1x{w} source and width-preserving target, got {h}x{w} -> {th}x{tw}"
                )));
            }
            x.broadcast_to(&[n, c, th, w])
        }
        ResizeMode::Bilinear => {
            if (th, tw) == (h, w) {
                return Ok(x.clone());
            }
            let ys = bilinear_taps(h, th);
            let xs = bilinear_taps(w, tw);
            let mut out = Vec::with_capacity(n * c * th * tw);
            for plane in x.data().chunks(h * w) {
                for &(y0, y1, ly) in &ys {
                    for &(x0, x1, lx) in &xs {
                        let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                        let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                        out.push(top * (1.0 - ly) + bot * ly);
                    }
                }
            }
            let shape = Shape::new(&[n, c, th, tw])?;
            Ok(Tensor::from_op("resize_bilinear", shape, out, vec![x.clone()], move |g| {
                let mut dx = vec![0.0; n * c * h * w];
                for (d, gp) in dx.chunks_mut(h * w).zip(g.chunks(th * tw)) {
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let gv = gp[oy * tw + ox];
                            d[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            d[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            d[y1 * w + x0] += gv * ly * (1.0 - lx);
                            d[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(dx)]
            }))
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw()?;
    if factor == 0 {
        return Err(TensorError::Contract("upsample factor must be positive".into()));
    }
    let (th, tw) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in x.data().chunks(h * w) {
        for y in 0..th {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            for xx in 0..tw {
                out.push(row[xx / factor]);
            }
        }
    }
    let shape = Shape::new(&[n, c, th, tw])?;
    Ok(Tensor::from_op("upsample_nearest", shape, out, vec![x.clone()], move |g| {
        let mut dx = vec![0.0; n * c * h * w];
        for (d, gp) in dx.chunks_mut(h * w).zip(g.chunks(th * tw)) {
            for y in 0..th {
                for xx in 0..tw {
                    d[(y / factor) * w + xx / factor] += gp[y * tw + xx];
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Row-wise softmax over the last axis, stabilized by the row maximum.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let len = *x
        .dims()
        .last()
        .ok_or_else(|| TensorError::Shape("softmax of a scalar".into()))?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::Numeric("NaN logit in softmax".into()));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(len) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    let y = out.clone();
    Ok(Tensor::from_op("softmax", x.shape().clone(), out, vec![x.clone()], move |g| {
        let mut dx = Vec::with_capacity(g.len());
        for (gr, yr) in g.chunks(len).zip(y.chunks(len)) {
            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            dx.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
        }
        vec![Some(dx)]
    }))
}
