use crate::tensor::counter;
use crate::tensor::kernels::{gemm, MatRef};
use crate::tensor::{Result, Shape, Tensor, TensorError};

/// Weights and geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `[C_out, C_in, K, K]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let &[c_out, _, kh, kw] = weight.dims() else {
            return Err(TensorError::Shape(format!(
                "conv weight must be [C_out, C_in, K, K], got {:?}",
                weight.dims()
            )));
        };
        if kh != kw {
            return Err(TensorError::Shape(format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::Contract("stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.dims() != [c_out] {
                return Err(TensorError::Shape(format!(
                    "bias {:?} does not match {c_out} output channels",
                    b.dims()
                )));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// `floor((in + 2·pad − K) / stride) + 1` per spatial axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(TensorError::Shape(format!(
                "kernel {k} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let howo = self.ho * self.wo;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * howo..(row + 1) * howo];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let howo = self.ho * self.wo;
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * howo..(row + 1) * howo];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, lowered to one GEMM per sample.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, c_in, h, w) = x.shape().nchw()?;
    if c_in != p.in_channels() {
        return Err(TensorError::Shape(format!(
            "conv2d: input has {c_in} channels, weight expects {}",
            p.in_channels()
        )));
    }
    let (ho, wo) = p.output_size(h, w)?;
    let c_out = p.out_channels();
    let geo = Geometry {
        c_in,
        h,
        w,
        k: p.kernel(),
        stride: p.stride,
        pad: p.padding,
        ho,
        wo,
    };
    let howo = ho * wo;
    let rows = geo.col_rows();
    let in_plane = c_in * h * w;
    let out_plane = c_out * howo;

    let mut out = vec![0.0; n * out_plane];
    let mut col = if geo.pointwise() { Vec::new() } else { vec![0.0; rows * howo] };
    for i in 0..n {
        let xi = &x.data()[i * in_plane..(i + 1) * in_plane];
        let cols: &[f64] = if geo.pointwise() {
            xi
        } else {
            geo.im2col(xi, &mut col);
            &col
        };
        let oi = &mut out[i * out_plane..(i + 1) * out_plane];
        gemm(
            MatRef::new(p.weight.data(), c_out, rows),
            MatRef::new(cols, rows, howo),
            oi,
            0.0,
        );
        counter::add_conv_macs(c_out * rows * howo);
        if let Some(b) = &p.bias {
            for (co, &bv) in b.data().iter().enumerate() {
                oi[co * howo..(co + 1) * howo].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let mut parents = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let (xs, ws) = (x.clone(), p.weight.clone());
    let has_bias = p.bias.is_some();
    let bias_grad = p.bias.as_ref().is_some_and(Tensor::requires_grad);
    let shape = Shape::new(&[n, c_out, ho, wo])?;
    Ok(Tensor::from_op("conv2d", shape, out, parents, move |g| {
        let need_x = xs.requires_grad();
        let need_w = ws.requires_grad();
        let mut dx = need_x.then(|| vec![0.0; n * in_plane]);
        let mut dw = need_w.then(|| vec![0.0; c_out * rows]);
        let mut col = vec![0.0; if geo.pointwise() { 0 } else { rows * howo }];
        let mut dcol = vec![0.0; if need_x && !geo.pointwise() { rows * howo } else { 0 }];
        for i in 0..n {
            let gi = MatRef::new(&g[i * out_plane..(i + 1) * out_plane], c_out, howo);
            let xi = &xs.data()[i * in_plane..(i + 1) * in_plane];
            if let Some(dw) = dw.as_mut() {
                let cols: &[f64] = if geo.pointwise() {
                    xi
                } else {
                    geo.im2col(xi, &mut col);
                    &col
                };
                // dW += dOut · colᵀ
                gemm(gi, MatRef::new(cols, rows, howo).t(), dw, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let wt = MatRef::new(ws.data(), c_out, rows).t();
                let dxi = &mut dx[i * in_plane..(i + 1) * in_plane];
                if geo.pointwise() {
                    gemm(wt, gi, dxi, 0.0);
                } else {
                    gemm(wt, gi, &mut dcol, 0.0);
                    geo.col2im(&dcol, dxi);
                }
            }
        }
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(bias_grad.then(|| {
                let mut db = vec![0.0; c_out];
                for i in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let s = i * out_plane + co * howo;
                        *d += g[s..s + howo].iter().sum::<f64>();
                    }
                }
                db
            }));
        }
        grads
    }))
}
