use super::kernels::{gemm, MatRef};
use super::{probe_relu, Result, Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Scale,
}

/// Right-hand operand of an elementwise op. A scalar broadcasts to every
/// element; that is the only implicit broadcast in the crate.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Population variance (divides by the element count).
    Var,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TensorError::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    let shape = a.shape().clone();
    match (op, b) {
        (ElementwiseOp::Relu, _) => {
            probe_relu(a.data());
            let data = a.data().iter().map(|&v| v.max(0.0)).collect();
            let x = a.clone();
            Ok(Tensor::from_op("relu", shape, data, vec![a.clone()], move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }))
        }
        (ElementwiseOp::Add, Operand::Tensor(b)) => {
            same_shape("add", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Ok(Tensor::from_op("add", shape, data, vec![a.clone(), b.clone()], |g| {
                vec![Some(g.to_vec()), Some(g.to_vec())]
            }))
        }
        (ElementwiseOp::Sub, Operand::Tensor(b)) => {
            same_shape("sub", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Ok(Tensor::from_op("sub", shape, data, vec![a.clone(), b.clone()], |g| {
                vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
            }))
        }
        (ElementwiseOp::Mul, Operand::Tensor(b)) => {
            same_shape("mul", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            let (ac, bc) = (a.clone(), b.clone());
            Ok(Tensor::from_op("mul", shape, data, vec![a.clone(), b.clone()], move |g| {
                let ga = g.iter().zip(bc.data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(ac.data()).map(|(g, x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }))
        }
        (ElementwiseOp::Scale, Operand::Tensor(_)) => Err(TensorError::Contract(
            "scale takes a scalar operand".into(),
        )),
        (ElementwiseOp::Add, Operand::Scalar(s)) => {
            let data = a.data().iter().map(|x| x + s).collect();
            Ok(Tensor::from_op("add_scalar", shape, data, vec![a.clone()], |g| {
                vec![Some(g.to_vec())]
            }))
        }
        (ElementwiseOp::Sub, Operand::Scalar(s)) => {
            elementwise(ElementwiseOp::Add, a, Operand::Scalar(-s))
        }
        (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => {
            let data = a.data().iter().map(|x| x * s).collect();
            Ok(Tensor::from_op("scale", shape, data, vec![a.clone()], move |g| {
                vec![Some(g.iter().map(|v| v * s).collect())]
            }))
        }
    }
}

/// Output shape and input→output index map of a reduction over `axes`.
fn reduction_plan(dims: &[usize], axes: &[usize], keep_dims: bool) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let rank = dims.len();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        reduced[axis] = true;
    }
    let kept_dims: Vec<usize> = (0..rank)
        .map(|i| if reduced[i] { 1 } else { dims[i] })
        .collect();
    let out_dims: Vec<usize> = if keep_dims {
        kept_dims.clone()
    } else {
        (0..rank).filter(|&i| !reduced[i]).map(|i| dims[i]).collect()
    };
    let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| dims[i]).product();
    let out_strides = Shape(kept_dims).strides();
    let numel: usize = dims.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let o = (0..rank)
            .filter(|&i| !reduced[i])
            .map(|i| idx[i] * out_strides[i])
            .sum();
        map.push(o);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < dims[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok((out_dims, map, count))
}

pub fn reduce(stat: Reduction, x: &Tensor, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
    let (out_dims, map, count) = reduction_plan(x.dims(), axes, keep_dims)?;
    let out_shape = Shape(out_dims);
    let out_n = out_shape.numel();
    let inv = 1.0 / count as f64;
    let mut mean = vec![0.0; out_n];
    for (&o, &v) in map.iter().zip(x.data()) {
        mean[o] += v;
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    match stat {
        Reduction::Mean => Ok(Tensor::from_op("mean", out_shape, mean, vec![x.clone()], move |g| {
            vec![Some(map.iter().map(|&o| g[o] * inv).collect())]
        })),
        Reduction::Var => {
            let mut var = vec![0.0; out_n];
            for (&o, &v) in map.iter().zip(x.data()) {
                let d = v - mean[o];
                var[o] += d * d;
            }
            var.iter_mut().for_each(|s| *s *= inv);
            let xc = x.clone();
            Ok(Tensor::from_op("var", out_shape, var, vec![x.clone()], move |g| {
                // d var / d x_i = 2 (x_i - mean) / count; the mean's own
                // dependence on x_i cancels because deviations sum to zero.
                let gx = map
                    .iter()
                    .zip(xc.data())
                    .map(|(&o, &v)| g[o] * 2.0 * (v - mean[o]) * inv)
                    .collect();
                vec![Some(gx)]
            }))
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(ElementwiseOp::Mul, self, Operand::Tensor(other))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        elementwise(ElementwiseOp::Add, self, Operand::Scalar(s)).expect("scalar add")
    }

    pub fn scale(&self, s: f64) -> Tensor {
        elementwise(ElementwiseOp::Scale, self, Operand::Scalar(s)).expect("scalar scale")
    }

    pub fn relu(&self) -> Tensor {
        elementwise(ElementwiseOp::Relu, self, Operand::Scalar(0.0)).expect("relu")
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", Shape::scalar(), vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reduce(&self, stat: Reduction, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        reduce(stat, self, axes, keep_dims)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(Tensor::from_op("reshape", shape, self.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Expands size-1 extents to `dims`; ranks must match.
    pub fn broadcast_to(&self, dims: &[usize]) -> Result<Tensor> {
        let src = self.dims().to_vec();
        if src.len() != dims.len()
            || src.iter().zip(dims).any(|(&s, &d)| s != d && s != 1)
        {
            return Err(TensorError::Shape(format!(
                "cannot broadcast {src:?} to {dims:?}"
            )));
        }
        let out_shape = Shape::new(dims)?;
        let axes: Vec<usize> = (0..src.len()).filter(|&i| src[i] != dims[i]).collect();
        let (_, map, _) = reduction_plan(dims, &axes, true)?;
        let data = map.iter().map(|&i| self.data()[i]).collect();
        let n = self.numel();
        Ok(Tensor::from_op("broadcast", out_shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n];
            for (&i, &v) in map.iter().zip(g) {
                gx[i] += v;
            }
            vec![Some(gx)]
        }))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.dims(), other.dims()) else {
            return Err(TensorError::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        };
        let out = self.reshape(&[1, m, k])?.bmm(&other.reshape(&[1, k2, n])?)?;
        out.reshape(&[m, n])
    }

    /// Batched matrix product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (&[b, m, k], &[b2, k2, n]) = (self.dims(), other.dims()) else {
            return Err(TensorError::Shape(format!(
                "bmm needs 3-D operands, got {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        };
        if b != b2 || k != k2 {
            return Err(TensorError::Shape(format!(
                "bmm: {:?} · {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                MatRef::new(&self.data()[i * m * k..], m, k),
                MatRef::new(&other.data()[i * k * n..], k, n),
                &mut out[i * m * n..],
                0.0,
            );
        }
        let (a, bt) = (self.clone(), other.clone());
        let parents = vec![self.clone(), other.clone()];
        Ok(Tensor::from_op("bmm", Shape(vec![b, m, n]), out, parents, move |g| {
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; b * m * k];
                for i in 0..b {
                    // dA = dOut · Bᵀ
                    gemm(
                        MatRef::new(&g[i * m * n..], m, n),
                        MatRef::new(&bt.data()[i * k * n..], k, n).t(),
                        &mut ga[i * m * k..],
                        0.0,
                    );
                }
                ga
            });
            let gb = bt.requires_grad().then(|| {
                let mut gb = vec![0.0; b * k * n];
                for i in 0..b {
                    // dB = Aᵀ · dOut
                    gemm(
                        MatRef::new(&a.data()[i * m * k..], m, k).t(),
                        MatRef::new(&g[i * m * n..], m, n),
                        &mut gb[i * k * n..],
                        0.0,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let (b, r, c) = match *self.dims() {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => {
                return Err(TensorError::Shape(format!(
                    "transpose needs rank 2 or 3, got {:?}",
                    self.dims()
                )))
            }
        };
        let mut dims = self.dims().to_vec();
        let rank = dims.len();
        dims.swap(rank - 2, rank - 1);
        let data = transpose_blocks(self.data(), b, r, c);
        Ok(Tensor::from_op("transpose", Shape(dims), data, vec![self.clone()], move |g| {
            vec![Some(transpose_blocks(g, b, c, r))]
        }))
    }
}

fn transpose_blocks(src: &[f64], b: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..b {
        let s = &src[i * r * c..(i + 1) * r * c];
        let o = &mut out[i * r * c..(i + 1) * r * c];
        for y in 0..r {
            for x in 0..c {
                o[x * r + y] = s[y * c + x];
            }
        }
    }
    out
}
