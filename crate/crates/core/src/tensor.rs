//! Dense row-major f64 tensors with multiply-add instrumentation.

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Dense multi-dimensional array of f64 scalars, row-major contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} scalars, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> u64 {
        (self.numel() as u64) * crate::counters::BYTES_PER_SCALAR
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Dimensions of a 2D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::dim(format!("expected rank-2 tensor, got {:?}", self.shape))),
        }
    }

    /// Dimensions of a 3D tensor (batch, feature dim, width).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [b, t, d] => Ok((*b, *t, *d)),
            _ => Err(Error::dim(format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    /// Row-major matrix slice for sample `i` of a `B x T x D` tensor.
    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.numel() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let per = self.numel() / self.shape[0];
        &mut self.data[i * per..(i + 1) * per]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Raw dense product into a preallocated buffer; counts `2*m*k*n` mul-adds.
pub fn matmul_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    counters: &mut OpCounters,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += ail * bv;
            }
        }
    }
    counters.add_ops(2 * (m as u64) * (k as u64) * (n as u64));
}

/// Dense matrix product `A[m x k] * B[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(&a.data, &b.data, &mut out.data, m, ka, n, counters);
    Ok(out)
}

/// `A^T * B` for `A[k x m]`, `B[k x n]`; counts `2*m*k*n`.
pub fn matmul_tn_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    k: usize,
    m: usize,
    n: usize,
    counters: &mut OpCounters,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
    counters.add_ops(2 * (m as u64) * (k as u64) * (n as u64));
}

/// `A * B^T` for `A[m x k]`, `B[n x k]`; counts `2*m*k*n`.
pub fn matmul_nt_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    counters: &mut OpCounters,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    counters.add_ops(2 * (m as u64) * (k as u64) * (n as u64));
}

/// Convolution geometry for one spatial axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let eff = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if eff > padded {
        return Err(Error::dim(format!(
            "kernel (effective {}) larger than padded input ({})",
            eff, padded
        )));
    }
    Ok((padded - eff) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

/// Lower a `B x C x H x W` input to `B x T x (C*kh*kw)` columns so that
/// convolution with a `(C*kh*kw) x p` weight matrix becomes a dense product.
/// Pure data movement; contributes no mul-adds.
pub fn im2col(input: &Tensor, c: usize, h: usize, w: usize, geom: ConvGeom) -> Result<Tensor> {
    let b = input.shape[0];
    if input.numel() != b * c * h * w {
        return Err(Error::dim(format!(
            "im2col input {:?} does not match {}x{}x{}x{}",
            input.shape, b, c, h, w
        )));
    }
    let h_out = conv_out_dim(h, geom.kh, geom.stride, geom.pad, geom.dilation)?;
    let w_out = conv_out_dim(w, geom.kw, geom.stride, geom.pad, geom.dilation)?;
    let t = h_out * w_out;
    let d = c * geom.kh * geom.kw;
    let mut out = Tensor::zeros(&[b, t, d]);
    for bi in 0..b {
        let src = &input.data[bi * c * h * w..(bi + 1) * c * h * w];
        let dst = &mut out.data[bi * t * d..(bi + 1) * t * d];
        for oh in 0..h_out {
            for ow in 0..w_out {
                let trow = (oh * w_out + ow) * d;
                for ci in 0..c {
                    for kh in 0..geom.kh {
                        let ih = (oh * geom.stride + kh * geom.dilation) as isize - geom.pad as isize;
                        for kw in 0..geom.kw {
                            let iw = (ow * geom.stride + kw * geom.dilation) as isize - geom.pad as isize;
                            let col = ci * geom.kh * geom.kw + kh * geom.kw + kw;
                            if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                dst[trow + col] = src[ci * h * w + (ih as usize) * w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `im2col`: scatter `B x T x d` columns back onto `B x C x H x W`.
pub fn col2im(cols: &Tensor, c: usize, h: usize, w: usize, geom: ConvGeom) -> Result<Tensor> {
    let (b, t, d) = cols.dims3()?;
    let h_out = conv_out_dim(h, geom.kh, geom.stride, geom.pad, geom.dilation)?;
    let w_out = conv_out_dim(w, geom.kw, geom.stride, geom.pad, geom.dilation)?;
    if t != h_out * w_out || d != c * geom.kh * geom.kw {
        return Err(Error::dim("col2im shape mismatch"));
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        let src = &cols.data[bi * t * d..(bi + 1) * t * d];
        let dst = &mut out.data[bi * c * h * w..(bi + 1) * c * h * w];
        for oh in 0..h_out {
            for ow in 0..w_out {
                let trow = (oh * w_out + ow) * d;
                for ci in 0..c {
                    for kh in 0..geom.kh {
                        let ih = (oh * geom.stride + kh * geom.dilation) as isize - geom.pad as isize;
                        for kw in 0..geom.kw {
                            let iw = (ow * geom.stride + kw * geom.dilation) as isize - geom.pad as isize;
                            let col = ci * geom.kh * geom.kw + kh * geom.kw + kw;
                            if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                dst[ci * h * w + (ih as usize) * w + iw as usize] += src[trow + col];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// i.i.d. N(0, std^2) samples; `std = 0` yields exact zeros.
pub fn gaussian(shape: &[usize], std: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if std < 0.0 {
        return Err(Error::param(format!("negative std {}", std)));
    }
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        for v in t.data.iter_mut() {
            *v = std * rng.normal();
        }
    }
    Ok(t)
}

/// Uniform [-s, s) fill, used for weight initialization.
pub fn uniform(shape: &[usize], scale: f64, rng: &mut SeededRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data.iter_mut() {
        *v = scale * rng.uniform_sym();
    }
    t
}
