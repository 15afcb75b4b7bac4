//! Layer-level math: generalized-linear lowering (linear / convolution /
//! embedding), composite (LoRA, adapter) decomposition into two
//! generalized-linear sub-modules, elementwise activations, and the
//! normalization layers that always use per-sample gradient instantiation.

use crate::archspec::{Act, LayerDesc};
use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::tensor::{im2col, ConvGeom, Tensor};

/// Lower a layer input to the canonical `B x T x d` activation so that the
/// layer output equals `a * W` for a `d x p` weight view.
///
/// Supported kinds are the generalized linear layers (linear, conv2d); the
/// embedding keeps its token-id representation (see
/// `crate::clipping::ghost_norm_sq_embedding`) and composite layers lower
/// their sub-modules individually. Anything else is a capability error and
/// the caller must fall back to per-sample instantiation.
pub fn lower_to_generalized_linear(layer: &LayerDesc, input: &Tensor) -> Result<Tensor> {
    match *layer {
        LayerDesc::Linear { d, .. } | LayerDesc::Lora { d, .. } => {
            let b = input.shape[0];
            let n = input.numel() / b;
            if n % d != 0 {
                return Err(Error::dim(format!(
                    "input of {} scalars per sample is not a multiple of width {d}",
                    n
                )));
            }
            input.clone().reshaped(&[b, n / d, d])
        }
        LayerDesc::Conv2d { c_in, kh, kw, stride, pad, .. } => {
            let (_b, c, h, w) = match input.shape.as_slice() {
                [b, c, h, w] => (*b, *c, *h, *w),
                _ => return Err(Error::dim(format!("conv2d expects B x C x H x W, got {:?}", input.shape))),
            };
            if c != c_in {
                return Err(Error::dim(format!("conv2d expects {c_in} channels, got {c}")));
            }
            im2col(input, c, h, w, ConvGeom { kh, kw, stride, pad, dilation: 1 })
        }
        ref other => Err(Error::Capability(format!(
            "{other:?} is not a generalized linear layer"
        ))),
    }
}

/// Split a composite layer into its two generalized-linear sub-modules,
/// returned as (d, p) weight shapes in application order. The frozen base
/// weight of LoRA is excluded.
pub fn decompose_composite(layer: &LayerDesc) -> Result<[(usize, usize); 2]> {
    match *layer {
        LayerDesc::Lora { d, p, r } => Ok([(d, r), (r, p)]),
        LayerDesc::Adapter { dim, r } => Ok([(dim, r), (r, dim)]),
        ref other => Err(Error::Capability(format!("{other:?} is not a composite layer"))),
    }
}

/// Elementwise activation value and derivative. Counted at 2 mul-adds per
/// scalar (value + derivative), a lower-order term next to the matmuls.
pub fn act_forward(act: Act, x: &Tensor, counters: &mut OpCounters) -> (Tensor, Tensor) {
    let mut y = Tensor::zeros(&x.shape);
    let mut dy = Tensor::zeros(&x.shape);
    for ((v, yo), dyo) in x.data.iter().zip(y.data.iter_mut()).zip(dy.data.iter_mut()) {
        let (val, der) = match act {
            Act::Relu => {
                if *v > 0.0 {
                    (*v, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Act::Tanh => {
                let t = v.tanh();
                (t, 1.0 - t * t)
            }
            Act::Gelu => {
                // tanh approximation of the Gaussian error linear unit
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let inner = c * (v + 0.044715 * v * v * v);
                let t = inner.tanh();
                let val = 0.5 * v * (1.0 + t);
                let dinner = c * (1.0 + 3.0 * 0.044715 * v * v);
                let der = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                (val, der)
            }
        };
        *yo = val;
        *dyo = der;
    }
    counters.add_ops(2 * x.numel() as u64);
    (y, dy)
}

const LN_EPS: f64 = 1e-5;

/// Layer normalization state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LnState {
    /// normalized input (x - mean) / std, shape B x T x d
    pub xhat: Tensor,
    /// reciprocal standard deviation per (b, t) row
    pub inv_std: Vec<f64>,
}

/// Forward layer normalization over the last dimension with optional affine
/// scale/shift. Counted at 2 mul-adds per scalar per sweep (lower-order).
pub fn layernorm_forward(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    counters: &mut OpCounters,
) -> Result<(Tensor, LnState)> {
    let (b, t, d) = x.dims3()?;
    let mut y = Tensor::zeros(&x.shape);
    let mut xhat = Tensor::zeros(&x.shape);
    let mut inv_std = vec![0.0; b * t];
    for row in 0..b * t {
        let xs = &x.data[row * d..(row + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[row] = is;
        for j in 0..d {
            let xh = (xs[j] - mean) * is;
            xhat.data[row * d + j] = xh;
            let g = gamma.map(|g| g.data[j]).unwrap_or(1.0);
            let bta = beta.map(|bt| bt.data[j]).unwrap_or(0.0);
            y.data[row * d + j] = g * xh + bta;
        }
    }
    counters.add_ops(6 * x.numel() as u64); // mean, variance, normalize+affine sweeps
    Ok((y, LnState { xhat, inv_std }))
}

/// Input gradient of layer normalization given the upstream gradient.
pub fn layernorm_backward_input(
    ds: &Tensor,
    gamma: Option<&Tensor>,
    state: &LnState,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (b, t, d) = ds.dims3()?;
    let mut dx = Tensor::zeros(&ds.shape);
    for row in 0..b * t {
        let dss = &ds.data[row * d..(row + 1) * d];
        let xh = &state.xhat.data[row * d..(row + 1) * d];
        let is = state.inv_std[row];
        // dxhat = ds * gamma
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let g = gamma.map(|g| g.data[j]).unwrap_or(1.0);
            let dxh = dss[j] * g;
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let g = gamma.map(|g| g.data[j]).unwrap_or(1.0);
            let dxh = dss[j] * g;
            dx.data[row * d + j] = is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    counters.add_ops(6 * ds.numel() as u64);
    Ok(dx)
}

/// Per-sample gradients of the affine parameters (gamma rows then beta rows):
/// returns a `B x 2d` tensor. Normalization layers never use the ghost norm.
pub fn norm_layer_per_sample_grads(
    ds: &Tensor,
    state: &LnState,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (b, t, d) = ds.dims3()?;
    let mut out = Tensor::zeros(&[b, 2 * d]);
    for i in 0..b {
        for ti in 0..t {
            let row = i * t + ti;
            let dss = &ds.data[row * d..(row + 1) * d];
            let xh = &state.xhat.data[row * d..(row + 1) * d];
            for j in 0..d {
                out.data[i * 2 * d + j] += dss[j] * xh[j]; // dgamma
                out.data[i * 2 * d + d + j] += dss[j]; // dbeta
            }
        }
    }
    counters.add_ops(2 * ds.numel() as u64);
    Ok(out)
}

/// Embedding lookup: out[b, t, :] = W[ids[b*t], :].
pub fn embedding_forward(
    ids: &[usize],
    w: &Tensor,
    b: usize,
    t: usize,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (vocab, dim) = w.dims2()?;
    if ids.len() != b * t {
        return Err(Error::dim(format!("expected {} token ids, got {}", b * t, ids.len())));
    }
    let mut out = Tensor::zeros(&[b, t, dim]);
    for (n, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::dim(format!("token id {id} out of vocab {vocab}")));
        }
        out.data[n * dim..(n + 1) * dim].copy_from_slice(&w.data[id * dim..(id + 1) * dim]);
    }
    counters.add_ops(ids.len() as u64 * dim as u64); // gather, 1 per scalar moved
    Ok(out)
}

/// Scatter-add of output gradients onto the embedding table, optionally with
/// per-sample weights: grad[id] += w_i * ds[b, t, :].
pub fn embedding_param_grad(
    ids: &[usize],
    ds: &Tensor,
    vocab: usize,
    weights: Option<&Tensor>,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (b, t, dim) = ds.dims3()?;
    let mut grad = Tensor::zeros(&[vocab, dim]);
    for i in 0..b {
        let wi = weights.map(|w| w.data[i]).unwrap_or(1.0);
        for ti in 0..t {
            let id = ids[i * t + ti];
            let src = &ds.data[(i * t + ti) * dim..(i * t + ti + 1) * dim];
            let dst = &mut grad.data[id * dim..(id + 1) * dim];
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o += wi * v;
            }
        }
    }
    counters.add_ops(2 * (b * t * dim) as u64);
    Ok(grad)
}
