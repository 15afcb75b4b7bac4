//! Per-sample gradient norm machinery: ghost norms, per-sample gradient
//! instantiation, clipping-factor functions, the layerwise ghost-vs-instantiate
//! decision, and the two ways to form the clipped gradient sum.

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Per-sample clipping function C(x) applied to the gradient norm x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipFn {
    /// C(x) = min{R/x, 1}
    Abadi { radius: f64 },
    /// C(x) = 1 if x <= R else 0
    Flat { radius: f64 },
    /// C(x) = 1/(x + gamma), gradient normalization
    Automatic { gamma: f64 },
}

impl ClipFn {
    pub fn abadi(radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::param(format!("clipping radius must be positive, got {radius}")));
        }
        Ok(ClipFn::Abadi { radius })
    }

    pub fn flat(radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::param(format!("clipping radius must be positive, got {radius}")));
        }
        Ok(ClipFn::Flat { radius })
    }

    pub fn automatic(gamma: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::param(format!("stabilizer must be non-negative, got {gamma}")));
        }
        Ok(ClipFn::Automatic { gamma })
    }

    /// Parse a CLI-style name with an associated radius / stabilizer.
    pub fn from_name(name: &str, radius: f64, gamma: f64) -> Result<Self> {
        match name {
            "abadi" => ClipFn::abadi(radius),
            "flat" => ClipFn::flat(radius),
            "automatic" => ClipFn::automatic(gamma),
            other => Err(Error::config(format!(
                "unknown clipping function '{other}' (expected abadi, flat, or automatic)"
            ))),
        }
    }

    /// The sensitivity bound entering the noise standard deviation sigma*R.
    /// The automatic variant normalizes gradients, so its sensitivity is 1.
    pub fn sensitivity(&self) -> f64 {
        match *self {
            ClipFn::Abadi { radius } | ClipFn::Flat { radius } => radius,
            ClipFn::Automatic { .. } => 1.0,
        }
    }
}

/// Per-layer norm-computation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    Ghost,
    Instantiate,
}

/// Ghost norm is preferred on a layer iff 2T^2 < pd; the tie resolves to
/// instantiation because the criterion is a strict inequality.
pub fn decide_mode(t: usize, p: usize, d: usize) -> ClipMode {
    if 2 * (t as u128) * (t as u128) < (p as u128) * (d as u128) {
        ClipMode::Ghost
    } else {
        ClipMode::Instantiate
    }
}

/// Clipping factor for one sample given its gradient norm.
pub fn clip_factor(norm: f64, clip_fn: ClipFn) -> Result<f64> {
    if !(norm >= 0.0) {
        return Err(Error::param(format!("gradient norm must be non-negative, got {norm}")));
    }
    Ok(match clip_fn {
        ClipFn::Abadi { radius } => {
            if norm == 0.0 {
                // min{R/0, 1} = min{inf, 1}
                1.0
            } else {
                (radius / norm).min(1.0)
            }
        }
        ClipFn::Flat { radius } => {
            if norm <= radius {
                1.0
            } else {
                0.0
            }
        }
        ClipFn::Automatic { gamma } => {
            if norm + gamma == 0.0 {
                return Err(Error::param(
                    "automatic clipping with zero norm and zero stabilizer",
                ));
            }
            1.0 / (norm + gamma)
        }
    })
}

fn check_pair(a: &Tensor, ds: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, t, d) = a.dims3()?;
    let (b2, t2, p) = ds.dims3()?;
    if b != b2 || t != t2 {
        return Err(Error::dim(format!(
            "activation {:?} and output gradient {:?} disagree on batch/feature dims",
            a.shape, ds.shape
        )));
    }
    Ok((b, t, d, p))
}

/// Squared per-sample gradient Frobenius norms via the two T x T Gram
/// matrices, without forming any per-sample gradient.
///
/// The pinned accounting is the Gram formation, `2BT^2(p+d)` mul-adds and
/// `2BT^2` live scalars; the closing length-T^2 dot product is a lower-order
/// term excluded from the pinned count (it is executed but not billed, so the
/// counter delta matches the cost model exactly).
pub fn ghost_norm_sq(a: &Tensor, ds: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (b, t, d, p) = check_pair(a, ds)?;
    let mut out = Tensor::zeros(&[b]);
    // Gram workspaces for one sample at a time; the cost model's 2BT^2 live
    // scalars are charged by the caller that books per-layer workspaces.
    let mut gram_a = vec![0.0; t * t];
    let mut gram_ds = vec![0.0; t * t];
    for i in 0..b {
        let ai = a.sample(i);
        let dsi = ds.sample(i);
        matmul_nt_into(ai, ai, &mut gram_a, t, d, t, counters); // 2T^2 d
        matmul_nt_into(dsi, dsi, &mut gram_ds, t, p, t, counters); // 2T^2 p
        let mut acc = 0.0;
        for (x, y) in gram_a.iter().zip(gram_ds.iter()) {
            acc += x * y;
        }
        out.data[i] = acc;
    }
    Ok(out)
}

/// Ghost norm for an embedding layer: the activation Gram a_i a_i^T is an
/// indicator-match matrix over token ids, formed without materializing
/// one-hot rows. Billed at `2BT^2(p+1)` mul-adds (the vocab-width factor of
/// the generic formula collapses because each one-hot row has one nonzero).
pub fn ghost_norm_sq_embedding(
    ids: &[usize],
    ds: &Tensor,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (b, t, p) = ds.dims3()?;
    if ids.len() != b * t {
        return Err(Error::dim(format!(
            "expected {} token ids, got {}",
            b * t,
            ids.len()
        )));
    }
    let mut out = Tensor::zeros(&[b]);
    let mut gram_ds = vec![0.0; t * t];
    for i in 0..b {
        let dsi = ds.sample(i);
        let idsi = &ids[i * t..(i + 1) * t];
        matmul_nt_into(dsi, dsi, &mut gram_ds, t, p, t, counters); // 2T^2 p
        let mut acc = 0.0;
        for ti in 0..t {
            for tj in 0..t {
                if idsi[ti] == idsi[tj] {
                    acc += gram_ds[ti * t + tj];
                }
            }
        }
        counters.add_ops(2 * (t as u64) * (t as u64)); // indicator Gram
        out.data[i] = acc;
    }
    Ok(out)
}

/// Materialize per-sample gradients a_i^T ds_i as a B x d x p tensor.
/// Counter delta 2BTpd; the caller tracks the Bpd live scalars.
pub fn instantiate_per_sample_grads(
    a: &Tensor,
    ds: &Tensor,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (b, t, d, p) = check_pair(a, ds)?;
    let mut out = Tensor::zeros(&[b, d, p]);
    for i in 0..b {
        let dst = &mut out.data[i * d * p..(i + 1) * d * p];
        matmul_tn_into(a.sample(i), ds.sample(i), dst, t, d, p, counters);
    }
    Ok(out)
}

/// Book-keeping clipped gradient sum: G = a^T diag(C) ds as one contraction.
/// Counter delta 2BTpd + 2BTp (the diagonal scaling); no B x d x p storage.
pub fn clipped_grad_bk(
    a: &Tensor,
    ds: &Tensor,
    c: &Tensor,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let (b, t, d, p) = check_pair(a, ds)?;
    if c.numel() != b {
        return Err(Error::dim(format!(
            "clip factor length {} does not match batch size {}",
            c.numel(),
            b
        )));
    }
    let mut out = Tensor::zeros(&[d, p]);
    let mut acc = vec![0.0; d * p];
    let mut scaled = vec![0.0; t * p];
    for i in 0..b {
        let dsi = ds.sample(i);
        let ci = c.data[i];
        for (s, &v) in scaled.iter_mut().zip(dsi.iter()) {
            *s = ci * v;
        }
        matmul_tn_into(a.sample(i), &scaled, &mut acc, t, d, p, counters);
        for (o, &v) in out.data.iter_mut().zip(acc.iter()) {
            *o += v;
        }
    }
    counters.add_ops(2 * (b as u64) * (t as u64) * (p as u64)); // diag(C) scaling
    Ok(out)
}

/// Weighted in-place sum of instantiated per-sample gradients, sum_i C_i G_i.
/// Counter delta 2Bpd; no extra live memory.
pub fn weighted_sum(grads: &Tensor, c: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (b, d, p) = grads.dims3()?;
    if c.numel() != b {
        return Err(Error::dim(format!(
            "clip factor length {} does not match batch size {}",
            c.numel(),
            b
        )));
    }
    let mut out = Tensor::zeros(&[d, p]);
    for i in 0..b {
        let ci = c.data[i];
        let gi = grads.sample(i);
        for (o, &v) in out.data.iter_mut().zip(gi.iter()) {
            *o += ci * v;
        }
    }
    counters.add_ops(2 * (b as u64) * (d as u64) * (p as u64));
    Ok(out)
}
