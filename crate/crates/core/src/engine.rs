//! One private optimization step for every implementation strategy: the
//! brute-force per-example oracle, per-sample norm computation (ghost or
//! instantiated), clipped gradient assembly, calibrated Gaussian noise,
//! SGD/Adam updates, and gradient accumulation over microbatches.

use crate::clipping::{
    clip_factor, clipped_grad_bk, decide_mode, ghost_norm_sq, ghost_norm_sq_embedding,
    instantiate_per_sample_grads, weighted_sum, ClipFn, ClipMode,
};
use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::graph::{
    backward_output_grads, bias_per_sample_grads, forward, param_grad, select_origin_params,
    Batch, ClipUnit, GradBook, Graph, ParamId, ParamSlot, UnitRole,
};
use crate::layers::{embedding_param_grad, norm_layer_per_sample_grads};
use crate::rng::SeededRng;
use crate::tensor::{uniform, Tensor};

/// Implementation strategy for one private step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImplKind {
    NonDp,
    Naive,
    Opacus,
    OpacusImproved,
    FastGradClip,
    FastGradClipImproved,
    GhostClip,
    MixGhostClip,
    Bk,
    BkMixGhostClip,
    BkMixOpt,
}

pub const ALL_KINDS: [ImplKind; 11] = [
    ImplKind::NonDp,
    ImplKind::Naive,
    ImplKind::Opacus,
    ImplKind::OpacusImproved,
    ImplKind::FastGradClip,
    ImplKind::FastGradClipImproved,
    ImplKind::GhostClip,
    ImplKind::MixGhostClip,
    ImplKind::Bk,
    ImplKind::BkMixGhostClip,
    ImplKind::BkMixOpt,
];

impl ImplKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImplKind::NonDp => "non_dp",
            ImplKind::Naive => "naive",
            ImplKind::Opacus => "opacus",
            ImplKind::OpacusImproved => "opacus_improved",
            ImplKind::FastGradClip => "fast_grad_clip",
            ImplKind::FastGradClipImproved => "fast_grad_clip_improved",
            ImplKind::GhostClip => "ghost_clip",
            ImplKind::MixGhostClip => "mix_ghost_clip",
            ImplKind::Bk => "bk",
            ImplKind::BkMixGhostClip => "bk_mix_ghost_clip",
            ImplKind::BkMixOpt => "bk_mix_opt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown implementation kind '{s}'; expected one of: {}",
                    ALL_KINDS.map(|k| k.as_str()).join(", ")
                ))
            })
    }

    pub fn is_dp(self) -> bool {
        self != ImplKind::NonDp
    }

    /// Number of backward traversals one step performs.
    pub fn backward_passes(self, batch_size: usize) -> u64 {
        match self {
            ImplKind::Naive => batch_size as u64,
            ImplKind::FastGradClip | ImplKind::GhostClip | ImplKind::MixGhostClip => 2,
            _ => 1,
        }
    }

    /// Kinds whose single backward pass also produces the full regular
    /// (unclipped) gradient, which is then discarded.
    fn wastes_full_gradient(self) -> bool {
        matches!(self, ImplKind::Opacus | ImplKind::GhostClip | ImplKind::MixGhostClip)
    }

    /// Kinds that avoid the full wasted gradient but must keep one origin
    /// parameter "live" so the backward traversal visits every layer; its
    /// regular gradient is computed and discarded.
    fn wastes_origin_gradient(self) -> bool {
        matches!(
            self,
            ImplKind::Bk
                | ImplKind::BkMixGhostClip
                | ImplKind::BkMixOpt
                | ImplKind::OpacusImproved
                | ImplKind::FastGradClipImproved
        )
    }

    /// Kinds that re-run the output-gradient pass with the clip factors as
    /// loss weights and then take plain gradient sums.
    fn uses_second_pass(self) -> bool {
        matches!(self, ImplKind::FastGradClip | ImplKind::GhostClip | ImplKind::MixGhostClip)
    }

    /// Kinds that keep every instantiated per-sample gradient stash alive
    /// until the weighted sum at the end of the step.
    fn retains_stash(self) -> bool {
        matches!(self, ImplKind::Opacus | ImplKind::OpacusImproved)
    }

    /// Norm strategy for a generalized-linear (weight or embedding) unit.
    fn unit_mode(self, unit: &ClipUnit) -> ClipMode {
        match self {
            ImplKind::GhostClip | ImplKind::Bk => ClipMode::Ghost,
            ImplKind::Opacus
            | ImplKind::OpacusImproved
            | ImplKind::FastGradClip
            | ImplKind::FastGradClipImproved => ClipMode::Instantiate,
            ImplKind::MixGhostClip | ImplKind::BkMixGhostClip | ImplKind::BkMixOpt => {
                decide_mode(unit.t, unit.p, unit.d)
            }
            ImplKind::NonDp | ImplKind::Naive => ClipMode::Instantiate,
        }
    }
}

impl std::fmt::Display for ImplKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Clipping function, noise multiplier, and optional explicit per-unit mode
/// overrides (one entry per clip unit, validated before any compute).
#[derive(Debug, Clone)]
pub struct PrivacyParams {
    pub clip: ClipFn,
    pub sigma: f64,
    pub unit_modes: Option<Vec<ClipMode>>,
}

impl PrivacyParams {
    pub fn new(clip: ClipFn, sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::param(format!("noise multiplier must be >= 0, got {sigma}")));
        }
        Ok(PrivacyParams { clip, sigma, unit_modes: None })
    }
}

/// Everything one private step produced, besides the counter deltas.
#[derive(Debug)]
pub struct StepReport {
    pub kind: ImplKind,
    pub losses: Vec<f64>,
    pub per_sample_norms: Vec<f64>,
    pub clip_factors: Vec<f64>,
    /// private gradient per parameter, in parameter-id order
    pub grads: Vec<(ParamId, Tensor)>,
    pub backward_passes: u64,
    pub node_mul_adds: Vec<u64>,
    pub weight_version: u64,
}

/// Add Gaussian noise in place: g += sigma * r * N(0, I). One add per
/// coordinate; sigma = 0 or r = 0 leaves g bit-identical.
pub fn add_noise(
    g: &mut Tensor,
    sigma: f64,
    r: f64,
    rng: &mut SeededRng,
    counters: &mut OpCounters,
) -> Result<()> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::param(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if !r.is_finite() || r < 0.0 {
        return Err(Error::param(format!("sensitivity must be >= 0, got {r}")));
    }
    if sigma == 0.0 || r == 0.0 {
        return Ok(());
    }
    let std = sigma * r;
    for x in g.data.iter_mut() {
        *x += std * rng.normal();
    }
    counters.add_ops(g.numel() as u64);
    Ok(())
}

/// Random regression targets shaped like the network output.
pub fn synth_targets(graph: &Graph, b: usize, rng: &mut SeededRng) -> Result<Tensor> {
    use crate::archspec::FlowShape;
    let shapes = graph.spec.flow_shapes()?;
    let (t, p) = match *shapes.last().expect("non-empty graph") {
        FlowShape::Flat(d) => (1, d),
        FlowShape::Seq { t, dim } => (t, dim),
        FlowShape::Image { c, h, w } => (h * w, c),
        FlowShape::Tokens { .. } => {
            return Err(Error::config("network output is token ids; cannot regress"))
        }
    };
    Ok(uniform(&[b, t, p], 1.0, rng))
}

// ---------------------------------------------------------------------------
// per-sample gradient stash
// ---------------------------------------------------------------------------

/// Dense stashes above this many scalars are modeled instead of materialized:
/// the counters are charged exactly what the dense stash would cost while the
/// arithmetic runs through the book-kept factors.
const DENSE_STASH_CAP: usize = 1 << 22;

enum StashData {
    /// materialized B x d x p per-sample gradients
    Dense(Tensor),
    /// factor-backed: per-sample gradients a_i^T ds_i never formed
    LazyPair { a: Tensor, ds: Tensor },
    /// factor-backed embedding gradients (scatter of ds rows by token id)
    LazyEmb { ids: Vec<usize>, ds: Tensor, vocab: usize },
}

struct Stash {
    data: StashData,
    /// scalars one per-sample gradient occupies (d*p)
    per_sample_scalars: u64,
    batch: u64,
}

impl Stash {
    fn modeled_bytes(&self) -> u64 {
        8 * self.batch * self.per_sample_scalars
    }

    /// Squared per-sample norms read off the stash; 2 ops per stashed scalar.
    fn norms_sq(&self, counters: &mut OpCounters) -> Result<Vec<f64>> {
        let out = match &self.data {
            StashData::Dense(g) => {
                let b = g.shape[0];
                let per = g.numel() / b;
                (0..b)
                    .map(|i| g.data[i * per..(i + 1) * per].iter().map(|x| x * x).sum())
                    .collect()
            }
            StashData::LazyPair { a, ds } => {
                let mut scratch = OpCounters::new();
                ghost_norm_sq(a, ds, &mut scratch)?.data
            }
            StashData::LazyEmb { ids, ds, .. } => {
                let mut scratch = OpCounters::new();
                ghost_norm_sq_embedding(ids, ds, &mut scratch)?.data
            }
        };
        counters.add_ops(2 * self.batch * self.per_sample_scalars);
        Ok(out)
    }

    /// Weighted in-place sum over the stash; 2 ops per stashed scalar.
    fn weighted(&self, c: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
        match &self.data {
            StashData::Dense(g) => weighted_sum(g, c, counters),
            StashData::LazyPair { a, ds } => {
                let mut scratch = OpCounters::new();
                let out = clipped_grad_bk(a, ds, c, &mut scratch)?;
                counters.add_ops(2 * self.batch * self.per_sample_scalars);
                Ok(out)
            }
            StashData::LazyEmb { ids, ds, vocab } => {
                let mut scratch = OpCounters::new();
                let out = embedding_param_grad(ids, ds, *vocab, Some(c), &mut scratch)?;
                counters.add_ops(2 * self.batch * self.per_sample_scalars);
                Ok(out)
            }
        }
    }

    fn free(self, counters: &mut OpCounters) {
        counters.free_bytes(self.modeled_bytes());
    }
}

/// Instantiate the per-sample gradients of one weight unit; 2BTpd ops and
/// Bpd tracked scalars whether materialized or modeled.
fn stash_weight_unit(a: &Tensor, ds: &Tensor, counters: &mut OpCounters) -> Result<Stash> {
    let (b, t, d) = (a.shape[0], a.shape[1], a.shape[2]);
    let p = ds.shape[2];
    let stash = if b * d * p <= DENSE_STASH_CAP {
        Stash {
            data: StashData::Dense(instantiate_per_sample_grads(a, ds, counters)?),
            per_sample_scalars: (d * p) as u64,
            batch: b as u64,
        }
    } else {
        counters.add_ops(2 * (b * t) as u64 * (d * p) as u64);
        Stash {
            data: StashData::LazyPair { a: a.clone(), ds: ds.clone() },
            per_sample_scalars: (d * p) as u64,
            batch: b as u64,
        }
    };
    counters.alloc_bytes(stash.modeled_bytes());
    Ok(stash)
}

/// Instantiate the per-sample gradients of an embedding table (scatter of ds
/// rows); 2BT*dim ops and B*vocab*dim tracked scalars.
fn stash_embedding_unit(
    ids: &[usize],
    ds: &Tensor,
    vocab: usize,
    counters: &mut OpCounters,
) -> Result<Stash> {
    let (b, t, dim) = ds.dims3()?;
    let stash = if b * vocab * dim <= DENSE_STASH_CAP {
        let mut g = Tensor::zeros(&[b, vocab, dim]);
        for i in 0..b {
            for ti in 0..t {
                let id = ids[i * t + ti];
                let src = &ds.data[(i * t + ti) * dim..(i * t + ti + 1) * dim];
                let dst = &mut g.data[(i * vocab + id) * dim..(i * vocab + id) * dim + dim];
                for (o, &v) in dst.iter_mut().zip(src.iter()) {
                    *o += v;
                }
            }
        }
        counters.add_ops(2 * (b * t * dim) as u64);
        Stash {
            data: StashData::Dense(g),
            per_sample_scalars: (vocab * dim) as u64,
            batch: b as u64,
        }
    } else {
        counters.add_ops(2 * (b * t * dim) as u64);
        Stash {
            data: StashData::LazyEmb { ids: ids.to_vec(), ds: ds.clone(), vocab },
            per_sample_scalars: (vocab * dim) as u64,
            batch: b as u64,
        }
    };
    counters.alloc_bytes(stash.modeled_bytes());
    Ok(stash)
}

// ---------------------------------------------------------------------------
// gradient sums
// ---------------------------------------------------------------------------

/// Summed (optionally clip-weighted) gradient of one clip unit, computed
/// straight from the book-kept pair: one contraction for weights, direct
/// reductions for biases, affine norm parameters, and embeddings.
fn unit_grad_sum(
    book: &GradBook,
    unit: &ClipUnit,
    weights: Option<&Tensor>,
    counters: &mut OpCounters,
) -> Result<Vec<(ParamId, Tensor)>> {
    let nb = &book.nodes[unit.id.node];
    let missing = || Error::State(format!("books for {} not present", unit.id));
    match unit.role {
        UnitRole::Weight => {
            let (a, ds) = book.unit_pair(unit)?;
            let g = match weights {
                Some(c) => clipped_grad_bk(a, ds, c, counters)?,
                None => param_grad(a, ds, counters)?,
            };
            Ok(vec![(unit.id, g)])
        }
        UnitRole::Embedding => {
            let ids = nb.ids.as_ref().ok_or_else(missing)?;
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let g = embedding_param_grad(ids, ds, unit.d, weights, counters)?;
            Ok(vec![(unit.id, g)])
        }
        UnitRole::Bias => {
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let ps = bias_per_sample_grads(ds, counters)?;
            let (b, p) = (ps.shape[0], ps.shape[1]);
            let mut g = Tensor::zeros(&[p]);
            for i in 0..b {
                let w = weights.map(|c| c.data[i]).unwrap_or(1.0);
                for j in 0..p {
                    g.data[j] += w * ps.data[i * p + j];
                }
            }
            counters.add_ops(if weights.is_some() { 2 } else { 1 } * ps.numel() as u64);
            Ok(vec![(unit.id, g)])
        }
        UnitRole::NormAffine => {
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let ln = nb.ln.as_ref().ok_or_else(missing)?;
            let ps = norm_layer_per_sample_grads(ds, ln, counters)?;
            let (b, d2) = (ps.shape[0], ps.shape[1]);
            let d = d2 / 2;
            let mut row = vec![0.0; d2];
            for i in 0..b {
                let w = weights.map(|c| c.data[i]).unwrap_or(1.0);
                for j in 0..d2 {
                    row[j] += w * ps.data[i * d2 + j];
                }
            }
            counters.add_ops(if weights.is_some() { 2 } else { 1 } * ps.numel() as u64);
            let gamma = Tensor::from_vec(&[d], row[0..d].to_vec())?;
            let beta = Tensor::from_vec(&[d], row[d..].to_vec())?;
            Ok(vec![
                (ParamId { node: unit.id.node, slot: ParamSlot::Gamma }, gamma),
                (ParamId { node: unit.id.node, slot: ParamSlot::Beta }, beta),
            ])
        }
    }
}

/// Regular (unweighted) gradient of a single parameter; used for the wasted
/// origin-parameter gradient of the one-pass strategies.
fn param_regular_grad(
    graph: &Graph,
    book: &GradBook,
    id: ParamId,
    counters: &mut OpCounters,
) -> Result<Tensor> {
    let nb = &book.nodes[id.node];
    let missing = || Error::State(format!("books for {id} not present"));
    let is_embedding = matches!(
        graph.nodes[id.node].desc,
        crate::archspec::LayerDesc::Embedding { .. }
    );
    match id.slot {
        ParamSlot::Weight if is_embedding => {
            let ids = nb.ids.as_ref().ok_or_else(missing)?;
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let vocab = graph.param(id)?.shape[0];
            embedding_param_grad(ids, ds, vocab, None, counters)
        }
        ParamSlot::Weight => {
            let a = nb.a.as_ref().ok_or_else(missing)?;
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            param_grad(a, ds, counters)
        }
        ParamSlot::Down => {
            let a = nb.a.as_ref().ok_or_else(missing)?;
            let mid_ds = nb.mid_ds.as_ref().ok_or_else(missing)?;
            param_grad(a, mid_ds, counters)
        }
        ParamSlot::Up => {
            let mid_a = nb.mid_a.as_ref().ok_or_else(missing)?;
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            param_grad(mid_a, ds, counters)
        }
        ParamSlot::Bias => {
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let (b, t, p) = ds.dims3()?;
            let mut g = Tensor::zeros(&[p]);
            for row in 0..b * t {
                for j in 0..p {
                    g.data[j] += ds.data[row * p + j];
                }
            }
            counters.add_ops(ds.numel() as u64);
            Ok(g)
        }
        ParamSlot::Beta => {
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let (b, t, d) = ds.dims3()?;
            let mut g = Tensor::zeros(&[d]);
            for row in 0..b * t {
                for j in 0..d {
                    g.data[j] += ds.data[row * d + j];
                }
            }
            counters.add_ops(ds.numel() as u64);
            Ok(g)
        }
        ParamSlot::Gamma => {
            let ds = nb.ds.as_ref().ok_or_else(missing)?;
            let ln = nb.ln.as_ref().ok_or_else(missing)?;
            let (b, t, d) = ds.dims3()?;
            let mut g = Tensor::zeros(&[d]);
            for row in 0..b * t {
                for j in 0..d {
                    g.data[j] += ds.data[row * d + j] * ln.xhat.data[row * d + j];
                }
            }
            counters.add_ops(2 * ds.numel() as u64);
            Ok(g)
        }
    }
}

// ---------------------------------------------------------------------------
// the step itself
// ---------------------------------------------------------------------------

/// Run one private optimization step and return the private gradient
/// Ghat = sum_i C_i g_i + sigma * sens * N(0, I) per parameter, together with
/// per-sample norms, clip factors, and instrumentation. The weights are not
/// updated; apply the report through an [`Optimizer`].
pub fn private_step(
    graph: &Graph,
    batch: &Batch,
    targets: &Tensor,
    kind: ImplKind,
    privacy: &PrivacyParams,
    noise_rng: &mut SeededRng,
    counters: &mut OpCounters,
) -> Result<StepReport> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::dim("batch must contain at least one sample"));
    }
    if !privacy.sigma.is_finite() || privacy.sigma < 0.0 {
        return Err(Error::param(format!(
            "noise multiplier must be >= 0, got {}",
            privacy.sigma
        )));
    }
    let units = graph.clip_units()?;
    // explicit mode overrides are checked before any compute
    if let Some(modes) = &privacy.unit_modes {
        if modes.len() != units.len() {
            return Err(Error::config(format!(
                "expected {} unit modes, got {}",
                units.len(),
                modes.len()
            )));
        }
        for (m, u) in modes.iter().zip(units.iter()) {
            if *m == ClipMode::Ghost
                && !matches!(u.role, UnitRole::Weight | UnitRole::Embedding)
            {
                return Err(Error::config(format!(
                    "ghost mode requested for {}, which only supports instantiation",
                    u.id
                )));
            }
        }
    }

    if kind == ImplKind::Naive {
        return naive_step(graph, batch, targets, privacy, noise_rng, counters);
    }

    let mut extra_node_ops = vec![0u64; graph.nodes.len()];

    // ---- pass 1: forward + output gradients (unweighted loss) ----
    let (losses_t, mut book) = forward(graph, batch, targets, counters)?;
    let ones = Tensor::from_vec(&[b], vec![1.0; b])?;
    backward_output_grads(graph, &mut book, targets, &ones, counters)?;

    // wasted regular-gradient work dictated by the strategy's control flow
    if kind.wastes_full_gradient() {
        for unit in &units {
            let before = counters.mul_adds;
            for (_, g) in unit_grad_sum(&book, unit, None, counters)? {
                counters.alloc_bytes(g.bytes());
                counters.free_bytes(g.bytes());
            }
            extra_node_ops[unit.id.node] += counters.mul_adds - before;
        }
    } else if kind.wastes_origin_gradient() {
        for id in select_origin_params(graph)? {
            let before = counters.mul_adds;
            let g = param_regular_grad(graph, &book, id, counters)?;
            counters.alloc_bytes(g.bytes());
            counters.free_bytes(g.bytes());
            extra_node_ops[id.node] += counters.mul_adds - before;
        }
    }

    // ---- non-private: plain gradient sums, no norms, no noise ----
    if kind == ImplKind::NonDp {
        let mut grads = Vec::new();
        for unit in &units {
            let before = counters.mul_adds;
            for (id, g) in unit_grad_sum(&book, unit, None, counters)? {
                counters.alloc_bytes(g.bytes());
                grads.push((id, g));
            }
            extra_node_ops[unit.id.node] += counters.mul_adds - before;
        }
        let node_mul_adds: Vec<u64> = book
            .node_mul_adds
            .iter()
            .zip(extra_node_ops.iter())
            .map(|(a, b)| a + b)
            .collect();
        book.free_all(counters);
        for (_, g) in &grads {
            counters.free_bytes(g.bytes());
        }
        return Ok(StepReport {
            kind,
            losses: losses_t.data,
            per_sample_norms: Vec::new(),
            clip_factors: vec![1.0; b],
            grads,
            backward_passes: 1,
            node_mul_adds,
            weight_version: graph.weight_version,
        });
    }

    // ---- per-sample norms, unit by unit ----
    let mut norm_sq = vec![0.0f64; b];
    let mut gram_bytes: u64 = 0;
    let mut retained: Vec<Option<Stash>> = (0..units.len()).map(|_| None).collect();
    for (ui, unit) in units.iter().enumerate() {
        let before = counters.mul_adds;
        match unit.role {
            UnitRole::Weight | UnitRole::Embedding => {
                let mode = privacy
                    .unit_modes
                    .as_ref()
                    .map(|m| m[ui])
                    .unwrap_or_else(|| kind.unit_mode(unit));
                match mode {
                    ClipMode::Ghost => {
                        let ns = if unit.role == UnitRole::Embedding {
                            let nb = &book.nodes[unit.id.node];
                            let ids = nb.ids.as_ref().ok_or_else(|| {
                                Error::State(format!("books for {} not present", unit.id))
                            })?;
                            let ds = nb.ds.as_ref().ok_or_else(|| {
                                Error::State(format!("books for {} not present", unit.id))
                            })?;
                            ghost_norm_sq_embedding(ids, ds, counters)?
                        } else {
                            let (a, ds) = book.unit_pair(unit)?;
                            ghost_norm_sq(a, ds, counters)?
                        };
                        // the two T x T Gram workspaces live until step end
                        let ws = 8 * 2 * (b * unit.t * unit.t) as u64;
                        counters.alloc_bytes(ws);
                        gram_bytes += ws;
                        for (acc, v) in norm_sq.iter_mut().zip(ns.data.iter()) {
                            *acc += v;
                        }
                    }
                    ClipMode::Instantiate => {
                        let stash = if unit.role == UnitRole::Embedding {
                            let nb = &book.nodes[unit.id.node];
                            let ids = nb.ids.as_ref().ok_or_else(|| {
                                Error::State(format!("books for {} not present", unit.id))
                            })?;
                            let ds = nb.ds.as_ref().ok_or_else(|| {
                                Error::State(format!("books for {} not present", unit.id))
                            })?;
                            stash_embedding_unit(ids, ds, unit.d, counters)?
                        } else {
                            let (a, ds) = book.unit_pair(unit)?;
                            stash_weight_unit(a, ds, counters)?
                        };
                        let ns = stash.norms_sq(counters)?;
                        for (acc, v) in norm_sq.iter_mut().zip(ns.iter()) {
                            *acc += v;
                        }
                        // keep the stash only if the gradient will be read
                        // back out of it at the end of the step
                        let keep = kind.retains_stash() || kind == ImplKind::BkMixOpt;
                        if keep {
                            retained[ui] = Some(stash);
                        } else {
                            stash.free(counters);
                        }
                    }
                }
            }
            UnitRole::Bias => {
                let nb = &book.nodes[unit.id.node];
                let ds = nb.ds.as_ref().ok_or_else(|| {
                    Error::State(format!("books for {} not present", unit.id))
                })?;
                let ps = bias_per_sample_grads(ds, counters)?;
                counters.alloc_bytes(ps.bytes());
                let (bb, p) = (ps.shape[0], ps.shape[1]);
                for i in 0..bb {
                    norm_sq[i] +=
                        ps.data[i * p..(i + 1) * p].iter().map(|x| x * x).sum::<f64>();
                }
                counters.add_ops(2 * ps.numel() as u64);
                counters.free_bytes(ps.bytes());
            }
            UnitRole::NormAffine => {
                let nb = &book.nodes[unit.id.node];
                let ds = nb.ds.as_ref().ok_or_else(|| {
                    Error::State(format!("books for {} not present", unit.id))
                })?;
                let ln = nb.ln.as_ref().ok_or_else(|| {
                    Error::State(format!("books for {} not present", unit.id))
                })?;
                let ps = norm_layer_per_sample_grads(ds, ln, counters)?;
                counters.alloc_bytes(ps.bytes());
                let (bb, d2) = (ps.shape[0], ps.shape[1]);
                for i in 0..bb {
                    norm_sq[i] +=
                        ps.data[i * d2..(i + 1) * d2].iter().map(|x| x * x).sum::<f64>();
                }
                counters.add_ops(2 * ps.numel() as u64);
                counters.free_bytes(ps.bytes());
            }
        }
        extra_node_ops[unit.id.node] += counters.mul_adds - before;
    }

    let per_sample_norms: Vec<f64> = norm_sq.iter().map(|x| x.sqrt()).collect();
    let mut clip_factors = Vec::with_capacity(b);
    for &n in &per_sample_norms {
        clip_factors.push(clip_factor(n, privacy.clip)?);
    }
    let c = Tensor::from_vec(&[b], clip_factors.clone())?;

    // ---- clipped gradient assembly ----
    let mut grads: Vec<(ParamId, Tensor)> = Vec::new();
    if kind.uses_second_pass() {
        // re-run the output-gradient pass with the clip factors as loss
        // weights; plain sums over the re-booked pairs are already clipped
        backward_output_grads(graph, &mut book, targets, &c, counters)?;
        for unit in &units {
            let before = counters.mul_adds;
            for (id, g) in unit_grad_sum(&book, unit, None, counters)? {
                counters.alloc_bytes(g.bytes());
                grads.push((id, g));
            }
            extra_node_ops[unit.id.node] += counters.mul_adds - before;
        }
    } else {
        for (ui, unit) in units.iter().enumerate() {
            let before = counters.mul_adds;
            if let Some(stash) = retained[ui].take() {
                let g = stash.weighted(&c, counters)?;
                stash.free(counters);
                counters.alloc_bytes(g.bytes());
                grads.push((unit.id, g));
            } else {
                for (id, g) in unit_grad_sum(&book, unit, Some(&c), counters)? {
                    counters.alloc_bytes(g.bytes());
                    grads.push((id, g));
                }
            }
            extra_node_ops[unit.id.node] += counters.mul_adds - before;
        }
    }

    let node_mul_adds: Vec<u64> = book
        .node_mul_adds
        .iter()
        .zip(extra_node_ops.iter())
        .map(|(a, b)| a + b)
        .collect();

    // ---- release the step's working set, then add noise ----
    book.free_all(counters);
    counters.free_bytes(gram_bytes);
    if privacy.sigma > 0.0 {
        let sens = privacy.clip.sensitivity();
        for (_, g) in &mut grads {
            add_noise(g, privacy.sigma, sens, noise_rng, counters)?;
        }
    }
    for (_, g) in &grads {
        counters.free_bytes(g.bytes());
    }

    Ok(StepReport {
        kind,
        losses: losses_t.data,
        per_sample_norms,
        clip_factors,
        grads,
        backward_passes: kind.backward_passes(b),
        node_mul_adds,
        weight_version: graph.weight_version,
    })
}

/// The brute-force strategy: B independent single-sample forward/backward
/// passes, exact per-sample norms over all trainable parameters, and direct
/// accumulation of the clipped sum.
fn naive_step(
    graph: &Graph,
    batch: &Batch,
    targets: &Tensor,
    privacy: &PrivacyParams,
    noise_rng: &mut SeededRng,
    counters: &mut OpCounters,
) -> Result<StepReport> {
    let b = batch.len();
    let units = graph.clip_units()?;
    if targets.shape[0] != b {
        return Err(Error::dim(format!(
            "expected {} target rows, got {}",
            b, targets.shape[0]
        )));
    }
    let per = targets.numel() / b;
    let mut target_shape = targets.shape.clone();
    target_shape[0] = 1;

    let mut gsum: Vec<(ParamId, Tensor)> = graph
        .param_ids()
        .into_iter()
        .map(|id| {
            let shape = graph.param(id).expect("listed parameter exists").shape.clone();
            (id, Tensor::zeros(&shape))
        })
        .collect();
    for (_, g) in &gsum {
        counters.alloc_bytes(g.bytes());
    }

    let ones1 = Tensor::from_vec(&[1], vec![1.0])?;
    let mut losses = Vec::with_capacity(b);
    let mut per_sample_norms = Vec::with_capacity(b);
    let mut clip_factors = Vec::with_capacity(b);
    let mut node_mul_adds = vec![0u64; graph.nodes.len()];

    for i in 0..b {
        let sb = batch.slice(i);
        let ti = Tensor::from_vec(&target_shape, targets.data[i * per..(i + 1) * per].to_vec())?;
        let (li, mut book) = forward(graph, &sb, &ti, counters)?;
        backward_output_grads(graph, &mut book, &ti, &ones1, counters)?;

        let mut sq = 0.0;
        let mut sample: Vec<(ParamId, Tensor)> = Vec::new();
        for unit in &units {
            let before = counters.mul_adds;
            for (id, g) in unit_grad_sum(&book, unit, None, counters)? {
                counters.alloc_bytes(g.bytes());
                sq += g.frob_norm_sq();
                counters.add_ops(2 * g.numel() as u64);
                sample.push((id, g));
            }
            node_mul_adds[unit.id.node] += counters.mul_adds - before;
        }
        let norm = sq.sqrt();
        let ci = clip_factor(norm, privacy.clip)?;
        for ((_, acc), (_, g)) in gsum.iter_mut().zip(sample.iter()) {
            for (o, &v) in acc.data.iter_mut().zip(g.data.iter()) {
                *o += ci * v;
            }
            counters.add_ops(2 * g.numel() as u64);
        }
        for (_, g) in &sample {
            counters.free_bytes(g.bytes());
        }
        for (ops, nm) in book.node_mul_adds.iter().zip(node_mul_adds.iter_mut()) {
            *nm += ops;
        }
        book.free_all(counters);

        losses.push(li.data[0]);
        per_sample_norms.push(norm);
        clip_factors.push(ci);
    }

    if privacy.sigma > 0.0 {
        let sens = privacy.clip.sensitivity();
        for (_, g) in &mut gsum {
            add_noise(g, privacy.sigma, sens, noise_rng, counters)?;
        }
    }
    for (_, g) in &gsum {
        counters.free_bytes(g.bytes());
    }

    Ok(StepReport {
        kind: ImplKind::Naive,
        losses,
        per_sample_norms,
        clip_factors,
        grads: gsum,
        backward_passes: b as u64,
        node_mul_adds,
        weight_version: graph.weight_version,
    })
}

/// Ground-truth oracle: exact per-sample norms and the clipped sum
/// sum_i C_i g_i, computed by B independent single-sample passes. Runs on a
/// scratch counter context; no noise.
pub fn naive_oracle_grad(
    graph: &Graph,
    batch: &Batch,
    targets: &Tensor,
    clip: ClipFn,
) -> Result<(Vec<f64>, Vec<(ParamId, Tensor)>)> {
    let privacy = PrivacyParams { clip, sigma: 0.0, unit_modes: None };
    let mut scratch = OpCounters::new();
    let mut rng = SeededRng::new(0);
    let report = private_step(
        graph,
        batch,
        targets,
        ImplKind::Naive,
        &privacy,
        &mut rng,
        &mut scratch,
    )?;
    Ok((report.per_sample_norms, report.grads))
}

// ---------------------------------------------------------------------------
// optimizers and accumulation
// ---------------------------------------------------------------------------

/// SGD or Adam over the private gradient, averaged by the sample count.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        t: u64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Apply one update from the summed private gradient over `samples`
    /// examples; bumps the graph's weight version.
    pub fn apply(
        &mut self,
        graph: &mut Graph,
        grads: &[(ParamId, Tensor)],
        samples: usize,
    ) -> Result<()> {
        if samples == 0 {
            return Err(Error::param("sample count must be positive"));
        }
        let scale = 1.0 / samples as f64;
        match self {
            Optimizer::Sgd { lr } => {
                for (id, g) in grads {
                    let w = graph.param_mut(*id)?;
                    if w.numel() != g.numel() {
                        return Err(Error::dim(format!("gradient shape mismatch for {id}")));
                    }
                    for (wx, &gx) in w.data.iter_mut().zip(g.data.iter()) {
                        *wx -= *lr * scale * gx;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, m, v, t } => {
                if m.is_empty() {
                    *m = grads.iter().map(|(_, g)| Tensor::zeros(&g.shape)).collect();
                    *v = grads.iter().map(|(_, g)| Tensor::zeros(&g.shape)).collect();
                }
                if m.len() != grads.len() {
                    return Err(Error::State("optimizer state does not match gradients".into()));
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (k, (id, g)) in grads.iter().enumerate() {
                    let w = graph.param_mut(*id)?;
                    if w.numel() != g.numel() {
                        return Err(Error::dim(format!("gradient shape mismatch for {id}")));
                    }
                    for j in 0..g.numel() {
                        let gx = scale * g.data[j];
                        m[k].data[j] = *beta1 * m[k].data[j] + (1.0 - *beta1) * gx;
                        v[k].data[j] = *beta2 * v[k].data[j] + (1.0 - *beta2) * gx * gx;
                        let mhat = m[k].data[j] / bc1;
                        let vhat = v[k].data[j] / bc2;
                        w.data[j] -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        graph.weight_version += 1;
        Ok(())
    }
}

/// Sums clipped gradients across microbatches taken against the same weights;
/// noise is added once, after the last microbatch.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    grads: Option<Vec<(ParamId, Tensor)>>,
    weight_version: Option<u64>,
    samples: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold in one microbatch step (run it with sigma = 0).
    pub fn add(&mut self, report: &StepReport) -> Result<()> {
        if let Some(v) = self.weight_version {
            if v != report.weight_version {
                return Err(Error::State(
                    "weights changed between accumulated microbatches".into(),
                ));
            }
        } else {
            self.weight_version = Some(report.weight_version);
        }
        match &mut self.grads {
            None => {
                self.grads = Some(report.grads.clone());
            }
            Some(acc) => {
                if acc.len() != report.grads.len() {
                    return Err(Error::dim("accumulated gradient sets disagree"));
                }
                for ((ida, a), (idb, g)) in acc.iter_mut().zip(report.grads.iter()) {
                    if ida != idb || a.numel() != g.numel() {
                        return Err(Error::dim("accumulated gradient sets disagree"));
                    }
                    for (o, &v) in a.data.iter_mut().zip(g.data.iter()) {
                        *o += v;
                    }
                }
            }
        }
        self.samples += report.losses.len();
        Ok(())
    }

    /// Summed clipped gradient with noise added once over the whole batch.
    pub fn finish(
        self,
        clip: ClipFn,
        sigma: f64,
        rng: &mut SeededRng,
        counters: &mut OpCounters,
    ) -> Result<(Vec<(ParamId, Tensor)>, usize)> {
        let mut grads = self
            .grads
            .ok_or_else(|| Error::State("no microbatches accumulated".into()))?;
        if sigma > 0.0 {
            let sens = clip.sensitivity();
            for (_, g) in &mut grads {
                add_noise(g, sigma, sens, rng, counters)?;
            }
        }
        Ok((grads, self.samples))
    }
}
