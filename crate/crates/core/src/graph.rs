//! A minimal reverse-mode differentiation engine over feed-forward chains of
//! layers. The two backward sub-processes — output gradients and parameter
//! gradients — are exposed separately, and a forward/backward pass books the
//! per-layer activations and output gradients that the clipping strategies
//! re-use.

use crate::archspec::{Act, FlowShape, LayerDesc};
use crate::archspec::ArchSpec;
use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::layers::{
    act_forward, embedding_forward, layernorm_backward_input, layernorm_forward,
    lower_to_generalized_linear, LnState,
};
use crate::rng::SeededRng;
use crate::tensor::{col2im, matmul_into, matmul_nt_into, matmul_tn_into, uniform, ConvGeom, Tensor};

/// Identifies one parameter tensor inside a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub node: usize,
    pub slot: ParamSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// LoRA down-projection (d x r) or adapter down-projection (p x r)
    Down,
    /// LoRA up-projection (r x p) or adapter up-projection (r x p)
    Up,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node{}.{:?}", self.node, self.slot)
    }
}

#[derive(Debug, Clone)]
pub enum NodeParams {
    None,
    Dense { w: Tensor, b: Option<Tensor> },
    Embedding { w: Tensor },
    Norm { gamma: Tensor, beta: Tensor },
    Lora { w: Tensor, down: Tensor, up: Tensor },
    Adapter { down: Tensor, up: Tensor },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub desc: LayerDesc,
    pub params: NodeParams,
}

/// A feed-forward chain of layers with a summed per-sample loss.
#[derive(Debug, Clone)]
pub struct Graph {
    pub spec: ArchSpec,
    pub nodes: Vec<Node>,
    /// bumped on every weight update; used to detect stale accumulation
    pub weight_version: u64,
    /// index of the earliest node owning a trainable parameter
    first_trainable: Option<usize>,
}

fn fan_in_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

impl Graph {
    pub fn build(spec: ArchSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.flow_shapes()?; // validate the chain
        let mut nodes = Vec::with_capacity(spec.layers.len());
        for desc in &spec.layers {
            let params = match *desc {
                LayerDesc::Linear { d, p, bias } => NodeParams::Dense {
                    w: uniform(&[d, p], fan_in_scale(d), rng),
                    b: bias.then(|| uniform(&[p], fan_in_scale(d), rng)),
                },
                LayerDesc::Conv2d { c_in, c_out, kh, kw, bias, .. } => {
                    let d = c_in * kh * kw;
                    NodeParams::Dense {
                        w: uniform(&[d, c_out], fan_in_scale(d), rng),
                        b: bias.then(|| uniform(&[c_out], fan_in_scale(d), rng)),
                    }
                }
                LayerDesc::Embedding { vocab, dim } => NodeParams::Embedding {
                    w: uniform(&[vocab, dim], 1.0, rng),
                },
                // affine norm parameters are sized in the second pass below
                LayerDesc::LayerNorm { .. } => NodeParams::None,
                LayerDesc::Lora { d, p, r } => NodeParams::Lora {
                    w: uniform(&[d, p], fan_in_scale(d), rng),
                    down: uniform(&[d, r], fan_in_scale(d), rng),
                    up: uniform(&[r, p], fan_in_scale(r), rng),
                },
                LayerDesc::Adapter { dim, r } => NodeParams::Adapter {
                    down: uniform(&[dim, r], fan_in_scale(dim), rng),
                    up: uniform(&[r, dim], fan_in_scale(r), rng),
                },
                _ => NodeParams::None,
            };
            nodes.push(Node { desc: *desc, params });
        }
        // second pass: affine norm parameters need the flow width
        let mut cur = spec.input.flow();
        let shapes = spec.flow_shapes()?;
        for (i, node) in nodes.iter_mut().enumerate() {
            if let LayerDesc::LayerNorm { affine: true } = node.desc {
                let width = match cur {
                    FlowShape::Flat(d) => d,
                    FlowShape::Seq { dim, .. } => dim,
                    _ => return Err(Error::Specification(format!("layer {i}: layernorm on non-dense flow"))),
                };
                let mut gamma = Tensor::zeros(&[width]);
                let mut beta = Tensor::zeros(&[width]);
                for v in gamma.data.iter_mut() {
                    *v = 1.0 + 0.1 * rng.uniform_sym();
                }
                for v in beta.data.iter_mut() {
                    *v = 0.1 * rng.uniform_sym();
                }
                node.params = NodeParams::Norm { gamma, beta };
            }
            cur = shapes[i];
        }
        let first_trainable = nodes
            .iter()
            .enumerate()
            .find(|(i, n)| !n.param_ids_at(*i).is_empty())
            .map(|(i, _)| i);
        if first_trainable.is_none() {
            return Err(Error::config("graph has no trainable parameters"));
        }
        Ok(Graph { spec, nodes, weight_version: 0, first_trainable })
    }

    pub fn first_trainable(&self) -> usize {
        self.first_trainable.expect("graph has trainable parameters")
    }

    /// All trainable parameter ids in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            out.extend(n.param_ids_at(i));
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Result<&Tensor> {
        self.nodes[id.node]
            .param_ref(id.slot)
            .ok_or_else(|| Error::param(format!("no parameter {id}")))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        self.nodes[id.node]
            .param_mut(id.slot)
            .ok_or_else(|| Error::param(format!("no parameter {id}")))
    }
}

impl Node {
    fn param_ids_at(&self, node: usize) -> Vec<ParamId> {
        match &self.params {
            NodeParams::None => vec![],
            NodeParams::Dense { b, .. } => {
                let mut v = vec![ParamId { node, slot: ParamSlot::Weight }];
                if b.is_some() {
                    v.push(ParamId { node, slot: ParamSlot::Bias });
                }
                v
            }
            NodeParams::Embedding { .. } => vec![ParamId { node, slot: ParamSlot::Weight }],
            NodeParams::Norm { .. } => vec![
                ParamId { node, slot: ParamSlot::Gamma },
                ParamId { node, slot: ParamSlot::Beta },
            ],
            // the LoRA base weight is frozen by design
            NodeParams::Lora { .. } | NodeParams::Adapter { .. } => vec![
                ParamId { node, slot: ParamSlot::Down },
                ParamId { node, slot: ParamSlot::Up },
            ],
        }
    }

    fn param_ref(&self, slot: ParamSlot) -> Option<&Tensor> {
        match (&self.params, slot) {
            (NodeParams::Dense { w, .. }, ParamSlot::Weight) => Some(w),
            (NodeParams::Dense { b, .. }, ParamSlot::Bias) => b.as_ref(),
            (NodeParams::Embedding { w }, ParamSlot::Weight) => Some(w),
            (NodeParams::Norm { gamma, .. }, ParamSlot::Gamma) => Some(gamma),
            (NodeParams::Norm { beta, .. }, ParamSlot::Beta) => Some(beta),
            (NodeParams::Lora { down, .. }, ParamSlot::Down) => Some(down),
            (NodeParams::Lora { up, .. }, ParamSlot::Up) => Some(up),
            (NodeParams::Lora { w, .. }, ParamSlot::Weight) => Some(w),
            (NodeParams::Adapter { down, .. }, ParamSlot::Down) => Some(down),
            (NodeParams::Adapter { up, .. }, ParamSlot::Up) => Some(up),
            _ => None,
        }
    }

    fn param_mut(&mut self, slot: ParamSlot) -> Option<&mut Tensor> {
        match (&mut self.params, slot) {
            (NodeParams::Dense { w, .. }, ParamSlot::Weight) => Some(w),
            (NodeParams::Dense { b, .. }, ParamSlot::Bias) => b.as_mut(),
            (NodeParams::Embedding { w }, ParamSlot::Weight) => Some(w),
            (NodeParams::Norm { gamma, .. }, ParamSlot::Gamma) => Some(gamma),
            (NodeParams::Norm { beta, .. }, ParamSlot::Beta) => Some(beta),
            (NodeParams::Lora { down, .. }, ParamSlot::Down) => Some(down),
            (NodeParams::Lora { up, .. }, ParamSlot::Up) => Some(up),
            (NodeParams::Lora { w, .. }, ParamSlot::Weight) => Some(w),
            (NodeParams::Adapter { down, .. }, ParamSlot::Down) => Some(down),
            (NodeParams::Adapter { up, .. }, ParamSlot::Up) => Some(up),
            _ => None,
        }
    }
}

/// One mini-batch of synthetic data.
#[derive(Debug, Clone)]
pub enum Batch {
    Dense(Tensor),
    Tokens { ids: Vec<usize>, b: usize, t: usize, vocab: usize },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Dense(t) => t.shape[0],
            Batch::Tokens { b, .. } => *b,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single-sample slice, used by the brute-force per-example oracle.
    pub fn slice(&self, i: usize) -> Batch {
        match self {
            Batch::Dense(t) => {
                let per = t.numel() / t.shape[0];
                let mut shape = t.shape.clone();
                shape[0] = 1;
                Batch::Dense(
                    Tensor::from_vec(&shape, t.data[i * per..(i + 1) * per].to_vec()).unwrap(),
                )
            }
            Batch::Tokens { ids, t, vocab, .. } => Batch::Tokens {
                ids: ids[i * t..(i + 1) * t].to_vec(),
                b: 1,
                t: *t,
                vocab: *vocab,
            },
        }
    }

    /// Draw a random batch matching the graph's input description.
    pub fn synth(spec: &ArchSpec, b: usize, rng: &mut SeededRng) -> Batch {
        match spec.input {
            crate::archspec::InputDesc::Flat(d) => Batch::Dense(uniform(&[b, d], 1.0, rng)),
            crate::archspec::InputDesc::Image { c, h, w } => {
                Batch::Dense(uniform(&[b, c, h, w], 1.0, rng))
            }
            crate::archspec::InputDesc::Seq { t, dim } => {
                Batch::Dense(uniform(&[b, t, dim], 1.0, rng))
            }
            crate::archspec::InputDesc::SeqTokens { t, vocab } => Batch::Tokens {
                ids: (0..b * t).map(|_| rng.uniform_usize(vocab)).collect(),
                b,
                t,
                vocab,
            },
        }
    }
}

/// Book-kept state of one layer after the forward / backward passes.
#[derive(Debug, Default)]
pub struct NodeBook {
    /// canonical B x T x d activation of a trainable generalized-linear layer
    pub a: Option<Tensor>,
    /// embedding token ids
    pub ids: Option<Vec<usize>>,
    /// composite second-sub-module activation (B x T x r)
    pub mid_a: Option<Tensor>,
    /// adapter nonlinearity derivative (B x T x r)
    pub mid_phi: Option<Tensor>,
    /// activation-node derivative, stored during forward
    pub phi: Option<Tensor>,
    /// layer normalization statistics
    pub ln: Option<LnState>,
    /// booked output gradient (B x T x p)
    pub ds: Option<Tensor>,
    /// composite first-sub-module output gradient (B x T x r)
    pub mid_ds: Option<Tensor>,
}

/// Per-layer book-kept activations/output gradients plus the network output.
#[derive(Debug)]
pub struct GradBook {
    pub nodes: Vec<NodeBook>,
    /// final network output s, canonical B x T x p
    pub output: Tensor,
    pub batch_size: usize,
    /// weight version the book was computed against
    pub weight_version: u64,
    /// mul-adds attributed to each node across all passes so far
    pub node_mul_adds: Vec<u64>,
}

fn talloc(c: &mut OpCounters, t: &Tensor) {
    c.alloc_bytes(t.bytes());
}

fn tfree(c: &mut OpCounters, t: &Tensor) {
    c.free_bytes(t.bytes());
}

impl GradBook {
    pub fn free_all(&mut self, counters: &mut OpCounters) {
        for i in 0..self.nodes.len() {
            self.free_node(i, counters);
        }
        if self.output.numel() > 0 {
            tfree(counters, &self.output);
            self.output = Tensor::zeros(&[0]);
        }
    }

    /// Release one layer's booked tensors ("Delete a, ds").
    pub fn free_node(&mut self, i: usize, counters: &mut OpCounters) {
        let nb = &mut self.nodes[i];
        for t in [&mut nb.a, &mut nb.mid_a, &mut nb.mid_phi, &mut nb.phi, &mut nb.ds, &mut nb.mid_ds]
        {
            if let Some(x) = t.take() {
                tfree(counters, &x);
            }
        }
        if let Some(ln) = nb.ln.take() {
            tfree(counters, &ln.xhat);
            counters.free_bytes(8 * ln.inv_std.len() as u64);
        }
        nb.ids = None;
    }
}

/// Canonical (B, T, p) view of a flow tensor; image flows are stored in
/// channel-major layout and transposed on demand.
fn canonical(t: Tensor, shape: FlowShape) -> Tensor {
    match shape {
        FlowShape::Flat(d) => {
            let b = t.numel() / d;
            t.reshaped(&[b, 1, d]).unwrap()
        }
        FlowShape::Seq { t: tt, dim } => {
            let b = t.numel() / (tt * dim);
            t.reshaped(&[b, tt, dim]).unwrap()
        }
        FlowShape::Image { c, h, w } => {
            // B x C x HW -> B x HW x C
            let b = t.numel() / (c * h * w);
            let hw = h * w;
            let mut out = Tensor::zeros(&[b, hw, c]);
            for bi in 0..b {
                for ci in 0..c {
                    for s in 0..hw {
                        out.data[bi * hw * c + s * c + ci] = t.data[bi * c * hw + ci * hw + s];
                    }
                }
            }
            out
        }
        FlowShape::Tokens { .. } => unreachable!("token flow has no dense canonical form"),
    }
}

/// Inverse of `canonical` for image flows.
fn from_canonical(t: &Tensor, shape: FlowShape) -> Tensor {
    match shape {
        FlowShape::Image { c, h, w } => {
            let b = t.shape[0];
            let hw = h * w;
            let mut out = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                for s in 0..hw {
                    for ci in 0..c {
                        out.data[bi * c * hw + ci * hw + s] = t.data[bi * hw * c + s * c + ci];
                    }
                }
            }
            out
        }
        FlowShape::Flat(_) | FlowShape::Seq { .. } => t.clone(),
        FlowShape::Tokens { .. } => unreachable!(),
    }
}

/// Canonical view for a dense layer's input, flattening image flows
/// channel-major to B x 1 x (C*H*W) (the auto-flatten rule).
fn dense_input_view(t: Tensor, shape: FlowShape, b: usize) -> Tensor {
    match shape {
        FlowShape::Image { c, h, w } => t.reshaped(&[b, 1, c * h * w]).unwrap(),
        _ => canonical(t, shape),
    }
}

/// Reshape a canonical B x T x d gradient to the physical layout of a flow.
/// For image flows this is only valid when the canonical form came from a
/// channel-major flatten (the dense-layer auto-flatten rule).
fn to_physical(t: Tensor, shape: FlowShape, b: usize) -> Result<Tensor> {
    Ok(match shape {
        FlowShape::Flat(d) => t.reshaped(&[b, d])?,
        FlowShape::Seq { t: tt, dim } => t.reshaped(&[b, tt, dim])?,
        FlowShape::Image { c, h, w } => t.reshaped(&[b, c, h, w])?,
        FlowShape::Tokens { .. } => {
            return Err(Error::State("gradient cannot flow into a token stream".into()))
        }
    })
}

/// Batched product of a canonical `B x T x d` tensor with a `d x p` matrix;
/// counts `2*BT*d*p`.
fn bt_matmul(a: &Tensor, w: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (b, t, d) = a.dims3()?;
    let (dw, p) = w.dims2()?;
    if d != dw {
        return Err(Error::dim(format!(
            "activation width {d} does not match weight {:?}",
            w.shape
        )));
    }
    let mut out = Tensor::zeros(&[b, t, p]);
    matmul_into(&a.data, &w.data, &mut out.data, b * t, d, p, counters);
    Ok(out)
}

/// Batched product with the transpose, `g * W^T`; counts `2*BT*d*p`.
fn bt_matmul_t(g: &Tensor, w: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (b, t, p) = g.dims3()?;
    let (d, pw) = w.dims2()?;
    if p != pw {
        return Err(Error::dim(format!(
            "gradient width {p} does not match weight {:?}",
            w.shape
        )));
    }
    let mut out = Tensor::zeros(&[b, t, d]);
    matmul_nt_into(&g.data, &w.data, &mut out.data, b * t, p, d, counters);
    Ok(out)
}

fn add_bias(s: &mut Tensor, b: &Tensor, counters: &mut OpCounters) {
    let p = b.numel();
    for row in s.data.chunks_mut(p) {
        for (v, &bv) in row.iter_mut().zip(b.data.iter()) {
            *v += bv;
        }
    }
    counters.add_ops(s.numel() as u64);
}

/// Forward pass. Books activations (and auxiliary state) for every trainable
/// layer and returns the per-sample losses `L_i = ||s_i - y_i||^2` together
/// with the book.
///
/// Tracked memory: every tensor retained in the book plus the network output;
/// intermediates are charged and released as they die.
pub fn forward(
    graph: &Graph,
    batch: &Batch,
    targets: &Tensor,
    counters: &mut OpCounters,
) -> Result<(Tensor, GradBook)> {
    let bsz = batch.len();
    // reject batches that do not match the declared input before layer 0 runs
    match (batch, graph.spec.input) {
        (Batch::Dense(x), input) => {
            let per: usize = match input {
                crate::archspec::InputDesc::Flat(d) => d,
                crate::archspec::InputDesc::Image { c, h, w } => c * h * w,
                crate::archspec::InputDesc::Seq { t, dim } => t * dim,
                crate::archspec::InputDesc::SeqTokens { .. } => {
                    return Err(Error::dim(
                        "layer 0: token input expects a token batch, got a dense one".to_string(),
                    ))
                }
            };
            if x.numel() != bsz * per {
                return Err(Error::dim(format!(
                    "layer 0: batch shape {:?} does not match the declared input ({per} scalars per sample)",
                    x.shape
                )));
            }
        }
        (Batch::Tokens { t, vocab, .. }, crate::archspec::InputDesc::SeqTokens { t: st, vocab: sv }) => {
            if *t != st || *vocab != sv {
                return Err(Error::dim(format!(
                    "layer 0: token batch (T={t}, vocab={vocab}) does not match the declared input (T={st}, vocab={sv})"
                )));
            }
        }
        (Batch::Tokens { .. }, _) => {
            return Err(Error::dim(
                "layer 0: dense input expects a dense batch, got tokens".to_string(),
            ))
        }
    }
    let mut books: Vec<NodeBook> = (0..graph.nodes.len()).map(|_| NodeBook::default()).collect();
    let mut node_mul_adds = vec![0u64; graph.nodes.len()];

    enum Flow {
        Dense { t: Tensor, shape: FlowShape },
        Tokens { ids: Vec<usize>, t: usize },
    }

    let mut flow = match batch {
        Batch::Dense(x) => {
            let shape = graph.spec.input.flow();
            let x = x.clone();
            talloc(counters, &x);
            Flow::Dense { t: x, shape }
        }
        Batch::Tokens { ids, t, .. } => Flow::Tokens { ids: ids.clone(), t: *t },
    };

    let flow_shapes = graph.spec.flow_shapes()?;
    for (i, node) in graph.nodes.iter().enumerate() {
        let ops_before = counters.mul_adds;
        let out_shape = flow_shapes[i];
        flow = match (&node.desc, flow) {
            (LayerDesc::Linear { .. }, Flow::Dense { t, shape }) => {
                let a = dense_input_view(t, shape, bsz);
                let (w, b) = match &node.params {
                    NodeParams::Dense { w, b } => (w, b.as_ref()),
                    _ => unreachable!(),
                };
                let mut s = bt_matmul(&a, w, counters).map_err(|e| at_layer(i, e))?;
                if let Some(b) = b {
                    add_bias(&mut s, b, counters);
                }
                talloc(counters, &s);
                books[i].a = Some(a);
                Flow::Dense { t: s, shape: out_shape }
            }
            (LayerDesc::Conv2d { .. }, Flow::Dense { t, shape }) => {
                if !matches!(shape, FlowShape::Image { .. }) {
                    return Err(at_layer(i, Error::dim(format!("conv2d expects an image flow, got {shape}"))));
                }
                let cols = lower_to_generalized_linear(&node.desc, &t).map_err(|e| at_layer(i, e))?;
                talloc(counters, &cols);
                tfree(counters, &t);
                drop(t);
                let (w, b) = match &node.params {
                    NodeParams::Dense { w, b } => (w, b.as_ref()),
                    _ => unreachable!(),
                };
                let mut s_cols = bt_matmul(&cols, w, counters).map_err(|e| at_layer(i, e))?;
                if let Some(b) = b {
                    add_bias(&mut s_cols, b, counters);
                }
                // transpose to channel-major image layout for the next layer
                let img = from_canonical(&s_cols, out_shape);
                counters.add_ops(img.numel() as u64);
                talloc(counters, &img);
                books[i].a = Some(cols);
                Flow::Dense { t: img, shape: out_shape }
            }
            (LayerDesc::Embedding { .. }, Flow::Tokens { ids, t }) => {
                let w = match &node.params {
                    NodeParams::Embedding { w } => w,
                    _ => unreachable!(),
                };
                let s = embedding_forward(&ids, w, bsz, t, counters).map_err(|e| at_layer(i, e))?;
                talloc(counters, &s);
                books[i].ids = Some(ids);
                Flow::Dense { t: s, shape: out_shape }
            }
            (LayerDesc::Activation(act), Flow::Dense { t, shape }) => {
                let (y, phi) = act_forward(*act, &t, counters);
                talloc(counters, &y);
                talloc(counters, &phi);
                tfree(counters, &t);
                drop(t);
                books[i].phi = Some(phi);
                Flow::Dense { t: y, shape }
            }
            (LayerDesc::LayerNorm { .. }, Flow::Dense { t, shape }) => {
                let x = canonical(t, shape);
                let (gamma, beta) = match &node.params {
                    NodeParams::Norm { gamma, beta } => (Some(gamma), Some(beta)),
                    _ => (None, None),
                };
                let (y, state) = layernorm_forward(&x, gamma, beta, counters).map_err(|e| at_layer(i, e))?;
                let y = to_physical(y, shape, bsz)?;
                talloc(counters, &y);
                talloc(counters, &state.xhat);
                counters.alloc_bytes(8 * state.inv_std.len() as u64);
                tfree(counters, &x);
                books[i].ln = Some(state);
                Flow::Dense { t: y, shape }
            }
            (LayerDesc::Pool { k, stride }, Flow::Dense { t, shape }) => {
                let (c, h, w) = match shape {
                    FlowShape::Image { c, h, w } => (c, h, w),
                    _ => return Err(at_layer(i, Error::dim("pool expects an image flow"))),
                };
                let (h2, w2) = match out_shape {
                    FlowShape::Image { h, w, .. } => (h, w),
                    _ => unreachable!(),
                };
                let mut out = Tensor::zeros(&[bsz, c, h2, w2]);
                let inv = 1.0 / ((k * k) as f64);
                for bi in 0..bsz {
                    for ci in 0..c {
                        for oh in 0..h2 {
                            for ow in 0..w2 {
                                let mut acc = 0.0;
                                for dh in 0..*k {
                                    for dw in 0..*k {
                                        let ih = oh * stride + dh;
                                        let iw = ow * stride + dw;
                                        acc += t.data[((bi * c + ci) * h + ih) * w + iw];
                                    }
                                }
                                out.data[((bi * c + ci) * h2 + oh) * w2 + ow] = acc * inv;
                            }
                        }
                    }
                }
                counters.add_ops(t.numel() as u64);
                talloc(counters, &out);
                tfree(counters, &t);
                Flow::Dense { t: out, shape: out_shape }
            }
            (LayerDesc::Gap, Flow::Dense { t, shape }) => {
                let (c, h, w) = match shape {
                    FlowShape::Image { c, h, w } => (c, h, w),
                    _ => return Err(at_layer(i, Error::dim("gap expects an image flow"))),
                };
                let mut out = Tensor::zeros(&[bsz, c]);
                let inv = 1.0 / ((h * w) as f64);
                for bi in 0..bsz {
                    for ci in 0..c {
                        let start = (bi * c + ci) * h * w;
                        out.data[bi * c + ci] =
                            t.data[start..start + h * w].iter().sum::<f64>() * inv;
                    }
                }
                counters.add_ops(t.numel() as u64);
                talloc(counters, &out);
                tfree(counters, &t);
                Flow::Dense { t: out, shape: out_shape }
            }
            (LayerDesc::Flatten, Flow::Dense { t, .. }) => {
                let d = t.numel() / bsz;
                Flow::Dense { t: t.reshaped(&[bsz, d]).unwrap(), shape: out_shape }
            }
            (LayerDesc::Lora { .. }, Flow::Dense { t, shape }) => {
                let a = dense_input_view(t, shape, bsz);
                let (w, down, up) = match &node.params {
                    NodeParams::Lora { w, down, up } => (w, down, up),
                    _ => unreachable!(),
                };
                let mid = bt_matmul(&a, down, counters).map_err(|e| at_layer(i, e))?;
                let mut s = bt_matmul(&a, w, counters).map_err(|e| at_layer(i, e))?;
                let low = bt_matmul(&mid, up, counters).map_err(|e| at_layer(i, e))?;
                for (x, &y) in s.data.iter_mut().zip(low.data.iter()) {
                    *x += y;
                }
                counters.add_ops(s.numel() as u64);
                talloc(counters, &s);
                talloc(counters, &mid);
                books[i].a = Some(a);
                books[i].mid_a = Some(mid);
                Flow::Dense { t: s, shape: out_shape }
            }
            (LayerDesc::Adapter { .. }, Flow::Dense { t, shape }) => {
                let a = dense_input_view(t, shape, bsz);
                let (down, up) = match &node.params {
                    NodeParams::Adapter { down, up } => (down, up),
                    _ => unreachable!(),
                };
                let z = bt_matmul(&a, down, counters).map_err(|e| at_layer(i, e))?;
                let (tau, tau_p) = act_forward(Act::Tanh, &z, counters);
                let mut s = bt_matmul(&tau, up, counters).map_err(|e| at_layer(i, e))?;
                for (x, &y) in s.data.iter_mut().zip(a.data.iter()) {
                    *x += y; // residual connection
                }
                counters.add_ops(s.numel() as u64);
                talloc(counters, &s);
                talloc(counters, &tau);
                talloc(counters, &tau_p);
                books[i].a = Some(a);
                books[i].mid_a = Some(tau);
                books[i].mid_phi = Some(tau_p);
                Flow::Dense { t: s, shape: out_shape }
            }
            (desc, _) => {
                return Err(at_layer(i, Error::dim(format!("{desc:?} cannot consume current flow"))))
            }
        };
        node_mul_adds[i] += counters.mul_adds - ops_before;
    }

    let (out, out_shape) = match flow {
        Flow::Dense { t, shape } => (t, shape),
        Flow::Tokens { .. } => {
            return Err(Error::config("network output is a token stream; add layers"))
        }
    };
    let output = canonical(out, out_shape);
    if output.shape != targets.shape {
        return Err(Error::dim(format!(
            "targets {:?} do not match network output {:?}",
            targets.shape, output.shape
        )));
    }
    // per-sample squared-error losses
    let mut losses = Tensor::zeros(&[bsz]);
    let per = output.numel() / bsz;
    for i in 0..bsz {
        let mut acc = 0.0;
        for j in 0..per {
            let d = output.data[i * per + j] - targets.data[i * per + j];
            acc += d * d;
        }
        losses.data[i] = acc;
    }
    counters.add_ops(2 * output.numel() as u64);
    if !losses.all_finite() {
        return Err(Error::State("non-finite loss".into()));
    }

    Ok((
        losses,
        GradBook {
            nodes: books,
            output,
            batch_size: bsz,
            weight_version: graph.weight_version,
            node_mul_adds,
        },
    ))
}

fn at_layer(i: usize, e: Error) -> Error {
    Error::Dimension(format!("layer {i}: {e}"))
}

/// Output-gradient backward sub-process for the weighted loss
/// `sum_i w_i L_i`. Books the output gradient of every trainable layer; does
/// NOT compute any parameter gradient. Re-entering replaces previous books
/// (the second backward pass of the two-pass strategies).
///
/// Propagation stops at the earliest trainable layer: gradients below it feed
/// no parameter.
pub fn backward_output_grads(
    graph: &Graph,
    book: &mut GradBook,
    targets: &Tensor,
    loss_weights: &Tensor,
    counters: &mut OpCounters,
) -> Result<()> {
    if book.output.numel() == 0 {
        return Err(Error::State("backward called before forward".into()));
    }
    if book.weight_version != graph.weight_version {
        return Err(Error::State("book is stale: weights changed since forward".into()));
    }
    let bsz = book.batch_size;
    if loss_weights.numel() != bsz {
        return Err(Error::dim(format!(
            "expected {bsz} loss weights, got {}",
            loss_weights.numel()
        )));
    }
    let flow_shapes = graph.spec.flow_shapes()?;
    let final_shape = *flow_shapes.last().expect("non-empty graph");

    // initial gradient of sum_i w_i ||s_i - y_i||^2 w.r.t. s, canonical layout
    let mut init = Tensor::zeros(&book.output.shape);
    let per = book.output.numel() / bsz;
    for i in 0..bsz {
        let w = loss_weights.data[i];
        for j in 0..per {
            init.data[i * per + j] =
                2.0 * w * (book.output.data[i * per + j] - targets.data[i * per + j]);
        }
    }
    counters.add_ops(2 * init.numel() as u64);
    // convert to the physical layout the layers exchange (channel-major for
    // image flows)
    let mut g = match final_shape {
        FlowShape::Image { .. } => {
            let t = from_canonical(&init, final_shape);
            counters.add_ops(t.numel() as u64);
            t
        }
        _ => to_physical(init, final_shape, bsz)?,
    };
    talloc(counters, &g);

    let first = graph.first_trainable();
    for i in (0..graph.nodes.len()).rev() {
        let ops_before = counters.mul_adds;
        let node = &graph.nodes[i];
        let in_shape = if i == 0 { graph.spec.input.flow() } else { flow_shapes[i - 1] };
        let out_shape = flow_shapes[i];
        let propagate = i > first;
        let mut stop = false;

        g = match &node.desc {
            LayerDesc::Linear { p, .. } => {
                let t = g.numel() / (bsz * p);
                let ds = g.reshaped(&[bsz, t, *p])?;
                let w = graph.param(ParamId { node: i, slot: ParamSlot::Weight })?;
                let next = if propagate {
                    let dx = bt_matmul_t(&ds, w, counters)?;
                    talloc(counters, &dx);
                    Some(to_physical(dx, in_shape, bsz)?)
                } else {
                    None
                };
                if let Some(old) = book.nodes[i].ds.take() {
                    tfree(counters, &old);
                }
                book.nodes[i].ds = Some(ds);
                match next {
                    Some(x) => x,
                    None => {
                        stop = true;
                        Tensor::zeros(&[0])
                    }
                }
            }
            LayerDesc::Conv2d { kh, kw, stride, pad, .. } => {
                // g arrives in channel-major image layout; book it canonical
                let ds = canonical(g.clone(), out_shape);
                counters.add_ops(ds.numel() as u64);
                talloc(counters, &ds);
                tfree(counters, &g);
                drop(g);
                let w = graph.param(ParamId { node: i, slot: ParamSlot::Weight })?;
                let next = if propagate {
                    let cols_grad = bt_matmul_t(&ds, w, counters)?;
                    let (ci, hi, wi) = match in_shape {
                        FlowShape::Image { c, h, w } => (c, h, w),
                        _ => return Err(at_layer(i, Error::dim("conv2d expects an image flow"))),
                    };
                    let geom = ConvGeom { kh: *kh, kw: *kw, stride: *stride, pad: *pad, dilation: 1 };
                    let img = col2im(&cols_grad, ci, hi, wi, geom).map_err(|e| at_layer(i, e))?;
                    counters.add_ops(img.numel() as u64);
                    talloc(counters, &img);
                    Some(img)
                } else {
                    None
                };
                if let Some(old) = book.nodes[i].ds.take() {
                    tfree(counters, &old);
                }
                book.nodes[i].ds = Some(ds);
                match next {
                    Some(x) => x,
                    None => {
                        stop = true;
                        Tensor::zeros(&[0])
                    }
                }
            }
            LayerDesc::Embedding { dim, .. } => {
                let t = g.numel() / (bsz * dim);
                let ds = g.reshaped(&[bsz, t, *dim])?;
                if let Some(old) = book.nodes[i].ds.take() {
                    tfree(counters, &old);
                }
                book.nodes[i].ds = Some(ds);
                stop = true; // tokens carry no gradient
                Tensor::zeros(&[0])
            }
            LayerDesc::Activation(_) => {
                // phi shares g's physical layout
                let phi = book.nodes[i].phi.as_ref().expect("activation derivative booked");
                for (x, &d) in g.data.iter_mut().zip(phi.data.iter()) {
                    *x *= d;
                }
                counters.add_ops(2 * g.numel() as u64);
                g
            }
            LayerDesc::LayerNorm { .. } => {
                let width = match in_shape {
                    FlowShape::Flat(d) => d,
                    FlowShape::Seq { dim, .. } => dim,
                    _ => return Err(at_layer(i, Error::dim("layernorm expects a dense flow"))),
                };
                let t = g.numel() / (bsz * width);
                let ds = g.reshaped(&[bsz, t, width])?;
                let gamma = match &node.params {
                    NodeParams::Norm { gamma, .. } => Some(gamma),
                    _ => None,
                };
                let state = book.nodes[i].ln.as_ref().expect("layernorm state booked");
                let dx = layernorm_backward_input(&ds, gamma, state, counters)?;
                talloc(counters, &dx);
                if matches!(node.params, NodeParams::Norm { .. }) {
                    if let Some(old) = book.nodes[i].ds.take() {
                        tfree(counters, &old);
                    }
                    book.nodes[i].ds = Some(ds);
                } else {
                    tfree(counters, &ds);
                }
                to_physical(dx, in_shape, bsz)?
            }
            LayerDesc::Pool { k, stride } => {
                let (c, h, w) = match in_shape {
                    FlowShape::Image { c, h, w } => (c, h, w),
                    _ => unreachable!("pool has image flows"),
                };
                let (h2, w2) = match out_shape {
                    FlowShape::Image { h, w, .. } => (h, w),
                    _ => unreachable!(),
                };
                let mut out = Tensor::zeros(&[bsz, c, h, w]);
                let inv = 1.0 / ((k * k) as f64);
                for bi in 0..bsz {
                    for ci in 0..c {
                        for oh in 0..h2 {
                            for ow in 0..w2 {
                                let gv = g.data[((bi * c + ci) * h2 + oh) * w2 + ow] * inv;
                                for dh in 0..*k {
                                    for dw in 0..*k {
                                        let ih = oh * stride + dh;
                                        let iw = ow * stride + dw;
                                        out.data[((bi * c + ci) * h + ih) * w + iw] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                counters.add_ops(g.numel() as u64);
                talloc(counters, &out);
                tfree(counters, &g);
                out
            }
            LayerDesc::Gap => {
                let (c, h, w) = match in_shape {
                    FlowShape::Image { c, h, w } => (c, h, w),
                    _ => unreachable!("gap has an image input flow"),
                };
                let mut out = Tensor::zeros(&[bsz, c, h, w]);
                let inv = 1.0 / ((h * w) as f64);
                for bi in 0..bsz {
                    for ci in 0..c {
                        let gv = g.data[bi * c + ci] * inv;
                        let start = (bi * c + ci) * h * w;
                        for v in out.data[start..start + h * w].iter_mut() {
                            *v = gv;
                        }
                    }
                }
                counters.add_ops(out.numel() as u64);
                talloc(counters, &out);
                tfree(counters, &g);
                out
            }
            LayerDesc::Flatten => match in_shape {
                FlowShape::Image { c, h, w } => g.reshaped(&[bsz, c, h, w])?,
                _ => g,
            },
            LayerDesc::Lora { p, .. } => {
                let t = g.numel() / (bsz * p);
                let ds = g.reshaped(&[bsz, t, *p])?;
                let (w, down, up) = match &node.params {
                    NodeParams::Lora { w, down, up } => (w, down, up),
                    _ => unreachable!(),
                };
                let mid_ds = bt_matmul_t(&ds, up, counters)?;
                talloc(counters, &mid_ds);
                let next = if propagate {
                    let mut dx = bt_matmul_t(&ds, w, counters)?;
                    let low = bt_matmul_t(&mid_ds, down, counters)?;
                    for (x, &y) in dx.data.iter_mut().zip(low.data.iter()) {
                        *x += y;
                    }
                    counters.add_ops(dx.numel() as u64);
                    talloc(counters, &dx);
                    Some(to_physical(dx, in_shape, bsz)?)
                } else {
                    None
                };
                if let Some(old) = book.nodes[i].ds.take() {
                    tfree(counters, &old);
                }
                if let Some(old) = book.nodes[i].mid_ds.take() {
                    tfree(counters, &old);
                }
                book.nodes[i].ds = Some(ds);
                book.nodes[i].mid_ds = Some(mid_ds);
                match next {
                    Some(x) => x,
                    None => {
                        stop = true;
                        Tensor::zeros(&[0])
                    }
                }
            }
            LayerDesc::Adapter { dim, .. } => {
                let t = g.numel() / (bsz * dim);
                let ds = g.reshaped(&[bsz, t, *dim])?;
                let (down, up) = match &node.params {
                    NodeParams::Adapter { down, up } => (down, up),
                    _ => unreachable!(),
                };
                let mut mid_ds = bt_matmul_t(&ds, up, counters)?;
                let tau_p = book.nodes[i].mid_phi.as_ref().expect("adapter derivative booked");
                for (x, &d) in mid_ds.data.iter_mut().zip(tau_p.data.iter()) {
                    *x *= d;
                }
                counters.add_ops(2 * mid_ds.numel() as u64);
                talloc(counters, &mid_ds);
                let next = if propagate {
                    let mut dx = bt_matmul_t(&mid_ds, down, counters)?;
                    for (x, &y) in dx.data.iter_mut().zip(ds.data.iter()) {
                        *x += y; // residual path
                    }
                    counters.add_ops(dx.numel() as u64);
                    talloc(counters, &dx);
                    Some(to_physical(dx, in_shape, bsz)?)
                } else {
                    None
                };
                if let Some(old) = book.nodes[i].ds.take() {
                    tfree(counters, &old);
                }
                if let Some(old) = book.nodes[i].mid_ds.take() {
                    tfree(counters, &old);
                }
                book.nodes[i].ds = Some(ds);
                book.nodes[i].mid_ds = Some(mid_ds);
                match next {
                    Some(x) => x,
                    None => {
                        stop = true;
                        Tensor::zeros(&[0])
                    }
                }
            }
        };
        book.node_mul_adds[i] += counters.mul_adds - ops_before;
        if stop {
            return Ok(());
        }
        if i == 0 {
            tfree(counters, &g);
        }
    }
    Ok(())
}

/// Parameter gradient of one generalized-linear block: `a^T ds` summed over
/// batch and feature dims as one contraction. Counter delta `2*BT*d*p`.
pub fn param_grad(a: &Tensor, ds: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (b, t, d) = a.dims3()?;
    let (b2, t2, p) = ds.dims3()?;
    if b != b2 || t != t2 {
        return Err(Error::dim(format!(
            "activation {:?} and output gradient {:?} disagree",
            a.shape, ds.shape
        )));
    }
    let mut out = Tensor::zeros(&[d, p]);
    matmul_tn_into(&a.data, &ds.data, &mut out.data, b * t, d, p, counters);
    Ok(out)
}

/// Per-sample bias gradients: sum of ds over the feature dimension, B x p.
/// Counter delta `2*BT*p`; the ghost norm never applies to biases.
pub fn bias_per_sample_grads(ds: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (b, t, p) = ds.dims3()?;
    let mut out = Tensor::zeros(&[b, p]);
    for i in 0..b {
        for ti in 0..t {
            let row = &ds.data[(i * t + ti) * p..(i * t + ti + 1) * p];
            for (o, &v) in out.data[i * p..(i + 1) * p].iter_mut().zip(row.iter()) {
                *o += v;
            }
        }
    }
    counters.add_ops(2 * (b * t * p) as u64);
    Ok(out)
}

/// Role of one clip unit inside the global per-sample norm aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitRole {
    /// generalized-linear weight: ghost norm or instantiation applies
    Weight,
    /// embedding table: ghost norm via the indicator-match Gram
    Embedding,
    /// bias vector: per-sample gradients by summing ds over T
    Bias,
    /// normalization affine pair: always per-sample instantiation
    NormAffine,
}

/// One clipping unit: a parameter block plus the shape of its book-kept pair.
#[derive(Debug, Clone)]
pub struct ClipUnit {
    pub id: ParamId,
    pub role: UnitRole,
    pub t: usize,
    pub d: usize,
    pub p: usize,
}

impl Graph {
    /// Enumerate clip units in layer order: every trainable parameter block
    /// appears exactly once.
    pub fn clip_units(&self) -> Result<Vec<ClipUnit>> {
        let flow_shapes = self.spec.flow_shapes()?;
        let t_of = |shape: FlowShape| match shape {
            FlowShape::Flat(_) => 1,
            FlowShape::Seq { t, .. } | FlowShape::Tokens { t, .. } => t,
            FlowShape::Image { h, w, .. } => h * w,
        };
        let mut units = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let t = t_of(flow_shapes[i]);
            match (&node.desc, &node.params) {
                (LayerDesc::Linear { d, p, .. }, NodeParams::Dense { b, .. }) => {
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Weight }, role: UnitRole::Weight, t, d: *d, p: *p });
                    if b.is_some() {
                        units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Bias }, role: UnitRole::Bias, t, d: 1, p: *p });
                    }
                }
                (LayerDesc::Conv2d { c_in, c_out, kh, kw, .. }, NodeParams::Dense { b, .. }) => {
                    let d = c_in * kh * kw;
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Weight }, role: UnitRole::Weight, t, d, p: *c_out });
                    if b.is_some() {
                        units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Bias }, role: UnitRole::Bias, t, d: 1, p: *c_out });
                    }
                }
                (LayerDesc::Embedding { vocab, dim }, NodeParams::Embedding { .. }) => {
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Weight }, role: UnitRole::Embedding, t, d: *vocab, p: *dim });
                }
                (LayerDesc::LayerNorm { .. }, NodeParams::Norm { gamma, .. }) => {
                    let width = gamma.numel();
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Gamma }, role: UnitRole::NormAffine, t, d: width, p: 2 });
                }
                (LayerDesc::Lora { d, p, r }, NodeParams::Lora { .. }) => {
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Down }, role: UnitRole::Weight, t, d: *d, p: *r });
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Up }, role: UnitRole::Weight, t, d: *r, p: *p });
                }
                (LayerDesc::Adapter { dim, r }, NodeParams::Adapter { .. }) => {
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Down }, role: UnitRole::Weight, t, d: *dim, p: *r });
                    units.push(ClipUnit { id: ParamId { node: i, slot: ParamSlot::Up }, role: UnitRole::Weight, t, d: *r, p: *dim });
                }
                _ => {}
            }
        }
        Ok(units)
    }
}

impl GradBook {
    /// Book-kept (activation, output gradient) pair for a weight-like unit.
    pub fn unit_pair(&self, unit: &ClipUnit) -> Result<(&Tensor, &Tensor)> {
        let nb = &self.nodes[unit.id.node];
        let missing = || Error::State(format!("books for {} not present", unit.id));
        match unit.id.slot {
            ParamSlot::Weight => Ok((nb.a.as_ref().ok_or_else(missing)?, nb.ds.as_ref().ok_or_else(missing)?)),
            ParamSlot::Down => Ok((nb.a.as_ref().ok_or_else(missing)?, nb.mid_ds.as_ref().ok_or_else(missing)?)),
            ParamSlot::Up => Ok((nb.mid_a.as_ref().ok_or_else(missing)?, nb.ds.as_ref().ok_or_else(missing)?)),
            _ => Err(Error::State(format!("{} is not a generalized-linear unit", unit.id))),
        }
    }
}

/// Minimal set of trainable parameters whose descendants cover every
/// trainable layer's output: on a feed-forward chain this is a single
/// parameter of the earliest trainable layer, preferring the bias over the
/// weight because its wasted regular gradient is smaller.
pub fn select_origin_params(graph: &Graph) -> Result<Vec<ParamId>> {
    let first = graph
        .nodes
        .iter()
        .enumerate()
        .find(|(i, n)| !n.param_ids_at(*i).is_empty())
        .map(|(i, _)| i)
        .ok_or_else(|| Error::config("graph has no trainable parameters"))?;
    let node = &graph.nodes[first];
    let id = match &node.params {
        NodeParams::Dense { b, .. } => ParamId {
            node: first,
            slot: if b.is_some() { ParamSlot::Bias } else { ParamSlot::Weight },
        },
        NodeParams::Embedding { .. } => ParamId { node: first, slot: ParamSlot::Weight },
        // beta is the bias-like affine parameter
        NodeParams::Norm { .. } => ParamId { node: first, slot: ParamSlot::Beta },
        NodeParams::Lora { .. } | NodeParams::Adapter { .. } => {
            ParamId { node: first, slot: ParamSlot::Down }
        }
        NodeParams::None => unreachable!(),
    };
    Ok(vec![id])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::parse;
    use crate::layers::embedding_param_grad;

    fn mk(graph_text: &str, seed: u64) -> Graph {
        let spec = parse("test", graph_text).unwrap();
        Graph::build(spec, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn one_layer_linear_forward() {
        let mut g = mk("input flat 1\nlinear in=1 out=1 bias=false\n", 1);
        *g.param_mut(ParamId { node: 0, slot: ParamSlot::Weight }).unwrap() =
            Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let batch = Batch::Dense(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let targets = Tensor::zeros(&[1, 1, 1]);
        let mut c = OpCounters::new();
        let (losses, book) = forward(&g, &batch, &targets, &mut c).unwrap();
        assert_eq!(losses.data, vec![36.0]); // (2*3 - 0)^2
        assert_eq!(book.nodes[0].a.as_ref().unwrap().data, vec![3.0]);
    }

    #[test]
    fn forward_matches_reevaluation_oracle() {
        let g = mk(
            "input flat 5\nlinear in=5 out=4\ntanh\nlinear in=4 out=3\ntanh\nlinear in=3 out=2\n",
            7,
        );
        let mut rng = SeededRng::new(99);
        let batch = Batch::synth(&g.spec, 4, &mut rng);
        let x = match &batch {
            Batch::Dense(t) => t.clone(),
            _ => unreachable!(),
        };
        let targets = uniform(&[4, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (losses, _) = forward(&g, &batch, &targets, &mut c).unwrap();

        // straight-line re-evaluation with plain loops
        for i in 0..4 {
            let mut cur: Vec<f64> = x.data[i * 5..(i + 1) * 5].to_vec();
            for (ni, node) in g.nodes.iter().enumerate() {
                match &node.desc {
                    LayerDesc::Linear { d, p, .. } => {
                        let w = g.param(ParamId { node: ni, slot: ParamSlot::Weight }).unwrap();
                        let b = g.param(ParamId { node: ni, slot: ParamSlot::Bias }).ok();
                        let mut next = vec![0.0; *p];
                        for (j, nx) in next.iter_mut().enumerate() {
                            for k in 0..*d {
                                *nx += cur[k] * w.data[k * p + j];
                            }
                            if let Some(b) = b {
                                *nx += b.data[j];
                            }
                        }
                        cur = next;
                    }
                    LayerDesc::Activation(Act::Tanh) => {
                        for v in cur.iter_mut() {
                            *v = v.tanh();
                        }
                    }
                    _ => unreachable!(),
                }
            }
            let oracle: f64 = cur
                .iter()
                .zip(targets.sample(i).iter())
                .map(|(s, y)| (s - y) * (s - y))
                .sum();
            assert!((losses.data[i] - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn forward_rejects_bad_batch_shape() {
        let g = mk("input flat 4\nlinear in=4 out=2\n", 3);
        let batch = Batch::Dense(Tensor::zeros(&[2, 5]));
        let targets = Tensor::zeros(&[2, 1, 2]);
        let mut c = OpCounters::new();
        let err = forward(&g, &batch, &targets, &mut c).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn output_grads_weighted_by_one_hot_match_single_sample() {
        let g = mk("input flat 3\nlinear in=3 out=3\ntanh\nlinear in=3 out=2\n", 11);
        let mut rng = SeededRng::new(4);
        let batch = Batch::synth(&g.spec, 3, &mut rng);
        let targets = uniform(&[3, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();

        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let mut w = Tensor::zeros(&[3]);
        w.data[1] = 1.0;
        backward_output_grads(&g, &mut book, &targets, &w, &mut c).unwrap();
        let ds_full = book.nodes[2].ds.clone().unwrap();

        // single-sample run for sample 1
        let sb = batch.slice(1);
        let st = Tensor::from_vec(&[1, 1, 2], targets.sample(1).to_vec()).unwrap();
        let (_, mut sbook) = forward(&g, &sb, &st, &mut c).unwrap();
        let ones = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        backward_output_grads(&g, &mut sbook, &st, &ones, &mut c).unwrap();
        let ds_single = sbook.nodes[2].ds.clone().unwrap();

        assert_eq!(ds_full.sample(1), ds_single.sample(0));
        // other samples' gradients vanish under the one-hot weighting
        assert!(ds_full.sample(0).iter().all(|&v| v == 0.0));
        assert!(ds_full.sample(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_grads_match_finite_differences() {
        // ds of a layer equals the gradient w.r.t. its pre-activation; probe
        // it through the layer's bias (dL/db_j = sum_b ds[b, :, j])
        let g = mk("input flat 3\nlinear in=3 out=4\ntanh\nlinear in=4 out=3\ntanh\nlinear in=3 out=2\n", 21);
        let mut rng = SeededRng::new(6);
        let batch = Batch::synth(&g.spec, 2, &mut rng);
        let targets = uniform(&[2, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
        let ds = book.nodes[2].ds.clone().unwrap(); // middle linear, B x 1 x 3

        let id = ParamId { node: 2, slot: ParamSlot::Bias };
        let h = 1e-5;
        for j in 0..3 {
            let mut gp = g.clone();
            gp.param_mut(id).unwrap().data[j] += h;
            let (lp, _) = forward(&gp, &batch, &targets, &mut c).unwrap();
            let mut gm = g.clone();
            gm.param_mut(id).unwrap().data[j] -= h;
            let (lm, _) = forward(&gm, &batch, &targets, &mut c).unwrap();
            let fd = (lp.data.iter().sum::<f64>() - lm.data.iter().sum::<f64>()) / (2.0 * h);
            let an: f64 = (0..2).map(|b| ds.sample(b)[j]).sum();
            assert!((fd - an).abs() < 1e-6, "coord {j}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let g = mk("input flat 2\nlinear in=2 out=2\n", 2);
        let mut book = GradBook {
            nodes: vec![NodeBook::default()],
            output: Tensor::zeros(&[0]),
            batch_size: 1,
            weight_version: 0,
            node_mul_adds: vec![0],
        };
        let mut c = OpCounters::new();
        let ones = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert!(matches!(
            backward_output_grads(&g, &mut book, &Tensor::zeros(&[1, 1, 2]), &ones, &mut c),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn stale_book_after_weight_update_is_state_error() {
        let mut g = mk("input flat 2\nlinear in=2 out=2\n", 2);
        let mut rng = SeededRng::new(3);
        let batch = Batch::synth(&g.spec, 1, &mut rng);
        let targets = Tensor::zeros(&[1, 1, 2]);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        g.weight_version += 1;
        let ones = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert!(matches!(
            backward_output_grads(&g, &mut book, &targets, &ones, &mut c),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn param_grad_examples() {
        let mut c = OpCounters::new();
        let a = Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap();
        let ds = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(param_grad(&a, &ds, &mut c).unwrap().data, vec![15.0]);

        let a = Tensor::from_vec(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ds = Tensor::from_vec(&[2, 1, 1], vec![2.0, 7.0]).unwrap();
        assert_eq!(param_grad(&a, &ds, &mut c).unwrap().data, vec![2.0, 7.0]);

        // random case against the per-sample summation oracle
        let mut rng = SeededRng::new(15);
        let a = uniform(&[3, 4, 5], 1.0, &mut rng);
        let ds = uniform(&[3, 4, 2], 1.0, &mut rng);
        let before = c.mul_adds;
        let g = param_grad(&a, &ds, &mut c).unwrap();
        assert_eq!(c.mul_adds - before, 2 * 3 * 4 * 5 * 2);
        let mut oracle = vec![0.0; 5 * 2];
        for i in 0..3 {
            for t in 0..4 {
                for dd in 0..5 {
                    for pp in 0..2 {
                        oracle[dd * 2 + pp] += a.sample(i)[t * 5 + dd] * ds.sample(i)[t * 2 + pp];
                    }
                }
            }
        }
        for (x, y) in g.data.iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn weight_grads_match_finite_differences() {
        let g = mk("input flat 3\nlinear in=3 out=4\ntanh\nlinear in=4 out=2\n", 33);
        let mut rng = SeededRng::new(17);
        let batch = Batch::synth(&g.spec, 3, &mut rng);
        let targets = uniform(&[3, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let ones = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
        for node in [0usize, 2] {
            let a = book.nodes[node].a.as_ref().unwrap();
            let ds = book.nodes[node].ds.as_ref().unwrap();
            let grad = param_grad(a, ds, &mut c).unwrap();
            let id = ParamId { node, slot: ParamSlot::Weight };
            let h = 1e-5;
            let n = grad.numel();
            for j in [0, n / 2, n - 1] {
                let mut gp = g.clone();
                gp.param_mut(id).unwrap().data[j] += h;
                let (lp, _) = forward(&gp, &batch, &targets, &mut c).unwrap();
                let mut gm = g.clone();
                gm.param_mut(id).unwrap().data[j] -= h;
                let (lm, _) = forward(&gm, &batch, &targets, &mut c).unwrap();
                let fd = (lp.data.iter().sum::<f64>() - lm.data.iter().sum::<f64>()) / (2.0 * h);
                assert!(
                    (fd - grad.data[j]).abs() < 1e-6,
                    "node {node} coord {j}: fd {fd} vs {}",
                    grad.data[j]
                );
            }
        }
    }

    #[test]
    fn origin_param_selection() {
        let g = mk("input flat 3\nlinear in=3 out=3\ntanh\nlinear in=3 out=3\ntanh\nlinear in=3 out=2\n", 1);
        assert_eq!(
            select_origin_params(&g).unwrap(),
            vec![ParamId { node: 0, slot: ParamSlot::Bias }]
        );
        let g = mk("input flat 3\nlinear in=3 out=3 bias=false\ntanh\nlinear in=3 out=2 bias=false\n", 1);
        assert_eq!(
            select_origin_params(&g).unwrap(),
            vec![ParamId { node: 0, slot: ParamSlot::Weight }]
        );
        let g = mk("input seq 4 vocab=6\nembedding vocab=6 dim=3\nlinear in=3 out=3\nlinear in=3 out=2\n", 1);
        assert_eq!(
            select_origin_params(&g).unwrap(),
            vec![ParamId { node: 0, slot: ParamSlot::Weight }]
        );
    }

    #[test]
    fn origin_set_is_minimal_and_covering() {
        // coverage oracle by reachability: on a chain, a parameter at node i
        // covers outputs of all nodes >= i; minimality means the set is a
        // single parameter at the first trainable node.
        let g = mk("input flat 3\nlinear in=3 out=3\ntanh\nlinear in=3 out=2\n", 5);
        let origin = select_origin_params(&g).unwrap();
        assert_eq!(origin.len(), 1);
        let first = g
            .nodes
            .iter()
            .enumerate()
            .find(|(i, n)| !n.param_ids_at(*i).is_empty())
            .unwrap()
            .0;
        assert_eq!(origin[0].node, first);
    }

    #[test]
    fn embedding_graph_grads_match_finite_differences() {
        let g = mk("input seq 2 vocab=5\nembedding vocab=5 dim=3\nlinear in=3 out=2\n", 31);
        let mut rng = SeededRng::new(8);
        let batch = Batch::synth(&g.spec, 2, &mut rng);
        let targets = uniform(&[2, 2, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
        let id = ParamId { node: 0, slot: ParamSlot::Weight };
        let ids = match &batch {
            Batch::Tokens { ids, .. } => ids.clone(),
            _ => unreachable!(),
        };
        let ds = book.nodes[0].ds.as_ref().unwrap();
        let grad = embedding_param_grad(&ids, ds, 5, None, &mut c).unwrap();
        let h = 1e-5;
        for j in [0usize, 7, 14] {
            let mut gp = g.clone();
            gp.param_mut(id).unwrap().data[j] += h;
            let (lp, _) = forward(&gp, &batch, &targets, &mut c).unwrap();
            let mut gm = g.clone();
            gm.param_mut(id).unwrap().data[j] -= h;
            let (lm, _) = forward(&gm, &batch, &targets, &mut c).unwrap();
            let fd = (lp.data.iter().sum::<f64>() - lm.data.iter().sum::<f64>()) / (2.0 * h);
            assert!((fd - grad.data[j]).abs() < 1e-6, "{j}: {fd} vs {}", grad.data[j]);
        }
    }

    #[test]
    fn conv_graph_grads_match_finite_differences() {
        let g = mk(
            "input image 5 5 2\nconv2d in=2 out=3 k=3 stride=1 pad=1\nrelu\nconv2d in=3 out=2 k=3 stride=2 pad=1\nflatten\nlinear in=18 out=2\n",
            41,
        );
        let mut rng = SeededRng::new(12);
        let batch = Batch::synth(&g.spec, 2, &mut rng);
        let targets = uniform(&[2, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
        // summed weight gradients of both convs and the linear head against
        // central finite differences
        for node in [0usize, 2, 4] {
            let a = book.nodes[node].a.as_ref().unwrap();
            let ds = book.nodes[node].ds.as_ref().unwrap();
            let grad = param_grad(a, ds, &mut c).unwrap();
            let id = ParamId { node, slot: ParamSlot::Weight };
            let h = 1e-5;
            let n = grad.numel();
            for j in [0, n / 2, n - 1] {
                let mut gp = g.clone();
                gp.param_mut(id).unwrap().data[j] += h;
                let (lp, _) = forward(&gp, &batch, &targets, &mut c).unwrap();
                let mut gm = g.clone();
                gm.param_mut(id).unwrap().data[j] -= h;
                let (lm, _) = forward(&gm, &batch, &targets, &mut c).unwrap();
                let fd = (lp.data.iter().sum::<f64>() - lm.data.iter().sum::<f64>()) / (2.0 * h);
                assert!(
                    (fd - grad.data[j]).abs() < 1e-5,
                    "node {node} coord {j}: fd {fd} vs {}",
                    grad.data[j]
                );
            }
        }
    }

    #[test]
    fn lora_and_adapter_grads_match_finite_differences() {
        for text in [
            "input flat 4\nlora in=4 out=4 r=2\ntanh\nlora in=4 out=2 r=2\n",
            "input flat 4\nadapter dim=4 r=2\ntanh\nadapter dim=4 r=2\n",
        ] {
            let g = mk(text, 51);
            let mut rng = SeededRng::new(13);
            let batch = Batch::synth(&g.spec, 2, &mut rng);
            let out_width = match g.spec.flow_shapes().unwrap().last().unwrap() {
                FlowShape::Flat(d) => *d,
                _ => unreachable!(),
            };
            let targets = uniform(&[2, 1, out_width], 1.0, &mut rng);
            let mut c = OpCounters::new();
            let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
            let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
            backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
            let units = g.clip_units().unwrap();
            for node in [0usize, 2] {
                for slot in [ParamSlot::Down, ParamSlot::Up] {
                    let unit = units.iter().find(|u| u.id == ParamId { node, slot }).unwrap();
                    let (a, ds) = book.unit_pair(unit).unwrap();
                    let grad = param_grad(a, ds, &mut c).unwrap();
                    let id = ParamId { node, slot };
                    let h = 1e-5;
                    let n = grad.numel();
                    for j in [0, n - 1] {
                        let mut gp = g.clone();
                        gp.param_mut(id).unwrap().data[j] += h;
                        let (lp, _) = forward(&gp, &batch, &targets, &mut c).unwrap();
                        let mut gm = g.clone();
                        gm.param_mut(id).unwrap().data[j] -= h;
                        let (lm, _) = forward(&gm, &batch, &targets, &mut c).unwrap();
                        let fd = (lp.data.iter().sum::<f64>() - lm.data.iter().sum::<f64>())
                            / (2.0 * h);
                        assert!(
                            (fd - grad.data[j]).abs() < 1e-6,
                            "{text} node {node} {slot:?} coord {j}: fd {fd} vs {}",
                            grad.data[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn layernorm_affine_grads_match_finite_differences() {
        let g = mk("input flat 6\nlinear in=6 out=6\nlayernorm\ntanh\nlinear in=6 out=2\n", 61);
        let mut rng = SeededRng::new(14);
        let batch = Batch::synth(&g.spec, 2, &mut rng);
        let targets = uniform(&[2, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
        let ds = book.nodes[1].ds.as_ref().unwrap();
        let state = book.nodes[1].ln.as_ref().unwrap();
        let per_sample = crate::layers::norm_layer_per_sample_grads(ds, state, &mut c).unwrap();
        // first 6 coords per sample are scale grads, next 6 shift grads
        let h = 1e-5;
        for (slot, offset) in [(ParamSlot::Gamma, 0usize), (ParamSlot::Beta, 6)] {
            let id = ParamId { node: 1, slot };
            for j in [0usize, 5] {
                let mut gp = g.clone();
                gp.param_mut(id).unwrap().data[j] += h;
                let (lp, _) = forward(&gp, &batch, &targets, &mut c).unwrap();
                let mut gm = g.clone();
                gm.param_mut(id).unwrap().data[j] -= h;
                let (lm, _) = forward(&gm, &batch, &targets, &mut c).unwrap();
                let fd = (lp.data.iter().sum::<f64>() - lm.data.iter().sum::<f64>()) / (2.0 * h);
                let an: f64 = (0..2).map(|b| per_sample.sample(b)[offset + j]).sum();
                assert!((fd - an).abs() < 1e-6, "{slot:?} coord {j}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn memory_returns_to_baseline_after_free_all() {
        let g = mk("input flat 4\nlinear in=4 out=4\ntanh\nlinear in=4 out=2\n", 9);
        let mut rng = SeededRng::new(2);
        let batch = Batch::synth(&g.spec, 3, &mut rng);
        let targets = uniform(&[3, 1, 2], 1.0, &mut rng);
        let mut c = OpCounters::new();
        let (_, mut book) = forward(&g, &batch, &targets, &mut c).unwrap();
        let ones = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        backward_output_grads(&g, &mut book, &targets, &ones, &mut c).unwrap();
        assert!(c.current_live_bytes > 0);
        book.free_all(&mut c);
        assert_eq!(c.current_live_bytes, 0);
        assert!(c.peak_live_bytes > 0);
    }
}
