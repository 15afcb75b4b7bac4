//! Architecture descriptions: a flat text format (one layer per line), and
//! derivation of each trainable layer's (T, d, p) shape triple.
//!
//! Format:
//! ```text
//! input image 224 224 3        # or: input flat 1000
//!                              # or: input seq 12 vocab=10
//!                              # or: input seq 196 dim=192
//! conv2d in=3 out=64 k=7 stride=2 pad=3
//! pool k=3 stride=2
//! linear in=512 out=10 bias=false
//! lora in=768 out=768 r=16
//! adapter dim=768 r=16
//! embedding vocab=50257 dim=768
//! layernorm
//! relu | tanh | gelu
//! gap | flatten
//! ```

use crate::error::{Error, Result};
use crate::tensor::conv_out_dim;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputDesc {
    Flat(usize),
    Image { c: usize, h: usize, w: usize },
    SeqTokens { t: usize, vocab: usize },
    Seq { t: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Linear { d: usize, p: usize, bias: bool },
    Conv2d { c_in: usize, c_out: usize, kh: usize, kw: usize, stride: usize, pad: usize, bias: bool },
    Embedding { vocab: usize, dim: usize },
    LayerNorm { affine: bool },
    Activation(Act),
    /// Average pooling over k x k windows.
    Pool { k: usize, stride: usize },
    /// Global average pooling: image C x H x W -> flat C.
    Gap,
    /// Image C x H x W -> flat C*H*W.
    Flatten,
    Lora { d: usize, p: usize, r: usize },
    Adapter { dim: usize, r: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input: InputDesc,
    pub layers: Vec<LayerDesc>,
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowShape {
    Flat(usize),
    Seq { t: usize, dim: usize },
    Tokens { t: usize, vocab: usize },
    Image { c: usize, h: usize, w: usize },
}

impl fmt::Display for FlowShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowShape::Flat(d) => write!(f, "flat {d}"),
            FlowShape::Seq { t, dim } => write!(f, "seq {t} x {dim}"),
            FlowShape::Tokens { t, vocab } => write!(f, "tokens {t} (vocab {vocab})"),
            FlowShape::Image { c, h, w } => write!(f, "image {c} x {h} x {w}"),
        }
    }
}

impl InputDesc {
    pub fn flow(&self) -> FlowShape {
        match *self {
            InputDesc::Flat(d) => FlowShape::Flat(d),
            InputDesc::Image { c, h, w } => FlowShape::Image { c, h, w },
            InputDesc::SeqTokens { t, vocab } => FlowShape::Tokens { t, vocab },
            InputDesc::Seq { t, dim } => FlowShape::Seq { t, dim },
        }
    }
}

/// One generalized-linear parameter block with its (T, d, p) triple, as used
/// by both the static analyzer and the clipping planner. Composite layers
/// (LoRA, adapter) contribute two units each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitShape {
    /// index of the owning layer in `ArchSpec::layers`
    pub layer: usize,
    pub label: String,
    pub t: usize,
    pub d: usize,
    pub p: usize,
    pub kind: UnitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// dense weight of a linear/conv layer or a composite sub-module
    Weight,
    /// embedding table; ghost norm uses the indicator-match Gram
    Embedding,
    /// normalization affine pair; always per-sample instantiation
    NormAffine,
}

fn advance(shape: FlowShape, layer: &LayerDesc, idx: usize) -> Result<FlowShape> {
    let fail = |msg: String| Err(Error::Specification(format!("layer {idx}: {msg}")));
    Ok(match (*layer, shape) {
        (LayerDesc::Linear { d, p, .. }, FlowShape::Flat(cur)) => {
            if cur != d {
                return fail(format!("linear expects input width {d}, flow is {cur}"));
            }
            FlowShape::Flat(p)
        }
        (LayerDesc::Linear { d, p, .. }, FlowShape::Seq { t, dim }) => {
            if dim != d {
                return fail(format!("linear expects input width {d}, flow is seq width {dim}"));
            }
            FlowShape::Seq { t, dim: p }
        }
        // convenience auto-flatten: a linear fed by an image consumes C*H*W
        (LayerDesc::Linear { d, p, .. }, FlowShape::Image { c, h, w }) => {
            if c * h * w != d {
                return fail(format!(
                    "linear expects input width {d}, image flattens to {}",
                    c * h * w
                ));
            }
            FlowShape::Flat(p)
        }
        (LayerDesc::Conv2d { c_in, c_out, kh, kw, stride, pad, .. }, FlowShape::Image { c, h, w }) => {
            if c != c_in {
                return fail(format!("conv2d expects {c_in} input channels, flow has {c}"));
            }
            let h_out = conv_out_dim(h, kh, stride, pad, 1)
                .map_err(|e| Error::Specification(format!("layer {idx}: {e}")))?;
            let w_out = conv_out_dim(w, kw, stride, pad, 1)
                .map_err(|e| Error::Specification(format!("layer {idx}: {e}")))?;
            FlowShape::Image { c: c_out, h: h_out, w: w_out }
        }
        (LayerDesc::Embedding { vocab, dim }, FlowShape::Tokens { t, vocab: v }) => {
            if v != vocab {
                return fail(format!("embedding vocab {vocab} does not match input vocab {v}"));
            }
            FlowShape::Seq { t, dim }
        }
        (LayerDesc::LayerNorm { .. }, FlowShape::Flat(d)) => FlowShape::Flat(d),
        (LayerDesc::LayerNorm { .. }, FlowShape::Seq { t, dim }) => FlowShape::Seq { t, dim },
        (LayerDesc::Activation(_), FlowShape::Flat(d)) => FlowShape::Flat(d),
        (LayerDesc::Activation(_), FlowShape::Seq { t, dim }) => FlowShape::Seq { t, dim },
        (LayerDesc::Activation(_), FlowShape::Image { c, h, w }) => FlowShape::Image { c, h, w },
        (LayerDesc::Pool { k, stride }, FlowShape::Image { c, h, w }) => {
            if k > h || k > w {
                return fail(format!("pool window {k} larger than image {h}x{w}"));
            }
            FlowShape::Image { c, h: (h - k) / stride + 1, w: (w - k) / stride + 1 }
        }
        (LayerDesc::Gap, FlowShape::Image { c, .. }) => FlowShape::Flat(c),
        (LayerDesc::Flatten, FlowShape::Image { c, h, w }) => FlowShape::Flat(c * h * w),
        (LayerDesc::Lora { d, p, .. }, FlowShape::Flat(cur)) => {
            if cur != d {
                return fail(format!("lora expects input width {d}, flow is {cur}"));
            }
            FlowShape::Flat(p)
        }
        (LayerDesc::Lora { d, p, .. }, FlowShape::Seq { t, dim }) => {
            if dim != d {
                return fail(format!("lora expects input width {d}, flow is seq width {dim}"));
            }
            FlowShape::Seq { t, dim: p }
        }
        (LayerDesc::Adapter { dim, .. }, FlowShape::Flat(cur)) => {
            if cur != dim {
                return fail(format!("adapter expects width {dim}, flow is {cur}"));
            }
            FlowShape::Flat(dim)
        }
        (LayerDesc::Adapter { dim, .. }, FlowShape::Seq { t, dim: cur }) => {
            if cur != dim {
                return fail(format!("adapter expects width {dim}, flow is seq width {cur}"));
            }
            FlowShape::Seq { t, dim }
        }
        (l, s) => {
            return fail(format!("{l:?} cannot consume {s}"));
        }
    })
}

impl ArchSpec {
    /// Walk the layer list, checking shape compatibility, and return the flow
    /// shape after every layer.
    pub fn flow_shapes(&self) -> Result<Vec<FlowShape>> {
        let mut cur = self.input.flow();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = advance(cur, l, i)?;
            out.push(cur);
        }
        Ok(out)
    }

    fn t_of(shape: FlowShape) -> usize {
        match shape {
            FlowShape::Flat(_) => 1,
            FlowShape::Seq { t, .. } | FlowShape::Tokens { t, .. } => t,
            FlowShape::Image { h, w, .. } => h * w,
        }
    }

    /// Generalized-linear (and norm-affine) parameter units with (T, d, p).
    pub fn units(&self) -> Result<Vec<UnitShape>> {
        let mut cur = self.input.flow();
        let mut units = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let next = advance(cur, l, i)?;
            match *l {
                LayerDesc::Linear { d, p, .. } => units.push(UnitShape {
                    layer: i,
                    label: format!("linear{i}"),
                    t: Self::t_of(next),
                    d,
                    p,
                    kind: UnitKind::Weight,
                }),
                LayerDesc::Conv2d { c_in, c_out, kh, kw, .. } => units.push(UnitShape {
                    layer: i,
                    label: format!("conv{i}"),
                    t: Self::t_of(next),
                    d: c_in * kh * kw,
                    p: c_out,
                    kind: UnitKind::Weight,
                }),
                LayerDesc::Embedding { vocab, dim } => units.push(UnitShape {
                    layer: i,
                    label: format!("embedding{i}"),
                    t: Self::t_of(next),
                    d: vocab,
                    p: dim,
                    kind: UnitKind::Embedding,
                }),
                LayerDesc::LayerNorm { affine: true } => {
                    let width = match cur {
                        FlowShape::Flat(d) => d,
                        FlowShape::Seq { dim, .. } => dim,
                        _ => unreachable!(),
                    };
                    units.push(UnitShape {
                        layer: i,
                        label: format!("layernorm{i}"),
                        t: Self::t_of(next),
                        d: width,
                        p: 2,
                        kind: UnitKind::NormAffine,
                    });
                }
                LayerDesc::Lora { d, p, r } => {
                    let t = Self::t_of(next);
                    units.push(UnitShape {
                        layer: i,
                        label: format!("lora{i}.down"),
                        t,
                        d,
                        p: r,
                        kind: UnitKind::Weight,
                    });
                    units.push(UnitShape {
                        layer: i,
                        label: format!("lora{i}.up"),
                        t,
                        d: r,
                        p,
                        kind: UnitKind::Weight,
                    });
                }
                LayerDesc::Adapter { dim, r } => {
                    let t = Self::t_of(next);
                    units.push(UnitShape {
                        layer: i,
                        label: format!("adapter{i}.down"),
                        t,
                        d: dim,
                        p: r,
                        kind: UnitKind::Weight,
                    });
                    units.push(UnitShape {
                        layer: i,
                        label: format!("adapter{i}.up"),
                        t,
                        d: r,
                        p: dim,
                        kind: UnitKind::Weight,
                    });
                }
                _ => {}
            }
            cur = next;
        }
        Ok(units)
    }
}

fn parse_kv(tok: &str, line_no: usize) -> Result<(&str, &str)> {
    tok.split_once('=')
        .ok_or_else(|| Error::config(format!("line {line_no}: expected key=value, got '{tok}'")))
}

fn get<'a>(kvs: &[(&'a str, &'a str)], key: &str, line_no: usize) -> Result<usize> {
    for (k, v) in kvs {
        if *k == key {
            return v
                .parse()
                .map_err(|_| Error::config(format!("line {line_no}: bad value for {key}: '{v}'")));
        }
    }
    Err(Error::config(format!("line {line_no}: missing {key}=")))
}

fn get_opt(kvs: &[(&str, &str)], key: &str, default: usize) -> usize {
    kvs.iter()
        .find(|(k, _)| *k == key)
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(default)
}

fn get_bool(kvs: &[(&str, &str)], key: &str, default: bool) -> bool {
    kvs.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v == "true" || *v == "1")
        .unwrap_or(default)
}

/// Parse the flat text format. Blank lines and `#` comments are ignored.
pub fn parse(name: &str, text: &str) -> Result<ArchSpec> {
    let mut input: Option<InputDesc> = None;
    let mut layers = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let head = toks.next().unwrap();
        let rest: Vec<&str> = toks.collect();
        if head == "input" {
            if input.is_some() {
                return Err(Error::config(format!("line {line_no}: duplicate input line")));
            }
            let kind = *rest.first().ok_or_else(|| {
                Error::config(format!("line {line_no}: input requires a kind"))
            })?;
            input = Some(match kind {
                "flat" => {
                    let d: usize = rest
                        .get(1)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::config(format!("line {line_no}: input flat <width>")))?;
                    InputDesc::Flat(d)
                }
                "image" => {
                    let nums: Vec<usize> = rest[1..]
                        .iter()
                        .filter_map(|s| s.parse().ok())
                        .collect();
                    if nums.len() != 3 {
                        return Err(Error::config(format!(
                            "line {line_no}: input image <H> <W> <C>"
                        )));
                    }
                    InputDesc::Image { h: nums[0], w: nums[1], c: nums[2] }
                }
                "seq" => {
                    let t: usize = rest
                        .get(1)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::config(format!("line {line_no}: input seq <T> ...")))?;
                    let kvs: Vec<(&str, &str)> = rest[2..]
                        .iter()
                        .map(|t| parse_kv(t, line_no))
                        .collect::<Result<_>>()?;
                    if kvs.iter().any(|(k, _)| *k == "vocab") {
                        InputDesc::SeqTokens { t, vocab: get(&kvs, "vocab", line_no)? }
                    } else {
                        InputDesc::Seq { t, dim: get(&kvs, "dim", line_no)? }
                    }
                }
                other => {
                    return Err(Error::config(format!(
                        "line {line_no}: unknown input kind '{other}'"
                    )))
                }
            });
            continue;
        }
        let kvs: Vec<(&str, &str)> = rest
            .iter()
            .map(|t| parse_kv(t, line_no))
            .collect::<Result<_>>()?;
        let layer = match head {
            "linear" => LayerDesc::Linear {
                d: get(&kvs, "in", line_no)?,
                p: get(&kvs, "out", line_no)?,
                bias: get_bool(&kvs, "bias", true),
            },
            "conv2d" => {
                let k = get(&kvs, "k", line_no)?;
                LayerDesc::Conv2d {
                    c_in: get(&kvs, "in", line_no)?,
                    c_out: get(&kvs, "out", line_no)?,
                    kh: k,
                    kw: k,
                    stride: get_opt(&kvs, "stride", 1),
                    pad: get_opt(&kvs, "pad", 0),
                    bias: get_bool(&kvs, "bias", true),
                }
            }
            "embedding" => LayerDesc::Embedding {
                vocab: get(&kvs, "vocab", line_no)?,
                dim: get(&kvs, "dim", line_no)?,
            },
            "layernorm" => LayerDesc::LayerNorm { affine: get_bool(&kvs, "affine", true) },
            "relu" => LayerDesc::Activation(Act::Relu),
            "tanh" => LayerDesc::Activation(Act::Tanh),
            "gelu" => LayerDesc::Activation(Act::Gelu),
            "pool" => {
                let k = get(&kvs, "k", line_no)?;
                LayerDesc::Pool { k, stride: get_opt(&kvs, "stride", k) }
            }
            "gap" => LayerDesc::Gap,
            "flatten" => LayerDesc::Flatten,
            "lora" => LayerDesc::Lora {
                d: get(&kvs, "in", line_no)?,
                p: get(&kvs, "out", line_no)?,
                r: get(&kvs, "r", line_no)?,
            },
            "adapter" => LayerDesc::Adapter {
                dim: get(&kvs, "dim", line_no)?,
                r: get(&kvs, "r", line_no)?,
            },
            other => {
                return Err(Error::config(format!(
                    "line {line_no}: unknown layer kind '{other}'"
                )))
            }
        };
        layers.push(layer);
    }
    let input = input.ok_or_else(|| Error::config("missing 'input' line".to_string()))?;
    if layers.is_empty() {
        return Err(Error::config("architecture has no layers".to_string()));
    }
    let spec = ArchSpec { name: name.to_string(), input, layers };
    spec.flow_shapes()?; // validate chaining eagerly
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_image_arch_and_derive_conv_shape() {
        let spec = parse(
            "t",
            "input image 224 224 3\nconv2d in=3 out=64 k=7 stride=2 pad=3 bias=false\n",
        )
        .unwrap();
        let units = spec.units().unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].t, 112 * 112);
        assert_eq!(units[0].d, 147);
        assert_eq!(units[0].p, 64);
    }

    #[test]
    fn parse_rejects_mismatched_chain() {
        let err = parse("t", "input flat 10\nlinear in=11 out=4\n").unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn lora_and_adapter_units() {
        let spec = parse("t", "input flat 6\nlora in=6 out=4 r=2\n").unwrap();
        let u = spec.units().unwrap();
        assert_eq!((u[0].t, u[0].d, u[0].p), (1, 6, 2));
        assert_eq!((u[1].t, u[1].d, u[1].p), (1, 2, 4));

        let spec = parse("t", "input flat 8\nadapter dim=8 r=2\n").unwrap();
        let u = spec.units().unwrap();
        assert_eq!((u[0].d, u[0].p), (8, 2));
        assert_eq!((u[1].d, u[1].p), (2, 8));
    }

    #[test]
    fn seq_tokens_input_and_embedding() {
        let spec = parse(
            "t",
            "input seq 12 vocab=10\nembedding vocab=10 dim=4\nlinear in=4 out=8\n",
        )
        .unwrap();
        let u = spec.units().unwrap();
        assert_eq!(u[0].kind, UnitKind::Embedding);
        assert_eq!((u[0].t, u[0].d, u[0].p), (12, 10, 4));
        assert_eq!((u[1].t, u[1].d, u[1].p), (12, 4, 8));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let spec = parse("t", "# header\ninput flat 4\n\nlinear in=4 out=4 # tail\n").unwrap();
        assert_eq!(spec.layers.len(), 1);
    }
}
