//! Built-in architecture catalog. The ResNet entries encode exactly the
//! layers the complexity tables itemize: the stem conv, every per-block conv
//! (1x1/3x3/1x1 for bottlenecks), and the final linear classifier. Shortcut
//! (downsample) 1x1 convolutions are deliberately excluded so the layer lists
//! match the published per-block itemization; residual adds and batch norms
//! are likewise omitted because they carry no generalized-linear clip unit.
//! The networks here are shape stand-ins for cost analysis, not trainable
//! replicas.

use crate::archspec::{parse, ArchSpec};
use crate::error::{Error, Result};
use std::fmt::Write as _;

const NAMES: &[&str] = &[
    "mlp:LxW",
    "cnn-small",
    "embed-mlp",
    "lora-mlp",
    "adapter-mlp",
    "resnet18",
    "resnet34",
    "resnet50",
    "vgg11",
    "vit-tiny-like",
];

/// Catalog entry names (`mlp:LxW` is a family, e.g. `mlp:10x1000`).
pub fn names() -> &'static [&'static str] {
    NAMES
}

/// Build a catalog architecture. `input` overrides the image side length for
/// the image networks (resnet18/34/50 and vgg11); the other entries have a
/// fixed input and reject an override.
pub fn build(name: &str, input: Option<usize>) -> Result<ArchSpec> {
    if let Some(rest) = name.strip_prefix("mlp:") {
        reject_input(name, input)?;
        let (l, w) = rest
            .split_once('x')
            .and_then(|(l, w)| Some((l.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
            .ok_or_else(|| {
                Error::config(format!("malformed mlp name '{name}'; expected mlp:LxW"))
            })?;
        if l == 0 || w == 0 {
            return Err(Error::config(format!("mlp depth and width must be positive: '{name}'")));
        }
        let mut text = format!("input flat {w}\n");
        for i in 0..l {
            if i > 0 {
                text.push_str("tanh\n");
            }
            let _ = writeln!(text, "linear in={w} out={w} bias=false");
        }
        return parse(name, &text);
    }
    match name {
        "cnn-small" => {
            reject_input(name, input)?;
            parse(
                name,
                "input image 8 8 3\n\
                 conv2d in=3 out=4 k=3 stride=1 pad=1\n\
                 relu\n\
                 conv2d in=4 out=8 k=3 stride=2 pad=1\n\
                 relu\n\
                 flatten\n\
                 linear in=128 out=10\n",
            )
        }
        "embed-mlp" => {
            reject_input(name, input)?;
            parse(
                name,
                "input seq 12 vocab=10\n\
                 embedding vocab=10 dim=4\n\
                 linear in=4 out=8\n\
                 tanh\n\
                 linear in=8 out=4\n",
            )
        }
        "lora-mlp" => {
            reject_input(name, input)?;
            parse(
                name,
                "input flat 8\n\
                 lora in=8 out=8 r=2\n\
                 tanh\n\
                 linear in=8 out=4\n",
            )
        }
        "adapter-mlp" => {
            reject_input(name, input)?;
            parse(
                name,
                "input flat 8\n\
                 linear in=8 out=8\n\
                 adapter dim=8 r=2\n\
                 tanh\n\
                 linear in=8 out=4\n",
            )
        }
        "resnet18" => parse(name, &resnet_basic(&[2, 2, 2, 2], input.unwrap_or(224))?),
        "resnet34" => parse(name, &resnet_basic(&[3, 4, 6, 3], input.unwrap_or(224))?),
        "resnet50" => parse(name, &resnet_bottleneck(&[3, 4, 6, 3], input.unwrap_or(224))?),
        "vgg11" => parse(name, &vgg11(input.unwrap_or(224))?),
        "vit-tiny-like" => {
            reject_input(name, input)?;
            let mut text = String::from("input seq 196 dim=192\n");
            for _ in 0..2 {
                text.push_str(
                    "layernorm affine=true\n\
                     linear in=192 out=576\n\
                     gelu\n\
                     linear in=576 out=192\n",
                );
            }
            text.push_str("layernorm affine=true\nlinear in=192 out=10\n");
            parse(name, &text)
        }
        _ => Err(Error::config(format!(
            "unknown architecture '{name}'; available: {}",
            NAMES.join(", ")
        ))),
    }
}

fn reject_input(name: &str, input: Option<usize>) -> Result<()> {
    match input {
        Some(_) => Err(Error::config(format!("architecture '{name}' has a fixed input size"))),
        None => Ok(()),
    }
}

fn check_side(side: usize) -> Result<()> {
    if side < 32 || side % 32 != 0 {
        return Err(Error::config(format!(
            "image side must be a positive multiple of 32, got {side}"
        )));
    }
    Ok(())
}

/// Shared stem: 7x7 stride-2 conv to 64 channels, then a stride-2 pool.
fn stem(text: &mut String, side: usize) {
    let _ = writeln!(text, "input image {side} {side} 3");
    text.push_str("conv2d in=3 out=64 k=7 stride=2 pad=3 bias=false\nrelu\npool k=2 stride=2\n");
}

fn resnet_basic(blocks: &[usize; 4], side: usize) -> Result<String> {
    check_side(side)?;
    let mut text = String::new();
    stem(&mut text, side);
    let mut c_in = 64;
    for (stage, (&n, c_out)) in blocks.iter().zip([64usize, 128, 256, 512]).enumerate() {
        for b in 0..n {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let _ = writeln!(
                text,
                "conv2d in={c_in} out={c_out} k=3 stride={stride} pad=1 bias=false"
            );
            text.push_str("relu\n");
            let _ = writeln!(text, "conv2d in={c_out} out={c_out} k=3 stride=1 pad=1 bias=false");
            text.push_str("relu\n");
            c_in = c_out;
        }
    }
    text.push_str("gap\nlinear in=512 out=1000\n");
    Ok(text)
}

fn resnet_bottleneck(blocks: &[usize; 4], side: usize) -> Result<String> {
    check_side(side)?;
    let mut text = String::new();
    stem(&mut text, side);
    let mut c_in = 64;
    for (stage, (&n, c_mid)) in blocks.iter().zip([64usize, 128, 256, 512]).enumerate() {
        let c_out = 4 * c_mid;
        for b in 0..n {
            // the stride-2 reduction sits on the 3x3 conv of each stage's
            // first block (stages after the first)
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let _ = writeln!(text, "conv2d in={c_in} out={c_mid} k=1 stride=1 pad=0 bias=false");
            text.push_str("relu\n");
            let _ = writeln!(
                text,
                "conv2d in={c_mid} out={c_mid} k=3 stride={stride} pad=1 bias=false"
            );
            text.push_str("relu\n");
            let _ = writeln!(text, "conv2d in={c_mid} out={c_out} k=1 stride=1 pad=0 bias=false");
            text.push_str("relu\n");
            c_in = c_out;
        }
    }
    text.push_str("gap\nlinear in=2048 out=1000\n");
    Ok(text)
}

fn vgg11(side: usize) -> Result<String> {
    check_side(side)?;
    let mut text = String::new();
    let _ = writeln!(text, "input image {side} {side} 3");
    // channel plan with pool positions marked by 0
    let plan: &[usize] = &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0];
    let mut c_in = 3;
    for &c in plan {
        if c == 0 {
            text.push_str("pool k=2 stride=2\n");
        } else {
            let _ = writeln!(text, "conv2d in={c_in} out={c} k=3 stride=1 pad=1 bias=false");
            text.push_str("relu\n");
            c_in = c;
        }
    }
    let spatial = side / 32;
    let flat = 512 * spatial * spatial;
    text.push_str("flatten\n");
    let _ = writeln!(text, "linear in={flat} out=4096");
    text.push_str("relu\n");
    text.push_str("linear in=4096 out=4096\nrelu\nlinear in=4096 out=1000\n");
    Ok(text)
}
