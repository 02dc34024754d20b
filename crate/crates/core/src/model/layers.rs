//! Functional building blocks of the network. Each takes already-recorded
//! parameter variables so the same code serves training, inference and
//! gradient checks.

use std::ops::Range;

use crate::autodiff::{BatchStats, Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub pool: bool,
}

/// Plain convnet: for each block, 3x3 same-padding conv, bias, ReLU and an
/// optional 2x2 max pool. `frames` is `[F, 1, H, W]`.
pub fn backbone(tape: &mut Tape, frames: Var, blocks: &[ConvBlockVars]) -> Result<Var> {
    let mut x = frames;
    for b in blocks {
        let k = tape.shape(b.weight)[2];
        x = tape.conv2d(x, b.weight, 1, k / 2)?;
        x = tape.add_channel_bias(x, b.bias)?;
        x = tape.relu(x);
        if b.pool {
            x = tape.max_pool2d(x, 2)?;
        }
    }
    Ok(x)
}

/// Temporal pooling of per-frame maps `[F, C, H, W]` into one map per bag:
/// output row `n` reduces the frames `groups[n]`.
pub fn temporal_pool(tape: &mut Tape, maps: Var, groups: &[Range<usize>], mode: Reduce) -> Result<Var> {
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::arg("temporal pooling over an empty bag"));
    }
    tape.group_reduce(maps, groups, mode)
}

/// Backbone followed by temporal pooling over one bag per sample.
pub fn encode_bag(
    tape: &mut Tape,
    frames: Var,
    groups: &[Range<usize>],
    blocks: &[ConvBlockVars],
    mode: Reduce,
) -> Result<Var> {
    let maps = backbone(tape, frames, blocks)?;
    temporal_pool(tape, maps, groups, mode)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Cross-attention between two feature maps `[N, C, H, W]`. Every spatial
/// location is a token of dimension C; queries come from `q_map`, keys and
/// values from `kv_map`. The result is added back onto `q_map`.
pub fn cross_attention(tape: &mut Tape, q_map: Var, kv_map: Var, w: &AttentionVars, heads: usize) -> Result<Var> {
    let shape = tape.shape(q_map).to_vec();
    if shape.len() != 4 || tape.shape(kv_map) != shape.as_slice() {
        return Err(Error::dim(format!(
            "cross_attention: query {:?} and key/value {:?} maps must match",
            shape,
            tape.shape(kv_map)
        )));
    }
    let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
    }
    let dh = c / heads;

    let tokens = |tape: &mut Tape, map: Var| -> Result<Var> {
        let flat = tape.reshape(map, &[n, c, l])?;
        let t = tape.permute(flat, &[0, 2, 1])?;
        tape.reshape(t, &[n * l, c])
    };
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[n, l, heads, dh])?;
        tape.permute(x, &[0, 2, 1, 3])
    };
    let tq = tokens(tape, q_map)?;
    let tkv = tokens(tape, kv_map)?;
    let q = tape.matmul(tq, w.wq)?;
    let k = tape.matmul(tkv, w.wk)?;
    let v = tape.matmul(tkv, w.wv)?;
    let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores, 3)?;
    let mixed = tape.matmul(attn, v)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[n * l, c])?;
    let out = tape.matmul(mixed, w.wo)?;
    let out = tape.add(out, tq)?;

    let out = tape.reshape(out, &[n, l, c])?;
    let out = tape.permute(out, &[0, 2, 1])?;
    tape.reshape(out, &shape)
}

/// Block `i` queries with the previous output and attends to bag `i + 1`;
/// the first query is bag 0.
pub fn ibta_cascade(tape: &mut Tape, bags: &[Var], blocks: &[AttentionVars], heads: usize) -> Result<Var> {
    let (&first, rest) = bags.split_first().ok_or_else(|| Error::arg("cascade over zero bags"))?;
    if blocks.len() != rest.len() {
        return Err(Error::Config(format!(
            "cascade over {} bags needs {} attention blocks, got {}",
            bags.len(),
            rest.len(),
            blocks.len()
        )));
    }
    let mut h = first;
    for (&bag, w) in rest.iter().zip(blocks) {
        h = cross_attention(tape, h, bag, w, heads)?;
    }
    Ok(h)
}

/// Element-wise mean of the bag maps (the cascade-free ablation).
pub fn mean_of_bags(tape: &mut Tape, bags: &[Var]) -> Result<Var> {
    let (&first, rest) = bags.split_first().ok_or_else(|| Error::arg("mean over zero bags"))?;
    let mut acc = first;
    for &b in rest {
        acc = tape.add(acc, b)?;
    }
    Ok(tape.scale(acc, 1.0 / bags.len() as f64))
}

/// `[N, C, H, W] -> [N, strips, 2C]`: per strip, channel-wise max then mean.
pub fn horizontal_pool(tape: &mut Tape, map: Var, strips: usize) -> Result<Var> {
    tape.strip_pool(map, strips)
}

/// Projects each strip with its own matrix (`weight[strips, 2C, d_s]`) and
/// flattens to `[N, strips * d_s]`.
pub fn strip_projection(tape: &mut Tape, strips: Var, weight: Var) -> Result<Var> {
    let s = tape.shape(strips).to_vec();
    let ws = tape.shape(weight).to_vec();
    if s.len() != 3 || ws.len() != 3 || ws[0] != s[1] || ws[1] != s[2] {
        return Err(Error::dim(format!("strip projection: strips {s:?} vs weight {ws:?}")));
    }
    let by_strip = tape.permute(strips, &[1, 0, 2])?;
    let proj = tape.matmul(by_strip, weight)?;
    let proj = tape.permute(proj, &[1, 0, 2])?;
    tape.reshape(proj, &[s[0], s[1] * ws[2]])
}

/// Appends the same text vector to every row of `visual[N, D]`.
pub fn append_text(tape: &mut Tape, visual: Var, text: &[f64]) -> Result<Var> {
    let s = tape.shape(visual).to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("text fusion expects [N, D] features, got {s:?}")));
    }
    if text.is_empty() {
        return Ok(visual);
    }
    let rows: Vec<f64> = (0..s[0]).flat_map(|_| text.iter().copied()).collect();
    let t = tape.constant(Tensor::new(vec![s[0], text.len()], rows)?);
    tape.concat(&[visual, t], 1)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub gamma: Var,
    pub beta: Var,
    pub weight: Var,
}

/// Batch statistics source for a BNNeck.
pub enum Norm<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// BNNeck: batchnorm then a bias-free linear classifier. Returns the
/// normalized feature, the logits and, in batch mode, the batch statistics.
pub fn bnneck(
    tape: &mut Tape,
    feature: Var,
    head: &HeadVars,
    norm: Norm<'_>,
    eps: f64,
) -> Result<(Var, Var, Option<BatchStats>)> {
    let (normed, stats) = match norm {
        Norm::Batch => {
            let (y, st) = tape.batchnorm_train(feature, head.gamma, head.beta, eps)?;
            (y, Some(st))
        }
        Norm::Running { mean, var } => (tape.batchnorm_eval(feature, head.gamma, head.beta, mean, var, eps)?, None),
    };
    let logits = tape.matmul(normed, head.weight)?;
    Ok((normed, logits, stats))
}
