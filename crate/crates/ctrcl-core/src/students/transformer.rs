//! Self-attention student: 4x4 patch embedding to tokens at 1/4 resolution,
//! pre-norm multi-head attention blocks, strided 2x2 token merging to 1/8,
//! a second attention stage at doubled width, then a lightweight all-linear
//! decoder that projects both stages to a common width at 1/4 and fuses them.

use super::{conv_bn_relu, ParamBuilder, Student, StudentConfig, StudentOutput, NORM_EPS};
use crate::error::Result;
use crate::tensor::Tensor;

const PATCH: usize = 4;
/// Hidden expansion of the token MLP.
const MLP_RATIO: usize = 2;

fn blocks_per_stage(cfg: &StudentConfig) -> usize {
    cfg.depth - 1
}

fn stage_widths(cfg: &StudentConfig) -> [usize; 2] {
    [cfg.base_width, 2 * cfg.base_width]
}

fn decoder_width(cfg: &StudentConfig) -> usize {
    cfg.base_width
}

fn declare_block(b: &mut ParamBuilder, prefix: &str, dim: usize) -> Result<()> {
    b.ln_layer(&format!("{prefix}.ln1"), dim)?;
    for proj in ["wq", "wk", "wv", "wo"] {
        b.weight(&format!("{prefix}.attn.{proj}"), vec![dim, dim], dim)?;
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        b.zeros(&format!("{prefix}.attn.{bias}"), dim)?;
    }
    b.ln_layer(&format!("{prefix}.ln2"), dim)?;
    b.weight(&format!("{prefix}.mlp.w1"), vec![dim, MLP_RATIO * dim], dim)?;
    b.zeros(&format!("{prefix}.mlp.b1"), MLP_RATIO * dim)?;
    b.weight(&format!("{prefix}.mlp.w2"), vec![MLP_RATIO * dim, dim], MLP_RATIO * dim)?;
    b.zeros(&format!("{prefix}.mlp.b2"), dim)?;
    Ok(())
}

pub(super) fn declare_params(cfg: &StudentConfig, b: &mut ParamBuilder) -> Result<()> {
    let [d1, d2] = stage_widths(cfg);
    let dw = decoder_width(cfg);
    let patch_dim = cfg.in_channels * PATCH * PATCH;
    b.weight("pe.w", vec![patch_dim, d1], patch_dim)?;
    b.zeros("pe.b", d1)?;
    for blk in 0..blocks_per_stage(cfg) {
        declare_block(b, &format!("st0.blk{blk}"), d1)?;
    }
    b.weight("merge.w", vec![4 * d1, d2], 4 * d1)?;
    b.zeros("merge.b", d2)?;
    for blk in 0..blocks_per_stage(cfg) {
        declare_block(b, &format!("st1.blk{blk}"), d2)?;
    }
    b.weight("dec.proj0.w", vec![d1, dw], d1)?;
    b.zeros("dec.proj0.b", dw)?;
    b.weight("dec.proj1.w", vec![d2, dw], d2)?;
    b.zeros("dec.proj1.b", dw)?;
    b.weight("dec.fuse.conv.w", vec![dw, 2 * dw, 1, 1], 2 * dw)?;
    b.zeros("dec.fuse.conv.b", dw)?;
    b.bn_layer("dec.fuse", dw)?;
    b.weight("head.w", vec![cfg.num_classes, dw, 1, 1], dw)?;
    b.zeros("head.b", cfg.num_classes)?;
    Ok(())
}

fn layer_norm(student: &Student, x: &Tensor, prefix: &str) -> Result<Tensor> {
    let gamma = student.params.get(&format!("{prefix}.gamma"))?;
    let beta = student.params.get(&format!("{prefix}.beta"))?;
    x.layer_norm(gamma, beta, NORM_EPS)
}

/// Fixed sinusoidal positional encoding on the token grid: the first half
/// of the width encodes the row, the second half the column, each with the
/// standard sin/cos frequency ladder. Parameter-free and size-adaptive.
fn positional_encoding(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let t = gh * gw;
    let mut pe = vec![0.0; t * dim];
    let half = dim / 2;
    let fill = |pe: &mut [f64], token: usize, offset: usize, len: usize, pos: f64| {
        let pairs = len / 2;
        for i in 0..pairs {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / len as f64);
            pe[token * dim + offset + 2 * i] = (pos * freq).sin();
            pe[token * dim + offset + 2 * i + 1] = (pos * freq).cos();
        }
    };
    for r in 0..gh {
        for c in 0..gw {
            let token = r * gw + c;
            fill(&mut pe, token, 0, half, r as f64);
            fill(&mut pe, token, half, dim - half, c as f64);
        }
    }
    pe
}

/// tokens + tiled positional table (constant, so the gradient passes through).
fn add_positions(tokens: &Tensor, n: usize, gh: usize, gw: usize) -> Result<Tensor> {
    let d = tokens.shape()[1];
    let table = positional_encoding(gh, gw, d);
    let mut tiled = Vec::with_capacity(n * table.len());
    for _ in 0..n {
        tiled.extend_from_slice(&table);
    }
    tokens.add(&Tensor::new(vec![n * gh * gw, d], tiled)?)
}

fn linear(student: &Student, x: &Tensor, w: &str, b: &str) -> Result<Tensor> {
    x.matmul(student.params.get(w)?)?
        .add_row_bias(student.params.get(b)?)
}

/// Pre-norm attention + MLP block on sample-major tokens. Attention mixes
/// tokens only within a sample, so scores are built per sample and head.
fn attention_block(
    student: &Student,
    tokens: &Tensor,
    prefix: &str,
    n: usize,
    t: usize,
    heads: usize,
) -> Result<Tensor> {
    let dim = tokens.shape()[1];
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let normed = layer_norm(student, tokens, &format!("{prefix}.ln1"))?;
    let q = linear(student, &normed, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let k = linear(student, &normed, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let v = linear(student, &normed, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;

    let mut sample_outputs = Vec::with_capacity(n);
    for s in 0..n {
        let qs = q.slice_rows(s * t, t)?;
        let ks = k.slice_rows(s * t, t)?;
        let vs = v.slice_rows(s * t, t)?;
        let mut head_outputs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = qs.slice_cols(hd * head_dim, head_dim)?;
            let kh = ks.slice_cols(hd * head_dim, head_dim)?;
            let vh = vs.slice_cols(hd * head_dim, head_dim)?;
            let scores = qh.matmul(&kh.transpose2d()?)?.affine(scale, 0.0);
            let attn = scores.softmax(1)?;
            head_outputs.push(attn.matmul(&vh)?);
        }
        sample_outputs.push(Tensor::concat_cols(&head_outputs)?);
    }
    let merged = Tensor::concat_rows(&sample_outputs)?;
    let projected = linear(
        student,
        &merged,
        &format!("{prefix}.attn.wo"),
        &format!("{prefix}.attn.bo"),
    )?;
    let x = tokens.add(&projected)?;

    let normed2 = layer_norm(student, &x, &format!("{prefix}.ln2"))?;
    let hidden = linear(student, &normed2, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?
        .gelu();
    let mlp_out = linear(student, &hidden, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    x.add(&mlp_out)
}

pub(super) fn forward(student: &Student, x: &Tensor, train: bool) -> Result<StudentOutput> {
    let cfg = &student.cfg;
    let heads = cfg.attention_heads;
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (gh1, gw1) = (h / PATCH, w / PATCH);
    let (gh2, gw2) = (gh1 / 2, gw1 / 2);
    let (t1, t2) = (gh1 * gw1, gh2 * gw2);

    // Stage 1 at 1/4 resolution.
    let patches = x.extract_patches(PATCH)?;
    let mut tokens = add_positions(&linear(student, &patches, "pe.w", "pe.b")?, n, gh1, gw1)?;
    for blk in 0..blocks_per_stage(cfg) {
        tokens = attention_block(student, &tokens, &format!("st0.blk{blk}"), n, t1, heads)?;
    }
    let stage1 = tokens.clone();

    // Strided token merging to 1/8, then stage 2 at doubled width.
    let merged = stage1.merge_tokens_2x2(n, gh1, gw1)?;
    let mut tokens =
        add_positions(&linear(student, &merged, "merge.w", "merge.b")?, n, gh2, gw2)?;
    for blk in 0..blocks_per_stage(cfg) {
        tokens = attention_block(student, &tokens, &format!("st1.blk{blk}"), n, t2, heads)?;
    }
    let stage2 = tokens;

    let feat_encoder = stage2.tokens_to_map(n, gh2, gw2)?;

    // Decoder: project both stages to a common width, lift stage 2 to 1/4,
    // concatenate, fuse with a 1x1 conv.
    let p1 = linear(student, &stage1, "dec.proj0.w", "dec.proj0.b")?
        .tokens_to_map(n, gh1, gw1)?;
    let p2 = linear(student, &stage2, "dec.proj1.w", "dec.proj1.b")?
        .tokens_to_map(n, gh2, gw2)?
        .bilinear_upsample(gh1, gw1)?;
    let concat = p1.concat_channels(&p2)?;
    let feat_decoder = conv_bn_relu(student, &concat, "dec.fuse", 1, 0, train)?;

    let logits = feat_decoder
        .conv2d(student.params.get("head.w")?, 1, 0)?
        .add_channel_bias(student.params.get("head.b")?)?
        .bilinear_upsample(h, w)?;
    let probs = logits.softmax(1)?;
    Ok(StudentOutput {
        probs,
        feat_encoder,
        feat_decoder,
    })
}
