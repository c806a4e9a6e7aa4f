//! Convolutional student: stride-2 conv-norm-relu encoder stages ending at
//! 1/8 resolution, FPN-style top-down decoder fusing the 1/8 and 1/4 maps
//! with 1x1 laterals, 1x1 classifier at 1/4 upsampled to full resolution.

use super::{conv_bn_relu, ParamBuilder, Student, StudentConfig, StudentOutput};
use crate::error::Result;
use crate::tensor::Tensor;

/// Stage channel widths: base_width doubling per stage.
fn widths(cfg: &StudentConfig) -> Vec<usize> {
    (0..cfg.depth).map(|i| cfg.base_width << i).collect()
}

/// Stage strides. The deepest map must sit at 1/8 of the input, so the
/// first stage stride absorbs the missing factor when depth is 2.
fn strides(cfg: &StudentConfig) -> Vec<usize> {
    match cfg.depth {
        2 => vec![4, 2],
        _ => vec![2, 2, 2],
    }
}

fn decoder_width(cfg: &StudentConfig) -> usize {
    2 * cfg.base_width
}

pub(super) fn declare_params(cfg: &StudentConfig, b: &mut ParamBuilder) -> Result<()> {
    let widths = widths(cfg);
    let d = decoder_width(cfg);
    let mut prev = cfg.in_channels;
    for (i, &w) in widths.iter().enumerate() {
        let prefix = format!("enc.s{i}");
        b.weight(&format!("{prefix}.conv.w"), vec![w, prev, 3, 3], prev * 9)?;
        b.zeros(&format!("{prefix}.conv.b"), w)?;
        b.bn_layer(&prefix, w)?;
        prev = w;
    }
    let c_top = *widths.last().unwrap();
    let c_skip = widths[cfg.depth - 2];
    b.weight("dec.lat_top.w", vec![d, c_top, 1, 1], c_top)?;
    b.zeros("dec.lat_top.b", d)?;
    b.weight("dec.lat_skip.w", vec![d, c_skip, 1, 1], c_skip)?;
    b.zeros("dec.lat_skip.b", d)?;
    b.weight("dec.fuse.conv.w", vec![d, d, 3, 3], d * 9)?;
    b.zeros("dec.fuse.conv.b", d)?;
    b.bn_layer("dec.fuse", d)?;
    b.weight("head.w", vec![cfg.num_classes, d, 1, 1], d)?;
    b.zeros("head.b", cfg.num_classes)?;
    Ok(())
}

pub(super) fn forward(student: &Student, x: &Tensor, train: bool) -> Result<StudentOutput> {
    let cfg = &student.cfg;
    let strides = strides(cfg);
    let (h, w) = (x.shape()[2], x.shape()[3]);

    let mut stage_maps = Vec::with_capacity(cfg.depth);
    let mut cur = x.clone();
    for (i, &stride) in strides.iter().enumerate() {
        cur = conv_bn_relu(student, &cur, &format!("enc.s{i}"), stride, 1, train)?;
        stage_maps.push(cur.clone());
    }
    let feat_encoder = stage_maps.last().unwrap().clone(); // 1/8
    let skip = &stage_maps[cfg.depth - 2]; // 1/4

    let lat_top = feat_encoder
        .conv2d(student.params.get("dec.lat_top.w")?, 1, 0)?
        .add_channel_bias(student.params.get("dec.lat_top.b")?)?;
    let top_up = lat_top.bilinear_upsample(h / 4, w / 4)?;
    let lat_skip = skip
        .conv2d(student.params.get("dec.lat_skip.w")?, 1, 0)?
        .add_channel_bias(student.params.get("dec.lat_skip.b")?)?;
    let fused = top_up.add(&lat_skip)?;
    let feat_decoder = conv_bn_relu(student, &fused, "dec.fuse", 1, 1, train)?;

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
