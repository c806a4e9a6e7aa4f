//! Independent scalar reference implementations.
//!
//! Everything here is written as plain per-pixel / per-element loops straight
//! from the defining formulas, deliberately sharing no code with the
//! vectorized implementations it cross-checks. The test suite and the
//! `oracle-test` CLI command compare the two paths on random instances.

use crate::labels::LabelBatch;
use crate::tensor::PROB_EPS;

/// Naive three-loop matrix product, row-major.
pub fn matmul_ref(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Direct cross-correlation with zero padding, one output element at a time.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oi * stride + ki) as isize - pad as isize;
                                let iw = (oj * stride + kj) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + ih as usize) * w + iw as usize]
                                    * weight[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    out
}

/// Per-pixel nearest-neighbor label downsampling.
pub fn nearest_downsample_ref(map: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let src_i = ((i as f64 + 0.5) * (h as f64 / oh as f64) - 0.5).floor();
        let si = (src_i.max(0.0) as usize).min(h - 1);
        for j in 0..ow {
            let src_j = ((j as f64 + 0.5) * (w as f64 / ow as f64) - 0.5).floor();
            let sj = (src_j.max(0.0) as usize).min(w - 1);
            out.push(map[si * w + sj]);
        }
    }
    out
}

/// Scalar align-corners-false bilinear interpolation of one plane.
pub fn bilinear_ref(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let si = ((i as f64 + 0.5) * (h as f64 / oh as f64) - 0.5).max(0.0);
        let i0 = (si.floor() as usize).min(h - 1);
        let i1 = (i0 + 1).min(h - 1);
        let ti = si - i0 as f64;
        for j in 0..ow {
            let sj = ((j as f64 + 0.5) * (w as f64 / ow as f64) - 0.5).max(0.0);
            let j0 = (sj.floor() as usize).min(w - 1);
            let j1 = (j0 + 1).min(w - 1);
            let tj = sj - j0 as f64;
            out[i * ow + j] = (1.0 - ti) * (1.0 - tj) * src[i0 * w + j0]
                + (1.0 - ti) * tj * src[i0 * w + j1]
                + ti * (1.0 - tj) * src[i1 * w + j0]
                + ti * tj * src[i1 * w + j1];
        }
    }
    out
}

/// One rectified pixel, evaluated straight from the defining scalar formulas.
/// Returns (rectified distribution, lambda, lambda_align, lambda_sim,
/// lambda_cert); lambda terms are zero when the pixel is already correct.
pub fn arm_pixel_ref(p: &[f64], truth: usize) -> (Vec<f64>, f64, f64, f64, f64) {
    let mut argmax = 0;
    for (l, v) in p.iter().enumerate() {
        if *v > p[argmax] {
            argmax = l;
        }
    }
    if argmax == truth {
        return (p.to_vec(), 0.0, 0.0, 0.0, 0.0);
    }
    let p_mis = p[argmax];
    let p_tru = p[truth];
    let l_a = 1.0 / (1.0 + p_mis - p_tru);
    let ce = -(p_tru.max(PROB_EPS)).ln();
    let l_s = (-ce).exp();
    let mut entropy = 0.0;
    for &v in p {
        entropy -= v * v.max(PROB_EPS).ln();
    }
    let l_c = (-entropy).exp();
    let lambda = l_a * l_s * l_c;
    let rectified: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(l, &v)| lambda * v + (1.0 - lambda) * if l == truth { 1.0 } else { 0.0 })
        .collect();
    (rectified, lambda, l_a, l_s, l_c)
}

/// Full-map rectification reference: probs are (N, L, H, W) row-major.
pub fn arm_ref(
    probs: &[f64],
    n: usize,
    classes: usize,
    h: usize,
    w: usize,
    y: &LabelBatch,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; probs.len()];
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let pix = i * w + j;
                let mut p = Vec::with_capacity(classes);
                for l in 0..classes {
                    p.push(probs[(s * classes + l) * hw + pix]);
                }
                let (r, _, _, _, _) = arm_pixel_ref(&p, y.get(s, i, j) as usize);
                for l in 0..classes {
                    out[(s * classes + l) * hw + pix] = r[l];
                }
            }
        }
    }
    out
}

/// Per-pixel class-aware representation from the defining formulas:
/// masked average pooling + batch mean prototypes, cosine distances,
/// softmax over the per-sample present classes (ascending class id).
/// Features are (N, C, H, W); `y` must already be at the feature resolution.
/// Returns, per sample, the present class ids and the (K x H*W) map.
#[allow(clippy::too_many_arguments)]
pub fn cpm_ref(
    feats: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    y: &LabelBatch,
    eps: f64,
    alpha: f64,
) -> Vec<(Vec<u8>, Vec<f64>)> {
    assert_eq!(y.n, n);
    assert_eq!(y.h, h);
    assert_eq!(y.w, w);
    let hw = h * w;
    let feat = |s: usize, ch: usize, pix: usize| feats[(s * c + ch) * hw + pix];

    // Present classes per sample and over the batch.
    let mut present: Vec<Vec<u8>> = Vec::with_capacity(n);
    for s in 0..n {
        let mut cls: Vec<u8> = y.sample(s).to_vec();
        cls.sort_unstable();
        cls.dedup();
        present.push(cls);
    }
    let mut all: Vec<u8> = present.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();

    // Prototypes: per-sample masked means averaged over samples containing
    // the class.
    let mut protos: Vec<(u8, Vec<f64>)> = Vec::new();
    for &cls in &all {
        let mut acc = vec![0.0; c];
        let mut n_l = 0usize;
        for s in 0..n {
            let count = y.sample(s).iter().filter(|&&v| v == cls).count();
            if count == 0 {
                continue;
            }
            n_l += 1;
            for (ch, slot) in acc.iter_mut().enumerate() {
                let mut sum = 0.0;
                for pix in 0..hw {
                    if y.sample(s)[pix] == cls {
                        sum += feat(s, ch, pix);
                    }
                }
                *slot += sum / (count as f64 + eps);
            }
        }
        for v in acc.iter_mut() {
            *v /= n_l as f64;
        }
        protos.push((cls, acc));
    }

    let proto = |cls: u8| -> &Vec<f64> { &protos.iter().find(|(c, _)| *c == cls).unwrap().1 };

    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let k = present[s].len();
        let mut rep = vec![0.0; k * hw];
        for pix in 0..hw {
            let f: Vec<f64> = (0..c).map(|ch| feat(s, ch, pix)).collect();
            let dists: Vec<f64> = present[s]
                .iter()
                .map(|&cls| cosine_distance_ref(&f, proto(cls)))
                .collect();
            // softmax over -alpha * d
            let mx = dists
                .iter()
                .map(|d| -alpha * d)
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = dists.iter().map(|d| (-alpha * d - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (slot, e) in exps.iter().enumerate() {
                rep[slot * hw + pix] = e / sum;
            }
        }
        out.push((present[s].clone(), rep));
    }
    out
}

/// 1 - cosine similarity with a zero-vector guard on the norm product.
pub fn cosine_distance_ref(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-8)
}

// ---------------------------------------------------------------------------
// Metric references (masks as bool slices over an h x w grid).
// ---------------------------------------------------------------------------

pub fn dsc_ref(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|v| **v).count();
    let nb = b.iter().filter(|v| **v).count();
    if na == 0 && nb == 0 {
        return 1.0;
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    2.0 * inter as f64 / (na + nb) as f64
}

pub fn jac_ref(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

pub fn mae_ref(a: &[bool], b: &[bool]) -> f64 {
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    diff as f64 / a.len() as f64
}

/// Boundary pixels: mask pixels with any off-mask 4-neighbor or on the edge.
pub fn boundary_ref(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let edge = i == 0 || j == 0 || i == h - 1 || j == w - 1;
            let off_neighbor = (i > 0 && !mask[(i - 1) * w + j])
                || (i + 1 < h && !mask[(i + 1) * w + j])
                || (j > 0 && !mask[i * w + j - 1])
                || (j + 1 < w && !mask[i * w + j + 1]);
            if edge || off_neighbor {
                out.push((i, j));
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance over boundary pixels, full O(n^2) scan.
/// Either side empty yields the image diagonal length sqrt(h^2 + w^2).
pub fn hsd_ref(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let ba = boundary_ref(a, h, w);
    let bb = boundary_ref(b, h, w);
    if ba.is_empty() || bb.is_empty() {
        return ((h * h + w * w) as f64).sqrt();
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut worst = 0.0f64;
        for &(i, j) in from {
            let mut best = f64::INFINITY;
            for &(x, y) in to {
                let di = i as f64 - x as f64;
                let dj = j as f64 - y as f64;
                best = best.min((di * di + dj * dj).sqrt());
            }
            worst = worst.max(best);
        }
        worst
    };
    directed(&ba, &bb).max(directed(&bb, &ba))
}
