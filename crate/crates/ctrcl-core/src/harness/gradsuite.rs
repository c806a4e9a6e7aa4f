//! The named finite-difference suite behind the `gradcheck` command and the
//! gradient acceptance gate: every differentiable primitive plus each
//! composite loss pipeline, checked against central differences on random
//! inputs at several seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfcl::{cfcl_loss, cpm};
use crate::error::Result;
use crate::finite_diff_check;
use crate::labels::LabelBatch;
use crate::objective::{seg_loss, total_loss, LossWeights};
use crate::rlcl::{arm, rlcl_loss, LambdaConfig};
use crate::students::{Student, StudentConfig};
use crate::tensor::{Tensor, PROB_EPS};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values pushed away from zero so kinked ops (relu, clamp) never
/// see an input within the finite-difference step of their corner.
fn uniform_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize, h: usize, w: usize) -> LabelBatch {
    LabelBatch::new(
        n,
        h,
        w,
        (0..n * h * w).map(|_| rng.random_range(0..classes) as u8).collect(),
    )
    .unwrap()
}

type CheckFn = fn(u64) -> Result<f64>;

/// (operation name, per-seed check) pairs; each returns the max relative
/// gradient error at that seed.
pub fn suite() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("add_broadcast", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 3, 4], uniform(&mut rng, 24, -1.0, 1.0))?;
            let b = Tensor::new(vec![4], uniform(&mut rng, 4, -1.0, 1.0))?;
            finite_diff_check(|t| t.add(&b)?.mul(t)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("sub", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![12], uniform(&mut rng, 12, -1.0, 1.0))?;
            let c = Tensor::new(vec![12], uniform(&mut rng, 12, -1.0, 1.0))?;
            finite_diff_check(|t| t.sub(&c)?.mul(t)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("mul", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![10], uniform(&mut rng, 10, -1.0, 1.0))?;
            let c = Tensor::new(vec![10], uniform(&mut rng, 10, -1.0, 1.0))?;
            finite_diff_check(|t| t.mul(&c)?.mul(t)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("div", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![10], uniform(&mut rng, 10, 0.5, 2.0))?;
            let c = Tensor::new(vec![10], uniform(&mut rng, 10, 0.5, 2.0))?;
            finite_diff_check(
                |t| c.div(t)?.add(&t.div(&c)?)?.reduce_sum(None),
                &x,
                GRAD_STEP,
            )
        }),
        ("exp", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![10], uniform(&mut rng, 10, -1.0, 1.0))?;
            finite_diff_check(|t| t.exp().reduce_sum(None), &x, GRAD_STEP)
        }),
        ("log_clamped", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![10], uniform(&mut rng, 10, 0.1, 2.0))?;
            finite_diff_check(|t| t.clamp_min(PROB_EPS).log()?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("relu", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![16], uniform_off_kink(&mut rng, 16))?;
            finite_diff_check(|t| t.relu().mul(t)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("gelu", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![16], uniform(&mut rng, 16, -2.0, 2.0))?;
            finite_diff_check(|t| t.gelu().reduce_sum(None), &x, GRAD_STEP)
        }),
        ("sqrt_clamped", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![10], uniform(&mut rng, 10, 0.2, 3.0))?;
            finite_diff_check(|t| t.clamp_min(1e-12).sqrt()?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("clamp_min", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![16], uniform_off_kink(&mut rng, 16))?;
            finite_diff_check(|t| t.clamp_min(0.0).mul(t)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("matmul", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0))?;
            let b = Tensor::new(vec![4, 5], uniform(&mut rng, 20, -1.0, 1.0))?;
            let c = Tensor::new(vec![3, 3], uniform(&mut rng, 9, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let prod = t.matmul(&b)?; // (3, 5)
                    let back = c.matmul(&prod)?; // gradient wrt left operand too
                    back.mul(&back)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("transpose_reshape", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let y = t.transpose2d()?.reshape(vec![2, 6])?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("softmax", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 5], uniform(&mut rng, 10, -2.0, 2.0))?;
            let w = Tensor::new(vec![2, 5], uniform(&mut rng, 10, -1.0, 1.0))?;
            finite_diff_check(|t| t.softmax(1)?.mul(&w)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("reduce_sum_axis", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 3, 4], uniform(&mut rng, 24, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let y = t.reduce_sum(Some(1))?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("reduce_mean", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let m = t.reduce_mean(Some(0))?;
                    let full = t.reduce_mean(None)?;
                    m.mul(&m)?.reduce_sum(None)?.add(&full.mul(&full)?)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("conv2d_input", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![1, 2, 6, 6], uniform(&mut rng, 72, -1.0, 1.0))?;
            let w = Tensor::new(vec![3, 2, 3, 3], uniform(&mut rng, 54, -0.5, 0.5))?;
            finite_diff_check(
                |t| {
                    let y = t.conv2d(&w, 2, 1)?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("conv2d_kernel", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 2, 5, 5], uniform(&mut rng, 100, -1.0, 1.0))?;
            let w = Tensor::new(vec![3, 2, 3, 3], uniform(&mut rng, 54, -0.5, 0.5))?;
            finite_diff_check(
                |t| {
                    let y = x.conv2d(t, 1, 1)?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &w,
                GRAD_STEP,
            )
        }),
        ("add_channel_bias", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 3, 2, 2], uniform(&mut rng, 24, -1.0, 1.0))?;
            let b = Tensor::new(vec![3], uniform(&mut rng, 3, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let y = t.add_channel_bias(&b)?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("add_row_bias", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![4, 3], uniform(&mut rng, 12, -1.0, 1.0))?;
            let b = Tensor::new(vec![3], uniform(&mut rng, 3, -1.0, 1.0))?;
            // Gradient wrt the bias (column sums) through a nonlinear head.
            finite_diff_check(
                |t| {
                    let y = x.add_row_bias(t)?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &b,
                GRAD_STEP,
            )
        }),
        ("batch_norm_train", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 3, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?;
            let gamma = Tensor::new(vec![3], uniform(&mut rng, 3, 0.5, 1.5))?;
            let beta = Tensor::new(vec![3], uniform(&mut rng, 3, -0.5, 0.5))?;
            let w = Tensor::new(vec![2, 3, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let (y, _, _) = t.batch_norm_train(&gamma, &beta, 1e-5)?;
                    y.mul(&w)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("batch_norm_affine", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 3, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?;
            let gamma = Tensor::new(vec![3], uniform(&mut rng, 3, 0.5, 1.5))?;
            let w = Tensor::new(vec![2, 3, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let (y, _, _) = x.batch_norm_train(&gamma, t, 1e-5)?;
                    y.mul(&w)?.reduce_sum(None)
                },
                &Tensor::new(vec![3], uniform(&mut rng, 3, -0.5, 0.5))?,
                GRAD_STEP,
            )
        }),
        ("layer_norm", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![4, 6], uniform(&mut rng, 24, -1.0, 1.0))?;
            let gamma = Tensor::new(vec![6], uniform(&mut rng, 6, 0.5, 1.5))?;
            let beta = Tensor::new(vec![6], uniform(&mut rng, 6, -0.5, 0.5))?;
            let w = Tensor::new(vec![4, 6], uniform(&mut rng, 24, -1.0, 1.0))?;
            finite_diff_check(
                |t| t.layer_norm(&gamma, &beta, 1e-5)?.mul(&w)?.reduce_sum(None),
                &x,
                GRAD_STEP,
            )
        }),
        ("bilinear_upsample", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![1, 2, 3, 3], uniform(&mut rng, 18, -1.0, 1.0))?;
            let w = Tensor::new(vec![1, 2, 7, 7], uniform(&mut rng, 98, -1.0, 1.0))?;
            finite_diff_check(
                |t| t.bilinear_upsample(7, 7)?.mul(&w)?.reduce_sum(None),
                &x,
                GRAD_STEP,
            )
        }),
        ("extract_patches", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![1, 3, 4, 4], uniform(&mut rng, 48, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let p = t.extract_patches(2)?;
                    p.mul(&p)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("token_merge_and_map", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2 * 16, 3], uniform(&mut rng, 96, -1.0, 1.0))?;
            let w = Tensor::new(vec![2, 12, 2, 2], uniform(&mut rng, 96, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let merged = t.merge_tokens_2x2(2, 4, 4)?;
                    let map = merged.tokens_to_map(2, 2, 2)?;
                    map.mul(&w)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("slice_concat", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![4, 6], uniform(&mut rng, 24, -1.0, 1.0))?;
            finite_diff_check(
                |t| {
                    let top = t.slice_rows(0, 2)?;
                    let bottom = t.slice_rows(2, 2)?;
                    let left = t.slice_cols(0, 3)?;
                    let right = t.slice_cols(3, 3)?;
                    let rows = Tensor::concat_rows(&[bottom, top])?;
                    let cols = Tensor::concat_cols(&[right, left])?;
                    let y = rows.mul(&cols)?;
                    y.mul(&y)?.reduce_sum(None)
                },
                &x,
                GRAD_STEP,
            )
        }),
        ("detach_mix", |seed| {
            // loss = sum(x * c) with c = detach(x0) held fixed; the gradient
            // equals c, checked against finite differences of the detached
            // functional form.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![8], uniform(&mut rng, 8, -1.0, 1.0))?;
            let c = x.detach();
            finite_diff_check(move |t| t.mul(&c)?.reduce_sum(None), &x, GRAD_STEP)
        }),
        ("seg_loss_pipeline", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::new(vec![1, 3, 4, 4], uniform(&mut rng, 48, -2.0, 2.0))?;
            let y = labels(&mut rng, 1, 3, 4, 4);
            finite_diff_check(move |t| seg_loss(&t.softmax(1)?, &y), &z, GRAD_STEP)
        }),
        ("rlcl_loss_pipeline", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::new(vec![1, 4, 3, 3], uniform(&mut rng, 36, -2.0, 2.0))?;
            let y = labels(&mut rng, 1, 4, 3, 3);
            let peer_z = Tensor::new(vec![1, 4, 3, 3], uniform(&mut rng, 36, -2.0, 2.0))?;
            let peer = arm(&peer_z.softmax(1)?, &y, LambdaConfig::Full)?;
            finite_diff_check(
                move |t| rlcl_loss(&t.softmax(1)?, &peer.probs),
                &z,
                GRAD_STEP,
            )
        }),
        ("cfcl_loss_pipeline", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::new(vec![1, 4, 4, 4], uniform(&mut rng, 64, -1.0, 1.0))?;
            let y = labels(&mut rng, 1, 3, 4, 4);
            let f_peer = Tensor::new(vec![1, 4, 4, 4], uniform(&mut rng, 64, -1.0, 1.0))?;
            let r_peer = cpm(&f_peer, &y)?;
            finite_diff_check(
                move |t| cfcl_loss(&cpm(t, &y)?, &r_peer, false),
                &f,
                GRAD_STEP,
            )
        }),
        ("total_loss_pipeline", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::new(vec![1, 3, 4, 4], uniform(&mut rng, 48, -2.0, 2.0))?;
            let y = labels(&mut rng, 1, 3, 4, 4);
            let peer_z = Tensor::new(vec![1, 3, 4, 4], uniform(&mut rng, 36 + 12, -2.0, 2.0))?;
            let rect = arm(&peer_z.softmax(1)?, &y, LambdaConfig::Full)?;
            let f_peer = Tensor::new(vec![1, 3, 4, 4], uniform(&mut rng, 48, -1.0, 1.0))?;
            let r_peer_e = cpm(&f_peer, &y)?;
            let r_peer_d = cpm(&f_peer, &y)?;
            let w = LossWeights::default();
            finite_diff_check(
                move |t| {
                    let p = t.softmax(1)?;
                    let seg = seg_loss(&p, &y)?;
                    let rl = rlcl_loss(&p, &rect.probs)?;
                    // reuse the pre-softmax map as a stand-in feature tensor
                    let ce = cfcl_loss(&cpm(t, &y)?, &r_peer_e, false)?;
                    let cd = cfcl_loss(&cpm(t, &y)?, &r_peer_d, false)?;
                    total_loss(&seg, Some(&rl), Some(&ce), Some(&cd), &w)
                },
                &z,
                GRAD_STEP,
            )
        }),
        ("cnn_end_to_end", |seed| {
            // Cross-entropy loss of the full CNN forward, gradient wrt the
            // first conv kernel: the probe kernel IS the checker's leaf, so
            // the loss graph reaches it directly. Fresh per-call buffers keep
            // train-mode statistics pure.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = StudentConfig::cnn_default(3, seed);
            cfg.base_width = 4;
            cfg.depth = 2;
            let student = Student::init(cfg)?;
            let x = Tensor::new(vec![1, 3, 8, 8], uniform(&mut rng, 192, 0.0, 1.0))?;
            let y = labels(&mut rng, 1, 3, 8, 8);
            let w0 = student.params.get("enc.s0.conv.w")?.detach();
            finite_diff_check(
                move |t| {
                    let mut probe = Student::init(cfg)?;
                    for (name, tensor) in student.params.iter() {
                        probe.params.replace_by_name(name, tensor.detach())?;
                    }
                    probe.params.replace_by_name("enc.s0.conv.w", t.clone())?;
                    let out = probe.forward(&x, true)?;
                    seg_loss(&out.probs, &y)
                },
                &w0,
                GRAD_STEP,
            )
        }),
        ("transformer_end_to_end", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = StudentConfig::transformer_default(3, seed);
            cfg.base_width = 8;
            let student = Student::init(cfg)?;
            let x = Tensor::new(vec![1, 3, 8, 8], uniform(&mut rng, 192, 0.0, 1.0))?;
            let y = labels(&mut rng, 1, 3, 8, 8);
            let w0 = student.params.get("pe.w")?.detach();
            finite_diff_check(
                move |t| {
                    let mut probe = Student::init(cfg)?;
                    for (name, tensor) in student.params.iter() {
                        probe.params.replace_by_name(name, tensor.detach())?;
                    }
                    probe.params.replace_by_name("pe.w", t.clone())?;
                    let out = probe.forward(&x, true)?;
                    seg_loss(&out.probs, &y)
                },
                &w0,
                GRAD_STEP,
            )
        }),
    ]
}

/// Runs every check over `seeds` seeds; returns (name, max error) pairs.
pub fn run_suite(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, check) in suite() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(check(seed)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}

/// A deliberately wrong backward rule (claims dy/dx = 3 for y = 2x); the
/// checker must flag it. Test fixture for fault injection.
pub fn corrupted_rule_error() -> Result<f64> {
    let x = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.4])?;
    finite_diff_check(
        |t| {
            let data: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
            let th = t.clone();
            let bad = Tensor::from_op(t.shape().to_vec(), data, &[t], move |g| {
                th.accumulate_grad_with(|acc| {
                    for i in 0..g.len() {
                        acc[i] += 3.0 * g[i];
                    }
                });
            });
            bad.reduce_sum(None)
        },
        &x,
        GRAD_STEP,
    )
}
