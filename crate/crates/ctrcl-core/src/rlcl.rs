//! Rectified logit-wise collaborative learning: ground-truth-guided
//! rectification of soft labels plus the logit-space KL transfer loss.
//!
//! Rectification runs off the tape entirely; the rectified peer label is a
//! constant target, so the transfer loss only updates the learning student.

use crate::error::{Error, Result};
use crate::labels::LabelBatch;
use crate::tensor::{Tensor, PROB_EPS};

/// Binary error mask: 1 exactly where the pseudo label (argmax over classes,
/// lowest index on ties) disagrees with the ground truth.
#[derive(Debug, Clone)]
pub struct ErrorMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl ErrorMask {
    pub fn get(&self, s: usize, i: usize, j: usize) -> bool {
        self.data[(s * self.h + i) * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Which factors form the rectification weight. `One` disables rectification
/// (the rectified label equals the prediction), which is exactly plain
/// mutual learning; the other variants gate the decay factors for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaConfig {
    One,
    Align,
    AlignSim,
    AlignCert,
    #[default]
    Full,
}

impl LambdaConfig {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(Self::One),
            "a" => Ok(Self::Align),
            "as" => Ok(Self::AlignSim),
            "ac" => Ok(Self::AlignCert),
            "asc" | "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown lambda config `{other}` (expected one|a|as|ac|asc)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::One => "one",
            Self::Align => "a",
            Self::AlignSim => "as",
            Self::AlignCert => "ac",
            Self::Full => "asc",
        }
    }
}

/// Rectified soft label with per-pixel diagnostics. `probs` is a constant
/// tensor (off-tape); the lambda maps are zero outside the error mask.
#[derive(Debug, Clone)]
pub struct RectifiedLabel {
    pub probs: Tensor,
    pub mask: ErrorMask,
    pub lambda: Vec<f64>,
    pub lambda_align: Vec<f64>,
    pub lambda_sim: Vec<f64>,
    pub lambda_cert: Vec<f64>,
}

fn check_probs_labels(p: &Tensor, y: &LabelBatch) -> Result<(usize, usize, usize, usize)> {
    let s = p.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected probabilities of shape (N, L, H, W), got {:?}",
            s
        )));
    }
    let (n, classes, h, w) = (s[0], s[1], s[2], s[3]);
    if y.n != n || y.h != h || y.w != w {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{}x{} do not match probabilities {:?}",
            y.n, y.h, y.w, s
        )));
    }
    if let Some(&bad) = y.data.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::LabelOutOfRange { label: bad as usize, classes });
    }
    Ok((n, classes, h, w))
}

/// Argmax over the class axis with lowest-index tie-breaking.
pub fn argmax_channel(p: &Tensor) -> Result<LabelBatch> {
    let s = p.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected (N, L, H, W), got {:?}",
            s
        )));
    }
    let (n, classes, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let d = p.data();
    let mut out = vec![0u8; n * hw];
    for samp in 0..n {
        for pix in 0..hw {
            let mut best = 0usize;
            let mut best_v = d[samp * classes * hw + pix];
            for l in 1..classes {
                let v = d[(samp * classes + l) * hw + pix];
                if v > best_v {
                    best_v = v;
                    best = l;
                }
            }
            out[samp * hw + pix] = best as u8;
        }
    }
    LabelBatch::new(n, h, w, out)
}

/// XOR of the pseudo label and the ground truth.
pub fn error_mask(p: &Tensor, y: &LabelBatch) -> Result<ErrorMask> {
    let (n, _, h, w) = check_probs_labels(p, y)?;
    let pseudo = argmax_channel(p)?;
    let data = pseudo
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| a != b)
        .collect();
    Ok(ErrorMask { n, h, w, data })
}

/// One-hot encoding of a label batch as a constant (N, L, H, W) tensor.
pub fn one_hot(y: &LabelBatch, classes: usize) -> Result<Tensor> {
    if let Some(&bad) = y.data.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::LabelOutOfRange { label: bad as usize, classes });
    }
    let hw = y.h * y.w;
    let mut data = vec![0.0; y.n * classes * hw];
    for s in 0..y.n {
        for pix in 0..hw {
            let l = y.data[s * hw + pix] as usize;
            data[(s * classes + l) * hw + pix] = 1.0;
        }
    }
    Tensor::new(vec![y.n, classes, y.h, y.w], data)
}

/// Alignment factor 1 / (1 + p_mis - p_tru): the weight at which the
/// rectified truth-class and mis-class probabilities coincide.
pub fn lambda_align(p_mis: f64, p_tru: f64) -> f64 {
    debug_assert!(p_mis >= p_tru);
    1.0 / (1.0 + p_mis - p_tru)
}

/// Similarity decay exp(-CE(P, onehot)) = clamped truth-class probability.
pub fn lambda_sim(p_pix: &[f64], truth: usize) -> f64 {
    let ce = -(p_pix[truth].max(PROB_EPS)).ln();
    (-ce).exp()
}

/// Certainty decay exp(-entropy(P)), with the 0 ln 0 term vanishing through
/// the shared clamp.
pub fn lambda_cert(p_pix: &[f64]) -> f64 {
    let entropy: f64 = -p_pix.iter().map(|&v| v * v.max(PROB_EPS).ln()).sum::<f64>();
    (-entropy).exp()
}

/// Ground-truth-guided rectification of a probability map. Mis-classified
/// pixels are replaced by lambda * P + (1 - lambda) * onehot(Y); correct
/// pixels pass through untouched. The whole computation is gradient-free.
pub fn arm(p: &Tensor, y: &LabelBatch, config: LambdaConfig) -> Result<RectifiedLabel> {
    let (n, classes, h, w) = check_probs_labels(p, y)?;
    let hw = h * w;
    let d = p.data();
    let mut out = d.to_vec();
    let mut mask = vec![false; n * hw];
    let mut lam = vec![0.0; n * hw];
    let mut lam_a = vec![0.0; n * hw];
    let mut lam_s = vec![0.0; n * hw];
    let mut lam_c = vec![0.0; n * hw];
    let mut pix_probs = vec![0.0; classes];
    for s in 0..n {
        for pix in 0..hw {
            for (l, v) in pix_probs.iter_mut().enumerate() {
                *v = d[(s * classes + l) * hw + pix];
            }
            let mut argmax = 0usize;
            for l in 1..classes {
                if pix_probs[l] > pix_probs[argmax] {
                    argmax = l;
                }
            }
            let truth = y.data[s * hw + pix] as usize;
            if argmax == truth {
                continue;
            }
            let idx = s * hw + pix;
            mask[idx] = true;
            let l_a = lambda_align(pix_probs[argmax], pix_probs[truth]);
            let l_s = lambda_sim(&pix_probs, truth);
            let l_c = lambda_cert(&pix_probs);
            let lambda = match config {
                LambdaConfig::One => 1.0,
                LambdaConfig::Align => l_a,
                LambdaConfig::AlignSim => l_a * l_s,
                LambdaConfig::AlignCert => l_a * l_c,
                LambdaConfig::Full => l_a * l_s * l_c,
            };
            lam[idx] = lambda;
            lam_a[idx] = l_a;
            lam_s[idx] = l_s;
            lam_c[idx] = l_c;
            for l in 0..classes {
                let one = if l == truth { 1.0 } else { 0.0 };
                out[(s * classes + l) * hw + pix] = lambda * pix_probs[l] + (1.0 - lambda) * one;
            }
        }
    }
    Ok(RectifiedLabel {
        probs: Tensor::new(vec![n, classes, h, w], out)?,
        mask: ErrorMask { n, h, w, data: mask },
        lambda: lam,
        lambda_align: lam_a,
        lambda_sim: lam_s,
        lambda_cert: lam_c,
    })
}

/// Logit-space transfer loss: mean over batch and pixels of
/// KL(P_self || P_peer) along the class axis, probabilities clamped inside
/// the logs. The peer target is detached, so gradient reaches only P_self.
pub fn rlcl_loss(p_self: &Tensor, p_r_peer: &Tensor) -> Result<Tensor> {
    if p_self.shape() != p_r_peer.shape() {
        return Err(Error::ShapeMismatch(format!(
            "rlcl_loss shapes differ: {:?} vs {:?}",
            p_self.shape(),
            p_r_peer.shape()
        )));
    }
    if p_self.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "rlcl_loss expects (N, L, H, W), got {:?}",
            p_self.shape()
        )));
    }
    let peer = p_r_peer.detach();
    let log_peer = peer.clamp_min(PROB_EPS).log()?;
    let log_self = p_self.clamp_min(PROB_EPS).log()?;
    let diff = log_self.sub(&log_peer)?;
    let kl_per_pixel = p_self.mul(&diff)?.reduce_sum(Some(1))?; // (N, H, W)
    kl_per_pixel.reduce_mean(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, l: usize, h: usize, w: usize) -> Tensor {
        let hw = h * w;
        let mut data = vec![0.0; n * l * hw];
        for s in 0..n {
            for pix in 0..hw {
                let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for (c, v) in raw.iter().enumerate() {
                    data[(s * l + c) * hw + pix] = v / sum;
                }
            }
        }
        Tensor::new(vec![n, l, h, w], data).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, l: usize, h: usize, w: usize) -> LabelBatch {
        let data = (0..n * h * w).map(|_| rng.random_range(0..l) as u8).collect();
        LabelBatch::new(n, h, w, data).unwrap()
    }

    #[test]
    fn error_mask_perfect_prediction_is_zero() {
        let y = LabelBatch::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let p = one_hot(&y, 3).unwrap();
        let m = error_mask(&p, &y).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn error_mask_uniform_ties_break_to_class_zero() {
        let y = LabelBatch::new(1, 2, 2, vec![0, 1, 2, 0]).unwrap();
        let p = Tensor::new(vec![1, 3, 2, 2], vec![1.0 / 3.0; 12]).unwrap();
        let m = error_mask(&p, &y).unwrap();
        for (i, &lab) in y.data.iter().enumerate() {
            assert_eq!(m.data[i], lab != 0);
        }
    }

    #[test]
    fn error_mask_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_probs(&mut rng, 1, 4, 5, 5);
        let y = random_labels(&mut rng, 1, 4, 5, 5);
        let m = error_mask(&p, &y).unwrap();
        let hw = 25;
        for pix in 0..hw {
            let probs: Vec<f64> = (0..4).map(|l| p.data()[l * hw + pix]).collect();
            let mut best = 0;
            for l in 1..4 {
                if probs[l] > probs[best] {
                    best = l;
                }
            }
            assert_eq!(m.data[pix], best != y.data[pix] as usize);
        }
    }

    #[test]
    fn error_mask_label_out_of_range() {
        let y = LabelBatch::new(1, 1, 1, vec![3]).unwrap();
        let p = Tensor::new(vec![1, 3, 1, 1], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            error_mask(&p, &y),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn one_hot_examples() {
        let y = LabelBatch::new(1, 1, 1, vec![2]).unwrap();
        let t = one_hot(&y, 4).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 0.0]);
        let y = LabelBatch::new(1, 2, 2, vec![0, 3, 1, 2]).unwrap();
        let t = one_hot(&y, 4).unwrap();
        let hw = 4;
        for pix in 0..hw {
            let sum: f64 = (0..4).map(|l| t.data()[l * hw + pix]).sum();
            assert_eq!(sum, 1.0);
            let arg = (0..4).max_by(|a, b| {
                t.data()[a * hw + pix].partial_cmp(&t.data()[b * hw + pix]).unwrap()
            });
            assert_eq!(arg.unwrap() as u8, y.data[pix]);
        }
        assert!(one_hot(&LabelBatch::new(1, 1, 1, vec![4]).unwrap(), 4).is_err());
    }

    #[test]
    fn lambda_align_examples() {
        assert!((lambda_align(0.4, 0.4) - 1.0).abs() < 1e-15);
        assert!((lambda_align(0.6, 0.3) - 1.0 / 1.3).abs() < 1e-12);
        // Eq-style identity: the aligned mixture makes both classes equal.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p_tru = rng.random_range(0.0..0.5);
            let p_mis = rng.random_range(p_tru..1.0 - p_tru);
            let la = lambda_align(p_mis, p_tru);
            let lhs = la * p_mis; // + (1 - la) * 0
            let rhs = la * p_tru + (1.0 - la);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_sim_examples() {
        assert!((lambda_sim(&[0.0, 1.0], 1) - 1.0).abs() < 1e-12);
        assert!((lambda_sim(&[0.7, 0.3], 1) - 0.3).abs() < 1e-12);
        assert!((lambda_sim(&[1.0, 0.0], 1) - PROB_EPS).abs() < 1e-20);
    }

    #[test]
    fn lambda_cert_examples() {
        // One-hot: zero entropy up to the clamp.
        assert!((lambda_cert(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-9);
        // Uniform over L: entropy ln L, so exp(-S) = 1/L.
        let l = 4;
        let u = vec![1.0 / l as f64; l];
        assert!((lambda_cert(&u) - 1.0 / l as f64).abs() < 1e-12);
        // Worked distribution: S = 1.0296530140645736 nats.
        let lc = lambda_cert(&[0.5, 0.3, 0.2]);
        assert!((lc - (-1.029_653_014_064_573_6f64).exp()).abs() < 1e-15);
        assert!((lc - 0.357_130_858_457_483_4).abs() < 1e-12, "lambda_cert = {lc}");
    }

    #[test]
    fn arm_identity_on_perfect_prediction() {
        let y = LabelBatch::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let p = one_hot(&y, 3).unwrap();
        let r = arm(&p, &y, LambdaConfig::Full).unwrap();
        assert_eq!(r.probs.data(), p.data());
        assert_eq!(r.mask.count(), 0);
    }

    #[test]
    fn arm_worked_pixel() {
        // P = (0.5, 0.3, 0.2), Y = 1. Scalar evaluation of the defining
        // formulas: lambda_a = 1/1.2, lambda_s = 0.3,
        // lambda_c = exp(-1.0296530140645736) = 0.3571308584574834,
        // lambda = 0.0892827146143709,
        // P_r = lambda*P + (1-lambda)*(0,1,0)
        //     = (0.0446413573071854, 0.9375020997699404, 0.0178565429228742).
        let y = LabelBatch::new(1, 1, 1, vec![1]).unwrap();
        let p = Tensor::new(vec![1, 3, 1, 1], vec![0.5, 0.3, 0.2]).unwrap();
        let r = arm(&p, &y, LambdaConfig::Full).unwrap();
        assert!((r.lambda_align[0] - 1.0 / 1.2).abs() < 1e-12);
        assert!((r.lambda_sim[0] - 0.3).abs() < 1e-12);
        assert!((r.lambda_cert[0] - 0.357_130_858_457_483_4).abs() < 1e-12);
        assert!((r.lambda[0] - 0.089_282_714_614_370_9).abs() < 1e-12);
        let pr = r.probs.data();
        assert!((pr[0] - 0.044_641_357_307_185_4).abs() < 1e-12);
        assert!((pr[1] - 0.937_502_099_769_940_4).abs() < 1e-12);
        assert!((pr[2] - 0.017_856_542_922_874_2).abs() < 1e-12);
        assert!((pr[0] + pr[1] + pr[2] - 1.0).abs() < 1e-12);
        assert!(pr[1] > pr[0]);
        // Cross-check against the independent oracle path.
        let (oracle_pr, ol, _, _, _) = oracle::arm_pixel_ref(&[0.5, 0.3, 0.2], 1);
        for (a, b) in pr.iter().zip(&oracle_pr) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((r.lambda[0] - ol).abs() < 1e-15);
    }

    #[test]
    fn arm_matches_scalar_reference_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let p = random_probs(&mut rng, 2, 4, 6, 6);
            let y = random_labels(&mut rng, 2, 4, 6, 6);
            let r = arm(&p, &y, LambdaConfig::Full).unwrap();
            let want = oracle::arm_ref(p.data(), 2, 4, 6, 6, &y);
            for (a, b) in r.probs.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn arm_rectification_identity_and_strictness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_probs(&mut rng, 2, 4, 8, 8);
        let y = random_labels(&mut rng, 2, 4, 8, 8);
        let r = arm(&p, &y, LambdaConfig::Full).unwrap();
        let hw = 64;
        let pseudo = argmax_channel(&p).unwrap();
        for s in 0..2 {
            for pix in 0..hw {
                let idx = s * hw + pix;
                let sum: f64 = (0..4).map(|l| r.probs.data()[(s * 4 + l) * hw + pix]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                let truth = y.data[idx] as usize;
                let mis = pseudo.data[idx] as usize;
                if !r.mask.data[idx] {
                    for l in 0..4 {
                        assert_eq!(
                            r.probs.data()[(s * 4 + l) * hw + pix],
                            p.data()[(s * 4 + l) * hw + pix]
                        );
                    }
                } else {
                    let gap = r.probs.data()[(s * 4 + truth) * hw + pix]
                        - r.probs.data()[(s * 4 + mis) * hw + pix];
                    let want = 1.0 - r.lambda_sim[idx] * r.lambda_cert[idx];
                    assert!(gap > 0.0);
                    assert!((gap - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn arm_align_only_equalizes_truth_and_mis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_probs(&mut rng, 1, 4, 8, 8);
        let y = random_labels(&mut rng, 1, 4, 8, 8);
        let r = arm(&p, &y, LambdaConfig::Align).unwrap();
        let pseudo = argmax_channel(&p).unwrap();
        let hw = 64;
        for pix in 0..hw {
            if !r.mask.data[pix] {
                continue;
            }
            let truth = y.data[pix] as usize;
            let mis = pseudo.data[pix] as usize;
            let pt = r.probs.data()[truth * hw + pix];
            let pm = r.probs.data()[mis * hw + pix];
            assert!((pt - pm).abs() < 1e-9);
        }
    }

    #[test]
    fn rlcl_loss_zero_on_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_probs(&mut rng, 1, 3, 4, 4);
        let loss = rlcl_loss(&p, &p.detach()).unwrap();
        assert!(loss.item().abs() < 1e-10);
    }

    #[test]
    fn rlcl_loss_closed_form_ln2() {
        // Every pixel: self (1, 0) vs peer (0.5, 0.5) -> KL = ln 2.
        let n = 2.0f64.ln();
        let p_self = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let peer = Tensor::new(vec![1, 2, 2, 2], vec![0.5; 8]).unwrap();
        let loss = rlcl_loss(&p_self, &peer).unwrap();
        assert!((loss.item() - n).abs() < 1e-9, "loss = {}", loss.item());
    }

    #[test]
    fn rlcl_loss_nonnegative_and_one_sided_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let logits = Tensor::param(
                vec![1, 3, 2, 2],
                (0..12).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let p_self = logits.softmax(1).unwrap();
            let peer = random_probs(&mut rng, 1, 3, 2, 2);
            let peer_leaf = Tensor::param(peer.shape().to_vec(), peer.data().to_vec()).unwrap();
            let loss = rlcl_loss(&p_self, &peer_leaf).unwrap();
            assert!(loss.item() >= -1e-12);
            loss.backward().unwrap();
            assert!(logits.grad().is_some());
            assert!(peer_leaf.grad().is_none(), "gradient leaked into the peer");
        }
    }

    #[test]
    fn rlcl_loss_shape_mismatch_errors() {
        let a = Tensor::new(vec![1, 2, 2, 2], vec![0.5; 8]).unwrap();
        let b = Tensor::new(vec![1, 2, 2, 1], vec![0.5; 4]).unwrap();
        assert!(rlcl_loss(&a, &b).is_err());
    }
}
