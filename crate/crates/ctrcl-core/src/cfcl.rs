//! Class-aware feature-wise collaborative learning: per-class prototypes by
//! masked average pooling, class-aware representations by softmax over scaled
//! cosine distances, and the feature-space KL transfer loss.
//!
//! Representations stay on the owning student's tape (gradients flow back
//! into its feature maps through both the pixel features and the prototypes);
//! the peer's representation is detached at loss time.

use crate::error::{Error, Result};
use crate::labels::{nearest_axis, LabelBatch};
use crate::tensor::{Tensor, PROB_EPS};

/// Scaling factor applied to cosine distances before the softmax.
pub const CPM_ALPHA: f64 = 20.0;
/// Denominator epsilon in the masked-average prototype pooling.
pub const PROTO_EPS: f64 = 1e-8;
/// Guard under the squared norms so the sqrt gradient stays finite on
/// all-zero feature vectors.
const NORM_SQ_EPS: f64 = 1e-16;

/// Per-class channel-summary vectors for one batch.
pub struct PrototypeSet {
    /// Classes present anywhere in the batch, ascending.
    pub class_ids: Vec<u8>,
    /// One vector of length C per entry of `class_ids`, on-tape.
    pub prototypes: Vec<Tensor>,
    /// Number of samples containing each class.
    pub counts: Vec<usize>,
    /// Classes present per sample (ascending), from the downsampled labels.
    pub present_per_sample: Vec<Vec<u8>>,
}

impl PrototypeSet {
    pub fn prototype_of(&self, class_id: u8) -> Option<&Tensor> {
        self.class_ids
            .iter()
            .position(|&c| c == class_id)
            .map(|i| &self.prototypes[i])
    }
}

/// Per-pixel distribution over the sample's present classes.
pub struct ClassAwareRep {
    pub h: usize,
    pub w: usize,
    pub per_sample: Vec<SampleRep>,
}

/// One sample's (K x H*W) representation with its class slot ordering.
pub struct SampleRep {
    pub class_ids: Vec<u8>,
    pub rep: Tensor,
}

/// 1 - cosine similarity on plain vectors, zero-vector guarded; range [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-8)
}

fn check_features(f: &Tensor, y: &LabelBatch) -> Result<(usize, usize, usize, usize)> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected features of shape (N, C, H, W), got {:?}",
            s
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if y.n != n || y.h != h || y.w != w {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{}x{} do not match features {:?}",
            y.n, y.h, y.w, s
        )));
    }
    Ok((n, c, h, w))
}

/// Masked average pooling + batch mean (labels already at feature size):
/// p_l = (1/N_l) sum over samples containing l of
///       (sum of masked features) / (mask count + eps).
pub fn compute_prototypes(f: &Tensor, y_ds: &LabelBatch, eps: f64) -> Result<PrototypeSet> {
    let (n, c, h, w) = check_features(f, y_ds)?;
    let hw = h * w;

    let mut present_per_sample = Vec::with_capacity(n);
    for s in 0..n {
        let mut cls: Vec<u8> = y_ds.sample(s).to_vec();
        cls.sort_unstable();
        cls.dedup();
        present_per_sample.push(cls);
    }
    let mut class_ids: Vec<u8> = present_per_sample.iter().flatten().copied().collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    // Per-sample feature matrices (C x H*W).
    let flat = f.reshape(vec![n, c * hw])?;
    let sample_mats: Vec<Tensor> = (0..n)
        .map(|s| flat.slice_rows(s, 1)?.reshape(vec![c, hw]))
        .collect::<Result<_>>()?;

    let mut prototypes = Vec::with_capacity(class_ids.len());
    let mut counts = Vec::with_capacity(class_ids.len());
    for &cls in &class_ids {
        let mut acc: Option<Tensor> = None;
        let mut n_l = 0usize;
        for s in 0..n {
            let labels = y_ds.sample(s);
            let count = labels.iter().filter(|&&v| v == cls).count();
            if count == 0 {
                continue;
            }
            n_l += 1;
            let mask: Vec<f64> = labels
                .iter()
                .map(|&v| if v == cls { 1.0 } else { 0.0 })
                .collect();
            let mask_t = Tensor::new(vec![hw, 1], mask)?;
            let pooled = sample_mats[s]
                .matmul(&mask_t)?
                .reshape(vec![c])?
                .affine(1.0 / (count as f64 + eps), 0.0);
            acc = Some(match acc {
                None => pooled,
                Some(prev) => prev.add(&pooled)?,
            });
        }
        let total = acc.expect("class listed as present but found in no sample");
        prototypes.push(total.affine(1.0 / n_l as f64, 0.0));
        counts.push(n_l);
    }
    Ok(PrototypeSet {
        class_ids,
        prototypes,
        counts,
        present_per_sample,
    })
}

/// Softmax over negative scaled cosine distances between each pixel feature
/// and the sample's present-class prototypes (slots ascending by class id).
pub fn class_aware_rep(f: &Tensor, protos: &PrototypeSet, alpha: f64) -> Result<ClassAwareRep> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected (N, C, H, W) features, got {:?}",
            s
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if protos.present_per_sample.len() != n {
        return Err(Error::ShapeMismatch(
            "prototype set built from a different batch size".into(),
        ));
    }
    let hw = h * w;
    let flat = f.reshape(vec![n, c * hw])?;

    let mut per_sample = Vec::with_capacity(n);
    for samp in 0..n {
        let class_ids = protos.present_per_sample[samp].clone();
        if class_ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {samp} has an empty prototype set"
            )));
        }
        let k = class_ids.len();
        let rows: Vec<Tensor> = class_ids
            .iter()
            .map(|&cls| {
                protos
                    .prototype_of(cls)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("no prototype for class {cls}"))
                    })?
                    .reshape(vec![1, c])
            })
            .collect::<Result<_>>()?;
        let proto_mat = Tensor::concat_rows(&rows)?; // (K, C)

        let feat = flat.slice_rows(samp, 1)?.reshape(vec![c, hw])?; // (C, S)
        let dots = proto_mat.matmul(&feat)?; // (K, S)
        let proto_norm = proto_mat
            .mul(&proto_mat)?
            .reduce_sum(Some(1))?
            .clamp_min(NORM_SQ_EPS)
            .sqrt()?
            .reshape(vec![k, 1])?;
        let feat_norm = feat
            .mul(&feat)?
            .reduce_sum(Some(0))?
            .clamp_min(NORM_SQ_EPS)
            .sqrt()?
            .reshape(vec![1, hw])?;
        let denom = proto_norm.matmul(&feat_norm)?.clamp_min(1e-8);
        let cos = dots.div(&denom)?;
        // d = 1 - cos; softmax over -alpha * d along the class axis.
        let logits = cos.affine(-1.0, 1.0).affine(-alpha, 0.0);
        let rep = logits.softmax(0)?;
        per_sample.push(SampleRep { class_ids, rep });
    }
    Ok(ClassAwareRep { h, w, per_sample })
}

/// Full category perception: downsample labels to the feature resolution,
/// pool prototypes, build the class-aware representation at alpha = 20.
pub fn cpm(f: &Tensor, y: &LabelBatch) -> Result<ClassAwareRep> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected (N, C, H, W) features, got {:?}",
            s
        )));
    }
    let y_ds = y.nearest_downsample(s[2], s[3])?;
    let protos = compute_prototypes(f, &y_ds, PROTO_EPS)?;
    class_aware_rep(f, &protos, CPM_ALPHA)
}

/// Feature-space transfer loss: per sample, mean over pixels of
/// KL(R_self || R_peer) across the present-class slots, averaged over the
/// batch. The peer representation is detached; slot orderings must agree.
/// A nearest-neighbor fallback resamples the peer map when spatial sizes
/// differ and `allow_resample` is set.
pub fn cfcl_loss(
    r_self: &ClassAwareRep,
    r_peer: &ClassAwareRep,
    allow_resample: bool,
) -> Result<Tensor> {
    if r_self.per_sample.len() != r_peer.per_sample.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes differ: {} vs {}",
            r_self.per_sample.len(),
            r_peer.per_sample.len()
        )));
    }
    let n = r_self.per_sample.len();
    let mut acc: Option<Tensor> = None;
    for samp in 0..n {
        let own = &r_self.per_sample[samp];
        let other = &r_peer.per_sample[samp];
        if own.class_ids != other.class_ids {
            return Err(Error::ShapeMismatch(format!(
                "class slots differ on sample {samp}: {:?} vs {:?}",
                own.class_ids, other.class_ids
            )));
        }
        let peer_rep = if r_self.h == r_peer.h && r_self.w == r_peer.w {
            other.rep.detach()
        } else if allow_resample {
            resample_rep(&other.rep, r_peer.h, r_peer.w, r_self.h, r_self.w)?
        } else {
            return Err(Error::ShapeMismatch(format!(
                "spatial sizes differ ({}x{} vs {}x{}) and resampling is disabled",
                r_self.h, r_self.w, r_peer.h, r_peer.w
            )));
        };
        let log_peer = peer_rep.clamp_min(PROB_EPS).log()?;
        let log_self = own.rep.clamp_min(PROB_EPS).log()?;
        let diff = log_self.sub(&log_peer)?;
        let kl = own.rep.mul(&diff)?.reduce_sum(Some(0))?.reduce_mean(None)?;
        acc = Some(match acc {
            None => kl,
            Some(prev) => prev.add(&kl)?,
        });
    }
    Ok(acc
        .ok_or_else(|| Error::InvalidArgument("cfcl_loss on empty batch".into()))?
        .affine(1.0 / n as f64, 0.0))
}

/// Nearest-neighbor resampling of a detached (K x h*w) representation map.
fn resample_rep(rep: &Tensor, h: usize, w: usize, oh: usize, ow: usize) -> Result<Tensor> {
    let k = rep.shape()[0];
    let rows = nearest_axis(h, oh);
    let cols = nearest_axis(w, ow);
    let src = rep.data();
    let mut out = Vec::with_capacity(k * oh * ow);
    for slot in 0..k {
        for &si in &rows {
            for &sj in &cols {
                out.push(src[slot * h * w + si * w + sj]);
            }
        }
    }
    Tensor::new(vec![k, oh * ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff_check;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> LabelBatch {
        let data = (0..n * h * w).map(|_| rng.random_range(0..k) as u8).collect();
        LabelBatch::new(n, h, w, data).unwrap()
    }

    #[test]
    fn cosine_distance_examples() {
        assert!(cosine_distance(&[2.0, 1.0], &[2.0, 1.0]).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]) - 2.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_region_prototype_recovery() {
        // Whole map one class with constant feature v: prototype is v up to
        // the count/(count + eps) factor.
        let (c, h, w) = (3, 4, 4);
        let v = [0.5, -1.25, 2.0];
        let mut data = vec![0.0; c * h * w];
        for (ch, val) in v.iter().enumerate() {
            for pix in 0..h * w {
                data[ch * h * w + pix] = *val;
            }
        }
        let f = Tensor::new(vec![1, c, h, w], data).unwrap();
        let y = LabelBatch::new(1, h, w, vec![2; h * w]).unwrap();
        let protos = compute_prototypes(&f, &y, PROTO_EPS).unwrap();
        assert_eq!(protos.class_ids, vec![2]);
        assert_eq!(protos.counts, vec![1]);
        let p = &protos.prototypes[0];
        let count = (h * w) as f64;
        for (got, want) in p.data().iter().zip(&v) {
            // Exact up to the count/(count + eps) pooling factor.
            let exact = want * count / (count + PROTO_EPS);
            assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
            let rel = (got - want).abs() / want.abs();
            assert!(rel < 1e-9, "relative error {rel}");
        }
    }

    #[test]
    fn prototype_batch_mean_of_region_means() {
        // Two samples both containing class 1 with constant regions m1, m2:
        // prototype is (m1 + m2) / 2.
        let (c, h, w) = (1, 2, 2);
        let f = Tensor::new(
            vec![2, c, h, w],
            vec![4.0, 4.0, 0.0, 0.0, 8.0, 8.0, 8.0, 8.0],
        )
        .unwrap();
        let y = LabelBatch::new(2, h, w, vec![1, 1, 0, 0, 1, 1, 1, 1]).unwrap();
        let protos = compute_prototypes(&f, &y, PROTO_EPS).unwrap();
        let p1 = protos.prototype_of(1).unwrap();
        assert!((p1.data()[0] - 6.0).abs() < 1e-7);
        assert_eq!(protos.counts[protos.class_ids.iter().position(|&c| c == 1).unwrap()], 2);
    }

    #[test]
    fn absent_class_is_simply_absent() {
        let f = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = LabelBatch::new(1, 2, 2, vec![3, 3, 3, 3]).unwrap();
        let protos = compute_prototypes(&f, &y, PROTO_EPS).unwrap();
        assert_eq!(protos.class_ids, vec![3]);
        assert!(protos.prototype_of(0).is_none());
    }

    #[test]
    fn prototypes_match_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, c, h, w) = (2, 4, 4, 4);
        let f = random_features(&mut rng, n, c, h, w);
        let y = random_labels(&mut rng, n, 3, h, w);
        let protos = compute_prototypes(&f, &y, PROTO_EPS).unwrap();
        let want = oracle::cpm_ref(f.data(), n, c, h, w, &y, PROTO_EPS, CPM_ALPHA);
        // The oracle returns per-sample reps; recompute its prototypes by
        // checking the rep agreement below instead. Here compare counts.
        assert_eq!(protos.present_per_sample.len(), want.len());
    }

    #[test]
    fn single_class_rep_is_one() {
        let f = Tensor::new(vec![1, 2, 2, 2], vec![0.3, 0.4, 0.5, 0.6, 1.0, 1.0, 1.0, 1.0])
            .unwrap();
        let y = LabelBatch::new(1, 2, 2, vec![1; 4]).unwrap();
        let rep = cpm(&f, &y).unwrap();
        assert_eq!(rep.per_sample[0].class_ids, vec![1]);
        for v in rep.per_sample[0].rep.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_prototype_pixel_wins_decisively() {
        // One pixel sits exactly on prototype j while every other prototype
        // is at distance 1 (orthogonal): slot j gets e^0 / (e^0 + (K-1)e^-20).
        let d = cosine_distance(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((d - 1.0).abs() < 1e-12);
        let expect = 1.0 / (1.0 + (2.0f64) * (-CPM_ALPHA).exp());
        assert!((expect - 1.0).abs() < 1e-8);
    }

    #[test]
    fn orthogonal_regions_give_near_one_hot_rep() {
        // Two spatially separated classes with orthogonal constant features:
        // off-slot mass below 1e-8 at alpha = 20.
        let (c, h, w) = (2, 2, 2);
        // Left column class 1 with feature (1, 0); right column class 2 with (0, 1).
        let f = Tensor::new(
            vec![1, c, h, w],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let y = LabelBatch::new(1, h, w, vec![1, 2, 1, 2]).unwrap();
        let rep = cpm(&f, &y).unwrap();
        let sr = &rep.per_sample[0];
        assert_eq!(sr.class_ids, vec![1, 2]);
        let hw = h * w;
        for (pix, &lab) in y.sample(0).iter().enumerate() {
            let own_slot = if lab == 1 { 0 } else { 1 };
            let off_slot = 1 - own_slot;
            assert!(sr.rep.data()[own_slot * hw + pix] > 1.0 - 1e-8);
            assert!(sr.rep.data()[off_slot * hw + pix] < 1e-8);
        }
    }

    #[test]
    fn cpm_matches_scalar_reference_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let (n, c, h, w) = (2, 4, 4, 4);
            let f = random_features(&mut rng, n, c, h, w);
            let y = random_labels(&mut rng, n, 4, h, w);
            let rep = cpm(&f, &y).unwrap();
            let want = oracle::cpm_ref(f.data(), n, c, h, w, &y, PROTO_EPS, CPM_ALPHA);
            for (s, (ids, map)) in want.iter().enumerate() {
                assert_eq!(&rep.per_sample[s].class_ids, ids);
                for (a, b) in rep.per_sample[s].rep.data().iter().zip(map) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rep_rows_sum_to_one_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (n, c, h, w) = (2, 6, 4, 4);
        let f = random_features(&mut rng, n, c, h, w);
        let y = random_labels(&mut rng, n, 3, h, w);
        let base = cpm(&f, &y).unwrap();
        for sr in &base.per_sample {
            let k = sr.class_ids.len();
            let hw = h * w;
            for pix in 0..hw {
                let sum: f64 = (0..k).map(|s| sr.rep.data()[s * hw + pix]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for s in 0..k {
                    assert!(sr.rep.data()[s * hw + pix] > 0.0);
                }
            }
        }
        for scale in [0.1, 1.0, 7.0] {
            let scaled = Tensor::new(
                f.shape().to_vec(),
                f.data().iter().map(|v| v * scale).collect(),
            )
            .unwrap();
            let rep = cpm(&scaled, &y).unwrap();
            for (a, b) in rep.per_sample.iter().zip(&base.per_sample) {
                for (x, y) in a.rep.data().iter().zip(b.rep.data()) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn prototype_linearity_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (n, c, h, w) = (2, 4, 4, 4);
        let f = random_features(&mut rng, n, c, h, w);
        let y = random_labels(&mut rng, n, 3, h, w);
        let base = compute_prototypes(&f, &y, PROTO_EPS).unwrap();
        let scaled_f = Tensor::new(
            f.shape().to_vec(),
            f.data().iter().map(|v| v * 3.5).collect(),
        )
        .unwrap();
        let scaled = compute_prototypes(&scaled_f, &y, PROTO_EPS).unwrap();
        for (a, b) in base.prototypes.iter().zip(&scaled.prototypes) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let rel = (y - 3.5 * x).abs() / x.abs().max(1e-12);
                assert!(rel < 1e-9, "{y} vs {}", 3.5 * x);
            }
        }
    }

    #[test]
    fn cpm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (n, c, h, w) = (1, 4, 4, 4);
        let f = random_features(&mut rng, n, c, h, w);
        let y = random_labels(&mut rng, n, 3, h, w);
        let err = finite_diff_check(
            |t| {
                let rep = cpm(t, &y)?;
                let mut acc: Option<Tensor> = None;
                for sr in &rep.per_sample {
                    let s = sr.rep.reduce_sum(None)?;
                    // sum(R) is constant (rows sum to 1) but exercises the
                    // full backward path; add a weighted sum for a
                    // non-trivial gradient.
                    let weights = Tensor::new(
                        sr.rep.shape().to_vec(),
                        (0..sr.rep.len()).map(|i| (i % 7) as f64 * 0.21 - 0.5).collect(),
                    )?;
                    let weighted = sr.rep.mul(&weights)?.reduce_sum(None)?;
                    let term = s.add(&weighted)?;
                    acc = Some(match acc {
                        None => term,
                        Some(p) => p.add(&term)?,
                    });
                }
                Ok(acc.unwrap())
            },
            &f,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn cfcl_loss_zero_on_identical_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let f = random_features(&mut rng, 2, 4, 4, 4);
        let y = random_labels(&mut rng, 2, 3, 4, 4);
        let rep = cpm(&f, &y).unwrap();
        let same = cpm(&f, &y).unwrap();
        let loss = cfcl_loss(&rep, &same, false).unwrap();
        assert!(loss.item().abs() < 1e-10);

        // Per-pixel two-class case (1, 0) vs (0.5, 0.5) -> ln 2.
        let a = ClassAwareRep {
            h: 1,
            w: 2,
            per_sample: vec![SampleRep {
                class_ids: vec![0, 1],
                rep: Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
            }],
        };
        let b = ClassAwareRep {
            h: 1,
            w: 2,
            per_sample: vec![SampleRep {
                class_ids: vec![0, 1],
                rep: Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(),
            }],
        };
        let loss = cfcl_loss(&a, &b, false).unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cfcl_loss_nonnegative_and_one_sided_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let f_self = Tensor::param(
                vec![1, 3, 4, 4],
                (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let f_peer = Tensor::param(
                vec![1, 3, 4, 4],
                (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let y = random_labels(&mut rng, 1, 3, 4, 4);
            let r_self = cpm(&f_self, &y).unwrap();
            let r_peer = cpm(&f_peer, &y).unwrap();
            let loss = cfcl_loss(&r_self, &r_peer, false).unwrap();
            assert!(loss.item() >= -1e-12);
            loss.backward().unwrap();
            assert!(f_self.grad().is_some());
            assert!(f_peer.grad().is_none(), "gradient leaked into the peer");
        }
    }

    #[test]
    fn cfcl_loss_class_mismatch_errors() {
        let a = ClassAwareRep {
            h: 1,
            w: 1,
            per_sample: vec![SampleRep {
                class_ids: vec![0, 1],
                rep: Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap(),
            }],
        };
        let b = ClassAwareRep {
            h: 1,
            w: 1,
            per_sample: vec![SampleRep {
                class_ids: vec![0, 2],
                rep: Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap(),
            }],
        };
        assert!(cfcl_loss(&a, &b, false).is_err());
    }

    #[test]
    fn cfcl_loss_spatial_mismatch_needs_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let f8 = random_features(&mut rng, 1, 3, 8, 8);
        let f4 = random_features(&mut rng, 1, 3, 4, 4);
        // Left half class 1, right half class 0, so both classes survive
        // the nearest downsample to 4x4.
        let y = LabelBatch::new(1, 8, 8, {
            let mut v = vec![0u8; 64];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = if i % 8 < 4 { 1 } else { 0 };
            }
            v
        })
        .unwrap();
        let r8 = cpm(&f8, &y).unwrap();
        let r4 = cpm(&f4, &y.nearest_downsample(4, 4).unwrap()).unwrap();
        assert!(cfcl_loss(&r8, &r4, false).is_err());
        let loss = cfcl_loss(&r8, &r4, true).unwrap();
        assert!(loss.item().is_finite());
    }
}
