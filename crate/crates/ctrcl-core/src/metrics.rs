//! Segmentation quality metrics: Dice similarity, Jaccard index, symmetric
//! Hausdorff distance over boundary pixels, and mean absolute error on the
//! foreground-vs-background binarization.
//!
//! Conventions, pinned so the numbers are reproducible:
//! - DSC and JAC of two empty masks are 1; empty ground truth with a
//!   non-empty prediction scores 0.
//! - HSD uses 4-connectivity boundaries (a mask pixel with an off-mask
//!   neighbor or on the image edge), Euclidean pixel units, exact brute
//!   force; if either mask is empty it returns the image diagonal
//!   sqrt(h^2 + w^2).
//! - Per-class values average over samples where the class appears in the
//!   ground truth or the prediction; classes absent from both are skipped.
//! - Report means average the per-class values over foreground classes that
//!   appear in at least one ground-truth map.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::labels::LabelBatch;
use crate::no_grad;
use crate::rlcl::argmax_channel;
use crate::students::Student;
use crate::tensor::Tensor;

/// Binary mask over an h x w grid.
#[derive(Debug, Clone)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// 2|A n B| / (|A| + |B|); both empty -> 1.
pub fn dsc(pred: &Mask, gt: &Mask) -> f64 {
    let (na, nb) = (pred.count(), gt.count());
    if na == 0 && nb == 0 {
        return 1.0;
    }
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(a, b)| **a && **b)
        .count();
    2.0 * inter as f64 / (na + nb) as f64
}

/// |A n B| / |A u B|; both empty -> 1.
pub fn jac(pred: &Mask, gt: &Mask) -> f64 {
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(a, b)| **a && **b)
        .count();
    let union = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(a, b)| **a || **b)
        .count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Mean of |pred - gt| over all pixels.
pub fn mae(pred: &Mask, gt: &Mask) -> f64 {
    let diff = pred.data.iter().zip(&gt.data).filter(|(a, b)| a != b).count();
    diff as f64 / pred.data.len() as f64
}

/// Boundary pixels under 4-connectivity (edge pixels of the image count).
pub fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h, mask.w);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask.data[i * w + j] {
                continue;
            }
            let edge = i == 0 || j == 0 || i == h - 1 || j == w - 1;
            let off = (i > 0 && !mask.data[(i - 1) * w + j])
                || (i + 1 < h && !mask.data[(i + 1) * w + j])
                || (j > 0 && !mask.data[i * w + j - 1])
                || (j + 1 < w && !mask.data[i * w + j + 1]);
            if edge || off {
                out.push((i, j));
            }
        }
    }
    out
}

/// Symmetric Hausdorff distance max(h(A,B), h(B,A)) over boundary pixels.
pub fn hsd(pred: &Mask, gt: &Mask) -> f64 {
    let ba = boundary(pred);
    let bb = boundary(gt);
    if ba.is_empty() || bb.is_empty() {
        return ((pred.h * pred.h + pred.w * pred.w) as f64).sqrt();
    }
    directed_hausdorff(&ba, &bb).max(directed_hausdorff(&bb, &ba))
}

fn directed_hausdorff(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(i, j) in from {
        let mut best = f64::INFINITY;
        for &(x, y) in to {
            let di = i as f64 - x as f64;
            let dj = j as f64 - y as f64;
            let d2 = di * di + dj * dj;
            if d2 < best {
                best = d2;
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub jac: f64,
    pub hsd: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub per_class: BTreeMap<u8, ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_jac: f64,
    pub mean_hsd: f64,
    pub mae: f64,
}

/// Streaming aggregation of per-sample metrics into an [`EvalReport`].
pub struct MetricAccumulator {
    classes: usize,
    acc: BTreeMap<u8, (f64, f64, f64, usize)>,
    class_in_gt: Vec<bool>,
    mae_sum: f64,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            acc: BTreeMap::new(),
            class_in_gt: vec![false; classes],
            mae_sum: 0.0,
            samples: 0,
        }
    }

    pub fn add_sample(&mut self, pred: &[u8], gt: &[u8], h: usize, w: usize) {
        self.samples += 1;
        for cls in 1..self.classes as u8 {
            let pm = Mask::new(h, w, pred.iter().map(|&v| v == cls).collect());
            let gm = Mask::new(h, w, gt.iter().map(|&v| v == cls).collect());
            let in_gt = gm.count() > 0;
            let in_pred = pm.count() > 0;
            if in_gt {
                self.class_in_gt[cls as usize] = true;
            }
            if !in_gt && !in_pred {
                continue;
            }
            let e = self.acc.entry(cls).or_insert((0.0, 0.0, 0.0, 0));
            e.0 += dsc(&pm, &gm);
            e.1 += jac(&pm, &gm);
            e.2 += hsd(&pm, &gm);
            e.3 += 1;
        }
        let pfg = Mask::new(h, w, pred.iter().map(|&v| v != 0).collect());
        let gfg = Mask::new(h, w, gt.iter().map(|&v| v != 0).collect());
        self.mae_sum += mae(&pfg, &gfg);
    }

    pub fn finish(self) -> EvalReport {
        let per_class: BTreeMap<u8, ClassMetrics> = self
            .acc
            .iter()
            .map(|(&cls, &(d, j, hs, n))| {
                let n = n as f64;
                (cls, ClassMetrics { dsc: d / n, jac: j / n, hsd: hs / n })
            })
            .collect();
        let gt_classes: Vec<u8> = per_class
            .keys()
            .copied()
            .filter(|&c| self.class_in_gt[c as usize])
            .collect();
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| -> f64 {
            if gt_classes.is_empty() {
                return 0.0;
            }
            gt_classes.iter().map(|c| f(&per_class[c])).sum::<f64>() / gt_classes.len() as f64
        };
        EvalReport {
            mean_dsc: mean(&|m| m.dsc),
            mean_jac: mean(&|m| m.jac),
            mean_hsd: mean(&|m| m.hsd),
            mae: self.mae_sum / (self.samples.max(1)) as f64,
            per_class,
        }
    }
}

/// Aggregates metrics for already-argmaxed predictions against ground truth.
pub fn evaluate_predictions(pred: &LabelBatch, gt: &LabelBatch, classes: usize) -> EvalReport {
    debug_assert_eq!((pred.n, pred.h, pred.w), (gt.n, gt.h, gt.w));
    let mut acc = MetricAccumulator::new(classes);
    for s in 0..pred.n {
        acc.add_sample(pred.sample(s), gt.sample(s), pred.h, pred.w);
    }
    acc.finish()
}

/// Evaluates a student on a dataset: eval-mode forward, argmax masks,
/// per-foreground-class metrics and their means, MAE on the binarized
/// foreground.
pub fn evaluate(student: &Student, dataset: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let mut acc = MetricAccumulator::new(dataset.num_classes);
    let (h, w) = (dataset.h, dataset.w);
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + batch_size.max(1)).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let batch = crate::data::make_batch(dataset, &indices, None)?;
        let pred = no_grad(|| -> Result<LabelBatch> {
            let out = student.forward(&batch.images, false)?;
            argmax_channel(&out.probs)
        })?;
        for bi in 0..indices.len() {
            acc.add_sample(pred.sample(bi), batch.labels.sample(bi), h, w);
        }
        start = end;
    }
    Ok(acc.finish())
}

/// Pseudo-label masks from a probability tensor, one mask per class.
pub fn masks_from_probs(probs: &Tensor, class: u8) -> Result<Vec<Mask>> {
    let pred = argmax_channel(probs)?;
    Ok((0..pred.n)
        .map(|s| {
            Mask::new(
                pred.h,
                pred.w,
                pred.sample(s).iter().map(|&v| v == class).collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_of(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut data = vec![false; h * w];
        for &(i, j) in on {
            data[i * w + j] = true;
        }
        Mask::new(h, w, data)
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect())
    }

    #[test]
    fn dsc_examples() {
        let a = mask_of(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a), 1.0);
        let b = mask_of(4, 4, &[(2, 2)]);
        assert_eq!(dsc(&a, &b), 0.0);
        // |A| = 4, |B| = 6, |A n B| = 3 -> 2*3/10 = 0.6.
        let a = mask_of(4, 4, &[(0, 0), (0, 1), (0, 2), (1, 0)]);
        let b = mask_of(4, 4, &[(0, 0), (0, 1), (0, 2), (2, 0), (2, 1), (2, 2)]);
        assert!((dsc(&a, &b) - 0.6).abs() < 1e-12);
        let empty = mask_of(4, 4, &[]);
        assert_eq!(dsc(&empty, &empty), 1.0);
        assert_eq!(dsc(&a, &empty), 0.0);
    }

    #[test]
    fn jac_examples_and_dsc_identity() {
        let a = mask_of(4, 4, &[(0, 0)]);
        assert_eq!(jac(&a, &a), 1.0);
        let b = mask_of(4, 4, &[(3, 3)]);
        assert_eq!(jac(&a, &b), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_mask(&mut rng, 6, 6, 0.4);
            let b = random_mask(&mut rng, 6, 6, 0.4);
            let d = dsc(&a, &b);
            let j = jac(&a, &b);
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
            assert!((dsc(&a, &b) - dsc(&b, &a)).abs() < 1e-15);
        }
    }

    #[test]
    fn hsd_examples() {
        let a = mask_of(8, 8, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(hsd(&a, &a), 0.0);
        let p = mask_of(8, 8, &[(0, 0)]);
        let q = mask_of(8, 8, &[(3, 4)]);
        assert_eq!(hsd(&p, &q), 5.0);
        let empty = mask_of(8, 8, &[]);
        assert_eq!(hsd(&p, &empty), (128.0f64).sqrt());
    }

    #[test]
    fn hsd_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let a = random_mask(&mut rng, 16, 16, 0.3);
            let b = random_mask(&mut rng, 16, 16, 0.3);
            let got = hsd(&a, &b);
            let want = oracle::hsd_ref(&a.data, &b.data, 16, 16);
            assert!((got - want).abs() < 1e-12);
            assert!((hsd(&a, &b) - hsd(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_mask(&mut rng, 9, 7, 0.5);
            assert_eq!(boundary(&m), oracle::boundary_ref(&m.data, 9, 7));
        }
    }

    #[test]
    fn mae_examples() {
        let a = mask_of(8, 8, &[(0, 0)]);
        assert_eq!(mae(&a, &a), 0.0);
        let full = Mask::new(8, 8, vec![true; 64]);
        let none = Mask::new(8, 8, vec![false; 64]);
        assert_eq!(mae(&full, &none), 1.0);
        let b = mask_of(8, 8, &[(0, 0), (5, 5)]);
        assert!((mae(&a, &b) - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_perfect_predictor() {
        use crate::data::generate_synthetic;
        let d = generate_synthetic(4, 16, 16, 4, 9).unwrap();
        let maps: Vec<_> = d.samples.iter().map(|s| s.labels.clone()).collect();
        let gt = LabelBatch::from_maps(&maps).unwrap();
        let report = evaluate_predictions(&gt, &gt, 4);
        assert_eq!(report.mean_dsc, 1.0);
        assert_eq!(report.mean_jac, 1.0);
        assert_eq!(report.mean_hsd, 0.0);
        assert_eq!(report.mae, 0.0);
    }

    #[test]
    fn evaluate_all_background_predictor() {
        use crate::data::generate_synthetic;
        let d = generate_synthetic(4, 16, 16, 4, 10).unwrap();
        let maps: Vec<_> = d.samples.iter().map(|s| s.labels.clone()).collect();
        let gt = LabelBatch::from_maps(&maps).unwrap();
        let zeros = LabelBatch::new(gt.n, gt.h, gt.w, vec![0; gt.data.len()]).unwrap();
        let report = evaluate_predictions(&zeros, &gt, 4);
        for (cls, m) in &report.per_class {
            assert_eq!(m.dsc, 0.0, "class {cls} should score 0");
            assert_eq!(m.jac, 0.0);
        }
        assert!(report.mae > 0.0);
    }

    #[test]
    fn report_means_equal_hand_aggregation() {
        use crate::data::generate_synthetic;
        let d = generate_synthetic(6, 16, 16, 4, 11).unwrap();
        let maps: Vec<_> = d.samples.iter().map(|s| s.labels.clone()).collect();
        let gt = LabelBatch::from_maps(&maps).unwrap();
        // Noisy predictions: shift labels of one sample, keep others.
        let mut pred_data = gt.data.clone();
        for v in pred_data.iter_mut().take(16 * 16) {
            *v = (*v + 1) % 4;
        }
        let pred = LabelBatch::new(gt.n, gt.h, gt.w, pred_data).unwrap();
        let report = evaluate_predictions(&pred, &gt, 4);
        // Recompute per-class means by hand from the primitive metrics.
        let mut acc: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        let mut in_gt = vec![false; 4];
        for s in 0..gt.n {
            for cls in 1..4u8 {
                let pm = Mask::new(16, 16, pred.sample(s).iter().map(|&v| v == cls).collect());
                let gm = Mask::new(16, 16, gt.sample(s).iter().map(|&v| v == cls).collect());
                if gm.count() > 0 {
                    in_gt[cls as usize] = true;
                }
                if pm.count() == 0 && gm.count() == 0 {
                    continue;
                }
                let e = acc.entry(cls).or_insert((0.0, 0));
                e.0 += dsc(&pm, &gm);
                e.1 += 1;
            }
        }
        let classes: Vec<u8> = acc
            .keys()
            .copied()
            .filter(|&c| in_gt[c as usize])
            .collect();
        let want = classes
            .iter()
            .map(|c| acc[c].0 / acc[c].1 as f64)
            .sum::<f64>()
            / classes.len() as f64;
        assert!((report.mean_dsc - want).abs() < 1e-12);
    }

    #[test]
    fn evaluate_runs_on_a_student() {
        use crate::data::generate_synthetic;
        use crate::students::{Student, StudentConfig};
        let d = generate_synthetic(4, 16, 16, 3, 9).unwrap();
        let student = Student::init(StudentConfig::cnn_default(3, 0)).unwrap();
        let report = evaluate(&student, &d, 2).unwrap();
        assert!(report.mae >= 0.0 && report.mae <= 1.0);
        for m in report.per_class.values() {
            assert!(m.dsc >= 0.0 && m.dsc <= 1.0);
            assert!(m.jac >= 0.0 && m.jac <= 1.0);
            assert!(m.hsd >= 0.0);
        }
    }
}
