//! Segmentation objective, total-loss combination, AdamW, and the
//! polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::labels::LabelBatch;
use crate::rlcl::one_hot;
use crate::students::Params;
use crate::tensor::{Tensor, PROB_EPS};

/// Trade-off weights for the three transfer terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 3.0, gamma1: 1.0, gamma2: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pixel-wise cross entropy against hard labels, averaged over batch and
/// pixels: (1/(N*H*W)) sum of -ln(clamp(P at the true class)).
pub fn seg_loss(probs: &Tensor, y: &LabelBatch) -> Result<Tensor> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "seg_loss expects (N, L, H, W), got {:?}",
            s
        )));
    }
    let classes = s[1];
    let onehot = one_hot(y, classes)?; // validates label range and shape
    if onehot.shape() != s {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{}x{} do not match probabilities {:?}",
            y.n, y.h, y.w, s
        )));
    }
    let picked = probs.mul(&onehot)?.reduce_sum(Some(1))?; // (N, H, W)
    picked
        .clamp_min(PROB_EPS)
        .log()?
        .reduce_mean(None)?
        .neg()
        .reshape(vec![1])
}

/// Weighted total: seg + beta * rlcl + gamma1 * cfcl_E + gamma2 * cfcl_D.
/// Absent terms and zero weights are skipped outright, so a fully gated
/// total is bitwise identical to the bare segmentation loss.
pub fn total_loss(
    seg: &Tensor,
    rlcl: Option<&Tensor>,
    cfcl_encoder: Option<&Tensor>,
    cfcl_decoder: Option<&Tensor>,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut total = seg.clone();
    for (term, weight) in [
        (rlcl, w.beta),
        (cfcl_encoder, w.gamma1),
        (cfcl_decoder, w.gamma2),
    ] {
        if let Some(t) = term {
            if weight != 0.0 {
                total = total.add(&t.affine(weight, 0.0))?;
            }
        }
    }
    Ok(total)
}

/// Polynomial decay: base_lr * (1 - iter/max_iter)^power.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("poly_lr with max_iter = 0".into()));
    }
    if iter > max_iter {
        return Err(Error::InvalidArgument(format!(
            "poly_lr iteration {iter} past max_iter {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Decoupled-weight-decay adaptive-moment optimizer state for one student.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Params, base_lr: f64) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            base_lr,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update at learning rate `lr_t`: decoupled weight decay plus the
    /// bias-corrected moment step. Consumes and clears every gradient;
    /// errors if any parameter is missing one.
    pub fn step(&mut self, params: &mut Params, lr_t: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let (name, tensor) = {
                let (n, t) = params.entry(i);
                (n.to_string(), t.clone())
            };
            let grad = tensor
                .take_grad()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = tensor.data().to_vec();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr_t * (m_hat / (v_hat.sqrt() + self.eps_opt)
                    + self.weight_decay * data[j]);
            }
            params.set(i, Tensor::param(tensor.shape().to_vec(), data)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff_check;
    use crate::students::{Student, StudentConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seg_loss_perfect_prediction_is_zero_up_to_clamp() {
        let y = LabelBatch::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let p = one_hot(&y, 4).unwrap();
        let loss = seg_loss(&p, &y).unwrap();
        assert!(loss.item() <= 1e-7);
    }

    #[test]
    fn seg_loss_uniform_is_ln_l() {
        let y = LabelBatch::new(2, 2, 2, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let p = Tensor::new(vec![2, 4, 2, 2], vec![0.25; 32]).unwrap();
        let loss = seg_loss(&p, &y).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_out_of_range_labels() {
        let y = LabelBatch::new(1, 1, 1, vec![5]).unwrap();
        let p = Tensor::new(vec![1, 4, 1, 1], vec![0.25; 4]).unwrap();
        assert!(seg_loss(&p, &y).is_err());
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let y = LabelBatch::new(
            1,
            4,
            4,
            (0..16).map(|_| rng.random_range(0..3) as u8).collect(),
        )
        .unwrap();
        let err = finite_diff_check(|z| seg_loss(&z.softmax(1)?, &y), &logits, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn total_loss_gating_and_arithmetic() {
        let seg = Tensor::scalar(1.0);
        let one = Tensor::scalar(1.0);
        // All weights zero: the total IS the segmentation loss, bitwise.
        let zeroed = LossWeights { beta: 0.0, gamma1: 0.0, gamma2: 0.0 };
        let t = total_loss(&seg, Some(&one), Some(&one), Some(&one), &zeroed).unwrap();
        assert_eq!(t.item().to_bits(), seg.item().to_bits());
        // Defaults on unit components: 1 + 3 + 1 + 2 = 7.
        let t = total_loss(&seg, Some(&one), Some(&one), Some(&one), &LossWeights::default())
            .unwrap();
        assert_eq!(t.item(), 7.0);
    }

    #[test]
    fn total_loss_is_linear_superposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let w = LossWeights { beta: 2.5, gamma1: 0.7, gamma2 : 1.3 };
        for _ in 0..20 {
            let vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ts: Vec<Tensor> = vals.iter().map(|&v| Tensor::scalar(v)).collect();
            let total = total_loss(&ts[0], Some(&ts[1]), Some(&ts[2]), Some(&ts[3]), &w).unwrap();
            let want = vals[0] + w.beta * vals[1] + w.gamma1 * vals[2] + w.gamma2 * vals[3];
            assert!((total.item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_gradient_is_weighted_sum() {
        let x = Tensor::new(vec![3], vec![0.4, -0.2, 1.1]).unwrap();
        let w = LossWeights::default();
        let err = finite_diff_check(
            |t| {
                let seg = t.mul(t)?.reduce_sum(None)?;
                let rl = t.reduce_sum(None)?;
                let ce = t.exp().reduce_sum(None)?;
                let cd = t.reduce_mean(None)?;
                total_loss(&seg, Some(&rl), Some(&ce), Some(&cd), &w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(3e-4, 0, 100, 0.9).unwrap(), 3e-4);
        assert_eq!(poly_lr(3e-4, 100, 100, 0.9).unwrap(), 0.0);
        let mid = poly_lr(3e-4, 50, 100, 0.9).unwrap();
        assert!((mid - 3e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((mid - 1.6077e-4).abs() < 5e-8); // 1.607660e-4
        assert!(poly_lr(3e-4, 0, 0, 0.9).is_err());
    }

    #[test]
    fn poly_lr_is_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for it in 0..=50 {
            let lr = poly_lr(1e-3, it, 50, 0.9).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity() {
        let student = Student::init(StudentConfig::cnn_default(4, 0)).unwrap();
        let mut params = student.params;
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut opt = OptimizerState::new(&params, 1e-3);
        opt.weight_decay = 0.0;
        for (_, t) in params.iter() {
            t.accumulate_grad(&vec![0.0; t.len()]);
        }
        opt.step(&mut params, 1e-3).unwrap();
        for ((_, t), want) in params.iter().zip(&before) {
            assert_eq!(t.data(), &want[..]);
        }
    }

    #[test]
    fn adamw_single_step_hand_value() {
        // p = 1, g = 1, wd = 0, lr = 0.1: bias-corrected m_hat = v_hat = 1,
        // so p' = 1 - 0.1 * 1/(1 + eps) ~ 0.9.
        let mut params = Params::from_entries(vec![(
            "p".to_string(),
            Tensor::param(vec![1], vec![1.0]).unwrap(),
        )]);
        let mut opt = OptimizerState::new(&params, 0.1);
        opt.weight_decay = 0.0;
        params.get("p").unwrap().accumulate_grad(&[1.0]);
        opt.step(&mut params, 0.1).unwrap();
        let got = params.get("p").unwrap().data()[0];
        assert!((got - 0.9).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn adamw_missing_gradient_errors() {
        let mut params = Params::from_entries(vec![(
            "p".to_string(),
            Tensor::param(vec![1], vec![1.0]).unwrap(),
        )]);
        let mut opt = OptimizerState::new(&params, 0.1);
        assert!(matches!(
            opt.step(&mut params, 0.1),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn adamw_converges_on_scalar_quadratic() {
        // f(p) = p^2 from p = 1 at lr = 0.05 reaches |p| < 1e-3 within 500 steps.
        let mut params = Params::from_entries(vec![(
            "p".to_string(),
            Tensor::param(vec![1], vec![1.0]).unwrap(),
        )]);
        let mut opt = OptimizerState::new(&params, 0.05);
        opt.weight_decay = 0.0;
        let mut reached = None;
        for step in 0..500 {
            let p = params.get("p").unwrap().clone();
            let loss = p.mul(&p).unwrap().reduce_sum(None).unwrap();
            loss.backward().unwrap();
            opt.step(&mut params, 0.05).unwrap();
            if params.get("p").unwrap().data()[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "did not converge within 500 steps");
    }

    #[test]
    fn adamw_step_is_deterministic() {
        let make = || {
            let mut params = Params::from_entries(vec![(
                "p".to_string(),
                Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
            )]);
            let mut opt = OptimizerState::new(&params, 0.01);
            params.get("p").unwrap().accumulate_grad(&[0.3, -0.1, 0.9]);
            opt.step(&mut params, 0.01).unwrap();
            params.get("p").unwrap().data().to_vec()
        };
        assert_eq!(make(), make());
    }
}
