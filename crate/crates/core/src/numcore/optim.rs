//! SGD with momentum, layer-wise trust-ratio scaling (LARS), and the
//! warmup + cosine learning-rate schedule. The schedule is per step:
//! a linear ramp from 0 to `lr_peak` over the warmup epochs, then a single
//! cosine decay to 0 at the final step (no restarts).

use crate::error::{Error, Result};
use crate::numcore::special::det_cos;
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    SgdMomentum,
    Lars,
}

pub struct OptimState {
    pub kind: OptimKind,
    pub lr_peak: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: u32,
    pub total_epochs: u32,
    /// One momentum buffer per parameter tensor, same order as `params`.
    buffers: Vec<Vec<f32>>,
}

/// Learning rate at `step` (0-based) out of `total_epochs * steps_per_epoch`.
pub fn lr_at(
    lr_peak: f32,
    warmup_epochs: u32,
    total_epochs: u32,
    step: u64,
    steps_per_epoch: u64,
) -> Result<f32> {
    if steps_per_epoch == 0 {
        return Err(Error::InvalidArgument("lr_at: steps_per_epoch must be positive".into()));
    }
    if warmup_epochs >= total_epochs {
        return Err(Error::InvalidArgument(
            "lr_at: warmup must be shorter than the schedule".into(),
        ));
    }
    let total = total_epochs as u64 * steps_per_epoch;
    if step >= total {
        return Err(Error::InvalidArgument(format!(
            "lr_at: step {step} outside schedule of {total} steps"
        )));
    }
    let warm = warmup_epochs as u64 * steps_per_epoch;
    if step < warm {
        return Ok(lr_peak * (step as f64 / warm as f64) as f32);
    }
    let span = (total - 1 - warm).max(1) as f64;
    let t = (step - warm) as f64 / span;
    Ok((lr_peak as f64 * 0.5 * (1.0 + det_cos(std::f64::consts::PI * t))) as f32)
}

impl OptimState {
    pub fn new(
        kind: OptimKind,
        lr_peak: f32,
        momentum: f32,
        weight_decay: f32,
        warmup_epochs: u32,
        total_epochs: u32,
        params: &[Tensor],
    ) -> Self {
        OptimState {
            kind,
            lr_peak,
            momentum,
            weight_decay,
            warmup_epochs,
            total_epochs,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn lr_at(&self, step: u64, steps_per_epoch: u64) -> Result<f32> {
        lr_at(self.lr_peak, self.warmup_epochs, self.total_epochs, step, steps_per_epoch)
    }

    /// Momentum buffers, one per parameter, in the order the parameters were
    /// given to [`OptimState::new`].
    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }

    /// Replaces the momentum buffers with ones captured by [`buffers`],
    /// e.g. when resuming training from a saved state.
    ///
    /// [`buffers`]: OptimState::buffers
    pub fn set_buffers(&mut self, buffers: Vec<Vec<f32>>) -> Result<()> {
        if buffers.len() != self.buffers.len() {
            return Err(Error::InvalidArgument(format!(
                "set_buffers: {} buffers for {} parameters",
                buffers.len(),
                self.buffers.len()
            )));
        }
        for (new, old) in buffers.iter().zip(&self.buffers) {
            if new.len() != old.len() {
                return Err(Error::Shape(format!(
                    "set_buffers: buffer of {} values where {} are expected",
                    new.len(),
                    old.len()
                )));
            }
        }
        self.buffers = buffers;
        Ok(())
    }

    /// One update over all parameters. Every parameter must carry a gradient
    /// from a preceding `backward()`.
    pub fn step(&mut self, params: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != self.buffers.len() {
            return Err(Error::InvalidArgument(format!(
                "optim_step: {} params but {} buffers",
                params.len(),
                self.buffers.len()
            )));
        }
        for (p, buf) in params.iter().zip(self.buffers.iter_mut()) {
            let grad = p.grad().ok_or_else(|| {
                Error::InvalidArgument("optim_step: parameter missing gradient".into())
            })?;
            if grad.len() != buf.len() {
                return Err(Error::Shape("optim_step: gradient size mismatch".into()));
            }
            let wd = self.weight_decay;
            let mom = self.momentum;
            let kind = self.kind;
            p.update_data(|w| {
                let mut g_eff: Vec<f32> = grad.clone();
                if wd != 0.0 {
                    for (g, wi) in g_eff.iter_mut().zip(w.iter()) {
                        *g += wd * *wi;
                    }
                }
                let scale = match kind {
                    OptimKind::SgdMomentum => 1.0f32,
                    OptimKind::Lars => {
                        let mut wn = 0.0f64;
                        let mut gn = 0.0f64;
                        for wi in w.iter() {
                            wn += *wi as f64 * *wi as f64;
                        }
                        for g in g_eff.iter() {
                            gn += *g as f64 * *g as f64;
                        }
                        if wn > 0.0 && gn > 0.0 {
                            (wn.sqrt() / gn.sqrt()) as f32
                        } else {
                            1.0
                        }
                    }
                };
                for ((wi, b), g) in w.iter_mut().zip(buf.iter_mut()).zip(g_eff.iter()) {
                    *b = mom * *b + scale * g;
                    *wi -= lr * *b;
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_loss_grad(x: &Tensor) {
        let y = x.mul(x).sum();
        y.backward().unwrap();
    }

    #[test]
    fn sgd_step_on_square() {
        let x = Tensor::param(vec![1], vec![1.0]);
        let mut opt = OptimState::new(OptimKind::SgdMomentum, 0.1, 0.0, 0.0, 1, 10, &[x.clone()]);
        square_loss_grad(&x);
        opt.step(&[x.clone()], 0.1).unwrap();
        assert_eq!(x.to_vec()[0], 0.8);
    }

    #[test]
    fn lars_equals_sgd_when_trust_ratio_is_one() {
        // w has unit norm and the gradient of sum(w . k) is k, also unit
        // norm, so the trust ratio is exactly 1.
        let k = vec![0.6f32, 0.8];
        let run = |kind: OptimKind| {
            let w = Tensor::param(vec![2], vec![0.6, 0.8]);
            let mut opt = OptimState::new(kind, 0.05, 0.9, 0.0, 1, 10, &[w.clone()]);
            for _ in 0..3 {
                let kt = Tensor::from_vec(vec![2], k.clone());
                let loss = w.mul(&kt).sum();
                loss.backward().unwrap();
                opt.step(&[w.clone()], 0.05).unwrap();
            }
            w.to_vec()
        };
        // Momentum accumulates, but the gradient stays k (constant), so the
        // ratio stays 1 only on the first step; compare a single step.
        let one = |kind: OptimKind| {
            let w = Tensor::param(vec![2], vec![0.6, 0.8]);
            let mut opt = OptimState::new(kind, 0.05, 0.0, 0.0, 1, 10, &[w.clone()]);
            let kt = Tensor::from_vec(vec![2], k.clone());
            let loss = w.mul(&kt).sum();
            loss.backward().unwrap();
            opt.step(&[w.clone()], 0.05).unwrap();
            w.to_vec()
        };
        assert_eq!(one(OptimKind::Lars), one(OptimKind::SgdMomentum));
        // And multi-step runs stay finite and deterministic.
        assert_eq!(run(OptimKind::Lars), run(OptimKind::Lars));
    }

    #[test]
    fn zero_grad_zero_buffer_leaves_params_unchanged() {
        let w = Tensor::param(vec![3], vec![1.0, -2.0, 3.0]);
        let mut opt = OptimState::new(OptimKind::Lars, 0.1, 0.9, 0.0, 1, 10, &[w.clone()]);
        let zero = Tensor::from_vec(vec![3], vec![0.0; 3]);
        let loss = w.mul(&zero).sum();
        loss.backward().unwrap();
        opt.step(&[w.clone()], 0.1).unwrap();
        assert_eq!(w.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]);
        let mut opt = OptimState::new(OptimKind::SgdMomentum, 0.1, 0.9, 0.0, 1, 10, &[w.clone()]);
        assert!(opt.step(&[w], 0.1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let peak = 0.4f32;
        // End of warmup hits the peak exactly.
        let lr = lr_at(peak, 10, 30, 10 * 50, 50).unwrap();
        assert_eq!(lr, peak);
        // Ramp is linear from zero.
        assert_eq!(lr_at(peak, 10, 30, 0, 50).unwrap(), 0.0);
        let quarter = lr_at(peak, 10, 30, 125, 50).unwrap();
        assert!((quarter - peak * 0.25).abs() < 1e-7);
        // Halfway through the cosine span: half the peak.
        let warm = 10 * 50u64;
        let total = 30 * 50u64;
        let mid = warm + (total - 1 - warm) / 2;
        let lr_mid = lr_at(peak, 10, 30, mid, 50).unwrap();
        assert!((lr_mid - 0.5 * peak).abs() / peak < 1e-2, "mid lr {lr_mid}");
        // Final step decays to (numerically) zero.
        let lr_end = lr_at(peak, 10, 30, total - 1, 50).unwrap();
        assert!(lr_end <= 1e-6 * peak, "final lr {lr_end}");
    }

    #[test]
    fn schedule_domain_errors() {
        assert!(lr_at(0.1, 10, 30, 30 * 50, 50).is_err());
        assert!(lr_at(0.1, 10, 30, 10, 0).is_err());
        assert!(lr_at(0.1, 30, 30, 0, 50).is_err());
    }

    #[test]
    fn schedule_is_monotone_up_then_down() {
        let mut prev = -1.0f32;
        let mut peaked = false;
        for step in 0..300u64 {
            let lr = lr_at(1.0, 2, 6, step, 50).unwrap();
            if !peaked && lr < prev {
                peaked = true;
            }
            if peaked {
                assert!(lr <= prev + 1e-9, "rose after peak at step {step}");
            }
            prev = lr;
        }
        assert!(peaked);
    }
}
