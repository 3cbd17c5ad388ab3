//! Adam with bias correction and a cosine-annealed learning rate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine_lr", "schedule length is zero"));
    }
    if t > total {
        return Err(Error::invalid(
            "cosine_lr",
            format!("step {t} is past the schedule end {total}"),
        ));
    }
    let phase = PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone)]
struct Moments<T> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state for the gradient-trained tensors of one parameter set.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> TrainState<T> {
    pub fn new<P: ParamSet<T> + ?Sized>(params: &P) -> Self {
        let mut moments = Vec::new();
        params.visit(&mut |name, t| {
            if t.requires_grad() {
                moments.push(Moments {
                    name: name.to_string(),
                    m: vec![T::zero(); t.numel()],
                    v: vec![T::zero(); t.numel()],
                });
            }
        });
        Self { step: 0, moments }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored on the tensors; a tensor without
    /// a gradient counts as zero gradient.
    pub fn adam_step<P: ParamSet<T> + ?Sized>(&mut self, params: &mut P, lr: f64) -> Result<()> {
        // validate first so a mismatch leaves both sides untouched
        let mut seen = 0;
        let mut check = Ok(());
        params.visit(&mut |name, t| {
            if !t.requires_grad() || check.is_err() {
                return;
            }
            match self.moments.get(seen) {
                Some(mo) if mo.name == name && mo.m.len() == t.numel() => {}
                _ => {
                    check = Err(Error::invalid(
                        "adam_step",
                        format!("optimizer state does not match parameter `{name}`"),
                    ))
                }
            }
            seen += 1;
        });
        check?;
        if seen != self.moments.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "state tracks {} tensors, parameters have {seen}",
                    self.moments.len()
                ),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::lit(1.0 - BETA1.powi(t));
        let c2 = T::lit(1.0 - BETA2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
        let mut idx = 0;
        let moments = &mut self.moments;
        params.visit_mut(&mut |_, p| {
            if !p.requires_grad() {
                return;
            }
            let mo = &mut moments[idx];
            idx += 1;
            let grad = p.grad().map(<[T]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = grad.as_ref().map_or(T::zero(), |g| g[i]);
                mo.m[i] = b1 * mo.m[i] + (T::one() - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (T::one() - b2) * gi * gi;
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
