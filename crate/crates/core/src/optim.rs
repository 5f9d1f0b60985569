//! SGD with momentum and L2 weight decay.

use crate::nn::{lit, ParamKind, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v ← μv − η(∇ + λθ)`, `θ ← θ + v`. Weight decay applies to
    /// [`ParamKind::Weight`] arrays only; buffers are left untouched.
    pub fn step<T: Real, P: ParamSet<T>>(&self, params: &mut P, grads: &P, velocity: &mut P) {
        let mu = lit::<T>(self.momentum);
        let lr = lit::<T>(self.learning_rate);
        let wd = lit::<T>(self.weight_decay);
        for ((p, g), v) in params
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(velocity.params_mut())
        {
            if p.kind == ParamKind::Buffer {
                continue;
            }
            let decay = if p.kind == ParamKind::Weight {
                wd
            } else {
                T::zero()
            };
            for ((theta, grad), vel) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
                *vel = mu * *vel - lr * (*grad + decay * *theta);
                *theta = *theta + *vel;
            }
        }
    }
}

/// Learning rate with a single 10x decay once `step` reaches two thirds of
/// `total`.
pub fn scheduled_lr(base: f64, step: usize, total: usize) -> f64 {
    let boundary = (2 * total).div_ceil(3);
    if total > 0 && step >= boundary {
        base * 0.1
    } else {
        base
    }
}
