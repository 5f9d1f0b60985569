//! Two-branch discriminator over pooled RoI features.
//!
//! The adversarial branch (`in → h1 → h2 → 1`, sigmoid) scores how much a
//! feature looks like a real large object. The perception branch
//! (`in → h1 → h2`, then sibling classification and box-regression heads)
//! is the detection head. The branches share no parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, sigmoid, softmax, Linear, ParamMut, ParamRef, ParamSet, Real,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Widths of the two hidden fully connected layers of each branch.
    pub hidden: [usize; 2],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: [4096, 1024],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config(
                "discriminator widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden activations of a two-layer ReLU trunk.
pub struct TrunkTape<T> {
    input: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    n: usize,
}

fn trunk_forward<T: Real>(
    fc1: &Linear<T>,
    fc2: &Linear<T>,
    x: &[T],
    n: usize,
) -> Result<TrunkTape<T>> {
    let mut h1 = fc1.forward(x, n)?;
    relu_inplace(&mut h1);
    let mut h2 = fc2.forward(&h1, n)?;
    relu_inplace(&mut h2);
    Ok(TrunkTape {
        input: x.to_vec(),
        h1,
        h2,
        n,
    })
}

fn trunk_backward<T: Real>(
    fc1: &Linear<T>,
    fc2: &Linear<T>,
    tape: &TrunkTape<T>,
    mut g_h2: Vec<T>,
    need_input_grad: bool,
    g1: &mut Linear<T>,
    g2: &mut Linear<T>,
) -> Option<Vec<T>> {
    relu_backward(&tape.h2, &mut g_h2);
    let mut g_h1 = fc2
        .backward(&tape.h1, &g_h2, tape.n, true, g2)
        .expect("input grad");
    relu_backward(&tape.h1, &mut g_h1);
    fc1.backward(&tape.input, &g_h1, tape.n, need_input_grad, g1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBranch<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub out: Linear<T>,
}

pub struct AdversarialTape<T> {
    trunk: TrunkTape<T>,
    probs: Vec<T>,
}

impl<T: Real> AdversarialBranch<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        config: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Self {
        let [a, b] = config.hidden;
        Self {
            fc1: Linear::xavier(in_features, a, rng),
            fc2: Linear::xavier(a, b, rng),
            out: Linear::xavier(b, 1, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features
    }

    /// Probabilities in (0, 1) for `n` flattened features.
    pub fn forward(&self, x: &[T], n: usize) -> Result<(Vec<T>, AdversarialTape<T>)> {
        let trunk = trunk_forward(&self.fc1, &self.fc2, x, n)?;
        let logits = self.out.forward(&trunk.h2, n)?;
        let probs: Vec<T> = logits.into_iter().map(sigmoid).collect();
        Ok((probs.clone(), AdversarialTape { trunk, probs }))
    }

    /// `grad_prob[i]` is dL/dD_i. Returns the input gradient when requested.
    pub fn backward(
        &self,
        tape: &AdversarialTape<T>,
        grad_prob: &[T],
        need_input_grad: bool,
        grads: &mut AdversarialBranch<T>,
    ) -> Option<Vec<T>> {
        let g_logit: Vec<T> = grad_prob
            .iter()
            .zip(&tape.probs)
            .map(|(g, p)| *g * *p * (T::one() - *p))
            .collect();
        let g_h2 = self
            .out
            .backward(&tape.trunk.h2, &g_logit, tape.trunk.n, true, &mut grads.out)
            .expect("input grad");
        trunk_backward(
            &self.fc1,
            &self.fc2,
            &tape.trunk,
            g_h2,
            need_input_grad,
            &mut grads.fc1,
            &mut grads.fc2,
        )
    }
}

impl<T: Real> ParamSet<T> for AdversarialBranch<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.fc1.collect("adversarial.fc1", &mut out);
        self.fc2.collect("adversarial.fc2", &mut out);
        self.out.collect("adversarial.out", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.fc1.collect_mut("adversarial.fc1", &mut out);
        self.fc2.collect_mut("adversarial.fc2", &mut out);
        self.out.collect_mut("adversarial.out", &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionBranch<T> {
    pub num_classes: usize,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    /// `K + 1` logits, index 0 is background.
    pub cls: Linear<T>,
    /// `4K` offsets, `(r_x, r_y, r_w, r_h)` per foreground class.
    pub reg: Linear<T>,
}

/// Classification probabilities and per-class box offsets for one feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionOutput<T> {
    pub class_probs: Vec<T>,
    pub offsets: Vec<[T; 4]>,
}

impl<T: Real> PerceptionOutput<T> {
    /// Offsets for foreground class `k` in `[1, K]`.
    pub fn offsets_for(&self, k: usize) -> [T; 4] {
        self.offsets[k - 1]
    }
}

pub struct PerceptionTape<T> {
    trunk: TrunkTape<T>,
}

/// Batched perception outputs: `probs` is `n × (K+1)`, `offsets` is `n × 4K`.
pub struct PerceptionBatch<T> {
    pub n: usize,
    pub num_classes: usize,
    pub probs: Vec<T>,
    pub offsets: Vec<T>,
}

impl<T: Real> PerceptionBatch<T> {
    pub fn probs_of(&self, i: usize) -> &[T] {
        let k1 = self.num_classes + 1;
        &self.probs[i * k1..(i + 1) * k1]
    }

    pub fn offsets_of(&self, i: usize, class: usize) -> [T; 4] {
        let base = i * 4 * self.num_classes + 4 * (class - 1);
        [
            self.offsets[base],
            self.offsets[base + 1],
            self.offsets[base + 2],
            self.offsets[base + 3],
        ]
    }

    pub fn output(&self, i: usize) -> PerceptionOutput<T> {
        PerceptionOutput {
            class_probs: self.probs_of(i).to_vec(),
            offsets: (1..=self.num_classes)
                .map(|k| self.offsets_of(i, k))
                .collect(),
        }
    }
}

impl<T: Real> PerceptionBranch<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        num_classes: usize,
        config: &DiscriminatorConfig,
        rng: &mut R,
    ) -> Self {
        let [a, b] = config.hidden;
        Self {
            num_classes,
            fc1: Linear::xavier(in_features, a, rng),
            fc2: Linear::xavier(a, b, rng),
            cls: Linear::xavier(b, num_classes + 1, rng),
            reg: Linear::xavier(b, 4 * num_classes, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features
    }

    pub fn forward(&self, x: &[T], n: usize) -> Result<(PerceptionBatch<T>, PerceptionTape<T>)> {
        let trunk = trunk_forward(&self.fc1, &self.fc2, x, n)?;
        let logits = self.cls.forward(&trunk.h2, n)?;
        let offsets = self.reg.forward(&trunk.h2, n)?;
        let probs = logits
            .chunks_exact(self.num_classes + 1)
            .flat_map(softmax)
            .collect();
        Ok((
            PerceptionBatch {
                n,
                num_classes: self.num_classes,
                probs,
                offsets,
            },
            PerceptionTape { trunk },
        ))
    }

    /// Takes gradients w.r.t. the classification logits and the raw offsets.
    pub fn backward(
        &self,
        tape: &PerceptionTape<T>,
        grad_logits: &[T],
        grad_offsets: &[T],
        need_input_grad: bool,
        grads: &mut PerceptionBranch<T>,
    ) -> Option<Vec<T>> {
        let n = tape.trunk.n;
        let mut g_h2 = self
            .cls
            .backward(&tape.trunk.h2, grad_logits, n, true, &mut grads.cls)
            .expect("input grad");
        let g_reg = self
            .reg
            .backward(&tape.trunk.h2, grad_offsets, n, true, &mut grads.reg)
            .expect("input grad");
        crate::nn::add_into(&mut g_h2, &g_reg);
        trunk_backward(
            &self.fc1,
            &self.fc2,
            &tape.trunk,
            g_h2,
            need_input_grad,
            &mut grads.fc1,
            &mut grads.fc2,
        )
    }
}

impl<T: Real> ParamSet<T> for PerceptionBranch<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.fc1.collect("perception.fc1", &mut out);
        self.fc2.collect("perception.fc2", &mut out);
        self.cls.collect("perception.cls", &mut out);
        self.reg.collect("perception.reg", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.fc1.collect_mut("perception.fc1", &mut out);
        self.fc2.collect_mut("perception.fc2", &mut out);
        self.cls.collect_mut("perception.cls", &mut out);
        self.reg.collect_mut("perception.reg", &mut out);
        out
    }
}

/// Single-feature adversarial probability.
pub fn adversarial_forward<T: Real>(feature: &[T], params: &AdversarialBranch<T>) -> Result<T> {
    check_dim(feature.len(), params.in_features())?;
    Ok(params.forward(feature, 1)?.0[0])
}

/// Single-feature perception output.
pub fn perception_forward<T: Real>(
    feature: &[T],
    params: &PerceptionBranch<T>,
) -> Result<PerceptionOutput<T>> {
    check_dim(feature.len(), params.in_features())?;
    Ok(params.forward(feature, 1)?.0.output(0))
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "discriminator expects {want} flattened values, got {got}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig { hidden: [16, 8] }
    }

    #[test]
    fn zero_adversarial_weights_give_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AdversarialBranch::<f64>::new(12, &small(), &mut rng).zeroed();
        assert_eq!(adversarial_forward(&[0.3; 12], &a).unwrap(), 0.5);
    }

    #[test]
    fn zero_perception_weights_give_uniform_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PerceptionBranch::<f64>::new(12, 3, &small(), &mut rng).zeroed();
        let out = perception_forward(&[1.0; 12], &p).unwrap();
        assert_eq!(out.class_probs, vec![0.25; 4]);
        assert_eq!(out.offsets.len(), 3);
        assert_eq!(out.offsets.len() * 4, 12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AdversarialBranch::<f32>::new(12, &small(), &mut rng);
        let p = PerceptionBranch::<f32>::new(12, 2, &small(), &mut rng);
        assert!(adversarial_forward(&[0.0; 11], &a).is_err());
        assert!(perception_forward(&[0.0; 13], &p).is_err());
    }

    #[test]
    fn branches_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = AdversarialBranch::<f64>::new(6, &small(), &mut rng);
        let p1 = PerceptionBranch::<f64>::new(6, 2, &small(), &mut rng);
        let p2 = PerceptionBranch::<f64>::new(6, 2, &small(), &mut rng);
        let a2 = AdversarialBranch::<f64>::new(6, &small(), &mut rng);
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        // the two parameter sets are separate types; output of one cannot
        // depend on the other, check the outputs only depend on their own set
        assert_eq!(
            adversarial_forward(&x, &a).unwrap(),
            adversarial_forward(&x, &a).unwrap()
        );
        assert_ne!(
            adversarial_forward(&x, &a).unwrap(),
            adversarial_forward(&x, &a2).unwrap()
        );
        assert_ne!(
            perception_forward(&x, &p1).unwrap(),
            perception_forward(&x, &p2).unwrap()
        );
    }
}
