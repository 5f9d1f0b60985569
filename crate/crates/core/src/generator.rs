//! Conditional residual generator.
//!
//! The generator reads a low-level pooled feature `f` of a proposal and emits
//! a residual with the conv5 channel count. Adding the residual to the
//! proposal's conv5 pooled feature gives the super-resolved representation.
//!
//! Layout: 3x3 conv + ReLU, 1x1 conv + ReLU (to conv5 width), then `B`
//! residual blocks of `conv-BN-ReLU-conv-BN` with identity skips. The last
//! block emits its branch directly (no second BN, no skip), so zeroing that
//! block's second convolution yields an exactly zero residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Level;
use crate::nn::{
    relu_backward, relu_inplace, Batch, BatchNorm, BnCache, Conv2d, ParamMut, ParamRef, ParamSet,
    Real,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_residual_blocks: usize,
    /// Pyramid level the conditioning feature `f` is pooled from.
    pub input_level: Level,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_residual_blocks: 6,
            input_level: Level::Conv1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_residual_blocks < 1 {
            return Err(Error::Config(
                "generator needs at least one residual block".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running moments are updated.
    Train,
    /// Running moments.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv_a: Conv2d<T>,
    pub bn_a: BatchNorm<T>,
    pub conv_b: Conv2d<T>,
    /// Absent on the final block.
    pub bn_b: Option<BatchNorm<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub adapter3: Conv2d<T>,
    pub adapter1: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
}

struct BlockTape<T> {
    input: Batch<T>,
    bn_a: BnCache<T>,
    act: Batch<T>,
    bn_b: Option<BnCache<T>>,
}

/// Activations saved by a train-mode forward.
pub struct GeneratorTape<T> {
    input: Batch<T>,
    a3: Batch<T>,
    blocks: Vec<BlockTape<T>>,
}

impl<T: Real> Generator<T> {
    /// Xavier-initialised, with the final convolution zeroed so the
    /// generator starts as the zero mapping.
    pub fn new<R: Rng + ?Sized>(
        config: &GeneratorConfig,
        in_channels: usize,
        conv5_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = conv5_channels;
        let b = config.num_residual_blocks;
        let blocks = (0..b)
            .map(|i| {
                let last = i + 1 == b;
                ResBlock {
                    conv_a: Conv2d::xavier(c, c, 3, 1, rng),
                    bn_a: BatchNorm::new(c),
                    conv_b: if last {
                        Conv2d::zeros(c, c, 3, 1)
                    } else {
                        Conv2d::xavier(c, c, 3, 1, rng)
                    },
                    bn_b: (!last).then(|| BatchNorm::new(c)),
                }
            })
            .collect();
        Ok(Self {
            in_channels,
            out_channels: c,
            adapter3: Conv2d::xavier(in_channels, in_channels, 3, 1, rng),
            adapter1: Conv2d::xavier(in_channels, c, 1, 1, rng),
            blocks,
        })
    }

    /// Zeroes the final convolution (kernel and bias).
    pub fn zero_output_path(&mut self) {
        if let Some(last) = self.blocks.last_mut() {
            last.conv_b.weight.iter_mut().for_each(|v| *v = T::zero());
            last.conv_b.bias.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check(&self, f: &Batch<T>) -> Result<()> {
        if f.c != self.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {}",
                self.in_channels, f.c
            )));
        }
        if f.n == 0 {
            return Err(Error::Shape("generator called on an empty batch".into()));
        }
        Ok(())
    }

    fn adapt(&self, f: &Batch<T>) -> Result<(Batch<T>, Batch<T>)> {
        let mut a3 = self.adapter3.forward(f)?;
        relu_inplace(&mut a3.data);
        let mut h = self.adapter1.forward(&a3)?;
        relu_inplace(&mut h.data);
        Ok((a3, h))
    }

    /// Eval-mode residual; pure.
    pub fn residual(&self, f: &Batch<T>) -> Result<Batch<T>> {
        self.check(f)?;
        let (_, mut h) = self.adapt(f)?;
        for blk in &self.blocks {
            let u = blk.conv_a.forward(&h)?;
            let mut a = blk.bn_a.forward_eval(&u)?;
            relu_inplace(&mut a.data);
            let p = blk.conv_b.forward(&a)?;
            h = match &blk.bn_b {
                Some(bn) => {
                    let mut q = bn.forward_eval(&p)?;
                    crate::nn::add_into(&mut q.data, &h.data);
                    q
                }
                None => p,
            };
        }
        Ok(h)
    }

    /// Train-mode residual; updates batch-norm running moments and returns
    /// the tape for [`Generator::backward`].
    pub fn residual_train(&mut self, f: &Batch<T>) -> Result<(Batch<T>, GeneratorTape<T>)> {
        self.check(f)?;
        let (a3, mut h) = self.adapt(f)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for blk in &mut self.blocks {
            let u = blk.conv_a.forward(&h)?;
            let (mut a, bn_a) = blk.bn_a.forward_train(&u)?;
            relu_inplace(&mut a.data);
            let p = blk.conv_b.forward(&a)?;
            let (out, bn_b) = match blk.bn_b.as_mut() {
                Some(bn) => {
                    let (mut q, cache) = bn.forward_train(&p)?;
                    crate::nn::add_into(&mut q.data, &h.data);
                    (q, Some(cache))
                }
                None => (p, None),
            };
            tapes.push(BlockTape {
                input: std::mem::replace(&mut h, out),
                bn_a,
                act: a,
                bn_b,
            });
        }
        Ok((
            h,
            GeneratorTape {
                input: f.clone(),
                a3,
                blocks: tapes,
            },
        ))
    }

    pub fn forward(&mut self, f: &Batch<T>, mode: Mode) -> Result<Batch<T>> {
        match mode {
            Mode::Train => self.residual_train(f).map(|(r, _)| r),
            Mode::Eval => self.residual(f),
        }
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the residual.
    pub fn backward(&self, tape: &GeneratorTape<T>, grad_residual: &Batch<T>) -> Generator<T> {
        let mut grads = self.zeroed();
        let mut g = grad_residual.clone();
        for (i, (blk, t)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[i];
            let g_p = match (&blk.bn_b, &t.bn_b) {
                (Some(bn), Some(cache)) => {
                    bn.backward(cache, &g, gb.bn_b.as_mut().expect("same layout"))
                }
                _ => g.clone(),
            };
            let mut g_a = blk
                .conv_b
                .backward(&t.act, &g_p, true, &mut gb.conv_b)
                .expect("input grad");
            relu_backward(&t.act.data, &mut g_a.data);
            let g_u = blk.bn_a.backward(&t.bn_a, &g_a, &mut gb.bn_a);
            let g_h = blk
                .conv_a
                .backward(&t.input, &g_u, true, &mut gb.conv_a)
                .expect("input grad");
            if blk.bn_b.is_some() {
                crate::nn::add_into(&mut g.data, &g_h.data);
            } else {
                g = g_h;
            }
        }
        // adapter output h0 is the first block input
        let h0 = &tape.blocks[0].input;
        relu_backward(&h0.data, &mut g.data);
        let mut g_a3 = self
            .adapter1
            .backward(&tape.a3, &g, true, &mut grads.adapter1)
            .expect("input grad");
        relu_backward(&tape.a3.data, &mut g_a3.data);
        self.adapter3
            .backward(&tape.input, &g_a3, false, &mut grads.adapter3);
        grads
    }
}

impl<T: Real> ParamSet<T> for Generator<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.adapter3.collect("generator.adapter3", &mut out);
        self.adapter1.collect("generator.adapter1", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv_a
                .collect(&format!("generator.block{i}.conv_a"), &mut out);
            b.bn_a
                .collect(&format!("generator.block{i}.bn_a"), &mut out);
            b.conv_b
                .collect(&format!("generator.block{i}.conv_b"), &mut out);
            if let Some(bn) = &b.bn_b {
                bn.collect(&format!("generator.block{i}.bn_b"), &mut out);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.adapter3.collect_mut("generator.adapter3", &mut out);
        self.adapter1.collect_mut("generator.adapter1", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv_a
                .collect_mut(&format!("generator.block{i}.conv_a"), &mut out);
            b.bn_a
                .collect_mut(&format!("generator.block{i}.bn_a"), &mut out);
            b.conv_b
                .collect_mut(&format!("generator.block{i}.conv_b"), &mut out);
            if let Some(bn) = &mut b.bn_b {
                bn.collect_mut(&format!("generator.block{i}.bn_b"), &mut out);
            }
        }
        out
    }
}

/// Element-wise sum of a base feature batch and a residual batch.
pub fn super_resolve<T: Real>(base: &Batch<T>, residual: &Batch<T>) -> Result<Batch<T>> {
    if !base.same_shape(residual) {
        return Err(Error::Shape(format!(
            "super_resolve: base {}x{}x{}x{} vs residual {}x{}x{}x{}",
            base.n, base.c, base.h, base.w, residual.n, residual.c, residual.h, residual.w
        )));
    }
    let mut out = base.clone();
    crate::nn::add_into(&mut out.data, &residual.data);
    Ok(out)
}
