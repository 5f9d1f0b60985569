//! Analytic gradients against central finite differences, in f64.

use pgan::discriminator::{AdversarialBranch, DiscriminatorConfig, PerceptionBranch};
use pgan::features::{Backbone, BackboneConfig, Level};
use pgan::generator::{Generator, GeneratorConfig};
use pgan::losses::{self, RegressionTarget};
use pgan::nn::{softmax, Batch, Conv2d, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Compares every parameter of `model` against central differences of
/// `loss`, and returns the worst relative error.
fn check_params<P: ParamSet<f64>>(model: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> f64 {
    check_params_where(model, analytic, loss, |_, _| true)
}

/// Like [`check_params`], but skips coordinates for which `smooth` reports
/// that the two probes straddle a kink. At most 5% may be skipped.
fn check_params_where<P: ParamSet<f64>>(
    model: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    smooth: impl Fn(&P, &P) -> bool,
) -> f64 {
    let names: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.data.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic.params().iter().map(|p| p.data.to_vec()).collect();
    let kinds: Vec<_> = model
        .params()
        .iter()
        .map(|p| (p.kind, p.name.clone()))
        .collect();
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (i, len) in names {
        if kinds[i].0 == pgan::nn::ParamKind::Buffer {
            continue;
        }
        for j in 0..len {
            let mut plus = model.clone();
            plus.params_mut()[i].data[j] += STEP;
            let mut minus = model.clone();
            minus.params_mut()[i].data[j] -= STEP;
            if !smooth(&plus, &minus) {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let e = rel_err(grads[i][j], numeric);
            assert!(
                e < TOL,
                "{}[{j}]: analytic {} numeric {numeric} (rel {e})",
                kinds[i].1,
                grads[i][j]
            );
            worst = worst.max(e);
        }
    }
    assert!(
        skipped * 20 <= checked + skipped,
        "{skipped} of {} coordinates straddle a kink",
        checked + skipped
    );
    worst
}

/// Moves biases off zero so no unit sits exactly on a ReLU kink.
fn jitter_biases<P: ParamSet<f64>>(model: &mut P, rng: &mut ChaCha8Rng) {
    for p in model.params_mut() {
        if p.kind == pgan::nn::ParamKind::Bias {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(0.5..1.0);
            }
        }
    }
}

/// Sign pattern of every ReLU input in a train-mode generator forward.
fn relu_pattern(gen: &Generator<f64>, f: &Batch<f64>) -> Vec<bool> {
    let mut out = Vec::new();
    let relu = |b: &mut Batch<f64>, out: &mut Vec<bool>| {
        for v in b.data.iter_mut() {
            out.push(*v > 0.0);
            *v = v.max(0.0);
        }
    };
    let mut a3 = gen.adapter3.forward(f).unwrap();
    relu(&mut a3, &mut out);
    let mut h = gen.adapter1.forward(&a3).unwrap();
    relu(&mut h, &mut out);
    for blk in &gen.blocks {
        let u = blk.conv_a.forward(&h).unwrap();
        let (mut a, _) = blk.bn_a.clone().forward_train(&u).unwrap();
        relu(&mut a, &mut out);
        let p = blk.conv_b.forward(&a).unwrap();
        h = match &blk.bn_b {
            Some(bn) => {
                let (mut q, _) = bn.clone().forward_train(&p).unwrap();
                for (q, x) in q.data.iter_mut().zip(&h.data) {
                    *q += x;
                }
                q
            }
            None => p,
        };
    }
    out
}

fn check_input(x: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) {
    for j in 0..x.len() {
        let mut plus = x.to_vec();
        plus[j] += STEP;
        let mut minus = x.to_vec();
        minus[j] -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        let e = rel_err(analytic[j], numeric);
        assert!(
            e < TOL,
            "input[{j}]: analytic {} numeric {numeric} (rel {e})",
            analytic[j]
        );
    }
}

pub fn adversarial_branch_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = DiscriminatorConfig { hidden: [5, 4] };
    let branch = AdversarialBranch::<f64>::new(8, &cfg, &mut rng);
    let n = 3;
    let x = random_vec(n * 8, &mut rng);
    let coef = random_vec(n, &mut rng);
    let loss = |b: &AdversarialBranch<f64>, x: &[f64]| -> f64 {
        let (p, _) = b.forward(x, n).unwrap();
        p.iter().zip(&coef).map(|(p, c)| p * c).sum()
    };
    let (_, tape) = branch.forward(&x, n).unwrap();
    let mut grads = branch.zeroed();
    let gx = branch.backward(&tape, &coef, true, &mut grads).unwrap();
    check_params(&branch, &grads, |b| loss(b, &x));
    check_input(&x, &gx, |xx| loss(&branch, xx));
}

pub fn perception_branch_and_perceptual_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = DiscriminatorConfig { hidden: [6, 4] };
    let k = 3;
    let branch = PerceptionBranch::<f64>::new(8, k, &cfg, &mut rng);
    let n = 4;
    let x = random_vec(n * 8, &mut rng);
    let labels = [0usize, 1, 3, 2];
    let targets: Vec<RegressionTarget> = (0..n)
        .map(|_| RegressionTarget([0.3, -0.2, 1.6, -0.1]))
        .collect();
    let loss = |b: &PerceptionBranch<f64>, x: &[f64]| -> f64 {
        let (out, _) = b.forward(x, n).unwrap();
        (0..n)
            .map(|i| {
                let off = if labels[i] > 0 {
                    out.offsets_of(i, labels[i])
                } else {
                    [0.0; 4]
                };
                losses::perceptual_loss(out.probs_of(i), labels[i], off, Some(&targets[i]))
                    .unwrap()
                    .total()
            })
            .sum()
    };
    let (out, tape) = branch.forward(&x, n).unwrap();
    let mut g_logits = Vec::new();
    let mut g_off = vec![0.0; n * 4 * k];
    for i in 0..n {
        g_logits.extend(losses::cls_logit_grad(out.probs_of(i), labels[i]));
        if labels[i] > 0 {
            let g = losses::loc_grad(out.offsets_of(i, labels[i]), &targets[i]);
            let base = i * 4 * k + 4 * (labels[i] - 1);
            g_off[base..base + 4].copy_from_slice(&g);
        }
    }
    let mut grads = branch.zeroed();
    let gx = branch
        .backward(&tape, &g_logits, &g_off, true, &mut grads)
        .unwrap();
    check_params(&branch, &grads, |b| loss(b, &x));
    check_input(&x, &gx, |xx| loss(&branch, xx));
}

pub fn generator_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = GeneratorConfig {
        num_residual_blocks: 2,
        input_level: Level::Conv1,
    };
    let mut gen = Generator::<f64>::new(&cfg, 3, 4, &mut rng).unwrap();
    // give the zero-initialised output path real weights so every layer
    // receives a gradient
    let last = gen.blocks.last_mut().unwrap();
    last.conv_b = Conv2d::xavier(4, 4, 3, 1, &mut rng);
    jitter_biases(&mut gen, &mut rng);
    // batch norm is scale invariant in its input; larger incoming weights
    // flatten its curvature relative to the probe step
    for blk in &mut gen.blocks {
        let has_bn_b = blk.bn_b.is_some();
        for (conv, feeds_bn) in [(&mut blk.conv_a, true), (&mut blk.conv_b, has_bn_b)] {
            if feeds_bn {
                conv.weight.iter_mut().for_each(|w| *w *= 5.0);
            }
        }
    }
    let f = Batch {
        n: 3,
        c: 3,
        h: 3,
        w: 3,
        data: random_vec(3 * 3 * 9, &mut rng),
    };
    let coef = random_vec(3 * 4 * 9, &mut rng);
    let loss = |g: &Generator<f64>| -> f64 {
        let (r, _) = g.clone().residual_train(&f).unwrap();
        r.data.iter().zip(&coef).map(|(a, b)| a * b).sum()
    };
    let mut work = gen.clone();
    let (r, tape) = work.residual_train(&f).unwrap();
    let g_res = Batch {
        data: coef.clone(),
        ..r
    };
    let grads = gen.backward(&tape, &g_res);
    check_params_where(&gen, &grads, loss, |a, b| {
        relu_pattern(a, &f) == relu_pattern(b, &f)
    });
}

pub fn backbone_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = BackboneConfig {
        in_channels: 1,
        channels: [2, 3, 3, 4, 4],
    };
    let mut backbone = Backbone::<f64>::new(&cfg, &mut rng);
    jitter_biases(&mut backbone, &mut rng);
    let image = Batch {
        n: 1,
        c: 1,
        h: 16,
        w: 16,
        data: (0..16 * 16).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let pyr = backbone.extract_features(&image).unwrap();
    let coefs: Vec<Vec<f64>> = pyr
        .levels
        .iter()
        .map(|l| random_vec(l.data.len(), &mut rng))
        .collect();
    let loss = |b: &Backbone<f64>| -> f64 {
        let p = b.extract_features(&image).unwrap();
        p.levels
            .iter()
            .zip(&coefs)
            .map(|(l, c)| l.data.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let level_grads = pyr
        .levels
        .iter()
        .zip(&coefs)
        .map(|(l, c)| {
            Some(Batch {
                data: c.clone(),
                ..l.clone()
            })
        })
        .collect();
    let grads = backbone.backward(&image, &pyr, level_grads);
    check_params(&backbone, &grads, loss);
}

pub fn scalar_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d1 = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + STEP) - f(x - STEP)) / (2.0 * STEP);
    for _ in 0..50 {
        let a: f64 = rng.gen_range(0.05..0.95);
        let b = rng.gen_range(0.05..0.95);
        let (ga, gb) = losses::adversarial_loss_d_grad(a, b);
        assert!(rel_err(ga, d1(&|x| losses::adversarial_loss_d(x, b), a)) < TOL);
        assert!(rel_err(gb, d1(&|x| losses::adversarial_loss_d(a, x), b)) < TOL);
        assert!(
            rel_err(
                losses::adversarial_loss_g_grad(a),
                d1(&losses::adversarial_loss_g, a)
            ) < TOL
        );

        let x: f64 = rng.gen_range(-3.0..3.0);
        if (x.abs() - 1.0).abs() > 2.0 * STEP {
            assert!(rel_err(losses::smooth_l1_grad(x), d1(&losses::smooth_l1, x)) < TOL);
        }

        let logits = random_vec(4, &mut rng);
        let label = rng.gen_range(0..4);
        let p = softmax(&logits);
        let g = losses::cls_logit_grad(&p, label);
        for j in 0..4 {
            let f = |v: f64| {
                let mut l = logits.clone();
                l[j] = v;
                losses::perceptual_loss(
                    &softmax(&l),
                    label,
                    [0.0; 4],
                    Some(&RegressionTarget([0.0; 4])),
                )
                .unwrap()
                .cls
            };
            assert!(rel_err(g[j], d1(&f, logits[j])) < TOL);
        }
        let fp = |v: f64| {
            let mut q = p.clone();
            q[label] = v;
            losses::perceptual_loss(&q, label, [0.0; 4], Some(&RegressionTarget([0.0; 4])))
                .unwrap()
                .cls
        };
        assert!(rel_err(losses::cls_prob_grad(&p, label), d1(&fp, p[label])) < TOL);

        let t = RegressionTarget([rng.gen_range(-2.0..2.0), 0.1, -0.4, 0.9]);
        let off = [rng.gen_range(-2.0..2.0), -0.3, 0.2, 2.5];
        let g = losses::loc_grad(off, &t);
        for j in 0..4 {
            if ((off[j] - t.0[j]).abs() - 1.0).abs() < 2.0 * STEP {
                continue;
            }
            let f = |v: f64| {
                let mut o = off;
                o[j] = v;
                losses::perceptual_loss(&[0.5, 0.5], 1, o, Some(&t))
                    .unwrap()
                    .loc
            };
            assert!(rel_err(g[j], d1(&f, off[j])) < TOL);
        }
    }
}

mod run {
    #[test]
    fn adversarial_branch_gradients() {
        super::adversarial_branch_gradients()
    }

    #[test]
    fn perception_branch_and_perceptual_loss_gradients() {
        super::perception_branch_and_perceptual_loss_gradients()
    }

    #[test]
    fn generator_gradients() {
        super::generator_gradients()
    }

    #[test]
    fn backbone_gradients() {
        super::backbone_gradients()
    }

    #[test]
    fn scalar_loss_gradients() {
        super::scalar_loss_gradients()
    }
}
