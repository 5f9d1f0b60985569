//! Adversarial and perceptual losses, plus the box parameterization they use.
//!
//! Adversarial probabilities are clamped to `[EPS, 1 - EPS]` before every
//! logarithm; class probabilities only from below. Logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Derivative of `-ln(clamp(p))` w.r.t. `p`; zero where the clamp is active.
fn neg_log_grad(p: f64) -> f64 {
    if p > EPS && p < 1.0 - EPS {
        -1.0 / p
    } else {
        0.0
    }
}

/// `-ln D(F_l) - ln(1 - D(G(F_s)))`.
pub fn adversarial_loss_d(d_large: f64, d_gen: f64) -> f64 {
    -clamp_prob(d_large).ln() - (1.0 - clamp_prob(d_gen)).ln()
}

/// Gradient of [`adversarial_loss_d`] w.r.t. `(d_large, d_gen)`.
pub fn adversarial_loss_d_grad(d_large: f64, d_gen: f64) -> (f64, f64) {
    // d/dq of -ln(1 - q) is -(d/d(1-q)) = +1/(1-q); reuse neg_log_grad on 1 - q
    (neg_log_grad(d_large), -neg_log_grad(1.0 - d_gen))
}

/// `-ln D(G(F_s))`.
pub fn adversarial_loss_g(d_gen: f64) -> f64 {
    -clamp_prob(d_gen).ln()
}

pub fn adversarial_loss_g_grad(d_gen: f64) -> f64 {
    neg_log_grad(d_gen)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Box regression target `(r_x, r_y, r_w, r_h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget(pub [f64; 4]);

/// Scale-invariant center shift and log-space size change from `proposal`
/// to `gt`.
pub fn bbox_encode(proposal: &BBox, gt: &BBox) -> Result<RegressionTarget> {
    if !proposal.is_well_formed() || !gt.is_well_formed() {
        return Err(Error::Input(format!(
            "cannot encode {gt:?} relative to {proposal:?}: degenerate box"
        )));
    }
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let (gx, gy) = gt.center();
    Ok(RegressionTarget([
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ]))
}

/// Inverse of [`bbox_encode`].
pub fn bbox_decode(proposal: &BBox, offsets: [f64; 4]) -> Result<BBox> {
    if !proposal.is_well_formed() {
        return Err(Error::Input(format!(
            "cannot decode against degenerate {proposal:?}"
        )));
    }
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let [rx, ry, rw, rh] = offsets;
    Ok(BBox::from_center(
        px + rx * pw,
        py + ry * ph,
        pw * rw.exp(),
        ph * rh.exp(),
    ))
}

/// Components of the perceptual loss for one proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptualTerms {
    pub cls: f64,
    pub loc: f64,
}

impl PerceptualTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.loc
    }
}

/// `-ln p_g + 1[g >= 1] · Σ smooth_l1(r_g - r*)`.
///
/// `offsets` and `target` are ignored for background (`label == 0`).
pub fn perceptual_loss(
    class_probs: &[f64],
    label: usize,
    offsets: [f64; 4],
    target: Option<&RegressionTarget>,
) -> Result<PerceptualTerms> {
    if label >= class_probs.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            class_probs.len()
        )));
    }
    let cls = -class_probs[label].max(EPS).ln();
    let loc = if label >= 1 {
        let t = target.ok_or_else(|| {
            Error::Input("foreground proposal without a regression target".into())
        })?;
        offsets.iter().zip(t.0).map(|(r, s)| smooth_l1(r - s)).sum()
    } else {
        0.0
    };
    Ok(PerceptualTerms { cls, loc })
}

/// Gradient of the classification term w.r.t. the softmax logits
/// (`p - onehot(g)`).
pub fn cls_logit_grad(class_probs: &[f64], label: usize) -> Vec<f64> {
    class_probs
        .iter()
        .enumerate()
        .map(|(i, p)| if i == label { p - 1.0 } else { *p })
        .collect()
}

/// Gradient of the classification term w.r.t. `p_g`.
pub fn cls_prob_grad(class_probs: &[f64], label: usize) -> f64 {
    let p = class_probs[label];
    if p > EPS {
        -1.0 / p
    } else {
        0.0
    }
}

/// Gradient of the localization term w.r.t. the class-`g` offsets.
pub fn loc_grad(offsets: [f64; 4], target: &RegressionTarget) -> [f64; 4] {
    let mut g = [0.0; 4];
    for j in 0..4 {
        g[j] = smooth_l1_grad(offsets[j] - target.0[j]);
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// `w1 · L_dis_a + w2 · L_dis_p`.
pub fn combine(l_dis_a: f64, l_dis_p: f64, weights: &LossWeights) -> f64 {
    weights.w1 * l_dis_a + weights.w2 * l_dis_p
}

/// Per-batch loss components; unused components are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_a: f64,
    pub l_dis_a: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_dis_p: f64,
    pub l_dis: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.l_a,
            self.l_dis_a,
            self.l_cls,
            self.l_loc,
            self.l_dis_p,
            self.l_dis,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn adversarial_examples() {
        assert!(close(adversarial_loss_d(0.5, 0.5), 1.386294, 5e-7));
        assert!(close(adversarial_loss_d(0.9, 0.1), 0.210721, 5e-7));
        assert!(adversarial_loss_d(1.0 - EPS, EPS) < 1e-6);
        assert!(adversarial_loss_d(1.0, 0.0).is_finite());
        assert!(close(adversarial_loss_g(0.5), 0.693147, 5e-7));
        assert!(close(adversarial_loss_g(0.1), 2.302585, 5e-7));
        assert!(adversarial_loss_g(1.0 - EPS) < 1e-6);
        assert!(adversarial_loss_g(0.0).is_finite());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-3.0), 2.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(1.0 - 1e-12), 0.5 * (1.0 - 1e-12f64).powi(2));
    }

    #[test]
    fn encode_examples() {
        let p = BBox::from_center(5.0, 5.0, 10.0, 10.0);
        assert_eq!(bbox_encode(&p, &p).unwrap().0, [0.0; 4]);
        let g = BBox::from_center(10.0, 5.0, 10.0, 10.0);
        assert_eq!(bbox_encode(&p, &g).unwrap().0, [0.5, 0.0, 0.0, 0.0]);
        assert!(bbox_encode(&BBox::new(0.0, 0.0, 0.0, 5.0), &g).is_err());
        assert!(bbox_decode(&BBox::new(1.0, 0.0, 1.0, 5.0), [0.0; 4]).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let t = RegressionTarget([0.1, -0.2, 0.3, 0.0]);
        let bg = perceptual_loss(&[1.0, 0.0, 0.0], 0, [9.0; 4], None).unwrap();
        assert_eq!(bg.total(), 0.0);
        let fg = perceptual_loss(&[0.25, 0.25, 0.5], 2, t.0, Some(&t)).unwrap();
        assert!(close(fg.total(), 0.693147, 5e-7));
        let off = [0.6, 0.3, 0.8, 0.5];
        let l = perceptual_loss(&[EPS, 1.0 - EPS], 1, off, Some(&t)).unwrap();
        assert!(close(l.total(), 0.5, 1e-6));
        assert!(perceptual_loss(&[0.5, 0.5], 2, off, Some(&t)).is_err());
        assert!(perceptual_loss(&[0.5, 0.5], 1, off, None).is_err());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(0.0, 0.0, &LossWeights { w1: 3.0, w2: 7.0 }), 0.0);
        assert!(close(
            combine(0.7, 0.5, &LossWeights::default()),
            1.2,
            1e-15
        ));
        assert!(close(
            combine(0.7, 0.5, &LossWeights { w1: 2.0, w2: 0.0 }),
            1.4,
            1e-15
        ));
        assert!(LossWeights { w1: -1.0, w2: 1.0 }.validate().is_err());
    }
}
