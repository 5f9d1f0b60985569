//! Convolutional backbone (conv1..conv5) and RoI max pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Batch, Conv2d, ParamMut, ParamRef, ParamSet, Real};

/// Pyramid level. Strides are 1, 2, 4, 8, 16 for conv1..conv5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
    Conv5,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::Conv1,
        Level::Conv2,
        Level::Conv3,
        Level::Conv4,
        Level::Conv5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn stride(self) -> usize {
        1 << self.index()
    }

    pub fn name(self) -> &'static str {
        ["conv1", "conv2", "conv3", "conv4", "conv5"][self.index()]
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pyramid level {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of conv1..conv5.
    pub channels: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: [4, 8, 16, 16, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config(
                "backbone channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: Level) -> usize {
        self.channels[level.index()]
    }
}

/// Five 3x3 convolutions with ReLU; conv1 has stride 1, the rest stride 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub stages: Vec<Conv2d<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Self {
        let mut cin = config.in_channels;
        let stages = Level::ALL
            .iter()
            .map(|&l| {
                let cout = config.channels_at(l);
                let stride = if l == Level::Conv1 { 1 } else { 2 };
                let c = Conv2d::xavier(cin, cout, 3, stride, rng);
                cin = cout;
                c
            })
            .collect();
        Self { stages }
    }

    pub fn channels(&self, level: Level) -> usize {
        self.stages[level.index()].out_channels
    }

    /// Runs all five stages on one image (`in_channels × h × w`).
    pub fn extract_features(&self, image: &Batch<T>) -> Result<FeaturePyramid<T>> {
        let min = Level::Conv5.stride();
        if image.n != 1 {
            return Err(Error::Shape("extract_features takes a single image".into()));
        }
        if image.h < min || image.w < min {
            return Err(Error::Input(format!(
                "image {}x{} is smaller than the conv5 stride {min}",
                image.w, image.h
            )));
        }
        let mut levels: Vec<Batch<T>> = Vec::with_capacity(5);
        for (i, conv) in self.stages.iter().enumerate() {
            let input = if i == 0 { image } else { &levels[i - 1] };
            let mut out = conv.forward(input)?;
            relu_inplace(&mut out.data);
            levels.push(out);
        }
        Ok(FeaturePyramid {
            image_h: image.h,
            image_w: image.w,
            levels,
        })
    }

    /// Back-propagates per-level output gradients to the stage parameters.
    /// `level_grads[i]` is the gradient w.r.t. the post-ReLU output of stage i.
    pub fn backward(
        &self,
        image: &Batch<T>,
        pyramid: &FeaturePyramid<T>,
        mut level_grads: Vec<Option<Batch<T>>>,
    ) -> Backbone<T> {
        let mut grads = self.zeroed();
        let mut carry: Option<Batch<T>> = None;
        for i in (0..self.stages.len()).rev() {
            let mut g = match (level_grads[i].take(), carry.take()) {
                (Some(mut a), Some(b)) => {
                    crate::nn::add_into(&mut a.data, &b.data);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(g) = g.as_mut() else { continue };
            relu_backward(&pyramid.levels[i].data, &mut g.data);
            let input = if i == 0 {
                image
            } else {
                &pyramid.levels[i - 1]
            };
            carry = self.stages[i].backward(input, g, i > 0, &mut grads.stages[i]);
        }
        grads
    }
}

impl<T: Real> ParamSet<T> for Backbone<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (c, l) in self.stages.iter().zip(Level::ALL) {
            c.collect(&format!("backbone.{l}"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (c, l) in self.stages.iter_mut().zip(Level::ALL) {
            c.collect_mut(&format!("backbone.{l}"), &mut out);
        }
        out
    }
}

/// Feature maps for one image, conv1..conv5.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub image_h: usize,
    pub image_w: usize,
    pub levels: Vec<Batch<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn level(&self, level: Level) -> &Batch<T> {
        &self.levels[level.index()]
    }

    pub fn pool(
        &self,
        level: Level,
        bbox: &BBox,
        out_hw: (usize, usize),
    ) -> Result<PooledFeature<T>> {
        roi_pool(self.level(level), bbox, level.stride(), out_hw).map(|mut p| {
            p.level = level;
            p
        })
    }
}

/// A fixed-size `c × h × w` feature pooled for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    pub level: Level,
    /// Flat index into the source map of each output's maximum.
    pub argmax: Vec<usize>,
}

/// Maps an image-space box to the feature-cell window `[y0, y1) × [x0, x1)`:
/// floor on the start, ceil on the end, at least one cell.
pub fn feature_window(
    bbox: &BBox,
    stride: usize,
    h: usize,
    w: usize,
) -> Result<(usize, usize, usize, usize)> {
    if !bbox.is_well_formed() {
        return Err(Error::Input(format!("malformed box {bbox:?}")));
    }
    let s = stride as f64;
    let (ext_w, ext_h) = ((w * stride) as f64, (h * stride) as f64);
    if bbox.x2 <= 0.0 || bbox.y2 <= 0.0 || bbox.x1 >= ext_w || bbox.y1 >= ext_h {
        return Err(Error::Input(format!("box {bbox:?} lies outside the image")));
    }
    let axis = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let b = ((hi / s).ceil() as usize).clamp(a + 1, n);
        (a, b)
    };
    let (x0, x1) = axis(bbox.x1, bbox.x2, w);
    let (y0, y1) = axis(bbox.y1, bbox.y2, h);
    Ok((y0, y1, x0, x1))
}

/// Bin `i` of `n` over a window of `len` cells starting at `start`.
#[inline]
pub fn bin_bounds(i: usize, n: usize, start: usize, len: usize) -> (usize, usize) {
    (start + (i * len) / n, start + ((i + 1) * len).div_ceil(n))
}

/// Max-pools the region of `map` (n = 1) under `bbox` into `out_hw` bins.
pub fn roi_pool<T: Real>(
    map: &Batch<T>,
    bbox: &BBox,
    stride: usize,
    out_hw: (usize, usize),
) -> Result<PooledFeature<T>> {
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Config("RoI output size must be positive".into()));
    }
    let (y0, y1, x0, x1) = feature_window(bbox, stride, map.h, map.w)?;
    let (c, h, w) = (map.c, map.h, map.w);
    let src = map.item(0);
    let mut values = vec![T::zero(); c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for by in 0..oh {
            let (ys, ye) = bin_bounds(by, oh, y0, y1 - y0);
            for bx in 0..ow {
                let (xs, xe) = bin_bounds(bx, ow, x0, x1 - x0);
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for y in ys..ye {
                    for x in xs..xe {
                        let idx = ch * h * w + y * w + x;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (ch * oh + by) * ow + bx;
                values[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok(PooledFeature {
        channels: c,
        height: oh,
        width: ow,
        values,
        level: Level::Conv5,
        argmax,
    })
}

/// Scatters `grad` (shaped like `pooled.values`) back onto `map_grad`.
pub fn roi_pool_backward<T: Real>(pooled: &PooledFeature<T>, grad: &[T], map_grad: &mut [T]) {
    for (g, &i) in grad.iter().zip(&pooled.argmax) {
        map_grad[i] = map_grad[i] + *g;
    }
}
