//! Feature heatmaps: per sampled proposal, a row of four panels showing a
//! small object's conv5 pool, the learned residual, the super-resolved
//! feature and a large object's conv5 pool.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::super_resolve;
use crate::io::encode_ppm;
use crate::trainer::{AdvBatchSpec, FeatureCache, ModelState, Role, Sampler};

/// Mean over channels of a `C×h×w` feature.
pub fn channel_mean(feature: &[f32], channels: usize, hw: usize) -> Result<Vec<f32>> {
    if channels == 0 || feature.len() != channels * hw {
        return Err(Error::Shape(format!(
            "{} values is not {channels}x{hw}",
            feature.len()
        )));
    }
    let mut out = vec![0.0f32; hw];
    for c in 0..channels {
        for (o, v) in out.iter_mut().zip(&feature[c * hw..(c + 1) * hw]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= channels as f32);
    Ok(out)
}

/// Min-max scaling to 0..=255. A constant panel maps to 0.
pub fn min_max_u8(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub const PANEL_GAP: usize = 2;

/// Lays `panels` (each `h×w` grayscale) out left to right, each pixel
/// enlarged to `scale×scale`, separated by white gaps. Returns `(width,
/// height, rgb)`.
pub fn panel_row(
    panels: &[Vec<u8>],
    h: usize,
    w: usize,
    scale: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if panels.iter().any(|p| p.len() != h * w) || scale == 0 {
        return Err(Error::Shape("panel size mismatch".into()));
    }
    let width = panels.len() * w * scale + panels.len().saturating_sub(1) * PANEL_GAP;
    let height = h * scale;
    let mut rgb = vec![255u8; width * height * 3];
    for (k, panel) in panels.iter().enumerate() {
        let x0 = k * (w * scale + PANEL_GAP);
        for y in 0..height {
            for x in 0..w * scale {
                let v = panel[(y / scale) * w + x / scale];
                let at = (y * width + x0 + x) * 3;
                rgb[at..at + 3].copy_from_slice(&[v, v, v]);
            }
        }
    }
    Ok((width, height, rgb))
}

/// One PPM per pair, pairing the `i`-th sampled small proposal with the
/// `i`-th sampled large one.
pub fn feature_grids(
    state: &ModelState,
    data: &Dataset,
    count: usize,
    seed: u64,
    scale: usize,
) -> Result<Vec<Vec<u8>>> {
    let cache = FeatureCache::build(
        &state.backbone,
        data,
        state.config.generator.input_level,
        state.config.roi_hw(),
    )?;
    let sampler = Sampler::new(data, &cache)?;
    let spec = AdvBatchSpec {
        images: count,
        per_image: 1,
    };
    let mut rng = crate::trainer::seeded_rng(seed);
    let small = sampler.foreground_batch(Role::Small, &spec, &mut rng)?;
    let large = sampler.foreground_batch(Role::Large, &spec, &mut rng)?;
    let residual = state.generator.residual(&small.input)?;
    let sr = super_resolve(&small.conv5, &residual)?;
    let (h, w) = state.config.roi_hw();
    let c = cache.conv5_channels;
    (0..count)
        .map(|i| {
            let panels = [
                small.conv5.item(i),
                residual.item(i),
                sr.item(i),
                large.conv5.item(i),
            ]
            .iter()
            .map(|f| channel_mean(f, c, h * w).map(|m| min_max_u8(&m)))
            .collect::<Result<Vec<_>>>()?;
            let (gw, gh, rgb) = panel_row(&panels, h, w, scale)?;
            encode_ppm(gw, gh, &rgb)
        })
        .collect()
}
