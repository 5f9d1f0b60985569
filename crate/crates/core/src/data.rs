//! Deterministic synthetic detection scenes.
//!
//! Each scene is a grayscale image with procedurally drawn glyphs, one glyph
//! shape per class, at either a small or a large scale, over a cluttered noisy
//! background. Proposals are jittered copies of the ground truth plus random
//! background boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive `[min, max]` instance count per image.
    pub instances_per_image: [usize; 2],
    /// Inclusive side-length range for small instances.
    pub small_side_range: [u32; 2],
    /// Inclusive side-length range for large instances.
    pub large_side_range: [u32; 2],
    /// Probability that an instance is drawn at the large scale.
    pub large_fraction: f64,
    pub clutter_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Placement attempts allowed per image before giving up.
    pub placement_budget: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 480,
            num_classes: 3,
            instances_per_image: [2, 4],
            small_side_range: [12, 20],
            large_side_range: [96, 120],
            large_fraction: 0.4,
            clutter_density: 0.02,
            noise_sigma: 8.0,
            seed: 1,
            placement_budget: 2000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1".into());
        }
        let [smin, smax] = self.small_side_range;
        let [lmin, lmax] = self.large_side_range;
        if smin < 1 || smin > smax || lmin > lmax {
            return bad("side ranges must be non-empty and positive".into());
        }
        if smax >= lmin {
            return bad(format!(
                "small_side_range max ({smax}) must be below large_side_range min ({lmin})"
            ));
        }
        if self.image_size < 4 * lmax as usize {
            return bad(format!(
                "image_size {} must be at least 4 x large side max ({lmax})",
                self.image_size
            ));
        }
        if self.instances_per_image[0] > self.instances_per_image[1] {
            return bad("instances_per_image min exceeds max".into());
        }
        if !(0.0..=1.0).contains(&self.clutter_density)
            || !(0.0..=1.0).contains(&self.large_fraction)
        {
            return bad("clutter_density and large_fraction must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_unit<T: crate::nn::Real>(&self) -> Vec<T> {
        self.pixels
            .iter()
            .map(|&p| crate::nn::lit::<T>(p as f64 / 255.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub image_id: usize,
    pub bbox: BBox,
    /// In `[1, K]`; 0 is reserved for background.
    pub class_id: u32,
}

impl Annotation {
    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub image_id: usize,
    pub bbox: BBox,
    /// Index into the image's annotations of the best-overlapping ground
    /// truth, present iff that overlap is at least 0.5.
    pub matched_gt: Option<usize>,
    /// Matched ground-truth class, or 0 for background.
    pub label: u32,
}

impl Proposal {
    pub fn is_foreground(&self) -> bool {
        self.label != 0
    }
}

pub const FOREGROUND_IOU: f64 = 0.5;
pub const NEGATIVE_MAX_IOU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterParams {
    /// Jittered copies emitted per ground-truth box.
    pub positives_per_gt: usize,
    /// Maximum center shift as a fraction of box side.
    pub shift: f64,
    /// Maximum log-scale change of each side.
    pub scale: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            positives_per_gt: 8,
            shift: 0.15,
            scale: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub jitter: JitterParams,
    pub negatives_per_image: usize,
    /// Attempts allowed per image when sampling negatives.
    pub negative_budget: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            jitter: JitterParams::default(),
            negatives_per_image: 48,
            negative_budget: 20_000,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let j = &self.jitter;
        if !(0.0..0.5).contains(&j.shift) || !(0.0..0.5).contains(&j.scale) {
            return Err(Error::Config(
                "jitter shift and scale must lie in [0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, index))
}

const STREAM_SCENE: u64 = 1;
const STREAM_PROPOSALS: u64 = 2;

/// Renders scene `image_index`; a pure function of its arguments.
pub fn generate_scene(
    config: &SceneConfig,
    image_index: usize,
) -> Result<(GrayImage, Vec<Annotation>)> {
    config.validate()?;
    let mut rng = derived_rng(config.seed, STREAM_SCENE, image_index as u64);
    let size = config.image_size;

    let background = rng.gen_range(60u8..=110);
    let mut img = GrayImage::filled(size, size, background);
    draw_clutter(&mut img, config.clutter_density, background, &mut rng);

    let [nmin, nmax] = config.instances_per_image;
    let count = rng.gen_range(nmin..=nmax);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    let mut attempts = 0;
    while annotations.len() < count {
        if attempts >= config.placement_budget {
            return Err(Error::Placement {
                image_index,
                requested: count,
                budget: config.placement_budget,
            });
        }
        attempts += 1;
        let large = rng.gen_bool(config.large_fraction);
        let [lo, hi] = if large {
            config.large_side_range
        } else {
            config.small_side_range
        };
        let w = rng.gen_range(lo..=hi) as usize;
        let h = rng.gen_range(lo..=hi) as usize;
        let x1 = rng.gen_range(0..=size - w);
        let y1 = rng.gen_range(0..=size - h);
        let bbox = BBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64);
        // keep a 2 px gap between instances
        let padded = BBox::new(bbox.x1 - 2.0, bbox.y1 - 2.0, bbox.x2 + 2.0, bbox.y2 + 2.0);
        if annotations
            .iter()
            .any(|a| padded.intersection(&a.bbox) > 0.0)
        {
            continue;
        }
        let class_id = rng.gen_range(1..=config.num_classes as u32);
        annotations.push(Annotation {
            image_id: image_index,
            bbox,
            class_id,
        });
    }

    for a in &annotations {
        let intensity = rng.gen_range(190u8..=245);
        draw_glyph(&mut img, &a.bbox, a.class_id, intensity);
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("valid sigma");
        for p in &mut img.pixels {
            let v = *p as f64 + noise.sample(&mut rng);
            *p = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((img, annotations))
}

fn draw_clutter<R: Rng>(img: &mut GrayImage, density: f64, background: u8, rng: &mut R) {
    let area = (img.width * img.height) as f64;
    // clutter items average ~36 px^2
    let items = (density * area / 36.0).round() as usize;
    for _ in 0..items {
        let w = rng.gen_range(2..=10i64);
        let h = rng.gen_range(2..=10i64);
        let x = rng.gen_range(0..img.width as i64);
        let y = rng.gen_range(0..img.height as i64);
        let v = if rng.gen_bool(0.5) {
            background.saturating_add(rng.gen_range(20..=90))
        } else {
            background.saturating_sub(rng.gen_range(20..=50))
        };
        for yy in y..y + h {
            for xx in x..x + w {
                img.set(xx, yy, v);
            }
        }
    }
}

/// Number of distinct glyph shapes before patterns repeat with variations.
const GLYPH_SHAPES: u32 = 6;

/// Draws the class glyph filling `bbox`. Shapes: 1 frame, 2 diagonal cross,
/// 3 disc, 4 plus, 5 horizontal bars, 6 triangle; later classes reuse the
/// shapes with the centre square inverted.
pub fn draw_glyph(img: &mut GrayImage, bbox: &BBox, class_id: u32, intensity: u8) {
    let (x1, y1) = (bbox.x1 as i64, bbox.y1 as i64);
    let (w, h) = (bbox.width() as i64, bbox.height() as i64);
    let side = w.min(h);
    let t = (side / 6).max(2);
    let shape = (class_id.max(1) - 1) % GLYPH_SHAPES;
    let variant = (class_id.max(1) - 1) / GLYPH_SHAPES;
    for dy in 0..h {
        for dx in 0..w {
            // normalized coordinates in [0, 1)
            let u = (dx as f64 + 0.5) / w as f64;
            let v = (dy as f64 + 0.5) / h as f64;
            let tu = t as f64 / w as f64;
            let tv = t as f64 / h as f64;
            let on = match shape {
                0 => dx < t || dy < t || dx >= w - t || dy >= h - t,
                1 => (u - v).abs() < tu.max(tv) * 0.8 || (u + v - 1.0).abs() < tu.max(tv) * 0.8,
                2 => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
                3 => (u - 0.5).abs() < tu * 0.75 || (v - 0.5).abs() < tv * 0.75,
                4 => ((v * 5.0) as i64) % 2 == 0,
                _ => v >= (2.0 * u - 1.0).abs(),
            };
            let centre = variant > 0 && (u - 0.5).abs() < 0.18 && (v - 0.5).abs() < 0.18;
            if on ^ centre {
                img.set(x1 + dx, y1 + dy, intensity);
            }
        }
    }
}

/// Splits instances at the mean area: strictly below goes to the small set,
/// the rest (ties included) to the large set.
pub fn split_by_size(annotations: &[Annotation]) -> Result<(Vec<Annotation>, Vec<Annotation>)> {
    let threshold = mean_area(annotations)?;
    Ok(annotations
        .iter()
        .cloned()
        .partition(|a| a.area() < threshold))
}

pub fn mean_area(annotations: &[Annotation]) -> Result<f64> {
    if annotations.is_empty() {
        return Err(Error::Input("cannot split an empty annotation list".into()));
    }
    Ok(annotations.iter().map(Annotation::area).sum::<f64>() / annotations.len() as f64)
}

/// Jittered positives and random negatives for one image's annotations.
pub fn generate_proposals(
    image_id: usize,
    image_size: usize,
    annotations: &[Annotation],
    config: &ProposalConfig,
    side_ranges: &[[u32; 2]],
    seed: u64,
) -> Result<Vec<Proposal>> {
    config.validate()?;
    let mut rng = derived_rng(seed, STREAM_PROPOSALS, image_id as u64);
    let size = image_size as f64;
    let j = &config.jitter;
    let mut out =
        Vec::with_capacity(annotations.len() * j.positives_per_gt + config.negatives_per_image);

    for gt in annotations {
        let (cx, cy) = gt.bbox.center();
        let (w, h) = (gt.bbox.width(), gt.bbox.height());
        for _ in 0..j.positives_per_gt {
            let dx = sym(&mut rng, j.shift) * w;
            let dy = sym(&mut rng, j.shift) * h;
            let sw = sym(&mut rng, j.scale).exp();
            let sh = sym(&mut rng, j.scale).exp();
            let mut b = BBox::from_center(cx + dx, cy + dy, w * sw, h * sh).clip(size, size);
            if !b.is_well_formed() {
                b = gt.bbox;
            }
            out.push(label_proposal(image_id, b, annotations));
        }
    }

    let mut made = 0;
    let mut attempts = 0;
    while made < config.negatives_per_image {
        if attempts >= config.negative_budget {
            return Err(Error::Placement {
                image_index: image_id,
                requested: config.negatives_per_image,
                budget: config.negative_budget,
            });
        }
        attempts += 1;
        let [lo, hi] = side_ranges[rng.gen_range(0..side_ranges.len())];
        let w = rng.gen_range(lo..=hi) as f64;
        let h = rng.gen_range(lo..=hi) as f64;
        let x1 = rng.gen_range(0.0..=(size - w).max(0.0));
        let y1 = rng.gen_range(0.0..=(size - h).max(0.0));
        let b = BBox::new(x1, y1, (x1 + w).min(size), (y1 + h).min(size));
        if annotations
            .iter()
            .any(|a| iou(&a.bbox, &b) >= NEGATIVE_MAX_IOU)
        {
            continue;
        }
        out.push(label_proposal(image_id, b, annotations));
        made += 1;
    }
    Ok(out)
}

fn sym<R: Rng>(rng: &mut R, mag: f64) -> f64 {
    if mag == 0.0 {
        0.0
    } else {
        rng.gen_range(-mag..mag)
    }
}

/// Assigns the IoU >= 0.5 label against the best-overlapping ground truth.
pub fn label_proposal(image_id: usize, bbox: BBox, annotations: &[Annotation]) -> Proposal {
    let best = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| (i, iou(&a.bbox, &bbox)))
        .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        });
    match best {
        Some((i, v)) if v >= FOREGROUND_IOU => Proposal {
            image_id,
            bbox,
            matched_gt: Some(i),
            label: annotations[i].class_id,
        },
        _ => Proposal {
            image_id,
            bbox,
            matched_gt: None,
            label: 0,
        },
    }
}

/// One image with its ground truth and proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: usize,
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
    pub proposals: Vec<Proposal>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.samples
            .iter()
            .flat_map(|s| s.annotations.iter().cloned())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generates images `first..first + count` with proposals.
pub fn generate_dataset(
    scene: &SceneConfig,
    proposals: &ProposalConfig,
    first: usize,
    count: usize,
    proposal_seed: u64,
) -> Result<Dataset> {
    scene.validate()?;
    proposals.validate()?;
    let ranges = [scene.small_side_range, scene.large_side_range];
    let samples = par::map_range(count, |i| {
        let image_id = first + i;
        let (image, annotations) = generate_scene(scene, image_id)?;
        let proposals = generate_proposals(
            image_id,
            scene.image_size,
            &annotations,
            proposals,
            &ranges,
            proposal_seed,
        )?;
        Ok(Sample {
            image_id,
            image,
            annotations,
            proposals,
        })
    });
    Ok(Dataset {
        samples: samples.into_iter().collect::<Result<_>>()?,
    })
}
