//! Training protocol.
//!
//! Phase 1 fits the backbone and the perception branch on large objects.
//! The backbone is then frozen, pooled features are cached, and generator
//! updates alternate with adversarial-branch updates. The perception branch
//! stays fixed during alternation and only guides the generator.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::data::{derived_rng, mean_area, Dataset, Proposal, Sample};
use crate::discriminator::{
    AdversarialBranch, DiscriminatorConfig, PerceptionBatch, PerceptionBranch,
};
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig, Level};
use crate::generator::{super_resolve, Generator, GeneratorConfig};
use crate::losses::{self, bbox_encode, combine, LossReport, LossWeights, RegressionTarget};
use crate::nn::{Batch, ParamSet};
use crate::optim::{scheduled_lr, Sgd};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// RoI pooling output `[h, w]`.
    pub roi_size: [usize; 2],
    /// The regression head predicts box deltas divided by these.
    pub offset_scale: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            roi_size: [7, 7],
            offset_scale: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.roi_size.contains(&0) {
            return Err(Error::Config("roi_size must be positive".into()));
        }
        if !self.offset_scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Config(
                "offset_scale entries must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn roi_hw(&self) -> (usize, usize) {
        (self.roi_size[0], self.roi_size[1])
    }

    /// Flattened length of a conv5 pooled feature.
    pub fn conv5_dim(&self) -> usize {
        self.backbone.channels_at(Level::Conv5) * self.roi_size[0] * self.roi_size[1]
    }

    /// Box deltas from raw regression-head outputs.
    pub fn decode_offsets(&self, raw: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|j| raw[j] * self.offset_scale[j])
    }

    fn scaled_target(&self, t: &RegressionTarget) -> RegressionTarget {
        RegressionTarget(std::array::from_fn(|j| t.0[j] / self.offset_scale[j]))
    }
}

/// Proposal minibatch of `size` with a foreground share.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub size: usize,
    pub foreground_fraction: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            size: 128,
            foreground_fraction: 0.25,
        }
    }
}

impl BatchSpec {
    /// `(foreground, background)` counts.
    pub fn counts(&self) -> (usize, usize) {
        let fg = (self.size as f64 * self.foreground_fraction).round() as usize;
        (fg, self.size - fg)
    }
}

/// Foreground-only batch drawn as `per_image` proposals from each of `images`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvBatchSpec {
    pub images: usize,
    pub per_image: usize,
}

impl Default for AdvBatchSpec {
    fn default() -> Self {
        Self {
            images: 4,
            per_image: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Overrides `learning_rate` for generator updates.
    pub generator_learning_rate: Option<f64>,
    /// Overrides `learning_rate` for adversarial-branch updates.
    pub adversarial_learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub phase1_iters: usize,
    pub alternation_rounds: usize,
    pub gen_steps_per_round: usize,
    pub adv_steps_per_round: usize,
    pub gen_batch: BatchSpec,
    pub adv_batch: AdvBatchSpec,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many rounds (0: never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            generator_learning_rate: None,
            adversarial_learning_rate: None,
            momentum: 0.9,
            weight_decay: 0.0005,
            phase1_iters: 1000,
            alternation_rounds: 1000,
            gen_steps_per_round: 1,
            adv_steps_per_round: 1,
            gen_batch: BatchSpec::default(),
            adv_batch: AdvBatchSpec::default(),
            loss_weights: LossWeights::default(),
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        let rates = [
            Some(self.learning_rate),
            self.generator_learning_rate,
            self.adversarial_learning_rate,
        ];
        if rates
            .iter()
            .flatten()
            .any(|r| !(*r >= 0.0 && r.is_finite()))
            || !(self.weight_decay >= 0.0)
        {
            return bad("learning rates and weight decay must be finite and non-negative");
        }
        if [
            self.phase1_iters,
            self.alternation_rounds,
            self.gen_steps_per_round,
            self.adv_steps_per_round,
            self.gen_batch.size,
            self.adv_batch.images,
            self.adv_batch.per_image,
        ]
        .contains(&0)
        {
            return bad("iteration counts and batch sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gen_batch.foreground_fraction) {
            return bad("gen_batch.foreground_fraction must lie in [0, 1]");
        }
        self.loss_weights.validate()
    }

    fn sgd(&self, learning_rate: f64) -> Sgd {
        Sgd {
            learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn generator_lr(&self) -> f64 {
        self.generator_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn adversarial_lr(&self) -> f64 {
        self.adversarial_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Velocities {
    pub backbone: Backbone<f32>,
    pub generator: Generator<f32>,
    pub adversarial: AdversarialBranch<f32>,
    pub perception: PerceptionBranch<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub pretrain_iters: usize,
    pub gen_updates: usize,
    pub adv_updates: usize,
    pub rounds_done: usize,
}

/// All parameters, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub backbone: Backbone<f32>,
    pub generator: Generator<f32>,
    pub adversarial: AdversarialBranch<f32>,
    pub perception: PerceptionBranch<f32>,
    pub velocity: Velocities,
    pub counters: Counters,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    model: ModelConfig,
    num_classes: usize,
    counters: Counters,
}

const STREAM_INIT: u64 = 10;
const STREAM_PRETRAIN: u64 = 11;
const STREAM_GENERATOR: u64 = 12;
const STREAM_ADVERSARIAL: u64 = 13;

impl ModelState {
    pub fn new(config: &ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let mut rng = derived_rng(seed, STREAM_INIT, 0);
        // generator last, so the other sets do not depend on its input level
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let dim = config.conv5_dim();
        let perception = PerceptionBranch::new(dim, num_classes, &config.discriminator, &mut rng);
        let adversarial = AdversarialBranch::new(dim, &config.discriminator, &mut rng);
        let level = config.generator.input_level;
        let c5 = config.backbone.channels_at(Level::Conv5);
        let generator = Generator::new(
            &config.generator,
            config.backbone.channels_at(level),
            c5,
            &mut rng,
        )?;
        let velocity = Velocities {
            backbone: backbone.zeroed(),
            generator: generator.zeroed(),
            adversarial: adversarial.zeroed(),
            perception: perception.zeroed(),
        };
        Ok(Self {
            config: config.clone(),
            num_classes,
            backbone,
            generator,
            adversarial,
            perception,
            velocity,
            counters: Counters::default(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut arrays = Vec::new();
        let mut push = |prefix: &str, params: Vec<crate::nn::ParamRef<'_, f32>>| {
            for p in params {
                arrays.push(NamedArray {
                    name: format!("{prefix}{}", p.name),
                    shape: p.shape,
                    data: p.data.to_vec(),
                });
            }
        };
        push("", self.backbone.params());
        push("", self.generator.params());
        push("", self.adversarial.params());
        push("", self.perception.params());
        push("velocity.", self.velocity.backbone.params());
        push("velocity.", self.velocity.generator.params());
        push("velocity.", self.velocity.adversarial.params());
        push("velocity.", self.velocity.perception.params());
        let meta = serde_json::to_value(StateMeta {
            model: self.config.clone(),
            num_classes: self.num_classes,
            counters: self.counters,
        })?;
        Ok(Checkpoint { arrays, meta })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        let mut state = Self::new(&meta.model, meta.num_classes, 0)?;
        state.counters = meta.counters;
        let by_name = ck.by_name();
        let fill = |prefix: &str, params: Vec<crate::nn::ParamMut<'_, f32>>| -> Result<()> {
            for p in params {
                let name = format!("{prefix}{}", p.name);
                let a = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
                if a.shape != p.shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} in file, {:?} expected",
                        a.shape, p.shape
                    )));
                }
                p.data.copy_from_slice(&a.data);
            }
            Ok(())
        };
        fill("", state.backbone.params_mut())?;
        fill("", state.generator.params_mut())?;
        fill("", state.adversarial.params_mut())?;
        fill("", state.perception.params_mut())?;
        fill("velocity.", state.velocity.backbone.params_mut())?;
        fill("velocity.", state.velocity.generator.params_mut())?;
        fill("velocity.", state.velocity.adversarial.params_mut())?;
        fill("velocity.", state.velocity.perception.params_mut())?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Content hashes of backbone, generator, adversarial and perception.
    pub fn hashes(&self) -> [u64; 4] {
        [
            self.backbone.content_hash(),
            self.generator.content_hash(),
            self.adversarial.content_hash(),
            self.perception.content_hash(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Generator,
    Adversarial,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Generator => "generator",
            Phase::Adversarial => "adversarial",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub phase: Phase,
    pub report: LossReport,
}

pub const LOG_HEADER: &str = "iter,phase,L_a,L_dis_a,L_cls,L_loc,L_dis_p,L_dis";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.phase, r.l_a, r.l_dis_a, r.l_cls, r.l_loc, r.l_dis_p, r.l_dis
        )
    }
}

pub fn write_log<W: Write>(mut out: W, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Instance size split used for training: areas below the dataset mean are
/// small, the rest large.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeSplit {
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Background,
    Small,
    Large,
}

impl SizeSplit {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        Ok(Self {
            threshold: mean_area(&data.annotations())?,
        })
    }

    pub fn role(&self, sample: &Sample, p: &Proposal) -> Role {
        match p.matched_gt {
            None => Role::Background,
            Some(i) if sample.annotations[i].area() < self.threshold => Role::Small,
            Some(_) => Role::Large,
        }
    }

    fn has(&self, sample: &Sample, role: Role) -> bool {
        sample
            .proposals
            .iter()
            .any(|p| self.role(sample, p) == role)
    }
}

/// Draws `count` items from `pool`: each once in shuffled order while they
/// last, then uniformly with replacement.
fn draw<R: Rng>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let mut out: Vec<usize> = shuffled.iter().copied().take(count).collect();
    while out.len() < count {
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    out
}

/// Proposal indices of one minibatch: `spec.counts()` foreground (per
/// `is_fg`) and background (label 0) proposals, without replacement when
/// the image has enough candidates.
pub fn sample_generator_batch<R: Rng>(
    sample: &Sample,
    is_fg: impl Fn(&Proposal) -> bool,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if sample.proposals.is_empty() {
        return Err(Error::Input(format!(
            "image {} has no proposals",
            sample.image_id
        )));
    }
    let fg: Vec<usize> = (0..sample.proposals.len())
        .filter(|&i| is_fg(&sample.proposals[i]))
        .collect();
    let bg: Vec<usize> = (0..sample.proposals.len())
        .filter(|&i| sample.proposals[i].label == 0)
        .collect();
    let (nf, nb) = spec.counts();
    if (nf > 0 && fg.is_empty()) || (nb > 0 && bg.is_empty()) {
        return Err(Error::Input(format!(
            "image {} lacks foreground or background proposals",
            sample.image_id
        )));
    }
    let mut out = draw(&fg, nf, rng);
    out.extend(draw(&bg, nb, rng));
    Ok(out)
}

/// Pooled features and targets for a set of proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalBatch {
    pub conv5: Batch<f32>,
    pub input: Batch<f32>,
    pub labels: Vec<usize>,
    pub targets: Vec<Option<RegressionTarget>>,
    /// Rows that enter the generator's adversarial term (defaults to the
    /// foreground).
    pub adversarial: Vec<bool>,
}

impl ProposalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn foreground(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] > 0).collect()
    }
}

/// Per-proposal pooled features of one image, row-major by proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedImage {
    pub conv5: Vec<f32>,
    pub input: Vec<f32>,
}

/// Frozen-backbone features for every proposal of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub input_level: Level,
    pub conv5_channels: usize,
    pub input_channels: usize,
    pub roi: (usize, usize),
    pub images: Vec<CachedImage>,
}

/// Image tensor fed to the backbone: pixels scaled to `[-0.5, 0.5]`.
pub fn image_batch(sample: &Sample) -> Batch<f32> {
    let img = &sample.image;
    Batch {
        n: 1,
        c: 1,
        h: img.height,
        w: img.width,
        data: img.to_unit::<f32>().into_iter().map(|v| v - 0.5).collect(),
    }
}

impl FeatureCache {
    pub fn build(
        backbone: &Backbone<f32>,
        data: &Dataset,
        input_level: Level,
        roi: (usize, usize),
    ) -> Result<Self> {
        let images = par::map(&data.samples, |s| -> Result<CachedImage> {
            let pyr = backbone.extract_features(&image_batch(s))?;
            let mut conv5 = Vec::new();
            let mut input = Vec::new();
            for p in &s.proposals {
                conv5.extend(pyr.pool(Level::Conv5, &p.bbox, roi)?.values);
                input.extend(pyr.pool(input_level, &p.bbox, roi)?.values);
            }
            Ok(CachedImage { conv5, input })
        });
        Ok(Self {
            input_level,
            conv5_channels: backbone.channels(Level::Conv5),
            input_channels: backbone.channels(input_level),
            roi,
            images: images.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn conv5_dim(&self) -> usize {
        self.conv5_channels * self.roi.0 * self.roi.1
    }

    pub fn input_dim(&self) -> usize {
        self.input_channels * self.roi.0 * self.roi.1
    }

    /// Gathers `(image, proposal)` pairs into a batch.
    pub fn gather(&self, data: &Dataset, picks: &[(usize, usize)]) -> Result<ProposalBatch> {
        let (d5, di) = (self.conv5_dim(), self.input_dim());
        let mut conv5 = Vec::with_capacity(picks.len() * d5);
        let mut input = Vec::with_capacity(picks.len() * di);
        let mut labels = Vec::with_capacity(picks.len());
        let mut targets = Vec::with_capacity(picks.len());
        for &(img, pi) in picks {
            let s = &data.samples[img];
            let c = &self.images[img];
            conv5.extend_from_slice(&c.conv5[pi * d5..(pi + 1) * d5]);
            input.extend_from_slice(&c.input[pi * di..(pi + 1) * di]);
            let p = &s.proposals[pi];
            labels.push(p.label as usize);
            targets.push(match p.matched_gt {
                Some(g) if p.label > 0 => Some(bbox_encode(&p.bbox, &s.annotations[g].bbox)?),
                _ => None,
            });
        }
        let (h, w) = self.roi;
        let n = picks.len();
        Ok(ProposalBatch {
            conv5: Batch {
                n,
                c: self.conv5_channels,
                h,
                w,
                data: conv5,
            },
            input: Batch {
                n,
                c: self.input_channels,
                h,
                w,
                data: input,
            },
            adversarial: labels.iter().map(|&l| l > 0).collect(),
            labels,
            targets,
        })
    }
}

struct PerceptionObjective {
    cls: f64,
    loc: f64,
    grad_logits: Vec<f32>,
    grad_offsets: Vec<f32>,
}

/// Batch-mean perceptual loss and its gradients (scaled by `scale`) w.r.t.
/// the classification logits and raw offsets.
fn perception_objective(
    model: &ModelConfig,
    out: &PerceptionBatch<f32>,
    labels: &[usize],
    targets: &[Option<RegressionTarget>],
    scale: f64,
) -> Result<PerceptionObjective> {
    let n = out.n;
    let k = out.num_classes;
    let mut grad_logits = vec![0f32; n * (k + 1)];
    let mut grad_offsets = vec![0f32; n * 4 * k];
    let (mut cls, mut loc) = (0.0, 0.0);
    for i in 0..n {
        let probs: Vec<f64> = out.probs_of(i).iter().map(|&p| p as f64).collect();
        let label = labels[i];
        let offsets = if label > 0 {
            out.offsets_of(i, label).map(|v| v as f64)
        } else {
            [0.0; 4]
        };
        let target = targets[i].as_ref().map(|t| model.scaled_target(t));
        let terms = losses::perceptual_loss(&probs, label, offsets, target.as_ref())?;
        cls += terms.cls;
        loc += terms.loc;
        for (j, g) in losses::cls_logit_grad(&probs, label)
            .into_iter()
            .enumerate()
        {
            grad_logits[i * (k + 1) + j] = (scale * g / n as f64) as f32;
        }
        if let (true, Some(t)) = (label > 0, target.as_ref()) {
            let g = losses::loc_grad(offsets, t);
            let base = i * 4 * k + 4 * (label - 1);
            for j in 0..4 {
                grad_offsets[base + j] = (scale * g[j] / n as f64) as f32;
            }
        }
    }
    Ok(PerceptionObjective {
        cls: cls / n as f64,
        loc: loc / n as f64,
        grad_logits,
        grad_offsets,
    })
}

fn guard(phase: &'static str, iter: usize, report: &LossReport) -> Result<()> {
    if report.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase,
            iter,
            detail: format!("{report:?}"),
        })
    }
}

/// Phase 1: backbone and perception branch on proposals of large objects.
/// Proposals of small objects are left out entirely. Runs from the state's
/// iteration counter up to `config.phase1_iters`.
pub fn pretrain_perception(
    state: &mut ModelState,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<LogRow>> {
    if state.counters.pretrain_iters >= config.phase1_iters {
        return Ok(Vec::new());
    }
    let split = SizeSplit::from_dataset(data)?;
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let s = &data.samples[i];
            split.has(s, Role::Large) && split.has(s, Role::Background)
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Input(
            "no training image contains a large object".into(),
        ));
    }
    let roi = state.config.roi_hw();
    let mut rows = Vec::new();
    while state.counters.pretrain_iters < config.phase1_iters {
        let it = state.counters.pretrain_iters;
        let mut rng = derived_rng(config.seed, STREAM_PRETRAIN, it as u64);
        let sample = &data.samples[eligible[rng.gen_range(0..eligible.len())]];
        let picks = sample_generator_batch(
            sample,
            |p| split.role(sample, p) == Role::Large,
            &config.gen_batch,
            &mut rng,
        )?;

        let image = image_batch(sample);
        let pyr = state.backbone.extract_features(&image)?;
        let pooled = picks
            .iter()
            .map(|&i| pyr.pool(Level::Conv5, &sample.proposals[i].bbox, roi))
            .collect::<Result<Vec<_>>>()?;
        let x: Vec<f32> = pooled
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect();
        let n = picks.len();
        let (out, tape) = state.perception.forward(&x, n)?;
        let labels: Vec<usize> = picks
            .iter()
            .map(|&i| sample.proposals[i].label as usize)
            .collect();
        let targets = picks
            .iter()
            .map(|&i| {
                let p = &sample.proposals[i];
                p.matched_gt
                    .map(|g| bbox_encode(&p.bbox, &sample.annotations[g].bbox))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let obj = perception_objective(
            &state.config,
            &out,
            &labels,
            &targets,
            config.loss_weights.w2,
        )?;
        let l_dis_p = obj.cls + obj.loc;
        let report = LossReport {
            l_cls: obj.cls,
            l_loc: obj.loc,
            l_dis_p,
            l_dis: combine(0.0, l_dis_p, &config.loss_weights),
            ..Default::default()
        };
        guard("pretrain", it + 1, &report)?;

        let mut gp = state.perception.zeroed();
        let gx = state
            .perception
            .backward(&tape, &obj.grad_logits, &obj.grad_offsets, true, &mut gp)
            .expect("input grad");
        let c5 = pyr.level(Level::Conv5);
        let mut map_grad = Batch::zeros(1, c5.c, c5.h, c5.w);
        let d = x.len() / n;
        for (i, p) in pooled.iter().enumerate() {
            crate::features::roi_pool_backward(p, &gx[i * d..(i + 1) * d], &mut map_grad.data);
        }
        let mut level_grads: Vec<Option<Batch<f32>>> = vec![None; 5];
        level_grads[Level::Conv5.index()] = Some(map_grad);
        let gb = state.backbone.backward(&image, &pyr, level_grads);

        let sgd = config.sgd(scheduled_lr(config.learning_rate, it, config.phase1_iters));
        sgd.step(&mut state.backbone, &gb, &mut state.velocity.backbone);
        sgd.step(&mut state.perception, &gp, &mut state.velocity.perception);
        state.counters.pretrain_iters += 1;
        rows.push(LogRow {
            iter: it + 1,
            phase: Phase::Pretrain,
            report,
        });
    }
    Ok(rows)
}

/// Result of one alternation update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Adversarial-branch accuracy on the step's batch (adversarial steps).
    pub accuracy: Option<f64>,
}

/// One generator update on `batch`: the super-resolved features
/// `F_s + G(f)` go through both discriminator branches and
/// `w1 · L_dis_a + w2 · L_dis_p` is minimised over the generator only.
/// The adversarial term covers the rows flagged in `batch.adversarial`.
pub fn generator_step(
    state: &mut ModelState,
    batch: &ProposalBatch,
    config: &TrainConfig,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Input("empty generator batch".into()));
    }
    let w = &config.loss_weights;
    let (residual, tape) = state.generator.residual_train(&batch.input)?;
    let sr = super_resolve(&batch.conv5, &residual)?;
    let d = sr.item_len();

    let (out, ptape) = state.perception.forward(&sr.data, n)?;
    let obj = perception_objective(&state.config, &out, &batch.labels, &batch.targets, w.w2)?;
    let mut g_sr = state
        .perception
        .backward(
            &ptape,
            &obj.grad_logits,
            &obj.grad_offsets,
            true,
            &mut state.perception.zeroed(),
        )
        .expect("input grad");

    let fg: Vec<usize> = (0..n).filter(|&i| batch.adversarial[i]).collect();
    let mut l_dis_a = 0.0;
    if !fg.is_empty() {
        let x: Vec<f32> = fg
            .iter()
            .flat_map(|&i| sr.item(i).iter().copied())
            .collect();
        let (probs, atape) = state.adversarial.forward(&x, fg.len())?;
        let nf = fg.len() as f64;
        let mut g_prob = Vec::with_capacity(fg.len());
        for &p in &probs {
            l_dis_a += losses::adversarial_loss_g(p as f64) / nf;
            g_prob.push((w.w1 * losses::adversarial_loss_g_grad(p as f64) / nf) as f32);
        }
        let g_x = state
            .adversarial
            .backward(&atape, &g_prob, true, &mut state.adversarial.zeroed())
            .expect("input grad");
        for (j, &i) in fg.iter().enumerate() {
            crate::nn::add_into(&mut g_sr[i * d..(i + 1) * d], &g_x[j * d..(j + 1) * d]);
        }
    }

    let l_dis_p = obj.cls + obj.loc;
    let report = LossReport {
        l_a: 0.0,
        l_dis_a,
        l_cls: obj.cls,
        l_loc: obj.loc,
        l_dis_p,
        l_dis: combine(l_dis_a, l_dis_p, w),
    };
    guard("generator", state.counters.gen_updates + 1, &report)?;

    let g_res = Batch {
        data: g_sr,
        ..residual
    };
    let grads = state.generator.backward(&tape, &g_res);
    config
        .sgd(learning_rate)
        .step(&mut state.generator, &grads, &mut state.velocity.generator);
    state.counters.gen_updates += 1;
    Ok(StepOutcome {
        report,
        accuracy: None,
    })
}

/// One adversarial-branch update: real large-object features against the
/// super-resolved small-object features. The generator runs in eval mode
/// and receives no gradient.
pub fn adversarial_step(
    state: &mut ModelState,
    large: &ProposalBatch,
    small: &ProposalBatch,
    config: &TrainConfig,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let (nl, ns) = (large.len(), small.len());
    if nl == 0 || ns == 0 {
        return Err(Error::Input(
            "adversarial step needs large and small features".into(),
        ));
    }
    let residual = state.generator.residual(&small.input)?;
    let sr = super_resolve(&small.conv5, &residual)?;
    let mut x = large.conv5.data.clone();
    x.extend_from_slice(&sr.data);
    let (probs, tape) = state.adversarial.forward(&x, nl + ns)?;

    let mut l_a = 0.0;
    let mut g_prob = Vec::with_capacity(nl + ns);
    let mut correct = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        let p = p as f64;
        if i < nl {
            l_a += -p.clamp(losses::EPS, 1.0 - losses::EPS).ln() / nl as f64;
            g_prob.push((losses::adversarial_loss_d_grad(p, 0.5).0 / nl as f64) as f32);
            correct += (p > 0.5) as usize;
        } else {
            l_a += -(1.0 - p.clamp(losses::EPS, 1.0 - losses::EPS)).ln() / ns as f64;
            g_prob.push((losses::adversarial_loss_d_grad(0.5, p).1 / ns as f64) as f32);
            correct += (p < 0.5) as usize;
        }
    }
    let report = LossReport {
        l_a,
        ..Default::default()
    };
    guard("adversarial", state.counters.adv_updates + 1, &report)?;

    let mut grads = state.adversarial.zeroed();
    state
        .adversarial
        .backward(&tape, &g_prob, false, &mut grads);
    config.sgd(learning_rate).step(
        &mut state.adversarial,
        &grads,
        &mut state.velocity.adversarial,
    );
    state.counters.adv_updates += 1;
    Ok(StepOutcome {
        report,
        accuracy: Some(correct as f64 / (nl + ns) as f64),
    })
}

/// Draws minibatches for the alternation phase from cached features.
pub struct Sampler<'a> {
    pub data: &'a Dataset,
    pub cache: &'a FeatureCache,
    pub split: SizeSplit,
    small_images: Vec<usize>,
    large_images: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, cache: &'a FeatureCache) -> Result<Self> {
        let split = SizeSplit::from_dataset(data)?;
        let with = |role: Role| -> Vec<usize> {
            (0..data.len())
                .filter(|&i| {
                    let s = &data.samples[i];
                    split.has(s, role) && split.has(s, Role::Background)
                })
                .collect()
        };
        let small_images = with(Role::Small);
        let large_images = with(Role::Large);
        if small_images.is_empty() || large_images.is_empty() {
            return Err(Error::Input(
                "training data needs images with small and with large objects".into(),
            ));
        }
        Ok(Self {
            data,
            cache,
            split,
            small_images,
            large_images,
        })
    }

    /// Generator minibatch: half from an image with small objects, half from
    /// an image with large ones, each contributing foreground of its role
    /// plus background. Only small-object rows enter the adversarial term;
    /// the large-object rows keep the generator close to a zero mapping
    /// where no lift is needed.
    pub fn generator_batch(&self, spec: &BatchSpec, rng: &mut ChaCha8Rng) -> Result<ProposalBatch> {
        let half = BatchSpec {
            size: spec.size / 2,
            foreground_fraction: spec.foreground_fraction,
        };
        let rest = BatchSpec {
            size: spec.size - half.size,
            foreground_fraction: spec.foreground_fraction,
        };
        let mut pairs = Vec::with_capacity(spec.size);
        let mut adversarial = Vec::with_capacity(spec.size);
        for (role, part) in [(Role::Small, &half), (Role::Large, &rest)] {
            if part.size == 0 {
                continue;
            }
            let pool = if role == Role::Small {
                &self.small_images
            } else {
                &self.large_images
            };
            let img = pool[rng.gen_range(0..pool.len())];
            let s = &self.data.samples[img];
            let picks = sample_generator_batch(s, |p| self.split.role(s, p) == role, part, rng)?;
            for p in picks {
                adversarial.push(self.split.role(s, &s.proposals[p]) == Role::Small);
                pairs.push((img, p));
            }
        }
        let mut batch = self.cache.gather(self.data, &pairs)?;
        batch.adversarial = adversarial;
        Ok(batch)
    }

    /// Foreground-only batch of one size role.
    pub fn foreground_batch(
        &self,
        role: Role,
        spec: &AdvBatchSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<ProposalBatch> {
        let pool = if role == Role::Small {
            &self.small_images
        } else {
            &self.large_images
        };
        let images = draw(pool, spec.images, rng);
        let mut pairs = Vec::with_capacity(spec.images * spec.per_image);
        for img in images {
            let s = &self.data.samples[img];
            let cands: Vec<usize> = (0..s.proposals.len())
                .filter(|&i| self.split.role(s, &s.proposals[i]) == role)
                .collect();
            pairs.extend(
                draw(&cands, spec.per_image, rng)
                    .into_iter()
                    .map(|p| (img, p)),
            );
        }
        self.cache.gather(self.data, &pairs)
    }
}

/// Phases 2 and 3: `k_g` generator updates then `k_a` adversarial updates
/// per round, resuming from the state's round counter. `on_round` runs after
/// every completed round.
pub fn alternate(
    state: &mut ModelState,
    sampler: &Sampler<'_>,
    config: &TrainConfig,
    mut on_round: impl FnMut(&ModelState) -> Result<()>,
) -> Result<Vec<LogRow>> {
    if state.counters.pretrain_iters < config.phase1_iters {
        return Err(Error::Input(
            "alternation requires a completed phase 1".into(),
        ));
    }
    let mut rows = Vec::new();
    while state.counters.rounds_done < config.alternation_rounds {
        let round = state.counters.rounds_done;
        let lr_g = scheduled_lr(config.generator_lr(), round, config.alternation_rounds);
        let lr_a = scheduled_lr(config.adversarial_lr(), round, config.alternation_rounds);
        for _ in 0..config.gen_steps_per_round {
            let mut rng = derived_rng(
                config.seed,
                STREAM_GENERATOR,
                state.counters.gen_updates as u64,
            );
            let batch = sampler.generator_batch(&config.gen_batch, &mut rng)?;
            let out = generator_step(state, &batch, config, lr_g)?;
            rows.push(LogRow {
                iter: state.counters.gen_updates + state.counters.adv_updates,
                phase: Phase::Generator,
                report: out.report,
            });
        }
        for _ in 0..config.adv_steps_per_round {
            let mut rng = derived_rng(
                config.seed,
                STREAM_ADVERSARIAL,
                state.counters.adv_updates as u64,
            );
            let large = sampler.foreground_batch(Role::Large, &config.adv_batch, &mut rng)?;
            let small = sampler.foreground_batch(Role::Small, &config.adv_batch, &mut rng)?;
            let out = adversarial_step(state, &large, &small, config, lr_a)?;
            log::debug!(
                "round {round}: L_a={:.4} adversarial accuracy={:.3}",
                out.report.l_a,
                out.accuracy.unwrap_or(f64::NAN)
            );
            rows.push(LogRow {
                iter: state.counters.gen_updates + state.counters.adv_updates,
                phase: Phase::Adversarial,
                report: out.report,
            });
        }
        state.counters.rounds_done += 1;
        on_round(state)?;
    }
    Ok(rows)
}

/// Seeded RNG for callers that need one outside the derived streams.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
