//! End-to-end runs: data, training phases, inference and evaluation.

use crate::config::{EvalConfig, RunConfig};
use crate::data::{generate_dataset, Dataset};
use crate::error::Result;
use crate::evaluation::{
    accuracy_recall_curve, log_average_miss_rate, nms, recall_accuracy, CurvePoint,
    DetectionRecord, RecallAccuracy, SizeBucket,
};
use crate::features::Level;
use crate::generator::super_resolve;
use crate::losses::bbox_decode;
use crate::trainer::{alternate, pretrain_perception, FeatureCache, LogRow, ModelState, Sampler};
use crate::{par, Error};

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
}

/// Training images are `0..train_images`; test images follow them.
pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let d = &cfg.data;
    Ok(Prepared {
        train: generate_dataset(
            &cfg.scene,
            &cfg.proposals,
            0,
            d.train_images,
            d.proposal_seed,
        )?,
        test: generate_dataset(
            &cfg.scene,
            &cfg.proposals,
            d.train_images,
            d.test_images,
            d.proposal_seed,
        )?,
    })
}

pub fn pretrain(cfg: &RunConfig, train: &Dataset) -> Result<(ModelState, Vec<LogRow>)> {
    let mut state = ModelState::new(&cfg.model, cfg.scene.num_classes, cfg.train.seed)?;
    let log = pretrain_perception(&mut state, train, &cfg.train)?;
    Ok((state, log))
}

/// Alternating phase on top of a pretrained (or partially trained) state.
pub fn train_gan(
    cfg: &RunConfig,
    state: &mut ModelState,
    train: &Dataset,
    on_round: impl FnMut(&ModelState) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let cache = FeatureCache::build(
        &state.backbone,
        train,
        state.config.generator.input_level,
        state.config.roi_hw(),
    )?;
    let sampler = Sampler::new(train, &cache)?;
    alternate(state, &sampler, &cfg.train, on_round)
}

/// A fresh generator and adversarial branch for `level` on top of the
/// pretrained backbone and perception branch.
pub fn branch_for_level(pretrained: &ModelState, level: Level, seed: u64) -> Result<ModelState> {
    let mut model = pretrained.config.clone();
    model.generator.input_level = level;
    let mut s = ModelState::new(&model, pretrained.num_classes, seed)?;
    s.backbone = pretrained.backbone.clone();
    s.perception = pretrained.perception.clone();
    s.velocity.backbone = pretrained.velocity.backbone.clone();
    s.velocity.perception = pretrained.velocity.perception.clone();
    s.counters.pretrain_iters = pretrained.counters.pretrain_iters;
    Ok(s)
}

/// Scores every proposal for every class, decodes boxes, and applies
/// per-class NMS. With `use_generator` the perception branch sees the
/// super-resolved features of all proposals, otherwise plain conv5 features.
pub fn detect(
    state: &ModelState,
    data: &Dataset,
    use_generator: bool,
    eval: &EvalConfig,
) -> Result<Vec<DetectionRecord>> {
    let cache = FeatureCache::build(
        &state.backbone,
        data,
        state.config.generator.input_level,
        state.config.roi_hw(),
    )?;
    let per_image = par::map_range(data.len(), |img| -> Result<Vec<DetectionRecord>> {
        let sample = &data.samples[img];
        let n = sample.proposals.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let picks: Vec<(usize, usize)> = (0..n).map(|p| (img, p)).collect();
        let batch = cache.gather(data, &picks)?;
        let features = if use_generator {
            super_resolve(&batch.conv5, &state.generator.residual(&batch.input)?)?
        } else {
            batch.conv5
        };
        let (out, _) = state.perception.forward(&features.data, n)?;
        let (w, h) = (sample.image.width as f64, sample.image.height as f64);
        let mut dets = Vec::new();
        for (i, p) in sample.proposals.iter().enumerate() {
            let probs = out.probs_of(i);
            for k in 1..=state.num_classes {
                let score = probs[k] as f64;
                if score < eval.min_score {
                    continue;
                }
                let offsets = state
                    .config
                    .decode_offsets(out.offsets_of(i, k).map(|v| v as f64));
                let bbox = bbox_decode(&p.bbox, offsets)?.clip(w, h);
                if bbox.is_well_formed() {
                    dets.push(DetectionRecord {
                        image_id: sample.image_id,
                        bbox,
                        class_id: k as u32,
                        score,
                    });
                }
            }
        }
        Ok(nms(&dets, eval.nms_iou))
    });
    let mut all = Vec::new();
    for d in per_image {
        all.extend(d?);
    }
    Ok(all)
}

/// Bucket filter with a name; `None` is every size.
pub const REPORT_BUCKETS: [(&str, Option<SizeBucket>); 4] = [
    ("all", None),
    ("small", Some(SizeBucket::Small)),
    ("medium", Some(SizeBucket::Medium)),
    ("large", Some(SizeBucket::Large)),
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, RecallAccuracy)>,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub lamr: f64,
}

impl EvalReport {
    pub fn bucket(&self, name: &str) -> Option<&RecallAccuracy> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

pub fn evaluate(
    detections: &[DetectionRecord],
    data: &Dataset,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let gts = data.annotations();
    let counted: Vec<DetectionRecord> = detections
        .iter()
        .filter(|d| d.score >= eval.score_threshold)
        .cloned()
        .collect();
    let rows = REPORT_BUCKETS
        .iter()
        .map(|(name, b)| {
            (
                name.to_string(),
                recall_accuracy(&counted, &gts, eval.iou_threshold, *b),
            )
        })
        .collect();
    let curves = REPORT_BUCKETS
        .iter()
        .map(|(name, b)| {
            (
                name.to_string(),
                accuracy_recall_curve(detections, &gts, eval.iou_threshold, *b),
            )
        })
        .collect();
    Ok(EvalReport {
        rows,
        curves,
        lamr: log_average_miss_rate(detections, &gts, data.len())?,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub baseline: EvalReport,
    pub full: EvalReport,
    pub pretrain_log: Vec<LogRow>,
    pub gan_log: Vec<LogRow>,
    pub state: ModelState,
}

/// Pretrain, evaluate the generator-free baseline, alternate, evaluate again.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    let data = prepare_data(cfg)?;
    let (mut state, pretrain_log) = pretrain(cfg, &data.train)?;
    let baseline = evaluate(
        &detect(&state, &data.test, false, &cfg.eval)?,
        &data.test,
        &cfg.eval,
    )?;
    let gan_log = train_gan(cfg, &mut state, &data.train, |_| Ok(()))?;
    let full = evaluate(
        &detect(&state, &data.test, true, &cfg.eval)?,
        &data.test,
        &cfg.eval,
    )?;
    Ok(ExperimentResult {
        baseline,
        full,
        pretrain_log,
        gan_log,
        state,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub input_level: Option<Level>,
    pub report: EvalReport,
}

/// The generator-free baseline plus one alternation-trained variant per
/// configured input level, all sharing one phase-1 model.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    if cfg.ablation.input_levels.is_empty() {
        return Err(Error::Config("no ablation variants configured".into()));
    }
    let data = prepare_data(cfg)?;
    let (pre, _) = pretrain(cfg, &data.train)?;
    let mut rows = vec![AblationRow {
        variant: "baseline".into(),
        input_level: None,
        report: evaluate(
            &detect(&pre, &data.test, false, &cfg.eval)?,
            &data.test,
            &cfg.eval,
        )?,
    }];
    for &level in &cfg.ablation.input_levels {
        let mut state = branch_for_level(&pre, level, cfg.train.seed)?;
        train_gan(cfg, &mut state, &data.train, |_| Ok(()))?;
        rows.push(AblationRow {
            variant: format!("alt_{level}"),
            input_level: Some(level),
            report: evaluate(
                &detect(&state, &data.test, true, &cfg.eval)?,
                &data.test,
                &cfg.eval,
            )?,
        });
    }
    Ok(rows)
}
