//! Training, evaluation and score pretraining.
//!
//! Every parameter group except the GGNN is updated with SGD; the GGNN uses
//! Adam. Gradients are averaged over a batch before one update. The data
//! order of epoch `e` is a shuffle drawn from a generator seeded by
//! `(seed, e)`, so runs are reproducible bit for bit.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::scores::ScoreTable;
use crate::data::{Dataset, Sample, SampleInput};
use crate::error::{KerlError, Result};
use crate::graph::KnowledgeGraph;
use crate::model::{Model, ModelConfig, ModelGrads, RegionHead, Variant};
use crate::nn::{argmax, cross_entropy, softmax, Linear};
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::regions::{fuse_scores, location_scores, normalize_unit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub flip: bool,
    /// Let gradients reach the scorer that produces the graph-initialization
    /// scores (requires a scorer model).
    pub score_flow_through: bool,
    /// Epochs for the highlighted-region head; 0 skips it.
    pub region_epochs: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Kerl,
            epochs: 30,
            batch_size: 16,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            flip: false,
            score_flow_through: false,
            region_epochs: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(KerlError::Invalid("batch_size must be positive".into()));
        }
        Sgd::new(self.sgd)?;
        Adam::new(self.adam)?;
        self.model.ggnn.validate()?;
        if !self.model.precomputed {
            self.model.backbone.validate()?;
        }
        if self.model.sketch.c == 0 {
            return Err(KerlError::Invalid("sketch width must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the metrics file. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// What training needs besides the config.
#[derive(Default)]
pub struct TrainInputs<'a> {
    pub train: Option<&'a Dataset>,
    pub eval: Option<&'a Dataset>,
    pub graph: Option<&'a KnowledgeGraph>,
    /// Cached class scores keyed by sample id.
    pub scores: Option<&'a ScoreTable>,
    /// Backbone weights to start from (typically the pretrained baseline).
    pub init: Option<&'a Model>,
    /// Online scorer for flow-through training.
    pub scorer: Option<Model>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn sample_scores<'a>(model: &Model, table: Option<&'a ScoreTable>, sample: &Sample) -> Result<Option<&'a [f64]>> {
    if !model.variant.uses_graph() || model.scorer.is_some() {
        return Ok(None);
    }
    let table = table.ok_or_else(|| {
        KerlError::Missing(format!(
            "variant {} needs cached class scores; run pretrain first",
            model.variant
        ))
    })?;
    table.get(sample.id).map(Some)
}

/// Builds the model for `cfg` and fits it on `inputs.train`.
pub fn train(inputs: TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = inputs
        .train
        .ok_or_else(|| KerlError::Missing("no training data".into()))?;
    if data.is_empty() {
        return Err(KerlError::Invalid("training set is empty".into()));
    }
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(
        cfg.variant,
        cfg.model.clone(),
        data.num_classes(),
        inputs.graph.cloned(),
        &mut rng,
    )?;
    if let Some(init) = inputs.init {
        match (&mut model.params.backbone, &init.params.backbone) {
            (Some(dst), Some(src)) if dst.convs.len() == src.convs.len() => dst.clone_from(src),
            (None, None) => {}
            _ => return Err(KerlError::Shape("initial backbone does not match the model".into())),
        }
    }
    if cfg.score_flow_through && cfg.variant.uses_graph() {
        let scorer = inputs
            .scorer
            .ok_or_else(|| KerlError::Missing("score flow-through needs a pretrained scorer".into()))?;
        if scorer.variant != Variant::Baseline || scorer.num_classes != model.num_classes {
            return Err(KerlError::Invalid("the scorer must be a baseline model over the same classes".into()));
        }
        model.scorer = Some(Box::new(scorer));
    }
    if model.variant.uses_graph() && model.scorer.is_none() {
        let table = inputs.scores.ok_or_else(|| {
            KerlError::Missing(format!("variant {} needs cached class scores; run pretrain first", cfg.variant))
        })?;
        for s in &data.samples {
            table.get(s.id)?;
        }
    }

    let mut sgd = Sgd::new(cfg.sgd)?;
    let mut adam = Adam::new(cfg.adam)?;
    let mut scorer_sgd = Sgd::new(cfg.sgd)?;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let initial = evaluate(&model, data, inputs.scores, EvalMode::Plain).map_err(|e| diverged(e, 0, 0, f64::NAN))?;
    history.push(EpochMetrics {
        epoch: 0,
        train_loss: initial.mean_loss,
        train_accuracy: initial.accuracy,
        eval_accuracy: None,
        eval_loss: None,
    });
    if let Some(e) = inputs.eval {
        let r = evaluate(&model, e, inputs.scores, EvalMode::Plain)?;
        history[0].eval_accuracy = Some(r.accuracy);
        history[0].eval_loss = Some(r.mean_loss);
    }

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut flip_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf11f);
        flip_rng.set_stream(epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = model.zero_grads();
            for &i in batch {
                let sample = &data.samples[i];
                let flip = cfg.flip && flip_rng.random_bool(0.5);
                let scores = sample_scores(&model, inputs.scores, sample)?;
                let trace = model.forward(sample, scores, flip).map_err(|e| diverged(e, epoch, step, f64::NAN))?;
                let (loss, dl) = cross_entropy(trace.logits.view(), sample.label);
                if !loss.is_finite() {
                    return Err(KerlError::Diverged { epoch, step, loss });
                }
                loss_sum += loss;
                correct += usize::from(argmax(trace.logits.view()) == sample.label);
                let g = model.backward(&trace, &dl).map_err(|e| diverged(e, epoch, step, loss))?;
                acc.add_scaled(&g, 1.0);
            }
            acc.scale(1.0 / batch.len() as f64);
            apply_update(&mut model, &acc, &mut sgd, &mut adam, &mut scorer_sgd)?;
            if !crate::nn::all_finite(&model.params) {
                return Err(KerlError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
        }
        let mut row = EpochMetrics {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            eval_accuracy: None,
            eval_loss: None,
        };
        if let Some(e) = inputs.eval {
            let r = evaluate(&model, e, inputs.scores, EvalMode::Plain)?;
            row.eval_accuracy = Some(r.accuracy);
            row.eval_loss = Some(r.mean_loss);
        }
        history.push(row);
    }

    if cfg.region_epochs > 0 {
        train_region_head(&mut model, data, inputs.scores, cfg)?;
    }
    Ok(TrainOutcome { model, history })
}

fn diverged(e: KerlError, epoch: usize, step: usize, loss: f64) -> KerlError {
    if e.is_numeric() {
        KerlError::Diverged { epoch, step, loss }
    } else {
        e
    }
}

/// SGD for backbone, fusion and scorer parameters; Adam for the GGNN. The
/// scorer keeps its own momentum buffers.
pub fn apply_update(
    model: &mut Model,
    grads: &ModelGrads,
    sgd: &mut Sgd,
    adam: &mut Adam,
    scorer_sgd: &mut Sgd,
) -> Result<()> {
    if let (Some(p), Some(g)) = (&mut model.params.backbone, &grads.params.backbone) {
        sgd.step(p, g)?;
    }
    sgd.step(&mut model.params.fusion, &grads.params.fusion)?;
    if let (Some(p), Some(g)) = (&mut model.params.ggnn, &grads.params.ggnn) {
        adam.step(p, g)?;
    }
    if let (Some(scorer), Some(g)) = (&mut model.scorer, &grads.scorer) {
        scorer_sgd.step(&mut scorer.params, &g.params)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Plain,
    WithRegions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<f64>,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
    /// Mean share of gate mass on ground-truth attribute cells (gated variants).
    pub gate_mass: Option<f64>,
    /// Same share for the normalized location scores.
    pub location_mass: Option<f64>,
    /// Mean fraction of the image covered by ground-truth attributes.
    pub chance_mass: Option<f64>,
    /// Fraction of samples whose top-scoring cell touches an attribute.
    pub top_cell_hit: Option<f64>,
    /// Mean fraction of cells touching an attribute.
    pub top_cell_chance: Option<f64>,
}

/// Fraction of every feature cell covered by the masks. Cells tile the
/// full image evenly.
pub fn cell_coverage(sample: &Sample, map_h: usize, map_w: usize) -> Option<Array2<f64>> {
    let img = match &sample.input {
        SampleInput::Image(img) => img,
        _ => return None,
    };
    if sample.masks.is_empty() {
        return None;
    }
    let cw = img.width as f64 / map_w as f64;
    let ch = img.height as f64 / map_h as f64;
    Some(Array2::from_shape_fn((map_h, map_w), |(r, c)| {
        let cell = crate::data::PixelRect {
            x: c as f64 * cw,
            y: r as f64 * ch,
            w: cw,
            h: ch,
        };
        let covered: f64 = sample.masks.iter().map(|m| m.rect.intersect(&cell)).sum();
        (covered / cell.area()).min(1.0)
    }))
}

/// `Σ w·cover / Σ w`; `None` when the weights sum to zero.
pub fn mass_on_masks(weights: &Array2<f64>, cover: &Array2<f64>) -> Option<f64> {
    let total = weights.sum();
    if total > 0.0 {
        Some((weights * cover).sum() / total)
    } else {
        None
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn evaluate(model: &Model, data: &Dataset, scores: Option<&ScoreTable>, mode: EvalMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(KerlError::Invalid("evaluation set is empty".into()));
    }
    if mode == EvalMode::WithRegions && model.region_head.is_none() {
        return Err(KerlError::Missing(
            "the checkpoint has no region head; train with region_epochs > 0".into(),
        ));
    }
    let c = model.num_classes;
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let (mut gate, mut loc, mut chance, mut top, mut top_chance) = (vec![], vec![], vec![], vec![], vec![]);
    for sample in &data.samples {
        let trace = model.forward(sample, sample_scores(model, scores, sample)?, false)?;
        let mut probs = trace.probabilities();
        if mode == EvalMode::WithRegions {
            let head = model.region_head.as_ref().expect("checked above");
            let desc = model.region_descriptor(sample, &trace)?;
            probs = fuse_scores(&probs, &softmax(head.cls.forward(desc.view()).view()))?;
        }
        loss_sum += -probs[sample.label].max(f64::MIN_POSITIVE).ln();
        let pred = argmax(probs.view());
        predictions.push(pred);
        counts[sample.label] += 1;
        hits[sample.label] += usize::from(pred == sample.label);

        let saliency = location_scores(&trace.saliency_source());
        let (h, w) = saliency.dim();
        if let Some(cover) = cell_coverage(sample, h, w) {
            chance.push(cover.mean().expect("non-empty map"));
            let normalized = normalize_unit(&saliency);
            loc.push(mass_on_masks(&normalized, &cover).unwrap_or(chance[chance.len() - 1]));
            if let Some(g) = trace.gate_map() {
                if let Some(m) = mass_on_masks(&g.location_mass(), &cover) {
                    gate.push(m);
                }
            }
            let flat = Array1::from_iter(saliency.iter().copied());
            let best = argmax(flat.view());
            top.push(if cover[[best / w, best % w]] > 0.0 { 1.0 } else { 0.0 });
            top_chance.push(cover.iter().filter(|&&v| v > 0.0).count() as f64 / cover.len() as f64);
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
            .collect(),
        mean_loss: loss_sum / data.len() as f64,
        predictions,
        gate_mass: mean(&gate),
        location_mass: mean(&loc),
        chance_mass: mean(&chance),
        top_cell_hit: mean(&top),
        top_cell_chance: mean(&top_chance),
    })
}

/// Softmax outputs of a trained baseline for every sample of every dataset.
pub fn pretrain_scores(model: &Model, datasets: &[&Dataset]) -> Result<ScoreTable> {
    if model.variant != Variant::Baseline {
        return Err(KerlError::Invalid("scores come from a baseline model".into()));
    }
    let mut table = ScoreTable::new(model.num_classes);
    for data in datasets {
        for s in &data.samples {
            let p = softmax(model.logits(s, None)?.view());
            table.insert(s.id, p.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        }
    }
    Ok(table)
}

/// Scores where every training sample is scored by a baseline that never saw
/// it: sample `i` falls in fold `i % folds` and is scored by a model fit on the
/// other folds. Samples of `others` are scored by `full`. Fewer than two folds
/// scores the training set with `full` as well.
pub fn crossfit_scores(
    full: &Model,
    train_set: &Dataset,
    others: &[&Dataset],
    cfg: &TrainConfig,
    folds: usize,
) -> Result<ScoreTable> {
    let mut table = pretrain_scores(full, others)?;
    if folds < 2 {
        table.entries.extend(pretrain_scores(full, &[train_set])?.entries);
        return Ok(table);
    }
    if folds > train_set.len() {
        return Err(KerlError::Invalid(format!(
            "{folds} folds for {} training samples",
            train_set.len()
        )));
    }
    let mut fold_cfg = cfg.clone();
    fold_cfg.variant = Variant::Baseline;
    fold_cfg.region_epochs = 0;
    for f in 0..folds {
        let split = |keep: bool| Dataset {
            registry: train_set.registry.clone(),
            samples: train_set
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| (i % folds != f) == keep)
                .map(|(_, s)| s.clone())
                .collect(),
        };
        fold_cfg.seed = cfg.seed.wrapping_add(f as u64 + 1);
        let model = train(
            TrainInputs {
                train: Some(&split(true)),
                ..Default::default()
            },
            &fold_cfg,
        )?
        .model;
        table.entries.extend(pretrain_scores(&model, &[&split(false)])?.entries);
    }
    Ok(table)
}

/// Fits the region head on frozen features.
pub fn train_region_head(model: &mut Model, data: &Dataset, scores: Option<&ScoreTable>, cfg: &TrainConfig) -> Result<()> {
    let mut descriptors = Vec::with_capacity(data.len());
    for s in &data.samples {
        let trace = model.forward(s, sample_scores(model, scores, s)?, false)?;
        descriptors.push(model.region_descriptor(s, &trace)?);
    }
    let width = descriptors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4e61);
    let mut head = RegionHead {
        cls: Linear::init(width, model.num_classes, &mut rng),
    };
    let mut sgd = Sgd::new(cfg.sgd)?;
    for epoch in 1..=cfg.region_epochs {
        let order = epoch_order(cfg.seed ^ 0x4e61, epoch, data.len());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = RegionHead {
                cls: Linear::zeros(width, model.num_classes),
            };
            for &i in batch {
                let logits = head.cls.forward(descriptors[i].view());
                let (loss, dl) = cross_entropy(logits.view(), data.samples[i].label);
                if !loss.is_finite() {
                    return Err(KerlError::Diverged { epoch, step, loss });
                }
                head.cls.backward(descriptors[i].view(), dl.view(), &mut grad.cls);
            }
            crate::nn::scale(&mut grad, 1.0 / batch.len() as f64);
            sgd.step(&mut head, &grad)?;
        }
    }
    model.region_head = Some(head);
    Ok(())
}
