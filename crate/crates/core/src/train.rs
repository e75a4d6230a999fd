//! Mini-batch training with AdamW, early stopping on a validation metric,
//! and grid search over fusion weights.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Hypergraph, NodeId};
use crate::ingest::FeatureStore;
use crate::metrics::{self, EvalReport, ScoredLink};
use crate::model::{
    self, splitmix, DropoutSeeds, FusionWeights, ModelConfig, ModelParams, NodeInputs, Structure, WithheldCache, WithheldPlan,
};
use crate::split::{CandidateLink, EvalSplit, SplitBundle};

pub const LR_GRID: [f64; 4] = [5e-1, 5e-3, 5e-4, 5e-5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Map,
    MacroF1,
    Auc,
}

impl SelectionMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "map" => Some(Self::Map),
            "macro_f1" | "f1" => Some(Self::MacroF1),
            "auc" => Some(Self::Auc),
            _ => None,
        }
    }

    /// Value of this metric on `links`; F1 uses its best threshold.
    pub fn measure(self, links: &[ScoredLink]) -> Result<f64> {
        match self {
            Self::Map => metrics::mean_average_precision(links),
            Self::Auc => metrics::auc(links),
            Self::MacroF1 => metrics::macro_f1(links, metrics::select_threshold(links)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub fusion_resolution: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub selection_metric: SelectionMetric,
    /// Keep the best-validation epoch and stop on patience; when false the
    /// lowest-training-loss epoch is kept.
    pub select_on_validation: bool,
    /// Fusion used while training and for early stopping.
    pub train_fusion: FusionWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            weight_decay: 1e-6,
            batch_size: 4,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            fusion_resolution: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            selection_metric: SelectionMetric::Map,
            select_on_validation: true,
            train_fusion: FusionWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch_size and patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("beta1 and beta2 must lie in [0, 1) and eps must be positive");
        }
        self.train_fusion.validate()?;
        FusionWeights::grid(self.fusion_resolution).map(|_| ())
    }
}

/// Decoupled-weight-decay Adam with lazily created moment buffers.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Steps skipped because a gradient was not finite.
    pub skipped: usize,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new(), skipped: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Missing gradients count as zero. Returns `false` (and
    /// leaves everything untouched) when any gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64, weight_decay: f64) -> Result<bool> {
        if grads.len() != params.len() {
            return Err(Error::Shape { op: "adamw", left: (params.len(), 1), right: (grads.len(), 1) });
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape { op: "adamw", left: p.shape(), right: g.shape() });
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].map(|g| g.data());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * *x);
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation value of the selection metric, if it could be computed.
    pub validation: Option<f64>,
    pub param_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub learning_rate: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub skipped_steps: usize,
    /// Wall-clock seconds per epoch; kept out of the serialized history so
    /// that it stays reproducible.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn best_validation(&self) -> Option<f64> {
        self.best_epoch.and_then(|e| self.epochs[e].validation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fusion: FusionWeights,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSearch {
    pub best: FusionWeights,
    pub rows: Vec<SweepRow>,
    /// Set when nothing could be measured and the defaults were returned.
    pub fell_back: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub fusion: FusionWeights,
    pub threshold: f64,
    pub history: TrainHistory,
    pub sweep: FusionSearch,
}

/// Candidate links paired with their probabilities, keyed by node key.
pub fn scored_links(g: &Hypergraph, links: &[CandidateLink], probs: &[f64]) -> Vec<ScoredLink> {
    links
        .iter()
        .zip(probs)
        .map(|(l, &p)| ScoredLink::new(g.key(l.product), g.key(l.aspect), p, l.label.is_positive()))
        .collect()
}

/// Exhaustive fusion grid, keeping the first tuple with the best value.
pub fn search_fusion(resolution: f64, mut eval: impl FnMut(&FusionWeights) -> Result<f64>) -> Result<FusionSearch> {
    let mut rows = Vec::new();
    let mut best: Option<(f64, FusionWeights)> = None;
    for fw in FusionWeights::grid(resolution)? {
        let value = eval(&fw)?;
        if best.is_none_or(|(b, _)| value > b) {
            best = Some((value, fw));
        }
        rows.push(SweepRow { fusion: fw, value });
    }
    let best = best.map(|(_, fw)| fw).unwrap_or_default();
    Ok(FusionSearch { best, rows, fell_back: false })
}

/// Grid search of fusion weights by `metric` on a validation split. A
/// split without positives keeps `fallback`.
pub fn fusion_grid_search(
    params: &ModelParams,
    split: &EvalSplit,
    features: &FeatureStore,
    resolution: f64,
    metric: SelectionMetric,
    fallback: FusionWeights,
) -> Result<FusionSearch> {
    let fallback = FusionSearch { best: fallback, rows: Vec::new(), fell_back: true };
    if !split.candidates.iter().any(|c| c.label.is_positive()) {
        return Ok(fallback);
    }
    let cache = WithheldCache::new(params, &split.graph, features, &split.candidates)?;
    search_fusion(resolution, |fw| {
        let p = cache.probabilities(params, fw)?;
        metric.measure(&scored_links(&split.graph, &split.candidates, &p))
    })
}

/// Frozen-parameter probabilities for an evaluation split.
pub fn split_probabilities(params: &ModelParams, split: &EvalSplit, features: &FeatureStore, fw: &FusionWeights) -> Result<Vec<f64>> {
    model::predict_withheld(params, &split.graph, features, fw, &split.candidates)
}

/// Probabilities for candidates on the graph they were trained on.
pub fn held_in_probabilities(
    params: &ModelParams,
    g: &Hypergraph,
    features: &FeatureStore,
    fw: &FusionWeights,
    links: &[CandidateLink],
) -> Result<Vec<f64>> {
    model::predict_withheld(params, g, features, fw, links)
}

pub fn evaluate_split(
    params: &ModelParams,
    split: &EvalSplit,
    features: &FeatureStore,
    fw: &FusionWeights,
    threshold: f64,
    ks: &[usize],
) -> Result<EvalReport> {
    let p = split_probabilities(params, split, features, fw)?;
    metrics::evaluate(&scored_links(&split.graph, &split.candidates, &p), threshold, ks)
}

fn validation_value(
    params: &ModelParams,
    split: &EvalSplit,
    plan: &Option<WithheldPlan>,
    fw: &FusionWeights,
    metric: SelectionMetric,
) -> Option<f64> {
    let p = plan.as_ref()?.probabilities(params, fw).ok()?;
    metric.measure(&scored_links(&split.graph, &split.candidates, &p)).ok()
}

/// Shuffles within each aspect group, cuts groups into batches of at most
/// `size`, then shuffles the batch order. Every batch scores one aspect.
fn aspect_batches(groups: &mut [Vec<usize>], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    for g in groups.iter_mut() {
        g.shuffle(rng);
        batches.extend(g.chunks(size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains at `train_cfg.learning_rate`, keeps the best-validation epoch,
/// then selects fusion weights and the decision threshold on validation.
pub fn train(bundle: &SplitBundle, features: &FeatureStore, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if bundle.train_candidates.is_empty() {
        return Err(Error::Config("no training candidates".into()));
    }
    let mut params = ModelParams::init(model_cfg, features.dim(), splitmix(train_cfg.seed ^ 0x5eed))?;
    let train_inputs = NodeInputs::new(&bundle.train_graph, features)?;
    let val_ready = if bundle.val.candidates.is_empty() {
        None
    } else {
        Some(WithheldPlan::new(&bundle.val.graph, features, &bundle.val.candidates)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = AdamW::new(train_cfg.beta1, train_cfg.beta2, train_cfg.eps);
    let mut history = TrainHistory { learning_rate: train_cfg.learning_rate, ..Default::default() };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut by_aspect: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for (i, l) in bundle.train_candidates.iter().enumerate() {
        by_aspect.entry(l.aspect).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_aspect.into_values().collect();
    let fw = train_cfg.train_fusion;

    for epoch in 0..train_cfg.max_epochs {
        let started = Instant::now();
        let batches = aspect_batches(&mut groups, train_cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in &batches {
            let batch: Vec<CandidateLink> = chunk.iter().map(|&i| bundle.train_candidates[i]).collect();
            let mask = model::aspect_mask(&bundle.train_graph, &batch.iter().map(|l| l.aspect).collect());
            let structure = Structure::new(&bundle.train_graph, &mask, model_cfg.neighbor_cap.map(|c| (c, &mut rng)));
            let mut dropout = DropoutSeeds::on(rng.random());
            let mut tape = Tape::new();
            let pv = params.register(&mut tape, true);
            let probs = model::forward(&mut tape, &pv, model_cfg, &structure, &train_inputs, &fw, &batch, &mut dropout)?;
            let loss = model::loss(&mut tape, probs, &batch)?;
            loss_sum += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let gs: Vec<Option<&Tensor>> = (0..params.blocks.len()).map(|i| grads.get(i)).collect();
            let mut ts: Vec<&mut Tensor> = params.blocks.iter_mut().map(|b| &mut b.value).collect();
            adam.step(&mut ts, &gs, train_cfg.learning_rate, train_cfg.weight_decay)?;
        }
        let train_loss = loss_sum / bundle.train_candidates.len() as f64;
        let validation = validation_value(&params, &bundle.val, &val_ready, &fw, train_cfg.selection_metric);
        history.epochs.push(EpochRecord { epoch, train_loss, validation, param_norm: params.l2_norm() });
        history.epoch_seconds.push(started.elapsed().as_secs_f64());

        let value = validation.filter(|_| train_cfg.select_on_validation).unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, params.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.skipped_steps = adam.skipped;
    if let Some((_, p)) = best {
        params = p;
    }

    let sweep = fusion_grid_search(&params, &bundle.val, features, train_cfg.fusion_resolution, train_cfg.selection_metric, fw)?;
    let fusion = sweep.best;
    let threshold = if bundle.val.candidates.iter().any(|c| c.label.is_positive()) {
        let p = split_probabilities(&params, &bundle.val, features, &fusion)?;
        metrics::select_threshold(&scored_links(&bundle.val.graph, &bundle.val.candidates, &p))?
    } else {
        0.5
    };
    Ok(TrainOutcome { params, fusion, threshold, history, sweep })
}

/// Trains once per learning rate and keeps the run with the best
/// validation value. Also returns `(lr, best value)` for every setting.
pub fn train_lr_grid(
    bundle: &SplitBundle,
    features: &FeatureStore,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &[f64],
) -> Result<(TrainOutcome, Vec<(f64, f64)>)> {
    let mut best: Option<(f64, TrainOutcome)> = None;
    let mut table = Vec::new();
    for &lr in grid {
        let out = train(bundle, features, model_cfg, &TrainConfig { learning_rate: lr, ..train_cfg.clone() })?;
        let h = &out.history;
        let v = h.best_validation().or_else(|| h.best_epoch.map(|e| -h.epochs[e].train_loss)).unwrap_or(f64::NEG_INFINITY);
        table.push((lr, v));
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, out));
        }
    }
    let (_, out) = best.ok_or_else(|| Error::Config("empty learning-rate grid".into()))?;
    Ok((out, table))
}
