//! Training loop, sampling, optimiser and the baselines the trained models are
//! compared against.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::countstats::ProbabilityMap;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{LsrError, Result};
use crate::loss::{batch_loss_graph, scaled_target, BatchLayout, LossKind, LossMode, LossOptions, MIN_GROUP};
use crate::metrics::{threshold, DistanceMetric, EvalSummary, Evaluator};
use crate::model::{forward, init_params, predict_batch, stack_images, ModelParams, SegModelConfig};
use crate::provenance;
use crate::seed;
use crate::synth::{CountDistributionTable, Dataset, DatasetBlock, Split};

const STREAM_INIT: u64 = 0x494e_4954_0000_0001;
const STREAM_SAMPLER: u64 = 0x5341_4d50_0000_0001;
pub const RMSPROP_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossKind,
    pub alpha: f64,
    /// Defaults to 1e-5 for intra and 1e-3 for the grouped modes.
    pub learning_rate: Option<f64>,
    pub rmsprop_decay: f64,
    pub batch_size: usize,
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub epochs: usize,
    /// Overrides the default of one pass over the training split per epoch.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Validation every this many steps; 0 evaluates at epoch ends only.
    pub eval_every: usize,
    pub loss: LossOptions,
    pub model: SegModelConfig,
    /// Masked-metric band radius; defaults to the block side.
    pub band_radius: Option<usize>,
    pub distance: DistanceMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: LossKind::IntraInter,
            alpha: 0.8,
            learning_rate: None,
            rmsprop_decay: 0.9,
            batch_size: 30,
            group_size: 15,
            groups_per_batch: 2,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            eval_every: 0,
            loss: LossOptions::default(),
            model: SegModelConfig::default(),
            band_radius: None,
            distance: DistanceMetric::Euclidean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LossMode::new(self.mode, self.alpha).map_err(|_| LsrError::config("alpha", "must lie in (0, 1]"))?;
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(LsrError::config("learning_rate", "must be positive"));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(LsrError::config("rmsprop_decay", "must lie in (0, 1)"));
        }
        if self.group_size < MIN_GROUP {
            return Err(LsrError::config("group_size", "must be at least 2"));
        }
        if self.groups_per_batch == 0 || self.batch_size == 0 {
            return Err(LsrError::config("batch_size", "must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(LsrError::config("steps_per_epoch", "must be at least 1"));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            LossKind::Intra => 1e-5,
            _ => 1e-3,
        })
    }

    pub fn loss_mode(&self) -> Result<LossMode> {
        LossMode::new(self.mode, self.alpha)
    }

    pub fn radius(&self) -> usize {
        self.band_radius.unwrap_or(self.model.input_side)
    }

    fn blocks_per_batch(&self) -> usize {
        match self.mode {
            LossKind::Intra => self.batch_size,
            _ => self.group_size * self.groups_per_batch,
        }
    }

    fn steps_for(&self, n_train: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_train.div_ceil(self.blocks_per_batch()).max(1))
    }
}

/// `state <- d*state + (1-d)*g^2`, `param <- param - lr*g/(sqrt(state)+eps)`.
pub fn rmsprop_step(params: &mut [Tensor], grads: &[Tensor], state: &mut [Tensor], lr: f64, decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(LsrError::ShapeMismatch {
            op: "rmsprop",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.len()],
        });
    }
    for ((p, g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(LsrError::ShapeMismatch {
                op: "rmsprop",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
            *sv = decay * *sv + (1.0 - decay) * gv * gv;
            *pv -= lr * gv / (sv.sqrt() + RMSPROP_EPS);
        }
    }
    Ok(())
}

/// Indices into the training blocks plus how they are grouped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub layout: BatchLayout,
}

/// Draws batches: uniform blocks for intra, single-label groups otherwise.
pub struct Sampler {
    kind: LossKind,
    batch_size: usize,
    group_size: usize,
    groups_per_batch: usize,
    labels: Vec<usize>,
    by_label: Vec<(usize, Vec<usize>)>,
    weights: Option<WeightedIndex<usize>>,
}

impl Sampler {
    pub fn new(blocks: &[&DatasetBlock], config: &TrainConfig) -> Result<Self> {
        if blocks.is_empty() {
            return Err(LsrError::Empty("training split"));
        }
        let labels: Vec<usize> = blocks.iter().map(|b| b.low_res_label).collect();
        let n_labels = labels.iter().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); n_labels];
        for (i, &z) in labels.iter().enumerate() {
            members[z].push(i);
        }
        let mut by_label = Vec::new();
        let mut weights = None;
        if config.mode.grouped() {
            for (z, m) in members.into_iter().enumerate() {
                if m.len() >= config.group_size {
                    by_label.push((z, m));
                } else if !m.is_empty() {
                    log::warn!("label {z} has {} blocks, fewer than group size {}; excluded", m.len(), config.group_size);
                }
            }
            if by_label.is_empty() {
                return Err(LsrError::NoEligibleLabel(config.group_size));
            }
            weights = Some(
                WeightedIndex::new(by_label.iter().map(|(_, m)| m.len()))
                    .map_err(|e| LsrError::config("sampler", e.to_string()))?,
            );
        }
        Ok(Sampler {
            kind: config.mode,
            batch_size: config.batch_size,
            group_size: config.group_size,
            groups_per_batch: config.groups_per_batch,
            labels,
            by_label,
            weights,
        })
    }

    /// Labels eligible for grouping, in ascending order, with their block counts.
    pub fn eligible(&self) -> Vec<(usize, usize)> {
        self.by_label.iter().map(|(z, m)| (*z, m.len())).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SampledBatch {
        match &self.weights {
            None => {
                let n = self.labels.len();
                let k = self.batch_size.min(n);
                let mut indices = index::sample(rng, n, k).into_vec();
                indices.sort_unstable();
                let labels = indices.iter().map(|&i| self.labels[i]).collect();
                SampledBatch {
                    layout: BatchLayout {
                        labels,
                        group_sizes: vec![1; k],
                    },
                    indices,
                }
            }
            Some(w) => {
                let mut indices = Vec::with_capacity(self.group_size * self.groups_per_batch);
                let mut labels = Vec::with_capacity(self.groups_per_batch);
                for _ in 0..self.groups_per_batch {
                    let (z, members) = &self.by_label[w.sample(rng)];
                    let mut pick: Vec<usize> = index::sample(rng, members.len(), self.group_size)
                        .into_iter()
                        .map(|j| members[j])
                        .collect();
                    pick.sort_unstable();
                    indices.extend(pick);
                    labels.push(*z);
                }
                SampledBatch {
                    indices,
                    layout: BatchLayout {
                        labels,
                        group_sizes: vec![self.group_size; self.groups_per_batch],
                    },
                }
            }
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }
}

/// One batch from `blocks` under `config`, without keeping a sampler.
pub fn sample_groups<R: Rng>(blocks: &[&DatasetBlock], config: &TrainConfig, rng: &mut R) -> Result<SampledBatch> {
    Ok(Sampler::new(blocks, config)?.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Config {
        tool: String,
        config_hash: String,
        objective: String,
        config: TrainConfig,
        n_train: usize,
        n_params: usize,
    },
    Step {
        step: usize,
        loss: f64,
    },
    Eval {
        step: usize,
        split: Split,
        #[serde(flatten)]
        summary: EvalSummary,
    },
    Best {
        step: usize,
        masked_iou: f64,
    },
    Test {
        #[serde(flatten)]
        summary: EvalSummary,
    },
}

/// Append-only training history. Elapsed time is tracked but left out of the
/// serialized form so reruns produce identical files.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub wall_clock_secs: f64,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn test_summary(&self) -> Option<EvalSummary> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Test { summary } => Some(*summary),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| LsrError::format("run log", e.to_string())))
            .collect::<Result<_>>()?;
        Ok(RunLog {
            records,
            wall_clock_secs: 0.0,
        })
    }
}

/// Positive-class masks of every block, thresholded at 0.5.
pub fn predict_masks(params: &ModelParams, blocks: &[&DatasetBlock]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(blocks.len());
    for chunk in blocks.chunks(EVAL_CHUNK) {
        let images: Vec<&[f64]> = chunk.iter().map(|b| b.block.image.as_slice()).collect();
        for map in predict_batch(params, &images)? {
            out.push(threshold(map.class_plane(map.classes() - 1), 0.5));
        }
    }
    Ok(out)
}

pub fn evaluate_masks(preds: &[Vec<u8>], blocks: &[&DatasetBlock], radius: usize, metric: DistanceMetric) -> Result<EvalSummary> {
    if preds.len() != blocks.len() {
        return Err(LsrError::ShapeMismatch {
            op: "evaluate",
            lhs: vec![preds.len()],
            rhs: vec![blocks.len()],
        });
    }
    let mut e = Evaluator::new(radius, metric);
    for (p, b) in preds.iter().zip(blocks) {
        e.add(p, &b.block.gt_mask, b.side(), b.side())?;
    }
    Ok(e.summary())
}

pub fn evaluate_params(params: &ModelParams, blocks: &[&DatasetBlock], radius: usize, metric: DistanceMetric) -> Result<EvalSummary> {
    evaluate_masks(&predict_masks(params, blocks)?, blocks, radius, metric)
}

/// Each block filled with its label's positive target fraction, then
/// thresholded at 0.5.
pub fn low_res_masks(blocks: &[&DatasetBlock], table: &CountDistributionTable) -> Result<Vec<Vec<u8>>> {
    blocks
        .iter()
        .map(|b| {
            let eta = table.positive_eta(b.low_res_label)?;
            let n = b.block.gt_mask.len();
            Ok(vec![(eta >= 0.5) as u8; n])
        })
        .collect()
}

fn check_geometry(config: &TrainConfig, ds: &Dataset) -> Result<()> {
    let m = &config.model;
    if ds.config.block_side != m.input_side || ds.config.channels != m.input_channels {
        return Err(LsrError::config(
            "model.input_side",
            format!(
                "model expects {}x{} with {} channels, data has {}x{} with {}",
                m.input_side, m.input_side, m.input_channels, ds.config.block_side, ds.config.block_side, ds.config.channels
            ),
        ));
    }
    Ok(())
}

/// Everything a training step needs besides the parameters.
trait Objective {
    fn name(&self) -> String;
    fn loss(&self, g: &mut Graph, probs: Var, batch: &SampledBatch, blocks: &[&DatasetBlock]) -> Result<Var>;
}

struct CountObjective<'a> {
    mode: LossMode,
    table: &'a CountDistributionTable,
    opts: LossOptions,
}

impl Objective for CountObjective<'_> {
    fn name(&self) -> String {
        self.mode.kind.as_str().to_string()
    }

    fn loss(&self, g: &mut Graph, probs: Var, batch: &SampledBatch, _: &[&DatasetBlock]) -> Result<Var> {
        batch_loss_graph(g, probs, &batch.layout, self.mode, self.table, self.opts)
    }
}

struct PixelObjective;

impl Objective for PixelObjective {
    fn name(&self) -> String {
        "supervised".to_string()
    }

    /// Mean per-pixel negative log-likelihood of the ground-truth class.
    fn loss(&self, g: &mut Graph, probs: Var, batch: &SampledBatch, blocks: &[&DatasetBlock]) -> Result<Var> {
        let shape = g.shape(probs).to_vec();
        let (n, l) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        let mut picked = None;
        for c in 0..l {
            let mut onehot = Vec::with_capacity(n * plane);
            for &i in &batch.indices {
                let positive = c == l - 1;
                onehot.extend(blocks[i].block.gt_mask.iter().map(|&m| ((m == 1) == positive) as u8 as f64));
            }
            let mask = g.constant(Tensor::new(vec![n, 1, shape[2], shape[3]], onehot)?)?;
            let p = g.narrow(probs, 1, c, 1)?;
            let term = g.mul(mask, p)?;
            picked = Some(match picked {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let shifted = g.affine(picked.expect("at least two classes"), 1.0, 1e-12)?;
        let ll = g.log(shifted)?;
        let mean = g.mean(ll)?;
        g.affine(mean, -1.0, 0.0)
    }
}

fn run(
    config: &TrainConfig,
    ds: &Dataset,
    train_blocks: &[&DatasetBlock],
    objective: &dyn Objective,
) -> Result<(ModelParams, RunLog)> {
    config.validate()?;
    check_geometry(config, ds)?;
    let started = Instant::now();
    let val = ds.split(Split::Val);
    let test = ds.split(Split::Test);
    let radius = config.radius();
    let mut params = init_params(&config.model, seed::derive(config.seed, STREAM_INIT))?;
    let mut log = RunLog::default();
    log.push(LogRecord::Config {
        tool: provenance::TOOL.to_string(),
        config_hash: provenance::config_hash(config),
        objective: objective.name(),
        config: config.clone(),
        n_train: train_blocks.len(),
        n_params: config.model.param_count(),
    });

    let steps_per_epoch = config.steps_for(train_blocks.len());
    let total = config.epochs * steps_per_epoch;
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut evaluate = |params: &ModelParams, step: usize, log: &mut RunLog| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let summary = evaluate_params(params, &val, radius, config.distance)?;
        log::info!("step {step}/{total}: validation masked IoU {:.4}", summary.masked_iou);
        log.push(LogRecord::Eval {
            step,
            split: Split::Val,
            summary,
        });
        if best.as_ref().is_none_or(|(b, _, _)| summary.masked_iou > *b) {
            best = Some((summary.masked_iou, step, params.clone()));
        }
        Ok(())
    };

    if total > 0 {
        let sampler = Sampler::new(train_blocks, config)?;
        let mut rng = seed::rng(seed::derive(config.seed, STREAM_SAMPLER));
        let mut state: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let lr = config.lr();
        for step in 0..total {
            let batch = sampler.sample(&mut rng);
            let images: Vec<&[f64]> = batch.indices.iter().map(|&i| train_blocks[i].block.image.as_slice()).collect();
            let diverged = |loss: f64| LsrError::Divergence { step, loss };
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true)?;
            let x = g.constant(stack_images(&config.model, &images)?)?;
            let loss_var = forward(&mut g, &config.model, &vars, x)
                .and_then(|probs| objective.loss(&mut g, probs, &batch, train_blocks))
                .map_err(|e| match e {
                    LsrError::NonFinite { .. } => diverged(f64::NAN),
                    other => other,
                })?;
            let loss = g.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            g.backward(loss_var).map_err(|e| match e {
                LsrError::NonFinite { .. } => diverged(loss),
                other => other,
            })?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("param grad").clone()).collect();
            rmsprop_step(&mut params.tensors, &grads, &mut state, lr, config.rmsprop_decay)?;
            if params.tensors.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(loss));
            }
            log.push(LogRecord::Step { step, loss });
            let done = step + 1;
            let epoch_end = done % steps_per_epoch == 0;
            let scheduled = config.eval_every > 0 && done % config.eval_every == 0;
            if epoch_end || scheduled || done == total {
                evaluate(&params, done, &mut log)?;
            }
        }
    } else {
        evaluate(&params, 0, &mut log)?;
    }

    let chosen = match best {
        Some((masked_iou, step, p)) => {
            log.push(LogRecord::Best { step, masked_iou });
            p
        }
        None => params,
    };
    if !test.is_empty() {
        let summary = evaluate_params(&chosen, &test, radius, config.distance)?;
        log.push(LogRecord::Test { summary });
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((chosen, log))
}

/// Trains on the count objective of `config.mode`, returning the parameters
/// with the best validation masked IoU.
pub fn train(config: &TrainConfig, ds: &Dataset, table: &CountDistributionTable) -> Result<(ModelParams, RunLog)> {
    let train_blocks = ds.split(Split::Train);
    for b in &train_blocks {
        table.row(b.low_res_label)?;
    }
    let objective = CountObjective {
        mode: config.loss_mode()?,
        table,
        opts: config.loss,
    };
    run(config, ds, &train_blocks, &objective)
}

/// Pixel-supervised training on a small labelled subset, drawn as uniform
/// batches of `config.batch_size`.
pub fn train_supervised_baseline(config: &TrainConfig, ds: &Dataset, subset: &[&DatasetBlock]) -> Result<(ModelParams, RunLog)> {
    if subset.is_empty() {
        return Err(LsrError::Empty("supervised subset"));
    }
    let cfg = TrainConfig {
        mode: LossKind::Intra,
        ..config.clone()
    };
    run(&cfg, ds, subset, &PixelObjective)
}

/// One row of the alpha sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub test: EvalSummary,
    /// Std actually matched for the positive class, per bin.
    pub target_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub rows: Vec<AlphaRow>,
}

impl AlphaSweep {
    pub fn best(&self) -> Option<&AlphaRow> {
        self.rows
            .iter()
            .fold(None, |acc: Option<&AlphaRow>, r| match acc {
                Some(a) if a.test.masked_iou >= r.test.masked_iou => Some(a),
                _ => Some(r),
            })
    }
}

/// Trains and tests once per alpha with everything else held fixed.
pub fn ablate_alpha(
    base: &TrainConfig,
    alphas: &[f64],
    ds: &Dataset,
    table: &CountDistributionTable,
) -> Result<(AlphaSweep, Vec<RunLog>)> {
    if alphas.is_empty() {
        return Err(LsrError::Empty("alpha list"));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    let mut logs = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = TrainConfig { alpha, ..base.clone() };
        let mode = cfg.loss_mode()?;
        let (_, log) = train(&cfg, ds, table)?;
        let classes = table.classes;
        let target_std = table
            .rows
            .iter()
            .map(|r| scaled_target(table, classes - 1, r.bin, mode.effective_alpha()).map(|t| t.rho))
            .collect::<Result<_>>()?;
        rows.push(AlphaRow {
            alpha,
            test: log.test_summary().unwrap_or_default(),
            target_std,
        });
        logs.push(log);
    }
    Ok((AlphaSweep { rows }, logs))
}

/// Probability maps of the positive class, for figures.
pub fn predict_maps(params: &ModelParams, blocks: &[&DatasetBlock]) -> Result<Vec<ProbabilityMap>> {
    let mut out = Vec::with_capacity(blocks.len());
    for chunk in blocks.chunks(EVAL_CHUNK) {
        let images: Vec<&[f64]> = chunk.iter().map(|b| b.block.image.as_slice()).collect();
        out.extend(predict_batch(params, &images)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{batch_loss, Group};
    use crate::synth::{build_table_mask_estimation, generate_dataset, GeneratorConfig};

    fn tiny_data(n_train: usize) -> Dataset {
        let cfg = GeneratorConfig {
            block_side: 8,
            n_train,
            n_val: 6,
            n_test: 6,
            ..GeneratorConfig::default()
        };
        generate_dataset(&cfg, 11).unwrap()
    }

    fn tiny_config(mode: LossKind) -> TrainConfig {
        TrainConfig {
            mode,
            group_size: 3,
            batch_size: 6,
            epochs: 1,
            steps_per_epoch: Some(3),
            model: SegModelConfig {
                input_side: 8,
                base_width: 2,
                depth: 1,
                ..SegModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn loose_table(ds: &Dataset) -> CountDistributionTable {
        let mut t = CountDistributionTable::reference_cancer_table();
        let blocks: Vec<_> = ds.blocks.iter().collect();
        if let Ok(m) = build_table_mask_estimation(&blocks, &ds.config.bins, 20) {
            t = m;
        }
        t
    }

    #[test]
    fn rmsprop_zero_gradient_decays_state_only() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let mut s = vec![Tensor::new(vec![2], vec![4.0, 1.0]).unwrap()];
        rmsprop_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1, 0.9).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s[0].data(), &[0.9 * 4.0, 0.9]);
    }

    #[test]
    fn rmsprop_constant_gradient_follows_recurrence() {
        let (lr, d, g) = (0.01, 0.9, 0.5);
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = vec![Tensor::scalar(0.0)];
        let (mut pr, mut sr) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            rmsprop_step(&mut p, &[Tensor::scalar(g)], &mut s, lr, d).unwrap();
            sr = d * sr + (1.0 - d) * g * g;
            pr -= lr * g / (sr.sqrt() + 1e-8);
        }
        assert_eq!(p[0].item().unwrap(), pr);
        // Step size approaches lr once the state converges to g^2.
        let last = lr * g / (sr.sqrt() + 1e-8);
        assert!((last - lr).abs() < 1e-6);
        assert!(rmsprop_step(&mut p, &[Tensor::zeros(&[3])], &mut s, lr, d).is_err());
    }

    #[test]
    fn single_label_exact_group_is_unique() {
        let ds = tiny_data(40);
        let z = ds.blocks[0].low_res_label;
        let blocks: Vec<&DatasetBlock> = ds.blocks.iter().filter(|b| b.low_res_label == z).collect();
        let cfg = TrainConfig {
            group_size: blocks.len(),
            groups_per_batch: 1,
            ..tiny_config(LossKind::Inter)
        };
        let b = sample_groups(&blocks, &cfg, &mut seed::rng(3)).unwrap();
        assert_eq!(b.indices, (0..blocks.len()).collect::<Vec<_>>());
        let too_big = TrainConfig {
            group_size: blocks.len() + 1,
            ..cfg
        };
        assert!(matches!(
            sample_groups(&blocks, &too_big, &mut seed::rng(3)),
            Err(LsrError::NoEligibleLabel(_))
        ));
    }

    #[test]
    fn groups_share_a_label_and_sampling_repeats() {
        let ds = tiny_data(60);
        let blocks = ds.split(Split::Train);
        let cfg = tiny_config(LossKind::IntraInter);
        let s = Sampler::new(&blocks, &cfg).unwrap();
        let mut r1 = seed::rng(5);
        let mut r2 = seed::rng(5);
        for _ in 0..20 {
            let a = s.sample(&mut r1);
            assert_eq!(a, s.sample(&mut r2));
            for (start, len, z) in a.layout.runs() {
                let ids = &a.indices[start..start + len];
                assert!(ids.iter().all(|&i| blocks[i].low_res_label == z));
                let mut d = ids.to_vec();
                d.dedup();
                assert_eq!(d.len(), len);
            }
        }
    }

    #[test]
    fn zero_epochs_return_init_params() {
        let ds = tiny_data(20);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config(LossKind::Intra)
        };
        let (p, log) = train(&cfg, &ds, &loose_table(&ds)).unwrap();
        assert_eq!(p, init_params(&cfg.model, seed::derive(cfg.seed, STREAM_INIT)).unwrap());
        assert!(log.step_losses().is_empty());
    }

    #[test]
    fn first_logged_loss_is_plain_loss_on_first_batch() {
        let ds = tiny_data(40);
        let table = loose_table(&ds);
        for mode in [LossKind::Intra, LossKind::IntraInter] {
            let cfg = tiny_config(mode);
            let (_, log) = train(&cfg, &ds, &table).unwrap();
            let train_blocks = ds.split(Split::Train);
            let sampler = Sampler::new(&train_blocks, &cfg).unwrap();
            let batch = sampler.sample(&mut seed::rng(seed::derive(cfg.seed, STREAM_SAMPLER)));
            let init = init_params(&cfg.model, seed::derive(cfg.seed, STREAM_INIT)).unwrap();
            let images: Vec<&[f64]> = batch.indices.iter().map(|&i| train_blocks[i].block.image.as_slice()).collect();
            let maps = predict_batch(&init, &images).unwrap();
            let groups: Vec<Group> = batch
                .layout
                .runs()
                .map(|(s, l, z)| Group { z, maps: maps[s..s + l].to_vec() })
                .collect();
            let plain = batch_loss(&groups, cfg.loss_mode().unwrap(), &table, cfg.loss).unwrap();
            assert!((log.step_losses()[0] - plain).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = tiny_data(40);
        let table = loose_table(&ds);
        let cfg = tiny_config(LossKind::IntraInter);
        let (p1, l1) = train(&cfg, &ds, &table).unwrap();
        let (p2, l2) = train(&cfg, &ds, &table).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1.to_jsonl(), l2.to_jsonl());
        assert_eq!(RunLog::from_jsonl(&l1.to_jsonl()).unwrap().records, l1.records);
    }

    #[test]
    fn supervised_loss_drops_on_separable_data() {
        let cfg_data = GeneratorConfig {
            block_side: 8,
            n_train: 12,
            n_val: 2,
            n_test: 2,
            class_contrast: 0.8,
            texture_amplitude: 0.0,
            illumination_amplitude: 0.0,
            pixel_noise: 0.0,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&cfg_data, 2).unwrap();
        let subset = ds.split(Split::Train);
        let cfg = TrainConfig {
            batch_size: 12,
            learning_rate: Some(1e-3),
            epochs: 10,
            steps_per_epoch: Some(1),
            ..tiny_config(LossKind::Intra)
        };
        let (_, log) = train_supervised_baseline(&cfg, &ds, &subset).unwrap();
        let losses = log.step_losses();
        assert_eq!(losses.len(), 10);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(train_supervised_baseline(&cfg, &ds, &[]).is_err());
        let (_, again) = train_supervised_baseline(&cfg, &ds, &subset).unwrap();
        assert_eq!(again.to_jsonl(), log.to_jsonl());
    }

    #[test]
    fn low_res_baseline_thresholds_eta() {
        let ds = tiny_data(10);
        let t = CountDistributionTable::reference_cancer_table();
        let blocks: Vec<&DatasetBlock> = ds.blocks.iter().collect();
        let masks = low_res_masks(&blocks, &t).unwrap();
        for (m, b) in masks.iter().zip(&blocks) {
            let want = (b.low_res_label == 9) as u8;
            assert!(m.iter().all(|&v| v == want));
        }
    }
}
