//! Training loop: AdamW with two learning-rate groups, an exponential moving
//! average of the weights, and model selection on corrected validation SR.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::eval::correct_return;
use crate::loss::LossConfig;
use crate::model::{infer, is_text_param, EpisodeInput, Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::{rng_for, stream};
use crate::synthworld::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_backbone: f64,
    pub lr_text: f64,
    /// Fraction of iterations spent ramping the text learning rate up.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Micro-batches averaged per optimizer step.
    pub accumulate: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 5000,
            lr_backbone: 1e-4,
            lr_text: 1e-5,
            warmup_fraction: 0.1,
            weight_decay: 1e-2,
            ema_decay: 0.9998,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            eval_every: 500,
            clip_norm: None,
            accumulate: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: String| Err(Error::config(format!("train.{k}"), r));
        if self.iterations == 0 {
            return bad("iterations", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.accumulate == 0 {
            return bad("accumulate", "must be positive".into());
        }
        if !(self.lr_backbone > 0.0) {
            return bad("lr_backbone", format!("must be > 0, got {}", self.lr_backbone));
        }
        if !(self.lr_text > 0.0) {
            return bad("lr_text", format!("must be > 0, got {}", self.lr_text));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", format!("must be in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", format!("must be in [0, 1], got {}", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must be in [0, 1)".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm", "must be positive".into());
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.iterations as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Text,
    Backbone,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if is_text_param(name) {
            ParamGroup::Text
        } else {
            ParamGroup::Backbone
        }
    }
}

/// Learning rate at `iteration`: constant for the backbone; for the text
/// group a linear ramp from 0 over the warmup, then linear decay to 0 at the
/// final iteration.
pub fn lr_at(cfg: &TrainConfig, group: ParamGroup, iteration: usize) -> f64 {
    match group {
        ParamGroup::Backbone => cfg.lr_backbone,
        ParamGroup::Text => {
            let warm = cfg.warmup_steps();
            let total = cfg.iterations;
            if iteration < warm {
                cfg.lr_text * iteration as f64 / warm as f64
            } else if iteration >= total {
                0.0
            } else {
                cfg.lr_text * (total - iteration) as f64 / (total - warm) as f64
            }
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. Weight decay `p -= lr * wd * p` is applied separately
/// from the bias-corrected moment step. `lr` gives the rate per parameter.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!("gradient for `{name}`: {:?} vs {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let rate = lr(&name);
        let Some(g) = grads.get(&name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        if m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!("optimizer state for `{name}`")));
        }
        let p = params.get_mut(&name).expect("checked above");
        let decay = 1.0 - rate * cfg.weight_decay;
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi = *pi * decay - rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// `ema = decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let e = ema
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("EMA lacks parameter `{name}`")))?;
        if e.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!("EMA shape for `{name}`")));
        }
        e.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a = decay * *a + (1.0 - decay) * b);
    }
    Ok(())
}

/// Decay used after `updates` EMA updates: the configured decay, capped by
/// `(1 + n) / (10 + n)` so early averages are not dominated by the
/// initialization.
pub fn effective_ema_decay(decay: f64, updates: u64) -> f64 {
    let n = updates as f64;
    decay.min((1.0 + n) / (10.0 + n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr_text: f64,
    pub lr_backbone: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

pub struct TrainSetup<'a> {
    pub world: &'a World,
    pub train: &'a [Episode],
    pub val: &'a [Episode],
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub train_cfg: &'a TrainConfig,
    /// Success radius for the validation metric.
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// EMA weights at the best validation point (or at the end without a
    /// validation set).
    pub best: Model,
    pub best_iteration: usize,
    pub best_metric: Option<f64>,
    /// Raw weights after the final iteration.
    pub last: Model,
    pub log: Vec<LogEntry>,
}

/// Share of episodes whose return-corrected trajectory ends within `radius`
/// of the target.
pub fn corrected_success_rate(model: &Model, world: &World, episodes: &[Episode], inputs: &[EpisodeInput], radius: f64) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let g = &world.graph;
    let mut hits = 0usize;
    for (chunk_eps, chunk_in) in episodes.chunks(32).zip(inputs.chunks(32)) {
        let probs = model.forward(chunk_in)?;
        for (ep, p) in chunk_eps.iter().zip(&probs) {
            let traj = g.path_from_ids(&ep.path)?;
            let corrected = correct_return(g, &traj, infer(p)?)?;
            let target = g.node(&ep.target)?;
            if g.geodesic(corrected.end(), target)? <= radius {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / episodes.len() as f64)
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Runs the training loop. Each log entry is also written as a JSON line to
/// `log_sink` when given.
pub fn train(setup: &TrainSetup, mut log_sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let cfg = setup.train_cfg;
    cfg.validate()?;
    setup.loss.validate()?;
    if setup.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let world = setup.world;
    let bank = world.feature_bank();
    let to_inputs = |eps: &[Episode]| -> Result<Vec<EpisodeInput>> {
        eps.iter().map(|e| EpisodeInput::from_episode(world, &bank, e)).collect()
    };
    let train_inputs = to_inputs(setup.train)?;
    let val_inputs = to_inputs(setup.val)?;
    let labels: Vec<Vec<f64>> = setup.train.iter().map(Episode::labels).collect();
    let positives: f64 = labels.iter().flatten().sum();
    let steps: usize = labels.iter().map(Vec::len).sum();
    let loss_cfg = setup.loss.resolved(positives / steps as f64);

    let mut model = Model::init(setup.model.clone(), bank.dim, world.spec.feature_dim, cfg.seed)?;
    let mut ema = model.params.clone();
    let mut ema_updates = 0u64;
    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut next_batch = |n: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if cursor == order.len() {
                order = (0..train_inputs.len()).collect();
                order.shuffle(&mut rng_for(cfg.seed, &[stream::BATCH, epoch]));
                epoch += 1;
                cursor = 0;
            }
            out.push(order[cursor]);
            cursor += 1;
        }
        out
    };

    for it in 0..cfg.iterations {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        for micro in 0..cfg.accumulate {
            let idx = next_batch(cfg.batch_size);
            let inputs: Vec<EpisodeInput> = idx.iter().map(|&i| train_inputs[i].clone()).collect();
            let ys: Vec<Vec<f64>> = idx.iter().map(|&i| labels[i].clone()).collect();
            let rng = rng_for(cfg.seed, &[stream::DROPOUT, it as u64, micro as u64]);
            let (value, g) = model.loss_and_grads(&inputs, &ys, &loss_cfg, Some(rng))?;
            if !value.is_finite() {
                return Err(Error::DivergedLoss { iteration: it, value });
            }
            loss += value / cfg.accumulate as f64;
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        if cfg.accumulate > 1 {
            let s = 1.0 / cfg.accumulate as f64;
            grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
        }
        if let Some(c) = cfg.clip_norm {
            clip(&mut grads, c);
        }
        let lr_text = lr_at(cfg, ParamGroup::Text, it);
        let lr_backbone = lr_at(cfg, ParamGroup::Backbone, it);
        optimizer_step(&mut model.params, &grads, &mut adam, cfg, |name| match ParamGroup::of(name) {
            ParamGroup::Text => lr_text,
            ParamGroup::Backbone => lr_backbone,
        })?;
        ema_update(&mut ema, &model.params, effective_ema_decay(cfg.ema_decay, ema_updates))?;
        ema_updates += 1;

        let mut entry = LogEntry {
            iteration: it + 1,
            loss,
            lr_text,
            lr_backbone,
            val_metric: None,
        };
        let at_eval = (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || it + 1 == cfg.iterations;
        if at_eval && !setup.val.is_empty() {
            let snapshot = Model {
                params: ema.clone(),
                ..model.clone()
            };
            let metric = corrected_success_rate(&snapshot, world, setup.val, &val_inputs, setup.radius)?;
            entry.val_metric = Some(metric);
            if best.as_ref().is_none_or(|(b, _, _)| metric > *b) {
                best = Some((metric, it + 1, ema.clone()));
            }
        }
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(sink, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        log.push(entry);
    }

    let (best_metric, best_iteration, best_params) = match best {
        Some((m, i, p)) => (Some(m), i, p),
        None => (None, cfg.iterations, ema),
    };
    Ok(TrainOutcome {
        best: Model {
            params: best_params,
            ..model.clone()
        },
        best_iteration,
        best_metric,
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_rollout_episodes, build_training_episodes, DataConfig, Split};
    use crate::synthworld::{generate_world, WorldSpec};
    use std::collections::HashSet;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(values.to_vec()));
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor> {
        [("p".to_string(), Tensor::vector(values.to_vec()))].into_iter().collect()
    }

    #[test]
    fn optimizer_closed_forms() {
        let no_wd = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &grads(&[0.0, 0.0]), &mut st, &no_wd, |_| 0.1).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[1.0, -2.0]);

        let wd = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut p = store(&[1.0, -2.0, 0.5]);
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &grads(&[0.0; 3]), &mut st, &wd, |_| 0.1).unwrap();
        for (a, b) in p.get("p").unwrap().data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - 0.999 * b).abs() <= 1e-15 * b.abs());
        }

        let g = [0.3, -2.0, 1e-3];
        let mut p = store(&[0.0; 3]);
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &grads(&g), &mut st, &no_wd, |_| 0.05).unwrap();
        for (x, gi) in p.get("p").unwrap().data().iter().zip(g) {
            let expect = -0.05 * gi / (gi.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_errors() {
        let cfg = TrainConfig::default();
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        assert!(matches!(
            optimizer_step(&mut p, &grads(&[1.0, 2.0]), &mut st, &cfg, |_| 0.1),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            optimizer_step(&mut p, &grads(&[f64::NAN]), &mut st, &cfg, |_| 0.1),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig {
            iterations: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, ParamGroup::Text, 0), 0.0);
        assert_eq!(lr_at(&cfg, ParamGroup::Text, 100), cfg.lr_text);
        assert!((lr_at(&cfg, ParamGroup::Text, 50) - cfg.lr_text / 2.0).abs() < 1e-20);
        assert!((lr_at(&cfg, ParamGroup::Text, 550) - cfg.lr_text / 2.0).abs() < 1e-20);
        assert_eq!(lr_at(&cfg, ParamGroup::Text, 1000), 0.0);
        for it in [0, 1, 500, 999] {
            assert_eq!(lr_at(&cfg, ParamGroup::Backbone, it), cfg.lr_backbone);
        }
        assert_eq!(ParamGroup::of("fuse.text.w"), ParamGroup::Text);
        assert_eq!(ParamGroup::of("fuse.vision.w"), ParamGroup::Backbone);
    }

    #[test]
    fn ema_closed_forms() {
        let p = store(&[2.0, -4.0]);
        let mut e = store(&[0.0, 0.0]);
        ema_update(&mut e, &p, 0.5).unwrap();
        ema_update(&mut e, &p, 0.5).unwrap();
        assert_eq!(e.get("p").unwrap().data(), &[1.5, -3.0]);
        ema_update(&mut e, &p, 1.0).unwrap();
        assert_eq!(e.get("p").unwrap().data(), &[1.5, -3.0]);
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e, p);
        assert!(matches!(ema_update(&mut e, &store(&[1.0]), 0.5), Err(Error::ShapeMismatch(_))));
        assert_eq!(effective_ema_decay(0.9998, 0), 0.1);
        assert_eq!(effective_ema_decay(0.9998, 1_000_000), 0.9998);
    }

    fn small_world() -> World {
        generate_world(&WorldSpec::default(), 11).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            elevation_layers: 1,
            spatial_temporal_layers: 1,
            selection_layers: 1,
            dropout_transformer: 0.0,
            dropout_head: 0.0,
            dropout_features: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn empty_train_set() {
        let world = small_world();
        let setup = TrainSetup {
            world: &world,
            train: &[],
            val: &[],
            model: &tiny_model(),
            loss: &LossConfig::default(),
            train_cfg: &TrainConfig::default(),
            radius: 3.0,
        };
        assert!(matches!(train(&setup, None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn single_episode_overfit() {
        let world = small_world();
        let eps = build_training_episodes(&world, 1, 3, &DataConfig::default()).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            iterations: 300,
            lr_backbone: 3e-3,
            lr_text: 3e-3,
            weight_decay: 0.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let setup = TrainSetup {
            world: &world,
            train: &eps,
            val: &[],
            model: &tiny_model(),
            loss: &LossConfig::default(),
            train_cfg: &cfg,
            radius: 3.0,
        };
        let out = train(&setup, None).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|e| e.loss).collect();
        let last = *losses.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
        let smoothed: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
        for w in smoothed.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "smoothed loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(out.best.params.is_finite());
    }

    #[test]
    fn deterministic_log_and_selection() {
        let world = small_world();
        let data = DataConfig::default();
        let train_eps = build_training_episodes(&world, 12, 4, &data).unwrap();
        let val = build_rollout_episodes(&world, 8, 5, Split::ValUnseenLike, &data, &HashSet::new()).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 12,
            eval_every: 4,
            lr_backbone: 1e-3,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            dropout_transformer: 0.1,
            dropout_head: 0.5,
            dropout_features: 0.4,
            ..tiny_model()
        };
        let setup = TrainSetup {
            world: &world,
            train: &train_eps,
            val: &val,
            model: &model,
            loss: &LossConfig::default(),
            train_cfg: &cfg,
            radius: 3.0,
        };
        let mut sink_a = Vec::new();
        let a = train(&setup, Some(&mut sink_a)).unwrap();
        let mut sink_b = Vec::new();
        let b = train(&setup, Some(&mut sink_b)).unwrap();
        assert_eq!(sink_a, sink_b);
        assert_eq!(String::from_utf8(sink_a).unwrap().lines().count(), 12);
        assert_eq!(a.best.params, b.best.params);
        let metrics: Vec<f64> = a.log.iter().filter_map(|e| e.val_metric).collect();
        assert_eq!(metrics.len(), 3);
        let max = metrics.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_metric, Some(max));
        assert!(a.best.params.is_finite());
    }
}
