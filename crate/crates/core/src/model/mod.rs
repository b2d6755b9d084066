//! Trajectory grounding network.
//!
//! Shapes for one episode of `T` steps with embedding width `d`:
//! `[T*36, d_v]` features -> embed + fuse `[T*36, d]` -> elevation pooling
//! `[T*12, d]` -> spatial-temporal `[T*12, d]` -> target selection `[T, d]`
//! -> step probabilities `[T]`.
//!
//! Episodes of a batch are stacked along the row axis and kept apart by
//! attention segments, so a whole batch runs on one tape.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::numerics::checkpoint;
use crate::numerics::layers::{init_cross_layer, init_linear_params, init_transformer_layer};
use crate::numerics::{Forward, ParamStore, Segment, Tensor, Var};
use crate::rng::{rng_for, stream, Rng};
use crate::synthworld::{FeatureBank, World, ELEVATIONS, HEADINGS, VIEWS};

/// Episodes per tape in [`Model::loss_and_grads`]; smaller tapes stay in cache.
const GRAD_CHUNK: usize = 8;

#[cfg(test)]
mod reference;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub elevation_layers: usize,
    pub spatial_temporal_layers: usize,
    pub selection_layers: usize,
    /// Feed-forward width inside transformer layers; `None` means `d`.
    pub ffn_dim: Option<usize>,
    /// Hidden width of the prediction head; `None` means `d`.
    pub head_hidden: Option<usize>,
    pub dropout_transformer: f64,
    pub dropout_head: f64,
    pub dropout_features: f64,
    pub max_steps: usize,
    pub positional_encodings: bool,
    pub elevation_on: bool,
    pub st_on: bool,
    pub selection_on: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            elevation_layers: 2,
            spatial_temporal_layers: 2,
            selection_layers: 2,
            ffn_dim: None,
            head_hidden: None,
            dropout_transformer: 0.1,
            dropout_head: 0.5,
            dropout_features: 0.4,
            max_steps: 15,
            positional_encodings: true,
            elevation_on: true,
            st_on: true,
            selection_on: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::BadHeadCount {
                dim: self.d,
                heads: self.heads,
            });
        }
        for (key, n) in [
            ("elevation_layers", self.elevation_layers),
            ("spatial_temporal_layers", self.spatial_temporal_layers),
            ("selection_layers", self.selection_layers),
            ("max_steps", self.max_steps),
        ] {
            if n == 0 {
                return Err(Error::config(format!("model.{key}"), "must be at least 1"));
            }
        }
        for (key, p) in [
            ("dropout_transformer", self.dropout_transformer),
            ("dropout_head", self.dropout_head),
            ("dropout_features", self.dropout_features),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("model.{key}"), format!("must be in [0, 1), got {p}")));
            }
        }
        if self.ffn_dim == Some(0) || self.head_hidden == Some(0) {
            return Err(Error::config("model.ffn_dim", "widths must be positive"));
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(self.d)
    }

    pub fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.d)
    }
}

/// Sinusoidal encoding: channel `2k` is `sin(pos / 10000^(2k/d))`, channel
/// `2k+1` the matching cosine.
pub fn sinusoid(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let k = (c - c % 2) as f64;
            let angle = position as f64 / 10000f64.powf(k / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Model input for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInput {
    /// `[T, 36, d_v]` panorama features.
    pub features: Tensor,
    /// Instruction embedding.
    pub instruction: Vec<f64>,
}

impl EpisodeInput {
    pub fn new(steps: usize, feature_dim: usize, features: Vec<f64>, instruction: Vec<f64>) -> Result<Self> {
        Ok(EpisodeInput {
            features: Tensor::new(vec![steps, VIEWS, feature_dim], features)?,
            instruction,
        })
    }

    /// Features along the episode path plus its synthetic instruction.
    pub fn from_episode(world: &World, bank: &FeatureBank, episode: &Episode) -> Result<Self> {
        let nodes = world.graph.path_from_ids(&episode.path)?.nodes;
        let target = world.graph.node(&episode.target)?;
        let landmark = world
            .scene
            .landmark_at(target)
            .ok_or_else(|| Error::InvariantViolation(format!("{}: target has no landmark", episode.episode_id)))?;
        let instruction = world.synth_instruction(landmark, episode.instruction_seed)?;
        EpisodeInput::new(nodes.len(), bank.dim, bank.trajectory(&nodes), instruction)
    }

    pub fn steps(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Row bookkeeping for a stacked batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    steps: Vec<usize>,
    /// Index of the first step of each episode in the stacked step axis.
    offsets: Vec<usize>,
}

impl Layout {
    pub fn new(steps: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(steps.len());
        let mut acc = 0;
        for &t in &steps {
            offsets.push(acc);
            acc += t;
        }
        Layout { steps, offsets }
    }

    pub fn episodes(&self) -> usize {
        self.steps.len()
    }

    pub fn total_steps(&self) -> usize {
        self.steps.iter().sum()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Splits a stacked per-step vector back into episodes.
    pub fn split<T: Clone>(&self, v: &[T]) -> Vec<Vec<T>> {
        self.offsets
            .iter()
            .zip(&self.steps)
            .map(|(&o, &t)| v[o..o + t].to_vec())
            .collect()
    }

    /// One self-attention segment per episode over `per_step` rows per step.
    fn episode_segments(&self, per_step: usize) -> Rc<Vec<Segment>> {
        Rc::new(
            self.offsets
                .iter()
                .zip(&self.steps)
                .map(|(&o, &t)| Segment {
                    q_start: o * per_step,
                    q_len: t * per_step,
                    k_start: o * per_step,
                    k_len: t * per_step,
                })
                .collect(),
        )
    }

    /// Episode index of each step in stacked order.
    fn step_episode(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().enumerate().flat_map(|(e, &t)| std::iter::repeat_n(e, t))
    }

    /// Step index within its episode, in stacked order.
    fn step_position(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().flat_map(|&t| 0..t)
    }
}

/// Parameters of the text branch of the fusion layer, which train on their
/// own learning-rate schedule.
pub fn is_text_param(name: &str) -> bool {
    name.starts_with("fuse.text.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    feature_dim: usize,
    text_dim: usize,
}

/// Index of the highest probability; ties go to the earliest step.
pub fn infer(p: &[f64]) -> Result<usize> {
    let mut best = *p.first().ok_or(Error::EmptyPrediction)?;
    let mut arg = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > best {
            best = x;
            arg = i;
        }
    }
    Ok(arg)
}

impl Model {
    pub fn init(config: ModelConfig, feature_dim: usize, text_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut s = ParamStore::new();
        let d = config.d;
        let ffn = config.ffn();
        if feature_dim != d {
            init_linear_params(&mut s, "embed.proj", feature_dim, d, &mut rng);
        }
        s.init_weight("fuse.vision.w", d, d, &mut rng);
        s.init_weight("fuse.text.w", text_dim, d, &mut rng);
        init_linear_params(&mut s, "fuse.out", 2 * d, d, &mut rng);
        for l in 0..config.elevation_layers {
            init_transformer_layer(&mut s, &format!("elevation.{l}"), d, ffn, &mut rng);
        }
        for l in 0..config.spatial_temporal_layers {
            init_transformer_layer(&mut s, &format!("spatial.{l}"), d, ffn, &mut rng);
        }
        for l in 0..config.spatial_temporal_layers {
            init_transformer_layer(&mut s, &format!("temporal.{l}"), d, ffn, &mut rng);
        }
        s.init_normal("select.queries", &[config.max_steps, d], 1.0 / (d as f64).sqrt(), &mut rng);
        for l in 0..config.selection_layers {
            init_transformer_layer(&mut s, &format!("select.self.{l}"), d, ffn, &mut rng);
        }
        for l in 0..config.selection_layers {
            init_cross_layer(&mut s, &format!("select.cross.{l}"), d, ffn, &mut rng);
        }
        init_linear_params(&mut s, "head.hidden", d, config.hidden(), &mut rng);
        init_linear_params(&mut s, "head.out", config.hidden(), 1, &mut rng);
        Ok(Model {
            config,
            feature_dim,
            text_dim,
            params: s,
        })
    }

    fn check_inputs(&self, inputs: &[EpisodeInput]) -> Result<Layout> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for x in inputs {
            let shape = x.features.shape();
            if shape.len() != 3 || shape[1] != VIEWS || shape[2] != self.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "features {:?}, expected [T, {VIEWS}, {}]",
                    shape, self.feature_dim
                )));
            }
            if shape[0] == 0 {
                return Err(Error::EmptyPrediction);
            }
            if shape[0] > self.config.max_steps {
                return Err(Error::TooManySteps {
                    steps: shape[0],
                    max: self.config.max_steps,
                });
            }
            if x.instruction.len() != self.text_dim {
                return Err(Error::ShapeMismatch(format!(
                    "instruction of length {}, expected {}",
                    x.instruction.len(),
                    self.text_dim
                )));
            }
        }
        Ok(Layout::new(inputs.iter().map(EpisodeInput::steps).collect()))
    }

    /// Projects features to width `d`, adds step and view encodings and
    /// applies feature dropout. Input and output rows are `(episode, t, view)`.
    pub fn embed_trajectory(&self, fw: &mut Forward, features: Var, layout: &Layout) -> Result<Var> {
        let d = self.config.d;
        let mut x = if self.feature_dim != d {
            fw.linear(features, "embed.proj")?
        } else {
            features
        };
        if self.config.positional_encodings {
            let views: Vec<Vec<f64>> = (0..VIEWS).map(|v| sinusoid(v, d)).collect();
            let mut enc = Vec::with_capacity(layout.total_steps() * VIEWS * d);
            for t in layout.step_position() {
                let step = sinusoid(t, d);
                for view in &views {
                    enc.extend(step.iter().zip(view).map(|(a, b)| a + b));
                }
            }
            let enc = fw.tape.constant(Tensor::matrix(layout.total_steps() * VIEWS, d, enc)?);
            x = fw.tape.add(x, enc)?;
        }
        fw.dropout(x, self.config.dropout_features)
    }

    /// `FC([gelu(o W_o), gelu(t W_t)])` for every view row, with the
    /// instruction of the row's episode.
    pub fn fuse_text_vision(&self, fw: &mut Forward, views: Var, text: Var, layout: &Layout) -> Result<Var> {
        let rows = fw.tape.value(views).rows();
        if rows != layout.total_steps() * VIEWS || fw.tape.value(text).rows() != layout.episodes() {
            return Err(Error::ShapeMismatch(format!(
                "{rows} view rows and {} instructions for {} steps in {} episodes",
                fw.tape.value(text).rows(),
                layout.total_steps(),
                layout.episodes()
            )));
        }
        let wo = fw.p("fuse.vision.w")?;
        let wt = fw.p("fuse.text.w")?;
        let a = fw.tape.matmul(views, wo)?;
        let a = fw.tape.gelu(a);
        let b = fw.tape.matmul(text, wt)?;
        let b = fw.tape.gelu(b);
        let index: Vec<usize> = layout.step_episode().flat_map(|e| std::iter::repeat_n(e, VIEWS)).collect();
        let b = fw.tape.gather_rows(b, Rc::new(index))?;
        let c = fw.tape.concat_cols(a, b)?;
        fw.linear(c, "fuse.out")
    }

    /// Elevation attention within each heading group, then mean over the
    /// group. Rows `(episode, t, view)` in, `(episode, t, heading)` out.
    pub fn elevation_fuse(&self, fw: &mut Forward, fused: Var, layout: &Layout) -> Result<Var> {
        let steps = layout.total_steps();
        if fw.tape.value(fused).rows() != steps * VIEWS {
            return Err(Error::ShapeMismatch("elevation input must have 36 rows per step".into()));
        }
        let mut order = Vec::with_capacity(steps * VIEWS);
        for s in 0..steps {
            for j in 0..HEADINGS {
                for e in 0..ELEVATIONS {
                    order.push(s * VIEWS + e * HEADINGS + j);
                }
            }
        }
        let mut x = fw.tape.gather_rows(fused, Rc::new(order))?;
        if self.config.elevation_on {
            let segs = Rc::new(Segment::blocks(steps * HEADINGS, ELEVATIONS));
            for l in 0..self.config.elevation_layers {
                x = fw.transformer_layer(x, &format!("elevation.{l}"), self.config.heads, segs.clone(), self.config.dropout_transformer)?;
            }
        }
        fw.tape.block_mean(x, ELEVATIONS)
    }

    /// Heading attention within each step, then attention over all
    /// `T * 12` tokens of the episode.
    pub fn spatial_temporal(&self, fw: &mut Forward, h: Var, layout: &Layout) -> Result<Var> {
        self.spatial_temporal_with(fw, h, layout, true)
    }

    fn spatial_temporal_with(&self, fw: &mut Forward, h: Var, layout: &Layout, temporal: bool) -> Result<Var> {
        let steps = layout.total_steps();
        if fw.tape.value(h).rows() != steps * HEADINGS {
            return Err(Error::ShapeMismatch("spatial-temporal input must have 12 rows per step".into()));
        }
        if !self.config.st_on {
            return Ok(h);
        }
        let (heads, p) = (self.config.heads, self.config.dropout_transformer);
        let mut x = h;
        let local = Rc::new(Segment::blocks(steps, HEADINGS));
        for l in 0..self.config.spatial_temporal_layers {
            x = fw.transformer_layer(x, &format!("spatial.{l}"), heads, local.clone(), p)?;
        }
        if temporal {
            let global = layout.episode_segments(HEADINGS);
            for l in 0..self.config.spatial_temporal_layers {
                x = fw.transformer_layer(x, &format!("temporal.{l}"), heads, global.clone(), p)?;
            }
        }
        Ok(x)
    }

    /// Query self-attention over the episode's `T` queries, then per-step
    /// cross-attention from query `t` to the 12 tokens of step `t`.
    pub fn target_select(&self, fw: &mut Forward, h: Var, layout: &Layout) -> Result<Var> {
        let steps = layout.total_steps();
        if fw.tape.value(h).rows() != steps * HEADINGS {
            return Err(Error::ShapeMismatch("selection input must have 12 rows per step".into()));
        }
        if !self.config.selection_on {
            return fw.tape.block_mean(h, HEADINGS);
        }
        let d = self.config.d;
        let (heads, p) = (self.config.heads, self.config.dropout_transformer);
        let pool = fw.p("select.queries")?;
        let positions: Vec<usize> = layout.step_position().collect();
        let mut q = fw.tape.gather_rows(pool, Rc::new(positions.clone()))?;
        if self.config.positional_encodings {
            let enc: Vec<f64> = positions.iter().flat_map(|&t| sinusoid(t, d)).collect();
            let enc = fw.tape.constant(Tensor::matrix(steps, d, enc)?);
            q = fw.tape.add(q, enc)?;
        }
        let episodes = layout.episode_segments(1);
        for l in 0..self.config.selection_layers {
            q = fw.transformer_layer(q, &format!("select.self.{l}"), heads, episodes.clone(), p)?;
        }
        let per_step = Rc::new(
            (0..steps)
                .map(|s| Segment {
                    q_start: s,
                    q_len: 1,
                    k_start: s * HEADINGS,
                    k_len: HEADINGS,
                })
                .collect::<Vec<_>>(),
        );
        for l in 0..self.config.selection_layers {
            q = fw.cross_layer(q, h, &format!("select.cross.{l}"), heads, per_step.clone(), p)?;
        }
        Ok(q)
    }

    /// Two-layer MLP and sigmoid: `[S, d] -> [S, 1]`.
    pub fn predict(&self, fw: &mut Forward, q: Var) -> Result<Var> {
        if fw.tape.value(q).cols() != self.config.d {
            return Err(Error::ShapeMismatch("prediction head input width".into()));
        }
        let x = fw.linear(q, "head.hidden")?;
        let x = fw.tape.gelu(x);
        let x = fw.dropout(x, self.config.dropout_head)?;
        let x = fw.linear(x, "head.out")?;
        Ok(fw.tape.sigmoid(x))
    }

    /// Records the full forward pass; returns the `[S, 1]` probability node.
    pub fn forward_on(&self, fw: &mut Forward, inputs: &[EpisodeInput]) -> Result<(Var, Layout)> {
        let layout = self.check_inputs(inputs)?;
        let rows = layout.total_steps() * VIEWS;
        let mut feats = Vec::with_capacity(rows * self.feature_dim);
        for x in inputs {
            feats.extend_from_slice(x.features.data());
        }
        let feats = fw.tape.constant(Tensor::matrix(rows, self.feature_dim, feats)?);
        let text: Vec<f64> = inputs.iter().flat_map(|x| x.instruction.iter().copied()).collect();
        let text = fw.tape.constant(Tensor::matrix(inputs.len(), self.text_dim, text)?);
        let o = self.embed_trajectory(fw, feats, &layout)?;
        let o = self.fuse_text_vision(fw, o, text, &layout)?;
        let h = self.elevation_fuse(fw, o, &layout)?;
        let h = self.spatial_temporal(fw, h, &layout)?;
        let q = self.target_select(fw, h, &layout)?;
        Ok((self.predict(fw, q)?, layout))
    }

    /// Eval-mode step probabilities per episode.
    pub fn forward(&self, inputs: &[EpisodeInput]) -> Result<Vec<Vec<f64>>> {
        let mut fw = Forward::eval(&self.params);
        let (p, layout) = self.forward_on(&mut fw, inputs)?;
        Ok(layout.split(fw.tape.value(p).data()))
    }

    /// Mean per-episode loss and parameter gradients. Dropout is active when
    /// `dropout_rng` is given.
    pub fn loss_and_grads(
        &self,
        inputs: &[EpisodeInput],
        labels: &[Vec<f64>],
        loss: &LossConfig,
        dropout_rng: Option<Rng>,
    ) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
        if labels.len() != inputs.len() {
            return Err(Error::LengthMismatch {
                left: inputs.len(),
                right: labels.len(),
            });
        }
        let scale = 1.0 / inputs.len() as f64;
        let mut rng = dropout_rng;
        let mut value = 0.0;
        let mut grads: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
        for (xs, ys) in inputs.chunks(GRAD_CHUNK).zip(labels.chunks(GRAD_CHUNK)) {
            let mut fw = match rng.take() {
                Some(r) => Forward::train(&self.params, r),
                None => Forward::eval(&self.params),
            };
            let (p, layout) = self.forward_on(&mut fw, xs)?;
            let probs = layout.split(fw.tape.value(p).data());
            let mut chunk_value = 0.0;
            let mut grad = Vec::with_capacity(layout.total_steps());
            for (pe, ye) in probs.iter().zip(ys) {
                let lv = total_loss(pe, ye, loss)?;
                chunk_value += scale * lv.value;
                grad.extend(lv.grad.iter().map(|g| g * scale));
            }
            value += chunk_value;
            let root = fw.tape.external(p, chunk_value, grad)?;
            for (name, g) in fw.tape.backward(root)? {
                match grads.get_mut(&name) {
                    Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
            rng = fw.take_rng();
        }
        Ok((value, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(ModelMeta {
            model: self.config.clone(),
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
        })?;
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: ModelMeta = serde_json::from_value(meta)?;
        meta.model.validate()?;
        let expected = Model::init(meta.model.clone(), meta.feature_dim, meta.text_dim, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen parameter `{name}`"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Checkpoint("unexpected parameters in checkpoint".into()));
        }
        Ok(Model {
            config: meta.model,
            feature_dim: meta.feature_dim,
            text_dim: meta.text_dim,
            params,
        })
    }
}
