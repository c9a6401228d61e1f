//! The two classifier topologies: a single-frame network and a recurrent
//! network over windows of consecutive frames. Both fuse image features with
//! the probe pose and emit a position and a direction distribution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{load_checkpoint, save_checkpoint, CheckpointManifest, DataError, WINDOW};
use crate::labels::ClassDistribution;
use crate::tensor::{softmax, Graph, LstmWeights, NodeId, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("expected a window of {expected} frames, got {found}")]
    WindowLength { expected: usize, found: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Scales raw tracker readings (mm, degrees) to O(1) magnitudes.
pub fn normalize_pose(pose: [f64; 6]) -> [f64; 6] {
    std::array::from_fn(|i| if i < 3 { pose[i] / 100.0 } else { pose[i] / 30.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Side of the square input image.
    pub input_side: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            channels: vec![8, 16, 32, 64],
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&1)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Config("backbone needs at least one non-empty block".into()));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(ModelError::Config("kernel and stride must be positive".into()));
        }
        let mut side = self.input_side;
        for _ in &self.channels {
            if side + 2 * self.padding < self.kernel {
                return Err(ModelError::Config(format!(
                    "input side {} collapses below the kernel",
                    self.input_side
                )));
            }
            side = (side + 2 * self.padding - self.kernel) / self.stride + 1;
        }
        Ok(())
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("positive shape")
}

fn dense_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<(ParamId, ParamId), ModelError> {
    let w = store.add(format!("{name}.weight"), he_uniform(rng, &[dout, din], din))?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?;
    Ok((w, b))
}

fn lstm_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    d: usize,
    m: usize,
) -> Result<LstmWeights<ParamId>, ModelError> {
    let mut uniform = |shape: [usize; 2], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    };
    let w_ih = store.add(format!("{name}.w_ih"), uniform([4 * m, d], d))?;
    let w_hh = store.add(format!("{name}.w_hh"), uniform([4 * m, m], m))?;
    let mut bias = vec![0.0; 4 * m];
    bias[m..2 * m].fill(1.0);
    let bias = store.add(format!("{name}.bias"), Tensor::vector(bias))?;
    Ok(LstmWeights { w_ih, w_hh, bias })
}

#[derive(Debug, Clone)]
struct Backbone {
    config: BackboneConfig,
    blocks: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &BackboneConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = cin * config.kernel * config.kernel;
            let w = store.add(
                format!("backbone.conv{i}.weight"),
                he_uniform(rng, &[cout, cin, config.kernel, config.kernel], fan_in),
            )?;
            let b = store.add(format!("backbone.conv{i}.bias"), Tensor::zeros(&[cout]))?;
            blocks.push((w, b));
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    /// `[N, side²]` images (as slices) → `[N, D]` features.
    fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&[f64]]) -> Result<NodeId, ModelError> {
        let s = self.config.input_side;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.len() != s * s {
                return Err(TensorError::Shape {
                    op: "backbone",
                    expected: format!("{s}x{s} image"),
                    found: format!("{} pixels", img.len()),
                }
                .into());
            }
            data.extend_from_slice(img);
        }
        let mut x = g.input(Tensor::new(vec![images.len(), 1, s, s], data)?);
        for &(w, b) in &self.blocks {
            let w = g.param(store, w);
            let b = g.param(store, b);
            x = g.conv2d(x, w, b, self.config.stride, self.config.padding)?;
            x = g.relu(x)?;
        }
        Ok(g.global_avg_pool(x)?)
    }
}

fn pose_input(g: &mut Graph, poses: &[[f64; 6]]) -> Result<NodeId, ModelError> {
    let data = poses.iter().flat_map(|p| normalize_pose(*p)).collect();
    Ok(g.input(Tensor::new(vec![poses.len(), 6], data)?))
}

fn dense_node(g: &mut Graph, store: &ParamStore, x: NodeId, (w, b): (ParamId, ParamId)) -> Result<NodeId, ModelError> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    Ok(g.dense(x, w, Some(b))?)
}

fn distributions(logits: &Tensor) -> Vec<ClassDistribution> {
    logits
        .data()
        .chunks(3)
        .map(|row| {
            let p = softmax(row);
            ClassDistribution::from_probs([p[0], p[1], p[2]])
        })
        .collect()
}

/// Two logit tensors, `[N,3]` each: position then direction.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub position: NodeId,
    pub direction: NodeId,
}

pub type Prediction = (ClassDistribution, ClassDistribution);

fn read_out(g: &Graph, logits: Logits) -> Vec<Prediction> {
    distributions(g.value(logits.position))
        .into_iter()
        .zip(distributions(g.value(logits.direction)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFrameConfig {
    pub backbone: BackboneConfig,
    /// Width of the dense layer over `[features, pose]`.
    pub fusion_width: usize,
    pub seed: u64,
}

impl Default for SingleFrameConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fusion_width: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SingleFrameModel {
    config: SingleFrameConfig,
    store: ParamStore,
    backbone: Backbone,
    fusion: (ParamId, ParamId),
    position: (ParamId, ParamId),
    direction: (ParamId, ParamId),
}

impl SingleFrameModel {
    pub fn new(config: SingleFrameConfig) -> Result<Self, ModelError> {
        if config.fusion_width == 0 {
            return Err(ModelError::Config("fusion width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&mut store, &mut rng, &config.backbone)?;
        let d = config.backbone.feature_dim() + 6;
        let fusion = dense_params(&mut store, &mut rng, "fusion", d, config.fusion_width)?;
        let position = dense_params(&mut store, &mut rng, "position", config.fusion_width, 3)?;
        let direction = dense_params(&mut store, &mut rng, "direction", config.fusion_width, 3)?;
        Ok(Self {
            config,
            store,
            backbone,
            fusion,
            position,
            direction,
        })
    }

    pub fn config(&self) -> &SingleFrameConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records the forward pass for a batch of frames.
    pub fn logits(&self, g: &mut Graph, images: &[&[f64]], poses: &[[f64; 6]]) -> Result<Logits, ModelError> {
        if images.len() != poses.len() || images.is_empty() {
            return Err(ModelError::Config(format!("{} images with {} poses", images.len(), poses.len())));
        }
        let feats = self.backbone.forward(g, &self.store, images)?;
        let pose = pose_input(g, poses)?;
        let x = g.concat(feats, pose)?;
        let x = dense_node(g, &self.store, x, self.fusion)?;
        let x = g.relu(x)?;
        Ok(Logits {
            position: dense_node(g, &self.store, x, self.position)?,
            direction: dense_node(g, &self.store, x, self.direction)?,
        })
    }

    pub fn predict_batch(&self, images: &[&[f64]], poses: &[[f64; 6]]) -> Result<Vec<Prediction>, ModelError> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, images, poses)?;
        Ok(read_out(&g, logits))
    }

    pub fn forward_single(&self, image: &[f64], pose: [f64; 6]) -> Result<Prediction, ModelError> {
        Ok(self.predict_batch(&[image], &[pose])?.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub backbone: BackboneConfig,
    /// LSTM hidden size of each branch.
    pub hidden: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            hidden: 32,
            window: WINDOW,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceModel {
    config: SequenceConfig,
    store: ParamStore,
    backbone: Backbone,
    lstm_position: LstmWeights<ParamId>,
    lstm_direction: LstmWeights<ParamId>,
    position: (ParamId, ParamId),
    direction: (ParamId, ParamId),
}

impl SequenceModel {
    pub fn new(config: SequenceConfig) -> Result<Self, ModelError> {
        if config.hidden == 0 || config.window == 0 {
            return Err(ModelError::Config("hidden size and window must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&mut store, &mut rng, &config.backbone)?;
        let d = config.backbone.feature_dim() + 6;
        let m = config.hidden;
        let lstm_position = lstm_params(&mut store, &mut rng, "lstm_position", d, m)?;
        let lstm_direction = lstm_params(&mut store, &mut rng, "lstm_direction", d, m)?;
        let position = dense_params(&mut store, &mut rng, "position", m, 3)?;
        let direction = dense_params(&mut store, &mut rng, "direction", m, 3)?;
        Ok(Self {
            config,
            store,
            backbone,
            lstm_position,
            lstm_direction,
            position,
            direction,
        })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Per-frame recurrent inputs `[U, D+6]`: backbone features next to the
    /// normalised pose.
    pub fn step_inputs(&self, g: &mut Graph, images: &[&[f64]], poses: &[[f64; 6]]) -> Result<NodeId, ModelError> {
        if images.len() != poses.len() || images.is_empty() {
            return Err(ModelError::Config(format!("{} images with {} poses", images.len(), poses.len())));
        }
        let feats = self.backbone.forward(g, &self.store, images)?;
        let pose = pose_input(g, poses)?;
        Ok(g.concat(feats, pose)?)
    }

    /// Runs both recurrent branches over windows of rows of `inputs`.
    ///
    /// Each window lists, in sweep order, the rows of `inputs` it covers;
    /// overlapping windows share rows and hence backbone activations.
    pub fn head(&self, g: &mut Graph, inputs: NodeId, windows: &[Vec<usize>]) -> Result<Logits, ModelError> {
        if windows.is_empty() {
            return Err(ModelError::Config("no windows".into()));
        }
        if let Some(w) = windows.iter().find(|w| w.len() != self.config.window) {
            return Err(ModelError::WindowLength {
                expected: self.config.window,
                found: w.len(),
            });
        }
        let b = windows.len();
        let m = self.config.hidden;
        let branch = |g: &mut Graph, lstm: &LstmWeights<ParamId>, out: (ParamId, ParamId)| -> Result<NodeId, ModelError> {
            let w = LstmWeights {
                w_ih: g.param(&self.store, lstm.w_ih),
                w_hh: g.param(&self.store, lstm.w_hh),
                bias: g.param(&self.store, lstm.bias),
            };
            let mut h = g.input(Tensor::zeros(&[b, m]));
            let mut c = g.input(Tensor::zeros(&[b, m]));
            for t in 0..self.config.window {
                let rows: Vec<usize> = windows.iter().map(|w| w[t]).collect();
                let x = g.gather_rows(inputs, &rows)?;
                (h, c) = g.lstm_step(x, h, c, &w)?;
            }
            dense_node(g, &self.store, h, out)
        };
        Ok(Logits {
            position: branch(g, &self.lstm_position, self.position)?,
            direction: branch(g, &self.lstm_direction, self.direction)?,
        })
    }

    /// Per-frame recurrent inputs without recording gradients; lets a
    /// streaming caller compute each frame's features once.
    pub fn frame_features(&self, images: &[&[f64]], poses: &[[f64; 6]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let x = self.step_inputs(&mut g, images, poses)?;
        let t = g.value(x);
        let d = t.shape()[1];
        Ok(t.data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Classifies one window given precomputed per-frame features.
    pub fn classify_features(&self, window: &[&[f64]]) -> Result<Prediction, ModelError> {
        if window.len() != self.config.window {
            return Err(ModelError::WindowLength {
                expected: self.config.window,
                found: window.len(),
            });
        }
        let d = self.config.backbone.feature_dim() + 6;
        let mut data = Vec::with_capacity(window.len() * d);
        for f in window {
            if f.len() != d {
                return Err(ModelError::Config(format!("feature vector of {} for {d}", f.len())));
            }
            data.extend_from_slice(f);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![window.len(), d], data)?);
        let logits = self.head(&mut g, x, &[(0..window.len()).collect()])?;
        Ok(read_out(&g, logits).remove(0))
    }

    /// Predictions for every window of consecutive frames in a volume.
    pub fn predict_windows(
        &self,
        images: &[&[f64]],
        poses: &[[f64; 6]],
        windows: &[Vec<usize>],
    ) -> Result<Vec<Prediction>, ModelError> {
        let mut g = Graph::new();
        let x = self.step_inputs(&mut g, images, poses)?;
        let logits = self.head(&mut g, x, windows)?;
        Ok(read_out(&g, logits))
    }

    pub fn forward_sequence(&self, window: &[(&[f64], [f64; 6])]) -> Result<Prediction, ModelError> {
        if window.len() != self.config.window {
            return Err(ModelError::WindowLength {
                expected: self.config.window,
                found: window.len(),
            });
        }
        let images: Vec<&[f64]> = window.iter().map(|(i, _)| *i).collect();
        let poses: Vec<[f64; 6]> = window.iter().map(|(_, p)| *p).collect();
        Ok(self
            .predict_windows(&images, &poses, &[(0..window.len()).collect()])?
            .remove(0))
    }
}

/// Weighted two-branch cross-entropy of one sample, computed from output
/// distributions. Each branch's weight is looked up by the label's argmax.
pub fn loss_for_sample(outputs: &Prediction, labels: &Prediction, weights: &([f64; 3], [f64; 3])) -> f64 {
    let ce = |p: &ClassDistribution, t: &ClassDistribution| -> f64 {
        p.probs()
            .iter()
            .zip(t.probs())
            .filter(|(_, t)| *t > 0.0)
            .map(|(p, t)| -t * p.ln())
            .sum()
    };
    weights.0[labels.0.argmax()] * ce(&outputs.0, &labels.0) + weights.1[labels.1.argmax()] * ce(&outputs.1, &labels.1)
}

pub fn parameter_count(store: &ParamStore) -> usize {
    store.scalar_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Single,
    Sequence,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Single => "single",
            Topology::Sequence => "sequence",
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Topology::Single),
            "sequence" => Ok(Topology::Sequence),
            other => Err(ModelError::Config(format!("unknown topology {other:?}"))),
        }
    }
}

/// Either topology, for code that loads a checkpoint without knowing which.
#[derive(Debug, Clone)]
pub enum Model {
    Single(SingleFrameModel),
    Sequence(SequenceModel),
}

impl Model {
    /// Fresh model with default desk-scale sizes.
    pub fn new(topology: Topology, backbone: BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(match topology {
            Topology::Single => Model::Single(SingleFrameModel::new(SingleFrameConfig {
                backbone,
                seed,
                ..SingleFrameConfig::default()
            })?),
            Topology::Sequence => Model::Sequence(SequenceModel::new(SequenceConfig {
                backbone,
                seed,
                ..SequenceConfig::default()
            })?),
        })
    }

    pub fn topology(&self) -> Topology {
        match self {
            Model::Single(_) => Topology::Single,
            Model::Sequence(_) => Topology::Sequence,
        }
    }

    pub fn backbone(&self) -> &BackboneConfig {
        match self {
            Model::Single(m) => &m.config.backbone,
            Model::Sequence(m) => &m.config.backbone,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Single(m) => &m.store,
            Model::Sequence(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Single(m) => &mut m.store,
            Model::Sequence(m) => &mut m.store,
        }
    }

    fn config_json(&self) -> serde_json::Value {
        match self {
            Model::Single(m) => serde_json::to_value(&m.config),
            Model::Sequence(m) => serde_json::to_value(&m.config),
        }
        .expect("config serialises")
    }

    /// Predictions for frames `WINDOW−1 .. n` of a preprocessed volume, so
    /// both topologies are scored on the same frames.
    pub fn predict_volume(&self, images: &[&[f64]], poses: &[[f64; 6]]) -> Result<Vec<Prediction>, ModelError> {
        const CHUNK: usize = 64;
        let n = images.len();
        if n < WINDOW {
            return Err(DataError::ShortVolume {
                frames: n,
                window: WINDOW,
            }
            .into());
        }
        let mut out = Vec::with_capacity(n + 1 - WINDOW);
        match self {
            Model::Single(m) => {
                for start in (WINDOW - 1..n).step_by(CHUNK) {
                    let end = (start + CHUNK).min(n);
                    out.extend(m.predict_batch(&images[start..end], &poses[start..end])?);
                }
            }
            Model::Sequence(m) => {
                let w = m.config.window;
                if w != WINDOW {
                    return Err(ModelError::WindowLength {
                        expected: WINDOW,
                        found: w,
                    });
                }
                // features for a chunk of windows plus the w−1 frames before it
                for first_end in (w - 1..n).step_by(CHUNK) {
                    let last_end = (first_end + CHUNK).min(n) - 1;
                    let lo = first_end + 1 - w;
                    let windows: Vec<Vec<usize>> = (first_end..=last_end)
                        .map(|end| (end + 1 - w - lo..=end - lo).collect())
                        .collect();
                    out.extend(m.predict_windows(&images[lo..=last_end], &poses[lo..=last_end], &windows)?);
                }
            }
        }
        Ok(out)
    }

    /// Rounds parameters to single precision, then writes the checkpoint, so
    /// the model in memory and the reloaded one agree bit for bit.
    pub fn save(&mut self, dir: &Path, training: serde_json::Value) -> Result<CheckpointManifest, ModelError> {
        self.store_mut().round_to_f32();
        let config = self.config_json();
        Ok(save_checkpoint(dir, self.topology().as_str(), config, training, self.store())?)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest), ModelError> {
        let (manifest, loaded) = load_checkpoint(dir)?;
        let bad = |e: serde_json::Error| ModelError::Mismatch(e.to_string());
        let mut model = match manifest.topology.parse::<Topology>()? {
            Topology::Single => Model::Single(SingleFrameModel::new(
                serde_json::from_value(manifest.model_config.clone()).map_err(bad)?,
            )?),
            Topology::Sequence => Model::Sequence(SequenceModel::new(
                serde_json::from_value(manifest.model_config.clone()).map_err(bad)?,
            )?),
        };
        let store = model.store_mut();
        if loaded.len() != store.len() {
            return Err(ModelError::Mismatch(format!(
                "{} parameter tensors for a model with {}",
                loaded.len(),
                store.len()
            )));
        }
        for id in loaded.ids() {
            let name = loaded.name(id);
            let target = store
                .id(name)
                .ok_or_else(|| ModelError::Mismatch(format!("unknown parameter {name}")))?;
            let v = loaded.value(id);
            if v.shape() != store.value(target).shape() {
                return Err(ModelError::Mismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    v.shape(),
                    store.value(target).shape()
                )));
            }
            *store.value_mut(target) = v.clone();
        }
        Ok((model, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            input_side: 16,
            channels: vec![4, 8],
            ..BackboneConfig::default()
        }
    }

    fn image(seed: u64, side: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn pose(k: f64) -> [f64; 6] {
        [10.0 + k, -4.0, 50.0, 1.0, 20.0 + k, -0.5]
    }

    fn sums_to_one(p: &Prediction) -> bool {
        [p.0, p.1]
            .iter()
            .all(|d| (d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6 && d.probs().iter().all(|&v| v >= 0.0))
    }

    #[test]
    fn single_outputs_are_distributions_and_deterministic() {
        let m = SingleFrameModel::new(SingleFrameConfig {
            backbone: small_backbone(),
            ..SingleFrameConfig::default()
        })
        .unwrap();
        let img = image(1, 16);
        let a = m.forward_single(&img, pose(0.0)).unwrap();
        assert!(sums_to_one(&a));
        assert_eq!(a, m.forward_single(&img, pose(0.0)).unwrap());
        assert!(m.forward_single(&img[1..], pose(0.0)).is_err());
    }

    #[test]
    fn zeroed_pose_slots_make_single_pose_blind() {
        let mut m = SingleFrameModel::new(SingleFrameConfig {
            backbone: small_backbone(),
            ..SingleFrameConfig::default()
        })
        .unwrap();
        let d = m.config.backbone.feature_dim();
        let w = m.store.id("fusion.weight").unwrap();
        let width = d + 6;
        for (i, v) in m.store.value_mut(w).data_mut().iter_mut().enumerate() {
            if i % width >= d {
                *v = 0.0;
            }
        }
        let img = image(2, 16);
        assert_eq!(
            m.forward_single(&img, pose(0.0)).unwrap(),
            m.forward_single(&img, pose(25.0)).unwrap()
        );
    }

    fn seq(seed: u64) -> SequenceModel {
        SequenceModel::new(SequenceConfig {
            backbone: small_backbone(),
            hidden: 5,
            seed,
            ..SequenceConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sequence_window_length_enforced() {
        let m = seq(0);
        let img = image(3, 16);
        let window: Vec<(&[f64], [f64; 6])> = (0..9).map(|k| (img.as_slice(), pose(k as f64))).collect();
        assert!(matches!(
            m.forward_sequence(&window),
            Err(ModelError::WindowLength { expected: 10, found: 9 })
        ));
    }

    #[test]
    fn identical_frames_share_features() {
        let m = seq(1);
        let img = image(4, 16);
        let f = m.frame_features(&[img.as_slice(); 10], &[pose(0.0); 10]).unwrap();
        assert!(f.windows(2).all(|p| p[0] == p[1]));
        let p = m
            .forward_sequence(&vec![(img.as_slice(), pose(0.0)); 10])
            .unwrap();
        assert!(sums_to_one(&p));
    }

    #[test]
    fn order_matters_for_some_seed() {
        let imgs: Vec<Vec<f64>> = (0..10).map(|k| image(100 + k, 16)).collect();
        let fwd: Vec<(&[f64], [f64; 6])> = imgs.iter().enumerate().map(|(k, i)| (i.as_slice(), pose(k as f64))).collect();
        let rev: Vec<_> = fwd.iter().rev().cloned().collect();
        let differs = (0..20).any(|s| {
            let m = seq(s);
            m.forward_sequence(&fwd).unwrap() != m.forward_sequence(&rev).unwrap()
        });
        assert!(differs);
    }

    #[test]
    fn shared_batches_match_naive_windows_bit_for_bit() {
        let m = seq(7);
        let imgs: Vec<Vec<f64>> = (0..25).map(|k| image(200 + k, 16)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let poses: Vec<[f64; 6]> = (0..25).map(|k| pose(k as f64)).collect();
        let windows: Vec<Vec<usize>> = (0..16).map(|s| (s..s + 10).collect()).collect();
        let batched = m.predict_windows(&refs, &poses, &windows).unwrap();
        for (s, got) in batched.iter().enumerate() {
            let win: Vec<(&[f64], [f64; 6])> = (s..s + 10).map(|k| (refs[k], poses[k])).collect();
            assert_eq!(*got, m.forward_sequence(&win).unwrap(), "window {s}");
        }
        let feats = m.frame_features(&refs, &poses).unwrap();
        let fr: Vec<&[f64]> = feats[3..13].iter().map(Vec::as_slice).collect();
        assert_eq!(m.classify_features(&fr).unwrap(), batched[3]);
    }

    #[test]
    fn loss_examples() {
        let one = (ClassDistribution::one_hot(0), ClassDistribution::one_hot(2));
        let unit = ([1.0; 3], [1.0; 3]);
        assert_eq!(loss_for_sample(&one, &one, &unit), 0.0);
        let u = ClassDistribution::new([1.0 / 3.0; 3]).unwrap();
        assert!((loss_for_sample(&(u, u), &one, &unit) - 2.0 * 3f64.ln()).abs() < 1e-12);
        let soft = ClassDistribution::new([2.0 / 3.0, 1.0 / 3.0, 0.0]).unwrap();
        let h = -(2.0 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        assert!((loss_for_sample(&(soft, soft), &(soft, soft), &unit) - 2.0 * h).abs() < 1e-12);
        assert!((h - 0.6365).abs() < 1e-4);
    }

    #[test]
    fn parameter_counts() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        dense_params(&mut s, &mut rng, "d", 4, 3).unwrap();
        assert_eq!(parameter_count(&s), 15);
        let mut s = ParamStore::new();
        lstm_params(&mut s, &mut rng, "l", 2, 3).unwrap();
        assert_eq!(parameter_count(&s), 72);
        let m = seq(0);
        let before = parameter_count(m.store());
        m.forward_sequence(&vec![(image(0, 16).as_slice(), pose(0.0)); 10]).unwrap();
        assert_eq!(before, parameter_count(m.store()));
    }

    #[test]
    fn every_parameter_receives_gradient_at_init() {
        for topology in [Topology::Single, Topology::Sequence] {
            let mut model = Model::new(topology, small_backbone(), 3).unwrap();
            let imgs: Vec<Vec<f64>> = (0..12).map(|k| image(300 + k, 16)).collect();
            let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
            let poses: Vec<[f64; 6]> = (0..12).map(|k| pose(k as f64)).collect();
            let mut g = Graph::new();
            let logits = match &model {
                Model::Single(m) => m.logits(&mut g, &refs, &poses).unwrap(),
                Model::Sequence(m) => {
                    let x = m.step_inputs(&mut g, &refs, &poses).unwrap();
                    m.head(&mut g, x, &[(0..10).collect(), (2..12).collect()]).unwrap()
                }
            };
            let rows = g.value(logits.position).shape()[0];
            let targets: Vec<f64> = (0..rows).flat_map(|r| ClassDistribution::one_hot(r % 3).probs()).collect();
            let lp = g.softmax_cross_entropy(logits.position, &targets, &vec![1.0; rows]).unwrap();
            let ld = g.softmax_cross_entropy(logits.direction, &targets, &vec![1.0; rows]).unwrap();
            let loss = g.add(lp, ld).unwrap();
            let store = model.store_mut();
            g.backward(loss, store).unwrap();
            for id in store.ids() {
                assert!(
                    store.grad(id).data().iter().any(|&v| v != 0.0),
                    "{topology:?}: {} has no gradient",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(Topology::Sequence, small_backbone(), 9).unwrap();
        model.save(dir.path(), serde_json::json!({})).unwrap();
        let (back, manifest) = Model::load(dir.path()).unwrap();
        assert_eq!(manifest.topology, "sequence");
        let imgs: Vec<Vec<f64>> = (0..14).map(|k| image(400 + k, 16)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let poses: Vec<[f64; 6]> = (0..14).map(|k| pose(k as f64)).collect();
        assert_eq!(
            model.predict_volume(&refs, &poses).unwrap(),
            back.predict_volume(&refs, &poses).unwrap()
        );
    }

    #[test]
    fn predict_volume_aligns_topologies() {
        let imgs: Vec<Vec<f64>> = (0..80).map(|k| image(500 + k, 16)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let poses: Vec<[f64; 6]> = (0..80).map(|k| pose(k as f64)).collect();
        for t in [Topology::Single, Topology::Sequence] {
            let m = Model::new(t, small_backbone(), 0).unwrap();
            let p = m.predict_volume(&refs, &poses).unwrap();
            assert_eq!(p.len(), 71);
            if let Model::Single(s) = &m {
                assert_eq!(p[0], s.forward_single(refs[9], poses[9]).unwrap());
            }
            if let Model::Sequence(s) = &m {
                let win: Vec<(&[f64], [f64; 6])> = (70..80).map(|k| (refs[k], poses[k])).collect();
                assert_eq!(p[70], s.forward_sequence(&win).unwrap());
            }
        }
    }
}
