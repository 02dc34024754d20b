//! The bag-attention network: convolutional bag encoder with temporal
//! pooling, a cross-attention cascade across bags, strip pooling with
//! per-strip projections, text concatenation, and two BNNeck heads.

pub mod layers;

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Reduce, Tape, Var};
use crate::data::{Silhouette, TaskTag, TextGuidance, FRAME_HEIGHT, FRAME_WIDTH};
use crate::dtw::{partition_sequence, BagPartition};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::{AttentionVars, ConvBlockVars, HeadVars, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalPool {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// DTW distances plus contiguous agglomerative clustering.
    Dtw,
    /// Near-equal contiguous split.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of bags K per window.
    pub bags: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// Whether each conv block ends with a 2x2 max pool.
    pub pool: Vec<bool>,
    pub kernel: usize,
    /// Frames are average-pooled by this factor before the backbone.
    pub input_downsample: usize,
    pub heads: usize,
    pub strips: usize,
    /// Per-strip projection width d_s.
    pub strip_dim: usize,
    /// Text vector width d_t.
    pub text_dim: usize,
    pub temporal_pool: TemporalPool,
    pub partition: PartitionMode,
    /// Cross-attention cascade; when off the bag maps are averaged.
    pub cascade: bool,
    /// Borderline-vs-rest head.
    pub borderline_head: bool,
    /// When off, zero vectors replace the text guidance.
    pub text: bool,
    pub bn_eps: f64,
    /// Weight of the newest batch in the running statistics.
    pub bn_momentum: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bags: 4,
            channels: vec![8, 16, 32],
            pool: vec![true, true, true],
            kernel: 3,
            input_downsample: 1,
            heads: 1,
            strips: 16,
            strip_dim: 32,
            text_dim: 64,
            temporal_pool: TemporalPool::Max,
            partition: PartitionMode::Dtw,
            cascade: true,
            borderline_head: true,
            text: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn input_hw(&self) -> (usize, usize) {
        (FRAME_HEIGHT / self.input_downsample.max(1), FRAME_WIDTH / self.input_downsample.max(1))
    }

    /// Spatial size of the backbone output.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_hw();
        for &p in &self.pool {
            if p {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }

    pub fn width(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn fused_dim(&self) -> usize {
        self.strips * self.strip_dim + self.text_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bags == 0 {
            return bad("model.bags must be >= 1".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("model.channels must be a non-empty list of positive widths".into());
        }
        if self.pool.len() != self.channels.len() {
            return bad(format!(
                "model.pool has {} entries but model.channels has {}",
                self.pool.len(),
                self.channels.len()
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("model.kernel must be odd".into());
        }
        if self.input_downsample == 0 || FRAME_HEIGHT % self.input_downsample != 0 {
            return bad(format!("model.input_downsample must divide {FRAME_HEIGHT}"));
        }
        let (h, w) = self.feature_hw();
        if h < self.strips || w == 0 || self.strips == 0 {
            return bad(format!("feature map {h}x{w} cannot be split into {} strips", self.strips));
        }
        if self.heads == 0 || self.width() % self.heads != 0 {
            return bad(format!("{} channels do not split into {} heads", self.width(), self.heads));
        }
        if self.strip_dim == 0 {
            return bad("model.strip_dim must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("model.bn_eps must be > 0 and model.bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c, cin, self.kernel, self.kernel]));
            out.push((format!("conv{i}.bias"), vec![c]));
            cin = c;
        }
        let c = self.width();
        if self.cascade {
            for i in 0..self.bags.saturating_sub(1) {
                for m in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("attn{i}.{m}"), vec![c, c]));
                }
            }
        }
        out.push(("strip_fc.weight".into(), vec![self.strips, 2 * c, self.strip_dim]));
        let d = self.fused_dim();
        let mut heads = vec![("bn3", "cls3", 3)];
        if self.borderline_head {
            heads.push(("bnb", "clsb", 1));
        }
        for (bn, cls, k) in heads {
            out.push((format!("{bn}.gamma"), vec![d]));
            out.push((format!("{bn}.beta"), vec![d]));
            out.push((format!("{cls}.weight"), vec![d, k]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn bn_names(&self) -> Vec<&'static str> {
        if self.borderline_head {
            vec!["bn3", "bnb"]
        } else {
            vec!["bn3"]
        }
    }
}

/// Windows of frames prepared for one forward pass: all frames stacked as
/// `[F, 1, H, W]` and, per sample, K contiguous row ranges (its bags).
#[derive(Clone, Debug)]
pub struct BagBatch {
    pub frames: Tensor,
    pub bags: Vec<Vec<Range<usize>>>,
}

impl BagBatch {
    /// Downsamples and partitions each window according to `config`.
    pub fn new(config: &ModelConfig, windows: &[&[Silhouette]]) -> Result<Self> {
        let partitions = windows.iter().map(|w| partition_window(config, w)).collect::<Result<Vec<_>>>()?;
        Self::with_partitions(config, windows, &partitions)
    }

    pub fn with_partitions(
        config: &ModelConfig,
        windows: &[&[Silhouette]],
        partitions: &[BagPartition],
    ) -> Result<Self> {
        if windows.is_empty() || windows.len() != partitions.len() {
            return Err(Error::arg("a batch needs one partition per window and at least one window"));
        }
        let (h, w) = config.input_hw();
        let total: usize = windows.iter().map(|w| w.len()).sum();
        let mut data = Vec::with_capacity(total * h * w);
        let mut bags = Vec::with_capacity(windows.len());
        let mut offset = 0;
        for (win, part) in windows.iter().zip(partitions) {
            if part.k() != config.bags || *part.boundaries.last().unwrap() != win.len() {
                return Err(Error::arg(format!(
                    "partition {:?} does not split a {}-frame window into {} bags",
                    part.boundaries,
                    win.len(),
                    config.bags
                )));
            }
            for f in win.iter() {
                if (f.height(), f.width()) != (FRAME_HEIGHT, FRAME_WIDTH) {
                    return Err(Error::dim(format!(
                        "frame is {}x{}, expected {FRAME_HEIGHT}x{FRAME_WIDTH}",
                        f.height(),
                        f.width()
                    )));
                }
                data.extend(f.downsample(config.input_downsample));
            }
            bags.push(part.ranges().into_iter().map(|r| r.start + offset..r.end + offset).collect());
            offset += win.len();
        }
        Ok(BagBatch { frames: Tensor::new(vec![total, 1, h, w], data)?, bags })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Frame rows of bag `i` for every sample.
    pub fn bag_groups(&self, i: usize) -> Vec<Range<usize>> {
        self.bags.iter().map(|b| b[i].clone()).collect()
    }
}

pub fn partition_window(config: &ModelConfig, window: &[Silhouette]) -> Result<BagPartition> {
    match config.partition {
        PartitionMode::Dtw => partition_sequence(window, config.bags),
        PartitionMode::Uniform => BagPartition::uniform(window.len(), config.bags),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the BNNecks.
    Train,
    /// Running statistics in the BNNecks.
    Eval,
}

/// Handles to the head outputs of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits3: Var,
    pub logits_borderline: Option<Var>,
    /// Pre-BNNeck ternary feature, used by the triplet loss.
    pub metric_feature: Var,
    pub classifier_feature: Var,
    /// Parameter leaves, in storage order.
    pub params: Vec<Var>,
    /// Batch statistics per BNNeck (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: BTreeMap<String, Vec<f64>>,
    text: TextGuidance,
}

impl Model {
    /// Freshly initialized model. Conv weights are Kaiming-uniform with ReLU
    /// gain, linear weights Kaiming-uniform with unit gain, attention
    /// projections `0.02 * N(0, 1)`, batchnorm scale 1 and shift 0.
    pub fn new(config: ModelConfig, text: TextGuidance) -> Result<Self> {
        config.validate()?;
        if text.dim != config.text_dim || text.ternary.len() != text.dim || text.binary.len() != text.dim {
            return Err(Error::Config(format!(
                "text guidance has dim {}, model expects {}",
                text.dim, config.text_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.starts_with("conv") && name.ends_with("weight") {
                let fan_in = shape[1] * shape[2] * shape[3];
                Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), &mut rng)
            } else if name.starts_with("attn") {
                Tensor::randn(shape, 0.02, &mut rng)
            } else if name == "strip_fc.weight" || name.ends_with(".weight") {
                let fan_in = shape[shape.len() - 2];
                Tensor::uniform(shape, (3.0 / fan_in as f64).sqrt(), &mut rng)
            } else if name.ends_with(".gamma") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            names.push(name);
            params.push(t);
        }
        let d = config.fused_dim();
        let mut running = BTreeMap::new();
        for bn in config.bn_names() {
            running.insert(format!("{bn}.running_mean"), vec![0.0; d]);
            running.insert(format!("{bn}.running_var"), vec![1.0; d]);
        }
        Ok(Model { config, names, params, running, text })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn text(&self) -> &TextGuidance {
        &self.text
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn running(&self, name: &str) -> Option<&[f64]> {
        self.running.get(name).map(Vec::as_slice)
    }

    /// Records every parameter as a leaf, tracked iff `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, batch: &BagBatch, mode: Mode, track: bool) -> Result<Forward> {
        let vars = self.bind(tape, track);
        self.forward_bound(tape, &vars, batch, mode)
    }

    /// Forward pass with parameters already on the tape (`vars` in storage order).
    pub fn forward_bound(&self, tape: &mut Tape, vars: &[Var], batch: &BagBatch, mode: Mode) -> Result<Forward> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::arg(format!("expected {} parameter variables, got {}", self.params.len(), vars.len())));
        }
        let p = |name: &str| -> Var { vars[self.names.iter().position(|n| n == name).expect("known parameter")] };
        let (h, w) = cfg.input_hw();
        if batch.frames.shape()[1..] != [1, h, w] {
            return Err(Error::dim(format!("batch frames {:?} do not match input {h}x{w}", batch.frames.shape())));
        }
        if batch.bags.iter().any(|b| b.len() != cfg.bags) {
            return Err(Error::Config(format!("every sample needs {} bags", cfg.bags)));
        }

        let blocks: Vec<ConvBlockVars> = (0..cfg.channels.len())
            .map(|i| ConvBlockVars {
                weight: p(&format!("conv{i}.weight")),
                bias: p(&format!("conv{i}.bias")),
                pool: cfg.pool[i],
            })
            .collect();
        let frames = tape.constant(batch.frames.clone());
        let maps = layers::backbone(tape, frames, &blocks)?;
        let reduce = match cfg.temporal_pool {
            TemporalPool::Max => Reduce::Max,
            TemporalPool::Mean => Reduce::Mean,
        };
        let bags = (0..cfg.bags)
            .map(|i| layers::temporal_pool(tape, maps, &batch.bag_groups(i), reduce))
            .collect::<Result<Vec<_>>>()?;

        let fused_map = if cfg.cascade {
            let attn: Vec<AttentionVars> = (0..cfg.bags - 1)
                .map(|i| AttentionVars {
                    wq: p(&format!("attn{i}.wq")),
                    wk: p(&format!("attn{i}.wk")),
                    wv: p(&format!("attn{i}.wv")),
                    wo: p(&format!("attn{i}.wo")),
                })
                .collect();
            layers::ibta_cascade(tape, &bags, &attn, cfg.heads)?
        } else {
            layers::mean_of_bags(tape, &bags)?
        };

        let strips = layers::horizontal_pool(tape, fused_map, cfg.strips)?;
        let visual = layers::strip_projection(tape, strips, p("strip_fc.weight"))?;

        let text_for = |tag: TaskTag| -> Vec<f64> {
            if cfg.text {
                self.text.get(tag).to_vec()
            } else {
                vec![0.0; cfg.text_dim]
            }
        };
        let mut bn_stats = Vec::new();
        let mut head = |tape: &mut Tape, bn: &str, cls: &str, feature: Var| -> Result<(Var, Var)> {
            let hv = HeadVars {
                gamma: p(&format!("{bn}.gamma")),
                beta: p(&format!("{bn}.beta")),
                weight: p(&format!("{cls}.weight")),
            };
            let norm = match mode {
                Mode::Train => Norm::Batch,
                Mode::Eval => Norm::Running {
                    mean: &self.running[&format!("{bn}.running_mean")],
                    var: &self.running[&format!("{bn}.running_var")],
                },
            };
            let (normed, logits, stats) = layers::bnneck(tape, feature, &hv, norm, cfg.bn_eps)?;
            if let Some(st) = stats {
                bn_stats.push((bn.to_string(), st));
            }
            Ok((normed, logits))
        };

        let metric_feature = layers::append_text(tape, visual, &text_for(TaskTag::Ternary))?;
        let (classifier_feature, logits3) = head(tape, "bn3", "cls3", metric_feature)?;
        let logits_borderline = if cfg.borderline_head {
            let fused_b = layers::append_text(tape, visual, &text_for(TaskTag::Binary))?;
            Some(head(tape, "bnb", "clsb", fused_b)?.1)
        } else {
            None
        };
        Ok(Forward { logits3, logits_borderline, metric_feature, classifier_feature, params: vars.to_vec(), bn_stats })
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (bn, st) in stats {
            for (key, fresh) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                if let Some(r) = self.running.get_mut(&format!("{bn}.{key}")) {
                    for (r, f) in r.iter_mut().zip(fresh) {
                        *r = (1.0 - m) * *r + m * f;
                    }
                }
            }
        }
    }

    /// Writes `model.json`, one `.ten` file per parameter and running
    /// statistic, and the two text vectors.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("model.json");
        let mut json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        json.push('\n');
        fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        for (name, t) in self.names.iter().zip(&self.params) {
            t.save_ten(&dir.join(format!("{name}.ten")))?;
        }
        for (name, v) in &self.running {
            Tensor::new(vec![v.len()], v.clone())?.save_ten(&dir.join(format!("{name}.ten")))?;
        }
        for tag in [TaskTag::Ternary, TaskTag::Binary] {
            let v = self.text.get(tag).to_vec();
            Tensor::new(vec![v.len()], v)?.save_ten(&dir.join(format!("text.{tag}.ten")))?;
        }
        Ok(())
    }

    /// Loads a checkpoint, checking every expected tensor's presence and shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("model.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        config.validate().map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let read = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let path = dir.join(format!("{name}.ten"));
            if !path.is_file() {
                return Err(Error::format(&path, "checkpoint tensor is missing"));
            }
            let t = Tensor::load_ten(&path)?;
            if t.shape() != shape {
                return Err(Error::format(&path, format!("shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let d_t = config.text_dim;
        let guidance = TextGuidance {
            dim: d_t,
            ternary: read("text.ternary", &[d_t])?.into_data(),
            binary: read("text.binary", &[d_t])?.into_data(),
        };
        let mut model = Model::new(config, guidance)?;
        for (i, (name, shape)) in model.config.param_shapes().into_iter().enumerate() {
            model.params[i] = read(&name, &shape)?;
        }
        let d = model.config.fused_dim();
        for (name, v) in model.running.iter_mut() {
            *v = read(name, &[d])?.into_data();
        }
        Ok(model)
    }
}
