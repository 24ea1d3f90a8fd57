//! Detector network: backbone, region proposal network, RoI pooling, the
//! occluder and occludee heads and the occlusion context module.
//!
//! Forward functions record onto a [`Graph`]; value-level helpers turn the
//! recorded outputs into boxes and scores.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::rc::Rc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_deltas, encode_deltas, fes_expand, generate_anchors, nms_indices, AnchorConfig, BBox, Branch, FesConfig};
use crate::nn::{he_normal, normal, sigmoid, softmax_into, Graph, NodeId, ParamStore, ResamplePlan, RoiAlignPlan, RoiLevel, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Plain conv stages, one output level.
    Tiny,
    /// Bottleneck ResNet with a feature pyramid, one level per residual stage.
    FpnResnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub variant: BackboneVariant,
    /// Channels of every returned feature level.
    pub channels: usize,
    /// Tiny: number of stride-2 stages (2..=4).
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// FpnResnet: bottleneck blocks per residual stage (at most 4 stages).
    #[serde(default = "default_blocks")]
    pub blocks: Vec<usize>,
    /// FpnResnet: width of the stem and of the first residual stage.
    #[serde(default = "default_stem_width")]
    pub stem_width: usize,
}

fn default_stages() -> usize {
    3
}

fn default_blocks() -> Vec<usize> {
    vec![3, 4, 23, 3]
}

fn default_stem_width() -> usize {
    64
}

impl BackboneSpec {
    pub fn tiny(channels: usize, stages: usize) -> Self {
        Self { variant: BackboneVariant::Tiny, channels, stages, blocks: default_blocks(), stem_width: default_stem_width() }
    }

    pub fn fpn_resnet(channels: usize, blocks: Vec<usize>, stem_width: usize) -> Self {
        Self { variant: BackboneVariant::FpnResnet, channels, stages: default_stages(), blocks, stem_width }
    }

    /// Stride of each returned level, finest first.
    pub fn strides(&self) -> Vec<u32> {
        match self.variant {
            BackboneVariant::Tiny => vec![1 << self.stages],
            BackboneVariant::FpnResnet => (0..self.blocks.len()).map(|i| 4 << i).collect(),
        }
    }

    /// Input sides must be multiples of this after padding.
    pub fn pad_multiple(&self) -> u32 {
        self.strides().into_iter().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        match self.variant {
            BackboneVariant::Tiny if !(2..=4).contains(&self.stages) => {
                Err(Error::Config(format!("tiny backbone needs 2..=4 stages, got {}", self.stages)))
            }
            BackboneVariant::FpnResnet
                if self.blocks.is_empty() || self.blocks.len() > 4 || self.blocks.contains(&0) || self.stem_width == 0 =>
            {
                Err(Error::Config("fpn_resnet needs 1..=4 non-empty stages and a positive stem width".into()))
            }
            _ => Ok(()),
        }
    }

    fn tiny_widths(&self) -> Vec<usize> {
        (0..self.stages).map(|i| (self.channels >> (self.stages - 1 - i)).max(self.channels.min(4))).collect()
    }
}

/// How the occlusion context module maps pooled features to a coarse grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextReading {
    /// 3x3 conv, then one fully-connected layer onto the grid.
    #[default]
    FullyConnected,
    /// 3x3 conv, then a 1x1 conv to one channel resized onto the grid.
    FullyConvolutional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    #[serde(default)]
    pub reading: ContextReading,
    /// Side of the coarse grid before up-sampling; `pooled / 2` when unset.
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub anchors: AnchorConfig,
    /// RoI pooling output side `P`.
    pub pooled: usize,
    pub sampling_ratio: usize,
    /// Width of the two shared fully-connected layers in each head.
    pub head_hidden: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    #[serde(default)]
    pub context: ContextSpec,
    pub fes: FesConfig,
    /// Scale applied to encoded head regression targets.
    pub delta_weights: [f64; 4],
}

impl ModelConfig {
    /// Desk-scale configuration for 256x256 synthetic scenes.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneSpec::tiny(32, 3),
            anchors: AnchorConfig { strides: vec![8], scales: vec![28.0, 40.0, 56.0], aspect_ratios: vec![0.8, 1.0, 1.25] },
            pooled: 7,
            sampling_ratio: 2,
            head_hidden: 64,
            num_classes: 2,
            context: ContextSpec::default(),
            fes: FesConfig::default(),
            delta_weights: [10.0, 10.0, 5.0, 5.0],
        }
    }

    /// Full-scale configuration: ResNet-101 depth with a 4-level pyramid.
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneSpec::fpn_resnet(256, default_blocks(), 64),
            anchors: AnchorConfig {
                strides: vec![4, 8, 16, 32],
                scales: vec![32.0, 64.0, 128.0, 256.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
            },
            pooled: 7,
            sampling_ratio: 2,
            head_hidden: 1024,
            num_classes: 2,
            context: ContextSpec::default(),
            fes: FesConfig::default(),
            delta_weights: [10.0, 10.0, 5.0, 5.0],
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny_check() -> Self {
        Self {
            backbone: BackboneSpec::tiny(8, 2),
            anchors: AnchorConfig { strides: vec![4], scales: vec![8.0, 16.0], aspect_ratios: vec![1.0] },
            pooled: 4,
            sampling_ratio: 2,
            head_hidden: 8,
            num_classes: 2,
            context: ContextSpec::default(),
            fes: FesConfig::default(),
            delta_weights: [10.0, 10.0, 5.0, 5.0],
        }
    }

    pub fn context_grid(&self) -> usize {
        self.context.grid.unwrap_or(self.pooled / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.fes.validate()?;
        if self.anchors.strides != self.backbone.strides() {
            return Err(Error::Config(format!(
                "anchor strides {:?} do not match backbone strides {:?}",
                self.anchors.strides,
                self.backbone.strides()
            )));
        }
        if self.pooled == 0 || self.sampling_ratio == 0 || self.head_hidden == 0 {
            return Err(Error::Config("pooled size, sampling ratio and head width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need background plus at least one class".into()));
        }
        if self.delta_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("delta weights must be positive".into()));
        }
        if self.context_grid() > self.pooled {
            return Err(Error::Config("context grid cannot exceed the pooled size".into()));
        }
        Ok(())
    }

    /// Anchors used at level `i`: one scale per level when the lists pair up,
    /// otherwise every scale everywhere.
    fn level_anchor_config(&self, i: usize) -> AnchorConfig {
        let a = &self.anchors;
        let scales = if a.strides.len() > 1 && a.scales.len() == a.strides.len() { vec![a.scales[i]] } else { a.scales.clone() };
        AnchorConfig { strides: vec![a.strides[i]], scales, aspect_ratios: a.aspect_ratios.clone() }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.level_anchor_config(0).anchors_per_cell()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// Names of the last fully-connected layers, re-initialized by head surgery.
pub const HEAD_LAYERS: [&str; 4] = ["occluder.cls", "occluder.bbox", "occludee.cls", "occludee.bbox"];

pub fn is_head_param(name: &str) -> bool {
    HEAD_LAYERS.iter().any(|l| name.strip_prefix(l).is_some_and(|rest| rest.starts_with('.')))
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, o: usize, i: usize, k: usize, bias: bool| {
        specs.push((format!("{name}.w"), vec![o, i, k, k], Init::He(i * k * k)));
        if bias {
            specs.push((format!("{name}.b"), vec![o], Init::Zeros));
        }
    };
    let c = cfg.backbone.channels;
    match cfg.backbone.variant {
        BackboneVariant::Tiny => {
            let mut cin = 3;
            for (i, &w) in cfg.backbone.tiny_widths().iter().enumerate() {
                conv(&mut specs, &format!("backbone.stage{i}.conv_a"), w, cin, 3, true);
                conv(&mut specs, &format!("backbone.stage{i}.conv_b"), w, w, 3, true);
                cin = w;
            }
        }
        BackboneVariant::FpnResnet => {
            let sw = cfg.backbone.stem_width;
            conv(&mut specs, "backbone.stem.conv", sw, 3, 7, false);
            affine(&mut specs, "backbone.stem.bn", sw);
            let mut cin = sw;
            let mut outs = Vec::new();
            for (s, &nb) in cfg.backbone.blocks.iter().enumerate() {
                let width = sw << s;
                let out = width * 4;
                for b in 0..nb {
                    let p = format!("backbone.res{s}.{b}");
                    conv(&mut specs, &format!("{p}.conv1"), width, cin, 1, false);
                    affine(&mut specs, &format!("{p}.bn1"), width);
                    conv(&mut specs, &format!("{p}.conv2"), width, width, 3, false);
                    affine(&mut specs, &format!("{p}.bn2"), width);
                    conv(&mut specs, &format!("{p}.conv3"), out, width, 1, false);
                    affine(&mut specs, &format!("{p}.bn3"), out);
                    if b == 0 {
                        conv(&mut specs, &format!("{p}.down"), out, cin, 1, false);
                        affine(&mut specs, &format!("{p}.down_bn"), out);
                    }
                    cin = out;
                }
                outs.push(out);
            }
            for (s, &o) in outs.iter().enumerate() {
                conv(&mut specs, &format!("backbone.fpn.lateral{s}"), c, o, 1, true);
                conv(&mut specs, &format!("backbone.fpn.output{s}"), c, c, 3, true);
            }
        }
    }
    let a = cfg.anchors_per_cell();
    conv(&mut specs, "rpn.conv", c, c, 3, true);
    specs.push(("rpn.cls.w".into(), vec![a, c, 1, 1], Init::Normal(0.01)));
    specs.push(("rpn.cls.b".into(), vec![a], Init::Zeros));
    specs.push(("rpn.bbox.w".into(), vec![4 * a, c, 1, 1], Init::Normal(0.01)));
    specs.push(("rpn.bbox.b".into(), vec![4 * a], Init::Zeros));

    let p = cfg.pooled;
    let flat = c * p * p;
    let h = cfg.head_hidden;
    for head in ["occluder", "occludee"] {
        specs.push((format!("{head}.fc1.w"), vec![h, flat], Init::He(flat)));
        specs.push((format!("{head}.fc1.b"), vec![h], Init::Zeros));
        specs.push((format!("{head}.fc2.w"), vec![h, h], Init::He(h)));
        specs.push((format!("{head}.fc2.b"), vec![h], Init::Zeros));
        specs.push((format!("{head}.cls.w"), vec![cfg.num_classes, h], Init::Normal(0.01)));
        specs.push((format!("{head}.cls.b"), vec![cfg.num_classes], Init::Zeros));
        specs.push((format!("{head}.bbox.w"), vec![4, h], Init::Normal(0.001)));
        specs.push((format!("{head}.bbox.b"), vec![4], Init::Zeros));
    }
    let g = cfg.context_grid();
    conv(&mut specs, "context.conv", c, c, 3, true);
    match cfg.context.reading {
        ContextReading::FullyConnected => {
            specs.push(("context.fc.w".into(), vec![g * g, flat], Init::He(flat)));
            specs.push(("context.fc.b".into(), vec![g * g], Init::Zeros));
        }
        ContextReading::FullyConvolutional => {
            specs.push(("context.reduce.w".into(), vec![1, c, 1, 1], Init::He(c)));
            specs.push(("context.reduce.b".into(), vec![1], Init::Zeros));
        }
    }
    specs.push(("context.out.w".into(), vec![1, 1, 1, 1], Init::Ones));
    specs.push(("context.out.b".into(), vec![1], Init::Zeros));
    specs
}

fn affine(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize) {
    specs.push((format!("{name}.scale"), vec![c], Init::Ones));
    specs.push((format!("{name}.shift"), vec![c], Init::Zeros));
}

fn init_tensor(shape: &[usize], init: Init, seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    match init {
        Init::He(fan_in) => he_normal(&mut rng, shape, fan_in),
        Init::Normal(std) => normal(&mut rng, shape, std),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, (name, shape, init)) in param_specs(&config).into_iter().enumerate() {
            params.insert(name, init_tensor(&shape, init, seed, i as u64));
        }
        Ok(Self { config, params })
    }

    /// Re-draws the last fully-connected layers of both heads.
    pub fn reinit_heads(&mut self, seed: u64) -> Vec<String> {
        let mut replaced = Vec::new();
        for (i, (name, shape, init)) in param_specs(&self.config).into_iter().enumerate() {
            if is_head_param(&name) {
                self.params.insert(name.clone(), init_tensor(&shape, init, seed, i as u64));
                replaced.push(name);
            }
        }
        replaced
    }

    /// Expected `(name, shape)` pairs for this configuration.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        param_specs(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        let mut params = ParamStore::new();
        let mut stored = ck.params;
        for (name, shape) in Self::expected_shapes(&ck.config) {
            let t = stored.remove(&name).ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing")))?;
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape)));
            }
            params.insert(name, t);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config: ck.config, params })
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_checkpoint(metadata))?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Self::read_checkpoint(path)?)
    }
}

/// Normalized `[1, 3, H', W']` tensor, zero-padded on the bottom/right so both
/// sides are multiples of `pad_multiple`.
pub fn image_tensor(img: &RgbImage, pad_multiple: u32) -> Tensor {
    let (w, h) = img.dimensions();
    let m = pad_multiple.max(1);
    let (wp, hp) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let (wp, hp) = (wp as usize, hp as usize);
    let mut data = vec![0.0; 3 * hp * wp];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * hp * wp + y as usize * wp + x as usize] = (f64::from(p[c]) / 255.0 - 0.5) / 0.25;
        }
    }
    Tensor { shape: vec![1, 3, hp, wp], data }
}

/// Runs the backbone on `x: [1, 3, H, W]`; returns one `[1, C, H/s, W/s]` node
/// per level, finest first.
pub fn backbone_forward(g: &mut Graph, spec: &BackboneSpec, x: NodeId) -> Result<Vec<NodeId>> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
        return Err(Error::Shape(format!("backbone expects [1, 3, H, W], got {shape:?}")));
    }
    let m = spec.pad_multiple() as usize;
    if shape[2] % m != 0 || shape[3] % m != 0 {
        return Err(Error::Shape(format!("input {}x{} is not padded to a multiple of {m}", shape[3], shape[2])));
    }
    if !g.value(x).all_finite() {
        return Err(Error::NonFinite("backbone input".into()));
    }
    match spec.variant {
        BackboneVariant::Tiny => {
            let mut h = x;
            for i in 0..spec.stages {
                h = conv_relu(g, &format!("backbone.stage{i}.conv_a"), h, 2, 1);
                h = conv_relu(g, &format!("backbone.stage{i}.conv_b"), h, 1, 1);
            }
            Ok(vec![h])
        }
        BackboneVariant::FpnResnet => Ok(fpn_resnet_forward(g, spec, x)),
    }
}

fn conv(g: &mut Graph, name: &str, x: NodeId, stride: usize, pad: usize, bias: bool) -> NodeId {
    let w = g.param(&format!("{name}.w"));
    let b = bias.then(|| g.param(&format!("{name}.b")));
    g.conv2d(x, w, b, stride, pad)
}

fn conv_relu(g: &mut Graph, name: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
    let h = conv(g, name, x, stride, pad, true);
    g.relu(h)
}

fn bn(g: &mut Graph, name: &str, x: NodeId) -> NodeId {
    let s = g.param(&format!("{name}.scale"));
    let t = g.param(&format!("{name}.shift"));
    g.channel_affine(x, s, t)
}

fn fpn_resnet_forward(g: &mut Graph, spec: &BackboneSpec, x: NodeId) -> Vec<NodeId> {
    let h = conv(g, "backbone.stem.conv", x, 2, 3, false);
    let h = bn(g, "backbone.stem.bn", h);
    let h = g.relu(h);
    let mut h = g.max_pool(h);
    let mut stage_outputs = Vec::new();
    for (s, &nb) in spec.blocks.iter().enumerate() {
        for b in 0..nb {
            let p = format!("backbone.res{s}.{b}");
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let y = conv(g, &format!("{p}.conv1"), h, 1, 0, false);
            let y = bn(g, &format!("{p}.bn1"), y);
            let y = g.relu(y);
            let y = conv(g, &format!("{p}.conv2"), y, stride, 1, false);
            let y = bn(g, &format!("{p}.bn2"), y);
            let y = g.relu(y);
            let y = conv(g, &format!("{p}.conv3"), y, 1, 0, false);
            let y = bn(g, &format!("{p}.bn3"), y);
            let shortcut = if b == 0 {
                let d = conv(g, &format!("{p}.down"), h, stride, 0, false);
                bn(g, &format!("{p}.down_bn"), d)
            } else {
                h
            };
            let sum = g.add(y, shortcut);
            h = g.relu(sum);
        }
        stage_outputs.push(h);
    }
    let n = stage_outputs.len();
    let mut merged: Vec<Option<NodeId>> = vec![None; n];
    let mut top: Option<NodeId> = None;
    for s in (0..n).rev() {
        let lat = conv(g, &format!("backbone.fpn.lateral{s}"), stage_outputs[s], 1, 0, true);
        let cur = match top {
            None => lat,
            Some(t) => {
                let (ts, ls) = (g.shape(t).to_vec(), g.shape(lat).to_vec());
                let up = g.resample(t, Rc::new(ResamplePlan::nearest((ts[2], ts[3]), (ls[2], ls[3]))));
                g.add(lat, up)
            }
        };
        merged[s] = Some(cur);
        top = Some(cur);
    }
    merged
        .into_iter()
        .enumerate()
        .map(|(s, m)| conv(g, &format!("backbone.fpn.output{s}"), m.expect("every level merged"), 1, 1, true))
        .collect()
}

/// Raw RPN outputs, one objectness `[1, A, h, w]` and delta `[1, 4A, h, w]`
/// node per level.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub objectness: Vec<NodeId>,
    pub deltas: Vec<NodeId>,
    pub grids: Vec<(usize, usize)>,
    pub anchors_per_cell: usize,
}

impl RpnOutput {
    pub fn num_anchors(&self) -> usize {
        self.grids.iter().map(|(h, w)| h * w * self.anchors_per_cell).sum()
    }

    fn flat_indices(&self, per_anchor: usize) -> Vec<Vec<usize>> {
        let a = self.anchors_per_cell;
        self.grids
            .iter()
            .map(|&(h, w)| {
                let plane = h * w;
                let mut idx = Vec::with_capacity(plane * a * per_anchor);
                for cell in 0..plane {
                    for k in 0..a {
                        for d in 0..per_anchor {
                            idx.push((k * per_anchor + d) * plane + cell);
                        }
                    }
                }
                idx
            })
            .collect()
    }

    /// Objectness logits `[A_total]` and deltas `[A_total, 4]` in anchor order
    /// (levels, then cells row-major, then anchor shapes).
    pub fn flatten(&self, g: &mut Graph) -> (NodeId, NodeId) {
        let obj_idx = self.flat_indices(1);
        let del_idx = self.flat_indices(4);
        let mut objs = Vec::new();
        let mut dels = Vec::new();
        for (l, (oi, di)) in obj_idx.into_iter().zip(del_idx).enumerate() {
            objs.push(g.gather(self.objectness[l], oi));
            dels.push(g.gather(self.deltas[l], di));
        }
        let n = self.num_anchors();
        let obj = if objs.len() == 1 { objs[0] } else { g.concat(&objs) };
        let del = if dels.len() == 1 { dels[0] } else { g.concat(&dels) };
        let del = g.reshape(del, &[n, 4]);
        (obj, del)
    }

    /// Objectness probabilities and raw deltas in anchor order, read from
    /// recorded values.
    pub fn values(&self, g: &Graph) -> (Vec<f64>, Vec<[f64; 4]>) {
        let mut scores = Vec::with_capacity(self.num_anchors());
        let mut deltas = Vec::with_capacity(self.num_anchors());
        let a = self.anchors_per_cell;
        for (l, &(h, w)) in self.grids.iter().enumerate() {
            let plane = h * w;
            let o = &g.value(self.objectness[l]).data;
            let d = &g.value(self.deltas[l]).data;
            for cell in 0..plane {
                for k in 0..a {
                    scores.push(sigmoid(o[k * plane + cell]));
                    deltas.push(std::array::from_fn(|j| d[(k * 4 + j) * plane + cell]));
                }
            }
        }
        (scores, deltas)
    }
}

pub fn rpn_forward(g: &mut Graph, cfg: &ModelConfig, levels: &[NodeId]) -> RpnOutput {
    let mut objectness = Vec::with_capacity(levels.len());
    let mut deltas = Vec::with_capacity(levels.len());
    let mut grids = Vec::with_capacity(levels.len());
    for &f in levels {
        let s = g.shape(f).to_vec();
        grids.push((s[2], s[3]));
        let h = conv_relu(g, "rpn.conv", f, 1, 1);
        objectness.push(conv(g, "rpn.cls", h, 1, 0, true));
        deltas.push(conv(g, "rpn.bbox", h, 1, 0, true));
    }
    RpnOutput { objectness, deltas, grids, anchors_per_cell: cfg.anchors_per_cell() }
}

/// Anchors for the given level grids, concatenated in anchor order.
pub fn anchors_for_grids(cfg: &ModelConfig, grids: &[(usize, usize)]) -> Vec<BBox> {
    grids
        .iter()
        .enumerate()
        .flat_map(|(i, &grid)| {
            let lc = cfg.level_anchor_config(i);
            generate_anchors(grid, &lc, lc.strides[0])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalParams {
    /// Anchors must score strictly above this.
    pub score_threshold: f64,
    pub pre_nms_top_n: usize,
    pub nms_threshold: f64,
    pub post_nms_top_n: usize,
    /// Decoded boxes narrower or shorter than this (pixels) are discarded.
    pub min_size: f64,
}

impl ProposalParams {
    pub fn train() -> Self {
        Self { score_threshold: 0.0, pre_nms_top_n: 2000, nms_threshold: 0.7, post_nms_top_n: 300, min_size: 2.0 }
    }

    pub fn test() -> Self {
        Self { score_threshold: 0.0, pre_nms_top_n: 1000, nms_threshold: 0.7, post_nms_top_n: 300, min_size: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub proposals: Vec<BBox>,
    pub objectness: Vec<f64>,
    /// `fes_expand` of each proposal; element 0 is the proposal.
    pub expansions: Vec<Vec<BBox>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Builds a set from fixed boxes (objectness 1).
    pub fn from_boxes(boxes: Vec<BBox>, fes: &FesConfig, image_size: (u32, u32)) -> Self {
        let expansions = boxes.iter().map(|b| fes_expand(b, fes, image_size)).collect();
        Self { objectness: vec![1.0; boxes.len()], proposals: boxes, expansions }
    }
}

/// Decodes anchors into clipped, NMS-filtered proposals with FES expansions.
pub fn rpn_propose(
    scores: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[BBox],
    image_size: (u32, u32),
    params: &ProposalParams,
    fes: &FesConfig,
) -> ProposalSet {
    assert_eq!(scores.len(), anchors.len(), "one score per anchor");
    assert_eq!(deltas.len(), anchors.len(), "one delta per anchor");
    let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > params.score_threshold).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(params.pre_nms_top_n);
    let mut boxes = Vec::with_capacity(order.len());
    let mut kept_scores = Vec::with_capacity(order.len());
    for i in order {
        let b = apply_deltas(&anchors[i], &deltas[i]).clip(w, h);
        if b.is_valid() && b.width() >= params.min_size && b.height() >= params.min_size {
            boxes.push(b);
            kept_scores.push(scores[i]);
        }
    }
    let mut keep = nms_indices(&boxes, &kept_scores, params.nms_threshold);
    keep.truncate(params.post_nms_top_n);
    let proposals: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
    let objectness = keep.iter().map(|&i| kept_scores[i]).collect();
    let expansions = proposals.iter().map(|b| fes_expand(b, fes, image_size)).collect();
    ProposalSet { proposals, objectness, expansions }
}

/// Feature level each box is pooled from (pyramid rule for multi-level).
pub fn roi_levels(boxes: &[BBox], num_levels: usize) -> Vec<usize> {
    if num_levels == 1 {
        return vec![0; boxes.len()];
    }
    boxes
        .iter()
        .map(|b| {
            let k = (4.0 + (b.area().sqrt() / 224.0 + 1e-8).log2()).floor();
            (k.clamp(2.0, (num_levels + 1) as f64) as usize) - 2
        })
        .collect()
}

/// Bilinear RoI pooling of `boxes` (image coordinates) to `[N, C, P, P]`.
pub fn extract_roi_features(g: &mut Graph, cfg: &ModelConfig, levels: &[NodeId], boxes: &[BBox]) -> Result<NodeId> {
    let strides = cfg.backbone.strides();
    let roi_levels_meta: Vec<RoiLevel> = levels
        .iter()
        .zip(&strides)
        .map(|(&l, &s)| {
            let sh = g.shape(l);
            RoiLevel { height: sh[2], width: sh[3], stride: f64::from(s) }
        })
        .collect();
    let which = roi_levels(boxes, levels.len());
    let plan = RoiAlignPlan::new(boxes, &which, &roi_levels_meta, cfg.pooled, cfg.sampling_ratio)?;
    Ok(g.roi_align(levels, Rc::new(plan)))
}

/// Class logits `[N, K]` and raw box deltas `[N, 4]` of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub logits: NodeId,
    pub deltas: NodeId,
}

fn head_forward(g: &mut Graph, prefix: &str, roi: NodeId) -> HeadNodes {
    let lin = |g: &mut Graph, name: &str, x: NodeId| {
        let w = g.param(&format!("{prefix}.{name}.w"));
        let b = g.param(&format!("{prefix}.{name}.b"));
        g.linear(x, w, Some(b))
    };
    let h = lin(g, "fc1", roi);
    let h = g.relu(h);
    let h = lin(g, "fc2", h);
    let h = g.relu(h);
    let logits = lin(g, "cls", h);
    let deltas = lin(g, "bbox", h);
    HeadNodes { logits, deltas }
}

/// Two shared fully-connected layers, then class and box heads.
pub fn occluder_forward(g: &mut Graph, roi: NodeId) -> HeadNodes {
    head_forward(g, "occluder", roi)
}

/// One-channel `[N, 1, P, P]` map distilled from pooled features.
pub fn occlusion_context(g: &mut Graph, cfg: &ModelConfig, roi: NodeId) -> NodeId {
    let n = g.shape(roi)[0];
    let p = cfg.pooled;
    let grid = cfg.context_grid();
    let h = conv_relu(g, "context.conv", roi, 1, 1);
    let coarse = match cfg.context.reading {
        ContextReading::FullyConnected => {
            let w = g.param("context.fc.w");
            let b = g.param("context.fc.b");
            let z = g.linear(h, w, Some(b));
            g.reshape(z, &[n, 1, grid, grid])
        }
        ContextReading::FullyConvolutional => {
            let z = conv(g, "context.reduce", h, 1, 0, true);
            g.resample(z, Rc::new(ResamplePlan::bilinear((p, p), (grid, grid))))
        }
    };
    let up = g.resample(coarse, Rc::new(ResamplePlan::bilinear((grid, grid), (p, p))));
    conv(g, "context.out", up, 1, 0, true)
}

/// Occludee head over expansion features laid out expansion-major
/// (`row = i * N + n`), with `context: [N, 1, P, P]` added to every channel of
/// every expansion of proposal `n`.
pub fn occludee_forward(g: &mut Graph, context: NodeId, expansion_roi: NodeId, num_expansions: usize) -> Result<HeadNodes> {
    let n = g.shape(context)[0];
    let rows = g.shape(expansion_roi)[0];
    if num_expansions == 0 || rows != n * num_expansions {
        return Err(Error::Shape(format!(
            "expected {num_expansions} expansions for {n} proposals ({} rows), got {rows} rows",
            n * num_expansions
        )));
    }
    let x = g.add_broadcast(expansion_roi, context);
    Ok(head_forward(g, "occludee", x))
}

/// Softmax scores and raw deltas for a batch of RoIs from one head.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub scores: Vec<Vec<f64>>,
    pub deltas: Vec<[f64; 4]>,
    pub branch: Branch,
}

impl BranchOutput {
    pub fn from_head(g: &Graph, head: &HeadNodes, branch: Branch) -> Self {
        Self::from_rows(g, head, branch, 0, g.shape(head.logits)[0])
    }

    /// Rows `start..end` of a head's outputs.
    pub fn from_rows(g: &Graph, head: &HeadNodes, branch: Branch, start: usize, end: usize) -> Self {
        let lv = g.value(head.logits);
        let k = lv.shape[1];
        let dv = &g.value(head.deltas).data;
        let mut scores = Vec::with_capacity(end - start);
        let mut deltas = Vec::with_capacity(end - start);
        for r in start..end {
            let mut p = vec![0.0; k];
            softmax_into(&lv.data[r * k..(r + 1) * k], &mut p);
            scores.push(p);
            deltas.push(std::array::from_fn(|j| dv[r * 4 + j]));
        }
        Self { scores, deltas, branch }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Regression target of `gt` relative to `anchor`, scaled by `weights`.
pub fn encode_target(anchor: &BBox, gt: &BBox, weights: &[f64; 4]) -> Result<[f64; 4]> {
    let d = encode_deltas(anchor, gt)?;
    Ok(std::array::from_fn(|i| d[i] * weights[i]))
}

/// Inverse of [`encode_target`].
pub fn decode_box(anchor: &BBox, raw: &[f64; 4], weights: &[f64; 4]) -> BBox {
    let d: [f64; 4] = std::array::from_fn(|i| raw[i] / weights[i]);
    apply_deltas(anchor, &d)
}

/// Pools every expansion of every proposal, expansion-major.
pub fn extract_expansion_features(g: &mut Graph, cfg: &ModelConfig, levels: &[NodeId], expansions: &[Vec<BBox>]) -> Result<NodeId> {
    let k1 = cfg.fes.num_expansions();
    let mut boxes = Vec::with_capacity(expansions.len() * k1);
    for i in 0..k1 {
        for e in expansions {
            let b = e.get(i).ok_or_else(|| Error::Shape(format!("proposal has {} expansions, need {k1}", e.len())))?;
            boxes.push(*b);
        }
    }
    extract_roi_features(g, cfg, levels, &boxes)
}
