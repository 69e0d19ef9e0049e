//! Segmentation network with tapped intermediate layers.
//!
//! The encoder is a stack of stride-2 stages. Every stage after the first is
//! tapped: its features pass through a small dilated context block and a
//! 1×1 class head, which is what intermediate-layer distillation compares.
//! The deepest stage feeds an ASPP-style context head whose output is the
//! pre-classifier embedding, followed by a 1×1 classifier that grows as
//! classes are added.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 encoder stage.
    pub stage_widths: Vec<usize>,
    /// Channel count `N` of the per-layer embeddings.
    pub tap_width: usize,
    /// Channel count `N_d` of the pre-classifier embedding.
    pub embed_width: usize,
    /// Dilation rates of the 3×3 context branches.
    pub context_rates: Vec<usize>,
    /// Std-dev of the noise added to background weights for new classes.
    pub new_class_sigma: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_widths: vec![16, 32, 48, 64],
            tap_width: 32,
            embed_width: 64,
            context_rates: vec![1, 2],
            new_class_sigma: 1e-3,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() < 2 {
            return Err(Error::config(
                "model.stage_widths",
                "need at least two encoder stages",
            ));
        }
        if self.stage_widths.contains(&0) || self.tap_width == 0 || self.embed_width == 0 {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("model.in_channels", "must be positive"));
        }
        if self.context_rates.contains(&0) {
            return Err(Error::config("model.context_rates", "rates must be positive"));
        }
        if !(self.new_class_sigma >= 0.0) {
            return Err(Error::config("model.new_class_sigma", "must be non-negative"));
        }
        Ok(())
    }

    /// Total spatial downsampling of the deepest features.
    pub fn output_stride(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn num_taps(&self) -> usize {
        self.stage_widths.len() - 1
    }
}

/// A parameter tensor. Live models hold trainable variables; snapshots hold
/// detached copies that never enter the autograd graph.
#[derive(Clone)]
pub struct Param(ParamKind);

#[derive(Clone)]
enum ParamKind {
    Trainable(Var),
    Frozen(Tensor),
}

impl Param {
    fn trainable(t: Tensor) -> Result<Self> {
        Ok(Param(ParamKind::Trainable(Var::from_tensor(&t)?)))
    }

    pub fn tensor(&self) -> &Tensor {
        match &self.0 {
            ParamKind::Trainable(v) => v.as_tensor(),
            ParamKind::Frozen(t) => t,
        }
    }

    pub fn var(&self) -> Option<&Var> {
        match &self.0 {
            ParamKind::Trainable(v) => Some(v),
            ParamKind::Frozen(_) => None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.0, ParamKind::Frozen(_))
    }

    fn deep_copy(&self, frozen: bool) -> Result<Self> {
        let data = self.tensor().detach().copy()?;
        if frozen {
            Ok(Param(ParamKind::Frozen(data)))
        } else {
            Param::trainable(data)
        }
    }

    fn set(&mut self, t: &Tensor) -> Result<()> {
        if t.dims() != self.tensor().dims() {
            return Err(Error::Checkpoint(format!(
                "parameter shape {:?} does not match {:?}",
                t.dims(),
                self.tensor().dims()
            )));
        }
        let t = t.to_dtype(self.tensor().dtype())?;
        match &mut self.0 {
            ParamKind::Trainable(v) => v.set(&t)?,
            ParamKind::Frozen(old) => *old = t.copy()?,
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Conv2d {
    weight: Param,
    bias: Param,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.tensor(), self.padding, self.stride, self.dilation, 1)?;
        let c = self.bias.tensor().dim(0)?;
        Ok(y.broadcast_add(&self.bias.tensor().reshape((1, c, 1, 1))?)?)
    }

    fn out_channels(&self) -> usize {
        self.weight.tensor().dims()[0]
    }

    fn deep_copy(&self, frozen: bool) -> Result<Self> {
        Ok(Conv2d {
            weight: self.weight.deep_copy(frozen)?,
            bias: self.bias.deep_copy(frozen)?,
            ..*self
        })
    }
}

struct Init<'a> {
    rng: ChaCha8Rng,
    device: &'a Device,
    dtype: DType,
}

impl Init<'_> {
    /// He-normal weights, zero bias.
    fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Conv2d> {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = self.normal(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt())?;
        let bias = Tensor::zeros(cout, self.dtype, self.device)?;
        Ok(Conv2d {
            weight: Param::trainable(weight)?,
            bias: Param::trainable(bias)?,
            stride,
            padding: dilation * (kernel / 2),
            dilation,
        })
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?)
    }
}

#[derive(Clone)]
struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

/// Lightweight context block `Λ` plus the 1×1 class head of one tapped layer.
#[derive(Clone)]
struct TapHead {
    local: Conv2d,
    dilated: Conv2d,
    head: Conv2d,
}

#[derive(Clone)]
struct ContextHead {
    branches: Vec<Conv2d>,
    pool: Conv2d,
    project: Conv2d,
}

/// Everything a forward pass exposes.
pub struct TapOutput {
    /// `e_l = Λ(F_l)` for each tapped layer, shallow to deep.
    pub layer_embeddings: Vec<Tensor>,
    /// 1×1 class-head logits of each tapped layer.
    pub layer_logits: Vec<Tensor>,
    /// Pre-classifier embedding `F_d` at the deepest resolution.
    pub out_embedding: Tensor,
    /// Classifier logits at the deepest resolution.
    pub coarse_logits: Tensor,
    /// Classifier logits bilinearly upsampled to the input resolution.
    pub logits: Tensor,
}

pub struct TapModel {
    config: ModelConfig,
    stages: Vec<Stage>,
    taps: Vec<TapHead>,
    context: ContextHead,
    classifier: Conv2d,
    num_classes_now: usize,
    device: Device,
}

impl TapModel {
    /// Fresh model predicting `num_classes` foreground classes plus background.
    pub fn new(config: &ModelConfig, num_classes: usize, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device,
            dtype: config.precision.dtype(),
        };
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for &w in &config.stage_widths {
            stages.push(Stage {
                down: init.conv(cin, w, 3, 2, 1)?,
                refine: init.conv(w, w, 3, 1, 1)?,
            });
            cin = w;
        }
        let n = config.tap_width;
        let mut taps = Vec::new();
        for &w in &config.stage_widths[1..] {
            taps.push(TapHead {
                local: init.conv(w, n, 1, 1, 1)?,
                dilated: init.conv(w, n, 3, 1, 2)?,
                head: init.conv(n, num_classes + 1, 1, 1, 1)?,
            });
        }
        let deep = *config.stage_widths.last().unwrap();
        let branch_width = (config.embed_width / 2).max(1);
        let mut branches = vec![init.conv(deep, branch_width, 1, 1, 1)?];
        for &rate in &config.context_rates {
            branches.push(init.conv(deep, branch_width, 3, 1, rate)?);
        }
        let pool = init.conv(deep, branch_width, 1, 1, 1)?;
        let project = init.conv(
            branch_width * (branches.len() + 1),
            config.embed_width,
            1,
            1,
            1,
        )?;
        let classifier = init.conv(config.embed_width, num_classes + 1, 1, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            stages,
            taps,
            context: ContextHead {
                branches,
                pool,
                project,
            },
            classifier,
            num_classes_now: num_classes,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Foreground classes currently predicted (output channels minus one).
    pub fn num_classes_now(&self) -> usize {
        self.num_classes_now
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<TapOutput> {
        let (_, c, h, w) = batch.dims4().map_err(|_| {
            Error::Shape(format!("expected a B×C×H×W batch, got {:?}", batch.dims()))
        })?;
        let stride = self.config.output_stride();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "batch has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the output stride {stride}"
            )));
        }
        let batch = batch.to_dtype(self.dtype())?;

        let mut x = batch;
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.down.forward(&x)?.relu()?;
            x = stage.refine.forward(&x)?.relu()?;
            features.push(x.clone());
        }

        let mut layer_embeddings = Vec::with_capacity(self.taps.len());
        let mut layer_logits = Vec::with_capacity(self.taps.len());
        for (tap, f) in self.taps.iter().zip(&features[1..]) {
            let e = (tap.local.forward(f)? + tap.dilated.forward(f)?)?.relu()?;
            layer_logits.push(tap.head.forward(&e)?);
            layer_embeddings.push(e);
        }

        let deep = features.last().unwrap();
        let mut parts = Vec::with_capacity(self.context.branches.len() + 1);
        for b in &self.context.branches {
            parts.push(b.forward(deep)?.relu()?);
        }
        let pooled = deep.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let pooled = self.context.pool.forward(&pooled)?.relu()?;
        parts.push(pooled.broadcast_as(parts[0].shape())?.contiguous()?);
        let cat = Tensor::cat(&parts, 1)?;
        let out_embedding = self.context.project.forward(&cat)?.relu()?;

        let coarse_logits = self.classifier.forward(&out_embedding)?;
        let logits = upsample_bilinear(&coarse_logits, h, w)?;
        Ok(TapOutput {
            layer_embeddings,
            layer_logits,
            out_embedding,
            coarse_logits,
            logits,
        })
    }

    /// Append `new_class_count` output channels to the classifier and every
    /// layer head. Existing channels are kept bit-exactly; new ones start
    /// from the background channel plus Gaussian noise.
    pub fn extend_classifier(&mut self, new_class_count: usize, seed: u64) -> Result<()> {
        if new_class_count == 0 {
            return Err(Error::Contract("new_class_count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = self.config.new_class_sigma;
        extend_conv(&mut self.classifier, new_class_count, sigma, &mut rng)?;
        for tap in &mut self.taps {
            extend_conv(&mut tap.head, new_class_count, sigma, &mut rng)?;
        }
        self.num_classes_now += new_class_count;
        Ok(())
    }

    fn convs(&self) -> Vec<(String, &Conv2d)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("encoder.stage{i}.down"), &s.down));
            out.push((format!("encoder.stage{i}.refine"), &s.refine));
        }
        for (i, t) in self.taps.iter().enumerate() {
            out.push((format!("tap{i}.local"), &t.local));
            out.push((format!("tap{i}.dilated"), &t.dilated));
            out.push((format!("tap{i}.head"), &t.head));
        }
        for (i, b) in self.context.branches.iter().enumerate() {
            out.push((format!("context.branch{i}"), b));
        }
        out.push(("context.pool".into(), &self.context.pool));
        out.push(("context.project".into(), &self.context.project));
        out.push(("classifier".into(), &self.classifier));
        out
    }

    fn convs_mut(&mut self) -> Vec<(String, &mut Conv2d)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.down"), &mut s.down));
            out.push((format!("encoder.stage{i}.refine"), &mut s.refine));
        }
        for (i, t) in self.taps.iter_mut().enumerate() {
            out.push((format!("tap{i}.local"), &mut t.local));
            out.push((format!("tap{i}.dilated"), &mut t.dilated));
            out.push((format!("tap{i}.head"), &mut t.head));
        }
        for (i, b) in self.context.branches.iter_mut().enumerate() {
            out.push((format!("context.branch{i}"), b));
        }
        out.push(("context.pool".into(), &mut self.context.pool));
        out.push(("context.project".into(), &mut self.context.project));
        out.push(("classifier".into(), &mut self.classifier));
        out
    }

    /// All parameters by stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            out.push((format!("{name}.weight"), &conv.weight));
            out.push((format!("{name}.bias"), &conv.bias));
        }
        out
    }

    /// Trainable variables (empty for a frozen copy).
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .filter_map(|(_, p)| p.var().cloned())
            .collect()
    }

    /// Parameter tensors of the layer heads only.
    pub fn layer_head_params(&self) -> Vec<&Param> {
        self.taps
            .iter()
            .flat_map(|t| [&t.head.weight, &t.head.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, p)| p.tensor().elem_count())
            .sum()
    }

    /// Detached copies of every parameter keyed by name.
    pub fn state_dict(&self) -> Result<HashMap<String, Tensor>> {
        self.named_params()
            .into_iter()
            .map(|(n, p)| Ok((n, p.tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite parameters from `state`; every parameter must be present.
    pub fn load_state_dict(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        for (name, conv) in self.convs_mut() {
            for (suffix, param) in [("weight", &mut conv.weight), ("bias", &mut conv.bias)] {
                let key = format!("{name}.{suffix}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{key}`")))?;
                param.set(t)?;
            }
        }
        Ok(())
    }

    fn deep_copy_with(&self, frozen: bool) -> Result<Self> {
        let copy_conv = |c: &Conv2d| c.deep_copy(frozen);
        Ok(Self {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| {
                    Ok(Stage {
                        down: copy_conv(&s.down)?,
                        refine: copy_conv(&s.refine)?,
                    })
                })
                .collect::<Result<_>>()?,
            taps: self
                .taps
                .iter()
                .map(|t| {
                    Ok(TapHead {
                        local: copy_conv(&t.local)?,
                        dilated: copy_conv(&t.dilated)?,
                        head: copy_conv(&t.head)?,
                    })
                })
                .collect::<Result<_>>()?,
            context: ContextHead {
                branches: self
                    .context
                    .branches
                    .iter()
                    .map(copy_conv)
                    .collect::<Result<_>>()?,
                pool: copy_conv(&self.context.pool)?,
                project: copy_conv(&self.context.project)?,
            },
            classifier: copy_conv(&self.classifier)?,
            num_classes_now: self.num_classes_now,
            device: self.device.clone(),
        })
    }

    /// Independent trainable copy.
    pub fn deep_copy(&self) -> Result<Self> {
        self.deep_copy_with(false)
    }

    pub fn is_frozen(&self) -> bool {
        self.classifier.weight.is_frozen()
    }

    /// Output channel count of every class head (classifier first).
    pub fn head_channels(&self) -> Vec<usize> {
        std::iter::once(self.classifier.out_channels())
            .chain(self.taps.iter().map(|t| t.head.out_channels()))
            .collect()
    }

    /// Convert samples' images into a `B×C×H×W` tensor of the model dtype.
    pub fn images_to_tensor(&self, images: &[&[f32]], h: usize, w: usize) -> Result<Tensor> {
        let c = self.config.in_channels;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.len() != c * h * w {
                return Err(Error::Shape(format!(
                    "image has {} values, expected {c}x{h}x{w}",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
        }
        Ok(Tensor::from_vec(data, (images.len(), c, h, w), &self.device)?.to_dtype(self.dtype())?)
    }
}

fn extend_conv(conv: &mut Conv2d, extra: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let w = conv.weight.tensor();
    let b = conv.bias.tensor();
    let (dtype, device) = (w.dtype(), w.device().clone());
    let dims = w.dims().to_vec();
    let per_row: usize = dims[1..].iter().product();
    let bg_row = w.get(0)?;
    let dist = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut new_rows = Vec::with_capacity(extra);
    for _ in 0..extra {
        let noise: Vec<f64> = (0..per_row)
            .map(|_| if sigma > 0.0 { dist.sample(rng) } else { 0.0 })
            .collect();
        let noise = Tensor::from_vec(noise, &dims[1..], &device)?.to_dtype(dtype)?;
        new_rows.push((&bg_row + noise)?.unsqueeze(0)?);
    }
    let mut rows = vec![w.detach()];
    rows.extend(new_rows);
    let weight = Tensor::cat(&rows, 0)?;
    let bg_bias = b.narrow(0, 0, 1)?.detach();
    let mut biases = vec![b.detach()];
    biases.extend(std::iter::repeat_n(bg_bias, extra));
    let bias = Tensor::cat(&biases, 0)?;
    conv.weight = Param::trainable(weight)?;
    conv.bias = Param::trainable(bias)?;
    Ok(())
}

/// Interpolation matrix `out × in` for half-pixel-centered bilinear resizing.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear upsampling of a `B×C×h×w` tensor to `B×C×H×W`.
pub fn upsample_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mh = Tensor::from_vec(bilinear_matrix(h, height), (height, h), dev)?.to_dtype(x.dtype())?;
    let mwt = Tensor::from_vec(bilinear_matrix(w, width), (width, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    // rows: (B*C*h, w) x (w, W)
    let y = x.reshape((b * c * h, w))?.matmul(&mwt)?;
    let y = y.reshape((b * c, h, width))?;
    // columns: (H, h) x (h, W) per plane
    let y = mh.broadcast_left(b * c)?.contiguous()?.matmul(&y)?;
    Ok(y.reshape((b, c, height, width))?)
}

/// Frozen copy of the previous step's model.
pub struct StepSnapshot {
    model: TapModel,
    step_index: usize,
}

impl StepSnapshot {
    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn model(&self) -> &TapModel {
        &self.model
    }

    /// Forward pass on the frozen parameters; the outputs carry no gradient.
    pub fn forward(&self, batch: &Tensor) -> Result<TapOutput> {
        let out = self.model.forward_with_taps(batch)?;
        Ok(TapOutput {
            layer_embeddings: out.layer_embeddings.iter().map(Tensor::detach).collect(),
            layer_logits: out.layer_logits.iter().map(Tensor::detach).collect(),
            out_embedding: out.out_embedding.detach(),
            coarse_logits: out.coarse_logits.detach(),
            logits: out.logits.detach(),
        })
    }
}

pub fn freeze_snapshot(model: &TapModel, step: usize) -> Result<StepSnapshot> {
    Ok(StepSnapshot {
        model: model.deep_copy_with(true)?,
        step_index: step,
    })
}
