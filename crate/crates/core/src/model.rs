//! The full segmentation network.
//!
//! For the complete strategy the deepest backbone output is projected to
//! `c_sam` channels and refined by spatial attention, the three shallower
//! outputs each pass through a two-layer transform to `c_mid` channels, the
//! deeper maps are upsampled to the 1/4 grid and concatenated with the
//! shallowest one, and channel attention reweights the fused map before the
//! main classifier. An auxiliary classifier reads the spatial-attention
//! output at 1/8 resolution.
//!
//! The ablation strategies drop parts of that graph. Strategies without
//! fusion classify at 1/8 and upsample the logits by 2, so every strategy
//! emits main logits on the 1/4 grid.

use std::fmt;
use std::str::FromStr;

use crate::attention::{CamBlock, SamBlock};
use crate::backbone::{Backbone, BackboneConfig, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::nn::{self, BnBuffers, Builder, Conv2d, ConvBnRelu, Ctx, ParamStore};
use crate::tensor::{Conv2dParams, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Sam,
    Cam,
    FeatureFusion,
    Parallel,
    Series,
    Full,
}

impl Strategy {
    /// Ablation order: single modules, fusion, combinations, complete model.
    pub const ALL: [Strategy; 6] = [
        Strategy::Sam,
        Strategy::Cam,
        Strategy::FeatureFusion,
        Strategy::Parallel,
        Strategy::Series,
        Strategy::Full,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Strategy::Sam => "sam",
            Strategy::Cam => "cam",
            Strategy::FeatureFusion => "ff",
            Strategy::Parallel => "parallel",
            Strategy::Series => "series",
            Strategy::Full => "full",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Sam => "SAM",
            Strategy::Cam => "CAM",
            Strategy::FeatureFusion => "FF",
            Strategy::Parallel => "CAM+ SAM (parallel)",
            Strategy::Series => "CAM+ SAM (series)",
            Strategy::Full => "FF+ SAM+ CAM",
        }
    }

    pub fn has_sam(self) -> bool {
        !matches!(self, Strategy::Cam | Strategy::FeatureFusion)
    }

    pub fn has_cam(self) -> bool {
        !matches!(self, Strategy::Sam | Strategy::FeatureFusion)
    }

    pub fn has_fusion(self) -> bool {
        matches!(self, Strategy::FeatureFusion | Strategy::Full)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim();
        Strategy::ALL
            .into_iter()
            .find(|st| st.key().eq_ignore_ascii_case(wanted) || st.label() == wanted)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy {wanted:?} (expected one of sam, cam, ff, parallel, series, full)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub c_mid: usize,
    pub c_sam: usize,
    /// Channel-attention bottleneck ratio `r`.
    pub cam_ratio: usize,
    /// Ratio of `c_sam` to the key/query width of spatial attention.
    pub sam_ratio: usize,
    pub num_classes: usize,
    pub aux_enabled: bool,
    pub strategy: Strategy,
    pub head_dropout: f64,
}

pub const MODEL_KEYS: [&str; 10] = [
    "model.stage_channels",
    "model.blocks_per_stage",
    "model.c_mid",
    "model.c_sam",
    "model.cam_ratio",
    "model.sam_ratio",
    "model.num_classes",
    "model.aux",
    "model.strategy",
    "model.head_dropout",
];

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            c_mid: 32,
            c_sam: 64,
            cam_ratio: 4,
            sam_ratio: 8,
            num_classes: 5,
            aux_enabled: true,
            strategy: Strategy::Full,
            head_dropout: 0.1,
        }
    }

    /// Full-width channel plan, used for channel and parameter ledgers.
    pub fn paper_scale() -> Self {
        ModelConfig {
            backbone: BackboneConfig::paper_scale(),
            c_mid: 256,
            c_sam: 512,
            num_classes: 150,
            ..ModelConfig::toy()
        }
    }

    /// Width of the concatenated map `3·c_mid + c_sam`.
    pub fn fused_channels(&self) -> usize {
        3 * self.c_mid + self.c_sam
    }

    pub fn sam_key_channels(&self) -> usize {
        (self.c_sam / self.sam_ratio).max(1)
    }

    /// Width of the map the main classifier reads.
    pub fn head_channels(&self) -> usize {
        if self.strategy.has_fusion() {
            self.fused_channels()
        } else {
            self.c_sam
        }
    }

    /// The auxiliary classifier exists only on top of spatial attention.
    pub fn aux_active(&self) -> bool {
        self.aux_enabled && self.strategy.has_sam()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.c_mid == 0 || self.c_sam == 0 {
            return Err(Error::config("c_mid and c_sam must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.sam_ratio == 0 {
            return Err(Error::config("sam_ratio must be positive"));
        }
        if self.strategy.has_cam() {
            let c = self.head_channels();
            if self.cam_ratio == 0 || c % self.cam_ratio != 0 {
                return Err(Error::config(format!(
                    "cam_ratio {} must divide the {c} channels channel attention sees",
                    self.cam_ratio
                )));
            }
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config(format!("head_dropout {} outside [0, 1)", self.head_dropout)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.stage_channels", join(&self.backbone.stage_channels));
        kv.set("model.blocks_per_stage", join(&self.backbone.blocks_per_stage));
        kv.set("model.c_mid", self.c_mid);
        kv.set("model.c_sam", self.c_sam);
        kv.set("model.cam_ratio", self.cam_ratio);
        kv.set("model.sam_ratio", self.sam_ratio);
        kv.set("model.num_classes", self.num_classes);
        kv.set("model.aux", self.aux_enabled);
        kv.set("model.strategy", self.strategy);
        kv.set("model.head_dropout", self.head_dropout);
        kv
    }

    /// Overrides the fields present in `kv`; other keys are ignored here.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_array("model.stage_channels", &mut self.backbone.stage_channels)?;
        kv.read_array("model.blocks_per_stage", &mut self.backbone.blocks_per_stage)?;
        kv.read_into("model.c_mid", &mut self.c_mid)?;
        kv.read_into("model.c_sam", &mut self.c_sam)?;
        kv.read_into("model.cam_ratio", &mut self.cam_ratio)?;
        kv.read_into("model.sam_ratio", &mut self.sam_ratio)?;
        kv.read_into("model.num_classes", &mut self.num_classes)?;
        kv.read_into("model.aux", &mut self.aux_enabled)?;
        kv.read_into("model.head_dropout", &mut self.head_dropout)?;
        if let Some(raw) = kv.get("model.strategy") {
            self.strategy = raw.parse()?;
        }
        Ok(())
    }

    /// Channel widths along the network, in data-flow order.
    pub fn channel_ledger(&self) -> Vec<(String, usize)> {
        let mut rows = Vec::new();
        for (i, &c) in self.backbone.stage_channels.iter().enumerate() {
            rows.push((format!("backbone F{}", i + 1), c));
        }
        let s = self.strategy;
        if s.has_fusion() {
            for i in 1..=3 {
                rows.push((format!("mid transform F{i}"), self.c_mid));
            }
        }
        if s == Strategy::FeatureFusion {
            rows.push(("F4 transform".to_string(), self.c_sam));
        } else {
            rows.push(("F4 projection".to_string(), self.c_sam));
        }
        if s.has_sam() {
            rows.push(("spatial attention".to_string(), self.c_sam));
            rows.push(("spatial attention keys".to_string(), self.sam_key_channels()));
        }
        if s.has_fusion() {
            rows.push(("fused map".to_string(), self.fused_channels()));
        }
        if s.has_cam() {
            let c = self.head_channels();
            rows.push(("channel attention".to_string(), c));
            rows.push(("channel attention bottleneck".to_string(), c / self.cam_ratio));
        }
        rows.push(("head hidden".to_string(), head_hidden(self.head_channels())));
        if self.aux_active() {
            rows.push(("aux head hidden".to_string(), head_hidden(self.c_sam)));
        }
        rows.push(("classes".to_string(), self.num_classes));
        rows
    }
}

fn head_hidden(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// Two 3×3 conv-norm-ReLU layers at a fixed output width.
#[derive(Clone, Debug, PartialEq)]
pub struct MidTransform {
    pub layers: [ConvBnRelu; 2],
}

impl MidTransform {
    pub fn new<T: Real>(b: &mut Builder<T>, cin: usize, cout: usize) -> Self {
        let same = Conv2dParams::same(3, 1);
        MidTransform {
            layers: [b.conv_bn_relu("0", cin, cout, 3, same), b.conv_bn_relu("1", cout, cout, 3, same)],
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.layers[0].forward(ctx, x)?;
        self.layers[1].forward(ctx, y)
    }
}

/// 3×3 conv-norm-ReLU to a quarter of the width, dropout, 1×1 conv to the
/// class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub block: ConvBnRelu,
    pub dropout: f64,
    pub classifier: Conv2d,
}

impl ClassifierHead {
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize, classes: usize, dropout: f64) -> Self {
        let hidden = head_hidden(channels);
        ClassifierHead {
            block: b.conv_bn_relu("block", channels, hidden, 3, Conv2dParams::same(3, 1)),
            dropout,
            classifier: b.scope("classifier", |b| b.conv(hidden, classes, 1, Conv2dParams::UNIT, true)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.block.forward(ctx, x)?;
        let y = nn::dropout(ctx, y, self.dropout)?;
        self.classifier.forward(ctx, y)
    }
}

/// Upsamples the three 1/8 maps by 2 and concatenates `[f1, f2, f3, f4]`
/// along channels.
pub fn fuse_features<T: Real>(tape: &Tape<T>, f1: Var, deeper: [Var; 3]) -> Result<Var> {
    let target = tape.shape(f1);
    let mut parts = vec![f1];
    for f in deeper {
        let up = tape.upsample_bilinear(f, 2)?;
        let shape = tape.shape(up);
        if shape.len() != 4 || target.len() != 4 || shape[0] != target[0] || shape[2..] != target[2..] {
            return Err(Error::shape("feature fusion", &target, &shape));
        }
        parts.push(up);
    }
    tape.concat(&parts, 1)
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// Logits on the 1/4 grid.
    pub main: Var,
    /// Logits on the 1/8 grid.
    pub aux: Option<Var>,
    /// Channel distribution `[B, C, h, w]` of channel attention.
    pub cam_attention: Option<Var>,
    /// Row-stochastic `[B, N, N]` matrix of spatial attention.
    pub sam_attention: Option<Var>,
    /// Concatenated map, for fusion strategies.
    pub fused: Option<Var>,
    /// Transformed shallow features, for fusion strategies.
    pub mid: Option<[Var; 3]>,
}

/// Layer descriptors of the network; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub mids: Option<[MidTransform; 3]>,
    pub f4_projection: Option<ConvBnRelu>,
    pub f4_transform: Option<MidTransform>,
    pub sam: Option<SamBlock>,
    pub cam: Option<CamBlock>,
    pub head: ClassifierHead,
    pub aux_head: Option<ClassifierHead>,
}

impl Network {
    pub fn new<T: Real>(b: &mut Builder<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let s = config.strategy;
        let widths = config.backbone.stage_channels;
        let backbone = b.scope("backbone", |b| Backbone::new(b, &config.backbone))?;
        let mids = s.has_fusion().then(|| {
            [0, 1, 2].map(|i| b.scope(&format!("mid{}", i + 1), |b| MidTransform::new(b, widths[i], config.c_mid)))
        });
        let (f4_projection, f4_transform) = if s == Strategy::FeatureFusion {
            let t = b.scope("f4_transform", |b| MidTransform::new(b, widths[3], config.c_sam));
            (None, Some(t))
        } else {
            let p = b.conv_bn_relu("f4_projection", widths[3], config.c_sam, 3, Conv2dParams::same(3, 1));
            (Some(p), None)
        };
        let sam = if s.has_sam() {
            Some(b.scope("sam", |b| SamBlock::new(b, config.c_sam, config.sam_key_channels(), true))?)
        } else {
            None
        };
        let cam = if s.has_cam() {
            Some(b.scope("cam", |b| CamBlock::new(b, config.head_channels(), config.cam_ratio))?)
        } else {
            None
        };
        let head = b.scope("head", |b| {
            ClassifierHead::new(b, config.head_channels(), config.num_classes, config.head_dropout)
        });
        let aux_head = config.aux_active().then(|| {
            b.scope("aux_head", |b| ClassifierHead::new(b, config.c_sam, config.num_classes, config.head_dropout))
        });
        Ok(Network {
            config: config.clone(),
            backbone,
            mids,
            f4_projection,
            f4_transform,
            sam,
            cam,
            head,
            aux_head,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, img: Var) -> Result<NetworkOutput> {
        let [f1, f2, f3, f4] = self.backbone.forward(ctx, img)?;
        let mut out = NetworkOutput {
            main: f1,
            aux: None,
            cam_attention: None,
            sam_attention: None,
            fused: None,
            mid: None,
        };
        let deep = match (&self.f4_projection, &self.f4_transform) {
            (Some(p), _) => p.forward(ctx, f4)?,
            (None, Some(t)) => t.forward(ctx, f4)?,
            (None, None) => unreachable!("network without an F4 branch"),
        };
        let sam = |ctx: &mut Ctx<T>, out: &mut NetworkOutput, x: Var| -> Result<Var> {
            let block = self.sam.as_ref().expect("strategy has spatial attention");
            let (y, attention) = block.forward_with_attention(ctx, x)?;
            out.sam_attention = Some(attention);
            if let Some(aux) = &self.aux_head {
                out.aux = Some(aux.forward(ctx, y)?);
            }
            Ok(y)
        };
        let cam = |ctx: &mut Ctx<T>, out: &mut NetworkOutput, x: Var| -> Result<Var> {
            let block = self.cam.as_ref().expect("strategy has channel attention");
            let (y, attention) = block.forward_with_attention(ctx, x)?;
            out.cam_attention = Some(attention);
            Ok(y)
        };
        let coarse = match self.config.strategy {
            Strategy::Sam => Some(sam(ctx, &mut out, deep)?),
            Strategy::Cam => Some(cam(ctx, &mut out, deep)?),
            Strategy::Series => {
                let c = cam(ctx, &mut out, deep)?;
                Some(sam(ctx, &mut out, c)?)
            }
            Strategy::Parallel => {
                let c = cam(ctx, &mut out, deep)?;
                let s = sam(ctx, &mut out, deep)?;
                Some(ctx.tape.add(c, s)?)
            }
            Strategy::FeatureFusion | Strategy::Full => None,
        };
        out.main = match coarse {
            Some(x) => {
                let logits = self.head.forward(ctx, x)?;
                ctx.tape.upsample_bilinear(logits, 2)?
            }
            None => {
                let deep = if self.config.strategy == Strategy::Full {
                    sam(ctx, &mut out, deep)?
                } else {
                    deep
                };
                let mids = self.mids.as_ref().expect("fusion strategy has mid transforms");
                let m1 = mids[0].forward(ctx, f1)?;
                let m2 = mids[1].forward(ctx, f2)?;
                let m3 = mids[2].forward(ctx, f3)?;
                out.mid = Some([m1, m2, m3]);
                let fused = fuse_features(ctx.tape, m1, [m2, m3, deep])?;
                out.fused = Some(fused);
                let x = if self.cam.is_some() { cam(ctx, &mut out, fused)? } else { fused };
                self.head.forward(ctx, x)?
            }
        };
        Ok(out)
    }
}

/// Trainable scalars per top-level module, in construction order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_parameters<T: Real>(params: &ParamStore<T>) -> ParameterCount {
    let mut modules: Vec<(String, usize)> = Vec::new();
    for p in params.iter() {
        let module = p.name.split('.').next().unwrap_or("").to_string();
        match modules.iter_mut().find(|(m, _)| *m == module) {
            Some((_, n)) => *n += p.value.len(),
            None => modules.push((module, p.value.len())),
        }
    }
    ParameterCount {
        total: modules.iter().map(|(_, n)| n).sum(),
        modules,
    }
}

/// Eval-mode outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub main: Tensor<T>,
    pub aux: Option<Tensor<T>>,
    pub cam_attention: Option<Tensor<T>>,
    pub sam_attention: Option<Tensor<T>>,
}

/// A network together with its parameter values and normalisation buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub network: Network,
    pub params: ParamStore<T>,
    pub buffers: BnBuffers<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut buffers = BnBuffers::new();
        let network = Network::new(&mut Builder::new(&mut params, &mut buffers, seed), config)?;
        Ok(Model {
            network,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn parameter_count(&self) -> ParameterCount {
        count_parameters(&self.params)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, img: Var) -> Result<NetworkOutput> {
        self.network.forward(ctx, img)
    }

    /// Deterministic evaluation-mode forward pass on `[B, 3, H, W]` images.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Inference<T>> {
        if images.rank() != 4 || images.shape()[1] != INPUT_CHANNELS {
            return Err(Error::shape("image batch", images.shape(), &[0, INPUT_CHANNELS, 0, 0]));
        }
        let tape = Tape::inference();
        let mut ctx = Ctx::eval(&tape, self.params.attach(&tape), &self.buffers);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        let result = Inference {
            main: tape.value(out.main).clone(),
            aux: get(out.aux),
            cam_attention: get(out.cam_attention),
            sam_attention: get(out.sam_attention),
        };
        Ok(result)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            network: self.network.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}
