//! Small residual feature extractor with four output stages.
//!
//! The stem halves the resolution twice, so stage 1 runs at 1/4 of the
//! input. Stage 2 halves once more and stages 3 and 4 keep 1/8 while dilating
//! their 3×3 kernels by 2 and 4. Dilated convolutions pad by their dilation,
//! so extents are preserved.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Conv2d, ConvBnRelu, Ctx, ParamGroup};
use crate::tensor::{Conv2dParams, Real, Var};

pub const STEM_STRIDE: usize = 4;
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 1, 1];
pub const STAGE_DILATIONS: [usize; 4] = [1, 1, 2, 4];
/// Input extents must be multiples of this.
pub const INPUT_MULTIPLE: usize = 8;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    /// Widths for documenting full-scale channel arithmetic.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [3, 4, 6, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::config("backbone stage widths must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("every backbone stage needs at least one block"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvBnRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    /// 1×1 projection when the block changes width or stride.
    pub projection: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, cin: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        let first = Conv2dParams {
            stride,
            dilation,
            padding: dilation,
        };
        let conv1 = b.conv_bn_relu("conv1", cin, cout, 3, first);
        let conv2 = b.scope("conv2", |b| b.conv(cout, cout, 3, Conv2dParams::same(3, dilation), true));
        let bn2 = b.scope("bn2", |b| b.batch_norm(cout));
        let projection = (cin != cout || stride != 1).then(|| {
            b.scope("proj", |b| {
                let geometry = Conv2dParams {
                    stride,
                    dilation: 1,
                    padding: 0,
                };
                (b.scope("conv", |b| b.conv(cin, cout, 1, geometry, true)), b.scope("bn", |b| b.batch_norm(cout)))
            })
        });
        ResidualBlock {
            conv1,
            conv2,
            bn2,
            projection,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        ctx.tape.relu(sum)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: [ConvBnRelu; 2],
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new<T: Real>(b: &mut Builder<T>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c0 = config.stage_channels[0];
        b.with_group(ParamGroup::Backbone, |b| {
            let down = Conv2dParams {
                stride: 2,
                dilation: 1,
                padding: 1,
            };
            let stem = b.scope("stem", |b| {
                [b.conv_bn_relu("0", INPUT_CHANNELS, c0, 3, down), b.conv_bn_relu("1", c0, c0, 3, down)]
            });
            let mut cin = c0;
            let mut stages = Vec::with_capacity(4);
            for s in 0..4 {
                let cout = config.stage_channels[s];
                let blocks = b.scope(&format!("stage{}", s + 1), |b| {
                    (0..config.blocks_per_stage[s])
                        .map(|i| {
                            let stride = if i == 0 { STAGE_STRIDES[s] } else { 1 };
                            let block_in = if i == 0 { cin } else { cout };
                            b.scope(&format!("block{i}"), |b| {
                                ResidualBlock::new(b, block_in, cout, stride, STAGE_DILATIONS[s])
                            })
                        })
                        .collect::<Vec<_>>()
                });
                stages.push(blocks);
                cin = cout;
            }
            Ok(Backbone {
                config: config.clone(),
                stem,
                stages,
            })
        })
    }

    /// Returns the four stage outputs, shallowest first.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, img: Var) -> Result<[Var; 4]> {
        check_input(&ctx.tape.shape(img))?;
        let mut x = self.stem[0].forward(ctx, img)?;
        x = self.stem[1].forward(ctx, x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, x)?;
            }
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}

/// Checks an image batch shape `[B, 3, H, W]` with `H`, `W` multiples of 8.
pub fn check_input(shape: &[usize]) -> Result<()> {
    let [_, c, h, w] = shape[..] else {
        return Err(Error::shape("image batch", shape, &[0, INPUT_CHANNELS, 0, 0]));
    };
    if c != INPUT_CHANNELS {
        return Err(Error::shape("image batch channels", shape, &[0, INPUT_CHANNELS, 0, 0]));
    }
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::config(format!(
            "input extent {h}x{w} must be divisible by {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}
