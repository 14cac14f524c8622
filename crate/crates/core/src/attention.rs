//! Channel and spatial attention blocks.
//!
//! * [`CamBlock`]: at every location the `C`-vector of features is squeezed
//!   to `C/r`, passed through a ReLU, expanded back to `C`, turned into a
//!   distribution over channels by a softmax and added to the input. The two
//!   dense layers are 1×1 convolutions, so the weights are shared by all
//!   locations and no location sees its neighbours.
//! * [`SamBlock`]: 1×1 key, query and value projections; the `N×N` attention
//!   matrix is the row-wise softmax of query·key over the `N = H·W`
//!   locations, each output location aggregates the values with its row of
//!   weights, and the result is added to the input.

use crate::error::{Error, Result};
use crate::nn::{self, Builder, Conv2d, Ctx};
use crate::tensor::{Conv2dParams, Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CamBlock {
    pub channels: usize,
    pub ratio: usize,
    pub squeeze: Conv2d,
    pub expand: Conv2d,
}

impl CamBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::config(format!(
                "channel attention ratio {ratio} must be a positive divisor of {channels}"
            )));
        }
        let hidden = channels / ratio;
        Ok(CamBlock {
            channels,
            ratio,
            squeeze: b.scope("squeeze", |b| b.conv(channels, hidden, 1, Conv2dParams::UNIT, true)),
            expand: b.scope("expand", |b| b.conv(hidden, channels, 1, Conv2dParams::UNIT, true)),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.ratio
    }

    /// Per-location channel distribution `softmax_k(f_c(y))`, same shape as `y`.
    pub fn attention<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
        let c = nn::channels(ctx, y)?;
        if c != self.channels {
            return Err(Error::config(format!(
                "channel attention built for {} channels received {c}",
                self.channels
            )));
        }
        let h = self.squeeze.forward(ctx, y)?;
        let h = ctx.tape.relu(h)?;
        let logits = self.expand.forward(ctx, h)?;
        ctx.tape.softmax(logits, 1)
    }

    /// Returns `(attention + y, attention)`.
    pub fn forward_with_attention<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<(Var, Var)> {
        let attention = self.attention(ctx, y)?;
        Ok((ctx.tape.add(attention, y)?, attention))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, y: Var) -> Result<Var> {
        self.forward_with_attention(ctx, y).map(|(out, _)| out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamBlock {
    pub channels: usize,
    pub key_channels: usize,
    pub key: Conv2d,
    pub query: Conv2d,
    pub value: Conv2d,
}

impl SamBlock {
    /// `key_channels` is the projected width of keys and queries; it must be
    /// at least 1. `key_bias` toggles biases on the key/query projections.
    pub fn new<T: Real>(b: &mut Builder<T>, channels: usize, key_channels: usize, key_bias: bool) -> Result<Self> {
        if key_channels == 0 || channels == 0 {
            return Err(Error::config("spatial attention widths must be positive"));
        }
        let unit = Conv2dParams::UNIT;
        Ok(SamBlock {
            channels,
            key_channels,
            key: b.scope("key", |b| b.conv(channels, key_channels, 1, unit, key_bias)),
            query: b.scope("query", |b| b.conv(channels, key_channels, 1, unit, key_bias)),
            value: b.scope("value", |b| b.conv(channels, channels, 1, unit, true)),
        })
    }

    fn flat_dims<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Result<[usize; 4]> {
        let shape = ctx.tape.shape(x);
        let [b, c, h, w] = shape[..] else {
            return Err(Error::shape("spatial attention input", &shape, &[0, 0, 0, 0]));
        };
        if c != self.channels {
            return Err(Error::config(format!(
                "spatial attention built for {} channels received {c}",
                self.channels
            )));
        }
        Ok([b, c, h, w])
    }

    /// Row-stochastic attention `[B, N, N]`: row `n` holds the weights location
    /// `n` assigns to every location `m`.
    pub fn attention_matrix<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [b, _, h, w] = self.flat_dims(ctx, x)?;
        let n = h * w;
        let keys = self.key.forward(ctx, x)?;
        let keys = ctx.tape.reshape(keys, &[b, self.key_channels, n])?;
        let queries = self.query.forward(ctx, x)?;
        let queries = ctx.tape.reshape(queries, &[b, self.key_channels, n])?;
        // logits[n][m] = Σ_c q[c][n] · k[c][m]
        let logits = ctx.tape.batched_matmul(queries, keys, true, false)?;
        ctx.tape.softmax(logits, 2)
    }

    /// Returns `(output, attention matrix)`.
    pub fn forward_with_attention<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let [b, c, h, w] = self.flat_dims(ctx, x)?;
        let attention = self.attention_matrix(ctx, x)?;
        let values = self.value.forward(ctx, x)?;
        let values = ctx.tape.reshape(values, &[b, c, h * w])?;
        // out[c][n] = Σ_m v[c][m] · S[n][m]
        let mixed = ctx.tape.batched_matmul(values, attention, false, true)?;
        let mixed = ctx.tape.reshape(mixed, &[b, c, h, w])?;
        Ok((ctx.tape.add(mixed, x)?, attention))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.forward_with_attention(ctx, x).map(|(out, _)| out)
    }
}
