//! Parameters, normalisation buffers and the small set of layers the
//! network is assembled from.
//!
//! Layers are plain descriptors holding [`ParamId`]s. Their values live in a
//! [`ParamStore`], and a forward pass reads them through a [`Ctx`], which maps
//! every parameter to a [`Var`] on the current tape. Keeping values out of the
//! layers lets the same network run on `f32` for training and on `f64` for
//! gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dParams, Real, Tape, Tensor, Var};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Feature extractor; trained with a reduced learning rate.
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, which is also the position in [`ParamStore::attach`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<T>, group: ParamGroup) -> ParamId {
        self.params.push(Parameter { name, value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf, in id order.
    pub fn attach(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                })
                .collect(),
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnBuffers<T> {
    stats: Vec<RunningStats<T>>,
}

impl<T: Real> BnBuffers<T> {
    pub fn new() -> Self {
        BnBuffers { stats: Vec::new() }
    }

    fn push(&mut self, name: String, channels: usize) -> BnId {
        self.stats.push(RunningStats {
            name,
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BnId(self.stats.len() - 1)
    }

    pub fn get(&self, id: BnId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningStats<T>> {
        self.stats.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut RunningStats<T>> {
        self.stats.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn cast<U: Real>(&self) -> BnBuffers<U> {
        BnBuffers {
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: s.mean.iter().map(|&v| U::lit(v.as_f64())).collect(),
                    var: s.var.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

enum Mode<'a, T> {
    Train {
        stats: &'a mut BnBuffers<T>,
        rng: ChaCha8Rng,
    },
    Eval {
        stats: &'a BnBuffers<T>,
    },
}

/// Forward-pass context: the tape, one [`Var`] per parameter and the
/// train/eval mode.
///
/// Training mode normalises with batch statistics, updates the running
/// statistics and applies dropout. Evaluation mode reads the running
/// statistics and is deterministic. Evaluation contexts only borrow their
/// buffers immutably, so any number of them may run concurrently over a
/// shared model.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a Tape<T>,
    params: Vec<Var>,
    mode: Mode<'a, T>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn train(tape: &'a Tape<T>, params: Vec<Var>, stats: &'a mut BnBuffers<T>, seed: u64) -> Self {
        Ctx {
            tape,
            params,
            mode: Mode::Train {
                stats,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        }
    }

    pub fn eval(tape: &'a Tape<T>, params: Vec<Var>, stats: &'a BnBuffers<T>) -> Self {
        Ctx {
            tape,
            params,
            mode: Mode::Eval { stats },
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Allocates named, initialised parameters for layer constructors.
pub struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    buffers: &'a mut BnBuffers<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    group: ParamGroup,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, buffers: &'a mut BnBuffers<T>, seed: u64) -> Self {
        Builder {
            params,
            buffers,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            group: ParamGroup::Head,
        }
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn with_group<R>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Self) -> R) -> R {
        let previous = std::mem::replace(&mut self.group, group);
        let out = f(self);
        self.group = previous;
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn tensor(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.params.push(name, value, self.group)
    }

    /// Kaiming-normal weights (fan-out, ReLU gain) and zero bias.
    pub fn conv(&mut self, cin: usize, cout: usize, k: usize, geometry: Conv2dParams, bias: bool) -> Conv2d {
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let weight = Tensor::from_fn(vec![cout, cin, k, k], |_| T::lit(normal.sample(rng)));
        let weight = self.tensor("weight", weight);
        let bias = bias.then(|| self.tensor("bias", Tensor::zeros(vec![cout])));
        Conv2d {
            weight,
            bias,
            geometry,
        }
    }

    /// Small-uniform initialisation for layers whose output feeds a softmax.
    pub fn conv_small(&mut self, cin: usize, cout: usize, scale: f64) -> Conv2d {
        let rng = &mut self.rng;
        let weight = Tensor::from_fn(vec![cout, cin, 1, 1], |_| T::lit(rng.random_range(-scale..scale)));
        let weight = self.tensor("weight", weight);
        let bias = Some(self.tensor("bias", Tensor::zeros(vec![cout])));
        Conv2d {
            weight,
            bias,
            geometry: Conv2dParams::UNIT,
        }
    }

    pub fn batch_norm(&mut self, channels: usize) -> BatchNorm {
        let gamma = self.tensor("gamma", Tensor::full(vec![channels], T::one()));
        let beta = self.tensor("beta", Tensor::zeros(vec![channels]));
        let stats = self.buffers.push(self.full_name("running"), channels);
        BatchNorm { gamma, beta, stats }
    }

    pub fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, k: usize, geometry: Conv2dParams) -> ConvBnRelu {
        self.scope(name, |b| ConvBnRelu {
            conv: b.scope("conv", |b| b.conv(cin, cout, k, geometry, true)),
            bn: b.scope("bn", |b| b.batch_norm(cout)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: Conv2dParams,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        ctx.tape
            .conv2d(x, ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.geometry)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
}

impl BatchNorm {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = T::lit(BN_EPS);
        match &mut ctx.mode {
            Mode::Train { stats, .. } => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = T::lit(BN_MOMENTUM);
                let running = &mut stats.stats[self.stats.0];
                for (r, b) in running.mean.iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * *b;
                }
                for (r, b) in running.var.iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * *b;
                }
                Ok(y)
            }
            Mode::Eval { stats } => {
                let running = &stats.stats[self.stats.0];
                ctx.tape.batch_norm_eval(x, gamma, beta, &running.mean, &running.var, eps)
            }
        }
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}

/// Dropout that is only active in training mode.
pub fn dropout<T: Real>(ctx: &mut Ctx<T>, x: Var, p: f64) -> Result<Var> {
    match &mut ctx.mode {
        Mode::Train { rng, .. } => ctx.tape.dropout(x, p, rng),
        Mode::Eval { .. } => Ok(x),
    }
}

/// Channel count of a 4-d value on the tape.
pub(crate) fn channels<T: Real>(ctx: &Ctx<T>, x: Var) -> Result<usize> {
    match ctx.tape.shape(x)[..] {
        [_, c, _, _] => Ok(c),
        ref other => Err(Error::shape("expected a 4-d feature map", other, &[0, 0, 0, 0])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_groups() {
        let mut params = ParamStore::<f32>::new();
        let mut buffers = BnBuffers::new();
        let mut b = Builder::new(&mut params, &mut buffers, 0);
        let layer = b.with_group(ParamGroup::Backbone, |b| {
            b.scope("stem", |b| b.conv_bn_relu("c1", 3, 4, 3, Conv2dParams::same(3, 1)))
        });
        let head = b.scope("head", |b| b.conv(4, 2, 1, Conv2dParams::UNIT, true));
        assert_eq!(params.get(layer.conv.weight).name, "stem.c1.conv.weight");
        assert_eq!(params.get(layer.bn.gamma).name, "stem.c1.bn.gamma");
        assert_eq!(params.get(layer.conv.weight).group, ParamGroup::Backbone);
        assert_eq!(params.get(head.weight).group, ParamGroup::Head);
        assert_eq!(buffers.get(layer.bn.stats).name, "stem.c1.bn.running");
    }

    #[test]
    fn single_pointwise_conv_has_nine_scalars() {
        let mut params = ParamStore::<f64>::new();
        let mut buffers = BnBuffers::new();
        Builder::new(&mut params, &mut buffers, 0).conv(2, 3, 1, Conv2dParams::UNIT, true);
        assert_eq!(params.scalar_count(), 9);
    }

    #[test]
    fn training_mode_updates_running_statistics() {
        let mut params = ParamStore::<f64>::new();
        let mut buffers = BnBuffers::new();
        let bn = Builder::new(&mut params, &mut buffers, 0).batch_norm(1);
        let tape = Tape::new();
        let vars = params.attach(&tape);
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        {
            let mut ctx = Ctx::train(&tape, vars, &mut buffers, 0);
            bn.forward(&mut ctx, x).unwrap();
        }
        let s = buffers.get(bn.stats);
        assert!((s.mean[0] - 0.4).abs() < 1e-12);
        // unbiased variance 20/3 blended with the initial 1
        assert!((s.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}
