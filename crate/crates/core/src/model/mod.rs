//! The CUTIE-B network.
//!
//! ```text
//! ids [N,H,W]
//!  └ embedding (V x E) ─ dropout
//!     └ conv block: 4 x [3x5 conv ─ instance norm ─ ReLU]         E→C, C→C ...
//!        └ atrous block: 4 x [3x5 conv rate 2 ─ norm ─ ReLU]       C→C
//!           ├ ASPP: 3 x [3x5 conv rate 4/8/16 ─ norm ─ ReLU]        C→C each
//!           ├ ASPP: global pool ─ 1x1 conv ─ ReLU ─ broadcast        C→C
//!           └ concat (4C) ─ 1x1 conv ─ norm ─ ReLU                   4C→C
//!              └ concat with conv block output #1 (2C)
//!                 └ 1x1 conv ─ norm ─ ReLU                          2C→S
//!                    └ 1x1 conv                                     S→K logits
//! ```
//!
//! `C` is the trunk width (256), `S` the shortcut width (64) and `K` the
//! class count. Every convolution has stride 1 and SAME zero padding, so the
//! logits have the spatial extent of the input grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    broadcast_up, broadcast_up_backward, concat_channels, dropout, dropout_backward, embedding,
    embedding_backward, global_avg_pool, global_avg_pool_backward, relu_backward_in_place,
    relu_in_place, split_channels, IdGrid,
};
use crate::nn::norm::{instance_norm, instance_norm_backward, NormCache, DEFAULT_EPS};
use crate::nn::{conv2d, conv2d_backward, Param, Scalar, Tensor};

pub mod checkpoint;
pub mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Kernel extent of every non-pointwise convolution (rows x cols).
pub const KERNEL: (usize, usize) = (3, 5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutieConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub trunk_channels: usize,
    pub shortcut_channels: usize,
    pub num_classes: usize,
    pub atrous_rate: usize,
    pub aspp_rates: Vec<usize>,
    pub keep_prob: f64,
}

impl Default for CutieConfig {
    fn default() -> Self {
        CutieConfig {
            vocab_size: 20_000,
            embedding_dim: 128,
            trunk_channels: 256,
            shortcut_channels: 64,
            num_classes: 9,
            atrous_rate: 2,
            aspp_rates: vec![4, 8, 16],
            keep_prob: 0.9,
        }
    }
}

impl CutieConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("trunk_channels", self.trunk_channels),
            ("shortcut_channels", self.shortcut_channels),
            ("num_classes", self.num_classes),
            ("atrous_rate", self.atrous_rate),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::InvalidArgument("ASPP rates must be non-empty and positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep probability {} outside (0, 1]",
                self.keep_prob
            )));
        }
        Ok(())
    }

    /// Horizontal receptive field of the trunk up to the ASPP output, in cells,
    /// ignoring the global-pooling branch (whose field is the whole grid).
    pub fn receptive_field_cols(&self) -> usize {
        let reach = KERNEL.1 / 2;
        let conv = 4 * reach;
        let atrous = 4 * reach * self.atrous_rate;
        let aspp = reach * self.aspp_rates.iter().copied().max().unwrap_or(0);
        1 + 2 * (conv + atrous + aspp)
    }

    /// Same as [`receptive_field_cols`](Self::receptive_field_cols), vertically.
    pub fn receptive_field_rows(&self) -> usize {
        let reach = KERNEL.0 / 2;
        let conv = 4 * reach;
        let atrous = 4 * reach * self.atrous_rate;
        let aspp = reach * self.aspp_rates.iter().copied().max().unwrap_or(0);
        1 + 2 * (conv + atrous + aspp)
    }
}

/// Convolution with its bias and atrous rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub rate: usize,
}

impl<T: Scalar> Conv<T> {
    fn init(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, kernel: (usize, usize), rate: usize) -> Self {
        // He-style uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
        let fan_in = (in_ch * kernel.0 * kernel.1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_ch * in_ch * kernel.0 * kernel.1;
        let w = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Conv {
            weight: Param::new(Tensor::from_vec(&[out_ch, in_ch, kernel.0, kernel.1], w).unwrap()),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            rate,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight.value, &self.bias.value, self.rate)
    }

    fn backward(&mut self, x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_backward(
            x,
            &self.weight.value,
            self.rate,
            grad,
            &mut self.weight.grad,
            &mut self.bias.grad,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> Norm<T> {
    fn init(channels: usize) -> Self {
        Norm {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
        }
    }
}

/// Convolution, instance normalization and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
}

struct UnitCache<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    output: Tensor<T>,
}

impl<T: Scalar> ConvUnit<T> {
    fn init(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, kernel: (usize, usize), rate: usize) -> Self {
        ConvUnit {
            conv: Conv::init(rng, out_ch, in_ch, kernel, rate),
            norm: Norm::init(out_ch),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.conv.forward(x)?;
        let (mut y, _) = instance_norm(&z, &self.norm.gamma.value, &self.norm.beta.value, DEFAULT_EPS)?;
        relu_in_place(&mut y);
        Ok(y)
    }

    fn forward_cached(&self, x: Tensor<T>) -> Result<(Tensor<T>, UnitCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (mut y, norm) = instance_norm(&z, &self.norm.gamma.value, &self.norm.beta.value, DEFAULT_EPS)?;
        relu_in_place(&mut y);
        Ok((
            y.clone(),
            UnitCache {
                input: x,
                norm,
                output: y,
            },
        ))
    }

    fn backward(&mut self, cache: &UnitCache<T>, mut grad: Tensor<T>) -> Result<Tensor<T>> {
        relu_backward_in_place(&cache.output, &mut grad);
        let gz = instance_norm_backward(
            &cache.norm,
            &self.norm.gamma.value,
            &grad,
            &mut self.norm.gamma.grad,
            &mut self.norm.beta.grad,
        )?;
        self.conv.backward(&cache.input, &gz)
    }

    fn params(&self) -> [(&'static str, &Param<T>); 4] {
        [
            ("weight", &self.conv.weight),
            ("bias", &self.conv.bias),
            ("gamma", &self.norm.gamma),
            ("beta", &self.norm.beta),
        ]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutieModel<T> {
    pub config: CutieConfig,
    pub embedding: Param<T>,
    pub conv_block: Vec<ConvUnit<T>>,
    pub atrous_block: Vec<ConvUnit<T>>,
    pub aspp_branches: Vec<ConvUnit<T>>,
    pub aspp_pool: Conv<T>,
    pub aspp_fuse: ConvUnit<T>,
    pub shortcut: ConvUnit<T>,
    pub classifier: Conv<T>,
}

/// Intermediate values of a forward pass, consumed by [`CutieModel::backward`].
pub struct ForwardTrace<T> {
    ids: IdGrid,
    dropout_mask: Option<Vec<T>>,
    conv_block: Vec<UnitCache<T>>,
    atrous_block: Vec<UnitCache<T>>,
    aspp_input: Tensor<T>,
    aspp_branches: Vec<UnitCache<T>>,
    pooled: Tensor<T>,
    pool_out: Tensor<T>,
    aspp_fuse: UnitCache<T>,
    shortcut: UnitCache<T>,
    shortcut_out: Tensor<T>,
}

impl<T: Scalar> CutieModel<T> {
    /// Builds the network with deterministic initialization from `seed`.
    pub fn build(config: CutieConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, c, s, k) = (
            config.embedding_dim,
            config.trunk_channels,
            config.shortcut_channels,
            config.num_classes,
        );
        let normal = Normal::new(0.0, 1.0 / (e as f64).sqrt()).expect("positive std");
        let table = (0..config.vocab_size * e)
            .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
            .collect();
        let embedding = Param::new(Tensor::from_vec(&[config.vocab_size, e], table)?);
        let conv_block = (0..4)
            .map(|i| ConvUnit::init(&mut rng, c, if i == 0 { e } else { c }, KERNEL, 1))
            .collect();
        let atrous_block = (0..4)
            .map(|_| ConvUnit::init(&mut rng, c, c, KERNEL, config.atrous_rate))
            .collect();
        let aspp_branches = config
            .aspp_rates
            .iter()
            .map(|&r| ConvUnit::init(&mut rng, c, c, KERNEL, r))
            .collect();
        let aspp_pool = Conv::init(&mut rng, c, c, (1, 1), 1);
        let branches = config.aspp_rates.len() + 1;
        let aspp_fuse = ConvUnit::init(&mut rng, c, branches * c, (1, 1), 1);
        let shortcut = ConvUnit::init(&mut rng, s, 2 * c, (1, 1), 1);
        let classifier = Conv::init(&mut rng, k, s, (1, 1), 1);
        Ok(CutieModel {
            config,
            embedding,
            conv_block,
            atrous_block,
            aspp_branches,
            aspp_pool,
            aspp_fuse,
            shortcut,
            classifier,
        })
    }

    /// Every parameter with a unique dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        fn unit<'a, T: Scalar>(out: &mut Vec<(String, &'a Param<T>)>, prefix: &str, u: &'a ConvUnit<T>) {
            for (name, p) in u.params() {
                out.push((format!("{prefix}.{name}"), p));
            }
        }
        let mut out = vec![("embedding.table".to_string(), &self.embedding)];
        for (i, u) in self.conv_block.iter().enumerate() {
            unit(&mut out, &format!("conv_block.{i}"), u);
        }
        for (i, u) in self.atrous_block.iter().enumerate() {
            unit(&mut out, &format!("atrous_block.{i}"), u);
        }
        for (i, u) in self.aspp_branches.iter().enumerate() {
            unit(&mut out, &format!("aspp.branch.{i}"), u);
        }
        out.push(("aspp.pool.weight".into(), &self.aspp_pool.weight));
        out.push(("aspp.pool.bias".into(), &self.aspp_pool.bias));
        unit(&mut out, "aspp.fuse", &self.aspp_fuse);
        unit(&mut out, "shortcut", &self.shortcut);
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Mutable parameters in [`named_params`](Self::named_params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.embedding];
        for u in self
            .conv_block
            .iter_mut()
            .chain(self.atrous_block.iter_mut())
            .chain(self.aspp_branches.iter_mut())
        {
            out.extend(u.params_mut());
        }
        out.push(&mut self.aspp_pool.weight);
        out.push(&mut self.aspp_pool.bias);
        out.extend(self.aspp_fuse.params_mut());
        out.extend(self.shortcut.params_mut());
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Exact number of scalar parameters, including biases and norm affines.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> CutieModel<U> {
        let unit = |u: &ConvUnit<T>| ConvUnit {
            conv: conv_cast(&u.conv),
            norm: Norm {
                gamma: u.norm.gamma.cast(),
                beta: u.norm.beta.cast(),
            },
        };
        fn conv_cast<T: Scalar, U: Scalar>(c: &Conv<T>) -> Conv<U> {
            Conv {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                rate: c.rate,
            }
        }
        CutieModel {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            conv_block: self.conv_block.iter().map(unit).collect(),
            atrous_block: self.atrous_block.iter().map(unit).collect(),
            aspp_branches: self.aspp_branches.iter().map(unit).collect(),
            aspp_pool: conv_cast(&self.aspp_pool),
            aspp_fuse: unit(&self.aspp_fuse),
            shortcut: unit(&self.shortcut),
            classifier: conv_cast(&self.classifier),
        }
    }

    fn check_ids(&self, ids: &IdGrid) -> Result<()> {
        if let Some(&id) = ids.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if ids.h == 0 || ids.w == 0 {
            return Err(Error::Shape("empty grid".into()));
        }
        Ok(())
    }

    /// Inference forward pass (dropout disabled), without keeping a trace.
    pub fn infer(&self, ids: &IdGrid) -> Result<Tensor<T>> {
        self.check_ids(ids)?;
        let x = embedding(ids, &self.embedding.value)?;
        let mut shallow = None;
        let mut x = x;
        for (i, u) in self.conv_block.iter().enumerate() {
            x = u.forward(&x)?;
            if i == 0 {
                shallow = Some(x.clone());
            }
        }
        for u in &self.atrous_block {
            x = u.forward(&x)?;
        }
        let fused = self.aspp_forward(&x)?;
        let cat = concat_channels(&[shallow.as_ref().expect("conv block is non-empty"), &fused])?;
        let s = self.shortcut.forward(&cat)?;
        self.classifier.forward(&s)
    }

    fn aspp_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        let mut parts = Vec::with_capacity(self.aspp_branches.len() + 1);
        for u in &self.aspp_branches {
            parts.push(u.forward(x)?);
        }
        let mut p = self.aspp_pool.forward(&global_avg_pool(x)?)?;
        relu_in_place(&mut p);
        parts.push(broadcast_up(&p, h, w)?);
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        self.aspp_fuse.forward(&concat_channels(&refs)?)
    }

    /// Forward pass that records everything [`backward`](Self::backward)
    /// needs. Dropout on the embedding is applied when `training` is set.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        ids: &IdGrid,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.check_ids(ids)?;
        let emb = embedding(ids, &self.embedding.value)?;
        let (x0, dropout_mask) = dropout(&emb, self.config.keep_prob, rng, training)?;
        drop(emb);

        let mut x = x0;
        let mut conv_caches = Vec::with_capacity(self.conv_block.len());
        for u in &self.conv_block {
            let (y, cache) = u.forward_cached(x)?;
            conv_caches.push(cache);
            x = y;
        }
        let mut atrous_caches = Vec::with_capacity(self.atrous_block.len());
        for u in &self.atrous_block {
            let (y, cache) = u.forward_cached(x)?;
            atrous_caches.push(cache);
            x = y;
        }
        let aspp_input = x;
        let (_, _, h, w) = aspp_input.dims4()?;
        let mut branch_caches = Vec::with_capacity(self.aspp_branches.len());
        let mut parts = Vec::with_capacity(self.aspp_branches.len() + 1);
        for u in &self.aspp_branches {
            // The cache would duplicate `aspp_input`; keep an empty input instead.
            let (y, mut cache) = u.forward_cached(aspp_input.clone())?;
            cache.input = Tensor::zeros(&[0]);
            branch_caches.push(cache);
            parts.push(y);
        }
        let pooled = global_avg_pool(&aspp_input)?;
        let mut pool_out = self.aspp_pool.forward(&pooled)?;
        relu_in_place(&mut pool_out);
        parts.push(broadcast_up(&pool_out, h, w)?);
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let cat = concat_channels(&refs)?;
        drop(parts);
        let (fused, fuse_cache) = self.aspp_fuse.forward_cached(cat)?;

        let shallow = conv_caches[0].output.clone();
        let cat = concat_channels(&[&shallow, &fused])?;
        let (s, shortcut_cache) = self.shortcut.forward_cached(cat)?;
        let logits = self.classifier.forward(&s)?;
        Ok((
            logits,
            ForwardTrace {
                ids: ids.clone(),
                dropout_mask,
                conv_block: conv_caches,
                atrous_block: atrous_caches,
                aspp_input,
                aspp_branches: branch_caches,
                pooled,
                pool_out,
                aspp_fuse: fuse_cache,
                shortcut: shortcut_cache,
                shortcut_out: s,
            },
        ))
    }

    /// Accumulates parameter gradients for the loss whose gradient with
    /// respect to the logits is `grad_logits`.
    pub fn backward(&mut self, trace: ForwardTrace<T>, grad_logits: &Tensor<T>) -> Result<()> {
        let c = self.config.trunk_channels;
        let gs = self.classifier.backward(&trace.shortcut_out, grad_logits)?;
        let gcat = self.shortcut.backward(&trace.shortcut, gs)?;
        let mut halves = split_channels(&gcat, &[c, c])?.into_iter();
        let g_shallow = halves.next().unwrap();
        let g_fused = halves.next().unwrap();

        let gcat = self.aspp_fuse.backward(&trace.aspp_fuse, g_fused)?;
        let widths = vec![c; self.aspp_branches.len() + 1];
        let parts = split_channels(&gcat, &widths)?;
        let (_, _, h, w) = trace.aspp_input.dims4()?;
        let mut g_trunk = Tensor::zeros(trace.aspp_input.shape());

        let g_pool_map = &parts[self.aspp_branches.len()];
        let mut g_pool_out = broadcast_up_backward(g_pool_map)?;
        relu_backward_in_place(&trace.pool_out, &mut g_pool_out);
        let g_pooled = self.aspp_pool.backward(&trace.pooled, &g_pool_out)?;
        add_into(&mut g_trunk, &global_avg_pool_backward(&g_pooled, h, w)?);

        for ((u, mut cache), g) in self
            .aspp_branches
            .iter_mut()
            .zip(trace.aspp_branches)
            .zip(parts)
        {
            cache.input = trace.aspp_input.clone();
            let gx = u.backward(&cache, g)?;
            add_into(&mut g_trunk, &gx);
        }

        let mut g = g_trunk;
        for (u, cache) in self.atrous_block.iter_mut().zip(&trace.atrous_block).rev() {
            g = u.backward(cache, g)?;
        }
        for (i, (u, cache)) in self.conv_block.iter_mut().zip(&trace.conv_block).enumerate().rev() {
            if i == 0 {
                add_into(&mut g, &g_shallow);
            }
            g = u.backward(cache, g)?;
        }
        dropout_backward(&mut g, trace.dropout_mask.as_deref());
        embedding_backward(&trace.ids, &g, &mut self.embedding.grad)
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, x: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a = *a + b;
    }
}
