//! 3D U-Net backbone with optional CoT blocks.
//!
//! Level `l` runs at `base_channels * 2^l` channels. Every convolution unit is
//! `conv 3x3x3 (bias-free) -> instance norm -> ReLU`.
//!
//! * encoder level 0: unit(in -> C0), unit(C0 -> C0), optional CoT
//! * encoder level l >= 1: unit(C(l-1) -> Cl, stride 2), unit(Cl -> Cl), optional CoT;
//!   the deepest level is the bottleneck
//! * decoder level l (deepest first): upsample x2, unit(C(l+1) -> Cl),
//!   concat with the level-l skip, unit(2Cl -> Cl), unit(Cl -> Cl), optional CoT
//! * head: 1x1x1 convolution with bias, `C0 -> num_classes` logits
//!
//! With `replace_conv_with_cot`, the second unit of each encoder level that
//! carries a CoT block is dropped and the block takes its place.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cot::{cot_forward, cot_param_count, CoTConfig, CoTParams, Fusion};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    /// Encoder levels (bottleneck = `depth - 1`) followed by a CoT block.
    pub cot_levels: Vec<usize>,
    /// Decoder levels (`0..depth-1`) followed by a CoT block.
    pub cot_decoder_levels: Vec<usize>,
    pub cot_kernel: usize,
    /// CoT attention width is `channels / cot_hidden_divisor` (at least 1).
    pub cot_hidden_divisor: usize,
    pub cot_normalize_attention: bool,
    pub cot_fusion: Fusion,
    pub replace_conv_with_cot: bool,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            num_classes: 4,
            depth: 4,
            base_channels: 8,
            cot_levels: (0..4).collect(),
            cot_decoder_levels: Vec::new(),
            cot_kernel: 3,
            cot_hidden_divisor: 1,
            cot_normalize_attention: false,
            cot_fusion: Fusion::Sum,
            replace_conv_with_cot: false,
            norm_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    /// Two levels at base width 8; trains on 32^3 patches in seconds per step.
    pub fn desk() -> Self {
        UNetConfig {
            depth: 2,
            cot_levels: vec![0, 1],
            ..Self::default()
        }
    }

    /// Four levels at base width 16 with CoT on every encoder level (~2.3M parameters).
    pub fn full() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 16,
            cot_levels: (0..4).collect(),
            ..Self::default()
        }
    }

    /// Same backbone without any CoT block.
    pub fn without_cot(&self) -> Self {
        UNetConfig {
            cot_levels: Vec::new(),
            cot_decoder_levels: Vec::new(),
            ..self.clone()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn cot_config(&self, channels: usize) -> CoTConfig {
        CoTConfig {
            channels,
            kernel: self.cot_kernel,
            attention_hidden: (channels / self.cot_hidden_divisor.max(1)).max(1),
            normalize_attention: self.cot_normalize_attention,
            fusion: self.cot_fusion,
        }
    }

    fn has_encoder_cot(&self, level: usize) -> bool {
        self.cot_levels.contains(&level)
    }

    fn has_decoder_cot(&self, level: usize) -> bool {
        self.cot_decoder_levels.contains(&level)
    }

    fn keeps_second_conv(&self, level: usize) -> bool {
        !(self.replace_conv_with_cot && self.has_encoder_cot(level))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::param(format!("unet: depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 12 {
            return Err(Error::param(format!("unet: depth {} is unreasonably deep", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::param("unet: channel counts must be >= 1"));
        }
        if let Some(&l) = self.cot_levels.iter().find(|&&l| l >= self.depth) {
            return Err(Error::param(format!(
                "unet: cot level {l} outside encoder levels 0..{}",
                self.depth
            )));
        }
        if let Some(&l) = self.cot_decoder_levels.iter().find(|&&l| l + 1 >= self.depth) {
            return Err(Error::param(format!(
                "unet: cot decoder level {l} outside decoder levels 0..{}",
                self.depth - 1
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::param("unet: norm_eps must be positive"));
        }
        self.cot_config(self.base_channels).validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel<P> {
    pub conv_a: P,
    pub conv_b: Option<P>,
    pub cot: Option<CoTParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel<P> {
    pub up_conv: P,
    pub conv_a: P,
    pub conv_b: P,
    pub cot: Option<CoTParams<P>>,
}

/// All network weights. `decoder[l]` restores level `l` from level `l + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<P> {
    pub encoder: Vec<EncoderLevel<P>>,
    pub decoder: Vec<DecoderLevel<P>>,
    pub head_weight: P,
    pub head_bias: P,
}

impl<P> UNetParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> UNetParams<Q> {
        UNetParams {
            encoder: self
                .encoder
                .iter()
                .map(|e| EncoderLevel {
                    conv_a: f(&e.conv_a),
                    conv_b: e.conv_b.as_ref().map(&mut *f),
                    cot: e.cot.as_ref().map(|c| c.map(&mut *f)),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderLevel {
                    up_conv: f(&d.up_conv),
                    conv_a: f(&d.conv_a),
                    conv_b: f(&d.conv_b),
                    cot: d.cot.as_ref().map(|c| c.map(&mut *f)),
                })
                .collect(),
            head_weight: f(&self.head_weight),
            head_bias: f(&self.head_bias),
        }
    }

    /// Visits `(name, weight)` in the canonical order used by the optimizer
    /// and checkpoints.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (l, e) in self.encoder.iter().enumerate() {
            f(format!("enc{l}.conv_a"), &e.conv_a);
            if let Some(b) = &e.conv_b {
                f(format!("enc{l}.conv_b"), b);
            }
            if let Some(c) = &e.cot {
                c.visit(&format!("enc{l}.cot."), f);
            }
        }
        for (l, d) in self.decoder.iter().enumerate() {
            f(format!("dec{l}.up_conv"), &d.up_conv);
            f(format!("dec{l}.conv_a"), &d.conv_a);
            f(format!("dec{l}.conv_b"), &d.conv_b);
            if let Some(c) = &d.cot {
                c.visit(&format!("dec{l}.cot."), f);
            }
        }
        f("head.weight".into(), &self.head_weight);
        f("head.bias".into(), &self.head_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut P)) {
        for (l, e) in self.encoder.iter_mut().enumerate() {
            f(format!("enc{l}.conv_a"), &mut e.conv_a);
            if let Some(b) = &mut e.conv_b {
                f(format!("enc{l}.conv_b"), b);
            }
            if let Some(c) = &mut e.cot {
                c.visit_mut(&format!("enc{l}.cot."), f);
            }
        }
        for (l, d) in self.decoder.iter_mut().enumerate() {
            f(format!("dec{l}.up_conv"), &mut d.up_conv);
            f(format!("dec{l}.conv_a"), &mut d.conv_a);
            f(format!("dec{l}.conv_b"), &mut d.conv_b);
            if let Some(c) = &mut d.cot {
                c.visit_mut(&format!("dec{l}.cot."), f);
            }
        }
        f("head.weight".into(), &mut self.head_weight);
        f("head.bias".into(), &mut self.head_bias);
    }

    pub fn flatten(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name, p)));
        out
    }
}

impl<T: Element> UNetParams<Tensor<T>> {
    /// Seeded fan-in uniform init; the head bias starts at zero.
    pub fn init(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |c_out: usize, c_in: usize| Tensor::uniform_fan_in(&[c_out, c_in, KERNEL, KERNEL, KERNEL], &mut rng);
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cots = Vec::new();
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            let c_in = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
            let conv_a = conv(c, c_in);
            let conv_b = cfg.keeps_second_conv(l).then(|| conv(c, c));
            encoder.push(EncoderLevel {
                conv_a,
                conv_b,
                cot: None,
            });
            if cfg.has_encoder_cot(l) {
                cots.push((true, l));
            }
        }
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        for l in 0..cfg.depth - 1 {
            let c = cfg.channels(l);
            decoder.push(DecoderLevel {
                up_conv: conv(c, cfg.channels(l + 1)),
                conv_a: conv(c, 2 * c),
                conv_b: conv(c, c),
                cot: None,
            });
            if cfg.has_decoder_cot(l) {
                cots.push((false, l));
            }
        }
        let head_weight = Tensor::uniform_fan_in(&[cfg.num_classes, cfg.base_channels, 1, 1, 1], &mut rng);
        for (enc, l) in cots {
            let p = CoTParams::init(&cfg.cot_config(cfg.channels(l)), &mut rng);
            if enc {
                encoder[l].cot = Some(p);
            } else {
                decoder[l].cot = Some(p);
            }
        }
        Ok(UNetParams {
            encoder,
            decoder,
            head_weight,
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> UNetParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    /// Binds as constants (no gradient tracking), for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> UNetParams<Var> {
        self.map(&mut |t| g.constant(t.clone()))
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Closed-form parameter count, computed without allocating.
pub fn unet_param_count(cfg: &UNetConfig) -> usize {
    let k3 = KERNEL * KERNEL * KERNEL;
    let c = |l: usize| cfg.channels(l);
    let mut total = 0;
    for l in 0..cfg.depth {
        let c_in = if l == 0 { cfg.in_channels } else { c(l - 1) };
        total += k3 * c_in * c(l);
        if cfg.keeps_second_conv(l) {
            total += k3 * c(l) * c(l);
        }
        if cfg.has_encoder_cot(l) {
            total += cot_param_count(&cfg.cot_config(c(l)));
        }
    }
    for l in 0..cfg.depth - 1 {
        // up_conv + conv_a (2C -> C) + conv_b
        total += k3 * (c(l + 1) * c(l) + 2 * c(l) * c(l) + c(l) * c(l));
        if cfg.has_decoder_cot(l) {
            total += cot_param_count(&cfg.cot_config(c(l)));
        }
    }
    total + cfg.num_classes * cfg.base_channels + cfg.num_classes
}

/// Shapes seen during one forward pass, per level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeTrace {
    pub encoder: Vec<Vec<usize>>,
    pub decoder: Vec<Vec<usize>>,
}

fn conv_unit<T: Element>(g: &mut Graph<T>, x: Var, w: Var, stride: usize, eps: T) -> Result<Var> {
    let y = g.conv3d(x, w, None, stride, 1)?;
    let y = g.instance_norm(y, eps)?;
    Ok(g.relu(y))
}

pub fn unet_forward<T: Element>(g: &mut Graph<T>, x: Var, params: &UNetParams<Var>, cfg: &UNetConfig) -> Result<Var> {
    Ok(unet_forward_traced(g, x, params, cfg)?.0)
}

/// Forward pass returning logits `[N, num_classes, H, W, D]` and the
/// per-level shapes.
pub fn unet_forward_traced<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &UNetParams<Var>,
    cfg: &UNetConfig,
) -> Result<(Var, ShapeTrace)> {
    cfg.validate()?;
    let (_, c, sp) = g.value(x).volume_dims("unet_forward")?;
    if c != cfg.in_channels {
        return Err(Error::dim(format!(
            "unet_forward: input has {c} channels, network expects {}",
            cfg.in_channels
        )));
    }
    let div = cfg.divisor();
    if sp.iter().any(|&e| e % div != 0) {
        return Err(Error::dim(format!(
            "unet_forward: spatial extents {sp:?} not divisible by {div}; pad the input first"
        )));
    }
    if params.encoder.len() != cfg.depth || params.decoder.len() + 1 != cfg.depth {
        return Err(Error::dim("unet_forward: parameters were built for a different depth"));
    }
    let eps = T::lit(cfg.norm_eps);
    let mut trace = ShapeTrace::default();
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for (l, level) in params.encoder.iter().enumerate() {
        let stride = if l == 0 { 1 } else { 2 };
        h = conv_unit(g, h, level.conv_a, stride, eps)?;
        if let Some(w) = level.conv_b {
            h = conv_unit(g, h, w, 1, eps)?;
        }
        if let Some(cot) = &level.cot {
            h = cot_forward(g, h, cot, &cfg.cot_config(cfg.channels(l)))?;
        }
        trace.encoder.push(g.value(h).shape().to_vec());
        skips.push(h);
    }
    for l in (0..cfg.depth - 1).rev() {
        let level = &params.decoder[l];
        let up = g.upsample_nearest3d(h, 2)?;
        let up = conv_unit(g, up, level.up_conv, 1, eps)?;
        let merged = g.concat_channels(&[skips[l], up])?;
        h = conv_unit(g, merged, level.conv_a, 1, eps)?;
        h = conv_unit(g, h, level.conv_b, 1, eps)?;
        if let Some(cot) = &level.cot {
            h = cot_forward(g, h, cot, &cfg.cot_config(cfg.channels(l)))?;
        }
        trace.decoder.push(g.value(h).shape().to_vec());
    }
    let logits = g.pointwise_conv(h, params.head_weight, Some(params.head_bias))?;
    Ok((logits, trace))
}

/// A configured network with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T: Element> {
    pub cfg: UNetConfig,
    pub params: UNetParams<Tensor<T>>,
}

impl<T: Element> UNet<T> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        let params = UNetParams::init(&cfg, seed)?;
        Ok(UNet { cfg, params })
    }

    /// Class probabilities for a `[N, C_in, H, W, D]` input, without gradient tracking.
    pub fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let logits = unet_forward(&mut g, xv, &p, &self.cfg)?;
        let probs = g.softmax_channels(logits)?;
        Ok(g.value(probs).clone())
    }
}
