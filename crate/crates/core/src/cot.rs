//! 3D contextual transformer (CoT) block.
//!
//! Given `X` with `C` channels:
//!
//! 1. `K = W_K X`, `Q = W_Q X`, `V = W_V X` (1x1x1 embeddings)
//! 2. `K1 = conv_kxkxk(K)`, the static context over neighbouring keys
//! 3. `A = W_delta (W_theta [K1, Q])`, two consecutive 1x1x1 convolutions
//! 4. `A = softmax_channels(A)` only when attention normalization is enabled
//! 5. `K2 = V * A`, the dynamic context
//! 6. `Y = K1 + K2`
//!
//! All convolutions are bias-free. Spatial shape is preserved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// How the static and dynamic contexts are merged into the block output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `Y = K1 + K2`.
    #[default]
    Sum,
    /// `Y = X`: the block is switched off but keeps its parameters.
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTConfig {
    pub channels: usize,
    /// Static-context kernel size; odd.
    pub kernel: usize,
    /// Width between the two 1x1x1 attention convolutions.
    pub attention_hidden: usize,
    pub normalize_attention: bool,
    pub fusion: Fusion,
}

impl CoTConfig {
    /// Defaults: `k = 3`, no attention bottleneck, unnormalized attention, sum fusion.
    pub fn new(channels: usize) -> Self {
        CoTConfig {
            channels,
            kernel: 3,
            attention_hidden: channels,
            normalize_attention: false,
            fusion: Fusion::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.attention_hidden == 0 {
            return Err(Error::param("cot: channels and attention_hidden must be >= 1"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::param(format!("cot: kernel must be odd and >= 1, got {}", self.kernel)));
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// Learned weights of one block. `P` is `Tensor<T>` for storage and [`Var`]
/// once bound into a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CoTParams<P> {
    pub w_k: P,
    pub w_v: P,
    pub w_q: P,
    pub w_ctx: P,
    pub w_theta: P,
    pub w_delta: P,
}

/// Parameter shapes in visit order.
pub fn cot_param_shapes(cfg: &CoTConfig) -> [(&'static str, [usize; 5]); 6] {
    let (c, k, h) = (cfg.channels, cfg.kernel, cfg.attention_hidden);
    [
        ("w_k", [c, c, 1, 1, 1]),
        ("w_v", [c, c, 1, 1, 1]),
        ("w_q", [c, c, 1, 1, 1]),
        ("w_ctx", [c, c, k, k, k]),
        ("w_theta", [h, 2 * c, 1, 1, 1]),
        ("w_delta", [c, h, 1, 1, 1]),
    ]
}

/// Number of scalars in [`CoTParams`]: `3C^2 + C^2 k^3 + 2C h + h C`.
pub fn cot_param_count(cfg: &CoTConfig) -> usize {
    let (c, k, h) = (cfg.channels, cfg.kernel, cfg.attention_hidden);
    3 * c * c + c * c * k * k * k + 2 * c * h + h * c
}

impl<T: Element> CoTParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &CoTConfig, rng: &mut R) -> Self {
        let [k, v, q, ctx, theta, delta] = cot_param_shapes(cfg).map(|(_, s)| Tensor::uniform_fan_in(&s, rng));
        CoTParams {
            w_k: k,
            w_v: v,
            w_q: q,
            w_ctx: ctx,
            w_theta: theta,
            w_delta: delta,
        }
    }

    /// Registers every weight as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> CoTParams<Var> {
        self.map(|t| g.param(t.clone()))
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

impl<P> CoTParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> CoTParams<Q> {
        CoTParams {
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_q: f(&self.w_q),
            w_ctx: f(&self.w_ctx),
            w_theta: f(&self.w_theta),
            w_delta: f(&self.w_delta),
        }
    }

    /// Visits `(name, weight)` in a fixed order; names are `prefix` + field.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}w_k"), &self.w_k);
        f(format!("{prefix}w_v"), &self.w_v);
        f(format!("{prefix}w_q"), &self.w_q);
        f(format!("{prefix}w_ctx"), &self.w_ctx);
        f(format!("{prefix}w_theta"), &self.w_theta);
        f(format!("{prefix}w_delta"), &self.w_delta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(format!("{prefix}w_k"), &mut self.w_k);
        f(format!("{prefix}w_v"), &mut self.w_v);
        f(format!("{prefix}w_q"), &mut self.w_q);
        f(format!("{prefix}w_ctx"), &mut self.w_ctx);
        f(format!("{prefix}w_theta"), &mut self.w_theta);
        f(format!("{prefix}w_delta"), &mut self.w_delta);
    }
}

/// Every intermediate map of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CoTTrace {
    pub keys: Var,
    pub queries: Var,
    pub values: Var,
    pub static_context: Var,
    pub attention: Var,
    pub dynamic_context: Var,
    pub output: Var,
}

pub fn cot_forward<T: Element>(g: &mut Graph<T>, x: Var, params: &CoTParams<Var>, cfg: &CoTConfig) -> Result<Var> {
    Ok(cot_forward_traced(g, x, params, cfg)?.output)
}

pub fn cot_forward_traced<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &CoTParams<Var>,
    cfg: &CoTConfig,
) -> Result<CoTTrace> {
    cfg.validate()?;
    let (_, c, _) = g.value(x).volume_dims("cot_forward")?;
    if c != cfg.channels {
        return Err(Error::dim(format!(
            "cot_forward: input has {c} channels, block configured for {}",
            cfg.channels
        )));
    }
    let keys = g.pointwise_conv(x, params.w_k, None)?;
    let queries = g.pointwise_conv(x, params.w_q, None)?;
    let values = g.pointwise_conv(x, params.w_v, None)?;
    let static_context = g.conv3d(keys, params.w_ctx, None, 1, cfg.padding())?;
    let merged = g.concat_channels(&[static_context, queries])?;
    let hidden = g.pointwise_conv(merged, params.w_theta, None)?;
    let mut attention = g.pointwise_conv(hidden, params.w_delta, None)?;
    if cfg.normalize_attention {
        attention = g.softmax_channels(attention)?;
    }
    let dynamic_context = g.mul(values, attention)?;
    let output = match cfg.fusion {
        Fusion::Sum => g.add(static_context, dynamic_context)?,
        Fusion::Bypass => x,
    };
    Ok(CoTTrace {
        keys,
        queries,
        values,
        static_context,
        attention,
        dynamic_context,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(vals: [f64; 7]) -> CoTParams<Tensor<f64>> {
        let t = |shape: &[usize], data: Vec<f64>| Tensor::new(shape.to_vec(), data).unwrap();
        CoTParams {
            w_k: t(&[1, 1, 1, 1, 1], vec![vals[0]]),
            w_v: t(&[1, 1, 1, 1, 1], vec![vals[1]]),
            w_q: t(&[1, 1, 1, 1, 1], vec![vals[2]]),
            w_ctx: t(&[1, 1, 1, 1, 1], vec![vals[3]]),
            w_theta: t(&[1, 2, 1, 1, 1], vec![vals[4], vals[5]]),
            w_delta: t(&[1, 1, 1, 1, 1], vec![vals[6]]),
        }
    }

    #[test]
    fn scalar_hand_trace() {
        // x = 2; K = 0.5x = 1; V = -1.5x = -3; Q = 2x = 4; K1 = 3K = 3;
        // hidden = 0.25*K1 + (-0.5)*Q = 0.75 - 2 = -1.25; A = 2*hidden = -2.5;
        // K2 = V*A = 7.5; Y = K1 + K2 = 10.5
        let mut cfg = CoTConfig::new(1);
        cfg.kernel = 1;
        let params = scalar_params([0.5, -1.5, 2.0, 3.0, 0.25, -0.5, 2.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 2.0));
        let p = params.bind(&mut g);
        let tr = cot_forward_traced(&mut g, x, &p, &cfg).unwrap();
        assert_eq!(g.value(tr.keys).data(), &[1.0]);
        assert_eq!(g.value(tr.values).data(), &[-3.0]);
        assert_eq!(g.value(tr.queries).data(), &[4.0]);
        assert_eq!(g.value(tr.static_context).data(), &[3.0]);
        assert_eq!(g.value(tr.attention).data(), &[-2.5]);
        assert_eq!(g.value(tr.dynamic_context).data(), &[7.5]);
        assert_eq!(g.value(tr.output).data(), &[10.5]);
    }

    #[test]
    fn param_count_examples() {
        let mut cfg = CoTConfig::new(1);
        cfg.kernel = 1;
        // 1 + 1 + 1 (embeddings) + 1 (context) + 2 (theta) + 1 (delta)
        assert_eq!(cot_param_count(&cfg), 7);
        let mut cfg = CoTConfig::new(2);
        cfg.attention_hidden = 2;
        assert_eq!(cot_param_count(&cfg), 132);
    }

    #[test]
    fn doubling_channels_quadruples_count() {
        for c in 1..6 {
            let mut a = CoTConfig::new(c);
            a.kernel = 1;
            let mut b = CoTConfig::new(2 * c);
            b.kernel = 1;
            assert_eq!(cot_param_count(&b), 4 * cot_param_count(&a));
        }
    }

    #[test]
    fn allocation_matches_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = CoTConfig::new(3);
        cfg.kernel = 5;
        cfg.attention_hidden = 2;
        let p = CoTParams::<Tensor<f32>>::init(&cfg, &mut rng);
        assert_eq!(p.numel(), cot_param_count(&cfg));
    }

    #[test]
    fn rejects_bad_config_and_channel_mismatch() {
        let mut cfg = CoTConfig::new(2);
        cfg.kernel = 2;
        assert!(cfg.validate().is_err());
        let cfg = CoTConfig::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CoTParams::<Tensor<f64>>::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
        assert!(matches!(cot_forward(&mut g, x, &pv, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn bypass_returns_input() {
        let mut cfg = CoTConfig::new(2);
        cfg.fusion = Fusion::Bypass;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CoTParams::<Tensor<f64>>::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = g.constant(Tensor::uniform_fan_in(&[1, 2, 3, 3, 3], &mut rng));
        let y = cot_forward(&mut g, x, &pv, &cfg).unwrap();
        assert_eq!(y, x);
    }
}
