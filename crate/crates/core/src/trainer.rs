//! Training: cosine schedule, adaptive-moment optimizer with decoupled weight
//! decay, the epoch loop, and the checkpoint container.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::preprocess::{crop_or_pad_pair, one_hot_labels, CropMode, LabelMask, Volume};
use crate::tensor::{DType, Element, Graph, Tensor};
use crate::unet::{unet_forward, UNet, UNetConfig, UNetParams};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// `0.5 * lr0 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::param(format!("cosine_lr: step {step} outside 0..={total_steps}")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `p <- p * (1 - lr * wd)` after the update.
    Decoupled,
    /// `g <- g + wd * p` before the update.
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 1e-5,
            decay: DecayMode::Decoupled,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::param(format!("optimizer.{key} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::param(format!("optimizer.eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param(format!(
                "optimizer.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One update of a single buffer. `t` is the 1-based step count used for
/// bias correction; `m` and `v` are the first and second moments (SGD uses
/// `m` as its momentum buffer and leaves `v` alone).
pub fn optimizer_step<T: Element>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(Error::dim("optimizer_step: parameter, gradient and moment lengths differ"));
    }
    if t == 0 {
        return Err(Error::param("optimizer_step: step count is 1-based"));
    }
    let wd = T::lit(cfg.weight_decay);
    let lr_t = T::lit(lr);
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let coupled = cfg.decay == DecayMode::Coupled;
    match cfg.kind {
        OptimizerKind::Adam => {
            let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
            let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
            let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
            let eps = T::lit(cfg.eps);
            for i in 0..p.len() {
                let gi = if coupled { g[i] + wd * p[i] } else { g[i] };
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
                if !coupled {
                    p[i] = p[i] * shrink;
                }
            }
        }
        OptimizerKind::Sgd => {
            let mu = T::lit(cfg.momentum);
            for i in 0..p.len() {
                let gi = if coupled { g[i] + wd * p[i] } else { g[i] };
                m[i] = mu * m[i] + gi;
                p[i] = p[i] - lr_t * m[i];
                if !coupled {
                    p[i] = p[i] * shrink;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    Random,
    Centered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fold: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Training patch extents.
    pub patch: [usize; 3],
    pub crop: CropKind,
    /// Global gradient-norm clip; 0 turns clipping off.
    pub grad_clip: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            fold: 0,
            checkpoint_every: 0,
            patch: [128; 3],
            crop: CropKind::Random,
            grad_clip: 0.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 10,
            patch: [32; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::param(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::param("train.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size must be >= 1"));
        }
        if self.patch.contains(&0) {
            return Err(Error::param("train.patch extents must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::param(format!("train.grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        self.optimizer.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Equality on everything but wall time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        (self.step, self.epoch, self.loss.to_bits(), self.lr.to_bits(), self.grad_norm.to_bits())
            == (other.step, other.epoch, other.loss.to_bits(), other.lr.to_bits(), other.grad_norm.to_bits())
    }
}

/// SHA-256 of the canonical JSON of a model configuration.
pub fn config_digest(cfg: &UNetConfig) -> [u8; 32] {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes()).into()
}

const CKPT_MAGIC: &[u8; 8] = b"COTSEGCK";
pub const CKPT_VERSION: u32 = 1;

/// Element type stored in a checkpoint file, read from its header.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    DType::from_code(bytes[12]).ok_or_else(|| Error::Checkpoint(format!("{}: unknown dtype code {}", path.display(), bytes[12])))
}

/// Parameters, optimizer moments and step count, tied to one model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub model: UNetConfig,
    pub step: u64,
    pub params: UNetParams<Tensor<T>>,
    /// First and second moments, in [`UNetParams::flatten`] order.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at {what} (offset {})", self.at)))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl<T: Element> Checkpoint<T> {
    pub fn fresh(model: UNetConfig, params: UNetParams<Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params.flatten().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Checkpoint {
            model,
            step: 0,
            params,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&config_digest(&self.model));
        out.extend_from_slice(&self.step.to_le_bytes());
        let json = serde_json::to_string(&self.model).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        let flat = self.params.flatten();
        out.extend_from_slice(&(3 * flat.len() as u32).to_le_bytes());
        let groups: [(&str, Vec<&Tensor<T>>); 3] = [
            ("param", flat.iter().map(|(_, t)| *t).collect()),
            ("m", self.m.iter().collect()),
            ("v", self.v.iter().collect()),
        ];
        for (group, tensors) in groups {
            for ((name, _), t) in flat.iter().zip(tensors) {
                let full = format!("{group}/{name}");
                out.extend_from_slice(&(full.len() as u16).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(T::DTYPE.code());
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &x in t.data() {
                    x.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(8, "magic")? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {CKPT_VERSION}")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != T::DTYPE.code() {
            let found = DType::from_code(dtype).map_or("unknown", |d| d.name());
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {found} buffers, expected {}",
                T::DTYPE.name()
            )));
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let step = r.u64("step")?;
        let json_len = r.u32("config length")? as usize;
        let json = std::str::from_utf8(r.take(json_len, "config")?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let model: UNetConfig =
            serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        if config_digest(&model) != digest {
            return Err(Error::Checkpoint("config digest does not match the embedded config".into()));
        }
        let mut params = UNetParams::<Tensor<T>>::init(&model, 0)?;
        let names: Vec<(String, Vec<usize>)> = params.flatten().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let count = r.u32("buffer count")? as usize;
        if count != 3 * names.len() {
            return Err(Error::Checkpoint(format!("{count} buffers, model needs {}", 3 * names.len())));
        }
        let mut groups: [Vec<Tensor<T>>; 3] = Default::default();
        for (gi, group) in ["param", "m", "v"].iter().enumerate() {
            for (name, shape) in &names {
                let want = format!("{group}/{name}");
                let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
                let got = r.take(len, "name")?;
                if got != want.as_bytes() {
                    return Err(Error::Checkpoint(format!(
                        "buffer {:?} where {want} was expected",
                        String::from_utf8_lossy(got)
                    )));
                }
                if r.u8("buffer dtype")? != T::DTYPE.code() {
                    return Err(Error::Checkpoint(format!("{want}: dtype differs from header")));
                }
                let ndim = r.u8("ndim")? as usize;
                let mut dims = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    dims.push(r.u32("shape")? as usize);
                }
                if &dims != shape {
                    return Err(Error::Checkpoint(format!("{want}: shape {dims:?}, model needs {shape:?}")));
                }
                let n: usize = dims.iter().product();
                let size = T::DTYPE.size();
                let raw = r.take(n * size, &want)?;
                let data = raw.chunks_exact(size).map(T::read_le).collect();
                groups[gi].push(Tensor::new(dims, data)?);
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let [p, m, v] = groups;
        let mut it = p.into_iter();
        params.visit_mut(&mut |_, t| *t = it.next().expect("one buffer per parameter"));
        Ok(Checkpoint {
            model,
            step,
            params,
            m,
            v,
        })
    }

    /// Writes atomically (temp file + rename) so a crash never leaves a torn file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fails with a checkpoint error unless `cfg` describes the stored model.
    pub fn expect_model(&self, cfg: &UNetConfig) -> Result<()> {
        if &self.model != cfg {
            return Err(Error::Checkpoint(format!(
                "checkpoint model (digest {}) differs from the configured model (digest {})",
                hex::encode(&config_digest(&self.model)[..8]),
                hex::encode(&config_digest(cfg)[..8])
            )));
        }
        Ok(())
    }

    pub fn into_model(self) -> UNet<T> {
        UNet {
            cfg: self.model,
            params: self.params,
        }
    }
}

/// Training loop over a fixed set of (z-scored) cases.
pub struct Trainer<T: Element> {
    pub loss: LossConfig,
    pub cfg: TrainConfig,
    pub state: Checkpoint<T>,
    cases: Vec<(Volume, LabelMask)>,
}

impl<T: Element> Trainer<T> {
    /// Fresh run; model weights are seeded from `cfg.seed`. Volumes are z-scored here.
    pub fn new(model: UNetConfig, loss: LossConfig, cfg: TrainConfig, cases: Vec<(Volume, LabelMask)>) -> Result<Self> {
        let params = UNetParams::init(&model, cfg.seed)?;
        Self::resume(Checkpoint::fresh(model, params), loss, cfg, cases)
    }

    pub fn resume(state: Checkpoint<T>, loss: LossConfig, cfg: TrainConfig, cases: Vec<(Volume, LabelMask)>) -> Result<Self> {
        state.model.validate()?;
        loss.validate()?;
        cfg.validate()?;
        let div = state.model.divisor();
        if cfg.patch.iter().any(|p| p % div != 0) {
            return Err(Error::param(format!(
                "train.patch {:?} must be divisible by {div} for depth {}",
                cfg.patch, state.model.depth
            )));
        }
        if cases.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        for (v, m) in &cases {
            if v.dims != m.dims() {
                return Err(Error::dim(format!("{}: image {:?} and labels {:?} differ", v.case_id, v.dims, m.dims())));
            }
        }
        let cases = cases.into_iter().map(|(v, m)| (v.zscore(), m)).collect();
        Ok(Trainer { loss, cfg, state, cases })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cases.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn model(&self) -> UNet<T> {
        UNet {
            cfg: self.state.model.clone(),
            params: self.state.params.clone(),
        }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.cases.len()).collect();
        let seed = self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xd134_2543_de82_ef95);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn batch(&self, step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let spe = self.steps_per_epoch();
        let (epoch, slot) = (step / spe, step % spe);
        let order = self.epoch_order(epoch);
        let members = &order[slot * self.cfg.batch_size..((slot + 1) * self.cfg.batch_size).min(order.len())];
        let [ph, pw, pd] = self.cfg.patch;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, &c) in members.iter().enumerate() {
            let (vol, mask) = &self.cases[c];
            let mode = match self.cfg.crop {
                CropKind::Centered => CropMode::Centered,
                CropKind::Random => CropMode::Random {
                    seed: self.cfg.seed ^ ((step * 64 + i) as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                },
            };
            let (v, m, _) = crop_or_pad_pair(vol, mask, self.cfg.patch, mode)?;
            x.extend(v.to_tensor::<T>().into_data());
            y.extend(one_hot_labels::<T>(&m).into_data());
        }
        let b = members.len();
        Ok((Tensor::new(vec![b, 4, ph, pw, pd], x)?, Tensor::new(vec![b, 4, ph, pw, pd], y)?))
    }

    /// Runs one optimization step. On a non-finite loss or gradient the
    /// state is left untouched and a numeric error is returned.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let step = self.state.step as usize;
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Contract(format!("training already finished ({total} steps)")));
        }
        let lr = cosine_lr(step, total, self.cfg.lr0)?;
        let (x, y) = self.batch(step)?;

        let mut g = Graph::new();
        let vars = self.state.params.bind(&mut g);
        let xv = g.constant(x);
        let logits = unet_forward(&mut g, xv, &vars, &self.state.model)?;
        let probs = g.softmax_channels(logits)?;
        let loss_var = combined_loss(&mut g, probs, &y, &self.loss)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", step + 1)));
        }
        g.backward(loss_var)?;

        let mut grads = Vec::new();
        let mut sq = 0.0;
        for (name, &v) in vars.flatten() {
            let grad = g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![T::zero(); g.value(v).len()]);
            if let Some(pos) = grad.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {name} (element {pos}) at step {}",
                    step + 1
                )));
            }
            sq += grad.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            grads.push(grad);
        }
        let grad_norm = sq.sqrt();
        let clip = self.cfg.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let s = T::lit(clip / grad_norm);
            grads.iter_mut().flatten().for_each(|x| *x = *x * s);
        }

        let t = self.state.step + 1;
        let opt = &self.cfg.optimizer;
        let (m, v) = (&mut self.state.m, &mut self.state.v);
        let mut i = 0;
        let mut result = Ok(());
        self.state.params.visit_mut(&mut |_, p| {
            if result.is_ok() {
                let (mb, vb) = (&mut m[i], &mut v[i]);
                result = optimizer_step(
                    p.data_mut(),
                    &grads[i],
                    mb.data_mut(),
                    vb.data_mut(),
                    t,
                    lr,
                    opt,
                );
            }
            i += 1;
        });
        result?;
        self.state.step = t;
        Ok(StepRecord {
            step: t,
            epoch: step / self.steps_per_epoch(),
            loss,
            lr,
            grad_norm,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Trains to the configured step count. With `out`, appends each record
    /// to `train_log.jsonl` and keeps `checkpoint.ckpt` current; a numeric
    /// abort saves the last good state before returning the error.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(file), path))
            }
            None => None,
        };
        let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));
        let mut records = Vec::new();
        while (self.state.step as usize) < self.total_steps() {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(p) = &ckpt_path {
                        self.state.save(p)?;
                    }
                    if let Some((w, path)) = log.as_mut() {
                        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            let every = self.cfg.checkpoint_every;
            if let Some(p) = &ckpt_path {
                if every > 0 && rec.step as usize % every == 0 {
                    self.state.save(p)?;
                }
            }
            records.push(rec);
        }
        if let Some(p) = &ckpt_path {
            self.state.save(p)?;
        }
        Ok(records)
    }
}

/// Reads a `train_log.jsonl` file.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

/// Creates `path` if needed and returns it; used for run directories.
pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        assert_eq!(cosine_lr(0, 100, 3e-4).unwrap(), 3e-4);
        assert_eq!(cosine_lr(50, 100, 3e-4).unwrap(), 1.5e-4);
        assert_eq!(cosine_lr(100, 100, 3e-4).unwrap(), 0.0);
        assert!(cosine_lr(101, 100, 3e-4).is_err());
        assert!(cosine_lr(0, 0, 3e-4).is_err());
    }

    #[test]
    fn adam_hand_trace() {
        let cfg = OptimizerConfig::default();
        let (mut p, g, mut m, mut v) = ([1.0f64], [0.5], [0.0], [0.0]);
        let lr = 1e-3;
        optimizer_step(&mut p, &g, &mut m, &mut v, 1, lr, &cfg).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = (1.0 - lr * 0.5 / (0.5 + 1e-8)) * (1.0 - lr * 1e-5);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_cases() {
        let mut cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (mut p, g, mut m, mut v) = ([0.7f64, -2.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]);
        optimizer_step(&mut p, &g, &mut m, &mut v, 1, 0.1, &cfg).unwrap();
        assert_eq!(p, [0.7, -2.0]);
        cfg.weight_decay = 0.01;
        optimizer_step(&mut p, &g, &mut m, &mut v, 2, 0.1, &cfg).unwrap();
        assert_eq!(p, [0.7 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn sgd_and_coupled_decay() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.0,
            weight_decay: 0.1,
            decay: DecayMode::Coupled,
            ..OptimizerConfig::default()
        };
        let (mut p, g, mut m, mut v) = ([2.0f64], [1.0], [0.0], [0.0]);
        optimizer_step(&mut p, &g, &mut m, &mut v, 1, 0.5, &cfg).unwrap();
        // g + wd * p = 1.2
        assert!((p[0] - (2.0 - 0.5 * 1.2)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 2,
            cot_levels: vec![1],
            ..UNetConfig::default()
        };
        let ck = Checkpoint::fresh(cfg.clone(), UNetParams::<Tensor<f64>>::init(&cfg, 3).unwrap());
        let bytes = ck.encode();
        assert_eq!(Checkpoint::<f64>::decode(&bytes).unwrap(), ck);
        assert!(matches!(Checkpoint::<f32>::decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::<f64>::decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::decode(&bad), Err(Error::Checkpoint(_))));
        let other = UNetConfig {
            base_channels: 4,
            ..cfg
        };
        assert!(ck.expect_model(&other).is_err());
    }
}
